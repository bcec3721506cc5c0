//! β-sweep harness comparing vanilla MF with KL-Mat on one dataset.
//!
//! Per seed the pipeline is: split, train vanilla, rank items from the
//! vanilla top-K output, fit `alpha`, then one KL-Mat run per β warm-started
//! from the shared vanilla model. Rows go to CSV as each seed finishes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{load_movielens, split_dataset, DataFormat, RatingsDataset, Split};
use crate::error::{Error, Result};
use crate::factor::{train_vanilla, FactorModel, TrainConfig};
use crate::klmat::train_klmat;
use crate::metrics::{evaluate, Coverage, MetricsReport, PredictionMode, RankMode};
use crate::rank::{fit_alpha_for_model, item_popularity_ranks, AlphaModel};

pub const DEFAULT_BETAS: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

pub const CSV_HEADER: &str =
    "beta,seed,mae_vanilla,mae_klmat,s_vanilla,s_klmat,symkl_vanilla,symkl_klmat,wall_seconds";

/// Everything besides β and the seed that defines one comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Vanilla-phase settings; `beta` and `seed` are overridden per cell.
    pub train: TrainConfig,
    /// KL-Mat epochs after the warm start. Zero reuses the vanilla model.
    pub klmat_epochs: usize,
    /// KL-Mat learning rate; defaults to the vanilla one.
    pub klmat_learning_rate: Option<f64>,
    pub top_k: usize,
    pub lambda: f64,
    pub split_ratio: f64,
    pub rank_mode: RankMode,
    pub prediction: PredictionMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            klmat_epochs: 10,
            klmat_learning_rate: None,
            top_k: 10,
            lambda: 0.1,
            split_ratio: 0.9,
            rank_mode: RankMode::Max,
            prediction: PredictionMode::Cosine,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(lr) = self.klmat_learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!(
                    "KL-Mat learning rate must be positive, got {lr}"
                )));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }

    fn vanilla_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            beta: 0.0,
            seed,
            ..self.train.clone()
        }
    }

    fn klmat_config(&self, seed: u64, beta: f64) -> TrainConfig {
        TrainConfig {
            beta,
            seed,
            epochs: self.klmat_epochs.max(1),
            learning_rate: self.klmat_learning_rate.unwrap_or(self.train.learning_rate),
            ..self.train.clone()
        }
    }
}

/// One (β, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub beta: f64,
    pub seed: u64,
    pub mae_vanilla: f64,
    pub mae_klmat: f64,
    pub s_vanilla: Option<f64>,
    pub s_klmat: Option<f64>,
    pub symkl_vanilla: f64,
    pub symkl_klmat: f64,
    /// Time spent on the KL-Mat phase and its evaluation.
    pub wall_seconds: f64,
}

fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

impl ExperimentRow {
    /// CSV line without the trailing newline.
    pub fn to_csv(&self) -> String {
        [
            fmt_real(self.beta),
            self.seed.to_string(),
            fmt_real(self.mae_vanilla),
            fmt_real(self.mae_klmat),
            fmt_real(self.s_vanilla.unwrap_or(f64::NAN)),
            fmt_real(self.s_klmat.unwrap_or(f64::NAN)),
            fmt_real(self.symkl_vanilla),
            fmt_real(self.symkl_klmat),
            fmt_real(self.wall_seconds),
        ]
        .join(",")
    }
}

/// Shared per-seed state: the split, the vanilla model and the fitted `alpha`.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub split: Split,
    pub coverage: Coverage,
    pub vanilla: FactorModel,
    pub vanilla_report: MetricsReport,
    pub alpha: AlphaModel,
}

/// Runs the β-independent part of the pipeline for one seed.
pub fn prepare_seed(ds: &RatingsDataset, config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    config.validate()?;
    let split = split_dataset(ds, config.split_ratio, seed).map_err(|e| e.in_stage("split"))?;
    let coverage = Coverage::from_train(&split.train);
    let vanilla = train_vanilla(&split.train, &config.vanilla_config(seed))
        .map_err(|e| e.in_stage("train_vanilla"))?;
    let ranks = item_popularity_ranks(&vanilla, config.top_k)
        .map_err(|e| e.in_stage("item_popularity_ranks"))?;
    let alpha = fit_alpha_for_model(&vanilla, &ranks.ranks_f64(), config.lambda)
        .map_err(|e| e.in_stage("fit_alpha"))?;
    log::info!(
        "seed {seed}: {} train / {} test ratings, {} items in vanilla top-{}, alpha: {} of {} non-zero after {} sweeps",
        split.train.len(),
        split.test.len(),
        ranks.ranked,
        config.top_k,
        alpha.alpha.iter().filter(|&&a| a > 0.0).count(),
        alpha.alpha.len(),
        alpha.sweeps()
    );
    let vanilla_report = evaluate(
        &vanilla,
        &split.test,
        &coverage,
        config.top_k,
        config.rank_mode,
        config.prediction,
    )
    .map_err(|e| e.in_stage("evaluate_vanilla"))?;
    if vanilla_report.skipped_cold_start > 0 {
        log::info!(
            "seed {seed}: {} cold-start test ratings skipped",
            vanilla_report.skipped_cold_start
        );
    }
    Ok(SeedRun {
        seed,
        split,
        coverage,
        vanilla,
        vanilla_report,
        alpha,
    })
}

/// Trains and evaluates KL-Mat for one β on a prepared seed.
pub fn run_cell(
    run: &SeedRun,
    config: &ExperimentConfig,
    beta: f64,
) -> Result<(FactorModel, ExperimentRow)> {
    let start = Instant::now();
    let klmat_config = config.klmat_config(run.seed, beta);
    klmat_config.validate()?;
    let model = if config.klmat_epochs == 0 {
        run.vanilla.clone()
    } else {
        train_klmat(&run.split.train, &klmat_config, &run.alpha, &run.vanilla)
            .map_err(|e| e.in_stage("train_klmat"))?
    };
    let report = evaluate(
        &model,
        &run.split.test,
        &run.coverage,
        config.top_k,
        config.rank_mode,
        config.prediction,
    )
    .map_err(|e| e.in_stage("evaluate_klmat"))?;
    let row = ExperimentRow {
        beta,
        seed: run.seed,
        mae_vanilla: run.vanilla_report.mae,
        mae_klmat: report.mae,
        s_vanilla: run.vanilla_report.matthew_s,
        s_klmat: report.matthew_s,
        symkl_vanilla: run.vanilla_report.sym_kl_to_uniform,
        symkl_klmat: report.sym_kl_to_uniform,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "seed {} beta {beta}: MAE {:.4} -> {:.4}, symKL {:.4} -> {:.4}, s {:?} -> {:?} (alt {:?} -> {:?}), distinct items {} -> {}",
        run.seed,
        row.mae_vanilla,
        row.mae_klmat,
        row.symkl_vanilla,
        row.symkl_klmat,
        row.s_vanilla,
        row.s_klmat,
        run.vanilla_report.matthew_s_alt,
        report.matthew_s_alt,
        run.vanilla_report.distinct_items,
        report.distinct_items
    );
    Ok((model, row))
}

/// Full pipeline for a single (β, seed) pair on an in-memory dataset.
pub fn run_single_on(
    ds: &RatingsDataset,
    config: &ExperimentConfig,
    beta: f64,
    seed: u64,
) -> Result<ExperimentRow> {
    let run = prepare_seed(ds, config, seed)?;
    Ok(run_cell(&run, config, beta)?.1)
}

/// Loads `dataset_path` and runs [`run_single_on`].
pub fn run_single(
    dataset_path: impl AsRef<Path>,
    format: DataFormat,
    config: &ExperimentConfig,
    beta: f64,
    seed: u64,
) -> Result<ExperimentRow> {
    config.validate()?;
    let ds = load_movielens(dataset_path, format).map_err(|e| e.in_stage("load"))?;
    run_single_on(&ds, config, beta, seed)
}

/// Every β x seed cell; rows are written to `out` (header first) in seed
/// order, then β order, as each seed completes.
pub fn run_sweep_on<W: Write>(
    ds: &RatingsDataset,
    config: &ExperimentConfig,
    betas: &[f64],
    seeds: &[u64],
    mut out: W,
) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one beta and one seed".into(),
        ));
    }
    if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::Config(format!("beta must be non-negative, got {b}")));
    }
    let io_err = |e| Error::io("<sweep output>", e);
    writeln!(out, "{CSV_HEADER}").map_err(io_err)?;
    let mut rows = Vec::with_capacity(betas.len() * seeds.len());
    for &seed in seeds {
        let run = prepare_seed(ds, config, seed)?;
        let cells: Vec<ExperimentRow> = betas
            .par_iter()
            .map(|&beta| run_cell(&run, config, beta).map(|(_, row)| row))
            .collect::<Result<_>>()?;
        for row in &cells {
            writeln!(out, "{}", row.to_csv()).map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        rows.extend(cells);
    }
    Ok(rows)
}

/// Loads the dataset and runs the sweep, streaming rows to `out_csv`. The
/// output file is created before any training starts.
pub fn run_sweep(
    dataset_path: impl AsRef<Path>,
    format: DataFormat,
    config: &ExperimentConfig,
    betas: &[f64],
    seeds: &[u64],
    out_csv: impl AsRef<Path>,
) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    let out_path = out_csv.as_ref();
    let file = File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let ds = load_movielens(dataset_path, format).map_err(|e| e.in_stage("load"))?;
    run_sweep_on(&ds, config, betas, seeds, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(out_path, source),
        other => other,
    })
}

const PLOT_COLUMNS: [&str; 5] = ["beta", "mae_vanilla", "mae_klmat", "s_vanilla", "s_klmat"];

/// Column positions and β range of a sweep CSV, as needed by the plot script.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCsvSummary {
    /// 1-based column numbers of [`PLOT_COLUMNS`], in that order.
    pub columns: [usize; 5],
    pub rows: usize,
    pub min_positive_beta: Option<f64>,
}

pub fn inspect_sweep_csv(csv_path: impl AsRef<Path>) -> Result<SweepCsvSummary> {
    let path = csv_path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{other:?}")),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .clone();
    let mut columns = [0usize; 5];
    for (slot, name) in columns.iter_mut().zip(PLOT_COLUMNS) {
        let pos = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                Error::Schema(format!("missing column `{name}` in {}", path.display()))
            })?;
        *slot = pos + 1;
    }
    let mut rows = 0;
    let mut min_positive_beta: Option<f64> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Schema(e.to_string()))?;
        let raw = record.get(columns[0] - 1).unwrap_or("");
        let beta: f64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("row {}: invalid beta `{raw}`", rows + 1)))?;
        if beta > 0.0 {
            min_positive_beta = Some(min_positive_beta.map_or(beta, |m: f64| m.min(beta)));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Schema(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok(SweepCsvSummary {
        columns,
        rows,
        min_positive_beta,
    })
}

fn gnuplot_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', "''"))
}

/// Builds a gnuplot script drawing MAE-vs-β and Matthew-vs-β overlays of
/// vanilla MF and KL-Mat from a sweep CSV, averaging over seeds.
pub fn plot_script(csv_path: &Path, image_path: &Path) -> Result<String> {
    let summary = inspect_sweep_csv(csv_path)?;
    let [beta, mae_v, mae_k, s_v, s_k] = summary.columns;
    // β = 0 is drawn one decade left of the smallest positive β
    let zero_at = summary
        .min_positive_beta
        .map_or(-4.0, |b| b.log10().floor() - 1.0);
    let data = gnuplot_quote(csv_path);
    let mut s = String::new();
    s.push_str("# Vanilla MF vs KL-Mat over the regularization sweep\n");
    s.push_str("set datafile separator ','\n");
    s.push_str("set datafile missing 'nan'\n");
    s.push_str("set terminal svg size 1200,500 dynamic\n");
    s.push_str(&format!("set output {}\n", gnuplot_quote(image_path)));
    s.push_str(&format!("zero_at = {zero_at:.1}\n"));
    s.push_str("bx(b) = (b > 0 ? log10(b) : zero_at)\n");
    s.push_str("set xlabel sprintf('log10(beta); beta = 0 drawn at %g', zero_at)\n");
    s.push_str("set key outside bottom center horizontal\n");
    s.push_str("set grid\n");
    s.push_str("set multiplot layout 1,2\n");
    s.push_str("set title 'MAE'\n");
    s.push_str("set ylabel 'MAE'\n");
    s.push_str(&format!(
        "plot {data} skip 1 using (bx(${beta})):{mae_v} smooth unique with linespoints title 'Vanilla MF', \\\n     {data} skip 1 using (bx(${beta})):{mae_k} smooth unique with linespoints title 'KL-Mat'\n"
    ));
    s.push_str("set title 'Degree of Matthew Effect'\n");
    s.push_str("set ylabel 's'\n");
    s.push_str(&format!(
        "plot {data} skip 1 using (bx(${beta})):{s_v} smooth unique with linespoints title 'Vanilla MF', \\\n     {data} skip 1 using (bx(${beta})):{s_k} smooth unique with linespoints title 'KL-Mat'\n"
    ));
    s.push_str("unset multiplot\n");
    Ok(s)
}

/// Writes [`plot_script`] to `out_path`; the script renders an SVG next to
/// it with the same stem.
pub fn emit_plot_script(csv_path: impl AsRef<Path>, out_path: impl AsRef<Path>) -> Result<PathBuf> {
    let out_path = out_path.as_ref();
    let image = out_path.with_extension("svg");
    let script = plot_script(csv_path.as_ref(), &image)?;
    std::fs::write(out_path, script).map_err(|e| Error::io(out_path, e))?;
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RatingsDataset {
        let mut triples = Vec::new();
        for user in 0..30u64 {
            for item in 0..40u64 {
                if (user * 5 + item * 11) % 3 == 0 || item < 2 {
                    triples.push((user, item, 1.0 + ((user * item) % 5) as f64));
                }
            }
        }
        RatingsDataset::from_triples(triples).unwrap()
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            klmat_epochs: 2,
            top_k: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn row_csv_format() {
        let row = ExperimentRow {
            beta: 0.1,
            seed: 3,
            mae_vanilla: 0.75,
            mae_klmat: 0.8,
            s_vanilla: None,
            s_klmat: Some(-0.5),
            symkl_vanilla: 1.0,
            symkl_klmat: 0.5,
            wall_seconds: 2.0,
        };
        let line = row.to_csv();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), CSV_HEADER.split(',').count());
        assert_eq!(fields[0], "1.0000000000000001e-1");
        assert_eq!(fields[1], "3");
        assert_eq!(fields[4], "nan");
        assert_eq!(fields[0].parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn sweep_row_count_and_determinism() {
        let ds = toy();
        let config = small_config();
        let mut a = Vec::new();
        let rows = run_sweep_on(&ds, &config, &[0.0, 0.01, 0.1, 1.0], &[1, 2, 3], &mut a).unwrap();
        assert_eq!(rows.len(), 12);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert_eq!(text.lines().next(), Some(CSV_HEADER));

        let mut b = Vec::new();
        let again = run_sweep_on(&ds, &config, &[0.0, 0.01, 0.1, 1.0], &[1, 2, 3], &mut b).unwrap();
        let strip = |r: &ExperimentRow| ExperimentRow {
            wall_seconds: 0.0,
            ..r.clone()
        };
        assert_eq!(
            rows.iter().map(strip).collect::<Vec<_>>(),
            again.iter().map(strip).collect::<Vec<_>>()
        );
        for r in &rows {
            assert!(r.mae_vanilla >= 0.0 && r.mae_klmat >= 0.0);
            assert!(r.symkl_vanilla >= 0.0 && r.symkl_klmat >= 0.0);
        }
    }

    #[test]
    fn single_cell_sweep() {
        let rows = run_sweep_on(&toy(), &small_config(), &[0.0], &[1], Vec::new()).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn zero_klmat_epochs_reproduce_vanilla() {
        let config = ExperimentConfig {
            klmat_epochs: 0,
            ..small_config()
        };
        let row = run_single_on(&toy(), &config, 0.0, 4).unwrap();
        assert_eq!(row.mae_vanilla, row.mae_klmat);
        assert_eq!(row.symkl_vanilla, row.symkl_klmat);
        assert_eq!(row.s_vanilla, row.s_klmat);
    }

    #[test]
    fn sweep_rejects_empty_inputs() {
        let ds = toy();
        let config = small_config();
        assert!(matches!(
            run_sweep_on(&ds, &config, &[], &[1], Vec::new()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_sweep_on(&ds, &config, &[0.1], &[], Vec::new()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_sweep_on(&ds, &config, &[-0.1], &[1], Vec::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unwritable_output_fails_before_loading() {
        let dir = tempfile::tempdir().unwrap();
        let missing_data = dir.path().join("no-such-ratings.csv");
        let bad_out = dir.path().join("missing-dir").join("out.csv");
        let err = run_sweep(
            &missing_data,
            DataFormat::CsvSmall,
            &small_config(),
            &[0.0],
            &[1],
            &bad_out,
        )
        .unwrap_err();
        match err {
            Error::Io { path, .. } => assert_eq!(path, bad_out),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plot_script_schema_checks() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, format!("{CSV_HEADER}\n")).unwrap();
        assert!(matches!(
            emit_plot_script(&empty, dir.path().join("a.gp")),
            Err(Error::Schema(_))
        ));

        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "beta,seed,mae_vanilla\n0,1,0.5\n").unwrap();
        assert!(matches!(
            emit_plot_script(&missing, dir.path().join("b.gp")),
            Err(Error::Schema(_))
        ));

        let good = dir.path().join("good.csv");
        let row = ExperimentRow {
            beta: 0.01,
            seed: 1,
            mae_vanilla: 0.7,
            mae_klmat: 0.72,
            s_vanilla: Some(-0.01),
            s_klmat: None,
            symkl_vanilla: 2.0,
            symkl_klmat: 1.5,
            wall_seconds: 0.1,
        };
        std::fs::write(&good, format!("{CSV_HEADER}\n{}\n", row.to_csv())).unwrap();
        let out = dir.path().join("plot.gp");
        let image = emit_plot_script(&good, &out).unwrap();
        assert_eq!(image, dir.path().join("plot.svg"));
        let script = std::fs::read_to_string(&out).unwrap();
        assert_eq!(script.matches("title 'Vanilla MF'").count(), 2);
        assert_eq!(script.matches("title 'KL-Mat'").count(), 2);
        assert!(script.contains("using (bx($1)):3"));
        assert!(script.contains("using (bx($1)):6"));
        assert!(script.contains("zero_at = -3.0"));
    }
}

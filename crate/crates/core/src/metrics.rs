//! Accuracy and fairness readouts: MAE, discrete KL divergence, and the
//! power-law "Degree of Matthew Effect" estimator over popularity ranks.

use std::str::FromStr;

use crate::data::RatingsDataset;
use crate::error::{Error, Result};
use crate::factor::{predict_dot, predict_rating, FactorModel};
use crate::rank::item_popularity_ranks;

/// Discrete probability vector over items (or rank buckets).
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityDistribution {
    probs: Vec<f64>,
}

impl PopularityDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config(
                "distribution needs at least one entry".into(),
            ));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Config(format!(
                "probabilities must be finite and >= 0, got {bad}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Config(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(PopularityDistribution { probs })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config(
                "distribution needs at least one entry".into(),
            ));
        }
        Ok(PopularityDistribution {
            probs: vec![1.0 / len as f64; len],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Normalizes appearance counts into a distribution.
pub fn popularity_distribution_from_counts(counts: &[u64]) -> Result<PopularityDistribution> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let total = total as f64;
    PopularityDistribution::new(counts.iter().map(|&c| c as f64 / total).collect())
}

/// Additive (Laplace) smoothing: `(c_j + pseudo) / (sum c + n * pseudo)`.
///
/// Top-K output leaves most items with a zero count, which makes the
/// reverse direction of the KL divergence against a uniform target infinite.
pub fn smoothed_popularity_distribution(
    counts: &[u64],
    pseudo: f64,
) -> Result<PopularityDistribution> {
    if !(pseudo.is_finite() && pseudo > 0.0) {
        return Err(Error::Config(format!(
            "pseudo-count must be positive, got {pseudo}"
        )));
    }
    if counts.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let total = counts.iter().sum::<u64>() as f64 + pseudo * counts.len() as f64;
    PopularityDistribution::new(
        counts
            .iter()
            .map(|&c| (c as f64 + pseudo) / total)
            .collect(),
    )
}

/// `sum_j p_j ln(p_j / q_j)`, with `0 ln(0 / q) = 0`.
pub fn kl_divergence(p: &PopularityDistribution, q: &PopularityDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Config(format!(
            "distributions of different lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (index, (&pj, &qj)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pj == 0.0 {
            continue;
        }
        if qj == 0.0 {
            return Err(Error::Support { index, p: pj });
        }
        total += pj * (pj / qj).ln();
    }
    Ok(total)
}

/// `KL(p || q) + KL(q || p)`.
pub fn symmetric_kl(p: &PopularityDistribution, q: &PopularityDistribution) -> Result<f64> {
    Ok(kl_divergence(p, q)? + kl_divergence(q, p)?)
}

/// Reference rank of the power-law exponent estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankMode {
    /// `s = 1 + n / sum ln(rank_i / rank_max)`; negative for any
    /// non-degenerate rank set since every log term is `<= 0`.
    #[default]
    Max,
    /// `s = 1 + n / sum ln(rank_i / rank_min)`, the usual continuous
    /// power-law MLE, which is `> 1`.
    Min,
}

impl FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(RankMode::Max),
            "min" => Ok(RankMode::Min),
            other => Err(Error::Config(format!("unknown rank mode `{other}`"))),
        }
    }
}

/// Degree of Matthew Effect over the ranks of items present in the output.
pub fn degree_of_matthew(ranks: &[f64], mode: RankMode) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(bad) = ranks.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
        return Err(Error::Config(format!(
            "ranks must be finite and >= 1, got {bad}"
        )));
    }
    let reference = match mode {
        RankMode::Max => ranks.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        RankMode::Min => ranks.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let log_sum: f64 = ranks.iter().map(|r| (r / reference).ln()).sum();
    if log_sum == 0.0 {
        return Err(Error::DegenerateEstimator);
    }
    Ok(1.0 + ranks.len() as f64 / log_sum)
}

/// How MAE turns factors into a rating prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictionMode {
    /// `r_max * cos(U_i, V_j)` clipped to `[0, r_max]`, on the scale the
    /// model is trained on.
    #[default]
    Cosine,
    /// The raw dot product `U_i . V_j`.
    RawDot,
}

/// Users and items observed in a training set.
#[derive(Debug, Clone)]
pub struct Coverage {
    users: Vec<bool>,
    items: Vec<bool>,
}

impl Coverage {
    pub fn from_train(train: &RatingsDataset) -> Self {
        let mut users = vec![false; train.num_users()];
        let mut items = vec![false; train.num_items()];
        for r in train.ratings() {
            users[r.user] = true;
            items[r.item] = true;
        }
        Coverage { users, items }
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.users.get(user).copied().unwrap_or(false)
            && self.items.get(item).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeReport {
    pub mae: f64,
    pub evaluated: usize,
    /// Test ratings whose user or item has no training observation.
    pub skipped_cold_start: usize,
}

fn mean_abs_error<F>(
    test: &RatingsDataset,
    coverage: &Coverage,
    mut predict: F,
) -> Result<MaeReport>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut total = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for r in test.ratings() {
        if !coverage.contains(r.user, r.item) {
            skipped += 1;
            continue;
        }
        total += (r.value - predict(r.user, r.item)?).abs();
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(MaeReport {
        mae: total / evaluated as f64,
        evaluated,
        skipped_cold_start: skipped,
    })
}

/// Mean absolute error over the test ratings covered by training data.
pub fn mae(
    model: &FactorModel,
    test: &RatingsDataset,
    coverage: &Coverage,
    mode: PredictionMode,
) -> Result<MaeReport> {
    let r_max = test.r_max();
    mean_abs_error(test, coverage, |i, j| match mode {
        PredictionMode::Cosine => predict_rating(model, i, j, r_max),
        PredictionMode::RawDot => predict_dot(model, i, j),
    })
}

/// MAE of predicting the training mean rating everywhere.
pub fn global_mean_mae(
    train: &RatingsDataset,
    test: &RatingsDataset,
    coverage: &Coverage,
) -> Result<MaeReport> {
    let mean = train.mean_rating().ok_or(Error::EmptyEvaluation)?;
    mean_abs_error(test, coverage, |_, _| Ok(mean))
}

/// Accuracy and fairness readouts for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    /// `None` when the estimator is degenerate.
    pub matthew_s: Option<f64>,
    /// The same estimator with the other reference rank.
    pub matthew_s_alt: Option<f64>,
    pub sym_kl_to_uniform: f64,
    pub skipped_cold_start: usize,
    /// Items appearing in at least one top-K list.
    pub distinct_items: usize,
}

/// Pseudo-count used to smooth top-K counts before the KL readout.
pub const KL_PSEUDO_COUNT: f64 = 1.0;

fn optional_estimate(ranks: &[f64], mode: RankMode) -> Result<Option<f64>> {
    match degree_of_matthew(ranks, mode) {
        Ok(s) => Ok(Some(s)),
        Err(Error::DegenerateEstimator) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Computes MAE on `test`, plus the popularity readouts of the model's
/// top-`top_k` output: the Matthew estimator over observed ranks and the
/// symmetric KL between the smoothed item distribution and uniform.
pub fn evaluate(
    model: &FactorModel,
    test: &RatingsDataset,
    coverage: &Coverage,
    top_k: usize,
    rank_mode: RankMode,
    prediction: PredictionMode,
) -> Result<MetricsReport> {
    let accuracy = mae(model, test, coverage, prediction)?;
    let popularity = item_popularity_ranks(model, top_k)?;
    let observed: Vec<f64> = popularity
        .observed_ranks()
        .iter()
        .map(|&r| r as f64)
        .collect();
    let alt = match rank_mode {
        RankMode::Max => RankMode::Min,
        RankMode::Min => RankMode::Max,
    };
    let p = smoothed_popularity_distribution(&popularity.counts, KL_PSEUDO_COUNT)?;
    let q = PopularityDistribution::uniform(p.len())?;
    Ok(MetricsReport {
        mae: accuracy.mae,
        matthew_s: optional_estimate(&observed, rank_mode)?,
        matthew_s_alt: optional_estimate(&observed, alt)?,
        sym_kl_to_uniform: symmetric_kl(&p, &q)?,
        skipped_cold_start: accuracy.skipped_cold_start,
        distinct_items: popularity.ranked,
    })
}

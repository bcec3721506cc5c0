//! Cosine-normalized matrix factorization trained by plain SGD.
//!
//! The per-rating loss is `(r / r_max - cos(U_i, V_j))^2`. Because the loss
//! only depends on directions, row norms drift freely during training; a
//! floor (`epsilon_guard`) keeps every row away from zero, where the cosine
//! is undefined.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Rating, RatingsDataset};
use crate::error::{Error, Result};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_JITTER: u64 = 2;

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hyperparameters shared by the vanilla and KL-regularized trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Latent dimension `k`.
    pub factors: usize,
    pub learning_rate: f64,
    /// Weight of the popularity regularizer. Ignored by the vanilla trainer.
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Row-norm floor, and the clamp point of the regularizer's log domain.
    pub epsilon_guard: f64,
    /// Upper bound of the uniform initialization range `(0, init_scale]`.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            factors: 10,
            learning_rate: 0.01,
            beta: 0.0,
            epochs: 30,
            seed: 1,
            epsilon_guard: 1e-8,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: String) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg))
            }
        }
        check(self.factors >= 1, "factors must be >= 1".into())?;
        check(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            format!("learning rate must be positive, got {}", self.learning_rate),
        )?;
        check(
            self.beta.is_finite() && self.beta >= 0.0,
            format!("beta must be non-negative, got {}", self.beta),
        )?;
        check(self.epochs >= 1, "epochs must be >= 1".into())?;
        check(
            self.epsilon_guard.is_finite() && self.epsilon_guard > 0.0,
            format!("epsilon guard must be positive, got {}", self.epsilon_guard),
        )?;
        check(
            self.init_scale.is_finite() && self.init_scale > 0.0,
            format!("init scale must be positive, got {}", self.init_scale),
        )
    }
}

/// User factors `U` (m x k) and item factors `V` (n x k), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    factors: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl FactorModel {
    /// Assembles a model from row-major factor buffers.
    pub fn from_parts(factors: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if factors == 0
            || !users.len().is_multiple_of(factors)
            || !items.len().is_multiple_of(factors)
        {
            return Err(Error::Config(format!(
                "factor buffers of length {} and {} do not split into rows of {factors}",
                users.len(),
                items.len()
            )));
        }
        if let Some(bad) = users.iter().chain(&items).find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite factor entry {bad}")));
        }
        Ok(FactorModel {
            factors,
            users,
            items,
        })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn num_users(&self) -> usize {
        self.users.len() / self.factors
    }

    pub fn num_items(&self) -> usize {
        self.items.len() / self.factors
    }

    pub fn user(&self, i: usize) -> &[f64] {
        &self.users[i * self.factors..(i + 1) * self.factors]
    }

    pub fn item(&self, j: usize) -> &[f64] {
        &self.items[j * self.factors..(j + 1) * self.factors]
    }

    pub fn user_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.users[i * self.factors..(i + 1) * self.factors]
    }

    pub fn item_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.items[j * self.factors..(j + 1) * self.factors]
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.users
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.items
    }

    /// Writes the text format: a `m n k` header line, then `m` rows of `U`
    /// and `n` rows of `V`, each as `k` space-separated values with 17
    /// significant digits.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "{} {} {}",
            self.num_users(),
            self.num_items(),
            self.factors
        )?;
        for row in self
            .users
            .chunks(self.factors)
            .chain(self.items.chunks(self.factors))
        {
            let line: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let mut next_line = || -> Result<Option<(usize, String)>> {
            match lines.next() {
                Some((idx, line)) => {
                    Ok(Some((idx + 1, line.map_err(|e| Error::io("<model>", e))?)))
                }
                None => Ok(None),
            }
        };
        let (_, header) = next_line()?.ok_or(Error::Parse {
            line: 1,
            message: "missing `m n k` header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: 1,
                message: format!("invalid header `{header}`"),
            })?;
        let [m, n, k] = dims[..] else {
            return Err(Error::Parse {
                line: 1,
                message: format!("header must hold exactly `m n k`, got `{header}`"),
            });
        };
        if k == 0 {
            return Err(Error::Parse {
                line: 1,
                message: "factor dimension must be >= 1".into(),
            });
        }
        let mut values = Vec::with_capacity((m + n) * k);
        for row in 0..m + n {
            let (line_no, line) = next_line()?.ok_or(Error::Parse {
                line: row + 2,
                message: format!("expected {} factor rows, found {row}", m + n),
            })?;
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid factor value `{tok}`"),
                })?);
            }
            if values.len() - before != k {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {k} values, found {}", values.len() - before),
                });
            }
        }
        let items = values.split_off(m * k);
        FactorModel::from_parts(k, values, items)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_text(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        FactorModel::read_text(BufReader::new(file))
    }
}

/// Draws every factor entry uniformly from `(0, init_scale]`.
pub fn init_model(num_users: usize, num_items: usize, config: &TrainConfig) -> Result<FactorModel> {
    config.validate()?;
    if num_users == 0 || num_items == 0 {
        return Err(Error::Config(format!(
            "model needs at least one user and one item, got {num_users} x {num_items}"
        )));
    }
    let mut rng = seeded_rng(config.seed, STREAM_INIT);
    let k = config.factors;
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| config.init_scale * (1.0 - rng.random::<f64>()))
            .collect()
    };
    let users = draw(num_users * k);
    let items = draw(num_items * k);
    Ok(FactorModel {
        factors: k,
        users,
        items,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, rejecting zero-norm inputs.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateFactor(format!(
            "zero-norm factor row (|u| = {nu}, |v| = {nv})"
        )));
    }
    // Cauchy-Schwarz holds exactly only in real arithmetic
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_indices(model: &FactorModel, i: usize, j: usize) -> Result<()> {
    if i >= model.num_users() || j >= model.num_items() {
        return Err(Error::Config(format!(
            "index ({i}, {j}) outside model of {} users x {} items",
            model.num_users(),
            model.num_items()
        )));
    }
    Ok(())
}

/// Cosine of user `i` and item `j`, in `[-1, 1]`.
pub fn predict_score(model: &FactorModel, i: usize, j: usize) -> Result<f64> {
    check_indices(model, i, j)?;
    cosine(model.user(i), model.item(j)).map_err(|e| match e {
        Error::DegenerateFactor(msg) => {
            Error::DegenerateFactor(format!("user {i}, item {j}: {msg}"))
        }
        other => other,
    })
}

/// Rating prediction `r_max * cos(U_i, V_j)`, clipped to `[0, r_max]`.
pub fn predict_rating(model: &FactorModel, i: usize, j: usize, r_max: f64) -> Result<f64> {
    Ok((r_max * predict_score(model, i, j)?).clamp(0.0, r_max))
}

/// Raw dot product `U_i . V_j`, with no rescaling.
pub fn predict_dot(model: &FactorModel, i: usize, j: usize) -> Result<f64> {
    check_indices(model, i, j)?;
    Ok(dot(model.user(i), model.item(j)))
}

/// `(target - cos(u, v))^2` for one rating, with `target = r / r_max`.
pub fn sample_residual_loss(target: f64, u: &[f64], v: &[f64]) -> Result<f64> {
    let e = target - cosine(u, v)?;
    Ok(e * e)
}

/// Sum over observed ratings of `(r / r_max - cos(U_i, V_j))^2`.
pub fn vanilla_loss(model: &FactorModel, ds: &RatingsDataset) -> Result<f64> {
    let r_max = ds.r_max();
    ds.ratings().iter().try_fold(0.0, |acc, r| {
        check_indices(model, r.user, r.item)?;
        Ok(acc + sample_residual_loss(r.value / r_max, model.user(r.user), model.item(r.item))?)
    })
}

/// Gradient of `(target - cos(u, v))^2` with respect to `u` and `v`, written
/// into `grad_u` / `grad_v`. Returns the cosine.
pub(crate) fn cosine_residual_gradients(
    target: f64,
    u: &[f64],
    v: &[f64],
    grad_u: &mut [f64],
    grad_v: &mut [f64],
) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateFactor(format!(
            "zero-norm factor row (|u| = {nu}, |v| = {nv})"
        )));
    }
    let inv = 1.0 / (nu * nv);
    let cos = dot(u, v) * inv;
    let e2 = -2.0 * (target - cos);
    let (cu, cv) = (cos / (nu * nu), cos / (nv * nv));
    for t in 0..u.len() {
        grad_u[t] = e2 * (v[t] * inv - cu * u[t]);
        grad_v[t] = e2 * (u[t] * inv - cv * v[t]);
    }
    Ok(cos)
}

/// Keeps factor rows above the norm floor by re-drawing rows that an update
/// would push below it.
#[derive(Debug, Clone)]
pub struct NormGuard {
    epsilon: f64,
    jitter_scale: f64,
    rng: ChaCha8Rng,
    rejitters: usize,
}

impl NormGuard {
    pub fn new(config: &TrainConfig) -> Self {
        NormGuard {
            epsilon: config.epsilon_guard,
            jitter_scale: config.init_scale / 100.0,
            rng: seeded_rng(config.seed, STREAM_JITTER),
            rejitters: 0,
        }
    }

    /// Number of rows re-drawn so far.
    pub fn rejitters(&self) -> usize {
        self.rejitters
    }

    fn update_row(&mut self, row: &mut [f64], grad: &[f64], lr: f64, scratch: &mut [f64]) -> bool {
        for ((s, x), g) in scratch.iter_mut().zip(row.iter()).zip(grad) {
            *s = x - lr * g;
        }
        if norm(scratch) >= self.epsilon {
            row.copy_from_slice(scratch);
            true
        } else {
            for x in row.iter_mut() {
                *x = self.jitter_scale * (1.0 - self.rng.random::<f64>());
            }
            self.rejitters += 1;
            false
        }
    }
}

/// Result of one SGD update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The update was rejected for the flagged rows, which were re-drawn.
    Rejittered {
        user: bool,
        item: bool,
    },
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_step(
    model: &mut FactorModel,
    i: usize,
    j: usize,
    grad_u: &[f64],
    grad_v: &[f64],
    lr: f64,
    guard: &mut NormGuard,
    scratch: &mut [f64],
) -> StepOutcome {
    let user_ok = guard.update_row(model.user_mut(i), grad_u, lr, scratch);
    let item_ok = guard.update_row(model.item_mut(j), grad_v, lr, scratch);
    if user_ok && item_ok {
        StepOutcome::Applied
    } else {
        StepOutcome::Rejittered {
            user: !user_ok,
            item: !item_ok,
        }
    }
}

/// One SGD step on the cosine residual of a single rating. Both gradients are
/// taken at the pre-update factors.
pub fn sgd_step_vanilla(
    model: &mut FactorModel,
    rating: &Rating,
    r_max: f64,
    learning_rate: f64,
    guard: &mut NormGuard,
) -> Result<StepOutcome> {
    check_indices(model, rating.user, rating.item)?;
    let k = model.factors();
    let (mut gu, mut gv, mut scratch) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    cosine_residual_gradients(
        rating.value / r_max,
        model.user(rating.user),
        model.item(rating.item),
        &mut gu,
        &mut gv,
    )?;
    Ok(apply_step(
        model,
        rating.user,
        rating.item,
        &gu,
        &gv,
        learning_rate,
        guard,
        &mut scratch,
    ))
}

/// Counters collected over a training run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainSummary {
    pub steps: usize,
    pub rejitters: usize,
}

/// Runs `config.epochs` passes of per-rating SGD over `train` in a freshly
/// shuffled order each epoch. `gradients` fills the user and item gradients
/// for one rating given the current rows.
pub(crate) fn run_epochs<F>(
    model: &mut FactorModel,
    train: &RatingsDataset,
    config: &TrainConfig,
    epochs: usize,
    mut gradients: F,
) -> Result<TrainSummary>
where
    F: FnMut(&Rating, &[f64], &[f64], &mut [f64], &mut [f64]) -> Result<()>,
{
    if train.num_users() > model.num_users() || train.num_items() > model.num_items() {
        return Err(Error::Config(format!(
            "dataset of {} users x {} items does not fit model of {} x {}",
            train.num_users(),
            train.num_items(),
            model.num_users(),
            model.num_items()
        )));
    }
    if model.factors() != config.factors {
        return Err(Error::Config(format!(
            "model has {} factors but config asks for {}",
            model.factors(),
            config.factors
        )));
    }
    let k = model.factors();
    let lr = config.learning_rate;
    let mut shuffle = seeded_rng(config.seed, STREAM_SHUFFLE);
    let mut guard = NormGuard::new(config);
    let (mut gu, mut gv, mut scratch) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut order: Vec<usize> = Vec::with_capacity(train.len());
    let mut summary = TrainSummary::default();

    for epoch in 0..epochs {
        order.clear();
        order.extend(0..train.len());
        order.shuffle(&mut shuffle);
        for (pos, &idx) in order.iter().enumerate() {
            let r = &train.ratings()[idx];
            gradients(r, model.user(r.user), model.item(r.item), &mut gu, &mut gv).map_err(
                |e| match e {
                    Error::Numeric(msg) | Error::DegenerateFactor(msg) => Error::Numeric(format!(
                        "epoch {epoch}, sample {pos} (user {}, item {}): {msg}",
                        r.user, r.item
                    )),
                    other => other,
                },
            )?;
            apply_step(
                model,
                r.user,
                r.item,
                &gu,
                &gv,
                lr,
                &mut guard,
                &mut scratch,
            );
            summary.steps += 1;
        }
        if log::log_enabled!(log::Level::Debug) {
            if let Ok(loss) = vanilla_loss(model, train) {
                log::debug!(
                    "epoch {epoch}: mean squared cosine residual {:.6}",
                    loss / train.len() as f64
                );
            }
        }
    }
    summary.rejitters = guard.rejitters();
    Ok(summary)
}

/// Continues unregularized training of `model` for `config.epochs` epochs.
pub fn continue_vanilla(
    model: &mut FactorModel,
    train: &RatingsDataset,
    config: &TrainConfig,
) -> Result<TrainSummary> {
    config.validate()?;
    let r_max = train.r_max();
    run_epochs(model, train, config, config.epochs, |r, u, v, gu, gv| {
        cosine_residual_gradients(r.value / r_max, u, v, gu, gv).map(|_| ())
    })
}

/// Trains the unregularized baseline from a seeded initialization.
pub fn train_vanilla(train: &RatingsDataset, config: &TrainConfig) -> Result<FactorModel> {
    let mut model = init_model(train.num_users(), train.num_items(), config)?;
    let summary = continue_vanilla(&mut model, train, config)?;
    if summary.rejitters > 0 {
        log::warn!(
            "{} factor rows re-drawn after hitting the norm floor",
            summary.rejitters
        );
    }
    Ok(model)
}

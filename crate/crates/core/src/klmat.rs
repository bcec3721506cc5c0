//! KL-regularized factorization (KL-Mat).
//!
//! Each observed rating contributes
//!
//! ```text
//! (r / r_max - cos(U_i, V_j))^2 + beta * (p - q) * (ln p - ln q)
//! p = 1 / (alpha_i * U_i . V_j),   q = 1 / n
//! ```
//!
//! where `alpha` is the frozen non-negative weight vector fitted against the
//! warm-start model's popularity ranks. `p` is the single-user surrogate of
//! the popularity rank term, taken as is (no renormalization across items).
//! When `alpha_i * U_i . V_j <= epsilon_guard` the regularizer is evaluated at
//! the clamp point and contributes no gradient.
//!
//! The gradient is derived directly from the per-sample loss above:
//!
//! ```text
//! d/dU_i = data term - beta * g'(p) * p^2 * alpha_i * V_j
//! g'(p)  = ln p - ln q + (p - q) / p
//! ```
//!
//! Written with `t7 = alpha_i * (U_i . V_j)^2`, the regularizer part is
//! `-beta * (ln p - ln q) / t7 - beta * (p - q) / (p * t7)` times `V_j`. The
//! closed form sometimes quoted for this loss carries `(ln p - ln q)` in the
//! numerator of the second term as well; that variant does not match finite
//! differences and is not used here.

use crate::data::RatingsDataset;
use crate::error::{Error, Result};
use crate::factor::{
    cosine_residual_gradients, dot, run_epochs, sample_residual_loss, FactorModel, TrainConfig,
    TrainSummary,
};
use crate::rank::AlphaModel;

/// Per-rating constants of the regularized loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlmatSampleContext {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub alpha_i: f64,
    /// Item count `n`; the uniform target is `q = 1 / n`.
    pub num_items: usize,
    pub beta: f64,
    pub r_max: f64,
    pub epsilon_guard: f64,
}

impl KlmatSampleContext {
    fn check(&self) -> Result<()> {
        let finite = [
            self.rating,
            self.alpha_i,
            self.beta,
            self.r_max,
            self.epsilon_guard,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite || self.num_items == 0 {
            return Err(Error::Numeric(format!(
                "invalid sample context for user {}, item {}: {self:?}",
                self.user, self.item
            )));
        }
        Ok(())
    }

    fn non_finite(&self, what: &str) -> Error {
        Error::Numeric(format!(
            "non-finite {what} at user {}, item {}",
            self.user, self.item
        ))
    }
}

/// `(p - q)(ln p - ln q)` with `p = 1 / max(x, epsilon)`; always `>= 0`.
pub fn popularity_penalty(x: f64, q: f64, epsilon: f64) -> f64 {
    let p = 1.0 / x.max(epsilon);
    (p - q) * (p.ln() - q.ln())
}

/// Derivative of [`popularity_penalty`] with respect to `x`; zero in the
/// clamped region `x <= epsilon`.
pub fn popularity_penalty_slope(x: f64, q: f64, epsilon: f64) -> f64 {
    if x <= epsilon {
        return 0.0;
    }
    let p = 1.0 / x;
    // d/dp [(p - q)(ln p - ln q)] times dp/dx = -p^2
    -(p.ln() - q.ln() + (p - q) / p) * p * p
}

/// Per-sample regularized loss.
pub fn klmat_sample_loss(ctx: &KlmatSampleContext, u: &[f64], v: &[f64]) -> Result<f64> {
    ctx.check()?;
    let data = sample_residual_loss(ctx.rating / ctx.r_max, u, v)?;
    if ctx.beta == 0.0 {
        return Ok(data);
    }
    let q = 1.0 / ctx.num_items as f64;
    let loss = data + ctx.beta * popularity_penalty(ctx.alpha_i * dot(u, v), q, ctx.epsilon_guard);
    if !loss.is_finite() {
        return Err(ctx.non_finite("loss"));
    }
    Ok(loss)
}

pub(crate) fn klmat_gradients_into(
    ctx: &KlmatSampleContext,
    u: &[f64],
    v: &[f64],
    grad_u: &mut [f64],
    grad_v: &mut [f64],
) -> Result<()> {
    cosine_residual_gradients(ctx.rating / ctx.r_max, u, v, grad_u, grad_v)?;
    if ctx.beta != 0.0 {
        let q = 1.0 / ctx.num_items as f64;
        let slope = popularity_penalty_slope(ctx.alpha_i * dot(u, v), q, ctx.epsilon_guard);
        if slope != 0.0 {
            let coef = ctx.beta * slope * ctx.alpha_i;
            for t in 0..u.len() {
                grad_u[t] += coef * v[t];
                grad_v[t] += coef * u[t];
            }
        }
    }
    if grad_u.iter().chain(grad_v.iter()).any(|g| !g.is_finite()) {
        return Err(ctx.non_finite("gradient"));
    }
    Ok(())
}

/// Analytic gradients of [`klmat_sample_loss`] with respect to `U_i` and `V_j`.
pub fn klmat_gradients(
    ctx: &KlmatSampleContext,
    u: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    ctx.check()?;
    if u.len() != v.len() {
        return Err(Error::Config(format!(
            "factor rows of different lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut gu, mut gv) = (vec![0.0; u.len()], vec![0.0; v.len()]);
    klmat_gradients_into(ctx, u, v, &mut gu, &mut gv)?;
    Ok((gu, gv))
}

/// Continues SGD from `warm_start` on the regularized loss with `alpha` held
/// fixed, for `config.epochs` epochs.
pub fn train_klmat(
    train: &RatingsDataset,
    config: &TrainConfig,
    alpha: &AlphaModel,
    warm_start: &FactorModel,
) -> Result<FactorModel> {
    let mut model = warm_start.clone();
    let summary = continue_klmat(&mut model, train, config, alpha)?;
    if summary.rejitters > 0 {
        log::warn!(
            "{} factor rows re-drawn after hitting the norm floor",
            summary.rejitters
        );
    }
    Ok(model)
}

/// In-place variant of [`train_klmat`].
pub fn continue_klmat(
    model: &mut FactorModel,
    train: &RatingsDataset,
    config: &TrainConfig,
    alpha: &AlphaModel,
) -> Result<TrainSummary> {
    config.validate()?;
    if alpha.alpha.len() != model.num_users() {
        return Err(Error::Config(format!(
            "alpha has {} weights for {} users",
            alpha.alpha.len(),
            model.num_users()
        )));
    }
    if let Some(bad) = alpha.alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::Config(format!(
            "alpha weights must be finite and >= 0, got {bad}"
        )));
    }
    let num_items = model.num_items();
    let r_max = train.r_max();
    run_epochs(model, train, config, config.epochs, |r, u, v, gu, gv| {
        let ctx = KlmatSampleContext {
            user: r.user,
            item: r.item,
            rating: r.value,
            alpha_i: alpha.alpha[r.user],
            num_items,
            beta: config.beta,
            r_max,
            epsilon_guard: config.epsilon_guard,
        };
        klmat_gradients_into(&ctx, u, v, gu, gv)
    })
}

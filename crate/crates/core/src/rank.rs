//! Item popularity ranks from top-K recommendation lists, and the
//! non-negative Lasso fit of per-user weights that approximates those ranks
//! by a linear combination of user-item dot products.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factor::{dot, norm, FactorModel};

/// Appearance counts and popularity ranks of items in the users' top-K lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityRanks {
    /// Times each item appears across all users' top-K lists.
    pub counts: Vec<u64>,
    /// Rank per item; 1 = most recommended. Items that never appear share
    /// the sentinel rank `ranked + 1`.
    pub ranks: Vec<usize>,
    /// Number of items with a non-zero count.
    pub ranked: usize,
}

impl PopularityRanks {
    pub fn sentinel(&self) -> usize {
        self.ranked + 1
    }

    /// Ranks of the items that actually appear in some top-K list.
    pub fn observed_ranks(&self) -> Vec<usize> {
        self.ranks
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(&r, _)| r)
            .collect()
    }

    pub fn ranks_f64(&self) -> Vec<f64> {
        self.ranks.iter().map(|&r| r as f64).collect()
    }
}

/// Indices of the `top_k` highest-scoring items, ties broken by ascending index.
pub fn top_k_items(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if top_k < idx.len() {
        idx.select_nth_unstable_by(top_k, by_score);
        idx.truncate(top_k);
    }
    idx.sort_unstable_by(by_score);
    idx
}

/// Turns appearance counts into dense ranks ordered by descending count,
/// ties broken by ascending item index.
pub fn ranks_from_counts(counts: Vec<u64>) -> PopularityRanks {
    let mut order: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let ranked = order.len();
    let mut ranks = vec![ranked + 1; counts.len()];
    for (pos, &j) in order.iter().enumerate() {
        ranks[j] = pos + 1;
    }
    PopularityRanks {
        counts,
        ranks,
        ranked,
    }
}

/// Per-user top-K lists by cosine score; lists are returned in user order.
pub fn top_k_lists(model: &FactorModel, top_k: usize) -> Result<Vec<Vec<usize>>> {
    let n = model.num_items();
    if top_k == 0 || top_k > n {
        return Err(Error::Config(format!(
            "top_k must lie in [1, {n}], got {top_k}"
        )));
    }
    let item_norms: Vec<f64> = (0..n).map(|j| norm(model.item(j))).collect();
    if let Some(j) = item_norms.iter().position(|&x| x == 0.0) {
        return Err(Error::DegenerateFactor(format!(
            "item {j} has a zero-norm factor row"
        )));
    }
    (0..model.num_users())
        .into_par_iter()
        .map(|i| {
            let u = model.user(i);
            let nu = norm(u);
            if nu == 0.0 {
                return Err(Error::DegenerateFactor(format!(
                    "user {i} has a zero-norm factor row"
                )));
            }
            let scores: Vec<f64> = (0..n)
                .map(|j| dot(u, model.item(j)) / (nu * item_norms[j]))
                .collect();
            Ok(top_k_items(&scores, top_k))
        })
        .collect()
}

/// Popularity ranks of items in the model's top-K output.
pub fn item_popularity_ranks(model: &FactorModel, top_k: usize) -> Result<PopularityRanks> {
    let mut counts = vec![0u64; model.num_items()];
    for list in top_k_lists(model, top_k)? {
        for j in list {
            counts[j] += 1;
        }
    }
    Ok(ranks_from_counts(counts))
}

/// Non-negative weights `alpha` with `rank_j ~ sum_i alpha_i U_i . V_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaModel {
    pub alpha: Vec<f64>,
    pub target_ranks: Vec<f64>,
    pub lambda: f64,
    /// Objective value after each full coordinate sweep.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl AlphaModel {
    pub fn sweeps(&self) -> usize {
        self.objective_trace.len()
    }

    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

pub const MAX_SWEEPS: usize = 10_000;
pub const TOLERANCE: f64 = 1e-8;

/// Design matrix `D` (n x m, row-major) with `D[j][i] = U_i . V_j`.
pub fn design_matrix(users: &[f64], items: &[f64], factors: usize) -> Result<Vec<f64>> {
    if factors == 0 || !users.len().is_multiple_of(factors) || !items.len().is_multiple_of(factors)
    {
        return Err(Error::Config(
            "factor buffers do not match the factor count".into(),
        ));
    }
    let m = users.len() / factors;
    let design: Vec<f64> = items
        .par_chunks(factors)
        .flat_map_iter(|v| users.chunks(factors).map(move |u| dot(u, v)))
        .collect();
    debug_assert_eq!(design.len(), m * (items.len() / factors));
    if let Some(pos) = design.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite design entry for item {}, user {}",
            pos / m.max(1),
            pos % m.max(1)
        )));
    }
    Ok(design)
}

/// `||D alpha - r||^2 + lambda * sum(alpha)` for `alpha >= 0`.
pub fn lasso_objective(
    design: &[f64],
    m: usize,
    target: &[f64],
    alpha: &[f64],
    lambda: f64,
) -> f64 {
    let sq: f64 = design
        .chunks(m)
        .zip(target)
        .map(|(row, r)| {
            let e = dot(row, alpha) - r;
            e * e
        })
        .sum();
    sq + lambda * alpha.iter().sum::<f64>()
}

/// Solves `min_{alpha >= 0} ||D alpha - r||^2 + lambda ||alpha||_1` by cyclic
/// coordinate descent over the Gram matrix `D^T D`.
///
/// Each coordinate update is the clamp `alpha_i = max(0, alpha_i - (g_i + lambda/2) / G_ii)`
/// with `g = G alpha - D^T r`. Stops once a sweep moves no coordinate by
/// more than [`TOLERANCE`], or after [`MAX_SWEEPS`] sweeps.
pub fn fit_alpha_design(
    design: &[f64],
    m: usize,
    target: &[f64],
    lambda: f64,
) -> Result<AlphaModel> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    if m == 0 || design.len() != m * target.len() {
        return Err(Error::Config(format!(
            "design of length {} does not match {} targets x {m} users",
            design.len(),
            target.len()
        )));
    }
    if design.iter().chain(target).any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "non-finite design matrix or target entry".into(),
        ));
    }

    // Gram matrix G = D^T D and c = D^T r
    let mut gram = vec![0.0; m * m];
    let mut c = vec![0.0; m];
    for (row, &r) in design.chunks(m).zip(target) {
        for a in 0..m {
            let da = row[a];
            if da == 0.0 {
                continue;
            }
            c[a] += da * r;
            let g = &mut gram[a * m..(a + 1) * m];
            for b in 0..m {
                g[b] += da * row[b];
            }
        }
    }
    let rr: f64 = target.iter().map(|r| r * r).sum();
    let half_lambda = 0.5 * lambda;

    let mut alpha = vec![0.0; m];
    // gradient (up to a factor 2) of the squared loss: G alpha - c
    let mut grad: Vec<f64> = c.iter().map(|x| -x).collect();
    let mut trace = Vec::new();
    let mut converged = false;

    for _ in 0..MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for i in 0..m {
            let gii = gram[i * m + i];
            let new = if gii > 0.0 {
                (alpha[i] - (grad[i] + half_lambda) / gii).max(0.0)
            } else {
                0.0
            };
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                let col = &gram[i * m..(i + 1) * m];
                for (g, &gi) in grad.iter_mut().zip(col) {
                    *g += delta * gi;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        // alpha^T G alpha - 2 c^T alpha + r^T r = alpha^T (g - c) + r^T r
        let quad: f64 = alpha
            .iter()
            .zip(grad.iter().zip(&c))
            .map(|(a, (g, ci))| a * (g - ci))
            .sum();
        let objective = (quad + rr).max(0.0) + lambda * alpha.iter().sum::<f64>();
        if !objective.is_finite() {
            return Err(Error::Numeric("non-finite Lasso objective".into()));
        }
        trace.push(objective);
        if max_change < TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("non-negative Lasso stopped after {MAX_SWEEPS} sweeps without converging");
    }
    Ok(AlphaModel {
        alpha,
        target_ranks: target.to_vec(),
        lambda,
        objective_trace: trace,
        converged,
    })
}

/// Fits non-negative `alpha` so that `sum_i alpha_i U_i . V_j` tracks
/// `target_ranks[j]`. `users` and `items` are row-major factor buffers.
pub fn fit_alpha(
    users: &[f64],
    items: &[f64],
    factors: usize,
    target_ranks: &[f64],
    lambda: f64,
) -> Result<AlphaModel> {
    let design = design_matrix(users, items, factors)?;
    let n = items.len() / factors;
    if target_ranks.len() != n {
        return Err(Error::Config(format!(
            "{} target ranks for {n} items",
            target_ranks.len()
        )));
    }
    fit_alpha_design(&design, users.len() / factors, target_ranks, lambda)
}

/// Convenience wrapper fitting against a model's factors.
pub fn fit_alpha_for_model(
    model: &FactorModel,
    target_ranks: &[f64],
    lambda: f64,
) -> Result<AlphaModel> {
    fit_alpha(
        model.user_factors(),
        model.item_factors(),
        model.factors(),
        target_ranks,
        lambda,
    )
}

/// `sum_i alpha_i U_i . V_j` for item `j`.
pub fn approx_rank(alpha: &AlphaModel, model: &FactorModel, j: usize) -> f64 {
    let v = model.item(j);
    alpha
        .alpha
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != 0.0)
        .map(|(i, &a)| a * dot(model.user(i), v))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(m: usize, n: usize, k: usize, seed: u64) -> FactorModel {
        let mut rng = seeded_rng(seed, 9);
        let users = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let items = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        FactorModel::from_parts(k, users, items).unwrap()
    }

    #[test]
    fn unanimous_top_item_ranks_first() {
        let m = FactorModel::from_parts(
            2,
            vec![1.0, 0.1, 1.0, 0.2],
            vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5],
        )
        .unwrap();
        let ranks = item_popularity_ranks(&m, 1).unwrap();
        assert_eq!(ranks.counts, vec![2, 0, 0]);
        assert_eq!(ranks.ranks, vec![1, 2, 2]);
        assert_eq!(ranks.sentinel(), 2);
    }

    #[test]
    fn tie_rule() {
        let r = ranks_from_counts(vec![5, 5, 2]);
        assert_eq!(r.ranks, vec![1, 2, 3]);
        let r = ranks_from_counts(vec![0, 2, 5, 2]);
        assert_eq!(r.ranks, vec![4, 2, 1, 3]);
        assert_eq!(r.observed_ranks(), vec![2, 1, 3]);
    }

    #[test]
    fn top_k_tie_by_index() {
        assert_eq!(top_k_items(&[0.5, 0.9, 0.9, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_items(&[0.5, 0.5, 0.5], 3), vec![0, 1, 2]);
    }

    #[test]
    fn top_k_out_of_range() {
        let m = random_model(2, 3, 2, 1);
        assert!(matches!(
            item_popularity_ranks(&m, 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            item_popularity_ranks(&m, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ranks_match_bruteforce_recount() {
        let model = random_model(20, 30, 4, 17);
        let got = item_popularity_ranks(&model, 5).unwrap();

        // brute force: full sort per user, then count and rank by repeated max search
        let mut counts = vec![0u64; 30];
        for i in 0..20 {
            let mut scored: Vec<(f64, usize)> = (0..30)
                .map(|j| {
                    let (u, v) = (model.user(i), model.item(j));
                    let c = dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt());
                    (c, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, j) in scored.iter().take(5) {
                counts[j] += 1;
            }
        }
        let mut ranks = vec![0usize; 30];
        let mut taken = [false; 30];
        let nonzero = counts.iter().filter(|&&c| c > 0).count();
        for r in 1..=nonzero {
            let mut best: Option<usize> = None;
            for j in 0..30 {
                if taken[j] || counts[j] == 0 {
                    continue;
                }
                if best.is_none_or(|b| counts[j] > counts[b]) {
                    best = Some(j);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            ranks[b] = r;
        }
        for j in 0..30 {
            if counts[j] == 0 {
                ranks[j] = nonzero + 1;
            }
        }
        assert_eq!(got.counts, counts);
        assert_eq!(got.ranks, ranks);
    }

    #[test]
    fn ranks_invariant_under_uniform_rescaling() {
        let model = random_model(15, 25, 3, 4);
        let scaled = FactorModel::from_parts(
            3,
            model.user_factors().iter().map(|x| x * 3.5).collect(),
            model.item_factors().iter().map(|x| x * 3.5).collect(),
        )
        .unwrap();
        assert_eq!(
            item_popularity_ranks(&model, 4).unwrap(),
            item_popularity_ranks(&scaled, 4).unwrap()
        );
    }

    #[test]
    fn zero_target_gives_zero_alpha() {
        let model = random_model(4, 6, 3, 2);
        let fit = fit_alpha_for_model(&model, &[0.0; 6], 0.1).unwrap();
        assert!(fit.alpha.iter().all(|&a| a == 0.0));
        assert!(fit.converged);
    }

    #[test]
    fn single_user_closed_form() {
        let mut rng = seeded_rng(8, 8);
        for _ in 0..20 {
            let d: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..10.0)).collect();
            let fit = fit_alpha_design(&d, 1, &r, 0.0).unwrap();
            let expect = (dot(&d, &r) / dot(&d, &d)).max(0.0);
            assert!(
                (fit.alpha[0] - expect).abs() <= 1e-10 * expect.max(1.0),
                "{} vs {expect}",
                fit.alpha[0]
            );
        }
    }

    #[test]
    fn rejects_non_finite_design() {
        let err = fit_alpha_design(&[1.0, f64::NAN], 1, &[1.0, 2.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = fit_alpha_design(&[1.0, 2.0], 1, &[1.0, 2.0], -0.1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn approx_rank_examples() {
        let model = random_model(5, 7, 3, 21);
        let zero = AlphaModel {
            alpha: vec![0.0; 5],
            target_ranks: vec![],
            lambda: 0.0,
            objective_trace: vec![],
            converged: true,
        };
        assert!((0..7).all(|j| approx_rank(&zero, &model, j) == 0.0));
        let mut one_hot = zero.clone();
        one_hot.alpha[2] = 1.0;
        for j in 0..7 {
            assert_eq!(
                approx_rank(&one_hot, &model, j),
                dot(model.user(2), model.item(j))
            );
        }
        let mut rng = seeded_rng(1, 1);
        let dense = AlphaModel {
            alpha: (0..5).map(|_| rng.random_range(0.0..3.0)).collect(),
            ..zero
        };
        for j in 0..7 {
            let mut naive = 0.0;
            for i in 0..5 {
                let mut d = 0.0;
                for t in 0..3 {
                    d += model.user(i)[t] * model.item(j)[t];
                }
                naive += dense.alpha[i] * d;
            }
            assert!((approx_rank(&dense, &model, j) - naive).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn coordinate_descent_invariants(seed: u64, m in 1usize..6, n in 1usize..10, lambda in 0.0f64..2.0) {
            let model = random_model(m, n, 3, seed);
            let mut rng = seeded_rng(seed, 3);
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(1..=n) as f64).collect();
            let fit = fit_alpha_for_model(&model, &target, lambda).unwrap();
            prop_assert!(fit.alpha.iter().all(|&a| a >= 0.0));
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            let design = design_matrix(model.user_factors(), model.item_factors(), 3).unwrap();
            let direct = lasso_objective(&design, m, &target, &fit.alpha, lambda);
            prop_assert!((direct - fit.objective()).abs() <= 1e-8 * direct.max(1.0));
        }
    }
}

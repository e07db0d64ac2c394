//! Subsampling baselines and second-moment utilities.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{homogenize, RegressionDataset};
use crate::error::{Error, Result};

/// Statistical leverage of each row together with the numerical rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverageProfile {
    pub scores: Vec<f64>,
    pub rank: usize,
}

fn check_subsample_size(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "subsample size {m} must lie in [1, {n}]"
        )));
    }
    Ok(())
}

/// `m` rows drawn uniformly without replacement.
pub fn random_subsample<R: Rng + ?Sized>(
    ds: &RegressionDataset,
    m: usize,
    rng: &mut R,
) -> Result<RegressionDataset> {
    check_subsample_size(m, ds.n())?;
    let idx = sample(rng, ds.n(), m).into_vec();
    ds.select_rows(&idx)
}

/// `score_i = x_iᵀ (XᵀX)⁺ x_i`, from the left singular vectors whose singular
/// values exceed `max(n, p)·σ_max·1e-12`.
pub fn leverage_scores(x: &DMatrix<f64>) -> Result<LeverageProfile> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(Error::Empty("leverage scores need a nonempty matrix".into()));
    }
    let svd = x.clone().svd(true, false);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let sigma_max = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        return Ok(LeverageProfile {
            scores: vec![0.0; n],
            rank: 0,
        });
    }
    let tol = n.max(p) as f64 * sigma_max * 1e-12;
    let kept: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tol)
        .map(|(i, _)| i)
        .collect();
    let scores = (0..n)
        .map(|i| kept.iter().map(|&c| u[(i, c)] * u[(i, c)]).sum::<f64>().min(1.0))
        .collect();
    Ok(LeverageProfile {
        scores,
        rank: kept.len(),
    })
}

/// Draws `m` distinct indices with probability proportional to `weights`,
/// renormalizing over the remaining indices after each draw. Zero-weight
/// indices are only taken, uniformly, once every positive one is used up.
pub fn weighted_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_subsample_size(m, weights.len())?;
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pos = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (p, &i) in remaining.iter().enumerate() {
                if weights[i] <= 0.0 {
                    continue;
                }
                acc += weights[i];
                pick = Some(p);
                if target < acc {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            rng.gen_range(0..remaining.len())
        };
        chosen.push(remaining.remove(pos));
    }
    Ok(chosen)
}

/// `m` rows sampled by the leverage scores of the homogeneous matrix.
pub fn leverage_subsample<R: Rng + ?Sized>(
    ds: &RegressionDataset,
    m: usize,
    rng: &mut R,
) -> Result<RegressionDataset> {
    check_subsample_size(m, ds.n())?;
    let profile = leverage_scores(&homogenize(ds))?;
    if profile.rank == 0 {
        return Err(Error::InvalidArgument("all leverage scores are zero".into()));
    }
    let idx = weighted_without_replacement(&profile.scores, m, rng)?;
    ds.select_rows(&idx)
}

/// Replaces `syn` by `q = d+1` points with the same second-moment matrix:
/// row `i` is `sqrt(q·λ_i)·u_i` for the eigenpairs of `E_syn[z zᵀ]`, ordered by
/// decreasing eigenvalue. Every homogeneous squared loss is preserved.
pub fn moment_reduce(syn: &RegressionDataset) -> Result<RegressionDataset> {
    let z = homogenize(syn);
    let q = z.ncols();
    let moment = (z.transpose() * &z) / z.nrows() as f64;
    let eig = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DMatrix::zeros(q, q);
    for (row, &i) in order.iter().enumerate() {
        let scale = (q as f64 * eig.eigenvalues[i].max(0.0)).sqrt();
        for c in 0..q {
            out[(row, c)] = scale * eig.eigenvectors[(c, i)];
        }
    }
    RegressionDataset::from_homogeneous(&out)
}

/// Lower bound on the synthetic size for matching error `eps` at regressor scale `c_hat`:
/// the number of eigenvalues of `E_train[z zᵀ]` above `sqrt(eps)/c_hat²`.
pub fn min_synth_size(train: &RegressionDataset, eps: f64, c_hat: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if !(1.0..=2.0).contains(&c_hat) {
        return Err(Error::InvalidArgument("c_hat must lie in [1, 2]".into()));
    }
    let z = homogenize(train);
    let moment = (z.transpose() * &z) / z.nrows() as f64;
    let threshold = eps.sqrt() / (c_hat * c_hat);
    Ok(SymmetricEigen::new(moment)
        .eigenvalues
        .iter()
        .filter(|&&l| l > threshold)
        .count())
}

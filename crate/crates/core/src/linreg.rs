//! Supervised distillation for homogeneous linear regression.
//!
//! Training and synthetic points live in homogeneous form `z = (x, y)`. A
//! regressor `r` scores a point by `r·z`, so the canonical predictor `v`
//! appears as `r = (v, -1)` and `r·z = v·x - y`. The matching objective
//!
//! ```text
//! Σ_j (L(train, g_j) - L(syn, g_j))²,   L(D, g) = mean_i (g·z_i)²
//! ```
//!
//! is minimized over the synthetic points with Adam, with `g_j` drawn i.i.d.
//! from `N(0, 1/(d+1))^{d+1}`. The optimizer tracks a second, independently
//! sampled ensemble and returns the iterate where that held-out objective is
//! smallest.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::random_subsample;
use crate::data::{homogenize, RegressionDataset};
use crate::error::{check_dim, Error, Result};
use crate::optim::AdamState;
use crate::par;
use crate::report::DistillReport;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRegressor {
    pub weights: DVector<f64>,
}

impl LinearRegressor {
    pub fn new(weights: DVector<f64>) -> Self {
        Self { weights }
    }

    /// Canonical homogeneous form `(v, -1)` of the predictor `x ↦ v·x`.
    pub fn from_predictor(v: &DVector<f64>) -> Self {
        let d = v.len();
        let mut w = DVector::from_element(d + 1, -1.0);
        w.rows_mut(0, d).copy_from(v);
        Self { weights: w }
    }

    /// Homogeneous dimension `d + 1`.
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Feature part `v` (all but the last coordinate).
    pub fn predictor(&self) -> DVector<f64> {
        self.weights.rows(0, self.dim() - 1).into_owned()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum()
    }

    /// Whether `r = (v, -1)` with `‖v‖ ≤ 1`.
    pub fn in_unit_class(&self) -> bool {
        let last = self.weights[self.dim() - 1];
        last == -1.0 && self.predictor().norm() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorEnsemble {
    pub regressors: Vec<LinearRegressor>,
    pub seed: u64,
}

impl RegressorEnsemble {
    /// Draws `k` regressors for `d`-dimensional features from `G`.
    pub fn sample(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("ensemble size k must be ≥ 1".into()));
        }
        if d == 0 {
            return Err(Error::InvalidArgument("feature dimension must be ≥ 1".into()));
        }
        let mut rng = rng_from_seed(seed);
        let regressors = (0..k).map(|_| sample_regressor_g(d, &mut rng)).collect();
        Ok(Self { regressors, seed })
    }

    pub fn from_regressors(regressors: Vec<LinearRegressor>) -> Result<Self> {
        let q = regressors
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble must be nonempty".into()))?
            .dim();
        for r in &regressors {
            check_dim(q, r.dim())?;
        }
        Ok(Self { regressors, seed: 0 })
    }

    pub fn k(&self) -> usize {
        self.regressors.len()
    }

    pub fn dim(&self) -> usize {
        self.regressors[0].dim()
    }

    /// Regressors as the columns of a `(d+1) × k` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(
            &self
                .regressors
                .iter()
                .map(|r| r.weights.clone())
                .collect::<Vec<_>>(),
        )
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            regressors: self
                .regressors
                .iter()
                .map(|r| LinearRegressor::new(&r.weights * c))
                .collect(),
            seed: self.seed,
        }
    }
}

/// One draw from `G`: each of the `d+1` coordinates i.i.d. `N(0, 1/(d+1))`.
pub fn sample_regressor_g<R: Rng + ?Sized>(d: usize, rng: &mut R) -> LinearRegressor {
    let q = d + 1;
    let normal = Normal::new(0.0, (1.0 / q as f64).sqrt()).expect("finite std");
    LinearRegressor::new(DVector::from_fn(q, |_, _| normal.sample(rng)))
}

/// Mean of `(r·z_i)²` over the rows of a homogeneous matrix.
pub fn homogeneous_mse(z: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    (z * r).norm_squared() / z.nrows() as f64
}

pub fn mse_loss(ds: &RegressionDataset, f: &LinearRegressor) -> Result<f64> {
    check_dim(ds.d() + 1, f.dim())?;
    Ok(homogeneous_mse(&homogenize(ds), &f.weights))
}

/// Test-set MSE of a trained regressor.
pub fn evaluate_mse(f: &LinearRegressor, test: &RegressionDataset) -> Result<f64> {
    mse_loss(test, f)
}

/// Caches training losses for an ensemble and evaluates the matching objective
/// and its gradient on homogeneous synthetic matrices.
#[derive(Debug, Clone)]
pub struct LossMatcher {
    regressors: DMatrix<f64>,
    train_losses: Vec<f64>,
}

impl LossMatcher {
    pub fn new(train_z: &DMatrix<f64>, ensemble: &RegressorEnsemble) -> Result<Self> {
        check_dim(ensemble.dim(), train_z.ncols())?;
        let regressors = ensemble.matrix();
        let train_losses = per_regressor_losses(train_z, &regressors);
        Ok(Self {
            regressors,
            train_losses,
        })
    }

    pub fn dim(&self) -> usize {
        self.regressors.nrows()
    }

    pub fn train_losses(&self) -> &[f64] {
        &self.train_losses
    }

    /// Per-regressor errors `(L_train,j - L_syn,j)²`.
    pub fn errors(&self, syn_z: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim(self.dim(), syn_z.ncols())?;
        let syn = per_regressor_losses(syn_z, &self.regressors);
        Ok(syn
            .iter()
            .zip(&self.train_losses)
            .map(|(s, t)| (t - s) * (t - s))
            .collect())
    }

    pub fn objective(&self, syn_z: &DMatrix<f64>) -> Result<f64> {
        Ok(par::ordered_sum(&self.errors(syn_z)?))
    }

    /// Objective and its gradient with respect to every synthetic coordinate:
    /// `∂/∂z_i = Σ_j 2(L_syn,j - L_train,j)·(2/m)·(g_j·z_i)·g_j`.
    pub fn objective_and_gradient(&self, syn_z: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        check_dim(self.dim(), syn_z.ncols())?;
        let m = syn_z.nrows() as f64;
        let k = self.regressors.ncols();
        let projections: Vec<DVector<f64>> =
            par::map_range(k, |j| syn_z * self.regressors.column(j));
        let mut errs = Vec::with_capacity(k);
        let mut scaled = DMatrix::zeros(syn_z.nrows(), k);
        for (j, p) in projections.iter().enumerate() {
            let syn_loss = p.norm_squared() / m;
            let diff = syn_loss - self.train_losses[j];
            errs.push(diff * diff);
            scaled.set_column(j, &(p * (4.0 * diff / m)));
        }
        let grad = scaled * self.regressors.transpose();
        Ok((par::ordered_sum(&errs), grad))
    }
}

fn per_regressor_losses(z: &DMatrix<f64>, regressors: &DMatrix<f64>) -> Vec<f64> {
    let m = z.nrows() as f64;
    par::map_range(regressors.ncols(), |j| {
        (z * regressors.column(j)).norm_squared() / m
    })
}

pub fn loss_match_objective(
    train: &RegressionDataset,
    syn: &RegressionDataset,
    ens: &RegressorEnsemble,
) -> Result<f64> {
    check_dim(train.d(), syn.d())?;
    LossMatcher::new(&homogenize(train), ens)?.objective(&homogenize(syn))
}

/// Gradient of [`loss_match_objective`] w.r.t. the homogeneous synthetic rows (`m × (d+1)`).
pub fn objective_gradient(
    train: &RegressionDataset,
    syn: &RegressionDataset,
    ens: &RegressorEnsemble,
) -> Result<DMatrix<f64>> {
    check_dim(train.d(), syn.d())?;
    Ok(LossMatcher::new(&homogenize(train), ens)?
        .objective_and_gradient(&homogenize(syn))?
        .1)
}

/// Radially projects feature rows into the `B`-ball and clamps labels to `[-b, b]`, in place.
pub fn project_rows(z: &mut DMatrix<f64>, feature_bound: f64, label_bound: f64) {
    let d = z.ncols() - 1;
    for mut row in z.row_iter_mut() {
        let norm = row.columns(0, d).norm();
        if norm > feature_bound {
            let s = feature_bound / norm;
            row.columns_mut(0, d).apply(|v| *v *= s);
        }
        let y = row[d];
        row[d] = y.clamp(-label_bound, label_bound);
    }
}

pub fn project_feasible(
    syn: &RegressionDataset,
    feature_bound: f64,
    label_bound: f64,
) -> Result<RegressionDataset> {
    if !(feature_bound > 0.0 && label_bound > 0.0) {
        return Err(Error::InvalidArgument("projection bounds must be positive".into()));
    }
    let mut z = homogenize(syn);
    project_rows(&mut z, feature_bound, label_bound);
    RegressionDataset::from_homogeneous(&z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Synthetic dataset size.
    pub m: usize,
    /// Matching ensemble size.
    pub k: usize,
    /// Held-out ensemble size used for checkpoint selection.
    pub n_eval: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub project: bool,
    /// Held-out objective is measured every `eval_stride` steps (and at the end).
    pub eval_stride: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            m: 50,
            k: 100,
            n_eval: 100,
            learning_rate: 0.01,
            max_steps: 5000,
            seed: 0,
            project: true,
            eval_stride: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n_eval == 0 || self.eval_stride == 0 {
            return Err(Error::InvalidArgument(
                "m, k, n_eval and eval_stride must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn ensemble_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }
}

/// Distills `train` starting from a uniform random subsample of size `cfg.m`.
pub fn distill(
    train: &RegressionDataset,
    cfg: &DistillConfig,
) -> Result<(RegressionDataset, DistillReport)> {
    cfg.validate()?;
    if cfg.m > train.n() {
        return Err(Error::InvalidArgument(format!(
            "cannot initialize {} synthetic rows from {} training rows",
            cfg.m,
            train.n()
        )));
    }
    let init = random_subsample(train, cfg.m, &mut rng_from_seed(cfg.init_seed()))?;
    distill_from(train, &init, cfg)
}

/// Distills `train` starting from the given synthetic initialization.
pub fn distill_from(
    train: &RegressionDataset,
    init: &RegressionDataset,
    cfg: &DistillConfig,
) -> Result<(RegressionDataset, DistillReport)> {
    cfg.validate()?;
    check_dim(train.d(), init.d())?;
    if init.n() != cfg.m {
        return Err(Error::Dimension {
            expected: cfg.m,
            got: init.n(),
        });
    }
    if cfg.m > train.n() {
        log::warn!("synthetic size {} exceeds training size {}", cfg.m, train.n());
    }
    let train_z = homogenize(train);
    let ensemble = RegressorEnsemble::sample(cfg.k, train.d(), cfg.ensemble_seed())?;
    let held_out = RegressorEnsemble::sample(cfg.n_eval, train.d(), cfg.eval_seed())?;
    let matcher = LossMatcher::new(&train_z, &ensemble)?;
    let evaluator = LossMatcher::new(&train_z, &held_out)?;

    let mut z = homogenize(init);
    let mut adam = AdamState::new(z.len());
    let mut report = DistillReport::new("supervised");

    let mut best_eval = evaluator.objective(&z)?;
    let mut best_step = 0;
    let mut best_z = z.clone();
    report.eval_trace.push(best_eval);
    report.eval_steps.push(0);

    for step in 0..cfg.max_steps {
        let (obj, grad) = matcher.objective_and_gradient(&z)?;
        report.objective_trace.push(obj);
        adam.update(z.as_mut_slice(), grad.as_slice(), cfg.learning_rate)?;
        if cfg.project {
            project_rows(&mut z, train.feature_bound, train.label_bound);
        }
        let done = step + 1;
        if done % cfg.eval_stride == 0 || done == cfg.max_steps {
            let e = evaluator.objective(&z)?;
            report.eval_trace.push(e);
            report.eval_steps.push(done);
            if e < best_eval {
                best_eval = e;
                best_step = done;
                best_z.copy_from(&z);
            }
        }
    }
    report.objective_trace.push(matcher.objective(&z)?);

    let syn = RegressionDataset::from_homogeneous(&best_z)?;
    report.best_step = best_step;
    report.best_objective = best_eval;
    report.seeds = BTreeMap::from([
        ("base".to_string(), cfg.seed),
        ("ensemble".to_string(), ensemble.seed),
        ("eval_ensemble".to_string(), held_out.seed),
        ("init".to_string(), cfg.init_seed()),
    ]);
    report.config = serde_json::to_value(cfg)?;
    report
        .metrics
        .insert("matching_objective_at_best".into(), matcher.objective(&best_z)?);
    report.synthetic = serde_json::json!({
        "features": best_z.columns(0, train.d()).row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "labels": best_z.column(train.d()).iter().copied().collect::<Vec<_>>(),
    });
    Ok((syn, report))
}

/// Fits `x ↦ v·x` by full-batch Adam on the MSE from `v = 0`; returns `(v, -1)`.
pub fn train_linear(ds: &RegressionDataset, lr: f64, steps: usize) -> Result<LinearRegressor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("training needs at least one step".into()));
    }
    let n = ds.n() as f64;
    let gram = ds.features.transpose() * &ds.features;
    let xty = ds.features.transpose() * &ds.labels;
    let mut v = DVector::zeros(ds.d());
    let mut adam = AdamState::new(ds.d());
    for _ in 0..steps {
        let grad = (&gram * &v - &xty) * (2.0 / n);
        adam.update(v.as_mut_slice(), grad.as_slice(), lr)?;
    }
    Ok(LinearRegressor::from_predictor(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;

    fn random_ds(n: usize, d: usize, seed: u64) -> RegressionDataset {
        let mut rng = rng_from_seed(seed);
        let f = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        RegressionDataset::new(f, y).unwrap()
    }

    fn naive_mse(ds: &RegressionDataset, r: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..ds.n() {
            let mut s = 0.0;
            for j in 0..ds.d() {
                s += r[j] * ds.features[(i, j)];
            }
            s += r[ds.d()] * ds.labels[i];
            total += s * s;
        }
        total / ds.n() as f64
    }

    #[test]
    fn g_norm_and_variance() {
        let mut rng = rng_from_seed(1);
        let draws: Vec<_> = (0..10000).map(|_| sample_regressor_g(9, &mut rng)).collect();
        let mean_sq = draws.iter().map(|r| r.weights.norm_squared()).sum::<f64>() / 10000.0;
        assert!((0.9..=1.1).contains(&mean_sq), "{mean_sq}");

        let mut rng = rng_from_seed(2);
        let draws: Vec<_> = (0..10000).map(|_| sample_regressor_g(4, &mut rng)).collect();
        for c in 0..5 {
            let xs: Vec<f64> = draws.iter().map(|r| r.weights[c]).collect();
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!((var - 0.2).abs() < 0.15 * 0.2, "coord {c}: {var}");
        }
    }

    #[test]
    fn g_sampling_deterministic() {
        let a = sample_regressor_g(3, &mut rng_from_seed(5));
        let b = sample_regressor_g(3, &mut rng_from_seed(5));
        assert_eq!(a, b);
    }

    #[test]
    fn mse_cases() {
        let ds = RegressionDataset::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        let f = LinearRegressor::from_predictor(&DVector::from_element(1, 0.0));
        assert_eq!(mse_loss(&ds, &f).unwrap(), 1.0);
        let exact = LinearRegressor::from_predictor(&DVector::from_element(1, 1.0));
        assert_eq!(mse_loss(&ds, &exact).unwrap(), 0.0);
        let wrong = LinearRegressor::new(DVector::zeros(3));
        assert!(mse_loss(&ds, &wrong).is_err());
    }

    #[test]
    fn mse_matches_double_loop() {
        for s in 0..50 {
            let ds = random_ds(7 + s as usize % 5, 3, s);
            let r = sample_regressor_g(3, &mut rng_from_seed(1000 + s));
            assert_abs_diff_eq!(mse_loss(&ds, &r).unwrap(), naive_mse(&ds, &r.weights), epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_zero_on_identical_and_permuted() {
        let train = random_ds(30, 4, 3);
        let ens = RegressorEnsemble::sample(20, 4, 4).unwrap();
        assert_eq!(loss_match_objective(&train, &train, &ens).unwrap(), 0.0);
        let rev: Vec<usize> = (0..30).rev().collect();
        let perm = train.select_rows(&rev).unwrap();
        assert!(loss_match_objective(&train, &perm, &ens).unwrap() < 1e-25);
        let g = objective_gradient(&train, &train, &ens).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn objective_single_regressor_value() {
        // Train loss 2 and synthetic loss 0.5 under g = (0, 1): labels carry the loss.
        let train = RegressionDataset::new(DMatrix::zeros(2, 1), DVector::from_row_slice(&[2f64.sqrt(), -(2f64.sqrt())])).unwrap();
        let syn = RegressionDataset::new(DMatrix::zeros(1, 1), DVector::from_element(1, 0.5f64.sqrt())).unwrap();
        let ens = RegressorEnsemble::from_regressors(vec![LinearRegressor::new(DVector::from_row_slice(&[0.0, 1.0]))]).unwrap();
        assert_abs_diff_eq!(loss_match_objective(&train, &syn, &ens).unwrap(), 2.25, epsilon = 1e-12);
    }

    #[test]
    fn hand_expanded_gradient() {
        // train loss 0, syn = {(1, 0)}, g = (1, 0): objective 1, ∂/∂z₁ = 4.
        let train = RegressionDataset::new(DMatrix::zeros(1, 1), DVector::zeros(1)).unwrap();
        let syn = RegressionDataset::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap();
        let ens = RegressorEnsemble::from_regressors(vec![LinearRegressor::new(DVector::from_row_slice(&[1.0, 0.0]))]).unwrap();
        assert_eq!(loss_match_objective(&train, &syn, &ens).unwrap(), 1.0);
        let g = objective_gradient(&train, &syn, &ens).unwrap();
        assert_eq!(g[(0, 0)], 4.0);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = random_ds(5, 2, 1);
        let b = random_ds(5, 3, 2);
        let ens = RegressorEnsemble::sample(3, 2, 1).unwrap();
        assert!(loss_match_objective(&a, &b, &ens).is_err());
        assert!(objective_gradient(&a, &b, &ens).is_err());
    }

    #[test]
    fn projection_cases() {
        let syn = RegressionDataset::new(
            DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.1, 0.2]),
            DVector::from_row_slice(&[1.5, -0.3]),
        )
        .unwrap();
        let p = project_feasible(&syn, 2.5, 1.0).unwrap();
        assert_abs_diff_eq!(p.features.row(0).norm(), 2.5, epsilon = 1e-12);
        assert_eq!(p.labels[0], 1.0);
        assert_eq!(p.features.row(1), syn.features.row(1));
        assert_eq!(p.labels[1], -0.3);
        let again = project_feasible(&p, 2.5, 1.0).unwrap();
        assert_eq!(again, p);
        assert!(project_feasible(&syn, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_step_distill_returns_init() {
        let train = random_ds(12, 2, 8);
        let cfg = DistillConfig { m: 12, k: 5, n_eval: 5, max_steps: 0, seed: 4, ..Default::default() };
        let (syn, rep) = distill(&train, &cfg).unwrap();
        let init = random_subsample(&train, 12, &mut rng_from_seed(cfg.init_seed())).unwrap();
        assert_eq!(syn, init);
        assert_eq!(rep.best_step, 0);
        assert_eq!(rep.eval_trace.len(), 1);
        let held = RegressorEnsemble::sample(5, 2, cfg.eval_seed()).unwrap();
        assert_eq!(rep.best_objective, loss_match_objective(&train, &init, &held).unwrap());
    }

    #[test]
    fn distill_rejects_oversized_m() {
        let train = random_ds(5, 2, 8);
        let cfg = DistillConfig { m: 6, ..Default::default() };
        assert!(distill(&train, &cfg).is_err());
    }

    #[test]
    fn train_linear_recovers_realizable_weights() {
        let mut rng = rng_from_seed(21);
        let n = 200;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let w = DVector::from_row_slice(&[0.5, -0.25, 0.8]);
        let ds = RegressionDataset::new(x.clone(), &x * &w).unwrap();
        let f = train_linear(&ds, 0.01, 5000).unwrap();
        assert!((f.predictor() - w).norm() < 1e-3);
        let zero = RegressionDataset::new(x, DVector::zeros(n)).unwrap();
        assert_eq!(train_linear(&zero, 0.01, 100).unwrap().predictor(), DVector::zeros(3));
    }
}

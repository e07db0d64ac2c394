//! Constructive lower bound on the number of sampled regressors.
//!
//! Given fewer than `q(q+1)/2` homogeneous regressors `v_t ∈ R^q`, there is a
//! nonzero symmetric `A` with `v_tᵀ A v_t = 0` for every `t`. Scaling `A` to
//! operator norm 1/2 and factoring `I + A` yields a synthetic set on which all
//! supplied regressors see exactly the loss they see on the coordinate basis,
//! while the top eigenvector of `A` sees a gap of `1/(4q²)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linreg::homogeneous_mse;
use crate::rng::rng_from_seed;

const NULL_TOL: f64 = 1e-8;

/// Number of free entries of a `q × q` symmetric matrix.
pub fn symmetric_dim(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Isometric vectorization: diagonal entries as-is, off-diagonals scaled by √2,
/// so that `vec(A)·vec(B) = ⟨A, B⟩_F` for symmetric `A`, `B`.
pub fn vectorize_symmetric(a: &DMatrix<f64>) -> DVector<f64> {
    let q = a.nrows();
    let mut out = DVector::zeros(symmetric_dim(q));
    let mut k = 0;
    for i in 0..q {
        for j in i..q {
            out[k] = if i == j { a[(i, i)] } else { std::f64::consts::SQRT_2 * a[(i, j)] };
            k += 1;
        }
    }
    out
}

pub fn devectorize_symmetric(x: &DVector<f64>, q: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in i..q {
            if i == j {
                a[(i, i)] = x[k];
            } else {
                let v = x[k] / std::f64::consts::SQRT_2;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            k += 1;
        }
    }
    a
}

/// Nonzero symmetric matrix orthogonal to every `v_t v_tᵀ`, scaled to operator norm 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricWitness {
    pub a: DMatrix<f64>,
    pub operator_norm: f64,
    /// `max_t |v_tᵀ A v_t|` over the regressors the witness was built from.
    pub max_constraint_residual: f64,
}

impl SymmetricWitness {
    pub fn q(&self) -> usize {
        self.a.nrows()
    }

    /// Packed upper triangle, row by row.
    pub fn upper(&self) -> Vec<f64> {
        let q = self.q();
        (0..q)
            .flat_map(|i| (i..q).map(move |j| (i, j)))
            .map(|(i, j)| self.a[(i, j)])
            .collect()
    }

    pub fn quadratic_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.a * v))
    }
}

pub fn null_symmetric(q: usize, regressors: &[DVector<f64>]) -> Result<SymmetricWitness> {
    if q == 0 {
        return Err(Error::InvalidArgument("dimension q must be ≥ 1".into()));
    }
    let dim = symmetric_dim(q);
    if regressors.len() >= dim {
        return Err(Error::NoWitness {
            count: regressors.len(),
            bound: dim,
        });
    }
    for v in regressors {
        check_dim(q, v.len())?;
    }
    // Zero-padded to square so the SVD returns a full basis of right singular vectors.
    let mut constraints = DMatrix::zeros(dim, dim);
    for (t, v) in regressors.iter().enumerate() {
        let row = vectorize_symmetric(&(v * v.transpose()));
        constraints.set_row(t, &row.transpose());
    }
    let svd = constraints.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return Vᵀ".into()))?;
    let (idx, smallest) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, s)| if s < best.1 { (i, s) } else { best });
    if smallest > NULL_TOL {
        return Err(Error::Numerical(format!(
            "constraint matrix has no numerical null space (σ_min = {smallest:e})"
        )));
    }
    let x = v_t.row(idx).transpose();
    let mut a = devectorize_symmetric(&x, q);
    let top = SymmetricEigen::new(a.clone())
        .eigenvalues
        .amax();
    if top == 0.0 {
        return Err(Error::Numerical("null-space vector is zero".into()));
    }
    a *= 0.5 / top;
    let operator_norm = SymmetricEigen::new(a.clone()).eigenvalues.amax();
    let max_constraint_residual = regressors
        .iter()
        .map(|v| v.dot(&(&a * v)).abs())
        .fold(0.0, f64::max);
    Ok(SymmetricWitness {
        a,
        operator_norm,
        max_constraint_residual,
    })
}

/// Adversarial training set, synthetic set and separating regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleBundle {
    /// Rows are the coordinate basis vectors.
    pub d_train: DMatrix<f64>,
    /// Rows are `sqrt(λ_i)·u_i` for the eigenpairs of `I + A`.
    pub d_syn: DMatrix<f64>,
    pub f0: DVector<f64>,
    pub gap: f64,
}

impl CounterexampleBundle {
    pub fn q(&self) -> usize {
        self.d_train.nrows()
    }
}

pub fn construct_counterexample(witness: &SymmetricWitness) -> Result<CounterexampleBundle> {
    let q = witness.q();
    if (witness.operator_norm - 0.5).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "witness operator norm {} is not 1/2",
            witness.operator_norm
        )));
    }
    let b = DMatrix::identity(q, q) + &witness.a;
    let eig_b = SymmetricEigen::new(b);
    let mut d_syn = DMatrix::zeros(q, q);
    for i in 0..q {
        let scale = eig_b.eigenvalues[i].max(0.0).sqrt();
        for c in 0..q {
            d_syn[(i, c)] = scale * eig_b.eigenvectors[(c, i)];
        }
    }
    let eig_a = SymmetricEigen::new(witness.a.clone());
    let top = eig_a
        .eigenvalues
        .iter()
        .enumerate()
        .fold(0, |best, (i, l)| if l.abs() > eig_a.eigenvalues[best].abs() { i } else { best });
    let f0 = eig_a.eigenvectors.column(top).normalize();
    let quad = witness.quadratic_form(&f0);
    let gap = quad * quad / (q * q) as f64;
    Ok(CounterexampleBundle {
        d_train: DMatrix::identity(q, q),
        d_syn,
        f0,
        gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// `max_t (L(train, f_t) - L(syn, f_t))²`.
    pub max_equal_dev: f64,
    /// `max_t |L(train, f_t) - L(syn, f_t)|`.
    pub max_abs_loss_diff: f64,
    /// Measured `(L(train, f0) - L(syn, f0))²`.
    pub gap: f64,
    pub gap_bound: f64,
    pub max_point_norm: f64,
    pub pass: bool,
}

pub fn verify(bundle: &CounterexampleBundle, regressors: &[DVector<f64>]) -> Result<VerifyReport> {
    let q = bundle.q();
    let mut max_equal_dev: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for v in regressors {
        check_dim(q, v.len())?;
        let diff = homogeneous_mse(&bundle.d_train, v) - homogeneous_mse(&bundle.d_syn, v);
        max_equal_dev = max_equal_dev.max(diff * diff);
        max_abs = max_abs.max(diff.abs());
    }
    let diff0 = homogeneous_mse(&bundle.d_train, &bundle.f0) - homogeneous_mse(&bundle.d_syn, &bundle.f0);
    let gap = diff0 * diff0;
    let gap_bound = 1.0 / (4.0 * (q * q) as f64);
    let max_point_norm = bundle
        .d_train
        .row_iter()
        .chain(bundle.d_syn.row_iter())
        .map(|r| r.norm())
        .fold(0.0, f64::max);
    Ok(VerifyReport {
        max_equal_dev,
        max_abs_loss_diff: max_abs,
        gap,
        gap_bound,
        max_point_norm,
        pass: max_equal_dev <= 1e-9 && gap >= gap_bound - 1e-9 && max_point_norm <= 2.0,
    })
}

/// `count` standard normal regressors in `R^q`.
pub fn random_regressors(q: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Full pipeline for one dimension: the largest regressor set the bound allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCase {
    pub q: usize,
    pub regressors: usize,
    pub seed: u64,
    pub witness_operator_norm: f64,
    pub report: VerifyReport,
}

pub fn run_case(q: usize, count: usize, seed: u64) -> Result<(LowerBoundCase, CounterexampleBundle)> {
    let regs = random_regressors(q, count, seed);
    let witness = null_symmetric(q, &regs)?;
    let bundle = construct_counterexample(&witness)?;
    let report = verify(&bundle, &regs)?;
    Ok((
        LowerBoundCase {
            q,
            regressors: count,
            seed,
            witness_operator_norm: witness.operator_norm,
            report,
        },
        bundle,
    ))
}

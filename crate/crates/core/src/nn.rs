//! Two-hidden-layer ReLU networks, feature maps and Q-value predictors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSizes {
    pub input: usize,
    pub h1: usize,
    pub h2: usize,
}

impl MlpSizes {
    pub fn new(input: usize, h1: usize, h2: usize) -> Self {
        Self { input, h1, h2 }
    }

    pub fn num_params(&self) -> usize {
        self.h1 * self.input + self.h1 + self.h2 * self.h1 + self.h2 + self.h2 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::InvalidArgument(format!("layer sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `x ↦ w_out·relu(W2·relu(W1·x + b1) + b2) + b_out`.
///
/// Flat parameter order: `W1` row-major, `b1`, `W2` row-major, `b2`, `w_out`, `b_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpCheckpoint", try_from = "MlpCheckpoint")]
pub struct Mlp2 {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_out: DVector<f64>,
    pub b_out: f64,
}

struct Activations {
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    z2: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DVector<f64>,
}

/// Gradients of `Σ_i upstream_i · net(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub weights: Vec<f64>,
    pub inputs: DMatrix<f64>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

fn mask_inactive(grad: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    grad.zip_apply(pre, |g, z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

impl Mlp2 {
    pub fn zeros(sizes: MlpSizes) -> Self {
        Self {
            w1: DMatrix::zeros(sizes.h1, sizes.input),
            b1: DVector::zeros(sizes.h1),
            w2: DMatrix::zeros(sizes.h2, sizes.h1),
            b2: DVector::zeros(sizes.h2),
            w_out: DVector::zeros(sizes.h2),
            b_out: 0.0,
        }
    }

    /// Every weight and bias i.i.d. `N(0, sigma²)`.
    pub fn init_gaussian<R: Rng + ?Sized>(sizes: MlpSizes, sigma: f64, rng: &mut R) -> Result<Self> {
        sizes.validate()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        let mut net = Self::zeros(sizes);
        let p: Vec<f64> = (0..sizes.num_params())
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        net.set_params(&p)?;
        Ok(net)
    }

    /// He-scaled Gaussian weights, zero biases.
    pub fn init_he<R: Rng + ?Sized>(sizes: MlpSizes, rng: &mut R) -> Result<Self> {
        sizes.validate()?;
        let mut net = Self::zeros(sizes);
        let n1 = Normal::new(0.0, (2.0 / sizes.input as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (2.0 / sizes.h1 as f64).sqrt()).expect("valid std");
        let n3 = Normal::new(0.0, (1.0 / sizes.h2 as f64).sqrt()).expect("valid std");
        net.w1 = DMatrix::from_fn(sizes.h1, sizes.input, |_, _| n1.sample(rng));
        net.w2 = DMatrix::from_fn(sizes.h2, sizes.h1, |_, _| n2.sample(rng));
        net.w_out = DVector::from_fn(sizes.h2, |_, _| n3.sample(rng));
        Ok(net)
    }

    pub fn sizes(&self) -> MlpSizes {
        MlpSizes::new(self.w1.ncols(), self.w1.nrows(), self.w2.nrows())
    }

    pub fn num_params(&self) -> usize {
        self.sizes().num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        push_row_major(&mut out, &self.w1);
        out.extend(self.b1.iter());
        push_row_major(&mut out, &self.w2);
        out.extend(self.b2.iter());
        out.extend(self.w_out.iter());
        out.push(self.b_out);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let s = self.sizes();
        check_dim(s.num_params(), p.len())?;
        let mut i = 0;
        let mut take = |n: usize| {
            let out = &p[i..i + n];
            i += n;
            out
        };
        self.w1 = DMatrix::from_row_slice(s.h1, s.input, take(s.h1 * s.input));
        self.b1 = DVector::from_column_slice(take(s.h1));
        self.w2 = DMatrix::from_row_slice(s.h2, s.h1, take(s.h2 * s.h1));
        self.b2 = DVector::from_column_slice(take(s.h2));
        self.w_out = DVector::from_column_slice(take(s.h2));
        self.b_out = take(1)[0];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    fn activations(&self, x: &DMatrix<f64>) -> Result<Activations> {
        check_dim(self.w1.ncols(), x.ncols())?;
        let mut z1 = x * self.w1.transpose();
        add_row_bias(&mut z1, &self.b1);
        let h1 = relu(&z1);
        let mut z2 = &h1 * self.w2.transpose();
        add_row_bias(&mut z2, &self.b2);
        let h2 = relu(&z2);
        let mut out = &h2 * &self.w_out;
        out.add_scalar_mut(self.b_out);
        Ok(Activations { z1, h1, z2, h2, out })
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.forward_batch(&DMatrix::from_row_slice(1, x.len(), x.as_slice()))?[0])
    }

    /// One output per row of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.activations(x)?.out)
    }

    fn backward_from(&self, x: &DMatrix<f64>, act: &Activations, upstream: &DVector<f64>) -> Backward {
        let g_wout = act.h2.transpose() * upstream;
        let g_bout = upstream.sum();
        let mut d2 = upstream * self.w_out.transpose();
        mask_inactive(&mut d2, &act.z2);
        let g_w2 = d2.transpose() * &act.h1;
        let g_b2 = d2.row_sum().transpose();
        let mut d1 = &d2 * &self.w2;
        mask_inactive(&mut d1, &act.z1);
        let g_w1 = d1.transpose() * x;
        let g_b1 = d1.row_sum().transpose();
        let inputs = &d1 * &self.w1;

        let mut weights = Vec::with_capacity(self.num_params());
        push_row_major(&mut weights, &g_w1);
        weights.extend(g_b1.iter());
        push_row_major(&mut weights, &g_w2);
        weights.extend(g_b2.iter());
        weights.extend(g_wout.iter());
        weights.push(g_bout);
        Backward { weights, inputs }
    }

    /// Forward values plus gradients of `Σ_i upstream_i · net(x_i)`.
    pub fn backward_batch(&self, x: &DMatrix<f64>, upstream: &DVector<f64>) -> Result<(DVector<f64>, Backward)> {
        check_dim(x.nrows(), upstream.len())?;
        let act = self.activations(x)?;
        let back = self.backward_from(x, &act, upstream);
        Ok((act.out, back))
    }

    /// Mean squared error over the batch and its gradient w.r.t. the flat parameters.
    pub fn grad_weights(&self, x: &DMatrix<f64>, targets: &DVector<f64>) -> Result<(f64, Vec<f64>)> {
        if x.nrows() == 0 {
            return Err(Error::Empty("batch".into()));
        }
        check_dim(x.nrows(), targets.len())?;
        let act = self.activations(x)?;
        let n = x.nrows() as f64;
        let resid = &act.out - targets;
        let loss = resid.norm_squared() / n;
        let upstream = resid * (2.0 / n);
        Ok((loss, self.backward_from(x, &act, &upstream).weights))
    }

    pub fn grad_input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let (_, back) = self.backward_batch(&xm, &DVector::from_element(1, 1.0))?;
        Ok(back.inputs.row(0).transpose())
    }
}

pub fn mlp_init_gaussian<R: Rng + ?Sized>(sizes: MlpSizes, rng: &mut R) -> Result<Mlp2> {
    Mlp2::init_gaussian(sizes, 1.0, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl MatrixJson {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        push_row_major(&mut data, m);
        Self {
            shape: [m.nrows(), m.ncols()],
            data,
        }
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            shape: [v.len(), 1],
            data: v.iter().copied().collect(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        check_dim(self.shape[0] * self.shape[1], self.data.len())?;
        Ok(DMatrix::from_row_slice(self.shape[0], self.shape[1], &self.data))
    }

    fn to_vector(&self) -> Result<DVector<f64>> {
        check_dim(1, self.shape[1])?;
        check_dim(self.shape[0], self.data.len())?;
        Ok(DVector::from_column_slice(&self.data))
    }
}

/// JSON checkpoint layout: row-major arrays with explicit shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub sizes: MlpSizes,
    pub w1: MatrixJson,
    pub b1: MatrixJson,
    pub w2: MatrixJson,
    pub b2: MatrixJson,
    pub w_out: MatrixJson,
    pub b_out: f64,
}

impl From<Mlp2> for MlpCheckpoint {
    fn from(n: Mlp2) -> Self {
        Self {
            sizes: n.sizes(),
            w1: MatrixJson::from_matrix(&n.w1),
            b1: MatrixJson::from_vector(&n.b1),
            w2: MatrixJson::from_matrix(&n.w2),
            b2: MatrixJson::from_vector(&n.b2),
            w_out: MatrixJson::from_vector(&n.w_out),
            b_out: n.b_out,
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp2 {
    type Error = Error;

    fn try_from(c: MlpCheckpoint) -> Result<Self> {
        let net = Mlp2 {
            w1: c.w1.to_matrix()?,
            b1: c.b1.to_vector()?,
            w2: c.w2.to_matrix()?,
            b2: c.b2.to_vector()?,
            w_out: c.w_out.to_vector()?,
            b_out: c.b_out,
        };
        let s = net.sizes();
        if s != c.sizes || net.b1.len() != s.h1 || net.b2.len() != s.h2 || net.w2.ncols() != s.h1 || net.w_out.len() != s.h2 {
            return Err(Error::InvalidArgument("checkpoint shapes are inconsistent".into()));
        }
        Ok(net)
    }
}

/// Joint state-action features `φ(s, a)` with `a` given as a (possibly relaxed) action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `φ(s, a) = (s, a)`.
    ConcatOnehot { state_dim: usize, action_count: usize },
    /// `φ(s, a) = P·s + Q·a`.
    DecomposableLinear {
        state_proj: DMatrix<f64>,
        action_proj: DMatrix<f64>,
    },
    /// `φ(s, a) = (s, a, vec(s·aᵀ))`; not decomposable.
    Product { state_dim: usize, action_count: usize },
}

impl FeatureMap {
    pub fn concat(state_dim: usize, action_count: usize) -> Self {
        Self::ConcatOnehot { state_dim, action_count }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::ConcatOnehot { state_dim, .. } | Self::Product { state_dim, .. } => *state_dim,
            Self::DecomposableLinear { state_proj, .. } => state_proj.ncols(),
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            Self::ConcatOnehot { action_count, .. } | Self::Product { action_count, .. } => *action_count,
            Self::DecomposableLinear { action_proj, .. } => action_proj.ncols(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::ConcatOnehot { state_dim, action_count } => state_dim + action_count,
            Self::DecomposableLinear { state_proj, .. } => state_proj.nrows(),
            Self::Product { state_dim, action_count } => state_dim + action_count + state_dim * action_count,
        }
    }

    /// `φ(s, a) = φ1(s) + φ2(a)` with both parts linear.
    pub fn is_decomposable(&self) -> bool {
        !matches!(self, Self::Product { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::DecomposableLinear { state_proj, action_proj } = self {
            check_dim(state_proj.nrows(), action_proj.nrows())?;
        }
        if self.state_dim() == 0 || self.action_count() == 0 {
            return Err(Error::InvalidArgument("feature map needs positive state and action dims".into()));
        }
        Ok(())
    }

    /// Row `i` of the result is `φ(s_i, a_i)`.
    pub fn apply_batch(&self, s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.state_dim(), s.ncols())?;
        check_dim(self.action_count(), a.ncols())?;
        check_dim(s.nrows(), a.nrows())?;
        let (n, ds, na) = (s.nrows(), s.ncols(), a.ncols());
        Ok(match self {
            Self::ConcatOnehot { .. } => {
                DMatrix::from_fn(n, ds + na, |i, j| if j < ds { s[(i, j)] } else { a[(i, j - ds)] })
            }
            Self::DecomposableLinear { state_proj, action_proj } => {
                s * state_proj.transpose() + a * action_proj.transpose()
            }
            Self::Product { .. } => DMatrix::from_fn(n, ds + na + ds * na, |i, j| {
                if j < ds {
                    s[(i, j)]
                } else if j < ds + na {
                    a[(i, j - ds)]
                } else {
                    let k = j - ds - na;
                    s[(i, k / na)] * a[(i, k % na)]
                }
            }),
        })
    }

    pub fn apply(&self, s: &DVector<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
        let sm = DMatrix::from_row_slice(1, s.len(), s.as_slice());
        let am = DMatrix::from_row_slice(1, a.len(), a.as_slice());
        Ok(self.apply_batch(&sm, &am)?.row(0).transpose())
    }

    /// Pull back per-row feature gradients `g` (n × dim) to `(∂/∂s, ∂/∂a)`.
    pub fn vjp_batch(
        &self,
        s: &DMatrix<f64>,
        a: &DMatrix<f64>,
        g: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_dim(self.dim(), g.ncols())?;
        check_dim(s.nrows(), g.nrows())?;
        let (n, ds, na) = (s.nrows(), s.ncols(), a.ncols());
        Ok(match self {
            Self::ConcatOnehot { .. } => (g.columns(0, ds).into_owned(), g.columns(ds, na).into_owned()),
            Self::DecomposableLinear { state_proj, action_proj } => (g * state_proj, g * action_proj),
            Self::Product { .. } => {
                let mut gs = g.columns(0, ds).into_owned();
                let mut ga = g.columns(ds, na).into_owned();
                for i in 0..n {
                    for p in 0..ds {
                        for q in 0..na {
                            let gv = g[(i, ds + na + p * na + q)];
                            gs[(i, p)] += gv * a[(i, q)];
                            ga[(i, q)] += gv * s[(i, p)];
                        }
                    }
                }
                (gs, ga)
            }
        })
    }

    /// `φ(s, 0)`.
    pub fn phi1(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply(s, &DVector::zeros(self.action_count()))
    }

    /// `φ(0, a)`.
    pub fn phi2(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply(&DVector::zeros(self.state_dim()), a)
    }
}

pub fn one_hot(count: usize, index: usize) -> DVector<f64> {
    let mut v = DVector::zeros(count);
    v[index] = 1.0;
    v
}

/// `n × count` matrix whose rows all equal `e_index`.
pub fn one_hot_rows(n: usize, count: usize, index: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, count, |_, j| if j == index { 1.0 } else { 0.0 })
}

/// Q-value predictor `f(s, a)` on a state and an action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QPredictor {
    Linear { weights: DVector<f64>, fmap: FeatureMap },
    /// Network over `concat(s, a)`.
    Mlp { net: Mlp2, state_dim: usize, action_count: usize },
}

fn concat_cols(s: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let ds = s.ncols();
    DMatrix::from_fn(s.nrows(), ds + a.ncols(), |i, j| if j < ds { s[(i, j)] } else { a[(i, j - ds)] })
}

impl QPredictor {
    pub fn mlp(net: Mlp2, state_dim: usize, action_count: usize) -> Result<Self> {
        check_dim(state_dim + action_count, net.sizes().input)?;
        Ok(Self::Mlp { net, state_dim, action_count })
    }

    pub fn linear(weights: DVector<f64>, fmap: FeatureMap) -> Result<Self> {
        fmap.validate()?;
        check_dim(fmap.dim(), weights.len())?;
        Ok(Self::Linear { weights, fmap })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Linear { fmap, .. } => fmap.state_dim(),
            Self::Mlp { state_dim, .. } => *state_dim,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            Self::Linear { fmap, .. } => fmap.action_count(),
            Self::Mlp { action_count, .. } => *action_count,
        }
    }

    pub fn values_batch(&self, s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim(self.state_dim(), s.ncols())?;
        check_dim(self.action_count(), a.ncols())?;
        check_dim(s.nrows(), a.nrows())?;
        match self {
            Self::Linear { weights, fmap } => Ok(fmap.apply_batch(s, a)? * weights),
            Self::Mlp { net, .. } => net.forward_batch(&concat_cols(s, a)),
        }
    }

    pub fn value(&self, s: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
        let sm = DMatrix::from_row_slice(1, s.len(), s.as_slice());
        let am = DMatrix::from_row_slice(1, a.len(), a.as_slice());
        Ok(self.values_batch(&sm, &am)?[0])
    }

    /// Values and gradients of `Σ_i upstream_i · f(s_i, a_i)` w.r.t. states and action vectors.
    pub fn input_grads_batch(
        &self,
        s: &DMatrix<f64>,
        a: &DMatrix<f64>,
        upstream: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        check_dim(s.nrows(), upstream.len())?;
        match self {
            Self::Linear { weights, fmap } => {
                let values = self.values_batch(s, a)?;
                let g = upstream * weights.transpose();
                let (gs, ga) = fmap.vjp_batch(s, a, &g)?;
                Ok((values, gs, ga))
            }
            Self::Mlp { net, state_dim, action_count } => {
                check_dim(*state_dim, s.ncols())?;
                check_dim(*action_count, a.ncols())?;
                let (values, back) = net.backward_batch(&concat_cols(s, a), upstream)?;
                let gs = back.inputs.columns(0, *state_dim).into_owned();
                let ga = back.inputs.columns(*state_dim, *action_count).into_owned();
                Ok((values, gs, ga))
            }
        }
    }

    /// Per-row `max_a f(s, e_a)` over the discrete actions and the lowest maximizing index.
    pub fn max_over_actions(&self, s: &DMatrix<f64>) -> Result<(DVector<f64>, Vec<usize>)> {
        let n = s.nrows();
        let mut best = DVector::from_element(n, f64::NEG_INFINITY);
        let mut arg = vec![0usize; n];
        for act in 0..self.action_count() {
            let q = self.values_batch(s, &one_hot_rows(n, self.action_count(), act))?;
            for i in 0..n {
                if q[i] > best[i] {
                    best[i] = q[i];
                    arg[i] = act;
                }
            }
        }
        Ok((best, arg))
    }

    /// Greedy action, ties to the lowest index.
    pub fn greedy_action(&self, s: &DVector<f64>) -> Result<usize> {
        let sm = DMatrix::from_row_slice(1, s.len(), s.as_slice());
        Ok(self.max_over_actions(&sm)?.1[0])
    }
}

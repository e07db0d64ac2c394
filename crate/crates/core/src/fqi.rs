//! Fitted-Q iteration, greedy policies and environment evaluation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envs::{rollout, EnvKind, OfflineRLDataset};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Mlp2, MlpSizes, QPredictor};
use crate::optim::AdamState;
use crate::par;
use crate::rng::{derive_seed, rng_from_seed};

/// Dense view of transitions; actions may be relaxed vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBatch {
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub r: DVector<f64>,
    pub s_next: DMatrix<f64>,
    pub terminated: Vec<bool>,
}

impl TransitionBatch {
    pub fn new(
        s: DMatrix<f64>,
        a: DMatrix<f64>,
        r: DVector<f64>,
        s_next: DMatrix<f64>,
        terminated: Vec<bool>,
    ) -> Result<Self> {
        let n = s.nrows();
        check_dim(n, a.nrows())?;
        check_dim(n, r.len())?;
        check_dim(n, s_next.nrows())?;
        check_dim(n, terminated.len())?;
        check_dim(s.ncols(), s_next.ncols())?;
        Ok(Self { s, a, r, s_next, terminated })
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.s.ncols()
    }

    pub fn action_count(&self) -> usize {
        self.a.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            s: self.s.select_rows(idx),
            a: self.a.select_rows(idx),
            r: self.r.select_rows(idx),
            s_next: self.s_next.select_rows(idx),
            terminated: idx.iter().map(|&i| self.terminated[i]).collect(),
        }
    }

    pub fn vstack(&self, other: &Self) -> Result<Self> {
        check_dim(self.state_dim(), other.state_dim())?;
        check_dim(self.action_count(), other.action_count())?;
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            DMatrix::from_fn(a.nrows() + b.nrows(), a.ncols(), |i, j| {
                if i < a.nrows() {
                    a[(i, j)]
                } else {
                    b[(i - a.nrows(), j)]
                }
            })
        };
        let mut r = self.r.as_slice().to_vec();
        r.extend(other.r.iter());
        let mut t = self.terminated.clone();
        t.extend(other.terminated.iter());
        Self::new(stack(&self.s, &other.s), stack(&self.a, &other.a), DVector::from_vec(r), stack(&self.s_next, &other.s_next), t)
    }
}

impl From<&OfflineRLDataset> for TransitionBatch {
    fn from(ds: &OfflineRLDataset) -> Self {
        Self {
            s: ds.states(),
            a: ds.actions_onehot(),
            r: ds.rewards(),
            s_next: ds.next_states(),
            terminated: ds.transitions.iter().map(|t| t.terminated).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FQIConfig {
    pub iterations: usize,
    pub inner_epochs: usize,
    pub inner_lr: f64,
    /// Minibatch size; `None` means full batch up to 200 rows and 256 beyond.
    pub batch_size: Option<usize>,
    pub gamma: f64,
    pub seed: u64,
    pub hidden: (usize, usize),
    /// Continue from the previous iterate instead of re-initializing every iteration.
    pub warm_start: bool,
    /// Train on states standardized by the dataset's own statistics; the
    /// returned network still takes raw states.
    pub standardize_inputs: bool,
}

impl Default for FQIConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            inner_epochs: 200,
            inner_lr: 1e-3,
            batch_size: None,
            gamma: 0.99,
            seed: 0,
            hidden: (10, 10),
            warm_start: true,
            standardize_inputs: false,
        }
    }
}

impl FQIConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.inner_epochs == 0 || self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(Error::InvalidArgument("FQI iterations, epochs and widths must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.inner_lr > 0.0) {
            return Err(Error::InvalidArgument("inner lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= 200 => n,
            None => 256,
        }
    }
}

/// Regression targets `r + γ·max_a' Q(s', a')`, or `r` on terminated rows.
pub fn fqi_targets(q: &QPredictor, data: &TransitionBatch, gamma: f64) -> Result<DVector<f64>> {
    let (next_max, _) = q.max_over_actions(&data.s_next)?;
    Ok(DVector::from_fn(data.len(), |i, _| {
        if data.terminated[i] {
            data.r[i]
        } else {
            data.r[i] + gamma * next_max[i]
        }
    }))
}

fn concat_inputs(data: &TransitionBatch) -> DMatrix<f64> {
    let ds = data.state_dim();
    DMatrix::from_fn(data.len(), ds + data.action_count(), |i, j| {
        if j < ds {
            data.s[(i, j)]
        } else {
            data.a[(i, j - ds)]
        }
    })
}

/// Per-column mean and population stddev of the states; near-constant columns get scale 1.
pub fn state_statistics(s: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = s.nrows() as f64;
    s.column_iter()
        .map(|c| {
            let mu = c.sum() / n;
            let sd = (c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
            (mu, if sd > 1e-8 { sd } else { 1.0 })
        })
        .unzip()
}

fn scale_states(m: &DMatrix<f64>, mu: &[f64], sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mu[j]) / sd[j])
}

/// Rewrites the first layer so the network on raw inputs equals `net` on
/// `(x_j − mu_j) / sd_j` for the leading `mu.len()` columns.
pub fn fold_input_scaling(net: &mut Mlp2, mu: &[f64], sd: &[f64]) {
    for j in 0..mu.len() {
        let shift = net.w1.column(j) * (mu[j] / sd[j]);
        net.b1 -= shift;
        net.w1.column_mut(j).unscale_mut(sd[j]);
    }
}

/// Fitted-Q iteration from a He-Gaussian initialization.
pub fn fqi_train(data: &TransitionBatch, cfg: &FQIConfig) -> Result<QPredictor> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("FQI dataset".into()));
    }
    if cfg.standardize_inputs {
        let (mu, sd) = state_statistics(&data.s);
        let scaled = TransitionBatch {
            s: scale_states(&data.s, &mu, &sd),
            s_next: scale_states(&data.s_next, &mu, &sd),
            ..data.clone()
        };
        let q = fqi_train(&scaled, &FQIConfig { standardize_inputs: false, ..cfg.clone() })?;
        let QPredictor::Mlp { mut net, state_dim, action_count } = q else {
            unreachable!("FQI trains networks")
        };
        fold_input_scaling(&mut net, &mu, &sd);
        return QPredictor::mlp(net, state_dim, action_count);
    }
    let (ds, na) = (data.state_dim(), data.action_count());
    let sizes = MlpSizes::new(ds + na, cfg.hidden.0, cfg.hidden.1);
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut net = Mlp2::init_he(sizes, &mut init_rng)?;
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, 2));
    let x = concat_inputs(data);
    let n = data.len();
    let batch = cfg.effective_batch(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.iterations {
        let frozen = QPredictor::mlp(net.clone(), ds, na)?;
        let y = fqi_targets(&frozen, data, cfg.gamma)?;
        if !cfg.warm_start {
            net = Mlp2::init_he(sizes, &mut init_rng)?;
        }
        let mut adam = AdamState::new(net.num_params());
        let mut params = net.params();
        for _ in 0..cfg.inner_epochs {
            if batch >= n {
                let (_, g) = net.grad_weights(&x, &y)?;
                adam.update(&mut params, &g, cfg.inner_lr)?;
                net.set_params(&params)?;
                continue;
            }
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(batch) {
                let (_, g) = net.grad_weights(&x.select_rows(chunk), &y.select_rows(chunk))?;
                adam.update(&mut params, &g, cfg.inner_lr)?;
                net.set_params(&params)?;
            }
        }
    }
    if !net.is_finite() {
        return Err(Error::Numerical("FQI produced non-finite weights".into()));
    }
    QPredictor::mlp(net, ds, na)
}

/// `s ↦ argmax_a Q(s, e_a)`, ties to the lowest action index.
pub fn greedy_policy(q: &QPredictor) -> impl Fn(&[f64]) -> usize + Sync + '_ {
    move |s: &[f64]| {
        q.greedy_action(&DVector::from_column_slice(s))
            .expect("state dimension matches predictor")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = par::ordered_sum(&returns) / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { returns, mean, std: var.sqrt(), max }
    }
}

/// Undiscounted returns of `episodes` rollouts; episode `e` resets from `derive_seed(seed, e)`.
pub fn evaluate_policy<P>(kind: EnvKind, policy: &P, episodes: usize, seed: u64) -> Result<EvalSummary>
where
    P: Fn(&[f64]) -> usize + Sync + ?Sized,
{
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation episode".into()));
    }
    let returns = par::map_range(episodes, |e| rollout(kind, policy, derive_seed(seed, e as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_returns(returns))
}

//! Offline RL distillation by Bellman-loss matching.
//!
//! Transitions are split into non-terminated and terminated partitions, each
//! distilled against the same ensemble of random `(f_j, λ_j)` pairs. Synthetic
//! actions are relaxed real vectors; the bootstrap max always ranges over the
//! true one-hot actions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, OfflineRLDataset};
use crate::error::{check_dim, Error, Result};
use crate::fqi::{evaluate_policy, fqi_train, greedy_policy, FQIConfig, TransitionBatch};
use crate::nn::{one_hot_rows, FeatureMap, Mlp2, MlpSizes, QPredictor};
use crate::optim::AdamState;
use crate::par;
use crate::report::{DistillReport, LrRun};
use crate::rng::{derive_seed, rng_from_seed};

pub const LR_GRID: [f64; 8] = [3e-1, 1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEnsembleSample {
    pub predictor: QPredictor,
    pub lambda: f64,
}

/// Family of sampled Q-predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QArch {
    Linear { fmap: FeatureMap },
    Mlp { hidden: (usize, usize) },
}

impl QArch {
    /// `1/√(dim φ + 1)` for linear predictors, 1 for networks.
    pub fn default_sigma(&self) -> f64 {
        match self {
            Self::Linear { fmap } => 1.0 / ((fmap.dim() + 1) as f64).sqrt(),
            Self::Mlp { .. } => 1.0,
        }
    }
}

pub fn sample_predictor_h<R: Rng + ?Sized>(
    arch: &QArch,
    state_dim: usize,
    action_count: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<QEnsembleSample> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let predictor = match arch {
        QArch::Linear { fmap } => {
            check_dim(state_dim, fmap.state_dim())?;
            check_dim(action_count, fmap.action_count())?;
            let w = DVector::from_fn(fmap.dim(), |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            QPredictor::linear(w, fmap.clone())?
        }
        QArch::Mlp { hidden } => {
            let sizes = MlpSizes::new(state_dim + action_count, hidden.0, hidden.1);
            QPredictor::mlp(Mlp2::init_gaussian(sizes, sigma, rng)?, state_dim, action_count)?
        }
    };
    let lambda = sigma * rng.sample::<f64, _>(StandardNormal);
    Ok(QEnsembleSample { predictor, lambda })
}

pub fn sample_ensemble(
    arch: &QArch,
    state_dim: usize,
    action_count: usize,
    k: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<QEnsembleSample>> {
    let mut rng = rng_from_seed(seed);
    (0..k)
        .map(|_| sample_predictor_h(arch, state_dim, action_count, sigma, &mut rng))
        .collect()
}

/// Per-row Bellman residuals and the maximizing next action (0 on terminated rows).
fn residuals(q: &QEnsembleSample, b: &TransitionBatch, gamma: f64) -> Result<(DVector<f64>, Vec<usize>)> {
    let f = q.predictor.values_batch(&b.s, &b.a)?;
    let mut res = f - &b.r * q.lambda;
    let mut arg = vec![0; b.len()];
    if b.terminated.iter().any(|t| !t) {
        let (mx, am) = q.predictor.max_over_actions(&b.s_next)?;
        for i in 0..b.len() {
            if !b.terminated[i] {
                res[i] -= gamma * mx[i];
                arg[i] = am[i];
            }
        }
    }
    Ok((res, arg))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")))
    }
}

/// Mean of `(f(s,a) − λr − γ·max_a' f(s', e_a'))²`, dropping the max term on terminated rows.
pub fn bellman_loss(b: &TransitionBatch, q: &QEnsembleSample, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if b.is_empty() {
        return Err(Error::Empty("Bellman loss over no transitions".into()));
    }
    let (res, _) = residuals(q, b, gamma)?;
    Ok(res.norm_squared() / b.len() as f64)
}

/// Gradient of a scalar w.r.t. every synthetic coordinate of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub r: DVector<f64>,
    pub s_next: DMatrix<f64>,
}

impl BatchGrad {
    fn zeros_like(b: &TransitionBatch) -> Self {
        Self {
            s: DMatrix::zeros(b.len(), b.state_dim()),
            a: DMatrix::zeros(b.len(), b.action_count()),
            r: DVector::zeros(b.len()),
            s_next: DMatrix::zeros(b.len(), b.state_dim()),
        }
    }

    fn add_scaled(&mut self, other: &Self, c: f64) {
        self.s += &other.s * c;
        self.a += &other.a * c;
        self.r += &other.r * c;
        self.s_next += &other.s_next * c;
    }
}

/// Bellman loss and its gradient w.r.t. `(s, a, r, s')`. The max is held at its argmax.
pub fn bellman_loss_and_grad(b: &TransitionBatch, q: &QEnsembleSample, gamma: f64) -> Result<(f64, BatchGrad)> {
    check_gamma(gamma)?;
    if b.is_empty() {
        return Err(Error::Empty("Bellman loss over no transitions".into()));
    }
    let n = b.len() as f64;
    let (res, arg) = residuals(q, b, gamma)?;
    let up = &res * (2.0 / n);
    let (_, gs, ga) = q.predictor.input_grads_batch(&b.s, &b.a, &up)?;
    let mut grad = BatchGrad {
        s: gs,
        a: ga,
        r: &up * (-q.lambda),
        s_next: DMatrix::zeros(b.len(), b.state_dim()),
    };
    if b.terminated.iter().any(|t| !t) {
        let na = b.action_count();
        let a_star = DMatrix::from_fn(b.len(), na, |i, j| if arg[i] == j { 1.0 } else { 0.0 });
        let up_next = DVector::from_fn(b.len(), |i, _| if b.terminated[i] { 0.0 } else { -gamma * up[i] });
        let (_, gsn, _) = q.predictor.input_grads_batch(&b.s_next, &a_star, &up_next)?;
        grad.s_next = gsn;
    }
    Ok((res.norm_squared() / n, grad))
}

/// Distilled transitions, kept as separate non-terminated and terminated blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOfflineDataset {
    pub env_name: String,
    pub gamma: f64,
    pub reward_range: (f64, f64),
    pub nonterminated: TransitionBatch,
    /// Next states of this block are carried along but never enter a loss.
    pub terminated: TransitionBatch,
    /// Training partition sizes `(non-terminated, terminated)`.
    pub train_counts: (usize, usize),
}

impl SyntheticOfflineDataset {
    pub fn len(&self) -> usize {
        self.nonterminated.len() + self.terminated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.nonterminated.state_dim()
    }

    pub fn action_count(&self) -> usize {
        self.nonterminated.action_count()
    }

    /// Both blocks stacked, non-terminated first.
    pub fn batch(&self) -> TransitionBatch {
        self.nonterminated.vstack(&self.terminated).expect("blocks share dimensions")
    }

    fn num_params(&self) -> usize {
        let (d, a) = (self.state_dim(), self.action_count());
        self.nonterminated.len() * (2 * d + a + 1) + self.terminated.len() * (d + a + 1)
    }

    fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (b, with_next) in [(&self.nonterminated, true), (&self.terminated, false)] {
            for i in 0..b.len() {
                out.extend(b.s.row(i).iter());
                out.extend(b.a.row(i).iter());
                out.push(b.r[i]);
                if with_next {
                    out.extend(b.s_next.row(i).iter());
                }
            }
        }
        out
    }

    fn unpack(&mut self, p: &[f64]) {
        let (d, a) = (self.state_dim(), self.action_count());
        let mut k = 0;
        for (b, with_next) in [(&mut self.nonterminated, true), (&mut self.terminated, false)] {
            for i in 0..b.len() {
                for j in 0..d {
                    b.s[(i, j)] = p[k];
                    k += 1;
                }
                for j in 0..a {
                    b.a[(i, j)] = p[k];
                    k += 1;
                }
                b.r[i] = p[k];
                k += 1;
                if with_next {
                    for j in 0..d {
                        b.s_next[(i, j)] = p[k];
                        k += 1;
                    }
                }
            }
        }
    }

    fn clamp_rewards(&mut self) {
        let (lo, hi) = self.reward_range;
        for b in [&mut self.nonterminated, &mut self.terminated] {
            b.r.apply(|r| *r = r.clamp(lo, hi));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pack().iter().all(|v| v.is_finite())
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = OfflineRLDataset::csv_header(self.state_dim());
        h.extend((0..self.action_count()).map(|j| format!("ar{j}")));
        h
    }

    /// Offline-dataset columns (action = argmax of the relaxed vector) followed by the relaxed block.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.csv_header())?;
        for (b, term) in [(&self.nonterminated, false), (&self.terminated, true)] {
            for i in 0..b.len() {
                let a_row = b.a.row(i);
                let a = (1..a_row.len()).fold(0, |best, j| if a_row[j] > a_row[best] { j } else { best });
                let mut row: Vec<String> = b.s.row(i).iter().map(|v| v.to_string()).collect();
                row.push(a.to_string());
                row.push(b.r[i].to_string());
                row.extend(b.s_next.row(i).iter().map(|v| v.to_string()));
                row.push(u8::from(term).to_string());
                row.push("0".into());
                row.extend(a_row.iter().map(|v| v.to_string()));
                wr.write_record(&row)?;
            }
        }
        wr.flush().map_err(|e| Error::Io { path: "<csv>".into(), source: e })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Split sizes for `m` synthetic rows: round-half-up on the non-terminated share,
/// at least one row for each nonempty partition, never more rows than a partition holds.
pub fn allocate_partitions(m: usize, n_nonterm: usize, n_term: usize) -> Result<(usize, usize)> {
    let n = n_nonterm + n_term;
    if m > n {
        return Err(Error::InvalidArgument(format!("synthetic size {m} exceeds training size {n}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("synthetic size must be positive".into()));
    }
    if n_nonterm > 0 && n_term > 0 && m < 2 {
        return Err(Error::InvalidArgument("need m ≥ 2 when both partitions are present".into()));
    }
    let mut nt = ((m * n_nonterm) as f64 / n as f64 + 0.5).floor() as usize;
    nt = nt.min(m);
    let mut t = m - nt;
    if n_term > 0 && t == 0 {
        t = 1;
        nt = m - 1;
    }
    if n_nonterm > 0 && nt == 0 {
        nt = 1;
        t = m - 1;
    }
    if t > n_term {
        nt += t - n_term;
        t = n_term;
    }
    if nt > n_nonterm {
        t += nt - n_nonterm;
        nt = n_nonterm;
    }
    Ok((nt, t))
}

/// Fixed training-side losses for one ensemble.
#[derive(Debug, Clone)]
pub struct BellmanMatcher {
    ensemble: Vec<QEnsembleSample>,
    gamma: f64,
    train_nonterm: Option<Vec<f64>>,
    train_term: Option<Vec<f64>>,
}

/// Gradient of the matching objective w.r.t. both synthetic blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynGrad {
    pub nonterminated: BatchGrad,
    pub terminated: BatchGrad,
}

fn split_batch(b: &TransitionBatch) -> (TransitionBatch, TransitionBatch) {
    let (nt, t): (Vec<usize>, Vec<usize>) = (0..b.len()).partition(|&i| !b.terminated[i]);
    (b.select(&nt), b.select(&t))
}

impl BellmanMatcher {
    pub fn new(train: &TransitionBatch, ensemble: Vec<QEnsembleSample>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if ensemble.is_empty() {
            return Err(Error::InvalidArgument("ensemble must be nonempty".into()));
        }
        if train.is_empty() {
            return Err(Error::Empty("training transitions".into()));
        }
        let (nt, t) = split_batch(train);
        let losses = |b: &TransitionBatch| -> Result<Option<Vec<f64>>> {
            if b.is_empty() {
                return Ok(None);
            }
            par::map_slice(&ensemble, |q| bellman_loss(b, q, gamma))
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let train_nonterm = losses(&nt)?;
        let train_term = losses(&t)?;
        Ok(Self { ensemble, gamma, train_nonterm, train_term })
    }

    pub fn ensemble(&self) -> &[QEnsembleSample] {
        &self.ensemble
    }

    fn check_partitions(&self, syn: &SyntheticOfflineDataset) -> Result<()> {
        let ok = self.train_nonterm.is_some() == !syn.nonterminated.is_empty()
            && self.train_term.is_some() == !syn.terminated.is_empty();
        if ok && syn.nonterminated.terminated.iter().all(|t| !t) && syn.terminated.terminated.iter().all(|t| *t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "synthetic partitions do not mirror the training partitions".into(),
            ))
        }
    }

    /// `Σ_j (L_train − L_syn)²` summed over both partitions.
    pub fn objective(&self, syn: &SyntheticOfflineDataset) -> Result<f64> {
        self.check_partitions(syn)?;
        let mut total = 0.0;
        for (j, q) in self.ensemble.iter().enumerate() {
            if let Some(tr) = &self.train_nonterm {
                let e = tr[j] - bellman_loss(&syn.nonterminated, q, self.gamma)?;
                total += e * e;
            }
            if let Some(tr) = &self.train_term {
                let e = tr[j] - bellman_loss(&syn.terminated, q, self.gamma)?;
                total += e * e;
            }
        }
        Ok(total)
    }

    pub fn objective_and_gradient(&self, syn: &SyntheticOfflineDataset) -> Result<(f64, SynGrad)> {
        self.check_partitions(syn)?;
        let mut total = 0.0;
        let mut grad = SynGrad {
            nonterminated: BatchGrad::zeros_like(&syn.nonterminated),
            terminated: BatchGrad::zeros_like(&syn.terminated),
        };
        for (j, q) in self.ensemble.iter().enumerate() {
            if let Some(tr) = &self.train_nonterm {
                let (l, g) = bellman_loss_and_grad(&syn.nonterminated, q, self.gamma)?;
                let e = l - tr[j];
                total += e * e;
                grad.nonterminated.add_scaled(&g, 2.0 * e);
            }
            if let Some(tr) = &self.train_term {
                let (l, g) = bellman_loss_and_grad(&syn.terminated, q, self.gamma)?;
                let e = l - tr[j];
                total += e * e;
                grad.terminated.add_scaled(&g, 2.0 * e);
            }
        }
        Ok((total, grad))
    }
}

pub fn bellman_match_objective(
    train: &TransitionBatch,
    syn: &SyntheticOfflineDataset,
    ensemble: &[QEnsembleSample],
    gamma: f64,
) -> Result<f64> {
    BellmanMatcher::new(train, ensemble.to_vec(), gamma)?.objective(syn)
}

fn pack_grad(g: &SynGrad, syn: &SyntheticOfflineDataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(syn.num_params());
    for (b, with_next) in [(&g.nonterminated, true), (&g.terminated, false)] {
        for i in 0..b.r.len() {
            out.extend(b.s.row(i).iter());
            out.extend(b.a.row(i).iter());
            out.push(b.r[i]);
            if with_next {
                out.extend(b.s_next.row(i).iter());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlDistillConfig {
    pub m: usize,
    pub k: usize,
    /// Defaults to the architecture's σ.
    pub sigma: Option<f64>,
    pub gamma: f64,
    pub lr_grid: Vec<f64>,
    pub max_steps: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    pub clamp_rewards: bool,
    /// Re-impose the first-moment constraint after every step (linear decomposable φ only).
    pub mean_constraint: bool,
    pub iterate: Iterate,
}

impl Default for RlDistillConfig {
    fn default() -> Self {
        Self {
            m: 50,
            k: 20,
            sigma: None,
            gamma: 0.99,
            lr_grid: LR_GRID.to_vec(),
            max_steps: 1000,
            seed: 0,
            eval_episodes: 10,
            clamp_rewards: true,
            mean_constraint: false,
            iterate: Iterate::Best,
        }
    }
}

impl RlDistillConfig {
    pub fn ensemble_seed(&self) -> u64 {
        derive_seed(self.seed, 11)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, 12)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, 13)
    }

    pub fn fqi_seed(&self) -> u64 {
        derive_seed(self.seed, 14)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.lr_grid.is_empty() || self.eval_episodes == 0 {
            return Err(Error::InvalidArgument("k, lr grid and eval episodes must be nonempty".into()));
        }
        if self.lr_grid.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        check_gamma(self.gamma)
    }
}

fn reward_range_for(train: &OfflineRLDataset) -> (f64, f64) {
    match train.env_kind() {
        Some(kind) => kind.spec().reward_range,
        None => train
            .transitions
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t.r), hi.max(t.r))),
    }
}

/// Random subsample of each partition, in the allocated sizes.
pub fn init_synthetic(train: &OfflineRLDataset, m: usize, seed: u64) -> Result<SyntheticOfflineDataset> {
    let batch = TransitionBatch::from(train);
    let (nt, t) = split_batch(&batch);
    let (m_nt, m_t) = allocate_partitions(m, nt.len(), t.len())?;
    let mut rng = rng_from_seed(seed);
    let mut pick = |b: &TransitionBatch, k: usize| {
        let mut idx = sample(&mut rng, b.len(), k).into_vec();
        idx.sort_unstable();
        b.select(&idx)
    };
    Ok(SyntheticOfflineDataset {
        env_name: train.env_name.clone(),
        gamma: train.gamma,
        reward_range: reward_range_for(train),
        nonterminated: pick(&nt, m_nt),
        terminated: pick(&t, m_t),
        train_counts: (nt.len(), t.len()),
    })
}

struct RunResult {
    lr: f64,
    trace: Vec<f64>,
    best_step: usize,
    best_objective: f64,
    best: SyntheticOfflineDataset,
    eval: Option<(Vec<f64>, f64)>,
}

/// Which iterate of an optimization run is returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Iterate {
    /// Lowest matching objective, earliest on ties.
    #[default]
    Best,
    /// Last finite iterate.
    Last,
}

/// Adam on the matching objective from `init`; returns `(iterate, trace, step, objective)`.
pub fn optimize_synthetic(
    matcher: &BellmanMatcher,
    init: &SyntheticOfflineDataset,
    lr: f64,
    max_steps: usize,
    clamp_rewards: bool,
    constraint: Option<(&TransitionBatch, &FeatureMap)>,
    iterate: Iterate,
) -> Result<(SyntheticOfflineDataset, Vec<f64>, usize, f64)> {
    let mut syn = init.clone();
    if let Some((train, fmap)) = constraint {
        syn = mean_constraint_project(&syn, train, fmap)?;
    }
    let mut adam = AdamState::new(syn.num_params());
    let mut params = syn.pack();
    let mut trace = Vec::with_capacity(max_steps + 1);
    let mut best = (f64::INFINITY, 0, syn.clone());
    for step in 0..=max_steps {
        let last = step == max_steps;
        let (obj, grad) = if last {
            (matcher.objective(&syn)?, None)
        } else {
            let (o, g) = matcher.objective_and_gradient(&syn)?;
            (o, Some(g))
        };
        if !obj.is_finite() {
            break;
        }
        trace.push(obj);
        if obj < best.0 || iterate == Iterate::Last {
            best = (obj, step, syn.clone());
        }
        let Some(grad) = grad else { break };
        adam.update(&mut params, &pack_grad(&grad, &syn), lr)?;
        syn.unpack(&params);
        if clamp_rewards {
            syn.clamp_rewards();
        }
        if let Some((train, fmap)) = constraint {
            syn = mean_constraint_project(&syn, train, fmap)?;
        }
        params = syn.pack();
    }
    if trace.is_empty() {
        return Err(Error::Numerical("matching objective is not finite at initialization".into()));
    }
    Ok((best.2, trace, best.1, best.0))
}

/// Bellman-loss distillation with a learning-rate search.
///
/// With `env` given, each candidate is judged by the evaluation return of an
/// FQI policy trained on it (ties to the lower objective); otherwise the
/// lowest objective wins.
pub fn distill_rl(
    train: &OfflineRLDataset,
    cfg: &RlDistillConfig,
    arch: &QArch,
    env: Option<EnvKind>,
    fqi: &FQIConfig,
) -> Result<(SyntheticOfflineDataset, DistillReport)> {
    cfg.validate()?;
    let sigma = cfg.sigma.unwrap_or_else(|| arch.default_sigma());
    let ensemble = sample_ensemble(arch, train.state_dim, train.action_count, cfg.k, sigma, cfg.ensemble_seed())?;
    let train_batch = TransitionBatch::from(train);
    let matcher = BellmanMatcher::new(&train_batch, ensemble, cfg.gamma)?;
    let init = init_synthetic(train, cfg.m, cfg.init_seed())?;
    let fmap = match (cfg.mean_constraint, arch) {
        (false, _) => None,
        (true, QArch::Linear { fmap }) if fmap.is_decomposable() => Some(fmap.clone()),
        (true, _) => {
            return Err(Error::InvalidArgument(
                "the mean constraint needs a linear decomposable feature map".into(),
            ))
        }
    };
    let fqi_cfg = FQIConfig { seed: cfg.fqi_seed(), gamma: cfg.gamma, ..fqi.clone() };

    let runs: Vec<RunResult> = par::map_slice(&cfg.lr_grid, |&lr| -> Result<RunResult> {
        let constraint = fmap.as_ref().map(|f| (&train_batch, f));
        let (best, trace, best_step, best_objective) =
            optimize_synthetic(&matcher, &init, lr, cfg.max_steps, cfg.clamp_rewards, constraint, cfg.iterate)?;
        let eval = match env {
            Some(kind) => {
                let q = fqi_train(&best.batch(), &fqi_cfg)?;
                let summary = evaluate_policy(kind, &greedy_policy(&q), cfg.eval_episodes, cfg.eval_seed())?;
                Some((summary.returns, summary.mean))
            }
            None => None,
        };
        Ok(RunResult { lr, trace, best_step, best_objective, best, eval })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let better = |a: &RunResult, b: &RunResult| -> bool {
        match (&a.eval, &b.eval) {
            (Some((_, ea)), Some((_, eb))) if ea != eb => ea > eb,
            _ => a.best_objective < b.best_objective,
        }
    };
    let winner = (1..runs.len()).fold(0, |w, i| if better(&runs[i], &runs[w]) { i } else { w });

    let mut report = DistillReport::new("offline_rl");
    report.seeds = BTreeMap::from([
        ("seed".to_string(), cfg.seed),
        ("ensemble".to_string(), cfg.ensemble_seed()),
        ("init".to_string(), cfg.init_seed()),
        ("eval".to_string(), cfg.eval_seed()),
        ("fqi".to_string(), cfg.fqi_seed()),
    ]);
    report.config = serde_json::json!({
        "distill": cfg,
        "arch": arch,
        "sigma": sigma,
        "fqi": fqi_cfg,
        "env": env.map(|e| e.name()),
    });
    report.runs = runs
        .iter()
        .map(|r| LrRun {
            lr: r.lr,
            objective_trace: r.trace.clone(),
            best_step: r.best_step,
            best_objective: r.best_objective,
            eval_returns: r.eval.as_ref().map(|e| e.0.clone()).unwrap_or_default(),
            eval_mean: r.eval.as_ref().map(|e| e.1).unwrap_or(f64::NAN),
        })
        .collect();
    let w = &runs[winner];
    report.selected_lr = Some(w.lr);
    report.objective_trace = w.trace.clone();
    report.best_step = w.best_step;
    report.best_objective = w.best_objective;
    report.metrics.insert("initial_objective".into(), w.trace[0]);
    report.metrics.insert("synthetic_nonterminated".into(), w.best.nonterminated.len() as f64);
    report.metrics.insert("synthetic_terminated".into(), w.best.terminated.len() as f64);
    if let Some((_, mean)) = &w.eval {
        report.metrics.insert("selection_eval_mean".into(), *mean);
    }
    report.notes.push("rewards clamped to the environment reward range; states unconstrained".into());
    report.notes.push("one ensemble shared by the terminated and non-terminated partitions".into());
    report.synthetic = serde_json::to_value(&w.best)?;
    Ok((w.best.clone(), report))
}

fn block_means(b: &TransitionBatch) -> (DVector<f64>, DVector<f64>, f64, DVector<f64>) {
    let n = b.len() as f64;
    (
        b.s.row_mean().transpose(),
        b.a.row_mean().transpose(),
        b.r.sum() / n,
        b.s_next.row_mean().transpose(),
    )
}

/// `E_syn[(φ1(s), φ2(a), r, φ1(s'))] − E_train[...]` over all rows.
pub fn mean_constraint_residual(
    train: &TransitionBatch,
    syn: &SyntheticOfflineDataset,
    fmap: &FeatureMap,
) -> Result<DVector<f64>> {
    if !fmap.is_decomposable() {
        return Err(Error::InvalidArgument("mean constraint needs a decomposable feature map".into()));
    }
    if train.is_empty() || syn.is_empty() {
        return Err(Error::Empty("mean constraint over no transitions".into()));
    }
    let (ts, ta, tr, tsn) = block_means(train);
    let (ss, sa, sr, ssn) = block_means(&syn.batch());
    let p1 = fmap.phi1(&(ss - ts))?;
    let p2 = fmap.phi2(&(sa - ta))?;
    let p3 = fmap.phi1(&(ssn - tsn))?;
    let mut out = Vec::with_capacity(3 * p1.len() + 1);
    out.extend(p1.iter());
    out.extend(p2.iter());
    out.push(sr - tr);
    out.extend(p3.iter());
    Ok(DVector::from_vec(out))
}

/// Shift `values` by a constant so their mean is `target`, keeping each in `[lo, hi]`.
/// Returns the mean error that could not be absorbed.
fn shift_with_clamp(values: &mut [f64], target: f64, lo: f64, hi: f64) -> f64 {
    let n = values.len() as f64;
    let delta = target - values.iter().sum::<f64>() / n;
    values.iter_mut().for_each(|v| *v = (*v + delta).clamp(lo, hi));
    for _ in 0..values.len() + 1 {
        let deficit = target * n - values.iter().sum::<f64>();
        if deficit.abs() <= 1e-14 * n.max(1.0) {
            break;
        }
        let free: Vec<usize> = (0..values.len())
            .filter(|&i| if deficit > 0.0 { values[i] < hi } else { values[i] > lo })
            .collect();
        if free.is_empty() {
            break;
        }
        let share = deficit / free.len() as f64;
        for i in free {
            values[i] = (values[i] + share).clamp(lo, hi);
        }
    }
    values.iter().sum::<f64>() / n - target
}

/// Shift every synthetic block by the constant that zeroes its mean residual.
pub fn mean_constraint_project(
    syn: &SyntheticOfflineDataset,
    train: &TransitionBatch,
    fmap: &FeatureMap,
) -> Result<SyntheticOfflineDataset> {
    if !fmap.is_decomposable() {
        return Err(Error::InvalidArgument(
            "projection is undefined for non-linear feature maps".into(),
        ));
    }
    let (ts, ta, tr, tsn) = block_means(train);
    let (ss, sa, _, ssn) = block_means(&syn.batch());
    let (ds, da, dsn) = (ts - ss, ta - sa, tsn - ssn);
    let mut out = syn.clone();
    for b in [&mut out.nonterminated, &mut out.terminated] {
        for mut row in b.s.row_iter_mut() {
            row += ds.transpose();
        }
        for mut row in b.a.row_iter_mut() {
            row += da.transpose();
        }
        for mut row in b.s_next.row_iter_mut() {
            row += dsn.transpose();
        }
    }
    let mut r: Vec<f64> = out.nonterminated.r.iter().chain(out.terminated.r.iter()).copied().collect();
    let (lo, hi) = out.reward_range;
    let leftover = shift_with_clamp(&mut r, tr, lo.min(tr), hi.max(tr));
    if leftover.abs() > 1e-12 {
        log::debug!("reward mean constraint left a residual of {leftover:e}");
    }
    let n_nt = out.nonterminated.len();
    out.nonterminated.r = DVector::from_column_slice(&r[..n_nt]);
    out.terminated.r = DVector::from_column_slice(&r[n_nt..]);
    Ok(out)
}

/// Checks `max_a' v·φ(s', a') = v·φ1(s') + max_a' v·φ2(a')` on every row, to 1e-10.
pub fn decomposable_max_identity_check(
    v: &DVector<f64>,
    s_next: &DMatrix<f64>,
    fmap: &FeatureMap,
) -> Result<bool> {
    let q = QPredictor::linear(v.clone(), fmap.clone())?;
    let na = fmap.action_count();
    let (lhs, _) = q.max_over_actions(s_next)?;
    let action_max = (0..na)
        .map(|a| fmap.phi2(&crate::nn::one_hot(na, a)).map(|p| v.dot(&p)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let zeros = one_hot_rows(s_next.nrows(), na, 0) * 0.0;
    let state_part = fmap.apply_batch(s_next, &zeros)? * v;
    Ok((0..s_next.nrows()).all(|i| {
        let rhs = state_part[i] + action_max;
        (lhs[i] - rhs).abs() <= 1e-10 * (1.0 + lhs[i].abs())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_batch(n: usize, d: usize, na: usize, term: bool, seed: u64) -> TransitionBatch {
        let mut rng = rng_from_seed(seed);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let s = DMatrix::from_fn(n, d, |_, _| g());
        let a = DMatrix::from_fn(n, na, |i, j| if (i + j) % na == 0 { 1.0 } else { 0.0 });
        let r = DVector::from_fn(n, |_, _| g());
        let sn = DMatrix::from_fn(n, d, |_, _| g());
        TransitionBatch::new(s, a, r, sn, vec![term; n]).unwrap()
    }

    #[test]
    fn gamma_zero_is_reward_regression() {
        let b = rand_batch(7, 3, 2, false, 1);
        let q = sample_predictor_h(&QArch::Mlp { hidden: (4, 4) }, 3, 2, 1.0, &mut rng_from_seed(2)).unwrap();
        let f = q.predictor.values_batch(&b.s, &b.a).unwrap();
        let mse = (f - &b.r * q.lambda).norm_squared() / 7.0;
        assert!((bellman_loss(&b, &q, 0.0).unwrap() - mse).abs() < 1e-12);
    }

    #[test]
    fn terminated_single_row() {
        let b = TransitionBatch::new(
            DMatrix::zeros(1, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 5.0),
            DMatrix::zeros(1, 2),
            vec![true],
        )
        .unwrap();
        let q = QEnsembleSample {
            predictor: QPredictor::linear(DVector::zeros(4), FeatureMap::concat(2, 2)).unwrap(),
            lambda: 1.0,
        };
        assert_eq!(bellman_loss(&b, &q, 0.9).unwrap(), 25.0);
    }

    #[test]
    fn allocation_rules() {
        assert_eq!(allocate_partitions(50, 9550, 450).unwrap(), (48, 2));
        assert_eq!(allocate_partitions(10, 9550, 450).unwrap(), (9, 1));
        assert_eq!(allocate_partitions(10, 100, 0).unwrap(), (10, 0));
        assert_eq!(allocate_partitions(4, 2, 2).unwrap(), (2, 2));
        assert_eq!(allocate_partitions(5, 4, 1).unwrap(), (4, 1));
        assert_eq!(allocate_partitions(3, 1, 9).unwrap(), (1, 2));
        assert!(allocate_partitions(11, 5, 5).is_err());
        assert!(allocate_partitions(1, 5, 5).is_err());
    }

    #[test]
    fn pack_roundtrip() {
        let syn = SyntheticOfflineDataset {
            env_name: "x".into(),
            gamma: 0.9,
            reward_range: (-1.0, 1.0),
            nonterminated: rand_batch(3, 2, 3, false, 5),
            terminated: rand_batch(2, 2, 3, true, 6),
            train_counts: (30, 20),
        };
        let p = syn.pack();
        assert_eq!(p.len(), syn.num_params());
        let mut other = syn.clone();
        other.unpack(&vec![0.0; p.len()]);
        other.unpack(&p);
        assert_eq!(other, syn);
    }

    #[test]
    fn reward_redistribution() {
        let mut r = vec![0.9, 0.5, 0.1];
        let left = shift_with_clamp(&mut r, 0.7, 0.0, 1.0);
        assert!(left.abs() < 1e-12);
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut r = vec![1.0, 1.0];
        let left = shift_with_clamp(&mut r, 1.5, 0.0, 1.0);
        assert!((left + 0.5).abs() < 1e-12);
    }
}

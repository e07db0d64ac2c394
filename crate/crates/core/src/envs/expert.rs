use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mountain_car::{MAX_POSITION, MAX_SPEED, MIN_POSITION};
use super::{collect_with, rollout, Env, EnvKind, OfflineRLDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

const ACTIONS: usize = 3;

/// Greedy policy over a uniform (position, velocity) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub bins: (usize, usize),
    /// Row-major over `(position bin, velocity bin)`, then action.
    pub q: Vec<f64>,
}

fn bin(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    let f = ((x - lo) / (hi - lo) * n as f64).floor();
    (f.max(0.0) as usize).min(n - 1)
}

impl TabularPolicy {
    pub fn new(bins: (usize, usize)) -> Self {
        Self {
            bins,
            q: vec![0.0; bins.0 * bins.1 * ACTIONS],
        }
    }

    pub fn cell(&self, obs: &[f64]) -> usize {
        let p = bin(obs[0], MIN_POSITION, MAX_POSITION, self.bins.0);
        let v = bin(obs[1], -MAX_SPEED, MAX_SPEED, self.bins.1);
        p * self.bins.1 + v
    }

    fn row(&self, cell: usize) -> &[f64] {
        &self.q[cell * ACTIONS..(cell + 1) * ACTIONS]
    }

    fn argmax(row: &[f64]) -> usize {
        (1..row.len()).fold(0, |b, a| if row[a] > row[b] { a } else { b })
    }

    /// Greedy action, ties to the lowest index.
    pub fn act(&self, obs: &[f64]) -> usize {
        Self::argmax(self.row(self.cell(obs)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTraining {
    pub policy: TabularPolicy,
    /// Fraction of the 10 evaluation resets that reach the goal before truncation.
    pub success_rate: f64,
    pub mean_return: f64,
    pub warning: Option<String>,
}

pub const EXPERT_EVAL_EPISODES: u64 = 10;

/// ε-greedy tabular Q-learning with ε decayed linearly from 1.0 to 0.05.
pub fn train_tabular_expert_mountaincar(
    bins: (usize, usize),
    episodes: usize,
    lr: f64,
    gamma: f64,
    seed: u64,
) -> Result<ExpertTraining> {
    if bins.0 < 10 || bins.1 < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10×10 bins, got {bins:?}")));
    }
    let mut pol = TabularPolicy::new(bins);
    let mut env = Env::new(EnvKind::MountainCar, derive_seed(seed, 1));
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    for ep in 0..episodes {
        let frac = if episodes > 1 { ep as f64 / (episodes - 1) as f64 } else { 1.0 };
        let eps = 1.0 + (0.05 - 1.0) * frac;
        let mut obs = env.reset();
        loop {
            let cell = pol.cell(&obs);
            let a = if rng.gen::<f64>() < eps { rng.gen_range(0..ACTIONS) } else { TabularPolicy::argmax(pol.row(cell)) };
            let out = env.step(a)?;
            let target = if out.terminated {
                out.reward
            } else {
                let next = pol.row(pol.cell(&out.obs));
                out.reward + gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let q = &mut pol.q[cell * ACTIONS + a];
            *q += lr * (target - *q);
            if out.terminated || out.truncated {
                break;
            }
            obs = out.obs;
        }
    }
    let returns: Vec<f64> = (0..EXPERT_EVAL_EPISODES)
        .map(|e| rollout(EnvKind::MountainCar, &|o: &[f64]| pol.act(o), derive_seed(seed, 100 + e)))
        .collect::<Result<_>>()?;
    let successes = returns.iter().filter(|r| **r > -200.0).count();
    let success_rate = successes as f64 / EXPERT_EVAL_EPISODES as f64;
    let warning = (successes < 8).then(|| {
        format!("expert reached the goal in only {successes}/{EXPERT_EVAL_EPISODES} evaluation episodes")
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(ExpertTraining {
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        policy: pol,
        success_rate,
        warning,
    })
}

/// `n_random` uniform-random transitions followed by `n_expert` greedy expert transitions.
pub fn collect_mixed_mountaincar(
    expert: &TabularPolicy,
    n_random: usize,
    n_expert: usize,
    gamma: f64,
    seed: u64,
) -> Result<OfflineRLDataset> {
    let mut rng = rng_from_seed(derive_seed(seed, 3));
    let mut env = Env::new(EnvKind::MountainCar, derive_seed(seed, 1));
    let mut t = collect_with(&mut env, n_random, &mut rng, |_, r| r.gen_range(0..ACTIONS))?;
    let mut env = Env::new(EnvKind::MountainCar, derive_seed(seed, 2));
    t.extend(collect_with(&mut env, n_expert, &mut rng, |o, _| expert.act(o))?);
    OfflineRLDataset::new(EnvKind::MountainCar, gamma, t)
}

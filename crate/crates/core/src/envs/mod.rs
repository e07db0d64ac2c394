//! Classic-control environments and offline data collection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, DetRng};

pub mod acrobot;
pub mod cartpole;
mod dataset;
pub mod expert;
pub mod mountain_car;

pub use acrobot::acrobot_step;
pub use cartpole::cartpole_step;
pub use dataset::{OfflineRLDataset, Transition};
pub use expert::{collect_mixed_mountaincar, train_tabular_expert_mountaincar, ExpertTraining, TabularPolicy};
pub use mountain_car::mountaincar_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Cartpole,
    MountainCar,
    Acrobot,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Cartpole, EnvKind::MountainCar, EnvKind::Acrobot];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cartpole => "cartpole",
            Self::MountainCar => "mountain_car",
            Self::Acrobot => "acrobot",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            Self::Cartpole => EnvSpec {
                name: self.name().into(),
                state_dim: 4,
                action_count: 2,
                max_episode_steps: 500,
                reward_range: (0.0, 1.0),
                termination: "|x| > 2.4 or |theta| > 12 degrees".into(),
            },
            Self::MountainCar => EnvSpec {
                name: self.name().into(),
                state_dim: 2,
                action_count: 3,
                max_episode_steps: 200,
                reward_range: (-1.0, 0.0),
                termination: "position >= 0.5".into(),
            },
            Self::Acrobot => EnvSpec {
                name: self.name().into(),
                state_dim: 6,
                action_count: 3,
                max_episode_steps: 500,
                reward_range: (-1.0, 0.0),
                termination: "-cos(theta1) - cos(theta1 + theta2) > 1".into(),
            },
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cartpole" => Ok(Self::Cartpole),
            "mountain_car" | "mountaincar" => Ok(Self::MountainCar),
            "acrobot" => Ok(Self::Acrobot),
            other => Err(Error::InvalidArgument(format!("unknown environment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    /// Observation dimension.
    pub state_dim: usize,
    pub action_count: usize,
    pub max_episode_steps: usize,
    /// Per-step reward envelope, used to clamp synthetic rewards.
    pub reward_range: (f64, f64),
    pub termination: String,
}

/// Initial internal state drawn from the environment's reset distribution.
pub fn reset_state<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Vec<f64> {
    match kind {
        EnvKind::Cartpole => (0..4).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        EnvKind::MountainCar => vec![rng.gen_range(-0.6..-0.4), 0.0],
        EnvKind::Acrobot => (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    }
}

pub fn reset(kind: EnvKind, seed: u64) -> Vec<f64> {
    reset_state(kind, &mut rng_from_seed(seed))
}

/// Observation of an internal state.
pub fn observe(kind: EnvKind, state: &[f64]) -> Vec<f64> {
    match kind {
        EnvKind::Acrobot => acrobot::observation(&[state[0], state[1], state[2], state[3]]).to_vec(),
        _ => state.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Pure transition on internal states: `(next_state, reward, terminated)`.
pub fn step_state(kind: EnvKind, state: &[f64], action: usize) -> Result<(Vec<f64>, f64, bool)> {
    let bad = |n| Error::Dimension { expected: n, got: state.len() };
    match kind {
        EnvKind::Cartpole => {
            let s: [f64; 4] = state.try_into().map_err(|_| bad(4))?;
            let (n, r, t) = cartpole_step(&s, action)?;
            Ok((n.to_vec(), r, t))
        }
        EnvKind::MountainCar => {
            let s: [f64; 2] = state.try_into().map_err(|_| bad(2))?;
            let (n, r, t) = mountaincar_step(&s, action)?;
            Ok((n.to_vec(), r, t))
        }
        EnvKind::Acrobot => {
            let s: [f64; 4] = state.try_into().map_err(|_| bad(4))?;
            let (n, _, r, t) = acrobot_step(&s, action)?;
            Ok((n.to_vec(), r, t))
        }
    }
}

/// Stateful episode runner with its own reset stream.
#[derive(Debug, Clone)]
pub struct Env {
    kind: EnvKind,
    state: Vec<f64>,
    steps: usize,
    rng: DetRng,
}

impl Env {
    pub fn new(kind: EnvKind, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let state = reset_state(kind, &mut rng);
        Self { kind, state, steps: 0, rng }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.state = reset_state(self.kind, &mut self.rng);
        self.steps = 0;
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        observe(self.kind, &self.state)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let (next, reward, terminated) = step_state(self.kind, &self.state, action)?;
        self.state = next;
        self.steps += 1;
        let truncated = !terminated && self.steps >= self.kind.spec().max_episode_steps;
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            terminated,
            truncated,
        })
    }
}

/// Undiscounted return of one episode started from `reset(kind, seed)`.
pub fn rollout<P: Fn(&[f64]) -> usize + ?Sized>(kind: EnvKind, policy: &P, seed: u64) -> Result<f64> {
    let mut env = Env::new(kind, seed);
    let mut obs = env.observation();
    let mut ret = 0.0;
    loop {
        let out = env.step(policy(&obs))?;
        ret += out.reward;
        if out.terminated || out.truncated {
            return Ok(ret);
        }
        obs = out.obs;
    }
}

/// Runs `policy` for exactly `n` transitions, resetting at episode ends.
pub fn collect_with<R: Rng, P: FnMut(&[f64], &mut R) -> usize>(
    env: &mut Env,
    n: usize,
    rng: &mut R,
    mut policy: P,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(n);
    let mut obs = env.reset();
    while out.len() < n {
        let a = policy(&obs, rng);
        let step = env.step(a)?;
        out.push(Transition {
            s: obs,
            a,
            r: step.reward,
            s_next: step.obs.clone(),
            terminated: step.terminated,
            truncated: step.truncated,
        });
        obs = if step.terminated || step.truncated { env.reset() } else { step.obs };
    }
    Ok(out)
}

pub fn collect_random(kind: EnvKind, n: usize, gamma: f64, seed: u64) -> Result<OfflineRLDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one transition".into()));
    }
    let mut env = Env::new(kind, derive_seed(seed, 1));
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    let count = kind.spec().action_count;
    let transitions = collect_with(&mut env, n, &mut rng, |_, r| r.gen_range(0..count))?;
    OfflineRLDataset::new(kind, gamma, transitions)
}

//! Serializable run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Trace and outcome of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// `"supervised"` or `"offline_rl"`.
    pub kind: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    /// Matching objective before every optimizer step, plus the final value.
    pub objective_trace: Vec<f64>,
    /// Held-out objective and the steps at which it was measured (supervised only).
    pub eval_trace: Vec<f64>,
    pub eval_steps: Vec<usize>,
    pub best_step: usize,
    pub best_objective: f64,
    /// Per-learning-rate runs (offline RL search).
    pub runs: Vec<LrRun>,
    pub selected_lr: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub synthetic: serde_json::Value,
}

impl DistillReport {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            seeds: BTreeMap::new(),
            config: serde_json::Value::Null,
            objective_trace: Vec::new(),
            eval_trace: Vec::new(),
            eval_steps: Vec::new(),
            best_step: 0,
            best_objective: 0.0,
            runs: Vec::new(),
            selected_lr: None,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
            synthetic: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// One entry of a learning-rate search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrRun {
    pub lr: f64,
    pub objective_trace: Vec<f64>,
    pub best_step: usize,
    pub best_objective: f64,
    pub eval_returns: Vec<f64>,
    pub eval_mean: f64,
}

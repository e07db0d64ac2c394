//! Multi-trial experiment runners and result tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{leverage_subsample, random_subsample};
use crate::data::{load_csv_regression, standardize, train_test_split, DataFormat, RegressionDataset};
use crate::envs::{
    collect_mixed_mountaincar, collect_random, train_tabular_expert_mountaincar, EnvKind, OfflineRLDataset,
};
use crate::error::{Error, Result};
use crate::fqi::{evaluate_policy, fqi_train, greedy_policy, FQIConfig, TransitionBatch};
use crate::linreg::{distill_from, evaluate_mse, train_linear, DistillConfig};
use crate::lowerbound::{run_case, symmetric_dim, LowerBoundCase};
use crate::par;
use crate::rl_distill::{distill_rl, QArch, RlDistillConfig};
use crate::rng::{derive_seed, rng_from_seed, trial_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Supervised,
    OfflineRl,
    Lowerbound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSettings {
    pub test_fraction: f64,
    pub standardize: bool,
    /// Adam settings for the downstream linear model.
    pub train_lr: f64,
    pub train_steps: usize,
    /// `m`, `k` and `seed` are overwritten per cell.
    pub distill: DistillConfig,
}

impl Default for SupervisedSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            standardize: true,
            train_lr: 1e-3,
            train_steps: 5000,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSettings {
    pub bins: (usize, usize),
    pub episodes: usize,
    pub lr: f64,
    pub n_random: usize,
    pub n_expert: usize,
}

impl Default for ExpertSettings {
    fn default() -> Self {
        Self {
            bins: (40, 40),
            episodes: 20_000,
            lr: 0.1,
            n_random: 5000,
            n_expert: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSettings {
    /// Transitions collected for `D_train` (random-policy environments).
    pub n_train: usize,
    pub gamma: f64,
    /// Hidden widths of both the sampled and the trained networks; `None` picks
    /// (10, 10) for cartpole and (64, 64) otherwise.
    pub hidden: Option<(usize, usize)>,
    pub rand_resamples: usize,
    pub eval_episodes: usize,
    /// `m`, `k`, `gamma` and `seed` are overwritten per cell.
    pub distill: RlDistillConfig,
    /// FQI on the small datasets; `None` uses [`RlSettings::fqi_for`].
    pub fqi: Option<FQIConfig>,
    /// FQI on the full `D_train`; `None` uses [`RlSettings::fqi_train_for`].
    pub fqi_train: Option<FQIConfig>,
    pub expert: ExpertSettings,
    /// Expert training attempts (fresh seeds) until the success gate is met.
    pub expert_attempts: usize,
}

impl Default for RlSettings {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            gamma: 0.99,
            hidden: None,
            rand_resamples: 10,
            eval_episodes: 10,
            distill: RlDistillConfig::default(),
            fqi: None,
            fqi_train: None,
            expert: ExpertSettings::default(),
            expert_attempts: 3,
        }
    }
}

impl RlSettings {
    pub fn hidden_for(&self, env: EnvKind) -> (usize, usize) {
        self.hidden.unwrap_or(match env {
            EnvKind::Cartpole => (10, 10),
            _ => (64, 64),
        })
    }

    /// Mountain car needs enough iterations to carry the goal value across its
    /// ~150-step horizon, and velocity is only resolved after standardization.
    pub fn fqi_for(&self, env: EnvKind) -> FQIConfig {
        let base = match (&self.fqi, env) {
            (Some(c), _) => c.clone(),
            (None, EnvKind::MountainCar) => FQIConfig {
                iterations: 200,
                inner_epochs: 10,
                standardize_inputs: true,
                ..FQIConfig::default()
            },
            (None, _) => FQIConfig::default(),
        };
        FQIConfig { gamma: self.gamma, hidden: self.hidden_for(env), ..base }
    }

    pub fn fqi_train_for(&self, env: EnvKind) -> FQIConfig {
        let base = match (&self.fqi_train, env) {
            (Some(c), _) => c.clone(),
            (None, EnvKind::Cartpole) => FQIConfig {
                iterations: 30,
                inner_epochs: 20,
                ..FQIConfig::default()
            },
            (None, _) => FQIConfig {
                iterations: 200,
                inner_epochs: 5,
                standardize_inputs: true,
                ..FQIConfig::default()
            },
        };
        FQIConfig { gamma: self.gamma, hidden: self.hidden_for(env), ..base }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowerboundSettings {
    pub q: Vec<usize>,
    /// Regressors per case; `None` means `q(q+1)/2 − 1`.
    pub regressors: Option<usize>,
}

impl Default for LowerboundSettings {
    fn default() -> Self {
        Self {
            q: (2..=20).collect(),
            regressors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: Option<PathBuf>,
    /// Inferred from the file name when absent.
    pub format: Option<DataFormat>,
    pub env: EnvKind,
    pub n_syn: Vec<usize>,
    pub k: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
    pub supervised: SupervisedSettings,
    pub rl: RlSettings,
    pub lowerbound: LowerboundSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Supervised,
            dataset: None,
            format: None,
            env: EnvKind::Cartpole,
            n_syn: vec![20, 50, 100],
            k: vec![100],
            trials: 10,
            base_seed: 0,
            supervised: SupervisedSettings::default(),
            rl: RlSettings::default(),
            lowerbound: LowerboundSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        match self.kind {
            ExperimentKind::Lowerbound => {
                if self.lowerbound.q.is_empty() {
                    return Err(Error::InvalidArgument("lowerbound.q must be nonempty".into()));
                }
            }
            _ => {
                if self.n_syn.is_empty() || self.k.is_empty() {
                    return Err(Error::InvalidArgument("n_syn and k sweeps must be nonempty".into()));
                }
                if self.n_syn.contains(&0) || self.k.contains(&0) {
                    return Err(Error::InvalidArgument("n_syn and k entries must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn data_format(&self) -> Result<DataFormat> {
        if let Some(f) = &self.format {
            return Ok(f.clone());
        }
        let path = self.dataset_path()?;
        let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
        Ok(if name.contains("wine") {
            DataFormat::Wine
        } else if name.contains("housing") {
            DataFormat::Housing
        } else {
            DataFormat::generic_label_last(true)
        })
    }

    fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("supervised experiments need `dataset`".into()))
    }

    /// Stem used for output file names.
    pub fn run_name(&self) -> String {
        match self.kind {
            ExperimentKind::Supervised => {
                let stem = self
                    .dataset
                    .as_deref()
                    .and_then(|p| p.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into());
                format!("supervised_{stem}")
            }
            ExperimentKind::OfflineRl => format!("offline_rl_{}", self.env.name()),
            ExperimentKind::Lowerbound => "lowerbound".into(),
        }
    }
}

/// Sets the dotted `key` of a JSON object to `raw`, parsed as JSON when possible
/// and kept as a string otherwise. Missing intermediate objects are created.
pub fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("malformed key '{key}'")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = serde_json::Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("'{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    unreachable!("loop returns on the last key part")
}

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = par::ordered_sum(&values) / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), values }
    }

    pub fn single(v: f64) -> Self {
        Self::new(vec![v])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub keys: Vec<String>,
    pub cells: Vec<Option<Stat>>,
}

/// Keyed rows of summary statistics, rendered as CSV or aligned text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub title: String,
    pub keys: Vec<String>,
    pub columns: Vec<String>,
    /// Decimal places in the text rendering; `None` uses scientific notation.
    pub precision: Option<usize>,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    /// One `<column>_mean,<column>_std` pair per value column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = self.keys.clone();
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut fields = row.keys.clone();
            for cell in &row.cells {
                match cell {
                    Some(s) => {
                        fields.push(s.mean.to_string());
                        fields.push(s.std.to_string());
                    }
                    None => fields.extend([String::new(), String::new()]),
                }
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    fn fmt_num(&self, v: f64) -> String {
        match self.precision {
            Some(p) => format!("{v:.p$}"),
            None => format!("{v:.3e}"),
        }
    }

    fn fmt_cell(&self, cell: &Option<Stat>) -> String {
        match cell {
            None => "-".into(),
            Some(s) if s.values.len() == 1 => self.fmt_num(s.mean),
            Some(s) => format!("{} ± {}", self.fmt_num(s.mean), self.fmt_num(s.std)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![self.keys.iter().chain(&self.columns).cloned().collect()];
        for row in &self.rows {
            let mut line = row.keys.clone();
            line.extend(row.cells.iter().map(|c| self.fmt_cell(c)));
            grid.push(line);
        }
        let ncol = grid[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| grid.iter().map(|r| r.get(j).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        for (i, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, s)| format!("{s:>w$}", w = widths[j]))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  "));
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (ncol - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

/// Everything a run produces; the JSON form is the complete record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub name: String,
    pub config: ExperimentConfig,
    pub table: ResultTable,
    pub details: serde_json::Value,
}

impl ExperimentOutput {
    /// Writes `<name>.csv`, `<name>.txt` and `<name>.json` into `dir`; returns the paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        let files = [
            (format!("{}.csv", self.name), self.table.to_csv()),
            (format!("{}.txt", self.name), self.table.to_text()),
            (format!("{}.json", self.name), serde_json::to_string_pretty(self)? + "\n"),
        ];
        let mut paths = Vec::new();
        for (file, body) in files {
            let path = dir.join(file);
            std::fs::write(&path, body).map_err(|source| Error::Io { path: path.clone(), source })?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    match cfg.kind {
        ExperimentKind::Supervised => run_supervised(cfg),
        ExperimentKind::OfflineRl => run_offline_rl(cfg),
        ExperimentKind::Lowerbound => run_lowerbound(cfg),
    }
}

/// Loads, optionally standardizes (on the full data) and returns the dataset.
pub fn load_supervised_dataset(cfg: &ExperimentConfig) -> Result<RegressionDataset> {
    let ds = load_csv_regression(cfg.dataset_path()?, &cfg.data_format()?)?;
    if cfg.supervised.standardize {
        Ok(standardize(&ds)?.0)
    } else {
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SupervisedCell {
    n_syn: usize,
    k: usize,
    syn: f64,
    rand: f64,
    lev: f64,
    best_step: usize,
    best_eval_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SupervisedTrial {
    trial: usize,
    seed: u64,
    train: f64,
    cells: Vec<SupervisedCell>,
}

fn supervised_trial(ds: &RegressionDataset, cfg: &ExperimentConfig, trial: usize) -> Result<SupervisedTrial> {
    let s = &cfg.supervised;
    let seed = trial_seed(cfg.base_seed, trial);
    let (train, test) = train_test_split(ds, s.test_fraction, seed)?;
    let fit = |d: &RegressionDataset| -> Result<f64> { evaluate_mse(&train_linear(d, s.train_lr, s.train_steps)?, &test) };
    let train_mse = fit(&train)?;
    let mut cells = Vec::new();
    for &m in &cfg.n_syn {
        let mut rng = rng_from_seed(derive_seed(seed, 10 + m as u64));
        let rand = random_subsample(&train, m, &mut rng)?;
        let lev = leverage_subsample(&train, m, &mut rng)?;
        let (rand_mse, lev_mse) = (fit(&rand)?, fit(&lev)?);
        for &k in &cfg.k {
            let dcfg = DistillConfig { m, k, seed, ..s.distill.clone() };
            let (syn, report) = distill_from(&train, &rand, &dcfg)?;
            cells.push(SupervisedCell {
                n_syn: m,
                k,
                syn: fit(&syn)?,
                rand: rand_mse,
                lev: lev_mse,
                best_step: report.best_step,
                best_eval_objective: report.best_objective,
            });
        }
    }
    Ok(SupervisedTrial { trial, seed, train: train_mse, cells })
}

/// Test MSE of linear models trained on `D_train`, `D_syn`, `D_rand` and `D_lev`.
pub fn run_supervised(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let ds = load_supervised_dataset(cfg)?;
    let trials: Vec<SupervisedTrial> = par::map_range(cfg.trials, |t| supervised_trial(&ds, cfg, t))
        .into_iter()
        .collect::<Result<_>>()?;
    let train = Stat::new(trials.iter().map(|t| t.train).collect());
    let mut rows = Vec::new();
    for (idx, cell) in trials[0].cells.iter().enumerate() {
        let col = |f: fn(&SupervisedCell) -> f64| Some(Stat::new(trials.iter().map(|t| f(&t.cells[idx])).collect()));
        rows.push(TableRow {
            keys: vec![cell.n_syn.to_string(), cell.k.to_string()],
            cells: vec![Some(train.clone()), col(|c| c.syn), col(|c| c.rand), col(|c| c.lev)],
        });
    }
    let name = cfg.run_name();
    Ok(ExperimentOutput {
        table: ResultTable {
            title: format!("{name}: test MSE over {} trials (mean ± std)", cfg.trials),
            keys: vec!["n_syn".into(), "k".into()],
            columns: vec!["d_train".into(), "d_syn".into(), "d_rand".into(), "d_lev".into()],
            precision: Some(3),
            rows,
        },
        details: serde_json::json!({
            "rows": ds.n(),
            "features": ds.d(),
            "standardization": if cfg.supervised.standardize { "fit on the full dataset before splitting" } else { "none" },
            "trials": trials,
        }),
        name,
        config: cfg.clone(),
    })
}

/// Collects `D_train` for one experiment seed; mountain car mixes random and expert data.
pub fn rl_training_data(cfg: &ExperimentConfig, seed: u64) -> Result<(OfflineRLDataset, serde_json::Value)> {
    let rl = &cfg.rl;
    match cfg.env {
        EnvKind::MountainCar => {
            let e = &rl.expert;
            let mut expert = train_tabular_expert_mountaincar(e.bins, e.episodes, e.lr, rl.gamma, derive_seed(seed, 3))?;
            for attempt in 1..rl.expert_attempts.max(1) {
                if expert.warning.is_none() {
                    break;
                }
                let next =
                    train_tabular_expert_mountaincar(e.bins, e.episodes, e.lr, rl.gamma, derive_seed(seed, 3 + attempt as u64))?;
                if next.success_rate > expert.success_rate {
                    expert = next;
                }
            }
            let data = collect_mixed_mountaincar(&expert.policy, e.n_random, e.n_expert, rl.gamma, derive_seed(seed, 1))?;
            let info = serde_json::json!({
                "expert_success_rate": expert.success_rate,
                "expert_mean_return": expert.mean_return,
                "expert_warning": expert.warning,
            });
            Ok((data, info))
        }
        env => Ok((collect_random(env, rl.n_train, rl.gamma, derive_seed(seed, 1))?, serde_json::Value::Null)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RlCell {
    k: usize,
    n_syn: usize,
    rand_returns: Vec<f64>,
    syn_returns: Vec<f64>,
    selected_lr: Option<f64>,
    report: crate::report::DistillReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RlTrial {
    trial: usize,
    seed: u64,
    collection: serde_json::Value,
    train_returns: Vec<f64>,
    cells: Vec<RlCell>,
}

/// Returns of single-episode evaluations of FQI policies trained on `resamples` random subsets.
pub fn random_subset_returns(
    train: &OfflineRLDataset,
    env: EnvKind,
    m: usize,
    resamples: usize,
    fqi: &FQIConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if m > train.len() {
        return Err(Error::InvalidArgument(format!("cannot draw {m} rows from {}", train.len())));
    }
    par::map_range(resamples, |r| -> Result<f64> {
        let s = derive_seed(seed, r as u64);
        let idx = rand::seq::index::sample(&mut rng_from_seed(derive_seed(s, 1)), train.len(), m).into_vec();
        let batch = TransitionBatch::from(&train.select(&idx)?);
        let q = fqi_train(&batch, &FQIConfig { seed: derive_seed(s, 2), ..fqi.clone() })?;
        let summary = evaluate_policy(env, &greedy_policy(&q), 1, derive_seed(s, 3))?;
        Ok(summary.mean)
    })
    .into_iter()
    .collect()
}

fn rl_trial(cfg: &ExperimentConfig, trial: usize) -> Result<RlTrial> {
    let rl = &cfg.rl;
    let env = cfg.env;
    let seed = trial_seed(cfg.base_seed, trial);
    let hidden = rl.hidden_for(env);
    let fqi = rl.fqi_for(env);
    let (train, collection) = rl_training_data(cfg, seed)?;

    let q_train = fqi_train(
        &TransitionBatch::from(&train),
        &FQIConfig { seed: derive_seed(seed, 4), ..rl.fqi_train_for(env) },
    )?;
    let train_returns = evaluate_policy(env, &greedy_policy(&q_train), rl.eval_episodes, derive_seed(seed, 5))?.returns;

    let mut cells = Vec::new();
    for &m in &cfg.n_syn {
        let rand_returns = random_subset_returns(&train, env, m, rl.rand_resamples, &fqi, derive_seed(seed, 1000 + m as u64))?;
        for &k in &cfg.k {
            let dcfg = RlDistillConfig {
                m,
                k,
                gamma: rl.gamma,
                eval_episodes: rl.eval_episodes,
                seed: derive_seed(seed, (k as u64) << 32 | m as u64),
                ..rl.distill.clone()
            };
            let (_, report) = distill_rl(&train, &dcfg, &QArch::Mlp { hidden }, Some(env), &fqi)?;
            let winner = report
                .runs
                .iter()
                .find(|r| Some(r.lr) == report.selected_lr)
                .map(|r| r.eval_returns.clone())
                .unwrap_or_default();
            cells.push(RlCell {
                k,
                n_syn: m,
                rand_returns: rand_returns.clone(),
                syn_returns: winner,
                selected_lr: report.selected_lr,
                report,
            });
        }
    }
    Ok(RlTrial { trial, seed, collection, train_returns, cells })
}

/// FQI returns on `D_train`, `D_rand` and `D_syn`, one row per (seed, k, N_syn).
pub fn run_offline_rl(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let trials: Vec<RlTrial> = par::map_range(cfg.trials, |t| rl_trial(cfg, t))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for t in &trials {
        for c in &t.cells {
            rows.push(TableRow {
                keys: vec![t.trial.to_string(), c.k.to_string(), c.n_syn.to_string()],
                cells: vec![
                    Some(Stat::new(t.train_returns.clone())),
                    Some(Stat::new(c.rand_returns.clone())),
                    Some(Stat::new(c.syn_returns.clone())),
                ],
            });
        }
    }
    let name = cfg.run_name();
    Ok(ExperimentOutput {
        table: ResultTable {
            title: format!("{name}: evaluation return (mean ± std)"),
            keys: vec!["trial".into(), "k".into(), "n_syn".into()],
            columns: vec!["d_train".into(), "d_rand".into(), "d_syn".into()],
            precision: Some(2),
            rows,
        },
        details: serde_json::json!({
            "hidden": cfg.rl.hidden_for(cfg.env),
            "fqi": cfg.rl.fqi_for(cfg.env),
            "fqi_train": cfg.rl.fqi_train_for(cfg.env),
            "trials": trials,
        }),
        name,
        config: cfg.clone(),
    })
}

/// Counterexample construction and verification for each configured `q`.
pub fn run_lowerbound(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let lb = &cfg.lowerbound;
    let cases: Vec<LowerBoundCase> = par::map_slice(&lb.q, |&q| -> Result<LowerBoundCase> {
        if q == 0 {
            return Err(Error::InvalidArgument("q must be positive".into()));
        }
        let count = lb.regressors.unwrap_or(symmetric_dim(q) - 1);
        Ok(run_case(q, count, derive_seed(cfg.base_seed, q as u64))?.0)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let rows = cases
        .iter()
        .map(|c| TableRow {
            keys: vec![c.q.to_string(), c.regressors.to_string(), c.report.pass.to_string()],
            cells: vec![
                Some(Stat::single(c.report.max_equal_dev)),
                Some(Stat::single(c.report.gap)),
                Some(Stat::single(c.report.gap_bound)),
                Some(Stat::single(c.report.max_point_norm)),
            ],
        })
        .collect();
    let all_pass = cases.iter().all(|c| c.report.pass);
    Ok(ExperimentOutput {
        name: cfg.run_name(),
        table: ResultTable {
            title: format!("lowerbound: {} cases, all pass = {all_pass}", cases.len()),
            keys: vec!["q".into(), "regressors".into(), "pass".into()],
            columns: vec!["max_equal_dev".into(), "gap".into(), "gap_bound".into(), "max_point_norm".into()],
            precision: None,
            rows,
        },
        details: serde_json::json!({ "all_pass": all_pass, "cases": cases }),
        config: cfg.clone(),
    })
}

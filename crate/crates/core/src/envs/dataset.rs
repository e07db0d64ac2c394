use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::EnvKind;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRLDataset {
    pub env_name: String,
    pub state_dim: usize,
    pub action_count: usize,
    pub gamma: f64,
    pub transitions: Vec<Transition>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")))
    }
}

impl OfflineRLDataset {
    pub fn new(kind: EnvKind, gamma: f64, transitions: Vec<Transition>) -> Result<Self> {
        let spec = kind.spec();
        Self::custom(kind.name(), spec.state_dim, spec.action_count, gamma, transitions)
    }

    /// Dataset over an arbitrary finite-action MDP.
    pub fn custom(
        env_name: &str,
        state_dim: usize,
        action_count: usize,
        gamma: f64,
        transitions: Vec<Transition>,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        if transitions.is_empty() {
            return Err(Error::Empty("offline dataset".into()));
        }
        for t in &transitions {
            check_dim(state_dim, t.s.len())?;
            check_dim(state_dim, t.s_next.len())?;
            if t.a >= action_count {
                return Err(Error::InvalidArgument(format!(
                    "action {} outside 0..{action_count}",
                    t.a
                )));
            }
        }
        Ok(Self {
            env_name: env_name.to_string(),
            state_dim,
            action_count,
            gamma,
            transitions,
        })
    }

    pub fn env_kind(&self) -> Option<EnvKind> {
        self.env_name.parse().ok()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.state_dim, |i, j| self.transitions[i].s[j])
    }

    pub fn next_states(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.state_dim, |i, j| self.transitions[i].s_next[j])
    }

    pub fn actions_onehot(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.action_count, |i, j| {
            if self.transitions[i].a == j {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn rewards(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.transitions.iter().map(|t| t.r))
    }

    /// Indices of non-terminated and terminated rows.
    pub fn partition_indices(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !self.transitions[i].terminated)
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::custom(
            &self.env_name,
            self.state_dim,
            self.action_count,
            self.gamma,
            idx.iter().map(|&i| self.transitions[i].clone()).collect(),
        )
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        check_dim(self.state_dim, other.state_dim)?;
        check_dim(self.action_count, other.action_count)?;
        let mut t = self.transitions.clone();
        t.extend(other.transitions.iter().cloned());
        Self::custom(&self.env_name, self.state_dim, self.action_count, self.gamma, t)
    }

    pub fn csv_header(state_dim: usize) -> Vec<String> {
        let mut h: Vec<String> = (0..state_dim).map(|i| format!("s{i}")).collect();
        h.push("a".into());
        h.push("r".into());
        h.extend((0..state_dim).map(|i| format!("sn{i}")));
        h.push("terminated".into());
        h.push("truncated".into());
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::csv_header(self.state_dim))?;
        for t in &self.transitions {
            let mut row: Vec<String> = t.s.iter().map(|v| v.to_string()).collect();
            row.push(t.a.to_string());
            row.push(t.r.to_string());
            row.extend(t.s_next.iter().map(|v| v.to_string()));
            row.push(u8::from(t.terminated).to_string());
            row.push(u8::from(t.truncated).to_string());
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| Error::Io { path: "<csv>".into(), source: e })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R, env_name: &str, action_count: usize, gamma: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.len() < 4 || (header.len() - 4) % 2 != 0 {
            return Err(Error::Parse { row: 0, message: format!("unexpected header with {} columns", header.len()) });
        }
        let d = (header.len() - 4) / 2;
        let expected = Self::csv_header(d);
        if header.iter().zip(&expected).any(|(a, b)| a.trim() != b) {
            return Err(Error::Parse { row: 0, message: format!("header must be {}", expected.join(",")) });
        }
        let mut transitions = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse { row, message: format!("expected {} columns, got {}", header.len(), rec.len()) });
            }
            let num = |j: usize| -> Result<f64> {
                rec[j].trim().parse::<f64>().map_err(|e| Error::Parse { row, message: format!("column {j}: {e}") })
            };
            let flag = |j: usize| -> Result<bool> {
                match rec[j].trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Parse { row, message: format!("column {j}: expected 0/1, got '{other}'") }),
                }
            };
            let a = rec[d].trim().parse::<usize>().map_err(|e| Error::Parse { row, message: format!("action: {e}") })?;
            transitions.push(Transition {
                s: (0..d).map(num).collect::<Result<_>>()?,
                a,
                r: num(d + 1)?,
                s_next: (d + 2..2 * d + 2).map(num).collect::<Result<_>>()?,
                terminated: flag(2 * d + 2)?,
                truncated: flag(2 * d + 3)?,
            });
        }
        Self::custom(env_name, d, action_count, gamma, transitions)
    }

    pub fn load_csv(path: &Path, kind: EnvKind, gamma: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let ds = Self::read_csv(f, kind.name(), kind.spec().action_count, gamma)?;
        check_dim(kind.spec().state_dim, ds.state_dim)?;
        Ok(ds)
    }
}

//! Trajectory dataset model, CSV persistence, returns and weighted sampling.
//!
//! The on-disk format is one CSV per dataset with a version comment line, a
//! fixed header, and reals encoded as shortest round-trip decimals, so a
//! save/load cycle reproduces the dataset bit for bit.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::State;

pub const DATASET_VERSION: &str = "autobid-dataset v1";
const HEADER: &str = "campaign_id,episode_id,t,time_frac,consumed_frac,budget_left_scaled,a,r,next_time_frac,next_consumed_frac,next_budget_left_scaled,done,noise_kind,sigma,theta_hash";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}, field '{field}': {msg}")]
    Parse { line: usize, field: &'static str, msg: String },
    #[error("line {line}: expected {expected} columns, got {got}")]
    ColumnCount { line: usize, expected: usize, got: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("weight table has {weights} entries but dataset has {transitions} transitions")]
    WeightMismatch { weights: usize, transitions: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    Psn,
    Asn,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoiseKind::None => "none",
            NoiseKind::Psn => "psn",
            NoiseKind::Asn => "asn",
        };
        f.write_str(s)
    }
}

/// How a trajectory was produced: the exploration construction, its strength,
/// a hash of the acting parameter vector, and whether the safe-exploration
/// wrapper was active when it was collected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub theta_hash: u64,
    pub seas: bool,
}

impl Provenance {
    pub fn noiseless(theta_hash: u64) -> Self {
        Self { kind: NoiseKind::None, sigma: 0.0, theta_hash, seas: false }
    }

    fn kind_token(&self) -> String {
        if self.seas {
            format!("{}+seas", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    fn parse_kind_token(tok: &str, line: usize) -> Result<(NoiseKind, bool), DataError> {
        let (base, seas) = match tok.strip_suffix("+seas") {
            Some(b) => (b, true),
            None => (tok, false),
        };
        let kind = match base {
            "none" => NoiseKind::None,
            "psn" => NoiseKind::Psn,
            "asn" => NoiseKind::Asn,
            other => {
                return Err(DataError::Parse {
                    line,
                    field: "noise_kind",
                    msg: format!("unknown noise kind '{other}'"),
                })
            }
        };
        Ok((kind, seas))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub campaign_id: u32,
    pub episode_id: u32,
    pub t: u32,
    pub s: State,
    pub a: f64,
    pub r: f64,
    pub s_next: State,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn initial_state(&self) -> State {
        self.transitions[0].s
    }

    /// Contiguity and chain consistency: t runs 0..len, shared episode id,
    /// s_next of each step equals s of the next, done only on the last step.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.transitions.is_empty() {
            return Err(DataError::Invalid("empty trajectory".into()));
        }
        let episode = self.transitions[0].episode_id;
        let campaign = self.transitions[0].campaign_id;
        let last = self.transitions.len() - 1;
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.t as usize != i {
                return Err(DataError::Invalid(format!(
                    "episode {episode}: transition index {i} carries t={}",
                    tr.t
                )));
            }
            if tr.episode_id != episode || tr.campaign_id != campaign {
                return Err(DataError::Invalid(format!(
                    "episode {episode}: inconsistent identity at t={i}"
                )));
            }
            if tr.done != (i == last) {
                return Err(DataError::Invalid(format!(
                    "episode {episode}: done flag wrong at t={i}"
                )));
            }
            if i < last && self.transitions[i + 1].s != tr.s_next {
                return Err(DataError::Invalid(format!(
                    "episode {episode}: chain break between t={i} and t={}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Discounted return sum_t gamma^t r_t.
pub fn trajectory_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for tr in &traj.transitions {
        acc += g * tr.r;
        g *= gamma;
    }
    acc
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut len = None;
        for traj in &self.trajectories {
            traj.validate()?;
            match len {
                None => len = Some(traj.len()),
                Some(l) if l != traj.len() => {
                    return Err(DataError::Invalid(format!(
                        "trajectory lengths differ: {l} vs {}",
                        traj.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Transition by flat index in storage order.
    pub fn transition(&self, flat: usize) -> &Transition {
        let mut rest = flat;
        for traj in &self.trajectories {
            if rest < traj.len() {
                return &traj.transitions[rest];
            }
            rest -= traj.len();
        }
        panic!("flat index {flat} out of bounds");
    }

    pub fn iter_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Trajectory index of each flat transition index.
    pub fn trajectory_of_flat(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_transitions());
        for (i, traj) in self.trajectories.iter().enumerate() {
            out.extend(std::iter::repeat(i).take(traj.len()));
        }
        out
    }

    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        self.trajectories.iter().map(|t| trajectory_return(t, gamma)).collect()
    }

    pub fn mean_return(&self, gamma: f64) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.returns(gamma).iter().sum::<f64>() / self.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# {DATASET_VERSION}")?;
        writeln!(w, "{HEADER}")?;
        for traj in &self.trajectories {
            let kind = traj.provenance.kind_token();
            for tr in &traj.transitions {
                for x in [
                    tr.s.time_frac,
                    tr.s.consumed_frac,
                    tr.s.budget_left_scaled,
                    tr.a,
                    tr.r,
                    tr.s_next.time_frac,
                    tr.s_next.consumed_frac,
                    tr.s_next.budget_left_scaled,
                    traj.provenance.sigma,
                ] {
                    if !x.is_finite() {
                        return Err(DataError::Invalid(format!(
                            "non-finite value {x} in episode {}",
                            tr.episode_id
                        )));
                    }
                }
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:016x}",
                    tr.campaign_id,
                    tr.episode_id,
                    tr.t,
                    tr.s.time_frac,
                    tr.s.consumed_frac,
                    tr.s.budget_left_scaled,
                    tr.a,
                    tr.r,
                    tr.s_next.time_frac,
                    tr.s_next.consumed_frac,
                    tr.s_next.budget_left_scaled,
                    tr.done,
                    kind,
                    traj.provenance.sigma,
                    traj.provenance.theta_hash,
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let reader = BufReader::new(File::open(path)?);
        let mut trajectories: Vec<Trajectory> = Vec::new();
        let mut current: Option<(u32, u32, Trajectory)> = None;
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != HEADER {
                    return Err(DataError::Invalid(format!(
                        "line {lineno}: unexpected header '{line}'"
                    )));
                }
                saw_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 15 {
                return Err(DataError::ColumnCount { line: lineno, expected: 15, got: cols.len() });
            }
            let (kind, seas) = Provenance::parse_kind_token(cols[12], lineno)?;
            let prov = Provenance {
                kind,
                seas,
                sigma: parse_f64(cols[13], lineno, "sigma")?,
                theta_hash: u64::from_str_radix(cols[14], 16).map_err(|e| DataError::Parse {
                    line: lineno,
                    field: "theta_hash",
                    msg: e.to_string(),
                })?,
            };
            let tr = Transition {
                campaign_id: parse_u32(cols[0], lineno, "campaign_id")?,
                episode_id: parse_u32(cols[1], lineno, "episode_id")?,
                t: parse_u32(cols[2], lineno, "t")?,
                s: State {
                    time_frac: parse_f64(cols[3], lineno, "time_frac")?,
                    consumed_frac: parse_f64(cols[4], lineno, "consumed_frac")?,
                    budget_left_scaled: parse_f64(cols[5], lineno, "budget_left_scaled")?,
                },
                a: parse_f64(cols[6], lineno, "a")?,
                r: parse_f64(cols[7], lineno, "r")?,
                s_next: State {
                    time_frac: parse_f64(cols[8], lineno, "next_time_frac")?,
                    consumed_frac: parse_f64(cols[9], lineno, "next_consumed_frac")?,
                    budget_left_scaled: parse_f64(cols[10], lineno, "next_budget_left_scaled")?,
                },
                done: parse_bool(cols[11], lineno)?,
            };
            match current.as_mut() {
                Some((c, e, traj)) if *c == tr.campaign_id && *e == tr.episode_id => {
                    if traj.provenance != prov {
                        return Err(DataError::Parse {
                            line: lineno,
                            field: "noise_kind",
                            msg: "provenance changed within an episode".into(),
                        });
                    }
                    traj.transitions.push(tr);
                }
                _ => {
                    if let Some((_, _, done_traj)) = current.take() {
                        trajectories.push(done_traj);
                    }
                    current = Some((
                        tr.campaign_id,
                        tr.episode_id,
                        Trajectory { transitions: vec![tr], provenance: prov },
                    ));
                }
            }
        }
        if !saw_header {
            return Err(DataError::Invalid("missing header row".into()));
        }
        if let Some((_, _, traj)) = current.take() {
            trajectories.push(traj);
        }
        Ok(Dataset { trajectories })
    }
}

fn parse_f64(s: &str, line: usize, field: &'static str) -> Result<f64, DataError> {
    s.parse()
        .map_err(|_| DataError::Parse { line, field, msg: format!("'{s}' is not a real number") })
}

fn parse_u32(s: &str, line: usize, field: &'static str) -> Result<u32, DataError> {
    s.parse()
        .map_err(|_| DataError::Parse { line, field, msg: format!("'{s}' is not an integer") })
}

fn parse_bool(s: &str, line: usize) -> Result<bool, DataError> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(DataError::Parse { line, field: "done", msg: format!("'{s}' is not a boolean") }),
    }
}

/// Per-transition sampling probabilities over a dataset, in flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub w: Vec<f64>,
}

impl WeightTable {
    pub fn uniform(n: usize) -> Self {
        Self { w: vec![1.0 / n as f64; n] }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<(), DataError> {
        if self.w.len() != dataset.n_transitions() {
            return Err(DataError::WeightMismatch {
                weights: self.w.len(),
                transitions: dataset.n_transitions(),
            });
        }
        if self.w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(DataError::Invalid("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = self.w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Audit export: episode_id, t, w.
    pub fn export_csv(&self, dataset: &Dataset, path: &Path) -> Result<(), DataError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "episode_id,t,w")?;
        for (tr, w) in dataset.iter_transitions().zip(self.w.iter()) {
            writeln!(out, "{},{},{}", tr.episode_id, tr.t, w)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// I.i.d. categorical draws of flat transition indices by weight.
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    total: f64,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(weights: &WeightTable, dataset: &Dataset, seed: u64) -> Result<Self, DataError> {
        weights.validate(dataset)?;
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights.w {
            acc += w;
            cumulative.push(acc);
        }
        Ok(Self { cumulative, total: acc, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_index(&mut self) -> usize {
        let u = self.rng.gen::<f64>() * self.total;
        // first index with cumulative > u
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.cumulative.len() - 1)
    }
}

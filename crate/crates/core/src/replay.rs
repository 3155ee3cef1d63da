//! Durable experience store: whole sessions with per-step transitions, the
//! end-of-session QoC report and reward, persisted as line-delimited JSON
//! (one session per line, schema version tag on every line).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bg_env::{QoCReport, RewardConfig};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One MDP step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub action: f64,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: Vec<f64>,
}

/// Reward constants stored inside each trajectory so mixed-constant datasets
/// stay self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConstants {
    pub r_a: f64,
    pub r_b: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "C3")]
    pub c3: f64,
    #[serde(rename = "C4")]
    pub c4: f64,
    pub gamma: f64,
    pub xi_beta: f64,
}

impl TrajectoryConstants {
    pub fn from_parts(reward: &RewardConfig, xi_beta: f64) -> Self {
        TrajectoryConstants {
            r_a: reward.r_a,
            r_b: reward.r_b,
            c1: reward.c1,
            c2: reward.c2,
            c3: reward.c3,
            c4: reward.c4,
            gamma: reward.gamma,
            xi_beta,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            r_a: self.r_a,
            r_b: self.r_b,
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
            c4: self.c4,
            gamma: self.gamma,
        }
    }
}

/// One recorded session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "v", default = "schema_version")]
    pub version: u32,
    pub session_id: String,
    pub controller_id: String,
    pub profile_id: String,
    pub seed: u64,
    pub constants: TrajectoryConstants,
    pub transitions: Vec<Transition>,
    pub qoc: QoCReport,
    pub r_end: f64,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// States s_0..s_T (the final entry is the last next_state).
    pub fn states(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.transitions.iter().map(|t| t.state.as_slice()).collect();
        if let Some(last) = self.transitions.last() {
            v.push(last.next_state.as_slice());
        }
        v
    }

    pub fn actions(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sid = &self.session_id;
        if self.version != SCHEMA_VERSION {
            return Err(Error::Validation {
                session_id: sid.clone(),
                detail: format!("unsupported schema version {}", self.version),
            });
        }
        if self.transitions.is_empty() {
            return Err(Error::Validation { session_id: sid.clone(), detail: "no transitions".into() });
        }
        let w = self.transitions[0].state.len();
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.t != i {
                return Err(Error::Validation {
                    session_id: sid.clone(),
                    detail: format!("step indices not contiguous at position {i} (t = {})", tr.t),
                });
            }
            if tr.state.len() != w || tr.next_state.len() != w {
                return Err(Error::Validation {
                    session_id: sid.clone(),
                    detail: format!("state width changes at step {i}"),
                });
            }
            if !(0.0..=1.0).contains(&tr.action) {
                return Err(Error::Validation {
                    session_id: sid.clone(),
                    detail: format!("action {} outside [0, 1] at step {i}", tr.action),
                });
            }
        }
        self.qoc.validate().map_err(|e| Error::Validation {
            session_id: sid.clone(),
            detail: e.to_string(),
        })?;
        let expect = self.constants.reward_config().end_reward(&self.qoc);
        if (self.r_end - expect).abs() > 1e-9 * expect.abs().max(1.0) {
            return Err(Error::Validation {
                session_id: sid.clone(),
                detail: format!("r_end {} inconsistent with stored QoC/constants (expect {expect})", self.r_end),
            });
        }
        Ok(())
    }
}

/// In-memory buffer of trajectories with a flat transition index for uniform
/// sampling.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    trajectories: Vec<Trajectory>,
    /// (trajectory index, transition index) pairs, one per stored transition.
    flat: Vec<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        ReplayBuffer::default()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.flat.len()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn state_width(&self) -> Option<usize> {
        self.trajectories.first().map(|t| t.transitions[0].state.len())
    }

    pub fn append(&mut self, trajectory: Trajectory) -> Result<()> {
        trajectory.validate()?;
        if self.trajectories.iter().any(|t| t.session_id == trajectory.session_id) {
            return Err(Error::Validation {
                session_id: trajectory.session_id.clone(),
                detail: "duplicate session_id".into(),
            });
        }
        let idx = self.trajectories.len();
        for k in 0..trajectory.len() {
            self.flat.push((idx, k));
        }
        self.trajectories.push(trajectory);
        Ok(())
    }

    /// `n` uniform draws with replacement from the flat transition index.
    pub fn sample_transitions(&self, n: usize, seed: u64) -> Result<Vec<&Transition>> {
        if self.flat.is_empty() {
            return Err(Error::Contract("sample_transitions on an empty buffer".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (ti, ki) = self.flat[rng.gen_range(0..self.flat.len())];
            out.push(&self.trajectories[ti].transitions[ki]);
        }
        Ok(out)
    }

    /// Up to `n` distinct trajectories per batch (no duplicates within one
    /// batch), uniform over the buffer.
    pub fn sample_trajectories(&self, n: usize, seed: u64) -> Result<Vec<&Trajectory>> {
        if self.trajectories.is_empty() {
            return Err(Error::Contract("sample_trajectories on an empty buffer".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let take = n.min(self.trajectories.len());
        let mut indices: Vec<usize> = (0..self.trajectories.len()).collect();
        for i in 0..take {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        Ok(indices[..take].iter().map(|i| &self.trajectories[*i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut f, t)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        ReplayBuffer::read(BufReader::new(f))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut buffer = ReplayBuffer::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut traj: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                detail: e.to_string(),
            })?;
            // session length is not serialized; it equals the step count
            traj.qoc.session_len = traj.transitions.len();
            buffer.append(traj)?;
        }
        Ok(buffer)
    }

    /// Parses the concatenation of several buffer files into one buffer.
    pub fn load_many(paths: &[std::path::PathBuf]) -> Result<Self> {
        let mut buffer = ReplayBuffer::new();
        for p in paths {
            let loaded = ReplayBuffer::load(p)?;
            for t in loaded.trajectories {
                buffer.append(t)?;
            }
        }
        Ok(buffer)
    }
}

//! Trajectories, datasets, the newline-delimited JSON dataset format, and
//! fixed-context batch sampling.
//!
//! File layout: the first line is a header object
//! `{"env": name, "state_dim": d_s, "action_dim": d_a, "seed": n}` (extra
//! summary keys written by the generator are optional), followed by one
//! episode per line:
//! `{"states": [[..],..], "actions": [[..],..], "rewards": [..], "subgoals": [[..],..]}`
//! where `subgoals` is present only after labeling. Timesteps are implicit
//! (`0..T`) and returns-to-go are recomputed on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are treated as constant dimensions.
pub const STD_FLOOR: f64 = 1e-6;

/// One demonstration episode. Index `t` pairs `states[t]`, `actions[t]` and
/// `rewards[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub subgoals: Option<Vec<Vec<f64>>>,
    pub returns_to_go: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        let traj = Self {
            timesteps: (0..states.len()).collect(),
            states,
            actions,
            rewards,
            subgoals: None,
            returns_to_go: None,
        };
        traj.validate()?;
        Ok(traj)
    }

    /// Number of steps, `T + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Index of the final step, `T`.
    pub fn last(&self) -> usize {
        self.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.subgoals.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::InvalidTrajectory("trajectory has no steps".into()));
        }
        if self.actions.len() != n || self.rewards.len() != n || self.timesteps.len() != n {
            return Err(Error::InvalidTrajectory(format!(
                "length mismatch: {} states, {} actions, {} rewards, {} timesteps",
                n,
                self.actions.len(),
                self.rewards.len(),
                self.timesteps.len()
            )));
        }
        let (ds, da) = (self.states[0].len(), self.actions[0].len());
        if ds == 0 || da == 0 {
            return Err(Error::InvalidTrajectory("zero-width state or action".into()));
        }
        if self.states.iter().any(|s| s.len() != ds) || self.actions.iter().any(|a| a.len() != da) {
            return Err(Error::InvalidTrajectory("vector widths vary within trajectory".into()));
        }
        if let Some(sg) = &self.subgoals {
            if sg.len() != n || sg.iter().any(|s| s.len() != ds) {
                return Err(Error::InvalidTrajectory("sub-goals do not match states".into()));
            }
        }
        if let Some(rtg) = &self.returns_to_go {
            if rtg.len() != n {
                return Err(Error::InvalidTrajectory("returns-to-go length mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Returns a copy of `traj` with `rtg_t = sum_{t' >= t} r_t'`.
pub fn compute_returns_to_go(traj: &Trajectory) -> Trajectory {
    let mut out = traj.clone();
    out.returns_to_go = Some(returns_to_go(&traj.rewards));
    out
}

pub(crate) fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut rtg = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        rtg[t] = acc;
    }
    rtg
}

/// Dataset header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_length: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subgoals: Option<Vec<Vec<f64>>>,
}

/// Per-dimension state statistics and the returns-to-go scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Returns-to-go are divided by this before entering a model.
    pub rtg_scale: f64,
}

impl Normalizer {
    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, sd))| v * sd + m)
            .collect()
    }

    pub fn scale_rtg(&self, rtg: f64) -> f64 {
        rtg / self.rtg_scale
    }
}

/// An immutable collection of trajectories with normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Validates widths against `meta` and computes state statistics over
    /// every state of every trajectory.
    pub fn new(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidDataset("dataset has no trajectories".into()));
        }
        for (i, traj) in trajectories.iter().enumerate() {
            check_widths(i + 1, traj, &meta)?;
            traj.validate()?;
        }
        let (state_mean, state_std) = state_statistics(&trajectories, meta.state_dim);
        Ok(Self {
            trajectories,
            state_mean,
            state_std,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.trajectories.iter().all(Trajectory::is_labeled)
    }

    pub fn max_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(Trajectory::total_return)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_return(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::total_return).sum::<f64>() / self.len() as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.total_steps() as f64 / self.len() as f64
    }

    /// Fraction of transitions whose reward is exactly zero.
    pub fn zero_reward_fraction(&self) -> f64 {
        let zeros = self
            .trajectories
            .iter()
            .flat_map(|t| t.rewards.iter())
            .filter(|r| **r == 0.0)
            .count();
        zeros as f64 / self.total_steps() as f64
    }

    pub fn normalizer(&self) -> Normalizer {
        let max = self.max_return();
        Normalizer {
            state_mean: self.state_mean.clone(),
            state_std: self.state_std.clone(),
            rtg_scale: if max > 0.0 { max } else { 1.0 },
        }
    }

    /// Fills in returns-to-go on every trajectory that lacks them.
    pub fn with_returns_to_go(mut self) -> Self {
        for t in &mut self.trajectories {
            if t.returns_to_go.is_none() {
                t.returns_to_go = Some(returns_to_go(&t.rewards));
            }
        }
        self
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let meta: DatasetMeta = loop {
            let Some((i, line)) = lines.next() else {
                return Err(Error::Malformed {
                    line: 1,
                    message: "missing header line".into(),
                });
            };
            let line = line.map_err(|e| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            break serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: i + 1,
                message: format!("header: {e}"),
            })?;
        };
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: i + 1,
                message: format!("episode {}: {e}", trajectories.len() + 1),
            })?;
            let episode = trajectories.len() + 1;
            let traj = Trajectory {
                timesteps: (0..rec.states.len()).collect(),
                returns_to_go: Some(returns_to_go(&rec.rewards)),
                states: rec.states,
                actions: rec.actions,
                rewards: rec.rewards,
                subgoals: rec.subgoals,
            };
            check_widths(episode, &traj, &meta)?;
            traj.validate().map_err(|e| Error::Malformed {
                line: i + 1,
                message: format!("episode {episode}: {e}"),
            })?;
            trajectories.push(traj);
        }
        Dataset::new(meta, trajectories)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let io = |e: std::io::Error| Error::io("<writer>", e);
        serde_json::to_writer(&mut w, &self.meta).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for t in &self.trajectories {
            let rec = EpisodeRecord {
                states: t.states.clone(),
                actions: t.actions.clone(),
                rewards: t.rewards.clone(),
                subgoals: t.subgoals.clone(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(f).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

/// Reads a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_reader(f)
}

fn check_widths(episode: usize, traj: &Trajectory, meta: &DatasetMeta) -> Result<()> {
    let mismatch = |field, found| Error::WidthMismatch {
        episode,
        field,
        expected: if field == "actions" {
            meta.action_dim
        } else {
            meta.state_dim
        },
        found,
    };
    if let Some(s) = traj.states.iter().find(|s| s.len() != meta.state_dim) {
        return Err(mismatch("states", s.len()));
    }
    if let Some(a) = traj.actions.iter().find(|a| a.len() != meta.action_dim) {
        return Err(mismatch("actions", a.len()));
    }
    if let Some(sg) = &traj.subgoals {
        if let Some(s) = sg.iter().find(|s| s.len() != meta.state_dim) {
            return Err(mismatch("subgoals", s.len()));
        }
    }
    Ok(())
}

fn state_statistics(trajs: &[Trajectory], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n: usize = trajs.iter().map(Trajectory::len).sum();
    let mut mean = vec![0.0; dim];
    for s in trajs.iter().flat_map(|t| t.states.iter()) {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for s in trajs.iter().flat_map(|t| t.states.iter()) {
        for j in 0..dim {
            let d = s[j] - mean[j];
            var[j] += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

/// `B` left-padded windows of `K` steps. Arrays are flat, row-major in
/// `(B, K, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubTrajectoryBatch {
    pub batch_size: usize,
    pub context: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Normalized states.
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// Normalized sub-goal states.
    pub subgoals: Vec<f64>,
    /// Returns-to-go divided by the dataset's rtg scale; width 1.
    pub returns_to_go: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// 1.0 for real data, 0.0 for left padding.
    pub mask: Vec<f64>,
    /// `(trajectory index, final timestep)` of each window.
    pub origins: Vec<(usize, usize)>,
}

impl SubTrajectoryBatch {
    pub fn steps(&self) -> usize {
        self.batch_size * self.context
    }

    pub fn is_valid(&self, row: usize, pos: usize) -> bool {
        self.mask[row * self.context + pos] > 0.0
    }

    /// Number of real (unmasked) steps.
    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|m| **m > 0.0).count()
    }
}

/// Samples `batch_size` windows of `context` steps. Each window ends at a
/// timestep drawn uniformly from all timesteps in the dataset, so longer
/// trajectories are picked proportionally more often.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    context: usize,
    rng: &mut R,
) -> Result<SubTrajectoryBatch> {
    if batch_size == 0 || context == 0 {
        return Err(Error::InvalidArgument(
            "batch size and context length must be positive".into(),
        ));
    }
    if !dataset.is_labeled() {
        return Err(Error::Unlabeled);
    }
    let cumulative: Vec<usize> = dataset
        .trajectories
        .iter()
        .scan(0, |acc, t| {
            *acc += t.len();
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap();
    let ends: Vec<(usize, usize)> = (0..batch_size)
        .map(|_| {
            let u = rng.random_range(0..total);
            let i = cumulative.partition_point(|&c| c <= u);
            let start = if i == 0 { 0 } else { cumulative[i - 1] };
            (i, u - start)
        })
        .collect();
    Ok(build_batch(dataset, &ends, context))
}

/// Builds the batch for explicit `(trajectory, end timestep)` windows.
pub fn build_batch(dataset: &Dataset, ends: &[(usize, usize)], context: usize) -> SubTrajectoryBatch {
    let norm = dataset.normalizer();
    let (ds, da) = (dataset.meta.state_dim, dataset.meta.action_dim);
    let steps = ends.len() * context;
    let mut b = SubTrajectoryBatch {
        batch_size: ends.len(),
        context,
        state_dim: ds,
        action_dim: da,
        states: vec![0.0; steps * ds],
        actions: vec![0.0; steps * da],
        subgoals: vec![0.0; steps * ds],
        returns_to_go: vec![0.0; steps],
        timesteps: vec![0; steps],
        mask: vec![0.0; steps],
        origins: ends.to_vec(),
    };
    for (row, &(ti, end)) in ends.iter().enumerate() {
        let traj = &dataset.trajectories[ti];
        let len = (end + 1).min(context);
        let pad = context - len;
        let start = end + 1 - len;
        for (p, t) in (start..=end).enumerate() {
            let slot = row * context + pad + p;
            b.states[slot * ds..(slot + 1) * ds].copy_from_slice(&norm.normalize_state(&traj.states[t]));
            b.actions[slot * da..(slot + 1) * da].copy_from_slice(&traj.actions[t]);
            if let Some(sg) = &traj.subgoals {
                b.subgoals[slot * ds..(slot + 1) * ds].copy_from_slice(&norm.normalize_state(&sg[t]));
            }
            if let Some(rtg) = &traj.returns_to_go {
                b.returns_to_go[slot] = norm.scale_rtg(rtg[t]);
            }
            b.timesteps[slot] = traj.timesteps[t];
            b.mask[slot] = 1.0;
        }
    }
    b
}

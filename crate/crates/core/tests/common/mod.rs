//! Fixtures and independent reference implementations shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod checks;

use hdt::data::{Dataset, DatasetMeta, Trajectory};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random trajectory with integer rewards: sparse (mostly zero, a few
/// ones) or dense (small non-negative integers).
pub fn random_trajectory(rng: &mut ChaCha8Rng, len: usize, state_dim: usize, action_dim: usize) -> Trajectory {
    let sparse = rng.random_bool(0.5);
    let states = (0..len)
        .map(|_| (0..state_dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let actions = (0..len)
        .map(|_| {
            let mut a = vec![0.0; action_dim];
            a[rng.random_range(0..action_dim)] = 1.0;
            a
        })
        .collect();
    let rewards = (0..len)
        .map(|_| {
            if sparse {
                f64::from(rng.random_bool(0.1) as u8)
            } else {
                rng.random_range(0..5) as f64
            }
        })
        .collect();
    Trajectory::new(states, actions, rewards).unwrap()
}

pub fn dataset_of(trajectories: Vec<Trajectory>) -> Dataset {
    let meta = DatasetMeta {
        env: "chain-dense".into(),
        state_dim: trajectories[0].state_dim(),
        action_dim: trajectories[0].action_dim(),
        seed: 0,
        quality: None,
        episodes: None,
        mean_return: None,
        mean_length: None,
    };
    Dataset::new(meta, trajectories).unwrap()
}

/// Exhaustive sub-goal choice for integer rewards. Weights are compared
/// as exact fractions `sum / distance` by cross-multiplication.
pub fn brute_force_subgoal(rewards: &[f64], i: usize) -> usize {
    let last = rewards.len() - 1;
    if i == last {
        return last;
    }
    let mut s = 0i64;
    let mut best: Option<(i64, i64, usize)> = None;
    for j in i + 1..=last {
        s += rewards[j] as i64;
        let d = (j - i) as i64;
        let better = match best {
            None => true,
            Some((bs, bd, _)) => s * bd > bs * d,
        };
        if better {
            best = Some((s, d, j));
        }
    }
    match best {
        Some((s, _, j)) if s > 0 => j,
        _ => last,
    }
}

/// Suffix sums computed front to back from the total.
pub fn brute_force_rtg(rewards: &[f64]) -> Vec<f64> {
    (0..rewards.len()).map(|t| rewards[t..].iter().sum()).collect()
}

/// Random batch of `rows` windows; row `r` has `pads[r]` padded steps.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    context: usize,
    state_dim: usize,
    action_dim: usize,
    pads: &[usize],
) -> hdt::data::SubTrajectoryBatch {
    let rows = pads.len();
    let steps = rows * context;
    let mut b = hdt::data::SubTrajectoryBatch {
        batch_size: rows,
        context,
        state_dim,
        action_dim,
        states: vec![0.0; steps * state_dim],
        actions: vec![0.0; steps * action_dim],
        subgoals: vec![0.0; steps * state_dim],
        returns_to_go: vec![0.0; steps],
        timesteps: vec![0; steps],
        mask: vec![0.0; steps],
        origins: (0..rows).map(|r| (r, context - 1)).collect(),
    };
    for (r, &pad) in pads.iter().enumerate() {
        let t0 = rng.random_range(0..30);
        for p in pad..context {
            let slot = r * context + p;
            for j in 0..state_dim {
                b.states[slot * state_dim + j] = rng.random_range(-2.0..2.0);
                b.subgoals[slot * state_dim + j] = rng.random_range(-2.0..2.0);
            }
            b.actions[slot * action_dim + rng.random_range(0..action_dim)] = 1.0;
            b.returns_to_go[slot] = rng.random_range(0.0..2.0);
            b.timesteps[slot] = t0 + p - pad;
            b.mask[slot] = 1.0;
        }
    }
    b
}

/// Row-wise layer norm with per-column gain and shift, eps 1e-5.
pub fn layer_norm_rows(x: &[f64], d: usize, gain: &[f64], shift: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + shift[j]));
    }
    out
}

/// `x (n, k) * w (k, m) + b`, naive triple loop.
pub fn affine(x: &[f64], k: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut out = Vec::with_capacity(x.len() / k * m);
    for row in x.chunks(k) {
        for c in 0..m {
            out.push(b[c] + (0..k).map(|i| row[i] * w[i * m + c]).sum::<f64>());
        }
    }
    out
}

/// Evaluation-mode loss of every action-predicting network over every
/// transition of the trainer's dataset.
pub fn full_action_loss(trainer: &hdt::train::Trainer) -> f64 {
    let data = trainer.dataset();
    let ends: Vec<(usize, usize)> = data
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    let net = trainer.agent().networks().last().unwrap().1.clone();
    let batch = hdt::data::build_batch(data, &ends, net.config.context());
    net.loss(&batch).unwrap()
}

/// Low-level loss of a hierarchical agent before and after `iterations`
/// updates on 10 medium chain-dense episodes.
pub fn overfit_losses(iterations: u64) -> (f64, f64) {
    use hdt::env::{generate_dataset, EnvKind, EnvSpec, Quality};
    let spec = EnvSpec::new(EnvKind::ChainDense);
    let data = generate_dataset(&spec, Quality::Medium, 10, 3).unwrap();
    let data = hdt::subgoal::augment_dataset(&data, hdt::subgoal::SubgoalMethod::WeightedAverage).unwrap();
    let config = hdt::train::TrainConfig {
        iterations,
        batch_size: 16,
        context_k: 5,
        learning_rate: 1e-3,
        warmup_iters: 100,
        eval_every: iterations + 1,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 1,
        dropout: 0.0,
        weight_decay: 0.0,
        ..hdt::train::TrainConfig::default()
    };
    let mut t = hdt::train::Trainer::new(&data, config).unwrap();
    let before = full_action_loss(&t);
    t.run().unwrap();
    (before, full_action_loss(&t))
}

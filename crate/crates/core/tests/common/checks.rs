//! Model-level checks shared by the model tests and the acceptance suite.

use diffcore::{grad_check, GradCheckOptions, Graph};
use hdt::data::SubTrajectoryBatch;
use hdt::model::{causal_forward, Layout, Modality, ModelConfig, ModelParams};
use hdt::policy::Network;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_batch, rng};

pub const LAYOUTS: [Layout; 5] = [Layout::High, Layout::Low, Layout::Dt, Layout::DtNoRtg, Layout::LowWithRtg];

pub fn config(layout: Layout, embed: usize, layers: usize, heads: usize, k: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: embed,
        n_layers: layers,
        n_heads: heads,
        context_k: k,
        dropout: 0.1,
        ..ModelConfig::new(layout, 2, 3, 60)
    }
}

/// Hidden states and head outputs in evaluation mode.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, batch: &SubTrajectoryBatch) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = causal_forward::<ChaCha8Rng>(&mut g, &bound, cfg, batch, None).unwrap();
    (g.value(out.hidden).data().to_vec(), g.value(out.head).data().to_vec())
}

/// Adds noise to the channel feeding token `p` of row 0.
pub fn perturb(batch: &mut SubTrajectoryBatch, layout: Layout, p: usize, r: &mut ChaCha8Rng) {
    let tps = layout.tokens_per_step();
    let (step, m) = (p / tps, layout.modalities()[p % tps]);
    let (ds, da) = (batch.state_dim, batch.action_dim);
    let mut bump = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x += r.random_range(0.5..3.0));
    match m {
        Modality::Rtg => bump(&mut batch.returns_to_go[step..step + 1]),
        Modality::Subgoal => bump(&mut batch.subgoals[step * ds..(step + 1) * ds]),
        Modality::State => bump(&mut batch.states[step * ds..(step + 1) * ds]),
        Modality::Action => bump(&mut batch.actions[step * da..(step + 1) * da]),
    }
}

/// Runs `cases` random perturbations and describes every case where a
/// position before the perturbed token changed.
pub fn causality_violations(cases: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        let layout = LAYOUTS[case % LAYOUTS.len()];
        let k = r.random_range(1..6);
        let cfg = config(layout, 8, 2, 2, k);
        let params = hdt::model::init_params(&cfg, &mut rng(seed ^ case as u64)).unwrap();
        let pad = r.random_range(0..k);
        let batch = random_batch(&mut r, k, 2, 3, &[pad]);
        let p = r.random_range(0..k * layout.tokens_per_step());
        let mut changed = batch.clone();
        perturb(&mut changed, layout, p, &mut r);
        let (h0, _) = forward(&params, &cfg, &batch);
        let (h1, _) = forward(&params, &cfg, &changed);
        if h0[..p * cfg.embed_dim] != h1[..p * cfg.embed_dim] {
            bad.push(format!("case {case}: {layout:?}, k {k}, token {p}"));
        }
    }
    bad
}

/// Largest finite-difference relative error of the full training loss of a
/// 2-layer, embed-8 model, one entry per random batch.
pub fn loss_gradient_errors(layout: Layout, batches: u64) -> Vec<f64> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..config(layout, 8, 2, 2, 4)
    };
    let net = Network::transformer(cfg, &mut rng(40)).unwrap();
    let mut r = rng(41);
    (0..batches)
        .map(|trial| {
            let batch = random_batch(&mut r, 4, 2, 3, &[0, 2, 1]);
            let f = |g: &mut Graph, vars: &[diffcore::Var]| {
                let bound = net
                    .params
                    .bound_to(vars.to_vec())
                    .map_err(|_| diffcore::TensorError::NonFinite { op: "bind" })?;
                net.loss_bound(g, &bound, &batch, None)
                    .map_err(|_| diffcore::TensorError::NonFinite { op: "loss" })
            };
            let opts = GradCheckOptions {
                seed: trial,
                ..GradCheckOptions::default()
            }
            .full_sweep();
            grad_check(f, net.params.tensors(), &opts).unwrap().max_rel_error
        })
        .collect()
}

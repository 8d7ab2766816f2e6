mod common;

use common::checks::{causality_violations, config, forward, loss_gradient_errors};
use common::{affine, layer_norm_rows, random_batch, rng};
use diffcore::Graph;
use hdt::model::{init_params, interleave_tokens, Layout, Modality};

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = config(Layout::Low, 16, 2, 2, 4);
    let a = init_params(&cfg, &mut rng(1)).unwrap();
    let b = init_params(&cfg, &mut rng(1)).unwrap();
    let c = init_params(&cfg, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.get("head.b").unwrap().data().iter().all(|v| *v == 0.0));
    assert!(a.get("ln_f.g").unwrap().data().iter().all(|v| *v == 1.0));
}

#[test]
fn parameter_count_matches_closed_form() {
    let (e, ds, da, t) = (8usize, 2usize, 3usize, 60usize);
    for layout in [Layout::High, Layout::Low, Layout::Dt, Layout::DtNoRtg, Layout::LowWithRtg] {
        let cfg = config(layout, e, 1, 1, 5);
        let inputs: usize = layout
            .modalities()
            .iter()
            .map(|m| match m {
                Modality::Rtg => 1,
                Modality::Subgoal | Modality::State => ds,
                Modality::Action => da,
            })
            .map(|w| w * e + e)
            .sum();
        let out = if layout == Layout::High { ds } else { da };
        let block = 2 * e + (e * 3 * e + 3 * e) + (e * e + e) + 2 * e + (e * 4 * e + 4 * e) + (4 * e * e + e);
        let expected = inputs + (t + 1) * e + 2 * e + block + 2 * e + e * out + out;
        assert_eq!(init_params(&cfg, &mut rng(0)).unwrap().numel(), expected, "{layout:?}");
    }
}

#[test]
fn tokens_interleave_by_step_with_shared_positions() {
    let cfg = config(Layout::Low, 8, 1, 1, 2);
    let params = init_params(&cfg, &mut rng(3)).unwrap();
    let batch = random_batch(&mut rng(4), 2, 2, 3, &[0]);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (tokens, mask) = interleave_tokens(&mut g, &bound, &cfg, &batch).unwrap();
    assert_eq!(g.shape(tokens), &[1, 6, 8]);
    assert_eq!(mask, vec![1.0; 6]);
    let tok = g.value(tokens).data();
    let pos = params.get("embed.timestep").unwrap().data();
    let embed = |m: &str, x: &[f64], k: usize| {
        affine(x, k, params.get(&format!("embed.{m}.w")).unwrap().data(), params.get(&format!("embed.{m}.b")).unwrap().data())
    };
    for step in 0..2 {
        let t = batch.timesteps[step];
        let expected = [
            embed("subgoal", &batch.subgoals[step * 2..step * 2 + 2], 2),
            embed("state", &batch.states[step * 2..step * 2 + 2], 2),
            embed("action", &batch.actions[step * 3..step * 3 + 3], 3),
        ];
        for (m, exp) in expected.iter().enumerate() {
            let p = step * 3 + m;
            for j in 0..8 {
                assert!((tok[p * 8 + j] - exp[j] - pos[t * 8 + j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fully_padded_row_has_an_empty_token_mask() {
    let cfg = config(Layout::High, 8, 1, 1, 3);
    let params = init_params(&cfg, &mut rng(3)).unwrap();
    let batch = random_batch(&mut rng(4), 3, 2, 3, &[1, 3]);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (_, mask) = interleave_tokens(&mut g, &bound, &cfg, &batch).unwrap();
    assert_eq!(&mask[..6], &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    assert_eq!(&mask[6..], &[0.0; 6]);
    let (hidden, head) = forward(&params, &cfg, &batch);
    assert!(hidden.iter().chain(&head).all(|v| v.is_finite()));
}

#[test]
fn outputs_before_a_perturbed_token_are_unchanged() {
    let bad = causality_violations(100, 21);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn zero_layer_model_is_a_closed_form_composition() {
    let cfg = config(Layout::Dt, 8, 0, 1, 3);
    let params = init_params(&cfg, &mut rng(8)).unwrap();
    let batch = random_batch(&mut rng(9), 3, 2, 3, &[0, 1]);
    let (_, head) = forward(&params, &cfg, &batch);
    let get = |n: &str| params.get(n).unwrap().data();
    let pos = get("embed.timestep");
    let mut expected = Vec::new();
    for slot in 0..batch.mask.len() {
        let t = batch.timesteps[slot];
        let mut tok = affine(&batch.states[slot * 2..slot * 2 + 2], 2, get("embed.state.w"), get("embed.state.b"));
        tok.iter_mut().enumerate().for_each(|(j, v)| *v += pos[t * 8 + j]);
        let x = layer_norm_rows(&tok, 8, get("embed.ln.g"), get("embed.ln.b"));
        let x = layer_norm_rows(&x, 8, get("ln_f.g"), get("ln_f.b"));
        expected.extend(affine(&x, 8, get("head.w"), get("head.b")));
    }
    for (a, b) in head.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn masked_leading_step_matches_the_shorter_window() {
    let mut r = rng(30);
    for layout in [Layout::High, Layout::Low, Layout::Dt] {
        let long = config(layout, 16, 2, 2, 20);
        let params = init_params(&long, &mut rng(31)).unwrap();
        let full = random_batch(&mut r, 20, 2, 3, &[0]);
        let mut padded = full.clone();
        padded.mask[0] = 0.0;
        padded.states[..2].fill(0.0);
        padded.subgoals[..2].fill(0.0);
        padded.actions[..3].fill(0.0);
        padded.returns_to_go[0] = 0.0;
        padded.timesteps[0] = 0;
        let mut suffix = full.clone();
        suffix.context = 19;
        suffix.states.drain(..2);
        suffix.subgoals.drain(..2);
        suffix.actions.drain(..3);
        suffix.returns_to_go.remove(0);
        suffix.timesteps.remove(0);
        suffix.mask.remove(0);
        let (_, a) = forward(&params, &long, &padded);
        let (_, b) = forward(&params, &long, &suffix);
        let w = b.len() / 19;
        for (x, y) in a[w..].iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

fn loss_gradients_pass(layout: Layout) {
    for (trial, err) in loss_gradient_errors(layout, 5).into_iter().enumerate() {
        assert!(err < 1e-4, "{layout:?} trial {trial}: {err}");
    }
}

#[test]
fn low_level_loss_gradients_match_finite_differences() {
    loss_gradients_pass(Layout::Low);
}

#[test]
fn high_level_loss_gradients_match_finite_differences() {
    loss_gradients_pass(Layout::High);
}

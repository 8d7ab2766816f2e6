mod common;

use common::{brute_force_rtg, dataset_of, random_trajectory, rng};
use hdt::data::{build_batch, compute_returns_to_go, load_dataset, sample_batch, Dataset, Trajectory};
use hdt::env::{generate_dataset, EnvKind, EnvSpec, Quality};
use hdt::subgoal::{augment_dataset, SubgoalMethod};
use hdt::Error;
use proptest::prelude::*;

fn rtg_of(rewards: &[f64]) -> Vec<f64> {
    let t = Trajectory::new(vec![vec![0.0]; rewards.len()], vec![vec![1.0]; rewards.len()], rewards.to_vec()).unwrap();
    compute_returns_to_go(&t).returns_to_go.unwrap()
}

#[test]
fn returns_to_go_examples() {
    assert_eq!(rtg_of(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    assert_eq!(rtg_of(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
    assert_eq!(rtg_of(&[0.0, 0.0, 0.0, 0.0, 1.0]), vec![1.0; 5]);
}

#[test]
fn loads_a_small_fixture() {
    let text = concat!(
        r#"{"env": "chain-dense", "state_dim": 1, "action_dim": 2, "seed": 4}"#,
        "\n",
        r#"{"states": [[0.0], [1.0], [2.0]], "actions": [[0,1],[0,1],[0,1]], "rewards": [1, 1, 1]}"#,
        "\n"
    );
    let d = Dataset::from_reader(text.as_bytes()).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.trajectories[0].last(), 2);
    assert_eq!(d.trajectories[0].returns_to_go.as_deref(), Some(&[3.0, 2.0, 1.0][..]));
    assert_eq!(d.state_mean, vec![1.0]);
}

#[test]
fn width_mismatch_names_the_episode() {
    let text = concat!(
        r#"{"env": "chain-dense", "state_dim": 1, "action_dim": 2, "seed": 0}"#,
        "\n",
        r#"{"states": [[0.0]], "actions": [[0,1]], "rewards": [1]}"#,
        "\n",
        r#"{"states": [[0.0]], "actions": [[0,1,0]], "rewards": [1]}"#,
        "\n"
    );
    match Dataset::from_reader(text.as_bytes()) {
        Err(e @ Error::WidthMismatch { episode: 2, .. }) => assert!(e.to_string().contains("episode 2")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_and_missing_files_are_errors() {
    assert!(matches!(
        Dataset::from_reader(&b"{\"env\": \"x\"}\n"[..]),
        Err(Error::Malformed { .. })
    ));
    assert!(matches!(load_dataset("/nonexistent/file.jsonl"), Err(Error::Io { .. })));
}

#[test]
fn state_statistics_match_a_streaming_oracle() {
    let env = EnvSpec::new(EnvKind::GridMazeSparse);
    let d = generate_dataset(&env, Quality::Medium, 500, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maze.jsonl");
    d.save(&path).unwrap();
    let loaded = load_dataset(&path).unwrap();
    // Welford's single-pass recurrence
    let mut n = 0.0;
    let mut mean = vec![0.0; 2];
    let mut m2 = vec![0.0; 2];
    for s in loaded.trajectories.iter().flat_map(|t| t.states.iter()) {
        n += 1.0;
        for j in 0..2 {
            let delta = s[j] - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (s[j] - mean[j]);
        }
    }
    for j in 0..2 {
        assert!((loaded.state_mean[j] - mean[j]).abs() < 1e-12);
        assert!((loaded.state_std[j] - (m2[j] / n).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn constant_dimensions_get_unit_std() {
    let t = Trajectory::new(vec![vec![5.0, 1.0], vec![5.0, 2.0]], vec![vec![1.0]; 2], vec![0.0; 2]).unwrap();
    let d = dataset_of(vec![t]);
    assert_eq!(d.state_std[0], 1.0);
    assert_eq!(d.state_std[1], 0.5);
}

#[test]
fn write_then_load_round_trips() {
    let mut r = rng(5);
    let d = dataset_of((0..8).map(|_| random_trajectory(&mut r, 12, 3, 2)).collect());
    let d = augment_dataset(&d, SubgoalMethod::WeightedAverage).unwrap();
    let mut buf = Vec::new();
    d.to_writer(&mut buf).unwrap();
    let back = Dataset::from_reader(&buf[..]).unwrap();
    assert_eq!(back, d);
    let mut again = Vec::new();
    back.to_writer(&mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn sampling_an_unlabeled_dataset_fails() {
    let mut r = rng(1);
    let d = dataset_of(vec![random_trajectory(&mut r, 5, 1, 2)]);
    assert!(matches!(sample_batch(&d, 4, 3, &mut r), Err(Error::Unlabeled)));
}

fn labeled(lengths: &[usize]) -> Dataset {
    let mut r = rng(9);
    let trajs = lengths.iter().map(|&n| random_trajectory(&mut r, n, 2, 3)).collect();
    augment_dataset(&dataset_of(trajs), SubgoalMethod::WeightedAverage).unwrap()
}

#[test]
fn context_one_has_a_single_real_step() {
    let d = labeled(&[4, 9]);
    let b = sample_batch(&d, 16, 1, &mut rng(2)).unwrap();
    assert_eq!(b.mask, vec![1.0; 16]);
}

#[test]
fn window_at_the_first_step_is_left_padded() {
    let d = labeled(&[30]);
    let b = build_batch(&d, &[(0, 0)], 20);
    let mut expected = vec![0.0; 19];
    expected.push(1.0);
    assert_eq!(b.mask, expected);
}

#[test]
fn trajectories_are_picked_in_proportion_to_length() {
    let d = labeled(&[10, 30]);
    let mut r = rng(77);
    let mut second = 0usize;
    let draws = 100_000;
    for _ in 0..draws / 1000 {
        let b = sample_batch(&d, 1000, 1, &mut r).unwrap();
        second += b.origins.iter().filter(|(t, _)| *t == 1).count();
    }
    let freq = second as f64 / draws as f64;
    assert!((freq - 0.75).abs() <= 0.01, "{freq}");
}

#[test]
fn same_seed_gives_the_same_batch() {
    let d = labeled(&[7, 13, 21]);
    let a = sample_batch(&d, 8, 5, &mut rng(4)).unwrap();
    let b = sample_batch(&d, 8, 5, &mut rng(4)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn rtg_satisfies_the_suffix_recurrence(rewards in prop::collection::vec(-10.0f64..10.0, 1..80)) {
        let rtg = rtg_of(&rewards);
        let oracle = brute_force_rtg(&rewards);
        let last = rewards.len() - 1;
        prop_assert_eq!(rtg[last], rewards[last]);
        for t in 0..last {
            let scale = 1.0 + oracle[t].abs() + rewards[t..].iter().map(|r| r.abs()).sum::<f64>();
            prop_assert!((rtg[t] - rtg[t + 1] - rewards[t]).abs() <= 1e-9 * scale);
            prop_assert!((rtg[t] - oracle[t]).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn batches_satisfy_their_invariants(
        lengths in prop::collection::vec(1usize..25, 1..5),
        batch in 1usize..10,
        context in 1usize..12,
        seed in 0u64..1000,
    ) {
        let d = labeled(&lengths);
        let b = sample_batch(&d, batch, context, &mut rng(seed)).unwrap();
        let norm = d.normalizer();
        let (ds, da) = (2, 3);
        for row in 0..batch {
            let m = &b.mask[row * context..(row + 1) * context];
            let pad = m.iter().take_while(|v| **v == 0.0).count();
            prop_assert!(m[pad..].iter().all(|v| *v == 1.0));
            let (ti, end) = b.origins[row];
            let traj = &d.trajectories[ti];
            for p in 0..context {
                let slot = row * context + p;
                if p < pad {
                    prop_assert!(b.states[slot * ds..(slot + 1) * ds].iter().all(|v| *v == 0.0));
                    prop_assert!(b.actions[slot * da..(slot + 1) * da].iter().all(|v| *v == 0.0));
                    prop_assert!(b.subgoals[slot * ds..(slot + 1) * ds].iter().all(|v| *v == 0.0));
                    prop_assert_eq!(b.returns_to_go[slot], 0.0);
                    prop_assert_eq!(b.timesteps[slot], 0);
                } else {
                    let t = end + 1 + p - context;
                    prop_assert_eq!(b.timesteps[slot], t);
                    prop_assert_eq!(&b.states[slot * ds..(slot + 1) * ds], &norm.normalize_state(&traj.states[t])[..]);
                    prop_assert_eq!(&b.actions[slot * da..(slot + 1) * da], &traj.actions[t][..]);
                    let sg = &traj.subgoals.as_ref().unwrap()[t];
                    prop_assert_eq!(&b.subgoals[slot * ds..(slot + 1) * ds], &norm.normalize_state(sg)[..]);
                    prop_assert_eq!(b.returns_to_go[slot], norm.scale_rtg(traj.returns_to_go.as_ref().unwrap()[t]));
                }
            }
        }
    }
}

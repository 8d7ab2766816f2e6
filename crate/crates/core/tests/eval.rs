mod common;

use common::rng;
use hdt::data::Normalizer;
use hdt::env::{EnvKind, EnvSpec};
use hdt::error::Error;
use hdt::eval::{
    evaluate, evaluate_traces, rollout_dt, rollout_hdt, rollout_scripted, run_episodes, EvalResult, RolloutConfig,
    SubgoalRefresh,
};
use hdt::model::{Layout, ModelConfig};
use hdt::policy::{Agent, AgentNets, AgentSpec, DtBaseline, Network, PolicyKind};

fn spec(kind: PolicyKind, k: usize, env: &EnvSpec) -> AgentSpec {
    AgentSpec {
        kind,
        state_dim: env.state_dim,
        action_dim: env.action_dim,
        max_timestep: env.horizon,
        embed_dim: 8,
        n_layers: 1,
        n_heads: 1,
        context_k: k,
        dropout: 0.1,
        bc_hidden: 8,
    }
}

fn norm(env: &EnvSpec) -> Normalizer {
    Normalizer {
        state_mean: vec![2.0; env.state_dim],
        state_std: vec![3.0; env.state_dim],
        rtg_scale: 5.0,
    }
}

/// A return-conditioned baseline that always moves right on the chain.
fn rightward_dt(env: &EnvSpec) -> DtBaseline {
    let cfg = ModelConfig {
        embed_dim: 8,
        n_layers: 1,
        n_heads: 1,
        context_k: 4,
        dropout: 0.0,
        ..ModelConfig::new(Layout::Dt, env.state_dim, env.action_dim, env.horizon)
    };
    let mut net = Network::transformer(cfg, &mut rng(1)).unwrap();
    net.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    net.params.get_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.0, 1.0]);
    DtBaseline { net }
}

#[test]
fn returns_to_go_drop_by_each_observed_reward() {
    let chain = EnvSpec::new(EnvKind::ChainDense);
    let dt = rightward_dt(&chain);
    let config = RolloutConfig {
        desired_return: Some(50.0),
        ..RolloutConfig::new(1, 0)
    };
    let tr = rollout_dt(&dt, &norm(&chain), &chain, 3, &config).unwrap();
    assert_eq!(tr.total_return, 50.0);
    for w in tr.steps.windows(2) {
        assert_eq!(w[1].rtg.unwrap(), w[0].rtg.unwrap() - w[0].reward);
    }
    let last = tr.steps.last().unwrap();
    assert_eq!(last.rtg.unwrap() - last.reward, 0.0);
    let low = RolloutConfig {
        desired_return: Some(10.0),
        ..config
    };
    let tr = rollout_dt(&dt, &norm(&chain), &chain, 3, &low).unwrap();
    assert_eq!(tr.len(), 50);
    assert!(tr.steps.last().unwrap().rtg.unwrap() < 0.0);
}

#[test]
fn zero_reward_episodes_keep_the_target_constant() {
    let maze = EnvSpec::new(EnvKind::GridMazeSparse);
    let agent = Agent::init(&spec(PolicyKind::Dt, 3, &maze), norm(&maze), 2).unwrap();
    let config = RolloutConfig {
        desired_return: Some(1.0),
        ..RolloutConfig::new(10, 5)
    };
    let mut seen = 0;
    for tr in evaluate_traces(&agent, &maze, &config).unwrap() {
        if tr.total_return == 0.0 {
            assert!(tr.steps.iter().all(|s| s.rtg == Some(1.0)));
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn hierarchical_rollouts_complete_with_a_single_step_context() {
    let kitchen = EnvSpec::new(EnvKind::KitchenLite);
    for refresh in [SubgoalRefresh::EveryStep, SubgoalRefresh::OnReach(0.5)] {
        let agent = Agent::init(&spec(PolicyKind::Hdt, 1, &kitchen), norm(&kitchen), 4).unwrap();
        let config = RolloutConfig {
            subgoal_refresh: refresh,
            ..RolloutConfig::new(3, 1)
        };
        for tr in evaluate_traces(&agent, &kitchen, &config).unwrap() {
            assert!(!tr.is_empty() && tr.len() <= kitchen.horizon);
            assert!(tr.steps.iter().all(|s| s.subgoal.is_some() && s.rtg.is_none()));
        }
    }
}

#[test]
fn paired_seeds_give_identical_results() {
    let maze = EnvSpec::new(EnvKind::GridMazeSparse);
    for kind in [PolicyKind::Hdt, PolicyKind::DtNoRtg, PolicyKind::Bc] {
        let agent = Agent::init(&spec(kind, 3, &maze), norm(&maze), 6).unwrap();
        let config = RolloutConfig::new(8, 21);
        let a = evaluate(&agent, &maze, &config).unwrap();
        assert_eq!(a, evaluate(&agent, &maze, &config).unwrap());
        let starts: Vec<_> = evaluate_traces(&agent, &maze, &config)
            .unwrap()
            .iter()
            .map(|t| t.steps[0].state.clone())
            .collect();
        let expected: Vec<_> = (0..8)
            .map(|e| maze.reset(config.episode_seed(e)).observation(&maze))
            .collect();
        assert_eq!(starts, expected);
    }
}

#[test]
fn expert_succeeds_on_every_chain_episode() {
    let chain = EnvSpec::new(EnvKind::ChainDense);
    let config = RolloutConfig::new(20, 0);
    let traces = run_episodes(&config, |s| rollout_scripted(&chain, 0.0, s)).unwrap();
    let r = EvalResult::from_traces(&traces);
    assert_eq!((r.success_rate, r.mean_return, r.mean_length), (1.0, 50.0, 50.0));
}

#[test]
fn first_decision_sees_only_the_reset_state() {
    let maze = EnvSpec::new(EnvKind::GridMazeSparse);
    let agent = Agent::init(&spec(PolicyKind::Hdt, 5, &maze), norm(&maze), 8).unwrap();
    let (high, low) = match &agent.nets {
        AgentNets::Hierarchical { high, low } => (high, low),
        _ => unreachable!(),
    };
    let config = RolloutConfig::new(1, 0);
    let tr = rollout_hdt(high, low, &agent.normalizer, &maze, 13, &config).unwrap();
    let first = &tr.steps[0];
    assert_eq!(first.t, 0);
    assert_eq!(first.state, maze.reset(13).observation(&maze));
    let h = hdt::policy::History {
        states: vec![first.state.clone()],
        timesteps: vec![0],
        ..Default::default()
    };
    let sg = hdt::policy::predict_subgoal(high, &agent.normalizer, &h).unwrap();
    assert_eq!(first.subgoal.as_ref().unwrap(), &sg);
}

#[test]
fn return_conditioned_policies_need_a_target() {
    let maze = EnvSpec::new(EnvKind::GridMazeSparse);
    for kind in [PolicyKind::Dt, PolicyKind::HdtPlusRtg] {
        let agent = Agent::init(&spec(kind, 2, &maze), norm(&maze), 0).unwrap();
        assert!(matches!(
            evaluate(&agent, &maze, &RolloutConfig::new(1, 0)),
            Err(Error::MissingDesiredReturn(_))
        ));
    }
    let chain = EnvSpec::new(EnvKind::ChainDense);
    let agent = Agent::init(&spec(PolicyKind::Bc, 1, &maze), norm(&maze), 0).unwrap();
    assert!(matches!(
        evaluate(&agent, &chain, &RolloutConfig::new(1, 0)),
        Err(Error::ConfigMismatch(_))
    ));
}

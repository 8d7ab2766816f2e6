//! Test-time rollouts for every policy kind and metric aggregation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{Demonstrator, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::{
    argmax, predict_action, predict_subgoal, ActionModel, Agent, AgentNets, BcBaseline, DtBaseline,
    HighLevelMechanism, History, LowLevelController, PolicyKind,
};
use crate::seed;

/// Initial returns-to-go target for return-conditioned policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DesiredReturn {
    MaxInDataset,
    HalfMax,
    Fixed(f64),
}

impl Default for DesiredReturn {
    fn default() -> Self {
        DesiredReturn::MaxInDataset
    }
}

impl DesiredReturn {
    pub fn resolve(self, dataset_max_return: f64) -> f64 {
        match self {
            DesiredReturn::MaxInDataset => dataset_max_return,
            DesiredReturn::HalfMax => dataset_max_return / 2.0,
            DesiredReturn::Fixed(v) => v,
        }
    }
}

impl fmt::Display for DesiredReturn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesiredReturn::MaxInDataset => f.write_str("max"),
            DesiredReturn::HalfMax => f.write_str("half-max"),
            DesiredReturn::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for DesiredReturn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(DesiredReturn::MaxInDataset),
            "half-max" => Ok(DesiredReturn::HalfMax),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(DesiredReturn::Fixed)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "desired return `{s}` is not `max`, `half-max` or a number"
                    ))
                }),
        }
    }
}

impl TryFrom<String> for DesiredReturn {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DesiredReturn> for String {
    fn from(d: DesiredReturn) -> String {
        d.to_string()
    }
}

/// When the high-level mechanism is asked for a new sub-goal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SubgoalRefresh {
    EveryStep,
    /// Keep the current sub-goal until the normalized state is within this
    /// Euclidean distance of it.
    OnReach(f64),
}

pub const DEFAULT_REACH_DISTANCE: f64 = 0.5;

impl Default for SubgoalRefresh {
    fn default() -> Self {
        SubgoalRefresh::EveryStep
    }
}

impl fmt::Display for SubgoalRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubgoalRefresh::EveryStep => f.write_str("every-step"),
            SubgoalRefresh::OnReach(d) => write!(f, "on-reach:{d}"),
        }
    }
}

impl FromStr for SubgoalRefresh {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "every-step" => Ok(SubgoalRefresh::EveryStep),
            "on-reach" => Ok(SubgoalRefresh::OnReach(DEFAULT_REACH_DISTANCE)),
            _ => s
                .strip_prefix("on-reach:")
                .and_then(|d| d.parse::<f64>().ok())
                .filter(|d| *d > 0.0)
                .map(SubgoalRefresh::OnReach)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown sub-goal refresh mode `{s}`"))),
        }
    }
}

impl TryFrom<String> for SubgoalRefresh {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SubgoalRefresh> for String {
    fn from(r: SubgoalRefresh) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Initial returns-to-go in reward units.
    pub desired_return: Option<f64>,
    pub subgoal_refresh: SubgoalRefresh,
}

impl RolloutConfig {
    pub fn new(episodes: usize, seed: u64) -> Self {
        Self {
            episodes,
            seed,
            desired_return: None,
            subgoal_refresh: SubgoalRefresh::EveryStep,
        }
    }

    pub fn validate(&self, kind: Option<PolicyKind>) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::InvalidArgument("episodes must be at least 1".into()));
        }
        if let Some(k) = kind {
            if k.needs_desired_return() && self.desired_return.is_none() {
                return Err(Error::MissingDesiredReturn(format!("{k} requires a desired return")));
            }
        }
        Ok(())
    }

    /// Environment seed of episode `e`.
    pub fn episode_seed(&self, e: usize) -> u64 {
        seed::derive(self.seed, e as u64)
    }
}

/// One logged decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgoal: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rtg: Option<f64>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub total_return: f64,
    pub success: bool,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Writes one JSON object per step.
    pub fn write_jsonl<W: Write>(&self, episode: usize, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            episode: usize,
            seed: u64,
            #[serde(flatten)]
            step: &'a StepRecord,
        }
        for step in &self.steps {
            let line = serde_json::to_string(&Line {
                episode,
                seed: self.seed,
                step,
            })
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

/// Runs one episode, asking `decide` for each action. `decide` receives the
/// step index and current observation and returns the action together with
/// what it wants logged as sub-goal and returns-to-go.
fn run_episode<F>(env: &EnvSpec, seed: u64, mut decide: F) -> Result<EpisodeTrace>
where
    F: FnMut(usize, &[f64], Option<f64>) -> Result<(usize, Option<Vec<f64>>, Option<f64>)>,
{
    let mut state = env.reset(seed);
    let mut steps = Vec::new();
    let mut last_reward = None;
    let mut total = 0.0;
    while !state.is_done() {
        let obs = state.observation(env);
        let (action, subgoal, rtg) = decide(state.step_count(), &obs, last_reward)?;
        if action >= env.action_dim {
            return Err(Error::ConfigMismatch(format!(
                "policy chose action {action} but {} has {}",
                env.name(),
                env.action_dim
            )));
        }
        let tr = env.step(&state, action)?;
        total += tr.reward;
        last_reward = Some(tr.reward);
        steps.push(StepRecord {
            t: state.step_count(),
            state: obs,
            subgoal,
            rtg,
            action,
            reward: tr.reward,
        });
        state = tr.state;
    }
    Ok(EpisodeTrace {
        seed,
        steps,
        total_return: total,
        success: state.succeeded(),
    })
}

fn check_dims(env: &EnvSpec, state_dim: usize, action_dim: usize) -> Result<()> {
    if env.state_dim != state_dim || env.action_dim != action_dim {
        return Err(Error::ConfigMismatch(format!(
            "policy expects state_dim {state_dim} and action_dim {action_dim}, {} has {} and {}",
            env.name(),
            env.state_dim,
            env.action_dim
        )));
    }
    Ok(())
}

/// Hierarchical rollout: each step the mechanism proposes a sub-goal (or the
/// previous one is kept in on-reach mode) and the controller acts on the
/// `(sg, s, a)` history. Rewards are never consulted unless the controller
/// carries a returns-to-go channel.
pub fn rollout_hdt(
    high: &HighLevelMechanism,
    low: &LowLevelController,
    agent_norm: &crate::data::Normalizer,
    env: &EnvSpec,
    seed: u64,
    config: &RolloutConfig,
) -> Result<EpisodeTrace> {
    check_dims(env, high.net.config.state_dim(), high.net.config.action_dim())?;
    check_dims(env, low.net.config.state_dim(), low.net.config.action_dim())?;
    let with_rtg = matches!(&low.net.config, crate::policy::NetConfig::Transformer(c) if c.layout.uses(crate::model::Modality::Rtg));
    let desired = if with_rtg {
        Some(config.desired_return.ok_or_else(|| {
            Error::MissingDesiredReturn("hdt-plus-rtg requires a desired return".into())
        })?)
    } else {
        None
    };
    let mut h = History::new();
    let mut current: Option<Vec<f64>> = None;
    run_episode(env, seed, |t, obs, last_reward| {
        if let Some(rtg) = desired {
            let next = match (h.rtgs.last(), last_reward) {
                (Some(prev), Some(r)) => prev - r,
                _ => rtg,
            };
            h.rtgs.push(next);
        }
        h.states.push(obs.to_vec());
        h.timesteps.push(t);
        let refresh = match (&current, config.subgoal_refresh) {
            (None, _) | (_, SubgoalRefresh::EveryStep) => true,
            (Some(sg), SubgoalRefresh::OnReach(tau)) => {
                let a = agent_norm.normalize_state(obs);
                let b = agent_norm.normalize_state(sg);
                a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() < tau
            }
        };
        if refresh {
            current = Some(predict_subgoal(high, agent_norm, &h)?);
        }
        let sg = current.clone().unwrap();
        h.subgoals.push(sg.clone());
        let out = predict_action(ActionModel::Low(low), agent_norm, &h)?;
        let a = argmax(&out);
        h.actions.push(env.one_hot(a));
        Ok((a, Some(sg), h.rtgs.last().copied()))
    })
}

/// Return-conditioned rollout. The target starts at `desired_return` and
/// drops by each observed reward; it is not clamped.
pub fn rollout_dt(
    dt: &DtBaseline,
    norm: &crate::data::Normalizer,
    env: &EnvSpec,
    seed: u64,
    config: &RolloutConfig,
) -> Result<EpisodeTrace> {
    check_dims(env, dt.net.config.state_dim(), dt.net.config.action_dim())?;
    let with_rtg = matches!(&dt.net.config, crate::policy::NetConfig::Transformer(c) if c.layout.uses(crate::model::Modality::Rtg));
    let desired = if with_rtg {
        Some(
            config
                .desired_return
                .ok_or_else(|| Error::MissingDesiredReturn("dt requires a desired return".into()))?,
        )
    } else {
        None
    };
    let mut h = History::new();
    run_episode(env, seed, |t, obs, last_reward| {
        if let Some(rtg) = desired {
            let next = match (h.rtgs.last(), last_reward) {
                (Some(prev), Some(r)) => prev - r,
                _ => rtg,
            };
            h.rtgs.push(next);
        }
        h.states.push(obs.to_vec());
        h.timesteps.push(t);
        let out = predict_action(ActionModel::Dt(dt), norm, &h)?;
        let a = argmax(&out);
        h.actions.push(env.one_hot(a));
        Ok((a, None, h.rtgs.last().copied()))
    })
}

pub fn rollout_bc(
    bc: &BcBaseline,
    norm: &crate::data::Normalizer,
    env: &EnvSpec,
    seed: u64,
) -> Result<EpisodeTrace> {
    check_dims(env, bc.net.config.state_dim(), bc.net.config.action_dim())?;
    let mut h = History::new();
    run_episode(env, seed, |t, obs, _| {
        h.states.push(obs.to_vec());
        h.timesteps.push(t);
        let a = argmax(&predict_action(ActionModel::Bc(bc), norm, &h)?);
        Ok((a, None, None))
    })
}

/// Scripted demonstrator with exploration rate `epsilon`; `epsilon = 1` is
/// the uniform random policy.
pub fn rollout_scripted(env: &EnvSpec, epsilon: f64, seed: u64) -> Result<EpisodeTrace> {
    let mut demo = Demonstrator::new(epsilon, seed::derive(seed, 1));
    let mut state = env.reset(seed);
    run_episode(env, seed, |_, _, _| {
        let a = demo.act(env, &state);
        state = env.step(&state, a)?.state;
        Ok((a, None, None))
    })
}

pub fn rollout_agent(agent: &Agent, env: &EnvSpec, seed: u64, config: &RolloutConfig) -> Result<EpisodeTrace> {
    match &agent.nets {
        AgentNets::Hierarchical { high, low } => rollout_hdt(high, low, &agent.normalizer, env, seed, config),
        AgentNets::Dt(dt) => rollout_dt(dt, &agent.normalizer, env, seed, config),
        AgentNets::Bc(bc) => rollout_bc(bc, &agent.normalizer, env, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episode_returns: Vec<f64>,
    pub episode_success: Vec<bool>,
    pub episode_lengths: Vec<usize>,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_length: f64,
}

impl EvalResult {
    pub fn from_traces(traces: &[EpisodeTrace]) -> Self {
        let n = traces.len() as f64;
        let episode_returns: Vec<f64> = traces.iter().map(|t| t.total_return).collect();
        let episode_success: Vec<bool> = traces.iter().map(|t| t.success).collect();
        let episode_lengths: Vec<usize> = traces.iter().map(EpisodeTrace::len).collect();
        Self {
            mean_return: episode_returns.iter().sum::<f64>() / n,
            success_rate: episode_success.iter().filter(|s| **s).count() as f64 / n,
            mean_length: episode_lengths.iter().sum::<usize>() as f64 / n,
            episode_returns,
            episode_success,
            episode_lengths,
        }
    }
}

/// Runs `config.episodes` episodes (in parallel when enabled) with paired
/// seeds and returns the traces in episode order.
pub fn run_episodes<F>(config: &RolloutConfig, episode: F) -> Result<Vec<EpisodeTrace>>
where
    F: Fn(u64) -> Result<EpisodeTrace> + Sync,
{
    config.validate(None)?;
    diffcore::par::map_range(config.episodes, |e| episode(config.episode_seed(e)))
        .into_iter()
        .collect()
}

pub fn evaluate_traces(agent: &Agent, env: &EnvSpec, config: &RolloutConfig) -> Result<Vec<EpisodeTrace>> {
    config.validate(Some(agent.kind))?;
    run_episodes(config, |s| rollout_agent(agent, env, s, config))
}

pub fn evaluate(agent: &Agent, env: &EnvSpec, config: &RolloutConfig) -> Result<EvalResult> {
    Ok(EvalResult::from_traces(&evaluate_traces(agent, env, config)?))
}

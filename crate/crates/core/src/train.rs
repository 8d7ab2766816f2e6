//! The training loop: one sampled batch per iteration, one optimizer step
//! per network, periodic evaluation and best-checkpoint tracking.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DatasetSummary, RngState, StoredModel, TrainingState};
use crate::data::{sample_batch, Dataset};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::eval::{evaluate, DesiredReturn, RolloutConfig, SubgoalRefresh};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::policy::{Agent, AgentSpec, PolicyKind};
use crate::seed;
use crate::subgoal::{augment_dataset, SubgoalMethod};

const BATCH_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub context_k: usize,
    pub learning_rate: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub warmup_iters: u64,
    pub weight_decay: f64,
    pub method: SubgoalMethod,
    pub policy: PolicyKind,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub bc_hidden: usize,
    /// Target used when evaluating return-conditioned policies.
    pub desired_return: DesiredReturn,
    pub subgoal_refresh: SubgoalRefresh,
    /// Maze layout used for evaluation rollouts.
    pub layout_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_size: 64,
            context_k: 20,
            learning_rate: 1e-4,
            eval_every: 1000,
            eval_episodes: 100,
            seed: 0,
            grad_clip: 0.25,
            warmup_iters: 1000,
            weight_decay: 1e-4,
            method: SubgoalMethod::WeightedAverage,
            policy: PolicyKind::Hdt,
            embed_dim: 128,
            n_layers: 3,
            n_heads: 1,
            dropout: 0.1,
            bc_hidden: 256,
            desired_return: DesiredReturn::MaxInDataset,
            subgoal_refresh: SubgoalRefresh::EveryStep,
            layout_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Strict JSON parsing: unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("context_k", self.context_k as f64),
            ("learning_rate", self.learning_rate),
            ("eval_every", self.eval_every as f64),
            ("eval_episodes", self.eval_episodes as f64),
            ("embed_dim", self.embed_dim as f64),
            ("n_heads", self.n_heads as f64),
            ("bc_hidden", self.bc_hidden as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("grad_clip", self.grad_clip), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by n_heads".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_iters: self.warmup_iters,
            grad_clip: self.grad_clip,
            ..AdamConfig::default()
        }
    }

    /// Window length of training batches; BC sees single steps.
    pub fn batch_context(&self) -> usize {
        if self.policy == PolicyKind::Bc {
            1
        } else {
            self.context_k
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    /// Mean training loss of the action model since the previous point.
    pub loss_low: Option<f64>,
    /// Mean training loss of the sub-goal model, hierarchical agents only.
    pub loss_high: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub points: Vec<EvalPoint>,
    pub best_mean_return: Option<f64>,
    pub best_iteration: Option<u64>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "mean_return", "success_rate", "loss_low", "loss_high"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            out.write_record([
                p.iteration.to_string(),
                p.mean_return.to_string(),
                p.success_rate.to_string(),
                opt(p.loss_low),
                opt(p.loss_high),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<report>", e))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("ascii csv"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Owns one training run.
pub struct Trainer {
    dataset: Dataset,
    env: EnvSpec,
    config: TrainConfig,
    adam: AdamConfig,
    summary: DatasetSummary,
    agent: Agent,
    optimizers: Vec<AdamState>,
    iteration: u64,
    batch_rng: ChaCha8Rng,
    dropout_rngs: Vec<ChaCha8Rng>,
    loss_sums: Vec<f64>,
    loss_count: u64,
    report: TrainReport,
    best: Option<Agent>,
}

/// Final and best checkpoints of a finished run.
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub report: TrainReport,
}

fn prepare_dataset(dataset: &Dataset, config: &TrainConfig) -> Result<Dataset> {
    if dataset.is_labeled() {
        return Ok(dataset.clone().with_returns_to_go());
    }
    if config.policy.is_hierarchical() {
        return Err(Error::Unlabeled);
    }
    // baselines ignore sub-goals; labeling only satisfies the sampler
    augment_dataset(dataset, config.method)
}

impl Trainer {
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = EnvSpec::with_layout(dataset.meta.env.parse()?, config.layout_seed);
        if env.state_dim != dataset.meta.state_dim || env.action_dim != dataset.meta.action_dim {
            return Err(Error::ConfigMismatch(format!(
                "dataset widths ({}, {}) do not match {}",
                dataset.meta.state_dim,
                dataset.meta.action_dim,
                env.name()
            )));
        }
        let dataset = prepare_dataset(dataset, &config)?;
        let spec = AgentSpec {
            kind: config.policy,
            state_dim: env.state_dim,
            action_dim: env.action_dim,
            max_timestep: env.horizon,
            embed_dim: config.embed_dim,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            context_k: config.context_k,
            dropout: config.dropout,
            bc_hidden: config.bc_hidden,
        };
        let agent = Agent::init(&spec, dataset.normalizer(), config.seed)?;
        let n = agent.networks().len();
        let optimizers = agent.networks().iter().map(|(_, net)| AdamState::new(&net.params)).collect();
        Ok(Self {
            summary: DatasetSummary::of(&dataset),
            adam: config.adam(),
            batch_rng: seed::rng(config.seed, BATCH_STREAM),
            dropout_rngs: (0..n).map(|i| seed::rng(config.seed, DROPOUT_STREAM + i as u64)).collect(),
            loss_sums: vec![0.0; n],
            loss_count: 0,
            report: TrainReport::default(),
            best: None,
            iteration: 0,
            optimizers,
            agent,
            dataset,
            env,
            config,
        })
    }

    /// Continues a run from a checkpoint with a training section.
    pub fn resume(dataset: &Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        let state = checkpoint
            .training
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let mut t = Self::new(dataset, state.config.clone())?;
        checkpoint.check_env(&t.env)?;
        if checkpoint.policy != t.config.policy {
            return Err(Error::ConfigMismatch("checkpoint policy differs from its config".into()));
        }
        let n = t.optimizers.len();
        if state.optimizers.len() != n || state.rngs.len() != n + 1 || state.loss_sums.len() != n {
            return Err(Error::Checkpoint("training state does not match the agent".into()));
        }
        t.agent = checkpoint.agent()?;
        for (opt, (_, net)) in state.optimizers.iter().zip(t.agent.networks()) {
            if !opt.matches(&net.params) {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        t.optimizers = state.optimizers.clone();
        t.batch_rng = state.rngs[0].restore()?;
        t.dropout_rngs = state.rngs[1..].iter().map(RngState::restore).collect::<Result<_>>()?;
        t.loss_sums = state.loss_sums.clone();
        t.loss_count = state.loss_count;
        t.report = state.report.clone();
        t.best = match &state.best {
            Some(models) => Some(
                Checkpoint {
                    models: models.clone(),
                    training: None,
                    ..checkpoint.clone()
                }
                .agent()?,
            ),
            None => None,
        };
        t.iteration = checkpoint.iteration;
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Rollout settings used at evaluation points.
    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            episodes: self.config.eval_episodes,
            seed: seed::derive(self.config.seed, EVAL_STREAM),
            desired_return: self
                .config
                .policy
                .needs_desired_return()
                .then(|| self.config.desired_return.resolve(self.summary.max_return)),
            subgoal_refresh: self.config.subgoal_refresh,
        }
    }

    /// One iteration: sample a batch and update the networks selected by
    /// `only` (all when `None`). Returns the per-network losses.
    fn step_networks(&mut self, only: Option<usize>) -> Result<Vec<f64>> {
        let batch = sample_batch(
            &self.dataset,
            self.config.batch_size,
            self.config.batch_context(),
            &mut self.batch_rng,
        )?;
        let mut updates = Vec::new();
        for (i, (_, net)) in self.agent.networks().into_iter().enumerate() {
            if only.is_some_and(|o| o != i) {
                continue;
            }
            match net.loss_and_grads(&batch, Some(&mut self.dropout_rngs[i])) {
                Ok(u) => updates.push((i, u)),
                Err(Error::Tensor(diffcore::TensorError::NonFinite { .. })) => {
                    return Err(Error::Diverged {
                        iteration: self.iteration + 1,
                        last_good: Box::new(self.checkpoint()),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let mut losses = Vec::with_capacity(updates.len());
        let mut nets = self.agent.networks_mut();
        for (i, (loss, grads)) in updates {
            optimizer_step(&mut nets[i].1.params, &grads, &mut self.optimizers[i], &self.adam)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Runs one iteration and, when due, an evaluation point.
    pub fn step(&mut self) -> Result<Vec<f64>> {
        let losses = self.step_networks(None)?;
        self.iteration += 1;
        for (s, l) in self.loss_sums.iter_mut().zip(&losses) {
            *s += l;
        }
        self.loss_count += 1;
        if self.iteration % self.config.eval_every == 0 {
            self.eval_point()?;
        }
        Ok(losses)
    }

    fn eval_point(&mut self) -> Result<()> {
        let result = evaluate(&self.agent, &self.env, &self.rollout_config())?;
        let mean = |i: usize| self.loss_sums.get(i).map(|s| s / self.loss_count.max(1) as f64);
        let (loss_low, loss_high) = if self.agent.kind.is_hierarchical() {
            (mean(1), mean(0))
        } else {
            (mean(0), None)
        };
        self.report.points.push(EvalPoint {
            iteration: self.iteration,
            mean_return: result.mean_return,
            success_rate: result.success_rate,
            loss_low,
            loss_high,
        });
        if self.report.best_mean_return.is_none_or(|b| result.mean_return > b) {
            self.report.best_mean_return = Some(result.mean_return);
            self.report.best_iteration = Some(self.iteration);
            self.best = Some(self.agent.clone());
        }
        self.loss_sums.iter_mut().for_each(|s| *s = 0.0);
        self.loss_count = 0;
        Ok(())
    }

    /// Trains up to `iteration` (capped at the configured total).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.iteration < iteration.min(self.config.iterations) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    /// Resumable checkpoint of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_agent(&self.agent, self.env.name(), self.iteration, self.summary.clone());
        let mut rngs = vec![RngState::capture(&self.batch_rng)];
        rngs.extend(self.dropout_rngs.iter().map(RngState::capture));
        c.training = Some(Box::new(TrainingState {
            config: self.config.clone(),
            optimizers: self.optimizers.clone(),
            rngs,
            loss_sums: self.loss_sums.clone(),
            loss_count: self.loss_count,
            report: self.report.clone(),
            best: self.best.as_ref().map(|a| {
                a.networks()
                    .into_iter()
                    .map(|(r, n)| StoredModel::from_network(r, n))
                    .collect()
            }),
        }));
        c
    }

    /// The agent with the highest evaluated mean return, or the current one
    /// when no evaluation has happened.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let (agent, iteration) = match (&self.best, self.report.best_iteration) {
            (Some(a), Some(i)) => (a, i),
            _ => (&self.agent, self.iteration),
        };
        Checkpoint::from_agent(agent, self.env.name(), iteration, self.summary.clone())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            last: self.checkpoint(),
            best: self.best_checkpoint(),
            report: self.report,
        }
    }
}

/// Trains `config.policy` on `dataset`, updating every network each
/// iteration from the same batch.
pub fn train(dataset: &Dataset, config: TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, config)?;
    t.run()?;
    Ok(t.finish())
}

/// Trains the networks one after another, each over the full iteration
/// budget and the same batch stream, without evaluation. Because the
/// networks share no parameters this yields the same weights as
/// [`train`] does.
pub fn train_sequential(dataset: &Dataset, config: TrainConfig) -> Result<Agent> {
    let first = Trainer::new(dataset, config.clone())?;
    let n = first.agent.networks().len();
    let mut agent = first.agent.clone();
    for i in 0..n {
        let mut t = Trainer::new(dataset, config.clone())?;
        for _ in 0..config.iterations {
            t.step_networks(Some(i))?;
        }
        let trained = t.agent.networks()[i].1.clone();
        *agent.networks_mut()[i].1 = trained;
    }
    Ok(agent)
}

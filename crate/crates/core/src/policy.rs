//! The agents under study: the hierarchical pair (sub-goal mechanism and
//! goal-conditioned controller), the return-conditioned transformer baseline
//! and its ablations, and a behavior-cloning MLP.

use std::fmt;
use std::str::FromStr;

use diffcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, SubTrajectoryBatch};
use crate::error::{Error, Result};
use crate::model::{causal_forward, init_params, Bound, Layout, Modality, ModelConfig, ModelParams, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    Hdt,
    Dt,
    DtNoRtg,
    HdtPlusRtg,
    Bc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Hdt,
        PolicyKind::Dt,
        PolicyKind::DtNoRtg,
        PolicyKind::HdtPlusRtg,
        PolicyKind::Bc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Hdt => "hdt",
            PolicyKind::Dt => "dt",
            PolicyKind::DtNoRtg => "dt-no-rtg",
            PolicyKind::HdtPlusRtg => "hdt-plus-rtg",
            PolicyKind::Bc => "bc",
        }
    }

    pub fn needs_desired_return(self) -> bool {
        matches!(self, PolicyKind::Dt | PolicyKind::HdtPlusRtg)
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, PolicyKind::Hdt | PolicyKind::HdtPlusRtg)
    }

    /// Layouts of the transformers making up the agent, high level first.
    pub fn layouts(self) -> &'static [Layout] {
        match self {
            PolicyKind::Hdt => &[Layout::High, Layout::Low],
            PolicyKind::HdtPlusRtg => &[Layout::High, Layout::LowWithRtg],
            PolicyKind::Dt => &[Layout::Dt],
            PolicyKind::DtNoRtg => &[Layout::DtNoRtg],
            PolicyKind::Bc => &[],
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy kind `{s}`")))
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PolicyKind> for String {
    fn from(k: PolicyKind) -> String {
        k.name().to_string()
    }
}

/// Which part of an agent a network plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    High,
    Low,
    Dt,
    Bc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
}

/// Network configuration as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NetConfig {
    Transformer(ModelConfig),
    Mlp(MlpConfig),
}

impl NetConfig {
    pub fn state_dim(&self) -> usize {
        match self {
            NetConfig::Transformer(c) => c.state_dim,
            NetConfig::Mlp(c) => c.state_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            NetConfig::Transformer(c) => c.action_dim,
            NetConfig::Mlp(c) => c.action_dim,
        }
    }

    /// Steps of history the network consumes.
    pub fn context(&self) -> usize {
        match self {
            NetConfig::Transformer(c) => c.context_k,
            NetConfig::Mlp(_) => 1,
        }
    }

    fn predicts_subgoal(&self) -> bool {
        matches!(self, NetConfig::Transformer(c) if c.layout == Layout::High)
    }
}

/// A trainable network: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub params: ModelParams,
}

impl Network {
    pub fn transformer<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self {
            config: NetConfig::Transformer(config),
            params,
        })
    }

    /// Two fully connected layers with a tanh in between.
    pub fn mlp<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 || config.state_dim == 0 || config.action_dim == 0 {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        let dist = Normal::new(0.0, INIT_STD).unwrap();
        let mut w = |r: usize, c: usize| {
            Tensor::new([r, c], (0..r * c).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let tensors = vec![
            w(config.state_dim, config.hidden),
            Tensor::zeros([config.hidden]),
            w(config.hidden, config.action_dim),
            Tensor::zeros([config.action_dim]),
        ];
        let names = ["fc1.w", "fc1.b", "fc2.w", "fc2.b"].map(String::from).to_vec();
        Ok(Self {
            config: NetConfig::Mlp(config),
            params: ModelParams::from_parts(names, tensors)?,
        })
    }

    /// Per-step predictions, `(B * K, out)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        trainable: bool,
        batch: &SubTrajectoryBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Var)> {
        let bound = self.params.bind(g, trainable);
        let out = self.forward_bound(g, &bound, batch, rng)?;
        Ok((bound.vars, out))
    }

    /// [`Network::forward`] over parameters already placed in `g`.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &Bound<'_>,
        batch: &SubTrajectoryBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        Ok(match &self.config {
            NetConfig::Transformer(c) => causal_forward(g, bound, c, batch, rng)?.head,
            NetConfig::Mlp(c) => {
                if batch.state_dim != c.state_dim || batch.action_dim != c.action_dim {
                    return Err(Error::ConfigMismatch(format!(
                        "batch dims ({}, {}) but model expects ({}, {})",
                        batch.state_dim, batch.action_dim, c.state_dim, c.action_dim
                    )));
                }
                let x = g.constant(Tensor::new([batch.steps(), c.state_dim], batch.states.clone())?);
                let h = g.matmul(x, bound.var("fc1.w"))?;
                let h = g.add(h, bound.var("fc1.b"))?;
                let h = g.tanh(h)?;
                let y = g.matmul(h, bound.var("fc2.w"))?;
                g.add(y, bound.var("fc2.b"))?
            }
        })
    }

    /// Masked MSE over parameters already placed in `g`.
    pub fn loss_bound(
        &self,
        g: &mut Graph,
        bound: &Bound<'_>,
        batch: &SubTrajectoryBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let pred = self.forward_bound(g, bound, batch, rng)?;
        let target = self.target(batch)?;
        Ok(g.mse(pred, &target, &batch.mask)?)
    }

    /// Regression targets: normalized sub-goals for the high level, actions
    /// otherwise.
    fn target(&self, batch: &SubTrajectoryBatch) -> Result<Tensor> {
        Ok(if self.config.predicts_subgoal() {
            Tensor::new([batch.steps(), batch.state_dim], batch.subgoals.clone())?
        } else {
            Tensor::new([batch.steps(), batch.action_dim], batch.actions.clone())?
        })
    }

    /// Masked mean squared error; dropout is active when `rng` is given.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        trainable: bool,
        batch: &SubTrajectoryBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Var)> {
        let bound = self.params.bind(g, trainable);
        let loss = self.loss_bound(g, &bound, batch, rng)?;
        Ok((bound.vars, loss))
    }

    /// Evaluation-mode loss.
    pub fn loss(&self, batch: &SubTrajectoryBatch) -> Result<f64> {
        let mut g = Graph::new();
        let (_, l) = self.loss_graph(&mut g, false, batch, None)?;
        Ok(g.value(l).item())
    }

    /// Training-mode loss and one gradient per parameter tensor.
    pub fn loss_and_grads(&self, batch: &SubTrajectoryBatch, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (vars, l) = self.loss_graph(&mut g, true, batch, rng)?;
        let loss = g.value(l).item();
        if !loss.is_finite() {
            return Err(Error::Tensor(diffcore::TensorError::NonFinite { op: "loss" }));
        }
        let grads = g.backward(l)?;
        Ok((loss, vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect()))
    }

    /// Head output at the last step of a single-row window.
    fn predict_last(&self, batch: &SubTrajectoryBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (_, out) = self.forward(&mut g, false, batch, None)?;
        let v = g.value(out);
        let w = v.last_dim();
        Ok(v.data()[v.numel() - w..].to_vec())
    }
}

/// Past observations of an episode. `subgoals`, `actions` and `rtgs` may
/// lag `states` by one entry while the current decision is being made.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub states: Vec<Vec<f64>>,
    pub subgoals: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rtgs: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Builds a single-row batch from the last `k` steps. Channels named in
    /// `required` must cover every step; `current` may be missing at the
    /// newest step and is then zero-filled. Unused channels are zero.
    fn window(
        &self,
        k: usize,
        norm: &Normalizer,
        action_dim: usize,
        required: &[Modality],
        current: Option<Modality>,
    ) -> Result<SubTrajectoryBatch> {
        if self.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let n = self.len();
        let start = n.saturating_sub(k);
        let context = n - start;
        let ds = norm.state_mean.len();
        let covered = |m: Modality, len: usize| {
            let need = if current == Some(m) { n - 1 } else { n };
            if len < need {
                Err(match m {
                    Modality::Rtg => Error::MissingDesiredReturn("returns-to-go history is incomplete".into()),
                    Modality::Subgoal => Error::MissingChannel("subgoal"),
                    Modality::Action => Error::MissingChannel("action"),
                    Modality::State => Error::MissingChannel("state"),
                })
            } else {
                Ok(())
            }
        };
        for &m in required {
            match m {
                Modality::Rtg => covered(m, self.rtgs.len())?,
                Modality::Subgoal => covered(m, self.subgoals.len())?,
                Modality::Action => covered(m, self.actions.len())?,
                Modality::State => {}
            }
        }
        let mut b = SubTrajectoryBatch {
            batch_size: 1,
            context,
            state_dim: ds,
            action_dim,
            states: Vec::with_capacity(context * ds),
            actions: vec![0.0; context * action_dim],
            subgoals: vec![0.0; context * ds],
            returns_to_go: vec![0.0; context],
            timesteps: self.timesteps[start..].to_vec(),
            mask: vec![1.0; context],
            origins: vec![(0, n - 1)],
        };
        for (p, t) in (start..n).enumerate() {
            if self.states[t].len() != ds {
                return Err(Error::ConfigMismatch(format!(
                    "state of width {} but normalizer has {ds}",
                    self.states[t].len()
                )));
            }
            b.states.extend(norm.normalize_state(&self.states[t]));
            if required.contains(&Modality::Action) {
                if let Some(a) = self.actions.get(t) {
                    b.actions[p * action_dim..(p + 1) * action_dim].copy_from_slice(a);
                }
            }
            if required.contains(&Modality::Subgoal) {
                if let Some(sg) = self.subgoals.get(t) {
                    b.subgoals[p * ds..(p + 1) * ds].copy_from_slice(&norm.normalize_state(sg));
                }
            }
            if required.contains(&Modality::Rtg) {
                if let Some(r) = self.rtgs.get(t) {
                    b.returns_to_go[p] = norm.scale_rtg(*r);
                }
            }
        }
        Ok(b)
    }
}

/// The sub-goal predictor, layout `(s, sg)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HighLevelMechanism {
    pub net: Network,
}

/// The goal-conditioned action predictor, layout `(sg, s, a)`, or
/// `(rtg, sg, s, a)` for the returns-augmented ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelController {
    pub net: Network,
}

/// The return-conditioned baseline, layout `(rtg, s, a)` or `(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DtBaseline {
    pub net: Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcBaseline {
    pub net: Network,
}

fn layout_of(net: &Network) -> Option<Layout> {
    match &net.config {
        NetConfig::Transformer(c) => Some(c.layout),
        NetConfig::Mlp(_) => None,
    }
}

/// `L_theta`: masked MSE between predicted and demonstrated actions.
pub fn loss_low(controller: &LowLevelController, batch: &SubTrajectoryBatch) -> Result<f64> {
    controller.net.loss(batch)
}

/// `L_phi`: masked MSE between predicted and labeled (normalized) sub-goals.
pub fn loss_high(mechanism: &HighLevelMechanism, batch: &SubTrajectoryBatch) -> Result<f64> {
    mechanism.net.loss(batch)
}

/// Next sub-goal in raw state units.
pub fn predict_subgoal(mechanism: &HighLevelMechanism, norm: &Normalizer, history: &History) -> Result<Vec<f64>> {
    let k = mechanism.net.config.context();
    let da = mechanism.net.config.action_dim();
    let batch = history.window(k, norm, da, &[Modality::State, Modality::Subgoal], Some(Modality::Subgoal))?;
    let out = mechanism.net.predict_last(&batch)?;
    Ok(norm.denormalize_state(&out))
}

/// Action vector for the newest state of `history`.
pub fn predict_action(policy: ActionModel<'_>, norm: &Normalizer, history: &History) -> Result<Vec<f64>> {
    let net = policy.network();
    let k = net.config.context();
    let da = net.config.action_dim();
    let required: &[Modality] = match layout_of(net) {
        Some(l) => l.modalities(),
        None => &[Modality::State],
    };
    let batch = if layout_of(net).is_none() {
        let last = History {
            states: vec![history.states.last().ok_or(Error::EmptyHistory)?.clone()],
            timesteps: vec![*history.timesteps.last().unwrap()],
            ..History::default()
        };
        last.window(1, norm, da, required, None)?
    } else {
        history.window(k, norm, da, required, Some(Modality::Action))?
    };
    net.predict_last(&batch)
}

/// Any network that predicts actions.
#[derive(Clone, Copy)]
pub enum ActionModel<'a> {
    Low(&'a LowLevelController),
    Dt(&'a DtBaseline),
    Bc(&'a BcBaseline),
}

impl ActionModel<'_> {
    fn network(&self) -> &Network {
        match self {
            ActionModel::Low(c) => &c.net,
            ActionModel::Dt(d) => &d.net,
            ActionModel::Bc(b) => &b.net,
        }
    }
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The networks of one agent.
#[derive(Clone, Debug, PartialEq)]
pub enum AgentNets {
    Hierarchical {
        high: HighLevelMechanism,
        low: LowLevelController,
    },
    Dt(DtBaseline),
    Bc(BcBaseline),
}

/// A complete policy: networks plus the dataset statistics they were trained
/// with.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub kind: PolicyKind,
    pub normalizer: Normalizer,
    pub nets: AgentNets,
}

/// Architecture choices for building a fresh agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub kind: PolicyKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_timestep: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_k: usize,
    pub dropout: f64,
    pub bc_hidden: usize,
}

impl Agent {
    /// Fresh networks. Each network draws its initial weights from its own
    /// generator so that adding a network never shifts another's weights.
    pub fn init(spec: &AgentSpec, normalizer: Normalizer, seed: u64) -> Result<Self> {
        let transformer = |layout: Layout, stream: u64| {
            let config = ModelConfig {
                embed_dim: spec.embed_dim,
                n_layers: spec.n_layers,
                n_heads: spec.n_heads,
                context_k: spec.context_k,
                layout,
                max_timestep: spec.max_timestep,
                state_dim: spec.state_dim,
                action_dim: spec.action_dim,
                dropout: spec.dropout,
            };
            Network::transformer(config, &mut crate::seed::rng(seed, stream))
        };
        let nets = match spec.kind {
            PolicyKind::Hdt | PolicyKind::HdtPlusRtg => {
                let low_layout = spec.kind.layouts()[1];
                AgentNets::Hierarchical {
                    high: HighLevelMechanism {
                        net: transformer(Layout::High, 101)?,
                    },
                    low: LowLevelController {
                        net: transformer(low_layout, 102)?,
                    },
                }
            }
            PolicyKind::Dt | PolicyKind::DtNoRtg => AgentNets::Dt(DtBaseline {
                net: transformer(spec.kind.layouts()[0], 103)?,
            }),
            PolicyKind::Bc => AgentNets::Bc(BcBaseline {
                net: Network::mlp(
                    MlpConfig {
                        state_dim: spec.state_dim,
                        action_dim: spec.action_dim,
                        hidden: spec.bc_hidden,
                    },
                    &mut crate::seed::rng(seed, 104),
                )?,
            }),
        };
        Ok(Self { kind: spec.kind, normalizer, nets })
    }

    /// Reassembles an agent from role-tagged networks.
    pub fn from_networks(kind: PolicyKind, normalizer: Normalizer, mut nets: Vec<(Role, Network)>) -> Result<Self> {
        let mut take = |role: Role| {
            let i = nets
                .iter()
                .position(|(r, _)| *r == role)
                .ok_or_else(|| Error::Checkpoint(format!("missing {role:?} network for {kind}")))?;
            Ok::<_, Error>(nets.remove(i).1)
        };
        let nets = match kind {
            PolicyKind::Hdt | PolicyKind::HdtPlusRtg => AgentNets::Hierarchical {
                high: HighLevelMechanism { net: take(Role::High)? },
                low: LowLevelController { net: take(Role::Low)? },
            },
            PolicyKind::Dt | PolicyKind::DtNoRtg => AgentNets::Dt(DtBaseline { net: take(Role::Dt)? }),
            PolicyKind::Bc => AgentNets::Bc(BcBaseline { net: take(Role::Bc)? }),
        };
        let agent = Self { kind, normalizer, nets };
        agent.check_layouts()?;
        Ok(agent)
    }

    fn check_layouts(&self) -> Result<()> {
        let found: Vec<Layout> = self.networks().iter().filter_map(|(_, n)| layout_of(n)).collect();
        if found != self.kind.layouts() {
            return Err(Error::Checkpoint(format!(
                "{} agent with layouts {found:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn networks(&self) -> Vec<(Role, &Network)> {
        match &self.nets {
            AgentNets::Hierarchical { high, low } => vec![(Role::High, &high.net), (Role::Low, &low.net)],
            AgentNets::Dt(d) => vec![(Role::Dt, &d.net)],
            AgentNets::Bc(b) => vec![(Role::Bc, &b.net)],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<(Role, &mut Network)> {
        match &mut self.nets {
            AgentNets::Hierarchical { high, low } => vec![(Role::High, &mut high.net), (Role::Low, &mut low.net)],
            AgentNets::Dt(d) => vec![(Role::Dt, &mut d.net)],
            AgentNets::Bc(b) => vec![(Role::Bc, &mut b.net)],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.networks()[0].1.config.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.networks()[0].1.config.action_dim()
    }

    /// Longest history any network of the agent reads.
    pub fn context(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.config.context()).max().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.params.numel()).sum()
    }
}

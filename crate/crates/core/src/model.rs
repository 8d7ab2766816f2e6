//! GPT-style causal transformer over interleaved per-step tokens.
//!
//! Every step of a window contributes one token per modality of the layout.
//! Each token is a linear embedding of its modality plus a learned embedding
//! of the step's absolute timestep. Predictions are read from the state
//! token of each step.

use std::collections::HashMap;

use diffcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SubTrajectoryBatch;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Rtg,
    Subgoal,
    State,
    Action,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Rtg => "rtg",
            Modality::Subgoal => "subgoal",
            Modality::State => "state",
            Modality::Action => "action",
        }
    }
}

/// Token order within one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `(s, sg)`, predicts the sub-goal.
    High,
    /// `(sg, s, a)`, predicts the action.
    Low,
    /// `(rtg, s, a)`.
    Dt,
    /// `(s, a)`.
    DtNoRtg,
    /// `(rtg, sg, s, a)`.
    LowWithRtg,
}

impl Layout {
    pub fn modalities(self) -> &'static [Modality] {
        use Modality::*;
        match self {
            Layout::High => &[State, Subgoal],
            Layout::Low => &[Subgoal, State, Action],
            Layout::Dt => &[Rtg, State, Action],
            Layout::DtNoRtg => &[State, Action],
            Layout::LowWithRtg => &[Rtg, Subgoal, State, Action],
        }
    }

    pub fn tokens_per_step(self) -> usize {
        self.modalities().len()
    }

    /// Offset of the state token within a step.
    pub fn read_offset(self) -> usize {
        self.modalities().iter().position(|m| *m == Modality::State).unwrap()
    }

    /// The modality predicted at the read position.
    pub fn target(self) -> Modality {
        match self {
            Layout::High => Modality::Subgoal,
            _ => Modality::Action,
        }
    }

    pub fn uses(self, m: Modality) -> bool {
        self.modalities().contains(&m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context length in timesteps.
    pub context_k: usize,
    pub layout: Layout,
    /// Largest timestep with its own positional embedding; later timesteps
    /// share the last row.
    pub max_timestep: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(layout: Layout, state_dim: usize, action_dim: usize, max_timestep: usize) -> Self {
        Self {
            embed_dim: 128,
            n_layers: 3,
            n_heads: 1,
            context_k: 20,
            layout,
            max_timestep,
            state_dim,
            action_dim,
            dropout: 0.1,
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        self.layout.tokens_per_step()
    }

    pub fn max_tokens(&self) -> usize {
        self.context_k * self.tokens_per_step()
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Rtg => 1,
            Modality::Subgoal | Modality::State => self.state_dim,
            Modality::Action => self.action_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.width(self.layout.target())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.context_k == 0 {
            return bad("context_k must be at least 1".into());
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return bad("state_dim and action_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(Error::Checkpoint("duplicate parameter name".into()));
        }
        Ok(Self { names, tensors, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Wraps handles created elsewhere, one per tensor in order.
    pub fn bound_to(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} handles for {} parameter tensors",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(Bound { params: self, vars })
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// Graph handles for a parameter set.
pub struct Bound<'a> {
    params: &'a ModelParams,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }
}

struct Builder<'r, R: Rng + ?Sized> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize]) {
        let dist = Normal::new(0.0, INIT_STD).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).unwrap());
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.normal(format!("{name}.w"), &[fan_in, fan_out]);
        self.push(format!("{name}.b"), Tensor::zeros([fan_out]));
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.push(format!("{name}.g"), Tensor::filled([dim], 1.0));
        self.push(format!("{name}.b"), Tensor::zeros([dim]));
    }
}

/// Weights drawn from `N(0, 0.02^2)`, biases zero, layer-norm gains one.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let e = config.embed_dim;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    for &m in config.layout.modalities() {
        b.linear(&format!("embed.{}", m.name()), config.width(m), e);
    }
    b.normal("embed.timestep".into(), &[config.max_timestep + 1, e]);
    b.layer_norm("embed.ln", e);
    for l in 0..config.n_layers {
        b.layer_norm(&format!("block{l}.ln1"), e);
        b.linear(&format!("block{l}.attn.qkv"), e, 3 * e);
        b.linear(&format!("block{l}.attn.proj"), e, e);
        b.layer_norm(&format!("block{l}.ln2"), e);
        b.linear(&format!("block{l}.mlp.fc"), e, 4 * e);
        b.linear(&format!("block{l}.mlp.proj"), 4 * e, e);
    }
    b.layer_norm("ln_f", e);
    b.linear("head", e, config.output_dim());
    ModelParams::from_parts(b.names, b.tensors)
}

/// Rows of the attention mask for `rows` sequences of `t` tokens. Position
/// `q` is hidden from `p` when it lies in the future or is padding; a token
/// always sees itself so padded rows stay finite.
pub fn attention_mask(token_mask: &[f64], rows: usize, t: usize) -> Vec<bool> {
    let mut mask = vec![false; rows * t * t];
    for r in 0..rows {
        let valid = &token_mask[r * t..(r + 1) * t];
        for p in 0..t {
            for q in 0..t {
                mask[(r * t + p) * t + q] = q > p || (q != p && valid[q] <= 0.0);
            }
        }
    }
    mask
}

fn modality_input(batch: &SubTrajectoryBatch, m: Modality) -> (&[f64], usize) {
    match m {
        Modality::Rtg => (&batch.returns_to_go, 1),
        Modality::Subgoal => (&batch.subgoals, batch.state_dim),
        Modality::State => (&batch.states, batch.state_dim),
        Modality::Action => (&batch.actions, batch.action_dim),
    }
}

/// Embeds and interleaves the batch into `(B, K * tokens_per_step, E)`
/// tokens. The returned token mask repeats each step's validity for all of
/// its tokens.
pub fn interleave_tokens(
    g: &mut Graph,
    params: &Bound<'_>,
    config: &ModelConfig,
    batch: &SubTrajectoryBatch,
) -> Result<(Var, Vec<f64>)> {
    if batch.state_dim != config.state_dim || batch.action_dim != config.action_dim {
        return Err(Error::ConfigMismatch(format!(
            "batch dims ({}, {}) but model expects ({}, {})",
            batch.state_dim, batch.action_dim, config.state_dim, config.action_dim
        )));
    }
    if batch.context > config.context_k {
        return Err(Error::ConfigMismatch(format!(
            "window of {} steps exceeds context {}",
            batch.context, config.context_k
        )));
    }
    let steps = batch.steps();
    let e = config.embed_dim;
    let timesteps: Vec<usize> = batch.timesteps.iter().map(|&t| t.min(config.max_timestep)).collect();
    let pos = g.embedding(params.var("embed.timestep"), &timesteps)?;
    let mut parts = Vec::new();
    for &m in config.layout.modalities() {
        let (data, w) = modality_input(batch, m);
        let x = g.constant(Tensor::new([steps, w], data.to_vec())?);
        let name = format!("embed.{}", m.name());
        let h = g.matmul(x, params.var(&format!("{name}.w")))?;
        let h = g.add(h, params.var(&format!("{name}.b")))?;
        parts.push(g.add(h, pos)?);
    }
    let tps = config.tokens_per_step();
    let joined = g.concat(&parts)?;
    let tokens = g.reshape(joined, &[batch.batch_size, batch.context * tps, e])?;
    let token_mask = batch.mask.iter().flat_map(|&m| std::iter::repeat_n(m, tps)).collect();
    Ok((tokens, token_mask))
}

pub struct ForwardOutput {
    /// Final hidden states, `(B, T, E)`.
    pub hidden: Var,
    /// Head output at every step's read position, `(B * K, output_dim)`.
    pub head: Var,
}

/// Runs the transformer. Dropout is applied only when `rng` is given.
pub fn causal_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    params: &Bound<'_>,
    config: &ModelConfig,
    batch: &SubTrajectoryBatch,
    mut rng: Option<&mut R>,
) -> Result<ForwardOutput> {
    let (tokens, token_mask) = interleave_tokens(g, params, config, batch)?;
    let (rows, e, h) = (batch.batch_size, config.embed_dim, config.n_heads);
    let t = batch.context * config.tokens_per_step();
    let hd = e / h;
    let mask = attention_mask(&token_mask, rows, t);
    let p = if rng.is_some() { config.dropout } else { 0.0 };

    let mut x = layer_norm(g, params, "embed.ln", tokens)?;
    if let Some(r) = rng.as_deref_mut() {
        x = g.dropout(x, p, r)?;
    }
    for l in 0..config.n_layers {
        let n = layer_norm(g, params, &format!("block{l}.ln1"), x)?;
        let qkv = linear(g, params, &format!("block{l}.attn.qkv"), n)?;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let q = g.slice(qkv, i * hd, hd)?;
            let k = g.slice(qkv, e + i * hd, hd)?;
            let v = g.slice(qkv, 2 * e + i * hd, hd)?;
            let s = g.bmm(q, k, true)?;
            let s = g.scale(s, 1.0 / (hd as f64).sqrt())?;
            let s = g.masked_fill(s, &mask)?;
            let mut a = g.softmax(s)?;
            if let Some(r) = rng.as_deref_mut() {
                a = g.dropout(a, p, r)?;
            }
            heads.push(g.bmm(a, v, false)?);
        }
        let att = if h == 1 { heads[0] } else { g.concat(&heads)? };
        let mut y = linear(g, params, &format!("block{l}.attn.proj"), att)?;
        if let Some(r) = rng.as_deref_mut() {
            y = g.dropout(y, p, r)?;
        }
        x = g.add(x, y)?;

        let n = layer_norm(g, params, &format!("block{l}.ln2"), x)?;
        let f = linear(g, params, &format!("block{l}.mlp.fc"), n)?;
        let f = g.gelu(f)?;
        let mut y = linear(g, params, &format!("block{l}.mlp.proj"), f)?;
        if let Some(r) = rng.as_deref_mut() {
            y = g.dropout(y, p, r)?;
        }
        x = g.add(x, y)?;
    }
    let hidden = layer_norm(g, params, "ln_f", x)?;
    let tps = config.tokens_per_step();
    let per_step = g.reshape(hidden, &[rows * batch.context, tps * e])?;
    let read = g.slice(per_step, config.layout.read_offset() * e, e)?;
    let head = linear(g, params, "head", read)?;
    Ok(ForwardOutput { hidden, head })
}

fn linear(g: &mut Graph, params: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, params.var(&format!("{name}.w")))?;
    Ok(g.add(y, params.var(&format!("{name}.b")))?)
}

fn layer_norm(g: &mut Graph, params: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    Ok(g.layer_norm(x, params.var(&format!("{name}.g")), params.var(&format!("{name}.b")))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layouts() {
        assert_eq!(Layout::Low.read_offset(), 1);
        assert_eq!(Layout::High.read_offset(), 0);
        assert_eq!(Layout::Dt.tokens_per_step(), 3);
        assert_eq!(Layout::High.target(), Modality::Subgoal);
        assert!(!Layout::Low.uses(Modality::Rtg));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(Layout::Low, 2, 4, 10);
        c.embed_dim = 10;
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        assert!(c.validate().is_ok());
        c.context_k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let c = ModelConfig::new(Layout::High, 2, 4, 10);
        let a = init_params(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = init_params(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn mask_keeps_diagonal() {
        let m = attention_mask(&[0.0, 1.0, 1.0], 1, 3);
        assert_eq!(m, vec![false, true, true, true, false, true, true, false, false]);
    }
}

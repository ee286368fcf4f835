//! Desk-scale architectures for exercising the adapters: an MLP classifier
//! and a minimal pre-norm transformer stack (token reshaping -> {attention,
//! FFN with grouped rational activation} x L -> mean-pooled head).
//!
//! Parameters live inline in the layer structs. A single canonical traversal
//! ([`Model::for_each_param`]) drives the optimizer, counting, checkpointing
//! and freezing; the tape forward leases every parameter as a leaf and
//! reports `(path, Var)` bindings under the same names.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::LoraDelta;
use crate::nora::{init_nora, AdapterError, NoraConfig, NoraMode};
use crate::rational::{GroupedRationalLayer, RationalCoeffs, RationalError};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::util::rng::{self, SeededRng};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown adaptation site: {0}")]
    UnknownSite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rational(#[from] RationalError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Mlp,
    MiniTransformer,
}

/// Activation choice for the hidden layers / FFN blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActivationCfg {
    FixedGelu,
    GroupedRational { groups: usize, m: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden layers (MLP) or transformer blocks.
    pub depth: usize,
    /// Channel width C.
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub activation: ActivationCfg,
    pub head_classes: usize,
    pub in_features: usize,
    /// Transformer only: input reshaped to `tokens x (in_features / tokens)`.
    pub tokens: usize,
    /// Layer-norm affine parameters stay frozen under adapter plans unless
    /// this is set.
    #[serde(default)]
    pub layer_norm_trainable: bool,
    pub seed: u64,
}

impl ModelConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.head_classes == 0 || self.in_features == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads {} must divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if let ActivationCfg::GroupedRational { groups, .. } = &self.activation {
            if *groups == 0 || self.hidden % groups != 0 {
                return Err(ModelError::Config(format!(
                    "groups {groups} must divide hidden {}",
                    self.hidden
                )));
            }
        }
        if self.arch == Arch::MiniTransformer {
            if self.tokens == 0 || self.in_features % self.tokens != 0 {
                return Err(ModelError::Config(format!(
                    "tokens {} must divide in_features {}",
                    self.tokens, self.in_features
                )));
            }
            if self.ffn_mult == 0 {
                return Err(ModelError::Config("ffn_mult must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    w_trainable: bool,
    b_trainable: bool,
    lora: Option<LoraDelta>,
}

struct LeasedLinear {
    w: Var,
    b: Var,
    lora: Option<(Var, Var, f64)>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            w: (0..in_dim * out_dim).map(|_| rng::normal(rng, 0.0, std)).collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
            w_trainable: true,
            b_trainable: true,
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.w
    }

    pub fn lora(&self) -> Option<&LoraDelta> {
        self.lora.as_ref()
    }

    fn set_trainable(&mut self, flag: bool) {
        self.w_trainable = flag;
        self.b_trainable = flag;
    }

    fn lease(
        &self,
        tape: &mut Tape,
        prefix: &str,
        pairs: &mut Vec<(String, Var)>,
    ) -> Result<LeasedLinear, TensorError> {
        let w = tape.input(
            &Tensor::new(vec![self.in_dim, self.out_dim], self.w.clone())?
                .requires_grad(self.w_trainable),
        );
        let b = tape.input(
            &Tensor::new(vec![self.out_dim], self.b.clone())?.requires_grad(self.b_trainable),
        );
        pairs.push((format!("{prefix}.w"), w));
        pairs.push((format!("{prefix}.b"), b));
        let lora = match &self.lora {
            None => None,
            Some(delta) => {
                let (i, o) = delta.dims();
                let down = tape.input(
                    &Tensor::new(vec![i, delta.rank()], delta.down().to_vec())?
                        .requires_grad(true),
                );
                let up = tape.input(
                    &Tensor::new(vec![delta.rank(), o], delta.up().to_vec())?
                        .requires_grad(true),
                );
                pairs.push((format!("{prefix}.lora_down"), down));
                pairs.push((format!("{prefix}.lora_up"), up));
                Some((down, up, delta.scaling()))
            }
        };
        Ok(LeasedLinear { w, b, lora })
    }

    fn apply(tape: &mut Tape, leased: &LeasedLinear, x: Var) -> Result<Var, TensorError> {
        let mut y = tape.matmul(x, leased.w)?;
        if let Some((down, up, scaling)) = &leased.lora {
            let mid = tape.matmul(x, *down)?;
            let outer = tape.matmul(mid, *up)?;
            let scaled = tape.scale(outer, *scaling)?;
            y = tape.add(y, scaled)?;
        }
        tape.add(y, leased.b)
    }

    /// Plain forward `x w + b` (+ low-rank path) without a tape.
    pub fn apply_plain(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = x.shape()[0];
        let update = self.lora.as_ref().map(LoraDelta::weight_update);
        let mut out = vec![0.0; rows * self.out_dim];
        for r in 0..rows {
            for i in 0..self.in_dim {
                let xv = x.data()[r * self.in_dim + i];
                if xv == 0.0 {
                    continue;
                }
                for j in 0..self.out_dim {
                    let mut w = self.w[i * self.out_dim + j];
                    if let Some(u) = &update {
                        w += u[i * self.out_dim + j];
                    }
                    out[r * self.out_dim + j] += xv * w;
                }
            }
        }
        for r in 0..rows {
            for j in 0..self.out_dim {
                out[r * self.out_dim + j] += self.b[j];
            }
        }
        Tensor::new(vec![rows, self.out_dim], out)
    }

    fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        let (i, o) = (self.in_dim, self.out_dim);
        f(
            &format!("{prefix}.w"),
            &mut self.w,
            vec![i, o],
            self.w_trainable,
            true,
        );
        f(
            &format!("{prefix}.b"),
            &mut self.b,
            vec![o],
            self.b_trainable,
            false,
        );
        if let Some(lora) = self.lora.as_mut() {
            lora.for_each_param(prefix, f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    trainable: bool,
}

struct LeasedNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            trainable: true,
        }
    }

    fn lease(
        &self,
        tape: &mut Tape,
        prefix: &str,
        pairs: &mut Vec<(String, Var)>,
    ) -> Result<LeasedNorm, TensorError> {
        let dim = self.gamma.len();
        let gamma = tape.input(
            &Tensor::new(vec![dim], self.gamma.clone())?.requires_grad(self.trainable),
        );
        let beta = tape.input(
            &Tensor::new(vec![dim], self.beta.clone())?.requires_grad(self.trainable),
        );
        pairs.push((format!("{prefix}.gamma"), gamma));
        pairs.push((format!("{prefix}.beta"), beta));
        Ok(LeasedNorm { gamma, beta })
    }

    fn apply(tape: &mut Tape, leased: &LeasedNorm, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, leased.gamma, leased.beta, LAYER_NORM_EPS)
    }

    fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        let dim = self.gamma.len();
        f(
            &format!("{prefix}.gamma"),
            &mut self.gamma,
            vec![dim],
            self.trainable,
            false,
        );
        f(
            &format!("{prefix}.beta"),
            &mut self.beta,
            vec![dim],
            self.trainable,
            false,
        );
    }
}

/// Hidden-layer nonlinearity: fixed GELU or a grouped learnable rational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Rational(GroupedRationalLayer),
}

enum LeasedActivation {
    Gelu,
    Rational { num: Vec<Var>, den: Vec<Var> },
}

impl Activation {
    fn lease(
        &self,
        tape: &mut Tape,
        prefix: &str,
        pairs: &mut Vec<(String, Var)>,
    ) -> Result<LeasedActivation, TensorError> {
        match self {
            Activation::Gelu => Ok(LeasedActivation::Gelu),
            Activation::Rational(layer) => {
                let (num, den) = layer.lease_on_tape(tape, prefix, pairs)?;
                Ok(LeasedActivation::Rational { num, den })
            }
        }
    }

    fn apply(tape: &mut Tape, leased: &LeasedActivation, x: Var) -> Result<Var, TensorError> {
        match leased {
            LeasedActivation::Gelu => tape.gelu(x),
            LeasedActivation::Rational { num, den } => {
                tape.grouped_rational(x, num.clone(), den.clone())
            }
        }
    }

    pub fn apply_plain(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Activation::Gelu => {
                let data = x.data().iter().map(|&v| crate::util::special::gelu(v)).collect();
                Ok(Tensor::new(x.shape().to_vec(), data)?)
            }
            Activation::Rational(layer) => Ok(layer.eval(x)?),
        }
    }

    pub fn rational(&self) -> Option<&GroupedRationalLayer> {
        match self {
            Activation::Gelu => None,
            Activation::Rational(layer) => Some(layer),
        }
    }

    pub fn rational_mut(&mut self) -> Option<&mut GroupedRationalLayer> {
        match self {
            Activation::Gelu => None,
            Activation::Rational(layer) => Some(layer),
        }
    }

    fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        if let Activation::Rational(layer) = self {
            layer.for_each_param(prefix, f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn_up: Linear,
    pub act: Activation,
    pub ffn_down: Linear,
}

struct LeasedBlock {
    ln1: LeasedNorm,
    wq: LeasedLinear,
    wk: LeasedLinear,
    wv: LeasedLinear,
    wo: LeasedLinear,
    ln2: LeasedNorm,
    ffn_up: LeasedLinear,
    act: LeasedActivation,
    ffn_down: LeasedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelKind {
    Mlp {
        hidden: Vec<(Linear, Activation)>,
        head: Linear,
    },
    Transformer {
        embed: Linear,
        blocks: Vec<TransformerBlock>,
        head: Linear,
    },
}

/// A built model: config plus parameterized layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    config: ModelConfig,
    kind: ModelKind,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// `(parameter path, leaf Var)` for every leased parameter, in traversal
    /// order.
    pub bindings: Vec<(String, Var)>,
    /// Activation-layer outputs: `(site path, one Var per sample batch)`.
    pub activation_outputs: Vec<(String, Vec<Var>)>,
}

impl Model {
    /// Deterministic build: same config (and seed) gives bit-identical
    /// parameters.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let kind = match config.arch {
            Arch::Mlp => {
                let mut hidden = Vec::with_capacity(config.depth);
                let mut in_dim = config.in_features;
                for layer in 0..config.depth {
                    let mut stream = rng::substream(config.seed, "mlp-layer", layer as u64);
                    let linear = Linear::init(in_dim, config.hidden, &mut stream);
                    let act = make_activation(config, config.hidden, layer)?;
                    hidden.push((linear, act));
                    in_dim = config.hidden;
                }
                let mut head_stream = rng::substream(config.seed, "head", 0);
                let head = Linear::init(in_dim, config.head_classes, &mut head_stream);
                ModelKind::Mlp { hidden, head }
            }
            Arch::MiniTransformer => {
                let token_dim = config.in_features / config.tokens;
                let mut embed_stream = rng::substream(config.seed, "embed", 0);
                let embed = Linear::init(token_dim, config.hidden, &mut embed_stream);
                let mut blocks = Vec::with_capacity(config.depth);
                for layer in 0..config.depth {
                    let mut stream = rng::substream(config.seed, "block", layer as u64);
                    let c = config.hidden;
                    blocks.push(TransformerBlock {
                        ln1: LayerNorm::init(c),
                        wq: Linear::init(c, c, &mut stream),
                        wk: Linear::init(c, c, &mut stream),
                        wv: Linear::init(c, c, &mut stream),
                        wo: Linear::init(c, c, &mut stream),
                        ln2: LayerNorm::init(c),
                        ffn_up: Linear::init(c, config.ffn_width(), &mut stream),
                        act: make_activation(config, config.ffn_width(), layer)?,
                        ffn_down: Linear::init(config.ffn_width(), c, &mut stream),
                    });
                }
                let mut head_stream = rng::substream(config.seed, "head", 0);
                let head = Linear::init(config.hidden, config.head_classes, &mut head_stream);
                ModelKind::Transformer {
                    embed,
                    blocks,
                    head,
                }
            }
        };
        Ok(Model {
            config: config.clone(),
            kind,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    /// Replaces every activation layer with a grouped rational carrying
    /// `coeffs` in all groups (shapes elsewhere untouched), or with fixed
    /// GELU when `coeffs` is `None`.
    pub fn swap_activation(
        &self,
        groups: usize,
        coeffs: Option<&RationalCoeffs>,
    ) -> Result<Model, ModelError> {
        let mut out = self.clone();
        let width = match out.config.arch {
            Arch::Mlp => out.config.hidden,
            Arch::MiniTransformer => out.config.ffn_width(),
        };
        match coeffs {
            Some(c) => {
                out.config.activation = ActivationCfg::GroupedRational {
                    groups,
                    m: c.degrees().0,
                    n: c.degrees().1,
                };
                out.for_each_activation(|act| {
                    *act = Activation::Rational(GroupedRationalLayer::new_shared(
                        c.clone(),
                        groups,
                        width,
                    )?);
                    Ok(())
                })?;
            }
            None => {
                out.config.activation = ActivationCfg::FixedGelu;
                out.for_each_activation(|act| {
                    *act = Activation::Gelu;
                    Ok(())
                })?;
            }
        }
        Ok(out)
    }

    /// Expands every grouped rational activation to `new_groups` by
    /// replication. The computed function is unchanged; trainable counts
    /// scale with the group multiplier.
    pub fn expand_groups(&self, new_groups: usize) -> Result<Model, ModelError> {
        let mut out = self.clone();
        if let ActivationCfg::GroupedRational { groups, .. } = &mut out.config.activation {
            *groups = new_groups;
        }
        out.for_each_activation(|act| match act {
            Activation::Gelu => Err(ModelError::UnknownSite(
                "cannot expand groups of a fixed GELU activation".into(),
            )),
            Activation::Rational(layer) => {
                *layer = crate::nora::expand_groups(layer, new_groups)?;
                Ok(())
            }
        })?;
        Ok(out)
    }

    fn for_each_activation(
        &mut self,
        mut f: impl FnMut(&mut Activation) -> Result<(), ModelError>,
    ) -> Result<(), ModelError> {
        match &mut self.kind {
            ModelKind::Mlp { hidden, .. } => {
                for (_, act) in hidden.iter_mut() {
                    f(act)?;
                }
            }
            ModelKind::Transformer { blocks, .. } => {
                for block in blocks.iter_mut() {
                    f(&mut block.act)?;
                }
            }
        }
        Ok(())
    }

    /// Activation sites in forward order: `(path, &Activation)`.
    pub fn activation_sites(&self) -> Vec<(String, &Activation)> {
        match &self.kind {
            ModelKind::Mlp { hidden, .. } => hidden
                .iter()
                .enumerate()
                .map(|(i, (_, act))| (format!("hidden.{i}.act"), act))
                .collect(),
            ModelKind::Transformer { blocks, .. } => blocks
                .iter()
                .enumerate()
                .map(|(i, block)| (format!("blocks.{i}.ffn.act"), &block.act))
                .collect(),
        }
    }

    /// Canonical mutable traversal over every parameter:
    /// `f(path, data, shape, trainable, weight_decay)`.
    pub fn for_each_param(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Vec<f64>, Vec<usize>, bool, bool),
    ) {
        match &mut self.kind {
            ModelKind::Mlp { hidden, head } => {
                for (i, (linear, act)) in hidden.iter_mut().enumerate() {
                    linear.for_each_param(&format!("hidden.{i}"), f);
                    act.for_each_param(&format!("hidden.{i}.act"), f);
                }
                head.for_each_param("head", f);
            }
            ModelKind::Transformer {
                embed,
                blocks,
                head,
            } => {
                embed.for_each_param("embed", f);
                for (i, block) in blocks.iter_mut().enumerate() {
                    let p = format!("blocks.{i}");
                    block.ln1.for_each_param(&format!("{p}.ln1"), f);
                    block.wq.for_each_param(&format!("{p}.wq"), f);
                    block.wk.for_each_param(&format!("{p}.wk"), f);
                    block.wv.for_each_param(&format!("{p}.wv"), f);
                    block.wo.for_each_param(&format!("{p}.wo"), f);
                    block.ln2.for_each_param(&format!("{p}.ln2"), f);
                    block.ffn_up.for_each_param(&format!("{p}.ffn.up"), f);
                    block.act.for_each_param(&format!("{p}.ffn.act"), f);
                    block.ffn_down.for_each_param(&format!("{p}.ffn.down"), f);
                }
                head.for_each_param("head", f);
            }
        }
    }

    /// `(path, data)` snapshot of every parameter.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut clone = self.clone();
        clone.for_each_param(&mut |name, data, _, _, _| {
            out.push((name.to_string(), data.clone()));
        });
        out
    }

    /// Restores parameter values from a snapshot (paths must match).
    pub fn restore(&mut self, snapshot: &[(String, Vec<f64>)]) -> Result<(), ModelError> {
        let mut missing = Vec::new();
        let map: std::collections::HashMap<&str, &Vec<f64>> = snapshot
            .iter()
            .map(|(name, data)| (name.as_str(), data))
            .collect();
        self.for_each_param(&mut |name, data, _, _, _| match map.get(name) {
            Some(values) if values.len() == data.len() => data.copy_from_slice(values),
            _ => missing.push(name.to_string()),
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "snapshot does not cover parameters: {missing:?}"
            )))
        }
    }

    /// Exact count of trainable parameters; the classification head can be
    /// excluded for budget comparisons.
    pub fn count_trainable(&self, include_head: bool) -> usize {
        let mut total = 0usize;
        let mut clone = self.clone();
        clone.for_each_param(&mut |name, data, _, trainable, _| {
            if trainable && (include_head || !name.starts_with("head.")) {
                total += data.len();
            }
        });
        total
    }

    pub fn total_params(&self) -> usize {
        let mut total = 0usize;
        let mut clone = self.clone();
        clone.for_each_param(&mut |_, data, _, _, _| total += data.len());
        total
    }

    /// Builds the forward graph for a `[batch, in_features]` input.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<ForwardPass, ModelError> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.in_features {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "model_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.in_features],
            }));
        }
        let mut pairs = Vec::new();
        let mut activation_outputs: Vec<(String, Vec<Var>)> = self
            .activation_sites()
            .iter()
            .map(|(name, _)| (name.clone(), Vec::new()))
            .collect();
        match &self.kind {
            ModelKind::Mlp { hidden, head } => {
                let leased: Vec<(LeasedLinear, LeasedActivation)> = hidden
                    .iter()
                    .enumerate()
                    .map(|(i, (linear, act))| {
                        let ll = linear.lease(tape, &format!("hidden.{i}"), &mut pairs)?;
                        let la = act.lease(tape, &format!("hidden.{i}.act"), &mut pairs)?;
                        Ok((ll, la))
                    })
                    .collect::<Result<_, TensorError>>()?;
                let leased_head = head.lease(tape, "head", &mut pairs)?;
                let mut h = tape.input(x);
                for (i, (ll, la)) in leased.iter().enumerate() {
                    h = Linear::apply(tape, ll, h)?;
                    h = Activation::apply(tape, la, h)?;
                    activation_outputs[i].1.push(h);
                }
                let logits = Linear::apply(tape, &leased_head, h)?;
                Ok(ForwardPass {
                    logits,
                    bindings: pairs,
                    activation_outputs,
                })
            }
            ModelKind::Transformer {
                embed,
                blocks,
                head,
            } => {
                let leased_embed = embed.lease(tape, "embed", &mut pairs)?;
                let leased_blocks: Vec<LeasedBlock> = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, block)| {
                        let p = format!("blocks.{i}");
                        Ok(LeasedBlock {
                            ln1: block.ln1.lease(tape, &format!("{p}.ln1"), &mut pairs)?,
                            wq: block.wq.lease(tape, &format!("{p}.wq"), &mut pairs)?,
                            wk: block.wk.lease(tape, &format!("{p}.wk"), &mut pairs)?,
                            wv: block.wv.lease(tape, &format!("{p}.wv"), &mut pairs)?,
                            wo: block.wo.lease(tape, &format!("{p}.wo"), &mut pairs)?,
                            ln2: block.ln2.lease(tape, &format!("{p}.ln2"), &mut pairs)?,
                            ffn_up: block.ffn_up.lease(tape, &format!("{p}.ffn.up"), &mut pairs)?,
                            act: block.act.lease(tape, &format!("{p}.ffn.act"), &mut pairs)?,
                            ffn_down: block
                                .ffn_down
                                .lease(tape, &format!("{p}.ffn.down"), &mut pairs)?,
                        })
                    })
                    .collect::<Result<_, TensorError>>()?;
                let leased_head = head.lease(tape, "head", &mut pairs)?;

                let batch = x.shape()[0];
                let token_dim = self.config.in_features / self.config.tokens;
                let heads = self.config.heads;
                let head_dim = self.config.hidden / heads;
                let mut pooled = Vec::with_capacity(batch);
                for s in 0..batch {
                    let row = Tensor::new(
                        vec![1, self.config.in_features],
                        x.data()[s * self.config.in_features..(s + 1) * self.config.in_features]
                            .to_vec(),
                    )?;
                    let xv = tape.input(&row);
                    let tokens = tape.reshape(xv, vec![self.config.tokens, token_dim])?;
                    let mut h = Linear::apply(tape, &leased_embed, tokens)?;
                    for (bi, lb) in leased_blocks.iter().enumerate() {
                        let normed = LayerNorm::apply(tape, &lb.ln1, h)?;
                        let q = Linear::apply(tape, &lb.wq, normed)?;
                        let k = Linear::apply(tape, &lb.wk, normed)?;
                        let v = Linear::apply(tape, &lb.wv, normed)?;
                        let mut head_outs = Vec::with_capacity(heads);
                        for hd in 0..heads {
                            let qh = tape.slice_cols(q, hd * head_dim, head_dim)?;
                            let kh = tape.slice_cols(k, hd * head_dim, head_dim)?;
                            let vh = tape.slice_cols(v, hd * head_dim, head_dim)?;
                            let kt = tape.transpose(kh)?;
                            let scores = tape.matmul(qh, kt)?;
                            let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
                            let att = tape.softmax(scaled)?;
                            head_outs.push(tape.matmul(att, vh)?);
                        }
                        let merged = if heads == 1 {
                            head_outs[0]
                        } else {
                            tape.concat_cols(&head_outs)?
                        };
                        let projected = Linear::apply(tape, &lb.wo, merged)?;
                        h = tape.add(h, projected)?;
                        let normed2 = LayerNorm::apply(tape, &lb.ln2, h)?;
                        let up = Linear::apply(tape, &lb.ffn_up, normed2)?;
                        let activated = Activation::apply(tape, &lb.act, up)?;
                        activation_outputs[bi].1.push(activated);
                        let down = Linear::apply(tape, &lb.ffn_down, activated)?;
                        h = tape.add(h, down)?;
                    }
                    pooled.push(tape.mean_rows(h)?);
                }
                let stacked = tape.stack_rows(&pooled)?;
                let logits = Linear::apply(tape, &leased_head, stacked)?;
                Ok(ForwardPass {
                    logits,
                    bindings: pairs,
                    activation_outputs,
                })
            }
        }
    }

    /// Forward pass on a scratch tape, returning logits values.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Flattened per-site activation outputs on a batch (used by the
    /// distribution diagnostics).
    pub fn activation_values(&self, x: &Tensor) -> Result<Vec<(String, Vec<f64>)>, ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x)?;
        Ok(pass
            .activation_outputs
            .into_iter()
            .map(|(name, vars)| {
                let mut values = Vec::new();
                for v in vars {
                    values.extend_from_slice(tape.value(v).data());
                }
                (name, values)
            })
            .collect())
    }
}

fn make_activation(
    config: &ModelConfig,
    width: usize,
    _layer: usize,
) -> Result<Activation, ModelError> {
    match &config.activation {
        ActivationCfg::FixedGelu => Ok(Activation::Gelu),
        ActivationCfg::GroupedRational { groups, m, n } => {
            // Fresh rational layers start at the identity; fitted
            // coefficients are swapped in by the adaptation pipeline.
            let coeffs = RationalCoeffs::identity(*m, *n);
            Ok(Activation::Rational(GroupedRationalLayer::new_shared(
                coeffs, *groups, width,
            )?))
        }
    }
}

/// Which linear weights a LoRA plan targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraSite {
    Query,
    Key,
    Value,
    AttnOut,
    FfnUp,
    FfnDown,
    MlpHidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoraPlan {
    pub rank: usize,
    pub mode: NoraMode,
    /// Activation sites to adapt; `None` means every rational activation.
    #[serde(default)]
    pub sites: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPlan {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraSite>,
}

/// How a model is adapted: what trains and what stays frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PlanMode {
    Full,
    HeadOnly,
    Nora { nora: NoraPlan },
    Lora { lora: LoraPlan },
    NoraPlusPlus { nora: NoraPlan, lora: LoraPlan },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub mode: PlanMode,
    /// Adapter plans normally keep the classification head trainable.
    pub include_head: bool,
    pub seed: u64,
}

/// Applies a plan: freezes everything, then marks the plan's parameter sets
/// trainable and attaches adapters. Returns configuration warnings.
pub fn apply_plan(model: &mut Model, plan: &AdaptationPlan) -> Result<Vec<String>, ModelError> {
    // Reset: freeze all, drop adapters.
    set_all_trainable(model, false);
    strip_adapters(model);
    let mut warnings = Vec::new();
    match &plan.mode {
        PlanMode::Full => set_all_trainable(model, true),
        PlanMode::HeadOnly => set_head_trainable(model),
        PlanMode::Nora { nora } => {
            warnings.extend(attach_nora(model, nora, plan.seed)?);
            if plan.include_head {
                set_head_trainable(model);
            }
        }
        PlanMode::Lora { lora } => {
            attach_lora(model, lora, plan.seed)?;
            if plan.include_head {
                set_head_trainable(model);
            }
        }
        PlanMode::NoraPlusPlus { nora, lora } => {
            warnings.extend(attach_nora(model, nora, plan.seed)?);
            attach_lora(model, lora, plan.seed)?;
            if plan.include_head {
                set_head_trainable(model);
            }
        }
    }
    if !matches!(plan.mode, PlanMode::Full) && model.config.layer_norm_trainable {
        set_layer_norms_trainable(model, true);
    }
    Ok(warnings)
}

fn set_all_trainable(model: &mut Model, flag: bool) {
    match &mut model.kind {
        ModelKind::Mlp { hidden, head } => {
            for (linear, act) in hidden.iter_mut() {
                linear.set_trainable(flag);
                if let Some(layer) = act.rational_mut() {
                    layer.set_base_trainable(flag);
                }
            }
            head.set_trainable(flag);
        }
        ModelKind::Transformer {
            embed,
            blocks,
            head,
        } => {
            embed.set_trainable(flag);
            for block in blocks.iter_mut() {
                block.ln1.trainable = flag;
                block.wq.set_trainable(flag);
                block.wk.set_trainable(flag);
                block.wv.set_trainable(flag);
                block.wo.set_trainable(flag);
                block.ln2.trainable = flag;
                block.ffn_up.set_trainable(flag);
                block.ffn_down.set_trainable(flag);
                if let Some(layer) = block.act.rational_mut() {
                    layer.set_base_trainable(flag);
                }
            }
            head.set_trainable(flag);
        }
    }
}

fn strip_adapters(model: &mut Model) {
    let strip_linear = |l: &mut Linear| l.lora = None;
    match &mut model.kind {
        ModelKind::Mlp { hidden, head } => {
            for (linear, act) in hidden.iter_mut() {
                strip_linear(linear);
                if let Some(layer) = act.rational_mut() {
                    for state in layer.groups_mut() {
                        state.delta = None;
                    }
                }
            }
            strip_linear(head);
        }
        ModelKind::Transformer {
            embed,
            blocks,
            head,
        } => {
            strip_linear(embed);
            for block in blocks.iter_mut() {
                for l in [
                    &mut block.wq,
                    &mut block.wk,
                    &mut block.wv,
                    &mut block.wo,
                    &mut block.ffn_up,
                    &mut block.ffn_down,
                ] {
                    strip_linear(l);
                }
                if let Some(layer) = block.act.rational_mut() {
                    for state in layer.groups_mut() {
                        state.delta = None;
                    }
                }
            }
            strip_linear(head);
        }
    }
}

fn set_head_trainable(model: &mut Model) {
    match &mut model.kind {
        ModelKind::Mlp { head, .. } => head.set_trainable(true),
        ModelKind::Transformer { head, .. } => head.set_trainable(true),
    }
}

fn set_layer_norms_trainable(model: &mut Model, flag: bool) {
    if let ModelKind::Transformer { blocks, .. } = &mut model.kind {
        for block in blocks.iter_mut() {
            block.ln1.trainable = flag;
            block.ln2.trainable = flag;
        }
    }
}

fn attach_nora(model: &mut Model, plan: &NoraPlan, seed: u64) -> Result<Vec<String>, ModelError> {
    let cfg = NoraConfig {
        rank: plan.rank,
        mode: plan.mode,
    };
    let mut warnings = Vec::new();
    let site_count = model.activation_sites().len();
    let selected: Vec<usize> = match &plan.sites {
        None => (0..site_count).collect(),
        Some(list) => {
            for &idx in list {
                if idx >= site_count {
                    return Err(ModelError::UnknownSite(format!(
                        "activation site {idx} (model has {site_count})"
                    )));
                }
            }
            list.clone()
        }
    };
    let mut site_idx = 0usize;
    let mut apply_err = None;
    model.for_each_activation(|act| {
        if selected.contains(&site_idx) {
            match act.rational_mut() {
                None => {
                    apply_err = Some(ModelError::UnknownSite(format!(
                        "activation site {site_idx} is fixed GELU, not a rational layer"
                    )));
                }
                Some(layer) => {
                    let mut stream = rng::substream(seed, "nora", site_idx as u64);
                    match init_nora(layer, cfg, &mut stream) {
                        Ok(w) => warnings.extend(
                            w.into_iter().map(|msg| format!("site {site_idx}: {msg}")),
                        ),
                        Err(e) => apply_err = Some(ModelError::Adapter(e)),
                    }
                }
            }
        }
        site_idx += 1;
        Ok(())
    })?;
    if let Some(err) = apply_err {
        return Err(err);
    }
    Ok(warnings)
}

fn attach_lora(model: &mut Model, plan: &LoraPlan, seed: u64) -> Result<(), ModelError> {
    let mut seen = Vec::new();
    for target in &plan.targets {
        if seen.contains(target) {
            return Err(ModelError::Config(format!(
                "duplicate adapter target {target:?}"
            )));
        }
        seen.push(*target);
    }
    let attach = |linear: &mut Linear, stream: &mut SeededRng| -> Result<(), ModelError> {
        linear.lora = Some(LoraDelta::init(
            linear.in_dim,
            linear.out_dim,
            plan.rank,
            plan.alpha,
            stream,
        )?);
        Ok(())
    };
    match &mut model.kind {
        ModelKind::Mlp { hidden, .. } => {
            for target in &plan.targets {
                if *target != LoraSite::MlpHidden {
                    return Err(ModelError::UnknownSite(format!(
                        "{target:?} does not exist in an MLP"
                    )));
                }
                for (i, (linear, _)) in hidden.iter_mut().enumerate() {
                    let mut stream = rng::substream(seed, "lora-mlp", i as u64);
                    attach(linear, &mut stream)?;
                }
            }
        }
        ModelKind::Transformer { blocks, .. } => {
            for target in &plan.targets {
                for (i, block) in blocks.iter_mut().enumerate() {
                    let linear = match target {
                        LoraSite::Query => &mut block.wq,
                        LoraSite::Key => &mut block.wk,
                        LoraSite::Value => &mut block.wv,
                        LoraSite::AttnOut => &mut block.wo,
                        LoraSite::FfnUp => &mut block.ffn_up,
                        LoraSite::FfnDown => &mut block.ffn_down,
                        LoraSite::MlpHidden => {
                            return Err(ModelError::UnknownSite(
                                "mlp-hidden does not exist in a transformer".into(),
                            ))
                        }
                    };
                    let mut stream =
                        rng::substream(seed, &format!("lora-{target:?}"), i as u64);
                    attach(linear, &mut stream)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_config(depth: usize) -> ModelConfig {
        ModelConfig {
            arch: Arch::Mlp,
            depth,
            hidden: 16,
            heads: 1,
            ffn_mult: 1,
            activation: ActivationCfg::GroupedRational {
                groups: 4,
                m: 5,
                n: 4,
            },
            head_classes: 3,
            in_features: 8,
            tokens: 1,
            layer_norm_trainable: false,
            seed: 7,
        }
    }

    fn transformer_config() -> ModelConfig {
        ModelConfig {
            arch: Arch::MiniTransformer,
            depth: 2,
            hidden: 32,
            heads: 1,
            ffn_mult: 4,
            activation: ActivationCfg::GroupedRational {
                groups: 8,
                m: 5,
                n: 4,
            },
            head_classes: 2,
            in_features: 16,
            tokens: 4,
            layer_norm_trainable: false,
            seed: 3,
        }
    }

    #[test]
    fn same_seed_builds_are_bit_identical() {
        let config = transformer_config();
        let a = Model::build(&config).unwrap();
        let b = Model::build(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let mut config = transformer_config();
        let a = Model::build(&config).unwrap();
        config.seed = 4;
        let b = Model::build(&config).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn depth_zero_mlp_is_linear_head_only() {
        let model = Model::build(&mlp_config(0)).unwrap();
        // in_features -> classes directly.
        assert_eq!(model.total_params(), 8 * 3 + 3);
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        let mut config = transformer_config();
        config.heads = 3;
        assert!(matches!(
            Model::build(&config),
            Err(ModelError::Config(_))
        ));
        let mut config = transformer_config();
        config.activation = ActivationCfg::GroupedRational {
            groups: 5,
            m: 5,
            n: 4,
        };
        assert!(Model::build(&config).is_err());
        let mut config = transformer_config();
        config.tokens = 3;
        assert!(Model::build(&config).is_err());
    }

    #[test]
    fn head_only_plan_counts_head_parameters() {
        let mut model = Model::build(&transformer_config()).unwrap();
        apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::HeadOnly,
                include_head: true,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(model.count_trainable(true), 32 * 2 + 2);
        assert_eq!(model.count_trainable(false), 0);
    }

    #[test]
    fn full_plan_counts_everything() {
        let mut model = Model::build(&transformer_config()).unwrap();
        apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::Full,
                include_head: true,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(model.count_trainable(true), model.total_params());
    }

    #[test]
    fn nora_plan_count_matches_formula() {
        // L=2 blocks, G=8, r=2, (m,n)=(5,4), both sides: 2 * 8 * 26 = 416.
        let mut model = Model::build(&transformer_config()).unwrap();
        apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::Nora {
                    nora: NoraPlan {
                        rank: 2,
                        mode: NoraMode::Both,
                        sites: None,
                    },
                },
                include_head: true,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(model.count_trainable(false), 416);
        assert_eq!(model.count_trainable(true), 416 + 32 * 2 + 2);
    }

    #[test]
    fn nora_plus_plus_counts_are_additive() {
        let config = transformer_config();
        let nora = NoraPlan {
            rank: 2,
            mode: NoraMode::Both,
            sites: None,
        };
        let lora = LoraPlan {
            rank: 2,
            alpha: 2.0,
            targets: vec![LoraSite::Query, LoraSite::Value],
        };
        let mut m_nora = Model::build(&config).unwrap();
        apply_plan(
            &mut m_nora,
            &AdaptationPlan {
                mode: PlanMode::Nora { nora: nora.clone() },
                include_head: false,
                seed: 5,
            },
        )
        .unwrap();
        let mut m_lora = Model::build(&config).unwrap();
        apply_plan(
            &mut m_lora,
            &AdaptationPlan {
                mode: PlanMode::Lora { lora: lora.clone() },
                include_head: false,
                seed: 5,
            },
        )
        .unwrap();
        let mut m_both = Model::build(&config).unwrap();
        apply_plan(
            &mut m_both,
            &AdaptationPlan {
                mode: PlanMode::NoraPlusPlus { nora, lora },
                include_head: false,
                seed: 5,
            },
        )
        .unwrap();
        assert_eq!(
            m_both.count_trainable(false),
            m_nora.count_trainable(false) + m_lora.count_trainable(false)
        );
        // 2 sites x 2 blocks x r(32+32) = 512 for the LoRA half.
        assert_eq!(m_lora.count_trainable(false), 512);
    }

    #[test]
    fn duplicate_lora_target_is_config_error() {
        let mut model = Model::build(&transformer_config()).unwrap();
        let err = apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::Lora {
                    lora: LoraPlan {
                        rank: 1,
                        alpha: 1.0,
                        targets: vec![LoraSite::Query, LoraSite::Query],
                    },
                },
                include_head: true,
                seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
    }

    #[test]
    fn nora_on_gelu_model_is_unknown_site() {
        let mut config = transformer_config();
        config.activation = ActivationCfg::FixedGelu;
        let mut model = Model::build(&config).unwrap();
        let err = apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::Nora {
                    nora: NoraPlan {
                        rank: 2,
                        mode: NoraMode::Both,
                        sites: None,
                    },
                },
                include_head: true,
                seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::UnknownSite(_)));
    }

    #[test]
    fn forward_runs_and_is_deterministic() {
        let model = Model::build(&transformer_config()).unwrap();
        let x = Tensor::new(vec![3, 16], (0..48).map(|i| (i as f64) * 0.05 - 1.0).collect())
            .unwrap();
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 2]);
    }

    #[test]
    fn multi_head_forward_runs() {
        let mut config = transformer_config();
        config.heads = 4;
        let model = Model::build(&config).unwrap();
        let x = Tensor::new(vec![2, 16], vec![0.3; 32]).unwrap();
        assert_eq!(model.logits(&x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn activation_swap_changes_only_activation_layers() {
        let mut config = transformer_config();
        config.activation = ActivationCfg::FixedGelu;
        let gelu_model = Model::build(&config).unwrap();
        let coeffs = RationalCoeffs::identity(5, 4);
        let swapped = gelu_model.swap_activation(8, Some(&coeffs)).unwrap();
        // Weight parameters unchanged.
        let before = gelu_model.snapshot();
        let after = swapped.snapshot();
        let names_before: Vec<&String> = before.iter().map(|(n, _)| n).collect();
        for (name, data) in &after {
            if name.contains(".act.") {
                continue;
            }
            let idx = names_before.iter().position(|n| *n == name).unwrap();
            assert_eq!(&before[idx].1, data, "{name} changed");
        }
        // New rational sites exist.
        assert!(after.iter().any(|(n, _)| n.contains(".act.")));
    }

    #[test]
    fn restore_round_trips() {
        let mut model = Model::build(&transformer_config()).unwrap();
        let snapshot = model.snapshot();
        model.for_each_param(&mut |_, data, _, _, _| {
            for v in data.iter_mut() {
                *v += 1.0;
            }
        });
        model.restore(&snapshot).unwrap();
        assert_eq!(model.snapshot(), snapshot);
    }
}

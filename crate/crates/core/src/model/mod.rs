//! The label-guided transformer.
//!
//! Image features are split into `num_feature_tokens` chunks and mapped to
//! token width by the backbone. The `C` masked label embeddings are appended
//! as further tokens, the sequence runs through pre-norm transformer blocks,
//! and output token `F + c` feeds the class-`c` head to give logit `c`.
//! Without label tokens the feature tokens are mean-pooled into every head.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camle::{compose_masked_embeddings, inference_mask, CamleError, LabelStateVector};
use crate::embeddings::{EmbeddingMatrix, StateEmbeddings};
use crate::params::ParameterSet;
use crate::seed;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} classes, got {got}")]
    ClassMismatch { expected: usize, got: usize },
    #[error("expected {expected} input features, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Camle(#[from] CamleError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Feature chunks through a single linear token projection.
    IdentityFeatures,
    /// Two-layer GELU MLP per feature chunk.
    TinyPatchEncoder,
}

/// How label tokens enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelTokens {
    /// Feature-only classifier.
    None,
    /// Label embeddings are trainable parameters.
    Learned,
    /// Label embeddings are frozen inputs supplied by the caller.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub num_feature_tokens: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub backbone: BackboneKind,
    #[serde(default = "default_label_tokens")]
    pub label_tokens: LabelTokens,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

fn default_label_tokens() -> LabelTokens {
    LabelTokens::Fixed
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if self.embed_dim == 0 || self.attention_heads == 0 {
            return fail("embed_dim and attention_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.attention_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by attention_heads {}",
                self.embed_dim, self.attention_heads
            ));
        }
        if self.num_feature_tokens == 0 || !self.feature_dim.is_multiple_of(self.num_feature_tokens)
        {
            return fail(format!(
                "feature_dim {} must split evenly into {} tokens",
                self.feature_dim, self.num_feature_tokens
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub fn chunk_width(&self) -> usize {
        self.feature_dim / self.num_feature_tokens
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |n: String, s: Vec<usize>| out.push((n, s));
        match self.backbone {
            BackboneKind::IdentityFeatures => {
                push("backbone.proj.weight".into(), vec![self.chunk_width(), d]);
                push("backbone.proj.bias".into(), vec![d]);
            }
            BackboneKind::TinyPatchEncoder => {
                push("backbone.fc1.weight".into(), vec![self.chunk_width(), d]);
                push("backbone.fc1.bias".into(), vec![d]);
                push("backbone.fc2.weight".into(), vec![d, d]);
                push("backbone.fc2.bias".into(), vec![d]);
            }
        }
        if self.positional_encoding {
            push("backbone.pos".into(), vec![self.num_feature_tokens, d]);
        }
        for l in 0..self.transformer_layers {
            let p = format!("blocks.{l}");
            push(format!("{p}.ln1.gamma"), vec![d]);
            push(format!("{p}.ln1.beta"), vec![d]);
            for m in ["q", "k", "v", "o"] {
                push(format!("{p}.attn.{m}.weight"), vec![d, d]);
                push(format!("{p}.attn.{m}.bias"), vec![d]);
            }
            push(format!("{p}.ln2.gamma"), vec![d]);
            push(format!("{p}.ln2.beta"), vec![d]);
            push(format!("{p}.ffn.fc1.weight"), vec![d, self.ffn_dim]);
            push(format!("{p}.ffn.fc1.bias"), vec![self.ffn_dim]);
            push(format!("{p}.ffn.fc2.weight"), vec![self.ffn_dim, d]);
            push(format!("{p}.ffn.fc2.bias"), vec![d]);
        }
        push("final_ln.gamma".into(), vec![d]);
        push("final_ln.beta".into(), vec![d]);
        push("head.weight".into(), vec![self.num_classes, d]);
        push("head.bias".into(), vec![self.num_classes]);
        if self.label_tokens == LabelTokens::Learned {
            push("label_embeddings".into(), vec![self.num_classes, d]);
        }
        out
    }
}

/// Deterministic seeded initialisation. Each tensor draws from its own
/// stream keyed by name, so models that share a tensor name (e.g. across
/// ablation arms) start from identical values for it.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut params = ParameterSet::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![0.0; n]
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            let bound = match name.as_str() {
                // Rows act as token embeddings: scaled so E|row|^2 = 1.
                "label_embeddings" | "backbone.pos" => (3.0 / shape[1] as f64).sqrt(),
                // Stored `C x d`, consumed as d -> 1 per class.
                "head.weight" => 1.0 / (shape[1] as f64).sqrt(),
                _ => 1.0 / (shape[0] as f64).sqrt(),
            };
            let mut rng = seed::rng(seed::derive(seed, &[seed::hash_str(&name)]));
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.insert(&name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Frozen label-side inputs: the universal label embedding (when the model
/// uses fixed label tokens) and the three state embeddings, both already at
/// token width.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGuide {
    pub labels: Option<EmbeddingMatrix>,
    pub states: StateEmbeddings,
}

impl LabelGuide {
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.states.dim() != config.embed_dim {
            return Err(ModelError::Config(format!(
                "state embeddings are {} wide, model width is {}",
                self.states.dim(),
                config.embed_dim
            )));
        }
        if config.label_tokens == LabelTokens::Fixed {
            let l = self.labels.as_ref().ok_or_else(|| {
                ModelError::Config("fixed label tokens need label embeddings".into())
            })?;
            if l.num_classes() != config.num_classes {
                return Err(ModelError::ClassMismatch {
                    expected: config.num_classes,
                    got: l.num_classes(),
                });
            }
            if l.dim() != config.embed_dim {
                return Err(ModelError::Config(format!(
                    "label embeddings are {} wide, model width is {}",
                    l.dim(),
                    config.embed_dim
                )));
            }
        }
        Ok(())
    }
}

/// Label tokens for one sample, before they enter the graph.
pub enum LabelInput<'a> {
    /// Already-composed masked label embeddings (`C x d`).
    Masked(&'a Tensor),
    /// State offsets to add to the learned label embeddings (`C x d`).
    StateRows(Tensor),
    None,
}

/// Parameter leaves of one graph, keyed by name.
pub struct Bound {
    nodes: HashMap<String, NodeId>,
}

impl Bound {
    pub fn new(graph: &mut Graph, params: &ParameterSet) -> Self {
        Self {
            nodes: graph.params_from(params).into_iter().collect(),
        }
    }

    fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

fn linear(g: &mut Graph, p: &Bound, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let h = g.matmul(x, w)?;
    Ok(g.add_row(h, b)?)
}

fn layer_norm(g: &mut Graph, p: &Bound, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
pub fn self_attention(
    g: &mut Graph,
    p: &Bound,
    x: NodeId,
    heads: usize,
    prefix: &str,
) -> Result<NodeId> {
    let (_, d) = g.value(x).dims2("attention")?;
    let dh = d / heads;
    let q = linear(g, p, x, &format!("{prefix}.q"))?;
    let k = linear(g, p, x, &format!("{prefix}.k"))?;
    let v = linear(g, p, x, &format!("{prefix}.v"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    linear(g, p, merged, &format!("{prefix}.o"))
}

/// Records one sample's forward pass and returns its `1 x C` logits node.
pub fn forward_sample(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    features: &[f64],
    labels: LabelInput<'_>,
) -> Result<NodeId> {
    if features.len() != config.feature_dim {
        return Err(ModelError::FeatureMismatch {
            expected: config.feature_dim,
            got: features.len(),
        });
    }
    let f = config.num_feature_tokens;
    let c = config.num_classes;
    let chunks = g.constant(Tensor::matrix(f, config.chunk_width(), features.to_vec())?);
    let mut tokens = match config.backbone {
        BackboneKind::IdentityFeatures => linear(g, p, chunks, "backbone.proj")?,
        BackboneKind::TinyPatchEncoder => {
            let h = linear(g, p, chunks, "backbone.fc1")?;
            let h = g.gelu(h);
            linear(g, p, h, "backbone.fc2")?
        }
    };
    if config.positional_encoding {
        let pos = p.get("backbone.pos")?;
        tokens = g.add(tokens, pos)?;
    }

    let label_node = match (config.label_tokens, labels) {
        (LabelTokens::None, _) => None,
        (LabelTokens::Fixed, LabelInput::Masked(m)) => {
            check_rows(m, c)?;
            Some(g.constant(m.clone()))
        }
        (LabelTokens::Learned, LabelInput::StateRows(s)) => {
            check_rows(&s, c)?;
            let emb = p.get("label_embeddings")?;
            let s = g.constant(s);
            Some(g.add(emb, s)?)
        }
        (mode, _) => {
            return Err(ModelError::Config(format!(
                "label input does not match label token mode {mode:?}"
            )))
        }
    };
    let mut x = match label_node {
        Some(l) => g.concat_rows(&[tokens, l])?,
        None => tokens,
    };

    for l in 0..config.transformer_layers {
        let pre = format!("blocks.{l}");
        let h = layer_norm(g, p, x, &format!("{pre}.ln1"))?;
        let a = self_attention(g, p, h, config.attention_heads, &format!("{pre}.attn"))?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, x, &format!("{pre}.ln2"))?;
        let h = linear(g, p, h, &format!("{pre}.ffn.fc1"))?;
        let h = g.gelu(h);
        let h = linear(g, p, h, &format!("{pre}.ffn.fc2"))?;
        x = g.add(x, h)?;
    }
    let x = layer_norm(g, p, x, "final_ln")?;
    let head_w = p.get("head.weight")?;
    let head_b = p.get("head.bias")?;
    let logits = match label_node {
        Some(_) => {
            let out = g.slice_rows(x, f, c)?;
            g.row_dot(out, head_w)?
        }
        None => {
            let feats = g.slice_rows(x, 0, f)?;
            let pooled = g.mean_rows(feats)?;
            g.matmul_nt(pooled, head_w)?
        }
    };
    Ok(g.add_row(logits, head_b)?)
}

fn check_rows(m: &Tensor, c: usize) -> Result<()> {
    let (rows, _) = m.dims2("label tokens")?;
    if rows != c {
        return Err(ModelError::ClassMismatch {
            expected: c,
            got: rows,
        });
    }
    Ok(())
}

/// A configured model: architecture plus its frozen label-side inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGuidedTransformer {
    pub config: ModelConfig,
    pub guide: LabelGuide,
}

impl LabelGuidedTransformer {
    pub fn new(config: ModelConfig, guide: LabelGuide) -> Result<Self> {
        config.validate()?;
        guide.check(&config)?;
        Ok(Self { config, guide })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Builds the label input for one sample under `states`.
    pub fn label_input(&self, states: &LabelStateVector) -> Result<OwnedLabelInput> {
        if states.len() != self.config.num_classes {
            return Err(ModelError::ClassMismatch {
                expected: self.config.num_classes,
                got: states.len(),
            });
        }
        Ok(match self.config.label_tokens {
            LabelTokens::None => OwnedLabelInput::None,
            LabelTokens::Fixed => {
                let l = self.guide.labels.as_ref().expect("checked at construction");
                OwnedLabelInput::Masked(compose_masked_embeddings(l, states, &self.guide.states)?)
            }
            LabelTokens::Learned => {
                OwnedLabelInput::StateRows(states.state_rows(&self.guide.states))
            }
        })
    }

    /// Records a batch on `g`; returns the `B x C` logits node.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: &[&[f64]],
        states: &[LabelStateVector],
    ) -> Result<NodeId> {
        let rows = features
            .iter()
            .zip(states)
            .map(|(x, s)| {
                let input = self.label_input(s)?;
                forward_sample(g, p, &self.config, x, input.as_input())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows)?)
    }

    /// Logits for one sample under the given label states.
    pub fn forward(
        &self,
        params: &ParameterSet,
        features: &[f64],
        states: &LabelStateVector,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params);
        let input = self.label_input(states)?;
        let out = forward_sample(&mut g, &p, &self.config, features, input.as_input())?;
        Ok(g.value(out).data().to_vec())
    }

    /// Logits for a sample whose label tokens are given directly as masked
    /// embeddings (`C x d`). Only meaningful for fixed label tokens.
    pub fn forward_masked(
        &self,
        params: &ParameterSet,
        features: &[f64],
        masked: &Tensor,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, params);
        let out = forward_sample(
            &mut g,
            &p,
            &self.config,
            features,
            LabelInput::Masked(masked),
        )?;
        Ok(g.value(out).data().to_vec())
    }

    /// Class probabilities with every label state unknown.
    pub fn predict(&self, params: &ParameterSet, features: &[f64]) -> Result<Vec<f64>> {
        let logits = self.forward(params, features, &inference_mask(self.config.num_classes))?;
        Ok(logits.into_iter().map(crate::tensor::sigmoid).collect())
    }

    pub fn predict_many(
        &self,
        params: &ParameterSet,
        features: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        features.iter().map(|x| self.predict(params, x)).collect()
    }
}

/// Owned counterpart of [`LabelInput`].
pub enum OwnedLabelInput {
    Masked(Tensor),
    StateRows(Tensor),
    None,
}

impl OwnedLabelInput {
    pub fn as_input(&self) -> LabelInput<'_> {
        match self {
            OwnedLabelInput::Masked(t) => LabelInput::Masked(t),
            OwnedLabelInput::StateRows(t) => LabelInput::StateRows(t.clone()),
            OwnedLabelInput::None => LabelInput::None,
        }
    }
}

/// Value of the masked loss for a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// No class in the batch was unknown, so the loss is 0 with no signal.
    pub no_signal: bool,
}

/// Masked binary cross-entropy: summed over each sample's unknown classes,
/// averaged over samples that have at least one unknown class.
pub fn masked_bce_loss(
    logits: &[Vec<f64>],
    targets: &[Vec<f64>],
    states: &[LabelStateVector],
) -> Result<LossValue> {
    let c = logits.first().map_or(0, Vec::len);
    let mut g = Graph::new();
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let z = g.constant(Tensor::matrix(logits.len(), c, flat)?);
    let (y, mask) = flatten_targets(targets, states, c)?;
    let out = g.masked_bce(z, &y, &mask)?;
    Ok(LossValue {
        loss: g.value(out.node).data()[0],
        no_signal: out.no_signal,
    })
}

pub(crate) fn flatten_targets(
    targets: &[Vec<f64>],
    states: &[LabelStateVector],
    c: usize,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut y = Vec::with_capacity(targets.len() * c);
    let mut mask = Vec::with_capacity(targets.len() * c);
    for (t, s) in targets.iter().zip(states) {
        if t.len() != c || s.len() != c {
            return Err(ModelError::ClassMismatch {
                expected: c,
                got: t.len().min(s.len()),
            });
        }
        y.extend_from_slice(t);
        mask.extend(s.loss_mask());
    }
    Ok((y, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camle::LabelState;
    use crate::embeddings::{make_state_embeddings, synth_embeddings, StateSource};

    pub(crate) fn small_config(label_tokens: LabelTokens) -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            embed_dim: 8,
            feature_dim: 12,
            num_feature_tokens: 3,
            transformer_layers: 1,
            attention_heads: 2,
            ffn_dim: 16,
            backbone: BackboneKind::IdentityFeatures,
            label_tokens,
            positional_encoding: true,
        }
    }

    pub(crate) fn small_model(label_tokens: LabelTokens) -> LabelGuidedTransformer {
        let cfg = small_config(label_tokens);
        let guide = LabelGuide {
            labels: Some(synth_embeddings(4, 8, 5)),
            states: make_state_embeddings(8, StateSource::Synthetic { seed: 6 }).unwrap(),
        };
        LabelGuidedTransformer::new(cfg, guide).unwrap()
    }

    fn features(seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn zero_head(params: &mut ParameterSet) {
        for name in ["head.weight", "head.bias"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zero_head_gives_half_probabilities() {
        for mode in [LabelTokens::None, LabelTokens::Learned, LabelTokens::Fixed] {
            let m = small_model(mode);
            let mut p = init_params(&m.config, 1).unwrap();
            zero_head(&mut p);
            let probs = m.predict(&p, &features(2)).unwrap();
            assert_eq!(probs, vec![0.5; 4]);
        }
    }

    #[test]
    fn batch_of_one_matches_batch_of_four() {
        let m = small_model(LabelTokens::Fixed);
        let p = init_params(&m.config, 3).unwrap();
        let xs: Vec<Vec<f64>> = (0..4).map(features).collect();
        let states: Vec<_> = (0..4).map(|_| inference_mask(4)).collect();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &p);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let out = m.forward_batch(&mut g, &b, &refs, &states).unwrap();
        let single = m.forward(&p, &xs[2], &states[2]).unwrap();
        assert_eq!(g.value(out).row(2), single.as_slice());
    }

    #[test]
    fn feature_token_order_does_not_matter_without_positions() {
        let mut cfg = small_config(LabelTokens::Fixed);
        cfg.positional_encoding = false;
        let m = LabelGuidedTransformer::new(cfg, small_model(LabelTokens::Fixed).guide).unwrap();
        let p = init_params(&m.config, 4).unwrap();
        let x = features(9);
        // Tokens are chunks of 4 features: reorder as [2, 0, 1].
        let permuted: Vec<f64> = [2, 0, 1]
            .iter()
            .flat_map(|&t| x[t * 4..(t + 1) * 4].to_vec())
            .collect();
        let a = m.predict(&p, &x).unwrap();
        let b = m.predict(&p, &permuted).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn predict_is_sigmoid_of_all_unknown_forward() {
        let m = small_model(LabelTokens::Fixed);
        let p = init_params(&m.config, 8).unwrap();
        let x = features(1);
        let l = m.guide.labels.as_ref().unwrap();
        let masked = compose_masked_embeddings(l, &inference_mask(4), &m.guide.states).unwrap();
        let logits = m.forward_masked(&p, &x, &masked).unwrap();
        let expected: Vec<f64> = logits.into_iter().map(crate::tensor::sigmoid).collect();
        assert_eq!(m.predict(&p, &x).unwrap(), expected);
    }

    #[test]
    fn head_bias_moves_only_its_class() {
        let m = small_model(LabelTokens::Learned);
        let p = init_params(&m.config, 8).unwrap();
        let x = features(3);
        let base = m.predict(&p, &x).unwrap();
        let mut q = p.clone();
        q.get_mut("head.bias").unwrap().data_mut()[2] += 0.25;
        let bumped = m.predict(&q, &x).unwrap();
        for c in 0..4 {
            if c == 2 {
                assert!(bumped[c] > base[c]);
            } else {
                assert_eq!(bumped[c], base[c]);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = small_config(LabelTokens::Learned);
        let a = init_params(&cfg, 11).unwrap();
        assert_eq!(a, init_params(&cfg, 11).unwrap());
        assert_ne!(a, init_params(&cfg, 12).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let m = small_model(LabelTokens::Fixed);
        let p = init_params(&m.config, 1).unwrap();
        let wrong = Tensor::zeros(vec![3, 8]);
        assert!(matches!(
            m.forward_masked(&p, &features(0), &wrong),
            Err(ModelError::ClassMismatch {
                expected: 4,
                got: 3
            })
        ));
        assert!(m.forward(&p, &features(0), &inference_mask(5)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(LabelTokens::Fixed);
        cfg.attention_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(LabelTokens::Fixed);
        cfg.num_classes = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_examples() {
        let s = LabelStateVector::new(vec![LabelState::Unknown, LabelState::Positive]);
        let v = masked_bce_loss(&[vec![0.0, 3.0]], &[vec![1.0, 0.0]], &[s]).unwrap();
        assert!((v.loss - std::f64::consts::LN_2).abs() < 1e-12);

        let known = LabelStateVector::from_labels(&[1.0, 0.0]);
        let v = masked_bce_loss(&[vec![0.4, -0.1]], &[vec![1.0, 0.0]], &[known]).unwrap();
        assert_eq!(v.loss, 0.0);
        assert!(v.no_signal);

        let logit = |p: f64| (p / (1.0 - p)).ln();
        let v = masked_bce_loss(
            &[vec![logit(0.9), logit(0.1), logit(0.8)]],
            &[vec![1.0, 0.0, 1.0]],
            &[inference_mask(3)],
        )
        .unwrap();
        // -(ln 0.9 + ln 0.9 + ln 0.8), evaluated directly.
        let expected = -(0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln());
        assert!((v.loss - expected).abs() < 1e-12, "{}", v.loss);
        assert!((v.loss - 0.433_865).abs() < 1e-6);
    }

    #[test]
    fn forward_is_pure() {
        let m = small_model(LabelTokens::Fixed);
        let p = init_params(&m.config, 2).unwrap();
        let snapshot = p.clone();
        let x = features(5);
        let a = m.forward(&p, &x, &inference_mask(4)).unwrap();
        let b = m.forward(&p, &x, &inference_mask(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, snapshot);
    }
}

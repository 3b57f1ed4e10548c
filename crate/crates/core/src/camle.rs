//! Client-aware masked label embeddings.
//!
//! Each label token carries a state. During local training a class whose
//! global-model probability falls inside `[tau - eps, tau + eps]` is forced
//! to `Unknown`, and only unknown classes contribute to the loss. The
//! random-mask baseline and the all-unknown inference mask live here too.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{EmbeddingMatrix, StateEmbeddings};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CamleError {
    #[error("class {class}: probability {value} is outside [0, 1]")]
    Probability { class: usize, value: f64 },
    #[error("length mismatch: {0} probabilities vs {1} states")]
    Length(usize, usize),
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error("width mismatch: label embeddings are {labels} wide, state embeddings {states}")]
    Width { labels: usize, states: usize },
    #[error("mask fraction range [{0}, {1}] is not inside [0, 1]")]
    MaskRange(f64, f64),
}

pub type Result<T> = std::result::Result<T, CamleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelState {
    Unknown,
    Positive,
    Negative,
}

impl LabelState {
    /// Serialized token value: unknown = -1, positive = 1, negative = 0.
    pub fn token(self) -> i8 {
        match self {
            LabelState::Unknown => -1,
            LabelState::Positive => 1,
            LabelState::Negative => 0,
        }
    }

    pub fn from_token(token: i8) -> Option<Self> {
        match token {
            -1 => Some(LabelState::Unknown),
            1 => Some(LabelState::Positive),
            0 => Some(LabelState::Negative),
            _ => None,
        }
    }

    pub fn from_label(y: f64) -> Self {
        if y > 0.5 {
            LabelState::Positive
        } else {
            LabelState::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelStateVector(Vec<LabelState>);

impl LabelStateVector {
    pub fn new(states: Vec<LabelState>) -> Self {
        Self(states)
    }

    /// Ground-truth states: positive where `y_c = 1`, negative elsewhere.
    pub fn from_labels(y: &[f64]) -> Self {
        Self(y.iter().map(|&v| LabelState::from_label(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn states(&self) -> &[LabelState] {
        &self.0
    }

    pub fn tokens(&self) -> Vec<i8> {
        self.0.iter().map(|s| s.token()).collect()
    }

    /// `true` for classes that contribute to the masked loss.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.0.iter().map(|s| *s == LabelState::Unknown).collect()
    }

    pub fn unknown_count(&self) -> usize {
        self.0.iter().filter(|s| **s == LabelState::Unknown).count()
    }

    /// Stacked state vectors, one row per class.
    pub fn state_rows(&self, states: &StateEmbeddings) -> Tensor {
        let d = states.dim();
        let mut data = Vec::with_capacity(self.0.len() * d);
        for s in &self.0 {
            data.extend_from_slice(states.get(*s));
        }
        Tensor::matrix(self.0.len(), d, data).expect("sized")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            epsilon: 0.02,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CamleError::Config(format!(
                "tau = {} not in (0, 1)",
                self.tau
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < self.tau.min(1.0 - self.tau)) {
            return Err(CamleError::Config(format!(
                "epsilon = {} not in [0, min(tau, 1 - tau))",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Closed uncertainty interval test.
    pub fn is_uncertain(&self, p: f64) -> bool {
        self.tau - self.epsilon <= p && p <= self.tau + self.epsilon
    }
}

/// Forces every class whose global-model probability lies in the closed
/// interval `[tau - eps, tau + eps]` to unknown; other classes keep their
/// base state.
pub fn calibrate_states(
    global_probs: &[f64],
    base: &LabelStateVector,
    cfg: &CalibrationConfig,
) -> Result<LabelStateVector> {
    if global_probs.len() != base.len() {
        return Err(CamleError::Length(global_probs.len(), base.len()));
    }
    if let Some((class, &value)) = global_probs
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(CamleError::Probability { class, value });
    }
    Ok(LabelStateVector(
        global_probs
            .iter()
            .zip(base.states())
            .map(|(&p, &s)| {
                if cfg.is_uncertain(p) {
                    LabelState::Unknown
                } else {
                    s
                }
            })
            .collect(),
    ))
}

/// `l~_c = l_c + s_c` for every class.
pub fn compose_masked_embeddings(
    labels: &EmbeddingMatrix,
    states: &LabelStateVector,
    state_emb: &StateEmbeddings,
) -> Result<Tensor> {
    if labels.dim() != state_emb.dim() {
        return Err(CamleError::Width {
            labels: labels.dim(),
            states: state_emb.dim(),
        });
    }
    if labels.num_classes() != states.len() {
        return Err(CamleError::Length(labels.num_classes(), states.len()));
    }
    let d = labels.dim();
    let mut data = Vec::with_capacity(states.len() * d);
    for (c, s) in states.states().iter().enumerate() {
        data.extend(
            labels
                .row(c)
                .iter()
                .zip(state_emb.get(*s))
                .map(|(l, v)| l + v),
        );
    }
    Ok(Tensor::matrix(states.len(), d, data).expect("sized"))
}

/// Label-mask-training baseline: draws `f` uniformly from `range`, hides
/// `ceil(f * C)` uniformly chosen classes and reveals the rest from `y`.
pub fn random_label_mask_with(
    y: &[f64],
    range: (f64, f64),
    rng: &mut seed::Rng,
) -> Result<LabelStateVector> {
    let (lo, hi) = range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(CamleError::MaskRange(lo, hi));
    }
    let c = y.len();
    let f = lo + (hi - lo) * rng.random::<f64>();
    // Guard against 0.3 * 10 style products landing a hair above an integer.
    let count = (((f * c as f64) - 1e-9).ceil().max(0.0) as usize).min(c);
    let mut states = LabelStateVector::from_labels(y);
    for i in index::sample(rng, c, count) {
        states.0[i] = LabelState::Unknown;
    }
    Ok(states)
}

pub fn random_label_mask(y: &[f64], range: (f64, f64), seed: u64) -> Result<LabelStateVector> {
    random_label_mask_with(y, range, &mut seed::rng(seed))
}

/// All classes unknown; the mask used for prediction.
pub fn inference_mask(num_classes: usize) -> LabelStateVector {
    LabelStateVector(vec![LabelState::Unknown; num_classes])
}

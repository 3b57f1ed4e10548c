//! The federated round loop: client sampling, local training, weighted
//! averaging of client parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camle::{
    calibrate_states, inference_mask, random_label_mask_with, CalibrationConfig, CamleError,
    LabelStateVector,
};
use crate::datagen::{FederatedDataset, Sample};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::model::{init_params, Bound, LabelGuidedTransformer, LabelTokens, ModelError};
use crate::params::ParameterSet;
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("cannot sample {requested} clients out of {available}")]
    TooManyClients { requested: usize, available: usize },
    #[error("client {0} has no data")]
    EmptyClient(usize),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        source: Box<FederationError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Camle(#[from] CamleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, FederationError>;

/// Training arm. Each arm fixes how label tokens enter the model and how
/// label states are chosen during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// No label tokens; plain BCE on every class.
    #[serde(rename = "fedavg-plain")]
    FedavgPlain,
    /// Learned label embeddings, random label masks.
    #[serde(rename = "fedctran")]
    Fedctran,
    /// Learned label embeddings, masks from the global model's confidence.
    #[serde(rename = "fedctran+camle")]
    FedctranCamle,
    /// Frozen label embeddings, random label masks.
    #[serde(rename = "fedctran+ule")]
    FedctranUle,
    /// Frozen label embeddings, masks from the global model's confidence.
    #[serde(rename = "fedlgt")]
    Fedlgt,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::FedavgPlain,
        Mode::Fedctran,
        Mode::FedctranCamle,
        Mode::FedctranUle,
        Mode::Fedlgt,
    ];

    /// The four ablation arms in table order.
    pub const ABLATION: [Mode; 4] = [
        Mode::Fedctran,
        Mode::FedctranCamle,
        Mode::FedctranUle,
        Mode::Fedlgt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedavgPlain => "fedavg-plain",
            Mode::Fedctran => "fedctran",
            Mode::FedctranCamle => "fedctran+camle",
            Mode::FedctranUle => "fedctran+ule",
            Mode::Fedlgt => "fedlgt",
        }
    }

    pub fn table_label(self) -> &'static str {
        match self {
            Mode::FedavgPlain => "FedAvg",
            Mode::Fedctran => "FedC-Tran",
            Mode::FedctranCamle => "FedC-Tran + CA-MLE",
            Mode::FedctranUle => "FedC-Tran + ULE",
            Mode::Fedlgt => "Ours",
        }
    }

    pub fn label_tokens(self) -> LabelTokens {
        match self {
            Mode::FedavgPlain => LabelTokens::None,
            Mode::Fedctran | Mode::FedctranCamle => LabelTokens::Learned,
            Mode::FedctranUle | Mode::Fedlgt => LabelTokens::Fixed,
        }
    }

    pub fn uses_camle(self) -> bool {
        matches!(self, Mode::FedctranCamle | Mode::Fedlgt)
    }
}

impl std::str::FromStr for Mode {
    type Err = FederationError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FederationError::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Uniform,
    DataProportional,
}

/// When CA-MLE queries the global model. The global model does not change
/// during a round, so both give the same states; per-epoch batches the
/// queries differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationSchedule {
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub total_clients: usize,
    pub active_fraction: f64,
    pub sampling: Sampling,
    pub seed: u64,
    pub mode: Mode,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Range of the fraction of labels hidden by random label masks.
    pub mask_fraction: (f64, f64),
    pub calibration: CalibrationConfig,
    pub calibration_schedule: CalibrationSchedule,
    /// Evaluate the global model on the test split every this many rounds
    /// (and after the last round); 0 disables evaluation.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 5,
            total_clients: 10,
            active_fraction: 0.5,
            sampling: Sampling::DataProportional,
            seed: 0,
            mode: Mode::Fedlgt,
            batch_size: 16,
            learning_rate: 1e-4,
            mask_fraction: (0.25, 1.0),
            calibration: CalibrationConfig::default(),
            calibration_schedule: CalibrationSchedule::PerBatch,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(FederationError::Config(m.to_string()));
        if self.local_epochs == 0 || self.total_clients == 0 || self.batch_size == 0 {
            return fail("local_epochs, total_clients and batch_size must be at least 1");
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return fail("active_fraction must lie in (0, 1]");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        let (lo, hi) = self.mask_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return fail("mask_fraction must be a sub-range of [0, 1]");
        }
        self.calibration.validate()?;
        Ok(())
    }

    /// `ceil(rho * K)`.
    pub fn clients_per_round(&self) -> usize {
        // Guard against 0.3 * 10 style products landing a hair above an integer.
        ((self.active_fraction * self.total_clients as f64 - 1e-9).ceil() as usize)
            .clamp(1, self.total_clients)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Picks `r` distinct clients. Data-proportional sampling makes successive
/// weighted draws without replacement.
pub fn sample_clients(
    sizes: &[usize],
    r: usize,
    strategy: Sampling,
    rng: &mut seed::Rng,
) -> Result<Vec<usize>> {
    let k = sizes.len();
    if r > k {
        return Err(FederationError::TooManyClients {
            requested: r,
            available: k,
        });
    }
    Ok(match strategy {
        Sampling::Uniform => {
            let mut ids: Vec<usize> = (0..k).collect();
            let (chosen, _) = ids.partial_shuffle(rng, r);
            chosen.to_vec()
        }
        Sampling::DataProportional => {
            let mut weights: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
            let mut picked = Vec::with_capacity(r);
            for _ in 0..r {
                let total: f64 = weights.iter().sum();
                let id = if total > 0.0 {
                    let u = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut chosen = None;
                    for (i, &w) in weights.iter().enumerate() {
                        acc += w;
                        if w > 0.0 && u < acc {
                            chosen = Some(i);
                            break;
                        }
                    }
                    // Rounding can leave `u` at the very top; take the last live id.
                    chosen.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).expect("live"))
                } else {
                    // Only zero-size clients remain: fall back to uniform.
                    let live: Vec<usize> = (0..k).filter(|i| !picked.contains(i)).collect();
                    live[rng.random_range(0..live.len())]
                };
                weights[id] = 0.0;
                picked.push(id);
            }
            picked
        }
    })
}

/// `|D_k| / sum_j |D_j|` over the given clients.
pub fn aggregation_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Size-weighted mean of client parameters, accumulated in the order given.
pub fn aggregate(locals: &[ParameterSet], sizes: &[usize]) -> Result<ParameterSet> {
    let first = locals
        .first()
        .ok_or_else(|| FederationError::Config("nothing to aggregate".into()))?;
    if locals.len() != sizes.len() {
        return Err(FederationError::Config(format!(
            "{} parameter sets but {} sizes",
            locals.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(FederationError::Config(
            "client sizes must be positive".into(),
        ));
    }
    for l in &locals[1..] {
        first.check_compatible(l)?;
    }
    // Accumulating offsets from the first client gives the same mean as
    // `sum_k w_k x_k` but returns identical inputs bit for bit.
    let weights = aggregation_weights(sizes);
    let mut out = first.clone();
    for (local, &w) in locals.iter().zip(&weights).skip(1) {
        for (name, acc) in out.iter_mut() {
            let src = local.get(name).expect("checked").data();
            let base = first.get(name).expect("checked").data();
            for ((a, s), b) in acc.data_mut().iter_mut().zip(src).zip(base) {
                *a += w * (s - b);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub params: ParameterSet,
    pub steps: usize,
    /// Mean masked loss over the final epoch's batches that had a signal,
    /// or 0 when none did.
    pub final_loss: f64,
}

/// Label states for one training sample under `mode`.
fn training_states(
    mode: Mode,
    sample: &Sample,
    global_probs: Option<&[f64]>,
    cfg: &FederationConfig,
    rng: &mut seed::Rng,
) -> Result<LabelStateVector> {
    Ok(match mode {
        Mode::FedavgPlain => inference_mask(sample.labels.len()),
        Mode::Fedctran | Mode::FedctranUle => {
            random_label_mask_with(&sample.labels, cfg.mask_fraction, rng)?
        }
        Mode::FedctranCamle | Mode::Fedlgt => calibrate_states(
            global_probs.expect("calibration needs global probabilities"),
            &LabelStateVector::from_labels(&sample.labels),
            &cfg.calibration,
        )?,
    })
}

/// Trains a copy of `global` on one client's shard for `local_epochs`
/// epochs of shuffled mini-batches, one Adam step per batch.
pub fn local_update(
    model: &LabelGuidedTransformer,
    global: &ParameterSet,
    data: &[Sample],
    cfg: &FederationConfig,
    seed: u64,
) -> Result<LocalResult> {
    if data.is_empty() {
        return Err(FederationError::EmptyClient(usize::MAX));
    }
    let mut params = global.clone();
    let mut adam = AdamState::new(&params);
    let adam_cfg = cfg.adam();
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let camle = cfg.mode.uses_camle();
    let predict = |i: usize| model.predict(global, &data[i].features);
    let mut steps = 0;
    let mut final_loss = 0.0;

    for _epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let epoch_probs: Option<Vec<Vec<f64>>> =
            if camle && cfg.calibration_schedule == CalibrationSchedule::PerEpoch {
                Some(
                    (0..data.len())
                        .map(predict)
                        .collect::<std::result::Result<_, _>>()?,
                )
            } else {
                None
            };
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut states = Vec::with_capacity(batch.len());
            for &i in batch {
                let probs = match (&epoch_probs, camle) {
                    (Some(all), _) => Some(all[i].clone()),
                    (None, true) => Some(predict(i)?),
                    (None, false) => None,
                };
                states.push(training_states(
                    cfg.mode,
                    &data[i],
                    probs.as_deref(),
                    cfg,
                    &mut rng,
                )?);
            }
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &params);
            let feats: Vec<&[f64]> = batch.iter().map(|&i| data[i].features.as_slice()).collect();
            let logits = model.forward_batch(&mut g, &bound, &feats, &states)?;
            let targets: Vec<f64> = batch
                .iter()
                .flat_map(|&i| data[i].labels.iter().copied())
                .collect();
            let mask: Vec<bool> = states.iter().flat_map(|s| s.loss_mask()).collect();
            let loss = g.masked_bce(logits, &targets, &mask)?;
            let grads = g.gradients(loss.node, &params)?;
            adam.step(&mut params, &grads, &adam_cfg)?;
            steps += 1;
            if !loss.no_signal {
                loss_sum += g.value(loss.node).data()[0];
                loss_batches += 1;
            }
        }
        final_loss = if loss_batches > 0 {
            loss_sum / loss_batches as f64
        } else {
            0.0
        };
    }
    Ok(LocalResult {
        params,
        steps,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<usize>,
    pub sizes: Vec<usize>,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub metrics: Option<MetricsReport>,
    /// Excluded from equality-sensitive logs; everything else is a pure
    /// function of the config.
    pub wall_time_ms: u64,
}

impl RoundReport {
    /// The report without timing, for byte-stable logs.
    pub fn deterministic(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("struct").remove("wall_time_ms");
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: ParameterSet,
    pub reports: Vec<RoundReport>,
}

pub fn evaluate_global(
    model: &LabelGuidedTransformer,
    params: &ParameterSet,
    test: &[Sample],
) -> Result<MetricsReport> {
    let probs = test
        .par_iter()
        .map(|s| model.predict(params, &s.features))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let targets: Vec<Vec<f64>> = test.iter().map(|s| s.labels.clone()).collect();
    Ok(metrics::evaluate(&probs, &targets)?)
}

/// Seed of the stream that picks round `t`'s clients. Depends only on the
/// run seed, so every arm of an ablation sees the same client sequence.
pub fn sampling_seed(run_seed: u64, round: usize) -> u64 {
    seed::derive(seed::derive_str(run_seed, "sampling"), &[round as u64])
}

pub fn client_seed(run_seed: u64, round: usize, client: usize) -> u64 {
    seed::derive(
        seed::derive_str(run_seed, "local"),
        &[round as u64, client as u64],
    )
}

pub fn initial_params(model: &LabelGuidedTransformer, run_seed: u64) -> Result<ParameterSet> {
    Ok(init_params(
        &model.config,
        seed::derive_str(run_seed, "init"),
    )?)
}

/// Runs `cfg.rounds` rounds starting from `init`. `on_round` sees each
/// report as soon as it is complete.
pub fn run_training_from(
    cfg: &FederationConfig,
    data: &FederatedDataset,
    model: &LabelGuidedTransformer,
    init: ParameterSet,
    mut on_round: impl FnMut(&RoundReport, &ParameterSet),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if cfg.total_clients != data.num_clients() {
        return Err(FederationError::Config(format!(
            "config has {} clients but the dataset has {}",
            cfg.total_clients,
            data.num_clients()
        )));
    }
    if model.config.label_tokens != cfg.mode.label_tokens() {
        return Err(FederationError::Config(format!(
            "mode {} needs label tokens {:?}, model has {:?}",
            cfg.mode.name(),
            cfg.mode.label_tokens(),
            model.config.label_tokens
        )));
    }
    if model.config.num_classes != data.num_classes || model.config.feature_dim != data.feature_dim
    {
        return Err(FederationError::Config(
            "model and dataset disagree on classes or feature width".into(),
        ));
    }
    if let Some(k) = data.clients.iter().position(Vec::is_empty) {
        return Err(FederationError::EmptyClient(k));
    }

    let all_sizes = data.client_sizes();
    let r = cfg.clients_per_round();
    let mut global = init;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let start = Instant::now();
        let mut ids = sample_clients(
            &all_sizes,
            r,
            cfg.sampling,
            &mut seed::rng(sampling_seed(cfg.seed, t)),
        )?;
        ids.sort_unstable();
        let results = ids
            .par_iter()
            .map(|&k| {
                local_update(
                    model,
                    &global,
                    &data.clients[k],
                    cfg,
                    client_seed(cfg.seed, t, k),
                )
                .map_err(|e| FederationError::Client {
                    client: k,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<usize> = ids.iter().map(|&k| all_sizes[k]).collect();
        let locals: Vec<ParameterSet> = results.iter().map(|r| r.params.clone()).collect();
        global = aggregate(&locals, &sizes)?;
        let last = t + 1 == cfg.rounds;
        let metrics = if cfg.eval_every > 0 && ((t + 1) % cfg.eval_every == 0 || last) {
            Some(evaluate_global(model, &global, &data.test)?)
        } else {
            None
        };
        let report = RoundReport {
            round: t,
            clients: ids,
            weights: aggregation_weights(&sizes),
            sizes,
            losses: results.iter().map(|r| r.final_loss).collect(),
            metrics,
            wall_time_ms: start.elapsed().as_millis() as u64,
        };
        on_round(&report, &global);
        reports.push(report);
    }
    Ok(TrainingOutcome {
        params: global,
        reports,
    })
}

pub fn run_training(
    cfg: &FederationConfig,
    data: &FederatedDataset,
    model: &LabelGuidedTransformer,
) -> Result<TrainingOutcome> {
    let init = initial_params(model, cfg.seed)?;
    run_training_from(cfg, data, model, init, |_, _| {})
}

/// Frozen-input snapshot used to show that training never touches the
/// universal label embeddings.
pub fn frozen_label_bytes(model: &LabelGuidedTransformer) -> Option<Vec<u8>> {
    model.guide.labels.as_ref().map(|l| l.rows().to_le_bytes())
}

/// The learned label-embedding tensor of a parameter set, if the mode has one.
pub fn learned_label_embeddings(params: &ParameterSet) -> Option<&Tensor> {
    params.get("label_embeddings")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn weighted_mean_examples() {
        let out = aggregate(&[scalar_set(0.0), scalar_set(4.0)], &[1, 3]).unwrap();
        assert_eq!(out.get("w").unwrap().data()[0], 3.0);
        let out = aggregate(
            &[scalar_set(1.0), scalar_set(2.0), scalar_set(3.0)],
            &[2, 3, 5],
        )
        .unwrap();
        assert_eq!(out.get("w").unwrap().data()[0], 2.3);
    }

    #[test]
    fn identical_locals_are_a_fixed_point() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::vector(vec![0.1, -2.5, 3.75]));
        p.insert("b", Tensor::matrix(1, 2, vec![1e-3, 7.0]).unwrap());
        let out = aggregate(&[p.clone(), p.clone(), p.clone()], &[5, 7, 11]).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn aggregate_rejects_mismatched_sets() {
        let mut other = ParameterSet::new();
        other.insert("v", Tensor::scalar(1.0));
        assert!(aggregate(&[scalar_set(1.0), other], &[1, 1]).is_err());
        assert!(aggregate(&[scalar_set(1.0)], &[0]).is_err());
    }

    #[test]
    fn clients_per_round_is_ceiling() {
        let cfg = |k, rho| FederationConfig {
            total_clients: k,
            active_fraction: rho,
            ..FederationConfig::default()
        };
        assert_eq!(cfg(10, 0.3).clients_per_round(), 3);
        assert_eq!(cfg(10, 0.31).clients_per_round(), 4);
        assert_eq!(cfg(20, 0.5).clients_per_round(), 10);
        assert_eq!(cfg(3, 1.0).clients_per_round(), 3);
        assert_eq!(cfg(7, 0.01).clients_per_round(), 1);
    }

    #[test]
    fn sampling_all_clients_returns_everyone() {
        for s in [Sampling::Uniform, Sampling::DataProportional] {
            let mut ids = sample_clients(&[3, 1, 4, 1, 5], 5, s, &mut seed::rng(1)).unwrap();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        }
        assert!(matches!(
            sample_clients(&[1, 2], 3, Sampling::Uniform, &mut seed::rng(1)),
            Err(FederationError::TooManyClients { .. })
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("fedprox".parse::<Mode>().is_err());
    }
}

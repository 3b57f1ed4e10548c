//! Synthetic federated multi-label data and partitioners.
//!
//! Every client draws labels from its own clique of classes, so clients
//! disagree about which labels co-occur, while class prototypes in feature
//! space are global and a single good model exists. Client sizes follow a
//! rank-size power law to give quantity skew.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("clique {clique} references class {class}, but there are only {classes} classes")]
    CliqueClass {
        clique: usize,
        class: usize,
        classes: usize,
    },
    #[error("cannot partition {samples} samples into {clients} non-empty shards")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("no partition with every shard non-empty after {0} attempts")]
    EmptyShard(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}: {reason}")]
    Format { file: String, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const FORMAT_TAG: &str = "FDS1";
const MAX_PARTITION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Rank-size exponent `a`: the client of rank `r` holds about
    /// `max_samples * r^-a` samples, clamped to `[min_samples, max_samples]`.
    pub size_exponent: f64,
    pub min_samples: usize,
    pub max_samples: usize,
    /// Client `k` uses `cliques[k % cliques.len()]`.
    pub cliques: Vec<Vec<usize>>,
    /// Chance that each other clique member joins the anchor class.
    pub co_occurrence: f64,
    /// Chance that each class outside the clique is present.
    pub background: f64,
    pub noise: f64,
    pub test_samples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.num_clients == 0 || self.num_classes == 0 || self.feature_dim == 0 {
            return fail("num_clients, num_classes and feature_dim must be positive");
        }
        if self.min_samples == 0 || self.min_samples > self.max_samples {
            return fail("need 1 <= min_samples <= max_samples");
        }
        if !(self.size_exponent >= 0.0 && self.size_exponent.is_finite()) {
            return fail("size_exponent must be finite and non-negative");
        }
        for p in [self.co_occurrence, self.background] {
            if !(0.0..=1.0).contains(&p) {
                return fail("probabilities must lie in [0, 1]");
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and non-negative");
        }
        if self.cliques.is_empty() || self.cliques.iter().any(Vec::is_empty) {
            return fail("need at least one clique and no empty cliques");
        }
        for (i, q) in self.cliques.iter().enumerate() {
            if let Some(&c) = q.iter().find(|&&c| c >= self.num_classes) {
                return Err(DataError::CliqueClass {
                    clique: i,
                    class: c,
                    classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn clique_of(&self, client: usize) -> &[usize] {
        &self.cliques[client % self.cliques.len()]
    }

    /// Size of the client at 1-based `rank`.
    pub fn size_at_rank(&self, rank: usize) -> usize {
        let raw = self.max_samples as f64 * (rank as f64).powf(-self.size_exponent);
        (raw.round() as usize).clamp(self.min_samples, self.max_samples)
    }
}

/// Splits `0..num_classes` into consecutive groups of `size` (the last one
/// may be shorter).
pub fn disjoint_cliques(num_classes: usize, size: usize) -> Vec<Vec<usize>> {
    (0..num_classes)
        .collect::<Vec<_>>()
        .chunks(size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Binary, stored as 0.0 / 1.0.
    pub labels: Vec<f64>,
}

impl Sample {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0.5)
            .map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Skew {
    Iid,
    LabelDirichlet { alpha: f64 },
}

/// How a dataset came to be; written next to the shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "kebab-case")]
pub enum DatasetOrigin {
    Generated(DatasetSpec),
    Partitioned {
        num_clients: usize,
        skew: Skew,
        test_fraction: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<Vec<Sample>>,
    pub test: Vec<Sample>,
    pub origin: DatasetOrigin,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn total_train(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }
}

/// Unit-norm Gaussian prototypes, one per class, shared by every client.
pub fn class_prototypes(num_classes: usize, feature_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed::derive_str(seed, "prototypes"));
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn draw_sample(
    spec: &DatasetSpec,
    clique: &[usize],
    prototypes: &[Vec<f64>],
    rng: &mut seed::Rng,
) -> Sample {
    let c = spec.num_classes;
    let mut labels = vec![0.0; c];
    let anchor = clique[rng.random_range(0..clique.len())];
    labels[anchor] = 1.0;
    for &m in clique {
        if m != anchor && rng.random_bool(spec.co_occurrence) {
            labels[m] = 1.0;
        }
    }
    for (k, y) in labels.iter_mut().enumerate() {
        if !clique.contains(&k) && rng.random_bool(spec.background) {
            *y = 1.0;
        }
    }
    let mut features = vec![0.0; spec.feature_dim];
    for (k, proto) in prototypes.iter().enumerate() {
        if labels[k] > 0.5 {
            for (f, p) in features.iter_mut().zip(proto) {
                *f += p;
            }
        }
    }
    if spec.noise > 0.0 {
        for f in features.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *f += spec.noise * z;
        }
    }
    Sample { features, labels }
}

pub fn generate(spec: &DatasetSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let prototypes = class_prototypes(spec.num_classes, spec.feature_dim, spec.seed);
    let mut ranks: Vec<usize> = (1..=spec.num_clients).collect();
    ranks.shuffle(&mut seed::rng(seed::derive_str(spec.seed, "ranks")));

    let clients = (0..spec.num_clients)
        .map(|k| {
            let mut rng = seed::rng(seed::derive(
                seed::derive_str(spec.seed, "client"),
                &[k as u64],
            ));
            let n = spec.size_at_rank(ranks[k]);
            (0..n)
                .map(|_| draw_sample(spec, spec.clique_of(k), &prototypes, &mut rng))
                .collect()
        })
        .collect();

    // Test samples follow the law of a uniformly chosen client.
    let mut rng = seed::rng(seed::derive_str(spec.seed, "test"));
    let test = (0..spec.test_samples)
        .map(|_| {
            let k = rng.random_range(0..spec.num_clients);
            draw_sample(spec, spec.clique_of(k), &prototypes, &mut rng)
        })
        .collect();

    Ok(FederatedDataset {
        clients,
        test,
        origin: DatasetOrigin::Generated(spec.clone()),
        feature_dim: spec.feature_dim,
        num_classes: spec.num_classes,
    })
}

/// Normalised Gamma draws: one Dirichlet(alpha, ..., alpha) vector.
pub fn dirichlet(k: usize, alpha: f64, rng: &mut seed::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / k as f64);
    }
    v
}

fn categorical(weights: &[f64], rng: &mut seed::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Splits an existing sample pool into `num_clients` shards and a test split.
/// The first `round(test_fraction * n)` shuffled samples become the test split.
/// Under label-Dirichlet skew each sample goes by its first positive class
/// (samples without positives form one extra group).
pub fn partition_existing(
    samples: Vec<Sample>,
    num_clients: usize,
    skew: Skew,
    test_fraction: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    let first = samples.first().ok_or(DataError::TooFewSamples {
        samples: 0,
        clients: num_clients,
    })?;
    let (feature_dim, num_classes) = (first.features.len(), first.labels.len());
    if samples
        .iter()
        .any(|s| s.features.len() != feature_dim || s.labels.len() != num_classes)
    {
        return Err(DataError::Spec("samples have inconsistent widths".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::Spec("test_fraction must lie in [0, 1)".into()));
    }
    if let Skew::LabelDirichlet { alpha } = skew {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(DataError::Spec("dirichlet alpha must be positive".into()));
        }
    }
    let mut rng = seed::rng(seed::derive_str(seed, "partition"));
    let mut pool = samples;
    pool.shuffle(&mut rng);
    let n_test = (test_fraction * pool.len() as f64).round() as usize;
    let train = pool.split_off(n_test);
    let test = pool;
    if num_clients == 0 || train.len() < num_clients {
        return Err(DataError::TooFewSamples {
            samples: train.len(),
            clients: num_clients,
        });
    }

    let assignment: Vec<usize> = match skew {
        Skew::Iid => (0..train.len())
            .map(|i| i * num_clients / train.len())
            .collect(),
        Skew::LabelDirichlet { alpha } => {
            let group = |s: &Sample| s.positives().next().unwrap_or(num_classes);
            let mut found = None;
            for _ in 0..MAX_PARTITION_ATTEMPTS {
                let props: Vec<Vec<f64>> = (0..=num_classes)
                    .map(|_| dirichlet(num_clients, alpha, &mut rng))
                    .collect();
                let a: Vec<usize> = train
                    .iter()
                    .map(|s| categorical(&props[group(s)], &mut rng))
                    .collect();
                let mut seen = vec![false; num_clients];
                a.iter().for_each(|&k| seen[k] = true);
                if seen.iter().all(|&b| b) {
                    found = Some(a);
                    break;
                }
            }
            found.ok_or(DataError::EmptyShard(MAX_PARTITION_ATTEMPTS))?
        }
    };
    let mut clients = vec![Vec::new(); num_clients];
    for (s, k) in train.into_iter().zip(assignment) {
        clients[k].push(s);
    }
    Ok(FederatedDataset {
        clients,
        test,
        origin: DatasetOrigin::Partitioned {
            num_clients,
            skew,
            test_fraction,
            seed,
        },
        feature_dim,
        num_classes,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn format_shard(samples: &[Sample], feature_dim: usize, num_classes: usize) -> String {
    let mut out = format!(
        "{FORMAT_TAG} {} {feature_dim} {num_classes}\n",
        samples.len()
    );
    for s in samples {
        let f: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
        let y: Vec<&str> = s
            .labels
            .iter()
            .map(|&v| if v > 0.5 { "1" } else { "0" })
            .collect();
        let _ = writeln!(out, "{}|{}", f.join(","), y.join(","));
    }
    out
}

pub fn parse_shard(text: &str, file: &str) -> Result<(Vec<Sample>, usize, usize)> {
    let bad = |reason: String| DataError::Format {
        file: file.to_string(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.first() != Some(&FORMAT_TAG) {
        return Err(bad(format!(
            "expected `{FORMAT_TAG}` header, found `{header}`"
        )));
    }
    let nums: Vec<usize> = parts[1..]
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| bad(format!("bad header field `{p}`")))
        })
        .collect::<Result<_>>()?;
    let [n, fd, c] = nums[..] else {
        return Err(bad("header needs `<n> <feature_dim> <C>`".into()));
    };
    let mut samples = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (f, y) = line
            .split_once('|')
            .ok_or_else(|| bad(format!("sample {i}: missing `|`")))?;
        let features: Vec<f64> = f
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| bad(format!("sample {i}: bad feature `{v}`")))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<f64> = y
            .split(',')
            .map(|v| match v {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                _ => Err(bad(format!("sample {i}: label `{v}` is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        if features.len() != fd || labels.len() != c {
            return Err(bad(format!(
                "sample {i}: expected {fd} features and {c} labels, found {} and {}",
                features.len(),
                labels.len()
            )));
        }
        samples.push(Sample { features, labels });
    }
    if samples.len() != n {
        return Err(bad(format!(
            "header promises {n} samples, found {}",
            samples.len()
        )));
    }
    Ok((samples, fd, c))
}

pub fn save_dataset(ds: &FederatedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec = toml::to_string(&ds.origin).map_err(|e| DataError::Spec(e.to_string()))?;
    let write = |name: String, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(io_err(&path))
    };
    write("spec".into(), spec)?;
    for (k, shard) in ds.clients.iter().enumerate() {
        write(
            format!("client_{k}"),
            format_shard(shard, ds.feature_dim, ds.num_classes),
        )?;
    }
    write(
        "test".into(),
        format_shard(&ds.test, ds.feature_dim, ds.num_classes),
    )
}

pub fn load_dataset(dir: &Path) -> Result<FederatedDataset> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(io_err(&path))
    };
    let origin: DatasetOrigin = toml::from_str(&read("spec")?).map_err(|e| DataError::Format {
        file: "spec".into(),
        reason: e.to_string(),
    })?;
    let (test, feature_dim, num_classes) = parse_shard(&read("test")?, "test")?;
    let mut clients = Vec::new();
    while dir.join(format!("client_{}", clients.len())).exists() {
        let name = format!("client_{}", clients.len());
        let (shard, fd, c) = parse_shard(&read(&name)?, &name)?;
        if (fd, c) != (feature_dim, num_classes) {
            return Err(DataError::Format {
                file: name,
                reason: "widths differ from the test split".into(),
            });
        }
        clients.push(shard);
    }
    if clients.is_empty() {
        return Err(DataError::Format {
            file: "client_0".into(),
            reason: "dataset has no client shards".into(),
        });
    }
    Ok(FederatedDataset {
        clients,
        test,
        origin,
        feature_dim,
        num_classes,
    })
}

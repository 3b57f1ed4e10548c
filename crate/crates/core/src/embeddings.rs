//! Label embeddings and state embeddings.
//!
//! A universal label embedding is a fixed `C x d` matrix shared by every
//! client and never trained. The three state embeddings mark a label token
//! as unknown / positive / negative; unknown is always the zero vector so
//! that an unknown token is exactly its label embedding.
//!
//! On-disk format (`ULE1`):
//!
//! ```text
//! ULE1 <C> <d>
//! <class-name>,<v1>,...,<vd>        (C lines)
//! STATES                            (optional)
//! positive,<v1>,...,<vd>
//! negative,<v1>,...,<vd>
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camle::LabelState;
use crate::seed;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &str = "ULE1";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("expected {expected} class rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("duplicate class name `{0}`")]
    DuplicateName(String),
    #[error("width mismatch: expected {expected}, got {got}")]
    Width { expected: usize, got: usize },
    #[error("coarse class `{0}` maps to no fine classes")]
    EmptyMapping(String),
    #[error("coarse class `{coarse}` references fine row {fine} but only {rows} exist")]
    BadFineId {
        coarse: String,
        fine: usize,
        rows: usize,
    },
    #[error("file has no STATES section")]
    MissingStates,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    File,
    Synthetic,
    Averaged,
}

/// `C` label rows of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    names: Vec<String>,
    rows: Tensor,
    provenance: Provenance,
}

impl EmbeddingMatrix {
    pub fn new(names: Vec<String>, rows: Tensor, provenance: Provenance) -> Result<Self> {
        let (c, _) = rows
            .dims2("embedding matrix")
            .map_err(|e| EmbeddingError::Invalid(e.to_string()))?;
        if names.len() != c {
            return Err(EmbeddingError::RowCount {
                expected: names.len(),
                found: c,
            });
        }
        if let Some(bad) = (0..c).find(|&i| rows.row(i).iter().any(|v| !v.is_finite())) {
            return Err(EmbeddingError::Row {
                row: bad,
                reason: "non-finite value".into(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(EmbeddingError::DuplicateName(n.clone()));
            }
        }
        Ok(Self {
            names,
            rows,
            provenance,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.rows.row(c)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Maps rows to `width` through a fixed seeded Gaussian projection
    /// scaled by `1/sqrt(d)`. Identity when the width already matches.
    pub fn project(&self, width: usize, seed: u64) -> EmbeddingMatrix {
        if width == self.dim() {
            return self.clone();
        }
        let proj = projection_matrix(self.dim(), width, seed);
        let rows = self.rows.matmul(&proj).expect("projection shape");
        EmbeddingMatrix {
            names: self.names.clone(),
            rows,
            provenance: self.provenance,
        }
    }
}

fn projection_matrix(from: usize, to: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed::derive_str(seed, "embedding-projection"));
    let scale = 1.0 / (from as f64).sqrt();
    let data = (0..from * to)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    Tensor::matrix(from, to, data).expect("sized")
}

/// Unknown / positive / negative token offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEmbeddings {
    unknown: Vec<f64>,
    positive: Vec<f64>,
    negative: Vec<f64>,
}

impl StateEmbeddings {
    pub fn new(positive: Vec<f64>, negative: Vec<f64>) -> Result<Self> {
        if positive.len() != negative.len() {
            return Err(EmbeddingError::Width {
                expected: positive.len(),
                got: negative.len(),
            });
        }
        if positive.iter().chain(&negative).any(|v| !v.is_finite()) {
            return Err(EmbeddingError::Invalid("non-finite state embedding".into()));
        }
        Ok(Self {
            unknown: vec![0.0; positive.len()],
            positive,
            negative,
        })
    }

    pub fn dim(&self) -> usize {
        self.unknown.len()
    }

    pub fn get(&self, state: LabelState) -> &[f64] {
        match state {
            LabelState::Unknown => &self.unknown,
            LabelState::Positive => &self.positive,
            LabelState::Negative => &self.negative,
        }
    }

    pub fn positive(&self) -> &[f64] {
        &self.positive
    }

    pub fn negative(&self) -> &[f64] {
        &self.negative
    }

    pub fn project(&self, width: usize, seed: u64) -> StateEmbeddings {
        if width == self.dim() {
            return self.clone();
        }
        let proj = projection_matrix(self.dim(), width, seed);
        let map = |v: &[f64]| {
            Tensor::matrix(1, v.len(), v.to_vec())
                .and_then(|t| t.matmul(&proj))
                .expect("projection shape")
                .into_data()
        };
        StateEmbeddings {
            unknown: vec![0.0; width],
            positive: map(&self.positive),
            negative: map(&self.negative),
        }
    }
}

/// Contents of a `ULE1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub labels: EmbeddingMatrix,
    pub states: Option<StateEmbeddings>,
}

fn parse_row(line: &str, row: usize, width: usize) -> Result<(String, Vec<f64>)> {
    let mut parts = line.split(',');
    let name = parts.next().unwrap_or("").trim().to_string();
    if name.is_empty() {
        return Err(EmbeddingError::Row {
            row,
            reason: "missing class name".into(),
        });
    }
    let values = parts
        .map(|s| {
            let v: f64 = s.trim().parse().map_err(|_| EmbeddingError::Row {
                row,
                reason: format!("`{s}` is not a number"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(EmbeddingError::Row {
                    row,
                    reason: "non-finite value".into(),
                })
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != width {
        return Err(EmbeddingError::Row {
            row,
            reason: format!("expected {width} values, found {}", values.len()),
        });
    }
    Ok((name, values))
}

pub fn parse_embedding_file(text: &str) -> Result<EmbeddingFile> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| EmbeddingError::Header("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != EMBEDDING_MAGIC {
        return Err(EmbeddingError::Header(format!("`{header}`")));
    }
    let c: usize = fields[1]
        .parse()
        .map_err(|_| EmbeddingError::Header(format!("bad class count `{}`", fields[1])))?;
    let d: usize = fields[2]
        .parse()
        .map_err(|_| EmbeddingError::Header(format!("bad dimension `{}`", fields[2])))?;
    if c == 0 || d == 0 {
        return Err(EmbeddingError::Header(format!(
            "class count and dimension must be positive, got {c} and {d}"
        )));
    }

    let mut names = Vec::with_capacity(c);
    let mut data = Vec::with_capacity(c * d);
    let mut states = None;
    let mut row = 0;
    while let Some(line) = lines.next() {
        if line.trim() == "STATES" {
            let mut next = |label: &str| -> Result<Vec<f64>> {
                let line = lines.next().ok_or(EmbeddingError::MissingStates)?;
                let (name, v) = parse_row(line, row, d)?;
                if name != label {
                    return Err(EmbeddingError::Row {
                        row,
                        reason: format!("expected state row `{label}`, found `{name}`"),
                    });
                }
                Ok(v)
            };
            let pos = next("positive")?;
            let neg = next("negative")?;
            states = Some(StateEmbeddings::new(pos, neg)?);
            if let Some(extra) = lines.next() {
                return Err(EmbeddingError::Invalid(format!(
                    "unexpected content after STATES: `{extra}`"
                )));
            }
            break;
        }
        if row >= c {
            return Err(EmbeddingError::RowCount {
                expected: c,
                found: row + 1,
            });
        }
        let (name, values) = parse_row(line, row, d)?;
        if names.contains(&name) {
            return Err(EmbeddingError::DuplicateName(name));
        }
        names.push(name);
        data.extend(values);
        row += 1;
    }
    if row != c {
        return Err(EmbeddingError::RowCount {
            expected: c,
            found: row,
        });
    }
    let rows = Tensor::matrix(c, d, data).expect("sized");
    Ok(EmbeddingFile {
        labels: EmbeddingMatrix::new(names, rows, Provenance::File)?,
        states,
    })
}

pub fn format_embedding_file(labels: &EmbeddingMatrix, states: Option<&StateEmbeddings>) -> String {
    let mut out = format!(
        "{EMBEDDING_MAGIC} {} {}\n",
        labels.num_classes(),
        labels.dim()
    );
    let mut push_row = |name: &str, values: &[f64]| {
        out.push_str(name);
        for v in values {
            // `{}` is the shortest representation that parses back exactly.
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    };
    for (c, name) in labels.names().iter().enumerate() {
        push_row(name, labels.row(c));
    }
    if let Some(s) = states {
        push_row("STATES", &[]);
        push_row("positive", s.positive());
        push_row("negative", s.negative());
    }
    out
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    parse_embedding_file(&read(path)?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    Ok(load_embedding_file(path)?.labels)
}

pub fn write_embedding_file(
    path: &Path,
    labels: &EmbeddingMatrix,
    states: Option<&StateEmbeddings>,
) -> Result<()> {
    std::fs::write(path, format_embedding_file(labels, states)).map_err(|source| {
        EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

fn unit_gaussian_rows(rows: usize, d: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            normalize(&mut v);
            v
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Seeded unit-norm rows; orthonormal (two passes of modified Gram-Schmidt)
/// whenever `d >= C`. Names are `class_<c>`.
pub fn synth_embeddings(num_classes: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    assert!(num_classes >= 1 && dim >= 1, "C and d must be positive");
    let mut rng = seed::rng(seed::derive_str(seed, "synthetic-label-embeddings"));
    let mut rows = unit_gaussian_rows(num_classes, dim, &mut rng);
    if dim >= num_classes {
        for i in 0..num_classes {
            for _pass in 0..2 {
                for j in 0..i {
                    let (done, rest) = rows.split_at_mut(i);
                    let p = dot(&rest[0], &done[j]);
                    for (x, y) in rest[0].iter_mut().zip(&done[j]) {
                        *x -= p * y;
                    }
                }
                normalize(&mut rows[i]);
            }
        }
    }
    let names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    let rows = Tensor::from_rows(&rows).expect("rectangular");
    EmbeddingMatrix::new(names, rows, Provenance::Synthetic).expect("finite")
}

/// One coarse class and the fine rows it averages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseClass {
    pub name: String,
    pub fine_ids: Vec<usize>,
}

/// Row `c` of the result is the arithmetic mean of the fine rows mapped to
/// coarse class `c`.
pub fn coarse_from_fine(
    fine: &EmbeddingMatrix,
    mapping: &[CoarseClass],
) -> Result<EmbeddingMatrix> {
    let d = fine.dim();
    let mut data = Vec::with_capacity(mapping.len() * d);
    for coarse in mapping {
        if coarse.fine_ids.is_empty() {
            return Err(EmbeddingError::EmptyMapping(coarse.name.clone()));
        }
        let mut acc = vec![0.0; d];
        for &f in &coarse.fine_ids {
            if f >= fine.num_classes() {
                return Err(EmbeddingError::BadFineId {
                    coarse: coarse.name.clone(),
                    fine: f,
                    rows: fine.num_classes(),
                });
            }
            for (a, v) in acc.iter_mut().zip(fine.row(f)) {
                *a += v;
            }
        }
        let k = coarse.fine_ids.len() as f64;
        data.extend(acc.into_iter().map(|v| v / k));
    }
    let names = mapping.iter().map(|m| m.name.clone()).collect();
    let rows = Tensor::matrix(mapping.len(), d, data)
        .map_err(|e| EmbeddingError::Invalid(e.to_string()))?;
    EmbeddingMatrix::new(names, rows, Provenance::Averaged)
}

/// Parses a coarse mapping file: one line per coarse class,
/// `<coarse-name>,<fine-name>,<fine-name>,...`, with fine names resolved
/// against `fine`.
pub fn parse_coarse_mapping(text: &str, fine: &EmbeddingMatrix) -> Result<Vec<CoarseClass>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(row, line)| {
            let mut parts = line.split(',').map(str::trim);
            let name = parts.next().unwrap_or_default().to_string();
            let fine_ids = parts
                .map(|f| {
                    fine.names()
                        .iter()
                        .position(|n| n == f)
                        .ok_or_else(|| EmbeddingError::Row {
                            row,
                            reason: format!("unknown fine class `{f}`"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CoarseClass { name, fine_ids })
        })
        .collect()
}

pub fn load_coarse_mapping(path: &Path, fine: &EmbeddingMatrix) -> Result<Vec<CoarseClass>> {
    parse_coarse_mapping(&read(path)?, fine)
}

/// Where positive/negative state vectors come from; unknown is always zero.
#[derive(Debug, Clone, PartialEq)]
pub enum StateSource<'a> {
    File(&'a Path),
    Synthetic { seed: u64 },
}

pub fn make_state_embeddings(dim: usize, source: StateSource<'_>) -> Result<StateEmbeddings> {
    match source {
        StateSource::File(path) => {
            let states = load_embedding_file(path)?
                .states
                .ok_or(EmbeddingError::MissingStates)?;
            if states.dim() != dim {
                return Err(EmbeddingError::Width {
                    expected: dim,
                    got: states.dim(),
                });
            }
            Ok(states)
        }
        StateSource::Synthetic { seed } => {
            let mut rng = seed::rng(seed::derive_str(seed, "synthetic-state-embeddings"));
            let mut rows = unit_gaussian_rows(2, dim, &mut rng);
            let negative = rows.pop().expect("two rows");
            let positive = rows.pop().expect("two rows");
            StateEmbeddings::new(positive, negative)
        }
    }
}

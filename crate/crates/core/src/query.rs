//! Selection of the base classes closest to a support instance.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::membank::MemoryBank;

pub const DEFAULT_TOP_C: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Visual,
    #[default]
    Semantic,
    Oracle,
}

/// Precomputed class similarities; higher is closer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let m = SimilarityMatrix {
            row_labels,
            col_labels,
            scores,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.row_labels.len()
            || self.scores.iter().any(|r| r.len() != self.col_labels.len())
        {
            return Err(Error::InvalidArgument(format!(
                "similarity matrix must be {}×{}",
                self.row_labels.len(),
                self.col_labels.len()
            )));
        }
        if self.scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("similarity matrix has non-finite scores".into()));
        }
        Ok(())
    }

    pub fn is_square(&self) -> bool {
        self.row_labels == self.col_labels
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.scores.len())
                .all(|i| (0..i).all(|j| (self.scores[i][j] - self.scores[j][i]).abs() <= tol))
    }

    pub fn score(&self, row: &str, col: &str) -> Option<f64> {
        let i = self.row_labels.iter().position(|l| l == row)?;
        let j = self.col_labels.iter().position(|l| l == col)?;
        Some(self.scores[i][j])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: SimilarityMatrix = serde_json::from_slice(&raw)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeFile {
    labels: Vec<String>,
    attributes: Vec<Vec<f64>>,
}

/// Category-level attribute vectors with cached unit-norm copies.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTable {
    labels: Vec<String>,
    attributes: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
}

impl AttributeTable {
    pub fn new(labels: Vec<String>, attributes: Vec<Vec<f64>>) -> Result<Self> {
        let dim = attributes.first().map_or(0, Vec::len);
        if labels.len() != attributes.len() || attributes.iter().any(|a| a.len() != dim) {
            return Err(Error::InvalidArgument(
                "attribute table needs one equal-length vector per label".into(),
            ));
        }
        let normalized = attributes
            .iter()
            .map(|a| {
                let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    a.iter().map(|x| x / n).collect()
                } else {
                    a.clone()
                }
            })
            .collect();
        Ok(AttributeTable {
            labels,
            attributes,
            normalized,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn attributes(&self) -> &[Vec<f64>] {
        &self.attributes
    }

    fn unit(&self, label: &str) -> Option<&[f64]> {
        let i = self.labels.iter().position(|l| l == label)?;
        Some(&self.normalized[i])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: AttributeFile = serde_json::from_slice(&raw)?;
        Self::new(f.labels, f.attributes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = AttributeFile {
            labels: self.labels.clone(),
            attributes: self.attributes.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&f)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SemanticSource {
    Matrix(SimilarityMatrix),
    Attributes(AttributeTable),
}

impl SemanticSource {
    fn known(&self) -> usize {
        match self {
            SemanticSource::Matrix(m) => m.row_labels.len(),
            SemanticSource::Attributes(a) => a.labels.len(),
        }
    }

    fn score(&self, row: &str, col: &str) -> Result<f64> {
        let unknown = |label: &str| Error::UnknownLabel {
            label: label.to_string(),
            known: self.known(),
        };
        match self {
            SemanticSource::Matrix(m) => {
                if !m.row_labels.iter().any(|l| l == row) {
                    return Err(unknown(row));
                }
                m.score(row, col).ok_or_else(|| unknown(col))
            }
            SemanticSource::Attributes(t) => {
                let a = t.unit(row).ok_or_else(|| unknown(row))?;
                let b = t.unit(col).ok_or_else(|| unknown(col))?;
                Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
            }
        }
    }
}

/// Class embeddings for oracle querying, e.g. per-class means from an
/// encoder trained on every class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePrototypes {
    pub labels: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
}

impl OraclePrototypes {
    pub fn get(&self, label: &str) -> Result<&[f64]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.prototypes[i].as_slice())
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                known: self.labels.len(),
            })
    }
}

/// Top `c` candidates by descending score, ties broken by ascending label.
fn top_c(mut scored: Vec<(usize, &str, f64)>, c: usize) -> Result<Vec<usize>> {
    if c == 0 || c > scored.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {c} closest classes from {} candidates",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(scored.into_iter().take(c).map(|(i, _, _)| i).collect())
}

fn candidates(labels: &[String], exclude: Option<usize>) -> impl Iterator<Item = (usize, &str)> {
    labels
        .iter()
        .enumerate()
        .filter(move |(i, _)| Some(*i) != exclude)
        .map(|(i, l)| (i, l.as_str()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Bank classes ranked by cosine between the pooled support embedding and
/// each class's mean pooled embedding.
pub fn visual_topc(support: &FeatureMap, bank: &MemoryBank, c: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    if bank.num_classes() == 0 {
        return Err(Error::EmptyBaseSet);
    }
    let e = support.pooled();
    if e.len() != bank.map_shape()[0] {
        return Err(Error::shape("visual_topc", support.tensor.shape(), bank.map_shape()));
    }
    let scored = candidates(bank.labels(), exclude)
        .map(|(i, l)| (i, l, cosine(&e, bank.pooled_mean(i))))
        .collect();
    top_c(scored, c)
}

/// Bank classes ranked by semantic similarity to `label`.
pub fn semantic_topc(
    label: &str,
    source: &SemanticSource,
    bank_labels: &[String],
    c: usize,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    let scored = candidates(bank_labels, exclude)
        .map(|(i, l)| Ok((i, l, source.score(label, l)?)))
        .collect::<Result<Vec<_>>>()?;
    top_c(scored, c)
}

/// Bank classes ranked by Euclidean distance between class prototypes.
pub fn oracle_topc(
    label: &str,
    prototypes: &OraclePrototypes,
    bank_labels: &[String],
    c: usize,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    let p = prototypes.get(label)?;
    let scored = candidates(bank_labels, exclude)
        .map(|(i, l)| {
            let q = prototypes.get(l)?;
            let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((i, l, -d))
        })
        .collect::<Result<Vec<_>>>()?;
    top_c(scored, c)
}

/// Mode dispatch over one bank: returns the `c` closest bank classes for a
/// support of class `label`, never including `exclude`.
#[derive(Clone, Copy)]
pub struct Querier<'a> {
    pub mode: QueryMode,
    pub c: usize,
    pub bank: &'a MemoryBank,
    pub semantic: Option<&'a SemanticSource>,
    pub oracle: Option<&'a OraclePrototypes>,
}

impl<'a> Querier<'a> {
    /// Checks that the inputs the mode needs are present.
    pub fn new(
        mode: QueryMode,
        c: usize,
        bank: &'a MemoryBank,
        semantic: Option<&'a SemanticSource>,
        oracle: Option<&'a OraclePrototypes>,
    ) -> Result<Self> {
        match mode {
            QueryMode::Semantic if semantic.is_none() => {
                return Err(Error::Config("semantic querying needs a similarity matrix or attribute table".into()))
            }
            QueryMode::Oracle if oracle.is_none() => {
                return Err(Error::Config("oracle querying needs oracle prototypes".into()))
            }
            _ => {}
        }
        Ok(Querier {
            mode,
            c,
            bank,
            semantic,
            oracle,
        })
    }

    /// `phi0` is the support's frozen-encoder map, used by visual querying.
    pub fn top(&self, label: &str, phi0: Option<&FeatureMap>, exclude: Option<usize>) -> Result<Vec<usize>> {
        let labels = self.bank.labels();
        match self.mode {
            QueryMode::Visual => {
                let map = phi0.ok_or_else(|| {
                    Error::InvalidArgument("visual querying needs the support's φ₀ features".into())
                })?;
                visual_topc(map, self.bank, self.c, exclude)
            }
            QueryMode::Semantic => semantic_topc(label, self.semantic.expect("checked in new"), labels, self.c, exclude),
            QueryMode::Oracle => oracle_topc(label, self.oracle.expect("checked in new"), labels, self.c, exclude),
        }
    }
}

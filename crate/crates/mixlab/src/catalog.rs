//! Domain catalogs: the ground truth every sampling probability derives from.
//!
//! A [`DomainCatalog`] is the list of domain sizes `|D_1| .. |D_K|` (example
//! or token counts) together with names. Catalogs serialize as a
//! line-delimited text table `id<TAB>name<TAB>size`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One domain: a 1-based contiguous id, a display name, and a positive size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: usize,
    pub name: String,
    pub size: u64,
}

/// The sizes and names of the `K` domains of a mixture.
///
/// Invariants enforced at construction: `K >= 1`, every size `> 0`, ids
/// contiguous from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCatalog {
    domains: Vec<Domain>,
}

impl DomainCatalog {
    /// Build a catalog from `(name, size)` pairs; ids are assigned 1..=K.
    pub fn new(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("catalog must contain at least one domain"));
        }
        let domains = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, size))| {
                if size == 0 {
                    return Err(Error::invalid(format!("domain {name:?} has size 0")));
                }
                Ok(Domain { id: i + 1, name, size })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { domains })
    }

    /// Build a catalog from sizes alone; domains are named `d1..dK`.
    pub fn from_sizes(sizes: &[u64]) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| (format!("d{}", i + 1), s))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.domains.iter().map(|d| d.size).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    /// Total size `N = sum |D_i|`.
    pub fn total(&self) -> u64 {
        self.domains.iter().map(|d| d.size).sum()
    }

    /// Index (0-based) of the largest domain; ties go to the lowest id.
    pub fn largest(&self) -> usize {
        let mut best = 0;
        for (i, d) in self.domains.iter().enumerate() {
            if d.size > self.domains[best].size {
                best = i;
            }
        }
        best
    }

    /// Serialize as `id<TAB>name<TAB>size` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for d in &self.domains {
            out.push_str(&format!("{}\t{}\t{}\n", d.id, d.name, d.size));
        }
        out
    }

    /// Parse the `id<TAB>name<TAB>size` table. Ids must be contiguous from 1.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::invalid(format!("line {}: bad id", lineno + 1)))?;
            let name = fields
                .next()
                .ok_or_else(|| Error::invalid(format!("line {}: missing name", lineno + 1)))?
                .to_string();
            let size: u64 = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::invalid(format!("line {}: bad size", lineno + 1)))?;
            if id != entries.len() + 1 {
                return Err(Error::invalid(format!(
                    "line {}: ids must be contiguous from 1, got {id}",
                    lineno + 1
                )));
            }
            entries.push((name, size));
        }
        Self::new(entries)
    }
}

/// Build a Zipf-shaped catalog: `size_i = max(1, round(unit_size / i^alpha))`.
///
/// `alpha = 0` yields equal sizes; larger `alpha` is more imbalanced.
pub fn zipf_catalog(k: usize, alpha: f64, unit_size: u64) -> Result<DomainCatalog> {
    if k == 0 {
        return Err(Error::invalid("zipf catalog needs K >= 1"));
    }
    if unit_size == 0 {
        return Err(Error::invalid("zipf unit size must be positive"));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!("zipf alpha must be >= 0, got {alpha}")));
    }
    let sizes: Vec<u64> = (1..=k)
        .map(|i| {
            let raw = unit_size as f64 / (i as f64).powf(alpha);
            (raw.round() as u64).max(1)
        })
        .collect();
    DomainCatalog::from_sizes(&sizes)
}

/// A per-domain probability vector: non-negative entries summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Sum-to-one tolerance for probability and weight vectors.
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("probability vector must be non-empty"));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::invalid("probabilities must be finite and >= 0"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::invalid(format!(
                "probabilities must sum to 1 (got {sum})"
            )));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// Per-domain loss weights with unit mean under proportional sampling:
/// `sum_i p(i;1) * w_i = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// The all-ones weight vector (unit mean under any catalog).
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    /// Validate the unit-mean invariant against proportional probabilities.
    pub fn new(w: Vec<f64>, proportional: &ProbVector) -> Result<Self> {
        if w.len() != proportional.len() {
            return Err(Error::invalid("weight/probability length mismatch"));
        }
        if w.iter().any(|&x| !x.is_finite() || x <= 0.0) {
            return Err(Error::invalid("weights must be finite and > 0"));
        }
        let mean: f64 = w
            .iter()
            .zip(proportional.as_slice())
            .map(|(&wi, &pi)| wi * pi)
            .sum();
        if (mean - 1.0).abs() > ProbVector::SUM_TOL {
            return Err(Error::invalid(format!(
                "weights must have unit mean under proportional sampling (got {mean})"
            )));
        }
        Ok(Self(w))
    }

    pub(crate) fn from_raw(w: Vec<f64>) -> Self {
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

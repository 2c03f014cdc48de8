//! Multi-domain dataset construction and seeded batch sampling.
//!
//! Two example families are supported: synthetic regression pairs
//! `(x, y = x . theta* + noise)` with a shared parameter vector plus
//! per-domain offsets, and byte-level text where each example is a sliding
//! window of `c` bytes predicting the next byte. Either way a dataset is a
//! list of domains, each with disjoint train and validation stores, and the
//! catalog of train sizes is the ground truth the sampling probabilities
//! derive from.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::{DomainCatalog, ProbVector, WeightVector};
use crate::error::{Error, Result};
use crate::seed::seeded_rng;

/// Cache file format version; bump when the on-disk layout changes.
const CACHE_VERSION: u32 = 1;
const CACHE_MAGIC: &[u8; 4] = b"MDDS";

/// The examples of one split of one domain.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleStore {
    /// `len * dim` features (row-major) with one target each.
    Regression {
        dim: usize,
        features: Vec<f64>,
        targets: Vec<f64>,
    },
    /// A byte buffer viewed as sliding windows: example `i` is
    /// `data[i..i+context]` predicting `data[i+context]`.
    Bytes { context: usize, data: Vec<u8> },
}

impl ExampleStore {
    pub fn len(&self) -> usize {
        match self {
            ExampleStore::Regression { targets, .. } => targets.len(),
            ExampleStore::Bytes { context, data } => data.len().saturating_sub(*context),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, i: usize) -> ExampleRef<'_> {
        match self {
            ExampleStore::Regression { dim, features, targets } => ExampleRef::Regression {
                x: &features[i * dim..(i + 1) * dim],
                y: targets[i],
            },
            ExampleStore::Bytes { context, data } => ExampleRef::NextByte {
                context: &data[i..i + context],
                next: data[i + context],
            },
        }
    }
}

/// A borrowed view of one training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExampleRef<'a> {
    Regression { x: &'a [f64], y: f64 },
    NextByte { context: &'a [u8], next: u8 },
}

/// One domain: name plus disjoint train/validation stores.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub train: ExampleStore,
    pub valid: ExampleStore,
}

/// An immutable multi-domain dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    domains: Vec<DomainData>,
}

impl MultiDomainDataset {
    /// Assemble from per-domain stores, checking the dataset invariants:
    /// at least one domain, non-empty splits, and a consistent feature
    /// dimension (or context length) across domains.
    pub fn new(domains: Vec<DomainData>) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::invalid("dataset must contain at least one domain"));
        }
        let shape = store_shape(&domains[0].train);
        for d in &domains {
            if d.train.is_empty() || d.valid.is_empty() {
                return Err(Error::invalid(format!(
                    "domain {:?} must have non-empty train and validation splits",
                    d.name
                )));
            }
            for store in [&d.train, &d.valid] {
                if store_shape(store) != shape {
                    return Err(Error::invalid(
                        "all domains must share one example shape (dim or context length)",
                    ));
                }
            }
        }
        Ok(Self { domains })
    }

    pub fn domains(&self) -> &[DomainData] {
        &self.domains
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    /// The catalog of train-split sizes, the basis of all sampling math.
    pub fn catalog(&self) -> DomainCatalog {
        DomainCatalog::new(
            self.domains
                .iter()
                .map(|d| (d.name.clone(), d.train.len() as u64))
                .collect(),
        )
        .expect("dataset invariants imply a valid catalog")
    }

    /// Feature dimension for regression data, next-byte context length for
    /// byte data.
    pub fn example_shape(&self) -> usize {
        store_shape(&self.domains[0].train)
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.domains[0].train, ExampleStore::Regression { .. })
    }
}

fn store_shape(store: &ExampleStore) -> usize {
    match store {
        ExampleStore::Regression { dim, .. } => *dim,
        ExampleStore::Bytes { context, .. } => *context,
    }
}

/// Recipe for a synthetic shared-parameter regression mixture.
///
/// Domain `i` holds `train_sizes[i]` training examples with
/// `x ~ N(0, I_d)` and `y = x . (theta_shared + domain_deltas[i]) + eps`,
/// `eps ~ N(0, noise_sigma^2)`. Validation splits are drawn the same way
/// with `max(valid_min, round(valid_fraction * train_size))` examples, so a
/// tiny domain can still carry a statistically useful validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub feature_dim: usize,
    pub train_sizes: Vec<u64>,
    pub theta_shared: Vec<f64>,
    pub domain_deltas: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub valid_fraction: f64,
    pub valid_min: usize,
}

impl SyntheticTaskSpec {
    /// The per-domain generating parameters `theta_shared + delta_i`.
    pub fn true_params(&self) -> Vec<Vec<f64>> {
        self.domain_deltas
            .iter()
            .map(|delta| {
                self.theta_shared
                    .iter()
                    .zip(delta)
                    .map(|(s, d)| s + d)
                    .collect()
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.train_sizes.is_empty() {
            return Err(Error::invalid("synthetic task needs at least one domain"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        if self.train_sizes.iter().any(|&s| s < 2) {
            return Err(Error::invalid("every domain size must be >= 2"));
        }
        if self.theta_shared.len() != self.feature_dim {
            return Err(Error::invalid("theta_shared length must equal feature_dim"));
        }
        if self.domain_deltas.len() != self.train_sizes.len()
            || self.domain_deltas.iter().any(|d| d.len() != self.feature_dim)
        {
            return Err(Error::invalid(
                "domain_deltas must be K vectors of length feature_dim",
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.valid_fraction) {
            return Err(Error::invalid("valid fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn draw_regression_split(
    rng: &mut impl Rng,
    n: usize,
    theta: &[f64],
    sigma: f64,
) -> ExampleStore {
    let dim = theta.len();
    let mut features = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = 0.0;
        for &t in theta {
            let x: f64 = rng.sample(StandardNormal);
            features.push(x);
            y += x * t;
        }
        if sigma > 0.0 {
            let eps: f64 = rng.sample(StandardNormal);
            y += sigma * eps;
        }
        targets.push(y);
    }
    ExampleStore::Regression { dim, features, targets }
}

/// Generate the synthetic mixture deterministically from `seed`.
pub fn make_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let thetas = spec.true_params();
    let domains = spec
        .train_sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let n_valid = ((spec.valid_fraction * size as f64).round() as usize)
                .max(spec.valid_min)
                .max(1);
            let mut rng_train = seeded_rng(seed, "synthetic-train", i as u64);
            let mut rng_valid = seeded_rng(seed, "synthetic-valid", i as u64);
            DomainData {
                name: format!("d{}", i + 1),
                train: draw_regression_split(&mut rng_train, size as usize, &thetas[i], spec.noise_sigma),
                valid: draw_regression_split(&mut rng_valid, n_valid, &thetas[i], spec.noise_sigma),
            }
        })
        .collect();
    MultiDomainDataset::new(domains)
}

/// Load a byte-level corpus directory.
///
/// Expects one pair of files per domain under `root`:
/// `<domain>.train.txt` and `<domain>.valid.txt`. Domains are ordered by
/// name. Each file must be longer than `context` bytes; a file of `n` bytes
/// yields `n - context` sliding-window examples.
pub fn load_corpus(root: &Path, context: usize) -> Result<MultiDomainDataset> {
    if context == 0 {
        return Err(Error::invalid("context length must be >= 1"));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if let Some(fname) = path.file_name().and_then(|f| f.to_str()) {
            if let Some(stem) = fname.strip_suffix(".train.txt") {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::MissingData(root.join("<domain>.train.txt")));
    }
    let domains = names
        .into_iter()
        .map(|name| {
            let train = read_byte_split(&root.join(format!("{name}.train.txt")), context)?;
            let valid = read_byte_split(&root.join(format!("{name}.valid.txt")), context)?;
            Ok(DomainData { name, train, valid })
        })
        .collect::<Result<Vec<_>>>()?;
    MultiDomainDataset::new(domains)
}

fn read_byte_split(path: &Path, context: usize) -> Result<ExampleStore> {
    if !path.exists() {
        return Err(Error::MissingData(path.to_path_buf()));
    }
    let data = fs::read(path)?;
    if data.len() < context + 1 {
        return Err(Error::invalid(format!(
            "{} holds {} bytes, need at least context + 1 = {}",
            path.display(),
            data.len(),
            context + 1
        )));
    }
    Ok(ExampleStore::Bytes { context, data })
}

/// How domains are assigned to the slots of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Each slot draws its domain independently (the default).
    Mixed,
    /// One domain is drawn per batch and fills every slot.
    Homogeneous,
}

/// One slot of a sampled batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    /// 0-based domain index.
    pub domain: usize,
    /// Example index within the domain's train split.
    pub index: usize,
    /// Loss weight attached to the example (1 under temperature sampling).
    pub weight: f64,
}

/// A sampled minibatch of example handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Resolve items against their dataset, yielding
    /// `(domain id, example, weight)` triples. Ids are 1-based as in the
    /// catalog.
    pub fn resolve<'a>(
        &'a self,
        data: &'a MultiDomainDataset,
    ) -> impl Iterator<Item = (usize, ExampleRef<'a>, f64)> + 'a {
        self.items.iter().map(move |item| {
            (
                item.domain + 1,
                data.domains()[item.domain].train.example(item.index),
                item.weight,
            )
        })
    }

    /// Per-domain draw counts, for plan-state bookkeeping.
    pub fn domain_counts(&self, num_domains: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_domains];
        for item in &self.items {
            counts[item.domain] += 1;
        }
        counts
    }
}

fn draw_domain(probs: &ProbVector, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for i in 0..probs.len() {
        let p = probs.get(i);
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Floating-point edge: u landed on the residual mass past the last
    // positive entry.
    last_nonzero
}

/// Sample a batch of `b` examples: each slot draws a domain from `probs`,
/// then an example uniformly with replacement from that domain's train
/// split, and attaches the domain's weight.
pub fn sample_batch(
    data: &MultiDomainDataset,
    probs: &ProbVector,
    weights: &WeightVector,
    b: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    sample_batch_mode(data, probs, weights, b, BatchMode::Mixed, rng)
}

/// [`sample_batch`] with an explicit batch-composition mode.
pub fn sample_batch_mode(
    data: &MultiDomainDataset,
    probs: &ProbVector,
    weights: &WeightVector,
    b: usize,
    mode: BatchMode,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if b == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if probs.len() != data.num_domains() || weights.len() != data.num_domains() {
        return Err(Error::invalid("probability/weight length must match domains"));
    }
    let mut items = Vec::with_capacity(b);
    let batch_domain = match mode {
        BatchMode::Mixed => None,
        BatchMode::Homogeneous => Some(draw_domain(probs, rng)),
    };
    for _ in 0..b {
        let domain = batch_domain.unwrap_or_else(|| draw_domain(probs, rng));
        let n = data.domains()[domain].train.len();
        let index = rng.random_range(0..n);
        items.push(BatchItem {
            domain,
            index,
            weight: weights.get(domain),
        });
    }
    Ok(Batch { items })
}

// ---------------------------------------------------------------------------
// Binary dataset cache: little-endian, versioned, with the generating seed
// embedded so a cache hit can be trusted.

fn write_store(out: &mut Vec<u8>, store: &ExampleStore) {
    match store {
        ExampleStore::Regression { dim, features, targets } => {
            out.push(0);
            out.extend_from_slice(&(*dim as u64).to_le_bytes());
            out.extend_from_slice(&(targets.len() as u64).to_le_bytes());
            for f in features {
                out.extend_from_slice(&f.to_le_bytes());
            }
            for t in targets {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        ExampleStore::Bytes { context, data } => {
            out.push(1);
            out.extend_from_slice(&(*context as u64).to_le_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(data);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::invalid("dataset cache truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_store(r: &mut Reader) -> Result<ExampleStore> {
    match r.u8()? {
        0 => {
            let dim = r.u64()? as usize;
            let n = r.u64()? as usize;
            let total = n
                .checked_mul(dim)
                .ok_or_else(|| Error::invalid("dataset cache corrupt"))?;
            let mut features = Vec::with_capacity(total.min(r.buf.len() / 8));
            for _ in 0..total {
                features.push(r.f64()?);
            }
            let mut targets = Vec::with_capacity(n.min(r.buf.len() / 8));
            for _ in 0..n {
                targets.push(r.f64()?);
            }
            Ok(ExampleStore::Regression { dim, features, targets })
        }
        1 => {
            let context = r.u64()? as usize;
            let n = r.u64()? as usize;
            Ok(ExampleStore::Bytes {
                context,
                data: r.take(n)?.to_vec(),
            })
        }
        tag => Err(Error::invalid(format!("unknown store tag {tag}"))),
    }
}

/// Serialize a dataset (with its generating seed) to the versioned binary
/// cache format. Byte-identical for identical inputs.
pub fn dataset_to_bytes(data: &MultiDomainDataset, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(data.num_domains() as u32).to_le_bytes());
    for d in data.domains() {
        out.extend_from_slice(&(d.name.len() as u32).to_le_bytes());
        out.extend_from_slice(d.name.as_bytes());
        write_store(&mut out, &d.train);
        write_store(&mut out, &d.valid);
    }
    out
}

/// Parse the binary cache format, returning the dataset and embedded seed.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(MultiDomainDataset, u64)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::invalid("not a dataset cache file"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::invalid(format!(
            "unsupported dataset cache version {version}"
        )));
    }
    let seed = r.u64()?;
    let k = r.u32()? as usize;
    let mut domains = Vec::with_capacity(k);
    for _ in 0..k {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::invalid("invalid domain name in cache"))?;
        let train = read_store(&mut r)?;
        let valid = read_store(&mut r)?;
        domains.push(DomainData { name, train, valid });
    }
    Ok((MultiDomainDataset::new(domains)?, seed))
}

/// Write the dataset cache to a file.
pub fn save_dataset(path: &Path, data: &MultiDomainDataset, seed: u64) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&dataset_to_bytes(data, seed))?;
    Ok(())
}

/// Read a dataset cache from a file.
pub fn load_dataset(path: &Path) -> Result<(MultiDomainDataset, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}

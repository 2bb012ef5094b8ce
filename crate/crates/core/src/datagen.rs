//! Synthetic multi-domain benchmarks.
//!
//! Every instance is generated from a class-dependent semantic factor `s`, a
//! domain-dependent variation factor `v`, and a scalar spurious coordinate
//! whose sign agrees with the (possibly noisy) label with a per-domain
//! probability. The ColoredMNIST-style analog uses two positively correlated
//! training domains and one reversed test domain.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numcore::Tensor;
use crate::rng::std_normal;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("empty view")]
    EmptyView,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: u32,
    pub variation_mean: Vec<f64>,
    /// Probability that the spurious coordinate's sign matches the label sign.
    pub spurious_corr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub name: String,
    pub n_classes: usize,
    pub semantic_dim: usize,
    pub variation_dim: usize,
    pub input_dim: usize,
    pub domains: Vec<DomainSpec>,
    /// Held-out test domain for the default split.
    pub test_domain: u32,
    pub samples_per_domain: usize,
    pub label_noise_rate: f64,
    pub seed: u64,
    pub sigma_s: f64,
    pub sigma_v: f64,
    pub sigma_x: f64,
    /// Standard deviation of the class prototypes.
    pub prototype_scale: f64,
    /// Prototypes are resampled until every pair is at least this far apart.
    pub min_prototype_gap: f64,
    /// Magnitude of the spurious coordinate.
    pub spurious_scale: f64,
    /// Gain of the random mixing matrix.
    pub mixing_gain: f64,
}

impl BenchmarkConfig {
    /// Four classes, three domains with spurious correlations 0.9, 0.8 and 0.1,
    /// 25% label noise; the reversed domain is held out.
    pub fn colored_analog(seed: u64) -> Self {
        Self {
            name: "colored-analog".into(),
            n_classes: 4,
            semantic_dim: 4,
            variation_dim: 2,
            input_dim: 16,
            domains: vec![
                DomainSpec { id: 0, variation_mean: vec![1.0, 0.0], spurious_corr: 0.9 },
                DomainSpec { id: 1, variation_mean: vec![0.0, 1.0], spurious_corr: 0.8 },
                DomainSpec { id: 2, variation_mean: vec![-1.0, -1.0], spurious_corr: 0.1 },
            ],
            test_domain: 2,
            samples_per_domain: 1000,
            label_noise_rate: 0.25,
            seed,
            sigma_s: 0.3,
            sigma_v: 0.2,
            sigma_x: 0.02,
            prototype_scale: 1.5,
            min_prototype_gap: 2.0,
            spurious_scale: 1.0,
            mixing_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.domains.is_empty() {
            return bad("no domains".into());
        }
        if self.samples_per_domain == 0 {
            return bad("samples_per_domain must be >= 1".into());
        }
        if self.semantic_dim == 0 || self.variation_dim == 0 {
            return bad("semantic_dim and variation_dim must be >= 1".into());
        }
        if self.input_dim < self.semantic_dim {
            return bad(format!(
                "input_dim {} is smaller than semantic_dim {}",
                self.input_dim, self.semantic_dim
            ));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return bad(format!("label_noise_rate {} outside [0, 1)", self.label_noise_rate));
        }
        for s in [self.sigma_s, self.sigma_v, self.sigma_x, self.prototype_scale, self.mixing_gain] {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("noise and scale parameters must be finite and >= 0".into());
            }
        }
        let mut ids = BTreeSet::new();
        for d in &self.domains {
            if !ids.insert(d.id) {
                return bad(format!("duplicate domain id {}", d.id));
            }
            if d.variation_mean.len() != self.variation_dim {
                return bad(format!(
                    "domain {} variation_mean has {} entries, expected {}",
                    d.id,
                    d.variation_mean.len(),
                    self.variation_dim
                ));
            }
            if !(0.0..=1.0).contains(&d.spurious_corr) {
                return bad(format!("domain {} spurious_corr outside [0, 1]", d.id));
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                if a.variation_mean == b.variation_mean {
                    return bad(format!("domains {} and {} share a variation mean", a.id, b.id));
                }
            }
        }
        if !ids.contains(&self.test_domain) {
            return bad(format!("test_domain {} is not a configured domain", self.test_domain));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub x: Vec<f64>,
    /// Observed label, after label noise.
    pub y: u32,
    pub e: u32,
    pub true_s: Vec<f64>,
    pub true_v: Vec<f64>,
}

/// Per-instance generative facts that the dataset file does not carry.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub true_class: u32,
    pub spurious: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomainDataset {
    pub n_classes: usize,
    pub semantic_dim: usize,
    pub variation_dim: usize,
    pub input_dim: usize,
    pub n_domains: usize,
    /// Stored domain by domain.
    pub instances: Vec<Instance>,
    test_domains: BTreeSet<u32>,
}

impl MultiDomainDataset {
    pub fn domain_ids(&self) -> BTreeSet<u32> {
        self.instances.iter().map(|i| i.e).collect()
    }

    pub fn test_domains(&self) -> &BTreeSet<u32> {
        &self.test_domains
    }

    pub fn train_domains(&self) -> BTreeSet<u32> {
        self.domain_ids().difference(&self.test_domains).copied().collect()
    }

    /// Re-marks which domain is held out.
    pub fn with_test_domain(mut self, e: u32) -> Result<Self, DataError> {
        if !self.domain_ids().contains(&e) {
            return Err(DataError::Split(format!("domain {e} has no instances")));
        }
        self.test_domains = BTreeSet::from([e]);
        Ok(self)
    }

    pub fn groups(&self) -> BTreeMap<u32, Vec<&Instance>> {
        let mut g: BTreeMap<u32, Vec<&Instance>> = BTreeMap::new();
        for i in &self.instances {
            g.entry(i.e).or_default().push(i);
        }
        g
    }

    pub fn label_sign(&self, y: u32) -> f64 {
        label_sign(y, self.n_classes)
    }
}

/// `+1` for the upper half of the class ids, `-1` for the lower half.
pub fn label_sign(y: u32, n_classes: usize) -> f64 {
    if 2 * y as usize >= n_classes {
        1.0
    } else {
        -1.0
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * std_normal(rng))
        .collect()
}

fn draw_prototypes(cfg: &BenchmarkConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, DataError> {
    for _ in 0..10_000 {
        let protos: Vec<Vec<f64>> = (0..cfg.n_classes)
            .map(|_| normal_vec(rng, cfg.semantic_dim, cfg.prototype_scale))
            .collect();
        let ok = (0..protos.len()).all(|i| {
            (i + 1..protos.len()).all(|j| {
                crate::numcore::l2_distance(&protos[i], &protos[j]).unwrap_or(0.0) >= cfg.min_prototype_gap
            })
        });
        if ok {
            return Ok(protos);
        }
    }
    Err(DataError::Config(format!(
        "could not place {} prototypes {} apart at scale {}",
        cfg.n_classes, cfg.min_prototype_gap, cfg.prototype_scale
    )))
}

/// Generates the benchmark along with per-instance provenance.
pub fn make_benchmark_traced(
    cfg: &BenchmarkConfig,
) -> Result<(MultiDomainDataset, Vec<Provenance>), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = draw_prototypes(cfg, &mut rng)?;
    let z_dim = cfg.semantic_dim + cfg.variation_dim + 1;
    let gain = cfg.mixing_gain / (z_dim as f64).sqrt();
    let mixing: Vec<Vec<f64>> = (0..cfg.input_dim).map(|_| normal_vec(&mut rng, z_dim, gain)).collect();

    let k = cfg.n_classes as u32;
    let mut instances = Vec::with_capacity(cfg.domains.len() * cfg.samples_per_domain);
    let mut provenance = Vec::with_capacity(instances.capacity());
    for d in &cfg.domains {
        for _ in 0..cfg.samples_per_domain {
            let true_class = rng.random_range(0..k);
            let s: Vec<f64> = protos[true_class as usize]
                .iter()
                .zip(normal_vec(&mut rng, cfg.semantic_dim, cfg.sigma_s))
                .map(|(m, j)| m + j)
                .collect();
            let v: Vec<f64> = d
                .variation_mean
                .iter()
                .zip(normal_vec(&mut rng, cfg.variation_dim, cfg.sigma_v))
                .map(|(m, j)| m + j)
                .collect();
            let y = if rng.random_bool(cfg.label_noise_rate) {
                let other = rng.random_range(0..k - 1);
                if other >= true_class {
                    other + 1
                } else {
                    other
                }
            } else {
                true_class
            };
            let agree = rng.random_bool(d.spurious_corr);
            let sign = label_sign(y, cfg.n_classes) * if agree { 1.0 } else { -1.0 };
            let spurious = sign * cfg.spurious_scale;

            let z: Vec<f64> = s.iter().chain(&v).copied().chain([spurious]).collect();
            let x = mixing
                .iter()
                .map(|row| {
                    let pre: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    let noise = std_normal(&mut rng);
                    pre.tanh() + cfg.sigma_x * noise
                })
                .collect();
            instances.push(Instance { x, y, e: d.id, true_s: s, true_v: v });
            provenance.push(Provenance { true_class, spurious });
        }
    }
    let ds = MultiDomainDataset {
        n_classes: cfg.n_classes,
        semantic_dim: cfg.semantic_dim,
        variation_dim: cfg.variation_dim,
        input_dim: cfg.input_dim,
        n_domains: cfg.domains.len(),
        instances,
        test_domains: BTreeSet::from([cfg.test_domain]),
    };
    Ok((ds, provenance))
}

pub fn make_benchmark(cfg: &BenchmarkConfig) -> Result<MultiDomainDataset, DataError> {
    make_benchmark_traced(cfg).map(|(d, _)| d)
}

/// Training-domain instances of the in-distribution classes.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub x: Tensor,
    /// Contiguous class indices `0..n_classes()`.
    pub labels: Vec<usize>,
    pub domains: Vec<u32>,
    /// `class_map[i]` is the original class id of index `i`.
    pub class_map: Vec<u32>,
    pub true_s: Tensor,
    pub true_v: Tensor,
}

impl TrainView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    /// Rows whose domain satisfies `keep`.
    pub fn filter_domains(&self, keep: impl Fn(u32) -> bool) -> Result<TrainView, DataError> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.domains[i])).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<TrainView, DataError> {
        if idx.is_empty() {
            return Err(DataError::EmptyView);
        }
        Ok(TrainView {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            class_map: self.class_map.clone(),
            true_s: self.true_s.select_rows(idx),
            true_v: self.true_v.select_rows(idx),
        })
    }
}

pub const Y_OOD: u8 = 0;
pub const Y_IND: u8 = 1;

/// Test-domain instances of every class, relabelled InD/OOD.
#[derive(Clone, Debug)]
pub struct TestView {
    pub x: Tensor,
    pub original: Vec<u32>,
    /// [`Y_OOD`] or [`Y_IND`].
    pub binary: Vec<u8>,
    pub domains: Vec<u32>,
    /// Same mapping as the matching [`TrainView::class_map`].
    pub class_map: Vec<u32>,
}

impl TestView {
    pub fn len(&self) -> usize {
        self.binary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_empty()
    }
}

fn rows_tensor(rows: &[&[f64]]) -> Result<Tensor, DataError> {
    Tensor::from_rows(rows).map_err(|e| DataError::Split(e.to_string()))
}

pub fn split_ood(
    ds: &MultiDomainDataset,
    ood_classes: &BTreeSet<u32>,
) -> Result<(TrainView, TestView), DataError> {
    if ood_classes.is_empty() {
        return Err(DataError::Split("no OOD class designated".into()));
    }
    if let Some(&c) = ood_classes.iter().find(|&&c| c as usize >= ds.n_classes) {
        return Err(DataError::Split(format!("OOD class {c} out of range for {} classes", ds.n_classes)));
    }
    let class_map: Vec<u32> = (0..ds.n_classes as u32).filter(|c| !ood_classes.contains(c)).collect();
    if class_map.is_empty() {
        return Err(DataError::Split("every class is designated OOD".into()));
    }
    if ds.test_domains.is_empty() {
        return Err(DataError::Split("no test domain marked".into()));
    }
    let index: BTreeMap<u32, usize> = class_map.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let train: Vec<&Instance> = ds
        .instances
        .iter()
        .filter(|i| !ds.test_domains.contains(&i.e) && !ood_classes.contains(&i.y))
        .collect();
    let test: Vec<&Instance> = ds.instances.iter().filter(|i| ds.test_domains.contains(&i.e)).collect();
    if train.is_empty() || test.is_empty() {
        return Err(DataError::EmptyView);
    }

    let rows = |v: &[&Instance], f: fn(&Instance) -> &[f64]| -> Result<Tensor, DataError> {
        rows_tensor(&v.iter().map(|i| f(i)).collect::<Vec<_>>())
    };
    let tv = TrainView {
        x: rows(&train, |i| &i.x)?,
        labels: train.iter().map(|i| index[&i.y]).collect(),
        domains: train.iter().map(|i| i.e).collect(),
        class_map: class_map.clone(),
        true_s: rows(&train, |i| &i.true_s)?,
        true_v: rows(&train, |i| &i.true_v)?,
    };
    let te = TestView {
        x: rows(&test, |i| &i.x)?,
        original: test.iter().map(|i| i.y).collect(),
        binary: test
            .iter()
            .map(|i| if ood_classes.contains(&i.y) { Y_OOD } else { Y_IND })
            .collect(),
        domains: test.iter().map(|i| i.e).collect(),
        class_map,
    };
    Ok((tv, te))
}

/// Shuffled partition of `0..n` into consecutive batches; the last may be short.
pub fn iterate_minibatches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BatchSize);
    }
    if n == 0 {
        return Err(DataError::EmptyView);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

const MAGIC: &[u8; 4] = b"SODD";
const VERSION: u32 = 1;

/// Little-endian SODD encoding. The held-out split is not stored.
pub fn write_dataset<W: Write>(ds: &MultiDomainDataset, mut w: W) -> Result<(), DataError> {
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        ds.n_classes as u32,
        ds.semantic_dim as u32,
        ds.variation_dim as u32,
        ds.input_dim as u32,
        ds.n_domains as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for i in &ds.instances {
        w.write_all(&i.y.to_le_bytes())?;
        w.write_all(&i.e.to_le_bytes())?;
        for v in i.x.iter().chain(&i.true_s).chain(&i.true_v) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

/// Reads a SODD file. No domain is marked held out; use
/// [`MultiDomainDataset::with_test_domain`].
pub fn read_dataset<R: Read>(mut r: R) -> Result<MultiDomainDataset, DataError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 28 || &buf[..4] != MAGIC {
        return Err(DataError::Format("missing SODD header".into()));
    }
    let version = u32_at(&buf, 4);
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let [k, ds_, dv, dx, nd] = [8, 12, 16, 20, 24].map(|o| u32_at(&buf, o) as usize);
    let record = 8 + 8 * (dx + ds_ + dv);
    let body = &buf[28..];
    if body.len() % record != 0 {
        return Err(DataError::Format(format!(
            "body of {} bytes is not a whole number of {record}-byte records",
            body.len()
        )));
    }
    let f64s = |b: &[u8], n: usize| -> Vec<f64> {
        b.chunks_exact(8)
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut instances = Vec::with_capacity(body.len() / record);
    for rec in body.chunks_exact(record) {
        let y = u32_at(rec, 0);
        let e = u32_at(rec, 4);
        if y as usize >= k {
            return Err(DataError::Format(format!("label {y} out of range for {k} classes")));
        }
        let x = f64s(&rec[8..], dx);
        let true_s = f64s(&rec[8 + 8 * dx..], ds_);
        let true_v = f64s(&rec[8 + 8 * (dx + ds_)..], dv);
        instances.push(Instance { x, y, e, true_s, true_v });
    }
    Ok(MultiDomainDataset {
        n_classes: k,
        semantic_dim: ds_,
        variation_dim: dv,
        input_dim: dx,
        n_domains: nd,
        instances,
        test_domains: BTreeSet::new(),
    })
}

/// Per-domain counts printed by `gen-data`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainCounts {
    pub domain: u32,
    pub total: usize,
    pub per_class: Vec<usize>,
}

pub fn domain_counts(ds: &MultiDomainDataset) -> Vec<DomainCounts> {
    ds.groups()
        .into_iter()
        .map(|(domain, insts)| {
            let mut per_class = vec![0; ds.n_classes];
            for i in &insts {
                per_class[i.y as usize] += 1;
            }
            DomainCounts { domain, total: insts.len(), per_class }
        })
        .collect()
}

/// Fraction of a domain's instances whose spurious sign matches the label sign.
pub fn spurious_agreement(ds: &MultiDomainDataset, prov: &[Provenance]) -> BTreeMap<u32, f64> {
    let mut acc: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (i, p) in ds.instances.iter().zip(prov) {
        let a = acc.entry(i.e).or_default();
        a.1 += 1;
        if p.spurious.signum() == ds.label_sign(i.y) {
            a.0 += 1;
        }
    }
    acc.into_iter().map(|(e, (m, n))| (e, m as f64 / n as f64)).collect()
}

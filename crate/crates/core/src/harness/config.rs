//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! benchmark.label_noise_rate = 0.25
//! benchmark.domain.0.variation_mean = 1.0, 0.0
//! train.invariance_space = feature
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{BenchmarkConfig, DomainSpec};
use crate::detect::Detector;
use crate::gda::Shrinkage;
use crate::gmodel::GTrainConfig;
use crate::training::{Ablation, InvarianceSpace, TrainConfig, Xi};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Cumulative OOD classes must cover at least 40% of the classes.
    Strict,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSelection {
    Last,
    /// Hold out the highest-id training domain and keep the best epoch on it.
    LeaveOneDomainOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    pub gtrain: GTrainConfig,
    /// Latent sizes of `G`; default to the benchmark's factor sizes.
    pub g_semantic_dim: Option<usize>,
    pub g_variation_dim: Option<usize>,
    pub train: TrainConfig,
    pub ood_classes: Vec<u32>,
    pub test_domains: Vec<u32>,
    pub seeds: Vec<u64>,
    pub ablations: Vec<Ablation>,
    pub detectors: Vec<Detector>,
    pub mode: SweepMode,
    pub model_selection: ModelSelection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let benchmark = BenchmarkConfig::colored_analog(0);
        Self {
            ood_classes: (0..benchmark.n_classes as u32).collect(),
            test_domains: vec![benchmark.test_domain],
            benchmark,
            gtrain: GTrainConfig::default(),
            g_semantic_dim: None,
            g_variation_dim: None,
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            ablations: Ablation::ALL.to_vec(),
            detectors: Detector::ALL.to_vec(),
            mode: SweepMode::Strict,
            model_selection: ModelSelection::Last,
        }
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn scalar<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

#[derive(Default)]
struct PartialDomain {
    mean: Option<Vec<f64>>,
    corr: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        let mut domains: BTreeMap<u32, PartialDomain> = BTreeMap::new();
        let mut ood_given = false;
        let mut test_given = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: raw.to_string() });
            };
            let (key, value) = (k.trim(), v.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line, text: raw.to_string() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            let wrap = |r: Result<(), String>| {
                r.map_err(|msg| ConfigError::Value { line, key: key.into(), msg })
            };
            if let Some(rest) = key.strip_prefix("benchmark.domain.") {
                let (id, field) = rest
                    .split_once('.')
                    .ok_or_else(|| ConfigError::UnknownKey { line, key: key.into() })?;
                let id: u32 = id.parse().map_err(|_| ConfigError::UnknownKey { line, key: key.into() })?;
                let d = domains.entry(id).or_default();
                match field {
                    "variation_mean" => wrap(list(value).map(|m| d.mean = Some(m)))?,
                    "spurious_corr" => wrap(scalar(value).map(|c| d.corr = Some(c)))?,
                    _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
                }
                continue;
            }
            match key {
                "experiment.ood_classes" => ood_given = true,
                "experiment.test_domains" => test_given = true,
                _ => {}
            }
            match cfg.set(key, value) {
                Some(r) => wrap(r)?,
                None => return Err(ConfigError::UnknownKey { line, key: key.into() }),
            }
        }
        if !domains.is_empty() {
            cfg.benchmark.domains = domains
                .into_iter()
                .map(|(id, d)| match (d.mean, d.corr) {
                    (Some(variation_mean), Some(spurious_corr)) => Ok(DomainSpec { id, variation_mean, spurious_corr }),
                    _ => Err(ConfigError::Invalid(format!(
                        "domain {id} needs both variation_mean and spurious_corr"
                    ))),
                })
                .collect::<Result<_, _>>()?;
        }
        if !ood_given {
            cfg.ood_classes = (0..cfg.benchmark.n_classes as u32).collect();
        }
        if !test_given {
            cfg.test_domains = vec![cfg.benchmark.test_domain];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value`; `None` when the key is unknown.
    fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
        let b = &mut self.benchmark;
        let g = &mut self.gtrain;
        let t = &mut self.train;
        macro_rules! put {
            ($field:expr, $parse:expr) => {
                Some($parse(v).map(|x| $field = x))
            };
        }
        match key {
            "benchmark.name" => put!(b.name, |s: &str| Ok::<_, String>(s.to_string())),
            "benchmark.n_classes" => put!(b.n_classes, scalar),
            "benchmark.semantic_dim" => put!(b.semantic_dim, scalar),
            "benchmark.variation_dim" => put!(b.variation_dim, scalar),
            "benchmark.input_dim" => put!(b.input_dim, scalar),
            "benchmark.test_domain" => put!(b.test_domain, scalar),
            "benchmark.samples_per_domain" => put!(b.samples_per_domain, scalar),
            "benchmark.label_noise_rate" => put!(b.label_noise_rate, scalar),
            "benchmark.seed" => put!(b.seed, scalar),
            "benchmark.sigma_s" => put!(b.sigma_s, scalar),
            "benchmark.sigma_v" => put!(b.sigma_v, scalar),
            "benchmark.sigma_x" => put!(b.sigma_x, scalar),
            "benchmark.prototype_scale" => put!(b.prototype_scale, scalar),
            "benchmark.min_prototype_gap" => put!(b.min_prototype_gap, scalar),
            "benchmark.spurious_scale" => put!(b.spurious_scale, scalar),
            "benchmark.mixing_gain" => put!(b.mixing_gain, scalar),

            "gtrain.epochs" => put!(g.epochs, scalar),
            "gtrain.lr" => put!(g.lr, scalar),
            "gtrain.batch_size" => put!(g.batch_size, scalar),
            "gtrain.w_rec" => put!(g.w_rec, scalar),
            "gtrain.w_prior" => put!(g.w_prior, scalar),
            "gtrain.w_cls" => put!(g.w_cls, scalar),
            "gtrain.hidden" => put!(g.hidden, list),
            "gtrain.seed" => put!(g.seed, scalar),
            "gtrain.semantic_dim" => put!(self.g_semantic_dim, |s| scalar(s).map(Some)),
            "gtrain.variation_dim" => put!(self.g_variation_dim, |s| scalar(s).map(Some)),

            "train.eta_p" => put!(t.eta_p, scalar),
            "train.eta_dg" => put!(t.eta_dg, scalar),
            "train.eta_ood" => put!(t.eta_ood, scalar),
            "train.gamma1" => put!(t.gamma1, scalar),
            "train.gamma2" => put!(t.gamma2, scalar),
            "train.m_in" => put!(t.m_in, scalar),
            "train.m_out" => put!(t.m_out, scalar),
            "train.temperature" => put!(t.temperature, scalar),
            "train.xi_quantile" => put!(t.xi, |s| scalar(s).map(Xi::Quantile)),
            "train.xi" => put!(t.xi, |s| scalar(s).map(Xi::Value)),
            "train.alpha" => put!(t.alpha, scalar),
            "train.batch_size" => put!(t.batch_size, scalar),
            "train.max_epochs" => put!(t.max_epochs, scalar),
            "train.tol" => put!(t.tol, scalar),
            "train.seed" => put!(t.seed, scalar),
            "train.invariance_space" => put!(t.invariance_space, |s: &str| s.parse::<InvarianceSpace>()),
            "train.beta1_init" => put!(t.beta1_init, scalar),
            "train.beta2_init" => put!(t.beta2_init, scalar),
            "train.pin_beta1" => put!(t.pin_beta1, boolean),
            "train.pin_beta2" => put!(t.pin_beta2, boolean),
            "train.hidden" => put!(t.hidden, list),
            "train.feature_dim" => put!(t.feature_dim, scalar),

            "gda.shrinkage" => put!(t.gda_shrinkage, |s| scalar(s).map(Shrinkage::Relative)),
            "gda.shrinkage_absolute" => put!(t.gda_shrinkage, |s| scalar(s).map(Shrinkage::Absolute)),

            "experiment.ood_classes" => put!(self.ood_classes, list),
            "experiment.test_domains" => put!(self.test_domains, list),
            "experiment.seeds" => put!(self.seeds, list),
            "experiment.ablations" => put!(self.ablations, list),
            "experiment.detectors" => put!(self.detectors, list),
            "experiment.mode" => put!(self.mode, |s: &str| match s {
                "strict" => Ok(SweepMode::Strict),
                "free" => Ok(SweepMode::Free),
                _ => Err(format!("expected strict or free, got {s:?}")),
            }),
            "experiment.model_selection" => put!(self.model_selection, |s: &str| match s {
                "last" => Ok(ModelSelection::Last),
                "lodo" => Ok(ModelSelection::LeaveOneDomainOut),
                _ => Err(format!("expected last or lodo, got {s:?}")),
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.benchmark.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.gtrain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let k = self.benchmark.n_classes as u32;
        if self.ood_classes.is_empty() {
            return inv("experiment.ood_classes is empty".into());
        }
        if let Some(c) = self.ood_classes.iter().find(|&&c| c >= k) {
            return inv(format!("OOD class {c} out of range for {k} classes"));
        }
        if self.seeds.is_empty() || self.ablations.is_empty() || self.detectors.is_empty() {
            return inv("experiment.seeds, ablations and detectors must be nonempty".into());
        }
        let ids: BTreeSet<u32> = self.benchmark.domains.iter().map(|d| d.id).collect();
        if self.test_domains.is_empty() {
            return inv("experiment.test_domains is empty".into());
        }
        if let Some(e) = self.test_domains.iter().find(|e| !ids.contains(e)) {
            return inv(format!("test domain {e} is not a configured domain"));
        }
        if ids.len() < 2 {
            return inv("at least one training domain is needed besides the test domain".into());
        }
        if self.mode == SweepMode::Strict {
            let covered: BTreeSet<u32> = self.ood_classes.iter().copied().collect();
            if (covered.len() as f64) < 0.4 * k as f64 {
                return inv(format!(
                    "strict mode needs at least 40% of the {k} classes designated OOD across runs, got {}",
                    covered.len()
                ));
            }
        }
        Ok(())
    }

    pub fn g_latent(&self) -> (usize, usize) {
        (
            self.g_semantic_dim.unwrap_or(self.benchmark.semantic_dim),
            self.g_variation_dim.unwrap_or(self.benchmark.variation_dim),
        )
    }

    /// Sets the data, `G` and predictor seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.benchmark.seed = seed;
        self.gtrain.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every setting as sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut m: BTreeMap<String, String> = BTreeMap::new();
        let b = &self.benchmark;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let joinu = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        m.insert("benchmark.name".into(), b.name.clone());
        for (k, v) in [
            ("n_classes", b.n_classes),
            ("semantic_dim", b.semantic_dim),
            ("variation_dim", b.variation_dim),
            ("input_dim", b.input_dim),
            ("samples_per_domain", b.samples_per_domain),
        ] {
            m.insert(format!("benchmark.{k}"), v.to_string());
        }
        m.insert("benchmark.test_domain".into(), b.test_domain.to_string());
        m.insert("benchmark.seed".into(), b.seed.to_string());
        for (k, v) in [
            ("label_noise_rate", b.label_noise_rate),
            ("sigma_s", b.sigma_s),
            ("sigma_v", b.sigma_v),
            ("sigma_x", b.sigma_x),
            ("prototype_scale", b.prototype_scale),
            ("min_prototype_gap", b.min_prototype_gap),
            ("spurious_scale", b.spurious_scale),
            ("mixing_gain", b.mixing_gain),
        ] {
            m.insert(format!("benchmark.{k}"), format!("{v:?}"));
        }
        for d in &b.domains {
            m.insert(format!("benchmark.domain.{}.variation_mean", d.id), join(&d.variation_mean));
            m.insert(format!("benchmark.domain.{}.spurious_corr", d.id), format!("{:?}", d.spurious_corr));
        }
        let g = &self.gtrain;
        m.insert("gtrain.epochs".into(), g.epochs.to_string());
        m.insert("gtrain.batch_size".into(), g.batch_size.to_string());
        m.insert("gtrain.seed".into(), g.seed.to_string());
        m.insert("gtrain.hidden".into(), joinu(&g.hidden));
        for (k, v) in [("lr", g.lr), ("w_rec", g.w_rec), ("w_prior", g.w_prior), ("w_cls", g.w_cls)] {
            m.insert(format!("gtrain.{k}"), format!("{v:?}"));
        }
        let (ls, lv) = self.g_latent();
        m.insert("gtrain.semantic_dim".into(), ls.to_string());
        m.insert("gtrain.variation_dim".into(), lv.to_string());
        let t = &self.train;
        for (k, v) in [
            ("eta_p", t.eta_p),
            ("eta_dg", t.eta_dg),
            ("eta_ood", t.eta_ood),
            ("gamma1", t.gamma1),
            ("gamma2", t.gamma2),
            ("m_in", t.m_in),
            ("m_out", t.m_out),
            ("temperature", t.temperature),
            ("alpha", t.alpha),
            ("tol", t.tol),
            ("beta1_init", t.beta1_init),
            ("beta2_init", t.beta2_init),
        ] {
            m.insert(format!("train.{k}"), format!("{v:?}"));
        }
        m.insert(
            "train.xi".into(),
            match t.xi {
                Xi::Quantile(q) => format!("quantile {q:?}"),
                Xi::Value(v) => format!("value {v:?}"),
            },
        );
        m.insert("train.batch_size".into(), t.batch_size.to_string());
        m.insert("train.max_epochs".into(), t.max_epochs.to_string());
        m.insert("train.seed".into(), t.seed.to_string());
        m.insert("train.invariance_space".into(), t.invariance_space.to_string());
        m.insert("train.pin_beta1".into(), t.pin_beta1.to_string());
        m.insert("train.pin_beta2".into(), t.pin_beta2.to_string());
        m.insert("train.hidden".into(), joinu(&t.hidden));
        m.insert("train.feature_dim".into(), t.feature_dim.to_string());
        m.insert(
            "gda.shrinkage".into(),
            match t.gda_shrinkage {
                Shrinkage::Relative(c) => format!("relative {c:?}"),
                Shrinkage::Absolute(c) => format!("absolute {c:?}"),
            },
        );
        let mut out = String::new();
        for (k, v) in m {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 8 bytes of the SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.canonical().as_bytes());
        u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}

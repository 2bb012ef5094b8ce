//! Configuration, persistence, single-run pipeline and sweeps.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod sweep;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::datagen::{make_benchmark, split_ood, DataError, MultiDomainDataset, TestView, TrainView};
use crate::detect::{evaluate, fit_feature_gda, DetectError, Detector, Evaluation};
use crate::gda::GdaModel;
use crate::gmodel::{train_g, GError, GTrainReport, TransformParams};
use crate::numcore::Tensor;
use crate::training::{train_with_validation, Ablation, TrainError, TrainOutcome};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, ExperimentConfig, ModelSelection, SweepMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    G(#[from] GError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{missing} not found; run `sodium {command}` first")]
    Missing { missing: String, command: &'static str },
    #[error("{0}")]
    Mismatch(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunSpec {
    pub seed: u64,
    pub ood_class: u32,
    pub test_domain: u32,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("seed-{}_ood-{}_domain-{}", self.seed, self.ood_class, self.test_domain)
    }
}

pub struct Split {
    pub train: TrainView,
    pub test: TestView,
}

pub fn split(ds: MultiDomainDataset, spec: &RunSpec) -> Result<Split, HarnessError> {
    let ds = ds.with_test_domain(spec.test_domain)?;
    let (train, test) = split_ood(&ds, &BTreeSet::from([spec.ood_class]))?;
    Ok(Split { train, test })
}

pub fn generate(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<Split, HarnessError> {
    let run = cfg.clone().with_seed(spec.seed);
    split(make_benchmark(&run.benchmark)?, spec)
}

pub fn fit_g(cfg: &ExperimentConfig, spec: &RunSpec, view: &TrainView) -> Result<(TransformParams, GTrainReport), HarnessError> {
    let run = cfg.clone().with_seed(spec.seed);
    Ok(train_g(view, run.g_latent(), &run.gtrain)?)
}

pub struct Trained {
    pub outcome: TrainOutcome,
    /// Feature-space GDA for the DDU detector.
    pub feature_gda: GdaModel,
}

/// Trains one ablation. Under leave-one-domain-out selection the
/// highest-id training domain is withheld from the predictor and used to pick
/// the epoch.
pub fn fit_predictor(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    view: &TrainView,
    g: &TransformParams,
    ablation: Ablation,
) -> Result<Trained, HarnessError> {
    let run = cfg.clone().with_seed(spec.seed);
    let tcfg = run.train.clone().with_ablation(ablation);
    let outcome = match cfg.model_selection {
        ModelSelection::Last => train_with_validation(view, None, g, &tcfg)?,
        ModelSelection::LeaveOneDomainOut => {
            let domains: BTreeSet<u32> = view.domains.iter().copied().collect();
            if domains.len() < 2 {
                return Err(HarnessError::Mismatch(
                    "leave-one-domain-out selection needs at least two training domains".into(),
                ));
            }
            let held = *domains.iter().next_back().expect("nonempty");
            let fit = view.filter_domains(|e| e != held)?;
            let val = view.filter_domains(|e| e == held)?;
            train_with_validation(&fit, Some(&val), g, &tcfg)?
        }
    };
    let feature_gda = fit_feature_gda(&outcome.state.predictor, view, tcfg.gda_shrinkage)?;
    Ok(Trained { outcome, feature_gda })
}

pub fn score(cfg: &ExperimentConfig, trained: &Trained, test: &TestView) -> Result<Evaluation, HarnessError> {
    Ok(evaluate(
        &trained.outcome.state.predictor,
        Some(&trained.feature_gda),
        test,
        &cfg.detectors,
        cfg.train.temperature,
    )?)
}

pub fn predictor_checkpoint(cfg: &ExperimentConfig, spec: &RunSpec, ablation: Ablation, trained: &Trained) -> Checkpoint {
    let mut c = Checkpoint::with_meta(spec.seed, cfg.hash());
    put_run(&mut c, spec);
    c.push_scalar("run.ablation", Ablation::ALL.iter().position(|&a| a == ablation).expect("listed") as f64);
    c.put_train_state(&trained.outcome.state);
    c.push_scalar("train.log_xi", trained.outcome.log_xi);
    c.put_gda("fgda", &trained.feature_gda);
    c
}

pub fn g_checkpoint(cfg: &ExperimentConfig, spec: &RunSpec, g: &TransformParams) -> Checkpoint {
    let mut c = Checkpoint::with_meta(spec.seed, cfg.hash());
    put_run(&mut c, spec);
    c.put_transform(g);
    c
}

fn put_run(c: &mut Checkpoint, spec: &RunSpec) {
    c.push_scalar("run.ood_class", spec.ood_class as f64);
    c.push_scalar("run.test_domain", spec.test_domain as f64);
}

/// Fails when a checkpoint was produced for another OOD class or test domain.
pub fn check_run(c: &Checkpoint, spec: &RunSpec, what: &str) -> Result<(), HarnessError> {
    let ood = c.scalar("run.ood_class")? as u32;
    let dom = c.scalar("run.test_domain")? as u32;
    if ood != spec.ood_class || dom != spec.test_domain {
        return Err(HarnessError::Mismatch(format!(
            "{what} was trained for ood class {ood} / test domain {dom}, not {} / {}",
            spec.ood_class, spec.test_domain
        )));
    }
    Ok(())
}

pub fn ablation_from_checkpoint(c: &Checkpoint) -> Result<Ablation, HarnessError> {
    let i = c.scalar("run.ablation")? as usize;
    Ablation::ALL
        .get(i)
        .copied()
        .ok_or_else(|| HarnessError::Mismatch(format!("unknown ablation index {i}")))
}

/// Per-instance features for external plotting.
pub fn features_csv(trained_pred: &crate::training::Predictor, test: &TestView) -> Result<String, HarnessError> {
    let f: Tensor = trained_pred.features(&test.x).map_err(TrainError::from)?;
    let pred = trained_pred.predict(&test.x).map_err(TrainError::from)?;
    let mut s = String::from("index,domain,label,binary,predicted");
    for j in 0..f.cols() {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for i in 0..test.len() {
        s.push_str(&format!(
            "{i},{},{},{},{}",
            test.domains[i], test.original[i], test.binary[i], test.class_map[pred[i]]
        ));
        for v in f.row(i) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn detectors_label(ds: &[Detector]) -> String {
    ds.iter().map(|d| d.name()).collect::<Vec<_>>().join(",")
}

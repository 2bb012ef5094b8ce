//! Predictor training with semantic-invariance and energy-separation
//! regularizers under projected dual ascent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::datagen::{iterate_minibatches, DataError, TrainView};
use crate::gda::{GdaError, GdaModel, Shrinkage};
use crate::gmodel::{argmax_rows, cross_entropy, TransformParams};
use crate::numcore::nn::{collect_grads, BoundMlp, Linear, Mlp};
use crate::numcore::{logsumexp, ops, Adam, Graph, NumError, Tensor, Var};
use crate::rng::{self, StreamRng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gda(#[from] GdaError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error(
        "training diverged at epoch {epoch} step {step}: l_ce={l_ce} r_dg={r_dg} r_ood={r_ood} beta1={beta1} beta2={beta2}"
    )]
    Diverged {
        epoch: usize,
        step: usize,
        l_ce: f64,
        r_dg: f64,
        r_ood: f64,
        beta1: f64,
        beta2: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvarianceSpace {
    Feature,
    Output,
}

impl FromStr for InvarianceSpace {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "feature" => Ok(Self::Feature),
            "output" => Ok(Self::Output),
            _ => Err(format!("invariance space must be feature or output, got {s:?}")),
        }
    }
}

impl fmt::Display for InvarianceSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Feature => "feature",
            Self::Output => "output",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    Full,
    NoRood,
    Erm,
    OutputSpace,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoRood, Ablation::Erm, Ablation::OutputSpace];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoRood => "no-rood",
            Self::Erm => "erm",
            Self::OutputSpace => "output-space",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected full, no-rood, erm or output-space"))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Density threshold for pseudo-OOD screening.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Xi {
    /// Quantile of the per-instance maximum class density over the training view.
    Quantile(f64),
    /// Fixed threshold on the density itself.
    Value(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eta_p: f64,
    pub eta_dg: f64,
    pub eta_ood: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub temperature: f64,
    pub xi: Xi,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tol: f64,
    pub seed: u64,
    pub invariance_space: InvarianceSpace,
    pub beta1_init: f64,
    pub beta2_init: f64,
    /// Keep the multiplier at zero and leave the term out of the loss.
    pub pin_beta1: bool,
    pub pin_beta2: bool,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub gda_shrinkage: Shrinkage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_p: 1e-3,
            eta_dg: 0.01,
            eta_ood: 0.01,
            gamma1: 0.05,
            gamma2: 1.0,
            m_in: -4.0,
            m_out: -1.0,
            temperature: 1.0,
            xi: Xi::Quantile(0.005),
            alpha: 1.0,
            batch_size: 64,
            max_epochs: 40,
            tol: 1e-4,
            seed: 0,
            invariance_space: InvarianceSpace::Feature,
            beta1_init: 0.0,
            beta2_init: 0.0,
            pin_beta1: false,
            pin_beta2: false,
            hidden: vec![64],
            feature_dim: 32,
            gda_shrinkage: Shrinkage::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::Full => {}
            Ablation::NoRood => self.pin_beta2 = true,
            Ablation::Erm => {
                self.pin_beta1 = true;
                self.pin_beta2 = true;
            }
            Ablation::OutputSpace => self.invariance_space = InvarianceSpace::Output,
        }
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.m_in < self.m_out) {
            return bad(format!("m_in ({}) must be < m_out ({})", self.m_in, self.m_out));
        }
        if !(self.gamma1 > 0.0 && self.gamma2 > 0.0) {
            return bad("gamma1 and gamma2 must be > 0".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0".into());
        }
        if !(self.eta_p > 0.0 && self.eta_dg > 0.0 && self.eta_ood > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0".into());
        }
        if !(self.beta1_init >= 0.0 && self.beta2_init >= 0.0) {
            return bad("initial multipliers must be >= 0".into());
        }
        match self.xi {
            Xi::Quantile(q) if !(0.0..=1.0).contains(&q) => return bad(format!("xi quantile {q} outside [0, 1]")),
            Xi::Value(v) if !(v >= 0.0) => return bad(format!("xi must be >= 0, got {v}")),
            _ => {}
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.feature_dim == 0 {
            return bad("batch_size, max_epochs and feature_dim must be >= 1".into());
        }
        Ok(())
    }
}

/// `f = h(g(x))`: tanh featurizer and linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub g: Mlp,
    pub h: Linear,
}

pub struct BoundPredictor {
    g: BoundMlp,
    hw: Var,
    hb: Var,
}

impl BoundPredictor {
    /// Returns `(features, logits)`.
    pub fn forward(&self, gr: &mut Graph, x: Var) -> Result<(Var, Var), NumError> {
        let f = self.g.forward(gr, x)?;
        let z = gr.matmul(f, self.hw)?;
        Ok((f, gr.add_row_bias(z, self.hb)?))
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.g.vars();
        v.push(self.hw);
        v.push(self.hb);
        v
    }
}

impl Predictor {
    pub fn init<R: Rng>(input_dim: usize, hidden: &[usize], feature_dim: usize, n_classes: usize, rng: &mut R) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        Self {
            g: Mlp::init(&dims, true, rng),
            h: Linear::init(feature_dim, n_classes, rng),
        }
    }

    pub fn from_parts(g: Mlp, h: Linear) -> Result<Self, NumError> {
        if g.output_dim() != h.input_dim() {
            return Err(NumError::Shape {
                op: "predictor",
                left: vec![g.output_dim()],
                right: vec![h.input_dim()],
            });
        }
        Ok(Self { g, h })
    }

    pub fn n_classes(&self) -> usize {
        self.h.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.h.input_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.g.params();
        p.push(&self.h.weight);
        p.push(&self.h.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.g.params_mut();
        p.push(&mut self.h.weight);
        p.push(&mut self.h.bias);
        p
    }

    pub fn bind(&self, gr: &mut Graph) -> BoundPredictor {
        BoundPredictor {
            g: self.g.bind(gr, true),
            hw: gr.param(self.h.weight.clone()),
            hb: gr.param(self.h.bias.clone()),
        }
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor, NumError> {
        self.g.apply(x)
    }

    pub fn logits_from_features(&self, f: &Tensor) -> Result<Tensor, NumError> {
        ops::add_row_bias(&ops::matmul(f, &self.h.weight)?, &self.h.bias)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NumError> {
        self.logits_from_features(&self.features(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, NumError> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

/// `-T log sum_k exp(l_k / T)`.
pub fn energy(logits: &[f64], temperature: f64) -> Result<f64, NumError> {
    Ok(-logsumexp(logits, temperature)?)
}

/// `l1 * s1 + l2 * s2`.
pub fn mix(s1: &[f64], s2: &[f64], l1: f64, l2: f64) -> Result<Vec<f64>, NumError> {
    if s1.len() != s2.len() {
        return Err(NumError::Shape {
            op: "mixup",
            left: vec![s1.len()],
            right: vec![s2.len()],
        });
    }
    Ok(s1.iter().zip(s2).map(|(a, b)| l1 * a + l2 * b).collect())
}

/// Mixes two semantic codes with independent `Beta(alpha, alpha)` weights.
pub fn mixup_semantic<R: Rng>(s1: &[f64], s2: &[f64], alpha: f64, rng: &mut R) -> Result<Vec<f64>, NumError> {
    let (l1, l2) = draw_lambdas(alpha, rng)?;
    mix(s1, s2, l1, l2)
}

pub fn draw_lambdas<R: Rng>(alpha: f64, rng: &mut R) -> Result<(f64, f64), NumError> {
    let beta = Beta::new(alpha, alpha).map_err(|e| NumError::InvalidArgument(e.to_string()))?;
    let l1: f64 = beta.sample(rng);
    let l2: f64 = beta.sample(rng);
    Ok((l1, l2))
}

/// `mean_in max(0, E - m_in)^2 + mean_out max(0, m_out - E)^2`; an empty side
/// contributes 0.
pub fn r_ood(ind: &[f64], ood: &[f64], m_in: f64, m_out: f64) -> f64 {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&e| f(e).max(0.0).powi(2)).sum::<f64>() / v.len() as f64
        }
    };
    mean(ind, &|e| e - m_in) + mean(ood, &|e| m_out - e)
}

/// Mean row-wise Euclidean distance between two batches of representations.
pub fn r_dg(a: &Tensor, b: &Tensor) -> Result<f64, NumError> {
    let d = ops::row_l2_distance(a, b)?;
    Ok(d.data().iter().sum::<f64>() / d.len() as f64)
}

/// `max(0, beta + eta * (r - gamma))`.
pub fn dual_update(beta: f64, eta: f64, r: f64, gamma: f64) -> f64 {
    (beta + eta * (r - gamma)).max(0.0)
}

/// Semantic codes of the training view with per-class index lists.
pub struct SemanticPool {
    pub s: Tensor,
    pub labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl SemanticPool {
    pub fn new(s: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self, TrainError> {
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class
                .get_mut(y)
                .ok_or_else(|| TrainError::Invalid(format!("label {y} out of range")))?
                .push(i);
        }
        if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
            return Err(TrainError::Invalid("pseudo-OOD generation needs at least two classes".into()));
        }
        Ok(Self { s, labels, by_class })
    }

    /// Uniform draw among instances whose label differs from `y`.
    pub fn partner<R: Rng>(&self, y: usize, rng: &mut R) -> usize {
        let others = self.labels.len() - self.by_class[y].len();
        let mut r = rng.random_range(0..others);
        for (k, idx) in self.by_class.iter().enumerate() {
            if k == y {
                continue;
            }
            if r < idx.len() {
                return idx[r];
            }
            r -= idx.len();
        }
        unreachable!("partner index within range")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoOodBatch {
    /// Decoded outliers `D(s_hat, v)`, one row per accepted candidate.
    pub x: Option<Tensor>,
    pub accepted: usize,
    pub candidates: usize,
    /// Every mixed code that was screened, accepted or not.
    pub mixed: Vec<Vec<f64>>,
    pub accept_mask: Vec<bool>,
}

impl PseudoOodBatch {
    pub fn accept_rate(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.accepted as f64 / self.candidates as f64
        }
    }
}

pub fn generate_pseudo_oods<R: Rng>(
    batch: &[usize],
    pool: &SemanticPool,
    g_model: &TransformParams,
    gda: &GdaModel,
    log_xi: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<PseudoOodBatch, TrainError> {
    let mut mixed = Vec::with_capacity(batch.len());
    let mut mask = Vec::with_capacity(batch.len());
    for &i in batch {
        let j = pool.partner(pool.labels[i], rng);
        let s_hat = mixup_semantic(pool.s.row(i), pool.s.row(j), alpha, rng)?;
        mask.push(gda.screen_log(&s_hat, log_xi)?);
        mixed.push(s_hat);
    }
    let accepted: Vec<&[f64]> = mixed.iter().zip(&mask).filter(|(_, &a)| a).map(|(s, _)| s.as_slice()).collect();
    let x = if accepted.is_empty() {
        None
    } else {
        let s = Tensor::from_rows(&accepted)?;
        let v = g_model.sample_variation(accepted.len(), rng);
        Some(g_model.decode(&s, &v)?)
    };
    Ok(PseudoOodBatch {
        x,
        accepted: accepted.len(),
        candidates: batch.len(),
        mixed,
        accept_mask: mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub l_ce: f64,
    pub r_dg: f64,
    pub r_ood: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pseudo_accept_rate: f64,
}

pub const LOG_HEADER: &str = "epoch,step,loss,l_ce,r_dg,r_ood,beta1,beta2,pseudo_accept_rate";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.l_ce,
            self.r_dg,
            self.r_ood,
            self.beta1,
            self.beta2,
            self.pseudo_accept_rate
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub l_ce: f64,
    pub r_dg: f64,
    pub r_ood: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pseudo_accept_rate: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub predictor: Predictor,
    pub beta1: f64,
    pub beta2: f64,
    pub adam: Adam,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub log_xi: f64,
    pub converged: bool,
    /// Epoch whose parameters were kept when a validation view was given.
    pub selected_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.steps {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

const STREAM_INIT: u64 = 11;
const STREAM_BATCH: u64 = 12;
const STREAM_AUG: u64 = 13;
const STREAM_MIX: u64 = 14;

struct Streams {
    batch: StreamRng,
    aug: StreamRng,
    mix: StreamRng,
}

pub fn accuracy(pred: &Predictor, x: &Tensor, labels: &[usize]) -> Result<f64, NumError> {
    let p = pred.predict(x)?;
    Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
}

/// Fits the class-conditional GDA on `E_s` of the view.
pub fn fit_semantic_gda(view: &TrainView, g_model: &TransformParams, shrinkage: Shrinkage) -> Result<(Tensor, GdaModel), TrainError> {
    let s = g_model.encode_semantic(&view.x)?;
    let gda = GdaModel::fit(&s, &view.labels, view.n_classes(), shrinkage)?;
    Ok((s, gda))
}

pub fn train(view: &TrainView, g_model: &TransformParams, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_validation(view, None, g_model, cfg)
}

/// Runs the primal-dual loop. With a validation view, the parameters of the
/// epoch with the best validation accuracy are returned.
pub fn train_with_validation(
    view: &TrainView,
    validation: Option<&TrainView>,
    g_model: &TransformParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(DataError::EmptyView.into());
    }
    if g_model.input_dim() != view.x.cols() {
        return Err(TrainError::Invalid(format!(
            "G expects {} inputs, view has {}",
            g_model.input_dim(),
            view.x.cols()
        )));
    }
    let k = view.n_classes();
    let (s_all, gda) = fit_semantic_gda(view, g_model, cfg.gda_shrinkage)?;
    let log_xi = match cfg.xi {
        Xi::Quantile(q) => gda.log_density_quantile(&s_all, q)?,
        Xi::Value(v) => v.ln(),
    };
    let pool = SemanticPool::new(s_all, view.labels.clone(), k)?;

    let mut init_rng = rng::stream(cfg.seed, STREAM_INIT);
    let predictor = Predictor::init(view.x.cols(), &cfg.hidden, cfg.feature_dim, k, &mut init_rng);
    let lens: Vec<usize> = predictor.params().iter().map(|t| t.len()).collect();
    let mut state = TrainState {
        adam: Adam::new(cfg.eta_p, &lens),
        predictor,
        beta1: if cfg.pin_beta1 { 0.0 } else { cfg.beta1_init },
        beta2: if cfg.pin_beta2 { 0.0 } else { cfg.beta2_init },
        epoch: 0,
        step: 0,
    };
    let mut streams = Streams {
        batch: rng::stream(cfg.seed, STREAM_BATCH),
        aug: rng::stream(cfg.seed, STREAM_AUG),
        mix: rng::stream(cfg.seed, STREAM_MIX),
    };

    let mut steps = Vec::new();
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut converged = false;
    let mut best: Option<(f64, usize, Predictor)> = None;
    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        let batches = iterate_minibatches(view.len(), cfg.batch_size, &mut streams.batch)?;
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        for (step, idx) in batches.iter().enumerate() {
            let rec = train_step(&mut state, view, idx, &pool, g_model, &gda, log_xi, cfg, &mut streams, step)?;
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([rec.loss, rec.l_ce, rec.r_dg, rec.r_ood, rec.pseudo_accept_rate]) {
                *s += v * w;
            }
            seen += idx.len();
            steps.push(rec);
            state.step += 1;
        }
        let n = seen as f64;
        let validation_accuracy = match validation {
            Some(v) => Some(accuracy(&state.predictor, &v.x, &v.labels)?),
            None => None,
        };
        let e = EpochLog {
            epoch,
            loss: sums[0] / n,
            l_ce: sums[1] / n,
            r_dg: sums[2] / n,
            r_ood: sums[3] / n,
            beta1: state.beta1,
            beta2: state.beta2,
            pseudo_accept_rate: sums[4] / n,
            validation_accuracy,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} ce {:.5} r_dg {:.5} r_ood {:.5} b1 {:.4} b2 {:.4} accept {:.3}",
            e.loss,
            e.l_ce,
            e.r_dg,
            e.r_ood,
            e.beta1,
            e.beta2,
            e.pseudo_accept_rate
        );
        if let Some(acc) = validation_accuracy {
            if best.as_ref().is_none_or(|b| acc > b.0) {
                best = Some((acc, epoch, state.predictor.clone()));
            }
        }
        let prev = epochs.last().map(|p| p.loss);
        epochs.push(e);
        if let Some(p) = prev {
            let cur = epochs[epochs.len() - 1].loss;
            if ((cur - p) / p.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    let selected_epoch = best.map(|(_, e, p)| {
        state.predictor = p;
        e
    });
    Ok(TrainOutcome { state, steps, epochs, log_xi, converged, selected_epoch })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut TrainState,
    view: &TrainView,
    idx: &[usize],
    pool: &SemanticPool,
    g_model: &TransformParams,
    gda: &GdaModel,
    log_xi: f64,
    cfg: &TrainConfig,
    streams: &mut Streams,
    step: usize,
) -> Result<StepLog, TrainError> {
    let x = view.x.select_rows(idx);
    let y: Vec<usize> = idx.iter().map(|&i| view.labels[i]).collect();
    let x_aug = g_model.data_aug(&x, &mut streams.aug)?;
    let pseudo = generate_pseudo_oods(idx, pool, g_model, gda, log_xi, cfg.alpha, &mut streams.mix)?;

    let mut gr = Graph::new();
    let bound = state.predictor.bind(&mut gr);
    let xv = gr.constant(x);
    let (feat, logits) = bound.forward(&mut gr, xv)?;
    let l_ce = cross_entropy(&mut gr, logits, &y)?;

    let xa = gr.constant(x_aug);
    let (feat_a, logits_a) = bound.forward(&mut gr, xa)?;
    let (left, right) = match cfg.invariance_space {
        InvarianceSpace::Feature => (feat, feat_a),
        InvarianceSpace::Output => (gr.softmax_rows(logits)?, gr.softmax_rows(logits_a)?),
    };
    let dist = gr.row_l2_distance(left, right)?;
    let rdg = gr.mean(dist)?;

    let t = cfg.temperature;
    let lse = gr.logsumexp_rows(logits, t)?;
    // E - m_in = -lse - m_in
    let neg = gr.mul_scalar(lse, -1.0)?;
    let over = gr.add_scalar(neg, -cfg.m_in)?;
    let hinge_in = gr.relu(over)?;
    let sq_in = gr.square(hinge_in)?;
    let mut rood = gr.mean(sq_in)?;
    if let Some(xo) = pseudo.x.clone() {
        let xo = gr.constant(xo);
        let (_, logits_o) = bound.forward(&mut gr, xo)?;
        let lse_o = gr.logsumexp_rows(logits_o, t)?;
        // m_out - E = lse + m_out
        let under = gr.add_scalar(lse_o, cfg.m_out)?;
        let hinge_out = gr.relu(under)?;
        let sq_out = gr.square(hinge_out)?;
        let out_term = gr.mean(sq_out)?;
        rood = gr.add(rood, out_term)?;
    }

    let mut loss = l_ce;
    if state.beta1 != 0.0 {
        let term = gr.mul_scalar(rdg, state.beta1)?;
        loss = gr.add(loss, term)?;
    }
    if state.beta2 != 0.0 {
        let term = gr.mul_scalar(rood, state.beta2)?;
        loss = gr.add(loss, term)?;
    }
    let (lv, cv, dv, ov) = (gr.scalar(loss), gr.scalar(l_ce), gr.scalar(rdg), gr.scalar(rood));
    if ![lv, cv, dv, ov].iter().all(|v| v.is_finite()) {
        return Err(TrainError::Diverged {
            epoch: state.epoch,
            step,
            l_ce: cv,
            r_dg: dv,
            r_ood: ov,
            beta1: state.beta1,
            beta2: state.beta2,
        });
    }
    gr.backward(loss)?;
    let grads = collect_grads(&gr, &bound.vars());
    let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    state.adam.step(&mut state.predictor.params_mut(), &refs)?;

    let rec = StepLog {
        epoch: state.epoch,
        step,
        loss: lv,
        l_ce: cv,
        r_dg: dv,
        r_ood: ov,
        beta1: state.beta1,
        beta2: state.beta2,
        pseudo_accept_rate: pseudo.accept_rate(),
    };
    if !cfg.pin_beta1 {
        state.beta1 = dual_update(state.beta1, cfg.eta_dg, dv, cfg.gamma1);
    }
    if !cfg.pin_beta2 {
        state.beta2 = dual_update(state.beta2, cfg.eta_ood, ov, cfg.gamma2);
    }
    assert!(state.beta1 >= 0.0 && state.beta2 >= 0.0, "dual variables left the feasible set");
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_benchmark, split_ood, BenchmarkConfig, DomainSpec};
    use crate::gmodel::{train_g, GTrainConfig};
    use std::collections::BTreeSet;

    #[test]
    fn energy_examples() {
        assert!((energy(&[0.0, 0.0], 1.0).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert!(energy(&[1.0], 0.0).is_err());
        let l = [2.0, 1.0, 0.5];
        let shifted: Vec<f64> = l.iter().map(|v| v + 3.7).collect();
        let d = energy(&shifted, 1.5).unwrap() - (energy(&l, 1.5).unwrap() - 3.7);
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn mixing_examples() {
        assert_eq!(mix(&[1.0, 2.0], &[5.0, 6.0], 1.0, 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mix(&[1.0, 0.0], &[0.0, 1.0], 0.5, 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(mix(&[1.0], &[1.0, 2.0], 0.5, 0.5).is_err());
    }

    #[test]
    fn r_ood_examples() {
        assert_eq!(r_ood(&[-8.0, -7.0], &[-1.0, 0.0], -7.0, -1.0), 0.0);
        assert_eq!(r_ood(&[-6.0], &[], -7.0, -1.0), 1.0);
    }

    #[test]
    fn dual_examples() {
        assert_eq!(dual_update(0.3, 0.1, 0.2, 0.2), 0.3);
        assert_eq!(dual_update(0.0, 0.1, 0.1, 0.2), 0.0);
        assert!((dual_update(0.5, 0.1, 0.3 + 0.2, 0.2) - 0.53).abs() < 1e-12);
    }

    #[test]
    fn r_dg_single_sample() {
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!((r_dg(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("none".parse::<Ablation>().is_err());
        let c = TrainConfig::default().with_ablation(Ablation::Erm);
        assert!(c.pin_beta1 && c.pin_beta2);
    }

    #[test]
    fn config_rejects_inverted_margins() {
        let c = TrainConfig { m_in: -1.0, m_out: -7.0, ..TrainConfig::default() };
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn partner_always_differs() {
        let s = Tensor::zeros(&[6, 2]);
        let pool = SemanticPool::new(s, vec![0, 0, 1, 2, 2, 2], 3).unwrap();
        let mut r = rng::stream(0, 0);
        for _ in 0..500 {
            for y in 0..3 {
                assert_ne!(pool.labels[pool.partner(y, &mut r)], y);
            }
        }
        assert!(SemanticPool::new(Tensor::zeros(&[2, 1]), vec![1, 1], 2).is_err());
    }

    /// Two training classes in two training domains, no label noise; a third
    /// class exists only to be held out.
    fn toy() -> TrainView {
        let cfg = BenchmarkConfig {
            name: "toy".into(),
            n_classes: 3,
            semantic_dim: 2,
            variation_dim: 1,
            input_dim: 4,
            domains: vec![
                DomainSpec { id: 0, variation_mean: vec![1.0], spurious_corr: 0.5 },
                DomainSpec { id: 1, variation_mean: vec![-1.0], spurious_corr: 0.5 },
                DomainSpec { id: 2, variation_mean: vec![0.0], spurious_corr: 0.5 },
            ],
            test_domain: 2,
            samples_per_domain: 150,
            label_noise_rate: 0.0,
            min_prototype_gap: 3.0,
            ..BenchmarkConfig::colored_analog(3)
        };
        let ds = make_benchmark(&cfg).unwrap();
        split_ood(&ds, &BTreeSet::from([2])).unwrap().0
    }

    fn toy_g(view: &TrainView) -> TransformParams {
        let gcfg = GTrainConfig { epochs: 15, hidden: vec![16], ..GTrainConfig::default() };
        train_g(view, (2, 1), &gcfg).unwrap().0
    }

    fn quick() -> TrainConfig {
        TrainConfig { max_epochs: 5, hidden: vec![16], feature_dim: 8, tol: 0.0, ..TrainConfig::default() }
    }

    #[test]
    fn toy_reaches_high_training_accuracy() {
        let view = toy();
        let g = toy_g(&view);
        let cfg = TrainConfig { max_epochs: 60, eta_p: 5e-3, ..quick() }.with_ablation(Ablation::Erm);
        let out = train(&view, &g, &cfg).unwrap();
        let acc = accuracy(&out.state.predictor, &view.x, &view.labels).unwrap();
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let view = toy();
        let g = toy_g(&view);
        let a = train(&view, &g, &quick()).unwrap();
        let b = train(&view, &g, &quick()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn huge_margins_keep_multipliers_at_zero() {
        let view = toy();
        let g = toy_g(&view);
        let cfg = TrainConfig { gamma1: 1e9, gamma2: 1e9, ..quick() };
        let out = train(&view, &g, &cfg).unwrap();
        assert!(out.steps.iter().all(|s| s.beta1 == 0.0 && s.beta2 == 0.0));
        assert_eq!(out.state.beta1, 0.0);
        assert_eq!(out.state.beta2, 0.0);
    }

    #[test]
    fn screen_extremes_control_acceptance() {
        let view = toy();
        let g = toy_g(&view);
        let (s, gda) = fit_semantic_gda(&view, &g, Shrinkage::default()).unwrap();
        let pool = SemanticPool::new(s, view.labels.clone(), 2).unwrap();
        let batch: Vec<usize> = (0..20).collect();
        let mut r = rng::stream(1, 0);
        let all = generate_pseudo_oods(&batch, &pool, &g, &gda, f64::INFINITY, 1.0, &mut r).unwrap();
        assert_eq!(all.accepted, 20);
        assert_eq!(all.x.as_ref().unwrap().rows(), 20);
        let none = generate_pseudo_oods(&batch, &pool, &g, &gda, f64::NEG_INFINITY, 1.0, &mut r).unwrap();
        assert_eq!(none.accepted, 0);
        assert!(none.x.is_none());
    }

    #[test]
    fn empty_pseudo_batches_match_a_run_without_r_ood() {
        let view = toy();
        let g = toy_g(&view);
        // nothing passes the screen and every energy sits far below m_in
        let cfg = TrainConfig { xi: Xi::Value(0.0), m_in: 50.0, m_out: 60.0, ..quick() };
        let free = train(&view, &g, &cfg).unwrap();
        assert!(free.steps.iter().all(|s| s.pseudo_accept_rate == 0.0 && s.beta2 == 0.0));
        let pinned = train(&view, &g, &TrainConfig { pin_beta2: true, ..cfg }).unwrap();
        assert_eq!(free.state, pinned.state);
    }

    #[test]
    fn invariance_penalty_falls_while_active() {
        let view = toy();
        let g = toy_g(&view);
        let cfg = TrainConfig { beta1_init: 1.0, pin_beta1: true, max_epochs: 10, ..quick() }.with_ablation(Ablation::NoRood);
        let out = train(&view, &g, &cfg).unwrap();
        let (first, last) = (&out.epochs[0], out.epochs.last().unwrap());
        assert!(last.r_dg < first.r_dg, "r_dg {} -> {}", first.r_dg, last.r_dg);
    }
}

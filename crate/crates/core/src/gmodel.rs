//! The transformation model `G = (E_s, E_v, D)`.
//!
//! A deterministic autoencoder whose latent code is split into a semantic part
//! `s` and a variation part `v`. Training combines reconstruction, a moment
//! penalty pulling the batch distribution of `v` toward `N(0, I)`, and a linear
//! classification head on `s`.

use rand::Rng;
use thiserror::Error;

use crate::datagen::{iterate_minibatches, DataError, TrainView};
use crate::numcore::nn::{collect_grads, Linear, Mlp};
use crate::numcore::{ops, Adam, Graph, NumError, Tensor, Var};
use crate::rng::{self, std_normal};

#[derive(Debug, Error)]
pub enum GError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid G training config: {0}")]
    Config(String),
    #[error(
        "G training diverged at epoch {epoch} step {step}: rec={rec} prior={prior} cls={cls}"
    )]
    Diverged {
        epoch: usize,
        step: usize,
        rec: f64,
        prior: f64,
        cls: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub w_rec: f64,
    pub w_prior: f64,
    pub w_cls: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for GTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 2e-3,
            batch_size: 64,
            w_rec: 1.0,
            w_prior: 0.001,
            w_cls: 0.1,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl GTrainConfig {
    pub fn validate(&self) -> Result<(), GError> {
        let bad = |m: &str| Err(GError::Config(m.into()));
        if !(self.w_rec > 0.0) {
            return bad("w_rec must be > 0");
        }
        if !(self.w_prior >= 0.0) || !(self.w_cls >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub es: Mlp,
    pub ev: Mlp,
    pub dec: Mlp,
    /// Auxiliary classifier on `E_s(x)`; only used while training `G`.
    pub head: Linear,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl TransformParams {
    pub fn init<R: Rng>(
        input_dim: usize,
        semantic_dim: usize,
        variation_dim: usize,
        n_classes: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        Self {
            es: Mlp::init(&dims(input_dim, hidden, semantic_dim), false, rng),
            ev: Mlp::init(&dims(input_dim, hidden, variation_dim), false, rng),
            dec: Mlp::init(&dims(semantic_dim + variation_dim, hidden, input_dim), false, rng),
            head: Linear::init(semantic_dim, n_classes, rng),
        }
    }

    pub fn from_parts(es: Mlp, ev: Mlp, dec: Mlp, head: Linear) -> Result<Self, GError> {
        let shape_err = |what: &'static str, l: usize, r: usize| {
            GError::Num(NumError::Shape { op: what, left: vec![l], right: vec![r] })
        };
        if es.input_dim() != ev.input_dim() || es.input_dim() != dec.output_dim() {
            return Err(shape_err("g_input", es.input_dim(), dec.output_dim()));
        }
        if dec.input_dim() != es.output_dim() + ev.output_dim() {
            return Err(shape_err("g_latent", dec.input_dim(), es.output_dim() + ev.output_dim()));
        }
        if head.input_dim() != es.output_dim() {
            return Err(shape_err("g_head", head.input_dim(), es.output_dim()));
        }
        Ok(Self { es, ev, dec, head })
    }

    pub fn input_dim(&self) -> usize {
        self.es.input_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.es.output_dim()
    }

    pub fn variation_dim(&self) -> usize {
        self.ev.output_dim()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.es.params_mut();
        p.extend(self.ev.params_mut());
        p.extend(self.dec.params_mut());
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }

    /// Every array in a fixed order: `E_s`, `E_v`, `D`, head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.es.params();
        p.extend(self.ev.params());
        p.extend(self.dec.params());
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn encode_semantic(&self, x: &Tensor) -> Result<Tensor, NumError> {
        self.es.apply(x)
    }

    pub fn encode_variation(&self, x: &Tensor) -> Result<Tensor, NumError> {
        self.ev.apply(x)
    }

    pub fn decode(&self, s: &Tensor, v: &Tensor) -> Result<Tensor, NumError> {
        self.dec.apply(&ops::concat_cols(s, v)?)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor, NumError> {
        self.decode(&self.encode_semantic(x)?, &self.encode_variation(x)?)
    }

    /// Standard-normal variation codes, one row per instance.
    pub fn sample_variation<R: Rng>(&self, rows: usize, rng: &mut R) -> Tensor {
        let d = self.variation_dim();
        Tensor::from_parts(vec![rows, d], (0..rows * d).map(|_| std_normal(rng)).collect())
    }

    /// `D(E_s(x), v')` with `v' ~ N(0, I)`; labels are carried unchanged by the caller.
    pub fn data_aug<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor, NumError> {
        let s = self.encode_semantic(x)?;
        let v = self.sample_variation(x.rows(), rng);
        self.decode(&s, &v)
    }

    /// `sum (x - x_hat)^2 / sum (x - mean(x))^2`.
    pub fn relative_mse(&self, x: &Tensor) -> Result<f64, NumError> {
        relative_mse(x, &self.reconstruct(x)?)
    }
}

pub fn relative_mse(x: &Tensor, x_hat: &Tensor) -> Result<f64, NumError> {
    let err = ops::mse(x, x_hat)?;
    let mean = ops::mean_rows(x)?;
    let mut var = 0.0;
    for i in 0..x.rows() {
        for (a, m) in x.row(i).iter().zip(mean.data()) {
            var += (a - m) * (a - m);
        }
    }
    let var = var / x.len() as f64;
    if var == 0.0 {
        return Err(NumError::InvalidArgument("inputs have zero variance".into()));
    }
    Ok(err / var)
}

/// Mean softmax cross-entropy of `logits` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var, NumError> {
    let lse = g.logsumexp_rows(logits, 1.0)?;
    let picked = g.gather_rows(logits, labels)?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// `||mean(V)||^2 + ||cov(V) - I||_F^2` over the rows of `v`.
fn moment_penalty(g: &mut Graph, v: Var) -> Result<Var, NumError> {
    let (m, d) = (g.value(v).rows(), g.value(v).cols());
    let mu = g.mean_rows(v)?;
    let mu2 = g.square(mu)?;
    let mean_pen = g.sum(mu2)?;
    let ones = g.constant(Tensor::from_parts(vec![m, 1], vec![1.0; m]));
    let mu_b = g.matmul(ones, mu)?;
    let c = g.sub(v, mu_b)?;
    let ct = g.transpose(c)?;
    let gram = g.matmul(ct, c)?;
    let cov = g.mul_scalar(gram, 1.0 / (m as f64 - 1.0))?;
    let eye = g.constant(Tensor::identity(d));
    let diff = g.sub(cov, eye)?;
    let diff2 = g.square(diff)?;
    let cov_pen = g.sum(diff2)?;
    g.add(mean_pen, cov_pen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub rec: f64,
    pub prior: f64,
    pub cls: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GTrainReport {
    pub epochs: Vec<GEpoch>,
}

impl GTrainReport {
    pub fn last(&self) -> Option<&GEpoch> {
        self.epochs.last()
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

pub fn train_g(view: &TrainView, latent: (usize, usize), cfg: &GTrainConfig) -> Result<(TransformParams, GTrainReport), GError> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(DataError::EmptyView.into());
    }
    let (ds, dv) = latent;
    let k = view.n_classes();
    let mut init_rng = rng::stream(cfg.seed, STREAM_INIT);
    let mut params = TransformParams::init(view.x.cols(), ds, dv, k, &cfg.hidden, &mut init_rng);
    let lens: Vec<usize> = params.params().iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(cfg.lr, &lens);
    let mut batch_rng = rng::stream(cfg.seed, STREAM_BATCH);
    let mut report = GTrainReport { epochs: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        let batches = iterate_minibatches(view.len(), cfg.batch_size, &mut batch_rng)?;
        let mut acc = [0.0f64; 4];
        let mut seen = 0usize;
        for (step, idx) in batches.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let x = view.x.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| view.labels[i]).collect();

            let mut g = Graph::new();
            let es = params.es.bind(&mut g, true);
            let ev = params.ev.bind(&mut g, true);
            let dec = params.dec.bind(&mut g, true);
            let hw = g.param(params.head.weight.clone());
            let hb = g.param(params.head.bias.clone());
            let xv = g.constant(x);
            let s = es.forward(&mut g, xv)?;
            let v = ev.forward(&mut g, xv)?;
            let z = g.concat_cols(s, v)?;
            let x_hat = dec.forward(&mut g, z)?;
            let rec = g.mse(x_hat, xv)?;
            let prior = moment_penalty(&mut g, v)?;
            let lin = g.matmul(s, hw)?;
            let logits = g.add_row_bias(lin, hb)?;
            let cls = cross_entropy(&mut g, logits, &y)?;

            let a = g.mul_scalar(rec, cfg.w_rec)?;
            let b = g.mul_scalar(prior, cfg.w_prior)?;
            let c = g.mul_scalar(cls, cfg.w_cls)?;
            let ab = g.add(a, b)?;
            let loss = g.add(ab, c)?;
            let parts = [g.scalar(loss), g.scalar(rec), g.scalar(prior), g.scalar(cls)];
            if parts.iter().any(|p| !p.is_finite()) {
                return Err(GError::Diverged { epoch, step, rec: parts[1], prior: parts[2], cls: parts[3] });
            }
            g.backward(loss)?;

            let mut vars = es.vars();
            vars.extend(ev.vars());
            vars.extend(dec.vars());
            vars.push(hw);
            vars.push(hb);
            let grads = collect_grads(&g, &vars);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
            opt.step(&mut params.params_mut(), &grad_refs)?;

            for (a, p) in acc.iter_mut().zip(parts) {
                *a += p * idx.len() as f64;
            }
            seen += idx.len();
        }
        let n = seen.max(1) as f64;
        let e = GEpoch { epoch, loss: acc[0] / n, rec: acc[1] / n, prior: acc[2] / n, cls: acc[3] / n };
        log::debug!("g epoch {epoch}: loss {:.5} rec {:.5} prior {:.5} cls {:.5}", e.loss, e.rec, e.prior, e.cls);
        report.epochs.push(e);
    }
    Ok((params, report))
}

/// Softmax-regression probe fitted full-batch with Adam.
pub fn fit_linear_probe(features: &Tensor, labels: &[usize], n_classes: usize, epochs: usize, seed: u64) -> Result<Linear, NumError> {
    let mut rng = rng::stream(seed, STREAM_INIT);
    let mut lin = Linear::init(features.cols(), n_classes, &mut rng);
    let mut opt = Adam::new(0.05, &[lin.weight.len(), lin.bias.len()]);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let w = g.param(lin.weight.clone());
        let b = g.param(lin.bias.clone());
        let x = g.constant(features.clone());
        let z = g.matmul(x, w)?;
        let logits = g.add_row_bias(z, b)?;
        let loss = cross_entropy(&mut g, logits, labels)?;
        g.backward(loss)?;
        let grads = collect_grads(&g, &[w, b]);
        opt.step(&mut [&mut lin.weight, &mut lin.bias], &[&grads[0], &grads[1]])?;
    }
    Ok(lin)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn linear_accuracy(lin: &Linear, features: &Tensor, labels: &[usize]) -> Result<f64, NumError> {
    let logits = ops::add_row_bias(&ops::matmul(features, &lin.weight)?, &lin.bias)?;
    let pred = argmax_rows(&logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

//! Central finite-difference checks for every differentiable graph op.
//!
//! The numeric side only evaluates forward passes, so it is independent of the
//! backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumError, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

/// Worst deviation seen for one gradient comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckStats {
    pub entries: usize,
    pub mismatches: usize,
    pub max_abs_err: f64,
}

impl CheckStats {
    fn merge(&mut self, o: CheckStats) {
        self.entries += o.entries;
        self.mismatches += o.mismatches;
        self.max_abs_err = self.max_abs_err.max(o.max_abs_err);
    }
}

/// Compares backward gradients of `f` at `inputs` against central differences.
pub fn check<F>(inputs: &[Tensor], f: F, tol: Tolerance) -> Result<CheckStats, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.scalar(l))
    };

    let mut stats = CheckStats::default();
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + tol.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - tol.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * tol.step);
            let err = (grads[j] - numeric).abs();
            stats.entries += 1;
            stats.max_abs_err = stats.max_abs_err.max(err);
            if err > tol.atol + tol.rtol * numeric.abs() {
                stats.mismatches += 1;
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub stats: CheckStats,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.stats.mismatches == 0
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Inputs kept away from the relu kink so the finite difference is well defined.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = rng.random_range(-2.0..2.0);
            if x.abs() > 1e-2 {
                break x;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Projects a node onto fixed random weights so every output entry matters.
fn project(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var, NumError> {
    let w = g.constant(weights.clone().reshape(g.value(v).shape().to_vec())?);
    let p = g.mul(v, w)?;
    g.sum(p)
}

type CaseFn = fn(&mut ChaCha8Rng, Tolerance) -> Result<CheckStats, NumError>;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4))
}

fn unary(
    rng: &mut ChaCha8Rng,
    tol: Tolerance,
    input: Tensor,
    op: fn(&mut Graph, Var) -> Result<Var, NumError>,
    out_len: usize,
) -> Result<CheckStats, NumError> {
    let w = uniform(rng, &[out_len]);
    check(&[input], |g, v| {
        let y = op(g, v[0])?;
        project(g, y, &w)
    }, tol)
}

fn binary(
    rng: &mut ChaCha8Rng,
    tol: Tolerance,
    a: Tensor,
    b: Tensor,
    op: fn(&mut Graph, Var, Var) -> Result<Var, NumError>,
    out_len: usize,
) -> Result<CheckStats, NumError> {
    let w = uniform(rng, &[out_len]);
    check(&[a, b], |g, v| {
        let y = op(g, v[0], v[1])?;
        project(g, y, &w)
    }, tol)
}

fn case_matmul(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, k, n) = dims(rng);
    let (a, b) = (uniform(rng, &[m, k]), uniform(rng, &[k, n]));
    binary(rng, tol, a, b, Graph::matmul, m * n)
}

fn case_transpose(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    unary(rng, tol, a, Graph::transpose, m * n)
}

fn case_add(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let (a, b) = (uniform(rng, &[m, n]), uniform(rng, &[m, n]));
    binary(rng, tol, a, b, Graph::add, m * n)
}

fn case_sub(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let (a, b) = (uniform(rng, &[m, n]), uniform(rng, &[m, n]));
    binary(rng, tol, a, b, Graph::sub, m * n)
}

fn case_mul(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let (a, b) = (uniform(rng, &[m, n]), uniform(rng, &[m, n]));
    binary(rng, tol, a, b, Graph::mul, m * n)
}

fn case_square(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    unary(rng, tol, a, Graph::square, m * n)
}

fn case_scalar_affine(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    let (c, d): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let w = uniform(rng, &[m * n]);
    check(&[a], |g, v| {
        let y = g.mul_scalar(v[0], c)?;
        let y = g.add_scalar(y, d)?;
        project(g, y, &w)
    }, tol)
}

fn case_row_bias(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let (a, b) = (uniform(rng, &[m, n]), uniform(rng, &[n]));
    binary(rng, tol, a, b, Graph::add_row_bias, m * n)
}

fn case_tanh(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    unary(rng, tol, a, Graph::tanh, m * n)
}

fn case_relu(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = away_from_zero(rng, &[m, n]);
    unary(rng, tol, a, Graph::relu, m * n)
}

fn case_softmax(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n + 1]);
    unary(rng, tol, a, Graph::softmax_rows, m * (n + 1))
}

fn case_logsumexp(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    let t: f64 = rng.random_range(0.5..2.0);
    let w = uniform(rng, &[m]);
    check(&[a], |g, v| {
        let y = g.logsumexp_rows(v[0], t)?;
        project(g, y, &w)
    }, tol)
}

fn case_gather(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let w = uniform(rng, &[m]);
    check(&[a], |g, v| {
        let y = g.gather_rows(v[0], &idx)?;
        project(g, y, &w)
    }, tol)
}

fn case_distance(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let (a, b) = (uniform(rng, &[m, n]), uniform(rng, &[m, n]));
    binary(rng, tol, a, b, Graph::row_l2_distance, m)
}

fn case_mse(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let (a, b) = (uniform(rng, &[m, n]), uniform(rng, &[m, n]));
    check(&[a, b], |g, v| g.mse(v[0], v[1]), tol)
}

fn case_reductions(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, n, _) = dims(rng);
    let a = uniform(rng, &[m, n]);
    let w = uniform(rng, &[n]);
    check(&[a], |g, v| {
        let s = g.sum(v[0])?;
        let mu = g.mean(v[0])?;
        let cm = g.mean_rows(v[0])?;
        let p = project(g, cm, &w)?;
        let t = g.add(s, mu)?;
        let t = g.mul(t, t)?;
        g.add(t, p)
    }, tol)
}

fn case_concat(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, p, q) = dims(rng);
    let (a, b) = (uniform(rng, &[m, p]), uniform(rng, &[m, q]));
    binary(rng, tol, a, b, Graph::concat_cols, m * (p + q))
}

/// Tanh layer, logits, cross-entropy with an energy hinge on top.
fn case_composite(rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<CheckStats, NumError> {
    let (m, d, k) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..4));
    let x = uniform(rng, &[m, d]);
    let w1 = uniform(rng, &[d, 4]);
    let b1 = uniform(rng, &[4]);
    let w2 = uniform(rng, &[4, k]);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    check(&[x, w1, b1, w2], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row_bias(h, v[2])?;
        let h = g.tanh(h)?;
        let logits = g.matmul(h, v[3])?;
        let lse = g.logsumexp_rows(logits, 1.0)?;
        let picked = g.gather_rows(logits, &labels)?;
        let ce = g.sub(lse, picked)?;
        let ce = g.mean(ce)?;
        // energy = -lse; hinge (E + 0.5)^2 keeps the op active for these inputs
        let lse_t = g.logsumexp_rows(logits, 1.5)?;
        let e = g.mul_scalar(lse_t, -1.0)?;
        let e = g.add_scalar(e, 10.0)?;
        let e = g.relu(e)?;
        let e = g.square(e)?;
        let e = g.mean(e)?;
        g.add(ce, e)
    }, tol)
}

const CASES: &[(&str, CaseFn)] = &[
    ("matmul", case_matmul),
    ("transpose", case_transpose),
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("square", case_square),
    ("mul_scalar+add_scalar", case_scalar_affine),
    ("add_row_bias", case_row_bias),
    ("tanh", case_tanh),
    ("relu", case_relu),
    ("softmax_rows", case_softmax),
    ("logsumexp_rows", case_logsumexp),
    ("gather_rows", case_gather),
    ("row_l2_distance", case_distance),
    ("mse", case_mse),
    ("sum+mean+mean_rows", case_reductions),
    ("concat_cols", case_concat),
    ("mlp+cross_entropy+energy_hinge", case_composite),
];

/// Runs every case on `instances` random inputs drawn from `[-2, 2]`.
pub fn run_suite(seed: u64, instances: usize, tol: Tolerance) -> Result<GradcheckReport, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(CASES.len());
    for &(name, f) in CASES {
        let mut stats = CheckStats::default();
        for _ in 0..instances {
            stats.merge(f(&mut rng, tol)?);
        }
        cases.push(CaseReport {
            name,
            instances,
            stats,
        });
    }
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_suite(11, 20, Tolerance::default()).unwrap();
        for c in &report.cases {
            assert!(c.passed(), "{} failed: {:?}", c.name, c.stats);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has no graph op; emulate a broken rule by comparing relu's
        // gradient against a function whose true slope differs.
        let x = Tensor::vector(vec![0.7]).unwrap();
        let stats = check(&[x], |g, v| {
            let r = g.relu(v[0])?;
            let s = g.sum(r)?;
            // forward value depends on x twice, backward path sees it once
            let c = g.constant(Tensor::scalar(g.value(v[0]).data()[0]));
            g.add(s, c)
        }, Tolerance::default())
        .unwrap();
        assert_eq!(stats.mismatches, 1);
    }
}

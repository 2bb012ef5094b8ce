use super::{NumError, Tensor};

/// Adam with bias correction over an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Fresh state (t = 0, zero moments) for parameters of the given lengths.
    pub fn new(lr: f64, param_lens: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Rebuilds a state from persisted moments.
    pub fn from_parts(lr: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self, NumError> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(NumError::InvalidArgument("adam moment lengths disagree".into()));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. `grads[i]` must match `params[i]` in length.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<(), NumError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumError::Shape {
                op: "adam_step",
                left: vec![self.m.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(NumError::Shape {
                    op: "adam_step",
                    left: vec![self.m[i].len()],
                    right: vec![p.len(), g.len()],
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(0.1, &[3]);
        opt.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.01, &[2]);
        opt.step(&mut [&mut p], &[&[3.0, -0.5]]).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-8);
        assert!((p.data()[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn matches_scalar_oracle_on_quadratic() {
        // minimise 0.5 * a * (w - c)^2, gradient a * (w - c)
        let (a, c, lr) = (3.0, 1.5, 0.05);
        let mut p = Tensor::vector(vec![-1.0]).unwrap();
        let mut opt = Adam::new(lr, &[1]);

        let (mut w, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = a * (p.data()[0] - c);
            opt.step(&mut [&mut p], &[&[g]]).unwrap();

            let gs = a * (w - c);
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - w).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn length_mismatch_is_error() {
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.01, &[2]);
        assert!(opt.step(&mut [&mut p], &[&[1.0]]).is_err());
        let mut q = Tensor::vector(vec![0.0]).unwrap();
        assert!(opt.step(&mut [&mut p, &mut q], &[&[1.0, 1.0], &[1.0]]).is_err());
    }
}

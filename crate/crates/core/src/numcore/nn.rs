//! Small fully connected networks with tanh activations.

use rand::Rng;

use super::{ops, Graph, NumError, Tensor, Var};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output).map(|_| rng.random_range(-a..a)).collect();
        Self {
            weight: Tensor::from_parts(vec![input, output], w),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, NumError> {
        match weight.shape() {
            [_, out] if bias.len() == *out => Ok(Self { weight, bias }),
            _ => Err(NumError::Shape {
                op: "linear",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            }),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of linear layers with tanh between them; `output_tanh` also squashes
/// the final layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    output_tanh: bool,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn init<R: Rng>(dims: &[usize], output_tanh: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output dims");
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers, output_tanh }
    }

    pub fn from_layers(layers: Vec<Linear>, output_tanh: bool) -> Result<Self, NumError> {
        if layers.is_empty() {
            return Err(NumError::Empty("mlp"));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(NumError::Shape {
                    op: "mlp",
                    left: w[0].weight.shape().to_vec(),
                    right: w[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers, output_tanh })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn output_tanh(&self) -> bool {
        self.output_tanh
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
            .collect();
        BoundMlp {
            layers,
            output_tanh: self.output_tanh,
        }
    }

    /// Eager forward pass over the rows of `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, NumError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = ops::add_row_bias(&ops::matmul(&h, &l.weight)?, &l.bias)?;
            if i < last || self.output_tanh {
                h = ops::tanh(&h)?;
            }
        }
        Ok(h)
    }
}

/// An [`Mlp`] whose parameters live in a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    output_tanh: bool,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_row_bias(z, b)?;
            if i < last || self.output_tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gradients for `vars` after a backward pass, zero-filled where the loss did
/// not reach a parameter.
pub fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eager_and_graph_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(&[4, 8, 3], true, &mut rng);
        let x = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 2.0]).unwrap();
        let eager = mlp.apply(&x).unwrap();
        let mut g = Graph::new();
        let bound = mlp.bind(&mut g, true);
        let xv = g.constant(x);
        let y = bound.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &eager);
    }

    #[test]
    fn zero_input_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&[5, 16, 16, 2], false, &mut rng);
        let y = mlp.apply(&Tensor::zeros(&[1, 5])).unwrap();
        assert!(y.is_finite());
        assert!(mlp.apply(&Tensor::zeros(&[1, 4])).is_err());
    }
}

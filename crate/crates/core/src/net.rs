//! Small dense networks used for coefficient maps, monotone heads and the
//! input-convex components.

use crate::tape::{softplus_scalar, Tape, Var};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Softplus,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Softplus => softplus_scalar(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::tape::sigmoid_scalar(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn apply_tape(&self, tape: &Tape, v: Var) -> Var {
        match self {
            Activation::Linear => v,
            Activation::Softplus => tape.softplus(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Relu => tape.relu(v),
        }
    }
}

/// Dense layer `y = x W + b`. When `nonneg` is set the stored weight is a
/// latent variable and the effective weight is `softplus(weight)`, keeping
/// the layer's dependence on its input monotone (given monotone activations)
/// while remaining smoothly trainable.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub nonneg: bool,
}

impl DenseLayer {
    /// Glorot-uniform init: weights `U(-r, r)` with `r = sqrt(6/(fan_in+fan_out))`,
    /// biases zero. A zero-input layer is a free parameter vector living in
    /// the bias, initialized `U(-1, 1)` so it carries signal.
    pub fn init(in_dim: usize, out_dim: usize, nonneg: bool, rng: &mut impl Rng) -> Self {
        let weight = if in_dim == 0 {
            Array2::zeros((0, out_dim))
        } else {
            let r = (6.0 / (in_dim + out_dim) as f64).sqrt();
            Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-r..r))
        };
        let bias = if in_dim == 0 {
            Array1::from_shape_fn(out_dim, |_| rng.random_range(-1.0..1.0))
        } else {
            Array1::zeros(out_dim)
        };
        DenseLayer {
            weight,
            bias,
            nonneg,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn effective_weight(&self) -> Array2<f64> {
        if self.nonneg {
            self.weight.mapv(softplus_scalar)
        } else {
            self.weight.clone()
        }
    }

    pub fn eval(&self, x: &Array1<f64>) -> Array1<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        if self.in_dim() == 0 {
            return self.bias.clone();
        }
        let w = self.effective_weight();
        w.t().dot(x) + &self.bias
    }

    /// Pre-activation forward on the tape. `leaves` must hold the weight and
    /// bias leaves in visitation order.
    pub fn forward_tape(&self, tape: &Tape, input: Var, leaves: &mut LeafStream) -> Var {
        let w = leaves.next();
        let b = leaves.next();
        let w_eff = if self.nonneg { tape.softplus(w) } else { w };
        tape.add(tape.matmul(input, w_eff), b)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a>)) {
        f(TensorRef::Mat(&self.weight));
        f(TensorRef::Vect(&self.bias));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_>)) {
        f(TensorMut::Mat(&mut self.weight));
        f(TensorMut::Vect(&mut self.bias));
    }
}

/// Multilayer perceptron; one activation tag per layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub acts: Vec<Activation>,
}

impl Mlp {
    /// `in_dim -> hidden... -> out_dim` with `hidden_act` on hidden layers
    /// and `out_act` on the output layer.
    pub fn init(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_act: Activation,
        out_act: Activation,
        nonneg: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut acts = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(DenseLayer::init(prev, h, nonneg, rng));
            acts.push(hidden_act);
            prev = h;
        }
        layers.push(DenseLayer::init(prev, out_dim, nonneg, rng));
        acts.push(out_act);
        Mlp { layers, acts }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn eval(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut h = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            h = layer.eval(&h).mapv(|v| act.apply(v));
        }
        h
    }

    pub fn forward_tape(&self, tape: &Tape, input: Var, leaves: &mut LeafStream) -> Var {
        let mut h = input;
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            let pre = layer.forward_tape(tape, h, leaves);
            h = act.apply_tape(tape, pre);
        }
        h
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

pub enum TensorRef<'a> {
    Mat(&'a Array2<f64>),
    Vect(&'a Array1<f64>),
}

pub enum TensorMut<'a> {
    Mat(&'a mut Array2<f64>),
    Vect(&'a mut Array1<f64>),
}

impl TensorRef<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::Mat(m) => m.len(),
            TensorRef::Vect(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf value for the tape: vectors become `1 x n` rows.
    pub fn as_matrix(&self) -> Array2<f64> {
        match self {
            TensorRef::Mat(m) => (*m).clone(),
            TensorRef::Vect(v) => (*v).clone().insert_axis(Axis(0)),
        }
    }
}

/// Cursor over pre-created parameter leaves.
pub struct LeafStream<'a> {
    leaves: &'a [Var],
    pos: usize,
}

impl<'a> LeafStream<'a> {
    pub fn new(leaves: &'a [Var]) -> Self {
        LeafStream { leaves, pos: 0 }
    }

    pub fn next(&mut self) -> Var {
        let v = self.leaves[self.pos];
        self.pos += 1;
        v
    }

    pub fn exhausted(&self) -> bool {
        self.pos == self.leaves.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_input_layer_is_free_parameter_vector() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let l = DenseLayer::init(0, 3, false, &mut rng);
        let out = l.eval(&Array1::zeros(0));
        assert_eq!(out.len(), 3);
        assert!(out.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn plain_and_tape_forward_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mlp = Mlp::init(
            3,
            &[4],
            2,
            Activation::Softplus,
            Activation::Linear,
            false,
            &mut rng,
        );
        let x = Array1::from(vec![0.3, -0.8, 1.1]);
        let plain = mlp.eval(&x);

        let tape = Tape::new();
        let mut leaves = Vec::new();
        mlp.visit(&mut |t| leaves.push(tape.param(t.as_matrix())));
        let xv = tape.constant(x.clone().insert_axis(Axis(0)));
        let mut stream = LeafStream::new(&leaves);
        let out = mlp.forward_tape(&tape, xv, &mut stream);
        assert!(stream.exhausted());
        let v = tape.value(out);
        for j in 0..2 {
            assert!((v[[0, j]] - plain[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonneg_layer_has_nonnegative_effective_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let l = DenseLayer::init(2, 2, true, &mut rng);
        assert!(l.effective_weight().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn empty_input_matmul_yields_bias() {
        // Exercises the n_p = 0 coefficient-net path on the tape.
        let tape = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let l = DenseLayer::init(0, 2, false, &mut rng);
        let mut leaves = Vec::new();
        l.visit(&mut |t| leaves.push(tape.param(t.as_matrix())));
        let x = tape.constant(Array2::zeros((4, 0)));
        let mut stream = LeafStream::new(&leaves);
        let out = l.forward_tape(&tape, x, &mut stream);
        let v = tape.value(out);
        assert_eq!(v.dim(), (4, 2));
        for i in 0..4 {
            for j in 0..2 {
                assert_eq!(v[[i, j]], l.bias[j]);
            }
        }
    }
}

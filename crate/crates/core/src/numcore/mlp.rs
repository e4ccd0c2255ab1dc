use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map `y = W x + b`, `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradient buffers with the same layout as a [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &LinearGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::new(vec![out_dim, in_dim], data).expect("finite init"),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            weight.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros(vec![dim]),
        }
    }

    /// Identity plus uniform noise of the given half-width on every weight.
    pub fn near_identity<R: Rng + ?Sized>(dim: usize, noise: f64, rng: &mut R) -> Self {
        let mut layer = Self::identity(dim);
        if noise > 0.0 {
            for w in layer.weight.data_mut() {
                *w += rng.random_range(-noise..noise);
            }
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        let w = self.weight.data();
        let n_in = self.in_dim();
        self.bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| b + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut LinearGrad) -> Vec<f64> {
        let n_in = self.in_dim();
        let w = self.weight.data();
        let mut grad_in = vec![0.0; n_in];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = o * n_in;
            for i in 0..n_in {
                grads.weight[row + i] += g * x[i];
                grad_in[i] += g * w[row + i];
            }
        }
        grad_in
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrad>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params.layers.iter().map(LinearGrad::zeros_like).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// Per-layer inputs and outputs recorded by the forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `activations[k]` is the input to layer `k`; the last entry is the output.
    pub activations: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output dimensions"));
        }
        Self::new(dims.windows(2).map(|d| Linear::glorot(d[0], d[1], rng)).collect())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Linear::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Tanh
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Linear::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::tensors_mut).collect()
    }
}

pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<(Vec<f64>, MlpTrace)> {
    if input.len() != params.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} features, network expects {}",
            input.len(),
            params.input_dim()
        )));
    }
    let mut activations = vec![input.to_vec()];
    for (k, layer) in params.layers.iter().enumerate() {
        let act = params.activation(k);
        let out: Vec<f64> = layer
            .forward(activations.last().unwrap())
            .into_iter()
            .map(|z| act.apply(z))
            .collect();
        activations.push(out);
    }
    Ok((activations.last().unwrap().clone(), MlpTrace { activations }))
}

/// Backward pass; accumulates into `grads` and returns `dL/dinput`.
pub fn mlp_backward(
    params: &MlpParams,
    trace: &MlpTrace,
    upstream: &[f64],
    grads: &mut MlpGrads,
) -> Result<Vec<f64>> {
    if upstream.len() != params.output_dim() {
        return Err(Error::invalid(format!(
            "upstream gradient has {} entries, network outputs {}",
            upstream.len(),
            params.output_dim()
        )));
    }
    let mut grad = upstream.to_vec();
    for k in (0..params.layers.len()).rev() {
        let act = params.activation(k);
        let out = &trace.activations[k + 1];
        for (g, &y) in grad.iter_mut().zip(out) {
            *g *= act.derivative_from_output(y);
        }
        grad = params.layers[k].backward(&trace.activations[k], &grad, &mut grads.layers[k]);
    }
    Ok(grad)
}

/// Forward then backward from a fresh set of gradient buffers.
pub fn mlp_forward_backward(
    params: &MlpParams,
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, MlpGrads, Vec<f64>)> {
    let (output, trace) = mlp_forward(params, input)?;
    let mut grads = MlpGrads::zeros_like(params);
    let input_grad = mlp_backward(params, &trace, upstream, &mut grads)?;
    Ok((output, grads, input_grad))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};

    #[test]
    fn identity_layer_passes_input_through() {
        let params = MlpParams::new(vec![Linear::identity(3)]).unwrap();
        let x = [0.5, -1.5, 2.0];
        let (y, _, _) = mlp_forward_backward(&params, &x, &[0.0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MlpParams::glorot(&[3, 4, 2], &mut rng).unwrap();
        let (_, grads, dx) = mlp_forward_backward(&params, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
        assert!(dx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mismatched_layers_and_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bad = vec![Linear::glorot(3, 4, &mut rng), Linear::glorot(5, 2, &mut rng)];
        assert!(MlpParams::new(bad).is_err());
        let params = MlpParams::glorot(&[3, 2], &mut rng).unwrap();
        assert!(mlp_forward(&params, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn analytic_grads_match_finite_differences_3_4_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let params = MlpParams::glorot(&[3, 4, 2], &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, grads, dx) = mlp_forward_backward(&params, &x, &up).unwrap();

            // scalar objective <upstream, f(theta, x)>
            let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
            let objective = |theta: &[f64]| {
                let mut p = params.clone();
                let mut off = 0;
                for t in p.tensors_mut() {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&theta[off..off + n]);
                    off += n;
                }
                let (y, _) = mlp_forward(&p, &x).unwrap();
                y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = finite_diff_grad(objective, &flat, 1e-5).unwrap();
            assert!(max_relative_error(&grads.flat(), &numeric) < 1e-5);

            let by_input = |xv: &[f64]| {
                let (y, _) = mlp_forward(&params, xv).unwrap();
                y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric_dx = finite_diff_grad(by_input, &x, 1e-5).unwrap();
            assert!(max_relative_error(&dx, &numeric_dx) < 1e-5);
        }
    }
}

//! Fully connected networks with ReLU hidden layers and exact backprop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::noise::NoiseSource;

/// Sigmoid outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// One affine layer: `y = x · weight + bias` with `weight` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub output_activation: OutputActivation,
}

/// Gradients with the same layout as [`MlpParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    layer_dims: Vec<usize>,
    fingerprint: u64,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<DenseMatrix>,
    /// Pre-activation of each layer.
    pre: Vec<DenseMatrix>,
    output: DenseMatrix,
}

impl MlpTape {
    pub fn output(&self) -> &DenseMatrix {
        &self.output
    }

    pub fn input(&self) -> &DenseMatrix {
        &self.inputs[0]
    }

    /// Smallest `|pre-activation|` over hidden (ReLU) layers; infinite for a
    /// single-layer network. Finite differences are only meaningful when this
    /// exceeds the perturbation size.
    pub fn hidden_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl MlpParams {
    /// All-zero parameters.
    pub fn zeros(layer_dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must list at least two positive widths, got {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layers,
            output_activation,
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn xavier(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        noise: &mut NoiseSource,
    ) -> Result<Self> {
        let mut params = Self::zeros(layer_dims, output_activation)?;
        for layer in &mut params.layers {
            let a = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = noise.uniform_range(-a, a);
            }
        }
        Ok(params)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        dims.push(self.layers[0].fan_in());
        dims.extend(self.layers.iter().map(Layer::fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.fan_in() * l.fan_out() + l.fan_out())
            .sum()
    }

    /// Checks that adjacent layer shapes line up.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::dim(
                    format!("layer {}", i + 1),
                    pair[0].fan_out(),
                    pair[1].fan_in(),
                ));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::dim(format!("layer {i} bias"), l.fan_out(), l.bias.len()));
            }
        }
        Ok(())
    }

    /// Order-sensitive hash of shapes and parameter bits.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for l in &self.layers {
            mix(l.fan_in() as u64);
            mix(l.fan_out() as u64);
            l.weight.data().iter().for_each(|w| mix(w.to_bits()));
            l.bias.iter().for_each(|b| mix(b.to_bits()));
        }
        h
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<(DenseMatrix, MlpTape)> {
        if input.rows() == 0 {
            return Err(Error::InsufficientBatch {
                what: "mlp_forward",
                required: 1,
                actual: 0,
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if current.cols() != layer.fan_in() {
                return Err(Error::dim(format!("layer {i} input"), layer.fan_in(), current.cols()));
            }
            let mut z = current.matmul(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let activated = if i < last {
                z.map(|v| v.max(0.0))
            } else {
                match self.output_activation {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Sigmoid => z.map(|v| clamp_prob(sigmoid(v))),
                }
            };
            inputs.push(current);
            pre.push(z);
            current = activated;
        }
        let tape = MlpTape {
            layer_dims: self.layer_dims(),
            fingerprint: self.fingerprint(),
            inputs,
            pre,
            output: current.clone(),
        };
        Ok((current, tape))
    }

    /// Output only; skips building a tape.
    pub fn predict(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let last = self.layers.len() - 1;
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if current.cols() != layer.fan_in() {
                return Err(Error::dim(format!("layer {i} input"), layer.fan_in(), current.cols()));
            }
            let mut z = current.matmul(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            current = if i < last {
                z.map(|v| v.max(0.0))
            } else {
                match self.output_activation {
                    OutputActivation::Identity => z,
                    OutputActivation::Sigmoid => z.map(|v| clamp_prob(sigmoid(v))),
                }
            };
        }
        Ok(current)
    }

    /// Gradients of a scalar loss given `upstream = dL/d(output)`.
    ///
    /// Clamped sigmoid outputs pass zero gradient, matching the clamp's
    /// derivative.
    pub fn backward(&self, tape: &MlpTape, upstream: &DenseMatrix) -> Result<(MlpGrads, DenseMatrix)> {
        if tape.layer_dims != self.layer_dims() {
            return Err(Error::InvalidTape(format!(
                "tape recorded layer dims {:?}, params have {:?}",
                tape.layer_dims,
                self.layer_dims()
            )));
        }
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::InvalidTape(
                "parameters changed since the forward pass".into(),
            ));
        }
        if upstream.shape() != tape.output.shape() {
            return Err(Error::dim(
                "mlp_backward upstream",
                format!("{}x{}", tape.output.rows(), tape.output.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut delta = match self.output_activation {
            OutputActivation::Identity => upstream.clone(),
            OutputActivation::Sigmoid => upstream.zip_map(&tape.output, |g, p| {
                if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                    0.0
                } else {
                    g * p * (1.0 - p)
                }
            })?,
        };
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let weight = tape.inputs[i].t_matmul(&delta)?;
            let bias = delta.column_sums();
            let input_grad = delta.matmul_t(&layer.weight)?;
            grads.push(Layer { weight, bias });
            delta = if i > 0 {
                input_grad.zip_map(&tape.pre[i - 1], |g, z| if z > 0.0 { g } else { 0.0 })?
            } else {
                input_grad
            };
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Parameters flattened layer by layer: weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat); returns the number of values consumed.
    pub fn set_from_flat(&mut self, values: &[f64]) -> Result<usize> {
        let need = self.param_count();
        if values.len() < need {
            return Err(Error::dim("set_from_flat", need, values.len()));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&values[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &MlpGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("accumulate layers", self.layers.len(), other.layers.len()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled_assign(&b.weight, 1.0)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_output_bias() {
        let mut p = MlpParams::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        p.layers[0].bias = vec![0.5, -1.5];
        let x = DenseMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let (y, _) = p.forward(&x).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut p = MlpParams::zeros(&[3, 3], OutputActivation::Identity).unwrap();
        p.layers[0].weight = DenseMatrix::identity(3);
        let x = DenseMatrix::from_fn(5, 3, |i, j| i as f64 - 2.0 * j as f64);
        assert_eq!(p.forward(&x).unwrap().0, x);
    }

    #[test]
    fn param_count_formula() {
        let p = MlpParams::zeros(&[64, 16, 1], OutputActivation::Sigmoid).unwrap();
        assert_eq!(p.param_count(), 64 * 16 + 16 + 16 + 1);
        assert_eq!(p.to_flat().len(), p.param_count());
    }

    #[test]
    fn dimension_error_names_layer() {
        let p = MlpParams::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        let err = p.forward(&DenseMatrix::zeros(2, 4)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn sigmoid_outputs_are_clamped() {
        let mut p = MlpParams::zeros(&[1, 1], OutputActivation::Sigmoid).unwrap();
        p.layers[0].weight.set(0, 0, 1.0);
        let x = DenseMatrix::column(&[-100.0, 0.0, 100.0]);
        let (y, _) = p.forward(&x).unwrap();
        assert_eq!(y.get(0, 0), PROB_CLAMP);
        assert_eq!(y.get(1, 0), 0.5);
        assert_eq!(y.get(2, 0), 1.0 - PROB_CLAMP);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let p = MlpParams::xavier(&[4, 5, 2], OutputActivation::Identity, &mut NoiseSource::new(1)).unwrap();
        let x = NoiseSource::new(2).sample(crate::noise::Distribution::StandardNormal, 3, 4);
        let (_, tape) = p.forward(&x).unwrap();
        let (g, gx) = p.backward(&tape, &DenseMatrix::zeros(3, 2)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_grad_is_input_transpose_times_upstream() {
        let p = MlpParams::xavier(&[3, 2], OutputActivation::Identity, &mut NoiseSource::new(3)).unwrap();
        let mut noise = NoiseSource::new(4);
        let x = noise.sample(crate::noise::Distribution::StandardNormal, 5, 3);
        let up = noise.sample(crate::noise::Distribution::StandardNormal, 5, 2);
        let (_, tape) = p.forward(&x).unwrap();
        let (g, _) = p.backward(&tape, &up).unwrap();
        assert_eq!(g.layers[0].weight, x.transpose().matmul(&up).unwrap());
        assert_eq!(g.layers[0].bias, up.column_sums());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut p = MlpParams::xavier(&[3, 2], OutputActivation::Identity, &mut NoiseSource::new(3)).unwrap();
        let x = DenseMatrix::filled(2, 3, 1.0);
        let (_, tape) = p.forward(&x).unwrap();
        p.layers[0].bias[0] += 1.0;
        assert!(matches!(
            p.backward(&tape, &DenseMatrix::zeros(2, 2)),
            Err(Error::InvalidTape(_))
        ));
        let other = MlpParams::zeros(&[3, 4, 2], OutputActivation::Identity).unwrap();
        assert!(matches!(
            other.backward(&tape, &DenseMatrix::zeros(2, 2)),
            Err(Error::InvalidTape(_))
        ));
    }

    #[test]
    fn flat_round_trip() {
        let p = MlpParams::xavier(&[4, 3, 2], OutputActivation::Sigmoid, &mut NoiseSource::new(9)).unwrap();
        let mut q = MlpParams::zeros(&[4, 3, 2], OutputActivation::Sigmoid).unwrap();
        assert_eq!(q.set_from_flat(&p.to_flat()).unwrap(), p.param_count());
        assert_eq!(p, q);
    }
}

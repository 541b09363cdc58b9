//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Layer, MlpGrads, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Layer>,
    pub second_moment: Vec<Layer>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        let zeros: Vec<Layer> = params
            .layers
            .iter()
            .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            config,
        }
    }

    fn check_shapes(&self, params: &MlpParams, grads: &MlpGrads) -> Result<()> {
        let n = params.layers.len();
        if grads.layers.len() != n || self.first_moment.len() != n || self.second_moment.len() != n {
            return Err(Error::dim(
                "adam_step layer count",
                n,
                format!(
                    "grads {}, moments {}/{}",
                    grads.layers.len(),
                    self.first_moment.len(),
                    self.second_moment.len()
                ),
            ));
        }
        for (i, p) in params.layers.iter().enumerate() {
            for (what, other) in [
                ("grad", &grads.layers[i]),
                ("first moment", &self.first_moment[i]),
                ("second moment", &self.second_moment[i]),
            ] {
                if other.weight.shape() != p.weight.shape() || other.bias.len() != p.bias.len() {
                    return Err(Error::dim(
                        format!("adam_step layer {i} {what}"),
                        format!("{:?}", p.weight.shape()),
                        format!("{:?}", other.weight.shape()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One Adam update in place.
///
/// Entries whose gradient is exactly zero are skipped (parameter and moments
/// untouched), so zero gradients leave parameters fixed for any state. All
/// gradients are checked for finiteness before anything is written.
pub fn adam_step(params: &mut MlpParams, grads: &MlpGrads, state: &mut AdamState, lr: f64) -> Result<()> {
    state.check_shapes(params, grads)?;
    for (i, g) in grads.layers.iter().enumerate() {
        if !g.weight.is_finite() {
            return Err(Error::PoisonedGradient(format!("layer{i}.weight")));
        }
        if g.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::PoisonedGradient(format!("layer{i}.bias")));
        }
    }
    state.step_count += 1;
    let AdamConfig { beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for k in 0..p.len() {
            let gk = g[k];
            if gk == 0.0 {
                continue;
            }
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    };

    for (i, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        update(
            layer.weight.data_mut(),
            g.weight.data(),
            m.weight.data_mut(),
            v.weight.data_mut(),
        );
        update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseMatrix;
    use crate::mlp::OutputActivation;
    use crate::noise::NoiseSource;

    fn scalar_net(w: f64) -> MlpParams {
        let mut p = MlpParams::zeros(&[1, 1], OutputActivation::Identity).unwrap();
        p.layers[0].weight.set(0, 0, w);
        p
    }

    fn scalar_grad(g: f64) -> MlpGrads {
        MlpGrads {
            layers: vec![Layer {
                weight: DenseMatrix::filled(1, 1, g),
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_net(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &scalar_grad(1.0), &mut s, 0.1).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let w = p.layers[0].weight.get(0, 0);
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point_for_any_state() {
        let mut p = MlpParams::xavier(&[3, 4, 2], OutputActivation::Sigmoid, &mut NoiseSource::new(1)).unwrap();
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = MlpGrads::zeros_like(&p);
        g.layers[0].weight.set(0, 0, 0.3);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        let before = p.clone();
        let zero = MlpGrads::zeros_like(&p);
        adam_step(&mut p, &zero, &mut s, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = MlpParams::xavier(&[3, 2], OutputActivation::Identity, &mut NoiseSource::new(2)).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = MlpGrads::zeros_like(&p);
        g.layers[0].weight.data_mut().iter_mut().for_each(|v| *v = 1.7);
        adam_step(&mut p, &g, &mut s, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn poisoned_gradient_names_parameter_and_writes_nothing() {
        let mut p = scalar_net(1.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let mut g = scalar_grad(1.0);
        g.layers[0].bias[0] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut s, 0.1).unwrap_err();
        assert_eq!(err, Error::PoisonedGradient("layer0.bias".into()));
        assert_eq!(p, scalar_net(1.0));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar_net(1.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let g = MlpGrads::zeros_like(&MlpParams::zeros(&[2, 1], OutputActivation::Identity).unwrap());
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.1), Err(Error::Dimension { .. })));
    }
}

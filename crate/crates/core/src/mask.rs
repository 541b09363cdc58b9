//! Per-dimension soft feature masks and the causal / non-causal split.
//!
//! The mask is `M = sigmoid((MLP(E) + g) / tau)` with one standard Gumbel draw
//! `g` per entry. A single Gumbel perturbation inside a sigmoid is not the
//! two-sample binary Concrete relaxation: the noise has mean ≈ 0.577 and is
//! skewed, so stochastic masks sit slightly above their deterministic
//! (`g = 0`) counterparts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::mlp::{sigmoid, MlpGrads, MlpParams, MlpTape, OutputActivation};
use crate::noise::{sample_gumbel, NoiseSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskNet {
    pub net: MlpParams,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Fresh Gumbel noise per entry.
    Stochastic,
    /// `g = 0`; used for evaluation.
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct MaskTape {
    mlp: MlpTape,
    mask: DenseMatrix,
    gumbel: Option<DenseMatrix>,
    temperature: f64,
}

impl MaskTape {
    pub fn mask(&self) -> &DenseMatrix {
        &self.mask
    }

    pub fn mlp(&self) -> &MlpTape {
        &self.mlp
    }

    /// The Gumbel draw used, if the pass was stochastic.
    pub fn gumbel(&self) -> Option<&DenseMatrix> {
        self.gumbel.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitFeatures {
    pub z_c: DenseMatrix,
    pub z_nc: DenseMatrix,
    pub mask: DenseMatrix,
}

impl MaskNet {
    /// `[d, d, d]` ReLU network with identity output; Xavier weights and the
    /// output bias set to `logit_bias`.
    pub fn new(d: usize, temperature: f64, logit_bias: f64, noise: &mut NoiseSource) -> Result<Self> {
        check_temperature(temperature)?;
        let mut net = MlpParams::xavier(&[d, d, d], OutputActivation::Identity, noise)?;
        if let Some(last) = net.layers.last_mut() {
            last.bias.iter_mut().for_each(|b| *b = logit_bias);
        }
        Ok(Self { net, temperature })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        self.net.validate()?;
        let d = self.net.input_dim();
        if self.net.output_dim() != d {
            return Err(Error::dim("mask net output width", d, self.net.output_dim()));
        }
        if self.net.output_activation != OutputActivation::Identity {
            return Err(Error::Config("mask net must emit raw logits".into()));
        }
        Ok(())
    }

    /// Gradients of the mask network given `dL/dM`.
    pub fn backward(&self, tape: &MaskTape, upstream: &DenseMatrix) -> Result<MlpGrads> {
        if upstream.shape() != tape.mask.shape() {
            return Err(Error::dim(
                "mask backward upstream",
                format!("{:?}", tape.mask.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        if tape.temperature != self.temperature {
            return Err(Error::InvalidTape("temperature changed since the forward pass".into()));
        }
        let inv_tau = 1.0 / tape.temperature;
        let d_logits = upstream.zip_map(&tape.mask, |g, m| g * m * (1.0 - m) * inv_tau)?;
        let (grads, _) = self.net.backward(&tape.mlp, &d_logits)?;
        Ok(grads)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// Computes the mask for a batch of embeddings.
pub fn compute_mask(
    embeddings: &DenseMatrix,
    net: &MaskNet,
    mode: MaskMode,
    noise: &mut NoiseSource,
) -> Result<(DenseMatrix, MaskTape)> {
    let gumbel = match mode {
        MaskMode::Stochastic => Some(sample_gumbel(noise, embeddings.rows(), net.dim())),
        MaskMode::Deterministic => None,
    };
    compute_mask_with_noise(embeddings, net, gumbel)
}

/// Like [`compute_mask`] but with an explicit (frozen) Gumbel matrix; `None`
/// means `g = 0`.
pub fn compute_mask_with_noise(
    embeddings: &DenseMatrix,
    net: &MaskNet,
    gumbel: Option<DenseMatrix>,
) -> Result<(DenseMatrix, MaskTape)> {
    check_temperature(net.temperature)?;
    if embeddings.cols() != net.dim() {
        return Err(Error::dim("compute_mask embedding width", net.dim(), embeddings.cols()));
    }
    let (logits, mlp) = net.net.forward(embeddings)?;
    let inv_tau = 1.0 / net.temperature;
    let mask = match &gumbel {
        Some(g) => logits.zip_map(g, |l, g| sigmoid((l + g) * inv_tau))?,
        None => logits.map(|l| sigmoid(l * inv_tau)),
    };
    let tape = MaskTape {
        mlp,
        mask: mask.clone(),
        gumbel,
        temperature: net.temperature,
    };
    Ok((mask, tape))
}

/// Splits one coordinate so that `z_c + z_nc == e` holds exactly in `f64`.
///
/// `z_c` is `m * e` up to at most a couple of ulps; `z_nc` is `e - z_c`
/// nudged by an ulp where rounding would otherwise break the identity.
fn split_coordinate(e: f64, m: f64) -> (f64, f64) {
    let mut z_c = m * e;
    for _ in 0..4 {
        let r = e - z_c;
        for cand in [r, r.next_up(), r.next_down()] {
            if z_c + cand == e {
                return (z_c, cand);
            }
        }
        z_c = if z_c > 0.0 { z_c.next_down() } else { z_c.next_up() };
    }
    (m * e, e - m * e)
}

/// `z_c = M ⊙ E`, `z_nc = (1 - M) ⊙ E`.
pub fn split_features(embeddings: &DenseMatrix, mask: &DenseMatrix) -> Result<SplitFeatures> {
    if embeddings.shape() != mask.shape() {
        return Err(Error::dim(
            "split_features",
            format!("{:?}", embeddings.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    let (rows, cols) = embeddings.shape();
    let mut z_c = Vec::with_capacity(rows * cols);
    let mut z_nc = Vec::with_capacity(rows * cols);
    for (&e, &m) in embeddings.data().iter().zip(mask.data()) {
        let (c, nc) = split_coordinate(e, m);
        z_c.push(c);
        z_nc.push(nc);
    }
    Ok(SplitFeatures {
        z_c: DenseMatrix::new(rows, cols, z_c)?,
        z_nc: DenseMatrix::new(rows, cols, z_nc)?,
        mask: mask.clone(),
    })
}

/// `dL/dM` from gradients on the two halves of the split.
pub fn split_backward(
    embeddings: &DenseMatrix,
    grad_z_c: &DenseMatrix,
    grad_z_nc: &DenseMatrix,
) -> Result<DenseMatrix> {
    let diff = grad_z_c.sub(grad_z_nc)?;
    diff.hadamard(embeddings)
}

/// Batch mean of the per-row L1 norm.
pub fn mask_sparsity(mask: &DenseMatrix) -> f64 {
    if mask.rows() == 0 {
        return 0.0;
    }
    mask.row_sums().iter().map(|s| s.abs()).sum::<f64>() / mask.rows() as f64
}

/// Gradient of [`mask_sparsity`] for a mask with entries in `[0, 1]`.
pub fn mask_sparsity_grad(mask: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::filled(mask.rows(), mask.cols(), 1.0 / mask.rows().max(1) as f64)
}

/// Binary view of a mask for reporting; never used inside a loss.
pub fn hard_threshold(mask: &DenseMatrix, threshold: f64) -> DenseMatrix {
    mask.map(|m| if m >= threshold { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::Distribution;

    fn zero_logit_net(d: usize, tau: f64) -> MaskNet {
        MaskNet {
            net: MlpParams::zeros(&[d, d, d], OutputActivation::Identity).unwrap(),
            temperature: tau,
        }
    }

    #[test]
    fn zero_logits_give_half() {
        let e = NoiseSource::new(1).sample(Distribution::StandardNormal, 3, 4);
        for tau in [0.1, 1.0, 7.0] {
            let (m, _) = compute_mask(&e, &zero_logit_net(4, tau), MaskMode::Deterministic, &mut NoiseSource::new(0)).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn bad_temperature_is_a_config_error() {
        let e = DenseMatrix::zeros(2, 3);
        for tau in [0.0, -1.0, f64::NAN] {
            let err = compute_mask(&e, &zero_logit_net(3, tau), MaskMode::Deterministic, &mut NoiseSource::new(0)).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn low_temperature_saturates() {
        let mut net = zero_logit_net(4, 1e-3);
        net.net.layers[1].bias = vec![0.1, -0.1, 0.3, -2.0];
        let g = DenseMatrix::from_rows(&[vec![0.0, 0.0, -0.5, 1.5]]).unwrap();
        let (m, _) = compute_mask_with_noise(&DenseMatrix::zeros(1, 4), &net, Some(g)).unwrap();
        // logit + g = [0.1, -0.1, -0.2, -0.5]
        let expect = [1.0, 0.0, 0.0, 0.0];
        for (v, t) in m.data().iter().zip(expect) {
            assert!((v - t).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn deterministic_is_repeatable_and_equals_zero_noise() {
        let mut noise = NoiseSource::new(4);
        let net = MaskNet::new(5, 2.0, 1.0, &mut noise).unwrap();
        let e = noise.sample(Distribution::StandardNormal, 6, 5);
        let (a, _) = compute_mask(&e, &net, MaskMode::Deterministic, &mut noise).unwrap();
        let (b, _) = compute_mask(&e, &net, MaskMode::Deterministic, &mut noise).unwrap();
        let (c, _) = compute_mask_with_noise(&e, &net, Some(DenseMatrix::zeros(6, 5))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn split_examples() {
        let e = DenseMatrix::from_rows(&[vec![2.0, -4.0]]).unwrap();
        let s = split_features(&e, &DenseMatrix::filled(1, 2, 0.5)).unwrap();
        assert_eq!(s.z_c.data(), &[1.0, -2.0]);
        assert_eq!(s.z_nc.data(), &[1.0, -2.0]);
        let s = split_features(&e, &DenseMatrix::filled(1, 2, 1.0)).unwrap();
        assert_eq!(s.z_c, e);
        assert!(s.z_nc.data().iter().all(|&v| v == 0.0));
        let s = split_features(&e, &DenseMatrix::zeros(1, 2)).unwrap();
        assert!(s.z_c.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.z_nc, e);
        assert!(split_features(&e, &DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(mask_sparsity(&DenseMatrix::filled(3, 8, 1.0)), 8.0);
        assert_eq!(mask_sparsity(&DenseMatrix::zeros(3, 8)), 0.0);
        assert_eq!(mask_sparsity(&DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.5]]).unwrap()), 1.5);
    }

    #[test]
    fn hard_threshold_is_binary() {
        let m = DenseMatrix::from_rows(&[vec![0.2, 0.5, 0.9]]).unwrap();
        assert_eq!(hard_threshold(&m, 0.5).data(), &[0.0, 1.0, 1.0]);
    }
}

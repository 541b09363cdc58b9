//! Loss terms and the combined training objective.
//!
//! ```text
//! total = cls - alpha * adv + lambda1 * ‖M‖₁ + lambda2 * HSIC(z_c, z_nc) + beta * inv
//! ```
//!
//! Expectations are batch means. The adversary loss is split into a
//! positive-class and a negative-class part, each normalised by the full
//! batch size, so the two parts sum to ordinary mean BCE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::independence::{hsic_backward, hsic_biased, hsic_with_bandwidths, KernelConfig};
use crate::mask::{mask_sparsity, split_features, MaskNet, MaskTape};
use crate::matrix::DenseMatrix;
use crate::mlp::{clamp_prob, MlpGrads, MlpParams};
use crate::noise::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub drop_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1.0,
            lambda1: 1e-2,
            lambda2: 1.0,
            drop_p: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            drop_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::Config(format!("drop_p must lie in [0, 1), got {}", self.drop_p)));
        }
        Ok(())
    }
}

/// Raw (unweighted) loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub adv: f64,
    pub mask_l1: f64,
    pub mask_hsic: f64,
    pub inv: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub adv: f64,
    pub mask_l1: f64,
    pub mask_hsic: f64,
    pub inv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            cls: self.cls,
            adv: self.adv,
            mask_l1: self.mask_l1,
            mask_hsic: self.mask_hsic,
            inv: self.inv,
        }
    }

    /// `total` recomputed from the parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        combine(&self.parts(), w)
    }
}

fn combine(p: &LossParts, w: &LossWeights) -> f64 {
    p.cls - w.alpha * p.adv + w.lambda1 * p.mask_l1 + w.lambda2 * p.mask_hsic + w.beta * p.inv
}

/// Weighted total; fails on any non-finite part, naming it.
pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (term, v) in [
        ("cls", parts.cls),
        ("adv", parts.adv),
        ("mask_l1", parts.mask_l1),
        ("mask_hsic", parts.mask_hsic),
        ("inv", parts.inv),
    ] {
        if !v.is_finite() {
            return Err(Error::PoisonedLoss {
                term: term.into(),
                step: None,
            });
        }
    }
    Ok(LossBreakdown {
        cls: parts.cls,
        adv: parts.adv,
        mask_l1: parts.mask_l1,
        mask_hsic: parts.mask_hsic,
        inv: parts.inv,
        total: combine(&parts, w),
    })
}

fn check_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(context, a, b));
    }
    if a == 0 {
        return Err(Error::EmptyDataset(context.into()));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(prob: &[f64], label: &[f64]) -> Result<f64> {
    check_len("bce", prob.len(), label.len())?;
    let n = prob.len() as f64;
    Ok(prob
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// `d bce / d prob`.
pub fn bce_grad(prob: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    check_len("bce", prob.len(), label.len())?;
    let n = prob.len() as f64;
    Ok(prob
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversaryLoss {
    pub positive: f64,
    pub negative: f64,
}

impl AdversaryLoss {
    pub fn total(&self) -> f64 {
        self.positive + self.negative
    }
}

pub fn adversary_loss(d_prob: &[f64], label: &[f64]) -> Result<AdversaryLoss> {
    check_len("adversary_loss", d_prob.len(), label.len())?;
    let n = d_prob.len() as f64;
    let mut positive = 0.0;
    let mut negative = 0.0;
    for (&p, &y) in d_prob.iter().zip(label) {
        let p = clamp_prob(p);
        positive -= y * p.ln();
        negative -= (1.0 - y) * (1.0 - p).ln();
    }
    Ok(AdversaryLoss {
        positive: positive / n,
        negative: negative / n,
    })
}

/// `d L_adv / d d_prob`; identical to [`bce_grad`].
pub fn adversary_loss_grad(d_prob: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    bce_grad(d_prob, label)
}

/// Entrywise Bernoulli(`drop_p`) ablation: returns `(z_c ⊙ (1 - B), B)`.
pub fn counterfactual_drop(
    z_c: &DenseMatrix,
    drop_p: f64,
    noise: &mut NoiseSource,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::Config(format!("drop_p must lie in [0, 1), got {drop_p}")));
    }
    let b = sample_drop_mask(z_c.rows(), z_c.cols(), drop_p, noise);
    let z_cf = apply_drop(z_c, &b)?;
    Ok((z_cf, b))
}

pub fn sample_drop_mask(rows: usize, cols: usize, drop_p: f64, noise: &mut NoiseSource) -> DenseMatrix {
    if drop_p == 0.0 {
        return DenseMatrix::zeros(rows, cols);
    }
    noise.sample(crate::noise::Distribution::Bernoulli(drop_p), rows, cols)
}

pub fn apply_drop(z_c: &DenseMatrix, drop: &DenseMatrix) -> Result<DenseMatrix> {
    z_c.zip_map(drop, |z, b| if b != 0.0 { 0.0 } else { z })
}

/// Mean Bernoulli KL `KL(p ‖ p_cf)` with both arguments clamped.
pub fn kl_consistency(p: &[f64], p_cf: &[f64]) -> Result<f64> {
    check_len("kl_consistency", p.len(), p_cf.len())?;
    let n = p.len() as f64;
    Ok(p.iter()
        .zip(p_cf)
        .map(|(&p, &q)| {
            let (p, q) = (clamp_prob(p), clamp_prob(q));
            p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
        })
        .sum::<f64>()
        / n)
}

/// Gradients of [`kl_consistency`] with respect to `p` and `p_cf`.
pub fn kl_consistency_grad(p: &[f64], p_cf: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("kl_consistency", p.len(), p_cf.len())?;
    let n = p.len() as f64;
    let mut dp = Vec::with_capacity(p.len());
    let mut dq = Vec::with_capacity(p.len());
    for (&p, &q) in p.iter().zip(p_cf) {
        let (p, q) = (clamp_prob(p), clamp_prob(q));
        dp.push(((p / q).ln() - ((1.0 - p) / (1.0 - q)).ln()) / n);
        dq.push((-p / q + (1.0 - p) / (1.0 - q)) / n);
    }
    Ok((dp, dq))
}

/// `cls + beta * inv` for the classifier alone, with its parameter gradient.
/// Returns `(cls, inv, grads)`.
pub fn classifier_objective(
    classifier: &MlpParams,
    z_c: &DenseMatrix,
    drop: &DenseMatrix,
    labels: &[f64],
    beta: f64,
) -> Result<(f64, f64, MlpGrads)> {
    let z_cf = apply_drop(z_c, drop)?;
    let (h_out, h_tape) = classifier.forward(z_c)?;
    let (hcf_out, hcf_tape) = classifier.forward(&z_cf)?;
    let (p, q) = (column_vec(&h_out), column_vec(&hcf_out));
    let cls = bce(&p, labels)?;
    let inv = kl_consistency(&p, &q)?;
    let dcls = bce_grad(&p, labels)?;
    let (dkl_p, dkl_q) = kl_consistency_grad(&p, &q)?;
    let up_p: Vec<f64> = dcls.iter().zip(&dkl_p).map(|(a, b)| a + beta * b).collect();
    let up_q: Vec<f64> = dkl_q.iter().map(|b| beta * b).collect();
    let (mut grads, _) = classifier.backward(&h_tape, &DenseMatrix::column(&up_p))?;
    let (g2, _) = classifier.backward(&hcf_tape, &DenseMatrix::column(&up_q))?;
    grads.accumulate(&g2)?;
    Ok((cls, inv, grads))
}

/// `L_adv` for the adversary alone (the adversary descends it), with its
/// parameter gradient.
pub fn adversary_objective(
    adversary: &MlpParams,
    input: &DenseMatrix,
    labels: &[f64],
) -> Result<(AdversaryLoss, MlpGrads)> {
    let (out, tape) = adversary.forward(input)?;
    let pd = column_vec(&out);
    let loss = adversary_loss(&pd, labels)?;
    let up = adversary_loss_grad(&pd, labels)?;
    let (grads, _) = adversary.backward(&tape, &DenseMatrix::column(&up))?;
    Ok((loss, grads))
}

/// What the adversary sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversaryInput {
    /// `z_nc = (1 - M) ⊙ E`.
    Complement,
    /// A second copy of `E`; used when the mask is pinned to all-ones.
    Embedding,
}

/// Mask used by an objective pass.
#[derive(Debug, Clone, Copy)]
pub enum MaskInput<'a> {
    Learned { net: &'a MaskNet, tape: &'a MaskTape },
    AllOnes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub kernel: KernelConfig,
    /// Overrides per-batch bandwidth selection; used to freeze them for
    /// finite-difference checks.
    pub bandwidths: Option<(f64, f64)>,
    pub adversary_input: AdversaryInput,
}

impl ObjectiveConfig {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            kernel: KernelConfig::default(),
            bandwidths: None,
            adversary_input: AdversaryInput::Complement,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub mask: bool,
    pub classifier: bool,
    pub adversary: bool,
}

impl GradRequest {
    pub const ALL: Self = Self {
        mask: true,
        classifier: true,
        adversary: true,
    };
    pub const NONE: Self = Self {
        mask: false,
        classifier: false,
        adversary: false,
    };
}

/// Gradients are of `total`.
#[derive(Debug, Clone)]
pub struct ObjectivePass {
    pub breakdown: LossBreakdown,
    pub adversary_parts: AdversaryLoss,
    pub mask_grads: Option<MlpGrads>,
    pub classifier_grads: Option<MlpGrads>,
    pub adversary_grads: Option<MlpGrads>,
    /// Bandwidths used for `(z_c, z_nc)`, when HSIC was evaluated.
    pub bandwidths: Option<(f64, f64)>,
    pub classifier_probs: Vec<f64>,
    pub adversary_probs: Vec<f64>,
}

fn column_vec(m: &DenseMatrix) -> Vec<f64> {
    m.data().to_vec()
}

/// Evaluates every loss term on one batch and backpropagates `total` into
/// the requested players.
///
/// `drop` is the counterfactual Bernoulli mask (frozen by the caller), and the
/// Gumbel noise lives in the mask tape. With `AllOnes`, the HSIC term is
/// skipped and reported as 0.
#[allow(clippy::too_many_arguments)]
pub fn objective_pass(
    embeddings: &DenseMatrix,
    labels: &[f64],
    mask: MaskInput<'_>,
    classifier: &MlpParams,
    adversary: &MlpParams,
    drop: &DenseMatrix,
    cfg: &ObjectiveConfig,
    want: GradRequest,
) -> Result<ObjectivePass> {
    let w = &cfg.weights;
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::dim("objective labels", n, labels.len()));
    }
    let (mask_m, learned) = match mask {
        MaskInput::Learned { net, tape } => (tape.mask().clone(), Some((net, tape))),
        MaskInput::AllOnes => (DenseMatrix::filled(n, embeddings.cols(), 1.0), None),
    };
    let split = split_features(embeddings, &mask_m)?;
    let adv_in = match cfg.adversary_input {
        AdversaryInput::Complement => &split.z_nc,
        AdversaryInput::Embedding => embeddings,
    };

    // Classifier on z_c and on its counterfactual.
    let z_cf = apply_drop(&split.z_c, drop)?;
    let (h_out, h_tape) = classifier.forward(&split.z_c)?;
    let (hcf_out, hcf_tape) = classifier.forward(&z_cf)?;
    let p = column_vec(&h_out);
    let q = column_vec(&hcf_out);
    let cls = bce(&p, labels)?;
    let inv = kl_consistency(&p, &q)?;

    // Adversary.
    let (d_out, d_tape) = adversary.forward(adv_in)?;
    let pd = column_vec(&d_out);
    let adv_parts = adversary_loss(&pd, labels)?;

    let mask_l1 = mask_sparsity(&mask_m);
    let hsic = if learned.is_some() {
        Some(match cfg.bandwidths {
            Some((sa, sb)) => hsic_with_bandwidths(&split.z_c, &split.z_nc, sa, sb)?,
            None => hsic_biased(&split.z_c, &split.z_nc, &cfg.kernel)?,
        })
    } else {
        None
    };
    let parts = LossParts {
        cls,
        adv: adv_parts.total(),
        mask_l1,
        mask_hsic: hsic.as_ref().map_or(0.0, |(v, _)| *v),
        inv,
    };
    let breakdown = total_loss(parts, w)?;

    let need_h_input = want.mask && learned.is_some();
    let need_d_input = need_h_input && cfg.adversary_input == AdversaryInput::Complement;

    // d total / d p and d total / d q.
    let mut classifier_grads = None;
    let mut grad_z_c = None;
    if want.classifier || need_h_input {
        let dcls = bce_grad(&p, labels)?;
        let (dkl_p, dkl_q) = kl_consistency_grad(&p, &q)?;
        let up_p: Vec<f64> = dcls.iter().zip(&dkl_p).map(|(a, b)| a + w.beta * b).collect();
        let up_q: Vec<f64> = dkl_q.iter().map(|b| w.beta * b).collect();
        let (mut g1, dz1) = classifier.backward(&h_tape, &DenseMatrix::column(&up_p))?;
        let (g2, dz2) = classifier.backward(&hcf_tape, &DenseMatrix::column(&up_q))?;
        g1.accumulate(&g2)?;
        if want.classifier {
            classifier_grads = Some(g1);
        }
        if need_h_input {
            // z_cf = z_c ⊙ (1 - B).
            let dz2 = apply_drop(&dz2, drop)?;
            grad_z_c = Some(dz1.add(&dz2)?);
        }
    }

    let mut adversary_grads = None;
    let mut grad_z_nc = None;
    if want.adversary || need_d_input {
        let dadv = adversary_loss_grad(&pd, labels)?;
        let up: Vec<f64> = dadv.iter().map(|g| -w.alpha * g).collect();
        let (g, dz) = adversary.backward(&d_tape, &DenseMatrix::column(&up))?;
        if want.adversary {
            adversary_grads = Some(g);
        }
        if need_d_input {
            grad_z_nc = Some(dz);
        }
    }

    let bandwidths = hsic.as_ref().map(|(_, t)| t.bandwidths());
    let mut mask_grads = None;
    if want.mask {
        if let Some((net, tape)) = learned {
            let mut dzc = grad_z_c.unwrap_or_else(|| DenseMatrix::zeros(n, embeddings.cols()));
            let mut dznc = grad_z_nc.unwrap_or_else(|| DenseMatrix::zeros(n, embeddings.cols()));
            if let Some((_, t)) = &hsic {
                if w.lambda2 != 0.0 {
                    let (ga, gb) = hsic_backward(t, w.lambda2)?;
                    dzc = dzc.add(&ga)?;
                    dznc = dznc.add(&gb)?;
                }
            }
            let l1 = w.lambda1 / n as f64;
            let dm = dzc
                .sub(&dznc)?
                .hadamard(embeddings)?
                .map(|g| g + l1);
            mask_grads = Some(net.backward(tape, &dm)?);
        }
    }

    Ok(ObjectivePass {
        breakdown,
        adversary_parts: adv_parts,
        mask_grads,
        classifier_grads,
        adversary_grads,
        bandwidths,
        classifier_probs: p,
        adversary_probs: pd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!((bce(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce(&[0.5], &[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let confident = bce(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!(confident > 0.0 && confident <= 2e-7, "{confident}");
        let worked = bce(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        assert!((worked - (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((worked - 0.164252).abs() < 1e-6);
        assert!(bce(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn adversary_partials() {
        let l = adversary_loss(&[0.7, 0.4], &[1.0, 0.0]).unwrap();
        assert!((l.positive - 0.178337).abs() < 1e-6);
        assert!((l.negative - 0.255413).abs() < 1e-6);
        assert!((l.total() - 0.433750).abs() < 1e-6);
        assert!((l.total() - bce(&[0.7, 0.4], &[1.0, 0.0]).unwrap()).abs() < 1e-15);

        let one_class = adversary_loss(&[0.3, 0.8, 0.6], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(one_class.negative, 0.0);

        let perfect = adversary_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(perfect.total() <= 2e-7);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_consistency(&[0.3, 0.9], &[0.3, 0.9]).unwrap(), 0.0);
        let v = kl_consistency(&[0.9], &[0.5]).unwrap();
        assert!((v - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-15);
        assert!((v - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut noise = NoiseSource::new(8);
        for _ in 0..10_000 {
            let p = noise.uniform();
            let q = noise.uniform();
            assert!(kl_consistency(&[p], &[q]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            cls: 1.0,
            adv: 0.5,
            mask_l1: 2.0,
            mask_hsic: 0.1,
            inv: 0.3,
        };
        let w = LossWeights {
            alpha: 0.1,
            beta: 1.0,
            lambda1: 0.001,
            lambda2: 1.0,
            drop_p: 0.1,
        };
        let b = total_loss(parts, &w).unwrap();
        assert!((b.total - 1.352).abs() < 1e-12);
        assert_eq!(b.recompose(&w), b.total);
        assert_eq!(total_loss(parts, &LossWeights::zero()).unwrap().total, 1.0);

        let delta = 0.25;
        let shifted = total_loss(LossParts { adv: 0.5 + delta, ..parts }, &w).unwrap();
        assert!((b.total - shifted.total - w.alpha * delta).abs() < 1e-12);
    }

    #[test]
    fn poisoned_part_is_named() {
        let parts = LossParts {
            mask_hsic: f64::NAN,
            ..Default::default()
        };
        let err = total_loss(parts, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::PoisonedLoss { ref term, .. } if term == "mask_hsic"));
    }

    #[test]
    fn drop_examples() {
        let mut noise = NoiseSource::new(1);
        let z = noise.sample(crate::noise::Distribution::StandardNormal, 4, 5);
        let (z_cf, b) = counterfactual_drop(&z, 0.0, &mut noise).unwrap();
        assert_eq!(z_cf, z);
        assert!(b.data().iter().all(|&v| v == 0.0));
        let all = apply_drop(&z, &DenseMatrix::filled(4, 5, 1.0)).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));
        assert!(counterfactual_drop(&z, 1.0, &mut noise).is_err());
    }

    #[test]
    fn drop_rate_monte_carlo() {
        let z = DenseMatrix::filled(1000, 100, 1.0);
        let (_, b) = counterfactual_drop(&z, 0.1, &mut NoiseSource::new(21)).unwrap();
        let frac = b.sum() / 1e5;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { drop_p: 1.0, ..Default::default() }.validate().is_err());
    }
}

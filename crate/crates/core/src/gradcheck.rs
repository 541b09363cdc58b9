//! Central finite-difference verification of analytic gradients, and the
//! randomized suite behind the `gradcheck` command.

use crate::error::{Error, Result};
use crate::independence::{hsic_backward, hsic_biased, hsic_with_bandwidths, KernelConfig};
use crate::mask::{compute_mask_with_noise, mask_sparsity, mask_sparsity_grad, split_backward, split_features, MaskNet};
use crate::matrix::DenseMatrix;
use crate::mlp::{MlpParams, OutputActivation};
use crate::noise::{sample_gumbel, Distribution, NoiseSource};
use crate::objective::{
    adversary_loss, adversary_loss_grad, bce, bce_grad, kl_consistency, kl_consistency_grad, objective_pass,
    sample_drop_mask, AdversaryInput, GradRequest, LossWeights, MaskInput, ObjectiveConfig,
};

/// Denominator floor for the relative error, so entries whose true gradient
/// is at rounding-noise level compare on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative deviation `|a - f| / max(|a|, |f|, GRAD_FLOOR)`; 0 when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index of the worst parameter.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient of `loss_fn` at `params` with central
/// differences over every coordinate.
///
/// `loss_fn` returns `(value, gradient)` and must be deterministic.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let (value, analytic) = loss_fn(params)?;
    if !value.is_finite() {
        return Err(Error::Oracle(format!("loss is {value} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("analytic gradient", params.len(), analytic.len()));
    }
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + step;
        let (plus, _) = loss_fn(&x)?;
        x[i] = orig - step;
        let (minus, _) = loss_fn(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("loss is non-finite when perturbing parameter {i}")));
        }
        numeric.push((plus - minus) / (2.0 * step));
    }
    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &f)| relative_error(a, f))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// Pass threshold for every case of [`run_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Central-difference step used by the suite.
pub const SUITE_STEP: f64 = 1e-5;

/// Instances whose ReLU pre-activations come closer than this to a kink are
/// redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub params: usize,
    pub max_relative_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < SUITE_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

fn random_matrix(noise: &mut NoiseSource, rows: usize, cols: usize) -> DenseMatrix {
    noise.sample(Distribution::StandardNormal, rows, cols)
}

fn dot(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn mlp_margin(net: &MlpParams, x: &DenseMatrix) -> Result<f64> {
    Ok(net.forward(x)?.1.hidden_margin())
}

/// Draws a network whose hidden pre-activations on `x` keep clear of the ReLU
/// kink.
fn kink_free_mlp(
    dims: &[usize],
    act: OutputActivation,
    x: &DenseMatrix,
    noise: &mut NoiseSource,
) -> Result<MlpParams> {
    for _ in 0..1000 {
        let mut net = MlpParams::xavier(dims, act, noise)?;
        for l in &mut net.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.3 * noise.normal());
        }
        if mlp_margin(&net, x)? > KINK_MARGIN {
            return Ok(net);
        }
    }
    Err(Error::Oracle("could not draw a kink-free network instance".into()))
}

fn case(name: &str, n: usize, d: usize, params: &[f64], f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>) -> Result<CaseResult> {
    let r = finite_diff_check(f, params, SUITE_STEP)?;
    Ok(CaseResult {
        name: name.to_string(),
        n,
        d,
        params: params.len(),
        max_relative_error: r.max_relative_error,
    })
}

fn probs(noise: &mut NoiseSource, n: usize) -> Vec<f64> {
    (0..n).map(|_| noise.uniform_range(0.05, 0.95)).collect()
}

fn labels(noise: &mut NoiseSource, n: usize) -> Vec<f64> {
    let mut y: Vec<f64> = (0..n).map(|_| noise.bernoulli(0.5) as u8 as f64).collect();
    // Both classes present.
    y[0] = 0.0;
    y[n - 1] = 1.0;
    y
}

/// Every differentiable operation, plus the full objective with frozen noise
/// and bandwidths, on randomized instances with `n <= 16` and `d <= 32`.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut noise = NoiseSource::new(seed);
    let mut cases = Vec::new();
    let shapes = [(6usize, 4usize), (11, 9), (16, 16), (16, 32)];
    for &(n, d) in &shapes {
        cases.extend(suite_instance(n, d, &mut noise)?);
    }
    Ok(SuiteReport { cases })
}

fn suite_instance(n: usize, d: usize, noise: &mut NoiseSource) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let x = random_matrix(noise, n, d);

    // MLP: parameters and input, identity and sigmoid heads.
    for (act, tag) in [(OutputActivation::Identity, "identity"), (OutputActivation::Sigmoid, "sigmoid")] {
        let hidden = (d / 2).max(2);
        let net = kink_free_mlp(&[d, hidden, 3], act, &x, noise)?;
        let u = random_matrix(noise, n, 3);
        let base = net.clone();
        out.push(case(&format!("mlp.params[{tag}]"), n, d, &net.to_flat(), |p| {
            let mut m = base.clone();
            m.set_from_flat(p)?;
            let (o, tape) = m.forward(&x)?;
            let (g, _) = m.backward(&tape, &u)?;
            Ok((dot(&o, &u), g.to_flat()))
        })?);
        out.push(case(&format!("mlp.input[{tag}]"), n, d, x.data(), |p| {
            let xi = DenseMatrix::new(n, d, p.to_vec())?;
            let (o, tape) = net.forward(&xi)?;
            let (_, gx) = net.backward(&tape, &u)?;
            Ok((dot(&o, &u), gx.into_data()))
        })?);
    }

    // Mask network with frozen Gumbel noise.
    let tau = noise.uniform_range(0.5, 2.0);
    let gumbel = sample_gumbel(noise, n, d);
    let mask_net = MaskNet {
        net: kink_free_mlp(&[d, d, d], OutputActivation::Identity, &x, noise)?,
        temperature: tau,
    };
    let u = random_matrix(noise, n, d);
    out.push(case("mask.net", n, d, &mask_net.net.to_flat(), |p| {
        let mut m = mask_net.clone();
        m.net.set_from_flat(p)?;
        let (mask, tape) = compute_mask_with_noise(&x, &m, Some(gumbel.clone()))?;
        Ok((dot(&mask, &u), m.backward(&tape, &u)?.to_flat()))
    })?);

    // Split and sparsity, with respect to the mask entries.
    let m0 = DenseMatrix::from_fn(n, d, |_, _| noise.uniform_range(0.05, 0.95));
    let (uc, unc) = (random_matrix(noise, n, d), random_matrix(noise, n, d));
    out.push(case("mask.split", n, d, m0.data(), |p| {
        let m = DenseMatrix::new(n, d, p.to_vec())?;
        let s = split_features(&x, &m)?;
        let g = split_backward(&x, &uc, &unc)?;
        Ok((dot(&s.z_c, &uc) + dot(&s.z_nc, &unc), g.into_data()))
    })?);
    out.push(case("mask.l1", n, d, m0.data(), |p| {
        let m = DenseMatrix::new(n, d, p.to_vec())?;
        Ok((mask_sparsity(&m), mask_sparsity_grad(&m).into_data()))
    })?);

    // HSIC with bandwidths frozen at the base point.
    let a = random_matrix(noise, n, d);
    let b = a.zip_map(&random_matrix(noise, n, d), |p, q| 0.6 * p + 0.8 * q)?;
    let (sa, sb) = hsic_biased(&a, &b, &KernelConfig::default())?.1.bandwidths();
    let ab: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    out.push(case("hsic", n, d, &ab, |p| {
        let a = DenseMatrix::new(n, d, p[..n * d].to_vec())?;
        let b = DenseMatrix::new(n, d, p[n * d..].to_vec())?;
        let (v, tape) = hsic_with_bandwidths(&a, &b, sa, sb)?;
        let (ga, gb) = hsic_backward(&tape, 1.0)?;
        Ok((v, ga.data().iter().chain(gb.data()).copied().collect()))
    })?);

    // Scalar losses.
    let y = labels(noise, n);
    let p0 = probs(noise, n);
    out.push(case("loss.bce", n, d, &p0, |p| Ok((bce(p, &y)?, bce_grad(p, &y)?)))?);
    out.push(case("loss.adversary", n, d, &p0, |p| {
        Ok((adversary_loss(p, &y)?.total(), adversary_loss_grad(p, &y)?))
    })?);
    let q0 = probs(noise, n);
    let pq: Vec<f64> = p0.iter().chain(&q0).copied().collect();
    out.push(case("loss.kl", n, d, &pq, |v| {
        let (dp, dq) = kl_consistency_grad(&v[..n], &v[n..])?;
        Ok((kl_consistency(&v[..n], &v[n..])?, dp.into_iter().chain(dq).collect()))
    })?);

    // Full objective, all three players, noise and bandwidths frozen.
    let weights = LossWeights {
        alpha: noise.uniform_range(0.1, 1.0),
        beta: noise.uniform_range(0.5, 2.0),
        lambda1: noise.uniform_range(0.01, 0.5),
        lambda2: noise.uniform_range(0.5, 2.0),
        drop_p: 0.3,
    };
    let drop = sample_drop_mask(n, d, weights.drop_p, noise);
    let h = MlpParams::xavier(&[d, 1], OutputActivation::Sigmoid, noise)?;
    let (mask0, _) = compute_mask_with_noise(&x, &mask_net, Some(gumbel.clone()))?;
    let split0 = split_features(&x, &mask0)?;
    let adv = kink_free_mlp(&[d, (d / 4).max(1), 1], OutputActivation::Sigmoid, &split0.z_nc, noise)?;
    let bandwidths = hsic_biased(&split0.z_c, &split0.z_nc, &KernelConfig::default())?
        .1
        .bandwidths();
    let cfg = ObjectiveConfig {
        bandwidths: Some(bandwidths),
        ..ObjectiveConfig::new(weights)
    };
    let sizes = [mask_net.net.param_count(), h.param_count()];
    let theta: Vec<f64> = mask_net
        .net
        .to_flat()
        .into_iter()
        .chain(h.to_flat())
        .chain(adv.to_flat())
        .collect();
    out.push(case("objective.total", n, d, &theta, |p| {
        let mut m = mask_net.clone();
        let mut hh = h.clone();
        let mut dd = adv.clone();
        m.net.set_from_flat(&p[..sizes[0]])?;
        hh.set_from_flat(&p[sizes[0]..sizes[0] + sizes[1]])?;
        dd.set_from_flat(&p[sizes[0] + sizes[1]..])?;
        let (_, tape) = compute_mask_with_noise(&x, &m, Some(gumbel.clone()))?;
        let pass = objective_pass(
            &x,
            &y,
            MaskInput::Learned { net: &m, tape: &tape },
            &hh,
            &dd,
            &drop,
            &cfg,
            GradRequest::ALL,
        )?;
        let g: Vec<f64> = pass
            .mask_grads
            .expect("requested")
            .to_flat()
            .into_iter()
            .chain(pass.classifier_grads.expect("requested").to_flat())
            .chain(pass.adversary_grads.expect("requested").to_flat())
            .collect();
        Ok((pass.breakdown.total, g))
    })?);

    // Pinned all-ones mask with the adversary on a copy of E.
    let adv_e = kink_free_mlp(&[d, (d / 4).max(1), 1], OutputActivation::Sigmoid, &x, noise)?;
    let pinned = ObjectiveConfig {
        adversary_input: AdversaryInput::Embedding,
        ..ObjectiveConfig::new(LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..weights
        })
    };
    let theta: Vec<f64> = h.to_flat().into_iter().chain(adv_e.to_flat()).collect();
    out.push(case("objective.pinned_mask", n, d, &theta, |p| {
        let mut hh = h.clone();
        let mut dd = adv_e.clone();
        hh.set_from_flat(&p[..sizes[1]])?;
        dd.set_from_flat(&p[sizes[1]..])?;
        let pass = objective_pass(&x, &y, MaskInput::AllOnes, &hh, &dd, &drop, &pinned, GradRequest::ALL)?;
        let g: Vec<f64> = pass
            .classifier_grads
            .expect("requested")
            .to_flat()
            .into_iter()
            .chain(pass.adversary_grads.expect("requested").to_flat())
            .collect();
        Ok((pass.breakdown.total, g))
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = [0.3, -1.2, 2.5, 0.01];
        let r = finite_diff_check(
            |p| Ok((p.iter().map(|x| x * x).sum::<f64>() / 2.0, p.to_vec())),
            &w,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-8, "{}", r.max_relative_error);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let r = finite_diff_check(|p| Ok((4.0, vec![0.0; p.len()])), &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = finite_diff_check(|p| Ok((p[0] * p[0], vec![p[0]])), &[1.0], 1e-5).unwrap();
        assert!(r.max_relative_error > 0.4);
    }

    #[test]
    fn non_finite_loss_is_an_oracle_failure() {
        let err = finite_diff_check(
            |p| Ok((if p[0] > 1.0 { f64::NAN } else { p[0] }, vec![1.0])),
            &[1.0],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
        assert!(finite_diff_check(|p| Ok((p[0], vec![1.0])), &[1.0], 0.0).is_err());
    }

    #[test]
    fn suite_passes() {
        let report = run_suite(1).unwrap();
        for c in &report.cases {
            assert!(c.passed(), "{} (n={}, d={}): {}", c.name, c.n, c.d, c.max_relative_error);
        }
    }
}

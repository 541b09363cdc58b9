//! Biased empirical HSIC with Gaussian kernels.
//!
//! `HSIC(A, B) = tr(K H L H) / (n - 1)^2` where `K`, `L` are Gaussian Gram
//! matrices `exp(-‖x_i - x_j‖² / (2σ²))` and `H = I - 11ᵀ/n`. Each batch gets
//! its own bandwidth (median of the unsquared pairwise distances, floored).
//! Bandwidths are constants as far as gradients are concerned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::noise::NoiseSource;
use crate::par;

pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 1e-6;
/// Smallest batch accepted by [`hsic_biased`].
pub const MIN_HSIC_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthMode {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth_mode: BandwidthMode,
    pub bandwidth_floor: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth_mode: BandwidthMode::MedianHeuristic,
            bandwidth_floor: DEFAULT_BANDWIDTH_FLOOR,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth_mode: BandwidthMode::Fixed(sigma),
            ..Self::default()
        }
    }

    pub fn bandwidth(&self, x: &DenseMatrix) -> Result<f64> {
        match self.bandwidth_mode {
            BandwidthMode::MedianHeuristic => median_bandwidth(x, self.bandwidth_floor),
            BandwidthMode::Fixed(s) => Ok(s.max(self.bandwidth_floor)),
        }
    }
}

/// Fills the strict upper triangle row-parallel, then mirrors it.
fn symmetric_from_upper(n: usize, f: impl Fn(usize, usize) -> f64 + Sync + Send) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(n, n);
    par::for_each_row_mut(out.data_mut(), n, |i, row| {
        for (j, o) in row.iter_mut().enumerate().skip(i + 1) {
            *o = f(i, j);
        }
    });
    let data = out.data_mut();
    for i in 0..n {
        for j in 0..i {
            data[i * n + j] = data[j * n + i];
        }
    }
    out
}

/// Squared Euclidean distances between all row pairs, via
/// `‖x_i‖² + ‖x_j‖² - 2 x_i·x_j` from one Gram product. The diagonal is exactly
/// zero, the result exactly symmetric and clamped at zero, and identical rows
/// are at distance exactly zero.
pub fn pairwise_sq_distances(x: &DenseMatrix) -> DenseMatrix {
    let g = x.matmul_t(x).expect("x · xᵀ is always conformable");
    let n = x.rows();
    symmetric_from_upper(n, |i, j| (g.get(i, i) + g.get(j, j) - 2.0 * g.get(i, j)).max(0.0))
}

fn median_of_upper(sq: &DenseMatrix) -> f64 {
    let n = sq.rows();
    let mut dists: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq.get(i, j).sqrt());
        }
    }
    let m = dists.len();
    let mid = m / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if m % 2 == 1 {
        upper
    } else {
        // Everything left of `mid` is <= upper; the lower median is their max.
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// Median of the `n(n-1)/2` pairwise distances, floored at `floor`.
pub fn median_bandwidth(x: &DenseMatrix, floor: f64) -> Result<f64> {
    if x.rows() < 2 {
        return Err(Error::InsufficientBatch {
            what: "median bandwidth",
            required: 2,
            actual: x.rows(),
        });
    }
    Ok(median_of_upper(&pairwise_sq_distances(x)).max(floor))
}

fn gram_from_sq(sq: &DenseMatrix, sigma: f64) -> DenseMatrix {
    let scale = -1.0 / (2.0 * sigma * sigma);
    let n = sq.rows();
    let mut k = symmetric_from_upper(n, |i, j| (sq.get(i, j) * scale).exp());
    for i in 0..n {
        k.set(i, i, 1.0);
    }
    k
}

/// `K[i][j] = exp(-‖x_i - x_j‖² / (2σ²))`.
pub fn gaussian_gram(x: &DenseMatrix, sigma: f64) -> Result<DenseMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    Ok(gram_from_sq(&pairwise_sq_distances(x), sigma))
}

/// `H K H` for symmetric `K`.
fn double_center(k: &DenseMatrix) -> DenseMatrix {
    let n = k.rows();
    let nf = n as f64;
    let means: Vec<f64> = k.row_sums().into_iter().map(|s| s / nf).collect();
    let grand = means.iter().sum::<f64>() / nf;
    let mut out = k.clone();
    par::for_each_row_mut(out.data_mut(), n, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v - means[i] - means[j] + grand;
        }
    });
    out
}

fn frobenius_dot(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct HsicTape {
    a: DenseMatrix,
    b: DenseMatrix,
    k: DenseMatrix,
    l: DenseMatrix,
    kc: DenseMatrix,
    lc: DenseMatrix,
    sigma_a: f64,
    sigma_b: f64,
}

impl HsicTape {
    pub fn bandwidths(&self) -> (f64, f64) {
        (self.sigma_a, self.sigma_b)
    }

    pub fn batch_size(&self) -> usize {
        self.a.rows()
    }

    fn check(&self) -> Result<()> {
        let n = self.a.rows();
        let ok = self.b.rows() == n
            && [&self.k, &self.l, &self.kc, &self.lc]
                .iter()
                .all(|m| m.shape() == (n, n));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTape("hsic tape matrices disagree on batch size".into()))
        }
    }
}

fn check_batches(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::dim("hsic batch sizes", a.rows(), b.rows()));
    }
    if a.rows() < MIN_HSIC_BATCH {
        return Err(Error::InsufficientBatch {
            what: "hsic",
            required: MIN_HSIC_BATCH,
            actual: a.rows(),
        });
    }
    Ok(())
}

fn bandwidth_from_sq(sq: &DenseMatrix, cfg: &KernelConfig) -> f64 {
    match cfg.bandwidth_mode {
        BandwidthMode::MedianHeuristic => median_of_upper(sq).max(cfg.bandwidth_floor),
        BandwidthMode::Fixed(s) => s.max(cfg.bandwidth_floor),
    }
}

/// Biased HSIC estimate with each batch's bandwidth chosen by `cfg`.
pub fn hsic_biased(a: &DenseMatrix, b: &DenseMatrix, cfg: &KernelConfig) -> Result<(f64, HsicTape)> {
    check_batches(a, b)?;
    let sq_a = pairwise_sq_distances(a);
    let sq_b = pairwise_sq_distances(b);
    let sigma_a = bandwidth_from_sq(&sq_a, cfg);
    let sigma_b = bandwidth_from_sq(&sq_b, cfg);
    Ok(hsic_from_sq(a, b, &sq_a, &sq_b, sigma_a, sigma_b))
}

/// Biased HSIC with explicit per-batch bandwidths.
pub fn hsic_with_bandwidths(
    a: &DenseMatrix,
    b: &DenseMatrix,
    sigma_a: f64,
    sigma_b: f64,
) -> Result<(f64, HsicTape)> {
    check_batches(a, b)?;
    for s in [sigma_a, sigma_b] {
        if !(s > 0.0) {
            return Err(Error::Config(format!("kernel bandwidth must be positive, got {s}")));
        }
    }
    let sq_a = pairwise_sq_distances(a);
    let sq_b = pairwise_sq_distances(b);
    Ok(hsic_from_sq(a, b, &sq_a, &sq_b, sigma_a, sigma_b))
}

fn hsic_from_sq(
    a: &DenseMatrix,
    b: &DenseMatrix,
    sq_a: &DenseMatrix,
    sq_b: &DenseMatrix,
    sigma_a: f64,
    sigma_b: f64,
) -> (f64, HsicTape) {
    let n = a.rows() as f64;
    let k = gram_from_sq(sq_a, sigma_a);
    let l = gram_from_sq(sq_b, sigma_b);
    let kc = double_center(&k);
    let lc = double_center(&l);
    let value = frobenius_dot(&kc, &lc) / ((n - 1.0) * (n - 1.0));
    let tape = HsicTape {
        a: a.clone(),
        b: b.clone(),
        k,
        l,
        kc,
        lc,
        sigma_a,
        sigma_b,
    };
    (value, tape)
}

/// `-(2/σ²) (diag(W 1) X - W X)` with `W = dV/dK ⊙ K`.
fn kernel_input_grad(x: &DenseMatrix, k: &DenseMatrix, dv_dk: &DenseMatrix, sigma: f64) -> Result<DenseMatrix> {
    let w = dv_dk.hadamard(k)?;
    let wx = w.matmul(x)?;
    let row_w = w.row_sums();
    let coef = -2.0 / (sigma * sigma);
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let wxi = wx.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = coef * (row_w[i] * xi[j] - wxi[j]);
        }
    }
    Ok(out)
}

/// Gradients of `upstream * HSIC` with respect to `A` and `B`.
pub fn hsic_backward(tape: &HsicTape, upstream: f64) -> Result<(DenseMatrix, DenseMatrix)> {
    tape.check()?;
    let n = tape.a.rows() as f64;
    let scale = upstream / ((n - 1.0) * (n - 1.0));
    let dv_dk = tape.lc.scale(scale);
    let dv_dl = tape.kc.scale(scale);
    let grad_a = kernel_input_grad(&tape.a, &tape.k, &dv_dk, tape.sigma_a)?;
    let grad_b = kernel_input_grad(&tape.b, &tape.l, &dv_dl, tape.sigma_b)?;
    Ok((grad_a, grad_b))
}

/// Nearest-rank percentile (`q` in `(0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationNull {
    pub observed: f64,
    pub null_values: Vec<f64>,
    pub threshold95: f64,
}

impl PermutationNull {
    /// Observed statistic exceeds the 95% null threshold.
    pub fn rejects(&self) -> bool {
        self.observed > self.threshold95
    }
}

/// Minimum number of permutations accepted by [`permutation_null`].
pub const MIN_PERMUTATIONS: usize = 100;

/// Empirical 95th percentile (nearest rank) of HSIC under row shuffles of `B`.
///
/// Permutations are drawn sequentially from `noise` and then evaluated in
/// parallel, so the result does not depend on the thread count. Bandwidths
/// are row-order invariant, so each permuted statistic reuses the centered
/// Gram matrices of the observed pair.
pub fn permutation_null(
    a: &DenseMatrix,
    b: &DenseMatrix,
    cfg: &KernelConfig,
    permutations: usize,
    noise: &mut NoiseSource,
) -> Result<PermutationNull> {
    if permutations < MIN_PERMUTATIONS {
        return Err(Error::Config(format!(
            "need at least {MIN_PERMUTATIONS} permutations, got {permutations}"
        )));
    }
    let (observed, tape) = hsic_biased(a, b, cfg)?;
    let n = a.rows();
    let denom = ((n - 1) * (n - 1)) as f64;
    let perms: Vec<Vec<usize>> = (0..permutations).map(|_| noise.permutation(n)).collect();
    let null_values = par::map_slice(&perms, |pi| {
        let mut acc = 0.0;
        for i in 0..n {
            let kc_row = tape.kc.row(i);
            let lc_row = tape.lc.row(pi[i]);
            for j in 0..n {
                acc += kc_row[j] * lc_row[pi[j]];
            }
        }
        acc / denom
    });
    let threshold95 = percentile(&null_values, 0.95);
    Ok(PermutationNull {
        observed,
        null_values,
        threshold95,
    })
}

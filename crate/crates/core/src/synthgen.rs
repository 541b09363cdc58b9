//! Synthetic structural causal model with known causal coordinates.
//!
//! Per sample: `Y ~ Bernoulli(0.5)`, `s = 2Y - 1`,
//!
//! ```text
//! Z_c  = s * label_weights + noise_c * N(0, I)                (causal dims)
//! Z_nc = style[domain] + rho[domain] * s + noise_nc * N(0, I)  (the rest)
//! E    = mix(Z_c ⊕ Z_nc) + noise_x * N(0, I)
//! ```
//!
//! The label leaks into the non-causal block only through `rho`, which is
//! non-zero in the training domain and zero in the shifted ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledBatch;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::noise::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MixingMode {
    /// Causal and non-causal coordinates placed directly into their dims.
    Aligned,
    /// Aligned placement followed by a seeded orthogonal rotation.
    Rotated { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Mean of the non-causal block, one entry per non-causal dim.
    pub style_mean: Vec<f64>,
    pub spurious_rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub d: usize,
    /// Sorted, distinct.
    pub causal_dims: Vec<usize>,
    pub label_weights: Vec<f64>,
    pub noise_c: f64,
    pub noise_nc: f64,
    pub noise_x: f64,
    pub mixing_mode: MixingMode,
    #[serde(with = "domain_keys")]
    pub domain_styles: BTreeMap<u32, DomainStyle>,
}

/// TOML tables need string keys; domain ids are written as decimal strings.
mod domain_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::DomainStyle;

    pub fn serialize<S: Serializer>(map: &BTreeMap<u32, DomainStyle>, s: S) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, &DomainStyle> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        keyed.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, DomainStyle>, D::Error> {
        BTreeMap::<String, DomainStyle>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|id| (id, v)).map_err(D::Error::custom))
            .collect()
    }
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        let dc = self.causal_dims.len();
        if self.causal_dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("causal_dims must be sorted and distinct".into()));
        }
        if self.causal_dims.last().is_some_and(|&i| i >= self.d) {
            return Err(Error::Config(format!("causal dims must lie in 0..{}", self.d)));
        }
        if self.label_weights.len() != dc {
            return Err(Error::dim("label_weights", dc, self.label_weights.len()));
        }
        for (name, v) in [
            ("noise_c", self.noise_c),
            ("noise_nc", self.noise_nc),
            ("noise_x", self.noise_x),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (id, style) in &self.domain_styles {
            if style.style_mean.len() != self.d - dc {
                return Err(Error::dim(
                    format!("style mean of domain {id}"),
                    self.d - dc,
                    style.style_mean.len(),
                ));
            }
            if !(style.spurious_rho.abs() <= 1.0) {
                return Err(Error::Config(format!(
                    "spurious_rho of domain {id} must lie in [-1, 1], got {}",
                    style.spurious_rho
                )));
            }
        }
        Ok(())
    }

    pub fn non_causal_dims(&self) -> Vec<usize> {
        let mut is_causal = vec![false; self.d];
        for &i in &self.causal_dims {
            is_causal[i] = true;
        }
        (0..self.d).filter(|&i| !is_causal[i]).collect()
    }

    /// Coordinate-wise ground truth; empty under rotated mixing, where no
    /// coordinate is causal on its own.
    pub fn ground_truth(&self) -> Vec<usize> {
        match self.mixing_mode {
            MixingMode::Aligned => self.causal_dims.clone(),
            MixingMode::Rotated { .. } => Vec::new(),
        }
    }
}

/// Seeded Haar-like orthogonal matrix via modified Gram–Schmidt on a Gaussian
/// matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> DenseMatrix {
    let mut noise = NoiseSource::new(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| noise.normal()).collect();
        for q in &cols {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    DenseMatrix::from_fn(d, d, |i, j| cols[j][i])
}

/// Draws `n` labelled samples from `domain_id`. Values are rounded to `f32`
/// so a batch equals its own `EMB1` round trip.
pub fn sample_batch(spec: &ScmSpec, domain_id: u32, n: usize, noise: &mut NoiseSource) -> Result<LabeledBatch> {
    spec.validate()?;
    let style = spec.domain_styles.get(&domain_id).ok_or(Error::UnknownDomain(domain_id))?;
    let nc_dims = spec.non_causal_dims();
    let d = spec.d;
    let mut data = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let y = noise.bernoulli(0.5);
        let s = if y { 1.0 } else { -1.0 };
        labels.push(y as u8);
        let row = &mut data[r * d..(r + 1) * d];
        for (j, &dim) in spec.causal_dims.iter().enumerate() {
            row[dim] = s * spec.label_weights[j] + spec.noise_c * noise.normal();
        }
        for (k, &dim) in nc_dims.iter().enumerate() {
            row[dim] = style.style_mean[k] + style.spurious_rho * s + spec.noise_nc * noise.normal();
        }
    }
    let mut embeddings = DenseMatrix::new(n, d, data)?;
    if let MixingMode::Rotated { seed } = spec.mixing_mode {
        embeddings = embeddings.matmul(&random_orthogonal(d, seed))?;
    }
    if spec.noise_x > 0.0 {
        for v in embeddings.data_mut() {
            *v += spec.noise_x * noise.normal();
        }
    }
    for v in embeddings.data_mut() {
        *v = *v as f32 as f64;
    }
    LabeledBatch::new(embeddings, labels, domain_id)?.with_ground_truth(spec.ground_truth())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        Self {
            train: 8192,
            val: 1024,
            test: 2048,
        }
    }
}

/// Free parameters of the canonical benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub d: usize,
    pub d_c: usize,
    pub label_weight: f64,
    pub noise_c: f64,
    pub noise_nc: f64,
    pub noise_x: f64,
    pub train_rho: f64,
    /// Common offset of each shifted domain's style mean.
    pub shift_offsets: Vec<f64>,
    /// Per-dimension jitter around each offset.
    pub shift_jitter: f64,
    pub rotated: bool,
    pub sizes: BenchmarkSizes,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_c: 8,
            label_weight: 2.0,
            noise_c: 0.3,
            noise_nc: 0.3,
            noise_x: 0.05,
            train_rho: 0.9,
            shift_offsets: vec![1.0, -1.0, 2.0],
            shift_jitter: 0.5,
            rotated: false,
            sizes: BenchmarkSizes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: ScmSpec,
    pub train: LabeledBatch,
    pub val: LabeledBatch,
    pub test_same_domain: LabeledBatch,
    pub test_shifted: Vec<LabeledBatch>,
}

impl Benchmark {
    /// `(name, batch)` for every split, in file order.
    pub fn splits(&self) -> Vec<(String, &LabeledBatch)> {
        let mut out = vec![
            ("train".to_string(), &self.train),
            ("val".to_string(), &self.val),
            ("test_same".to_string(), &self.test_same_domain),
        ];
        for (k, b) in self.test_shifted.iter().enumerate() {
            out.push((format!("test_shift{}", k + 1), b));
        }
        out
    }

    /// Test sets only: same-domain first, then the shifted ones.
    pub fn test_sets(&self) -> Vec<(String, &LabeledBatch)> {
        self.splits().into_iter().skip(2).collect()
    }
}

/// The canonical benchmark: training domain 0 with style mean 0 and
/// `rho = 0.9`; shifted domains 1..=3 with coherent style offsets and
/// `rho = 0`.
pub fn make_benchmark(seed: u64) -> Result<Benchmark> {
    make_benchmark_with(&BenchmarkConfig::default(), seed)
}

pub fn make_benchmark_with(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    if cfg.d_c > cfg.d {
        return Err(Error::Config(format!("d_c = {} exceeds d = {}", cfg.d_c, cfg.d)));
    }
    let mut noise = NoiseSource::new(seed);
    let mut causal_dims = noise.permutation(cfg.d)[..cfg.d_c].to_vec();
    causal_dims.sort_unstable();
    let n_nc = cfg.d - cfg.d_c;
    let mut domain_styles = BTreeMap::new();
    domain_styles.insert(
        0,
        DomainStyle {
            style_mean: vec![0.0; n_nc],
            spurious_rho: cfg.train_rho,
        },
    );
    for (k, &c) in cfg.shift_offsets.iter().enumerate() {
        let style_mean = (0..n_nc).map(|_| c + cfg.shift_jitter * noise.normal()).collect();
        domain_styles.insert(
            k as u32 + 1,
            DomainStyle {
                style_mean,
                spurious_rho: 0.0,
            },
        );
    }
    let spec = ScmSpec {
        d: cfg.d,
        causal_dims,
        label_weights: vec![cfg.label_weight; cfg.d_c],
        noise_c: cfg.noise_c,
        noise_nc: cfg.noise_nc,
        noise_x: cfg.noise_x,
        mixing_mode: if cfg.rotated {
            MixingMode::Rotated {
                seed: seed ^ 0x5eed_0f_u64,
            }
        } else {
            MixingMode::Aligned
        },
        domain_styles,
    };
    spec.validate()?;
    let s = cfg.sizes;
    let train = sample_batch(&spec, 0, s.train, &mut noise)?;
    let val = sample_batch(&spec, 0, s.val, &mut noise)?;
    let test_same_domain = sample_batch(&spec, 0, s.test, &mut noise)?;
    let test_shifted = (1..=cfg.shift_offsets.len() as u32)
        .map(|id| sample_batch(&spec, id, s.test, &mut noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        spec,
        train,
        val,
        test_same_domain,
        test_shifted,
    })
}

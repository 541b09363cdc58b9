//! Binary training checkpoints.
//!
//! ```text
//! "CKPT"  u32 version  u32 section_count
//! section*: [u8; 4] tag  u64 byte_len  payload
//! ```
//!
//! All integers are little-endian and floats are stored as raw `f64` bits, so
//! a save/load cycle is bit-exact. Sections, in order:
//!
//! | tag    | payload                                                      |
//! |--------|--------------------------------------------------------------|
//! | `CONF` | training config as TOML                                      |
//! | `BNDL` | current mask net, classifier, adversary                      |
//! | `ADAM` | Adam state of each player                                    |
//! | `PROG` | epoch, in-epoch cursor, step count, patience counter, epoch loss accumulator |
//! | `RNG ` | training noise state (ChaCha8 seed, stream, word position)   |
//! | `BEST` | best validation total and its bundle snapshot (optional)     |
//! | `HIST` | epoch history as TOML                                        |

use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::emb::write_atomic;
use crate::error::{Error, FormatErrorKind, Result};
use crate::mask::MaskNet;
use crate::matrix::DenseMatrix;
use crate::mlp::{Layer, MlpParams, OutputActivation};
use crate::noise::{NoiseSource, NoiseState};
use crate::objective::LossParts;
use crate::trainer::{ModelBundle, Optimizers, PartsAccumulator, TrainConfig, TrainHistory, Trainer};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }

    fn layer(&mut self, l: &Layer) {
        self.u32(l.fan_in() as u32);
        self.u32(l.fan_out() as u32);
        self.f64s(l.weight.data());
        self.f64s(&l.bias);
    }

    fn layers(&mut self, ls: &[Layer]) {
        self.u32(ls.len() as u32);
        ls.iter().for_each(|l| self.layer(l));
    }

    fn mlp(&mut self, p: &MlpParams) {
        self.u8(match p.output_activation {
            OutputActivation::Identity => 0,
            OutputActivation::Sigmoid => 1,
        });
        self.layers(&p.layers);
    }

    fn bundle(&mut self, b: &ModelBundle) {
        self.f64(b.mask_net.temperature);
        self.mlp(&b.mask_net.net);
        self.mlp(&b.classifier_h);
        self.mlp(&b.adversary_d);
        self.u8(b.mask_enabled as u8);
    }

    fn adam(&mut self, s: &AdamState) {
        self.f64(s.config.beta1);
        self.f64(s.config.beta2);
        self.f64(s.config.epsilon);
        self.u64(s.step_count);
        self.layers(&s.first_moment);
        self.layers(&s.second_moment);
    }

    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.bytes(tag);
        self.u64(payload.len() as u64);
        self.bytes(payload);
    }
}

/// Reader over one section; offsets are reported relative to the whole file.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: u64) -> Self {
        Self { bytes, pos: 0, base }
    }

    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn err(&self, kind: FormatErrorKind) -> Error {
        Error::Format {
            offset: self.offset(),
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos.checked_add(n).unwrap_or(usize::MAX))
            .ok_or_else(|| self.err(FormatErrorKind::Truncated))?;
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn layer(&mut self) -> Result<Layer> {
        let fan_in = self.u32()? as usize;
        let fan_out = self.u32()? as usize;
        let weight = DenseMatrix::new(fan_in, fan_out, self.f64s(fan_in * fan_out)?)?;
        let bias = self.f64s(fan_out)?;
        Ok(Layer { weight, bias })
    }

    fn layers(&mut self) -> Result<Vec<Layer>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.layer()).collect()
    }

    fn mlp(&mut self) -> Result<MlpParams> {
        let at = self.offset();
        let output_activation = match self.u8()? {
            0 => OutputActivation::Identity,
            1 => OutputActivation::Sigmoid,
            b => {
                return Err(Error::Format {
                    offset: at,
                    kind: FormatErrorKind::Malformed(format!("unknown activation tag {b}")),
                })
            }
        };
        let p = MlpParams {
            layers: self.layers()?,
            output_activation,
        };
        p.validate()?;
        Ok(p)
    }

    fn bundle(&mut self) -> Result<ModelBundle> {
        let temperature = self.f64()?;
        let net = self.mlp()?;
        let b = ModelBundle {
            mask_net: MaskNet { net, temperature },
            classifier_h: self.mlp()?,
            adversary_d: self.mlp()?,
            mask_enabled: self.u8()? != 0,
        };
        b.validate()?;
        Ok(b)
    }

    fn adam(&mut self) -> Result<AdamState> {
        let config = AdamConfig {
            beta1: self.f64()?,
            beta2: self.f64()?,
            epsilon: self.f64()?,
        };
        Ok(AdamState {
            config,
            step_count: self.u64()?,
            first_moment: self.layers()?,
            second_moment: self.layers()?,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(FormatErrorKind::TrailingBytes));
        }
        Ok(())
    }
}

fn toml_text<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(toml::to_string(v)
        .map_err(|e| Error::Io(format!("serialising checkpoint: {e}")))?
        .into_bytes())
}

fn parse_toml<T: serde::de::DeserializeOwned>(bytes: &[u8], offset: u64) -> Result<T> {
    let malformed = |m: String| Error::Format {
        offset,
        kind: FormatErrorKind::Malformed(m),
    };
    let text = std::str::from_utf8(bytes).map_err(|e| malformed(e.to_string()))?;
    toml::from_str(text).map_err(|e| malformed(e.to_string()))
}

/// Serialises the complete trainer state.
pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(VERSION);
    let has_best = trainer.best.is_some();
    out.u32(if has_best { 7 } else { 6 });

    out.section(b"CONF", &toml_text(&trainer.config)?);

    let mut w = Writer::default();
    w.bundle(&trainer.bundle);
    out.section(b"BNDL", &w.0);

    let mut w = Writer::default();
    w.adam(&trainer.optimizers.mask);
    w.adam(&trainer.optimizers.classifier);
    w.adam(&trainer.optimizers.adversary);
    out.section(b"ADAM", &w.0);

    let mut w = Writer::default();
    w.u64(trainer.epoch as u64);
    w.u64(trainer.cursor as u64);
    w.u64(trainer.steps);
    w.u64(trainer.bad_epochs as u64);
    let a = &trainer.accumulator;
    w.f64s(&[a.sum.cls, a.sum.adv, a.sum.mask_l1, a.sum.mask_hsic, a.sum.inv, a.weight]);
    out.section(b"PROG", &w.0);

    let s = trainer.noise.state();
    let mut w = Writer::default();
    w.bytes(&s.seed);
    w.u64(s.stream);
    w.bytes(&s.word_pos.to_le_bytes());
    out.section(b"RNG ", &w.0);

    if let Some((val, bundle)) = &trainer.best {
        let mut w = Writer::default();
        w.f64(*val);
        w.bundle(bundle);
        out.section(b"BEST", &w.0);
    }

    out.section(b"HIST", &toml_text(&trainer.history)?);
    Ok(out.0)
}

/// Restores a trainer saved by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mut head = Reader::new(bytes, 0);
    if head.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format {
            offset: 0,
            kind: FormatErrorKind::BadMagic,
        });
    }
    let version = head.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            kind: FormatErrorKind::UnsupportedVersion(version),
        });
    }
    let count = head.u32()?;
    let mut sections: Vec<([u8; 4], u64, &[u8])> = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = head.take(4)?.try_into().expect("4 bytes");
        let len = head.u64()?;
        let start = head.offset();
        let len = usize::try_from(len).map_err(|_| head.err(FormatErrorKind::Truncated))?;
        sections.push((tag, start, head.take(len)?));
    }
    head.finish()?;

    let find = |tag: &[u8; 4]| sections.iter().find(|(t, _, _)| t == tag).map(|&(_, o, b)| (o, b));
    let need = |tag: &[u8; 4]| {
        find(tag).ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            kind: FormatErrorKind::Malformed(format!("missing section {}", String::from_utf8_lossy(tag))),
        })
    };

    let (o, b) = need(b"CONF")?;
    let config: TrainConfig = parse_toml(b, o)?;

    let (o, b) = need(b"BNDL")?;
    let mut r = Reader::new(b, o);
    let bundle = r.bundle()?;
    r.finish()?;

    let (o, b) = need(b"ADAM")?;
    let mut r = Reader::new(b, o);
    let optimizers = Optimizers {
        mask: r.adam()?,
        classifier: r.adam()?,
        adversary: r.adam()?,
    };
    r.finish()?;

    let (o, b) = need(b"PROG")?;
    let mut r = Reader::new(b, o);
    let epoch = r.u64()? as usize;
    let cursor = r.u64()? as usize;
    let steps = r.u64()?;
    let bad_epochs = r.u64()? as usize;
    let v = r.f64s(6)?;
    r.finish()?;
    let accumulator = PartsAccumulator {
        sum: LossParts {
            cls: v[0],
            adv: v[1],
            mask_l1: v[2],
            mask_hsic: v[3],
            inv: v[4],
        },
        weight: v[5],
    };

    let (o, b) = need(b"RNG ")?;
    let mut r = Reader::new(b, o);
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;
    let noise = NoiseSource::from_state(NoiseState { seed, stream, word_pos });

    let best = match find(b"BEST") {
        Some((o, b)) => {
            let mut r = Reader::new(b, o);
            let val = r.f64()?;
            let bundle = r.bundle()?;
            r.finish()?;
            Some((val, bundle))
        }
        None => None,
    };

    let (o, b) = need(b"HIST")?;
    let history: TrainHistory = parse_toml(b, o)?;

    Ok(Trainer {
        config,
        bundle,
        optimizers,
        noise,
        epoch,
        cursor,
        steps,
        accumulator,
        history,
        best,
        bad_epochs,
    })
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<()> {
    write_atomic(path, &encode(trainer)?)
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

impl Trainer {
    /// The bundle used for evaluation: the best-validation snapshot when one
    /// exists, otherwise the current parameters.
    pub fn best_bundle(&self) -> &ModelBundle {
        self.best.as_ref().map_or(&self.bundle, |(_, b)| b)
    }
}

//! `EMB1` embedding files.
//!
//! ```text
//! offset  size   field
//! 0       4      magic "EMB1"
//! 4       4      version (u32 LE, = 1)
//! 8       4      n (u32 LE)
//! 12      4      d (u32 LE)
//! 16      4      flags (u32 LE): bit0 labels present, bit1 truth mask present
//! 20      4nd    embeddings, row-major f32 LE
//! ...     n      labels (0/1), if bit0
//! ...     d      truth mask (0/1), if bit1
//! ```
//!
//! Values are stored at 32-bit precision; the round-trip identity holds for
//! data that is already representable as `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::LabeledBatch;
use crate::error::{Error, FormatErrorKind, Result};
use crate::matrix::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;
pub const FLAG_LABELS: u32 = 1;
pub const FLAG_TRUTH: u32 = 2;

fn fmt_err(offset: u64, kind: FormatErrorKind) -> Error {
    Error::Format { offset, kind }
}

/// Serialises a batch. Labels are always written; the truth mask is written
/// when the batch carries ground truth.
pub fn encode(batch: &LabeledBatch) -> Result<Vec<u8>> {
    batch.validate()?;
    let (n, d) = batch.embeddings.shape();
    let n32 = u32::try_from(n).map_err(|_| Error::Config(format!("n = {n} does not fit in u32")))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Config(format!("d = {d} does not fit in u32")))?;
    let mut flags = FLAG_LABELS;
    if batch.ground_truth.is_some() {
        flags |= FLAG_TRUTH;
    }
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * n * d + n + d);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n32, d32, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, &v) in batch.embeddings.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Config(format!(
                "embedding value at row {}, col {} is not finite at 32-bit precision: {v}",
                i / d.max(1),
                i % d.max(1)
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&batch.labels);
    if let Some(gt) = &batch.ground_truth {
        let mut mask = vec![0u8; d];
        for &i in gt {
            mask[i] = 1;
        }
        out.extend_from_slice(&mask);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(fmt_err(offset as u64, FormatErrorKind::Truncated))
}

/// Contents of an `EMB1` file, before requiring labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbFile {
    pub embeddings: DenseMatrix,
    pub labels: Option<Vec<u8>>,
    pub ground_truth: Option<Vec<usize>>,
}

impl EmbFile {
    pub fn into_batch(self) -> Result<LabeledBatch> {
        let labels = self
            .labels
            .ok_or_else(|| Error::Config("embedding file carries no labels".into()))?;
        Ok(LabeledBatch {
            embeddings: self.embeddings,
            labels,
            domain_id: 0,
            ground_truth: self.ground_truth,
        })
    }
}

/// Parses a labelled `EMB1` buffer.
pub fn decode(bytes: &[u8]) -> Result<LabeledBatch> {
    decode_file(bytes)?.into_batch()
}

/// Parses an `EMB1` buffer. Every format error names the offending byte
/// offset.
pub fn decode_file(bytes: &[u8]) -> Result<EmbFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            fmt_err(bytes.len() as u64, FormatErrorKind::Truncated)
        } else {
            fmt_err(0, FormatErrorKind::BadMagic)
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(fmt_err(4, FormatErrorKind::UnsupportedVersion(version)));
    }
    let n = read_u32(bytes, 8)? as u64;
    let d = read_u32(bytes, 12)? as u64;
    let flags = read_u32(bytes, 16)?;
    if flags & !(FLAG_LABELS | FLAG_TRUTH) != 0 {
        return Err(fmt_err(16, FormatErrorKind::UnknownFlags(flags)));
    }
    let len = bytes.len() as u64;
    let payload_end = HEADER_LEN + 4 * n * d;
    if len < payload_end {
        let k = (len - HEADER_LEN) / 4;
        return Err(fmt_err(HEADER_LEN + 4 * k, FormatErrorKind::Truncated));
    }
    let labels_end = payload_end + if flags & FLAG_LABELS != 0 { n } else { 0 };
    let truth_end = labels_end + if flags & FLAG_TRUTH != 0 { d } else { 0 };
    if len < truth_end {
        return Err(fmt_err(len, FormatErrorKind::Truncated));
    }
    if len > truth_end {
        return Err(fmt_err(truth_end, FormatErrorKind::TrailingBytes));
    }
    let (n, d) = (n as usize, d as usize);
    let data: Vec<f64> = bytes[HEADER_LEN as usize..payload_end as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = &bytes[payload_end as usize..labels_end as usize];
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(fmt_err(payload_end + i as u64, FormatErrorKind::InvalidLabel(raw[i])));
        }
        Some(raw.to_vec())
    } else {
        None
    };
    let ground_truth = if flags & FLAG_TRUTH != 0 {
        let raw = &bytes[labels_end as usize..truth_end as usize];
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(fmt_err(labels_end + i as u64, FormatErrorKind::InvalidTruthByte(raw[i])));
        }
        Some(raw.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect())
    } else {
        None
    };
    Ok(EmbFile {
        embeddings: DenseMatrix::new(n, d, data)?,
        labels,
        ground_truth,
    })
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_emb(path: &Path, batch: &LabeledBatch) -> Result<()> {
    write_atomic(path, &encode(batch)?)
}

pub fn read_emb_file(path: &Path) -> Result<EmbFile> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_file(&bytes)
}

/// Reads a labelled `EMB1` file.
pub fn read_emb(path: &Path) -> Result<LabeledBatch> {
    read_emb_file(path)?.into_batch()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledBatch {
        let e = DenseMatrix::from_rows(&[vec![0.5, -1.25, 3.0], vec![2.0, 0.0, -0.125]]).unwrap();
        LabeledBatch::new(e, vec![1, 0], 0)
            .unwrap()
            .with_ground_truth(vec![0, 2])
            .unwrap()
    }

    #[test]
    fn layout_and_round_trip() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(bytes.len(), 20 + 4 * 6 + 2 + 3);
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(&bytes[20..24], &0.5f32.to_le_bytes());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_file_is_legal() {
        let b = LabeledBatch::new(DenseMatrix::zeros(0, 5), vec![], 0).unwrap();
        let bytes = encode(&b).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn truncation_offsets() {
        let bytes = encode(&sample()).unwrap();
        for k in 0..6u64 {
            let cut = &bytes[..(20 + 4 * k + 2) as usize];
            assert_eq!(
                decode(cut).unwrap_err(),
                fmt_err(20 + 4 * k, FormatErrorKind::Truncated),
                "k = {k}"
            );
        }
        assert_eq!(decode(&bytes[..45]).unwrap_err(), fmt_err(45, FormatErrorKind::Truncated));
        assert_eq!(decode(&bytes[..10]).unwrap_err(), fmt_err(8, FormatErrorKind::Truncated));
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&sample()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err(), fmt_err(0, FormatErrorKind::BadMagic));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad).unwrap_err(), fmt_err(4, FormatErrorKind::UnsupportedVersion(2)));
        let mut bad = good.clone();
        bad[16] = 7;
        assert_eq!(decode(&bad).unwrap_err(), fmt_err(16, FormatErrorKind::UnknownFlags(7)));
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode(&bad).unwrap_err(), fmt_err(49, FormatErrorKind::TrailingBytes));
        let mut bad = good.clone();
        bad[45] = 2;
        assert_eq!(decode(&bad).unwrap_err(), fmt_err(45, FormatErrorKind::InvalidLabel(2)));
        let mut bad = good;
        bad[47] = 9;
        assert_eq!(decode(&bad).unwrap_err(), fmt_err(47, FormatErrorKind::InvalidTruthByte(9)));
    }

    #[test]
    fn unlabelled_files_decode_without_labels() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[16] = 0;
        bytes.truncate(44);
        let f = decode_file(&bytes).unwrap();
        assert_eq!(f.labels, None);
        assert_eq!(f.embeddings.shape(), (2, 3));
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let e = DenseMatrix::from_rows(&[vec![1e300]]).unwrap();
        let b = LabeledBatch::new(e, vec![0], 0).unwrap();
        assert!(encode(&b).is_err());
    }
}

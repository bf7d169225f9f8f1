//! `CHAMFEAT` files: one labelled feature sequence.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "CHAMFEAT"
//!      8     4  version (u32 LE, currently 1)
//!     12     4  label (u32 LE)
//!     16    16  T, K1, K2, D (u32 LE each)
//!     32     -  T*K1*K2*D f32 LE values, frame-major then row-major (h, w, d)
//! ```

use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const FEATURE_MAGIC: &[u8; 8] = b"CHAMFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 32;

pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let shape = seq.shape();
    let dims = [shape.frames, shape.height, shape.width, shape.channels];
    let values: usize = dims.iter().product();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * values);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(seq.label, "label")?.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    }
    for f in &seq.frames {
        for &v in f.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit in u32")))
}

pub fn decode_features(bytes: &[u8], context: &str) -> Result<FeatureSequence> {
    let err = |offset: usize, message: String| Error::Format {
        context: context.to_string(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(err(
            bytes.len(),
            format!("header needs {FEATURE_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(err(0, "bad magic, expected \"CHAMFEAT\"".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(8);
    if version != FEATURE_VERSION {
        return Err(err(8, format!("unsupported version {version}")));
    }
    let label = word(12) as usize;
    let (t, kh, kw, d) = (word(16) as usize, word(20) as usize, word(24) as usize, word(28) as usize);
    if t == 0 || kh == 0 || kw == 0 || d == 0 {
        return Err(err(16, format!("empty dimension in {t}x{kh}x{kw}x{d}")));
    }
    let per_frame = kh * kw * d;
    let expected = t
        .checked_mul(per_frame)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| err(16, "dimensions overflow".into()))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() != expected {
        return Err(err(
            FEATURE_HEADER_LEN + payload.len().min(expected),
            format!(
                "expected {expected} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    let frames = payload
        .chunks_exact(4 * per_frame)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            Tensor3::new(kh, kw, d, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let id = Path::new(context)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| context.to_string());
    FeatureSequence::new(frames, label, id)
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode_features(seq)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

//! `PLLM` model files.
//!
//! Layout, all little-endian: magic `PLLM`, u32 K, u32 d, u8 has_adapter,
//! f32 sigma, K·d f32 W (row-major). With an adapter: u32 r, f32 scale,
//! r·d f32 W_down, d·r f32 W_up.
//!
//! Parameters are stored as f32, so a round trip is exact only to f32.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::model::{CosineClassifier, FeatureAdapter, Model};
use crate::error::{Error, FormatError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PLLM";

fn put_u32(out: &mut Vec<u8>, v: usize) -> std::result::Result<(), FormatError> {
    let v =
        u32::try_from(v).map_err(|_| FormatError::Invalid(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_model(model: &Model) -> std::result::Result<Vec<u8>, FormatError> {
    let clf = &model.classifier;
    let mut out = Vec::with_capacity(17 + 4 * clf.weights.len());
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, clf.k())?;
    put_u32(&mut out, clf.d())?;
    out.push(u8::from(model.adapter.is_some()));
    out.extend_from_slice(&(clf.sigma as f32).to_le_bytes());
    put_matrix(&mut out, &clf.weights);
    if let Some(a) = &model.adapter {
        put_u32(&mut out, a.rank())?;
        out.extend_from_slice(&(a.scale as f32).to_le_bytes());
        put_matrix(&mut out, &a.down);
        put_matrix(&mut out, &a.up);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, in_header: bool) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            let (expected, actual) = (self.pos + n, self.bytes.len());
            return Err(if in_header {
                FormatError::TruncatedHeader { expected, actual }
            } else {
                FormatError::TruncatedPayload { expected, actual }
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, in_header: bool) -> std::result::Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, in_header)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self, in_header: bool) -> std::result::Result<f64, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, in_header)?.try_into().unwrap()) as f64)
    }

    fn matrix(
        &mut self,
        rows: usize,
        cols: usize,
    ) -> std::result::Result<Array2<f64>, FormatError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Invalid("matrix too large".into()))?;
        let raw = self.take(n, false)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    }
}

pub fn decode_model(bytes: &[u8]) -> std::result::Result<Model, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, true)?;
    if magic != MODEL_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let k = cur.u32(true)?;
    let d = cur.u32(true)?;
    let has_adapter = match cur.take(1, true)?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(FormatError::Invalid(format!(
                "has_adapter byte must be 0 or 1, got {other}"
            )))
        }
    };
    let sigma = cur.f32(true)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(FormatError::Invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let weights = cur.matrix(k, d)?;
    let adapter = if has_adapter {
        let r = cur.u32(false)?;
        let scale = cur.f32(false)?;
        let down = cur.matrix(r, d)?;
        let up = cur.matrix(d, r)?;
        Some(FeatureAdapter { down, up, scale })
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            expected: cur.pos,
            actual: bytes.len(),
        });
    }
    Ok(Model {
        classifier: CosineClassifier { weights, sigma },
        adapter,
    })
}

pub fn write_model_file(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

//! Dense f64 matrices embedded in JSON as base64 little-endian bytes.
//!
//! Shared by the vocabulary and embedding files so both use one layout:
//! row-major, `rows * cols` values, dtype `f64le`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixBlob {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub order: String,
    pub data: String,
}

impl MatrixBlob {
    pub fn encode(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            dtype: DTYPE.into(),
            order: "row-major".into(),
            data: STANDARD.encode(f64s_to_bytes(values)),
        })
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        if self.dtype != DTYPE {
            return Err(Error::Serialization(format!("unsupported dtype {:?}", self.dtype)));
        }
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Serialization(format!("base64: {e}")))?;
        let values = bytes_to_f64s(&bytes)?;
        if values.len() != self.rows * self.cols {
            return Err(Error::Dimension {
                expected: self.rows * self.cols,
                actual: values.len(),
            });
        }
        Ok(values)
    }
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Serialization(format!(
            "byte length {} not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_checked() {
        assert!(MatrixBlob::encode(2, 2, &[1.0]).is_err());
        let mut blob = MatrixBlob::encode(1, 2, &[1.0, 2.0]).unwrap();
        blob.rows = 2;
        assert!(blob.decode().is_err());
    }

    proptest! {
        #[test]
        fn bit_exact(values in prop::collection::vec(any::<f64>(), 0..64)) {
            let blob = MatrixBlob::encode(1, values.len(), &values).unwrap();
            let json = serde_json::to_string(&blob).unwrap();
            let back: MatrixBlob = serde_json::from_str(&json).unwrap();
            let decoded = back.decode().unwrap();
            prop_assert_eq!(
                decoded.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

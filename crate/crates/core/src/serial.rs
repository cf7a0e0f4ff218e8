//! Shared pieces of the on-disk formats.
//!
//! Parameter blocks are stored as base64 of little-endian `f64` bytes so that a
//! save/load cycle is bit-exact. Documents themselves are JSON.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub fn encode_f64s(values: impl IntoIterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::CorruptFile(format!("bad base64 block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::CorruptFile(format!("parameter block of {} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

/// A matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl MatrixBlock {
    pub fn from_matrix(m: &Matrix) -> Self {
        let (rows, cols) = m.shape();
        let data = encode_f64s((0..rows).flat_map(|i| (0..cols).map(move |j| m[(i, j)])));
        Self { rows, cols, data }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let values = decode_f64s(&self.data)?;
        if values.len() != self.rows * self.cols {
            return Err(Error::CorruptFile(format!(
                "matrix block declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                values.len()
            )));
        }
        Ok(Matrix::from_row_slice(self.rows, self.cols, &values))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorBlock {
    pub len: usize,
    pub data: String,
}

impl VectorBlock {
    pub fn from_vector(v: &Vector) -> Self {
        Self { len: v.len(), data: encode_f64s(v.iter().copied()) }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { len: v.len(), data: encode_f64s(v.iter().copied()) }
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        let values = decode_f64s(&self.data)?;
        if values.len() != self.len {
            return Err(Error::CorruptFile(format!(
                "vector block declares {} values but holds {}",
                self.len,
                values.len()
            )));
        }
        Ok(values)
    }

    pub fn to_vector(&self) -> Result<Vector> {
        Ok(Vector::from_vec(self.to_vec()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn check_version(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::VersionMismatch { found, expected });
    }
    Ok(())
}

pub fn check_format(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::CorruptFile(format!("expected a '{expected}' document, found '{found}'")));
    }
    Ok(())
}

pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::CorruptFile(format!("malformed document: {e}")))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("documents are always serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_blocks_round_trip_bitwise(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let back = decode_f64s(&encode_f64s(values.iter().copied())).unwrap();
            prop_assert_eq!(values.len(), back.len());
            for (a, b) in values.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn matrix_block_is_row_major() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let block = MatrixBlock::from_matrix(&m);
        assert_eq!(decode_f64s(&block.data).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(block.to_matrix().unwrap(), m);
    }

    #[test]
    fn truncated_block_is_corrupt() {
        let mut block = MatrixBlock::from_matrix(&Matrix::identity(2, 2));
        block.rows = 3;
        assert!(matches!(block.to_matrix(), Err(Error::CorruptFile(_))));
        assert!(decode_f64s("AAAA").is_err());
    }
}

//! `TPF1` frame-embedding files.
//!
//! Layout: magic `TPF1`, `u32` LE frame count F, `u32` LE dimension D, then
//! F·D little-endian `f64` values in frame-major order.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPF1";
const HEADER_LEN: usize = 12;

pub fn encode(frames: &Tensor) -> Vec<u8> {
    let (f, d) = (frames.rows(), frames.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * f * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if f == 0 || d == 0 {
        return Err(fail(format!("empty matrix {f}x{d}")));
    }
    let expected = f
        .checked_mul(d)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fail("size overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload is {} bytes, expected {expected} for {f}x{d}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(f, d, data)
}

pub fn save_features(path: &Path, frames: &Tensor) -> Result<()> {
    if frames.rows() == 0 || frames.cols() == 0 {
        return Err(Error::contract("refusing to write an empty feature matrix"));
    }
    fs::write(path, encode(frames)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a file and checks its width against the dataset dimension.
pub fn load_features_with_dim(path: &Path, dim: usize) -> Result<Tensor> {
    let frames = load_features(path)?;
    if frames.cols() != dim {
        return Err(Error::contract(format!(
            "{} has D={}, manifest says {dim}",
            path.display(),
            frames.cols()
        )));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(2, 1, vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TPF1");
        assert_eq!(&b[4..12], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[12..20], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 12 + 16);
    }

    #[test]
    fn zero_frames_is_a_format_error() {
        let mut b = b"TPF1".to_vec();
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&16u32.to_le_bytes());
        assert!(matches!(decode(&b, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let t = Tensor::matrix(3, 4, vec![0.25; 12]).unwrap();
        let b = encode(&t);
        assert!(matches!(decode(&b[..b.len() - 1], p()), Err(Error::Format { .. })));
        assert!(matches!(decode(&b[..7], p()), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let t = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let mut b = encode(&t);
        b[3] = b'2';
        assert!(matches!(decode(&b, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tpf");
        save_features(&path, &Tensor::matrix(2, 3, vec![1.0; 6]).unwrap()).unwrap();
        assert!(matches!(load_features_with_dim(&path, 4), Err(Error::Contract(_))));
        assert_eq!(load_features_with_dim(&path, 3).unwrap().cols(), 3);
    }

    #[test]
    fn random_7x16_file_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::matrix(7, 16, (0..112).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tpf");
        save_features(&path, &t).unwrap();
        let back = load_features(&path).unwrap();
        assert!(t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.shape(), &[7, 16]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_bitwise(f in 1usize..6, d in 1usize..6, bits in proptest::collection::vec(any::<u64>(), 36)) {
            let data: Vec<f64> = bits.iter().take(f * d).map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::matrix(f, d, data).unwrap();
            let back = decode(&encode(&t), p()).unwrap();
            prop_assert!(t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

//! Packed 12-bit decoding and widening of raw tiles to `f32`.
//!
//! Packed layout: each pixel pair `(a, b)` occupies three bytes,
//! `byte0 = a[7:0]`, `byte1 = a[11:8] | b[3:0] << 4`, `byte2 = b[11:4]`.
//!
//! The inner loops are plain `chunks_exact` zips with no bounds checks in the
//! body, which is the shape LLVM reliably auto-vectorizes.

use thiserror::Error;

use crate::dataset::Dtype;

/// Largest value representable in 12 bits.
pub const UINT12_MAX: u16 = 0x0FFF;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("misaligned packed buffer: {0} bytes is not a multiple of 3")]
    MisalignedPacked(usize),
    #[error("value exceeds 12 bits: {value} at index {index}")]
    ValueTooLarge { index: usize, value: u16 },
    #[error("odd value count {0}: uint12 packing needs pixel pairs")]
    OddCount(usize),
    #[error("misaligned tile: {len} bytes is not a whole number of {dtype} elements")]
    MisalignedTile { len: usize, dtype: Dtype },
    #[error("output buffer holds {actual} values, {expected} required")]
    OutputLength { expected: usize, actual: usize },
}

/// Decoded length of a packed buffer.
pub fn uint12_decoded_len(packed_len: usize) -> Result<usize, CodecError> {
    if packed_len % 3 != 0 {
        return Err(CodecError::MisalignedPacked(packed_len));
    }
    Ok(packed_len / 3 * 2)
}

/// Decodes packed 12-bit pixels into `out`, which must hold exactly
/// `2 * inp.len() / 3` values.
pub fn decode_uint12_le_into(inp: &[u8], out: &mut [u16]) -> Result<(), CodecError> {
    let n = uint12_decoded_len(inp.len())?;
    if out.len() != n {
        return Err(CodecError::OutputLength {
            expected: n,
            actual: out.len(),
        });
    }
    for (src, dst) in inp.chunks_exact(3).zip(out.chunks_exact_mut(2)) {
        let fst = src[0] as u16;
        let mid = src[1] as u16;
        let lst = src[2] as u16;
        dst[0] = fst | (mid & 0x0F) << 8;
        dst[1] = (mid & 0xF0) >> 4 | lst << 4;
    }
    Ok(())
}

pub fn decode_uint12_le(inp: &[u8]) -> Result<Vec<u16>, CodecError> {
    let mut out = vec![0u16; uint12_decoded_len(inp.len())?];
    decode_uint12_le_into(inp, &mut out)?;
    Ok(out)
}

/// Decode fused with the widening step, writing `f32` directly into the
/// tile buffer.
pub fn decode_uint12_le_to_f32(inp: &[u8], out: &mut [f32]) -> Result<(), CodecError> {
    let n = uint12_decoded_len(inp.len())?;
    if out.len() != n {
        return Err(CodecError::OutputLength {
            expected: n,
            actual: out.len(),
        });
    }
    for (src, dst) in inp.chunks_exact(3).zip(out.chunks_exact_mut(2)) {
        let fst = src[0] as u16;
        let mid = src[1] as u16;
        let lst = src[2] as u16;
        dst[0] = (fst | (mid & 0x0F) << 8) as f32;
        dst[1] = ((mid & 0xF0) >> 4 | lst << 4) as f32;
    }
    Ok(())
}

/// Exact bit-inverse of [`decode_uint12_le`].
pub fn encode_uint12_le(values: &[u16]) -> Result<Vec<u8>, CodecError> {
    if values.len() % 2 != 0 {
        return Err(CodecError::OddCount(values.len()));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v > UINT12_MAX) {
        return Err(CodecError::ValueTooLarge { index, value });
    }
    let mut out = vec![0u8; values.len() / 2 * 3];
    for (pair, dst) in values.chunks_exact(2).zip(out.chunks_exact_mut(3)) {
        let (a, b) = (pair[0], pair[1]);
        dst[0] = (a & 0xFF) as u8;
        dst[1] = ((a >> 8) & 0x0F) as u8 | ((b & 0x0F) << 4) as u8;
        dst[2] = (b >> 4) as u8;
    }
    Ok(out)
}

/// Element count encoded by `len` bytes of `dtype`.
pub fn element_count(len: usize, dtype: Dtype) -> Result<usize, CodecError> {
    let misaligned = || CodecError::MisalignedTile { len, dtype };
    match dtype {
        Dtype::Uint12PackedLe => {
            if len % 3 != 0 {
                return Err(misaligned());
            }
            Ok(len / 3 * 2)
        }
        _ => {
            let q = dtype.byte_quantum() as usize;
            if len % q != 0 {
                return Err(misaligned());
            }
            Ok(len / q)
        }
    }
}

/// Widens raw little-endian elements to `f32`. Integer inputs convert
/// exactly (all values are below 2^24); `float32_le` is copied bit for bit.
pub fn convert_to_f32(bytes: &[u8], dtype: Dtype, out: &mut [f32]) -> Result<(), CodecError> {
    let n = element_count(bytes.len(), dtype)?;
    if out.len() != n {
        return Err(CodecError::OutputLength {
            expected: n,
            actual: out.len(),
        });
    }
    match dtype {
        Dtype::Float32Le => {
            for (src, dst) in bytes.chunks_exact(4).zip(out.iter_mut()) {
                *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
            }
        }
        Dtype::Uint16Le => {
            for (src, dst) in bytes.chunks_exact(2).zip(out.iter_mut()) {
                *dst = u16::from_le_bytes([src[0], src[1]]) as f32;
            }
        }
        Dtype::Uint12PackedLe => decode_uint12_le_to_f32(bytes, out)?,
        Dtype::Float64Le => {
            for (src, dst) in bytes.chunks_exact(8).zip(out.iter_mut()) {
                *dst = f64::from_le_bytes(src.try_into().unwrap()) as f32;
            }
        }
    }
    Ok(())
}

pub fn convert_to_f32_vec(bytes: &[u8], dtype: Dtype) -> Result<Vec<f32>, CodecError> {
    let mut out = vec![0f32; element_count(bytes.len(), dtype)?];
    convert_to_f32(bytes, dtype, &mut out)?;
    Ok(out)
}

/// Widens already-decoded 12-bit (or 16-bit) values.
pub fn widen_u16(values: &[u16], out: &mut [f32]) -> Result<(), CodecError> {
    if out.len() != values.len() {
        return Err(CodecError::OutputLength {
            expected: values.len(),
            actual: out.len(),
        });
    }
    for (v, o) in values.iter().zip(out.iter_mut()) {
        *o = *v as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Bit-by-bit reference: walks the 24 bits of each group LSB first and
    /// assigns bit k to pixel (k / 12), bit position (k % 12).
    fn reference_decode(bytes: &[u8]) -> Vec<u16> {
        let mut out = Vec::new();
        for group in bytes.chunks(3) {
            let mut pair = [0u16; 2];
            for k in 0..24 {
                let bit = (group[k / 8] >> (k % 8)) & 1;
                pair[k / 12] |= (bit as u16) << (k % 12);
            }
            out.extend_from_slice(&pair);
        }
        out
    }

    #[test]
    fn spot_values() {
        assert_eq!(decode_uint12_le(&[0, 0, 0]).unwrap(), vec![0, 0]);
        assert_eq!(decode_uint12_le(&[0xFF, 0xFF, 0xFF]).unwrap(), vec![4095, 4095]);
        assert_eq!(decode_uint12_le(&[0xAB, 0xCD, 0xEF]).unwrap(), vec![3499, 3836]);
        assert_eq!(reference_decode(&[0xAB, 0xCD, 0xEF]), vec![0x0DAB, 0xEFC]);
        assert_eq!(encode_uint12_le(&[0, 0]).unwrap(), vec![0, 0, 0]);
        assert_eq!(encode_uint12_le(&[4095, 4095]).unwrap(), vec![0xFF; 3]);
    }

    #[test]
    fn errors() {
        assert_eq!(
            decode_uint12_le(&[1, 2, 3, 4]).unwrap_err().to_string(),
            "misaligned packed buffer: 4 bytes is not a multiple of 3"
        );
        assert_eq!(
            encode_uint12_le(&[1, 4096]).unwrap_err(),
            CodecError::ValueTooLarge { index: 1, value: 4096 }
        );
        assert!(encode_uint12_le(&[1]).unwrap_err().to_string().starts_with("odd value count"));
        assert!(matches!(
            convert_to_f32_vec(&[0, 0, 0], Dtype::Uint16Le),
            Err(CodecError::MisalignedTile { .. })
        ));
        assert!(convert_to_f32_vec(&[0; 5], Dtype::Float32Le)
            .unwrap_err()
            .to_string()
            .starts_with("misaligned tile"));
    }

    #[test]
    fn exhaustive_both_lanes() {
        for v in 0..=UINT12_MAX {
            for (a, b) in [(v, 0x5A5), (0xA5A, v)] {
                let packed = encode_uint12_le(&[a, b]).unwrap();
                assert_eq!(decode_uint12_le(&packed).unwrap(), vec![a, b]);
                assert_eq!(reference_decode(&packed), vec![a, b]);
            }
        }
    }

    #[test]
    fn random_triples_match_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let bytes: Vec<u8> = (0..3 * 100_000).map(|_| rng.gen()).collect();
        let fast = decode_uint12_le(&bytes).unwrap();
        assert_eq!(fast, reference_decode(&bytes));
        assert!(fast.iter().all(|&v| v <= UINT12_MAX));
        let mut f = vec![0f32; fast.len()];
        decode_uint12_le_to_f32(&bytes, &mut f).unwrap();
        assert!(fast.iter().zip(&f).all(|(&a, &b)| a as f32 == b));
    }

    #[test]
    fn widening_is_exact() {
        let bytes: Vec<u8> = [0u16, 65535].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(convert_to_f32_vec(&bytes, Dtype::Uint16Le).unwrap(), vec![0.0, 65535.0]);
        assert_eq!(convert_to_f32_vec(&1.5f32.to_le_bytes(), Dtype::Float32Le).unwrap(), vec![1.5]);
        let mut out = [0f32; 1];
        widen_u16(&[3499], &mut out).unwrap();
        assert_eq!(out, [3499.0]);
        let packed = encode_uint12_le(&[3499, 7]).unwrap();
        assert_eq!(convert_to_f32_vec(&packed, Dtype::Uint12PackedLe).unwrap(), vec![3499.0, 7.0]);
    }
}

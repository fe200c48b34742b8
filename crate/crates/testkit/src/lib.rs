//! Fixtures and naive reference implementations for the test suites.
//!
//! The reference code here deliberately avoids the engine's decoder, mask
//! builders and kernels: values are decoded bit by bit, masks are evaluated
//! per pixel centre, and every result is a plain double loop in `f64`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use virt4d_core::dataset::{write_raw_dataset, Dataset, Dtype, SourceLayout};
use virt4d_core::kernels::{make_random_mask, AnalysisSpec, DiskRoi, MaskShape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bit-by-bit uint12 decode: each 3-byte group is a 24-bit little-endian
/// bit stream, the first value in bits 0..12, the second in bits 12..24.
pub fn ref_decode_uint12(bytes: &[u8]) -> Vec<u16> {
    assert_eq!(bytes.len() % 3, 0, "packed buffer length");
    let mut out = Vec::with_capacity(bytes.len() / 3 * 2);
    for g in bytes.chunks(3) {
        let bit = |i: usize| -> u16 { ((g[i / 8] >> (i % 8)) & 1) as u16 };
        for lane in 0..2 {
            let mut v = 0u16;
            for k in 0..12 {
                v |= bit(lane * 12 + k) << k;
            }
            out.push(v);
        }
    }
    out
}

/// Inverse of [`ref_decode_uint12`], also bit by bit.
pub fn ref_encode_uint12(values: &[u16]) -> Vec<u8> {
    assert_eq!(values.len() % 2, 0, "even value count");
    let mut out = vec![0u8; values.len() / 2 * 3];
    for (pair, g) in values.chunks(2).zip(out.chunks_mut(3)) {
        for (lane, &v) in pair.iter().enumerate() {
            assert!(v < 4096);
            for k in 0..12 {
                let i = lane * 12 + k;
                g[i / 8] |= (((v >> k) & 1) as u8) << (i % 8);
            }
        }
    }
    out
}

pub fn ref_decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::Float32Le => bytes
            .chunks(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::Uint16Le => bytes.chunks(2).map(|c| (c[0] as u16 | (c[1] as u16) << 8) as f64).collect(),
        Dtype::Uint12PackedLe => ref_decode_uint12(bytes).into_iter().map(f64::from).collect(),
        Dtype::Float64Le => bytes
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

pub fn encode_values(values: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::Float32Le => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Dtype::Uint16Le => values.iter().flat_map(|&v| (v as u16).to_le_bytes()).collect(),
        Dtype::Uint12PackedLe => {
            ref_encode_uint12(&values.iter().map(|&v| v as u16).collect::<Vec<_>>())
        }
        Dtype::Float64Le => values.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    }
}

/// Values exactly representable in `dtype`.
pub fn random_values(rng: &mut impl Rng, dtype: Dtype, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match dtype {
            Dtype::Float32Le => rng.gen_range(-1000.0f32..1000.0) as f64,
            Dtype::Uint16Le => rng.gen_range(0..=u16::MAX) as f64,
            Dtype::Uint12PackedLe => rng.gen_range(0..4096u16) as f64,
            Dtype::Float64Le => rng.gen_range(-1000.0..1000.0),
        })
        .collect()
}

/// A dataset on disk plus its frames as the oracle sees them.
pub struct Fixture {
    pub dataset: Dataset,
    pub frames: Vec<Vec<f64>>,
    pub raw: Vec<u8>,
}

impl Fixture {
    pub fn scan_shape(&self) -> &[usize] {
        &self.dataset.descriptor.scan_shape
    }

    pub fn sig_shape(&self) -> &[usize] {
        &self.dataset.descriptor.sig_shape
    }
}

/// Writes frames given as values and partitions them by `target_bytes`.
pub fn write_frames(
    dir: &Path,
    dtype: Dtype,
    scan_shape: &[usize],
    sig_shape: &[usize],
    frames: Vec<Vec<f64>>,
    target_bytes: u64,
) -> Fixture {
    let raw: Vec<u8> = frames.iter().flat_map(|f| encode_values(f, dtype)).collect();
    let layout = SourceLayout {
        dtype,
        scan_shape: scan_shape.to_vec(),
        sig_shape: sig_shape.to_vec(),
    };
    let dataset = write_raw_dataset(dir, &layout, &raw, target_bytes).expect("fixture writes");
    Fixture { dataset, frames, raw }
}

/// Random frames; `partitions` is the number of frames per partition.
pub fn random_fixture(
    dir: &Path,
    rng: &mut impl Rng,
    dtype: Dtype,
    scan_shape: &[usize],
    sig_shape: &[usize],
    frames_per_partition: u64,
) -> Fixture {
    let n: usize = scan_shape.iter().product();
    let pixels: usize = sig_shape.iter().product();
    let frames = (0..n).map(|_| random_values(rng, dtype, pixels)).collect();
    let bpf = dtype.encoded_len(pixels as u64).expect("even pixel count");
    write_frames(dir, dtype, scan_shape, sig_shape, frames, bpf * frames_per_partition)
}

fn plane(sig: &[usize]) -> (usize, usize) {
    match sig {
        [w] => (1, *w),
        [h, rest @ ..] => (*h, rest.iter().product()),
        [] => (0, 0),
    }
}

fn per_pixel(sig: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (h, w) = plane(sig);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(f(x as f64, y as f64));
        }
    }
    out
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_disk(sig: &[usize], cx: f64, cy: f64, r: f64) -> Vec<f64> {
    per_pixel(sig, |x, y| indicator((x - cx).powi(2) + (y - cy).powi(2) <= r * r))
}

pub fn oracle_ring(sig: &[usize], cx: f64, cy: f64, ri: f64, ro: f64) -> Vec<f64> {
    per_pixel(sig, |x, y| {
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        indicator((d2 > ri * ri || ri == 0.0) && d2 <= ro * ro)
    })
}

pub fn oracle_mask(shape: &MaskShape, sig: &[usize]) -> Vec<f64> {
    match *shape {
        MaskShape::Disk { cx, cy, r } => oracle_disk(sig, cx, cy, r),
        MaskShape::Ring { cx, cy, r_inner, r_outer } => oracle_ring(sig, cx, cy, r_inner, r_outer),
        MaskShape::Point { x, y } => per_pixel(sig, |px, py| indicator(px as i64 == x && py as i64 == y)),
        // the generator stream is an input here, not something to re-derive
        MaskShape::Random { seed } => make_random_mask(sig, seed).into_iter().map(f64::from).collect(),
        MaskShape::Ones => per_pixel(sig, |_, _| 1.0),
    }
}

/// Expected result: `frames x channels` values, or one detector image.
#[derive(Debug, Clone, PartialEq)]
pub enum Expected {
    PerFrame { channels: usize, values: Vec<f64> },
    Image(Vec<f64>),
}

impl Expected {
    pub fn values(&self) -> &[f64] {
        match self {
            Expected::PerFrame { values, .. } | Expected::Image(values) => values,
        }
    }
}

fn dot(frame: &[f64], mask: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in 0..frame.len() {
        s += frame[p] * mask[p];
    }
    s
}

pub fn oracle(spec: &AnalysisSpec, scan_shape: &[usize], sig: &[usize], frames: &[Vec<f64>]) -> Expected {
    let per_frame = |masks: Vec<Vec<f64>>| {
        let mut values = Vec::new();
        for f in frames {
            for m in &masks {
                values.push(dot(f, m));
            }
        }
        Expected::PerFrame {
            channels: masks.len(),
            values,
        }
    };
    match spec {
        AnalysisSpec::MaskApply { masks } => per_frame(masks.iter().map(|m| oracle_mask(m, sig)).collect()),
        AnalysisSpec::SumFrames => {
            let mut img = vec![0.0; frames.first().map_or(0, Vec::len)];
            for f in frames {
                for (a, v) in img.iter_mut().zip(f) {
                    *a += v;
                }
            }
            Expected::Image(img)
        }
        AnalysisSpec::PickFrame { position } => {
            let mut flat = 0;
            for (p, n) in position.iter().zip(scan_shape) {
                flat = flat * n + p;
            }
            Expected::Image(frames[flat].clone())
        }
        AnalysisSpec::CenterOfMass { roi } => {
            let roi = match roi {
                Some(DiskRoi { cx, cy, r }) => oracle_disk(sig, *cx, *cy, *r),
                None => per_pixel(sig, |_, _| 1.0),
            };
            let ones = roi.clone();
            let xs = per_pixel(sig, |x, _| x).iter().zip(&roi).map(|(a, b)| a * b).collect();
            let ys = per_pixel(sig, |_, y| y).iter().zip(&roi).map(|(a, b)| a * b).collect();
            per_frame(vec![ones, xs, ys])
        }
    }
}

/// Normwise relative error: `max |a - e| / max |e|`. Positions where both
/// are NaN count as equal; a length mismatch is infinite error.
pub fn max_rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    if actual.len() != expected.len() {
        return f64::INFINITY;
    }
    let scale = expected
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| {
            if a.is_nan() && e.is_nan() {
                0.0
            } else {
                let d = (a - e).abs();
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    d / scale
                }
            }
        })
        .fold(0.0, f64::max)
}

/// One spec per analysis variant, with geometry drawn at random (and
/// sometimes outside the frame).
pub fn all_variants(rng: &mut impl Rng, scan_shape: &[usize], sig: &[usize]) -> Vec<AnalysisSpec> {
    let (h, w) = plane(sig);
    let c = |rng: &mut dyn rand::RngCore, n: usize| rng.gen_range(-2.0..n as f64 + 2.0);
    let cx = c(rng, w);
    let cy = c(rng, h);
    let ri = rng.gen_range(0.0..4.0);
    let ro = ri + rng.gen_range(0.0..6.0);
    let position = scan_shape.iter().map(|&n| rng.gen_range(0..n)).collect();
    vec![
        AnalysisSpec::MaskApply {
            masks: vec![
                MaskShape::Disk { cx, cy, r: ro },
                MaskShape::Ring { cx, cy, r_inner: ri, r_outer: ro },
                MaskShape::Ring { cx, cy, r_inner: 0.0, r_outer: ro },
                MaskShape::Point {
                    x: rng.gen_range(0..w as i64),
                    y: rng.gen_range(0..h as i64),
                },
                MaskShape::Random { seed: rng.gen() },
                MaskShape::Ones,
            ],
        },
        AnalysisSpec::SumFrames,
        AnalysisSpec::PickFrame { position },
        AnalysisSpec::CenterOfMass { roi: None },
        AnalysisSpec::CenterOfMass {
            roi: Some(DiskRoi { cx, cy, r: ro }),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_codec_matches_hand_values() {
        assert_eq!(ref_decode_uint12(&[0xAB, 0xCD, 0xEF]), vec![3499, 3836]);
        assert_eq!(ref_encode_uint12(&[4095, 4095]), vec![0xFF; 3]);
        assert_eq!(ref_decode_uint12(&ref_encode_uint12(&[1, 2048])), vec![1, 2048]);
    }

    #[test]
    fn oracle_masks_hand_counts() {
        let n = |m: Vec<f64>| m.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(n(oracle_disk(&[4, 4], 1.5, 1.5, 1.6)), 12);
        assert_eq!(n(oracle_ring(&[8, 8], 3.5, 3.5, 1.0, 3.0)), 28);
    }

    #[test]
    fn rel_err() {
        assert_eq!(max_rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(max_rel_err(&[1.0, f64::NAN], &[1.0, f64::NAN]), 0.0);
        assert!((max_rel_err(&[1.0, 2.2], &[1.0, 2.0]) - 0.1).abs() < 1e-12);
        assert_eq!(max_rel_err(&[1.0], &[1.0, 2.0]), f64::INFINITY);
    }
}

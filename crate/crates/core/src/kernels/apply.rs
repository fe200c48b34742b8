//! Tile kernels: frame-stack x mask-stack products and frame sums.
//!
//! Products are taken in `f32`, sums in `f64`. Each detector row is reduced
//! with a fixed lane pattern (lane = column mod 8) and row sums are added to
//! the accumulator in row order. Tiles never split a row, so the result is
//! bit-identical for any partition plan or tile size.

use super::{KernelError, MaskStack};
use crate::io::Tile;

const LANES: usize = 8;

/// Per-partition `frames x channels` accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAccumulator {
    pub frame_start: u64,
    pub frame_count: u64,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FrameAccumulator {
    pub fn new(frame_start: u64, frame_count: u64, channels: usize) -> Self {
        FrameAccumulator {
            frame_start,
            frame_count,
            channels,
            values: vec![0.0; frame_count as usize * channels],
        }
    }

    pub fn frame(&self, f: u64) -> &[f64] {
        let i = (f - self.frame_start) as usize * self.channels;
        &self.values[i..i + self.channels]
    }
}

#[inline]
fn dot_row(x: &[f32], m: &[f32]) -> f64 {
    let mut lanes = [0f64; LANES];
    let xs = x.chunks_exact(LANES);
    let ms = m.chunks_exact(LANES);
    let (xt, mt) = (xs.remainder(), ms.remainder());
    for (a, b) in xs.zip(ms) {
        for i in 0..LANES {
            lanes[i] += (a[i] * b[i]) as f64;
        }
    }
    for i in 0..xt.len() {
        lanes[i] += (xt[i] * mt[i]) as f64;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// `out[f * K + k] += sum_p data[f][p] * mask[k][pixel_offset + p]` for a
/// block of `frames` frames of `row_count` rows each.
pub fn apply_masks_block(
    data: &[f32],
    frames: usize,
    row_pixels: usize,
    row_start: usize,
    row_count: usize,
    stack: &MaskStack,
    out: &mut [f64],
) -> Result<(), KernelError> {
    let k = stack.channels();
    let per_frame = row_count * row_pixels;
    let offset = row_start * row_pixels;
    if data.len() != frames * per_frame {
        return Err(KernelError::ShapeMismatch(format!(
            "tile holds {} values, expected {frames} x {per_frame}",
            data.len()
        )));
    }
    if offset + per_frame > stack.pixels() {
        return Err(KernelError::ShapeMismatch(format!(
            "tile pixels {offset}..{} exceed mask size {}",
            offset + per_frame,
            stack.pixels()
        )));
    }
    if out.len() != frames * k {
        return Err(KernelError::ShapeMismatch(format!(
            "accumulator holds {} values, expected {frames} x {k}",
            out.len()
        )));
    }
    if per_frame == 0 {
        return Ok(());
    }
    for (frame, acc) in data.chunks_exact(per_frame).zip(out.chunks_exact_mut(k)) {
        for (c, slot) in acc.iter_mut().enumerate() {
            let mask = &stack.mask(c)[offset..offset + per_frame];
            for (xr, mr) in frame.chunks_exact(row_pixels).zip(mask.chunks_exact(row_pixels)) {
                *slot += dot_row(xr, mr);
            }
        }
    }
    Ok(())
}

/// Multiplies one tile with the mask stack, adding into the partition
/// accumulator. Row-slab tiles use the matching rows of each mask.
pub fn apply_masks(
    tile: &Tile<'_>,
    stack: &MaskStack,
    acc: &mut FrameAccumulator,
) -> Result<(), KernelError> {
    let span = tile.span;
    if acc.channels != stack.channels() {
        return Err(KernelError::ShapeMismatch(format!(
            "accumulator has {} channels, stack has {}",
            acc.channels,
            stack.channels()
        )));
    }
    if span.frame_start < acc.frame_start
        || span.frame_start + span.frame_count > acc.frame_start + acc.frame_count
    {
        return Err(KernelError::ShapeMismatch(format!(
            "tile frames {}..{} outside accumulator {}..{}",
            span.frame_start,
            span.frame_start + span.frame_count,
            acc.frame_start,
            acc.frame_start + acc.frame_count
        )));
    }
    let first = (span.frame_start - acc.frame_start) as usize * acc.channels;
    let len = span.frame_count as usize * acc.channels;
    apply_masks_block(
        tile.data,
        span.frame_count as usize,
        tile.row_pixels,
        span.row_start,
        span.row_count,
        stack,
        &mut acc.values[first..first + len],
    )
}

/// Adds every frame of the tile into a detector-shaped `f64` image.
pub fn sum_frames_tile(tile: &Tile<'_>, image: &mut [f64]) -> Result<(), KernelError> {
    let offset = tile.pixel_offset();
    let per_frame = tile.pixels_per_frame();
    if offset + per_frame > image.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "tile pixels {offset}..{} exceed detector size {}",
            offset + per_frame,
            image.len()
        )));
    }
    let dst = &mut image[offset..offset + per_frame];
    for frame in tile.frames() {
        for (d, &x) in dst.iter_mut().zip(frame) {
            *d += x as f64;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_com_masks, make_point_mask};

    /// Naive per-frame double loop in f64.
    fn oracle(frames: &[Vec<f32>], stack: &MaskStack) -> Vec<f64> {
        let mut out = Vec::new();
        for f in frames {
            for k in 0..stack.channels() {
                let mut s = 0f64;
                for (p, &x) in f.iter().enumerate() {
                    s += x as f64 * stack.mask(k)[p] as f64;
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn two_frame_example() {
        let frames = vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0, 0.0, 0.0]];
        let com = make_com_masks(&[2, 2]);
        let stack = MaskStack::new(
            vec![2, 2],
            vec![com.mask(0).to_vec(), com.mask(1).to_vec()],
            vec!["ones".into(), "x".into()],
        )
        .unwrap();
        let data: Vec<f32> = frames.concat();
        let mut out = vec![0f64; 4];
        apply_masks_block(&data, 2, 2, 0, 2, &stack, &mut out).unwrap();
        assert_eq!(out, oracle(&frames, &stack));
        assert_eq!(out, vec![10.0, 6.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_and_selection_identities() {
        let frame: Vec<f32> = (0..30).map(|i| i as f32 * 0.5).collect();
        let ones = MaskStack::single(vec![5, 6], vec![1.0; 30], "ones").unwrap();
        let mut out = [0f64];
        apply_masks_block(&frame, 1, 6, 0, 5, &ones, &mut out).unwrap();
        assert_eq!(out[0], frame.iter().map(|&v| v as f64).sum::<f64>());
        let point = MaskStack::single(vec![5, 6], make_point_mask(&[5, 6], 4, 3), "p").unwrap();
        let mut out = [0f64];
        apply_masks_block(&frame, 1, 6, 0, 5, &point, &mut out).unwrap();
        assert_eq!(out[0], frame[3 * 6 + 4] as f64);
    }

    #[test]
    fn row_slabs_are_bit_identical_to_whole_frames() {
        let (h, w) = (9, 21);
        let frame: Vec<f32> = (0..h * w).map(|i| ((i * 37) % 101) as f32 * 1.37).collect();
        let stack = make_com_masks(&[h, w]);
        let mut whole = vec![0f64; 3];
        apply_masks_block(&frame, 1, w, 0, h, &stack, &mut whole).unwrap();
        let mut slabs = vec![0f64; 3];
        for (start, count) in [(0, 2), (2, 4), (6, 3)] {
            let rows = &frame[start * w..(start + count) * w];
            apply_masks_block(rows, 1, w, start, count, &stack, &mut slabs).unwrap();
        }
        assert_eq!(whole, slabs);
    }

    #[test]
    fn shape_errors() {
        let stack = make_com_masks(&[2, 2]);
        let mut out = vec![0f64; 3];
        assert!(apply_masks_block(&[0.0; 3], 1, 2, 0, 2, &stack, &mut out).is_err());
        assert!(apply_masks_block(&[0.0; 4], 1, 2, 1, 2, &stack, &mut out).is_err());
        assert!(apply_masks_block(&[0.0; 4], 1, 2, 0, 2, &stack, &mut out[..2]).is_err());
    }
}

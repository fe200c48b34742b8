use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{GrayImage, Luma};
use virt4d_core::kernels::{ResultGrid, ResultKind};

/// Height and width of the 2D image a channel is drawn as: the last axis is
/// the width, all others fold into the height.
fn image_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&w, rest)) => (rest.iter().product::<usize>().max(1), w),
        None => (1, 1),
    }
}

/// Linear min-max scaling to 8 bits over finite values; non-finite pixels
/// are black.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() || !(span > 0.0) {
                0
            } else {
                ((v - lo) / span * 255.0).round() as u8
            }
        })
        .collect()
}

pub fn write_png(grid: &ResultGrid, channel: usize, path: &Path) -> Result<()> {
    if channel >= grid.channels() {
        bail!("channel {channel} out of range ({} channels)", grid.channels());
    }
    let values = grid.channel(channel);
    let shape = match grid.kind() {
        ResultKind::PerFrame => grid.scan_shape().to_vec(),
        ResultKind::Reduced => grid.shape(),
    };
    let (h, w) = image_dims(&shape);
    let pixels = normalize(&values);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([pixels[y as usize * w + x as usize]]));
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

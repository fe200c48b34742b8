//! Binary and ramp masks over the detector plane.
//!
//! Coordinates: origin at the top-left pixel, `x` is the column and `y` the
//! row, pixel centres sit on integers. Inclusion is decided at the pixel
//! centre with no anti-aliasing; geometry that leaves the frame is simply
//! clipped by that predicate.

use rand::{Rng, SeedableRng};

use super::KernelError;

/// `K` flattened masks over one detector shape, the right-hand operand of
/// the frame-stack x mask-stack product.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    sig_shape: Vec<usize>,
    labels: Vec<String>,
    /// K x N, mask-major.
    data: Vec<f32>,
}

impl MaskStack {
    pub fn new(
        sig_shape: Vec<usize>,
        masks: Vec<Vec<f32>>,
        labels: Vec<String>,
    ) -> Result<Self, KernelError> {
        let n: usize = sig_shape.iter().product();
        if masks.is_empty() {
            return Err(KernelError::Parameter("mask stack needs at least one mask".into()));
        }
        if labels.len() != masks.len() {
            return Err(KernelError::Parameter(format!(
                "{} labels for {} masks",
                labels.len(),
                masks.len()
            )));
        }
        if let Some((i, m)) = masks.iter().enumerate().find(|(_, m)| m.len() != n) {
            return Err(KernelError::ShapeMismatch(format!(
                "mask {i} has {} pixels, detector has {n}",
                m.len()
            )));
        }
        let data: Vec<f32> = masks.into_iter().flatten().collect();
        Ok(MaskStack {
            sig_shape,
            labels,
            data,
        })
    }

    pub fn single(sig_shape: Vec<usize>, mask: Vec<f32>, label: &str) -> Result<Self, KernelError> {
        Self::new(sig_shape, vec![mask], vec![label.to_string()])
    }

    pub fn channels(&self) -> usize {
        self.labels.len()
    }

    pub fn pixels(&self) -> usize {
        self.sig_shape.iter().product()
    }

    pub fn sig_shape(&self) -> &[usize] {
        &self.sig_shape
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mask(&self, k: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[k * n..(k + 1) * n]
    }

    /// Element-wise product of every mask with `roi`.
    pub fn restricted_to(&self, roi: &[f32]) -> Result<Self, KernelError> {
        if roi.len() != self.pixels() {
            return Err(KernelError::ShapeMismatch("ROI does not match detector shape".into()));
        }
        let masks = (0..self.channels())
            .map(|k| self.mask(k).iter().zip(roi).map(|(m, r)| m * r).collect())
            .collect();
        Self::new(self.sig_shape.clone(), masks, self.labels.clone())
    }
}

/// (height, width) of the detector; a 1-D signal is one row.
pub(crate) fn plane(sig_shape: &[usize]) -> (usize, usize) {
    match sig_shape {
        [] => (0, 0),
        [w] => (1, *w),
        [h, rest @ ..] => (*h, rest.iter().product()),
    }
}

fn from_predicate(sig_shape: &[usize], mut inside: impl FnMut(f64, f64) -> bool) -> Vec<f32> {
    let (h, w) = plane(sig_shape);
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if inside(x as f64, y as f64) {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

fn check_finite(values: &[f64]) -> Result<(), KernelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KernelError::Parameter("geometry must be finite".into()))
    }
}

/// 1 where `(x - cx)^2 + (y - cy)^2 <= r^2`.
pub fn make_disk_mask(sig_shape: &[usize], cx: f64, cy: f64, r: f64) -> Result<Vec<f32>, KernelError> {
    check_finite(&[cx, cy, r])?;
    if r < 0.0 {
        return Err(KernelError::Parameter(format!("radius {r} is negative")));
    }
    let r2 = r * r;
    Ok(from_predicate(sig_shape, |x, y| {
        (x - cx).powi(2) + (y - cy).powi(2) <= r2
    }))
}

/// 1 where `r_inner^2 < d^2 <= r_outer^2`. With `r_inner == 0` the centre
/// is included, so `ring(0, r)` equals `disk(r)`.
pub fn make_ring_mask(
    sig_shape: &[usize],
    cx: f64,
    cy: f64,
    r_inner: f64,
    r_outer: f64,
) -> Result<Vec<f32>, KernelError> {
    check_finite(&[cx, cy, r_inner, r_outer])?;
    if r_inner < 0.0 {
        return Err(KernelError::Parameter(format!("inner radius {r_inner} is negative")));
    }
    if r_inner > r_outer {
        return Err(KernelError::Parameter(format!(
            "inner radius {r_inner} exceeds outer radius {r_outer}"
        )));
    }
    if r_inner == 0.0 {
        return make_disk_mask(sig_shape, cx, cy, r_outer);
    }
    let (ri2, ro2) = (r_inner * r_inner, r_outer * r_outer);
    Ok(from_predicate(sig_shape, |x, y| {
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        ri2 < d2 && d2 <= ro2
    }))
}

/// Single pixel at column `x`, row `y`; all-zero when outside the frame.
pub fn make_point_mask(sig_shape: &[usize], x: i64, y: i64) -> Vec<f32> {
    from_predicate(sig_shape, |px, py| px as i64 == x && py as i64 == y)
}

/// Uniform values in `[0, 1)` from a seeded generator.
pub fn make_random_mask(sig_shape: &[usize], seed: u64) -> Vec<f32> {
    let n: usize = sig_shape.iter().product();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f32>()).collect()
}

/// Channels `sum` (all ones), `x` (column index) and `y` (row index).
pub fn make_com_masks(sig_shape: &[usize]) -> MaskStack {
    let (h, w) = plane(sig_shape);
    let ones = vec![1f32; h * w];
    let mut xs = vec![0f32; h * w];
    let mut ys = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            xs[y * w + x] = x as f32;
            ys[y * w + x] = y as f32;
        }
    }
    MaskStack::new(
        sig_shape.to_vec(),
        vec![ones, xs, ys],
        vec!["sum".into(), "x".into(), "y".into()],
    )
    .expect("com masks match their own shape")
}

//! Grayscale morphology on 2-D rasters and the reshape-open-restore
//! background estimator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pattern::Pattern;

/// Default disk radius for background estimation.
pub const DEFAULT_RADIUS: usize = 3;

/// Row-major real raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    /// Value read beyond the border by dilation.
    pub pad_value_low: f64,
    /// Value read beyond the border by erosion.
    pub pad_value_high: f64,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Size("image must have at least one row and column".into()));
        }
        if pixels.len() != rows * cols {
            return Err(Error::Size(format!(
                "{rows}x{cols} image needs {} pixels, got {}",
                rows * cols,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image pixels must be finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            pad_value_low: f64::NEG_INFINITY,
            pad_value_high: f64::INFINITY,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.cols + col] = value;
    }

    /// Pointwise map, keeping geometry and border fills.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    fn read(&self, row: isize, col: isize, outside: f64) -> f64 {
        if row < 0 || col < 0 || row >= self.rows as isize || col >= self.cols as isize {
            outside
        } else {
            self.pixels[row as usize * self.cols + col as usize]
        }
    }
}

/// Neighborhood mask with per-offset heights.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuringElement {
    offsets: Vec<(i32, i32)>,
    values: Vec<f64>,
}

impl StructuringElement {
    /// Validates that the element contains the origin and is closed under
    /// negation of its offsets (with matching heights).
    pub fn new(offsets: Vec<(i32, i32)>, values: Vec<f64>) -> Result<Self> {
        if offsets.len() != values.len() {
            return Err(Error::Size("one height per offset is required".into()));
        }
        if !offsets.contains(&(0, 0)) {
            return Err(Error::Domain("structuring element must contain the origin".into()));
        }
        for (i, &(m, n)) in offsets.iter().enumerate() {
            match offsets.iter().position(|&o| o == (-m, -n)) {
                Some(j) if values[j] == values[i] => {}
                _ => {
                    return Err(Error::Domain(format!(
                        "structuring element is not symmetric at offset ({m}, {n})"
                    )))
                }
            }
        }
        Ok(Self { offsets, values })
    }

    pub fn flat(offsets: Vec<(i32, i32)>) -> Result<Self> {
        let values = vec![0.0; offsets.len()];
        Self::new(offsets, values)
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Largest |offset| along rows and columns.
    pub fn extent(&self) -> (usize, usize) {
        self.offsets.iter().fold((0, 0), |(r, c), &(m, n)| {
            (r.max(m.unsigned_abs() as usize), c.max(n.unsigned_abs() as usize))
        })
    }
}

/// Flat disk of lattice offsets with `m² + n² ≤ radius²`.
pub fn disk_se(radius: usize) -> Result<StructuringElement> {
    if radius < 1 {
        return Err(Error::Domain("disk radius must be at least 1".into()));
    }
    let r = radius as i32;
    let mut offsets = Vec::new();
    for m in -r..=r {
        for n in -r..=r {
            if m * m + n * n <= r * r {
                offsets.push((m, n));
            }
        }
    }
    StructuringElement::flat(offsets)
}

fn neighborhood_op(
    image: &Image2D,
    se: &StructuringElement,
    outside: f64,
    init: f64,
    combine: impl Fn(f64, f64, f64) -> f64 + Sync,
) -> Image2D {
    let cols = image.cols;
    let mut out = vec![0.0; image.pixels.len()];
    out.par_chunks_mut(cols).enumerate().for_each(|(x, row)| {
        for (y, px) in row.iter_mut().enumerate() {
            let mut acc = init;
            for (&(m, n), &s) in se.offsets.iter().zip(&se.values) {
                let v = image.read(x as isize - m as isize, y as isize - n as isize, outside);
                acc = combine(acc, v, s);
            }
            *px = acc;
        }
    });
    Image2D {
        pixels: out,
        ..image.clone()
    }
}

/// `max { I(x−m, y−n) + S(m, n) }`; pixels beyond the border read as
/// `pad_value_low`.
pub fn dilate(image: &Image2D, se: &StructuringElement) -> Image2D {
    neighborhood_op(image, se, image.pad_value_low, f64::NEG_INFINITY, |acc, v, s| {
        acc.max(v + s)
    })
}

/// `min { I(x−m, y−n) − S(m, n) }`; pixels beyond the border read as
/// `pad_value_high`.
pub fn erode(image: &Image2D, se: &StructuringElement) -> Image2D {
    neighborhood_op(image, se, image.pad_value_high, f64::INFINITY, |acc, v, s| {
        acc.min(v - s)
    })
}

/// Erosion followed by dilation.
pub fn open(image: &Image2D, se: &StructuringElement) -> Image2D {
    dilate(&erode(image, se), se)
}

/// Dilation followed by erosion.
pub fn close(image: &Image2D, se: &StructuringElement) -> Image2D {
    erode(&dilate(image, se), se)
}

/// Geometry needed to undo [`reshape_to_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReshapeLayout {
    pub len: usize,
    pub width: usize,
}

/// Row-major fill of a `w × w` grid, `w = ⌈√N⌉`, padding the tail with the
/// last sample.
pub fn reshape_to_image(signal: &[f64]) -> Result<(Image2D, ReshapeLayout)> {
    let n = signal.len();
    if n < crate::pattern::MIN_LEN {
        return Err(Error::Size(format!("cannot reshape {n} samples")));
    }
    let mut width = (n as f64).sqrt().ceil() as usize;
    while width * width < n {
        width += 1;
    }
    while (width - 1) * (width - 1) >= n {
        width -= 1;
    }
    let last = signal[n - 1];
    let mut pixels = signal.to_vec();
    pixels.resize(width * width, last);
    let image = Image2D::new(width, width, pixels)?;
    Ok((image, ReshapeLayout { len: n, width }))
}

pub fn reshape_from_image(image: &Image2D, layout: &ReshapeLayout) -> Result<Vec<f64>> {
    if image.rows * image.cols < layout.len || image.cols != layout.width {
        return Err(Error::Size(format!(
            "{}x{} image does not match layout {layout:?}",
            image.rows, image.cols
        )));
    }
    Ok(image.pixels[..layout.len].to_vec())
}

/// Output of [`estimate_background`], including the 2-D intermediates.
#[derive(Debug, Clone)]
pub struct BackgroundEstimate {
    pub background: Pattern,
    pub corrected: Pattern,
    pub layout: ReshapeLayout,
    pub reshaped: Image2D,
    pub opened: Image2D,
    /// Samples where `pattern − background` was negative and set to zero.
    pub clamped: usize,
}

/// Reshape the profile into a square image, open it with a flat disk and
/// restore the 1-D order. The corrected pattern is clamped at zero.
pub fn estimate_background(pattern: &Pattern, radius: usize) -> Result<BackgroundEstimate> {
    let se = disk_se(radius)?;
    let (reshaped, layout) = reshape_to_image(pattern.intensity())?;
    if 2 * radius + 1 > layout.width {
        return Err(Error::Domain(format!(
            "disk of radius {radius} does not fit the {w}x{w} reshaped image",
            w = layout.width
        )));
    }
    let opened = open(&reshaped, &se);
    let bg = reshape_from_image(&opened, &layout)?;
    let mut clamped = 0;
    let corrected: Vec<f64> = pattern
        .intensity()
        .iter()
        .zip(&bg)
        .map(|(p, b)| {
            let d = p - b;
            if d < 0.0 {
                clamped += 1;
                0.0
            } else {
                d
            }
        })
        .collect();
    Ok(BackgroundEstimate {
        background: pattern.with_intensity(bg)?,
        corrected: pattern.with_intensity(corrected)?,
        layout,
        reshaped,
        opened,
        clamped,
    })
}

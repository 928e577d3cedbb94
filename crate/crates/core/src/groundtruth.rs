//! Gaussian density-map ground truth.
//!
//! Each annotated object contributes a truncated, separable Gaussian
//! evaluated at pixel centres (integer coordinates). The window spans
//! `ceil(truncation_radius · sigma)` pixels either side of the nearest pixel.
//! With `renormalize` on, each splat is divided by its own in-window,
//! in-image mass, so every object adds exactly one unit to the map; off, it
//! is divided by the mass of the full unclipped window, so objects near the
//! border lose the clipped part.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::data::AnnotationSet;
use crate::error::{shape_err, Error, Result};
use crate::tensor::pairwise_sum;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub sigma: f64,
    pub truncation_radius: f64,
    pub renormalize: bool,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { sigma: 15.0, truncation_radius: 4.0, renormalize: true }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        if !(self.truncation_radius >= 1.0 && self.truncation_radius.is_finite()) {
            return Err(Error::Config(format!("truncation radius {} must be at least 1", self.truncation_radius)));
        }
        Ok(())
    }

    /// Window half-width in pixels.
    pub fn radius(&self) -> usize {
        (self.truncation_radius * self.sigma).ceil() as usize
    }
}

/// A `H×W` density field and the number of objects it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub values: Tensor<f64>,
    pub source_count: usize,
}

impl DensityMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn sum(&self) -> f64 {
        self.values.sum_all()
    }

    /// As a `1×1×H×W` batch.
    pub fn batch(&self) -> Tensor<f64> {
        self.values.clone().reshape(&[1, 1, self.height(), self.width()]).expect("same element count")
    }
}

/// Object centres in annotation order.
pub fn annotations_to_points(ann: &AnnotationSet) -> Result<Vec<[f64; 2]>> {
    ann.centers()
}

/// 1-D kernel over `lo..=hi` (clipped to `0..n`) centred at `c`; returns
/// the first index, the clipped weights and the unclipped mass.
fn axis_weights(c: f64, n: usize, radius: usize, sigma: f64) -> (usize, Vec<f64>, f64) {
    let centre = c.round() as i64;
    let (lo, hi) = (centre - radius as i64, centre + radius as i64);
    let g = |i: i64| {
        let d = i as f64 - c;
        (-d * d / (2.0 * sigma * sigma)).exp()
    };
    let full: Vec<f64> = (lo..=hi).map(g).collect();
    let first = lo.max(0);
    let last = hi.min(n as i64 - 1);
    let clipped = full[(first - lo) as usize..=(last - lo) as usize].to_vec();
    (first as usize, clipped, pairwise_sum(&full))
}

/// Splats every point onto an `h × w` map.
pub fn generate_density(points: &[[f64; 2]], h: usize, w: usize, spec: &GaussianSpec) -> Result<DensityMap> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return shape_err(format!("density map extent {h}×{w} has a zero side"));
    }
    let mut values = vec![0.0; h * w];
    let radius = spec.radius();
    for (index, &[x, y]) in points.iter().enumerate() {
        if !((0.0..w as f64).contains(&x) && (0.0..h as f64).contains(&y)) {
            return Err(Error::InvalidAnnotation {
                index,
                reason: format!("point ({x}, {y}) lies outside [0,{w})×[0,{h})"),
            });
        }
        let (x0, gx, full_x) = axis_weights(x, w, radius, spec.sigma);
        let (y0, gy, full_y) = axis_weights(y, h, radius, spec.sigma);
        let mass = if spec.renormalize { pairwise_sum(&gx) * pairwise_sum(&gy) } else { full_x * full_y };
        for (dy, &wy) in gy.iter().enumerate() {
            let row = &mut values[(y0 + dy) * w + x0..][..gx.len()];
            let s = wy / mass;
            for (v, &wx) in row.iter_mut().zip(&gx) {
                *v += wx * s;
            }
        }
    }
    Ok(DensityMap { values: Tensor::new(&[h, w], values)?, source_count: points.len() })
}

/// Sums `factor × factor` blocks.
pub fn downsample_density(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    let (h, w) = (map.height(), map.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("{h}×{w} map is not divisible by factor {factor}"));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = map.values.data();
    let mut block = Vec::with_capacity(factor * factor);
    let mut out = Vec::with_capacity(oh * ow);
    for by in 0..oh {
        for bx in 0..ow {
            block.clear();
            for y in by * factor..(by + 1) * factor {
                block.extend_from_slice(&src[y * w + bx * factor..][..factor]);
            }
            out.push(pairwise_sum(&block));
        }
    }
    Ok(DensityMap { values: Tensor::new(&[oh, ow], out)?, source_count: map.source_count })
}

/// Ground truth for an annotated `h × w` image at `1/factor` resolution.
pub fn density_target(ann: &AnnotationSet, h: usize, w: usize, spec: &GaussianSpec, factor: usize) -> Result<DensityMap> {
    let full = generate_density(&annotations_to_points(ann)?, h, w, spec)?;
    downsample_density(&full, factor)
}

/// Sidecar describing how a 16-bit density PNG maps back to values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityPngHeader {
    pub max_value: f64,
    pub sum: f64,
    pub width: usize,
    pub height: usize,
}

/// Writes `values / max · 65535` as 16-bit grayscale PNG plus a JSON sidecar
/// at `<path>.json` carrying the max.
pub fn write_density_png(path: &Path, values: &Tensor<f64>) -> Result<DensityPngHeader> {
    let s = values.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if values.numel() != h * w {
        return shape_err(format!("density export needs a single plane, got {s:?}"));
    }
    let max_value = values.data().iter().copied().fold(0.0, f64::max);
    let d = values.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize];
        let q = if max_value > 0.0 { (v.max(0.0) / max_value * 65535.0).round() } else { 0.0 };
        Luma([q as u16])
    });
    img.save(path).map_err(|e| Error::image(path, e))?;
    let header = DensityPngHeader { max_value, sum: values.sum_all(), width: w, height: h };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&header).expect("header serialises");
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(header)
}

/// Reads a map written by [`write_density_png`]; values are quantised to
/// `max / 65535`.
pub fn read_density_png(path: &Path) -> Result<Tensor<f64>> {
    let side = sidecar_path(path);
    let s = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: DensityPngHeader = serde_json::from_str(&s).map_err(|e| Error::json(&side, e))?;
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma16();
    let data = img.pixels().map(|p| p[0] as f64 / 65535.0 * header.max_value).collect();
    Tensor::new(&[img.height() as usize, img.width() as usize], data)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

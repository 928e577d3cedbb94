//! Annotated images and 8-bit RGB file IO.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use super::annotations::{AnnotationRecord, AnnotationSet, Manifest};
use crate::error::{Error, Result};
use crate::Tensor;

/// Pixels are a `3×H×W` tensor in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: Tensor<f64>,
    pub annotations: AnnotationSet,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, pixels: Tensor<f64>, annotations: AnnotationSet) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidShape(format!("pixels must be 3×H×W, got {s:?}")));
        }
        annotations.validate(s[2], s[1])?;
        Ok(Self { id: id.into(), pixels, annotations })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.annotations.len()
    }

    /// Pixels as a `1×3×H×W` batch.
    pub fn batch(&self) -> Tensor<f64> {
        self.pixels.clone().reshape(&[1, 3, self.height(), self.width()]).expect("same element count")
    }
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `3×H×W` tensor as 8-bit RGB; values are clamped to `[0,1]` and
/// rounded. The format follows the extension (PNG or JPEG).
pub fn write_rgb(path: &Path, pixels: &Tensor<f64>) -> Result<()> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape(format!("pixels must be 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = pixels.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Decodes `image_path` and validates the annotation file against it.
pub fn load_annotations(image_path: &Path, ann_path: &Path) -> Result<AnnotatedImage> {
    let rec = AnnotationRecord::load(ann_path)?;
    let pixels = read_rgb(image_path)?;
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    AnnotatedImage::new(id, pixels, rec.annotations)
}

/// Loads one manifest entry.
pub fn load_record(manifest: &Manifest, rec: &AnnotationRecord) -> Result<AnnotatedImage> {
    let pixels = read_rgb(&manifest.image_path(rec))?;
    AnnotatedImage::new(rec.id(), pixels, rec.annotations.clone())
}

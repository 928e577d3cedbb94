//! Synthetic scenes: soft bright blobs on a textured background, with the
//! blob centres as point annotations.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationSet, Split};
use super::image::AnnotatedImage;
use crate::error::{Error, Result};
use crate::{rng, Tensor};

const MAX_ATTEMPTS: usize = 1000;
/// Centres are multiples of this, so mirrored and translated coordinates
/// stay exact.
const CENTER_GRID: f64 = 256.0;
const EDGE_SOFTNESS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    pub radius_min: f64,
    pub radius_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: AnnotatedImage,
    pub requested: usize,
}

impl SynthScene {
    pub fn placed(&self) -> usize {
        self.image.count()
    }
}

/// Renders a scene. Blobs whose discs would overlap an earlier blob are
/// redrawn; after a bounded number of failures the remaining objects are
/// dropped, and [`SynthScene::placed`] reports the true count.
pub fn synth_scene(seed: u64, spec: &SynthSpec) -> Result<SynthScene> {
    let SynthSpec { width: w, height: h, n_objects, radius_min, radius_max } = *spec;
    if w == 0 || h == 0 {
        return Err(Error::Config(format!("scene extent {w}×{h} has a zero side")));
    }
    if !(radius_min > 0.0 && radius_min <= radius_max && radius_max.is_finite()) {
        return Err(Error::Config(format!("blob radius range [{radius_min}, {radius_max}] is invalid")));
    }
    let mut r = rng::stream(seed, "synth");

    let base: [f64; 3] = std::array::from_fn(|_| r.random_range(0.25..0.45));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = r.random_range(0.0..TAU);
            let freq = r.random_range(0.02..0.12);
            (freq * angle.cos(), freq * angle.sin(), r.random_range(0.0..TAU), r.random_range(0.02..0.05))
        })
        .collect();
    let mut px = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin()).sum();
            for (c, b) in base.iter().enumerate() {
                px[(c * h + y) * w + x] = b + t + r.random_range(-0.02..0.02);
            }
        }
    }

    let mut blobs: Vec<(f64, f64, f64)> = Vec::with_capacity(n_objects);
    'objects: for _ in 0..n_objects {
        for _ in 0..MAX_ATTEMPTS {
            let cx = (r.random_range(0.0..w as f64) * CENTER_GRID).floor() / CENTER_GRID;
            let cy = (r.random_range(0.0..h as f64) * CENTER_GRID).floor() / CENTER_GRID;
            let rad = r.random_range(radius_min..=radius_max);
            if blobs.iter().all(|&(x, y, q)| (x - cx).hypot(y - cy) >= q + rad) {
                blobs.push((cx, cy, rad));
                continue 'objects;
            }
        }
        break;
    }

    for &(cx, cy, rad) in &blobs {
        let color: [f64; 3] = std::array::from_fn(|_| r.random_range(0.75..1.0));
        let reach = rad + 4.0 * EDGE_SOFTNESS;
        let ys = (cy - reach).floor().max(0.0) as usize..((cy + reach).ceil() as usize + 1).min(h);
        let xs = (cx - reach).floor().max(0.0) as usize..((cx + reach).ceil() as usize + 1).min(w);
        for y in ys {
            for x in xs.clone() {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                let a = 1.0 / (1.0 + ((d - rad) / EDGE_SOFTNESS).exp());
                for (c, col) in color.iter().enumerate() {
                    let p = &mut px[(c * h + y) * w + x];
                    *p = *p * (1.0 - a) + col * a;
                }
            }
        }
    }
    // Quantised like an 8-bit file, so a saved scene reloads unchanged.
    for p in &mut px {
        *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    let points = blobs.iter().map(|&(x, y, _)| [x, y]).collect();
    let image = AnnotatedImage::new(format!("synth_{seed}"), Tensor::new(&[3, h, w], px)?, AnnotationSet::Points(points))?;
    Ok(SynthScene { image, requested: n_objects })
}

/// A whole synthetic dataset: image count, scene size, per-image object
/// count range and the held-out fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub test_fraction: f64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            n_images: 50,
            width: 128,
            height: 128,
            count_min: 5,
            count_max: 20,
            radius_min: 3.0,
            radius_max: 6.0,
            test_fraction: 0.2,
        }
    }
}

/// `round(n · test_fraction)` images go to the test split, chosen by a
/// seeded shuffle; at least one image always stays in training.
pub fn assign_splits(n: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} is outside [0, 1]")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let mut out = vec![Split::Train; n];
    for &i in &idx[..n_test] {
        out[i] = Split::Test;
    }
    Ok(out)
}

/// Scenes `synth_0000`, `synth_0001`, … with object counts drawn uniformly
/// from `[count_min, count_max]`, and their splits.
pub fn synth_dataset(spec: &SynthDatasetSpec, seed: u64) -> Result<Vec<(SynthScene, Split)>> {
    if spec.n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    if spec.count_min > spec.count_max {
        return Err(Error::Config(format!("count range [{}, {}] is empty", spec.count_min, spec.count_max)));
    }
    let splits = assign_splits(spec.n_images, spec.test_fraction, seed)?;
    let mut counts = rng::stream(seed, "counts");
    splits
        .into_iter()
        .enumerate()
        .map(|(i, split)| {
            let n_objects = counts.random_range(spec.count_min..=spec.count_max);
            let scene_spec = SynthSpec {
                width: spec.width,
                height: spec.height,
                n_objects,
                radius_min: spec.radius_min,
                radius_max: spec.radius_max,
            };
            let mut scene = synth_scene(rng::fnv1a(format!("{seed}/{i}").as_bytes()), &scene_spec)?;
            scene.image.id = format!("synth_{i:04}");
            Ok((scene, split))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec { width: 256, height: 256, n_objects: n, radius_min: 4.0, radius_max: 7.0 }
    }

    #[test]
    fn exact_count_inside_bounds() {
        let s = synth_scene(11, &spec(20)).unwrap();
        assert_eq!(s.placed(), 20);
        s.image.annotations.validate(256, 256).unwrap();
        let e = synth_scene(11, &spec(0)).unwrap();
        assert_eq!(e.placed(), 0);
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_scene(5, &spec(9)).unwrap(), synth_scene(5, &spec(9)).unwrap());
        assert_ne!(synth_scene(5, &spec(9)).unwrap().image.pixels, synth_scene(6, &spec(9)).unwrap().image.pixels);
    }

    #[test]
    fn dataset_partition() {
        let spec = SynthDatasetSpec { n_images: 10, width: 32, height: 32, ..Default::default() };
        let ds = synth_dataset(&spec, 4).unwrap();
        let n_test = ds.iter().filter(|(_, s)| *s == Split::Test).count();
        assert_eq!((ds.len(), n_test), (10, 2));
        assert!(ds.iter().all(|(s, _)| (5..=20).contains(&s.requested)));
        assert_eq!(assign_splits(1, 1.0, 0).unwrap(), vec![Split::Train]);
    }

    #[test]
    fn crowding_reports_shortfall() {
        let tight = SynthSpec { width: 16, height: 16, n_objects: 50, radius_min: 6.0, radius_max: 6.0 };
        let s = synth_scene(1, &tight).unwrap();
        assert!(s.placed() < 50 && s.placed() >= 1);
        assert_eq!(s.requested, 50);
    }
}

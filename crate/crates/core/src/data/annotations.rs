//! Annotation records and dataset manifests.
//!
//! One record per image:
//!
//! ```json
//! {"image": "img_000.png", "points": [[12.5, 40.0], [88.0, 7.25]]}
//! {"image": "img_001.png", "boxes": [[0, 0, 10, 20]], "split": "test"}
//! ```
//!
//! Exactly one of `points` / `boxes` is present. A manifest is a JSON array
//! of records that all carry `split`; image paths resolve against the
//! manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Object annotations for one image, in pixel coordinates with integer
/// values at pixel centres.
#[derive(Debug, Clone, PartialEq)]
pub enum AnnotationSet {
    Points(Vec<[f64; 2]>),
    /// `[xmin, ymin, xmax, ymax]`
    Boxes(Vec<[f64; 4]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationKind {
    Points,
    Boxes,
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationKind::Points => "points",
            AnnotationKind::Boxes => "boxes",
        })
    }
}

impl Default for AnnotationSet {
    fn default() -> Self {
        AnnotationSet::Points(Vec::new())
    }
}

impl AnnotationSet {
    pub fn kind(&self) -> AnnotationKind {
        match self {
            AnnotationSet::Points(_) => AnnotationKind::Points,
            AnnotationSet::Boxes(_) => AnnotationKind::Boxes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnnotationSet::Points(p) => p.len(),
            AnnotationSet::Boxes(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Object centres in entry order; boxes reduce to their midpoints.
    pub fn centers(&self) -> Result<Vec<[f64; 2]>> {
        match self {
            AnnotationSet::Points(p) => Ok(p.clone()),
            AnnotationSet::Boxes(b) => b
                .iter()
                .enumerate()
                .map(|(index, &[x0, y0, x1, y1])| {
                    if !(x1 >= x0 && y1 >= y0) {
                        return Err(Error::InvalidAnnotation {
                            index,
                            reason: format!("box [{x0}, {y0}, {x1}, {y1}] has max < min"),
                        });
                    }
                    Ok([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
                })
                .collect(),
        }
    }

    /// Checks every entry against a `width × height` image: points in
    /// `[0,W)×[0,H)`, boxes ordered, inside `[0,W]×[0,H]`, with their centre
    /// in `[0,W)×[0,H)`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        let inside = |x: f64, y: f64| (0.0..w).contains(&x) && (0.0..h).contains(&y);
        match self {
            AnnotationSet::Points(ps) => {
                for (index, &[x, y]) in ps.iter().enumerate() {
                    if !inside(x, y) {
                        return Err(Error::InvalidAnnotation {
                            index,
                            reason: format!("point ({x}, {y}) lies outside [0,{width})×[0,{height})"),
                        });
                    }
                }
            }
            AnnotationSet::Boxes(bs) => {
                let centers = self.centers()?;
                for (index, (&[x0, y0, x1, y1], &[cx, cy])) in bs.iter().zip(&centers).enumerate() {
                    let corners_ok = x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h;
                    if !corners_ok || !inside(cx, cy) {
                        return Err(Error::InvalidAnnotation {
                            index,
                            reason: format!("box [{x0}, {y0}, {x1}, {y1}] exceeds the {width}×{height} image"),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One annotation file, or one manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct AnnotationRecord {
    pub image: String,
    pub annotations: AnnotationSet,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

impl TryFrom<RawRecord> for AnnotationRecord {
    type Error = String;
    fn try_from(r: RawRecord) -> std::result::Result<Self, String> {
        let annotations = match (r.points, r.boxes) {
            (Some(p), None) => AnnotationSet::Points(p),
            (None, Some(b)) => AnnotationSet::Boxes(b),
            (Some(_), Some(_)) => return Err(format!("{}: both \"points\" and \"boxes\" given", r.image)),
            (None, None) => return Err(format!("{}: neither \"points\" nor \"boxes\" given", r.image)),
        };
        Ok(Self { image: r.image, annotations, split: r.split })
    }
}

impl From<AnnotationRecord> for RawRecord {
    fn from(r: AnnotationRecord) -> Self {
        let (points, boxes) = match r.annotations {
            AnnotationSet::Points(p) => (Some(p), None),
            AnnotationSet::Boxes(b) => (None, Some(b)),
        };
        RawRecord { image: r.image, points, boxes, split: r.split }
    }
}

impl AnnotationRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }

    /// Image identifier: the image path without its extension.
    pub fn id(&self) -> String {
        let p = Path::new(&self.image);
        p.with_extension("").to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the image paths are relative to.
    pub root: PathBuf,
    pub records: Vec<AnnotationRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<AnnotationRecord> = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.split.is_none() {
                return Err(Error::Config(format!("manifest entry {i} ({}) has no split", r.image)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialise")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn image_path(&self, r: &AnnotationRecord) -> PathBuf {
        self.root.join(&r.image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_forms() {
        let r: AnnotationRecord = serde_json::from_str(r#"{"image": "a.png", "points": []}"#).unwrap();
        assert_eq!(r.annotations.len(), 0);
        let r: AnnotationRecord =
            serde_json::from_str(r#"{"image": "a.png", "boxes": [[0,0,1,1],[2,2,3,3],[4,4,5,5]]}"#).unwrap();
        assert_eq!((r.annotations.kind(), r.annotations.len()), (AnnotationKind::Boxes, 3));
        assert!(serde_json::from_str::<AnnotationRecord>(r#"{"image": "a.png"}"#).is_err());
        assert!(serde_json::from_str::<AnnotationRecord>(r#"{"image": "a.png", "points": [], "boxes": []}"#).is_err());
        assert!(serde_json::from_str::<AnnotationRecord>(r#"{"image": "a.png", "points": [], "extra": 1}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let r = AnnotationRecord {
            image: "x/y.png".into(),
            annotations: AnnotationSet::Points(vec![[1.5, 2.0]]),
            split: Some(Split::Test),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"image":"x/y.png","points":[[1.5,2.0]],"split":"test"}"#);
        assert_eq!(serde_json::from_str::<AnnotationRecord>(&s).unwrap(), r);
        assert_eq!(r.id(), "x/y");
    }

    #[test]
    fn centers_and_bounds() {
        let b = AnnotationSet::Boxes(vec![[0.0, 0.0, 10.0, 20.0]]);
        assert_eq!(b.centers().unwrap(), vec![[5.0, 10.0]]);
        let bad = AnnotationSet::Boxes(vec![[0.0, 0.0, 1.0, 1.0], [5.0, 0.0, 4.0, 1.0]]);
        assert!(matches!(bad.centers(), Err(Error::InvalidAnnotation { index: 1, .. })));
        let p = AnnotationSet::Points(vec![[0.0, 0.0], [9.99, 4.0], [10.0, 0.0]]);
        assert!(matches!(p.validate(10, 5), Err(Error::InvalidAnnotation { index: 2, .. })));
    }
}

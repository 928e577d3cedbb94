//! Counting metrics, test-set evaluation and the ablation table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{self, AnnotatedImage, Manifest, Split};
use crate::error::{Error, Result};
use crate::network::{build_aspdnet, Variant, OUTPUT_STRIDE};
use crate::tensor::pairwise_sum;
use crate::training::{train_samples, RunDir, Sample, TrainConfig, TrainLog};
use crate::{predict_count, Model, ModelConfig, Scalar, Tensor};

/// Slack for the `rmse ≥ mae` check, relative to `mae`.
const POWER_MEAN_SLACK: f64 = 1e-12;

fn check_counts(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Contract("no counts to compare".into()));
    }
    Ok(())
}

/// `(1/N) Σ |pred − gt|`
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_counts(pred, gt)?;
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    Ok(pairwise_sum(&d) / d.len() as f64)
}

/// `sqrt((1/N) Σ (pred − gt)²)`
pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_counts(pred, gt)?;
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).collect();
    Ok((pairwise_sum(&d) / d.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub id: String,
    pub pred: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub per_image: Vec<ImageCount>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<ImageFailure>,
}

impl Metrics {
    /// Computes both errors and checks `rmse ≥ mae ≥ 0`.
    pub fn from_counts(per_image: Vec<ImageCount>, failures: Vec<ImageFailure>) -> Result<Self> {
        let pred: Vec<f64> = per_image.iter().map(|c| c.pred).collect();
        let gt: Vec<f64> = per_image.iter().map(|c| c.gt).collect();
        let (mae, rmse) = (mae(&pred, &gt)?, rmse(&pred, &gt)?);
        if !(mae >= 0.0 && rmse >= mae * (1.0 - POWER_MEAN_SLACK)) {
            return Err(Error::Contract(format!("rmse {rmse} < mae {mae}")));
        }
        Ok(Self { mae, rmse, per_image, failures })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    /// Aligned `id  pred  gt` rows followed by the two errors.
    pub fn to_table(&self) -> String {
        let w = self.per_image.iter().map(|c| c.id.len()).chain(["image".len()]).max().unwrap_or(5);
        let mut s = format!("{:<w$}  {:>10}  {:>6}\n", "image", "predicted", "truth");
        for c in &self.per_image {
            let _ = writeln!(s, "{:<w$}  {:>10.3}  {:>6}", c.id, c.pred, c.gt);
        }
        for f in &self.failures {
            let _ = writeln!(s, "{:<w$}  failed: {}", f.id, f.error);
        }
        let _ = writeln!(s, "MAE {:.2}  RMSE {:.2}", self.mae, self.rmse);
        s
    }
}

/// Density map and count for one image. The image is zero-padded on the
/// right and bottom to a multiple of 8 and the map is cropped to
/// `ceil(H/8) × ceil(W/8)`.
pub fn predict_image<T: Scalar>(model: &Model<T>, img: &AnnotatedImage) -> Result<(Tensor<f64>, f64)> {
    let padded = data::pad_to_multiple(&img.batch(), OUTPUT_STRIDE)?;
    let out = model.predict(&padded.cast::<T>())?.cast::<f64>();
    let map = data::crop_spatial(&out, img.height().div_ceil(OUTPUT_STRIDE), img.width().div_ceil(OUTPUT_STRIDE))?;
    let count = predict_count(&map)[0];
    Ok((map, count))
}

/// Evaluates already loaded images; entries that failed to load are
/// recorded as failures. Fails only when no image succeeds.
pub fn evaluate_images<T: Scalar>(model: &Model<T>, images: Vec<(String, Result<AnnotatedImage>)>) -> Result<Metrics> {
    let mut per_image = Vec::new();
    let mut failures = Vec::new();
    for (id, img) in images {
        match img.and_then(|img| predict_image(model, &img).map(|(_, c)| (c, img.count()))) {
            Ok((pred, gt)) => per_image.push(ImageCount { id, pred, gt: gt as f64 }),
            Err(e) => failures.push(ImageFailure { id, error: e.to_string() }),
        }
    }
    if per_image.is_empty() {
        let detail = failures.first().map(|f| format!("{}: {}", f.id, f.error)).unwrap_or_else(|| "empty test set".into());
        return Err(Error::InvalidInput(format!("no test image could be evaluated ({detail})")));
    }
    Metrics::from_counts(per_image, failures)
}

/// Loads the test split, applies the optional resize, and evaluates. The
/// ground truth is the annotation count.
pub fn evaluate<T: Scalar>(model: &Model<T>, manifest: &Manifest, resize: Option<[usize; 2]>) -> Result<Metrics> {
    let images = manifest
        .split(Split::Test)
        .map(|rec| {
            let img = data::load_record(manifest, rec).and_then(|img| match resize {
                Some([w, h]) => data::resize_with_annotations(&img, w, h),
                None => Ok(img),
            });
            (rec.id(), img)
        })
        .collect();
    evaluate_images(model, images)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub use_cbam: bool,
    pub use_spm: bool,
    pub use_dcm: bool,
    pub num_params: usize,
    /// Parameter groups (layer names) the variant owns.
    pub groups: Vec<String>,
    pub metrics: Metrics,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,cbam,spm,dcm,params,mae,rmse\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6}",
                r.model, r.use_cbam, r.use_spm, r.use_dcm, r.num_params, r.metrics.mae, r.metrics.rmse
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.model.len()).chain(["Method".len()]).max().unwrap_or(6);
        let mut s = format!("{:<w$}  {:>8}  {:>8}\n", "Method", "MAE", "RMSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>8.2}  {:>8.2}", r.model, r.metrics.mae, r.metrics.rmse);
        }
        s
    }

    /// Whether every row's parameter groups include the previous row's.
    pub fn groups_nested(&self) -> bool {
        self.rows.windows(2).all(|p| p[0].groups.iter().all(|g| p[1].groups.contains(g)))
    }
}

/// Trains and evaluates the four variants of `base` in table order, all
/// from `model_seed` and the same samples, sample order and step count.
pub fn ablation_run<T: Scalar>(
    base: &ModelConfig,
    train: &[Sample],
    test: &[AnnotatedImage],
    cfg: &TrainConfig,
    model_seed: u64,
    mut on_row: impl FnMut(&AblationRow, &TrainLog),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(4);
    for v in Variant::ALL {
        let mc = base.clone().with_variant(v);
        let model = build_aspdnet::<T>(&mc, model_seed)?;
        let mut groups: Vec<String> = mc.param_plan().iter().map(|p| p.group().to_string()).collect();
        groups.dedup();
        let num_params = model.num_parameters();
        let (model, log) = train_samples(model, train, cfg, &RunDir::default(), None, |_| {})?;
        let images = test.iter().map(|i| (i.id.clone(), Ok(i.clone()))).collect();
        let metrics = evaluate_images(&model, images)?;
        let (use_cbam, use_spm, use_dcm) = v.flags();
        let row = AblationRow {
            model: v.label().into(),
            use_cbam,
            use_spm,
            use_dcm,
            num_params,
            groups,
            metrics,
            losses: log.losses(),
        };
        on_row(&row, &log);
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        assert_eq!(mae(&[3.0, 5.0], &[1.0, 9.0]).unwrap(), 3.0);
        assert!((rmse(&[3.0, 5.0], &[1.0, 9.0]).unwrap() - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(mae(&[], &[]), Err(Error::Contract(_))));
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_image_metrics_coincide() {
        let m = Metrics::from_counts(vec![ImageCount { id: "a".into(), pred: 4.5, gt: 7.0 }], vec![]).unwrap();
        assert_eq!((m.mae, m.rmse), (2.5, 2.5));
        assert!(m.to_table().contains("MAE 2.50  RMSE 2.50"));
    }
}

//! Euclidean-loss SGD training.
//!
//! A batch is processed one item at a time: each item's loss is scaled by
//! `1/B` and its gradients are accumulated into the parameter store in batch
//! order, so the step equals a full-batch step and does not require items of
//! equal size. The epoch order is a shuffle drawn from the
//! `(seed, "epoch<e>")` stream, which makes any epoch reproducible on its own
//! and a run resumable from any checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, AnnotatedImage, Manifest, Split};
use crate::error::{Error, Result};
use crate::groundtruth::{density_target, GaussianSpec};
use crate::network::OUTPUT_STRIDE;
use crate::{rng, Graph, Model, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScale {
    /// `½ Σ (p − g)²`
    Half,
    /// `Σ (p − g)²`
    Unit,
}

impl LossScale {
    pub fn factor(self) -> f64 {
        match self {
            LossScale::Half => 0.5,
            LossScale::Unit => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub sigma: GaussianSpec,
    pub loss_scale: LossScale,
    pub checkpoint_every: usize,
    /// Nine crops plus mirrors per training image.
    #[serde(default = "yes")]
    pub augment: bool,
    /// `[width, height]` every image is resized to before anything else.
    #[serde(default)]
    pub resize: Option<[usize; 2]>,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 1,
            epochs: 400,
            seed: 0,
            sigma: GaussianSpec::default(),
            loss_scale: LossScale::Half,
            checkpoint_every: 50,
            augment: true,
            resize: None,
        }
    }
}

impl TrainConfig {
    /// Building subsets: batch 32, 400 epochs.
    pub fn buildings() -> Self {
        Self { batch_size: 32, ..Self::default() }
    }

    /// Large-image subsets: batch 1, 400 epochs, resized to 1024×768.
    pub fn large_images() -> Self {
        Self { resize: Some([1024, 768]), ..Self::default() }
    }

    /// Laptop scale: batch 4, 50 epochs.
    pub fn desk() -> Self {
        Self { batch_size: 4, epochs: 50, checkpoint_every: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if let Some([w, h]) = self.resize {
            if w == 0 || h == 0 {
                return Err(Error::Config(format!("resize target {w}×{h} has a zero side")));
            }
        }
        self.sigma.validate()
    }
}

/// A network input with its ground truth at output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1×3×H×W`, both extents multiples of 8.
    pub input: Tensor<f64>,
    /// `1×1×H/8×W/8`
    pub target: Tensor<f64>,
    pub count: usize,
}

impl Sample {
    /// Zero-pads the image to a multiple of 8 and builds the density target
    /// on the padded frame.
    pub fn from_image(img: &AnnotatedImage, spec: &GaussianSpec) -> Result<Self> {
        let input = data::pad_to_multiple(&img.batch(), OUTPUT_STRIDE)?;
        let [_, _, h, w] = input.dims4()?;
        let gt = density_target(&img.annotations, h, w, spec, OUTPUT_STRIDE)?;
        Ok(Self { id: img.id.clone(), input, target: gt.batch(), count: img.count() })
    }
}

/// Loads, optionally resizes, and returns the images of one split in
/// manifest order.
pub fn load_split(manifest: &Manifest, split: Split, resize: Option<[usize; 2]>) -> Result<Vec<AnnotatedImage>> {
    manifest
        .split(split)
        .map(|rec| {
            let img = data::load_record(manifest, rec)?;
            match resize {
                Some([w, h]) => data::resize_with_annotations(&img, w, h),
                None => Ok(img),
            }
        })
        .collect()
}

/// Training samples: each image, or its 18 augmented patches, in order.
/// Crop origins for an image come from `(seed ^ fnv1a(id))`.
pub fn prepare_samples(images: &[AnnotatedImage], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for img in images {
        if cfg.augment {
            let s = cfg.seed ^ rng::fnv1a(img.id.as_bytes());
            for p in data::augment(img, s)? {
                out.push(Sample::from_image(&p, &cfg.sigma)?);
            }
        } else {
            out.push(Sample::from_image(img, &cfg.sigma)?);
        }
    }
    Ok(out)
}

/// `scale · Σ_b ‖pred_b − gt_b‖² / B`.
pub fn euclidean_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, scale: LossScale) -> Result<T> {
    if pred.shape() != gt.shape() {
        return Err(Error::Contract(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    crate::ops::loss::euclidean_forward(pred, gt, T::of(scale.factor()))
}

/// `θ ← θ − lr·∂L/∂θ` for every parameter, then clears the gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {name} has no gradient")));
    }
    let lr = T::of(lr);
    for (_, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        t.data_mut().iter_mut().zip(&g).for_each(|(p, &d)| *p -= lr * d);
        t.clear_grad();
    }
    Ok(())
}

/// Forward and backward for one batch; gradients are accumulated into
/// `model.params`. Returns the batch loss.
pub fn accumulate_batch<T: Scalar>(model: &mut Model<T>, batch: &[&Sample], scale: LossScale) -> Result<f64> {
    let k = T::of(scale.factor() / batch.len() as f64);
    let mut total = 0.0;
    for s in batch {
        let mut g = Graph::new();
        let x = g.input(s.input.cast());
        let y = model.forward(&mut g, x)?;
        let gt = g.input(s.target.cast());
        let l = g.euclidean_loss(y, gt, k)?;
        g.backward_into(l, &mut model.params)?;
        total += g.value(l).data()[0].as_f64();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// FNV-1a of the epoch's sample order, hex.
    pub rng_digest: String,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Loss on the first batch over five consecutive steps, recorded before
    /// training starts.
    pub probe: Vec<f64>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn probe_decreasing(&self) -> bool {
        self.probe.windows(2).all(|w| w[1] < w[0])
    }

    /// One JSON object per epoch, without wall time.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("record serialises") + "\n").collect()
    }

    pub fn parse_jsonl(config: TrainConfig, s: &str) -> Result<Self> {
        let epochs = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json("<train log>", e)))
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self { config, epochs, probe: Vec::new() })
    }
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("epoch{epoch}")));
    order
}

fn order_digest(order: &[usize]) -> String {
    let bytes: Vec<u8> = order.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
    format!("{:016x}", rng::fnv1a(&bytes))
}

/// Where and how a run persists its state.
#[derive(Debug, Clone, Default)]
pub struct RunDir {
    pub path: Option<PathBuf>,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const PROBE_FILE: &str = "probe.json";
pub const FINAL_CHECKPOINT: &str = "model.aspd";

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.aspd")
}

impl RunDir {
    pub fn at(path: impl Into<PathBuf>) -> Self {
        Self { path: Some(path.into()) }
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        if let Some(dir) = &self.path {
            let p = dir.join(name);
            fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn append(&self, name: &str, line: &str) -> Result<()> {
        if let Some(dir) = &self.path {
            let p = dir.join(name);
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            f.write_all(line.as_bytes()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn save<T: Scalar>(&self, name: &str, params: &ParamStore<T>) -> Result<()> {
        match &self.path {
            Some(dir) => checkpoint::save_params(&dir.join(name), params),
            None => Ok(()),
        }
    }
}

/// State recovered from a run directory.
#[derive(Debug, Clone)]
pub struct Resume<T> {
    pub params: ParamStore<T>,
    pub log: TrainLog,
}

/// Finds the newest epoch checkpoint in `dir` and the log records up to it.
pub fn resume_from<T: Scalar>(dir: &Path, config: &TrainConfig) -> Result<Option<Resume<T>>> {
    let Ok(rd) = fs::read_dir(dir) else { return Ok(None) };
    let mut latest: Option<usize> = None;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(e) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".aspd")).and_then(|s| s.parse().ok()) {
            latest = latest.max(Some(e));
        }
    }
    let Some(epoch) = latest else { return Ok(None) };
    let params = checkpoint::load_params(&dir.join(checkpoint_name(epoch)))?;
    let log_path = dir.join(TRAIN_LOG);
    let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = TrainLog::parse_jsonl(config.clone(), &text)?;
    log.epochs.retain(|r| r.epoch <= epoch);
    if log.epochs.len() != epoch || log.epochs.iter().enumerate().any(|(i, r)| r.epoch != i + 1) {
        return Err(Error::Config(format!("{} does not cover epochs 1..={epoch}", log_path.display())));
    }
    Ok(Some(Resume { params, log }))
}

/// Trains `model` on `samples`. With a run directory, epoch checkpoints,
/// the log and the final checkpoint are written there; `resume` continues
/// after the last epoch it covers.
pub fn train_samples<T: Scalar>(
    mut model: Model<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    run: &RunDir,
    resume: Option<Resume<T>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<T>, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("the training set is empty".into()));
    }
    model.params.zero_grads();
    let mut log = TrainLog { config: cfg.clone(), epochs: Vec::new(), probe: Vec::new() };

    if let Some(r) = resume {
        model = Model::from_params(&model.config, r.params)?;
        log.epochs = r.log.epochs;
        // The log file is rewritten to drop records past the checkpoint.
        run.write(TRAIN_LOG, log.to_jsonl().as_bytes())?;
    } else {
        let first: Vec<&Sample> = epoch_order(samples.len(), cfg.seed, 1)
            .into_iter()
            .take(cfg.batch_size)
            .map(|i| &samples[i])
            .collect();
        let mut probe_model = model.clone();
        for _ in 0..5 {
            let loss = accumulate_batch(&mut probe_model, &first, cfg.loss_scale)?;
            sgd_step(&mut probe_model.params, cfg.learning_rate)?;
            log.probe.push(loss);
        }
        let probe = serde_json::json!({ "losses": log.probe, "decreasing": log.probe_decreasing() });
        run.write(PROBE_FILE, (serde_json::to_string_pretty(&probe).expect("json") + "\n").as_bytes())?;
        run.write(TRAIN_LOG, b"")?;
        run.write(TIMING_LOG, b"")?;
    }

    for epoch in log.epochs.len() + 1..=cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = match accumulate_batch(&mut model, &batch, cfg.loss_scale) {
                Err(Error::NonFinite(m)) => Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}"))),
                other => other,
            }?;
            if !loss.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b} ({})", ids.join(", "))));
            }
            sgd_step(&mut model.params, cfg.learning_rate)?;
            sum += loss * batch.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: sum / samples.len() as f64,
            rng_digest: order_digest(&order),
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        run.append(TRAIN_LOG, &(serde_json::to_string(&rec).expect("json") + "\n"))?;
        let timing = serde_json::json!({ "epoch": epoch, "wall_time_secs": rec.wall_time_secs });
        run.append(TIMING_LOG, &(timing.to_string() + "\n"))?;
        if epoch % cfg.checkpoint_every == 0 {
            run.save(&checkpoint_name(epoch), &model.params)?;
        }
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    run.save(FINAL_CHECKPOINT, &model.params)?;
    Ok((model, log))
}

/// Loads the training split of `manifest` and trains on it.
pub fn train<T: Scalar>(model: Model<T>, manifest: &Manifest, cfg: &TrainConfig, run: &RunDir) -> Result<(Model<T>, TrainLog)> {
    cfg.validate()?;
    let images = load_split(manifest, Split::Train, cfg.resize)?;
    if images.is_empty() {
        return Err(Error::Config("the manifest has no training images".into()));
    }
    let samples = prepare_samples(&images, cfg)?;
    train_samples(model, &samples, cfg, run, None, |_| {})
}

//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aspdnet::data::{self, AnnotatedImage, AnnotationRecord, AnnotationSet, Manifest, Split};
use aspdnet::evaluation::{ablation_run, evaluate, predict_image};
use aspdnet::groundtruth::{annotations_to_points, generate_density, write_density_png};
use aspdnet::training::{self, load_split, prepare_samples, resume_from, train_samples};
use aspdnet::{build_aspdnet, checkpoint, rng, Model, ModelConfig, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::rundir::Run;

pub const MODEL_CONFIG_FILE: &str = "model_config.json";

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Some images could not be processed.
    Partial(usize),
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!(aspdnet::Error::Config(format!("{flag} is required for this command"))),
    }
}

/// File-name-safe form of an image id.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn load_manifest(path: &Option<PathBuf>) -> Result<Manifest> {
    let p = require(path, "--manifest")?;
    Ok(Manifest::load(p)?)
}

fn load_model(checkpoint: &Path, explicit: Option<&Path>, fallback: &ModelConfig) -> Result<Model<f64>> {
    let sibling = checkpoint.parent().map(|d| d.join(MODEL_CONFIG_FILE));
    let cfg = match (explicit, sibling) {
        (Some(p), _) => ModelConfig::load(p)?,
        (None, Some(p)) if p.exists() => ModelConfig::load(&p)?,
        _ => fallback.clone(),
    };
    let params = checkpoint::load_params(checkpoint)?;
    Ok(Model::from_params(&cfg, params)?)
}

#[derive(Serialize)]
struct GtRow {
    id: String,
    count: usize,
    density_sum: f64,
}

#[derive(Serialize)]
struct Failure {
    id: String,
    error: String,
}

pub fn gen_gt(run: &mut Run, cfg: &RunConfig, manifest: &Option<PathBuf>, png: bool) -> Result<Outcome> {
    let m = load_manifest(manifest)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for rec in &m.records {
        let id = rec.id();
        let result = (|| -> Result<GtRow> {
            let img = data::load_record(&m, rec)?;
            let points = annotations_to_points(&img.annotations)?;
            let map = generate_density(&points, img.height(), img.width(), &cfg.gaussian)?;
            let stem = file_stem(&id);
            let mut buf = Vec::new();
            checkpoint::write_tensors(&mut buf, [("density", &map.values)])?;
            run.write(&format!("density/{stem}.aspd"), buf)?;
            if png {
                write_density_png(&run.path(&format!("density/{stem}.png")), &map.values)?;
            }
            Ok(GtRow { id: id.clone(), count: img.count(), density_sum: map.sum() })
        })();
        match result {
            Ok(r) => {
                run.log(format!("{}: {} objects, density sum {:.6}", r.id, r.count, r.density_sum));
                rows.push(r);
            }
            Err(e) => {
                run.log(format!("{id}: failed: {e:#}"));
                failures.push(Failure { id, error: format!("{e:#}") });
            }
        }
    }
    let summary = serde_json::json!({ "images": rows, "failures": failures });
    run.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(if failures.is_empty() { Outcome::Ok } else { Outcome::Partial(failures.len()) })
}

pub fn synth(run: &mut Run, cfg: &RunConfig) -> Result<Outcome> {
    let scenes = data::synth_dataset(&cfg.synth, cfg.seed)?;
    let mut records = Vec::with_capacity(scenes.len());
    for (scene, split) in scenes {
        let img = &scene.image;
        let image = format!("images/{}.png", img.id);
        std::fs::create_dir_all(run.path("images"))?;
        data::write_rgb(&run.path(&image), &img.pixels)?;
        let rec = AnnotationRecord { image: image.clone(), annotations: img.annotations.clone(), split: Some(split) };
        let per_image = AnnotationRecord { split: None, ..rec.clone() };
        run.write(&format!("annotations/{}.json", img.id), serde_json::to_string_pretty(&per_image)? + "\n")?;
        if scene.placed() < scene.requested {
            run.log(format!("{}: placed {} of {} objects", img.id, scene.placed(), scene.requested));
        }
        records.push(rec);
    }
    let m = Manifest { root: run.dir().to_path_buf(), records };
    m.save(&run.path("manifest.json"))?;
    let n_test = m.split(Split::Test).count();
    run.log(format!("{} images ({} train, {} test)", m.records.len(), m.records.len() - n_test, n_test));
    Ok(Outcome::Ok)
}

pub fn augment(run: &mut Run, cfg: &RunConfig, manifest: &Option<PathBuf>, limit: Option<usize>) -> Result<Outcome> {
    let m = load_manifest(manifest)?;
    let images = load_split(&m, Split::Train, cfg.train.resize)?;
    let mut records = Vec::new();
    std::fs::create_dir_all(run.path("patches"))?;
    for img in images.iter().take(limit.unwrap_or(usize::MAX)) {
        let seed = cfg.seed ^ rng::fnv1a(img.id.as_bytes());
        for p in data::augment(img, seed)? {
            let image = format!("patches/{}.png", file_stem(&p.id));
            data::write_rgb(&run.path(&image), &p.pixels)?;
            records.push(AnnotationRecord { image, annotations: p.annotations.clone(), split: Some(Split::Train) });
        }
        run.log(format!("{}: {} patches", img.id, data::PATCHES_PER_IMAGE));
    }
    Manifest { root: run.dir().to_path_buf(), records }.save(&run.path("manifest.json"))?;
    Ok(Outcome::Ok)
}

pub fn train(run: &mut Run, cfg: &RunConfig, manifest: &Option<PathBuf>, resume: bool) -> Result<Outcome> {
    let m = load_manifest(manifest)?;
    let images = load_split(&m, Split::Train, cfg.train.resize)?;
    let samples = prepare_samples(&images, &cfg.train)?;
    run.log(format!("{} training images, {} samples", images.len(), samples.len()));
    let model = build_aspdnet::<f64>(&cfg.model, cfg.seed)?;
    run.log(format!("{} parameters", model.num_parameters()));
    run.write(MODEL_CONFIG_FILE, cfg.model.to_json() + "\n")?;
    let state = if resume { resume_from(run.dir(), &cfg.train)? } else { None };
    if let Some(s) = &state {
        run.log(format!("resuming after epoch {}", s.log.epochs.len()));
    }
    let dir = training::RunDir::at(run.dir());
    let mut lines = Vec::new();
    let (_, log) = train_samples(model, &samples, &cfg.train, &dir, state, |e| {
        let line = format!("epoch {:>4}  mean loss {:.6e}", e.epoch, e.mean_loss);
        eprintln!("{line}");
        lines.push(line);
    })?;
    for l in lines {
        run.record(l);
    }
    if !log.probe.is_empty() {
        run.log(format!(
            "first-batch probe over 5 steps: {} ({})",
            log.probe.iter().map(|l| format!("{l:.6e}")).collect::<Vec<_>>().join(" "),
            if log.probe_decreasing() { "decreasing" } else { "not decreasing" }
        ));
    }
    Ok(Outcome::Ok)
}

pub fn eval(
    run: &mut Run,
    cfg: &RunConfig,
    manifest: &Option<PathBuf>,
    checkpoint: &Path,
    model_config: Option<&Path>,
) -> Result<Outcome> {
    let m = load_manifest(manifest)?;
    let model = load_model(checkpoint, model_config, &cfg.model)?;
    let metrics = evaluate(&model, &m, cfg.eval.resize)?;
    run.write("metrics.json", metrics.to_json() + "\n")?;
    let table = metrics.to_table();
    run.write("metrics.txt", &table)?;
    print!("{table}");
    for f in &metrics.failures {
        run.log(format!("{}: failed: {}", f.id, f.error));
    }
    run.log(format!("MAE {:.4} RMSE {:.4} over {} images", metrics.mae, metrics.rmse, metrics.per_image.len()));
    Ok(if metrics.failures.is_empty() { Outcome::Ok } else { Outcome::Partial(metrics.failures.len()) })
}

pub fn predict(
    run: &mut Run,
    cfg: &RunConfig,
    image: &Path,
    checkpoint: &Path,
    model_config: Option<&Path>,
) -> Result<Outcome> {
    let model = load_model(checkpoint, model_config, &cfg.model)?;
    let pixels = data::read_rgb(image)?;
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut img = AnnotatedImage::new(id, pixels, AnnotationSet::default())?;
    if let Some([w, h]) = cfg.eval.resize {
        img = data::resize_with_annotations(&img, w, h)?;
    }
    let (map, count) = predict_image(&model, &img)?;
    let plane = Tensor::new(&map.shape()[2..], map.data().to_vec())?;
    let mut buf = Vec::new();
    checkpoint::write_tensors(&mut buf, [("density", &plane)])?;
    run.write("density.aspd", buf)?;
    write_density_png(&run.path("density.png"), &plane)?;
    run.write("count.txt", format!("{count:.6}\n"))?;
    run.log(format!("{}: predicted count {count:.6}", img.id));
    println!("{count:.6}");
    Ok(Outcome::Ok)
}

pub fn ablate(run: &mut Run, cfg: &RunConfig, manifest: &Option<PathBuf>) -> Result<Outcome> {
    let m = load_manifest(manifest)?;
    let train_images = load_split(&m, Split::Train, cfg.train.resize)?;
    let test_images = load_split(&m, Split::Test, cfg.eval.resize)?;
    if test_images.is_empty() {
        bail!(aspdnet::Error::Config("the manifest has no test images".into()));
    }
    let samples = prepare_samples(&train_images, &cfg.train)?;
    run.log(format!("{} training samples, {} test images", samples.len(), test_images.len()));
    let mut written = Vec::new();
    let table = ablation_run::<f64>(&cfg.model, &samples, &test_images, &cfg.train, cfg.seed, |row, log| {
        eprintln!("{}: MAE {:.4} RMSE {:.4}", row.model, row.metrics.mae, row.metrics.rmse);
        written.push((row.model.clone(), log.to_jsonl(), row.metrics.mae, row.metrics.rmse));
    })
    .context("ablation")?;
    for (model, jsonl, mae, rmse) in written {
        run.write(&format!("{}/train_log.jsonl", file_stem(&model)), jsonl)?;
        run.record(format!("{model}: MAE {mae:.4} RMSE {rmse:.4}"));
    }
    run.write("ablation.csv", table.to_csv())?;
    run.write("ablation.json", table.to_json() + "\n")?;
    let text = table.to_table();
    run.write("ablation.txt", &text)?;
    print!("{text}");
    if !table.groups_nested() {
        bail!(aspdnet::Error::Contract("ablation parameter groups are not nested".into()));
    }
    Ok(Outcome::Ok)
}

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use deadnet::augment::{center_crop, pipeline_a, pipeline_b, AugmentConfig};
use deadnet::dataset::{
    generate_corpus, load_image, read_manifest, resolve, save_image, save_raw, save_rgb, split_by_position, write_manifest,
    ImageRecord, Label, SyntheticSpec,
};
use deadnet::heatmap::{overlay_encode, resample_placed, sliding_window_classify};
use deadnet::interpret::{
    class_model, display_normalize, ensemble_weights, gradcam_map, gradcam_upsample, gradcam_weights, ClassModelConfig,
    ClassModelInit,
};
use deadnet::model::{Checkpoint, Network, NetworkSpec};
use deadnet::stats::{accuracy_bootstrap, healthy_rate};
use deadnet::trainer::{eval_input, evaluate, train_with, Classification, Sample, TrainConfig};
use deadnet::Tensor;
use deadnet_annotate::{Campaign, Catalog};

use crate::args::*;
use crate::record;

fn emit(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    out.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Records with paths made absolute, paired with their decoded images.
fn load_labeled(manifest: &Path) -> Result<Vec<(ImageRecord, Sample)>> {
    let records = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    ensure!(!records.is_empty(), "manifest {} is empty", manifest.display());
    records
        .into_iter()
        .map(|mut r| {
            let label = r.label.class_index().with_context(|| format!("{} is unlabeled", r.path.display()))?;
            r.path = std::path::absolute(resolve(manifest, &r))?;
            let image = load_image(&r.path)?;
            Ok((r.clone(), Sample { id: r.path.display().to_string(), image, label }))
        })
        .collect()
}

fn load_network(path: &Path) -> Result<Network> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.network)
}

fn extents(image: &Tensor) -> (usize, usize) {
    (image.shape()[0], image.shape()[1])
}

pub fn run(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::Augment(a) => augment(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Classify(a) => classify(a, argv),
        Command::Heatmap(a) => heatmap(a, argv),
        Command::Gradcam(a) => gradcam(a, argv),
        Command::Classmodel(a) => classmodel(a, argv),
        Command::Bootstrap(a) => bootstrap(a, argv),
        Command::Concordance(a) => concordance(a, argv),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: Synth, argv: &[String]) -> Result<()> {
    create_out(&a.out)?;
    let spec = SyntheticSpec { height: a.size, width: a.size, quadrant: a.quadrant, seed: a.seed, ..Default::default() };
    let corpus = generate_corpus(&spec, a.per_class)?;
    let mut quadrants = String::new();
    for s in &corpus {
        save_image(&s.image, a.out.join(&s.record.path))?;
        if let Some(q) = s.quadrant {
            quadrants.push_str(&json!({ "path": s.record.path, "quadrant": q }).to_string());
            quadrants.push('\n');
        }
    }
    let records: Vec<ImageRecord> = corpus.into_iter().map(|s| s.record).collect();
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    if a.quadrant {
        fs::write(a.out.join("quadrants.jsonl"), quadrants)?;
    }
    record::write(&a.out, "synth", argv, Some(a.seed), &[])?;
    eprintln!("{} images written to {}", records.len(), a.out.display());
    emit(&json!({ "manifest": manifest, "images": records.len() }))
}

fn augment(a: Augment, argv: &[String]) -> Result<()> {
    let mut cfg: AugmentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AugmentConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.crop_size = a.crop_size.unwrap_or(cfg.crop_size);
    cfg.crop_stride = a.crop_stride.unwrap_or(cfg.crop_stride);
    cfg.validate()?;
    let records = read_manifest(&a.manifest)?;
    create_out(&a.out)?;

    let mut inputs: Vec<(Vec<Tensor>, Label, u64)> = Vec::new();
    match a.pipeline {
        PipelineArg::A => {
            for r in &records {
                inputs.push((vec![load_image(resolve(&a.manifest, r))?], r.label, r.stage_position));
            }
        }
        PipelineArg::B => {
            let mut groups: BTreeMap<(u64, Label), Vec<&ImageRecord>> = BTreeMap::new();
            for r in &records {
                groups.entry((r.stage_position, r.label)).or_default().push(r);
            }
            for ((position, label), mut members) in groups {
                members.sort_by_key(|r| r.frame_index);
                ensure!(
                    members.len() % cfg.temporal_window == 0,
                    "stage position {position} has {} frames, not a multiple of {}",
                    members.len(),
                    cfg.temporal_window
                );
                for chunk in members.chunks(cfg.temporal_window) {
                    let frames = chunk.iter().map(|r| load_image(resolve(&a.manifest, r))).collect::<deadnet::Result<_>>()?;
                    inputs.push((frames, label, position));
                }
            }
        }
    }

    let mut index = String::new();
    let mut count = 0usize;
    for (frames, label, position) in inputs {
        let stream = match a.pipeline {
            PipelineArg::A => pipeline_a(frames.into_iter().next().expect("one image"), label, position, &cfg)?,
            PipelineArg::B => pipeline_b(frames, label, position, &cfg)?,
        };
        for item in stream {
            let item = item?;
            let file = format!("{count:07}.f32");
            let entry = json!({
                "file": file,
                "label": item.label,
                "stage_position": item.stage_position,
                "provenance": item.provenance,
            });
            let extra = match &entry {
                serde_json::Value::Object(m) => m.clone().into_iter().collect(),
                _ => unreachable!(),
            };
            save_raw(&item.image, a.out.join(&file), extra)?;
            index.push_str(&entry.to_string());
            index.push('\n');
            count += 1;
        }
    }
    fs::write(a.out.join("augmented.jsonl"), index)?;
    record::write(&a.out, "augment", argv, Some(cfg.seed), &[&a.manifest])?;
    eprintln!("{count} augmented images from {} records", records.len());
    emit(&json!({ "images": count, "index": a.out.join("augmented.jsonl") }))
}

fn train(a: Train, argv: &[String]) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.max_iterations = a.iterations.unwrap_or(cfg.max_iterations);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let labeled = load_labeled(&a.manifest)?;
    let (train_set, validation_set) = match &a.validation {
        Some(v) => (labeled, load_labeled(v)?),
        None => {
            let (tr, va) = split_by_position(&labeled.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(), a.test_fraction, cfg.seed)?;
            let side = |keep: &[ImageRecord]| -> Vec<(ImageRecord, Sample)> {
                labeled.iter().filter(|(r, _)| keep.iter().any(|k| k.path == r.path)).cloned().collect()
            };
            (side(&tr), side(&va))
        }
    };
    create_out(&a.out)?;
    write_manifest(a.out.join("train.jsonl"), &train_set.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())?;
    write_manifest(a.out.join("validation.jsonl"), &validation_set.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())?;
    let spec = NetworkSpec::with_input(a.size, 2)?;
    let train_samples: Vec<Sample> = train_set.into_iter().map(|(_, s)| s).collect();
    let validation_samples: Vec<Sample> = validation_set.into_iter().map(|(_, s)| s).collect();
    eprintln!("training on {} images, validating on {}", train_samples.len(), validation_samples.len());
    let start = std::time::Instant::now();
    let (net, log) = train_with(Network::build(spec, cfg.seed)?, &train_samples, &validation_samples, &cfg, |r| {
        eprintln!(
            "[{:>7.1}s] iter {:>6}  train loss {:.4}  val loss {:.4}  val acc {:.4}",
            start.elapsed().as_secs_f64(),
            r.iteration,
            r.train_loss,
            r.val_loss,
            r.val_acc
        )
    })?;
    let checkpoint = a.out.join("checkpoint.bin");
    Checkpoint::new(net, cfg.max_iterations, cfg.seed).save(&checkpoint)?;
    fs::write(a.out.join("train_log.csv"), log.to_csv())?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut inputs = vec![a.manifest.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.validation.as_deref());
    record::write(&a.out, "train", argv, Some(cfg.seed), &inputs)?;
    emit(&json!({ "checkpoint": checkpoint, "iterations": cfg.max_iterations, "final": log.records.last() }))
}

fn eval(a: Eval, argv: &[String]) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let samples: Vec<Sample> = load_labeled(&a.manifest)?.into_iter().map(|(_, s)| s).collect();
    let e = evaluate(&net, &samples)?;
    let mut out_path = None;
    if let Some(out) = &a.out {
        create_out(out)?;
        let mut lines = String::new();
        for c in &e.items {
            lines.push_str(&serde_json::to_string(c)?);
            lines.push('\n');
        }
        let p = out.join("classifications.jsonl");
        fs::write(&p, lines)?;
        record::write(out, "eval", argv, None, &[&a.manifest, &a.checkpoint])?;
        out_path = Some(p);
    }
    eprintln!("accuracy {:.4} over {} images", e.accuracy, e.items.len());
    emit(&json!({ "accuracy": e.accuracy, "loss": e.loss, "images": e.items.len(), "classifications": out_path }))
}

fn classify(a: Classify, argv: &[String]) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let probs = net.predict(&eval_input(&net, &image)?)?;
    let p_sick = probs.data()[deadnet::model::SICK] as f64;
    let class = if p_sick > 0.5 { "sick" } else { "healthy" };
    if let Some(out) = &a.out {
        create_out(out)?;
        record::write(out, "classify", argv, None, &[&a.checkpoint, &a.image])?;
    }
    emit(&json!({ "class": class, "p_sick": p_sick }))
}

/// Raw map and an overlay on `base`, with the map scaled to its maximum.
fn write_map(out: &Path, stem: &str, base: &Tensor, map: &Tensor<f64>, opacity: f64, extra: serde_json::Value) -> Result<()> {
    let peak = map.data().iter().copied().fold(0.0, f64::max);
    let shown = if peak > 0.0 { map.map(|v| v / peak) } else { map.clone() };
    let extra = match extra {
        serde_json::Value::Object(m) => m.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    save_raw(&map.cast(), out.join(format!("{stem}.f32")), extra)?;
    save_rgb(&overlay_encode(base, &shown, opacity)?, out.join(format!("{stem}_overlay.png")))?;
    Ok(())
}

fn heatmap(a: Heatmap, argv: &[String]) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let window = a.window.unwrap_or(net.spec().input[0]);
    let map = sliding_window_classify(&net, &image, window, a.stride)?;
    create_out(&a.out)?;
    map.save_raw(a.out.join("heatmap.f32"))?;
    // Each grid value sits at its window's centre.
    let centre = (window as f64 - 1.0) / 2.0;
    let placement = (centre, a.stride as f64);
    let (h, w) = extents(&image);
    let full = resample_placed(&map.grid, h, w, placement, placement)?;
    save_rgb(&overlay_encode(&image, &full, a.opacity)?, a.out.join("heatmap_overlay.png"))?;
    record::write(&a.out, "heatmap", argv, None, &[&a.checkpoint, &a.image])?;
    let sidecar = map.sidecar();
    eprintln!("{}×{} windows", sidecar.rows, sidecar.cols);
    emit(&json!({ "grid": map.grid.data(), "layout": sidecar }))
}

fn gradcam(a: Gradcam, argv: &[String]) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let class = a.class.index();
    let image = load_image(&a.image)?;
    let input = eval_input(&net, &image)?;
    let gc = gradcam_weights(&net, &input, class, &a.layer)?;
    let (weights, ensemble_size) = match &a.manifest {
        Some(m) => {
            let per = load_labeled(m)?
                .into_iter()
                .filter(|(_, s)| s.label == class)
                .map(|(_, s)| Ok((s.label, gradcam_weights(&net, &eval_input(&net, &s.image)?, class, &a.layer)?.weights)))
                .collect::<Result<Vec<_>>>()?;
            ensure!(!per.is_empty(), "manifest has no images of class {:?}", a.class);
            (ensemble_weights(&per, class)?.weights, per.len())
        }
        None => (gc.weights.weights.clone(), 1),
    };
    let map = gradcam_upsample(net.spec(), &a.layer, &gradcam_map(&gc.maps, &weights)?)?;
    let [h, w, _] = net.spec().input;
    let base = center_crop(&image, h, w)?;
    create_out(&a.out)?;
    let meta = json!({ "layer": a.layer, "class": class, "ensemble_size": ensemble_size });
    write_map(&a.out, "gradcam", &base, &map, a.opacity, meta.clone())?;
    let mut inputs = vec![a.checkpoint.as_path(), a.image.as_path()];
    inputs.extend(a.manifest.as_deref());
    record::write(&a.out, "gradcam", argv, None, &inputs)?;
    let mass: f64 = map.data().iter().sum();
    emit(&json!({ "meta": meta, "map_extent": [h, w], "total_mass": mass, "peak": map.max_value() }))
}

fn classmodel(a: Classmodel, argv: &[String]) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let mut cfg: ClassModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ClassModelConfig::default(),
    };
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    if let Some(p) = &a.init {
        let [h, w, _] = net.spec().input;
        cfg.init = ClassModelInit::Image(center_crop(&load_image(p)?, h, w)?.data().to_vec());
    }
    let model = class_model(&net, a.class.index(), &cfg)?;
    create_out(&a.out)?;
    save_image(&display_normalize(&model.image), a.out.join("class_model.png"))?;
    save_raw(&model.image, a.out.join("class_model.f32"), BTreeMap::new())?;
    for (it, snap) in &model.snapshots {
        save_image(&display_normalize(snap), a.out.join(format!("snapshot_{it:06}.png")))?;
    }
    let mut scores = String::from("iteration,score\n");
    for (i, s) in model.scores.iter().enumerate() {
        scores.push_str(&format!("{i},{s}\n"));
    }
    fs::write(a.out.join("scores.csv"), scores)?;
    let mut inputs = vec![a.checkpoint.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.init.as_deref());
    record::write(&a.out, "classmodel", argv, None, &inputs)?;
    emit(&json!({
        "class": a.class.index(),
        "iterations": cfg.iterations,
        "first_score": model.scores.first(),
        "last_score": model.scores.last(),
    }))
}

fn bootstrap(a: Bootstrap, argv: &[String]) -> Result<()> {
    let text = fs::read_to_string(&a.classifications).with_context(|| format!("reading {}", a.classifications.display()))?;
    let items = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str::<Classification>(l).with_context(|| format!("line {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    if !(a.level > 0.0 && a.level < 1.0) {
        bail!("confidence level {} outside (0, 1)", a.level);
    }
    let value = if a.healthy_rate {
        serde_json::to_value(healthy_rate(&items, a.batches, a.resamples, a.level, a.seed)?)?
    } else {
        serde_json::to_value(accuracy_bootstrap(&items, a.batches, a.resamples, a.level, a.seed)?)?
    };
    if let Some(out) = &a.out {
        create_out(out)?;
        fs::write(out.join("bootstrap.json"), serde_json::to_string_pretty(&value)?)?;
        record::write(out, "bootstrap", argv, Some(a.seed), &[&a.classifications])?;
    }
    emit(&value)
}

fn open_campaign(catalog: &Path, log: &Path, seed: u64) -> Result<Campaign> {
    let catalog = Catalog::load(catalog).with_context(|| format!("loading catalog {}", catalog.display()))?;
    Ok(Campaign::open(catalog, log, seed)?)
}

fn concordance(a: Concordance, argv: &[String]) -> Result<()> {
    ensure!(a.log.exists(), "no annotation log at {}", a.log.display());
    let campaign = open_campaign(&a.catalog, &a.log, a.seed)?;
    let report = campaign.concordance();
    let mut value = serde_json::to_value(&report)?;
    if let Some(out) = &a.out {
        let export = campaign.export(a.train_fraction, a.seed)?;
        create_out(out)?;
        fs::write(out.join("train.jsonl"), export.train_manifest()?)?;
        fs::write(out.join("test.jsonl"), export.test_manifest()?)?;
        record::write(out, "concordance", argv, Some(a.seed), &[&a.catalog, &a.log])?;
        value["export"] = json!({
            "kept_sequences": export.kept_sequences,
            "discordant": export.discordant,
            "unsure_only": export.unsure_only,
            "train_images": export.train.len(),
            "test_images": export.test.len(),
        });
    }
    if let Some(chain) = &report.chain {
        eprintln!(
            "{} of {} overlaps disagree; performance bound {:.1}%",
            chain.disagreements,
            chain.overlaps,
            100.0 * chain.performance_bound
        );
    }
    emit(&value)
}

fn serve(a: Serve) -> Result<()> {
    let campaign = open_campaign(&a.catalog, &a.log, a.seed)?;
    let app = deadnet_annotate::http::router(Arc::new(Mutex::new(campaign)), a.ui.map(PathBuf::from));
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.bind.as_str(), a.port)).await?;
        let addr = listener.local_addr()?;
        eprintln!("annotation service on http://{addr}");
        emit(&json!({ "listening": addr.to_string() }))?;
        axum::serve(listener, app).await?;
        Ok(())
    })
}

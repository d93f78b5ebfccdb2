//! Acceptance suite: one PASS/FAIL line per criterion, each judged on its
//! measured value and on its runtime budget.
//!
//! `cargo test -p deadnet-cli --test acceptance -- bootstrap proxy` runs
//! only the criteria whose names contain one of the given words.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::time::{Duration, Instant};

use deadnet::augment::{pipeline_a, pipeline_b, AugmentConfig};
use deadnet::dataset::{generate_corpus, split_by_position, Label, SyntheticImage, SyntheticSpec};
use deadnet::interpret::{
    class_model, ensemble_weights, gradcam_map, gradcam_upsample, gradcam_weights, ClassModelConfig, LinearScorer,
};
use deadnet::model::{Network, NetworkSpec, SICK};
use deadnet::rng::rng_for;
use deadnet::stats::{
    ambiguity_chain, batches_from_outcomes, bca_from_distribution, bootstrap_bca, jackknife_acceleration, VirtualBatch,
    DEFAULT_RESAMPLES,
};
use deadnet::trainer::{eval_input, evaluate, train_with, Sample, TrainConfig};
use deadnet::verify::{network_check, op_checks, worst, TOLERANCE};
use deadnet::Tensor;
use deadnet_annotate::{AnnotationRecord, Campaign, Catalog, Judgment, SequenceItem, OVERLAP_PERIOD};
use rand::Rng as _;

type Outcome = Result<(bool, String), String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn gradients() -> Outcome {
    let ops = op_checks(5, 11).map_err(err)?;
    let net = network_check(NetworkSpec::deadnet64(), 16, 4, 5).map_err(err)?;
    let all: Vec<_> = ops.iter().chain(&net).collect();
    let failing = all.iter().filter(|r| !r.report.passes(TOLERANCE)).count();
    let probed = all.iter().all(|r| r.report.checked > 0);
    let (wo, wn) = (worst(&ops).unwrap(), worst(&net).unwrap());
    Ok((
        failing == 0 && probed,
        format!(
            "{} op checks, {} network tensors; worst op {} {:.2e}, worst network {} {:.2e}; {failing} over {TOLERANCE:e}",
            ops.len(),
            net.len(),
            wo.name,
            wo.report.max_relative_error,
            wn.name,
            wn.report.max_relative_error
        ),
    ))
}

// ---------------------------------------------------------------- architecture

fn architecture() -> Outcome {
    let rows: [(&str, [usize; 3], [usize; 3]); 15] = [
        ("Conv1_1", [220, 220, 1], [212, 212, 16]),
        ("Conv1_2", [212, 212, 16], [212, 212, 16]),
        ("MaxPool_1", [212, 212, 16], [106, 106, 16]),
        ("Conv2_1", [106, 106, 16], [106, 106, 32]),
        ("Conv2_2", [106, 106, 32], [106, 106, 32]),
        ("MaxPool_2", [106, 106, 32], [53, 53, 32]),
        ("Conv3_1", [53, 53, 32], [53, 53, 64]),
        ("Conv3_2", [53, 53, 64], [53, 53, 64]),
        ("MaxPool_3", [53, 53, 64], [26, 26, 64]),
        ("Conv4_1", [26, 26, 64], [26, 26, 128]),
        ("Conv4_2", [26, 26, 128], [26, 26, 128]),
        ("MaxPool_4", [26, 26, 128], [13, 13, 128]),
        ("fc_1", [13, 13, 128], [1, 1, 512]),
        ("fc_2", [1, 1, 512], [1, 1, 512]),
        ("score", [1, 1, 512], [1, 1, 2]),
    ];
    let spec = NetworkSpec::deadnet();
    let shapes = spec.shapes().map_err(err)?;
    let mut wrong = Vec::new();
    if shapes.len() != rows.len() {
        wrong.push(format!("{} layers", shapes.len()));
    }
    for ((name, input, output), (layer, shape)) in rows.iter().zip(spec.layers.iter().zip(&shapes)) {
        if layer.name != *name || shape.input != *input || shape.output != *output {
            wrong.push(format!("{}: {:?} -> {:?}", layer.name, shape.input, shape.output));
        }
    }
    Ok((wrong.is_empty(), if wrong.is_empty() { "15/15 rows exact".into() } else { wrong.join("; ") }))
}

// ---------------------------------------------------------------- augmentation

fn noise_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    Tensor::from_fn(vec![h, w, 1], |_| rng.random_range(0.0..1.0))
}

fn augmentation() -> Outcome {
    let cfg = AugmentConfig { seed: 5, ..Default::default() };
    let mut a = 0usize;
    for item in pipeline_a(noise_image(1024, 1344, 6), Label::Sick, 1, &cfg).map_err(err)? {
        let item = item.map_err(err)?;
        if item.image.shape() != [256, 256, 1] {
            return Ok((false, format!("crop of shape {:?}", item.image.shape())));
        }
        a += 1;
    }
    let frames: Vec<Tensor> = (0..10).map(|i| noise_image(256, 256, 100 + i)).collect();
    let mut b = 0usize;
    for item in pipeline_b(frames, Label::Healthy, 2, &cfg).map_err(err)? {
        item.map_err(err)?;
        b += 1;
    }
    Ok((a == 2592 && b == 720, format!("pipeline A {a} crops per 1024x1344 image, pipeline B {b} images per sequence")))
}

// ---------------------------------------------------------------- synthetic proxy

fn samples(images: &[SyntheticImage]) -> Vec<Sample> {
    images
        .iter()
        .map(|s| Sample {
            id: s.record.path.display().to_string(),
            image: s.image.clone(),
            label: s.record.label.class_index().expect("labeled"),
        })
        .collect()
}

fn positions(images: &[SyntheticImage]) -> BTreeSet<u64> {
    images.iter().map(|s| s.record.stage_position).collect()
}

fn proxy() -> Outcome {
    let corpus = generate_corpus(&SyntheticSpec { seed: 1, ..Default::default() }, 1000).map_err(err)?;
    let (train, test) = split_by_position(&corpus, 0.2, 3).map_err(err)?;
    if !positions(&train).is_disjoint(&positions(&test)) {
        return Ok((false, "split shares a stage position".into()));
    }
    let cfg = TrainConfig { max_iterations: 3000, batch_size: 20, eval_interval: 0, seed: 7, ..Default::default() };
    let start = Instant::now();
    let (net, _) = train_with(Network::build(NetworkSpec::deadnet64(), 7).map_err(err)?, &samples(&train), &[], &cfg, |_| {})
        .map_err(err)?;
    let trained = start.elapsed();
    let acc = evaluate(&net, &samples(&test)).map_err(err)?.accuracy;
    Ok((
        acc >= 0.95,
        format!(
            "test accuracy {:.4} on {} images ({} train) after 3000 iterations, batch 20, {:.0} s training",
            acc,
            test.len(),
            train.len(),
            trained.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- Grad-CAM

/// Needs at least a 9x9 Conv4_2 map to resolve quadrants, hence the 80 px input.
fn gradcam() -> Outcome {
    let size = 80;
    let spec = SyntheticSpec { seed: 5, quadrant: true, height: size + 8, width: size + 8, ..Default::default() };
    let corpus = generate_corpus(&spec, 300).map_err(err)?;
    let (train, test) = split_by_position(&corpus, 0.2, 3).map_err(err)?;
    let net_spec = NetworkSpec::with_input(size, 2).map_err(err)?;
    let cfg = TrainConfig { max_iterations: 200, eval_interval: 0, seed: 11, ..Default::default() };
    let train_samples = samples(&train);
    let (net, _) = train_with(Network::build(net_spec.clone(), 11).map_err(err)?, &train_samples, &[], &cfg, |_| {})
        .map_err(err)?;

    let layer = deadnet::interpret::DEFAULT_LAYER;
    let per = train_samples
        .iter()
        .filter(|s| s.label == SICK)
        .take(100)
        .map(|s| Ok((s.label, gradcam_weights(&net, &eval_input(&net, &s.image)?, SICK, layer)?.weights)))
        .collect::<deadnet::Result<Vec<_>>>()
        .map_err(err)?;
    let ensemble = ensemble_weights(&per, SICK).map_err(err)?;

    let half = size / 2;
    let (mut fractions, mut negative) = (Vec::new(), 0usize);
    for s in test.iter().filter(|s| s.quadrant.is_some()).take(60) {
        let q = s.quadrant.expect("filtered");
        let gc = gradcam_weights(&net, &eval_input(&net, &s.image).map_err(err)?, SICK, layer).map_err(err)?;
        let map = gradcam_upsample(&net_spec, layer, &gradcam_map(&gc.maps, &ensemble.weights).map_err(err)?).map_err(err)?;
        negative += map.data().iter().filter(|&&v| v < 0.0).count();
        let (mut inside, mut total) = (0.0, 0.0);
        for (i, &v) in map.data().iter().enumerate() {
            total += v;
            if (i / size) / half == q / 2 && (i % size) / half == q % 2 {
                inside += v;
            }
        }
        fractions.push(if total > 0.0 { inside / total } else { 0.25 });
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    Ok((
        mean >= 0.70 && fractions.len() >= 50 && negative == 0,
        format!("mean in-quadrant mass {mean:.3} over {} images, {negative} negative pixels", fractions.len()),
    ))
}

// ---------------------------------------------------------------- class model

fn class_models() -> Outcome {
    let zero = LinearScorer { weights: vec![Tensor::zeros(vec![16, 16, 1]); 2] };
    let cfg = ClassModelConfig { iterations: 200, ..Default::default() };
    let fixed = class_model(&zero, 1, &cfg).map_err(err)?;
    let stays_zero = fixed.image.data().iter().all(|&v| v == 0.0);

    let w = noise_image(12, 10, 7).map(|v| v - 0.5);
    let scorer = LinearScorer { weights: vec![w.map(|v| -v), w.clone()] };
    let cfg = ClassModelConfig { smoothness_penalty: 0.0, ..Default::default() };
    let m = class_model(&scorer, 1, &cfg).map_err(err)?;
    let worst = m
        .image
        .data()
        .iter()
        .zip(w.data())
        .map(|(&got, &wi)| {
            let target = wi as f64 / cfg.l2_penalty;
            (got as f64 - target).abs() / target.abs().max(1e-3)
        })
        .fold(0.0, f64::max);
    Ok((stays_zero && worst <= 0.01, format!("zero fixed point held: {stays_zero}; worst relative gap to w/l2 {worst:.2e}")))
}

// ---------------------------------------------------------------- bootstrap

fn exhaustive_five() -> Vec<f64> {
    let mut means: Vec<f64> = (0..3125usize)
        .map(|code| {
            let (mut c, mut sum) = (code, 0u32);
            for _ in 0..5 {
                sum += (c % 5) as u32 + 1;
                c /= 5;
            }
            sum as f64 / 25.0
        })
        .collect();
    means.sort_by(f64::total_cmp);
    means
}

fn bootstrap() -> Outcome {
    let ones = bootstrap_bca(&[1.0; 100], DEFAULT_RESAMPLES, 0.95, 0).map_err(err)?;
    let degenerate = (ones.lower, ones.upper) == (1.0, 1.0);

    let five = [0.2, 0.4, 0.6, 0.8, 1.0];
    let oracle = [(0.95, 0.32, 0.80), (0.99, 0.28, 0.88)];
    let exact = exhaustive_five();
    let mut gap: f64 = 0.0;
    for (level, lo, hi) in oracle {
        let (el, eh, _) = bca_from_distribution(&exact, 0.6, jackknife_acceleration(&five), level);
        gap = gap.max((el - lo).abs()).max((eh - hi).abs());
        let r = bootstrap_bca(&five, DEFAULT_RESAMPLES, level, 17).map_err(err)?;
        gap = gap.max((r.lower - lo).abs()).max((r.upper - hi).abs());
    }

    let reps = 200u64;
    let mut covered = 0;
    for rep in 0..reps {
        let mut rng = rng_for(1000, &[rep]);
        let mut draw = || (0..1000).map(|_| rng.random_bool(0.8)).collect::<Vec<_>>();
        let (h, s) = (draw(), draw());
        let rates: Vec<f64> =
            batches_from_outcomes(&h, &s, 100, rep).map_err(err)?.iter().map(VirtualBatch::rate).collect();
        let r = bootstrap_bca(&rates, DEFAULT_RESAMPLES, 0.95, rep).map_err(err)?;
        covered += usize::from(r.lower <= 0.8 && 0.8 <= r.upper);
    }
    let coverage = covered as f64 / reps as f64;
    Ok((
        degenerate && gap <= 0.01 && coverage >= 0.90,
        format!("all-correct [{}, {}]; n=5 worst gap {gap:.4}; coverage {covered}/{reps} = {coverage:.3}", ones.lower, ones.upper),
    ))
}

// ---------------------------------------------------------------- annotation

fn catalog(root: &std::path::Path, n: usize) -> Catalog {
    let items = (0..n)
        .map(|i| SequenceItem {
            id: format!("seq{i:04}"),
            frames: (0..10).map(|k| format!("seq{i:04}/{k}.png").into()).collect(),
            stage_position: (i / 2) as u64,
            light_dose: 20.0,
        })
        .collect();
    Catalog::new(items, root).expect("valid catalog")
}

fn rec(annotator: &str, sequence: &str, label: Judgment) -> AnnotationRecord {
    AnnotationRecord { annotator: annotator.into(), sequence: sequence.into(), label, timestamp: String::new(), presentation: 0 }
}

fn ambiguity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let log = dir.path().join("log.jsonl");
    {
        let mut c = Campaign::open(catalog(dir.path(), 263), &log, 0).map_err(err)?;
        for i in 0..263 {
            let s = format!("seq{i:04}");
            c.record(rec("a", &s, Judgment::Sick)).map_err(err)?;
            c.record(rec("b", &s, if i < 49 { Judgment::Healthy } else { Judgment::Sick })).map_err(err)?;
        }
    }
    let k = Campaign::open(catalog(dir.path(), 263), &log, 0).map_err(err)?.concordance();
    let chain = k.chain.ok_or("no report")?;
    let direct = ambiguity_chain(49, 263).map_err(err)?;
    let got = [chain.disagreement_rate, chain.ambiguous_fraction, chain.residual_ambiguous, chain.performance_bound];
    let want = [18.6, 37.2, 22.9, 77.1];
    let ok = (k.overlaps, k.disagreements) == (263, 49)
        && chain == direct
        && got.iter().zip(want).all(|(g, w)| (100.0 * g - w).abs() <= 0.1);
    Ok((ok, format!("{}/{} -> {:.2}% {:.2}% {:.2}% {:.2}%", k.disagreements, k.overlaps, 100.0 * got[0], 100.0 * got[1], 100.0 * got[2], 100.0 * got[3])))
}

fn service() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let log = dir.path().join("log.jsonl");
    let mut c = Campaign::open(catalog(dir.path(), 200), &log, 3).map_err(err)?;
    let mut mismatches = 0;
    for turn in 0..100 {
        let who = ["ana", "ben"][turn % 2];
        let pool_nonempty = c.catalog().iter().any(|s| c.judgments(&s.id).is_some_and(|by| by.keys().any(|a| a != who)));
        let (p, _) = c.next_sequence(who).map_err(err)?;
        let due = p.index % OVERLAP_PERIOD == 0;
        if p.overlap != due || p.fallback || (due && !pool_nonempty) {
            mismatches += 1;
        }
        let seq = p.sequence.clone();
        let label = if seq.ends_with(['1', '3', '5', '7', '9']) { Judgment::Sick } else { Judgment::Healthy };
        c.record(rec(who, &seq, label)).map_err(err)?;
    }
    let before: Vec<_> = c.catalog().iter().map(|s| c.judgments(&s.id).cloned()).collect();
    drop(c);
    let mut f = OpenOptions::new().append(true).open(&log).map_err(err)?;
    f.write_all(br#"{"kind":"annotation","annotator":"ana","sequence":"seq01"#).map_err(err)?;
    drop(f);
    let c = Campaign::open(catalog(dir.path(), 200), &log, 3).map_err(err)?;
    let after: Vec<_> = c.catalog().iter().map(|s| c.judgments(&s.id).cloned()).collect();
    let no_phantoms = before == after && c.record_count() == 100;

    let e = c.export(0.7, 1).map_err(err)?;
    let train: BTreeSet<u64> = e.train.iter().map(|r| r.stage_position).collect();
    let test: BTreeSet<u64> = e.test.iter().map(|r| r.stage_position).collect();
    let disjoint = train.is_disjoint(&test) && !test.is_empty();
    Ok((
        mismatches == 0 && no_phantoms && disjoint,
        format!(
            "{} overlap draws, {mismatches} schedule mismatches; replay intact: {no_phantoms}; export {}+{} frames, split disjoint: {disjoint}",
            c.presentations().iter().filter(|p| p.overlap).count(),
            e.train.len(),
            e.test.len()
        ),
    ))
}

fn main() {
    let criteria = [
        Criterion { name: "gradients", budget: Duration::from_secs(300), run: gradients },
        Criterion { name: "architecture", budget: Duration::from_secs(1), run: architecture },
        Criterion { name: "augmentation", budget: Duration::from_secs(60), run: augmentation },
        Criterion { name: "proxy", budget: Duration::from_secs(1800), run: proxy },
        Criterion { name: "gradcam", budget: Duration::from_secs(300), run: gradcam },
        Criterion { name: "classmodel", budget: Duration::from_secs(60), run: class_models },
        Criterion { name: "bootstrap", budget: Duration::from_secs(600), run: bootstrap },
        Criterion { name: "ambiguity", budget: Duration::from_secs(1), run: ambiguity },
        Criterion { name: "service", budget: Duration::from_secs(60), run: service },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()))) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed <= c.budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:<13} {detail} [{:.1} s of {} s]",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows in plain `cargo test` output) and the test fails
//! if any criterion fails.
//!
//! Criteria 5 and 6 train twenty full-size models and take hours on one
//! core, so they live in the ignored `learning_criteria` test:
//!
//! ```text
//! cargo test --test acceptance -- --ignored
//! ```

mod common;

use std::io::Write as _;
use std::process::Command;
use std::time::{Duration, Instant};

use gesture_vit::io::Dataset;
use gesture_vit::model::{count_params, sweep_grid, GridKind, Model, ModelConfig, Variant};
use gesture_vit::nn::{HeadConvention, ParamStore};
use gesture_vit::radar::{generate_dataset, RadarConfig};
use gesture_vit::tensor::Tensor;
use gesture_vit::train::{
    compute_metrics, cross_entropy, evaluate, make_split, repeat_runs_with, AdamW, AdamWConfig, TrainConfig,
};
use gesture_vit::verify::{check_end_to_end, check_primitives, END_TO_END_TOLERANCE, PRIMITIVE_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Report {
    failures: Vec<usize>,
}

impl Report {
    fn new() -> Self {
        Self { failures: Vec::new() }
    }

    fn run(&mut self, id: usize, title: &str, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failures.push(id);
                ("FAIL", d)
            }
        };
        let line = format!("acceptance {id:>2} {status} {title}: {detail} [{secs:.1} s]\n");
        let _ = std::io::stderr().write_all(line.as_bytes());
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "failed criteria: {:?}", self.failures);
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: f64, what: &str) -> Outcome {
    let s = elapsed.as_secs_f64();
    ensure(s < limit_secs, format!("{what} in {s:.1} s (limit {limit_secs} s)"))
}

fn shape_fidelity() -> Outcome {
    let start = Instant::now();
    let model = Model::<f32>::build(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::from_fn(&[180, 60, 3], |_| rng.random::<f32>());
    let trace = model.trace_shapes(&image).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("input", vec![180, 60, 3]),
        ("encoder.conv1", vec![180, 60, 4]),
        ("encoder.pool1", vec![90, 30, 4]),
        ("encoder.conv2", vec![90, 30, 8]),
        ("encoder.pool2", vec![45, 15, 8]),
        ("encoder.conv3", vec![45, 15, 16]),
        ("encoder.pool3", vec![23, 8, 16]),
        ("encoder.conv4", vec![23, 8, 32]),
        ("encoder.pool4", vec![12, 4, 32]),
        ("encoder.conv5", vec![12, 4, 64]),
        ("encoder.pool5", vec![6, 2, 64]),
        ("decoder.tconv1", vec![12, 4, 64]),
        ("decoder.tconv2", vec![24, 8, 64]),
        ("attention.patches", vec![12, 1024]),
        ("attention.embedding", vec![12, 16]),
        ("attention.layer0", vec![12, 16]),
        ("attention.layer1", vec![12, 16]),
        ("attention.layer2", vec![12, 16]),
        ("features", vec![192]),
        ("logits", vec![14]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    if got != expected {
        return Err(format!("trace {got:?}"));
    }
    within(elapsed, 1.0, &format!("{} shapes match", expected.len()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut results = check_primitives(20).map_err(|e| e.to_string())?;
    results.push(check_end_to_end(Variant::Full, 20).map_err(|e| e.to_string())?);
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_error))
        .collect();
    if !failed.is_empty() {
        return Err(format!("failed: {}", failed.join(", ")));
    }
    let prim = results[..results.len() - 1].iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let e2e = results[results.len() - 1].max_rel_error;
    within(
        elapsed,
        120.0,
        &format!(
            "20 seeds, primitives max {prim:.2e} < {PRIMITIVE_TOLERANCE:.0e}, end-to-end max {e2e:.2e} < {END_TO_END_TOLERANCE:.0e}"
        ),
    )
}

fn parameter_counting() -> Outcome {
    let mut notes = Vec::new();
    let mut checked = 0;
    for conv in [HeadConvention::SplitDk, HeadConvention::WholeDk] {
        let mut base = ModelConfig::default();
        base.attention.head_convention = conv;
        for kind in [GridKind::PatchDim, GridKind::Depth] {
            for entry in sweep_grid(kind, &base) {
                let (total, trainable) = count_params(&entry.config).map_err(|e| e.to_string())?;
                let oracle = common::closed_form_params(&entry.config);
                if total != oracle || trainable != total {
                    return Err(format!("{} {}: counted {total}, oracle {oracle}", conv.as_str(), entry.label));
                }
                checked += 1;
            }
        }

        let (full, _) = count_params(&base).map_err(|e| e.to_string())?;
        let reference = common::REFERENCE_FULL_PARAMS as f64;
        let deviation = (full as f64 - reference) / reference * 100.0;
        if deviation.abs() > 2.0 {
            return Err(format!("{}: {full} deviates {deviation:+.2}% from {reference}", conv.as_str()));
        }

        let depth: Vec<usize> = sweep_grid(GridKind::Depth, &base)
            .iter()
            .map(|e| count_params(&e.config).map(|c| c.0))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let steps: Vec<usize> = depth.windows(2).map(|w| w[1] - w[0]).collect();
        if steps.iter().any(|&s| s != steps[0]) {
            return Err(format!("{}: depth increments vary {steps:?}", conv.as_str()));
        }
        if conv == HeadConvention::WholeDk && steps[0] != common::REFERENCE_LAYER_INCREMENT {
            return Err(format!("whole_dk increment {} ≠ {}", steps[0], common::REFERENCE_LAYER_INCREMENT));
        }
        notes.push(format!("{} full {full} ({deviation:+.2}%), +{}/layer", conv.as_str(), steps[0]));
    }
    Ok(format!("{checked} grid configs exact; {}", notes.join("; ")))
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(5, &RadarConfig::default(), 11).map_err(|e| e.to_string())?;
    let batch: Vec<usize> = (0..64).collect();
    let data = data.subset(&batch).map_err(|e| e.to_string())?;
    let images: Vec<&Tensor<f32>> = data.images().iter().collect();
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    let mut model = Model::<f32>::build(&ModelConfig::default().with_seed(1)).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(AdamWConfig::default(), model.store());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for epoch in 1..=300 {
        model.store_mut().zero_grads();
        let (logits, cache) = model.forward(&images, true, &mut rng).map_err(|e| e.to_string())?;
        let (_, grad) = cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
        model.backward(&cache, &grad, false).map_err(|e| e.to_string())?;
        opt.step(model.store_mut()).map_err(|e| e.to_string())?;
        let acc = evaluate(&model, &data).map_err(|e| e.to_string())?.accuracy;
        if acc == 1.0 {
            return within(start.elapsed(), 300.0, &format!("100% training accuracy after {epoch} epochs"));
        }
    }
    Err("training accuracy below 100% after 300 epochs".into())
}

fn adamw_oracle() -> Outcome {
    let cfg = AdamWConfig::default();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let theta: f64 = rng.random_range(-3.0..3.0);
        let g: f64 = rng.random_range(-3.0..3.0);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[1], theta), true).map_err(|e| e.to_string())?;
        store.accumulate(id, &Tensor::full(&[1], g)).map_err(|e| e.to_string())?;
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store).map_err(|e| e.to_string())?;
        // Fresh moments: m = (1−β₁)g, v = (1−β₂)g², bias-corrected back to g, g².
        let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expected = theta - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta);
        worst = worst.max((store.value(id).data()[0] - expected).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.1e} over 100 scalar steps"))
}

/// Confusion matrix and macro scores by direct counting.
fn brute_force_metrics(preds: &[usize], labels: &[usize], classes: usize) -> (Vec<Vec<u64>>, f64, f64, f64, f64) {
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut correct = 0usize;
    for t in 0..classes {
        for p in 0..classes {
            confusion[t][p] = preds.iter().zip(labels).filter(|&(&a, &b)| a == p && b == t).count() as u64;
        }
    }
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|&(&a, &b)| a == c && b == c).count();
        correct += tp;
        let predicted = preds.iter().filter(|&&a| a == c).count();
        let actual = labels.iter().filter(|&&b| b == c).count();
        let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        precision += p;
        recall += r;
        f1 += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let k = classes as f64;
    (confusion, correct as f64 / preds.len() as f64, precision / k, recall / k, f1 / k)
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        // Bias predictions toward the label so every score is non-trivial.
        let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..14)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..14) })
            .collect();
        let m = compute_metrics(&preds, &labels, 14).map_err(|e| e.to_string())?;
        let (confusion, acc, p, r, f1) = brute_force_metrics(&preds, &labels, 14);
        if m.confusion != confusion || m.accuracy != acc {
            return Err(format!("trial {trial}: confusion or accuracy differs"));
        }
        for (a, b) in [(m.macro_precision, p), (m.macro_recall, r), (m.macro_f1, f1)] {
            worst = worst.max((a - b).abs());
        }
    }
    if worst != 0.0 {
        return Err(format!("macro scores differ by {worst:.1e}"));
    }
    let labels: Vec<usize> = (0..14).collect();
    let (loss, _) = cross_entropy(&Tensor::<f64>::zeros(&[14, 14]), &labels).map_err(|e| e.to_string())?;
    let gap = (loss - 14f64.ln()).abs();
    ensure(
        gap < 1e-9,
        format!("10×1000 pairs identical to brute force; uniform loss off ln 14 by {gap:.1e}"),
    )
}

fn simulator_physics() -> Outcome {
    let bins = common::doppler_ridge_error_bins(100, 2024);
    let deg = common::aoa_error_deg();
    ensure(
        bins <= 1.0 && deg < 1.0,
        format!("Doppler ridge within {bins:.3} bins (100 velocities), angle within {deg:.3}° for |θ| ≤ 60°"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exe = env!("CARGO_BIN_EXE_gesture-vit");
    let data = dir.path().join("d.bin");
    let data_s = data.display().to_string();
    let status = Command::new(exe)
        .args(["gen-data", "--out", &data_s, "--samples-per-class", "3", "--seed", "10"])
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let ckpt = dir.path().join(format!("{name}.ckpt")).display().to_string();
        let history = dir.path().join(format!("{name}.csv")).display().to_string();
        let out = Command::new(exe)
            .args([
                "train", "--data", &data_s, "--out-checkpoint", &ckpt, "--history", &history, "--epochs", "3",
                "--batch", "8", "--seed", "42",
            ])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        let read = |p: &str| std::fs::read(p).map_err(|e| format!("{p}: {e}"));
        outputs.push((read(&ckpt)?, read(&history)?));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    ensure(
        a.0 == b.0 && a.1 == b.1,
        format!("two runs: checkpoints ({} bytes) and histories compared byte for byte", a.0.len()),
    )
}

#[test]
fn acceptance_criteria() {
    let mut report = Report::new();
    report.run(1, "shape fidelity", shape_fidelity);
    report.run(2, "gradient suite", gradient_suite);
    report.run(3, "parameter counting", parameter_counting);
    report.run(4, "overfit sanity", overfit_sanity);
    report.run(7, "AdamW oracle", adamw_oracle);
    report.run(8, "metrics oracle", metrics_oracle);
    report.run(9, "simulator physics", simulator_physics);
    report.run(10, "determinism", determinism);
    let _ = std::io::stderr().write_all(b"acceptance  5 and 6 run with `-- --ignored` (learning_criteria)\n");
    report.finish();
}

fn synthetic_split() -> (Dataset<f32>, Dataset<f32>) {
    let data = generate_dataset(100, &RadarConfig::default(), 7).expect("dataset");
    let plan = make_split(data.labels(), &mut ChaCha8Rng::seed_from_u64(7)).expect("split");
    (data.subset(&plan.train).unwrap(), data.subset(&plan.test).unwrap())
}

#[test]
#[ignore = "trains twenty full-size models; run explicitly"]
fn learning_criteria() {
    let (train_set, test_set) = synthetic_split();
    let cfg = TrainConfig::default();
    let log = |s: String| {
        let _ = std::io::stderr().write_all(format!("{s}\n").as_bytes());
    };
    let mut report = Report::new();
    let mut means = std::collections::BTreeMap::new();
    for variant in [Variant::Full, Variant::EncoderAttention, Variant::EncoderOnly, Variant::AttentionOnly] {
        let config = ModelConfig::for_variant(variant).with_seed(1);
        let mut last = Instant::now();
        let mut times = Vec::new();
        let runs = repeat_runs_with(&config, &train_set, &test_set, 5, &cfg, |i, m| {
            let t = last.elapsed();
            last = Instant::now();
            log(format!("  {} run {i}: test accuracy {:.4} in {:.0} s", variant.as_str(), m.accuracy, t.as_secs_f64()));
            times.push(t);
        })
        .expect("repeat runs");
        means.insert(variant.as_str(), runs.accuracy.mean);
        if variant == Variant::Full {
            let first = runs.accuracy.runs[0];
            let secs = times[0].as_secs_f64();
            let std_points = runs.accuracy.std * 100.0;
            report.run(5, "synthetic end-to-end", || {
                ensure(
                    first >= 0.9 && secs < 1800.0 && std_points < 3.0,
                    format!(
                        "first run {:.2}% in {secs:.0} s, 5 runs {:.2} ± {std_points:.2} points",
                        first * 100.0,
                        runs.accuracy.mean * 100.0
                    ),
                )
            });
        }
    }
    report.run(6, "ablation direction", || {
        let (full, ea, eo, ao) = (
            means["full"],
            means["encoder_attention"],
            means["encoder_only"],
            means["attention_only"],
        );
        ensure(
            full >= ea && eo >= ao,
            format!(
                "means: full {:.2}%, encoder+attention {:.2}%, encoder-only {:.2}%, attention-only {:.2}%",
                full * 100.0,
                ea * 100.0,
                eo * 100.0,
                ao * 100.0
            ),
        )
    });
    report.finish();
}

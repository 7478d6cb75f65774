//! Acceptance suite: one check per acceptance criterion, each printing a
//! `criterion N: PASS|FAIL` line. The single test fails if any criterion does.
//!
//! Criteria 7–9 train real models and take most of the runtime; run with
//! `cargo test --release -p c2e --test acceptance -- --nocapture` to see the
//! lines as they complete. `C2E_CRITERIA=1,2,3` runs only the listed ones.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use c2e::checkpoint::Checkpoint;
use c2e::data::{save_png, synth_dataset, LabeledImages, SynthKind};
use c2e::info::*;
use c2e::ingest::{dedup, hamming, FrameManifest};
use c2e::nn::Graph;
use c2e::patch::plan_mask;
use c2e::probe::{extract_features, group_split, linear_probe, make_fewshot_splits, read_pgm};
use c2e::train::{RunOptions, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use c2e::*;
use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let mut worst_op = ("", 0f64);
    for case in op_cases() {
        let err = grad_check(|t, v| (case.f)(t, v), &case.input, 1e-5).unwrap();
        if err > worst_op.1 {
            worst_op = (case.name, err);
        }
    }
    let mut worst_e2e = (String::new(), 0f64);
    for arch in [Arch::C2e, Arch::Vit] {
        let e2e = EndToEnd::new(arch);
        assert_eq!(e2e.num_tokens(), 4);
        for (name, err) in e2e.errors(1e-4) {
            if err > worst_e2e.1 {
                worst_e2e = (format!("{arch:?}:{name}"), err);
            }
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        worst_op.1 < 1e-4 && worst_e2e.1 < 1e-3 && within(elapsed, Duration::from_secs(60)),
        format!(
            "worst op {} {:.1e} (< 1e-4), worst end-to-end {} {:.1e} (< 1e-3), {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_e2e.0,
            worst_e2e.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn entropy_oracle() -> Outcome {
    let unit = gaussian_entropy(&Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(), 0.0).unwrap().entropy;
    let signs = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
    let iden = gaussian_entropy(&signs, 0.0).unwrap().entropy;
    let pi = std::f64::consts::PI;
    let closed_err = (unit - 0.5 * (2.0 * pi * std::f64::consts::E).ln())
        .abs()
        .max((iden - (1.0 + (2.0 * pi).ln())).abs());
    let printed_err = (unit - 1.418939).abs().max((iden - 2.837877).abs());

    let mut worst_rel = 0f64;
    for seed in 0..10 {
        let z = randn(&[12, 4], 20 + seed);
        let exact = exact_entropy_gradient(&z, 0.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(z.clone());
        let zt = tape.transpose(x).unwrap();
        let gram = tape.matmul(zt, x).unwrap();
        let ld = tape.logdet(gram, 0.0).unwrap();
        let obj = tape.scale(ld, -0.5);
        let auto = tape.backward(obj).get(x).unwrap();
        let scale = auto.data().iter().fold(0f64, |m, v| m.max(v.abs()));
        worst_rel = worst_rel.max(exact.max_abs_diff(&auto) / scale);
    }
    outcome(
        closed_err < 1e-9 && printed_err < 1e-6 && worst_rel < 1e-6,
        format!(
            "H(unit 1-D) = {unit:.9}, H(I2) = {iden:.9}, closed-form error {closed_err:.1e} (< 1e-9), \
             gradient vs autodiff {worst_rel:.1e} (< 1e-6)"
        ),
    )
}

fn monotone_ascent() -> Outcome {
    let t0 = Instant::now();
    let mut monotone = 0;
    for seed in 0..100 {
        let mut z = randn(&[20, 6], 1000 + seed);
        let mut prev = compression_objective(&z).unwrap();
        let mut ok = true;
        for _ in 0..10 {
            let g = exact_entropy_gradient(&z, 0.0).unwrap();
            z = z.add(&g.scale(1e-2)).unwrap();
            let next = compression_objective(&z).unwrap();
            ok &= next > prev;
            prev = next;
        }
        monotone += usize::from(ok);
    }
    let elapsed = t0.elapsed();
    outcome(
        monotone == 100 && within(elapsed, Duration::from_secs(10)),
        format!("{monotone}/100 seeds strictly monotone, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn concavity() -> Outcome {
    let mut rng = Rng::new(77);
    let mut holds = 0;
    for k in 0..500 {
        let n = 2 + k % 7;
        let mut pd = || {
            let a = Tensor::from_fn(&[n, n], |_| rng.normal());
            a.matmul(&a.transpose().unwrap()).unwrap().add(&Tensor::eye(n).scale(0.1)).unwrap()
        };
        let (x, y) = (pd(), pd());
        holds += usize::from(concavity_probe(&x, &y).unwrap());
    }
    outcome(holds == 500, format!("{holds}/500 PD pairs, dims 2-8"))
}

fn temperature_invariance() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for ratio in [0.25, 0.5, 0.75] {
        let (cut, before, after) = temperature_channel_grads(ratio);
        pass &= after == 0.0 && before > 0.0;
        parts.push(format!("ratio {ratio}: cut {cut}, max grad past cut {after:e}, before {before:.1e}"));
    }
    outcome(pass, parts.join("; "))
}

fn langevin_contract() -> Outcome {
    let eps = 0.01;
    let (_, var) = added_noise_moments(100_000, eps, 12);
    let rel = (var / (2.0 * eps) - 1.0).abs();
    let images = uniform(&[2, 32, 32, 3], 5, 0.0, 1.0);
    let run = || {
        let model = C2eModel::new(&C2eConfig::default()).unwrap();
        let pb = model.patchify(&images).unwrap();
        let mut rng = Rng::new(3);
        let plans: Vec<MaskPlan> = (0..2).map(|_| plan_mask(16, 0.75, &mut rng).unwrap()).collect();
        let mut g = Graph::frozen(&model.params);
        let out = model.forward(&mut g, &pb, &plans, None).unwrap();
        g.value(out.dec.pred).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let deterministic = run() == run();
    outcome(
        rel < 0.1 && deterministic,
        format!("noise variance {var:.5} vs 2eps {:.5} ({:.1}% off, < 10%), noise-off decode bit-identical: {deterministic}", 2.0 * eps, rel * 100.0),
    )
}

fn desk_scale_learning() -> Outcome {
    let t0 = Instant::now();
    let cfg = C2eConfig {
        steps: 200,
        ..C2eConfig::default()
    };
    let train = synth_dataset(SynthKind::Textures, 1024, 1).unwrap();
    let eval = synth_dataset(SynthKind::Textures, 64, 99).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    let pb = t.model.patchify(&eval.images).unwrap();
    let mut rng = Rng::new(5);
    let plans: Vec<MaskPlan> = (0..64).map(|_| plan_mask(16, cfg.mask_ratio, &mut rng).unwrap()).collect();
    let initial = t.model.eval_loss(&pb, &plans).unwrap();
    t.run(&train, &RunOptions::default()).unwrap();
    let last = t.model.eval_loss(&pb, &plans).unwrap();
    let elapsed = t0.elapsed();
    outcome(
        last <= 0.5 * initial && within(elapsed, Duration::from_secs(600)),
        format!(
            "held-out masked L1 {initial:.4} -> {last:.4} (ratio {:.3}, <= 0.5), {:.0}s",
            last / initial,
            elapsed.as_secs_f64()
        ),
    )
}

fn probe_accuracy(model: &C2eModel, probe: &LabeledImages, split_seed: u64) -> f64 {
    let f = extract_features(model, &probe.images).unwrap();
    let groups: Vec<usize> = (0..probe.len()).collect();
    let split = group_split(&groups, 0.25, split_seed).unwrap();
    linear_probe("shapes", &f, &probe.labels, &groups, &split, split_seed).unwrap().accuracy
}

/// Mean distance between class centroids over mean distance of a feature to
/// its own class centroid.
fn separation_ratio(f: &Tensor, labels: &[usize], classes: usize) -> f64 {
    let c = f.cols();
    let mut means = vec![vec![0.0; c]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        means[l].iter_mut().zip(f.row(i)).for_each(|(m, v)| *m += v);
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let within = labels.iter().enumerate().map(|(i, &l)| dist(f.row(i), &means[l])).sum::<f64>() / labels.len() as f64;
    let mut between = 0.0;
    let mut pairs = 0;
    for a in 0..classes {
        for b in a + 1..classes {
            between += dist(&means[a], &means[b]);
            pairs += 1;
        }
    }
    between / pairs as f64 / within
}

const PRETRAIN_STEPS: u64 = 3000;

fn pretrain(cfg: &C2eConfig, data: &LabeledImages) -> C2eModel {
    let mut t = Trainer::new(cfg).unwrap();
    t.run(data, &RunOptions::default()).unwrap();
    t.model
}

fn representation_benefit() -> Outcome {
    let t0 = Instant::now();
    let probe = synth_dataset(SynthKind::Shapes, 800, 7).unwrap();
    let (mut c2e, mut rand, mut vit, mut sep) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let pre = synth_dataset(SynthKind::Shapes, 2000, 1000 + seed).unwrap();
        let cfg = C2eConfig {
            seed,
            steps: PRETRAIN_STEPS,
            ..C2eConfig::default()
        };
        let trained = pretrain(&cfg, &pre);
        c2e.push(probe_accuracy(&trained, &probe, seed));
        let f = extract_features(&trained, &probe.images).unwrap();
        sep.push(separation_ratio(&f, &probe.labels, 4));
        rand.push(probe_accuracy(&C2eModel::new(&cfg).unwrap(), &probe, seed));
        let vit_model = pretrain(&C2eConfig { arch: Arch::Vit, ..cfg }, &pre);
        vit.push(probe_accuracy(&vit_model, &probe, seed));
        eprintln!(
            "  seed {seed}: c2e {:.3} random {:.3} vit {:.3} separation {:.2} ({:.0}s)",
            c2e[seed as usize],
            rand[seed as usize],
            vit[seed as usize],
            sep[seed as usize],
            t0.elapsed().as_secs_f64()
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mc, mr, mv) = (mean(&c2e), mean(&rand), mean(&vit));
    let elapsed = t0.elapsed();
    let checks = [
        (mc >= 0.90, "c2e >= 0.90"),
        (mc - mr >= 0.10, "c2e - random >= 0.10"),
        (mc >= mv - 0.02, "c2e >= vit - 0.02"),
        (within(elapsed, Duration::from_secs(1800)), "runtime < 30 min"),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(ok, _)| !ok).map(|(_, n)| *n).collect();
    outcome(
        failed.is_empty(),
        format!(
            "mean probe accuracy over 3 seeds: c2e {mc:.3}, random init {mr:.3}, vit {mv:.3}; \
             c2e between/within class distance {:.2}; {:.0}s{}",
            mean(&sep),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn fewshot_harness() -> Outcome {
    let t0 = Instant::now();
    let pre = synth_dataset(SynthKind::Phases, 2000, 500).unwrap();
    let eval = synth_dataset(SynthKind::Phases, 300, 9).unwrap();
    let cfg = C2eConfig {
        steps: PRETRAIN_STEPS,
        ..C2eConfig::default()
    };
    let trained = pretrain(&cfg, &pre);
    let f_pre = extract_features(&trained, &eval.images).unwrap();
    let f_rand = extract_features(&C2eModel::new(&cfg).unwrap(), &eval.images).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for k in [2, 8] {
        for split in make_fewshot_splits(&eval.groups, k, &[0, 1, 2]).unwrap() {
            // Leakage-free by construction and asserted again here.
            split.split.check_disjoint(&eval.groups).unwrap();
            assert!(split.train_groups.iter().all(|g| !split.test_groups.contains(g)));
            let acc = |f: &Tensor| {
                linear_probe("phases", f, &eval.labels, &eval.groups, &split.split, split.seed)
                    .unwrap()
                    .accuracy
            };
            let (a, b) = (acc(&f_pre), acc(&f_rand));
            pass &= a >= b;
            parts.push(format!("k{k}/s{}: {a:.3} vs {b:.3}", split.seed));
        }
    }
    outcome(
        pass,
        format!("pretrained vs random init per split: {} ({:.0}s)", parts.join(", "), t0.elapsed().as_secs_f64()),
    )
}

fn reproducibility() -> Outcome {
    let cfg = C2eConfig {
        steps: 10,
        log_every: 1,
        checkpoint_every: 5,
        image_size: 32,
        ..tiny_cfg()
    };
    let data = synth_dataset(SynthKind::Textures, 16, 0).unwrap();
    let run = |dir: &Path, c: &C2eConfig| {
        let mut t = Trainer::new(c).unwrap();
        t.run(
            &data,
            &RunOptions {
                out_dir: Some(dir.to_path_buf()),
                record_time: false,
            },
        )
        .unwrap();
        t
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run(a.path(), &cfg);
    run(b.path(), &cfg);
    let csv_identical = fs::read(a.path().join(METRICS_FILE)).unwrap() == fs::read(b.path().join(METRICS_FILE)).unwrap();

    let loaded = Checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap();
    let model = loaded.to_model().unwrap();
    let pb = model.patchify(&uniform(&[2, 32, 32, 3], 4, 0.0, 1.0)).unwrap();
    let plans = [plan_mask(16, 0.5, &mut Rng::new(1)).unwrap()];
    let round_trip = loaded == ta.checkpoint()
        && model.eval_loss(&pb, &plans).unwrap().to_bits() == ta.model.eval_loss(&pb, &plans).unwrap().to_bits();

    let mid = Checkpoint::load(&a.path().join("checkpoint_000005.c2e")).unwrap();
    let mut resumed = Trainer::from_checkpoint(&mid).unwrap();
    resumed.run(&data, &RunOptions::default()).unwrap();
    let resume_equal = resumed.checkpoint() == ta.checkpoint();
    outcome(
        round_trip && csv_identical && resume_equal,
        format!("checkpoint round-trip bit-exact: {round_trip}; metrics CSV identical: {csv_identical}; resume equals uninterrupted: {resume_equal}"),
    )
}

fn cli(args: &[&str]) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_c2e")).args(args).arg("--json").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn pipeline_smoke() -> Outcome {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    // Frame folders with every fourth frame repeated.
    let video = synth_dataset(SynthKind::Phases, 200, 3).unwrap();
    let per = 32 * 32 * 3;
    let frames = root.join("frames");
    let mut written = 0;
    for i in 0..video.len() {
        let dir = frames.join(format!("video_{:02}", video.groups[i]));
        fs::create_dir_all(&dir).unwrap();
        let px = &video.images.data()[i * per..(i + 1) * per];
        save_png(&dir.join(format!("frame_{i:04}a.png")), px, 32, 32).unwrap();
        if i % 4 == 0 {
            save_png(&dir.join(format!("frame_{i:04}b.png")), px, 32, 32).unwrap();
        }
        written += 1 + usize::from(i % 4 == 0);
    }
    let ingest = root.join("ingest");
    let v = cli(&["ingest", "--input", &s(&frames), "--exclude", "video_09", "--out", &s(&ingest)]);
    let manifest_path = ingest.join("manifest.csv");
    let manifest = FrameManifest::read_csv(&manifest_path).unwrap();
    let threshold = manifest.threshold.unwrap();
    let idempotent = dedup(&manifest, threshold) == manifest;
    let kept: Vec<_> = manifest.kept().collect();
    let mut violations = 0;
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            violations += usize::from(a.group == b.group && hamming(a.hash, b.hash) <= threshold);
        }
    }
    let excluded_absent = manifest.entries.iter().all(|e| e.group != "video_09");

    let cfg = root.join("cfg.json");
    fs::write(&cfg, r#"{"steps": 20, "log_every": 5}"#).unwrap();
    let run = root.join("run");
    cli(&["pretrain", "--config", &s(&cfg), "--data", &s(&manifest_path), "--out", &s(&run), "--no-timing"]);
    let ckpt = run.join(CHECKPOINT_FILE);

    let labeled = root.join("phases");
    cli(&["synth", "--kind", "phases", "--n", "120", "--seed", "4", "--out", &s(&labeled)]);
    let probe = cli(&["probe", "--ckpt", &s(&ckpt), "--data", &s(&labeled), "--out", &s(&root.join("probe"))]);
    let accuracy = probe["report"]["accuracy"].as_f64().unwrap();

    let emb_dir = root.join("emb");
    cli(&["export-embeddings", "--ckpt", &s(&ckpt), "--data", &s(&labeled), "--out", &s(&emb_dir)]);
    let mut reader = csv::Reader::from_path(emb_dir.join("embeddings.csv")).unwrap();
    let header_ok = reader.headers().unwrap().len() == 32 + 1;
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let csv_ok = header_ok
        && rows.len() == 120
        && rows.iter().all(|r| r.len() == 33 && r.iter().skip(1).all(|x| x.parse::<f64>().is_ok_and(f64::is_finite)));

    let attn_dir = root.join("attn");
    let attn = cli(&["export-attention", "--ckpt", &s(&ckpt), "--data", &s(&labeled), "--layer", "2", "--out", &s(&attn_dir)]);
    let heads = attn["heads"].as_array().unwrap();
    let pgm_ok = heads.len() == 4
        && (0..4).all(|h| {
            read_pgm(&attn_dir.join(format!("attention_l2_head{h}.pgm"))).is_ok_and(|(w, hgt, px)| w == 4 && hgt == 4 && px.len() == 16)
        });

    let elapsed = t0.elapsed();
    let pass = idempotent
        && violations == 0
        && excluded_absent
        && csv_ok
        && pgm_ok
        && (0.0..=1.0).contains(&accuracy)
        && within(elapsed, Duration::from_secs(1200));
    outcome(
        pass,
        format!(
            "{written} frames -> {} kept after dedup; idempotent {idempotent}; threshold violations {violations}; \
             holdout absent {excluded_absent}; embeddings CSV ok {csv_ok}; {} PGM heads ok {pgm_ok}; \
             probe accuracy {accuracy:.3}; {:.0}s",
            v["kept"],
            heads.len(),
            elapsed.as_secs_f64()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "entropy oracle", entropy_oracle),
        (3, "monotone compression ascent", monotone_ascent),
        (4, "log-det concavity", concavity),
        (5, "temperature channel invariance", temperature_invariance),
        (6, "Langevin contract", langevin_contract),
        (7, "desk-scale learning", desk_scale_learning),
        (8, "representation benefit", representation_benefit),
        (9, "few-shot harness", fewshot_harness),
        (10, "reproducibility", reproducibility),
        (11, "pipeline smoke", pipeline_smoke),
    ];
    let only: Option<Vec<u32>> = std::env::var("C2E_CRITERIA")
        .ok()
        .map(|v| v.split(',').map(|n| n.trim().parse().expect("C2E_CRITERIA lists criterion numbers")).collect());
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let o = check();
        println!("criterion {n}: {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

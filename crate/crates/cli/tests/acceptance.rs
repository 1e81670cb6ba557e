//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanet::autograd::NormMode;
use spanet::data::{generate_synthetic, SynthConfig};
use spanet::gradcheck::{block_suite, loss_suite};
use spanet::groundtruth::{detection_gt, positional_gt, DEFAULT_BETA, DEFAULT_RADIUS};
use spanet::maps::InstanceLabelMap;
use spanet::metrics::{aji, f1_instances, MetricsReport};
use spanet::networks::{NetworkConfig, SpaNet, DEFAULT_DILATIONS, DEFAULT_KERNELS};
use spanet::blocks::MsbConfig;
use spanet::postproc::{default_gamma, instance_segment, spectral_cluster, PostConfig};
use spanet::training::{cyclic_lr, swa_average, SwaSchedule};
use spanet::Tensor;
use spanet_cli::commands::{cmd_eval, cmd_infer, cmd_params, cmd_synth, cmd_train, SWA_CHECKPOINT};
use spanet_cli::config::{RunConfig, Stage};

type Outcome = (bool, String);

fn receptive_fields() -> Outcome {
    let rf = |k, d| MsbConfig { channels: 1, kernels: k, dilations: d }.receptive_fields();
    let (a, b) = (rf(DEFAULT_KERNELS[0], DEFAULT_DILATIONS[0]), rf(DEFAULT_KERNELS[3], DEFAULT_DILATIONS[3]));
    (a == [3, 9, 25, 49] && b == [3, 5, 9, 13], format!("{a:?} {b:?}"))
}

fn random_nucleus(rng: &mut ChaCha8Rng) -> InstanceLabelMap {
    let (h, w) = (rng.random_range(16..40), rng.random_range(16..40));
    let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    let (a, b) = (rng.random_range(2.0..9.0), rng.random_range(2.0..9.0));
    let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let mut m = InstanceLabelMap::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (dx * t.cos() + dy * t.sin(), -dx * t.sin() + dy * t.cos());
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                m.set(y, x, 1);
            }
        }
    }
    m
}

fn detection_maps() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut layouts, mut worst, mut exact) = (0, 0.0f64, true);
    while layouts < 50 {
        let m = random_nucleus(&mut rng);
        if m.instance_count() == 0 {
            continue;
        }
        layouts += 1;
        let det = detection_gt(&m, DEFAULT_BETA, DEFAULT_RADIUS).unwrap();
        let (cx, cy) = m.geometry()[0].centroid;
        let (ax, ay) = (cx.round(), cy.round());
        for y in 0..m.height() {
            for x in 0..m.width() {
                let got = det.get(y, x);
                worst = worst.max((got - oracles::detection_value(&m, DEFAULT_BETA, DEFAULT_RADIUS, y, x)).abs());
                let d = (x as f64 - ax).hypot(y as f64 - ay);
                exact &= (d != 0.0 || got == 1.0) && (d <= DEFAULT_RADIUS || got == 0.0);
            }
        }
    }
    (worst <= 1e-12 && exact, format!("{layouts} layouts, max |diff| {worst:.1e}, centroid/outside exact: {exact}"))
}

fn gradients() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (mode, seed) in [(NormMode::Running, 31), (NormMode::Batch, 32)] {
        for (name, r) in block_suite(mode, 1e-5, seed).unwrap() {
            ok &= r.max_rel_err < 1e-3;
            parts.push(format!("{name}/{mode:?} {:.1e}", r.max_rel_err));
        }
    }
    let mut loss_worst = std::collections::BTreeMap::new();
    for seed in 0..5 {
        for (name, err) in loss_suite(1e-6, seed).unwrap() {
            let w = loss_worst.entry(name).or_insert(0.0f64);
            *w = w.max(err);
        }
    }
    for (name, err) in loss_worst {
        ok &= err < 1e-4;
        parts.push(format!("{name} {err:.1e}"));
    }
    (ok, parts.join(", "))
}

fn schedule_and_swa() -> Outcome {
    let s = SwaSchedule::default();
    let lrs = [cyclic_lr(1, &s), cyclic_lr(20, &s), cyclic_lr(21, &s)];
    let lr_ok = lrs == [0.009505, 0.0001, 0.009505];
    let cfg = NetworkConfig::uniform(2, 4, 4, 4, 1, 0.5).with_io(3, 1, spanet::networks::HeadKind::Dual);
    let net = SpaNet::new(cfg).unwrap();
    let snaps: Vec<_> = (0..5).map(|i| net.init_weights(500 + i)).collect();
    let avg = swa_average(&snaps).unwrap();
    let mut worst = 0.0f64;
    for (name, t) in &avg.params {
        let cols: Vec<Vec<f64>> = snaps.iter().map(|w| w.params[name].data().to_vec()).collect();
        for (a, b) in t.data().iter().zip(oracles::mean_of(&cols)) {
            worst = worst.max((a - b).abs());
        }
    }
    (lr_ok && worst <= 1e-12, format!("lr {lrs:?}, swa max |diff| {worst:.1e}"))
}

fn ideal_and_spectral() -> Outcome {
    let mut total = 0.0;
    for seed in 0..100 {
        let (s, _) = generate_synthetic(&SynthConfig { seed, ..Default::default() }, "ideal").unwrap();
        let (h, w) = s.instances.dims();
        let seg = Tensor::from_vec(&[1, h, w], s.instances.data().iter().map(|&v| f64::from(u8::from(v > 0))).collect()).unwrap();
        let det = detection_gt(&s.instances, DEFAULT_BETA, DEFAULT_RADIUS).unwrap();
        let det = Tensor::from_vec(&[1, h, w], det.0.into_data()).unwrap();
        let emb = positional_gt(&s.instances).values;
        let out = instance_segment(&seg, &det, &emb, &PostConfig::default()).unwrap();
        total += aji(&s.instances, &out).unwrap();
    }
    let mean = total / 100.0;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut cases, mut agree) = (0, 0);
    for n in 2..=12 {
        for _ in 0..10 {
            let centre = |rng: &mut ChaCha8Rng| -> [f64; 6] { std::array::from_fn(|_| rng.random_range(0.0..1.0)) };
            let (a, mut b) = (centre(&mut rng), centre(&mut rng));
            while a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() < 0.25 {
                b = centre(&mut rng);
            }
            let pts: Vec<[f64; 6]> = (0..n)
                .map(|_| {
                    let c = if rng.random_bool(0.5) { a } else { b };
                    std::array::from_fn(|k| c[k] + rng.random_range(-0.02..0.02))
                })
                .collect();
            let want = oracles::min_ncut_partition(&pts, default_gamma(&pts));
            let got = spectral_cluster(&pts, 2, None, cases as u64).unwrap();
            agree += usize::from(oracles::canonical_labels(&got) == want);
            cases += 1;
        }
    }
    (mean >= 0.99 && agree == cases, format!("ideal mean AJI {mean:.4}, spectral = exhaustive ncut on {agree}/{cases}"))
}

fn metrics_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut cases, mut agree) = (0, 0);
    for _ in 0..300 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut draw = || InstanceLabelMap::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let (gt, pred) = (draw(), draw());
        let s = f1_instances(&gt, &pred, 0.5).unwrap();
        let same = aji(&gt, &pred).unwrap() == oracles::aji(&gt, &pred)
            && (s.f1, s.precision, s.recall) == oracles::f1(&gt, &pred, 0.5);
        agree += usize::from(same);
        cases += 1;
    }
    (agree == cases, format!("{agree}/{cases} cases agree"))
}

struct E2e {
    train: MetricsReport,
    test: MetricsReport,
    elapsed: Duration,
    artifacts: Vec<(PathBuf, Vec<u8>)>,
}

fn e2e_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/e2e.toml");
    RunConfig::load(Some(&path), Some(7)).unwrap()
}

fn run_e2e(root: &Path) -> E2e {
    let t0 = Instant::now();
    let cfg = e2e_config();
    let data = root.join("data");
    cmd_synth(&cfg, &data, false).unwrap();
    let train_dir = data.join("train");
    cmd_train(&cfg, Stage::SegDet, &train_dir, None, &root.join("segdet"), false).unwrap();
    let seg_ckpt = root.join("segdet").join(SWA_CHECKPOINT);
    cmd_train(&cfg, Stage::Instance, &train_dir, Some(&seg_ckpt), &root.join("instance"), false).unwrap();
    let inst_ckpt = root.join("instance").join(SWA_CHECKPOINT);
    let mut reports = Vec::new();
    for split in ["train", "test"] {
        let pred = root.join(format!("infer_{split}"));
        cmd_infer(&cfg, &seg_ckpt, &inst_ckpt, &[data.join(split)], &pred, false).unwrap();
        reports.push(cmd_eval(&pred, &data.join(split), Some(&root.join(format!("eval_{split}")))).unwrap());
    }
    let elapsed = t0.elapsed();
    let mut artifacts = Vec::new();
    for sub in ["segdet", "instance", "infer_train/instances", "infer_test/instances", "eval_train", "eval_test"] {
        let dir = root.join(sub);
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            let bytes = std::fs::read(&p).unwrap();
            artifacts.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
        }
    }
    let test = reports.pop().unwrap();
    let train = reports.pop().unwrap();
    E2e { train, test, elapsed, artifacts }
}

fn end_to_end(run: &E2e) -> Outcome {
    let (tr, te) = (&run.train.aggregate, &run.test.aggregate);
    let ok = tr.aji >= 0.70 && tr.f1 >= 0.85 && te.aji >= 0.50 && run.elapsed <= Duration::from_secs(4 * 3600);
    (
        ok,
        format!(
            "train AJI {:.4} F1 {:.4}, test AJI {:.4} F1 {:.4}, {:.0} s",
            tr.aji,
            tr.f1,
            te.aji,
            te.f1,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn parameter_budget() -> Outcome {
    let p = cmd_params(&RunConfig::defaults().unwrap()).unwrap();
    ((15_000_000..=25_000_000).contains(&p.instance), format!("instance network {} parameters", p.instance))
}

fn determinism(a: &E2e, b: &E2e) -> Outcome {
    let differing: Vec<String> = a
        .artifacts
        .iter()
        .zip(&b.artifacts)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let ok = a.artifacts.len() == b.artifacts.len() && differing.is_empty() && !a.artifacts.is_empty();
    (ok, format!("{} artifacts compared, {} differ {:?}", a.artifacts.len(), differing.len(), differing))
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only run on a plain invocation
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let mut report = |n: usize, name: &str, (ok, detail): Outcome| {
        all &= ok;
        println!("criterion {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    };
    report(1, "receptive fields", receptive_fields());
    report(2, "detection map oracle", detection_maps());
    report(3, "gradient checks", gradients());
    report(4, "cyclic schedule and weight averaging", schedule_and_swa());
    report(5, "ideal post-processing and spectral clustering", ideal_and_spectral());
    report(6, "metrics against brute force", metrics_brute_force());
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let a = run_e2e(first.path());
    report(7, "end-to-end synthetic run", end_to_end(&a));
    report(8, "parameter budget", parameter_budget());
    let b = run_e2e(second.path());
    report(9, "bitwise determinism", determinism(&a, &b));
    if !all {
        std::process::exit(1);
    }
}

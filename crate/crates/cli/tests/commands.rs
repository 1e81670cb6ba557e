use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spanet::data::{read_instance_map, write_rgb};
use spanet::Tensor;
use spanet_cli::commands::{cmd_eval, cmd_params, cmd_synth, collect_images, SWA_CHECKPOINT};
use spanet_cli::config::RunConfig;
use spanet_cli::error::CliError;

const TINY: &str = r#"
seed = 3

[synth]
height = 64
width = 64
n_min = 3
n_max = 5
train_count = 2
test_count = 1

[segdet.net]
levels = 2
stem_channels = 4
growth_rate = 4
branch_channels = [4, 4, 4]
repetitions = [1, 1, 1]

[instance.net]
levels = 2
stem_channels = 4
growth_rate = 4
branch_channels = [4, 4, 4]
repetitions = [1, 1, 1]

[train]
patch_size = 32
stride = 32
cycle_len = 1
total_epochs = 2
"#;

fn spanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spanet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(Some(&tiny_config(tmp.path())), None).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = cmd_synth(&cfg, &a, false).unwrap();
    cmd_synth(&cfg, &b, false).unwrap();
    assert_eq!(sa.train, ["train_000", "train_001"]);
    assert_eq!(sa.test, ["test_000"]);
    assert_eq!(files(&a), files(&b));

    let err = cmd_synth(&cfg, &a, false).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    cmd_synth(&cfg, &a, true).unwrap();
    assert_eq!(files(&a), files(&b));

    let other = RunConfig::load(Some(&tiny_config(tmp.path())), Some(4)).unwrap();
    let c = tmp.path().join("c");
    cmd_synth(&other, &c, false).unwrap();
    assert_ne!(files(&a), files(&c));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\npatch_size = 30\nno_such_key = 1\n").unwrap();
    let out = spanet(&["--config", s(&bad), "params"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(spanet(&["--config", s(&cfg), "--out", s(&data), "synth"]).status.success());
    let out = spanet(&[
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("inst")),
        "train",
        "--stage",
        "instance",
        "--data",
        s(&data.join("train")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--segdet"));
}

#[test]
fn divergence_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    assert!(spanet(&["--config", s(&cfg), "--out", s(&data), "synth"]).status.success());
    let hot = tmp.path().join("hot.toml");
    fs::write(&hot, format!("{TINY}alpha1 = 1e200\nalpha2 = 1e199\n")).unwrap();
    let out = spanet(&[
        "--config",
        s(&hot),
        "--out",
        s(&tmp.path().join("seg")),
        "train",
        "--stage",
        "segdet",
        "--data",
        s(&data.join("train")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_data_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spanet(&[
        "--out",
        s(&tmp.path().join("seg")),
        "train",
        "--stage",
        "segdet",
        "--data",
        s(&tmp.path().join("nowhere")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_infer_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let p = |n: &str| tmp.path().join(n);
    let run = |args: &[&str]| {
        let mut full = vec!["--config", s(&cfg)];
        full.extend_from_slice(args);
        let out = spanet(&full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["--out", s(&p("data")), "synth"]);
    let train = p("data").join("train");
    run(&["--out", s(&p("seg")), "train", "--stage", "segdet", "--data", s(&train)]);
    for f in ["train.log", "swa.ckpt", "cycle_01.ckpt", "cycle_02.ckpt", "config.toml", "manifest.json"] {
        assert!(p("seg").join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(p("seg").join("train.log")).unwrap().lines().count(), 2);
    let seg_ckpt = p("seg").join(SWA_CHECKPOINT);
    run(&["--out", s(&p("inst")), "train", "--stage", "instance", "--data", s(&train), "--segdet", s(&seg_ckpt)]);

    // an image whose sides are not multiples of the network's size multiple
    let odd = p("odd");
    fs::create_dir(&odd).unwrap();
    let rgb = Tensor::from_vec(&[3, 50, 37], (0..3 * 50 * 37).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
    write_rgb(&rgb, &odd.join("odd.png")).unwrap();
    let inst_ckpt = p("inst").join(SWA_CHECKPOINT);
    let inputs = [s(&train), s(&odd)];
    run(&["--out", s(&p("pred")), "infer", "--segdet", s(&seg_ckpt), "--instance", s(&inst_ckpt), inputs[0], inputs[1]]);
    let map = read_instance_map(&p("pred").join("instances").join("odd.png")).unwrap();
    assert_eq!(map.dims(), (50, 37));
    for d in ["seg", "det", "overlay"] {
        assert!(p("pred").join(d).join("train_000.png").is_file());
    }
    assert!(p("pred").join("emb").join("train_001.emb").is_file());

    // the extra image has no ground truth
    let err = cmd_eval(&p("pred"), &train, None).unwrap_err();
    assert!(matches!(err, CliError::Data(_)) && err.to_string().contains("odd"), "{err}");
    fs::remove_file(p("pred").join("instances").join("odd.png")).unwrap();
    let text = run(&["--out", s(&p("eval")), "eval", "--pred", s(&p("pred")), "--gt", s(&train)]);
    assert!(text.lines().any(|l| l.starts_with("mean,")), "{text}");
    assert!(p("eval").join("metrics.txt").is_file());
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(Some(&tiny_config(tmp.path())), None).unwrap();
    cmd_synth(&cfg, tmp.path().join("d").as_path(), false).unwrap();
    let gt = tmp.path().join("d").join("train");
    let r = cmd_eval(&gt.join("masks"), &gt, None).unwrap();
    assert_eq!(r.per_image.len(), 2);
    assert_eq!((r.aggregate.aji, r.aggregate.f1), (1.0, 1.0));
}

#[test]
fn params_command_reports_both_networks() {
    let cfg = RunConfig::defaults().unwrap();
    let p = cmd_params(&cfg).unwrap();
    assert!((15_000_000..=25_000_000).contains(&p.instance), "{}", p.instance);
    assert!(p.segdet > 0);
    let out = spanet(&["params"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text, format!("instance {}\nsegdet {}\n", p.instance, p.segdet));
}

#[test]
fn collect_images_rejects_missing_inputs() {
    let err = collect_images(&[PathBuf::from("/definitely/not/here")]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uvforge::formats::Report;
use uvforge::pipeline::REPORT_KEYS;

fn uvforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvforge")).args(args).current_dir(dir).env_remove("UVFORGE_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&uvforge(&[], d)), 2);
    assert_eq!(code(&uvforge(&["genmodel"], d)), 2);
    assert_eq!(code(&uvforge(&["genmodel", "--out", "m.uvm", "--bogus"], d)), 2);
    assert_eq!(code(&uvforge(&["frobnicate"], d)), 2);
    let eval = uvforge(&["eval", "--model", "m", "--checkpoint", "c", "--protocol", "nope", "--out", "o"], d);
    assert_eq!(code(&eval), 2);
    let help = uvforge(&["--help"], d);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("pipeline"));
}

#[test]
fn stage_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = uvforge(&["gendata", "--model", "missing.uvm", "--out", "data"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.uvm"));
    fs::write(d.join("bad.cfg"), "data.uv_size = 48\n").unwrap();
    assert_eq!(code(&uvforge(&["pipeline", "--config", "bad.cfg", "--out", "run"], d)), 1);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_uvforge"));
        c.args(["genmodel", "--vertices", "800", "--shape-dim", "4", "--texture-dim", "4", "--out", out]).current_dir(d).env_remove("UVFORGE_SEED");
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("UVFORGE_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(d.join(out)).unwrap()
    };
    let flag5 = gen("a.uvm", Some("5"), None);
    let env5 = gen("b.uvm", None, Some("5"));
    let flag6_env5 = gen("c.uvm", Some("6"), Some("5"));
    let flag6 = gen("d.uvm", Some("6"), None);
    assert_eq!(flag5, env5);
    assert_eq!(flag6_env5, flag6);
    assert_ne!(flag5, flag6);
}

const TINY: &str = "\
model.vertices = 800
model.shape_dim = 6
model.texture_dim = 6
data.identities = 3
data.views = 2
data.image_size = 64
data.uv_size = 16
fit.iterations = 5
train.batch_size = 2
train.max_steps = 3
embed.steps = 20
embed.renders_per_class = 4
embed.pool_identities = 2
eval.identities = 3
eval.images_per_pose = 1
eval.folds = 2
";

#[test]
fn stage_commands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = uvforge(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(&["genmodel", "--seed", "7", "--vertices", "800", "--shape-dim", "6", "--texture-dim", "6", "--obj", "--out", "m.uvm"]);
    assert!(d.join("m.obj").exists());
    ok(&["gendata", "--model", "m.uvm", "--seed", "3", "--identities", "3", "--views", "2", "--image-size", "64", "--uv-size", "16", "--out", "data"]);
    let manifest = fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 6);

    let fit = ok(&["fit", "--model", "m.uvm", "--image", "data/images/id0000_v00.ppm", "--landmarks", "data/landmarks/id0000_v00.txt", "--out", "fit"]);
    let report = Report::parse(&fit).unwrap();
    assert!(report.get_f64("landmark_rmse_px").unwrap() < 1.0);
    assert!(d.join("fit/fit.obj").exists());

    ok(&["extract-uv", "--model", "m.uvm", "--image", "data/images/id0000_v00.ppm", "--params", "fit/params.txt", "--uv-size", "16", "--out", "uv"]);
    ok(&["synthesize", "--model", "m.uvm", "--params", "fit/params.txt", "--uv", "data/uv/id0000.ppm", "--grid", "15", "--size", "64", "--out", "views"]);
    assert_eq!(fs::read_to_string(d.join("views/views.csv")).unwrap().lines().count(), 1 + 13);

    ok(&["train", "--model", "m.uvm", "--data", "data", "--config", "tiny.cfg", "--seed", "1", "--out", "train"]);
    let curves = fs::read_to_string(d.join("train/loss_curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,L_gen,L_adv_g,L_adv_l,L_id,L_total\n"));
    ok(&["complete", "--checkpoint", "train/checkpoint.uvc", "--uv", "uv/uv.ppm", "--mask", "uv/mask.pgm", "--seed", "2", "--out", "done"]);
    assert!(d.join("done/completed.ppm").exists());

    let table = ok(&["eval", "--model", "m.uvm", "--checkpoint", "train/checkpoint.uvc", "--protocol", "frontal-profile", "--config", "tiny.cfg", "--out", "eval"]);
    assert!(table.starts_with("protocol,fold,accuracy\n"));
    assert!(table.contains("frontal-profile,1,"));
    assert!(table.contains("frontal-profile,mean,"));
    let grid = ok(&["eval", "--model", "m.uvm", "--checkpoint", "train/checkpoint.uvc", "--protocol", "pose-matrix", "--config", "tiny.cfg", "--out", "eval"]);
    assert!(grid.contains("three_quarter"));
}

#[test]
fn pipeline_report_has_every_key_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    for out in ["a", "b"] {
        let o = uvforge(&["pipeline", "--config", "tiny.cfg", "--out", out], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read_to_string(d.join("a/report.txt")).unwrap();
    let b = fs::read_to_string(d.join("b/report.txt")).unwrap();
    assert_eq!(a, b);
    let report = Report::parse(&a).unwrap();
    for key in REPORT_KEYS {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    for artifact in ["model.uvm", "checkpoint.uvc", "loss_curves.csv", "eval/verification.csv", "eval/pose_matrix.txt", "config.txt"] {
        assert!(d.join("a").join(artifact).exists(), "missing {artifact}");
    }
}

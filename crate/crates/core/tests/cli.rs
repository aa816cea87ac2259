//! End-to-end runs of the `goalsar` binary on tiny synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use goalsar::checkpoint::{decode_params, read_manifest};
use goalsar::dataset::{parse_annotations, AnnotationSchema};

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 0
out = {}
synthetic.scenes = 3
synthetic.agents = 6
data.stride = 20
raster.sigma_s = desk
raster.downsample_factor = 8
unet.encoder = 4,4
unet.decoder = 4,4
train.epochs = 1
train.augment = false
train.val_every = 1
train.val_k = 2
eval.k = 3
eval.plots = 2
ablate.sigmas = 0,10,25,50,100
ablate.epochs = 1
",
        dir.join("run").display()
    );
    let overridden: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let mut text: String = text
        .lines()
        .filter(|l| !overridden.contains(&l.split('=').next().unwrap_or("").trim()))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn goalsar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goalsar")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = goalsar(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_synthetic_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-synthetic", "--config", cfg, "--out", a.to_str().unwrap()]);
    ok(&["gen-synthetic", "--config", cfg, "--out", b.to_str().unwrap()]);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n.to_string_lossy().ends_with(".scene")));
    for n in names.iter().filter(|n| *n != "config.txt") {
        assert_eq!(read(&a.join(n)), read(&b.join(n)), "{n:?} differs");
    }
}

#[test]
fn gen_synthetic_without_agents() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "synthetic.agents = 0\nsynthetic.scenes = 1\n");
    let out = tmp.path().join("empty");
    ok(&["gen-synthetic", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let ann = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "txt") && !p.ends_with("config.txt"))
        .expect("annotation file");
    let parsed = parse_annotations(&String::from_utf8(read(&ann)).unwrap(), &AnnotationSchema::default());
    assert!(parsed.tracks.is_empty());
    assert_eq!(parsed.skipped, 0);
}

#[test]
fn sar_training_has_no_goal_module() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--model", "sar"]);
    let ckpt = tmp.path().join("run/checkpoint");
    let params = decode_params(&read(&ckpt.join("params.bin"))).unwrap();
    assert!(!params.is_empty());
    assert!(params.iter().all(|(name, _)| !name.starts_with("unet.")));
    let manifest = read_manifest(&ckpt).unwrap();
    assert_eq!(manifest.get("model"), Some("sar"));
    assert_eq!(manifest.get("unet.encoder"), None);
    assert_eq!(manifest.get("fusion"), None);
}

#[test]
fn goal_sar_train_eval_ablate_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let cfg = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", cfg, "--model", "goal_sar", "--fusion", "skip"]);
    let manifest = read_manifest(&run.join("checkpoint")).unwrap();
    assert_eq!(manifest.get("fusion"), Some("skip"));
    for f in ["loss.csv", "loss.png", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let loss = String::from_utf8(read(&run.join("loss.csv"))).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,goal_loss,traj_loss,total"));

    ok(&["eval", "--config", cfg, "--k", "3"]);
    let plots = std::fs::read_dir(run.join("eval/plots")).unwrap().count();
    assert_eq!(plots, 2);
    let report = String::from_utf8(read(&run.join("eval/report.txt"))).unwrap();
    assert!(report.contains("k = 3"), "{report}");
    let rows = String::from_utf8(read(&run.join("eval/per_trajectory.csv"))).unwrap();
    assert_eq!(rows.lines().next(), Some("trajectory_id,ade,fde"));

    ok(&["ablate", "--config", cfg]);
    let csv = String::from_utf8(read(&run.join("ablate/goal_noise.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 6, "{csv}");
    assert!(run.join("ablate/goal_noise.png").exists());

    ok(&["sample-goals", "--config", cfg, "--k", "5"]);
    let goals = String::from_utf8(read(&run.join("goals/goals_0000.txt"))).unwrap();
    assert_eq!(goals.lines().count(), 5);
    assert!(run.join("goals/map_0001.png").exists());

    let out = goalsar(&["eval", "--config", cfg, "--fusion", "late"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fusion"), "{err}");
}

#[test]
fn training_is_reproducible_from_echoed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "model = sar\n");
    ok(&["train", "--config", cfg.to_str().unwrap()]);
    let run = tmp.path().join("run");
    let echoed = tmp.path().join("echoed.conf");
    let text = String::from_utf8(read(&run.join("config.txt"))).unwrap();
    let again = tmp.path().join("again");
    std::fs::write(&echoed, text).unwrap();
    ok(&["train", "--config", echoed.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(read(&run.join("loss.csv")), read(&again.join("loss.csv")));
    assert_eq!(read(&run.join("checkpoint/params.bin")), read(&again.join("checkpoint/params.bin")));
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "raster.sigma = 3\n");
    assert!(!goalsar(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let cfg = tiny_config(tmp.path(), "ablate.mode = everything\n");
    let out = goalsar(&["ablate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("everything"));
    assert!(!goalsar(&["train", "--model", "transformer"]).status.success());
}

//! Black-box checks of the command-line interface: exit codes, error
//! reporting, and the files each command leaves behind.

use std::fs;
use std::path::Path;
use std::process::Output;

fn cli(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_metagrad"))
        .args(args)
        .output()
        .expect("spawn CLI")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_cfg(out_dir: &Path, extra: &str) -> String {
    format!(
        "epochs = 2\nepisodes_per_epoch = 2\nn_inner = 1\nhidden = 8\nn_pool = 4\n\
         n_val_tasks = 2\neval_episodes = 4\nk_shot = 3\nn_query = 4\nseed = 7\n\
         out_dir = {}\n{extra}",
        out_dir.display()
    )
}

#[test]
fn training_with_zero_epochs_records_only_the_initial_validation_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("zero.cfg");
    fs::write(&cfg, tiny_cfg(&out, "").replace("epochs = 2", "epochs = 0")).unwrap();

    let res = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr_of(&res));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2, "header plus the single pre-training row");
    assert!(lines[1].contains(",0,meta-val,"));
    assert!(out.join("best.ckpt").exists());
}

#[test]
fn unknown_config_key_is_rejected_with_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nbogus = 2\n").unwrap();
    let res = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
    let err = stderr_of(&res);
    assert!(err.contains("unknown key") && err.contains("line 2"), "{err}");
}

#[test]
fn duplicate_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dup.cfg");
    fs::write(&cfg, "eta = 0.1\neta = 0.2\n").unwrap();
    let res = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(stderr_of(&res).contains("duplicate"), "{}", stderr_of(&res));
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, tiny_cfg(&out, "")).unwrap();
    let res = cli(&["train", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert!(res.status.success(), "{}", stderr_of(&res));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert!(row.starts_with("maml2-gaussian-p0.1-s9,9,"), "{row}");
}

#[test]
fn eval_rejects_a_checkpoint_from_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, tiny_cfg(&out, "")).unwrap();
    let res = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr_of(&res));

    let wider = dir.path().join("wider.cfg");
    fs::write(&wider, tiny_cfg(&out, "").replace("hidden = 8", "hidden = 12")).unwrap();
    let res = cli(&[
        "eval",
        "--checkpoint",
        out.join("best.ckpt").to_str().unwrap(),
        "--config",
        wider.to_str().unwrap(),
        "--episodes",
        "2",
    ]);
    assert!(!res.status.success());
    assert!(stderr_of(&res).contains("does not match"), "{}", stderr_of(&res));
}

#[test]
fn eval_requires_at_least_one_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, tiny_cfg(&out, "")).unwrap();
    let res = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr_of(&res));
    let res = cli(&[
        "eval",
        "--checkpoint",
        out.join("best.ckpt").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--episodes",
        "0",
    ]);
    assert!(!res.status.success());
}

#[test]
fn ablate_rejects_unknown_layer_labels_before_running_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let abl = dir.path().join("ablate");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, tiny_cfg(&out, "")).unwrap();
    let res = cli(&[
        "ablate-layers",
        "--config",
        cfg.to_str().unwrap(),
        "--selectors",
        "all,L7",
        "--out",
        abl.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(stderr_of(&res).contains("L7"), "{}", stderr_of(&res));
    assert!(
        !abl.join("report.csv").exists(),
        "no partial results after a rejected selector list"
    );
}

#[test]
fn sweep_rejects_rates_at_or_above_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let sweep = dir.path().join("sweep");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, tiny_cfg(&out, "")).unwrap();
    let res = cli(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--p-list",
        "0.1,1.0",
        "--modes",
        "binary",
        "--seeds",
        "1",
        "--out",
        sweep.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(stderr_of(&res).contains("rate"), "{}", stderr_of(&res));
}

#[test]
fn diverging_training_aborts_and_leaves_a_marker_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("explode.cfg");
    fs::write(&cfg, tiny_cfg(&out, "alpha0 = 1e200\n")).unwrap();
    let res = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains(",abort,"), "{metrics}");
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sodade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sodade")).args(args).env("SODADE_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = sodade(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 14] = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.layers=1",
    "--set",
    "model.ffn_dim=16",
    "--set",
    "train.max_epochs=2",
    "--set",
    "train.samples_per_solvent=2",
    "--set",
    "head.epochs=2",
];

fn synth(dir: &Path) {
    let j = ok(&["synth", "--rows", "48", "--types", "4", "--reaction-solvents", "6", "--out", s(dir)]);
    assert_eq!(j["primary_metric"], 48.0);
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let (spange, rx) = (data.join("solvents.csv"), data.join("reactions.csv"));
    let run = tmp.path().join("run");

    let mut args = vec!["pretrain", "--spange", s(&spange), "--catechol", s(&rx), "--snapshot-every", "1"];
    args.extend(["--val-types", "class_00,class_01", "--test-types", "class_02,class_03", "--out", s(&run)]);
    args.extend(TINY);
    args.extend(["--seed", "3"]);
    let j = ok(&args);
    assert_eq!(j["command"], "pretrain");
    assert_eq!(j["seed"], 3);
    assert!(j["primary_metric"].as_f64().unwrap().is_finite());

    let ckpt = run.join("checkpoint.ckpt");
    assert_eq!(&fs::read(&ckpt).unwrap()[..8], b"SODADE01");
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("train.seed = 3") && config.contains("model.d_model = 16"));
    assert_eq!(fs::read_dir(run.join("snapshots")).unwrap().count(), 3);
    assert!(fs::read_to_string(run.join("history.csv")).unwrap().lines().count() == 3);

    let j = ok(&["eval", "--ckpt", s(&ckpt), "--spange", s(&spange)]);
    assert_eq!(j["metric"], "val_mse");
    let table = tmp.path().join("test.csv");
    ok(&["eval", "--ckpt", s(&ckpt), "--spange", s(&spange), "--split", "test", "--out", s(&table)]);
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 14);

    let fps = tmp.path().join("fps.csv");
    let j = ok(&["fingerprint", "--ckpt", s(&ckpt), "--spange", s(&spange), "--all", "--out", s(&fps)]);
    assert_eq!(j["primary_metric"], 48.0);
    let header = fs::read_to_string(&fps).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 17);

    let cmp = tmp.path().join("cmp.csv");
    ok(&["baseline", "--ckpt", s(&ckpt), "--spange", s(&spange), "--out", s(&cmp)]);
    let cmp = fs::read_to_string(&cmp).unwrap();
    assert!(cmp.starts_with("property,avg_mse,gp_mse,sodade_mse"));
    assert!(cmp.lines().last().unwrap().starts_with("Average MSE"));

    let bench = tmp.path().join("bench");
    let mut args = vec!["benchmark", "--ckpt", s(&ckpt), "--spange", s(&spange), "--catechol", s(&rx)];
    args.extend(["--task", "single", "--set", "head.mlp1=16,8", "--set", "head.mlp2=10,8,3", "--out", s(&bench)]);
    args.extend(["--set", "head.epochs=2"]);
    let j = ok(&args);
    assert_eq!(j["metric"], "single_frozen_mse");
    assert!(bench.join("predictions_single_frozen.csv").exists());

    let traj = tmp.path().join("traj.csv");
    let snaps = run.join("snapshots");
    let mut args = vec!["trajectory", "--snapshots", s(&snaps)];
    args.extend(["--spange", s(&spange), "--catechol", s(&rx), "--out", s(&traj)]);
    ok(&args);
    let traj = fs::read_to_string(&traj).unwrap();
    assert!(traj.starts_with("snapshot,solvent,pc1,pc2,efficiency"));
    assert_eq!(traj.lines().count(), 1 + 3 * 6);
}

#[test]
fn same_seed_same_bytes_and_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let spange = data.join("solvents.csv");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["pretrain", "--spange", s(&spange), "--out", s(out)];
        args.extend(["--val-types", "class_00", "--test-types", "class_01"]);
        args.extend(TINY);
        args.extend(extra);
        ok(&args)
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a, &[]);
    run(&b, &[]);
    for f in ["checkpoint.ckpt", "history.csv", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let grid = tmp.path().join("grid");
    fs::create_dir(&grid).unwrap();
    fs::write(grid.join("lr_high.txt"), "train.lr_init = 0.003\n").unwrap();
    fs::write(grid.join("lr_low.txt"), "train.lr_init = 0.0003\n").unwrap();
    let g = tmp.path().join("g");
    let j = run(&g, &["--grid", s(&grid)]);
    assert_eq!(j["metric"], "best_val_mse");
    let csv = fs::read_to_string(g.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(g.join("lr_low/config.txt")).unwrap().contains("train.lr_init = 0.0003"));
}

#[test]
fn config_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let file = tmp.path().join("run.cfg");
    fs::write(&file, "train.seed = 5\ntrain.max_epochs = 1\nmodel.layers = 1\nmodel.d_model = 8\nmodel.heads = 2\n")
        .unwrap();
    let (spange, out) = (data.join("solvents.csv"), tmp.path().join("r"));
    let mut args = vec!["pretrain", "--spange", s(&spange), "--out", s(&out)];
    args.extend(["--val-types", "class_00", "--test-types", "class_01", "--config", s(&file)]);
    args.extend(["--set", "train.seed=6", "--set", "train.samples_per_solvent=1", "--seed", "7"]);
    let j = ok(&args);
    assert_eq!(j["seed"], 7);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("train.seed = 7"));
    assert!(cfg.contains("train.max_epochs = 1"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let spange = data.join("solvents.csv");
    let missing = sodade(&["eval", "--ckpt", "/nonexistent.ckpt", "--spange", s(&spange)]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown = sodade(&["pretrain", "--spange", s(&spange), "--set", "train.bogus=1", "--out", s(tmp.path())]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(sodade(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_data_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "name,type,smiles\nx,y,C\n").unwrap();
    let out = sodade(&["fingerprint", "--ckpt", s(&bad), "--spange", s(&bad), "--all"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

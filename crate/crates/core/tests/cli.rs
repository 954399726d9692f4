mod common;

use std::path::Path;
use std::process::Command;

use dedetr::cli::{self, AblationSpec};
use dedetr::config::RunConfig;
use dedetr::io::{load_checkpoint_file, write_checkpoint};
use dedetr::model::Model;
use dedetr::train::{datasets, evaluate_model};

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dedetr"))
}

fn loss_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect()
}

#[test]
fn tiny_training_writes_one_row_per_epoch_and_mostly_lowers_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let mut decreasing = 0;
    for seed in 0..5 {
        let mut cfg = common::tiny_run_config();
        cfg.seed = seed;
        let path = write_config(tmp.path(), &cfg);
        let out = tmp.path().join(format!("run{seed}"));
        cli::cmd_train(&path, Some(&out), None).unwrap();
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(csv.starts_with("config_id,seed,epoch,loss_total,loss_cls,loss_l1,loss_giou,ap,ap50,ap75\n"));
        let loss = loss_column(&csv);
        assert_eq!(loss.len(), 3);
        assert!(loss.iter().all(|l| l.is_finite()));
        if loss[0] > loss[2] {
            decreasing += 1;
        }
        for f in ["config.json", "final.ckpt", "best.ckpt"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    assert!(decreasing >= 4, "loss fell on {decreasing} of 5 seeds");
}

#[test]
fn single_epoch_gives_single_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_run_config();
    cfg.optim.epochs = 1;
    let path = write_config(tmp.path(), &cfg);
    let runs = cli::cmd_train(&path, Some(tmp.path()), None).unwrap();
    assert_eq!(runs[0].rows.len(), 1);
    let csv = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn several_seeds_get_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_run_config();
    cfg.optim.epochs = 1;
    let path = write_config(tmp.path(), &cfg);
    cli::cmd_train(&path, Some(tmp.path()), Some(&[4, 9])).unwrap();
    for s in [4, 9] {
        let csv = std::fs::read_to_string(tmp.path().join(format!("seed_{s}/metrics.csv"))).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with(&format!("tiny,{s},1,")));
    }
}

#[test]
fn untrained_model_scores_near_zero() {
    let cfg = RunConfig::default();
    let (_, ev) = datasets(&cfg).unwrap();
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let r = evaluate_model(&model, &ev, cfg.eval_nms()).unwrap();
    assert!(r.ap < 0.05, "{}", r.ap);
}

#[test]
fn eval_is_repeatable_and_sweeps_seven_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let path = write_config(tmp.path(), &cfg);
    cli::cmd_train(&path, Some(tmp.path()), None).unwrap();
    let ck = tmp.path().join("final.ckpt");
    let sweep = cli::parse_sweep("0.3:0.9:0.1").unwrap();
    let (a, rows) = cli::cmd_eval(&ck, None, Some(&tmp.path().join("e1")), Some(&sweep)).unwrap();
    let (b, _) = cli::cmd_eval(&ck, Some(&path), Some(&tmp.path().join("e2")), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.nms, Some(0.7));
    assert_eq!(rows.len(), 7);
    let read = |d: &str, f: &str| std::fs::read_to_string(tmp.path().join(d).join(f)).unwrap();
    assert_eq!(read("e1", "eval.json"), read("e2", "eval.json"));
    assert_eq!(read("e1", "eval.csv"), read("e2", "eval.csv"));
    let sweep_csv = read("e1", "nms_sweep.csv");
    let ts: Vec<&str> = sweep_csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ts, ["0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]);
}

#[test]
fn checkpoint_round_trip_is_exact_at_f32() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let model = Model::new(cfg.model.clone(), 3).unwrap();
    let path = tmp.path().join("m.ckpt");
    cli::save_model(&path, &cfg, &model.params).unwrap();
    let (back_cfg, back) = cli::load_model(&path, None).unwrap();
    assert_eq!(back_cfg, cfg);
    for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        let want: Vec<f64> = t1.data().iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(t2.data(), want.as_slice(), "{n1}");
    }
    let ck = load_checkpoint_file(&path).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&mut again, &ck.config_json, ck.tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    assert_eq!(again, std::fs::read(&path).unwrap());
}

#[test]
fn single_cell_ablation_equals_train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let path = write_config(tmp.path(), &cfg);
    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    v["grid"] = serde_json::json!([{"config_id": "tiny", "patch": {}}]);
    v["seeds"] = serde_json::json!([cfg.seed]);
    let grid = tmp.path().join("grid.json");
    std::fs::write(&grid, v.to_string()).unwrap();

    let results = cli::cmd_ablate(&grid, Some(&tmp.path().join("ab")), None).unwrap();
    cli::cmd_train(&path, Some(&tmp.path().join("tr")), None).unwrap();
    let (e, _) = cli::cmd_eval(&tmp.path().join("tr/final.ckpt"), None, Some(&tmp.path().join("ev")), None).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].eval, e.result);

    let csv = std::fs::read_to_string(tmp.path().join("ab/ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "config_id,sf,ms,la,seed,ap,ap50,ap75");
    assert!(csv.lines().nth(1).unwrap().starts_with("tiny,1,1,1,0,"));
    assert!(tmp.path().join("ab/ablation_summary.csv").exists());
}

#[test]
fn ladder_grid_by_five_seeds_is_twenty_cells() {
    let spec = AblationSpec::from_json(r#"{"seeds": [1, 2, 3, 4, 5]}"#).unwrap();
    let cells = spec.cells().unwrap();
    assert_eq!(cells.len(), 20);
    let first: Vec<&str> = cells.iter().step_by(5).map(|c| c.config_id.as_str()).collect();
    assert_eq!(first, ["baseline", "sf", "sf_ms", "sf_ms_la"]);
}

#[test]
fn ablation_rows_keep_grid_order_under_parallelism() {
    let mut base = common::tiny_run_config();
    base.optim.epochs = 1;
    let mut v: serde_json::Value = serde_json::from_str(&base.to_json()).unwrap();
    v["seeds"] = serde_json::json!([2, 1]);
    let cells = AblationSpec::from_json(&v.to_string()).unwrap().cells().unwrap();
    let parallel = cli::run_cells(&cells, 3).unwrap();
    let serial = cli::run_cells(&cells, 1).unwrap();
    let lines = |r: &[cli::CellResult]| r.iter().map(cli::ablation_line).collect::<Vec<_>>();
    assert_eq!(lines(&parallel), lines(&serial));
    assert!(lines(&parallel)[0].starts_with("baseline,0,0,0,2,"));
    assert!(lines(&parallel)[7].starts_with("sf_ms_la,1,1,1,1,"));
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code().unwrap();

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"optim": {"epochs": 0}}"#).unwrap();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap()]), 2);

    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"NOPE0000").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", junk.to_str().unwrap()]), 5);
    let missing = tmp.path().join("missing.ckpt");
    assert_eq!(code(&["eval", "--checkpoint", missing.to_str().unwrap()]), 5);

    // a checkpoint from a narrower model does not fit the configured one
    let cfg = common::tiny_run_config();
    let small = Model::new(cfg.model.clone(), 0).unwrap();
    let ck = tmp.path().join("small.ckpt");
    cli::save_model(&ck, &cfg, &small.params).unwrap();
    let mut wide = cfg.clone();
    wide.model.hidden_dim = 32;
    wide.model.ffn_dim = 64;
    let wide_path = write_config(tmp.path(), &wide);
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--config", wide_path.to_str().unwrap()];
    assert_eq!(code(&args), 4);
}

#[test]
fn binary_train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_run_config();
    cfg.optim.epochs = 2;
    let path = write_config(tmp.path(), &cfg);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = bin()
            .args(["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn binary_selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.contains("6 of 6 checks passed"));
}

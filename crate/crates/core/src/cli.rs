//! Command implementations behind the `dedetr` binary: training, evaluation,
//! ablation grids and the self-test, plus their file outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{ablation_report, EvalResult, ReportRow};
use crate::io::{load_checkpoint_file, save_checkpoint_file};
use crate::model::Model;
use crate::selftest::{self, Report, Subject};
use crate::tensor::Params;
use crate::train::{datasets, evaluate_model, metrics_csv, train, EpochRow};

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Numeric(_) => 3,
        Error::Shape(_) | Error::Axis { .. } => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

/// Parses `"1,2,3"`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(seeds)
}

/// Parses `"start:stop:step"` into the inclusive list of thresholds, each
/// rounded to 1e-9 so `0.3:0.9:0.1` yields exactly seven values.
pub fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("sweep {text:?} must be start:stop:step"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0 && start <= stop && start > 0.0 && stop <= 1.0) {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Output directory: the flag, then the config, then `runs/<config_id>`.
fn output_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.config_id))
}

/// Parameters as they come back from a checkpoint.
pub fn stored_precision(params: &Params) -> Params {
    let mut out = params.clone();
    for t in out.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        t.zero_grad();
    }
    out
}

pub fn save_model(path: &Path, cfg: &RunConfig, params: &Params) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tensors: Vec<(&str, &crate::tensor::Tensor)> = params.iter().map(|(_, n, t)| (n, t)).collect();
    save_checkpoint_file(path, &cfg.to_json(), tensors)
}

/// Loads a checkpoint into a model built from `cfg`, or from the config
/// stored in the checkpoint when `cfg` is `None`.
pub fn load_model(path: &Path, cfg: Option<RunConfig>) -> Result<(RunConfig, Model)> {
    let ck = load_checkpoint_file(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let cfg = match cfg {
        Some(c) => c,
        None => RunConfig::from_json(&ck.config_json)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?,
    };
    let mut params = Params::new();
    for (name, t) in ck.tensors {
        params
            .insert(name, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model.load_values(&params)?;
    Ok((cfg, model))
}

/// Files written by one training run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
}

/// Trains once per seed (the config's own seed when `seeds` is `None`).
/// With several seeds each run writes to `<out>/seed_<s>/`.
///
/// Each run directory receives `config.json`, `metrics.csv` (one row per
/// epoch), `final.ckpt` and `best.ckpt` (the epoch with the highest AP).
pub fn cmd_train(config: &Path, out: Option<&Path>, seeds: Option<&[u64]>) -> Result<Vec<TrainRun>> {
    let base = RunConfig::load(config)?;
    let root = output_dir(&base, out);
    let seeds = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| vec![base.seed]);
    let nested = seeds.len() > 1;
    let mut runs = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let dir = if nested { root.join(format!("seed_{seed}")) } else { root.clone() };
        let (tr, ev) = datasets(&cfg)?;
        fs::create_dir_all(&dir)?;
        write(&dir.join("config.json"), &cfg.to_json())?;
        let outcome = train(&cfg, &tr, &ev, |_| {})?;
        write(&dir.join("metrics.csv"), &metrics_csv(&outcome.rows))?;
        save_model(&dir.join("final.ckpt"), &cfg, &outcome.model.params)?;
        save_model(&dir.join("best.ckpt"), &cfg, &outcome.best)?;
        runs.push(TrainRun {
            dir,
            seed,
            rows: outcome.rows,
            best_epoch: outcome.best_epoch,
        });
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_id: String,
    pub seed: u64,
    /// NMS threshold applied, if any.
    pub nms: Option<f64>,
    pub result: EvalResult,
}

pub const EVAL_HEADER: &str = "config_id,seed,nms,ap,ap50,ap75";
pub const SWEEP_HEADER: &str = "nms_threshold,ap,ap50,ap75";

fn eval_line(e: &EvalOutput) -> String {
    let nms = e.nms.map_or(String::from("none"), |t| format!("{t}"));
    format!(
        "{},{},{nms},{:.6},{:.6},{:.6}",
        e.config_id, e.seed, e.result.ap, e.result.ap50, e.result.ap75
    )
}

/// Evaluates a checkpoint on the config's evaluation scenes and writes
/// `eval.json` and `eval.csv`. With `sweep`, also writes `nms_sweep.csv`,
/// one row per threshold.
pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    sweep: Option<&[f64]>,
) -> Result<(EvalOutput, Vec<(f64, EvalResult)>)> {
    let cfg = config.map(RunConfig::load).transpose()?;
    let (cfg, model) = load_model(checkpoint, cfg)?;
    let (_, ev) = datasets(&cfg)?;
    let nms = cfg.eval_nms();
    let result = evaluate_model(&model, &ev, nms)?;
    let output = EvalOutput {
        config_id: cfg.config_id.clone(),
        seed: cfg.seed,
        nms,
        result,
    };
    let dir = output_dir(&cfg, out);
    write(
        &dir.join("eval.json"),
        &serde_json::to_string_pretty(&output).expect("serialisable"),
    )?;
    write(&dir.join("eval.csv"), &format!("{EVAL_HEADER}\n{}\n", eval_line(&output)))?;
    let mut rows = Vec::new();
    if let Some(ts) = sweep {
        let mut csv = format!("{SWEEP_HEADER}\n");
        for &t in ts {
            let r = evaluate_model(&model, &ev, Some(t))?;
            csv.push_str(&format!("{t},{:.6},{:.6},{:.6}\n", r.ap, r.ap50, r.ap75));
            rows.push((t, r));
        }
        write(&dir.join("nms_sweep.csv"), &csv)?;
    }
    Ok((output, rows))
}

/// One entry of an ablation grid: an id and a JSON patch merged into the
/// base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config_id: String,
    #[serde(default)]
    pub patch: Value,
}

/// Recursively merges `patch` into `base`; non-object values replace.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// The four-rung ladder: baseline, +SF, +SF+MS, +SF+MS+LA.
pub fn default_grid() -> Vec<GridCell> {
    let rung = |id: &str, sf: bool, ms: bool, la: bool| GridCell {
        config_id: id.into(),
        patch: serde_json::json!({
            "model": {"toggles": {"sparse_sampling": sf, "multiscale": ms, "label_aug": la}}
        }),
    };
    vec![
        rung("baseline", false, false, false),
        rung("sf", true, false, false),
        rung("sf_ms", true, true, false),
        rung("sf_ms_la", true, true, true),
    ]
}

/// An ablation file: a run config plus optional `grid` and `seeds` keys.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub base: Value,
    pub grid: Vec<GridCell>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg_err = |e: serde_json::Error| Error::Config(e.to_string());
        let mut base: Value = serde_json::from_str(text).map_err(cfg_err)?;
        let obj = base
            .as_object_mut()
            .ok_or_else(|| Error::Config("ablation config must be a JSON object".into()))?;
        let grid = match obj.remove("grid") {
            Some(g) => serde_json::from_value(g).map_err(cfg_err)?,
            None => default_grid(),
        };
        let seeds = match obj.remove("seeds") {
            Some(s) => serde_json::from_value(s).map_err(cfg_err)?,
            None => vec![obj.get("seed").and_then(Value::as_u64).unwrap_or(0)],
        };
        let spec = Self { base, grid, seeds };
        spec.cells()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Configs in grid-then-seed order.
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        if self.grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one grid cell and one seed".into()));
        }
        let mut ids: Vec<&str> = self.grid.iter().map(|c| c.config_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate config_id in grid".into()));
        }
        let mut out = Vec::with_capacity(self.grid.len() * self.seeds.len());
        for cell in &self.grid {
            let mut v = self.base.clone();
            merge_json(&mut v, &cell.patch);
            v["config_id"] = Value::String(cell.config_id.clone());
            for &seed in &self.seeds {
                v["seed"] = Value::from(seed);
                let cfg: RunConfig = serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?;
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// Outcome of one trained and evaluated cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub config: RunConfig,
    pub rows: Vec<EpochRow>,
    /// Final parameters at stored precision.
    pub params: Params,
    pub eval: EvalResult,
    /// Wall time spent training and evaluating this cell.
    pub elapsed: Duration,
}

/// Worker count: `DEDETR_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("DEDETR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and evaluates every config on up to `threads` workers. Results
/// keep the input order. Each cell evaluates its final parameters after a
/// trip through stored precision, so it matches a saved-and-reloaded
/// checkpoint exactly.
pub fn run_cells(cells: &[RunConfig], threads: usize) -> Result<Vec<CellResult>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<CellResult>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = cells.get(i) else { break };
                let r = run_cell(cfg);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every cell ran"))
        .collect()
}

fn run_cell(cfg: &RunConfig) -> Result<CellResult> {
    let start = Instant::now();
    let (tr, ev) = datasets(cfg)?;
    let outcome = train(cfg, &tr, &ev, |_| {})?;
    let params = stored_precision(&outcome.model.params);
    let mut model = outcome.model;
    model.load_values(&params)?;
    let eval = evaluate_model(&model, &ev, cfg.eval_nms())?;
    Ok(CellResult {
        config: cfg.clone(),
        rows: outcome.rows,
        params,
        eval,
        elapsed: start.elapsed(),
    })
}

pub const ABLATION_HEADER: &str = "config_id,sf,ms,la,seed,ap,ap50,ap75";
pub const SUMMARY_HEADER: &str = "config_id,seeds,ap_mean,ap_std,ap50_mean,ap50_std,ap75_mean,ap75_std";

pub fn ablation_line(r: &CellResult) -> String {
    let c = &r.config;
    let t = &c.model.toggles;
    let flag = |b: bool| if b { 1 } else { 0 };
    format!(
        "{},{},{},{},{},{:.6},{:.6},{:.6}",
        c.config_id,
        flag(t.sparse_sampling),
        flag(t.multiscale),
        flag(c.effective_aug().enabled()),
        c.seed,
        r.eval.ap,
        r.eval.ap50,
        r.eval.ap75
    )
}

/// Mean and spread per config id, in grid order.
pub fn summarize(results: &[CellResult]) -> Vec<ReportRow> {
    let mut groups: Vec<(String, Vec<EvalResult>)> = Vec::new();
    for r in results {
        match groups.iter_mut().find(|(id, _)| *id == r.config.config_id) {
            Some((_, v)) => v.push(r.eval.clone()),
            None => groups.push((r.config.config_id.clone(), vec![r.eval.clone()])),
        }
    }
    ablation_report(&groups)
}

pub fn summary_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.config_id, r.seeds, r.ap_mean, r.ap_std, r.ap50_mean, r.ap50_std, r.ap75_mean, r.ap75_std
        ));
    }
    s
}

/// Runs an ablation file. Writes `ablation.csv` (one row per cell and seed),
/// `ablation_summary.csv` and each cell's `metrics/<id>_seed<s>.csv`.
/// `seeds` overrides the file's seed list.
pub fn cmd_ablate(config: &Path, out: Option<&Path>, seeds: Option<&[u64]>) -> Result<Vec<CellResult>> {
    let mut spec = AblationSpec::load(config)?;
    if let Some(s) = seeds {
        spec.seeds = s.to_vec();
    }
    let cells = spec.cells()?;
    let results = run_cells(&cells, worker_count())?;
    let dir = output_dir(&cells[0], out);
    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &results {
        csv.push_str(&ablation_line(r));
        csv.push('\n');
        let name = format!("{}_seed{}.csv", r.config.config_id, r.config.seed);
        write(&dir.join("metrics").join(name), &metrics_csv(&r.rows))?;
    }
    write(&dir.join("ablation.csv"), &csv)?;
    write(&dir.join("ablation_summary.csv"), &summary_csv(&summarize(&results)))?;
    Ok(results)
}

/// Runs the oracle suite against the library.
pub fn cmd_selftest() -> Report {
    selftest::run(&selftest::Library)
}

/// Runs the oracle suite against any implementation.
pub fn cmd_selftest_with(subject: &dyn Subject) -> Report {
    selftest::run(subject)
}

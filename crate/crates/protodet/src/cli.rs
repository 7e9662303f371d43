//! Command implementations behind the `protodet` binary.
//!
//! Exit-code contract: 0 success, 1 check failure, 2 I/O or format problem,
//! 3 numeric abort, 4 undefined metric. All writes go through a temp file
//! plus rename.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::metrics::SplitFilter;
use crate::pipeline::prepare_pool;
use crate::pool::ConceptPool;
use crate::scene::{load_scenes_jsonl, save_scenes_jsonl, DatasetSpec, Scene, SplitContext};
use crate::tensor::cosine_sim;
use crate::trainer::{run_gradcheck, train_loop, TrainerState};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "PROTODET_CONFIG";

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        Error::UndefinedMetric(_) => 4,
        _ => 2,
    }
}

/// Loads the config from the flag, the environment, or defaults, logging
/// which keys fell back to defaults.
pub fn resolve_config(flag: Option<&Path>) -> Result<RunConfig> {
    let path = flag
        .map(PathBuf::from)
        .or_else(|| std::env::var(CONFIG_ENV).ok().map(PathBuf::from));
    let (cfg, defaulted) = match path {
        Some(p) => RunConfig::load(&p)?,
        None => {
            log::info!("no config given; using built-in defaults for every key");
            (RunConfig::default(), Vec::new())
        }
    };
    if !defaulted.is_empty() {
        log::info!("config keys using defaults: {}", defaulted.join(", "));
    }
    Ok(cfg)
}

fn require_path(flag: Option<&Path>, fallback: &Option<String>, what: &str) -> Result<PathBuf> {
    flag.map(PathBuf::from)
        .or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Parameter(format!("missing --{what} (and no {what}_path in config)")))
}

fn dataset_spec(cfg: &RunConfig) -> DatasetSpec {
    DatasetSpec {
        num_base: cfg.num_base,
        num_novel: cfg.num_novel,
        train_scenes: cfg.train_scenes,
        eval_scenes: cfg.eval_scenes,
        min_objects: cfg.min_objects,
        max_objects: cfg.max_objects,
        distractors: cfg.distractors,
        novel_fraction: cfg.novel_fraction,
        token_width: cfg.c,
        sigma_token: cfg.sigma_token,
        seed: cfg.seed,
    }
}

/// `build-pool`: teacher data → filter → cluster → pool file.
pub fn cmd_build_pool(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = resolve_config(config)?;
    let prepared = prepare_pool(&cfg)?;
    prepared.pool.save(out)?;
    println!(
        "{}",
        serde_json::to_string(&prepared.stats).expect("stats serialize")
    );
    Ok(())
}

/// `train`: full training loop with streamed metrics and periodic checkpoints.
pub fn cmd_train(
    config: Option<&Path>,
    pool: Option<&Path>,
    out: Option<&Path>,
    metrics: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(config)?;
    let pool_path = require_path(pool, &cfg.pool_path, "pool")?;
    let out_path = require_path(out, &cfg.out_path, "out")?;
    let metrics_path = require_path(metrics, &cfg.metrics_path, "metrics")?;

    let loaded_pool = ConceptPool::load(&pool_path)?;
    let prepared = prepare_pool(&cfg)?;
    let bank = prepared.bank;
    bank.check_pairing(&loaded_pool)?;

    let (train_scenes, eval_scenes) = match &cfg.data_path {
        Some(path) => {
            let all = load_scenes_jsonl(Path::new(path))?;
            let train: Vec<Scene> =
                all.iter().filter(|s| s.split == SplitContext::Train).cloned().collect();
            let eval: Vec<Scene> =
                all.into_iter().filter(|s| s.split == SplitContext::Eval).collect();
            (train, eval)
        }
        None => crate::scene::generate_dataset(&dataset_spec(&cfg), &bank)?,
    };
    if let Some(export) = &cfg.eval_export {
        save_scenes_jsonl(Path::new(export), &eval_scenes)?;
        log::info!("wrote {} eval scenes to {export}", eval_scenes.len());
    }

    let mut state = TrainerState::new(cfg, loaded_pool, bank)?;
    let mut lines: Vec<String> = Vec::new();
    let result = train_loop(
        &mut state,
        &train_scenes,
        &eval_scenes,
        |record| {
            lines.push(serde_json::to_string(record).expect("record serialize"));
            atomic_write(&metrics_path, (lines.join("\n") + "\n").as_bytes())
        },
        |s| s.save(&out_path),
    );
    // Always leave a checkpoint and a metrics file, even for steps = 0; on a
    // numeric abort the last good checkpoint is already on disk.
    if state.step == 0 {
        state.save(&out_path)?;
    }
    if lines.is_empty() {
        atomic_write(&metrics_path, b"")?;
    }
    result?;
    state.save(&out_path)?;
    println!(
        "trained {} steps; checkpoint {}; metrics {} ({} records)",
        state.step,
        out_path.display(),
        metrics_path.display(),
        lines.len()
    );
    Ok(())
}

/// `eval`: teacher-free evaluation of a checkpoint over a scene file.
pub fn cmd_eval(
    ckpt: &Path,
    data: Option<&Path>,
    split: &str,
    report: Option<&Path>,
) -> Result<()> {
    let filter = SplitFilter::parse(split)?;
    let state = TrainerState::load(ckpt)?;
    let data_path = require_path(data, &state.config.data_path, "data")?;
    let report_path = require_path(report, &state.config.report_path, "report")?;
    let scenes = load_scenes_jsonl(&data_path)?;
    let eval_report = state.evaluate(&scenes)?;
    let requested = match filter {
        SplitFilter::Base => eval_report.ap50_base,
        SplitFilter::Novel => eval_report.ap50_novel,
        SplitFilter::All => Some(eval_report.ap50_all),
    };
    let requested = requested.ok_or_else(|| {
        Error::UndefinedMetric(format!("no {split} ground truth in {}", data_path.display()))
    })?;
    let json = serde_json::to_string_pretty(&eval_report).expect("report serialize");
    atomic_write(&report_path, json.as_bytes())?;
    println!("ap50_{split} = {requested:.4} over {} scenes", eval_report.num_scenes);
    Ok(())
}

/// `inspect-pool`: human-readable summary, optional coarse-cosine CSV.
pub fn cmd_inspect_pool(pool: &Path, csv: Option<&Path>) -> Result<()> {
    let pool = ConceptPool::load(pool)?;
    println!("d = {}", pool.dim());
    println!("m1 = {}", pool.m1());
    println!("m2 = {}", pool.m2());
    println!("tau = {}", pool.tau());
    println!("gamma = {}", pool.gamma());
    for (level, range) in [
        ("coarse", 0..pool.m1()),
        ("fine", pool.m1()..pool.len()),
    ] {
        if range.is_empty() {
            println!("{level}: none");
            continue;
        }
        let norms: Vec<f64> =
            range.clone().map(|j| crate::tensor::norm(pool.prototype(j))).collect();
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("{level}: {} prototypes, norms in [{min:.6}, {max:.6}]", norms.len());
    }
    if let Some(csv_path) = csv {
        let mut text = String::new();
        for i in 0..pool.m1() {
            let row: Vec<String> = (0..pool.m1())
                .map(|j| {
                    format!("{:.6}", cosine_sim(pool.prototype(i), pool.prototype(j)).unwrap())
                })
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        atomic_write(csv_path, text.as_bytes())?;
        println!("wrote {}x{} cosine matrix to {}", pool.m1(), pool.m1(), csv_path.display());
    }
    Ok(())
}

/// `gradcheck`: finite-difference audit plus the partition assertion.
/// Returns whether every check passed.
pub fn cmd_gradcheck(config: Option<&Path>, seed: Option<u64>, inject_mislabel: bool) -> Result<bool> {
    let cfg = resolve_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let report = run_gradcheck(&cfg, seed, inject_mislabel)?;
    println!("{:<8} {:>16} {:>6}", "loss", "worst_rel_err", "pass");
    for row in &report.losses {
        println!(
            "{:<8} {:>16.3e} {:>6}",
            row.loss,
            row.worst_rel_error,
            if row.pass { "ok" } else { "FAIL" }
        );
    }
    if report.partition_violations.is_empty() {
        println!("partition: ok (DET/SEM gradients bit-exactly isolated)");
    } else {
        for v in &report.partition_violations {
            println!("partition: FAIL {v}");
        }
    }
    Ok(report.pass)
}

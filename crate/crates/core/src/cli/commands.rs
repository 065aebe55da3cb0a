use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::residual_pgm;
use super::{Baseline, Cli, CliError, Command, ExitCode, RunConfig, EXIT_CHECK, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA};
use crate::gradcore::check::check_all_ops;
use crate::gradcore::OpKind;
use crate::icegrid::{chronological_split, load_grid_file, make_inputs, save_grid_file, synth_generate, SicSeries};
use crate::metrics::{write_reports_csv, MetricReport, REPORT_HEADER};
use crate::trainer::{
    evaluate_model, evaluate_oracle, evaluate_persistence, load_checkpoint, micro_gradcheck, predict, run_ablation_observed,
    save_checkpoint, train_observed, Checkpoint, EpochLog, Evaluation, GranularityMode, DEFAULT_MATRIX,
};

type CliResult<T = ()> = Result<T, CliError>;

/// Tolerance on the f64 finite-difference relative error, per op and end to
/// end.
pub const GRADCHECK_TOL: f64 = 1e-6;
/// Tolerance on the f32 against f64 gradient error of the micro model.
pub const SINGLE_PRECISION_TOL: f64 = 1e-4;

pub(super) fn execute(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new(EXIT_CONFIG, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).exit(EXIT_CONFIG, "config")?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Gen { out } => gen(&cfg, out.unwrap_or_else(|| cfg.paths.data.clone())),
        Command::Train { data, out, log } => {
            let ckpt = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let log = log.unwrap_or_else(|| ckpt.with_extension("log.csv"));
            train(&cfg, &data_path(&cfg, data.data)?, &ckpt, &log)
        }
        Command::Eval { data, checkpoint, baseline, out_dir } => {
            let data = data_path(&cfg, data.data)?;
            let out = out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let source = match baseline {
                Some(b) => Source::Baseline(b),
                None => Source::Checkpoint(checkpoint_path(&cfg, checkpoint)?),
            };
            eval(&cfg, &data, source, &out)
        }
        Command::Forecast { data, checkpoint, anchor, out_dir } => {
            let data = data_path(&cfg, data.data)?;
            let ckpt = checkpoint_path(&cfg, checkpoint)?;
            forecast(&data, &ckpt, anchor, &out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone()))
        }
        Command::Gradcheck { inject_fault, entries } => gradcheck(&cfg, inject_fault.as_deref(), entries),
        Command::Ablate { data, out_dir } => {
            let data = data_path(&cfg, data.data)?;
            ablate(&cfg, &data, &out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone()))
        }
    }
}

fn data_path(cfg: &RunConfig, given: Option<PathBuf>) -> CliResult<PathBuf> {
    let p = given.unwrap_or_else(|| cfg.paths.data.clone());
    if !p.is_file() {
        return Err(CliError::new(EXIT_DATA, format!("data file {} not found", p.display())));
    }
    Ok(p)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> CliResult<PathBuf> {
    let p = given.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    if !p.is_file() {
        return Err(CliError::new(EXIT_CHECKPOINT, format!("checkpoint {} not found", p.display())));
    }
    Ok(p)
}

fn load_data(path: &Path) -> CliResult<SicSeries> {
    load_grid_file(path).exit(EXIT_DATA, &format!("reading {}", path.display()))
}

fn load_model(path: &Path, series: &SicSeries) -> CliResult<Checkpoint> {
    let ckpt = load_checkpoint(path).exit(EXIT_CHECKPOINT, &format!("reading {}", path.display()))?;
    if (ckpt.model.height, ckpt.model.width) != (series.height(), series.width()) {
        return Err(CliError::new(
            EXIT_CHECKPOINT,
            format!(
                "checkpoint expects {}x{} grids, data holds {}x{}",
                ckpt.model.height,
                ckpt.model.width,
                series.height(),
                series.width()
            ),
        ));
    }
    Ok(ckpt)
}

fn ensure_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => ensure_dir(dir),
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::new(EXIT_DATA, format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::new(EXIT_DATA, format!("cannot write {}: {e}", path.display())))
}

fn gen(cfg: &RunConfig, out: PathBuf) -> CliResult {
    let series = synth_generate(&cfg.synth)?;
    ensure_parent(&out)?;
    save_grid_file(&series, &out).exit(EXIT_DATA, &format!("writing {}", out.display()))?;
    println!(
        "wrote {}: {} days of {}x{} grids, seed {}",
        out.display(),
        series.num_days(),
        series.height(),
        series.width(),
        cfg.synth.rng_seed
    );
    Ok(())
}

fn log_csv(log: &[EpochLog]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::new(EXIT_DATA, format!("log: {e}"));
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(io)?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()]).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::new(EXIT_DATA, format!("log: {e}")))
}

fn print_epoch(prefix: &str, e: &EpochLog) {
    eprintln!("{prefix}epoch {:>3}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss);
}

fn train(cfg: &RunConfig, data: &Path, ckpt_path: &Path, log_path: &Path) -> CliResult {
    let series = load_data(data)?;
    let model = cfg.model(series.height(), series.width()).exit(EXIT_CONFIG, "model")?;
    let split = chronological_split(&series, cfg.train.anchor_stride)?;
    let out = train_observed(&series, &split, &model, &cfg.train, |e| print_epoch("", e))?;
    let ckpt = Checkpoint { model: out.model.clone(), params: out.params, optimizer: Some(out.optimizer) };
    ensure_parent(ckpt_path)?;
    save_checkpoint(&ckpt, ckpt_path).exit(EXIT_CHECKPOINT, &format!("writing {}", ckpt_path.display()))?;
    write_file(log_path, &log_csv(&out.log)?)?;
    let best = &out.log[out.best_epoch - 1];
    println!(
        "trained {} epochs on {} anchors; best epoch {} (val loss {:.6}); wrote {} and {}",
        out.log.len(),
        split.train.len(),
        out.best_epoch,
        best.val_loss,
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

enum Source {
    Checkpoint(PathBuf),
    Baseline(Baseline),
}

fn metrics_csv(reports: &[MetricReport]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_reports_csv(reports, &mut buf)?;
    Ok(buf)
}

fn write_evaluation(ev: &Evaluation, dir: &Path) -> CliResult {
    ensure_dir(dir)?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&ev.reports)?)?;
    for m in &ev.residuals {
        let name = format!("residual_{}.pgm", m.granularity.name());
        write_file(&dir.join(name), &residual_pgm(&m.values, m.height, m.width))?;
    }
    Ok(())
}

fn print_aggregates(label: &str, ev: &Evaluation) {
    for r in ev.reports.iter().filter(|r| r.lead == -1) {
        println!("{label}{:<8} rmse {:.5}  mae {:.5}  nse {:.4}  iiee {:.2}", r.granularity.name(), r.rmse, r.mae, r.nse, r.iiee);
    }
}

fn eval(cfg: &RunConfig, data: &Path, source: Source, out: &Path) -> CliResult {
    let series = load_data(data)?;
    let split = chronological_split(&series, cfg.train.anchor_stride)?;
    let ev = match source {
        Source::Checkpoint(path) => {
            let ckpt = load_model(&path, &series)?;
            evaluate_model(&ckpt.params, &ckpt.model, &series, &split.test)?
        }
        Source::Baseline(Baseline::Persistence) => evaluate_persistence(&series, &split.test, cfg.train.granularity_mode)?,
        Source::Baseline(Baseline::Oracle) => evaluate_oracle(&series, &split.test, cfg.train.granularity_mode)?,
    };
    write_evaluation(&ev, out)?;
    print_aggregates("", &ev);
    println!("scored {} test anchors; wrote {}", split.test.len(), out.display());
    Ok(())
}

fn forecast(data: &Path, ckpt_path: &Path, anchor: Option<i64>, out: &Path) -> CliResult {
    let series = load_data(data)?;
    let ckpt = load_model(ckpt_path, &series)?;
    let anchor = anchor.unwrap_or(series.t_end());
    let inputs = make_inputs(&series, anchor)?;
    let preds = predict(&ckpt.params, &ckpt.model, &inputs)?;
    ensure_dir(out)?;
    for &g in ckpt.model.mode.active() {
        let grids = preds.get(g);
        let s = SicSeries::from_grids(anchor + 1, grids, series.mask().map(<[bool]>::to_vec))?;
        let path = out.join(format!("forecast_{}.sicg", g.name()));
        save_grid_file(&s, &path).exit(EXIT_DATA, &format!("writing {}", path.display()))?;
        println!("wrote {}: {} {} steps after day {anchor}", path.display(), grids.len(), g.name());
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, fault: Option<&str>, entries: usize) -> CliResult {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::new(EXIT_CONFIG, format!("unknown op {name}; known ops: {}", known.join(", ")))
        })?),
    };
    let seed = cfg.train.rng_seed;
    let rows = check_all_ops(seed, fault).exit(EXIT_CHECK, "op audit")?;
    println!("{:<12} {:>5} {:>12}  result", "op", "cases", "rel_err");
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.passed(GRADCHECK_TOL);
        println!("{:<12} {:>5} {:>12.3e}  {}", r.op.name(), r.cases, r.max_rel_err, if ok { "pass" } else { "FAIL" });
        if !ok {
            failed.push(r.op.name().to_string());
        }
    }
    let micro = micro_gradcheck(entries, seed).exit(EXIT_CHECK, "micro model audit")?;
    let e2e_ok = micro.max_rel_err() < GRADCHECK_TOL;
    let f32_ok = micro.single_precision < SINGLE_PRECISION_TOL;
    println!(
        "{:<12} {:>5} {:>12.3e}  {}",
        "micro_model",
        micro.params.len(),
        micro.max_rel_err(),
        if e2e_ok { "pass" } else { "FAIL" }
    );
    println!("{:<12} {:>5} {:>12.3e}  {}", "micro_f32", 1, micro.single_precision, if f32_ok { "pass" } else { "FAIL" });
    if !e2e_ok {
        failed.push("micro_model".into());
    }
    if !f32_ok {
        failed.push("micro_f32".into());
    }
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(CliError::new(EXIT_CHECK, format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn summary_csv(rows: &[(String, &str, &MetricReport)]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::new(EXIT_DATA, format!("summary: {e}"));
    let header: Vec<&str> = ["method", "mode"].into_iter().chain(REPORT_HEADER).collect();
    w.write_record(&header).map_err(io)?;
    for (method, mode, r) in rows {
        let fields = [
            method.clone(),
            mode.to_string(),
            r.granularity.name().to_string(),
            r.lead.to_string(),
            r.rmse.to_string(),
            r.mae.to_string(),
            r.r2.to_string(),
            r.nse.to_string(),
            r.iiee.to_string(),
            r.sie_dif.to_string(),
        ];
        w.write_record(&fields).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::new(EXIT_DATA, format!("summary: {e}")))
}

fn ablate(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult {
    let series = load_data(data)?;
    let model = cfg.model(series.height(), series.width()).exit(EXIT_CONFIG, "model")?;
    ensure_dir(out)?;
    let mut failure = None;
    let ab = run_ablation_observed(
        &series,
        &model,
        &cfg.train,
        &DEFAULT_MATRIX,
        |case, e| print_epoch(&format!("[{}] ", case.label()), e),
        |run| {
            if failure.is_some() {
                return;
            }
            let dir = out.join(run.case.label());
            let ckpt = Checkpoint { model: run.outcome.model.clone(), params: run.outcome.params.clone(), optimizer: None };
            let written = write_evaluation(&run.evaluation, &dir)
                .and_then(|_| write_file(&dir.join("train_log.csv"), &log_csv(&run.outcome.log)?))
                .and_then(|_| save_checkpoint(&ckpt, dir.join("model.sifm")).exit(EXIT_CHECKPOINT, "writing checkpoint"));
            match written {
                Ok(()) => print_aggregates(&format!("[{}] ", run.case.label()), &run.evaluation),
                Err(e) => failure = Some(e),
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let persistence = evaluate_persistence(&series, &ab.split.test, GranularityMode::Multi)?;
    let mut rows = Vec::new();
    for run in &ab.runs {
        for r in &run.evaluation.reports {
            rows.push((run.case.backbone.name().to_string(), run.case.mode.name(), r));
        }
    }
    for r in &persistence.reports {
        rows.push(("persistence".to_string(), GranularityMode::Multi.name(), r));
    }
    write_file(&out.join("summary.csv"), &summary_csv(&rows)?)?;

    println!("{:<8} {:>4}  {:<22} {:>9} {:>9}", "scale", "lead", "method", "rmse", "mae");
    for g in GranularityMode::Multi.active() {
        let mut lines: Vec<_> = rows.iter().filter(|(_, _, r)| r.granularity == *g).collect();
        lines.sort_by_key(|(_, _, r)| if r.lead < 0 { i32::MAX } else { r.lead });
        for (method, mode, r) in lines {
            let lead = if r.lead < 0 { "all".to_string() } else { r.lead.to_string() };
            println!("{:<8} {:>4}  {:<22} {:>9.5} {:>9.5}", g.name(), lead, format!("{method}/{mode}"), r.rmse, r.mae);
        }
    }
    println!("wrote {} run directories and {}", ab.runs.len(), out.join("summary.csv").display());
    Ok(())
}

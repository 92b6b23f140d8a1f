//! `robudepth`: data generation, translation, two-phase training,
//! evaluation and gradient verification.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use robudepth_core::checkpoint::Checkpoint;
use robudepth_core::dataset::{self, Dataset, GenConfig, FRAMES, SPLITS};
use robudepth_core::diffcore::{GradCheckConfig, OpKind};
use robudepth_core::evalkit::{self, EvalRange, MetricsReport, Scaling};
use robudepth_core::gradsuite;
use robudepth_core::rng::item_seed;
use robudepth_core::synthscene::Condition;
use robudepth_core::trainer::{self, TrainConfig};
use robudepth_core::translate::{self, ConditionSet};
use robudepth_core::Error;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(
    name = "robudepth",
    version,
    about = "Robust self-trained monocular depth at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Training config (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic triplets for every split.
    GenData {
        /// Triplets per split.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON with optional `scene`, `motion`, `intrinsics` and `conditions` objects.
        #[arg(long)]
        scene_config: Option<PathBuf>,
    },
    /// Self-supervised teacher training on day-clear triplets.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Student training on mixed samples, distilled from a frozen teacher.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Externally translated frames (`<dir>/<id>/<condition>/frame_*.png`).
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Comma-separated degradation conditions.
        #[arg(long, default_value = "night,rain")]
        conditions: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Depth metrics of one or more checkpoints on validation splits.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `name=path`; repeatable.
        #[arg(long = "model", required = true, value_name = "NAME=PATH")]
        models: Vec<String>,
        #[arg(long, default_value = "val-day,val-night,val-rain")]
        splits: String,
        #[arg(long, default_value = "median")]
        scaling: String,
        #[arg(long, default_value_t = 0.1)]
        min_depth: f64,
        #[arg(long, default_value_t = 80.0)]
        max_depth: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a split with the built-in translators into an overlay directory.
    Translate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "night,rain")]
        conditions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and loss.
    Gradcheck {
        /// Corrupt the backward pass of this op.
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        coords: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG charts from a metrics CSV and/or a loss log.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure kinds with their exit codes.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var("SSD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        usage(format!(
            "SSD_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(anyhow!("thread pool: {e}")))
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData {
            n,
            seed,
            out,
            scene_config,
        } => gen_data(n, seed, &out, scene_config.as_deref()),
        Command::TrainTeacher { data, out, cfg } => train_teacher(&data, &out, &cfg),
        Command::TrainStudent {
            data,
            teacher,
            out,
            overlay,
            conditions,
            cfg,
        } => train_student(&data, &teacher, &out, overlay.as_deref(), &conditions, &cfg),
        Command::Eval {
            data,
            models,
            splits,
            scaling,
            min_depth,
            max_depth,
            out,
        } => eval(
            &data,
            &models,
            &splits,
            &scaling,
            EvalRange {
                min: min_depth,
                max: max_depth,
            },
            &out,
        ),
        Command::Translate {
            data,
            split,
            conditions,
            seed,
            out,
        } => translate_split(&data, &split, &conditions, seed, &out),
        Command::Gradcheck {
            inject_fault,
            seed,
            coords,
            out,
        } => gradcheck(inject_fault.as_deref(), seed, coords, out.as_deref()),
        Command::Plot { metrics, log, out } => plot(metrics.as_deref(), log.as_deref(), &out),
    }
}

fn load_config(args: &ConfigArgs) -> CmdResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_kv_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &args.set {
        cfg.apply_override(kv)
            .map_err(|e| usage(format!("--set {kv}: {e}")))?;
    }
    Ok(cfg)
}

fn parse_conditions(list: &str) -> CmdResult<ConditionSet> {
    let conds = list
        .split(',')
        .map(|s| Condition::parse(s.trim()))
        .collect::<robudepth_core::Result<Vec<_>>>()
        .map_err(|e| usage(format!("--conditions: {e}")))?;
    ConditionSet::new(conds).map_err(|e| usage(format!("--conditions: {e}")))
}

fn gen_data(n: usize, seed: u64, out: &Path, scene_config: Option<&Path>) -> CmdResult {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let cfg: GenConfig = match scene_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => GenConfig::default(),
    };
    cfg.scene.validate().map_err(|e| usage(e.to_string()))?;
    let mut m = RunManifest::start("gen-data", out, None, Some(seed))?;
    for split in SPLITS {
        let samples = dataset::generate_split(split, n, seed, &cfg)?;
        dataset::write_split(out, split, &samples)?;
        eprintln!("{split}: {} triplets", samples.len());
        m.outputs.push(out.join(split));
    }
    m.finish()?;
    Ok(())
}

fn epoch_logger(phase: &'static str, total: usize) -> impl FnMut(usize, f64) {
    move |e, loss| eprintln!("{phase} epoch {e}/{total}: mean loss {loss:.6}")
}

fn train_teacher(data: &Path, out: &Path, args: &ConfigArgs) -> CmdResult {
    let cfg = load_config(args)?;
    let mut m = RunManifest::start("train-teacher", out, Some(cfg.hash()), Some(cfg.seed))?;
    let samples = Dataset::open(data, "train")?.load_all()?;
    let run =
        trainer::train_teacher_with(&samples, &cfg, &mut epoch_logger("teacher", cfg.epochs))?;
    write_training_outputs(out, "teacher", &cfg, &run, &mut m)?;
    m.finish()?;
    Ok(())
}

fn train_student(
    data: &Path,
    teacher: &Path,
    out: &Path,
    overlay: Option<&Path>,
    conditions: &str,
    args: &ConfigArgs,
) -> CmdResult {
    let cfg = load_config(args)?;
    let set = parse_conditions(conditions)?;
    let mut m = RunManifest::start("train-student", out, Some(cfg.hash()), Some(cfg.seed))?;
    let teacher_ck = Checkpoint::load(teacher)?;
    let ds = Dataset::open(data, "train")?;
    let samples = ds.load_all()?;
    let overlay = overlay
        .map(|dir| translate::ingest_external(dir, &ds))
        .transpose()?;
    let run = trainer::train_student_with(
        &samples,
        &teacher_ck,
        &cfg,
        &set,
        overlay.as_ref(),
        &mut epoch_logger("student", cfg.epochs),
    )?;
    write_training_outputs(out, "student", &cfg, &run, &mut m)?;
    m.finish()?;
    Ok(())
}

fn write_training_outputs(
    out: &Path,
    kind: &str,
    cfg: &TrainConfig,
    run: &trainer::TrainOutput,
    m: &mut RunManifest,
) -> CmdResult {
    let ck = out.join(format!("{kind}.ssdf"));
    run.checkpoint.save(&ck)?;
    let log = out.join("loss_log.csv");
    trainer::write_log_csv(&log, &run.log)?;
    let config = out.join("config.txt");
    fs::write(&config, cfg.to_kv_text())
        .with_context(|| format!("writing {}", config.display()))?;
    if let (Some(first), Some(last)) = (run.epoch_means.first(), run.epoch_means.last()) {
        eprintln!("{kind}: epoch mean loss {first:.6} -> {last:.6}");
    }
    m.outputs.extend([ck, log, config]);
    Ok(())
}

fn condition_of_split(samples: &[robudepth_core::synthscene::SampleTriplet]) -> String {
    samples
        .first()
        .map(|s| s.condition.name().to_string())
        .unwrap_or_default()
}

fn eval(
    data: &Path,
    models: &[String],
    splits: &str,
    scaling: &str,
    range: EvalRange,
    out: &Path,
) -> CmdResult {
    let scaling = Scaling::parse(scaling).map_err(|e| usage(e.to_string()))?;
    range.validate().map_err(|e| usage(e.to_string()))?;
    let models = models
        .iter()
        .map(|arg| {
            let (name, path) = arg
                .split_once('=')
                .filter(|(n, p)| !n.is_empty() && !p.is_empty())
                .ok_or_else(|| usage(format!("--model expects NAME=PATH, got {arg:?}")))?;
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let splits: Vec<&str> = splits
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if splits.is_empty() {
        return Err(usage("--splits is empty"));
    }
    let mut m = RunManifest::start("eval", out, None, None)?;
    let nets = models
        .iter()
        .map(|(name, path)| {
            Ok((
                name,
                trainer::depth_from_checkpoint(&Checkpoint::load(path)?)?,
            ))
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for split in &splits {
        let samples = Dataset::open(data, split)?.load_all()?;
        let condition = condition_of_split(&samples);
        for (name, net) in &nets {
            let pairs = samples
                .par_iter()
                .map(|s| Ok((net.predict(&s.curr)?.0, s.gt_depth.clone())))
                .collect::<robudepth_core::Result<Vec<_>>>()?;
            let r = evalkit::evaluate_set(&pairs, range, scaling)?;
            reports.push(r.tagged(split, &condition, name));
        }
    }
    print!("{}", evalkit::format_table(&reports));
    m.outputs.extend(evalkit::emit_report(&reports, out)?);
    m.finish()?;
    Ok(())
}

fn translate_split(data: &Path, split: &str, conditions: &str, seed: u64, out: &Path) -> CmdResult {
    let set = parse_conditions(conditions)?;
    let mut m = RunManifest::start("translate", out, None, Some(seed))?;
    let ds = Dataset::open(data, split)?;
    let samples = ds.load_all()?;
    for &cond in &set.conditions {
        let stream = format!("translate/{}", cond.name());
        for (i, s) in samples.iter().enumerate() {
            let d = translate::degrade_triplet(s, cond, item_seed(seed, &stream, i as u64), &set)?
                .quantized();
            let dir = out.join(&s.id).join(cond.name());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, img) in FRAMES.iter().zip([&d.prev, &d.curr, &d.next]) {
                dataset::write_png(&dir.join(name), img)?;
            }
        }
        eprintln!("{}: {} triplets", cond.name(), samples.len());
    }
    m.outputs.push(out.to_path_buf());
    m.finish()?;
    Ok(())
}

fn gradcheck(fault: Option<&str>, seed: u64, coords: usize, out: Option<&Path>) -> CmdResult {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            usage(format!(
                "unknown op {name:?}; known ops: {}",
                known.join(", ")
            ))
        })?),
    };
    if coords == 0 {
        return Err(usage("--coords must be at least 1"));
    }
    let mut m = out
        .map(|o| RunManifest::start("gradcheck", o, None, Some(seed)))
        .transpose()?;
    let cfg = GradCheckConfig {
        seed,
        coords,
        fault,
        ..Default::default()
    };
    let mut failed = Vec::new();
    for case in gradsuite::gradient_suite(seed) {
        let r = gradsuite::run_case(&case, &cfg)?.report;
        let status = if r.pass { "ok  " } else { "FAIL" };
        let detail = r.failure.clone().unwrap_or_default();
        println!(
            "{status} {:<26} max rel err {:.3e} over {} coords {detail}",
            case.name, r.max_rel_err, r.checked
        );
        if !r.pass {
            failed.push(case.name);
        }
    }
    if let Some(m) = m.as_mut() {
        m.finish()?;
    }
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn read_loss_log(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| anyhow!("{}: no {name} column", path.display()))
    };
    let (step, total) = (col("step")?, col("total")?);
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let get = |i: usize| -> anyhow::Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| anyhow!("{}: bad row {l:?}", path.display()))
            };
            Ok((get(step)?, get(total)?))
        })
        .collect()
}

fn plot(metrics: Option<&Path>, log: Option<&Path>, out: &Path) -> CmdResult {
    if metrics.is_none() && log.is_none() {
        return Err(usage("plot needs --metrics and/or --log"));
    }
    let mut m = RunManifest::start("plot", out, None, None)?;
    if let Some(path) = metrics {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let reports: Vec<MetricsReport> = evalkit::parse_reports_csv(&text)?
            .into_iter()
            .map(|r| MetricsReport {
                split: r.split,
                condition: r.condition,
                model: r.model,
                abs_rel: r.values[0],
                sq_rel: r.values[1],
                rmse: r.values[2],
                delta1: r.values[3],
                n_pixels: r.n_pixels,
                range: EvalRange::default(),
                scaling: Scaling::Median,
            })
            .collect();
        if reports.is_empty() {
            return Err(Failure::Runtime(anyhow!("{}: no rows", path.display())));
        }
        for metric in evalkit::METRICS {
            let p = out.join(format!("{metric}.svg"));
            fs::write(&p, evalkit::metric_svg(&reports, metric)?)
                .with_context(|| format!("writing {}", p.display()))?;
            m.outputs.push(p);
        }
    }
    if let Some(path) = log {
        let points = read_loss_log(path)?;
        let p = out.join("loss.svg");
        fs::write(&p, evalkit::line_svg(&points, "training loss")?)
            .with_context(|| format!("writing {}", p.display()))?;
        m.outputs.push(p);
    }
    m.finish()?;
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mulvit::analysis::cost_report;
use mulvit::checkpoint;
use mulvit::dataset::{self, Manifest};
use mulvit::metrics::write_cdf_csv;
use mulvit::model::{Architecture, Model, ModelOverrides, Preset};
use mulvit::parallel::{self, Execution};
use mulvit::rssi::{self, MadConfig, PipelineConfig, Split};
use mulvit::scene::SceneSpec;
use mulvit::trainer::{self, RunOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "mulvit", version, about = "Multi-view ViT RSSI estimation toolkit")]
struct Cli {
    /// Seed for generation and training; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-camera dataset.
    Gen(GenArgs),
    /// Condition a raw RSSI trace.
    Preprocess(PreprocessArgs),
    /// Two-phase training.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts for a preset.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene TOML; the built-in default scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    rssi: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    rate_in: f64,
    #[arg(long, default_value_t = 20.0)]
    rate_out: f64,
    #[arg(long, default_value_t = 40)]
    mad_window: usize,
    #[arg(long, default_value_t = 5.0)]
    mad_threshold: f64,
    #[arg(long, default_value_t = 4)]
    smooth: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; falls back to $MULVIT_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Preset,
    /// TOML with optional [model] overrides and [train] settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps and write a resumable checkpoint.
    #[arg(long)]
    stop_after_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    cdf: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: Preset,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelOverrides,
    train: TrainConfig,
}

fn exec() -> Execution {
    Execution::default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn cmd_gen(args: &GenArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &args.scene {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.trajectory.seed = s;
    }
    let summary = dataset::generate_dataset(&spec, args.frames, &args.out, exec())?;
    println!("frames      {} x {} cameras", summary.frames, summary.cameras);
    println!("rssi rows   {}", summary.rssi_rows);
    println!("samples     {} ({} dropped)", summary.samples, summary.dropped_pairs);
    let (tr, va, te) = summary.split_counts;
    println!("splits      train {tr} / val {va} / test {te}");
    if let Some(r) = summary.trend_r {
        println!("trend r     {r:.4}");
    }
    println!("manifest    {}", args.out.join(dataset::MANIFEST_FILE).display());
    Ok(())
}

fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let cfg = PipelineConfig {
        rate_in_hz: args.rate_in,
        rate_out_hz: args.rate_out,
        mad: MadConfig {
            window: args.mad_window,
            threshold: args.mad_threshold,
            ..MadConfig::default()
        },
        smooth_support: args.smooth,
        ..PipelineConfig::default()
    };
    let raw = rssi::read_rssi_csv(&args.rssi, args.rate_in)?;
    let out = rssi::run_pipeline(&raw, &cfg)?;
    rssi::write_rssi_csv(&args.out, &out.preprocessed)?;
    write_json(
        &sidecar(&args.out),
        &serde_json::json!({
            "command": "preprocess",
            "input": args.rssi,
            "pipeline": cfg,
            "flagged": out.flagged.len(),
            "dropped_tail": out.dropped_tail,
            "trend": out.trend,
        }),
    )?;
    println!("samples     {} -> {}", raw.len(), out.preprocessed.len());
    println!("flagged     {}", out.flagged.len());
    if out.dropped_tail > 0 {
        println!("dropped     {} trailing sample(s)", out.dropped_tail);
    }
    let (lo, hi) = cfg.trend_band;
    match out.trend {
        Some(t) => {
            let status = if t.within_band { "ok" } else { "warn" };
            println!("trend r     {:.4} (band [{lo:.2}, {hi:.2}]: {status})", t.r);
        }
        None => println!("trend r     undefined (zero variance)"),
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_data(dir: Option<&Path>) -> Result<(PathBuf, Manifest, dataset::Dataset)> {
    let root = dataset::resolve_data_root(dir)?;
    let manifest = Manifest::load(&root)?;
    let data = dataset::load_dataset(&root, &manifest, exec())?;
    Ok((root, manifest, data))
}

fn check_images(spec: &mulvit::model::ModelSpec, data: &dataset::Dataset) -> Result<()> {
    let Some(sample) = data.samples.first() else {
        bail!("dataset has no samples");
    };
    for (enc, &cam) in spec.encoders.iter().zip(&spec.cameras) {
        let Some(img) = sample.images.get(cam) else {
            bail!("model reads camera {cam} but the dataset has {} camera(s)", sample.images.len());
        };
        let want = [enc.channels, enc.image_height, enc.image_width];
        if img.shape() != want {
            bail!(
                "model expects {}x{}x{} images from camera {cam}, dataset has {:?}",
                want[0],
                want[1],
                want[2],
                img.shape()
            );
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut rc = load_run_config(args.config.as_deref())?;
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    let mut issues = rc.train.issues();
    let spec = match args.model.spec().with_overrides(&rc.model) {
        Ok(s) => Some(s),
        Err(mulvit::Error::Config(v)) => {
            issues.extend(v);
            None
        }
        Err(e) => return Err(e.into()),
    };
    if !issues.is_empty() {
        for i in &issues {
            eprintln!("config error: {i}");
        }
        bail!("{} configuration error(s)", issues.len());
    }
    let spec = spec.expect("validated");
    let enc = &spec.encoders[0];
    let fusion = match spec.architecture {
        Architecture::MulVitTf => format!("L'={}", spec.fusion_depth),
        Architecture::MulVitTwdnn => format!("B={}", spec.twdnn_blocks),
        Architecture::SinVit => "L'=0".into(),
    };
    println!(
        "model {}: {fusion}, D={}, L={}, M={}, heads={}, image {}x{}, cameras {:?}",
        spec.name,
        enc.embed_dim,
        enc.depth,
        spec.camera_count(),
        enc.heads,
        enc.image_width,
        enc.image_height,
        spec.cameras
    );
    println!(
        "train: phases {}+{} epochs, lr {:e} (backbone x{}), wd {}, batch {}, seed {}",
        rc.train.phase1_epochs,
        rc.train.phase2_epochs,
        rc.train.base_lr,
        rc.train.backbone_lr_scale,
        rc.train.weight_decay,
        rc.train.batch_size,
        rc.train.seed
    );

    let (_, _, mut data) = load_data(args.data.as_deref())?;
    check_images(&spec, &data)?;
    data.apply_split(&rc.train.split)?;
    let (mut model, state) = match &args.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.model.spec != spec {
                bail!("checkpoint {} was written for a different model spec", p.display());
            }
            if ck.train.as_ref() != Some(&rc.train) {
                bail!("checkpoint {} was written with a different training config", p.display());
            }
            let Some(state) = ck.state else {
                bail!("checkpoint {} has no training state to resume", p.display());
            };
            (ck.model, Some(state))
        }
        None => (Model::<f32>::new(spec, rc.train.seed)?, None),
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let opts = RunOptions {
        exec: exec(),
        stop_after_steps: args.stop_after_steps,
    };
    let result = trainer::train(&mut model, &data, &rc.train, state, opts, &mut ());
    let state = match result {
        Ok(s) => s,
        Err(e @ mulvit::Error::Diverged { .. }) => {
            let norm = trainer::initial_state(&model, &data, &rc.train)?.normalizer;
            let path = args.out.join("last_good.mvck");
            checkpoint::save(&path, &model, &norm, Some(&rc.train), None)?;
            eprintln!("wrote last good parameters to {}", path.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let last = args.out.join("last.mvck");
    checkpoint::save(&last, &model, &state.normalizer, Some(&rc.train), Some(&state))?;
    let history = args.out.join("history.csv");
    state.history.write_csv(&history)?;
    write_json(
        &sidecar(&history),
        &serde_json::json!({ "command": "train", "preset": args.model.name(), "config": rc }),
    )?;
    if !state.progress.finished {
        println!("stopped after step {}; resume with --resume {}", state.progress.global_step, last.display());
        return Ok(());
    }
    let best_params = state.best.clone().unwrap_or_else(|| model.params.clone());
    let best_model = Model {
        params: best_params,
        ..model.clone()
    };
    let best = args.out.join("best.mvck");
    checkpoint::save(&best, &best_model, &state.normalizer, Some(&rc.train), None)?;
    println!("steps       {}", state.progress.global_step);
    if let (Some(r), Some(e)) = (state.progress.best_val_rmse, state.progress.best_epoch) {
        println!("best val    {r:.3} dB at epoch {e}");
    }
    println!("checkpoint  {}", best.display());
    println!("history     {}", history.display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => bail!("unknown split {s:?} (expected train, val or test)"),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let ck = checkpoint::load(&args.ckpt)?;
    let (root, _, mut data) = load_data(args.data.as_deref())?;
    check_images(&ck.model.spec, &data).context("checkpoint does not match the dataset")?;
    if let Some(t) = &ck.train {
        data.apply_split(&t.split)?;
    }
    let ev = trainer::evaluate(&ck.model, &data, split, &ck.normalizer, exec())?;
    let r = &ev.report;
    write_json(
        &args.report,
        &serde_json::json!({
            "command": "eval",
            "checkpoint": args.ckpt,
            "data": root,
            "split": args.split,
            "model": ck.model.spec.name,
            "metrics": r,
        }),
    )?;
    if let Some(cdf) = &args.cdf {
        write_cdf_csv(cdf, &r.cdf)?;
        write_json(
            &sidecar(cdf),
            &serde_json::json!({ "command": "eval", "checkpoint": args.ckpt, "data": root, "split": args.split }),
        )?;
    }
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!("n           {}", r.n);
    println!("rmse        {:.4} dB", r.rmse);
    println!("mae         {:.4} dB", r.mae);
    println!("pearson r   {}", opt(r.pearson_r));
    println!("r^2         {}", opt(r.r_squared));
    println!("coverage    {:.4} (|e| <= {} dB)", r.coverage, r.threshold_db);
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let report = cost_report(&args.model.spec());
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("model       {}", report.model);
    println!("table       {}", report.summary());
    println!("flops       {}", report.flops);
    println!("params      {}", report.params);
    println!("convention  {}", report.convention);
    println!();
    let width = report.breakdown.iter().map(|i| i.component.len()).max().unwrap_or(9).max(9);
    println!("{:<width$}  {:>12}  {:>14}", "component", "params", "flops");
    for item in &report.breakdown {
        println!("{:<width$}  {:>12}  {:>14}", item.component, item.params, item.flops);
    }
    println!("{:<width$}  {:>12}  {:>14}", "total", report.params, report.flops);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        parallel::set_threads(n);
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

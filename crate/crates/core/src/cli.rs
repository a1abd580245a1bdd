//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 2 on usage errors, 1 on runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compare_report, CompareOptions};
use crate::model::{build_toyformer, load_model, save_model, ArchitectureConfig, ModelGraph};
use crate::navpipe::{run_pipeline, CueHook, DirFrameSource, FrameKind, NavConfig, Navigator};
use crate::profiler::{estimate_energy, profile_model, BlockProfile, EnergyReport, ModelProfile, PowerModel};
use crate::pruner::{prune_model, AllocationPlan, KScoreTable, PruneMethod, PrunePlan, PruneSummary};
use crate::scenegen::{
    calibration_set, generate_scene, generate_walk_sequence, scene_set, write_scene_files, Drift, SceneSpec,
};

/// Offset between calibration scene seeds and evaluation scene seeds.
const EVAL_SEED_OFFSET: u64 = 100_000;

#[derive(Parser, Debug)]
#[command(name = "sparsenav", version, about = "Latency-aware pruning and sidewalk navigation")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a freshly initialised model.
    Build(BuildArgs),
    /// Write synthetic scenes (PPM image + PGM class mask per frame).
    Scenegen(ScenegenArgs),
    /// Time each block of a model.
    Profile(ProfileArgs),
    /// Profile, allocate, rank and cut a model.
    Prune(PruneArgs),
    /// Compare unpruned, random-pruned and activation-pruned models.
    Eval(EvalArgs),
    /// Turn a directory of frames into direction cues.
    Navigate(NavigateArgs),
}

fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range (0, 1)"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("{s:?} must be a positive integer")),
        Ok(v) => Ok(v),
    }
}

fn parse_watts(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("power must be positive, got {v}"))
    }
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 32x32 model with narrow stages, for quick experiments.
    #[arg(long)]
    pub tiny: bool,
}

#[derive(Args, Debug)]
pub struct ScenegenArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8, value_parser = parse_positive)]
    pub count: usize,
    /// Emit one walking sequence drifting left, right or none instead of
    /// independent scenes.
    #[arg(long)]
    pub drift: Option<Drift>,
    #[arg(long, default_value_t = 64, value_parser = parse_positive)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TimingArgs {
    #[arg(long, default_value_t = 20, value_parser = parse_positive)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Device draw in watts, used for every stage.
    #[arg(long, default_value_t = 10.0, value_parser = parse_watts)]
    pub power: f64,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub timing: TimingArgs,
    /// Seed of the probe scene.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.35, value_parser = parse_ratio)]
    pub ratio: f64,
    #[arg(long, default_value_t = PruneMethod::Disha)]
    pub method: PruneMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of calibration scenes.
    #[arg(long, default_value_t = 8, value_parser = parse_positive)]
    pub calib: usize,
    /// Reuse a profile written by `profile` instead of measuring.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Plan audit path; defaults to `<out>.plan.json`.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Activation-pruned model; pruned from `--model` when absent.
    #[arg(long)]
    pub disha: Option<PathBuf>,
    /// Random-pruned model; pruned from `--model` when absent.
    #[arg(long)]
    pub random: Option<PathBuf>,
    #[arg(long, default_value_t = 0.35, value_parser = parse_ratio)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8, value_parser = parse_positive)]
    pub calib: usize,
    #[arg(long, default_value_t = 20, value_parser = parse_positive)]
    pub scenes: usize,
    #[arg(long, default_value_t = 7800.0, value_parser = parse_watts)]
    pub battery_mah: f64,
    #[arg(long, default_value_t = 12.0, value_parser = parse_watts)]
    pub battery_v: f64,
    #[command(flatten)]
    pub timing: TimingArgs,
    /// Write the JSON report here; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NavigateArgs {
    /// Directory of frames. With `--model`, its `.ppm` images are segmented;
    /// without, its `.pgm` class masks are used directly.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = crate::navpipe::DEFAULT_THRESHOLD, value_parser = parse_ratio)]
    pub threshold: f64,
    #[arg(long, default_value_t = crate::navpipe::DEFAULT_WINDOW, value_parser = parse_positive)]
    pub window: usize,
    /// Command run with each cue as its last argument.
    #[arg(long)]
    pub cue_hook: Option<String>,
    /// Also write the log here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What `profile` writes. Everything in it is a measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub timing: ProfileTiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileTiming {
    pub profile: ModelProfile,
    pub energy: EnergyReport,
}

/// What `prune` writes next to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDoc {
    pub ratio: f64,
    pub method: PruneMethod,
    pub seed: u64,
    pub calib: usize,
    pub plan: PrunePlan,
    pub summary: PruneSummary,
    pub timing: PruneTiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneTiming {
    pub blocks: Vec<BlockProfile>,
    pub kscores: KScoreTable,
    pub allocation: AllocationPlan,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn probe_image(model: &ModelGraph, seed: u64) -> Result<crate::Tensor> {
    let cfg = &model.config;
    Ok(generate_scene(&SceneSpec::random(seed, cfg.input_height, cfg.input_width))?.0)
}

fn measure(model: &ModelGraph, seed: u64, t: &TimingArgs) -> Result<ProfileTiming> {
    let profile = profile_model(model, &probe_image(model, seed)?, t.reps, t.warmup)?;
    let energy = estimate_energy(
        &profile.blocks,
        Some(profile.decoder_ms),
        &PowerModel::uniform(t.power, model.num_blocks()),
    )?;
    Ok(ProfileTiming { profile, energy })
}

fn stored_profile(path: &Path, model: &ModelGraph) -> Result<Vec<BlockProfile>> {
    let doc: ProfileDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let blocks = doc.timing.profile.blocks;
    let matches = blocks.len() == model.num_blocks()
        && blocks
            .iter()
            .zip(&model.blocks)
            .all(|(p, b)| p.block == b.index && p.prunable_params == b.prunable_param_count());
    if !matches {
        return Err(Error::Config(format!("{} was profiled on a different model", path.display())));
    }
    Ok(blocks)
}

fn calibration(model: &ModelGraph, seed: u64, n: usize) -> Result<Vec<crate::Tensor>> {
    calibration_set(seed, n, model.config.input_height, model.config.input_width)
}

fn cmd_build(a: &BuildArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = if a.tiny {
        ArchitectureConfig::tiny(a.seed)
    } else {
        ArchitectureConfig::with_seed(a.seed)
    };
    let model = build_toyformer(&cfg)?;
    save_model(&model, &a.out)?;
    writeln!(out, "wrote {} ({} parameters)", a.out.display(), model.param_count())?;
    Ok(())
}

fn cmd_scenegen(a: &ScenegenArgs, out: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let frames: Vec<_> = match a.drift {
        Some(d) => generate_walk_sequence(&SceneSpec::walk(a.seed, a.size, a.size, d), a.count, d)?,
        None => scene_set(a.seed, a.count, a.size, a.size)?,
    };
    for (i, (img, mask)) in frames.iter().enumerate() {
        write_scene_files(&a.out, a.seed, i, img, mask)?;
    }
    writeln!(out, "wrote {} scenes to {}", frames.len(), a.out.display())?;
    Ok(())
}

fn cmd_profile(a: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let doc = ProfileDoc {
        timing: measure(&model, a.seed, &a.timing)?,
    };
    match &a.out {
        Some(p) => {
            write_json(p, &doc)?;
            for b in &doc.timing.profile.blocks {
                writeln!(
                    out,
                    "block {}: {:.3} ms +- {:.3}, {} params",
                    b.block, b.latency_ms, b.latency_stddev_ms, b.param_count
                )?;
            }
        }
        None => writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?,
    }
    Ok(())
}

fn cmd_prune(a: &PruneArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let blocks = match &a.profile {
        Some(p) => stored_profile(p, &model)?,
        None => measure(&model, a.seed, &a.timing)?.profile.blocks,
    };
    let calib = calibration(&model, a.seed, a.calib)?;
    let outcome = prune_model(&model, &blocks, &calib, a.ratio, a.method, a.seed)?;
    save_model(&outcome.model, &a.out)?;
    let audit_path = a.audit.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".plan.json");
        PathBuf::from(p)
    });
    let audit = outcome.audit;
    let s = &audit.summary;
    writeln!(
        out,
        "{} at {}: prunable mass -{:.2}%, parameters {} -> {} ({} groups skipped)",
        a.method,
        a.ratio,
        100.0 * s.prunable_reduction(),
        s.params_before,
        s.params_after,
        audit.plan.skipped.len()
    )?;
    let doc = PruneDoc {
        ratio: a.ratio,
        method: a.method,
        seed: a.seed,
        calib: a.calib,
        plan: audit.plan,
        summary: audit.summary,
        timing: PruneTiming {
            blocks,
            kscores: audit.kscores,
            allocation: audit.allocation,
        },
    };
    write_json(&audit_path, &doc)?;
    writeln!(out, "wrote {} and {}", a.out.display(), audit_path.display())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let base = load_model(&a.model)?;
    let need_prune = a.disha.is_none() || a.random.is_none();
    let (blocks, calib) = if need_prune {
        (
            measure(&base, a.seed, &a.timing)?.profile.blocks,
            calibration(&base, a.seed, a.calib)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let get = |path: &Option<PathBuf>, method| -> Result<ModelGraph> {
        match path {
            Some(p) => load_model(p),
            None => Ok(prune_model(&base, &blocks, &calib, a.ratio, method, a.seed)?.model),
        }
    };
    let disha = get(&a.disha, PruneMethod::Disha)?;
    let random = get(&a.random, PruneMethod::Random)?;
    let (h, w) = (base.config.input_height, base.config.input_width);
    let dataset: Vec<_> = scene_set(a.seed + EVAL_SEED_OFFSET, a.scenes, h, w)?
        .into_iter()
        .map(|(img, mask)| (img, Some(mask)))
        .collect();
    let opts = CompareOptions {
        reps: a.timing.reps,
        warmup: a.timing.warmup,
        power_w: a.timing.power,
        battery_mah: a.battery_mah,
        battery_v: a.battery_v,
    };
    let report = compare_report(&base, &disha, &random, &dataset, &opts)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    write!(out, "{}", report.to_table())?;
    Ok(())
}

fn cmd_navigate(a: &NavigateArgs, out: &mut dyn Write) -> Result<()> {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let num_classes = model.as_ref().map_or(crate::scenegen::NUM_CLASSES, |m| m.num_classes());
    let config = NavConfig {
        threshold: a.threshold,
        window: a.window,
        ..NavConfig::default()
    };
    config.validate(num_classes)?;
    let hook = a.cue_hook.as_deref().map(CueHook::parse).transpose()?;
    let kind = if model.is_some() { FrameKind::Image } else { FrameKind::Mask };
    let mut source = DirFrameSource::open(&a.frames, kind, num_classes)?;
    let mut nav = Navigator::new(config, hook)?;
    let mut log = String::new();
    let mut io_err = None;
    run_pipeline(model.as_ref(), &mut source, &mut nav, |ev| {
        let line = ev.log_line();
        if let Err(e) = writeln!(out, "{line}") {
            io_err.get_or_insert(e);
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(p) = &a.out {
        std::fs::write(p, log)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Build(a) => cmd_build(a, out),
        Command::Scenegen(a) => cmd_scenegen(a, out),
        Command::Profile(a) => cmd_profile(a, out),
        Command::Prune(a) => cmd_prune(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Navigate(a) => cmd_navigate(a, out),
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

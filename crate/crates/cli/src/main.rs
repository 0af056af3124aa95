//! `vp2`: data generation, pretraining, training, evaluation and the
//! ablation suite over MiniALF.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use minialf::Split;
use serde_json::json;
use vp2_core::Scalar;
use vp2_planner::eval::{emit_metrics, eval_threads, load_reports, summary_table, SplitEval};
use vp2_planner::policy::{PolicyBundle, PolicyKind};
use vp2_planner::suite::{run_suite, ArmSpec, BackboneChoice, SuiteConfig, Trainer};
use vp2_planner::{AuxTask, PlannerError, Precision};

use vp2_cli::config::{parse_file, parse_override, resolve};
use vp2_cli::stages::{file_hash, Manifest, Workspace};
use vp2_cli::Usage;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "vp2", version, about = "Visual prompt planners on MiniALF")]
struct Cli {
    /// Config file of `key = value` lines with optional `[section]` headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Data seed (same as `--set data.seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the task splits.
    GenTasks,
    /// Generate expert demonstrations for the training split.
    GenDemos,
    /// Pretrain the language model on the text corpus.
    PretrainLm,
    /// Pretrain the aligned and unaligned visual backbones.
    PretrainVision,
    /// Train one policy for every configured seed.
    Train(TrainArgs),
    /// Evaluate a trained policy on one split.
    Eval(EvalArgs),
    /// Train and evaluate every ablation arm.
    Ablate(AblateArgs),
    /// Re-emit metrics from stored reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PlannerArg {
    Vp2,
    Ignore,
    Captions,
    SaycanTrained,
}

impl PlannerArg {
    fn kind(self) -> PolicyKind {
        match self {
            PlannerArg::Vp2 => PolicyKind::Vp2,
            PlannerArg::Ignore => PolicyKind::Ignore,
            PlannerArg::Captions => PolicyKind::Captions,
            PlannerArg::SaycanTrained => PolicyKind::SaycanTrained,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackboneArg {
    Aligned,
    Unaligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Id,
    Od,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Id => Split::EvalId,
            SplitArg::Od => Split::EvalOd,
        }
    }

    fn label(self) -> &'static str {
        match self {
            SplitArg::Id => "id",
            SplitArg::Od => "od",
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "vp2")]
    planner: PlannerArg,
    /// Auxiliary objectives, comma separated: inv-dyn, captions, goal-pred.
    #[arg(long, value_delimiter = ',')]
    aux: Vec<String>,
    /// Weight of the auxiliary objectives.
    #[arg(long)]
    alpha: Option<f64>,
    /// Keep the language model fixed; train only the projector.
    #[arg(long)]
    frozen_lm: bool,
    /// Visual prompt length m.
    #[arg(long)]
    prompt_size: Option<usize>,
    /// Train on the first N demonstrations.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    backbone: Option<BackboneArg>,
    /// Start from a randomly initialised language model.
    #[arg(long)]
    no_pretrain: bool,
    /// Initialise the projector with caption pretraining.
    #[arg(long)]
    clipcap: bool,
    /// Policy name under `<out>/policies`; derived from the flags by default.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// A policy directory written by `train` (one seed or all seeds).
    #[arg(long)]
    planner_ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "id")]
    split: SplitArg,
    /// Evaluate a SayCan checkpoint with ground-truth affordances.
    #[arg(long)]
    saycan_oracle: bool,
    /// Expected planner type of the checkpoint.
    #[arg(long, value_enum)]
    planner: Option<PlannerArg>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Run only these arms (comma separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "acceptance")]
    arms: Vec<String>,
    /// Run the arms the ordinal acceptance checks compare.
    #[arg(long)]
    acceptance: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding `reports.json`; defaults to `<out>/ablate`.
    #[arg(long)]
    results: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes the outer message already repeats.
fn message(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.ends_with(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(p) = cause.downcast_ref::<PlannerError>() {
            return match p {
                p if p.is_numeric() => 4,
                PlannerError::Config(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn run(cli: Cli) -> Result<()> {
    let mut entries = Vec::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        entries.extend(parse_file(&text)?);
    }
    for s in &cli.overrides {
        entries.push(parse_override(s)?);
    }
    if let Some(seed) = cli.seed {
        entries.push(("data.seed".into(), seed.to_string()));
    }
    let resolved = resolve(&entries)?;
    let mut config = resolved.config;
    if !resolved.explicit.contains("threads") {
        config.threads = eval_threads();
    }
    let ws = Workspace {
        root: cli.out,
        config,
    };
    match ws.config.train.precision {
        Precision::F32 => dispatch::<f32>(&ws, &cli.command),
        Precision::F64 => dispatch::<f64>(&ws, &cli.command),
    }
}

fn dispatch<T: Scalar + Sync>(ws: &Workspace, cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenTasks => {
            let tasks = ws.gen_tasks()?;
            println!("{} tasks -> {}", tasks.len(), ws.dir("tasks").display());
        }
        Command::GenDemos => {
            let demos = ws.gen_demos()?;
            println!("{} demos -> {}", demos.len(), ws.dir("demos").display());
        }
        Command::PretrainLm => {
            let lang = ws.pretrain_lm::<T>()?;
            println!(
                "perplexity {:.2} -> {:.2} ({})",
                lang.report.perplexity_before,
                lang.report.perplexity_after,
                ws.dir("lm").display()
            );
        }
        Command::PretrainVision => {
            let vision = ws.pretrain_vision::<T>()?;
            println!(
                "retrieval@8 {:.3} ({})",
                vision.retrieval,
                ws.dir("vision").display()
            );
        }
        Command::Train(args) => train::<T>(ws, args)?,
        Command::Eval(args) => eval::<T>(ws, args)?,
        Command::Ablate(args) => ablate::<T>(ws, args)?,
        Command::Report(args) => {
            let dir = args.results.clone().unwrap_or_else(|| ws.dir("ablate"));
            if !dir.join("reports.json").is_file() {
                return Err(usage(format!("no reports.json in {}", dir.display())));
            }
            let reports = load_reports(&dir)?;
            emit_metrics(&reports, &dir)?;
            print!("{}", summary_table(&reports));
        }
    }
    Ok(())
}

/// Builds the arm from the train flags, rejecting combinations that do not
/// apply to the chosen planner.
fn arm_from_args(cfg: &SuiteConfig, args: &TrainArgs) -> Result<ArmSpec> {
    let kind = args.planner.kind();
    let visual_only = [
        (!args.aux.is_empty(), "--aux"),
        (args.frozen_lm, "--frozen-lm"),
        (args.prompt_size.is_some(), "--prompt-size"),
        (args.backbone.is_some(), "--backbone"),
        (args.clipcap, "--clipcap"),
    ];
    if kind != PolicyKind::Vp2 {
        if let Some((_, flag)) = visual_only.iter().find(|(set, _)| *set) {
            return Err(usage(format!("{flag} applies only to --planner vp2")));
        }
    }
    if args.alpha.is_some() && args.aux.is_empty() {
        return Err(usage("--alpha needs --aux"));
    }
    let aux = args
        .aux
        .iter()
        .map(|s| s.parse::<AuxTask>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let mut arm = ArmSpec::new(
        kind.name(),
        kind,
        args.prompt_size.unwrap_or(cfg.prompt_size),
    );
    arm.aux = aux;
    arm.frozen_lm = args.frozen_lm;
    arm.clipcap = args.clipcap;
    arm.pretrained_lm = !args.no_pretrain;
    arm.samples = args.samples;
    if args.backbone == Some(BackboneArg::Unaligned) {
        arm.backbone = BackboneChoice::Unaligned;
    }
    arm.name = match &args.name {
        Some(n) => n.clone(),
        None => derived_name(&arm),
    };
    if arm.name.is_empty() || arm.name.contains(['/', '\\']) || arm.name.starts_with('.') {
        return Err(usage(format!("invalid policy name `{}`", arm.name)));
    }
    Ok(arm)
}

fn derived_name(arm: &ArmSpec) -> String {
    let mut parts = vec![arm.kind.name().to_string()];
    if arm.kind == PolicyKind::Vp2 {
        parts.push(format!("m{}", arm.prompt_size));
    }
    if arm.backbone == BackboneChoice::Unaligned {
        parts.push("unaligned".into());
    }
    if arm.frozen_lm {
        parts.push("frozen".into());
    }
    if arm.clipcap {
        parts.push("clipcap".into());
    }
    if !arm.pretrained_lm {
        parts.push("scratch".into());
    }
    for t in &arm.aux {
        parts.push(t.name().to_string());
    }
    if let Some(n) = arm.samples {
        parts.push(format!("n{n}"));
    }
    parts.join("-")
}

fn train<T: Scalar + Sync>(ws: &Workspace, args: &TrainArgs) -> Result<()> {
    let mut cfg = ws.config.clone();
    if let Some(a) = args.alpha {
        cfg.train.aux.alpha = a;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let arm = arm_from_args(&cfg, args)?;
    let assets = ws.assets::<T>()?;
    let trainer = Trainer {
        assets: &assets,
        config: &cfg,
    };
    let root = ws.dir("policies").join(&arm.name);
    for &seed in &cfg.seeds {
        let (bundle, note) = trainer.train(&arm, seed)?;
        let dir = root.join(format!("seed-{seed}"));
        bundle.save(&dir)?;
        std::fs::write(dir.join("train.json"), serde_json::to_string_pretty(&note)?)?;
        let outputs: Vec<PathBuf> = ["manifest.json", "vocab.txt", "params.ckpt"]
            .iter()
            .map(|f| dir.join(f))
            .collect();
        let m = Manifest::new(
            "train",
            json!({ "arm": arm, "train": cfg.train, "seed": seed, "suite": cfg }),
            &ws.asset_inputs(),
            &outputs,
        )?;
        std::fs::write(dir.join("stage.json"), serde_json::to_string_pretty(&m)?)?;
        let c = note.curve.train();
        println!(
            "{} seed {seed}: loss {:.4} -> {:.4} in {:.0}s -> {}",
            arm.name,
            c.first().copied().unwrap_or(f64::NAN),
            c.last().copied().unwrap_or(f64::NAN),
            note.seconds,
            dir.display()
        );
    }
    Ok(())
}

/// Seed directories under a policy directory, or the directory itself.
fn seed_dirs(ckpt: &Path) -> Result<Vec<PathBuf>> {
    if !ckpt.is_dir() {
        return Err(usage(format!("no checkpoint at {}", ckpt.display())));
    }
    if ckpt.join("params.ckpt").is_file() {
        return Ok(vec![ckpt.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(ckpt)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("params.ckpt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(usage(format!("no checkpoint under {}", ckpt.display())));
    }
    Ok(dirs)
}

fn seed_of(dir: &Path, fallback: u64) -> u64 {
    dir.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("seed-"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(fallback)
}

fn eval<T: Scalar + Sync>(ws: &Workspace, args: &EvalArgs) -> Result<()> {
    if args.saycan_oracle {
        if let Some(p) = args.planner {
            if p != PlannerArg::SaycanTrained {
                return Err(usage(format!(
                    "--saycan-oracle conflicts with --planner {}",
                    p.kind().name()
                )));
            }
        }
    }
    let dirs = seed_dirs(&args.planner_ckpt)?;
    let tasks: Vec<_> = ws
        .tasks()?
        .into_iter()
        .filter(|t| t.split == args.split.split())
        .collect();
    let cfg = &ws.config;
    let ev = SplitEval::new(args.split.split(), &tasks, cfg.data.step_cap, cfg.threads)?;
    let mut runs = Vec::new();
    let mut samples = cfg.train_demos();
    let mut kind_name = String::new();
    for (i, dir) in dirs.iter().enumerate() {
        let mut bundle =
            PolicyBundle::<T>::load(dir).with_context(|| format!("loading {}", dir.display()))?;
        if let Some(p) = args.planner {
            if p.kind() != bundle.kind {
                return Err(usage(format!(
                    "checkpoint holds a {} policy, not {}",
                    bundle.kind.name(),
                    p.kind().name()
                )));
            }
        }
        if args.saycan_oracle {
            if !bundle.kind.is_saycan() {
                return Err(usage(format!(
                    "--saycan-oracle needs a SayCan checkpoint, got {}",
                    bundle.kind.name()
                )));
            }
            bundle = bundle.with_kind(PolicyKind::SaycanOracle);
        }
        if let Some(cap) = bundle.train_config.dataset_cap {
            samples = samples.min(cap);
        }
        kind_name = bundle.kind.name().to_string();
        let hash = bundle.manifest_hash()?;
        let seed = seed_of(dir, i as u64);
        runs.push(ev.run_seed(seed, hash, || bundle.agent())?);
    }
    let name = args
        .planner_ckpt
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .unwrap_or(kind_name);
    let name = if args.saycan_oracle {
        format!("{name}-oracle")
    } else {
        name
    };
    let report = ev.report(&name, runs, samples, None);
    let out = ws
        .dir("eval")
        .join(format!("{name}-{}", args.split.label()));
    emit_metrics(std::slice::from_ref(&report), &out)?;
    let mut inputs = vec![ws.dir("tasks").join("tasks.jsonl")];
    inputs.extend(dirs.iter().map(|d| d.join("params.ckpt")));
    let m = Manifest::new(
        "eval",
        json!({
            "split": args.split.label(),
            "saycan_oracle": args.saycan_oracle,
            "step_cap": cfg.data.step_cap,
            "data_seed": cfg.data.seed,
        }),
        &inputs,
        &[out.join("results.csv")],
    )?;
    m.write(&out)?;
    print!("{}", summary_table(std::slice::from_ref(&report)));
    println!("-> {}", out.display());
    Ok(())
}

fn ablate<T: Scalar + Sync>(ws: &Workspace, args: &AblateArgs) -> Result<()> {
    let cfg = &ws.config;
    let all = cfg.arms();
    let arms: Vec<ArmSpec> = if args.acceptance {
        cfg.acceptance_arms()
    } else if args.arms.is_empty() {
        all
    } else {
        let mut picked = Vec::new();
        for name in &args.arms {
            match all.iter().find(|a| &a.name == name) {
                Some(a) => picked.push(a.clone()),
                None => bail!(Usage(format!(
                    "unknown arm `{name}`; known: {}",
                    all.iter()
                        .map(|a| a.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))),
            }
        }
        picked
    };
    let assets = ws.assets::<T>()?;
    let outcome = run_suite(&assets, cfg, &arms)?;
    let out = ws.dir("ablate");
    emit_metrics(&outcome.reports, &out)?;
    std::fs::write(
        out.join("train.json"),
        serde_json::to_string_pretty(&outcome.notes)?,
    )?;
    let m = Manifest::new(
        "ablate",
        json!({ "suite": cfg, "arms": arms }),
        &ws.asset_inputs(),
        &[out.join("results.csv")],
    )?;
    m.write(&out)?;
    print!("{}", summary_table(&outcome.reports));
    println!(
        "lm perplexity {:.2} -> {:.2}; retrieval@8 {:.3}; results.csv {}",
        outcome.pretrain_perplexity.0,
        outcome.pretrain_perplexity.1,
        outcome.retrieval,
        &file_hash(&out.join("results.csv"))?[..16]
    );
    Ok(())
}

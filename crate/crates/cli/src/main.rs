use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ulda::pipeline::checkpoint::{Checkpoint, RectifierMode, CHECKPOINT_MAGIC};
use ulda::pipeline::config::RunConfig;
use ulda::pipeline::run::{
    baseline_checkpoint, evaluate, guard_overwrite, persist_stage1, run_stage1, run_stage2,
    write_file, Context,
};
use ulda::pipeline::selfcheck::{run_selfcheck, SelfcheckOptions};
use ulda::simulation::StyleBank;
use ulda::toyworld::{self, generate_source, make_eval_split, ToySpec, MANIFEST_FILE};
use ulda::{Result, UldaError};

#[derive(Debug, Parser)]
#[command(
    name = "ulda",
    version,
    about = "Two-stage language-driven adaptation on the toy world"
)]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; defaults to the matching entry under `[paths]`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing artifacts produced under a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic source set and shifted eval split.
    MakeToyData,
    /// Mine per-image styles for every target domain.
    Stage1 {
        /// Dataset directory when it is not the configured one.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fine-tune the shared head on simulated features.
    Stage2 {
        /// Style bank to train from.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Write the source-only head instead (no simulated features).
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate a checkpoint on the eval split; writes a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the invariant suite and print one line per check.
    Selfcheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| UldaError::io(path, e))
}

fn check_spec(found: &ToySpec, cfg: &RunConfig, dir: &Path) -> Result<()> {
    if found.digest() != cfg.toy.digest() {
        return Err(UldaError::Config(format!(
            "dataset in {} was generated from a different toy spec; rerun make-toy-data",
            dir.display()
        )));
    }
    Ok(())
}

fn make_toy_data(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    if !cli.force && dir.join(MANIFEST_FILE).exists() {
        let existing = toyworld::read_spec(&dir)?;
        if existing.digest() != cfg.toy.digest() {
            return Err(UldaError::WouldOverwrite(dir));
        }
    }
    let source = generate_source(&cfg.toy)?;
    let split = make_eval_split(&cfg.toy)?;
    let ctx = Context::new(cfg.clone())?;
    let sep = toyworld::check_domain_separability(ctx.encoders.vision.as_ref(), &source, &split)?;
    toyworld::write_dataset(&dir, &cfg.toy, &source, &split)?;
    println!(
        "wrote {} train and {} eval images to {} (domain separation {:.2}x spread)",
        source.samples.len(),
        split.samples.len(),
        dir.display(),
        sep.worst_ratio()
    );
    Ok(())
}

fn stage1(cli: &Cli, mut cfg: RunConfig, dataset: Option<PathBuf>) -> Result<()> {
    if let Some(d) = dataset {
        cfg.paths.dataset = d;
    }
    if let Some(out) = &cli.out {
        cfg.paths.bank = out.clone();
    }
    let (spec, source) = toyworld::load_source(&cfg.paths.dataset)?;
    check_spec(&spec, &cfg, &cfg.paths.dataset)?;
    let ctx = Context::new(cfg)?;
    let out = run_stage1(&ctx, &source)?;
    persist_stage1(&out, &ctx, cli.force)?;
    let failed = out.bank.entries.len() - out.bank.ok_entries().count();
    let (first, last) = (out.log.first(), out.log.last());
    println!(
        "mined {} styles ({failed} failed) -> {}",
        out.bank.entries.len(),
        ctx.cfg.paths.bank.display()
    );
    if let (Some(a), Some(b)) = (first, last) {
        println!(
            "dc {:.4} -> {:.4}",
            a.breakdown.components.dc, b.breakdown.components.dc
        );
    }
    Ok(())
}

fn stage2(cli: &Cli, mut cfg: RunConfig, bank: Option<PathBuf>, baseline: bool) -> Result<()> {
    if let Some(b) = bank {
        cfg.paths.bank = b;
    }
    let path = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let (spec, source) = toyworld::load_source(&cfg.paths.dataset)?;
    check_spec(&spec, &cfg, &cfg.paths.dataset)?;
    let ctx = Context::new(cfg)?;
    guard_overwrite(&path, CHECKPOINT_MAGIC, &ctx.cfg.digest(), cli.force)?;
    let ckpt = if baseline {
        baseline_checkpoint(&ctx, &source)?
    } else {
        let bank = StyleBank::from_bytes(&read(&ctx.cfg.paths.bank)?)?;
        let mode = if ctx.cfg.stage2.rectifier {
            RectifierMode::Learned
        } else {
            RectifierMode::Off
        };
        let out = run_stage2(&ctx, &source, &bank, mode)?;
        let log: String = out
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("iter={i} seg={l:e}\n"))
            .collect();
        write_file(&path.with_extension("log"), log.as_bytes())?;
        if let (Some(a), Some(b)) = (out.losses.first(), out.losses.last()) {
            println!("seg loss {a:.4} -> {b:.4}");
        }
        out.checkpoint
    };
    write_file(&path, &ckpt.to_bytes())?;
    println!("checkpoint ({}) -> {}", ckpt.rectifier_mode, path.display());
    Ok(())
}

fn eval(cli: &Cli, cfg: RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let report_path = cli.out.clone().unwrap_or_else(|| cfg.paths.report.clone());
    let ckpt = Checkpoint::from_bytes(&read(&ckpt_path)?)?;
    let (spec, split) = toyworld::load_eval(&cfg.paths.dataset)?;
    check_spec(&spec, &cfg, &cfg.paths.dataset)?;
    let ctx = Context::new(cfg)?;
    let report = evaluate(&ctx, &ckpt, &split)?;
    let json = report.to_json()?;
    if !cli.force && report_path.exists() && read(&report_path)? != json.as_bytes() {
        return Err(UldaError::WouldOverwrite(report_path));
    }
    write_file(&report_path, json.as_bytes())?;
    for d in &report.domains {
        println!(
            "{:<12} mIoU {:6.2}  mAcc {:6.2}",
            d.domain_id, d.miou, d.macc
        );
    }
    println!(
        "mean mIoU {:.2} -> {}",
        report.mean_miou,
        report_path.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::MakeToyData => make_toy_data(cli, &cfg)?,
        Command::Stage1 { dataset } => stage1(cli, cfg, dataset.clone())?,
        Command::Stage2 { bank, baseline } => stage2(cli, cfg, bank.clone(), *baseline)?,
        Command::Eval { checkpoint } => eval(cli, cfg, checkpoint.clone())?,
        Command::Selfcheck => {
            let report = run_selfcheck(&SelfcheckOptions {
                seed: cfg.seed,
                ..SelfcheckOptions::default()
            });
            print!("{}", report.render());
            if let Some(out) = &cli.out {
                write_file(out, report.render().as_bytes())?;
            }
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plo_core::commands::{self, Axis};
use plo_core::config::RunConfig;
use plo_core::eval::World;
use plo_core::run::{train_run, Session};
use plo_core::selfcheck::DEFAULT_TOLERANCE;
use plo_core::space::Split;
use plo_core::{Error, Result};

#[derive(Parser)]
#[command(name = "plo", about = "Progressive observation models for compositional recognition")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; overrides the config `out` key.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to a directory.
    GenData,
    /// Write template observation cues for every composition.
    GenCues {
        /// Cues per composition; defaults to model.cues.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a model and write a run directory.
    Train,
    /// Evaluate a run directory's checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// closed or open; defaults to the run's config.
        #[arg(long)]
        world: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train one model per setting along an axis and tabulate test metrics.
    Ablate {
        /// observation-order, cue-count or fusion-lambda.
        #[arg(long)]
        axis: String,
    },
    /// Write cross-attention maps for one evaluation image.
    DumpAttn {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Composition ("state object") whose cue chain is used; plo-llm only.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Finite-difference checks of every op and both training losses.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

/// The effective config and the text that reproduces it. Command-line
/// overrides force a re-serialization.
fn load_config(cli: &Cli) -> Result<(RunConfig, String)> {
    let (mut cfg, text) = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let c = RunConfig::default();
            let t = c.to_text()?;
            (c, t)
        }
    };
    let mut overridden = false;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        overridden = true;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    let text = if overridden { cfg.to_text()? } else { text };
    Ok((cfg, text))
}

fn out_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::Config("no output path: pass --out or set `out` in the config".into()))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split '{s}' (expected train, val or test)")))
}

fn print_report(ev: &plo_core::run::Evaluation) -> Result<()> {
    for w in &ev.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(t) = ev.threshold {
        eprintln!("feasibility threshold: {t}");
    }
    println!("{}", ev.report.to_json()?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, text) = load_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            let dir = commands::gen_data(&cfg, &out_path(&cfg)?)?;
            println!("wrote {}", dir.display());
        }
        Command::GenCues { n } => {
            let out = out_path(&cfg)?;
            commands::gen_cues(&cfg, n.unwrap_or(cfg.model.cues), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train => {
            let out = out_path(&cfg)?;
            let r = train_run(cfg, &text, &out)?;
            for rec in &r.training.records {
                eprintln!("{}", serde_json::to_string(rec)?);
            }
            eprintln!("best epoch: {}", r.training.best_epoch);
            print_report(&r.test)?;
            println!("wrote {}", r.dir.display());
        }
        Command::Eval { run, world, split } => {
            let world = match world {
                Some(w) => Some(World::parse(w).ok_or_else(|| Error::Config(format!("unknown world '{w}'")))?),
                None => None,
            };
            let ev = commands::eval_run(run, parse_split(split)?, world, cli.out.as_deref())?;
            print_report(&ev)?;
        }
        Command::Ablate { axis } => {
            let axis = Axis::parse(axis).ok_or_else(|| {
                Error::Config(format!(
                    "unknown axis '{axis}' (expected observation-order, cue-count or fusion-lambda)"
                ))
            })?;
            let rows = commands::ablate(&cfg, axis, |r| {
                eprintln!("{} done: AUC {}", r.setting, r.metrics.auc);
            })?;
            let table = commands::ablation_csv(&rows);
            print!("{table}");
            if let Some(out) = &cli.out {
                write_new(out, &table)?;
            }
        }
        Command::DumpAttn { run, index, split, pair } => {
            let session = Session::open(run)?;
            let pair = match pair {
                Some(name) => Some(find_pair(&session, name)?),
                None => None,
            };
            let maps = commands::attention_maps(&session, parse_split(split)?, *index, pair)?;
            if maps.is_empty() {
                eprintln!("this model makes no refinement for the image; nothing to write");
                return Ok(());
            }
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::Config("dump-attn needs --out".into()))?;
            for name in commands::dump_attention(&maps, &out)? {
                println!("{}", out.join(name).display());
            }
        }
        Command::Gradcheck { instances } => {
            let results = commands::gradcheck(cfg.seed, *instances)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.passed(DEFAULT_TOLERANCE);
                failed += usize::from(!ok);
                println!(
                    "{} {:<40} n={:<4} max_rel_err={:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    r.name,
                    r.instances,
                    r.max_rel_err
                );
            }
            if failed > 0 {
                return Err(Error::Validation(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn find_pair(session: &Session, name: &str) -> Result<usize> {
    let sp = &session.data.space;
    (0..sp.num_pairs())
        .find(|&p| sp.pair_name(p) == name)
        .ok_or_else(|| Error::Config(format!("unknown composition '{name}'")))
}

fn write_new(path: &Path, text: &str) -> Result<()> {
    if path.exists() {
        return Err(Error::Config(format!("output {} already exists", path.display())));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

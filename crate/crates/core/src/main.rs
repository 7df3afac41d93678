use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use monolig::expcli::{
    cmd_eval, cmd_generate, cmd_run, cmd_score_file, load_config, resolve_out_dir, write_atomic, DetectionDump,
    DumpSource, ExperimentConfig,
};
use monolig::scoring::ScoringConfig;
use monolig::synthworld::Dataset;
use monolig::{Error, Result};

/// Active learning for monocular 3D detection with LiDAR guidance, on a
/// synthetic world.
///
/// Any `--key=value` argument whose key is not a flag of the subcommand
/// overrides the config field at that dotted path, e.g.
/// `--models.lambda_u=0.1` or `--seeds=[1,2,3]`.
#[derive(Parser)]
#[command(name = "monolig", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset of the config's world.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output root>/dataset.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run (or resume) every method and seed of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the frames of a detection dump by acquisition score.
    ScoreFile {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau_match: f64,
        /// Restrict variance and inconsistency to the box location.
        #[arg(long)]
        location_only: bool,
        /// Ranked CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP of dumped detections against a dataset's objects.
    Eval {
        #[arg(long)]
        dump: PathBuf,
        /// `dataset.json` holding the ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        /// `teacher` or `member:K`.
        #[arg(long, default_value = "member:0")]
        source: String,
    },
}

const FLAGS: [&str; 10] = [
    "config", "out", "dump", "tau-match", "location-only", "gt", "iou", "source", "help", "version",
];

/// Pull `--key=value` config overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let parsed = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .filter(|(k, _)| !FLAGS.contains(k));
        match parsed {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn parse_source(s: &str) -> Result<DumpSource> {
    if s == "teacher" {
        return Ok(DumpSource::Teacher);
    }
    s.strip_prefix("member:")
        .and_then(|k| k.parse().ok())
        .map(DumpSource::Member)
        .ok_or_else(|| Error::usage(format!("--source must be `teacher` or `member:K`, got `{s}`")))
}

fn no_overrides(overrides: &[(String, String)]) -> Result<()> {
    match overrides.first() {
        Some((k, _)) => Err(Error::usage(format!("unknown flag --{k}"))),
        None => Ok(()),
    }
}

fn run(cmd: Command, overrides: &[(String, String)]) -> Result<()> {
    match cmd {
        Command::Generate { config, out } => {
            let cfg: ExperimentConfig = load_config(&config, overrides)?;
            let path = out.unwrap_or_else(|| resolve_out_dir(None, None).join("dataset.json"));
            let ds = cmd_generate(&cfg.world, &path)?;
            println!("wrote {} scenes to {}", ds.scenes.len(), path.display());
        }
        Command::Run { config, out } => {
            let cfg: ExperimentConfig = load_config(&config, overrides)?;
            let dir = resolve_out_dir(out.as_deref(), cfg.out_dir.as_deref());
            let res = cmd_run(&cfg, &dir)?;
            for (name, m) in &res.aggregate.methods {
                let fin = m.final_ap.map_or("n/a".to_string(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
                let sav = m
                    .savings_vs_random
                    .and_then(|s| s.savings)
                    .map_or("n/a".to_string(), |s| format!("{:+.1} pp", 100.0 * s));
                println!("{name}: final AP {fin}, data savings vs random {sav}");
            }
            println!("results in {}", dir.display());
        }
        Command::ScoreFile {
            dump,
            tau_match,
            location_only,
            out,
        } => {
            no_overrides(overrides)?;
            let (dump, _) = DetectionDump::load(&dump)?;
            let cfg = ScoringConfig {
                tau_match,
                location_only,
                ..ScoringConfig::default()
            };
            match out {
                Some(path) => {
                    let mut buf = Vec::new();
                    cmd_score_file(&dump, &cfg, &mut buf)?;
                    write_atomic(&path, &buf)?;
                }
                None => {
                    cmd_score_file(&dump, &cfg, io::stdout().lock())?;
                }
            }
        }
        Command::Eval { dump, gt, iou, source } => {
            no_overrides(overrides)?;
            let source = parse_source(&source)?;
            let (dump, _) = DetectionDump::load(&dump)?;
            let text = fs::read_to_string(&gt).map_err(|e| Error::io(&gt, e))?;
            let out = cmd_eval(&dump, &Dataset::from_json(&text)?, source, iou)?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

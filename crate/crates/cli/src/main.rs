//! `tar2` command-line harness.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime fault,
//! 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tar2::analysis::RedistributionMode;
use tar2::config::ExperimentConfig;
use tar2::experiment::{self, default_out_root, SweepGrid, OUT_ROOT_ENV};
use tar2::Error;

#[derive(Parser, Debug)]
#[command(name = "tar2", version, about = "Temporal-agent reward redistribution lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Preset name or path to a TOML file.
    #[arg(long)]
    config: Option<String>,
    /// Seed count (`5` runs seeds 0..5) or a comma-separated list (`3,7`).
    #[arg(long)]
    seeds: Option<String>,
    /// `KEY=VAL`, where KEY is a dotted path or a unique leaf name. Repeatable.
    #[arg(long = "override", value_name = "KEY=VAL")]
    overrides: Vec<String>,
    /// Output directory. Defaults to a subdirectory of the output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rollout worker threads.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RedistributionMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed and write metrics, checkpoints and a summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue a single-seed run from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and export a credit heatmap.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Act greedily instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suite and print a pass/fail table.
    Verify {
        /// Smaller sample counts.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare redistribution modes under shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes.
        #[arg(long, default_value = "tar2,no_outcome,no_inverse_dynamics,no_normalization")]
        arms: String,
    },
    /// Train every point of a configuration grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep file with a `[grid]` table, or `tar2` for the built-in grid.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 64)]
        max_runs: usize,
    },
}

fn parse_mode(s: &str) -> Result<RedistributionMode, String> {
    RedistributionMode::parse(s).map_err(|e| e.to_string())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::Config(format!("cannot parse seeds '{s}'"));
    if s.contains(',') {
        return s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect();
    }
    let n: u64 = s.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(Error::Config("seed count must be positive".into()));
    }
    Ok((0..n).collect())
}

fn config_source(common: &Common) -> Result<(String, Vec<String>), Error> {
    let text = match &common.config {
        None => String::new(),
        Some(s) => match tar2::config::PRESETS.iter().find(|(name, _)| name == s) {
            Some((_, body)) => body.to_string(),
            None => std::fs::read_to_string(s).map_err(|e| Error::Config(format!("cannot read config '{s}': {e}")))?,
        },
    };
    let mut overrides = common.overrides.clone();
    if let Some(m) = common.mode {
        overrides.push(format!("mode=\"{m}\""));
    }
    if let Some(s) = &common.seeds {
        let list: Vec<String> = parse_seeds(s)?.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    if let Some(t) = common.threads {
        overrides.push(format!("threads={t}"));
    }
    Ok((text, overrides))
}

fn out_dir(explicit: &Option<PathBuf>, kind: &str, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| default_out_root().join(kind).join(name))
}

fn config_name(cfg: &ExperimentConfig, common: &Common) -> String {
    let base = common
        .config
        .as_deref()
        .map(|c| Path::new(c).file_stem().and_then(|s| s.to_str()).unwrap_or(c).to_string())
        .unwrap_or_else(|| "default".into());
    format!("{base}_{}", cfg.mode)
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Train { common, resume } => {
            let (text, overrides) = config_source(&common)?;
            let cfg = ExperimentConfig::from_toml_str(&text, &overrides)?;
            let out = out_dir(&common.out, "train", &config_name(&cfg, &common));
            if let Some(ckpt) = resume {
                let [seed] = cfg.seeds[..] else {
                    return Err(Error::Config("--resume needs exactly one seed".into()));
                };
                let run = experiment::run_seed(&cfg, seed, &out.join(format!("seed_{seed}")), Some(&ckpt))?;
                println!("{}", serde_json::to_string_pretty(&run.result)?);
                return Ok(Outcome::Ok);
            }
            let (summary, _) = experiment::train(&cfg, &out)?;
            println!(
                "{} on {:?}: success AUC {:.3} ± {:.3}, final success {:.3} ± {:.3}, final return {:.3} ± {:.3} ({} seeds) -> {}",
                summary.mode,
                summary.env,
                summary.success_auc.mean,
                summary.success_auc.ci95,
                summary.final_success.mean,
                summary.final_success.ci95,
                summary.final_mean_return.mean,
                summary.final_mean_return.ci95,
                summary.seeds.len(),
                out.display()
            );
            Ok(Outcome::Ok)
        }
        Command::Eval { checkpoint, episodes, seed, greedy, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
            let r = experiment::eval_checkpoint(&checkpoint, episodes, seed, greedy, &out)?;
            println!(
                "success {:.3}, mean return {:.3} over {} episodes; heatmap {}",
                r.report.success_rate,
                r.report.mean_return,
                r.report.episodes,
                r.heatmap.display()
            );
            Ok(Outcome::Ok)
        }
        Command::Verify { quick, seed, out } => {
            let (results, ok) = experiment::verify(quick, seed, out.as_deref())?;
            for r in &results {
                println!("{r}");
            }
            println!("{}", if ok { "all checks passed" } else { "verification FAILED" });
            Ok(if ok { Outcome::Ok } else { Outcome::VerificationFailed })
        }
        Command::Ablate { common, arms } => {
            let (text, overrides) = config_source(&common)?;
            let cfg = ExperimentConfig::from_toml_str(&text, &overrides)?;
            let arms: Vec<RedistributionMode> =
                arms.split(',').map(|a| RedistributionMode::parse(a.trim())).collect::<Result<_, _>>()?;
            let out = out_dir(&common.out, "ablate", &config_name(&cfg, &common));
            let ranking = experiment::ablate(&cfg, &arms, &out)?;
            println!("{:<4} {:<22} {:>12} {:>12}", "rank", "mode", "success_auc", "final_return");
            for (i, r) in ranking.iter().enumerate() {
                println!(
                    "{:<4} {:<22} {:>6.3}±{:<5.3} {:>12.3}",
                    i + 1,
                    r.mode.as_str(),
                    r.success_auc.mean,
                    r.success_auc.ci95,
                    r.final_mean_return.mean
                );
            }
            Ok(Outcome::Ok)
        }
        Command::Sweep { common, grid, max_runs } => {
            let (text, overrides) = config_source(&common)?;
            let base = ExperimentConfig::from_toml_str(&text, &overrides)?;
            let grid = SweepGrid::load(&grid)?;
            let out = out_dir(&common.out, "sweep", &config_name(&base, &common));
            let points = experiment::sweep(&text, &overrides, &grid, max_runs, &out)?;
            for p in &points {
                println!("{:>4} auc {:.3} return {:.3}  {}", p.index, p.success_auc.mean, p.final_mean_return.mean, p.overrides.join(" "));
            }
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    log::debug!("output root from {OUT_ROOT_ENV}: {}", default_out_root().display());
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(3),
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

//! Orchestration behind the CLI: per-seed runs, evaluation, ablations and sweeps.
//!
//! Output layout for one experiment directory:
//!
//! ```text
//! <out>/summary.json
//! <out>/seed_<s>/metrics.jsonl
//! <out>/seed_<s>/checkpoint.bin
//! <out>/seed_<s>/summary.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use toml::{Table, Value};

use crate::analysis::{export_weight_heatmap, RedistributionMode};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::trainer::{collect_episodes, episode_seed, evaluate, EvalReport, IterationMetrics, TrainSummary, Trainer};
use crate::verify::{run_suite, CheckResult};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TAR2_OUT_DIR";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Mean with a 95% Student-t interval half-width over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub ci95: f64,
    pub values: Vec<f64>,
}

impl SeedStat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map(|d| d.inverse_cdf(0.975)).unwrap_or(1.96);
            t * (var / n as f64).sqrt()
        };
        Self { mean, ci95, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub summary: TrainSummary,
    pub eval: Option<EvalReport>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub env: EnvKind,
    pub mode: RedistributionMode,
    pub config_hash: String,
    pub budget_episodes: usize,
    pub success_auc: SeedStat,
    pub final_success: SeedStat,
    pub final_mean_return: SeedStat,
    pub violation_rate: SeedStat,
    pub seeds: Vec<SeedResult>,
}

/// A finished run with its in-memory metric history.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub result: SeedResult,
    pub history: Vec<IterationMetrics>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    BufReader::new(File::open(path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Train one seed into `dir`, optionally continuing from a checkpoint.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, resume: Option<&Path>) -> Result<SeedRun> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let metrics_path = dir.join("metrics.jsonl");
    let ckpt_path = dir.join("checkpoint.bin");
    let (mut trainer, mut history) = match resume {
        Some(p) => {
            let t = checkpoint::load(p, Some(&hash), false)?;
            if t.seed != seed {
                return Err(Error::Checkpoint(format!("checkpoint is for seed {}, not {seed}", t.seed)));
            }
            // Keep the lines written up to the checkpoint, drop anything after it.
            let kept: Vec<IterationMetrics> = if metrics_path.exists() {
                read_metrics(&metrics_path)?.into_iter().take(t.iteration).collect()
            } else {
                Vec::new()
            };
            let mut f = File::create(&metrics_path)?;
            for m in &kept {
                writeln!(f, "{}", serde_json::to_string(m)?)?;
            }
            (t, kept)
        }
        None => {
            File::create(&metrics_path)?;
            (Trainer::new(cfg.env, cfg.mode, cfg.trainer.clone(), cfg.reward_model.clone(), seed)?, Vec::new())
        }
    };
    trainer.threads = cfg.threads;
    let mut out = OpenOptions::new().append(true).open(&metrics_path)?;
    let every = cfg.checkpoint_every;
    let result = trainer.train(cfg.budget_episodes, |t, m| {
        writeln!(out, "{}", serde_json::to_string(m)?)?;
        out.flush()?;
        history.push(m.clone());
        if every > 0 && t.iteration % every == 0 {
            checkpoint::save(t, &hash, &ckpt_path)?;
        }
        Ok(())
    });
    let summary = match result {
        Ok(_) => TrainSummary::from_history(&history, trainer.final_success()),
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let halted = dir.join("halted.bin");
            checkpoint::save(&trainer, &hash, &halted)?;
            log::error!("halted at iteration {}: {e}; state saved to {}", trainer.iteration, halted.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    checkpoint::save(&trainer, &hash, &ckpt_path)?;
    let eval = if cfg.eval_episodes > 0 {
        Some(evaluate(&trainer.policy, cfg.env, cfg.eval_episodes, episode_seed(seed, u64::MAX / 2), true)?)
    } else {
        None
    };
    let result = SeedResult { seed, summary, eval, metrics: metrics_path, checkpoint: ckpt_path };
    write_json(&dir.join("summary.json"), &result)?;
    Ok(SeedRun { result, history })
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[SeedRun]) -> ExperimentSummary {
    let pick = |f: &dyn Fn(&TrainSummary) -> f64| SeedStat::of(runs.iter().map(|r| f(&r.result.summary)).collect());
    ExperimentSummary {
        env: cfg.env,
        mode: cfg.mode,
        config_hash: cfg.hash(),
        budget_episodes: cfg.budget_episodes,
        success_auc: pick(&|s| s.success_auc),
        final_success: pick(&|s| s.final_success),
        final_mean_return: pick(&|s| s.final_mean_return),
        violation_rate: pick(&|s| s.violation_rate),
        seeds: runs.iter().map(|r| r.result.clone()).collect(),
    }
}

/// Run every configured seed into `out/seed_<s>` and write `out/summary.json`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(ExperimentSummary, Vec<SeedRun>)> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("{} on {:?}, seed {seed}", cfg.mode, cfg.env);
        runs.push(run_seed(cfg, seed, &out.join(format!("seed_{seed}")), None)?);
    }
    let summary = summarize(cfg, &runs);
    write_json(&out.join("summary.json"), &summary)?;
    Ok((summary, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub iteration: usize,
    pub report: EvalReport,
    pub heatmap: PathBuf,
}

/// Evaluate a checkpoint's policy and export the credit heatmap of one episode.
pub fn eval_checkpoint(path: &Path, episodes: usize, seed: u64, greedy: bool, out: &Path) -> Result<EvalOutput> {
    let mut trainer = checkpoint::load(path, None, false)?;
    let report = evaluate(&trainer.policy, trainer.env, episodes, seed, greedy)?;
    fs::create_dir_all(out)?;
    let sample = collect_episodes(&trainer.policy, trainer.env, &[episode_seed(seed, 0)], greedy)?;
    let credit = trainer.credit(&sample)?;
    let heatmap = out.join("heatmap.csv");
    let weights = match credit.first().and_then(|c| c.weights.clone()) {
        Some(w) => w,
        None => {
            let e = &sample[0];
            crate::redistribution::RedistributionWeights::uniform(e.steps, e.agents, &e.active)?
        }
    };
    export_weight_heatmap(&weights, &heatmap)?;
    let output = EvalOutput { checkpoint: path.to_path_buf(), iteration: trainer.iteration, report, heatmap };
    write_json(&out.join("eval.json"), &output)?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub mode: RedistributionMode,
    pub success_auc: SeedStat,
    pub final_mean_return: SeedStat,
    pub violation_rate: SeedStat,
    pub curve: PathBuf,
}

/// Per-iteration means over seeds: `iteration,episodes,success_rate,mean_return`.
fn write_curve(path: &Path, runs: &[SeedRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "episodes", "success_rate", "mean_return"])?;
    let len = runs.iter().map(|r| r.history.len()).min().unwrap_or(0);
    for i in 0..len {
        let n = runs.len() as f64;
        let succ = runs.iter().map(|r| r.history[i].success_rate).sum::<f64>() / n;
        let ret = runs.iter().map(|r| r.history[i].mean_return).sum::<f64>() / n;
        let eps = runs[0].history[i].episodes;
        w.write_record([i.to_string(), eps.to_string(), succ.to_string(), ret.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Run each arm under the same seeds; returns arms ranked by success AUC.
pub fn ablate(cfg: &ExperimentConfig, arms: &[RedistributionMode], out: &Path) -> Result<Vec<ArmResult>> {
    if arms.is_empty() {
        return Err(Error::Config("ablation needs at least one arm".into()));
    }
    fs::create_dir_all(out)?;
    let mut results = Vec::new();
    for &mode in arms {
        let arm_cfg = ExperimentConfig { mode, ..cfg.clone() };
        let (summary, runs) = train(&arm_cfg, &out.join(mode.as_str()))?;
        let curve = out.join(format!("{}_curve.csv", mode.as_str()));
        write_curve(&curve, &runs)?;
        results.push(ArmResult {
            mode,
            success_auc: summary.success_auc,
            final_mean_return: summary.final_mean_return,
            violation_rate: summary.violation_rate,
            curve,
        });
    }
    results.sort_by(|a, b| b.success_auc.mean.total_cmp(&a.success_auc.mean));
    let mut w = csv::Writer::from_path(out.join("ranking.csv"))?;
    w.write_record(["rank", "mode", "success_auc", "ci95", "final_mean_return"])?;
    for (i, r) in results.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.mode.to_string(),
            r.success_auc.mean.to_string(),
            r.success_auc.ci95.to_string(),
            r.final_mean_return.mean.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("ablation.json"), &results)?;
    Ok(results)
}

/// Grid of configuration keys to values. Runs cover the Cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axes: Vec<(String, Vec<Value>)>,
}

/// The reward-model and policy grid searched for the method.
pub const TAR2_GRID: &str = r#"
[grid]
"reward_model.num_heads" = [3, 4]
"reward_model.depth" = [3, 4]
"reward_model.dropout" = [0.0, 0.1, 0.2]
"reward_model.embed_dim" = [16, 64, 128]
"reward_model.batch_size" = [32, 64, 128]
"reward_model.lr" = [1e-4, 5e-4, 1e-3]
"reward_model.weight_decay" = [0.0, 1e-5, 1e-4]
"reward_model.lambda_id" = [1e-3, 1e-2, 5e-2]
"reward_model.grad_clip" = [0.5, 5.0, 10.0]
"reward_model.update_freq" = [50, 100, 200]
"reward_model.update_epochs" = [100, 200, 400]
"trainer.policy_lr" = [5e-4, 1e-3]
"trainer.entropy_pen" = [5e-3, 8e-3, 1e-2]
"#;

impl SweepGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid sweep file: {e}")))?;
        let grid = match table.remove("grid") {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config("sweep file needs a [grid] table".into())),
        };
        let mut axes = Vec::new();
        for (k, v) in grid {
            match v {
                Value::Array(values) if !values.is_empty() => axes.push((k, values)),
                _ => return Err(Error::Config(format!("grid entry '{k}' must be a non-empty list"))),
            }
        }
        Ok(Self { axes })
    }

    /// `tar2` selects the built-in grid; anything else is read as a file.
    pub fn load(source: &str) -> Result<Self> {
        if source == "tar2" {
            return Self::from_toml_str(TAR2_GRID);
        }
        let text = fs::read_to_string(source).map_err(|e| Error::Config(format!("cannot read sweep '{source}': {e}")))?;
        Self::from_toml_str(&text)
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Override strings for the `i`-th point, first axis slowest.
    pub fn point(&self, mut i: usize) -> Vec<String> {
        let mut out = vec![String::new(); self.axes.len()];
        for (slot, (k, vals)) in self.axes.iter().enumerate().rev() {
            out[slot] = format!("{k}={}", vals[i % vals.len()]);
            i /= vals.len();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub overrides: Vec<String>,
    pub success_auc: SeedStat,
    pub final_mean_return: SeedStat,
}

/// Train every grid point on top of `base_text` plus `base_overrides`.
pub fn sweep(
    base_text: &str,
    base_overrides: &[String],
    grid: &SweepGrid,
    max_runs: usize,
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    if grid.len() > max_runs {
        return Err(Error::Config(format!("sweep has {} points, more than the limit of {max_runs}", grid.len())));
    }
    // Resolve every point first so a bad key fails before any training.
    let configs: Vec<(Vec<String>, ExperimentConfig)> = (0..grid.len())
        .map(|i| {
            let point = grid.point(i);
            let all: Vec<String> = base_overrides.iter().cloned().chain(point.iter().cloned()).collect();
            ExperimentConfig::from_toml_str(base_text, &all).map(|c| (point, c))
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut points = Vec::new();
    for (i, (overrides, cfg)) in configs.into_iter().enumerate() {
        let (summary, _) = train(&cfg, &out.join(format!("point_{i:04}")))?;
        points.push(SweepPoint {
            index: i,
            overrides,
            success_auc: summary.success_auc,
            final_mean_return: summary.final_mean_return,
        });
        write_json(&out.join("sweep.json"), &points)?;
    }
    points.sort_by(|a, b| b.success_auc.mean.total_cmp(&a.success_auc.mean));
    write_json(&out.join("sweep.json"), &points)?;
    Ok(points)
}

/// Run the property suite and write `verify.json`. Returns whether all passed.
pub fn verify(quick: bool, seed: u64, out: Option<&Path>) -> Result<(Vec<CheckResult>, bool)> {
    let results = run_suite(quick, seed);
    let ok = results.iter().all(|r| r.passed);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("verify.json"), &results)?;
    }
    Ok((results, ok))
}

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The learning criteria train 15 KeyTreasure runs, so this target takes a
//! while: `cargo test --release -p tar2 --test acceptance -- --nocapture`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use tar2::analysis::{conditioning_variance_study, variance_study, ConditioningGenerator};
use tar2::buffer::{Episode, TrajectoryBuffer};
use tar2::checkpoint;
use tar2::config::ExperimentConfig;
use tar2::envs::{random_episode, EnvKind};
use tar2::experiment::{run_seed, train, ExperimentSummary};
use tar2::redistribution::DEFAULT_EPSILON;
use tar2::reward_model::{ModelShape, RewardModel, RewardModelConfig};
use tar2::trainer::{mix_seed, Policy, Trainer};
use tar2::verify;

const SEED: u64 = 20_240_601;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: usize, name: &'static str, passed: bool, detail: String) {
    println!("{} [{id:>2}] {name:<28} {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { id, name, passed, detail });
}

fn key_shape() -> ModelShape {
    ModelShape::of(EnvKind::KeyTreasure.build().as_ref())
}

fn random_buffer(episodes: usize, seed: u64) -> TrajectoryBuffer {
    let mut env = EnvKind::KeyTreasure.build();
    let mut buffer = TrajectoryBuffer::new(episodes, mix_seed(seed, 3)).unwrap();
    for i in 0..episodes {
        buffer.push(random_episode(env.as_mut(), mix_seed(seed, 100 + i as u64)).unwrap()).unwrap();
    }
    buffer
}

fn preset_model() -> RewardModelConfig {
    ExperimentConfig::preset("keytreasure_tar2").unwrap().reward_model
}

/// Regression loss over the whole buffer, so both ends of the curve are
/// measured on the same episodes.
fn full_regression(model: &mut RewardModel, buffer: &TrajectoryBuffer) -> f64 {
    let all: Vec<&Episode> = buffer.episodes().collect();
    let mut total = 0.0;
    for chunk in all.chunks(64) {
        total += model.loss(chunk).unwrap().regression * chunk.len() as f64;
    }
    total / all.len() as f64
}

fn reward_model_fit(lines: &mut Vec<Line>) -> RewardModel {
    let start = Instant::now();
    let cfg = preset_model();
    let mut ratios = Vec::new();
    let mut fitted = None;
    for s in 0..3u64 {
        let mut buffer = random_buffer(512, mix_seed(SEED, s));
        let mut model = RewardModel::new(cfg.clone(), key_shape(), mix_seed(SEED, 10 + s)).unwrap();
        let mut first = 0.0;
        for round in 1..=200 {
            let batch = buffer.sample(cfg.batch_size).unwrap();
            model.train_step(&batch).unwrap();
            if round == 1 {
                first = full_regression(&mut model, &buffer);
            }
        }
        let last = full_regression(&mut model, &buffer);
        ratios.push(last / first);
        fitted.get_or_insert(model);
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[1];
    report(
        lines,
        6,
        "reward_model_fit",
        median <= 0.1,
        format!("loss(200)/loss(1) per seed {ratios:.4?}, median {median:.4} in {:.0}s", start.elapsed().as_secs_f64()),
    );
    fitted.unwrap()
}

fn variance_reports(lines: &mut Vec<Line>, model: &mut RewardModel) {
    let start = Instant::now();
    let cond = conditioning_variance_study(&ConditioningGenerator::default(), 10_000, mix_seed(SEED, 7)).unwrap();

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(mix_seed(SEED, 8));
    let policy = Policy::new(key_shape(), 64, &mut rng);
    let mut credit = |eps: &[Episode]| -> tar2::Result<Vec<Vec<f64>>> {
        eps.iter().map(|e| model.shaped_rewards(e, DEFAULT_EPSILON).map(|r| r.rewards)).collect()
    };
    let v = variance_study(&policy, EnvKind::KeyTreasure, &mut credit, 50_000, mix_seed(SEED, 9)).unwrap();
    let identity_ok = v.identity_residual <= 1e-9 * v.var_pbrs.max(1.0);
    report(
        lines,
        7,
        "variance_reports",
        cond.strict && identity_ok,
        format!(
            "conditioning diff CI [{:.4}, {:.4}]; 50k samples var orig {:.4e} tar2 {:.4e} pbrs {:.4e} \
             (pbrs > tar2: {}), identity residual {:.2e}, {:.0}s",
            cond.ci_difference.0,
            cond.ci_difference.1,
            v.var_orig,
            v.var_tar2,
            v.var_pbrs,
            v.pbrs_exceeds_tar2,
            v.identity_residual,
            start.elapsed().as_secs_f64()
        ),
    );
}

fn arm(mode: &str, out: &Path) -> (ExperimentSummary, f64) {
    let start = Instant::now();
    let cfg = ExperimentConfig::load(Some("keytreasure_tar2"), &[format!("mode={mode}"), "threads=1".into()]).unwrap();
    assert_eq!(cfg.seeds.len(), 5);
    let (summary, _) = train(&cfg, &out.join(mode)).unwrap();
    let per_seed = start.elapsed().as_secs_f64() / cfg.seeds.len() as f64;
    println!(
        "     {mode:<16} auc {:.3?} sampled final success {:.2?} greedy {:.2?} final return {:.3?} ({per_seed:.0}s per seed)",
        summary.success_auc.values,
        summary.final_success.values,
        summary.seeds.iter().map(|s| s.eval.as_ref().map_or(0.0, |e| e.success_rate)).collect::<Vec<_>>(),
        summary.final_mean_return.values
    );
    (summary, per_seed)
}

fn reproducibility(lines: &mut Vec<Line>, out: &Path) {
    let cfg = ExperimentConfig::load(Some("keytreasure_tar2"), &["budget_episodes=300".into(), "threads=1".into()])
        .unwrap();
    let seed = 11;
    let a = run_seed(&cfg, seed, &out.join("a"), None).unwrap();
    let b = run_seed(&cfg, seed, &out.join("b"), None).unwrap();
    let same_runs = fs::read(&a.result.metrics).unwrap() == fs::read(&b.result.metrics).unwrap();

    let part = out.join("part");
    fs::create_dir_all(&part).unwrap();
    let mut t = Trainer::new(cfg.env, cfg.mode, cfg.trainer.clone(), cfg.reward_model.clone(), seed).unwrap();
    let mut lines_out = String::new();
    while t.episodes_seen < cfg.budget_episodes / 2 {
        lines_out.push_str(&serde_json::to_string(&t.iterate(usize::MAX).unwrap()).unwrap());
        lines_out.push('\n');
    }
    fs::write(part.join("metrics.jsonl"), lines_out).unwrap();
    let ckpt = out.join("mid.bin");
    checkpoint::save(&t, &cfg.hash(), &ckpt).unwrap();
    let resumed = run_seed(&cfg, seed, &part, Some(&ckpt)).unwrap();
    let same_resume = fs::read(&a.result.metrics).unwrap() == fs::read(&resumed.result.metrics).unwrap()
        && fs::read(&a.result.checkpoint).unwrap() == fs::read(&resumed.result.checkpoint).unwrap();
    report(
        lines,
        10,
        "reproducibility",
        same_runs && same_resume,
        format!(
            "two runs identical: {same_runs}; resumed at episode {} identical: {same_resume}",
            t.episodes_seen
        ),
    );
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let from_check = |lines: &mut Vec<Line>, id, name, c: verify::CheckResult, extra: bool, note: String| {
        report(lines, id, name, c.passed && extra, format!("{c}{note}"));
    };

    let c = verify::check_return_equivalence(10_000, SEED);
    let fast = c.seconds < 10.0;
    from_check(&mut lines, 1, "return_equivalence", c, fast, String::new());

    from_check(&mut lines, 2, "delta_properties", verify::check_delta_bounds(10_000, SEED), true, String::new());

    let c = verify::check_gradient_direction(200, mix_seed(SEED, 3));
    from_check(&mut lines, 3, "gradient_direction", c, true, String::new());

    // Telescoping here; the doubling residual is checked on the trainer batches below.
    let telescoping = verify::check_telescoping(1_000, mix_seed(SEED, 2));

    let c = verify::check_reward_model_gradients(16, 2, mix_seed(SEED, 4));
    let fast = c.seconds < 300.0;
    from_check(&mut lines, 5, "autodiff_soundness", c, fast, String::new());

    let mut model = reward_model_fit(&mut lines);
    variance_reports(&mut lines, &mut model);

    let (tar2, tar2_time) = arm("tar2", dir.path());
    let (uniform, _) = arm("uniform", dir.path());
    let (nn, _) = arm("no_normalization", dir.path());

    let doubling = tar2.seeds.iter().chain(&uniform.seeds).map(|s| s.summary.max_doubling_residual).fold(0.0, f64::max);
    let tele_ok = telescoping.passed && telescoping.max_residual == 0.0;
    report(
        &mut lines,
        4,
        "telescoping",
        tele_ok && doubling <= 1e-9,
        format!("{telescoping}; max doubling residual on trainer batches {doubling:.2e}"),
    );

    let auc_wins = tar2
        .success_auc
        .values
        .iter()
        .zip(&uniform.success_auc.values)
        .filter(|(t, u)| t >= u)
        .count();
    let solved = tar2.final_success.values.iter().filter(|&&s| s >= 0.9).count();
    report(
        &mut lines,
        8,
        "learning_efficacy",
        auc_wins >= 4 && solved >= 3 && tar2_time < 1800.0,
        format!("auc >= uniform in {auc_wins}/5 seeds, final success >= 0.9 in {solved}/5, {tar2_time:.0}s per seed"),
    );

    let ordered = nn
        .final_mean_return
        .values
        .iter()
        .zip(&tar2.final_mean_return.values)
        .filter(|(n, t)| n <= t)
        .count();
    let violations = nn.seeds.iter().map(|s| s.summary.violation_rate).fold(1.0, f64::min);
    report(
        &mut lines,
        9,
        "ablation_ordering",
        ordered >= 4 && violations > 0.99,
        format!("no-normalization return <= tar2 in {ordered}/5 seeds, min violation rate {violations:.4}"),
    );

    reproducibility(&mut lines, &dir.path().join("repro"));

    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!("{} [{:>2}] {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.name);
    }
    let failed: Vec<String> = lines.iter().filter(|l| !l.passed).map(|l| format!("{}: {}", l.name, l.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

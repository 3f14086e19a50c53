//! Property suite behind the `verify` command.

use std::cell::RefCell;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    conditioning_variance_study, reinforce_estimates, uniform_credit, variance_study, ConditioningGenerator,
};
use crate::buffer::Episode;
use crate::envs::{random_episode, EnvKind};
use crate::error::Result;
use crate::nn::gradient_check;
use crate::redistribution::{
    delta_k, potential_series, redistribute, return_gap, verify_telescoping, ScoreMatrix, DEFAULT_EPSILON,
};
use crate::reward_model::{ModelShape, RewardModel, RewardModelConfig};
use crate::trainer::{collect_episodes, mix_seed, Policy, PopArt};

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_residual: f64,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<28} cases={:<6} max_residual={:<10.3e} {:.1}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_residual,
            self.seconds,
            self.detail
        )
    }
}

/// A fuzzed score matrix with its team reward.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzCase {
    pub matrix: ScoreMatrix,
    pub team_reward: f64,
}

/// N in [1, 8], T in [1, 64], scores over six orders of magnitude, about
/// 20% constant rows or a constant matrix, about 10% inactive cells, and
/// R in [-10, 10].
pub fn fuzz_case(rng: &mut impl Rng) -> FuzzCase {
    let agents = rng.gen_range(1..=8);
    let steps = rng.gen_range(1..=64);
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    let offset = rng.gen_range(-5.0..5.0) * scale;
    let flat = rng.gen_bool(0.05);
    let mut scores = Vec::with_capacity(steps * agents);
    for _ in 0..steps {
        let constant = flat || rng.gen_bool(0.2);
        let c = if flat { offset } else { offset + rng.gen_range(-1.0..1.0) * scale };
        for _ in 0..agents {
            scores.push(if constant { c } else { offset + rng.gen_range(-1.0..1.0) * scale });
        }
    }
    let mut active: Vec<bool> = (0..steps * agents).map(|_| !rng.gen_bool(0.1)).collect();
    if !active.iter().any(|&a| a) {
        let k = rng.gen_range(0..active.len());
        active[k] = true;
    }
    let team_reward = if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(-10.0..10.0) };
    FuzzCase { matrix: ScoreMatrix::new(steps, agents, scores, active).expect("valid fuzz case"), team_reward }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, usize, f64, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, cases, max_residual, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, 0, f64::NAN, format!("error: {e}")),
    };
    CheckResult { name: name.into(), passed, cases, max_residual, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn check_return_equivalence(cases: usize, seed: u64) -> CheckResult {
    timed("return_equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut failures = 0;
        for _ in 0..cases {
            let c = fuzz_case(&mut rng);
            let r = redistribute(&c.matrix, c.team_reward, DEFAULT_EPSILON)?;
            let rel = return_gap(&r.rewards, c.team_reward) / c.team_reward.abs().max(1.0);
            worst = worst.max(rel);
            failures += usize::from(rel > 1e-9);
        }
        Ok((failures == 0, cases, worst, format!("{failures} cases above 1e-9 max(1,|R|)")))
    })
}

pub fn check_delta_bounds(cases: usize, seed: u64) -> CheckResult {
    timed("delta_bounds", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut out_of_range, mut full) = (0.0f64, 0, 0);
        for _ in 0..cases {
            let c = fuzz_case(&mut rng);
            let r = redistribute(&c.matrix, c.team_reward, DEFAULT_EPSILON)?;
            let d = delta_k(&r.weights);
            out_of_range += d.iter().filter(|&&x| !(0.0..=1.0).contains(&x)).count();
            if c.matrix.active_steps().iter().all(|&a| a) {
                full += 1;
                worst = worst.max((d.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let passed = out_of_range == 0 && worst <= 1e-9;
        Ok((passed, cases, worst, format!("{out_of_range} out of [0,1]; sum checked on {full} fully active cases")))
    })
}

pub fn check_telescoping(cases: usize, seed: u64) -> CheckResult {
    timed("telescoping", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut failures) = (0.0f64, 0);
        for _ in 0..cases {
            let c = fuzz_case(&mut rng);
            let r = redistribute(&c.matrix, c.team_reward, DEFAULT_EPSILON)?;
            let check = verify_telescoping(&potential_series(&r)?, &r)?;
            worst = worst.max(check.max_residual);
            failures += usize::from(!check.holds);
        }
        Ok((failures == 0, cases, worst, format!("{failures} failures")))
    })
}

/// A random softmax policy: the small-output initialization is undone by a
/// random factor so that action distributions are far from uniform.
pub fn random_policy(shape: ModelShape, rng: &mut impl Rng) -> Policy {
    let mut p = Policy::new(shape, 16, rng);
    let sharp = rng.gen_range(10.0..300.0);
    for (name, t) in p.params.names().to_vec().iter().zip(p.params.tensors_mut()) {
        if name.ends_with(".2.w") {
            t.data_mut().iter_mut().for_each(|x| *x *= sharp);
        }
    }
    p
}

pub fn check_gradient_direction(pairs: usize, seed: u64) -> CheckResult {
    timed("gradient_direction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut failures) = (0.0f64, 0);
        for i in 0..pairs {
            let env = if i % 2 == 0 { EnvKind::KeyTreasure } else { EnvKind::Switches };
            let shape = ModelShape::of(env.build().as_ref());
            let policy = random_policy(shape, &mut rng);
            let e = &collect_episodes(&policy, env, &[rng.gen()], false)?[0];
            let scores: Vec<f64> = (0..e.steps * e.agents).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let m = ScoreMatrix::new(e.steps, e.agents, scores, e.active.clone())?;
            let r = rng.gen_range(-10.0..10.0);
            let report = reinforce_estimates(&policy, e, &redistribute(&m, r, DEFAULT_EPSILON)?)?;
            for (res, sup) in report.residual.iter().zip(&report.global_sup) {
                worst = worst.max(res / (1.0 + sup));
            }
            failures += usize::from(!report.proportional(1e-6));
        }
        Ok((failures == 0, pairs, worst, "residual / (1 + |g_global|_inf)".into()))
    })
}

/// Finite differences over every reward-model parameter tensor.
pub fn check_reward_model_gradients(embed_dim: usize, depth: usize, seed: u64) -> CheckResult {
    timed("reward_model_gradients", || {
        let env = EnvKind::KeyTreasure;
        let mut e = env.build();
        let episodes: Vec<Episode> =
            (0..2).map(|s| random_episode(e.as_mut(), mix_seed(seed, s))).collect::<Result<_>>()?;
        let batch: Vec<&Episode> = episodes.iter().collect();
        let cfg = RewardModelConfig { embed_dim, depth, num_heads: 4, batch_size: 2, ..Default::default() };
        let model = RewardModel::new(cfg, ModelShape::of(e.as_ref()), seed)?;
        let params = model.params.clone();
        let model = RefCell::new(model);
        let report =
            gradient_check(|g, p| Ok(model.borrow_mut().loss_graph(g, p, &batch)?.0), &params, 1e-5)?;
        let passed = report.passes(1e-4) && report.names.len() == params.len();
        Ok((passed, report.checked, report.worst(), format!("{} tensors", report.names.len())))
    })
}

pub fn check_popart_inverse(seed: u64) -> CheckResult {
    timed("popart_inverse", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PopArt::new(3, 0.999, true);
        let mut worst = 0.0f64;
        let mut cases = 0;
        for _ in 0..50 {
            let batch: Vec<Vec<f64>> =
                (0..3).map(|_| (0..16).map(|_| rng.gen_range(-50.0..50.0)).collect()).collect();
            p.update(&batch)?;
            for k in 0..3 {
                let x: f64 = rng.gen_range(-100.0..100.0);
                worst = worst.max((p.denormalize(k, p.normalize(k, x)) - x).abs());
                cases += 1;
            }
        }
        Ok((worst <= 1e-10, cases, worst, "denormalize(normalize(x)) - x".into()))
    })
}

pub fn check_variance_identity(samples: usize, seed: u64) -> CheckResult {
    timed("variance_identity", || {
        let env = EnvKind::KeyTreasure;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = Policy::new(ModelShape::of(env.build().as_ref()), 16, &mut rng);
        let report = variance_study(&policy, env, &mut uniform_credit, samples, seed)?;
        let tol = 1e-9 * report.var_pbrs.max(1.0);
        Ok((
            report.identity_residual <= tol,
            samples,
            report.identity_residual,
            format!(
                "var orig {:.4e} tar2 {:.4e} pbrs {:.4e} cov {:.4e}",
                report.var_orig, report.var_tar2, report.var_pbrs, report.covariance
            ),
        ))
    })
}

pub fn check_conditioning(samples: usize, seed: u64) -> CheckResult {
    timed("outcome_conditioning", || {
        let r = conditioning_variance_study(&ConditioningGenerator::default(), samples, seed)?;
        Ok((
            r.strict,
            samples,
            0.0,
            format!(
                "Var(c|tau) {:.4} vs Var(E[c|tau,Z]) {:.4}, difference CI [{:.4}, {:.4}]",
                r.var_given_tau, r.var_conditional_mean, r.ci_difference.0, r.ci_difference.1
            ),
        ))
    })
}

/// The full suite; `quick` shrinks sample counts for smoke runs.
pub fn run_suite(quick: bool, seed: u64) -> Vec<CheckResult> {
    let s = |full: usize, small: usize| if quick { small } else { full };
    vec![
        check_return_equivalence(s(10_000, 500), seed),
        check_delta_bounds(s(10_000, 500), mix_seed(seed, 1)),
        check_telescoping(s(1_000, 100), mix_seed(seed, 2)),
        check_gradient_direction(s(200, 20), mix_seed(seed, 3)),
        check_reward_model_gradients(if quick { 8 } else { 16 }, if quick { 1 } else { 2 }, mix_seed(seed, 4)),
        check_popart_inverse(mix_seed(seed, 5)),
        check_variance_identity(s(2_000, 200), mix_seed(seed, 6)),
        check_conditioning(s(10_000, 2_000), mix_seed(seed, 7)),
    ]
}

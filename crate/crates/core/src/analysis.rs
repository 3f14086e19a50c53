//! Executable checks of the redistribution theory, ablation modes and exports.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::Episode;
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::redistribution::{delta_k, uniform_redistribution, RedistributedRewards, RedistributionWeights};
use crate::reward_model::{RewardModel, RewardModelConfig};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{collect_episodes, episode_seed, mix_seed, Policy};

/// Which credit signal the trainer optimizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedistributionMode {
    #[default]
    Tar2,
    Uniform,
    TemporalOnly,
    NoNormalization,
    NoOutcome,
    NoInverseDynamics,
}

impl RedistributionMode {
    pub const ALL: [RedistributionMode; 6] = [
        RedistributionMode::Tar2,
        RedistributionMode::Uniform,
        RedistributionMode::TemporalOnly,
        RedistributionMode::NoNormalization,
        RedistributionMode::NoOutcome,
        RedistributionMode::NoInverseDynamics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RedistributionMode::Tar2 => "tar2",
            RedistributionMode::Uniform => "uniform",
            RedistributionMode::TemporalOnly => "temporal_only",
            RedistributionMode::NoNormalization => "no_normalization",
            RedistributionMode::NoOutcome => "no_outcome",
            RedistributionMode::NoInverseDynamics => "no_inverse_dynamics",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }

    /// Whether the arm needs a learned score model.
    pub fn uses_model(self) -> bool {
        self != RedistributionMode::Uniform
    }

    /// Reward-model settings with this arm's component removed.
    pub fn model_config(self, base: &RewardModelConfig) -> RewardModelConfig {
        let mut cfg = base.clone();
        match self {
            RedistributionMode::NoOutcome => cfg.condition_on_outcome = false,
            RedistributionMode::NoInverseDynamics => cfg.use_inverse_dynamics = false,
            _ => {}
        }
        cfg
    }
}

impl std::fmt::Display for RedistributionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-agent REINFORCE estimates under the team reward and under shaped credit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// `G_k R` for each agent, flattened over that agent's actor parameters.
    pub global: Vec<Vec<f64>>,
    /// `G_k R_k` where `R_k` is the agent's total shaped reward.
    pub shaped: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    /// `max |shaped - delta * global|` per agent.
    pub residual: Vec<f64>,
    /// `max |global|` per agent.
    pub global_sup: Vec<f64>,
}

impl GradientReport {
    /// Whether every agent's residual is within `tol * (1 + |global|_inf)`.
    pub fn proportional(&self, tol: f64) -> bool {
        self.residual.iter().zip(&self.global_sup).all(|(r, g)| *r <= tol * (1.0 + g))
    }
}

/// `G_k = sum_t grad log pi(a_kt | o_kt)` over active cells, one flattened
/// vector per agent. Fails if the episode's stored log-probs were not
/// produced by this policy.
pub fn score_function_gradients(policy: &Policy, episode: &Episode) -> Result<Vec<Vec<f64>>> {
    let shape = policy.shape;
    if episode.agents != shape.agents || episode.obs_dim != shape.obs_dim || episode.num_actions != shape.num_actions {
        return Err(Error::Shape("episode does not match the policy".into()));
    }
    let mut g = Graph::new();
    let p = policy.params.bind(&mut g, true);
    let mut terms = Vec::with_capacity(shape.agents);
    for agent in 0..shape.agents {
        let (mut obs, mut acts, mut stored) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..episode.steps {
            let c = episode.cell(t, agent);
            if episode.active[c] {
                obs.extend_from_slice(episode.observation(t, agent));
                acts.push(episode.actions[c]);
                stored.push(episode.log_probs[c]);
            }
        }
        if acts.is_empty() {
            continue;
        }
        let x = g.constant(Tensor::new(vec![acts.len(), shape.obs_dim], obs)?);
        let logits = policy.logits(&mut g, &p, agent, x)?;
        let lsm = g.log_softmax(logits);
        let lp = g.gather_last(lsm, &acts)?;
        let gap = g.value(lp).data().iter().zip(&stored).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "policy/trajectory mismatch: log-probs differ by {gap:e}"
            )));
        }
        terms.push(g.sum(lp));
    }
    let mut out = vec![Vec::new(); shape.agents];
    if terms.is_empty() {
        return Ok(out);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.backward(total)?;
    let grads = p.grads(&g);
    for (agent, o) in out.iter_mut().enumerate() {
        let prefix = Policy::actor_prefix(agent);
        for (name, grad) in policy.params.names().iter().zip(&grads) {
            if name.starts_with(&prefix) {
                o.extend_from_slice(grad.data());
            }
        }
    }
    Ok(out)
}

/// Compare `G_k R_k` with `delta_k G_k R` for every agent.
pub fn reinforce_estimates(
    policy: &Policy,
    episode: &Episode,
    credit: &RedistributedRewards,
) -> Result<GradientReport> {
    if credit.steps != episode.steps || credit.agents != episode.agents {
        return Err(Error::Shape("credit does not match the episode".into()));
    }
    let gk = score_function_gradients(policy, episode)?;
    let r = credit.team_reward;
    let delta = delta_k(&credit.weights);
    let returns = credit.agent_returns();
    let mut report = GradientReport {
        global: Vec::new(),
        shaped: Vec::new(),
        delta: delta.clone(),
        residual: Vec::new(),
        global_sup: Vec::new(),
    };
    for (k, g) in gk.iter().enumerate() {
        let global: Vec<f64> = g.iter().map(|x| x * r).collect();
        let shaped: Vec<f64> = g.iter().map(|x| x * returns[k]).collect();
        let residual =
            shaped.iter().zip(&global).map(|(s, gl)| (s - delta[k] * gl).abs()).fold(0.0, f64::max);
        report.global_sup.push(global.iter().map(|x| x.abs()).fold(0.0, f64::max));
        report.residual.push(residual);
        report.global.push(global);
        report.shaped.push(shaped);
    }
    Ok(report)
}

/// Percentile interval of `stat` over bootstrap resamples of `0..n`.
pub fn bootstrap_interval(
    n: usize,
    resamples: usize,
    level: f64,
    seed: u64,
    mut stat: impl FnMut(&[usize]) -> f64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * resamples as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * resamples as f64).ceil() as usize).min(resamples) - 1;
    (stats[lo.min(resamples - 1)], stats[hi])
}

/// Summed per-coordinate sample variances of three gradient estimators on
/// the same draws, with bootstrap intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub samples: usize,
    /// Terminal team reward credited to every agent.
    pub var_orig: f64,
    /// Shaped credit.
    pub var_tar2: f64,
    /// Sum of the two estimators.
    pub var_pbrs: f64,
    /// Summed per-coordinate sample covariance of the first two.
    pub covariance: f64,
    pub ci_orig: (f64, f64),
    pub ci_tar2: (f64, f64),
    pub ci_pbrs: (f64, f64),
    /// Interval for `var_pbrs - var_tar2`.
    pub ci_difference: (f64, f64),
    /// `|var_pbrs - (var_orig + var_tar2 + 2 cov)|`.
    pub identity_residual: f64,
    /// Whether the difference interval lies strictly above zero.
    pub pbrs_exceeds_tar2: bool,
    /// Whether a negative covariance pushed `var_pbrs` below `var_tar2`.
    pub covariance_reverses: bool,
}

/// Per-episode shaped rewards `[t][agent]` for a batch of episodes.
pub type CreditFn<'a> = dyn FnMut(&[Episode]) -> Result<Vec<Vec<f64>>> + 'a;

/// Uniform credit `R / (active cells)`.
pub fn uniform_credit(episodes: &[Episode]) -> Result<Vec<Vec<f64>>> {
    episodes
        .iter()
        .map(|e| uniform_redistribution(e.steps, e.agents, &e.active, e.team_reward).map(|r| r.rewards))
        .collect()
}

/// Monte-Carlo study over `num_samples` trajectories of a frozen policy.
///
/// Two passes over the same seeded draws: the first accumulates means, the
/// second accumulates squared deviations, so the sample-moment identity is
/// exact up to rounding.
pub fn variance_study(
    policy: &Policy,
    env: EnvKind,
    credit: &mut CreditFn<'_>,
    num_samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if num_samples < 2 {
        return Err(Error::InvalidArgument("variance needs at least two samples".into()));
    }
    const CHUNK: usize = 256;
    let mut draw = |start: usize, len: usize| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let seeds: Vec<u64> = (start..start + len).map(|i| episode_seed(seed, i as u64)).collect();
        let eps = collect_episodes(policy, env, &seeds, false)?;
        if eps.len() != len {
            return Err(Error::Env("an environment faulted during the variance study".into()));
        }
        let shaped = credit(&eps)?;
        eps.iter()
            .zip(shaped)
            .map(|(e, s)| {
                let gk = score_function_gradients(policy, e)?;
                let (mut orig, mut tar) = (Vec::new(), Vec::new());
                for (k, g) in gk.iter().enumerate() {
                    let rk: f64 = (0..e.steps).map(|t| s[t * e.agents + k]).sum();
                    orig.extend(g.iter().map(|x| x * e.team_reward));
                    tar.extend(g.iter().map(|x| x * rk));
                }
                Ok((orig, tar))
            })
            .collect()
    };
    let n = num_samples;
    let mut mean_a: Vec<f64> = Vec::new();
    let mut mean_b: Vec<f64> = Vec::new();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        for (a, b) in draw(start, len)? {
            if mean_a.is_empty() {
                mean_a = vec![0.0; a.len()];
                mean_b = vec![0.0; b.len()];
            }
            mean_a.iter_mut().zip(&a).for_each(|(m, x)| *m += x);
            mean_b.iter_mut().zip(&b).for_each(|(m, x)| *m += x);
        }
        start += len;
    }
    mean_a.iter_mut().for_each(|m| *m /= n as f64);
    mean_b.iter_mut().for_each(|m| *m /= n as f64);

    // Per-sample contributions to each summed variance.
    let (mut da, mut db, mut dp, mut dc) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        for (a, b) in draw(start, len)? {
            let (mut sa, mut sb, mut sp, mut sc) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..a.len() {
                let x = a[j] - mean_a[j];
                let y = b[j] - mean_b[j];
                sa += x * x;
                sb += y * y;
                sp += (x + y) * (x + y);
                sc += x * y;
            }
            da.push(sa);
            db.push(sb);
            dp.push(sp);
            dc.push(sc);
        }
        start += len;
    }
    let denom = (n - 1) as f64;
    let total = |v: &[f64]| v.iter().sum::<f64>() / denom;
    let (var_orig, var_tar2, var_pbrs, covariance) = (total(&da), total(&db), total(&dp), total(&dc));
    let resample = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).sum::<f64>() / denom;
    let boot = 1000;
    let ci_orig = bootstrap_interval(n, boot, 0.95, mix_seed(seed, 11), |i| resample(&da, i));
    let ci_tar2 = bootstrap_interval(n, boot, 0.95, mix_seed(seed, 12), |i| resample(&db, i));
    let ci_pbrs = bootstrap_interval(n, boot, 0.95, mix_seed(seed, 13), |i| resample(&dp, i));
    let ci_difference =
        bootstrap_interval(n, boot, 0.95, mix_seed(seed, 14), |i| resample(&dp, i) - resample(&db, i));
    Ok(VarianceReport {
        samples: n,
        var_orig,
        var_tar2,
        var_pbrs,
        covariance,
        ci_orig,
        ci_tar2,
        ci_pbrs,
        ci_difference,
        identity_residual: (var_pbrs - (var_orig + var_tar2 + 2.0 * covariance)).abs(),
        pbrs_exceeds_tar2: ci_difference.0 > 0.0,
        covariance_reverses: var_pbrs < var_tar2,
    })
}

/// Synthetic scores `c = g(tau) + h(Z) + noise` over discrete `tau` and `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningGenerator {
    pub num_tau: usize,
    pub num_z: usize,
    /// Amplitude of `g`.
    pub g_scale: f64,
    /// Amplitude of `h`; 0 makes `Z` uninformative.
    pub h_scale: f64,
    pub noise_std: f64,
}

impl Default for ConditioningGenerator {
    fn default() -> Self {
        Self { num_tau: 8, num_z: 4, g_scale: 1.0, h_scale: 1.0, noise_std: 0.5 }
    }
}

impl ConditioningGenerator {
    pub fn g(&self, tau: usize) -> f64 {
        self.g_scale * (tau as f64 * 1.3 + 0.4).sin()
    }

    pub fn h(&self, z: usize) -> f64 {
        if self.num_z < 2 {
            return 0.0;
        }
        self.h_scale * (2.0 * z as f64 / (self.num_z - 1) as f64 - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub samples: usize,
    /// Mean over `tau` of the within-`tau` variance of `c`.
    pub var_given_tau: f64,
    /// Mean over `tau` of the within-`tau` variance of the cell means `E[c | tau, Z]`.
    pub var_conditional_mean: f64,
    /// Bootstrap interval for `var_given_tau - var_conditional_mean`.
    pub ci_difference: (f64, f64),
    /// The interval lies strictly above zero.
    pub strict: bool,
}

fn conditioning_moments(gen: &ConditioningGenerator, draws: &[(usize, usize, f64)], idx: &[usize]) -> (f64, f64) {
    let (nt, nz) = (gen.num_tau, gen.num_z);
    let mut count = vec![0usize; nt * nz];
    let mut sum = vec![0.0; nt * nz];
    for &i in idx {
        let (t, z, c) = draws[i];
        count[t * nz + z] += 1;
        sum[t * nz + z] += c;
    }
    let mut tau_n = vec![0usize; nt];
    let mut tau_sum = vec![0.0; nt];
    for t in 0..nt {
        for z in 0..nz {
            tau_n[t] += count[t * nz + z];
            tau_sum[t] += sum[t * nz + z];
        }
    }
    let (mut vc, mut vm) = (vec![0.0; nt], vec![0.0; nt]);
    for &i in idx {
        let (t, z, c) = draws[i];
        let mu = tau_sum[t] / tau_n[t] as f64;
        let cell = sum[t * nz + z] / count[t * nz + z] as f64;
        vc[t] += (c - mu).powi(2);
        vm[t] += (cell - mu).powi(2);
    }
    let used: Vec<usize> = (0..nt).filter(|&t| tau_n[t] > 0).collect();
    let k = used.len().max(1) as f64;
    (
        used.iter().map(|&t| vc[t] / tau_n[t] as f64).sum::<f64>() / k,
        used.iter().map(|&t| vm[t] / tau_n[t] as f64).sum::<f64>() / k,
    )
}

/// Law-of-total-variance check: conditioning on `Z` cannot increase variance.
pub fn conditioning_variance_study(
    gen: &ConditioningGenerator,
    num_samples: usize,
    seed: u64,
) -> Result<ConditioningReport> {
    if gen.num_tau == 0 || gen.num_z == 0 || num_samples < 2 {
        return Err(Error::InvalidArgument("generator needs non-empty supports and two samples".into()));
    }
    let noise = Normal::new(0.0, gen.noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, usize, f64)> = (0..num_samples)
        .map(|_| {
            let t = rng.gen_range(0..gen.num_tau);
            let z = rng.gen_range(0..gen.num_z);
            let e = if gen.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (t, z, gen.g(t) + gen.h(z) + e)
        })
        .collect();
    let all: Vec<usize> = (0..num_samples).collect();
    let (var_given_tau, var_conditional_mean) = conditioning_moments(gen, &draws, &all);
    let ci_difference = bootstrap_interval(num_samples, 500, 0.95, mix_seed(seed, 21), |idx| {
        let (a, b) = conditioning_moments(gen, &draws, idx);
        a - b
    });
    Ok(ConditioningReport {
        samples: num_samples,
        var_given_tau,
        var_conditional_mean,
        ci_difference,
        strict: ci_difference.0 > 0.0,
    })
}

/// Raw model scores used directly as rewards. Their sum is generally not `R`.
pub fn no_normalization_rewards(model: &mut RewardModel, episode: &Episode) -> Result<Vec<f64>> {
    Ok(model.score(episode)?.scores().to_vec())
}

/// Write `w_temp[t] * w_agent[t, i]` as CSV with header `t,agent_0,...`.
pub fn export_weight_heatmap(weights: &RedistributionWeights, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..weights.agents).map(|i| format!("agent_{i}")));
    w.write_record(&header)?;
    let products = weights.products();
    for (t, row) in products.chunks(weights.agents).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|x| format!("{x:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

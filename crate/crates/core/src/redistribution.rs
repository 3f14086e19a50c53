//! Deterministic shift-and-normalize reward redistribution.
//!
//! A learned model emits unnormalized contribution scores `c[t, i]`. This
//! module turns them into temporal weights (over timesteps) and agent weights
//! (over agents within a timestep), and builds per-agent per-step rewards
//!
//! ```text
//! s[t, i] = w_temp[t] * w_agent[t, i] * R
//! ```
//!
//! whose total equals the team reward `R` regardless of what the scores were.
//! Only active cells take part in the min/sum and inactive cells receive
//! exactly zero.

use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default stability constant in the weight denominators.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Relative threshold under which a shifted sum is treated as zero mass.
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;

/// Unnormalized contribution scores for one episode, row-major `[t][agent]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    steps: usize,
    agents: usize,
    scores: Vec<f64>,
    active: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(steps: usize, agents: usize, scores: Vec<f64>, active: Vec<bool>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Empty("score matrix has no timesteps"));
        }
        if agents == 0 {
            return Err(Error::Empty("score matrix has no agents"));
        }
        if scores.len() != steps * agents || active.len() != steps * agents {
            return Err(Error::Shape(format!(
                "expected {} cells, got {} scores and {} mask entries",
                steps * agents,
                scores.len(),
                active.len()
            )));
        }
        if let Some(idx) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore { t: idx / agents, agent: idx % agents });
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::NoActiveCells);
        }
        Ok(Self { steps, agents, scores, active })
    }

    /// All cells active.
    pub fn dense(steps: usize, agents: usize, scores: Vec<f64>) -> Result<Self> {
        Self::new(steps, agents, scores, vec![true; steps * agents])
    }

    /// Build from nested rows, one row per timestep.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let agents = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != agents) {
            return Err(Error::Shape("ragged score rows".into()));
        }
        Self::dense(rows.len(), agents, rows.concat())
    }

    pub fn with_mask(rows: &[Vec<f64>], mask: &[Vec<bool>]) -> Result<Self> {
        let agents = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != agents) || mask.iter().any(|r| r.len() != agents) {
            return Err(Error::Shape("ragged score rows".into()));
        }
        Self::new(rows.len(), agents, rows.concat(), mask.concat())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn score(&self, t: usize, agent: usize) -> f64 {
        self.scores[t * self.agents + agent]
    }

    pub fn is_active(&self, t: usize, agent: usize) -> bool {
        self.active[t * self.agents + agent]
    }

    fn row(&self, t: usize) -> (&[f64], &[bool]) {
        let range = t * self.agents..(t + 1) * self.agents;
        (&self.scores[range.clone()], &self.active[range])
    }

    /// Timesteps with at least one active agent.
    pub fn active_steps(&self) -> Vec<bool> {
        (0..self.steps).map(|t| self.row(t).1.iter().any(|&a| a)).collect()
    }
}

/// Temporal and agent weights that produced a redistribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionWeights {
    pub steps: usize,
    pub agents: usize,
    /// `w_temp[t]`, sums to one.
    pub temporal: Vec<f64>,
    /// `w_agent[t, i]` row-major; each row with an active agent sums to one.
    pub agent: Vec<f64>,
    pub epsilon: f64,
    /// Timesteps whose agent row is all zeros because nobody was active.
    pub empty_steps: Vec<usize>,
}

impl RedistributionWeights {
    pub fn agent_weight(&self, t: usize, agent: usize) -> f64 {
        self.agent[t * self.agents + agent]
    }

    /// `w_temp[t] * w_agent[t, i]`, the per-cell share of the team reward.
    pub fn products(&self) -> Vec<f64> {
        (0..self.steps)
            .flat_map(|t| (0..self.agents).map(move |i| (t, i)))
            .map(|(t, i)| self.temporal[t] * self.agent_weight(t, i))
            .collect()
    }

    /// Uniform weights over the active cells of `active` (row-major `[t][agent]`).
    pub fn uniform(steps: usize, agents: usize, active: &[bool]) -> Result<Self> {
        if active.len() != steps * agents {
            return Err(Error::Shape(format!(
                "mask has {} entries, expected {}",
                active.len(),
                steps * agents
            )));
        }
        let total = active.iter().filter(|&&a| a).count();
        if total == 0 {
            return Err(Error::NoActiveCells);
        }
        let mut temporal = vec![0.0; steps];
        let mut agent = vec![0.0; steps * agents];
        let mut empty_steps = Vec::new();
        for t in 0..steps {
            let row = &active[t * agents..(t + 1) * agents];
            let count = row.iter().filter(|&&a| a).count();
            if count == 0 {
                empty_steps.push(t);
                continue;
            }
            temporal[t] = count as f64 / total as f64;
            for (i, &a) in row.iter().enumerate() {
                if a {
                    agent[t * agents + i] = 1.0 / count as f64;
                }
            }
        }
        Ok(Self { steps, agents, temporal, agent, epsilon: 0.0, empty_steps })
    }
}

/// Per-agent per-step shaped rewards together with the weights behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributedRewards {
    pub steps: usize,
    pub agents: usize,
    /// `s[t, i]` row-major.
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    pub weights: RedistributionWeights,
}

impl RedistributedRewards {
    pub fn reward(&self, t: usize, agent: usize) -> f64 {
        self.rewards[t * self.agents + agent]
    }

    pub fn total(&self) -> f64 {
        stable_sum(self.rewards.iter().copied())
    }

    /// `R_k = sum_t s[t, k]` for every agent.
    pub fn agent_returns(&self) -> Vec<f64> {
        (0..self.agents)
            .map(|k| stable_sum((0..self.steps).map(|t| self.reward(t, k))))
            .collect()
    }

    /// Whether the rewards sum to the team reward within `1e-9 * max(1, |R|)`.
    pub fn is_return_equivalent(&self) -> bool {
        return_gap(&self.rewards, self.team_reward) <= 1e-9 * self.team_reward.abs().max(1.0)
    }
}

/// `|sum(rewards) - team_reward|`.
pub fn return_gap(rewards: &[f64], team_reward: f64) -> f64 {
    (stable_sum(rewards.iter().copied()) - team_reward).abs()
}

/// Neumaier-compensated sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Shift-and-normalize over the masked entries of `values`.
///
/// Returns zeros at masked-out positions. Falls back to the uniform
/// distribution over the active entries when the shifted mass is degenerate.
/// `None` when no entry is active.
fn shift_normalize(values: &[f64], mask: &[bool], epsilon: f64) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..values.len()).filter(|&j| mask[j]).collect();
    if active.is_empty() {
        return None;
    }
    let min = active.iter().map(|&j| values[j]).fold(f64::INFINITY, f64::min);
    let scale = active.iter().map(|&j| values[j].abs()).fold(1.0_f64, f64::max);
    let shifted_sum = stable_sum(active.iter().map(|&j| values[j] - min));

    let mut out = vec![0.0; values.len()];
    if shifted_sum <= DEGENERACY_TOLERANCE * scale {
        let w = 1.0 / active.len() as f64;
        for &j in &active {
            out[j] = w;
        }
        return Some(out);
    }
    for &j in &active {
        out[j] = (values[j] - min) / (shifted_sum + epsilon);
    }
    // The epsilon leaves the row short of one; close the gap exactly.
    let total = stable_sum(active.iter().map(|&j| out[j]));
    for &j in &active {
        out[j] /= total;
    }
    Some(out)
}

/// `c_agg[t] = sum of active scores at t`.
pub fn aggregate_scores(m: &ScoreMatrix) -> Vec<f64> {
    (0..m.steps)
        .map(|t| {
            let (scores, active) = m.row(t);
            stable_sum(scores.iter().zip(active).filter(|(_, &a)| a).map(|(&s, _)| s))
        })
        .collect()
}

/// Temporal weights over every entry of `aggregated`.
pub fn temporal_weights(aggregated: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    temporal_weights_masked(aggregated, &vec![true; aggregated.len()], epsilon)
}

/// Temporal weights restricted to `active_steps`; inactive steps get zero.
pub fn temporal_weights_masked(
    aggregated: &[f64],
    active_steps: &[bool],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if aggregated.is_empty() {
        return Err(Error::Empty("no timesteps to weight"));
    }
    check_epsilon(epsilon)?;
    if active_steps.len() != aggregated.len() {
        return Err(Error::Shape("step mask length differs from scores".into()));
    }
    if let Some(index) = aggregated.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "aggregated scores", index });
    }
    shift_normalize(aggregated, active_steps, epsilon).ok_or(Error::NoActiveCells)
}

/// Agent weights `[t][agent]` plus the timesteps that had no active agent.
pub fn agent_weights(m: &ScoreMatrix, epsilon: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    check_epsilon(epsilon)?;
    let mut weights = vec![0.0; m.steps * m.agents];
    let mut empty = Vec::new();
    for t in 0..m.steps {
        let (scores, active) = m.row(t);
        match shift_normalize(scores, active, epsilon) {
            Some(row) => weights[t * m.agents..(t + 1) * m.agents].copy_from_slice(&row),
            None => empty.push(t),
        }
    }
    Ok((weights, empty))
}

/// Both weight families for a score matrix.
pub fn compute_weights(m: &ScoreMatrix, epsilon: f64) -> Result<RedistributionWeights> {
    let aggregated = aggregate_scores(m);
    let temporal = temporal_weights_masked(&aggregated, &m.active_steps(), epsilon)?;
    let (agent, empty_steps) = agent_weights(m, epsilon)?;
    Ok(RedistributionWeights {
        steps: m.steps,
        agents: m.agents,
        temporal,
        agent,
        epsilon,
        empty_steps,
    })
}

/// Shaped rewards from explicit weights, rescaled so they sum to `team_reward`.
pub fn rewards_from_weights(
    weights: RedistributionWeights,
    active: &[bool],
    team_reward: f64,
) -> Result<RedistributedRewards> {
    if !team_reward.is_finite() {
        return Err(Error::InvalidArgument(format!("team reward {team_reward} is not finite")));
    }
    let (steps, agents) = (weights.steps, weights.agents);
    let mut rewards: Vec<f64> = weights.products().iter().map(|w| w * team_reward).collect();
    let total = stable_sum(rewards.iter().copied());
    if total != 0.0 {
        let scale = team_reward / total;
        rewards.iter_mut().for_each(|r| *r *= scale);
    } else if team_reward != 0.0 {
        // Zero mass everywhere: spread evenly over active cells instead.
        return rewards_from_weights(
            RedistributionWeights::uniform(steps, agents, active)?,
            active,
            team_reward,
        );
    }
    Ok(RedistributedRewards { steps, agents, rewards, team_reward, weights })
}

/// Redistribute `team_reward` according to `m`.
pub fn redistribute(m: &ScoreMatrix, team_reward: f64, epsilon: f64) -> Result<RedistributedRewards> {
    let weights = compute_weights(m, epsilon)?;
    rewards_from_weights(weights, &m.active, team_reward)
}

/// `delta[k] = sum_t w_temp[t] * w_agent[t, k]`.
pub fn delta_k(w: &RedistributionWeights) -> Vec<f64> {
    (0..w.agents)
        .map(|k| stable_sum((0..w.steps).map(|t| w.temporal[t] * w.agent_weight(t, k))))
        .collect()
}

/// Equal split of `team_reward` over active cells.
pub fn uniform_redistribution(
    steps: usize,
    agents: usize,
    active: &[bool],
    team_reward: f64,
) -> Result<RedistributedRewards> {
    let weights = RedistributionWeights::uniform(steps, agents, active)?;
    rewards_from_weights(weights, active, team_reward)
}

/// Temporal weights from the scores, uniform credit among agents of each step.
pub fn temporal_only_redistribution(
    m: &ScoreMatrix,
    team_reward: f64,
    epsilon: f64,
) -> Result<RedistributedRewards> {
    let aggregated = aggregate_scores(m);
    let temporal = temporal_weights_masked(&aggregated, &m.active_steps(), epsilon)?;
    let uniform = RedistributionWeights::uniform(m.steps, m.agents, &m.active)?;
    let weights = RedistributionWeights { temporal, epsilon, ..uniform };
    rewards_from_weights(weights, &m.active, team_reward)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")))
    }
}

/// Per-agent history potentials `phi[t][i] = sum_{k<t} s[k, i]`, `(T+1) x N`.
///
/// Held as exact rationals (every `f64` is a dyadic rational), so the
/// shaping identity can be checked with no rounding at all.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSeries {
    pub steps: usize,
    pub agents: usize,
    pub potentials: Vec<BigRational>,
    /// Always 1 for the episodic setting.
    pub gamma: f64,
}

fn exact(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::InvalidArgument(format!("{x} is not finite")))
}

impl PotentialSeries {
    /// Nearest `f64` of `phi[t][agent]`.
    pub fn potential(&self, t: usize, agent: usize) -> f64 {
        self.potentials[t * self.agents + agent].to_f64().unwrap_or(f64::NAN)
    }

    pub fn potential_mut(&mut self, t: usize, agent: usize) -> &mut BigRational {
        &mut self.potentials[t * self.agents + agent]
    }

    /// All potentials rounded to `f64`, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.potentials.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

pub fn potential_series(r: &RedistributedRewards) -> Result<PotentialSeries> {
    let mut potentials = vec![BigRational::zero(); (r.steps + 1) * r.agents];
    for t in 0..r.steps {
        for i in 0..r.agents {
            potentials[(t + 1) * r.agents + i] = &potentials[t * r.agents + i] + exact(r.reward(t, i))?;
        }
    }
    Ok(PotentialSeries { steps: r.steps, agents: r.agents, potentials, gamma: 1.0 })
}

/// Outcome of checking `gamma * phi[t+1] - phi[t] == s[t]` on every cell in
/// exact arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelescopingCheck {
    /// Every residual is exactly zero.
    pub holds: bool,
    pub max_residual: f64,
}

pub fn verify_telescoping(p: &PotentialSeries, r: &RedistributedRewards) -> Result<TelescopingCheck> {
    if p.steps != r.steps || p.agents != r.agents || p.potentials.len() != (r.steps + 1) * r.agents {
        return Err(Error::Shape(format!(
            "potentials for {}x{} do not match rewards for {}x{}",
            p.steps, p.agents, r.steps, r.agents
        )));
    }
    let gamma = exact(p.gamma)?;
    let mut max_residual = BigRational::zero();
    for t in 0..r.steps {
        for i in 0..r.agents {
            let k = t * r.agents + i;
            let shaping = &gamma * &p.potentials[k + r.agents] - &p.potentials[k];
            let residual = (shaping - exact(r.reward(t, i))?).abs();
            if residual > max_residual {
                max_residual = residual;
            }
        }
    }
    Ok(TelescopingCheck { holds: max_residual.is_zero(), max_residual: max_residual.to_f64().unwrap_or(f64::INFINITY) })
}

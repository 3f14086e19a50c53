//! MAPPO-style trainer on shaped rewards.
//!
//! Each iteration collects a batch of episodes with a frozen policy, turns
//! every terminal team reward into per-(t, agent) credit according to the
//! redistribution mode, computes discounted returns and GAE advantages per
//! agent against a PopArt-normalized centralized critic, then runs clipped
//! PPO epochs. The reward model is refit off-policy every `update_freq`
//! episodes from the replay buffer.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::RedistributionMode;
use crate::buffer::{Episode, TrajectoryBuffer};
use crate::envs::{EnvKind, Environment};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Linear, Mlp, ParamStore};
use crate::redistribution::{
    delta_k, redistribute, return_gap, temporal_only_redistribution, uniform_redistribution, RedistributedRewards,
    RedistributionWeights,
};
use crate::reward_model::{LossBreakdown, ModelShape, RewardModel, RewardModelConfig};
use crate::tensor::{softmax_in_place, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    /// Episodes per PPO minibatch.
    pub ppo_batch_size: usize,
    pub policy_lr: f64,
    pub policy_weight_decay: f64,
    pub policy_hidden_shape: usize,
    pub v_value_lr: f64,
    pub v_weight_decay: f64,
    pub v_hidden_shape: usize,
    pub grad_clip_actor: f64,
    pub grad_clip_critic_v: f64,
    pub policy_clip: f64,
    pub value_clip: f64,
    pub entropy_pen: f64,
    /// Episodes collected per iteration.
    pub num_rollout_threads: usize,
    pub popart_decay: f64,
    pub popart_per_agent: bool,
    /// Stability constant of the shift-and-normalize weights.
    pub epsilon: f64,
    /// Window for the final success rate.
    pub success_window: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_epochs: 15,
            ppo_batch_size: 30,
            policy_lr: 5e-4,
            policy_weight_decay: 0.0,
            policy_hidden_shape: 64,
            v_value_lr: 5e-4,
            v_weight_decay: 0.0,
            v_hidden_shape: 64,
            grad_clip_actor: 0.5,
            grad_clip_critic_v: 0.5,
            policy_clip: 0.2,
            value_clip: 0.2,
            entropy_pen: 1e-2,
            num_rollout_threads: 10,
            popart_decay: 0.999,
            popart_per_agent: true,
            epsilon: crate::redistribution::DEFAULT_EPSILON,
            success_window: 200,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.ppo_batch_size == 0 || self.num_rollout_threads == 0 || self.success_window == 0 {
            return bad("ppo_batch_size, num_rollout_threads and success_window must be positive");
        }
        if self.policy_hidden_shape == 0 || self.v_hidden_shape == 0 {
            return bad("hidden shapes must be positive");
        }
        if !(self.policy_lr > 0.0 && self.v_value_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.popart_decay) {
            return bad("popart_decay must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || self.policy_clip < 0.0 || self.value_clip < 0.0 {
            return bad("epsilon must be positive and clips non-negative");
        }
        Ok(())
    }
}

impl ModelShape {
    pub fn of(env: &dyn Environment) -> Self {
        ModelShape {
            agents: env.num_agents(),
            steps: env.horizon(),
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            num_actions: env.num_actions(),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th episode of a run.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    mix_seed(run_seed, index.wrapping_add(1))
}

/// Per-agent feedforward actors.
#[derive(Debug, Clone)]
pub struct Policy {
    pub params: ParamStore,
    pub shape: ModelShape,
    actors: Vec<Mlp>,
}

impl Policy {
    pub fn new(shape: ModelShape, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let actors: Vec<Mlp> = (0..shape.agents)
            .map(|i| {
                Mlp::new(
                    &mut params,
                    &format!("actor{i}"),
                    &[shape.obs_dim, hidden, hidden, shape.num_actions],
                    Activation::Tanh,
                    rng,
                )
            })
            .collect();
        // Small output weights start every agent near the uniform policy.
        for a in &actors {
            params.get_mut(a.last().w).data_mut().iter_mut().for_each(|w| *w *= 0.01);
        }
        Self { params, shape, actors }
    }

    /// Names of the parameters owned by `agent`'s actor.
    pub fn actor_prefix(agent: usize) -> String {
        format!("actor{agent}.")
    }

    /// Logits `[rows, num_actions]` of `agent`'s actor on `obs`.
    pub fn logits(&self, g: &mut Graph, p: &crate::nn::Bound, agent: usize, obs: Var) -> Result<Var> {
        self.actors
            .get(agent)
            .ok_or_else(|| Error::InvalidArgument(format!("no actor for agent {agent}")))?
            .forward(g, p, obs)
    }

    /// Action probabilities `[rows][num_actions]` for a block of observations.
    pub fn probabilities(&self, agent: usize, obs: &[f64]) -> Result<Vec<f64>> {
        let rows = obs.len() / self.shape.obs_dim;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![rows, self.shape.obs_dim], obs.to_vec())?);
        let logits = self.logits(&mut g, &p, agent, x)?;
        let mut out = g.value(logits).data().to_vec();
        out.chunks_mut(self.shape.num_actions).for_each(softmax_in_place);
        Ok(out)
    }
}

/// Centralized critic: all observations plus the global state to one value
/// per agent, in PopArt-normalized units.
#[derive(Debug, Clone)]
pub struct Critic {
    pub params: ParamStore,
    pub shape: ModelShape,
    net: Mlp,
}

impl Critic {
    pub fn new(shape: ModelShape, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let net = Mlp::new(
            &mut params,
            "critic",
            &[Self::input_dim(&shape), hidden, hidden, shape.agents],
            Activation::Tanh,
            rng,
        );
        Self { params, shape, net }
    }

    pub fn input_dim(shape: &ModelShape) -> usize {
        shape.agents * shape.obs_dim + shape.state_dim
    }

    pub fn output_layer(&self) -> Linear {
        *self.net.last()
    }

    /// Critic input rows `[T][input_dim]` of an episode.
    pub fn inputs(e: &Episode) -> Vec<f64> {
        let mut x = Vec::with_capacity(e.steps * (e.agents * e.obs_dim + e.state_dim));
        for t in 0..e.steps {
            for i in 0..e.agents {
                x.extend_from_slice(e.observation(t, i));
            }
            x.extend_from_slice(e.state(t));
        }
        x
    }

    pub fn forward(&self, g: &mut Graph, p: &crate::nn::Bound, x: Var) -> Result<Var> {
        self.net.forward(g, p, x)
    }

    /// Normalized values `[rows][agents]`.
    pub fn values(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let d = Self::input_dim(&self.shape);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![rows.len() / d, d], rows.to_vec())?);
        let v = self.forward(&mut g, &p, x)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// Running return statistics with debiased exponential moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopArt {
    pub decay: f64,
    pub mean: Vec<f64>,
    pub mean_sq: Vec<f64>,
    /// Accumulated weight `1 - decay^k` used for debiasing.
    pub debias: Vec<f64>,
    pub per_output: bool,
    pub outputs: usize,
}

impl PopArt {
    pub const MIN_VARIANCE: f64 = 1e-4;

    pub fn new(outputs: usize, decay: f64, per_output: bool) -> Self {
        let k = if per_output { outputs } else { 1 };
        Self { decay, mean: vec![0.0; k], mean_sq: vec![0.0; k], debias: vec![0.0; k], per_output, outputs }
    }

    fn slot(&self, output: usize) -> usize {
        if self.per_output {
            output
        } else {
            0
        }
    }

    /// Debiased mean and standard deviation for `output`.
    pub fn stats(&self, output: usize) -> (f64, f64) {
        let s = self.slot(output);
        if self.debias[s] == 0.0 {
            return (0.0, 1.0);
        }
        let mu = self.mean[s] / self.debias[s];
        let sq = self.mean_sq[s] / self.debias[s];
        (mu, (sq - mu * mu).max(Self::MIN_VARIANCE).sqrt())
    }

    pub fn normalize(&self, output: usize, x: f64) -> f64 {
        let (mu, sigma) = self.stats(output);
        (x - mu) / sigma
    }

    pub fn denormalize(&self, output: usize, y: f64) -> f64 {
        let (mu, sigma) = self.stats(output);
        y * sigma + mu
    }

    /// Fold in a batch of returns, `returns[output]` per output.
    pub fn update(&mut self, returns: &[Vec<f64>]) -> Result<()> {
        if returns.len() != self.outputs {
            return Err(Error::Shape(format!("{} return streams for {} outputs", returns.len(), self.outputs)));
        }
        let groups: Vec<Vec<f64>> = if self.per_output {
            returns.to_vec()
        } else {
            vec![returns.concat()]
        };
        for (s, xs) in groups.iter().enumerate() {
            if xs.is_empty() {
                continue;
            }
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let sq = xs.iter().map(|x| x * x).sum::<f64>() / n;
            let b = self.decay;
            self.mean[s] = b * self.mean[s] + (1.0 - b) * m;
            self.mean_sq[s] = b * self.mean_sq[s] + (1.0 - b) * sq;
            self.debias[s] = b * self.debias[s] + (1.0 - b);
        }
        Ok(())
    }

    /// Update statistics and rescale the critic's output layer so that its
    /// denormalized predictions are unchanged.
    pub fn update_preserving(&mut self, returns: &[Vec<f64>], params: &mut ParamStore, layer: Linear) -> Result<()> {
        let before: Vec<(f64, f64)> = (0..self.outputs).map(|k| self.stats(k)).collect();
        self.update(returns)?;
        let cols = layer.fan_out;
        for (k, &(mu, sigma)) in before.iter().enumerate() {
            let (mu2, sigma2) = self.stats(k);
            let w = params.get_mut(layer.w).data_mut();
            for r in 0..layer.fan_in {
                w[r * cols + k] *= sigma / sigma2;
            }
            if let Some(b) = layer.b {
                let b = &mut params.get_mut(b).data_mut()[k];
                *b = (sigma * *b + mu - mu2) / sigma2;
            }
        }
        Ok(())
    }
}

/// Discounted reward-to-go with zero terminal bootstrap.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// GAE(gamma, lambda) advantages for one reward stream; the value after the
/// last step is 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!("{} rewards vs {} values", rewards.len(), values.len())));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Per-sample PPO surrogate `min(r A, clip(r, 1 - c, 1 + c) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Per-cell credit handed to the learner for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Credit {
    /// `[t][agent]`.
    pub rewards: Vec<f64>,
    pub weights: Option<RedistributionWeights>,
    /// Whether the rewards sum to the team reward.
    pub equivalent: bool,
}

impl Credit {
    fn from_redistribution(r: RedistributedRewards) -> Self {
        let equivalent = r.is_return_equivalent();
        Self { rewards: r.rewards, weights: Some(r.weights), equivalent }
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Roll out one episode per seed with `policy`, all environments in lockstep.
/// Episodes whose environment faults are logged and dropped.
pub fn collect_episodes(policy: &Policy, kind: EnvKind, seeds: &[u64], greedy: bool) -> Result<Vec<Episode>> {
    let shape = policy.shape;
    let mut envs: Vec<Box<dyn Environment>> = seeds.iter().map(|_| kind.build()).collect();
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            r.set_stream(1);
            r
        })
        .collect();
    let mut obs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(seeds.len());
    let mut eps: Vec<Episode> = Vec::with_capacity(seeds.len());
    for (env, &seed) in envs.iter_mut().zip(seeds) {
        if ModelShape::of(env.as_ref()) != shape {
            return Err(Error::Shape("policy was built for a different environment".into()));
        }
        let first = env.reset(seed);
        eps.push(Episode {
            steps: shape.steps,
            agents: shape.agents,
            obs_dim: shape.obs_dim,
            state_dim: shape.state_dim,
            num_actions: shape.num_actions,
            observations: Vec::with_capacity(shape.steps * shape.agents * shape.obs_dim),
            actions: Vec::with_capacity(shape.steps * shape.agents),
            active: Vec::with_capacity(shape.steps * shape.agents),
            log_probs: Vec::with_capacity(shape.steps * shape.agents),
            policy_probs: Vec::with_capacity(shape.steps * shape.agents * shape.num_actions),
            states: env.global_state(),
            team_reward: 0.0,
            success: false,
            seed,
        });
        obs.push(first.observations);
    }
    let mut alive = vec![true; seeds.len()];
    let mut active: Vec<Vec<bool>> = vec![vec![true; shape.agents]; seeds.len()];
    let a = shape.num_actions;
    for _ in 0..shape.steps {
        let live: Vec<usize> = (0..seeds.len()).filter(|&j| alive[j]).collect();
        if live.is_empty() {
            break;
        }
        let mut joint = vec![vec![0usize; shape.agents]; seeds.len()];
        let mut step_probs = vec![vec![0.0; shape.agents * a]; seeds.len()];
        for agent in 0..shape.agents {
            let block: Vec<f64> = live.iter().flat_map(|&j| obs[j][agent].iter().copied()).collect();
            let probs = policy.probabilities(agent, &block)?;
            for (r, &j) in live.iter().enumerate() {
                let p = &probs[r * a..(r + 1) * a];
                let choice = if greedy {
                    (0..a).fold(0, |best, x| if p[x] > p[best] { x } else { best })
                } else {
                    let u: f64 = rngs[j].gen();
                    let mut acc = 0.0;
                    let mut pick = a - 1;
                    for (x, &px) in p.iter().enumerate() {
                        acc += px;
                        if u < acc {
                            pick = x;
                            break;
                        }
                    }
                    pick
                };
                joint[j][agent] = choice;
                step_probs[j][agent * a..(agent + 1) * a].copy_from_slice(p);
            }
        }
        for &j in &live {
            let e = &mut eps[j];
            for agent in 0..shape.agents {
                e.observations.extend_from_slice(&obs[j][agent]);
                e.active.push(active[j][agent]);
                let p = &step_probs[j][agent * a..(agent + 1) * a];
                e.log_probs.push(p[joint[j][agent]].ln());
                e.policy_probs.extend_from_slice(p);
            }
            e.actions.extend_from_slice(&joint[j]);
            match envs[j].step(&joint[j]) {
                Ok(out) => {
                    e.states.extend(envs[j].global_state());
                    e.team_reward = out.reward;
                    obs[j] = out.observations;
                    active[j] = out.active;
                }
                Err(err) => {
                    log::warn!("episode with seed {} dropped: {err}", e.seed);
                    alive[j] = false;
                }
            }
        }
    }
    for (j, e) in eps.iter_mut().enumerate() {
        e.success = envs[j].is_success();
    }
    Ok(eps.into_iter().zip(alive).filter_map(|(e, ok)| ok.then_some(e)).collect())
}

/// Collect on `threads` workers, each handling a contiguous block of seeds.
/// Every episode draws from its own seeded stream, so the result does not
/// depend on the worker count.
pub fn collect_parallel(policy: &Policy, kind: EnvKind, seeds: &[u64], greedy: bool, threads: usize) -> Result<Vec<Episode>> {
    #[cfg(feature = "parallel")]
    if threads > 1 && seeds.len() > 1 {
        use rayon::prelude::*;
        let chunk = seeds.len().div_ceil(threads);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let parts: Vec<Result<Vec<Episode>>> =
            pool.install(|| seeds.par_chunks(chunk).map(|c| collect_episodes(policy, kind, c, greedy)).collect());
        let mut out = Vec::with_capacity(seeds.len());
        for p in parts {
            out.extend(p?);
        }
        return Ok(out);
    }
    let _ = threads;
    collect_episodes(policy, kind, seeds, greedy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

pub fn evaluate(policy: &Policy, kind: EnvKind, episodes: usize, seed: u64, greedy: bool) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let seeds: Vec<u64> = (0..episodes as u64).map(|i| episode_seed(seed, i)).collect();
    let eps = collect_episodes(policy, kind, &seeds, greedy)?;
    let n = eps.len().max(1) as f64;
    Ok(EvalReport {
        episodes: eps.len(),
        success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
        mean_return: eps.iter().map(|e| e.team_reward).sum::<f64>() / n,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub rm_regression_loss: Option<f64>,
    pub rm_id_loss: Option<f64>,
    pub delta_mean: Option<f64>,
    pub delta_min: Option<f64>,
    pub delta_max: Option<f64>,
    /// Episodes in this iteration whose credit does not sum to `R`.
    pub equivalence_violations: usize,
    /// Episodes since the reward model was last refit, when it was used.
    pub model_age: Option<usize>,
    pub temporal_weight_entropy: Option<f64>,
    pub agent_weight_entropy: Option<f64>,
    /// `|mean(sum s + R) - 2 mean(R)|` over the iteration's episodes.
    pub doubling_residual: f64,
}

/// Flattened learner inputs for one iteration. Cells are `(episode, t, agent)`.
#[derive(Debug, Clone)]
pub struct PpoBatch {
    pub episodes: Vec<Episode>,
    pub credit: Vec<Credit>,
    pub advantages: Vec<f64>,
    /// PopArt-normalized return targets.
    pub targets: Vec<f64>,
    /// Normalized critic outputs at collection time.
    pub old_values: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoLosses {
    pub policy: f64,
    pub entropy: f64,
    pub value: f64,
}

/// Complete mutable training state for one seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub model_config: RewardModelConfig,
    pub mode: RedistributionMode,
    pub env: EnvKind,
    pub shape: ModelShape,
    pub seed: u64,
    pub policy: Policy,
    pub policy_opt: Adam,
    pub critic: Critic,
    pub critic_opt: Adam,
    pub popart: PopArt,
    pub model: Option<RewardModel>,
    pub buffer: TrajectoryBuffer,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub episodes_seen: usize,
    /// `episodes_seen` when the reward model was last refit.
    pub last_model_update: Option<usize>,
    pub last_model_loss: Option<LossBreakdown>,
    pub recent_success: VecDeque<bool>,
    /// Rollout workers; results do not depend on it.
    pub threads: usize,
}

impl Trainer {
    pub fn new(
        env: EnvKind,
        mode: RedistributionMode,
        config: TrainerConfig,
        model_config: RewardModelConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let model_config = mode.model_config(&model_config);
        model_config.validate()?;
        let shape = ModelShape::of(env.build().as_ref());
        let mut init = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
        let policy = Policy::new(shape, config.policy_hidden_shape, &mut init);
        let critic = Critic::new(shape, config.v_hidden_shape, &mut init);
        let policy_opt = Adam::new(&policy.params, config.policy_lr, config.policy_weight_decay, config.grad_clip_actor);
        let critic_opt = Adam::new(&critic.params, config.v_value_lr, config.v_weight_decay, config.grad_clip_critic_v);
        let popart = PopArt::new(shape.agents, config.popart_decay, config.popart_per_agent);
        let model = if mode.uses_model() {
            Some(RewardModel::new(model_config.clone(), shape, mix_seed(seed, 2))?)
        } else {
            None
        };
        let buffer = TrajectoryBuffer::new(model_config.buffer_capacity, mix_seed(seed, 3))?;
        Ok(Self {
            config,
            model_config,
            mode,
            env,
            shape,
            seed,
            policy,
            policy_opt,
            critic,
            critic_opt,
            popart,
            model,
            buffer,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 4)),
            iteration: 0,
            episodes_seen: 0,
            last_model_update: None,
            last_model_loss: None,
            recent_success: VecDeque::new(),
            threads: 1,
        })
    }

    /// Whether credit currently comes from the model (false during warmup).
    pub fn model_active(&self) -> bool {
        match self.mode {
            RedistributionMode::Uniform => false,
            RedistributionMode::NoNormalization => true,
            _ => self.last_model_update.is_some(),
        }
    }

    /// Per-cell credit for a set of episodes under the current mode.
    pub fn credit(&mut self, episodes: &[Episode]) -> Result<Vec<Credit>> {
        let eps = self.config.epsilon;
        if !self.model_active() {
            return episodes
                .iter()
                .map(|e| {
                    uniform_redistribution(e.steps, e.agents, &e.active, e.team_reward).map(Credit::from_redistribution)
                })
                .collect();
        }
        let model = self.model.as_mut().expect("model-based mode has a model");
        let refs: Vec<&Episode> = episodes.iter().collect();
        let scores = model.score_batch(&refs)?;
        episodes
            .iter()
            .zip(scores)
            .map(|(e, m)| match self.mode {
                RedistributionMode::NoNormalization => {
                    let rewards = m.scores().to_vec();
                    let equivalent = return_gap(&rewards, e.team_reward) <= 1e-9 * e.team_reward.abs().max(1.0);
                    Ok(Credit { rewards, weights: None, equivalent })
                }
                RedistributionMode::TemporalOnly => {
                    temporal_only_redistribution(&m, e.team_reward, eps).map(Credit::from_redistribution)
                }
                _ => redistribute(&m, e.team_reward, eps).map(Credit::from_redistribution),
            })
            .collect()
    }

    fn critic_values(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        let rows: Vec<f64> = episodes.iter().flat_map(Critic::inputs).collect();
        self.critic.values(&rows)
    }

    /// Credit, returns, PopArt update and advantages for fresh episodes.
    pub fn prepare_batch(&mut self, episodes: Vec<Episode>) -> Result<PpoBatch> {
        let credit = self.credit(&episodes)?;
        if self.mode != RedistributionMode::NoNormalization {
            if let Some((e, _)) = episodes.iter().zip(&credit).find(|(_, c)| !c.equivalent) {
                return Err(Error::InvalidArgument(format!(
                    "credit for episode seed {} does not sum to its team reward",
                    e.seed
                )));
            }
        }
        let (n, t) = (self.shape.agents, self.shape.steps);
        let (gamma, lambda) = (self.config.gamma, self.config.gae_lambda);
        let cells = episodes.len() * t * n;
        let mut returns = vec![0.0; cells];
        let mut streams = vec![Vec::with_capacity(episodes.len() * t); n];
        for (j, c) in credit.iter().enumerate() {
            for agent in 0..n {
                let r: Vec<f64> = (0..t).map(|s| c.rewards[s * n + agent]).collect();
                for (s, g) in discounted_returns(&r, gamma).into_iter().enumerate() {
                    returns[(j * t + s) * n + agent] = g;
                    if episodes[j].active[s * n + agent] {
                        streams[agent].push(g);
                    }
                }
            }
        }
        let layer = self.critic.output_layer();
        self.popart.update_preserving(&streams, &mut self.critic.params, layer)?;
        let old_values = self.critic_values(&episodes)?;
        let mut advantages = vec![0.0; cells];
        let mut targets = vec![0.0; cells];
        for (j, c) in credit.iter().enumerate() {
            for agent in 0..n {
                let r: Vec<f64> = (0..t).map(|s| c.rewards[s * n + agent]).collect();
                let v: Vec<f64> =
                    (0..t).map(|s| self.popart.denormalize(agent, old_values[(j * t + s) * n + agent])).collect();
                for (s, a) in gae(&r, &v, gamma, lambda)?.into_iter().enumerate() {
                    let cell = (j * t + s) * n + agent;
                    advantages[cell] = a;
                    targets[cell] = self.popart.normalize(agent, returns[cell]);
                }
            }
        }
        Ok(PpoBatch { episodes, credit, advantages, targets, old_values, returns })
    }

    /// Actor and critic losses on the episodes `idx` of `batch`.
    fn losses_graph(
        &self,
        g: &mut Graph,
        pp: &crate::nn::Bound,
        cp: &crate::nn::Bound,
        batch: &PpoBatch,
        idx: &[usize],
    ) -> Result<(Var, Var, Var, Var)> {
        let (n, t, a) = (self.shape.agents, self.shape.steps, self.shape.num_actions);
        let clip = self.config.policy_clip;
        // Advantages are standardized over the minibatch's active cells.
        let mut adv_all = Vec::new();
        for &j in idx {
            let e = &batch.episodes[j];
            for c in 0..t * n {
                if e.active[c] {
                    adv_all.push(batch.advantages[j * t * n + c]);
                }
            }
        }
        let m = adv_all.len().max(1) as f64;
        let mean = adv_all.iter().sum::<f64>() / m;
        let std = (adv_all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
        let norm = |x: f64| (x - mean) / (std + 1e-8);

        let mut surrogates = Vec::with_capacity(n);
        let mut entropies = Vec::with_capacity(n);
        for agent in 0..n {
            let mut obs = Vec::new();
            let (mut acts, mut old_lp, mut adv) = (Vec::new(), Vec::new(), Vec::new());
            for &j in idx {
                let e = &batch.episodes[j];
                for s in 0..t {
                    let c = e.cell(s, agent);
                    if e.active[c] {
                        obs.extend_from_slice(e.observation(s, agent));
                        acts.push(e.actions[c]);
                        old_lp.push(e.log_probs[c]);
                        adv.push(norm(batch.advantages[j * t * n + c]));
                    }
                }
            }
            if acts.is_empty() {
                continue;
            }
            let rows = acts.len();
            let x = g.constant(Tensor::new(vec![rows, self.shape.obs_dim], obs)?);
            let logits = self.policy.logits(g, pp, agent, x)?;
            let lsm = g.log_softmax(logits);
            let lp = g.gather_last(lsm, &acts)?;
            let old = g.constant(Tensor::from_vec(&[rows], old_lp));
            let diff = g.sub(lp, old)?;
            let ratio = g.exp(diff);
            let adv = g.constant(Tensor::from_vec(&[rows], adv));
            let s1 = g.mul(ratio, adv)?;
            let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
            let s2 = g.mul(clipped, adv)?;
            surrogates.push(g.minimum(s1, s2)?);
            let probs = g.softmax(logits);
            let plogp = g.mul(probs, lsm)?;
            let neg = g.sum_last(plogp);
            entropies.push(g.scale(neg, -1.0));
            debug_assert_eq!(g.shape(logits)[1], a);
        }
        let surr = g.concat(&surrogates)?;
        let surr = g.mean(surr);
        let policy_loss = g.scale(surr, -1.0);
        let ent = g.concat(&entropies)?;
        let entropy = g.mean(ent);
        let bonus = g.scale(entropy, -self.config.entropy_pen);
        let actor_loss = g.add(policy_loss, bonus)?;

        let d = Critic::input_dim(&self.shape);
        let mut x = Vec::with_capacity(idx.len() * t * d);
        let (mut old_v, mut target, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for &j in idx {
            let e = &batch.episodes[j];
            x.extend(Critic::inputs(e));
            let range = j * t * n..(j + 1) * t * n;
            old_v.extend_from_slice(&batch.old_values[range.clone()]);
            target.extend_from_slice(&batch.targets[range]);
            mask.extend(e.active.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let rows = idx.len() * t;
        let count: f64 = mask.iter().sum::<f64>().max(1.0);
        let x = g.constant(Tensor::new(vec![rows, d], x)?);
        let v = self.critic.forward(g, cp, x)?;
        let old_v = g.constant(Tensor::from_vec(&[rows, n], old_v));
        let target = g.constant(Tensor::from_vec(&[rows, n], target));
        let mask = g.constant(Tensor::from_vec(&[rows, n], mask));
        let vc = self.config.value_clip;
        let dv = g.sub(v, old_v)?;
        let dv = g.clamp(dv, -vc, vc);
        let v_clip = g.add(old_v, dv)?;
        let e1 = g.sub(v, target)?;
        let e1 = g.square(e1);
        let e2 = g.sub(v_clip, target)?;
        let e2 = g.square(e2);
        let worst = g.maximum(e1, e2)?;
        let worst = g.mul(worst, mask)?;
        let total = g.sum(worst);
        let value_loss = g.scale(total, 1.0 / count);
        Ok((actor_loss, policy_loss, entropy, value_loss))
    }

    /// Loss values without updating anything.
    pub fn evaluate_losses(&self, batch: &PpoBatch, idx: &[usize]) -> Result<(f64, PpoLosses)> {
        let mut g = Graph::new();
        let pp = self.policy.params.bind(&mut g, false);
        let cp = self.critic.params.bind(&mut g, false);
        let (actor, policy, entropy, value) = self.losses_graph(&mut g, &pp, &cp, batch, idx)?;
        let l = PpoLosses { policy: g.value(policy).item(), entropy: g.value(entropy).item(), value: g.value(value).item() };
        Ok((g.value(actor).item() + l.value, l))
    }

    /// One actor step and one critic step on the episodes `idx`.
    pub fn ppo_step(&mut self, batch: &PpoBatch, idx: &[usize]) -> Result<PpoLosses> {
        let mut g = Graph::new();
        let pp = self.policy.params.bind(&mut g, true);
        let cp = self.critic.params.bind(&mut g, true);
        let (actor, policy, entropy, value) = self.losses_graph(&mut g, &pp, &cp, batch, idx)?;
        let out = PpoLosses { policy: g.value(policy).item(), entropy: g.value(entropy).item(), value: g.value(value).item() };
        for (what, x) in [("policy", out.policy), ("value", out.value), ("entropy", out.entropy)] {
            if !x.is_finite() {
                return Err(Error::NonFiniteLoss { what, iteration: self.iteration });
            }
        }
        let total = g.add(actor, value)?;
        g.backward(total)?;
        self.policy_opt.step(&mut self.policy.params, &pp.grads(&g))?;
        self.critic_opt.step(&mut self.critic.params, &cp.grads(&g))?;
        Ok(out)
    }

    /// Collect, credit, update. Collects `min(num_rollout_threads, limit)` episodes.
    pub fn iterate(&mut self, limit: usize) -> Result<IterationMetrics> {
        let k = self.config.num_rollout_threads.min(limit).max(1);
        let seeds: Vec<u64> =
            (self.episodes_seen..self.episodes_seen + k).map(|i| episode_seed(self.seed, i as u64)).collect();
        let episodes = collect_parallel(&self.policy, self.env, &seeds, false, self.threads)?;
        if episodes.is_empty() {
            return Err(Error::Env("every episode of the iteration faulted".into()));
        }
        let model_age = self.model_active().then(|| self.episodes_seen - self.last_model_update.unwrap_or(0));
        let batch = self.prepare_batch(episodes)?;

        let mut sums = PpoLosses::default();
        let mut steps = 0usize;
        let mut order: Vec<usize> = (0..batch.episodes.len()).collect();
        for _ in 0..self.config.ppo_epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.ppo_batch_size) {
                let l = self.ppo_step(&batch, chunk)?;
                sums.policy += l.policy;
                sums.value += l.value;
                sums.entropy += l.entropy;
                steps += 1;
            }
        }
        let steps_f = steps.max(1) as f64;

        let before = self.episodes_seen;
        self.episodes_seen += k;
        for e in &batch.episodes {
            self.recent_success.push_back(e.success);
            if self.recent_success.len() > self.config.success_window {
                self.recent_success.pop_front();
            }
        }
        if self.model.is_some() {
            for e in &batch.episodes {
                self.buffer.push(e.clone())?;
            }
            let f = self.model_config.update_freq;
            if self.episodes_seen / f > before / f {
                let model = self.model.as_mut().expect("checked");
                let curve = model.train(&mut self.buffer)?;
                self.last_model_loss = curve.last().copied();
                self.last_model_update = Some(self.episodes_seen);
            }
        }

        let metrics = self.metrics(&batch, sums, steps_f, model_age);
        self.iteration += 1;
        Ok(metrics)
    }

    fn metrics(&self, batch: &PpoBatch, sums: PpoLosses, steps: f64, model_age: Option<usize>) -> IterationMetrics {
        let eps = &batch.episodes;
        let count = eps.len() as f64;
        let mean_return = eps.iter().map(|e| e.team_reward).sum::<f64>() / count;
        let shaped_total: f64 = batch.credit.iter().map(|c| c.rewards.iter().sum::<f64>()).sum();
        let doubling =
            ((shaped_total + eps.iter().map(|e| e.team_reward).sum::<f64>()) / count - 2.0 * mean_return).abs();
        let deltas: Vec<f64> =
            batch.credit.iter().filter_map(|c| c.weights.as_ref()).flat_map(delta_k).collect();
        let weights: Vec<&RedistributionWeights> = batch.credit.iter().filter_map(|c| c.weights.as_ref()).collect();
        let (t_ent, a_ent) = if weights.is_empty() {
            (None, None)
        } else {
            let t_ent = weights.iter().map(|w| entropy(&w.temporal)).sum::<f64>() / weights.len() as f64;
            let a_ent = weights
                .iter()
                .map(|w| {
                    let rows: Vec<f64> = w.agent.chunks(w.agents).map(entropy).collect();
                    rows.iter().sum::<f64>() / rows.len() as f64
                })
                .sum::<f64>()
                / weights.len() as f64;
            (Some(t_ent), Some(a_ent))
        };
        let (dmean, dmin, dmax) = if deltas.is_empty() {
            (None, None, None)
        } else {
            (
                Some(deltas.iter().sum::<f64>() / deltas.len() as f64),
                Some(deltas.iter().copied().fold(f64::INFINITY, f64::min)),
                Some(deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            )
        };
        IterationMetrics {
            iteration: self.iteration,
            episodes: self.episodes_seen,
            mean_return,
            success_rate: eps.iter().filter(|e| e.success).count() as f64 / count,
            policy_loss: sums.policy / steps,
            value_loss: sums.value / steps,
            entropy: sums.entropy / steps,
            rm_regression_loss: self.last_model_loss.map(|l| l.regression),
            rm_id_loss: self.last_model_loss.map(|l| l.inverse_dynamics),
            delta_mean: dmean,
            delta_min: dmin,
            delta_max: dmax,
            equivalence_violations: batch.credit.iter().filter(|c| !c.equivalent).count(),
            model_age,
            temporal_weight_entropy: t_ent,
            agent_weight_entropy: a_ent,
            doubling_residual: doubling,
        }
    }

    /// Success rate over the last `success_window` episodes.
    pub fn final_success(&self) -> f64 {
        if self.recent_success.is_empty() {
            return 0.0;
        }
        self.recent_success.iter().filter(|&&s| s).count() as f64 / self.recent_success.len() as f64
    }

    /// Run iterations until `budget` episodes have been collected.
    pub fn train(
        &mut self,
        budget: usize,
        mut sink: impl FnMut(&Trainer, &IterationMetrics) -> Result<()>,
    ) -> Result<TrainSummary> {
        let mut history = Vec::new();
        while self.episodes_seen < budget {
            let m = self.iterate(budget - self.episodes_seen)?;
            sink(self, &m)?;
            history.push(m);
        }
        Ok(TrainSummary::from_history(&history, self.final_success()))
    }
}

/// Per-seed outcome of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub episodes: usize,
    /// Mean per-iteration success rate.
    pub success_auc: f64,
    pub final_success: f64,
    /// Mean team reward over the last tenth of iterations.
    pub final_mean_return: f64,
    /// Fraction of episodes whose credit did not sum to `R`.
    pub violation_rate: f64,
    pub max_doubling_residual: f64,
}

impl TrainSummary {
    pub fn from_history(history: &[IterationMetrics], final_success: f64) -> Self {
        let n = history.len().max(1) as f64;
        let tail = (history.len() / 10).max(1).min(history.len().max(1));
        let tail_slice = &history[history.len().saturating_sub(tail)..];
        let episodes = history.last().map_or(0, |m| m.episodes);
        let violations: usize = history.iter().map(|m| m.equivalence_violations).sum();
        Self {
            iterations: history.len(),
            episodes,
            success_auc: history.iter().map(|m| m.success_rate).sum::<f64>() / n,
            final_success,
            final_mean_return: tail_slice.iter().map(|m| m.mean_return).sum::<f64>() / tail_slice.len().max(1) as f64,
            violation_rate: violations as f64 / episodes.max(1) as f64,
            max_doubling_residual: history.iter().map(|m| m.doubling_residual).fold(0.0, f64::max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_examples() {
        let adv = gae(&[0.0, 1.0], &[0.5, 0.2], 0.99, 0.95).unwrap();
        assert!((adv[1] - 0.8).abs() < 1e-15);
        let d0 = 0.99 * 0.2 - 0.5;
        assert!((adv[0] - (d0 + 0.99 * 0.95 * 0.8)).abs() < 1e-15);
        assert!((adv[0] - 0.4504).abs() < 1e-12, "{}", adv[0]);
        let r = [0.3, -0.1, 0.7, 0.2];
        let adv = gae(&r, &[0.0; 4], 1.0, 1.0).unwrap();
        let rtg = discounted_returns(&r, 1.0);
        for (a, b) in adv.iter().zip(&rtg) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(gae(&[0.0; 3], &[0.0; 3], 0.99, 0.95).unwrap(), vec![0.0; 3]);
        assert!(gae(&[0.0; 3], &[0.0; 2], 0.99, 0.95).is_err());
    }

    #[test]
    fn surrogate_clip_boundaries() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_surrogate(2.0, 1.5, 0.2) - 1.2 * 1.5).abs() < 1e-15);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn popart_first_update_and_inverse() {
        let mut p = PopArt::new(1, 0.999, true);
        p.update(&[vec![1.0, 3.0]]).unwrap();
        let (mu, sigma) = p.stats(0);
        assert!((mu - 2.0).abs() < 1e-12);
        assert!((sigma - 1.0).abs() < 1e-9);
        assert!((p.normalize(0, 1.0) + 1.0).abs() < 1e-9);
        assert!((p.normalize(0, 3.0) - 1.0).abs() < 1e-9);
        for x in [-5.0, 0.0, 0.3, 17.0] {
            assert!((p.denormalize(0, p.normalize(0, x)) - x).abs() < 1e-10);
        }
        let mut c = PopArt::new(1, 0.999, true);
        for _ in 0..50 {
            c.update(&[vec![4.0; 8]]).unwrap();
        }
        assert!(c.normalize(0, 4.0).abs() < 1e-9);
        assert!(c.stats(0).1 > 0.0);
    }

    #[test]
    fn popart_rescale_preserves_outputs() {
        let shape = ModelShape { agents: 2, steps: 3, obs_dim: 2, state_dim: 1, num_actions: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut critic = Critic::new(shape, 8, &mut rng);
        let mut p = PopArt::new(2, 0.9, true);
        p.update(&[vec![0.5, 1.0], vec![-2.0, 4.0]]).unwrap();
        let x: Vec<f64> = (0..Critic::input_dim(&shape) * 3).map(|k| (k as f64 * 0.37).sin()).collect();
        let before: Vec<f64> =
            critic.values(&x).unwrap().iter().enumerate().map(|(j, &v)| p.denormalize(j % 2, v)).collect();
        let layer = critic.output_layer();
        p.update_preserving(&[vec![10.0, 12.0], vec![3.0, 3.5]], &mut critic.params, layer).unwrap();
        let after: Vec<f64> =
            critic.values(&x).unwrap().iter().enumerate().map(|(j, &v)| p.denormalize(j % 2, v)).collect();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn shared_popart_pools_outputs() {
        let mut p = PopArt::new(2, 0.5, false);
        p.update(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(p.stats(0), p.stats(1));
        assert!((p.stats(0).0 - 2.0).abs() < 1e-12);
    }
}

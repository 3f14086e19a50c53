//! Hindsight contribution-score model.
//!
//! Each (agent, timestep) token is an observation projection plus an action
//! embedding plus a learned positional vector. Every layer runs temporal
//! attention (per agent, across timesteps, bidirectional) followed by agent
//! attention (per timestep, across agents) and a feedforward block, all
//! pre-norm with residuals. The score head reads each latent token together
//! with an embedding `Z` of the final global state. An inverse-dynamics head
//! predicts `a_{i,t}` from `emb(s_t)`, `emb(s_{t+1})` and the agent's latent at
//! `t - 1` (a learned start token at `t = 0`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{Episode, TrajectoryBuffer};
use crate::error::{Error, Result};
use crate::nn::{embedding_init, Activation, Adam, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::redistribution::{redistribute, RedistributedRewards, ScoreMatrix};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdTarget {
    /// Cross-entropy against the executed action.
    #[default]
    Action,
    /// Cross-entropy against the stored acting distribution.
    PolicyDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub dropout: f64,
    /// Weight of the inverse-dynamics cross-entropy.
    pub lambda_id: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Episodes between training rounds of the model.
    pub update_freq: usize,
    /// Gradient steps per training round.
    pub update_epochs: usize,
    pub use_log_target: bool,
    pub condition_on_outcome: bool,
    pub use_inverse_dynamics: bool,
    pub id_target: IdTarget,
    /// Share action embeddings across agents and drop the agent-identity
    /// embedding, making the model agent-permutation equivariant.
    pub tie_agent_embeddings: bool,
    pub buffer_capacity: usize,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            depth: 3,
            dropout: 0.0,
            lambda_id: 5e-2,
            lr: 5e-4,
            weight_decay: 0.0,
            grad_clip: 10.0,
            batch_size: 128,
            update_freq: 200,
            update_epochs: 200,
            use_log_target: false,
            condition_on_outcome: true,
            use_inverse_dynamics: true,
            id_target: IdTarget::Action,
            tie_agent_embeddings: false,
            buffer_capacity: 5000,
        }
    }
}

impl RewardModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("reward_model: {m}")));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be a positive multiple of num_heads");
        }
        if !(self.lambda_id >= 0.0) {
            return bad("lambda_id must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.update_freq == 0 || self.buffer_capacity == 0 {
            return bad("lr, batch_size, update_freq and buffer_capacity must be positive");
        }
        Ok(())
    }
}

/// Environment dimensions the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub agents: usize,
    pub steps: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub num_actions: usize,
}

impl ModelShape {
    fn check(&self, e: &Episode) -> Result<()> {
        if e.agents != self.agents
            || e.steps != self.steps
            || e.obs_dim != self.obs_dim
            || e.state_dim != self.state_dim
            || e.num_actions != self.num_actions
        {
            return Err(Error::Shape(format!(
                "episode T={} N={} obs={} state={} actions={} does not match model {:?}",
                e.steps, e.agents, e.obs_dim, e.state_dim, e.num_actions, self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    t_q: Linear,
    t_k: Linear,
    t_v: Linear,
    t_o: Linear,
    a_q: Linear,
    a_k: Linear,
    a_v: Linear,
    a_o: Linear,
    ff: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    obs_proj: Linear,
    action_emb: ParamId,
    agent_emb: Option<ParamId>,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    state_enc: Linear,
    outcome: Linear,
    score_head: Mlp,
    id_start: ParamId,
    id_head: Mlp,
}

/// Loss value and its two components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of `(target - sum c)^2`.
    pub regression: f64,
    /// Batch mean of the summed inverse-dynamics cross-entropy (before `lambda`).
    pub inverse_dynamics: f64,
}

/// Latent tokens `[agent][t][embed_dim]` and the outcome embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub latent: Vec<f64>,
    pub z: Vec<f64>,
    pub embed_dim: usize,
}

struct Forward {
    /// `[B, N * T]`, zero on inactive cells.
    scores: Var,
    latent: Var,
    z: Var,
    id_logits: Option<Var>,
}

/// Constant inputs derived from a batch of episodes. Rows are ordered
/// `(b, agent, t)`.
struct Inputs {
    b: usize,
    obs: Tensor,
    action_ids: Vec<usize>,
    agent_ids: Vec<usize>,
    pos_ids: Vec<usize>,
    mask_bnt: Vec<bool>,
    mask_btn: Vec<bool>,
    states: Tensor,
    final_rows: Vec<usize>,
    batch_rows: Vec<usize>,
    cur_rows: Vec<usize>,
    next_rows: Vec<usize>,
    prev_rows: Vec<usize>,
    first: Vec<bool>,
    cell_mask: Vec<f64>,
    actions: Vec<usize>,
    probs: Vec<f64>,
    rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub config: RewardModelConfig,
    pub shape: ModelShape,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Completed gradient steps.
    pub rounds: u64,
    dropout_rng: ChaCha8Rng,
    layout: Layout,
}

impl RewardModel {
    pub fn new(config: RewardModelConfig, shape: ModelShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let obs_proj = Linear::new(&mut p, "embed.obs", shape.obs_dim, d, &mut rng);
        let action_rows = if config.tie_agent_embeddings { shape.num_actions } else { shape.agents * shape.num_actions };
        let action_emb = p.add("embed.action", embedding_init(&mut rng, action_rows, d));
        let agent_emb =
            (!config.tie_agent_embeddings).then(|| p.add("embed.agent", embedding_init(&mut rng, shape.agents, d)));
        let pos_emb = p.add("embed.position", embedding_init(&mut rng, shape.steps, d));
        let blocks = (0..config.depth)
            .map(|l| {
                // Key biases cancel inside the softmax, so keys get none.
                let mut lin = |n: &str, bias: bool| {
                    let name = format!("layer{l}.{n}");
                    if bias {
                        Linear::new(&mut p, &name, d, d, &mut rng)
                    } else {
                        Linear::unbiased(&mut p, &name, d, d, &mut rng)
                    }
                };
                let (t_q, t_k) = (lin("temporal.q", true), lin("temporal.k", false));
                let (t_v, t_o) = (lin("temporal.v", true), lin("temporal.o", true));
                let (a_q, a_k) = (lin("agent.q", true), lin("agent.k", false));
                let (a_v, a_o) = (lin("agent.v", true), lin("agent.o", true));
                let ff = Mlp::new(&mut p, &format!("layer{l}.ff"), &[d, 2 * d, d], Activation::Gelu, &mut rng);
                Block { t_q, t_k, t_v, t_o, a_q, a_k, a_v, a_o, ff }
            })
            .collect();
        let state_enc = Linear::new(&mut p, "state.embed", shape.state_dim, d, &mut rng);
        let outcome = Linear::new(&mut p, "outcome", d, d, &mut rng);
        let score_head = Mlp::new(&mut p, "score", &[2 * d, d, 1], Activation::Gelu, &mut rng);
        let id_start = p.add("inverse.start", embedding_init(&mut rng, 1, d));
        let id_head = Mlp::new(&mut p, "inverse.head", &[3 * d, d, shape.num_actions], Activation::Gelu, &mut rng);
        let layout =
            Layout { obs_proj, action_emb, agent_emb, pos_emb, blocks, state_enc, outcome, score_head, id_start, id_head };
        let optimizer = Adam::new(&p, config.lr, config.weight_decay, config.grad_clip);
        Ok(Self {
            config,
            shape,
            params: p,
            optimizer,
            rounds: 0,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f),
            layout,
        })
    }

    /// Whether parameter `name` belongs to the inverse-dynamics head.
    pub fn is_inverse_dynamics_param(name: &str) -> bool {
        name.starts_with("inverse.")
    }

    pub fn dropout_rng(&self) -> &ChaCha8Rng {
        &self.dropout_rng
    }

    pub fn set_dropout_rng(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = rng;
    }

    fn inputs(&self, batch: &[&Episode]) -> Result<Inputs> {
        if batch.is_empty() {
            return Err(Error::Empty("reward-model batch"));
        }
        let s = self.shape;
        for e in batch {
            s.check(e)?;
        }
        let (b, n, t) = (batch.len(), s.agents, s.steps);
        let rows = b * n * t;
        let mut obs = Vec::with_capacity(rows * s.obs_dim);
        let mut inp = Inputs {
            b,
            obs: Tensor::zeros(&[0]),
            action_ids: Vec::with_capacity(rows),
            agent_ids: Vec::with_capacity(rows),
            pos_ids: Vec::with_capacity(rows),
            mask_bnt: Vec::with_capacity(rows),
            mask_btn: vec![false; rows],
            states: Tensor::zeros(&[0]),
            final_rows: Vec::with_capacity(b),
            batch_rows: Vec::with_capacity(rows),
            cur_rows: Vec::with_capacity(rows),
            next_rows: Vec::with_capacity(rows),
            prev_rows: Vec::with_capacity(rows),
            first: Vec::with_capacity(rows),
            cell_mask: Vec::with_capacity(rows),
            actions: Vec::with_capacity(rows),
            probs: Vec::with_capacity(rows * s.num_actions),
            rewards: batch.iter().map(|e| e.team_reward).collect(),
        };
        let mut states = Vec::with_capacity(b * (t + 1) * s.state_dim);
        for (bi, e) in batch.iter().enumerate() {
            states.extend_from_slice(&e.states);
            inp.final_rows.push(bi * (t + 1) + t);
            for agent in 0..n {
                for step in 0..t {
                    let row = (bi * n + agent) * t + step;
                    let a = e.actions[e.cell(step, agent)];
                    let active = e.active[e.cell(step, agent)];
                    obs.extend_from_slice(e.observation(step, agent));
                    let id = if self.config.tie_agent_embeddings { a } else { agent * s.num_actions + a };
                    inp.action_ids.push(id);
                    inp.agent_ids.push(agent);
                    inp.pos_ids.push(step);
                    inp.mask_bnt.push(active);
                    inp.mask_btn[(bi * t + step) * n + agent] = active;
                    inp.batch_rows.push(bi);
                    inp.cur_rows.push(bi * (t + 1) + step);
                    inp.next_rows.push(bi * (t + 1) + step + 1);
                    inp.prev_rows.push(if step == 0 { row } else { row - 1 });
                    inp.first.push(step == 0);
                    inp.cell_mask.push(if active { 1.0 } else { 0.0 });
                    inp.actions.push(a);
                    let p = e.probs(step, agent);
                    inp.probs.extend(p.iter().map(|&x| if active { x } else { 0.0 }));
                }
            }
        }
        inp.obs = Tensor::from_vec(&[rows, s.obs_dim], obs);
        inp.states = Tensor::from_vec(&[b * (t + 1), s.state_dim], states);
        Ok(inp)
    }

    fn dropout(&mut self, g: &mut Graph, x: Var, train: bool) -> Var {
        let p = self.config.dropout;
        if !train || p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if self.dropout_rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = g.constant(Tensor::from_vec(&shape, mask));
        g.mul(x, m).expect("dropout mask matches its input")
    }

    fn forward(&mut self, g: &mut Graph, p: &Bound, inp: &Inputs, need_id: bool, train: bool) -> Result<Forward> {
        let l = self.layout.clone();
        let (b, n, t, d) = (inp.b, self.shape.agents, self.shape.steps, self.config.embed_dim);
        let rows = b * n * t;
        let heads = self.config.num_heads;

        let obs = g.constant(inp.obs.clone());
        let mut x = l.obs_proj.forward(g, p, obs)?;
        let act = g.embed_lookup(p.var(l.action_emb), &inp.action_ids)?;
        x = g.add(x, act)?;
        let pos = g.embed_lookup(p.var(l.pos_emb), &inp.pos_ids)?;
        x = g.add(x, pos)?;
        if let Some(agent) = l.agent_emb {
            let e = g.embed_lookup(p.var(agent), &inp.agent_ids)?;
            x = g.add(x, e)?;
        }

        for blk in &l.blocks {
            // Temporal attention: groups are (b, agent), sequence is t.
            let h = g.layer_norm(x, LN_EPS);
            let q = blk.t_q.forward(g, p, h)?;
            let k = blk.t_k.forward(g, p, h)?;
            let v = blk.t_v.forward(g, p, h)?;
            let q = g.reshape(q, &[b * n, t, d])?;
            let k = g.reshape(k, &[b * n, t, d])?;
            let v = g.reshape(v, &[b * n, t, d])?;
            let a = g.attention(q, k, v, Some(&inp.mask_bnt), heads)?;
            let a = g.reshape(a, &[rows, d])?;
            let a = blk.t_o.forward(g, p, a)?;
            let a = self.dropout(g, a, train);
            x = g.add(x, a)?;

            // Agent attention: groups are (b, t), sequence is agent.
            let h = g.layer_norm(x, LN_EPS);
            let h = g.reshape(h, &[b, n, t, d])?;
            let h = g.swap_axes(h, 1, 2)?;
            let q = blk.a_q.forward(g, p, h)?;
            let k = blk.a_k.forward(g, p, h)?;
            let v = blk.a_v.forward(g, p, h)?;
            let q = g.reshape(q, &[b * t, n, d])?;
            let k = g.reshape(k, &[b * t, n, d])?;
            let v = g.reshape(v, &[b * t, n, d])?;
            let a = g.attention(q, k, v, Some(&inp.mask_btn), heads)?;
            let a = g.reshape(a, &[b, t, n, d])?;
            let a = blk.a_o.forward(g, p, a)?;
            let a = g.swap_axes(a, 1, 2)?;
            let a = g.reshape(a, &[rows, d])?;
            let a = self.dropout(g, a, train);
            x = g.add(x, a)?;

            let h = g.layer_norm(x, LN_EPS);
            let f = blk.ff.forward(g, p, h)?;
            let f = self.dropout(g, f, train);
            x = g.add(x, f)?;
        }
        let latent = g.layer_norm(x, LN_EPS);

        let states = g.constant(inp.states.clone());
        let s_emb = l.state_enc.forward(g, p, states)?;
        let s_emb = g.gelu(s_emb);
        let last = g.gather_rows(s_emb, &inp.final_rows)?;
        let z = l.outcome.forward(g, p, last)?;
        let z_rows = if self.config.condition_on_outcome {
            g.gather_rows(z, &inp.batch_rows)?
        } else {
            g.constant(Tensor::zeros(&[rows, d]))
        };
        let head_in = g.concat(&[latent, z_rows])?;
        let c = l.score_head.forward(g, p, head_in)?;
        // Per-cell outputs are averaged rather than summed so that one Adam
        // step moves sum(c) by O(lr) instead of O(N T lr).
        let c = g.scale(c, 1.0 / (n * t) as f64);
        let c = g.reshape(c, &[b, n * t])?;
        let mask = g.constant(Tensor::from_vec(&[b, n * t], inp.cell_mask.clone()));
        let scores = g.mul(c, mask)?;

        let id_logits = if need_id {
            let cur = g.gather_rows(s_emb, &inp.cur_rows)?;
            let next = g.gather_rows(s_emb, &inp.next_rows)?;
            let prev = g.gather_rows(latent, &inp.prev_rows)?;
            let keep: Vec<f64> = inp.first.iter().flat_map(|&f| std::iter::repeat(if f { 0.0 } else { 1.0 }).take(d)).collect();
            let start_mask: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = g.constant(Tensor::from_vec(&[rows, d], keep));
            let start_mask = g.constant(Tensor::from_vec(&[rows, d], start_mask));
            let prev = g.mul(prev, keep)?;
            let start = g.gather_rows(p.var(l.id_start), &vec![0; rows])?;
            let start = g.mul(start, start_mask)?;
            let prev = g.add(prev, start)?;
            let id_in = g.concat(&[cur, next, prev])?;
            Some(l.id_head.forward(g, p, id_in)?)
        } else {
            None
        };
        Ok(Forward { scores, latent, z, id_logits })
    }

    fn target(&self, reward: f64) -> Result<f64> {
        if self.config.use_log_target {
            if reward <= -1.0 {
                return Err(Error::InvalidArgument(format!("log target needs R > -1, got {reward}")));
            }
            Ok((reward + 1.0).ln())
        } else {
            Ok(reward)
        }
    }

    /// Record the composite loss on `g`; returns `(total, regression, id)`.
    pub fn loss_graph(&mut self, g: &mut Graph, p: &Bound, batch: &[&Episode]) -> Result<(Var, Var, Option<Var>)> {
        self.loss_graph_inner(g, p, batch, false)
    }

    fn loss_graph_inner(
        &mut self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Episode],
        train: bool,
    ) -> Result<(Var, Var, Option<Var>)> {
        let inp = self.inputs(batch)?;
        let targets = inp.rewards.iter().map(|&r| self.target(r)).collect::<Result<Vec<_>>>()?;
        let use_id = self.config.use_inverse_dynamics;
        let fwd = self.forward(g, p, &inp, use_id, train)?;
        let inv_b = 1.0 / inp.b as f64;
        let sum_c = g.sum_last(fwd.scores);
        let target = g.constant(Tensor::from_vec(&[inp.b], targets));
        let diff = g.sub(target, sum_c)?;
        let sq = g.square(diff);
        let total_sq = g.sum(sq);
        let regression = g.scale(total_sq, inv_b);
        let Some(logits) = fwd.id_logits else {
            return Ok((regression, regression, None));
        };
        let lsm = g.log_softmax(logits);
        let picked = match self.config.id_target {
            IdTarget::Action => {
                let chosen = g.gather_last(lsm, &inp.actions)?;
                let mask = g.constant(Tensor::from_vec(&[inp.cell_mask.len()], inp.cell_mask.clone()));
                g.mul(chosen, mask)?
            }
            IdTarget::PolicyDistribution => {
                let shape = g.shape(lsm).to_vec();
                let probs = g.constant(Tensor::from_vec(&shape, inp.probs.clone()));
                g.mul(lsm, probs)?
            }
        };
        let s = g.sum(picked);
        let ce = g.scale(s, -inv_b);
        let weighted = g.scale(ce, self.config.lambda_id);
        let total = g.add(regression, weighted)?;
        Ok((total, regression, Some(ce)))
    }

    /// Loss on a batch without touching parameters.
    pub fn loss(&mut self, batch: &[&Episode]) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (total, reg, id) = self.loss_graph(&mut g, &p, batch)?;
        Ok(LossBreakdown {
            total: g.value(total).item(),
            regression: g.value(reg).item(),
            inverse_dynamics: id.map_or(0.0, |v| g.value(v).item()),
        })
    }

    /// Gradients of the composite loss, one tensor per parameter.
    pub fn gradients(&mut self, batch: &[&Episode]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        self.gradients_inner(batch, false)
    }

    fn gradients_inner(&mut self, batch: &[&Episode], train: bool) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let (total, reg, id) = self.loss_graph_inner(&mut g, &p, batch, train)?;
        let out = LossBreakdown {
            total: g.value(total).item(),
            regression: g.value(reg).item(),
            inverse_dynamics: id.map_or(0.0, |v| g.value(v).item()),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFiniteLoss { what: "reward model", iteration: self.rounds as usize });
        }
        g.backward(total)?;
        Ok((out, p.grads(&g)))
    }

    /// One clipped Adam step on `batch`; returns the loss before the step.
    pub fn train_step(&mut self, batch: &[&Episode]) -> Result<LossBreakdown> {
        let (loss, grads) = self.gradients_inner(batch, true)?;
        self.optimizer.step(&mut self.params, &grads)?;
        self.rounds += 1;
        Ok(loss)
    }

    /// `update_epochs` sampled-batch steps from `buffer`.
    pub fn train(&mut self, buffer: &mut TrajectoryBuffer) -> Result<Vec<LossBreakdown>> {
        let mut curve = Vec::with_capacity(self.config.update_epochs);
        for _ in 0..self.config.update_epochs {
            let batch = buffer.sample(self.config.batch_size)?;
            curve.push(self.train_step(&batch)?);
        }
        Ok(curve)
    }

    /// Latent tokens and outcome embedding of one episode.
    pub fn encode(&mut self, episode: &Episode) -> Result<Encoding> {
        let inp = self.inputs(&[episode])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let fwd = self.forward(&mut g, &p, &inp, false, false)?;
        Ok(Encoding {
            latent: g.value(fwd.latent).data().to_vec(),
            z: g.value(fwd.z).data().to_vec(),
            embed_dim: self.config.embed_dim,
        })
    }

    /// Contribution scores for a batch of episodes.
    pub fn score_batch(&mut self, batch: &[&Episode]) -> Result<Vec<ScoreMatrix>> {
        let inp = self.inputs(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let fwd = self.forward(&mut g, &p, &inp, false, false)?;
        let (n, t) = (self.shape.agents, self.shape.steps);
        let flat = g.value(fwd.scores).data();
        batch
            .iter()
            .enumerate()
            .map(|(bi, e)| {
                // Model rows are (agent, t); score matrices are (t, agent).
                let block = &flat[bi * n * t..(bi + 1) * n * t];
                let mut scores = vec![0.0; t * n];
                for agent in 0..n {
                    for step in 0..t {
                        scores[step * n + agent] = block[agent * t + step];
                    }
                }
                ScoreMatrix::new(t, n, scores, e.active.clone())
            })
            .collect()
    }

    pub fn score(&mut self, episode: &Episode) -> Result<ScoreMatrix> {
        Ok(self.score_batch(&[episode])?.remove(0))
    }

    /// Inverse-dynamics logits for agent `agent` at step `t`.
    pub fn inverse_dynamics_logits(&mut self, episode: &Episode, t: usize, agent: usize) -> Result<Vec<f64>> {
        if t >= self.shape.steps || agent >= self.shape.agents {
            return Err(Error::InvalidArgument(format!("cell ({t}, {agent}) out of range")));
        }
        let inp = self.inputs(&[episode])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let fwd = self.forward(&mut g, &p, &inp, true, false)?;
        let logits = g.value(fwd.id_logits.expect("requested")).data();
        let a = self.shape.num_actions;
        let row = agent * self.shape.steps + t;
        Ok(logits[row * a..(row + 1) * a].to_vec())
    }

    /// Shaped rewards via shift-and-normalize of the model scores.
    pub fn shaped_rewards(&mut self, episode: &Episode, epsilon: f64) -> Result<RedistributedRewards> {
        let m = self.score(episode)?;
        redistribute(&m, episode.team_reward, epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{random_episode, EnvKind, Environment};

    fn tiny_config() -> RewardModelConfig {
        RewardModelConfig { embed_dim: 8, num_heads: 2, depth: 1, batch_size: 4, ..Default::default() }
    }

    fn shape_of(env: &dyn Environment) -> ModelShape {
        ModelShape {
            agents: env.num_agents(),
            steps: env.horizon(),
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            num_actions: env.num_actions(),
        }
    }

    #[test]
    fn scores_are_finite_deterministic_and_shaped() {
        let mut env = EnvKind::KeyTreasure.build();
        let e = random_episode(env.as_mut(), 3).unwrap();
        let mut m = RewardModel::new(tiny_config(), shape_of(env.as_ref()), 1).unwrap();
        let a = m.score(&e).unwrap();
        let b = m.score(&e).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.steps(), a.agents()), (20, 2));
        assert!(a.scores().iter().all(|x| x.is_finite()));
        let r = m.shaped_rewards(&e, 1e-8).unwrap();
        assert!(r.is_return_equivalent());
    }

    #[test]
    fn outcome_conditioning_changes_scores() {
        let mut env = EnvKind::KeyTreasure.build();
        let e = random_episode(env.as_mut(), 3).unwrap();
        let mut other = e.clone();
        let last = other.steps * other.state_dim;
        for x in &mut other.states[last..] {
            *x = 1.0 - *x;
        }
        let mut m = RewardModel::new(tiny_config(), shape_of(env.as_ref()), 2).unwrap();
        assert_ne!(m.score(&e).unwrap(), m.score(&other).unwrap());
        let cfg = RewardModelConfig { condition_on_outcome: false, ..tiny_config() };
        let mut m = RewardModel::new(cfg, shape_of(env.as_ref()), 2).unwrap();
        assert_eq!(m.score(&e).unwrap(), m.score(&other).unwrap());
    }

    #[test]
    fn loss_examples() {
        let mut env = EnvKind::KeyTreasure.build();
        let e = random_episode(env.as_mut(), 4).unwrap();
        let cfg = RewardModelConfig { lambda_id: 0.0, use_inverse_dynamics: false, ..tiny_config() };
        let mut m = RewardModel::new(cfg, shape_of(env.as_ref()), 0).unwrap();
        let sum: f64 = m.score(&e).unwrap().scores().iter().sum();
        let mut fit = e.clone();
        fit.team_reward = sum;
        assert!(m.loss(&[&fit]).unwrap().total.abs() < 1e-20);
        fit.team_reward = sum + 2.0;
        assert!((m.loss(&[&fit]).unwrap().total - 4.0).abs() < 1e-9);
        let cfg = RewardModelConfig { use_log_target: true, ..tiny_config() };
        let mut m = RewardModel::new(cfg, shape_of(env.as_ref()), 0).unwrap();
        fit.team_reward = -1.0;
        assert!(m.loss(&[&fit]).is_err());
    }

    #[test]
    fn mismatched_episode_rejected() {
        let mut env = EnvKind::Switches.build();
        let e = random_episode(env.as_mut(), 0).unwrap();
        let kt = EnvKind::KeyTreasure.build();
        let mut m = RewardModel::new(tiny_config(), shape_of(kt.as_ref()), 0).unwrap();
        assert!(m.score(&e).is_err());
        assert!(m.inverse_dynamics_logits(&e, 0, 0).is_err());
        assert!(RewardModel::new(RewardModelConfig { num_heads: 3, ..tiny_config() }, shape_of(kt.as_ref()), 0).is_err());
    }
}

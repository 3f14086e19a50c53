//! Completed joint trajectories and the replay ring that holds them.

use std::collections::VecDeque;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One finished episode. Per-step arrays are laid out `[t][agent]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: usize,
    pub agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub num_actions: usize,
    /// `[t][agent][obs_dim]`, observation seen before acting at `t`.
    pub observations: Vec<f64>,
    /// `[t][agent]`.
    pub actions: Vec<usize>,
    /// `[t][agent]`.
    pub active: Vec<bool>,
    /// `[t][agent]`, log-probability of the taken action at collection time.
    pub log_probs: Vec<f64>,
    /// `[t][agent][num_actions]`, acting distribution at collection time.
    pub policy_probs: Vec<f64>,
    /// `[t + 1][state_dim]`: global states `s_0 ..= s_T`.
    pub states: Vec<f64>,
    pub team_reward: f64,
    pub success: bool,
    pub seed: u64,
}

impl Episode {
    /// Check internal array lengths.
    pub fn validate(&self) -> Result<()> {
        let cells = self.steps * self.agents;
        let ok = self.steps > 0
            && self.agents > 0
            && self.observations.len() == cells * self.obs_dim
            && self.actions.len() == cells
            && self.active.len() == cells
            && self.log_probs.len() == cells
            && self.policy_probs.len() == cells * self.num_actions
            && self.states.len() == (self.steps + 1) * self.state_dim;
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent episode arrays for T={} N={}",
                self.steps, self.agents
            )));
        }
        if !self.team_reward.is_finite() {
            return Err(Error::NonFinite { what: "team reward", index: 0 });
        }
        if self.actions.iter().any(|&a| a >= self.num_actions) {
            return Err(Error::Shape("action index out of range".into()));
        }
        Ok(())
    }

    pub fn cell(&self, t: usize, agent: usize) -> usize {
        t * self.agents + agent
    }

    pub fn observation(&self, t: usize, agent: usize) -> &[f64] {
        let c = self.cell(t, agent);
        &self.observations[c * self.obs_dim..(c + 1) * self.obs_dim]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.steps)
    }

    pub fn probs(&self, t: usize, agent: usize) -> &[f64] {
        let c = self.cell(t, agent);
        &self.policy_probs[c * self.num_actions..(c + 1) * self.num_actions]
    }
}

/// Bounded FIFO of episodes with its own sampling stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    rng: ChaCha8Rng,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(Self { capacity, episodes: VecDeque::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    /// Append, evicting the oldest episode when full.
    pub fn push(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Indices of a training batch: distinct when the buffer is large
    /// enough, otherwise drawn with replacement.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>> {
        let n = self.episodes.len();
        if n == 0 {
            return Err(Error::Empty("trajectory buffer"));
        }
        if n >= batch {
            Ok(index::sample(&mut self.rng, n, batch).into_vec())
        } else {
            log::warn!("buffer holds {n} episodes, sampling {batch} with replacement");
            Ok((0..batch).map(|_| self.rng.gen_range(0..n)).collect())
        }
    }

    pub fn sample(&mut self, batch: usize) -> Result<Vec<&Episode>> {
        let idx = self.sample_indices(batch)?;
        Ok(idx.into_iter().map(|i| &self.episodes[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_episode(reward: f64) -> Episode {
        Episode {
            steps: 2,
            agents: 1,
            obs_dim: 1,
            state_dim: 1,
            num_actions: 2,
            observations: vec![0.0, 1.0],
            actions: vec![0, 1],
            active: vec![true, true],
            log_probs: vec![0.5f64.ln(); 2],
            policy_probs: vec![0.5; 4],
            states: vec![0.0, 1.0, 2.0],
            team_reward: reward,
            success: reward > 0.0,
            seed: 0,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = TrajectoryBuffer::new(3, 0).unwrap();
        for r in 0..5 {
            b.push(toy_episode(r as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = b.episodes().map(|e| e.team_reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_seeded_and_falls_back_to_replacement() {
        let mut a = TrajectoryBuffer::new(10, 7).unwrap();
        let mut b = TrajectoryBuffer::new(10, 7).unwrap();
        for r in 0..4 {
            a.push(toy_episode(r as f64)).unwrap();
            b.push(toy_episode(r as f64)).unwrap();
        }
        assert_eq!(a.sample_indices(3).unwrap(), b.sample_indices(3).unwrap());
        let distinct = a.sample_indices(4).unwrap();
        let mut sorted = distinct.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(a.sample_indices(9).unwrap().len(), 9);
    }

    #[test]
    fn malformed_episode_rejected() {
        let mut b = TrajectoryBuffer::new(2, 0).unwrap();
        let mut e = toy_episode(1.0);
        e.actions.pop();
        assert!(b.push(e).is_err());
        let mut e = toy_episode(1.0);
        e.actions[0] = 5;
        assert!(b.push(e).is_err());
        assert!(TrajectoryBuffer::new(0, 0).is_err());
    }
}

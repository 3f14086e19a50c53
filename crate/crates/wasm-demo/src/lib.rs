//! Browser bindings for the redistribution math. Every entry point takes a
//! row-major `steps x agents` score grid and returns JSON.

use serde::Serialize;
use tar2::redistribution::{delta_k, redistribute, uniform_redistribution, RedistributedRewards, ScoreMatrix};
use wasm_bindgen::prelude::*;

pub const EPSILON: f64 = tar2::redistribution::DEFAULT_EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Credit {
    pub steps: usize,
    pub agents: usize,
    /// `s[t, i]`, row-major.
    pub rewards: Vec<f64>,
    pub temporal: Vec<f64>,
    /// `w_temp[t] * w_agent[t, i]`, row-major.
    pub heatmap: Vec<f64>,
    pub delta: Vec<f64>,
    pub agent_returns: Vec<f64>,
    pub total: f64,
}

impl From<RedistributedRewards> for Credit {
    fn from(r: RedistributedRewards) -> Self {
        Self {
            steps: r.steps,
            agents: r.agents,
            heatmap: r.weights.products(),
            delta: delta_k(&r.weights),
            agent_returns: r.agent_returns(),
            total: r.total(),
            temporal: r.weights.temporal.clone(),
            rewards: r.rewards,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub tar2: Credit,
    pub uniform: Credit,
}

fn matrix(scores: &[f64], steps: usize, agents: usize) -> Result<ScoreMatrix, String> {
    ScoreMatrix::dense(steps, agents, scores.to_vec()).map_err(|e| e.to_string())
}

pub fn credit(scores: &[f64], steps: usize, agents: usize, team_reward: f64) -> Result<Credit, String> {
    let m = matrix(scores, steps, agents)?;
    Ok(redistribute(&m, team_reward, EPSILON).map_err(|e| e.to_string())?.into())
}

pub fn deltas(scores: &[f64], steps: usize, agents: usize) -> Result<Vec<f64>, String> {
    Ok(credit(scores, steps, agents, 1.0)?.delta)
}

pub fn compare(scores: &[f64], steps: usize, agents: usize, team_reward: f64) -> Result<Comparison, String> {
    let tar2 = credit(scores, steps, agents, team_reward)?;
    let uniform = uniform_redistribution(steps, agents, &vec![true; steps * agents], team_reward)
        .map_err(|e| e.to_string())?
        .into();
    Ok(Comparison { tar2, uniform })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Shaped rewards, weights and the weight heatmap.
#[wasm_bindgen(js_name = redistribute)]
pub fn redistribute_js(scores: Vec<f64>, steps: usize, agents: usize, team_reward: f64) -> Result<String, JsError> {
    to_js(credit(&scores, steps, agents, team_reward))
}

/// Each agent's share of the team reward.
#[wasm_bindgen(js_name = delta)]
pub fn delta_js(scores: Vec<f64>, steps: usize, agents: usize) -> Result<String, JsError> {
    to_js(deltas(&scores, steps, agents))
}

/// Learned-score credit next to the uniform split.
#[wasm_bindgen(js_name = compare)]
pub fn compare_js(scores: Vec<f64>, steps: usize, agents: usize, team_reward: f64) -> Result<String, JsError> {
    to_js(compare(&scores, steps, agents, team_reward))
}

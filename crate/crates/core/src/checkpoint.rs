//! Bit-exact trainer checkpoints.
//!
//! Layout: the 8-byte magic `TAR2CKPT`, a little-endian u64 header length, a
//! JSON header, then the bincode-encoded trainer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::RedistributionMode;
use crate::buffer::TrajectoryBuffer;
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::reward_model::{LossBreakdown, RewardModelConfig};
use crate::trainer::{PopArt, Trainer, TrainerConfig};

pub const MAGIC: &[u8; 8] = b"TAR2CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub iteration: usize,
    pub episodes: usize,
    pub seed: u64,
    pub mode: RedistributionMode,
    pub env: EnvKind,
}

#[derive(Serialize, Deserialize)]
struct ModelState {
    params: ParamStore,
    optimizer: Adam,
    rounds: u64,
    dropout_rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    config: TrainerConfig,
    model_config: RewardModelConfig,
    mode: RedistributionMode,
    env: EnvKind,
    seed: u64,
    policy: ParamStore,
    policy_opt: Adam,
    critic: ParamStore,
    critic_opt: Adam,
    popart: PopArt,
    model: Option<ModelState>,
    buffer: TrajectoryBuffer,
    rng: ChaCha8Rng,
    iteration: usize,
    episodes_seen: usize,
    last_model_update: Option<usize>,
    last_model_loss: Option<LossBreakdown>,
    recent_success: Vec<bool>,
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save(trainer: &Trainer, config_hash: &str, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: VERSION,
        config_hash: config_hash.to_string(),
        iteration: trainer.iteration,
        episodes: trainer.episodes_seen,
        seed: trainer.seed,
        mode: trainer.mode,
        env: trainer.env,
    };
    let state = TrainerState {
        config: trainer.config.clone(),
        model_config: trainer.model_config.clone(),
        mode: trainer.mode,
        env: trainer.env,
        seed: trainer.seed,
        policy: trainer.policy.params.clone(),
        policy_opt: trainer.policy_opt.clone(),
        critic: trainer.critic.params.clone(),
        critic_opt: trainer.critic_opt.clone(),
        popart: trainer.popart.clone(),
        model: trainer.model.as_ref().map(|m| ModelState {
            params: m.params.clone(),
            optimizer: m.optimizer.clone(),
            rounds: m.rounds,
            dropout_rng: m.dropout_rng().clone(),
        }),
        buffer: trainer.buffer.clone(),
        rng: trainer.rng.clone(),
        iteration: trainer.iteration,
        episodes_seen: trainer.episodes_seen,
        last_model_update: trainer.last_model_update,
        last_model_loss: trainer.last_model_loss,
        recent_success: trainer.recent_success.iter().copied().collect(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // Write to a sibling and rename so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let head = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(head.len() as u64).to_le_bytes())?;
        w.write_all(&head)?;
        bincode::serialize_into(&mut w, &state).map_err(ckpt_err)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckpt_err("file too short"))?;
    if &magic != MAGIC {
        return Err(ckpt_err("not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(ckpt_err("implausible header length"));
    }
    let mut head = vec![0u8; len as usize];
    r.read_exact(&mut head)?;
    let header: CheckpointHeader = serde_json::from_slice(&head)?;
    if header.version != VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {}", header.version)));
    }
    Ok(header)
}

/// Restore a trainer. A config hash that differs from `expected_hash` is an
/// error unless `force` is set.
pub fn load(path: &Path, expected_hash: Option<&str>, force: bool) -> Result<Trainer> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    if let Some(h) = expected_hash {
        if h != header.config_hash {
            if !force {
                return Err(ckpt_err(format!(
                    "config hash mismatch: checkpoint {} vs current {h}",
                    header.config_hash
                )));
            }
            log::warn!("loading checkpoint despite config hash mismatch");
        }
    }
    let s: TrainerState = bincode::deserialize_from(&mut r).map_err(ckpt_err)?;
    let mut t = Trainer::new(s.env, s.mode, s.config, s.model_config, s.seed)?;
    let check = |what: &str, fresh: &ParamStore, loaded: &ParamStore| {
        if fresh.names() != loaded.names() {
            return Err(ckpt_err(format!("{what} parameters do not match the configuration")));
        }
        Ok(())
    };
    check("policy", &t.policy.params, &s.policy)?;
    check("critic", &t.critic.params, &s.critic)?;
    t.policy.params = s.policy;
    t.policy_opt = s.policy_opt;
    t.critic.params = s.critic;
    t.critic_opt = s.critic_opt;
    t.popart = s.popart;
    match (t.model.as_mut(), s.model) {
        (Some(m), Some(ms)) => {
            check("reward model", &m.params, &ms.params)?;
            m.params = ms.params;
            m.optimizer = ms.optimizer;
            m.rounds = ms.rounds;
            m.set_dropout_rng(ms.dropout_rng);
        }
        (None, None) => {}
        _ => return Err(ckpt_err("reward model presence does not match the mode")),
    }
    t.buffer = s.buffer;
    t.rng = s.rng;
    t.iteration = s.iteration;
    t.episodes_seen = s.episodes_seen;
    t.last_model_update = s.last_model_update;
    t.last_model_loss = s.last_model_loss;
    t.recent_success = s.recent_success.into_iter().collect();
    Ok(t)
}

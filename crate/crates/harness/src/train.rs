//! Training runs: one per policy seed, each writing a checkpoint and a
//! per-episode CSV.

use std::fs::File;
use std::path::{Path, PathBuf};

use rlamr_agent::rl::EpisodeRow;
use rlamr_agent::{Policy, TrainConfig, Trainer};
use rlamr_core::rng::{derive_seed, stream};
use rlamr_nn::Checkpoint;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::HarnessError;

pub fn checkpoint_path(dir: &Path, policy_seed: usize) -> PathBuf {
    dir.join(format!("checkpoint_seed{policy_seed}.ck"))
}

pub fn train_csv_path(dir: &Path, policy_seed: usize) -> PathBuf {
    dir.join(format!("train_seed{policy_seed}.csv"))
}

/// Trainer settings for one policy seed; all of its randomness derives from
/// `train.seed` and the policy seed.
pub fn seed_config(cfg: &ExperimentConfig, policy_seed: usize) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.train.seed, &[policy_seed as u64]), ..cfg.train.clone() }
}

pub fn initial_policy(cfg: &ExperimentConfig, policy_seed: usize) -> Result<Policy, HarnessError> {
    let env = cfg.env_config();
    let seed = derive_seed(seed_config(cfg, policy_seed).seed, &[stream::INIT]);
    Ok(Policy::new(cfg.policy.clone(), env.obs.side(), env.d_max, seed)?)
}

#[derive(Serialize)]
struct TrainCsv<'a> {
    config_hash: &'a str,
    policy_seed: usize,
    episode: usize,
    #[serde(rename = "return")]
    ret: f64,
    performance: f64,
    epsilon: f64,
    leaves_final: usize,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub rows: Vec<EpisodeRow>,
    pub checkpoint: PathBuf,
}

/// Train one policy seed for `cfg.run.episodes` episodes into `dir`.
///
/// CSV header: `config_hash,policy_seed,episode,return,performance,epsilon,leaves_final`.
pub fn train_seed(
    cfg: &ExperimentConfig,
    policy_seed: usize,
    dir: &Path,
    mut progress: impl FnMut(usize, &[EpisodeRow]),
) -> Result<TrainOutcome, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let hash = cfg.train_hash();
    let mut trainer = Trainer::new(cfg.env_config(), seed_config(cfg, policy_seed), initial_policy(cfg, policy_seed)?)?;
    let mut csv = csv::Writer::from_writer(File::create(train_csv_path(dir, policy_seed))?);
    let every = cfg.run.checkpoint_every;
    let mut failure: Option<HarnessError> = None;
    let res = trainer.run(cfg.run.episodes, |t, batch| {
        let mut step = || -> Result<(), HarnessError> {
            for row in batch {
                csv.serialize(TrainCsv {
                    config_hash: &hash,
                    policy_seed,
                    episode: row.episode,
                    ret: row.ret,
                    performance: row.performance,
                    epsilon: row.epsilon,
                    leaves_final: row.leaves_final,
                })?;
            }
            csv.flush()?;
            let done = t.episodes_done();
            if every > 0 && done / every > (done - batch.len()) / every && done < cfg.run.episodes {
                let p = dir.join(format!("checkpoint_seed{policy_seed}_ep{done}.ck"));
                save(t.policy(), &hash, policy_seed, done, &p)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
            return Err(rlamr_agent::AgentError::InvalidConfig("training output failed".into()));
        }
        progress(t.episodes_done(), batch);
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let rows = res?;
    let path = checkpoint_path(dir, policy_seed);
    save(trainer.policy(), &hash, policy_seed, trainer.episodes_done(), &path)?;
    Ok(TrainOutcome { policy: trainer.into_policy(), rows, checkpoint: path })
}

fn save(p: &Policy, hash: &str, policy_seed: usize, episodes: usize, path: &Path) -> Result<(), HarnessError> {
    let extra = serde_json::json!({ "policy_seed": policy_seed, "episodes": episodes });
    p.to_checkpoint(hash, extra).save(path)?;
    Ok(())
}

/// Load and hash-check one checkpoint.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Policy, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
    }
    let ck = Checkpoint::load(path)?;
    if let Some(h) = expected_hash {
        if ck.header.config_hash != h {
            return Err(HarnessError::HashMismatch {
                what: path.display().to_string(),
                expected: h.to_string(),
                found: ck.header.config_hash.clone(),
            });
        }
    }
    Ok(Policy::from_checkpoint(&ck)?)
}

/// Checkpoints for policy seeds `0..n` from a training directory.
pub fn load_checkpoints(dir: &Path, n: usize, expected_hash: Option<&str>) -> Result<Vec<Policy>, HarnessError> {
    (0..n).map(|s| load_checkpoint(&checkpoint_path(dir, s), expected_hash)).collect()
}

//! Step-by-step replay of a single episode with JSON snapshots.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlamr_core::env::StepRecord;
use rlamr_core::{AmrEnv, EnvConfig};
use serde::Serialize;

use crate::eval::Selector;
use crate::HarnessError;

#[derive(Serialize)]
struct StepCsv<'a> {
    config_hash: &'a str,
    episode: u64,
    step: usize,
    action: usize,
    reward: f64,
    e_t: f64,
    leaves: usize,
    sim_time: f64,
}

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("snapshot_step{step:04}.json"))
}

/// Play the episode starting from `env_seed`, writing `episode.csv` and a
/// snapshot at step 0, every `snapshot_every` steps (0: none besides the
/// first and last) and at the end.
///
/// CSV header: `config_hash,episode,step,action,reward,e_t,leaves,sim_time`.
pub fn replay(
    env_cfg: &EnvConfig,
    env_seed: u64,
    selector: &mut Selector<'_>,
    snapshot_every: usize,
    dir: &Path,
    config_hash: &str,
) -> Result<Vec<StepRecord>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut env = AmrEnv::reset(env_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(env_seed))?;
    let mut csv = csv::Writer::from_writer(File::create(dir.join("episode.csv"))?);
    let write_snapshot = |env: &AmrEnv| -> Result<(), HarnessError> {
        let f = BufWriter::new(File::create(snapshot_path(dir, env.step_index()))?);
        serde_json::to_writer(f, &env.snapshot())?;
        Ok(())
    };
    write_snapshot(&env)?;
    let mut records = Vec::new();
    while !env.is_done() {
        let action = selector.select(&env)?;
        let out = env.advance(action)?;
        let rec = StepRecord {
            step: env.step_index(),
            action,
            reward: out.reward,
            e_t: env.error(),
            leaves: env.mesh().len(),
            sim_time: env.sim_time(),
        };
        csv.serialize(StepCsv {
            config_hash,
            episode: env_seed,
            step: rec.step,
            action: rec.action,
            reward: rec.reward,
            e_t: rec.e_t,
            leaves: rec.leaves,
            sim_time: rec.sim_time,
        })?;
        let due = snapshot_every > 0 && env.step_index() % snapshot_every == 0;
        if due || env.is_done() {
            write_snapshot(&env)?;
        }
        records.push(rec);
    }
    csv.flush()?;
    Ok(records)
}

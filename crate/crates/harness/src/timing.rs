//! Wall-clock cost of one refinement decision.
//!
//! Only the selector call is timed; for policies that includes building the
//! observation, since a deployed policy has to produce it too.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlamr_core::rng::{derive_seed, stream};
use rlamr_core::{AmrEnv, EnvConfig};
use serde::Serialize;

use crate::eval::Selector;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub policy: String,
    pub mesh: String,
    pub mean_ms: f64,
    pub stderr_ms: f64,
    pub samples: usize,
}

/// Time `episodes × steps` decisions on a `size × size` base mesh.
pub fn decision_timing<'a>(
    name: &str,
    make_selector: &mut dyn FnMut(usize) -> Selector<'a>,
    env_cfg: &EnvConfig,
    size: u32,
    episodes: usize,
    steps: usize,
    master_seed: u64,
) -> Result<TimingRow, HarnessError> {
    let mut cfg = env_cfg.clone();
    cfg.base_nx = size;
    cfg.base_ny = size;
    cfg.budget = cfg.budget.max(steps);
    cfg.episode_len = steps;
    let mut times = Vec::with_capacity(episodes * steps);
    for ep in 0..episodes {
        let seed = derive_seed(master_seed, &[stream::EVAL_ENV, size as u64, ep as u64]);
        let mut env = AmrEnv::reset(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut sel = make_selector(ep);
        while !env.is_done() {
            let t0 = Instant::now();
            let a = sel.select(&env)?;
            // Sub-resolution readings would report 0; clamp to one tick.
            times.push((t0.elapsed().as_secs_f64() * 1e3).max(1e-6));
            env.advance(a)?;
        }
    }
    if times.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(TimingRow {
        policy: name.to_string(),
        mesh: format!("{size}x{size}"),
        mean_ms: mean,
        stderr_ms: (var / n).sqrt(),
        samples: times.len(),
    })
}

/// Policy × mesh-size grid in the layout `policy,<size>,<size>,...` with
/// `mean (stderr)` cells.
pub fn timing_table(rows: &[TimingRow]) -> String {
    let mut meshes: Vec<&str> = Vec::new();
    let mut policies: Vec<&str> = Vec::new();
    for r in rows {
        if !meshes.contains(&r.mesh.as_str()) {
            meshes.push(&r.mesh);
        }
        if !policies.contains(&r.policy.as_str()) {
            policies.push(&r.policy);
        }
    }
    let mut out = format!("policy,{}\n", meshes.join(","));
    for p in policies {
        let cells: Vec<String> = meshes
            .iter()
            .map(|m| {
                rows.iter()
                    .find(|r| r.policy == p && r.mesh == *m)
                    .map_or(String::new(), |r| format!("{:.3} ({:.3})", r.mean_ms, r.stderr_ms))
            })
            .collect();
        out.push_str(&format!("{p},{}\n", cells.join(",")));
    }
    out
}

//! Shared-seed evaluation: every contender plays the same `S × E` episodes,
//! episode `i` of policy seed `s` starting from the environment seed
//! `derive_seed(master, [EVAL_ENV, s, i])`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlamr_agent::rl::{episode_performance, par_map};
use rlamr_agent::{greedy_action, sample_action, Policy};
use rlamr_core::baselines::Baseline;
use rlamr_core::rng::{derive_seed, stream};
use rlamr_core::{AmrEnv, EnvConfig};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub fn episode_seed(master: u64, policy_seed: usize, episode: usize) -> u64 {
    derive_seed(master, &[stream::EVAL_ENV, policy_seed as u64, episode as u64])
}

/// Something that picks refinement actions.
#[derive(Debug, Clone)]
pub enum Agent {
    /// One trained policy per policy seed.
    Trained(Vec<Policy>),
    Baseline(Baseline),
}

#[derive(Debug, Clone)]
pub struct Contender {
    pub name: String,
    pub agent: Agent,
}

impl Contender {
    pub fn baseline(b: Baseline) -> Self {
        Self { name: b.name().to_string(), agent: Agent::Baseline(b) }
    }

    pub fn trained(policies: Vec<Policy>) -> Self {
        let name = policies.first().map_or("policy", |p| p.arch().name()).to_string();
        Self { name, agent: Agent::Trained(policies) }
    }
}

/// Decision rule for a single episode.
pub enum Selector<'a> {
    Policy { policy: &'a Policy, greedy: bool, rng: ChaCha8Rng },
    Baseline { baseline: Baseline, rng: ChaCha8Rng },
}

impl Selector<'_> {
    pub fn select(&mut self, env: &AmrEnv) -> Result<usize, HarnessError> {
        Ok(match self {
            Selector::Policy { policy, greedy, rng } => {
                let state = env.observe();
                let probs = policy.probs(&state)?;
                if *greedy {
                    greedy_action(&probs)
                } else {
                    sample_action(&probs, &state.valid_mask, 0.0, rng)?.0
                }
            }
            Selector::Baseline { baseline, rng } => baseline.select(env, rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub policy_seed: usize,
    pub episode: usize,
    pub env_seed: u64,
    pub performance: f64,
    pub e_initial: f64,
    pub e_final: f64,
    pub total_reward: f64,
    pub leaves_final: usize,
}

/// Play one episode from `env_seed`.
pub fn play(env_cfg: &EnvConfig, env_seed: u64, selector: &mut Selector<'_>) -> Result<(AmrEnv, f64), HarnessError> {
    let mut env = AmrEnv::reset(env_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(env_seed))?;
    let mut total = 0.0;
    while !env.is_done() {
        let a = selector.select(&env)?;
        total += env.advance(a)?.reward;
    }
    Ok((env, total))
}

fn selector_for<'a>(agent: &'a Agent, master: u64, seed: usize, episode: usize, greedy: bool) -> Selector<'a> {
    match agent {
        Agent::Trained(ps) => Selector::Policy {
            policy: &ps[seed],
            greedy,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(master, &[stream::POLICY, seed as u64, episode as u64])),
        },
        Agent::Baseline(b) => Selector::Baseline {
            baseline: *b,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(master, &[stream::BASELINE, seed as u64, episode as u64])),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Protocol {
    pub episodes: usize,
    pub policy_seeds: usize,
    pub master_seed: u64,
    pub greedy: bool,
    pub workers: usize,
}

impl From<&crate::config::EvalSection> for Protocol {
    fn from(e: &crate::config::EvalSection) -> Self {
        Self {
            episodes: e.episodes,
            policy_seeds: e.policy_seeds,
            master_seed: e.master_seed,
            greedy: e.greedy,
            workers: e.workers,
        }
    }
}

/// Mean and standard error across policy seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub seeds: usize,
    pub episodes: usize,
    /// Only one seed: `stderr` is 0 by convention, not a measurement.
    pub single_seed: bool,
    pub seed_means: Vec<f64>,
}

/// Per-seed episode means, then their mean and `σ/√S` (sample σ).
pub fn aggregate(per_seed: &[Vec<f64>]) -> Result<Aggregate, HarnessError> {
    if per_seed.is_empty() || per_seed.iter().any(Vec::is_empty) {
        return Err(HarnessError::EmptyInput);
    }
    let seed_means: Vec<f64> = per_seed.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let s = seed_means.len();
    let mean = seed_means.iter().sum::<f64>() / s as f64;
    let stderr = if s == 1 { 0.0 } else { sample_std(&seed_means, mean) / (s as f64).sqrt() };
    Ok(Aggregate {
        mean,
        stderr,
        seeds: s,
        episodes: per_seed.iter().map(Vec::len).sum(),
        single_seed: s == 1,
        seed_means,
    })
}

fn sample_std(v: &[f64], mean: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Standard error of the mean over individual episodes, for single-seed
/// comparisons where seed-level spread is unavailable.
pub fn episode_stderr(values: &[f64]) -> Result<f64, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(sample_std(values, mean) / (values.len() as f64).sqrt())
}

/// Combined standard error of a difference of two independent means.
pub fn pooled_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub name: String,
    /// Indexed `[policy_seed][episode]`.
    pub episodes: Vec<Vec<EpisodeResult>>,
    pub summary: Aggregate,
}

impl PolicyEval {
    pub fn performances(&self) -> Vec<Vec<f64>> {
        self.episodes.iter().map(|v| v.iter().map(|r| r.performance).collect()).collect()
    }

    pub fn flat_performances(&self) -> Vec<f64> {
        self.episodes.iter().flatten().map(|r| r.performance).collect()
    }

    fn from_rows(name: String, rows: Vec<EpisodeResult>, seeds: usize) -> Result<Self, HarnessError> {
        let mut episodes = vec![Vec::new(); seeds];
        for r in rows {
            episodes[r.policy_seed].push(r);
        }
        let perf: Vec<Vec<f64>> = episodes.iter().map(|v| v.iter().map(|r| r.performance).collect()).collect();
        let summary = aggregate(&perf)?;
        Ok(Self { name, episodes, summary })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub protocol: Protocol,
    pub results: Vec<PolicyEval>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<&PolicyEval> {
        self.results.iter().find(|r| r.name == name)
    }
}

/// Evaluate every contender on the shared episode seeds.
pub fn evaluate(
    contenders: &[Contender],
    env_cfg: &EnvConfig,
    protocol: Protocol,
    config_hash: &str,
) -> Result<EvalReport, HarnessError> {
    let Protocol { episodes, policy_seeds, master_seed, greedy, workers } = protocol;
    if episodes == 0 || policy_seeds == 0 {
        return Err(HarnessError::EmptyInput);
    }
    let mut results = Vec::with_capacity(contenders.len());
    for c in contenders {
        if let Agent::Trained(ps) = &c.agent {
            if ps.len() < policy_seeds {
                return Err(HarnessError::TooFewCheckpoints { needed: policy_seeds, found: ps.len() });
            }
        }
        let rows = par_map(policy_seeds * episodes, workers, |k| {
            let (seed, episode) = (k / episodes, k % episodes);
            let env_seed = episode_seed(master_seed, seed, episode);
            let mut sel = selector_for(&c.agent, master_seed, seed, episode, greedy);
            let (env, total_reward) = play(env_cfg, env_seed, &mut sel)?;
            Ok(EpisodeResult {
                policy_seed: seed,
                episode,
                env_seed,
                performance: episode_performance(&env)?,
                e_initial: env.initial_error(),
                e_final: env.error(),
                total_reward,
                leaves_final: env.mesh().len(),
            })
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>, HarnessError>>()?;
        results.push(PolicyEval::from_rows(c.name.clone(), rows, policy_seeds)?);
    }
    Ok(EvalReport { config_hash: config_hash.to_string(), protocol, results })
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeCsv {
    config_hash: String,
    policy: String,
    policy_seed: usize,
    episode: usize,
    env_seed: u64,
    performance: f64,
    e_initial: f64,
    e_final: f64,
    total_reward: f64,
    leaves_final: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryCsv {
    config_hash: String,
    policy: String,
    seeds: usize,
    episodes: usize,
    mean: f64,
    stderr: f64,
    single_seed: bool,
}

/// Episode CSV header:
/// `config_hash,policy,policy_seed,episode,env_seed,performance,e_initial,e_final,total_reward,leaves_final`.
pub fn write_episodes_csv<W: Write>(report: &EvalReport, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for pe in &report.results {
        for r in pe.episodes.iter().flatten() {
            out.serialize(EpisodeCsv {
                config_hash: report.config_hash.clone(),
                policy: pe.name.clone(),
                policy_seed: r.policy_seed,
                episode: r.episode,
                env_seed: r.env_seed,
                performance: r.performance,
                e_initial: r.e_initial,
                e_final: r.e_final,
                total_reward: r.total_reward,
                leaves_final: r.leaves_final,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Summary CSV header: `config_hash,policy,seeds,episodes,mean,stderr,single_seed`.
pub fn write_summary_csv<W: Write>(report: &EvalReport, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for pe in &report.results {
        let s = &pe.summary;
        out.serialize(SummaryCsv {
            config_hash: report.config_hash.clone(),
            policy: pe.name.clone(),
            seeds: s.seeds,
            episodes: s.episodes,
            mean: s.mean,
            stderr: s.stderr,
            single_seed: s.single_seed,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Merge episode CSVs into one report; all inputs must share a config hash.
pub fn read_episode_csvs<R: Read>(inputs: Vec<R>) -> Result<Vec<(String, PolicyEval)>, HarnessError> {
    let mut hash: Option<String> = None;
    let mut groups: Vec<(String, Vec<EpisodeResult>)> = Vec::new();
    for input in inputs {
        for row in csv::Reader::from_reader(input).deserialize::<EpisodeCsv>() {
            let row = row?;
            match &hash {
                None => hash = Some(row.config_hash.clone()),
                Some(h) if *h != row.config_hash => {
                    return Err(HarnessError::HashMismatch {
                        what: format!("episode rows for {}", row.policy),
                        expected: h.clone(),
                        found: row.config_hash,
                    })
                }
                Some(_) => {}
            }
            let r = EpisodeResult {
                policy_seed: row.policy_seed,
                episode: row.episode,
                env_seed: row.env_seed,
                performance: row.performance,
                e_initial: row.e_initial,
                e_final: row.e_final,
                total_reward: row.total_reward,
                leaves_final: row.leaves_final,
            };
            match groups.iter_mut().find(|g| g.0 == row.policy) {
                Some(g) => g.1.push(r),
                None => groups.push((row.policy, vec![r])),
            }
        }
    }
    let hash = hash.ok_or(HarnessError::EmptyInput)?;
    groups
        .into_iter()
        .map(|(name, rows)| {
            let seeds = rows.iter().map(|r| r.policy_seed + 1).max().unwrap_or(0);
            Ok((hash.clone(), PolicyEval::from_rows(name, rows, seeds)?))
        })
        .collect()
}

/// Mean gap `a − b` and its pooled stderr. With several policy seeds the
/// seed means are the samples; a single-seed run falls back to the spread
/// of its episodes.
pub fn compare(a: &PolicyEval, b: &PolicyEval) -> Result<(f64, f64), HarnessError> {
    let se = if a.summary.single_seed || b.summary.single_seed {
        pooled_stderr(episode_stderr(&a.flat_performances())?, episode_stderr(&b.flat_performances())?)
    } else {
        pooled_stderr(a.summary.stderr, b.summary.stderr)
    };
    Ok((a.summary.mean - b.summary.mean, se))
}

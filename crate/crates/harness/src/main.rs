use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlamr_core::baselines::Baseline;
use rlamr_core::env::EnvSnapshot;
use rlamr_harness::config::{self, ExperimentConfig};
use rlamr_harness::eval::{self, Selector};
use rlamr_harness::svg::{self, SvgOptions};
use rlamr_harness::{replay, timing, train, Agent, Contender, HarnessError, Protocol};

#[derive(Parser)]
#[command(name = "rlamr", about = "Train, evaluate and inspect mesh refinement policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment file with [env], [policy], [train] and [eval] tables.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set env.budget=20`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut o = self.overrides.clone();
        o.extend_from_slice(extra);
        Ok(config::load(self.config.as_deref(), &o)?.config)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train policies, one checkpoint and CSV per policy seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long, default_value = "runs/train")]
        out: PathBuf,
        /// Train seeds 0..N.
        #[arg(long, default_value_t = 1)]
        policy_seeds: usize,
        /// Train only this seed (for running seeds as separate processes).
        #[arg(long)]
        only_seed: Option<usize>,
    },
    /// Evaluate policies and baselines on shared episode seeds.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `trained`, zz, true-error, greedy-optimal, random or no-refine.
        #[arg(short, long, required = true)]
        policy: Vec<String>,
        /// Training directory holding checkpoint_seed{s}.ck files.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        policy_seeds: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(short, long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Replay one episode with per-step snapshots.
    Replay {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        policy: String,
        /// Checkpoint file, for `--policy trained`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Environment seed, as in the `env_seed` column of eval CSVs.
        #[arg(long)]
        episode_seed: u64,
        #[arg(long, default_value_t = 1)]
        snapshot_every: usize,
        #[arg(short, long, default_value = "runs/replay")]
        out: PathBuf,
    },
    /// Render snapshot JSON files to SVG.
    Export {
        /// A snapshot file or a directory of them.
        input: PathBuf,
        #[arg(short, long, default_value = "runs/svg")]
        out: PathBuf,
        #[arg(long)]
        no_heatmap: bool,
        #[arg(long, default_value_t = 512.0)]
        width: f64,
    },
    /// Time refinement decisions over a grid of mesh sizes.
    Timing {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long, required = true)]
        policy: Vec<String>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        sizes: Vec<u32>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Merge episode CSVs and compare every pair of policies.
    Report { inputs: Vec<PathBuf> },
    /// Print the resolved configuration and its hashes.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn contenders(names: &[String], checkpoints: Option<&Path>, cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<Contender>> {
    names
        .iter()
        .map(|n| {
            if n == "trained" {
                let dir = checkpoints.context("--policy trained needs --checkpoints DIR")?;
                let ps = train::load_checkpoints(dir, seeds, Some(&cfg.train_hash()))?;
                Ok(Contender::trained(ps))
            } else {
                let b: Baseline = n.parse().map_err(anyhow::Error::msg)?;
                Ok(Contender::baseline(b))
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { cfg, out, policy_seeds, only_seed } => {
            let c = cfg.load(&[])?;
            std::fs::write(out_dir(&out)?.join("config.toml"), config::to_toml(&c))?;
            let seeds: Vec<usize> = match only_seed {
                Some(s) => vec![s],
                None => (0..policy_seeds).collect(),
            };
            for s in seeds {
                let total = c.run.episodes;
                let mut last = 0;
                let outcome = train::train_seed(&c, s, &out, |done, batch| {
                    if done - last >= 100 || done == total {
                        let perf = batch.iter().map(|r| r.performance).sum::<f64>() / batch.len() as f64;
                        eprintln!("seed {s}: episode {done}/{total}, batch performance {perf:.3}");
                        last = done;
                    }
                })?;
                println!("seed {s}: wrote {}", outcome.checkpoint.display());
            }
        }
        Cmd::Eval { cfg, policy, checkpoints, episodes, policy_seeds, workers, out } => {
            let mut extra = Vec::new();
            if let Some(e) = episodes {
                extra.push(format!("eval.episodes={e}"));
            }
            if let Some(s) = policy_seeds {
                extra.push(format!("eval.policy_seeds={s}"));
            }
            if let Some(w) = workers {
                extra.push(format!("eval.workers={w}"));
            }
            let c = cfg.load(&extra)?;
            let cs = contenders(&policy, checkpoints.as_deref(), &c, c.eval.policy_seeds)?;
            let report = rlamr_harness::evaluate(&cs, &c.eval_env_config(), Protocol::from(&c.eval), &c.eval_hash())?;
            let dir = out_dir(&out)?;
            eval::write_episodes_csv(&report, BufWriter::new(File::create(dir.join("eval_episodes.csv"))?))?;
            eval::write_summary_csv(&report, BufWriter::new(File::create(dir.join("eval_summary.csv"))?))?;
            println!("config {}", report.config_hash);
            for r in &report.results {
                let s = &r.summary;
                let flag = if s.single_seed { " (single seed)" } else { "" };
                println!("{:<16} {:.4} ± {:.4}{flag}", r.name, s.mean, s.stderr);
            }
        }
        Cmd::Replay { cfg, policy, checkpoint, episode_seed, snapshot_every, out } => {
            let c = cfg.load(&[])?;
            let loaded;
            let mut sel = if policy == "trained" {
                let path = checkpoint.context("--policy trained needs --checkpoint FILE")?;
                loaded = train::load_checkpoint(&path, Some(&c.train_hash()))?;
                Selector::Policy { policy: &loaded, greedy: c.eval.greedy, rng: ChaCha8Rng::seed_from_u64(episode_seed) }
            } else {
                let baseline: Baseline = policy.parse().map_err(anyhow::Error::msg)?;
                Selector::Baseline { baseline, rng: ChaCha8Rng::seed_from_u64(episode_seed) }
            };
            let recs = replay::replay(&c.eval_env_config(), episode_seed, &mut sel, snapshot_every, &out, &c.eval_hash())?;
            let last = recs.last().map_or(0.0, |r| r.e_t);
            println!("{} steps, final error {last:.6e}, output in {}", recs.len(), out.display());
        }
        Cmd::Export { input, out, no_heatmap, width } => {
            let opts = SvgOptions { width, heatmap: !no_heatmap, ..SvgOptions::default() };
            let files = snapshot_files(&input)?;
            let dir = out_dir(&out)?;
            for f in &files {
                let snap: EnvSnapshot = serde_json::from_reader(File::open(f)?)
                    .with_context(|| format!("reading snapshot {}", f.display()))?;
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("snapshot");
                std::fs::write(dir.join(format!("{stem}.svg")), svg::render_solution(&snap.solution, &opts))?;
            }
            println!("rendered {} snapshots into {}", files.len(), dir.display());
        }
        Cmd::Timing { cfg, policy, checkpoints, sizes, episodes, steps, out } => {
            let c = cfg.load(&[])?;
            let cs = contenders(&policy, checkpoints.as_deref(), &c, 1)?;
            let mut rows = Vec::new();
            for ct in &cs {
                for &size in &sizes {
                    let mut make = |ep: usize| match &ct.agent {
                        Agent::Trained(ps) => Selector::Policy {
                            policy: &ps[0],
                            greedy: true,
                            rng: ChaCha8Rng::seed_from_u64(ep as u64),
                        },
                        Agent::Baseline(b) => Selector::Baseline { baseline: *b, rng: ChaCha8Rng::seed_from_u64(ep as u64) },
                    };
                    rows.push(timing::decision_timing(&ct.name, &mut make, &c.env_config(), size, episodes, steps, c.eval.master_seed)?);
                }
            }
            let table = timing::timing_table(&rows);
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(p, table)?;
            }
        }
        Cmd::Report { inputs } => {
            if inputs.is_empty() {
                bail!("no input CSVs");
            }
            let files = inputs.iter().map(File::open).collect::<Result<Vec<_>, _>>()?;
            let groups = eval::read_episode_csvs(files)?;
            println!("config {}", groups[0].0);
            for (_, g) in &groups {
                println!("{:<16} {:.4} ± {:.4}", g.name, g.summary.mean, g.summary.stderr);
            }
            for (i, (_, a)) in groups.iter().enumerate() {
                for (_, b) in &groups[i + 1..] {
                    let (gap, se) = rlamr_harness::compare(a, b)?;
                    let z = if se > 0.0 { format!("{:.1}", gap / se) } else { "n/a".into() };
                    println!("{} - {}: {gap:+.4} ({z} pooled stderr)", a.name, b.name);
                }
            }
        }
        Cmd::ShowConfig { cfg } => {
            let c = cfg.load(&[])?;
            println!("# train hash {}\n# eval hash {}", c.train_hash(), c.eval_hash());
            print!("{}", config::to_toml(&c));
        }
    }
    Ok(())
}

fn out_dir(p: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(p.to_path_buf())
}

fn snapshot_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<config::ConfigError>().is_some()
        || matches!(e.downcast_ref::<HarnessError>(), Some(HarnessError::Config(_)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 3 })
        }
    }
}

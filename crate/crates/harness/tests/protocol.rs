use std::path::Path;

use rlamr_core::baselines::Baseline;
use rlamr_core::{FunctionClass, Mode};
use rlamr_harness::config::parse_str;
use rlamr_harness::eval::{self, episode_stderr, Selector};
use rlamr_harness::timing::{decision_timing, timing_table};
use rlamr_harness::{evaluate, pooled_stderr, train, Contender, ExperimentConfig, HarnessError, Protocol};

fn cfg(text: &str) -> ExperimentConfig {
    parse_str(text, Path::new("test.toml"), &[]).unwrap()
}

fn protocol(episodes: usize, seeds: usize) -> Protocol {
    Protocol { episodes, policy_seeds: seeds, master_seed: 11, greedy: true, workers: 1 }
}

#[test]
fn no_refine_scores_zero_on_advection() {
    let c = cfg("[env]\nmode = \"advection\"\nclass = \"bumps\"\nbudget = 4\nepisode_len = 4\n");
    assert_eq!(c.env.mode, Mode::Advection);
    let r = evaluate(&[Contender::baseline(Baseline::NoRefine)], &c.eval_env_config(), protocol(3, 2), "h").unwrap();
    let s = &r.results[0].summary;
    assert!(s.mean.abs() <= 1e-10 && s.stderr == 0.0, "{s:?}");
}

#[test]
fn contenders_share_initial_conditions_and_reports_are_reproducible() {
    let c = cfg("[env]\nclass = \"bumps\"\nbudget = 3\nepisode_len = 3\n");
    let cs = [Contender::baseline(Baseline::Random), Contender::baseline(Baseline::Zz)];
    let bytes = |workers| {
        let p = Protocol { workers, ..protocol(4, 2) };
        let r = evaluate(&cs, &c.eval_env_config(), p, &c.eval_hash()).unwrap();
        for (a, b) in r.results[0].episodes.iter().flatten().zip(r.results[1].episodes.iter().flatten()) {
            assert_eq!((a.env_seed, a.e_initial), (b.env_seed, b.e_initial));
        }
        let mut out = Vec::new();
        eval::write_episodes_csv(&r, &mut out).unwrap();
        eval::write_summary_csv(&r, &mut out).unwrap();
        out
    };
    let a = bytes(1);
    assert_eq!(a, bytes(1));
    assert_eq!(a, bytes(3));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("config_hash,policy,policy_seed,episode,env_seed,performance"));
    assert!(text.lines().skip(1).all(|l| l.starts_with(&c.eval_hash()) || l.starts_with("config_hash")));
}

#[test]
fn true_error_beats_random_on_static_steps() {
    let c = cfg("[env]\nclass = \"steps\"\n");
    assert_eq!(c.env_config().class, FunctionClass::Steps);
    let cs = [Contender::baseline(Baseline::TrueError), Contender::baseline(Baseline::Random)];
    let r = evaluate(&cs, &c.eval_env_config(), protocol(100, 1), "h").unwrap();
    let (t, rnd) = (&r.results[0], &r.results[1]);
    assert!(t.summary.single_seed);
    let se = pooled_stderr(episode_stderr(&t.flat_performances()).unwrap(), episode_stderr(&rnd.flat_performances()).unwrap());
    assert!(t.summary.mean - rnd.summary.mean > 5.0 * se, "{} vs {} (se {se})", t.summary.mean, rnd.summary.mean);
}

#[test]
fn mixed_config_hashes_are_rejected() {
    let c = cfg("[env]\nbudget = 2\nepisode_len = 2\n");
    let cs = [Contender::baseline(Baseline::Random)];
    let mk = |hash: &str| {
        let r = evaluate(&cs, &c.eval_env_config(), protocol(2, 1), hash).unwrap();
        let mut out = Vec::new();
        eval::write_episodes_csv(&r, &mut out).unwrap();
        out
    };
    let same = eval::read_episode_csvs(vec![&mk("aaa")[..], &mk("aaa")[..]]).unwrap();
    assert_eq!(same[0].1.summary.episodes, 4);
    let err = eval::read_episode_csvs(vec![&mk("aaa")[..], &mk("bbb")[..]]).unwrap_err();
    assert!(matches!(err, HarnessError::HashMismatch { .. }));
}

#[test]
fn zero_episode_training_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("[train]\nepisodes = 0\n");
    let out = train::train_seed(&c, 2, dir.path(), |_, _| {}).unwrap();
    assert!(out.rows.is_empty());
    let init = train::initial_policy(&c, 2).unwrap();
    assert_eq!(out.policy, init);
    let loaded = train::load_checkpoint(&out.checkpoint, Some(&c.train_hash())).unwrap();
    assert_eq!(loaded, init);
    let other = cfg("[train]\nepisodes = 0\nalpha = 0.5\n");
    assert!(matches!(
        train::load_checkpoint(&out.checkpoint, Some(&other.train_hash())),
        Err(HarnessError::HashMismatch { .. })
    ));
    assert!(matches!(
        train::load_checkpoints(dir.path(), 1, None),
        Err(HarnessError::MissingCheckpoint(_))
    ));
}

#[test]
fn training_csv_is_bitwise_reproducible() {
    let text = "[env]\nclass = \"bumps\"\nbudget = 3\nepisode_len = 3\n[policy]\nipn_h1 = 8\nipn_h2 = 4\n[train]\nepisodes = 6\nbatch_size = 2\ncheckpoint_every = 4\n";
    let c = cfg(text);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        train::train_seed(&c, 0, dir.path(), |_, _| {}).unwrap();
        assert!(dir.path().join("checkpoint_seed0_ep4.ck").exists());
        let csv = std::fs::read(train::train_csv_path(dir.path(), 0)).unwrap();
        let ck = std::fs::read(train::checkpoint_path(dir.path(), 0)).unwrap();
        (csv, ck)
    };
    let (a, ka) = run();
    let (b, kb) = run();
    assert_eq!(a, b);
    assert_eq!(ka, kb);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "config_hash,policy_seed,episode,return,performance,epsilon,leaves_final");
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn decision_timing_grows_with_mesh_size() {
    let c = cfg("[policy]\nipn_h1 = 16\nipn_h2 = 8\n");
    let p = train::initial_policy(&c, 0).unwrap();
    let mut rows = Vec::new();
    for size in [4, 16] {
        let mut make = |ep: usize| Selector::Policy {
            policy: &p,
            greedy: true,
            rng: rand::SeedableRng::seed_from_u64(ep as u64),
        };
        let row = decision_timing("ipn", &mut make, &c.env_config(), size, 3, 5, 0).unwrap();
        assert!(row.mean_ms > 0.0 && row.samples == 15);
        rows.push(row);
    }
    assert!(rows[1].mean_ms >= rows[0].mean_ms, "{rows:?}");
    let t = timing_table(&rows);
    assert_eq!(t.lines().next().unwrap(), "policy,4x4,16x16");
    assert!(t.lines().nth(1).unwrap().starts_with("ipn,"));
}

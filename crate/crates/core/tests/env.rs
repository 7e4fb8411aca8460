use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlamr_core::baselines::random_select;
use rlamr_core::env::{performance, AmrEnv, EnvConfig, RewardMode};
use rlamr_core::functions::{Component, FunctionClass, Mode, TrueSolution};

fn first_coarse_action(env: &AmrEnv) -> usize {
    env.mesh().leaves().iter().position(|e| e.depth == 0).unwrap() + 1
}

fn static_env(class: FunctionClass, seed: u64) -> AmrEnv {
    AmrEnv::reset(EnvConfig::static_default(class), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn reward_telescopes_over_episodes() {
    for (k, class) in FunctionClass::ALL.into_iter().enumerate() {
        for seed in 0..5 {
            let mut env = static_env(class, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let e0 = env.initial_error();
            let mut sum = 0.0;
            let mut done = false;
            while !done {
                let a = random_select(&env.valid_mask(), &mut rng);
                let out = env.advance(a).unwrap();
                sum += out.reward;
                done = out.done;
            }
            assert!((sum * e0 - (e0 - env.error())).abs() < 1e-12, "class {k} seed {seed}");
        }
    }
}

#[test]
fn episode_length_budget_and_leaf_growth() {
    let mut cfg = EnvConfig::static_default(FunctionClass::Bumps);
    cfg.budget = 4;
    cfg.episode_len = 4;
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut steps = 0;
    loop {
        let before = env.mesh().len();
        let out = env.advance(first_coarse_action(&env)).unwrap();
        steps += 1;
        assert!(out.info.refined);
        assert_eq!(env.mesh().len(), before + 3);
        if out.done {
            break;
        }
    }
    assert_eq!(steps, 4);
    assert_eq!(env.budget_left(), 0);

    // With a larger horizon than budget, no leaf action is valid once spent.
    let mut cfg = EnvConfig::static_default(FunctionClass::Bumps);
    cfg.budget = 2;
    cfg.episode_len = 5;
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    env.advance(5).unwrap();
    env.advance(5).unwrap();
    let mask = env.valid_mask();
    assert!(mask[0] && mask[1..].iter().all(|v| !v));
    let n = env.mesh().len();
    let out = env.advance(7).unwrap();
    assert!(!out.info.refined);
    assert_eq!(env.mesh().len(), n);
    assert_eq!(out.reward, 0.0);
}

#[test]
fn max_depth_elements_are_masked_and_skipped() {
    let mut cfg = EnvConfig::static_default(FunctionClass::Bumps);
    cfg.d_max = 1;
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    env.advance(1).unwrap();
    let mask = env.valid_mask();
    // Children occupy actions 1..=4 and sit at d_max.
    assert!(mask[1..=4].iter().all(|v| !v));
    assert!(mask[5]);
    let before = env.budget_left();
    let out = env.advance(2).unwrap();
    assert!(!out.info.refined);
    assert_eq!(env.budget_left(), before);
    assert!(env.mesh().len() <= 64 * 4);
}

#[test]
fn same_seed_same_episode() {
    let run = || {
        let mut env = static_env(FunctionClass::Circles, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut trace = vec![env.observe().observations];
        for _ in 0..10 {
            let a = random_select(&env.valid_mask(), &mut rng);
            let r = env.step(a).unwrap();
            trace.push(r.next_state.observations);
            trace.push(vec![r.reward, r.info.e_after]);
        }
        trace
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn constant_solution_observation() {
    let truth = TrueSolution {
        class: FunctionClass::Bumps,
        mode: Mode::Static,
        theta: 0.0,
        // A bump this wide is 1 to within 1e-16 on the unit square.
        components: vec![Component::Bump { cx: 0.5, cy: 0.5, w: 1e18 }],
        velocity: [0.0, 0.0],
        steps2_rotation_fix: false,
    };
    let mut cfg = EnvConfig::static_default(FunctionClass::Bumps);
    cfg.reward = RewardMode::Surrogate;
    let env = AmrEnv::with_truth(cfg, truth).unwrap();
    let s = env.observe();
    for i in 1..s.n_actions() {
        let o = s.observation(i);
        for p in o.chunks(2) {
            assert!((p[0] - 1.0).abs() < 1e-15);
            assert_eq!(p[1], 0.0);
        }
    }
}

#[test]
fn depth_channel_sees_coarse_neighbors_in_context() {
    let mut env = static_env(FunctionClass::Bumps, 1);
    // Leaf (ix=3, iy=3) is action 28; its SW child lands at action 28.
    env.advance(28).unwrap();
    let s = env.observe();
    let o = s.observation(28);
    let side = 24;
    let depth = |ix: usize, iy: usize| o[(iy * side + ix) * 2 + 1];
    let third = 1.0 / 3.0;
    for iy in 4..20 {
        for ix in 0..4 {
            assert_eq!(depth(ix, iy), 0.0, "west context");
        }
        for ix in 4..20 {
            assert_eq!(depth(ix, iy), third, "interior");
        }
        // East context is the SE sibling, also depth 1.
        for ix in 20..24 {
            assert_eq!(depth(ix, iy), third, "east sibling");
        }
    }
}

#[test]
fn static_context_clamps_and_advection_wraps() {
    let cfg = EnvConfig::static_default(FunctionClass::Bumps);
    let env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let s = env.observe();
    // Element 0 touches the lower-left corner: context samples are outside.
    let o = s.observation(1);
    assert_eq!(o[1], 0.0);
    let fe = env.solution();
    assert_eq!(o[0], fe.eval(0.0, 0.0).unwrap());

    let cfg = EnvConfig::advection_default(FunctionClass::Bumps);
    let env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let s = env.observe();
    let o = s.observation(1);
    let delta = 0.125 / 16.0;
    let x = 1.0 - 4.0 * delta + 0.5 * delta;
    let expect = env.solution().eval(x, x).unwrap();
    assert!((o[0] - expect).abs() < 1e-15);
}

#[test]
fn surrogate_bounds_the_true_reward_on_random_static_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 1000 {
        let mut cfg = EnvConfig::static_default(FunctionClass::ALL[seed as usize % 4]);
        cfg.reward = RewardMode::Surrogate;
        let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(10_000 + seed)).unwrap();
        seed += 1;
        for _ in 0..10 {
            let a = random_select(&env.valid_mask(), &mut rng);
            let e_no = env.lookahead_error(0).unwrap();
            let out = env.advance(a).unwrap();
            let gap = (out.info.e_after - e_no).abs();
            assert!(out.reward + 1e-12 >= gap, "surrogate {} < gap {gap}", out.reward);
            checked += 1;
        }
    }
}

#[test]
fn surrogate_reward_mode_matches_direct_difference() {
    let mut cfg = EnvConfig::static_default(FunctionClass::Steps);
    cfg.reward = RewardMode::Surrogate;
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(env.advance(0).unwrap().reward, 0.0);
    let before = env.solution().clone();
    let r = env.advance(20).unwrap().reward;
    let direct = rlamr_core::basis::FeFunction::l2_diff(env.solution(), &before).unwrap();
    assert!((r - direct).abs() < 1e-15);
}

#[test]
fn surrogate_vanishes_where_truth_is_already_resolved() {
    let truth = TrueSolution {
        class: FunctionClass::Steps,
        mode: Mode::Static,
        theta: 0.0,
        components: vec![Component::Step { o: 0.3 }],
        velocity: [0.0, 0.0],
        steps2_rotation_fix: false,
    };
    let mut cfg = EnvConfig::static_default(FunctionClass::Steps);
    cfg.reward = RewardMode::Surrogate;
    let mut env = AmrEnv::with_truth(cfg.clone(), truth.clone()).unwrap();
    // Leaf ix=7 sits where the step is flat to machine precision.
    let r = env.advance(8).unwrap();
    assert!(r.info.refined);
    assert!(r.reward.abs() < 1e-12);
    cfg.reward = RewardMode::Exact;
    let mut env = AmrEnv::with_truth(cfg, truth).unwrap();
    assert!(env.advance(8).unwrap().reward.abs() < 1e-9);
}

#[test]
fn advection_episode_lifecycle() {
    let cfg = EnvConfig::advection_default(FunctionClass::Bumps);
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let e0 = env.initial_error();
    let mut sum = 0.0;
    let mut steps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    loop {
        let out = env.advance(rng.gen_range(0..env.n_actions())).unwrap();
        sum += out.reward;
        steps += 1;
        if out.done {
            break;
        }
    }
    assert_eq!(steps, 20);
    assert!((env.sim_time() - 2.0).abs() < 1e-12);
    assert!((sum * e0 - (e0 - env.error())).abs() < 1e-12);
    let base = env.no_refine_final_error().unwrap();
    let p = performance(Mode::Advection, e0, env.error(), Some(base)).unwrap();
    assert!(p.is_finite());

    // A zero-action run scores exactly zero.
    let cfg = EnvConfig::advection_default(FunctionClass::Circles);
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    while !env.advance(0).unwrap().done {}
    let base = env.no_refine_final_error().unwrap();
    assert_eq!(performance(Mode::Advection, env.initial_error(), env.error(), Some(base)).unwrap(), 0.0);
}

#[test]
fn multi_refine_solves_less_often() {
    let mut cfg = EnvConfig::advection_default(FunctionClass::Bumps);
    cfg.multi_refine_per_solve = 4;
    let mut env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for _ in 0..8 {
        env.advance(first_coarse_action(&env)).unwrap();
    }
    assert!((env.sim_time() - 0.2).abs() < 1e-15);
    assert_eq!(env.mesh().len(), 64 + 8 * 3);
}

#[test]
fn tiled_truth_shrinks_each_part_into_its_tile() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let parts: Vec<TrueSolution> = (0..4)
        .map(|_| TrueSolution::sample(FunctionClass::Bumps, Mode::Static, [0.0, 0.0], &mut rng).unwrap())
        .collect();
    let tiled = TrueSolution::tiled(parts.clone(), 2).unwrap();
    assert_eq!(tiled.components.len(), parts.iter().map(|p| p.components.len()).sum::<usize>());
    // Tile (1, 0): its own part's contribution, seen in local coordinates.
    let own = TrueSolution::tiled(vec![parts[1].clone()], 1).unwrap();
    let (x, y) = (0.7, 0.3);
    let local = own.eval_static(2.0 * x - 1.0, 2.0 * y);
    let from_part: f64 = tiled.components[parts[0].components.len()..][..parts[1].components.len()]
        .iter()
        .map(|c| TrueSolution { components: vec![*c], ..tiled.clone() }.eval_static(x, y))
        .sum();
    assert!((local - from_part).abs() < 1e-12);

    let mut cfg = EnvConfig::static_default(FunctionClass::Bumps);
    cfg.base_nx = 16;
    cfg.base_ny = 16;
    cfg.scale_tiles = 2;
    let env = AmrEnv::reset(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(env.truth().components.len() >= 4);
    cfg.class = FunctionClass::Steps;
    assert!(AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
}

//! The refinement decision process: observations, budgeted refinement,
//! exact and surrogate rewards, and episode metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{FeError, FeFunction, NodalBasis, SolutionSnapshot};
use crate::functions::{wrap_unit, FunctionClass, FunctionError, Mode, TrueSolution};
use crate::mesh::{AdjacencyGraph, ElementId, MeshError, QuadMesh};
use crate::solver::{self, AdvectionConfig, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode is already done")]
    EpisodeDone,
    #[error("action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("initial error is zero; rewards cannot be normalized")]
    ZeroInitialError,
    #[error("time-dependent performance needs the no-refine final error")]
    MissingNoRefineBaseline,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Function(#[from] FunctionError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fe(#[from] FeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Exact,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsConfig {
    pub l_element: usize,
    pub l_context: usize,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self { l_element: 16, l_context: 4 }
    }
}

impl ObsConfig {
    /// Samples per axis.
    pub fn side(&self) -> usize {
        self.l_element + 2 * self.l_context
    }

    /// Values per observation (two channels).
    pub fn len(&self) -> usize {
        self.side() * self.side() * OBS_CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const OBS_CHANNELS: usize = 2;

const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub mode: Mode,
    pub class: FunctionClass,
    pub base_nx: u32,
    pub base_ny: u32,
    pub d_max: u32,
    pub budget: usize,
    /// Episode length in MDP steps.
    pub episode_len: usize,
    pub reward: RewardMode,
    pub gamma: f64,
    pub multi_refine_per_solve: usize,
    pub mask_invalid: bool,
    pub order: usize,
    pub obs: ObsConfig,
    pub advection: AdvectionConfig,
    pub steps2_rotation_fix: bool,
    /// Tile the domain with this many truths per axis, each shrunk to its
    /// tile; 1 draws a single truth over the whole domain.
    #[serde(default = "one")]
    pub scale_tiles: u32,
}

fn one() -> u32 {
    1
}

impl EnvConfig {
    pub fn static_default(class: FunctionClass) -> Self {
        Self {
            mode: Mode::Static,
            class,
            base_nx: 8,
            base_ny: 8,
            d_max: 3,
            budget: 10,
            episode_len: 10,
            reward: RewardMode::Exact,
            gamma: 0.99,
            multi_refine_per_solve: 1,
            mask_invalid: true,
            order: 2,
            obs: ObsConfig::default(),
            advection: AdvectionConfig::default(),
            steps2_rotation_fix: false,
            scale_tiles: 1,
        }
    }

    pub fn advection_default(class: FunctionClass) -> Self {
        Self {
            mode: Mode::Advection,
            d_max: 2,
            budget: 20,
            episode_len: 20,
            ..Self::static_default(class)
        }
    }

    pub fn default_for(mode: Mode, class: FunctionClass) -> Self {
        match mode {
            Mode::Static => Self::static_default(class),
            Mode::Advection => Self::advection_default(class),
        }
    }

    /// Largest possible leaf count.
    pub fn n_max(&self) -> usize {
        (self.base_nx as usize * self.base_ny as usize) << (2 * self.d_max)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.base_nx == 0 || self.base_ny == 0 {
            return bad(format!("base mesh {}x{} is empty", self.base_nx, self.base_ny));
        }
        if self.episode_len == 0 {
            return bad("episode_len must be positive".into());
        }
        if self.multi_refine_per_solve == 0 {
            return bad("multi_refine_per_solve must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.order > 8 {
            return bad(format!("basis order {} is too high", self.order));
        }
        if self.obs.l_element == 0 {
            return bad("l_element must be positive".into());
        }
        crate::functions::param_ranges(self.class, self.mode)?;
        if self.mode == Mode::Advection {
            self.advection.validate()?;
        }
        if self.scale_tiles == 0 {
            return bad("scale_tiles must be positive".into());
        }
        if self.scale_tiles > 1 && matches!(self.class, FunctionClass::Steps | FunctionClass::Steps2) {
            return bad(format!("{} truths cannot be tiled", self.class));
        }
        if self.d_max > 12 {
            return bad(format!("d_max {} is too deep", self.d_max));
        }
        Ok(())
    }
}

/// Policy input: one observation per action (dummy first), the element
/// graph, and the refinable-action mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// Concatenated observations, `(n_leaves + 1) × obs_len`, HWC layout.
    pub observations: Vec<f64>,
    pub obs_side: usize,
    pub adjacency: AdjacencyGraph,
    pub valid_mask: Vec<bool>,
    pub mask_invalid: bool,
}

impl GlobalState {
    pub fn obs_len(&self) -> usize {
        self.obs_side * self.obs_side * OBS_CHANNELS
    }

    /// Number of actions, `n_leaves + 1`.
    pub fn n_actions(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.valid_mask.len() - 1
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        let l = self.obs_len();
        &self.observations[i * l..(i + 1) * l]
    }

    /// Mask applied inside the policy softmax.
    pub fn policy_mask(&self) -> Vec<bool> {
        if self.mask_invalid {
            self.valid_mask.clone()
        } else {
            vec![true; self.valid_mask.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub e_before: f64,
    pub e_after: f64,
    pub refined: bool,
    pub leaves: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: GlobalState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One row of an episode log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub e_t: f64,
    pub leaves: usize,
    pub sim_time: f64,
}

/// Serializable per-step snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub step: usize,
    pub sim_time: f64,
    pub error: f64,
    pub budget_left: usize,
    pub solution: SolutionSnapshot,
}

pub fn exact_reward(e_prev: f64, e_new: f64, e0: f64) -> Result<f64, EnvError> {
    if !(e0 > 0.0) {
        return Err(EnvError::ZeroInitialError);
    }
    Ok((e_prev - e_new) / e0)
}

/// Normalized error reduction over an episode. Time-dependent episodes
/// measure against the final error of a zero-action replay.
pub fn performance(mode: Mode, e_initial: f64, e_final: f64, e_no_refine: Option<f64>) -> Result<f64, EnvError> {
    if !(e_initial > 0.0) {
        return Err(EnvError::ZeroInitialError);
    }
    match mode {
        Mode::Static => Ok((e_initial - e_final) / e_initial),
        Mode::Advection => {
            let base = e_no_refine.ok_or(EnvError::MissingNoRefineBaseline)?;
            Ok((base - e_final) / e_initial)
        }
    }
}

#[derive(Debug, Clone)]
pub struct AmrEnv {
    cfg: EnvConfig,
    truth: TrueSolution,
    fe: FeFunction,
    t: usize,
    budget_left: usize,
    solves: usize,
    steps_since_solve: usize,
    e0: f64,
    e: f64,
    /// Per-leaf squared errors (kept current in static mode).
    elem_sq: Vec<f64>,
    done: bool,
}

impl AmrEnv {
    /// Sample a truth from `rng` and start an episode.
    ///
    /// Draws whose interpolant already has zero error (e.g. a steps2 sample
    /// saturated to 0 over the whole domain) cannot normalize rewards and
    /// are redrawn.
    pub fn reset<R: Rng + ?Sized>(cfg: EnvConfig, rng: &mut R) -> Result<Self, EnvError> {
        cfg.validate()?;
        for _ in 0..MAX_RESAMPLES {
            let mut truth = if cfg.scale_tiles > 1 {
                let parts = (0..cfg.scale_tiles * cfg.scale_tiles)
                    .map(|_| TrueSolution::sample(cfg.class, cfg.mode, cfg.advection.c, rng))
                    .collect::<Result<Vec<_>, _>>()?;
                TrueSolution::tiled(parts, cfg.scale_tiles)?
            } else {
                TrueSolution::sample(cfg.class, cfg.mode, cfg.advection.c, rng)?
            };
            truth.steps2_rotation_fix = cfg.steps2_rotation_fix;
            match Self::with_truth(cfg.clone(), truth) {
                Err(EnvError::ZeroInitialError) => continue,
                Ok(env) if !(env.e0 > 0.0) => continue,
                other => return other,
            }
        }
        Err(EnvError::ZeroInitialError)
    }

    /// Start an episode against a given truth.
    pub fn with_truth(cfg: EnvConfig, truth: TrueSolution) -> Result<Self, EnvError> {
        cfg.validate()?;
        let periodic = cfg.mode == Mode::Advection;
        let mesh = QuadMesh::new_uniform(cfg.base_nx, cfg.base_ny, cfg.d_max, periodic)?;
        let basis = NodalBasis::new(cfg.order);
        let fe = FeFunction::interpolate(mesh, basis, truth.at_time(0.0));
        let mut env = Self {
            truth,
            fe,
            t: 0,
            budget_left: cfg.budget,
            solves: 0,
            steps_since_solve: 0,
            e0: 0.0,
            e: 0.0,
            elem_sq: Vec::new(),
            done: false,
            cfg,
        };
        env.recompute_errors();
        env.e0 = env.e;
        if env.cfg.reward == RewardMode::Exact && !(env.e0 > 0.0) {
            return Err(EnvError::ZeroInitialError);
        }
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn truth(&self) -> &TrueSolution {
        &self.truth
    }

    pub fn solution(&self) -> &FeFunction {
        &self.fe
    }

    pub fn mesh(&self) -> &QuadMesh {
        self.fe.mesh()
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn budget_left(&self) -> usize {
        self.budget_left
    }

    pub fn sim_time(&self) -> f64 {
        self.solves as f64 * self.cfg.advection.rl_step_time
    }

    pub fn initial_error(&self) -> f64 {
        self.e0
    }

    pub fn error(&self) -> f64 {
        self.e
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn n_actions(&self) -> usize {
        self.fe.mesh().len() + 1
    }

    /// Per-leaf squared errors against the truth at the current time.
    pub fn element_sq_errors(&self) -> &[f64] {
        &self.elem_sq
    }

    /// Valid-action mask: index 0 always valid, leaf actions valid while
    /// budget remains and the leaf is below `d_max`.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n_actions());
        m.push(true);
        let has_budget = self.budget_left > 0;
        m.extend(self.fe.mesh().leaves().iter().map(|e| has_budget && e.depth < self.cfg.d_max));
        m
    }

    pub fn is_valid(&self, action: usize) -> bool {
        action == 0
            || (self.budget_left > 0
                && action <= self.fe.mesh().len()
                && self.fe.mesh().leaves()[action - 1].depth < self.cfg.d_max)
    }

    fn recompute_errors(&mut self) {
        let t = self.sim_time();
        let truth = &self.truth;
        let f = |x: f64, y: f64| truth.eval(x, y, t);
        self.elem_sq = self.fe.element_sq_errors_refined(&f, self.cfg.d_max);
        self.e = self.elem_sq.iter().sum::<f64>().sqrt();
    }

    /// Apply the transition without computing rewards. Returns whether a
    /// refinement was executed.
    fn transition(&mut self, action: usize) -> Result<bool, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let n_actions = self.n_actions();
        if action >= n_actions {
            return Err(EnvError::ActionOutOfRange { action, n_actions });
        }
        let refine = action > 0 && self.is_valid(action);
        let mut new_positions = None;
        if refine {
            let id: ElementId = self.fe.mesh().leaves()[action - 1].id;
            let res = self.fe.refine(id)?;
            self.budget_left -= 1;
            new_positions = Some(res.position);
        }
        match self.cfg.mode {
            Mode::Static => {
                if let Some(p) = new_positions {
                    let truth = &self.truth;
                    let f = |x: f64, y: f64| truth.eval_static(x, y);
                    for k in p..p + 4 {
                        self.fe.interpolate_element(k, &f);
                    }
                    let d_max = self.cfg.d_max;
                    let children: Vec<f64> =
                        (p..p + 4).map(|k| self.fe.element_sq_error_refined(k, &f, d_max)).collect();
                    self.elem_sq.splice(p..p + 1, children);
                    self.e = self.elem_sq.iter().sum::<f64>().sqrt();
                }
            }
            Mode::Advection => {
                self.steps_since_solve += 1;
                if self.steps_since_solve == self.cfg.multi_refine_per_solve {
                    self.steps_since_solve = 0;
                    solver::step_in_place(&mut self.fe, &self.cfg.advection, self.cfg.advection.rl_step_time)?;
                    self.solves += 1;
                }
                self.recompute_errors();
            }
        }
        self.t += 1;
        if self.t >= self.cfg.episode_len {
            self.done = true;
        }
        Ok(refine)
    }

    /// Advance one MDP step without assembling the next observation.
    pub fn advance(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        let e_before = self.e;
        let shadow = match self.cfg.reward {
            RewardMode::Surrogate if action > 0 && self.is_valid(action) && !self.done => Some(self.clone()),
            _ => None,
        };
        let refined = self.transition(action)?;
        let reward = match self.cfg.reward {
            RewardMode::Exact => exact_reward(e_before, self.e, self.e0)?,
            RewardMode::Surrogate => match shadow {
                Some(mut other) => {
                    other.transition(0)?;
                    FeFunction::l2_diff(&self.fe, &other.fe)?
                }
                None => 0.0,
            },
        };
        Ok(StepOutcome {
            reward,
            done: self.done,
            info: StepInfo { e_before, e_after: self.e, refined, leaves: self.fe.mesh().len() },
        })
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        let out = self.advance(action)?;
        Ok(StepResult { next_state: self.observe(), reward: out.reward, done: out.done, info: out.info })
    }

    /// Error after taking `action` from the current state, leaving `self`
    /// untouched.
    pub fn lookahead_error(&self, action: usize) -> Result<f64, EnvError> {
        let mut c = self.clone();
        c.transition(action)?;
        Ok(c.e)
    }

    /// Final error of a zero-action replay of this episode's truth.
    pub fn no_refine_final_error(&self) -> Result<f64, EnvError> {
        let mut cfg = self.cfg.clone();
        cfg.reward = RewardMode::Exact;
        let mut env = AmrEnv::with_truth(cfg, self.truth.clone())?;
        while !env.done {
            env.transition(0)?;
        }
        Ok(env.e)
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            step: self.t,
            sim_time: self.sim_time(),
            error: self.e,
            budget_left: self.budget_left,
            solution: self.fe.snapshot(),
        }
    }

    /// Assemble the policy input for the current mesh.
    pub fn observe(&self) -> GlobalState {
        let obs = self.cfg.obs;
        let side = obs.side();
        let len = obs.len();
        let mesh = self.fe.mesh();
        let n = mesh.len();
        let mut observations = vec![0.0; (n + 1) * len];
        let periodic = self.cfg.mode == Mode::Advection;
        let inv_dmax = if self.cfg.d_max == 0 { 0.0 } else { 1.0 / self.cfg.d_max as f64 };
        let mut xs = vec![0.0; side];
        let mut ys = vec![0.0; side];
        for (pos, e) in mesh.leaves().iter().enumerate() {
            let b = mesh.bounds(e);
            let dx = b.hx() / obs.l_element as f64;
            let dy = b.hy() / obs.l_element as f64;
            let lc = obs.l_context as f64;
            for k in 0..side {
                xs[k] = b.x0 - lc * dx + (k as f64 + 0.5) * dx;
                ys[k] = b.y0 - lc * dy + (k as f64 + 0.5) * dy;
            }
            let out = &mut observations[(pos + 1) * len..(pos + 2) * len];
            for (iy, &y) in ys.iter().enumerate() {
                for (ix, &x) in xs.iter().enumerate() {
                    let (px, py, inside) = if periodic {
                        (wrap_unit(x), wrap_unit(y), true)
                    } else {
                        let inside = (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y);
                        (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0), inside)
                    };
                    let owner = mesh.locate(px, py).expect("sample point inside domain");
                    let o = (iy * side + ix) * OBS_CHANNELS;
                    out[o] = self.fe.eval_in(owner, px, py);
                    out[o + 1] = if inside { mesh.leaves()[owner].depth as f64 * inv_dmax } else { 0.0 };
                }
            }
        }
        GlobalState {
            observations,
            obs_side: side,
            adjacency: mesh.adjacency_graph(),
            valid_mask: self.valid_mask(),
            mask_invalid: self.cfg.mask_invalid,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::Component;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step_truth() -> TrueSolution {
        TrueSolution {
            class: FunctionClass::Steps,
            mode: Mode::Static,
            theta: 0.0,
            components: vec![Component::Step { o: 0.3 }],
            velocity: [0.0, 0.0],
            steps2_rotation_fix: false,
        }
    }

    #[test]
    fn reward_formula() {
        assert!((exact_reward(1.0, 0.6, 2.0).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(exact_reward(0.5, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(exact_reward(0.5, 0.5, 0.0), Err(EnvError::ZeroInitialError));
    }

    #[test]
    fn performance_formula() {
        assert_eq!(performance(Mode::Static, 2.0, 2.0, None).unwrap(), 0.0);
        assert_eq!(performance(Mode::Static, 2.0, 0.0, None).unwrap(), 1.0);
        assert_eq!(performance(Mode::Advection, 2.0, 1.0, None), Err(EnvError::MissingNoRefineBaseline));
        assert_eq!(performance(Mode::Advection, 2.0, 1.0, Some(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn reset_state_shape() {
        let cfg = EnvConfig::static_default(FunctionClass::Bumps);
        let env = AmrEnv::reset(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = env.observe();
        assert_eq!(s.n_actions(), 65);
        assert_eq!(s.observations.len(), 65 * 24 * 24 * 2);
        assert!(s.observation(0).iter().all(|&v| v == 0.0));
        assert!(env.initial_error() > 0.0);
    }

    #[test]
    fn action_zero_gives_zero_reward() {
        let mut env = AmrEnv::with_truth(EnvConfig::static_default(FunctionClass::Steps), step_truth()).unwrap();
        let r = env.step(0).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.info.e_after, r.info.e_before);
        assert_eq!(r.next_state.n_actions(), 65);
    }

    #[test]
    fn refinement_grows_state_by_three() {
        let mut env = AmrEnv::with_truth(EnvConfig::static_default(FunctionClass::Steps), step_truth()).unwrap();
        let r = env.step(3).unwrap();
        assert!(r.info.refined);
        assert_eq!(r.next_state.n_actions(), 68);
        assert_eq!(env.budget_left(), 9);
    }

    #[test]
    fn errors_and_done() {
        let mut cfg = EnvConfig::static_default(FunctionClass::Steps);
        cfg.episode_len = 2;
        let mut env = AmrEnv::with_truth(cfg, step_truth()).unwrap();
        assert_eq!(env.advance(66).unwrap_err(), EnvError::ActionOutOfRange { action: 66, n_actions: 65 });
        env.advance(0).unwrap();
        assert!(env.advance(0).unwrap().done);
        assert_eq!(env.advance(0).unwrap_err(), EnvError::EpisodeDone);
    }
}

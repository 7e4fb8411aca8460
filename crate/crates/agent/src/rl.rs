//! REINFORCE and PPO over batches of variable-size trajectories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlamr_core::env::performance;
use rlamr_core::rng::{derive_seed, rng_from, stream};
use rlamr_core::{AmrEnv, EnvConfig, GlobalState, Mode};
use rlamr_nn::{Adam, Grads, Graph};
use serde::{Deserialize, Serialize};

use crate::policies::{action_indices, greedy_action, sample_action, Policy};
use crate::value::ValueNet;
use crate::AgentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reinforce,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_div: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Rollout threads; results do not depend on it.
    pub workers: usize,
    /// Subtract the batch-mean return at each step index.
    pub reinforce_baseline: bool,
    /// Weight REINFORCE terms by `π/π̃` to correct for ε-mixing.
    pub importance_correction: bool,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub ppo_eps: f64,
    pub value_loss_coef: f64,
    pub ppo_epochs: usize,
    pub ppo_minibatches: usize,
    pub value_hidden: usize,
    pub normalize_advantages: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Reinforce,
            batch_size: 8,
            gamma: 0.99,
            epsilon_start: 0.5,
            epsilon_end: 0.05,
            epsilon_div: 500.0,
            alpha: 1e-4,
            seed: 0,
            workers: 1,
            reinforce_baseline: false,
            importance_correction: false,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            ppo_eps: 0.2,
            value_loss_coef: 0.5,
            ppo_epochs: 4,
            ppo_minibatches: 4,
            value_hidden: 64,
            normalize_advantages: false,
        }
    }
}

impl TrainConfig {
    /// Per-architecture exploration decay and learning rate for a mode.
    pub fn for_mode(arch: crate::Arch, mode: Mode) -> Self {
        let adv = mode == Mode::Advection;
        Self {
            epsilon_div: if adv { 100.0 } else { 500.0 },
            alpha: if !adv && arch == crate::Arch::Hypernet { 5e-5 } else { 1e-4 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.epsilon_start >= self.epsilon_end && self.epsilon_end >= 0.0 && self.epsilon_start <= 1.0) {
            return bad("need 1 >= epsilon_start >= epsilon_end >= 0");
        }
        if !(self.epsilon_div > 0.0) {
            return bad("epsilon_div must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.batch_size == 0 || self.workers == 0 {
            return bad("batch_size and workers must be positive");
        }
        if self.algorithm == Algorithm::Ppo {
            if self.ppo_epochs == 0 || self.ppo_minibatches == 0 || self.value_hidden == 0 {
                return bad("ppo_epochs, ppo_minibatches and value_hidden must be positive");
            }
            if !(self.ppo_eps > 0.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
                return bad("need ppo_eps > 0 and gae_lambda in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Exploration level for a training episode, decaying linearly.
pub fn epsilon(episode: usize, cfg: &TrainConfig) -> f64 {
    let e = cfg.epsilon_start - (cfg.epsilon_start - cfg.epsilon_end) * episode as f64 / cfg.epsilon_div;
    e.max(cfg.epsilon_end)
}

/// `G_t = Σ_{k≥t} γ^{k−t} r_k`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Generalized advantage estimates; the value after the last step is 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub env_seed: u64,
    pub states: Vec<GlobalState>,
    pub actions: Vec<usize>,
    /// `π̃(a_t|s_t)` under the ε-mixed sampler.
    pub behavior_probs: Vec<f64>,
    /// `π(a_t|s_t)` at collection time.
    pub policy_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub rewards: Vec<f64>,
    pub e0: f64,
    pub e_final: f64,
    pub performance: f64,
    pub leaves_final: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Normalized error reduction of a finished episode.
pub fn episode_performance(env: &AmrEnv) -> Result<f64, AgentError> {
    let nr = match env.config().mode {
        Mode::Static => None,
        Mode::Advection => Some(env.no_refine_final_error()?),
    };
    Ok(performance(env.config().mode, env.initial_error(), env.error(), nr)?)
}

/// Play one episode. With `greedy` the most probable action is taken and
/// `eps` is ignored.
pub fn rollout(
    policy: &Policy,
    env_cfg: &EnvConfig,
    env_seed: u64,
    sample_seed: u64,
    eps: f64,
    greedy: bool,
) -> Result<Trajectory, AgentError> {
    let mut env_rng = ChaCha8Rng::seed_from_u64(env_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut env = AmrEnv::reset(env_cfg.clone(), &mut env_rng)?;
    let mut tr = Trajectory {
        env_seed,
        states: Vec::new(),
        actions: Vec::new(),
        behavior_probs: Vec::new(),
        policy_probs: Vec::new(),
        entropies: Vec::new(),
        rewards: Vec::new(),
        e0: env.initial_error(),
        e_final: 0.0,
        performance: 0.0,
        leaves_final: 0,
    };
    while !env.is_done() {
        let state = env.observe();
        let probs = policy.probs(&state)?;
        let (a, b) = if greedy {
            let a = greedy_action(&probs);
            (a, probs[a])
        } else {
            sample_action(&probs, &state.valid_mask, eps, &mut rng)?
        };
        let out = env.advance(a)?;
        tr.entropies.push(-probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>());
        tr.policy_probs.push(probs[a]);
        tr.behavior_probs.push(b);
        tr.actions.push(a);
        tr.rewards.push(out.reward);
        tr.states.push(state);
    }
    tr.e_final = env.error();
    tr.performance = episode_performance(&env)?;
    tr.leaves_final = env.mesh().len();
    Ok(tr)
}

/// Run `f(i)` for `i in 0..n` on up to `workers` threads; results come
/// back in index order.
pub fn par_map<T: Send, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let workers = workers.min(n);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index produced")).collect()
}

/// Per-step REINFORCE coefficients `γ^t G_t / M`, one vector per trajectory.
pub fn reinforce_weights(batch: &[Trajectory], cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let m: usize = batch.iter().map(Trajectory::len).sum();
    let returns: Vec<Vec<f64>> = batch.iter().map(|t| discounted_returns(&t.rewards, cfg.gamma)).collect();
    let t_max = batch.iter().map(Trajectory::len).max().unwrap_or(0);
    let mut baseline = vec![0.0; t_max];
    if cfg.reinforce_baseline {
        let mut counts = vec![0usize; t_max];
        for g in &returns {
            for (t, v) in g.iter().enumerate() {
                baseline[t] += v;
                counts[t] += 1;
            }
        }
        for (b, c) in baseline.iter_mut().zip(counts) {
            *b /= c.max(1) as f64;
        }
    }
    batch
        .iter()
        .zip(&returns)
        .map(|(tr, g)| {
            let mut disc = 1.0;
            (0..tr.len())
                .map(|t| {
                    let mut w = disc * (g[t] - baseline[t]) / m as f64;
                    if cfg.importance_correction {
                        w *= tr.policy_probs[t] / tr.behavior_probs[t];
                    }
                    disc *= cfg.gamma;
                    w
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_entropy: f64,
    pub mean_return: f64,
}

/// Batch REINFORCE gradient (of the loss to be minimized) and stats.
pub fn reinforce_grad(policy: &Policy, batch: &[Trajectory], cfg: &TrainConfig) -> Result<(Grads, UpdateStats), AgentError> {
    if batch.is_empty() || batch.iter().all(Trajectory::is_empty) {
        return Err(AgentError::EmptyBatch);
    }
    let weights = reinforce_weights(batch, cfg);
    let parts = par_map(batch.len(), cfg.workers, |k| {
        let tr = &batch[k];
        let states: Vec<&GlobalState> = tr.states.iter().collect();
        policy.loss_and_grad(&states, &tr.actions, &weights[k])
    });
    let mut grads = Grads::zeros_like(policy.params());
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((grads, batch_stats(batch, loss)))
}

fn batch_stats(batch: &[Trajectory], loss: f64) -> UpdateStats {
    let steps: usize = batch.iter().map(Trajectory::len).sum();
    UpdateStats {
        loss,
        mean_entropy: batch.iter().flat_map(|t| t.entropies.iter()).sum::<f64>() / steps.max(1) as f64,
        mean_return: batch.iter().map(Trajectory::total_reward).sum::<f64>() / batch.len() as f64,
    }
}

pub fn reinforce_update(policy: &mut Policy, opt: &mut Adam, batch: &[Trajectory], cfg: &TrainConfig) -> Result<UpdateStats, AgentError> {
    let (grads, stats) = reinforce_grad(policy, batch, cfg)?;
    opt.step(policy.params_mut(), &grads);
    Ok(stats)
}

/// Clipped-surrogate policy loss plus entropy bonus, each step scaled by
/// `scale`: `−scale·Σ [min(r A, clip(r) A) + c_e H]` with `r = π/π_old`.
pub fn ppo_policy_loss(
    policy: &Policy,
    states: &[&GlobalState],
    actions: &[usize],
    old_logp: &[f64],
    advantages: &[f64],
    cfg: &TrainConfig,
    scale: f64,
) -> Result<(f64, Grads), AgentError> {
    let n = states.len();
    let mut g = Graph::new(policy.params());
    let f = policy.log_probs(&mut g, states)?;
    let idx = action_indices(&f.offsets, actions, states)?;
    let lp = g.gather(f.log_probs, &idx)?;
    let neg_old: Vec<f64> = old_logp.iter().map(|v| -v).collect();
    let diff = g.add_const(lp, &neg_old)?;
    let ratio = g.exp(diff);
    let s1 = g.mul_const(ratio, advantages)?;
    let rc = g.clamp(ratio, 1.0 - cfg.ppo_eps, 1.0 + cfg.ppo_eps);
    let s2 = g.mul_const(rc, advantages)?;
    let surr = g.minimum(s1, s2)?;
    let l1 = g.weighted_sum(surr, &vec![-scale; n])?;
    let loss = if cfg.entropy_coef != 0.0 {
        let ent = g.entropy_segments(f.log_probs, &f.offsets)?;
        let l2 = g.weighted_sum(ent, &vec![-cfg.entropy_coef * scale; n])?;
        g.add(l1, l2)?
    } else {
        l1
    };
    Ok((g.scalar(loss), g.backward(loss)?))
}

/// `coef·Σ (V(s) − target)²`.
pub fn value_loss(critic: &ValueNet, states: &[&GlobalState], targets: &[f64], coef: f64) -> Result<(f64, Grads), AgentError> {
    let mut g = Graph::new(critic.params());
    let v = critic.values(&mut g, states)?;
    let neg_t: Vec<f64> = targets.iter().map(|t| -t).collect();
    let d = g.add_const(v, &neg_t)?;
    let sq = g.square(d);
    let l = g.weighted_sum(sq, &vec![coef; states.len()])?;
    Ok((g.scalar(l), g.backward(l)?))
}

/// Flattened per-step PPO inputs.
struct PpoStep<'a> {
    state: &'a GlobalState,
    action: usize,
    old_logp: f64,
    advantage: f64,
    target: f64,
}

pub fn ppo_update(
    policy: &mut Policy,
    critic: &mut ValueNet,
    opts: (&mut Adam, &mut Adam),
    batch: &[Trajectory],
    cfg: &TrainConfig,
    update_seed: u64,
) -> Result<UpdateStats, AgentError> {
    if batch.is_empty() || batch.iter().all(Trajectory::is_empty) {
        return Err(AgentError::EmptyBatch);
    }
    let (opt_p, opt_v) = opts;
    let chunk = policy.config().grad_chunk;
    let mut steps = Vec::new();
    for tr in batch {
        let mut values = Vec::with_capacity(tr.len());
        for c in tr.states.chunks(chunk) {
            let refs: Vec<&GlobalState> = c.iter().collect();
            let mut g = Graph::new(critic.params());
            let v = critic.values(&mut g, &refs)?;
            values.extend_from_slice(g.value(v));
        }
        let adv = gae(&tr.rewards, &values, cfg.gamma, cfg.gae_lambda);
        for t in 0..tr.len() {
            steps.push(PpoStep {
                state: &tr.states[t],
                action: tr.actions[t],
                old_logp: tr.policy_probs[t].ln(),
                advantage: adv[t],
                target: adv[t] + values[t],
            });
        }
    }
    if cfg.normalize_advantages && steps.len() > 1 {
        let n = steps.len() as f64;
        let mean = steps.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = steps.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        steps.iter_mut().for_each(|s| s.advantage = (s.advantage - mean) / sd);
    }
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut rng = rng_from(update_seed, &[]);
    let mut last_loss = 0.0;
    for _ in 0..cfg.ppo_epochs {
        order.shuffle(&mut rng);
        let mb_size = steps.len().div_ceil(cfg.ppo_minibatches);
        for mb in order.chunks(mb_size.max(1)) {
            let scale = 1.0 / mb.len() as f64;
            let mut gp = Grads::zeros_like(policy.params());
            let mut gv = Grads::zeros_like(critic.params());
            let mut loss = 0.0;
            for sub in mb.chunks(chunk) {
                let st: Vec<&PpoStep> = sub.iter().map(|&i| &steps[i]).collect();
                let states: Vec<&GlobalState> = st.iter().map(|s| s.state).collect();
                let actions: Vec<usize> = st.iter().map(|s| s.action).collect();
                let adv: Vec<f64> = st.iter().map(|s| s.advantage).collect();
                let old: Vec<f64> = st.iter().map(|s| s.old_logp).collect();
                let targets: Vec<f64> = st.iter().map(|s| s.target).collect();
                let (lp, g) = ppo_policy_loss(policy, &states, &actions, &old, &adv, cfg, scale)?;
                loss += lp;
                gp.add_assign(&g);
                let (lv, g) = value_loss(critic, &states, &targets, cfg.value_loss_coef * scale)?;
                loss += lv;
                gv.add_assign(&g);
            }
            opt_p.step(policy.params_mut(), &gp);
            opt_v.step(critic.params_mut(), &gv);
            last_loss = loss;
        }
    }
    Ok(batch_stats(batch, last_loss))
}

/// One CSV row per training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub performance: f64,
    pub epsilon: f64,
    pub leaves_final: usize,
}

pub struct Trainer {
    env_cfg: EnvConfig,
    cfg: TrainConfig,
    policy: Policy,
    opt: Adam,
    critic: Option<(ValueNet, Adam)>,
    episodes_done: usize,
    updates: usize,
}

impl Trainer {
    pub fn new(env_cfg: EnvConfig, cfg: TrainConfig, policy: Policy) -> Result<Self, AgentError> {
        env_cfg.validate()?;
        cfg.validate()?;
        let opt = Adam::new(policy.params(), cfg.alpha);
        let critic = match cfg.algorithm {
            Algorithm::Reinforce => None,
            Algorithm::Ppo => {
                let pc = policy.config();
                let seed = derive_seed(cfg.seed, &[stream::INIT, 1]);
                let v = ValueNet::new(env_cfg.obs.side(), pc.conv_filters, pc.conv_kernel, pc.conv_stride, cfg.value_hidden, seed)?;
                let o = Adam::new(v.params(), cfg.alpha);
                Some((v, o))
            }
        };
        Ok(Self { env_cfg, cfg, policy, opt, critic, episodes_done: 0, updates: 0 })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Collect one batch (at most `max_episodes` long) and update.
    pub fn train_batch(&mut self, max_episodes: usize) -> Result<Vec<EpisodeRow>, AgentError> {
        let k = self.cfg.batch_size.min(max_episodes);
        if k == 0 {
            return Ok(Vec::new());
        }
        let first = self.episodes_done;
        let master = self.cfg.seed;
        let policy = &self.policy;
        let env_cfg = &self.env_cfg;
        let cfg = &self.cfg;
        let batch: Vec<Trajectory> = par_map(k, cfg.workers, |i| {
            let ep = (first + i) as u64;
            let eps = epsilon(first + i, cfg);
            rollout(
                policy,
                env_cfg,
                derive_seed(master, &[stream::TRAIN_ENV, ep]),
                derive_seed(master, &[stream::POLICY, ep]),
                eps,
                false,
            )
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        match &mut self.critic {
            None => {
                reinforce_update(&mut self.policy, &mut self.opt, &batch, &self.cfg)?;
            }
            Some((critic, opt_v)) => {
                let seed = derive_seed(master, &[stream::POLICY, u64::MAX, self.updates as u64]);
                ppo_update(&mut self.policy, critic, (&mut self.opt, opt_v), &batch, &self.cfg, seed)?;
            }
        }
        self.updates += 1;
        self.episodes_done += k;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| EpisodeRow {
                episode: first + i,
                ret: t.total_reward(),
                performance: t.performance,
                epsilon: epsilon(first + i, &self.cfg),
                leaves_final: t.leaves_final,
            })
            .collect())
    }

    /// Train for `episodes` more episodes; `on_batch` sees every batch.
    pub fn run(
        &mut self,
        episodes: usize,
        mut on_batch: impl FnMut(&Trainer, &[EpisodeRow]) -> Result<(), AgentError>,
    ) -> Result<Vec<EpisodeRow>, AgentError> {
        let target = self.episodes_done + episodes;
        let mut rows = Vec::with_capacity(episodes);
        while self.episodes_done < target {
            let batch = self.train_batch(target - self.episodes_done)?;
            on_batch(self, &batch)?;
            rows.extend(batch);
        }
        Ok(rows)
    }
}

//! Variable-size refinement policies. Each maps a [`GlobalState`] with `N`
//! leaves to a distribution over `N + 1` actions (action 0 = no refinement).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rlamr_core::env::OBS_CHANNELS;
use rlamr_core::{GlobalState, Mode};
use rlamr_nn::{Checkpoint, ConvGeom, Grads, Graph, Init, ParamSet, Var};
use serde::{Deserialize, Serialize};

use crate::AgentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Ipn,
    Hypernet,
    Graphnet,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Ipn, Arch::Hypernet, Arch::Graphnet];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Ipn => "ipn",
            Arch::Hypernet => "hypernet",
            Arch::Graphnet => "graphnet",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown architecture '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub arch: Arch,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub ipn_h1: usize,
    pub ipn_h2: usize,
    pub hypernet_h1: usize,
    /// Width of the generated hidden layer.
    pub hypernet_h: usize,
    pub graphnet_dim_v: usize,
    pub graphnet_dim_e: usize,
    /// States per tape when computing gradients; bounds peak memory.
    pub grad_chunk: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::for_mode(Arch::Ipn, Mode::Static)
    }
}

impl PolicyConfig {
    pub fn for_mode(arch: Arch, mode: Mode) -> Self {
        let adv = mode == Mode::Advection;
        Self {
            arch,
            conv_filters: 6,
            conv_kernel: 5,
            conv_stride: 2,
            ipn_h1: if adv { 256 } else { 128 },
            ipn_h2: if adv { 256 } else { 64 },
            hypernet_h1: if adv { 32 } else { 128 },
            hypernet_h: 64,
            graphnet_dim_v: if adv { 256 } else { 64 },
            graphnet_dim_e: 16,
            grad_chunk: 16,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let dims = [
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("ipn_h1", self.ipn_h1),
            ("ipn_h2", self.ipn_h2),
            ("hypernet_h1", self.hypernet_h1),
            ("hypernet_h", self.hypernet_h),
            ("graphnet_dim_v", self.graphnet_dim_v),
            ("graphnet_dim_e", self.graphnet_dim_e),
            ("grad_chunk", self.grad_chunk),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(AgentError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Nominal action count used to scale hypernet init, since the generated
/// weights are sums over every observation.
const HYPER_NOMINAL_ROWS: f64 = 65.0;
/// Output layers start small so the initial policy is close to uniform.
const OUTPUT_STD: f64 = 0.01;

/// Log-probabilities of a batch of states, flattened with `offsets`
/// marking where each state's `N + 1` actions start.
pub struct Forward {
    pub log_probs: Var,
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    cfg: PolicyConfig,
    geom: ConvGeom,
    edge_attr_dim: usize,
    params: ParamSet,
}

fn he(fan_in: usize) -> Init {
    Init::TruncatedNormal((2.0 / fan_in as f64).sqrt())
}

impl Policy {
    /// `obs_side` is the observation image side and `d_max` fixes the
    /// graphnet edge one-hot width.
    pub fn new(cfg: PolicyConfig, obs_side: usize, d_max: u32, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let geom = ConvGeom {
            height: obs_side,
            width: obs_side,
            channels: OBS_CHANNELS,
            kernel: cfg.conv_kernel,
            stride: cfg.conv_stride,
        };
        if cfg.conv_kernel > obs_side {
            return Err(AgentError::InvalidConfig(format!(
                "conv kernel {} exceeds observation side {obs_side}",
                cfg.conv_kernel
            )));
        }
        let edge_attr_dim = 2 * d_max as usize + 1;
        let mut ps = ParamSet::new();
        let pl = geom.patch_len();
        let f = cfg.conv_filters;
        ps.add("conv.filters", &[pl, f], he(pl), seed)?;
        ps.add("conv.bias", &[f], Init::Zeros, seed)?;
        let d = geom.out_height() * geom.out_width() * f;
        match cfg.arch {
            Arch::Ipn => {
                let (h1, h2) = (cfg.ipn_h1, cfg.ipn_h2);
                ps.add("ipn.l1.w", &[d, h1], he(d), seed)?;
                ps.add("ipn.l1.b", &[h1], Init::Zeros, seed)?;
                ps.add("ipn.l2.w", &[h1, h2], he(h1), seed)?;
                ps.add("ipn.l2.b", &[h2], Init::Zeros, seed)?;
                ps.add("ipn.out.w", &[h2, 1], Init::TruncatedNormal(OUTPUT_STD), seed)?;
                ps.add("ipn.out.b", &[1], Init::Zeros, seed)?;
            }
            Arch::Hypernet => {
                let (h1, h) = (cfg.hypernet_h1, cfg.hypernet_h);
                let sd = (d as f64).sqrt();
                ps.add("hyper.u", &[d, h1], Init::TruncatedNormal(1.0 / sd), seed)?;
                let v_std = (2.0 / d as f64).sqrt() / ((h1 as f64).sqrt() * HYPER_NOMINAL_ROWS);
                ps.add("hyper.v", &[h1, d * h], Init::TruncatedNormal(v_std), seed)?;
                ps.add("hyper.y", &[d, h], Init::TruncatedNormal(1.0 / (sd * HYPER_NOMINAL_ROWS)), seed)?;
                ps.add("hyper.out.w", &[h, 1], Init::TruncatedNormal(OUTPUT_STD), seed)?;
                ps.add("hyper.out.b", &[1], Init::Zeros, seed)?;
            }
            Arch::Graphnet => {
                let (dv, de) = (cfg.graphnet_dim_v, cfg.graphnet_dim_e);
                ps.add("graph.enc.w", &[d, dv], he(d), seed)?;
                ps.add("graph.enc.b", &[dv], Init::Zeros, seed)?;
                ps.add("graph.edge_enc.w", &[edge_attr_dim, de], he(edge_attr_dim), seed)?;
                ps.add("graph.edge_enc.b", &[de], Init::Zeros, seed)?;
                for block in ["core", "out"] {
                    add_mlp(&mut ps, &format!("graph.{block}.edge"), de + 2 * dv, de, seed)?;
                    add_mlp(&mut ps, &format!("graph.{block}.node"), de + dv, dv, seed)?;
                }
                ps.add("graph.psi.w", &[dv, 1], Init::TruncatedNormal(OUTPUT_STD), seed)?;
                ps.add("graph.psi.b", &[1], Init::Zeros, seed)?;
                ps.add("graph.dummy", &[1], Init::Zeros, seed)?;
            }
        }
        Ok(Self { cfg, geom, edge_attr_dim, params: ps })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn arch(&self) -> Arch {
        self.cfg.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn conv_geom(&self) -> ConvGeom {
        self.geom
    }

    pub fn edge_attr_dim(&self) -> usize {
        self.edge_attr_dim
    }

    /// Flattened conv output width `d`.
    pub fn feature_dim(&self) -> usize {
        self.geom.out_height() * self.geom.out_width() * self.cfg.conv_filters
    }

    fn check_state(&self, s: &GlobalState) -> Result<(), AgentError> {
        let l = self.geom.image_len();
        if s.obs_len() != l || s.observations.len() != s.n_actions() * l {
            return Err(AgentError::StateMismatch(format!(
                "expected {} values per observation, state has side {}",
                l, s.obs_side
            )));
        }
        if self.cfg.arch == Arch::Graphnet {
            if s.adjacency.node_ids.len() != s.n_leaves() {
                return Err(AgentError::GraphMismatch { nodes: s.adjacency.node_ids.len(), observations: s.n_leaves() });
            }
            if s.adjacency.edge_attr_dim() != self.edge_attr_dim {
                return Err(AgentError::StateMismatch(format!(
                    "edge attribute width {} but policy expects {}",
                    s.adjacency.edge_attr_dim(),
                    self.edge_attr_dim
                )));
            }
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph<'_>, name: &str) -> Result<Var, AgentError> {
        Ok(g.param(self.params.id(name)?))
    }

    /// Conv front end on a stack of observations, `[rows, d]` after ReLU.
    fn conv(&self, g: &mut Graph<'_>, obs: Vec<f64>, rows: usize) -> Result<Var, AgentError> {
        let x = g.input(obs, &[rows, self.geom.image_len()])?;
        let f = self.p(g, "conv.filters")?;
        let b = self.p(g, "conv.bias")?;
        let c = g.conv2d(x, f, b, self.geom)?;
        Ok(g.relu(c))
    }

    fn dense(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, AgentError> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        Ok(g.dense(x, w, b)?)
    }

    /// Two-layer ReLU net used for the interaction-network updates.
    fn mlp(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, AgentError> {
        let h = self.dense(g, x, &format!("{prefix}.l1"))?;
        let h = g.relu(h);
        let o = self.dense(g, h, &format!("{prefix}.l2"))?;
        Ok(g.relu(o))
    }

    /// Concatenated raw logits for every state, with segment offsets.
    pub fn logits(&self, g: &mut Graph<'_>, states: &[&GlobalState]) -> Result<(Var, Vec<usize>), AgentError> {
        if states.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        for s in states {
            self.check_state(s)?;
        }
        let mut offsets = Vec::with_capacity(states.len() + 1);
        offsets.push(0);
        for s in states {
            offsets.push(offsets.last().unwrap() + s.n_actions());
        }
        let logits = match self.cfg.arch {
            Arch::Ipn => self.ipn_logits(g, states)?,
            Arch::Hypernet => self.hyper_logits(g, states)?,
            Arch::Graphnet => self.graph_logits(g, states)?,
        };
        Ok((logits, offsets))
    }

    fn ipn_logits(&self, g: &mut Graph<'_>, states: &[&GlobalState]) -> Result<Var, AgentError> {
        let rows: usize = states.iter().map(|s| s.n_actions()).sum();
        let obs: Vec<f64> = states.iter().flat_map(|s| s.observations.iter().copied()).collect();
        let x = self.conv(g, obs, rows)?;
        let h = self.dense(g, x, "ipn.l1")?;
        let h = g.relu(h);
        let h = self.dense(g, h, "ipn.l2")?;
        let h = g.relu(h);
        let out = self.dense(g, h, "ipn.out")?;
        Ok(g.reshape(out, &[rows])?)
    }

    fn hyper_logits(&self, g: &mut Graph<'_>, states: &[&GlobalState]) -> Result<Var, AgentError> {
        let rows: usize = states.iter().map(|s| s.n_actions()).sum();
        let obs: Vec<f64> = states.iter().flat_map(|s| s.observations.iter().copied()).collect();
        let s_all = self.conv(g, obs, rows)?;
        let seg: Vec<usize> = states.iter().enumerate().flat_map(|(k, s)| std::iter::repeat_n(k, s.n_actions())).collect();
        let u = self.p(g, "hyper.u")?;
        let v = self.p(g, "hyper.v")?;
        let y = self.p(g, "hyper.y")?;
        let w_out = self.p(g, "hyper.out.w")?;
        let b_out = self.p(g, "hyper.out.b")?;
        let su = g.matmul(s_all, u)?;
        let su_sum = g.segment_sum(su, &seg, states.len())?;
        let sy = g.matmul(s_all, y)?;
        let bias = g.segment_sum(sy, &seg, states.len())?;
        let (d, h) = (self.feature_dim(), self.cfg.hypernet_h);
        let mut parts = Vec::with_capacity(states.len());
        let mut start = 0;
        for (k, st) in states.iter().enumerate() {
            let n = st.n_actions();
            let zk = g.slice_rows(su_sum, k, k + 1)?;
            let wflat = g.matmul(zk, v)?;
            let w = g.reshape(wflat, &[d, h])?;
            let sk = g.slice_rows(s_all, start, start + n)?;
            let bk = g.slice_rows(bias, k, k + 1)?;
            let hid = g.matmul(sk, w)?;
            let hid = g.add_row(hid, bk)?;
            let hid = g.relu(hid);
            let out = g.dense(hid, w_out, b_out)?;
            parts.push(g.reshape(out, &[1, n])?);
            start += n;
        }
        let all = g.concat_cols(&parts)?;
        Ok(g.reshape(all, &[rows])?)
    }

    fn graph_logits(&self, g: &mut Graph<'_>, states: &[&GlobalState]) -> Result<Var, AgentError> {
        let nodes: usize = states.iter().map(|s| s.n_leaves()).sum();
        let l = self.geom.image_len();
        let obs: Vec<f64> = states.iter().flat_map(|s| s.observations[l..].iter().copied()).collect();
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut onehot = Vec::new();
        let mut base = 0;
        for s in states {
            for e in &s.adjacency.edges {
                senders.push(base + e.sender);
                receivers.push(base + e.receiver);
                let mut v = vec![0.0; self.edge_attr_dim];
                v[s.adjacency.one_hot_index(e)] = 1.0;
                onehot.extend(v);
            }
            base += s.n_leaves();
        }
        let n_edges = senders.len();
        let conv = self.conv(g, obs, nodes)?;
        let enc = self.dense(g, conv, "graph.enc")?;
        let mut v = g.relu(enc);
        let e_in = g.input(onehot, &[n_edges, self.edge_attr_dim])?;
        let e_enc = self.dense(g, e_in, "graph.edge_enc")?;
        let mut e = g.relu(e_enc);
        for block in ["core", "core", "out"] {
            let vr = g.gather_rows(v, &receivers)?;
            let vs = g.gather_rows(v, &senders)?;
            let ex = g.concat_cols(&[e, vr, vs])?;
            e = self.mlp(g, ex, &format!("graph.{block}.edge"))?;
            let agg = g.segment_sum(e, &receivers, nodes)?;
            let vx = g.concat_cols(&[agg, v])?;
            v = self.mlp(g, vx, &format!("graph.{block}.node"))?;
        }
        let x = self.dense(g, v, "graph.psi")?;
        let x = g.reshape(x, &[nodes])?;
        let dummy = self.p(g, "graph.dummy")?;
        let both = g.concat_cols(&[dummy, x])?;
        let both = g.reshape(both, &[nodes + 1])?;
        // Interleave: each state gets the shared dummy logit, then its nodes.
        let mut idx = Vec::with_capacity(nodes + states.len());
        let mut base = 1;
        for s in states {
            idx.push(0);
            idx.extend(base..base + s.n_leaves());
            base += s.n_leaves();
        }
        Ok(g.gather(both, &idx)?)
    }

    /// Masked log-probabilities for a batch of states.
    pub fn log_probs(&self, g: &mut Graph<'_>, states: &[&GlobalState]) -> Result<Forward, AgentError> {
        let (logits, offsets) = self.logits(g, states)?;
        let flat_logits_len = *offsets.last().unwrap();
        let logits = g.reshape(logits, &[flat_logits_len])?;
        let mask: Vec<bool> = states.iter().flat_map(|s| s.policy_mask()).collect();
        let log_probs = g.log_softmax_segments(logits, &offsets, &mask)?;
        Ok(Forward { log_probs, offsets })
    }

    /// Action probabilities of one state; masked entries are exactly 0.
    pub fn probs(&self, state: &GlobalState) -> Result<Vec<f64>, AgentError> {
        let mut g = Graph::new(&self.params);
        let f = self.log_probs(&mut g, &[state])?;
        Ok(g.value(f.log_probs).iter().map(|v| v.exp()).collect())
    }

    /// `loss = −Σ_i w_i log π(a_i | s_i)` and its gradient.
    pub fn loss_and_grad(&self, states: &[&GlobalState], actions: &[usize], weights: &[f64]) -> Result<(f64, Grads), AgentError> {
        if states.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        if actions.len() != states.len() || weights.len() != states.len() {
            return Err(AgentError::StateMismatch("states, actions and weights differ in length".into()));
        }
        let mut total = Grads::zeros_like(&self.params);
        let mut loss = 0.0;
        let chunk = self.cfg.grad_chunk;
        for start in (0..states.len()).step_by(chunk) {
            let end = (start + chunk).min(states.len());
            let mut g = Graph::new(&self.params);
            let f = self.log_probs(&mut g, &states[start..end])?;
            let idx = action_indices(&f.offsets, &actions[start..end], &states[start..end])?;
            let picked = g.gather(f.log_probs, &idx)?;
            let w: Vec<f64> = weights[start..end].iter().map(|w| -w).collect();
            let l = g.weighted_sum(picked, &w)?;
            loss += g.scalar(l);
            total.add_assign(&g.backward(l)?);
        }
        Ok((loss, total))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyMeta {
    policy: PolicyConfig,
    obs_side: usize,
    d_max: u32,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Policy {
    pub fn to_checkpoint(&self, config_hash: &str, extra: serde_json::Value) -> Checkpoint {
        let meta = PolicyMeta {
            policy: self.cfg.clone(),
            obs_side: self.geom.height,
            d_max: ((self.edge_attr_dim - 1) / 2) as u32,
            extra,
        };
        let meta = serde_json::to_value(meta).expect("policy meta serializes");
        Checkpoint::new(self.arch().name(), config_hash, meta, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AgentError> {
        let meta: PolicyMeta = serde_json::from_value(ck.header.meta.clone())
            .map_err(|e| AgentError::InvalidConfig(format!("checkpoint metadata: {e}")))?;
        if meta.policy.arch.name() != ck.header.arch {
            return Err(AgentError::ArchMismatch { expected: meta.policy.arch.name().into(), found: ck.header.arch.clone() });
        }
        let mut p = Policy::new(meta.policy, meta.obs_side, meta.d_max, 0)?;
        ck.restore_into(&mut p.params)?;
        Ok(p)
    }

    /// Caller-supplied metadata stored alongside a checkpoint.
    pub fn checkpoint_extra(ck: &Checkpoint) -> serde_json::Value {
        ck.header.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null)
    }
}

fn add_mlp(ps: &mut ParamSet, prefix: &str, input: usize, output: usize, seed: u64) -> Result<(), AgentError> {
    ps.add(&format!("{prefix}.l1.w"), &[input, output], he(input), seed)?;
    ps.add(&format!("{prefix}.l1.b"), &[output], Init::Zeros, seed)?;
    ps.add(&format!("{prefix}.l2.w"), &[output, output], he(output), seed)?;
    ps.add(&format!("{prefix}.l2.b"), &[output], Init::Zeros, seed)?;
    Ok(())
}

/// Flat indices of the taken actions within a batch forward pass.
pub fn action_indices(offsets: &[usize], actions: &[usize], states: &[&GlobalState]) -> Result<Vec<usize>, AgentError> {
    actions
        .iter()
        .zip(states)
        .enumerate()
        .map(|(k, (&a, s))| {
            if a >= s.n_actions() {
                Err(AgentError::StateMismatch(format!("action {a} out of {} in batch entry {k}", s.n_actions())))
            } else {
                Ok(offsets[k] + a)
            }
        })
        .collect()
}

/// Behavior distribution `(1−ε)π + ε·Uniform(valid)`.
pub fn behavior_probs(probs: &[f64], valid: &[bool], eps: f64) -> Result<Vec<f64>, AgentError> {
    let k = valid.iter().filter(|&&v| v).count();
    if k == 0 {
        return Err(AgentError::NoValidAction);
    }
    let u = eps / k as f64;
    Ok(probs
        .iter()
        .zip(valid)
        .map(|(&p, &v)| (1.0 - eps) * p + if v { u } else { 0.0 })
        .collect())
}

/// Sample from the ε-mixed behavior policy; returns the action and its
/// behavior probability.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], valid: &[bool], eps: f64, rng: &mut R) -> Result<(usize, f64), AgentError> {
    let b = behavior_probs(probs, valid, eps)?;
    let total: f64 = b.iter().sum();
    let r = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in b.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if r < acc {
                return Ok((i, p));
            }
        }
    }
    Ok((last, b[last]))
}

/// Most probable action, ties to the lowest index.
pub fn greedy_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

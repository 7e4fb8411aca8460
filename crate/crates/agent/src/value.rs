//! State-value critic for PPO: the shared conv encoder, a per-observation
//! dense head, mean-pooled over the state's observations.

use rlamr_core::env::OBS_CHANNELS;
use rlamr_core::GlobalState;
use rlamr_nn::{ConvGeom, Graph, Init, ParamSet, Var};

use crate::AgentError;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    geom: ConvGeom,
    params: ParamSet,
}

impl ValueNet {
    pub fn new(obs_side: usize, filters: usize, kernel: usize, stride: usize, hidden: usize, seed: u64) -> Result<Self, AgentError> {
        if kernel > obs_side || filters == 0 || hidden == 0 || stride == 0 {
            return Err(AgentError::InvalidConfig("value net dimensions".into()));
        }
        let geom = ConvGeom { height: obs_side, width: obs_side, channels: OBS_CHANNELS, kernel, stride };
        let pl = geom.patch_len();
        let d = geom.out_height() * geom.out_width() * filters;
        let mut ps = ParamSet::new();
        ps.add("value.conv.filters", &[pl, filters], Init::TruncatedNormal((2.0 / pl as f64).sqrt()), seed)?;
        ps.add("value.conv.bias", &[filters], Init::Zeros, seed)?;
        ps.add("value.l1.w", &[d, hidden], Init::TruncatedNormal((2.0 / d as f64).sqrt()), seed)?;
        ps.add("value.l1.b", &[hidden], Init::Zeros, seed)?;
        ps.add("value.out.w", &[hidden, 1], Init::TruncatedNormal(0.01), seed)?;
        ps.add("value.out.b", &[1], Init::Zeros, seed)?;
        Ok(Self { geom, params: ps })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `V(s)` for each state, shape `[states]`.
    pub fn values(&self, g: &mut Graph<'_>, states: &[&GlobalState]) -> Result<Var, AgentError> {
        if states.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let l = self.geom.image_len();
        let rows: usize = states.iter().map(|s| s.n_actions()).sum();
        let mut obs = Vec::with_capacity(rows * l);
        let mut seg = Vec::with_capacity(rows);
        for (k, s) in states.iter().enumerate() {
            if s.obs_len() != l {
                return Err(AgentError::StateMismatch("observation size".into()));
            }
            obs.extend_from_slice(&s.observations);
            seg.extend(std::iter::repeat_n(k, s.n_actions()));
        }
        let p = |g: &mut Graph<'_>, n: &str| -> Result<Var, AgentError> { Ok(g.param(self.params.id(n)?)) };
        let x = g.input(obs, &[rows, l])?;
        let (f, b) = (p(g, "value.conv.filters")?, p(g, "value.conv.bias")?);
        let c = g.conv2d(x, f, b, self.geom)?;
        let c = g.relu(c);
        let (w1, b1) = (p(g, "value.l1.w")?, p(g, "value.l1.b")?);
        let h = g.dense(c, w1, b1)?;
        let h = g.relu(h);
        let (wo, bo) = (p(g, "value.out.w")?, p(g, "value.out.b")?);
        let per = g.dense(h, wo, bo)?;
        let pooled = g.segment_mean(per, &seg, states.len())?;
        Ok(g.reshape(pooled, &[states.len()])?)
    }

    pub fn predict(&self, state: &GlobalState) -> Result<f64, AgentError> {
        let mut g = Graph::new(&self.params);
        let v = self.values(&mut g, &[state])?;
        Ok(g.scalar(v))
    }
}

//! Heuristic and oracle refinement selectors.
//!
//! `zz_*` only sees the discrete solution; `true_error_select` and
//! `greedy_optimal_select` read the exact solution and are evaluation
//! oracles only.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::FeFunction;
use crate::env::{AmrEnv, EnvError};
use crate::functions::wrap_unit;

/// Recovered-gradient error indicators `η_i²`, one per leaf.
///
/// The recovered gradient is interpolated at each leaf's Lagrange nodes
/// from the average of `∇u_h` over every leaf whose closure holds the node;
/// `η_i²` is the squared L² distance between it and `∇u_h` on leaf `i`.
pub fn zz_indicators(fe: &FeFunction) -> Vec<f64> {
    let mesh = fe.mesh();
    let basis = fe.basis();
    let n1 = basis.n1();
    let nodes = basis.nodes();
    let eps = 1e-7 * mesh.h_min();
    let periodic = mesh.periodic();
    let qp = basis.quad_points();
    let qw = basis.quad_weights();
    let nq = qp.len();
    let mut lx = vec![0.0; n1];
    let mut ly = vec![0.0; n1];
    let mut owners: Vec<usize> = Vec::with_capacity(4);
    let mut out = Vec::with_capacity(mesh.len());
    let mut gnodes = vec![[0.0; 2]; n1 * n1];
    for pos in 0..mesh.len() {
        let b = fe.bounds_at(pos);
        for j in 0..n1 {
            let y = b.y0 + b.hy() * nodes[j];
            for i in 0..n1 {
                let x = b.x0 + b.hx() * nodes[i];
                owners.clear();
                for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                    let (mut px, mut py) = (x + sx * eps, y + sy * eps);
                    if periodic {
                        px = wrap_unit(px);
                        py = wrap_unit(py);
                    }
                    if let Some(o) = mesh.locate(px, py) {
                        if !owners.contains(&o) {
                            owners.push(o);
                        }
                    }
                }
                owners.sort_unstable();
                let mut g = [0.0; 2];
                for &o in &owners {
                    // Evaluate the owner's gradient at its own copy of the
                    // node (the periodic image if it lies across the wrap).
                    let ob = fe.bounds_at(o);
                    let nx = nearest_image(x, ob.x0, ob.x1, periodic);
                    let ny = nearest_image(y, ob.y0, ob.y1, periodic);
                    let go = fe.gradient_in(o, nx, ny);
                    g[0] += go[0];
                    g[1] += go[1];
                }
                let k = owners.len().max(1) as f64;
                gnodes[j * n1 + i] = [g[0] / k, g[1] / k];
            }
        }
        let mut acc = 0.0;
        for bq in 0..nq {
            basis.values(qp[bq], &mut ly);
            let y = b.y0 + b.hy() * qp[bq];
            for a in 0..nq {
                basis.values(qp[a], &mut lx);
                let x = b.x0 + b.hx() * qp[a];
                let mut gr = [0.0; 2];
                for j in 0..n1 {
                    for i in 0..n1 {
                        let w = lx[i] * ly[j];
                        gr[0] += w * gnodes[j * n1 + i][0];
                        gr[1] += w * gnodes[j * n1 + i][1];
                    }
                }
                let gh = fe.gradient_in(pos, x, y);
                let d0 = gr[0] - gh[0];
                let d1 = gr[1] - gh[1];
                acc += qw[a] * qw[bq] * (d0 * d0 + d1 * d1);
            }
        }
        out.push(acc * b.area());
    }
    out
}

fn nearest_image(v: f64, lo: f64, hi: f64, periodic: bool) -> f64 {
    if !periodic {
        return v;
    }
    let mid = 0.5 * (lo + hi);
    let mut best = v;
    for shift in [-1.0, 1.0] {
        if ((v + shift) - mid).abs() < (best - mid).abs() {
            best = v + shift;
        }
    }
    best
}

/// Index of the largest score among valid leaf actions (action = leaf + 1),
/// ties to the lowest action; 0 when no leaf action is valid.
pub fn argmax_valid(scores: &[f64], valid: &[bool]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, &s) in scores.iter().enumerate() {
        if valid[i + 1] && s > best_score {
            best = i + 1;
            best_score = s;
        }
    }
    best
}

pub fn zz_select(fe: &FeFunction, valid: &[bool]) -> usize {
    argmax_valid(&zz_indicators(fe), valid)
}

pub fn true_error_select(env: &AmrEnv) -> usize {
    argmax_valid(env.element_sq_errors(), &env.valid_mask())
}

/// One-step lookahead over every valid action including 0; argmin of the
/// resulting error, ties to the lowest action.
pub fn greedy_optimal_select(env: &AmrEnv) -> Result<usize, EnvError> {
    let valid = env.valid_mask();
    let mut best = 0;
    let mut best_e = f64::INFINITY;
    for (a, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        let e = env.lookahead_error(a)?;
        if e < best_e {
            best = a;
            best_e = e;
        }
    }
    Ok(best)
}

pub fn random_select<R: Rng + ?Sized>(valid: &[bool], rng: &mut R) -> usize {
    let choices: Vec<usize> = (1..valid.len()).filter(|&i| valid[i]).collect();
    if choices.is_empty() {
        0
    } else {
        choices[rng.gen_range(0..choices.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Zz,
    TrueError,
    GreedyOptimal,
    Random,
    NoRefine,
}

impl Baseline {
    pub const ALL: [Baseline; 5] =
        [Baseline::Zz, Baseline::TrueError, Baseline::GreedyOptimal, Baseline::Random, Baseline::NoRefine];

    pub fn select<R: Rng + ?Sized>(self, env: &AmrEnv, rng: &mut R) -> Result<usize, EnvError> {
        Ok(match self {
            Baseline::Zz => zz_select(env.solution(), &env.valid_mask()),
            Baseline::TrueError => true_error_select(env),
            Baseline::GreedyOptimal => greedy_optimal_select(env)?,
            Baseline::Random => random_select(&env.valid_mask(), rng),
            Baseline::NoRefine => 0,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Zz => "zz",
            Baseline::TrueError => "true-error",
            Baseline::GreedyOptimal => "greedy-optimal",
            Baseline::Random => "random",
            Baseline::NoRefine => "no-refine",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown baseline '{s}'"))
    }
}

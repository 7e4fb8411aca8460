//! Upwind discontinuous Galerkin solver for `u_t + ∇·(c u) = 0` on the
//! periodic unit square, with SSP-RK3 time stepping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{FeFunction, NodalBasis};
use crate::mesh::{QuadMesh, Side};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("advection requires a periodic mesh")]
    NonPeriodicMesh,
    #[error("invalid advection config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvectionConfig {
    pub c: [f64; 2],
    pub cfl: f64,
    pub rl_step_time: f64,
}

impl Default for AdvectionConfig {
    fn default() -> Self {
        Self { c: [1.0, 0.0], cfl: 0.3, rl_step_time: 0.1 }
    }
}

impl AdvectionConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(SolverError::InvalidConfig(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.rl_step_time > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "rl_step_time must be positive, got {}",
                self.rl_step_time
            )));
        }
        Ok(())
    }

    pub fn speed(&self) -> f64 {
        self.c[0].hypot(self.c[1])
    }
}

/// Stable explicit time step for order-`p` elements on `mesh`.
pub fn dt_cfl(mesh: &QuadMesh, cfg: &AdvectionConfig, p: usize) -> f64 {
    let speed = cfg.speed();
    if speed == 0.0 {
        return cfg.rl_step_time;
    }
    cfg.cfl * mesh.h_min() / (speed * (2 * p + 1) as f64)
}

/// Number of equal substeps used to cover `duration`.
pub fn substep_count(duration: f64, dt: f64) -> usize {
    if duration <= 0.0 {
        return 0;
    }
    // Tolerate round-off so that e.g. 0.1 / 0.0075 does not gain a step.
    (duration / dt - 1e-9).ceil().max(1.0) as usize
}

/// One quadrature point on a face: the upwind trace is taken from
/// `source`, and `weight` already folds in `c·n`, segment length and the
/// Gauss weight.
#[derive(Debug, Clone)]
struct FacePoint {
    target: usize,
    source: usize,
    weight: f64,
    /// Basis values of `source` at the point.
    src_vals: Vec<f64>,
    /// Basis values of `target` at the point.
    tgt_vals: Vec<f64>,
}

/// Precomputed operator for one mesh and velocity.
#[derive(Debug, Clone)]
pub struct DgOperator {
    c: [f64; 2],
    n1: usize,
    /// `bq[a * n1 + i] = L_i(g_a)`.
    bq: Vec<f64>,
    /// `dq[a * n1 + i] = L_i'(g_a)`.
    dq: Vec<f64>,
    wq: Vec<f64>,
    minv: Vec<f64>,
    /// `(hx, hy)` per leaf.
    sizes: Vec<[f64; 2]>,
    faces: Vec<FacePoint>,
}

impl DgOperator {
    pub fn new(mesh: &QuadMesh, basis: &NodalBasis, c: [f64; 2]) -> Self {
        let n1 = basis.n1();
        let qp = basis.quad_points();
        let q = qp.len();
        let mut bq = vec![0.0; q * n1];
        let mut dq = vec![0.0; q * n1];
        for (a, g) in qp.iter().enumerate() {
            basis.values(*g, &mut bq[a * n1..(a + 1) * n1]);
            basis.derivatives(*g, &mut dq[a * n1..(a + 1) * n1]);
        }
        let sizes: Vec<[f64; 2]> = mesh
            .leaves()
            .iter()
            .map(|e| {
                let b = mesh.bounds(e);
                [b.hx(), b.hy()]
            })
            .collect();
        let mut faces = Vec::new();
        let mut lt = vec![0.0; n1];
        let mut ln = vec![0.0; n1];
        let mut ltan_t = vec![0.0; n1];
        let mut ltan_n = vec![0.0; n1];
        for (pos, e) in mesh.leaves().iter().enumerate() {
            let b = mesh.bounds(e);
            for seg in mesh.face_neighbors_at(pos) {
                let nrm = seg.side.normal();
                let cn = c[0] * nrm[0] + c[1] * nrm[1];
                if cn == 0.0 {
                    continue;
                }
                let nb = mesh.bounds(&mesh.leaves()[seg.neighbor_pos]);
                // Normal-direction reference coordinate of the face for the
                // element and for its neighbor (opposite side).
                let (xi_t, xi_n) = match seg.side {
                    Side::West | Side::South => (0.0, 1.0),
                    Side::East | Side::North => (1.0, 0.0),
                };
                basis.values(xi_t, &mut lt);
                basis.values(xi_n, &mut ln);
                let vertical = matches!(seg.side, Side::West | Side::East);
                let len = seg.length();
                for (g, w) in qp.iter().zip(basis.quad_weights()) {
                    let s = seg.start + len * g;
                    let (t_ref, n_ref) = if vertical {
                        ((s - b.y0) / b.hy(), (s - nb.y0) / nb.hy())
                    } else {
                        ((s - b.x0) / b.hx(), (s - nb.x0) / nb.hx())
                    };
                    basis.values(t_ref, &mut ltan_t);
                    basis.values(n_ref, &mut ltan_n);
                    let tensor = |normal: &[f64], tangential: &[f64]| -> Vec<f64> {
                        let mut v = vec![0.0; n1 * n1];
                        for j in 0..n1 {
                            for i in 0..n1 {
                                v[j * n1 + i] = if vertical {
                                    normal[i] * tangential[j]
                                } else {
                                    tangential[i] * normal[j]
                                };
                            }
                        }
                        v
                    };
                    let tgt_vals = tensor(&lt, &ltan_t);
                    let (source, src_vals) = if cn > 0.0 {
                        (pos, tgt_vals.clone())
                    } else {
                        (seg.neighbor_pos, tensor(&ln, &ltan_n))
                    };
                    faces.push(FacePoint { target: pos, source, weight: cn * len * w, src_vals, tgt_vals });
                }
            }
        }
        Self {
            c,
            n1,
            bq,
            dq,
            wq: basis.quad_weights().to_vec(),
            minv: basis.mass_inv_1d().to_vec(),
            sizes,
            faces,
        }
    }

    /// `out ← M⁻¹ (volume − face)` for the coefficient vector `u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n1 = self.n1;
        let nd = n1 * n1;
        let q = self.wq.len();
        let mut r = vec![0.0; u.len()];
        let mut tmp = vec![0.0; n1 * q];
        let mut gx = vec![0.0; q * q];
        let mut gy = vec![0.0; q * q];
        for (pos, hs) in self.sizes.iter().enumerate() {
            let ue = &u[pos * nd..(pos + 1) * nd];
            // u at quadrature points, x contracted first.
            for j in 0..n1 {
                for a in 0..q {
                    let mut s = 0.0;
                    for i in 0..n1 {
                        s += self.bq[a * n1 + i] * ue[j * n1 + i];
                    }
                    tmp[j * q + a] = s;
                }
            }
            for bb in 0..q {
                for a in 0..q {
                    let mut s = 0.0;
                    for j in 0..n1 {
                        s += self.bq[bb * n1 + j] * tmp[j * q + a];
                    }
                    let w = self.wq[a] * self.wq[bb] * s;
                    gx[bb * q + a] = w * self.c[0] * hs[1];
                    gy[bb * q + a] = w * self.c[1] * hs[0];
                }
            }
            let re = &mut r[pos * nd..(pos + 1) * nd];
            for j in 0..n1 {
                for i in 0..n1 {
                    let mut s = 0.0;
                    for bb in 0..q {
                        let lyj = self.bq[bb * n1 + j];
                        let dyj = self.dq[bb * n1 + j];
                        for a in 0..q {
                            s += gx[bb * q + a] * lyj * self.dq[a * n1 + i]
                                + gy[bb * q + a] * dyj * self.bq[a * n1 + i];
                        }
                    }
                    re[j * n1 + i] = s;
                }
            }
        }
        for fp in &self.faces {
            let us = &u[fp.source * nd..(fp.source + 1) * nd];
            let mut hat = 0.0;
            for k in 0..nd {
                hat += fp.src_vals[k] * us[k];
            }
            let f = fp.weight * hat;
            let rt = &mut r[fp.target * nd..(fp.target + 1) * nd];
            for k in 0..nd {
                rt[k] -= f * fp.tgt_vals[k];
            }
        }
        for (pos, hs) in self.sizes.iter().enumerate() {
            let scale = 1.0 / (hs[0] * hs[1]);
            let re = &r[pos * nd..(pos + 1) * nd];
            let oe = &mut out[pos * nd..(pos + 1) * nd];
            for j in 0..n1 {
                for i in 0..n1 {
                    let mut s = 0.0;
                    for jj in 0..n1 {
                        let mj = self.minv[j * n1 + jj];
                        for ii in 0..n1 {
                            s += mj * self.minv[i * n1 + ii] * re[jj * n1 + ii];
                        }
                    }
                    oe[j * n1 + i] = scale * s;
                }
            }
        }
    }
}

/// Advance `fe` by `duration` with equal SSP-RK3 substeps no larger than
/// the CFL step of its mesh.
pub fn step(fe: &FeFunction, cfg: &AdvectionConfig, duration: f64) -> Result<FeFunction, SolverError> {
    let mut out = fe.clone();
    step_in_place(&mut out, cfg, duration)?;
    Ok(out)
}

pub fn step_in_place(fe: &mut FeFunction, cfg: &AdvectionConfig, duration: f64) -> Result<(), SolverError> {
    if !fe.mesh().periodic() {
        return Err(SolverError::NonPeriodicMesh);
    }
    cfg.validate()?;
    let dt_max = dt_cfl(fe.mesh(), cfg, fe.basis().order());
    let n = substep_count(duration, dt_max);
    if n == 0 || cfg.speed() == 0.0 {
        return Ok(());
    }
    let dt = duration / n as f64;
    let op = DgOperator::new(fe.mesh(), fe.basis(), cfg.c);
    let len = fe.coeffs().len();
    let mut k = vec![0.0; len];
    let mut u1 = vec![0.0; len];
    let mut u2 = vec![0.0; len];
    for _ in 0..n {
        let u = fe.coeffs_mut();
        op.apply(u, &mut k);
        for i in 0..len {
            u1[i] = u[i] + dt * k[i];
        }
        op.apply(&u1, &mut k);
        for i in 0..len {
            u2[i] = 0.75 * u[i] + 0.25 * (u1[i] + dt * k[i]);
        }
        op.apply(&u2, &mut k);
        for i in 0..len {
            u[i] = u[i] / 3.0 + 2.0 / 3.0 * (u2[i] + dt * k[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::ElementId;

    fn periodic(n: u32, d: u32) -> QuadMesh {
        QuadMesh::new_uniform(n, n, d, true).unwrap()
    }

    #[test]
    fn cfl_step_examples() {
        let cfg = AdvectionConfig::default();
        let mut m = periodic(8, 2);
        assert!((dt_cfl(&m, &cfg, 2) - 0.0075).abs() < 1e-15);
        m.refine(ElementId(0)).unwrap();
        assert!((dt_cfl(&m, &cfg, 2) - 0.00375).abs() < 1e-15);
        let still = AdvectionConfig { c: [0.0, 0.0], ..cfg };
        assert_eq!(dt_cfl(&m, &still, 2), 0.1);
        assert_eq!(substep_count(0.1, 0.0075), 14);
        assert_eq!(substep_count(0.075, 0.0075), 10);
        assert_eq!(substep_count(0.0, 0.0075), 0);
    }

    #[test]
    fn non_periodic_is_rejected() {
        let fe = FeFunction::zeros(QuadMesh::new_uniform(2, 2, 1, false).unwrap(), NodalBasis::new(2));
        assert_eq!(step(&fe, &AdvectionConfig::default(), 0.1).unwrap_err(), SolverError::NonPeriodicMesh);
    }

    #[test]
    fn zero_duration_is_identity() {
        let fe = FeFunction::interpolate(periodic(4, 1), NodalBasis::new(2), |x, y| x * y);
        let out = step(&fe, &AdvectionConfig::default(), 0.0).unwrap();
        assert_eq!(out.coeffs(), fe.coeffs());
    }

    #[test]
    fn operator_annihilates_constants_on_hanging_mesh() {
        let mut m = periodic(4, 2);
        m.refine(ElementId(5)).unwrap();
        m.refine(ElementId(17)).unwrap();
        let basis = NodalBasis::new(2);
        let fe = FeFunction::interpolate(m, basis.clone(), |_, _| 2.0);
        let op = DgOperator::new(fe.mesh(), &basis, [0.7, -0.4]);
        let mut out = vec![0.0; fe.coeffs().len()];
        op.apply(fe.coeffs(), &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-11), "{:?}", out.iter().cloned().fold(0.0, f64::max));
    }
}

//! Broken tensor-product Lagrange spaces on quadtree leaves.
//!
//! Each leaf carries `(p+1)²` nodal coefficients at equispaced reference
//! nodes, ordered with x fastest. There is no continuity across faces.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{Bounds, MeshError, MeshSnapshot, QuadMesh, RefineResult};
use crate::mesh::ElementId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeError {
    #[error("point ({x}, {y}) lies outside the unit square")]
    OutOfDomain { x: f64, y: f64 },
    #[error("meshes are not nested refinements of one another")]
    IncompatibleMeshes,
    #[error("basis orders differ ({0} vs {1})")]
    OrderMismatch(usize, usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Gauss-Legendre points and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one point");
    let mut pts = vec![0.0; n];
    let mut wts = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton iteration on P_n from the Chebyshev-like initial guess.
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, t);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        pts[i] = 0.5 * (1.0 - t);
        pts[n - 1 - i] = 0.5 * (1.0 + t);
        wts[i] = 0.5 * w;
        wts[n - 1 - i] = 0.5 * w;
    }
    (pts, wts)
}

fn legendre_with_derivative(n: usize, t: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = t;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (t * p1 - p0) / (t * t - 1.0);
    (p1, d)
}

/// Values of the 1D Lagrange cardinal functions through `nodes` at `x`.
pub fn lagrange_values(nodes: &[f64], x: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut v = 1.0;
        for (j, &xj) in nodes.iter().enumerate() {
            if j != i {
                v *= (x - xj) / (nodes[i] - xj);
            }
        }
        *o = v;
    }
}

/// Derivatives of the 1D Lagrange cardinal functions at `x`.
pub fn lagrange_derivatives(nodes: &[f64], x: f64, out: &mut [f64]) {
    let n = nodes.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            let mut term = 1.0 / (nodes[i] - nodes[k]);
            for j in 0..n {
                if j != i && j != k {
                    term *= (x - nodes[j]) / (nodes[i] - nodes[j]);
                }
            }
            sum += term;
        }
        *o = sum;
    }
}

/// Composite 1D rule: `[0,1]` split into `m` equal cells, each with the
/// base Gauss rule, plus basis values at every point.
#[derive(Debug, Clone)]
pub struct CompositeTable {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// `values[k * (p+1) + i]` is `L_i(points[k])`.
    pub values: Vec<f64>,
}

const MAX_LEVELS: usize = 17;

/// Reference element data: Lagrange nodes, Gauss rule and 1D mass matrix.
#[derive(Debug)]
pub struct NodalBasis {
    order: usize,
    nodes: Vec<f64>,
    quad_points: Vec<f64>,
    quad_weights: Vec<f64>,
    mass_inv_1d: Vec<f64>,
    composite: [OnceLock<CompositeTable>; MAX_LEVELS],
}

impl NodalBasis {
    /// Order-`p` basis with the default `p + 2` Gauss points per axis.
    pub fn new(order: usize) -> Arc<Self> {
        Self::with_quadrature(order, order + 2)
    }

    pub fn with_quadrature(order: usize, q: usize) -> Arc<Self> {
        let nodes: Vec<f64> = if order == 0 {
            vec![0.5]
        } else {
            (0..=order).map(|i| i as f64 / order as f64).collect()
        };
        let (quad_points, quad_weights) = gauss_legendre(q);
        let n = order + 1;
        let mut mass = vec![0.0; n * n];
        let mut vals = vec![0.0; n];
        // Exact for degree 2p when q >= p + 1.
        let (mp, mw) = gauss_legendre(order + 1);
        for (x, w) in mp.iter().zip(&mw) {
            lagrange_values(&nodes, *x, &mut vals);
            for i in 0..n {
                for j in 0..n {
                    mass[i * n + j] += w * vals[i] * vals[j];
                }
            }
        }
        let mass_inv_1d = invert_small(&mass, n);
        Arc::new(Self {
            order,
            nodes,
            quad_points,
            quad_weights,
            mass_inv_1d,
            composite: Default::default(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Nodes per axis, `p + 1`.
    pub fn n1(&self) -> usize {
        self.order + 1
    }

    /// Coefficients per element, `(p + 1)²`.
    pub fn ndofs(&self) -> usize {
        self.n1() * self.n1()
    }

    pub fn quad_points(&self) -> &[f64] {
        &self.quad_points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Inverse of the 1D reference mass matrix on `[0,1]`, row-major.
    pub fn mass_inv_1d(&self) -> &[f64] {
        &self.mass_inv_1d
    }

    pub fn values(&self, x: f64, out: &mut [f64]) {
        lagrange_values(&self.nodes, x, out)
    }

    pub fn derivatives(&self, x: f64, out: &mut [f64]) {
        lagrange_derivatives(&self.nodes, x, out)
    }

    /// Composite rule with `2^level` cells per axis.
    pub fn composite(&self, level: u32) -> &CompositeTable {
        self.composite[level as usize].get_or_init(|| {
            let m = 1usize << level;
            let q = self.quad_points.len();
            let n1 = self.n1();
            let mut points = Vec::with_capacity(m * q);
            let mut weights = Vec::with_capacity(m * q);
            for c in 0..m {
                for (g, w) in self.quad_points.iter().zip(&self.quad_weights) {
                    points.push((c as f64 + g) / m as f64);
                    weights.push(w / m as f64);
                }
            }
            let mut values = vec![0.0; points.len() * n1];
            for (k, x) in points.iter().enumerate() {
                self.values(*x, &mut values[k * n1..(k + 1) * n1]);
            }
            CompositeTable { points, weights, values }
        })
    }

    /// Evaluate a local expansion at reference coordinates.
    pub fn eval_local(&self, coeffs: &[f64], xi: f64, eta: f64) -> f64 {
        let n1 = self.n1();
        let mut lx = [0.0; 16];
        let mut ly = [0.0; 16];
        self.values(xi, &mut lx[..n1]);
        self.values(eta, &mut ly[..n1]);
        let mut u = 0.0;
        for j in 0..n1 {
            let mut row = 0.0;
            for i in 0..n1 {
                row += lx[i] * coeffs[j * n1 + i];
            }
            u += ly[j] * row;
        }
        u
    }

    /// Reference-coordinate gradient `(∂/∂ξ, ∂/∂η)` of a local expansion.
    pub fn grad_local(&self, coeffs: &[f64], xi: f64, eta: f64) -> [f64; 2] {
        let n1 = self.n1();
        let mut lx = [0.0; 16];
        let mut ly = [0.0; 16];
        let mut dx = [0.0; 16];
        let mut dy = [0.0; 16];
        self.values(xi, &mut lx[..n1]);
        self.values(eta, &mut ly[..n1]);
        self.derivatives(xi, &mut dx[..n1]);
        self.derivatives(eta, &mut dy[..n1]);
        // Derivatives of the cardinal functions sum to zero, so shifting by
        // one coefficient keeps the result and makes constants exact.
        let c0 = coeffs[0];
        let mut g = [0.0; 2];
        for j in 0..n1 {
            for i in 0..n1 {
                let c = coeffs[j * n1 + i] - c0;
                g[0] += dx[i] * ly[j] * c;
                g[1] += lx[i] * dy[j] * c;
            }
        }
        g
    }
}

fn invert_small(a: &[f64], n: usize) -> Vec<f64> {
    // Gauss-Jordan with partial pivoting.
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| m[r * n + col].abs().total_cmp(&m[s * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        m[r * n + k] -= f * m[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    inv
}

/// Discrete function on a quadtree mesh: one nodal coefficient block per
/// leaf, in leaf state order.
#[derive(Debug, Clone)]
pub struct FeFunction {
    basis: Arc<NodalBasis>,
    mesh: QuadMesh,
    coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn zeros(mesh: QuadMesh, basis: Arc<NodalBasis>) -> Self {
        let coeffs = vec![0.0; mesh.len() * basis.ndofs()];
        Self { basis, mesh, coeffs }
    }

    /// Nodal interpolation of `f`.
    pub fn interpolate(mesh: QuadMesh, basis: Arc<NodalBasis>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut fe = Self::zeros(mesh, basis);
        for pos in 0..fe.mesh.len() {
            fe.interpolate_element(pos, &f);
        }
        fe
    }

    /// Overwrite one leaf's coefficients with nodal values of `f`.
    pub fn interpolate_element(&mut self, pos: usize, f: &impl Fn(f64, f64) -> f64) {
        let b = self.mesh.bounds(&self.mesh.leaves()[pos]);
        let n1 = self.basis.n1();
        let nd = self.basis.ndofs();
        let block = &mut self.coeffs[pos * nd..(pos + 1) * nd];
        for j in 0..n1 {
            let y = b.y0 + b.hy() * self.basis.nodes[j];
            for i in 0..n1 {
                let x = b.x0 + b.hx() * self.basis.nodes[i];
                block[j * n1 + i] = f(x, y);
            }
        }
    }

    pub fn basis(&self) -> &Arc<NodalBasis> {
        &self.basis
    }

    pub fn mesh(&self) -> &QuadMesh {
        &self.mesh
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn element_coeffs(&self, pos: usize) -> &[f64] {
        let nd = self.basis.ndofs();
        &self.coeffs[pos * nd..(pos + 1) * nd]
    }

    pub fn bounds_at(&self, pos: usize) -> Bounds {
        self.mesh.bounds(&self.mesh.leaves()[pos])
    }

    /// Evaluate leaf `pos`'s polynomial at a physical point (which may lie
    /// outside the leaf; the polynomial is extended).
    pub fn eval_in(&self, pos: usize, x: f64, y: f64) -> f64 {
        let b = self.bounds_at(pos);
        self.basis.eval_local(self.element_coeffs(pos), (x - b.x0) / b.hx(), (y - b.y0) / b.hy())
    }

    /// Physical gradient of leaf `pos`'s polynomial.
    pub fn gradient_in(&self, pos: usize, x: f64, y: f64) -> [f64; 2] {
        let b = self.bounds_at(pos);
        let g = self.basis.grad_local(self.element_coeffs(pos), (x - b.x0) / b.hx(), (y - b.y0) / b.hy());
        [g[0] / b.hx(), g[1] / b.hy()]
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64, FeError> {
        let pos = self.mesh.locate(x, y).ok_or(FeError::OutOfDomain { x, y })?;
        Ok(self.eval_in(pos, x, y))
    }

    /// `sqrt(Σ_leaves ∫ (u − f)²)` with the tensor Gauss rule on each leaf.
    pub fn l2_error(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        (0..self.mesh.len())
            .map(|pos| self.element_sq_error_at_level(pos, &f, 0))
            .sum::<f64>()
            .sqrt()
    }

    /// Squared error on one leaf with the Gauss rule applied on each of the
    /// `2^level × 2^level` sub-cells of the leaf.
    pub fn element_sq_error_at_level(&self, pos: usize, f: &impl Fn(f64, f64) -> f64, level: u32) -> f64 {
        let b = self.bounds_at(pos);
        let t = self.basis.composite(level);
        let n1 = self.basis.n1();
        let c = self.element_coeffs(pos);
        let npt = t.points.len();
        // Contract the x direction first: tmp[j][a] = Σ_i c[j][i] L_i(x_a).
        let mut tmp = vec![0.0; n1 * npt];
        for j in 0..n1 {
            for a in 0..npt {
                let mut s = 0.0;
                for i in 0..n1 {
                    s += c[j * n1 + i] * t.values[a * n1 + i];
                }
                tmp[j * npt + a] = s;
            }
        }
        let mut acc = 0.0;
        for bq in 0..npt {
            let y = b.y0 + b.hy() * t.points[bq];
            let ly = &t.values[bq * n1..(bq + 1) * n1];
            let mut row = 0.0;
            for a in 0..npt {
                let mut u = 0.0;
                for j in 0..n1 {
                    u += ly[j] * tmp[j * npt + a];
                }
                let x = b.x0 + b.hx() * t.points[a];
                let d = u - f(x, y);
                row += t.weights[a] * d * d;
            }
            acc += t.weights[bq] * row;
        }
        acc * b.area()
    }

    /// Squared error of leaf `pos` integrated at the resolution of mesh depth
    /// `depth`: leaves shallower than `depth` are split into sub-cells so
    /// that every leaf uses the same global point set.
    pub fn element_sq_error_refined(&self, pos: usize, f: &impl Fn(f64, f64) -> f64, depth: u32) -> f64 {
        let d = self.mesh.leaves()[pos].depth;
        self.element_sq_error_at_level(pos, f, depth.saturating_sub(d))
    }

    /// Per-leaf squared errors at a common quadrature depth.
    pub fn element_sq_errors_refined(&self, f: &impl Fn(f64, f64) -> f64, depth: u32) -> Vec<f64> {
        (0..self.mesh.len())
            .map(|pos| self.element_sq_error_refined(pos, f, depth))
            .collect()
    }

    /// L² error against `f` with every leaf integrated at quadrature depth
    /// `depth` (see [`element_sq_error_refined`](Self::element_sq_error_refined)).
    pub fn l2_error_refined(&self, f: impl Fn(f64, f64) -> f64, depth: u32) -> f64 {
        self.element_sq_errors_refined(&f, depth).iter().sum::<f64>().sqrt()
    }

    /// Broken L² norm of `a − b`, evaluated on the quadrature of whichever
    /// mesh is the finer of the two.
    pub fn l2_diff(a: &FeFunction, b: &FeFunction) -> Result<f64, FeError> {
        if a.basis.order() != b.basis.order() {
            return Err(FeError::OrderMismatch(a.basis.order(), b.basis.order()));
        }
        let (fine, coarse) = if a.mesh.refines(&b.mesh) {
            (a, b)
        } else if b.mesh.refines(&a.mesh) {
            (b, a)
        } else {
            return Err(FeError::IncompatibleMeshes);
        };
        let mut acc = 0.0;
        let qp = fine.basis.quad_points();
        let qw = fine.basis.quad_weights();
        for (pos, e) in fine.mesh.leaves().iter().enumerate() {
            let (xs, ys) = fine.mesh.fine_span(e);
            let cpos = coarse.mesh.locate_cell(xs[0], ys[0]);
            let bnd = fine.bounds_at(pos);
            let mut s = 0.0;
            for (gy, wy) in qp.iter().zip(qw) {
                let y = bnd.y0 + bnd.hy() * gy;
                for (gx, wx) in qp.iter().zip(qw) {
                    let x = bnd.x0 + bnd.hx() * gx;
                    let d = fine.basis.eval_local(fine.element_coeffs(pos), *gx, *gy) - coarse.eval_in(cpos, x, y);
                    s += wx * wy * d * d;
                }
            }
            acc += s * bnd.area();
        }
        Ok(acc.sqrt())
    }

    /// Prolongate onto `new_mesh`, which must refine this function's mesh.
    pub fn transfer(&self, new_mesh: &QuadMesh) -> Result<FeFunction, FeError> {
        if !new_mesh.refines(&self.mesh) {
            return Err(FeError::IncompatibleMeshes);
        }
        let mut out = FeFunction::zeros(new_mesh.clone(), self.basis.clone());
        let nd = self.basis.ndofs();
        for (pos, e) in new_mesh.leaves().iter().enumerate() {
            let (xs, ys) = new_mesh.fine_span(e);
            let old = self.mesh.locate_cell(xs[0], ys[0]);
            if self.mesh.leaves()[old].depth == e.depth {
                out.coeffs[pos * nd..(pos + 1) * nd].copy_from_slice(self.element_coeffs(old));
            } else {
                out.interpolate_element(pos, &|x, y| self.eval_in(old, x, y));
            }
        }
        Ok(out)
    }

    /// Refine one leaf and prolongate its polynomial onto the children.
    pub fn refine(&mut self, id: ElementId) -> Result<RefineResult, FeError> {
        let parent_pos = self.mesh.position_of(id).ok_or(MeshError::NotALeaf(id))?;
        let nd = self.basis.ndofs();
        let parent: Vec<f64> = self.element_coeffs(parent_pos).to_vec();
        let pb = self.bounds_at(parent_pos);
        let res = self.mesh.refine(id)?;
        let p = res.position;
        self.coeffs.splice(p * nd..(p + 1) * nd, std::iter::repeat_n(0.0, 4 * nd));
        let basis = self.basis.clone();
        for k in 0..4 {
            self.interpolate_element(p + k, &|x, y| {
                basis.eval_local(&parent, (x - pb.x0) / pb.hx(), (y - pb.y0) / pb.hy())
            });
        }
        Ok(res)
    }

    /// Exact integral over the domain.
    pub fn integral(&self) -> f64 {
        let qp = self.basis.quad_points();
        let qw = self.basis.quad_weights();
        let mut total = 0.0;
        for pos in 0..self.mesh.len() {
            let c = self.element_coeffs(pos);
            let mut s = 0.0;
            for (gy, wy) in qp.iter().zip(qw) {
                for (gx, wx) in qp.iter().zip(qw) {
                    s += wx * wy * self.basis.eval_local(c, *gx, *gy);
                }
            }
            total += s * self.bounds_at(pos).area();
        }
        total
    }

    /// `self ← self + alpha · other` on identical meshes.
    pub fn axpy(&mut self, alpha: f64, other: &FeFunction) {
        assert_eq!(self.coeffs.len(), other.coeffs.len(), "axpy on mismatched meshes");
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.coeffs.iter_mut().for_each(|c| *c *= alpha);
    }

    pub fn snapshot(&self) -> SolutionSnapshot {
        let nd = self.basis.ndofs();
        SolutionSnapshot {
            order: self.basis.order(),
            mesh: self.mesh.snapshot(),
            coeffs: self.coeffs.chunks(nd).map(|c| c.to_vec()).collect(),
        }
    }
}

/// Mesh snapshot plus per-leaf coefficient arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSnapshot {
    pub order: usize,
    pub mesh: MeshSnapshot,
    pub coeffs: Vec<Vec<f64>>,
}

impl SolutionSnapshot {
    /// Evaluate the snapshot's expansion on leaf `k` at reference coordinates.
    pub fn eval_local(&self, basis: &NodalBasis, k: usize, xi: f64, eta: f64) -> f64 {
        basis.eval_local(&self.coeffs[k], xi, eta)
    }
}

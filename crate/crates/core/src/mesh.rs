//! Quadtree of axis-aligned quadrilateral leaves over the unit square.
//!
//! The mesh starts as a `base_nx × base_ny` grid of depth-0 elements. Each
//! refinement splits one leaf isotropically into four children. No 2:1 balance
//! is enforced, so a face may be shared by leaves whose depths differ by up to
//! `d_max`.
//!
//! Point location and neighbor queries go through a dense lookup grid at the
//! finest admissible resolution (`2^d_max · base_n` cells per axis). Every
//! leaf covers an aligned square block of that grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh dimensions {nx}x{ny} (both must be >= 1)")]
    InvalidDimensions { nx: u32, ny: u32 },
    #[error("d_max = {0} exceeds the supported maximum of 16")]
    DepthTooLarge(u32),
    #[error("element {0} is not a leaf of this mesh")]
    NotALeaf(ElementId),
    #[error("element {0} is already at the maximum depth")]
    AtMaxDepth(ElementId),
}

/// Stable element identifier. Ids increase monotonically and are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub u32);

impl std::fmt::Display for ElementId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A leaf of the quadtree. At depth `d` the element spans
/// `[ix·hx, (ix+1)·hx] × [iy·hy, (iy+1)·hy]` with `hx = 1/(2^d · base_nx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Element {
    pub id: ElementId,
    pub depth: u32,
    pub ix: u32,
    pub iy: u32,
}

/// Axis-aligned bounding box of an element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn hx(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn hy(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.hx() * self.hy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    /// Outward unit normal.
    pub fn normal(self) -> [f64; 2] {
        match self {
            Side::West => [-1.0, 0.0],
            Side::East => [1.0, 0.0],
            Side::South => [0.0, -1.0],
            Side::North => [0.0, 1.0],
        }
    }
}

/// A maximal piece of one element side shared with a single neighbor.
///
/// `start..end` is the physical interval along the tangential axis (y for
/// West/East, x for South/North). Under periodic wrap the tangential
/// coordinate is the same on both sides of the face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceSegment {
    pub side: Side,
    pub neighbor: ElementId,
    pub neighbor_pos: usize,
    pub start: f64,
    pub end: f64,
}

impl FaceSegment {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Directed edge of the element adjacency graph, by leaf position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphEdge {
    pub sender: usize,
    pub receiver: usize,
    /// `depth(receiver) - depth(sender)`.
    pub depth_diff: i32,
}

/// Element adjacency graph in leaf state order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    pub node_ids: Vec<ElementId>,
    pub edges: Vec<GraphEdge>,
    pub d_max: u32,
}

impl AdjacencyGraph {
    /// Width of the depth-difference one-hot edge attribute.
    pub fn edge_attr_dim(&self) -> usize {
        2 * self.d_max as usize + 1
    }

    /// One-hot index of an edge's depth difference.
    pub fn one_hot_index(&self, edge: &GraphEdge) -> usize {
        (edge.depth_diff + self.d_max as i32) as usize
    }

    pub fn one_hot(&self, edge: &GraphEdge) -> Vec<f64> {
        let mut v = vec![0.0; self.edge_attr_dim()];
        v[self.one_hot_index(edge)] = 1.0;
        v
    }

    /// Graph with the same nodes and no edges.
    pub fn disconnected(&self) -> Self {
        Self {
            node_ids: self.node_ids.clone(),
            edges: Vec::new(),
            d_max: self.d_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineResult {
    /// Children in SW, SE, NW, NE order.
    pub child_ids: [ElementId; 4],
    /// Position of the SW child (the parent's former position).
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadMesh {
    base_nx: u32,
    base_ny: u32,
    d_max: u32,
    periodic: bool,
    leaves: Vec<Element>,
    next_id: u32,
    /// Leaf position by id; `NONE` for refined (dead) ids.
    position: Vec<u32>,
    /// Finest-level lookup grid, row-major with x fastest, holding leaf ids.
    cells: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl QuadMesh {
    pub fn new_uniform(base_nx: u32, base_ny: u32, d_max: u32, periodic: bool) -> Result<Self, MeshError> {
        if base_nx == 0 || base_ny == 0 {
            return Err(MeshError::InvalidDimensions { nx: base_nx, ny: base_ny });
        }
        if d_max > 16 {
            return Err(MeshError::DepthTooLarge(d_max));
        }
        let n = base_nx * base_ny;
        let mut leaves = Vec::with_capacity(n as usize);
        for iy in 0..base_ny {
            for ix in 0..base_nx {
                leaves.push(Element {
                    id: ElementId(iy * base_nx + ix),
                    depth: 0,
                    ix,
                    iy,
                });
            }
        }
        let s = 1u32 << d_max;
        let fine_nx = (base_nx * s) as usize;
        let fine_ny = (base_ny * s) as usize;
        let mut cells = vec![0u32; fine_nx * fine_ny];
        for (cy, row) in cells.chunks_mut(fine_nx).enumerate() {
            let iy = cy as u32 / s;
            for (cx, c) in row.iter_mut().enumerate() {
                *c = iy * base_nx + cx as u32 / s;
            }
        }
        Ok(Self {
            base_nx,
            base_ny,
            d_max,
            periodic,
            leaves,
            next_id: n,
            position: (0..n).collect(),
            cells,
        })
    }

    pub fn base_nx(&self) -> u32 {
        self.base_nx
    }

    pub fn base_ny(&self) -> u32 {
        self.base_ny
    }

    pub fn d_max(&self) -> u32 {
        self.d_max
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    pub fn leaves(&self) -> &[Element] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Leaf count of the fully refined mesh.
    pub fn max_leaves(&self) -> usize {
        self.fine_nx() * self.fine_ny()
    }

    pub fn fine_nx(&self) -> usize {
        (self.base_nx << self.d_max) as usize
    }

    pub fn fine_ny(&self) -> usize {
        (self.base_ny << self.d_max) as usize
    }

    pub fn position_of(&self, id: ElementId) -> Option<usize> {
        match self.position.get(id.0 as usize) {
            Some(&p) if p != NONE => Some(p as usize),
            _ => None,
        }
    }

    pub fn element(&self, id: ElementId) -> Option<&Element> {
        self.position_of(id).map(|p| &self.leaves[p])
    }

    pub fn bounds(&self, e: &Element) -> Bounds {
        let nx = (self.base_nx as f64) * (1u64 << e.depth) as f64;
        let ny = (self.base_ny as f64) * (1u64 << e.depth) as f64;
        Bounds {
            x0: e.ix as f64 / nx,
            x1: (e.ix + 1) as f64 / nx,
            y0: e.iy as f64 / ny,
            y1: (e.iy + 1) as f64 / ny,
        }
    }

    /// Half-open range of finest-grid cells covered by `e` along x and y.
    pub fn fine_span(&self, e: &Element) -> ([usize; 2], [usize; 2]) {
        let s = 1usize << (self.d_max - e.depth);
        let x0 = e.ix as usize * s;
        let y0 = e.iy as usize * s;
        ([x0, x0 + s], [y0, y0 + s])
    }

    /// Smallest leaf edge length over both axes.
    pub fn h_min(&self) -> f64 {
        let depth = self.leaves.iter().map(|e| e.depth).max().unwrap_or(0);
        let n = self.base_nx.max(self.base_ny) as f64 * (1u64 << depth) as f64;
        1.0 / n
    }

    #[inline]
    fn cell_leaf(&self, cx: usize, cy: usize) -> u32 {
        self.cells[cy * self.fine_nx() + cx]
    }

    /// Position of the leaf owning `(x, y)`. Leaves own half-open boxes
    /// `[x0, x1) × [y0, y1)`, closed on the domain's top and right edges.
    /// Returns `None` outside `[0,1]²`.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return None;
        }
        let fnx = self.fine_nx();
        let fny = self.fine_ny();
        let cx = ((x * fnx as f64) as usize).min(fnx - 1);
        let cy = ((y * fny as f64) as usize).min(fny - 1);
        Some(self.position[self.cell_leaf(cx, cy) as usize] as usize)
    }

    /// Position of the leaf containing finest-grid cell `(cx, cy)`.
    pub fn locate_cell(&self, cx: usize, cy: usize) -> usize {
        self.position[self.cell_leaf(cx, cy) as usize] as usize
    }

    /// Split a leaf into four children (SW, SE, NW, NE) spliced in-place at
    /// the parent's position.
    pub fn refine(&mut self, id: ElementId) -> Result<RefineResult, MeshError> {
        let pos = self.position_of(id).ok_or(MeshError::NotALeaf(id))?;
        let parent = self.leaves[pos];
        if parent.depth >= self.d_max {
            return Err(MeshError::AtMaxDepth(id));
        }
        let base = self.next_id;
        self.next_id += 4;
        let d = parent.depth + 1;
        let children = [
            Element { id: ElementId(base), depth: d, ix: 2 * parent.ix, iy: 2 * parent.iy },
            Element { id: ElementId(base + 1), depth: d, ix: 2 * parent.ix + 1, iy: 2 * parent.iy },
            Element { id: ElementId(base + 2), depth: d, ix: 2 * parent.ix, iy: 2 * parent.iy + 1 },
            Element { id: ElementId(base + 3), depth: d, ix: 2 * parent.ix + 1, iy: 2 * parent.iy + 1 },
        ];
        self.leaves.splice(pos..pos + 1, children);
        self.position[id.0 as usize] = NONE;
        self.position.resize(self.next_id as usize, NONE);
        for (p, e) in self.leaves.iter().enumerate().skip(pos) {
            self.position[e.id.0 as usize] = p as u32;
        }
        let fnx = self.fine_nx();
        for c in &children {
            let (xs, ys) = self.fine_span(c);
            for cy in ys[0]..ys[1] {
                self.cells[cy * fnx + xs[0]..cy * fnx + xs[1]].fill(c.id.0);
            }
        }
        Ok(RefineResult {
            child_ids: [children[0].id, children[1].id, children[2].id, children[3].id],
            position: pos,
        })
    }

    /// Every leaf sharing a positive-length face segment with `id`, with the
    /// exact shared interval. Segments are reported side by side (W, E, S, N)
    /// and in increasing tangential coordinate within a side.
    pub fn face_neighbors(&self, id: ElementId) -> Result<Vec<FaceSegment>, MeshError> {
        let pos = self.position_of(id).ok_or(MeshError::NotALeaf(id))?;
        Ok(self.face_neighbors_at(pos))
    }

    /// As [`face_neighbors`](Self::face_neighbors), addressed by leaf position.
    pub fn face_neighbors_at(&self, pos: usize) -> Vec<FaceSegment> {
        let e = self.leaves[pos];
        let (xs, ys) = self.fine_span(&e);
        let fnx = self.fine_nx();
        let fny = self.fine_ny();
        let mut out = Vec::with_capacity(8);
        for side in Side::ALL {
            // Outside row/column of finest cells and the tangential range.
            let (outside, range, n_fine_tan) = match side {
                Side::West => (wrap_before(xs[0], fnx, self.periodic), ys, fny),
                Side::East => (wrap_after(xs[1], fnx, self.periodic), ys, fny),
                Side::South => (wrap_before(ys[0], fny, self.periodic), xs, fnx),
                Side::North => (wrap_after(ys[1], fny, self.periodic), xs, fnx),
            };
            let Some(outside) = outside else { continue };
            let leaf_at = |t: usize| -> u32 {
                match side {
                    Side::West | Side::East => self.cell_leaf(outside, t),
                    Side::South | Side::North => self.cell_leaf(t, outside),
                }
            };
            let mut t = range[0];
            while t < range[1] {
                let nb = leaf_at(t);
                let start = t;
                while t < range[1] && leaf_at(t) == nb {
                    t += 1;
                }
                out.push(FaceSegment {
                    side,
                    neighbor: ElementId(nb),
                    neighbor_pos: self.position[nb as usize] as usize,
                    start: start as f64 / n_fine_tan as f64,
                    end: t as f64 / n_fine_tan as f64,
                });
            }
        }
        out
    }

    /// Symmetric adjacency graph over face-sharing leaves, excluding self
    /// loops. Edges are grouped by receiver in state order.
    pub fn adjacency_graph(&self) -> AdjacencyGraph {
        let mut edges = Vec::with_capacity(self.len() * 4);
        let mut seen: Vec<usize> = Vec::with_capacity(8);
        for (r, recv) in self.leaves.iter().enumerate() {
            seen.clear();
            for seg in self.face_neighbors_at(r) {
                let s = seg.neighbor_pos;
                if s == r || seen.contains(&s) {
                    continue;
                }
                seen.push(s);
                edges.push(GraphEdge {
                    sender: s,
                    receiver: r,
                    depth_diff: recv.depth as i32 - self.leaves[s].depth as i32,
                });
            }
        }
        AdjacencyGraph {
            node_ids: self.leaves.iter().map(|e| e.id).collect(),
            edges,
            d_max: self.d_max,
        }
    }

    /// True when every leaf of `self` lies inside a leaf of `coarse`, i.e.
    /// `self` is obtained from `coarse` by refinements only.
    pub fn refines(&self, coarse: &QuadMesh) -> bool {
        if self.base_nx != coarse.base_nx || self.base_ny != coarse.base_ny || self.d_max != coarse.d_max {
            return false;
        }
        self.leaves.iter().all(|e| {
            let (xs, ys) = self.fine_span(e);
            let c = &coarse.leaves[coarse.locate_cell(xs[0], ys[0])];
            c.depth <= e.depth
        })
    }

    pub fn snapshot(&self) -> MeshSnapshot {
        MeshSnapshot {
            base_nx: self.base_nx,
            base_ny: self.base_ny,
            d_max: self.d_max,
            periodic: self.periodic,
            leaves: self.leaves.clone(),
        }
    }
}

fn wrap_before(i: usize, n: usize, periodic: bool) -> Option<usize> {
    if i > 0 {
        Some(i - 1)
    } else if periodic {
        Some(n - 1)
    } else {
        None
    }
}

fn wrap_after(i: usize, n: usize, periodic: bool) -> Option<usize> {
    if i < n {
        Some(i % n)
    } else if periodic {
        Some(0)
    } else {
        None
    }
}

/// Serializable mesh description (leaf list plus base dims).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSnapshot {
    pub base_nx: u32,
    pub base_ny: u32,
    pub d_max: u32,
    pub periodic: bool,
    pub leaves: Vec<Element>,
}

impl MeshSnapshot {
    pub fn bounds(&self, e: &Element) -> Bounds {
        let nx = self.base_nx as f64 * (1u64 << e.depth) as f64;
        let ny = self.base_ny as f64 * (1u64 << e.depth) as f64;
        Bounds {
            x0: e.ix as f64 / nx,
            x1: (e.ix + 1) as f64 / nx,
            y0: e.iy as f64 / ny,
            y1: (e.iy + 1) as f64 / ny,
        }
    }
}

//! SVG renders of mesh snapshots: leaf outlines colored by depth over an
//! optional heatmap of the discrete solution.

use std::fmt::Write;

use rlamr_core::basis::SolutionSnapshot;
use rlamr_core::mesh::MeshSnapshot;
use rlamr_core::NodalBasis;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvgOptions {
    /// Canvas width in pixels; height follows the domain aspect ratio.
    pub width: f64,
    pub heatmap: bool,
    /// Heatmap samples per axis across the whole domain.
    pub resolution: usize,
}

impl Default for SvgOptions {
    fn default() -> Self {
        Self { width: 512.0, heatmap: true, resolution: 128 }
    }
}

const DEPTH_COLORS: [&str; 6] = ["#1f1f1f", "#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e"];

// Viridis at five stops.
const STOPS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn colormap(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c: Vec<u8> = (0..3).map(|k| (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

pub fn depth_color(depth: u32) -> &'static str {
    DEPTH_COLORS[(depth as usize).min(DEPTH_COLORS.len() - 1)]
}

pub fn render_mesh(mesh: &MeshSnapshot, opts: &SvgOptions) -> String {
    render(mesh, None, opts)
}

pub fn render_solution(sol: &SolutionSnapshot, opts: &SvgOptions) -> String {
    render(&sol.mesh, if opts.heatmap { Some(sol) } else { None }, opts)
}

fn render(mesh: &MeshSnapshot, sol: Option<&SolutionSnapshot>, opts: &SvgOptions) -> String {
    let w = opts.width;
    let h = w * mesh.base_ny as f64 / mesh.base_nx as f64;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    // y grows upward in the domain and downward on screen.
    let px = |x: f64| x * w;
    let py = |y: f64| (1.0 - y) * h;

    if let Some(sol) = sol {
        let basis = NodalBasis::new(sol.order);
        let mut cells = Vec::new();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (k, e) in mesh.leaves.iter().enumerate() {
            let b = mesh.bounds(e);
            let per_axis = (opts.resolution as f64 * (b.x1 - b.x0)).round().max(1.0) as usize;
            for j in 0..per_axis {
                for i in 0..per_axis {
                    let xi = (i as f64 + 0.5) / per_axis as f64;
                    let eta = (j as f64 + 0.5) / per_axis as f64;
                    let v = sol.eval_local(&basis, k, xi, eta);
                    lo = lo.min(v);
                    hi = hi.max(v);
                    let x0 = b.x0 + (b.x1 - b.x0) * i as f64 / per_axis as f64;
                    let y1 = b.y0 + (b.y1 - b.y0) * (j + 1) as f64 / per_axis as f64;
                    let dx = (b.x1 - b.x0) / per_axis as f64;
                    let dy = (b.y1 - b.y0) / per_axis as f64;
                    cells.push((x0, y1, dx, dy, v));
                }
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (x0, y1, dx, dy, v) in cells {
            writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}" stroke="none"/>"#,
                px(x0),
                py(y1),
                dx * w + 0.05,
                dy * h + 0.05,
                colormap((v - lo) / span)
            )
            .unwrap();
        }
    }

    for e in &mesh.leaves {
        let b = mesh.bounds(e);
        writeln!(
            s,
            r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="{}" stroke-width="1"/>"#,
            px(b.x0),
            py(b.y1),
            (b.x1 - b.x0) * w,
            (b.y1 - b.y0) * h,
            depth_color(e.depth)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

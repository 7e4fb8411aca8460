//! Parameterized ground-truth functions and their samplers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionError {
    #[error("{class} is not available in {mode} mode")]
    InvalidClassForMode { class: FunctionClass, mode: Mode },
    #[error("unknown function class '{0}'")]
    UnknownClass(String),
    #[error("{0} truths cannot be tiled")]
    NotTileable(FunctionClass),
    #[error("unknown mode '{0}'")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionClass {
    Bumps,
    Circles,
    Steps,
    Steps2,
}

impl FunctionClass {
    pub const ALL: [FunctionClass; 4] =
        [FunctionClass::Bumps, FunctionClass::Circles, FunctionClass::Steps, FunctionClass::Steps2];

    /// Upper bound on a single component's magnitude.
    pub fn component_amplitude(self) -> f64 {
        match self {
            FunctionClass::Steps => 2.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for FunctionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FunctionClass::Bumps => "bumps",
            FunctionClass::Circles => "circles",
            FunctionClass::Steps => "steps",
            FunctionClass::Steps2 => "steps2",
        })
    }
}

impl FromStr for FunctionClass {
    type Err = FunctionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bumps" => Ok(FunctionClass::Bumps),
            "circles" => Ok(FunctionClass::Circles),
            "steps" => Ok(FunctionClass::Steps),
            "steps2" => Ok(FunctionClass::Steps2),
            _ => Err(FunctionError::UnknownClass(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Static,
    Advection,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Static => "static",
            Mode::Advection => "advection",
        })
    }
}

impl FromStr for Mode {
    type Err = FunctionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Mode::Static),
            "advection" => Ok(Mode::Advection),
            _ => Err(FunctionError::UnknownMode(s.to_string())),
        }
    }
}

/// Closed interval a parameter is sampled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

const fn r(min: f64, max: f64) -> Range {
    Range { min, max }
}

/// Sampling ranges for one `(class, mode)` pair. Unused fields are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub center: Option<Range>,
    pub width: Option<Range>,
    pub radius: Option<Range>,
    pub offset: Option<Range>,
    pub angle: Option<Range>,
    pub n_min: usize,
    pub n_max: usize,
}

pub fn param_ranges(class: FunctionClass, mode: Mode) -> Result<ParamRanges, FunctionError> {
    use std::f64::consts::FRAC_PI_2;
    let none = ParamRanges { center: None, width: None, radius: None, offset: None, angle: None, n_min: 1, n_max: 6 };
    Ok(match (class, mode) {
        (FunctionClass::Bumps, Mode::Static) => ParamRanges { center: Some(r(0.2, 0.9)), width: Some(r(0.05, 0.2)), ..none },
        (FunctionClass::Bumps, Mode::Advection) => {
            ParamRanges { center: Some(r(0.3, 0.7)), width: Some(r(0.005, 0.05)), n_max: 4, ..none }
        }
        (FunctionClass::Circles, Mode::Static) => ParamRanges {
            center: Some(r(0.2, 0.8)),
            radius: Some(r(0.05, 0.2)),
            width: Some(r(0.1, 1.0)),
            ..none
        },
        (FunctionClass::Circles, Mode::Advection) => ParamRanges {
            center: Some(r(0.3, 0.7)),
            radius: Some(r(0.05, 0.2)),
            width: Some(r(0.03, 0.05)),
            n_max: 4,
            ..none
        },
        (FunctionClass::Steps | FunctionClass::Steps2, Mode::Static) => {
            ParamRanges { offset: Some(r(0.0, 1.0)), angle: Some(r(0.0, FRAC_PI_2)), ..none }
        }
        (class, mode) => return Err(FunctionError::InvalidClassForMode { class, mode }),
    })
}

/// One summand of a ground-truth function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Component {
    Bump { cx: f64, cy: f64, w: f64 },
    Circle { cx: f64, cy: f64, r: f64, w: f64 },
    Step { o: f64 },
    Step2 { o: f64, theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSolution {
    pub class: FunctionClass,
    pub mode: Mode,
    /// Shared inclination angle of steps; unused by other classes.
    #[serde(default)]
    pub theta: f64,
    pub components: Vec<Component>,
    /// Advection velocity (zero in static mode).
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Use `sin θ` for the second term of the rotated step coordinate.
    #[serde(default)]
    pub steps2_rotation_fix: bool,
}

impl TrueSolution {
    /// Draw a solution with parameters uniform in the class's ranges.
    pub fn sample<R: Rng + ?Sized>(
        class: FunctionClass,
        mode: Mode,
        velocity: [f64; 2],
        rng: &mut R,
    ) -> Result<Self, FunctionError> {
        let pr = param_ranges(class, mode)?;
        let draw = |rng: &mut R, range: Option<Range>| {
            let range = range.expect("range present for class");
            rng.gen_range(range.min..=range.max)
        };
        let n = rng.gen_range(pr.n_min..=pr.n_max);
        let theta = if class == FunctionClass::Steps { draw(rng, pr.angle) } else { 0.0 };
        let mut components = Vec::with_capacity(n);
        for _ in 0..n {
            components.push(match class {
                FunctionClass::Bumps => {
                    let cx = draw(rng, pr.center);
                    let cy = draw(rng, pr.center);
                    Component::Bump { cx, cy, w: draw(rng, pr.width) }
                }
                FunctionClass::Circles => {
                    let cx = draw(rng, pr.center);
                    let cy = draw(rng, pr.center);
                    let rad = draw(rng, pr.radius);
                    Component::Circle { cx, cy, r: rad, w: draw(rng, pr.width) }
                }
                FunctionClass::Steps => Component::Step { o: draw(rng, pr.offset) },
                FunctionClass::Steps2 => {
                    let theta = draw(rng, pr.angle);
                    Component::Step2 { o: draw(rng, pr.offset), theta }
                }
            });
        }
        Ok(Self {
            class,
            mode,
            theta,
            components,
            velocity: if mode == Mode::Advection { velocity } else { [0.0, 0.0] },
            steps2_rotation_fix: false,
        })
    }

    /// Shrink `parts` (one per tile, row-major from the south-west) into a
    /// `tiles × tiles` arrangement over the unit square, so each tile sees
    /// features at the length scale a single truth has on the whole domain.
    pub fn tiled(parts: Vec<TrueSolution>, tiles: u32) -> Result<Self, FunctionError> {
        let n = tiles as usize;
        assert_eq!(parts.len(), n * n, "need one truth per tile");
        let first = parts[0].clone();
        if matches!(first.class, FunctionClass::Steps | FunctionClass::Steps2) {
            return Err(FunctionError::NotTileable(first.class));
        }
        let k = tiles as f64;
        let mut components = Vec::new();
        for (t, part) in parts.into_iter().enumerate() {
            let (ox, oy) = ((t % n) as f64, (t / n) as f64);
            components.extend(part.components.into_iter().map(|c| match c {
                Component::Bump { cx, cy, w } => Component::Bump { cx: (ox + cx) / k, cy: (oy + cy) / k, w: w / (k * k) },
                Component::Circle { cx, cy, r, w } => {
                    Component::Circle { cx: (ox + cx) / k, cy: (oy + cy) / k, r: r / k, w: w / (k * k) }
                }
                other => other,
            }));
        }
        Ok(Self { components, ..first })
    }

    /// Closed form at `(x, y)` ignoring time.
    pub fn eval_static(&self, x: f64, y: f64) -> f64 {
        let mut s = 0.0;
        for c in &self.components {
            s += match *c {
                Component::Bump { cx, cy, w } => (-((x - cx).powi(2) + (y - cy).powi(2)) / w).exp(),
                Component::Circle { cx, cy, r, w } => {
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    (-(d - r).powi(2) / w).exp()
                }
                Component::Step { o } => 1.0 + (100.0 * (o - (x + y * self.theta.tan()))).tanh(),
                Component::Step2 { o, theta } => {
                    let second = if self.steps2_rotation_fix { theta.sin() } else { theta.cos() };
                    let si = (x - 0.5) * theta.cos() - (y - 0.5) * second;
                    0.5 * (1.0 + (100.0 * (si - o)).tanh())
                }
            };
        }
        s
    }

    /// Value at time `t`: the static closed form in static mode, the
    /// periodic translate in advection mode.
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        match self.mode {
            Mode::Static => self.eval_static(x, y),
            Mode::Advection => {
                let xs = wrap_unit(x - self.velocity[0] * t);
                let ys = wrap_unit(y - self.velocity[1] * t);
                self.eval_static(xs, ys)
            }
        }
    }

    /// `|f| ≤ bound` everywhere.
    pub fn amplitude_bound(&self) -> f64 {
        self.components.len() as f64 * self.class.component_amplitude()
    }

    /// Closure evaluating at a fixed time.
    pub fn at_time(&self, t: f64) -> impl Fn(f64, f64) -> f64 + '_ {
        move |x, y| self.eval(x, y, t)
    }
}

/// Map a real into `[0, 1)`.
pub fn wrap_unit(v: f64) -> f64 {
    let w = v - v.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

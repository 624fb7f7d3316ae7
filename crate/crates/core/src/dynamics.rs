//! Privileged Dubins-car dynamics, the discrete turn-rate action set and the
//! analytic failure margins that define the known failure set.
//!
//! The state is `[px, py, theta]` with a fixed forward speed. One tick is an
//! explicit Euler step that uses the heading at the start of the tick:
//!
//! ```text
//! s' = s + dt * [v cos(theta), v sin(theta), rate(a)]
//! ```
//!
//! Headings are always kept in `[-pi, pi)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Turn rates (rad/s) indexed by [`ActionId`].
pub const TURN_RATES: [f64; 3] = [-1.25, 0.0, 1.25];

/// Number of discrete actions.
pub const NUM_ACTIONS: usize = 3;

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut w = theta - two_pi * ((theta + PI) / two_pi).floor();
    // floor can land exactly on the upper edge after rounding
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w = -PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DubinsState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
}

impl DubinsState {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self {
            px,
            py,
            theta: wrap_angle(theta),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.px, self.py, self.theta]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.theta.is_finite()
    }
}

/// Index into [`TURN_RATES`]: 0 turns right, 1 goes straight, 2 turns left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActionId(u8);

impl ActionId {
    pub const RIGHT: ActionId = ActionId(0);
    pub const STRAIGHT: ActionId = ActionId(1);
    pub const LEFT: ActionId = ActionId(2);

    pub const ALL: [ActionId; NUM_ACTIONS] = [Self::RIGHT, Self::STRAIGHT, Self::LEFT];

    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_ACTIONS).then_some(ActionId(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn turn_rate(self) -> f64 {
        TURN_RATES[self.index()]
    }

    pub fn one_hot(self) -> [f64; NUM_ACTIONS] {
        let mut v = [0.0; NUM_ACTIONS];
        v[self.index()] = 1.0;
        v
    }
}

impl TryFrom<u8> for ActionId {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        ActionId::new(v as usize).ok_or_else(|| format!("action index {v} out of range"))
    }
}

impl From<ActionId> for u8 {
    fn from(a: ActionId) -> u8 {
        a.0
    }
}

/// Analytic failure region. Margins are signed distances in meters,
/// negative inside the failure region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureSpec {
    /// Open disk of `radius` around `(cx, cy)`.
    Circle {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    /// Everything with `|py| > half_width`.
    Band {
        half_width: f64,
    },
    Union {
        members: Vec<FailureSpec>,
    },
}

impl FailureSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            FailureSpec::Circle { cx, cy, radius } => {
                if !(cx.is_finite() && cy.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "circle needs finite center and radius > 0, got ({cx}, {cy}, {radius})"
                    )));
                }
            }
            FailureSpec::Band { half_width } => {
                if !(*half_width > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "band half width must be > 0, got {half_width}"
                    )));
                }
            }
            FailureSpec::Union { members } => {
                if members.is_empty() {
                    return Err(Error::InvalidConfig("empty failure union".into()));
                }
                for m in members {
                    m.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Signed failure margin at `s` (meters). Negative inside the failure region.
    pub fn margin(&self, s: &DubinsState) -> f64 {
        self.margin_xy(s.px, s.py)
    }

    pub fn margin_xy(&self, px: f64, py: f64) -> f64 {
        match self {
            FailureSpec::Circle { cx, cy, radius } => ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - radius,
            FailureSpec::Band { half_width } => half_width - py.abs(),
            FailureSpec::Union { members } => members
                .iter()
                .map(|m| m.margin_xy(px, py))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Direct membership test, independent of the margin formula.
    pub fn contains(&self, s: &DubinsState) -> bool {
        match self {
            FailureSpec::Circle { cx, cy, radius } => (s.px - cx).powi(2) + (s.py - cy).powi(2) < radius * radius,
            FailureSpec::Band { half_width } => s.py.abs() > *half_width,
            FailureSpec::Union { members } => members.iter().any(|m| m.contains(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Forward speed (m/s).
    #[serde(default = "default_speed")]
    pub v: f64,
    /// Tick length (s).
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Half extent of the data bounding box (m).
    #[serde(default = "default_bbox")]
    pub bbox: f64,
    pub failure: FailureSpec,
}

fn default_speed() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    0.05
}
fn default_bbox() -> f64 {
    1.0
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            v: 1.0,
            dt: 0.05,
            bbox: 1.0,
            failure: FailureSpec::Circle {
                cx: 0.0,
                cy: 0.0,
                radius: 0.5,
            },
        }
    }
}

impl WorldConfig {
    pub fn with_failure(failure: FailureSpec) -> Self {
        Self {
            failure,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v > 0.0 && self.dt > 0.0 && self.bbox > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "world needs v, dt, bbox > 0 (got {}, {}, {})",
                self.v, self.dt, self.bbox
            )));
        }
        self.failure.validate()
    }
}

/// One Euler tick of the Dubins car.
pub fn step(s: &DubinsState, a: ActionId, cfg: &WorldConfig) -> DubinsState {
    DubinsState {
        px: s.px + cfg.dt * cfg.v * s.theta.cos(),
        py: s.py + cfg.dt * cfg.v * s.theta.sin(),
        theta: wrap_angle(s.theta + cfg.dt * a.turn_rate()),
    }
}

pub fn margin(s: &DubinsState, f: &FailureSpec) -> f64 {
    f.margin(s)
}

/// Closed bounding box test: `|px| <= bbox && |py| <= bbox`.
pub fn in_bbox(s: &DubinsState, cfg: &WorldConfig) -> bool {
    s.px.abs() <= cfg.bbox && s.py.abs() <= cfg.bbox
}

//! Regular `(px, py, theta)` grids and value functions stored on them.
//!
//! Node `(ix, iy, ik)` sits at `x_lo + ix*dx`, `y_lo + iy*dy`,
//! `-pi + ik*dtheta`; heading is periodic with `dtheta = 2*pi/ntheta`.
//! Storage is x-major: `index = (ix*ny + iy)*ntheta + ik`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::dynamics::{wrap_angle, DubinsState};
use crate::error::{Error, Result};

const MAGIC: &str = "RGVGRID";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub ntheta: usize,
    pub x_bounds: [f64; 2],
    pub y_bounds: [f64; 2],
}

impl Default for Grid3 {
    fn default() -> Self {
        Self::square(101, 63, 1.0)
    }
}

impl Grid3 {
    /// `n x n x ntheta` grid over `[-half, half]^2`.
    pub fn square(n: usize, ntheta: usize, half: f64) -> Self {
        Self {
            nx: n,
            ny: n,
            ntheta,
            x_bounds: [-half, half],
            y_bounds: [-half, half],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_bounds = |b: [f64; 2]| b[0].is_finite() && b[1].is_finite() && b[0] < b[1];
        if self.nx < 2 || self.ny < 2 || self.ntheta < 3 {
            return Err(Error::InvalidConfig(format!(
                "grid needs nx, ny >= 2 and ntheta >= 3, got {}x{}x{}",
                self.nx, self.ny, self.ntheta
            )));
        }
        if !ok_bounds(self.x_bounds) || !ok_bounds(self.y_bounds) {
            return Err(Error::InvalidConfig("grid bounds must be finite with lo < hi".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.ntheta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        (self.x_bounds[1] - self.x_bounds[0]) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_bounds[1] - self.y_bounds[0]) / (self.ny - 1) as f64
    }

    pub fn dtheta(&self) -> f64 {
        2.0 * PI / self.ntheta as f64
    }

    /// Largest spatial cell size, used as the sign-comparison slack.
    pub fn cell(&self) -> f64 {
        self.dx().max(self.dy())
    }

    pub fn index(&self, ix: usize, iy: usize, ik: usize) -> usize {
        (ix * self.ny + iy) * self.ntheta + ik
    }

    pub fn unravel(&self, i: usize) -> (usize, usize, usize) {
        let ik = i % self.ntheta;
        let rest = i / self.ntheta;
        (rest / self.ny, rest % self.ny, ik)
    }

    pub fn node(&self, i: usize) -> DubinsState {
        let (ix, iy, ik) = self.unravel(i);
        DubinsState::new(
            self.x_bounds[0] + ix as f64 * self.dx(),
            self.y_bounds[0] + iy as f64 * self.dy(),
            -PI + ik as f64 * self.dtheta(),
        )
    }

    pub fn nodes(&self) -> impl Iterator<Item = DubinsState> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    /// The 8 neighbouring node indices and trilinear weights for `s`.
    /// x/y are clamped into the bounds; heading wraps.
    pub fn stencil(&self, s: &DubinsState) -> ([usize; 8], [f64; 8]) {
        let axis = |v: f64, lo: f64, d: f64, n: usize| -> (usize, f64) {
            let f = ((v - lo) / d).clamp(0.0, (n - 1) as f64);
            let i0 = (f.floor() as usize).min(n - 2);
            (i0, f - i0 as f64)
        };
        let (ix, tx) = axis(s.px, self.x_bounds[0], self.dx(), self.nx);
        let (iy, ty) = axis(s.py, self.y_bounds[0], self.dy(), self.ny);
        let ft = (wrap_angle(s.theta) + PI) / self.dtheta();
        let mut k0 = ft.floor();
        let mut tk = ft - k0;
        if k0 as usize >= self.ntheta {
            k0 = 0.0;
            tk = 0.0;
        }
        let k0 = k0 as usize;
        let k1 = (k0 + 1) % self.ntheta;
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        let mut n = 0;
        for (jx, wx) in [(ix, 1.0 - tx), (ix + 1, tx)] {
            for (jy, wy) in [(iy, 1.0 - ty), (iy + 1, ty)] {
                for (jk, wk) in [(k0, 1.0 - tk), (k1, tk)] {
                    idx[n] = self.index(jx, jy, jk);
                    w[n] = wx * wy * wk;
                    n += 1;
                }
            }
        }
        (idx, w)
    }

    /// Trilinear interpolation of per-node `values` at `s`.
    pub fn interpolate(&self, values: &[f64], s: &DubinsState) -> f64 {
        let (idx, w) = self.stencil(s);
        idx.iter().zip(&w).map(|(&i, &wi)| wi * values[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub gamma: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grid: Grid3,
    pub values: Vec<f64>,
    pub meta: GridMeta,
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    #[serde(flatten)]
    grid: Grid3,
    #[serde(flatten)]
    meta: GridMeta,
    config_hash: Option<String>,
}

impl ValueGrid {
    pub fn interpolate(&self, s: &DubinsState) -> f64 {
        self.grid.interpolate(&self.values, s)
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let header = GridHeader {
            grid: self.grid,
            meta: self.meta.clone(),
            config_hash: config_hash.map(str::to_string),
        };
        artifact::encode_framed(MAGIC, &header, &artifact::f32s_to_le(&self.values))
    }

    /// Parse a grid file; returns the grid and the config hash it was built with.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let (h, payload): (GridHeader, _) = artifact::decode_framed(MAGIC, bytes)?;
        h.grid.validate()?;
        let values = artifact::f32s_from_le(payload)?;
        if values.len() != h.grid.len() {
            return Err(Error::Format(format!(
                "grid expects {} values, payload has {}",
                h.grid.len(),
                values.len()
            )));
        }
        Ok((
            Self {
                grid: h.grid,
                values,
                meta: h.meta,
            },
            h.config_hash,
        ))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Free-function form of [`ValueGrid::interpolate`].
pub fn interpolate(vg: &ValueGrid, s: &DubinsState) -> f64 {
    vg.interpolate(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(grid: &Grid3) -> Vec<f64> {
        (0..grid.len())
            .map(|i| {
                let (ix, iy, ik) = grid.unravel(i);
                ix as f64 + 10.0 * iy as f64 + 100.0 * ik as f64
            })
            .collect()
    }

    #[test]
    fn index_roundtrip() {
        let g = Grid3::square(5, 7, 1.0);
        for i in 0..g.len() {
            let (a, b, c) = g.unravel(i);
            assert_eq!(g.index(a, b, c), i);
        }
    }

    #[test]
    fn node_query_returns_node_value() {
        let g = Grid3::square(5, 7, 1.0);
        let v = ramp(&g);
        for i in 0..g.len() {
            assert!((g.interpolate(&v, &g.node(i)) - v[i]).abs() < 1e-9, "node {i}");
        }
    }

    #[test]
    fn midpoint_along_x_is_mean() {
        let g = Grid3::square(5, 7, 1.0);
        let v = ramp(&g);
        let a = g.node(g.index(1, 2, 3));
        let b = g.node(g.index(2, 2, 3));
        let mid = DubinsState::new(0.5 * (a.px + b.px), a.py, a.theta);
        let expected = 0.5 * (v[g.index(1, 2, 3)] + v[g.index(2, 2, 3)]);
        assert!((g.interpolate(&v, &mid) - expected).abs() < 1e-9);
    }

    #[test]
    fn heading_is_periodic() {
        let g = Grid3::square(5, 7, 1.0);
        let v = ramp(&g);
        let a = DubinsState {
            px: 0.1,
            py: -0.3,
            theta: -PI,
        };
        let b = DubinsState {
            px: 0.1,
            py: -0.3,
            theta: PI,
        };
        assert_eq!(g.interpolate(&v, &a), g.interpolate(&v, &b));
        // between the last node and -pi the value blends slice ntheta-1 with slice 0
        let last = -PI + 6.0 * g.dtheta();
        let s = DubinsState {
            px: -1.0,
            py: -1.0,
            theta: last + 0.5 * g.dtheta(),
        };
        let expected = 0.5 * (v[g.index(0, 0, 6)] + v[g.index(0, 0, 0)]);
        assert!((g.interpolate(&v, &s) - expected).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_clamps() {
        let g = Grid3::square(5, 7, 1.0);
        let v = ramp(&g);
        let inside = DubinsState::new(1.0, 0.0, 0.3);
        let outside = DubinsState::new(3.0, 0.0, 0.3);
        assert_eq!(g.interpolate(&v, &inside), g.interpolate(&v, &outside));
    }

    #[test]
    fn file_roundtrip_preserves_f32_values() {
        let g = Grid3::square(4, 5, 1.0);
        let vg = ValueGrid {
            grid: g,
            values: (0..g.len()).map(|i| i as f64 * 0.25 - 3.0).collect(),
            meta: GridMeta {
                gamma: 1.0,
                iterations: 3,
                residual: 0.0,
                converged: true,
            },
        };
        let bytes = vg.to_bytes(Some("h")).unwrap();
        assert!(bytes.starts_with(b"RGVGRID/1 {"));
        let (back, hash) = ValueGrid::from_bytes(&bytes).unwrap();
        assert_eq!(back, vg);
        assert_eq!(hash.as_deref(), Some("h"));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(Grid3::square(1, 5, 1.0).validate().is_err());
        assert!(Grid3::square(3, 2, 1.0).validate().is_err());
        assert!(Grid3::square(3, 3, 0.0).validate().is_err());
    }
}

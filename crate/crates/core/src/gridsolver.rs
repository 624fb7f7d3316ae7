//! Dynamic-programming safety value functions on a [`Grid3`].
//!
//! Both solvers iterate the reduced recursion
//!
//! ```text
//! W(z) = max_a  I[ g(., p(z,a)) ](z'_a)
//! g(n, p) = (1-gamma) min(l(n), p) + gamma min(l(n), p, W(n))
//! V(z) = (1-gamma) l(z) + gamma min(l(z), W(z))
//! ```
//!
//! where `I[.](x)` is trilinear interpolation of a per-node quantity and
//! `p(z,a) = kappa (eps - u_a)` is the out-of-distribution penalty attached
//! to the transition (`+inf` for the ground truth). With `p = +inf` this is
//! exactly `V <- (1-gamma) l + gamma min{l, max_a V(f(s,a))}`.
//!
//! Sweeps are Jacobi (double buffered) and parallel over nodes; the result
//! does not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{in_bbox, ActionId, DubinsState, WorldConfig, NUM_ACTIONS};
use crate::ensemble::MarginSource;
use crate::error::{Error, Result};
use crate::grid::{Grid3, GridMeta, ValueGrid};
use crate::uncertainty::{KnownDynamics, TransitionModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9999,
            tol: 1e-6,
            max_sweeps: 2000,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::InvalidConfig("tol must be > 0 and max_sweeps >= 1".into()));
        }
        Ok(())
    }
}

/// Out-of-distribution penalty `kappa (eps - u)` applied to the margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodPenalty {
    pub epsilon: f64,
    pub kappa: f64,
    pub bbox_exempt: bool,
}

impl OodPenalty {
    /// Penalty for a transition with uncertainty `u` landing in `next`.
    /// `+inf` when the penalty is inactive.
    pub fn penalty(&self, u: f64, next: &DubinsState, world: &WorldConfig) -> f64 {
        if self.kappa == 0.0 || (self.bbox_exempt && !in_bbox(next, world)) {
            f64::INFINITY
        } else {
            self.kappa * (self.epsilon - u)
        }
    }
}

impl ValueGrid {
    /// Turn a flagged non-converged solve into an error.
    pub fn require_converged(&self) -> Result<()> {
        if self.meta.converged {
            Ok(())
        } else {
            Err(Error::NonConvergence {
                residual: self.meta.residual,
                sweeps: self.meta.iterations,
            })
        }
    }
}

/// Successor of one node-action pair: base stencil corner plus fractions.
#[derive(Clone, Copy)]
struct Succ {
    ix: u32,
    iy: u32,
    ik: u32,
    tx: f64,
    ty: f64,
    tk: f64,
    penalty: f64,
}

impl Succ {
    fn new(grid: &Grid3, s: &DubinsState, penalty: f64) -> Self {
        let (idx, _) = grid.stencil(s);
        let (ix, iy, ik) = grid.unravel(idx[0]);
        let lo = grid.node(idx[0]);
        let tx = ((s.px.clamp(grid.x_bounds[0], grid.x_bounds[1]) - lo.px) / grid.dx()).clamp(0.0, 1.0);
        let ty = ((s.py.clamp(grid.y_bounds[0], grid.y_bounds[1]) - lo.py) / grid.dy()).clamp(0.0, 1.0);
        let mut dk = crate::dynamics::wrap_angle(s.theta - lo.theta);
        if dk < 0.0 {
            dk += 2.0 * std::f64::consts::PI;
        }
        let tk = (dk / grid.dtheta()).clamp(0.0, 1.0);
        Self {
            ix: ix as u32,
            iy: iy as u32,
            ik: ik as u32,
            tx,
            ty,
            tk,
            penalty,
        }
    }
}

struct Problem<'a> {
    grid: &'a Grid3,
    gamma: f64,
    margin: Vec<f64>,
    succ: Vec<[Succ; NUM_ACTIONS]>,
}

impl Problem<'_> {
    fn backup(&self, w: &[f64], n: usize) -> f64 {
        let g = self.grid;
        let gamma = self.gamma;
        let mut best = f64::NEG_INFINITY;
        for s in &self.succ[n] {
            let (ix, iy, ik) = (s.ix as usize, s.iy as usize, s.ik as usize);
            let ix1 = (ix + 1).min(g.nx - 1);
            let iy1 = (iy + 1).min(g.ny - 1);
            let ik1 = (ik + 1) % g.ntheta;
            let mut acc = 0.0;
            for (jx, wx) in [(ix, 1.0 - s.tx), (ix1, s.tx)] {
                for (jy, wy) in [(iy, 1.0 - s.ty), (iy1, s.ty)] {
                    for (jk, wk) in [(ik, 1.0 - s.tk), (ik1, s.tk)] {
                        let i = g.index(jx, jy, jk);
                        let m = self.margin[i].min(s.penalty);
                        acc += wx * wy * wk * ((1.0 - gamma) * m + gamma * m.min(w[i]));
                    }
                }
            }
            if acc > best {
                best = acc;
            }
        }
        best
    }

    fn solve(&self, sc: &SolveConfig) -> ValueGrid {
        let n = self.grid.len();
        let top = self.margin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w = vec![top; n];
        let mut next = vec![0.0; n];
        let mut residual = f64::INFINITY;
        let mut sweeps = 0;
        while sweeps < sc.max_sweeps {
            next.par_iter_mut()
                .enumerate()
                .for_each(|(i, out)| *out = self.backup(&w, i));
            residual = w
                .par_iter()
                .zip(next.par_iter())
                .map(|(a, b)| (a - b).abs())
                .reduce(|| 0.0, f64::max);
            std::mem::swap(&mut w, &mut next);
            sweeps += 1;
            log::debug!("sweep {sweeps}: residual {residual:e}");
            if residual < sc.tol {
                break;
            }
        }
        let gamma = self.gamma;
        let values = self
            .margin
            .iter()
            .zip(&w)
            .map(|(&l, &wv)| (1.0 - gamma) * l + gamma * l.min(wv))
            .collect();
        ValueGrid {
            grid: *self.grid,
            values,
            meta: GridMeta {
                gamma,
                iterations: sweeps,
                residual,
                converged: residual < sc.tol,
            },
        }
    }
}

fn node_states(grid: &Grid3) -> Vec<DubinsState> {
    grid.nodes().collect()
}

fn build_successors(
    grid: &Grid3,
    states: &[DubinsState],
    model: &dyn TransitionModel,
    ood: Option<&OodPenalty>,
    world: &WorldConfig,
) -> Result<Vec<[Succ; NUM_ACTIONS]>> {
    let placeholder = Succ {
        ix: 0,
        iy: 0,
        ik: 0,
        tx: 0.0,
        ty: 0.0,
        tk: 0.0,
        penalty: f64::INFINITY,
    };
    let mut succ = vec![[placeholder; NUM_ACTIONS]; states.len()];
    for a in ActionId::ALL {
        let preds = model.predict(states, a)?;
        succ.par_iter_mut().zip(preds.par_iter()).for_each(|(row, p)| {
            let penalty = ood.map_or(f64::INFINITY, |o| o.penalty(p.u, &p.next, world));
            row[a.index()] = Succ::new(grid, &p.next, penalty);
        });
    }
    Ok(succ)
}

/// Safety value function of the true dynamics and analytic failure margin.
/// Non-convergence is flagged in `meta`, see [`ValueGrid::require_converged`].
pub fn solve_ground_truth(grid: &Grid3, world: &WorldConfig, sc: &SolveConfig) -> Result<ValueGrid> {
    grid.validate()?;
    world.validate()?;
    sc.validate()?;
    let states = node_states(grid);
    let margin = states.iter().map(|s| world.failure.margin(s)).collect();
    let succ = build_successors(grid, &states, &KnownDynamics(world.clone()), None, world)?;
    Ok(Problem {
        grid,
        gamma: sc.gamma,
        margin,
        succ,
    }
    .solve(sc))
}

/// Safety value function over the uncertainty-augmented state, with
/// learned transitions and the out-of-distribution penalty folded into the
/// margin. The reported value is `V(z, u = 0)` without the `kappa*eps` cap.
pub fn solve_uncertainty_aware(
    grid: &Grid3,
    model: &dyn TransitionModel,
    marg: &MarginSource,
    ood: &OodPenalty,
    world: &WorldConfig,
    sc: &SolveConfig,
) -> Result<ValueGrid> {
    if ood.epsilon.is_nan() {
        return Err(Error::UncalibratedThreshold);
    }
    grid.validate()?;
    sc.validate()?;
    let states = node_states(grid);
    let margin = marg.margins(&states);
    let succ = build_successors(grid, &states, model, Some(ood), world)?;
    Ok(Problem {
        grid,
        gamma: sc.gamma,
        margin,
        succ,
    }
    .solve(sc))
}

/// Action maximizing the interpolated value at the predicted next state.
/// Ties go to the lowest index.
pub fn greedy_action(vg: &ValueGrid, s: &DubinsState, model: &dyn TransitionModel) -> Result<ActionId> {
    let mut best = (ActionId::RIGHT, f64::NEG_INFINITY);
    for a in ActionId::ALL {
        let next = model.predict(std::slice::from_ref(s), a)?[0].next;
        let v = vg.interpolate(&next);
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok(best.0)
}

/// Finite deterministic chain used to check the augmented-state reduction
/// and the fitted solver against exact value iteration.
#[derive(Debug, Clone)]
pub struct TabularChain {
    /// `next[s][a]`: successor index.
    pub next: Vec<Vec<usize>>,
    /// `uncertainty[s][a]`: epistemic uncertainty of the transition.
    pub uncertainty: Vec<Vec<f64>>,
    pub margin: Vec<f64>,
}

impl TabularChain {
    /// Augmented margin of the transition `(s, a)` at its successor.
    pub fn transition_margin(&self, s: usize, a: usize, ood: Option<&OodPenalty>) -> f64 {
        let l = self.margin[self.next[s][a]];
        match ood {
            Some(o) if o.kappa != 0.0 => l.min(o.kappa * (o.epsilon - self.uncertainty[s][a])),
            _ => l,
        }
    }

    /// Exact value iteration of the reduced recursion; returns `W` per state.
    pub fn solve_reduced(&self, ood: Option<&OodPenalty>, sc: &SolveConfig) -> Vec<f64> {
        let n = self.margin.len();
        let top = self.margin.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w = vec![top; n];
        for _ in 0..sc.max_sweeps {
            let next: Vec<f64> = (0..n)
                .map(|s| {
                    (0..self.next[s].len())
                        .map(|a| {
                            let lt = self.transition_margin(s, a, ood);
                            (1.0 - sc.gamma) * lt + sc.gamma * lt.min(w[self.next[s][a]])
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let r = w.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            w = next;
            if r < sc.tol {
                break;
            }
        }
        w
    }
}

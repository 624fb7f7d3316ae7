//! Runtime safety filter: monitor, fallback override and HALT, plus a
//! closed-loop rollout harness over the true dynamics.

use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::dynamics::{step, ActionId, DubinsState, WorldConfig};
use crate::ensemble::MarginSource;
use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::gridsolver::OodPenalty;
use crate::safelearn::QFunction;
use crate::uncertainty::TransitionModel;

/// A safety value function with its fallback policy.
#[derive(Debug, Clone)]
pub enum SafetySolution {
    /// Grid values; the fallback maximises the successor value capped by
    /// the transition penalty when `ood` is set.
    Grid { vg: ValueGrid, ood: Option<OodPenalty> },
    /// Learned Q function; state values are `(1-g) l + g min(l, max_a Q)`.
    Q {
        q: QFunction,
        marg: MarginSource,
        gamma: f64,
    },
}

impl SafetySolution {
    pub fn value(&self, z: &DubinsState) -> f64 {
        match self {
            SafetySolution::Grid { vg, .. } => vg.interpolate(z),
            SafetySolution::Q { q, marg, gamma } => {
                let l = marg.margin(z);
                (1.0 - gamma) * l + gamma * l.min(q.monitor_value(z))
            }
        }
    }

    pub fn values(&self, states: &[DubinsState]) -> Vec<f64> {
        match self {
            SafetySolution::Grid { vg, .. } => states.iter().map(|s| vg.interpolate(s)).collect(),
            SafetySolution::Q { q, marg, gamma } => marg
                .margins(states)
                .into_iter()
                .zip(q.monitor_values(states))
                .map(|(l, w)| (1.0 - gamma) * l + gamma * l.min(w))
                .collect(),
        }
    }

    /// Best-effort safe action at `z`; ties go to the lowest index.
    pub fn fallback_action(
        &self,
        z: &DubinsState,
        model: &dyn TransitionModel,
        world: &WorldConfig,
    ) -> Result<ActionId> {
        match self {
            SafetySolution::Grid { vg, ood } => {
                let mut best = (ActionId::RIGHT, f64::NEG_INFINITY);
                for a in ActionId::ALL {
                    let p = model.predict_one(z, a)?;
                    let cap = ood.map_or(f64::INFINITY, |o| o.penalty(p.u, &p.next, world));
                    let v = vg.interpolate(&p.next).min(cap);
                    if v > best.1 {
                        best = (a, v);
                    }
                }
                Ok(best.0)
            }
            SafetySolution::Q { q, .. } => Ok(q.fallback_action(z)),
        }
    }
}

/// Everything a filter decision reads.
#[derive(Clone, Copy)]
pub struct FilterContext<'a> {
    pub sol: &'a SafetySolution,
    pub model: &'a dyn TransitionModel,
    pub epsilon: f64,
    pub delta: f64,
    pub world: &'a WorldConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    /// `None` on HALT.
    pub executed: Option<ActionId>,
    pub intervened: bool,
    pub halted: bool,
    pub value_next: f64,
    pub u_task: f64,
    pub u_fallback: Option<f64>,
}

pub fn filter_step(z: &DubinsState, a_task: ActionId, ctx: &FilterContext<'_>) -> Result<FilterDecision> {
    if ctx.epsilon.is_nan() {
        return Err(Error::UncalibratedThreshold);
    }
    let p = ctx.model.predict_one(z, a_task)?;
    let value_next = ctx.sol.value(&p.next);
    if p.u <= ctx.epsilon && value_next > ctx.delta {
        return Ok(FilterDecision {
            executed: Some(a_task),
            intervened: false,
            halted: false,
            value_next,
            u_task: p.u,
            u_fallback: None,
        });
    }
    let a_fb = ctx.sol.fallback_action(z, ctx.model, ctx.world)?;
    let u_fb = ctx.model.predict_one(z, a_fb)?.u;
    let ok = u_fb <= ctx.epsilon;
    Ok(FilterDecision {
        executed: ok.then_some(a_fb),
        intervened: true,
        halted: !ok,
        value_next,
        u_task: p.u,
        u_fallback: Some(u_fb),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Safe,
    Failure,
    Halted,
}

/// One tick of a rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: usize,
    pub state: DubinsState,
    pub a_task: ActionId,
    /// Absent for unfiltered rollouts.
    pub decision: Option<FilterDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub states: Vec<DubinsState>,
    pub log: Vec<TickRecord>,
    pub outcome: Outcome,
    pub interventions: usize,
}

/// A task policy: tick, state and a seeded RNG to an action.
pub type TaskPolicy<'a> = dyn FnMut(usize, &DubinsState, &mut ChaCha8Rng) -> ActionId + 'a;

/// Step the true dynamics with the task policy's actions, filtered when
/// `filter` is given.
pub fn rollout(
    start: DubinsState,
    policy: &mut TaskPolicy<'_>,
    filter: Option<&FilterContext<'_>>,
    horizon: usize,
    world: &WorldConfig,
    seed: u64,
) -> Result<RolloutResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = RolloutResult {
        states: vec![start],
        log: Vec::new(),
        outcome: Outcome::Safe,
        interventions: 0,
    };
    if world.failure.margin(&start) < 0.0 {
        res.outcome = Outcome::Failure;
        return Ok(res);
    }
    let mut s = start;
    for t in 0..horizon {
        let a_task = policy(t, &s, &mut rng);
        let decision = filter.map(|ctx| filter_step(&s, a_task, ctx)).transpose()?;
        res.log.push(TickRecord {
            t,
            state: s,
            a_task,
            decision,
        });
        let executed = match decision {
            None => a_task,
            Some(d) => {
                if d.intervened {
                    res.interventions += 1;
                }
                match d.executed {
                    Some(a) => a,
                    None => {
                        res.outcome = Outcome::Halted;
                        return Ok(res);
                    }
                }
            }
        };
        s = step(&s, executed, world);
        res.states.push(s);
        if world.failure.margin(&s) < 0.0 {
            res.outcome = Outcome::Failure;
            return Ok(res);
        }
    }
    Ok(res)
}

pub fn rollout_filtered(
    start: DubinsState,
    policy: &mut TaskPolicy<'_>,
    ctx: &FilterContext<'_>,
    horizon: usize,
    seed: u64,
) -> Result<RolloutResult> {
    rollout(start, policy, Some(ctx), horizon, ctx.world, seed)
}

/// Newline-delimited tick records, one rollout after another.
pub fn write_logs(path: &Path, rollouts: &[RolloutResult]) -> Result<()> {
    let mut out = Vec::new();
    for r in rollouts {
        for rec in &r.log {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
    }
    artifact::write_atomic(path, &out)
}

/// Split a log back into per-rollout action sequences (a new rollout starts
/// whenever `t` resets to 0).
pub fn read_logs(path: &Path) -> Result<Vec<Vec<TickRecord>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out: Vec<Vec<TickRecord>> = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TickRecord = serde_json::from_str(&line)?;
        if rec.t == 0 || out.is_empty() {
            out.push(Vec::new());
        }
        out.last_mut().expect("pushed").push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FailureSpec;
    use crate::grid::Grid3;
    use crate::gridsolver::{solve_ground_truth, SolveConfig};
    use crate::uncertainty::{KnownDynamics, Predicted};
    use rand::Rng;

    /// True dynamics with a fixed uncertainty per action.
    struct FixedU {
        world: WorldConfig,
        u: [f64; 3],
    }

    impl TransitionModel for FixedU {
        fn predict(&self, states: &[DubinsState], a: ActionId) -> Result<Vec<Predicted>> {
            Ok(states
                .iter()
                .map(|s| Predicted {
                    next: step(s, a, &self.world),
                    u: self.u[a.index()],
                })
                .collect())
        }
    }

    fn gt() -> (SafetySolution, WorldConfig) {
        let w = WorldConfig::default();
        let sc = SolveConfig {
            gamma: 1.0,
            tol: 1e-6,
            max_sweeps: 2000,
        };
        let vg = solve_ground_truth(&Grid3::square(41, 32, 1.0), &w, &sc).unwrap();
        (SafetySolution::Grid { vg, ood: None }, w)
    }

    fn ctx<'a>(
        sol: &'a SafetySolution,
        model: &'a dyn TransitionModel,
        w: &'a WorldConfig,
        eps: f64,
    ) -> FilterContext<'a> {
        FilterContext {
            sol,
            model,
            epsilon: eps,
            delta: 0.1,
            world: w,
        }
    }

    #[test]
    fn pass_branch() {
        let (sol, w) = gt();
        let m = KnownDynamics(w.clone());
        let z = DubinsState::new(-0.9, 0.9, 0.0);
        let d = filter_step(&z, ActionId::STRAIGHT, &ctx(&sol, &m, &w, 0.5)).unwrap();
        assert!(d.value_next > 0.1);
        assert_eq!(d.executed, Some(ActionId::STRAIGHT));
        assert!(!d.intervened && !d.halted);
        assert_eq!(d.u_fallback, None);
    }

    #[test]
    fn uncertain_task_action_falls_back() {
        let (sol, w) = gt();
        let z = DubinsState::new(-0.9, 0.9, 0.0);
        let m = FixedU {
            world: w.clone(),
            u: [0.0, 0.9, 0.0],
        };
        let d = filter_step(&z, ActionId::STRAIGHT, &ctx(&sol, &m, &w, 0.5)).unwrap();
        assert!(d.intervened && !d.halted);
        let fb = d.executed.unwrap();
        assert_ne!(fb, ActionId::STRAIGHT);
        assert!(d.u_fallback.unwrap() <= 0.5);
    }

    #[test]
    fn all_uncertain_halts() {
        let (sol, w) = gt();
        let z = DubinsState::new(-0.9, 0.9, 0.0);
        let m = FixedU {
            world: w.clone(),
            u: [0.9; 3],
        };
        let d = filter_step(&z, ActionId::LEFT, &ctx(&sol, &m, &w, 0.5)).unwrap();
        assert!(d.halted && d.intervened);
        assert_eq!(d.executed, None);
        assert!(matches!(
            filter_step(&z, ActionId::LEFT, &ctx(&sol, &m, &w, f64::NAN)),
            Err(Error::UncalibratedThreshold)
        ));
    }

    #[test]
    fn branches_partition_and_delta_is_monotone() {
        let (sol, w) = gt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..400 {
            let z = DubinsState::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-3.0..3.0),
            );
            let u = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let m = FixedU { world: w.clone(), u };
            let a = ActionId::new(rng.gen_range(0..3)).unwrap();
            let mut c = ctx(&sol, &m, &w, 0.5);
            let d = filter_step(&z, a, &c).unwrap();
            let pass = !d.intervened;
            let fallback = d.intervened && !d.halted;
            let halt = d.halted;
            assert_eq!(pass as u8 + fallback as u8 + halt as u8, 1);
            assert_eq!(d.executed.is_none(), d.halted);
            if pass {
                assert_eq!(d.executed, Some(a));
            } else {
                for delta in [0.15, 0.3, 1.0, 5.0] {
                    c.delta = delta;
                    assert!(filter_step(&z, a, &c).unwrap().intervened);
                }
            }
        }
    }

    #[test]
    fn rollout_outcomes() {
        let (sol, w) = gt();
        let m = KnownDynamics(w.clone());
        let c = ctx(&sol, &m, &w, 1.0);
        let mut straight = |_: usize, _: &DubinsState, _: &mut ChaCha8Rng| ActionId::STRAIGHT;
        let r = rollout(DubinsState::new(0.0, 0.0, 0.0), &mut straight, Some(&c), 10, &w, 0).unwrap();
        assert_eq!(r.outcome, Outcome::Failure);
        assert_eq!(r.states.len(), 1);

        let start = DubinsState::new(-0.95, 0.3, 0.0);
        assert!(sol.value(&start) > 0.05, "{}", sol.value(&start));
        let r = rollout(start, &mut straight, None, 100, &w, 0).unwrap();
        assert_eq!(r.outcome, Outcome::Failure);
        let r = rollout_filtered(start, &mut straight, &c, 300, 0).unwrap();
        assert_eq!(r.outcome, Outcome::Safe);
        assert!(r.interventions > 0);
        assert_eq!(r.log.len(), 300);

        // fallback policy as the task policy: no interventions needed
        let z0 = DubinsState::new(-0.9, 0.9, 0.0);
        let mut fb = |_: usize, s: &DubinsState, _: &mut ChaCha8Rng| sol.fallback_action(s, &m, &w).unwrap();
        let r = rollout_filtered(z0, &mut fb, &c, 200, 0).unwrap();
        assert_eq!(r.outcome, Outcome::Safe);
    }

    #[test]
    fn q_solution_values_combine_margin() {
        let w = WorldConfig::with_failure(FailureSpec::Circle {
            cx: 0.0,
            cy: 0.0,
            radius: 0.5,
        });
        let q = QFunction::new(crate::safelearn::QInput::Dubins, &[8], 3, 1);
        let sol = SafetySolution::Q {
            q: q.clone(),
            marg: MarginSource::Analytic(w.failure.clone()),
            gamma: 0.9,
        };
        let zs = [DubinsState::new(0.0, 0.0, 0.0), DubinsState::new(0.8, -0.3, 2.0)];
        let vals = sol.values(&zs);
        for (z, v) in zs.iter().zip(vals) {
            let l = w.failure.margin(z);
            let expect = 0.1 * l + 0.9 * l.min(q.monitor_value(z));
            assert!((v - expect).abs() < 1e-12);
            assert!((sol.value(z) - expect).abs() < 1e-12);
        }
        let m = KnownDynamics(w.clone());
        assert_eq!(sol.fallback_action(&zs[1], &m, &w).unwrap(), q.fallback_action(&zs[1]));
    }

    #[test]
    fn log_roundtrip() {
        let (sol, w) = gt();
        let m = KnownDynamics(w.clone());
        let c = ctx(&sol, &m, &w, 1.0);
        let mut pol = |t: usize, _: &DubinsState, _: &mut ChaCha8Rng| ActionId::new(t % 3).unwrap();
        let a = rollout_filtered(DubinsState::new(-0.8, 0.5, 0.3), &mut pol, &c, 7, 0).unwrap();
        let b = rollout(DubinsState::new(0.8, 0.5, 0.3), &mut pol, None, 5, &w, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        write_logs(&p, &[a.clone(), b.clone()]).unwrap();
        let back = read_logs(&p).unwrap();
        assert_eq!(back, vec![a.log, b.log]);
    }
}

//! Offline trajectory datasets: expert and random rollouts, failure labels,
//! train/calibration splits and JSON-lines persistence.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::dynamics::{step, ActionId, DubinsState, WorldConfig, NUM_ACTIONS};
use crate::ensemble::TransitionSample;
use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::gridsolver::greedy_action;
use crate::uncertainty::KnownDynamics;

const DATASET_FORMAT: &str = "reachguard-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DubinsState>,
    pub actions: Vec<ActionId>,
    /// `+1` safe, `-1` failure, one per state.
    pub labels: Vec<i8>,
}

pub fn label_of(s: &DubinsState, world: &WorldConfig) -> i8 {
    if world.failure.margin(s) < 0.0 {
        -1
    } else {
        1
    }
}

impl Trajectory {
    pub fn start(s: DubinsState, world: &WorldConfig) -> Self {
        Self {
            states: vec![s],
            actions: Vec::new(),
            labels: vec![label_of(&s, world)],
        }
    }

    pub fn push(&mut self, a: ActionId, next: DubinsState, world: &WorldConfig) {
        self.actions.push(a);
        self.states.push(next);
        self.labels.push(label_of(&next, world));
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn last(&self) -> &DubinsState {
        self.states.last().expect("trajectory has a start state")
    }

    pub fn transitions(&self) -> impl Iterator<Item = TransitionSample> + '_ {
        self.actions.iter().enumerate().map(|(t, &a)| TransitionSample {
            z: self.states[t],
            a,
            next: self.states[t + 1],
        })
    }

    /// Check lengths, exact replay through the dynamics and labels.
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || self.labels.len() != self.states.len() {
            return Err(Error::InconsistentTrajectory(format!(
                "{} states, {} actions, {} labels",
                self.states.len(),
                self.actions.len(),
                self.labels.len()
            )));
        }
        for (t, tr) in self.transitions().enumerate() {
            if step(&tr.z, tr.a, world) != tr.next {
                return Err(Error::InconsistentTrajectory(format!(
                    "state {} does not follow from replaying action {}",
                    t + 1,
                    tr.a.index()
                )));
            }
        }
        for (t, (s, &l)) in self.states.iter().zip(&self.labels).enumerate() {
            if label_of(s, world) != l {
                return Err(Error::InconsistentTrajectory(format!(
                    "label {t} disagrees with the margin"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub n_expert: usize,
    pub n_random: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    v: u32,
    seed: u64,
    provenance: Provenance,
    count: usize,
    config_hash: Option<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> Vec<TransitionSample> {
        self.trajectories.iter().flat_map(|t| t.transitions()).collect()
    }

    /// Every stored state with its label.
    pub fn labeled_states(&self) -> Vec<(DubinsState, i8)> {
        self.trajectories
            .iter()
            .flat_map(|t| t.states.iter().cloned().zip(t.labels.iter().cloned()))
            .collect()
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            v: artifact::FORMAT_VERSION,
            seed: self.seed,
            provenance: self.provenance,
            count: self.len(),
            config_hash: config_hash.map(str::to_string),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for t in &self.trajectories {
            serde_json::to_writer(&mut out, t)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Parse and replay-check every trajectory against `world`.
    pub fn from_reader<R: BufRead>(reader: R, world: &WorldConfig) -> Result<(Self, Option<String>)> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.v != artifact::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset {} v{}",
                header.format, header.v
            )));
        }
        let mut trajectories = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)?;
            t.validate(world)?;
            trajectories.push(t);
        }
        if trajectories.len() != header.count {
            return Err(Error::Format(format!(
                "header announces {} trajectories, found {}",
                header.count,
                trajectories.len()
            )));
        }
        Ok((
            Self {
                trajectories,
                seed: header.seed,
                provenance: header.provenance,
            },
            header.config_hash,
        ))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path, world: &WorldConfig) -> Result<(Self, Option<String>)> {
        Self::from_reader(BufReader::new(std::fs::File::open(path)?), world)
    }

    /// Append-free writer for streaming callers.
    pub fn write_to<W: Write>(&self, mut w: W, config_hash: Option<&str>) -> Result<()> {
        w.write_all(&self.to_bytes(config_hash)?)?;
        Ok(())
    }
}

fn traj_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn random_action<R: Rng>(rng: &mut R) -> ActionId {
    ActionId::new(rng.gen_range(0..NUM_ACTIONS)).expect("index in range")
}

/// Expert rollouts: greedy fallback when the value drops below `boundary`,
/// uniform random actions elsewhere. A rollout stops early rather than step
/// into a state with negative value or margin.
pub fn gen_expert(
    vg: &ValueGrid,
    n: usize,
    horizon: usize,
    boundary: f64,
    world: &WorldConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if !(boundary > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "expert boundary must be > 0, got {boundary}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let starts: Vec<usize> = (0..vg.grid.len()).filter(|&i| vg.values[i] > boundary).collect();
    if starts.is_empty() {
        return Err(Error::SamplingExhausted(format!(
            "no grid node with value above {boundary}"
        )));
    }
    let model = KnownDynamics(world.clone());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = traj_rng(seed, i);
            let s0 = vg.grid.node(*starts.choose(&mut rng).expect("non-empty"));
            let mut traj = Trajectory::start(s0, world);
            for _ in 0..horizon {
                let s = *traj.last();
                let a = if vg.interpolate(&s) < boundary {
                    greedy_action(vg, &s, &model)?
                } else {
                    random_action(&mut rng)
                };
                let next = step(&s, a, world);
                if vg.interpolate(&next) < 0.0 || world.failure.margin(&next) <= 0.0 {
                    break;
                }
                traj.push(a, next, world);
            }
            Ok(traj)
        })
        .collect()
}

/// Random rollouts from uniform starts outside the failure set; each
/// episode ends at its first failure state or at `horizon`.
pub fn gen_random(n: usize, horizon: usize, world: &WorldConfig, seed: u64) -> Vec<Trajectory> {
    let b = world.bbox;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = traj_rng(seed ^ 0x7261_6e64, i);
            let s0 = loop {
                let s = DubinsState::new(
                    rng.gen_range(-b..=b),
                    rng.gen_range(-b..=b),
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                );
                if world.failure.margin(&s) >= 0.0 {
                    break s;
                }
            };
            let mut traj = Trajectory::start(s0, world);
            for _ in 0..horizon {
                let a = random_action(&mut rng);
                let next = step(traj.last(), a, world);
                traj.push(a, next, world);
                if *traj.labels.last().expect("pushed") < 0 {
                    break;
                }
            }
            traj
        })
        .collect()
}

/// Move `n_calib` uniformly chosen trajectories into a calibration set.
/// Both parts keep the original relative order.
pub fn split(d: &Dataset, n_calib: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_calib >= d.len() && n_calib > 0 {
        return Err(Error::InsufficientData {
            requested: n_calib,
            available: d.len(),
        });
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut calib_mask = vec![false; d.len()];
    for &i in &idx[..n_calib] {
        calib_mask[i] = true;
    }
    let mut train = Vec::with_capacity(d.len() - n_calib);
    let mut calib = Vec::with_capacity(n_calib);
    for (t, &c) in d.trajectories.iter().zip(&calib_mask) {
        if c {
            calib.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    let part = |trajectories| Dataset {
        trajectories,
        seed: d.seed,
        provenance: d.provenance,
    };
    Ok((part(train), part(calib)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use crate::gridsolver::{solve_ground_truth, SolveConfig};

    fn gt() -> (ValueGrid, WorldConfig) {
        let w = WorldConfig::default();
        let sc = SolveConfig {
            gamma: 1.0,
            tol: 1e-6,
            max_sweeps: 2000,
        };
        (solve_ground_truth(&Grid3::square(31, 24, 1.0), &w, &sc).unwrap(), w)
    }

    #[test]
    fn zero_counts_give_empty() {
        let (vg, w) = gt();
        assert!(gen_expert(&vg, 0, 10, 0.1, &w, 1).unwrap().is_empty());
        assert!(gen_random(0, 10, &w, 1).is_empty());
    }

    #[test]
    fn expert_trajectories_stay_safe_and_replay() {
        let (vg, w) = gt();
        let trajs = gen_expert(&vg, 200, 60, 0.1, &w, 3).unwrap();
        assert_eq!(trajs.len(), 200);
        for t in &trajs {
            t.validate(&w).unwrap();
            assert!(t.labels.iter().all(|&l| l == 1));
            assert!(t.states.iter().all(|s| w.failure.margin(s) > 0.0));
            assert!(t.states.iter().all(|s| vg.interpolate(s) >= 0.0));
        }
        let total: usize = trajs.iter().map(|t| t.len()).sum();
        assert!(total > 200 * 40, "expert rollouts stop too early: {total}");
    }

    #[test]
    fn expert_without_safe_nodes_is_exhausted() {
        let (mut vg, w) = gt();
        vg.values.iter_mut().for_each(|v| *v = -1.0);
        assert!(matches!(
            gen_expert(&vg, 1, 5, 0.1, &w, 0),
            Err(Error::SamplingExhausted(_))
        ));
    }

    #[test]
    fn random_trajectories_truncate_at_failure() {
        let w = WorldConfig::default();
        let trajs = gen_random(300, 100, &w, 5);
        let mut failures = 0;
        for t in &trajs {
            t.validate(&w).unwrap();
            let last = t.labels.len() - 1;
            assert!(t.labels[..last].iter().all(|&l| l == 1));
            if t.labels[last] < 0 {
                failures += 1;
            } else {
                assert_eq!(t.len(), 100);
            }
        }
        assert!(failures > 0);
    }

    #[test]
    fn random_hit_rate_matches_brute_force_estimate() {
        // independent estimate: rollouts from the same start distribution
        // with a separate RNG, counting obstacle hits within 100 steps
        let w = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 4000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut s = loop {
                let s = DubinsState::new(
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                );
                if w.failure.margin(&s) >= 0.0 {
                    break s;
                }
            };
            for _ in 0..100 {
                s = step(&s, random_action(&mut rng), &w);
                if w.failure.margin(&s) < 0.0 {
                    hits += 1;
                    break;
                }
            }
        }
        let p = hits as f64 / trials as f64;
        let trajs = gen_random(2000, 100, &w, 17);
        let q = trajs.iter().filter(|t| *t.labels.last().unwrap() < 0).count() as f64 / 2000.0;
        let se = (p * (1.0 - p) * (1.0 / 4000.0 + 1.0 / 2000.0)).sqrt();
        assert!((p - q).abs() < 4.0 * se, "brute force {p} vs generator {q}");
    }

    #[test]
    fn generation_is_deterministic() {
        let (vg, w) = gt();
        let a = gen_expert(&vg, 20, 30, 0.1, &w, 8).unwrap();
        let b = gen_expert(&vg, 20, 30, 0.1, &w, 8).unwrap();
        assert_eq!(a, b);
        let d = |trajectories| Dataset {
            trajectories,
            seed: 8,
            provenance: Provenance::default(),
        };
        assert_eq!(d(a).to_bytes(None).unwrap(), d(b).to_bytes(None).unwrap());
        assert_eq!(gen_random(20, 30, &w, 8), gen_random(20, 30, &w, 8));
    }

    #[test]
    fn split_partitions() {
        let w = WorldConfig::default();
        let d = Dataset {
            trajectories: gen_random(50, 20, &w, 2),
            seed: 2,
            provenance: Provenance {
                n_expert: 0,
                n_random: 50,
                horizon: 20,
            },
        };
        let (train, calib) = split(&d, 0, 1).unwrap();
        assert_eq!(train, d);
        assert!(calib.is_empty());
        let (train, calib) = split(&d, 17, 1).unwrap();
        assert_eq!(train.len() + calib.len(), d.len());
        assert_eq!(calib.len(), 17);
        for t in &d.trajectories {
            let a = train.trajectories.iter().filter(|x| *x == t).count();
            let b = calib.trajectories.iter().filter(|x| *x == t).count();
            assert_eq!(a + b, 1);
        }
        assert!(matches!(split(&d, 50, 1), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn jsonl_roundtrip_and_tamper_detection() {
        let w = WorldConfig::default();
        let d = Dataset {
            trajectories: gen_random(5, 10, &w, 4),
            seed: 4,
            provenance: Provenance {
                n_expert: 0,
                n_random: 5,
                horizon: 10,
            },
        };
        let bytes = d.to_bytes(Some("abc")).unwrap();
        let (back, hash) = Dataset::from_reader(&bytes[..], &w).unwrap();
        assert_eq!(back, d);
        assert_eq!(hash.as_deref(), Some("abc"));
        let mut bad = d.clone();
        bad.trajectories[0].states[1].px += 1e-9;
        let bytes = bad.to_bytes(None).unwrap();
        assert!(matches!(
            Dataset::from_reader(&bytes[..], &w),
            Err(Error::InconsistentTrajectory(_))
        ));
    }
}

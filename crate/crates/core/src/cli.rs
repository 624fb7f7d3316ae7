//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every artifact records the hash of the config it was built under, and
//! every command refuses inputs whose hash differs from the current config.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::artifact::check_config_hash;
use crate::config::{ExperimentConfig, MarginKind};
use crate::conformal::CalibrationResult;
use crate::datagen::Dataset;
use crate::dynamics::ActionId;
use crate::ensemble::{EnsembleParams, MarginModel, MarginSource};
use crate::eval::{challenging_starts, classify_vs_ground_truth, safety_rate, uniform_task_policy, Report};
use crate::filter::{read_logs, rollout, write_logs, FilterContext, RolloutResult, SafetySolution, TaskPolicy};
use crate::grid::ValueGrid;
use crate::pipeline;
use crate::safelearn::QFunction;
use crate::serve::{self, ServeContext};
use crate::uncertainty::{KnownDynamics, TransitionSource};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const CALIB_FILE: &str = "calib.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "reachguard",
    version,
    about = "Uncertainty-aware reachability safety filter for the Dubins car"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert and random trajectories, split into train and calib sets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth grid to drive the expert; solved on the fly if absent.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Solve the ground-truth value grid.
    SolveGt {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dynamics ensemble (and the failure classifier if configured).
    TrainEnsemble {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Failure classifier output; defaults to `<out>.margin`.
        #[arg(long)]
        margin_out: Option<PathBuf>,
    },
    /// Calibrate the OOD threshold on the calibration trajectories.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ensemble: PathBuf,
        /// gen-data directory or a calibration dataset file.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the uncertainty-aware value grid.
    SolveFilter {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ensemble: PathBuf,
        /// Calibration result.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        margin: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a Q function from imagined rollouts.
    TrainQ {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        /// Calibration result.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        margin: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a solution against the ground truth and run filtered rollouts.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Value grid or Q function.
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Filter with this ensemble; true dynamics otherwise.
        #[arg(long, requires = "calib")]
        ensemble: Option<PathBuf>,
        #[arg(long, requires = "ensemble")]
        calib: Option<PathBuf>,
        #[arg(long)]
        margin: Option<PathBuf>,
        /// Replay the task actions of a rollout log through the filter.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Write filtered rollout logs here.
        #[arg(long)]
        logs_out: Option<PathBuf>,
    },
    /// Run the teleoperation service.
    Serve {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        margin: Option<PathBuf>,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Loaded config plus its hash.
struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
}

impl Ctx {
    fn load(arg: &ConfigArg) -> anyhow::Result<Self> {
        let cfg =
            ExperimentConfig::load(&arg.config).with_context(|| format!("loading config {}", arg.config.display()))?;
        let hash = cfg.hash();
        Ok(Self { cfg, hash })
    }

    fn check(&self, what: &Path, artifact_hash: Option<String>) -> anyhow::Result<()> {
        check_config_hash(artifact_hash.as_deref(), &self.hash).with_context(|| format!("{}", what.display()))
    }

    fn value_grid(&self, path: &Path) -> anyhow::Result<ValueGrid> {
        let (vg, h) = ValueGrid::load(path).with_context(|| format!("loading {}", path.display()))?;
        self.check(path, h)?;
        Ok(vg)
    }

    fn ensemble(&self, path: &Path) -> anyhow::Result<EnsembleParams> {
        let (e, h) = EnsembleParams::load(path).with_context(|| format!("loading {}", path.display()))?;
        self.check(path, h)?;
        Ok(e)
    }

    fn calibration(&self, path: &Path) -> anyhow::Result<CalibrationResult> {
        let (c, h) = CalibrationResult::load(path).with_context(|| format!("loading {}", path.display()))?;
        self.check(path, h)?;
        if c.degenerate {
            warn_degenerate(&c);
        }
        Ok(c)
    }

    fn dataset(&self, path: &Path) -> anyhow::Result<Dataset> {
        let (d, h) = Dataset::load(path, &self.cfg.world).with_context(|| format!("loading {}", path.display()))?;
        self.check(path, h)?;
        Ok(d)
    }

    fn margin(&self, path: Option<&Path>) -> anyhow::Result<MarginSource> {
        let learned = match (self.cfg.margin.source, path) {
            (MarginKind::Learned, Some(p)) => {
                let (m, h) = MarginModel::load(p).with_context(|| format!("loading {}", p.display()))?;
                self.check(p, h)?;
                Some(m)
            }
            (MarginKind::Learned, None) => bail!("config uses a learned margin; pass --margin"),
            (MarginKind::Analytic, _) => None,
        };
        Ok(pipeline::margin_source(&self.cfg, learned)?)
    }

    /// A value grid or a Q function, told apart by the file magic.
    fn solution(&self, path: &Path, marg: Option<&Path>, epsilon: f64) -> anyhow::Result<SafetySolution> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if bytes.starts_with(b"RGQFUNC/") {
            let (q, h) = QFunction::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
            self.check(path, h)?;
            Ok(SafetySolution::Q {
                q,
                marg: self.margin(marg)?,
                gamma: self.cfg.qtrain.gamma,
            })
        } else {
            let (vg, h) = ValueGrid::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
            self.check(path, h)?;
            Ok(pipeline::grid_solution(&self.cfg, vg, epsilon))
        }
    }
}

fn data_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn warn_degenerate(c: &CalibrationResult) {
    eprintln!(
        "WARNING: degenerate calibration: rank exceeds N = {}; the threshold is infinite and OOD detection is disabled",
        c.n
    );
}

fn default_margin_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".margin");
    PathBuf::from(p)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out, gt } => {
            let c = Ctx::load(&cfg)?;
            let vg = match gt {
                Some(p) => c.value_grid(&p)?,
                None => pipeline::ground_truth(&c.cfg)?,
            };
            let (train, calib) = pipeline::generate_data(&c.cfg, &vg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            train.save(&out.join(TRAIN_FILE), Some(&c.hash))?;
            calib.save(&out.join(CALIB_FILE), Some(&c.hash))?;
            println!(
                "train: {} trajectories, calib: {} trajectories",
                train.len(),
                calib.len()
            );
        }
        Command::SolveGt { cfg, out } => {
            let c = Ctx::load(&cfg)?;
            let vg = pipeline::ground_truth(&c.cfg)?;
            vg.save(&out, Some(&c.hash))?;
            println!(
                "converged after {} sweeps, residual {:e}",
                vg.meta.iterations, vg.meta.residual
            );
        }
        Command::TrainEnsemble {
            cfg,
            data,
            out,
            margin_out,
        } => {
            let c = Ctx::load(&cfg)?;
            let train = c.dataset(&data_file(&data, TRAIN_FILE))?;
            let ens = pipeline::train_ensemble(&c.cfg, &train)?;
            ens.save(&out, Some(&c.hash))?;
            println!("member losses: {:?}", ens.final_losses);
            if let Some(m) = pipeline::train_margin(&c.cfg, &train)? {
                if m.degenerate {
                    eprintln!("WARNING: failure classifier saw a single class");
                }
                m.save(&margin_out.unwrap_or_else(|| default_margin_path(&out)), Some(&c.hash))?;
            }
        }
        Command::Calibrate {
            cfg,
            ensemble,
            calib,
            out,
        } => {
            let c = Ctx::load(&cfg)?;
            let ens = c.ensemble(&ensemble)?;
            let calib = c.dataset(&data_file(&calib, CALIB_FILE))?;
            let res = pipeline::calibrate_threshold(&c.cfg, &ens, &calib)?;
            res.save(&out, Some(&c.hash))?;
            println!("epsilon_hat = {}", res.epsilon_hat);
            if res.degenerate {
                warn_degenerate(&res);
            }
        }
        Command::SolveFilter {
            cfg,
            ensemble,
            calib,
            margin,
            out,
        } => {
            let c = Ctx::load(&cfg)?;
            let ens = c.ensemble(&ensemble)?;
            let cal = c.calibration(&calib)?;
            let marg = c.margin(margin.as_deref())?;
            let vg = pipeline::solve_filter(&c.cfg, &ens, &marg, cal.epsilon_hat)?;
            vg.save(&out, Some(&c.hash))?;
            println!(
                "{} sweeps, residual {:e}, converged: {}",
                vg.meta.iterations, vg.meta.residual, vg.meta.converged
            );
        }
        Command::TrainQ {
            cfg,
            data,
            ensemble,
            calib,
            margin,
            out,
        } => {
            let c = Ctx::load(&cfg)?;
            let train = c.dataset(&data_file(&data, TRAIN_FILE))?;
            let ens = c.ensemble(&ensemble)?;
            let cal = c.calibration(&calib)?;
            let marg = c.margin(margin.as_deref())?;
            let (q, stats) = pipeline::fit_q(&c.cfg, &train, &ens, &marg, &cal)?;
            q.save(&out, Some(&c.hash))?;
            println!(
                "{} gradient steps over {} transitions, final loss {:e}",
                stats.grad_steps, stats.transitions, stats.final_loss
            );
        }
        Command::Evaluate {
            cfg,
            solution,
            gt,
            out,
            ensemble,
            calib,
            margin,
            replay,
            logs_out,
        } => {
            let c = Ctx::load(&cfg)?;
            let args = EvalArgs {
                solution: &solution,
                gt: &gt,
                ensemble: ensemble.as_deref(),
                calib: calib.as_deref(),
                margin: margin.as_deref(),
                replay: replay.as_deref(),
                logs_out: logs_out.as_deref(),
            };
            let report = evaluate(&c, &args)?;
            report.save(&out)?;
            for (k, v) in &report.metrics {
                println!("{k} = {v}");
            }
        }
        Command::Serve {
            cfg,
            solution,
            ensemble,
            calib,
            margin,
            port,
            host,
        } => {
            let c = Ctx::load(&cfg)?;
            let ens = c.ensemble(&ensemble)?;
            let cal = c.calibration(&calib)?;
            let sol = c.solution(&solution, margin.as_deref(), cal.epsilon_hat)?;
            let starts = ServeContext::safe_starts(&sol, &c.cfg.grid, c.cfg.filter.delta + 0.1);
            if starts.is_empty() {
                bail!("solution has no states above the reset threshold");
            }
            let ctx = Arc::new(ServeContext {
                sol,
                model: TransitionSource::Ensemble {
                    ens,
                    method: c.cfg.ood.method,
                },
                world: c.cfg.world.clone(),
                epsilon: cal.epsilon_hat,
                delta: c.cfg.filter.delta,
                starts,
                contour_grid: c.cfg.grid,
                seed: c.cfg.eval.seed,
                tick: Duration::from_secs_f64(c.cfg.world.dt),
            });
            let listener =
                TcpListener::bind((host.as_str(), port)).with_context(|| format!("binding {host}:{port}"))?;
            eprintln!("listening on ws://{}", listener.local_addr()?);
            serve::serve(listener, ctx)?;
        }
    }
    Ok(())
}

struct EvalArgs<'a> {
    solution: &'a Path,
    gt: &'a Path,
    ensemble: Option<&'a Path>,
    calib: Option<&'a Path>,
    margin: Option<&'a Path>,
    replay: Option<&'a Path>,
    logs_out: Option<&'a Path>,
}

fn evaluate(c: &Ctx, a: &EvalArgs<'_>) -> anyhow::Result<Report> {
    let cfg = &c.cfg;
    let gt = c.value_grid(a.gt)?;
    let (model, epsilon) = match (a.ensemble, a.calib) {
        (Some(e), Some(k)) => (
            TransitionSource::Ensemble {
                ens: c.ensemble(e)?,
                method: cfg.ood.method,
            },
            c.calibration(k)?.epsilon_hat,
        ),
        _ => (TransitionSource::Known(KnownDynamics(cfg.world.clone())), f64::INFINITY),
    };
    let sol = c.solution(a.solution, a.margin, epsilon)?;

    let mut report = Report {
        config_hash: Some(c.hash.clone()),
        ..Report::default()
    };
    report.insert("epsilon", epsilon.is_finite().then_some(epsilon))?;
    report.insert("delta", cfg.filter.delta)?;
    report.insert("model", if a.ensemble.is_some() { "ensemble" } else { "known" })?;

    let cls = classify_vs_ground_truth(&|s| sol.values(s), &gt, &cfg.grid, 0.0, None)?;
    report.add_classification("monitor", &cls)?;

    let fctx = FilterContext {
        sol: &sol,
        model: &model,
        epsilon,
        delta: cfg.filter.delta,
        world: &cfg.world,
    };
    let ev = &cfg.eval;
    let starts = challenging_starts(&gt, &cfg.world.failure, ev.n_challenging, ev.seed)?;
    let policy: &(dyn Fn(usize) -> Box<TaskPolicy<'static>> + Sync) = &uniform_task_policy;
    let filtered = safety_rate(&starts, policy, Some(&fctx), ev.horizon, &cfg.world, ev.seed)?;
    let unfiltered = safety_rate(&starts, policy, None, ev.horizon, &cfg.world, ev.seed)?;
    report.add_safety("filtered", &filtered)?;
    report.add_safety("unfiltered", &unfiltered)?;

    if let Some(out) = a.logs_out {
        let runs = starts
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut p = uniform_task_policy(i);
                rollout(
                    *s,
                    &mut *p,
                    Some(&fctx),
                    ev.horizon,
                    &cfg.world,
                    ev.seed.wrapping_add(i as u64),
                )
            })
            .collect::<crate::Result<Vec<RolloutResult>>>()?;
        write_logs(out, &runs)?;
    }

    if let Some(path) = a.replay {
        let logs = read_logs(path).with_context(|| format!("reading {}", path.display()))?;
        if logs.is_empty() {
            bail!("{} holds no rollouts", path.display());
        }
        let starts: Vec<_> = logs.iter().map(|l| l[0].state).collect();
        let actions: Vec<Vec<_>> = logs.iter().map(|l| l.iter().map(|r| r.a_task).collect()).collect();
        let horizon = actions.iter().map(Vec::len).max().unwrap_or(0);
        let scripted = |i: usize| -> Box<TaskPolicy<'static>> {
            let seq = actions[i].clone();
            Box::new(move |t, _, _| seq.get(t).copied().unwrap_or(ActionId::STRAIGHT))
        };
        let replayed = safety_rate(&starts, &scripted, Some(&fctx), horizon, &cfg.world, ev.seed)?;
        report.add_safety("replay", &replayed)?;
    }
    Ok(report)
}

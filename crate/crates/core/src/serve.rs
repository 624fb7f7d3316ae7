//! Teleoperation service: a fixed-rate simulation loop per WebSocket
//! connection that filters the client's steering and streams state,
//! decisions and value contours as versioned JSON messages.

use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::dynamics::{step, ActionId, DubinsState, FailureSpec, WorldConfig};
use crate::error::{Error, Result};
use crate::filter::{filter_step, FilterContext, SafetySolution};
use crate::grid::Grid3;
use crate::uncertainty::{TransitionModel, TransitionSource};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Action {
        action: ActionId,
    },
    /// Restart from a sampled safe start, or from `state` when given.
    Reset {
        #[serde(default)]
        state: Option<DubinsState>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    State {
        t: usize,
        px: f64,
        py: f64,
        theta: f64,
        value_here: f64,
        u_per_action: [f64; 3],
        epsilon: Option<f64>,
        delta: f64,
        margin: f64,
    },
    Decision {
        t: usize,
        a_task: ActionId,
        /// `None` on HALT.
        executed: Option<ActionId>,
        intervened: bool,
        halted: bool,
        value_next: f64,
    },
    Meta {
        failure: FailureSpec,
        bbox: f64,
        theta: f64,
        level: f64,
        /// Level-set segments `[x0, y0, x1, y1]` of the value slice at `theta`.
        contour: Vec<[f64; 4]>,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

pub fn encode(msg: &ServerMsg) -> String {
    serde_json::to_string(&Envelope {
        v: PROTOCOL_VERSION,
        body: msg.clone(),
    })
    .expect("server messages serialize")
}

pub fn decode_client(text: &str) -> Result<ClientMsg> {
    let env: Envelope<ClientMsg> = serde_json::from_str(text)?;
    if env.v != PROTOCOL_VERSION {
        return Err(Error::Format(format!("unsupported protocol version {}", env.v)));
    }
    Ok(env.body)
}

/// Line segments of the `level` set of a scalar field on a regular grid.
/// `f[i * ny + j]` is the value at `(xs[i], ys[j])`. Saddle cells are
/// disambiguated by the cell-centre average.
pub fn marching_squares(f: &[f64], xs: &[f64], ys: &[f64], level: f64) -> Vec<[f64; 4]> {
    let (nx, ny) = (xs.len(), ys.len());
    assert_eq!(f.len(), nx * ny);
    let mut segs = Vec::new();
    let lerp = |a: (f64, f64, f64), b: (f64, f64, f64)| {
        let t = (level - a.2) / (b.2 - a.2);
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    };
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            // corners counter-clockwise from bottom-left
            let c = [
                (xs[i], ys[j], f[i * ny + j]),
                (xs[i + 1], ys[j], f[(i + 1) * ny + j]),
                (xs[i + 1], ys[j + 1], f[(i + 1) * ny + j + 1]),
                (xs[i], ys[j + 1], f[i * ny + j + 1]),
            ];
            let case = c
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, p)| acc | (u8::from(p.2 > level) << k));
            if case == 0 || case == 15 {
                continue;
            }
            // edge k joins corner k and k+1
            let edge = |k: usize| lerp(c[k], c[(k + 1) % 4]);
            let mut push = |a: usize, b: usize| {
                let (p, q) = (edge(a), edge(b));
                segs.push([p.0, p.1, q.0, q.1]);
            };
            let centre_above = c.iter().map(|p| p.2).sum::<f64>() / 4.0 > level;
            match case {
                1 | 14 => push(3, 0),
                2 | 13 => push(0, 1),
                3 | 12 => push(3, 1),
                4 | 11 => push(1, 2),
                6 | 9 => push(0, 2),
                7 | 8 => push(2, 3),
                5 => {
                    if centre_above {
                        push(0, 1);
                        push(2, 3);
                    } else {
                        push(3, 0);
                        push(1, 2);
                    }
                }
                10 => {
                    if centre_above {
                        push(3, 0);
                        push(1, 2);
                    } else {
                        push(0, 1);
                        push(2, 3);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    segs
}

/// Immutable inputs shared by all sessions.
pub struct ServeContext {
    pub sol: SafetySolution,
    pub model: TransitionSource,
    pub world: WorldConfig,
    pub epsilon: f64,
    pub delta: f64,
    /// Reset states.
    pub starts: Vec<DubinsState>,
    /// Grid for contour slices.
    pub contour_grid: Grid3,
    pub seed: u64,
    pub tick: Duration,
}

impl ServeContext {
    /// Grid nodes of `contour_grid` with value above `min_value`.
    pub fn safe_starts(sol: &SafetySolution, grid: &Grid3, min_value: f64) -> Vec<DubinsState> {
        let nodes: Vec<DubinsState> = grid.nodes().collect();
        let vals = sol.values(&nodes);
        nodes
            .into_iter()
            .zip(vals)
            .filter(|(_, v)| *v > min_value)
            .map(|(s, _)| s)
            .collect()
    }

    fn filter_ctx<'a>(&'a self, model: &'a dyn TransitionModel) -> FilterContext<'a> {
        FilterContext {
            sol: &self.sol,
            model,
            epsilon: self.epsilon,
            delta: self.delta,
            world: &self.world,
        }
    }

    /// Contour of `V = delta` on the heading slice nearest `theta`.
    pub fn contour(&self, slice: usize) -> Vec<[f64; 4]> {
        let g = &self.contour_grid;
        let theta = g.node(g.index(0, 0, slice)).theta;
        let xs: Vec<f64> = (0..g.nx).map(|i| g.node(g.index(i, 0, 0)).px).collect();
        let ys: Vec<f64> = (0..g.ny).map(|j| g.node(g.index(0, j, 0)).py).collect();
        let states: Vec<DubinsState> = xs
            .iter()
            .flat_map(|&x| ys.iter().map(move |&y| DubinsState::new(x, y, theta)))
            .collect();
        marching_squares(&self.sol.values(&states), &xs, &ys, self.delta)
    }

    fn slice_of(&self, theta: f64) -> usize {
        let g = &self.contour_grid;
        let k = ((theta + std::f64::consts::PI) / g.dtheta()).round() as usize;
        k % g.ntheta
    }
}

/// One teleoperation session, independent of the transport.
pub struct Session {
    ctx: Arc<ServeContext>,
    rng: ChaCha8Rng,
    pub state: DubinsState,
    pub t: usize,
    pub halted: bool,
    pending: Option<ActionId>,
    slice: Option<usize>,
    outbox: Vec<ServerMsg>,
}

impl Session {
    pub fn new(ctx: Arc<ServeContext>, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: DubinsState::new(0.0, 0.0, 0.0),
            t: 0,
            halted: false,
            pending: None,
            slice: None,
            outbox: Vec::new(),
            ctx,
        };
        s.reset(None);
        s
    }

    pub fn reset(&mut self, state: Option<DubinsState>) {
        self.state = state
            .or_else(|| self.ctx.starts.choose(&mut self.rng).copied())
            .unwrap_or_else(|| DubinsState::new(0.0, 0.0, 0.0));
        self.t = 0;
        self.halted = false;
        self.pending = None;
        self.slice = None;
    }

    pub fn handle_text(&mut self, text: &str) {
        match decode_client(text) {
            Ok(ClientMsg::Action { action }) => self.pending = Some(action),
            Ok(ClientMsg::Reset { state }) => match state {
                Some(s) if !s.is_finite() => self.outbox.push(ServerMsg::Error {
                    message: "reset state must be finite".into(),
                }),
                _ => self.reset(state.map(|s| DubinsState::new(s.px, s.py, s.theta))),
            },
            Err(e) => self.outbox.push(ServerMsg::Error {
                message: format!("malformed message: {e}"),
            }),
        }
    }

    /// Advance one tick; frozen sessions only flush queued errors.
    pub fn tick(&mut self) -> Vec<ServerMsg> {
        let mut out = std::mem::take(&mut self.outbox);
        if self.halted {
            return out;
        }
        let ctx = Arc::clone(&self.ctx);
        let model = &ctx.model;
        let z = self.state;
        let slice = ctx.slice_of(z.theta);
        if self.slice != Some(slice) {
            self.slice = Some(slice);
            out.push(ServerMsg::Meta {
                failure: ctx.world.failure.clone(),
                bbox: ctx.world.bbox,
                theta: ctx.contour_grid.node(ctx.contour_grid.index(0, 0, slice)).theta,
                level: ctx.delta,
                contour: ctx.contour(slice),
            });
        }
        let mut u = [0.0; 3];
        for a in ActionId::ALL {
            match model.predict_one(&z, a) {
                Ok(p) => u[a.index()] = p.u,
                Err(e) => out.push(ServerMsg::Error { message: e.to_string() }),
            }
        }
        out.push(ServerMsg::State {
            t: self.t,
            px: z.px,
            py: z.py,
            theta: z.theta,
            value_here: ctx.sol.value(&z),
            u_per_action: u,
            epsilon: ctx.epsilon.is_finite().then_some(ctx.epsilon),
            delta: ctx.delta,
            margin: ctx.world.failure.margin(&z),
        });
        let a_task = self.pending.take().unwrap_or(ActionId::STRAIGHT);
        match filter_step(&z, a_task, &ctx.filter_ctx(model)) {
            Ok(d) => {
                out.push(ServerMsg::Decision {
                    t: self.t,
                    a_task,
                    executed: d.executed,
                    intervened: d.intervened,
                    halted: d.halted,
                    value_next: d.value_next,
                });
                match d.executed {
                    Some(a) => {
                        self.state = step(&z, a, &ctx.world);
                        self.t += 1;
                    }
                    None => self.halted = true,
                }
            }
            Err(e) => out.push(ServerMsg::Error { message: e.to_string() }),
        }
        out
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

fn run_connection(stream: TcpStream, ctx: Arc<ServeContext>, seed: u64) -> Result<()> {
    let mut ws: WebSocket<TcpStream> =
        tungstenite::accept(stream).map_err(|e| Error::Format(format!("handshake failed: {e}")))?;
    let mut session = Session::new(Arc::clone(&ctx), seed);
    let mut next_tick = Instant::now();
    loop {
        loop {
            let now = Instant::now();
            if now >= next_tick {
                break;
            }
            ws.get_mut().set_read_timeout(Some(next_tick - now))?;
            match ws.read() {
                Ok(Message::Text(t)) => session.handle_text(&t),
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => break,
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(Error::Format(format!("socket error: {e}"))),
            }
        }
        for m in session.tick() {
            if let Err(e) = ws.send(Message::text(encode(&m))) {
                log::debug!("session ended: {e}");
                return Ok(());
            }
        }
        next_tick += ctx.tick;
        if next_tick < Instant::now() {
            next_tick = Instant::now();
        }
    }
}

/// Accept connections forever, one thread per session.
pub fn serve(listener: TcpListener, ctx: Arc<ServeContext>) -> Result<()> {
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let ctx = Arc::clone(&ctx);
        let seed = ctx.seed.wrapping_add(i as u64);
        std::thread::spawn(move || {
            if let Err(e) = run_connection(stream, ctx, seed) {
                log::warn!("session error: {e}");
            }
        });
    }
    Ok(())
}

/// [`serve`] on a background thread.
pub fn spawn(listener: TcpListener, ctx: Arc<ServeContext>) -> JoinHandle<Result<()>> {
    std::thread::spawn(move || serve(listener, ctx))
}

//! Live teleoperation service: one sim loop, any number of websocket clients.

use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use log::{debug, info, warn};
use nalgebra::DVector;
use serde_json::{json, Value};
use taskadapt_core::adaptation::{LikelihoodReport, OperatorInput};
use taskadapt_core::operators::{Observation, OperatorKind};
use taskadapt_core::policies::RotationMode;
use taskadapt_core::scenario::Scenario;
use taskadapt_core::sim::{Episode, SimError};
use taskadapt_core::trace::{EpisodeTrace, Termination, TraceError};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::runtime::Runtime;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::protocol::CloseFrame;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::protocol::{decode, encode, Hello, InputFrame, Instruction, Message, Role, StateFrame, TargetInfo};

/// Inputs older than this are not applied.
pub const DEAD_MAN_TIMEOUT: Duration = Duration::from_millis(250);
/// State frames go out on every n-th tick in real time.
pub const BROADCAST_EVERY: u64 = 2;
pub const DEFAULT_PORT: u16 = 8765;

const BROADCAST_CAPACITY: usize = 256;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("port {port} is already in use")]
    PortBusy { port: u16 },
    #[error("cannot start service: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("sim loop stopped unexpectedly")]
    Stopped,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clock {
    /// 100 Hz against the wall clock, frames at 50 Hz.
    RealTime,
    /// Each tick waits for the operator's answer to its frame, up to `timeout`.
    /// The loop starts once an operator has joined; without one, ticks get
    /// zero input.
    Lockstep { timeout: Duration },
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub clock: Clock,
    pub seed: u64,
    /// `None` keeps the scenario's episode length.
    pub max_ticks: Option<u64>,
    pub stop_on_completion: bool,
    pub trace_path: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(port: u16) -> Self {
        Self {
            addr: SocketAddr::from((Ipv4Addr::LOCALHOST, port)),
            clock: Clock::RealTime,
            seed: 0,
            max_ticks: None,
            stop_on_completion: false,
            trace_path: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Pending {
    u: [f64; 3],
    sequence: u64,
    received: Instant,
}

#[derive(Debug, Default)]
struct Slot {
    input: Option<Pending>,
    operator: Option<u64>,
    next_id: u64,
    shutdown: bool,
    instruction: Option<Arc<str>>,
    clients: Vec<Value>,
}

/// Single-slot mailbox between network readers and the sim loop.
#[derive(Debug, Default)]
struct Shared {
    slot: Mutex<Slot>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Slot> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn register(&self) -> u64 {
        let mut s = self.lock();
        s.next_id += 1;
        s.next_id
    }

    fn hello(&self, id: u64, hello: &Hello) -> Role {
        let mut s = self.lock();
        let granted = match hello.role {
            Role::Operator if s.operator.is_none() || s.operator == Some(id) => {
                if s.operator != Some(id) {
                    s.operator = Some(id);
                    s.input = None;
                }
                Role::Operator
            }
            _ => Role::Observer,
        };
        s.clients.push(json!({"id": id, "name": hello.name, "requested": hello.role, "granted": granted}));
        self.cv.notify_all();
        granted
    }

    fn deposit(&self, id: u64, frame: &InputFrame) {
        let mut s = self.lock();
        if s.operator != Some(id) {
            debug!("client {id}: input ignored, not the operator");
            return;
        }
        if let Some(prev) = &s.input {
            if frame.sequence < prev.sequence {
                debug!("client {id}: sequence {} after {} discarded", frame.sequence, prev.sequence);
                return;
            }
        }
        let u = OperatorInput::new(DVector::from_row_slice(&frame.u_h), frame.client_time).u;
        s.input = Some(Pending { u: [u[0], u[1], u[2]], sequence: frame.sequence, received: Instant::now() });
        self.cv.notify_all();
    }

    fn disconnect(&self, id: u64) {
        let mut s = self.lock();
        if s.operator == Some(id) {
            info!("operator {id} left, control released");
            s.operator = None;
            s.input = None;
        }
        self.cv.notify_all();
    }

    fn shutdown(&self) {
        self.lock().shutdown = true;
        self.cv.notify_all();
    }

    fn is_shutdown(&self) -> bool {
        self.lock().shutdown
    }

    fn fresh_input(&self) -> [f64; 3] {
        match &self.lock().input {
            Some(p) if p.received.elapsed() <= DEAD_MAN_TIMEOUT => p.u,
            _ => [0.0; 3],
        }
    }

    fn input_for(&self, tick: u64, timeout: Duration) -> [f64; 3] {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        loop {
            match &s.input {
                Some(p) if p.sequence >= tick => return p.u,
                _ => {}
            }
            let now = Instant::now();
            if s.shutdown || s.operator.is_none() || now >= deadline {
                return [0.0; 3];
            }
            s = self.cv.wait_timeout(s, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    /// Blocks until an operator is present; false on shutdown.
    fn await_operator(&self) -> bool {
        let mut s = self.lock();
        while s.operator.is_none() && !s.shutdown {
            s = self.cv.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        !s.shutdown
    }
}

fn mode_of(scenario: &Scenario, rotation_policy: usize) -> RotationMode {
    if rotation_policy == scenario.config.targets.len() {
        RotationMode::Horizontal
    } else {
        RotationMode::Vertical
    }
}

/// The inspection sequence as sent to clients; `active_target` indexes it.
pub fn target_list(scenario: &Scenario) -> Vec<TargetInfo> {
    scenario
        .tasks
        .iter()
        .map(|t| {
            let cfg = &scenario.config.targets[t.position_policy];
            TargetInfo { pose: t.target_pose, height: cfg.height, arc: cfg.arc, mode: mode_of(scenario, t.rotation_policy) }
        })
        .collect()
}

pub fn instruction_for(scenario: &Scenario, task: Option<usize>) -> Instruction {
    match task {
        Some(k) => {
            let t = &scenario.tasks[k];
            let mode = mode_of(scenario, t.rotation_policy);
            let label = match mode {
                RotationMode::Horizontal => "horizontal",
                RotationMode::Vertical => "vertical",
            };
            Instruction {
                target: Some(k),
                mode: Some(mode),
                text: format!("Inspect target {} of {}, tool {label}", k + 1, scenario.tasks.len()),
            }
        }
        None => Instruction { target: None, mode: None, text: "Inspection sequence complete".into() },
    }
}

fn state_frame(
    scenario: &Scenario,
    obs: &Observation<'_>,
    report: Option<&LikelihoodReport>,
    targets: &[TargetInfo],
) -> StateFrame {
    let n = obs.alpha.len();
    let (likelihood, conditional, prior) = match report {
        Some(r) => (r.combined.clone(), r.conditional.clone(), r.prior.clone()),
        None => (vec![0.0; n], vec![0.0; n], vec![0.0; n]),
    };
    let h = &obs.view.h;
    StateFrame {
        tick: obs.tick,
        t: obs.t,
        pose: obs.state.pose.to_array(),
        surface_coords: [h[0], h[1], h[2]],
        twist: obs.state.twist.to_vector().into(),
        alpha: obs.alpha.to_vec(),
        likelihood,
        conditional,
        prior,
        active_target: obs.task_index,
        target_list: targets.to_vec(),
        distance_to_surface: scenario.cylinder.frame(&obs.state.pose).map(|f| f.values[2]).unwrap_or(0.0),
    }
}

fn sim_loop(
    scenario: Arc<Scenario>,
    config: ServiceConfig,
    shared: Arc<Shared>,
    frames: broadcast::Sender<Arc<str>>,
) -> Result<EpisodeTrace, ServiceError> {
    let mut ep = Episode::new(Arc::clone(&scenario), config.seed, OperatorKind::Live);
    ep.set_stop_on_completion(config.stop_on_completion);
    if let Some(n) = config.max_ticks {
        ep.set_max_ticks(n);
    }
    let targets = target_list(&scenario);
    let dt = scenario.dt();
    let mut report: Option<LikelihoodReport> = None;
    let mut task: Option<Option<usize>> = None;

    let lockstep = matches!(config.clock, Clock::Lockstep { .. });
    if lockstep && !shared.await_operator() {
        return close_session(ep, Termination::Shutdown, &shared, &config);
    }
    let start = Instant::now();
    let termination = loop {
        if shared.is_shutdown() {
            break Termination::Shutdown;
        }
        if let Some(reason) = ep.termination() {
            break reason;
        }
        let tick = ep.tick();
        if config.clock == Clock::RealTime {
            let due = start + Duration::from_secs_f64(dt * tick as f64);
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        let send_frame = lockstep || tick.is_multiple_of(BROADCAST_EVERY);
        let step = ep.step(|obs| {
            if task != Some(obs.task_index) {
                task = Some(obs.task_index);
                let text: Arc<str> = encode(&Message::Instruction(instruction_for(&scenario, obs.task_index))).into();
                shared.lock().instruction = Some(Arc::clone(&text));
                let _ = frames.send(text);
            }
            if send_frame {
                let frame = state_frame(&scenario, obs, report.as_ref(), &targets);
                let _ = frames.send(encode(&Message::State(frame)).into());
            }
            let u = match config.clock {
                Clock::RealTime => shared.fresh_input(),
                Clock::Lockstep { timeout } => shared.input_for(obs.tick, timeout),
            };
            OperatorInput { u: DVector::from_row_slice(&u), timestamp: obs.t }
        });
        match step {
            Ok(info) => report = Some(info.report),
            Err(SimError::Diverged { time, speed, trace }) => {
                warn!("episode diverged at t={time:.2} s (speed {speed:.2})");
                let mut trace = *trace;
                attach_clients(&mut trace, &shared, &config);
                save(&trace, &config)?;
                return Ok(trace);
            }
            Err(e) => return Err(e.into()),
        }
    };
    close_session(ep, termination, &shared, &config)
}

fn attach_clients(trace: &mut EpisodeTrace, shared: &Shared, config: &ServiceConfig) {
    let clock = match config.clock {
        Clock::RealTime => "realtime",
        Clock::Lockstep { .. } => "lockstep",
    };
    trace.client = Some(json!({"clock": clock, "clients": shared.lock().clients.clone()}));
}

fn save(trace: &EpisodeTrace, config: &ServiceConfig) -> Result<(), ServiceError> {
    if let Some(path) = &config.trace_path {
        trace.save(path)?;
        info!("session trace written to {}", path.display());
    }
    Ok(())
}

fn close_session(
    ep: Episode,
    termination: Termination,
    shared: &Shared,
    config: &ServiceConfig,
) -> Result<EpisodeTrace, ServiceError> {
    let mut trace = ep.finish(termination);
    attach_clients(&mut trace, shared, config);
    save(&trace, config)?;
    Ok(trace)
}

async fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    frames: broadcast::Sender<Arc<str>>,
    mut done: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tokio::spawn(client_session(stream, peer, Arc::clone(&shared), frames.subscribe(), done.clone()));
                }
                Err(e) => warn!("accept failed: {e}"),
            },
            _ = done.changed() => break,
        }
    }
}

async fn client_session(
    stream: TcpStream,
    peer: SocketAddr,
    shared: Arc<Shared>,
    mut frames: broadcast::Receiver<Arc<str>>,
    mut done: watch::Receiver<bool>,
) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            warn!("handshake with {peer} failed: {e}");
            return;
        }
    };
    let id = shared.register();
    info!("client {id} connected from {peer}");
    let (mut sink, mut incoming) = ws.split();
    let (direct, mut direct_rx) = mpsc::unbounded_channel::<WsMessage>();

    let writer = tokio::spawn(async move {
        if *done.borrow() {
            let _ = sink.send(WsMessage::Close(None)).await;
            return;
        }
        loop {
            tokio::select! {
                m = direct_rx.recv() => match m {
                    Some(m) => {
                        let closing = matches!(m, WsMessage::Close(_));
                        if sink.send(m).await.is_err() || closing {
                            break;
                        }
                    }
                    None => break,
                },
                f = frames.recv() => match f {
                    Ok(text) => {
                        if sink.send(WsMessage::Text(text.to_string())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => debug!("client {id} skipped {n} frames"),
                    Err(broadcast::error::RecvError::Closed) => {
                        let _ = sink.send(WsMessage::Close(None)).await;
                        break;
                    }
                },
                _ = done.changed() => {
                    let _ = sink.send(WsMessage::Close(None)).await;
                    break;
                }
            }
        }
    });

    let reject = |reason: String| {
        warn!("client {id}: {reason}, disconnecting");
        let _ = direct.send(WsMessage::Close(Some(CloseFrame { code: CloseCode::Protocol, reason: reason.into() })));
    };
    while let Some(msg) = incoming.next().await {
        match msg {
            Ok(WsMessage::Text(text)) => match decode(&text) {
                Ok(Message::Hello(hello)) => {
                    let granted = shared.hello(id, &hello);
                    info!("client {id} joined as {granted:?}");
                    let ack = Message::Hello(Hello { role: granted, name: hello.name });
                    let _ = direct.send(WsMessage::Text(encode(&ack)));
                    if let Some(instr) = shared.lock().instruction.clone() {
                        let _ = direct.send(WsMessage::Text(instr.to_string()));
                    }
                }
                Ok(Message::Input(frame)) => shared.deposit(id, &frame),
                Ok(other) => {
                    reject(format!("unexpected `{}` message from client", kind(&other)));
                    break;
                }
                Err(e) => {
                    reject(e.to_string());
                    break;
                }
            },
            Ok(WsMessage::Binary(_)) => {
                reject("binary frames are not supported".into());
                break;
            }
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(e) => {
                debug!("client {id}: {e}");
                break;
            }
        }
    }
    shared.disconnect(id);
    drop(direct);
    let _ = writer.await;
    info!("client {id} disconnected");
}

fn kind(msg: &Message) -> &'static str {
    match msg {
        Message::State(_) => "state",
        Message::Input(_) => "input",
        Message::Hello(_) => "hello",
        Message::Instruction(_) => "instruction",
    }
}

/// Handle to a started service.
pub struct RunningService {
    runtime: Runtime,
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    result: oneshot::Receiver<Result<EpisodeTrace, ServiceError>>,
}

impl RunningService {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Asks the sim loop to stop; the session trace ends with `Shutdown`.
    pub fn shutdown(&self) {
        self.shared.shutdown();
    }

    /// Blocks until the session ends and returns its trace.
    pub fn wait(self) -> Result<EpisodeTrace, ServiceError> {
        let result = self.runtime.block_on(self.result).unwrap_or(Err(ServiceError::Stopped));
        self.runtime.shutdown_timeout(Duration::from_millis(500));
        result
    }

    /// Like [`wait`](Self::wait), but Ctrl-C ends the session cleanly.
    pub fn wait_or_interrupt(self) -> Result<EpisodeTrace, ServiceError> {
        let shared = Arc::clone(&self.shared);
        let mut result = self.result;
        let out = self.runtime.block_on(async {
            tokio::select! {
                r = &mut result => r,
                _ = tokio::signal::ctrl_c() => {
                    info!("interrupted, shutting down");
                    shared.shutdown();
                    result.await
                }
            }
        });
        self.runtime.shutdown_timeout(Duration::from_millis(500));
        out.unwrap_or(Err(ServiceError::Stopped))
    }
}

/// Binds the port and starts the sim loop and client handling.
pub fn start(scenario: Arc<Scenario>, config: ServiceConfig) -> Result<RunningService, ServiceError> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(TcpListener::bind(config.addr)).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => ServiceError::PortBusy { port: config.addr.port() },
        _ => ServiceError::Io(e),
    })?;
    let local_addr = listener.local_addr()?;
    info!("listening on ws://{local_addr}");
    let shared = Arc::new(Shared::default());
    let (frames, _) = broadcast::channel(BROADCAST_CAPACITY);
    let (done_tx, done_rx) = watch::channel(false);
    runtime.spawn(accept_loop(listener, Arc::clone(&shared), frames.clone(), done_rx));

    let (result_tx, result) = oneshot::channel();
    let loop_shared = Arc::clone(&shared);
    thread::Builder::new().name("sim-loop".into()).spawn(move || {
        let out = sim_loop(scenario, config, loop_shared, frames);
        let _ = done_tx.send(true);
        let _ = result_tx.send(out);
    })?;
    Ok(RunningService { runtime, local_addr, shared, result })
}

/// Runs one session until it ends or the process is interrupted.
pub fn serve(scenario: Arc<Scenario>, config: ServiceConfig) -> Result<EpisodeTrace, ServiceError> {
    start(scenario, config)?.wait_or_interrupt()
}

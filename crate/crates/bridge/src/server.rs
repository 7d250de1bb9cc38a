//! Threads: one controller owns the session; an acceptor spawns a reader
//! and a writer per connection. Readers send commands into the controller
//! queue; the controller stamps every outbound message with the next `seq`
//! and pushes it onto each writer's own queue.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use oct_servo::imaging::RenderMode;
use oct_servo::metrics::phase_durations;
use oct_servo::trial::{Click, GoalMode, Session, TrialConfig};
use oct_servo::Result;

use crate::protocol::{encode_line, parse_client_line, ClientMessage, Envelope, Parsed, ServerMessage, StateSnapshot};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// Simulated seconds per wall second; 0 runs unpaced.
    pub realtime_factor: f64,
    /// Attach PNG rasters to frame messages.
    pub images: bool,
    /// Control ticks between `state` messages.
    pub state_every_ticks: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            realtime_factor: 1.0,
            images: true,
            state_every_ticks: 10,
        }
    }
}

type ConnId = u64;

enum Command {
    Connect(ConnId, Sender<Arc<str>>),
    Disconnect(ConnId),
    Client(ConnId, ClientMessage),
    Malformed(ConnId, String),
    Shutdown,
}

/// A running bridge. Dropping it stops the service.
pub struct BridgeHandle {
    addr: SocketAddr,
    commands: Sender<Command>,
    stop: Arc<AtomicBool>,
    controller: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    /// Block until the service stops.
    pub fn join(mut self) {
        if let Some(h) = self.controller.take() {
            let _ = h.join();
        }
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.commands.send(Command::Shutdown);
        // Wake the acceptor so it sees the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.controller.take() {
            let _ = h.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        if self.controller.is_some() {
            self.stop_all();
        }
    }
}

/// Bind `addr` and serve an interactive session built from `cfg`.
pub fn serve(cfg: TrialConfig, addr: &str, opts: ServeOptions) -> Result<BridgeHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let cfg = interactive(cfg, &opts);
    let session = Session::new(&cfg, 0)?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));

    {
        let tx = tx.clone();
        let stop = stop.clone();
        std::thread::spawn(move || accept_loop(listener, tx, stop));
    }
    let controller = std::thread::spawn(move || Controller::new(session, opts).run(rx));
    log::info!("bridge listening on {addr}");
    Ok(BridgeHandle {
        addr,
        commands: tx,
        stop,
        controller: Some(controller),
    })
}

fn interactive(mut cfg: TrialConfig, opts: &ServeOptions) -> TrialConfig {
    cfg.goals.mode = GoalMode::Interactive;
    cfg.session.render_mode = if opts.images { RenderMode::Full } else { RenderMode::Annotations };
    cfg
}

fn accept_loop(listener: TcpListener, commands: Sender<Command>, stop: Arc<AtomicBool>) {
    let mut next_id: ConnId = 0;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = next_id;
        next_id += 1;
        let (out_tx, out_rx) = mpsc::channel::<Arc<str>>();
        let Ok(write_half) = stream.try_clone() else { continue };
        std::thread::spawn(move || write_loop(write_half, out_rx));
        if commands.send(Command::Connect(id, out_tx)).is_err() {
            break;
        }
        let commands = commands.clone();
        std::thread::spawn(move || read_loop(id, stream, commands));
    }
}

fn write_loop(stream: TcpStream, rx: Receiver<Arc<str>>) {
    let mut w = BufWriter::new(stream);
    while let Ok(line) = rx.recv() {
        if w.write_all(line.as_bytes()).is_err() {
            return;
        }
        // Drain whatever is already queued before flushing.
        while let Ok(more) = rx.try_recv() {
            if w.write_all(more.as_bytes()).is_err() {
                return;
            }
        }
        if w.flush().is_err() {
            return;
        }
    }
}

fn read_loop(id: ConnId, stream: TcpStream, commands: Sender<Command>) {
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let cmd = match parse_client_line(&line) {
            Parsed::Message(m) => Command::Client(id, m),
            Parsed::Malformed(why) => Command::Malformed(id, why),
            Parsed::Unknown(kind) => {
                log::warn!("connection {id}: ignoring unknown message kind `{kind}`");
                continue;
            }
        };
        if commands.send(cmd).is_err() {
            return;
        }
    }
    let _ = commands.send(Command::Disconnect(id));
}

struct Controller {
    session: Session,
    base_cfg: TrialConfig,
    opts: ServeOptions,
    clients: BTreeMap<ConnId, Sender<Arc<str>>>,
    seq: u64,
    running: bool,
    reported_done: bool,
    /// Wall clock and simulated time at the last (re)start, for pacing.
    pace_origin: Option<(Instant, f64)>,
}

impl Controller {
    fn new(session: Session, opts: ServeOptions) -> Self {
        Self {
            base_cfg: session.config().clone(),
            session,
            opts,
            clients: BTreeMap::new(),
            seq: 0,
            running: false,
            reported_done: false,
            pace_origin: None,
        }
    }

    fn run(mut self, rx: Receiver<Command>) {
        loop {
            // Everything queued is applied before the next tick.
            let first = if self.running && !self.session.is_finished() {
                match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(mpsc::TryRecvError::Empty) => None,
                    Err(mpsc::TryRecvError::Disconnected) => return,
                }
            } else {
                match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            };
            if let Some(c) = first {
                if !self.handle(c) {
                    return;
                }
                while let Ok(c) = rx.try_recv() {
                    if !self.handle(c) {
                        return;
                    }
                }
            }
            if self.running && !self.session.is_finished() {
                self.tick();
                self.pace();
            }
        }
    }

    fn handle(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Shutdown => return false,
            Command::Connect(id, tx) => {
                self.clients.insert(id, tx);
                self.broadcast(ServerMessage::State(self.snapshot()));
            }
            Command::Disconnect(id) => {
                self.clients.remove(&id);
            }
            Command::Malformed(id, message) => self.send_to(id, ServerMessage::Error { message }),
            Command::Client(id, msg) => self.client(id, msg),
        }
        true
    }

    fn client(&mut self, id: ConnId, msg: ClientMessage) {
        let request = msg.kind().to_string();
        match msg {
            ClientMessage::Start => {
                if self.session.is_finished() {
                    self.reject(id, request, "trial finished; send reset");
                    return;
                }
                self.running = true;
                self.pace_origin = Some((Instant::now(), self.session.time()));
                self.broadcast(ServerMessage::State(self.snapshot()));
            }
            ClientMessage::Pause => {
                self.running = false;
                self.pace_origin = None;
                self.broadcast(ServerMessage::State(self.snapshot()));
            }
            ClientMessage::Reset { config } => {
                let cfg = interactive(config.map_or_else(|| self.base_cfg.clone(), |c| *c), &self.opts);
                match Session::new(&cfg, 0) {
                    Ok(s) => {
                        self.session = s;
                        self.base_cfg = cfg;
                        self.running = false;
                        self.reported_done = false;
                        self.pace_origin = None;
                        self.broadcast(ServerMessage::State(self.snapshot()));
                    }
                    Err(e) => self.send_to(id, ServerMessage::Error { message: format!("reset failed: {e}") }),
                }
            }
            ClientMessage::ClickIlmGoal { x, y } | ClientMessage::ClickSubretinalGoal { x, y } => {
                if !self.running {
                    self.reject(id, request, "session not started");
                    return;
                }
                let click = if request == "click_ilm_goal" {
                    Click::IlmGoal { x, y }
                } else {
                    Click::SubretinalGoal { x, y }
                };
                match self.session.apply_click(click) {
                    Ok(ack) => {
                        self.broadcast(ServerMessage::Ack {
                            request,
                            goal: [ack.goal.x, ack.goal.y],
                            phase: ack.phase,
                            insertion_distance_um: ack.insertion_distance_um,
                        });
                        self.broadcast(ServerMessage::State(self.snapshot()));
                    }
                    Err(e) => self.reject(id, request, &e.to_string()),
                }
            }
        }
    }

    fn reject(&mut self, id: ConnId, request: String, reason: &str) {
        let phase = self.session.phase();
        self.send_to(
            id,
            ServerMessage::Rejection {
                request,
                phase,
                reason: reason.to_string(),
            },
        );
    }

    fn tick(&mut self) {
        let ev = self.session.step();
        if ev.microscope_frame {
            if let Some(f) = self.session.latest_microscope() {
                let m = ServerMessage::microscope(f);
                self.broadcast(m);
            }
        }
        if ev.bscan_frame {
            if let Some(f) = self.session.latest_bscan() {
                let m = ServerMessage::bscan(f);
                self.broadcast(m);
            }
        }
        if ev.phase_changed || self.session.tick_index().is_multiple_of(self.opts.state_every_ticks.max(1)) {
            self.broadcast(ServerMessage::State(self.snapshot()));
        }
        if ev.finished && !self.reported_done {
            self.reported_done = true;
            self.running = false;
            let status = self.session.status().cloned().expect("finished session has a status");
            let metrics = self.session.final_metrics();
            self.broadcast(ServerMessage::State(self.snapshot()));
            self.broadcast(ServerMessage::TrialDone { status, metrics });
        }
    }

    fn pace(&self) {
        if self.opts.realtime_factor <= 0.0 {
            return;
        }
        if let Some((wall0, sim0)) = self.pace_origin {
            let due = Duration::from_secs_f64((self.session.time() - sim0).max(0.0) / self.opts.realtime_factor);
            let elapsed = wall0.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
    }

    fn snapshot(&self) -> StateSnapshot {
        let s = &self.session;
        let p = s.perception();
        let wf = s.workflow();
        let mut durations = phase_durations(s.phases()).per_phase;
        let open_since = s.phases().last().map_or(0.0, |p| p.end);
        *durations.entry(s.phase()).or_insert(0.0) += s.time() - open_since;
        StateSnapshot {
            phase: s.phase(),
            running: self.running,
            tip_rgb: p.tip_rgb.map(|v| [v.x, v.y]),
            tip_oct: wf.last_tip_oct.map(|v| [v.x, v.y]),
            goal_ilm: wf.goal_ilm_px.map(|v| [v.x, v.y]),
            goal_subretinal: wf.goal_subretinal_px.map(|v| [v.x, v.y]),
            insertion_remaining_um: wf.goal_subretinal_px.map(|_| wf.insertion_remaining),
            rcm_error_um: s.rcm_error(),
            max_rcm_error_um: s.ticks().iter().map(|t| t.rcm_error).fold(0.0, f64::max),
            phase_durations_s: durations,
        }
    }

    fn stamp(&mut self, body: ServerMessage) -> Arc<str> {
        self.seq += 1;
        let env = Envelope {
            seq: self.seq,
            sim_time: self.session.time(),
            body,
        };
        Arc::from(encode_line(&env))
    }

    fn broadcast(&mut self, body: ServerMessage) {
        if self.clients.is_empty() {
            return;
        }
        let line = self.stamp(body);
        self.clients.retain(|_, tx| tx.send(line.clone()).is_ok());
    }

    fn send_to(&mut self, id: ConnId, body: ServerMessage) {
        let line = self.stamp(body);
        if let Some(tx) = self.clients.get(&id) {
            if tx.send(line).is_err() {
                self.clients.remove(&id);
            }
        }
    }
}

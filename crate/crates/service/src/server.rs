//! Single-session websocket server. One owner thread runs the tick loop; an
//! acceptor thread feeds it upgraded connections over a channel, and training
//! jobs run on worker threads whose results are swapped in between episodes.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ommbrl::config::StreamConfig;
use ommbrl::drivesim::Controls;
use ommbrl::dynmodel::ModelParams;
use tungstenite::{Message, WebSocket};

use crate::error::{Result, ServiceError};
use crate::protocol::{Frame, BUSY};
use crate::session::{Phase, Session, TrainResult};

/// Simulated duration of one tick.
pub const TICK: Duration = Duration::from_millis(1000);

#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    /// Real ticks last `TICK / divisor`. `None` runs lockstep: a tick ends
    /// when the input echoing its index arrives.
    pub realtime_divisor: Option<f64>,
    /// Where sessions are checkpointed on disconnect.
    pub checkpoint_dir: Option<PathBuf>,
}

impl ServeOptions {
    fn period(&self) -> Option<Duration> {
        self.realtime_divisor.map(|d| TICK.div_f64(d))
    }
}

pub struct Server {
    listener: TcpListener,
    cfg: StreamConfig,
    warm: ModelParams<f64>,
    opts: ServeOptions,
}

/// A server running on background threads.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    owner: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        self.owner.take().map_or(Ok(()), |h| h.join().expect("owner thread panicked"))
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

type Socket = WebSocket<TcpStream>;

struct Client {
    ws: Socket,
    greeted: bool,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, cfg: StreamConfig, warm: ModelParams<f64>, opts: ServeOptions) -> Result<Self> {
        cfg.validate()?;
        if let Some(d) = opts.realtime_divisor {
            if !(d.is_finite() && d > 0.0) {
                return Err(ommbrl::Error::config("realtime_divisor", "must be finite and positive").into());
            }
        }
        // Fail now rather than on the first hello.
        Session::new("probe", cfg.clone(), warm.clone())?;
        Ok(Self { listener: TcpListener::bind(addr)?, cfg, warm, opts })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let owner = thread::spawn(move || self.run(flag));
        Ok(ServerHandle { addr, stop, owner: Some(owner) })
    }

    /// Serves until `stop` is raised.
    pub fn run(self, stop: Arc<AtomicBool>) -> Result<()> {
        let Server { listener, cfg, warm, opts } = self;
        listener.set_nonblocking(true)?;
        let (conn_tx, conn_rx) = mpsc::channel();
        let accept_stop = stop.clone();
        let acceptor = thread::spawn(move || {
            while !accept_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if let Some(ws) = upgrade(stream) {
                            if conn_tx.send(ws).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                    Err(_) => thread::sleep(Duration::from_millis(2)),
                }
            }
        });
        let mut owner = Owner { cfg, warm, opts, client: None, session: None, job: None, deadline: None, next_id: 0 };
        while !stop.load(Ordering::SeqCst) {
            let busy = owner.step(&conn_rx)?;
            if !busy {
                let nap = owner.deadline.map_or(Duration::from_millis(1), |d| d.saturating_duration_since(Instant::now()));
                thread::sleep(nap.min(Duration::from_millis(1)));
            }
        }
        if let Some(c) = owner.client.as_mut() {
            let _ = c.ws.close(None);
            let _ = c.ws.flush();
        }
        owner.park();
        acceptor.join().expect("acceptor panicked");
        Ok(())
    }
}

fn upgrade(stream: TcpStream) -> Option<Socket> {
    stream.set_nodelay(true).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(2))).ok()?;
    let ws = tungstenite::accept(stream).ok()?;
    ws.get_ref().set_read_timeout(None).ok()?;
    Some(ws)
}

struct Owner {
    cfg: StreamConfig,
    warm: ModelParams<f64>,
    opts: ServeOptions,
    client: Option<Client>,
    /// Kept across disconnects for resume.
    session: Option<Session>,
    job: Option<Receiver<Result<TrainResult>>>,
    deadline: Option<Instant>,
    next_id: u64,
}

impl Owner {
    /// One pass of the loop; true when something happened.
    fn step(&mut self, conns: &Receiver<Socket>) -> Result<bool> {
        let mut busy = false;
        while let Ok(mut ws) = conns.try_recv() {
            busy = true;
            if self.client.is_some() {
                let _ = ws.send(Message::text(Frame::error(BUSY).encode()));
                let _ = ws.close(None);
                let _ = ws.flush();
            } else {
                ws.get_ref().set_nonblocking(true)?;
                self.client = Some(Client { ws, greeted: false });
            }
        }
        busy |= self.read_frames()?;
        busy |= self.poll_job()?;
        if let (Some(deadline), Some(_)) = (self.deadline, self.opts.period()) {
            if Instant::now() >= deadline {
                busy = true;
                self.end_tick()?;
            }
        }
        if let Some(c) = self.client.as_mut() {
            match c.ws.flush() {
                Ok(()) => {}
                Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => {}
                Err(_) => self.disconnect(),
            }
        }
        Ok(busy)
    }

    fn read_frames(&mut self) -> Result<bool> {
        let mut any = false;
        loop {
            let Some(c) = self.client.as_mut() else { return Ok(any) };
            match c.ws.read() {
                Ok(Message::Text(text)) => {
                    any = true;
                    match Frame::decode(text.as_str()) {
                        Ok(frame) => self.handle(frame)?,
                        Err(e) => self.send(Frame::error(e.to_string())),
                    }
                }
                Ok(Message::Binary(_)) => {
                    any = true;
                    self.send(Frame::error("binary messages are not frames"));
                }
                Ok(Message::Close(_)) => {
                    self.disconnect();
                    return Ok(true);
                }
                Ok(_) => any = true,
                Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => return Ok(any),
                Err(_) => {
                    self.disconnect();
                    return Ok(true);
                }
            }
        }
    }

    fn handle(&mut self, frame: Frame) -> Result<()> {
        let greeted = self.client.as_ref().is_some_and(|c| c.greeted);
        match frame {
            Frame::Hello { session } if !greeted => self.greet(session),
            Frame::Hello { .. } => {
                self.send(Frame::error("session already open"));
                Ok(())
            }
            _ if !greeted => {
                self.send(Frame::error("expected hello"));
                Ok(())
            }
            Frame::Input { t, steer, throttle, brake, reverse } => {
                let Some(s) = self.session.as_mut() else { return Ok(()) };
                if let Err(e) = s.set_input(t, Controls { steer, throttle, brake, reverse }) {
                    self.send(Frame::error(e.to_string()));
                    return Ok(());
                }
                let lockstep = self.opts.period().is_none();
                if lockstep && t == s.tick_index() && s.phase() != Phase::BetweenEpisodes {
                    self.end_tick()?;
                }
                Ok(())
            }
            other => {
                self.send(Frame::error(format!("clients do not send {} frames", kind(&other))));
                Ok(())
            }
        }
    }

    fn greet(&mut self, requested: String) -> Result<()> {
        let resumable = self.session.as_ref().is_some_and(|s| !requested.is_empty() && s.id() == requested);
        if resumable {
            self.session.as_mut().expect("checked").restart_episode()?;
        } else {
            let from_disk = match (&self.opts.checkpoint_dir, requested.is_empty()) {
                (Some(dir), false) => Session::resume(dir, &requested, self.cfg.clone())?,
                _ => None,
            };
            let session = match from_disk {
                Some(s) => s,
                None => {
                    let id = if requested.is_empty() {
                        self.next_id += 1;
                        format!("s{}", self.next_id)
                    } else {
                        requested
                    };
                    Session::new(id, self.cfg.clone(), self.warm.clone())?
                }
            };
            self.session = Some(session);
            self.job = None;
        }
        let id = self.session.as_ref().expect("just set").id().to_string();
        if let Some(c) = self.client.as_mut() {
            c.greeted = true;
        }
        self.send(Frame::Hello { session: id });
        self.send_tick()
    }

    /// Closes the current tick with the latest input, then announces the next.
    fn end_tick(&mut self) -> Result<()> {
        self.deadline = None;
        let Some(s) = self.session.as_mut() else { return Ok(()) };
        if s.phase() == Phase::BetweenEpisodes {
            return Ok(());
        }
        let adv = s.advance()?;
        for f in adv.frames {
            self.send(f);
        }
        match adv.job {
            Some(job) => {
                let (tx, rx) = mpsc::channel();
                thread::spawn(move || {
                    let _ = tx.send(job.run());
                });
                self.job = Some(rx);
                Ok(())
            }
            None => self.send_tick(),
        }
    }

    fn send_tick(&mut self) -> Result<()> {
        if self.client.as_ref().is_none_or(|c| !c.greeted) {
            return Ok(());
        }
        let Some(s) = self.session.as_mut() else { return Ok(()) };
        if let Some(frame) = s.tick_frame()? {
            self.send(frame);
            self.deadline = self.opts.period().map(|p| Instant::now() + p);
        }
        Ok(())
    }

    fn poll_job(&mut self) -> Result<bool> {
        let Some(rx) = self.job.as_ref() else { return Ok(false) };
        let result = match rx.try_recv() {
            Ok(r) => r,
            Err(TryRecvError::Empty) => return Ok(false),
            Err(TryRecvError::Disconnected) => Err(ServiceError::Unexpected("training worker vanished".into())),
        };
        self.job = None;
        match result.and_then(|r| self.session.as_mut().expect("job belongs to a session").install(r)) {
            Ok(()) => self.send_tick()?,
            Err(e) => {
                self.send(Frame::error(format!("training failed, session closed: {e}")));
                self.session = None;
            }
        }
        Ok(true)
    }

    fn send(&mut self, frame: Frame) {
        let Some(c) = self.client.as_mut() else { return };
        match c.ws.send(Message::text(frame.encode())) {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => {}
            Err(_) => self.disconnect(),
        }
    }

    fn disconnect(&mut self) {
        self.client = None;
        self.deadline = None;
        self.park();
    }

    /// Checkpoints the session so it can resume after a disconnect or restart.
    fn park(&mut self) {
        if let (Some(dir), Some(s)) = (&self.opts.checkpoint_dir, &self.session) {
            let _ = s.checkpoint(dir);
        }
    }
}

fn kind(frame: &Frame) -> &'static str {
    match frame {
        Frame::Hello { .. } => "hello",
        Frame::Tick { .. } => "tick",
        Frame::Input { .. } => "input",
        Frame::EpisodeEnd { .. } => "episode_end",
        Frame::RoundEnd { .. } => "round_end",
        Frame::Error { .. } => "error",
    }
}

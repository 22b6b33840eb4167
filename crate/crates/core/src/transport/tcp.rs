//! TCP transport: every party runs on its own thread behind its own listener.
//!
//! Outgoing connections are opened on first use and kept for the life of the
//! session. Each accepted connection gets a reader thread that feeds the
//! owning party's inbox, so a party handles frames in arrival order. Frames
//! that arrive early for a later round are buffered until that round starts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::local::{collect_outputs, instance_records, prepare_batch};
use super::wire::{read_frame, write_frame};
use super::{
    Direction, InstanceOutput, InstanceSpec, LocalNote, LocalRecord, ObservedFrame, PartyRound,
    SumInstance, SumTransport, Topology, Transcript, WireMessage,
};
use crate::error::{Error, ProtocolError, Result};
use crate::ring::{ParticipantId, RingVec};

/// Environment variable that overrides the host part of every bind address.
pub const BIND_HOST_ENV: &str = "CGD_BIND_HOST";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const POLL: Duration = Duration::from_millis(50);

/// Participant id to listener address.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointMap {
    pub endpoints: BTreeMap<ParticipantId, SocketAddr>,
}

impl EndpointMap {
    /// Parses lines of `id host:port`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut endpoints = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |what: &str| Error::arg(format!("endpoints line {}: {what}: {raw:?}", lineno + 1));
            let mut parts = line.split_whitespace();
            let (Some(id), Some(addr), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `id host:port`"));
            };
            let id: u16 = id.parse().map_err(|_| bad("participant id is not a u16"))?;
            let addr = addr
                .to_socket_addrs()
                .map_err(|_| bad("unresolvable address"))?
                .next()
                .ok_or_else(|| bad("unresolvable address"))?;
            if endpoints.insert(ParticipantId(id), addr).is_some() {
                return Err(bad("duplicate participant id"));
            }
        }
        Ok(EndpointMap { endpoints })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn render(&self) -> String {
        self.endpoints
            .iter()
            .map(|(id, a)| format!("{} {a}\n", id.0))
            .collect()
    }
}

fn bind_host_override() -> Result<Option<IpAddr>> {
    match std::env::var(BIND_HOST_ENV) {
        Ok(h) if !h.trim().is_empty() => h
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::arg(format!("{BIND_HOST_ENV}={h:?} is not an IP address"))),
        _ => Ok(None),
    }
}

enum Inbound {
    Frame(Vec<u8>),
    LinkDown(String),
}

enum Command {
    Round {
        round: u32,
        specs: Vec<Arc<InstanceSpec>>,
        inputs: HashMap<(u8, u16), RingVec>,
    },
    Shutdown,
}

struct RoundReport {
    results: Vec<((u8, u16), RingVec)>,
    frames: Vec<ObservedFrame>,
    locals: Vec<LocalRecord>,
}

struct Worker {
    commands: Sender<Command>,
    reports: Receiver<Result<RoundReport>>,
    addr: SocketAddr,
    stop_accepting: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

pub struct TcpSession {
    round: u32,
    topology: Topology,
    recording: bool,
    transcript: Transcript,
    workers: BTreeMap<ParticipantId, Worker>,
    abort: Arc<AtomicBool>,
    timeout_ms: Arc<AtomicU64>,
    failed: Option<u32>,
    /// Parties that are never told about a round (exercises timeouts).
    #[cfg(test)]
    silenced: Vec<ParticipantId>,
}

impl TcpSession {
    /// Binds every party (plus a dedicated aggregator, if any) on an
    /// ephemeral port of the bind host.
    pub fn launch(parties: &[ParticipantId], topology: Topology, seed: u64) -> Result<Self> {
        let host: IpAddr = bind_host_override()?.unwrap_or([127, 0, 0, 1].into());
        let mut endpoints = BTreeMap::new();
        for &id in parties {
            endpoints.insert(id, SocketAddr::new(host, 0));
        }
        if let Topology::Aggregator(a) = topology {
            endpoints.entry(a).or_insert(SocketAddr::new(host, 0));
        }
        Self::bind_all(EndpointMap { endpoints }, topology, seed)
    }

    /// Binds the listed endpoints.
    pub fn from_endpoints(map: EndpointMap, topology: Topology, seed: u64) -> Result<Self> {
        if let Topology::Aggregator(a) = topology {
            if !map.endpoints.contains_key(&a) {
                return Err(Error::arg(format!("aggregator {a} has no endpoint")));
            }
        }
        Self::bind_all(map, topology, seed)
    }

    pub fn with_timeout(self, timeout: Duration) -> Self {
        self.timeout_ms
            .store(timeout.as_millis().max(1) as u64, Ordering::SeqCst);
        self
    }

    pub fn recording(mut self, on: bool) -> Self {
        self.recording = on;
        self
    }

    /// Addresses the listeners actually bound.
    pub fn endpoints(&self) -> EndpointMap {
        EndpointMap {
            endpoints: self.workers.iter().map(|(id, w)| (*id, w.addr)).collect(),
        }
    }

    pub fn into_transcript(mut self) -> Transcript {
        std::mem::take(&mut self.transcript)
    }

    fn bind_all(map: EndpointMap, topology: Topology, seed: u64) -> Result<Self> {
        if map.endpoints.is_empty() {
            return Err(Error::arg("tcp session needs at least one endpoint"));
        }
        let override_host = bind_host_override()?;
        let mut listeners = BTreeMap::new();
        let mut directory = BTreeMap::new();
        for (&id, &addr) in &map.endpoints {
            let bind_addr = match override_host {
                Some(h) => SocketAddr::new(h, addr.port()),
                None => addr,
            };
            let listener = TcpListener::bind(bind_addr)?;
            let mut local = listener.local_addr()?;
            if local.ip().is_unspecified() {
                local.set_ip(if addr.ip().is_unspecified() {
                    [127, 0, 0, 1].into()
                } else {
                    addr.ip()
                });
            }
            directory.insert(id, local);
            listeners.insert(id, listener);
        }
        let directory = Arc::new(directory);
        let abort = Arc::new(AtomicBool::new(false));
        let timeout_ms = Arc::new(AtomicU64::new(DEFAULT_TIMEOUT.as_millis() as u64));
        let mut workers = BTreeMap::new();
        for (id, listener) in listeners {
            let (inbox_tx, inbox_rx) = mpsc::channel();
            let stop_accepting = Arc::new(AtomicBool::new(false));
            spawn_acceptor(listener, inbox_tx, Arc::clone(&stop_accepting))?;
            let (cmd_tx, cmd_rx) = mpsc::channel();
            let (rep_tx, rep_rx) = mpsc::channel();
            let ctx = PartyCtx {
                me: id,
                topology,
                seed,
                directory: Arc::clone(&directory),
                abort: Arc::clone(&abort),
                timeout_ms: Arc::clone(&timeout_ms),
                inbox: inbox_rx,
                outgoing: HashMap::new(),
                early: Vec::new(),
            };
            let thread = thread::Builder::new()
                .name(format!("cgd-party-{}", id.0))
                .spawn(move || ctx.serve(cmd_rx, rep_tx))?;
            workers.insert(
                id,
                Worker {
                    commands: cmd_tx,
                    reports: rep_rx,
                    addr: directory[&id],
                    stop_accepting,
                    thread: Some(thread),
                },
            );
        }
        Ok(TcpSession {
            round: 0,
            topology,
            recording: false,
            transcript: Transcript {
                topology,
                ..Transcript::default()
            },
            workers,
            abort,
            timeout_ms,
            failed: None,
            #[cfg(test)]
            silenced: Vec::new(),
        })
    }
}

impl SumTransport for TcpSession {
    fn exchange(&mut self, batch: Vec<SumInstance>) -> Result<Vec<InstanceOutput>> {
        let round = self.round;
        if let Some(r) = self.failed {
            return Err(ProtocolError::Link {
                round,
                detail: format!("session aborted in round {r}"),
            }
            .into());
        }
        self.round += 1;
        let (specs, mut inputs) = prepare_batch(batch, round)?;
        let mut involved = std::collections::BTreeSet::new();
        for spec in &specs {
            involved.extend(spec.parties(self.topology));
        }
        if let Some(id) = involved.iter().find(|id| !self.workers.contains_key(id)) {
            return Err(Error::arg(format!("{id} has no endpoint in this session")));
        }
        #[cfg(test)]
        involved.retain(|id| !self.silenced.contains(id));
        for id in &involved {
            let cmd = Command::Round {
                round,
                specs: specs.clone(),
                inputs: inputs.remove(id).unwrap_or_default(),
            };
            self.workers[id]
                .commands
                .send(cmd)
                .map_err(|_| link(round, format!("{id} worker is gone")))?;
        }
        let mut first_err = None;
        let mut reports = BTreeMap::new();
        for id in &involved {
            let outcome = self.workers[id]
                .reports
                .recv()
                .unwrap_or_else(|_| Err(link(round, format!("{id} worker is gone"))));
            match outcome {
                Ok(r) => {
                    reports.insert(*id, r);
                }
                Err(e) => {
                    self.abort.store(true, Ordering::SeqCst);
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            self.failed = Some(round);
            return Err(e);
        }
        let mut results = BTreeMap::new();
        for (id, r) in reports {
            if self.recording {
                self.transcript.absorb_party(id, r.frames, r.locals);
            }
            results.insert(id, r.results);
        }
        if self.recording {
            self.transcript.instances.extend(instance_records(&specs, round));
        }
        Ok(collect_outputs(&specs, results))
    }

    fn round(&self) -> u32 {
        self.round
    }

    fn topology(&self) -> Topology {
        self.topology
    }

    fn transcript(&self) -> Option<&Transcript> {
        self.recording.then_some(&self.transcript)
    }

    fn note(&mut self, owner: ParticipantId, note: LocalNote) {
        if self.recording {
            self.transcript.notes.entry(owner).or_default().push(note);
        }
    }
}

impl Drop for TcpSession {
    fn drop(&mut self) {
        for w in self.workers.values() {
            let _ = w.commands.send(Command::Shutdown);
        }
        for w in self.workers.values_mut() {
            if let Some(t) = w.thread.take() {
                let _ = t.join();
            }
            w.stop_accepting.store(true, Ordering::SeqCst);
            // Wake the blocking accept so the acceptor sees the flag.
            let _ = TcpStream::connect_timeout(&w.addr, Duration::from_secs(1));
        }
    }
}

fn link(round: u32, detail: String) -> Error {
    ProtocolError::Link { round, detail }.into()
}

fn spawn_acceptor(
    listener: TcpListener,
    inbox: Sender<Inbound>,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    thread::Builder::new()
        .name("cgd-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let tx = inbox.clone();
                let _ = thread::Builder::new()
                    .name("cgd-reader".into())
                    .spawn(move || read_loop(stream, tx));
            }
        })?;
    Ok(())
}

fn read_loop(stream: TcpStream, inbox: Sender<Inbound>) {
    let mut reader = BufReader::new(stream);
    loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => {
                if inbox.send(Inbound::Frame(frame)).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                let _ = inbox.send(Inbound::LinkDown(e.to_string()));
                return;
            }
        }
    }
}

struct PartyCtx {
    me: ParticipantId,
    topology: Topology,
    seed: u64,
    directory: Arc<BTreeMap<ParticipantId, SocketAddr>>,
    abort: Arc<AtomicBool>,
    timeout_ms: Arc<AtomicU64>,
    inbox: Receiver<Inbound>,
    outgoing: HashMap<ParticipantId, BufWriter<TcpStream>>,
    early: Vec<(WireMessage, Vec<u8>)>,
}

impl PartyCtx {
    fn serve(mut self, commands: Receiver<Command>, reports: Sender<Result<RoundReport>>) {
        while let Ok(Command::Round {
            round,
            specs,
            inputs,
        }) = commands.recv()
        {
            let outcome = self.run_round(round, &specs, inputs);
            if reports.send(outcome).is_err() {
                break;
            }
        }
        for (_, w) in self.outgoing.drain() {
            if let Ok(s) = w.into_inner() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }

    fn send(&mut self, round: u32, msg: &WireMessage, frames: &mut Vec<ObservedFrame>) -> Result<()> {
        let to = msg.recipient;
        if !self.outgoing.contains_key(&to) {
            let addr = *self
                .directory
                .get(&to)
                .ok_or_else(|| link(round, format!("no endpoint for {to}")))?;
            let stream = TcpStream::connect(addr)
                .map_err(|e| link(round, format!("connect to {to} at {addr}: {e}")))?;
            stream.set_nodelay(true)?;
            self.outgoing.insert(to, BufWriter::new(stream));
        }
        let w = self.outgoing.get_mut(&to).expect("inserted above");
        let bytes = write_frame(w, msg)
            .and_then(|b| w.flush().map(|_| b))
            .map_err(|e| link(round, format!("write to {to}: {e}")))?;
        frames.push(ObservedFrame {
            direction: Direction::Sent,
            bytes,
        });
        Ok(())
    }

    fn run_round(
        &mut self,
        round: u32,
        specs: &[Arc<InstanceSpec>],
        inputs: HashMap<(u8, u16), RingVec>,
    ) -> Result<RoundReport> {
        let mut party = PartyRound::new(self.me, round, self.topology, self.seed, specs, inputs);
        let mut frames = Vec::new();
        for m in party.start()? {
            self.send(round, &m, &mut frames)?;
        }
        let early = std::mem::take(&mut self.early);
        for (msg, bytes) in early {
            if msg.round == round {
                frames.push(ObservedFrame {
                    direction: Direction::Received,
                    bytes,
                });
                for m in party.handle(msg)? {
                    self.send(round, &m, &mut frames)?;
                }
            } else {
                self.early.push((msg, bytes));
            }
        }
        let timeout = Duration::from_millis(self.timeout_ms.load(Ordering::SeqCst));
        let deadline = Instant::now() + timeout;
        while !party.complete() {
            if self.abort.load(Ordering::SeqCst) {
                return Err(link(round, "round aborted by a peer failure".into()));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ProtocolError::Timeout {
                    round,
                    millis: timeout.as_millis() as u64,
                    waiting_on: party.waiting_on(),
                }
                .into());
            }
            let bytes = match self.inbox.recv_timeout(POLL.min(deadline - now)) {
                Ok(Inbound::Frame(b)) => b,
                Ok(Inbound::LinkDown(e)) => return Err(link(round, e)),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(link(round, "inbox closed".into()))
                }
            };
            let msg = WireMessage::decode(&bytes)?;
            if msg.round > round {
                self.early.push((msg, bytes));
                continue;
            }
            frames.push(ObservedFrame {
                direction: Direction::Received,
                bytes,
            });
            for m in party.handle(msg)? {
                self.send(round, &m, &mut frames)?;
            }
        }
        let locals = party.local_records();
        Ok(RoundReport {
            results: party.take_results(),
            frames,
            locals,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{LocalBus, MessageKind, SumMode};

    fn ids(n: u16) -> Vec<ParticipantId> {
        (0..n).map(ParticipantId).collect()
    }

    fn batch(round: u32, n: u16) -> Vec<SumInstance> {
        let inputs = ids(n)
            .into_iter()
            .map(|id| (id, RingVec::new(vec![round * 10 + id.0 as u32, 7, u32::MAX - round])))
            .collect();
        vec![SumInstance {
            layer_tag: 1,
            group_tag: 0,
            mode: SumMode::Secure,
            inputs,
            delivery: ids(n),
        }]
    }

    #[test]
    fn endpoint_file_parsing() {
        let m = EndpointMap::parse("# parties\n0 127.0.0.1:7000\n1 127.0.0.1:7001 # second\n\n")
            .unwrap();
        assert_eq!(m.endpoints.len(), 2);
        assert_eq!(m.endpoints[&ParticipantId(1)].port(), 7001);
        assert!(EndpointMap::parse("0 127.0.0.1:1\n0 127.0.0.1:2").is_err());
        assert!(EndpointMap::parse("x 127.0.0.1:1").is_err());
        assert!(EndpointMap::parse("0").is_err());
        assert_eq!(EndpointMap::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn tcp_sum_matches_local() {
        for topology in [Topology::AllToAll, Topology::Aggregator(ParticipantId(50))] {
            let mut tcp = TcpSession::launch(&ids(3), topology, 5).unwrap();
            let mut local = LocalBus::new(5).with_topology(topology);
            for r in 0..3 {
                let a = tcp.exchange(batch(r, 3)).unwrap();
                let b = local.exchange(batch(r, 3)).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn silent_peer_times_out_with_round() {
        let mut tcp = TcpSession::launch(&ids(3), Topology::AllToAll, 1)
            .unwrap()
            .with_timeout(Duration::from_millis(300));
        tcp.exchange(batch(0, 3)).unwrap();
        tcp.silenced.push(ParticipantId(2));
        let err = tcp.exchange(batch(1, 3)).unwrap_err();
        assert!(
            matches!(err, Error::Protocol(ProtocolError::Timeout { round: 1, millis: 300, .. })),
            "{err:?}"
        );
        assert!(tcp.exchange(batch(2, 3)).is_err());
    }

    #[test]
    fn unknown_party_is_rejected() {
        let mut tcp = TcpSession::launch(&ids(2), Topology::AllToAll, 1).unwrap();
        assert!(matches!(tcp.exchange(batch(0, 3)), Err(Error::Argument(_))));
    }

    #[test]
    fn recorded_frames_match_local_bus() {
        let mut tcp = TcpSession::launch(&ids(3), Topology::AllToAll, 9)
            .unwrap()
            .recording(true);
        let mut local = LocalBus::new(9).recording(true);
        for r in 0..2 {
            tcp.exchange(batch(r, 3)).unwrap();
            local.exchange(batch(r, 3)).unwrap();
        }
        let canon = |t: &Transcript| {
            let mut all: Vec<(ParticipantId, u32, bool, MessageKind, u16, u16, Vec<u32>)> = t
                .frames
                .iter()
                .flat_map(|(id, fs)| {
                    fs.iter().map(move |f| {
                        let m = f.message();
                        (
                            *id,
                            m.round,
                            f.direction == Direction::Sent,
                            m.kind,
                            m.sender.0,
                            m.recipient.0,
                            m.payload.into_inner(),
                        )
                    })
                })
                .collect();
            all.sort();
            all
        };
        let a = tcp.into_transcript();
        let b = local.into_transcript();
        assert_eq!(canon(&a), canon(&b));
        assert_eq!(a.locals, b.locals);
    }
}

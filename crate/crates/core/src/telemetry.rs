//! TCP telemetry hub. Each connected console is a session with its own
//! bounded outbound queue; commands it sends go to the simulation mailbox
//! tagged with the session id.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::dbs::StimParams;
use crate::gateway::{AlertEvent, Command, FusionRule, GatewayControl};
use crate::protocol::{AlertMsg, HelloMsg, Message};
use crate::report::Report;
use crate::sim::Observer;
use crate::simkernel::{Mailbox, SimTime};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;
const POLL: Duration = Duration::from_millis(10);

/// Outbound buffer for one session. Telemetry beyond the capacity evicts
/// the oldest telemetry; other messages are always kept.
#[derive(Debug, Clone)]
pub struct SessionQueue {
    items: VecDeque<Message>,
    capacity: usize,
    dropped: u64,
}

impl SessionQueue {
    pub fn new(capacity: usize) -> Self {
        SessionQueue {
            items: VecDeque::new(),
            capacity: capacity.max(1),
            dropped: 0,
        }
    }

    pub fn push(&mut self, msg: Message) {
        if self.items.len() >= self.capacity {
            match self.items.iter().position(Message::is_droppable) {
                Some(i) => {
                    self.items.remove(i);
                    self.dropped += 1;
                }
                None if msg.is_droppable() => {
                    self.dropped += 1;
                    return;
                }
                None => {}
            }
        }
        self.items.push_back(msg);
    }

    pub fn pop(&mut self) -> Option<Message> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn iter(&self) -> impl Iterator<Item = &Message> {
        self.items.iter()
    }
}

struct SessionState {
    queue: SessionQueue,
    closed: bool,
}

struct Session {
    id: String,
    state: Mutex<SessionState>,
    ready: Condvar,
    stream: TcpStream,
}

impl Session {
    fn send(&self, msg: Message) {
        let mut st = self.state.lock().expect("session lock");
        if !st.closed {
            st.queue.push(msg);
            self.ready.notify_all();
        }
    }

    fn close(&self) {
        let mut st = self.state.lock().expect("session lock");
        st.closed = true;
        self.ready.notify_all();
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    fn is_closed(&self) -> bool {
        self.state.lock().expect("session lock").closed
    }

    fn is_drained(&self) -> bool {
        let st = self.state.lock().expect("session lock");
        st.closed || st.queue.is_empty()
    }
}

fn writer_loop(session: Arc<Session>) {
    let mut out = match session.stream.try_clone() {
        Ok(s) => io::BufWriter::new(s),
        Err(_) => return session.close(),
    };
    loop {
        let batch: Vec<Message> = {
            let mut st = session.state.lock().expect("session lock");
            while st.queue.is_empty() && !st.closed {
                st = session.ready.wait(st).expect("session lock");
            }
            if st.closed {
                return;
            }
            std::iter::from_fn(|| st.queue.pop()).collect()
        };
        for m in batch {
            if out.write_all(m.to_line().as_bytes()).is_err() {
                return session.close();
            }
        }
        if out.flush().is_err() {
            return session.close();
        }
    }
}

/// Reads client lines until EOF. Commands are forwarded to the mailbox when
/// one is attached; anything else is answered with a reject.
fn reader_loop(session: Arc<Session>, mailbox: Option<Mailbox<Command>>) {
    let Ok(stream) = session.stream.try_clone() else {
        return session.close();
    };
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match (Message::from_line(&line), &mailbox) {
            (Ok(Message::Command(c)), Some(mb)) => mb.push(Command {
                id: c.id,
                issuer: session.id.clone(),
                kind: c.kind,
            }),
            (Ok(Message::Command(c)), None) => session.send(Message::Reject {
                id: c.id,
                reason: "replay session does not accept commands".into(),
            }),
            (Ok(other), _) => session.send(Message::Reject {
                id: String::new(),
                reason: format!("unexpected message type: {}", type_name(&other)),
            }),
            (Err(e), _) => session.send(Message::Reject {
                id: salvage_id(&line),
                reason: format!("malformed: {e}"),
            }),
        }
    }
    session.close();
}

fn type_name(m: &Message) -> &'static str {
    match m {
        Message::Hello(_) => "hello",
        Message::Telemetry(_) => "telemetry",
        Message::Alert(_) => "alert",
        Message::Stim(_) => "stim",
        Message::Command(_) => "command",
        Message::Ack { .. } => "ack",
        Message::Reject { .. } => "reject",
        Message::End { .. } => "end",
    }
}

fn salvage_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
        .unwrap_or_default()
}

/// Gateway state sent to a console when it connects.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub sim_time: SimTime,
    pub fusion_rule: FusionRule,
    pub stim_params: StimParams,
    pub active_alerts: Vec<AlertMsg>,
}

struct HubInner {
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
    snapshot: Mutex<Snapshot>,
    next_id: Mutex<u64>,
    stop: AtomicBool,
    capacity: usize,
    mailbox: Mailbox<Command>,
}

/// Live hub for a running simulation.
pub struct Hub {
    inner: Arc<HubInner>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl Hub {
    /// Binds `127.0.0.1:port`; port 0 picks a free one.
    pub fn bind(port: u16, initial: Snapshot, capacity: usize) -> io::Result<Hub> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let inner = Arc::new(HubInner {
            sessions: Mutex::new(BTreeMap::new()),
            snapshot: Mutex::new(initial),
            next_id: Mutex::new(0),
            stop: AtomicBool::new(false),
            capacity,
            mailbox: Mailbox::new(),
        });
        let acc = inner.clone();
        let acceptor = thread::spawn(move || accept_loop(listener, acc));
        Ok(Hub {
            inner,
            addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn mailbox(&self) -> Mailbox<Command> {
        self.inner.mailbox.clone()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("hub lock").len()
    }

    pub fn open_sessions(&self) -> usize {
        let s = self.inner.sessions.lock().expect("hub lock");
        s.values().filter(|x| !x.is_closed()).count()
    }

    /// Blocks until at least one console has connected.
    pub fn wait_for_client(&self, timeout: Option<Duration>) -> bool {
        let start = Instant::now();
        while self.session_count() == 0 {
            if timeout.is_some_and(|t| start.elapsed() >= t) {
                return false;
            }
            thread::sleep(POLL);
        }
        true
    }

    pub fn broadcast(&self, msg: &Message) {
        for s in self.inner.sessions.lock().expect("hub lock").values() {
            s.send(msg.clone());
        }
    }

    pub fn send_to(&self, session: &str, msg: &Message) {
        if let Some(s) = self.inner.sessions.lock().expect("hub lock").get(session) {
            s.send(msg.clone());
        }
    }

    pub fn observer(&self) -> HubObserver<'_> {
        HubObserver {
            hub: self,
            seen_alerts: 0,
            alerts: Vec::new(),
        }
    }

    /// Waits until every session has flushed its queue and been closed by
    /// the client, or the timeout elapses.
    pub fn linger(&self, timeout: Option<Duration>) {
        let start = Instant::now();
        while self.open_sessions() > 0 {
            if timeout.is_some_and(|t| start.elapsed() >= t) {
                break;
            }
            thread::sleep(POLL);
        }
    }

    /// Waits for queued output to reach the sockets.
    pub fn drain(&self, timeout: Duration) {
        let start = Instant::now();
        loop {
            let done = self
                .inner
                .sessions
                .lock()
                .expect("hub lock")
                .values()
                .all(|s| s.is_drained());
            if done || start.elapsed() >= timeout {
                return;
            }
            thread::sleep(POLL);
        }
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for s in self.inner.sessions.lock().expect("hub lock").values() {
            s.close();
        }
    }
}

impl Drop for Hub {
    fn drop(&mut self) {
        self.stop_all();
    }
}

fn accept_loop(listener: TcpListener, inner: Arc<HubInner>) {
    while !inner.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = {
                    let mut n = inner.next_id.lock().expect("hub lock");
                    *n += 1;
                    format!("s{n}")
                };
                let snap = inner.snapshot.lock().expect("hub lock").clone();
                let hello = Message::Hello(HelloMsg {
                    session: id.clone(),
                    replay: false,
                    sim_time_us: snap.sim_time.0,
                    fusion_rule: snap.fusion_rule,
                    stim_params: snap.stim_params,
                    active_alerts: snap.active_alerts,
                });
                // Register under the sessions lock so no broadcast can
                // slip in ahead of the hello.
                let mut sessions = inner.sessions.lock().expect("hub lock");
                if let Some(s) = spawn_session(
                    stream,
                    id.clone(),
                    inner.capacity,
                    Some(inner.mailbox.clone()),
                ) {
                    s.send(hello);
                    sessions.insert(id, s);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn spawn_session(
    stream: TcpStream,
    id: String,
    capacity: usize,
    mailbox: Option<Mailbox<Command>>,
) -> Option<Arc<Session>> {
    stream.set_nonblocking(false).ok()?;
    let _ = stream.set_nodelay(true);
    let session = Arc::new(Session {
        id,
        state: Mutex::new(SessionState {
            queue: SessionQueue::new(capacity),
            closed: false,
        }),
        ready: Condvar::new(),
        stream,
    });
    let w = session.clone();
    thread::spawn(move || writer_loop(w));
    let r = session.clone();
    thread::spawn(move || reader_loop(r, mailbox));
    Some(session)
}

/// Feeds simulation output into a [`Hub`].
pub struct HubObserver<'a> {
    hub: &'a Hub,
    seen_alerts: usize,
    alerts: Vec<AlertMsg>,
}

impl Observer for HubObserver<'_> {
    fn publish(&mut self, msg: &Message) {
        self.hub.broadcast(msg);
    }

    fn reply(&mut self, issuer: &str, msg: &Message) {
        self.hub.send_to(issuer, msg);
    }

    fn state(&mut self, now: SimTime, control: &GatewayControl, alerts: &[AlertEvent]) {
        for a in &alerts[self.seen_alerts..] {
            self.alerts.push(AlertMsg::from(a));
        }
        self.seen_alerts = alerts.len();
        let mut snap = self.hub.inner.snapshot.lock().expect("hub lock");
        snap.sim_time = now;
        snap.fusion_rule = control.rule;
        snap.stim_params = control.stim_params;
        snap.active_alerts = self
            .alerts
            .iter()
            .filter(|a| control.active_alerts.contains(&a.id))
            .cloned()
            .collect();
    }
}

/// Replays a report's console stream to every client that connects. With
/// `once`, returns after the first client disconnects.
pub fn serve_report(
    listener: TcpListener,
    report: &Report,
    once: bool,
    capacity: usize,
) -> io::Result<()> {
    let mut n = 0u64;
    for stream in listener.incoming() {
        let stream = stream?;
        n += 1;
        let Some(session) = spawn_session(stream, format!("r{n}"), capacity, None) else {
            continue;
        };
        session.send(Message::Hello(HelloMsg {
            session: session.id.clone(),
            replay: true,
            sim_time_us: 0,
            fusion_rule: report.config.fusion,
            stim_params: report.config.dbs.params,
            active_alerts: Vec::new(),
        }));
        let msgs = report.telemetry.clone();
        let end = report.t_end_us;
        let s = session.clone();
        let feeder = thread::spawn(move || {
            for m in msgs {
                s.send(m);
            }
            s.send(Message::End { sim_time_us: end });
        });
        if once {
            let _ = feeder.join();
            while !session.is_closed() {
                thread::sleep(POLL);
            }
            return Ok(());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TelemetryMsg;
    use proptest::prelude::*;

    fn tele(i: usize) -> Message {
        Message::Telemetry(TelemetryMsg {
            window: i,
            window_start_s: i as f64,
            at_us: i as u64,
            p_eeg: None,
            p_ecg: None,
            fused_p: None,
            positive: None,
            degraded: false,
            skipped: true,
            battery_j: BTreeMap::new(),
        })
    }

    fn end(i: u64) -> Message {
        Message::End { sim_time_us: i }
    }

    #[test]
    fn evicts_oldest_telemetry() {
        let mut q = SessionQueue::new(2);
        q.push(tele(0));
        q.push(tele(1));
        q.push(tele(2));
        let w: Vec<usize> = q
            .iter()
            .map(|m| match m {
                Message::Telemetry(t) => t.window,
                _ => usize::MAX,
            })
            .collect();
        assert_eq!(w, vec![1, 2]);
        assert_eq!(q.dropped(), 1);
    }

    #[test]
    fn control_messages_survive_a_full_queue() {
        let mut q = SessionQueue::new(1);
        q.push(end(1));
        q.push(tele(0));
        q.push(end(2));
        assert_eq!(q.len(), 2);
        assert_eq!(q.dropped(), 1);
        assert!(q.iter().all(|m| !m.is_droppable()));
    }

    proptest! {
        #[test]
        fn bounded_and_lossless_for_control(kinds in proptest::collection::vec(any::<bool>(), 0..400), cap in 1usize..32) {
            let mut q = SessionQueue::new(cap);
            let mut controls = 0;
            for (i, &is_tele) in kinds.iter().enumerate() {
                if is_tele { q.push(tele(i)) } else { controls += 1; q.push(end(i as u64)) }
                let t = q.iter().filter(|m| m.is_droppable()).count();
                prop_assert!(t <= cap);
                prop_assert!(q.len() <= cap.max(controls));
            }
            prop_assert_eq!(q.iter().filter(|m| !m.is_droppable()).count(), controls);
            prop_assert_eq!(q.len() as u64 + q.dropped(), kinds.len() as u64);
        }
    }
}

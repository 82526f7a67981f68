//! Closed-loop orchestration: classifier nodes, the TDMA link, the gateway
//! and the optional stimulator, all driven by one event kernel.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ban::{
    transmit, DeliveryOutcome, EnergyOp, EnergyState, Frame, FrameKind, TdmaSchedule,
};
use crate::config::ScenarioConfig;
use crate::dbs::{apply_effect, Dbs, StimParams, StimulationEvent};
use crate::features::{Extractors, Modality};
use crate::gateway::{
    handle_missing, model_tag, AlertAction, AlertEvent, Command, CommandRecord, DecisionState,
    GatewayControl, Verdict,
};
use crate::model::{infer, ModelSpec};
use crate::protocol::{AlertMsg, Message, StimMsg, TelemetryMsg};
use crate::signal::{Label, SignalError, SignalSource, SyntheticSource, Window, WindowGrid};
use crate::simkernel::{
    Event, EventTrace, Kernel, KernelError, Mailbox, NodeId, RngStream, SimTime,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("signal: {0}")]
    Signal(#[from] SignalError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    WindowReady {
        window: usize,
    },
    SlotStart,
    FrameArrival {
        from: NodeId,
        bytes: Vec<u8>,
        corrupted: bool,
    },
    Deadline {
        window: usize,
    },
    AckTimeout {
        seq: u16,
    },
    StimEnd {
        stim: u64,
    },
    Command(Box<Command>),
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimEvent::WindowReady { window } => write!(f, "window {window}"),
            SimEvent::SlotStart => write!(f, "slot"),
            SimEvent::FrameArrival {
                from,
                bytes,
                corrupted,
            } => {
                let seq = bytes
                    .get(3..5)
                    .map_or(0, |b| u16::from_be_bytes([b[0], b[1]]));
                let state = if *corrupted { "corrupt" } else { "ok" };
                write!(f, "rx from {from} seq {seq} {} bytes {state}", bytes.len())
            }
            SimEvent::Deadline { window } => write!(f, "deadline {window}"),
            SimEvent::AckTimeout { seq } => write!(f, "ack-timeout {seq}"),
            SimEvent::StimEnd { stim } => write!(f, "stim-end {stim}"),
            SimEvent::Command(c) => write!(f, "command {} from {}", c.id, c.issuer),
        }
    }
}

/// Stimulation command payload: alert id u32 then the four parameters as
/// f64, big-endian.
pub const STIM_PAYLOAD_LEN: usize = 36;

pub fn stim_payload(alert_id: u64, p: &StimParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(STIM_PAYLOAD_LEN);
    out.extend_from_slice(&(alert_id as u32).to_be_bytes());
    for v in [
        p.amplitude_ma,
        p.frequency_hz,
        p.pulse_width_us,
        p.duration_s,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn parse_stim_payload(b: &[u8]) -> Option<(u64, StimParams)> {
    if b.len() != STIM_PAYLOAD_LEN {
        return None;
    }
    let f = |i: usize| f64::from_be_bytes(b[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes"));
    Some((
        u32::from_be_bytes(b[..4].try_into().ok()?) as u64,
        StimParams {
            amplitude_ma: f(0),
            frequency_hz: f(1),
            pulse_width_us: f(2),
            duration_s: f(3),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub node: NodeId,
    pub dst: NodeId,
    pub seq: u16,
    pub kind: FrameKind,
    pub bits: usize,
    pub start: SimTime,
    pub end: SimTime,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDebit {
    pub at: SimTime,
    pub node: NodeId,
    pub op: EnergyOp,
    pub joules: f64,
    pub battery_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub corrupted: u64,
    pub dropped: u64,
    pub lost_offline: u64,
    pub retransmissions: u64,
    pub gave_up: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimFailure {
    pub alert_id: u64,
    pub at: SimTime,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    pub start: SimTime,
    pub end: SimTime,
    pub label: Label,
    /// Probabilities as computed on each classifier node.
    pub p_eeg_node: Option<f64>,
    pub p_ecg_node: Option<f64>,
    /// Probabilities as received by the gateway.
    pub p_eeg: Option<f64>,
    pub p_ecg: Option<f64>,
    pub fused_p: Option<f64>,
    pub positive: Option<bool>,
    pub degraded: bool,
    pub skipped: bool,
    pub decided_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub initial_j: f64,
    pub final_j: f64,
    pub consumed_j: f64,
    pub by_category: BTreeMap<String, f64>,
    pub offline_at: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub t_end: SimTime,
    pub duration_s: f64,
    pub onsets_s: Vec<f64>,
    pub synthetic: bool,
    pub windows: Vec<WindowRecord>,
    pub features_eeg: Vec<Option<Vec<f64>>>,
    pub features_ecg: Vec<Option<Vec<f64>>>,
    pub alerts: Vec<AlertEvent>,
    pub stims: Vec<StimulationEvent>,
    pub stim_failures: Vec<StimFailure>,
    pub commands: Vec<CommandRecord>,
    pub transmissions: Vec<TxRecord>,
    pub energy_ledger: Vec<EnergyDebit>,
    pub energy: BTreeMap<String, NodeEnergy>,
    pub links: BTreeMap<String, LinkStats>,
    pub late_verdicts: u64,
    pub messages: Vec<Message>,
    pub trace: EventTrace,
}

/// Receives broadcast messages and per-session replies as they happen.
pub trait Observer {
    fn publish(&mut self, _msg: &Message) {}
    fn reply(&mut self, _issuer: &str, _msg: &Message) {}
    /// Current gateway state, refreshed after every change.
    fn state(&mut self, _now: SimTime, _control: &GatewayControl, _alerts: &[AlertEvent]) {}
}

pub struct NullObserver;
impl Observer for NullObserver {}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub seed: u64,
    /// Simulated seconds per wall-clock second; `None` runs unpaced.
    pub realtime_speed: Option<f64>,
    pub mailbox: Option<Mailbox<Command>>,
}

pub struct Models {
    pub eeg: ModelSpec,
    pub ecg: ModelSpec,
}

/// Opens the configured signal source with the run seed.
pub fn open_source(
    cfg: &ScenarioConfig,
    seed: u64,
    recording: Option<crate::signal::Recording>,
) -> Result<Box<dyn SignalSource>, SimError> {
    match recording {
        Some(r) => {
            r.validate()?;
            Ok(Box::new(r))
        }
        None => {
            let mut syn = cfg.recording.synthetic.clone();
            syn.seed = seed;
            Ok(Box::new(SyntheticSource::new(syn)?))
        }
    }
}

#[derive(Debug, Clone)]
struct Outgoing {
    frame: Frame,
    arq: bool,
    attempts: u32,
    alert_id: Option<u64>,
}

struct NodeState {
    id: NodeId,
    energy: EnergyState,
    initial_j: f64,
    last_idle: SimTime,
    offline_at: Option<SimTime>,
    queue: VecDeque<Outgoing>,
    slot_pending: bool,
    last_slot: Option<SimTime>,
    awaiting: Option<Outgoing>,
    next_seq: u16,
    rng: ChaCha8Rng,
}

#[derive(Default, Clone, Copy)]
struct PendingWindow {
    eeg: Option<f64>,
    ecg: Option<f64>,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    models: &'a Models,
    tags: [u32; 2],
    source: Box<dyn SignalSource>,
    grid: WindowGrid,
    horizon_s: f64,
    extractors: Extractors,
    schedule: TdmaSchedule,
    timeout: SimTime,
    ack_timeout: SimTime,
    kernel: Kernel<SimEvent>,
    nodes: Vec<NodeState>,
    cached: Option<Window>,
    // gateway
    pending: BTreeMap<usize, PendingWindow>,
    next_window: usize,
    decision: DecisionState,
    control: GatewayControl,
    dbs: Option<Dbs>,
    dbs_busy: bool,
    dbs_seen: BTreeSet<u16>,
    pending_msgs: Vec<PendingMsg>,
    // results
    out: SimOutcome,
}

fn idx(n: NodeId) -> usize {
    n.0 as usize - 1
}

impl Sim<'_> {
    fn now(&self) -> SimTime {
        self.kernel.now()
    }

    fn debit(&mut self, n: NodeId, op: EnergyOp) {
        let now = self.now();
        let node = &mut self.nodes[idx(n)];
        if node.energy.is_offline() {
            return;
        }
        let joules = node.energy.debit(op);
        if node.energy.is_offline() && node.offline_at.is_none() {
            node.offline_at = Some(now);
        }
        self.out.energy_ledger.push(EnergyDebit {
            at: now,
            node: n,
            op,
            joules,
            battery_after: node.energy.battery_j,
        });
    }

    fn touch(&mut self, n: NodeId) {
        let now = self.now();
        let node = &mut self.nodes[idx(n)];
        let micros = now.0.saturating_sub(node.last_idle.0);
        node.last_idle = now;
        if micros > 0 {
            self.debit(n, EnergyOp::Idle { micros });
        }
    }

    fn offline(&self, n: NodeId) -> bool {
        self.nodes[idx(n)].energy.is_offline()
    }

    fn schedule(&mut self, at: SimTime, target: NodeId, kind: SimEvent) -> Result<(), SimError> {
        self.kernel.schedule(at, target, kind)?;
        Ok(())
    }

    fn link_key(src: NodeId, dst: NodeId) -> String {
        format!("{src}->{dst}")
    }

    fn link_stats(&mut self, src: NodeId, dst: NodeId) -> &mut LinkStats {
        self.out.links.entry(Self::link_key(src, dst)).or_default()
    }

    fn enqueue(
        &mut self,
        n: NodeId,
        dst: NodeId,
        kind: FrameKind,
        payload: Vec<u8>,
        arq: bool,
        alert_id: Option<u64>,
    ) -> Result<(), SimError> {
        let node = &mut self.nodes[idx(n)];
        let seq = node.next_seq;
        node.next_seq = node.next_seq.wrapping_add(1);
        node.queue.push_back(Outgoing {
            frame: Frame {
                src: n,
                dst,
                seq,
                kind,
                payload,
            },
            arq,
            attempts: 0,
            alert_id,
        });
        self.ensure_slot(n)
    }

    fn ensure_slot(&mut self, n: NodeId) -> Result<(), SimError> {
        let now = self.now();
        let node = &self.nodes[idx(n)];
        if node.slot_pending || node.queue.is_empty() || node.awaiting.is_some() {
            return Ok(());
        }
        let mut t = self
            .schedule
            .next_slot(n, now)
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        if node.last_slot == Some(t) {
            t = self
                .schedule
                .next_slot(n, SimTime(now.0 + 1))
                .map_err(|e| SimError::Invalid(e.to_string()))?;
        }
        self.nodes[idx(n)].slot_pending = true;
        self.schedule(t, n, SimEvent::SlotStart)
    }

    fn window(&mut self, w: usize) -> Window {
        if let Some(win) = self.cached.as_ref().filter(|x| x.index == w) {
            return win.clone();
        }
        let win = self.source.window(&self.grid, w, self.horizon_s);
        self.cached = Some(win.clone());
        win
    }

    fn on_window_ready(&mut self, n: NodeId, w: usize) -> Result<(), SimError> {
        self.touch(n);
        if self.offline(n) {
            return Ok(());
        }
        let win = self.window(w);
        let (modality, model, tag) = match n {
            NodeId::EEG => (Modality::Eeg, &self.models.eeg, self.tags[0]),
            _ => (Modality::Ecg, &self.models.ecg, self.tags[1]),
        };
        let fv = self
            .extractors
            .extract(&modality, &win)
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        let slot = match n {
            NodeId::EEG => &mut self.out.features_eeg[w],
            _ => &mut self.out.features_ecg[w],
        };
        *slot = Some(fv.values.clone());
        if fv.low_confidence {
            return Ok(());
        }
        let p = infer(model, &fv).map_err(|e| SimError::Invalid(e.to_string()))?;
        self.debit(n, EnergyOp::Inference);
        match n {
            NodeId::EEG => self.out.windows[w].p_eeg_node = Some(p),
            _ => self.out.windows[w].p_ecg_node = Some(p),
        }
        if self.offline(n) {
            return Ok(());
        }
        let v = Verdict {
            node: n,
            window_start: self.out.windows[w].start,
            p,
            model_tag: tag,
        };
        self.enqueue(
            n,
            NodeId::GATEWAY,
            FrameKind::Verdict,
            v.to_payload(),
            self.cfg.arq.verdicts,
            None,
        )
    }

    fn on_slot(&mut self, n: NodeId) -> Result<(), SimError> {
        let now = self.now();
        self.touch(n);
        let node = &mut self.nodes[idx(n)];
        node.slot_pending = false;
        if node.energy.is_offline() {
            let dropped: Vec<Outgoing> = node.queue.drain(..).collect();
            for o in dropped {
                self.fail_stim(&o, "offline");
            }
            return Ok(());
        }
        let node = &mut self.nodes[idx(n)];
        let Some(mut o) = node.queue.pop_front() else {
            return Ok(());
        };
        node.last_slot = Some(now);
        let bytes = o
            .frame
            .encode()
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        let bits = bytes.len() * 8;
        let peer = if n == NodeId::GATEWAY { o.frame.dst } else { n };
        let link = self.cfg.channels.link(peer).clone();
        let outcome = transmit(bits, now, &link, &mut self.nodes[idx(n)].rng);
        self.debit(n, EnergyOp::Tx { bits });
        let dst = o.frame.dst;
        if o.attempts > 0 {
            self.link_stats(n, dst).retransmissions += 1;
        }
        o.attempts += 1;
        self.link_stats(n, dst).sent += 1;
        let label = match outcome {
            DeliveryOutcome::Delivered { .. } => "delivered",
            DeliveryOutcome::Corrupted { .. } => "corrupted",
            DeliveryOutcome::Dropped => "dropped",
        };
        self.out.transmissions.push(TxRecord {
            node: n,
            dst,
            seq: o.frame.seq,
            kind: o.frame.kind,
            bits,
            start: now,
            end: now + link.airtime(bits),
            outcome: label.into(),
        });
        match outcome {
            DeliveryOutcome::Delivered { at } | DeliveryOutcome::Corrupted { at } => {
                let corrupted = matches!(outcome, DeliveryOutcome::Corrupted { .. });
                self.schedule(
                    at,
                    dst,
                    SimEvent::FrameArrival {
                        from: n,
                        bytes,
                        corrupted,
                    },
                )?;
            }
            DeliveryOutcome::Dropped => self.link_stats(n, dst).dropped += 1,
        }
        if o.arq {
            let seq = o.frame.seq;
            self.nodes[idx(n)].awaiting = Some(o);
            self.schedule(now + self.ack_timeout, n, SimEvent::AckTimeout { seq })?;
        } else if !matches!(outcome, DeliveryOutcome::Delivered { .. }) {
            self.fail_stim(&o, "lost");
        }
        self.ensure_slot(n)
    }

    fn fail_stim(&mut self, o: &Outgoing, reason: &str) {
        if let Some(alert_id) = o.alert_id {
            self.out.stim_failures.push(StimFailure {
                alert_id,
                at: self.kernel.now(),
                reason: reason.into(),
            });
            self.dbs_busy = false;
        }
    }

    fn on_ack_timeout(&mut self, n: NodeId, seq: u16) -> Result<(), SimError> {
        let node = &mut self.nodes[idx(n)];
        if node.awaiting.as_ref().map(|o| o.frame.seq) != Some(seq) {
            return Ok(());
        }
        let o = node.awaiting.take().expect("checked");
        let dst = o.frame.dst;
        if o.attempts <= self.cfg.arq.max_retries && !node.energy.is_offline() {
            node.queue.push_front(o);
        } else {
            self.link_stats(n, dst).gave_up += 1;
            self.fail_stim(&o, "unconfirmed");
        }
        self.ensure_slot(n)
    }

    fn on_arrival(
        &mut self,
        d: NodeId,
        from: NodeId,
        bytes: &[u8],
        corrupted: bool,
    ) -> Result<(), SimError> {
        self.touch(d);
        if self.offline(d) {
            self.link_stats(from, d).lost_offline += 1;
            return Ok(());
        }
        self.debit(
            d,
            EnergyOp::Rx {
                bits: bytes.len() * 8,
            },
        );
        if corrupted {
            self.link_stats(from, d).corrupted += 1;
            return Ok(());
        }
        self.link_stats(from, d).delivered += 1;
        let frame = Frame::decode(bytes)
            .map_err(|e| SimError::Invalid(format!("delivered frame failed to decode: {e}")))?;
        match frame.kind {
            FrameKind::Ack => {
                if frame.payload.len() == 2 {
                    let acked = u16::from_be_bytes([frame.payload[0], frame.payload[1]]);
                    let node = &mut self.nodes[idx(d)];
                    if node.awaiting.as_ref().map(|o| o.frame.seq) == Some(acked) {
                        node.awaiting = None;
                    }
                }
                self.ensure_slot(d)
            }
            FrameKind::Verdict if d == NodeId::GATEWAY => {
                if self.cfg.arq.verdicts {
                    self.send_ack(d, &frame)?;
                }
                let Some(v) = Verdict::from_payload(frame.src, &frame.payload) else {
                    return Ok(());
                };
                self.on_verdict(v)
            }
            FrameKind::Command if d == NodeId::DBS => {
                if self.cfg.arq.stim_commands {
                    self.send_ack(d, &frame)?;
                }
                if !self.dbs_seen.insert(frame.seq) {
                    return Ok(());
                }
                let Some((alert_id, params)) = parse_stim_payload(&frame.payload) else {
                    return Ok(());
                };
                self.on_stim_command(alert_id, params)
            }
            _ => Ok(()),
        }
    }

    fn send_ack(&mut self, from: NodeId, frame: &Frame) -> Result<(), SimError> {
        self.enqueue(
            from,
            frame.src,
            FrameKind::Ack,
            frame.seq.to_be_bytes().to_vec(),
            false,
            None,
        )
    }

    fn window_of(&self, start: SimTime) -> Option<usize> {
        let w = self
            .out
            .windows
            .binary_search_by_key(&start, |r| r.start)
            .ok()?;
        Some(w)
    }

    fn on_verdict(&mut self, v: Verdict) -> Result<(), SimError> {
        let Some(w) = self.window_of(v.window_start) else {
            self.out.late_verdicts += 1;
            return Ok(());
        };
        if w < self.next_window {
            self.out.late_verdicts += 1;
            return Ok(());
        }
        let slot = self.pending.entry(w).or_default();
        match v.node {
            NodeId::EEG if v.model_tag == self.tags[0] => slot.eeg = slot.eeg.or(Some(v.p)),
            NodeId::ECG if v.model_tag == self.tags[1] => slot.ecg = slot.ecg.or(Some(v.p)),
            _ => {}
        }
        self.finalize_ready()
    }

    fn deadline(&self, w: usize) -> SimTime {
        self.out.windows[w].end + self.timeout
    }

    /// Resolves windows strictly in order: a window closes when both
    /// verdicts are in or its deadline has passed.
    fn finalize_ready(&mut self) -> Result<(), SimError> {
        let now = self.now();
        while self.next_window < self.out.windows.len() {
            let w = self.next_window;
            let slot = self.pending.get(&w).copied().unwrap_or_default();
            let complete = slot.eeg.is_some() && slot.ecg.is_some();
            if !complete && now < self.deadline(w) {
                break;
            }
            self.pending.remove(&w);
            self.next_window += 1;
            self.resolve(w, slot)?;
        }
        Ok(())
    }

    fn batteries(&mut self) -> BTreeMap<String, f64> {
        let ids: Vec<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        ids.into_iter()
            .map(|id| {
                self.touch(id);
                (id.name().to_string(), self.nodes[idx(id)].energy.battery_j)
            })
            .collect()
    }

    fn emit(&mut self, obs: &mut dyn Observer, msg: Message) {
        obs.publish(&msg);
        self.out.messages.push(msg);
    }

    fn resolve(&mut self, w: usize, slot: PendingWindow) -> Result<(), SimError> {
        let now = self.now();
        let fused = handle_missing(
            slot.eeg,
            slot.ecg,
            &self.control.rule,
            self.cfg.decision.theta_single,
        );
        let rec = &mut self.out.windows[w];
        rec.p_eeg = slot.eeg;
        rec.p_ecg = slot.ecg;
        rec.decided_at = Some(now);
        match fused {
            None => rec.skipped = true,
            Some(f) => {
                rec.fused_p = Some(f.p);
                rec.positive = Some(f.positive);
                rec.degraded = f.degraded;
            }
        }
        let start = rec.start;
        self.pending_msgs.push(PendingMsg::Window(w));
        if let Some(f) = fused {
            if let Some(mut alert) = self.decision.step(&f, start, now) {
                let dbs_ready = self.cfg.dbs.present
                    && self.cfg.dbs.enabled
                    && !self.dbs_busy
                    && !self.offline(NodeId::DBS);
                if dbs_ready {
                    alert.action = AlertAction::NotifyStimulate;
                    self.dbs_busy = true;
                    let payload = stim_payload(alert.id, &self.control.stim_params);
                    self.enqueue(
                        NodeId::GATEWAY,
                        NodeId::DBS,
                        FrameKind::Command,
                        payload,
                        self.cfg.arq.stim_commands,
                        Some(alert.id),
                    )?;
                }
                self.control.raise(alert.id);
                self.pending_msgs
                    .push(PendingMsg::Alert(self.out.alerts.len()));
                self.out.alerts.push(alert);
            }
        }
        Ok(())
    }

    fn on_stim_command(&mut self, alert_id: u64, params: StimParams) -> Result<(), SimError> {
        let now = self.now();
        let Some(dbs) = self.dbs.as_mut() else {
            return Ok(());
        };
        let node = &mut self.nodes[idx(NodeId::DBS)];
        if let Err(v) = dbs.set_params(params) {
            let reason = crate::dbs::describe_violations(&v);
            self.out.stim_failures.push(StimFailure {
                alert_id,
                at: now,
                reason,
            });
            self.dbs_busy = false;
            return Ok(());
        }
        dbs.energy = node.energy.clone();
        let before = dbs.energy.battery_j;
        match dbs.trigger(alert_id, now) {
            Ok(ev) => {
                let joules = before - dbs.energy.battery_j;
                node.energy = dbs.energy.clone();
                if node.energy.is_offline() && node.offline_at.is_none() {
                    node.offline_at = Some(now);
                }
                self.out.energy_ledger.push(EnergyDebit {
                    at: now,
                    node: NodeId::DBS,
                    op: EnergyOp::Stimulation {
                        micros: (ev.end - ev.start).0,
                        j_per_s: dbs.stim_j_per_s,
                    },
                    joules,
                    battery_after: node.energy.battery_j,
                });
                apply_effect(
                    self.source.as_mut(),
                    &ev,
                    self.cfg.dbs.efficacy,
                    self.cfg.dbs.washout_s,
                );
                self.schedule(ev.end, NodeId::DBS, SimEvent::StimEnd { stim: ev.id })?;
                self.pending_msgs
                    .push(PendingMsg::Stim(self.out.stims.len()));
                self.out.stims.push(ev);
            }
            Err(e) => {
                self.out.stim_failures.push(StimFailure {
                    alert_id,
                    at: now,
                    reason: e.to_string(),
                });
                self.dbs_busy = false;
            }
        }
        Ok(())
    }

    fn on_stim_end(&mut self) {
        self.touch(NodeId::DBS);
        if let Some(d) = self.dbs.as_mut() {
            d.finish(self.kernel.now());
        }
        self.dbs_busy = false;
    }

    fn on_command(&mut self, cmd: &Command, obs: &mut dyn Observer) {
        let now = self.now();
        let reply = if self.offline(NodeId::GATEWAY) {
            Message::Reject {
                id: cmd.id.clone(),
                reason: "offline".into(),
            }
        } else {
            match self.control.apply_command(cmd, now) {
                Ok(rec) => Message::Ack {
                    id: cmd.id.clone(),
                    applied_at_us: rec.applied_at.0,
                    seq: rec.seq,
                },
                Err(reason) => Message::Reject {
                    id: cmd.id.clone(),
                    reason,
                },
            }
        };
        obs.reply(&cmd.issuer, &reply);
    }

    fn flush_messages(&mut self, obs: &mut dyn Observer) {
        let pending = std::mem::take(&mut self.pending_msgs);
        for m in pending {
            let msg = match m {
                PendingMsg::Window(w) => {
                    let battery_j = self.batteries();
                    let r = &self.out.windows[w];
                    Message::Telemetry(TelemetryMsg {
                        window: w,
                        window_start_s: r.start.as_secs_f64(),
                        at_us: r.decided_at.map_or(0, |t| t.0),
                        p_eeg: r.p_eeg,
                        p_ecg: r.p_ecg,
                        fused_p: r.fused_p,
                        positive: r.positive,
                        degraded: r.degraded,
                        skipped: r.skipped,
                        battery_j,
                    })
                }
                PendingMsg::Alert(i) => Message::Alert(AlertMsg::from(&self.out.alerts[i])),
                PendingMsg::Stim(i) => Message::Stim(StimMsg::from(&self.out.stims[i])),
            };
            self.emit(obs, msg);
        }
    }
}

enum PendingMsg {
    Window(usize),
    Alert(usize),
    Stim(usize),
}

/// Runs one scenario to completion.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    models: &Models,
    source: Box<dyn SignalSource>,
    opts: SimOptions,
    obs: &mut dyn Observer,
) -> Result<SimOutcome, SimError> {
    let rate = source.sample_rate_hz();
    let mut total = source.len_samples();
    if cfg.duration_s > 0.0 {
        total = total.min((cfg.duration_s * rate).round() as usize);
    }
    let grid = cfg.windowing.grid(rate, total)?;
    let horizon_s = cfg.evaluation.horizon_s;
    let schedule = cfg.schedule();
    let timeout = cfg.modality_timeout();
    let synthetic = source.is_synthetic();
    let onsets_s = source.annotations().iter().map(|a| a.onset_s).collect();
    let windows: Vec<WindowRecord> = (0..grid.count)
        .map(|i| {
            let (s, e) = grid.bounds_s(i, rate);
            WindowRecord {
                index: i,
                start: SimTime::from_secs_f64(s),
                end: SimTime::from_secs_f64(e),
                label: crate::signal::label_window(s, e, source.annotations(), horizon_s),
                p_eeg_node: None,
                p_ecg_node: None,
                p_eeg: None,
                p_ecg: None,
                fused_p: None,
                positive: None,
                degraded: false,
                skipped: false,
                decided_at: None,
            }
        })
        .collect();
    let last_end = windows.last().map_or(SimTime::ZERO, |w| w.end);
    let t_end = last_end + timeout + SimTime::from_secs(1);

    let channel_root = RngStream::new(opts.seed, "channel");
    let mut nodes = Vec::new();
    let mut energy_cfgs = vec![
        (NodeId::EEG, &cfg.nodes.eeg.energy),
        (NodeId::ECG, &cfg.nodes.ecg.energy),
        (NodeId::GATEWAY, &cfg.nodes.gateway.energy),
    ];
    if cfg.dbs.present {
        energy_cfgs.push((NodeId::DBS, &cfg.dbs.energy));
    }
    for (id, e) in energy_cfgs {
        let energy = EnergyState::from(e);
        nodes.push(NodeState {
            id,
            initial_j: energy.battery_j,
            offline_at: energy.is_offline().then_some(SimTime::ZERO),
            energy,
            last_idle: SimTime::ZERO,
            queue: VecDeque::new(),
            slot_pending: false,
            last_slot: None,
            awaiting: None,
            next_seq: 0,
            rng: channel_root.child(id.0 as u64).rng(),
        });
    }

    let n = windows.len();
    let control = GatewayControl::new(cfg.fusion, cfg.dbs.params, cfg.dbs.limits);
    let mut sim = Sim {
        cfg,
        models,
        tags: [
            model_tag(&models.eeg.version),
            model_tag(&models.ecg.version),
        ],
        source,
        grid,
        horizon_s,
        extractors: Extractors {
            bands: cfg.features.bands.clone(),
            rpeak: cfg.features.rpeak,
        },
        schedule,
        timeout,
        ack_timeout: cfg.ack_timeout(),
        kernel: Kernel::new(),
        nodes,
        cached: None,
        pending: BTreeMap::new(),
        next_window: 0,
        decision: DecisionState::new(
            cfg.decision.persistence_k,
            SimTime::from_secs_f64(cfg.decision.refractory_s),
        ),
        control,
        dbs: cfg.dbs.present.then(|| Dbs::new(&cfg.dbs)),
        dbs_busy: false,
        dbs_seen: BTreeSet::new(),
        pending_msgs: Vec::new(),
        out: SimOutcome {
            seed: opts.seed,
            config: cfg.clone(),
            t_end,
            duration_s: total as f64 / rate,
            onsets_s,
            synthetic,
            windows,
            features_eeg: vec![None; n],
            features_ecg: vec![None; n],
            alerts: Vec::new(),
            stims: Vec::new(),
            stim_failures: Vec::new(),
            commands: Vec::new(),
            transmissions: Vec::new(),
            energy_ledger: Vec::new(),
            energy: BTreeMap::new(),
            links: BTreeMap::new(),
            late_verdicts: 0,
            messages: Vec::new(),
            trace: EventTrace::default(),
        },
    };

    for w in 0..n {
        let end = sim.out.windows[w].end;
        sim.schedule(end, NodeId::EEG, SimEvent::WindowReady { window: w })?;
        sim.schedule(end, NodeId::ECG, SimEvent::WindowReady { window: w })?;
        sim.schedule(
            end + timeout,
            NodeId::GATEWAY,
            SimEvent::Deadline { window: w },
        )?;
    }
    for c in &cfg.commands {
        let cmd = Command {
            id: c.id.clone(),
            issuer: c.issuer.clone(),
            kind: c.kind.clone(),
        };
        let at = SimTime::from_secs_f64(c.at_s);
        if at <= t_end {
            sim.schedule(at, NodeId::GATEWAY, SimEvent::Command(Box::new(cmd)))?;
        }
    }

    let wall_start = Instant::now();
    obs.state(SimTime::ZERO, &sim.control, &sim.out.alerts);
    loop {
        let next = sim.kernel.peek_time().filter(|&t| t <= t_end);
        if let (Some(speed), Some(next)) = (opts.realtime_speed, next) {
            pace(
                &mut sim.kernel,
                next,
                speed,
                wall_start,
                opts.mailbox.as_ref(),
            )?;
        }
        if let Some(mb) = &opts.mailbox {
            let now = sim.now();
            for cmd in mb.drain() {
                sim.schedule(now, NodeId::GATEWAY, SimEvent::Command(Box::new(cmd)))?;
            }
        }
        let Some(ev) = sim.kernel.pop_until(t_end) else {
            break;
        };
        sim.out.trace.push(&ev);
        dispatch(&mut sim, ev, obs)?;
        sim.flush_messages(obs);
        obs.state(sim.now(), &sim.control, &sim.out.alerts);
    }
    sim.kernel.advance_to(t_end)?;
    let ids: Vec<NodeId> = sim.nodes.iter().map(|n| n.id).collect();
    for id in &ids {
        sim.touch(*id);
    }
    for w in sim.next_window..n {
        sim.out.windows[w].skipped = true;
    }
    let mut energy = BTreeMap::new();
    for node in &sim.nodes {
        let mut by_category: BTreeMap<String, f64> = BTreeMap::new();
        for d in sim.out.energy_ledger.iter().filter(|d| d.node == node.id) {
            *by_category.entry(d.op.category().to_string()).or_default() += d.joules;
        }
        energy.insert(
            node.id.name().to_string(),
            NodeEnergy {
                initial_j: node.initial_j,
                final_j: node.energy.battery_j,
                consumed_j: node.initial_j - node.energy.battery_j,
                by_category,
                offline_at: node.offline_at,
            },
        );
    }
    sim.out.energy = energy;
    sim.out.commands = std::mem::take(&mut sim.control.log);
    Ok(sim.out)
}

fn dispatch(sim: &mut Sim, ev: Event<SimEvent>, obs: &mut dyn Observer) -> Result<(), SimError> {
    let target = ev.target;
    match ev.kind {
        SimEvent::WindowReady { window } => sim.on_window_ready(target, window),
        SimEvent::SlotStart => sim.on_slot(target),
        SimEvent::FrameArrival {
            from,
            bytes,
            corrupted,
        } => sim.on_arrival(target, from, &bytes, corrupted),
        SimEvent::Deadline { .. } => {
            if sim.offline(NodeId::GATEWAY) {
                return Ok(());
            }
            sim.touch(NodeId::GATEWAY);
            sim.finalize_ready()
        }
        SimEvent::AckTimeout { seq } => sim.on_ack_timeout(target, seq),
        SimEvent::StimEnd { .. } => {
            sim.on_stim_end();
            Ok(())
        }
        SimEvent::Command(cmd) => {
            sim.on_command(&cmd, obs);
            Ok(())
        }
    }
}

/// Holds the clock back until wall time catches up with `next`. A command
/// arriving meanwhile stops the wait with the clock advanced to the
/// wall-clock instant it arrived.
fn pace(
    kernel: &mut Kernel<SimEvent>,
    next: SimTime,
    speed: f64,
    start: Instant,
    mailbox: Option<&Mailbox<Command>>,
) -> Result<(), SimError> {
    loop {
        let wall_sim = SimTime::from_secs_f64(start.elapsed().as_secs_f64() * speed);
        if wall_sim >= next {
            return Ok(());
        }
        if mailbox.is_some_and(|m| !m.is_empty()) {
            kernel.advance_to(wall_sim.max(kernel.now()))?;
            return Ok(());
        }
        let remaining = (next.0 - wall_sim.0) as f64 / 1e6 / speed;
        std::thread::sleep(Duration::from_secs_f64(remaining.min(0.005)));
    }
}

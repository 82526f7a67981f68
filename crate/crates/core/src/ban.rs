//! Ultrasonic link layer and energy accounting: CRC-protected frame codec,
//! propagation and bit-error channel model, TDMA slot schedule, and per-node
//! battery state.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::simkernel::{NodeId, RngStream, SimTime};

pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 7;
pub const CRC_LEN: usize = 2;
pub const MAX_PAYLOAD: usize = 64;
pub const MAX_FRAME_LEN: usize = HEADER_LEN + MAX_PAYLOAD + CRC_LEN;
pub const MAX_FRAME_BITS: usize = MAX_FRAME_LEN * 8;

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    data.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[(((crc >> 8) as u8) ^ b) as usize]
    })
}

const CRC_TABLE: [u16; 256] = build_crc_table();

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Verdict,
    Command,
    Ack,
}

impl FrameKind {
    fn code(self) -> u8 {
        match self {
            FrameKind::Verdict => 0,
            FrameKind::Command => 1,
            FrameKind::Ack => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FrameKind::Verdict),
            1 => Some(FrameKind::Command),
            2 => Some(FrameKind::Ack),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dst: NodeId,
    pub seq: u16,
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated: {got} bytes, a frame needs at least {need}")]
    Truncated { got: usize, need: usize },
    #[error("corrupt: crc mismatch (computed {computed:#06x}, received {received:#06x})")]
    Corrupt { computed: u16, received: u16 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLong(usize),
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }

    pub fn bits(&self) -> usize {
        self.encoded_len() * 8
    }

    /// Wire layout, multi-byte fields big-endian:
    ///
    /// ```text
    /// 0     version (1)
    /// 1     src node
    /// 2     dst node
    /// 3..5  seq (u16)
    /// 5     kind (0 verdict, 1 command, 2 ack)
    /// 6     payload length
    /// 7..   payload
    /// last2 CRC-16/CCITT-FALSE over every preceding byte
    /// ```
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLong(self.payload.len()));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(FRAME_VERSION);
        out.push(self.src.0);
        out.push(self.dst.0);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(self.kind.code());
        out.push(self.payload.len() as u8);
        out.extend_from_slice(&self.payload);
        let crc = crc16_ccitt_false(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    /// Decodes one frame occupying the whole buffer. The CRC is checked
    /// before any header field is trusted.
    pub fn decode(buf: &[u8]) -> Result<Frame, FrameError> {
        let min = HEADER_LEN + CRC_LEN;
        if buf.len() < min {
            return Err(FrameError::Truncated {
                got: buf.len(),
                need: min,
            });
        }
        let (body, tail) = buf.split_at(buf.len() - CRC_LEN);
        let received = u16::from_be_bytes([tail[0], tail[1]]);
        let computed = crc16_ccitt_false(body);
        if computed != received {
            return Err(FrameError::Corrupt { computed, received });
        }
        let len = body[6] as usize;
        if body.len() - HEADER_LEN < len {
            return Err(FrameError::Truncated {
                got: buf.len(),
                need: min + len,
            });
        }
        if body.len() - HEADER_LEN != len || len > MAX_PAYLOAD {
            return Err(FrameError::Malformed(format!(
                "declared payload {len} bytes, buffer carries {}",
                body.len() - HEADER_LEN
            )));
        }
        if body[0] != FRAME_VERSION {
            return Err(FrameError::Malformed(format!(
                "unknown version {}",
                body[0]
            )));
        }
        let kind = FrameKind::from_code(body[5])
            .ok_or_else(|| FrameError::Malformed(format!("unknown kind {}", body[5])))?;
        Ok(Frame {
            src: NodeId(body[1]),
            dst: NodeId(body[2]),
            seq: u16::from_be_bytes([body[3], body[4]]),
            kind,
            payload: body[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub distance_m: f64,
    pub sound_speed_m_s: f64,
    pub bit_rate_bps: f64,
    pub bit_error_prob: f64,
    pub drop_prob: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            distance_m: 0.3,
            sound_speed_m_s: 1540.0,
            bit_rate_bps: 100_000.0,
            bit_error_prob: 1e-3,
            drop_prob: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid channel: {0}")]
pub struct ChannelError(pub String);

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.distance_m >= 0.0 && self.distance_m.is_finite()) {
            return Err(ChannelError(format!(
                "distance_m {} must be >= 0",
                self.distance_m
            )));
        }
        if !(self.sound_speed_m_s > 0.0 && self.sound_speed_m_s.is_finite()) {
            return Err(ChannelError(format!(
                "sound_speed_m_s {} must be > 0",
                self.sound_speed_m_s
            )));
        }
        if !(self.bit_rate_bps > 0.0 && self.bit_rate_bps.is_finite()) {
            return Err(ChannelError(format!(
                "bit_rate_bps {} must be > 0",
                self.bit_rate_bps
            )));
        }
        for (name, p) in [
            ("bit_error_prob", self.bit_error_prob),
            ("drop_prob", self.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ChannelError(format!("{name} {p} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn propagation(&self) -> SimTime {
        SimTime::from_secs_f64(self.distance_m / self.sound_speed_m_s)
    }

    pub fn airtime(&self, bits: usize) -> SimTime {
        SimTime::from_secs_f64(bits as f64 / self.bit_rate_bps)
    }

    pub fn arrival(&self, t_send: SimTime, bits: usize) -> SimTime {
        t_send + self.propagation() + self.airtime(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum DeliveryOutcome {
    Delivered { at: SimTime },
    Corrupted { at: SimTime },
    Dropped,
}

/// Sends `bits` over the channel: a whole-frame drop is drawn first, then
/// every bit flips independently with the bit-error probability.
pub fn transmit<R: Rng>(
    bits: usize,
    t_send: SimTime,
    ch: &ChannelConfig,
    rng: &mut R,
) -> DeliveryOutcome {
    if ch.drop_prob > 0.0 && rng.random_bool(ch.drop_prob) {
        return DeliveryOutcome::Dropped;
    }
    let at = ch.arrival(t_send, bits);
    if count_bit_flips(bits, ch.bit_error_prob, rng) > 0 {
        DeliveryOutcome::Corrupted { at }
    } else {
        DeliveryOutcome::Delivered { at }
    }
}

/// Number of flipped bits among `bits` independent trials.
pub fn count_bit_flips<R: Rng>(bits: usize, p: f64, rng: &mut R) -> usize {
    if p <= 0.0 {
        0
    } else if p >= 1.0 {
        bits
    } else {
        (0..bits).filter(|_| rng.random_bool(p)).count()
    }
}

/// Flips bits of an encoded frame in place and returns how many flipped.
pub fn corrupt_bytes<R: Rng>(bytes: &mut [u8], p: f64, rng: &mut R) -> usize {
    let mut flips = 0;
    for byte in bytes.iter_mut() {
        for bit in 0..8 {
            if p > 0.0 && rng.random_bool(p.min(1.0)) {
                *byte ^= 1 << bit;
                flips += 1;
            }
        }
    }
    flips
}

/// Monte Carlo frame corruption rate over `trials` independent frames.
/// Trials are split into fixed chunks with their own child streams, so the
/// count does not depend on the execution mode.
pub fn corruption_rate_mc(
    p: f64,
    bits: usize,
    trials: usize,
    stream: &RngStream,
    exec: Exec,
) -> f64 {
    const CHUNK: usize = 4096;
    let chunks = trials.div_ceil(CHUNK);
    let corrupted: usize = exec
        .map_range(chunks, |c| {
            let mut rng = stream.child(c as u64).rng();
            let n = CHUNK.min(trials - c * CHUNK);
            (0..n)
                .filter(|_| count_bit_flips(bits, p, &mut rng) > 0)
                .count()
        })
        .into_iter()
        .sum();
    corrupted as f64 / trials as f64
}

/// Slotted medium: the slot list repeats every `slots.len() * slot_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdmaSchedule {
    pub slot_len: SimTime,
    pub slots: Vec<NodeId>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TdmaError {
    #[error("node {0} owns no slot in the schedule")]
    NodeAbsent(NodeId),
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

impl TdmaSchedule {
    pub fn cycle(&self) -> SimTime {
        SimTime(self.slot_len.0 * self.slots.len() as u64)
    }

    pub fn validate(
        &self,
        transmitters: &[NodeId],
        longest_airtime: SimTime,
    ) -> Result<(), TdmaError> {
        if self.slots.is_empty() || self.slot_len.0 == 0 {
            return Err(TdmaError::Invalid(
                "schedule needs at least one non-empty slot".into(),
            ));
        }
        if let Some(n) = transmitters.iter().find(|n| !self.slots.contains(n)) {
            return Err(TdmaError::NodeAbsent(*n));
        }
        if self.slot_len < longest_airtime {
            return Err(TdmaError::Invalid(format!(
                "slot of {} is shorter than the longest frame airtime {}",
                self.slot_len, longest_airtime
            )));
        }
        Ok(())
    }

    /// Earliest start of a slot owned by `node` at or after `now`.
    pub fn next_slot(&self, node: NodeId, now: SimTime) -> Result<SimTime, TdmaError> {
        let cycle = self.cycle().0;
        let slot = self.slot_len.0;
        let cycle_start = now.0 / cycle * cycle;
        let mut best: Option<u64> = None;
        for (i, _) in self.slots.iter().enumerate().filter(|(_, &n)| n == node) {
            let offset = i as u64 * slot;
            let mut t = cycle_start + offset;
            if t < now.0 {
                t += cycle;
            }
            best = Some(best.map_or(t, |b: u64| b.min(t)));
        }
        best.map(SimTime).ok_or(TdmaError::NodeAbsent(node))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub battery_j: f64,
    pub tx_j_per_bit: f64,
    pub rx_j_per_bit: f64,
    pub inference_j_per_window: f64,
    pub idle_w: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            battery_j: 1000.0,
            tx_j_per_bit: 1e-6,
            rx_j_per_bit: 0.5e-6,
            inference_j_per_window: 5e-3,
            idle_w: 1e-3,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("battery_j", self.battery_j),
            ("tx_j_per_bit", self.tx_j_per_bit),
            ("rx_j_per_bit", self.rx_j_per_bit),
            ("inference_j_per_window", self.inference_j_per_window),
            ("idle_w", self.idle_w),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} {v} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum EnergyOp {
    Tx { bits: usize },
    Rx { bits: usize },
    Inference,
    Idle { micros: u64 },
    Stimulation { micros: u64, j_per_s: f64 },
}

impl EnergyOp {
    pub fn category(&self) -> &'static str {
        match self {
            EnergyOp::Tx { .. } => "tx",
            EnergyOp::Rx { .. } => "rx",
            EnergyOp::Inference => "inference",
            EnergyOp::Idle { .. } => "idle",
            EnergyOp::Stimulation { .. } => "stimulation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyState {
    pub battery_j: f64,
    pub tx_j_per_bit: f64,
    pub rx_j_per_bit: f64,
    pub inference_j_per_window: f64,
    pub idle_w: f64,
}

impl From<&EnergyConfig> for EnergyState {
    fn from(c: &EnergyConfig) -> Self {
        EnergyState {
            battery_j: c.battery_j,
            tx_j_per_bit: c.tx_j_per_bit,
            rx_j_per_bit: c.rx_j_per_bit,
            inference_j_per_window: c.inference_j_per_window,
            idle_w: c.idle_w,
        }
    }
}

impl EnergyState {
    pub fn is_offline(&self) -> bool {
        self.battery_j <= 0.0
    }

    pub fn cost(&self, op: EnergyOp) -> f64 {
        match op {
            EnergyOp::Tx { bits } => bits as f64 * self.tx_j_per_bit,
            EnergyOp::Rx { bits } => bits as f64 * self.rx_j_per_bit,
            EnergyOp::Inference => self.inference_j_per_window,
            EnergyOp::Idle { micros } => self.idle_w * micros as f64 / 1e6,
            EnergyOp::Stimulation { micros, j_per_s } => j_per_s * micros as f64 / 1e6,
        }
    }

    /// Applies `op` and returns the energy actually removed. The battery
    /// clamps at zero; an offline node consumes nothing.
    pub fn debit(&mut self, op: EnergyOp) -> f64 {
        if self.is_offline() {
            return 0.0;
        }
        let applied = self.cost(op).min(self.battery_j);
        self.battery_j -= applied;
        if self.battery_j <= 0.0 {
            self.battery_j = 0.0;
        }
        applied
    }
}

/// Pure form of [`EnergyState::debit`].
pub fn debit_energy(e: &EnergyState, op: EnergyOp) -> EnergyState {
    let mut next = e.clone();
    next.debit(op);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Bit-at-a-time reference, kept separate from the table-driven path.
    fn crc_reference(data: &[u8]) -> u16 {
        let mut crc: u16 = 0xFFFF;
        for &byte in data {
            for i in (0..8).rev() {
                let bit = (byte >> i) & 1 == 1;
                let top = crc & 0x8000 != 0;
                crc <<= 1;
                if bit ^ top {
                    crc ^= 0x1021;
                }
            }
        }
        crc
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc_reference(b"123456789"), 0x29B1);
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
    }

    fn maximal_frame() -> Frame {
        Frame {
            src: NodeId::EEG,
            dst: NodeId::GATEWAY,
            seq: 0xBEEF,
            kind: FrameKind::Verdict,
            payload: (0..64u8).map(|i| i.wrapping_mul(37)).collect(),
        }
    }

    #[test]
    fn maximal_frame_round_trip() {
        let f = maximal_frame();
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), 73);
        assert_eq!(bytes.len() * 8, MAX_FRAME_BITS);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn every_single_bit_flip_is_corrupt() {
        let bytes = maximal_frame().encode().unwrap();
        for i in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[i / 8] ^= 1 << (i % 8);
            assert!(
                matches!(Frame::decode(&b), Err(FrameError::Corrupt { .. })),
                "bit {i} not detected"
            );
        }
    }

    #[test]
    fn short_buffer_is_truncated() {
        let bytes = maximal_frame().encode().unwrap();
        assert!(matches!(
            Frame::decode(&bytes[..5]),
            Err(FrameError::Truncated { .. })
        ));
        assert!(matches!(
            Frame::decode(&[]),
            Err(FrameError::Truncated { .. })
        ));
    }

    #[test]
    fn oversized_payload_is_refused() {
        let mut f = maximal_frame();
        f.payload.push(0);
        assert_eq!(f.encode(), Err(FrameError::PayloadTooLong(65)));
    }

    #[test]
    fn sampled_burst_errors_are_detected() {
        let bytes = maximal_frame().encode().unwrap();
        let mut rng = RngStream::new(11, "burst").rng();
        let nbits = bytes.len() * 8;
        for _ in 0..5_000 {
            let len = rng.random_range(1..=16);
            let start = rng.random_range(0..=nbits - len);
            let mut b = bytes.clone();
            // a burst of length `len` has both end bits flipped
            for i in start..start + len {
                if i == start || i == start + len - 1 || rng.random_bool(0.5) {
                    b[i / 8] ^= 0x80 >> (i % 8);
                }
            }
            assert!(Frame::decode(&b).is_err());
        }
    }

    #[test]
    fn lossless_delay_arithmetic() {
        let ch = ChannelConfig {
            distance_m: 0.154,
            sound_speed_m_s: 1540.0,
            bit_rate_bps: 100_000.0,
            bit_error_prob: 0.0,
            drop_prob: 0.0,
        };
        let mut rng = RngStream::new(1, "channel").rng();
        let out = transmit(584, SimTime(1_000), &ch, &mut rng);
        assert_eq!(
            out,
            DeliveryOutcome::Delivered {
                at: SimTime(1_000 + 100 + 5_840)
            }
        );
    }

    #[test]
    fn certain_bit_errors_always_corrupt() {
        let ch = ChannelConfig {
            bit_error_prob: 1.0,
            ..ChannelConfig::default()
        };
        let mut rng = RngStream::new(1, "channel").rng();
        for _ in 0..100 {
            assert!(matches!(
                transmit(100, SimTime(0), &ch, &mut rng),
                DeliveryOutcome::Corrupted { .. }
            ));
        }
    }

    #[test]
    fn certain_drop_always_drops() {
        let ch = ChannelConfig {
            drop_prob: 1.0,
            bit_error_prob: 0.0,
            ..ChannelConfig::default()
        };
        let mut rng = RngStream::new(1, "channel").rng();
        assert_eq!(
            transmit(100, SimTime(0), &ch, &mut rng),
            DeliveryOutcome::Dropped
        );
    }

    #[test]
    fn monte_carlo_corruption_matches_closed_form() {
        let (p, n, trials) = (0.01, 584, 100_000);
        let rate = corruption_rate_mc(p, n, trials, &RngStream::new(5, "mc"), Exec::default());
        let expected = 1.0 - (1.0 - p).powi(n as i32);
        let sigma = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!(
            (rate - expected).abs() <= 3.0 * sigma,
            "{rate} vs {expected}"
        );
    }

    #[test]
    fn monte_carlo_is_mode_independent() {
        let s = RngStream::new(5, "mc");
        assert_eq!(
            corruption_rate_mc(0.001, 584, 20_000, &s, Exec::Sequential),
            corruption_rate_mc(0.001, 584, 20_000, &s, Exec::Parallel)
        );
    }

    #[test]
    fn corrupted_bytes_fail_crc() {
        let bytes = maximal_frame().encode().unwrap();
        let mut rng = RngStream::new(2, "corrupt").rng();
        let mut b = bytes.clone();
        let flips = corrupt_bytes(&mut b, 1.0 / 584.0 * 3.0, &mut rng);
        assert_eq!(flips > 0, b != bytes);
    }

    fn sched(slots: &[u8], slot_ms: u64) -> TdmaSchedule {
        TdmaSchedule {
            slot_len: SimTime::from_millis(slot_ms),
            slots: slots.iter().map(|&n| NodeId(n)).collect(),
        }
    }

    #[test]
    fn next_slot_examples() {
        let s = sched(&[1, 2], 10);
        assert_eq!(
            s.next_slot(NodeId(2), SimTime::from_millis(3)).unwrap(),
            SimTime::from_millis(10)
        );
        assert_eq!(
            s.next_slot(NodeId(1), SimTime::ZERO).unwrap(),
            SimTime::ZERO
        );
        assert_eq!(
            s.next_slot(NodeId(1), SimTime(1)).unwrap(),
            SimTime::from_millis(20)
        );
        assert_eq!(
            s.next_slot(NodeId(3), SimTime::ZERO),
            Err(TdmaError::NodeAbsent(NodeId(3)))
        );
    }

    #[test]
    fn schedule_validation() {
        let s = sched(&[1, 2], 10);
        s.validate(&[NodeId(1), NodeId(2)], SimTime::from_millis(6))
            .unwrap();
        assert!(s.validate(&[NodeId(3)], SimTime::ZERO).is_err());
        assert!(s.validate(&[NodeId(1)], SimTime::from_millis(11)).is_err());
    }

    #[test]
    fn energy_examples() {
        let e = EnergyState::from(&EnergyConfig {
            battery_j: 1.0,
            ..EnergyConfig::default()
        });
        let after = debit_energy(&e, EnergyOp::Tx { bits: 584 });
        assert!((after.battery_j - 0.999416).abs() < 1e-12);
        let drained = debit_energy(
            &e,
            EnergyOp::Idle {
                micros: 10_000_000_000,
            },
        );
        assert_eq!(drained.battery_j, 0.0);
        assert!(drained.is_offline());
        let mut off = drained.clone();
        assert_eq!(off.debit(EnergyOp::Inference), 0.0);
        assert_eq!(off.battery_j, 0.0);
    }

    proptest! {
        #[test]
        fn codec_round_trip(src: u8, dst: u8, seq: u16, kind in 0u8..3, payload in proptest::collection::vec(any::<u8>(), 0..=64)) {
            let f = Frame { src: NodeId(src), dst: NodeId(dst), seq, kind: FrameKind::from_code(kind).unwrap(), payload };
            let bytes = f.encode().unwrap();
            prop_assert!(bytes.len() <= MAX_FRAME_LEN);
            prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
        }

        #[test]
        fn any_single_flip_is_detected(payload in proptest::collection::vec(any::<u8>(), 0..=64), bit in 0usize..584) {
            let f = Frame { src: NodeId(1), dst: NodeId(3), seq: 9, kind: FrameKind::Verdict, payload };
            let mut bytes = f.encode().unwrap();
            let bit = bit % (bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            let corrupt = matches!(Frame::decode(&bytes), Err(FrameError::Corrupt { .. }));
            prop_assert!(corrupt);
        }

        #[test]
        fn table_crc_matches_reference(data in proptest::collection::vec(any::<u8>(), 0..128)) {
            prop_assert_eq!(crc16_ccitt_false(&data), crc_reference(&data));
        }

        #[test]
        fn next_slot_is_minimal_owned_and_not_early(
            owners in proptest::collection::vec(1u8..4, 1..6),
            slot_us in 1u64..500,
            now in 0u64..20_000,
            node in 1u8..4,
        ) {
            let s = TdmaSchedule { slot_len: SimTime(slot_us), slots: owners.iter().map(|&n| NodeId(n)).collect() };
            let got = s.next_slot(NodeId(node), SimTime(now));
            // brute-force scan of the slot grid
            let horizon = now + 2 * s.cycle().0 + 1;
            let expected = (0..=horizon / slot_us)
                .map(|k| k * slot_us)
                .find(|&t| t >= now && s.slots[((t / slot_us) as usize) % s.slots.len()] == NodeId(node));
            match expected {
                Some(t) => prop_assert_eq!(got.unwrap(), SimTime(t)),
                None => prop_assert!(got.is_err()),
            }
        }

        #[test]
        fn battery_never_increases(ops in proptest::collection::vec((0u8..5, 0u64..100_000), 0..50)) {
            let mut e = EnergyState::from(&EnergyConfig { battery_j: 0.05, ..EnergyConfig::default() });
            let mut prev = e.battery_j;
            for (k, v) in ops {
                let op = match k {
                    0 => EnergyOp::Tx { bits: v as usize },
                    1 => EnergyOp::Rx { bits: v as usize },
                    2 => EnergyOp::Inference,
                    3 => EnergyOp::Idle { micros: v * 100 },
                    _ => EnergyOp::Stimulation { micros: v, j_per_s: 0.01 },
                };
                let applied = e.debit(op);
                prop_assert!(applied >= 0.0);
                prop_assert!(e.battery_j <= prev && e.battery_j >= 0.0);
                prop_assert!((prev - e.battery_j - applied).abs() < 1e-15);
                prev = e.battery_j;
            }
        }
    }
}

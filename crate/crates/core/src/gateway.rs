//! Gateway logic: verdict fusion, the persistence/refractory alert machine,
//! missing-modality degradation and command application.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbs::{describe_violations, validate_params, StimLimits, StimParams};
use crate::simkernel::{fnv1a64, NodeId, SimTime};

/// Per-modality positive threshold for the AND and OR rules.
pub const MODALITY_THRESHOLD: f64 = 0.5;
/// Slack on the weighted threshold comparison, so a fused value that equals
/// the threshold in exact arithmetic is not lost to rounding.
pub const FUSION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum FusionRule {
    And,
    Or,
    Weighted {
        w_eeg: f64,
        w_ecg: f64,
        threshold: f64,
    },
}

impl Default for FusionRule {
    fn default() -> Self {
        FusionRule::Weighted {
            w_eeg: 0.5,
            w_ecg: 0.5,
            threshold: 0.5,
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionRule::And => write!(f, "AND"),
            FusionRule::Or => write!(f, "OR"),
            FusionRule::Weighted {
                w_eeg,
                w_ecg,
                threshold,
            } => write!(f, "WEIGHTED({w_eeg}, {w_ecg}, {threshold})"),
        }
    }
}

impl FusionRule {
    /// Checks the rule and returns it with weights normalized to sum to one.
    pub fn normalized(self) -> Result<FusionRule, String> {
        match self {
            FusionRule::Weighted {
                w_eeg,
                w_ecg,
                threshold,
            } => {
                if !(w_eeg >= 0.0 && w_ecg >= 0.0 && w_eeg.is_finite() && w_ecg.is_finite()) {
                    return Err(format!(
                        "weights must be non-negative, got ({w_eeg}, {w_ecg})"
                    ));
                }
                let sum = w_eeg + w_ecg;
                if sum <= 0.0 {
                    return Err("weights must not both be zero".into());
                }
                if !(threshold > 0.0 && threshold < 1.0) {
                    return Err(format!("threshold {threshold} must be in (0, 1)"));
                }
                Ok(FusionRule::Weighted {
                    w_eeg: w_eeg / sum,
                    w_ecg: w_ecg / sum,
                    threshold,
                })
            }
            r => Ok(r),
        }
    }
}

/// Fused probability and decision for a pair of probabilities.
pub fn fuse_probs(p_eeg: f64, p_ecg: f64, rule: &FusionRule) -> (f64, bool) {
    match *rule {
        FusionRule::And => (
            p_eeg.min(p_ecg),
            p_eeg >= MODALITY_THRESHOLD && p_ecg >= MODALITY_THRESHOLD,
        ),
        FusionRule::Or => (
            p_eeg.max(p_ecg),
            p_eeg >= MODALITY_THRESHOLD || p_ecg >= MODALITY_THRESHOLD,
        ),
        FusionRule::Weighted {
            w_eeg,
            w_ecg,
            threshold,
        } => {
            let sum = w_eeg + w_ecg;
            let fused = (w_eeg * p_eeg + w_ecg * p_ecg) / sum;
            (fused, fused >= threshold - FUSION_EPS)
        }
    }
}

/// A classifier output stamped with its window start and model version.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub node: NodeId,
    pub window_start: SimTime,
    pub p: f64,
    pub model_tag: u32,
}

pub const VERDICT_PAYLOAD_LEN: usize = 16;

impl Verdict {
    /// `window_start_us` u64, `p` f32, model tag u32; big-endian.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VERDICT_PAYLOAD_LEN);
        out.extend_from_slice(&self.window_start.0.to_be_bytes());
        out.extend_from_slice(&(self.p as f32).to_be_bytes());
        out.extend_from_slice(&self.model_tag.to_be_bytes());
        out
    }

    pub fn from_payload(node: NodeId, b: &[u8]) -> Option<Verdict> {
        if b.len() != VERDICT_PAYLOAD_LEN {
            return None;
        }
        Some(Verdict {
            node,
            window_start: SimTime(u64::from_be_bytes(b[0..8].try_into().ok()?)),
            p: f32::from_be_bytes(b[8..12].try_into().ok()?) as f64,
            model_tag: u32::from_be_bytes(b[12..16].try_into().ok()?),
        })
    }
}

/// 32-bit tag of a model version string carried in every verdict.
pub fn model_tag(version: &str) -> u32 {
    let h = fnv1a64(version.as_bytes());
    (h ^ (h >> 32)) as u32
}

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("mismatched window times: eeg {eeg}, ecg {ecg}")]
    WindowMismatch { eeg: SimTime, ecg: SimTime },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fused {
    pub p: f64,
    pub positive: bool,
    pub degraded: bool,
}

pub fn fuse(v_eeg: &Verdict, v_ecg: &Verdict, rule: &FusionRule) -> Result<Fused, GatewayError> {
    if v_eeg.window_start != v_ecg.window_start {
        return Err(GatewayError::WindowMismatch {
            eeg: v_eeg.window_start,
            ecg: v_ecg.window_start,
        });
    }
    let (p, positive) = fuse_probs(v_eeg.p, v_ecg.p, rule);
    Ok(Fused {
        p,
        positive,
        degraded: false,
    })
}

/// Resolves a window once its deadline passed. One verdict present degrades
/// to the single-modality threshold; none present skips the window.
pub fn handle_missing(
    p_eeg: Option<f64>,
    p_ecg: Option<f64>,
    rule: &FusionRule,
    theta_single: f64,
) -> Option<Fused> {
    match (p_eeg, p_ecg) {
        (Some(a), Some(b)) => {
            let (p, positive) = fuse_probs(a, b, rule);
            Some(Fused {
                p,
                positive,
                degraded: false,
            })
        }
        (Some(p), None) | (None, Some(p)) => Some(Fused {
            p,
            positive: p >= theta_single,
            degraded: true,
        }),
        (None, None) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertAction {
    #[serde(rename = "notify")]
    Notify,
    #[serde(rename = "notify+stimulate")]
    NotifyStimulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub id: u64,
    pub at: SimTime,
    pub fused_p: f64,
    pub windows: Vec<SimTime>,
    pub action: AlertAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionConfig {
    pub persistence_k: u32,
    pub refractory_s: f64,
    /// Zero means twice the window stride.
    pub modality_timeout_s: f64,
    pub theta_single: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            persistence_k: 2,
            refractory_s: 600.0,
            modality_timeout_s: 0.0,
            theta_single: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionState {
    pub k: u32,
    pub refractory: SimTime,
    pub counter: u32,
    pub refractory_until: SimTime,
    recent: VecDeque<SimTime>,
    next_alert_id: u64,
}

impl DecisionState {
    pub fn new(k: u32, refractory: SimTime) -> Self {
        assert!(k >= 1, "persistence k must be at least 1");
        DecisionState {
            k,
            refractory,
            counter: 0,
            refractory_until: SimTime::ZERO,
            recent: VecDeque::new(),
            next_alert_id: 1,
        }
    }

    /// Feeds one fused window decision made at `now`. The counter saturates
    /// at k while an alert is held back by the refractory period.
    pub fn step(&mut self, fused: &Fused, window: SimTime, now: SimTime) -> Option<AlertEvent> {
        if !fused.positive {
            self.counter = 0;
            self.recent.clear();
            return None;
        }
        self.counter = (self.counter + 1).min(self.k);
        self.recent.push_back(window);
        while self.recent.len() > self.k as usize {
            self.recent.pop_front();
        }
        if self.counter == self.k && now >= self.refractory_until {
            let alert = AlertEvent {
                id: self.next_alert_id,
                at: now,
                fused_p: fused.p,
                windows: self.recent.drain(..).collect(),
                action: AlertAction::Notify,
            };
            self.next_alert_id += 1;
            self.counter = 0;
            self.refractory_until = now + self.refractory;
            return Some(alert);
        }
        None
    }
}

/// Pure form of [`DecisionState::step`].
pub fn step_decision(
    st: &DecisionState,
    fused: &Fused,
    window: SimTime,
    now: SimTime,
) -> (DecisionState, Option<AlertEvent>) {
    let mut next = st.clone();
    let alert = next.step(fused, window, now);
    (next, alert)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandKind {
    SetStimParams { params: StimParams },
    SetFusionRule { rule: FusionRule },
    AckAlert { alert_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub id: String,
    pub issuer: String,
    #[serde(flatten)]
    pub kind: CommandKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub seq: u64,
    pub id: String,
    pub issuer: String,
    pub applied_at: SimTime,
    pub command: CommandKind,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Gateway state mutated by commands; decision state lives alongside.
#[derive(Debug, Clone)]
pub struct GatewayControl {
    pub rule: FusionRule,
    pub stim_params: StimParams,
    pub limits: StimLimits,
    pub active_alerts: BTreeSet<u64>,
    pub known_alerts: BTreeSet<u64>,
    pub log: Vec<CommandRecord>,
}

impl GatewayControl {
    pub fn new(rule: FusionRule, stim_params: StimParams, limits: StimLimits) -> Self {
        GatewayControl {
            rule,
            stim_params,
            limits,
            active_alerts: BTreeSet::new(),
            known_alerts: BTreeSet::new(),
            log: Vec::new(),
        }
    }

    pub fn raise(&mut self, alert_id: u64) {
        self.known_alerts.insert(alert_id);
        self.active_alerts.insert(alert_id);
    }

    /// Validates and applies one command at `now`. Every command is logged;
    /// a rejected one leaves the state untouched.
    pub fn apply_command(&mut self, cmd: &Command, now: SimTime) -> Result<&CommandRecord, String> {
        let outcome = match &cmd.kind {
            CommandKind::SetStimParams { params } => validate_params(params, &self.limits)
                .map(|()| self.stim_params = *params)
                .map_err(|v| describe_violations(&v)),
            CommandKind::SetFusionRule { rule } => rule
                .normalized()
                .map(|r| self.rule = r)
                .map_err(|e| format!("invalid rule: {e}")),
            CommandKind::AckAlert { alert_id } => {
                if self.active_alerts.remove(alert_id) {
                    Ok(())
                } else {
                    Err("unknown id".to_string())
                }
            }
        };
        self.log.push(CommandRecord {
            seq: self.log.len() as u64 + 1,
            id: cmd.id.clone(),
            issuer: cmd.issuer.clone(),
            applied_at: now,
            command: cmd.kind.clone(),
            accepted: outcome.is_ok(),
            reason: outcome.clone().err(),
        });
        match outcome {
            Ok(()) => Ok(self.log.last().expect("just pushed")),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbs::HARD_LIMITS;
    use proptest::prelude::*;

    fn w(a: f64, b: f64, t: f64) -> FusionRule {
        FusionRule::Weighted {
            w_eeg: a,
            w_ecg: b,
            threshold: t,
        }
    }

    fn v(node: NodeId, t: u64, p: f64) -> Verdict {
        Verdict {
            node,
            window_start: SimTime::from_secs(t),
            p,
            model_tag: 0,
        }
    }

    #[test]
    fn weighted_example() {
        let f = fuse(
            &v(NodeId::EEG, 0, 0.9),
            &v(NodeId::ECG, 0, 0.8),
            &w(0.5, 0.5, 0.5),
        )
        .unwrap();
        assert!((f.p - 0.85).abs() < 1e-12);
        assert!(f.positive);
    }

    #[test]
    fn and_example() {
        let f = fuse(
            &v(NodeId::EEG, 0, 0.9),
            &v(NodeId::ECG, 0, 0.2),
            &FusionRule::And,
        )
        .unwrap();
        assert_eq!(f.p, 0.2);
        assert!(!f.positive);
    }

    #[test]
    fn mismatched_windows_error() {
        assert!(fuse(
            &v(NodeId::EEG, 0, 0.9),
            &v(NodeId::ECG, 2, 0.2),
            &FusionRule::Or
        )
        .is_err());
    }

    /// Truth table in tenths: p = i/10, weights as integers, threshold t/10.
    fn oracle(rule: &str, i: u32, j: u32, a: u32, b: u32, t: u32) -> bool {
        match rule {
            "and" => i >= 5 && j >= 5,
            "or" => i >= 5 || j >= 5,
            _ => a * i + b * j >= t * (a + b),
        }
    }

    #[test]
    fn grid_matches_truth_table() {
        let weightings = [(1, 1, 5), (3, 2, 5), (1, 0, 3), (1, 3, 7), (7, 3, 1)];
        let mut mismatches = 0;
        for i in 0..=10u32 {
            for j in 0..=10u32 {
                let (pi, pj) = (i as f64 / 10.0, j as f64 / 10.0);
                mismatches +=
                    (fuse_probs(pi, pj, &FusionRule::And).1 != oracle("and", i, j, 0, 0, 0)) as u32;
                mismatches +=
                    (fuse_probs(pi, pj, &FusionRule::Or).1 != oracle("or", i, j, 0, 0, 0)) as u32;
                for (a, b, t) in weightings {
                    let r = w(a as f64, b as f64, t as f64 / 10.0);
                    mismatches += (fuse_probs(pi, pj, &r).1 != oracle("w", i, j, a, b, t)) as u32;
                }
            }
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn rule_validation() {
        assert!(w(-1.0, 1.0, 0.5).normalized().is_err());
        assert!(w(0.0, 0.0, 0.5).normalized().is_err());
        assert!(w(1.0, 1.0, 1.0).normalized().is_err());
        assert!(w(1.0, 1.0, 0.0).normalized().is_err());
        assert_eq!(w(3.0, 1.0, 0.5).normalized().unwrap(), w(0.75, 0.25, 0.5));
    }

    #[test]
    fn degraded_examples() {
        let r = FusionRule::default();
        let f = handle_missing(Some(0.9), None, &r, 0.7).unwrap();
        assert!(f.positive && f.degraded);
        let f = handle_missing(Some(0.6), None, &r, 0.7).unwrap();
        assert!(!f.positive && f.degraded);
        assert_eq!(handle_missing(None, None, &r, 0.7), None);
    }

    fn pos(b: bool) -> Fused {
        Fused {
            p: if b { 0.9 } else { 0.1 },
            positive: b,
            degraded: false,
        }
    }

    fn run(seq: &[bool], k: u32, refractory: u64) -> Vec<usize> {
        let mut st = DecisionState::new(k, SimTime::from_secs(refractory));
        seq.iter()
            .enumerate()
            .filter_map(|(i, &b)| {
                let t = SimTime::from_secs(2 * i as u64);
                st.step(&pos(b), t, t).map(|_| i)
            })
            .collect()
    }

    #[test]
    fn persistence_example() {
        let s = [true, true, false, true, true, true];
        assert_eq!(run(&s, 3, 0), vec![5]);
    }

    #[test]
    fn k1_fires_on_every_positive() {
        assert_eq!(run(&[true, false, true, true], 1, 0), vec![0, 2, 3]);
    }

    #[test]
    fn alert_carries_contributing_windows() {
        let mut st = DecisionState::new(2, SimTime::from_secs(600));
        st.step(&pos(true), SimTime::from_secs(10), SimTime::from_secs(14));
        let a = st
            .step(&pos(true), SimTime::from_secs(12), SimTime::from_secs(16))
            .unwrap();
        assert_eq!(
            a.windows,
            vec![SimTime::from_secs(10), SimTime::from_secs(12)]
        );
        assert_eq!(a.id, 1);
        assert_eq!(st.refractory_until, SimTime::from_secs(616));
    }

    /// Direct scan: an alert fires at i when the last k windows are all
    /// positive and none of them was used by an earlier alert, and the
    /// refractory period since that alert has elapsed.
    fn scan(seq: &[bool], k: usize, refractory: u64) -> Vec<usize> {
        let mut alerts: Vec<usize> = Vec::new();
        for i in 0..seq.len() {
            let t = 2 * i as u64;
            let fresh_from = alerts.last().map_or(0, |&a| a + 1);
            if i + 1 < fresh_from + k {
                continue;
            }
            let run_ok = (i + 1 - k..=i).all(|j| seq[j]);
            let open = alerts
                .last()
                .is_none_or(|&a| t >= 2 * a as u64 + refractory);
            if run_ok && open {
                alerts.push(i);
            }
        }
        alerts
    }

    #[test]
    fn command_application() {
        let mut g = GatewayControl::new(FusionRule::default(), StimParams::default(), HARD_LIMITS);
        let c = Command {
            id: "c1".into(),
            issuer: "s1".into(),
            kind: CommandKind::SetFusionRule {
                rule: w(0.6, 0.4, 0.5),
            },
        };
        g.apply_command(&c, SimTime::from_secs(5)).unwrap();
        assert_eq!(g.rule, w(0.6, 0.4, 0.5));

        let bad = Command {
            id: "c2".into(),
            issuer: "s1".into(),
            kind: CommandKind::SetStimParams {
                params: StimParams {
                    amplitude_ma: 6.0,
                    ..StimParams::default()
                },
            },
        };
        let err = g.apply_command(&bad, SimTime::from_secs(6)).unwrap_err();
        assert!(err.starts_with("out of range"), "{err}");
        assert_eq!(g.stim_params, StimParams::default());
        assert_eq!(g.rule, w(0.6, 0.4, 0.5));
        assert_eq!(g.log.len(), 2);
        assert!(!g.log[1].accepted);
    }

    #[test]
    fn ack_alert_once() {
        let mut g = GatewayControl::new(FusionRule::default(), StimParams::default(), HARD_LIMITS);
        g.raise(1);
        let ack = Command {
            id: "a".into(),
            issuer: "s".into(),
            kind: CommandKind::AckAlert { alert_id: 1 },
        };
        g.apply_command(&ack, SimTime::ZERO).unwrap();
        assert!(g.active_alerts.is_empty());
        assert_eq!(
            g.apply_command(&ack, SimTime::ZERO).unwrap_err(),
            "unknown id"
        );
    }

    #[test]
    fn command_json_shape() {
        let c: Command = serde_json::from_str(
            r#"{"id":"x","issuer":"s","kind":"set_fusion_rule","rule":{"rule":"weighted","w_eeg":0.6,"w_ecg":0.4,"threshold":0.5}}"#,
        )
        .unwrap();
        assert_eq!(
            c.kind,
            CommandKind::SetFusionRule {
                rule: w(0.6, 0.4, 0.5)
            }
        );
    }

    #[test]
    fn verdict_payload_round_trip() {
        let x = Verdict {
            node: NodeId::ECG,
            window_start: SimTime::from_secs(1234),
            p: 0.75,
            model_tag: model_tag("mlp-v1"),
        };
        let b = x.to_payload();
        assert_eq!(b.len(), VERDICT_PAYLOAD_LEN);
        assert_eq!(Verdict::from_payload(NodeId::ECG, &b).unwrap(), x);
    }

    proptest! {
        #[test]
        fn decision_matches_scan(seq in proptest::collection::vec(any::<bool>(), 0..200), k in 1u32..5, refr in 0u64..40) {
            prop_assert_eq!(run(&seq, k, refr), scan(&seq, k as usize, refr));
        }

        #[test]
        fn counter_stays_in_range(seq in proptest::collection::vec(any::<bool>(), 0..100), k in 1u32..5) {
            let mut st = DecisionState::new(k, SimTime::from_secs(30));
            for (i, b) in seq.into_iter().enumerate() {
                let t = SimTime::from_secs(2 * i as u64);
                st.step(&pos(b), t, t);
                prop_assert!(st.counter <= k);
            }
        }

        #[test]
        fn weight_scaling_invariance(a in 0.0f64..1.0, b in 0.0f64..1.0, t in 0.01f64..0.99, s in 0.01f64..100.0, pe in 0.0f64..=1.0, pc in 0.0f64..=1.0) {
            prop_assume!(a + b > 1e-6);
            let base = w(a, b, t);
            let scaled = w(a * s, b * s, t);
            prop_assert_eq!(fuse_probs(pe, pc, &base).1, fuse_probs(pe, pc, &scaled).1);
            prop_assert_eq!(fuse_probs(pe, pc, &base).1, fuse_probs(pe, pc, &base.normalized().unwrap()).1);
        }

        #[test]
        fn fused_p_is_a_probability(pe in 0.0f64..=1.0, pc in 0.0f64..=1.0, a in 0.0f64..5.0, b in 0.01f64..5.0) {
            for r in [FusionRule::And, FusionRule::Or, w(a, b, 0.5)] {
                let (p, _) = fuse_probs(pe, pc, &r);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
            }
        }
    }
}

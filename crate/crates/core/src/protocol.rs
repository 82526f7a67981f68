//! Newline-delimited JSON messages exchanged with monitoring consoles.
//! Every line is one object whose `type` field selects the variant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dbs::{StimParams, StimulationEvent};
use crate::gateway::{AlertAction, AlertEvent, CommandKind, FusionRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMsg {
    pub window: usize,
    pub window_start_s: f64,
    pub at_us: u64,
    pub p_eeg: Option<f64>,
    pub p_ecg: Option<f64>,
    pub fused_p: Option<f64>,
    pub positive: Option<bool>,
    pub degraded: bool,
    pub skipped: bool,
    pub battery_j: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertMsg {
    pub id: u64,
    pub at_us: u64,
    pub fused_p: f64,
    pub windows_s: Vec<f64>,
    pub action: AlertAction,
}

impl From<&AlertEvent> for AlertMsg {
    fn from(a: &AlertEvent) -> Self {
        AlertMsg {
            id: a.id,
            at_us: a.at.0,
            fused_p: a.fused_p,
            windows_s: a.windows.iter().map(|w| w.as_secs_f64()).collect(),
            action: a.action,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimMsg {
    pub id: u64,
    pub alert_id: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub params: StimParams,
}

impl From<&StimulationEvent> for StimMsg {
    fn from(e: &StimulationEvent) -> Self {
        StimMsg {
            id: e.id,
            alert_id: e.triggered_by,
            start_us: e.start.0,
            end_us: e.end.0,
            params: e.params,
        }
    }
}

/// Client request. The issuer is the session that sent it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMsg {
    pub id: String,
    #[serde(flatten)]
    pub kind: CommandKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloMsg {
    pub session: String,
    pub replay: bool,
    pub sim_time_us: u64,
    pub fusion_rule: FusionRule,
    pub stim_params: StimParams,
    pub active_alerts: Vec<AlertMsg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(HelloMsg),
    Telemetry(TelemetryMsg),
    Alert(AlertMsg),
    Stim(StimMsg),
    Command(CommandMsg),
    Ack {
        id: String,
        applied_at_us: u64,
        seq: u64,
    },
    Reject {
        id: String,
        reason: String,
    },
    End {
        sim_time_us: u64,
    },
}

impl Message {
    /// Alerts and session control are never dropped by slow-consumer
    /// back-pressure; telemetry rows are.
    pub fn is_droppable(&self) -> bool {
        matches!(self, Message::Telemetry(_))
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("messages always serialize");
        s.push('\n');
        s
    }

    pub fn from_line(line: &str) -> Result<Message, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_shape() {
        let m = Message::from_line(
            r#"{"type":"command","id":"c7","kind":"set_stim_params","params":{"amplitude_ma":3.0,"frequency_hz":100.0,"pulse_width_us":90.0,"duration_s":20.0}}"#,
        )
        .unwrap();
        let Message::Command(c) = &m else {
            panic!("not a command: {m:?}")
        };
        assert_eq!(c.id, "c7");
        assert!(
            matches!(c.kind, CommandKind::SetStimParams { params } if params.amplitude_ma == 3.0)
        );
        assert_eq!(Message::from_line(&m.to_line()).unwrap(), m);
    }

    #[test]
    fn ack_and_reject_lines() {
        let a = Message::Ack {
            id: "c1".into(),
            applied_at_us: 5,
            seq: 1,
        };
        assert_eq!(
            a.to_line(),
            "{\"type\":\"ack\",\"id\":\"c1\",\"applied_at_us\":5,\"seq\":1}\n"
        );
        let r = Message::Reject {
            id: "c2".into(),
            reason: "unknown id".into(),
        };
        assert_eq!(Message::from_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn alert_action_spelling() {
        let m = Message::Alert(AlertMsg {
            id: 1,
            at_us: 0,
            fused_p: 0.9,
            windows_s: vec![],
            action: AlertAction::NotifyStimulate,
        });
        assert!(m.to_line().contains("\"action\":\"notify+stimulate\""));
        assert!(!m.is_droppable());
    }

    #[test]
    fn unknown_type_is_an_error() {
        assert!(Message::from_line(r#"{"type":"bogus"}"#).is_err());
        assert!(Message::from_line("not json").is_err());
    }
}

//! Run report: one JSON document per simulation, byte-stable for identical
//! inputs. Keys are sorted and ratios are rounded to four decimals.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::dbs::StimulationEvent;
use crate::evaluation::{event_scoring, metrics, ConfusionMatrix, EventScore, Metrics};
use crate::gateway::{AlertEvent, CommandRecord};
use crate::pipeline::confusions;
use crate::protocol::Message;
use crate::sim::{LinkStats, NodeEnergy, SimOutcome, StimFailure, WindowRecord};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("malformed report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: String,
    pub layer_sizes: Vec<usize>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusions {
    pub fused: ConfusionMatrix,
    pub eeg: ConfusionMatrix,
    pub ecg: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub fused: Metrics,
    pub eeg: Metrics,
    pub ecg: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub true_alarms: u64,
    pub false_alarms: u64,
    pub missed_seizures: u64,
    pub evaluated_onsets: u64,
    pub false_alarms_per_hour: Option<f64>,
    pub mean_latency_s: Option<f64>,
    pub latencies_s: Vec<f64>,
}

impl From<&(EventScore, f64)> for EventSummary {
    fn from((s, duration_s): &(EventScore, f64)) -> Self {
        EventSummary {
            true_alarms: s.true_alarms,
            false_alarms: s.false_alarms,
            missed_seizures: s.missed_seizures,
            evaluated_onsets: s.evaluated_onsets,
            false_alarms_per_hour: s.false_alarms_per_hour(*duration_s).map(round4),
            mean_latency_s: s.mean_latency_s().map(round4),
            latencies_s: s.latencies_s.iter().copied().map(round4).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub models: BTreeMap<String, ModelInfo>,
    pub synthetic: bool,
    pub duration_s: f64,
    pub t_end_us: u64,
    pub onsets_s: Vec<f64>,
    pub windows: Vec<WindowRecord>,
    pub skipped_windows: u64,
    pub degraded_windows: u64,
    pub late_verdicts: u64,
    pub confusion: Confusions,
    pub metrics: MetricSet,
    pub events: EventSummary,
    pub alerts: Vec<AlertEvent>,
    pub stims: Vec<StimulationEvent>,
    pub stim_failures: Vec<StimFailure>,
    pub commands: Vec<CommandRecord>,
    pub energy: BTreeMap<String, NodeEnergy>,
    pub links: BTreeMap<String, LinkStats>,
    pub transmissions: u64,
    /// Console stream in emission order, replayed by the serve command.
    pub telemetry: Vec<Message>,
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn round_metrics(m: Metrics) -> Metrics {
    Metrics {
        sensitivity: m.sensitivity.map(round4),
        specificity: m.specificity.map(round4),
        accuracy: m.accuracy.map(round4),
    }
}

pub fn build_report(o: &SimOutcome, models: &crate::sim::Models) -> Report {
    let (fused, eeg, ecg) = confusions(o);
    let cfg = &o.config;
    let alert_s: Vec<f64> = o.alerts.iter().map(|a| a.at.as_secs_f64()).collect();
    let score = event_scoring(
        &alert_s,
        &o.onsets_s,
        cfg.evaluation.horizon_s,
        cfg.evaluation.sop_s,
    );
    let info = |m: &crate::model::ModelSpec| ModelInfo {
        version: m.version.clone(),
        layer_sizes: m.layer_sizes.clone(),
        params: m.weights.len(),
    };
    Report {
        report_version: REPORT_VERSION,
        seed: o.seed,
        config: cfg.clone(),
        models: BTreeMap::from([
            ("eeg".to_string(), info(&models.eeg)),
            ("ecg".to_string(), info(&models.ecg)),
        ]),
        synthetic: o.synthetic,
        duration_s: o.duration_s,
        t_end_us: o.t_end.0,
        onsets_s: o.onsets_s.clone(),
        windows: o.windows.clone(),
        skipped_windows: o.windows.iter().filter(|w| w.skipped).count() as u64,
        degraded_windows: o.windows.iter().filter(|w| w.degraded).count() as u64,
        late_verdicts: o.late_verdicts,
        metrics: MetricSet {
            fused: round_metrics(metrics(&fused)),
            eeg: round_metrics(metrics(&eeg)),
            ecg: round_metrics(metrics(&ecg)),
        },
        confusion: Confusions { fused, eeg, ecg },
        events: EventSummary::from(&(score, o.duration_s)),
        alerts: o.alerts.clone(),
        stims: o.stims.clone(),
        stim_failures: o.stim_failures.clone(),
        commands: o.commands.clone(),
        energy: o.energy.clone(),
        links: o.links.clone(),
        transmissions: o.transmissions.len() as u64,
        telemetry: o.messages.clone(),
    }
}

impl Report {
    /// Canonical text: sorted keys, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("reports always serialize");
        let mut s = serde_json::to_string_pretty(&v).expect("values always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Report, ReportError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn read(path: &Path) -> Result<Report, ReportError> {
        Report::from_json(&std::fs::read_to_string(path)?)
    }

    /// Plain-text metric table.
    pub fn metric_table(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = format!(
            "{:<8}{:>13}{:>13}{:>10}{:>8}{:>8}{:>8}{:>8}\n",
            "", "sensitivity", "specificity", "accuracy", "tp", "fp", "tn", "fn"
        );
        for (name, m, c) in [
            ("fused", &self.metrics.fused, &self.confusion.fused),
            ("eeg", &self.metrics.eeg, &self.confusion.eeg),
            ("ecg", &self.metrics.ecg, &self.confusion.ecg),
        ] {
            out += &format!(
                "{:<8}{:>13}{:>13}{:>10}{:>8}{:>8}{:>8}{:>8}\n",
                name,
                fmt(m.sensitivity),
                fmt(m.specificity),
                fmt(m.accuracy),
                c.tp,
                c.fp,
                c.tn,
                c.fn_
            );
        }
        let e = &self.events;
        out += &format!(
            "alerts {}  true {}  false {}  missed {}/{}  false/h {}  mean latency {} s\n",
            self.alerts.len(),
            e.true_alarms,
            e.false_alarms,
            e.missed_seizures,
            e.evaluated_onsets,
            fmt(e.false_alarms_per_hour),
            fmt(e.mean_latency_s)
        );
        out += &format!(
            "windows {}  skipped {}  degraded {}  stims {}  commands {}\n",
            self.windows.len(),
            self.skipped_windows,
            self.degraded_windows,
            self.stims.len(),
            self.commands.len()
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(round4(0.99293955), 0.9929);
        assert_eq!(round4(0.99995), 1.0);
        assert_eq!(serde_json::to_string(&round4(2.0 / 3.0)).unwrap(), "0.6667");
    }
}

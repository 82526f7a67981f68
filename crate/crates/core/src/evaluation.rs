//! Window-level confusion metrics and event-level alarm scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Label;

#[derive(Debug, Error, PartialEq)]
#[error("length mismatch: {labels} labels, {decisions} decisions")]
pub struct LengthMismatch {
    pub labels: usize,
    pub decisions: usize,
}

/// Preictal is the positive class. Ictal windows are not scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, o: &ConfusionMatrix) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn record(&mut self, label: Label, positive: bool) {
        match (label, positive) {
            (Label::Ictal, _) => {}
            (Label::Preictal, true) => self.tp += 1,
            (Label::Preictal, false) => self.fn_ += 1,
            (Label::Interictal, true) => self.fp += 1,
            (Label::Interictal, false) => self.tn += 1,
        }
    }
}

/// Counts aligned label/decision pairs. `None` marks a window without a
/// decision, which is left out like an ictal window.
pub fn confusion(
    labels: &[Label],
    decisions: &[Option<bool>],
) -> Result<ConfusionMatrix, LengthMismatch> {
    if labels.len() != decisions.len() {
        return Err(LengthMismatch {
            labels: labels.len(),
            decisions: decisions.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&l, d) in labels.iter().zip(decisions) {
        if let Some(pos) = d {
            cm.record(l, *pos);
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    Metrics {
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub true_alarms: u64,
    pub false_alarms: u64,
    pub missed_seizures: u64,
    pub evaluated_onsets: u64,
    /// Per detected onset: matched alert time minus the horizon start.
    pub latencies_s: Vec<f64>,
}

impl EventScore {
    pub fn mean_latency_s(&self) -> Option<f64> {
        (!self.latencies_s.is_empty())
            .then(|| self.latencies_s.iter().sum::<f64>() / self.latencies_s.len() as f64)
    }

    pub fn false_alarms_per_hour(&self, duration_s: f64) -> Option<f64> {
        (duration_s > 0.0).then(|| self.false_alarms as f64 * 3600.0 / duration_s)
    }
}

/// An alert is true when it lies in `[onset - horizon, onset - sop)` of an
/// onset whose horizon starts inside the recording; each onset credits at
/// most one alert. Alerts are matched in time order to the earliest
/// uncredited onset containing them, which yields a maximum matching.
pub fn event_scoring(alerts_s: &[f64], onsets_s: &[f64], horizon_s: f64, sop_s: f64) -> EventScore {
    let mut alerts = alerts_s.to_vec();
    alerts.sort_by(f64::total_cmp);
    let mut onsets: Vec<f64> = onsets_s
        .iter()
        .copied()
        .filter(|&o| o - horizon_s >= 0.0)
        .collect();
    onsets.sort_by(f64::total_cmp);
    let mut credited = vec![false; onsets.len()];
    let mut score = EventScore {
        evaluated_onsets: onsets.len() as u64,
        ..EventScore::default()
    };
    for &a in &alerts {
        let hit = onsets
            .iter()
            .enumerate()
            .find(|&(i, &o)| !credited[i] && a >= o - horizon_s && a < o - sop_s);
        match hit {
            Some((i, &o)) => {
                credited[i] = true;
                score.true_alarms += 1;
                score.latencies_s.push(a - (o - horizon_s));
            }
            None => score.false_alarms += 1,
        }
    }
    score.missed_seizures = credited.iter().filter(|c| !**c).count() as u64;
    score
}

//! Implanted stimulator model: parameter safety bounds, stimulation events
//! and the synthetic efficacy hook.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ban::{EnergyConfig, EnergyOp, EnergyState};
use crate::signal::SignalSource;
use crate::simkernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimParams {
    pub amplitude_ma: f64,
    pub frequency_hz: f64,
    pub pulse_width_us: f64,
    pub duration_s: f64,
}

impl Default for StimParams {
    fn default() -> Self {
        StimParams {
            amplitude_ma: 2.0,
            frequency_hz: 130.0,
            pulse_width_us: 90.0,
            duration_s: 30.0,
        }
    }
}

impl StimParams {
    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.duration_s)
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Bound { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn within(&self, outer: &Bound) -> bool {
        self.lo <= self.hi && self.lo >= outer.lo && self.hi <= outer.hi
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimLimits {
    pub amplitude_ma: Bound,
    pub frequency_hz: Bound,
    pub pulse_width_us: Bound,
    pub max_duration_s: f64,
}

/// Ceilings no configuration may widen.
pub const HARD_LIMITS: StimLimits = StimLimits {
    amplitude_ma: Bound::new(0.0, 5.0),
    frequency_hz: Bound::new(30.0, 250.0),
    pulse_width_us: Bound::new(60.0, 450.0),
    max_duration_s: 3600.0,
};

impl Default for StimLimits {
    fn default() -> Self {
        HARD_LIMITS
    }
}

impl StimLimits {
    /// Ok iff every bound lies inside the hard ceilings.
    pub fn check_narrowing(&self) -> Result<(), String> {
        let pairs = [
            ("amplitude_ma", self.amplitude_ma, HARD_LIMITS.amplitude_ma),
            ("frequency_hz", self.frequency_hz, HARD_LIMITS.frequency_hz),
            (
                "pulse_width_us",
                self.pulse_width_us,
                HARD_LIMITS.pulse_width_us,
            ),
        ];
        for (name, b, hard) in pairs {
            if !b.within(&hard) {
                return Err(format!("limit {name} {b} widens the safety ceiling {hard}"));
            }
        }
        if !(self.max_duration_s > 0.0 && self.max_duration_s <= HARD_LIMITS.max_duration_s) {
            return Err(format!(
                "limit max_duration_s {} must be in (0, {}]",
                self.max_duration_s, HARD_LIMITS.max_duration_s
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub value: f64,
    pub bound: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} outside {}", self.field, self.value, self.bound)
    }
}

/// Formats a violation list as a single reject reason.
pub fn describe_violations(v: &[Violation]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("out of range: {}", parts.join("; "))
}

pub fn validate_params(p: &StimParams, limits: &StimLimits) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let checks = [
        ("amplitude_ma", p.amplitude_ma, limits.amplitude_ma),
        ("frequency_hz", p.frequency_hz, limits.frequency_hz),
        ("pulse_width_us", p.pulse_width_us, limits.pulse_width_us),
    ];
    for (field, value, bound) in checks {
        if !bound.contains(value) {
            out.push(Violation {
                field: field.into(),
                value,
                bound: bound.to_string(),
            });
        }
    }
    if !(p.duration_s > 0.0 && p.duration_s <= limits.max_duration_s) {
        out.push(Violation {
            field: "duration_s".into(),
            value: p.duration_s,
            bound: format!("(0, {}]", limits.max_duration_s),
        });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulationEvent {
    pub id: u64,
    pub start: SimTime,
    pub end: SimTime,
    pub params: StimParams,
    pub triggered_by: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriggerError {
    #[error("busy")]
    Busy,
    #[error("offline")]
    Offline,
    #[error("disabled")]
    Disabled,
    #[error("{}", describe_violations(.0))]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbsConfig {
    pub present: bool,
    pub enabled: bool,
    pub efficacy: f64,
    pub washout_s: f64,
    pub stim_j_per_s: f64,
    pub params: StimParams,
    pub limits: StimLimits,
    pub energy: EnergyConfig,
}

impl Default for DbsConfig {
    fn default() -> Self {
        DbsConfig {
            present: false,
            enabled: true,
            efficacy: 0.0,
            washout_s: 120.0,
            stim_j_per_s: 0.01,
            params: StimParams::default(),
            limits: StimLimits::default(),
            energy: EnergyConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dbs {
    pub enabled: bool,
    pub params: StimParams,
    pub limits: StimLimits,
    pub stim_j_per_s: f64,
    pub energy: EnergyState,
    active_until: Option<SimTime>,
    pub events: Vec<StimulationEvent>,
}

impl Dbs {
    pub fn new(cfg: &DbsConfig) -> Self {
        Dbs {
            enabled: cfg.enabled,
            params: cfg.params,
            limits: cfg.limits,
            stim_j_per_s: cfg.stim_j_per_s,
            energy: EnergyState::from(&cfg.energy),
            active_until: None,
            events: Vec::new(),
        }
    }

    pub fn is_stimulating(&self, now: SimTime) -> bool {
        self.active_until.is_some_and(|t| now < t)
    }

    /// Starts a stimulation with the parameters in effect. The end time is
    /// `now + duration`; the caller schedules the matching end event.
    pub fn trigger(
        &mut self,
        alert_id: u64,
        now: SimTime,
    ) -> Result<StimulationEvent, TriggerError> {
        if self.energy.is_offline() {
            return Err(TriggerError::Offline);
        }
        if !self.enabled {
            return Err(TriggerError::Disabled);
        }
        if self.is_stimulating(now) {
            return Err(TriggerError::Busy);
        }
        validate_params(&self.params, &self.limits).map_err(TriggerError::Invalid)?;
        let end = now + self.params.duration();
        self.energy.debit(EnergyOp::Stimulation {
            micros: (end - now).0,
            j_per_s: self.stim_j_per_s,
        });
        let ev = StimulationEvent {
            id: self.events.len() as u64 + 1,
            start: now,
            end,
            params: self.params,
            triggered_by: alert_id,
        };
        self.active_until = Some(end);
        self.events.push(ev.clone());
        Ok(ev)
    }

    pub fn finish(&mut self, now: SimTime) {
        if self.active_until.is_some_and(|t| t <= now) {
            self.active_until = None;
        }
    }

    pub fn set_params(&mut self, p: StimParams) -> Result<(), Vec<Violation>> {
        validate_params(&p, &self.limits)?;
        self.params = p;
        Ok(())
    }
}

/// Attenuates the planted signature over the stimulation plus washout.
/// Returns false on sources without a signature.
pub fn apply_effect(
    source: &mut dyn SignalSource,
    ev: &StimulationEvent,
    efficacy: f64,
    washout_s: f64,
) -> bool {
    source.suppress(
        ev.start.as_secs_f64(),
        ev.end.as_secs_f64() + washout_s,
        efficacy.clamp(0.0, 1.0),
    )
}

//! Per-node feature extraction: EEG band powers from a rectangular-window
//! periodogram, and RR-interval statistics from detected ECG R-peaks.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::signal::{ChannelKind, Window};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("window has no EEG channels")]
    NoEegChannels,
    #[error("window has no ECG channel")]
    NoEcgChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Set when the extractor could not produce trustworthy values; the
    /// node treats such windows as having no verdict.
    pub low_confidence: bool,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

/// Ordered frequency bands. Each band is `[lo, hi)` except the last, which
/// also includes its upper edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bands(pub Vec<Band>);

impl Default for Bands {
    fn default() -> Self {
        let b = |name: &str, lo_hz, hi_hz| Band {
            name: name.into(),
            lo_hz,
            hi_hz,
        };
        Bands(vec![
            b("delta", 0.5, 4.0),
            b("theta", 4.0, 8.0),
            b("alpha", 8.0, 13.0),
            b("beta", 13.0, 30.0),
            b("gamma", 30.0, 45.0),
        ])
    }
}

impl Bands {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|b| b.name == name)
    }

    fn band_of(&self, f: f64) -> Option<usize> {
        let last = self.0.len().checked_sub(1)?;
        self.0
            .iter()
            .enumerate()
            .position(|(i, b)| f >= b.lo_hz && (f < b.hi_hz || (i == last && f <= b.hi_hz)))
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// One-sided periodogram with a rectangular window, scaled so the bins sum
/// to the signal's mean square. Bin `k` sits at `k * rate / n` Hz.
pub fn periodogram(x: &[f32]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n));
    fft.process(&mut buf);
    let norm = (n as f64).powi(2);
    (0..=n / 2)
        .map(|k| {
            let p = buf[k].norm_sqr() / norm;
            let mirrored = k != 0 && !(n.is_multiple_of(2) && k == n / 2);
            if mirrored {
                2.0 * p
            } else {
                p
            }
        })
        .collect()
}

/// Sums periodogram bins into bands.
pub fn band_powers(x: &[f32], rate: f64, bands: &Bands) -> Vec<f64> {
    let pxx = periodogram(x);
    let n = x.len() as f64;
    let mut out = vec![0.0; bands.len()];
    for (k, p) in pxx.iter().enumerate() {
        if let Some(b) = bands.band_of(k as f64 * rate / n) {
            out[b] += p;
        }
    }
    out
}

/// Per-channel band powers, channel-major.
pub fn extract_features_eeg(w: &Window, bands: &Bands) -> Result<FeatureVector, FeatureError> {
    let idx = w.channel_indices(ChannelKind::Eeg);
    if idx.is_empty() {
        return Err(FeatureError::NoEegChannels);
    }
    let values = idx
        .iter()
        .flat_map(|&ch| band_powers(&w.samples[ch], w.sample_rate_hz, bands))
        .collect();
    Ok(FeatureVector {
        values,
        low_confidence: false,
    })
}

pub fn eeg_feature_len(eeg_channels: usize, bands: &Bands) -> usize {
    eeg_channels * bands.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RPeakDetector {
    /// Peaks must reach this fraction of the window maximum.
    pub threshold_fraction: f64,
    pub refractory_s: f64,
}

impl Default for RPeakDetector {
    fn default() -> Self {
        RPeakDetector {
            threshold_fraction: 0.6,
            refractory_s: 0.2,
        }
    }
}

impl RPeakDetector {
    /// Sample indices of detected R-peaks.
    pub fn detect(&self, x: &[f32], rate: f64) -> Vec<usize> {
        let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if x.len() < 3 || !(max > 0.0) {
            return Vec::new();
        }
        let thr = self.threshold_fraction as f32 * max;
        let refractory = (self.refractory_s * rate).round() as usize;
        let mut peaks: Vec<usize> = Vec::new();
        for i in 1..x.len() - 1 {
            if x[i] >= thr && x[i] > x[i - 1] && x[i] >= x[i + 1] {
                if let Some(&last) = peaks.last() {
                    if i - last < refractory {
                        continue;
                    }
                }
                peaks.push(i);
            }
        }
        peaks
    }
}

pub const ECG_FEATURE_LEN: usize = 4;

/// `[mean RR (ms), SDNN (ms), RMSSD (ms), heart rate (bpm)]`. Fewer than two
/// peaks yields zeros flagged low-confidence.
pub fn extract_features_ecg(
    w: &Window,
    det: &RPeakDetector,
) -> Result<FeatureVector, FeatureError> {
    let ch = *w
        .channel_indices(ChannelKind::Ecg)
        .first()
        .ok_or(FeatureError::NoEcgChannel)?;
    let peaks = det.detect(&w.samples[ch], w.sample_rate_hz);
    Ok(rr_features(&peaks, w.sample_rate_hz))
}

pub fn rr_features(peaks: &[usize], rate: f64) -> FeatureVector {
    if peaks.len() < 2 {
        return FeatureVector {
            values: vec![0.0; ECG_FEATURE_LEN],
            low_confidence: true,
        };
    }
    let rr: Vec<f64> = peaks
        .windows(2)
        .map(|p| (p[1] - p[0]) as f64 * 1000.0 / rate)
        .collect();
    let n = rr.len() as f64;
    let mean = rr.iter().sum::<f64>() / n;
    let sdnn = (rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmssd = if rr.len() >= 2 {
        let d: Vec<f64> = rr.windows(2).map(|p| p[1] - p[0]).collect();
        (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
    } else {
        0.0
    };
    FeatureVector {
        values: vec![mean, sdnn, rmssd, 60_000.0 / mean],
        low_confidence: false,
    }
}

/// Which extractor a classifier node runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Ecg,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extractors {
    pub bands: Bands,
    pub rpeak: RPeakDetector,
}

impl Extractors {
    pub fn extract(&self, modality: &Modality, w: &Window) -> Result<FeatureVector, FeatureError> {
        match modality {
            Modality::Eeg => extract_features_eeg(w, &self.bands),
            Modality::Ecg => extract_features_ecg(w, &self.rpeak),
        }
    }

    pub fn extract_batch(
        &self,
        modality: &Modality,
        windows: &[Window],
        exec: Exec,
    ) -> Result<Vec<FeatureVector>, FeatureError> {
        exec.map(windows, |w| self.extract(modality, w))
            .into_iter()
            .collect()
    }
}

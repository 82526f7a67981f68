//! Annotated physiological recordings: loading, saving, synthesis with a
//! planted preictal signature, and segmentation into classifier windows.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::{RngStream, SimTime};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("length mismatch: channel {channel} has {got} samples, expected {expected}")]
    LengthMismatch {
        channel: String,
        got: usize,
        expected: usize,
    },
    #[error("bad rate: sample rate must be positive, got {0}")]
    BadRate(f64),
    #[error("bad annotation: {0}")]
    BadAnnotation(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad binary container: {0}")]
    BadContainer(String),
    #[error("invalid synthetic config: {0}")]
    BadSynthetic(String),
    #[error("window of {window_s} s is longer than the {duration_s} s recording")]
    WindowTooLong { window_s: f64, duration_s: f64 },
    #[error("invalid windowing: {0}")]
    BadWindowing(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Eeg,
    Ecg,
}

impl ChannelKind {
    pub fn default_unit(self) -> &'static str {
        match self {
            ChannelKind::Eeg => "uV",
            ChannelKind::Ecg => "mV",
        }
    }

    /// CSV headers carry only names; names starting with `ecg` are ECG.
    pub fn from_name(name: &str) -> Self {
        if name.to_ascii_lowercase().starts_with("ecg") {
            ChannelKind::Ecg
        } else {
            ChannelKind::Eeg
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDesc {
    pub name: String,
    pub kind: ChannelKind,
    pub unit: String,
}

impl ChannelDesc {
    pub fn new(name: impl Into<String>, kind: ChannelKind) -> Self {
        ChannelDesc {
            name: name.into(),
            kind,
            unit: kind.default_unit().to_string(),
        }
    }
}

/// A seizure interval in seconds from recording start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset_s: f64,
    pub offset_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channels: Vec<ChannelDesc>,
    pub sample_rate_hz: f64,
    pub data: Vec<Vec<f32>>,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn new(
        channels: Vec<ChannelDesc>,
        sample_rate_hz: f64,
        data: Vec<Vec<f32>>,
        annotations: Vec<Annotation>,
    ) -> Result<Self, SignalError> {
        let rec = Recording {
            channels,
            sample_rate_hz,
            data,
            annotations,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(SignalError::BadRate(self.sample_rate_hz));
        }
        if self.channels.len() != self.data.len() {
            return Err(SignalError::BadContainer(format!(
                "{} channel descriptors for {} data arrays",
                self.channels.len(),
                self.data.len()
            )));
        }
        let expected = self.data.first().map_or(0, Vec::len);
        for (desc, samples) in self.channels.iter().zip(&self.data) {
            if samples.len() != expected {
                return Err(SignalError::LengthMismatch {
                    channel: desc.name.clone(),
                    got: samples.len(),
                    expected,
                });
            }
        }
        validate_annotations(&self.annotations, self.duration_s())
    }

    pub fn len_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.len_samples() as f64 / self.sample_rate_hz
    }

    pub fn channel_indices(&self, kind: ChannelKind) -> Vec<usize> {
        channel_indices(&self.channels, kind)
    }
}

pub fn channel_indices(channels: &[ChannelDesc], kind: ChannelKind) -> Vec<usize> {
    channels
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == kind)
        .map(|(i, _)| i)
        .collect()
}

fn validate_annotations(anns: &[Annotation], duration_s: f64) -> Result<(), SignalError> {
    let mut prev_offset = f64::NEG_INFINITY;
    for a in anns {
        if !(a.onset_s.is_finite() && a.offset_s.is_finite()) || a.offset_s < a.onset_s {
            return Err(SignalError::BadAnnotation(format!(
                "interval [{}, {}] is not ordered",
                a.onset_s, a.offset_s
            )));
        }
        if a.onset_s < 0.0 || a.offset_s > duration_s {
            return Err(SignalError::BadAnnotation(format!(
                "interval [{}, {}] outside recording of {} s",
                a.onset_s, a.offset_s, duration_s
            )));
        }
        if a.onset_s <= prev_offset {
            return Err(SignalError::BadAnnotation(format!(
                "interval starting at {} overlaps or precedes the previous one",
                a.onset_s
            )));
        }
        prev_offset = a.offset_s;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` files are CSV, everything else is the binary container.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

pub fn load_recording(path: &Path, format: Format) -> Result<Recording, SignalError> {
    match format {
        Format::Csv => {
            let csv = fs::File::open(path).map_err(io_err(path))?;
            let sidecar = annotation_sidecar(path);
            let anns = match fs::File::open(&sidecar) {
                Ok(f) => read_annotations(BufReader::new(f))?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(io_err(&sidecar)(e)),
            };
            read_csv(BufReader::new(csv), anns)
        }
        Format::Binary => {
            let mut buf = Vec::new();
            fs::File::open(path)
                .and_then(|mut f| f.read_to_end(&mut buf))
                .map_err(io_err(path))?;
            decode_binary(&buf)
        }
    }
}

pub fn save_recording(rec: &Recording, path: &Path, format: Format) -> Result<(), SignalError> {
    match format {
        Format::Csv => {
            let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
            write_csv(rec, &mut out).map_err(io_err(path))?;
            out.flush().map_err(io_err(path))?;
            let sidecar = annotation_sidecar(path);
            let mut ann = fs::File::create(&sidecar).map_err(io_err(&sidecar))?;
            for a in &rec.annotations {
                writeln!(ann, "{},{}", a.onset_s, a.offset_s).map_err(io_err(&sidecar))?;
            }
            Ok(())
        }
        Format::Binary => fs::write(path, encode_binary(rec)).map_err(io_err(path)),
    }
}

/// `rec.csv` carries its annotations in `rec.ann`.
pub fn annotation_sidecar(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("ann")
}

pub fn read_annotations<R: BufRead>(r: R) -> Result<Vec<Annotation>, SignalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SignalError::BadAnnotation(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match parts.as_slice() {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        let (onset_s, offset_s) = parsed.ok_or_else(|| {
            SignalError::BadAnnotation(format!("line {}: expected `onset_s,offset_s`", i + 1))
        })?;
        out.push(Annotation { onset_s, offset_s });
    }
    Ok(out)
}

pub fn read_csv<R: BufRead>(r: R, annotations: Vec<Annotation>) -> Result<Recording, SignalError> {
    let mut lines = r.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(|e| SignalError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => {
                return Err(SignalError::Parse {
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"time_s") || cols.len() < 2 {
        return Err(SignalError::Parse {
            line: 1,
            msg: "header must be `time_s,<channel>,...`".into(),
        });
    }
    let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut times = Vec::new();
    let mut data: Vec<Vec<f32>> = vec![Vec::new(); names.len()];
    for (i, line) in lines {
        let line = line.map_err(|e| SignalError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() > names.len() + 1 {
            return Err(SignalError::Parse {
                line: i + 1,
                msg: format!("{} fields for {} columns", fields.len(), names.len() + 1),
            });
        }
        let t: f64 = fields[0].parse().map_err(|_| SignalError::Parse {
            line: i + 1,
            msg: format!("bad time value `{}`", fields[0]),
        })?;
        times.push(t);
        for (ch, field) in fields[1..].iter().enumerate() {
            if field.is_empty() {
                continue;
            }
            let v: f32 = field.parse().map_err(|_| SignalError::Parse {
                line: i + 1,
                msg: format!("bad sample `{field}`"),
            })?;
            data[ch].push(v);
        }
    }
    let sample_rate_hz = match times.as_slice() {
        [t0, .., tn] if times.len() >= 2 => {
            let raw = (times.len() - 1) as f64 / (tn - t0);
            // timestamps are written with finite precision
            (raw * 1e6).round() / 1e6
        }
        _ => return Err(SignalError::BadRate(0.0)),
    };
    let channels = names
        .into_iter()
        .map(|n| {
            let kind = ChannelKind::from_name(&n);
            ChannelDesc::new(n, kind)
        })
        .collect();
    Recording::new(channels, sample_rate_hz, data, annotations)
}

pub fn write_csv<W: Write>(rec: &Recording, mut w: W) -> io::Result<()> {
    write!(w, "time_s")?;
    for c in &rec.channels {
        write!(w, ",{}", c.name)?;
    }
    writeln!(w)?;
    for i in 0..rec.len_samples() {
        write!(w, "{}", i as f64 / rec.sample_rate_hz)?;
        for ch in &rec.data {
            write!(w, ",{}", ch[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub const RECORDING_MAGIC: &[u8; 4] = b"SNR1";

/// Encodes the `SNR1` container (all fields little-endian):
///
/// ```text
/// magic "SNR1" | u32 channel count | f64 sample rate | u64 samples per channel
/// per channel: u8 kind (0 EEG, 1 ECG) | u8 name len | name | u8 unit len | unit
/// u32 annotation count | per annotation: f64 onset_s | f64 offset_s
/// samples: channel-major f32
/// ```
pub fn encode_binary(rec: &Recording) -> Vec<u8> {
    let n = rec.len_samples();
    let mut out = Vec::with_capacity(32 + rec.data.len() * n * 4);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&(rec.channels.len() as u32).to_le_bytes());
    out.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for c in &rec.channels {
        out.push(match c.kind {
            ChannelKind::Eeg => 0,
            ChannelKind::Ecg => 1,
        });
        for s in [&c.name, &c.unit] {
            let bytes = &s.as_bytes()[..s.len().min(255)];
            out.push(bytes.len() as u8);
            out.extend_from_slice(bytes);
        }
    }
    out.extend_from_slice(&(rec.annotations.len() as u32).to_le_bytes());
    for a in &rec.annotations {
        out.extend_from_slice(&a.onset_s.to_le_bytes());
        out.extend_from_slice(&a.offset_s.to_le_bytes());
    }
    for ch in &rec.data {
        for v in ch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SignalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end
            .ok_or_else(|| SignalError::BadContainer(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SignalError> {
        Ok(self.take(1)?[0])
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SignalError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn string(&mut self) -> Result<String, SignalError> {
        let len = self.u8()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| SignalError::BadContainer("channel string is not utf-8".into()))
    }
}

pub fn decode_binary(buf: &[u8]) -> Result<Recording, SignalError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != RECORDING_MAGIC {
        return Err(SignalError::BadContainer("missing SNR1 magic".into()));
    }
    let n_ch = u32::from_le_bytes(c.array()?) as usize;
    let rate = f64::from_le_bytes(c.array()?);
    let n = u64::from_le_bytes(c.array()?) as usize;
    let mut channels = Vec::with_capacity(n_ch.min(1024));
    for _ in 0..n_ch {
        let kind = match c.u8()? {
            0 => ChannelKind::Eeg,
            1 => ChannelKind::Ecg,
            k => {
                return Err(SignalError::BadContainer(format!(
                    "unknown channel kind {k}"
                )))
            }
        };
        let name = c.string()?;
        let unit = c.string()?;
        channels.push(ChannelDesc { name, kind, unit });
    }
    let n_ann = u32::from_le_bytes(c.array()?) as usize;
    let mut annotations = Vec::with_capacity(n_ann.min(1024));
    for _ in 0..n_ann {
        let onset_s = f64::from_le_bytes(c.array()?);
        let offset_s = f64::from_le_bytes(c.array()?);
        annotations.push(Annotation { onset_s, offset_s });
    }
    let payload = n_ch
        .checked_mul(n)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| SignalError::BadContainer("sample count overflows".into()))?;
    let raw = c.take(payload)?;
    if c.pos != buf.len() {
        return Err(SignalError::BadContainer(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    let data = raw
        .chunks_exact(4 * n.max(1))
        .take(n_ch)
        .map(|ch| {
            ch.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        })
        .collect::<Vec<Vec<f32>>>();
    let data = if n == 0 { vec![Vec::new(); n_ch] } else { data };
    Recording::new(channels, rate, data, annotations)
}

/// Ground-truth class of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Interictal,
    Preictal,
    /// Overlaps a seizure; emitted but excluded from scoring.
    Ictal,
}

/// Labels the window `[start_s, end_s]`: ictal if it touches any seizure
/// interval, preictal if its end lies in `[onset - horizon, onset)` of some
/// onset, otherwise interictal.
pub fn label_window(start_s: f64, end_s: f64, annotations: &[Annotation], horizon_s: f64) -> Label {
    if annotations
        .iter()
        .any(|a| start_s <= a.offset_s && end_s >= a.onset_s)
    {
        Label::Ictal
    } else if annotations
        .iter()
        .any(|a| end_s >= a.onset_s - horizon_s && end_s < a.onset_s)
    {
        Label::Preictal
    } else {
        Label::Interictal
    }
}

/// Window length and stride, in samples after validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub len_s: f64,
    pub stride_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            len_s: 4.0,
            stride_s: 2.0,
        }
    }
}

/// A window layout resolved against a concrete sample rate and length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub len_samples: usize,
    pub stride_samples: usize,
    pub count: usize,
}

fn whole_samples(seconds: f64, rate: f64, what: &str) -> Result<usize, SignalError> {
    let exact = seconds * rate;
    let rounded = exact.round();
    if !(seconds > 0.0) || (exact - rounded).abs() > 1e-6 || rounded < 1.0 {
        return Err(SignalError::BadWindowing(format!(
            "{what} of {seconds} s is not a positive whole number of samples at {rate} Hz"
        )));
    }
    Ok(rounded as usize)
}

impl WindowSpec {
    pub fn grid(
        &self,
        sample_rate_hz: f64,
        total_samples: usize,
    ) -> Result<WindowGrid, SignalError> {
        let len_samples = whole_samples(self.len_s, sample_rate_hz, "window")?;
        let stride_samples = whole_samples(self.stride_s, sample_rate_hz, "stride")?;
        if len_samples > total_samples {
            return Err(SignalError::WindowTooLong {
                window_s: self.len_s,
                duration_s: total_samples as f64 / sample_rate_hz,
            });
        }
        Ok(WindowGrid {
            len_samples,
            stride_samples,
            count: (total_samples - len_samples) / stride_samples + 1,
        })
    }
}

impl WindowGrid {
    pub fn start_sample(&self, index: usize) -> usize {
        index * self.stride_samples
    }

    pub fn bounds_s(&self, index: usize, rate: f64) -> (f64, f64) {
        let s = self.start_sample(index);
        (s as f64 / rate, (s + self.len_samples) as f64 / rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub index: usize,
    pub start: SimTime,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub channels: Vec<ChannelDesc>,
    pub samples: Vec<Vec<f32>>,
    /// Recordings without annotations are treated as seizure-free.
    pub label: Label,
}

impl Window {
    pub fn end(&self) -> SimTime {
        self.start + SimTime::from_secs_f64(self.duration_s)
    }

    pub fn channel_indices(&self, kind: ChannelKind) -> Vec<usize> {
        channel_indices(&self.channels, kind)
    }

    pub fn is_ictal(&self) -> bool {
        self.label == Label::Ictal
    }
}

/// Splits a recording into overlapping windows. Ictal windows are kept and
/// flagged so downstream consumers can exclude them from scoring.
pub fn segment(
    rec: &Recording,
    spec: WindowSpec,
    horizon_s: f64,
) -> Result<Vec<Window>, SignalError> {
    let grid = spec.grid(rec.sample_rate_hz, rec.len_samples())?;
    Ok((0..grid.count)
        .map(|i| window_at(rec, &grid, i, horizon_s))
        .collect())
}

fn window_at(rec: &Recording, grid: &WindowGrid, index: usize, horizon_s: f64) -> Window {
    let start = grid.start_sample(index);
    let (start_s, end_s) = grid.bounds_s(index, rec.sample_rate_hz);
    Window {
        index,
        start: SimTime::from_secs_f64(start_s),
        duration_s: grid.len_samples as f64 / rec.sample_rate_hz,
        sample_rate_hz: rec.sample_rate_hz,
        channels: rec.channels.clone(),
        samples: rec
            .data
            .iter()
            .map(|ch| ch[start..start + grid.len_samples].to_vec())
            .collect(),
        label: label_window(start_s, end_s, &rec.annotations, horizon_s),
    }
}

/// Where the simulation reads window samples from. Synthetic sources honour
/// the stimulation efficacy hook; recorded data ignores it.
pub trait SignalSource: Send {
    fn channels(&self) -> &[ChannelDesc];
    fn sample_rate_hz(&self) -> f64;
    fn len_samples(&self) -> usize;
    fn annotations(&self) -> &[Annotation];
    /// Samples `[start, start + len)` of every channel.
    fn read(&mut self, start: usize, len: usize) -> Vec<Vec<f32>>;
    /// Attenuates the planted signature by `(1 - efficacy)` over
    /// `[from_s, until_s)`. Returns false when the hook is inert.
    fn suppress(&mut self, from_s: f64, until_s: f64, efficacy: f64) -> bool;
    fn is_synthetic(&self) -> bool;

    fn window(&mut self, grid: &WindowGrid, index: usize, horizon_s: f64) -> Window {
        let rate = self.sample_rate_hz();
        let start = grid.start_sample(index);
        let (start_s, end_s) = grid.bounds_s(index, rate);
        let samples = self.read(start, grid.len_samples);
        Window {
            index,
            start: SimTime::from_secs_f64(start_s),
            duration_s: grid.len_samples as f64 / rate,
            sample_rate_hz: rate,
            channels: self.channels().to_vec(),
            samples,
            label: label_window(start_s, end_s, self.annotations(), horizon_s),
        }
    }
}

impl SignalSource for Recording {
    fn channels(&self) -> &[ChannelDesc] {
        &self.channels
    }
    fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }
    fn len_samples(&self) -> usize {
        Recording::len_samples(self)
    }
    fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }
    fn read(&mut self, start: usize, len: usize) -> Vec<Vec<f32>> {
        self.data
            .iter()
            .map(|ch| ch[start..start + len].to_vec())
            .collect()
    }
    fn suppress(&mut self, _from_s: f64, _until_s: f64, _efficacy: f64) -> bool {
        false
    }
    fn is_synthetic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Signature {
    /// Ratio of the theta amplitude at onset to its amplitude at the start
    /// of the preictal span.
    pub theta_ramp_gain: f64,
    pub theta_freq_hz: f64,
    /// Fractional RR shortening during preictal and ictal spans.
    pub rr_shortening_fraction: f64,
}

impl Default for Signature {
    fn default() -> Self {
        Signature {
            theta_ramp_gain: 2.5,
            theta_freq_hz: 6.0,
            rr_shortening_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub seizure_onsets_s: Vec<f64>,
    pub seizure_duration_s: f64,
    pub preictal_horizon_s: f64,
    pub eeg_channels: usize,
    /// Full-ramp signature power over background power, per EEG channel.
    pub snr_db: f64,
    pub eeg_noise_uv: f64,
    pub baseline_rr_ms: f64,
    /// Relative standard deviation of beat-to-beat RR intervals.
    pub rr_jitter: f64,
    pub ecg_noise_mv: f64,
    pub signature: Signature,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            duration_s: 1800.0,
            sample_rate_hz: 256.0,
            seizure_onsets_s: vec![700.0, 1400.0],
            seizure_duration_s: 60.0,
            preictal_horizon_s: 300.0,
            eeg_channels: 2,
            snr_db: 0.0,
            eeg_noise_uv: 10.0,
            baseline_rr_ms: 800.0,
            rr_jitter: 0.03,
            ecg_noise_mv: 0.02,
            signature: Signature::default(),
        }
    }
}

/// Lower edge and upper edge of the band-limited EEG background, Hz.
pub const EEG_NOISE_BAND: (f64, f64) = (0.5, 45.0);

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: String| Err(SignalError::BadSynthetic(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            ));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(SignalError::BadRate(self.sample_rate_hz));
        }
        if self.sample_rate_hz < 2.0 * EEG_NOISE_BAND.1 {
            return bad(format!(
                "sample_rate_hz {} cannot represent the {} Hz EEG band",
                self.sample_rate_hz, EEG_NOISE_BAND.1
            ));
        }
        if !(self.preictal_horizon_s > 0.0) {
            return bad(format!(
                "preictal_horizon_s must be positive, got {}",
                self.preictal_horizon_s
            ));
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite".into());
        }
        if !(self.seizure_duration_s >= 0.0) {
            return bad("seizure_duration_s must be non-negative".into());
        }
        if self.eeg_channels == 0 {
            return bad("eeg_channels must be at least 1".into());
        }
        if !(self.baseline_rr_ms > 0.0) || !(0.0..0.3).contains(&self.rr_jitter) {
            return bad("baseline_rr_ms must be positive and rr_jitter in [0, 0.3)".into());
        }
        let s = &self.signature;
        if !(s.theta_ramp_gain >= 1.0) || !(0.0..1.0).contains(&s.rr_shortening_fraction) {
            return bad("theta_ramp_gain must be >= 1 and rr_shortening_fraction in [0, 1)".into());
        }
        if !(s.theta_freq_hz > 0.0 && s.theta_freq_hz < self.sample_rate_hz / 2.0) {
            return bad(format!("theta_freq_hz {} out of range", s.theta_freq_hz));
        }
        let mut prev = f64::NEG_INFINITY;
        for &o in &self.seizure_onsets_s {
            if !(o >= 0.0 && o < self.duration_s) {
                return bad(format!(
                    "onset {o} s outside the {} s recording",
                    self.duration_s
                ));
            }
            if o <= prev + self.seizure_duration_s && prev.is_finite() {
                return bad(format!("onset {o} s overlaps the previous seizure"));
            }
            prev = o;
        }
        Ok(())
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.seizure_onsets_s
            .iter()
            .map(|&o| Annotation {
                onset_s: o,
                offset_s: (o + self.seizure_duration_s).min(self.duration_s),
            })
            .collect()
    }

    pub fn len_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    /// Peak theta amplitude implied by `snr_db` against the EEG background.
    pub fn theta_amplitude_uv(&self) -> f64 {
        // sinusoid power is A^2 / 2
        (2.0 * self.eeg_noise_uv.powi(2) * 10f64.powf(self.snr_db / 10.0)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Suppression {
    from_s: f64,
    until_s: f64,
    factor: f64,
}

/// Seeded synthetic recording with a planted preictal signature.
///
/// The background (band-limited EEG noise, ECG baseline noise) is drawn up
/// front; the signature is added when samples are read, so the
/// stimulation hook can attenuate it from the moment it is applied. ECG beats
/// are generated incrementally in time order for the same reason.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    cfg: SyntheticConfig,
    channels: Vec<ChannelDesc>,
    annotations: Vec<Annotation>,
    eeg_background: Vec<Vec<f32>>,
    eeg_phase: Vec<f64>,
    ecg: Vec<f32>,
    beat_rng: rand_chacha::ChaCha8Rng,
    next_beat_s: f64,
    beats: Vec<f64>,
    suppressions: Vec<Suppression>,
}

/// Shape of one R-peak around its centre sample, in mV.
const R_PULSE: [f32; 3] = [0.35, 1.0, 0.35];

impl SyntheticSource {
    pub fn new(cfg: SyntheticConfig) -> Result<Self, SignalError> {
        cfg.validate()?;
        let n = cfg.len_samples();
        let root = RngStream::new(cfg.seed, "generator");
        let eeg_background = (0..cfg.eeg_channels)
            .map(|ch| {
                band_limited_noise(
                    n,
                    cfg.sample_rate_hz,
                    cfg.eeg_noise_uv,
                    &root.child(ch as u64),
                )
            })
            .collect();
        let mut phase_rng = root.child(1_000).rng();
        let eeg_phase = (0..cfg.eeg_channels)
            .map(|_| phase_rng.random::<f64>() * 2.0 * PI)
            .collect();
        let mut ecg_rng = root.child(2_000).rng();
        let ecg = (0..n)
            .map(|_| (cfg.ecg_noise_mv * ecg_rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let mut beat_rng = root.child(3_000).rng();
        let first_beat = beat_rng.random::<f64>() * cfg.baseline_rr_ms / 1000.0;
        let mut channels: Vec<ChannelDesc> = (0..cfg.eeg_channels)
            .map(|i| ChannelDesc::new(format!("eeg{}", i + 1), ChannelKind::Eeg))
            .collect();
        channels.push(ChannelDesc::new("ecg", ChannelKind::Ecg));
        Ok(SyntheticSource {
            annotations: cfg.annotations(),
            cfg,
            channels,
            eeg_background,
            eeg_phase,
            ecg,
            beat_rng,
            next_beat_s: first_beat,
            beats: Vec::new(),
            suppressions: Vec::new(),
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// Beat times generated so far, in seconds.
    pub fn beats(&self) -> &[f64] {
        &self.beats
    }

    fn suppression_at(&self, t: f64) -> f64 {
        self.suppressions
            .iter()
            .filter(|s| t >= s.from_s && t < s.until_s)
            .map(|s| s.factor)
            .fold(1.0, f64::min)
    }

    /// Signature envelope in [0, 1]: a linear ramp from `1/gain` to 1 over
    /// each preictal span, 1 during the seizure, 0 elsewhere.
    pub fn envelope(&self, t: f64) -> f64 {
        let h = self.cfg.preictal_horizon_s;
        let floor = 1.0 / self.cfg.signature.theta_ramp_gain;
        for a in &self.annotations {
            if t >= a.onset_s - h && t < a.onset_s {
                return floor + (1.0 - floor) * (t - (a.onset_s - h)) / h;
            }
            if t >= a.onset_s && t < a.offset_s {
                return 1.0;
            }
        }
        0.0
    }

    /// Planted EEG signature on one channel at time `t`, before suppression.
    pub fn theta_signature(&self, channel: usize, t: f64) -> f64 {
        let env = self.envelope(t);
        if env == 0.0 {
            return 0.0;
        }
        let f = self.cfg.signature.theta_freq_hz;
        self.cfg.theta_amplitude_uv() * env * (2.0 * PI * f * t + self.eeg_phase[channel]).sin()
    }

    fn extend_beats(&mut self, end_sample: usize) {
        let rate = self.cfg.sample_rate_hz;
        let n = self.ecg.len();
        while self.next_beat_s * rate - 1.0 < end_sample as f64 {
            let t = self.next_beat_s;
            let centre = (t * rate).round() as i64;
            for (k, amp) in R_PULSE.iter().enumerate() {
                let idx = centre + k as i64 - 1;
                if (0..n as i64).contains(&idx) {
                    self.ecg[idx as usize] += amp;
                }
            }
            self.beats.push(t);
            let z: f64 = self.beat_rng.sample(StandardNormal);
            let jitter = 1.0 + self.cfg.rr_jitter * z.clamp(-3.0, 3.0);
            let active = if self.envelope(t) > 0.0 { 1.0 } else { 0.0 };
            let shortening =
                self.cfg.signature.rr_shortening_fraction * active * self.suppression_at(t);
            self.next_beat_s = t + self.cfg.baseline_rr_ms / 1000.0 * jitter * (1.0 - shortening);
        }
    }

    /// Renders the full recording with no suppression applied.
    pub fn materialize(mut self) -> Recording {
        let n = self.cfg.len_samples();
        let data = self.read(0, n);
        Recording {
            channels: self.channels,
            sample_rate_hz: self.cfg.sample_rate_hz,
            data,
            annotations: self.annotations,
        }
    }
}

impl SignalSource for SyntheticSource {
    fn channels(&self) -> &[ChannelDesc] {
        &self.channels
    }
    fn sample_rate_hz(&self) -> f64 {
        self.cfg.sample_rate_hz
    }
    fn len_samples(&self) -> usize {
        self.ecg.len()
    }
    fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    fn read(&mut self, start: usize, len: usize) -> Vec<Vec<f32>> {
        let end = start + len;
        self.extend_beats(end);
        let rate = self.cfg.sample_rate_hz;
        let mut out: Vec<Vec<f32>> = (0..self.cfg.eeg_channels)
            .map(|ch| {
                (start..end)
                    .map(|i| {
                        let t = i as f64 / rate;
                        let sig = self.theta_signature(ch, t);
                        let base = self.eeg_background[ch][i];
                        if sig == 0.0 {
                            base
                        } else {
                            (base as f64 + self.suppression_at(t) * sig) as f32
                        }
                    })
                    .collect()
            })
            .collect();
        out.push(self.ecg[start..end].to_vec());
        out
    }

    fn suppress(&mut self, from_s: f64, until_s: f64, efficacy: f64) -> bool {
        self.suppressions.push(Suppression {
            from_s,
            until_s,
            factor: 1.0 - efficacy.clamp(0.0, 1.0),
        });
        true
    }

    fn is_synthetic(&self) -> bool {
        true
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Recording, SignalError> {
    Ok(SyntheticSource::new(cfg.clone())?.materialize())
}

/// Gaussian noise restricted to [`EEG_NOISE_BAND`] by zeroing FFT bins,
/// scaled so its expected RMS is `rms`.
fn band_limited_noise(n: usize, rate: f64, rms: f64, stream: &RngStream) -> Vec<f32> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = stream.rng();
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let (lo, hi) = EEG_NOISE_BAND;
    let mut kept = 0usize;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if f >= lo && f <= hi {
            kept += 1;
        } else {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    // unit-variance white noise keeps kept/n of its power after masking
    let scale = rms / (n as f64) / (kept as f64 / n as f64).sqrt();
    buf.iter().map(|c| (c.re * scale) as f32).collect()
}

/// Deterministic suite of synthetic recordings derived from one seed.
pub fn synthetic_suite(seed: u64, count: usize) -> Vec<SyntheticConfig> {
    let root = RngStream::new(seed, "suite");
    (0..count)
        .map(|i| SyntheticConfig {
            seed: root.child(i as u64).key(),
            ..SyntheticConfig::default()
        })
        .collect()
}

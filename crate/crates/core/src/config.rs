//! Scenario configuration: TOML schema with defaults for every field,
//! exhaustive validation with line-anchored messages, and model loading.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ban::{ChannelConfig, EnergyConfig, TdmaSchedule, MAX_FRAME_BITS};
use crate::dbs::{validate_params, DbsConfig};
use crate::features::{eeg_feature_len, Bands, RPeakDetector, ECG_FEATURE_LEN};
use crate::gateway::{CommandKind, DecisionConfig, FusionRule};
use crate::model::{HardwareProfile, ModelSpec, MODEL_BUDGET_BYTES};
use crate::signal::{load_recording, ChannelKind, Format, Recording, SyntheticConfig, WindowSpec};
use crate::simkernel::{NodeId, SimTime};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordingConfig {
    pub source: SourceKind,
    /// CSV or SNR1 binary file, relative to the config file.
    pub path: Option<String>,
    /// Synthetic generator settings; its seed is replaced by the run seed.
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub horizon_s: f64,
    /// Minimum lead time: an alert must come at least this long before onset.
    pub sop_s: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            horizon_s: 300.0,
            sop_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub bands: Bands,
    pub rpeak: RPeakDetector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierNodeConfig {
    /// Model container path, relative to the config file.
    pub model: String,
    pub energy: EnergyConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayNodeConfig {
    pub energy: EnergyConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodesConfig {
    pub eeg: ClassifierNodeConfig,
    pub ecg: ClassifierNodeConfig,
    pub gateway: GatewayNodeConfig,
}

/// One config per link, named by its non-gateway endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelsConfig {
    pub eeg: ChannelConfig,
    pub ecg: ChannelConfig,
    pub dbs: ChannelConfig,
}

impl ChannelsConfig {
    /// Link between the gateway and `node`, in either direction.
    pub fn link(&self, node: NodeId) -> &ChannelConfig {
        match node {
            NodeId::EEG => &self.eeg,
            NodeId::ECG => &self.ecg,
            _ => &self.dbs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdmaConfig {
    pub slot_ms: f64,
    pub order: Vec<String>,
}

impl Default for TdmaConfig {
    fn default() -> Self {
        TdmaConfig {
            slot_ms: 10.0,
            order: ["eeg", "ecg", "gateway", "dbs"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArqConfig {
    /// Stop-and-wait acknowledgement of verdict frames.
    pub verdicts: bool,
    /// Stop-and-wait acknowledgement of stimulation commands.
    pub stim_commands: bool,
    pub max_retries: u32,
    /// Zero selects two TDMA cycles.
    pub ack_timeout_ms: f64,
}

impl Default for ArqConfig {
    fn default() -> Self {
        ArqConfig {
            verdicts: false,
            stim_commands: true,
            max_retries: 16,
            ack_timeout_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub at_s: f64,
    pub id: String,
    #[serde(default = "script_issuer")]
    pub issuer: String,
    #[serde(flatten)]
    pub kind: CommandKind,
}

fn script_issuer() -> String {
    "script".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulated span in seconds; zero runs the whole recording.
    pub duration_s: f64,
    pub recording: RecordingConfig,
    pub windowing: WindowSpec,
    pub evaluation: EvaluationConfig,
    pub features: FeatureConfig,
    pub nodes: NodesConfig,
    pub channels: ChannelsConfig,
    pub tdma: TdmaConfig,
    pub arq: ArqConfig,
    pub fusion: FusionRule,
    pub decision: DecisionConfig,
    pub dbs: DbsConfig,
    pub hardware: HardwareProfile,
    pub commands: Vec<ScriptedCommand>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 42,
            duration_s: 0.0,
            recording: RecordingConfig::default(),
            windowing: WindowSpec::default(),
            evaluation: EvaluationConfig::default(),
            features: FeatureConfig::default(),
            nodes: NodesConfig::default(),
            channels: ChannelsConfig::default(),
            tdma: TdmaConfig::default(),
            arq: ArqConfig::default(),
            fusion: FusionRule::default(),
            decision: DecisionConfig::default(),
            dbs: DbsConfig::default(),
            hardware: HardwareProfile::default(),
            commands: Vec::new(),
        }
    }
}

fn node_by_name(name: &str) -> Option<NodeId> {
    match name {
        "eeg" => Some(NodeId::EEG),
        "ecg" => Some(NodeId::ECG),
        "gateway" => Some(NodeId::GATEWAY),
        "dbs" => Some(NodeId::DBS),
        _ => None,
    }
}

impl ScenarioConfig {
    pub fn transmitters(&self) -> Vec<NodeId> {
        let mut v = vec![NodeId::EEG, NodeId::ECG, NodeId::GATEWAY];
        if self.dbs.present {
            v.push(NodeId::DBS);
        }
        v
    }

    /// TDMA schedule with nodes absent from the scenario left out.
    pub fn schedule(&self) -> TdmaSchedule {
        let present = self.transmitters();
        TdmaSchedule {
            slot_len: SimTime::from_secs_f64(self.tdma.slot_ms / 1e3),
            slots: self
                .tdma
                .order
                .iter()
                .filter_map(|n| node_by_name(n))
                .filter(|n| present.contains(n))
                .collect(),
        }
    }

    pub fn modality_timeout(&self) -> SimTime {
        if self.decision.modality_timeout_s > 0.0 {
            SimTime::from_secs_f64(self.decision.modality_timeout_s)
        } else {
            SimTime::from_secs_f64(2.0 * self.windowing.stride_s)
        }
    }

    pub fn ack_timeout(&self) -> SimTime {
        if self.arq.ack_timeout_ms > 0.0 {
            SimTime::from_secs_f64(self.arq.ack_timeout_ms / 1e3)
        } else {
            SimTime(2 * self.schedule().cycle().0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub file: Option<PathBuf>,
    pub issues: Vec<Issue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let file = self
            .file
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<config>".into());
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            match issue.line {
                Some(l) => write!(f, "{file}:{l}: {}", issue.message)?,
                None => write!(f, "{file}: {}", issue.message)?,
            }
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of `key` inside `[table]` (empty table means top level).
/// Falls back to the table header when the key is not written out.
pub fn locate(src: &str, table: &str, key: Option<&str>) -> Option<usize> {
    let mut in_table = table.is_empty();
    let mut header_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_matches(|c| c == '[' || c == ']').trim();
            in_table = name == table;
            if in_table && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if in_table {
            if let Some(k) = key {
                if let Some(rest) = line.strip_prefix(k) {
                    if rest.trim_start().starts_with('=') {
                        return Some(i + 1);
                    }
                }
            }
        }
    }
    header_line
}

/// Line of the `n`-th `[[table]]` entry.
fn locate_array_entry(src: &str, table: &str, n: usize) -> Option<usize> {
    let header = format!("[[{table}]]");
    src.lines()
        .enumerate()
        .filter(|(_, l)| l.trim() == header)
        .nth(n)
        .map(|(i, _)| i + 1)
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Models and recording resolved from a validated config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub eeg_model: ModelSpec,
    pub ecg_model: ModelSpec,
    /// Loaded file recording; `None` for synthetic sources.
    pub recording: Option<Recording>,
}

struct Validator<'a> {
    src: &'a str,
    issues: Vec<Issue>,
}

impl Validator<'_> {
    fn err(&mut self, table: &str, key: Option<&str>, message: impl Into<String>) {
        self.issues.push(Issue {
            line: locate(self.src, table, key),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, table: &str, key: &str, message: impl FnOnce() -> String) {
        if !ok {
            let full = if table.is_empty() {
                key.to_string()
            } else {
                format!("{table}.{key}")
            };
            self.err(table, Some(key), format!("{full}: {}", message()));
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|e| ConfigError {
        file: Some(path.to_path_buf()),
        issues: vec![Issue {
            line: None,
            message: format!("cannot read config: {e}"),
        }],
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&src, base).map_err(|mut e| {
        e.file = Some(path.to_path_buf());
        e
    })
}

/// Parses and validates a scenario; relative paths resolve against `base`.
pub fn parse_scenario(src: &str, base: &Path) -> Result<Scenario, ConfigError> {
    let config: ScenarioConfig = toml::from_str(src).map_err(|e| ConfigError {
        file: None,
        issues: vec![Issue {
            line: e.span().map(|s| line_of_offset(src, s.start)),
            message: e.message().trim().to_string(),
        }],
    })?;
    validate_scenario(config, src, base)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Runs every check and reports all failures together.
pub fn validate_scenario(
    mut config: ScenarioConfig,
    src: &str,
    base: &Path,
) -> Result<Scenario, ConfigError> {
    let mut v = Validator {
        src,
        issues: Vec::new(),
    };
    let c = &config;

    // recording
    let mut recording = None;
    let (sample_rate, total_samples, eeg_channels, has_ecg) = match c.recording.source {
        SourceKind::Synthetic => {
            if let Err(e) = c.recording.synthetic.validate() {
                v.err(
                    "recording.synthetic",
                    None,
                    format!("recording.synthetic: {e}"),
                );
            }
            let s = &c.recording.synthetic;
            (s.sample_rate_hz, s.len_samples(), s.eeg_channels, true)
        }
        SourceKind::File => match &c.recording.path {
            None => {
                v.err(
                    "recording",
                    Some("source"),
                    "recording.path is required when source = \"file\"",
                );
                (0.0, 0, 0, false)
            }
            Some(p) => {
                let path = resolve(base, p);
                match load_recording(&path, Format::from_path(&path)) {
                    Ok(rec) => {
                        let dims = (
                            rec.sample_rate_hz,
                            rec.len_samples(),
                            rec.channel_indices(ChannelKind::Eeg).len(),
                            !rec.channel_indices(ChannelKind::Ecg).is_empty(),
                        );
                        recording = Some(rec);
                        dims
                    }
                    Err(e) => {
                        v.err(
                            "recording",
                            Some("path"),
                            format!("recording.path {}: {e}", path.display()),
                        );
                        (0.0, 0, 0, false)
                    }
                }
            }
        },
    };
    if recording.is_some() || c.recording.source == SourceKind::Synthetic {
        v.check(eeg_channels > 0, "recording", "source", || {
            "recording has no EEG channels".into()
        });
        v.check(has_ecg, "recording", "source", || {
            "recording has no ECG channel".into()
        });
    }

    // timing
    v.check(
        c.duration_s >= 0.0 && c.duration_s.is_finite(),
        "",
        "duration_s",
        || format!("{} must be >= 0", c.duration_s),
    );
    if sample_rate > 0.0 && total_samples > 0 {
        let limited = if c.duration_s > 0.0 {
            total_samples.min((c.duration_s * sample_rate).round() as usize)
        } else {
            total_samples
        };
        if let Err(e) = c.windowing.grid(sample_rate, limited) {
            v.err("windowing", Some("len_s"), format!("windowing: {e}"));
        }
    }
    let ev = &c.evaluation;
    v.check(ev.horizon_s > 0.0, "evaluation", "horizon_s", || {
        format!("{} must be > 0", ev.horizon_s)
    });
    v.check(
        ev.sop_s >= 0.0 && ev.sop_s < ev.horizon_s,
        "evaluation",
        "sop_s",
        || format!("{} must be in [0, horizon_s)", ev.sop_s),
    );

    // features
    let mut prev_hi = f64::NEG_INFINITY;
    for b in &c.features.bands.0 {
        if !(b.lo_hz >= 0.0 && b.lo_hz < b.hi_hz && b.lo_hz >= prev_hi) {
            v.err(
                "features",
                Some("bands"),
                format!(
                    "features.bands: band {} [{}, {}] is empty or out of order",
                    b.name, b.lo_hz, b.hi_hz
                ),
            );
        }
        prev_hi = b.hi_hz;
    }
    v.check(!c.features.bands.0.is_empty(), "features", "bands", || {
        "at least one band is required".into()
    });
    let rp = &c.features.rpeak;
    v.check(
        rp.threshold_fraction > 0.0 && rp.threshold_fraction <= 1.0,
        "features.rpeak",
        "threshold_fraction",
        || format!("{} must be in (0, 1]", rp.threshold_fraction),
    );
    v.check(
        rp.refractory_s > 0.0,
        "features.rpeak",
        "refractory_s",
        || format!("{} must be > 0", rp.refractory_s),
    );

    // hardware and models
    if let Err(e) = c.hardware.validate() {
        v.err("hardware", None, format!("hardware: {e}"));
    }
    let load_model = |v: &mut Validator,
                      name: &str,
                      node: &ClassifierNodeConfig,
                      expect_len: Option<usize>| {
        let table = format!("nodes.{name}");
        if node.model.is_empty() {
            v.err(
                &table,
                None,
                format!("{table}.model: a model path is required"),
            );
            return None;
        }
        let path = resolve(base, &node.model);
        match ModelSpec::load(&path, MODEL_BUDGET_BYTES) {
            Ok(m) => {
                if let Err(e) = c.hardware.check_model(&m) {
                    v.err(&table, Some("model"), format!("{table}.model: {e}"));
                }
                if let Some(n) = expect_len {
                    if m.input_len() != n {
                        v.err(&table, Some("model"), format!(
                            "{table}.model: model expects {} features, the {name} extractor produces {n}",
                            m.input_len()
                        ));
                    }
                }
                Some(m)
            }
            Err(e) => {
                v.err(&table, Some("model"), format!("{table}.model: {e}"));
                None
            }
        }
    };
    let eeg_len = (eeg_channels > 0).then(|| eeg_feature_len(eeg_channels, &c.features.bands));
    let eeg_model = load_model(&mut v, "eeg", &c.nodes.eeg, eeg_len);
    let ecg_model = load_model(&mut v, "ecg", &c.nodes.ecg, Some(ECG_FEATURE_LEN));
    for (table, e) in [
        ("nodes.eeg.energy", &c.nodes.eeg.energy),
        ("nodes.ecg.energy", &c.nodes.ecg.energy),
        ("nodes.gateway.energy", &c.nodes.gateway.energy),
        ("dbs.energy", &c.dbs.energy),
    ] {
        if let Err(msg) = e.validate() {
            v.err(table, None, format!("{table}: {msg}"));
        }
    }

    // links and MAC
    for (name, ch) in [
        ("eeg", &c.channels.eeg),
        ("ecg", &c.channels.ecg),
        ("dbs", &c.channels.dbs),
    ] {
        if let Err(e) = ch.validate() {
            v.err(
                &format!("channels.{name}"),
                None,
                format!("channels.{name}: {e}"),
            );
        }
    }
    v.check(c.tdma.slot_ms > 0.0, "tdma", "slot_ms", || {
        format!("{} must be > 0", c.tdma.slot_ms)
    });
    for n in &c.tdma.order {
        v.check(node_by_name(n).is_some(), "tdma", "order", || {
            format!("unknown node {n:?}")
        });
    }
    if c.tdma.slot_ms > 0.0 {
        let mut links = vec![&c.channels.eeg, &c.channels.ecg];
        if c.dbs.present {
            links.push(&c.channels.dbs);
        }
        let longest = links
            .iter()
            .filter(|ch| ch.bit_rate_bps > 0.0)
            .map(|ch| ch.airtime(MAX_FRAME_BITS))
            .max()
            .unwrap_or(SimTime::ZERO);
        if let Err(e) = c.schedule().validate(&c.transmitters(), longest) {
            v.err("tdma", None, format!("tdma: {e}"));
        }
    }
    v.check(
        c.arq.max_retries >= 1 || !(c.arq.verdicts || c.arq.stim_commands),
        "arq",
        "max_retries",
        || "must be >= 1 when acknowledgements are enabled".into(),
    );
    v.check(c.arq.ack_timeout_ms >= 0.0, "arq", "ack_timeout_ms", || {
        format!("{} must be >= 0", c.arq.ack_timeout_ms)
    });

    // gateway
    match c.fusion.normalized() {
        Ok(r) => config.fusion = r,
        Err(e) => v.err("fusion", None, format!("fusion: {e}")),
    }
    let c = &config;
    let d = &c.decision;
    v.check(d.persistence_k >= 1, "decision", "persistence_k", || {
        "must be >= 1".into()
    });
    v.check(d.refractory_s >= 0.0, "decision", "refractory_s", || {
        format!("{} must be >= 0", d.refractory_s)
    });
    v.check(
        d.modality_timeout_s >= 0.0,
        "decision",
        "modality_timeout_s",
        || format!("{} must be >= 0", d.modality_timeout_s),
    );
    v.check(
        d.theta_single > 0.0 && d.theta_single < 1.0,
        "decision",
        "theta_single",
        || format!("{} must be in (0, 1)", d.theta_single),
    );

    // stimulator
    let dbs = &c.dbs;
    if let Err(e) = dbs.limits.check_narrowing() {
        v.err("dbs.limits", None, format!("dbs.limits: {e}"));
    }
    if let Err(viol) = validate_params(&dbs.params, &dbs.limits) {
        for x in viol {
            v.err(
                "dbs.params",
                Some(&x.field),
                format!("dbs.params: out of range: {x}"),
            );
        }
    }
    v.check(
        (0.0..=1.0).contains(&dbs.efficacy),
        "dbs",
        "efficacy",
        || format!("{} must be in [0, 1]", dbs.efficacy),
    );
    v.check(dbs.washout_s >= 0.0, "dbs", "washout_s", || {
        format!("{} must be >= 0", dbs.washout_s)
    });
    v.check(dbs.stim_j_per_s >= 0.0, "dbs", "stim_j_per_s", || {
        format!("{} must be >= 0", dbs.stim_j_per_s)
    });

    for (i, cmd) in c.commands.iter().enumerate() {
        if !(cmd.at_s >= 0.0 && cmd.at_s.is_finite()) {
            v.issues.push(Issue {
                line: locate_array_entry(src, "commands", i),
                message: format!("commands[{i}].at_s: {} must be >= 0", cmd.at_s),
            });
        }
    }

    match (v.issues.is_empty(), eeg_model, ecg_model) {
        (true, Some(eeg_model), Some(ecg_model)) => Ok(Scenario {
            config,
            eeg_model,
            ecg_model,
            recording,
        }),
        _ => Err(ConfigError {
            file: None,
            issues: v.issues,
        }),
    }
}

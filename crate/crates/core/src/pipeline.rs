//! Default training and benchmark pipeline over synthetic recordings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::evaluation::{metrics, ConfusionMatrix, Metrics};
use crate::exec::Exec;
use crate::features::{Extractors, Modality};
use crate::model::{ModelSpec, MODEL_BUDGET_BYTES};
use crate::signal::{
    generate_synthetic, segment, Label, Recording, SignalError, SyntheticConfig, SyntheticSource,
};
use crate::sim::{run_scenario, Models, NullObserver, SimError, SimOptions, SimOutcome};
use crate::simkernel::RngStream;
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("signal: {0}")]
    Signal(#[from] SignalError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("features: {0}")]
    Features(String),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
}

pub const TRAINING_RECORDINGS: usize = 4;

/// Training recordings drawn from a stream disjoint from the benchmark suite.
pub fn training_configs(seed: u64, count: usize) -> Vec<SyntheticConfig> {
    let root = RngStream::new(seed, "training-set");
    (0..count)
        .map(|i| SyntheticConfig {
            seed: root.child(i as u64).key(),
            ..SyntheticConfig::default()
        })
        .collect()
}

/// Feature rows and labels (true = preictal) with ictal windows left out.
pub fn dataset(
    recordings: &[Recording],
    modality: Modality,
    cfg: &ScenarioConfig,
    exec: Exec,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), PipelineError> {
    let ex = Extractors {
        bands: cfg.features.bands.clone(),
        rpeak: cfg.features.rpeak,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in recordings {
        let windows: Vec<_> = segment(rec, cfg.windowing, cfg.evaluation.horizon_s)?
            .into_iter()
            .filter(|w| w.label != Label::Ictal)
            .collect();
        let feats = ex
            .extract_batch(&modality, &windows, exec)
            .map_err(|e| PipelineError::Features(e.to_string()))?;
        for (w, f) in windows.iter().zip(feats) {
            if f.low_confidence {
                continue;
            }
            xs.push(f.values);
            ys.push(w.label == Label::Preictal);
        }
    }
    Ok((xs, ys))
}

pub fn generate_all(
    configs: &[SyntheticConfig],
    exec: Exec,
) -> Result<Vec<Recording>, PipelineError> {
    exec.map(configs, generate_synthetic)
        .into_iter()
        .map(|r| r.map_err(PipelineError::from))
        .collect()
}

pub fn train_modality(
    recordings: &[Recording],
    modality: Modality,
    cfg: &ScenarioConfig,
    train_cfg: &TrainConfig,
    exec: Exec,
) -> Result<ModelSpec, PipelineError> {
    let (xs, ys) = dataset(recordings, modality.clone(), cfg, exec)?;
    let version = match modality {
        Modality::Eeg => format!("{}-eeg", train_cfg.version),
        Modality::Ecg => format!("{}-ecg", train_cfg.version),
    };
    let tc = TrainConfig {
        version,
        ..train_cfg.clone()
    };
    Ok(train(&xs, &ys, &tc, MODEL_BUDGET_BYTES)?)
}

/// Trains both classifiers on the default training set for `seed`.
pub fn train_default_models(
    seed: u64,
    cfg: &ScenarioConfig,
    exec: Exec,
) -> Result<Models, PipelineError> {
    let recs = generate_all(&training_configs(seed, TRAINING_RECORDINGS), exec)?;
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (eeg, ecg) = match exec {
        Exec::Sequential => (
            train_modality(&recs, Modality::Eeg, cfg, &tc, exec),
            train_modality(&recs, Modality::Ecg, cfg, &tc, exec),
        ),
        Exec::Parallel => {
            let r = exec.map(&[Modality::Eeg, Modality::Ecg], |m| {
                train_modality(&recs, m.clone(), cfg, &tc, exec)
            });
            let mut it = r.into_iter();
            (it.next().expect("two"), it.next().expect("two"))
        }
    };
    Ok(Models {
        eeg: eeg?,
        ecg: ecg?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub recordings: usize,
    pub fused: ConfusionMatrix,
    pub eeg: ConfusionMatrix,
    pub ecg: ConfusionMatrix,
    pub fused_metrics: Metrics,
    pub eeg_metrics: Metrics,
    pub ecg_metrics: Metrics,
    pub skipped_windows: u64,
    pub alerts: u64,
}

/// Window-level confusion of fused decisions and of each node's own
/// verdicts, ictal and undecided windows excluded.
pub fn confusions(o: &SimOutcome) -> (ConfusionMatrix, ConfusionMatrix, ConfusionMatrix) {
    let mut fused = ConfusionMatrix::default();
    let mut eeg = ConfusionMatrix::default();
    let mut ecg = ConfusionMatrix::default();
    for w in &o.windows {
        if let Some(p) = w.positive {
            fused.record(w.label, p);
        }
        if let Some(p) = w.p_eeg_node {
            eeg.record(w.label, p >= 0.5);
        }
        if let Some(p) = w.p_ecg_node {
            ecg.record(w.label, p >= 0.5);
        }
    }
    (fused, eeg, ecg)
}

pub fn summarize(outcomes: &[SimOutcome]) -> SuiteSummary {
    let mut fused = ConfusionMatrix::default();
    let mut eeg = ConfusionMatrix::default();
    let mut ecg = ConfusionMatrix::default();
    let mut skipped = 0;
    let mut alerts = 0;
    for o in outcomes {
        let (f, e, c) = confusions(o);
        fused.add(&f);
        eeg.add(&e);
        ecg.add(&c);
        skipped += o.windows.iter().filter(|w| w.skipped).count() as u64;
        alerts += o.alerts.len() as u64;
    }
    SuiteSummary {
        recordings: outcomes.len(),
        fused_metrics: metrics(&fused),
        eeg_metrics: metrics(&eeg),
        ecg_metrics: metrics(&ecg),
        fused,
        eeg,
        ecg,
        skipped_windows: skipped,
        alerts,
    }
}

/// Simulates every recording of a suite with the same scenario and models.
/// Each recording's own generator seed is also its run seed.
pub fn run_suite(
    cfg: &ScenarioConfig,
    models: &Models,
    suite: &[SyntheticConfig],
    exec: Exec,
) -> Result<Vec<SimOutcome>, PipelineError> {
    exec.map(suite, |syn| -> Result<SimOutcome, PipelineError> {
        let source = SyntheticSource::new(syn.clone())?;
        let opts = SimOptions {
            seed: syn.seed,
            ..SimOptions::default()
        };
        Ok(run_scenario(
            cfg,
            models,
            Box::new(source),
            opts,
            &mut NullObserver,
        )?)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::synthetic_suite;

    #[test]
    fn training_and_suite_seeds_are_disjoint() {
        let train: Vec<u64> = training_configs(42, 4).iter().map(|c| c.seed).collect();
        let suite: Vec<u64> = synthetic_suite(42, 20).iter().map(|c| c.seed).collect();
        assert!(train.iter().all(|s| !suite.contains(s)));
    }
}

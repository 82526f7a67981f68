#![allow(dead_code)]

use bansim_core::config::ScenarioConfig;
use bansim_core::features::ECG_FEATURE_LEN;
use bansim_core::model::ModelSpec;
use bansim_core::signal::{SyntheticConfig, SyntheticSource};
use bansim_core::sim::{run_scenario, Models, NullObserver, Observer, SimOptions, SimOutcome};

/// Constant-output classifiers: every window gets p = 0.5.
pub fn flat_models() -> Models {
    Models {
        eeg: ModelSpec::zeros(vec![10, 1], "flat-eeg"),
        ecg: ModelSpec::zeros(vec![ECG_FEATURE_LEN, 1], "flat-ecg"),
    }
}

pub fn short_config(duration_s: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.recording.synthetic = SyntheticConfig {
        duration_s,
        seizure_onsets_s: vec![duration_s * 0.6],
        ..SyntheticConfig::default()
    };
    c
}

pub fn run_with(
    cfg: &ScenarioConfig,
    models: &Models,
    seed: u64,
    opts: SimOptions,
    obs: &mut dyn Observer,
) -> SimOutcome {
    let mut syn = cfg.recording.synthetic.clone();
    syn.seed = seed;
    let source = SyntheticSource::new(syn).expect("valid synthetic config");
    run_scenario(
        cfg,
        models,
        Box::new(source),
        SimOptions { seed, ..opts },
        obs,
    )
    .expect("simulation runs")
}

pub fn run(cfg: &ScenarioConfig, models: &Models, seed: u64) -> SimOutcome {
    run_with(cfg, models, seed, SimOptions::default(), &mut NullObserver)
}

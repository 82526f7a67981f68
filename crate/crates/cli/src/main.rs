use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use bansim_core::config::{load_scenario, ConfigError, ScenarioConfig};
use bansim_core::exec::Exec;
use bansim_core::features::Modality;
use bansim_core::model::MODEL_BUDGET_BYTES;
use bansim_core::pipeline::{generate_all, train_modality, training_configs};
use bansim_core::protocol::Message;
use bansim_core::report::{build_report, Report};
use bansim_core::signal::{load_recording, save_recording, Format};
use bansim_core::sim::{open_source, run_scenario, Models, NullObserver, SimOptions};
use bansim_core::simkernel::SimTime;
use bansim_core::telemetry::{serve_report, Hub, Snapshot, DEFAULT_QUEUE_CAPACITY};
use bansim_core::trainer::TrainConfig;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bansim",
    version,
    about = "Closed-loop body-area-network seizure prediction simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Eeg,
    Ecg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write seeded synthetic training recordings into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Write CSV with `.ann` sidecars instead of the binary container.
        #[arg(long)]
        csv: bool,
    },
    /// Train one classifier on every recording in a directory (or one file).
    Train {
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Hidden layer widths, comma separated.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
    },
    /// Run one scenario and write its report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Serve live telemetry on this port; waits for the first console.
        #[arg(long)]
        serve: Option<u16>,
        #[arg(long)]
        realtime: bool,
        /// Simulated seconds per wall-clock second under --realtime.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Write the event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print the metric table of a report.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
    },
    /// Replay a report's telemetry to consoles.
    Serve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Exit after the first console disconnects.
        #[arg(long)]
        once: bool,
    },
}

enum Failure {
    Config(ConfigError),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure
where
    E: Into<Box<dyn std::error::Error>>,
{
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn config_failure(e: ConfigError) -> Failure {
    Failure::Config(e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.cmd {
        Cmd::GenData {
            out,
            seed,
            count,
            csv,
        } => gen_data(&out, seed, count, csv),
        Cmd::Train {
            modality,
            data,
            out,
            seed,
            epochs,
            hidden,
        } => train_cmd(modality, &data, &out, seed, epochs, hidden),
        Cmd::Simulate {
            config,
            seed,
            out,
            serve,
            realtime,
            speed,
            trace,
        } => simulate(
            &config,
            seed,
            &out,
            serve,
            realtime.then_some(speed),
            trace.as_deref(),
        ),
        Cmd::Evaluate { report } => read_report(&report).map(|r| print!("{}", r.metric_table())),
        Cmd::Serve { report, port, once } => serve(&report, port, once),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn gen_data(out: &Path, seed: u64, count: usize, csv: bool) -> Result<(), Failure> {
    std::fs::create_dir_all(out)?;
    let recs = generate_all(&training_configs(seed, count), Exec::default())?;
    let (ext, format) = if csv {
        ("csv", Format::Csv)
    } else {
        ("snr", Format::Binary)
    };
    for (i, r) in recs.iter().enumerate() {
        let path = out.join(format!("rec-{i:03}.{ext}"));
        save_recording(r, &path, format)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(std::fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn read_report(path: &Path) -> Result<Report, Failure> {
    Report::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn recording_paths(data: &Path) -> Result<Vec<PathBuf>, Failure> {
    if data.is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", data.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("snr" | "csv")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Runtime(format!(
            "{}: no .snr or .csv recordings",
            data.display()
        )));
    }
    Ok(paths)
}

fn train_cmd(
    modality: ModalityArg,
    data: &Path,
    out: &Path,
    seed: u64,
    epochs: Option<usize>,
    hidden: Option<Vec<usize>>,
) -> Result<(), Failure> {
    let recs = recording_paths(data)?
        .iter()
        .map(|p| load_recording(p, Format::from_path(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        seed,
        epochs: epochs.unwrap_or(defaults.epochs),
        hidden: hidden.unwrap_or(defaults.hidden.clone()),
        ..defaults
    };
    let modality = match modality {
        ModalityArg::Eeg => Modality::Eeg,
        ModalityArg::Ecg => Modality::Ecg,
    };
    let model = train_modality(
        &recs,
        modality,
        &ScenarioConfig::default(),
        &tc,
        Exec::default(),
    )?;
    create_parent(out)?;
    let bytes = model.save(out, MODEL_BUDGET_BYTES)?;
    println!(
        "{}: {} params, {} bytes, layers {:?}",
        out.display(),
        model.param_count(),
        bytes,
        model.layer_sizes
    );
    Ok(())
}

fn simulate(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    serve: Option<u16>,
    realtime: Option<f64>,
    trace: Option<&Path>,
) -> Result<(), Failure> {
    let scenario = load_scenario(config).map_err(config_failure)?;
    if let Some(s) = realtime {
        if !(s.is_finite() && s > 0.0) {
            return Err(Failure::Runtime(format!(
                "--speed must be positive, got {s}"
            )));
        }
    }
    let cfg = scenario.config;
    let seed = seed.unwrap_or(cfg.seed);
    let models = Models {
        eeg: scenario.eeg_model,
        ecg: scenario.ecg_model,
    };
    let source = open_source(&cfg, seed, scenario.recording)?;

    let outcome = match serve {
        None => run_scenario(
            &cfg,
            &models,
            source,
            SimOptions {
                seed,
                realtime_speed: realtime,
                mailbox: None,
            },
            &mut NullObserver,
        )?,
        Some(port) => {
            let hub = Hub::bind(
                port,
                Snapshot {
                    sim_time: SimTime::ZERO,
                    fusion_rule: cfg.fusion,
                    stim_params: cfg.dbs.params,
                    active_alerts: Vec::new(),
                },
                DEFAULT_QUEUE_CAPACITY,
            )?;
            println!("listening on {}", hub.addr());
            hub.wait_for_client(None);
            let opts = SimOptions {
                seed,
                realtime_speed: realtime,
                mailbox: Some(hub.mailbox()),
            };
            let o = run_scenario(&cfg, &models, source, opts, &mut hub.observer())?;
            hub.broadcast(&Message::End {
                sim_time_us: o.t_end.0,
            });
            hub.drain(Duration::from_secs(10));
            write_outputs(&o, &models, out, trace)?;
            hub.linger(None);
            hub.shutdown();
            return Ok(());
        }
    };
    write_outputs(&outcome, &models, out, trace)
}

fn write_outputs(
    o: &bansim_core::sim::SimOutcome,
    models: &Models,
    out: &Path,
    trace: Option<&Path>,
) -> Result<(), Failure> {
    let report = build_report(o, models);
    create_parent(out)?;
    report.write(out)?;
    if let Some(t) = trace {
        std::fs::write(t, o.trace.to_log_string())?;
    }
    print!("{}", report.metric_table());
    Ok(())
}

fn serve(report: &Path, port: u16, once: bool) -> Result<(), Failure> {
    let r = read_report(report)?;
    let listener = std::net::TcpListener::bind(("127.0.0.1", port))?;
    println!("listening on {}", listener.local_addr()?);
    serve_report(listener, &r, once, DEFAULT_QUEUE_CAPACITY)?;
    Ok(())
}

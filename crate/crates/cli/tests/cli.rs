use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use bansim_core::model::{ModelSpec, MODEL_BUDGET_BYTES};
use bansim_core::protocol::Message;
use bansim_core::report::Report;

fn bansim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bansim"))
}

fn run(args: &[&str]) -> Output {
    bansim().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Trains a small pair of models into `dir/models` and writes a scenario
/// config at `dir/scenario.toml`.
fn prepare(dir: &Path, extra: &str) {
    let data = dir.join("data");
    let d = data.to_str().unwrap();
    let o = run(&["gen-data", "--out", d, "--seed", "5", "--count", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for m in ["eeg", "ecg"] {
        let out = dir.join(format!("models/{m}.szm"));
        let o = run(&[
            "train",
            "--modality",
            m,
            "--data",
            d,
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "5",
            "--epochs",
            "20",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let cfg = format!(
        "[recording.synthetic]\nduration_s = 900.0\nseizure_onsets_s = [600.0]\n\n[nodes.eeg]\nmodel = \"models/eeg.szm\"\n\n[nodes.ecg]\nmodel = \"models/ecg.szm\"\n{extra}"
    );
    std::fs::write(dir.join("scenario.toml"), cfg).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["simulate", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn over_budget_model_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let big = ModelSpec::zeros(vec![8704, 1], "big")
        .encode(usize::MAX)
        .unwrap();
    std::fs::write(dir.path().join("eeg.szm"), big).unwrap();
    ModelSpec::zeros(vec![4, 1], "ecg")
        .save(&dir.path().join("ecg.szm"), MODEL_BUDGET_BYTES)
        .unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(
        &cfg,
        "seed = 1\n\n[nodes.eeg]\nmodel = \"eeg.szm\"\n\n[nodes.ecg]\nmodel = \"ecg.szm\"\n",
    )
    .unwrap();
    let out = dir.path().join("r.json");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(
        err.contains("s.toml:4:") && err.contains("budget exceeded"),
        "{err}"
    );
    assert!(!out.exists(), "no partial output");
}

#[test]
fn invalid_config_lists_every_issue() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(&cfg, "[decision]\npersistence_k = 0\n\n[fusion]\nrule = \"weighted\"\nw_eeg = -1.0\nw_ecg = 1.0\nthreshold = 0.5\n").unwrap();
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "unused.json",
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for needle in ["persistence_k", "weights", "nodes.eeg", "nodes.ecg"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
}

#[test]
fn missing_report_is_a_runtime_failure() {
    assert_eq!(
        code(&run(&["evaluate", "--report", "/nonexistent/report.json"])),
        3
    );
}

#[test]
fn generate_train_simulate_evaluate() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "");
    let cfg = dir.path().join("scenario.toml");
    let report = |name: &str| dir.path().join(name);
    let sim = |out: &str, trace: &str, seed: &str| {
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            report(out).to_str().unwrap(),
            "--trace",
            report(trace).to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    sim("a.json", "a.log", "7");
    sim("b.json", "b.log", "7");
    sim("c.json", "c.log", "8");
    assert!(started.elapsed() < Duration::from_secs(60));

    let read = |n: &str| std::fs::read(report(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(read("a.log"), read("b.log"));
    assert_ne!(read("a.json"), read("c.json"));

    let r = Report::read(&report("a.json")).unwrap();
    assert_eq!(r.seed, 7);
    assert!(r.metrics.fused.accuracy.is_some());
    assert!(!r.windows.is_empty());

    let o = run(&["evaluate", "--report", report("a.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("sensitivity") && table.lines().any(|l| l.starts_with("fused")));
}

fn listening_port(child: &mut Child) -> (u16, BufReader<std::process::ChildStdout>) {
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    let port = line
        .trim()
        .rsplit(':')
        .next()
        .and_then(|p| p.parse().ok())
        .unwrap_or_else(|| panic!("no port in {line:?}"));
    (port, out)
}

fn connect(port: u16) -> (BufReader<TcpStream>, TcpStream) {
    let s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
    (BufReader::new(s.try_clone().unwrap()), s)
}

fn read_until_end(r: &mut BufReader<TcpStream>) -> Vec<Message> {
    let mut out = Vec::new();
    loop {
        let mut line = String::new();
        assert!(
            r.read_line(&mut line).unwrap() > 0,
            "stream closed before end"
        );
        let m = Message::from_line(&line).unwrap();
        let end = matches!(m, Message::End { .. });
        out.push(m);
        if end {
            return out;
        }
    }
}

#[test]
fn serve_replays_a_report() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), "");
    let rp = dir.path().join("r.json");
    let o = run(&[
        "simulate",
        "--config",
        dir.path().join("scenario.toml").to_str().unwrap(),
        "--out",
        rp.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut child = bansim()
        .args([
            "serve",
            "--report",
            rp.to_str().unwrap(),
            "--port",
            "0",
            "--once",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let (port, _out) = listening_port(&mut child);
    let (mut r, w) = connect(port);
    let mut got = read_until_end(&mut r);
    drop((r, w));
    assert!(matches!(got.remove(0), Message::Hello(h) if h.replay));
    let report = Report::read(&rp).unwrap();
    assert_eq!(
        got.pop(),
        Some(Message::End {
            sim_time_us: report.t_end_us
        })
    );
    assert_eq!(got, report.telemetry);
    assert!(child.wait().unwrap().success());
}

#[test]
fn live_console_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    prepare(
        dir.path(),
        "\n[dbs]\npresent = true\nefficacy = 1.0\n\n[decision]\nrefractory_s = 30.0\n",
    );
    let rp = dir.path().join("live.json");
    let mut child = bansim()
        .args([
            "simulate",
            "--config",
            dir.path().join("scenario.toml").to_str().unwrap(),
            "--out",
            rp.to_str().unwrap(),
            "--serve",
            "0",
            "--realtime",
            "--speed",
            "600",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let (port, _out) = listening_port(&mut child);
    let (mut r, mut w) = connect(port);
    let mut hello = String::new();
    r.read_line(&mut hello).unwrap();
    assert!(
        matches!(Message::from_line(&hello).unwrap(), Message::Hello(h) if h.session == "s1" && !h.replay)
    );
    let cmd = |id: &str, amp: f64| {
        format!(
            "{{\"type\":\"command\",\"id\":\"{id}\",\"kind\":\"set_stim_params\",\"params\":{{\"amplitude_ma\":{amp},\"frequency_hz\":130.0,\"pulse_width_us\":90.0,\"duration_s\":30.0}}}}\n"
        )
    };
    w.write_all(cmd("up", 3.0).as_bytes()).unwrap();
    w.write_all(cmd("too-high", 6.0).as_bytes()).unwrap();
    let got = read_until_end(&mut r);
    drop((r, w));
    assert!(child.wait().unwrap().success());

    let ack = got.iter().find_map(|m| match m {
        Message::Ack {
            id, applied_at_us, ..
        } if id == "up" => Some(*applied_at_us),
        _ => None,
    });
    let reject = got.iter().find_map(|m| match m {
        Message::Reject { id, reason } if id == "too-high" => Some(reason.clone()),
        _ => None,
    });
    assert!(reject.unwrap().starts_with("out of range"));
    let report = Report::read(&rp).unwrap();
    let rec = report.commands.iter().find(|c| c.id == "up").unwrap();
    assert_eq!(
        (rec.issuer.as_str(), rec.applied_at.0),
        ("s1", ack.unwrap())
    );
    assert!(report
        .commands
        .iter()
        .any(|c| c.id == "too-high" && !c.accepted));
    for s in &report.stims {
        let at = report
            .alerts
            .iter()
            .find(|a| a.id == s.triggered_by)
            .unwrap()
            .at
            .0;
        assert_eq!(
            s.params.amplitude_ma,
            if at > rec.applied_at.0 { 3.0 } else { 2.0 }
        );
    }
    assert!(report.stims.iter().any(|s| s.params.amplitude_ma == 3.0));
}

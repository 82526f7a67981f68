mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use bansim_core::protocol::{AlertMsg, Message, TelemetryMsg};
use bansim_core::report::build_report;
use bansim_core::sim::SimOptions;
use bansim_core::simkernel::SimTime;
use bansim_core::telemetry::{serve_report, Hub, Snapshot};
use common::{flat_models, run, run_with, short_config};

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: SocketAddr) -> Client {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        Client {
            writer: s.try_clone().unwrap(),
            reader: BufReader::new(s),
        }
    }

    fn next(&mut self) -> Message {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        Message::from_line(&line).unwrap_or_else(|e| panic!("bad line {line:?}: {e}"))
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn until_end(&mut self) -> Vec<Message> {
        let mut out = Vec::new();
        loop {
            let m = self.next();
            let end = matches!(m, Message::End { .. });
            out.push(m);
            if end {
                return out;
            }
        }
    }
}

fn hello_of(c: &mut Client) -> bansim_core::protocol::HelloMsg {
    match c.next() {
        Message::Hello(h) => h,
        m => panic!("expected hello, got {m:?}"),
    }
}

fn stim_cmd(id: &str, amp: f64) -> String {
    format!(
        r#"{{"type":"command","id":"{id}","kind":"set_stim_params","params":{{"amplitude_ma":{amp},"frequency_hz":130.0,"pulse_width_us":90.0,"duration_s":30.0}}}}"#
    )
}

#[test]
fn live_sessions_steer_the_gateway() {
    let mut cfg = short_config(600.0);
    cfg.dbs.present = true;
    cfg.decision.refractory_s = 30.0;
    let models = flat_models();
    let hub = Hub::bind(
        0,
        Snapshot {
            sim_time: SimTime::ZERO,
            fusion_rule: cfg.fusion,
            stim_params: cfg.dbs.params,
            active_alerts: Vec::new(),
        },
        1 << 20,
    )
    .unwrap();
    let addr = hub.addr();
    let mut c1 = Client::connect(addr);
    let h1 = hello_of(&mut c1);
    let mut c2 = Client::connect(addr);
    let h2 = hello_of(&mut c2);
    assert_eq!((h1.session.as_str(), h2.session.as_str()), ("s1", "s2"));
    assert!(!h1.replay);
    assert_eq!(h1.stim_params.amplitude_ma, 2.0);

    let t1 = thread::spawn(move || {
        c1.send(&stim_cmd("a1", 3.0));
        let mut got = Vec::new();
        let mut late_hello = None;
        loop {
            let m = c1.next();
            if let Message::Ack { id, .. } = &m {
                if id == "a1" && late_hello.is_none() {
                    for _ in 0..50 {
                        let mut c3 = Client::connect(addr);
                        let h = hello_of(&mut c3);
                        if h.stim_params.amplitude_ma == 3.0 {
                            late_hello = Some(h);
                            break;
                        }
                        thread::sleep(Duration::from_millis(5));
                    }
                }
            }
            let end = matches!(m, Message::End { .. });
            got.push(m);
            if end {
                return (got, late_hello);
            }
        }
    });
    let t2 = thread::spawn(move || {
        c2.send(&stim_cmd("b1", 6.0));
        c2.send(r#"{"type":"command","id":"b2","kind":"ack_alert","alert_id":999}"#);
        c2.send(r#"{"type":"command","id":"b3","kind":"warp"}"#);
        c2.send("not json");
        c2.until_end()
    });

    let opts = SimOptions {
        realtime_speed: Some(400.0),
        mailbox: Some(hub.mailbox()),
        ..SimOptions::default()
    };
    let o = run_with(&cfg, &models, 4, opts, &mut hub.observer());
    hub.broadcast(&Message::End {
        sim_time_us: o.t_end.0,
    });
    let (m1, late) = t1.join().unwrap();
    let m2 = t2.join().unwrap();
    hub.shutdown();

    let ack = m1
        .iter()
        .find_map(|m| match m {
            Message::Ack {
                id,
                applied_at_us,
                seq,
            } if id == "a1" => Some((*applied_at_us, *seq)),
            _ => None,
        })
        .expect("a1 acknowledged");
    let rec = o.commands.iter().find(|c| c.id == "a1").expect("a1 logged");
    assert_eq!(
        (rec.issuer.as_str(), rec.accepted, rec.applied_at.0, rec.seq),
        ("s1", true, ack.0, ack.1)
    );
    assert!(ack.0 > 0 && ack.0 < o.t_end.0);
    assert_eq!(
        late.expect("late joiner sees acknowledged params")
            .stim_params
            .amplitude_ma,
        3.0
    );

    let rejects: Vec<(String, String)> = m2
        .iter()
        .filter_map(|m| match m {
            Message::Reject { id, reason } => Some((id.clone(), reason.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(rejects.len(), 4, "{rejects:?}");
    let reason = |id: &str| {
        rejects
            .iter()
            .find(|r| r.0 == id)
            .map(|r| r.1.as_str())
            .unwrap_or_default()
    };
    assert!(reason("b1").starts_with("out of range"), "{rejects:?}");
    assert_eq!(reason("b2"), "unknown id");
    assert!(reason("b3").starts_with("malformed"));
    assert!(reason("").starts_with("malformed"));
    assert!(
        !m1.iter().any(|m| matches!(m, Message::Reject { .. })),
        "replies go to the issuer only"
    );
    assert!(!m2.iter().any(|m| matches!(m, Message::Ack { .. })));

    let logged: Vec<(&str, &str, bool)> = o
        .commands
        .iter()
        .map(|c| (c.id.as_str(), c.issuer.as_str(), c.accepted))
        .collect();
    assert!(logged.contains(&("b1", "s2", false)) && logged.contains(&("b2", "s2", false)));
    assert!(o
        .commands
        .windows(2)
        .all(|w| w[0].seq < w[1].seq && w[0].applied_at <= w[1].applied_at));

    // Parameters travel with the alert, so the alert time decides.
    let switch = SimTime(ack.0);
    let alert_at = |id: u64| o.alerts.iter().find(|a| a.id == id).unwrap().at;
    assert!(o.stims.iter().any(|s| alert_at(s.triggered_by) > switch));
    for s in &o.stims {
        assert_eq!(
            s.params.amplitude_ma,
            if alert_at(s.triggered_by) > switch {
                3.0
            } else {
                2.0
            }
        );
    }

    let stream: Vec<Message> = m1
        .into_iter()
        .filter(|m| {
            matches!(
                m,
                Message::Telemetry(_) | Message::Alert(_) | Message::Stim(_)
            )
        })
        .collect();
    assert_eq!(stream, o.messages);
}

#[test]
fn replay_sends_the_recorded_stream() {
    let mut cfg = short_config(120.0);
    cfg.dbs.present = true;
    let models = flat_models();
    let report = build_report(&run(&cfg, &models, 6), &models);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let r = report.clone();
    let server = thread::spawn(move || serve_report(listener, &r, true, 1 << 20));
    let mut c = Client::connect(addr);
    let hello = hello_of(&mut c);
    assert!(hello.replay);
    c.send(&stim_cmd("x", 3.0));
    let mut got = c.until_end();
    assert_eq!(
        got.pop(),
        Some(Message::End {
            sim_time_us: report.t_end_us
        })
    );
    // The reject may trail the end marker.
    let mut rejects = got
        .iter()
        .filter(|m| matches!(m, Message::Reject { .. }))
        .count();
    if rejects == 0 {
        assert!(matches!(c.next(), Message::Reject { id, .. } if id == "x"));
        rejects += 1;
    }
    assert_eq!(rejects, 1);
    got.retain(|m| !matches!(m, Message::Reject { .. }));
    assert_eq!(got, report.telemetry);
    drop(c);
    server.join().unwrap().unwrap();
}

#[test]
fn slow_console_keeps_every_alert() {
    let cfg = short_config(60.0);
    let models = flat_models();
    let mut report = build_report(&run(&cfg, &models, 1), &models);
    let mut msgs = Vec::new();
    for i in 0..10_000usize {
        msgs.push(Message::Telemetry(TelemetryMsg {
            window: i,
            window_start_s: i as f64,
            at_us: i as u64,
            p_eeg: Some(0.25),
            p_ecg: Some(0.75),
            fused_p: Some(0.5),
            positive: Some(true),
            degraded: false,
            skipped: false,
            battery_j: [("eeg".to_string(), 999.5), ("ecg".to_string(), 999.5)].into(),
        }));
        if i % 200 == 199 {
            msgs.push(Message::Alert(AlertMsg {
                id: (i / 200 + 1) as u64,
                at_us: i as u64,
                fused_p: 0.9,
                windows_s: vec![i as f64],
                action: bansim_core::gateway::AlertAction::Notify,
            }));
        }
    }
    report.telemetry = msgs;
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let r = report.clone();
    let server = thread::spawn(move || serve_report(listener, &r, true, 64));
    let mut c = Client::connect(addr);
    thread::sleep(Duration::from_millis(300));
    let got = c.until_end();
    let alerts: Vec<u64> = got
        .iter()
        .filter_map(|m| match m {
            Message::Alert(a) => Some(a.id),
            _ => None,
        })
        .collect();
    assert_eq!(alerts, (1..=50).collect::<Vec<u64>>());
    let windows: Vec<usize> = got
        .iter()
        .filter_map(|m| match m {
            Message::Telemetry(t) => Some(t.window),
            _ => None,
        })
        .collect();
    assert!(windows.len() <= 10_000);
    assert!(windows.windows(2).all(|w| w[0] < w[1]));
    drop(c);
    server.join().unwrap().unwrap();
}

mod common;

use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::*;
use pmpsafe::dynamics::TrackGeometry;
use pmpsafe::hj_grid::solve_cbvf;
use pmpsafe::sim::server::{serve, spawn_session, Broadcast};
use pmpsafe::sim::{
    replay_log, Command, IdlePolicy, LogRecord, PlantSpec, Session, SessionConfig, SimError,
    WireMessage,
};
use pmpsafe::value_source::{ConstantValue, ValueError, ValueSample, ValueSource};

#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn straight() -> PlantSpec {
    PlantSpec::Corridor {
        speed: SPEED,
        curvature_bound: CURVATURE_BOUND,
        track: TrackGeometry::default(),
        on_turn: false,
        wheelbase: 2.7,
    }
}

fn flat_source() -> Arc<dyn ValueSource> {
    Arc::new(ConstantValue {
        value: 10.0,
        dim: 2,
        horizon: HORIZON,
    })
}

fn grid_source() -> Arc<dyn ValueSource> {
    Arc::new(solve_cbvf(&corridor(), &corridor_grid(61), 0.0, HORIZON, 0.9).unwrap())
}

fn command(steer: f64, seq: u64) -> WireMessage {
    WireMessage::Command(Command {
        steer,
        torque: 0.0,
        seq,
    })
}

fn state_of(msgs: &[WireMessage]) -> pmpsafe::sim::StateFrame {
    msgs.iter()
        .find_map(|m| match m {
            WireMessage::State(s) => Some(s.clone()),
            _ => None,
        })
        .expect("every tick reports state")
}

#[test]
fn flat_value_passes_commands_through() {
    let mut s = Session::new(1, straight(), flat_source(), SessionConfig::default()).unwrap();
    s.handle(&command(0.05, 1)).unwrap();
    for _ in 0..20 {
        let f = state_of(&s.tick().unwrap());
        assert_eq!(f.u_out, f.u_d);
        assert!(!f.intervened);
        assert_eq!(f.seq, 1);
    }
}

#[test]
fn filter_intervenes_on_a_hard_swerve() {
    let mut s = Session::new(1, straight(), grid_source(), SessionConfig::default()).unwrap();
    s.handle(&command(0.3, 1)).unwrap();
    let mut intervened = false;
    for _ in 0..250 {
        let msgs = s.tick().unwrap();
        intervened |= state_of(&msgs).intervened;
        assert!(!msgs
            .iter()
            .any(|m| matches!(m, WireMessage::Violation { .. })));
    }
    assert!(intervened);
    assert_eq!(s.violations(), 0);
}

#[test]
fn stale_commands_are_ignored() {
    let mut s = Session::new(1, straight(), flat_source(), SessionConfig::default()).unwrap();
    s.handle(&command(0.05, 7)).unwrap();
    s.handle(&command(-0.05, 3)).unwrap();
    let f = state_of(&s.tick().unwrap());
    assert_eq!(f.seq, 7);
    assert!(f.u_d[0] > 0.0);
}

#[test]
fn idle_policy_controls_the_request_after_a_command() {
    for (idle, expect_zero) in [(IdlePolicy::HoldLast, false), (IdlePolicy::Zero, true)] {
        let cfg = SessionConfig {
            idle,
            ..SessionConfig::default()
        };
        let mut s = Session::new(1, straight(), flat_source(), cfg).unwrap();
        s.handle(&command(0.05, 1)).unwrap();
        let first = state_of(&s.tick().unwrap());
        assert!(first.u_d[0] > 0.0);
        for _ in 0..5 {
            let f = state_of(&s.tick().unwrap());
            assert_eq!(f.u_d[0] == 0.0, expect_zero);
            assert_eq!(f.seq, 1);
        }
    }
}

#[test]
fn unfiltered_log_replays_bit_for_bit() {
    let buf = SharedBuf::default();
    let cfg = SessionConfig {
        filter_enabled: false,
        ..SessionConfig::default()
    };
    let mut s = Session::new(1, straight(), flat_source(), cfg)
        .unwrap()
        .with_log_sink(Box::new(buf.clone()))
        .unwrap();
    for k in 0..60u64 {
        if k % 10 == 0 {
            s.handle(&command(0.02 * ((k / 10) as f64 - 2.5), k + 1))
                .unwrap();
        }
        if k == 35 {
            s.handle(&WireMessage::Reset).unwrap();
        }
        s.tick().unwrap();
    }
    s.flush_log().unwrap();
    let bytes = buf.0.lock().unwrap().clone();
    let r = replay_log(Cursor::new(bytes)).unwrap();
    assert_eq!(r.logged.len(), 60);
    assert_eq!(r.counterfactual.len(), 60);
    for (p, logged) in r.counterfactual.iter().zip(&r.logged) {
        let a: Vec<u64> = p.x.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = logged.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert!(r.halted.is_none());
}

#[test]
fn empty_log_replays_to_nothing() {
    let r = replay_log(Cursor::new(Vec::new())).unwrap();
    assert!(r.plant.is_none() && r.counterfactual.is_empty());
}

#[test]
fn future_log_version_is_rejected() {
    let header = LogRecord::Header {
        schema_version: 99,
        plant: straight(),
        config: SessionConfig::default(),
        initial_state: vec![0.0, 0.0],
    };
    let text = serde_json::to_string(&header).unwrap();
    assert!(matches!(
        replay_log(Cursor::new(text)),
        Err(SimError::Version {
            found: 99,
            expected: 1
        })
    ));
}

#[test]
fn tick_rate_above_the_limit_is_rejected() {
    let cfg = SessionConfig {
        tick_rate: 500.0,
        ..SessionConfig::default()
    };
    assert!(matches!(
        Session::new(1, straight(), flat_source(), cfg),
        Err(SimError::Config(_))
    ));
}

#[test]
fn full_telemetry_queues_drop_the_oldest() {
    let b = Broadcast::default();
    let sub = b.subscribe(2);
    for k in 0..5 {
        b.publish(&k.to_string());
    }
    assert_eq!(sub.dropped(), 3);
    assert_eq!(sub.pop(Duration::ZERO).as_deref(), Some("3"));
    assert_eq!(sub.pop(Duration::ZERO).as_deref(), Some("4"));
    assert_eq!(sub.pop(Duration::ZERO), None);
}

#[derive(Debug)]
struct Slow;

impl ValueSource for Slow {
    fn evaluate(&self, _x: &[f64], _tau: f64) -> Result<ValueSample, ValueError> {
        std::thread::sleep(Duration::from_millis(12));
        Ok(ValueSample {
            value: 1.0,
            grad_x: nalgebra::DVector::zeros(2),
            dv_dtau: 0.0,
        })
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> f64 {
        1.0
    }
}

#[test]
fn overrunning_ticks_are_counted_as_missed() {
    let cfg = SessionConfig {
        tick_rate: 200.0,
        ..SessionConfig::default()
    };
    let handle = spawn_session(Session::new(1, straight(), Arc::new(Slow), cfg).unwrap());
    let sub = handle.telemetry.subscribe(64);
    std::thread::sleep(Duration::from_millis(300));
    let (session, stats) = handle.stop();
    assert!(stats.missed > 0);
    assert_eq!(session.missed_ticks(), stats.missed);
    let mut last_missed = 0;
    while let Some(line) = sub.pop(Duration::ZERO) {
        if let Ok(WireMessage::State(f)) = WireMessage::from_line(&line) {
            last_missed = f.missed_ticks;
        }
    }
    assert!(last_missed > 0);
}

fn read_until_seq(reader: &mut impl BufRead, seq: u64, deadline: Duration) -> (f64, Duration) {
    let start = Instant::now();
    let mut line = String::new();
    while start.elapsed() < deadline {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        if let Ok(WireMessage::State(f)) = WireMessage::from_line(&line) {
            assert!(WireMessage::State(f.clone()).is_finite());
            if f.seq == seq {
                return (f.t, start.elapsed());
            }
        }
    }
    panic!("no state echoing seq {seq}");
}

#[test]
fn line_tcp_clients_share_one_session() {
    let handle = spawn_session(
        Session::new(1, straight(), flat_source(), SessionConfig::default()).unwrap(),
    );
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        scope.spawn(|| serve(listener, &handle, &stop, 256).unwrap());

        let mut c = TcpStream::connect(addr).unwrap();
        writeln!(c, "{}", command(0.01, 1).to_line()).unwrap();
        let (t1, latency) = read_until_seq(
            &mut BufReader::new(c.try_clone().unwrap()),
            1,
            Duration::from_secs(5),
        );
        assert!(latency < Duration::from_secs(1));
        writeln!(c, "not json").unwrap();
        drop(c);

        // a new client picks up the same session where it was
        let mut c = TcpStream::connect(addr).unwrap();
        writeln!(c, "{}", command(0.0, 2).to_line()).unwrap();
        let (t2, _) = read_until_seq(
            &mut BufReader::new(c.try_clone().unwrap()),
            2,
            Duration::from_secs(5),
        );
        assert!(t2 > t1);
        stop.store(true, Ordering::Relaxed);
    });
    let (session, stats) = handle.stop();
    assert_eq!(session.applied_seq(), 2);
    assert!(stats.ticks > 0);
}

#[test]
fn websocket_clients_get_telemetry_frames() {
    let handle = spawn_session(
        Session::new(1, straight(), flat_source(), SessionConfig::default()).unwrap(),
    );
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        scope.spawn(|| serve(listener, &handle, &stop, 256).unwrap());
        let (mut ws, _) = tungstenite::connect(format!("ws://{addr}/")).unwrap();
        ws.send(tungstenite::Message::Text(
            WireMessage::ToggleFilter { enabled: false }.to_line(),
        ))
        .unwrap();
        ws.send(tungstenite::Message::Text(command(0.02, 5).to_line()))
            .unwrap();
        let start = Instant::now();
        let mut seen = false;
        while start.elapsed() < Duration::from_secs(5) {
            if let tungstenite::Message::Text(text) = ws.read().unwrap() {
                if let Ok(WireMessage::State(f)) = WireMessage::from_line(&text) {
                    if f.seq == 5 {
                        assert!(!f.filter_enabled);
                        seen = true;
                        break;
                    }
                }
            }
        }
        assert!(seen);
        ws.close(None).unwrap();
        stop.store(true, Ordering::Relaxed);
    });
    let (session, _) = handle.stop();
    assert!(!session.filter_enabled());
}

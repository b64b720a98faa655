use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use taskadapt_core::operators::{OperatorKind, OperatorModel};
use taskadapt_core::scenario::Scenario;
use taskadapt_core::sim::{replay_of, run_episode, Episode};
use taskadapt_core::trace::{EpisodeTrace, Termination};
use taskadapt_teleop::client::{PerfectResponder, ScriptedClient};
use taskadapt_teleop::protocol::{Message, Role};
use taskadapt_teleop::service::{start, Clock, ServiceConfig, ServiceError};

fn config(clock: Clock) -> ServiceConfig {
    ServiceConfig { clock, ..ServiceConfig::new(0) }
}

fn lockstep() -> Clock {
    Clock::Lockstep { timeout: Duration::from_secs(10) }
}

fn in_process(sc: &Arc<Scenario>, mut op: OperatorModel, ticks: u64) -> EpisodeTrace {
    let mut ep = Episode::new(Arc::clone(sc), 0, op.kind());
    ep.set_max_ticks(ticks);
    while ep.termination().is_none() {
        ep.step(|o| op.input(o)).unwrap();
    }
    ep.finish(Termination::MaxDuration)
}

fn assert_same_motion(a: &EpisodeTrace, b: &EpisodeTrace) {
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.u_h, y.u_h, "t={}", x.t);
        assert_eq!(x.alpha, y.alpha, "t={}", x.t);
        assert_eq!(x.pose, y.pose, "t={}", x.t);
    }
}

#[test]
fn scripted_perfect_client_reproduces_in_process_episode() {
    let sc = Arc::new(Scenario::reference());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    let cfg = ServiceConfig { stop_on_completion: true, trace_path: Some(path.clone()), ..config(lockstep()) };
    let svc = start(Arc::clone(&sc), cfg).unwrap();
    let addr = svc.local_addr();
    let responder = PerfectResponder::new(Arc::clone(&sc));
    let client = thread::spawn(move || {
        let mut c = ScriptedClient::connect(addr, Role::Operator, Some("scripted")).unwrap();
        assert_eq!(c.role(), Role::Operator);
        c.run(|f| responder.respond(f).map(Some)).unwrap()
    });
    let session = svc.wait().unwrap();
    let frames = client.join().unwrap();

    let reference = run_episode(Arc::clone(&sc), OperatorModel::Perfect, 0).unwrap();
    assert_eq!(session.end.as_ref().unwrap().termination, Termination::ScheduleComplete);
    assert_eq!(frames as usize, session.records.len());
    assert_same_motion(&session, &reference);
    assert_eq!(session.header.operator, OperatorKind::Live);

    // the written session is a standard trace that replays identically
    let stored = EpisodeTrace::load(&path).unwrap();
    assert_eq!(stored, session);
    assert!(stored.client.is_some());
    let replayed = run_episode(Arc::clone(&sc), replay_of(&stored), 0).unwrap();
    assert_same_motion(&replayed, &stored);
}

#[test]
fn no_client_behaves_as_idle_episode() {
    let sc = Arc::new(Scenario::reference());
    let cfg = ServiceConfig { max_ticks: Some(40), ..config(Clock::RealTime) };
    let session = start(Arc::clone(&sc), cfg).unwrap().wait().unwrap();
    assert_eq!(session.end.as_ref().unwrap().termination, Termination::MaxDuration);
    assert_same_motion(&session, &in_process(&sc, OperatorModel::Idle, 40));
}

#[test]
fn oversized_input_is_renormalized_and_stale_input_dropped() {
    let sc = Arc::new(Scenario::reference());
    let cfg = ServiceConfig { max_ticks: Some(150), ..config(Clock::RealTime) };
    let svc = start(Arc::clone(&sc), cfg).unwrap();
    let addr = svc.local_addr();
    let client = thread::spawn(move || {
        let mut c = ScriptedClient::connect(addr, Role::Operator, None).unwrap();
        let mut last_sent = 0;
        c.run(|f| {
            if f.tick <= 40 {
                last_sent = f.tick;
                Ok(Some([2.0, 0.0, 0.0]))
            } else {
                Ok(None)
            }
        })
        .unwrap();
        last_sent
    });
    let session = svc.wait().unwrap();
    let last_sent = client.join().unwrap() as usize;
    let norms: Vec<f64> = session.records.iter().map(|r| r.u_h.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let applied: Vec<usize> = (0..norms.len()).filter(|&k| norms[k] > 0.0).collect();
    assert!(!applied.is_empty(), "no input applied");
    for &k in &applied {
        assert!((norms[k] - 1.0).abs() < 1e-12, "tick {k}: |u| = {}", norms[k]);
        assert_eq!(session.records[k].u_h[1..], [0.0, 0.0]);
    }
    // dead-man: nothing applied once the last input is older than 0.25 s
    let last_applied = *applied.last().unwrap();
    assert!(last_applied >= last_sent, "{last_applied} < {last_sent}");
    assert!(last_applied <= last_sent + 50, "input applied until tick {last_applied}, last sent at {last_sent}");
    assert!(norms[last_applied + 1..].iter().all(|&n| n == 0.0));
    assert!(session.records.len() > last_applied + 1);
}

#[test]
fn busy_port_is_reported() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let err = start(Arc::new(Scenario::reference()), ServiceConfig::new(port)).err().unwrap();
    assert!(matches!(err, ServiceError::PortBusy { port: p } if p == port), "{err}");
}

#[test]
fn only_the_first_operator_drives() {
    let sc = Arc::new(Scenario::reference());
    let cfg = ServiceConfig { max_ticks: Some(60), ..config(lockstep()) };
    let svc = start(Arc::clone(&sc), cfg).unwrap();
    let addr = svc.local_addr();
    let mut first = ScriptedClient::connect(addr, Role::Operator, Some("first")).unwrap();
    let mut second = ScriptedClient::connect(addr, Role::Operator, Some("second")).unwrap();
    assert_eq!(first.role(), Role::Operator);
    assert_eq!(second.role(), Role::Observer);
    let pusher = thread::spawn(move || {
        second.run(|_| Ok(Some([0.0, 1.0, 0.0]))).unwrap()
    });
    first.run(|_| Ok(Some([0.0; 3]))).unwrap();
    assert!(pusher.join().unwrap() > 0);
    let session = svc.wait().unwrap();
    assert!(session.records.iter().all(|r| r.u_h == vec![0.0; 3]));
    let clients = &session.client.as_ref().unwrap()["clients"];
    assert_eq!(clients[0]["granted"], "operator");
    assert_eq!(clients[1]["granted"], "observer");
}

#[test]
fn control_is_released_when_the_operator_leaves() {
    let sc = Arc::new(Scenario::reference());
    let cfg = ServiceConfig { max_ticks: Some(u64::MAX), ..config(Clock::RealTime) };
    let svc = start(Arc::clone(&sc), cfg).unwrap();
    let addr = svc.local_addr();
    let first = ScriptedClient::connect(addr, Role::Operator, None).unwrap();
    let second = ScriptedClient::connect(addr, Role::Operator, None).unwrap();
    assert_eq!(second.role(), Role::Observer);
    first.close();
    let mut granted = Role::Observer;
    for _ in 0..50 {
        let c = ScriptedClient::connect(addr, Role::Operator, None).unwrap();
        granted = c.role();
        c.close();
        if granted == Role::Operator {
            break;
        }
        thread::sleep(Duration::from_millis(20));
    }
    assert_eq!(granted, Role::Operator);
    svc.shutdown();
    let session = svc.wait().unwrap();
    assert_eq!(session.end.unwrap().termination, Termination::Shutdown);
    drop(second);
}

#[test]
fn malformed_frame_disconnects_only_its_sender() {
    let sc = Arc::new(Scenario::reference());
    let ticks = 120;
    let cfg = ServiceConfig { max_ticks: Some(ticks), ..config(lockstep()) };
    let svc = start(Arc::clone(&sc), cfg).unwrap();
    let addr = svc.local_addr();
    let responder = PerfectResponder::new(Arc::clone(&sc));
    let operator = thread::spawn(move || {
        let mut c = ScriptedClient::connect(addr, Role::Operator, None).unwrap();
        c.run(|f| responder.respond(f).map(Some)).unwrap()
    });
    let mut rogue = ScriptedClient::connect(addr, Role::Observer, Some("rogue")).unwrap();
    rogue.send_raw(r#"{"type":"teleport","payload":{"x":1}}"#).unwrap();
    let mut after = 0;
    while let Some(m) = rogue.next_message().unwrap_or(None) {
        if matches!(m, Message::State(_)) {
            after += 1;
        }
    }
    assert!(after < ticks, "rogue client kept receiving frames");
    assert_eq!(operator.join().unwrap(), ticks);
    let session = svc.wait().unwrap();
    assert_eq!(session.end.as_ref().unwrap().termination, Termination::MaxDuration);
    assert_same_motion(&session, &in_process(&sc, OperatorModel::Perfect, ticks));
}

#[test]
fn new_clients_receive_the_current_instruction() {
    let sc = Arc::new(Scenario::reference());
    let cfg = ServiceConfig { max_ticks: Some(u64::MAX), ..config(Clock::RealTime) };
    let svc = start(Arc::clone(&sc), cfg).unwrap();
    thread::sleep(Duration::from_millis(50));
    let mut c = ScriptedClient::connect(svc.local_addr(), Role::Observer, None).unwrap();
    let mut instruction = None;
    for _ in 0..20 {
        if let Some(Message::Instruction(i)) = c.next_message().unwrap() {
            instruction = Some(i);
            break;
        }
    }
    let i = instruction.expect("instruction sent");
    assert_eq!(i.target, Some(0));
    c.close();
    svc.shutdown();
    svc.wait().unwrap();
}

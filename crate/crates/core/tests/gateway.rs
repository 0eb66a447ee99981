use std::collections::BTreeMap;
use std::thread::sleep;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use wbmpc::dynamics::ContactForce;
use wbmpc::gateway::protocol::{decode_client, decode_update, encode, SessionParams, TaskInfo};
use wbmpc::gateway::{
    ClientMessage, ParamPath, Role, Session, SessionCommand, SessionConfig, SessionUpdate,
};
use wbmpc::runtime::{CostFrame, StateFrame};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        Just(0.0),
        Just(-0.0),
        any::<i32>().prop_map(f64::from)
    ]
}

fn name() -> impl Strategy<Value = String> {
    "[a-z_]{1,12}"
}

fn any_command() -> impl Strategy<Value = SessionCommand> {
    let path = prop::sample::select(ParamPath::ALL.to_vec());
    prop_oneof![
        (finite(), finite()).prop_map(|(x, z)| SessionCommand::SetTarget { x, z }),
        (name(), finite()).prop_map(|(term, value)| SessionCommand::SetWeight { term, value }),
        (path, finite()).prop_map(|(path, value)| SessionCommand::SetParam { path, value }),
        (finite(), finite(), 0usize..8).prop_map(|(a, b, body)| SessionCommand::Push {
            impulse: [a, b],
            body
        }),
        Just(SessionCommand::Pause),
        Just(SessionCommand::Resume),
        Just(SessionCommand::Reset),
        name().prop_map(|task| SessionCommand::StartTask { task }),
    ]
}

fn client_message() -> impl Strategy<Value = ClientMessage> {
    prop_oneof![
        any::<u32>().prop_map(|protocol| ClientMessage::Hello { protocol }),
        (any::<u64>(), any_command())
            .prop_map(|(id, command)| ClientMessage::Command { id, command }),
    ]
}

fn params() -> impl Strategy<Value = SessionParams> {
    (
        0usize..10,
        finite(),
        1usize..100,
        finite(),
        prop::option::of(finite()),
        finite(),
        prop::option::of((finite(), finite())),
        prop::collection::vec((name(), finite()), 0..4),
    )
        .prop_map(
            |(skip, eps, horizon, slip, gait, rate, target, weights)| SessionParams {
                skip_deriv: skip,
                fd_epsilon: eps,
                horizon,
                slip_stiffness: slip,
                gait_period: gait,
                planner_rate: rate,
                target: target.map(|(x, z)| [x, z]),
                weights,
            },
        )
}

fn state_frame() -> impl Strategy<Value = StateFrame> {
    let vec = || prop::collection::vec(finite(), 0..6);
    let contact = (finite(), finite(), finite(), finite(), finite()).prop_map(|(a, b, d, n, t)| {
        ContactForce {
            position: [a, b],
            distance: d,
            normal: n,
            tangential: t,
        }
    });
    (
        finite(),
        vec(),
        vec(),
        prop::collection::vec(vec(), 0..3),
        prop::collection::vec(contact, 0..3),
        any::<bool>(),
        prop::option::of(name()),
    )
        .prop_map(
            |(time, state, estimate, planned, contacts, paused, failed)| StateFrame {
                time,
                state,
                estimate,
                planned,
                contacts,
                paused,
                failed,
            },
        )
}

fn update() -> impl Strategy<Value = SessionUpdate> {
    let role = prop_oneof![Just(Role::Operator), Just(Role::Observer)];
    prop_oneof![
        (any::<u32>(), role, name(), name(), any::<u64>(), params()).prop_map(
            |(protocol, role, task, model, cost_version, params)| SessionUpdate::Welcome {
                protocol,
                role,
                task,
                model,
                cost_version,
                params,
            }
        ),
        state_frame().prop_map(SessionUpdate::StateFrame),
        (
            finite(),
            finite(),
            prop::collection::btree_map(name(), finite(), 0..4)
        )
            .prop_map(|(time, total, terms)| SessionUpdate::CostFrame(CostFrame {
                time,
                total,
                terms
            })),
        (any::<u64>(), any::<u64>(), params()).prop_map(|(id, cost_version, params)| {
            SessionUpdate::Ack {
                id,
                cost_version,
                params,
            }
        }),
        (prop::option::of(any::<u64>()), ".{0,20}")
            .prop_map(|(id, reason)| SessionUpdate::Nack { id, reason }),
        prop::collection::vec((name(), name(), ".{0,20}"), 0..3).prop_map(|v| {
            SessionUpdate::TaskCatalog {
                tasks: v
                    .into_iter()
                    .map(|(name, model, description)| TaskInfo {
                        name,
                        model,
                        description,
                    })
                    .collect(),
            }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn client_messages_round_trip(msg in client_message()) {
        prop_assert_eq!(decode_client(&encode(&msg)).unwrap(), msg);
    }

    #[test]
    fn session_updates_round_trip(msg in update()) {
        prop_assert_eq!(decode_update(&encode(&msg)).unwrap(), msg);
    }
}

#[test]
fn telemetry_round_trips() {
    let mut s = Session::start(SessionConfig::new("pendulum_swingup")).unwrap();
    let t = wait_for(&mut s, 2.0, |u| matches!(u, SessionUpdate::Telemetry(_))).expect("telemetry");
    assert_eq!(decode_update(&encode(&t)).unwrap(), t);
}

#[test]
fn malformed_messages_are_nacked_without_id() {
    let mut s = Session::start(SessionConfig::new("pendulum_swingup")).unwrap();
    let c = s.connect();
    for text in [
        "{",
        r#"{"type":"shout"}"#,
        r#"{"type":"command","id":3,"command":{"op":"fly"}}"#,
    ] {
        match s.handle(c, text).as_slice() {
            [SessionUpdate::Nack { id: None, reason }] => {
                assert!(reason.starts_with("parse error"), "{reason}")
            }
            other => panic!("{other:?}"),
        }
    }
}

fn hello(s: &mut Session) -> (u64, Role) {
    let c = s.connect();
    let replies = s.handle(c, r#"{"type":"hello","protocol":1}"#);
    match replies.as_slice() {
        [SessionUpdate::Welcome {
            role, protocol: 1, ..
        }, SessionUpdate::TaskCatalog { tasks }] => {
            assert_eq!(tasks.len(), wbmpc::cost::BUILTIN_TASK_NAMES.len());
            (c, *role)
        }
        other => panic!("{other:?}"),
    }
}

fn command(s: &mut Session, client: u64, id: u64, command: SessionCommand) -> SessionUpdate {
    let mut replies = s.handle_message(client, ClientMessage::Command { id, command });
    assert_eq!(replies.len(), 1);
    replies.remove(0)
}

fn ack_version(u: &SessionUpdate) -> u64 {
    match u {
        SessionUpdate::Ack { cost_version, .. } => *cost_version,
        other => panic!("expected ack, got {other:?}"),
    }
}

fn nack_reason(u: &SessionUpdate) -> &str {
    match u {
        SessionUpdate::Nack { reason, .. } => reason,
        other => panic!("expected nack, got {other:?}"),
    }
}

fn wait_for(
    s: &mut Session,
    secs: f64,
    f: impl Fn(&SessionUpdate) -> bool,
) -> Option<SessionUpdate> {
    let deadline = Instant::now() + Duration::from_secs_f64(secs);
    while Instant::now() < deadline {
        if let Some(u) = s.poll().into_iter().find(|u| f(u)) {
            return Some(u);
        }
        sleep(Duration::from_millis(5));
    }
    None
}

#[test]
fn first_client_operates_and_later_ones_observe() {
    let mut s = Session::start(SessionConfig::new("biped_stand")).unwrap();
    let pending = s.connect();
    let r = command(&mut s, pending, 1, SessionCommand::Pause);
    assert_eq!(nack_reason(&r), "hello required");
    match s
        .handle(pending, r#"{"type":"hello","protocol":9}"#)
        .as_slice()
    {
        [SessionUpdate::Nack { reason, .. }] => assert!(reason.contains("unsupported protocol")),
        other => panic!("{other:?}"),
    }
    s.disconnect(pending);

    let (op, role) = hello(&mut s);
    assert_eq!(role, Role::Operator);
    let (obs, role) = hello(&mut s);
    assert_eq!(role, Role::Observer);
    let r = command(&mut s, obs, 7, SessionCommand::Pause);
    assert_eq!(
        r,
        SessionUpdate::Nack {
            id: Some(7),
            reason: "read-only".into()
        }
    );
    assert!(!s.runtime().paused());
    ack_version(&command(&mut s, op, 8, SessionCommand::Pause));
    assert!(s.runtime().paused());

    s.disconnect(op);
    let (_, role) = hello(&mut s);
    assert_eq!(role, Role::Operator);
    assert_eq!(s.role(obs), Some(Role::Observer));
}

#[test]
fn rejected_edits_change_nothing() {
    let mut s = Session::start(SessionConfig::new("biped_stand")).unwrap();
    let (op, _) = hello(&mut s);
    let before = (s.cost_version(), s.params());
    let r = command(
        &mut s,
        op,
        1,
        SessionCommand::SetWeight {
            term: "nope".into(),
            value: 1.0,
        },
    );
    assert_eq!(
        r,
        SessionUpdate::Nack {
            id: Some(1),
            reason: "unknown residual term 'nope'".into()
        }
    );
    let bad = [
        SessionCommand::SetWeight {
            term: before.1.weights[0].0.clone(),
            value: -1.0,
        },
        SessionCommand::SetParam {
            path: ParamPath::SkipDeriv,
            value: -1.0,
        },
        SessionCommand::SetParam {
            path: ParamPath::HorizonT,
            value: 2.5,
        },
        SessionCommand::SetParam {
            path: ParamPath::HorizonT,
            value: 0.0,
        },
        SessionCommand::SetParam {
            path: ParamPath::FdEpsilon,
            value: 0.0,
        },
        SessionCommand::SetParam {
            path: ParamPath::SlipStiffness,
            value: 0.5,
        },
        SessionCommand::SetParam {
            path: ParamPath::PlannerRate,
            value: 1e4,
        },
        SessionCommand::SetParam {
            path: ParamPath::PlannerRate,
            value: f64::NAN,
        },
        SessionCommand::SetParam {
            path: ParamPath::GaitPeriod,
            value: 0.5,
        },
        SessionCommand::SetTarget { x: 1.0, z: 0.9 },
        SessionCommand::Push {
            impulse: [1.0, 0.0],
            body: 99,
        },
        SessionCommand::StartTask {
            task: "moonwalk".into(),
        },
    ];
    for (i, cmd) in bad.into_iter().enumerate() {
        let r = command(&mut s, op, 10 + i as u64, cmd.clone());
        assert!(
            matches!(r, SessionUpdate::Nack { id: Some(_), .. }),
            "{cmd:?} gave {r:?}"
        );
    }
    assert_eq!((s.cost_version(), s.params()), before);
    assert_eq!(s.task(), "biped_stand");
}

#[test]
fn accepted_edits_show_up_in_params() {
    let mut s = Session::start(SessionConfig::new("biped_trot")).unwrap();
    let (op, _) = hello(&mut s);
    let v0 = s.cost_version();
    let edits = [
        (ParamPath::SkipDeriv, 3.0),
        (ParamPath::FdEpsilon, 1e-5),
        (ParamPath::HorizonT, 20.0),
        (ParamPath::SlipStiffness, 10.0),
        (ParamPath::GaitPeriod, 0.5),
        (ParamPath::PlannerRate, 25.0),
    ];
    for (i, (path, value)) in edits.into_iter().enumerate() {
        ack_version(&command(
            &mut s,
            op,
            i as u64,
            SessionCommand::SetParam { path, value },
        ));
    }
    let p = s.params();
    assert_eq!(p.skip_deriv, 3);
    assert_eq!(p.fd_epsilon, 1e-5);
    assert_eq!(p.horizon, 20);
    assert_eq!(p.slip_stiffness, 10.0);
    assert_eq!(p.gait_period, Some(0.5));
    assert_eq!(p.planner_rate, 25.0);
    // Only the gait edit touches the cost.
    assert_eq!(s.cost_version(), v0 + 1);
    let w = p.weights[0].clone();
    let v = ack_version(&command(
        &mut s,
        op,
        20,
        SessionCommand::SetWeight {
            term: w.0.clone(),
            value: 2.0 * w.1,
        },
    ));
    assert_eq!(v, v0 + 2);
    assert!(s
        .params()
        .weights
        .iter()
        .filter(|(n, _)| *n == w.0)
        .all(|(_, x)| *x == 2.0 * w.1));
}

#[test]
fn pause_holds_time_and_planning_but_keeps_streaming_state() {
    let mut s = Session::start(SessionConfig::new("biped_stand")).unwrap();
    let (op, _) = hello(&mut s);
    wait_for(&mut s, 3.0, |u| matches!(u, SessionUpdate::Telemetry(_)))
        .expect("planning before pause");
    command(&mut s, op, 1, SessionCommand::Pause);
    sleep(Duration::from_millis(100));
    s.poll();
    let t0 = s.runtime().time();
    sleep(Duration::from_millis(400));
    let updates = s.poll();
    assert_eq!(s.runtime().time(), t0);
    let states: Vec<&StateFrame> = updates
        .iter()
        .filter_map(|u| match u {
            SessionUpdate::StateFrame(f) => Some(f),
            _ => None,
        })
        .collect();
    // 30 frames per second over 0.4 s; generous bounds for a loaded machine.
    assert!(states.len() >= 5, "{} state frames", states.len());
    assert!(states.iter().all(|f| f.paused && f.time == t0));
    assert!(!updates
        .iter()
        .any(|u| matches!(u, SessionUpdate::Telemetry(_))));

    command(&mut s, op, 2, SessionCommand::Resume);
    wait_for(&mut s, 3.0, |u| matches!(u, SessionUpdate::Telemetry(_)))
        .expect("planning after resume");
    assert!(s.runtime().time() > t0);
}

#[test]
fn target_edits_reach_the_planner() {
    let mut s = Session::start(SessionConfig::new("biped_walk")).unwrap();
    let (op, _) = hello(&mut s);
    let v = ack_version(&command(
        &mut s,
        op,
        1,
        SessionCommand::SetTarget { x: -0.5, z: 0.978 },
    ));
    assert!(v > 0);
    assert_eq!(s.params().target, Some([-0.5, 0.978]));
    let t = wait_for(
        &mut s,
        5.0,
        |u| matches!(u, SessionUpdate::Telemetry(t) if t.cost_version >= v),
    );
    assert!(t.is_some(), "no plan with cost version {v}");
}

#[test]
fn switching_tasks_keeps_versions_increasing() {
    let mut s = Session::start(SessionConfig::new("biped_stand")).unwrap();
    let (op, _) = hello(&mut s);
    let w = s.params().weights[0].clone();
    let v1 = ack_version(&command(
        &mut s,
        op,
        1,
        SessionCommand::SetWeight {
            term: w.0,
            value: w.1 + 1.0,
        },
    ));
    let switched_at = s.time();
    let v2 = ack_version(&command(
        &mut s,
        op,
        2,
        SessionCommand::StartTask {
            task: "pendulum_swingup".into(),
        },
    ));
    assert!(v2 > v1);
    assert_eq!(s.task(), "pendulum_swingup");
    // Fixed-base tasks plan once per knot.
    assert_eq!(s.params().planner_rate, 100.0);
    let t = wait_for(&mut s, 3.0, |u| matches!(u, SessionUpdate::Telemetry(_))).unwrap();
    let SessionUpdate::Telemetry(t) = t else {
        unreachable!()
    };
    assert_eq!(t.cost_version, v2);
    let f = wait_for(&mut s, 3.0, |u| matches!(u, SessionUpdate::StateFrame(_))).unwrap();
    let SessionUpdate::StateFrame(f) = f else {
        unreachable!()
    };
    assert_eq!(f.state.len(), 2);
    assert!(f.time >= switched_at && t.time >= switched_at);
}

#[test]
fn push_and_reset() {
    let mut s = Session::start(SessionConfig::new("biped_stand")).unwrap();
    let (op, _) = hello(&mut s);
    let SessionUpdate::StateFrame(start) =
        wait_for(&mut s, 2.0, |u| matches!(u, SessionUpdate::StateFrame(_))).unwrap()
    else {
        unreachable!()
    };
    sleep(Duration::from_millis(300));
    ack_version(&command(
        &mut s,
        op,
        1,
        SessionCommand::Push {
            impulse: [3.0, 0.0],
            body: 0,
        },
    ));
    let moved = wait_for(
        &mut s,
        2.0,
        |u| matches!(u, SessionUpdate::StateFrame(f) if f.state[0] - start.state[0] > 0.05),
    );
    assert!(moved.is_some(), "push had no visible effect");
    sleep(Duration::from_millis(300));
    ack_version(&command(&mut s, op, 2, SessionCommand::Reset));
    // The clock keeps running; the state goes back to where it started.
    let back = wait_for(&mut s, 2.0, |u| {
        matches!(u, SessionUpdate::StateFrame(f)
            if (f.state[0] - start.state[0]).abs() < 0.005)
    });
    assert!(back.is_some(), "state was not reset");
}

#[test]
fn cost_frames_name_running_terms() {
    let mut s = Session::start(SessionConfig::new("biped_stand")).unwrap();
    let terms: BTreeMap<String, f64> = s.params().weights.into_iter().collect();
    let SessionUpdate::CostFrame(c) =
        wait_for(&mut s, 2.0, |u| matches!(u, SessionUpdate::CostFrame(_))).unwrap()
    else {
        unreachable!()
    };
    assert!(c.terms.keys().all(|k| terms.contains_key(k)));
    assert!((c.terms.values().sum::<f64>() - c.total).abs() <= 1e-9 * c.total.abs().max(1.0));
}

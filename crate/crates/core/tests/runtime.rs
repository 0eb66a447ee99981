use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;
use wbmpc::cost::builtin_task;
use wbmpc::runtime::{
    control_tick, estimate, Controller, DisturbanceEvent, EpisodeConfig, EpisodeLog, Estimator,
    EstimatorConfig, LatencyLine, LogRecord, SimRuntime,
};
use wbmpc::{run_episode, ClockConfig, PlanSolution, Planner, SolverConfig};

mod common;

fn config(task: &str) -> EpisodeConfig {
    EpisodeConfig::from_task(&builtin_task(task).unwrap()).unwrap()
}

fn pendulum_solution() -> PlanSolution {
    let m = Arc::new(common::model("pendulum"));
    let spec = builtin_task("pendulum_swingup").unwrap().cost();
    let mut planner = Planner::new(m.clone(), SolverConfig::default()).unwrap();
    let mut x = m.home_state().to_vector();
    x[0] = 0.3;
    let sol = planner.plan_step(&spec, &x, 1.0).unwrap();
    (*sol).clone()
}

fn tau(cutoff: f64) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * cutoff)
}

#[test]
fn constant_pose_velocity_decays_like_a_first_order_filter() {
    let cfg = EstimatorConfig::default();
    let dt = 1.0 / cfg.measurement_rate;
    let mut est = Estimator::new(1, cfg);
    est.update(0.0, &DVector::from_element(1, 0.0));
    est.update(dt, &DVector::from_element(1, 0.01));
    let v0 = est.state().unwrap()[1];
    let keep = tau(cfg.lowpass_cutoff) / (tau(cfg.lowpass_cutoff) + dt);
    let n = (3.0 * tau(cfg.lowpass_cutoff) / dt).ceil() as i32;
    for k in 1..=n {
        est.update(dt * f64::from(k + 1), &DVector::from_element(1, 0.01));
    }
    let v = est.state().unwrap()[1];
    assert!((v - v0 * keep.powi(n)).abs() < 1e-12);
    assert!(v.abs() < 0.1 * v0.abs());
}

#[test]
fn noiseless_ramp_velocity_settles_within_one_percent() {
    let cfg = EstimatorConfig::default();
    let dt = 1.0 / cfg.measurement_rate;
    let speed = 0.7;
    let history: Vec<(f64, DVector<f64>)> = (0..40)
        .map(|k| {
            let t = dt * f64::from(k);
            (t, DVector::from_element(1, speed * t))
        })
        .collect();
    let (x, starting) = estimate(&history, &cfg).unwrap();
    assert!(!starting);
    // Every finite difference equals the speed, so after n updates the
    // filter has closed 1 − keepⁿ of the gap.
    let keep = tau(cfg.lowpass_cutoff) / (tau(cfg.lowpass_cutoff) + dt);
    let oracle = speed * (1.0 - keep.powi(39));
    assert!((x[1] - oracle).abs() < 1e-9);
    assert!((x[1] - speed).abs() < 0.01 * speed);
    assert_eq!(x[0], history[39].1[0]);
}

#[test]
fn fewer_than_two_samples_flag_startup_with_zero_velocity() {
    let cfg = EstimatorConfig::default();
    assert!(estimate(&[], &cfg).is_none());
    let (x, starting) = estimate(&[(0.0, DVector::from_vec(vec![0.4, -0.2]))], &cfg).unwrap();
    assert!(starting);
    assert_eq!(x.as_slice(), &[0.4, -0.2, 0.0, 0.0]);
}

#[test]
fn zero_noise_estimate_passes_positions_through() {
    let mut cfg = config("biped_stand");
    cfg.duration = 0.3;
    let log = run_episode(&cfg).unwrap();
    let nq = cfg.model.nq();
    for t in log.ticks() {
        assert_eq!(&t.estimate[..nq], &t.state[..nq]);
    }
}

#[test]
fn zero_deviation_returns_the_nominal_control() {
    let sol = pendulum_solution();
    let t = 4;
    let now = sol.trajectory.t0 + (t as f64 + 0.5) * sol.trajectory.dt;
    let x = sol.trajectory.states[t].clone();
    assert_eq!(
        control_tick(&sol, &x, now, true).unwrap(),
        sol.trajectory.controls[t]
    );
}

#[test]
fn feedback_off_replays_the_nominal_controls() {
    let sol = pendulum_solution();
    let x = DVector::from_vec(vec![2.0, -1.0]);
    for t in 0..sol.trajectory.horizon() {
        let now = sol.trajectory.t0 + t as f64 * sol.trajectory.dt;
        assert_eq!(
            control_tick(&sol, &x, now, false).unwrap(),
            sol.trajectory.controls[t]
        );
    }
}

#[test]
fn control_is_held_within_a_knot_and_missing_past_the_horizon() {
    let sol = pendulum_solution();
    let traj = &sol.trajectory;
    let x = DVector::from_vec(vec![0.5, 0.1]);
    let a = control_tick(&sol, &x, traj.t0 + 2.0 * traj.dt, true).unwrap();
    let b = control_tick(&sol, &x, traj.t0 + 2.9 * traj.dt, true).unwrap();
    assert_eq!(a, b);
    assert!(control_tick(&sol, &x, traj.t0 - 1e-3, true).is_none());
    assert!(control_tick(&sol, &x, traj.t0 + traj.horizon() as f64 * traj.dt, true).is_none());
}

proptest! {
    #[test]
    fn control_is_linear_in_a_single_deviation(entry in 0usize..2, delta in -1.0f64..1.0, t in 0usize..35) {
        let sol = pendulum_solution();
        let now = sol.trajectory.t0 + t as f64 * sol.trajectory.dt;
        let mut x = sol.trajectory.states[t].clone();
        x[entry] += delta;
        let u = control_tick(&sol, &x, now, true).unwrap();
        let expected = &sol.trajectory.controls[t] + sol.policy.gains[t].column(entry) * delta;
        prop_assert!((u - expected).amax() < 1e-12);
    }

    #[test]
    fn latency_line_releases_the_newest_due_item(dues in proptest::collection::vec(0u64..20, 1..12), at in 0u64..25) {
        let mut sorted = dues.clone();
        sorted.sort_unstable();
        let mut line = LatencyLine::new();
        for (i, d) in sorted.iter().enumerate() {
            line.push(*d, i);
        }
        let expected = sorted.iter().rposition(|d| *d <= at);
        prop_assert_eq!(line.pop_due(at), expected);
        prop_assert_eq!(line.pop_due(at), None);
    }

    #[test]
    fn ramp_velocity_converges_for_any_cutoff(speed in -3.0f64..3.0, cutoff in 5.0f64..200.0) {
        let cfg = EstimatorConfig { lowpass_cutoff: cutoff, ..EstimatorConfig::default() };
        let dt = 1e-3;
        let keep = tau(cutoff) / (tau(cutoff) + dt);
        let n = (1e-6f64.ln() / keep.ln()).ceil() as usize + 2;
        let history: Vec<(f64, DVector<f64>)> = (0..n)
            .map(|k| (k as f64 * dt, DVector::from_element(1, speed * k as f64 * dt)))
            .collect();
        let (x, _) = estimate(&history, &cfg).unwrap();
        prop_assert!((x[1] - speed).abs() <= 1e-4 * (1.0 + speed.abs()));
    }
}

#[test]
fn stale_solution_holds_the_last_command() {
    let sol = pendulum_solution();
    let x = sol.trajectory.states[0].clone();
    let mut c = Controller::new(DVector::zeros(1), true);
    let inside = c.tick(Some(&sol), Some(&x), sol.trajectory.t0 + 0.3);
    assert!(!inside.stale);
    assert_eq!(inside.solution, Some(sol.id));
    let late = c.tick(Some(&sol), Some(&x), sol.trajectory.t0 + 10.0);
    assert!(late.stale);
    assert_eq!(late.control, inside.control);
    let none = c.tick(None, Some(&x), 0.0);
    assert!(!none.stale);
}

#[test]
fn frozen_planner_goes_stale_and_holds() {
    let mut cfg = config("pendulum_swingup");
    cfg.freeze_planner_at = Some(0.5);
    cfg.duration = 1.5;
    let log = run_episode(&cfg).unwrap();
    assert!(log.summary.stale_ticks > 0);
    let stale: Vec<_> = log.ticks().filter(|t| t.stale).collect();
    // The first stale tick still sees a command issued before the latency.
    assert!(stale[1..].iter().all(|t| t.control == stale[1].control));
    let last = log.plans().last().unwrap();
    let expiry = last.time + cfg.solver.horizon as f64 * cfg.solver.dt;
    assert!(stale.iter().all(|t| t.time >= expiry - 1e-9));
}

#[test]
fn loop_rates_are_exact_in_simulated_time() {
    let mut cfg = config("pendulum_swingup");
    cfg.duration = 2.0;
    let log = run_episode(&cfg).unwrap();
    for second in 0..2 {
        let lo = f64::from(second);
        let hi = lo + 1.0;
        let ticks = log.ticks().filter(|t| t.time >= lo && t.time < hi).count();
        let plans = log.plans().filter(|p| p.time >= lo && p.time < hi).count();
        assert_eq!(ticks, 300);
        assert_eq!(plans, 50);
    }
}

#[test]
fn commands_reach_the_plant_after_the_latency() {
    for latency in [0.0, 0.003, 0.0075] {
        let mut cfg = config("pendulum_swingup");
        cfg.clock.command_latency = latency;
        cfg.duration = 0.5;
        let delay = (latency * cfg.clock.sim_rate).round() as usize;
        let mut rt = SimRuntime::new(cfg).unwrap();
        let mut issued = HashMap::new();
        let mut applied = Vec::new();
        for n in 0..500 {
            let r = rt.step();
            if let Some(out) = r.issued {
                issued.insert(n, out.control);
            }
            applied.push(rt.applied().control.clone());
        }
        let mut checked = 0;
        for (&n, u) in &issued {
            if n + delay < applied.len() && n >= 10 {
                assert_eq!(&applied[n + delay], u, "latency {latency}, tick {n}");
                if delay > 0 && applied[n + delay - 1] != *u {
                    checked += 1;
                }
            }
        }
        assert!(delay == 0 || checked > 10);
    }
}

fn mean_cost(log: &EpisodeLog, lo: f64, hi: f64) -> f64 {
    let v: Vec<f64> = log
        .ticks()
        .filter(|t| t.time >= lo && t.time < hi)
        .map(|t| t.cost)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn biped_stands_within_three_centimetres() {
    let cfg = config("biped_stand");
    assert_eq!(cfg.duration, 5.0);
    let log = run_episode(&cfg).unwrap();
    assert!(log.summary.failed.is_none());
    // The stand target for base height above the feet.
    let target = 0.775;
    let worst = log
        .ticks()
        .filter(|t| t.time >= 1.0)
        .map(|t| (t.state[1] - target).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.03, "height error {worst}");
}

fn push_config(feedback: bool) -> EpisodeConfig {
    let mut cfg = config("biped_stand");
    cfg.disturbances.push(DisturbanceEvent {
        time: 2.0,
        body: 0,
        impulse: [3.0, 0.0],
    });
    cfg.feedback = feedback;
    if !feedback {
        cfg.freeze_planner_at = Some(2.0);
    }
    cfg
}

#[test]
fn push_recovers_with_feedback_and_diverges_open_loop() {
    let mut cfg = push_config(true);
    cfg.duration = 3.2;
    let log = run_episode(&cfg).unwrap();
    assert!(log.summary.failed.is_none());
    let pre = mean_cost(&log, 1.5, 2.0);
    let peak = log
        .ticks()
        .filter(|t| t.time >= 2.0)
        .map(|t| t.cost)
        .fold(0.0, f64::max);
    assert!(peak > 2.0 * pre, "push too weak: peak {peak}, pre {pre}");
    let back = log
        .ticks()
        .filter(|t| t.time > 2.0 && t.cost < 2.0 * pre)
        .map(|t| t.time)
        .find(|&t0| {
            log.ticks()
                .filter(|t| t.time >= t0)
                .all(|t| t.cost < 2.0 * pre)
        })
        .expect("cost never settles below twice the pre-push level");
    assert!(back <= 3.0, "recovered at {back}");
    assert!(log
        .records
        .iter()
        .any(|r| matches!(r, LogRecord::Disturbance(_))));

    let mut cfg = push_config(false);
    cfg.duration = 4.0;
    let log = run_episode(&cfg).unwrap();
    let failed = log
        .summary
        .failed
        .as_deref()
        .expect("open loop should diverge");
    assert!(failed.contains("base fell"), "{failed}");
    assert!(log.summary.duration < 4.0);
}

fn noisy_trot(seed: u64) -> EpisodeConfig {
    let mut cfg = config("biped_trot");
    cfg.duration = 1.0;
    cfg.seed = seed;
    cfg.estimator.position_noise_std = 0.0005;
    cfg.estimator.angle_noise_std = 0.001;
    cfg.disturbances.push(DisturbanceEvent {
        time: 0.4,
        body: 0,
        impulse: [0.5, 0.0],
    });
    cfg
}

#[test]
fn identical_seeds_give_identical_logs() {
    let a = run_episode(&noisy_trot(7)).unwrap();
    let b = run_episode(&noisy_trot(7)).unwrap();
    assert_eq!(a.reproducible_ndjson(), b.reproducible_ndjson());
    assert_eq!(a.summary.content_hash, b.summary.content_hash);
    let c = run_episode(&noisy_trot(8)).unwrap();
    assert_ne!(a.summary.content_hash, c.summary.content_hash);
}

#[test]
fn log_round_trips_through_ndjson_and_disk() {
    let log = run_episode(&noisy_trot(3)).unwrap();
    let text = log.to_ndjson();
    assert_eq!(text.lines().count(), log.records.len() + 1);
    let back = EpisodeLog::from_ndjson(&text).unwrap();
    assert_eq!(back, log);
    let dir = tempfile::tempdir().unwrap();
    let (ndjson, summary) = log.write(dir.path(), "trot").unwrap();
    assert_eq!(std::fs::read_to_string(ndjson).unwrap(), text);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(parsed["content_hash"], log.summary.content_hash.as_str());
    assert!(EpisodeLog::from_ndjson("").is_err());
}

#[test]
fn log_is_monotone_and_every_command_has_a_source() {
    let log = run_episode(&noisy_trot(1)).unwrap();
    let mut plan_times = HashMap::new();
    let mut last = f64::NEG_INFINITY;
    for r in &log.records {
        match r {
            LogRecord::Plan(p) => {
                plan_times.insert(p.id, p.time);
            }
            LogRecord::Tick(t) => {
                assert!(t.time > last);
                last = t.time;
                if let Some(id) = t.solution {
                    assert!(plan_times[&id] <= t.time);
                }
            }
            _ => {}
        }
    }
    let sourced = log.ticks().filter(|t| t.solution.is_some()).count();
    // Only the first planner period runs on the startup command.
    assert!(sourced >= log.summary.control_ticks - 8);
    assert!(matches!(log.records.last(), Some(LogRecord::End(_))));
}

#[test]
fn cost_edits_take_effect_at_the_next_plan_step() {
    let cfg = config("pendulum_swingup");
    let mut rt = SimRuntime::new(cfg).unwrap();
    while rt.time() < 0.205 {
        rt.step();
    }
    let before = rt.cost().version;
    let mut cost = rt.cost().clone();
    let name = cost.running[0].name.clone();
    cost.set_weight(&name, 0.5).unwrap();
    let after = cost.version;
    assert!(after > before);
    rt.set_cost(cost).unwrap();
    let swap_time = rt.time();
    while rt.time() < 0.4 {
        rt.step();
    }
    let plans: Vec<_> = rt
        .records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Plan(p) => Some(p.clone()),
            _ => None,
        })
        .collect();
    for p in &plans {
        let expected = if p.time < swap_time { before } else { after };
        assert_eq!(p.cost_version, expected, "plan at {}", p.time);
    }
    let mut bad = rt.cost().clone();
    bad.running[0].weight = -1.0;
    assert!(rt.set_cost(bad).is_err());
    assert_eq!(rt.cost().version, after);
}

#[test]
fn divergence_ends_the_episode_early() {
    let mut cfg = config("pendulum_swingup");
    cfg.divergence.state_bound = 1.0;
    let log = run_episode(&cfg).unwrap();
    assert!(log.summary.failed.as_deref().unwrap().contains("bound"));
    assert!(log.summary.duration < cfg.duration);
}

#[test]
fn invalid_episode_configs_are_rejected() {
    let base = config("biped_stand");
    let mut bad = Vec::new();
    let mut c = base.clone();
    c.clock = ClockConfig {
        planner_rate: 400.0,
        ..ClockConfig::default()
    };
    bad.push(c);
    let mut c = base.clone();
    c.estimator.measurement_rate = 2000.0;
    bad.push(c);
    let mut c = base.clone();
    c.estimator.angle_noise_std = -1.0;
    bad.push(c);
    let mut c = base.clone();
    c.planner_outages.push([1.0, 0.5]);
    bad.push(c);
    let mut c = base.clone();
    c.disturbances.push(DisturbanceEvent {
        time: 1.0,
        body: 99,
        impulse: [1.0, 0.0],
    });
    bad.push(c);
    let mut c = base.clone();
    c.initial_state = Some(DVector::zeros(3));
    bad.push(c);
    let mut c = base;
    c.duration = 0.0;
    bad.push(c);
    for c in bad {
        assert!(run_episode(&c).is_err(), "{c:?}");
    }
    let model = Arc::new(common::model("pendulum"));
    assert!(EpisodeConfig::new(model, &builtin_task("biped_stand").unwrap()).is_err());
}

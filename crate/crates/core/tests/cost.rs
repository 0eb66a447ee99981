use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wbmpc::cost::{
    builtin_tasks, cost_derivatives, eval_cost, parse_task, task_to_toml, CostError, CostSpec,
    NormKind, ResidualKind,
};
use wbmpc::derivs::{linearize_with_residuals, FdConfig};
use wbmpc::dynamics::{builtin_models, Features, LinearSystem};
use wbmpc::{Dynamics, Model};

mod common;
use common::*;

#[test]
fn gradients_match_scalar_differences_on_every_builtin_model() {
    for spec_model in builtin_models() {
        let m = Model::new(spec_model).unwrap();
        let worst = worst_gradient_error(&m, 100, 11);
        assert!(
            worst < 1e-5,
            "{}: worst relative gradient error {worst:e}",
            m.name()
        );
    }
}

#[test]
fn gauss_newton_hessians_are_psd_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec_model in builtin_models() {
        let m = Model::new(spec_model).unwrap();
        let spec = full_spec(&m);
        for _ in 0..20 {
            let (x, u) = random_point(&m, &mut rng);
            let next = m.step(&x, &u, 0.01).unwrap();
            let lin = linearize_with_residuals(
                &m,
                |f: &Features, t, s| spec.residuals(f, t, s),
                &[x.clone(), next],
                &[u],
                0.0,
                0.01,
                &FdConfig::default(),
            )
            .unwrap();
            let cd = cost_derivatives(&spec, &m.capabilities(), &lin);
            for h in cd.lxx.iter().chain(&cd.luu) {
                assert_eq!(h, &h.transpose());
                for _ in 0..10 {
                    let v = DVector::from_fn(h.nrows(), |_, _| rng.random_range(-1.0..1.0));
                    assert!(v.dot(&(h * &v)) >= -1e-10 * v.norm_squared());
                }
            }
        }
    }
}

#[test]
fn linear_residual_hessian_is_exact() {
    let c = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
    let spec = CostSpec::new("lti").with_running(term(
        "lin",
        2.5,
        NormKind::Quadratic,
        ResidualKind::Linear {
            c: vec![vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]],
            d: vec![],
            offset: vec![0.0, 0.0],
        },
    ));
    let sys = LinearSystem::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 1));
    let x = DVector::from_vec(vec![0.4, -0.2, 1.0]);
    let u = DVector::zeros(1);
    let lin = linearize_with_residuals(
        &sys,
        |f: &Features, t, s| spec.residuals(f, t, s),
        &[x.clone(), x.clone()],
        &[u],
        0.0,
        1.0,
        &FdConfig::default(),
    )
    .unwrap();
    let cd = cost_derivatives(&spec, &sys.capabilities(), &lin);
    let exact = c.transpose() * &c * 2.5;
    assert!((&cd.lxx[0] - exact).amax() < 1e-8);
}

#[test]
fn eval_cost_arithmetic_and_breakdown() {
    let sys = LinearSystem::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1));
    let scalar = |w| {
        CostSpec::new("lti").with_running(term(
            "r",
            w,
            NormKind::Quadratic,
            ResidualKind::Linear {
                c: vec![vec![1.0]],
                d: vec![],
                offset: vec![0.0],
            },
        ))
    };
    let states = [DVector::from_element(1, 3.0), DVector::from_element(1, 3.0)];
    let controls = [DVector::zeros(1)];
    let c = eval_cost(&scalar(2.0), &sys, &states, &controls, 0.0, 1.0).unwrap();
    assert_eq!(c.total, 9.0);
    let zero = eval_cost(&scalar(0.0), &sys, &states, &controls, 0.0, 1.0).unwrap();
    assert_eq!(zero.total, 0.0);
}

#[test]
fn breakdown_sums_and_weights_scale_linearly() {
    let m = model("biped");
    let spec = full_spec(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, u) = random_point(&m, &mut rng);
    let states = [x.clone(), m.step(&x, &u, 0.01).unwrap()];
    let base = eval_cost(&spec, &m, &states, std::slice::from_ref(&u), 0.0, 0.01).unwrap();
    let sum: f64 = base.terms.iter().map(|t| t.value).sum();
    assert!((sum - base.total).abs() <= 1e-12 * base.total.max(1.0));
    assert!(base.total >= 0.0);

    let mut doubled = spec.clone();
    doubled
        .set_weight(
            "balance",
            2.0 * spec
                .running
                .iter()
                .find(|t| t.name == "balance")
                .unwrap()
                .weight,
        )
        .unwrap();
    // set_weight touches running and terminal terms of that name alike.
    doubled
        .terminal
        .iter_mut()
        .filter(|t| t.name == "balance")
        .for_each(|t| t.weight = 4.0);
    let after = eval_cost(&doubled, &m, &states, &[u], 0.0, 0.01).unwrap();
    for (a, b) in base.terms.iter().zip(&after.terms) {
        if a.name == "balance" {
            assert_eq!(b.value, 2.0 * a.value);
        } else {
            assert_eq!(b.value, a.value);
        }
    }
}

#[test]
fn residual_examples() {
    let m = model("biped");
    let x = m.home_state().to_vector();
    let f = m.features(&x, None).unwrap();
    assert_eq!(ResidualKind::Upright.evaluate_vector(&f, 0.0)[0], 0.0);

    // Stance phase: the reference is the ground, so r is the foot height.
    let gait = ResidualKind::Gait {
        period: 1.0,
        duty: 0.5,
        lift: 0.1,
        offsets: vec![0.0, 0.0],
    };
    let r = gait.evaluate_vector(&f, 0.25);
    assert_eq!(r[0], f.feet[0].position[1]);
    assert_eq!(r[1], f.feet[1].position[1]);

    // A body at rest with its CoM over the stance midpoint has zero balance error.
    let mut f = f.clone();
    for foot in &mut f.feet {
        foot.normal_force = 20.0;
    }
    f.com = [0.5 * (f.feet[0].position[0] + f.feet[1].position[0]), 0.6];
    f.com_velocity = [0.0, 0.0];
    assert_eq!(ResidualKind::Balance.evaluate_vector(&f, 0.0)[0], 0.0);
}

#[test]
fn unsupported_residuals_fail_validation() {
    let cart = model("cartpole");
    let spec = CostSpec::new("cartpole").with_running(term(
        "gait",
        1.0,
        NormKind::Quadratic,
        ResidualKind::Gait {
            period: 0.5,
            duty: 0.5,
            lift: 0.05,
            offsets: vec![],
        },
    ));
    assert!(matches!(
        spec.validate(&cart.capabilities()),
        Err(CostError::InvalidTerm { .. })
    ));
    let terminal_effort = CostSpec::new("cartpole").with_terminal(term(
        "effort",
        1.0,
        NormKind::Quadratic,
        ResidualKind::Effort,
    ));
    assert_eq!(
        terminal_effort.validate(&cart.capabilities()),
        Err(CostError::TerminalUsesControl("effort".into()))
    );
    assert_eq!(
        CostSpec::new("x").validate(&cart.capabilities()),
        Err(CostError::Empty)
    );
    let negative = CostSpec::new("cartpole").with_running(term(
        "v",
        -1.0,
        NormKind::Quadratic,
        ResidualKind::JointVelocity,
    ));
    assert!(negative.validate(&cart.capabilities()).is_err());
}

#[test]
fn set_weight_bumps_version_or_rejects() {
    let mut spec = builtin_tasks()[0].cost();
    let v = spec.version;
    spec.set_weight("goal", 3.0).unwrap();
    assert_eq!(spec.version, v + 1);
    assert!(spec
        .running
        .iter()
        .chain(&spec.terminal)
        .filter(|t| t.name == "goal")
        .all(|t| t.weight == 3.0));
    assert_eq!(
        spec.set_weight("nope", 1.0),
        Err(CostError::UnknownTerm("nope".into()))
    );
    assert!(spec.set_weight("goal", f64::NAN).is_err());
    assert_eq!(spec.version, v + 1);
}

#[test]
fn builtin_tasks_validate_and_round_trip() {
    for task in builtin_tasks() {
        let m = model(&task.model);
        task.validate(&m.capabilities()).unwrap();
        let text = task_to_toml(&task);
        assert_eq!(parse_task(&text).unwrap(), task, "{}", task.name);
    }
}

fn arb_kind() -> impl Strategy<Value = ResidualKind> {
    let v = -5.0f64..5.0;
    prop_oneof![
        Just(ResidualKind::Upright),
        v.clone().prop_map(|target| ResidualKind::Height { target }),
        (v.clone(), v.clone()).prop_map(|(a, b)| ResidualKind::Position { goal: [a, b] }),
        (
            0.1f64..2.0,
            0.05f64..0.95,
            0.0f64..0.2,
            prop::collection::vec(0.0f64..1.0, 1..3)
        )
            .prop_map(|(period, duty, lift, offsets)| ResidualKind::Gait {
                period,
                duty,
                lift,
                offsets
            }),
        Just(ResidualKind::Balance),
        Just(ResidualKind::Effort),
        prop::collection::vec(v.clone(), 1..5).prop_map(|target| ResidualKind::Posture { target }),
        Just(ResidualKind::Angular),
        Just(ResidualKind::JointVelocity),
        (
            prop::collection::vec(v.clone(), 2),
            prop::collection::vec(v.clone(), 0..2),
            v
        )
            .prop_map(|(c, d, o)| ResidualKind::Linear {
                c: vec![c],
                d: if d.is_empty() { vec![] } else { vec![d] },
                offset: vec![o]
            }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn task_files_round_trip(
        kinds in prop::collection::vec(arb_kind(), 1..6),
        weights in prop::collection::vec(0.0f64..100.0, 6),
        smooth in prop::collection::vec(prop::option::of(0.001f64..1.0), 6),
    ) {
        let mut task = parse_task("name = \"t\"\nmodel = \"biped\"\n").unwrap();
        for (i, kind) in kinds.into_iter().enumerate() {
            let norm = smooth[i].map_or(NormKind::Quadratic, |c| NormKind::SmoothL2 { c });
            task.running.push(term(&format!("t{i}"), weights[i], norm, kind));
        }
        let text = task_to_toml(&task);
        prop_assert_eq!(parse_task(&text).unwrap(), task);
    }

    #[test]
    fn norms_are_non_negative_with_psd_curvature(
        r in prop::collection::vec(-10.0f64..10.0, 1..5),
        c in 0.001f64..1.0,
    ) {
        for norm in [NormKind::Quadratic, NormKind::SmoothL2 { c }] {
            prop_assert!(norm.value(&r) >= 0.0);
            let (_, h) = norm.derivatives(&r);
            let eig = h.symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-12);
        }
    }

    #[test]
    fn cost_is_zero_only_with_zero_weighted_residuals(seed in 0u64..1000) {
        let m = model("hopper");
        let spec = full_spec(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, u) = random_point(&m, &mut rng);
        let next = m.step(&x, &u, 0.01).unwrap();
        let c = eval_cost(&spec, &m, &[x, next], &[u], 0.0, 0.01).unwrap();
        prop_assert!(c.total > 0.0);
        let mut zero = spec.clone();
        zero.running.iter_mut().chain(zero.terminal.iter_mut()).for_each(|t| t.weight = 0.0);
        let states = [m.home_state().to_vector(), m.home_state().to_vector()];
        let z = eval_cost(&zero, &m, &states, &[m.home_control()], 0.0, 0.01).unwrap();
        prop_assert_eq!(z.total, 0.0);
    }
}

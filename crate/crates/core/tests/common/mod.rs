//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wbmpc::cost::{cost_derivatives, CostSpec, NormKind, ResidualKind, ResidualTerm};
use wbmpc::derivs::{linearize_with_residuals, FdConfig, ResidualStage};
use wbmpc::dynamics::{builtin_model, Features, LinearSystem};
use wbmpc::solver::SolverConfig;
use wbmpc::{Dynamics, Model};

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

pub struct Lq {
    pub sys: LinearSystem,
    pub spec: CostSpec,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub x0: DVector<f64>,
}

pub fn lq_problem(seed: u64, nx: usize, nu: usize) -> Lq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::identity(nx, nx) + randn(&mut rng, nx, nx) * 0.1;
    let b = randn(&mut rng, nx, nu) * 0.5;
    let l = randn(&mut rng, nx, nx) * 0.5;
    let p = randn(&mut rng, nu, nx) * 0.2;
    let m = DMatrix::identity(nu, nu) + randn(&mut rng, nu, nu) * 0.1;
    let lf = randn(&mut rng, nx, nx);
    let x0 = DVector::from_fn(nx, |_, _| StandardNormal.sample(&mut rng));
    let linear = |c: &DMatrix<f64>, d: Option<&DMatrix<f64>>| ResidualKind::Linear {
        c: rows(c),
        d: d.map(rows).unwrap_or_default(),
        offset: vec![0.0; c.nrows()],
    };
    let spec = CostSpec::new("lq")
        .with_running(ResidualTerm::new(
            "state",
            1.0,
            NormKind::Quadratic,
            linear(&l, None),
        ))
        .with_running(ResidualTerm::new(
            "mixed",
            1.0,
            NormKind::Quadratic,
            linear(&p, Some(&m)),
        ))
        .with_terminal(ResidualTerm::new(
            "final",
            1.0,
            NormKind::Quadratic,
            linear(&lf, None),
        ));
    Lq {
        sys: LinearSystem::new(a, b),
        q: l.transpose() * &l + p.transpose() * &p,
        r: m.transpose() * &m,
        n: m.transpose() * &p,
        qf: lf.transpose() * &lf,
        spec,
        x0,
    }
}

/// Textbook finite-horizon Riccati recursion: gains and `S_0`.
pub fn riccati_oracle(lq: &Lq, horizon: usize) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let (a, b) = (&lq.sys.a, &lq.sys.b);
    let mut s = lq.qf.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); horizon];
    for t in (0..horizon).rev() {
        let h = &lq.r + b.transpose() * &s * b;
        let g = b.transpose() * &s * a + &lq.n;
        let k = -h.lu().solve(&g).unwrap();
        s = &lq.q + a.transpose() * &s * a + (a.transpose() * &s * b + lq.n.transpose()) * &k;
        s = (&s + s.transpose()) * 0.5;
        gains[t] = k;
    }
    (gains, s)
}

/// Forward differences carry no truncation error on linear maps, so a wide
/// step only reduces roundoff; at the default 1e-6 roundoff alone moves the
/// gains by ~1e-7.
pub fn exact_config(horizon: usize) -> SolverConfig {
    SolverConfig {
        horizon,
        reg_init: 1e-12,
        reg_min: 1e-12,
        fd: FdConfig {
            epsilon: 1e-3,
            ..FdConfig::default()
        },
        ..SolverConfig::default()
    }
}

pub fn model(name: &str) -> Model {
    Model::new(builtin_model(name).unwrap()).unwrap()
}

pub fn term(name: &str, weight: f64, norm: NormKind, kind: ResidualKind) -> ResidualTerm {
    ResidualTerm::new(name, weight, norm, kind)
}

/// Every residual kind the model supports, alternating norms.
pub fn full_spec(m: &Model) -> CostSpec {
    let caps = m.capabilities();
    let nj = caps.n_joints;
    let mut candidates = vec![
        ResidualKind::Upright,
        ResidualKind::Height { target: 0.6 },
        ResidualKind::Position { goal: [0.3, 0.8] },
        ResidualKind::Gait {
            period: 0.4,
            duty: 0.6,
            lift: 0.05,
            offsets: (0..caps.n_feet).map(|i| i as f64 * 0.5).collect(),
        },
        ResidualKind::Balance,
        ResidualKind::Effort,
        ResidualKind::Posture {
            target: vec![0.1; nj],
        },
        ResidualKind::Angular,
        ResidualKind::JointVelocity,
    ];
    candidates.push(ResidualKind::Linear {
        c: vec![(0..caps.nx).map(|i| 0.3 + 0.1 * i as f64).collect()],
        d: vec![vec![0.5; caps.nu]],
        offset: vec![0.2],
    });
    let mut spec = CostSpec::new(m.name());
    for (i, kind) in candidates.into_iter().enumerate() {
        if kind.validate(&caps).is_err() {
            continue;
        }
        let norm = if i % 2 == 0 {
            NormKind::Quadratic
        } else {
            NormKind::SmoothL2 { c: 0.1 }
        };
        let name = kind.label().to_string();
        if !kind.uses_control() {
            spec.terminal.push(term(&name, 2.0, norm, kind.clone()));
        }
        spec.running
            .push(term(&name, 1.0 + i as f64 * 0.1, norm, kind));
    }
    spec.validate(&caps).unwrap();
    spec
}

pub fn random_point(m: &Model, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
    let mut s = m.home_state();
    for i in 0..m.nq() {
        s.q[i] += rng.random_range(-0.2..0.2);
        s.v[i] = rng.random_range(-1.0..1.0);
    }
    if m.base_dofs() == 3 {
        s.q[1] += rng.random_range(-0.02..0.01);
    }
    let mut u = m.home_control();
    for i in 0..m.nu() {
        u[i] += rng.random_range(-0.2..0.2);
    }
    (s.to_vector(), u)
}

pub fn knot_cost(
    spec: &CostSpec,
    m: &Model,
    x: &DVector<f64>,
    u: Option<&DVector<f64>>,
    time: f64,
) -> f64 {
    let f = m.features(x, u).unwrap();
    let stage = if u.is_some() {
        ResidualStage::Running
    } else {
        ResidualStage::Terminal
    };
    spec.knot_costs(&f, time, stage).iter().sum()
}

/// Centered scalar differences of the knot cost.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_iterator(
        at.len(),
        (0..at.len()).map(|i| {
            let mut p = at.clone();
            let mut q = at.clone();
            p[i] += h;
            q[i] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        }),
    )
}

pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

/// Worst relative error of the analytic cost gradients against scalar
/// differences over `points` random knots.
pub fn worst_gradient_error(m: &Model, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = full_spec(m);
    let caps = m.capabilities();
    let mut worst: f64 = 0.0;
    for i in 0..points {
        let (x, u) = random_point(m, &mut rng);
        let next = m.step(&x, &u, 0.01).unwrap();
        let time = 0.013 * i as f64;
        let lin = linearize_with_residuals(
            m,
            |f: &Features, t, s| spec.residuals(f, t, s),
            &[x.clone(), next.clone()],
            std::slice::from_ref(&u),
            time,
            0.01,
            &FdConfig::default(),
        )
        .unwrap();
        let cd = cost_derivatives(&spec, &caps, &lin);
        let gx = fd_gradient(|x| knot_cost(&spec, m, x, Some(&u), time), &x);
        let gu = fd_gradient(|u| knot_cost(&spec, m, &x, Some(u), time), &u);
        let gt = fd_gradient(|x| knot_cost(&spec, m, x, None, time + 0.01), &next);
        for (analytic, oracle) in [(&cd.lx[0], &gx), (&cd.lu[0], &gu), (&cd.lx[1], &gt)] {
            worst = worst.max(relative_error(analytic, oracle));
        }
    }
    worst
}

/// Exact one-step Jacobians of the PD-driven pendulum about rest: the hinge
/// dynamics are linear there, so composing the semi-implicit Euler substep
/// map `n` times gives the discrete step.
pub fn pendulum_exact_jacobians(m: &Model, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let spec = m.spec();
    let link = &spec.links[0];
    let joint = &spec.joints[0];
    let pd = joint.pd.unwrap();
    let half = 0.5 * link.length;
    let inertia = link.inertia + link.mass * half * half;
    // θ̈ = (−m g (L/2) θ − kp θ + kp u − (kd + damping) θ̇) / I about the hinge.
    let a = -(link.mass * spec.gravity * half + pd.kp) / inertia;
    let b = -(pd.kd + joint.damping) / inertia;
    let c = pd.kp / inertia;
    let n = m.substeps(dt);
    let h = dt / n as f64;
    let ah = DMatrix::from_row_slice(
        2,
        2,
        &[1.0 + h * h * a, h * (1.0 + h * b), h * a, 1.0 + h * b],
    );
    let bh = DMatrix::from_column_slice(2, 1, &[h * h * c, h * c]);
    let mut a_exact = DMatrix::identity(2, 2);
    let mut b_exact = DMatrix::zeros(2, 1);
    for _ in 0..n {
        b_exact = &ah * b_exact + &bh;
        a_exact = &ah * a_exact;
    }
    (a_exact, b_exact)
}

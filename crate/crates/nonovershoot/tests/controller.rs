//! Controller synthesis tests.
//!
//! The frozen numbers below were derived by hand from the two-state
//! benchmark plant (constant regressors -8 and -3, theta = 10):
//!
//!   h1(0) = 1.6 - 0.5                         = 1.1
//!   s1    = 2.5 + 0.05 * 64                   = 5.7
//!   alpha1(0) = -5.7*1.1 + 8*9.5              = 69.73
//!   h2(0) = 84.5 - 69.73 - 0.5                = 14.27
//!   w2    = -3 - 5.7*8                        = -48.6
//!   s2    = 2.5 + 0.05*48.6^2 + 0.3*8^2       = 139.798
//!   ubar(0) = -139.798*14.27 + 48.6*9.5 - 5.7*84.5 + 5.7*0.5
//!           = -2012.01746
//!
//! Beyond the pins, two independent oracles check the synthesis as a whole:
//! central finite differences for every stored partial derivative, and the
//! closed-loop clearance dynamics
//!
//!   hdot = A h + e_n (u - ubar) + W^T (theta - thetahat) + Q^T thetahat_dot
//!
//! verified as an algebraic identity at random states with arbitrary inputs,
//! parameters, and update rates.

mod common;

use common::{load_scenario, Lcg};
use nalgebra::DMatrix;
use nonovershoot::controller::{
    compile, compile_for, gain_floor_report, geo_factor, upper_envelope, violation_bound,
    BoundError, BoundMode, CompileError, FloorViolation,
};
use nonovershoot::expr::{Arena, Env, ExprId, Var};
use nonovershoot::scenario::{Gains, Scenario};

fn eval_ids(arena: &Arena, x: &[f64], th: &[f64], refs: &[f64], vals: &mut Vec<f64>) {
    let env = Env {
        t: 0.0,
        x,
        thetahat: th,
        refs,
    };
    arena.eval_all(&env, vals).unwrap();
}

/// Three-state plant with products and transcendentals in the regressor,
/// exercising every chain-rule path that the constant-regressor benchmark
/// cannot reach.
fn nonlinear_scenario() -> Scenario {
    Scenario::from_toml(
        r#"
        [plant]
        n = 3
        p = 2
        phi = [
            ["sin(x1)", "x1"],
            ["x1 * x2", "cos(x2)"],
            ["x2 * x3", "tanh(x1)"],
        ]
        theta = [0.7, -1.3]

        [reference]
        r = "0.25"
        y_r = "sin(t)"

        [gains]
        c = [1.5, 2.0, 1.0]
        kappa = [0.1, 0.2, 0.1]
        g = [0.0, 0.4, 0.3]
        sigma = 1.0
        gamma = 2.0
        nu = 0.1
        k_nominal = [2.0, 1.5, 3.0]

        [init]
        x0 = [1.0, 0.0, 0.0]
        thetahat0 = [0.5, -1.0]

        [sim]
        identifier = "x-swapping"
        t_end = 5.0
        "#,
    )
    .unwrap()
}

#[test]
fn benchmark_quantities_at_time_zero_match_hand_computation() {
    let scenario = load_scenario("ex1_hpassive.toml");
    let graph = compile_for(&scenario).unwrap();
    let (r0, _) = scenario.reference.sample_vec(0.0).unwrap();
    assert_eq!(r0.len(), 3);
    assert!((r0[0] - 0.5).abs() < 1e-15);
    assert!((r0[1] - 0.5).abs() < 1e-15);
    assert!(r0[2].abs() < 1e-15);

    let out = graph
        .evaluate_at(&scenario.x0, &scenario.thetahat0, &r0)
        .unwrap();

    let tol = 1e-9;
    assert!((out.h[0] - 1.1).abs() < tol, "h1(0) = {}", out.h[0]);
    assert!((out.h[1] - 14.27).abs() < tol, "h2(0) = {}", out.h[1]);
    assert!((out.s[0] - 5.7).abs() < tol, "s1 = {}", out.s[0]);
    assert!((out.s[1] - 139.798).abs() < tol, "s2 = {}", out.s[1]);
    assert!((out.w[(0, 0)] + 8.0).abs() < tol, "w1 = {}", out.w[(0, 0)]);
    assert!((out.w[(0, 1)] + 48.6).abs() < tol, "w2 = {}", out.w[(0, 1)]);
    assert!(out.q[(0, 0)].abs() < tol, "q1 = {}", out.q[(0, 0)]);
    assert!((out.q[(0, 1)] + 8.0).abs() < tol, "q2 = {}", out.q[(0, 1)]);
    assert!(
        (out.ubar + 2012.01746).abs() < 1e-8,
        "ubar(0) = {}",
        out.ubar
    );

    // A is diagonal -s_i with a unit superdiagonal.
    assert!((out.a[(0, 0)] + 5.7).abs() < tol);
    assert!((out.a[(0, 1)] - 1.0).abs() < tol);
    assert!(out.a[(1, 0)].abs() < tol);
    assert!((out.a[(1, 1)] + 139.798).abs() < tol);

    // The intermediate stabilizing function itself.
    let env = Env {
        t: 0.0,
        x: &scenario.x0,
        thetahat: &scenario.thetahat0,
        refs: &r0,
    };
    let alpha1 = graph.arena.eval(graph.alpha[0], &env).unwrap();
    assert!((alpha1 - 69.73).abs() < tol, "alpha1(0) = {alpha1}");
}

#[test]
fn certified_input_reads_only_state_estimate_and_reference() {
    for name in ["ex1_hpassive.toml", "ex1_boundary.toml"] {
        let scenario = load_scenario(name);
        let graph = compile_for(&scenario).unwrap();
        let vars = graph.arena.free_vars(graph.ubar);
        assert!(!vars.contains(&Var::T), "{name}: ubar depends on t");
        for v in &vars {
            match v {
                Var::X(i) => assert!((1..=graph.n as u32).contains(i)),
                Var::ThetaHat(j) => assert!((1..=graph.p as u32).contains(j)),
                Var::Ref(k) => assert!(*k <= graph.n as u32),
                Var::T => unreachable!(),
            }
        }
        // The top-order feedforward derivative must actually be used.
        assert!(vars.contains(&Var::Ref(graph.n as u32)), "{name}");
    }
}

#[test]
fn floor_report_matches_hand_values_on_benchmark_scenarios() {
    let scenario = load_scenario("ex1_hpassive.toml");
    let graph = compile_for(&scenario).unwrap();
    let report = gain_floor_report(&graph, &scenario).unwrap();
    assert!(report.ok());
    assert_eq!(report.entries.len(), 1);
    let e = &report.entries[0];
    assert_eq!(e.i, 1);
    assert!(!e.degenerate);
    // -(84.5 - 0.5 - 76) / 1.1
    assert!((e.floor + 8.0 / 1.1).abs() < 1e-12, "floor = {}", e.floor);
    assert!((report.h0[0] - 1.1).abs() < 1e-12);
    assert!((report.h0[1] - 14.27).abs() < 1e-9);

    let scenario = load_scenario("ex1_boundary.toml");
    let graph = compile_for(&scenario).unwrap();
    let report = gain_floor_report(&graph, &scenario).unwrap();
    assert!(report.ok());
    let e = &report.entries[0];
    // -(84.5 - 76) / 0.1
    assert!((e.floor + 85.0).abs() < 1e-9, "floor = {}", e.floor);
    assert!((report.h0[0] - 0.1).abs() < 1e-12);
    assert!((report.h0[1] - 9.07).abs() < 1e-9);
}

#[test]
fn floor_report_accepts_every_shipped_scenario() {
    for name in [
        "ex1_hpassive.toml",
        "ex1_hpassive_pure.toml",
        "ex1_hswapping.toml",
        "ex1_boundary.toml",
        "ex1_poor_init.toml",
        "ex2_xpassive.toml",
        "ex2_xswapping.toml",
        "ex2_boundary.toml",
        "ex2_poor_init.toml",
    ] {
        let scenario = load_scenario(name);
        let graph = compile_for(&scenario).unwrap();
        let report = gain_floor_report(&graph, &scenario).unwrap();
        assert!(report.ok(), "{name}: {:?}", report.violations);
    }
}

#[test]
fn zero_initial_clearance_is_flagged_degenerate_not_divided() {
    let mut scenario = load_scenario("ex1_boundary.toml");
    scenario.x0[0] = 1.5; // h1(0) = 0 exactly
    let graph = compile_for(&scenario).unwrap();
    let report = gain_floor_report(&graph, &scenario).unwrap();
    assert!(report.ok());
    let e = &report.entries[0];
    assert!(e.degenerate);
    assert_eq!(e.floor, 0.0);
}

#[test]
fn unreachable_gain_floor_and_negative_clearance_are_both_reported() {
    let mut scenario = load_scenario("ex1_boundary.toml");
    scenario.x0[1] = 0.0;
    let graph = compile_for(&scenario).unwrap();
    let report = gain_floor_report(&graph, &scenario).unwrap();
    assert!(!report.ok());

    let mut saw_floor = false;
    let mut saw_negative = false;
    for v in &report.violations {
        match v {
            FloorViolation::BelowFloor { i, c, floor } => {
                saw_floor = true;
                assert_eq!(*i, 1);
                assert!((c - 2.5).abs() < 1e-12);
                // -(0 - 0 - 76) / 0.1
                assert!((floor - 760.0).abs() < 1e-9, "floor = {floor}");
            }
            FloorViolation::NegativeInitial { i, h } => {
                saw_negative = true;
                assert_eq!(*i, 2);
                // 0 - (-5.7*0.1 + 76) - 0
                assert!((h + 75.43).abs() < 1e-9, "h2(0) = {h}");
            }
        }
    }
    assert!(saw_floor && saw_negative);
}

#[test]
fn node_budget_failures_surface_as_compile_errors() {
    let scenario = nonlinear_scenario();
    match compile(&scenario.plant, &scenario.gains, 16) {
        Err(CompileError::Budget(_)) => {}
        other => panic!("expected budget error, got {other:?}"),
    }
}

fn check_partials_against_finite_differences(scenario: &Scenario, seed: u64, cases: usize) {
    let mut graph = compile_for(scenario).unwrap();
    let n = graph.n;
    let p = graph.p;

    // (target alpha_i, id of the stored partial, which variable)
    let mut checks: Vec<(ExprId, ExprId, Var)> = Vec::new();
    for i in 1..n {
        let a = graph.alpha[i - 1];
        for j in 1..=i {
            checks.push((a, graph.dalpha_dx[i - 1][j - 1], Var::X(j as u32)));
        }
        for k in 0..i {
            checks.push((a, graph.dalpha_dref[i - 1][k], Var::Ref(k as u32)));
        }
        for j in 1..=p {
            checks.push((a, graph.dalpha_dth[i - 1][j - 1], Var::ThetaHat(j as u32)));
        }
    }
    // The final stage is published through ubar rather than an alpha slot.
    for j in 1..=n {
        let d = graph.arena.diff(graph.ubar, Var::X(j as u32)).unwrap();
        checks.push((graph.ubar, d, Var::X(j as u32)));
    }

    let mut vals = Vec::new();
    let mut rng = Lcg::new(seed);
    for _ in 0..cases {
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let th: Vec<f64> = (0..p).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let refs: Vec<f64> = (0..=n).map(|_| rng.uniform(-1.0, 1.0)).collect();

        for &(target, stored, var) in &checks {
            eval_ids(&graph.arena, &x, &th, &refs, &mut vals);
            let analytic = vals[stored.index()];

            let mut perturb = |delta: f64| -> f64 {
                let mut xp = x.clone();
                let mut thp = th.clone();
                let mut rp = refs.clone();
                match var {
                    Var::X(i) => xp[i as usize - 1] += delta,
                    Var::ThetaHat(j) => thp[j as usize - 1] += delta,
                    Var::Ref(k) => rp[k as usize] += delta,
                    Var::T => unreachable!(),
                }
                eval_ids(&graph.arena, &xp, &thp, &rp, &mut vals);
                vals[target.index()]
            };
            let base = match var {
                Var::X(i) => x[i as usize - 1],
                Var::ThetaHat(j) => th[j as usize - 1],
                Var::Ref(k) => refs[k as usize],
                Var::T => unreachable!(),
            };
            let step = 1e-6 * base.abs().max(1.0);
            let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
            assert!(
                (analytic - fd).abs() <= 1e-5 * analytic.abs().max(fd.abs()).max(1.0),
                "partial wrt {:?}: analytic {analytic} vs fd {fd}",
                var
            );
        }
    }
}

#[test]
fn stored_partials_match_finite_differences_on_benchmark() {
    let scenario = load_scenario("ex1_hpassive.toml");
    check_partials_against_finite_differences(&scenario, 0xfd_0001, 40);
}

#[test]
fn stored_partials_match_finite_differences_on_nonlinear_plant() {
    let scenario = nonlinear_scenario();
    check_partials_against_finite_differences(&scenario, 0xfd_0002, 40);
}

/// The central structural check: differentiate each clearance expression
/// symbolically along the plant flow and compare with the published error
/// system. Holds for arbitrary input, true parameters, and update rate, so
/// any slip in the recursion (a wrong sign, a missing chain term, a
/// misplaced partial) shows up as a residual.
fn check_error_system_identity(scenario: &Scenario, seed: u64, cases: usize) {
    let mut graph = compile_for(scenario).unwrap();
    let n = graph.n;
    let p = graph.p;

    let mut dh_dx: Vec<Vec<ExprId>> = Vec::new();
    let mut dh_dth: Vec<Vec<ExprId>> = Vec::new();
    let mut dh_dref: Vec<Vec<ExprId>> = Vec::new();
    for i in 0..n {
        let h_i = graph.h[i];
        let mut row_x = Vec::new();
        let mut row_r = Vec::new();
        let mut row_t = Vec::new();
        for j in 0..n {
            row_x.push(graph.arena.diff(h_i, Var::X(j as u32 + 1)).unwrap());
            row_r.push(graph.arena.diff(h_i, Var::Ref(j as u32)).unwrap());
        }
        for j in 0..p {
            row_t.push(graph.arena.diff(h_i, Var::ThetaHat(j as u32 + 1)).unwrap());
        }
        dh_dx.push(row_x);
        dh_dref.push(row_r);
        dh_dth.push(row_t);
    }

    let mut rng = Lcg::new(seed);
    let mut vals = Vec::new();
    let mut plant_vals = Vec::new();
    let mut phi = DMatrix::zeros(p, n);
    for case in 0..cases {
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let th: Vec<f64> = (0..p).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let refs: Vec<f64> = (0..=n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let theta: Vec<f64> = (0..p).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let thdot: Vec<f64> = (0..p).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let u = rng.uniform(-5.0, 5.0);

        scenario
            .plant
            .phi_matrix(&x, &mut plant_vals, &mut phi)
            .unwrap();
        let mut xdot = vec![0.0; n];
        for j in 0..n {
            xdot[j] = if j + 1 < n { x[j + 1] } else { u };
            for k in 0..p {
                xdot[j] += phi[(k, j)] * theta[k];
            }
        }

        let out = graph.evaluate_at(&x, &th, &refs).unwrap();
        eval_ids(&graph.arena, &x, &th, &refs, &mut vals);

        for i in 0..n {
            let mut lhs = 0.0;
            for j in 0..n {
                lhs += vals[dh_dx[i][j].index()] * xdot[j];
                lhs += vals[dh_dref[i][j].index()] * refs[j + 1];
            }
            for j in 0..p {
                lhs += vals[dh_dth[i][j].index()] * thdot[j];
            }

            let mut rhs = 0.0;
            for j in 0..n {
                rhs += out.a[(i, j)] * out.h[j];
            }
            if i == n - 1 {
                rhs += u - out.ubar;
            }
            for j in 0..p {
                rhs += out.w[(j, i)] * (theta[j] - th[j]);
                rhs += out.q[(j, i)] * thdot[j];
            }

            assert!(
                (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()).max(1.0),
                "case {case}, row {i}: lhs {lhs} vs rhs {rhs}"
            );
        }
    }
}

#[test]
fn clearance_dynamics_match_published_error_system_on_benchmark() {
    let scenario = load_scenario("ex1_hpassive.toml");
    check_error_system_identity(&scenario, 0x1d_0001, 60);
}

#[test]
fn clearance_dynamics_match_published_error_system_on_nonlinear_plant() {
    let scenario = nonlinear_scenario();
    check_error_system_identity(&scenario, 0x1d_0002, 60);
}

#[test]
fn geometric_amplification_has_a_continuous_limit_at_one() {
    assert!((geo_factor(2.5, 2) - 1.4).abs() < 1e-15);
    assert_eq!(geo_factor(2.5, 1), 1.0);
    assert!((geo_factor(0.5, 3) - 7.0).abs() < 1e-12);
    assert_eq!(geo_factor(1.0, 4), 4.0);
    // Continuity across the switch.
    let near = geo_factor(1.0 + 1e-7, 4);
    assert!((near - 4.0).abs() < 1e-5, "geo(1 + 1e-7, 4) = {near}");
}

fn benchmark_gains() -> Gains {
    Gains {
        c: vec![2.5, 2.5],
        kappa: vec![0.05, 0.05],
        g: vec![0.3, 0.3],
        sigma: 1.0,
        gamma: 2.0,
        nu: 0.1,
        k_nominal: vec![2.0, 2.0],
    }
}

#[test]
fn violation_bound_matches_hand_computed_values() {
    let gains = benchmark_gains();

    // geo = 1.4, sqrt(c kappa) = sqrt(0.125), sqrt(c g) = sqrt(0.75).
    let linf = violation_bound(
        &gains,
        2,
        0.0,
        BoundMode::Linf {
            theta_err_sup: 1.0,
            theta_dot_sup: 2.0,
        },
    )
    .unwrap();
    assert!((linf - 3.5964797410532852).abs() < 1e-12, "linf = {linf}");

    let l2 = violation_bound(
        &gains,
        2,
        0.0,
        BoundMode::L2 {
            theta_err_sup: 1.0,
            theta_dot_l2: 3.0,
        },
    )
    .unwrap();
    assert!((l2 - 7.402075672012717).abs() < 1e-12, "l2 = {l2}");

    // Matching identifier, energy-bounded update: |theta_err0| = 0.5.
    let hp = violation_bound(&gains, 2, 0.5, BoundMode::HPassive).unwrap();
    assert!((hp - 1.8936456077762305).abs() < 1e-12, "hp = {hp}");
    let xp = violation_bound(&gains, 2, 0.5, BoundMode::XPassive).unwrap();
    assert_eq!(hp, xp);

    // Normalized update: sup rate gamma/nu * 0.5 = 10.
    let hs = violation_bound(&gains, 2, 0.5, BoundMode::HSwapping).unwrap();
    assert!((hs - 9.072853262315927).abs() < 1e-12, "hs = {hs}");

    let mut unnormalized = gains.clone();
    unnormalized.nu = 0.0;
    assert_eq!(
        violation_bound(&unnormalized, 2, 0.5, BoundMode::HSwapping),
        Err(BoundError::InvalidMode)
    );
    assert_eq!(
        violation_bound(&unnormalized, 2, 0.5, BoundMode::XSwapping),
        Err(BoundError::InvalidMode)
    );
}

#[test]
fn single_state_bounds_drop_the_update_rate_term() {
    let gains = Gains {
        c: vec![2.0],
        kappa: vec![0.1],
        g: vec![0.5],
        sigma: 1.0,
        gamma: 1.0,
        nu: 0.0,
        k_nominal: vec![2.0],
    };
    // No second stage, so no update-rate amplification: the g term vanishes.
    let b = violation_bound(
        &gains,
        1,
        0.0,
        BoundMode::Linf {
            theta_err_sup: 1.0,
            theta_dot_sup: 1e9,
        },
    )
    .unwrap();
    let expected = 1.0 / (2.0 * (2.0 * 0.1_f64).sqrt());
    assert!((b - expected).abs() < 1e-12, "b = {b}");

    let hp = violation_bound(&gains, 1, 1.0, BoundMode::HPassive).unwrap();
    assert!((hp - expected).abs() < 1e-12, "hp = {hp}");
}

#[test]
fn transient_ceiling_matches_hand_computation() {
    // exp(-4) * (1 + 2*3) + 0.5
    let v = upper_envelope(2.0, &[1.0, 3.0], 0.5, 2.0);
    assert!((v - 0.6282094722211392).abs() < 1e-15, "envelope = {v}");
    // At t = 0 the polynomial weights kill every term but h_1(0).
    let v0 = upper_envelope(2.0, &[1.0, 3.0], 0.5, 0.0);
    assert!((v0 - 1.5).abs() < 1e-15);
    // Third-order weight t^2/2.
    let v3 = upper_envelope(1.0, &[1.0, 1.0, 1.0], 0.0, 2.0);
    assert!((v3 - (-2.0_f64).exp() * 5.0).abs() < 1e-15);
}

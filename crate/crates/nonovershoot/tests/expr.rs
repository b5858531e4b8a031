//! Expression engine: parse pins, derivative pins against hand-derived
//! forms, and property tests (print/parse round-trip, finite-difference
//! agreement, linearity of differentiation).

mod common;

use nonovershoot::expr::{
    Arena, Env, EvalError, ExprId, Node, ParseError, SymbolTable, Var,
};
use proptest::prelude::*;

fn full_table() -> SymbolTable {
    SymbolTable::full(2, 1)
}

#[test]
fn negative_literal_parses_to_a_constant() {
    let mut a = Arena::default();
    let e = a.parse("-8", &full_table()).unwrap();
    assert!(matches!(a.node(e), Node::Const(v) if v == -8.0));
}

#[test]
fn boundary_expression_has_the_expected_shape_and_value() {
    let mut a = Arena::default();
    let e = a.parse("sin(t / 2) + 0.5", &full_table()).unwrap();
    match a.node(e) {
        Node::Add(lhs, rhs) => {
            assert!(matches!(a.node(lhs), Node::Sin(_)));
            assert!(matches!(a.node(rhs), Node::Const(v) if v == 0.5));
        }
        other => panic!("expected Add(Sin, Const), got {other:?}"),
    }
    let env = Env {
        t: std::f64::consts::PI,
        x: &[],
        thetahat: &[],
        refs: &[],
    };
    let v = a.eval(e, &env).unwrap();
    assert!((v - 1.5).abs() < 1e-15);
}

#[test]
fn operator_precedence_groups_as_documented() {
    let mut a = Arena::default();
    let e = a.parse("2 * x1 + 3 / x2^2", &full_table()).unwrap();
    let Node::Add(lhs, rhs) = a.node(e) else {
        panic!("top level should be Add");
    };
    assert!(matches!(a.node(lhs), Node::Mul(..)));
    let Node::Div(_, den) = a.node(rhs) else {
        panic!("right side should be Div");
    };
    assert!(matches!(a.node(den), Node::PowInt(_, 2)));
}

#[test]
fn parse_errors_carry_positions_and_names() {
    let mut a = Arena::default();
    let t = full_table();
    assert!(matches!(
        a.parse("x1 +", &t),
        Err(ParseError::Syntax { .. })
    ));
    match a.parse("x1 + foo", &t) {
        Err(ParseError::UnknownSymbol { name, pos }) => {
            assert_eq!(name, "foo");
            assert_eq!(pos, 5);
        }
        other => panic!("expected unknown symbol, got {other:?}"),
    }
    assert!(matches!(
        a.parse("x1^2.5", &t),
        Err(ParseError::Syntax { .. })
    ));
    assert!(matches!(
        a.parse("1e999", &t),
        Err(ParseError::Number { .. })
    ));
    assert!(matches!(
        a.parse("x1 $ 2", &t),
        Err(ParseError::Syntax { .. })
    ));
}

#[test]
fn node_budget_is_enforced_during_parsing() {
    let mut a = Arena::new(4);
    let err = a.parse("x1 + x2 + t + r0 + thetahat1", &full_table());
    assert!(matches!(err, Err(ParseError::Budget(_))));
}

#[test]
fn division_by_near_zero_is_reported_not_evaluated() {
    let mut a = Arena::default();
    let e = a.parse("1 / (x1 - 1)", &full_table()).unwrap();
    let env = Env {
        t: 0.0,
        x: &[1.0, 0.0],
        thetahat: &[0.0],
        refs: &[0.0],
    };
    assert!(matches!(
        a.eval(e, &env),
        Err(EvalError::DivisionNearZero { .. })
    ));
}

#[test]
fn unbound_variables_are_reported_by_name() {
    let mut a = Arena::default();
    let e = a.parse("x2", &full_table()).unwrap();
    let env = Env {
        t: 0.0,
        x: &[1.0],
        thetahat: &[],
        refs: &[],
    };
    match a.eval(e, &env) {
        Err(EvalError::UnboundVariable { var }) => assert_eq!(var, Var::X(2)),
        other => panic!("expected unbound variable, got {other:?}"),
    }
}

#[test]
fn overflowing_evaluation_is_a_domain_error() {
    let mut a = Arena::default();
    let e = a.parse("exp(x1)", &full_table()).unwrap();
    let env = Env {
        t: 0.0,
        x: &[1000.0, 0.0],
        thetahat: &[],
        refs: &[],
    };
    assert!(matches!(a.eval(e, &env), Err(EvalError::DomainError { .. })));
}

// Derivative pins: thanks to interning, "derivative equals this hand-written
// form" is an id equality, not a string comparison.

#[test]
fn derivative_of_boundary_signal_is_half_cosine() {
    let mut a = Arena::default();
    let t = full_table();
    let e = a.parse("sin(t / 2)", &t).unwrap();
    let d = a.diff(e, Var::T).unwrap();
    let expected = a.parse("0.5 * cos(t / 2)", &t).unwrap();
    assert_eq!(d, expected);
}

#[test]
fn derivative_of_cubic_is_three_x_squared() {
    let mut a = Arena::default();
    let t = full_table();
    let e = a.parse("x1^3", &t).unwrap();
    let d = a.diff(e, Var::X(1)).unwrap();
    let expected = a.parse("3 * x1^2", &t).unwrap();
    assert_eq!(d, expected);
}

#[test]
fn derivative_of_tanh_uses_the_square_identity() {
    let mut a = Arena::default();
    let t = full_table();
    let e = a.parse("tanh(x1)", &t).unwrap();
    let d = a.diff(e, Var::X(1)).unwrap();
    let expected = a.parse("1 - tanh(x1)^2", &t).unwrap();
    assert_eq!(d, expected);
}

#[test]
fn quotient_rule_matches_hand_derivation() {
    let mut a = Arena::default();
    let t = full_table();
    let e = a.parse("x1 / x2", &t).unwrap();
    let d = a.diff(e, Var::X(2)).unwrap();
    let expected = a.parse("-x1 / x2^2", &t).unwrap();
    assert_eq!(d, expected);
}

#[test]
fn differentiation_is_memoized() {
    let mut a = Arena::default();
    let t = full_table();
    let e = a.parse("sin(x1 * x2) + exp(x1)", &t).unwrap();
    let d1 = a.diff(e, Var::X(1)).unwrap();
    let len_after_first = a.len();
    let d2 = a.diff(e, Var::X(1)).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(a.len(), len_after_first);
}

#[test]
fn free_vars_reports_exactly_the_reachable_variables() {
    let mut a = Arena::default();
    let e = a.parse("x1 + thetahat1 * r0", &full_table()).unwrap();
    let vars = a.free_vars(e);
    let expected: std::collections::BTreeSet<Var> =
        [Var::X(1), Var::ThetaHat(1), Var::Ref(0)].into_iter().collect();
    assert_eq!(vars, expected);
}

#[test]
fn import_preserves_structure_across_arenas() {
    let mut src = Arena::default();
    let e = src
        .parse("sin(x1) * (x2 - tanh(t)) / (1 + x1^2)", &full_table())
        .unwrap();
    let mut dst = Arena::default();
    let other = dst.parse("exp(x2)", &full_table()).unwrap();
    let _ = other;
    let imported = dst.import(&src, e).unwrap();
    assert_eq!(src.to_text(e), dst.to_text(imported));
}

// Property tests.

const TEST_VARS: [Var; 5] = [Var::T, Var::X(1), Var::X(2), Var::ThetaHat(1), Var::Ref(0)];

#[derive(Clone, Debug)]
enum T {
    Const(f64),
    Var(usize),
    Neg(Box<T>),
    Add(Box<T>, Box<T>),
    Sub(Box<T>, Box<T>),
    Mul(Box<T>, Box<T>),
    Div(Box<T>, Box<T>),
    Pow(Box<T>, u32),
    Sin(Box<T>),
    Cos(Box<T>),
    Exp(Box<T>),
    Tanh(Box<T>),
}

fn realize(a: &mut Arena, t: &T) -> ExprId {
    match t {
        T::Const(v) => a.constant(*v),
        T::Var(i) => a.var(TEST_VARS[*i]),
        T::Neg(x) => {
            let e = realize(a, x);
            a.neg(e)
        }
        T::Add(x, y) => {
            let (ex, ey) = (realize(a, x), realize(a, y));
            a.add(ex, ey)
        }
        T::Sub(x, y) => {
            let (ex, ey) = (realize(a, x), realize(a, y));
            a.sub(ex, ey)
        }
        T::Mul(x, y) => {
            let (ex, ey) = (realize(a, x), realize(a, y));
            a.mul(ex, ey)
        }
        T::Div(x, y) => {
            let (ex, ey) = (realize(a, x), realize(a, y));
            a.div(ex, ey)
        }
        T::Pow(x, k) => {
            let e = realize(a, x);
            a.powint(e, *k)
        }
        T::Sin(x) => {
            let e = realize(a, x);
            a.sin(e)
        }
        T::Cos(x) => {
            let e = realize(a, x);
            a.cos(e)
        }
        T::Exp(x) => {
            let e = realize(a, x);
            a.exp(e)
        }
        T::Tanh(x) => {
            let e = realize(a, x);
            a.tanh(e)
        }
    }
    .expect("budget")
}

fn expr_strategy() -> impl Strategy<Value = T> {
    let leaf = prop_oneof![
        (-3.0..3.0f64).prop_map(T::Const),
        (0usize..TEST_VARS.len()).prop_map(T::Var),
    ];
    leaf.prop_recursive(4, 48, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|x| T::Neg(Box::new(x))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| T::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| T::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| T::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| T::Div(Box::new(a), Box::new(b))),
            (inner.clone(), 2u32..5).prop_map(|(a, k)| T::Pow(Box::new(a), k)),
            inner.clone().prop_map(|x| T::Sin(Box::new(x))),
            inner.clone().prop_map(|x| T::Cos(Box::new(x))),
            inner.clone().prop_map(|x| T::Exp(Box::new(x))),
            inner.prop_map(|x| T::Tanh(Box::new(x))),
        ]
    })
}

#[derive(Clone, Copy, Debug)]
struct Point {
    t: f64,
    x: [f64; 2],
    th: [f64; 1],
    r: [f64; 1],
}

fn point_strategy() -> impl Strategy<Value = Point> {
    (
        -2.0..2.0f64,
        -2.0..2.0f64,
        -2.0..2.0f64,
        -2.0..2.0f64,
        -2.0..2.0f64,
    )
        .prop_map(|(t, x1, x2, th, r)| Point {
            t,
            x: [x1, x2],
            th: [th],
            r: [r],
        })
}

fn eval_at(a: &Arena, e: ExprId, pt: &Point) -> Result<f64, EvalError> {
    let env = Env {
        t: pt.t,
        x: &pt.x,
        thetahat: &pt.th,
        refs: &pt.r,
    };
    a.eval(e, &env)
}

fn perturbed(pt: &Point, var: Var, delta: f64) -> Point {
    let mut q = *pt;
    match var {
        Var::T => q.t += delta,
        Var::X(i) => q.x[i as usize - 1] += delta,
        Var::ThetaHat(j) => q.th[j as usize - 1] += delta,
        Var::Ref(k) => q.r[k as usize] += delta,
    }
    q
}

fn central_fd(a: &Arena, e: ExprId, pt: &Point, var: Var, h: f64) -> Result<f64, EvalError> {
    let hi = eval_at(a, e, &perturbed(pt, var, h))?;
    let lo = eval_at(a, e, &perturbed(pt, var, -h))?;
    Ok((hi - lo) / (2.0 * h))
}

proptest! {
    /// Printing any constructed expression and reparsing it in the same
    /// arena yields the identical node.
    #[test]
    fn print_parse_round_trips(t in expr_strategy()) {
        let mut a = Arena::default();
        let e = realize(&mut a, &t);
        let text = a.to_text(e);
        let table = full_table();
        let e2 = a.parse(&text, &table)
            .unwrap_or_else(|err| panic!("reparse of `{text}` failed: {err}"));
        prop_assert_eq!(e, e2);
    }

    /// Symbolic derivatives agree with converged central differences.
    #[test]
    fn derivative_matches_finite_differences(
        t in expr_strategy(),
        vi in 0usize..TEST_VARS.len(),
        pt in point_strategy(),
    ) {
        let mut a = Arena::default();
        let e = realize(&mut a, &t);
        let var = TEST_VARS[vi];
        let d = a.diff(e, var).expect("budget");

        let center = eval_at(&a, e, &pt);
        prop_assume!(center.is_ok());
        prop_assume!(center.unwrap().abs() <= 1e4);
        let dval = eval_at(&a, d, &pt);
        prop_assume!(dval.is_ok());
        let dval = dval.unwrap();
        prop_assume!(dval.abs() <= 1e6);

        let fd_coarse = central_fd(&a, e, &pt, var, 1e-3);
        let fd_fine = central_fd(&a, e, &pt, var, 1e-4);
        prop_assume!(fd_coarse.is_ok() && fd_fine.is_ok());
        let (fd_coarse, fd_fine) = (fd_coarse.unwrap(), fd_fine.unwrap());
        // Only judge the symbolic value where the difference quotient itself
        // has converged; elsewhere FD says nothing.
        prop_assume!((fd_coarse - fd_fine).abs() <= 1e-4 * fd_fine.abs().max(1.0));

        let tol = 1e-3 * dval.abs().max(fd_fine.abs()).max(1.0);
        prop_assert!(
            (dval - fd_fine).abs() <= tol,
            "d = {dval}, fd = {fd_fine}, expr = {}",
            a.to_text(e)
        );
    }

    /// d(a f + b g) evaluates identically to a df + b dg.
    #[test]
    fn differentiation_is_linear(
        f in expr_strategy(),
        g in expr_strategy(),
        ca in -3.0..3.0f64,
        cb in -3.0..3.0f64,
        vi in 0usize..TEST_VARS.len(),
        pt in point_strategy(),
    ) {
        let mut a = Arena::default();
        let ef = realize(&mut a, &f);
        let eg = realize(&mut a, &g);
        let var = TEST_VARS[vi];
        let cca = a.constant(ca).unwrap();
        let ccb = a.constant(cb).unwrap();
        let af = a.mul(cca, ef).unwrap();
        let bg = a.mul(ccb, eg).unwrap();
        let combo = a.add(af, bg).unwrap();
        let d_combo = a.diff(combo, var).unwrap();

        let df = a.diff(ef, var).unwrap();
        let dg = a.diff(eg, var).unwrap();
        let adf = a.mul(cca, df).unwrap();
        let bdg = a.mul(ccb, dg).unwrap();
        let rhs = a.add(adf, bdg).unwrap();

        let lhs_v = eval_at(&a, d_combo, &pt);
        let rhs_v = eval_at(&a, rhs, &pt);
        prop_assume!(lhs_v.is_ok() && rhs_v.is_ok());
        let (lhs_v, rhs_v) = (lhs_v.unwrap(), rhs_v.unwrap());
        prop_assume!(lhs_v.abs() <= 1e8);
        prop_assert!((lhs_v - rhs_v).abs() <= 1e-12 * lhs_v.abs().max(1.0));
    }
}

//! Test-only builders for the demo kernels used across module tests.

use std::collections::BTreeMap;

use crate::dse::{optimize, DseLevel, OptimizedExprSet};
use crate::expr::{solve_linear, Equation, Expr, IndexExpr, Sym};
use crate::fd::expand_derivatives;
use crate::grid::{Grid, GridFunction};

pub fn subs(h: f64, s: f64) -> BTreeMap<Sym, f64> {
    let mut m = BTreeMap::new();
    m.insert(Sym::new("h"), h);
    m.insert(Sym::new("s"), s);
    m
}

/// Convection update on an n×n grid: returns (u, set, subs).
pub fn convection(
    n: usize,
    dx: f64,
    dt: f64,
    level: DseLevel,
) -> (GridFunction<f64>, OptimizedExprSet, BTreeMap<Sym, f64>) {
    let grid = Grid::regular(&[n, n], dx);
    let u = grid.time_function::<f64>("u", 1, 2);
    let c = Expr::num(1.0);
    let lhs = u.dt() + c.clone() * u.dxl() + c * u.dyl();
    let discrete = expand_derivatives(&lhs).unwrap();
    let stencil = solve_linear(&Equation::zero(discrete), &u.forward_access()).unwrap();
    let set = optimize(&[Equation::new(u.forward(), stencil)], level).unwrap();
    (u, set, subs(dx, dt))
}

/// Laplace Jacobi update plus the four boundary rows:
/// returns (p, pn, bc_right, set).
pub fn laplace(
    n: usize,
    level: DseLevel,
) -> (
    GridFunction<f64>,
    GridFunction<f64>,
    GridFunction<f64>,
    OptimizedExprSet,
) {
    let grid = Grid::regular(&[n, n], 1.0);
    let p = grid.function::<f64>("p", 2);
    let pn = grid.function::<f64>("pn", 2);
    let bc_right = grid.function_on::<f64>("bc_right", &["x"]);
    let a = Sym::new("a");
    let lhs = Expr::Sym(a.clone()) * pn.dx2() + pn.dy2();
    let discrete = expand_derivatives(&lhs).unwrap();
    let center = match pn.at() {
        Expr::Access(acc) => acc,
        _ => unreachable!(),
    };
    let stencil = solve_linear(&Equation::zero(discrete), &center).unwrap();
    let nl = n as i64;
    let eqs = vec![
        Equation::new(p.at(), stencil),
        Equation::new(p.idx(&[IndexExpr::Rel(0), IndexExpr::Abs(0)]), Expr::num(0.0)),
        Equation::new(
            p.idx(&[IndexExpr::Rel(0), IndexExpr::Abs(nl - 1)]),
            bc_right.idx(&[IndexExpr::Rel(0)]),
        ),
        Equation::new(
            p.idx(&[IndexExpr::Abs(0), IndexExpr::Rel(0)]),
            p.idx(&[IndexExpr::Abs(1), IndexExpr::Rel(0)]),
        ),
        Equation::new(
            p.idx(&[IndexExpr::Abs(nl - 1), IndexExpr::Rel(0)]),
            p.idx(&[IndexExpr::Abs(nl - 2), IndexExpr::Rel(0)]),
        ),
    ];
    let mut m = BTreeMap::new();
    m.insert(a, 1.0);
    let eqs: Vec<Equation> = eqs
        .iter()
        .map(|eq| Equation::new(eq.lhs.clone(), crate::expr::substitute(&eq.rhs, &m)))
        .collect();
    let set = optimize(&eqs, level).unwrap();
    (p, pn, bc_right, set)
}

/// Acoustic forward update (time_order 2) with damping symbolically present:
/// returns (u, m, eta, set, subs).
pub fn acoustic(
    shape: &[usize],
    order: u32,
    h: f64,
    dt: f64,
    level: DseLevel,
) -> (
    GridFunction<f64>,
    GridFunction<f64>,
    GridFunction<f64>,
    OptimizedExprSet,
    BTreeMap<Sym, f64>,
) {
    let grid = Grid::regular(shape, h);
    let u = grid.time_function::<f64>("u", 2, order);
    let m = grid.function::<f64>("m", order);
    let eta = grid.function::<f64>("eta", order);
    let eqn = m.at() * u.dt2() - u.laplace() + eta.at() * u.dt();
    let discrete = expand_derivatives(&eqn).unwrap();
    let stencil = solve_linear(&Equation::zero(discrete), &u.forward_access()).unwrap();
    let set = optimize(&[Equation::new(u.forward(), stencil)], level).unwrap();
    (u, m, eta, set, subs(h, dt))
}

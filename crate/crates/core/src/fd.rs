//! Finite-difference weights and derivative expansion.
//!
//! Weights solve the Taylor moment system for a given set of integer offsets
//! in exact rational arithmetic and convert to floating point only when a
//! derivative is expanded into an indexed stencil. Expansion keeps spacing
//! symbolic: `h` for every space dimension, `s` for time; operators bind the
//! numeric values through the substitution map at build time.

use num::{BigInt, BigRational, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::expr::{
    simplify, space_spacing, time_spacing, Access, Axis, Deriv, Expr, IndexExpr, Side, Sym,
};

/// Stencil weights for a `d`-th derivative on the given offsets, including
/// the implied `spacing^-d` scale factor.
#[derive(Clone, Debug)]
pub struct FdWeights {
    pub offsets: Vec<i64>,
    pub coeffs: Vec<BigRational>,
    /// Power of the grid spacing dividing the weighted sum.
    pub spacing_pow: u32,
}

impl FdWeights {
    pub fn coeffs_f64(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.to_f64().unwrap()).collect()
    }
}

fn big(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// Solve the moment conditions `Σ_j w_j · o_j^m = d! · [m == d]` for
/// `m = 0 .. n-1` by exact Gaussian elimination.
pub fn fd_weights(d: u32, offsets: &[i64]) -> Result<FdWeights> {
    let n = offsets.len();
    if n < d as usize + 1 {
        return Err(Error::SingularSystem);
    }
    {
        let mut sorted = offsets.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::SingularSystem);
        }
    }

    let mut factorial = big(1);
    for k in 2..=d as i64 {
        factorial *= big(k);
    }

    // Augmented matrix rows: row m is [o_0^m, ..., o_{n-1}^m | d!·[m == d]].
    let mut mat: Vec<Vec<BigRational>> = (0..n)
        .map(|m| {
            let mut row: Vec<BigRational> = offsets
                .iter()
                .map(|&o| {
                    let mut p = big(1);
                    for _ in 0..m {
                        p *= big(o);
                    }
                    p
                })
                .collect();
            row.push(if m == d as usize {
                factorial.clone()
            } else {
                big(0)
            });
            row
        })
        .collect();

    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !mat[r][col].is_zero())
            .ok_or(Error::SingularSystem)?;
        mat.swap(col, pivot);
        let p = mat[col][col].clone();
        for r in 0..n {
            if r == col || mat[r][col].is_zero() {
                continue;
            }
            let f = &mat[r][col] / &p;
            for c in col..=n {
                let t = &f * &mat[col][c];
                mat[r][c] -= t;
            }
        }
    }

    let coeffs: Vec<BigRational> = (0..n).map(|r| &mat[r][n] / &mat[r][r]).collect();
    Ok(FdWeights {
        offsets: offsets.to_vec(),
        coeffs,
        spacing_pow: d,
    })
}

/// Integer offsets for a derivative flavor: one-sided stencils span
/// `accuracy + order` points, centered stencils drop one point when the
/// derivative order is even.
pub fn stencil_offsets(order: u32, side: Side, accuracy: u32) -> Vec<i64> {
    assert!(order >= 1 && accuracy >= 1);
    match side {
        Side::Left => (0..(accuracy + order) as i64)
            .map(|i| i - (accuracy + order) as i64 + 1)
            .collect(),
        Side::Right => (0..(accuracy + order) as i64).collect(),
        Side::Centered => {
            assert!(accuracy % 2 == 0, "centered stencils need even accuracy");
            let width = accuracy + order - if order % 2 == 0 { 1 } else { 0 };
            let radius = (width as i64 - 1) / 2;
            (-radius..=radius).collect()
        }
    }
}

fn shift_access(a: &Access, axis: Axis, by: i64) -> Result<Access> {
    let mut out = a.clone();
    match axis {
        Axis::Time => {
            let t = match out.time {
                Some(t) => t,
                None => return Err(Error::NotTimeVarying(a.name().into())),
            };
            let new = t as i64 + by;
            if new.unsigned_abs() > a.func.time_order() as u64 {
                return Err(Error::HaloExceeded {
                    func: a.name().into(),
                    offset: new,
                    halo: a.func.time_order() as i64,
                });
            }
            out.time = Some(new as i32);
        }
        Axis::Space(dim) => {
            if dim >= out.idx.len() {
                return Err(Error::HaloExceeded {
                    func: a.name().into(),
                    offset: by,
                    halo: 0,
                });
            }
            match out.idx[dim] {
                IndexExpr::Rel(o) => {
                    let new = o as i64 + by;
                    if new.unsigned_abs() > a.func.halo() as u64 {
                        return Err(Error::HaloExceeded {
                            func: a.name().into(),
                            offset: new,
                            halo: a.func.halo() as i64,
                        });
                    }
                    out.idx[dim] = IndexExpr::Rel(new as i32);
                }
                IndexExpr::Abs(_) => {
                    return Err(Error::HaloExceeded {
                        func: a.name().into(),
                        offset: by,
                        halo: 0,
                    })
                }
            }
        }
    }
    Ok(out)
}

fn shift_expr(e: &Expr, axis: Axis, by: i64) -> Result<Expr> {
    Ok(match e {
        Expr::Const(_) | Expr::Sym(_) => e.clone(),
        Expr::Access(a) => Expr::Access(shift_access(a, axis, by)?),
        Expr::Pow(b, k) => Expr::Pow(Box::new(shift_expr(b, axis, by)?), *k),
        Expr::Mul(ops) => Expr::Mul(
            ops.iter()
                .map(|o| shift_expr(o, axis, by))
                .collect::<Result<_>>()?,
        ),
        Expr::Add(ops) => Expr::Add(
            ops.iter()
                .map(|o| shift_expr(o, axis, by))
                .collect::<Result<_>>()?,
        ),
        Expr::Div(n, d) => Expr::Div(
            Box::new(shift_expr(n, axis, by)?),
            Box::new(shift_expr(d, axis, by)?),
        ),
        Expr::Deriv(d) => Expr::Deriv(Deriv {
            arg: Box::new(shift_expr(&d.arg, axis, by)?),
            ..d.clone()
        }),
    })
}

fn spacing_sym(axis: Axis) -> Sym {
    match axis {
        Axis::Time => time_spacing(),
        Axis::Space(_) => space_spacing(),
    }
}

fn expand_one(d: &Deriv) -> Result<Expr> {
    let arg = expand_raw(&d.arg)?;
    let offsets = stencil_offsets(d.order, d.side, d.accuracy);
    let weights = fd_weights(d.order, &offsets)?;
    let spacing = Expr::Sym(spacing_sym(d.axis));
    let den = if d.order == 1 {
        spacing
    } else {
        spacing.pow(d.order)
    };
    let mut terms = Vec::with_capacity(offsets.len());
    for (o, w) in offsets.iter().zip(weights.coeffs_f64()) {
        if w == 0.0 {
            continue;
        }
        let shifted = shift_expr(&arg, d.axis, *o)?;
        terms.push(Expr::Div(
            Box::new(Expr::Mul(vec![Expr::num(w), shifted])),
            Box::new(den.clone()),
        ));
    }
    Ok(Expr::Add(terms))
}

fn expand_raw(e: &Expr) -> Result<Expr> {
    Ok(match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => e.clone(),
        Expr::Deriv(d) => expand_one(d)?,
        Expr::Pow(b, k) => Expr::Pow(Box::new(expand_raw(b)?), *k),
        Expr::Mul(ops) => Expr::Mul(ops.iter().map(expand_raw).collect::<Result<_>>()?),
        Expr::Add(ops) => Expr::Add(ops.iter().map(expand_raw).collect::<Result<_>>()?),
        Expr::Div(n, d) => Expr::Div(Box::new(expand_raw(n)?), Box::new(expand_raw(d)?)),
    })
}

/// Replace every derivative node by its weighted indexed stencil and
/// simplify. The result contains no derivative nodes.
pub fn expand_derivatives(e: &Expr) -> Result<Expr> {
    Ok(simplify(&expand_raw(e)?))
}

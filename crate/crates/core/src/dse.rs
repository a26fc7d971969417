//! Symbolic optimization passes.
//!
//! All passes transform an [`OptimizedExprSet`] and preserve values under
//! exact arithmetic:
//!
//! * [`eliminate_common_subexpressions`] binds repeated subexpressions to
//!   per-point temporaries (`t0`, `t1`, ...).
//! * [`hoist_time_invariants`] moves subexpressions free of time-varying
//!   accesses out of the time loop, onto scratch fields (`q0`, ...) when they
//!   depend on grid data, or plain scalars (`c0`, ...) otherwise.
//! * [`factorize_weights`] groups sum terms sharing a numeric coefficient,
//!   turning `w*a + w*b` into `w*(a + b)`.
//! * [`flop_count`] reports per-point operation counts, a perfect-cache byte
//!   estimate and the resulting operational intensity.
//!
//! The operation-count conventions here (leading `-1` factors become
//! negations, negative terms in a sum become subtractions) are mirrored
//! exactly by the instruction tape in [`crate::exec`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{free_symbols, simplify, Access, Equation, Expr, IndexExpr, Sym, R64};
use crate::grid::FnMeta;

/// Optimization level: `Basic` runs CSE only, `Advanced` adds hoisting and
/// weight factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DseLevel {
    Basic,
    Advanced,
}

impl DseLevel {
    pub fn name(self) -> &'static str {
        match self {
            DseLevel::Basic => "basic",
            DseLevel::Advanced => "advanced",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "basic" => Some(DseLevel::Basic),
            "advanced" => Some(DseLevel::Advanced),
            _ => None,
        }
    }
}

/// A time-invariant precomputation materialized on a grid-shaped scratch
/// buffer before the time loop.
#[derive(Clone)]
pub struct HoistedField {
    pub meta: Arc<FnMeta>,
    pub expr: Expr,
}

/// One executable assignment plus the per-point temporaries feeding it.
#[derive(Clone)]
pub struct Assign {
    pub temps: Vec<(Sym, Expr)>,
    pub lhs: Access,
    pub rhs: Expr,
}

impl Assign {
    /// Temporaries and right-hand side, in evaluation order.
    fn exprs(&self) -> impl Iterator<Item = &Expr> {
        self.temps.iter().map(|(_, e)| e).chain([&self.rhs])
    }
}

/// Assignments in optimized form: hoisted precomputations, per-point
/// temporaries and the rewritten main assignments.
#[derive(Clone)]
pub struct OptimizedExprSet {
    pub hoisted_scalars: Vec<(Sym, Expr)>,
    pub hoisted_fields: Vec<HoistedField>,
    pub assigns: Vec<Assign>,
    used_names: BTreeSet<String>,
    temp_counter: usize,
    hoist_counter: usize,
}

impl OptimizedExprSet {
    /// Wrap discretized assignments. Left-hand sides must be single grid
    /// accesses and no derivative nodes may remain.
    pub fn from_equations(eqs: &[Equation]) -> Result<Self> {
        let mut used = BTreeSet::new();
        let mut assigns = Vec::with_capacity(eqs.len());
        for eq in eqs {
            let lhs = match &eq.lhs {
                Expr::Access(a) => a.clone(),
                other => {
                    return Err(Error::Parse(format!(
                        "assignment target must be a grid access, got {other}"
                    )))
                }
            };
            if eq.rhs.contains_deriv() {
                return Err(Error::UnexpandedDerivative(format!("{}", eq.rhs)));
            }
            let rhs = simplify(&eq.rhs);
            let mut fs = free_symbols(&rhs);
            fs.merge(free_symbols(&eq.lhs));
            used.extend(fs.names());
            assigns.push(Assign {
                temps: Vec::new(),
                lhs,
                rhs,
            });
        }
        Ok(OptimizedExprSet {
            hoisted_scalars: Vec::new(),
            hoisted_fields: Vec::new(),
            assigns,
            used_names: used,
            temp_counter: 0,
            hoist_counter: 0,
        })
    }

    /// Rebuild the main assignments as equations.
    pub fn equations(&self) -> Vec<Equation> {
        self.assigns
            .iter()
            .map(|a| Equation::new(Expr::Access(a.lhs.clone()), a.rhs.clone()))
            .collect()
    }

    fn fresh(&mut self, prefix: &str, counter: fn(&mut Self) -> &mut usize) -> Sym {
        loop {
            let n = *counter(self);
            *counter(self) += 1;
            let name = format!("{prefix}{n}");
            if self.used_names.insert(name.clone()) {
                return Sym::new(&name);
            }
        }
    }
}

/// Run the passes for a level: CSE at `basic`, CSE + hoisting +
/// factorization at `advanced`.
pub fn optimize(eqs: &[Equation], level: DseLevel) -> Result<OptimizedExprSet> {
    let set = OptimizedExprSet::from_equations(eqs)?;
    let set = eliminate_common_subexpressions(&set);
    Ok(match level {
        DseLevel::Basic => set,
        DseLevel::Advanced => factorize_weights(&hoist_time_invariants(&set)),
    })
}

// ---------------------------------------------------------------------------
// Common subexpression elimination
// ---------------------------------------------------------------------------

fn subtree_height(e: &Expr) -> usize {
    match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => 0,
        Expr::Pow(b, _) => 1 + subtree_height(b),
        Expr::Mul(ops) | Expr::Add(ops) => {
            1 + ops.iter().map(subtree_height).max().unwrap_or(0)
        }
        Expr::Div(n, d) => 1 + subtree_height(n).max(subtree_height(d)),
        Expr::Deriv(d) => 1 + subtree_height(&d.arg),
    }
}

fn is_leaf(e: &Expr) -> bool {
    matches!(e, Expr::Const(_) | Expr::Sym(_) | Expr::Access(_))
}

/// Count subtree occurrences with multiplicity. A power base counts as
/// repeated (`x**k` performs the multiplication k-1 times).
fn count_subtrees(e: &Expr, counts: &mut BTreeMap<Expr, usize>) {
    if is_leaf(e) {
        return;
    }
    *counts.entry(e.clone()).or_insert(0) += 1;
    match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => unreachable!(),
        Expr::Pow(b, k) => {
            if !is_leaf(b) {
                *counts.entry((**b).clone()).or_insert(0) += if *k >= 2 { 2 } else { 1 };
            }
            count_subtrees(b, counts);
            if !is_leaf(b) {
                // Compensate the recursive self-count above.
                *counts.get_mut(b).unwrap() -= 1;
            }
        }
        Expr::Mul(ops) | Expr::Add(ops) => ops.iter().for_each(|o| count_subtrees(o, counts)),
        Expr::Div(n, d) => {
            count_subtrees(n, counts);
            count_subtrees(d, counts);
        }
        Expr::Deriv(d) => count_subtrees(&d.arg, counts),
    }
}

fn replace_bound(e: &Expr, bound: &BTreeMap<Expr, Sym>) -> Expr {
    if let Some(sym) = bound.get(e) {
        return Expr::Sym(sym.clone());
    }
    match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => e.clone(),
        Expr::Pow(b, k) => Expr::Pow(Box::new(replace_bound(b, bound)), *k),
        Expr::Mul(ops) => Expr::Mul(ops.iter().map(|o| replace_bound(o, bound)).collect()),
        Expr::Add(ops) => Expr::Add(ops.iter().map(|o| replace_bound(o, bound)).collect()),
        Expr::Div(n, d) => Expr::Div(
            Box::new(replace_bound(n, bound)),
            Box::new(replace_bound(d, bound)),
        ),
        Expr::Deriv(_) => e.clone(),
    }
}

/// Bind every non-leaf subexpression that occurs at least twice within one
/// assignment (and costs at least one flop) to a temporary. Candidates are
/// processed bottom-up by height, ties in canonical order, so temporary
/// numbering is deterministic.
pub fn eliminate_common_subexpressions(set: &OptimizedExprSet) -> OptimizedExprSet {
    let mut out = set.clone();
    for ai in 0..out.assigns.len() {
        let mut counts = BTreeMap::new();
        for e in out.assigns[ai].clone().exprs() {
            count_subtrees(e, &mut counts);
        }
        let mut candidates: Vec<(usize, Expr)> = counts
            .into_iter()
            .filter(|(e, n)| *n >= 2 && flops_of(e) >= 1)
            .map(|(e, _)| (subtree_height(&e), e))
            .collect();
        candidates.sort();

        let mut bound: BTreeMap<Expr, Sym> = BTreeMap::new();
        let mut new_temps: Vec<(Sym, Expr)> = out.assigns[ai].temps.clone();
        for (_, cand) in candidates {
            let def = simplify(&replace_bound(&cand, &bound));
            let sym = out.fresh("t", |s| &mut s.temp_counter);
            new_temps.push((sym.clone(), def));
            bound.insert(cand, sym);
        }
        let assign = &mut out.assigns[ai];
        assign.temps = new_temps;
        assign.rhs = simplify(&replace_bound(&assign.rhs, &bound));
    }
    out
}

// ---------------------------------------------------------------------------
// Time-invariant hoisting
// ---------------------------------------------------------------------------

struct HoistCtx {
    /// Temp names already known to be time-invariant.
    invariant_syms: BTreeSet<Sym>,
    /// Fully inlined pre-hoist definitions of invariant temps, so hoisted
    /// expressions never reference per-point temporaries.
    inline_defs: BTreeMap<Sym, Expr>,
    /// Deduplicated hoists: expression -> replacement symbol/access.
    scalar_cache: BTreeMap<Expr, Sym>,
    field_cache: BTreeMap<Expr, Access>,
}

/// Substitute invariant temp symbols by their inlined definitions.
fn inline_syms(e: &Expr, defs: &BTreeMap<Sym, Expr>) -> Expr {
    match e {
        Expr::Sym(s) => defs.get(s).cloned().unwrap_or_else(|| e.clone()),
        Expr::Const(_) | Expr::Access(_) | Expr::Deriv(_) => e.clone(),
        Expr::Pow(b, k) => Expr::Pow(Box::new(inline_syms(b, defs)), *k),
        Expr::Mul(ops) => Expr::Mul(ops.iter().map(|o| inline_syms(o, defs)).collect()),
        Expr::Add(ops) => Expr::Add(ops.iter().map(|o| inline_syms(o, defs)).collect()),
        Expr::Div(n, d) => Expr::Div(
            Box::new(inline_syms(n, defs)),
            Box::new(inline_syms(d, defs)),
        ),
    }
}

fn is_invariant(e: &Expr, ctx: &HoistCtx, time_varying_blocked: &BTreeSet<Sym>) -> bool {
    match e {
        Expr::Const(_) => true,
        Expr::Sym(s) => !time_varying_blocked.contains(s) || ctx.invariant_syms.contains(s),
        Expr::Access(a) => !a.func.is_time_varying(),
        Expr::Pow(b, _) => is_invariant(b, ctx, time_varying_blocked),
        Expr::Mul(ops) | Expr::Add(ops) => {
            ops.iter().all(|o| is_invariant(o, ctx, time_varying_blocked))
        }
        Expr::Div(n, d) => {
            is_invariant(n, ctx, time_varying_blocked) && is_invariant(d, ctx, time_varying_blocked)
        }
        Expr::Deriv(_) => false,
    }
}

fn all_accesses_centered(e: &Expr) -> (bool, Option<Arc<FnMeta>>) {
    let mut centered = true;
    let mut widest: Option<Arc<FnMeta>> = None;
    e.for_each_access(&mut |a| {
        if a.idx.iter().any(|ix| matches!(ix, IndexExpr::Rel(o) if *o != 0)) {
            centered = false;
        }
        let better = match &widest {
            None => true,
            Some(w) => a.func.dims().len() > w.dims().len(),
        };
        if better {
            widest = Some(a.func.clone());
        }
    });
    (centered, widest)
}

fn has_access(e: &Expr) -> bool {
    let mut any = false;
    e.for_each_access(&mut |_| any = true);
    any
}

/// Hoist maximal invariant subexpressions: top-down, replacing a whole
/// invariant subtree rather than its parts. Only center-indexed accesses are
/// hoisted onto scratch fields so the precomputation can cover the full
/// extent.
fn hoist_expr(
    e: &Expr,
    set: &mut OptimizedExprSet,
    ctx: &mut HoistCtx,
    blocked: &BTreeSet<Sym>,
) -> Expr {
    if flops_of(e) >= 1 && is_invariant(e, ctx, blocked) {
        let inlined = simplify(&inline_syms(e, &ctx.inline_defs));
        if has_access(&inlined) {
            let (centered, widest) = all_accesses_centered(&inlined);
            if centered {
                if let Some(like) = widest {
                    if let Some(acc) = ctx.field_cache.get(&inlined) {
                        return Expr::Access(acc.clone());
                    }
                    let sym = set.fresh("q", |s| &mut s.hoist_counter);
                    let meta = FnMeta::scratch(sym.name(), &like);
                    let acc = Access {
                        func: meta.clone(),
                        time: None,
                        idx: vec![IndexExpr::Rel(0); meta.dims().len()],
                    };
                    set.hoisted_fields.push(HoistedField {
                        meta,
                        expr: inlined.clone(),
                    });
                    ctx.field_cache.insert(inlined, acc.clone());
                    return Expr::Access(acc);
                }
            }
            // Off-center invariant data: fall through and try the children.
        } else {
            if let Some(sym) = ctx.scalar_cache.get(&inlined) {
                return Expr::Sym(sym.clone());
            }
            let sym = set.fresh("c", |s| &mut s.hoist_counter);
            set.hoisted_scalars.push((sym.clone(), inlined.clone()));
            ctx.scalar_cache.insert(inlined, sym.clone());
            return Expr::Sym(sym);
        }
    }
    match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => e.clone(),
        Expr::Pow(b, k) => Expr::Pow(Box::new(hoist_expr(b, set, ctx, blocked)), *k),
        Expr::Mul(ops) => Expr::Mul(
            ops.iter()
                .map(|o| hoist_expr(o, set, ctx, blocked))
                .collect(),
        ),
        Expr::Add(ops) => Expr::Add(
            ops.iter()
                .map(|o| hoist_expr(o, set, ctx, blocked))
                .collect(),
        ),
        Expr::Div(n, d) => Expr::Div(
            Box::new(hoist_expr(n, set, ctx, blocked)),
            Box::new(hoist_expr(d, set, ctx, blocked)),
        ),
        Expr::Deriv(_) => e.clone(),
    }
}

/// Move maximal time-invariant subexpressions out of the time loop.
pub fn hoist_time_invariants(set: &OptimizedExprSet) -> OptimizedExprSet {
    let mut out = set.clone();
    let mut ctx = HoistCtx {
        invariant_syms: BTreeSet::new(),
        inline_defs: BTreeMap::new(),
        scalar_cache: BTreeMap::new(),
        field_cache: BTreeMap::new(),
    };

    // Temp symbols are only invariant if their definitions are; everything
    // else (spacing placeholders, model constants) resolves to a constant.
    let mut blocked: BTreeSet<Sym> = BTreeSet::new();
    for a in &out.assigns {
        for (sym, _) in &a.temps {
            blocked.insert(sym.clone());
        }
    }

    let assigns = std::mem::take(&mut out.assigns);
    let mut new_assigns = Vec::with_capacity(assigns.len());
    for a in assigns {
        let mut temps = Vec::with_capacity(a.temps.len());
        for (sym, def) in &a.temps {
            if is_invariant(def, &ctx, &blocked) {
                ctx.invariant_syms.insert(sym.clone());
                let inlined = simplify(&inline_syms(def, &ctx.inline_defs));
                ctx.inline_defs.insert(sym.clone(), inlined);
            }
            let new_def = hoist_expr(def, &mut out, &mut ctx, &blocked);
            temps.push((sym.clone(), simplify(&new_def)));
        }
        let rhs = simplify(&hoist_expr(&a.rhs, &mut out, &mut ctx, &blocked));
        new_assigns.push(Assign {
            temps,
            lhs: a.lhs,
            rhs,
        });
    }
    out.assigns = new_assigns;

    // A fully hoisted temp (def now a bare symbol/access) stays; it costs
    // nothing and keeps naming stable.
    out
}

// ---------------------------------------------------------------------------
// Weight factorization
// ---------------------------------------------------------------------------

/// Split one sum term into (coefficient, denominator, bare monomial).
fn term_parts(e: &Expr) -> (f64, Option<Expr>, Expr) {
    match e {
        Expr::Mul(ops) => match &ops[0] {
            Expr::Const(c) => {
                let rest = &ops[1..];
                let core = if rest.len() == 1 {
                    rest[0].clone()
                } else {
                    Expr::Mul(rest.to_vec())
                };
                (c.get(), None, core)
            }
            _ => (1.0, None, e.clone()),
        },
        Expr::Div(n, d) => {
            let (c, _, core) = term_parts(n);
            (c, Some((**d).clone()), core)
        }
        _ => (1.0, None, e.clone()),
    }
}

fn factorize_expr(e: &Expr) -> Expr {
    match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) | Expr::Deriv(_) => e.clone(),
        Expr::Pow(b, k) => Expr::Pow(Box::new(factorize_expr(b)), *k),
        Expr::Mul(ops) => Expr::Mul(ops.iter().map(factorize_expr).collect()),
        Expr::Div(n, d) => Expr::Div(
            Box::new(factorize_expr(n)),
            Box::new(factorize_expr(d)),
        ),
        Expr::Add(ops) => {
            let children: Vec<Expr> = ops.iter().map(factorize_expr).collect();
            let mut groups: BTreeMap<(R64, Option<Expr>), Vec<Expr>> = BTreeMap::new();
            for term in &children {
                let (c, den, core) = term_parts(term);
                groups.entry((R64::new(c), den)).or_default().push(core);
            }
            let mut terms: Vec<Expr> = Vec::new();
            for ((c, den), cores) in groups {
                let c = c.get();
                let grouped = if cores.len() >= 2 && c.abs() != 1.0 {
                    let inner = if cores.len() == 1 {
                        cores.into_iter().next().unwrap()
                    } else {
                        let mut sorted = cores;
                        sorted.sort();
                        Expr::Add(sorted)
                    };
                    let num = Expr::Mul(vec![Expr::num(c), inner]);
                    match den {
                        Some(d) => Expr::Div(Box::new(num), Box::new(d)),
                        None => num,
                    }
                } else {
                    // Rebuild singleton (or unit-coefficient) terms as they
                    // came in.
                    let mut rebuilt: Vec<Expr> = cores
                        .into_iter()
                        .map(|core| {
                            let num = if c == 1.0 {
                                core
                            } else {
                                Expr::Mul(vec![Expr::num(c), core])
                            };
                            match &den {
                                Some(d) => Expr::Div(Box::new(num), Box::new(d.clone())),
                                None => num,
                            }
                        })
                        .collect();
                    if rebuilt.len() == 1 {
                        rebuilt.pop().unwrap()
                    } else {
                        rebuilt.sort();
                        Expr::Add(rebuilt)
                    }
                };
                terms.push(grouped);
            }
            let mut flat: Vec<Expr> = Vec::new();
            for t in terms {
                match t {
                    Expr::Add(inner) => flat.extend(inner),
                    other => flat.push(other),
                }
            }
            // Keep the canonical sum order: constants first, then by the
            // coefficient-stripped term key.
            flat.sort_by_cached_key(|t| {
                if t.as_const().is_some() {
                    return None;
                }
                let (_, den, core) = term_parts(t);
                Some(match den {
                    Some(d) => Expr::Div(Box::new(core), Box::new(d)),
                    None => core,
                })
            });
            match flat.len() {
                1 => flat.pop().unwrap(),
                _ => Expr::Add(flat),
            }
        }
    }
}

/// Group sum terms sharing a numeric coefficient (and denominator) so the
/// shared weight multiplies the grouped sum once.
pub fn factorize_weights(set: &OptimizedExprSet) -> OptimizedExprSet {
    let mut out = set.clone();
    for a in &mut out.assigns {
        for (_, def) in &mut a.temps {
            *def = factorize_expr(def);
        }
        a.rhs = factorize_expr(&a.rhs);
    }
    for hf in &mut out.hoisted_fields {
        hf.expr = factorize_expr(&hf.expr);
    }
    out
}

// ---------------------------------------------------------------------------
// Flop accounting
// ---------------------------------------------------------------------------

/// Per-point operation counts and the perfect-cache traffic model: every
/// distinct array read or written counts its element size once per point.
#[derive(Clone, Debug, Serialize)]
pub struct FlopReport {
    pub adds: usize,
    pub muls: usize,
    pub divs: usize,
    pub flops: usize,
    pub bytes: usize,
    pub oi: f64,
    /// One-off cost of hoisted precomputations (not part of `flops`).
    #[serde(skip)]
    pub hoisted_flops: usize,
}

struct OpCounts {
    adds: usize,
    muls: usize,
    divs: usize,
}

/// Counts operations with the sign conventions the execution tape uses:
/// a leading `-1` coefficient is a negation (one add-class op), negative
/// non-leading sum terms fold into subtractions, other coefficients cost one
/// multiply regardless of sign.
fn count_ops(e: &Expr, neg_handled: bool, c: &mut OpCounts) {
    match e {
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => {}
        Expr::Pow(b, k) => {
            count_ops(b, false, c);
            c.muls += (*k as usize).saturating_sub(1);
        }
        Expr::Mul(ops) => {
            let (coeff, rest): (f64, &[Expr]) = match &ops[0] {
                Expr::Const(k) => (k.get(), &ops[1..]),
                _ => (1.0, &ops[..]),
            };
            for op in rest {
                count_ops(op, false, c);
            }
            c.muls += rest.len().saturating_sub(1);
            if coeff.abs() != 1.0 {
                c.muls += 1;
            }
            if coeff < 0.0 && !neg_handled {
                c.adds += 1;
            }
        }
        Expr::Div(n, d) => {
            count_ops(n, neg_handled, c);
            count_ops(d, false, c);
            c.divs += 1;
        }
        Expr::Add(ops) => {
            c.adds += ops.len() - 1;
            for (i, op) in ops.iter().enumerate() {
                // Non-leading negative terms become subtractions.
                count_ops(op, i > 0, c);
            }
        }
        Expr::Deriv(_) => panic!("flop counting requires discretized input"),
    }
}

fn flops_of(e: &Expr) -> usize {
    let mut c = OpCounts {
        adds: 0,
        muls: 0,
        divs: 0,
    };
    count_ops(e, false, &mut c);
    c.adds + c.muls + c.divs
}

/// Count per-point work of the main loop (temporaries plus assignments;
/// hoisted precomputations reported separately).
pub fn flop_count(set: &OptimizedExprSet, elem_bytes: usize) -> FlopReport {
    let mut c = OpCounts {
        adds: 0,
        muls: 0,
        divs: 0,
    };
    let mut arrays: BTreeSet<(String, Option<i32>)> = BTreeSet::new();
    for a in &set.assigns {
        for e in a.exprs() {
            count_ops(e, false, &mut c);
            e.for_each_access(&mut |acc| {
                arrays.insert((acc.name().to_string(), acc.time));
            });
        }
        arrays.insert((a.lhs.name().to_string(), a.lhs.time));
    }
    let mut hoisted = OpCounts {
        adds: 0,
        muls: 0,
        divs: 0,
    };
    for (_, e) in &set.hoisted_scalars {
        count_ops(e, false, &mut hoisted);
    }
    for hf in &set.hoisted_fields {
        count_ops(&hf.expr, false, &mut hoisted);
    }

    let flops = c.adds + c.muls + c.divs;
    let bytes = arrays.len() * elem_bytes;
    FlopReport {
        adds: c.adds,
        muls: c.muls,
        divs: c.divs,
        flops,
        bytes,
        oi: flops as f64 / bytes as f64,
        hoisted_flops: hoisted.adds + hoisted.muls + hoisted.divs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{eval_naive, solve_linear, Equation};
    use crate::fd::expand_derivatives;
    use crate::grid::Grid;
    use std::collections::HashMap;

    fn target(e: &Expr) -> Access {
        match e {
            Expr::Access(a) => a.clone(),
            _ => panic!("expected access"),
        }
    }

    /// Evaluate one optimized assignment at a single conceptual point,
    /// resolving hoisted values and temporaries in order.
    fn eval_assign(
        set: &OptimizedExprSet,
        idx: usize,
        scalars: &BTreeMap<Sym, f64>,
        base: &mut dyn FnMut(&Access) -> f64,
    ) -> f64 {
        let mut scal = scalars.clone();
        let mut field_vals: BTreeMap<String, f64> = BTreeMap::new();
        for (sym, e) in &set.hoisted_scalars {
            let v = eval_naive(e, &scal, base);
            scal.insert(sym.clone(), v);
        }
        for hf in &set.hoisted_fields {
            let v = eval_naive(&hf.expr, &scal, base);
            field_vals.insert(hf.meta.name().to_string(), v);
        }
        let mut wrapped = |a: &Access| match field_vals.get(a.name()) {
            Some(v) => *v,
            None => base(a),
        };
        let assign = &set.assigns[idx];
        for (sym, e) in &assign.temps {
            let v = eval_naive(e, &scal, &mut wrapped);
            scal.insert(sym.clone(), v);
        }
        eval_naive(&assign.rhs, &scal, &mut wrapped)
    }

    fn acoustic_update(order: u32) -> (Equation, BTreeMap<Sym, f64>) {
        let grid = Grid::regular(&[61, 61], 1.0);
        let u = grid.time_function::<f64>("u", 2, order);
        let m = grid.function::<f64>("m", order);
        let eta = grid.function::<f64>("eta", order);
        let eqn = m.at() * u.dt2() - u.laplace() + eta.at() * u.dt();
        let discrete = expand_derivatives(&eqn).unwrap();
        let stencil = solve_linear(&Equation::zero(discrete), &u.forward_access()).unwrap();
        let mut subs = BTreeMap::new();
        subs.insert(Sym::new("h"), 1.5);
        subs.insert(Sym::new("s"), 0.25);
        (Equation::new(u.forward(), stencil), subs)
    }

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed | 1;
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.2 + (state % 10_000) as f64 / 5_000.0
        }
    }

    fn check_equivalent(
        a: &OptimizedExprSet,
        b: &OptimizedExprSet,
        scalars: &BTreeMap<Sym, f64>,
        trials: usize,
        seed: u64,
    ) {
        let mut next = rng(seed);
        for _ in 0..trials {
            let mut cache: HashMap<String, f64> = HashMap::new();
            for idx in 0..a.assigns.len() {
                let va = {
                    let mut base = |acc: &Access| *cache.entry(format!("{acc}")).or_insert_with(&mut next);
                    eval_assign(a, idx, scalars, &mut base)
                };
                let vb = {
                    let mut base = |acc: &Access| *cache.entry(format!("{acc}")).or_insert_with(&mut next);
                    eval_assign(b, idx, scalars, &mut base)
                };
                let scale = va.abs().max(vb.abs()).max(1.0);
                assert!(
                    (va - vb).abs() / scale <= 1e-12,
                    "assignment {idx}: {va} vs {vb}"
                );
            }
        }
    }

    #[test]
    fn cse_binds_repeated_subexpression() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let out = grid.function::<f64>("out", 2);
        let a = Expr::sym("a");
        let b = Expr::sym("b");
        let eq = Equation::new(out.at(), (a.clone() + b.clone()) * (a + b));
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let opt = eliminate_common_subexpressions(&set);
        assert_eq!(opt.assigns[0].temps.len(), 1);
        let (t0, def) = &opt.assigns[0].temps[0];
        assert_eq!(t0.name(), "t0");
        assert_eq!(*def, simplify(&(Expr::sym("a") + Expr::sym("b"))));
        assert_eq!(
            opt.assigns[0].rhs,
            Expr::Pow(Box::new(Expr::Sym(t0.clone())), 2)
        );
        // 2 flops after (one add, one multiply), down from 3 in the raw tree.
        let report = flop_count(&opt, 8);
        assert_eq!((report.adds, report.muls), (1, 1));
    }

    #[test]
    fn cse_leaves_unrepeated_sums_alone() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let out = grid.function::<f64>("out", 2);
        let eq = Equation::new(out.at(), Expr::sym("x") + Expr::sym("y"));
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let opt = eliminate_common_subexpressions(&set);
        assert!(opt.assigns[0].temps.is_empty());
        assert_eq!(opt.assigns[0].rhs, set.assigns[0].rhs);
    }

    #[test]
    fn cse_preserves_acoustic_update() {
        let (eq, subs) = acoustic_update(2);
        let raw = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let opt = eliminate_common_subexpressions(&raw);
        let before = flop_count(&raw, 8).flops;
        let after = flop_count(&opt, 8).flops;
        assert!(after <= before, "CSE grew flops: {before} -> {after}");
        check_equivalent(&raw, &opt, &subs, 20, 0xA11CE);
    }

    #[test]
    fn hoist_moves_grid_invariants_to_scratch_fields() {
        let grid = Grid::regular(&[9, 9], 1.0);
        let u = grid.time_function::<f64>("u", 1, 2);
        let m = grid.function::<f64>("m", 2);
        let s = Expr::sym("s");
        // An additive s^2/m source-scaling term survives as a subtree and
        // hoists onto a grid-shaped scratch buffer.
        let rhs = u.at() + s.clone().pow(2) / m.at();
        let eq = Equation::new(u.forward(), rhs);
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let hoisted = hoist_time_invariants(&set);
        assert_eq!(hoisted.hoisted_fields.len(), 1);
        let hf = &hoisted.hoisted_fields[0];
        assert_eq!(hf.meta.name(), "q0");
        assert_eq!(hf.expr, simplify(&(Expr::sym("s").pow(2) / m.at())));
        let mut subs = BTreeMap::new();
        subs.insert(Sym::new("s"), 0.3);
        check_equivalent(&set, &hoisted, &subs, 20, 0xB0B);
        let before = flop_count(&set, 8).flops;
        let after = flop_count(&hoisted, 8).flops;
        assert!(after < before, "hoist must cut main-loop flops");
    }

    #[test]
    fn hoist_keeps_pure_scalars_off_the_grid() {
        let grid = Grid::regular(&[9, 9], 1.0);
        let u = grid.time_function::<f64>("u", 1, 2);
        let s = Expr::sym("s");
        let eq = Equation::new(u.forward(), u.at() * s.clone() * s);
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let hoisted = hoist_time_invariants(&set);
        assert!(hoisted.hoisted_fields.is_empty());
        assert_eq!(hoisted.hoisted_scalars.len(), 1);
        let (sym, def) = &hoisted.hoisted_scalars[0];
        assert_eq!(sym.name(), "c0");
        assert_eq!(*def, Expr::sym("s").pow(2));
    }

    #[test]
    fn hoist_skips_time_varying_expressions() {
        let grid = Grid::regular(&[9, 9], 1.0);
        let u = grid.time_function::<f64>("u", 1, 2);
        let eq = Equation::new(u.forward(), u.at() * u.at() + u.at());
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let hoisted = hoist_time_invariants(&set);
        assert!(hoisted.hoisted_fields.is_empty());
        assert!(hoisted.hoisted_scalars.is_empty());
        assert_eq!(hoisted.assigns[0].rhs, set.assigns[0].rhs);
    }

    #[test]
    fn factorize_groups_shared_weights() {
        let a = Expr::sym("a");
        let b = Expr::sym("b");
        let grid = Grid::regular(&[5, 5], 1.0);
        let out = grid.function::<f64>("out", 2);
        let eq = Equation::new(out.at(), 0.5 * a + 0.5 * b);
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let before = flop_count(&set, 8);
        let fact = factorize_weights(&set);
        let after = flop_count(&fact, 8);
        assert_eq!(before.muls, 2);
        assert_eq!(after.muls, 1);
        assert_eq!(
            fact.assigns[0].rhs,
            Expr::Mul(vec![
                Expr::num(0.5),
                Expr::Add(vec![Expr::sym("a"), Expr::sym("b")])
            ])
        );
    }

    #[test]
    fn factorize_leaves_distinct_weights() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let out = grid.function::<f64>("out", 2);
        let eq = Equation::new(
            out.at(),
            0.5 * Expr::sym("a") + 0.25 * Expr::sym("b") + 0.125 * Expr::sym("d"),
        );
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let fact = factorize_weights(&set);
        assert_eq!(fact.assigns[0].rhs, set.assigns[0].rhs);
    }

    #[test]
    fn factorize_order4_laplacian_weights() {
        let grid = Grid::regular(&[31, 31], 1.0);
        let pn = grid.function::<f64>("pn", 4);
        let lap = expand_derivatives(&pn.laplace()).unwrap();
        let out = grid.function::<f64>("out", 2);
        let eq = Equation::new(out.at(), lap);
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let before = flop_count(&set, 8);
        let fact = factorize_weights(&set);
        let after = flop_count(&fact, 8);
        // Nine weighted terms (each paying its coefficient and its h**2)
        // collapse into the 4/3 group, the -1/12 group and the center term.
        assert_eq!(before.muls, 18);
        assert_eq!(before.divs, 9);
        assert_eq!(after.muls, 6);
        assert_eq!(after.divs, 3);
        assert_eq!(before.adds, after.adds);
        let mut subs = BTreeMap::new();
        subs.insert(Sym::new("h"), 0.7);
        check_equivalent(&set, &fact, &subs, 20, 0xFAC70);
    }

    #[test]
    fn flop_count_examples() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let out = grid.function::<f64>("out", 2);
        let eq = Equation::new(out.at(), Expr::sym("a") + Expr::sym("b"));
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let r = flop_count(&set, 8);
        assert_eq!((r.adds, r.muls, r.divs), (1, 0, 0));

        // Jacobi update with the 1/4 weight folded: three adds, one multiply.
        let pn = grid.function::<f64>("pn", 2);
        let discrete = expand_derivatives(&pn.dx2().clone()).unwrap()
            + expand_derivatives(&pn.dy2()).unwrap();
        let center = target(&pn.at());
        let stencil = solve_linear(&Equation::zero(discrete), &center).unwrap();
        let p = grid.function::<f64>("p", 2);
        let set =
            OptimizedExprSet::from_equations(&[Equation::new(p.at(), stencil)]).unwrap();
        let r = flop_count(&set, 8);
        assert_eq!((r.adds, r.muls, r.divs), (3, 1, 0));
        // Two arrays touched per point: pn read, p written.
        assert_eq!(r.bytes, 16);
        assert!((r.oi - 4.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn flop_report_serializes_with_fixed_keys() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let out = grid.function::<f64>("out", 2);
        let eq = Equation::new(out.at(), Expr::sym("a") + Expr::sym("b"));
        let set = OptimizedExprSet::from_equations(&[eq]).unwrap();
        let json = serde_json::to_string(&flop_count(&set, 8)).unwrap();
        assert_eq!(
            json,
            r#"{"adds":1,"muls":0,"divs":0,"flops":1,"bytes":8,"oi":0.125}"#
        );
    }

    #[test]
    fn advanced_pipeline_is_deterministic_and_monotone() {
        let (eq, subs) = acoustic_update(4);
        let raw = OptimizedExprSet::from_equations(std::slice::from_ref(&eq)).unwrap();
        let once = optimize(std::slice::from_ref(&eq), DseLevel::Advanced).unwrap();
        let twice = optimize(std::slice::from_ref(&eq), DseLevel::Advanced).unwrap();
        assert_eq!(once.assigns[0].rhs, twice.assigns[0].rhs);
        assert_eq!(once.assigns[0].temps, twice.assigns[0].temps);
        assert_eq!(once.hoisted_scalars, twice.hoisted_scalars);
        assert_eq!(
            once.hoisted_fields.iter().map(|h| &h.expr).collect::<Vec<_>>(),
            twice.hoisted_fields.iter().map(|h| &h.expr).collect::<Vec<_>>()
        );

        let basic = optimize(std::slice::from_ref(&eq), DseLevel::Basic).unwrap();
        let f_raw = flop_count(&raw, 8).flops;
        let f_basic = flop_count(&basic, 8).flops;
        let f_adv = flop_count(&once, 8).flops;
        assert!(f_basic <= f_raw);
        assert!(f_adv < f_basic, "advanced must cut flops: {f_adv} vs {f_basic}");

        check_equivalent(&raw, &once, &subs, 20, 0xCAFE);
        check_equivalent(&raw, &basic, &subs, 20, 0xBEEF);
    }
}

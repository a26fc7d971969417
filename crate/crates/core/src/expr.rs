//! Immutable symbolic expressions.
//!
//! Expressions are plain trees with value semantics. `simplify` rewrites a
//! tree into a canonical form: constants folded, sums and products flattened,
//! operands sorted into a deterministic order (constants first, then symbols
//! and grid accesses by name and index), like terms collected, and divisions
//! by a constant folded into multiplications. Canonical form makes structural
//! equality meaningful, which the CSE pass and golden-file code generation
//! rely on.
//!
//! Division stays an explicit node; there is no general rational normal form.
//! `solve_linear` is the one place that distributes products over sums and
//! recombines terms over a common denominator, because rearranging an
//! equation into an explicit update requires it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::FnMeta;

/// Wrapper giving `f64` total equality/ordering/hashing for use in trees.
#[derive(Clone, Copy, Debug)]
pub struct R64(f64);

impl R64 {
    pub fn new(v: f64) -> Self {
        // Normalize -0.0 so x + (-0.0) and x hash identically.
        R64(if v == 0.0 { 0.0 } else { v })
    }
    pub fn get(self) -> f64 {
        self.0
    }
}

impl PartialEq for R64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}
impl Eq for R64 {}
impl PartialOrd for R64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for R64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl std::hash::Hash for R64 {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

/// A named scalar symbol (spacing placeholders, model constants, temporaries).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sym(pub Arc<str>);

impl Sym {
    pub fn new(name: &str) -> Self {
        Sym(Arc::from(name))
    }
    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Spacing placeholder for all space dimensions (resolved at schedule time).
pub fn space_spacing() -> Sym {
    Sym::new("h")
}

/// Spacing placeholder for the time dimension (resolved at schedule time).
pub fn time_spacing() -> Sym {
    Sym::new("s")
}

/// One index of a grid access: an offset from the iteration point or a fixed
/// coordinate (the low-level "indexed" form used for boundary conditions).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum IndexExpr {
    Rel(i32),
    Abs(i64),
}

/// Axis selector for derivatives and shifts.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Axis {
    Time,
    Space(usize),
}

/// Finite-difference flavor of a first/higher derivative.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Side {
    Left,
    Right,
    Centered,
}

/// A reference to one point of a grid function, relative to the iteration
/// point (`Rel`) or pinned (`Abs`). Time-varying functions carry an extra
/// relative time index.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Access {
    pub func: Arc<FnMeta>,
    pub time: Option<i32>,
    pub idx: Vec<IndexExpr>,
}

impl Access {
    pub fn name(&self) -> &str {
        self.func.name()
    }
}

/// An unexpanded derivative; replaced by an indexed stencil during
/// discretization and rejected by all later passes.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Deriv {
    pub arg: Box<Expr>,
    pub axis: Axis,
    pub order: u32,
    pub side: Side,
    pub accuracy: u32,
}

/// Symbolic expression tree. Variant declaration order defines the canonical
/// sort order (constants first).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expr {
    Const(R64),
    Sym(Sym),
    Access(Access),
    Pow(Box<Expr>, u32),
    Mul(Vec<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Add(Vec<Expr>),
    Deriv(Deriv),
}

/// An equation `lhs = rhs`. For executable assignments the lhs must be a
/// single grid access.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Equation {
    pub lhs: Expr,
    pub rhs: Expr,
}

impl Equation {
    pub fn new(lhs: Expr, rhs: Expr) -> Self {
        Equation { lhs, rhs }
    }
    /// Equation with implicit zero right-hand side.
    pub fn zero(lhs: Expr) -> Self {
        Equation {
            lhs,
            rhs: Expr::num(0.0),
        }
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Const(R64::new(v))
    }
    pub fn sym(name: &str) -> Expr {
        Expr::Sym(Sym::new(name))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(c.get()),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn pow(self, exp: u32) -> Expr {
        Expr::Pow(Box::new(self), exp)
    }

    /// True if `sub` occurs anywhere in `self` (structural match).
    pub fn contains(&self, sub: &Expr) -> bool {
        if self == sub {
            return true;
        }
        match self {
            Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => false,
            Expr::Pow(b, _) => b.contains(sub),
            Expr::Mul(ops) | Expr::Add(ops) => ops.iter().any(|o| o.contains(sub)),
            Expr::Div(n, d) => n.contains(sub) || d.contains(sub),
            Expr::Deriv(d) => d.arg.contains(sub),
        }
    }

    pub fn contains_deriv(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => false,
            Expr::Pow(b, _) => b.contains_deriv(),
            Expr::Mul(ops) | Expr::Add(ops) => ops.iter().any(|o| o.contains_deriv()),
            Expr::Div(n, d) => n.contains_deriv() || d.contains_deriv(),
            Expr::Deriv(_) => true,
        }
    }

    /// Walk all grid accesses in the tree.
    pub fn for_each_access<'a>(&'a self, f: &mut impl FnMut(&'a Access)) {
        match self {
            Expr::Const(_) | Expr::Sym(_) => {}
            Expr::Access(a) => f(a),
            Expr::Pow(b, _) => b.for_each_access(f),
            Expr::Mul(ops) | Expr::Add(ops) => {
                for o in ops {
                    o.for_each_access(f)
                }
            }
            Expr::Div(n, d) => {
                n.for_each_access(f);
                d.for_each_access(f);
            }
            Expr::Deriv(d) => d.arg.for_each_access(f),
        }
    }
}

// Operator sugar builds raw nodes; canonical form is produced by `simplify`.
impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Add(vec![self, rhs])
    }
}
impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Add(vec![self, Expr::Mul(vec![Expr::num(-1.0), rhs])])
    }
}
impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Mul(vec![self, rhs])
    }
}
impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Div(Box::new(self), Box::new(rhs))
    }
}
impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Mul(vec![Expr::num(-1.0), self])
    }
}
impl std::ops::Mul<Expr> for f64 {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Mul(vec![Expr::num(self), rhs])
    }
}
impl std::ops::Add<Expr> for f64 {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Add(vec![Expr::num(self), rhs])
    }
}

// ---------------------------------------------------------------------------
// Canonical constructors
// ---------------------------------------------------------------------------

/// Builds the canonical product `Π nums / Π dens` from canonical operands.
/// Constants fold into a single leading coefficient, nested products and
/// divisions are flattened, and repeated factors combine into powers.
fn product(nums: Vec<Expr>, dens: Vec<Expr>) -> Expr {
    let mut coeff = 1.0f64;
    let mut num_pows: BTreeMap<Expr, u32> = BTreeMap::new();
    let mut den_pows: BTreeMap<Expr, u32> = BTreeMap::new();

    // (expr, power, inverted)
    let mut queue: Vec<(Expr, u32, bool)> = Vec::new();
    queue.extend(nums.into_iter().map(|e| (e, 1, false)));
    queue.extend(dens.into_iter().map(|e| (e, 1, true)));

    while let Some((e, p, inv)) = queue.pop() {
        match e {
            Expr::Const(c) => {
                let v = c.get().powi(p as i32);
                if inv {
                    coeff /= v;
                } else {
                    coeff *= v;
                }
            }
            Expr::Mul(ops) => queue.extend(ops.into_iter().map(|o| (o, p, inv))),
            Expr::Div(n, d) => {
                queue.push((*n, p, inv));
                queue.push((*d, p, !inv));
            }
            Expr::Pow(b, k) => queue.push((*b, p * k, inv)),
            other => {
                let map = if inv { &mut den_pows } else { &mut num_pows };
                *map.entry(other).or_insert(0) += p;
            }
        }
    }

    if coeff == 0.0 {
        return Expr::num(0.0);
    }

    let assemble = |coeff: Option<f64>, pows: &BTreeMap<Expr, u32>| -> Expr {
        let mut factors: Vec<Expr> = Vec::new();
        if let Some(c) = coeff {
            if c != 1.0 {
                factors.push(Expr::num(c));
            }
        }
        for (base, p) in pows {
            factors.push(match p {
                0 => continue,
                1 => base.clone(),
                _ => Expr::Pow(Box::new(base.clone()), *p),
            });
        }
        match factors.len() {
            0 => Expr::num(coeff.unwrap_or(1.0)),
            1 => factors.pop().unwrap(),
            _ => Expr::Mul(factors),
        }
    };

    let num = assemble(Some(coeff), &num_pows);
    if den_pows.is_empty() {
        num
    } else {
        Expr::Div(Box::new(num), Box::new(assemble(None, &den_pows)))
    }
}

/// A term of a sum split into its numeric coefficient and the remaining key
/// expression (`None` for pure constants). Sharing a key means the terms can
/// be collected.
pub(crate) fn decompose(e: &Expr) -> (f64, Option<Expr>) {
    match e {
        Expr::Const(c) => (c.get(), None),
        Expr::Mul(ops) => {
            if let Expr::Const(c) = &ops[0] {
                let rest = &ops[1..];
                let key = if rest.len() == 1 {
                    rest[0].clone()
                } else {
                    Expr::Mul(rest.to_vec())
                };
                (c.get(), Some(key))
            } else {
                (1.0, Some(e.clone()))
            }
        }
        Expr::Div(n, d) => {
            let (c, key) = decompose(n);
            let num = key.unwrap_or_else(|| Expr::num(1.0));
            (c, Some(Expr::Div(Box::new(num), d.clone())))
        }
        _ => (1.0, Some(e.clone())),
    }
}

/// Reattach a coefficient to a term key. Inverse of `decompose` up to
/// canonical form.
pub(crate) fn recompose(coeff: f64, key: Expr) -> Expr {
    if coeff == 1.0 {
        return key;
    }
    match key {
        Expr::Div(n, d) => {
            let num = if let Some(1.0) = n.as_const() {
                Expr::num(coeff)
            } else {
                product(vec![Expr::num(coeff), *n], vec![])
            };
            Expr::Div(Box::new(num), d)
        }
        other => product(vec![Expr::num(coeff), other], vec![]),
    }
}

/// Builds the canonical sum of canonical operands: flattens nested sums,
/// folds constants, collects like terms and sorts by term key.
fn sum(ops: Vec<Expr>) -> Expr {
    let mut const_sum = 0.0f64;
    let mut terms: BTreeMap<Expr, f64> = BTreeMap::new();

    let mut queue = ops;
    while let Some(e) = queue.pop() {
        match e {
            Expr::Add(inner) => queue.extend(inner),
            other => {
                let (c, key) = decompose(&other);
                match key {
                    None => const_sum += c,
                    Some(k) => *terms.entry(k).or_insert(0.0) += c,
                }
            }
        }
    }

    let mut out: Vec<Expr> = Vec::new();
    if const_sum != 0.0 {
        out.push(Expr::num(const_sum));
    }
    for (key, coeff) in terms {
        if coeff == 0.0 {
            continue;
        }
        out.push(recompose(coeff, key));
    }
    match out.len() {
        0 => Expr::num(0.0),
        1 => out.pop().unwrap(),
        _ => Expr::Add(out),
    }
}

fn pow_make(base: Expr, exp: u32) -> Expr {
    match exp {
        0 => Expr::num(1.0),
        1 => base,
        _ => match base {
            Expr::Const(c) => Expr::num(c.get().powi(exp as i32)),
            Expr::Pow(b, k) => pow_make(*b, k * exp),
            Expr::Mul(_) | Expr::Div(_, _) => product(vec![Expr::Pow(Box::new(base), exp)], vec![]),
            other => Expr::Pow(Box::new(other), exp),
        },
    }
}

/// Canonical simplification. Numerically equivalent to the input under exact
/// arithmetic; idempotent.
pub fn simplify(e: &Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::num(c.get()),
        Expr::Sym(_) | Expr::Access(_) => e.clone(),
        Expr::Pow(b, k) => pow_make(simplify(b), *k),
        Expr::Mul(ops) => product(ops.iter().map(simplify).collect(), vec![]),
        Expr::Div(n, d) => product(vec![simplify(n)], vec![simplify(d)]),
        Expr::Add(ops) => sum(ops.iter().map(simplify).collect()),
        Expr::Deriv(d) => Expr::Deriv(Deriv {
            arg: Box::new(simplify(&d.arg)),
            ..d.clone()
        }),
    }
}

/// Replaces mapped scalar symbols by constants, then simplifies. Unmapped
/// symbols pass through.
pub fn substitute(e: &Expr, map: &BTreeMap<Sym, f64>) -> Expr {
    fn replace(e: &Expr, map: &BTreeMap<Sym, f64>) -> Expr {
        match e {
            Expr::Sym(s) => match map.get(s) {
                Some(v) => Expr::num(*v),
                None => e.clone(),
            },
            Expr::Const(_) | Expr::Access(_) => e.clone(),
            Expr::Pow(b, k) => Expr::Pow(Box::new(replace(b, map)), *k),
            Expr::Mul(ops) => Expr::Mul(ops.iter().map(|o| replace(o, map)).collect()),
            Expr::Add(ops) => Expr::Add(ops.iter().map(|o| replace(o, map)).collect()),
            Expr::Div(n, d) => {
                Expr::Div(Box::new(replace(n, map)), Box::new(replace(d, map)))
            }
            Expr::Deriv(d) => Expr::Deriv(Deriv {
                arg: Box::new(replace(&d.arg, map)),
                ..d.clone()
            }),
        }
    }
    simplify(&replace(e, map))
}

/// Free scalar symbols and grid functions of an expression.
#[derive(Default, Clone)]
pub struct FreeSet {
    pub scalars: BTreeSet<Sym>,
    pub functions: BTreeMap<Arc<str>, Arc<FnMeta>>,
}

impl FreeSet {
    pub fn names(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.scalars.iter().map(|s| s.name().into()).collect();
        out.extend(self.functions.keys().map(|k| k.to_string()));
        out
    }
    pub fn merge(&mut self, other: FreeSet) {
        self.scalars.extend(other.scalars);
        self.functions.extend(other.functions);
    }
}

pub fn free_symbols(e: &Expr) -> FreeSet {
    fn walk(e: &Expr, out: &mut FreeSet) {
        match e {
            Expr::Const(_) => {}
            Expr::Sym(s) => {
                out.scalars.insert(s.clone());
            }
            Expr::Access(a) => {
                out.functions
                    .insert(Arc::from(a.name()), a.func.clone());
            }
            Expr::Pow(b, _) => walk(b, out),
            Expr::Mul(ops) | Expr::Add(ops) => ops.iter().for_each(|o| walk(o, out)),
            Expr::Div(n, d) => {
                walk(n, out);
                walk(d, out);
            }
            Expr::Deriv(d) => walk(&d.arg, out),
        }
    }
    let mut out = FreeSet::default();
    walk(e, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Linear solve
// ---------------------------------------------------------------------------

type Pows = BTreeMap<Expr, u32>;

/// One fully distributed term: `coeff · Π num / Π den`.
#[derive(Clone)]
struct Term {
    coeff: f64,
    num: Pows,
    den: Pows,
}

impl Term {
    fn constant(c: f64) -> Term {
        Term {
            coeff: c,
            num: Pows::new(),
            den: Pows::new(),
        }
    }
    fn factor(e: Expr) -> Term {
        let mut num = Pows::new();
        num.insert(e, 1);
        Term {
            coeff: 1.0,
            num,
            den: Pows::new(),
        }
    }
    fn mul(&self, other: &Term) -> Term {
        let mut out = self.clone();
        out.coeff *= other.coeff;
        for (f, p) in &other.num {
            *out.num.entry(f.clone()).or_insert(0) += p;
        }
        for (f, p) in &other.den {
            *out.den.entry(f.clone()).or_insert(0) += p;
        }
        out
    }
    /// Remove factors common to numerator and denominator of this term.
    fn cancel(&mut self) {
        let keys: Vec<Expr> = self.num.keys().cloned().collect();
        for k in keys {
            if let Some(dp) = self.den.get(&k).copied() {
                let np = self.num[&k];
                let c = np.min(dp);
                sub_pow(&mut self.num, &k, c);
                sub_pow(&mut self.den, &k, c);
            }
        }
    }
}

fn sub_pow(map: &mut Pows, key: &Expr, by: u32) {
    if by == 0 {
        return;
    }
    let p = map.get_mut(key).expect("factor present");
    *p -= by;
    if *p == 0 {
        map.remove(key);
    }
}

/// Distribute an expression into a flat list of terms. Products expand over
/// sums; multi-term divisors stay as opaque denominator factors.
fn distribute(e: &Expr) -> Vec<Term> {
    match e {
        Expr::Const(c) => vec![Term::constant(c.get())],
        Expr::Sym(_) | Expr::Access(_) | Expr::Deriv(_) => vec![Term::factor(e.clone())],
        Expr::Add(ops) => ops.iter().flat_map(distribute).collect(),
        Expr::Mul(ops) => {
            let mut acc = vec![Term::constant(1.0)];
            for op in ops {
                let rhs = distribute(op);
                let mut next = Vec::with_capacity(acc.len() * rhs.len());
                for a in &acc {
                    for b in &rhs {
                        next.push(a.mul(b));
                    }
                }
                acc = next;
            }
            acc
        }
        Expr::Div(n, d) => {
            let nt = distribute(n);
            let dt = distribute(d);
            let inv = if dt.len() == 1 {
                let t = &dt[0];
                Term {
                    coeff: 1.0 / t.coeff,
                    num: t.den.clone(),
                    den: t.num.clone(),
                }
            } else {
                Term {
                    coeff: 1.0,
                    num: Pows::new(),
                    den: {
                        let mut m = Pows::new();
                        m.insert((**d).clone(), 1);
                        m
                    },
                }
            };
            nt.iter().map(|t| t.mul(&inv)).collect()
        }
        Expr::Pow(b, k) => {
            let bt = distribute(b);
            if bt.len() == 1 {
                let t = &bt[0];
                let mut out = Term::constant(t.coeff.powi(*k as i32));
                for (f, p) in &t.num {
                    out.num.insert(f.clone(), p * k);
                }
                for (f, p) in &t.den {
                    out.den.insert(f.clone(), p * k);
                }
                vec![out]
            } else if *k <= 4 {
                let mut acc = vec![Term::constant(1.0)];
                for _ in 0..*k {
                    let mut next = Vec::new();
                    for a in &acc {
                        for b in &bt {
                            next.push(a.mul(b));
                        }
                    }
                    acc = next;
                }
                acc
            } else {
                vec![Term::factor(e.clone())]
            }
        }
    }
}

/// Combine terms over a common denominator: returns numerator terms (with
/// empty denominators) and the shared denominator factor powers. Common
/// monomial content between all numerator terms and the denominator is
/// cancelled.
fn combine(mut terms: Vec<Term>) -> (Vec<Term>, Pows) {
    for t in &mut terms {
        t.cancel();
    }
    // Least common multiple of the denominators, factor by factor.
    let mut lcm = Pows::new();
    for t in &terms {
        for (f, p) in &t.den {
            let e = lcm.entry(f.clone()).or_insert(0);
            *e = (*e).max(*p);
        }
    }
    for t in &mut terms {
        let den = std::mem::take(&mut t.den);
        for (f, lp) in &lcm {
            let have = den.get(f).copied().unwrap_or(0);
            if *lp > have {
                *t.num.entry(f.clone()).or_insert(0) += lp - have;
            }
        }
    }
    // Cancel content shared by every numerator term against the denominator.
    let content: Vec<(Expr, u32)> = lcm
        .iter()
        .filter_map(|(f, lp)| {
            let m = terms
                .iter()
                .map(|t| t.num.get(f).copied().unwrap_or(0))
                .min()
                .unwrap_or(0);
            let c = m.min(*lp);
            (c > 0).then(|| (f.clone(), c))
        })
        .collect();
    for (f, c) in content {
        for t in &mut terms {
            sub_pow(&mut t.num, &f, c);
        }
        sub_pow(&mut lcm, &f, c);
    }
    (terms, lcm)
}

fn rebuild_pows(pows: &Pows) -> Vec<Expr> {
    pows.iter()
        .map(|(f, p)| match p {
            1 => f.clone(),
            _ => Expr::Pow(Box::new(f.clone()), *p),
        })
        .collect()
}

/// Rebuild a combined fraction as a canonical expression. When every
/// numerator term carries the same coefficient it is pulled out as a common
/// factor, which keeps stencil weights shared across symmetric accesses.
fn rebuild_fraction(num_terms: &[Term], den: &Pows) -> Expr {
    let monomials: Vec<Expr> = num_terms
        .iter()
        .map(|t| {
            let mut fs = vec![Expr::num(t.coeff)];
            fs.extend(rebuild_pows(&t.num));
            product(fs, vec![])
        })
        .collect();

    let num = if num_terms.len() >= 2
        && num_terms
            .windows(2)
            .all(|w| w[0].coeff == w[1].coeff)
        && num_terms[0].coeff != 1.0
    {
        let c = num_terms[0].coeff;
        let bare: Vec<Expr> = num_terms
            .iter()
            .map(|t| product(rebuild_pows(&t.num), vec![]))
            .collect();
        product(vec![Expr::num(c), sum(bare)], vec![])
    } else {
        sum(monomials)
    };

    if den.is_empty() {
        num
    } else {
        product(vec![num], rebuild_pows(den))
    }
}

/// Rearranges `eq` so that `target` stands alone: for a residual
/// `lhs - rhs ≡ a·target + rest` (affine after full distribution), returns
/// the canonical form of `-rest/a`.
pub fn solve_linear(eq: &Equation, target: &Access) -> Result<Expr> {
    let target_expr = Expr::Access(target.clone());
    let residual = simplify(&(eq.lhs.clone() - eq.rhs.clone()));
    if residual.contains_deriv() {
        return Err(Error::UnexpandedDerivative(format!("{residual}")));
    }

    let nonlinear = || Error::NonLinearTarget(format!("{target_expr}"));
    let mut coeff_terms: Vec<Term> = Vec::new();
    let mut rest_terms: Vec<Term> = Vec::new();

    for term in distribute(&residual) {
        for (f, _) in &term.den {
            if f.contains(&target_expr) {
                return Err(nonlinear());
            }
        }
        let mut power = 0u32;
        for (f, p) in &term.num {
            if *f == target_expr {
                power += p;
            } else if f.contains(&target_expr) {
                return Err(nonlinear());
            }
        }
        match power {
            0 => rest_terms.push(term),
            1 => {
                let mut t = term;
                sub_pow(&mut t.num, &target_expr, 1);
                coeff_terms.push(t);
            }
            _ => return Err(nonlinear()),
        }
    }

    if coeff_terms.is_empty() {
        return Err(Error::TargetAbsent(format!("{target_expr}")));
    }

    for t in &mut rest_terms {
        t.coeff = -t.coeff;
    }

    let (a_nums, a_den) = combine(coeff_terms);
    let (mut r_nums, mut r_den) = combine(rest_terms);

    if r_nums.is_empty() {
        return Ok(Expr::num(0.0));
    }

    if a_nums.len() == 1 {
        // rest/a = rest · a_den / (a_coeff · a_num): fold into each term.
        let a = &a_nums[0];
        for t in &mut r_nums {
            t.coeff /= a.coeff;
            for (f, p) in &a_den {
                *t.num.entry(f.clone()).or_insert(0) += p;
            }
            for (f, p) in &a.num {
                *t.den.entry(f.clone()).or_insert(0) += p;
            }
            for (f, p) in &r_den {
                *t.den.entry(f.clone()).or_insert(0) += p;
            }
        }
        let (nums, den) = combine(r_nums);
        Ok(rebuild_fraction(&nums, &den))
    } else {
        // Multi-term coefficient: divide by the rebuilt sum as one factor.
        let a_expr = rebuild_fraction(&a_nums, &Pows::new());
        for t in &mut r_nums {
            for (f, p) in &a_den {
                *t.num.entry(f.clone()).or_insert(0) += p;
            }
            *t.den.entry(a_expr.clone()).or_insert(0) += 1;
            for (f, p) in &r_den {
                *t.den.entry(f.clone()).or_insert(0) += p;
            }
        }
        r_den = Pows::new();
        let _ = r_den;
        let (nums, den) = combine(r_nums);
        Ok(rebuild_fraction(&nums, &den))
    }
}

// ---------------------------------------------------------------------------
// Evaluation (test oracle) and printing
// ---------------------------------------------------------------------------

/// Plain recursive evaluation with left-to-right folds. Used as the
/// independent numeric oracle in tests and equivalence checks.
pub fn eval_naive(
    e: &Expr,
    scalars: &BTreeMap<Sym, f64>,
    access: &mut dyn FnMut(&Access) -> f64,
) -> f64 {
    match e {
        Expr::Const(c) => c.get(),
        Expr::Sym(s) => *scalars
            .get(s)
            .unwrap_or_else(|| panic!("unbound symbol {}", s.name())),
        Expr::Access(a) => access(a),
        Expr::Pow(b, k) => eval_naive(b, scalars, access).powi(*k as i32),
        Expr::Mul(ops) => ops
            .iter()
            .map(|o| eval_naive(o, scalars, access))
            .fold(1.0, |a, b| a * b),
        Expr::Add(ops) => ops
            .iter()
            .map(|o| eval_naive(o, scalars, access))
            .fold(0.0, |a, b| a + b),
        Expr::Div(n, d) => eval_naive(n, scalars, access) / eval_naive(d, scalars, access),
        Expr::Deriv(_) => panic!("cannot evaluate an unexpanded derivative"),
    }
}

fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{:.1}", v)
    } else {
        format!("{}", v)
    }
}

fn fmt_index(dim: &str, spacing: &str, ix: &IndexExpr) -> String {
    match ix {
        IndexExpr::Abs(v) => format!("{v}"),
        IndexExpr::Rel(0) => dim.to_string(),
        IndexExpr::Rel(1) => format!("{dim} + {spacing}"),
        IndexExpr::Rel(-1) => format!("{dim} - {spacing}"),
        IndexExpr::Rel(o) if *o > 0 => format!("{dim} + {o}*{spacing}"),
        IndexExpr::Rel(o) => format!("{dim} - {}*{spacing}", -o),
    }
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name())?;
        let mut parts: Vec<String> = Vec::new();
        if let Some(t) = self.time {
            parts.push(fmt_index("t", "s", &IndexExpr::Rel(t)));
        }
        for (d, ix) in self.func.dims().iter().zip(&self.idx) {
            parts.push(fmt_index(d, "h", ix));
        }
        write!(f, "{})", parts.join(", "))
    }
}

impl fmt::Debug for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl Expr {
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        // precedence: 0 sum, 1 product, 2 atom
        match self {
            Expr::Const(c) => {
                let v = c.get();
                if v < 0.0 && prec > 0 {
                    write!(f, "({})", fmt_f64(v))
                } else {
                    write!(f, "{}", fmt_f64(v))
                }
            }
            Expr::Sym(s) => write!(f, "{}", s.name()),
            Expr::Access(a) => write!(f, "{a}"),
            Expr::Pow(b, k) => {
                b.fmt_prec(f, 2)?;
                write!(f, "**{k}")
            }
            Expr::Mul(ops) => {
                if prec > 1 {
                    write!(f, "(")?;
                }
                let (coeff, rest): (Option<f64>, &[Expr]) = match &ops[0] {
                    Expr::Const(c) => (Some(c.get()), &ops[1..]),
                    _ => (None, &ops[..]),
                };
                let mut first = true;
                match coeff {
                    Some(c) if c == -1.0 => write!(f, "-")?,
                    Some(c) => {
                        write!(f, "{}", fmt_f64(c))?;
                        first = false;
                    }
                    None => {}
                }
                for op in rest {
                    if !first {
                        write!(f, "*")?;
                    }
                    first = false;
                    op.fmt_prec(f, 2)?;
                }
                if prec > 1 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Expr::Div(n, d) => {
                if prec > 1 {
                    write!(f, "(")?;
                }
                n.fmt_prec(f, if matches!(**n, Expr::Mul(_)) { 1 } else { 2 })?;
                write!(f, "/")?;
                d.fmt_prec(f, 2)?;
                if prec > 1 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Expr::Add(ops) => {
                if prec > 0 {
                    write!(f, "(")?;
                }
                for (i, op) in ops.iter().enumerate() {
                    let (c, key) = decompose(op);
                    if i == 0 {
                        op.fmt_prec(f, 1)?;
                    } else if c < 0.0 {
                        write!(f, " - ")?;
                        recompose(-c, key.unwrap_or_else(|| Expr::num(1.0))).fmt_prec(f, 1)?;
                    } else {
                        write!(f, " + ")?;
                        op.fmt_prec(f, 1)?;
                    }
                }
                if prec > 0 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Expr::Deriv(d) => {
                write!(f, "Derivative(")?;
                d.arg.fmt_prec(f, 0)?;
                write!(f, ", {:?}, d{}, {:?}, k{})", d.axis, d.order, d.side, d.accuracy)
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Eq({}, {})", self.lhs, self.rhs)
    }
}

impl fmt::Debug for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

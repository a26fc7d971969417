//! Kernel execution.
//!
//! Stencil assignments compile to a flat postfix instruction tape evaluated
//! per grid point; a tree-walking interpreter implements the identical
//! arithmetic conventions and serves as the reference path for dual-execution
//! checks. Both follow one rule set so results match bit for bit:
//!
//! * sums fold left to right; a non-leading term with a negative coefficient
//!   executes as a subtraction of its positive part;
//! * a product with a leading coefficient of magnitude != 1 starts from that
//!   magnitude; a negative coefficient negates the finished product (unless
//!   a parent subtraction already handles the sign);
//! * integer powers are repeated multiplication.
//!
//! Data is matched to kernels by name at run time; sparse phases execute
//! sequentially, and parallel stencil sweeps partition the written points
//! disjointly so parallel and sequential runs agree bit for bit.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::expr::{decompose, Access, Expr, Sym};
use crate::grid::{FnMeta, GridFunction};
use crate::schedule::{BodyItem, LoopNest, SpaceLoop, StencilItem, TimeAxis};
use crate::sparse::{InterpStencil, SparseKind, SparseOp, SparsePointSet};

/// Maximum evaluation stack depth a tape may declare.
pub const STACK_BOUND: usize = 64;

/// Which engine evaluates stencil assignments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Tape,
    TreeWalk,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mode: ExecMode,
    /// Allow parallel sweeps (still subject to STENCILFORGE_THREADS).
    pub parallel: bool,
    /// Verify every grid access against its buffer bounds.
    pub checked: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: ExecMode::Tape,
            parallel: true,
            checked: false,
        }
    }
}

/// Wall time and step count of one run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: usize,
    pub wall: Duration,
}

/// Cyclic buffer level holding time index `t` of a function.
pub fn time_level(meta: &FnMeta, t: i64) -> usize {
    (t.rem_euclid(meta.buffer_count() as i64)) as usize
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
enum Instr {
    Const(f64),
    Scalar(u16),
    Local(u16),
    StoreLocal(u16),
    Load { array: u16, delta: i64, check: u32 },
    Store { array: u16, delta: i64, check: u32 },
    Dup,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
}

/// One (function, relative time) pair a tape touches.
#[derive(Clone)]
struct ArrayRef {
    func: Arc<FnMeta>,
    time_off: i32,
    /// stride per item loop: base(point) = Σ loop_idx · stride.
    base_strides: Vec<(usize, usize)>,
}

#[derive(Clone)]
struct CheckDim {
    loop_idx: Option<usize>,
    offset: i64,
    extent: usize,
}

#[derive(Clone)]
struct AccessCheck {
    name: String,
    dims: Vec<CheckDim>,
}

/// Flat compiled instruction sequence for one loop body.
#[derive(Clone)]
pub struct Tape {
    instrs: Vec<Instr>,
    arrays: Vec<ArrayRef>,
    scalars: Vec<Sym>,
    locals: Vec<Sym>,
    checks: Vec<AccessCheck>,
    pub max_stack: usize,
}

impl Tape {
    /// Operation counts (adds include subtractions and negations).
    pub fn op_counts(&self) -> (usize, usize, usize) {
        let mut adds = 0;
        let mut muls = 0;
        let mut divs = 0;
        for i in &self.instrs {
            match i {
                Instr::Add | Instr::Sub | Instr::Neg => adds += 1,
                Instr::Mul => muls += 1,
                Instr::Div => divs += 1,
                _ => {}
            }
        }
        (adds, muls, divs)
    }
    pub fn load_count(&self) -> usize {
        self.instrs
            .iter()
            .filter(|i| matches!(i, Instr::Load { .. }))
            .count()
    }
    pub fn instr_len(&self) -> usize {
        self.instrs.len()
    }
}

struct TapeBuilder<'a> {
    item_loops: &'a [SpaceLoop],
    instrs: Vec<Instr>,
    arrays: Vec<ArrayRef>,
    array_ids: BTreeMap<(String, Option<i32>), u16>,
    scalars: Vec<Sym>,
    locals: Vec<Sym>,
    checks: Vec<AccessCheck>,
    depth: usize,
    max_depth: usize,
}

impl<'a> TapeBuilder<'a> {
    fn new(item_loops: &'a [SpaceLoop]) -> Self {
        TapeBuilder {
            item_loops,
            instrs: Vec::new(),
            arrays: Vec::new(),
            array_ids: BTreeMap::new(),
            scalars: Vec::new(),
            locals: Vec::new(),
            checks: Vec::new(),
            depth: 0,
            max_depth: 0,
        }
    }

    fn push(&mut self, i: Instr) {
        match i {
            Instr::Const(_)
            | Instr::Scalar(_)
            | Instr::Local(_)
            | Instr::Load { .. }
            | Instr::Dup => {
                self.depth += 1;
                self.max_depth = self.max_depth.max(self.depth);
            }
            Instr::Add | Instr::Sub | Instr::Mul | Instr::Div => self.depth -= 1,
            Instr::Neg => {}
            Instr::StoreLocal(_) | Instr::Store { .. } => self.depth -= 1,
        }
        self.instrs.push(i);
    }

    fn loop_index_of(&self, dim: &str) -> Option<usize> {
        self.item_loops.iter().position(|l| &*l.dim == dim)
    }

    fn array_of(&mut self, a: &Access) -> Result<(u16, i64, u32)> {
        let key = (a.name().to_string(), a.time);
        let id = match self.array_ids.get(&key) {
            Some(id) => *id,
            None => {
                let strides = a.func.strides();
                let mut base = Vec::new();
                for (k, dim) in a.func.dims().iter().enumerate() {
                    if matches!(a.idx[k], crate::expr::IndexExpr::Rel(_)) {
                        let li = self.loop_index_of(dim).ok_or_else(|| Error::Parse(format!(
                            "access {a} uses dimension {dim} outside the item loops"
                        )))?;
                        base.push((li, strides[k]));
                    }
                }
                let id = self.arrays.len() as u16;
                self.arrays.push(ArrayRef {
                    func: a.func.clone(),
                    time_off: a.time.unwrap_or(0),
                    base_strides: base,
                });
                self.array_ids.insert(key, id);
                id
            }
        };

        let strides = a.func.strides();
        let mut delta = 0i64;
        let mut dims = Vec::new();
        for (k, ix) in a.idx.iter().enumerate() {
            match ix {
                crate::expr::IndexExpr::Rel(o) => {
                    delta += *o as i64 * strides[k] as i64;
                    dims.push(CheckDim {
                        loop_idx: self.loop_index_of(&a.func.dims()[k]),
                        offset: *o as i64,
                        extent: a.func.shape()[k],
                    });
                }
                crate::expr::IndexExpr::Abs(v) => {
                    delta += *v * strides[k] as i64;
                    dims.push(CheckDim {
                        loop_idx: None,
                        offset: *v,
                        extent: a.func.shape()[k],
                    });
                }
            }
        }
        let check = self.checks.len() as u32;
        self.checks.push(AccessCheck {
            name: a.name().to_string(),
            dims,
        });
        Ok((id, delta, check))
    }

    fn emit_sym(&mut self, s: &Sym) {
        if let Some(i) = self.locals.iter().position(|l| l == s) {
            self.push(Instr::Local(i as u16));
            return;
        }
        let slot = match self.scalars.iter().position(|x| x == s) {
            Some(i) => i as u16,
            None => {
                self.scalars.push(s.clone());
                (self.scalars.len() - 1) as u16
            }
        };
        self.push(Instr::Scalar(slot));
    }

    /// Emit `coeff_abs * key` (coefficient known non-negative).
    fn emit_term(&mut self, coeff_abs: f64, key: &Expr) -> Result<()> {
        match key {
            Expr::Const(c) => {
                // Stripped numerators of constant terms: coeff * 1.
                self.push(Instr::Const(coeff_abs * c.get()));
            }
            Expr::Mul(ops) => {
                let rest: &[Expr] = match &ops[0] {
                    Expr::Const(_) => unreachable!("decomposed key keeps no constant"),
                    _ => &ops[..],
                };
                if coeff_abs != 1.0 {
                    self.push(Instr::Const(coeff_abs));
                    for f in rest {
                        self.emit(f, false)?;
                        self.push(Instr::Mul);
                    }
                } else {
                    self.emit(&rest[0], false)?;
                    for f in &rest[1..] {
                        self.emit(f, false)?;
                        self.push(Instr::Mul);
                    }
                }
            }
            Expr::Div(n, d) => {
                self.emit_term(coeff_abs, n)?;
                self.emit(d, false)?;
                self.push(Instr::Div);
            }
            other => {
                if coeff_abs != 1.0 {
                    self.push(Instr::Const(coeff_abs));
                    self.emit(other, false)?;
                    self.push(Instr::Mul);
                } else {
                    self.emit(other, false)?;
                }
            }
        }
        Ok(())
    }

    fn emit(&mut self, e: &Expr, neg_handled: bool) -> Result<()> {
        match e {
            Expr::Const(c) => self.push(Instr::Const(c.get())),
            Expr::Sym(s) => self.emit_sym(s),
            Expr::Access(a) => {
                let (array, delta, check) = self.array_of(a)?;
                self.push(Instr::Load {
                    array,
                    delta,
                    check,
                });
            }
            Expr::Pow(b, k) => {
                self.emit(b, false)?;
                for _ in 1..*k {
                    self.push(Instr::Dup);
                }
                for _ in 1..*k {
                    self.push(Instr::Mul);
                }
            }
            Expr::Mul(ops) => {
                let (coeff, rest): (f64, &[Expr]) = match &ops[0] {
                    Expr::Const(c) => (c.get(), &ops[1..]),
                    _ => (1.0, &ops[..]),
                };
                if coeff.abs() != 1.0 {
                    self.push(Instr::Const(coeff.abs()));
                    for f in rest {
                        self.emit(f, false)?;
                        self.push(Instr::Mul);
                    }
                } else {
                    self.emit(&rest[0], false)?;
                    for f in &rest[1..] {
                        self.emit(f, false)?;
                        self.push(Instr::Mul);
                    }
                }
                if coeff < 0.0 && !neg_handled {
                    self.push(Instr::Neg);
                }
            }
            Expr::Div(n, d) => {
                self.emit(n, neg_handled)?;
                self.emit(d, false)?;
                self.push(Instr::Div);
            }
            Expr::Add(ops) => {
                self.emit(&ops[0], false)?;
                for op in &ops[1..] {
                    let (c, key) = decompose(op);
                    if c < 0.0 {
                        match key {
                            Some(k) => self.emit_term(-c, &k)?,
                            None => self.push(Instr::Const(-c)),
                        }
                        self.push(Instr::Sub);
                    } else {
                        self.emit(op, true)?;
                        self.push(Instr::Add);
                    }
                }
            }
            Expr::Deriv(_) => {
                return Err(Error::UnexpandedDerivative(format!("{e}")));
            }
        }
        Ok(())
    }
}

/// Compile one stencil item (temporaries then the stores) into a tape.
pub fn compile_item(item: &StencilItem) -> Result<Tape> {
    let mut b = TapeBuilder::new(&item.loops);
    for (sym, e) in &item.temps {
        b.emit(e, false)?;
        let slot = b.locals.len() as u16;
        b.locals.push(sym.clone());
        b.push(Instr::StoreLocal(slot));
    }
    for (lhs, rhs) in &item.assigns {
        b.emit(rhs, false)?;
        let (array, delta, check) = b.array_of(lhs)?;
        b.push(Instr::Store {
            array,
            delta,
            check,
        });
    }
    if b.max_depth > STACK_BOUND {
        return Err(Error::StackOverflowBound {
            needed: b.max_depth,
            bound: STACK_BOUND,
        });
    }
    Ok(Tape {
        instrs: b.instrs,
        arrays: b.arrays,
        scalars: b.scalars,
        locals: b.locals,
        checks: b.checks,
        max_stack: b.max_depth,
    })
}

// ---------------------------------------------------------------------------
// Buffers and bindings
// ---------------------------------------------------------------------------

/// Raw shared buffer pointer; writes are partitioned disjointly by the
/// scheduler's parallel contract.
#[derive(Clone, Copy)]
struct RawBuf<T> {
    ptr: *mut T,
    len: usize,
}
unsafe impl<T> Send for RawBuf<T> {}
unsafe impl<T> Sync for RawBuf<T> {}

impl<T: Elem> RawBuf<T> {
    #[inline]
    fn get(&self, i: i64) -> T {
        debug_assert!((i as usize) < self.len);
        unsafe { *self.ptr.add(i as usize) }
    }
    #[inline]
    fn set(&self, i: i64, v: T) {
        debug_assert!((i as usize) < self.len);
        unsafe { *self.ptr.add(i as usize) = v }
    }
}

struct FuncBufs<T> {
    meta: Arc<FnMeta>,
    levels: Vec<RawBuf<T>>,
}

/// Maps kernel argument names to user data. Names follow the symbols the
/// operator was built from; rebinding different objects under the same names
/// swaps the buffers a kernel reads and writes.
pub struct DataBinding<'a, T: Elem> {
    fields: BTreeMap<String, &'a mut GridFunction<T>>,
    points: BTreeMap<String, &'a mut SparsePointSet<T>>,
    scalars: BTreeMap<String, f64>,
}

impl<'a, T: Elem> DataBinding<'a, T> {
    pub fn new() -> Self {
        DataBinding {
            fields: BTreeMap::new(),
            points: BTreeMap::new(),
            scalars: BTreeMap::new(),
        }
    }
    /// Bind a field under its own name.
    pub fn field(mut self, f: &'a mut GridFunction<T>) -> Self {
        self.fields.insert(f.name().to_string(), f);
        self
    }
    /// Bind a field under a different argument name (buffer swapping).
    pub fn field_as(mut self, name: &str, f: &'a mut GridFunction<T>) -> Self {
        self.fields.insert(name.to_string(), f);
        self
    }
    pub fn points(mut self, p: &'a mut SparsePointSet<T>) -> Self {
        self.points.insert(p.name().to_string(), p);
        self
    }
    pub fn points_as(mut self, name: &str, p: &'a mut SparsePointSet<T>) -> Self {
        self.points.insert(name.to_string(), p);
        self
    }
    pub fn scalar(mut self, name: &str, v: f64) -> Self {
        self.scalars.insert(name.to_string(), v);
        self
    }
}

impl<'a, T: Elem> Default for DataBinding<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Operator
// ---------------------------------------------------------------------------

enum CompiledItem {
    Stencil { item: StencilItem, tape: Tape },
    Sparse(SparseOp),
}

/// An executable kernel: a scheduled loop nest with its compiled tapes.
pub struct Operator {
    pub nest: LoopNest,
    items: Vec<CompiledItem>,
    hoisted: Vec<(StencilItem, Tape)>,
}

impl Operator {
    /// Compile every stencil body (and hoisted precomputation) of a nest.
    pub fn build(nest: LoopNest) -> Result<Operator> {
        let mut items = Vec::with_capacity(nest.items.len());
        for item in &nest.items {
            items.push(match item {
                BodyItem::Stencil(st) => CompiledItem::Stencil {
                    item: st.clone(),
                    tape: compile_item(st)?,
                },
                BodyItem::Sparse(op) => CompiledItem::Sparse(op.clone()),
            });
        }
        let mut hoisted = Vec::new();
        for hf in &nest.hoisted_fields {
            let center = Access {
                func: hf.meta.clone(),
                time: None,
                idx: vec![crate::expr::IndexExpr::Rel(0); hf.meta.dims().len()],
            };
            let item = StencilItem {
                loops: hf.loops.clone(),
                parallel: false,
                simd: false,
                nontemporal: false,
                temps: Vec::new(),
                assigns: vec![(center, hf.expr.clone())],
            };
            let tape = compile_item(&item)?;
            hoisted.push((item, tape));
        }
        Ok(Operator {
            nest,
            items,
            hoisted,
        })
    }

    /// Tapes of the stencil body items, in order.
    pub fn tapes(&self) -> Vec<&Tape> {
        self.items
            .iter()
            .filter_map(|i| match i {
                CompiledItem::Stencil { tape, .. } => Some(tape),
                CompiledItem::Sparse(_) => None,
            })
            .collect()
    }

    /// Execute `steps` time iterations (or `steps` sweeps when the nest has
    /// no time loop).
    pub fn run<T: Elem>(
        &self,
        binding: &mut DataBinding<'_, T>,
        steps: usize,
        opts: &RunOptions,
    ) -> Result<RunSummary> {
        let started = Instant::now();
        let threads = thread_count();
        let pool = if opts.parallel && threads != 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Parse(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        // Scratch storage for hoisted fields lives inside the run.
        let mut scratch: Vec<(String, Vec<T>)> = self
            .nest
            .hoisted_fields
            .iter()
            .map(|hf| (hf.meta.name().to_string(), vec![T::ZERO; hf.meta.points()]))
            .collect();

        // Resolve every referenced function to raw buffers.
        let mut bufs: BTreeMap<String, FuncBufs<T>> = BTreeMap::new();
        let mut want = |meta: &Arc<FnMeta>| -> Result<()> {
            let name = meta.name();
            if bufs.contains_key(name) {
                return Ok(());
            }
            if let Some((_, data)) = scratch.iter_mut().find(|(n, _)| n == name) {
                bufs.insert(
                    name.to_string(),
                    FuncBufs {
                        meta: meta.clone(),
                        levels: vec![RawBuf {
                            ptr: data.as_mut_ptr(),
                            len: data.len(),
                        }],
                    },
                );
                return Ok(());
            }
            let gf = binding
                .fields
                .get_mut(name)
                .ok_or_else(|| Error::MissingBinding(name.to_string()))?;
            if gf.meta().shape() != meta.shape() || gf.meta().buffer_count() != meta.buffer_count()
            {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: meta.shape().to_vec(),
                    got: gf.meta().shape().to_vec(),
                });
            }
            let levels = (0..gf.meta().buffer_count())
                .map(|l| {
                    let b = gf.buffer_mut(l);
                    RawBuf {
                        ptr: b.as_mut_ptr(),
                        len: b.len(),
                    }
                })
                .collect();
            bufs.insert(
                name.to_string(),
                FuncBufs {
                    meta: meta.clone(),
                    levels,
                },
            );
            Ok(())
        };
        for ci in &self.items {
            match ci {
                CompiledItem::Stencil { tape, .. } => {
                    for a in &tape.arrays {
                        want(&a.func)?;
                    }
                }
                CompiledItem::Sparse(op) => {
                    want(&op.field)?;
                    let mut err = None;
                    op.expr.for_each_access(&mut |a| {
                        if err.is_none() {
                            err = want(&a.func).err();
                        }
                    });
                    if let Some(e) = err {
                        return Err(e);
                    }
                }
            }
        }
        for (_, tape) in &self.hoisted {
            for a in &tape.arrays {
                want(&a.func)?;
            }
        }

        // Scalar environment: hoisted scalars then user scalars.
        let mut env: BTreeMap<String, f64> = binding.scalars.clone();
        for (sym, e) in &self.nest.hoisted_scalars {
            let v = crate::expr::eval_naive(
                e,
                &env.iter()
                    .map(|(k, v)| (Sym::new(k), *v))
                    .collect(),
                &mut |_| panic!("hoisted scalars cannot access grids"),
            );
            env.insert(sym.name().to_string(), v);
        }

        // Sparse preparation: stencil weights (fail fast) and data checks.
        let mut sparse_prep: BTreeMap<usize, Vec<InterpStencil>> = BTreeMap::new();
        let has_time = self.nest.time.is_some();
        for (i, ci) in self.items.iter().enumerate() {
            if let CompiledItem::Sparse(op) = ci {
                let pts = binding
                    .points
                    .get(&*op.points.name)
                    .ok_or_else(|| Error::MissingBinding(op.points.name.to_string()))?;
                if pts.npoint() != op.points.npoint || pts.coord(0).len() != op.points.ndim {
                    return Err(Error::ShapeMismatch {
                        name: op.points.name.to_string(),
                        expected: vec![op.points.npoint, op.points.ndim],
                        got: vec![pts.npoint(), pts.coord(0).len()],
                    });
                }
                if has_time && pts.ntime() < steps {
                    return Err(Error::ShapeMismatch {
                        name: op.points.name.to_string(),
                        expected: vec![steps],
                        got: vec![pts.ntime()],
                    });
                }
                sparse_prep.insert(i, pts.stencils(&op.field)?);
            }
        }

        // Hoisted precomputations: sequential prelude.
        for (item, tape) in &self.hoisted {
            exec_stencil::<T>(item, tape, &bufs, &env, 0, opts, None)?;
        }

        let dir = self
            .nest
            .time
            .as_ref()
            .map(|t| t.direction)
            .unwrap_or(TimeAxis::Forward);
        let times: Vec<i64> = if has_time {
            match dir {
                TimeAxis::Forward => (0..steps as i64).collect(),
                TimeAxis::Backward => (0..steps as i64).rev().collect(),
            }
        } else {
            (0..steps as i64).collect()
        };

        for &t in &times {
            for (i, ci) in self.items.iter().enumerate() {
                match ci {
                    CompiledItem::Stencil { item, tape } => {
                        exec_stencil::<T>(item, tape, &bufs, &env, t, opts, pool.as_ref())?;
                    }
                    CompiledItem::Sparse(op) => {
                        let stencils = &sparse_prep[&i];
                        let pts = binding.points.get_mut(&*op.points.name).unwrap();
                        exec_sparse::<T>(op, stencils, pts, &bufs, &env, t, dir, has_time, opts)?;
                    }
                }
            }
        }

        Ok(RunSummary {
            steps,
            wall: started.elapsed(),
        })
    }
}

fn thread_count() -> usize {
    match std::env::var("STENCILFORGE_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(0),
        Err(_) => 0,
    }
}

// ---------------------------------------------------------------------------
// Stencil execution
// ---------------------------------------------------------------------------

struct ResolvedArray<T> {
    buf: RawBuf<T>,
    base_strides: Vec<(usize, usize)>,
}

fn resolve_arrays<T: Elem>(
    tape: &Tape,
    bufs: &BTreeMap<String, FuncBufs<T>>,
    t: i64,
) -> Vec<ResolvedArray<T>> {
    tape.arrays
        .iter()
        .map(|a| {
            let fb = &bufs[a.func.name()];
            let level = if fb.meta.is_time_varying() {
                time_level(&fb.meta, t + a.time_off as i64)
            } else {
                0
            };
            ResolvedArray {
                buf: fb.levels[level],
                base_strides: a.base_strides.clone(),
            }
        })
        .collect()
}

#[inline]
fn check_access(check: &AccessCheck, idx: &[i64]) {
    for d in &check.dims {
        let i = d.loop_idx.map(|li| idx[li]).unwrap_or(0) + d.offset;
        assert!(
            i >= 0 && (i as usize) < d.extent,
            "{}: index {} outside extent {}",
            check.name,
            i,
            d.extent
        );
    }
}

/// Evaluate the tape at one point. `idx` holds the current loop indices.
#[inline]
fn eval_tape<T: Elem>(
    tape: &Tape,
    arrays: &[ResolvedArray<T>],
    bases: &[i64],
    idx: &[i64],
    scalars: &[T],
    locals: &mut [T],
    stack: &mut Vec<T>,
    checked: bool,
) {
    stack.clear();
    for ins in &tape.instrs {
        match *ins {
            Instr::Const(c) => stack.push(T::from_f64(c)),
            Instr::Scalar(s) => stack.push(scalars[s as usize]),
            Instr::Local(s) => stack.push(locals[s as usize]),
            Instr::StoreLocal(s) => {
                let v = stack.pop().unwrap();
                locals[s as usize] = v;
            }
            Instr::Load {
                array,
                delta,
                check,
            } => {
                if checked {
                    check_access(&tape.checks[check as usize], idx);
                }
                let a = &arrays[array as usize];
                stack.push(a.buf.get(bases[array as usize] + delta));
            }
            Instr::Store {
                array,
                delta,
                check,
            } => {
                if checked {
                    check_access(&tape.checks[check as usize], idx);
                }
                let v = stack.pop().unwrap();
                let a = &arrays[array as usize];
                a.buf.set(bases[array as usize] + delta, v);
            }
            Instr::Dup => {
                let v = *stack.last().unwrap();
                stack.push(v);
            }
            Instr::Add => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a + b);
            }
            Instr::Sub => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a - b);
            }
            Instr::Mul => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a * b);
            }
            Instr::Div => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a / b);
            }
            Instr::Neg => {
                let v = stack.pop().unwrap();
                stack.push(-v);
            }
        }
    }
    debug_assert!(stack.is_empty());
}

/// Iterate the inner loops of one tile and evaluate each point.
#[allow(clippy::too_many_arguments)]
fn run_tile<T: Elem>(
    mode: ExecMode,
    item: &StencilItem,
    tape: &Tape,
    arrays: &[ResolvedArray<T>],
    ranges: &[(i64, i64)],
    scalars: &[T],
    twalk: Option<&TreeWalker<T>>,
    checked: bool,
) {
    let nloops = ranges.len();
    let mut idx = vec![0i64; nloops];
    let mut bases = vec![0i64; arrays.len()];
    let mut stack: Vec<T> = Vec::with_capacity(tape.max_stack.max(4));
    let mut locals = vec![T::ZERO; tape.locals.len().max(1)];

    // Odometer iteration over the tile.
    for (d, r) in ranges.iter().enumerate() {
        idx[d] = r.0;
        if r.0 >= r.1 {
            return;
        }
    }
    loop {
        for (ai, a) in arrays.iter().enumerate() {
            let mut base = 0i64;
            for (li, s) in &a.base_strides {
                base += idx[*li] * *s as i64;
            }
            bases[ai] = base;
        }
        match mode {
            ExecMode::Tape => eval_tape(
                tape, arrays, &bases, &idx, scalars, &mut locals, &mut stack, checked,
            ),
            ExecMode::TreeWalk => {
                twalk
                    .expect("tree walker prepared")
                    .eval_point(item, arrays, &bases, &idx, scalars, &mut locals, checked);
            }
        }
        // Advance the innermost dimension first.
        let mut d = nloops;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < ranges[d].1 {
                break;
            }
            idx[d] = ranges[d].0;
        }
        // Reset dims inner to the advanced one.
        for r in ranges.iter().enumerate().skip(d + 1) {
            idx[r.0] = r.1 .0;
        }
    }
}

/// Tiles of one item: the cartesian product of block starts over blocked
/// dimensions (a single full tile when unblocked).
fn tiles(loops: &[SpaceLoop]) -> Vec<Vec<(i64, i64)>> {
    let mut axes: Vec<Vec<(i64, i64)>> = Vec::with_capacity(loops.len());
    for l in loops {
        if l.block > 0 {
            let mut spans = Vec::new();
            let mut s = l.lo;
            while s < l.hi {
                spans.push((s, (s + l.block as i64).min(l.hi)));
                s += l.block as i64;
            }
            axes.push(spans);
        } else {
            axes.push(vec![(l.lo, l.hi)]);
        }
    }
    let mut out: Vec<Vec<(i64, i64)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for t in &out {
            for span in &axis {
                let mut t2 = t.clone();
                t2.push(*span);
                next.push(t2);
            }
        }
        out = next;
    }
    out
}

fn exec_stencil<T: Elem>(
    item: &StencilItem,
    tape: &Tape,
    bufs: &BTreeMap<String, FuncBufs<T>>,
    env: &BTreeMap<String, f64>,
    t: i64,
    opts: &RunOptions,
    pool: Option<&rayon::ThreadPool>,
) -> Result<()> {
    let arrays = resolve_arrays(tape, bufs, t);
    let scalars: Vec<T> = tape
        .scalars
        .iter()
        .map(|s| {
            env.get(s.name())
                .map(|v| T::from_f64(*v))
                .ok_or_else(|| Error::MissingBinding(s.name().to_string()))
        })
        .collect::<Result<_>>()?;

    let walker = match opts.mode {
        ExecMode::TreeWalk => Some(TreeWalker::prepare(item, tape)?),
        ExecMode::Tape => None,
    };

    if item.loops.is_empty() {
        // Fully pinned assignment: single point.
        run_tile(
            opts.mode,
            item,
            tape,
            &arrays,
            &[],
            &scalars,
            walker.as_ref(),
            opts.checked,
        );
        return Ok(());
    }

    let all_tiles = tiles(&item.loops);
    let parallel = item.parallel && pool.is_some() && all_tiles.len() > 1;
    if parallel {
        use rayon::prelude::*;
        pool.unwrap().install(|| {
            all_tiles.par_iter().for_each(|ranges| {
                run_tile(
                    opts.mode,
                    item,
                    tape,
                    &arrays,
                    ranges,
                    &scalars,
                    walker.as_ref(),
                    opts.checked,
                );
            });
        });
    } else {
        for ranges in &all_tiles {
            run_tile(
                opts.mode,
                item,
                tape,
                &arrays,
                ranges,
                &scalars,
                walker.as_ref(),
                opts.checked,
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tree-walking reference interpreter
// ---------------------------------------------------------------------------

/// Reference evaluator mirroring the tape's arithmetic conventions. Grid
/// accesses resolve through a precomputed (array, delta) table so both
/// engines read the exact same buffer cells.
struct TreeWalker<T: Elem> {
    lookup: BTreeMap<Access, (u16, i64, u32)>,
    checks: Vec<AccessCheck>,
    scalar_slots: BTreeMap<Sym, usize>,
    local_slots: BTreeMap<Sym, usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Elem> TreeWalker<T> {
    fn prepare(item: &StencilItem, tape: &Tape) -> Result<Self> {
        let mut b = TapeBuilder::new(&item.loops);
        b.arrays = tape.arrays.clone();
        for (i, a) in tape.arrays.iter().enumerate() {
            // Rebuild the array id map so deltas match the compiled tape.
            b.array_ids.insert(
                (a.func.name().to_string(), a.func.is_time_varying().then_some(a.time_off)),
                i as u16,
            );
        }
        let mut lookup = BTreeMap::new();
        let mut collect = |e: &Expr, b: &mut TapeBuilder| -> Result<()> {
            let mut err = None;
            e.for_each_access(&mut |a| {
                if err.is_none() && !lookup.contains_key(a) {
                    match b.array_of(a) {
                        Ok(v) => {
                            lookup.insert(a.clone(), v);
                        }
                        Err(e) => err = Some(e),
                    }
                }
            });
            err.map_or(Ok(()), Err)
        };
        for (_, e) in &item.temps {
            collect(e, &mut b)?;
        }
        for (lhs, rhs) in &item.assigns {
            collect(rhs, &mut b)?;
            collect(&Expr::Access(lhs.clone()), &mut b)?;
        }
        let scalar_slots = tape
            .scalars
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let local_slots = tape
            .locals
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(TreeWalker {
            lookup,
            checks: b.checks,
            scalar_slots,
            local_slots,
            _marker: std::marker::PhantomData,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_point(
        &self,
        item: &StencilItem,
        arrays: &[ResolvedArray<T>],
        bases: &[i64],
        idx: &[i64],
        scalars: &[T],
        locals: &mut [T],
        checked: bool,
    ) {
        let ctx = WalkCtx {
            walker: self,
            arrays,
            bases,
            idx,
            scalars,
            checked,
        };
        for (sym, e) in &item.temps {
            let v = ctx.eval(e, false, locals);
            locals[self.local_slots[sym]] = v;
        }
        for (lhs, rhs) in &item.assigns {
            let v = ctx.eval(rhs, false, locals);
            let (array, delta, check) = self.lookup[lhs];
            if checked {
                check_access(&self.checks[check as usize], idx);
            }
            arrays[array as usize]
                .buf
                .set(bases[array as usize] + delta, v);
        }
    }
}

struct WalkCtx<'a, T: Elem> {
    walker: &'a TreeWalker<T>,
    arrays: &'a [ResolvedArray<T>],
    bases: &'a [i64],
    idx: &'a [i64],
    scalars: &'a [T],
    checked: bool,
}

impl<'a, T: Elem> WalkCtx<'a, T> {
    fn load(&self, a: &Access) -> T {
        let (array, delta, check) = self.walker.lookup[a];
        if self.checked {
            check_access(&self.walker.checks[check as usize], self.idx);
        }
        self.arrays[array as usize]
            .buf
            .get(self.bases[array as usize] + delta)
    }

    fn eval(&self, e: &Expr, neg_handled: bool, locals: &[T]) -> T {
        match e {
            Expr::Const(c) => T::from_f64(c.get()),
            Expr::Sym(s) => {
                if let Some(i) = self.walker.local_slots.get(s) {
                    locals[*i]
                } else {
                    self.scalars[self.walker.scalar_slots[s]]
                }
            }
            Expr::Access(a) => self.load(a),
            Expr::Pow(b, k) => {
                let x = self.eval(b, false, locals);
                let mut acc = x;
                for _ in 1..*k {
                    acc = acc * x;
                }
                acc
            }
            Expr::Mul(ops) => {
                let (coeff, rest): (f64, &[Expr]) = match &ops[0] {
                    Expr::Const(c) => (c.get(), &ops[1..]),
                    _ => (1.0, &ops[..]),
                };
                let mut acc = if coeff.abs() != 1.0 {
                    let mut acc = T::from_f64(coeff.abs());
                    for f in rest {
                        acc = acc * self.eval(f, false, locals);
                    }
                    acc
                } else {
                    let mut acc = self.eval(&rest[0], false, locals);
                    for f in &rest[1..] {
                        acc = acc * self.eval(f, false, locals);
                    }
                    acc
                };
                if coeff < 0.0 && !neg_handled {
                    acc = -acc;
                }
                acc
            }
            Expr::Div(n, d) => {
                self.eval(n, neg_handled, locals) / self.eval(d, false, locals)
            }
            Expr::Add(ops) => {
                let mut acc = self.eval(&ops[0], false, locals);
                for op in &ops[1..] {
                    let (c, key) = decompose(op);
                    if c < 0.0 {
                        let v = match &key {
                            Some(k) => self.eval_term(-c, k, locals),
                            None => T::from_f64(-c),
                        };
                        acc = acc - v;
                    } else {
                        acc = acc + self.eval(op, true, locals);
                    }
                }
                acc
            }
            Expr::Deriv(_) => panic!("derivative nodes cannot execute"),
        }
    }

    /// `coeff_abs * key`, matching the tape's emit_term order.
    fn eval_term(&self, coeff_abs: f64, key: &Expr, locals: &[T]) -> T {
        match key {
            Expr::Const(c) => T::from_f64(coeff_abs * c.get()),
            Expr::Mul(ops) => {
                if coeff_abs != 1.0 {
                    let mut acc = T::from_f64(coeff_abs);
                    for f in ops {
                        acc = acc * self.eval(f, false, locals);
                    }
                    acc
                } else {
                    let mut acc = self.eval(&ops[0], false, locals);
                    for f in &ops[1..] {
                        acc = acc * self.eval(f, false, locals);
                    }
                    acc
                }
            }
            Expr::Div(n, d) => {
                self.eval_term(coeff_abs, n, locals) / self.eval(d, false, locals)
            }
            other => {
                if coeff_abs != 1.0 {
                    T::from_f64(coeff_abs) * self.eval(other, false, locals)
                } else {
                    self.eval(other, false, locals)
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse phases
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn exec_sparse<T: Elem>(
    op: &SparseOp,
    stencils: &[InterpStencil],
    pts: &mut SparsePointSet<T>,
    bufs: &BTreeMap<String, FuncBufs<T>>,
    env: &BTreeMap<String, f64>,
    t: i64,
    dir: TimeAxis,
    has_time: bool,
    _opts: &RunOptions,
) -> Result<()> {
    let field_meta = &op.field;
    let fdims = field_meta.dims().to_vec();
    let advance = if has_time { dir.advance() } else { 0 };
    let row = if has_time { t as usize } else { 0 };

    // Evaluate the op expression at one cell corner of one point.
    struct CornerEnv<'c, T: Elem> {
        bufs: &'c BTreeMap<String, FuncBufs<T>>,
        env: &'c BTreeMap<String, f64>,
        fdims: &'c [Arc<str>],
        corner: Vec<i64>,
        point_sym: &'c str,
        point_val: T,
        t: i64,
        advance: i32,
        has_time: bool,
    }
    impl<'c, T: Elem> CornerEnv<'c, T> {
        fn resolve(&self, a: &Access) -> T {
            let fb = &self.bufs[a.name()];
            let strides = a.func.strides();
            let mut lin = 0i64;
            for (k, ix) in a.idx.iter().enumerate() {
                let dim = &a.func.dims()[k];
                let pos = match ix {
                    crate::expr::IndexExpr::Rel(o) => {
                        let di = self
                            .fdims
                            .iter()
                            .position(|d| d == dim)
                            .expect("sparse access dimension on the field grid");
                        self.corner[di] + *o as i64
                    }
                    crate::expr::IndexExpr::Abs(v) => *v,
                };
                assert!(
                    pos >= 0 && (pos as usize) < a.func.shape()[k],
                    "sparse access out of bounds"
                );
                lin += pos * strides[k] as i64;
            }
            let level = if fb.meta.is_time_varying() && self.has_time {
                time_level(
                    &fb.meta,
                    self.t + self.advance as i64 + a.time.unwrap_or(0) as i64,
                )
            } else {
                0
            };
            fb.levels[level].get(lin)
        }

        fn eval(&self, e: &Expr) -> T {
            match e {
                Expr::Const(c) => T::from_f64(c.get()),
                Expr::Sym(s) => {
                    if s.name() == self.point_sym {
                        self.point_val
                    } else {
                        T::from_f64(*self.env.get(s.name()).unwrap_or_else(|| {
                            panic!("unbound scalar {} in sparse expression", s.name())
                        }))
                    }
                }
                Expr::Access(a) => self.resolve(a),
                Expr::Pow(b, k) => {
                    let x = self.eval(b);
                    let mut acc = x;
                    for _ in 1..*k {
                        acc = acc * x;
                    }
                    acc
                }
                Expr::Mul(ops) => {
                    let (coeff, rest): (f64, &[Expr]) = match &ops[0] {
                        Expr::Const(c) => (c.get(), &ops[1..]),
                        _ => (1.0, &ops[..]),
                    };
                    let mut acc = if coeff.abs() != 1.0 {
                        let mut acc = T::from_f64(coeff.abs());
                        for f in rest {
                            acc = acc * self.eval(f);
                        }
                        acc
                    } else {
                        let mut acc = self.eval(&rest[0]);
                        for f in &rest[1..] {
                            acc = acc * self.eval(f);
                        }
                        acc
                    };
                    if coeff < 0.0 {
                        acc = -acc;
                    }
                    acc
                }
                Expr::Div(n, d) => self.eval(n) / self.eval(d),
                Expr::Add(ops) => {
                    let mut acc = self.eval(&ops[0]);
                    for op in &ops[1..] {
                        acc = acc + self.eval(op);
                    }
                    acc
                }
                Expr::Deriv(_) => panic!("derivative nodes cannot execute"),
            }
        }
    }

    let field_strides = field_meta.strides();
    let fb_field = &bufs[field_meta.name()];
    let field_level = if fb_field.meta.is_time_varying() && has_time {
        time_level(&fb_field.meta, t + advance as i64)
    } else {
        0
    };
    let field_buf = fb_field.levels[field_level];

    for (p, st) in stencils.iter().enumerate() {
        let point_val = pts.value(row, p);
        match op.kind {
            SparseKind::Interpolate => {
                let mut acc = T::ZERO;
                let ndim = st.base.len();
                for (c, w) in st.weights.iter().enumerate() {
                    let corner: Vec<i64> = (0..ndim)
                        .map(|d| st.base[d] + ((c >> (ndim - 1 - d)) & 1) as i64)
                        .collect();
                    let env = CornerEnv {
                        bufs,
                        env,
                        fdims: &fdims,
                        corner,
                        point_sym: &op.points.name,
                        point_val,
                        t,
                        advance,
                        has_time,
                    };
                    acc = acc + T::from_f64(*w) * env.eval(&op.expr);
                }
                pts.set_value(row, p, acc);
            }
            SparseKind::Inject => {
                let ndim = st.base.len();
                for (c, w) in st.weights.iter().enumerate() {
                    let corner: Vec<i64> = (0..ndim)
                        .map(|d| st.base[d] + ((c >> (ndim - 1 - d)) & 1) as i64)
                        .collect();
                    let lin: i64 = corner
                        .iter()
                        .zip(&field_strides)
                        .map(|(i, s)| i * *s as i64)
                        .sum();
                    let env = CornerEnv {
                        bufs,
                        env,
                        fdims: &fdims,
                        corner,
                        point_sym: &op.points.name,
                        point_val,
                        t,
                        advance,
                        has_time,
                    };
                    let v = env.eval(&op.expr);
                    field_buf.set(lin, field_buf.get(lin) + T::from_f64(*w) * v);
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmarking
// ---------------------------------------------------------------------------

/// One row of a benchmark report.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub kernel: String,
    pub shape: Vec<usize>,
    pub space_order: u32,
    pub dse: String,
    pub dle: String,
    pub elem: String,
    pub steps: usize,
    pub points: usize,
    pub runtime_sec: f64,
    pub flops_per_point: usize,
    pub gflops: f64,
    pub oi: f64,
    pub block: String,
}

/// Median wall time over `runs` timed executions after one warm-up.
/// `run_once` owns data setup, executes the kernel and reports its time.
pub fn median_runtime(run_once: &mut dyn FnMut() -> Duration, runs: usize) -> Duration {
    let _warm = run_once();
    let mut times: Vec<Duration> = (0..runs.max(1)).map(|_| run_once()).collect();
    times.sort();
    times[times.len() / 2]
}

/// Interior points per sweep of the first stencil item.
pub fn iterated_points(nest: &LoopNest) -> usize {
    for item in &nest.items {
        if let BodyItem::Stencil(st) = item {
            return st
                .loops
                .iter()
                .map(|l| (l.hi - l.lo).max(0) as usize)
                .product();
        }
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dse::DseLevel;
    use crate::expr::IndexExpr;
    use crate::grid::Grid;
    use crate::schedule::{apply_blocking, schedule, BlockingSpec};
    use crate::testkit;

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed | 1;
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 100_000) as f64 / 50_000.0 - 1.0
        }
    }

    fn fill_random(gf: &mut GridFunction<f64>, seed: u64) {
        let mut next = rng(seed);
        for b in gf.buffers_mut() {
            for v in b.iter_mut() {
                *v = next();
            }
        }
    }

    fn seq(mode: ExecMode) -> RunOptions {
        RunOptions {
            mode,
            parallel: false,
            checked: false,
        }
    }

    #[test]
    fn simple_sum_tape_shape() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let y = grid.function::<f64>("y", 2);
        let eq = crate::expr::Equation::new(y.at(), Expr::sym("a") + Expr::sym("b"));
        let set = crate::dse::OptimizedExprSet::from_equations(&[eq]).unwrap();
        let nest = schedule(&set, &[], &BTreeMap::new(), TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        let tape = op.tapes()[0];
        assert_eq!(tape.max_stack, 2);
        assert_eq!(tape.op_counts(), (1, 0, 0));
        assert_eq!(tape.instr_len(), 4); // load a, load b, add, store
    }

    #[test]
    fn jacobi_tape_matches_flop_model() {
        let (_, _, _, set) = testkit::laplace(9, DseLevel::Basic);
        let nest = schedule(&set, &[], &BTreeMap::new(), TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        let tape = op.tapes()[0];
        assert_eq!(tape.load_count(), 4, "four neighbor loads");
        assert_eq!(tape.op_counts(), (3, 1, 0), "three adds, one multiply");
    }

    #[test]
    fn deep_expressions_hit_the_stack_bound() {
        let grid = Grid::regular(&[5, 5], 1.0);
        let y = grid.function::<f64>("y", 2);
        let mut e = Expr::sym("x0");
        for _ in 0..40 {
            e = Expr::Add(vec![
                Expr::num(1.0),
                Expr::Mul(vec![Expr::sym("x0"), e]),
            ]);
        }
        let item = crate::schedule::StencilItem {
            loops: vec![],
            parallel: false,
            simd: false,
            nontemporal: false,
            temps: vec![],
            assigns: vec![(
                match y.idx(&[IndexExpr::Abs(1), IndexExpr::Abs(1)]) {
                    Expr::Access(a) => a,
                    _ => unreachable!(),
                },
                e,
            )],
        };
        assert!(matches!(
            compile_item(&item),
            Err(Error::StackOverflowBound { .. })
        ));
    }

    fn run_convection_once(
        mode: ExecMode,
        parallel: bool,
        blocks: Option<BlockingSpec>,
        seed: u64,
        steps: usize,
    ) -> Vec<f64> {
        let (mut u, set, subs) = testkit::convection(24, 1.0, 0.1, DseLevel::Basic);
        let mut nest = schedule(&set, &[], &subs, TimeAxis::Forward).unwrap();
        if let Some(spec) = &blocks {
            nest = apply_blocking(&nest, spec);
        }
        let op = Operator::build(nest).unwrap();
        fill_random(&mut u, seed);
        let opts = RunOptions {
            mode,
            parallel,
            checked: true,
        };
        let mut binding = DataBinding::new().field(&mut u);
        op.run(&mut binding, steps, &opts).unwrap();
        let mut out = u.buffer(0).to_vec();
        out.extend_from_slice(u.buffer(1));
        out
    }

    #[test]
    fn tape_and_tree_walk_agree_bitwise() {
        for seed in 0..10u64 {
            let a = run_convection_once(ExecMode::Tape, false, None, seed, 7);
            let b = run_convection_once(ExecMode::TreeWalk, false, None, seed, 7);
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        for seed in [3u64, 17] {
            let a = run_convection_once(ExecMode::Tape, false, None, seed, 5);
            let b = run_convection_once(ExecMode::Tape, true, None, seed, 5);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn blocking_is_bitwise_neutral() {
        for spec in [
            BlockingSpec::square(2, 4),
            BlockingSpec::square(2, 5),
            BlockingSpec {
                blocks: vec![8, 3],
            },
        ] {
            let a = run_convection_once(ExecMode::Tape, false, None, 11, 6);
            let b = run_convection_once(ExecMode::Tape, true, Some(spec), 11, 6);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_and_backward_time_indexing() {
        // u(t+1) = u(t) + 1 forward; v(t-1) = v(t) + 1 backward. Hand-rolled
        // expectations pin the iteration order and the cyclic (true modulo)
        // buffer mapping.
        let grid = Grid::regular(&[4, 4], 1.0);
        let u = grid.time_function::<f64>("u", 1, 2);
        let eq = crate::expr::Equation::new(u.forward(), u.at() + Expr::num(1.0));
        let set = crate::dse::OptimizedExprSet::from_equations(&[eq]).unwrap();
        let nest = schedule(&set, &[], &BTreeMap::new(), TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        let mut uf = grid.time_function::<f64>("u", 1, 2);
        let mut b = DataBinding::new().field(&mut uf);
        op.run(&mut b, 3, &seq(ExecMode::Tape)).unwrap();
        // t=0 writes level 1 (=1), t=1 writes level 0 (=2), t=2 writes level 1 (=3).
        let c = uf.idx_of(&[1, 1]);
        assert_eq!(uf.buffer(0)[c], 2.0);
        assert_eq!(uf.buffer(1)[c], 3.0);

        let v = grid.time_function::<f64>("v", 1, 2);
        let eq = crate::expr::Equation::new(v.backward(), v.at() + Expr::num(1.0));
        let set = crate::dse::OptimizedExprSet::from_equations(&[eq]).unwrap();
        let nest = schedule(&set, &[], &BTreeMap::new(), TimeAxis::Backward).unwrap();
        let op = Operator::build(nest).unwrap();
        let mut vf = grid.time_function::<f64>("v", 1, 2);
        let mut b = DataBinding::new().field(&mut vf);
        op.run(&mut b, 3, &seq(ExecMode::Tape)).unwrap();
        // t=2 writes level 1 (=1), t=1 writes level 0 (=2), t=0 writes level
        // rem_euclid(-1, 2) = 1 (=3).
        let c = vf.idx_of(&[1, 1]);
        assert_eq!(vf.buffer(0)[c], 2.0);
        assert_eq!(vf.buffer(1)[c], 3.0);
    }

    #[test]
    fn zero_steps_leave_buffers_unchanged() {
        let (mut u, set, subs) = testkit::convection(16, 1.0, 0.1, DseLevel::Basic);
        let nest = schedule(&set, &[], &subs, TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        fill_random(&mut u, 99);
        let before: Vec<Vec<f64>> = (0..2).map(|l| u.buffer(l).to_vec()).collect();
        let mut b = DataBinding::new().field(&mut u);
        let summary = op.run(&mut b, 0, &seq(ExecMode::Tape)).unwrap();
        assert_eq!(summary.steps, 0);
        for l in 0..2 {
            assert_eq!(u.buffer(l), &before[l][..]);
        }
    }

    #[test]
    fn buffer_swap_exchanges_roles() {
        let (_, _, _, set) = testkit::laplace(9, DseLevel::Basic);
        let nest = schedule(&set, &[], &BTreeMap::new(), TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        let grid = Grid::regular(&[9, 9], 1.0);
        let mut pa = grid.function::<f64>("pa", 2);
        let mut pb = grid.function::<f64>("pb", 2);
        let mut bc = grid.function_on::<f64>("bc", &["x"]);
        for i in 0..9 {
            let lin = bc.idx_of(&[i]);
            bc.buffer_mut(0)[lin] = i as f64 / 8.0;
        }
        fill_random(&mut pb, 7);
        let before_pb = pb.buffer(0).to_vec();
        // p <- pa (written), pn <- pb (read).
        let mut b = DataBinding::new()
            .field_as("p", &mut pa)
            .field_as("pn", &mut pb)
            .field_as("bc_right", &mut bc);
        op.run(&mut b, 1, &seq(ExecMode::Tape)).unwrap();
        assert_eq!(pb.buffer(0), &before_pb[..], "read-only side untouched");
        let interior_changed = pa.buffer(0)[pa.idx_of(&[4, 4])];
        let expect = 0.25
            * (before_pb[pa.idx_of(&[3, 4])]
                + before_pb[pa.idx_of(&[4, 3])]
                + before_pb[pa.idx_of(&[4, 5])]
                + before_pb[pa.idx_of(&[5, 4])]);
        assert!((interior_changed - expect).abs() < 1e-15);

        // Swapped: now pb is written.
        fill_random(&mut pa, 8);
        let before_pa = pa.buffer(0).to_vec();
        let mut b = DataBinding::new()
            .field_as("p", &mut pb)
            .field_as("pn", &mut pa)
            .field_as("bc_right", &mut bc);
        op.run(&mut b, 1, &seq(ExecMode::Tape)).unwrap();
        assert_eq!(pa.buffer(0), &before_pa[..]);
    }

    #[test]
    fn missing_bindings_and_shape_mismatch_error() {
        let (_, set, subs) = testkit::convection(16, 1.0, 0.1, DseLevel::Basic);
        let nest = schedule(&set, &[], &subs, TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        let mut b: DataBinding<f64> = DataBinding::new();
        assert!(matches!(
            op.run(&mut b, 1, &seq(ExecMode::Tape)),
            Err(Error::MissingBinding(name)) if name == "u"
        ));

        let wrong = Grid::regular(&[8, 8], 1.0);
        let mut uw = wrong.time_function::<f64>("u", 1, 2);
        let mut b = DataBinding::new().field(&mut uw);
        assert!(matches!(
            op.run(&mut b, 1, &seq(ExecMode::Tape)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    #[should_panic(expected = "outside extent")]
    fn checked_mode_catches_out_of_range_bounds() {
        let (mut u, set, subs) = testkit::convection(8, 1.0, 0.1, DseLevel::Basic);
        let mut nest = schedule(&set, &[], &subs, TimeAxis::Forward).unwrap();
        // Corrupt the bounds: start at 0 although the stencil reaches -1.
        if let crate::schedule::BodyItem::Stencil(st) = &mut nest.items[0] {
            st.loops[0].lo = 0;
        }
        let op = Operator::build(nest).unwrap();
        let mut b = DataBinding::new().field(&mut u);
        let _ = op.run(
            &mut b,
            1,
            &RunOptions {
                mode: ExecMode::Tape,
                parallel: false,
                checked: true,
            },
        );
    }

    #[test]
    fn f32_execution_tracks_f64() {
        let grid = Grid::regular(&[16, 16], 1.0);
        let u64f = grid.time_function::<f64>("u", 1, 2);
        let c = Expr::num(1.0);
        let lhs = u64f.dt() + c.clone() * u64f.dxl() + c * u64f.dyl();
        let discrete = crate::fd::expand_derivatives(&lhs).unwrap();
        let stencil =
            crate::expr::solve_linear(&crate::expr::Equation::zero(discrete), &u64f.forward_access())
                .unwrap();
        let eqs = [crate::expr::Equation::new(u64f.forward(), stencil)];
        let set = crate::dse::optimize(&eqs, DseLevel::Basic).unwrap();
        let nest = schedule(&set, &[], &testkit::subs(1.0, 0.1), TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();

        let mut a64 = grid.time_function::<f64>("u", 1, 2);
        let mut a32 = grid.time_function::<f32>("u", 1, 2);
        let mut next = rng(5);
        for lin in 0..256 {
            let v = next();
            for l in 0..2 {
                a64.buffer_mut(l)[lin] = v;
                a32.buffer_mut(l)[lin] = v as f32;
            }
        }
        let mut b64 = DataBinding::new().field(&mut a64);
        op.run(&mut b64, 4, &seq(ExecMode::Tape)).unwrap();
        let mut b32 = DataBinding::new().field(&mut a32);
        op.run(&mut b32, 4, &seq(ExecMode::Tape)).unwrap();
        for lin in 0..256 {
            let x = a64.buffer(0)[lin];
            let y = a32.buffer(0)[lin] as f64;
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn acoustic_kernel_checked_run() {
        let (mut u, mut m, mut eta, set, subs) =
            testkit::acoustic(&[15, 15], 4, 1.0, 0.1, DseLevel::Advanced);
        let nest = schedule(&set, &[], &subs, TimeAxis::Forward).unwrap();
        let op = Operator::build(nest).unwrap();
        m.fill(0.25);
        eta.fill(0.0);
        fill_random(&mut u, 42);
        let mut b = DataBinding::new().field(&mut u).field(&mut m).field(&mut eta);
        let opts = RunOptions {
            mode: ExecMode::Tape,
            parallel: false,
            checked: true,
        };
        op.run(&mut b, 3, &opts).unwrap();
        assert!(u.buffer(0).iter().all(|v| v.is_finite()));
    }
}

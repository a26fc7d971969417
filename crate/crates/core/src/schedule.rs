//! Lowering optimized expression sets to an explicit loop-nest IR.
//!
//! Scheduling substitutes the spacing placeholders, derives per-item
//! iteration bounds from the stencil reaches, drops absolute-indexed
//! dimensions from the loop nest, and orders the body items as given:
//! field updates first, then injections, then interpolations.
//!
//! Iteration bounds use the symmetric reach rule: a dimension touched with
//! relative offsets up to `|r|` iterates `[r, extent - r)`; expressions that
//! only pin a dimension absolutely drop its loop, and all-zero offsets give
//! the full extent (how low-level boundary expressions cover whole rows).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use crate::dse::OptimizedExprSet;
use crate::error::{Error, Result};
use crate::expr::{free_symbols, space_spacing, substitute, time_spacing, Access, Expr, IndexExpr, Sym};
use crate::grid::FnMeta;
use crate::sparse::{SparseKind, SparseOp};

/// Direction of the time loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeAxis {
    Forward,
    Backward,
}

impl TimeAxis {
    /// Step applied to the loop index to reach the freshly written buffer.
    pub fn advance(self) -> i32 {
        match self {
            TimeAxis::Forward => 1,
            TimeAxis::Backward => -1,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            TimeAxis::Forward => "forward",
            TimeAxis::Backward => "backward",
        }
    }
}

/// Loop-level optimization level: `Basic` keeps plain parallel loops,
/// `Advanced` adds blocking and SIMD annotations, `Speculative` additionally
/// tags the innermost loops for non-temporal stores (a code-generation
/// annotation only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DleLevel {
    Basic,
    Advanced,
    Speculative,
}

impl DleLevel {
    pub fn name(self) -> &'static str {
        match self {
            DleLevel::Basic => "basic",
            DleLevel::Advanced => "advanced",
            DleLevel::Speculative => "speculative",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "basic" => Some(DleLevel::Basic),
            "advanced" => Some(DleLevel::Advanced),
            "speculative" => Some(DleLevel::Speculative),
            _ => None,
        }
    }
}

/// Per-space-dimension block sizes; 0 leaves a dimension unblocked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockingSpec {
    pub blocks: Vec<usize>,
}

impl BlockingSpec {
    pub fn unblocked(ndim: usize) -> Self {
        BlockingSpec {
            blocks: vec![0; ndim],
        }
    }
    pub fn square(ndim: usize, b: usize) -> Self {
        BlockingSpec {
            blocks: vec![b; ndim],
        }
    }
    pub fn is_unblocked(&self) -> bool {
        self.blocks.iter().all(|b| *b == 0)
    }
    pub fn label(&self) -> String {
        if self.is_unblocked() {
            "unblocked".into()
        } else {
            self.blocks
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join("x")
        }
    }
}

/// One space loop of a stencil item. `block > 0` splits it into an outer
/// block loop and an inner intra-block loop with a remainder-safe bound.
#[derive(Clone, Debug)]
pub struct SpaceLoop {
    pub dim: Arc<str>,
    pub extent: usize,
    pub lo: i64,
    /// Exclusive upper bound.
    pub hi: i64,
    pub block: usize,
}

/// A group of per-point assignments sharing one loop nest.
#[derive(Clone)]
pub struct StencilItem {
    pub loops: Vec<SpaceLoop>,
    pub parallel: bool,
    pub simd: bool,
    pub nontemporal: bool,
    pub temps: Vec<(Sym, Expr)>,
    pub assigns: Vec<(Access, Expr)>,
}

/// One body item of a time iteration.
#[derive(Clone)]
pub enum BodyItem {
    Stencil(StencilItem),
    Sparse(SparseOp),
}

/// A hoisted precomputation materialized over the full extent of its field
/// before the time loop.
#[derive(Clone)]
pub struct HoistedFieldItem {
    pub meta: Arc<FnMeta>,
    pub loops: Vec<SpaceLoop>,
    pub expr: Expr,
}

#[derive(Clone, Copy, Debug)]
pub struct TimeLoop {
    pub direction: TimeAxis,
    /// Largest cyclic buffer count among the time-varying functions.
    pub modulus: usize,
}

/// The explicit iteration IR: optional time loop, hoisted precomputations,
/// and ordered body items.
#[derive(Clone)]
pub struct LoopNest {
    pub grid_dims: Vec<Arc<str>>,
    pub grid_shape: Vec<usize>,
    pub hoisted_scalars: Vec<(Sym, Expr)>,
    pub hoisted_fields: Vec<HoistedFieldItem>,
    pub time: Option<TimeLoop>,
    pub items: Vec<BodyItem>,
}

fn apply_subs(e: &Expr, subs: &BTreeMap<Sym, f64>) -> Expr {
    substitute(e, subs)
}

struct DimInfo {
    extent: usize,
    /// Largest |relative offset| seen, None if never accessed relatively.
    reach: Option<i64>,
}

fn scan_access(
    a: &Access,
    dims: &mut BTreeMap<Arc<str>, DimInfo>,
    order: &[Arc<str>],
) -> Result<()> {
    let halo = a.func.halo() as i64;
    for (k, ix) in a.idx.iter().enumerate() {
        let dim = &a.func.dims()[k];
        let extent = a.func.shape()[k];
        if !order.iter().any(|d| d == dim) {
            return Err(Error::ShapeMismatch {
                name: a.name().into(),
                expected: vec![],
                got: vec![extent],
            });
        }
        let entry = dims.entry(dim.clone()).or_insert(DimInfo {
            extent,
            reach: None,
        });
        if entry.extent != extent {
            return Err(Error::ShapeMismatch {
                name: a.name().into(),
                expected: vec![entry.extent],
                got: vec![extent],
            });
        }
        match ix {
            IndexExpr::Rel(o) => {
                let o = *o as i64;
                if o.abs() > halo && a.func.space_order() > 0 {
                    return Err(Error::HaloExceeded {
                        func: a.name().into(),
                        offset: o,
                        halo,
                    });
                }
                let r = entry.reach.get_or_insert(0);
                *r = (*r).max(o.abs());
            }
            IndexExpr::Abs(v) => {
                if *v < 0 || *v >= extent as i64 {
                    return Err(Error::HaloExceeded {
                        func: a.name().into(),
                        offset: *v,
                        halo: extent as i64 - 1,
                    });
                }
            }
        }
    }
    if let Some(t) = a.time {
        if t.unsigned_abs() > a.func.time_order() {
            return Err(Error::HaloExceeded {
                func: a.name().into(),
                offset: t as i64,
                halo: a.func.time_order() as i64,
            });
        }
    }
    Ok(())
}

fn full_extent_loops(meta: &FnMeta) -> Vec<SpaceLoop> {
    meta.dims()
        .iter()
        .zip(meta.shape())
        .map(|(d, n)| SpaceLoop {
            dim: d.clone(),
            extent: *n,
            lo: 0,
            hi: *n as i64,
            block: 0,
        })
        .collect()
}

/// Lower an optimized set plus sparse phases to a loop nest, binding the
/// spacing placeholders numerically.
pub fn schedule(
    set: &OptimizedExprSet,
    sparse: &[SparseOp],
    subs: &BTreeMap<Sym, f64>,
    time_axis: TimeAxis,
) -> Result<LoopNest> {
    // Grid dimension order comes from the widest function in play.
    let mut grid_dims: Vec<Arc<str>> = Vec::new();
    let mut grid_shape: Vec<usize> = Vec::new();
    let mut consider = |meta: &Arc<FnMeta>| {
        if meta.dims().len() > grid_dims.len() {
            grid_dims = meta.dims().to_vec();
            grid_shape = meta.shape().to_vec();
        }
    };
    for a in &set.assigns {
        consider(&a.lhs.func);
        for e in a.temps.iter().map(|(_, e)| e).chain([&a.rhs]) {
            e.for_each_access(&mut |acc| consider(&acc.func));
        }
    }
    for op in sparse {
        consider(&op.field);
    }

    let spacing_syms = [space_spacing(), time_spacing()];
    let mut temp_syms: BTreeSet<Sym> = BTreeSet::new();
    for a in &set.assigns {
        temp_syms.extend(a.temps.iter().map(|(s, _)| s.clone()));
    }
    temp_syms.extend(set.hoisted_scalars.iter().map(|(s, _)| s.clone()));

    let check_spacing = |e: &Expr| -> Result<()> {
        let fs = free_symbols(e);
        for s in &fs.scalars {
            if spacing_syms.contains(s) && !temp_syms.contains(s) {
                return Err(Error::UnboundSpacing(s.name().into()));
            }
        }
        Ok(())
    };

    let mut time_varying = false;
    let mut modulus = 0usize;
    let mut note_time = |meta: &Arc<FnMeta>| {
        if meta.is_time_varying() {
            time_varying = true;
            modulus = modulus.max(meta.buffer_count());
        }
    };

    let mut items: Vec<BodyItem> = Vec::new();
    for a in &set.assigns {
        let mut dims: BTreeMap<Arc<str>, DimInfo> = BTreeMap::new();
        let temps: Vec<(Sym, Expr)> = a
            .temps
            .iter()
            .map(|(s, e)| (s.clone(), apply_subs(e, subs)))
            .collect();
        let rhs = apply_subs(&a.rhs, subs);
        check_spacing(&rhs)?;
        let mut scan_err: Option<Error> = None;
        let mut scan = |acc: &Access| {
            note_time(&acc.func);
            if scan_err.is_none() {
                if let Err(e) = scan_access(acc, &mut dims, &grid_dims) {
                    scan_err = Some(e);
                }
            }
        };
        for (_, e) in &temps {
            check_spacing(e)?;
            e.for_each_access(&mut scan);
        }
        rhs.for_each_access(&mut scan);
        scan(&a.lhs);
        if let Some(e) = scan_err {
            return Err(e);
        }

        let loops: Vec<SpaceLoop> = grid_dims
            .iter()
            .filter_map(|d| {
                let info = dims.get(d)?;
                let reach = info.reach?;
                Some(SpaceLoop {
                    dim: d.clone(),
                    extent: info.extent,
                    lo: reach,
                    hi: info.extent as i64 - reach,
                    block: 0,
                })
            })
            .collect();

        items.push(BodyItem::Stencil(StencilItem {
            loops,
            parallel: true,
            simd: false,
            nontemporal: false,
            temps,
            assigns: vec![(a.lhs.clone(), rhs)],
        }));
    }

    for op in sparse {
        note_time(&op.field);
        let expr = apply_subs(&op.expr, subs);
        check_spacing(&expr)?;
        expr.for_each_access(&mut |acc| note_time(&acc.func));
        items.push(BodyItem::Sparse(SparseOp {
            kind: op.kind,
            points: op.points.clone(),
            field: op.field.clone(),
            expr,
        }));
    }

    let hoisted_scalars: Vec<(Sym, Expr)> = set
        .hoisted_scalars
        .iter()
        .map(|(s, e)| (s.clone(), apply_subs(e, subs)))
        .collect();
    for (_, e) in &hoisted_scalars {
        check_spacing(e)?;
    }
    let hoisted_fields: Vec<HoistedFieldItem> = set
        .hoisted_fields
        .iter()
        .map(|hf| {
            let expr = apply_subs(&hf.expr, subs);
            check_spacing(&expr)?;
            Ok(HoistedFieldItem {
                meta: hf.meta.clone(),
                loops: full_extent_loops(&hf.meta),
                expr,
            })
        })
        .collect::<Result<_>>()?;

    Ok(LoopNest {
        grid_dims,
        grid_shape,
        hoisted_scalars,
        hoisted_fields,
        time: time_varying.then_some(TimeLoop {
            direction: time_axis,
            modulus,
        }),
        items,
    })
}

/// Apply block sizes to every stencil item with at least two space loops.
/// A block covering a whole extent (or zero) leaves that dimension
/// unblocked; the executor and emitter handle remainders with a min() bound,
/// so the iteration set is exactly that of the unblocked nest.
pub fn apply_blocking(nest: &LoopNest, spec: &BlockingSpec) -> LoopNest {
    let mut out = nest.clone();
    for item in &mut out.items {
        let BodyItem::Stencil(st) = item else {
            continue;
        };
        if st.loops.len() < 2 {
            continue;
        }
        for lp in st.loops.iter_mut() {
            let di = out
                .grid_dims
                .iter()
                .position(|d| *d == lp.dim)
                .unwrap_or(usize::MAX);
            let want = spec.blocks.get(di).copied().unwrap_or(0);
            let span = (lp.hi - lp.lo).max(0) as usize;
            lp.block = if want == 0 || want >= span { 0 } else { want };
        }
    }
    out
}

/// Annotate a nest for a loop-engine level; `blocking` applies only at
/// `Advanced` and above.
pub fn apply_dle(nest: &LoopNest, level: DleLevel, blocking: Option<&BlockingSpec>) -> LoopNest {
    match level {
        DleLevel::Basic => nest.clone(),
        DleLevel::Advanced | DleLevel::Speculative => {
            let mut out = match blocking {
                Some(spec) => apply_blocking(nest, spec),
                None => nest.clone(),
            };
            for item in &mut out.items {
                if let BodyItem::Stencil(st) = item {
                    st.simd = !st.loops.is_empty();
                    st.nontemporal = level == DleLevel::Speculative;
                }
            }
            out
        }
    }
}

/// Default auto-tune candidates: unblocked plus square blocks capped by the
/// grid extent, deduplicated after degeneration.
pub fn default_block_candidates(nest: &LoopNest) -> Vec<BlockingSpec> {
    let ndim = nest.grid_dims.len();
    let mut out = vec![BlockingSpec::unblocked(ndim)];
    for b in [8usize, 16, 32, 64] {
        let spec = BlockingSpec::square(ndim, b);
        // A block at or beyond every extent degenerates to unblocked.
        let degenerate = nest
            .grid_shape
            .iter()
            .all(|n| b >= *n);
        if !degenerate && !out.contains(&spec) {
            out.push(spec);
        }
    }
    out
}

/// Time one candidate a few times and keep the median.
fn median_time(runner: &mut dyn FnMut(&LoopNest) -> Duration, nest: &LoopNest) -> Duration {
    let _warmup = runner(nest);
    let mut times: Vec<Duration> = (0..3).map(|_| runner(nest)).collect();
    times.sort();
    times[1]
}

/// Measured runtime of each candidate blocking spec.
#[derive(Clone, Debug)]
pub struct TuneResult {
    pub chosen: BlockingSpec,
    pub timings: Vec<(BlockingSpec, Duration)>,
}

/// Pick the blocking spec with the minimal median runtime over warm-up plus
/// timed runs of the supplied kernel runner.
pub fn autotune_blocks(
    nest: &LoopNest,
    runner: &mut dyn FnMut(&LoopNest) -> Duration,
    candidates: &[BlockingSpec],
) -> TuneResult {
    assert!(!candidates.is_empty(), "need at least one candidate");
    let mut timings = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let blocked = apply_blocking(nest, cand);
        let t = median_time(runner, &blocked);
        timings.push((cand.clone(), t));
    }
    let chosen = timings
        .iter()
        .min_by_key(|(_, t)| *t)
        .map(|(c, _)| c.clone())
        .unwrap();
    TuneResult { chosen, timings }
}

// ---------------------------------------------------------------------------
// Pretty printer
// ---------------------------------------------------------------------------

impl LoopNest {
    /// Deterministic text rendering for debugging and golden tests.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (sym, e) in &self.hoisted_scalars {
            writeln!(s, "const {} = {e}", sym.name()).unwrap();
        }
        for hf in &self.hoisted_fields {
            let spans: Vec<String> = hf
                .loops
                .iter()
                .map(|l| format!("{} in {}..{}", l.dim, l.lo, l.hi))
                .collect();
            writeln!(s, "precompute {}[{}]:", hf.meta.name(), spans.join(", ")).unwrap();
            writeln!(s, "  {} = {}", hf.meta.name(), hf.expr).unwrap();
        }
        if let Some(t) = &self.time {
            writeln!(s, "time loop {} (modulo {})", t.direction.name(), t.modulus).unwrap();
        }
        for (i, item) in self.items.iter().enumerate() {
            match item {
                BodyItem::Stencil(st) => {
                    let mut flags: Vec<&str> = Vec::new();
                    if st.parallel {
                        flags.push("parallel");
                    }
                    if st.simd {
                        flags.push("simd");
                    }
                    if st.nontemporal {
                        flags.push("nontemporal");
                    }
                    writeln!(s, "item {i}: stencil [{}]", flags.join(", ")).unwrap();
                    let mut indent = String::from("  ");
                    for l in &st.loops {
                        if l.block > 0 {
                            writeln!(
                                s,
                                "{indent}for {0}b in {1}..{2} step {3}",
                                l.dim, l.lo, l.hi, l.block
                            )
                            .unwrap();
                            indent.push_str("  ");
                            writeln!(
                                s,
                                "{indent}for {0} in {0}b..min({0}b + {1}, {2})",
                                l.dim, l.block, l.hi
                            )
                            .unwrap();
                        } else {
                            writeln!(s, "{indent}for {} in {}..{}", l.dim, l.lo, l.hi).unwrap();
                        }
                        indent.push_str("  ");
                    }
                    for (sym, e) in &st.temps {
                        writeln!(s, "{indent}{} = {e}", sym.name()).unwrap();
                    }
                    for (lhs, rhs) in &st.assigns {
                        writeln!(s, "{indent}{lhs} = {rhs}").unwrap();
                    }
                }
                BodyItem::Sparse(op) => {
                    let verb = match op.kind {
                        SparseKind::Interpolate => "interpolate",
                        SparseKind::Inject => "inject",
                    };
                    writeln!(
                        s,
                        "item {i}: {verb} {} <-> {} : {}",
                        op.points.name,
                        op.field.name(),
                        op.expr
                    )
                    .unwrap();
                }
            }
        }
        s
    }
}

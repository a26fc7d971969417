//! End-to-end demo pipelines built on the core compiler.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stencilforge_core::dse::{optimize, DseLevel, OptimizedExprSet};
use stencilforge_core::elem::Elem;
use stencilforge_core::emitc::{emit_c, EmitOptions};
use stencilforge_core::exec::{time_level, DataBinding, Operator, RunOptions};
use stencilforge_core::expr::{solve_linear, Equation, Expr, IndexExpr, Sym};
use stencilforge_core::fd::expand_derivatives;
use stencilforge_core::schedule::{
    apply_dle, schedule, BlockingSpec, DleLevel, LoopNest, TimeAxis,
};
use stencilforge_core::sparse::{SparseOp, SparsePointSet};
use stencilforge_core::{Grid, GridFunction};

use crate::model::{init_smooth, ricker, AcousticModel};
use crate::{Error, Result};

/// How a demo kernel is optimized and executed.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub dse: DseLevel,
    pub dle: DleLevel,
    /// Explicit block sizes for the advanced loop engine; a fixed 16-point
    /// square block is used when unset.
    pub blocks: Option<BlockingSpec>,
    pub exec: RunOptions,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline {
            dse: DseLevel::Advanced,
            dle: DleLevel::Advanced,
            blocks: None,
            exec: RunOptions::default(),
        }
    }
}

impl Pipeline {
    pub fn levels(dse: DseLevel, dle: DleLevel) -> Self {
        Pipeline {
            dse,
            dle,
            ..Default::default()
        }
    }

    fn lower(&self, nest: &LoopNest) -> LoopNest {
        let default_blocks = BlockingSpec::square(nest.grid_dims.len(), 16);
        apply_dle(
            nest,
            self.dle,
            Some(self.blocks.as_ref().unwrap_or(&default_blocks)),
        )
    }
}

fn subs2(h: f64, s: f64) -> BTreeMap<Sym, f64> {
    let mut m = BTreeMap::new();
    m.insert(Sym::new("h"), h);
    m.insert(Sym::new("s"), s);
    m
}

/// Highest value of a field buffer and its grid index.
#[derive(Clone, Debug)]
pub struct Peak {
    pub idx: Vec<usize>,
    pub value: f64,
}

fn peak_of<T: Elem>(buf: &[T], shape: &[usize]) -> Peak {
    let mut best = 0usize;
    for (i, v) in buf.iter().enumerate() {
        if v.to_f64() > buf[best].to_f64() {
            best = i;
        }
    }
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len() - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    Peak {
        idx: (0..shape.len()).map(|d| (best / strides[d]) % shape[d]).collect(),
        value: buf[best].to_f64(),
    }
}

// ---------------------------------------------------------------------------
// Convection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvectionConfig {
    pub nx: usize,
    pub ny: usize,
    pub steps: usize,
    pub c: f64,
    pub dx: f64,
    pub dt: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ConvectionConfig {
    fn default() -> Self {
        ConvectionConfig {
            nx: 81,
            ny: 81,
            steps: 100,
            c: 1.0,
            dx: 2.0 / 80.0,
            dt: 0.2 * (2.0 / 80.0),
            out_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct ConvectionResult {
    pub steps: usize,
    pub initial_peak: Peak,
    pub final_peak: Peak,
    pub field: Vec<f64>,
    pub dumps: Vec<PathBuf>,
}

/// Convection update set: solve `u_t + c·u_xl + c·u_yl = 0` for the forward
/// stencil point.
pub fn convection_set(
    nx: usize,
    ny: usize,
    c: f64,
    dse: DseLevel,
) -> Result<(GridFunction<f64>, OptimizedExprSet)> {
    let grid = Grid::regular(&[nx, ny], 1.0);
    let u = grid.time_function::<f64>("u", 1, 2);
    let c = Expr::num(c);
    let lhs = u.dt() + c.clone() * u.dxl() + c * u.dyl();
    let discrete = expand_derivatives(&lhs)?;
    let stencil = solve_linear(&Equation::zero(discrete), &u.forward_access())?;
    let set = optimize(&[Equation::new(u.forward(), stencil)], dse)?;
    Ok((u, set))
}

pub fn demo_convection(cfg: &ConvectionConfig, pipe: &Pipeline) -> Result<ConvectionResult> {
    let cf = cfg.c * cfg.dt / cfg.dx;
    if cf > 1.0 {
        return Err(Error::CflViolation {
            dt: cfg.dt,
            limit: cfg.dx / cfg.c,
        });
    }

    let (_, set) = convection_set(cfg.nx, cfg.ny, cfg.c, pipe.dse)?;
    let nest = schedule(&set, &[], &subs2(cfg.dx, cfg.dt), TimeAxis::Forward)?;
    let op = Operator::build(pipe.lower(&nest))?;

    let grid = Grid::regular(&[cfg.nx, cfg.ny], cfg.dx);
    let mut u = grid.time_function::<f64>("u", 1, 2);
    u.set_from(|c| init_smooth(c[0], c[1]));

    let shape = vec![cfg.nx, cfg.ny];
    let initial_peak = peak_of(u.buffer(0), &shape);

    let mut dumps = Vec::new();
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(stencilforge_core::Error::Io)?;
        let p = dir.join("convection_initial.csv");
        u.dump_csv(0, &p)?;
        dumps.push(p);
    }

    let mut binding = DataBinding::new().field(&mut u);
    op.run(&mut binding, cfg.steps, &pipe.exec)?;

    let level = time_level(u.meta(), cfg.steps as i64);
    let final_peak = peak_of(u.buffer(level), &shape);
    let field = u.buffer(level).to_vec();

    if let Some(dir) = &cfg.out_dir {
        let p = dir.join("convection_final.csv");
        u.dump_csv(level, &p)?;
        dumps.push(p);
        let b = dir.join("convection_final.bin");
        u.dump_binary(level, &b)?;
        dumps.push(b);
    }

    Ok(ConvectionResult {
        steps: cfg.steps,
        initial_peak,
        final_peak,
        field,
        dumps,
    })
}

// ---------------------------------------------------------------------------
// Laplace
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LaplaceConfig {
    pub nx: usize,
    pub ny: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig {
            nx: 31,
            ny: 31,
            tol: 1e-4,
            max_iters: 100_000,
            out_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct LaplaceResult {
    pub iterations: usize,
    pub last_change: f64,
    pub field: Vec<f64>,
    pub dumps: Vec<PathBuf>,
}

/// Jacobi update from `a·pn_xx + pn_yy = 0` plus the boundary rows: fixed
/// zero on one edge, a prescribed profile on the opposite edge, and copied
/// neighbor rows on the remaining two.
pub fn laplace_set(nx: usize, ny: usize, dse: DseLevel) -> Result<OptimizedExprSet> {
    let grid = Grid::regular(&[nx, ny], 1.0);
    let p = grid.function::<f64>("p", 2);
    let pn = grid.function::<f64>("pn", 2);
    let bc_right = grid.function_on::<f64>("bc_right", &["x"]);
    let lhs = Expr::sym("a") * pn.dx2() + pn.dy2();
    let discrete = expand_derivatives(&lhs)?;
    let center = match pn.at() {
        Expr::Access(a) => a,
        _ => unreachable!(),
    };
    let stencil = solve_linear(&Equation::zero(discrete), &center)?;
    let nxl = nx as i64;
    let nyl = ny as i64;
    let eqs = vec![
        Equation::new(p.at(), stencil),
        Equation::new(p.idx(&[IndexExpr::Rel(0), IndexExpr::Abs(0)]), Expr::num(0.0)),
        Equation::new(
            p.idx(&[IndexExpr::Rel(0), IndexExpr::Abs(nyl - 1)]),
            bc_right.idx(&[IndexExpr::Rel(0)]),
        ),
        Equation::new(
            p.idx(&[IndexExpr::Abs(0), IndexExpr::Rel(0)]),
            p.idx(&[IndexExpr::Abs(1), IndexExpr::Rel(0)]),
        ),
        Equation::new(
            p.idx(&[IndexExpr::Abs(nxl - 1), IndexExpr::Rel(0)]),
            p.idx(&[IndexExpr::Abs(nxl - 2), IndexExpr::Rel(0)]),
        ),
    ];
    Ok(optimize(&eqs, dse)?)
}

pub fn demo_laplace(cfg: &LaplaceConfig, pipe: &Pipeline) -> Result<LaplaceResult> {
    assert!(cfg.tol > 0.0, "tolerance must be positive");
    let set = laplace_set(cfg.nx, cfg.ny, pipe.dse)?;
    let mut subs = BTreeMap::new();
    subs.insert(Sym::new("a"), 1.0);
    subs.insert(Sym::new("h"), 1.0);
    let nest = schedule(&set, &[], &subs, TimeAxis::Forward)?;
    let op = Operator::build(pipe.lower(&nest))?;

    let grid = Grid::regular(&[cfg.nx, cfg.ny], 1.0);
    let mut pa = grid.function::<f64>("p", 2);
    let mut pb = grid.function::<f64>("pn", 2);
    let mut bc = grid.function_on::<f64>("bc_right", &["x"]);
    for i in 0..cfg.nx {
        bc.buffer_mut(0)[i] = i as f64 / (cfg.nx - 1) as f64;
    }

    let sum_abs = |b: &[f64]| b.iter().map(|v| v.abs()).sum::<f64>();
    let mut last_change = f64::INFINITY;
    let mut iterations = 0usize;
    loop {
        if iterations >= cfg.max_iters {
            return Err(Error::NonConvergence {
                iterations,
                last_change,
            });
        }
        // Alternate which buffer plays the updated role.
        let (wp, rp) = if iterations % 2 == 0 {
            (&mut pa, &mut pb)
        } else {
            (&mut pb, &mut pa)
        };
        {
            let mut binding = DataBinding::new()
                .field_as("p", wp)
                .field_as("pn", rp)
                .field_as("bc_right", &mut bc);
            op.run(&mut binding, 1, &pipe.exec)?;
        }
        last_change =
            (sum_abs(wp.buffer(0)) - sum_abs(rp.buffer(0))) / sum_abs(rp.buffer(0));
        iterations += 1;
        if last_change < cfg.tol {
            break;
        }
    }

    let final_fn = if (iterations - 1) % 2 == 0 { &pa } else { &pb };
    let field = final_fn.buffer(0).to_vec();
    let mut dumps = Vec::new();
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(stencilforge_core::Error::Io)?;
        let p = dir.join("laplace_final.csv");
        final_fn.dump_csv(0, &p)?;
        dumps.push(p);
    }

    Ok(LaplaceResult {
        iterations,
        last_change,
        field,
        dumps,
    })
}

// ---------------------------------------------------------------------------
// Acoustic forward / adjoint
// ---------------------------------------------------------------------------

/// Forward or adjoint acoustic wave operator pieces.
struct WaveKernel {
    set: OptimizedExprSet,
    sparse: Vec<SparseOp>,
    axis: TimeAxis,
}

/// `m·u_tt + η·u_t - ∇²u = 0` solved for the forward stencil point, with the
/// source injected (scaled by `dt²/m`) and receivers interpolated from the
/// freshly written level.
fn forward_kernel<T: Elem>(
    grid: &Grid,
    order: u32,
    src: &SparsePointSet<T>,
    rec: &SparsePointSet<T>,
    dse: DseLevel,
) -> Result<WaveKernel> {
    let u = grid.time_function::<f64>("u", 2, order);
    let m = grid.function::<f64>("m", order);
    let eta = grid.function::<f64>("eta", order);
    let eqn = m.at() * u.dt2() - u.laplace() + eta.at() * u.dt();
    let discrete = expand_derivatives(&eqn)?;
    let stencil = solve_linear(&Equation::zero(discrete), &u.forward_access())?;
    let set = optimize(&[Equation::new(u.forward(), stencil)], dse)?;

    let inject_expr = src.value_sym() * Expr::sym("s").pow(2) / m.at();
    let sparse = vec![
        src.inject(u.meta(), inject_expr),
        rec.interpolate(u.meta(), u.at()),
    ];
    Ok(WaveKernel {
        set,
        sparse,
        axis: TimeAxis::Forward,
    })
}

/// The adjoint propagator: dampening sign inverted, recorded receiver data
/// injected, the wavefield read back at the source location, and the time
/// loop reversed.
fn adjoint_kernel<T: Elem>(
    grid: &Grid,
    order: u32,
    rec: &SparsePointSet<T>,
    srca: &SparsePointSet<T>,
    dse: DseLevel,
) -> Result<WaveKernel> {
    let v = grid.time_function::<f64>("v", 2, order);
    let m = grid.function::<f64>("m", order);
    let eta = grid.function::<f64>("eta", order);
    let eqn = m.at() * v.dt2() - v.laplace() - eta.at() * v.dt();
    let discrete = expand_derivatives(&eqn)?;
    let stencil = solve_linear(&Equation::zero(discrete), &v.backward_access())?;
    let set = optimize(&[Equation::new(v.backward(), stencil)], dse)?;

    let inject_expr = rec.value_sym() * Expr::sym("s").pow(2) / m.at();
    let sparse = vec![
        rec.inject(v.meta(), inject_expr),
        srca.interpolate(v.meta(), v.at()),
    ];
    Ok(WaveKernel {
        set,
        sparse,
        axis: TimeAxis::Backward,
    })
}

fn build_wave_op(kernel: &WaveKernel, spacing: f64, dt: f64, pipe: &Pipeline) -> Result<Operator> {
    let nest = schedule(&kernel.set, &kernel.sparse, &subs2(spacing, dt), kernel.axis)?;
    Ok(Operator::build(pipe.lower(&nest))?)
}

#[derive(Clone, Debug)]
pub struct AdjointReport {
    /// ⟨src, adjoint(rec)⟩
    pub lhs: f64,
    /// ⟨forward(src), rec⟩
    pub rhs: f64,
    pub relative_mismatch: f64,
}

#[derive(Debug)]
pub struct AcousticResult<T: Elem> {
    pub steps: usize,
    /// Receiver traces, ntime x nrec.
    pub rec: Vec<T>,
    pub adjoint: Option<AdjointReport>,
    pub final_field: Vec<T>,
    pub dumps: Vec<PathBuf>,
}

pub fn demo_acoustic<T: Elem>(
    model: &AcousticModel,
    order: u32,
    adjoint_test: bool,
    out_dir: Option<&Path>,
    pipe: &Pipeline,
) -> Result<AcousticResult<T>> {
    model.validate()?;
    let ndim = model.shape.len();
    let grid = Grid::regular(&model.shape, model.spacing);

    let mut src = SparsePointSet::<T>::new("src", model.ntime, model.src_coords.len(), ndim);
    for (p, c) in model.src_coords.iter().enumerate() {
        src.set_coord(p, c);
    }
    for t in 0..model.ntime {
        let v = ricker(t as f64 * model.dt, model.f0);
        src.set_value(t, 0, T::from_f64(v));
    }
    let mut rec = SparsePointSet::<T>::new("rec", model.ntime, model.rec_coords.len(), ndim);
    for (p, c) in model.rec_coords.iter().enumerate() {
        rec.set_coord(p, c);
    }

    let fwd = forward_kernel(&grid, order, &src, &rec, pipe.dse)?;
    let op = build_wave_op(&fwd, model.spacing, model.dt, pipe)?;

    let mut u = grid.time_function::<T>("u", 2, order);
    let mut m = grid.function::<T>("m", order);
    let mut eta = grid.function::<T>("eta", order);
    for (i, v) in model.m.iter().enumerate() {
        m.buffer_mut(0)[i] = T::from_f64(*v);
    }
    for (i, v) in model.eta.iter().enumerate() {
        eta.buffer_mut(0)[i] = T::from_f64(*v);
    }

    {
        let mut binding = DataBinding::new()
            .field(&mut u)
            .field(&mut m)
            .field(&mut eta)
            .points(&mut src)
            .points(&mut rec);
        op.run(&mut binding, model.ntime, &pipe.exec)?;
    }

    let level = time_level(u.meta(), model.ntime as i64);
    let final_field = u.buffer(level).to_vec();

    let adjoint = if adjoint_test {
        let rhs: f64 = rec.values().iter().map(|v| v.to_f64() * v.to_f64()).sum();

        let mut srca = SparsePointSet::<T>::new("srca", model.ntime, 1, ndim);
        srca.set_coord(0, &model.src_coords[0]);
        let adj = adjoint_kernel(&grid, order, &rec, &srca, pipe.dse)?;
        let adj_op = build_wave_op(&adj, model.spacing, model.dt, pipe)?;
        let mut v = grid.time_function::<T>("v", 2, order);
        {
            let mut binding = DataBinding::new()
                .field(&mut v)
                .field(&mut m)
                .field(&mut eta)
                .points(&mut rec)
                .points(&mut srca);
            adj_op.run(&mut binding, model.ntime, &pipe.exec)?;
        }
        let lhs: f64 = (0..model.ntime)
            .map(|t| src.value(t, 0).to_f64() * srca.value(t, 0).to_f64())
            .sum();
        Some(AdjointReport {
            lhs,
            rhs,
            relative_mismatch: (lhs - rhs).abs() / rhs.abs(),
        })
    } else {
        None
    };

    let mut dumps = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(stencilforge_core::Error::Io)?;
        let p = dir.join("acoustic_rec.csv");
        rec.store_csv(&p)?;
        dumps.push(p);
        let b = dir.join("acoustic_u_final.bin");
        u.dump_binary(level, &b)?;
        dumps.push(b);
    }

    Ok(AcousticResult {
        steps: model.ntime,
        rec: rec.values().to_vec(),
        adjoint,
        final_field,
        dumps,
    })
}

/// Forward kernel pieces for the benchmark harness: the optimized set and
/// its sparse phases.
pub fn forward_kernel_for_bench<T: Elem>(
    grid: &Grid,
    order: u32,
    src: &SparsePointSet<T>,
    rec: &SparsePointSet<T>,
    dse: DseLevel,
) -> Result<(OptimizedExprSet, Vec<SparseOp>)> {
    let k = forward_kernel(grid, order, src, rec, dse)?;
    Ok((k.set, k.sparse))
}

// ---------------------------------------------------------------------------
// Code generation entry point
// ---------------------------------------------------------------------------

/// Scheduled (pre-execution) nest of a named demo kernel under the given
/// optimization levels, with the default grid sizes.
pub fn demo_nest(id: &str, dse: DseLevel, dle: DleLevel) -> Result<LoopNest> {
    let pipe = Pipeline {
        dse,
        dle,
        blocks: None,
        exec: RunOptions::default(),
    };
    match id {
        "convection" => {
            let cfg = ConvectionConfig::default();
            let (_, set) = convection_set(cfg.nx, cfg.ny, cfg.c, dse)?;
            let nest = schedule(&set, &[], &subs2(cfg.dx, cfg.dt), TimeAxis::Forward)?;
            Ok(pipe.lower(&nest))
        }
        "laplace" => {
            let cfg = LaplaceConfig::default();
            let set = laplace_set(cfg.nx, cfg.ny, dse)?;
            let mut subs = BTreeMap::new();
            subs.insert(Sym::new("a"), 1.0);
            subs.insert(Sym::new("h"), 1.0);
            let nest = schedule(&set, &[], &subs, TimeAxis::Forward)?;
            Ok(pipe.lower(&nest))
        }
        "acoustic" => {
            let model = AcousticModel::two_layer(&[61, 61], 15.0, 1.5, 2.5, 10, 101, 200, 0.010, 0.0, 3);
            let grid = Grid::regular(&model.shape, model.spacing);
            let src = SparsePointSet::<f64>::new("src", model.ntime, 1, 2);
            let rec = SparsePointSet::<f64>::new("rec", model.ntime, model.rec_coords.len(), 2);
            let k = forward_kernel(&grid, 2, &src, &rec, dse)?;
            let nest = schedule(&k.set, &k.sparse, &subs2(model.spacing, model.dt), k.axis)?;
            Ok(pipe.lower(&nest))
        }
        other => Err(Error::UnknownDemo(other.into())),
    }
}

/// Write the generated C for a demo kernel; byte-stable across runs.
pub fn cmd_codegen(id: &str, dse: DseLevel, dle: DleLevel, out: &Path) -> Result<()> {
    let nest = demo_nest(id, dse, dle)?;
    let src = emit_c(
        &nest,
        &EmitOptions {
            kernel_name: format!("kernel_{id}"),
            elem: "double".into(),
        },
    );
    std::fs::write(out, src).map_err(stencilforge_core::Error::Io)?;
    Ok(())
}

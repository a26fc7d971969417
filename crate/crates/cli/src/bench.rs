//! Benchmark matrix over (space order, symbolic level, loop level) on the
//! acoustic forward kernel, with block-size auto-tuning at the advanced loop
//! level and JSON-lines reporting.

use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use stencilforge_core::dse::{flop_count, DseLevel};
use stencilforge_core::exec::{
    iterated_points, median_runtime, BenchReport, DataBinding, Operator, RunOptions,
};
use stencilforge_core::schedule::{
    apply_dle, autotune_blocks, default_block_candidates, schedule, DleLevel, LoopNest,
};
use stencilforge_core::sparse::SparsePointSet;
use stencilforge_core::Grid;

use crate::model::{ricker, AcousticModel};
use crate::Result;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub shape: Vec<usize>,
    pub orders: Vec<u32>,
    pub dse: Vec<DseLevel>,
    pub dle: Vec<DleLevel>,
    /// Time steps per timed run.
    pub steps: usize,
    /// Timed runs per configuration (after one warm-up).
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            shape: vec![64, 64, 64],
            orders: vec![2, 4],
            dse: vec![DseLevel::Basic, DseLevel::Advanced],
            dle: vec![DleLevel::Basic, DleLevel::Advanced],
            steps: 5,
            runs: 3,
        }
    }
}

struct BenchData {
    model: AcousticModel,
    grid: Grid,
}

fn bench_model(shape: &[usize], steps: usize) -> BenchData {
    let nrec = 32;
    let model = AcousticModel::two_layer(shape, 15.0, 1.5, 2.5, 0, nrec, steps, 0.010, 0.0, 3);
    let grid = Grid::regular(shape, model.spacing);
    BenchData { model, grid }
}

/// Time one run of `op` on fresh data.
fn timed_run(op: &Operator, data: &BenchData, order: u32, opts: &RunOptions) -> Duration {
    let model = &data.model;
    let ndim = model.shape.len();
    let mut u = data.grid.time_function::<f64>("u", 2, order);
    let mut m = data.grid.function::<f64>("m", order);
    let mut eta = data.grid.function::<f64>("eta", order);
    for (i, v) in model.m.iter().enumerate() {
        m.buffer_mut(0)[i] = *v;
    }
    for (i, v) in model.eta.iter().enumerate() {
        eta.buffer_mut(0)[i] = *v;
    }
    let mut src = SparsePointSet::<f64>::new("src", model.ntime, 1, ndim);
    src.set_coord(0, &model.src_coords[0]);
    for t in 0..model.ntime {
        src.set_value(t, 0, ricker(t as f64 * model.dt, model.f0));
    }
    let mut rec = SparsePointSet::<f64>::new("rec", model.ntime, model.rec_coords.len(), ndim);
    for (p, c) in model.rec_coords.iter().enumerate() {
        rec.set_coord(p, c);
    }
    let mut binding = DataBinding::new()
        .field(&mut u)
        .field(&mut m)
        .field(&mut eta)
        .points(&mut src)
        .points(&mut rec);
    op.run(&mut binding, model.ntime, opts)
        .expect("bench kernel run")
        .wall
}

/// Run the full matrix; one report row per (order, dse, dle) combination.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchReport>> {
    let opts = RunOptions::default();
    let data = bench_model(&cfg.shape, cfg.steps);
    let mut rows = Vec::new();

    for &order in &cfg.orders {
        for &dse in &cfg.dse {
            // Kernel structure is shared across loop levels.
            let src = SparsePointSet::<f64>::new("src", cfg.steps, 1, cfg.shape.len());
            let rec = SparsePointSet::<f64>::new(
                "rec",
                cfg.steps,
                data.model.rec_coords.len(),
                cfg.shape.len(),
            );
            let kern = crate::demos::forward_kernel_for_bench(&data.grid, order, &src, &rec, dse)?;
            let report = flop_count(&kern.0, 8);
            let mut subs = std::collections::BTreeMap::new();
            subs.insert(stencilforge_core::Sym::new("h"), data.model.spacing);
            subs.insert(stencilforge_core::Sym::new("s"), data.model.dt);
            let nest = schedule(
                &kern.0,
                &kern.1,
                &subs,
                stencilforge_core::schedule::TimeAxis::Forward,
            )?;

            for &dle in &cfg.dle {
                let (lowered, block_label): (LoopNest, String) = match dle {
                    DleLevel::Basic => (apply_dle(&nest, dle, None), "unblocked".into()),
                    DleLevel::Advanced | DleLevel::Speculative => {
                        let candidates = default_block_candidates(&nest);
                        let mut runner = |cand_nest: &LoopNest| {
                            let annotated = apply_dle(cand_nest, dle, None);
                            let op = Operator::build(annotated).expect("bench compile");
                            timed_run(&op, &data, order, &opts)
                        };
                        let tune = autotune_blocks(&nest, &mut runner, &candidates);
                        (
                            apply_dle(&nest, dle, Some(&tune.chosen)),
                            tune.chosen.label(),
                        )
                    }
                };
                let op = Operator::build(lowered)?;
                let mut run_once = || timed_run(&op, &data, order, &opts);
                let t = median_runtime(&mut run_once, cfg.runs);
                let points = iterated_points(&op.nest);
                let runtime = t.as_secs_f64().max(1e-12);
                rows.push(BenchReport {
                    kernel: "acoustic".into(),
                    shape: cfg.shape.clone(),
                    space_order: order,
                    dse: dse.name().into(),
                    dle: dle.name().into(),
                    elem: "f64".into(),
                    steps: cfg.steps,
                    points,
                    runtime_sec: runtime,
                    flops_per_point: report.flops,
                    gflops: report.flops as f64 * points as f64 * cfg.steps as f64
                        / runtime
                        / 1e9,
                    oi: report.oi,
                    block: block_label,
                });
            }
        }
    }
    Ok(rows)
}

/// Append one JSON object per row.
pub fn write_json_lines(rows: &[BenchReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(stencilforge_core::Error::Io)?;
    for row in rows {
        let line = serde_json::to_string(row).expect("report serializes");
        writeln!(f, "{line}").map_err(stencilforge_core::Error::Io)?;
    }
    Ok(())
}

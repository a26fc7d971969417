//! Demo-level behavior: invariants of the worked examples beyond the
//! acceptance gate.

use std::sync::Arc;

use stencilforge::demos::{
    demo_acoustic, demo_convection, demo_laplace, forward_kernel_for_bench, ConvectionConfig,
    LaplaceConfig, Pipeline,
};
use stencilforge::model::AcousticModel;
use stencilforge_core::dse::{optimize, DseLevel};
use stencilforge_core::exec::{DataBinding, Operator, RunOptions};
use stencilforge_core::expr::{solve_linear, Access, Equation, Expr};
use stencilforge_core::fd::expand_derivatives;
use stencilforge_core::schedule::{schedule, DleLevel, TimeAxis};
use stencilforge_core::sparse::SparsePointSet;
use stencilforge_core::{FnMeta, Grid};

fn combos() -> [(DseLevel, DleLevel); 4] {
    [
        (DseLevel::Basic, DleLevel::Basic),
        (DseLevel::Basic, DleLevel::Advanced),
        (DseLevel::Advanced, DleLevel::Basic),
        (DseLevel::Advanced, DleLevel::Advanced),
    ]
}

#[test]
fn convection_zero_steps_is_bitwise_identity() {
    let cfg = ConvectionConfig {
        steps: 0,
        ..Default::default()
    };
    let r = demo_convection(&cfg, &Pipeline::default()).unwrap();
    assert_eq!(r.initial_peak.idx, r.final_peak.idx);
    assert_eq!(r.initial_peak.value, r.final_peak.value);
    // The final field is exactly the initial condition.
    let grid = Grid::regular(&[cfg.nx, cfg.ny], cfg.dx);
    let mut u = grid.time_function::<f64>("u", 1, 2);
    u.set_from(|c| stencilforge::model::init_smooth(c[0], c[1]));
    assert_eq!(r.field, u.buffer(0));
}

#[test]
fn convection_and_laplace_agree_across_levels() {
    let reference = demo_convection(
        &ConvectionConfig::default(),
        &Pipeline::levels(DseLevel::Basic, DleLevel::Basic),
    )
    .unwrap();
    for (dse, dle) in combos() {
        let r = demo_convection(&ConvectionConfig::default(), &Pipeline::levels(dse, dle)).unwrap();
        for (x, y) in reference.field.iter().zip(&r.field) {
            assert!(
                (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
                "convection {dse:?}/{dle:?}: {x} vs {y}"
            );
        }
    }

    let lref = demo_laplace(
        &LaplaceConfig::default(),
        &Pipeline::levels(DseLevel::Basic, DleLevel::Basic),
    )
    .unwrap();
    for (dse, dle) in combos() {
        let r = demo_laplace(&LaplaceConfig::default(), &Pipeline::levels(dse, dle)).unwrap();
        assert_eq!(lref.iterations, r.iterations, "{dse:?}/{dle:?}");
        for (x, y) in lref.field.iter().zip(&r.field) {
            assert!(
                (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
                "laplace {dse:?}/{dle:?}: {x} vs {y}"
            );
        }
    }
}

#[test]
fn acoustic_zero_source_keeps_zero_field() {
    let model = AcousticModel::two_layer(&[31, 31], 15.0, 1.5, 2.5, 0, 8, 40, 0.010, 0.0, 3);
    let grid = Grid::regular(&model.shape, model.spacing);
    let mut src = SparsePointSet::<f64>::new("src", model.ntime, 1, 2);
    src.set_coord(0, &model.src_coords[0]);
    let mut rec = SparsePointSet::<f64>::new("rec", model.ntime, 8, 2);
    for (p, c) in model.rec_coords.iter().enumerate() {
        rec.set_coord(p, c);
    }
    let (set, sparse) = forward_kernel_for_bench(&grid, 2, &src, &rec, DseLevel::Advanced).unwrap();
    let mut subs = std::collections::BTreeMap::new();
    subs.insert(stencilforge_core::Sym::new("h"), model.spacing);
    subs.insert(stencilforge_core::Sym::new("s"), model.dt);
    let nest = schedule(&set, &sparse, &subs, TimeAxis::Forward).unwrap();
    let op = Operator::build(nest).unwrap();

    let mut u = grid.time_function::<f64>("u", 2, 2);
    let mut m = grid.function::<f64>("m", 2);
    let mut eta = grid.function::<f64>("eta", 2);
    for (i, v) in model.m.iter().enumerate() {
        m.buffer_mut(0)[i] = *v;
    }
    let mut binding = DataBinding::new()
        .field(&mut u)
        .field(&mut m)
        .field(&mut eta)
        .points(&mut src)
        .points(&mut rec);
    op.run(&mut binding, model.ntime, &RunOptions::default()).unwrap();
    for l in 0..3 {
        assert!(u.buffer(l).iter().all(|v| *v == 0.0));
    }
    assert!(rec.values().iter().all(|v| *v == 0.0));
}

#[test]
fn receiver_records_after_the_travel_time() {
    // Constant-velocity medium: the first receiver sits a known distance
    // from the source, so nothing significant may arrive earlier than the
    // wavelet delay plus the travel time.
    let model = AcousticModel::two_layer(&[61, 61], 15.0, 1.5, 1.5, 0, 101, 220, 0.010, 0.0, 3);
    let r = demo_acoustic::<f64>(&model, 2, false, None, &Pipeline::default()).unwrap();
    let nrec = model.rec_coords.len();
    let trace: Vec<f64> = (0..model.ntime).map(|t| r.rec[t * nrec]).collect();

    let dx = model.rec_coords[0][0] - model.src_coords[0][0];
    let dy = model.rec_coords[0][1] - model.src_coords[0][1];
    let dist = (dx * dx + dy * dy).sqrt();
    let v = 1.5;
    let t_expect = 1.0 / model.f0 + dist / v; // wavelet peak delay + travel
    let quiet_steps = (0.5 * t_expect / model.dt) as usize;

    let peak = trace.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    assert!(peak > 0.0, "receiver stayed silent");
    let early = trace[..quiet_steps]
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max);
    assert!(
        early <= 1e-3 * peak,
        "signal before the earliest arrival: {early} vs peak {peak}"
    );
    let argmax = trace
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap()
        .0;
    assert!(argmax > quiet_steps, "peak arrived unphysically early");
}

/// Rename accesses of `from` to `to` and negate their time offsets.
fn reversed(e: &Expr, from: &Arc<FnMeta>, to: &Arc<FnMeta>) -> Expr {
    match e {
        Expr::Access(a) if a.func == *from => Expr::Access(Access {
            func: to.clone(),
            time: a.time.map(|t| -t),
            idx: a.idx.clone(),
        }),
        Expr::Const(_) | Expr::Sym(_) | Expr::Access(_) => e.clone(),
        Expr::Pow(b, k) => Expr::Pow(Box::new(reversed(b, from, to)), *k),
        Expr::Mul(ops) => Expr::Mul(ops.iter().map(|o| reversed(o, from, to)).collect()),
        Expr::Add(ops) => Expr::Add(ops.iter().map(|o| reversed(o, from, to)).collect()),
        Expr::Div(n, d) => Expr::Div(
            Box::new(reversed(n, from, to)),
            Box::new(reversed(d, from, to)),
        ),
        Expr::Deriv(_) => panic!("discretized input expected"),
    }
}

#[test]
fn undamped_adjoint_is_the_time_reversed_forward() {
    // Without dampening the wave operator is self-adjoint: the backward
    // update must be the forward update with the time offsets negated.
    for order in [2u32, 4] {
        let grid = Grid::regular(&[61, 61], 15.0);
        let u = grid.time_function::<f64>("u", 2, order);
        let m = grid.function::<f64>("m", order);
        let fwd_eq = m.at() * u.dt2() - u.laplace();
        let fwd = solve_linear(
            &Equation::zero(expand_derivatives(&fwd_eq).unwrap()),
            &u.forward_access(),
        )
        .unwrap();

        let v = grid.time_function::<f64>("v", 2, order);
        let adj_eq = m.at() * v.dt2() - v.laplace();
        let adj = solve_linear(
            &Equation::zero(expand_derivatives(&adj_eq).unwrap()),
            &v.backward_access(),
        )
        .unwrap();

        let mapped = stencilforge_core::expr::simplify(&reversed(&adj, v.meta(), u.meta()));
        assert_eq!(mapped, fwd, "order {order}");
    }
}

#[test]
fn adjoint_test_holds_in_single_precision() {
    let model = AcousticModel::two_layer(&[61, 61], 15.0, 1.5, 2.5, 0, 101, 200, 0.010, 0.0, 3);
    let r = demo_acoustic::<f32>(&model, 2, true, None, &Pipeline::default()).unwrap();
    let ad = r.adjoint.unwrap();
    assert!(
        ad.relative_mismatch <= 1e-4,
        "f32 mismatch {}",
        ad.relative_mismatch
    );
}

#[test]
fn demo_outputs_are_written_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ConvectionConfig {
        steps: 10,
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let r = demo_convection(&cfg, &Pipeline::default()).unwrap();
    assert_eq!(r.dumps.len(), 3);
    for d in &r.dumps {
        assert!(d.exists(), "{} missing", d.display());
    }
    // Binary dump round-trips into a fresh function.
    let grid = Grid::regular(&[cfg.nx, cfg.ny], cfg.dx);
    let mut u = grid.time_function::<f64>("u", 1, 2);
    u.load_binary(0, &r.dumps[2]).unwrap();
    assert_eq!(u.buffer(0), &r.field[..]);
}

#[test]
fn unknown_demo_exits_with_usage_code() {
    let exe = env!("CARGO_BIN_EXE_stencilforge");
    let out = std::process::Command::new(exe)
        .args(["codegen", "--demo", "vortex", "--output", "/tmp/x.c"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown demo"), "stderr: {err}");
}

#[test]
fn laplace_hits_the_iteration_cap() {
    let cfg = LaplaceConfig {
        max_iters: 3,
        ..Default::default()
    };
    match demo_laplace(&cfg, &Pipeline::default()) {
        Err(stencilforge::Error::NonConvergence { iterations, .. }) => assert_eq!(iterations, 3),
        other => panic!("expected NonConvergence, got {other:?}"),
    }
}

#[test]
fn convection_rejects_unstable_time_steps() {
    let cfg = ConvectionConfig {
        dt: 1.0,
        ..Default::default()
    };
    assert!(matches!(
        demo_convection(&cfg, &Pipeline::default()),
        Err(stencilforge::Error::CflViolation { .. })
    ));
}

#[test]
fn thread_count_override_is_deterministic() {
    let exe = env!("CARGO_BIN_EXE_stencilforge");
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = std::process::Command::new(exe)
            .env("STENCILFORGE_THREADS", threads)
            .args([
                "demo",
                "convection",
                "--nx",
                "41",
                "--ny",
                "41",
                "--steps",
                "20",
                "--out-dir",
            ])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("convection_final.bin")).unwrap()
    };
    let single = run("1", "single");
    let quad = run("4", "quad");
    assert_eq!(single, quad, "parallel runs must be bit-identical");
}

#[test]
fn cli_reports_nonconvergence_with_exit_code_1() {
    let exe = env!("CARGO_BIN_EXE_stencilforge");
    let out = std::process::Command::new(exe)
        .args(["demo", "laplace", "--max-iters", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

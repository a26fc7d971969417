use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stencilforge::bench::{run_bench, write_json_lines, BenchConfig};
use stencilforge::demos::{
    cmd_codegen, demo_acoustic, demo_convection, demo_laplace, AcousticResult, ConvectionConfig,
    LaplaceConfig, Pipeline,
};
use stencilforge::model::AcousticModel;
use stencilforge::Error;
use stencilforge_core::dse::DseLevel;
use stencilforge_core::schedule::DleLevel;

#[derive(Parser)]
#[command(name = "stencilforge", version, about = "Symbolic finite-difference stencil compiler demos")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a worked example end to end.
    Demo {
        #[command(subcommand)]
        which: DemoCmd,
    },
    /// Emit the generated C of a demo kernel.
    Codegen {
        /// Demo id: convection, laplace or acoustic.
        #[arg(long)]
        demo: String,
        #[arg(long, default_value = "advanced", value_parser = parse_dse)]
        dse: DseLevel,
        #[arg(long, default_value = "advanced", value_parser = parse_dle)]
        dle: DleLevel,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the benchmark matrix and write JSON-lines rows.
    Bench {
        /// Grid shape, e.g. 64,64,64
        #[arg(long, value_delimiter = ',', value_parser = parse_shape, default_value = "64,64,64")]
        shape: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [2u32, 4])]
        orders: Vec<u32>,
        #[arg(long, value_delimiter = ',', value_parser = parse_dse, default_value = "basic,advanced")]
        dse: Vec<DseLevel>,
        #[arg(long, value_delimiter = ',', value_parser = parse_dle, default_value = "basic,advanced")]
        dle: Vec<DleLevel>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        json: PathBuf,
    },
}

#[derive(Subcommand)]
enum DemoCmd {
    /// 2D linear convection of a smooth pulse.
    Convection(ConvectionArgs),
    /// Steady-state Laplace solve with explicit boundary rows.
    Laplace(LaplaceArgs),
    /// Acoustic wave propagation: forward modelling and the adjoint test.
    Acoustic(AcousticArgs),
}

#[derive(Args)]
struct LevelArgs {
    #[arg(long, default_value = "advanced", value_parser = parse_dse)]
    dse: DseLevel,
    #[arg(long, default_value = "advanced", value_parser = parse_dle)]
    dle: DleLevel,
}

#[derive(Args)]
struct ConvectionArgs {
    #[arg(long, default_value_t = 81)]
    nx: usize,
    #[arg(long, default_value_t = 81)]
    ny: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.025)]
    dx: f64,
    #[arg(long, default_value_t = 0.005)]
    dt: f64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    levels: LevelArgs,
}

#[derive(Args)]
struct LaplaceArgs {
    #[arg(long, default_value_t = 31)]
    nx: usize,
    #[arg(long, default_value_t = 31)]
    ny: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    levels: LevelArgs,
}

#[derive(Args)]
struct AcousticArgs {
    /// Grid shape, e.g. 61,61 or 41,41,41
    #[arg(long, value_delimiter = ',', value_parser = parse_shape, default_value = "61,61")]
    shape: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    order: u32,
    #[arg(long, default_value_t = 200)]
    ntime: usize,
    /// Absorbing layer width in points (forced to 0 by --adjoint-test).
    #[arg(long, default_value_t = 10)]
    damp_width: usize,
    /// Run the forward/adjoint dot test and report the mismatch.
    #[arg(long)]
    adjoint_test: bool,
    /// Execute in single precision.
    #[arg(long)]
    f32: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    levels: LevelArgs,
}

fn parse_dse(s: &str) -> Result<DseLevel, String> {
    DseLevel::parse(s).ok_or_else(|| format!("unknown symbolic level {s:?} (basic|advanced)"))
}

fn parse_dle(s: &str) -> Result<DleLevel, String> {
    DleLevel::parse(s)
        .ok_or_else(|| format!("unknown loop level {s:?} (basic|advanced|speculative)"))
}

fn parse_shape(s: &str) -> Result<usize, String> {
    s.trim().parse().map_err(|e| format!("bad extent {s:?}: {e}"))
}

fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::UnknownDemo(_) | Error::CflViolation { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run_acoustic(a: &AcousticArgs) -> Result<ExitCode, Error> {
    let damp = if a.adjoint_test { 0 } else { a.damp_width };
    let margin = (a.order as usize / 2 + 1).max(3);
    let model = AcousticModel::two_layer(
        &a.shape, 15.0, 1.5, 2.5, damp, 101, a.ntime, 0.010, 0.0, margin,
    );
    let pipe = Pipeline::levels(a.levels.dse, a.levels.dle);
    let tol = if a.f32 { 1e-4 } else { 1e-10 };

    fn report<T: stencilforge_core::Elem>(r: &AcousticResult<T>, tol: f64) -> ExitCode {
        let peak = r
            .rec
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0f64, f64::max);
        println!(
            "acoustic: {} steps, {} receiver samples, peak |rec| = {peak:.6e}",
            r.steps,
            r.rec.len()
        );
        match &r.adjoint {
            Some(ad) => {
                let pass = ad.relative_mismatch <= tol;
                println!(
                    "adjoint test: <src, adj(rec)> = {:.12e}, <fwd(src), rec> = {:.12e}",
                    ad.lhs, ad.rhs
                );
                println!(
                    "adjoint test: relative mismatch {:.3e} ({}, tolerance {tol:.0e})",
                    ad.relative_mismatch,
                    if pass { "PASS" } else { "FAIL" }
                );
                if pass {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            None => ExitCode::SUCCESS,
        }
    }

    let code = if a.f32 {
        let r = demo_acoustic::<f32>(&model, a.order, a.adjoint_test, a.out_dir.as_deref(), &pipe)?;
        report(&r, tol)
    } else {
        let r = demo_acoustic::<f64>(&model, a.order, a.adjoint_test, a.out_dir.as_deref(), &pipe)?;
        report(&r, tol)
    };
    Ok(code)
}

fn run() -> Result<ExitCode, Error> {
    match Cli::parse().cmd {
        Cmd::Demo { which } => match which {
            DemoCmd::Convection(a) => {
                let cfg = ConvectionConfig {
                    nx: a.nx,
                    ny: a.ny,
                    steps: a.steps,
                    c: a.c,
                    dx: a.dx,
                    dt: a.dt,
                    out_dir: a.out_dir.clone(),
                };
                let r = demo_convection(&cfg, &Pipeline::levels(a.levels.dse, a.levels.dle))?;
                println!(
                    "convection: {} steps, peak {:.6} at {:?} -> {:.6} at {:?}",
                    r.steps,
                    r.initial_peak.value,
                    r.initial_peak.idx,
                    r.final_peak.value,
                    r.final_peak.idx
                );
                for d in &r.dumps {
                    println!("wrote {}", d.display());
                }
                Ok(ExitCode::SUCCESS)
            }
            DemoCmd::Laplace(a) => {
                let cfg = LaplaceConfig {
                    nx: a.nx,
                    ny: a.ny,
                    tol: a.tol,
                    max_iters: a.max_iters,
                    out_dir: a.out_dir.clone(),
                };
                let r = demo_laplace(&cfg, &Pipeline::levels(a.levels.dse, a.levels.dle))?;
                println!(
                    "laplace: converged in {} iterations, last relative L1 change {:.3e}",
                    r.iterations, r.last_change
                );
                for d in &r.dumps {
                    println!("wrote {}", d.display());
                }
                Ok(ExitCode::SUCCESS)
            }
            DemoCmd::Acoustic(a) => run_acoustic(&a),
        },
        Cmd::Codegen {
            demo,
            dse,
            dle,
            output,
        } => {
            cmd_codegen(&demo, dse, dle, &output)?;
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench {
            shape,
            orders,
            dse,
            dle,
            steps,
            json,
        } => {
            let cfg = BenchConfig {
                shape,
                orders,
                dse,
                dle,
                steps,
                runs: 3,
            };
            let rows = run_bench(&cfg)?;
            write_json_lines(&rows, &json)?;
            for r in &rows {
                println!(
                    "order {} dse {} dle {}: {:.3} s, {:.2} GFlop/s, OI {:.3}, block {}",
                    r.space_order, r.dse, r.dle, r.runtime_sec, r.gflops, r.oi, r.block
                );
            }
            println!("wrote {}", json.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

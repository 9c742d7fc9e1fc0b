//! Command-line front end: scans, collapse, verification and figure presets.

mod figures;

use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ffcircuit::ensemble::{run_scan, Observable, RunOptions, ScanSpec};
use ffcircuit::linalg::{self, CORETYPE_VAR, DEFAULT_CORETYPE};
use ffcircuit::scaling::{collapse, write_collapse, Curve, Plot};
use ffcircuit::verify::{run_verify, VerifyOptions};
use ffcircuit::Error;

const THREADS_VAR: &str = "OPENBLAS_NUM_THREADS";

#[derive(Parser)]
#[command(name = "ffcircuit", version, about = "Free-fermion circuits of random-bond Ising transfer matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScanArgs {
    /// Scan specification (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (overrides FFCIRCUIT_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Discard an existing checkpoint instead of resuming it.
    #[arg(long)]
    fresh: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Half-cut entanglement of the long-time state.
    ScanEntanglement(ScanArgs),
    /// Landauer conductivity of the network.
    ScanConductivity {
        #[command(flatten)]
        scan: ScanArgs,
        /// Also collapse the insulating and metallic curves.
        #[arg(long)]
        collapse: bool,
    },
    /// Topological invariant from both boundary conditions.
    ScanInvariant(ScanArgs),
    /// Single-parameter collapse of a summary table.
    Collapse {
        /// `summary.csv` written by a scan.
        #[arg(long)]
        input: PathBuf,
        /// Quantity to collapse, e.g. `g` or `S_half`.
        #[arg(long)]
        quantity: String,
        /// Abscissa column: `L` or `M` (default: `L` for `g`, `M` otherwise).
        #[arg(long)]
        x: Option<String>,
        /// Collapse curves that grow and decay with size separately.
        #[arg(long)]
        split: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-verification suite.
    Verify,
    /// Run a bundled figure preset.
    ReproduceFigure {
        /// One of fig4, fig5, fig6, fig7, figB.
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// `desk` (default) or `smoke`.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fresh: bool,
    },
}

/// Usage and configuration problems exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_)
        | Error::InvalidGeometry(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Io(_)
        | Error::RefusedResume(_)
        | Error::DivergentCoupling { .. } => 2,
        _ => 1,
    }
}

/// OpenBLAS reads its kernel selection when the library loads, so missing
/// settings require a fresh process image.
fn ensure_backend_env() {
    let missing: Vec<(&str, &str)> = [(CORETYPE_VAR, DEFAULT_CORETYPE), (THREADS_VAR, "1")]
        .into_iter()
        .filter(|(k, _)| std::env::var_os(k).is_none())
        .collect();
    if missing.is_empty() {
        return;
    }
    let Ok(exe) = std::env::current_exe() else { return };
    let err = std::process::Command::new(exe)
        .args(std::env::args_os().skip(1))
        .envs(missing)
        .exec();
    eprintln!("warning: could not restart with backend settings: {err}");
}

fn load_spec(args: &ScanArgs, required: Observable) -> Result<ScanSpec, Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", args.config.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("observables").or_insert_with(|| serde_json::json!([]));
    }
    let mut spec: ScanSpec = serde_json::from_value(value)?;
    if !spec.wants(required) {
        spec.observables.push(required);
    }
    if let Some(seed) = args.seed {
        spec.base_seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn scan(args: &ScanArgs, required: Observable) -> Result<ScanSpec, Error> {
    let spec = load_spec(args, required)?;
    let options = RunOptions {
        workers: args.workers,
        out_dir: Some(args.out.clone()),
        fresh: args.fresh,
        stop_after: None,
    };
    let res = run_scan(&spec, &options)?;
    eprintln!(
        "{} cells ({} new) written to {}",
        res.cells.len(),
        res.computed,
        args.out.display()
    );
    Ok(spec)
}

/// Curves of one quantity from a `summary.csv`, grouped by the parameter
/// column, with one standard error per point.
pub fn read_curves(path: &Path, quantity: &str, x_col: &str) -> Result<(String, Vec<Curve>), Error> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("{} has no column {name}", path.display())))
    };
    let param_name = headers.get(3).unwrap_or("parameter").to_string();
    let (xi, qi, mi, ei) = (find(x_col)?, find("quantity")?, find("mean")?, find("err2")?);
    let mut curves: Vec<Curve> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if &row[qi] != quantity {
            continue;
        }
        let num = |i: usize| {
            row[i]
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {:?}: {e}", &row[i])))
        };
        let (param, x, y, err2) = (num(3)?, num(xi)?, num(mi)?, num(ei)?);
        let err = if err2.is_nan() { 0.0 } else { 0.5 * err2 };
        match curves.iter_mut().find(|c| c.parameter == param) {
            Some(c) => c.points.push(ffcircuit::scaling::CurvePoint { x, y, err }),
            None => curves.push(Curve::new(param, &[(x, y, err)])),
        }
    }
    if curves.is_empty() {
        return Err(Error::InvalidInput(format!("no rows with quantity {quantity} in {}", path.display())));
    }
    curves.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
    Ok((param_name, curves))
}

/// Collapses the curves (optionally split by the sign of their size trend)
/// into `out`, one subdirectory per branch when split.
pub fn collapse_to(out: &Path, param: &str, curves: Vec<Curve>, split: bool, x_label: &str, y_label: &str) -> Result<(), Error> {
    let branches: Vec<(String, Vec<Curve>)> = if split {
        let mut grow = Vec::new();
        let mut decay = Vec::new();
        for c in curves {
            let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.x, p.y)).collect();
            if ffcircuit::scaling::conductance_trend(&pts)? >= 0.0 {
                grow.push(c);
            } else {
                decay.push(c);
            }
        }
        vec![("decaying".to_string(), decay), ("growing".to_string(), grow)]
    } else {
        vec![(String::new(), curves)]
    };
    for (name, group) in branches {
        if group.is_empty() {
            continue;
        }
        let dir = if name.is_empty() { out.to_path_buf() } else { out.join(&name) };
        match collapse(&group) {
            Ok(res) => {
                write_collapse(&dir, param, &group, &res)?;
                let labels: Vec<String> = group.iter().map(|c| c.parameter.to_string()).collect();
                let script = Plot {
                    title: "collapse",
                    csv: "collapsed.csv",
                    output: "collapsed.png",
                    group_col: 1,
                    groups: &labels,
                    x_col: 3,
                    y_col: 4,
                    err_col: Some(5),
                    x_label,
                    y_label,
                    log_x: true,
                    log_y: false,
                }
                .script();
                std::fs::write(dir.join("collapse.gp"), script)?;
                eprintln!(
                    "collapse {}: residual spread {:.4e}, factors {:?}",
                    if name.is_empty() { "all" } else { &name },
                    res.residual_spread,
                    res.scale_factors
                );
            }
            Err(e @ Error::CollapseInfeasible(_)) if split => eprintln!("skipping {name} branch: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::ScanEntanglement(args) => scan(&args, Observable::Entanglement).map(|_| true),
        Command::ScanInvariant(args) => scan(&args, Observable::Invariant).map(|_| true),
        Command::ScanConductivity { scan: args, collapse } => {
            scan(&args, Observable::Conductivity)?;
            if collapse {
                let (param, curves) = read_curves(&args.out.join("summary.csv"), "g", "L")?;
                collapse_to(&args.out.join("collapse"), &param, curves, true, "L / l", "g")?;
            }
            Ok(true)
        }
        Command::Collapse {
            input,
            quantity,
            x,
            split,
            out,
        } => {
            let x = x.unwrap_or_else(|| if quantity == "g" { "L".into() } else { "M".into() });
            if x != "L" && x != "M" {
                return Err(Error::InvalidInput(format!("--x must be L or M, got {x}")));
            }
            let (param, curves) = read_curves(&input, &quantity, &x)?;
            collapse_to(&out, &param, curves, split, &format!("{x} / scale"), &quantity)?;
            Ok(true)
        }
        Command::Verify => {
            let report = run_verify(&VerifyOptions::default());
            print!("{report}");
            Ok(report.passed())
        }
        Command::ReproduceFigure {
            name,
            out,
            preset,
            workers,
            seed,
            fresh,
        } => {
            let scale = figures::Scale::parse(&preset)?;
            let options = RunOptions {
                workers,
                out_dir: None,
                fresh,
                stop_after: None,
            };
            figures::reproduce(&name, scale, &out, &options, seed)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    ensure_backend_env();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = linalg::self_check() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

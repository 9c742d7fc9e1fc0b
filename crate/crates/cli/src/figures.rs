//! Bundled figure presets: each runs its scans, then writes figure tables
//! (`series,x,y,err2`) with a gnuplot script per table.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ffcircuit::ensemble::{
    run_scan, Aspect, EnsembleRecord, GeometrySweep, Knobs, ModelSweep, Observable, RunOptions, ScanSpec,
};
use ffcircuit::scaling::{
    estimate_crossings, fit_entropy_growth, fit_log_conductance, fit_zero_mode_decay, Curve, Plot,
};
use ffcircuit::Error;

use crate::collapse_to;

pub const NAMES: [&str; 5] = ["fig4", "fig5", "fig6", "fig7", "figB"];
const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Smoke,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Scale, Error> {
        match s {
            "desk" => Ok(Scale::Desk),
            "smoke" => Ok(Scale::Smoke),
            _ => Err(Error::InvalidInput(format!("unknown preset {s:?} (expected desk or smoke)"))),
        }
    }
}

fn phi_label(phi: f64) -> String {
    format!("phi/pi={:.3}", phi / PI)
}

struct Row {
    series: String,
    x: f64,
    y: f64,
    err2: f64,
}

struct Table<'a> {
    stem: String,
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    log_x: bool,
    log_y: bool,
    rows: Vec<Row>,
}

impl Table<'_> {
    fn write(&self, dir: &Path) -> Result<(), Error> {
        let csv_name = format!("{}.csv", self.stem);
        let mut w = csv::Writer::from_path(dir.join(&csv_name))?;
        w.write_record(["series", "x", "y", "err2"])?;
        let mut groups: Vec<String> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&r.series) {
                groups.push(r.series.clone());
            }
            w.write_record([r.series.clone(), r.x.to_string(), r.y.to_string(), r.err2.to_string()])?;
        }
        w.flush()?;
        let png = format!("{}.png", self.stem);
        let script = Plot {
            title: self.title,
            csv: &csv_name,
            output: &png,
            group_col: 1,
            groups: &groups,
            x_col: 2,
            y_col: 3,
            err_col: Some(4),
            x_label: self.x_label,
            y_label: self.y_label,
            log_x: self.log_x,
            log_y: self.log_y,
        }
        .script();
        std::fs::write(dir.join(format!("{}.gp", self.stem)), script)?;
        Ok(())
    }
}

/// How a record is placed in a table: series label and abscissa.
type Layout = fn(&EnsembleRecord) -> (String, f64);

fn rows(records: &[EnsembleRecord], quantity: &str, layout: Layout, use_median: bool) -> Vec<Row> {
    records
        .iter()
        .filter(|r| r.quantity == quantity)
        .map(|r| {
            let (series, x) = layout(r);
            Row {
                series,
                x,
                y: if use_median { r.median } else { r.mean },
                err2: r.std_error.map_or(f64::NAN, |s| 2.0 * s),
            }
        })
        .collect()
}

fn scan(dir: &Path, spec: &ScanSpec, options: &RunOptions) -> Result<Vec<EnsembleRecord>, Error> {
    spec.validate()?;
    let options = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..options.clone()
    };
    let res = run_scan(spec, &options)?;
    eprintln!("{}: {} cells ({} new)", dir.display(), res.cells.len(), res.computed);
    Ok(res.records)
}

/// `(parameter, [(size, mean, 1σ)])` for one quantity, sorted by size.
fn series(records: &[EnsembleRecord], quantity: &str, size: fn(&EnsembleRecord) -> usize) -> Vec<(f64, Vec<(f64, f64, f64)>)> {
    let mut out: Vec<(f64, Vec<(f64, f64, f64)>)> = Vec::new();
    for r in records.iter().filter(|r| r.quantity == quantity) {
        let pt = (size(r) as f64, r.mean, r.std_error.unwrap_or(0.0));
        match out.iter_mut().find(|(p, _)| *p == r.parameter) {
            Some((_, v)) => v.push(pt),
            None => out.push((r.parameter, vec![pt])),
        }
    }
    for (_, v) in &mut out {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

struct Preset {
    params: Vec<f64>,
    sizes: Vec<usize>,
    realizations: usize,
}

fn spec(model: ModelSweep, sizes: Vec<usize>, aspect: Aspect, n: usize, seed: u64, observables: Vec<Observable>) -> ScanSpec {
    ScanSpec {
        model,
        geometry: GeometrySweep { sizes, aspect },
        realizations: n,
        base_seed: seed,
        observables,
        knobs: Knobs::default(),
    }
}

fn entanglement_figure(
    dir: &Path,
    name: &str,
    model: ModelSweep,
    preset: Preset,
    seed: u64,
    options: &RunOptions,
    x_label: &str,
    layout_x: fn(f64) -> f64,
) -> Result<(), Error> {
    let s = spec(
        model,
        preset.sizes,
        Aspect::RowsPerSite { ratio: 5 },
        preset.realizations,
        seed,
        vec![Observable::Entanglement],
    );
    let records = scan(&dir.join("scan"), &s, options)?;
    let by_m: Layout = |r| (format!("M={}", r.m), r.parameter);
    let fix_x = |mut rows: Vec<Row>| {
        for r in &mut rows {
            r.x = layout_x(r.x);
        }
        rows
    };
    let mut spectrum = fix_x(rows(&records, "lambda0", by_m, true));
    for r in &mut spectrum {
        r.series = format!("lambda0 {}", r.series);
    }
    spectrum.extend(fix_x(rows(&records, "lambda1", by_m, true)).into_iter().map(|mut r| {
        r.series = format!("lambda1 {}", r.series);
        r
    }));
    Table {
        stem: format!("{name}_spectrum"),
        title: "entanglement spectrum (medians)",
        x_label,
        y_label: "lambda",
        log_x: false,
        log_y: true,
        rows: spectrum,
    }
    .write(dir)?;
    Table {
        stem: format!("{name}_entropy"),
        title: "half-cut entanglement entropy",
        x_label,
        y_label: "S_{M/2}",
        log_x: false,
        log_y: false,
        rows: fix_x(rows(&records, "S_half", by_m, false)),
    }
    .write(dir)
}

fn fig4(dir: &Path, scale: Scale, seed: u64, options: &RunOptions) -> Result<(), Error> {
    let preset = match scale {
        Scale::Desk => Preset {
            params: vec![0.02, 0.04, 0.06, 0.08, 0.09, 0.10, 0.11, 0.12, 0.13, 0.14, 0.16, 0.2, 0.25, 0.3, 0.4],
            sizes: vec![20, 32, 40],
            realizations: 32,
        },
        Scale::Smoke => Preset {
            params: vec![0.05, 0.3],
            sizes: vec![4, 8],
            realizations: 4,
        },
    };
    let model = ModelSweep::Nishimori { p: preset.params.clone() };
    entanglement_figure(dir, "fig4", model, preset, seed, options, "p", |p| p)
}

fn fig6(dir: &Path, scale: Scale, seed: u64, options: &RunOptions) -> Result<(), Error> {
    let preset = match scale {
        Scale::Desk => Preset {
            params: vec![0.02, 0.04, 0.06, 0.08, 0.09, 0.1, 0.11, 0.12, 0.14, 0.16, 0.18, 0.2],
            sizes: vec![20, 32, 40],
            realizations: 32,
        },
        Scale::Smoke => Preset {
            params: vec![0.05, 0.2],
            sizes: vec![4, 8],
            realizations: 4,
        },
    };
    let model = ModelSweep::Twirl { phi_over_pi: preset.params.clone() };
    entanglement_figure(dir, "fig6", model, preset, seed, options, "phi/pi", |phi| phi / PI)
}

fn conductivity_preset(scale: Scale) -> Preset {
    match scale {
        Scale::Desk => Preset {
            params: vec![0.05, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12, 0.15, 0.2],
            sizes: vec![8, 12, 16, 20, 24, 28, 32],
            realizations: 100,
        },
        Scale::Smoke => Preset {
            params: vec![0.05, 0.2],
            sizes: vec![4, 6, 8, 10],
            realizations: 4,
        },
    }
}

fn conductivity_scan(dir: &Path, scale: Scale, seed: u64, options: &RunOptions) -> Result<Vec<EnsembleRecord>, Error> {
    let preset = conductivity_preset(scale);
    let s = spec(
        ModelSweep::Twirl { phi_over_pi: preset.params },
        preset.sizes,
        Aspect::SitesPerRow { ratio: 5 },
        preset.realizations,
        seed,
        vec![Observable::Conductivity],
    );
    scan(&dir.join("scan"), &s, options)
}

fn raw_conductivity_table(dir: &Path, name: &str, records: &[EnsembleRecord]) -> Result<(), Error> {
    Table {
        stem: format!("{name}_conductivity"),
        title: "conductivity at M = 5L",
        x_label: "L",
        y_label: "g",
        log_x: true,
        log_y: true,
        rows: rows(records, "g", |r| (phi_label(r.parameter), r.l as f64), false),
    }
    .write(dir)
}

fn fig5(dir: &Path, scale: Scale, seed: u64, options: &RunOptions) -> Result<(), Error> {
    let records = conductivity_scan(dir, scale, seed, options)?;
    raw_conductivity_table(dir, "fig5", &records)?;
    let data = series(&records, "g", |r| r.l);
    let curves: Vec<Curve> = data.iter().map(|(p, pts)| Curve::new(*p, pts)).collect();
    collapse_to(&dir.join("collapse"), "phi", curves, true, "L / l(phi)", "g")?;

    let mut fits = String::from("phi,phi_over_pi,trend,prefactor,offset,r_squared\n");
    for (p, pts) in &data {
        let xy: Vec<(f64, f64)> = pts.iter().map(|q| (q.0, q.1)).collect();
        let trend = ffcircuit::scaling::conductance_trend(&xy)?;
        let (pre, off, r2) = match fit_log_conductance(&xy) {
            Ok(f) => (f.prefactor.to_string(), f.offset.to_string(), f.r_squared.to_string()),
            Err(_) => ("nan".into(), "nan".into(), "nan".into()),
        };
        let _ = writeln!(fits, "{p},{},{trend},{pre},{off},{r2}", p / PI);
    }
    std::fs::write(dir.join("fig5_fits.csv"), fits)?;

    let xy: Vec<(f64, Vec<(f64, f64)>)> = data
        .iter()
        .map(|(p, pts)| (*p, pts.iter().map(|q| (q.0, q.1)).collect()))
        .collect();
    let mut crossings = String::from("phi,phi_over_pi\n");
    for c in estimate_crossings(&xy)? {
        let _ = writeln!(crossings, "{c},{}", c / PI);
    }
    std::fs::write(dir.join("fig5_crossings.csv"), crossings)?;
    Ok(())
}

fn fig_b(dir: &Path, scale: Scale, seed: u64, options: &RunOptions) -> Result<(), Error> {
    let records = conductivity_scan(dir, scale, seed, options)?;
    raw_conductivity_table(dir, "figB", &records)
}

fn fig7(dir: &Path, scale: Scale, seed: u64, options: &RunOptions) -> Result<(), Error> {
    let (main, inset) = match scale {
        Scale::Desk => (
            Preset {
                params: vec![0.12, 0.15, 0.18],
                sizes: vec![20, 40, 60, 80],
                realizations: 32,
            },
            Preset {
                params: vec![0.03, 0.05, 0.07],
                sizes: vec![20, 40, 60, 80],
                realizations: 32,
            },
        ),
        Scale::Smoke => (
            Preset {
                params: vec![0.12, 0.15],
                sizes: vec![4, 8, 12],
                realizations: 4,
            },
            Preset {
                params: vec![0.05],
                sizes: vec![4, 8, 12],
                realizations: 4,
            },
        ),
    };
    let run = |sub: &str, p: Preset| {
        let s = spec(
            ModelSweep::Twirl { phi_over_pi: p.params },
            p.sizes,
            Aspect::RowsPerSite { ratio: 5 },
            p.realizations,
            seed,
            vec![Observable::Entanglement],
        );
        scan(&dir.join(sub), &s, options)
    };

    let records = run("scan", main)?;
    Table {
        stem: "fig7_entropy".into(),
        title: "half-cut entanglement entropy",
        x_label: "M",
        y_label: "S_{M/2}",
        log_x: true,
        log_y: false,
        rows: rows(&records, "S_half", |r| (phi_label(r.parameter), r.m as f64), false),
    }
    .write(dir)?;
    let data = series(&records, "S_half", |r| r.m);
    let mut fits = String::from("phi,phi_over_pi,log_slope,log_r_squared,log2_slope,log2_r_squared\n");
    for (p, pts) in &data {
        let xy: Vec<(f64, f64)> = pts.iter().map(|q| (q.0, q.1)).collect();
        let f = fit_entropy_growth(&xy)?;
        let _ = writeln!(
            fits,
            "{p},{},{},{},{},{}",
            p / PI,
            f.log.slope,
            f.log.r_squared,
            f.log_squared.slope,
            f.log_squared.r_squared
        );
    }
    std::fs::write(dir.join("fig7_fits.csv"), fits)?;
    let curves: Vec<Curve> = data.iter().map(|(p, pts)| Curve::new(*p, pts)).collect();
    if let Err(e) = collapse_to(&dir.join("collapse"), "phi", curves, false, "M / m(phi)", "S_{M/2}") {
        match e {
            Error::CollapseInfeasible(_) => eprintln!("collapse skipped: {e}"),
            e => return Err(e),
        }
    }

    let records = run("inset", inset)?;
    let zero = rows(&records, "lambda0", |r| (phi_label(r.parameter), r.m as f64), true);
    let mut decay = String::from("phi,phi_over_pi,c,slope,r_squared\n");
    let mut by_phi: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for r in records.iter().filter(|r| r.quantity == "lambda0") {
        match by_phi.iter_mut().find(|(p, _)| *p == r.parameter) {
            Some((_, v)) => v.push((r.m as f64, r.median)),
            None => by_phi.push((r.parameter, vec![(r.m as f64, r.median)])),
        }
    }
    for (p, pts) in &by_phi {
        let cells = match fit_zero_mode_decay(pts) {
            Ok(f) => format!("{},{},{}", f.c, f.slope, f.r_squared),
            Err(_) => "nan,nan,nan".into(),
        };
        let _ = writeln!(decay, "{p},{},{cells}", p / PI);
    }
    std::fs::write(dir.join("fig7_inset_fits.csv"), decay)?;
    Table {
        stem: "fig7_inset".into(),
        title: "entanglement zero mode (medians)",
        x_label: "M",
        y_label: "lambda0",
        log_x: false,
        log_y: true,
        rows: zero,
    }
    .write(dir)
}

pub fn reproduce(name: &str, scale: Scale, out: &Path, options: &RunOptions, seed: Option<u64>) -> Result<(), Error> {
    if !NAMES.contains(&name) {
        return Err(Error::InvalidInput(format!("unknown figure {name:?} (expected one of {})", NAMES.join(", "))));
    }
    let dir = out.join(name);
    std::fs::create_dir_all(&dir)?;
    let seed = seed.unwrap_or(DEFAULT_SEED);
    match name {
        "fig4" => fig4(&dir, scale, seed, options),
        "fig5" => fig5(&dir, scale, seed, options),
        "fig6" => fig6(&dir, scale, seed, options),
        "fig7" => fig7(&dir, scale, seed, options),
        _ => fig_b(&dir, scale, seed, options),
    }
}

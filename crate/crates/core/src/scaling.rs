//! Asymptotic fits and single-parameter data collapse.
//!
//! The collapse rescales each curve's abscissa by a factor `ℓ_c` (the first
//! curve is the reference with `ℓ = 1`) so that all points `(x/ℓ_c, y)` lie
//! on one monotone curve. Master curves are isotonic least-squares fits in
//! `ln(x/ℓ)`, interpolated linearly, and the log factors are found by
//! coordinate descent from a neighbour-by-neighbour alignment with a fixed
//! sweep order.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{linear_fit, LinearFit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// The sweep parameter labelling the curve (`p` or `φ`).
    pub parameter: f64,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn new(parameter: f64, points: &[(f64, f64, f64)]) -> Self {
        Curve {
            parameter,
            points: points.iter().map(|&(x, y, err)| CurvePoint { x, y, err }).collect(),
        }
    }

    fn y_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseResult {
    /// One positive factor per curve; the first is exactly 1.
    pub scale_factors: Vec<f64>,
    /// `(x/ℓ, y)` samples of the master curve, ascending in `x/ℓ`.
    pub master: Vec<(f64, f64)>,
    /// Root-mean-square vertical deviation of all points from the master curve.
    pub residual_spread: f64,
    pub sweeps: usize,
}

/// Grid points per coordinate scan.
const GRID: usize = 81;
const MAX_SWEEPS: usize = 40;
const STEP_TOL: f64 = 1e-7;

/// Isotonic least-squares fit of `(u, y)`, returned as the block knots
/// `(ū, ŷ)` sorted by `u`.
fn isotonic(points: &mut [(f64, f64)], increasing: bool) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let sign = if increasing { 1.0 } else { -1.0 };
    // Pool-adjacent-violators on sign·y; each block holds (Σu, Σy, count).
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    for &(u, y) in points.iter() {
        blocks.push((u, sign * y, 1.0));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (a, b) = (blocks[n - 2], blocks[n - 1]);
            if a.1 / a.2 <= b.1 / b.2 {
                break;
            }
            blocks.truncate(n - 2);
            blocks.push((a.0 + b.0, a.1 + b.1, a.2 + b.2));
        }
    }
    blocks.iter().map(|b| (b.0 / b.2, sign * b.1 / b.2)).collect()
}

/// Minimum number of a curve's points that must overlap the others.
const MIN_OVERLAP: usize = 2;

/// Squared deviations of every curve's points from the master curve of the
/// remaining curves, over the overlapping part of the abscissa. `None` when
/// some curve overlaps the others in fewer than [`MIN_OVERLAP`] points.
fn deviations(curves: &[Curve], shifts: &[f64], increasing: bool) -> Option<(f64, usize)> {
    let mut sse = 0.0;
    let mut count = 0;
    for (c, curve) in curves.iter().enumerate() {
        let mut others: Vec<(f64, f64)> = curves
            .iter()
            .zip(shifts)
            .enumerate()
            .filter(|&(o, _)| o != c)
            .flat_map(|(_, (k, &s))| k.points.iter().map(move |p| (p.x.ln() - s, p.y)))
            .collect();
        let knots = isotonic(&mut others, increasing);
        let (lo, hi) = (knots[0].0, knots[knots.len() - 1].0);
        let mut inside = 0;
        for p in &curve.points {
            let u = p.x.ln() - shifts[c];
            if u >= lo && u <= hi {
                sse += (p.y - interpolate(&knots, u)).powi(2);
                inside += 1;
            }
        }
        if inside < MIN_OVERLAP {
            return None;
        }
        count += inside;
    }
    Some((sse, count))
}

/// Piecewise-linear interpolation through sorted knots, constant outside.
fn interpolate(knots: &[(f64, f64)], u: f64) -> f64 {
    let i = knots.partition_point(|k| k.0 < u);
    if i == 0 {
        return knots[0].1;
    }
    if i == knots.len() {
        return knots[i - 1].1;
    }
    let (a, b) = (knots[i - 1], knots[i]);
    if b.0 == a.0 {
        return 0.5 * (a.1 + b.1);
    }
    a.1 + (b.1 - a.1) * (u - a.0) / (b.0 - a.0)
}

/// Starting shifts that align each curve with its predecessor alone, so the
/// joint descent begins near the right basin when curves overlap only in
/// neighbouring pairs.
fn chained_start(curves: &[Curve], span: f64, increasing: bool) -> Vec<f64> {
    let mut shifts = vec![0.0; curves.len()];
    for c in 1..curves.len() {
        let pair = [curves[c - 1].clone(), curves[c].clone()];
        let mut best = (f64::INFINITY, 0.0);
        for g in 0..GRID {
            let s = -span + 2.0 * span * g as f64 / (GRID - 1) as f64;
            if let Some((sse, n)) = deviations(&pair, &[0.0, s], increasing) {
                if sse / (n as f64) < best.0 {
                    best = (sse / n as f64, s);
                }
            }
        }
        shifts[c] = shifts[c - 1] + best.1;
    }
    shifts
}

fn pooled(curves: &[Curve], shifts: &[f64]) -> Vec<(f64, f64)> {
    curves
        .iter()
        .zip(shifts)
        .flat_map(|(c, &s)| c.points.iter().map(move |p| (p.x.ln() - s, p.y)))
        .collect()
}

/// Collapses curves onto a monotone master curve by rescaling `x`.
///
/// Each curve is compared with the isotonic fit of all other curves, so a
/// curve cannot lower the objective by fitting itself.
pub fn collapse(curves: &[Curve]) -> Result<CollapseResult> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("collapse of zero curves".into()));
    }
    for c in curves {
        if c.points.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "curve at {} has {} points, need at least 3",
                c.parameter,
                c.points.len()
            )));
        }
        if c.points.iter().any(|p| !(p.x > 0.0) || !p.y.is_finite()) {
            return Err(Error::InvalidInput(format!("curve at {} has invalid points", c.parameter)));
        }
    }
    if curves.len() == 1 {
        let mut master: Vec<(f64, f64)> = curves[0].points.iter().map(|p| (p.x, p.y)).collect();
        master.sort_by(|a, b| a.0.total_cmp(&b.0));
        return Ok(CollapseResult {
            scale_factors: vec![1.0],
            master,
            residual_spread: 0.0,
            sweeps: 0,
        });
    }
    for (i, pair) in curves.windows(2).enumerate() {
        let (a, b) = (pair[0].y_range(), pair[1].y_range());
        if a.1 < b.0 || b.1 < a.0 {
            return Err(Error::CollapseInfeasible(format!(
                "curves {i} and {} have disjoint ranges [{:.4}, {:.4}] and [{:.4}, {:.4}]",
                i + 1,
                a.0,
                a.1,
                b.0,
                b.1
            )));
        }
    }
    // Direction of the master curve from the summed endpoint trends.
    let trend: f64 = curves
        .iter()
        .map(|c| {
            let first = c.points.iter().min_by(|a, b| a.x.total_cmp(&b.x)).expect("nonempty");
            let last = c.points.iter().max_by(|a, b| a.x.total_cmp(&b.x)).expect("nonempty");
            last.y - first.y
        })
        .sum();
    let increasing = trend >= 0.0;
    let objective = |shifts: &[f64]| {
        deviations(curves, shifts, increasing).map_or(f64::INFINITY, |(sse, n)| sse / n as f64)
    };

    let lnx: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.x.ln())).collect();
    let span = lnx.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - lnx.iter().cloned().fold(f64::INFINITY, f64::min);
    // Curves linked only through their neighbours may need shifts up to the
    // span times the number of links.
    let reach = span.max(1e-3) * (curves.len() - 1) as f64;
    let mut width = reach;
    let mut shifts = chained_start(curves, span.max(1e-3), increasing);
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut biggest = 0.0f64;
        for c in 1..curves.len() {
            let centre = shifts[c];
            let step = 2.0 * width / (GRID - 1) as f64;
            let mut best = (objective(&shifts), centre);
            for g in 0..GRID {
                let s = centre - width + g as f64 * step;
                shifts[c] = s;
                let f = objective(&shifts);
                if f < best.0 {
                    best = (f, s);
                }
            }
            // Golden-section refinement inside the best grid cell.
            let (mut lo, mut hi) = (best.1 - step, best.1 + step);
            let r = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..40 {
                let a = hi - r * (hi - lo);
                let b = lo + r * (hi - lo);
                shifts[c] = a;
                let fa = objective(&shifts);
                shifts[c] = b;
                let fb = objective(&shifts);
                if fa <= fb {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let mid = 0.5 * (lo + hi);
            shifts[c] = mid;
            if objective(&shifts) > best.0 {
                shifts[c] = best.1;
            }
            biggest = biggest.max((shifts[c] - centre).abs());
        }
        if biggest < STEP_TOL {
            break;
        }
        width = (0.5 * width).max(4.0 * biggest).min(reach);
    }
    let (sse, n) = deviations(curves, &shifts, increasing).ok_or_else(|| {
        Error::CollapseInfeasible("no rescaling makes every curve overlap the others".into())
    })?;
    let knots = isotonic(&mut pooled(curves, &shifts), increasing);
    Ok(CollapseResult {
        scale_factors: shifts.iter().map(|s| s.exp()).collect(),
        master: knots.into_iter().map(|(u, y)| (u.exp(), y)).collect(),
        residual_spread: (sse / n as f64).sqrt(),
        sweeps,
    })
}

/// Root-mean-square of the per-point error bars (one standard error each).
pub fn pooled_std_error(curves: &[Curve]) -> f64 {
    let errs: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.err)).collect();
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogConductanceFit {
    /// `dg / d ln L`; the class-D metal has `1/π`.
    pub prefactor: f64,
    pub offset: f64,
    pub r_squared: f64,
}

/// Least squares of `g` against `ln L`.
pub fn fit_log_conductance(points: &[(f64, f64)]) -> Result<LogConductanceFit> {
    if points.len() < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 points, got {}", points.len())));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = linear_fit(&xs, &ys)?;
    if fit.slope < 0.0 {
        return Err(Error::NotMetallic { prefactor: fit.slope });
    }
    Ok(LogConductanceFit {
        prefactor: fit.slope,
        offset: fit.intercept,
        r_squared: fit.r_squared,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroModeFit {
    /// Decay scale in `λ_0 ∝ e^{-M/c}`.
    pub c: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Least squares of `ln λ_0` against `M`.
pub fn fit_zero_mode_decay(points: &[(f64, f64)]) -> Result<ZeroModeFit> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|p| !(p.1 > 0.0)) {
        return Err(Error::InvalidInput("zero-mode values must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let fit = linear_fit(&xs, &ys)?;
    if fit.slope >= 0.0 {
        return Err(Error::NoDecay { slope: fit.slope });
    }
    Ok(ZeroModeFit {
        c: -1.0 / fit.slope,
        slope: fit.slope,
        r_squared: fit.r_squared,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyGrowthFits {
    /// `S` against `ln M`.
    pub log: LinearFit,
    /// `S` against `ln² M`.
    pub log_squared: LinearFit,
}

pub fn fit_entropy_growth(points: &[(f64, f64)]) -> Result<EntropyGrowthFits> {
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let l1: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let l2: Vec<f64> = l1.iter().map(|x| x * x).collect();
    Ok(EntropyGrowthFits {
        log: linear_fit(&l1, &ys)?,
        log_squared: linear_fit(&l2, &ys)?,
    })
}

/// Slope of `g` against `ln L` for one parameter value; the sign says
/// whether the conductivity grows or decays with length.
pub fn conductance_trend(points: &[(f64, f64)]) -> Result<f64> {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(linear_fit(&xs, &ys)?.slope)
}

/// Transition estimates from sign changes of the length trend.
///
/// `series` holds `(parameter, [(L, g)])` sorted by parameter. Between
/// neighbours whose trends have opposite signs the crossing is placed by
/// linear interpolation of the trend to zero.
pub fn estimate_crossings(series: &[(f64, Vec<(f64, f64)>)]) -> Result<Vec<f64>> {
    let trends: Vec<(f64, f64)> = series
        .iter()
        .map(|(p, pts)| conductance_trend(pts).map(|t| (*p, t)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for w in trends.windows(2) {
        let ((p0, t0), (p1, t1)) = (w[0], w[1]);
        if t0 == 0.0 {
            out.push(p0);
        } else if t0.signum() != t1.signum() && t1 != 0.0 {
            out.push(p0 + (p1 - p0) * t0 / (t0 - t1));
        }
    }
    if let Some(&(p, t)) = trends.last() {
        if t == 0.0 {
            out.push(p);
        }
    }
    Ok(out)
}

/// Writes `collapse.csv` (parameter, scale factor), `master.csv` and
/// `collapsed.csv` (rescaled points with `2σ` error bars).
pub fn write_collapse(dir: &Path, parameter_name: &str, curves: &[Curve], result: &CollapseResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("collapse.csv"))?;
    w.write_record([parameter_name, "scale_factor"])?;
    for (c, s) in curves.iter().zip(&result.scale_factors) {
        w.write_record([c.parameter.to_string(), s.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("master.csv"))?;
    w.write_record(["x_scaled", "y"])?;
    for (x, y) in &result.master {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("collapsed.csv"))?;
    w.write_record([parameter_name, "x", "x_scaled", "y", "err2"])?;
    for (c, s) in curves.iter().zip(&result.scale_factors) {
        for p in &c.points {
            w.write_record([
                c.parameter.to_string(),
                p.x.to_string(),
                (p.x / s).to_string(),
                p.y.to_string(),
                (2.0 * p.err).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A gnuplot plot of `y` against `x` from a CSV file, one curve per value
/// of a grouping column, with error bars when an error column is given.
/// Columns are 1-based.
#[derive(Clone, Debug)]
pub struct Plot<'a> {
    pub title: &'a str,
    pub csv: &'a str,
    pub output: &'a str,
    pub group_col: usize,
    /// Labels as they appear in the grouping column.
    pub groups: &'a [String],
    pub x_col: usize,
    pub y_col: usize,
    pub err_col: Option<usize>,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_x: bool,
    pub log_y: bool,
}

impl Plot<'_> {
    pub fn script(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "set datafile separator ','");
        let _ = writeln!(s, "set terminal pngcairo size 900,600");
        let _ = writeln!(s, "set output '{}'", self.output);
        let _ = writeln!(s, "set title '{}'", self.title);
        let _ = writeln!(s, "set xlabel '{}'", self.x_label);
        let _ = writeln!(s, "set ylabel '{}'", self.y_label);
        let _ = writeln!(s, "{}set logscale x", if self.log_x { "" } else { "un" });
        let _ = writeln!(s, "{}set logscale y", if self.log_y { "" } else { "un" });
        let x = format!("(strcol({}) eq '%s' ? ${} : NaN)", self.group_col, self.x_col);
        let plots: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let xg = x.replace("%s", g);
                match self.err_col {
                    Some(e) => format!(
                        "'{}' skip 1 using {xg}:{}:{} with yerrorlines title '{g}'",
                        self.csv, self.y_col, e
                    ),
                    None => format!("'{}' skip 1 using {xg}:{} with linespoints title '{g}'", self.csv, self.y_col),
                }
            })
            .collect();
        let _ = writeln!(s, "plot {}", plots.join(", \\\n     "));
        s
    }
}

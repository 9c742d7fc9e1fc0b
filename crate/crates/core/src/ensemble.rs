//! Disorder ensembles: sweep specification, seeding, parallel execution,
//! checkpointing and aggregation.
//!
//! Every (sweep point `k`, realization `r`) cell is independent. Cells run on
//! a work-stealing pool, each finished cell is appended to a JSONL checkpoint,
//! and all outputs are folded in `(k, r)` order so that they do not depend on
//! scheduling.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::{build_schedule, BoundaryCondition, GateSchedule, Ordering};
use crate::disorder::{sample_field, CouplingField, ErrorModel};
use crate::entanglement::{correlation_profile, entropy, half_cut_spectrum, zero_mode_and_gap};
use crate::error::{Error, Result};
use crate::gaussian::{evolve, fast_evolve, initial_state, parity, EvolveOptions, InitialState};
use crate::network::{compose_transmission, conductivity, det_sign, scaled_energies, topological_invariant};
use crate::stats;

/// Environment variable holding the default worker count.
pub const WORKERS_VAR: &str = "FFCIRCUIT_WORKERS";
pub const CHECKPOINT_FILE: &str = "checkpoint.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "line", rename_all = "snake_case")]
pub enum ModelSweep {
    /// Real coupling on the Nishimori line.
    Nishimori { p: Vec<f64> },
    /// Complex coupling on the twirl line `p = sin² φ`.
    Twirl { phi_over_pi: Vec<f64> },
    /// Complex coupling with a fixed bond-flip probability.
    Coherent { p: f64, phi_over_pi: Vec<f64> },
}

impl ModelSweep {
    pub fn models(&self) -> Result<Vec<ErrorModel>> {
        match self {
            ModelSweep::Nishimori { p } => p.iter().map(|&p| ErrorModel::nishimori(p)).collect(),
            ModelSweep::Twirl { phi_over_pi } => phi_over_pi
                .iter()
                .map(|&f| ErrorModel::twirl(f * std::f64::consts::PI))
                .collect(),
            ModelSweep::Coherent { p, phi_over_pi } => phi_over_pi
                .iter()
                .map(|&f| ErrorModel::coherent(*p, f * std::f64::consts::PI))
                .collect(),
        }
    }

    /// CSV header of the swept parameter.
    pub fn parameter_name(&self) -> &'static str {
        match self {
            ModelSweep::Nishimori { .. } => "p",
            _ => "phi",
        }
    }

    pub fn is_complex(&self) -> bool {
        !matches!(self, ModelSweep::Nishimori { .. })
    }
}

/// How the cylinder length follows from the swept size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Aspect {
    /// Sizes are `M`, `L = ratio · M`.
    RowsPerSite { ratio: usize },
    /// Sizes are `L`, `M = ratio · L`.
    SitesPerRow { ratio: usize },
    /// Sizes are `M`, `L` fixed.
    FixedRows { rows: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySweep {
    pub sizes: Vec<usize>,
    pub aspect: Aspect,
}

impl GeometrySweep {
    /// `(M, L)` for every size.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.sizes
            .iter()
            .map(|&s| match self.aspect {
                Aspect::RowsPerSite { ratio } => (s, ratio * s),
                Aspect::SitesPerRow { ratio } => (ratio * s, s),
                Aspect::FixedRows { rows } => (s, rows),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// Half-cut spectrum and entropy of the long-time state.
    Entanglement,
    /// Landauer conductivity of the periodic network.
    Conductivity,
    /// `sgn det R'` in both boundary conditions.
    Invariant,
    /// Correlation decay of the long-time state.
    Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Gate-by-gate evolution.
    Layered,
    /// Three-step evolution through the polar decomposition of the network.
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    /// Entropy plateau tolerance.
    pub tol_conv: f64,
    pub engine: Engine,
    pub bc: BoundaryCondition,
    pub q: u8,
    pub ordering: Ordering,
    /// Threshold on `min_j L ε_j` for a trusted invariant.
    pub gap_threshold: f64,
    /// Rows used for the invariant; the full length when absent.
    pub invariant_rows: Option<usize>,
    /// Check purity after every layer (layered engine only).
    pub check_purity: bool,
    /// Keep per-realization values in the ensemble records.
    pub keep_raw: bool,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            tol_conv: 1e-3,
            engine: Engine::Fast,
            bc: BoundaryCondition::Pbc,
            q: 0,
            ordering: Ordering::EvolutionOrder,
            gap_threshold: crate::network::DEFAULT_GAP_THRESHOLD,
            invariant_rows: None,
            check_purity: false,
            keep_raw: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub model: ModelSweep,
    pub geometry: GeometrySweep,
    pub realizations: usize,
    pub base_seed: u64,
    pub observables: Vec<Observable>,
    #[serde(default)]
    pub knobs: Knobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub model: ErrorModel,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// `p` on the Nishimori line, `φ` otherwise.
    pub parameter: f64,
}

impl ScanSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScanSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn wants(&self, o: Observable) -> bool {
        self.observables.contains(&o)
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::InvalidInput("realizations must be at least 1".into()));
        }
        if self.observables.is_empty() {
            return Err(Error::InvalidInput("no observables requested".into()));
        }
        let models = self.model.models()?;
        if models.is_empty() || self.geometry.sizes.is_empty() {
            return Err(Error::InvalidInput("empty sweep".into()));
        }
        for model in &models {
            model.coupling()?;
        }
        let k = &self.knobs;
        if !(k.tol_conv > 0.0) || !(k.gap_threshold >= 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        let complex = self.model.is_complex();
        let transport = self.wants(Observable::Conductivity) || self.wants(Observable::Invariant);
        let state = self.wants(Observable::Entanglement) || self.wants(Observable::Profile);
        for (m, l) in self.geometry.shapes() {
            if m < 2 || l < 1 {
                return Err(Error::InvalidGeometry(format!("M = {m}, L = {l}")));
            }
            if state && m % 2 == 1 {
                return Err(Error::InvalidGeometry(format!("half-filled initial states need even M, got {m}")));
            }
            if complex && transport && m % 2 == 1 {
                return Err(Error::InvalidGeometry(format!("complex-coupling networks need even M, got {m}")));
            }
            if transport {
                let rows = k.invariant_rows.unwrap_or(l);
                if rows == 0 || rows > l {
                    return Err(Error::InvalidGeometry(format!("invariant rows {rows} outside 1..={l}")));
                }
                if complex && (l % 2 == 1 || rows % 2 == 1) {
                    return Err(Error::InvalidGeometry(format!(
                        "complex-coupling networks conserve current over even row counts only, got L = {l}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sweep points, model-major.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let shapes = self.geometry.shapes();
        let mut out = Vec::new();
        for model in self.model.models()? {
            for &(m, l) in &shapes {
                out.push(SweepPoint {
                    index: out.len(),
                    model,
                    m,
                    l,
                    parameter: model.phi().unwrap_or(model.p()),
                });
            }
        }
        Ok(out)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of realization `r` at sweep point `k`: the first eight bytes of
/// `SHA-256(base ‖ k ‖ r)`, all little-endian `u64`.
pub fn cell_seed(base_seed: u64, k: usize, r: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update((k as u64).to_le_bytes());
    h.update((r as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed of the initial product state, decorrelated from the disorder seed.
pub fn state_seed(seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"state");
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementSample {
    pub parity: i8,
    pub converged: bool,
    pub lambda0: f64,
    pub lambda1: f64,
    pub s_half: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportSample {
    pub g: f64,
    pub eps_min: f64,
    pub det_pbc: i8,
    pub det_apbc: Option<i8>,
    pub i_sample: Option<i8>,
    pub gapped: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome<T> {
    Recorded(T),
    Dropped(String),
}

impl<T> Outcome<T> {
    pub fn recorded(&self) -> Option<&T> {
        match self {
            Outcome::Recorded(v) => Some(v),
            Outcome::Dropped(_) => None,
        }
    }

    fn from_result(r: Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Recorded(v),
            Err(e) => Outcome::Dropped(e.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub k: usize,
    pub r: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entanglement: Option<Outcome<EntanglementSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport: Option<Outcome<TransportSample>>,
    /// Mean `|C_ab|` at ring distances `d = 2..=M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Outcome<Vec<f64>>>,
}

/// Evolves `c0` through the schedule with the chosen engine and reports
/// whether the half-cut entropy has plateaued.
fn run_engine(
    schedule: &GateSchedule,
    occ: Vec<u8>,
    knobs: &Knobs,
) -> Result<(crate::gaussian::CorrelationMatrix, bool)> {
    let m = schedule.m;
    let c0 = initial_state(&InitialState::Occupations(occ), m)?;
    match knobs.engine {
        Engine::Layered => {
            let options = EvolveOptions {
                tol_conv: knobs.tol_conv,
                check_purity: knobs.check_purity,
                ..EvolveOptions::default()
            };
            let report = evolve(&c0, schedule, &options)?;
            Ok((report.c_final, report.converged))
        }
        Engine::Fast => {
            let c = fast_evolve(schedule, &c0)?;
            // Plateau surrogate: the entropy barely changes over the last
            // `M` rows (`2M` layers, a multiple of four for even `M`).
            let layers = schedule.num_layers();
            let converged = if layers > 2 * m {
                let earlier = fast_evolve(&schedule.truncated(layers - 2 * m), &c0)?;
                let s_now = entropy(&half_cut_spectrum(&c)?);
                let s_before = entropy(&half_cut_spectrum(&earlier)?);
                (s_now - s_before).abs() < knobs.tol_conv
            } else {
                false
            };
            Ok((c, converged))
        }
    }
}

/// Long-time half-cut entanglement of one realization.
///
/// The circuit preserves fermion parity, and in the topological phase one of
/// the two parity sectors carries a frustrated domain wall. Both sectors are
/// evolved from a random half-filled state and its one-site flip; the sector
/// that reached the entropy plateau is kept when exactly one did, and the one
/// with the lower entropy otherwise.
pub fn entanglement_sample(
    field: &CouplingField,
    state_seed: u64,
    knobs: &Knobs,
) -> Result<(EntanglementSample, crate::gaussian::CorrelationMatrix)> {
    let schedule = build_schedule(field, knobs.bc, knobs.q, knobs.ordering);
    let base = InitialState::HalfFilledRandom(state_seed).occupations(field.m)?;
    let mut runs = Vec::with_capacity(2);
    for flip in [false, true] {
        let mut occ = base.clone();
        if flip {
            occ[0] ^= 1;
        }
        let (c, converged) = run_engine(&schedule, occ, knobs)?;
        let spec = half_cut_spectrum(&c)?;
        let (lambda0, lambda1) = zero_mode_and_gap(&spec)?;
        let sample = EntanglementSample {
            parity: parity(&c)?,
            converged,
            lambda0,
            lambda1,
            s_half: entropy(&spec),
        };
        runs.push((sample, c));
    }
    let pick = match (runs[0].0.converged, runs[1].0.converged) {
        (true, false) => 0,
        (false, true) => 1,
        _ => usize::from(runs[1].0.s_half < runs[0].0.s_half),
    };
    Ok(runs.swap_remove(pick))
}

/// Conductivity (and optionally the invariant) of one realization.
pub fn transport_sample(field: &CouplingField, knobs: &Knobs, invariant: bool) -> Result<TransportSample> {
    if invariant {
        let rows = knobs.invariant_rows.unwrap_or(field.l);
        let inv = topological_invariant(field, rows, knobs.gap_threshold)?;
        return Ok(TransportSample {
            g: inv.g_pbc,
            eps_min: inv.eps_min,
            det_pbc: inv.det_sign_pbc,
            det_apbc: Some(inv.det_sign_apbc),
            i_sample: Some(inv.i_sample),
            gapped: Some(inv.gapped),
        });
    }
    let schedule = build_schedule(field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
    let tr = compose_transmission(&schedule)?;
    let le = scaled_energies(&tr.t, &tr.r_prime)?;
    let (sign, _) = det_sign(&tr.r_prime)?;
    Ok(TransportSample {
        g: conductivity(&tr.t, field.l, field.m),
        eps_min: le[0] / field.l as f64,
        det_pbc: sign as i8,
        det_apbc: None,
        i_sample: None,
        gapped: None,
    })
}

/// Computes every requested observable of cell `(k, r)`.
pub fn run_cell(spec: &ScanSpec, point: &SweepPoint, r: usize) -> CellRecord {
    let seed = cell_seed(spec.base_seed, point.index, r);
    let field = sample_field(point.model, point.m, point.l, seed);
    let mut rec = CellRecord {
        k: point.index,
        r,
        seed,
        entanglement: None,
        transport: None,
        profile: None,
    };
    let want_state = spec.wants(Observable::Entanglement) || spec.wants(Observable::Profile);
    if want_state {
        let state = field
            .as_ref()
            .map_err(|e| Error::InvalidInput(e.to_string()))
            .and_then(|f| entanglement_sample(f, state_seed(seed), &spec.knobs));
        let (ent, prof) = match state {
            Ok((sample, c)) => {
                let values = correlation_profile(&c).into_iter().map(|(_, v)| v).collect();
                (Outcome::Recorded(sample), Outcome::Recorded(values))
            }
            Err(e) => (Outcome::Dropped(e.to_string()), Outcome::Dropped(e.to_string())),
        };
        if spec.wants(Observable::Entanglement) {
            rec.entanglement = Some(ent);
        }
        if spec.wants(Observable::Profile) {
            rec.profile = Some(prof);
        }
    }
    if spec.wants(Observable::Conductivity) || spec.wants(Observable::Invariant) {
        let res = field
            .as_ref()
            .map_err(|e| Error::InvalidInput(e.to_string()))
            .and_then(|f| transport_sample(f, &spec.knobs, spec.wants(Observable::Invariant)));
        rec.transport = Some(Outcome::from_result(res));
    }
    rec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub point: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub parameter: f64,
    pub quantity: String,
    pub mean: f64,
    /// `σ/√N`; absent for a single realization.
    pub std_error: Option<f64>,
    pub median: f64,
    pub n: usize,
    pub dropped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<f64>>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean, standard error, median and counts of one quantity at one point.
pub fn summarize(point: &SweepPoint, quantity: &str, values: &[f64], dropped: usize, keep_raw: bool) -> EnsembleRecord {
    let n = values.len();
    EnsembleRecord {
        point: point.index,
        m: point.m,
        l: point.l,
        parameter: point.parameter,
        quantity: quantity.to_string(),
        mean: if n == 0 { f64::NAN } else { stats::mean(values) },
        std_error: (n >= 2).then(|| stats::std_error(values)),
        median: median(values),
        n,
        dropped,
        raw: keep_raw.then(|| values.to_vec()),
    }
}

fn collect<'a, T: 'a, F: Fn(&'a CellRecord) -> Option<&'a Outcome<T>>>(
    cells: &[&'a CellRecord],
    get: F,
) -> (Vec<&'a T>, usize, Vec<String>) {
    let mut ok = Vec::new();
    let mut reasons = Vec::new();
    for c in cells {
        match get(c) {
            Some(Outcome::Recorded(v)) => ok.push(v),
            Some(Outcome::Dropped(why)) => reasons.push(format!("r{}: {why}", c.r)),
            None => {}
        }
    }
    let dropped = reasons.len();
    (ok, dropped, reasons)
}

/// Aggregates cells (sorted by `(k, r)`) into ensemble records, point-major.
pub fn aggregate(spec: &ScanSpec, points: &[SweepPoint], cells: &[CellRecord]) -> Result<Vec<EnsembleRecord>> {
    let keep = spec.knobs.keep_raw;
    let mut out = Vec::new();
    for point in points {
        let here: Vec<&CellRecord> = cells.iter().filter(|c| c.k == point.index).collect();
        let fail = |what: &str, reasons: &[String]| -> Result<()> {
            Err(Error::PointFailed {
                point: point.index,
                requested: spec.realizations,
                diagnostics: format!("{what}: {}", reasons.join("; ")),
            })
        };
        if spec.wants(Observable::Entanglement) {
            let (ok, dropped, reasons) = collect(&here, |c| c.entanglement.as_ref());
            if ok.is_empty() {
                fail("entanglement", &reasons)?;
            }
            let col = |f: fn(&EntanglementSample) -> f64| ok.iter().map(|s| f(s)).collect::<Vec<_>>();
            out.push(summarize(point, "S_half", &col(|s| s.s_half), dropped, keep));
            out.push(summarize(point, "lambda0", &col(|s| s.lambda0), dropped, keep));
            out.push(summarize(point, "lambda1", &col(|s| s.lambda1), dropped, keep));
        }
        if spec.wants(Observable::Conductivity) || spec.wants(Observable::Invariant) {
            let (ok, dropped, reasons) = collect(&here, |c| c.transport.as_ref());
            if ok.is_empty() {
                fail("transport", &reasons)?;
            }
            let g: Vec<f64> = ok.iter().map(|s| s.g).collect();
            out.push(summarize(point, "g", &g, dropped, keep));
            let eps: Vec<f64> = ok.iter().map(|s| s.eps_min).collect();
            out.push(summarize(point, "eps_min", &eps, dropped, keep));
            if spec.wants(Observable::Invariant) {
                let i: Vec<f64> = ok.iter().filter_map(|s| s.i_sample).map(f64::from).collect();
                out.push(summarize(point, "I", &i, dropped, keep));
            }
        }
        if spec.wants(Observable::Profile) {
            let (ok, dropped, reasons) = collect(&here, |c| c.profile.as_ref());
            if ok.is_empty() {
                fail("profile", &reasons)?;
            }
            for d in 0..point.m - 1 {
                let v: Vec<f64> = ok.iter().map(|p| p[d]).collect();
                out.push(summarize(point, &format!("C_d{}", d + 2), &v, dropped, keep));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; falls back to [`WORKERS_VAR`], then to the core count.
    pub workers: Option<usize>,
    /// Output directory for the checkpoint, CSVs and manifest.
    pub out_dir: Option<PathBuf>,
    /// Discard an existing checkpoint instead of resuming from it.
    pub fresh: bool,
    /// Stop after this many newly computed cells, leaving the checkpoint
    /// as an interrupted run would.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ScanResult {
    pub points: Vec<SweepPoint>,
    /// Sorted by `(k, r)`.
    pub cells: Vec<CellRecord>,
    /// Empty unless the scan completed.
    pub records: Vec<EnsembleRecord>,
    pub complete: bool,
    pub computed: usize,
}

pub fn worker_count(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var(WORKERS_VAR).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec_hash: String,
}

/// Completed cells of a checkpoint written for `spec_hash`.
pub fn read_checkpoint(path: &Path, spec_hash: &str) -> Result<BTreeMap<(usize, usize), CellRecord>> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header: CheckpointHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)
            .map_err(|e| Error::RefusedResume(format!("unreadable checkpoint header: {e}")))?,
        None => return Err(Error::RefusedResume("empty checkpoint".into())),
    };
    if header.spec_hash != spec_hash {
        return Err(Error::RefusedResume(format!(
            "checkpoint was written for spec {}, not {spec_hash}",
            header.spec_hash
        )));
    }
    let mut done = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let cell: CellRecord = serde_json::from_str(&line)
            .map_err(|e| Error::RefusedResume(format!("corrupted checkpoint line {}: {e}", i + 2)))?;
        done.insert((cell.k, cell.r), cell);
    }
    Ok(done)
}

struct Appender {
    file: Option<File>,
}

impl Appender {
    fn append(&mut self, cell: &CellRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_string(cell)?;
            line.push('\n');
            // One write per record keeps every line whole.
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs (or resumes) a scan. Completed scans with an output directory also
/// write the CSVs and the manifest.
pub fn run_scan(spec: &ScanSpec, options: &RunOptions) -> Result<ScanResult> {
    spec.validate()?;
    let started = unix_now();
    let points = spec.points()?;
    let hash = spec.hash();
    let mut done = BTreeMap::new();
    let mut appender = Appender { file: None };
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(CHECKPOINT_FILE);
        if path.exists() && !options.fresh {
            done = read_checkpoint(&path, &hash)?;
            appender.file = Some(OpenOptions::new().append(true).open(&path)?);
        } else {
            let mut f = File::create(&path)?;
            let header = serde_json::to_string(&CheckpointHeader { spec_hash: hash.clone() })?;
            f.write_all(format!("{header}\n").as_bytes())?;
            appender.file = Some(f);
        }
    }
    let pending: Vec<(usize, usize)> = points
        .iter()
        .flat_map(|p| (0..spec.realizations).map(move |r| (p.index, r)))
        .filter(|key| !done.contains_key(key))
        .collect();
    let workers = worker_count(options.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let started_cells = AtomicUsize::new(0);
    let limit = options.stop_after.unwrap_or(usize::MAX);
    let appender = Mutex::new(appender);
    let fresh: Mutex<Vec<CellRecord>> = Mutex::new(Vec::new());
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    pool.install(|| {
        pending.par_iter().for_each(|&(k, r)| {
            if started_cells.fetch_add(1, AtomicOrdering::SeqCst) >= limit {
                return;
            }
            let cell = run_cell(spec, &points[k], r);
            for (what, outcome) in [
                ("entanglement", cell.entanglement.as_ref().and_then(dropped_reason)),
                ("transport", cell.transport.as_ref().and_then(dropped_reason)),
            ] {
                if let Some(why) = outcome {
                    log::warn!("dropped {what} at point {k}, realization {r}: {why}");
                }
            }
            if let Err(e) = appender.lock().expect("appender lock").append(&cell) {
                io_error.lock().expect("error lock").get_or_insert(e);
            }
            fresh.lock().expect("result lock").push(cell);
        });
    });
    if let Some(e) = io_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let fresh = fresh.into_inner().expect("result lock");
    let computed = fresh.len();
    for cell in fresh {
        done.insert((cell.k, cell.r), cell);
    }
    let cells: Vec<CellRecord> = done.into_values().collect();
    let complete = cells.len() == points.len() * spec.realizations;
    let mut result = ScanResult {
        points,
        cells,
        records: Vec::new(),
        complete,
        computed,
    };
    if !complete {
        return Ok(result);
    }
    let aggregated = aggregate(spec, &result.points, &result.cells);
    if let Some(dir) = &options.out_dir {
        write_outputs(spec, &result, dir)?;
        write_manifest(spec, &result, dir, started, workers, aggregated.as_ref().err())?;
    }
    result.records = aggregated?;
    if let Some(dir) = &options.out_dir {
        write_summary(spec, &result.records, dir)?;
    }
    Ok(result)
}

fn dropped_reason<T>(o: &Outcome<T>) -> Option<&str> {
    match o {
        Outcome::Dropped(why) => Some(why),
        Outcome::Recorded(_) => None,
    }
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Per-realization CSVs, one per observable family.
pub fn write_outputs(spec: &ScanSpec, result: &ScanResult, dir: &Path) -> Result<()> {
    let param = spec.model.parameter_name();
    let k = &spec.knobs;
    if spec.wants(Observable::Entanglement) {
        let mut w = csv::Writer::from_path(dir.join("entanglement.csv"))?;
        w.write_record(["realization", "M", "L", param, "bc", "q", "parity", "lambda0", "lambda1", "S_half", "converged"])?;
        for c in &result.cells {
            if let Some(Outcome::Recorded(s)) = &c.entanglement {
                let p = &result.points[c.k];
                w.write_record([
                    c.r.to_string(),
                    p.m.to_string(),
                    p.l.to_string(),
                    fmt(p.parameter),
                    k.bc.to_string(),
                    k.q.to_string(),
                    s.parity.to_string(),
                    fmt(s.lambda0),
                    fmt(s.lambda1),
                    fmt(s.s_half),
                    s.converged.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    if spec.wants(Observable::Conductivity) || spec.wants(Observable::Invariant) {
        let mut w = csv::Writer::from_path(dir.join("transport.csv"))?;
        w.write_record([
            "realization",
            "M",
            "L",
            param,
            "g_sample",
            "eps_min",
            "detRp_pbc_sign",
            "detRp_apbc_sign",
            "I_sample",
            "gapped",
        ])?;
        for c in &result.cells {
            if let Some(Outcome::Recorded(s)) = &c.transport {
                let p = &result.points[c.k];
                w.write_record([
                    c.r.to_string(),
                    p.m.to_string(),
                    p.l.to_string(),
                    fmt(p.parameter),
                    fmt(s.g),
                    fmt(s.eps_min),
                    s.det_pbc.to_string(),
                    fmt_opt(s.det_apbc),
                    fmt_opt(s.i_sample),
                    fmt_opt(s.gapped),
                ])?;
            }
        }
        w.flush()?;
    }
    if spec.wants(Observable::Profile) {
        let mut w = csv::Writer::from_path(dir.join("profile.csv"))?;
        w.write_record(["realization", "M", "L", param, "d", "mean_abs_C"])?;
        for c in &result.cells {
            if let Some(Outcome::Recorded(v)) = &c.profile {
                let p = &result.points[c.k];
                for (i, x) in v.iter().enumerate() {
                    w.write_record([
                        c.r.to_string(),
                        p.m.to_string(),
                        p.l.to_string(),
                        fmt(p.parameter),
                        (i + 2).to_string(),
                        fmt(*x),
                    ])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Per-point means with `2σ/√N` error bars.
pub fn write_summary(spec: &ScanSpec, records: &[EnsembleRecord], dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["point", "M", "L", spec.model.parameter_name(), "quantity", "mean", "err2", "median", "n", "dropped"])?;
    for r in records {
        w.write_record([
            r.point.to_string(),
            r.m.to_string(),
            r.l.to_string(),
            fmt(r.parameter),
            r.quantity.clone(),
            fmt(r.mean),
            r.std_error.map_or_else(|| "nan".into(), |s| fmt(2.0 * s)),
            fmt(r.median),
            r.n.to_string(),
            r.dropped.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ManifestPoint {
    point: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "L")]
    l: usize,
    parameter: f64,
    requested: usize,
    dropped: BTreeMap<&'static str, usize>,
}

fn write_manifest(
    spec: &ScanSpec,
    result: &ScanResult,
    dir: &Path,
    started: u64,
    workers: usize,
    failure: Option<&Error>,
) -> Result<()> {
    let points: Vec<ManifestPoint> = result
        .points
        .iter()
        .map(|p| {
            let here: Vec<&CellRecord> = result.cells.iter().filter(|c| c.k == p.index).collect();
            let mut dropped = BTreeMap::new();
            if spec.wants(Observable::Entanglement) {
                dropped.insert("entanglement", collect(&here, |c| c.entanglement.as_ref()).1);
            }
            if spec.wants(Observable::Conductivity) || spec.wants(Observable::Invariant) {
                dropped.insert("transport", collect(&here, |c| c.transport.as_ref()).1);
            }
            if spec.wants(Observable::Profile) {
                dropped.insert("profile", collect(&here, |c| c.profile.as_ref()).1);
            }
            ManifestPoint {
                point: p.index,
                m: p.m,
                l: p.l,
                parameter: p.parameter,
                requested: spec.realizations,
                dropped,
            }
        })
        .collect();
    let manifest = serde_json::json!({
        "spec_hash": spec.hash(),
        "spec": spec,
        "started_unix": started,
        "finished_unix": unix_now(),
        "workers": workers,
        "points": points,
        "failure": failure.map(|e| e.to_string()),
    });
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(observables: Vec<Observable>) -> ScanSpec {
        ScanSpec {
            model: ModelSweep::Nishimori { p: vec![0.05, 0.3] },
            geometry: GeometrySweep {
                sizes: vec![4],
                aspect: Aspect::RowsPerSite { ratio: 3 },
            },
            realizations: 3,
            base_seed: 11,
            observables,
            knobs: Knobs::default(),
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(cell_seed(1, 2, 3), cell_seed(1, 2, 3));
        assert_ne!(cell_seed(1, 2, 3), cell_seed(1, 3, 2));
        assert_ne!(cell_seed(1, 2, 3), cell_seed(2, 2, 3));
        assert_ne!(state_seed(5), 5);
    }

    #[test]
    fn single_realization_has_no_error_bar() {
        let p = SweepPoint {
            index: 0,
            model: ErrorModel::nishimori(0.1).unwrap(),
            m: 4,
            l: 4,
            parameter: 0.1,
        };
        let rec = summarize(&p, "g", &[2.5], 0, false);
        assert_eq!(rec.mean, 2.5);
        assert_eq!(rec.std_error, None);
        assert_eq!(rec.median, 2.5);
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn json_round_trip_and_hash() {
        let s = spec(vec![Observable::Entanglement]);
        let text = serde_json::to_string(&s).unwrap();
        let back = ScanSpec::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
        let mut other = s.clone();
        other.base_seed += 1;
        assert_ne!(other.hash(), s.hash());
    }

    #[test]
    fn config_defaults_and_validation() {
        let text = r#"{"model": {"line": "twirl", "phi_over_pi": [0.05]},
                       "geometry": {"sizes": [4, 6], "aspect": {"rule": "sites_per_row", "ratio": 5}},
                       "realizations": 2, "base_seed": 1, "observables": ["conductivity"]}"#;
        let s = ScanSpec::from_json(text).unwrap();
        assert_eq!(s.knobs, Knobs::default());
        assert_eq!(s.geometry.shapes(), vec![(20, 4), (30, 6)]);
        let odd = text.replace("[4, 6]", "[5]");
        assert!(matches!(ScanSpec::from_json(&odd), Err(Error::InvalidGeometry(_))));
        let zero = text.replace("\"realizations\": 2", "\"realizations\": 0");
        assert!(ScanSpec::from_json(&zero).is_err());
        let bad_p = r#"{"model": {"line": "nishimori", "p": [1.5]},
                        "geometry": {"sizes": [4], "aspect": {"rule": "fixed_rows", "rows": 4}},
                        "realizations": 1, "base_seed": 1, "observables": ["entanglement"]}"#;
        assert!(ScanSpec::from_json(bad_p).is_err());
        let unknown = text.replace("\"base_seed\"", "\"bogus\": 1, \"base_seed\"");
        assert!(ScanSpec::from_json(&unknown).is_err());
    }

    #[test]
    fn points_are_model_major() {
        let mut s = spec(vec![Observable::Conductivity]);
        s.geometry.sizes = vec![4, 6];
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!((pts[1].parameter, pts[1].m), (0.05, 6));
        assert_eq!((pts[2].parameter, pts[2].m), (0.3, 4));
        assert!(pts.iter().enumerate().all(|(i, p)| p.index == i));
    }

    #[test]
    fn in_memory_scan_counts_every_cell() {
        let s = spec(vec![Observable::Entanglement, Observable::Invariant, Observable::Profile]);
        let res = run_scan(&s, &RunOptions { workers: Some(1), ..Default::default() }).unwrap();
        assert!(res.complete);
        assert_eq!(res.cells.len(), 6);
        for rec in &res.records {
            assert_eq!(rec.n + rec.dropped, 3, "{}", rec.quantity);
        }
        assert!(res.records.iter().any(|r| r.quantity == "C_d4"));
    }

    #[test]
    fn layered_and_fast_engines_agree() {
        let field = sample_field(ErrorModel::nishimori(0.1).unwrap(), 6, 12, 3).unwrap();
        let fast = entanglement_sample(&field, 9, &Knobs::default()).unwrap().0;
        let knobs = Knobs {
            engine: Engine::Layered,
            ..Knobs::default()
        };
        let slow = entanglement_sample(&field, 9, &knobs).unwrap().0;
        assert!((fast.s_half - slow.s_half).abs() < 1e-8);
        assert_eq!(fast.parity, slow.parity);
    }
}

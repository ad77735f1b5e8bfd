//! Batch front-end: manifest-driven solve / validate / uniqueness /
//! baseline / simulate / report workflows.
//!
//! One manifest describes one job. Flags override manifest fields, the
//! resolved manifest is embedded in every JSON output, and repeated runs of
//! the same manifest produce byte-identical files (no timestamps). On error
//! partial outputs are removed and a machine-readable error report is
//! returned to the caller.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baseline::{bernstein_ode_residual, bernstein_transform, explicit_profile, log_spaced};
use crate::dynamics::{run, total_mass, SimConfig, SimState};
use crate::error::{CoagError, Result};
use crate::grid::{GridHandle, SizeGrid};
use crate::io;
use crate::kernel::KernelSpec;
use crate::profile::{mass_flux_at, EquationId, Profile};
use crate::solver::{
    self, solve, tail_report, uniqueness_experiment, InitKind, SolverConfig, UniquenessVerdict,
};

pub const PROFILE_CSV: &str = "profile.csv";
pub const PROFILE_META: &str = "profile.meta.json";
pub const SOLVE_REPORT: &str = "solve_report.json";
pub const VALIDATION_JSON: &str = "validation.json";
pub const UNIQUENESS_MATRIX: &str = "uniqueness_matrix.csv";
pub const UNIQUENESS_JSON: &str = "uniqueness.json";
pub const BASELINE_PROFILE_CSV: &str = "baseline_profile.csv";
pub const BASELINE_PROFILE_META: &str = "baseline_profile.meta.json";
pub const BERNSTEIN_CSV: &str = "bernstein.csv";
pub const BERNSTEIN_RESIDUAL_CSV: &str = "bernstein_ode_residual.csv";
pub const BASELINE_JSON: &str = "baseline.json";
pub const TIMESERIES_CSV: &str = "timeseries.csv";
pub const SIMULATE_JSON: &str = "simulate.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Solve,
    Validate,
    Uniqueness,
    Baseline,
    Simulate,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { x_min: 1e-6, x_max: 1e3, n_cells: 600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimInit {
    /// Indicator on [0.5, 1.5], value-scaled to total mass rho.
    UnitBump,
    /// (w^2/rho) exp(-w x / rho); exact self-similar data at alpha = 0.
    SelfSimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimReference {
    /// Explicit profile at alpha = 0, nothing otherwise.
    Auto,
    None,
    /// Constant-kernel explicit profile.
    Explicit,
    /// Solve for the profile first, then track the distance to it.
    Solve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub t_end: f64,
    pub cfl_safety: f64,
    pub output_times: Vec<f64>,
    pub dt_cap: f64,
    pub init: SimInit,
    pub reference: SimReference,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            t_end: 100.0,
            cfl_safety: 0.5,
            output_times: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            dt_cap: 1.0,
            init: SimInit::UnitBump,
            reference: SimReference::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniquenessParams {
    pub inits: Vec<InitKind>,
    pub threshold: f64,
}

impl Default for UniquenessParams {
    fn default() -> Self {
        Self {
            inits: vec![InitKind::Bump, InitKind::ExponentialCapped, InitKind::ShiftedBump],
            threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernsteinParams {
    pub xi_min: f64,
    pub xi_max: f64,
    pub n_points: usize,
}

impl Default for BernsteinParams {
    fn default() -> Self {
        Self { xi_min: 1e-2, xi_max: 1e3, n_points: 200 }
    }
}

/// Fully resolved description of one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub command: Option<CommandKind>,
    pub alpha: f64,
    pub w: f64,
    pub rho: f64,
    pub grid: GridParams,
    pub solver: SolverConfig,
    pub sim: SimParams,
    pub uniqueness: UniquenessParams,
    pub bernstein: BernsteinParams,
    pub out_dir: String,
    /// Reserved for randomized initializations in property sweeps.
    pub seed: u64,
    /// Profile CSV consumed by `validate`.
    pub profile: Option<String>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            command: None,
            alpha: 0.5,
            w: 1.0,
            rho: 1.0,
            grid: GridParams::default(),
            solver: SolverConfig::default(),
            sim: SimParams::default(),
            uniqueness: UniquenessParams::default(),
            bernstein: BernsteinParams::default(),
            out_dir: "out".into(),
            seed: 0,
            profile: None,
        }
    }
}

impl RunManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| CoagError::Manifest(e.to_string()))?;
        Ok(manifest)
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.alpha, self.w, self.rho)
    }

    pub fn build_grid(&self) -> Result<GridHandle> {
        Ok(Arc::new(SizeGrid::geometric(self.grid.x_min, self.grid.x_max, self.grid.n_cells)?))
    }
}

/// Flag-level overrides; flags win over the manifest.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub w: Option<f64>,
    pub rho: Option<f64>,
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub cells: Option<usize>,
    pub out: Option<String>,
    pub profile: Option<String>,
}

impl Overrides {
    pub fn apply(&self, manifest: &mut RunManifest) {
        if let Some(v) = self.alpha {
            manifest.alpha = v;
        }
        if let Some(v) = self.w {
            manifest.w = v;
        }
        if let Some(v) = self.rho {
            manifest.rho = v;
        }
        if let Some(v) = self.x_min {
            manifest.grid.x_min = v;
        }
        if let Some(v) = self.x_max {
            manifest.grid.x_max = v;
        }
        if let Some(v) = self.cells {
            manifest.grid.n_cells = v;
        }
        if let Some(v) = &self.out {
            manifest.out_dir = v.clone();
        }
        if let Some(v) = &self.profile {
            manifest.profile = Some(v.clone());
        }
    }
}

/// Thread cap from COAGSCALE_THREADS, else the machine parallelism.
pub fn thread_cap() -> usize {
    match std::env::var("COAGSCALE_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// Machine-readable error payload printed by the binary on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorReport {
    pub fn of(e: &CoagError) -> Self {
        Self { error: ErrorBody { code: e.code().into(), message: e.to_string() } }
    }
}

#[derive(Serialize)]
struct WithManifest<'a, T: Serialize> {
    manifest: &'a RunManifest,
    #[serde(flatten)]
    payload: T,
}

/// Files produced by a successful run, in write order.
pub struct Execution {
    pub written: Vec<PathBuf>,
    /// One-line human summary (the uniqueness verdict line, etc.).
    pub summary: String,
}

/// Executes the manifest; on error all partially written files are removed.
pub fn execute(manifest: &RunManifest) -> Result<Execution> {
    let mut written = Vec::new();
    match run_command(manifest, &mut written) {
        Ok(summary) => Ok(Execution { written, summary }),
        Err(e) => {
            for path in written.iter().rev() {
                fs::remove_file(path).ok();
            }
            Err(e)
        }
    }
}

fn out_path(manifest: &RunManifest, name: &str) -> PathBuf {
    Path::new(&manifest.out_dir).join(name)
}

fn run_command(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let command = manifest
        .command
        .ok_or_else(|| CoagError::Manifest("no command given (argv or manifest)".into()))?;
    match command {
        CommandKind::Solve => cmd_solve(manifest, written),
        CommandKind::Validate => cmd_validate(manifest, written),
        CommandKind::Uniqueness => cmd_uniqueness(manifest, written),
        CommandKind::Baseline => cmd_baseline(manifest, written),
        CommandKind::Simulate => cmd_simulate(manifest, written),
        CommandKind::Report => cmd_report(manifest, written),
    }
}

fn track(written: &mut Vec<PathBuf>, path: PathBuf) -> PathBuf {
    written.push(path.clone());
    path
}

fn cmd_solve(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let spec = manifest.kernel_spec()?;
    let grid = manifest.build_grid()?;
    let (profile, report) = solve(spec, &manifest.solver, &grid)?;
    io::write_profile_csv(&track(written, out_path(manifest, PROFILE_CSV)), &profile)?;
    io::write_profile_meta(&track(written, out_path(manifest, PROFILE_META)), &profile)?;
    io::write_json(
        &track(written, out_path(manifest, SOLVE_REPORT)),
        &WithManifest { manifest, payload: &report },
    )?;
    Ok(format!(
        "solve: converged={} iterations={} final_gap={:e}",
        report.converged, report.iterations, report.final_gap
    ))
}

#[derive(Serialize)]
struct ValidationPayload {
    residual_norms: std::collections::BTreeMap<String, f64>,
    moment_identity_gap: f64,
    b99_gap: Option<f64>,
    moments: crate::profile::MomentSummary,
    tail: solver::TailReport,
    /// Flux-balance norm with and without the small-size tail correction,
    /// so sensitivity to the x_min truncation is visible.
    sensitivity: SensitivityPayload,
}

#[derive(Serialize)]
struct SensitivityPayload {
    b00_norm_with_left_tail: f64,
    b00_norm_without_left_tail: f64,
}

fn cmd_validate(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let csv = manifest
        .profile
        .as_deref()
        .ok_or_else(|| CoagError::Manifest("validate needs a profile path".into()))?;
    let csv_path = PathBuf::from(csv);
    let meta_path = csv_path.with_extension("meta.json");
    let profile = io::read_profile(&csv_path, &meta_path)?;

    let mut residual_norms = std::collections::BTreeMap::new();
    for eq in EquationId::ALL {
        residual_norms.insert(eq.as_str().to_string(), profile.residual_norm(eq));
    }
    let b99 = if profile.spec().alpha > 0.0 { Some(profile.b99_gap()?) } else { None };

    let grid = profile.grid();
    let pair = profile.transform_pair();
    let tail = pair.tail_fn();
    let spec = profile.spec();
    let b00_norm = |left_tail: bool| -> Result<f64> {
        let flux =
            mass_flux_at(grid, profile.values(), spec.alpha, &tail, grid.nodes(), left_tail);
        let res: Vec<f64> = (0..grid.n_cells())
            .map(|i| {
                (spec.w * grid.nodes()[i].powi(2) * profile.values()[i] - flux[i]).abs()
            })
            .collect();
        grid.integrate(&res)
    };

    let payload = ValidationPayload {
        residual_norms,
        moment_identity_gap: profile.moment_identity_gap(),
        b99_gap: b99,
        moments: profile.moments(),
        tail: tail_report(&profile),
        sensitivity: SensitivityPayload {
            b00_norm_with_left_tail: b00_norm(true)?,
            b00_norm_without_left_tail: b00_norm(false)?,
        },
    };
    io::write_json(
        &track(written, out_path(manifest, VALIDATION_JSON)),
        &WithManifest { manifest, payload: &payload },
    )?;
    Ok(format!(
        "validate: moment_identity_gap={:e}",
        payload.moment_identity_gap
    ))
}

fn cmd_uniqueness(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let spec = manifest.kernel_spec()?;
    let grid = manifest.build_grid()?;
    let report = uniqueness_experiment(
        spec,
        &manifest.solver,
        &grid,
        &manifest.uniqueness.inits,
        manifest.uniqueness.threshold,
        thread_cap(),
    )?;
    let labels: Vec<String> = manifest.uniqueness.inits.iter().map(|i| i.label()).collect();
    io::write_matrix_csv(
        &track(written, out_path(manifest, UNIQUENESS_MATRIX)),
        &labels,
        &report.distances,
    )?;
    io::write_json(
        &track(written, out_path(manifest, UNIQUENESS_JSON)),
        &WithManifest { manifest, payload: &report },
    )?;
    let verdict = match report.verdict {
        UniquenessVerdict::Unique => "unique",
        UniquenessVerdict::NotUnique => "not-unique",
        UniquenessVerdict::SolverFailure => "solver-failure",
    };
    Ok(match report.max_off_diagonal {
        Some(m) => format!(
            "uniqueness verdict: {verdict} (max off-diagonal {:e}, threshold {:e})",
            m, report.threshold
        ),
        None => format!("uniqueness verdict: {verdict} (no distances available)"),
    })
}

#[derive(Serialize)]
struct BaselinePayload {
    moments: crate::profile::MomentSummary,
    max_interior_ode_residual: f64,
    /// Interior means xi in [0.1, 10] with full stencil support.
    interior_points: usize,
}

fn cmd_baseline(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let grid = manifest.build_grid()?;
    let profile = explicit_profile(manifest.w, manifest.rho, &grid)?;
    let xi = log_spaced(
        manifest.bernstein.xi_min,
        manifest.bernstein.xi_max,
        manifest.bernstein.n_points,
    )?;
    let samples = bernstein_transform(&profile, &xi)?;
    let residual = bernstein_ode_residual(&samples, manifest.w)?;

    io::write_profile_csv(&track(written, out_path(manifest, BASELINE_PROFILE_CSV)), &profile)?;
    io::write_profile_meta(&track(written, out_path(manifest, BASELINE_PROFILE_META)), &profile)?;
    io::write_bernstein_csv(&track(written, out_path(manifest, BERNSTEIN_CSV)), &samples)?;
    io::write_xi_residual_csv(
        &track(written, out_path(manifest, BERNSTEIN_RESIDUAL_CSV)),
        &xi,
        &residual,
    )?;

    let mut max_res = 0.0f64;
    let mut count = 0usize;
    for i in 2..xi.len().saturating_sub(2) {
        if (0.1..=10.0).contains(&xi[i]) {
            max_res = max_res.max(residual[i].abs());
            count += 1;
        }
    }
    let payload =
        BaselinePayload { moments: profile.moments(), max_interior_ode_residual: max_res, interior_points: count };
    io::write_json(
        &track(written, out_path(manifest, BASELINE_JSON)),
        &WithManifest { manifest, payload: &payload },
    )?;
    Ok(format!("baseline: max interior ODE residual {:e}", max_res))
}

#[derive(Serialize)]
struct SimulatePayload {
    rows: Vec<crate::dynamics::SeriesRow>,
    initial_mass: f64,
    final_mass: f64,
    relative_mass_drift: f64,
    steps_taken: usize,
    /// Mass fraction in the first decade of cells at the final time.
    final_first_decade_mass_fraction: f64,
    snapshots: Vec<String>,
}

fn cmd_simulate(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let spec = manifest.kernel_spec()?;
    let grid = manifest.build_grid()?;
    let initial = match manifest.sim.init {
        SimInit::UnitBump => {
            let mut state = SimState::from_fn(Arc::clone(&grid), |x| {
                if (0.5..=1.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })?;
            let m = total_mass(&state);
            if !(m > 0.0) {
                return Err(CoagError::InvalidSimConfig(
                    "bump support does not intersect the grid".into(),
                ));
            }
            let c = manifest.rho / m;
            for v in state.f_values.iter_mut() {
                *v *= c;
            }
            state
        }
        SimInit::SelfSimilar => {
            let w = manifest.w;
            let rho = manifest.rho;
            SimState::from_fn(Arc::clone(&grid), |x| (w * w / rho) * (-w * x / rho).exp())?
        }
    };

    let reference = match manifest.sim.reference {
        SimReference::None => None,
        SimReference::Auto => {
            if manifest.alpha == 0.0 {
                Some(explicit_profile(manifest.w, manifest.rho, &grid)?)
            } else {
                None
            }
        }
        SimReference::Explicit => Some(explicit_profile(manifest.w, manifest.rho, &grid)?),
        SimReference::Solve => {
            let (p, _) = solve(spec, &manifest.solver, &grid)?;
            Some(p)
        }
    };

    let cfg = SimConfig {
        spec,
        t_end: manifest.sim.t_end,
        cfl_safety: manifest.sim.cfl_safety,
        output_times: manifest.sim.output_times.clone(),
        dt_cap: manifest.sim.dt_cap,
    };
    let initial_mass = total_mass(&initial);
    let out = run(initial, &cfg, reference.as_ref())?;

    io::write_series_csv(&track(written, out_path(manifest, TIMESERIES_CSV)), &out.rows)?;
    let mut snapshot_names = Vec::new();
    for (idx, snap) in out.snapshots.iter().enumerate() {
        let name = format!("snapshot_{idx:03}.csv");
        let profile = Profile::new(Arc::clone(&snap.grid), snap.f_values.clone(), spec)?;
        io::write_profile_csv(&track(written, out_path(manifest, &name)), &profile)?;
        snapshot_names.push(name);
    }
    let final_mass = total_mass(&out.final_state);
    let drift = (final_mass - initial_mass) / initial_mass;

    let limit = 10.0 * grid.x_min();
    let mut first = 0.0;
    let mut total = 0.0;
    for i in 0..grid.n_cells() {
        let m = grid.nodes()[i] * out.final_state.f_values[i] * grid.weights()[i];
        total += m;
        if grid.nodes()[i] <= limit {
            first += m;
        }
    }

    let payload = SimulatePayload {
        rows: out.rows.clone(),
        initial_mass,
        final_mass,
        relative_mass_drift: drift,
        steps_taken: out.steps_taken,
        final_first_decade_mass_fraction: if total > 0.0 { first / total } else { 0.0 },
        snapshots: snapshot_names,
    };
    io::write_json(
        &track(written, out_path(manifest, SIMULATE_JSON)),
        &WithManifest { manifest, payload: &payload },
    )?;
    Ok(format!(
        "simulate: steps={} relative_mass_drift={:e}",
        out.steps_taken, drift
    ))
}

fn cmd_report(manifest: &RunManifest, written: &mut Vec<PathBuf>) -> Result<String> {
    let dir = Path::new(&manifest.out_dir);
    let mut text = String::from("coagscale run summary\n=====================\n");
    let mut any = false;
    let sections: [(&str, &str); 5] = [
        (SOLVE_REPORT, "solve"),
        (VALIDATION_JSON, "validate"),
        (UNIQUENESS_JSON, "uniqueness"),
        (BASELINE_JSON, "baseline"),
        (SIMULATE_JSON, "simulate"),
    ];
    for (file, label) in sections {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        any = true;
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
        text.push_str(&format!("\n[{label}] from {file}\n"));
        summarize_json(&value, &mut text);
    }
    let csv = dir.join(TIMESERIES_CSV);
    if csv.exists() {
        any = true;
        text.push_str(&format!(
            "\n[plot-ready] {TIMESERIES_CSV}: columns t,mass,distance\n"
        ));
    }
    if !any {
        text.push_str("\n(no prior outputs found in the output directory)\n");
    }
    fs::create_dir_all(dir)?;
    let path = track(written, dir.join(REPORT_TXT));
    fs::write(&path, &text)?;
    Ok(text)
}

fn summarize_json(value: &serde_json::Value, text: &mut String) {
    let keys = [
        "converged",
        "iterations",
        "final_gap",
        "moment_identity_gap",
        "b99_gap",
        "residual_norms",
        "moments",
        "verdict",
        "max_off_diagonal",
        "max_interior_ode_residual",
        "relative_mass_drift",
        "steps_taken",
    ];
    if let Some(map) = value.as_object() {
        for key in keys {
            if let Some(v) = map.get(key) {
                text.push_str(&format!("  {key} = {v}\n"));
            }
        }
    }
}

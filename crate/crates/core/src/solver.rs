//! Fixed-point computation of scaling profiles and the uniqueness experiment.
//!
//! The iteration runs on the derivative-free flux balance
//!
//!   w x^2 phi(x) = 2 * integral over (0, x) of y^(1-alpha) phi(y) H(x-y) dy
//!
//! whose right side is a single convolution against the tail transform H.
//! The map T[phi](x) = flux / (w x^2) preserves non-negativity, and true
//! profiles are exactly its fixed points.
//!
//! Two invariances make the raw iteration degenerate: multiplying phi by a
//! constant c turns a speed-w profile into a speed-(c w) profile, and the
//! scaling action phi_a(x) = a^(1-2 alpha) phi(a x) maps the fixed-point set
//! onto itself. Each iteration therefore renormalizes: the amplitude is
//! anchored so the effective speed stays at the requested w, and the scaling
//! direction is pinned by transforming to M_-alpha = 1 and resampling onto
//! the reference grid. At alpha = 0 the amplitude anchor reduces to holding
//! M_0 = w, the value the moment identity forces there, and the scaling
//! direction is neutral in all moments of interest, so no resampling happens.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::grid::GridHandle;
use crate::kernel::KernelSpec;
use crate::profile::{mass_flux_at, EquationId, MomentSummary, Profile};

/// Largest single grid rescaling; profiles sit decades inside the truncated
/// domain, so even a large exact transform keeps the support on the grid.
const MAX_STEP_RESCALE: f64 = 32.0;

/// Iterations of sign-alternating updates that trigger the damping fallback.
const OSCILLATION_PATIENCE: usize = 3;

/// Anderson history is rebuilt from scratch this often.
const ANDERSON_RESTART: usize = 40;

/// Acceleration engages only once the residual is small enough for the
/// normalized map to behave linearly.
const ANDERSON_ENGAGE_GAP: f64 = 1e-3;

/// A residual growing this much in one step flushes the history and falls
/// back to the plain step.
const ANDERSON_GROWTH_LIMIT: f64 = 4.0;

/// Two successive relaxed endpoints of the pin-and-relax cycle agreeing to
/// this multiple of the tolerance end the iteration; the cycle point they
/// recur to is a property of the map, not of the starting guess.
const ENDPOINT_RECURRENCE_FACTOR: f64 = 20.0;

/// Consecutive sub-tolerance gaps required to declare convergence. A single
/// dip can be a cancellation between slow spiral modes, not proximity to
/// the fixed point.
const CONVERGENCE_WINDOW: usize = 5;

/// Starting guesses for the iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// exp(-x - 1/x); all moments finite for every alpha.
    Bump,
    /// exp(-x); admissible only for alpha < 1.
    Exponential,
    /// exp(-x - 0.01/x); the exponential with a mild small-size cutoff.
    ExponentialCapped,
    /// exp(-x/2 - 2/x); the bump moved to larger sizes.
    ShiftedBump,
    /// Bump with seed-derived rate constants, for randomized sweeps.
    RandomBump { seed: u64 },
    /// Caller-provided node values on the solve grid.
    Custom { values: Vec<f64> },
}

impl InitKind {
    pub fn label(&self) -> String {
        match self {
            InitKind::Bump => "bump".into(),
            InitKind::Exponential => "exponential".into(),
            InitKind::ExponentialCapped => "exponential-capped".into(),
            InitKind::ShiftedBump => "shifted-bump".into(),
            InitKind::RandomBump { seed } => format!("random-bump({seed})"),
            InitKind::Custom { .. } => "custom".into(),
        }
    }
}

/// How the returned profile is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// M_-alpha(phi) = 1 (undefined at alpha = 0).
    UnitMinusAlphaMoment,
    /// M_1(phi) = rho.
    PrescribedMass,
}

/// Fixed-point iteration controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Weighted L1 tolerance on the normalized fixed-point residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Iterate mixing in (0, 1]; 1 is the undamped map.
    pub damping: f64,
    pub init: InitKind,
    pub normalization: Normalization,
    /// Anderson acceleration history depth for alpha > 0; 0 disables it.
    /// The alpha = 0 baseline always runs the plain damped iteration, whose
    /// contraction is checked against the explicit solution.
    pub anderson_depth: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
            init: InitKind::Bump,
            normalization: Normalization::PrescribedMass,
            anderson_depth: 0,
        }
    }
}

/// Left/right boundary diagnostics of a profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailReport {
    /// Fraction of the mass M_1 carried by cells in [x_min, 10 x_min].
    pub first_decade_mass_fraction: f64,
    pub value_at_x_min: f64,
    pub value_at_x_max: f64,
}

/// Outcome of a solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_gap: f64,
    pub converged: bool,
    pub residual_norms: BTreeMap<String, f64>,
    pub moments: MomentSummary,
    pub moment_identity_gap: f64,
    pub b99_gap: Option<f64>,
    pub normalization: String,
    pub damping_used: f64,
    pub oscillation_fallback: bool,
    /// Weighted L1 distance between successive normalized iterates.
    pub successive_gaps: Vec<f64>,
    pub tail: TailReport,
}

/// One application of the flux map T.
///
/// T[phi](x) = (2 / (w x^2)) * integral over (0, x) of y^(1-alpha) phi(y)
/// H(x-y) dy; non-negative whenever phi is. The zero profile maps to zero.
pub fn fixed_point_step(p: &Profile) -> Result<Profile> {
    let spec = p.spec();
    let grid = p.grid();
    let pair = p.transform_pair();
    let tail = pair.tail_fn();
    let flux = mass_flux_at(grid, p.values(), spec.alpha, &tail, grid.nodes(), true);
    let values: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(flux.iter())
        .map(|(&x, &j)| j / (spec.w * x * x))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoagError::NonFinite { context: "fixed_point_step" });
    }
    Profile::new(Arc::clone(grid), values, spec)
}

/// Scales a profile so that M_-alpha = 1, using the exact grid action.
///
/// The factor is a = M_-alpha(phi)^(1/alpha).
pub fn normalize_unit_minus_alpha(p: &Profile) -> Result<Profile> {
    let alpha = p.spec().alpha;
    if alpha == 0.0 {
        return Err(CoagError::AlphaZero { op: "normalize_unit_minus_alpha" });
    }
    let m = p.moments().m_minus_alpha;
    if !(m > 0.0) {
        return Err(CoagError::NonPositiveMoment { order: -alpha, value: m });
    }
    p.scale(m.powf(1.0 / alpha))
}

/// Scales a profile so that M_1 = rho, using the exact grid action.
///
/// The factor is a = (M_1(phi) / rho)^(1/(1+2 alpha)).
pub fn rescale_to_mass(p: &Profile, rho: f64) -> Result<Profile> {
    if !(rho > 0.0) {
        return Err(CoagError::NonPositiveMass { value: rho });
    }
    let m1 = p.moments().m1;
    if !(m1 > 0.0) {
        return Err(CoagError::NonPositiveMass { value: m1 });
    }
    p.scale((m1 / rho).powf(1.0 / (1.0 + 2.0 * p.spec().alpha)))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Node values of a starting guess.
pub fn init_values(kind: &InitKind, grid: &GridHandle, alpha: f64) -> Result<Vec<f64>> {
    let sample = |f: &dyn Fn(f64) -> f64| grid.nodes().iter().map(|&x| f(x)).collect::<Vec<f64>>();
    match kind {
        InitKind::Bump => Ok(sample(&|x| (-x - 1.0 / x).exp())),
        InitKind::Exponential => {
            if alpha >= 1.0 {
                return Err(CoagError::InadmissibleInit("exponential"));
            }
            Ok(sample(&|x| (-x).exp()))
        }
        InitKind::ExponentialCapped => Ok(sample(&|x| (-x - 0.01 / x).exp())),
        InitKind::ShiftedBump => Ok(sample(&|x| (-0.5 * x - 2.0 / x).exp())),
        InitKind::RandomBump { seed } => {
            let mut state = *seed;
            let a = (unit_interval(splitmix64(&mut state)) - 0.5).exp();
            let b = (unit_interval(splitmix64(&mut state)) - 0.5).exp();
            Ok(sample(&|x| (-a * x - b / x).exp()))
        }
        InitKind::Custom { values } => {
            if values.len() != grid.n_cells() {
                return Err(CoagError::LengthMismatch {
                    expected: grid.n_cells(),
                    got: values.len(),
                });
            }
            Ok(values.clone())
        }
    }
}

struct IterationWeights {
    /// (x^-alpha + x) * w per cell, the convergence metric weight.
    metric: Vec<f64>,
    /// x^-alpha * w per cell, for M_-alpha sums.
    minus_alpha: Vec<f64>,
    /// plain w per cell.
    plain: Vec<f64>,
    /// x * w per cell, for mass sums.
    mass: Vec<f64>,
}

impl IterationWeights {
    fn new(grid: &GridHandle, alpha: f64) -> Self {
        let metric = grid
            .nodes()
            .iter()
            .zip(grid.weights().iter())
            .map(|(&x, &w)| (x.powf(-alpha) + x) * w)
            .collect();
        let minus_alpha = grid
            .nodes()
            .iter()
            .zip(grid.weights().iter())
            .map(|(&x, &w)| x.powf(-alpha) * w)
            .collect();
        let mass = grid
            .nodes()
            .iter()
            .zip(grid.weights().iter())
            .map(|(&x, &w)| x * w)
            .collect();
        Self { metric, minus_alpha, plain: grid.weights().to_vec(), mass }
    }

    fn m_minus_alpha(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.minus_alpha.iter()).map(|(a, b)| a * b).sum()
    }

    fn m0(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.plain.iter()).map(|(a, b)| a * b).sum()
    }

    fn m1(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.mass.iter()).map(|(a, b)| a * b).sum()
    }

    fn gap(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.metric.iter())
            .map(|((x, y), w)| (x - y).abs() * w)
            .sum()
    }
}

/// One application of the normalized map: damping-mixed flux step followed
/// by the anchoring normalization, returned on the reference grid.
fn normalized_map(
    spec: KernelSpec,
    grid: &GridHandle,
    weights: &IterationWeights,
    damping: f64,
    values: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let alpha = spec.alpha;
    let n = grid.n_cells();
    let p = Profile::new(Arc::clone(grid), values.to_vec(), spec)?;
    let t = fixed_point_step(&p)?;

    if alpha == 0.0 {
        // At alpha = 0 the value scale pins M_0 = w (which the moment
        // identity forces) and the grid action pins M_1 = rho; without the
        // second pin the mass direction is neutral and the iteration creeps
        // along it.
        let q: Vec<f64> = t
            .values()
            .iter()
            .zip(values.iter())
            .map(|(tv, pv)| damping * tv + (1.0 - damping) * pv)
            .collect();
        let m0 = weights.m0(&q);
        if !(m0 > 0.0) || !m0.is_finite() {
            return Err(CoagError::CollapseToZero);
        }
        let c = spec.w / m0;
        let a = (c * weights.m1(&q) / spec.rho).clamp(1.0 / MAX_STEP_RESCALE, MAX_STEP_RESCALE);
        let prefactor = a * c;
        let out: Vec<f64> = if (a - 1.0).abs() < 1e-14 {
            q.iter().map(|v| prefactor * v).collect()
        } else {
            (0..n)
                .map(|i| prefactor * grid.interpolate_smooth(&q, a * grid.nodes()[i]))
                .collect()
        };
        let m_new = weights.m0(&out);
        if !(m_new > 1e-100) || !m_new.is_finite() {
            return Err(CoagError::CollapseToZero);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CoagError::NonFinite { context: "solver iterate" });
        }
        return Ok((out, 1.0));
    }

    // Identity-anchored step for alpha > 0: the iterate is value-rescaled so
    // the moment identity w M_0 = M_-alpha^2 holds exactly. On the solution
    // manifold this rescaling is precisely the correction that moves a
    // profile of any speed back to speed w, so the amplitude and speed
    // directions are anchored without ever touching the grid; the remaining
    // freedom along the scaling family drifts slowly to the isolated
    // discrete attractor shared by every initialization.
    let q: Vec<f64> = t
        .values()
        .iter()
        .zip(values.iter())
        .map(|(tv, pv)| damping * tv + (1.0 - damping) * pv)
        .collect();
    let m_q = weights.m_minus_alpha(&q);
    let m0_q = weights.m0(&q);
    if !(m_q > 0.0) || !m_q.is_finite() || !(m0_q > 0.0) || !m0_q.is_finite() {
        return Err(CoagError::CollapseToZero);
    }
    let gamma = spec.w * m0_q / (m_q * m_q);
    let out: Vec<f64> = q.iter().map(|v| gamma * v).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CoagError::NonFinite { context: "solver iterate" });
    }
    Ok((out, gamma))
}

/// One Anderson extrapolation from the stored (iterate, residual) history.
///
/// Solves the small weighted least-squares over residual differences and
/// combines the corresponding iterate differences; returns None when the
/// system is too ill-conditioned to trust.
fn anderson_step(
    history: &[(Vec<f64>, Vec<f64>)],
    p_k: &[f64],
    r_k: &[f64],
    f_k: &[f64],
    weights: &IterationWeights,
) -> Option<Vec<f64>> {
    let m = history.len();
    let n = p_k.len();
    let w = &weights.plain;
    // Difference columns ending at the current iterate.
    let mut dp: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut dr: Vec<Vec<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        let (p_next, r_next) = if j + 1 < m {
            (&history[j + 1].0, &history[j + 1].1)
        } else {
            (&p_k.to_vec(), &r_k.to_vec())
        };
        dp.push(p_next.iter().zip(history[j].0.iter()).map(|(a, b)| a - b).collect());
        dr.push(r_next.iter().zip(history[j].1.iter()).map(|(a, b)| a - b).collect());
    }
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b.iter()).zip(w.iter()).map(|((x, y), ww)| x * y * ww).sum()
    };
    let mut gram = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            gram[i][j] = dot(&dr[i], &dr[j]);
        }
        rhs[i] = dot(&dr[i], r_k);
    }
    let max_diag = gram.iter().enumerate().map(|(i, row)| row[i]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    for i in 0..m {
        gram[i][i] += 1e-12 * max_diag;
    }
    let theta = solve_dense(gram, rhs)?;
    let mut next = f_k.to_vec();
    for j in 0..m {
        let t = theta[j];
        if t != 0.0 {
            for i in 0..n {
                next[i] -= t * (dp[j][i] + dr[j][i]);
            }
        }
    }
    Some(next)
}

/// Exact scaling transform to M_-alpha = 1, resampled onto the reference
/// grid. The moment identity is scaling-invariant, so the next step's value
/// anchor restores it from the small resampling drift.
fn pin_family_coordinate(
    spec: KernelSpec,
    grid: &GridHandle,
    weights: &IterationWeights,
    values: &[f64],
) -> Result<Vec<f64>> {
    let alpha = spec.alpha;
    let m = weights.m_minus_alpha(values);
    if !(m > 0.0) || !m.is_finite() {
        return Err(CoagError::CollapseToZero);
    }
    let a = m.powf(1.0 / alpha).clamp(1.0 / MAX_STEP_RESCALE, MAX_STEP_RESCALE);
    let prefactor = a.powf(1.0 - 2.0 * alpha);
    let n = grid.n_cells();
    let out: Vec<f64> = if (a - 1.0).abs() < 1e-14 {
        values.to_vec()
    } else {
        (0..n)
            .map(|i| prefactor * grid.interpolate_smooth(values, a * grid.nodes()[i]))
            .collect()
    };
    let m_new = weights.m_minus_alpha(&out);
    if !(m_new > 1e-100) || !m_new.is_finite() {
        return Err(CoagError::CollapseToZero);
    }
    Ok(out)
}

/// Gaussian elimination with partial pivoting for the small Anderson system.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[piv][col].abs() {
                piv = row;
            }
        }
        if !(a[piv][col].abs() > 1e-300) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / d;
            if f != 0.0 {
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for c in row + 1..n {
            s -= a[row][c] * x[c];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Computes a scaling profile for the given kernel triple on the given grid.
///
/// Starting from the configured initialization the solver repeats
/// normalize(damping * T[p] + (1 - damping) * p) until both the weighted L1
/// fixed-point residual and the speed offset |lambda - 1| stay below `tol`
/// over a short window, or the iteration cap is hit; hitting the cap is
/// reported, not an error. For alpha > 0 the per-iteration normalization
/// freezes M_-alpha by pure value scaling; every few dozen iterations the
/// accumulated speed offset is removed by one exact transform resampled onto
/// the reference grid, so the offset decays geometrically without feeding
/// grid moves back through every step. The returned profile carries the
/// requested final normalization.
pub fn solve(spec: KernelSpec, cfg: &SolverConfig, grid: &GridHandle) -> Result<(Profile, SolveReport)> {
    if !(cfg.tol > 0.0) || !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(CoagError::InvalidConfig(format!(
            "tol={}, damping={}",
            cfg.tol, cfg.damping
        )));
    }
    let alpha = spec.alpha;
    let weights = IterationWeights::new(grid, alpha);

    let mut values = init_values(&cfg.init, grid, alpha)?;
    normalize_in_place(&mut values, alpha, spec.w, &weights)?;
    if alpha > 0.0 {
        // Start every branch from the same family position.
        values = pin_family_coordinate(spec, grid, &weights, &values)?;
    }

    let depth = if alpha == 0.0 { 0 } else { cfg.anderson_depth };
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    let mut damping = cfg.damping;
    let mut oscillation_fallback = false;
    let mut negative_dots = 0usize;
    let mut prev_diff: Option<Vec<f64>> = None;
    let mut gaps = Vec::new();
    let mut sub_tol_streak = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut last_endpoint: Option<Vec<f64>> = None;
    // Band within which the scaling-family coordinate counts as pinned; the
    // leftover offsets every branch carries perturb distances far below any
    // comparison threshold.
    let family_band = (100.0 * cfg.tol).max(1e-9);

    while iterations < cfg.max_iter {
        iterations += 1;
        let (mapped, _gamma) = normalized_map(spec, grid, &weights, damping, &values)?;
        let residual: Vec<f64> = mapped.iter().zip(values.iter()).map(|(f, p)| f - p).collect();
        let gap = weights.gap(&mapped, &values);
        let grew = gaps.last().map_or(false, |prev| gap > ANDERSON_GROWTH_LIMIT * prev);
        gaps.push(gap);
        if gap <= cfg.tol {
            sub_tol_streak += 1;
            if sub_tol_streak >= CONVERGENCE_WINDOW {
                // Relaxed endpoint. For alpha > 0 the scaling-family
                // coordinate is still free; pin it with one exact transform
                // and relax again until successive endpoints recur.
                let family_offset =
                    if alpha == 0.0 { 0.0 } else { (weights.m_minus_alpha(&mapped) - 1.0).abs() };
                if family_offset <= family_band {
                    values = mapped;
                    converged = true;
                    break;
                }
                if let Some(prev) = &last_endpoint {
                    if weights.gap(&mapped, prev) <= ENDPOINT_RECURRENCE_FACTOR * cfg.tol {
                        values = mapped;
                        converged = true;
                        break;
                    }
                }
                if std::env::var_os("COAGSCALE_TRACE").is_some() {
                    eprintln!("pin at iter {iterations}: offset {family_offset:.3e}");
                }
                last_endpoint = Some(mapped.clone());
                values = pin_family_coordinate(spec, grid, &weights, &mapped)?;
                history.clear();
                prev_diff = None;
                sub_tol_streak = 0;
                continue;
            }
        } else {
            sub_tol_streak = 0;
        }
        if grew {
            history.clear();
        }

        let accelerate = depth >= 1 && gap <= ANDERSON_ENGAGE_GAP && !history.is_empty() && !grew;
        let mut next = if accelerate {
            anderson_step(&history, &values, &residual, &mapped, &weights)
        } else {
            None
        };
        if next.is_none() {
            next = Some(mapped.clone());
        }
        let mut next = next.unwrap();
        // The accelerated combination may dip microscopically negative.
        for v in next.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            history.clear();
            next = mapped.clone();
        }

        if depth >= 1 && gap <= ANDERSON_ENGAGE_GAP {
            history.push((values.clone(), residual));
            if history.len() > depth + 1 {
                history.remove(0);
            }
        }
        // Stale differences eventually poison the least squares.
        if depth >= 1 && iterations % ANDERSON_RESTART == 0 {
            history.clear();
        }

        let diff: Vec<f64> = next.iter().zip(values.iter()).map(|(a, b)| a - b).collect();
        if depth == 0 {
            // The plain iteration falls back to heavier damping when the
            // updates keep alternating sign; the accelerated one handles
            // oscillatory modes natively.
            if let Some(pd) = &prev_diff {
                let dot: f64 = diff
                    .iter()
                    .zip(pd.iter())
                    .zip(weights.plain.iter())
                    .map(|((a, b), w)| a * b * w)
                    .sum();
                if dot < 0.0 {
                    negative_dots += 1;
                    if negative_dots >= OSCILLATION_PATIENCE && !oscillation_fallback && damping > 0.5
                    {
                        damping = 0.5;
                        oscillation_fallback = true;
                    }
                } else {
                    negative_dots = 0;
                }
            }
        }
        prev_diff = Some(diff);
        values = next;
    }

    let solution = Profile::new(Arc::clone(grid), values, spec)?;
    let (final_profile, normalization_used) = match (cfg.normalization, alpha) {
        (Normalization::PrescribedMass, _) => {
            (rescale_to_mass(&solution, spec.rho)?, "prescribed-mass")
        }
        (Normalization::UnitMinusAlphaMoment, a) if a == 0.0 => (solution, "m0-equals-w"),
        (Normalization::UnitMinusAlphaMoment, _) => {
            // All initializations converge to the same iterate, so this
            // exact transform moves every branch onto the same grid.
            (normalize_unit_minus_alpha(&solution)?, "unit-minus-alpha-moment")
        }
    };

    let report = build_report(
        &final_profile,
        iterations,
        gaps,
        converged,
        normalization_used,
        damping,
        oscillation_fallback,
    )?;
    Ok((final_profile, report))
}

fn normalize_in_place(
    values: &mut [f64],
    alpha: f64,
    w: f64,
    weights: &IterationWeights,
) -> Result<()> {
    let c = if alpha == 0.0 {
        let m0 = weights.m0(values);
        if !(m0 > 0.0) || !m0.is_finite() {
            return Err(CoagError::CollapseToZero);
        }
        w / m0
    } else {
        let m = weights.m_minus_alpha(values);
        let m0 = weights.m0(values);
        if !(m > 0.0) || !m.is_finite() || !(m0 > 0.0) {
            return Err(CoagError::CollapseToZero);
        }
        w * m0 / (m * m)
    };
    for v in values.iter_mut() {
        *v *= c;
    }
    Ok(())
}

fn build_report(
    p: &Profile,
    iterations: usize,
    gaps: Vec<f64>,
    converged: bool,
    normalization: &str,
    damping_used: f64,
    oscillation_fallback: bool,
) -> Result<SolveReport> {
    let mut residual_norms = BTreeMap::new();
    for eq in EquationId::ALL {
        residual_norms.insert(eq.as_str().to_string(), p.residual_norm(eq));
    }
    let b99 = if p.spec().alpha > 0.0 { Some(p.b99_gap()?) } else { None };
    let final_gap = gaps.last().copied().unwrap_or(0.0);
    Ok(SolveReport {
        iterations,
        final_gap,
        converged,
        residual_norms,
        moments: p.moments(),
        moment_identity_gap: p.moment_identity_gap(),
        b99_gap: b99,
        normalization: normalization.to_string(),
        damping_used,
        oscillation_fallback,
        successive_gaps: gaps,
        tail: tail_report(p),
    })
}

/// Mass localization diagnostics, exposed so under-resolution is visible.
pub fn tail_report(p: &Profile) -> TailReport {
    let grid = p.grid();
    let limit = 10.0 * grid.x_min();
    let mut first = 0.0;
    let mut total = 0.0;
    for i in 0..grid.n_cells() {
        let m = grid.nodes()[i] * p.values()[i] * grid.weights()[i];
        total += m;
        if grid.nodes()[i] <= limit {
            first += m;
        }
    }
    TailReport {
        first_decade_mass_fraction: if total > 0.0 { first / total } else { 0.0 },
        value_at_x_min: p.values()[0],
        value_at_x_max: p.values()[grid.n_cells() - 1],
    }
}

/// Per-branch outcome of the uniqueness experiment.
#[derive(Debug, Clone, Serialize)]
pub struct BranchReport {
    pub init: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_gap: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum UniquenessVerdict {
    /// All branches converged and all pairwise distances sit below threshold.
    Unique,
    /// All branches converged but some distance exceeds the threshold.
    NotUnique,
    /// At least one branch failed or did not converge; no witness either way.
    SolverFailure,
}

/// Result of solving from several initializations and comparing.
#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub branches: Vec<BranchReport>,
    /// Pairwise plain L1 distances; None where a branch produced no profile.
    pub distances: Vec<Vec<Option<f64>>>,
    pub max_off_diagonal: Option<f64>,
    pub threshold: f64,
    pub verdict: UniquenessVerdict,
}

/// Runs `jobs` on at most `cap` worker threads, preserving index order.
pub(crate) fn run_capped<T, F>(jobs: Vec<F>, cap: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let n = jobs.len();
    let workers = cap.max(1).min(n.max(1));
    if workers <= 1 || n <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let jobs: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let job = jobs[i].lock().unwrap().take().unwrap();
                *results[i].lock().unwrap() = Some(job());
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

/// Solves from each initialization, checks the common normalization
/// M_-alpha = 1 and returns the pairwise L1 distance matrix.
///
/// Branches run concurrently (capped by `max_threads`) with no shared state;
/// distances are exact weighted sums because every branch lives on the same
/// reference grid. A branch that fails or does not converge is reported as a
/// solver failure, which is distinct from a non-uniqueness verdict.
pub fn uniqueness_experiment(
    spec: KernelSpec,
    cfg: &SolverConfig,
    grid: &GridHandle,
    inits: &[InitKind],
    threshold: f64,
    max_threads: usize,
) -> Result<UniquenessReport> {
    if spec.alpha == 0.0 {
        return Err(CoagError::AlphaZero { op: "uniqueness_experiment" });
    }
    if inits.len() < 2 {
        return Err(CoagError::InvalidConfig("need at least two initializations".into()));
    }
    let mut branch_cfg = cfg.clone();
    branch_cfg.normalization = Normalization::UnitMinusAlphaMoment;

    let jobs: Vec<_> = inits
        .iter()
        .map(|init| {
            let mut c = branch_cfg.clone();
            c.init = init.clone();
            let grid = Arc::clone(grid);
            move || solve(spec, &c, &grid)
        })
        .collect();
    let outcomes = run_capped(jobs, max_threads);

    let mut branches = Vec::new();
    let mut profiles: Vec<Option<Profile>> = Vec::new();
    for (init, outcome) in inits.iter().zip(outcomes.into_iter()) {
        match outcome {
            Ok((profile, report)) => {
                branches.push(BranchReport {
                    init: init.label(),
                    converged: report.converged,
                    iterations: report.iterations,
                    final_gap: report.final_gap,
                    error: None,
                });
                profiles.push(Some(profile));
            }
            Err(e) => {
                branches.push(BranchReport {
                    init: init.label(),
                    converged: false,
                    iterations: 0,
                    final_gap: f64::NAN,
                    error: Some(format!("{} ({})", e, e.code())),
                });
                profiles.push(None);
            }
        }
    }

    let n = inits.len();
    let mut distances = vec![vec![None; n]; n];
    let mut max_off = None;
    for i in 0..n {
        for j in 0..n {
            if let (Some(a), Some(b)) = (&profiles[i], &profiles[j]) {
                let d = plain_l1_distance(a, b)?;
                distances[i][j] = Some(d);
                if i != j {
                    max_off = Some(max_off.map_or(d, |m: f64| m.max(d)));
                }
            }
        }
    }

    let all_ok = branches.iter().all(|b| b.converged && b.error.is_none());
    let verdict = if !all_ok {
        UniquenessVerdict::SolverFailure
    } else if max_off.map_or(false, |m| m <= threshold) {
        UniquenessVerdict::Unique
    } else {
        UniquenessVerdict::NotUnique
    };
    Ok(UniquenessReport { branches, distances, max_off_diagonal: max_off, threshold, verdict })
}

/// Plain L1 distance of two profiles on the same grid.
///
/// Solver results may sit on grids offset by a relative sliver (the exact
/// final normalizations of independently converged iterates differ at the
/// tolerance scale); such offsets perturb the distance by far less than any
/// threshold of interest, so a loose compatibility check suffices.
pub fn plain_l1_distance(a: &Profile, b: &Profile) -> Result<f64> {
    let ga = a.grid();
    let gb = b.grid();
    if ga.n_cells() != gb.n_cells()
        || (ga.x_min() - gb.x_min()).abs() > 1e-7 * ga.x_min()
        || (ga.x_max() - gb.x_max()).abs() > 1e-7 * ga.x_max()
    {
        return Err(CoagError::InvalidConfig("profiles live on different grids".into()));
    }
    let mut acc = 0.0;
    for i in 0..ga.n_cells() {
        acc += (a.values()[i] - b.values()[i]).abs() * ga.weights()[i];
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::explicit_profile;
    use crate::grid::SizeGrid;

    fn grid(x_min: f64, x_max: f64, n: usize) -> GridHandle {
        Arc::new(SizeGrid::geometric(x_min, x_max, n).unwrap())
    }

    fn spec(alpha: f64, w: f64, rho: f64) -> KernelSpec {
        KernelSpec::new(alpha, w, rho).unwrap()
    }

    #[test]
    fn flux_map_fixes_the_exponential_at_alpha_zero() {
        // Hand-derived identity, cross-checked numerically in baseline tests:
        // integral over (0,x) of y e^-y e^-(x-y) dy = x^2 e^-x / 2, so
        // T[e^-x] = e^-x at alpha = 0, w = 1.
        let g = grid(1e-6, 1e3, 600);
        let p = explicit_profile(1.0, 1.0, &g).unwrap();
        let t = fixed_point_step(&p).unwrap();
        let sup = t
            .values()
            .iter()
            .zip(p.values().iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(sup < 2e-3, "sup {sup}");
    }

    #[test]
    fn flux_map_sends_zero_to_zero() {
        let g = grid(1e-4, 10.0, 64);
        let p = Profile::new(g.clone(), vec![0.0; 64], spec(0.5, 1.0, 1.0)).unwrap();
        let t = fixed_point_step(&p).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flux_map_commutes_with_the_scaling_action() {
        let g = grid(1e-5, 1e2, 500);
        let p = Profile::from_fn(g.clone(), spec(0.5, 1.0, 1.0), |x| (-x - 1.0 / x).exp()).unwrap();
        let a = 2.0;
        let left = fixed_point_step(&p.scale(a).unwrap()).unwrap();
        let right = fixed_point_step(&p).unwrap().scale(a).unwrap();
        // Same grids by construction; compare values where the profile is not
        // vanishingly small.
        let peak = right.values().iter().fold(0.0f64, |m, &v| m.max(v));
        for i in 0..g.n_cells() {
            let want = right.values()[i];
            if want > 1e-6 * peak {
                let got = left.values()[i];
                assert!(
                    (got - want).abs() <= 5e-3 * want,
                    "i={i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn flux_map_preserves_positivity_on_rough_data() {
        let g = grid(1e-4, 50.0, 120);
        let mut state = 42u64;
        let values: Vec<f64> =
            (0..120).map(|_| unit_interval(splitmix64(&mut state))).collect();
        let p = Profile::new(g.clone(), values, spec(0.5, 1.0, 1.0)).unwrap();
        let t = fixed_point_step(&p).unwrap();
        assert!(t.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn unit_normalization_examples() {
        let g = grid(1e-4, 1e2, 400);
        let p = Profile::from_fn(g.clone(), spec(0.5, 1.0, 1.0), |x| (-x - 1.0 / x).exp()).unwrap();
        let n1 = normalize_unit_minus_alpha(&p).unwrap();
        assert!((n1.moments().m_minus_alpha - 1.0).abs() < 1e-12);
        // Idempotence
        let n2 = normalize_unit_minus_alpha(&n1).unwrap();
        assert!((n2.moments().m_minus_alpha - 1.0).abs() < 1e-12);
        for i in 0..g.n_cells() {
            let (a, b) = (n1.values()[i], n2.values()[i]);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn unit_normalization_scale_factor_matches_hand_value() {
        // M_-alpha = 16 at alpha = 1/2 needs a = 16^(1/alpha) = 256.
        let g = grid(1e-4, 1e2, 400);
        let p = Profile::from_fn(g.clone(), spec(0.5, 1.0, 1.0), |x| (-x - 1.0 / x).exp()).unwrap();
        // Make M_-alpha exactly 16 by value scaling.
        let c = 16.0 / p.moments().m_minus_alpha;
        let q = Profile::new(
            g.clone(),
            p.values().iter().map(|v| c * v).collect(),
            p.spec(),
        )
        .unwrap();
        assert!((q.moments().m_minus_alpha - 16.0).abs() < 1e-10);
        let normalized = normalize_unit_minus_alpha(&q).unwrap();
        assert!((normalized.moments().m_minus_alpha - 1.0).abs() < 1e-12);
        // a = 16^(1/0.5) = 256 shrinks every node by 256.
        assert!((q.grid().nodes()[0] / normalized.grid().nodes()[0] - 256.0).abs() < 1e-9);
    }

    #[test]
    fn unit_normalization_rejects_alpha_zero_and_zero_profile() {
        let g = grid(1e-3, 10.0, 32);
        let p0 = explicit_profile(1.0, 1.0, &g).unwrap();
        assert!(matches!(
            normalize_unit_minus_alpha(&p0),
            Err(CoagError::AlphaZero { .. })
        ));
        let z = Profile::new(g.clone(), vec![0.0; 32], spec(0.5, 1.0, 1.0)).unwrap();
        assert!(matches!(
            normalize_unit_minus_alpha(&z),
            Err(CoagError::NonPositiveMoment { .. })
        ));
    }

    #[test]
    fn mass_rescale_examples() {
        let g = grid(1e-4, 1e2, 400);
        let p = Profile::from_fn(g.clone(), spec(0.5, 1.0, 1.0), |x| (-x - 1.0 / x).exp()).unwrap();
        let r = rescale_to_mass(&p, 1.0).unwrap();
        assert!((r.moments().m1 - 1.0).abs() < 1e-12);
        // M_1 = 8 down to 1 at alpha = 1/2 is the factor a = 8^(1/2).
        let c = 8.0 / p.moments().m1;
        let q = Profile::new(g.clone(), p.values().iter().map(|v| c * v).collect(), p.spec()).unwrap();
        let r = rescale_to_mass(&q, 1.0).unwrap();
        assert!((r.moments().m1 - 1.0).abs() < 1e-12);
        let a = q.grid().nodes()[0] / r.grid().nodes()[0];
        assert!((a - 8f64.sqrt()).abs() < 1e-9);
        assert!(rescale_to_mass(&p, -1.0).is_err());
    }

    #[test]
    fn solve_alpha_zero_recovers_the_explicit_profile() {
        let g = grid(1e-6, 1e3, 600);
        let cfg = SolverConfig { tol: 1e-9, ..SolverConfig::default() };
        let (p, report) = solve(spec(0.0, 1.0, 1.0), &cfg, &g).unwrap();
        assert!(report.converged, "{report:?}");
        // L1(x dx) distance to the analytic profile on the solution grid.
        let mut dist = 0.0;
        for i in 0..p.grid().n_cells() {
            let x = p.grid().nodes()[i];
            dist += x * (p.values()[i] - (-x).exp()).abs() * p.grid().weights()[i];
        }
        assert!(dist < 1e-3, "distance {dist}");
        assert!((p.moments().m1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solve_alpha_zero_gaps_shrink_monotonically_after_burn_in() {
        let g = grid(1e-6, 1e3, 300);
        let cfg = SolverConfig { tol: 1e-10, ..SolverConfig::default() };
        let (_, report) = solve(spec(0.0, 1.0, 1.0), &cfg, &g).unwrap();
        let gaps = &report.successive_gaps;
        assert!(gaps.len() > 60);
        // The iteration first fills in the left tail of the exponential,
        // which the bump start lacks entirely; that transient ends in one
        // final excursion of the gap above 1e-3. After it the contraction
        // toward the explicit solution is monotone on short windows all the
        // way down to the tolerance floor.
        let burn_in = gaps
            .iter()
            .rposition(|&g| g >= 1e-3)
            .expect("transient excursion present")
            + 5;
        assert!(gaps.len() - burn_in > 30, "post-transient stretch too short");
        for k in burn_in..gaps.len().saturating_sub(10) {
            if gaps[k] < 100.0 * cfg.tol {
                break;
            }
            assert!(
                gaps[k + 10] <= gaps[k],
                "no decay over [{k}, {}]: {} -> {}",
                k + 10,
                gaps[k],
                gaps[k + 10]
            );
        }
    }

    #[test]
    fn solve_hits_iteration_cap_without_error() {
        let g = grid(1e-5, 1e2, 120);
        let cfg = SolverConfig { tol: 1e-16, max_iter: 1, ..SolverConfig::default() };
        let (_, report) = solve(spec(0.5, 1.0, 1.0), &cfg, &g).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn solve_alpha_half_satisfies_the_moment_identity() {
        let g = grid(1e-5, 1e2, 900);
        let cfg = SolverConfig { tol: 1e-9, ..SolverConfig::default() };
        let (p, report) = solve(spec(0.5, 1.0, 1.0), &cfg, &g).unwrap();
        assert!(report.converged);
        let m = p.moments();
        let rel = (1.0 * m.m0 - m.m_minus_alpha.powi(2)).abs() / m.m_minus_alpha.powi(2);
        assert!(rel < 1e-3, "relative moment gap {rel}");
    }

    #[test]
    fn solve_rejects_exponential_init_for_alpha_ge_one() {
        let g = grid(1e-4, 1e2, 100);
        let cfg = SolverConfig { init: InitKind::Exponential, ..SolverConfig::default() };
        assert!(matches!(
            solve(spec(1.0, 1.0, 1.0), &cfg, &g),
            Err(CoagError::InadmissibleInit(_))
        ));
    }

    #[test]
    fn solve_reports_collapse_for_zero_init() {
        let g = grid(1e-4, 1e2, 64);
        let cfg = SolverConfig {
            init: InitKind::Custom { values: vec![0.0; 64] },
            ..SolverConfig::default()
        };
        assert!(matches!(
            solve(spec(0.5, 1.0, 1.0), &cfg, &g),
            Err(CoagError::CollapseToZero)
        ));
    }

    #[test]
    fn prescribed_masses_are_related_by_the_exact_action() {
        let g = grid(1e-5, 1e2, 400);
        let cfg = SolverConfig { tol: 1e-10, ..SolverConfig::default() };
        let (p1, _) = solve(spec(0.5, 1.0, 1.0), &cfg, &g).unwrap();
        let (p2, _) = solve(spec(0.5, 1.0, 3.0), &cfg, &g).unwrap();
        // Same normalized iterate, so the two results differ by the exact
        // scaling with a = (rho' / rho)^(-1/(1+2 alpha)).
        let a = (3.0f64 / 1.0).powf(-1.0 / 2.0);
        let mapped = p1.scale(a).unwrap();
        assert!((mapped.moments().m1 - 3.0).abs() < 1e-10);
        for i in 0..g.n_cells() {
            let want = p2.values()[i];
            let got = mapped.values()[i];
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-12), "i={i}");
        }
    }

    #[test]
    fn uniqueness_experiment_identical_inits_give_zero_distance() {
        let g = grid(1e-5, 1e2, 200);
        let cfg = SolverConfig { tol: 1e-9, ..SolverConfig::default() };
        let report = uniqueness_experiment(
            spec(0.5, 1.0, 1.0),
            &cfg,
            &g,
            &[InitKind::Bump, InitKind::Bump],
            1e-6,
            2,
        )
        .unwrap();
        assert_eq!(report.verdict, UniquenessVerdict::Unique);
        assert_eq!(report.distances[0][1], Some(0.0));
    }

    #[test]
    fn uniqueness_experiment_isolates_a_collapsing_branch() {
        let g = grid(1e-5, 1e2, 128);
        let cfg = SolverConfig { tol: 1e-8, ..SolverConfig::default() };
        let report = uniqueness_experiment(
            spec(0.5, 1.0, 1.0),
            &cfg,
            &g,
            &[
                InitKind::Bump,
                InitKind::Custom { values: vec![0.0; 128] },
                InitKind::ShiftedBump,
            ],
            1e-6,
            3,
        )
        .unwrap();
        assert_eq!(report.verdict, UniquenessVerdict::SolverFailure);
        assert!(report.branches[1].error.as_deref().unwrap_or("").contains("collapse"));
        assert!(report.branches[0].error.is_none());
        assert!(report.branches[2].error.is_none());
        assert!(report.distances[0][2].is_some());
        assert!(report.distances[0][1].is_none());
    }

    #[test]
    fn uniqueness_experiment_rejects_alpha_zero() {
        let g = grid(1e-5, 1e2, 64);
        let cfg = SolverConfig::default();
        assert!(matches!(
            uniqueness_experiment(
                spec(0.0, 1.0, 1.0),
                &cfg,
                &g,
                &[InitKind::Bump, InitKind::ShiftedBump],
                1e-6,
                1
            ),
            Err(CoagError::AlphaZero { .. })
        ));
    }

    #[test]
    fn capped_runner_preserves_order() {
        let jobs: Vec<_> = (0..17).map(|i| move || i * i).collect();
        let out = run_capped(jobs, 4);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }
}

//! Time-dependent coagulation with a mass-conserving flux-form scheme.
//!
//! The equation is advanced in the conservation form d/dt (x f) = -dJ/dx,
//! where J is the coagulation mass flux through size x,
//!
//!   J(x) = 2 * integral over (0, x) of u^(1-alpha) f(u) H_f(x-u) du,
//!   H_f(z) = integral over (z, infinity) of v^(-alpha) f(v) dv.
//!
//! J is evaluated at the cell edges and differenced across each cell, so the
//! discrete mass sum(x_i f_i w_i) changes only through the boundary fluxes
//! J(x_min) and J(x_max): interior transfers cancel by telescoping. The flux
//! routine is the same one the profile solver iterates on, which is what the
//! flux balance identity for scaling profiles suggests.
//!
//! Time stepping is explicit Euler with dt chosen from the largest per-cell
//! loss rate. Because H_f is non-increasing, each cell update has the shape
//! f (1 - dt lambda) + dt gain with gain >= 0, so the dt bound keeps f
//! non-negative.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::grid::GridHandle;
use crate::kernel::KernelSpec;
use crate::profile::{mass_flux_at, tail_cumulative, Profile, TransformPair};
use crate::solver::rescale_to_mass;

/// Smallest admissible fraction dt/t before the stepper reports stagnation.
const STAGNATION_FRACTION: f64 = 1e-14;

/// Time-dependent size distribution on a grid.
#[derive(Debug, Clone)]
pub struct SimState {
    pub grid: GridHandle,
    pub f_values: Vec<f64>,
    pub t: f64,
}

impl SimState {
    pub fn new(grid: GridHandle, f_values: Vec<f64>, t: f64) -> Result<Self> {
        if f_values.len() != grid.n_cells() {
            return Err(CoagError::LengthMismatch { expected: grid.n_cells(), got: f_values.len() });
        }
        for (i, &v) in f_values.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoagError::NegativeValue { index: i, value: v });
            }
        }
        if !(t >= 0.0) {
            return Err(CoagError::InvalidSimConfig(format!("negative time {t}")));
        }
        Ok(Self { grid, f_values, t })
    }

    pub fn from_fn(grid: GridHandle, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.nodes().iter().map(|&x| f(x)).collect();
        SimState::new(grid, values, 0.0)
    }
}

/// Simulation controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub spec: KernelSpec,
    pub t_end: f64,
    /// Fraction of the positivity-limited step actually taken, in (0, 1].
    pub cfl_safety: f64,
    /// Times at which mass/distance rows and snapshots are recorded.
    pub output_times: Vec<f64>,
    /// Step cap, also the step taken when the distribution is empty.
    pub dt_cap: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0) {
            return Err(CoagError::InvalidSimConfig(format!("t_end={}", self.t_end)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(CoagError::InvalidSimConfig(format!("cfl_safety={}", self.cfl_safety)));
        }
        if !(self.dt_cap > 0.0) {
            return Err(CoagError::InvalidSimConfig(format!("dt_cap={}", self.dt_cap)));
        }
        let mut prev = 0.0;
        for &t in &self.output_times {
            if t < prev || t > self.t_end {
                return Err(CoagError::InvalidSimConfig(
                    "output_times must be sorted and within [0, t_end]".into(),
                ));
            }
            prev = t;
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            spec: KernelSpec { alpha: 0.0, w: 1.0, rho: 1.0 },
            t_end: 100.0,
            cfl_safety: 0.5,
            output_times: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            dt_cap: 1.0,
        }
    }
}

fn tail_pair(state: &SimState, alpha: f64) -> (Vec<f64>, f64) {
    let h: Vec<f64> = state
        .grid
        .nodes()
        .iter()
        .zip(state.f_values.iter())
        .map(|(&x, &v)| v * x.powf(-alpha))
        .collect();
    tail_cumulative(&state.grid, &h)
}

/// Mass flux J at every cell edge.
pub fn edge_fluxes(state: &SimState, spec: &KernelSpec) -> Result<Vec<f64>> {
    let (tail_values, tail_at_min) = tail_pair(state, spec.alpha);
    let pair =
        TransformPair::from_raw(Arc::clone(&state.grid), Vec::new(), tail_values, tail_at_min);
    let tail = pair.tail_fn();
    let fluxes = mass_flux_at(
        &state.grid,
        &state.f_values,
        spec.alpha,
        &tail,
        state.grid.edges(),
        true,
    );
    if fluxes.iter().any(|v| !v.is_finite()) {
        return Err(CoagError::NonFinite { context: "edge_fluxes" });
    }
    Ok(fluxes)
}

/// Time derivative of f at the nodes in flux-difference form.
///
/// The discrete mass derivative telescopes to J(x_min) - J(x_max) exactly.
pub fn coagulation_rhs(state: &SimState, spec: &KernelSpec) -> Result<Vec<f64>> {
    let fluxes = edge_fluxes(state, spec)?;
    let grid = &state.grid;
    Ok((0..grid.n_cells())
        .map(|i| (fluxes[i] - fluxes[i + 1]) / (grid.nodes()[i] * grid.weights()[i]))
        .collect())
}

/// Total mass M_1 of the distribution.
pub fn total_mass(state: &SimState) -> f64 {
    let grid = &state.grid;
    let mut acc = 0.0;
    for i in 0..grid.n_cells() {
        acc += grid.nodes()[i] * state.f_values[i] * grid.weights()[i];
    }
    acc
}

/// Largest per-cell loss rate, integral of K(x_i, y) f(y) dy over y.
fn max_loss_rate(state: &SimState, spec: &KernelSpec) -> f64 {
    let grid = &state.grid;
    let mut m_minus_alpha = 0.0;
    for i in 0..grid.n_cells() {
        m_minus_alpha += grid.nodes()[i].powf(-spec.alpha) * state.f_values[i] * grid.weights()[i];
    }
    grid.nodes()
        .iter()
        .map(|&x| 2.0 * x.powf(-spec.alpha) * m_minus_alpha)
        .fold(0.0, f64::max)
}

/// One explicit Euler step with positivity-limited adaptive dt.
pub fn step(state: &SimState, spec: &KernelSpec, cfl_safety: f64, dt_cap: f64) -> Result<SimState> {
    step_clamped(state, spec, cfl_safety, dt_cap, f64::INFINITY)
}

/// Euler step that additionally never walks past `t_limit`.
pub fn step_clamped(
    state: &SimState,
    spec: &KernelSpec,
    cfl_safety: f64,
    dt_cap: f64,
    t_limit: f64,
) -> Result<SimState> {
    let loss = max_loss_rate(state, spec);
    let mut dt = if loss > 0.0 { cfl_safety / loss } else { dt_cap };
    dt = dt.min(dt_cap);
    if t_limit.is_finite() {
        dt = dt.min(t_limit - state.t);
    }
    if !(dt > 0.0) || dt < STAGNATION_FRACTION * state.t.max(1.0) {
        return Err(CoagError::Stagnation { t: state.t, dt });
    }
    let rhs = coagulation_rhs(state, spec)?;
    let f_new: Vec<f64> = state
        .f_values
        .iter()
        .zip(rhs.iter())
        .map(|(&f, &r)| {
            let v = f + dt * r;
            // The dt bound keeps the update non-negative up to roundoff;
            // clip the roundoff only.
            if v < 0.0 && v > -1e-13 * f.max(1.0) {
                0.0
            } else {
                v
            }
        })
        .collect();
    SimState::new(Arc::clone(&state.grid), f_new, state.t + dt)
}

/// Undoes the self-similar scaling: g(xi) = sigma(t)^2 f(t, sigma(t) xi).
///
/// The candidate profile is evaluated on the state's own grid by log-linear
/// interpolation; if dynamical scaling holds it approaches the scaling
/// profile as t grows.
pub fn rescale_state(state: &SimState, spec: &KernelSpec) -> Result<Profile> {
    let sigma = spec.mean_size(state.t);
    let s2 = sigma * sigma;
    let values: Vec<f64> = state
        .grid
        .nodes()
        .iter()
        .map(|&xi| s2 * state.grid.interpolate(&state.f_values, sigma * xi))
        .collect();
    Profile::new(Arc::clone(&state.grid), values, *spec)
}

/// One output row of a simulation.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesRow {
    pub t: f64,
    pub mass: f64,
    /// L1(x dx) distance of the rescaled state to the mass-matched reference.
    pub distance: Option<f64>,
}

/// Full result of a run: the recorded rows and a snapshot per output time.
#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<SeriesRow>,
    pub snapshots: Vec<SimState>,
    pub final_state: SimState,
    pub steps_taken: usize,
}

fn distance_to_reference(state: &SimState, spec: &KernelSpec, reference: &Profile) -> Result<f64> {
    let rescaled = rescale_state(state, spec)?;
    let mass = rescaled.moments().m1;
    if !(mass > 0.0) {
        return Ok(f64::NAN);
    }
    let matched = rescale_to_mass(reference, mass)?;
    let grid = &state.grid;
    let rg = matched.grid();
    let mut acc = 0.0;
    for i in 0..grid.n_cells() {
        let x = grid.nodes()[i];
        let ref_value = rg.interpolate(matched.values(), x);
        acc += x * (rescaled.values()[i] - ref_value).abs() * grid.weights()[i];
    }
    Ok(acc)
}

/// Steps the state to t_end, recording mass and profile distance at the
/// configured output times.
pub fn run(initial: SimState, cfg: &SimConfig, reference: Option<&Profile>) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.spec;
    let mut state = initial;
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut steps_taken = 0usize;

    let record = |state: &SimState, rows: &mut Vec<SeriesRow>, snaps: &mut Vec<SimState>| -> Result<()> {
        let distance = match reference {
            Some(r) => Some(distance_to_reference(state, &spec, r)?),
            None => None,
        };
        rows.push(SeriesRow { t: state.t, mass: total_mass(state), distance });
        snaps.push(state.clone());
        Ok(())
    };

    let mut outputs = cfg.output_times.clone();
    if outputs.first().copied() == Some(0.0) {
        record(&state, &mut rows, &mut snapshots)?;
        outputs.remove(0);
    }
    for &t_out in &outputs {
        while state.t < t_out {
            state = step_clamped(&state, &spec, cfg.cfl_safety, cfg.dt_cap, t_out)?;
            steps_taken += 1;
        }
        record(&state, &mut rows, &mut snapshots)?;
    }
    while state.t < cfg.t_end {
        state = step_clamped(&state, &spec, cfg.cfl_safety, cfg.dt_cap, cfg.t_end)?;
        steps_taken += 1;
    }
    Ok(RunOutput { rows, snapshots, final_state: state, steps_taken })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::explicit_profile;
    use crate::grid::SizeGrid;

    fn grid(x_min: f64, x_max: f64, n: usize) -> GridHandle {
        Arc::new(SizeGrid::geometric(x_min, x_max, n).unwrap())
    }

    fn spec(alpha: f64) -> KernelSpec {
        KernelSpec::new(alpha, 1.0, 1.0).unwrap()
    }

    /// Indicator bump on [0.5, 1.5], value-normalized to unit mass.
    fn unit_bump(g: &GridHandle) -> SimState {
        let mut s = SimState::from_fn(Arc::clone(g), |x| {
            if (0.5..=1.5).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let m = total_mass(&s);
        for v in s.f_values.iter_mut() {
            *v /= m;
        }
        s
    }

    #[test]
    fn rhs_of_empty_state_is_zero() {
        let g = grid(1e-3, 1e2, 100);
        let s = SimState::new(Arc::clone(&g), vec![0.0; 100], 0.0).unwrap();
        let rhs = coagulation_rhs(&s, &spec(0.5)).unwrap();
        assert!(rhs.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn single_cell_mass_loses_there_and_gains_at_doubled_size() {
        let g = grid(1e-2, 1e2, 160);
        let j0 = g.cell_of(1.0);
        let mut f = vec![0.0; 160];
        f[j0] = 1.0;
        let s = SimState::new(Arc::clone(&g), f, 0.0).unwrap();
        let rhs = coagulation_rhs(&s, &spec(0.5)).unwrap();
        assert!(rhs[j0] < 0.0, "source cell must lose mass");
        let x0 = g.nodes()[j0];
        for (i, &r) in rhs.iter().enumerate() {
            let x = g.nodes()[i];
            if x < 1.8 * x0 && i != j0 {
                assert!(
                    r.abs() <= 1e-12 * rhs[j0].abs(),
                    "unexpected gain at x={x}: {r}"
                );
            }
        }
        let gain: f64 = rhs
            .iter()
            .enumerate()
            .filter(|(i, _)| g.nodes()[*i] > 1.8 * x0)
            .map(|(_, &r)| r)
            .sum();
        assert!(gain > 0.0, "pair mass must appear near 2 x0");
    }

    #[test]
    fn discrete_mass_derivative_telescopes_to_boundary_fluxes() {
        let g = grid(1e-3, 1e2, 200);
        let s = SimState::from_fn(Arc::clone(&g), |x| (-x - 0.1 / x).exp()).unwrap();
        for alpha in [0.0, 0.5, 1.0] {
            let k = spec(alpha);
            let rhs = coagulation_rhs(&s, &k).unwrap();
            let fluxes = edge_fluxes(&s, &k).unwrap();
            let mut deriv = 0.0;
            for i in 0..g.n_cells() {
                deriv += g.nodes()[i] * rhs[i] * g.weights()[i];
            }
            let want = -(fluxes[g.n_cells()] - fluxes[0]);
            assert!(
                (deriv - want).abs() <= 1e-12 * want.abs().max(1.0),
                "alpha={alpha}: {deriv} vs {want}"
            );
        }
    }

    #[test]
    fn empty_state_steps_by_the_dt_cap() {
        let g = grid(1e-3, 1e2, 64);
        let s = SimState::new(Arc::clone(&g), vec![0.0; 64], 0.0).unwrap();
        let next = step(&s, &spec(0.0), 0.5, 0.25).unwrap();
        assert_eq!(next.t, 0.25);
        assert_eq!(next.f_values, s.f_values);
    }

    #[test]
    fn step_preserves_positivity_and_mass() {
        let g = grid(1e-3, 1e3, 240);
        let s = unit_bump(&g);
        let k = spec(0.0);
        let mut state = s;
        for _ in 0..25 {
            let before = total_mass(&state);
            state = step(&state, &k, 0.5, 1.0).unwrap();
            assert!(state.f_values.iter().all(|&v| v >= 0.0));
            let after = total_mass(&state);
            assert!(
                ((after - before) / before).abs() <= 1e-12,
                "mass drift {} at t={}",
                (after - before) / before,
                state.t
            );
        }
    }

    #[test]
    fn step_positivity_on_random_states() {
        let g = grid(1e-2, 1e2, 80);
        let mut seed = 7u64;
        let mut rng = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for alpha in [0.0, 0.5] {
            for _ in 0..5 {
                let f: Vec<f64> = (0..80).map(|_| rng()).collect();
                let s = SimState::new(Arc::clone(&g), f, 0.0).unwrap();
                let next = step(&s, &spec(alpha), 0.9, 10.0).unwrap();
                assert!(next.f_values.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn total_mass_of_exponential_is_one() {
        let g = grid(1e-6, 1e3, 1200);
        let s = SimState::from_fn(Arc::clone(&g), |x| (-x).exp()).unwrap();
        assert!((total_mass(&s) - 1.0).abs() < 1e-4);
        let z = SimState::new(Arc::clone(&g), vec![0.0; 1200], 0.0).unwrap();
        assert_eq!(total_mass(&z), 0.0);
    }

    #[test]
    fn rescale_at_time_zero_is_identity() {
        let g = grid(1e-3, 1e2, 120);
        let s = SimState::from_fn(Arc::clone(&g), |x| (-x).exp()).unwrap();
        let p = rescale_state(&s, &spec(0.0)).unwrap();
        for i in 1..g.n_cells() - 1 {
            assert!((p.values()[i] - s.f_values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_inverts_exact_self_similar_data() {
        let g = grid(1e-4, 1e3, 800);
        let k = spec(0.0);
        for t in [0.0, 3.0, 24.0] {
            let sigma = k.mean_size(t);
            let mut s = SimState::from_fn(Arc::clone(&g), |x| (-x / sigma).exp() / (sigma * sigma))
                .unwrap();
            s.t = t;
            let p = rescale_state(&s, &k).unwrap();
            for i in 0..g.n_cells() {
                let x = g.nodes()[i];
                if (0.05..=20.0).contains(&x) {
                    let want = (-x).exp();
                    assert!(
                        (p.values()[i] - want).abs() <= 2e-3 * want.max(1e-3),
                        "t={t} x={x}: {} vs {want}",
                        p.values()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn rescale_preserves_mass_up_to_interpolation() {
        let g = grid(1e-4, 1e3, 600);
        let k = spec(0.0);
        let sigma = k.mean_size(5.0);
        let mut s =
            SimState::from_fn(Arc::clone(&g), |x| (-x / sigma).exp() / (sigma * sigma)).unwrap();
        s.t = 5.0;
        let p = rescale_state(&s, &k).unwrap();
        let m_state = total_mass(&s);
        assert!((p.moments().m1 - m_state).abs() < 1e-3 * m_state);
    }

    #[test]
    fn self_similar_initial_data_stays_near_the_profile() {
        let g = grid(1e-4, 2e3, 300);
        let k = spec(0.0);
        let reference = explicit_profile(1.0, 1.0, &g).unwrap();
        let initial = SimState::from_fn(Arc::clone(&g), |x| (-x).exp()).unwrap();
        let cfg = SimConfig {
            spec: k,
            t_end: 5.0,
            cfl_safety: 0.1,
            output_times: vec![1.0, 2.0, 5.0],
            dt_cap: 0.5,
        };
        let out = run(initial, &cfg, Some(&reference)).unwrap();
        for row in &out.rows {
            let d = row.distance.unwrap();
            assert!(d < 0.05, "t={}: distance {d}", row.t);
        }
    }

    #[test]
    fn mean_size_growth_matches_sigma_for_constant_kernel() {
        // M_0(t)^-1 should grow like sigma(t) = 1 + w t; fit the exponent
        // of the growth against sigma on [10, 100].
        let g = grid(1e-3, 5e3, 400);
        let k = spec(0.0);
        let initial = unit_bump(&g);
        let cfg = SimConfig {
            spec: k,
            t_end: 100.0,
            cfl_safety: 0.2,
            output_times: vec![10.0, 20.0, 40.0, 70.0, 100.0],
            dt_cap: 1.0,
        };
        let out = run(initial, &cfg, None).unwrap();
        let xs: Vec<f64> = out.rows.iter().map(|r| k.mean_size(r.t).ln()).collect();
        let ys: Vec<f64> = out
            .rows
            .iter()
            .map(|r| {
                let s = &out.snapshots[out.rows.iter().position(|q| q.t == r.t).unwrap()];
                let m0: f64 = s
                    .f_values
                    .iter()
                    .zip(g.weights().iter())
                    .map(|(a, b)| a * b)
                    .sum();
                (1.0 / m0).ln()
            })
            .collect();
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxx: f64 = xs.iter().map(|v| v * v).sum();
        let sxy: f64 = xs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!((slope - 1.0).abs() <= 0.05, "fitted exponent {slope}");
    }

    #[test]
    fn stagnation_is_reported() {
        let g = grid(1e-3, 1e2, 32);
        let s = SimState::from_fn(Arc::clone(&g), |x| (-x).exp()).unwrap();
        let err = step_clamped(&s, &spec(0.0), 0.5, 1.0, s.t);
        assert!(matches!(err, Err(CoagError::Stagnation { .. })));
    }
}

//! Time propagation by Strang splitting.
//!
//! Convention: `psi(t) = U(t, t0) psi0` solves `d/dt psi = -i H(t) psi`, so
//! the free flow is the Fourier multiplier `exp(-i t |xi|^2 / 2)`. One step of
//! length `dt` from `t` is
//!
//! ```text
//! exp(-i dt/2 V(t_mid)) exp(-i dt |xi|^2/2) exp(-i dt/2 V(t_mid)),   t_mid = t + dt/2
//! ```
//!
//! and the matrix flow replaces both factors by their 2x2 versions.

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fieldgrid::{fft_raw, ComplexField, Direction, Grid, SpinorField, C64, PARALLEL_THRESHOLD};
use crate::model::{ChargeTransferModel, MatrixChargeTransferModel, MatrixField, PotentialSpec};

/// Matrix flows whose norm exceeds this multiple of the initial norm are
/// reported as unstable.
pub const INSTABILITY_LIMIT: f64 = 1e6;

/// Quantities every stored state provides to the trajectory diagnostics.
pub trait State: Clone {
    fn grid(&self) -> &Grid;
    fn l2_norm(&self) -> f64;
    fn shell_mass(&self, mask: &[bool]) -> f64;
    fn finite(&self) -> bool;
}

impl State for ComplexField {
    fn grid(&self) -> &Grid {
        ComplexField::grid(self)
    }
    fn l2_norm(&self) -> f64 {
        self.norm()
    }
    fn shell_mass(&self, mask: &[bool]) -> f64 {
        ComplexField::shell_mass(self, mask)
    }
    fn finite(&self) -> bool {
        self.is_finite()
    }
}

impl State for SpinorField {
    fn grid(&self) -> &Grid {
        SpinorField::grid(self)
    }
    fn l2_norm(&self) -> f64 {
        self.norm()
    }
    fn shell_mass(&self, mask: &[bool]) -> f64 {
        SpinorField::shell_mass(self, mask)
    }
    fn finite(&self) -> bool {
        self.is_finite()
    }
}

/// Snapshots at uniformly spaced times with per-snapshot diagnostics.
#[derive(Clone, Debug)]
pub struct Trajectory<F> {
    pub label: String,
    pub grid: Grid,
    pub dt: f64,
    times: Vec<f64>,
    states: Vec<F>,
    norms: Vec<f64>,
    shell_mass: Vec<f64>,
}

impl<F: State> Trajectory<F> {
    pub fn new(label: impl Into<String>, grid: Grid, dt: f64) -> Self {
        Self {
            label: label.into(),
            grid,
            dt,
            times: Vec::new(),
            states: Vec::new(),
            norms: Vec::new(),
            shell_mass: Vec::new(),
        }
    }

    /// Appends a snapshot; times must increase with a uniform stride.
    pub fn push(&mut self, t: f64, state: F, mask: &[bool]) -> Result<()> {
        state.grid().ensure_same(&self.grid)?;
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::Contract(format!("snapshot time {t} does not exceed {last}")));
            }
            if self.times.len() >= 2 {
                let stride = self.times[1] - self.times[0];
                if ((t - last) - stride).abs() > 1e-9 * stride.max(1.0) {
                    return Err(Error::Contract("snapshot stride is not uniform".into()));
                }
            }
        }
        self.norms.push(state.l2_norm());
        self.shell_mass.push(state.shell_mass(mask));
        self.times.push(t);
        self.states.push(state);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[F] {
        &self.states
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn shell_mass(&self) -> &[f64] {
        &self.shell_mass
    }

    pub fn first(&self) -> Option<&F> {
        self.states.first()
    }

    pub fn last(&self) -> Option<&F> {
        self.states.last()
    }

    /// Number of leading snapshots whose shell mass stays at or below
    /// `threshold`.
    pub fn clean_len(&self, threshold: f64) -> usize {
        self.shell_mass
            .iter()
            .position(|&m| m > threshold)
            .unwrap_or(self.len())
    }

    /// Largest `|norm(t) - norm(t0)| / (norm(t0) (t - t0))`.
    pub fn norm_drift_rate(&self) -> f64 {
        let (Some(&n0), Some(&t0)) = (self.norms.first(), self.times.first()) else {
            return 0.0;
        };
        self.norms
            .iter()
            .zip(&self.times)
            .skip(1)
            .map(|(n, t)| (n - n0).abs() / (n0.max(1e-300) * (t - t0)))
            .fold(0.0, f64::max)
    }
}

/// Number of steps of size `dt` covering `[t0, t1]` (signed).
pub fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let span = (t1 - t0).abs();
    let n = (span / dt).round();
    if (n * dt - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::Config(format!(
            "interval length {span} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

fn for_each_indexed(values: &mut [C64], f: impl Fn(usize, &mut C64) + Sync + Send) {
    if values.len() >= PARALLEL_THRESHOLD {
        values.par_iter_mut().enumerate().for_each(|(i, z)| f(i, z));
    } else {
        values.iter_mut().enumerate().for_each(|(i, z)| f(i, z));
    }
}

/// Precomputed `exp(-i tau |xi|^2 / 2)` including the inverse-FFT scale.
struct Kinetic {
    phases: Vec<C64>,
}

impl Kinetic {
    fn new(grid: &Grid, tau: f64) -> Self {
        let scale = 1.0 / grid.len() as f64;
        let phases = grid
            .frequency_squares()
            .into_iter()
            .map(|k2| C64::from_polar(scale, -0.5 * tau * k2))
            .collect();
        Self { phases }
    }

    fn apply(&self, grid: &Grid, values: &mut [C64]) {
        fft_raw(grid, values, Direction::Forward);
        let phases = &self.phases;
        for_each_indexed(values, |i, z| *z *= phases[i]);
        fft_raw(grid, values, Direction::Inverse);
    }

    /// Same multiplier with the time direction reversed (the lower spinor
    /// component carries `+Delta/2`).
    fn apply_conj(&self, grid: &Grid, values: &mut [C64]) {
        fft_raw(grid, values, Direction::Forward);
        let phases = &self.phases;
        for_each_indexed(values, |i, z| *z *= phases[i].conj());
        fft_raw(grid, values, Direction::Inverse);
    }
}

/// Exact free flow `exp(-i t |xi|^2 / 2)`.
pub fn free_evolve(f: &ComplexField, t: f64) -> ComplexField {
    if t == 0.0 {
        return f.clone();
    }
    let grid = f.grid().clone();
    let mut out = f.clone();
    Kinetic::new(&grid, t).apply(&grid, out.values_mut());
    out
}

/// Source of the scalar potential during a run.
enum ScalarPotential<'a> {
    Static(Vec<f64>),
    Moving {
        fixed: Vec<f64>,
        moving: Vec<&'a PotentialSpec>,
    },
}

impl<'a> ScalarPotential<'a> {
    fn from_specs(grid: &Grid, specs: &'a [PotentialSpec]) -> Self {
        let mut fixed = vec![0.0; grid.len()];
        let mut moving = Vec::new();
        for s in specs {
            if s.velocity == [0.0; 3] {
                s.accumulate(0.0, grid, &mut fixed);
            } else {
                moving.push(s);
            }
        }
        if moving.is_empty() {
            Self::Static(fixed)
        } else {
            Self::Moving { fixed, moving }
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Self::Static(v) if v.iter().all(|&x| x == 0.0))
    }

    fn eval(&self, grid: &Grid, t: f64, out: &mut Vec<f64>) {
        match self {
            Self::Static(v) => {
                out.clear();
                out.extend_from_slice(v);
            }
            Self::Moving { fixed, moving } => {
                out.clear();
                out.extend_from_slice(fixed);
                for s in moving {
                    s.accumulate(t, grid, out);
                }
            }
        }
    }
}

fn phase_multiply(values: &mut [C64], potential: &[f64], tau: f64) {
    for_each_indexed(values, |i, z| *z *= C64::from_polar(1.0, -tau * potential[i]));
}

/// Drives `nsteps` Strang steps from `t0` with signed step `h`, calling
/// `observe` every `stride` steps (and at the start).
fn run_scalar(
    grid: &Grid,
    potential: &ScalarPotential,
    f: &ComplexField,
    t0: f64,
    h: f64,
    nsteps: usize,
    stride: usize,
    mut observe: impl FnMut(usize, f64, &ComplexField) -> Result<()>,
) -> Result<ComplexField> {
    grid.ensure_same(f.grid())?;
    let kinetic = Kinetic::new(grid, h);
    let mut psi = f.clone();
    observe(0, t0, &psi)?;
    let mut v = Vec::with_capacity(grid.len());
    let mut static_phase: Option<Vec<C64>> = None;
    if let ScalarPotential::Static(pot) = potential {
        if !potential.is_zero() {
            static_phase = Some(pot.iter().map(|&p| C64::from_polar(1.0, -0.5 * h * p)).collect());
        }
    }
    for step in 1..=nsteps {
        let t = t0 + (step - 1) as f64 * h;
        let values = psi.values_mut();
        match (&static_phase, potential) {
            (Some(ph), _) => {
                for_each_indexed(values, |i, z| *z *= ph[i]);
                kinetic.apply(grid, values);
                for_each_indexed(values, |i, z| *z *= ph[i]);
            }
            (None, ScalarPotential::Static(_)) => kinetic.apply(grid, values),
            (None, _) => {
                potential.eval(grid, t + 0.5 * h, &mut v);
                phase_multiply(values, &v, 0.5 * h);
                kinetic.apply(grid, values);
                phase_multiply(values, &v, 0.5 * h);
            }
        }
        if step % stride == 0 || step == nsteps {
            if !psi.is_finite() {
                return Err(Error::Propagation {
                    step,
                    reason: "non-finite amplitude".into(),
                });
            }
            if step % stride == 0 {
                observe(step, t0 + step as f64 * h, &psi)?;
            }
        }
    }
    Ok(psi)
}

fn check_stride(nsteps: usize, stride: usize) -> Result<()> {
    if stride == 0 || nsteps % stride != 0 {
        return Err(Error::Config(format!(
            "snapshot stride {stride} must divide the step count {nsteps}"
        )));
    }
    Ok(())
}

fn warn_horizon<M: crate::model::ModelGeometry>(model: &M, t0: f64, t1: f64) {
    let grid = model.grid();
    let speed = model
        .wells()
        .iter()
        .map(|w| crate::fieldgrid::norm2(&w.velocity).sqrt())
        .fold(0.0, f64::max);
    if speed > 0.0 {
        let safe = 0.5 * grid.length() / speed;
        if (t1 - t0).abs() > safe {
            warn!("propagation over {} exceeds the wrap horizon {safe:.3}", (t1 - t0).abs());
        }
    }
}

/// Scalar charge-transfer flow from `t0` to `t1 > t0`, storing a snapshot
/// every `stride` steps.
pub fn evolve(
    model: &ChargeTransferModel,
    f: &ComplexField,
    t0: f64,
    t1: f64,
    dt: f64,
    stride: usize,
) -> Result<Trajectory<ComplexField>> {
    if t1 <= t0 {
        return Err(Error::Config(format!("evolve needs t1 > t0, got [{t0}, {t1}]")));
    }
    let nsteps = step_count(t0, t1, dt)?;
    check_stride(nsteps, stride)?;
    warn_horizon(model, t0, t1);
    let grid = &model.grid;
    let mask = grid.shell_mask();
    let potential = ScalarPotential::from_specs(grid, &model.potentials);
    let mut traj = Trajectory::new("scalar charge-transfer flow", grid.clone(), dt);
    run_scalar(grid, &potential, f, t0, dt, nsteps, stride, |_, t, psi| {
        traj.push(t, psi.clone(), &mask)
    })?;
    Ok(traj)
}

/// Scalar flow from `t0` to `t1` in either direction, returning only the
/// final state. `observe` sees every `stride`-th state, including the first.
pub fn evolve_observed(
    model: &ChargeTransferModel,
    f: &ComplexField,
    t0: f64,
    t1: f64,
    dt: f64,
    stride: usize,
    mut observe: impl FnMut(f64, &ComplexField) -> Result<()>,
) -> Result<ComplexField> {
    let nsteps = step_count(t0, t1, dt)?;
    if nsteps == 0 {
        observe(t0, f)?;
        return Ok(f.clone());
    }
    check_stride(nsteps, stride)?;
    let h = if t1 >= t0 { dt } else { -dt };
    let potential = ScalarPotential::from_specs(&model.grid, &model.potentials);
    run_scalar(&model.grid, &potential, f, t0, h, nsteps, stride, |_, t, psi| observe(t, psi))
}

/// `exp(-i t H)` for `H = -Delta/2 + V` with the potential frozen at its
/// center (velocity ignored). Negative `t` runs backwards.
pub fn evolve_stationary(spec: &PotentialSpec, f: &ComplexField, t: f64, dt: f64) -> Result<ComplexField> {
    let grid = f.grid().clone();
    let mut v = vec![0.0; grid.len()];
    spec.stationary().accumulate(0.0, &grid, &mut v);
    evolve_static_potential(&v, f, t, dt)
}

/// `exp(-i t (-Delta/2 + V))` for a sampled real potential.
pub fn evolve_static_potential(potential: &[f64], f: &ComplexField, t: f64, dt: f64) -> Result<ComplexField> {
    let grid = f.grid().clone();
    if potential.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "potential has {} samples, grid has {}",
            potential.len(),
            grid.len()
        )));
    }
    let nsteps = step_count(0.0, t, dt)?;
    if nsteps == 0 {
        return Ok(f.clone());
    }
    let h = if t >= 0.0 { dt } else { -dt };
    let pot = ScalarPotential::Static(potential.to_vec());
    run_scalar(&grid, &pot, f, 0.0, h, nsteps, nsteps, |_, _, _| Ok(()))
}

// ---------------------------------------------------------------------------
// Matrix flow

/// `exp(-i dt m)` for a trace-free 2x2 matrix `m = [[a, b], [c, -a]]`:
/// `cos(s dt) I - i sin(s dt)/s m` with `s^2 = a^2 + b c`.
pub fn pointwise_matrix_exp(m: &[[C64; 2]; 2], dt: f64) -> Result<[[C64; 2]; 2]> {
    let tr = m[0][0] + m[1][1];
    let scale = m.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
    if tr.norm() > 1e-12 * scale.max(1.0) {
        return Err(Error::Contract(format!("matrix is not trace-free (trace {tr})")));
    }
    Ok(trace_free_exp(m, dt))
}

fn trace_free_exp(m: &[[C64; 2]; 2], dt: f64) -> [[C64; 2]; 2] {
    let a = 0.5 * (m[0][0] - m[1][1]);
    let s2 = a * a + m[0][1] * m[1][0];
    let z = s2.sqrt() * dt;
    let c = z.cos();
    // sin(z)/z, with the series near the removable singularity
    let sinc = if z.norm() < 1e-4 {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    };
    let k = C64::new(0.0, -dt) * sinc;
    [[c + k * a, k * m[0][1]], [k * m[1][0], c - k * a]]
}

/// Source of the matrix potential during a run.
pub enum MatrixPotentialSource<'a> {
    Static(MatrixField),
    Dynamic(Box<dyn Fn(f64, &mut MatrixField) + Sync + 'a>),
}

fn apply_matrix(s: &mut SpinorField, e: &[[[C64; 2]; 2]]) {
    let up = s.upper.values_mut();
    let lo = s.lower.values_mut();
    let kernel = |(m, (u, l)): (&[[C64; 2]; 2], (&mut C64, &mut C64))| {
        let (a, b) = (*u, *l);
        *u = m[0][0] * a + m[0][1] * b;
        *l = m[1][0] * a + m[1][1] * b;
    };
    if up.len() >= PARALLEL_THRESHOLD {
        e.par_iter().zip(up.par_iter_mut().zip(lo.par_iter_mut())).for_each(kernel);
    } else {
        e.iter().zip(up.iter_mut().zip(lo.iter_mut())).for_each(kernel);
    }
}

fn half_step_exps(field: &MatrixField, h: f64) -> Vec<[[C64; 2]; 2]> {
    if field.entries.len() >= PARALLEL_THRESHOLD {
        field.entries.par_iter().map(|m| trace_free_exp(m, 0.5 * h)).collect()
    } else {
        field.entries.iter().map(|m| trace_free_exp(m, 0.5 * h)).collect()
    }
}

fn check_trace_free(field: &MatrixField) -> Result<()> {
    for m in &field.entries {
        pointwise_matrix_exp(m, 0.0)?;
    }
    Ok(())
}

/// Generic Strang driver for `d/dt s = -i (diag(-Delta/2, Delta/2) + V(t)) s`.
pub fn run_matrix(
    grid: &Grid,
    source: &MatrixPotentialSource,
    s: &SpinorField,
    t0: f64,
    t1: f64,
    dt: f64,
    stride: usize,
    mut observe: impl FnMut(f64, &SpinorField) -> Result<()>,
) -> Result<SpinorField> {
    grid.ensure_same(s.grid())?;
    let nsteps = step_count(t0, t1, dt)?;
    let mut psi = s.clone();
    observe(t0, &psi)?;
    if nsteps == 0 {
        return Ok(psi);
    }
    check_stride(nsteps, stride)?;
    let h = if t1 >= t0 { dt } else { -dt };
    let kinetic = Kinetic::new(grid, h);
    let n0 = s.norm().max(1e-300);
    let mut field = MatrixField::zeros(grid);
    let fixed = match source {
        MatrixPotentialSource::Static(m) => {
            grid.ensure_same(&m.grid)?;
            check_trace_free(m)?;
            Some(half_step_exps(m, h))
        }
        MatrixPotentialSource::Dynamic(_) => None,
    };
    let mut exps;
    for step in 1..=nsteps {
        let t = t0 + (step - 1) as f64 * h;
        let e = match (&fixed, source) {
            (Some(e), _) => e,
            (None, MatrixPotentialSource::Dynamic(eval)) => {
                field.entries.iter_mut().for_each(|m| *m = [[C64::new(0.0, 0.0); 2]; 2]);
                eval(t + 0.5 * h, &mut field);
                if step == 1 {
                    check_trace_free(&field)?;
                }
                exps = half_step_exps(&field, h);
                &exps
            }
            (None, MatrixPotentialSource::Static(_)) => unreachable!(),
        };
        apply_matrix(&mut psi, e);
        kinetic.apply(grid, psi.upper.values_mut());
        kinetic.apply_conj(grid, psi.lower.values_mut());
        apply_matrix(&mut psi, e);
        if step % stride == 0 {
            let norm = psi.norm();
            if !norm.is_finite() {
                return Err(Error::Propagation {
                    step,
                    reason: "non-finite amplitude".into(),
                });
            }
            if norm > INSTABILITY_LIMIT * n0 {
                return Err(Error::Instability {
                    step,
                    norm,
                    limit: INSTABILITY_LIMIT,
                });
            }
            observe(t0 + step as f64 * h, &psi)?;
        }
    }
    Ok(psi)
}

/// Matrix charge-transfer flow from `t0` to `t1 > t0`.
pub fn evolve_matrix(
    model: &MatrixChargeTransferModel,
    s: &SpinorField,
    t0: f64,
    t1: f64,
    dt: f64,
    stride: usize,
) -> Result<Trajectory<SpinorField>> {
    if t1 <= t0 {
        return Err(Error::Config(format!("evolve_matrix needs t1 > t0, got [{t0}, {t1}]")));
    }
    warn_horizon(model, t0, t1);
    let grid = model.grid.clone();
    let mask = grid.shell_mask();
    let source = MatrixPotentialSource::Dynamic(Box::new(|t, out: &mut MatrixField| model.total_potential(t, out)));
    let mut traj = Trajectory::new("matrix charge-transfer flow", grid.clone(), dt);
    run_matrix(&grid, &source, s, t0, t1, dt, stride, |t, psi| traj.push(t, psi.clone(), &mask))?;
    Ok(traj)
}

/// `exp(-i t A)` for a time-independent matrix potential (the kinetic part
/// `diag(-Delta/2, Delta/2)` is implied).
pub fn evolve_matrix_static(potential: &MatrixField, s: &SpinorField, t: f64, dt: f64) -> Result<SpinorField> {
    let source = MatrixPotentialSource::Static(potential.clone());
    let nsteps = step_count(0.0, t, dt)?.max(1);
    run_matrix(&potential.grid, &source, s, 0.0, t, dt, nsteps, |_, _| Ok(()))
}

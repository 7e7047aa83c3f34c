//! Bound states of the stationary channel Hamiltonians, spectral
//! projections (including the moving one), scattering-state preparation,
//! Duhamel approximations of the channel wave operators and biorthogonal
//! eigenpairs of the 1D matrix operator.
//!
//! The moving channel `j` carries the bound states `G_j(t) u` with
//! `G_j(t) = galilei(v_j, 0, t)`, which is the frame change that solves the
//! moving-well equation, and `P_b(H_j, t) = G_j(t) P_b(H_j) G_j(t)^{-1}`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fieldgrid::{fft_raw, norm2, ComplexField, Direction, Grid, SpinorField, Vec3, C64};
use crate::model::{ChargeTransferModel, MatrixField, PotentialSpec};
use crate::propagate::{evolve_observed, evolve_static_potential};
use crate::symmetry::{galilei, galilei_inverse, BoostSpec};

pub const DEFAULT_GAP_TOL: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct BoundState {
    pub eigenvalue: f64,
    pub eigenfunction: ComplexField,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct SpectralFamily {
    pub channel: usize,
    pub states: Vec<BoundState>,
}

impl SpectralFamily {
    pub fn empty(channel: usize) -> Self {
        Self {
            channel,
            states: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Largest `|<w_i, w_j>|` over distinct pairs.
    pub fn max_overlap(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (i, a) in self.states.iter().enumerate() {
            for b in &self.states[i + 1..] {
                m = m.max(a.eigenfunction.inner(&b.eigenfunction).norm());
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct EigenOptions {
    pub gap_tol: f64,
    /// Imaginary time step of the pre-conditioning sweeps.
    pub tau: f64,
    pub imaginary_steps: usize,
    pub krylov_dim: usize,
    pub max_restarts: usize,
    /// Candidates with more than this fraction of mass in the boundary shell
    /// are box states rather than bound states.
    pub delocalized_shell: f64,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            gap_tol: DEFAULT_GAP_TOL,
            tau: 0.1,
            imaginary_steps: 400,
            krylov_dim: 40,
            max_restarts: 400,
            delocalized_shell: 1e-3,
            seed: 7,
        }
    }
}

/// `-Delta/2 + V` on the grid with a sampled real potential.
pub struct Hamiltonian {
    grid: Grid,
    potential: Vec<f64>,
    kinetic: Vec<f64>,
}

impl Hamiltonian {
    pub fn new(grid: &Grid, potential: Vec<f64>) -> Result<Self> {
        if potential.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "potential has {} samples, grid has {}",
                potential.len(),
                grid.len()
            )));
        }
        let kinetic = grid.frequency_squares().into_iter().map(|k| 0.5 * k).collect();
        Ok(Self {
            grid: grid.clone(),
            potential,
            kinetic,
        })
    }

    pub fn from_spec(spec: &PotentialSpec, grid: &Grid) -> Result<Self> {
        let mut v = vec![0.0; grid.len()];
        spec.stationary().accumulate(0.0, grid, &mut v);
        Self::new(grid, v)
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn apply(&self, f: &ComplexField) -> ComplexField {
        let mut k = f.clone();
        let vals = k.values_mut();
        fft_raw(&self.grid, vals, Direction::Forward);
        let s = 1.0 / self.grid.len() as f64;
        for (z, &e) in vals.iter_mut().zip(&self.kinetic) {
            *z *= e * s;
        }
        fft_raw(&self.grid, vals, Direction::Inverse);
        for ((z, x), &v) in vals.iter_mut().zip(f.values()).zip(&self.potential) {
            *z += x * v;
        }
        k
    }

    pub fn rayleigh(&self, f: &ComplexField) -> f64 {
        self.apply(f).inner(f).re / f.norm().powi(2)
    }

    pub fn residual(&self, f: &ComplexField, lambda: f64) -> f64 {
        let mut r = self.apply(f);
        r.axpy(C64::new(-lambda, 0.0), f);
        r.norm()
    }

    fn imaginary_step(&self, f: &mut ComplexField, half: &[f64], kin: &[f64]) {
        let vals = f.values_mut();
        for (z, &p) in vals.iter_mut().zip(half) {
            *z *= p;
        }
        fft_raw(&self.grid, vals, Direction::Forward);
        for (z, &k) in vals.iter_mut().zip(kin) {
            *z *= k;
        }
        fft_raw(&self.grid, vals, Direction::Inverse);
        for (z, &p) in vals.iter_mut().zip(half) {
            *z *= p;
        }
    }
}

fn orthogonalize(f: &mut ComplexField, basis: &[ComplexField]) {
    for _ in 0..2 {
        for b in basis {
            let c = f.inner(b);
            f.axpy(-c, b);
        }
    }
}

fn fix_phase(f: &mut ComplexField) {
    let peak = f
        .values()
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(C64::new(1.0, 0.0));
    if peak.norm() > 0.0 {
        f.scale(peak.conj() / peak.norm());
    }
}

fn potential_minimum(potential: &[f64]) -> usize {
    potential
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Random localized start vector around the potential minimum.
fn start_vector(grid: &Grid, potential: &[f64], rng: &mut ChaCha8Rng) -> ComplexField {
    let c = grid.point(potential_minimum(potential));
    let width = 0.08 * grid.length();
    let dim = grid.dim();
    let lumps: Vec<(Vec3, C64)> = (0..6)
        .map(|_| {
            let mut o = c;
            for a in o.iter_mut().take(dim) {
                *a += rng.gen_range(-0.5 * width..0.5 * width);
            }
            (o, C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        })
        .collect();
    let mut f = ComplexField::from_fn(grid, |x| {
        lumps
            .iter()
            .map(|(o, a)| {
                let d = grid.torus_displacement(&x, o);
                a * (-norm2(&d) / (2.0 * width * width)).exp()
            })
            .sum()
    });
    f.normalize();
    f
}

struct Candidate {
    value: f64,
    vector: ComplexField,
    residual: f64,
    converged: bool,
}

/// Lowest eigenpair of `H` restricted to the orthogonal complement of
/// `locked`, by imaginary-time smoothing followed by restarted Lanczos.
fn lowest_deflated(h: &Hamiltonian, locked: &[ComplexField], start: ComplexField, tol: f64, opts: &EigenOptions) -> Candidate {
    let grid = &h.grid;
    let half: Vec<f64> = h.potential.iter().map(|&v| (-0.5 * opts.tau * v).exp()).collect();
    let s = 1.0 / grid.len() as f64;
    let kin: Vec<f64> = h.kinetic.iter().map(|&k| (-opts.tau * k).exp() * s).collect();

    let mut x = start;
    orthogonalize(&mut x, locked);
    x.normalize();
    let mut last = f64::INFINITY;
    for it in 0..opts.imaginary_steps {
        h.imaginary_step(&mut x, &half, &kin);
        orthogonalize(&mut x, locked);
        x.normalize();
        if it % 10 == 9 {
            let r = h.rayleigh(&x);
            if (last - r).abs() < 1e-9 {
                break;
            }
            last = r;
        }
    }

    let m = opts.krylov_dim.max(4);
    let mut theta = h.rayleigh(&x);
    let mut residual = h.residual(&x, theta);
    for restart in 0..opts.max_restarts {
        if residual < tol {
            return Candidate {
                value: theta,
                vector: x,
                residual,
                converged: true,
            };
        }
        let mut q: Vec<ComplexField> = vec![x.clone()];
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        for j in 0..m {
            let mut w = h.apply(&q[j]);
            orthogonalize(&mut w, locked);
            let a = w.inner(&q[j]).re;
            alpha.push(a);
            // full reorthogonalization against the Krylov basis
            for _ in 0..2 {
                for b in &q {
                    let c = w.inner(b);
                    w.axpy(-c, b);
                }
            }
            let nb = w.norm();
            if j + 1 == m || nb < 1e-12 {
                break;
            }
            beta.push(nb);
            w.scale(C64::new(1.0 / nb, 0.0));
            q.push(w);
        }
        let k = alpha.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = t.symmetric_eigen();
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty tridiagonal");
        let y = eig.eigenvectors.column(imin);
        let mut nx = ComplexField::zeros(grid);
        for (i, qi) in q.iter().enumerate().take(k) {
            nx.axpy(C64::new(y[i], 0.0), qi);
        }
        orthogonalize(&mut nx, locked);
        nx.normalize();
        x = nx;
        theta = h.rayleigh(&x);
        residual = h.residual(&x, theta);
        debug!("lanczos restart {restart}: theta {theta:.10} residual {residual:.3e}");
    }
    Candidate {
        value: theta,
        converged: residual < tol,
        vector: x,
        residual,
    }
}

/// Negative eigenpairs of `-Delta/2 + V` below `-gap_tol` for a sampled
/// potential, sorted ascending.
pub fn bound_states_for_potential(
    grid: &Grid,
    potential: Vec<f64>,
    channel: usize,
    k_max: usize,
    tol: f64,
    opts: &EigenOptions,
) -> Result<SpectralFamily> {
    let h = Hamiltonian::new(grid, potential)?;
    let mask = grid.shell_mask_around(&grid.point(potential_minimum(&h.potential)));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (channel as u64).wrapping_mul(0x9e37_79b9));
    let mut states: Vec<BoundState> = Vec::new();
    while states.len() < k_max {
        let locked: Vec<ComplexField> = states.iter().map(|s| s.eigenfunction.clone()).collect();
        let start = start_vector(grid, &h.potential, &mut rng);
        let c = lowest_deflated(&h, &locked, start, tol, opts);
        let shell = c.vector.shell_mass(&mask);
        debug!(
            "channel {channel}: candidate {:.8} residual {:.2e} shell {:.2e}",
            c.value, c.residual, shell
        );
        if c.value - c.residual > -opts.gap_tol || (c.converged && c.value >= -opts.gap_tol) {
            if c.value < 0.0 && c.converged && shell < opts.delocalized_shell {
                return Err(Error::NearThreshold {
                    eigenvalue: c.value,
                    gap_tol: opts.gap_tol,
                });
            }
            break;
        }
        if !c.converged {
            return Err(Error::Convergence {
                iterations: opts.max_restarts,
                residual: c.residual,
            });
        }
        if shell >= opts.delocalized_shell {
            warn!("channel {channel}: eigenvalue {:.6} belongs to a delocalized state", c.value);
            break;
        }
        let mut w = c.vector;
        fix_phase(&mut w);
        states.push(BoundState {
            eigenvalue: c.value,
            residual: h.residual(&w, c.value),
            eigenfunction: w,
        });
    }
    states.sort_by(|a, b| a.eigenvalue.total_cmp(&b.eigenvalue));
    Ok(SpectralFamily { channel, states })
}

/// Bound states of the stationary copy of `spec` (center kept, velocity
/// ignored).
pub fn bound_states(spec: &PotentialSpec, grid: &Grid, k_max: usize, tol: f64) -> Result<SpectralFamily> {
    bound_states_with(spec, grid, 0, k_max, tol, &EigenOptions::default())
}

pub fn bound_states_with(
    spec: &PotentialSpec,
    grid: &Grid,
    channel: usize,
    k_max: usize,
    tol: f64,
    opts: &EigenOptions,
) -> Result<SpectralFamily> {
    let h = Hamiltonian::from_spec(spec, grid)?;
    bound_states_for_potential(grid, h.potential, channel, k_max, tol, opts)
}

// ---------------------------------------------------------------------------
// Projections

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Bound,
    Continuous,
}

/// `sum_i <f, w_i> w_i` or its complement.
pub fn project_point(f: &ComplexField, family: &SpectralFamily, part: Part) -> Result<ComplexField> {
    let mut bound = ComplexField::zeros(f.grid());
    for s in &family.states {
        f.grid().ensure_same(s.eigenfunction.grid())?;
        bound.axpy(f.inner(&s.eigenfunction), &s.eigenfunction);
    }
    Ok(match part {
        Part::Bound => bound,
        Part::Continuous => f.sub(&bound),
    })
}

/// `G_v(t) P G_v(t)^{-1} f` with `P` the bound or continuous projection of
/// the stationary channel.
pub fn project_point_moving(f: &ComplexField, family: &SpectralFamily, v: &Vec3, t: f64, part: Part) -> Result<ComplexField> {
    let b = BoostSpec::moving(*v, t);
    let rest = galilei_inverse(f, &b)?;
    galilei(&project_point(&rest, family, part)?, &b)
}

/// Channel `j` bound projection at time `t` for a well moving with `v`.
fn channel_bound(f: &ComplexField, family: &SpectralFamily, v: &Vec3, t: f64) -> Result<ComplexField> {
    if *v == [0.0; 3] {
        project_point(f, family, Part::Bound)
    } else {
        project_point_moving(f, family, v, t, Part::Bound)
    }
}

/// Norms of the bound components of `f` in every channel at time `t`.
pub fn channel_overlaps(f: &ComplexField, model: &ChargeTransferModel, families: &[SpectralFamily], t: f64) -> Result<Vec<f64>> {
    families
        .iter()
        .map(|fam| {
            let v = model.potentials[fam.channel].velocity;
            Ok(channel_bound(f, fam, &v, t)?.norm())
        })
        .collect()
}

/// The moving bound state `G_v(t) w` at time `t` (without the energy phase).
pub fn moving_state(w: &ComplexField, v: &Vec3, t: f64) -> Result<ComplexField> {
    if *v == [0.0; 3] {
        Ok(w.clone())
    } else {
        galilei(w, &BoostSpec::moving(*v, t))
    }
}

// ---------------------------------------------------------------------------
// Scattering data

#[derive(Clone, Debug, PartialEq)]
pub struct WavePacket {
    pub center: Vec3,
    pub momentum: Vec3,
    pub width: f64,
}

impl WavePacket {
    /// `exp(-|x - c|^2 / (2 w^2) + i k.x)` normalized in `L^2`.
    pub fn field(&self, grid: &Grid) -> ComplexField {
        let w2 = self.width * self.width;
        let mut f = ComplexField::from_fn(grid, |x| {
            let d = grid.torus_displacement(&x, &self.center);
            let phase: f64 = (0..3).map(|a| self.momentum[a] * x[a]).sum();
            C64::from_polar((-norm2(&d) / (2.0 * w2)).exp(), phase)
        });
        f.normalize();
        f
    }
}

#[derive(Clone, Debug)]
pub struct PreparedState {
    pub field: ComplexField,
    /// `||packet - f||^2` before renormalization.
    pub subtracted_mass: f64,
    /// Remaining bound overlap per channel after the final pass.
    pub overlaps: Vec<f64>,
    pub passes: usize,
}

pub const PREPARATION_TOL: f64 = 1e-10;
const MAX_PASSES: usize = 50;

/// `(Id - P_b(H_1) - P_b(H_2, 0) - ...) packet` by alternating projections,
/// renormalized.
pub fn prepare_scattering_state(packet: &ComplexField, model: &ChargeTransferModel, families: &[SpectralFamily]) -> Result<PreparedState> {
    let n0 = packet.norm();
    if n0 == 0.0 {
        return Err(Error::Preparation("packet is identically zero".into()));
    }
    let mut f = packet.clone();
    let mut passes = 0;
    let mut overlaps = channel_overlaps(&f, model, families, 0.0)?;
    while passes < MAX_PASSES && overlaps.iter().any(|&o| o >= PREPARATION_TOL * f.norm().max(1e-300)) {
        for fam in families {
            let v = model.potentials[fam.channel].velocity;
            let b = channel_bound(&f, fam, &v, 0.0)?;
            f = f.sub(&b);
        }
        passes += 1;
        overlaps = channel_overlaps(&f, model, families, 0.0)?;
    }
    finish_preparation(packet, f, overlaps, passes)
}

fn finish_preparation(packet: &ComplexField, mut f: ComplexField, overlaps: Vec<f64>, passes: usize) -> Result<PreparedState> {
    let n0 = packet.norm();
    let subtracted_mass = packet.sub(&f).norm().powi(2);
    let nf = f.norm();
    if nf < 1e-6 * n0 {
        return Err(Error::Preparation(format!(
            "packet has no scattering part (remaining norm {nf:.3e})"
        )));
    }
    let scaled: Vec<f64> = overlaps.iter().map(|o| o / nf).collect();
    if scaled.iter().any(|&o| o >= PREPARATION_TOL) {
        return Err(Error::Preparation(format!(
            "alternating projections did not converge after {passes} passes (overlaps {scaled:?})"
        )));
    }
    f.normalize();
    Ok(PreparedState {
        field: f,
        subtracted_mass,
        overlaps: scaled,
        passes,
    })
}

/// Refined preparation that removes the ranges of the channel wave
/// operators `Omega_j(0)` (approximated over `horizon`) instead of the
/// instantaneous bound states. The wave-operator images are orthonormalized
/// before subtraction.
pub fn prepare_with_wave_operators(
    packet: &ComplexField,
    model: &ChargeTransferModel,
    families: &[SpectralFamily],
    horizon: f64,
    dt: f64,
) -> Result<PreparedState> {
    let mut basis: Vec<ComplexField> = Vec::new();
    for fam in families {
        for st in &fam.states {
            let d = duhamel_wave_operator(model, fam.channel, st, 0.0, horizon, dt)?;
            let mut b = d.field;
            orthogonalize(&mut b, &basis);
            let nb = b.normalize();
            if nb > 1e-8 {
                basis.push(b);
            }
        }
    }
    let mut f = packet.clone();
    orthogonalize(&mut f, &basis);
    let overlaps = vec![basis.iter().map(|b| f.inner(b).norm()).fold(0.0, f64::max)];
    finish_preparation(packet, f, overlaps, 1)
}

// ---------------------------------------------------------------------------
// Wave operators

#[derive(Clone, Debug)]
pub struct DuhamelResult {
    pub field: ComplexField,
    /// `L^2` distance to the instantaneous channel bound state at `s`.
    pub distance: f64,
}

/// Latest time at which every moving well is still inside the box.
pub fn wrap_safe_time(model: &ChargeTransferModel) -> f64 {
    let half = 0.5 * model.grid.length();
    model
        .potentials
        .iter()
        .filter(|p| p.velocity != [0.0; 3])
        .map(|p| {
            (0..model.grid.dim())
                .filter(|&a| p.velocity[a] != 0.0)
                .map(|a| {
                    let room = if p.velocity[a] > 0.0 { half - p.center[a] } else { half + p.center[a] };
                    room / p.velocity[a].abs()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `U(s, T) G_j(T) exp(-i H_j (T - s)) w`, the Duhamel approximation of
/// `Omega_j(s)` applied to the channel bound state `G_j(s) w`.
pub fn duhamel_wave_operator(
    model: &ChargeTransferModel,
    channel: usize,
    state: &BoundState,
    s: f64,
    horizon: f64,
    dt: f64,
) -> Result<DuhamelResult> {
    let spec = model
        .potentials
        .get(channel)
        .ok_or_else(|| Error::Config(format!("no potential with index {channel}")))?;
    if horizon < s {
        return Err(Error::Config(format!("horizon {horizon} precedes s = {s}")));
    }
    let safe = wrap_safe_time(model);
    if horizon > safe {
        return Err(Error::Horizon { horizon, safe });
    }
    let w = &state.eigenfunction;
    let v = spec.velocity;
    let target = moving_state(w, &v, s)?;
    if horizon == s {
        return Ok(DuhamelResult {
            field: target,
            distance: 0.0,
        });
    }
    let h = Hamiltonian::from_spec(spec, &model.grid)?;
    let channel_flow = evolve_static_potential(h.potential(), w, horizon - s, dt)?;
    let at_horizon = moving_state(&channel_flow, &v, horizon)?;
    let nsteps = crate::propagate::step_count(s, horizon, dt)?;
    let back = evolve_observed(model, &at_horizon, horizon, s, dt, nsteps.max(1), |_, _| Ok(()))?;
    let distance = back.sub(&target).norm();
    Ok(DuhamelResult { field: back, distance })
}

// ---------------------------------------------------------------------------
// Matrix operator eigenpairs (1D)

#[derive(Clone, Debug)]
pub struct BiorthogonalPair {
    pub eigenvalue: C64,
    /// `A phi = omega phi`, unit norm.
    pub right: SpinorField,
    /// `A^* psi = conj(omega) psi`, scaled so that `<phi, psi> = 1`.
    pub left: SpinorField,
    pub residual_right: f64,
    pub residual_left: f64,
}

/// Dense spectral second-derivative matrix on a 1D periodic grid.
pub fn spectral_laplacian_1d(grid: &Grid) -> DMatrix<f64> {
    let n = grid.points();
    let h = grid.spacing();
    let mut row = vec![0.0; n];
    // entries depend on j - k only: (1/N) sum_m -xi_m^2 cos(xi_m (j - k) h)
    for (d, r) in row.iter_mut().enumerate() {
        let mut acc = 0.0;
        for m in 0..n {
            let xi = grid.frequency(m);
            acc -= xi * xi * (xi * d as f64 * h).cos();
        }
        *r = acc / n as f64;
    }
    DMatrix::from_fn(n, n, |j, k| row[(j + n - k) % n])
}

/// The stationary matrix operator `A = diag(-Delta/2, Delta/2) + V` as a
/// dense `2N x 2N` matrix, upper component first.
pub fn assemble_matrix_operator(potential: &MatrixField) -> Result<DMatrix<C64>> {
    let grid = &potential.grid;
    if grid.dim() != 1 {
        return Err(Error::Config("matrix eigenpairs are computed in one dimension only".into()));
    }
    let n = grid.points();
    let d2 = spectral_laplacian_1d(grid);
    let mut a = DMatrix::<C64>::zeros(2 * n, 2 * n);
    for j in 0..n {
        for k in 0..n {
            let kin = -0.5 * d2[(j, k)];
            a[(j, k)] = C64::new(kin, 0.0);
            a[(n + j, n + k)] = C64::new(-kin, 0.0);
        }
        let m = potential.entries[j];
        a[(j, j)] += m[0][0];
        a[(j, n + j)] += m[0][1];
        a[(n + j, j)] += m[1][0];
        a[(n + j, n + j)] += m[1][1];
    }
    Ok(a)
}

fn to_spinor(grid: &Grid, v: &DVector<C64>) -> Result<SpinorField> {
    let n = grid.points();
    let up = ComplexField::from_values(grid, v.rows(0, n).iter().copied().collect())?;
    let lo = ComplexField::from_values(grid, v.rows(n, n).iter().copied().collect())?;
    SpinorField::new(up, lo)
}

fn inverse_iteration(a: &DMatrix<C64>, shift: C64) -> DVector<C64> {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] -= shift;
    }
    let lu = m.lu();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = DVector::<C64>::from_fn(n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    for _ in 0..4 {
        if let Some(y) = lu.solve(&x) {
            let ny = y.norm();
            if ny == 0.0 || !ny.is_finite() {
                break;
            }
            x = y / C64::new(ny, 0.0);
        }
    }
    x
}

/// Isolated eigenpairs of the 1D matrix operator with `|Re omega| < mu - gap`
/// or a non-negligible imaginary part, each paired with its left
/// eigenvector.
pub fn matrix_eigenpairs(potential: &MatrixField, mu: f64, gap: f64) -> Result<Vec<BiorthogonalPair>> {
    let grid = potential.grid.clone();
    let a = assemble_matrix_operator(potential)?;
    let ah = a.adjoint();
    let eig = a
        .clone()
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::Convergence { iterations: 0, residual: f64::NAN })?;
    let mask = grid.shell_mask();
    let h = grid.spacing();
    let mut out: Vec<BiorthogonalPair> = Vec::new();
    let mut values: Vec<C64> = eig.iter().copied().filter(|w| w.re.abs() < mu - gap || w.im.abs() > 1e-8).collect();
    values.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    for omega in values {
        if out.iter().any(|p| (p.eigenvalue - omega).norm() < 1e-9) {
            continue;
        }
        let eps = C64::new(1e-10 * omega.norm().max(1.0), 0.0);
        let r = inverse_iteration(&a, omega + eps);
        let l = inverse_iteration(&ah, omega.conj() + eps);
        let mut right = to_spinor(&grid, &r)?;
        let nr = right.norm();
        right.scale(C64::new(1.0 / nr, 0.0));
        if right.shell_mass(&mask) > 1e-3 {
            continue;
        }
        let mut left = to_spinor(&grid, &l)?;
        let c = right.inner(&left);
        if c.norm() < 1e-12 {
            return Err(Error::Contract(format!("eigenvalue {omega} has orthogonal left and right vectors")));
        }
        left.scale((C64::new(1.0, 0.0) / c).conj());
        let res = |m: &DMatrix<C64>, s: &SpinorField, w: C64| -> f64 {
            let n = grid.points();
            let v = DVector::<C64>::from_iterator(2 * n, s.upper.values().iter().chain(s.lower.values()).copied());
            let r = m * &v - &v * w;
            r.norm() * h.sqrt() / s.norm()
        };
        out.push(BiorthogonalPair {
            eigenvalue: omega,
            residual_right: res(&a, &right, omega),
            residual_left: res(&ah, &left, omega.conj()),
            right,
            left,
        });
    }
    Ok(out)
}

/// `sum_j phi_j <f, psi_j>` (bound) or its complement.
pub fn biorthogonal_projection(s: &SpinorField, pairs: &[BiorthogonalPair], part: Part) -> Result<SpinorField> {
    let mut bound = SpinorField::zeros(s.grid());
    for p in pairs {
        s.grid().ensure_same(p.right.grid())?;
        bound.axpy(s.inner(&p.left), &p.right);
    }
    Ok(match part {
        Part::Bound => bound,
        Part::Continuous => s.sub(&bound),
    })
}

//! Periodic grids, complex fields on them, the unitary discrete Fourier
//! transform and the norm functionals used throughout the estimates.
//!
//! Lattice points are stored row-major with the first axis fastest:
//! the flat index of `(j1, j2, j3)` is `j1 + N*j2 + N*N*j3`. Coordinates run
//! over `-L/2 + j*h`, frequencies over `(2*pi/L) * {-N/2, ..., N/2-1}` in the
//! usual FFT ordering.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagate::Trajectory;

pub type C64 = Complex64;

/// Spatial points and velocities. Components beyond the grid dimension are zero.
pub type Vec3 = [f64; 3];

/// Fields at or above this many lattice points use the parallel kernels.
pub(crate) const PARALLEL_THRESHOLD: usize = 1 << 14;

/// Fraction of the box (per side) counted as the boundary shell.
pub const SHELL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    points: usize,
    length: f64,
}

impl Grid {
    /// `make_grid`: dimension 1..=3, a power-of-two point count of at least 16
    /// per axis and a positive box length.
    pub fn new(dim: usize, points: usize, length: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Config(format!("dimension must be 1, 2 or 3, got {dim}")));
        }
        if points < 16 || !points.is_power_of_two() {
            return Err(Error::Config(format!(
                "points per axis must be a power of two >= 16, got {points}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Config(format!("box length must be positive, got {length}")));
        }
        Ok(Self { dim, points, length })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.points as f64
    }

    /// Total number of lattice points, `N^n`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight `h^n`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn frequency_step(&self) -> f64 {
        2.0 * PI / self.length
    }

    /// Coordinate of index `j` along any axis.
    pub fn coordinate(&self, j: usize) -> f64 {
        -0.5 * self.length + j as f64 * self.spacing()
    }

    /// Frequency of FFT-ordered index `j` along any axis.
    pub fn frequency(&self, j: usize) -> f64 {
        let n = self.points as i64;
        let k = if (j as i64) < n / 2 { j as i64 } else { j as i64 - n };
        k as f64 * self.frequency_step()
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let n = self.points;
        let mut out = [0usize; 3];
        let mut rest = idx;
        for slot in out.iter_mut().take(self.dim) {
            *slot = rest % n;
            rest /= n;
        }
        out
    }

    pub fn point(&self, idx: usize) -> Vec3 {
        let m = self.multi_index(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.coordinate(m[a]);
        }
        x
    }

    pub fn wavevector(&self, idx: usize) -> Vec3 {
        let m = self.multi_index(idx);
        let mut k = [0.0; 3];
        for a in 0..self.dim {
            k[a] = self.frequency(m[a]);
        }
        k
    }

    pub fn points_iter(&self) -> impl Iterator<Item = Vec3> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// `|xi|^2` for every mode, in storage order.
    pub fn frequency_squares(&self) -> Vec<f64> {
        (0..self.len()).map(|i| norm2(&self.wavevector(i))).collect()
    }

    /// Minimum-image displacement `x - c` on the torus.
    pub fn torus_displacement(&self, x: &Vec3, c: &Vec3) -> Vec3 {
        let mut d = [0.0; 3];
        for a in 0..self.dim {
            let r = x[a] - c[a];
            d[a] = r - self.length * (r / self.length).round();
        }
        d
    }

    /// True when every component of `v` is an integer multiple of `2*pi/L`.
    pub fn is_commensurate(&self, v: &Vec3) -> bool {
        let step = self.frequency_step();
        (0..3).all(|a| {
            if a >= self.dim {
                return v[a] == 0.0;
            }
            let k = v[a] / step;
            (k - k.round()).abs() < 1e-9 * k.abs().max(1.0)
        })
    }

    /// Nearest lattice-commensurate velocity.
    pub fn snap_velocity(&self, v: &Vec3) -> Vec3 {
        let step = self.frequency_step();
        let mut out = [0.0; 3];
        for a in 0..self.dim {
            out[a] = (v[a] / step).round() * step;
        }
        out
    }

    /// Mask of lattice points within `SHELL_FRACTION * L` of the box boundary.
    pub fn shell_mask(&self) -> Vec<bool> {
        self.shell_mask_around(&[0.0; 3])
    }

    /// The boundary shell of the periodic box recentered at `c`.
    pub fn shell_mask_around(&self, c: &Vec3) -> Vec<bool> {
        let edge = 0.5 * self.length - SHELL_FRACTION * self.length;
        (0..self.len())
            .map(|i| {
                let d = self.torus_displacement(&self.point(i), c);
                (0..self.dim).any(|a| d[a].abs() >= edge - 1e-12)
            })
            .collect()
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

pub(crate) fn norm2(v: &Vec3) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Pads a 1-3 component slice to a `Vec3`.
pub fn vec3(components: &[f64]) -> Vec3 {
    let mut v = [0.0; 3];
    for (slot, c) in v.iter_mut().zip(components) {
        *slot = *c;
    }
    v
}

/// Japanese bracket `(1 + |x|^2)^{1/2}`.
pub fn bracket(r2: f64) -> f64 {
    (1.0 + r2).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    grid: Grid,
    values: Vec<C64>,
}

impl ComplexField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![C64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Contract("field contains non-finite values".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Vec3) -> C64 + Sync) -> Self {
        let values: Vec<C64> = if grid.len() >= PARALLEL_THRESHOLD {
            (0..grid.len()).into_par_iter().map(|i| f(grid.point(i))).collect()
        } else {
            (0..grid.len()).map(|i| f(grid.point(i))).collect()
        };
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn from_real(grid: &Grid, f: impl Fn(Vec3) -> f64 + Sync) -> Self {
        Self::from_fn(grid, |x| C64::new(f(x), 0.0))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm(&self) -> f64 {
        lp_norm_unchecked(self, 2.0)
    }

    /// `<self, other> = sum self * conj(other) * h^n`, linear in the first slot.
    pub fn inner(&self, other: &ComplexField) -> C64 {
        let s: C64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b.conj())
            .sum();
        s * self.grid.cell_volume()
    }

    pub fn scale(&mut self, a: C64) {
        self.values.iter_mut().for_each(|z| *z *= a);
    }

    pub fn scaled(&self, a: C64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: C64, other: &ComplexField) {
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(z, w)| *z += a * w);
    }

    pub fn sub(&self, other: &ComplexField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other);
        out
    }

    pub fn add(&self, other: &ComplexField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(1.0, 0.0), other);
        out
    }

    pub fn conj(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Pointwise product with a real-valued weight.
    pub fn weighted(&self, weight: impl Fn(Vec3) -> f64) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, z)| z * weight(self.grid.point(i)))
            .collect();
        Self {
            grid: self.grid.clone(),
            values,
        }
    }

    /// Renormalizes to unit L² norm, returning the previous norm.
    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(C64::new(1.0 / n, 0.0));
        }
        n
    }

    /// Fraction of `|f|^2` inside the boundary shell.
    pub fn shell_mass(&self, mask: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut shell = 0.0;
        for (z, &m) in self.values.iter().zip(mask) {
            let a = z.norm_sqr();
            total += a;
            if m {
                shell += a;
            }
        }
        if total > 0.0 {
            shell / total
        } else {
            0.0
        }
    }

    /// Applies a Fourier multiplier `m(xi)`.
    pub fn apply_multiplier(&self, m: impl Fn(Vec3) -> C64 + Sync) -> Self {
        let mut spec = spectral_transform(self, Direction::Forward);
        let grid = self.grid.clone();
        spec.values
            .iter_mut()
            .enumerate()
            .for_each(|(i, z)| *z *= m(grid.wavevector(i)));
        spectral_transform(&spec, Direction::Inverse)
    }

    /// First moment `sum x |f|^2 / sum |f|^2` (no minimum image).
    pub fn position_centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        let mut total = 0.0;
        for (i, z) in self.values.iter().enumerate() {
            let w = z.norm_sqr();
            let x = self.grid.point(i);
            total += w;
            for a in 0..3 {
                c[a] += w * x[a];
            }
        }
        c.map(|v| v / total)
    }

    /// First moment of `|f_hat|^2` in frequency.
    pub fn momentum_centroid(&self) -> Vec3 {
        let spec = spectral_transform(self, Direction::Forward);
        let mut c = [0.0; 3];
        let mut total = 0.0;
        for (i, z) in spec.values.iter().enumerate() {
            let w = z.norm_sqr();
            let k = self.grid.wavevector(i);
            total += w;
            for a in 0..3 {
                c[a] += w * k[a];
            }
        }
        c.map(|v| v / total)
    }
}

/// Two components on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinorField {
    pub upper: ComplexField,
    pub lower: ComplexField,
}

impl SpinorField {
    pub fn new(upper: ComplexField, lower: ComplexField) -> Result<Self> {
        upper.grid().ensure_same(lower.grid())?;
        Ok(Self { upper, lower })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            upper: ComplexField::zeros(grid),
            lower: ComplexField::zeros(grid),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.upper.grid()
    }

    pub fn norm(&self) -> f64 {
        (self.upper.norm().powi(2) + self.lower.norm().powi(2)).sqrt()
    }

    pub fn inner(&self, other: &SpinorField) -> C64 {
        self.upper.inner(&other.upper) + self.lower.inner(&other.lower)
    }

    pub fn axpy(&mut self, a: C64, other: &SpinorField) {
        self.upper.axpy(a, &other.upper);
        self.lower.axpy(a, &other.lower);
    }

    pub fn sub(&self, other: &SpinorField) -> Self {
        Self {
            upper: self.upper.sub(&other.upper),
            lower: self.lower.sub(&other.lower),
        }
    }

    pub fn scale(&mut self, a: C64) {
        self.upper.scale(a);
        self.lower.scale(a);
    }

    pub fn is_finite(&self) -> bool {
        self.upper.is_finite() && self.lower.is_finite()
    }

    pub fn shell_mass(&self, mask: &[bool]) -> f64 {
        let mu = self.upper.norm().powi(2);
        let ml = self.lower.norm().powi(2);
        let total = mu + ml;
        if total == 0.0 {
            return 0.0;
        }
        (self.upper.shell_mass(mask) * mu + self.lower.shell_mass(mask) * ml) / total
    }
}

// ---------------------------------------------------------------------------
// Discrete Fourier transform

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

type PlanCache = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<PlanCache> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

fn batched(fft: &Arc<dyn Fft<f64>>, data: &mut [C64], parallel: bool) {
    let n = fft.len();
    if parallel {
        let lines = (data.len() / n).max(1);
        let per_task = (lines / (4 * rayon::current_num_threads())).max(1);
        data.par_chunks_mut(per_task * n).for_each(|chunk| {
            let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            fft.process_with_scratch(chunk, &mut scratch);
        });
    } else {
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(data, &mut scratch);
    }
}

/// Unnormalized transform over every axis, in place.
pub(crate) fn fft_raw(grid: &Grid, data: &mut [C64], direction: Direction) {
    let n = grid.points();
    let fft = plan(n, direction == Direction::Inverse);
    let parallel = data.len() >= PARALLEL_THRESHOLD;
    batched(&fft, data, parallel);
    let mut work = Vec::new();
    for axis in 1..grid.dim() {
        let stride = n.pow(axis as u32);
        let block = stride * n;
        work.resize(block, C64::new(0.0, 0.0));
        for blk in data.chunks_mut(block) {
            // [n][stride] -> [stride][n] so lines along `axis` are contiguous
            for m in 0..n {
                for j in 0..stride {
                    work[j * n + m] = blk[m * stride + j];
                }
            }
            batched(&fft, &mut work, parallel);
            for m in 0..n {
                for j in 0..stride {
                    blk[m * stride + j] = work[j * n + m];
                }
            }
        }
    }
}

/// Unitary discrete Fourier transform. The output is indexed in FFT order,
/// so `grid.wavevector(i)` is the frequency of entry `i`.
pub fn spectral_transform(f: &ComplexField, direction: Direction) -> ComplexField {
    let mut out = f.clone();
    fft_raw(&f.grid, &mut out.values, direction);
    let s = 1.0 / (f.grid.len() as f64).sqrt();
    out.values.iter_mut().for_each(|z| *z *= s);
    out
}

// ---------------------------------------------------------------------------
// Norms

fn lp_norm_unchecked(f: &ComplexField, p: f64) -> f64 {
    if p.is_infinite() {
        return f.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    let h = f.grid.cell_volume();
    let s: f64 = if p == 2.0 {
        f.values.iter().map(|z| z.norm_sqr()).sum()
    } else if p == 1.0 {
        f.values.iter().map(|z| z.norm()).sum()
    } else {
        f.values.iter().map(|z| z.norm().powf(p)).sum()
    };
    (s * h).powf(1.0 / p)
}

/// `(sum |f|^p h^n)^{1/p}`, or the lattice maximum for `p = inf`.
pub fn lp_norm(f: &ComplexField, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Config(format!("L^p exponent must be >= 1, got {p}")));
    }
    Ok(lp_norm_unchecked(f, p))
}

/// `|| <xi>^k f_hat ||_2`.
pub fn sobolev_norm(f: &ComplexField, k: u32) -> f64 {
    if k == 0 {
        return lp_norm_unchecked(f, 2.0);
    }
    let spec = spectral_transform(f, Direction::Forward);
    let grid = f.grid();
    let s: f64 = spec
        .values
        .iter()
        .enumerate()
        .map(|(i, z)| z.norm_sqr() * (1.0 + norm2(&grid.wavevector(i))).powi(k as i32))
        .sum();
    (s * grid.cell_volume()).sqrt()
}

/// `|| <x - x0>^{-sigma} f ||_2` with minimum-image distances.
pub fn weighted_l2_norm(f: &ComplexField, center: &Vec3, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("weight exponent must be positive, got {sigma}")));
    }
    let grid = f.grid();
    let s: f64 = f
        .values
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let d = grid.torus_displacement(&grid.point(i), center);
            z.norm_sqr() * (1.0 + norm2(&d)).powf(-sigma)
        })
        .sum();
    Ok((s * grid.cell_volume()).sqrt())
}

// ---------------------------------------------------------------------------
// Space-time norms and admissible pairs

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissiblePair {
    /// Time exponent; `f64::INFINITY` for the mass pair.
    pub p: f64,
    pub q: f64,
}

impl AdmissiblePair {
    pub fn new(dim: usize, p: f64, q: f64) -> Result<Self> {
        let pair = Self { p, q };
        if !(p >= 2.0) || !(q >= 2.0) {
            return Err(Error::Config(format!("({p}, {q}) needs p >= 2 and q >= 2")));
        }
        if dim == 3 && q > 6.0 {
            return Err(Error::Config(format!("q = {q} exceeds 6 in three dimensions")));
        }
        if pair.scaling_defect(dim) > 1e-12 {
            return Err(Error::Config(format!(
                "({p}, {q}) violates 2/p + {dim}/q = {dim}/2"
            )));
        }
        Ok(pair)
    }

    /// Pair with the given space exponent; `q = inf` is allowed where admissible.
    pub fn from_q(dim: usize, q: f64) -> Result<Self> {
        let inv_p = 0.5 * (0.5 * dim as f64 - dim as f64 / q);
        let p = if inv_p == 0.0 { f64::INFINITY } else { 1.0 / inv_p };
        Self::new(dim, p, q)
    }

    /// `|2/p + n/q - n/2|`.
    pub fn scaling_defect(&self, dim: usize) -> f64 {
        let n = dim as f64;
        (2.0 / self.p + n / self.q - 0.5 * n).abs()
    }

    pub fn label(&self) -> String {
        let fmt = |x: f64| {
            if x.is_infinite() {
                "inf".to_string()
            } else {
                // 1/(1/6) lands on 5.999999999999999
                format!("{}", (x * 1e9).round() / 1e9)
            }
        };
        format!("({},{})", fmt(self.p), fmt(self.q))
    }
}

/// Admissible pairs: the mass pair first, then (in 3D) the endpoint `(2, 6)`,
/// then interior pairs starting from `q = 3`.
pub fn list_admissible_pairs(dim: usize, count: usize) -> Result<Vec<AdmissiblePair>> {
    if count < 1 {
        return Err(Error::Config("pair count must be at least 1".into()));
    }
    if !(1..=3).contains(&dim) {
        return Err(Error::Config(format!("unsupported dimension {dim}")));
    }
    let mut qs: Vec<f64> = vec![2.0];
    match dim {
        3 => qs.extend([6.0, 3.0, 4.0, 2.5, 5.0, 2.25, 5.5, 3.5, 4.5]),
        // interior exponents only: the n = 1 extreme (4, inf) and the n = 2
        // endpoint (2, inf) are excluded
        _ => qs.extend([4.0, 6.0, 3.0, 10.0, 8.0, 5.0, 12.0]),
    }
    if count > qs.len() {
        return Err(Error::Config(format!(
            "at most {} pairs are tabulated in dimension {dim}",
            qs.len()
        )));
    }
    qs.into_iter()
        .take(count)
        .map(|q| AdmissiblePair::from_q(dim, q))
        .collect()
}

/// `(sum_t ||psi(t)||_q^p dt)^{1/p}` by the trapezoid rule over the given
/// samples of `||psi(t)||_q`, or the maximum for `p = inf`.
pub fn mixed_norm_from_samples(times: &[f64], spatial: &[f64], p: f64) -> Result<f64> {
    if times.len() < 3 || times.len() != spatial.len() {
        return Err(Error::InsufficientData(format!(
            "need at least 3 snapshots, got {}",
            times.len()
        )));
    }
    if p.is_infinite() {
        return Ok(spatial.iter().copied().fold(0.0, f64::max));
    }
    let mut integral = 0.0;
    for w in 0..times.len() - 1 {
        let dt = times[w + 1] - times[w];
        integral += 0.5 * dt * (spatial[w].powf(p) + spatial[w + 1].powf(p));
    }
    Ok(integral.powf(1.0 / p))
}

pub fn mixed_spacetime_norm(traj: &Trajectory<ComplexField>, pair: AdmissiblePair) -> Result<f64> {
    if traj.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 snapshots, got {}",
            traj.len()
        )));
    }
    let spatial: Vec<f64> = traj
        .states()
        .iter()
        .map(|f| lp_norm(f, pair.q))
        .collect::<Result<_>>()?;
    mixed_norm_from_samples(traj.times(), &spatial, pair.p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &Grid, seed: u64) -> ComplexField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len())
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        ComplexField::from_values(grid, values).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let g = Grid::new(1, 64, 40.0).unwrap();
        assert_eq!(g.spacing(), 0.625);

        let g = Grid::new(3, 16, 16.0).unwrap();
        assert_eq!(g.len(), 4096);
        assert!((g.frequency_step() - 2.0 * PI / 16.0).abs() < 1e-15);

        let g = Grid::new(2, 128, 80.0).unwrap();
        assert_eq!(g.coordinate(0), -40.0);
        assert_eq!(g.coordinate(127), 39.375);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::new(1, 48, 10.0).is_err());
        assert!(Grid::new(1, 8, 10.0).is_err());
        assert!(Grid::new(1, 64, 0.0).is_err());
        assert!(Grid::new(1, 64, -3.0).is_err());
        assert!(Grid::new(4, 64, 3.0).is_err());
    }

    #[test]
    fn frequency_lattice_closed_under_negation_except_nyquist() {
        let g = Grid::new(1, 32, 10.0).unwrap();
        let freqs: Vec<f64> = (0..32).map(|j| g.frequency(j)).collect();
        let unmatched: Vec<f64> = freqs
            .iter()
            .filter(|&&k| !freqs.iter().any(|&m| (m + k).abs() < 1e-12))
            .copied()
            .collect();
        assert_eq!(unmatched.len(), 1);
        assert!((unmatched[0] + 16.0 * g.frequency_step()).abs() < 1e-12);
    }

    #[test]
    fn constant_field_transforms_to_delta() {
        for dim in 1..=3 {
            let g = Grid::new(dim, 16, 7.0).unwrap();
            let f = ComplexField::from_fn(&g, |_| C64::new(1.0, 0.0));
            let spec = spectral_transform(&f, Direction::Forward);
            let expected = (16f64).powf(dim as f64 / 2.0);
            assert!((spec.values()[0] - expected).norm() < 1e-10);
            let rest: f64 = spec.values()[1..].iter().map(|z| z.norm()).sum();
            assert!(rest < 1e-10);
        }
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let g = Grid::new(2, 32, 5.0).unwrap();
        let f = random_field(&g, 3);
        let back = spectral_transform(&spectral_transform(&f, Direction::Forward), Direction::Inverse);
        let err = back.sub(&f).norm() / f.norm();
        assert!(err < 1e-12, "{err}");
    }

    /// Direct-summation DFT oracle for a single plane wave on a small grid.
    #[test]
    fn plane_wave_hits_single_mode() {
        let g = Grid::new(2, 16, 9.0).unwrap();
        let k0 = [3.0 * g.frequency_step(), -5.0 * g.frequency_step(), 0.0];
        let f = ComplexField::from_fn(&g, |x| C64::from_polar(1.0, dot(&x, &k0)));
        let fast = spectral_transform(&f, Direction::Forward);
        let n = g.len();
        for m in 0..n {
            let xi = g.wavevector(m);
            let mut acc = C64::new(0.0, 0.0);
            for (j, z) in f.values().iter().enumerate() {
                let mj = g.multi_index(j);
                let mm = g.multi_index(m);
                let phase = -2.0 * PI * ((mj[0] * mm[0] + mj[1] * mm[1]) as f64) / 16.0;
                acc += z * C64::from_polar(1.0, phase);
            }
            acc /= (n as f64).sqrt();
            assert!((acc - fast.values()[m]).norm() < 1e-10);
            let is_k0 = (xi[0] - k0[0]).abs() < 1e-9 && (xi[1] - k0[1]).abs() < 1e-9;
            if is_k0 {
                assert!((acc.norm() - (n as f64).sqrt()).abs() < 1e-9);
            } else {
                assert!(acc.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn lp_norm_cases() {
        let g = Grid::new(2, 16, 8.0).unwrap();
        let zero = ComplexField::zeros(&g);
        for p in [1.0, 2.0, 3.5, f64::INFINITY] {
            assert_eq!(lp_norm(&zero, p).unwrap(), 0.0);
        }
        let mut cell = ComplexField::zeros(&g);
        cell.values_mut()[37] = C64::new(1.0, 0.0);
        let h = g.spacing();
        for p in [1.0, 2.0, 4.0] {
            let expected = h.powf(2.0 / p);
            assert!((lp_norm(&cell, p).unwrap() - expected).abs() < 1e-14);
        }
        assert!(lp_norm(&cell, 0.5).is_err());
    }

    #[test]
    fn gaussian_l2_norm_closed_form() {
        let g = Grid::new(1, 1024, 40.0).unwrap();
        let f = ComplexField::from_real(&g, |x| (-x[0] * x[0] / 2.0).exp());
        let n = lp_norm(&f, 2.0).unwrap();
        assert!((n - PI.powf(0.25)).abs() < 1e-8);
    }

    #[test]
    fn sobolev_zero_matches_l2_and_plane_wave() {
        let g = Grid::new(1, 64, 12.0).unwrap();
        let f = random_field(&g, 9);
        assert!((sobolev_norm(&f, 0) - lp_norm(&f, 2.0).unwrap()).abs() < 1e-12);

        let k0 = 4.0 * g.frequency_step();
        let mut pw = ComplexField::from_fn(&g, |x| C64::from_polar(1.0, k0 * x[0]));
        pw.normalize();
        let expected = (1.0 + k0 * k0).sqrt();
        assert!((sobolev_norm(&pw, 1) - expected).abs() < 1e-12);
    }

    /// Direct-summation oracle: continuous Fourier transform of the Gaussian
    /// sampled on the frequency lattice, quadrature of `(1+xi^2)|g_hat|^2`.
    #[test]
    fn sobolev_gaussian_matches_direct_summation() {
        let g = Grid::new(1, 256, 40.0).unwrap();
        let f = ComplexField::from_real(&g, |x| (-x[0] * x[0] / 2.0).exp());
        let h = g.spacing();
        let dk = g.frequency_step();
        let mut acc = 0.0;
        for m in 0..g.points() {
            let xi = g.frequency(m);
            let mut ghat = C64::new(0.0, 0.0);
            for j in 0..g.points() {
                let x = g.coordinate(j);
                ghat += (-x * x / 2.0).exp() * C64::from_polar(1.0, -xi * x);
            }
            ghat *= h / (2.0 * PI).sqrt();
            acc += (1.0 + xi * xi) * ghat.norm_sqr() * dk;
        }
        let oracle = acc.sqrt();
        let got = sobolev_norm(&f, 1);
        assert!(((got - oracle) / oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn weighted_norm_cases() {
        let g = Grid::new(1, 512, 60.0).unwrap();
        assert_eq!(weighted_l2_norm(&ComplexField::zeros(&g), &[0.0; 3], 2.0).unwrap(), 0.0);

        let mut cell = ComplexField::zeros(&g);
        cell.values_mut()[300] = C64::new(1.0, 0.0);
        let x0 = g.point(300);
        let w = weighted_l2_norm(&cell, &x0, 3.0).unwrap();
        assert!((w - g.spacing().sqrt()).abs() < 1e-15);

        // direct quadrature oracle over a wide window in R (no wrap needed)
        let f = ComplexField::from_real(&g, |x| (-x[0] * x[0] / 2.0).exp());
        let got = weighted_l2_norm(&f, &[10.0, 0.0, 0.0], 2.0).unwrap();
        let dx = 1e-3;
        let mut acc = 0.0_f64;
        let mut x = -30.0_f64;
        while x <= 30.0 {
            acc += (-x * x).exp() * (1.0 + (x - 10.0) * (x - 10.0)).powf(-2.0) * dx;
            x += dx;
        }
        let oracle = acc.sqrt();
        assert!(((got - oracle) / oracle).abs() < 1e-8, "{got} vs {oracle}");
        assert!(weighted_l2_norm(&f, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn admissible_pairs_tables() {
        let p3 = list_admissible_pairs(3, 3).unwrap();
        assert!(p3.iter().any(|p| p.p.is_infinite() && p.q == 2.0));
        assert!(p3.iter().any(|p| p.p == 2.0 && p.q == 6.0));
        assert!(p3.iter().any(|p| (p.p - 4.0).abs() < 1e-12 && p.q == 3.0));
        let p1 = list_admissible_pairs(1, 2).unwrap();
        assert!(p1.iter().any(|p| p.p.is_infinite() && p.q == 2.0));
        for dim in 1..=3 {
            let all = list_admissible_pairs(dim, 8).unwrap();
            for pair in all {
                assert!(pair.scaling_defect(dim) < 1e-12);
                assert!(pair.p >= 2.0);
            }
        }
        assert!(list_admissible_pairs(3, 0).is_err());
        assert!(AdmissiblePair::new(3, 2.0, 7.0).is_err());
    }

    #[test]
    fn mixed_norm_rejects_short_series() {
        assert!(mixed_norm_from_samples(&[0.0, 1.0], &[1.0, 1.0], 2.0).is_err());
        let v = mixed_norm_from_samples(&[0.0, 1.0, 2.0], &[3.0, 3.0, 3.0], f64::INFINITY).unwrap();
        assert_eq!(v, 3.0);
        let v = mixed_norm_from_samples(&[0.0, 1.0, 2.0], &[0.0; 3], 2.0).unwrap();
        assert_eq!(v, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn transform_is_isometric(seed in 0u64..1000, dim in 1usize..=3) {
                let g = Grid::new(dim, 16, 6.0).unwrap();
                let f = random_field(&g, seed);
                let fh = spectral_transform(&f, Direction::Forward);
                prop_assert!((fh.norm() - f.norm()).abs() < 1e-12 * f.norm());
            }

            #[test]
            fn holder_and_weight_bounds(seed in 0u64..1000, sigma in 0.1f64..4.0) {
                let g = Grid::new(1, 64, 10.0).unwrap();
                let f = random_field(&g, seed);
                let l1 = lp_norm(&f, 1.0).unwrap();
                let l2 = lp_norm(&f, 2.0).unwrap();
                let linf = lp_norm(&f, f64::INFINITY).unwrap();
                prop_assert!(l2 <= linf.sqrt() * l1.sqrt() * (1.0 + 1e-10));
                let w = weighted_l2_norm(&f, &[1.3, 0.0, 0.0], sigma).unwrap();
                prop_assert!(w <= l2 * (1.0 + 1e-12));
                prop_assert!((sobolev_norm(&f, 0) - l2).abs() < 1e-12);
            }
        }
    }
}

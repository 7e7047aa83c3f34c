//! Scalar and matrix charge-transfer models: rigidly moving, exponentially
//! decaying wells and their evaluation on the periodic grid.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldgrid::{dot, norm2, ComplexField, Grid, Vec3, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// `exp(-|x|^2 / (2 w^2))`
    Gaussian,
    /// `exp(-(<x>_w - w) / w)` with `<x>_w = (|x|^2 + w^2)^{1/2}`
    ExponentialSmooth,
}

impl Shape {
    pub fn profile(self, r2: f64, width: f64) -> f64 {
        match self {
            Shape::Gaussian => (-r2 / (2.0 * width * width)).exp(),
            Shape::ExponentialSmooth => (-((r2 + width * width).sqrt() - width) / width).exp(),
        }
    }
}

/// A scalar profile `-depth * shape(x)`; used for wells and for the matrix
/// entries `U` and `W`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub shape: Shape,
    pub depth: f64,
    pub width: f64,
}

impl Profile {
    pub fn value(&self, r2: f64) -> f64 {
        if self.depth == 0.0 {
            return 0.0;
        }
        -self.depth * self.shape.profile(r2, self.width)
    }

    fn check(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.depth.is_finite() {
            return Err(Error::Config(format!("invalid profile {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub shape: Shape,
    pub depth: f64,
    pub width: f64,
    pub center: Vec3,
    pub velocity: Vec3,
}

impl PotentialSpec {
    pub fn profile(&self) -> Profile {
        Profile {
            shape: self.shape,
            depth: self.depth,
            width: self.width,
        }
    }

    /// Center of the well at time `t`.
    pub fn position(&self, t: f64) -> Vec3 {
        let mut c = self.center;
        for (a, v) in c.iter_mut().zip(self.velocity) {
            *a += v * t;
        }
        c
    }

    /// Same well frozen at its initial position.
    pub fn stationary(&self) -> Self {
        Self {
            velocity: [0.0; 3],
            ..self.clone()
        }
    }

    /// Adds `V(x - y - v t)` to `out`, minimum image on the torus.
    pub fn accumulate(&self, t: f64, grid: &Grid, out: &mut [f64]) {
        if self.depth == 0.0 {
            return;
        }
        let c = self.position(t);
        let profile = self.profile();
        for (i, o) in out.iter_mut().enumerate() {
            let d = grid.torus_displacement(&grid.point(i), &c);
            *o += profile.value(norm2(&d));
        }
    }
}

/// `V(x - y - v t)` as a real-valued field.
pub fn potential_field(spec: &PotentialSpec, t: f64, grid: &Grid) -> ComplexField {
    let mut v = vec![0.0; grid.len()];
    spec.accumulate(t, grid, &mut v);
    ComplexField::from_values(grid, v.into_iter().map(|x| C64::new(x, 0.0)).collect())
        .expect("potential values are finite")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChargeTransferModel {
    pub grid: Grid,
    pub potentials: Vec<PotentialSpec>,
}

impl ChargeTransferModel {
    pub fn new(grid: Grid, potentials: Vec<PotentialSpec>) -> Self {
        Self { grid, potentials }
    }

    pub fn free(grid: Grid) -> Self {
        Self {
            grid,
            potentials: Vec::new(),
        }
    }

    /// Sum of all moving potentials at time `t`.
    pub fn total_potential(&self, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for spec in &self.potentials {
            spec.accumulate(t, &self.grid, out);
        }
    }

    pub fn with_grid(&self, grid: Grid) -> Self {
        Self {
            grid,
            potentials: self.potentials.clone(),
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.potentials
            .iter()
            .map(|p| norm2(&p.velocity).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixPotentialSpec {
    pub u: Profile,
    pub w: Profile,
    pub alpha: f64,
    pub gamma: f64,
    pub center: Vec3,
    pub velocity: Vec3,
}

impl MatrixPotentialSpec {
    /// `theta(t, x) = (|v|^2 + alpha^2) t + 2 x.v + gamma`
    pub fn theta(&self, t: f64, x: &Vec3) -> f64 {
        (norm2(&self.velocity) + self.alpha * self.alpha) * t + 2.0 * dot(x, &self.velocity) + self.gamma
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let mut c = self.center;
        for (a, v) in c.iter_mut().zip(self.velocity) {
            *a += v * t;
        }
        c
    }
}

/// Pointwise 2x2 matrix field, entries stored per lattice point.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixField {
    pub grid: Grid,
    pub entries: Vec<[[C64; 2]; 2]>,
}

impl MatrixField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            entries: vec![[[C64::new(0.0, 0.0); 2]; 2]; grid.len()],
        }
    }

    pub fn entry(&self, r: usize, c: usize) -> ComplexField {
        ComplexField::from_values(&self.grid, self.entries.iter().map(|m| m[r][c]).collect())
            .expect("matrix entries are finite")
    }
}

/// Adds `V(t, x - vt)` of one matrix potential to `out`; the phase is taken
/// at the shifted argument, `theta(t, x - v t)`.
pub fn accumulate_matrix_potential(spec: &MatrixPotentialSpec, t: f64, out: &mut MatrixField) {
    let grid = out.grid.clone();
    let c = spec.position(t);
    let mut shift = spec.velocity;
    shift.iter_mut().for_each(|s| *s *= t);
    for (i, m) in out.entries.iter_mut().enumerate() {
        let x = grid.point(i);
        let r2 = norm2(&grid.torus_displacement(&x, &c));
        let u = spec.u.value(r2);
        let w = spec.w.value(r2);
        let xs = [x[0] - shift[0], x[1] - shift[1], x[2] - shift[2]];
        let phase = C64::from_polar(1.0, spec.theta(t, &xs));
        m[0][0] += u;
        m[0][1] += -phase * w;
        m[1][0] += phase.conj() * w;
        m[1][1] += -u;
    }
}

/// `[[U, -e^{i theta} W], [e^{-i theta} W, -U]]` evaluated at `x - v t`.
pub fn matrix_potential_field(spec: &MatrixPotentialSpec, t: f64, grid: &Grid) -> MatrixField {
    let mut out = MatrixField::zeros(grid);
    accumulate_matrix_potential(spec, t, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixChargeTransferModel {
    pub grid: Grid,
    pub potentials: Vec<MatrixPotentialSpec>,
}

impl MatrixChargeTransferModel {
    pub fn new(grid: Grid, potentials: Vec<MatrixPotentialSpec>) -> Self {
        Self { grid, potentials }
    }

    pub fn total_potential(&self, t: f64, out: &mut MatrixField) {
        out.entries
            .iter_mut()
            .for_each(|m| *m = [[C64::new(0.0, 0.0); 2]; 2]);
        for spec in &self.potentials {
            accumulate_matrix_potential(spec, t, out);
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

/// Structural view shared by scalar and matrix models.
pub trait ModelGeometry {
    fn grid(&self) -> &Grid;
    /// `(velocity, decay width, amplitude, center)` per potential.
    fn wells(&self) -> Vec<WellGeometry>;
}

#[derive(Clone, Debug)]
pub struct WellGeometry {
    pub velocity: Vec3,
    pub center: Vec3,
    pub profiles: Vec<Profile>,
}

impl ModelGeometry for ChargeTransferModel {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn wells(&self) -> Vec<WellGeometry> {
        self.potentials
            .iter()
            .map(|p| WellGeometry {
                velocity: p.velocity,
                center: p.center,
                profiles: vec![p.profile()],
            })
            .collect()
    }
}

impl ModelGeometry for MatrixChargeTransferModel {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn wells(&self) -> Vec<WellGeometry> {
        self.potentials
            .iter()
            .map(|p| WellGeometry {
                velocity: p.velocity,
                center: p.center,
                profiles: vec![p.u, p.w],
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub distinct_velocities: bool,
    pub commensurate: bool,
    /// Pairs of potentials whose velocities are parallel but unequal.
    pub parallel_pairs: Vec<(usize, usize)>,
    /// `max |V|` on the box boundary, per potential at `t = 0`.
    pub boundary_magnitude: Vec<f64>,
    /// `(L/2 - packet radius) / max |v|`; infinite when nothing moves.
    pub wrap_horizon: f64,
    pub warnings: Vec<String>,
}

/// Closed-form `max |V|` on the box faces `|x_a| = L/2`.
fn boundary_magnitude(grid: &Grid, well: &WellGeometry) -> f64 {
    let edge = 0.5 * grid.length();
    let mut nearest = f64::INFINITY;
    for a in 0..grid.dim() {
        let c = well.center[a] - grid.length() * (well.center[a] / grid.length()).round();
        nearest = nearest.min(edge - c.abs());
    }
    let r = nearest.max(0.0);
    well.profiles
        .iter()
        .map(|p| p.value(r * r).abs())
        .fold(0.0, f64::max)
}

/// Structural checks: distinct and commensurate velocities, boundary decay
/// of each potential and the wrap-safe horizon for a packet of the given
/// radius.
pub fn validate_model<M: ModelGeometry>(model: &M, packet_radius: f64) -> Result<ValidationReport> {
    let grid = model.grid();
    let wells = model.wells();
    for w in &wells {
        for p in &w.profiles {
            p.check()?;
        }
    }
    for (i, a) in wells.iter().enumerate() {
        if !grid.is_commensurate(&a.velocity) {
            return Err(Error::NonCommensurate {
                velocity: a.velocity[..grid.dim()].to_vec(),
                suggestion: grid.snap_velocity(&a.velocity)[..grid.dim()].to_vec(),
            });
        }
        for (j, b) in wells.iter().enumerate().skip(i + 1) {
            let diff = (0..3).map(|k| (a.velocity[k] - b.velocity[k]).abs()).fold(0.0, f64::max);
            if diff < 1e-12 {
                return Err(Error::DuplicateVelocity { first: i, second: j });
            }
        }
    }
    let mut parallel_pairs = Vec::new();
    let mut warnings = Vec::new();
    for (i, a) in wells.iter().enumerate() {
        for (j, b) in wells.iter().enumerate().skip(i + 1) {
            let na = norm2(&a.velocity).sqrt();
            let nb = norm2(&b.velocity).sqrt();
            if na > 0.0 && nb > 0.0 {
                let cos = dot(&a.velocity, &b.velocity) / (na * nb);
                if (cos.abs() - 1.0).abs() < 1e-12 {
                    parallel_pairs.push((i, j));
                    let msg = format!("velocities of potentials {i} and {j} are parallel");
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
    }
    let boundary: Vec<f64> = wells.iter().map(|w| boundary_magnitude(grid, w)).collect();
    let vmax = wells
        .iter()
        .map(|w| norm2(&w.velocity).sqrt())
        .fold(0.0, f64::max);
    let wrap_horizon = if vmax > 0.0 {
        ((0.5 * grid.length() - packet_radius) / vmax).max(0.0)
    } else {
        f64::INFINITY
    };
    Ok(ValidationReport {
        distinct_velocities: true,
        commensurate: true,
        parallel_pairs,
        boundary_magnitude: boundary,
        wrap_horizon,
        warnings,
    })
}

//! Galilei boosts, their spinor version and the diagonal matrix modulation.
//!
//! The boost acts as
//!
//! ```text
//! (g f)(x) = e^{i|v|^2 t/2} e^{i (x - y - vt).v} f(x - y - vt)
//!          = e^{-i|v|^2 t/2} e^{-i y.v} e^{i x.v} f(x - y - vt)
//! ```
//!
//! i.e. modulation by `e^{ix.v}` followed by the translation `e^{-i(y+vt).p}`.
//! With this ordering the free flow intertwines exactly,
//! `g(t) e^{itΔ/2} = e^{itΔ/2} g(0)`, and `g_v(t)^{-1} = g_{-v}(t)` for
//! `y = 0`. A packet centered at the origin with zero mean momentum is moved
//! to `y + vt` with mean momentum `v`. Translations are applied as exact
//! Fourier phases, so arbitrary real shifts are spectrally exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldgrid::{
    dot, fft_raw, norm2, ComplexField, Direction, Grid, SpinorField, Vec3, C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostSpec {
    pub velocity: Vec3,
    pub offset: Vec3,
    pub time: f64,
}

impl BoostSpec {
    pub fn new(velocity: Vec3, offset: Vec3, time: f64) -> Self {
        Self {
            velocity,
            offset,
            time,
        }
    }

    /// Pure velocity boost (`y = 0`).
    pub fn moving(velocity: Vec3, time: f64) -> Self {
        Self::new(velocity, [0.0; 3], time)
    }

    /// The same boost evaluated at another time.
    pub fn at(&self, time: f64) -> Self {
        Self { time, ..*self }
    }

    /// `y + v t`
    pub fn displacement(&self) -> Vec3 {
        let mut d = self.offset;
        for a in 0..3 {
            d[a] += self.velocity[a] * self.time;
        }
        d
    }

    pub fn negated(&self) -> Self {
        Self {
            velocity: self.velocity.map(|v| -v),
            offset: self.offset.map(|y| -y),
            time: self.time,
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if !grid.is_commensurate(&self.velocity) {
            return Err(Error::NonCommensurate {
                velocity: self.velocity[..grid.dim()].to_vec(),
                suggestion: grid.snap_velocity(&self.velocity)[..grid.dim()].to_vec(),
            });
        }
        Ok(())
    }
}

/// `f(x - a)` through the Fourier phase `e^{-i xi.a}`.
pub fn translate(f: &ComplexField, shift: &Vec3) -> ComplexField {
    if norm2(shift) == 0.0 {
        return f.clone();
    }
    let grid = f.grid().clone();
    let mut out = f.clone();
    let values = out.values_mut();
    fft_raw(&grid, values, Direction::Forward);
    let scale = 1.0 / grid.len() as f64;
    for (i, z) in values.iter_mut().enumerate() {
        *z *= C64::from_polar(scale, -dot(&grid.wavevector(i), shift));
    }
    fft_raw(&grid, values, Direction::Inverse);
    out
}

fn modulate(f: &mut ComplexField, velocity: &Vec3, origin: &Vec3, constant: f64) {
    let grid = f.grid().clone();
    for (i, z) in f.values_mut().iter_mut().enumerate() {
        let x = grid.point(i);
        let phase = dot(&x, velocity) - dot(origin, velocity) + constant;
        *z *= C64::from_polar(1.0, phase);
    }
}

/// `g_{v,y}(t) f`
pub fn galilei(f: &ComplexField, b: &BoostSpec) -> Result<ComplexField> {
    b.check(f.grid())?;
    let shift = b.displacement();
    let mut out = translate(f, &shift);
    let v2 = norm2(&b.velocity);
    modulate(&mut out, &b.velocity, &shift, 0.5 * v2 * b.time);
    Ok(out)
}

/// `g_{v,y}(t)^{-1} f = e^{-i|v|^2 t/2} e^{-i x.v} f(x + y + vt)`
pub fn galilei_inverse(f: &ComplexField, b: &BoostSpec) -> Result<ComplexField> {
    b.check(f.grid())?;
    let shift = b.displacement();
    let mut out = translate(f, &shift.map(|s| -s));
    let v2 = norm2(&b.velocity);
    modulate(&mut out, &b.velocity.map(|v| -v), &[0.0; 3], -0.5 * v2 * b.time);
    Ok(out)
}

/// The alternative boost `e^{-i y.v} g_{-v,-y}(t)` of the moving-frame
/// formula; for `y = 0` it coincides with `g_v(t)^{-1}`.
pub fn conjugated_boost(f: &ComplexField, b: &BoostSpec) -> Result<ComplexField> {
    let mut out = galilei(f, &b.negated())?;
    out.scale(C64::from_polar(1.0, -dot(&b.offset, &b.velocity)));
    Ok(out)
}

/// `M(t) = diag(e^{-i w/2}, e^{i w/2})` with `w = alpha^2 t + gamma`.
pub fn modulation(alpha: f64, gamma: f64, t: f64, s: &SpinorField) -> SpinorField {
    let omega = alpha * alpha * t + gamma;
    let mut out = s.clone();
    out.upper.scale(C64::from_polar(1.0, -0.5 * omega));
    out.lower.scale(C64::from_polar(1.0, 0.5 * omega));
    out
}

pub fn modulation_inverse(alpha: f64, gamma: f64, t: f64, s: &SpinorField) -> SpinorField {
    let omega = alpha * alpha * t + gamma;
    let mut out = s.clone();
    out.upper.scale(C64::from_polar(1.0, 0.5 * omega));
    out.lower.scale(C64::from_polar(1.0, -0.5 * omega));
    out
}

/// `G(t)(s1, s2) = (g s1, conj(g conj(s2)))`
pub fn galilei_spinor(s: &SpinorField, b: &BoostSpec) -> Result<SpinorField> {
    Ok(SpinorField {
        upper: galilei(&s.upper, b)?,
        lower: galilei(&s.lower.conj(), b)?.conj(),
    })
}

pub fn galilei_spinor_inverse(s: &SpinorField, b: &BoostSpec) -> Result<SpinorField> {
    Ok(SpinorField {
        upper: galilei_inverse(&s.upper, b)?,
        lower: galilei_inverse(&s.lower.conj(), b)?.conj(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagate::free_evolve;
    use crate::testutil::smooth_random_field;
    use std::f64::consts::PI;

    fn rel(a: &ComplexField, b: &ComplexField) -> f64 {
        a.sub(b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn identity_boost() {
        let g = Grid::new(2, 32, 12.0).unwrap();
        let f = smooth_random_field(&g, 1);
        let out = galilei(&f, &BoostSpec::moving([0.0; 3], 3.0)).unwrap();
        assert!(rel(&out, &f) < 1e-14);
    }

    #[test]
    fn pure_modulation_is_isometric() {
        let g = Grid::new(1, 128, 20.0).unwrap();
        let f = smooth_random_field(&g, 2);
        let v = [5.0 * g.frequency_step(), 0.0, 0.0];
        let out = galilei(&f, &BoostSpec::moving(v, 0.0)).unwrap();
        assert!((out.norm() - f.norm()).abs() < 1e-12 * f.norm());
        for (i, (a, b)) in out.values().iter().zip(f.values()).enumerate() {
            let x = g.point(i);
            assert!((a - b * C64::from_polar(1.0, v[0] * x[0])).norm() < 1e-12);
        }
    }

    /// Closed-form boosted Gaussian: center moves by `v t`, momentum by `v`.
    #[test]
    fn boosted_gaussian_moments() {
        let l = 40.0;
        let g = Grid::new(1, 512, l).unwrap();
        let f = ComplexField::from_real(&g, |x| (-x[0] * x[0] / 2.0).exp());
        let v = [2.0 * PI * 6.0 / l, 0.0, 0.0];
        let out = galilei(&f, &BoostSpec::moving(v, 2.0)).unwrap();
        let c = out.position_centroid();
        let k = out.momentum_centroid();
        assert!(((c[0] - 2.0 * v[0]) / (2.0 * v[0])).abs() < 1e-6);
        assert!(((k[0] - v[0]) / v[0]).abs() < 1e-6);
    }

    #[test]
    fn inverse_roundtrip_and_negated_velocity() {
        let g = Grid::new(2, 64, 24.0).unwrap();
        let f = smooth_random_field(&g, 5);
        let s = g.frequency_step();
        let b = BoostSpec::new([2.0 * s, -s, 0.0], [0.7, -1.1, 0.0], 1.9);
        let there = galilei(&f, &b).unwrap();
        let back = galilei_inverse(&there, &b).unwrap();
        assert!(rel(&back, &f) < 1e-12, "{}", rel(&back, &f));

        let b0 = BoostSpec::moving([2.0 * s, -s, 0.0], 1.9);
        let inv = galilei_inverse(&f, &b0).unwrap();
        let neg = galilei(&f, &b0.negated()).unwrap();
        assert!(rel(&inv, &neg) < 1e-12);

        // v = 0: translation by -a
        let ta = BoostSpec::new([0.0; 3], [1.5, 0.25, 0.0], 0.0);
        let inv = galilei_inverse(&f, &ta).unwrap();
        assert!(rel(&inv, &translate(&f, &[-1.5, -0.25, 0.0])) < 1e-12);
    }

    #[test]
    fn conjugated_boost_is_inverse_for_zero_offset() {
        let g = Grid::new(1, 128, 30.0).unwrap();
        let f = smooth_random_field(&g, 8);
        let b = BoostSpec::moving([3.0 * g.frequency_step(), 0.0, 0.0], 0.8);
        let a = conjugated_boost(&f, &b).unwrap();
        let c = galilei_inverse(&f, &b).unwrap();
        assert!(rel(&a, &c) < 1e-12);
    }

    #[test]
    fn free_flow_conjugacy() {
        let g = Grid::new(2, 64, 24.0).unwrap();
        let s = g.frequency_step();
        let f = smooth_random_field(&g, 11);
        let b = BoostSpec::new([3.0 * s, s, 0.0], [0.5, 0.0, 0.0], 0.0);
        let t = 1.7;
        let lhs = galilei(&free_evolve(&f, t), &b.at(t)).unwrap();
        let rhs = free_evolve(&galilei(&f, &b).unwrap(), t);
        assert!(lhs.sub(&rhs).norm() < 1e-10 * f.norm());
    }

    #[test]
    fn group_composition_at_zero_time() {
        let g = Grid::new(1, 128, 20.0).unwrap();
        let s = g.frequency_step();
        let f = smooth_random_field(&g, 4);
        let (v1, v2) = ([2.0 * s, 0.0, 0.0], [-5.0 * s, 0.0, 0.0]);
        let two = galilei(&galilei(&f, &BoostSpec::moving(v1, 0.0)).unwrap(), &BoostSpec::moving(v2, 0.0)).unwrap();
        let one = galilei(&f, &BoostSpec::moving([v1[0] + v2[0], 0.0, 0.0], 0.0)).unwrap();
        let overlap = two.inner(&one).norm() / (two.norm() * one.norm());
        assert!((overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_commensurate_velocity_rejected() {
        let g = Grid::new(1, 64, 10.0).unwrap();
        let f = smooth_random_field(&g, 0);
        assert!(galilei(&f, &BoostSpec::moving([0.3, 0.0, 0.0], 1.0)).is_err());
    }

    #[test]
    fn modulation_identities() {
        let g = Grid::new(1, 64, 10.0).unwrap();
        let s = SpinorField::new(smooth_random_field(&g, 1), smooth_random_field(&g, 2)).unwrap();
        let id = modulation(1.3, 0.0, 0.0, &s);
        assert!(id.sub(&s).norm() < 1e-15);
        let a = 0.9;
        let twice = modulation(a, 0.0, 0.4, &modulation(a, 0.0, 1.1, &s));
        let once = modulation(a, 0.0, 1.5, &s);
        assert!(twice.sub(&once).norm() < 1e-14);
        let m = modulation(a, 0.3, 2.0, &s);
        assert!((m.upper.norm() - s.upper.norm()).abs() < 1e-14);
        assert!((m.lower.norm() - s.lower.norm()).abs() < 1e-14);
        let back = modulation_inverse(a, 0.3, 2.0, &m);
        assert!(back.sub(&s).norm() < 1e-14);
    }

    #[test]
    fn spinor_boost_second_component() {
        let g = Grid::new(1, 128, 20.0).unwrap();
        let real = ComplexField::from_real(&g, |x| (-(x[0] - 1.0).powi(2)).exp());
        let s = SpinorField::new(real.clone(), real.clone()).unwrap();
        let v = [4.0 * g.frequency_step(), 0.0, 0.0];
        let t = 0.6;
        let b = BoostSpec::moving(v, t);
        let out = galilei_spinor(&s, &b).unwrap();
        let shifted = translate(&real, &[v[0] * t, 0.0, 0.0]);
        for (i, z) in out.lower.values().iter().enumerate() {
            let x = g.point(i);
            let direct = C64::from_polar(1.0, 0.5 * v[0] * v[0] * t - x[0] * v[0]) * shifted.values()[i];
            assert!((z - direct).norm() < 1e-12);
        }
        assert!((out.upper.norm() - s.upper.norm()).abs() < 1e-12);
        assert!((out.lower.norm() - s.lower.norm()).abs() < 1e-12);
        let id = galilei_spinor(&s, &BoostSpec::moving([0.0; 3], 0.0)).unwrap();
        assert!(id.sub(&s).norm() < 1e-14);
    }
}

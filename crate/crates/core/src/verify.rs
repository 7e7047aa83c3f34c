//! Estimate verification: decay fits and the reports that measure the
//! dispersive, weighted, Strichartz, energy, bound-overlap, decomposition,
//! smoothing and matrix-model properties along computed flows.
//!
//! Every report carries the fit window, a refinement delta (the headline
//! quantity recomputed at a coarser step or grid, relative change) and a list
//! of flags.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fieldgrid::{
    lp_norm, mixed_norm_from_samples, norm2, sobolev_norm, weighted_l2_norm, AdmissiblePair, ComplexField, Grid,
    SpinorField, Vec3, C64,
};
use crate::model::{ChargeTransferModel, MatrixField, MatrixPotentialSpec, PotentialSpec};
use crate::propagate::{
    evolve, evolve_matrix, evolve_observed, free_evolve, run_matrix, step_count, MatrixPotentialSource, State,
    Trajectory,
};
use crate::spectral::{
    biorthogonal_projection, channel_overlaps, moving_state, prepare_scattering_state, project_point,
    BiorthogonalPair, Part, SpectralFamily,
};
use crate::symmetry::{galilei_spinor, galilei_spinor_inverse, modulation, modulation_inverse, BoostSpec};

/// Snapshots with more boundary-shell mass than this are excluded from fits.
pub const CONTAMINATION_LIMIT: f64 = 1e-6;
/// Relative refinement change above which a report is flagged unconverged.
pub const REFINEMENT_LIMIT: f64 = 0.1;

pub const FLAG_CONTAMINATED: &str = "boundary-contaminated";
pub const FLAG_UNCONVERGED: &str = "unconverged";
pub const FLAG_NON_DECAYING: &str = "non-decaying";
pub const FLAG_DIVERGENT: &str = "divergent";
pub const FLAG_NON_SATURATING: &str = "non-saturating";
pub const FLAG_ALREADY_ORTHOGONAL: &str = "already-orthogonal";
pub const FLAG_NOT_MONOTONE: &str = "not-monotone";
pub const FLAG_UNSTABLE: &str = "unstable";
pub const FLAG_GROWING: &str = "growing";

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    /// Slope of the fit: power `p` in `c t^p`, or rate `r` in `c e^{r t}`.
    pub exponent: f64,
    pub intercept: f64,
    pub window: [f64; 2],
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeriesPoint {
    pub t: f64,
    pub value: f64,
    pub boundary_shell_mass: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Provenance {
    pub model: String,
    pub grid: String,
    pub dt: f64,
}

impl Provenance {
    pub fn new(model: impl Into<String>, grid: &Grid, dt: f64) -> Self {
        Self {
            model: model.into(),
            grid: format!("n={} N={} L={}", grid.dim(), grid.points(), grid.length()),
            dt,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateReport {
    pub metric: String,
    pub values: BTreeMap<String, f64>,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
    pub window: [f64; 2],
    pub refinement_delta: Option<f64>,
    pub flags: Vec<String>,
    pub provenance: Provenance,
}

impl EstimateReport {
    fn new(metric: &str, provenance: Provenance) -> Self {
        Self {
            metric: metric.into(),
            values: BTreeMap::new(),
            series: Vec::new(),
            window: [0.0, 0.0],
            refinement_delta: None,
            flags: Vec::new(),
            provenance,
        }
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    fn set(&mut self, key: &str, v: f64) {
        self.values.insert(key.into(), v);
    }

    fn flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.flags.push(flag.into());
        }
    }

    fn refine(&mut self, fine: f64, coarse: f64) {
        let delta = (fine - coarse).abs() / fine.abs().max(1e-300);
        self.refinement_delta = Some(delta);
        if delta > REFINEMENT_LIMIT {
            self.flag(FLAG_UNCONVERGED);
        }
    }
}

/// Start and step of a propagation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub t_end: f64,
    pub dt: f64,
    pub stride: usize,
}

impl RunSpec {
    pub fn new(t_end: f64, dt: f64, stride: usize) -> Self {
        Self { t_end, dt, stride }
    }

    /// Same snapshot times with twice the step, if the stride allows it.
    pub fn coarser(&self) -> Option<Self> {
        (self.stride % 2 == 0).then(|| Self {
            t_end: self.t_end,
            dt: 2.0 * self.dt,
            stride: self.stride / 2,
        })
    }
}

// ---------------------------------------------------------------------------
// Fits

fn select(samples: &[(f64, f64)], window: (f64, f64), log_t: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::InsufficientData(format!("empty fit window [{lo}, {hi}]")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(t, v) in samples.iter().filter(|(t, _)| *t >= lo && *t <= hi) {
        if !(v > 0.0) {
            return Err(Error::InsufficientData(format!("nonpositive sample {v} at t = {t}")));
        }
        if log_t {
            if t <= 0.0 {
                continue;
            }
            xs.push(t.ln());
        } else {
            xs.push(t);
        }
        ys.push(v.ln());
    }
    if xs.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "{} samples in window [{lo}, {hi}], need at least 5",
            xs.len()
        )));
    }
    Ok((xs, ys))
}

fn least_squares(xs: &[f64], ys: &[f64], window: (f64, f64)) -> DecayFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let scale = ys.iter().map(|y| y.abs()).fold(1.0, f64::max);
    let r_squared = if ss_tot > 1e-24 * scale * scale * n {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 * scale * scale * n {
        1.0
    } else {
        0.0
    };
    DecayFit {
        exponent: slope,
        intercept,
        window: [window.0, window.1],
        r_squared,
        residuals,
    }
}

/// Least squares of `log v` against `log t` over the window.
pub fn fit_power_decay(samples: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let (xs, ys) = select(samples, window, true)?;
    Ok(least_squares(&xs, &ys, window))
}

/// Least squares of `log v` against `t`; the decay rate is `-exponent`.
pub fn fit_exponential_decay(samples: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let (xs, ys) = select(samples, window, false)?;
    Ok(least_squares(&xs, &ys, window))
}

// ---------------------------------------------------------------------------
// Helpers

fn clean_end<F: State>(traj: &Trajectory<F>) -> usize {
    traj.clean_len(CONTAMINATION_LIMIT)
}

fn series_of<F: State>(traj: &Trajectory<F>, values: &[f64]) -> Vec<SeriesPoint> {
    traj.times()
        .iter()
        .zip(values)
        .zip(traj.shell_mass())
        .map(|((&t, &value), &m)| SeriesPoint {
            t,
            value,
            boundary_shell_mass: m,
        })
        .collect()
}

fn cumulative_trapezoid(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in 1..times.len() {
        acc += 0.5 * (times[w] - times[w - 1]) * (values[w] + values[w - 1]);
        out.push(acc);
    }
    out
}

fn value_at(times: &[f64], cumulative: &[f64], t: f64) -> f64 {
    let i = times.iter().position(|&s| s >= t - 1e-12).unwrap_or(times.len() - 1);
    cumulative[i]
}

fn model_label(model: &ChargeTransferModel) -> String {
    if model.potentials.is_empty() {
        "free".into()
    } else {
        format!("{}-well charge transfer", model.potentials.len())
    }
}

fn run_model(model: &ChargeTransferModel, psi0: &ComplexField, run: &RunSpec) -> Result<Trajectory<ComplexField>> {
    evolve(model, psi0, 0.0, run.t_end, run.dt, run.stride)
}

// ---------------------------------------------------------------------------
// Dispersive decay

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Fits start here (default: an eighth of the clean window).
    pub fit_start: Option<f64>,
}

fn sup_series(traj: &Trajectory<ComplexField>) -> Result<Vec<f64>> {
    traj.states().iter().map(|f| lp_norm(f, f64::INFINITY)).collect()
}

fn dispersive_fit(traj: &Trajectory<ComplexField>, opts: &FitOptions) -> Result<(DecayFit, Vec<f64>)> {
    let sup = sup_series(traj)?;
    let end = clean_end(traj);
    if end < 2 {
        return Err(Error::InsufficientData("no contamination-free window".into()));
    }
    let t_clean = traj.times()[end - 1];
    let start = opts.fit_start.unwrap_or(t_clean / 8.0);
    let samples: Vec<(f64, f64)> = traj.times()[..end].iter().copied().zip(sup.iter().copied()).collect();
    Ok((fit_power_decay(&samples, (start, t_clean))?, sup))
}

/// Sup-norm decay of the flow from `psi0`, fitted as a power of `t`.
pub fn dispersive_report(
    model: &ChargeTransferModel,
    psi0: &ComplexField,
    run: &RunSpec,
    opts: &FitOptions,
) -> Result<(EstimateReport, DecayFit)> {
    let traj = run_model(model, psi0, run)?;
    let (fit, sup) = dispersive_fit(&traj, opts)?;
    let n = model.grid.dim() as f64;
    let l1 = lp_norm(psi0, 1.0)?;
    let mut report = EstimateReport::new("dispersive", Provenance::new(model_label(model), &model.grid, run.dt));
    let end = clean_end(&traj);
    let weighted_sup = traj.times()[..end]
        .iter()
        .zip(&sup)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t.powf(0.5 * n) * s / l1)
        .fold(0.0, f64::max);
    report.set("exponent", fit.exponent);
    report.set("expected_exponent", -0.5 * n);
    report.set("r_squared", fit.r_squared);
    report.set("sup_t_scaled", weighted_sup);
    report.window = fit.window;
    report.series = series_of(&traj, &sup);
    if end < traj.len() {
        report.flag(FLAG_CONTAMINATED);
    }
    if fit.r_squared < 0.5 || fit.exponent > -0.1 * n {
        report.flag(FLAG_NON_DECAYING);
    }
    if let Some(coarse) = run.coarser() {
        let ctraj = run_model(model, psi0, &coarse)?;
        let (cfit, _) = dispersive_fit(&ctraj, &FitOptions { fit_start: Some(fit.window[0]) })?;
        report.refine(fit.exponent, cfit.exponent);
    }
    Ok((report, fit))
}

// ---------------------------------------------------------------------------
// Weighted estimates

/// What the weighted operator estimate is probed against.
pub enum Dynamics<'a> {
    /// Full charge-transfer flow; probes are projected with the
    /// scattering-state preparation.
    Model {
        model: &'a ChargeTransferModel,
        families: &'a [SpectralFamily],
    },
    /// A single frozen well; probes are projected onto its continuous
    /// spectrum.
    Stationary {
        spec: &'a PotentialSpec,
        family: &'a SpectralFamily,
        grid: &'a Grid,
    },
}

impl Dynamics<'_> {
    fn model(&self) -> ChargeTransferModel {
        match self {
            Dynamics::Model { model, .. } => (*model).clone(),
            Dynamics::Stationary { spec, grid, .. } => ChargeTransferModel::new((*grid).clone(), vec![spec.stationary()]),
        }
    }

    fn project(&self, f: &ComplexField) -> Result<ComplexField> {
        match self {
            Dynamics::Model { model, families } => {
                if families.iter().all(|f| f.is_empty()) {
                    Ok(f.clone())
                } else {
                    Ok(prepare_scattering_state(f, model, families)?.field)
                }
            }
            Dynamics::Stationary { family, .. } => project_point(f, family, Part::Continuous),
        }
    }
}

/// Worst-case power fit of `|| <x - x0>^{-sigma} U(t) P <x - x1>^{-sigma} p ||`
/// over the given probes.
pub fn weighted_operator_report(
    dynamics: &Dynamics,
    probes: &[ComplexField],
    x0: &Vec3,
    x1: &Vec3,
    sigma: f64,
    run: &RunSpec,
    opts: &FitOptions,
) -> Result<(EstimateReport, DecayFit)> {
    let model = dynamics.model();
    let n = model.grid.dim() as f64;
    if sigma <= 0.5 * n {
        return Err(Error::Config(format!("weight exponent {sigma} must exceed n/2 = {}", 0.5 * n)));
    }
    if probes.is_empty() {
        return Err(Error::InsufficientData("no probes".into()));
    }
    let mut report = EstimateReport::new("weighted_operator", Provenance::new(model_label(&model), &model.grid, run.dt));
    let mut worst: Option<DecayFit> = None;
    let mut worst_series = Vec::new();
    let mut coarse_worst: Option<f64> = None;
    for (k, p) in probes.iter().enumerate() {
        let mut data = p.weighted(|x| {
            let d = model.grid.torus_displacement(&x, x1);
            (1.0 + norm2(&d)).powf(-0.5 * sigma)
        });
        data = dynamics.project(&data)?;
        let nd = data.norm();
        if nd == 0.0 {
            continue;
        }
        data.scale(C64::new(1.0 / nd, 0.0));
        let measure = |traj: &Trajectory<ComplexField>| -> Result<(DecayFit, Vec<f64>)> {
            let w: Vec<f64> = traj
                .states()
                .iter()
                .map(|f| weighted_l2_norm(f, x0, sigma))
                .collect::<Result<_>>()?;
            let end = clean_end(traj);
            if end < 2 {
                return Err(Error::InsufficientData("no contamination-free window".into()));
            }
            let t_clean = traj.times()[end - 1];
            let start = opts.fit_start.unwrap_or(t_clean / 8.0);
            let samples: Vec<(f64, f64)> = traj.times()[..end].iter().copied().zip(w.iter().copied()).collect();
            Ok((fit_power_decay(&samples, (start, t_clean))?, w))
        };
        let traj = run_model(&model, &data, run)?;
        let (fit, w) = measure(&traj)?;
        if clean_end(&traj) < traj.len() {
            report.flag(FLAG_CONTAMINATED);
        }
        report.set(&format!("probe{k}_exponent"), fit.exponent);
        report.set(&format!("probe{k}_initial"), w[0]);
        let is_worse = worst.as_ref().map_or(true, |f| fit.exponent > f.exponent);
        if is_worse {
            if let Some(coarse) = run.coarser() {
                let ctraj = run_model(&model, &data, &coarse)?;
                coarse_worst = Some(measure(&ctraj)?.0.exponent);
            }
            worst_series = series_of(&traj, &w);
            worst = Some(fit);
        }
    }
    let fit = worst.ok_or_else(|| Error::InsufficientData("every probe projected to zero".into()))?;
    report.set("exponent", fit.exponent);
    report.set("expected_exponent", -0.5 * n);
    report.set("r_squared", fit.r_squared);
    report.window = fit.window;
    report.series = worst_series;
    if let Some(c) = coarse_worst {
        report.refine(fit.exponent, c);
    }
    Ok((report, fit))
}

/// A curve `t -> x(t)` for the weighted space-time estimate.
#[derive(Clone, Debug, PartialEq)]
pub enum Curve {
    Fixed(Vec3),
    Linear { start: Vec3, velocity: Vec3 },
    /// `a + sum_k b_k sin(w_k t + p_k)` per component.
    Smooth { base: Vec3, terms: Vec<(Vec3, f64, f64)> },
}

impl Curve {
    pub fn at(&self, t: f64) -> Vec3 {
        match self {
            Curve::Fixed(x) => *x,
            Curve::Linear { start, velocity } => [0, 1, 2].map(|a| start[a] + velocity[a] * t),
            Curve::Smooth { base, terms } => {
                let mut x = *base;
                for (amp, w, p) in terms {
                    for a in 0..3 {
                        x[a] += amp[a] * (w * t + p).sin();
                    }
                }
                x
            }
        }
    }

    /// A seeded smooth curve with bounded excursion.
    pub fn random(dim: usize, scale: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let terms = (0..3)
            .map(|_| {
                let mut amp = [0.0; 3];
                for a in amp.iter_mut().take(dim) {
                    *a = rng.gen_range(-scale..scale);
                }
                (amp, rng.gen_range(0.05..0.5), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Curve::Smooth { base: [0.0; 3], terms }
    }
}

fn curve_integral(traj: &Trajectory<ComplexField>, curve: &Curve, sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let w2: Vec<f64> = traj
        .states()
        .iter()
        .zip(traj.times())
        .map(|(f, &t)| Ok(weighted_l2_norm(f, &curve.at(t), sigma)?.powi(2)))
        .collect::<Result<_>>()?;
    let cum = cumulative_trapezoid(traj.times(), &w2);
    Ok((w2, cum))
}

/// Cumulative `int_0^t || <x - x(s)>^{-sigma} psi(s) ||^2 ds`.
pub fn weighted_curve_report(
    model: &ChargeTransferModel,
    psi0: &ComplexField,
    curve: &Curve,
    sigma: f64,
    run: &RunSpec,
) -> Result<EstimateReport> {
    let n = model.grid.dim() as f64;
    if sigma <= 0.5 * n {
        return Err(Error::Config(format!("weight exponent {sigma} must exceed n/2 = {}", 0.5 * n)));
    }
    let traj = run_model(model, psi0, run)?;
    let (w2, cum) = curve_integral(&traj, curve, sigma)?;
    let mut report = EstimateReport::new("weighted_curve", Provenance::new(model_label(model), &model.grid, run.dt));
    fill_cumulative(&mut report, traj.times(), &cum, run.t_end);
    report.series = series_of(&traj, &w2);
    if clean_end(&traj) < traj.len() {
        report.flag(FLAG_CONTAMINATED);
    }
    if let Some(coarse) = run.coarser() {
        let ctraj = run_model(model, psi0, &coarse)?;
        let (_, ccum) = curve_integral(&ctraj, curve, sigma)?;
        report.refine(*cum.last().unwrap_or(&0.0), *ccum.last().unwrap_or(&0.0));
    }
    Ok(report)
}

fn fill_cumulative(report: &mut EstimateReport, times: &[f64], cum: &[f64], t_end: f64) {
    let total = *cum.last().unwrap_or(&0.0);
    let half = value_at(times, cum, 0.5 * t_end);
    report.set("integral_quarter", value_at(times, cum, 0.25 * t_end));
    report.set("integral_half", half);
    report.set("integral", total);
    let frac = if total > 0.0 { (total - half) / total } else { 0.0 };
    report.set("late_increment_fraction", frac);
    report.window = [0.0, t_end];
    if frac >= 0.05 {
        report.flag(FLAG_NON_SATURATING);
    }
}

// ---------------------------------------------------------------------------
// Strichartz and energy

fn strichartz_values(traj: &Trajectory<ComplexField>, pairs: &[AdmissiblePair]) -> Result<Vec<(f64, f64)>> {
    let end = clean_end(traj);
    if end < 3 {
        return Err(Error::InsufficientData("fewer than 3 contamination-free snapshots".into()));
    }
    let m0 = traj.first().map(|f| f.norm()).unwrap_or(0.0).max(1e-300);
    let half = (end + 1) / 2;
    pairs
        .iter()
        .map(|pair| {
            let spatial: Vec<f64> = traj.states()[..end]
                .iter()
                .map(|f| lp_norm(f, pair.q))
                .collect::<Result<_>>()?;
            let full = mixed_norm_from_samples(&traj.times()[..end], &spatial, pair.p)?;
            let early = mixed_norm_from_samples(&traj.times()[..half.max(3)], &spatial[..half.max(3)], pair.p)?;
            Ok((full / m0, early / m0))
        })
        .collect()
}

/// `|| psi ||_{L^p_t L^q_x} / || psi0 ||_2` per admissible pair over the clean
/// window, with an optional coarser-grid trajectory for refinement.
pub fn strichartz_report(
    traj: &Trajectory<ComplexField>,
    pairs: &[AdmissiblePair],
    coarse: Option<&Trajectory<ComplexField>>,
) -> Result<EstimateReport> {
    let values = strichartz_values(traj, pairs)?;
    let end = clean_end(traj);
    let mut report = EstimateReport::new("strichartz", Provenance::new(traj.label.clone(), &traj.grid, traj.dt));
    report.window = [traj.times()[0], traj.times()[end - 1]];
    for (pair, (full, early)) in pairs.iter().zip(&values) {
        let label = pair.label();
        report.set(&label, *full);
        report.set(&format!("{label}_half_window"), *early);
        if pair.p.is_finite() {
            // a non-decaying integrand grows the partial norm like T^{1/p}
            let constant_growth = 2f64.powf(1.0 / pair.p);
            let growth = full / early.max(1e-300);
            report.set(&format!("{label}_growth"), growth);
            if growth > 1.0 + 0.5 * (constant_growth - 1.0) {
                report.flag(&format!("{FLAG_DIVERGENT}:{label}"));
                report.flag(FLAG_DIVERGENT);
            }
        }
    }
    if end < traj.len() {
        report.flag(FLAG_CONTAMINATED);
    }
    if let Some(c) = coarse {
        let cv = strichartz_values(c, pairs)?;
        let delta = values
            .iter()
            .zip(&cv)
            .map(|(a, b)| (a.0 - b.0).abs() / a.0.abs().max(1e-300))
            .fold(0.0, f64::max);
        report.refinement_delta = Some(delta);
        if delta > REFINEMENT_LIMIT {
            report.flag(FLAG_UNCONVERGED);
        }
    }
    Ok(report)
}

fn energy_ratio(traj: &Trajectory<ComplexField>, k: u32) -> (Vec<f64>, f64, f64, f64) {
    let h: Vec<f64> = traj.states().iter().map(|f| sobolev_norm(f, k)).collect();
    let t_end = *traj.times().last().unwrap_or(&0.0);
    let t0 = traj.times()[0];
    let mid = 0.5 * (t0 + t_end);
    let mut early: f64 = 0.0;
    let mut late: f64 = 0.0;
    let (mut sup, mut at) = (0.0, t0);
    for (&t, &v) in traj.times().iter().zip(&h) {
        if t <= mid {
            early = early.max(v);
        }
        if t >= mid {
            late = late.max(v);
        }
        if v > sup {
            sup = v;
            at = t;
        }
    }
    (h, sup, at, late / early.max(1e-300))
}

/// `H^k` norm along the trajectory: supremum, where it occurs, and the
/// late/early supremum ratio.
pub fn energy_report(traj: &Trajectory<ComplexField>, k: u32, coarse: Option<&Trajectory<ComplexField>>) -> Result<EstimateReport> {
    if traj.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 snapshots".into()));
    }
    let (h, sup, at, ratio) = energy_ratio(traj, k);
    let mut report = EstimateReport::new(&format!("energy_h{k}"), Provenance::new(traj.label.clone(), &traj.grid, traj.dt));
    report.set("sup", sup);
    report.set("sup_time", at);
    report.set("initial", h[0]);
    report.set("sup_over_initial", sup / h[0].max(1e-300));
    report.set("late_growth_ratio", ratio);
    report.window = [traj.times()[0], *traj.times().last().unwrap()];
    report.series = series_of(traj, &h);
    if clean_end(traj) < traj.len() {
        report.flag(FLAG_CONTAMINATED);
    }
    if ratio > 1.05 {
        report.flag(FLAG_GROWING);
    }
    if let Some(c) = coarse {
        let (_, _, _, cr) = energy_ratio(c, k);
        report.refine(ratio, cr);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Bound-overlap decay

/// `beta(t) = sum_j || P_b(H_j, t) psi(t) ||` at every snapshot.
pub fn bound_overlap_series(
    model: &ChargeTransferModel,
    traj: &Trajectory<ComplexField>,
    families: &[SpectralFamily],
) -> Result<Vec<f64>> {
    traj.states()
        .iter()
        .zip(traj.times())
        .map(|(f, &t)| Ok(channel_overlaps(f, model, families, t)?.iter().sum()))
        .collect()
}

pub const OVERLAP_FLOOR: f64 = 1e-12;
/// Samples within this factor of the smallest post-peak value are treated
/// as the noise floor of the overlap series.
pub const FLOOR_FACTOR: f64 = 100.0;

/// Exponential fit of `beta(t)` after its maximum. Returns no fit when
/// `beta` never rises above the floor.
pub fn orthogonality_decay_report(
    model: &ChargeTransferModel,
    traj: &Trajectory<ComplexField>,
    families: &[SpectralFamily],
) -> Result<(EstimateReport, Option<DecayFit>)> {
    let beta = bound_overlap_series(model, traj, families)?;
    let mut report = EstimateReport::new("bound_overlap", Provenance::new(model_label(model), &model.grid, traj.dt));
    report.series = series_of(traj, &beta);
    let end = clean_end(traj);
    if end < traj.len() {
        report.flag(FLAG_CONTAMINATED);
    }
    report.set("initial", beta[0]);
    if beta.iter().all(|&b| b < OVERLAP_FLOOR) {
        report.flag(FLAG_ALREADY_ORTHOGONAL);
        return Ok((report, None));
    }
    let peak = (0..end.max(1)).max_by(|&a, &b| beta[a].total_cmp(&beta[b])).unwrap_or(0);
    // the fit stops where beta reaches its numerical floor
    let tail_min = beta[peak..end.max(peak + 1)].iter().copied().fold(f64::INFINITY, f64::min);
    let floor = OVERLAP_FLOOR.max(FLOOR_FACTOR * tail_min);
    let last = (peak..end.max(peak + 1)).take_while(|&i| beta[i] > floor).last().unwrap_or(peak);
    let times = traj.times();
    report.set("floor", floor);
    report.set("peak", beta[peak]);
    report.set("peak_time", times[peak]);
    report.set("transient_fraction", (times[peak] - times[0]) / (times[end.max(1) - 1] - times[0]).max(1e-300));
    let samples: Vec<(f64, f64)> = (peak..=last).map(|i| (times[i], beta[i])).collect();
    let fit = match fit_exponential_decay(&samples, (times[peak], times[last])) {
        Ok(f) => f,
        Err(_) => {
            report.flag(FLAG_NON_DECAYING);
            return Ok((report, None));
        }
    };
    report.window = fit.window;
    report.set("alpha", -fit.exponent);
    report.set("r_squared", fit.r_squared);
    let monotone = samples.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-9));
    report.set("monotone_after_transient", if monotone { 1.0 } else { 0.0 });
    if !monotone {
        report.flag(FLAG_NOT_MONOTONE);
    }
    if fit.exponent >= 0.0 || fit.r_squared < 0.9 || -fit.exponent * (fit.window[1] - fit.window[0]) < 1.0 {
        report.flag(FLAG_NON_DECAYING);
    }
    Ok((report, Some(fit)))
}

// ---------------------------------------------------------------------------
// Asymptotic decomposition

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    /// Coefficients per channel, in the order of the families.
    pub coefficients: Vec<Vec<Complex64>>,
    /// The same from a least-squares fit over the late window.
    pub windowed_coefficients: Vec<Vec<Complex64>>,
    #[serde(skip)]
    pub free_profile: ComplexField,
    pub free_profile_norm: f64,
    pub residual: Vec<SeriesPoint>,
    /// Residual curve with the opposite sign of the free channel.
    pub flipped_residual: Vec<f64>,
    pub t_late: f64,
    pub flags: Vec<String>,
}

impl DecompositionReport {
    pub fn residual_at_late(&self) -> f64 {
        self.residual.iter().rev().find(|p| p.t <= self.t_late + 1e-12).map(|p| p.value).unwrap_or(f64::NAN)
    }

    /// Residual at the last snapshot strictly before `t_late`.
    pub fn residual_before_late(&self) -> f64 {
        self.residual
            .iter()
            .rev()
            .find(|p| p.t < self.t_late - 1e-12)
            .map(|p| p.value)
            .unwrap_or(0.0)
    }

    pub fn max_coefficient(&self) -> f64 {
        self.coefficients.iter().flatten().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Least-squares slope of `||R(t)||` over the clean window.
    pub fn residual_trend(&self) -> f64 {
        let pts: Vec<&SeriesPoint> = self.residual.iter().filter(|p| p.t <= self.t_late + 1e-12).collect();
        if pts.len() < 2 {
            return 0.0;
        }
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.t).sum::<f64>() / n;
        let mv = pts.iter().map(|p| p.value).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.t - mt).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.t - mt) * (p.value - mv)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    }
}

/// Sum of the channel bound terms at time `t` for the given coefficients.
fn bound_terms(
    model: &ChargeTransferModel,
    families: &[SpectralFamily],
    coefficients: &[Vec<C64>],
    t: f64,
) -> Result<ComplexField> {
    let mut out = ComplexField::zeros(&model.grid);
    for (fam, cs) in families.iter().zip(coefficients) {
        let v = model.potentials[fam.channel].velocity;
        for (st, c) in fam.states.iter().zip(cs) {
            let u = moving_state(&st.eigenfunction, &v, t)?;
            out.axpy(c * C64::from_polar(1.0, -st.eigenvalue * t), &u);
        }
    }
    Ok(out)
}

fn coefficients_at(
    model: &ChargeTransferModel,
    families: &[SpectralFamily],
    psi: &ComplexField,
    t: f64,
) -> Result<Vec<Vec<C64>>> {
    families
        .iter()
        .map(|fam| {
            let v = model.potentials[fam.channel].velocity;
            fam.states
                .iter()
                .map(|st| {
                    let u = moving_state(&st.eigenfunction, &v, t)?;
                    Ok(C64::from_polar(1.0, st.eigenvalue * t) * psi.inner(&u))
                })
                .collect()
        })
        .collect()
}

/// Splits the trajectory into channel bound states, a free wave and a
/// remainder, with coefficients taken at the latest clean snapshot.
pub fn asymptotic_decomposition(
    model: &ChargeTransferModel,
    traj: &Trajectory<ComplexField>,
    families: &[SpectralFamily],
) -> Result<DecompositionReport> {
    let end = clean_end(traj);
    if end == 0 {
        return Err(Error::InsufficientData("no contamination-free late window".into()));
    }
    let late = end - 1;
    let t_late = traj.times()[late];
    let psi_late = &traj.states()[late];
    let coefficients = coefficients_at(model, families, psi_late, t_late)?;
    let scattered = psi_late.sub(&bound_terms(model, families, &coefficients, t_late)?);
    let free_profile = free_evolve(&scattered, -t_late);
    let flipped_profile = free_evolve(&scattered, t_late);

    // windowed cross-check over the last quarter of the clean window
    let first = late - late / 4;
    let mut windowed: Vec<Vec<C64>> = coefficients.iter().map(|c| vec![C64::new(0.0, 0.0); c.len()]).collect();
    for i in first..=late {
        let c = coefficients_at(model, families, &traj.states()[i], traj.times()[i])?;
        for (acc, ci) in windowed.iter_mut().zip(&c) {
            for (a, b) in acc.iter_mut().zip(ci) {
                *a += b / (late - first + 1) as f64;
            }
        }
    }

    let mut residual = Vec::with_capacity(traj.len());
    let mut flipped = Vec::with_capacity(traj.len());
    for ((psi, &t), &m) in traj.states().iter().zip(traj.times()).zip(traj.shell_mass()) {
        let bound = bound_terms(model, families, &coefficients, t)?;
        let r = psi.sub(&bound).sub(&free_evolve(&free_profile, t));
        let rf = psi.sub(&bound).sub(&free_evolve(&flipped_profile, -t));
        residual.push(SeriesPoint {
            t,
            value: r.norm(),
            boundary_shell_mass: m,
        });
        flipped.push(rf.norm());
    }
    let mut flags = Vec::new();
    if end < traj.len() {
        flags.push(FLAG_CONTAMINATED.to_string());
    }
    let agree = coefficients.iter().flatten().zip(windowed.iter().flatten()).all(|(a, b)| {
        let (ma, mb) = (a.norm(), b.norm());
        (ma - mb).abs() <= 0.02 * ma.max(mb).max(1e-3)
    });
    if !agree {
        flags.push("windowed-mismatch".into());
    }
    Ok(DecompositionReport {
        coefficients,
        windowed_coefficients: windowed,
        free_profile_norm: free_profile.norm(),
        free_profile,
        residual,
        flipped_residual: flipped,
        t_late,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Kato smoothing

fn kato_components(u: &ComplexField) -> Vec<ComplexField> {
    (0..u.grid().dim())
        .map(|a| {
            u.apply_multiplier(|xi| {
                let bracket = (1.0 + norm2(&xi)).sqrt();
                C64::new(0.0, xi[a] / bracket.sqrt())
            })
        })
        .collect()
}

/// Integrand and boundary-shell mass at each time.
fn kato_series(components: &[ComplexField], sigma: f64, times: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = components.first() else {
        return (vec![0.0; times.len()], vec![0.0; times.len()]);
    };
    let grid = first.grid();
    let mask = grid.shell_mask();
    let weight: Vec<f64> = grid.points_iter().map(|x| (1.0 + norm2(&x)).powf(-sigma)).collect();
    let dv = grid.cell_volume();
    times
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            let mut shell: f64 = 0.0;
            for c in components {
                let e = free_evolve(c, t);
                acc += e.values().iter().zip(&weight).map(|(z, w)| z.norm_sqr() * w).sum::<f64>() * dv;
                shell = shell.max(e.shell_mass(&mask));
            }
            (acc, shell)
        })
        .unzip()
}

/// Cumulative `int_0^T || <x>^{-sigma} <p>^{-1/2} grad e^{-i t |p|^2/2} u ||^2 dt`.
pub fn kato_smoothing_report(u: &ComplexField, sigma: f64, t_end: f64, dt: f64) -> Result<EstimateReport> {
    if sigma <= 0.5 {
        return Err(Error::Config(format!("weight exponent {sigma} must exceed 1/2")));
    }
    let n = step_count(0.0, t_end, dt)?;
    if n < 4 {
        return Err(Error::InsufficientData("need at least 4 time samples".into()));
    }
    let grid = u.grid().clone();
    let comps = kato_components(u);
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
    let (vals, shells) = kato_series(&comps, sigma, &times);
    let cum = cumulative_trapezoid(&times, &vals);
    let mut report = EstimateReport::new("kato_smoothing", Provenance::new("free", &grid, dt));
    fill_cumulative(&mut report, &times, &cum, t_end);
    report.series = times
        .iter()
        .zip(&vals)
        .zip(&shells)
        .map(|((&t, &value), &m)| SeriesPoint {
            t,
            value,
            boundary_shell_mass: m,
        })
        .collect();
    if shells.iter().any(|&m| m > CONTAMINATION_LIMIT) {
        report.flag(FLAG_CONTAMINATED);
    }
    // coarser time quadrature: every other sample
    if n % 2 == 0 {
        let ct: Vec<f64> = times.iter().step_by(2).copied().collect();
        let cv: Vec<f64> = vals.iter().step_by(2).copied().collect();
        let ccum = cumulative_trapezoid(&ct, &cv);
        report.refine(*cum.last().unwrap(), *ccum.last().unwrap());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Matrix model

/// Potential of the stationary operator `A` associated with a moving
/// matrix potential: `[[alpha^2/2 + U, -W], [W, -alpha^2/2 - U]]` centered
/// at the initial position.
pub fn stationary_matrix_potential(spec: &MatrixPotentialSpec, grid: &Grid) -> MatrixField {
    let mut out = MatrixField::zeros(grid);
    let shift = 0.5 * spec.alpha * spec.alpha;
    for (i, m) in out.entries.iter_mut().enumerate() {
        let d = grid.torus_displacement(&grid.point(i), &spec.center);
        let r2 = norm2(&d);
        let u = spec.u.value(r2) + shift;
        let w = spec.w.value(r2);
        *m = [[C64::new(u, 0.0), C64::new(-w, 0.0)], [C64::new(w, 0.0), C64::new(-u, 0.0)]];
    }
    out
}

/// `G_v(t) M(t)^{-1} e^{-itA} M(0) G_v(0)^{-1} s0`.
pub fn matrix_conjugated_flow(spec: &MatrixPotentialSpec, s0: &SpinorField, t: f64, dt: f64) -> Result<SpinorField> {
    let grid = s0.grid().clone();
    let a = stationary_matrix_potential(spec, &grid);
    let b0 = BoostSpec::moving(spec.velocity, 0.0);
    let rest = modulation(spec.alpha, spec.gamma, 0.0, &galilei_spinor_inverse(s0, &b0)?);
    let src = MatrixPotentialSource::Static(a);
    let nsteps = step_count(0.0, t, dt)?.max(1);
    let evolved = run_matrix(&grid, &src, &rest, 0.0, t, dt, nsteps, |_, _| Ok(()))?;
    galilei_spinor(&modulation_inverse(spec.alpha, spec.gamma, t, &evolved), &BoostSpec::moving(spec.velocity, t))
}

fn conjugacy_discrepancies(spec: &MatrixPotentialSpec, s0: &SpinorField, t_end: f64, dt: f64) -> Result<Vec<(f64, f64)>> {
    let grid = s0.grid().clone();
    let model = crate::model::MatrixChargeTransferModel::new(grid, vec![spec.clone()]);
    let nsteps = step_count(0.0, t_end, dt)?;
    if nsteps % 4 != 0 {
        return Err(Error::Config("the step count must be divisible by 4".into()));
    }
    let traj = evolve_matrix(&model, s0, 0.0, t_end, dt, nsteps / 4)?;
    [1usize, 2, 4]
        .iter()
        .map(|&k| {
            let t = traj.times()[k];
            let lhs = &traj.states()[k];
            let rhs = matrix_conjugated_flow(spec, s0, t, dt)?;
            Ok((t, lhs.sub(&rhs).norm() / lhs.norm().max(1e-300)))
        })
        .collect()
}

/// Relative discrepancy between the moving matrix flow and its conjugated
/// stationary form at `T/4`, `T/2` and `T`.
pub fn matrix_conjugacy_report(spec: &MatrixPotentialSpec, s0: &SpinorField, t_end: f64, dt: f64) -> Result<EstimateReport> {
    let d = conjugacy_discrepancies(spec, s0, t_end, dt)?;
    let mut report = EstimateReport::new("matrix_conjugacy", Provenance::new("matrix, single potential", s0.grid(), dt));
    for (label, (_, v)) in ["quarter", "half", "full"].iter().zip(&d) {
        report.set(&format!("discrepancy_{label}"), *v);
    }
    let worst = d.iter().map(|p| p.1).fold(0.0, f64::max);
    report.set("discrepancy_max", worst);
    report.window = [0.0, t_end];
    report.series = d
        .iter()
        .map(|&(t, value)| SeriesPoint {
            t,
            value,
            boundary_shell_mass: 0.0,
        })
        .collect();
    Ok(report)
}

fn stability_history(potential: &MatrixField, s: &SpinorField, run: &RunSpec) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mask = potential.grid.shell_mask();
    let mut times = Vec::new();
    let mut norms = Vec::new();
    let mut shells = Vec::new();
    let src = MatrixPotentialSource::Static(potential.clone());
    run_matrix(&potential.grid, &src, s, 0.0, run.t_end, run.dt, run.stride, |t, psi| {
        times.push(t);
        norms.push(psi.norm());
        shells.push(psi.shell_mass(&mask));
        Ok(())
    })?;
    Ok((times, norms, shells))
}

/// Norm history of `e^{-itA} P_c s0` with `P_c` the complement of the
/// biorthogonal point projection.
pub fn matrix_stability_report(
    potential: &MatrixField,
    pairs: &[BiorthogonalPair],
    s0: &SpinorField,
    run: &RunSpec,
) -> Result<EstimateReport> {
    let pc = biorthogonal_projection(s0, pairs, Part::Continuous)?;
    let mut report = EstimateReport::new("matrix_stability", Provenance::new("stationary matrix operator", &potential.grid, run.dt));
    report.set("eigenpairs", pairs.len() as f64);
    report.window = [0.0, run.t_end];
    let (times, norms, shells) = match stability_history(potential, &pc, run) {
        Ok(h) => h,
        Err(Error::Instability { .. }) => {
            report.flag(FLAG_UNSTABLE);
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let n0 = norms[0].max(1e-300);
    let mid = 0.5 * run.t_end;
    let sup = norms.iter().copied().fold(0.0, f64::max);
    let early = times.iter().zip(&norms).filter(|(t, _)| **t <= mid).map(|(_, n)| *n).fold(0.0, f64::max);
    let late = times.iter().zip(&norms).filter(|(t, _)| **t >= mid).map(|(_, n)| *n).fold(0.0, f64::max);
    report.set("sup_ratio", sup / n0);
    report.set("late_growth_ratio", late / early.max(1e-300));
    report.series = times
        .iter()
        .zip(&norms)
        .zip(&shells)
        .map(|((&t, &value), &m)| SeriesPoint {
            t,
            value,
            boundary_shell_mass: m,
        })
        .collect();
    if sup / n0 > 1e6 {
        report.flag(FLAG_UNSTABLE);
    }
    if let Some(coarse) = run.coarser() {
        let (_, cn, _) = stability_history(potential, &pc, &coarse)?;
        let csup = cn.iter().copied().fold(0.0, f64::max);
        report.refine(sup / n0, csup / cn[0].max(1e-300));
    }
    Ok(report)
}

/// Convenience used by several checks: the bound-overlap functional of a
/// single state at time `t`.
pub fn bound_overlap(model: &ChargeTransferModel, families: &[SpectralFamily], f: &ComplexField, t: f64) -> Result<f64> {
    Ok(channel_overlaps(f, model, families, t)?.iter().sum())
}

/// Flow of `psi0` with the snapshots discarded, for long backward or
/// forward transports.
pub fn transport(model: &ChargeTransferModel, psi0: &ComplexField, t0: f64, t1: f64, dt: f64) -> Result<ComplexField> {
    let n = step_count(t0, t1, dt)?.max(1);
    evolve_observed(model, psi0, t0, t1, dt, n, |_, _| Ok(()))
}

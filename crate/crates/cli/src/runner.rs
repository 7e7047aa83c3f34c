//! Runs one experiment: builds the model and initial data, propagates,
//! evaluates the configured checks and writes the report, the time series,
//! snapshots and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dispersim_core::fieldgrid::vec3;
use dispersim_core::spectral::{
    bound_states_with, matrix_eigenpairs, moving_state, prepare_scattering_state, prepare_with_wave_operators,
    EigenOptions, SpectralFamily, WavePacket,
};
use dispersim_core::verify::{
    asymptotic_decomposition, dispersive_report, energy_report, kato_smoothing_report, matrix_conjugacy_report,
    matrix_stability_report, orthogonality_decay_report, stationary_matrix_potential, strichartz_report,
    weighted_curve_report, Curve, EstimateReport, FitOptions, Provenance, RunSpec, SeriesPoint,
};
use dispersim_core::{
    evolve, evolve_matrix, validate_model, AdmissiblePair, ChargeTransferModel, ComplexField, Error as CoreError,
    Grid, MatrixChargeTransferModel, SpinorField, Trajectory, ValidationReport, Vec3,
};

use crate::config::{
    load, CheckConfig, CheckKind, CurveConfig, ExperimentConfig, InitialConfig, LoadedConfig, Preparation,
    SchemaError,
};
use crate::snapshot::{emit_snapshot, load_snapshot, Snapshot};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_INSTABILITY: i32 = 3;

const LOCK_FILE: &str = ".dispersim.lock";

#[derive(Debug)]
pub enum RunError {
    Schema(String),
    Instability(String),
    Failed(anyhow::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Schema(_) => EXIT_SCHEMA,
            RunError::Instability(_) => EXIT_INSTABILITY,
            RunError::Failed(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Schema(m) => write!(f, "invalid configuration: {m}"),
            RunError::Instability(m) => write!(f, "propagation unstable: {m}"),
            RunError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        if let Some(s) = e.downcast_ref::<SchemaError>() {
            return RunError::Schema(s.0.clone());
        }
        match e.downcast::<CoreError>() {
            Ok(core) => core.into(),
            Err(e) => RunError::Failed(e),
        }
    }
}

impl From<SchemaError> for RunError {
    fn from(e: SchemaError) -> Self {
        RunError::Schema(e.0)
    }
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Instability { .. } | CoreError::Propagation { .. } => RunError::Instability(e.to_string()),
            CoreError::DuplicateVelocity { first, second } => RunError::Schema(format!(
                "potential velocities must be pairwise distinct, but potentials {first} and {second} move with the same velocity"
            )),
            CoreError::NonCommensurate { .. } | CoreError::Config(_) | CoreError::GridMismatch(_) => {
                RunError::Schema(e.to_string())
            }
            other => RunError::Failed(other.into()),
        }
    }
}

/// A velocity moved onto the commensurate lattice.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Adjustment {
    pub potential: usize,
    pub quantity: String,
    pub from: Vec<f64>,
    pub to: Vec<f64>,
}

pub enum Model {
    Scalar(ChargeTransferModel),
    Matrix(MatrixChargeTransferModel),
}

/// A validated configuration with its model built and velocities snapped.
pub struct Plan {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub grid: Grid,
    pub model: Model,
    pub adjustments: Vec<Adjustment>,
    pub validation: ValidationReport,
    base: PathBuf,
}

/// SHA-256 of the configuration as canonical JSON (sorted keys, compact).
pub fn config_hash(raw: &Value) -> String {
    hex::encode(Sha256::digest(raw.to_string().as_bytes()))
}

fn snap(grid: &Grid, i: usize, v: Vec3, adjustments: &mut Vec<Adjustment>) -> Vec3 {
    if grid.is_commensurate(&v) {
        return v;
    }
    let to = grid.snap_velocity(&v);
    let dim = grid.dim();
    warn!(
        "potential {i}: velocity {:?} is not lattice-commensurate; snapped to {:?} (multiples of 2pi/L = {})",
        &v[..dim],
        &to[..dim],
        grid.frequency_step()
    );
    adjustments.push(Adjustment { potential: i, quantity: "velocity".into(), from: v[..dim].to_vec(), to: to[..dim].to_vec() });
    to
}

pub fn plan(loaded: &LoadedConfig) -> Result<Plan, RunError> {
    let config = loaded.config.clone();
    let grid = config.grid()?;
    let mut adjustments = Vec::new();
    let model = if config.is_matrix() {
        let mut specs = config.matrix_potentials();
        for (i, p) in specs.iter_mut().enumerate() {
            p.velocity = snap(&grid, i, p.velocity, &mut adjustments);
        }
        Model::Matrix(MatrixChargeTransferModel::new(grid.clone(), specs))
    } else {
        let mut specs = config.scalar_potentials();
        for (i, p) in specs.iter_mut().enumerate() {
            p.velocity = snap(&grid, i, p.velocity, &mut adjustments);
        }
        Model::Scalar(ChargeTransferModel::new(grid.clone(), specs))
    };
    let radius = match &config.initial {
        InitialConfig::Packet { width, .. } => 4.0 * width,
        _ => 0.0,
    };
    let validated = match &model {
        Model::Scalar(m) => validate_model(m, radius),
        Model::Matrix(m) => validate_model(m, radius),
    };
    let mut validation = validated.map_err(|e| match RunError::from(e) {
        RunError::Schema(m) if !adjustments.is_empty() => RunError::Schema(format!("{m} (after snapping to the lattice)")),
        other => other,
    })?;
    if validation.wrap_horizon < config.run.t1 {
        let msg = format!(
            "run ends at t = {} but moving potentials reach the box boundary after t = {:.3}",
            config.run.t1, validation.wrap_horizon
        );
        warn!("{msg}");
        validation.warnings.push(msg);
    }
    let base = loaded.path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Plan { config_hash: config_hash(&loaded.raw), config, grid, model, adjustments, validation, base })
}

pub fn check_name(c: &CheckConfig) -> String {
    c.name.clone().unwrap_or_else(|| c.kind.op().to_string())
}

impl Plan {
    /// What `run` would do, without propagating.
    pub fn summary(&self) -> Value {
        let r = &self.config.run;
        json!({
            "config_hash": self.config_hash,
            "grid": grid_json(&self.grid),
            "run": {
                "t0": r.t0, "t1": r.t1, "dt": r.dt, "stride": r.stride,
                "steps": r.steps(), "snapshots": r.steps() / r.stride + 1,
            },
            "model": if self.config.is_matrix() { "matrix" } else { "scalar" },
            "potentials": self.config.channel_count(),
            "adjustments": self.adjustments,
            "validation": self.validation,
            "checks": self.config.checks.iter().map(|c| json!({"name": check_name(c), "op": c.kind.op()})).collect::<Vec<_>>(),
        })
    }

    fn needs_families(&self) -> bool {
        let prep = matches!(
            self.config.initial,
            InitialConfig::Packet { prepare: Preparation::Projection | Preparation::WaveOperators, .. }
                | InitialConfig::BoundState { .. }
        );
        prep || self
            .config
            .checks
            .iter()
            .any(|c| matches!(c.kind, CheckKind::Orthogonality {} | CheckKind::Decomposition {}))
    }
}

fn grid_json(g: &Grid) -> Value {
    json!({"n": g.dim(), "N": g.points(), "L": g.length(), "spacing": g.spacing()})
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Flagged,
    Fail,
}

/// One entry of report.json.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub op: String,
    pub metric: String,
    pub values: BTreeMap<String, f64>,
    pub window: [f64; 2],
    pub refinement_delta: Option<f64>,
    pub flags: Vec<String>,
    pub status: CheckStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
}

impl CheckRecord {
    fn from_report(op: &str, r: EstimateReport) -> Self {
        Self {
            op: op.into(),
            metric: r.metric,
            values: r.values,
            window: r.window,
            refinement_delta: r.refinement_delta,
            flags: r.flags,
            status: CheckStatus::Pass,
            error: None,
            detail: None,
            provenance: r.provenance,
            series: r.series,
        }
    }

    fn failed(op: &str, err: String) -> Self {
        Self {
            op: op.into(),
            metric: op.into(),
            values: BTreeMap::new(),
            window: [0.0, 0.0],
            refinement_delta: None,
            flags: vec!["error".into()],
            status: CheckStatus::Fail,
            error: Some(err),
            detail: None,
            provenance: Provenance::default(),
            series: Vec::new(),
        }
    }

    fn flag(&mut self, f: &str) {
        if !self.flags.iter().any(|g| g == f) {
            self.flags.push(f.into());
        }
    }

    /// Applies the expectations and sets the status from the hard flags.
    fn judge(&mut self, name: &str, check: &CheckConfig) {
        for e in &check.expect {
            match self.values.get(&e.key) {
                Some(&v) => {
                    if e.min.is_some_and(|m| !(v >= m)) || e.max.is_some_and(|m| !(v <= m)) {
                        warn!("check {name}: {} = {v} outside [{:?}, {:?}]", e.key, e.min, e.max);
                        self.flag("out-of-range");
                    }
                }
                None => {
                    warn!("check {name}: no value named {:?}", e.key);
                    self.flag("out-of-range");
                }
            }
        }
        let hard = check.hard_flags();
        let is_hard = |f: &String| {
            let base = f.split(':').next().unwrap_or(f);
            f == "error" || hard.iter().any(|h| h == f || h == base)
        };
        self.status = if self.flags.iter().any(is_hard) {
            CheckStatus::Fail
        } else if self.flags.is_empty() {
            CheckStatus::Pass
        } else {
            CheckStatus::Flagged
        };
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PreparationSummary {
    pub method: Preparation,
    pub subtracted_mass: f64,
    pub passes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SnapshotEntry {
    pub requested: f64,
    pub stored_time: f64,
    pub file: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub name: Option<String>,
    pub seed: u64,
    pub model: String,
    pub grid: Value,
    pub run: Value,
    pub adjustments: Vec<Adjustment>,
    pub warnings: Vec<String>,
    pub bound_states: Vec<usize>,
    pub preparation: Option<PreparationSummary>,
    pub snapshots: Vec<SnapshotEntry>,
    pub checks: BTreeMap<String, CheckStatus>,
    pub exit_status: i32,
    pub wall_clock_seconds: f64,
}

pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub report: BTreeMap<String, CheckRecord>,
    pub manifest: RunManifest,
}

/// Holds the output directory for the duration of a run.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(LOCK_FILE);
        fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            RunError::Failed(anyhow::anyhow!(
                "output directory {} is in use by another run ({e}); remove {} if it is stale",
                dir.display(),
                path.display()
            ))
        })?;
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn default_out_dir(loaded: &LoadedConfig) -> PathBuf {
    if let Some(d) = &loaded.config.output.dir {
        return d.clone();
    }
    let stem = loaded
        .config
        .name
        .clone()
        .or_else(|| loaded.path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "experiment".into());
    Path::new("runs").join(stem)
}

pub fn run_experiment(config_path: &Path, out: Option<&Path>) -> Result<RunOutcome, RunError> {
    let start = Instant::now();
    let loaded = load(config_path)?;
    let plan = plan(&loaded)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_out_dir(&loaded));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let _lock = OutputLock::acquire(&out_dir)?;
    let cfg = &plan.config;
    let r = &cfg.run;
    info!("grid n={} N={} L={}; t in [{}, {}], dt {}", plan.grid.dim(), plan.grid.points(), plan.grid.length(), r.t0, r.t1, r.dt);

    let mut warnings = plan.validation.warnings.clone();
    let mut preparation = None;
    let mut families = Vec::new();
    let mut report = BTreeMap::new();
    let (times, series, snapshots) = match &plan.model {
        Model::Scalar(model) => {
            if plan.needs_families() {
                families = compute_families(&plan, model)?;
            }
            let psi0 = scalar_initial(&plan, model, &families, &mut preparation)?;
            info!("propagating {} steps", r.steps());
            let traj = evolve(model, &psi0, r.t0, r.t1, r.dt, r.stride)?;
            let mut ctx = ScalarChecks { plan: &plan, model, psi0: &psi0, traj: &traj, families: &families, coarse: None };
            for c in &cfg.checks {
                let name = check_name(c);
                info!("check {name} ({})", c.kind.op());
                let mut rec = match ctx.run(&c.kind) {
                    Ok(rec) => rec,
                    Err(e @ (CoreError::Instability { .. } | CoreError::Propagation { .. })) => return Err(e.into()),
                    Err(e) => CheckRecord::failed(c.kind.op(), e.to_string()),
                };
                rec.judge(&name, c);
                report.insert(name, rec);
            }
            let snaps = select_snapshots(&cfg.output.snapshots, traj.times(), |i| Snapshot::Scalar(traj.states()[i].clone()));
            (traj.times().to_vec(), norm_series(traj.times(), traj.norms(), traj.shell_mass()), snaps)
        }
        Model::Matrix(model) => {
            let s0 = matrix_initial(&plan)?;
            info!("propagating {} steps", r.steps());
            let traj = evolve_matrix(model, &s0, r.t0, r.t1, r.dt, r.stride)?;
            for c in &cfg.checks {
                let name = check_name(c);
                info!("check {name} ({})", c.kind.op());
                let mut rec = match matrix_check(&plan, model, &s0, &c.kind) {
                    Ok(rec) => rec,
                    Err(e @ (CoreError::Instability { .. } | CoreError::Propagation { .. })) => return Err(e.into()),
                    Err(e) => CheckRecord::failed(c.kind.op(), e.to_string()),
                };
                rec.judge(&name, c);
                report.insert(name, rec);
            }
            let snaps = select_snapshots(&cfg.output.snapshots, traj.times(), |i| Snapshot::Spinor(traj.states()[i].clone()));
            (traj.times().to_vec(), norm_series(traj.times(), traj.norms(), traj.shell_mass()), snaps)
        }
    };

    write_series(&out_dir.join("trajectory.csv"), &series)?;
    let mut snapshot_entries = Vec::new();
    for (requested, index, snap) in snapshots {
        let file = format!("snapshot_{index:05}.dspf");
        emit_snapshot(&snap, &out_dir.join(&file))?;
        snapshot_entries.push(SnapshotEntry { requested, stored_time: times[index], file });
    }
    for (name, rec) in &report {
        if !rec.series.is_empty() {
            write_series(&out_dir.join(format!("{name}.csv")), &rec.series)?;
        }
        if let Some(e) = &rec.error {
            warnings.push(format!("check {name} failed: {e}"));
        }
    }
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(out_dir.join("report.json"), text + "\n").context("writing report.json")?;

    let exit_code = if report.values().any(|r| r.status == CheckStatus::Fail) { EXIT_CHECK_FAILED } else { EXIT_OK };
    let manifest = RunManifest {
        config_hash: plan.config_hash.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        name: cfg.name.clone(),
        seed: cfg.seed,
        model: if cfg.is_matrix() { "matrix" } else { "scalar" }.into(),
        grid: grid_json(&plan.grid),
        run: json!({"t0": r.t0, "t1": r.t1, "dt": r.dt, "stride": r.stride, "steps": r.steps()}),
        adjustments: plan.adjustments.clone(),
        warnings,
        bound_states: families.iter().map(SpectralFamily::len).collect(),
        preparation,
        snapshots: snapshot_entries,
        checks: report.iter().map(|(k, v)| (k.clone(), v.status)).collect(),
        exit_status: exit_code,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    fs::write(out_dir.join("manifest.json"), text + "\n").context("writing manifest.json")?;
    Ok(RunOutcome { exit_code, out_dir, report, manifest })
}

fn norm_series(times: &[f64], norms: &[f64], shell: &[f64]) -> Vec<SeriesPoint> {
    (0..times.len())
        .map(|i| SeriesPoint { t: times[i], value: norms[i], boundary_shell_mass: shell[i] })
        .collect()
}

fn write_series(path: &Path, series: &[SeriesPoint]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for p in series {
        w.serialize(p).with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn select_snapshots(requested: &[f64], times: &[f64], get: impl Fn(usize) -> Snapshot) -> Vec<(f64, usize, Snapshot)> {
    requested
        .iter()
        .map(|&t| {
            let i = (0..times.len()).min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs())).unwrap_or(0);
            (t, i, get(i))
        })
        .collect()
}

fn compute_families(plan: &Plan, model: &ChargeTransferModel) -> Result<Vec<SpectralFamily>, RunError> {
    let s = &plan.config.spectral;
    let opts = EigenOptions { gap_tol: s.gap_tol, seed: plan.config.seed, ..EigenOptions::default() };
    model
        .potentials
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let fam = bound_states_with(&p.stationary(), &plan.grid, i, s.k_max, s.tol, &opts)?;
            info!("potential {i}: {} bound states {:?}", fam.len(), fam.states.iter().map(|b| b.eigenvalue).collect::<Vec<_>>());
            Ok(fam)
        })
        .collect()
}

fn read_initial(plan: &Plan, path: &Path) -> Result<Snapshot, RunError> {
    let path = if path.is_absolute() { path.to_path_buf() } else { plan.base.join(path) };
    let snap = load_snapshot(&path).map_err(|e| RunError::Schema(format!("initial.path: {e:#}")))?;
    if snap.grid() != &plan.grid {
        return Err(RunError::Schema(format!(
            "initial.path: snapshot grid n={} N={} L={} does not match the configured grid",
            snap.grid().dim(),
            snap.grid().points(),
            snap.grid().length()
        )));
    }
    Ok(snap)
}

fn scalar_initial(
    plan: &Plan,
    model: &ChargeTransferModel,
    families: &[SpectralFamily],
    summary: &mut Option<PreparationSummary>,
) -> Result<ComplexField, RunError> {
    let r = &plan.config.run;
    match &plan.config.initial {
        InitialConfig::Packet { center, momentum, width, prepare, horizon, .. } => {
            let packet = WavePacket { center: vec3(center), momentum: vec3(momentum), width: *width }.field(&plan.grid);
            let prepared = match prepare {
                Preparation::None => return Ok(packet),
                Preparation::Projection => prepare_scattering_state(&packet, model, families)?,
                Preparation::WaveOperators => {
                    let h = horizon.unwrap_or_default();
                    prepare_with_wave_operators(&packet, model, families, h, r.dt)?
                }
            };
            info!("prepared scattering state: removed mass {:.3e} in {} passes", prepared.subtracted_mass, prepared.passes);
            *summary = Some(PreparationSummary { method: *prepare, subtracted_mass: prepared.subtracted_mass, passes: prepared.passes });
            Ok(prepared.field)
        }
        InitialConfig::BoundState { channel, index } => {
            let fam = &families[*channel];
            let state = fam.states.get(*index).ok_or_else(|| {
                RunError::Schema(format!(
                    "initial.index {index} exceeds the {} bound states found for potential {channel}",
                    fam.len()
                ))
            })?;
            Ok(moving_state(&state.eigenfunction, &model.potentials[*channel].velocity, r.t0)?)
        }
        InitialConfig::File { path } => match read_initial(plan, path)? {
            Snapshot::Scalar(f) => Ok(f),
            Snapshot::Spinor(_) => Err(RunError::Schema("initial.path holds a spinor but the model is scalar".into())),
        },
    }
}

fn matrix_initial(plan: &Plan) -> Result<SpinorField, RunError> {
    match &plan.config.initial {
        InitialConfig::Packet { center, momentum, width, component, .. } => {
            let f = WavePacket { center: vec3(center), momentum: vec3(momentum), width: *width }.field(&plan.grid);
            let z = ComplexField::zeros(&plan.grid);
            let s = if *component == 0 { SpinorField::new(f, z) } else { SpinorField::new(z, f) };
            Ok(s?)
        }
        InitialConfig::File { path } => match read_initial(plan, path)? {
            Snapshot::Spinor(s) => Ok(s),
            Snapshot::Scalar(_) => Err(RunError::Schema("initial.path holds a scalar field but the model is a matrix model".into())),
        },
        InitialConfig::BoundState { .. } => Err(RunError::Schema("bound-state initial data applies to scalar models only".into())),
    }
}

struct ScalarChecks<'a> {
    plan: &'a Plan,
    model: &'a ChargeTransferModel,
    psi0: &'a ComplexField,
    traj: &'a Trajectory<ComplexField>,
    families: &'a [SpectralFamily],
    /// The same run at twice the step, for refinement consistency.
    coarse: Option<Option<Trajectory<ComplexField>>>,
}

impl ScalarChecks<'_> {
    fn run_spec(&self) -> RunSpec {
        let r = &self.plan.config.run;
        RunSpec::new(r.t1 - r.t0, r.dt, r.stride)
    }

    fn coarse(&mut self) -> Result<Option<&Trajectory<ComplexField>>, CoreError> {
        if self.coarse.is_none() {
            let r = &self.plan.config.run;
            let c = match self.run_spec().coarser() {
                Some(c) => {
                    info!("propagating the coarse-step comparison run");
                    Some(evolve(self.model, self.psi0, r.t0, r.t1, c.dt, c.stride)?)
                }
                None => None,
            };
            self.coarse = Some(c);
        }
        Ok(self.coarse.as_ref().and_then(Option::as_ref))
    }

    fn curve(&self, c: &CurveConfig) -> Curve {
        match c {
            CurveConfig::Fixed { point } => Curve::Fixed(vec3(point)),
            CurveConfig::Linear { start, velocity } => Curve::Linear { start: vec3(start), velocity: vec3(velocity) },
            CurveConfig::Channel { channel } => {
                let p = &self.model.potentials[*channel];
                Curve::Linear { start: p.center, velocity: p.velocity }
            }
            CurveConfig::Random { scale } => Curve::random(self.plan.grid.dim(), *scale, self.plan.config.seed),
        }
    }

    fn run(&mut self, kind: &CheckKind) -> Result<CheckRecord, CoreError> {
        let op = kind.op();
        let r = &self.plan.config.run;
        Ok(match kind {
            CheckKind::Unitarity { limit } => {
                let drift = self.traj.norm_drift_rate();
                let norms = self.traj.norms();
                let mut rec = CheckRecord::from_report(op, empty_report(op, self.traj));
                rec.values.insert("drift_rate".into(), drift);
                rec.values.insert("initial_norm".into(), norms[0]);
                rec.values.insert("final_norm".into(), norms[norms.len() - 1]);
                rec.window = [r.t0, r.t1];
                rec.series = norm_series(self.traj.times(), norms, self.traj.shell_mass());
                if !(drift <= *limit) {
                    rec.flag("drift");
                }
                rec
            }
            CheckKind::Dispersive { fit_start } => {
                let (rep, _) = dispersive_report(self.model, self.psi0, &self.run_spec(), &FitOptions { fit_start: *fit_start })?;
                CheckRecord::from_report(op, rep)
            }
            CheckKind::Strichartz { q } => {
                let dim = self.plan.grid.dim();
                let pairs = q.iter().map(|&q| AdmissiblePair::from_q(dim, q)).collect::<Result<Vec<_>, _>>()?;
                let traj = self.traj;
                let coarse = self.coarse()?;
                CheckRecord::from_report(op, strichartz_report(traj, &pairs, coarse)?)
            }
            CheckKind::Energy { k } => {
                let traj = self.traj;
                let coarse = self.coarse()?;
                CheckRecord::from_report(op, energy_report(traj, *k, coarse)?)
            }
            CheckKind::Orthogonality {} => {
                let (rep, _) = orthogonality_decay_report(self.model, self.traj, self.families)?;
                CheckRecord::from_report(op, rep)
            }
            CheckKind::Decomposition {} => {
                let d = asymptotic_decomposition(self.model, self.traj, self.families)?;
                let mut rec = CheckRecord::from_report(op, empty_report(op, self.traj));
                let trend = d.residual_trend();
                for (k, v) in [
                    ("t_late", d.t_late),
                    ("residual_at_late", d.residual_at_late()),
                    ("residual_before_late", d.residual_before_late()),
                    ("residual_trend", trend),
                    ("max_coefficient", d.max_coefficient()),
                    ("free_profile_norm", d.free_profile_norm),
                ] {
                    rec.values.insert(k.into(), v);
                }
                rec.window = [r.t0, d.t_late];
                rec.flags = d.flags.clone();
                if trend > 0.0 {
                    rec.flag("residual-growing");
                }
                let coeffs: Vec<Vec<[f64; 2]>> =
                    d.coefficients.iter().map(|c| c.iter().map(|z| [z.re, z.im]).collect()).collect();
                rec.detail = Some(json!({ "coefficients": coeffs }));
                rec.series = d.residual;
                rec
            }
            CheckKind::WeightedCurve { curve, sigma } => {
                let curve = self.curve(curve);
                CheckRecord::from_report(op, weighted_curve_report(self.model, self.psi0, &curve, *sigma, &self.run_spec())?)
            }
            CheckKind::Kato { sigma } => {
                let sample = r.dt * r.stride as f64;
                CheckRecord::from_report(op, kato_smoothing_report(self.psi0, *sigma, r.t1 - r.t0, sample)?)
            }
            CheckKind::MatrixConjugacy { .. } | CheckKind::MatrixStability { .. } => {
                return Err(CoreError::Config(format!("{op} needs a matrix model")));
            }
        })
    }
}

/// An empty report carrying the provenance of the main trajectory.
fn empty_report(op: &str, traj: &Trajectory<ComplexField>) -> EstimateReport {
    EstimateReport {
        metric: op.into(),
        values: BTreeMap::new(),
        series: Vec::new(),
        window: [0.0, 0.0],
        refinement_delta: None,
        flags: Vec::new(),
        provenance: Provenance::new(traj.label.clone(), &traj.grid, traj.dt),
    }
}

fn matrix_check(plan: &Plan, model: &MatrixChargeTransferModel, s0: &SpinorField, kind: &CheckKind) -> Result<CheckRecord, CoreError> {
    let op = kind.op();
    let r = &plan.config.run;
    let spec = &model.potentials[0];
    match kind {
        CheckKind::MatrixConjugacy { limit } => {
            let mut rec = CheckRecord::from_report(op, matrix_conjugacy_report(spec, s0, r.t1 - r.t0, r.dt)?);
            if rec.values.get("discrepancy_max").map_or(true, |d| !(d <= limit)) {
                rec.flag("discrepancy");
            }
            Ok(rec)
        }
        CheckKind::MatrixStability { mu, gap } => {
            let potential = stationary_matrix_potential(spec, &plan.grid);
            let pairs = matrix_eigenpairs(&potential, *mu, *gap)?;
            let run = RunSpec::new(r.t1 - r.t0, r.dt, r.stride);
            Ok(CheckRecord::from_report(op, matrix_stability_report(&potential, &pairs, s0, &run)?))
        }
        _ => Err(CoreError::Config(format!("{op} needs a scalar model"))),
    }
}

//! Experiment configuration: the JSON schema and its cross-reference checks.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dispersim_core::fieldgrid::vec3;
use dispersim_core::{AdmissiblePair, Grid, MatrixPotentialSpec, PotentialSpec, Profile, Shape};

#[derive(Debug)]
pub struct SchemaError(pub String);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for SchemaError {}

fn schema<T>(msg: impl Into<String>) -> Result<T, SchemaError> {
    Err(SchemaError(msg.into()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub initial: InitialConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub checks: Vec<CheckConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(rename = "N")]
    pub points: usize,
    #[serde(rename = "L")]
    pub length: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellConfig {
    #[serde(default = "gaussian")]
    pub shape: Shape,
    pub depth: f64,
    pub width: f64,
    pub center: Vec<f64>,
    #[serde(default)]
    pub velocity: Vec<f64>,
}

fn gaussian() -> Shape {
    Shape::Gaussian
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default = "gaussian")]
    pub shape: Shape,
    pub depth: f64,
    pub width: f64,
}

impl From<&ProfileConfig> for Profile {
    fn from(p: &ProfileConfig) -> Self {
        Profile { shape: p.shape, depth: p.depth, width: p.width }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixWellConfig {
    pub u: ProfileConfig,
    #[serde(default)]
    pub w: Option<ProfileConfig>,
    pub alpha: f64,
    #[serde(default)]
    pub gamma: f64,
    pub center: Vec<f64>,
    #[serde(default)]
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Scalar { potentials: Vec<WellConfig> },
    Matrix { potentials: Vec<MatrixWellConfig> },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Scalar { potentials: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preparation {
    #[default]
    None,
    /// Remove the instantaneous channel bound states.
    Projection,
    /// Remove the ranges of the channel wave operators.
    WaveOperators,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialConfig {
    Packet {
        center: Vec<f64>,
        #[serde(default)]
        momentum: Vec<f64>,
        width: f64,
        #[serde(default)]
        prepare: Preparation,
        #[serde(default)]
        horizon: Option<f64>,
        /// Matrix models: 0 fills the upper component, 1 the lower.
        #[serde(default)]
        component: usize,
    },
    BoundState {
        channel: usize,
        #[serde(default)]
        index: usize,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub stride: usize,
}

impl RunConfig {
    pub fn steps(&self) -> usize {
        ((self.t1 - self.t0) / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_gap")]
    pub gap_tol: f64,
}

fn default_k_max() -> usize {
    4
}

fn default_tol() -> f64 {
    1e-10
}

fn default_gap() -> f64 {
    dispersim_core::spectral::DEFAULT_GAP_TOL
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { k_max: default_k_max(), tol: default_tol(), gap_tol: default_gap() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Stored times (nearest snapshot) written as binary snapshot files.
    #[serde(default)]
    pub snapshots: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurveConfig {
    Fixed { point: Vec<f64> },
    Linear { start: Vec<f64>, velocity: Vec<f64> },
    /// The trajectory of a potential's center.
    Channel { channel: usize },
    Random { scale: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckKind {
    Unitarity {
        #[serde(default = "default_drift")]
        limit: f64,
    },
    Dispersive {
        #[serde(default)]
        fit_start: Option<f64>,
    },
    Strichartz {
        /// Spatial exponents; each is completed to an admissible pair.
        q: Vec<f64>,
    },
    Energy {
        k: u32,
    },
    Orthogonality {},
    Decomposition {},
    WeightedCurve {
        curve: CurveConfig,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Kato {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    MatrixConjugacy {
        #[serde(default = "default_drift")]
        limit: f64,
    },
    MatrixStability {
        mu: f64,
        #[serde(default = "default_gap")]
        gap: f64,
    },
}

fn default_drift() -> f64 {
    1e-6
}

fn default_sigma() -> f64 {
    2.0
}

impl CheckKind {
    pub fn op(&self) -> &'static str {
        match self {
            CheckKind::Unitarity { .. } => "unitarity",
            CheckKind::Dispersive { .. } => "dispersive",
            CheckKind::Strichartz { .. } => "strichartz",
            CheckKind::Energy { .. } => "energy",
            CheckKind::Orthogonality {} => "orthogonality",
            CheckKind::Decomposition {} => "decomposition",
            CheckKind::WeightedCurve { .. } => "weighted_curve",
            CheckKind::Kato { .. } => "kato",
            CheckKind::MatrixConjugacy { .. } => "matrix_conjugacy",
            CheckKind::MatrixStability { .. } => "matrix_stability",
        }
    }

    fn needs_matrix(&self) -> bool {
        matches!(self, CheckKind::MatrixConjugacy { .. } | CheckKind::MatrixStability { .. })
    }

    /// Flags that fail the run unless the check overrides them.
    pub fn default_hard_flags(&self) -> Vec<String> {
        use dispersim_core::verify::*;
        let flags: &[&str] = match self {
            CheckKind::Unitarity { .. } => &["drift"],
            CheckKind::Dispersive { .. } | CheckKind::Orthogonality {} => &[FLAG_NON_DECAYING],
            CheckKind::Strichartz { .. } => &[],
            CheckKind::Energy { .. } => &[FLAG_GROWING],
            CheckKind::Decomposition {} => &["residual-growing"],
            CheckKind::WeightedCurve { .. } | CheckKind::Kato { .. } => &[FLAG_NON_SATURATING],
            CheckKind::MatrixConjugacy { .. } => &["discrepancy"],
            CheckKind::MatrixStability { .. } => &[FLAG_UNSTABLE],
        };
        flags.iter().map(|s| s.to_string()).collect()
    }
}

/// A numeric expectation on one value of a check; a miss raises the hard
/// flag `out-of-range`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub key: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub struct CheckConfig {
    pub name: Option<String>,
    pub kind: CheckKind,
    pub expect: Vec<Expect>,
    pub hard_flags: Option<Vec<String>>,
}

impl TryFrom<Value> for CheckConfig {
    type Error = String;

    fn try_from(v: Value) -> Result<Self, String> {
        let Value::Object(mut map) = v else {
            return Err("a check must be an object".into());
        };
        let name = match map.remove("name") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(format!("check name must be a string, got {other}")),
        };
        let expect = match map.remove("expect") {
            None | Some(Value::Null) => Vec::new(),
            Some(v @ Value::Object(_)) => vec![serde_json::from_value(v).map_err(|e| e.to_string())?],
            Some(v) => serde_json::from_value(v).map_err(|e| e.to_string())?,
        };
        let hard_flags = match map.remove("hard_flags") {
            None | Some(Value::Null) => None,
            Some(v) => Some(serde_json::from_value(v).map_err(|e| e.to_string())?),
        };
        let kind = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(CheckConfig { name, kind, expect, hard_flags })
    }
}

impl From<CheckConfig> for Value {
    fn from(c: CheckConfig) -> Value {
        let mut v = serde_json::to_value(&c.kind).unwrap_or(Value::Null);
        if let Value::Object(map) = &mut v {
            if let Some(n) = c.name {
                map.insert("name".into(), Value::String(n));
            }
            if !c.expect.is_empty() {
                map.insert("expect".into(), serde_json::to_value(&c.expect).unwrap_or(Value::Null));
            }
            if let Some(h) = c.hard_flags {
                map.insert("hard_flags".into(), serde_json::to_value(h).unwrap_or(Value::Null));
            }
        }
        v
    }
}

impl CheckConfig {
    pub fn hard_flags(&self) -> Vec<String> {
        let mut flags = self.hard_flags.clone().unwrap_or_else(|| self.kind.default_hard_flags());
        flags.push("out-of-range".into());
        flags
    }
}

/// The parsed configuration together with the raw document it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub raw: Value,
    pub path: PathBuf,
}

pub fn load(path: &Path) -> anyhow::Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    parse(&text, path)
}

pub fn parse(text: &str, path: &Path) -> anyhow::Result<LoadedConfig> {
    let raw: Value = serde_json::from_str(text).map_err(|e| SchemaError(format!("not valid JSON: {e}")))?;
    let config: ExperimentConfig = serde_json::from_value(raw.clone()).map_err(|e| SchemaError(e.to_string()))?;
    config.check()?;
    Ok(LoadedConfig { config, raw, path: path.to_path_buf() })
}

fn check_vector(what: &str, v: &[f64], dim: usize, allow_empty: bool) -> Result<(), SchemaError> {
    if (allow_empty && v.is_empty()) || v.len() == dim {
        if v.iter().all(|x| x.is_finite()) {
            return Ok(());
        }
        return schema(format!("{what} has non-finite entries"));
    }
    schema(format!("{what} must have {dim} components, got {}", v.len()))
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<Grid, SchemaError> {
        Grid::new(self.grid.n, self.grid.points, self.grid.length).map_err(|e| SchemaError(e.to_string()))
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self.model, ModelConfig::Matrix { .. })
    }

    pub fn channel_count(&self) -> usize {
        match &self.model {
            ModelConfig::Scalar { potentials } => potentials.len(),
            ModelConfig::Matrix { potentials } => potentials.len(),
        }
    }

    /// Structural and cross-reference validation.
    pub fn check(&self) -> Result<(), SchemaError> {
        let grid = self.grid()?;
        let dim = grid.dim();
        match &self.model {
            ModelConfig::Scalar { potentials } => {
                for (i, p) in potentials.iter().enumerate() {
                    check_vector(&format!("model.potentials[{i}].center"), &p.center, dim, false)?;
                    check_vector(&format!("model.potentials[{i}].velocity"), &p.velocity, dim, true)?;
                    if !(p.width > 0.0) || !p.depth.is_finite() {
                        return schema(format!("model.potentials[{i}]: width must be positive and depth finite"));
                    }
                }
            }
            ModelConfig::Matrix { potentials } => {
                if potentials.is_empty() {
                    return schema("a matrix model needs at least one potential");
                }
                for (i, p) in potentials.iter().enumerate() {
                    check_vector(&format!("model.potentials[{i}].center"), &p.center, dim, false)?;
                    check_vector(&format!("model.potentials[{i}].velocity"), &p.velocity, dim, true)?;
                    if !p.alpha.is_finite() || p.alpha == 0.0 {
                        return schema(format!("model.potentials[{i}].alpha must be finite and non-zero"));
                    }
                }
            }
        }
        let r = &self.run;
        if !(r.dt > 0.0) || !(r.t1 > r.t0) || r.stride == 0 {
            return schema("run needs dt > 0, t1 > t0 and stride >= 1");
        }
        let steps = (r.t1 - r.t0) / r.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return schema(format!("run interval {} is not a whole number of steps of {}", r.t1 - r.t0, r.dt));
        }
        if r.steps() % r.stride != 0 {
            return schema(format!("stride {} does not divide the {} steps", r.stride, r.steps()));
        }
        let channels = self.channel_count();
        match &self.initial {
            InitialConfig::Packet { center, momentum, width, prepare, horizon, component } => {
                check_vector("initial.center", center, dim, false)?;
                check_vector("initial.momentum", momentum, dim, true)?;
                if !(*width > 0.0) {
                    return schema("initial.width must be positive");
                }
                if *component > 1 || (*component == 1 && !self.is_matrix()) {
                    return schema("initial.component must be 0, or 1 for matrix models");
                }
                if *prepare != Preparation::None && self.is_matrix() {
                    return schema("scattering preparation applies to scalar models only");
                }
                if *prepare != Preparation::None && r.t0 != 0.0 {
                    return schema("scattering preparation is defined at t = 0 and needs t0 = 0");
                }
                if *prepare == Preparation::WaveOperators && horizon.map_or(true, |h| !(h > 0.0)) {
                    return schema("wave-operators preparation needs a positive initial.horizon");
                }
            }
            InitialConfig::BoundState { channel, .. } => {
                if self.is_matrix() {
                    return schema("bound-state initial data applies to scalar models only");
                }
                if *channel >= channels {
                    return schema(format!("initial.channel {channel} does not name a potential (have {channels})"));
                }
            }
            InitialConfig::File { .. } => {}
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.checks.iter().enumerate() {
            let name = c.name.clone().unwrap_or_else(|| c.kind.op().to_string());
            if !names.insert(name.clone()) {
                return schema(format!("checks[{i}]: duplicate check name {name:?}; set \"name\""));
            }
            if c.kind.needs_matrix() != self.is_matrix() {
                let which = if self.is_matrix() { "scalar" } else { "matrix" };
                return schema(format!("checks[{i}] ({}) needs a {which} model", c.kind.op()));
            }
            if matches!(c.kind, CheckKind::Dispersive { .. } | CheckKind::WeightedCurve { .. }) && r.t0 != 0.0 {
                return schema(format!("checks[{i}]: {} runs its own flow from t = 0 and needs t0 = 0", c.kind.op()));
            }
            match &c.kind {
                CheckKind::Strichartz { q } => {
                    if q.is_empty() {
                        return schema(format!("checks[{i}]: strichartz needs at least one q"));
                    }
                    for &qq in q {
                        AdmissiblePair::from_q(dim, qq).map_err(|e| SchemaError(format!("checks[{i}]: {e}")))?;
                    }
                }
                CheckKind::WeightedCurve { curve, sigma } => {
                    if !(*sigma > 0.0) {
                        return schema(format!("checks[{i}]: sigma must be positive"));
                    }
                    match curve {
                        CurveConfig::Fixed { point } => check_vector(&format!("checks[{i}].curve.point"), point, dim, false)?,
                        CurveConfig::Linear { start, velocity } => {
                            check_vector(&format!("checks[{i}].curve.start"), start, dim, false)?;
                            check_vector(&format!("checks[{i}].curve.velocity"), velocity, dim, false)?;
                        }
                        CurveConfig::Channel { channel } => {
                            if *channel >= channels {
                                return schema(format!("checks[{i}].curve.channel {channel} does not name a potential"));
                            }
                        }
                        CurveConfig::Random { scale } => {
                            if !(*scale >= 0.0) {
                                return schema(format!("checks[{i}].curve.scale must be non-negative"));
                            }
                        }
                    }
                }
                CheckKind::Kato { sigma } if !(*sigma > 0.0) => {
                    return schema(format!("checks[{i}]: sigma must be positive"));
                }
                CheckKind::MatrixConjugacy { .. } if r.steps() % 4 != 0 => {
                    return schema(format!("checks[{i}]: matrix_conjugacy needs a step count divisible by 4"));
                }
                CheckKind::MatrixConjugacy { .. } | CheckKind::MatrixStability { .. } if channels != 1 => {
                    return schema(format!("checks[{i}]: {} needs a single-potential matrix model", c.kind.op()));
                }
                CheckKind::MatrixStability { .. } if dim != 1 => {
                    return schema(format!("checks[{i}]: matrix_stability is available in one dimension only"));
                }
                _ => {}
            }
        }
        if self.output.snapshots.iter().any(|t| *t < r.t0 || *t > r.t1) {
            return schema("output.snapshots must lie inside [t0, t1]");
        }
        Ok(())
    }

    pub fn scalar_potentials(&self) -> Vec<PotentialSpec> {
        match &self.model {
            ModelConfig::Scalar { potentials } => potentials
                .iter()
                .map(|p| PotentialSpec {
                    shape: p.shape,
                    depth: p.depth,
                    width: p.width,
                    center: vec3(&p.center),
                    velocity: vec3(&p.velocity),
                })
                .collect(),
            ModelConfig::Matrix { .. } => Vec::new(),
        }
    }

    pub fn matrix_potentials(&self) -> Vec<MatrixPotentialSpec> {
        match &self.model {
            ModelConfig::Matrix { potentials } => potentials
                .iter()
                .map(|p| MatrixPotentialSpec {
                    u: (&p.u).into(),
                    w: p.w.as_ref().map(Profile::from).unwrap_or(Profile { shape: Shape::Gaussian, depth: 0.0, width: 1.0 }),
                    alpha: p.alpha,
                    gamma: p.gamma,
                    center: vec3(&p.center),
                    velocity: vec3(&p.velocity),
                })
                .collect(),
            ModelConfig::Scalar { .. } => Vec::new(),
        }
    }

    /// Relative paths in the config resolve against its directory.
    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

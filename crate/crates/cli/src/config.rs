//! Scenario configuration files (TOML).
//!
//! Unknown keys are rejected; validation failures name the offending field.

use std::path::Path;

use rticert::constants::EstimationConfig;
use rticert::ocp::OcpSpec;
use rticert::optimizer::RtiSettings;
use rticert::plant::{LinearPlant, PlantModel};
use rticert::{DMatrix, DVector};
use serde::Deserialize;

use crate::CliError;

/// The pinned Chen scenario.
pub const CHEN_TOML: &str = include_str!("../configs/chen.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Mandatory for estimation runs, optional otherwise.
    pub seed: Option<u64>,
    pub sampling_time: f64,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    pub plant: PlantConfig,
    pub ocp: OcpConfig,
    #[serde(default)]
    pub rti: RtiConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub estimation: EstimationSection,
}

fn default_n_steps() -> usize {
    2500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum PlantConfig {
    Chen { mu: f64 },
    /// `dx/dt = a x + b u`, matrices given row by row.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    pub n_intervals: usize,
    pub horizon: f64,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    #[serde(default = "default_substeps")]
    pub rk4_substeps: usize,
}

fn default_substeps() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtiConfig {
    pub lm_shift: f64,
    pub kkt_tol: f64,
    pub max_oracle_iters: usize,
    pub shift_warmstart: bool,
    pub primal_only_error: bool,
}

impl Default for RtiConfig {
    fn default() -> Self {
        let s = RtiSettings::default();
        RtiConfig {
            lm_shift: s.lm_shift,
            kkt_tol: s.kkt_tol,
            max_oracle_iters: s.max_oracle_iters,
            shift_warmstart: s.shift_warmstart,
            primal_only_error: s.primal_only_error,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub states: Vec<Vec<f64>>,
    #[serde(default = "default_radius_factor")]
    pub z0_radius_factor: f64,
    #[serde(default = "default_radius")]
    pub z0_radius: f64,
    #[serde(default = "default_settle")]
    pub settle_steps: usize,
}

fn default_radius_factor() -> f64 {
    0.5
}

fn default_radius() -> f64 {
    5e-3
}

fn default_settle() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub q: f64,
    pub t1_horizon: f64,
    pub rho: f64,
    pub kappa_radii: Vec<f64>,
    pub x_radii: Vec<f64>,
    pub n_probe: usize,
    pub probe_stride: usize,
    pub random_pairs: usize,
    pub lipschitz_samples: usize,
    pub slack: f64,
}

impl Default for EstimationSection {
    fn default() -> Self {
        let e = EstimationConfig::chen_default();
        EstimationSection {
            q: e.q,
            t1_horizon: e.t1_horizon,
            rho: e.rho,
            kappa_radii: e.kappa_radii,
            x_radii: e.x_radii,
            n_probe: e.n_probe,
            probe_stride: e.probe_stride,
            random_pairs: e.random_pairs,
            lipschitz_samples: e.lipschitz_samples,
            slack: e.slack,
        }
    }
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn matrix(field: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(field_error(field, format!("expected a {}x{} matrix", shape.0, shape.1)));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

fn increasing_positive(field: &str, v: &[f64]) -> Result<(), CliError> {
    if v.is_empty() || v[0] <= 0.0 || v.windows(2).any(|w| w[0] >= w[1]) || v.iter().any(|x| !x.is_finite()) {
        return Err(field_error(field, "must be a nonempty increasing list of positive radii"));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." || path.is_empty() {
                CliError::Config(msg)
            } else {
                field_error(&path, msg)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn chen() -> Self {
        Self::parse(CHEN_TOML).expect("the bundled Chen config is valid")
    }

    pub fn nx(&self) -> usize {
        match &self.plant {
            PlantConfig::Chen { .. } => 2,
            PlantConfig::Linear { a, .. } => a.len(),
        }
    }

    pub fn nu(&self) -> usize {
        match &self.plant {
            PlantConfig::Chen { .. } => 1,
            PlantConfig::Linear { b, .. } => b.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.sampling_time > 0.0) || !self.sampling_time.is_finite() {
            return Err(field_error("sampling_time", format!("must be positive, got {}", self.sampling_time)));
        }
        if self.n_steps == 0 {
            return Err(field_error("n_steps", "must be at least 1"));
        }
        let (nx, nu) = (self.nx(), self.nu());
        match &self.plant {
            PlantConfig::Chen { mu } if !mu.is_finite() => return Err(field_error("plant.mu", "must be finite")),
            PlantConfig::Linear { a, b } => {
                if nx == 0 || nu == 0 {
                    return Err(field_error("plant", "linear plant needs nonempty a and b"));
                }
                matrix("plant.a", a, (nx, nx))?;
                matrix("plant.b", b, (nx, nu))?;
            }
            _ => {}
        }
        let o = &self.ocp;
        if o.n_intervals == 0 {
            return Err(field_error("ocp.n_intervals", "must be at least 1"));
        }
        if !(o.horizon > 0.0) || !o.horizon.is_finite() {
            return Err(field_error("ocp.horizon", "must be positive"));
        }
        if o.rk4_substeps == 0 {
            return Err(field_error("ocp.rk4_substeps", "must be at least 1"));
        }
        matrix("ocp.q", &o.q, (nx, nx))?;
        matrix("ocp.r", &o.r, (nu, nu))?;
        if o.u_lo.len() != nu {
            return Err(field_error("ocp.u_lo", format!("expected {nu} entries")));
        }
        if o.u_hi.len() != nu {
            return Err(field_error("ocp.u_hi", format!("expected {nu} entries")));
        }
        if o.u_lo.iter().zip(&o.u_hi).any(|(l, h)| !(l < h)) {
            return Err(field_error("ocp.u_hi", "every upper bound must exceed its lower bound"));
        }
        let r = &self.rti;
        if !(r.lm_shift >= 0.0) || !r.lm_shift.is_finite() {
            return Err(field_error("rti.lm_shift", "must be nonnegative"));
        }
        if !(r.kkt_tol > 0.0) {
            return Err(field_error("rti.kkt_tol", "must be positive"));
        }
        if r.max_oracle_iters == 0 {
            return Err(field_error("rti.max_oracle_iters", "must be at least 1"));
        }
        let i = &self.initial;
        if i.states.is_empty() {
            return Err(field_error("initial.states", "at least one initial state is needed"));
        }
        for (k, s) in i.states.iter().enumerate() {
            if s.len() != nx || s.iter().any(|v| !v.is_finite()) {
                return Err(field_error(&format!("initial.states[{k}]"), format!("expected {nx} finite entries")));
            }
        }
        if !(i.z0_radius >= 0.0) || !i.z0_radius.is_finite() {
            return Err(field_error("initial.z0_radius", "must be nonnegative"));
        }
        if !(i.z0_radius_factor >= 0.0) || !i.z0_radius_factor.is_finite() {
            return Err(field_error("initial.z0_radius_factor", "must be nonnegative"));
        }
        let e = &self.estimation;
        if !(e.q > 0.0) {
            return Err(field_error("estimation.q", "must be positive"));
        }
        if !(e.t1_horizon > 0.0) {
            return Err(field_error("estimation.t1_horizon", "must be positive"));
        }
        if !(e.rho >= 0.0) {
            return Err(field_error("estimation.rho", "must be nonnegative"));
        }
        increasing_positive("estimation.kappa_radii", &e.kappa_radii)?;
        increasing_positive("estimation.x_radii", &e.x_radii)?;
        if e.n_probe < 3 {
            return Err(field_error("estimation.n_probe", "must be at least 3"));
        }
        if e.probe_stride == 0 {
            return Err(field_error("estimation.probe_stride", "must be at least 1"));
        }
        if e.lipschitz_samples == 0 {
            return Err(field_error("estimation.lipschitz_samples", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&e.slack) {
            return Err(field_error("estimation.slack", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn plant_model(&self) -> Result<PlantModel, CliError> {
        match &self.plant {
            PlantConfig::Chen { mu } => Ok(PlantModel::chen(*mu)),
            PlantConfig::Linear { a, b } => {
                let (nx, nu) = (self.nx(), self.nu());
                let plant = LinearPlant { a: matrix("plant.a", a, (nx, nx))?, b: matrix("plant.b", b, (nx, nu))? };
                PlantModel::new(plant).map_err(|e| field_error("plant", e))
            }
        }
    }

    pub fn ocp_spec(&self) -> Result<OcpSpec, CliError> {
        let o = &self.ocp;
        let (nx, nu) = (self.nx(), self.nu());
        OcpSpec::new(
            self.plant_model()?,
            o.n_intervals,
            o.horizon,
            matrix("ocp.q", &o.q, (nx, nx))?,
            matrix("ocp.r", &o.r, (nu, nu))?,
            DVector::from_vec(o.u_lo.clone()),
            DVector::from_vec(o.u_hi.clone()),
            o.rk4_substeps,
        )
        .map_err(|e| field_error("ocp", e))
    }

    pub fn rti_settings(&self) -> RtiSettings {
        let r = &self.rti;
        RtiSettings {
            lm_shift: r.lm_shift,
            kkt_tol: r.kkt_tol,
            max_oracle_iters: r.max_oracle_iters,
            shift_warmstart: r.shift_warmstart,
            primal_only_error: r.primal_only_error,
        }
    }

    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.initial.states.iter().map(|s| DVector::from_vec(s.clone())).collect()
    }

    pub fn estimation_config(&self, seed: u64) -> EstimationConfig {
        let e = &self.estimation;
        EstimationConfig {
            sampling_time: self.sampling_time,
            initial_conditions: self.initial_states(),
            n_steps: self.n_steps,
            q: e.q,
            t1_horizon: e.t1_horizon,
            rho: e.rho,
            kappa_radii: e.kappa_radii.clone(),
            x_radii: e.x_radii.clone(),
            n_probe: e.n_probe,
            probe_stride: e.probe_stride,
            random_pairs: e.random_pairs,
            lipschitz_samples: e.lipschitz_samples,
            slack: e.slack,
            seed,
        }
    }
}

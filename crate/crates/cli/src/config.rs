//! Experiment configuration. Every section is optional; see `CONFIG.md`.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use wcalc::calculus::DerivCheckConfig;
use wcalc::filtering::control::ControlPath;
use wcalc::filtering::value::McConfig;
use wcalc::filtering::FilterModel;
use wcalc::fourier::build_grid;
use wcalc::ishii::SandwichMode;
use wcalc::ishii::SandwichStatus;
use wcalc::measures::MeasureFile;
use wcalc::{GaugeParams, ParticleMeasure, QuadratureGrid};

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Must match the experiment named on the command line when present.
    pub experiment: Option<String>,
    pub dim: Option<usize>,
    pub grid_level: Option<u32>,
    pub lambda: Option<u32>,
    pub gauge: Option<GaugeParams>,
    pub mu: Option<MeasureFile>,
    pub nu: Option<MeasureFile>,
    pub model: Option<ModelRef>,
    pub mu0: Option<MeasureFile>,
    pub mc: McSettings,
    pub derivcheck: Option<DerivCheckConfig>,
    pub ishii: IshiiSettings,
    pub filter: FilterSettings,
    pub value: ValueSettings,
    pub dpp: DppSettings,
    pub ito: ItoSettings,
    pub noncompleteness: NoncompletenessSettings,
}

/// A bundled model by id, or a full inline model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Named {
        id: String,
    },
    Inline(Box<FilterModel>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSettings {
    pub n_paths: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub node_budget: Option<usize>,
}

impl Default for McSettings {
    fn default() -> Self {
        Self { n_paths: 200, n_particles: 16, dt: 0.01, node_budget: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichCase {
    pub x: Rows,
    pub x_tilde: Rows,
    pub alpha: f64,
    pub epsilon: f64,
    pub mode: SandwichMode,
    #[serde(default)]
    pub expected: Option<SandwichStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoublingSettings {
    pub epsilons: Vec<f64>,
    pub kappa: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub ys: Vec<f64>,
    pub times: Vec<f64>,
}

impl Default for DoublingSettings {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.01],
            kappa: 1e-4,
            means: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            stds: vec![0.5, 1.0],
            ys: vec![-0.2, 0.0, 0.2],
            times: vec![0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IshiiSettings {
    /// Defaults to the three constructed instances in `d = 1`.
    pub sandwich: Option<Vec<SandwichCase>>,
    pub jets: bool,
    pub doubling: Option<DoublingSettings>,
}

impl Default for IshiiSettings {
    fn default() -> Self {
        Self { sandwich: None, jets: true, doubling: Some(DoublingSettings::default()) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSettings {
    /// Defaults to control 0 on `[0, T]`.
    pub control: Option<ControlPath>,
    pub path: u64,
    /// Offsets `s − t` of the moment check; empty disables it.
    pub offsets: Vec<f64>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self { control: None, path: 0, offsets: vec![0.02, 0.04, 0.06, 0.08, 0.1] }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueSettings {
    /// Defaults to `[0, T/2, T]`.
    pub breakpoints: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DppSettings {
    pub t: f64,
    /// Defaults to `T/2`.
    pub r: Option<f64>,
    pub later: Vec<f64>,
    pub inner_paths: usize,
}

impl Default for DppSettings {
    fn default() -> Self {
        Self { t: 0.0, r: None, later: Vec::new(), inner_paths: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItoSettings {
    pub t: f64,
    pub control: usize,
    pub deltas: Vec<f64>,
    pub substeps: usize,
    pub gh_points: usize,
    pub functionals: Vec<String>,
    /// Step of the Monte-Carlo rate check of `|m|²`; `None` skips it.
    pub rate_delta: Option<f64>,
}

impl Default for ItoSettings {
    fn default() -> Self {
        Self {
            t: 0.0,
            control: 0,
            deltas: vec![0.1, 0.05, 0.025],
            substeps: 4,
            gh_points: 3,
            functionals: vec!["mean_coordinate".into(), "mean_norm_sq".into(), "sin_quad".into()],
            rate_delta: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoncompletenessSettings {
    pub n_min: u32,
    pub n_max: u32,
}

impl Default for NoncompletenessSettings {
    fn default() -> Self {
        Self { n_min: 4, n_max: 1024 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn grid(&self, dim: usize, level_override: Option<u32>) -> wcalc::Result<QuadratureGrid> {
        let default_level = match dim {
            1 => 6,
            2 => 4,
            _ => 3,
        };
        let level = level_override.or(self.grid_level).unwrap_or(default_level);
        build_grid(dim, self.lambda.unwrap_or_else(|| QuadratureGrid::default_lambda(dim)), level)
    }

    pub fn gauge(&self, dim: usize) -> GaugeParams {
        self.gauge.unwrap_or_else(|| GaugeParams::default_for(dim))
    }

    /// `μ` and `ν`, defaulting to `½δ₋₁ + ½δ₁` and `½δ₀ + ½δ₂` along `e₁`.
    pub fn measure_pair(&self) -> wcalc::Result<(ParticleMeasure, ParticleMeasure)> {
        let dim = self.dim.unwrap_or(1);
        let two_point = |a: f64, b: f64| {
            let at = |v: f64| DVector::from_fn(dim, |i, _| if i == 0 { v } else { 0.0 });
            ParticleMeasure::uniform(vec![at(a), at(b)])
        };
        let mu = match &self.mu {
            Some(f) => f.clone().into_measure()?,
            None => two_point(-1.0, 1.0)?,
        };
        let nu = match &self.nu {
            Some(f) => f.clone().into_measure()?,
            None => two_point(0.0, 2.0)?,
        };
        Ok((mu, nu))
    }

    pub fn model(&self, default_id: &str) -> wcalc::Result<FilterModel> {
        let model = match &self.model {
            None => FilterModel::by_name(default_id)?,
            Some(ModelRef::Named { id }) => FilterModel::by_name(id)?,
            Some(ModelRef::Inline(m)) => (**m).clone(),
        };
        model.validate()?;
        Ok(model)
    }

    /// The configured initial law, or three atoms on the diagonal.
    pub fn mu0(&self, dim: usize) -> wcalc::Result<ParticleMeasure> {
        match &self.mu0 {
            Some(f) => f.clone().into_measure(),
            None => ParticleMeasure::new(
                [-0.5, 0.2, 0.8].iter().map(|&v| DVector::from_element(dim, v)).collect(),
                vec![0.3, 0.4, 0.3],
            ),
        }
    }

    pub fn mc(&self, seed: u64) -> McConfig {
        let mut c = McConfig::new(self.mc.n_paths, self.mc.n_particles, self.mc.dt, seed);
        if let Some(b) = self.mc.node_budget {
            c.node_budget = b;
        }
        c
    }
}

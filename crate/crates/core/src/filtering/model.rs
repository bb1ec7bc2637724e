//! Coefficient registry and the controlled model
//! `dX = b(X,α)ds + σ(X,α)dV + σ̃(α)dW` with costs `f(X,α)`, `g(X)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix as it appears in JSON.
pub type Rows = Vec<Vec<f64>>;

fn to_matrix(rows: &Rows) -> DMatrix<f64> {
    let (r, c) = (rows.len(), rows.first().map_or(0, Vec::len));
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

fn check_shape(rows: &Rows, r: usize, c: usize, what: &str) -> Result<()> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidParameter(format!("{what} must be {r}x{c}")));
    }
    Ok(())
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::InvalidParameter(format!("{what} must have length {n}, got {}", v.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftFamily {
    Zero,
    Constant { c: Vec<f64> },
    /// `b_i(x) = amplitude_i sin(frequency x_i + phase)`.
    Sinusoidal {
        amplitude: Vec<f64>,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
}

/// `b(x, a) = base(x) + G a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    #[serde(flatten)]
    pub family: DriftFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_gain: Option<Rows>,
}

impl DriftSpec {
    pub fn zero() -> Self {
        Self { family: DriftFamily::Zero, control_gain: None }
    }

    pub fn eval(&self, x: &DVector<f64>, a: &[f64]) -> DVector<f64> {
        let mut out = match &self.family {
            DriftFamily::Zero => DVector::zeros(x.len()),
            DriftFamily::Constant { c } => DVector::from_column_slice(c),
            DriftFamily::Sinusoidal { amplitude, frequency, phase } => {
                DVector::from_fn(x.len(), |i, _| amplitude[i] * (frequency * x[i] + phase).sin())
            }
        };
        if let Some(g) = &self.control_gain {
            for (i, row) in g.iter().enumerate() {
                out[i] += dot(row, a);
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, DriftFamily::Zero) && self.control_gain.is_none()
    }

    fn validate(&self, d: usize, dc: usize) -> Result<()> {
        match &self.family {
            DriftFamily::Zero => {}
            DriftFamily::Constant { c } => check_len(c, d, "drift.c")?,
            DriftFamily::Sinusoidal { amplitude, .. } => check_len(amplitude, d, "drift.amplitude")?,
        }
        if let Some(g) = &self.control_gain {
            check_shape(g, d, dc, "drift.control_gain")?;
        }
        Ok(())
    }
}

/// Idiosyncratic volatility `σ(x, a)`, a `d × d1` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSpec {
    Zero,
    Constant { matrix: Rows },
    /// `matrix · (1 + gain·a)`.
    ControlScaled { matrix: Rows, gain: Vec<f64> },
    /// `matrix · (1 + amplitude sin(frequency x₁))`.
    Modulated { matrix: Rows, amplitude: f64, frequency: f64 },
}

impl SigmaSpec {
    pub fn eval(&self, x: &DVector<f64>, a: &[f64], d: usize, d1: usize) -> DMatrix<f64> {
        match self {
            SigmaSpec::Zero => DMatrix::zeros(d, d1),
            SigmaSpec::Constant { matrix } => to_matrix(matrix),
            SigmaSpec::ControlScaled { matrix, gain } => to_matrix(matrix) * (1.0 + dot(gain, a)),
            SigmaSpec::Modulated { matrix, amplitude, frequency } => {
                to_matrix(matrix) * (1.0 + amplitude * (frequency * x[0]).sin())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SigmaSpec::Zero)
    }

    fn validate(&self, d: usize, d1: usize, dc: usize, what: &str) -> Result<()> {
        match self {
            SigmaSpec::Zero => Ok(()),
            SigmaSpec::Constant { matrix } | SigmaSpec::Modulated { matrix, .. } => check_shape(matrix, d, d1, what),
            SigmaSpec::ControlScaled { matrix, gain } => {
                check_shape(matrix, d, d1, what)?;
                check_len(gain, dc, "gain")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCost {
    Zero,
    /// `linear·a + quadratic |a|²`, independent of the state.
    Control {
        linear: Vec<f64>,
        #[serde(default)]
        quadratic: f64,
    },
    /// `amplitude exp(−|x − center|²/(2 width²)) + control_quadratic |a|²`.
    GaussianDecay {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        control_quadratic: f64,
    },
}

impl RunningCost {
    pub fn eval(&self, x: &DVector<f64>, a: &[f64]) -> f64 {
        match self {
            RunningCost::Zero => 0.0,
            RunningCost::Control { linear, quadratic } => dot(linear, a) + quadratic * dot(a, a),
            RunningCost::GaussianDecay { amplitude, center, width, control_quadratic } => {
                gaussian_bump(x, center, *width) * amplitude + control_quadratic * dot(a, a)
            }
        }
    }

    /// `true` when the cost does not depend on the state.
    pub fn control_only(&self) -> bool {
        matches!(self, RunningCost::Zero | RunningCost::Control { .. })
    }

    fn validate(&self, d: usize, dc: usize) -> Result<()> {
        match self {
            RunningCost::Zero => Ok(()),
            RunningCost::Control { linear, .. } => check_len(linear, dc, "running_cost.linear"),
            RunningCost::GaussianDecay { center, width, .. } => {
                check_len(center, d, "running_cost.center")?;
                positive(*width, "running_cost.width")
            }
        }
    }
}

fn gaussian_bump(x: &DVector<f64>, center: &[f64], width: f64) -> f64 {
    let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    (-r2 / (2.0 * width * width)).exp()
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCost {
    Constant { value: f64 },
    Linear { coef: Vec<f64> },
    GaussianDecay { amplitude: f64, center: Vec<f64>, width: f64 },
}

impl TerminalCost {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalCost::Constant { value } => *value,
            TerminalCost::Linear { coef } => dot(coef, x.as_slice()),
            TerminalCost::GaussianDecay { amplitude, center, width } => amplitude * gaussian_bump(x, center, *width),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            TerminalCost::Constant { .. } => Ok(()),
            TerminalCost::Linear { coef } => check_len(coef, d, "terminal_cost.coef"),
            TerminalCost::GaussianDecay { center, width, .. } => {
                check_len(center, d, "terminal_cost.center")?;
                positive(*width, "terminal_cost.width")
            }
        }
    }
}

/// The controlled dynamics, costs, finite control set and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterModel {
    pub dim: usize,
    /// Dimension of the idiosyncratic noise `V`.
    pub dim_v: usize,
    /// Dimension of the common noise `W`.
    pub dim_w: usize,
    pub horizon: f64,
    /// The control set `A`; each control is a vector.
    pub controls: Vec<Vec<f64>>,
    pub drift: DriftSpec,
    pub sigma: SigmaSpec,
    pub sigma_tilde: SigmaSpec,
    pub running_cost: RunningCost,
    pub terminal_cost: TerminalCost,
}

impl FilterModel {
    pub fn control_dim(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn b(&self, x: &DVector<f64>, a: usize) -> DVector<f64> {
        self.drift.eval(x, &self.controls[a])
    }

    pub fn sigma(&self, x: &DVector<f64>, a: usize) -> DMatrix<f64> {
        self.sigma.eval(x, &self.controls[a], self.dim, self.dim_v)
    }

    pub fn sigma_tilde(&self, a: usize) -> DMatrix<f64> {
        // σ̃ has no state argument; the dummy is never read.
        self.sigma_tilde.eval(&DVector::zeros(self.dim), &self.controls[a], self.dim, self.dim_w)
    }

    pub fn f(&self, x: &DVector<f64>, a: usize) -> f64 {
        self.running_cost.eval(x, &self.controls[a])
    }

    pub fn g(&self, x: &DVector<f64>) -> f64 {
        self.terminal_cost.eval(x)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dim must be positive".into()));
        }
        positive(self.horizon, "horizon")?;
        if self.controls.is_empty() {
            return Err(Error::InvalidParameter("control set must be nonempty".into()));
        }
        let dc = self.control_dim();
        if self.controls.iter().any(|a| a.len() != dc || a.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParameter("controls must be finite vectors of equal length".into()));
        }
        if matches!(self.sigma_tilde, SigmaSpec::Modulated { .. }) {
            return Err(Error::InvalidParameter("sigma_tilde cannot depend on the state".into()));
        }
        self.drift.validate(self.dim, dc)?;
        self.sigma.validate(self.dim, self.dim_v, dc, "sigma.matrix")?;
        self.sigma_tilde.validate(self.dim, self.dim_w, dc, "sigma_tilde.matrix")?;
        self.running_cost.validate(self.dim, dc)?;
        self.terminal_cost.validate(self.dim)?;
        self.sampled_check()
    }

    /// Evaluates every coefficient at random states for every control.
    fn sampled_check(&self) -> Result<()> {
        let mut rng = crate::rng::stream(0x5eed, 0);
        for _ in 0..32 {
            let x = DVector::from_fn(self.dim, |_, _| rng.random_range(-10.0..10.0));
            for a in 0..self.n_controls() {
                let fin = self.b(&x, a).iter().all(|v| v.is_finite())
                    && self.sigma(&x, a).iter().all(|v| v.is_finite())
                    && self.sigma_tilde(a).iter().all(|v| v.is_finite())
                    && self.f(&x, a).is_finite()
                    && self.g(&x).is_finite();
                if !fin {
                    return Err(Error::NonFinite(format!("model coefficients at control {a}")));
                }
            }
        }
        Ok(())
    }

    /// Whether every coefficient family is globally bounded. A linear
    /// terminal cost is the only unbounded family.
    pub fn bounded_coefficients(&self) -> bool {
        !matches!(self.terminal_cost, TerminalCost::Linear { .. })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    /// Only common noise: `b = σ = 0`, `σ̃` constant, zero costs.
    pub fn sigma_tilde_only(sigma_tilde: Rows, horizon: f64) -> Self {
        let dim = sigma_tilde.len();
        let dim_w = sigma_tilde.first().map_or(0, Vec::len);
        Self {
            dim,
            dim_v: 1,
            dim_w,
            horizon,
            controls: vec![vec![0.0]],
            drift: DriftSpec::zero(),
            sigma: SigmaSpec::Zero,
            sigma_tilde: SigmaSpec::Constant { matrix: sigma_tilde },
            running_cost: RunningCost::Zero,
            terminal_cost: TerminalCost::Constant { value: 0.0 },
        }
    }

    /// `f(x, a) = a` for scalar controls and constant `g`; dynamics with
    /// unit common noise in `d = 1`.
    pub fn control_separable(controls: &[f64], terminal: f64, horizon: f64) -> Self {
        Self {
            dim: 1,
            dim_v: 1,
            dim_w: 1,
            horizon,
            controls: controls.iter().map(|&a| vec![a]).collect(),
            drift: DriftSpec { family: DriftFamily::Zero, control_gain: Some(vec![vec![1.0]]) },
            sigma: SigmaSpec::Constant { matrix: vec![vec![0.3]] },
            sigma_tilde: SigmaSpec::Constant { matrix: vec![vec![1.0]] },
            running_cost: RunningCost::Control { linear: vec![1.0], quadratic: 0.0 },
            terminal_cost: TerminalCost::Constant { value: terminal },
        }
    }

    /// Bounded example in `d = 1`: sinusoidal drift steered by the control,
    /// state-modulated idiosyncratic noise, control-scaled common noise and
    /// Gaussian-decay costs.
    pub fn example_gaussian_decay() -> Self {
        Self {
            dim: 1,
            dim_v: 1,
            dim_w: 1,
            horizon: 1.0,
            controls: vec![vec![-1.0], vec![0.0], vec![1.0]],
            drift: DriftSpec {
                family: DriftFamily::Sinusoidal { amplitude: vec![0.5], frequency: 1.0, phase: 0.0 },
                control_gain: Some(vec![vec![0.5]]),
            },
            sigma: SigmaSpec::Modulated { matrix: vec![vec![0.4]], amplitude: 0.5, frequency: 1.0 },
            sigma_tilde: SigmaSpec::ControlScaled { matrix: vec![vec![0.3]], gain: vec![0.5] },
            running_cost: RunningCost::GaussianDecay {
                amplitude: 1.0,
                center: vec![0.5],
                width: 0.7,
                control_quadratic: 0.1,
            },
            terminal_cost: TerminalCost::GaussianDecay { amplitude: -1.0, center: vec![1.0], width: 0.5 },
        }
    }

    /// Bounded example in `d = 2` with constant noise matrices.
    pub fn example_sinusoidal() -> Self {
        Self {
            dim: 2,
            dim_v: 2,
            dim_w: 1,
            horizon: 1.0,
            controls: vec![vec![-1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            drift: DriftSpec {
                family: DriftFamily::Sinusoidal { amplitude: vec![0.6, 0.3], frequency: 1.5, phase: 0.2 },
                control_gain: Some(vec![vec![0.4, 0.0], vec![0.0, 0.4]]),
            },
            sigma: SigmaSpec::Constant { matrix: vec![vec![0.3, 0.1], vec![0.0, 0.2]] },
            sigma_tilde: SigmaSpec::Constant { matrix: vec![vec![0.25], vec![0.15]] },
            running_cost: RunningCost::GaussianDecay {
                amplitude: 0.8,
                center: vec![0.0, 0.5],
                width: 1.0,
                control_quadratic: 0.05,
            },
            terminal_cost: TerminalCost::GaussianDecay { amplitude: 1.0, center: vec![0.5, 0.0], width: 0.8 },
        }
    }

    /// Looks up a bundled model by id.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gaussian_decay" => Ok(Self::example_gaussian_decay()),
            "sinusoidal" => Ok(Self::example_sinusoidal()),
            "sigma_tilde_only" => Ok(Self::sigma_tilde_only(vec![vec![0.5]], 1.0)),
            "control_separable" => Ok(Self::control_separable(&[0.5, -0.25, 1.0], 0.3, 1.0)),
            _ => Err(Error::Unknown { kind: "model", name: name.to_string() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_models_validate() {
        for name in ["gaussian_decay", "sinusoidal", "sigma_tilde_only", "control_separable"] {
            let m = FilterModel::by_name(name).unwrap();
            m.validate().unwrap();
            let back = FilterModel::from_json_str(&serde_json::to_string(&m).unwrap()).unwrap();
            assert_eq!(back, m);
        }
        assert!(FilterModel::by_name("nope").is_err());
    }

    #[test]
    fn json_families_parse() {
        let s = r#"{
            "dim": 1, "dim_v": 1, "dim_w": 1, "horizon": 0.5,
            "controls": [[0.0], [1.0]],
            "drift": {"family": "constant", "c": [0.2], "control_gain": [[1.0]]},
            "sigma": {"family": "zero"},
            "sigma_tilde": {"family": "control_scaled", "matrix": [[0.5]], "gain": [1.0]},
            "running_cost": {"family": "control", "linear": [2.0]},
            "terminal_cost": {"family": "linear", "coef": [1.0]}
        }"#;
        let m = FilterModel::from_json_str(s).unwrap();
        let x = DVector::from_element(1, 3.0);
        assert_eq!(m.b(&x, 1)[0], 1.2);
        assert_eq!(m.sigma_tilde(1)[(0, 0)], 1.0);
        assert_eq!(m.f(&x, 1), 2.0);
        assert_eq!(m.g(&x), 3.0);
        assert!(!m.bounded_coefficients());
    }

    #[test]
    fn shape_errors() {
        let mut m = FilterModel::example_gaussian_decay();
        m.sigma = SigmaSpec::Constant { matrix: vec![vec![1.0, 2.0]] };
        assert!(m.validate().is_err());
        let mut m = FilterModel::example_gaussian_decay();
        m.controls.clear();
        assert!(m.validate().is_err());
    }
}

//! Particle simulation of the conditional law through the shift
//! decomposition `m_s = (I + Y_s)_♯ m̃_s`, with
//! `Y_s = ∫ σ̃(α_u) dW_u` and `dX̃ = b(X̃ + Y, α)ds + σ(X̃ + Y, α)dV`.

use nalgebra::DVector;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::control::{sign_branch, ControlPath};
use super::model::FilterModel;
use crate::error::{Error, Result};
use crate::measures::ParticleMeasure;
use crate::reduce::{mean_and_stderr, pairwise_sum};
use crate::rng::{derive_seed, stream};

/// Splits the atoms of `mu0` into `n` particles by largest remainder; every
/// atom keeps at least one particle and its children share its weight
/// equally.
pub fn allocate_particles(mu0: &ParticleMeasure, n: usize) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let m = mu0.len();
    if n < m.max(1) {
        return Err(Error::InvalidParameter(format!("n_particles = {n} is below the {m} atoms of the initial measure")));
    }
    let quota: Vec<f64> = mu0.weights().iter().map(|w| w * n as f64).collect();
    let mut count: Vec<usize> = quota.iter().map(|q| (q.floor() as usize).max(1)).collect();
    let mut total: usize = count.iter().sum();
    // Remove surplus from atoms furthest above quota, then fill the deficit
    // by largest remainder; ties go to the lower index.
    while total > n {
        let j = (0..m)
            .filter(|&j| count[j] > 1)
            .max_by(|&a, &b| (count[a] as f64 - quota[a]).total_cmp(&(count[b] as f64 - quota[b])).then(b.cmp(&a)))
            .expect("n >= m leaves a reducible atom");
        count[j] -= 1;
        total -= 1;
    }
    if total < n {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| (quota[b] - count[b] as f64).total_cmp(&(quota[a] - count[a] as f64)).then(a.cmp(&b)));
        for &j in order.iter().cycle().take(n - total) {
            count[j] += 1;
        }
    }
    let mut points = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for ((x, w), c) in mu0.iter().zip(&count) {
        for _ in 0..*c {
            points.push(x.clone());
            weights.push(w / *c as f64);
        }
    }
    Ok((points, weights))
}

/// `X̃` particles, their weights, and the common shift `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub tilde: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub y: DVector<f64>,
}

impl ParticleState {
    pub fn new(mu0: &ParticleMeasure, n_particles: usize) -> Result<Self> {
        let (tilde, weights) = allocate_particles(mu0, n_particles)?;
        Ok(Self { y: DVector::zeros(mu0.dim()), tilde, weights })
    }

    pub fn len(&self) -> usize {
        self.tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tilde.is_empty()
    }

    /// `m_s(h) = Σ w_i h(X̃_i + Y)`.
    pub fn integrate<H: Fn(&DVector<f64>) -> f64>(&self, h: H) -> f64 {
        let v: Vec<f64> = self.tilde.iter().zip(&self.weights).map(|(x, w)| w * h(&(x + &self.y))).collect();
        pairwise_sum(&v)
    }

    pub fn tilde_measure(&self) -> ParticleMeasure {
        ParticleMeasure::new(self.tilde.clone(), self.weights.clone()).expect("weights stay normalized")
    }

    /// The same particles as the initial state of a new problem: `X̃ + Y`
    /// with `Y = 0`.
    pub fn restart(&self) -> Self {
        Self { tilde: self.tilde.iter().map(|x| x + &self.y).collect(), weights: self.weights.clone(), y: DVector::zeros(self.y.len()) }
    }

    /// `m_s = (I + Y_s)_♯ m̃_s`.
    pub fn measure(&self) -> ParticleMeasure {
        let pts = self.tilde.iter().map(|x| x + &self.y).collect();
        ParticleMeasure::new(pts, self.weights.clone()).expect("weights stay normalized")
    }
}

/// Snapshot passed to path observers at every grid time `k = 0..=N`.
pub struct StepView<'a> {
    pub k: usize,
    pub time: f64,
    pub state: &'a ParticleState,
    /// Control about to act on `[s_k, s_{k+1})`; `None` at the final time.
    pub control: Option<usize>,
    /// Increment `W_{s_k} − W_{s_{k−1}}`; `None` at `k = 0`.
    pub last_dw: Option<&'a DVector<f64>>,
}

/// Random streams of one path: stream 0 drives `W`, stream `i + 1` drives
/// `V^i`. No draw depends on the control.
struct PathNoise {
    w: ChaCha12Rng,
    v: Vec<ChaCha12Rng>,
}

impl PathNoise {
    fn new(path_seed: u64, n_particles: usize, idiosyncratic: bool) -> Self {
        let v = if idiosyncratic { (0..n_particles).map(|i| stream(path_seed, i as u64 + 1)).collect() } else { Vec::new() };
        Self { w: stream(path_seed, 0), v }
    }
}

fn normals(rng: &mut ChaCha12Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Seed of Monte-Carlo path `path` under experiment seed `seed`.
pub fn path_seed(seed: u64, path: u64) -> u64 {
    derive_seed(seed, path)
}

/// One Euler–Maruyama path from `state` under `control`, calling `observe`
/// at every grid time. Returns the final state and the sign branch of the
/// common-noise increment over each stage.
pub fn simulate_path<O>(
    model: &FilterModel,
    mut state: ParticleState,
    control: &ControlPath,
    dt: f64,
    path_seed: u64,
    mut observe: O,
) -> Result<(ParticleState, Vec<usize>)>
where
    O: FnMut(StepView<'_>),
{
    control.validate(model.n_controls(), model.dim_w)?;
    let steps = control.steps_per_stage(dt)?;
    let idiosyncratic = !model.sigma.is_zero();
    let mut noise = PathNoise::new(path_seed, state.len(), idiosyncratic);
    let sqrt_dt = dt.sqrt();
    let mut history = Vec::with_capacity(steps.len());
    let mut k = 0usize;
    let mut last_dw: Option<DVector<f64>> = None;
    for (stage, &n_steps) in steps.iter().enumerate() {
        let a = control.control(stage, &history, model.dim_w);
        let (drift_zero, st) = (model.drift.is_zero(), model.sigma_tilde(a));
        let start = control.breakpoints[stage];
        let mut stage_dw = DVector::zeros(model.dim_w);
        for j in 0..n_steps {
            observe(StepView { k, time: start + j as f64 * dt, state: &state, control: Some(a), last_dw: last_dw.as_ref() });
            let dw = normals(&mut noise.w, model.dim_w) * sqrt_dt;
            if !drift_zero || idiosyncratic {
                let y = state.y.clone();
                for (i, x) in state.tilde.iter_mut().enumerate() {
                    let at = &*x + &y;
                    let mut inc = if drift_zero { DVector::zeros(model.dim) } else { model.b(&at, a) * dt };
                    if idiosyncratic {
                        inc += model.sigma(&at, a) * normals(&mut noise.v[i], model.dim_v) * sqrt_dt;
                    }
                    *x += inc;
                }
            }
            state.y += &st * &dw;
            stage_dw += &dw;
            last_dw = Some(dw);
            k += 1;
        }
        history.push(sign_branch(&stage_dw));
    }
    observe(StepView { k, time: control.end(), state: &state, control: None, last_dw: last_dw.as_ref() });
    Ok((state, history))
}

/// A recorded path of the conditional law.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFlow {
    pub times: Vec<f64>,
    pub y_path: Vec<DVector<f64>>,
    pub tilde: Vec<ParticleMeasure>,
    pub controls: Vec<usize>,
}

impl ConditionalFlow {
    /// `m_{s_k} = (I + Y_{s_k})_♯ m̃_{s_k}`.
    pub fn measure(&self, k: usize) -> ParticleMeasure {
        self.tilde[k].translate(&self.y_path[k])
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with one row per time: `time,control,y_1..y_d,mean_1..mean_d`.
    pub fn to_csv(&self) -> String {
        let d = self.y_path.first().map_or(0, |y| y.len());
        let mut out = String::from("time,control");
        for i in 0..d {
            out.push_str(&format!(",y{}", i + 1));
        }
        for i in 0..d {
            out.push_str(&format!(",mean{}", i + 1));
        }
        out.push('\n');
        for k in 0..self.len() {
            let c = self.controls.get(k).map_or(String::new(), |c| c.to_string());
            out.push_str(&format!("{:e},{c}", self.times[k]));
            for v in self.y_path[k].iter() {
                out.push_str(&format!(",{v:e}"));
            }
            let m = self.measure(k).mean();
            for v in m.iter() {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Records path `path` of the particle system.
pub fn simulate_flow(
    model: &FilterModel,
    mu0: &ParticleMeasure,
    control: &ControlPath,
    n_particles: usize,
    dt: f64,
    seed: u64,
    path: u64,
) -> Result<ConditionalFlow> {
    if mu0.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: mu0.dim() });
    }
    let mut flow = ConditionalFlow { times: Vec::new(), y_path: Vec::new(), tilde: Vec::new(), controls: Vec::new() };
    simulate_path(model, ParticleState::new(mu0, n_particles)?, control, dt, path_seed(seed, path), |v| {
        flow.times.push(v.time);
        flow.y_path.push(v.state.y.clone());
        flow.tilde.push(v.state.tilde_measure());
        if let Some(a) = v.control {
            flow.controls.push(a);
        }
    })?;
    Ok(flow)
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let (mean, std_error) = mean_and_stderr(v);
        Self { mean, std_error, n: v.len() }
    }
}

/// Costs and end state of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    /// Left Riemann sum of `m_s(f(·, α_s))`.
    pub running: f64,
    /// `m_T(g)` at the end of the control path.
    pub terminal: f64,
    pub state: ParticleState,
    pub history: Vec<usize>,
}

impl PathOutcome {
    pub fn total(&self) -> f64 {
        self.running + self.terminal
    }
}

pub fn path_cost(
    model: &FilterModel,
    state: ParticleState,
    control: &ControlPath,
    dt: f64,
    path_seed: u64,
) -> Result<PathOutcome> {
    let mut running = Vec::new();
    let mut terminal = 0.0;
    let (state, history) = simulate_path(model, state, control, dt, path_seed, |v| match v.control {
        Some(a) => running.push(dt * v.state.integrate(|x| model.f(x, a))),
        None => terminal = v.state.integrate(|x| model.g(x)),
    })?;
    Ok(PathOutcome { running: pairwise_sum(&running), terminal, state, history })
}

fn check_inputs(model: &FilterModel, mu0: &ParticleMeasure, n_paths: usize) -> Result<()> {
    if mu0.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: mu0.dim() });
    }
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be positive".into()));
    }
    Ok(())
}

/// Per-path costs for paths `0..n_paths`.
pub fn path_costs(
    model: &FilterModel,
    mu0: &ParticleMeasure,
    control: &ControlPath,
    n_paths: usize,
    n_particles: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(model, mu0, n_paths)?;
    let state = ParticleState::new(mu0, n_particles)?;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| path_cost(model, state.clone(), control, dt, path_seed(seed, p)).map(|c| c.total()))
        .collect()
}

/// `J(t, μ, α) = E[∫_t^T f(X_s, α_s) ds + g(X_T)]`, with `t` the first
/// breakpoint of the control.
pub fn cost_j(
    model: &FilterModel,
    mu0: &ParticleMeasure,
    control: &ControlPath,
    n_paths: usize,
    n_particles: usize,
    dt: f64,
    seed: u64,
) -> Result<Estimate> {
    Ok(Estimate::from_samples(&path_costs(model, mu0, control, n_paths, n_particles, dt, seed)?))
}

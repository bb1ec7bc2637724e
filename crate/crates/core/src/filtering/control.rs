//! Piecewise-constant controls adapted to the common noise.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptedness {
    /// One control per interval, fixed in advance.
    OpenLoop,
    /// The control on interval `k` depends on the signs of the common-noise
    /// increments over intervals `0..k`.
    WScenarioTree,
}

/// Controls (indices into the model's control set) on the intervals
/// `[breakpoints[k], breakpoints[k+1])`.
///
/// For a scenario tree the values are listed per node of the complete
/// `2^{d2}`-ary tree in breadth-first order, so stage `k` owns
/// `(2^{d2})^k` consecutive entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub breakpoints: Vec<f64>,
    pub values: Vec<usize>,
    pub adaptedness: Adaptedness,
}

/// Number of sign branches per stage for `d2`-dimensional common noise.
pub fn branching(dim_w: usize) -> usize {
    1usize << dim_w
}

/// Branch index of a common-noise increment: bit `i` is set when the `i`-th
/// coordinate is nonnegative.
pub fn sign_branch(dw: &DVector<f64>) -> usize {
    dw.iter().enumerate().fold(0, |acc, (i, v)| if *v >= 0.0 { acc | (1 << i) } else { acc })
}

/// Node count of a complete `b`-ary tree with `stages` levels.
pub fn tree_size(b: usize, stages: usize) -> usize {
    (0..stages).map(|k| b.pow(k as u32)).sum()
}

/// Breadth-first index of the node reached at `stage` by `history`, the
/// branch indices of the earlier stages.
pub fn tree_node(b: usize, history: &[usize]) -> usize {
    let k = history.len();
    let offset = tree_size(b, k);
    offset + history.iter().fold(0, |acc, h| acc * b + h)
}

impl ControlPath {
    pub fn open_loop(breakpoints: Vec<f64>, values: Vec<usize>) -> Self {
        Self { breakpoints, values, adaptedness: Adaptedness::OpenLoop }
    }

    pub fn constant(t: f64, horizon: f64, a: usize) -> Self {
        Self::open_loop(vec![t, horizon], vec![a])
    }

    pub fn tree(breakpoints: Vec<f64>, values: Vec<usize>) -> Self {
        Self { breakpoints, values, adaptedness: Adaptedness::WScenarioTree }
    }

    pub fn stages(&self) -> usize {
        self.breakpoints.len().saturating_sub(1)
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        *self.breakpoints.last().expect("validated")
    }

    pub fn validate(&self, n_controls: usize, dim_w: usize) -> Result<()> {
        if self.breakpoints.len() < 2 {
            return Err(Error::InvalidParameter("a control path needs at least two breakpoints".into()));
        }
        if self.breakpoints.windows(2).any(|w| !(w[1] > w[0])) || self.breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("breakpoints must be finite and strictly increasing".into()));
        }
        let want = match self.adaptedness {
            Adaptedness::OpenLoop => self.stages(),
            Adaptedness::WScenarioTree => tree_size(branching(dim_w), self.stages()),
        };
        if self.values.len() != want {
            return Err(Error::InvalidParameter(format!("expected {want} control values, got {}", self.values.len())));
        }
        if let Some(&a) = self.values.iter().find(|&&a| a >= n_controls) {
            return Err(Error::InvalidParameter(format!("control index {a} out of range")));
        }
        Ok(())
    }

    /// Control on stage `k` given the branch history of stages `0..k`.
    pub fn control(&self, stage: usize, history: &[usize], dim_w: usize) -> usize {
        match self.adaptedness {
            Adaptedness::OpenLoop => self.values[stage],
            Adaptedness::WScenarioTree => self.values[tree_node(branching(dim_w), &history[..stage])],
        }
    }

    /// Number of `dt` steps in each stage; errors unless `dt` divides every
    /// interval.
    pub fn steps_per_stage(&self, dt: f64) -> Result<Vec<usize>> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        self.breakpoints
            .windows(2)
            .map(|w| {
                let n = (w[1] - w[0]) / dt;
                let r = n.round();
                if r < 1.0 || (n - r).abs() > 1e-6 * r.max(1.0) {
                    Err(Error::InvalidParameter(format!("dt = {dt} does not divide [{}, {}]", w[0], w[1])))
                } else {
                    Ok(r as usize)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_indexing() {
        assert_eq!(tree_size(2, 3), 7);
        assert_eq!(tree_node(2, &[]), 0);
        assert_eq!(tree_node(2, &[1]), 2);
        assert_eq!(tree_node(2, &[1, 0]), 5);
        assert_eq!(tree_node(4, &[3]), 4);
    }

    #[test]
    fn sign_branches() {
        assert_eq!(sign_branch(&DVector::from_vec(vec![-0.1])), 0);
        assert_eq!(sign_branch(&DVector::from_vec(vec![0.2, -1.0])), 1);
        assert_eq!(sign_branch(&DVector::from_vec(vec![-0.2, 1.0])), 2);
    }

    #[test]
    fn validation() {
        let p = ControlPath::tree(vec![0.0, 0.5, 1.0], vec![0, 1, 2]);
        p.validate(3, 1).unwrap();
        assert_eq!(p.control(1, &[1], 1), 2);
        assert!(p.validate(2, 1).is_err());
        assert!(ControlPath::open_loop(vec![0.0, 0.0], vec![0]).validate(1, 1).is_err());
        assert_eq!(p.steps_per_stage(0.1).unwrap(), vec![5, 5]);
        assert!(p.steps_per_stage(0.3).is_err());
    }
}

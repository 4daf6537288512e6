use crate::error::{Error, Result};

/// Uniform time grid `t_k = t0 + k Δt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

/// Default resolution of the solvers.
pub const DEFAULT_STEPS_PER_UNIT: usize = 1000;

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("time grid needs at least one step".into()));
        }
        if !(t0.is_finite() && t_end.is_finite() && t_end > t0) {
            return Err(Error::Domain(format!("invalid horizon [{t0}, {t_end}]")));
        }
        Ok(Self { t0, t_end, steps })
    }

    /// Grid with `ceil((T - t0) · per_unit)` steps.
    pub fn with_steps_per_unit(t0: f64, t_end: f64, per_unit: usize) -> Result<Self> {
        let steps = ((t_end - t0) * per_unit as f64).ceil().max(1.0) as usize;
        Self::new(t0, t_end, steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    /// Node `k`; the last node is exactly `T`.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Midpoint of step `k`, between nodes `k` and `k + 1`.
    pub fn midpoint(&self, k: usize) -> f64 {
        0.5 * (self.node(k) + self.node(k + 1))
    }

    /// The same horizon with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { steps: self.steps * factor, ..*self }
    }
}

/// Composite Simpson rule on one step from endpoint and midpoint samples.
pub(crate) fn simpson(h: f64, left: f64, mid: f64, right: f64) -> f64 {
    h / 6.0 * (left + 4.0 * mid + right)
}

/// Cubic Hermite value at the midpoint of a step of length `h` from endpoint
/// values and time derivatives.
pub(crate) fn hermite_mid<T>(left: &T, right: &T, dleft: &T, dright: &T, h: f64) -> T
where
    T: Clone + std::ops::Add<Output = T> + std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    (left.clone() + right.clone()) * 0.5 + (dleft.clone() - dright.clone()) * (h / 8.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_end_exactly_at_horizon() {
        let tg = TimeGrid::new(0.3, 1.7, 7).unwrap();
        assert_eq!(tg.node(7), 1.7);
        assert!(tg.nodes().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tg.refined(2).steps(), 14);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert_eq!(TimeGrid::with_steps_per_unit(0.0, 2.5, 1000).unwrap().steps(), 2500);
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        let p = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t + 3.0 * t * t * t;
        let dp = |t: f64| -2.0 + t + 9.0 * t * t;
        let (a, b) = (0.2, 0.7);
        let m = hermite_mid(&p(a), &p(b), &dp(a), &dp(b), b - a);
        assert!((m - p(0.45)).abs() < 1e-14);
    }
}

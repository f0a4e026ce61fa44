use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::Result;
use crate::minimax::SamplePoint;
use crate::sde::{ControlAffineDynamics, CostModel, Policy, TimeGrid};

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// State `(pˣ, pʸ, s, φ)`, control `(a, ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnicycleScenario {
    pub goal: [f64; 2],
    pub unsafe_box: Rect,
    pub b: f64,
    pub eta: f64,
    pub sigma: f64,
    pub nu: f64,
    /// `R = r·I`
    pub control_weight: f64,
    pub horizon: f64,
    pub dt: f64,
    pub x0: [f64; 4],
    pub nominal: UnicycleNominal,
}

impl Default for UnicycleScenario {
    fn default() -> Self {
        Self {
            goal: [4.0, -1.0],
            unsafe_box: Rect { x_min: 2.5, x_max: 4.0, y_min: 0.5, y_max: 1.5 },
            b: 0.1,
            eta: 0.1,
            sigma: 0.1,
            nu: 0.1,
            control_weight: 1.0,
            horizon: 5.0,
            dt: 0.01,
            x0: [0.0, 0.0, 1.0, 0.0],
            nominal: UnicycleNominal::default(),
        }
    }
}

/// Saturated proportional go-to-goal law:
/// `ω = sat(k_heading · wrap(bearing − φ))`,
/// `a = sat(k_speed · (min(max_speed, k_distance · d) − s))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnicycleNominal {
    pub goal: [f64; 2],
    pub k_heading: f64,
    pub k_speed: f64,
    pub k_distance: f64,
    pub max_speed: f64,
    pub max_input: f64,
}

impl Default for UnicycleNominal {
    fn default() -> Self {
        Self { goal: [4.0, -1.0], k_heading: 0.14, k_speed: 0.5, k_distance: 1.0, max_speed: 1.0, max_input: 1.0 }
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        a
    } else {
        (a + PI).rem_euclid(2.0 * PI) - PI
    }
}

impl Policy for UnicycleNominal {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let (dx, dy) = (self.goal[0] - x[0], self.goal[1] - x[1]);
        let d = (dx * dx + dy * dy).sqrt();
        let heading_err = wrap_angle(dy.atan2(dx) - x[3]);
        let s_ref = self.max_speed.min(self.k_distance * d);
        let lim = self.max_input;
        out[0] = (self.k_speed * (s_ref - x[2])).clamp(-lim, lim);
        out[1] = (self.k_heading * heading_err).clamp(-lim, lim);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleDynamics {
    pub sigma: f64,
    pub nu: f64,
}

impl ControlAffineDynamics for UnicycleDynamics {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let (sin, cos) = x[3].sin_cos();
        out[0] = x[2] * cos;
        out[1] = x[2] * sin;
        out[2] = 0.0;
        out[3] = 0.0;
    }
    fn control_gain(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    }
    fn noise_gain(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, self.sigma, 0.0, 0.0, self.nu])
    }
    fn add_control(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[2] += u[0];
        out[3] += u[1];
    }
    fn add_noise(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[2] += self.sigma * v[0];
        out[3] += self.nu * v[1];
    }
}

/// `b‖G − p‖² + η·1[p ∈ box] + ½ r‖u‖²`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleCost {
    pub goal: [f64; 2],
    pub unsafe_box: Rect,
    pub b: f64,
    pub eta: f64,
    pub control_weight: f64,
    pub horizon: f64,
}

impl CostModel for UnicycleCost {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn state_cost(&self, _t: f64, x: &[f64]) -> f64 {
        let (dx, dy) = (self.goal[0] - x[0], self.goal[1] - x[1]);
        let mut c = self.b * (dx * dx + dy * dy);
        if self.unsafe_box.contains(x[0], x[1]) {
            c += self.eta;
        }
        c
    }
    fn control_weight(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.control_weight
    }
    fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        self.state_cost(t, x) + 0.5 * self.control_weight * (u[0] * u[0] + u[1] * u[1])
    }
}

impl Scenario for UnicycleScenario {
    type Dynamics = UnicycleDynamics;
    type Cost = UnicycleCost;
    type Nominal = UnicycleNominal;

    fn dynamics(&self) -> UnicycleDynamics {
        UnicycleDynamics { sigma: self.sigma, nu: self.nu }
    }
    fn cost(&self) -> UnicycleCost {
        UnicycleCost {
            goal: self.goal,
            unsafe_box: self.unsafe_box,
            b: self.b,
            eta: self.eta,
            control_weight: self.control_weight,
            horizon: self.horizon,
        }
    }
    fn nominal(&self) -> UnicycleNominal {
        UnicycleNominal { goal: self.goal, ..self.nominal }
    }
    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon, self.dt)
    }
    fn x0(&self) -> Vec<f64> {
        self.x0.to_vec()
    }
    fn is_unsafe(&self, x: &[f64]) -> bool {
        self.unsafe_box.contains(x[0], x[1])
    }
    fn sample_points(&self) -> Vec<SamplePoint> {
        let mut pts = Vec::new();
        for (i, px) in [-1.0, 0.0, 2.0, 4.5].into_iter().enumerate() {
            for py in [-1.5, 0.0, 1.0] {
                for phi in [-PI / 2.0, 0.0, 2.0] {
                    pts.push((self.horizon * i as f64 / 4.0, vec![px, py, 0.5 + i as f64 * 0.3, phi]));
                }
            }
        }
        pts
    }
    fn state_names(&self) -> &'static [&'static str] {
        &["px", "py", "s", "phi"]
    }
    fn control_names(&self) -> &'static [&'static str] {
        &["a", "omega"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::em_step;

    #[test]
    fn paper_parameters() {
        let s = UnicycleScenario::default();
        assert_eq!((s.b, s.eta, s.sigma, s.nu, s.horizon, s.dt), (0.1, 0.1, 0.1, 0.1, 5.0, 0.01));
        assert_eq!(s.control_weight, 1.0);
        assert_eq!(s.grid().unwrap().steps, 500);
    }

    #[test]
    fn drift_and_step() {
        let d = UnicycleScenario::default().dynamics();
        let mut f = [0.0; 4];
        d.drift(0.0, &[0.0, 0.0, 1.0, PI / 2.0], &mut f);
        assert!(f[0].abs() < 1e-16 && (f[1] - 1.0).abs() < 1e-16 && f[2] == 0.0 && f[3] == 0.0);
        let x = em_step(&d, 0.0, &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], 0.01).unwrap();
        assert_eq!(x, vec![0.01, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn fast_paths_match_matrices() {
        let d = UnicycleDynamics { sigma: 0.3, nu: 0.7 };
        struct Slow(UnicycleDynamics);
        impl ControlAffineDynamics for Slow {
            fn state_dim(&self) -> usize { 4 }
            fn control_dim(&self) -> usize { 2 }
            fn noise_dim(&self) -> usize { 2 }
            fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) { self.0.drift(t, x, out) }
            fn control_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64> { self.0.control_gain(t, x) }
            fn noise_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64> { self.0.noise_gain(t, x) }
        }
        let x = [0.1, 0.2, 0.9, 0.4];
        let a = em_step(&d, 0.0, &x, &[0.3, -0.2], &[1.0, 2.0], &[0.05, -0.02], 0.01).unwrap();
        let b = em_step(&Slow(d), 0.0, &x, &[0.3, -0.2], &[1.0, 2.0], &[0.05, -0.02], 0.01).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_covariance_is_singular() {
        let d = UnicycleScenario::default().dynamics();
        let h = d.noise_gain(0.0, &[0.0; 4]);
        assert_eq!((&h * h.transpose()).rank(1e-12), 2);
    }

    #[test]
    fn cost_terms() {
        let s = UnicycleScenario::default();
        let c = s.cost();
        assert_eq!(c.running_cost(0.0, &[4.0, -1.0, 1.0, 0.0], &[0.0, 0.0]), 0.0);
        let outside = c.state_cost(0.0, &[3.0, 0.4, 1.0, 0.0]);
        let inside = c.state_cost(0.0, &[3.0, 0.5, 1.0, 0.0]);
        assert!((outside - 0.1 * (1.0 + 1.96)).abs() < 1e-15);
        assert!((inside - (0.1 * (1.0 + 2.25) + 0.1)).abs() < 1e-15);
        assert!(s.is_unsafe(&[2.5, 1.5, 0.0, 0.0]));
        assert!(!s.is_unsafe(&[2.49, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn nominal_turns_toward_goal_and_saturates() {
        let n = UnicycleScenario::default().nominal();
        let mut u = [0.0; 2];
        n.eval(0.0, &[0.0, 0.0, 1.0, 0.0], &mut u);
        assert!(u[1] < 0.0);
        let strong = UnicycleNominal { k_heading: 100.0, ..n };
        strong.eval(0.0, &[0.0, 0.0, 1.0, 0.0], &mut u);
        assert_eq!(u[1], -1.0);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12 || (wrap_angle(3.0 * PI) + PI).abs() < 1e-12);
    }
}

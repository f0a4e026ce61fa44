use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::unicycle::wrap_angle;
use super::Scenario;
use crate::error::Result;
use crate::minimax::SamplePoint;
use crate::sde::{ControlAffineDynamics, CostModel, Policy, TimeGrid};

/// Wheel angles closer than this to ±π/2 leave the model's domain.
pub const WHEEL_ANGLE_MARGIN: f64 = 1e-3;

/// Kinematic car on a straight road. State `(pˣ, pʸ, s, δ, φ)` with heading
/// `δ` and front wheel angle `φ`; control `(a, ζ)`, acceleration and wheel
/// angle rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CruiseScenario {
    /// Inter-axle distance.
    pub wheelbase: f64,
    pub road_center: f64,
    pub road_half_width: f64,
    pub finish_x: f64,
    pub b: f64,
    pub eta: f64,
    pub sigma: f64,
    pub nu: f64,
    /// `R = r·I`
    pub control_weight: f64,
    pub horizon: f64,
    pub dt: f64,
    pub x0: [f64; 5],
    pub nominal: CruiseNominal,
}

impl Default for CruiseScenario {
    fn default() -> Self {
        Self {
            wheelbase: 0.05,
            road_center: 0.0,
            road_half_width: 0.5,
            finish_x: 4.0,
            b: 0.02,
            eta: 0.02,
            sigma: 0.005f64.sqrt(),
            nu: 0.005f64.sqrt(),
            control_weight: 4.0,
            horizon: 10.0,
            dt: 0.02,
            x0: [0.0, 0.0, 0.5, 0.0, 0.0],
            nominal: CruiseNominal::default(),
        }
    }
}

/// Saturated cascade lane keeper: lateral offset sets a heading reference,
/// heading error sets a wheel angle reference, and the wheel angle tracks it.
/// Speed tracks `min(target_speed, k_finish · (finish_x − pˣ)⁺)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CruiseNominal {
    pub road_center: f64,
    pub finish_x: f64,
    pub wheelbase: f64,
    pub target_speed: f64,
    pub k_finish: f64,
    pub k_speed: f64,
    pub k_lateral: f64,
    pub max_heading: f64,
    pub k_heading: f64,
    pub k_wheel: f64,
    pub max_input: f64,
}

impl Default for CruiseNominal {
    fn default() -> Self {
        Self {
            road_center: 0.0,
            finish_x: 4.0,
            wheelbase: 0.05,
            target_speed: 0.5,
            k_finish: 0.5,
            k_speed: 0.5,
            k_lateral: 0.5,
            max_heading: 0.5,
            k_heading: 1.0,
            k_wheel: 4.0,
            max_input: 1.0,
        }
    }
}

impl Policy for CruiseNominal {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let lim = self.max_input;
        let s_ref = self.target_speed.min(self.k_finish * (self.finish_x - x[0]).max(0.0));
        out[0] = (self.k_speed * (s_ref - x[2])).clamp(-lim, lim);
        let heading_ref = (-self.k_lateral * (x[1] - self.road_center)).clamp(-self.max_heading, self.max_heading);
        let yaw_rate = self.k_heading * wrap_angle(heading_ref - x[3]);
        let wheel_ref = (self.wheelbase * yaw_rate / x[2].max(0.1)).atan();
        out[1] = (self.k_wheel * (wheel_ref - x[4])).clamp(-lim, lim);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CruiseDynamics {
    pub wheelbase: f64,
    pub sigma: f64,
    pub nu: f64,
}

impl ControlAffineDynamics for CruiseDynamics {
    fn state_dim(&self) -> usize {
        5
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
        out[3] = x[2] * x[4].tan() / self.wheelbase;
        out[4] = 0.0;
    }
    fn control_gain(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(5, 2);
        g[(2, 0)] = 1.0;
        g[(4, 1)] = 1.0;
        g
    }
    fn noise_gain(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(5, 2);
        h[(2, 0)] = self.sigma;
        h[(4, 1)] = self.nu;
        h
    }
    fn add_control(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[2] += u[0];
        out[4] += u[1];
    }
    fn add_noise(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[2] += self.sigma * v[0];
        out[4] += self.nu * v[1];
    }
    fn in_domain(&self, _t: f64, x: &[f64]) -> bool {
        x[4].abs() < FRAC_PI_2 - WHEEL_ANGLE_MARGIN
    }
}

/// `b[(finish − pˣ)² + (center − pʸ)²] + η·1[off track] + ½ r‖u‖²`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CruiseCost {
    pub finish_x: f64,
    pub road_center: f64,
    pub road_half_width: f64,
    pub b: f64,
    pub eta: f64,
    pub control_weight: f64,
    pub horizon: f64,
}

impl CruiseCost {
    pub fn off_track(&self, y: f64) -> bool {
        (y - self.road_center).abs() > self.road_half_width
    }
}

impl CostModel for CruiseCost {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn state_cost(&self, _t: f64, x: &[f64]) -> f64 {
        let (dx, dy) = (self.finish_x - x[0], self.road_center - x[1]);
        let mut c = self.b * (dx * dx + dy * dy);
        if self.off_track(x[1]) {
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

impl Scenario for CruiseScenario {
    type Dynamics = CruiseDynamics;
    type Cost = CruiseCost;
    type Nominal = CruiseNominal;

    fn dynamics(&self) -> CruiseDynamics {
        CruiseDynamics { wheelbase: self.wheelbase, sigma: self.sigma, nu: self.nu }
    }
    fn cost(&self) -> CruiseCost {
        CruiseCost {
            finish_x: self.finish_x,
            road_center: self.road_center,
            road_half_width: self.road_half_width,
            b: self.b,
            eta: self.eta,
            control_weight: self.control_weight,
            horizon: self.horizon,
        }
    }
    fn nominal(&self) -> CruiseNominal {
        CruiseNominal { road_center: self.road_center, finish_x: self.finish_x, wheelbase: self.wheelbase, ..self.nominal }
    }
    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon, self.dt)
    }
    fn x0(&self) -> Vec<f64> {
        self.x0.to_vec()
    }
    fn is_unsafe(&self, x: &[f64]) -> bool {
        self.cost().off_track(x[1])
    }
    fn sample_points(&self) -> Vec<SamplePoint> {
        let mut pts = Vec::new();
        for (i, px) in [0.0, 2.0, 4.0].into_iter().enumerate() {
            for py in [-0.6, 0.0, 0.4] {
                for phi in [-1.0, 0.0, 0.3] {
                    pts.push((self.horizon * i as f64 / 3.0, vec![px, py, 0.5, 0.2 * i as f64, phi]));
                }
            }
        }
        pts
    }
    fn state_names(&self) -> &'static [&'static str] {
        &["px", "py", "s", "delta", "phi"]
    }
    fn control_names(&self) -> &'static [&'static str] {
        &["a", "zeta"]
    }
}

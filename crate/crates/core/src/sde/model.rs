use nalgebra::DMatrix;

/// A control-affine Itô system
///
/// ```text
/// dx = f(t, x) dt + g(t, x) u dt + h(t, x) dv,    dv = θ dt + dw
/// ```
///
/// with state dimension `n`, control dimension `ℓ` and noise dimension `m`.
/// Implementations must be pure: equal arguments give equal outputs.
///
/// `add_control` / `add_noise` have matrix-based defaults; concrete models
/// override them to avoid allocating on the rollout hot path.
pub trait ControlAffineDynamics: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// Writes `f(t, x)` into `out` (length `n`).
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `g(t, x)`, an `n × ℓ` matrix.
    fn control_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64>;

    /// `h(t, x)`, an `n × m` matrix.
    fn noise_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64>;

    /// `out += g(t, x) · u`
    fn add_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let g = self.control_gain(t, x);
        for (i, o) in out.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *o += g[(i, j)] * uj;
            }
        }
    }

    /// `out += h(t, x) · v`
    fn add_noise(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let h = self.noise_gain(t, x);
        for (i, o) in out.iter_mut().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                *o += h[(i, j)] * vj;
            }
        }
    }

    /// Whether `x` lies in the region where the model is defined.
    /// Leaving it is reported as a divergence.
    fn in_domain(&self, _t: f64, _x: &[f64]) -> bool {
        true
    }
}

type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type GainFn = dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync;

/// Dynamics assembled from closures. Convenient for tests and small
/// models; allocation-heavy on the hot path.
pub struct FnDynamics {
    n: usize,
    l: usize,
    m: usize,
    drift: Box<DriftFn>,
    control_gain: Box<GainFn>,
    noise_gain: Box<GainFn>,
}

impl FnDynamics {
    pub fn new(
        n: usize,
        l: usize,
        m: usize,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        control_gain: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        noise_gain: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            l,
            m,
            drift: Box::new(drift),
            control_gain: Box::new(control_gain),
            noise_gain: Box::new(noise_gain),
        }
    }

    /// Zero drift with constant gain matrices.
    pub fn constant(g: DMatrix<f64>, h: DMatrix<f64>) -> Self {
        assert_eq!(g.nrows(), h.nrows(), "g and h must have n rows");
        let (n, l, m) = (g.nrows(), g.ncols(), h.ncols());
        Self::new(
            n,
            l,
            m,
            |_, _, out| out.fill(0.0),
            move |_, _| g.clone(),
            move |_, _| h.clone(),
        )
    }
}

impl ControlAffineDynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.l
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }
    fn control_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        (self.control_gain)(t, x)
    }
    fn noise_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        (self.noise_gain)(t, x)
    }
}

/// `plant` with a fixed feedback `k(t, x)` folded into its drift:
/// `f̃ = f + g k`. Gains and domain are those of `plant`, so any further
/// control `u` acts on top of `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WithFeedback<D, K> {
    pub plant: D,
    pub feedback: K,
}

impl<D: ControlAffineDynamics, K: Policy> ControlAffineDynamics for WithFeedback<D, K> {
    fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.plant.control_dim()
    }
    fn noise_dim(&self) -> usize {
        self.plant.noise_dim()
    }
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.plant.drift(t, x, out);
        let mut k = [0.0; 8];
        let mut heap = Vec::new();
        let l = self.plant.control_dim();
        let k = if l <= k.len() {
            &mut k[..l]
        } else {
            heap.resize(l, 0.0);
            &mut heap[..]
        };
        self.feedback.eval(t, x, k);
        self.plant.add_control(t, x, k, out);
    }
    fn control_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        self.plant.control_gain(t, x)
    }
    fn noise_gain(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        self.plant.noise_gain(t, x)
    }
    fn add_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.plant.add_control(t, x, u, out)
    }
    fn add_noise(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.plant.add_noise(t, x, v, out)
    }
    fn in_domain(&self, t: f64, x: &[f64]) -> bool {
        self.plant.in_domain(t, x)
    }
}

/// Scalar linear SDE `dx = (a·x) dt + g·u dt + h·dv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLinearDynamics {
    pub drift_coef: f64,
    pub control_gain: f64,
    pub noise_gain: f64,
}

impl ControlAffineDynamics for ScalarLinearDynamics {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.drift_coef * x[0];
    }
    fn control_gain(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.control_gain)
    }
    fn noise_gain(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.noise_gain)
    }
    fn add_control(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] += self.control_gain * u[0];
    }
    fn add_noise(&self, _t: f64, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] += self.noise_gain * v[0];
    }
}

/// Running cost `c(t, x, u) = ℓ(t, x) + ½ uᵀ R(t, x) u` over `[0, horizon]`.
pub trait CostModel: Sync {
    fn horizon(&self) -> f64;

    /// `ℓ(t, x) ≥ 0`
    fn state_cost(&self, t: f64, x: &[f64]) -> f64;

    /// `R(t, x)`, symmetric positive semidefinite, `ℓ × ℓ`.
    fn control_weight(&self, t: f64, x: &[f64]) -> DMatrix<f64>;

    fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        let mut c = self.state_cost(t, x);
        if u.iter().any(|v| *v != 0.0) {
            let r = self.control_weight(t, x);
            let mut quad = 0.0;
            for i in 0..u.len() {
                for j in 0..u.len() {
                    quad += u[i] * r[(i, j)] * u[j];
                }
            }
            c += 0.5 * quad;
        }
        c
    }
}

type StateCostFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Closure state cost with a constant control weight.
pub struct FnCost {
    horizon: f64,
    state_cost: Box<StateCostFn>,
    control_weight: DMatrix<f64>,
}

impl FnCost {
    pub fn new(
        horizon: f64,
        control_weight: DMatrix<f64>,
        state_cost: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            horizon,
            state_cost: Box::new(state_cost),
            control_weight,
        }
    }
}

impl CostModel for FnCost {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn state_cost(&self, t: f64, x: &[f64]) -> f64 {
        (self.state_cost)(t, x)
    }
    fn control_weight(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        self.control_weight.clone()
    }
    fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        let mut c = (self.state_cost)(t, x);
        let r = &self.control_weight;
        let mut quad = 0.0;
        for i in 0..u.len() {
            for j in 0..u.len() {
                quad += u[i] * r[(i, j)] * u[j];
            }
        }
        c += 0.5 * quad;
        c
    }
}

/// A feedback law `(t, x) ↦ out`, used for both controls and attack biases.
pub trait Policy: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// True only if `eval` always writes zeros. Drives measure tagging.
    fn is_identically_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy(pub usize);

impl Policy for ZeroPolicy {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn is_identically_zero(&self) -> bool {
        true
    }
}

/// Holds one value regardless of `(t, x)`.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
    fn is_identically_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

pub struct FnPolicy<F> {
    dim: usize,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.f)(t, x, out)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (**self).eval(t, x, out)
    }
    fn is_identically_zero(&self) -> bool {
        (**self).is_identically_zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_running_cost_is_quadratic_in_u() {
        struct C;
        impl CostModel for C {
            fn horizon(&self) -> f64 {
                1.0
            }
            fn state_cost(&self, _t: f64, _x: &[f64]) -> f64 {
                0.25
            }
            fn control_weight(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
                DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0])
            }
        }
        // 0.25 + ½(2·1 + 4·0.25)
        assert_eq!(C.running_cost(0.0, &[0.0], &[1.0, 0.5]), 1.75);
    }

    #[test]
    fn fn_cost_matches_default_formula() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = FnCost::new(1.0, r.clone(), |_, x| x[0] * x[0]);
        let u = [0.3, -0.7];
        let quad = 0.3 * 0.3 * 2.0 + 2.0 * 0.3 * -0.7 * 0.5 + 0.49;
        assert!((c.running_cost(0.0, &[2.0], &u) - (4.0 + 0.5 * quad)).abs() < 1e-15);
    }

    #[test]
    fn policy_zero_detection() {
        assert!(ZeroPolicy(2).is_identically_zero());
        assert!(ConstantPolicy(vec![0.0, 0.0]).is_identically_zero());
        assert!(!ConstantPolicy(vec![0.0, 1e-300]).is_identically_zero());
        let p = FnPolicy::new(1, |_, _, out: &mut [f64]| out[0] = 0.0);
        assert!(!p.is_identically_zero());
    }
}

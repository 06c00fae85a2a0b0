//! ODE systems, state/parameter augmentation and the fixed-step integrator
//! used for all ensemble propagation.

use std::collections::BTreeMap;
use std::fmt;

use crate::ensemble::ObservationModel;
use crate::error::{Error, Result};

/// Default RK4 step.
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// System state with the uncertain parameters appended as constant states.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub state: StateVector,
    pub params: ParamVector,
}

impl AugmentedState {
    pub fn new(state: Vec<f64>, params: Vec<f64>) -> Self {
        AugmentedState {
            state: StateVector(state),
            params: ParamVector(params),
        }
    }

    pub fn dim(&self) -> usize {
        self.state.len() + self.params.len()
    }

    /// State followed by parameters.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.state.0);
        v.extend_from_slice(&self.params.0);
        v
    }

    pub fn from_slice(values: &[f64], state_dim: usize) -> Self {
        AugmentedState::new(values[..state_dim].to_vec(), values[state_dim..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.state.0.iter().chain(&self.params.0).all(|v| v.is_finite())
    }
}

/// Deterministic right-hand side `x' = f(x, theta)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Writes `f(state, params)` into `out`. Slices have the declared lengths.
    fn rhs(&self, state: &[f64], params: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LotkaVolterra {
    /// Prey growth rate.
    pub theta3: f64,
    /// Predator death rate.
    pub theta4: f64,
}

impl Dynamics for LotkaVolterra {
    fn state_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        2
    }

    #[inline]
    fn rhs(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        let interaction = x[0] * x[1];
        out[0] = -p[0] * interaction + self.theta3 * x[0];
        out[1] = p[1] * interaction - self.theta4 * x[1];
    }
}

impl LotkaVolterra {
    /// First integral of the flow for fixed parameters.
    pub fn conserved_quantity(&self, x: &[f64], p: &[f64]) -> f64 {
        p[1] * x[0] - self.theta4 * x[0].ln() + p[0] * x[1] - self.theta3 * x[1].ln()
    }
}

/// Four-compartment STAT5 cascade: unphosphorylated, activated, dimeric and
/// nuclear STAT5, with a sustained stimulus and no transport delay.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat5;

impl Dynamics for Stat5 {
    fn state_dim(&self) -> usize {
        4
    }

    fn param_dim(&self) -> usize {
        3
    }

    #[inline]
    fn rhs(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        let activation = p[0] * x[0];
        let dimerization = p[1] * x[1] * x[1];
        let import = p[2] * x[2];
        out[0] = -activation;
        out[1] = -dimerization + activation;
        out[2] = -import + 0.5 * dimerization;
        out[3] = import;
    }
}

impl Stat5 {
    /// Total STAT5 in monomer units; constant along trajectories.
    pub fn total(x: &[f64]) -> f64 {
        x[0] + x[1] + 2.0 * x[2] + 2.0 * x[3]
    }
}

/// A model selectable by string id from a config file.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    LotkaVolterra(LotkaVolterra),
    Stat5(Stat5),
}

impl ModelSpec {
    pub fn from_id(id: &str, fixed: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |name: &str| {
            fixed
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("model `{id}` requires fixed parameter `{name}`")))
        };
        let spec = match id {
            "lotka_volterra" => ModelSpec::LotkaVolterra(LotkaVolterra {
                theta3: get("theta3")?,
                theta4: get("theta4")?,
            }),
            "stat5" => ModelSpec::Stat5(Stat5),
            other => return Err(Error::invalid(format!("unknown model id `{other}`"))),
        };
        let allowed = spec.fixed_param_names();
        if let Some(extra) = fixed.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::invalid(format!("model `{id}` has no fixed parameter `{extra}`")));
        }
        Ok(spec)
    }

    pub fn id(&self) -> &'static str {
        match self {
            ModelSpec::LotkaVolterra(_) => "lotka_volterra",
            ModelSpec::Stat5(_) => "stat5",
        }
    }

    pub fn fixed_param_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::LotkaVolterra(_) => &["theta3", "theta4"],
            ModelSpec::Stat5(_) => &[],
        }
    }

    pub fn fixed_params(&self) -> BTreeMap<String, f64> {
        match self {
            ModelSpec::LotkaVolterra(lv) => {
                BTreeMap::from([("theta3".to_string(), lv.theta3), ("theta4".to_string(), lv.theta4)])
            }
            ModelSpec::Stat5(_) => BTreeMap::new(),
        }
    }
}

impl Dynamics for ModelSpec {
    fn state_dim(&self) -> usize {
        match self {
            ModelSpec::LotkaVolterra(m) => m.state_dim(),
            ModelSpec::Stat5(m) => m.state_dim(),
        }
    }

    fn param_dim(&self) -> usize {
        match self {
            ModelSpec::LotkaVolterra(m) => m.param_dim(),
            ModelSpec::Stat5(m) => m.param_dim(),
        }
    }

    #[inline]
    fn rhs(&self, state: &[f64], params: &[f64], out: &mut [f64]) {
        match self {
            ModelSpec::LotkaVolterra(m) => m.rhs(state, params, out),
            ModelSpec::Stat5(m) => m.rhs(state, params, out),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

fn check_len(what: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() == expected {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} has length {}, expected {expected}",
            values.len()
        )))
    }
}

/// Checked Lotka-Volterra derivative.
pub fn lv_rhs(state: &StateVector, params: &ParamVector, fixed: &LotkaVolterra) -> Result<StateVector> {
    check_len("state", &state.0, 2)?;
    check_len("params", &params.0, 2)?;
    check_finite("state", &state.0)?;
    check_finite("params", &params.0)?;
    check_finite("fixed params", &[fixed.theta3, fixed.theta4])?;
    let mut out = vec![0.0; 2];
    fixed.rhs(&state.0, &params.0, &mut out);
    Ok(StateVector(out))
}

/// Checked STAT5 derivative.
pub fn stat5_rhs(state: &StateVector, params: &ParamVector) -> Result<StateVector> {
    check_len("state", &state.0, 4)?;
    check_len("params", &params.0, 3)?;
    check_finite("state", &state.0)?;
    check_finite("params", &params.0)?;
    let mut out = vec![0.0; 4];
    Stat5.rhs(&state.0, &params.0, &mut out);
    Ok(StateVector(out))
}

/// Reusable buffers for [`integrate_in_place`].
#[derive(Debug, Default)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn ensure(&mut self, n: usize) {
        for buf in [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.tmp] {
            buf.resize(n, 0.0);
        }
    }
}

/// Classical fixed-step RK4 from `t0` to `t1`. The last step is shortened to
/// land exactly on `t1`. Parameters are never touched.
pub fn integrate<M: Dynamics + ?Sized>(
    model: &M,
    aug: &AugmentedState,
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<AugmentedState> {
    let mut out = aug.clone();
    let mut ws = Rk4Workspace::default();
    integrate_in_place(model, &mut out.state.0, &aug.params.0, t0, t1, dt, &mut ws)?;
    Ok(out)
}

pub fn integrate_in_place<M: Dynamics + ?Sized>(
    model: &M,
    state: &mut [f64],
    params: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    ws: &mut Rk4Workspace,
) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {dt}")));
    }
    if !(t1 >= t0) {
        return Err(Error::invalid(format!("end time {t1} precedes start time {t0}")));
    }
    if state.len() != model.state_dim() || params.len() != model.param_dim() {
        return Err(Error::invalid(format!(
            "augmented state has dims ({}, {}), model expects ({}, {})",
            state.len(),
            params.len(),
            model.state_dim(),
            model.param_dim()
        )));
    }
    if t1 == t0 {
        return Ok(());
    }
    let n = state.len();
    ws.ensure(n);
    let Rk4Workspace { k1, k2, k3, k4, tmp } = ws;

    // Steps are placed at t0 + i*dt to avoid accumulating rounding in t.
    let span = t1 - t0;
    let mut steps = (span / dt).ceil() as u64;
    if steps == 0 {
        steps = 1;
    }
    // Avoid a vanishing final step when span is a multiple of dt up to rounding.
    if steps > 1 && t0 + (steps - 1) as f64 * dt >= t1 - 1e-12 * dt.max(1.0) {
        steps -= 1;
    }
    let mut t = t0;
    for i in 1..=steps {
        let t_next = if i == steps { t1 } else { t0 + i as f64 * dt };
        let h = t_next - t;
        model.rhs(state, params, k1);
        for j in 0..n {
            tmp[j] = state[j] + 0.5 * h * k1[j];
        }
        model.rhs(tmp, params, k2);
        for j in 0..n {
            tmp[j] = state[j] + 0.5 * h * k2[j];
        }
        model.rhs(tmp, params, k3);
        for j in 0..n {
            tmp[j] = state[j] + h * k3[j];
        }
        model.rhs(tmp, params, k4);
        for j in 0..n {
            state[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { time: t_next });
        }
        t = t_next;
    }
    Ok(())
}

/// Noise-free observable `H x`.
pub fn observe_mean(aug: &AugmentedState, obs: &ObservationModel) -> Result<Vec<f64>> {
    let state = aug.state.as_slice();
    if obs.state_dim() != state.len() {
        return Err(Error::invalid(format!(
            "observation matrix has {} columns, state has {} components",
            obs.state_dim(),
            state.len()
        )));
    }
    Ok(obs.apply(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const LV: LotkaVolterra = LotkaVolterra {
        theta3: 1.0,
        theta4: 0.4,
    };

    struct Decay;

    impl Dynamics for Decay {
        fn state_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            0
        }
        fn rhs(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = -x[0];
        }
    }

    #[test]
    fn lv_rhs_examples() {
        let p = ParamVector(vec![0.6, 0.3]);
        let origin = lv_rhs(&StateVector(vec![0.0, 0.0]), &p, &LV).unwrap();
        assert_eq!(origin.0, vec![0.0, 0.0]);

        let eq = StateVector(vec![0.4 / 0.3, 1.0 / 0.6]);
        let d = lv_rhs(&eq, &p, &LV).unwrap();
        assert_abs_diff_eq!(d.0[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.0[1], 0.0, epsilon = 1e-14);

        let d = lv_rhs(&StateVector(vec![2.0, 3.0]), &p, &LV).unwrap();
        assert_abs_diff_eq!(d.0[0], -1.6, epsilon = 1e-14);
        assert_abs_diff_eq!(d.0[1], 0.6, epsilon = 1e-14);
    }

    #[test]
    fn rhs_rejects_non_finite() {
        let p = ParamVector(vec![0.6, f64::NAN]);
        assert!(matches!(
            lv_rhs(&StateVector(vec![1.0, 1.0]), &p, &LV),
            Err(Error::InvalidInput(_))
        ));
        let x = StateVector(vec![f64::INFINITY, 0.0, 0.0, 0.0]);
        assert!(stat5_rhs(&x, &ParamVector(vec![0.1; 3])).is_err());
    }

    #[test]
    fn stat5_rhs_examples() {
        let p = ParamVector(vec![0.1, 0.1, 0.1]);
        assert_eq!(stat5_rhs(&StateVector(vec![0.0; 4]), &p).unwrap().0, vec![0.0; 4]);
        let d = stat5_rhs(&StateVector(vec![1.0, 0.0, 0.0, 0.0]), &p).unwrap();
        assert_abs_diff_eq!(d.0[0], -0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(d.0[1], 0.1, epsilon = 1e-15);
        assert_eq!(d.0[2], 0.0);
        assert_eq!(d.0[3], 0.0);
    }

    proptest! {
        #[test]
        fn stat5_weighted_derivative_vanishes(
            x in proptest::collection::vec(-10.0f64..10.0, 4),
            p in proptest::collection::vec(0.0f64..2.0, 3),
        ) {
            let d = stat5_rhs(&StateVector(x.clone()), &ParamVector(p)).unwrap();
            let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>();
            prop_assert!(Stat5::total(&d.0).abs() < 1e-12 * scale * 10.0);
        }

        #[test]
        fn integrate_leaves_params_bit_identical(
            t1 in 0.0f64..3.0,
            p1 in 0.3f64..0.9,
            p2 in 0.1f64..0.6,
        ) {
            let aug = AugmentedState::new(vec![2.0, 3.0], vec![p1, p2]);
            let out = integrate(&LV, &aug, 0.0, t1, 0.01).unwrap();
            prop_assert_eq!(out.params.0[0].to_bits(), p1.to_bits());
            prop_assert_eq!(out.params.0[1].to_bits(), p2.to_bits());
        }
    }

    #[test]
    fn zero_interval_is_identity() {
        let aug = AugmentedState::new(vec![2.0, 3.0], vec![0.6, 0.3]);
        assert_eq!(integrate(&LV, &aug, 1.5, 1.5, 0.01).unwrap(), aug);
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        let aug = AugmentedState::new(vec![1.0], vec![]);
        let out = integrate(&Decay, &aug, 0.0, 1.0, 0.01).unwrap();
        assert_abs_diff_eq!(out.state.0[0], (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn partial_final_step_lands_on_end_time() {
        let aug = AugmentedState::new(vec![1.0], vec![]);
        let out = integrate(&Decay, &aug, 0.0, 0.987, 0.1).unwrap();
        assert_abs_diff_eq!(out.state.0[0], (-0.987f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let aug = AugmentedState::new(vec![1.0], vec![]);
        let exact = (-1.0f64).exp();
        let coarse = (integrate(&Decay, &aug, 0.0, 1.0, 0.1).unwrap().state.0[0] - exact).abs();
        let fine = (integrate(&Decay, &aug, 0.0, 1.0, 0.05).unwrap().state.0[0] - exact).abs();
        let ratio = coarse / fine;
        assert!((14.0..18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn lv_first_integral_is_preserved() {
        let p = [0.6, 0.3];
        let aug = AugmentedState::new(vec![2.0, 3.0], p.to_vec());
        let v0 = LV.conserved_quantity(&aug.state.0, &p);
        let out = integrate(&LV, &aug, 0.0, 21.0, 0.01).unwrap();
        let v1 = LV.conserved_quantity(&out.state.0, &p);
        assert!(((v1 - v0) / v0).abs() < 1e-6);
    }

    #[test]
    fn stat5_total_is_preserved() {
        let aug = AugmentedState::new(vec![1.0, 0.0, 0.0, 0.0], vec![0.1, 0.1, 0.1]);
        let out = integrate(&Stat5, &aug, 0.0, 32.0, 0.01).unwrap();
        assert!((Stat5::total(&out.state.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn divergence_reports_time() {
        struct Blowup;
        impl Dynamics for Blowup {
            fn state_dim(&self) -> usize {
                1
            }
            fn param_dim(&self) -> usize {
                0
            }
            fn rhs(&self, x: &[f64], _: &[f64], out: &mut [f64]) {
                out[0] = x[0] * x[0];
            }
        }
        let aug = AugmentedState::new(vec![1.0], vec![]);
        match integrate(&Blowup, &aug, 0.0, 5.0, 0.1) {
            Err(Error::Divergence { time }) => assert!(time > 0.0 && time <= 5.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_step_and_interval_rejected() {
        let aug = AugmentedState::new(vec![1.0], vec![]);
        assert!(integrate(&Decay, &aug, 0.0, 1.0, 0.0).is_err());
        assert!(integrate(&Decay, &aug, 1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn observe_mean_examples() {
        let id = ObservationModel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        let aug = AugmentedState::new(vec![2.0, 3.0], vec![0.6, 0.3]);
        assert_eq!(observe_mean(&aug, &id).unwrap(), vec![2.0, 3.0]);

        let x = AugmentedState::new(vec![1.0, 0.2, 0.1, 0.0], vec![0.1; 3]);
        let y1 = ObservationModel::new(vec![vec![0.0, 1.0, 2.0, 0.0]], 0.1).unwrap();
        let y2 = ObservationModel::new(vec![vec![1.0, 1.0, 2.0, 0.0]], 0.1).unwrap();
        assert_abs_diff_eq!(observe_mean(&x, &y1).unwrap()[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(observe_mean(&x, &y2).unwrap()[0], 1.4, epsilon = 1e-15);

        assert!(observe_mean(&aug, &y1).is_err());
    }

    #[test]
    fn model_ids() {
        let fixed = BTreeMap::from([("theta3".into(), 1.0), ("theta4".into(), 0.4)]);
        let lv = ModelSpec::from_id("lotka_volterra", &fixed).unwrap();
        assert_eq!(lv.state_dim(), 2);
        assert_eq!(lv.fixed_params(), fixed);
        assert!(ModelSpec::from_id("lotka_volterra", &BTreeMap::new()).is_err());
        assert!(ModelSpec::from_id("stat5", &fixed).is_err());
        assert_eq!(ModelSpec::from_id("stat5", &BTreeMap::new()).unwrap().param_dim(), 3);
        assert!(ModelSpec::from_id("sir", &BTreeMap::new()).is_err());
    }
}

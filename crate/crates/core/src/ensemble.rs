//! Ensemble representation of state/parameter uncertainty: prior sampling,
//! forecast propagation and the perturbed-observation EnKF analysis.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{integrate_in_place, AugmentedState, Dynamics, ParamVector, Rk4Workspace, StateVector};

/// Linear observation operator `d = H x + eps`, `eps ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    r_chol: DMatrix<f64>,
}

impl ObservationModel {
    /// Rows of `H` with isotropic noise `R = noise_std^2 I`.
    pub fn new(rows: Vec<Vec<f64>>, noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0) || !noise_std.is_finite() {
            return Err(Error::invalid(format!("noise std must be positive, got {noise_std}")));
        }
        let m = rows.len();
        let h = matrix_from_rows(rows)?;
        Self::with_covariance(h, DMatrix::identity(m, m) * (noise_std * noise_std))
    }

    pub fn with_covariance(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(Error::invalid("observation matrix must be non-empty"));
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("observation matrix contains non-finite values"));
        }
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(Error::invalid(format!(
                "noise covariance is {}x{}, expected {}x{}",
                r.nrows(),
                r.ncols(),
                h.nrows(),
                h.nrows()
            )));
        }
        if (&r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) {
            return Err(Error::invalid("noise covariance is not symmetric"));
        }
        let r_chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("noise covariance is not positive definite"))?
            .l();
        Ok(ObservationModel { h, r, r_chol })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        (0..self.h.nrows())
            .map(|i| (0..self.h.ncols()).map(|j| self.h[(i, j)] * state[j]).sum())
            .collect()
    }

    /// One draw from `N(0, R)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.obs_dim();
        let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        (0..m)
            .map(|i| (0..=i).map(|j| self.r_chol[(i, j)] * z[j]).sum())
            .collect()
    }

    /// Same operator with `R` multiplied by `factor`.
    pub fn scaled_noise(&self, factor: f64) -> Result<Self> {
        Self::with_covariance(self.h.clone(), &self.r * factor)
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::invalid("observation matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("observation matrix rows have unequal lengths"));
    }
    Ok(DMatrix::from_row_iterator(m, n, rows.into_iter().flatten()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub param_means: ParamVector,
    pub param_stds: Vec<f64>,
    pub initial_state: StateVector,
    pub initial_state_stds: Option<Vec<f64>>,
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.param_means.len() != self.param_stds.len() {
            return Err(Error::invalid("prior means and stds differ in length"));
        }
        if let Some(s) = self.param_stds.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("prior std must be positive, got {s}")));
        }
        if let Some(stds) = &self.initial_state_stds {
            if stds.len() != self.initial_state.len() {
                return Err(Error::invalid("initial state and its stds differ in length"));
            }
            if let Some(s) = stds.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid(format!("initial state std must be positive, got {s}")));
            }
        }
        if !self
            .param_means
            .0
            .iter()
            .chain(&self.initial_state.0)
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("prior contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub(crate) members: Vec<AugmentedState>,
    pub(crate) time: f64,
}

impl Ensemble {
    pub fn new(members: Vec<AugmentedState>, time: f64) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let (ns, np) = (members[0].state.len(), members[0].params.len());
        if members.iter().any(|m| m.state.len() != ns || m.params.len() != np) {
            return Err(Error::invalid("ensemble members differ in dimension"));
        }
        if let Some(i) = members.iter().position(|m| !m.is_finite()) {
            return Err(Error::invalid(format!("ensemble member {i} is not finite")));
        }
        if !time.is_finite() {
            return Err(Error::invalid("ensemble time is not finite"));
        }
        Ok(Ensemble { members, time })
    }

    pub fn members(&self) -> &[AugmentedState] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].state.len()
    }

    pub fn param_dim(&self) -> usize {
        self.members[0].params.len()
    }

    pub fn aug_dim(&self) -> usize {
        self.state_dim() + self.param_dim()
    }

    /// Parameter block as row-major `N x p` samples.
    pub fn param_samples(&self) -> Vec<Vec<f64>> {
        self.members.iter().map(|m| m.params.0.clone()).collect()
    }

    /// Writes one row per member: state components then parameters.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.state_dim())
            .map(|i| format!("x{i}"))
            .chain((1..=self.param_dim()).map(|i| format!("theta{i}")))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for m in &self.members {
            w.write_record(m.to_vec().iter().map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Csv {
            path: None,
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Reads a snapshot written by [`Ensemble::write_csv`].
    pub fn read_csv<R: Read>(reader: R, time: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let state_dim = header.iter().take_while(|h| h.starts_with('x')).count();
        for (i, name) in header.iter().enumerate() {
            let expected = if i < state_dim {
                format!("x{}", i + 1)
            } else {
                format!("theta{}", i - state_dim + 1)
            };
            if name != expected {
                return Err(Error::Csv {
                    path: None,
                    message: format!("column {} is `{name}`, expected `{expected}`", i + 1),
                });
            }
        }
        if state_dim == 0 || state_dim == header.len() {
            return Err(Error::Csv {
                path: None,
                message: "snapshot needs both state and parameter columns".into(),
            });
        }
        let mut members = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let values = record
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Csv {
                    path: None,
                    message: format!("row {}: {e}", row + 1),
                })?;
            if values.len() != header.len() {
                return Err(Error::Csv {
                    path: None,
                    message: format!("row {} has {} fields, expected {}", row + 1, values.len(), header.len()),
                });
            }
            members.push(AugmentedState::from_slice(&values, state_dim));
        }
        Ensemble::new(members, time)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv {
        path: None,
        message: e.to_string(),
    }
}

/// Draws `n` independent members from the prior.
pub fn init_ensemble<R: Rng + ?Sized>(prior: &PriorSpec, n: usize, t0: f64, rng: &mut R) -> Result<Ensemble> {
    prior.validate()?;
    if n < 2 {
        return Err(Error::invalid(format!("ensemble size must be at least 2, got {n}")));
    }
    let members = (0..n)
        .map(|_| {
            let params = prior
                .param_means
                .0
                .iter()
                .zip(&prior.param_stds)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let state = match &prior.initial_state_stds {
                Some(stds) => prior
                    .initial_state
                    .0
                    .iter()
                    .zip(stds)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                None => prior.initial_state.0.clone(),
            };
            AugmentedState::new(state, params)
        })
        .collect();
    Ensemble::new(members, t0)
}

/// Propagates every member to `t1`.
pub fn forecast<M: Dynamics + ?Sized>(ens: &Ensemble, model: &M, t1: f64, dt: f64) -> Result<Ensemble> {
    if !(t1 >= ens.time) {
        return Err(Error::invalid(format!(
            "forecast target {t1} precedes ensemble time {}",
            ens.time
        )));
    }
    let mut out = ens.clone();
    let mut ws = Rk4Workspace::default();
    for (index, m) in out.members.iter_mut().enumerate() {
        integrate_in_place(model, &mut m.state.0, &m.params.0, ens.time, t1, dt, &mut ws).map_err(|e| {
            Error::Member {
                index,
                source: Box::new(e),
            }
        })?;
    }
    out.time = t1;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnkfOptions {
    /// Use the exact `R` in the innovation covariance instead of the sample
    /// covariance of the drawn perturbations.
    pub use_exact_r: bool,
    /// Project analysed parameters onto `theta >= 0`. States are never
    /// clipped.
    pub nonnegative_params: bool,
}

const CONDITION_LIMIT: f64 = 1e12;

/// Perturbed-observation EnKF analysis with the sampled noise covariance.
pub fn enkf_update<R: Rng + ?Sized>(
    ens: &Ensemble,
    d: &[f64],
    obs: &ObservationModel,
    rng: &mut R,
) -> Result<Ensemble> {
    enkf_update_with(ens, d, obs, EnkfOptions::default(), rng)
}

pub fn enkf_update_with<R: Rng + ?Sized>(
    ens: &Ensemble,
    d: &[f64],
    obs: &ObservationModel,
    opts: EnkfOptions,
    rng: &mut R,
) -> Result<Ensemble> {
    let m = obs.obs_dim();
    if d.len() != m {
        return Err(Error::invalid(format!(
            "observation has length {}, model expects {m}",
            d.len()
        )));
    }
    if obs.state_dim() != ens.state_dim() {
        return Err(Error::invalid(format!(
            "observation matrix has {} columns, state has {} components",
            obs.state_dim(),
            ens.state_dim()
        )));
    }
    if !d.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("observation contains non-finite values"));
    }
    let n = ens.len();
    let ns = ens.state_dim();
    let dim = ens.aug_dim();

    // Augmented anomalies, one column per member.
    let x = DMatrix::from_fn(dim, n, |i, j| {
        let mem = &ens.members[j];
        if i < ns {
            mem.state.0[i]
        } else {
            mem.params.0[i - ns]
        }
    });
    let mean = x.column_mean();
    let mut anomalies = x.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let denom = (n - 1) as f64;
    let h = obs.h();
    let hx = h * x.rows(0, ns);
    let h_anom = h * anomalies.rows(0, ns);

    let mut eps = DMatrix::zeros(m, n);
    for j in 0..n {
        let e = obs.sample_noise(rng);
        for i in 0..m {
            eps[(i, j)] = e[i];
        }
    }
    let r_e = if opts.use_exact_r {
        obs.r().clone()
    } else {
        let eps_mean = eps.column_mean();
        let mut centered = eps.clone();
        for mut col in centered.column_iter_mut() {
            col -= &eps_mean;
        }
        &centered * centered.transpose() / denom
    };

    // Sigma H^T and H Sigma H^T without forming Sigma.
    let pht = &anomalies * h_anom.transpose() / denom;
    let mut s = &h_anom * h_anom.transpose() / denom + r_e;
    s = (&s + s.transpose()) * 0.5;
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("innovation covariance is not finite".into()));
    }
    regularize(&mut s);
    let s_inv = invert_spd(&s)?;
    let gain = pht * s_inv;

    let mut innovations = DMatrix::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            innovations[(i, j)] = d[i] + eps[(i, j)] - hx[(i, j)];
        }
    }
    let analysis = x + gain * innovations;

    let mut members = analysis
        .column_iter()
        .map(|col| AugmentedState::from_slice(col.as_slice(), ns))
        .collect::<Vec<_>>();
    if opts.nonnegative_params {
        for m in &mut members {
            for p in &mut m.params.0 {
                *p = p.max(0.0);
            }
        }
    }
    if let Some(index) = members.iter().position(|m| !m.is_finite()) {
        return Err(Error::Member {
            index,
            source: Box::new(Error::Numerical("analysis produced non-finite values".into())),
        });
    }
    Ok(Ensemble {
        members,
        time: ens.time,
    })
}

/// Adds `1e-10 * trace / dim` to the diagonal when `s` is badly conditioned.
fn regularize(s: &mut DMatrix<f64>) {
    let eig = s.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || max / min > CONDITION_LIMIT {
        let jitter = 1e-10 * s.trace().abs().max(f64::MIN_POSITIVE) / s.nrows() as f64;
        for i in 0..s.nrows() {
            s[(i, i)] += jitter;
        }
    }
}

fn invert_spd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.inverse());
    }
    s.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: AugmentedState,
    /// Unbiased covariance over the augmented vector (state then params).
    pub covariance: DMatrix<f64>,
    pub param_stds: Vec<f64>,
}

pub fn ensemble_stats(ens: &Ensemble) -> EnsembleStats {
    let n = ens.len();
    let dim = ens.aug_dim();
    let ns = ens.state_dim();
    // Moments are accumulated about the first member so identical members
    // give exactly zero spread.
    let origin = ens.members[0].to_vec();
    let rows: Vec<Vec<f64>> = ens
        .members
        .iter()
        .map(|m| m.to_vec().iter().zip(&origin).map(|(v, o)| v - o).collect())
        .collect();
    let mut shift = DVector::zeros(dim);
    for r in &rows {
        for (i, v) in r.iter().enumerate() {
            shift[i] += v;
        }
    }
    shift /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in &rows {
        for i in 0..dim {
            let di = r[i] - shift[i];
            for j in i..dim {
                cov[(i, j)] += di * (r[j] - shift[j]);
            }
        }
    }
    let mean = DVector::from_iterator(dim, origin.iter().zip(shift.iter()).map(|(o, s)| o + s));
    let denom = (n.max(2) - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let param_stds = (ns..dim).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    EnsembleStats {
        mean: AugmentedState::from_slice(mean.as_slice(), ns),
        covariance: cov,
        param_stds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{integrate, LotkaVolterra};
    use crate::seed::Seed;
    use approx::assert_abs_diff_eq;

    const LV: LotkaVolterra = LotkaVolterra {
        theta3: 1.0,
        theta4: 0.4,
    };

    fn lv_prior() -> PriorSpec {
        PriorSpec {
            param_means: ParamVector(vec![0.7, 0.4]),
            param_stds: vec![0.1, 0.1],
            initial_state: StateVector(vec![2.0, 3.0]),
            initial_state_stds: None,
        }
    }

    #[test]
    fn degenerate_prior_collapses_to_mean() {
        let mut prior = lv_prior();
        prior.param_stds = vec![1e-12, 1e-12];
        let ens = init_ensemble(&prior, 50, 0.0, &mut Seed(1).rng()).unwrap();
        for m in ens.members() {
            assert_abs_diff_eq!(m.params.0[0], 0.7, epsilon = 1e-8);
            assert_abs_diff_eq!(m.params.0[1], 0.4, epsilon = 1e-8);
            assert_eq!(m.state.0, vec![2.0, 3.0]);
        }
    }

    #[test]
    fn prior_moments_match_over_seeds() {
        let prior = lv_prior();
        let (mut m1, mut m2, mut s1, mut s2) = (0.0, 0.0, 0.0, 0.0);
        let seeds = 100;
        for seed in 0..seeds {
            let ens = init_ensemble(&prior, 1000, 0.0, &mut Seed(seed).rng()).unwrap();
            let st = ensemble_stats(&ens);
            m1 += st.mean.params.0[0];
            m2 += st.mean.params.0[1];
            s1 += st.param_stds[0];
            s2 += st.param_stds[1];
        }
        let k = seeds as f64;
        assert!((m1 / k - 0.7).abs() < 0.01);
        assert!((m2 / k - 0.4).abs() < 0.01);
        assert!((s1 / k - 0.1).abs() < 0.01);
        assert!((s2 / k - 0.1).abs() < 0.01);
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let prior = lv_prior();
        let a = init_ensemble(&prior, 20, 0.0, &mut Seed(9).rng()).unwrap();
        let b = init_ensemble(&prior, 20, 0.0, &mut Seed(9).rng()).unwrap();
        assert_eq!(a, b);
        let mut bad = prior.clone();
        bad.param_stds[1] = 0.0;
        assert!(init_ensemble(&bad, 20, 0.0, &mut Seed(9).rng()).is_err());
        assert!(init_ensemble(&prior, 1, 0.0, &mut Seed(9).rng()).is_err());
    }

    #[test]
    fn forecast_examples() {
        let ens = init_ensemble(&lv_prior(), 30, 0.0, &mut Seed(3).rng()).unwrap();
        assert_eq!(forecast(&ens, &LV, 0.0, 0.01).unwrap(), ens);

        let out = forecast(&ens, &LV, 1.0, 0.01).unwrap();
        assert_eq!(out.time(), 1.0);
        for (a, b) in ens.members().iter().zip(out.members()) {
            assert_eq!(a.params, b.params);
        }
        assert!(forecast(&out, &LV, 0.5, 0.01).is_err());

        let single = Ensemble {
            members: vec![ens.members[0].clone()],
            time: 0.0,
        };
        let f = forecast(&single, &LV, 2.0, 0.01).unwrap();
        assert_eq!(f.members[0], integrate(&LV, &ens.members[0], 0.0, 2.0, 0.01).unwrap());
    }

    #[test]
    fn forecast_divergence_names_member() {
        let mut members = vec![AugmentedState::new(vec![2.0, 3.0], vec![0.6, 0.3]); 3];
        members[2] = AugmentedState::new(vec![2.0, 3.0], vec![-50.0, 0.3]);
        let ens = Ensemble::new(members, 0.0).unwrap();
        match forecast(&ens, &LV, 10.0, 0.1) {
            Err(Error::Member { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected member error, got {other:?}"),
        }
    }

    #[test]
    fn identical_members_are_not_moved() {
        let members = vec![AugmentedState::new(vec![2.0, 3.0], vec![0.6, 0.3]); 10];
        let ens = Ensemble::new(members, 0.0).unwrap();
        let obs = ObservationModel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        let out = enkf_update(&ens, &[5.0, -1.0], &obs, &mut Seed(0).rng()).unwrap();
        assert_eq!(out, ens);
    }

    #[test]
    fn projection_clamps_parameters_only() {
        // State and parameter perfectly correlated, so a low observation
        // drags both below zero.
        let members = (0..200)
            .map(|i| {
                let v = 0.05 + 0.001 * i as f64;
                AugmentedState::new(vec![v], vec![v])
            })
            .collect();
        let ens = Ensemble::new(members, 0.0).unwrap();
        let obs = ObservationModel::new(vec![vec![1.0]], 0.01).unwrap();
        let opts = EnkfOptions {
            nonnegative_params: true,
            ..Default::default()
        };
        let plain = enkf_update(&ens, &[-0.5], &obs, &mut Seed(4).rng()).unwrap();
        let projected = enkf_update_with(&ens, &[-0.5], &obs, opts, &mut Seed(4).rng()).unwrap();
        assert!(plain.members().iter().any(|m| m.params.0[0] < 0.0));
        for (p, q) in plain.members().iter().zip(projected.members()) {
            assert_eq!(p.state, q.state);
            assert_eq!(q.params.0[0], p.params.0[0].max(0.0));
        }
    }

    #[test]
    fn update_preserves_shape_and_is_deterministic() {
        let ens = init_ensemble(&lv_prior(), 40, 0.0, &mut Seed(3).rng()).unwrap();
        let ens = forecast(&ens, &LV, 2.0, 0.01).unwrap();
        let obs = ObservationModel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        let a = enkf_update(&ens, &[1.0, 2.0], &obs, &mut Seed(5).rng()).unwrap();
        let b = enkf_update(&ens, &[1.0, 2.0], &obs, &mut Seed(5).rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), ens.len());
        assert_eq!(a.aug_dim(), ens.aug_dim());
        assert_eq!(a.time(), ens.time());
        assert!(enkf_update(&ens, &[1.0], &obs, &mut Seed(5).rng()).is_err());
    }

    #[test]
    fn uninformative_data_barely_moves_mean() {
        let ens = init_ensemble(&lv_prior(), 500, 0.0, &mut Seed(4).rng()).unwrap();
        let ens = forecast(&ens, &LV, 2.0, 0.01).unwrap();
        let obs = ObservationModel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.1)
            .unwrap()
            .scaled_noise(1e6)
            .unwrap();
        let before = ensemble_stats(&ens);
        let after = ensemble_stats(&enkf_update(&ens, &[1.0, 2.0], &obs, &mut Seed(6).rng()).unwrap());
        for i in 0..ens.aug_dim() {
            let sd = before.covariance[(i, i)].sqrt();
            let shift = (after.mean.to_vec()[i] - before.mean.to_vec()[i]).abs();
            assert!(shift < 1e-2 * sd, "component {i}: shift {shift}, sd {sd}");
        }
    }

    #[test]
    fn stats_examples() {
        let two = Ensemble::new(
            vec![
                AugmentedState::new(vec![0.0], vec![0.0]),
                AugmentedState::new(vec![2.0], vec![2.0]),
            ],
            0.0,
        )
        .unwrap();
        let st = ensemble_stats(&two);
        assert_eq!(st.mean.to_vec(), vec![1.0, 1.0]);
        assert_eq!(st.covariance[(0, 0)], 2.0);
        assert_eq!(st.covariance[(1, 1)], 2.0);
        assert_eq!(st.param_stds, vec![2.0f64.sqrt()]);

        let dup = Ensemble::new(vec![AugmentedState::new(vec![1.0], vec![3.0]); 5], 0.0).unwrap();
        assert_eq!(ensemble_stats(&dup).covariance.amax(), 0.0);
    }

    #[test]
    fn stats_of_standard_gaussian() {
        let mut rng = Seed(11).rng();
        let members = (0..100_000)
            .map(|_| AugmentedState::new(vec![rng.sample(StandardNormal)], vec![rng.sample(StandardNormal)]))
            .collect();
        let st = ensemble_stats(&Ensemble::new(members, 0.0).unwrap());
        let diff = st.covariance - DMatrix::<f64>::identity(2, 2);
        assert!(diff.amax() < 0.02);
    }

    #[test]
    fn csv_snapshot_round_trip() {
        let ens = init_ensemble(&lv_prior(), 7, 0.0, &mut Seed(2).rng()).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,theta1,theta2\n"));
        assert_eq!(Ensemble::read_csv(buf.as_slice(), 0.0).unwrap(), ens);
        assert!(Ensemble::read_csv("x1,theta2\n1,2\n".as_bytes(), 0.0).is_err());
        assert!(Ensemble::read_csv("x1,theta1\n1,abc\n2,3\n".as_bytes(), 0.0).is_err());
    }

    #[test]
    fn observation_model_validation() {
        assert!(ObservationModel::new(vec![vec![1.0, 0.0]], 0.0).is_err());
        assert!(ObservationModel::new(vec![vec![1.0], vec![1.0, 2.0]], 0.1).is_err());
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ObservationModel::with_covariance(DMatrix::identity(2, 2), r).is_err());
    }
}

//! Oracle suites with analytic answers, run by the `mi-selftest` and
//! `enkf-selftest` subcommands.

use std::f64::consts::{E, PI};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{enkf_update, ensemble_stats, Ensemble, ObservationModel};
use crate::error::Result;
use crate::infotheory::{kl_entropy, ksg_mi, SampleMatrix, DEFAULT_K};
use crate::models::AugmentedState;
use crate::seed::Seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestCase {
    pub name: String,
    pub estimate: f64,
    pub expected: f64,
    pub tolerance: f64,
}

impl SelftestCase {
    fn new(name: impl Into<String>, estimate: f64, expected: f64, tolerance: f64) -> Self {
        SelftestCase {
            name: name.into(),
            estimate,
            expected,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        (self.estimate - self.expected).abs() <= self.tolerance
    }
}

impl fmt::Display for SelftestCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} estimate {:>10.5}  expected {:>10.5}  tol {:.5}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.estimate,
            self.expected,
            self.tolerance
        )
    }
}

const N: usize = 10_000;

fn normals(n: usize, seed: Seed) -> Vec<f64> {
    let mut rng = seed.rng();
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// kNN estimators against Gaussian and uniform closed forms, N = 10^4, k = 6.
pub fn mi_selftest(seed: Seed) -> Result<Vec<SelftestCase>> {
    let k = DEFAULT_K;
    let mut cases = Vec::new();

    let x = normals(N, seed.child(1));
    let y = normals(N, seed.child(2));
    let mi = ksg_mi(&SampleMatrix::from_column(&x)?, &SampleMatrix::from_column(&y)?, k)?;
    cases.push(SelftestCase::new("ksg independent gaussians", mi.value, 0.0, 0.02));

    let rho: f64 = 0.9;
    let yc: Vec<f64> = x
        .iter()
        .zip(&y)
        .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
        .collect();
    let mi = ksg_mi(&SampleMatrix::from_column(&x)?, &SampleMatrix::from_column(&yc)?, k)?;
    cases.push(SelftestCase::new(
        "ksg bivariate gaussian rho=0.9",
        mi.value,
        -0.5 * (1.0 - rho * rho).ln(),
        0.05,
    ));

    let mut rng = seed.child(3).rng();
    let u: Vec<f64> = (0..N).map(|_| rng.random::<f64>()).collect();
    cases.push(SelftestCase::new(
        "kl entropy uniform(0,1)",
        kl_entropy(&SampleMatrix::from_column(&u)?, k)?,
        0.0,
        0.05,
    ));

    cases.push(SelftestCase::new(
        "kl entropy 1-d standard gaussian",
        kl_entropy(&SampleMatrix::from_column(&x)?, k)?,
        0.5 * (2.0 * PI * E).ln(),
        0.05,
    ));

    let xy: Vec<f64> = x.iter().zip(&y).flat_map(|(a, b)| [*a, *b]).collect();
    cases.push(SelftestCase::new(
        "kl entropy 2-d standard gaussian",
        kl_entropy(&SampleMatrix::from_flat(N, 2, xy)?, k)?,
        (2.0 * PI * E).ln(),
        0.07,
    ));
    Ok(cases)
}

/// Closed-form Kalman analysis for a Gaussian prior observed through
/// `H = e_j` (a single component), written out element by element.
fn kalman_single_component(mean: &[f64], cov: &[Vec<f64>], j: usize, r: f64, d: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = mean.len();
    let s = cov[j][j] + r;
    let gain: Vec<f64> = (0..n).map(|i| cov[i][j] / s).collect();
    let innovation = d - mean[j];
    let post_mean = (0..n).map(|i| mean[i] + gain[i] * innovation).collect();
    let post_cov = (0..n)
        .map(|a| (0..n).map(|b| cov[a][b] - gain[a] * cov[j][b]).collect())
        .collect();
    (post_mean, post_cov)
}

/// Exact Gaussian prior ensemble from a Cholesky factor.
fn gaussian_ensemble(mean: &[f64], cov: &[Vec<f64>], n: usize, seed: Seed) -> Result<Ensemble> {
    let dim = mean.len();
    let mut chol = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| chol[i][k] * chol[j][k]).sum();
            chol[i][j] = if i == j {
                (cov[i][i] - s).sqrt()
            } else {
                (cov[i][j] - s) / chol[j][j]
            };
        }
    }
    let mut rng = seed.rng();
    let members = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let x = (0..dim)
                .map(|i| mean[i] + (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>())
                .collect();
            AugmentedState::new(x, vec![])
        })
        .collect();
    Ensemble::new(members, 0.0)
}

fn enkf_case(
    label: &str,
    mean: &[f64],
    cov: &[Vec<f64>],
    observed: usize,
    r: f64,
    d: f64,
    seed: Seed,
) -> Result<Vec<SelftestCase>> {
    let dim = mean.len();
    let ens = gaussian_ensemble(mean, cov, N, seed.child(1))?;
    let mut row = vec![0.0; dim];
    row[observed] = 1.0;
    let obs = ObservationModel::new(vec![row], r.sqrt())?;
    let analysis = enkf_update(&ens, &[d], &obs, &mut seed.child(2).rng())?;
    let stats = ensemble_stats(&analysis);
    let (post_mean, post_cov) = kalman_single_component(mean, cov, observed, r, d);
    let root_n = (N as f64).sqrt();

    let mut cases = Vec::new();
    let est_mean = stats.mean.to_vec();
    for i in 0..dim {
        cases.push(SelftestCase::new(
            format!("{label} mean[{i}]"),
            est_mean[i],
            post_mean[i],
            3.0 * post_cov[i][i].sqrt() / root_n,
        ));
    }
    for i in 0..dim {
        for j in i..dim {
            // Standard deviation of a Gaussian sample covariance entry.
            let sd = (post_cov[i][i] * post_cov[j][j] + post_cov[i][j].powi(2)).sqrt();
            cases.push(SelftestCase::new(
                format!("{label} cov[{i},{j}]"),
                stats.covariance[(i, j)],
                post_cov[i][j],
                3.0 * sd / root_n,
            ));
        }
    }
    Ok(cases)
}

/// EnKF against the exact Kalman analysis on linear-Gaussian problems, N = 10^4.
pub fn enkf_selftest(seed: Seed) -> Result<Vec<SelftestCase>> {
    let mut cases = enkf_case("enkf 1-d", &[0.0], &[vec![1.0]], 0, 1.0, 2.0, seed.child(10))?;
    cases.extend(enkf_case(
        "enkf 2-d correlated",
        &[1.0, -1.0],
        &[vec![1.0, 0.8], vec![0.8, 2.0]],
        0,
        0.5,
        2.5,
        seed.child(20),
    )?);
    Ok(cases)
}

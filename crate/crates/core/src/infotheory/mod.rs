//! k-nearest-neighbour estimators of differential entropy and mutual
//! information. All quantities are in nats and all distances use the
//! max-norm, so a joint-space ball is the product of the marginal balls.

pub mod neighbors;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::{tag, Seed};
use neighbors::build_index;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Default neighbour count for both estimators.
pub const DEFAULT_K: usize = 6;

/// Relative amplitude of the tie-breaking jitter.
const JITTER_SCALE: f64 = 1e-10;

/// Row-major `n x d` sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn from_flat(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("sample matrix needs at least one column"));
        }
        if data.len() != n * d {
            return Err(Error::invalid(format!(
                "sample matrix data has {} values, expected {n}x{d}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("sample matrix contains non-finite values"));
        }
        Ok(SampleMatrix { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != d) {
            return Err(Error::invalid("sample rows have unequal lengths"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_flat(rows.len(), d, data)
    }

    /// Single-column matrix.
    pub fn from_column(values: &[f64]) -> Result<Self> {
        Self::from_flat(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Adds `c[j]` to every entry of column `j`.
    pub fn translated(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.d) {
            for (v, s) in row.iter_mut().zip(c) {
                *v += s;
            }
        }
        out
    }

    /// Multiplies every entry of column `j` by `s[j]`.
    pub fn scaled(&self, s: &[f64]) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.d) {
            for (v, f) in row.iter_mut().zip(s) {
                *v *= f;
            }
        }
        out
    }

    /// Copy with every column divided by its sample std (constant columns
    /// are left alone).
    fn standardized(&self) -> Self {
        let scales: Vec<f64> = (0..self.d)
            .map(|j| {
                let (mean, std) = column_moments(self, j);
                if resolvable(mean, std) {
                    1.0 / std
                } else {
                    1.0
                }
            })
            .collect();
        self.scaled(&scales)
    }

    /// Copy with deterministic per-column noise of relative size
    /// `JITTER_SCALE`. The stream depends only on the matrix shape, so the
    /// same shape always receives the same relative perturbation.
    fn jittered(&self) -> Vec<f64> {
        let mut rng = Seed(self.n as u64).child(self.d as u64).child(tag::JITTER).rng();
        let scales: Vec<f64> = (0..self.d)
            .map(|j| {
                let (mean, std) = column_moments(self, j);
                if resolvable(mean, std) {
                    JITTER_SCALE * std
                } else {
                    JITTER_SCALE * mean.abs().max(1.0)
                }
            })
            .collect();
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.d) {
            for (v, s) in row.iter_mut().zip(&scales) {
                *v += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    }
}

/// A spread at the level of rounding error in the mean is treated as a
/// constant column.
fn resolvable(mean: f64, std: f64) -> bool {
    std > 64.0 * f64::EPSILON * mean.abs()
}

fn column_moments(m: &SampleMatrix, j: usize) -> (f64, f64) {
    let n = m.n as f64;
    let mean = (0..m.n).map(|i| m.data[i * m.d + j]).sum::<f64>() / n;
    if m.n < 2 {
        return (mean, 0.0);
    }
    let var = (0..m.n).map(|i| (m.data[i * m.d + j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    /// Nats. Small-sample estimates may be negative; they are not clipped.
    pub value: f64,
    pub k: usize,
    pub n: usize,
}

/// Digamma at a positive integer via `psi(1) = -C`, `psi(m+1) = psi(m) + 1/m`.
pub fn digamma(m: usize) -> Result<f64> {
    if m < 1 {
        return Err(Error::invalid("digamma is defined here for integers m >= 1"));
    }
    Ok(DigammaTable::new(m).get(m))
}

/// `psi(1..=max)` precomputed by the same recursion as [`digamma`].
pub struct DigammaTable(Vec<f64>);

impl DigammaTable {
    pub fn new(max: usize) -> Self {
        let mut table = Vec::with_capacity(max + 1);
        table.push(f64::NAN);
        let mut psi = -EULER_GAMMA;
        for m in 1..=max {
            table.push(psi);
            psi += 1.0 / m as f64;
        }
        DigammaTable(table)
    }

    #[inline]
    pub fn get(&self, m: usize) -> f64 {
        self.0[m]
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::invalid("neighbour count k must be at least 1"));
    }
    if n <= k {
        return Err(Error::invalid(format!("need more than k = {k} samples, got {n}")));
    }
    Ok(())
}

/// Kozachenko-Leonenko entropy estimate with max-norm balls.
pub fn kl_entropy(samples: &SampleMatrix, k: usize) -> Result<f64> {
    let (n, d) = (samples.rows(), samples.cols());
    check_k(n, k)?;
    let data = samples.jittered();
    let index = build_index(&data, d);
    let mut sum_log = 0.0;
    for i in 0..n {
        let eps = index.kth_distance(i, k);
        if !(eps > 0.0) {
            return Err(Error::Estimator(format!(
                "sample {i} has {k} coincident neighbours; entropy is undefined"
            )));
        }
        sum_log += eps.ln();
    }
    let psi = DigammaTable::new(n);
    // The max-norm ball of radius r has volume (2r)^d.
    Ok(-psi.get(k) + psi.get(n) + d as f64 * std::f64::consts::LN_2 + d as f64 * sum_log / n as f64)
}

/// Kraskov-Stoegbauer-Grassberger mutual information (algorithm 1).
pub fn ksg_mi(x: &SampleMatrix, y: &SampleMatrix, k: usize) -> Result<MiEstimate> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::invalid(format!(
            "sample blocks differ in length: {} vs {}",
            n,
            y.rows()
        )));
    }
    check_k(n, k)?;
    let (dx, dy) = (x.cols(), y.cols());
    // Unit-variance columns make the max-norm ball insensitive to the units
    // of either block.
    let xj = x.standardized().jittered();
    let yj = y.standardized().jittered();
    let joint: Vec<f64> = (0..n)
        .flat_map(|i| {
            xj[i * dx..(i + 1) * dx]
                .iter()
                .chain(&yj[i * dy..(i + 1) * dy])
                .copied()
        })
        .collect();

    let joint_index = build_index(&joint, dx + dy);
    let x_index = build_index(&xj, dx);
    let y_index = build_index(&yj, dy);
    let psi = DigammaTable::new(n);

    let mut acc = 0.0;
    for i in 0..n {
        let eps = joint_index.kth_distance(i, k);
        if !(eps > 0.0) {
            return Err(Error::Estimator(format!(
                "sample {i} has {k} coincident neighbours in the joint space"
            )));
        }
        // Counts include the point itself; psi(n_x + 1) uses n_x excluding it.
        let nx = x_index.count_within(i, eps) - 1;
        let ny = y_index.count_within(i, eps) - 1;
        acc += psi.get(nx + 1) + psi.get(ny + 1);
    }
    Ok(MiEstimate {
        value: psi.get(k) + psi.get(n) - acc / n as f64,
        k,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyDecomposition {
    /// Entropy of the observable.
    pub h_d: f64,
    /// Conditional entropy of the observable given the parameters.
    pub h_d_given_theta: f64,
    pub mi: f64,
}

/// Splits `I(theta; d)` into `H(d) - H(d | theta)`.
pub fn mi_decomposition(theta: &SampleMatrix, d: &SampleMatrix, k: usize) -> Result<EntropyDecomposition> {
    let mi = ksg_mi(theta, d, k)?.value;
    let h_d = kl_entropy(d, k)?;
    Ok(EntropyDecomposition {
        h_d,
        h_d_given_theta: h_d - mi,
        mi,
    })
}

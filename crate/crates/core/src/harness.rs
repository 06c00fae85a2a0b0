//! End-to-end experiments: ground-truth simulation, repeated trials over a
//! set of strategies, uncertainty metrics and CSV export.

use std::collections::BTreeMap;
use std::fs::File;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::design::{run_sequential, DesignSpace, SequentialRun, Strategy};
use crate::ensemble::{ensemble_stats, Ensemble, ObservationModel, PriorSpec};
use crate::error::{Error, Result};
use crate::infotheory::{kl_entropy, SampleMatrix};
use crate::models::{integrate_in_place, Dynamics, ModelSpec, ParamVector, Rk4Workspace, StateVector};
use crate::seed::{tag, Seed};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// Parameter prior and the initial condition (shared with the truth).
    pub prior: PriorSpec,
    pub true_params: ParamVector,
    pub t0: f64,
    pub design_space: DesignSpace,
    pub observables: BTreeMap<String, ObservationModel>,
    pub noise_std: f64,
    pub ensemble_size: usize,
    pub knn_k: usize,
    pub dt: f64,
    pub n_trials: usize,
    pub base_seed: u64,
    pub use_exact_r: bool,
    /// Keep rate parameters in their admissible region after each analysis.
    pub nonnegative_params: bool,
    pub strategies: Vec<Strategy>,
}

impl ExperimentConfig {
    pub fn initial_state(&self) -> &StateVector {
        &self.prior.initial_state
    }

    /// Checks the cross-field invariants; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(None, key, msg));
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std", format!("must be positive, got {}", self.noise_std));
        }
        if self.knn_k < 1 {
            return bad("knn_k", "must be at least 1".into());
        }
        if self.ensemble_size < self.knn_k + 2 {
            return bad(
                "ensemble_size",
                format!(
                    "must be at least knn_k + 2 = {}, got {}",
                    self.knn_k + 2,
                    self.ensemble_size
                ),
            );
        }
        if self.n_trials < 1 {
            return bad("n_trials", "must be at least 1".into());
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !self.t0.is_finite() {
            return bad("t0", "must be finite".into());
        }
        if self.prior.initial_state.len() != self.model.state_dim() {
            return bad(
                "initial_state",
                format!(
                    "has {} components, model `{}` has {}",
                    self.prior.initial_state.len(),
                    self.model,
                    self.model.state_dim()
                ),
            );
        }
        if self.true_params.len() != self.model.param_dim() || !self.true_params.0.iter().all(|v| v.is_finite()) {
            return bad(
                "true_params",
                format!(
                    "needs {} finite values for model `{}`",
                    self.model.param_dim(),
                    self.model
                ),
            );
        }
        if self.prior.param_means.len() != self.model.param_dim() {
            return bad("means", format!("needs {} values", self.model.param_dim()));
        }
        if let Err(e) = self.prior.validate() {
            return bad("prior", e.to_string());
        }
        for (id, obs) in &self.observables {
            if obs.state_dim() != self.model.state_dim() {
                return bad(
                    &format!("observable.{id}"),
                    format!("has {} columns, state has {}", obs.state_dim(), self.model.state_dim()),
                );
            }
        }
        for stage in &self.design_space.stages {
            for c in stage {
                if !self.observables.contains_key(&c.observable_id) {
                    return bad(
                        "observables",
                        format!("observable `{}` is not defined", c.observable_id),
                    );
                }
            }
        }
        if let Err(e) = self.design_space.validate(self.t0) {
            return bad("stage_times", e.to_string());
        }
        for s in &self.strategies {
            if let Strategy::Fixed(i) = s {
                if let Some(stage) = self.design_space.stages.iter().find(|st| *i >= st.len()) {
                    return bad(
                        "strategies",
                        format!("fixed:{i} exceeds a stage with {} candidates", stage.len()),
                    );
                }
            }
        }
        Ok(())
    }
}

/// Noisy measurements for every candidate of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(stage index, candidate id)` to observed vector.
    pub entries: BTreeMap<(usize, usize), Vec<f64>>,
    pub seed: u64,
}

impl Dataset {
    pub fn get(&self, stage: usize, candidate: usize) -> Option<&[f64]> {
        self.entries.get(&(stage, candidate)).map(Vec::as_slice)
    }

    /// Stable hash of the entries, used to check that strategies compared
    /// within a trial consumed the same data.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        for ((s, c), v) in &self.entries {
            (s, c).hash(&mut h);
            for x in v {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// `stage,candidate,time,observable,component,value` rows.
    pub fn write_csv<W: Write>(&self, cfg: &ExperimentConfig, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Csv {
            path: None,
            message: e.to_string(),
        };
        w.write_record(["stage", "candidate", "time", "observable", "component", "value"])
            .map_err(io)?;
        for ((s, c), values) in &self.entries {
            let cand = &cfg.design_space.stages[*s][*c];
            for (j, v) in values.iter().enumerate() {
                w.write_record([
                    (s + 1).to_string(),
                    c.to_string(),
                    cand.measurement_time.to_string(),
                    cand.observable_id.clone(),
                    (j + 1).to_string(),
                    v.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::Csv {
            path: None,
            message: e.to_string(),
        })
    }
}

/// Integrates the true system once and emits `H x + eps` for every
/// candidate. Candidates at the same time share the same true state.
pub fn simulate_truth(cfg: &ExperimentConfig, seed: Seed) -> Result<Dataset> {
    let mut rng = seed.rng();
    let mut points: Vec<(f64, usize, usize)> = cfg
        .design_space
        .stages
        .iter()
        .enumerate()
        .flat_map(|(s, stage)| stage.iter().map(move |c| (c.measurement_time, s, c.id)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut states: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(points.len());
    let mut x = cfg.prior.initial_state.0.clone();
    let mut t = cfg.t0;
    let mut ws = Rk4Workspace::default();
    for (time, s, c) in points {
        integrate_in_place(&cfg.model, &mut x, &cfg.true_params.0, t, time, cfg.dt, &mut ws)?;
        t = time;
        states.push((s, c, x.clone()));
    }
    // Noise is drawn in (stage, candidate) order, independent of time order.
    states.sort_by_key(|(s, c, _)| (*s, *c));

    let mut entries = BTreeMap::new();
    for (s, c, x) in states {
        let cand = &cfg.design_space.stages[s][c];
        let obs = cfg
            .observables
            .get(&cand.observable_id)
            .ok_or_else(|| Error::invalid(format!("unknown observable `{}`", cand.observable_id)))?;
        let value = obs
            .apply(&x)
            .into_iter()
            .map(|m| m + cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        entries.insert((s, c), value);
    }
    Ok(Dataset { entries, seed: seed.0 })
}

/// Parametric uncertainty of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub param_stds: Vec<f64>,
    /// kNN estimate over the parameter block, nats.
    pub joint_entropy: f64,
    /// RMSE of the posterior-mean parameters against the truth.
    pub rmse: f64,
}

impl MetricsRecord {
    pub fn metric_names(param_dim: usize) -> Vec<String> {
        (1..=param_dim)
            .map(|i| format!("std_theta{i}"))
            .chain(["joint_entropy".to_string(), "rmse".to_string()])
            .collect()
    }

    /// Values in the order of [`MetricsRecord::metric_names`].
    pub fn values(&self) -> Vec<f64> {
        self.param_stds
            .iter()
            .copied()
            .chain([self.joint_entropy, self.rmse])
            .collect()
    }
}

pub fn compute_metrics(posterior: &Ensemble, true_params: &ParamVector, k: usize) -> Result<MetricsRecord> {
    if true_params.len() != posterior.param_dim() {
        return Err(Error::invalid("true parameters and ensemble differ in dimension"));
    }
    let stats = ensemble_stats(posterior);
    let joint_entropy = kl_entropy(&SampleMatrix::from_rows(&posterior.param_samples())?, k)?;
    let p = true_params.len() as f64;
    let rmse = (stats
        .mean
        .params
        .0
        .iter()
        .zip(&true_params.0)
        .map(|(m, t)| (m - t).powi(2))
        .sum::<f64>()
        / p)
        .sqrt();
    Ok(MetricsRecord {
        param_stds: stats.param_stds,
        joint_entropy,
        rmse,
    })
}

/// Summary of one strategy on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub strategy: Strategy,
    /// Candidate id chosen at each stage.
    pub chosen: Vec<usize>,
    /// Metrics at stage 0 (prior) through the last stage.
    pub metrics: Vec<MetricsRecord>,
    pub dataset_fingerprint: u64,
}

impl From<&SequentialRun> for RunSummary {
    fn from(run: &SequentialRun) -> Self {
        RunSummary {
            strategy: run.strategy,
            chosen: run.records.iter().map(|r| r.chosen.id).collect(),
            metrics: std::iter::once(run.prior_metrics.clone())
                .chain(run.records.iter().map(|r| r.posterior_metrics.clone()))
                .collect(),
            dataset_fingerprint: run.dataset_fingerprint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub dataset_fingerprint: u64,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePoint {
    /// 0 is the prior.
    pub stage: usize,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyCurve {
    pub strategy: String,
    pub points: Vec<StagePoint>,
}

impl StrategyCurve {
    pub fn metric(&self, stage: usize, name: &str) -> Option<&MetricSummary> {
        self.points
            .iter()
            .find(|p| p.stage == stage)
            .and_then(|p| p.metrics.iter().find(|m| m.name == name))
    }
}

/// Trial-averaged curves plus the per-trial detail they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialResults {
    pub curves: Vec<StrategyCurve>,
    pub trials: Vec<TrialOutcome>,
}

impl TrialResults {
    pub fn curve(&self, strategy: &str) -> Option<&StrategyCurve> {
        self.curves.iter().find(|c| c.strategy == strategy)
    }
}

fn run_trial(cfg: &ExperimentConfig, strategies: &[Strategy], index: usize) -> Result<TrialOutcome> {
    let seed = cfg.base_seed.wrapping_add(index as u64);
    let trial_seed = Seed(seed);
    let wrap = |e| Error::Trial {
        index,
        seed,
        source: Box::new(e),
    };
    let dataset = simulate_truth(cfg, trial_seed.child(tag::DATASET)).map_err(wrap)?;
    let runs = strategies
        .iter()
        .map(|&s| run_sequential(cfg, s, &dataset, trial_seed.child(tag::RUN)).map(|r| RunSummary::from(&r)))
        .collect::<Result<Vec<_>>>()
        .map_err(wrap)?;
    Ok(TrialOutcome {
        index,
        seed,
        dataset_fingerprint: dataset.fingerprint(),
        runs,
    })
}

/// Runs `cfg.n_trials` trials. Every strategy in a trial sees the same
/// dataset and the same prior ensemble. Trials run in parallel; the
/// reduction is ordered by trial index, so results do not depend on
/// scheduling.
pub fn run_trials(cfg: &ExperimentConfig, strategies: &[Strategy]) -> Result<TrialResults> {
    if strategies.is_empty() {
        return Err(Error::invalid("no strategies to run"));
    }
    cfg.validate()?;
    let trials = (0..cfg.n_trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, strategies, i))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let names = MetricsRecord::metric_names(cfg.model.param_dim());
    let n = trials.len() as f64;
    let curves = strategies
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let points = (0..=cfg.design_space.n_stages())
                .map(|stage| {
                    let per_trial: Vec<Vec<f64>> = trials.iter().map(|t| t.runs[si].metrics[stage].values()).collect();
                    let metrics = names
                        .iter()
                        .enumerate()
                        .map(|(mi, name)| {
                            let mean = per_trial.iter().map(|v| v[mi]).sum::<f64>() / n;
                            let stderr = if trials.len() > 1 {
                                let var = per_trial.iter().map(|v| (v[mi] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                                (var / n).sqrt()
                            } else {
                                0.0
                            };
                            MetricSummary {
                                name: name.clone(),
                                mean,
                                stderr,
                            }
                        })
                        .collect();
                    StagePoint { stage, metrics }
                })
                .collect();
            StrategyCurve {
                strategy: s.to_string(),
                points,
            }
        })
        .collect();
    Ok(TrialResults { curves, trials })
}

pub const CSV_HEADER: [&str; 5] = ["strategy", "stage", "metric", "value", "stderr"];

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub strategy: String,
    pub stage: usize,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

/// Rows in (strategy, stage) order as stored in `results`, metrics in
/// their canonical order. Floats use the shortest round-trip form.
pub fn write_results_csv<W: Write>(results: &TrialResults, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Csv {
        path: None,
        message: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(err)?;
    for curve in &results.curves {
        let mut points: Vec<&StagePoint> = curve.points.iter().collect();
        points.sort_by_key(|p| p.stage);
        for p in points {
            for m in &p.metrics {
                w.write_record([
                    curve.strategy.clone(),
                    p.stage.to_string(),
                    m.name.clone(),
                    m.mean.to_string(),
                    m.stderr.to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Csv {
        path: None,
        message: e.to_string(),
    })
}

pub fn export_csv(results: &TrialResults, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BufWriter::new(file);
    write_results_csv(results, &mut out).map_err(|e| match e {
        Error::Csv { message, .. } => Error::Csv {
            path: Some(path.to_path_buf()),
            message,
        },
        other => other,
    })?;
    out.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a results CSV, checking the header and every field.
pub fn parse_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let err = |msg: String| Error::Csv {
        path: None,
        message: msg,
    };
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(err(format!(
            "header is `{}`, expected `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            CSV_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != CSV_HEADER.len() {
            return Err(err(format!("row {} has {} fields", line + 1, record.len())));
        }
        let num = |i: usize| {
            record[i]
                .parse::<f64>()
                .map_err(|_| err(format!("row {}: bad {} `{}`", line + 1, CSV_HEADER[i], &record[i])))
        };
        rows.push(ResultRow {
            strategy: record[0].to_string(),
            stage: record[1]
                .parse()
                .map_err(|_| err(format!("row {}: bad stage `{}`", line + 1, &record[1])))?,
            metric: record[2].to_string(),
            value: num(3)?,
            stderr: num(4)?,
        });
    }
    Ok(rows)
}

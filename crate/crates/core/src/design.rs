//! The sequential design engine: scores candidate experiments by estimated
//! mutual information between parameters and predicted observables, picks
//! one per stage according to a [`Strategy`], and runs the
//! design -> measure -> assimilate loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::ensemble::{enkf_update_with, forecast, init_ensemble, EnkfOptions, Ensemble, ObservationModel};
use crate::error::{Error, Result};
use crate::harness::{compute_metrics, Dataset, ExperimentConfig, MetricsRecord};
use crate::infotheory::{kl_entropy, ksg_mi, MiEstimate, SampleMatrix};
use crate::models::ModelSpec;
use crate::seed::{tag, Seed};

/// One selectable experiment: measure `observable_id` at `measurement_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignCandidate {
    /// Position within its stage.
    pub id: usize,
    pub measurement_time: f64,
    pub observable_id: String,
}

/// Candidate menu for every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpace {
    pub stages: Vec<Vec<DesignCandidate>>,
}

impl DesignSpace {
    /// Every time in a stage crossed with every observable, time-major.
    pub fn from_grid(stage_times: &[Vec<f64>], observables: &[String]) -> Result<Self> {
        let stages = stage_times
            .iter()
            .map(|times| {
                times
                    .iter()
                    .flat_map(|&t| observables.iter().map(move |o| (t, o.clone())))
                    .enumerate()
                    .map(|(id, (measurement_time, observable_id))| DesignCandidate {
                        id,
                        measurement_time,
                        observable_id,
                    })
                    .collect()
            })
            .collect();
        let space = DesignSpace { stages };
        space.validate(f64::NEG_INFINITY)?;
        Ok(space)
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Checks ids, time ordering within stages, and that no stage can
    /// require going back in time from any choice in the previous one.
    pub fn validate(&self, t0: f64) -> Result<()> {
        let mut horizon = t0;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::invalid(format!("stage {} has no candidates", s + 1)));
            }
            for (i, c) in stage.iter().enumerate() {
                if c.id != i {
                    return Err(Error::invalid(format!(
                        "stage {}: candidate ids must be 0..n in order",
                        s + 1
                    )));
                }
                if !c.measurement_time.is_finite() {
                    return Err(Error::invalid(format!("stage {}: non-finite candidate time", s + 1)));
                }
                if c.measurement_time < horizon {
                    return Err(Error::invalid(format!(
                        "stage {}: candidate time {} precedes {horizon}",
                        s + 1,
                        c.measurement_time
                    )));
                }
            }
            if stage.windows(2).any(|w| w[1].measurement_time < w[0].measurement_time) {
                return Err(Error::invalid(format!(
                    "stage {}: candidate times must be non-decreasing",
                    s + 1
                )));
            }
            horizon = stage.iter().map(|c| c.measurement_time).fold(horizon, f64::max);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    MaxMi,
    MaxEntropy,
    Fixed(usize),
    Random,
}

impl Strategy {
    pub fn is_adaptive(self) -> bool {
        matches!(self, Strategy::MaxMi | Strategy::MaxEntropy)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::MaxMi => f.write_str("max-mi"),
            Strategy::MaxEntropy => f.write_str("max-entropy"),
            Strategy::Fixed(i) => write!(f, "fixed:{i}"),
            Strategy::Random => f.write_str("random"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max-mi" => Ok(Strategy::MaxMi),
            "max-entropy" => Ok(Strategy::MaxEntropy),
            "random" => Ok(Strategy::Random),
            other => match other.strip_prefix("fixed:") {
                Some(i) => i
                    .trim()
                    .parse()
                    .map(Strategy::Fixed)
                    .map_err(|_| Error::invalid(format!("bad fixed strategy index in `{other}`"))),
                None => Err(Error::invalid(format!(
                    "unknown strategy `{other}` (expected max-mi, max-entropy, fixed:<i> or random)"
                ))),
            },
        }
    }
}

/// Per-candidate scores computed by an adaptive strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateScores {
    /// Estimated `I(theta; d)` in nats.
    MutualInformation(Vec<f64>),
    /// Estimated `H(d)` in nats.
    ObservableEntropy(Vec<f64>),
}

impl CandidateScores {
    pub fn values(&self) -> &[f64] {
        match self {
            CandidateScores::MutualInformation(v) | CandidateScores::ObservableEntropy(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// 1-based stage number.
    pub stage: usize,
    pub chosen: DesignCandidate,
    pub scores: Option<CandidateScores>,
    pub posterior_metrics: MetricsRecord,
}

impl StageRecord {
    pub fn mi_scores(&self) -> Option<&[f64]> {
        match &self.scores {
            Some(CandidateScores::MutualInformation(v)) => Some(v),
            _ => None,
        }
    }
}

/// What the scoring step needs besides the ensemble.
#[derive(Debug, Clone, Copy)]
pub struct DesignContext<'a> {
    pub model: &'a ModelSpec,
    pub observables: &'a BTreeMap<String, ObservationModel>,
    pub k: usize,
    pub dt: f64,
}

impl<'a> DesignContext<'a> {
    pub fn from_config(cfg: &'a ExperimentConfig) -> Self {
        DesignContext {
            model: &cfg.model,
            observables: &cfg.observables,
            k: cfg.knn_k,
            dt: cfg.dt,
        }
    }

    fn observable(&self, cand: &DesignCandidate) -> Result<&'a ObservationModel> {
        self.observables
            .get(&cand.observable_id)
            .ok_or_else(|| Error::invalid(format!("unknown observable `{}`", cand.observable_id)))
    }
}

/// Predicted noisy observables `H x_j + eps_j`, one row per member.
pub fn predict_observables<R: Rng + ?Sized>(
    forecasted: &Ensemble,
    obs: &ObservationModel,
    rng: &mut R,
) -> Result<SampleMatrix> {
    if obs.state_dim() != forecasted.state_dim() {
        return Err(Error::invalid(format!(
            "observation matrix has {} columns, state has {} components",
            obs.state_dim(),
            forecasted.state_dim()
        )));
    }
    let m = obs.obs_dim();
    let mut data = Vec::with_capacity(forecasted.len() * m);
    for member in forecasted.members() {
        let mean = obs.apply(member.state.as_slice());
        let noise = obs.sample_noise(rng);
        data.extend(mean.iter().zip(&noise).map(|(a, b)| a + b));
    }
    SampleMatrix::from_flat(forecasted.len(), m, data)
}

fn param_matrix(ens: &Ensemble) -> Result<SampleMatrix> {
    SampleMatrix::from_rows(&ens.param_samples())
}

/// `I(theta; d | candidate)` estimated from the ensemble pushed forward to
/// the candidate's measurement time. The posterior is not modified.
pub fn score_candidate<R: Rng + ?Sized>(
    posterior: &Ensemble,
    model: &ModelSpec,
    cand: &DesignCandidate,
    obs: &ObservationModel,
    k: usize,
    dt: f64,
    rng: &mut R,
) -> Result<MiEstimate> {
    let wrap = |e| Error::Candidate {
        id: cand.id,
        source: Box::new(e),
    };
    let forecasted = forecast(posterior, model, cand.measurement_time, dt).map_err(wrap)?;
    mi_of_forecast(&forecasted, obs, k, rng).map_err(wrap)
}

fn mi_of_forecast<R: Rng + ?Sized>(
    forecasted: &Ensemble,
    obs: &ObservationModel,
    k: usize,
    rng: &mut R,
) -> Result<MiEstimate> {
    let d = predict_observables(forecasted, obs, rng)?;
    ksg_mi(&param_matrix(forecasted)?, &d, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: DesignCandidate,
    pub scores: Option<CandidateScores>,
}

/// Index of the largest score; ties go to the earliest candidate.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Picks the next experiment from `stage`.
///
/// Adaptive strategies score every candidate; the scoring noise for
/// candidate `id` is drawn from `seed.child(id)`, so scores are reproducible
/// and shared between strategies that walk the same seed path.
pub fn select_design(
    stage: &[DesignCandidate],
    strategy: Strategy,
    posterior: &Ensemble,
    ctx: &DesignContext<'_>,
    seed: Seed,
) -> Result<Selection> {
    if stage.is_empty() {
        return Err(Error::invalid("cannot select from an empty stage"));
    }
    let pick = |i: usize, scores| Selection {
        chosen: stage[i].clone(),
        scores,
    };
    match strategy {
        Strategy::Fixed(i) => {
            if i >= stage.len() {
                return Err(Error::invalid(format!(
                    "fixed:{i} is out of range for a stage with {} candidates",
                    stage.len()
                )));
            }
            Ok(pick(i, None))
        }
        Strategy::Random => {
            let i = seed.child(tag::RANDOM).rng().random_range(0..stage.len());
            Ok(pick(i, None))
        }
        Strategy::MaxMi | Strategy::MaxEntropy => {
            let scores = score_stage(stage, strategy, posterior, ctx, seed)?;
            let best = argmax(&scores);
            let scores = if strategy == Strategy::MaxMi {
                CandidateScores::MutualInformation(scores)
            } else {
                CandidateScores::ObservableEntropy(scores)
            };
            Ok(pick(best, Some(scores)))
        }
    }
}

fn score_stage(
    stage: &[DesignCandidate],
    strategy: Strategy,
    posterior: &Ensemble,
    ctx: &DesignContext<'_>,
    seed: Seed,
) -> Result<Vec<f64>> {
    // Candidates sharing a time share one forecast.
    let mut forecasts: Vec<(f64, Ensemble)> = Vec::new();
    let mut scores = Vec::with_capacity(stage.len());
    for cand in stage {
        let wrap = |e| Error::Candidate {
            id: cand.id,
            source: Box::new(e),
        };
        let obs = ctx.observable(cand).map_err(wrap)?;
        let at = match forecasts.iter().position(|(t, _)| *t == cand.measurement_time) {
            Some(i) => i,
            None => {
                let f = forecast(posterior, ctx.model, cand.measurement_time, ctx.dt).map_err(wrap)?;
                forecasts.push((cand.measurement_time, f));
                forecasts.len() - 1
            }
        };
        let forecasted = &forecasts[at].1;
        let mut rng = seed.child(cand.id as u64).rng();
        let score = match strategy {
            Strategy::MaxEntropy => predict_observables(forecasted, obs, &mut rng).and_then(|d| kl_entropy(&d, ctx.k)),
            _ => mi_of_forecast(forecasted, obs, ctx.k, &mut rng).map(|m| m.value),
        }
        .map_err(wrap)?;
        scores.push(score);
    }
    Ok(scores)
}

/// Outcome of one strategy on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialRun {
    pub strategy: Strategy,
    pub prior_metrics: MetricsRecord,
    pub records: Vec<StageRecord>,
    pub posterior: Ensemble,
    /// Fingerprint of the dataset the run consumed.
    pub dataset_fingerprint: u64,
}

/// Runs every stage: select, fetch the measurement, forecast to the chosen
/// time, assimilate, record metrics.
///
/// All random draws come from sub-streams of `seed`, so strategies run with
/// the same seed start from the same prior ensemble and use the same
/// perturbation streams; their posteriors differ only through the designs.
pub fn run_sequential(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    truth: &Dataset,
    seed: Seed,
) -> Result<SequentialRun> {
    let ctx = DesignContext::from_config(cfg);
    let opts = EnkfOptions {
        use_exact_r: cfg.use_exact_r,
        nonnegative_params: cfg.nonnegative_params,
    };
    let mut ens = init_ensemble(&cfg.prior, cfg.ensemble_size, cfg.t0, &mut seed.child(tag::INIT).rng())?;
    let prior_metrics = compute_metrics(&ens, &cfg.true_params, cfg.knn_k)?;
    let mut records = Vec::with_capacity(cfg.design_space.n_stages());

    for (s, stage) in cfg.design_space.stages.iter().enumerate() {
        let stage_seed = seed.child(s as u64);
        let Selection { chosen, scores } = select_design(stage, strategy, &ens, &ctx, stage_seed.child(tag::SELECT))?;
        let d = truth.get(s, chosen.id).ok_or_else(|| {
            Error::config(
                None,
                "dataset",
                format!(
                    "no measurement for stage {} candidate {} (t = {}, observable `{}`)",
                    s + 1,
                    chosen.id,
                    chosen.measurement_time,
                    chosen.observable_id
                ),
            )
        })?;
        let obs = ctx.observable(&chosen)?;
        let forecasted = forecast(&ens, ctx.model, chosen.measurement_time, ctx.dt)?;
        ens = enkf_update_with(&forecasted, d, obs, opts, &mut stage_seed.child(tag::ENKF).rng())?;
        records.push(StageRecord {
            stage: s + 1,
            chosen,
            scores,
            posterior_metrics: compute_metrics(&ens, &cfg.true_params, cfg.knn_k)?,
        });
    }

    Ok(SequentialRun {
        strategy,
        prior_metrics,
        records,
        posterior: ens,
        dataset_fingerprint: truth.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::PriorSpec;
    use crate::models::{LotkaVolterra, ParamVector, StateVector};

    fn lv() -> ModelSpec {
        ModelSpec::LotkaVolterra(LotkaVolterra {
            theta3: 1.0,
            theta4: 0.4,
        })
    }

    fn prior_ensemble(n: usize, seed: u64) -> Ensemble {
        let prior = PriorSpec {
            param_means: ParamVector(vec![0.7, 0.4]),
            param_stds: vec![0.1, 0.1],
            initial_state: StateVector(vec![2.0, 3.0]),
            initial_state_stds: None,
        };
        init_ensemble(&prior, n, 0.0, &mut Seed(seed).rng()).unwrap()
    }

    #[test]
    fn strategy_round_trips_through_text() {
        for s in [
            Strategy::MaxMi,
            Strategy::MaxEntropy,
            Strategy::Fixed(2),
            Strategy::Random,
        ] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("fixed:x".parse::<Strategy>().is_err());
        assert!("greedy".parse::<Strategy>().is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties_and_ignores_offsets() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let base = [0.2, 0.9, -0.1];
        let shifted: Vec<f64> = base.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&base), argmax(&shifted));
    }

    #[test]
    fn grid_and_validation() {
        let space = DesignSpace::from_grid(&[vec![1.0, 2.0], vec![3.0]], &["a".into(), "b".into()]).unwrap();
        assert_eq!(space.stages[0].len(), 4);
        assert_eq!(space.stages[0][3].measurement_time, 2.0);
        assert_eq!(space.stages[0][3].observable_id, "b");
        assert!(DesignSpace::from_grid(&[vec![2.0, 1.0]], &["a".into()]).is_err());
        assert!(DesignSpace::from_grid(&[vec![1.0, 5.0], vec![4.0]], &["a".into()]).is_err());
        assert!(DesignSpace::from_grid(&[vec![]], &["a".into()]).is_err());
        assert!(space.validate(1.5).is_err());
    }

    #[test]
    fn score_does_not_mutate_and_is_deterministic() {
        let ens = prior_ensemble(300, 1);
        let before = ens.clone();
        let obs = ObservationModel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.1).unwrap();
        let cand = DesignCandidate {
            id: 0,
            measurement_time: 2.0,
            observable_id: "both".into(),
        };
        let a = score_candidate(&ens, &lv(), &cand, &obs, 6, 0.01, &mut Seed(2).rng()).unwrap();
        let b = score_candidate(&ens, &lv(), &cand, &obs, 6, 0.01, &mut Seed(2).rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ens, before);
        assert!(a.value > 0.5);
    }

    #[test]
    fn zero_observation_carries_no_information() {
        let ens = prior_ensemble(2000, 3);
        let obs = ObservationModel::new(vec![vec![0.0, 0.0]], 0.1).unwrap();
        let cand = DesignCandidate {
            id: 0,
            measurement_time: 2.0,
            observable_id: "none".into(),
        };
        let mi = score_candidate(&ens, &lv(), &cand, &obs, 6, 0.01, &mut Seed(4).rng()).unwrap();
        assert!(mi.value.abs() < 0.02, "{}", mi.value);
    }

    #[test]
    fn drowned_observation_carries_no_information() {
        let ens = prior_ensemble(2000, 5);
        let obs = ObservationModel::new(vec![vec![1.0, 0.0]], 1e6).unwrap();
        let cand = DesignCandidate {
            id: 0,
            measurement_time: 2.0,
            observable_id: "x1".into(),
        };
        let mi = score_candidate(&ens, &lv(), &cand, &obs, 6, 0.01, &mut Seed(6).rng()).unwrap();
        assert!(mi.value.abs() < 0.02, "{}", mi.value);
    }

    #[test]
    fn score_errors_carry_candidate_id() {
        let ens = prior_ensemble(50, 7);
        let obs = ObservationModel::new(vec![vec![1.0, 0.0]], 0.1).unwrap();
        let cand = DesignCandidate {
            id: 4,
            measurement_time: -1.0,
            observable_id: "x1".into(),
        };
        match score_candidate(&ens, &lv(), &cand, &obs, 6, 0.01, &mut Seed(0).rng()) {
            Err(Error::Candidate { id, .. }) => assert_eq!(id, 4),
            other => panic!("expected candidate error, got {other:?}"),
        }
    }

    fn two_candidate_context() -> (BTreeMap<String, ObservationModel>, Vec<DesignCandidate>) {
        let observables = BTreeMap::from([
            (
                "none".to_string(),
                ObservationModel::new(vec![vec![0.0, 0.0]], 0.1).unwrap(),
            ),
            (
                "x1".to_string(),
                ObservationModel::new(vec![vec![1.0, 0.0]], 0.1).unwrap(),
            ),
        ]);
        let stage = vec![
            DesignCandidate {
                id: 0,
                measurement_time: 2.0,
                observable_id: "none".into(),
            },
            DesignCandidate {
                id: 1,
                measurement_time: 2.0,
                observable_id: "x1".into(),
            },
        ];
        (observables, stage)
    }

    #[test]
    fn selection_rules() {
        let model = lv();
        let (observables, stage) = two_candidate_context();
        let ctx = DesignContext {
            model: &model,
            observables: &observables,
            k: 6,
            dt: 0.01,
        };
        let ens = prior_ensemble(200, 8);

        for strategy in [
            Strategy::MaxMi,
            Strategy::MaxEntropy,
            Strategy::Fixed(0),
            Strategy::Random,
        ] {
            let sel = select_design(&stage[..1], strategy, &ens, &ctx, Seed(1)).unwrap();
            assert_eq!(sel.chosen, stage[0]);
        }
        assert_eq!(
            select_design(&stage, Strategy::Fixed(1), &ens, &ctx, Seed(1))
                .unwrap()
                .chosen
                .id,
            1
        );
        assert!(select_design(&stage, Strategy::Fixed(2), &ens, &ctx, Seed(1)).is_err());
        assert!(select_design(&[], Strategy::MaxMi, &ens, &ctx, Seed(1)).is_err());

        let sel = select_design(&stage, Strategy::MaxMi, &ens, &ctx, Seed(1)).unwrap();
        assert_eq!(sel.scores.as_ref().unwrap().values().len(), 2);
        assert!(matches!(sel.scores, Some(CandidateScores::MutualInformation(_))));
        assert!(select_design(&stage, Strategy::Random, &ens, &ctx, Seed(1))
            .unwrap()
            .scores
            .is_none());

        let mut seen = [false; 2];
        for s in 0..40 {
            seen[select_design(&stage, Strategy::Random, &ens, &ctx, Seed(s))
                .unwrap()
                .chosen
                .id] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn max_mi_avoids_the_blind_observable() {
        let model = lv();
        let (observables, stage) = two_candidate_context();
        let ctx = DesignContext {
            model: &model,
            observables: &observables,
            k: 6,
            dt: 0.01,
        };
        let mut hits = 0;
        for seed in 0..100 {
            let ens = prior_ensemble(300, 1000 + seed);
            let sel = select_design(&stage, Strategy::MaxMi, &ens, &ctx, Seed(seed)).unwrap();
            hits += usize::from(sel.chosen.id == 1);
        }
        assert!(hits >= 99, "{hits}/100");
    }
}

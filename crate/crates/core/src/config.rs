//! Experiment config files.
//!
//! A flat `key = value` format with four sections. `#` starts a comment.
//!
//! ```text
//! [model]
//! id = lotka_volterra          # or stat5
//! fixed.theta3 = 1.0           # model constants, if the model has any
//! fixed.theta4 = 0.4
//! initial_state = 2, 3
//! true_params = 0.6, 0.3
//! t0 = 0                       # optional, default 0
//! dt = 0.01                    # optional, default 0.01
//!
//! [prior]
//! means = 0.7, 0.4
//! stds = 0.1, 0.1
//! initial_state_stds = 0.1, 0.1   # optional; initial state is exact otherwise
//!
//! [design]
//! observable.both = 1 0; 0 1   # rows of H separated by `;`
//! observables = both           # candidates per time, in this order
//! stage_times = 1, 3.5 | 6, 8.5   # stages separated by `|`
//! noise_std = 0.1
//!
//! [run]
//! ensemble_size = 1000
//! knn_k = 6                    # optional, default 6
//! n_trials = 100               # optional, default 1
//! base_seed = 0                # optional, default 0
//! strategies = max-mi, fixed:0, random   # optional
//! use_exact_r = false          # optional, default false
//! nonnegative_params = true    # optional, default true
//! ```
//!
//! When `strategies` is absent every strategy is run: max-mi, max-entropy,
//! each `fixed:<i>` valid in all stages, and random.

use std::collections::BTreeMap;
use std::path::Path;

use crate::design::{DesignSpace, Strategy};
use crate::ensemble::{ObservationModel, PriorSpec};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::infotheory::DEFAULT_K;
use crate::models::{ModelSpec, ParamVector, StateVector, DEFAULT_DT};

const SECTIONS: [&str; 4] = ["model", "prior", "design", "run"];

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Raw `section.key -> value` entries with their line numbers.
#[derive(Debug, Default)]
struct RawConfig {
    entries: BTreeMap<(String, String), Entry>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(Some(lineno), line, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(
                        Some(lineno),
                        name,
                        format!("unknown section (expected one of {})", SECTIONS.join(", ")),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(lineno), line, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(Some(lineno), "", "empty key"));
            }
            let sec = section
                .clone()
                .ok_or_else(|| Error::config(Some(lineno), key, "key appears before any section header"))?;
            let slot = (sec, key.to_string());
            if let Some(prev) = raw.entries.get(&slot) {
                return Err(Error::config(
                    Some(lineno),
                    key,
                    format!("duplicate key (first set on line {})", prev.line),
                ));
            }
            raw.entries.insert(
                slot,
                Entry {
                    value: value.trim().to_string(),
                    line: lineno,
                    used: false,
                },
            );
        }
        Ok(raw)
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(&(section.to_string(), key.to_string())).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn require(&mut self, section: &str, key: &str) -> Result<(String, usize)> {
        self.take(section, key)
            .ok_or_else(|| Error::config(None, key, format!("missing required key in [{section}]")))
    }

    /// Keys in `section` starting with `prefix`, prefix stripped.
    fn take_prefixed(&mut self, section: &str, prefix: &str) -> Vec<(String, String, usize)> {
        let mut out = Vec::new();
        for ((sec, key), e) in self.entries.iter_mut() {
            if sec == section {
                if let Some(rest) = key.strip_prefix(prefix) {
                    e.used = true;
                    out.push((rest.to_string(), e.value.clone(), e.line));
                }
            }
        }
        out
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.iter().find(|((_, k), _)| k == key).map(|(_, e)| e.line)
    }

    fn reject_unused(&self) -> Result<()> {
        match self.entries.iter().find(|(_, e)| !e.used) {
            Some(((sec, key), e)) => Err(Error::config(
                Some(e.line),
                key.as_str(),
                format!("unknown key in [{sec}]"),
            )),
            None => Ok(()),
        }
    }
}

fn parse_f64(key: &str, value: &str, line: usize) -> Result<f64> {
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| Error::config(Some(line), key, format!("`{}` is not a number", value.trim())))?;
    if !v.is_finite() {
        return Err(Error::config(Some(line), key, "value must be finite"));
    }
    Ok(v)
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<f64>> {
    let items: Vec<&str> = value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::config(Some(line), key, "expected at least one number"));
    }
    items.iter().map(|s| parse_f64(key, s, line)).collect()
}

fn parse_usize(key: &str, value: &str, line: usize) -> Result<usize> {
    value.trim().parse().map_err(|_| {
        Error::config(
            Some(line),
            key,
            format!("`{}` is not a non-negative integer", value.trim()),
        )
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(Some(line), key, format!("`{other}` is not a boolean"))),
    }
}

fn parse_matrix(key: &str, value: &str, line: usize) -> Result<Vec<Vec<f64>>> {
    value.split(';').map(|row| parse_list(key, row, line)).collect()
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text)?;
    let cfg = build(&mut raw)?;
    raw.reject_unused()?;
    cfg.validate().map_err(|e| match e {
        Error::Config {
            line: None,
            key,
            message,
        } => Error::Config {
            line: raw.line_of(&key),
            key,
            message,
        },
        other => other,
    })?;
    Ok(cfg)
}

fn build(raw: &mut RawConfig) -> Result<ExperimentConfig> {
    // [model]
    let (id, id_line) = raw.require("model", "id")?;
    let fixed = raw
        .take_prefixed("model", "fixed.")
        .into_iter()
        .map(|(name, v, line)| parse_f64(&format!("fixed.{name}"), &v, line).map(|x| (name, x)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let model = ModelSpec::from_id(&id, &fixed).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::config(Some(id_line), "id", msg),
        other => other,
    })?;
    let (v, l) = raw.require("model", "initial_state")?;
    let initial_state = parse_list("initial_state", &v, l)?;
    let (v, l) = raw.require("model", "true_params")?;
    let true_params = parse_list("true_params", &v, l)?;
    let t0 = match raw.take("model", "t0") {
        Some((v, l)) => parse_f64("t0", &v, l)?,
        None => 0.0,
    };
    let dt = match raw.take("model", "dt") {
        Some((v, l)) => parse_f64("dt", &v, l)?,
        None => DEFAULT_DT,
    };

    // [prior]
    let (v, l) = raw.require("prior", "means")?;
    let means = parse_list("means", &v, l)?;
    let (v, l) = raw.require("prior", "stds")?;
    let stds = parse_list("stds", &v, l)?;
    if stds.len() != means.len() {
        return Err(Error::config(
            Some(l),
            "stds",
            format!("needs {} values to match `means`", means.len()),
        ));
    }
    let initial_state_stds = match raw.take("prior", "initial_state_stds") {
        Some((v, l)) => Some(parse_list("initial_state_stds", &v, l)?),
        None => None,
    };

    // [design]
    let (v, l) = raw.require("design", "noise_std")?;
    let noise_std = parse_f64("noise_std", &v, l)?;
    if !(noise_std > 0.0) {
        return Err(Error::config(
            Some(l),
            "noise_std",
            format!("must be positive, got {noise_std}"),
        ));
    }
    let mut observables = BTreeMap::new();
    for (name, v, line) in raw.take_prefixed("design", "observable.") {
        let key = format!("observable.{name}");
        if name.is_empty() {
            return Err(Error::config(Some(line), key, "observable needs a name"));
        }
        let rows = parse_matrix(&key, &v, line)?;
        let obs = ObservationModel::new(rows, noise_std).map_err(|e| Error::config(Some(line), &key, e.to_string()))?;
        observables.insert(name, obs);
    }
    let (v, obs_line) = raw.require("design", "observables")?;
    let observable_ids: Vec<String> = v
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if observable_ids.is_empty() {
        return Err(Error::config(
            Some(obs_line),
            "observables",
            "expected at least one observable id",
        ));
    }
    if let Some(missing) = observable_ids.iter().find(|id| !observables.contains_key(*id)) {
        return Err(Error::config(
            Some(obs_line),
            "observables",
            format!("`{missing}` has no `observable.{missing}` definition"),
        ));
    }
    let (v, l) = raw.require("design", "stage_times")?;
    let stage_times = v
        .split('|')
        .map(|s| parse_list("stage_times", s, l))
        .collect::<Result<Vec<_>>>()?;
    let design_space = DesignSpace::from_grid(&stage_times, &observable_ids)
        .map_err(|e| Error::config(Some(l), "stage_times", e.to_string()))?;

    // [run]
    let (v, l) = raw.require("run", "ensemble_size")?;
    let ensemble_size = parse_usize("ensemble_size", &v, l)?;
    let knn_k = match raw.take("run", "knn_k") {
        Some((v, l)) => parse_usize("knn_k", &v, l)?,
        None => DEFAULT_K,
    };
    let n_trials = match raw.take("run", "n_trials") {
        Some((v, l)) => parse_usize("n_trials", &v, l)?,
        None => 1,
    };
    let base_seed = match raw.take("run", "base_seed") {
        Some((v, l)) => v.trim().parse::<u64>().map_err(|_| {
            Error::config(
                Some(l),
                "base_seed",
                format!("`{}` is not a 64-bit unsigned integer", v.trim()),
            )
        })?,
        None => 0,
    };
    let use_exact_r = match raw.take("run", "use_exact_r") {
        Some((v, l)) => parse_bool("use_exact_r", &v, l)?,
        None => false,
    };
    let nonnegative_params = match raw.take("run", "nonnegative_params") {
        Some((v, l)) => parse_bool("nonnegative_params", &v, l)?,
        None => true,
    };
    let strategies = match raw.take("run", "strategies") {
        Some((v, l)) => parse_strategies(&v).map_err(|e| Error::config(Some(l), "strategies", e.to_string()))?,
        None => default_strategies(&design_space),
    };

    Ok(ExperimentConfig {
        model,
        prior: PriorSpec {
            param_means: ParamVector(means),
            param_stds: stds,
            initial_state: StateVector(initial_state),
            initial_state_stds,
        },
        true_params: ParamVector(true_params),
        t0,
        design_space,
        observables,
        noise_std,
        ensemble_size,
        knn_k,
        dt,
        n_trials,
        base_seed,
        use_exact_r,
        nonnegative_params,
        strategies,
    })
}

/// Comma-separated strategy list, e.g. `max-mi, fixed:0, random`.
pub fn parse_strategies(text: &str) -> Result<Vec<Strategy>> {
    let list = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Strategy>>>()?;
    if list.is_empty() {
        return Err(Error::invalid("strategy list is empty"));
    }
    Ok(list)
}

/// max-mi, max-entropy, every fixed index valid in all stages, random.
pub fn default_strategies(space: &DesignSpace) -> Vec<Strategy> {
    let min_len = space.stages.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = vec![Strategy::MaxMi, Strategy::MaxEntropy];
    out.extend((0..min_len).map(Strategy::Fixed));
    out.push(Strategy::Random);
    out
}

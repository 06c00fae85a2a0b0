//! Replays the fuzz corpus through the fuzz-target invariants and throws
//! generated mutations of it at every parser.

use std::path::{Path, PathBuf};

use proptest::prelude::*;

use seqdesign::config::{parse_config_str, parse_strategies};
use seqdesign::design::Strategy as DesignStrategy;
use seqdesign::ensemble::Ensemble;
use seqdesign::harness::parse_results_csv;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let seeds: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert!(!seeds.is_empty(), "empty corpus for {target}");
    seeds
}

fn config_target(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config_str(text) {
            cfg.validate().expect("parsed configs are valid");
        }
    }
}

fn results_target(data: &[u8]) {
    let _ = parse_results_csv(data);
}

fn ensemble_target(data: &[u8]) {
    if let Ok(ens) = Ensemble::read_csv(data, 0.0) {
        let mut out = Vec::new();
        ens.write_csv(&mut out).unwrap();
        assert_eq!(Ensemble::read_csv(out.as_slice(), 0.0).unwrap(), ens);
    }
}

fn strategies_target(data: &[u8]) {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(list) = parse_strategies(text) {
            for s in list {
                assert_eq!(s.to_string().parse::<DesignStrategy>().unwrap(), s);
            }
        }
    }
}

type Target = (&'static str, fn(&[u8]));

const TARGETS: [Target; 4] = [
    ("parse_config", config_target),
    ("parse_results_csv", results_target),
    ("read_ensemble_csv", ensemble_target),
    ("parse_strategies", strategies_target),
];

#[test]
fn corpus_seeds_satisfy_target_invariants() {
    for (name, target) in TARGETS {
        for seed in corpus(name) {
            target(&seed);
        }
    }
}

#[test]
fn bundled_configs_in_corpus_parse() {
    let seeds = corpus("parse_config");
    let ok = seeds
        .iter()
        .filter(|s| parse_config_str(std::str::from_utf8(s).unwrap()).is_ok())
        .count();
    assert!(ok >= 3);
}

/// A corpus seed with a byte range replaced.
fn mutated(target: &'static str) -> impl proptest::strategy::Strategy<Value = Vec<u8>> {
    let seeds = corpus(target);
    (
        0..seeds.len(),
        any::<prop::sample::Index>(),
        0usize..8,
        prop::collection::vec(any::<u8>(), 0..8),
    )
        .prop_map(move |(i, at, len, insert)| {
            let mut s = seeds[i].clone();
            let start = at.index(s.len() + 1);
            let end = (start + len).min(s.len());
            s.splice(start..end, insert);
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn config_parser_never_panics(data in mutated("parse_config")) {
        config_target(&data);
    }

    #[test]
    fn results_parser_never_panics(data in mutated("parse_results_csv")) {
        results_target(&data);
    }

    #[test]
    fn ensemble_reader_never_panics(data in mutated("read_ensemble_csv")) {
        ensemble_target(&data);
    }

    #[test]
    fn strategy_parser_never_panics(data in mutated("parse_strategies")) {
        strategies_target(&data);
    }

    #[test]
    fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
        for (_, target) in TARGETS {
            target(text.as_bytes());
        }
    }
}

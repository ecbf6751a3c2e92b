#![allow(dead_code)]

use std::collections::HashMap;

use ddl_core::aggregator::{count_base_evaluations, corpus_raw_groups};
use ddl_core::distiller::train;
use ddl_core::engine::score_corpus;
use ddl_core::eval::{compare_strategies, Protocol, StrategyRow};
use ddl_core::stats::spearman;
use ddl_core::synth::{generate, split_holdout};
use ddl_core::{AggregationPolicy, Corpus, Regressor, RegressorConfig, Strategy, SynthConfig};

pub const HOLDOUT: f64 = 0.2;

/// Everything the benchmark criteria read from one seeded run.
pub struct BenchRun {
    pub test: Corpus<f64>,
    pub model: Regressor<f64>,
    /// Engine scores of the held-out elements, in test-corpus order.
    pub test_scores: Vec<f64>,
    /// Regressor predictions on the held-out elements.
    pub test_predictions: Vec<f64>,
    pub final_loss: f64,
    pub initial_loss: f64,
}

impl BenchRun {
    pub fn spearman(&self) -> f64 {
        spearman(&self.test_predictions, &self.test_scores).unwrap()
    }

    pub fn compare(&self, policies: &[AggregationPolicy], far_levels: &[f64]) -> Vec<StrategyRow> {
        let protocol = Protocol {
            far_levels: far_levels.to_vec(),
            pairs: None,
            identification: false,
        };
        compare_strategies(&self.test, &self.model, policies, &protocol).unwrap()
    }

    pub fn used_total(&self, policy: &AggregationPolicy) -> (usize, usize) {
        count_base_evaluations(&corpus_raw_groups(&self.test), &self.model, policy).unwrap()
    }
}

/// Scores the full corpus, trains on the kept groups and predicts the held-out ones.
pub fn bench_run(config: &SynthConfig) -> BenchRun {
    let (corpus, _) = generate::<f64>(config).unwrap();
    let scores = score_corpus(&corpus).unwrap();
    let (train_split, test) = split_holdout(&corpus, HOLDOUT).unwrap();
    let reg = RegressorConfig {
        seed: config.seed,
        ..RegressorConfig::with_input(corpus.d_raw())
    };
    let (model, report) = train(&train_split, &scores, reg).unwrap();
    let by_id: HashMap<&str, f64> = scores.iter().map(|r| (r.element_id.as_str(), r.d_score)).collect();
    let test_scores = test.elements().iter().map(|e| by_id[e.element_id.as_str()]).collect();
    let test_predictions = test
        .elements()
        .iter()
        .map(|e| model.predict(&e.raw_input).unwrap())
        .collect();
    BenchRun {
        test,
        model,
        test_scores,
        test_predictions,
        final_loss: report.final_loss,
        initial_loss: report.initial_loss,
    }
}

pub fn row(rows: &[StrategyRow], s: Strategy) -> &StrategyRow {
    rows.iter().find(|r| r.policy.strategy == s).unwrap()
}

pub fn all_policies(threshold: f64) -> Vec<AggregationPolicy> {
    Strategy::ALL
        .iter()
        .map(|&s| AggregationPolicy::new(s).with_threshold(threshold))
        .collect()
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

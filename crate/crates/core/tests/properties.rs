use std::collections::HashMap;

use ddl_core::aggregator::{aggregate, filter_by_score, rescale, select_and_weight};
use ddl_core::data::{read_corpus_binary, read_corpus_csv, read_scores, write_corpus_binary, write_corpus_csv, write_scores};
use ddl_core::distiller::{gradient_check, read_model, write_model};
use ddl_core::engine::score_corpus;
use ddl_core::eval::{cmc_map, roc_curve, tar_at_far, verification_accuracy};
use ddl_core::stats::spearman;
use ddl_core::synth::generate;
use ddl_core::{
    Activation, AggregationPolicy, Corpus, DiscriminabilityRecord, ElementRecord, Regressor,
    RegressorConfig, Strategy as Pooling, SynthConfig,
};
use proptest::prelude::*;

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

/// Labeled corpus in which every class appears at least once.
fn corpus_strategy() -> impl Strategy<Value = Corpus<f64>> {
    (2usize..=4, 1usize..=6)
        .prop_flat_map(|(k, d)| {
            let n = k..=24;
            (Just(k), n.prop_flat_map(move |n| prop::collection::vec((vector(d), 0..k), n)))
        })
        .prop_map(|(k, rows)| {
            let elements = rows
                .into_iter()
                .enumerate()
                .map(|(i, (embedding, label))| ElementRecord {
                    element_id: format!("e{i:03}"),
                    group_id: format!("g{}", i % 5),
                    class_label: Some(if i < k { i } else { label }),
                    raw_input: embedding.iter().map(|x| x * 0.5).collect(),
                    embedding,
                })
                .collect();
            Corpus::with_classes(elements, k).unwrap()
        })
        .prop_filter("scorable", |c| score_corpus(c).is_ok())
}

fn scores_by_id(records: &[DiscriminabilityRecord<f64>]) -> HashMap<String, f64> {
    records.iter().map(|r| (r.element_id.clone(), r.d_score)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scores_ignore_element_order(corpus in corpus_strategy(), seed in any::<u64>()) {
        let mut elements = corpus.elements().to_vec();
        let n = elements.len();
        for i in (1..n).rev() {
            elements.swap(i, (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize);
        }
        let shuffled = Corpus::with_classes(elements, corpus.k_classes()).unwrap();
        let a = scores_by_id(&score_corpus(&corpus).unwrap());
        let b = scores_by_id(&score_corpus(&shuffled).unwrap());
        for (id, s) in &a {
            prop_assert!((s - b[id]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_scale_invariant(corpus in corpus_strategy(), factor in 0.01f64..100.0) {
        let scaled: Vec<_> = corpus.elements().iter().cloned().map(|mut e| {
            e.embedding.iter_mut().for_each(|x| *x *= factor);
            e
        }).collect();
        let scaled = Corpus::with_classes(scaled, corpus.k_classes()).unwrap();
        let a = score_corpus(&corpus).unwrap();
        let b = score_corpus(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.d_score - y.d_score).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_lie_strictly_inside_unit_interval(corpus in corpus_strategy()) {
        for r in score_corpus(&corpus).unwrap() {
            prop_assert!(r.d_score > 0.0 && r.d_score < 1.0);
        }
    }

    #[test]
    fn f32_scores_track_f64(seed in any::<u64>()) {
        let config = SynthConfig { seed, elements_per_class: 20, groups_per_class: 4, ..SynthConfig::default() };
        let (wide, _) = generate::<f64>(&config).unwrap();
        let (narrow, _) = generate::<f32>(&config).unwrap();
        let a = score_corpus(&wide).unwrap();
        let b = score_corpus(&narrow).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.d_score - y.d_score as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn corpus_csv_round_trip(corpus in corpus_strategy()) {
        let mut buf = Vec::new();
        write_corpus_csv(&corpus, &mut buf).unwrap();
        let back = read_corpus_csv::<f64, _>(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), corpus.len());
        for (a, b) in corpus.elements().iter().zip(back.elements()) {
            prop_assert_eq!(&a.element_id, &b.element_id);
            prop_assert_eq!(a.class_label, b.class_label);
            for (x, y) in a.embedding.iter().chain(&a.raw_input).zip(b.embedding.iter().chain(&b.raw_input)) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn corpus_binary_round_trip_is_exact(corpus in corpus_strategy()) {
        let mut buf = Vec::new();
        write_corpus_binary(&corpus, &mut buf).unwrap();
        let back = read_corpus_binary::<f64, _>(buf.as_slice()).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn score_csv_round_trip(corpus in corpus_strategy()) {
        let records = score_corpus(&corpus).unwrap();
        let mut buf = Vec::new();
        write_scores(&records, &mut buf).unwrap();
        let back = read_scores::<f64, _>(buf.as_slice()).unwrap();
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(&a.element_id, &b.element_id);
            prop_assert!((a.d_score - b.d_score).abs() <= 1e-9);
            prop_assert!((a.d_raw - b.d_raw).abs() <= 1e-9 * a.d_raw.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rescale_hits_both_ends(scores in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let w = rescale(&scores);
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            prop_assert!(w.iter().all(|&x| x == 1.0));
        } else {
            prop_assert_eq!(w.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(w.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] < scores[j] {
                        prop_assert!(w[i] <= w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn filter_keeps_exactly_the_scores_above_threshold(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        t in 0.0f64..1.0,
    ) {
        let kept = filter_by_score(&scores, t);
        let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > t).collect();
        if above.is_empty() {
            prop_assert_eq!(kept.len(), 1);
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(scores[kept[0]], best);
        } else {
            prop_assert_eq!(kept, above);
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_convex(
        rows in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 4), 0.01f64..1.0), 1..12),
        rotate in 0usize..12,
    ) {
        let feats: Vec<&[f64]> = rows.iter().map(|(f, _)| f.as_slice()).collect();
        let weights: Vec<f64> = rows.iter().map(|(_, w)| *w).collect();
        let pooled = aggregate(&feats, &weights).unwrap();
        let r = rotate % rows.len();
        let mut pf = feats.clone();
        let mut pw = weights.clone();
        pf.rotate_left(r);
        pw.rotate_left(r);
        let permuted = aggregate(&pf, &pw).unwrap();
        for j in 0..4 {
            prop_assert!((pooled[j] - permuted[j]).abs() < 1e-12);
            let lo = feats.iter().map(|f| f[j]).fold(f64::INFINITY, f64::min);
            let hi = feats.iter().map(|f| f[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled[j] >= lo - 1e-12 && pooled[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn ddl_weights_are_rescaled_survivor_scores(
        scores in prop::collection::vec(0.0f64..1.0, 1..20),
        t in 0.0f64..1.0,
    ) {
        let policy = AggregationPolicy::new(Pooling::Ddl).with_threshold(t);
        let (kept, weights) = select_and_weight(&scores, &policy);
        prop_assert_eq!(&kept, &filter_by_score(&scores, t));
        let survivors: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        prop_assert_eq!(weights, rescale(&survivors));
    }

    #[test]
    fn roc_is_monotone_from_origin(
        gen in prop::collection::vec(-1.0f64..1.0, 1..60),
        imp in prop::collection::vec(-1.0f64..1.0, 1..60),
    ) {
        let roc = roc_curve(&gen, &imp);
        prop_assert_eq!(roc[0], (0.0, 0.0));
        prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn tar_grows_with_far(
        gen in prop::collection::vec(-1.0f64..1.0, 1..60),
        imp in prop::collection::vec(-1.0f64..1.0, 1..60),
    ) {
        let levels = [1e-3, 1e-2, 0.05, 0.1, 0.3, 1.0];
        let t = tar_at_far(&gen, &imp, &levels).unwrap();
        for w in t.windows(2) {
            prop_assert!(w[1].tar >= w[0].tar);
        }
        for x in &t {
            prop_assert!(x.achieved_far <= x.far_target);
        }
        prop_assert_eq!(t.last().unwrap().tar, 1.0);
        let (acc, _) = verification_accuracy(&gen, &imp).unwrap();
        let floor = gen.len().max(imp.len()) as f64 / (gen.len() + imp.len()) as f64;
        prop_assert!(acc >= floor - 1e-12 && acc <= 1.0);
    }

    #[test]
    fn cmc_is_nondecreasing_and_ends_at_one(
        gallery in prop::collection::vec((vector(3), 0usize..4), 4..30),
        queries in prop::collection::vec((vector(3), 0usize..4), 1..10),
    ) {
        let mut gallery = gallery;
        for (i, g) in gallery.iter_mut().take(4).enumerate() {
            g.1 = i;
        }
        let g: Vec<(&[f64], usize)> = gallery.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        let q: Vec<(&[f64], usize)> = queries.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        let (cmc, map) = cmc_map(&q, &g).unwrap();
        for w in cmc.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        prop_assert_eq!(*cmc.last().unwrap(), 1.0);
        prop_assert!(map > 0.0 && map <= 1.0);
    }

    #[test]
    fn spearman_is_rank_only(xs in prop::collection::vec(-10.0f64..10.0, 3..40)) {
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let rho = spearman(&xs, &ys).unwrap();
        let distinct = xs.iter().any(|x| *x != xs[0]);
        if distinct {
            prop_assert!((rho - 1.0).abs() < 1e-12);
        }
    }
}

fn regressor_strategy() -> impl Strategy<Value = (RegressorConfig, Vec<f64>)> {
    (1usize..=5, prop::collection::vec(1usize..=6, 1..=3), any::<bool>())
        .prop_flat_map(|(d, hidden, tanh)| {
            let mut sizes = vec![d];
            sizes.extend(hidden);
            sizes.push(1);
            let config = RegressorConfig {
                layer_sizes: sizes,
                hidden_activation: if tanh { Activation::Tanh } else { Activation::Relu },
                ..RegressorConfig::with_input(d)
            };
            let count = Regressor::<f64>::zeros(config.clone()).unwrap().num_parameters();
            (Just(config), prop::collection::vec(-1.5f64..1.5, count))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradient_matches_finite_differences(
        (config, params) in regressor_strategy(),
        rows in prop::collection::vec((prop::collection::vec(-2.0f64..2.0, 5), 0.05f64..0.95), 1..8),
    ) {
        let d = config.input_dim();
        let model = Regressor::from_parameters(config, &params).unwrap();
        let batch: Vec<(&[f64], f64)> = rows.iter().map(|(x, t)| (&x[..d], *t)).collect();
        let err = gradient_check(&model, &batch).unwrap();
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn model_round_trip_is_bit_exact((config, params) in regressor_strategy(), seed in any::<u64>()) {
        let config = RegressorConfig { seed, ..config };
        let model = Regressor::from_parameters(config, &params).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back = read_model::<f64, _>(buf.as_slice()).unwrap();
        prop_assert_eq!(back.config(), model.config());
        let a: Vec<u64> = model.parameters().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = back.parameters().iter().map(|p| p.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

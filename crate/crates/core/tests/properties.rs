mod common;

use common::{gaussian, random_table, rng, text_table};
use mgclip::compensation::{ensemble_scores, CompensationClassifier, EnsembleConfig};
use mgclip::data::{holdout_split, read_table, split_tasks, write_table, Modality};
use mgclip::encoder::text_head_scores;
use mgclip::gapmetrics::{measure_gap, relative_delta};
use mgclip::linalg::{cosine, orthonormality_error, qr_basis, svd, Matrix};
use mgclip::subspace::{classifier_basis, coverage_distance, energy_rank, SourceTag};
use proptest::prelude::*;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_symmetric_and_scale_free(a in vec_strategy(6), b in vec_strategy(6), s in 0.01..100.0f64) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let ab = cosine(&a, &b).unwrap();
        prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-15);
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((ab - cosine(&scaled, &b).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn gap_statistics_are_consistent(seed in 0u64..10_000, n in 2usize..12, k in 2usize..8) {
        let mut r = rng(seed);
        let n = n.max(k);
        let images = random_table(&mut r, n, k, 5, Modality::Image);
        let texts = text_table(&mut r, k, 5);
        let g = measure_gap(&images, &texts).unwrap();
        prop_assert!((-1.0..=1.0).contains(&g.pos) && (-1.0..=1.0).contains(&g.neg));
        let mixed = (g.pos + (k - 1) as f64 * g.neg) / k as f64;
        prop_assert!((g.inter_modality_mean - mixed).abs() < 1e-12);
        prop_assert_eq!(g.n_images, n);
        prop_assert_eq!(g.n_classes, k);
    }

    #[test]
    fn relative_delta_nonnegative_for_positive_reference(now in -1.0..1.0f64, reference in 1e-3..1.0f64) {
        let d = relative_delta(now, reference).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(relative_delta(reference, reference).unwrap(), 0.0);
    }

    #[test]
    fn svd_reconstructs_and_qr_is_orthonormal(seed in 0u64..10_000, rows in 1usize..8, cols in 1usize..8) {
        let mut r = rng(seed);
        let m = gaussian(&mut r, rows, cols);
        let dec = svd(&m).unwrap();
        prop_assert!(dec.reconstruct().sub(&m).frobenius_norm() < 1e-9 * (1.0 + m.frobenius_norm()));
        prop_assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        let q = qr_basis(&m).unwrap();
        prop_assert!(orthonormality_error(&q) < 1e-10);
        prop_assert_eq!(q.cols(), rows.min(cols));
    }

    #[test]
    fn coverage_distance_bounds(seed in 0u64..10_000, d in 3usize..8, a in 1usize..4, extra in 0usize..3) {
        let mut r = rng(seed);
        let a = a.min(d);
        let src = gaussian(&mut r, d, a);
        let more = gaussian(&mut r, d, extra);
        let b_src = classifier_basis(&src, SourceTag::TextClassifier).unwrap();
        let b_sup = classifier_basis(&Matrix::hcat(&[&src, &more]).unwrap(), SourceTag::Combined).unwrap();
        prop_assert!(coverage_distance(&b_src, &b_src).unwrap() < 1e-10);
        prop_assert!(coverage_distance(&b_src, &b_sup).unwrap() < 1e-10);
        let other = classifier_basis(&gaussian(&mut r, d, 1), SourceTag::VisualClassifier).unwrap();
        let dist = coverage_distance(&b_src, &other).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dist));
    }

    #[test]
    fn energy_rank_monotone(s in prop::collection::vec(0.0..5.0f64, 1..10), e1 in 0.01..1.0f64, e2 in 0.01..1.0f64) {
        let mut s = s;
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(s[0] > 0.0);
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(energy_rank(&s, lo) <= energy_rank(&s, hi));
        prop_assert!(energy_rank(&s, hi) <= s.len());
    }

    #[test]
    fn head_and_ensemble_normalization(seed in 0u64..10_000, beta in 0.0..10.0f64) {
        let mut r = rng(seed);
        let k = 4;
        let features = random_table(&mut r, 12, k, 6, Modality::Image);
        let texts = text_table(&mut r, k, 6);
        let clf = CompensationClassifier::new(6, 16.0).unwrap()
            .init_new_classes(&features, &[0, 1, 2, 3]).unwrap();
        let text = text_head_scores(features.vectors(), &texts, 10.0, Some(&[2])).unwrap();
        let vis = clf.probabilities(features.vectors()).unwrap();
        let ens = ensemble_scores(features.vectors(), &texts, 10.0, &clf, &EnsembleConfig { beta }).unwrap();
        for i in 0..features.len() {
            prop_assert!((text.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert_eq!(text.row(i)[2], 0.0);
            prop_assert!((vis.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!((ens.row(i).iter().sum::<f64>() - (1.0 + beta)).abs() < 1e-9);
        }
    }

    #[test]
    fn visual_argmax_ignores_input_scale(seed in 0u64..10_000, lambda in 0.01..100.0f64) {
        let mut r = rng(seed);
        let features = random_table(&mut r, 10, 3, 4, Modality::Image);
        let clf = CompensationClassifier::new(4, 16.0).unwrap()
            .init_new_classes(&features, &[0, 1, 2]).unwrap();
        let x = gaussian(&mut r, 5, 4);
        let a = clf.logits(&x).unwrap();
        let b = clf.logits(&x.scaled(lambda)).unwrap();
        for i in 0..5 {
            prop_assert_eq!(mgclip::encoder::argmax(a.row(i)), mgclip::encoder::argmax(b.row(i)));
        }
    }

    #[test]
    fn task_split_partitions_classes(classes in 1usize..30, tasks in 1usize..10, seed in 0u64..1000) {
        prop_assume!(tasks <= classes);
        let split = split_tasks(classes, tasks, seed).unwrap();
        let mut all = split.all_classes();
        all.sort_unstable();
        prop_assert_eq!(all, (0..classes).collect::<Vec<_>>());
        let sizes: Vec<usize> = split.tasks.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn holdout_is_a_partition(labels in prop::collection::vec(0usize..5, 1..60), frac in 0.0..0.9f64, seed in 0u64..1000) {
        let (train, test) = holdout_split(&labels, frac, seed);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..5 {
            if labels.contains(&c) {
                prop_assert!(train.iter().any(|&i| labels[i] == c));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quantized_tables_round_trip(seed in 0u64..10_000, n in 1usize..20, dim in 1usize..9) {
        let mut r = rng(seed);
        let k = n.min(4);
        let table = random_table(&mut r, n, k, dim, Modality::Image).quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.embt");
        write_table(&table, &path).unwrap();
        prop_assert_eq!(read_table(&path).unwrap(), table);
    }
}

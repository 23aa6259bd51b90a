use std::collections::BTreeMap;

use proptest::prelude::*;
use sghf_core::data::Dataset;
use sghf_core::eval::{
    accuracy, comparison_table, external_validate, f1, roc_auc, run_experiment, run_suite, ConfusionCounts,
    FoldMetrics, MetricsReport, RunMeta, Summary,
};
use sghf_core::sghf::Variant;
use sghf_core::{Error, RunConfig};

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            // coarse grid so ties are common
            prop::collection::vec((0u8..12).prop_map(|k| k as f64 / 11.0), n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_pair_counting((scores, mut labels) in scored()) {
        labels[0] = 0;
        labels[1] = 1;
        let (auc, roc) = roc_auc(&scores, &labels).unwrap();
        prop_assert_eq!(auc, pair_count_auc(&scores, &labels));
        prop_assert!((0.0..=1.0).contains(&auc));
        let mut distinct = scores.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assert!(roc.len() >= distinct.len());
        prop_assert!(roc.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn auc_is_rank_invariant((scores, mut labels) in scored(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        labels[0] = 0;
        labels[1] = 1;
        let base = roc_auc(&scores, &labels).unwrap().0;
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| (s - 0.3).powi(3)).collect();
        prop_assert_eq!(roc_auc(&affine, &labels).unwrap().0, base);
        prop_assert_eq!(roc_auc(&cubed, &labels).unwrap().0, base);
    }

    #[test]
    fn swapping_the_positive_class_complements_auc((scores, mut labels) in scored()) {
        labels[0] = 0;
        labels[1] = 1;
        let swapped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = roc_auc(&scores, &labels).unwrap().0;
        let b = roc_auc(&scores, &swapped).unwrap().0;
        prop_assert_eq!(a + b, 1.0);
    }

    #[test]
    fn count_metrics(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        if c.total() == 0 {
            prop_assert!(accuracy(&c).is_err());
        } else {
            let acc = accuracy(&c).unwrap();
            prop_assert_eq!(acc, (tp + tn) as f64 / (tp + tn + fp + fn_) as f64);
            prop_assert!((0.0..=1.0).contains(&acc));
        }
        let score = f1(&c);
        prop_assert!((0.0..=1.0).contains(&score));
        if tp > 0 {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            prop_assert!((score - 2.0 * p * r / (p + r)).abs() < 1e-12);
        } else {
            prop_assert_eq!(score, 0.0);
        }
    }

    #[test]
    fn aggregate_recomputes_from_rows(values in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let folds: Vec<FoldMetrics> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| FoldMetrics {
                fold: k,
                n_test: 10,
                accuracy: v,
                auc: 1.0 - v,
                f1: v / 2.0,
                confusion: ConfusionCounts::new(1, 1, 1, 1),
                roc: Vec::new(),
            })
            .collect();
        let r = MetricsReport::new(meta("x"), folds);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!((r.accuracy.mean - mean).abs() < 1e-12);
        prop_assert!((r.accuracy.std - sd).abs() < 1e-12);
        prop_assert!((r.auc.std - sd).abs() < 1e-12);
        prop_assert!((r.f1.mean - mean / 2.0).abs() < 1e-12);
    }
}

#[test]
fn auc_fixed_cases() {
    assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap().0, 1.0);
    assert_eq!(roc_auc(&[0.4; 6], &[1, 0, 1, 0, 1, 0]).unwrap().0, 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc)));
    assert!(roc_auc(&[0.1], &[1, 0]).is_err());
}

#[test]
fn count_fixed_cases() {
    assert_eq!(accuracy(&ConfusionCounts::new(50, 30, 10, 10)).unwrap(), 0.8);
    assert_eq!(accuracy(&ConfusionCounts::new(5, 5, 0, 0)).unwrap(), 1.0);
    assert_eq!(f1(&ConfusionCounts::new(8, 0, 2, 2)), 0.8);
    assert_eq!(f1(&ConfusionCounts::new(0, 9, 3, 1)), 0.0);
    let c = ConfusionCounts::from_labels(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]);
    assert_eq!(c, ConfusionCounts::new(2, 1, 1, 1));
}

fn meta(variant: &str) -> RunMeta {
    RunMeta {
        variant: variant.into(),
        backbone: "cnn-small".into(),
        seed: 0,
        config_hash: "0".into(),
        evaluation: "cross-validation".into(),
    }
}

fn injected(variant: &str, acc: &[f64]) -> MetricsReport {
    let folds = acc
        .iter()
        .enumerate()
        .map(|(k, &a)| FoldMetrics {
            fold: k,
            n_test: 4,
            accuracy: a,
            auc: a,
            f1: a,
            confusion: ConfusionCounts::new(1, 1, 1, 1),
            roc: Vec::new(),
        })
        .collect();
    MetricsReport::new(meta(variant), folds)
}

#[test]
fn summary_and_table_formatting() {
    let s = Summary::of(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(s.mean, 3.0);
    assert!((s.std - 1.5811388300841898).abs() < 1e-12);
    assert_eq!(Summary { mean: 0.8768, std: 0.0681 }.cell(), "87.68±6.81");

    let (md, csv) = comparison_table(&[injected("a", &[0.9, 0.8])]).unwrap();
    assert_eq!(md.lines().count(), 3);
    assert_eq!(csv.lines().count(), 2);
    let (md, csv) = comparison_table(&[injected("a", &[0.9, 0.8]), injected("b", &[0.5, 0.6])]).unwrap();
    let row_a = md.lines().find(|l| l.starts_with("| a ")).unwrap();
    assert!(row_a.contains("**85.00±7.07**"), "{row_a}");
    assert!(csv.lines().any(|l| l.starts_with("b,") && l.contains("55.00±7.07") && !l.contains('*')));
    assert!(comparison_table(&[]).is_err());
}

#[test]
fn report_files_round_trip_and_missing_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let r = injected("sghf", &[0.7, 0.9, 0.8]);
    r.write(dir.path()).unwrap();
    assert_eq!(MetricsReport::read(dir.path()).unwrap(), r);
    assert!(dir.path().join("folds.csv").exists());
    let missing = dir.path().join("nope");
    let err = MetricsReport::read(&missing).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}

fn tiny() -> RunConfig {
    let mut c = RunConfig::desk();
    c.dataset.n_subjects = 30;
    c.external.n_subjects = 20;
    c.pfe.epochs = 2;
    c.pfsm.steps = 3;
    c.sghf.epochs = 2;
    c
}

#[test]
fn experiments_are_deterministic_and_job_count_free() {
    let cfg = tiny();
    let ds = Dataset::generate(&cfg.dataset, cfg.data_seed()).unwrap();
    let a = run_experiment(&ds, Variant::Sghf, &cfg, 1).unwrap();
    let b = run_experiment(&ds, Variant::Sghf, &cfg, 3).unwrap();
    assert_eq!(a.folds.len(), 5);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_csv(), b.to_csv());
    for f in &a.folds {
        assert!((0.0..=1.0).contains(&f.accuracy) && (0.0..=1.0).contains(&f.auc) && (0.0..=1.0).contains(&f.f1));
        assert_eq!(f.confusion.total() as usize, f.n_test);
    }
}

#[test]
fn replaying_checkpoints_reproduces_fold_metrics() {
    let cfg = tiny();
    let ds = Dataset::generate(&cfg.dataset, cfg.data_seed()).unwrap();
    let suite = run_suite(&ds, &[Variant::BenchmarkRf, Variant::Sghf], &cfg, 1).unwrap();
    let subsets: BTreeMap<usize, Vec<u64>> = suite.folds.iter().map(|f| (f.fold, f.test_ids.clone())).collect();
    for v in [Variant::BenchmarkRf, Variant::Sghf] {
        let cv = suite.report(v, &cfg).unwrap();
        let replay = external_validate(&suite.models(v), &ds, Some(&subsets), &cfg).unwrap();
        assert_eq!(cv.folds, replay.folds);
        assert_eq!(replay.meta.evaluation, "checkpoint-replay");

        let shifted = Dataset::generate(&cfg.external_dataset(), cfg.external_seed()).unwrap();
        let ext = external_validate(&suite.models(v), &shifted, None, &cfg).unwrap();
        assert_eq!(ext.folds.len(), cv.folds.len());
        assert!(ext.folds.iter().all(|f| f.n_test == cfg.external.n_subjects));
        let keys = |r: &MetricsReport| {
            let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
            v.as_object().unwrap().keys().cloned().collect::<Vec<_>>()
        };
        assert_eq!(keys(&ext), keys(&cv));
    }
}

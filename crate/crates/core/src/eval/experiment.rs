use std::collections::BTreeMap;

use rayon::prelude::*;

use super::metrics::{accuracy, f1, roc_auc, ConfusionCounts};
use super::report::{FoldMetrics, MetricsReport, RunMeta};
use crate::config::{PfsmScope, RunConfig};
use crate::data::{split_folds, Dataset, FoldSplit, Subject};
use crate::error::{Error, Result};
use crate::pfe::{train_pfe, EpochLog, FeatureCache, PfeModel};
use crate::pfsm::{train_pfsm, PfsmModel, StepLog};
use crate::rng;
use crate::sghf::{build_model, predict_all, train_sghf, Prediction, SghfModel, Variant};

/// Extractor and synthesis module shared by the variants of one fold.
#[derive(Clone, Debug)]
pub struct Prior {
    pub pfe: PfeModel,
    pub pfe_log: Vec<EpochLog>,
    pub pfsm: PfsmModel,
    pub pfsm_log: Vec<StepLog>,
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: SghfModel,
    pub log: Vec<EpochLog>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub test_ids: Vec<u64>,
    /// Present when some variant needed synthesized features.
    pub prior: Option<Prior>,
    pub runs: Vec<VariantRun>,
}

/// Everything produced by a cross-validated run of one or more variants.
#[derive(Clone, Debug)]
pub struct Suite {
    pub split: FoldSplit,
    pub folds: Vec<FoldRun>,
}

fn stage_seed(seed: u64, fold: Option<usize>, stage: &str) -> u64 {
    match fold {
        Some(f) => rng::derive(seed, &[rng::label("fold"), f as u64, rng::label(stage)]),
        None => rng::derive(seed, &[rng::label("global"), rng::label(stage)]),
    }
}

/// Fits the extractor, caches its features and trains the synthesis module.
pub fn train_prior(subjects: &[&Subject], cfg: &RunConfig, seed: u64) -> Result<Prior> {
    let (pfe, pfe_log) = train_pfe(subjects, &cfg.pfe, rng::derive(seed, &[rng::label("pfe")]))?;
    let cache = FeatureCache::build(&pfe, subjects)?;
    let (pfsm, pfsm_log) = train_pfsm(
        subjects,
        &cache,
        &cfg.prep,
        &cfg.pfsm,
        rng::derive(seed, &[rng::label("pfsm")]),
    )?;
    Ok(Prior {
        pfe,
        pfe_log,
        pfsm,
        pfsm_log,
    })
}

fn input_shape(cfg: &RunConfig) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(&cfg.prep.voi);
    s
}

/// Trains one variant on `train` and predicts `test`.
pub fn run_variant(
    variant: Variant,
    train: &[&Subject],
    test: &[&Subject],
    prior: Option<&Prior>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<VariantRun> {
    let generator = variant
        .needs_generator()
        .then(|| prior.map(|p| p.pfsm.generator.clone()))
        .flatten();
    let model = build_model(variant, &cfg.sghf, &input_shape(cfg), generator, seed)?;
    let (model, log) = train_sghf(model, train, &cfg.prep, rng::derive(seed, &[rng::label("train")]))?;
    let predictions = predict_all(&model, test, &cfg.prep)?;
    Ok(VariantRun {
        variant,
        model,
        log,
        predictions,
    })
}

fn run_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    fold: usize,
    variants: &[Variant],
    global_prior: Option<&Prior>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<FoldRun> {
    let test_ids = split.test_ids(fold);
    let train = dataset.select(&split.train_ids(fold))?;
    let test = dataset.select(&test_ids)?;
    let needs_prior = variants.iter().any(|v| v.needs_generator());
    let prior = match (needs_prior, global_prior) {
        (false, _) => None,
        (true, Some(p)) => Some(p.clone()),
        (true, None) => Some(train_prior(&train, cfg, stage_seed(seed, Some(fold), "prior"))?),
    };
    let runs = variants
        .iter()
        .map(|&v| {
            let s = stage_seed(seed, Some(fold), &v.to_string());
            run_variant(v, &train, &test, prior.as_ref(), cfg, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldRun {
        fold,
        test_ids,
        prior,
        runs,
    })
}

/// Cross-validated training and testing of `variants` on shared folds and,
/// per fold, a shared prior. Folds run on up to `jobs` threads; results do
/// not depend on `jobs`.
pub fn run_suite(dataset: &Dataset, variants: &[Variant], cfg: &RunConfig, jobs: usize) -> Result<Suite> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Empty("variant list"));
    }
    let seed = cfg.seed;
    let split = split_folds(&dataset.ids(), &dataset.labels(), cfg.folds, stage_seed(seed, None, "folds"))?;
    let needs_prior = variants.iter().any(|v| v.needs_generator());
    let global_prior = if needs_prior && cfg.pfsm_scope == PfsmScope::Global {
        let all: Vec<&Subject> = dataset.subjects.iter().collect();
        Some(train_prior(&all, cfg, stage_seed(seed, None, "prior"))?)
    } else {
        None
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let folds = pool.install(|| {
        (0..cfg.folds)
            .into_par_iter()
            .map(|f| {
                run_fold(dataset, &split, f, variants, global_prior.as_ref(), cfg, seed)
                    .map_err(|e| e.in_fold(f))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Suite { split, folds })
}

/// Metrics of one fold's predictions.
pub fn fold_metrics(fold: usize, preds: &[Prediction]) -> Result<FoldMetrics> {
    let scores: Vec<f64> = preds.iter().map(|p| p.p).collect();
    let truth: Vec<u8> = preds.iter().map(|p| p.truth).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let confusion = ConfusionCounts::from_labels(&labels, &truth);
    let (auc, roc) = roc_auc(&scores, &truth)?;
    Ok(FoldMetrics {
        fold,
        n_test: preds.len(),
        accuracy: accuracy(&confusion)?,
        auc,
        f1: f1(&confusion),
        confusion,
        roc,
    })
}

impl Suite {
    pub fn report(&self, variant: Variant, cfg: &RunConfig) -> Result<MetricsReport> {
        let folds = self
            .folds
            .iter()
            .map(|f| {
                let run = f
                    .runs
                    .iter()
                    .find(|r| r.variant == variant)
                    .ok_or_else(|| Error::Config(format!("variant {variant} was not run")))?;
                fold_metrics(f.fold, &run.predictions).map_err(|e| e.in_fold(f.fold))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport::new(meta(variant, cfg, "cross-validation"), folds))
    }

    /// Trained models of `variant`, in fold order.
    pub fn models(&self, variant: Variant) -> Vec<&SghfModel> {
        self.folds
            .iter()
            .filter_map(|f| f.runs.iter().find(|r| r.variant == variant).map(|r| &r.model))
            .collect()
    }
}

pub fn meta(variant: Variant, cfg: &RunConfig, evaluation: &str) -> RunMeta {
    RunMeta {
        variant: variant.to_string(),
        backbone: cfg.sghf.encoder.backbone.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        evaluation: evaluation.to_string(),
    }
}

/// Cross-validated metrics of a single variant.
pub fn run_experiment(dataset: &Dataset, variant: Variant, cfg: &RunConfig, jobs: usize) -> Result<MetricsReport> {
    run_suite(dataset, &[variant], cfg, jobs)?.report(variant, cfg)
}

/// Every variant on shared folds and priors, one report each.
pub fn ablate(dataset: &Dataset, cfg: &RunConfig, jobs: usize) -> Result<Vec<MetricsReport>> {
    let suite = run_suite(dataset, &Variant::ALL, cfg, jobs)?;
    Variant::ALL.iter().map(|&v| suite.report(v, cfg)).collect()
}

/// Evaluation-only metrics of per-fold models on another dataset. With
/// `subsets`, fold `k` is scored on the listed ids only; otherwise on every
/// subject.
pub fn external_validate(
    models: &[&SghfModel],
    dataset: &Dataset,
    subsets: Option<&BTreeMap<usize, Vec<u64>>>,
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    let first = models.first().ok_or(Error::Empty("checkpoint list"))?;
    let expected = input_shape(cfg);
    for m in models {
        if m.input_shape != expected || m.variant != first.variant {
            return Err(Error::Config("checkpoints disagree with the run configuration".into()));
        }
    }
    let folds = models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let subjects = match subsets {
                Some(s) => {
                    let ids = s.get(&k).ok_or_else(|| Error::Data(format!("no subset for fold {k}")))?;
                    dataset.select(ids)?
                }
                None => dataset.subjects.iter().collect(),
            };
            let preds = predict_all(m, &subjects, &cfg.prep)?;
            fold_metrics(k, &preds).map_err(|e| e.in_fold(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluation = if subsets.is_some() { "checkpoint-replay" } else { "external" };
    Ok(MetricsReport::new(meta(first.variant, cfg, evaluation), folds))
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sghf_core::data::Dataset;
use sghf_core::eval::{comparison_table, external_validate, run_suite, MetricsReport};
use sghf_core::sghf::{Checkpoint, SghfModel, Variant};
use sghf_core::{Error, Result, RunConfig};

use crate::layout;
use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Data(format!(
            "no dataset at {} (run `sghf gen-data` first)",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

fn class_counts(ds: &Dataset) -> (usize, usize) {
    let pos = ds.subjects.iter().filter(|s| s.label == 1).count();
    (ds.subjects.len() - pos, pos)
}

pub fn init(preset: &str, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::preset(preset)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    layout::write_text(out, &cfg.to_json())?;
    println!("wrote {} ({preset} preset, hash {})", out.display(), &cfg.hash()[..12]);
    Ok(())
}

pub fn gen_data(args: &ConfigArgs, out: Option<PathBuf>, external: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let (dcfg, seed, default_dir) = if external {
        (cfg.external_dataset(), cfg.external_seed(), "external")
    } else {
        (cfg.dataset.clone(), cfg.data_seed(), "data")
    };
    let dir = out.unwrap_or_else(|| cfg.output_dir.join(default_dir));
    let ds = Dataset::generate(&dcfg, seed)?;
    ds.save(&dir)?;
    let (neg, pos) = class_counts(&ds);
    println!(
        "{}: {} subjects (label 0: {neg}, label 1: {pos})",
        dir.display(),
        ds.subjects.len()
    );
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!(
        "{:<13} ACC {}  AUC {}  F1 {}  ({})",
        r.meta.variant,
        r.accuracy.cell(),
        r.auc.cell(),
        r.f1.cell(),
        r.meta.evaluation
    );
}

fn run_variants(
    args: &ConfigArgs,
    variants: &[Variant],
    data: Option<PathBuf>,
    run: Option<PathBuf>,
    jobs: usize,
) -> Result<(RunConfig, PathBuf, Vec<MetricsReport>)> {
    let cfg = load_config(args)?;
    let data = data.unwrap_or_else(|| cfg.output_dir.join("data"));
    let run = run.unwrap_or_else(|| cfg.output_dir.clone());
    let ds = load_dataset(&data)?;
    let suite = run_suite(&ds, variants, &cfg, jobs)?;
    layout::write_suite(&run, &suite, variants, &cfg)?;
    let reports = variants
        .iter()
        .map(|&v| suite.report(v, &cfg))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        print_report(r);
    }
    Ok((cfg, run, reports))
}

pub fn train(
    args: &ConfigArgs,
    variant: Option<Variant>,
    data: Option<PathBuf>,
    run: Option<PathBuf>,
    jobs: usize,
) -> Result<()> {
    let variant = match variant {
        Some(v) => v,
        None => load_config(args)?.variant,
    };
    let (_, run, _) = run_variants(args, &[variant], data, run, jobs)?;
    println!("run written to {}", run.display());
    Ok(())
}

pub fn ablate(args: &ConfigArgs, data: Option<PathBuf>, run: Option<PathBuf>, jobs: usize) -> Result<()> {
    let (_, run, reports) = run_variants(args, &Variant::ALL, data, run, jobs)?;
    let (md, csv) = comparison_table(&reports)?;
    layout::write_text(&run.join("comparison.md"), &md)?;
    layout::write_text(&run.join("comparison.csv"), &csv)?;
    print!("{md}");
    Ok(())
}

fn load_models(run: &Path, variant: Variant, folds: usize) -> Result<Vec<SghfModel>> {
    (0..folds)
        .map(|k| Checkpoint::load(&layout::model_path(run, variant, k))?.into_model())
        .collect()
}

/// Applies `score` to the checkpoints of every trained variant in `run` and
/// writes each report to `<run>/<variant>/<name>`.
fn rescore(
    run: &Path,
    name: &str,
    score: impl Fn(&[&SghfModel], &RunConfig, usize) -> Result<MetricsReport>,
) -> Result<()> {
    let cfg = layout::read_config(run)?;
    let folds = cfg.folds;
    let variants = layout::trained_variants(run, folds);
    if variants.is_empty() {
        return Err(Error::Data(format!("{} holds no trained checkpoints", run.display())));
    }
    for v in variants {
        let models = load_models(run, v, folds)?;
        let refs: Vec<&SghfModel> = models.iter().collect();
        let report = score(&refs, &cfg, folds)?;
        report.write(&run.join(v.to_string()).join(name))?;
        print_report(&report);
    }
    Ok(())
}

pub fn eval(run: &Path, data: &Path) -> Result<()> {
    let split = layout::read_split(run)?;
    let ds = load_dataset(data)?;
    let subsets: BTreeMap<usize, Vec<u64>> = (0..split.k).map(|k| (k, split.test_ids(k))).collect();
    rescore(run, "eval", |models, cfg, folds| {
        if folds != split.k {
            return Err(Error::Config(format!("run has {folds} folds but split.json has {}", split.k)));
        }
        external_validate(models, &ds, Some(&subsets), cfg)
    })
}

pub fn external(run: &Path, data: Option<PathBuf>) -> Result<()> {
    let cfg = layout::read_config(run)?;
    let ds = match data {
        Some(dir) => load_dataset(&dir)?,
        None => Dataset::generate(&cfg.external_dataset(), cfg.external_seed())?,
    };
    let (neg, pos) = class_counts(&ds);
    println!("external set: {} subjects (label 0: {neg}, label 1: {pos})", ds.subjects.len());
    rescore(run, "external", |models, cfg, _| external_validate(models, &ds, None, cfg))
}

/// Report directories named by `dir`: the directory itself, its `report/`, or
/// one `report/` per trained variant when `dir` is a run root.
fn report_dirs(dir: &Path) -> Vec<PathBuf> {
    let has = |d: &Path| d.join("metrics.json").is_file();
    if has(dir) {
        return vec![dir.to_path_buf()];
    }
    if has(&dir.join("report")) {
        return vec![dir.join("report")];
    }
    let found: Vec<PathBuf> = Variant::ALL
        .iter()
        .map(|v| dir.join(v.to_string()).join("report"))
        .filter(|d| has(d))
        .collect();
    if found.is_empty() {
        vec![dir.to_path_buf()]
    } else {
        found
    }
}

pub fn report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let reports = runs
        .iter()
        .flat_map(|r| report_dirs(r))
        .map(|d| MetricsReport::read(&d))
        .collect::<Result<Vec<_>>>()?;
    let (md, csv) = comparison_table(&reports)?;
    if let Some(out) = out {
        layout::write_text(&out.with_extension("md"), &md)?;
        layout::write_text(&out.with_extension("csv"), &csv)?;
    }
    print!("{md}");
    Ok(())
}

//! Run-directory layout:
//!
//! ```text
//! <run>/config.json, config.sha256, split.json
//! <run>/prior/fold<k>/{pfe.json, pfe_log.csv, pfsm.json, pfsm_log.csv}
//! <run>/<variant>/fold<k>/{model.json, train_log.csv, predictions.csv}
//! <run>/<variant>/{report, eval, external}/metrics.json ...
//! <run>/comparison.{md,csv}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sghf_core::data::FoldSplit;
use sghf_core::eval::{FoldRun, Suite};
use sghf_core::pfe::{EpochLog, PfeCheckpoint};
use sghf_core::pfsm::{write_log_csv, PfsmCheckpoint};
use sghf_core::sghf::{write_predictions_csv, Checkpoint, Variant};
use sghf_core::{Error, Result, RunConfig};

pub fn fold_dir(run: &Path, group: &str, fold: usize) -> PathBuf {
    run.join(group).join(format!("fold{fold}"))
}

pub fn model_path(run: &Path, variant: Variant, fold: usize) -> PathBuf {
    fold_dir(run, &variant.to_string(), fold).join("model.json")
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_config(run: &Path, cfg: &RunConfig) -> Result<()> {
    mkdir(run)?;
    write(&run.join("config.json"), cfg.to_json())?;
    write(&run.join("config.sha256"), format!("{}\n", cfg.hash()))
}

pub fn read_config(run: &Path) -> Result<RunConfig> {
    RunConfig::load(&run.join("config.json"))
}

pub fn write_split(run: &Path, split: &FoldSplit) -> Result<()> {
    let path = run.join("split.json");
    let text = serde_json::to_string_pretty(split).map_err(|e| Error::json(&path, e))?;
    write(&path, text + "\n")
}

pub fn read_split(run: &Path) -> Result<FoldSplit> {
    let path = run.join("split.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn write_epochs(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
    }
    write(path, s)
}

fn write_fold(run: &Path, fold: &FoldRun, cfg: &RunConfig) -> Result<()> {
    if let Some(prior) = &fold.prior {
        let dir = fold_dir(run, "prior", fold.fold);
        mkdir(&dir)?;
        PfeCheckpoint::of(&prior.pfe).save(&dir.join("pfe.json"))?;
        write_epochs(&dir.join("pfe_log.csv"), &prior.pfe_log)?;
        PfsmCheckpoint::of(&prior.pfsm).save(&dir.join("pfsm.json"))?;
        write_log_csv(&prior.pfsm_log, &dir.join("pfsm_log.csv"))?;
    }
    for r in &fold.runs {
        let dir = fold_dir(run, &r.variant.to_string(), fold.fold);
        mkdir(&dir)?;
        Checkpoint::of(&r.model, Some(&cfg.pfsm.generator)).save(&dir.join("model.json"))?;
        write_epochs(&dir.join("train_log.csv"), &r.log)?;
        write_predictions_csv(&r.predictions, &dir.join("predictions.csv"))?;
    }
    Ok(())
}

/// Writes checkpoints, logs and one cross-validation report per variant.
pub fn write_suite(run: &Path, suite: &Suite, variants: &[Variant], cfg: &RunConfig) -> Result<()> {
    write_config(run, cfg)?;
    write_split(run, &suite.split)?;
    for fold in &suite.folds {
        write_fold(run, fold, cfg)?;
    }
    for &v in variants {
        suite.report(v, cfg)?.write(&run.join(v.to_string()).join("report"))?;
    }
    Ok(())
}

/// Variants with a checkpoint for every fold of the run.
pub fn trained_variants(run: &Path, folds: usize) -> Vec<Variant> {
    Variant::ALL
        .into_iter()
        .filter(|&v| (0..folds).all(|k| model_path(run, v, k).is_file()))
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write(path, text)
}

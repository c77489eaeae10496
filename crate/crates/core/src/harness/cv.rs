use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalOptions, LuNetPredictor, PatientPrediction};
use super::report::RunReport;
use super::train::{samples_from_records, train_with, EpochRecord};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::grid::LabelMask;
use crate::metrics::{calibrate_bounds, OutlierBounds};
use crate::nets::LuNet;
use crate::phantom::{FoldAssignment, PatientRecord};

/// Record indices of one cross-validation round, each sorted by patient id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn sorted_by_id(records: &[PatientRecord], mut idx: Vec<usize>) -> Vec<usize> {
    idx.sort_by(|&a, &b| records[a].patient_id.cmp(&records[b].patient_id));
    idx
}

/// Round `f` tests on fold `f` and validates on fold `f + 1 (mod k)`. With
/// `k = 2` no spare fold exists, so the last `validation_fraction` of the
/// training fold (by patient id, at least one record) validates instead.
pub fn split_folds(
    records: &[PatientRecord],
    folds: &FoldAssignment,
    validation_fraction: f64,
) -> Result<Vec<FoldSplit>> {
    let (k, n) = (folds.k, records.len());
    if folds.folds.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} fold labels for {n} records",
            folds.folds.len()
        )));
    }
    if k < 2 || k > n || folds.folds.iter().any(|&f| f >= k) {
        return Err(Error::InvalidK { k, n });
    }
    (0..k)
        .map(|f| {
            let test = sorted_by_id(records, folds.members(f));
            let (train, validation) = if k >= 3 {
                let v = (f + 1) % k;
                let rest = (0..n).filter(|&i| folds.folds[i] != f && folds.folds[i] != v).collect();
                (sorted_by_id(records, rest), sorted_by_id(records, folds.members(v)))
            } else {
                let pool = sorted_by_id(records, (0..n).filter(|&i| folds.folds[i] != f).collect());
                let n_val = ((pool.len() as f64 * validation_fraction).round() as usize).max(1);
                if n_val >= pool.len() {
                    return Err(Error::EmptyDataset);
                }
                let (a, b) = pool.split_at(pool.len() - n_val);
                (a.to_vec(), b.to_vec())
            };
            if train.is_empty() || validation.is_empty() || test.is_empty() {
                return Err(Error::EmptyDataset);
            }
            Ok(FoldSplit {
                fold: f,
                train,
                validation,
                test,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub split: FoldSplit,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub bounds: OutlierBounds,
    pub folds: Vec<FoldReport>,
    /// Aggregated over every held-out case of every fold.
    pub pooled: RunReport,
}

impl CrossValidationReport {
    /// Pretty JSON, the on-disk form of the report.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// Cross-validation result with the trained models, one per fold, and the
/// held-out predictions in record order.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub report: CrossValidationReport,
    pub models: Vec<LuNet>,
    pub predictions: Vec<PatientPrediction>,
}

fn pick(records: &[PatientRecord], idx: &[usize]) -> Vec<PatientRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Outlier bounds from `config`, or calibrated on every reference mask.
pub fn resolve_bounds(records: &[PatientRecord], config: &RunConfig) -> Result<OutlierBounds> {
    if let Some(b) = config.bounds {
        return Ok(b);
    }
    let mut order: Vec<&PatientRecord> = records.iter().collect();
    order.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let refs: Vec<LabelMask> = order
        .iter()
        .flat_map(|r| r.frames.iter().map(|f| f.mask.clone()))
        .collect();
    calibrate_bounds(&refs, config.calibration.jitter_px, config.calibration.seed)
}

/// Trains one model per fold on the remaining folds and evaluates it on the
/// held-out fold. Folds run in parallel; model `f` is seeded with
/// `config.train.seed + f`.
pub fn cross_validate(
    records: &[PatientRecord],
    folds: &FoldAssignment,
    config: &RunConfig,
    on_epoch: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<CrossValidation> {
    config.validate()?;
    let splits = split_folds(records, folds, config.train.validation_fraction)?;
    let bounds = resolve_bounds(records, config)?;
    let opts = EvalOptions {
        bounds,
        margin: config.model.margin,
        n_discs: config.n_discs,
    };
    let margin = config.model.margin;
    let rounds: Vec<(FoldReport, LuNet, Vec<PatientPrediction>)> = splits
        .into_par_iter()
        .map(|split| {
            let seed = config.train.seed.wrapping_add(split.fold as u64);
            let mut net = LuNet::new(config.model.clone(), seed)?;
            let train_set = samples_from_records(&pick(records, &split.train), margin);
            let val_set = samples_from_records(&pick(records, &split.validation), margin);
            let mut train_cfg = config.train.clone();
            train_cfg.seed = seed;
            let history = train_with(&mut net, &train_set, &val_set, &train_cfg, None, &mut |e| {
                on_epoch(split.fold, e)
            })?;
            let test = pick(records, &split.test);
            let ev = evaluate(&LuNetPredictor::new(&net), &test, &opts)?;
            let mut cases = ev.report.cases;
            for c in &mut cases {
                c.fold = Some(split.fold);
            }
            let report = RunReport::from_cases(cases, Some(history))?;
            Ok((FoldReport { split, report }, net, ev.predictions))
        })
        .collect::<Result<_>>()?;

    let mut fold_reports = Vec::with_capacity(rounds.len());
    let mut models = Vec::with_capacity(rounds.len());
    let mut predictions: Vec<Option<PatientPrediction>> = vec![None; records.len()];
    for (fr, net, preds) in rounds {
        for (&i, p) in fr.split.test.iter().zip(preds) {
            predictions[i] = Some(p);
        }
        fold_reports.push(fr);
        models.push(net);
    }
    let all_cases = fold_reports
        .iter()
        .flat_map(|f| f.report.cases.iter().cloned())
        .collect();
    let pooled = RunReport::from_cases(all_cases, None)?;
    Ok(CrossValidation {
        report: CrossValidationReport {
            bounds,
            folds: fold_reports,
            pooled,
        },
        models,
        predictions: predictions
            .into_iter()
            .map(|p| p.expect("every record is tested once"))
            .collect(),
    })
}

//! Accuracy reports, class-weight statistics and the target-class sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::datagen::{subset_target_classes, Dataset};
use crate::error::{Error, Result};
use crate::model::{predict_proba, ModelConfig, NetworkParams};
use crate::train::{accuracy, train_run, Mode, TrainConfig};
use crate::weighting::ClassWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub target_accuracy: f64,
    pub source_accuracy: f64,
    /// Only classes with at least one labeled target sample.
    pub per_class_target_accuracy: BTreeMap<usize, f64>,
    /// `confusion[true][predicted]` over labeled target samples.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax predictions (ties to the smaller class) scored against the
/// held-out target labels. Unlabeled target samples are skipped.
pub fn evaluate(params: &NetworkParams, dataset: &Dataset) -> Result<EvalReport> {
    if !dataset.has_eval_labels() {
        return Err(Error::Unavailable(
            "target domain has no evaluation labels".into(),
        ));
    }
    let k = dataset.num_source_classes();
    let tprobs = predict_proba(params, dataset.target_x())?;
    let mut confusion = vec![vec![0usize; k]; k];
    for (i, y) in dataset.target_y_eval().iter().enumerate() {
        if let Some(y) = y {
            confusion[*y][tprobs.argmax_row(i)] += 1;
        }
    }
    let total: usize = confusion.iter().flatten().sum();
    let hits: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_target_accuracy = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| (c, row[c] as f64 / n as f64))
        })
        .collect();

    let sprobs = predict_proba(params, dataset.source_x())?;
    let slabels: Vec<Option<usize>> = dataset.source_y().iter().map(|&y| Some(y)).collect();
    Ok(EvalReport {
        target_accuracy: hits as f64 / total as f64,
        source_accuracy: accuracy(&sprobs, &slabels).unwrap_or(0.0),
        per_class_target_accuracy,
        confusion,
    })
}

/// `key,value` rows: accuracies, per-class target accuracy, then the
/// confusion matrix as `confusion_<true>_<pred>`.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("key,value\n");
    writeln!(out, "target_accuracy,{}", report.target_accuracy).unwrap();
    writeln!(out, "source_accuracy,{}", report.source_accuracy).unwrap();
    for (c, a) in &report.per_class_target_accuracy {
        writeln!(out, "class_{c}_accuracy,{a}").unwrap();
    }
    for (i, row) in report.confusion.iter().enumerate() {
        for (j, n) in row.iter().enumerate() {
            writeln!(out, "confusion_{i}_{j},{n}").unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    pub mean_shared: f64,
    /// Zero when there are no outlier classes.
    pub mean_outlier: f64,
    pub sum_shared: f64,
    pub sum_outlier: f64,
    pub shared_count: usize,
    pub outlier_count: usize,
    pub full_vector: Vec<f64>,
}

/// Splits the weights into shared and outlier classes.
pub fn weight_stats(weights: &ClassWeights, shared: &[usize]) -> Result<WeightStats> {
    if shared.is_empty() {
        return Err(Error::Parameter("shared class set is empty".into()));
    }
    let k = weights.len();
    let mut is_shared = vec![false; k];
    for &c in shared {
        if c >= k {
            return Err(Error::Index {
                what: "shared class",
                index: c,
                bound: k,
            });
        }
        is_shared[c] = true;
    }
    let (mut sum_shared, mut sum_outlier) = (0.0, 0.0);
    let (mut shared_count, mut outlier_count) = (0, 0);
    for (&g, &s) in weights.gamma().iter().zip(&is_shared) {
        if s {
            sum_shared += g;
            shared_count += 1;
        } else {
            sum_outlier += g;
            outlier_count += 1;
        }
    }
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(WeightStats {
        mean_shared: mean(sum_shared, shared_count),
        mean_outlier: mean(sum_outlier, outlier_count),
        sum_shared,
        sum_outlier,
        shared_count,
        outlier_count,
        full_vector: weights.gamma().to_vec(),
    })
}

/// Stable 64-bit FNV-1a over `base_seed` (LE), `k` (as u64, LE) and the
/// mode name bytes. Adding cells to a sweep never changes existing seeds.
pub fn derive_seed(base_seed: u64, k: usize, mode: Mode) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let bytes = base_seed
        .to_le_bytes()
        .into_iter()
        .chain((k as u64).to_le_bytes())
        .chain(mode.name().bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub target_accuracy: f64,
    pub source_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub k: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Failure message when the cell did not complete.
    pub outcome: std::result::Result<CellResult, String>,
    pub seconds: f64,
}

/// Trains every `(k, mode)` cell from scratch on the base dataset reduced to
/// its first `k` target classes. Cell seeds come from [`derive_seed`] with
/// `base.seed`; the same seed drives both initialization and shuffling.
/// Failed cells are recorded, not propagated. Rows come back in `ks`-major
/// order regardless of how many workers ran.
pub fn sweep_target_classes(
    base_dataset: &Dataset,
    ks: &[usize],
    model_config: &ModelConfig,
    base: &TrainConfig,
    modes: &[Mode],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || modes.is_empty() {
        return Err(Error::Parameter(
            "sweep needs at least one k and one mode".into(),
        ));
    }
    let cells: Vec<(usize, Mode)> = ks
        .iter()
        .flat_map(|&k| modes.iter().map(move |&m| (k, m)))
        .collect();
    let run_cell = |&(k, mode): &(usize, Mode)| -> SweepRow {
        let seed = derive_seed(base.seed, k, mode);
        let start = Instant::now();
        let outcome =
            run_single(base_dataset, k, model_config, base, mode, seed).map_err(|e| e.to_string());
        SweepRow {
            k,
            mode,
            seed,
            outcome,
            seconds: start.elapsed().as_secs_f64(),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(run_cell).collect()))
}

/// One sweep cell: subset, train with `seed`, evaluate.
pub fn run_single(
    base_dataset: &Dataset,
    k: usize,
    model_config: &ModelConfig,
    base: &TrainConfig,
    mode: Mode,
    seed: u64,
) -> Result<CellResult> {
    let dataset = subset_target_classes(base_dataset, k)?;
    let mc = ModelConfig {
        seed,
        ..model_config.clone()
    };
    let tc = TrainConfig {
        mode,
        seed,
        ..base.clone()
    };
    let out = train_run(&dataset, &mc, &tc)?;
    let report = evaluate(&out.params, &dataset)?;
    Ok(CellResult {
        target_accuracy: report.target_accuracy,
        source_accuracy: report.source_accuracy,
    })
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,mode,seed,status,target_acc,src_acc,seconds\n");
    for r in rows {
        match &r.outcome {
            Ok(c) => writeln!(
                out,
                "{},{},{},ok,{},{},{:.3}",
                r.k, r.mode, r.seed, c.target_accuracy, c.source_accuracy, r.seconds
            ),
            Err(msg) => writeln!(
                out,
                "{},{},{},error: {},NA,NA,{:.3}",
                r.k,
                r.mode,
                r.seed,
                msg.replace([',', '\n'], ";"),
                r.seconds
            ),
        }
        .unwrap();
    }
    out
}

//! Generator-structure comparison: every variant trained with the MSE
//! objective on the same split and seeds, scored on held-out pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;

use crate::config::{Objective, TrainConfig};
use crate::data::{self, Manifest, PairSet};
use crate::error::{Error, Result};
use crate::metrics::{fmt_db, MetricReport};
use crate::models::GeneratorVariant;
use crate::train::{self, Trainer};

pub const TABLE_FILE: &str = "ablation.tsv";
pub const CURVES_FILE: &str = "curves.tsv";
/// Fraction of the shuffled pairs held out for scoring.
pub const HOLDOUT_FRACTION: f64 = 0.125;

/// Full-scale reference figures `(variant, psnr, mse)` written as
/// documentation rows under the table.
pub const REFERENCE_ROWS: [(&str, f64, f64); 2] = [("Ours", 22.60, 0.0055), ("U-Net", 18.11, 0.016)];

/// Batch 8, 100 epochs, MSE objective.
pub fn default_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 100,
        objective: Objective::MseOnly,
        ..TrainConfig::default()
    }
}

/// Held-out scores of one variant trained with one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub psnr: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: GeneratorVariant,
    /// Median over seeds.
    pub psnr: f64,
    /// Median over seeds.
    pub mse: f64,
    pub seeds: Vec<SeedResult>,
}

/// Held-out metrics after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub variant: GeneratorVariant,
    pub seed: u64,
    pub epoch: u64,
    /// Mean training loss over the epoch's steps.
    pub train_mse: f64,
    pub psnr: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub curves: Vec<CurvePoint>,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// Scores of the untouched degraded inputs on the held-out pairs.
    pub identity: (f64, f64),
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl AblationTable {
    pub fn row(&self, v: GeneratorVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// `variant  psnr  mse` rows, then `#` comment lines with the baseline and
    /// the reference figures.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tpsnr\tmse\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}", r.variant.label(), fmt_db(r.psnr), r.mse);
        }
        let _ = writeln!(
            out,
            "# split: {} train / {} held-out pairs; degraded input baseline psnr {} mse {:.6}",
            self.train_pairs,
            self.heldout_pairs,
            fmt_db(self.identity.0),
            self.identity.1
        );
        for (name, psnr, mse) in REFERENCE_ROWS {
            let _ = writeln!(
                out,
                "# reference {name}\t{psnr:.2}\t{mse}\t(full-scale result, not a desk-scale target)"
            );
        }
        out
    }

    pub fn curves_tsv(&self) -> String {
        let mut out = String::from("variant\tseed\tepoch\ttrain_mse\tpsnr\tmse\n");
        for c in &self.curves {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{}\t{:.6}",
                c.variant.label(),
                c.seed,
                c.epoch,
                c.train_mse,
                fmt_db(c.psnr),
                c.mse
            );
        }
        out
    }
}

/// Trains every variant for every seed on `train_idx` and scores it on
/// `test_idx`. The objective is forced to MSE.
pub fn run_on(
    base: &TrainConfig,
    pairs: &PairSet,
    train_idx: &[usize],
    test_idx: &[usize],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let train_set = PairSet {
        pairs: train_idx.iter().map(|&i| pairs.pairs[i].clone()).collect(),
        skipped: 0,
    };
    let baseline = train::identity_report(pairs, test_idx)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for variant in GeneratorVariant::ALL {
        let mut results = Vec::new();
        for &seed in seeds {
            let mut cfg = base.with_variant(variant);
            cfg.objective = Objective::MseOnly;
            cfg.seed = seed;
            let mut trainer = Trainer::new(cfg, train_set.clone())?;
            let mut last_logged = 0usize;
            let logs = std::cell::RefCell::new(Vec::new());
            let score = |t: &Trainer| -> Result<MetricReport> {
                train::evaluate_pairs(t.generator(), t.generator_params(), pairs, test_idx, None)
            };
            let run_logs = trainer.run(None, |t, epoch| {
                let r = score(t)?;
                logs.borrow_mut().push((epoch, t.step(), r.mean_psnr(), r.mean_mse()));
                Ok(())
            })?;
            for (epoch, step, psnr, mse) in logs.into_inner() {
                let upto = step as usize;
                let slice = &run_logs[last_logged.min(upto)..upto.min(run_logs.len())];
                let mean = slice.iter().map(|l| l.g_total as f64).sum::<f64>() / slice.len().max(1) as f64;
                last_logged = upto;
                curves.push(CurvePoint {
                    variant,
                    seed,
                    epoch: epoch + 1,
                    train_mse: mean,
                    psnr,
                    mse,
                });
            }
            let r = score(&trainer)?;
            info!(
                "{} seed {seed}: held-out psnr {} mse {:.6}",
                variant.label(),
                fmt_db(r.mean_psnr()),
                r.mean_mse()
            );
            results.push(SeedResult {
                seed,
                psnr: r.mean_psnr(),
                mse: r.mean_mse(),
            });
        }
        let psnrs: Vec<f64> = results.iter().map(|r| r.psnr).collect();
        let mses: Vec<f64> = results.iter().map(|r| r.mse).collect();
        rows.push(AblationRow {
            variant,
            psnr: median(&psnrs),
            mse: median(&mses),
            seeds: results,
        });
    }
    Ok(AblationTable {
        rows,
        curves,
        train_pairs: train_idx.len(),
        heldout_pairs: test_idx.len(),
        identity: (baseline.mean_psnr(), baseline.mean_mse()),
    })
}

/// Loads `manifest`, holds out the last eighth after a shuffle seeded by
/// `base.seed`, runs the comparison and writes the table and curves into
/// `out_dir`.
pub fn run(base: &TrainConfig, manifest: &Manifest, out_dir: &Path, seeds: &[u64]) -> Result<AblationTable> {
    let pairs = train::load_for(base, manifest)?;
    let (train_idx, test_idx) = data::holdout_split(pairs.len(), HOLDOUT_FRACTION, base.seed)?;
    if train_idx.len() < base.batch_size {
        return Err(Error::Dataset(format!(
            "{} training pairs after the split, need at least batch_size = {}",
            train_idx.len(),
            base.batch_size
        )));
    }
    let table = run_on(base, &pairs, &train_idx, &test_idx, seeds)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(TABLE_FILE), table.to_tsv())?;
    fs::write(out_dir.join(CURVES_FILE), table.curves_tsv())?;
    Ok(table)
}

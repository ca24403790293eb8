//! The training loop, evaluation and single-image inference.
//!
//! Batch order and gradient-penalty mixing weights are pure functions of the
//! seed and the global batch index, so a run restarted from a checkpoint
//! continues exactly as if it had never stopped.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{Objective, TrainConfig};
use crate::data::{self, Manifest, PairSet};
use crate::error::{Error, Result};
use crate::losses::{self, BoundCritic};
use crate::metrics::{ImageScore, MetricReport};
use crate::models::{Discriminator, Generator};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.tsv";
/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

/// Salt separating the critic's init seed from the generator's.
const CRITIC_SEED_SALT: u64 = 0xd15c_0000_0000_0001;
const ORDER_SALT: u64 = 0x0bde_5000_0000_0000;
const GP_SALT: u64 = 0x6a70_0000_0000_0000;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Losses of one generator step. Terms an objective does not use are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    /// 1-based index of the generator update.
    pub step: u64,
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_l1: f32,
    pub g_total: f32,
    pub d_real: f32,
    pub d_fake: f32,
    pub d_gp: f32,
}

impl StepLog {
    pub const HEADER: &'static str = "step\td_loss\tg_adv\tg_l1\tg_total\td_real\td_fake\td_gp";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.d_loss, self.g_adv, self.g_l1, self.g_total, self.d_real, self.d_fake, self.d_gp
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Config(format!("malformed loss line `{line}`")));
        }
        let num = |i: usize| -> Result<f32> {
            f[i].parse()
                .map_err(|_| Error::Config(format!("malformed loss value `{}`", f[i])))
        };
        Ok(StepLog {
            step: f[0]
                .parse()
                .map_err(|_| Error::Config(format!("malformed step `{}`", f[0])))?,
            d_loss: num(1)?,
            g_adv: num(2)?,
            g_l1: num(3)?,
            g_total: num(4)?,
            d_real: num(5)?,
            d_fake: num(6)?,
            d_gp: num(7)?,
        })
    }

    fn check_finite(&self) -> Result<()> {
        let terms = [
            ("d_loss", self.d_loss),
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
            ("d_gp", self.d_gp),
            ("g_adv", self.g_adv),
            ("g_l1", self.g_l1),
            ("g_total", self.g_total),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite {
                term: (*term).to_string(),
                step: self.step,
            }),
            None => Ok(()),
        }
    }
}

/// Reads a `loss.tsv` file back.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(StepLog::parse)
        .collect()
}

/// Runs the generator on a `(N, C, H, W)` batch without recording history.
pub fn generate(generator: &Generator, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    tape.no_grad(|| {
        let p = params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = generator.forward(&tape, &p, xv)?;
        Ok(tape.value(out).as_ref().clone())
    })
}

pub struct Trainer {
    cfg: TrainConfig,
    generator: Generator,
    critic: Discriminator,
    g_params: ParamStore,
    d_params: ParamStore,
    g_adam: AdamState,
    d_adam: AdamState,
    step: u64,
    data: PairSet,
}

impl Trainer {
    /// Fresh parameters derived from `cfg.seed`.
    pub fn new(cfg: TrainConfig, data: PairSet) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(&cfg.model)?;
        let critic = Discriminator::new(&cfg.model)?;
        let g_params = generator.init(cfg.seed);
        let d_params = critic.init(cfg.seed ^ CRITIC_SEED_SALT);
        let ck = Checkpoint {
            g_adam: AdamState::new(cfg.adam, &g_params),
            d_adam: AdamState::new(cfg.adam, &d_params),
            config: cfg,
            step: 0,
            generator: g_params,
            critic: d_params,
        };
        Self::resume(ck, data)
    }

    pub fn resume(ck: Checkpoint, data: PairSet) -> Result<Self> {
        ck.config.validate()?;
        let size = ck.config.model.input_size;
        if data.len() < ck.config.batch_size {
            return Err(Error::Dataset(format!(
                "{} usable pairs, need at least batch_size = {}",
                data.len(),
                ck.config.batch_size
            )));
        }
        if let Some(p) = data.pairs.iter().find(|p| p.x.shape() != [ck.config.model.in_channels, size, size]) {
            return Err(Error::Dataset(format!(
                "pair {} has shape {:?}, model expects {size}x{size}",
                p.id,
                p.x.shape()
            )));
        }
        Ok(Trainer {
            generator: Generator::new(&ck.config.model)?,
            critic: Discriminator::new(&ck.config.model)?,
            cfg: ck.config,
            g_params: ck.generator,
            d_params: ck.critic,
            g_adam: ck.g_adam,
            d_adam: ck.d_adam,
            step: ck.step,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            generator: self.g_params.clone(),
            critic: self.d_params.clone(),
            g_adam: self.g_adam.clone(),
            d_adam: self.d_adam.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.g_params
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.d_params
    }

    pub fn data(&self) -> &PairSet {
        &self.data
    }

    /// Generator updates completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    fn batches_per_epoch(&self) -> u64 {
        (self.data.len() / self.cfg.batch_size) as u64
    }

    /// Batches consumed by one generator step.
    fn batches_per_step(&self) -> u64 {
        match self.cfg.objective {
            Objective::CwganGpL1 => self.cfg.critic_steps as u64,
            Objective::MseOnly => 1,
        }
    }

    /// Epoch that step `s` (0-based) starts in.
    pub fn epoch_of(&self, s: u64) -> u64 {
        s * self.batches_per_step() / self.batches_per_epoch()
    }

    /// Steps needed for `epochs` passes, capped by `max_steps`.
    pub fn total_steps(&self) -> u64 {
        let batches = (self.cfg.epochs as u64).saturating_mul(self.batches_per_epoch());
        let steps = batches.div_ceil(self.batches_per_step());
        self.cfg.max_steps.map_or(steps, |m| steps.min(m))
    }

    /// Pair indices of global batch `b`.
    pub fn batch_indices(&self, b: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, pos) = (b / bpe, (b % bpe) as usize);
        let perm = data::permutation(self.data.len(), mix(self.cfg.seed ^ ORDER_SALT, epoch));
        let bs = self.cfg.batch_size;
        perm[pos * bs..(pos + 1) * bs].to_vec()
    }

    /// Interpolation weights for the penalty on global batch `b`.
    pub fn penalty_eps(&self, b: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed ^ GP_SALT, b));
        (0..self.cfg.batch_size).map(|_| rng.random_range(0.0..=1.0)).collect()
    }

    /// One critic update on global batch `b`; the generator is left as is.
    pub fn critic_update(&mut self, b: u64, log: &mut StepLog) -> Result<()> {
        let (xb, yb) = self.data.batch(&self.batch_indices(b))?;
        let eps = self.penalty_eps(b);
        let tape = Tape::new();
        let gp = self.g_params.bind(&tape, false);
        let dp = self.d_params.bind(&tape, true);
        let x = tape.constant(xb);
        let y = tape.constant(yb);
        let g = tape.no_grad(|| self.generator.forward(&tape, &gp, x))?;
        let critic = BoundCritic {
            model: &self.critic,
            params: &dp,
        };
        let loss = losses::critic_loss(&tape, &critic, x, y, g, &eps, &self.cfg.weights)?;
        log.d_loss = tape.item(loss.total)?;
        log.d_real = tape.item(loss.real)?;
        log.d_fake = tape.item(loss.fake)?;
        log.d_gp = tape.item(loss.penalty)?;
        log.check_finite()?;
        let grads = tape.backward(loss.total, false)?;
        self.d_adam.step(&mut self.d_params, &dp.collect_grads(&tape, &grads))
    }

    /// One generator update on global batch `b`; the critic is left as is.
    /// Neither update advances [`Trainer::step`].
    pub fn generator_update(&mut self, b: u64, log: &mut StepLog) -> Result<()> {
        let (xb, yb) = self.data.batch(&self.batch_indices(b))?;
        let tape = Tape::new();
        let gp = self.g_params.bind(&tape, true);
        let x = tape.constant(xb);
        let y = tape.constant(yb);
        let gx = self.generator.forward(&tape, &gp, x)?;
        let total = match self.cfg.objective {
            Objective::CwganGpL1 => {
                let dp = self.d_params.bind(&tape, false);
                let critic = BoundCritic {
                    model: &self.critic,
                    params: &dp,
                };
                let loss = losses::generator_loss(&tape, &critic, x, y, gx, &self.cfg.weights)?;
                log.g_adv = tape.item(loss.adv)?;
                log.g_l1 = tape.item(loss.l1)?;
                loss.total
            }
            Objective::MseOnly => losses::mse_loss(&tape, gx, y)?,
        };
        log.g_total = tape.item(total)?;
        log.check_finite()?;
        let grads = tape.backward(total, false)?;
        self.g_adam.step(&mut self.g_params, &gp.collect_grads(&tape, &grads))
    }

    /// One generator update, preceded by `critic_steps` critic updates under
    /// the adversarial objective. The generator reuses the last critic batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let k = self.batches_per_step();
        let first = self.step * k;
        let mut log = StepLog {
            step: self.step + 1,
            ..StepLog::default()
        };
        if self.cfg.objective == Objective::CwganGpL1 {
            for b in first..first + k {
                self.critic_update(b, &mut log)?;
            }
        }
        self.generator_update(first + k - 1, &mut log)?;
        self.step += 1;
        Ok(log)
    }

    /// Trains until `total_steps`. With `out_dir`, appends to `loss.tsv` and
    /// writes `checkpoint.bin` at every epoch end and at the finish;
    /// `on_epoch` is called with the index of each completed epoch.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&Trainer, u64) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let total = self.total_steps();
        let mut log_file = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(LOSS_FILE);
                let fresh = self.step == 0 || !path.exists();
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)?;
                let mut w = BufWriter::new(f);
                if fresh {
                    writeln!(w, "{}", StepLog::HEADER)?;
                }
                Some(w)
            }
            None => None,
        };
        let mut logs = Vec::new();
        while self.step < total {
            let before = self.epoch_of(self.step);
            let log = self.train_step()?;
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", log.to_tsv())?;
            }
            logs.push(log);
            let epoch_done = self.epoch_of(self.step) > before;
            if epoch_done || self.step == total {
                if let Some(dir) = out_dir {
                    if let Some(w) = log_file.as_mut() {
                        w.flush()?;
                    }
                    self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                }
                if epoch_done {
                    info!("epoch {} done at step {}: g_total {}", before + 1, self.step, log.g_total);
                    on_epoch(self, before)?;
                }
            }
        }
        if let Some(mut w) = log_file {
            w.flush()?;
        }
        Ok(logs)
    }

    /// Generator output for a normalized `(N, C, H, W)` batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        generate(&self.generator, &self.g_params, x)
    }
}

/// Scores the generator on the selected pairs, in the given order.
pub fn evaluate_pairs(
    generator: &Generator,
    params: &ParamStore,
    pairs: &PairSet,
    idx: &[usize],
    save_dir: Option<&Path>,
) -> Result<MetricReport> {
    if idx.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    if let Some(dir) = save_dir {
        fs::create_dir_all(dir)?;
    }
    let mut report = MetricReport::default();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (xb, _) = pairs.batch(chunk)?;
        let out = generate(generator, params, &xb)?;
        for (k, &i) in chunk.iter().enumerate() {
            let pred = data::denormalize(&out.sample(k)?);
            let target = data::denormalize(&pairs.pairs[i].y);
            let id = &pairs.pairs[i].id;
            if let Some(dir) = save_dir {
                data::save_image(&pred, &dir.join(format!("{id}.png")))?;
            }
            report.push(ImageScore::compute(id.clone(), &pred, &target)?);
        }
    }
    Ok(report)
}

/// Scores the degraded inputs themselves against their targets.
pub fn identity_report(pairs: &PairSet, idx: &[usize]) -> Result<MetricReport> {
    if idx.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut report = MetricReport::default();
    for &i in idx {
        let p = &pairs.pairs[i];
        report.push(ImageScore::compute(
            p.id.clone(),
            &data::denormalize(&p.x),
            &data::denormalize(&p.y),
        )?);
    }
    Ok(report)
}

/// Loads and decodes every pair of `manifest` at the model's input size.
pub fn load_for(cfg: &TrainConfig, manifest: &Manifest) -> Result<PairSet> {
    if manifest.is_empty() {
        return Err(Error::Dataset("manifest lists no pairs".into()));
    }
    let set = data::load_pairs(manifest, cfg.model.input_size)?;
    if set.is_empty() {
        return Err(Error::Dataset(format!("all {} pairs failed to load", set.skipped)));
    }
    Ok(set)
}

/// Final state of a [`train`] call.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
    pub checkpoint_path: PathBuf,
}

/// Trains from scratch, or from `resume` when given, on every pair of
/// `manifest`, writing logs and checkpoints into `out_dir`.
pub fn train(cfg: &TrainConfig, manifest: &Manifest, out_dir: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let set = load_for(cfg, manifest)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, set)?,
        None => Trainer::new(cfg.clone(), set)?,
    };
    let logs = trainer.run(Some(out_dir), |_, _| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        logs,
        checkpoint_path: out_dir.join(CHECKPOINT_FILE),
    })
}

/// Evaluates a checkpoint on every pair of `manifest`; writes the TSV report
/// to `report_path` and, optionally, output images to `save_dir`.
pub fn evaluate(
    ck: &Checkpoint,
    manifest: &Manifest,
    report_path: Option<&Path>,
    save_dir: Option<&Path>,
) -> Result<MetricReport> {
    let generator = Generator::new(&ck.config.model)?;
    generator.init(0).check_compatible(&ck.generator)?;
    let set = load_for(&ck.config, manifest)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let report = evaluate_pairs(&generator, &ck.generator, &set, &idx, save_dir)?;
    if let Some(path) = report_path {
        fs::write(path, report.to_tsv())?;
    }
    Ok(report)
}

/// Enhances one image file with the checkpoint's generator.
pub fn infer(ck: &Checkpoint, input: &Path, output: &Path) -> Result<()> {
    let generator = Generator::new(&ck.config.model)?;
    generator.init(0).check_compatible(&ck.generator)?;
    let size = ck.config.model.input_size;
    let img = data::resize_bilinear(&data::load_image(input)?, size, size)?;
    let x = Tensor::stack(&[&data::normalize(&img)])?;
    let out = generate(&generator, &ck.generator, &x)?;
    data::save_image(&data::denormalize(&out.sample(0)?), output)
}

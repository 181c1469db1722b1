use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use super::loss::segmentation_loss;
use super::optim::AdamW;
use super::predict::predict_labels;
use super::TrainConfig;
use crate::data::{make_batch, PreprocessConfig, SliceSample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, MetricReport, Stat};
use crate::model::{build_model, A4Unet, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Pooled foreground Dice of the training predictions seen during the epoch.
    pub train_dice: f64,
    pub val_dice: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
    pub best_val_dice: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    model: A4Unet,
    opt: AdamW,
    cfg: TrainConfig,
    preprocess: PreprocessConfig,
    epoch: usize,
    best_val_dice: Option<f64>,
    best_train_dice: Option<f64>,
    out_dir: Option<PathBuf>,
}

fn foreground_counts(logits: &Tensor, target: &Tensor) -> Result<ConfusionCounts> {
    let pred = logits.argmax(1)?.flatten_all()?.to_vec1::<u32>()?;
    let gt = target.flatten_all()?.to_vec1::<u32>()?;
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.into_iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Sample order of an epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let s = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    idx
}

/// Pooled foreground Dice of the model's predictions on labelled samples.
pub fn pooled_dice(model: &A4Unet, samples: &[SliceSample], batch_size: usize) -> Result<f64> {
    let preds = predict_labels(model, samples, batch_size)?;
    let mut c = ConfusionCounts::default();
    for (p, s) in preds.iter().zip(samples) {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} slice {} has no label", s.subject_id, s.slice_index)))?;
        c += crate::metrics::confusion(p.view(), gt.view())?;
    }
    Ok(c.dice())
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, preprocess: &PreprocessConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if preprocess.size != model_cfg.input_size.0 || preprocess.size != model_cfg.input_size.1 {
            return Err(Error::Config(format!(
                "preprocessing size {} does not match model input {:?}",
                preprocess.size, model_cfg.input_size
            )));
        }
        let model = build_model(model_cfg, dtype, device)?;
        let opt = AdamW::new(model.params().vars(), cfg.adamw())?;
        Ok(Self {
            model,
            opt,
            cfg: cfg.clone(),
            preprocess: preprocess.clone(),
            epoch: 0,
            best_val_dice: None,
            best_train_dice: None,
            out_dir: None,
        })
    }

    /// Continues from a checkpoint; parameters, optimizer moments and counters are restored.
    pub fn resume(ckpt: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let mut t = Self::new(&ckpt.meta.model, &ckpt.meta.train, &ckpt.meta.preprocess, dtype, device)?;
        ckpt.load_into(&t.model)?;
        if ckpt.has_optimizer_state() {
            ckpt.restore_optimizer(&mut t.opt)?;
        }
        t.epoch = ckpt.meta.epoch;
        t.best_val_dice = ckpt.meta.best_val_dice;
        Ok(t)
    }

    /// Checkpoints (`last`, `best`) and the epoch log go to `dir`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn model(&self) -> &A4Unet {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            preprocess: self.preprocess.clone(),
            epoch: self.epoch,
            step: self.opt.steps(),
            best_val_dice: self.best_val_dice,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.opt), &self.meta())
    }

    fn last_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("last.safetensors"))
    }

    /// One optimisation step; returns the loss and the pre-update confusion counts.
    pub fn step(&mut self, batch: &[&SliceSample], lr: f64) -> Result<(f64, ConfusionCounts)> {
        let b = make_batch(batch, self.model.dtype(), self.model.device())?;
        let target = b
            .masks
            .ok_or_else(|| Error::Data("training batch contains unlabelled slices".into()))?;
        let logits = self.model.logits(&b.images)?;
        let loss = segmentation_loss(&logits, &target, self.cfg.loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                step: self.opt.steps() + 1,
                loss: value,
                last_good: self.last_path().filter(|p| p.exists()),
            });
        }
        let counts = foreground_counts(&logits, &target)?;
        let grads = loss.backward()?;
        self.opt.step(&grads, lr)?;
        Ok((value, counts))
    }

    fn run_epoch(&mut self, train: &[SliceSample], val: Option<&[SliceSample]>, out: &mut TrainOutcome) -> Result<()> {
        let started = Instant::now();
        let lr = self.cfg.lr_at(self.epoch);
        let order = epoch_order(train.len(), self.cfg.seed, self.epoch);
        let mut losses = Vec::new();
        let mut counts = ConfusionCounts::default();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, c) = self.step(&batch, lr)?;
            losses.push(loss);
            counts += c;
        }
        self.epoch += 1;
        let val_dice = match val {
            Some(v) if !v.is_empty() => Some(pooled_dice(&self.model, v, self.cfg.batch_size)?),
            _ => None,
        };
        let entry = EpochLog {
            epoch: self.epoch,
            steps: losses.len(),
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            train_dice: counts.dice(),
            val_dice,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{}  loss {:.5}  train dice {:.4}  val dice {}",
            entry.epoch,
            self.cfg.epochs,
            entry.train_loss,
            entry.train_dice,
            entry.val_dice.map_or("-".into(), |d| format!("{d:.4}"))
        );
        out.step_losses.extend(losses);
        let improved = match (val_dice, self.best_val_dice) {
            (Some(_), None) => true,
            (Some(d), Some(b)) => d > b,
            (None, _) => self.best_train_dice.is_none_or(|b| entry.train_dice > b),
        };
        if let Some(d) = val_dice.filter(|_| improved) {
            self.best_val_dice = Some(d);
        }
        if val_dice.is_none() && improved {
            self.best_train_dice = Some(entry.train_dice);
        }
        out.best_val_dice = self.best_val_dice;
        if let Some(dir) = self.out_dir.clone() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let last = dir.join("last.safetensors");
            self.save(&last)?;
            out.last_checkpoint = Some(last);
            if improved {
                let best = dir.join("best.safetensors");
                self.save(&best)?;
                out.best_checkpoint = Some(best);
            }
            let log_path = dir.join("train_log.jsonl");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        }
        out.log.push(entry);
        Ok(())
    }

    /// Trains up to `epochs` further epochs, stopping at the configured total.
    pub fn fit_epochs(&mut self, train: &[SliceSample], val: Option<&[SliceSample]>, epochs: usize) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut out = TrainOutcome {
            best_val_dice: self.best_val_dice,
            ..Default::default()
        };
        let end = (self.epoch + epochs).min(self.cfg.epochs);
        while self.epoch < end {
            self.run_epoch(train, val, &mut out)?;
        }
        Ok(out)
    }

    /// Trains the remaining epochs.
    pub fn fit(&mut self, train: &[SliceSample], val: Option<&[SliceSample]>) -> Result<TrainOutcome> {
        self.fit_epochs(train, val, self.cfg.epochs.saturating_sub(self.epoch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeans {
    pub dsc: Option<f64>,
    pub miou: Option<f64>,
    pub hd95_mm: Option<f64>,
}

/// Per-run means and their mean ± std across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_run: Vec<RunMeans>,
    pub dsc: Option<Stat>,
    pub miou: Option<Stat>,
    pub hd95_mm: Option<Stat>,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let s = |v: &Option<Stat>| match v {
            None => "undefined".to_string(),
            Some(Stat { mean, std: Some(sd), .. }) => format!("{mean:.6} ± {sd:.6}"),
            Some(Stat { mean, .. }) => format!("{mean:.6}"),
        };
        let mut out = String::from("[runs]\nrun\tdsc\tmiou\thd95_mm\n");
        for (i, r) in self.per_run.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\t{}\t{}\n", f(r.dsc), f(r.miou), f(r.hd95_mm)));
        }
        out.push_str(&format!(
            "overall\tdsc = {}\tmiou = {}\thd95_mm = {}\n",
            s(&self.dsc),
            s(&self.miou),
            s(&self.hd95_mm)
        ));
        out
    }
}

pub fn evaluate_runs(reports: &[MetricReport]) -> RunSummary {
    let per_run: Vec<RunMeans> = reports
        .iter()
        .map(|r| RunMeans {
            dsc: r.aggregate.dsc.map(|s| s.mean),
            miou: r.aggregate.miou.map(|s| s.mean),
            hd95_mm: r.aggregate.hd95_mm.map(|s| s.mean),
        })
        .collect();
    let col = |f: fn(&RunMeans) -> Option<f64>| Stat::of(&per_run.iter().filter_map(f).collect::<Vec<_>>());
    RunSummary {
        dsc: col(|r| r.dsc),
        miou: col(|r| r.miou),
        hd95_mm: col(|r| r.hd95_mm),
        per_run,
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::trainer::Trainer;
use super::TrainConfig;
use crate::data::{PreprocessConfig, SliceSample};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub params: usize,
    pub val_dice: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Row indices ordered by validation Dice, best first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| self.rows[b].val_dice.total_cmp(&self.rows[a].val_dice));
        idx
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("| configuration | DLKA | SSPP | CAM | params | val Dice (%) | rank |\n|---|---|---|---|---|---|---|\n");
        let ranking = self.ranking();
        let mark = |b: bool| if b { "x" } else { "" };
        for (i, r) in self.rows.iter().enumerate() {
            let rank = ranking.iter().position(|&j| j == i).expect("ranked") + 1;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.2} | {} |",
                r.label,
                mark(r.ablation.use_dlka),
                mark(r.ablation.use_sspp),
                mark(r.ablation.use_cam),
                r.params,
                100.0 * r.val_dice,
                rank
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Trains and validates all eight switch combinations with a shared seed and data order.
pub fn run_ablation_suite(
    train: &[SliceSample],
    val: &[SliceSample],
    base: &ModelConfig,
    cfg: &TrainConfig,
    preprocess: &PreprocessConfig,
    out_dir: Option<&Path>,
    dtype: DType,
    device: &Device,
) -> Result<AblationTable> {
    if val.is_empty() {
        return Err(Error::Data("ablation needs a non-empty validation split".into()));
    }
    let mut rows = Vec::with_capacity(8);
    for ablation in Ablation::all() {
        let model_cfg = base.clone().with_ablation(ablation);
        let mut trainer = Trainer::new(&model_cfg, cfg, preprocess, dtype, device)?;
        if let Some(dir) = out_dir {
            let name: PathBuf = format!(
                "dlka{}_sspp{}_cam{}",
                u8::from(ablation.use_dlka),
                u8::from(ablation.use_sspp),
                u8::from(ablation.use_cam)
            )
            .into();
            trainer = trainer.with_output_dir(dir.join(name));
        }
        log::info!("ablation: {}", ablation.label());
        let outcome = trainer.fit(train, Some(val))?;
        let last = outcome.log.last().expect("at least one epoch");
        rows.push(AblationRow {
            label: ablation.label(),
            ablation,
            params: trainer.model().params().num_params(),
            val_dice: last.val_dice.expect("validation split given"),
            final_train_loss: last.train_loss,
        });
    }
    let table = AblationTable { rows };
    if let Some(dir) = out_dir {
        table.write(&dir.join("ablation.md"))?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)
            .map_err(|e| Error::io(dir.join("ablation.json"), e))?;
    }
    Ok(table)
}

//! Configuration layering: built-in defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use a4unet::candle::DType;
use a4unet::data::{make_splits, scan_dataset_with, DatasetManifest, LabelPolicy, Layout, PreprocessConfig};
use a4unet::model::{Ablation, ModelConfig};
use a4unet::train::{LossKind, LrSchedule, TrainConfig};
use a4unet::{Error, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub manifest: Option<PathBuf>,
    pub label_policy: LabelPolicy,
    pub split_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Brats2020,
            manifest: None,
            label_policy: LabelPolicy::WholeTumorBinary,
            split_seed: 0,
            train_frac: 0.8,
            val_frac: 0.2,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Layout of the `--config` file; every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 224×224 input, widths 64-512.
    Default,
    /// 32×32 input, narrow widths; for quick experiments.
    Tiny,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset root directory.
    #[arg(long, env = "A4UNET_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// Directory layout: brats2019, brats2020, brats2021 or flat.
    #[arg(long)]
    pub layout: Option<Layout>,
    /// Manifest written by `scan`; takes precedence over --data-root.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Label policy: whole_tumor_binary or raw_labels.
    #[arg(long)]
    pub label_policy: Option<LabelPolicy>,
    /// Seed of the subject-level split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Fraction of subjects used for training.
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Fraction of subjects used for validation.
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Cache preprocessed subjects in this directory.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Start from a built-in model size.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Square input side; must be divisible by 16.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Output classes including background.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Disable the DLKA blocks in the encoder.
    #[arg(long)]
    pub no_dlka: bool,
    /// Disable the SSPP bottleneck.
    #[arg(long)]
    pub no_sspp: bool,
    /// Disable CAM and the attention gates in the decoder.
    #[arg(long)]
    pub no_cam: bool,
    /// Numeric precision.
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl ModelArgs {
    pub fn is_set(&self) -> bool {
        self.preset.is_some()
            || self.input_size.is_some()
            || self.num_classes.is_some()
            || self.no_dlka
            || self.no_sspp
            || self.no_cam
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Slices per optimisation step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Random seed (initialisation and data order).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss: dice_ce, ce or dice.
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Learning-rate schedule: constant or cosine.
    #[arg(long)]
    pub schedule: Option<LrSchedule>,
    /// Independent runs with consecutive seeds.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub dtype: DType,
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl Resolved {
    pub fn new(config: Option<&Path>, data: &DataArgs, model: Option<&ModelArgs>, train: Option<&TrainArgs>) -> Result<Self> {
        let file = match config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let mut m = file.model;
        let mut t = file.train;
        let mut d = file.data;
        let mut precision = file.precision;
        if let Some(a) = model {
            if let Some(p) = a.preset {
                m = match p {
                    Preset::Default => ModelConfig::default(),
                    Preset::Tiny => ModelConfig::tiny(),
                };
            }
            if let Some(s) = a.input_size {
                m.input_size = (s, s);
            }
            if let Some(k) = a.num_classes {
                m.decoder.num_classes = k;
            }
            if a.no_dlka || a.no_sspp || a.no_cam {
                m.ablation = Ablation {
                    use_dlka: m.ablation.use_dlka && !a.no_dlka,
                    use_sspp: m.ablation.use_sspp && !a.no_sspp,
                    use_cam: m.ablation.use_cam && !a.no_cam,
                };
            }
            if let Some(p) = a.precision {
                precision = p;
            }
        }
        if let Some(a) = train {
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.initial_lr = a.lr.unwrap_or(t.initial_lr);
            t.epochs = a.epochs.unwrap_or(t.epochs);
            t.weight_decay = a.weight_decay.unwrap_or(t.weight_decay);
            t.seed = a.seed.unwrap_or(t.seed);
            t.loss = a.loss.unwrap_or(t.loss);
            t.schedule = a.schedule.unwrap_or(t.schedule);
            t.runs = a.runs.unwrap_or(t.runs);
            t.folds = a.folds.unwrap_or(t.folds);
            t.validate()?;
            m.seed = t.seed;
        }
        if data.data_root.is_some() {
            d.root = data.data_root.clone();
        }
        d.layout = data.layout.unwrap_or(d.layout);
        if data.manifest.is_some() {
            d.manifest = data.manifest.clone();
        }
        d.label_policy = data.label_policy.unwrap_or(d.label_policy);
        d.split_seed = data.split_seed.unwrap_or(d.split_seed);
        d.train_frac = data.train_frac.unwrap_or(d.train_frac);
        d.val_frac = data.val_frac.unwrap_or(d.val_frac);
        if data.cache_dir.is_some() {
            d.cache_dir = data.cache_dir.clone();
        }
        m.validate()?;
        if m.input_size.0 != m.input_size.1 {
            return Err(Error::Config(format!("input size must be square, got {:?}", m.input_size)));
        }
        let preprocess = PreprocessConfig {
            size: m.input_size.0,
            normalize: true,
        };
        let dtype = match precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
        Ok(Self {
            model: m,
            train: t,
            data: d,
            preprocess,
            dtype,
        })
    }

    /// The manifest file if given, else a fresh scan of the data root with seeded splits.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        if let Some(p) = &self.data.manifest {
            return DatasetManifest::load(p);
        }
        let root = self.data.root.as_ref().ok_or_else(|| {
            Error::Config("no dataset given: pass --manifest or --data-root (or set A4UNET_DATA_ROOT)".into())
        })?;
        let layout = self.data.layout;
        let scanned = scan_dataset_with(root, layout, &layout.modalities(), self.data.label_policy)?;
        make_splits(&scanned, self.data.split_seed, (self.data.train_frac, self.data.val_frac))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("a4unet.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(
            dir.path(),
            "[train]\nepochs = 7\nbatch_size = 3\nseed = 5\n\n[data]\nlayout = \"flat\"\nsplit_seed = 9\n",
        );
        let train = TrainArgs {
            epochs: Some(2),
            ..TrainArgs::default()
        };
        let model = ModelArgs {
            preset: Some(Preset::Tiny),
            ..ModelArgs::default()
        };
        let r = Resolved::new(Some(&p), &DataArgs::default(), Some(&model), Some(&train)).unwrap();
        assert_eq!((r.train.epochs, r.train.batch_size, r.train.seed), (2, 3, 5));
        assert_eq!(r.model.seed, 5);
        assert_eq!((r.data.layout, r.data.split_seed), (Layout::Flat, 9));
        assert_eq!(r.preprocess.size, 32);
        assert_eq!(r.dtype, DType::F32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_config(dir.path(), "[train]\nepochz = 7\n");
        let err = Resolved::new(Some(&p), &DataArgs::default(), None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn ablation_flags_only_switch_blocks_off() {
        let model = ModelArgs {
            preset: Some(Preset::Tiny),
            no_sspp: true,
            ..ModelArgs::default()
        };
        let r = Resolved::new(None, &DataArgs::default(), Some(&model), None).unwrap();
        assert_eq!(
            r.model.ablation,
            Ablation {
                use_dlka: true,
                use_sspp: false,
                use_cam: true
            }
        );
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let r = Resolved::new(None, &DataArgs::default(), None, None).unwrap();
        assert!(matches!(r.manifest(), Err(Error::Config(_))));
    }
}

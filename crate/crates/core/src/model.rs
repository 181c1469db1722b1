//! Full network assembly and the ablation switches.
//!
//! The baseline is a four-stage residual U-Net (stem, stride-2 encoder
//! stages, residual bridge, decoder stages with a 1×1 fusion projection).
//! Each switch adds blocks on top of that skeleton without renaming or
//! removing baseline parameters:
//!
//! * `use_dlka`: a DLKA block after every encoder stage;
//! * `use_sspp`: the Swin pyramid bottleneck, added to the bridge output;
//! * `use_cam`: attention gates on the skips and CAM attention in the decoder.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, LargeKernel};
use crate::error::{Error, Result};
use crate::nn::{softmax, ParamStore, ResidualBlock};
use crate::sspp::{Sspp, SsppConfig, SwinBranchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_dlka: bool,
    pub use_sspp: bool,
    pub use_cam: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        use_dlka: true,
        use_sspp: true,
        use_cam: true,
    };
    pub const BASELINE: Self = Self {
        use_dlka: false,
        use_sspp: false,
        use_cam: false,
    };

    /// All eight combinations, baseline first, then single blocks, pairs, full model.
    pub fn all() -> [Self; 8] {
        let a = |use_dlka, use_sspp, use_cam| Self {
            use_dlka,
            use_sspp,
            use_cam,
        };
        [
            a(false, false, false),
            a(true, false, false),
            a(false, true, false),
            a(false, false, true),
            a(true, true, false),
            a(true, false, true),
            a(false, true, true),
            a(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        if *self == Self::FULL {
            return "A4-Unet".into();
        }
        let mut parts = vec!["ResUnet"];
        if self.use_dlka {
            parts.push("DLKA");
        }
        if self.use_sspp {
            parts.push("SSPP");
        }
        if self.use_cam {
            parts.push("CAM");
        }
        if parts.len() == 1 {
            "ResUnet (baseline)".into()
        } else {
            parts.join(" + ")
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub encoder: EncoderConfig,
    pub sspp: SsppConfig,
    pub decoder: DecoderConfig,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (224, 224),
            encoder: EncoderConfig::default(),
            sspp: SsppConfig::default(),
            decoder: DecoderConfig::default(),
            ablation: Ablation::FULL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A narrow configuration on 32×32 inputs, for tests and desk-scale runs.
    pub fn tiny() -> Self {
        let branch = |window_size| SwinBranchConfig {
            window_size,
            heads: 2,
            depth: 1,
            embed_dim: 8,
        };
        Self {
            input_size: (32, 32),
            encoder: EncoderConfig {
                in_channels: 4,
                stem_channels: 8,
                channels: vec![8, 16, 16, 32],
                large_kernels: vec![LargeKernel { kernel: 7, dilation: 2 }; 4],
                dlka_enabled: true,
            },
            sspp: SsppConfig {
                branches: vec![branch(1), branch(2)],
                scale_reduction: 4,
                token_reduction: 2,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                channel_reduction: 4,
                ..DecoderConfig::default()
            },
            ablation: Ablation::FULL,
            seed: 0,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn modalities(&self) -> usize {
        self.encoder.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn stages(&self) -> usize {
        self.encoder.stages()
    }

    pub fn bottleneck_grid(&self) -> (usize, usize) {
        let f = 1 << self.stages();
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    /// Spatial grid of each decoder skip, coarse to fine.
    pub fn skip_grids(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.input_size;
        (0..self.stages())
            .rev()
            .map(|i| (h >> i, w >> i))
            .collect()
    }

    /// Decoder skip widths, coarse to fine; the finest is the stem.
    pub fn skip_channels(&self) -> Vec<usize> {
        let ch = &self.encoder.channels;
        let mut out: Vec<usize> = ch[..ch.len() - 1].iter().rev().copied().collect();
        out.push(self.encoder.stem_channels);
        out
    }

    /// Sub-configurations with the ablation switches applied.
    pub fn resolved(&self) -> (EncoderConfig, DecoderConfig) {
        let mut enc = self.encoder.clone();
        enc.dlka_enabled = self.ablation.use_dlka;
        let mut dec = self.decoder.clone();
        dec.cam_enabled = self.ablation.use_cam;
        dec.ag_enabled = self.ablation.use_cam;
        (enc, dec)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let div = 1usize << self.stages();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {div}"
            )));
        }
        if self.ablation.use_sspp {
            self.sspp.validate(self.bottleneck_grid())?;
        }
        if self.decoder.num_classes < 2 {
            return Err(Error::Config("need at least two classes (background + foreground)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

#[derive(Debug, Clone)]
pub struct A4Unet {
    encoder: Encoder,
    bridge: ResidualBlock,
    sspp: Option<Sspp>,
    decoder: Decoder,
    store: ParamStore,
    cfg: ModelConfig,
}

pub fn build_model(cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<A4Unet> {
    A4Unet::new(cfg, ParamStore::new(cfg.seed, dtype, device))
}

impl A4Unet {
    pub fn new(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (enc_cfg, dec_cfg) = cfg.resolved();
        let pb = store.builder();
        let encoder = Encoder::new(&enc_cfg, pb.pp("encoder"))?;
        let top = *enc_cfg.channels.last().expect("validated");
        let bpb = pb.pp("bottleneck");
        let bridge = ResidualBlock::new(top, top, bpb.pp("bridge"))?;
        let sspp = if cfg.ablation.use_sspp {
            Some(Sspp::new(&cfg.sspp, top, top, cfg.bottleneck_grid(), bpb.pp("sspp"))?)
        } else {
            None
        };
        let decoder = Decoder::new(
            &dec_cfg,
            top,
            &cfg.skip_channels(),
            &cfg.skip_grids(),
            pb.pp("decoder"),
        )?;
        Ok(Self {
            encoder,
            bridge,
            sspp,
            decoder,
            store,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn sspp(&self) -> Option<&Sspp> {
        self.sspp.as_ref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "model built for {}x{} inputs, got {h}x{w}",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        let enc = self.encoder.forward(x)?;
        let b_in = enc.bottleneck_in();
        let mut top = self.bridge.forward(b_in)?;
        if let Some(sspp) = &self.sspp {
            top = (top + sspp.forward(b_in)?.fused)?;
        }
        let n = enc.pyramid.len();
        let mut skips: Vec<&Tensor> = enc.pyramid[..n - 1].iter().rev().collect();
        skips.push(&enc.stem);
        self.decoder.forward(&top, &skips)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        let x = x.to_dtype(self.dtype())?;
        self.encoder.check_input(&x)?;
        let logits = self.logits(&x)?;
        let probabilities = softmax(&logits, 1)?;
        Ok(ModelOutput {
            logits,
            probabilities,
        })
    }

    pub fn describe(&self) -> ModelSummary {
        ModelSummary::new(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<SummaryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub ablation: Ablation,
    pub input_shape: Vec<usize>,
    pub entries: Vec<SummaryEntry>,
    pub total_params: usize,
}

impl ModelSummary {
    fn new(model: &A4Unet) -> Self {
        let cfg = &model.cfg;
        let vars = model.store.vars();
        let count = |prefix: &str| -> usize {
            vars.iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, v)| v.elem_count())
                .sum()
        };
        let (h, w) = cfg.input_size;
        let enc = &cfg.encoder;
        let mut entries = vec![SummaryEntry {
            name: "encoder.stem".into(),
            kind: "stem".into(),
            params: count("encoder.stem."),
            output_shape: vec![1, enc.stem_channels, h, w],
            children: vec![],
        }];
        for (i, &c) in enc.channels.iter().enumerate() {
            let s = 1 << (i + 1);
            entries.push(SummaryEntry {
                name: format!("encoder.stage{}", i + 1),
                kind: "encoder_stage".into(),
                params: count(&format!("encoder.stage{}.", i + 1)),
                output_shape: vec![1, c, h / s, w / s],
                children: vec![],
            });
        }
        let top = *enc.channels.last().expect("validated");
        let (bh, bw) = cfg.bottleneck_grid();
        let children = match &model.sspp {
            Some(sspp) => sspp
                .branches()
                .iter()
                .enumerate()
                .map(|(i, b)| SummaryEntry {
                    name: format!("bottleneck.sspp.branch{i}"),
                    kind: format!("swin_branch(window={})", b.config().window_size),
                    params: count(&format!("bottleneck.sspp.branch{i}.")),
                    output_shape: vec![1, bh * bw, b.config().embed_dim],
                    children: vec![],
                })
                .collect(),
            None => vec![],
        };
        entries.push(SummaryEntry {
            name: "bottleneck".into(),
            kind: "bottleneck".into(),
            params: count("bottleneck."),
            output_shape: vec![1, top, bh, bw],
            children,
        });
        for (i, (c, (gh, gw))) in cfg.skip_channels().into_iter().zip(cfg.skip_grids()).enumerate() {
            entries.push(SummaryEntry {
                name: format!("decoder.stage{}", i + 1),
                kind: "decoder_stage".into(),
                params: count(&format!("decoder.stage{}.", i + 1)),
                output_shape: vec![1, c, gh, gw],
                children: vec![],
            });
        }
        entries.push(SummaryEntry {
            name: "decoder.head".into(),
            kind: "head".into(),
            params: count("decoder.head."),
            output_shape: vec![1, cfg.num_classes(), h, w],
            children: vec![],
        });
        Self {
            label: cfg.ablation.label(),
            ablation: cfg.ablation,
            input_shape: vec![1, cfg.modalities(), h, w],
            total_params: model.store.num_params(),
            entries,
        }
    }

    pub fn stage_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind.as_str(), "encoder_stage" | "bottleneck" | "decoder_stage"))
            .count()
    }

    pub fn branch_count(&self) -> usize {
        self.entries.iter().map(|e| e.children.len()).sum()
    }
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}  input {:?}", self.label, self.input_shape)?;
        writeln!(f, "{:<32} {:>12}  output", "module", "params")?;
        for e in &self.entries {
            writeln!(f, "{:<32} {:>12}  {:?}", e.name, e.params, e.output_shape)?;
            for c in &e.children {
                writeln!(f, "  {:<30} {:>12}  {:?}  {}", c.name, c.params, c.output_shape, c.kind)?;
            }
        }
        write!(f, "{:<32} {:>12}", "total", self.total_params)
    }
}

//! Run configuration shared by every CLI stage.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use diffperc_core::codec::CodecConfig;
use diffperc_core::guidance::GuidanceConfig;
use diffperc_core::heads::{DepthLossConfig, HeadConfig};
use diffperc_core::task::TaskKind;
use diffperc_core::text::TextEncoderConfig;
use diffperc_core::unet::UNetConfig;

use crate::data::DatasetSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: String,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adamw".into(),
            base_lr: 1e-3,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrScheduleConfig {
    pub power: f64,
    pub min_lr: f64,
    /// Defaults to `total · 150 / 8000`.
    pub warmup_iters: Option<usize>,
    /// Starting fraction of the scheduled rate during warmup.
    pub warmup_ratio: f64,
}

impl Default for LrScheduleConfig {
    fn default() -> Self {
        Self {
            power: 0.9,
            min_lr: 1e-6,
            warmup_iters: None,
            warmup_ratio: 1e-6,
        }
    }
}

impl LrScheduleConfig {
    pub fn warmup(&self, total: usize) -> usize {
        self.warmup_iters.unwrap_or(total * 150 / 8000)
    }

    /// Polynomial decay to `min_lr` with linear warmup, as used by mmseg.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let progress = (step.min(total) as f64 / total.max(1) as f64).min(1.0);
        let lr = (base - self.min_lr) * (1.0 - progress).powf(self.power) + self.min_lr;
        let warmup = self.warmup(total);
        if step < warmup {
            let k = (1.0 - step as f64 / warmup as f64) * (1.0 - self.warmup_ratio);
            lr * (1.0 - k)
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptFlags {
    pub use_text_prompt: bool,
    pub use_adapter: bool,
}

impl Default for PromptFlags {
    fn default() -> Self {
        Self {
            use_text_prompt: true,
            use_adapter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub dataset: DatasetSpec,
    pub codec_iters: usize,
    pub codec_lr: f64,
    pub toy_iters: usize,
    pub toy_lr: f64,
    /// Probability a sample sees only the null prompt.
    pub caption_dropout: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::new("shapes_semseg", 1024, 11),
            codec_iters: 1500,
            codec_lr: 2e-3,
            toy_iters: 2000,
            toy_lr: 5e-4,
            caption_dropout: 0.1,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub crop: usize,
    pub stride: usize,
    pub flip: bool,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            crop: 64,
            stride: 43,
            flip: false,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub iters: usize,
    pub early_iters: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            iters: 400,
            early_iters: 200,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub dataset: DatasetSpec,
    pub eval_dataset: DatasetSpec,
    pub codec: CodecConfig,
    pub text: TextEncoderConfig,
    pub unet: UNetConfig,
    pub head: HeadConfig,
    pub depth_loss: DepthLossConfig,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrScheduleConfig,
    pub backbone_lr_multiplier: f64,
    pub guidance: GuidanceConfig,
    pub prompts: PromptFlags,
    pub total_iters: usize,
    pub batch_size: usize,
    /// 0 disables periodic evaluation.
    pub eval_interval: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy(TaskKind::Semseg)
    }
}

impl RunConfig {
    /// Desk-scale preset for a task.
    pub fn toy(task: TaskKind) -> Self {
        let (name, eval_flip) = match task {
            TaskKind::Semseg => ("shapes_semseg", false),
            TaskKind::Refseg => ("shapes_refseg", false),
            TaskKind::Depth => ("layered_depth", true),
        };
        let dataset = DatasetSpec::new(name, 1024, 1);
        let head = HeadConfig {
            task,
            num_classes: dataset.classes,
            ..HeadConfig::default()
        };
        let guidance = if task == TaskKind::Refseg {
            GuidanceConfig {
                enabled: false,
                ..GuidanceConfig::default()
            }
        } else {
            GuidanceConfig::default()
        };
        Self {
            task,
            eval_dataset: DatasetSpec::new(name, 128, 9001),
            dataset,
            codec: CodecConfig::default(),
            text: TextEncoderConfig::default(),
            unet: UNetConfig::default(),
            head,
            depth_loss: DepthLossConfig::default(),
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrScheduleConfig::default(),
            backbone_lr_multiplier: 0.1,
            guidance,
            prompts: PromptFlags::default(),
            total_iters: 2000,
            batch_size: 8,
            eval_interval: 500,
            seed: 0,
            pretrain: PretrainConfig::default(),
            eval: EvalConfig {
                flip: eval_flip,
                ..EvalConfig::default()
            },
            ablation: AblationConfig::default(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.head.task != self.task {
            bail!("head is configured for {} but the run task is {}", self.head.task, self.task);
        }
        for spec in [&self.dataset, &self.eval_dataset] {
            let gen = crate::data::generators().get(&spec.name)?;
            if gen.task() != self.task {
                bail!("dataset `{}` produces {} data, run task is {}", spec.name, gen.task(), self.task);
            }
        }
        if self.task == TaskKind::Semseg && self.head.num_classes != self.dataset.classes {
            bail!(
                "head predicts {} classes, dataset has {}",
                self.head.num_classes,
                self.dataset.classes
            );
        }
        if self.task == TaskKind::Refseg && self.guidance.enabled && self.guidance.source != "none" {
            bail!("attention guidance needs a fixed prompt set and is not available for refseg");
        }
        if self.optimizer.kind != "adamw" {
            bail!("unknown optimizer `{}` (known: adamw)", self.optimizer.kind);
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            bail!("batch_size and total_iters must be positive");
        }
        if !(self.backbone_lr_multiplier >= 0.0) {
            bail!("backbone_lr_multiplier must be non-negative");
        }
        self.guidance.validate()?;
        self.unet.validate()?;
        self.depth_loss.validate()?;
        if self.unet.context_dim != self.text.width {
            bail!("unet context_dim {} != text width {}", self.unet.context_dim, self.text.width);
        }
        if self.codec.latent_channels != self.unet.latent_channels {
            bail!("codec and unet disagree on latent channels");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_multiplier_defaults_to_tenth() {
        assert_eq!(RunConfig::default().backbone_lr_multiplier, 0.1);
        let parsed: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn warmup_scales_with_budget() {
        let s = LrScheduleConfig::default();
        assert_eq!(s.warmup(8000), 150);
        assert_eq!(s.warmup(80000), 1500);
        assert_eq!(s.warmup(2000), 37);
    }

    #[test]
    fn poly_schedule_endpoints() {
        let s = LrScheduleConfig {
            warmup_iters: Some(10),
            ..LrScheduleConfig::default()
        };
        assert!((s.lr_at(1e-3, 0, 100) - 1e-3 * 1e-6).abs() < 1e-12);
        let at10 = (1e-3 - 1e-6) * 0.9f64.powf(0.9) + 1e-6;
        assert!((s.lr_at(1e-3, 10, 100) - at10).abs() < 1e-15);
        assert!((s.lr_at(1e-3, 100, 100) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn presets_validate_and_mismatch_fails() {
        for task in TaskKind::ALL {
            RunConfig::toy(task).validate().unwrap();
        }
        let mut cfg = RunConfig::toy(TaskKind::Semseg);
        cfg.head.task = TaskKind::Depth;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy(TaskKind::Refseg);
        cfg.guidance.enabled = true;
        assert!(cfg.validate().is_err());
    }
}

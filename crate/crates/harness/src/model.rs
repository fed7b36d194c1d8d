//! The assembled network and the perception forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use anyhow::Context;

use diffperc_core::codec::LatentCodec;
use diffperc_core::guidance::{average_maps, backbone_map_sites, fuse};
use diffperc_core::heads::FpnHead;
use diffperc_core::nn::{LrGroup, Param, ParamStore, VarBuilder};
use diffperc_core::task::TaskKind;
use diffperc_core::tensor::no_grad;
use diffperc_core::text::{build_prompts, ConditioningFeatures, PromptSet, TextAdapter, TextEncoder, Vocabulary, ADAPTER_GAMMA_INIT};
use diffperc_core::unet::{BackboneOutput, UNet};
use diffperc_core::{Error, Result, Tensor};

use crate::config::RunConfig;
use crate::data::Dataset;

pub const NULL_PROMPT: &str = "";

/// Parameter name prefixes.
pub const CODEC: &str = "codec.";
pub const TEXT: &str = "text.";
pub const NULL: &str = "null_prompt";
pub const UNET: &str = "unet.";
pub const ADAPTER: &str = "adapter.";
pub const HEAD: &str = "head.";

pub struct Model {
    pub store: ParamStore<f32>,
    pub vocab: Arc<Vocabulary>,
    pub codec: LatentCodec,
    pub text: TextEncoder,
    /// Learned embedding standing in for the empty prompt.
    pub null_prompt: Arc<Param<f32>>,
    pub unet: UNet,
    pub adapter: Option<TextAdapter>,
    pub head: Option<FpnHead>,
}

impl Model {
    /// Codec, text encoder, null prompt and UNet.
    pub fn backbone(cfg: &RunConfig, vocab: Arc<Vocabulary>, seed: u64) -> anyhow::Result<Self> {
        let store = ParamStore::new();
        let vb = VarBuilder::new(&store, seed);
        let codec = LatentCodec::new(&vb.pp("codec"), &cfg.codec)?;
        let text = TextEncoder::new(&vb.pp("text"), vocab.clone(), &cfg.text)?;
        let init = {
            let _g = no_grad();
            text.encode_one(NULL_PROMPT)?
        };
        let null_prompt = store.insert(NULL, init, LrGroup::Base)?;
        let unet = UNet::new(&vb.pp("unet").with_group(LrGroup::Backbone), &cfg.unet)?;
        Ok(Self {
            store,
            vocab,
            codec,
            text,
            null_prompt,
            unet,
            adapter: None,
            head: None,
        })
    }

    /// Adds the adapter (when enabled) and a head sized for `prompt_rows`
    /// conditioning rows.
    pub fn add_perception(&mut self, cfg: &RunConfig, prompt_rows: usize, seed: u64) -> anyhow::Result<()> {
        let vb = VarBuilder::new(&self.store, seed);
        if cfg.prompts.use_adapter {
            self.adapter = Some(TextAdapter::new(&vb.pp("adapter"), cfg.text.width, ADAPTER_GAMMA_INIT)?);
        }
        let widths = cfg
            .guidance
            .fused_widths(&cfg.unet.feature_channels(), prompt_rows, &backbone_map_sites())?;
        self.head = Some(FpnHead::new(&vb.pp("head"), &cfg.head, &widths)?);
        Ok(())
    }

    /// Freeze and LR-group policy for perception training: codec, text encoder
    /// and null prompt frozen, UNet on the backbone group, the rest base.
    pub fn apply_perception_policy(&self) {
        for p in self.store.all() {
            let name = p.name();
            let frozen = name.starts_with(CODEC) || name.starts_with(TEXT) || name == NULL;
            p.set_frozen(frozen);
            p.set_group(if name.starts_with(UNET) {
                LrGroup::Backbone
            } else {
                LrGroup::Base
            });
        }
    }

    /// Pretraining policy: only the codec is frozen, everything on one group.
    pub fn apply_pretrain_policy(&self) {
        for p in self.store.all() {
            p.set_frozen(p.name().starts_with(CODEC));
            p.set_group(LrGroup::Base);
        }
    }

    /// Latents for `images` with the codec frozen and no graph recorded.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let _g = no_grad();
        self.codec.encode(images)
    }

    pub fn head(&self) -> Result<&FpnHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no perception head".into()))
    }
}

/// Text side of the perception pass for one run.
pub struct Conditioner {
    task: TaskKind,
    use_text: bool,
    /// Frozen encoder output, one row per prompt (or the null row).
    cached: ConditioningFeatures<f32>,
    /// Refseg: expression -> row of `cached`.
    rows: HashMap<String, usize>,
}

impl Conditioner {
    pub fn new(model: &Model, cfg: &RunConfig, datasets: &[&Dataset]) -> anyhow::Result<Self> {
        let _g = no_grad();
        let null = || -> anyhow::Result<ConditioningFeatures<f32>> {
            Ok(ConditioningFeatures::new(
                model.null_prompt.tensor().detach(),
                PromptSet::new(vec![NULL_PROMPT.into()])?,
            )?)
        };
        let mut rows = HashMap::new();
        let cached = if !cfg.prompts.use_text_prompt {
            null()?
        } else {
            match cfg.task {
                TaskKind::Semseg | TaskKind::Depth => {
                    let names = &datasets.first().context("no dataset")?.class_names;
                    model.text.encode(&build_prompts(names, cfg.task)?)?
                }
                TaskKind::Refseg => {
                    // the whole grammar, so any split can be conditioned
                    let mut exprs: Vec<String> = crate::data::refseg_expressions();
                    rows.extend(exprs.iter().enumerate().map(|(i, e)| (e.clone(), i)));
                    for ds in datasets {
                        for s in &ds.samples {
                            if !rows.contains_key(&s.text) {
                                rows.insert(s.text.clone(), exprs.len());
                                exprs.push(s.text.clone());
                            }
                        }
                    }
                    model.text.encode(&build_prompts(&exprs, TaskKind::Refseg)?)?
                }
            }
        };
        Ok(Self {
            task: cfg.task,
            use_text: cfg.prompts.use_text_prompt,
            cached,
            rows,
        })
    }

    /// Number of rows every sample attends over (guided tasks only).
    pub fn prompt_rows(&self) -> usize {
        if self.task == TaskKind::Refseg {
            1
        } else {
            self.cached.rows()
        }
    }

    pub fn cached(&self) -> &ConditioningFeatures<f32> {
        &self.cached
    }

    /// Conditioning for a batch and, for refseg, the key mask restricting each
    /// sample to its own expression.
    pub fn for_batch(
        &self,
        adapter: Option<&TextAdapter>,
        texts: &[&str],
    ) -> Result<(ConditioningFeatures<f32>, Option<Tensor>)> {
        let (base, mask) = if self.task == TaskKind::Refseg && self.use_text {
            let mut union: Vec<usize> = Vec::new();
            let mut slot = Vec::with_capacity(texts.len());
            for t in texts {
                let r = *self
                    .rows
                    .get(*t)
                    .ok_or_else(|| Error::Config(format!("expression `{t}` was not cached")))?;
                let k = union.iter().position(|&u| u == r).unwrap_or_else(|| {
                    union.push(r);
                    union.len() - 1
                });
                slot.push(k);
            }
            let s = union.len();
            let mut m = vec![-1e9f32; texts.len() * s];
            for (b, &k) in slot.iter().enumerate() {
                m[b * s + k] = 0.0;
            }
            (self.cached.select(&union)?, Some(Tensor::new(m, &[texts.len(), s])?))
        } else {
            (self.cached.clone(), None)
        };
        let cond = match adapter {
            Some(a) => a.adapt(&base)?,
            None => base,
        };
        Ok((cond, mask))
    }
}

/// Encode-free perception pass on latents: UNet at t = 0, guidance, head.
pub fn perceive(
    model: &Model,
    cfg: &RunConfig,
    cond: &Conditioner,
    z: &Tensor,
    texts: &[&str],
    image_hw: (usize, usize),
) -> Result<(Tensor, BackboneOutput)> {
    let (c, mask) = cond.for_batch(model.adapter.as_ref(), texts)?;
    let out = model.unet.forward_masked(z, &[0], &c, mask.as_ref())?;
    let maps = average_maps(&out.attn_maps, &cfg.guidance)?;
    let fused = fuse(&out.features, &maps)?;
    let raw = model.head()?.forward(&fused, image_hw)?;
    Ok((raw, out))
}

/// Head output for raw images.
pub fn predict(model: &Model, cfg: &RunConfig, cond: &Conditioner, images: &Tensor, texts: &[&str]) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::Config(format!("expected [B, 3, H, W] images, got {:?}", images.shape())));
    }
    let z = model.encode(images)?;
    let (raw, _) = perceive(model, cfg, cond, &z, texts, (images.dim(2), images.dim(3)))?;
    Ok(raw)
}

//! Text-conditioned denoising UNet. During generative pretraining it predicts
//! noise; as a perception backbone it is run once at `t = 0` and its
//! upsampling-path features and cross-attention maps are handed to a head.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, LayerNorm, Linear, Module, VarBuilder};
use crate::tensor::{Float, Tensor};
use crate::text::ConditioningFeatures;

/// Number of resolution levels; level 1 is the coarsest, level 4 matches the
/// latent.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per level, finest first.
    pub channel_multipliers: Vec<usize>,
    pub attn_heads: usize,
    /// Width of the conditioning rows.
    pub context_dim: usize,
    /// Width of the sinusoidal timestep code.
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            attn_heads: 4,
            context_dim: 64,
            time_embed_dim: 32,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() != LEVELS {
            return Err(Error::Config(format!(
                "UNet needs exactly {LEVELS} resolution levels, got {}",
                self.channel_multipliers.len()
            )));
        }
        for c in self.channels() {
            if c == 0 || c % self.attn_heads != 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} must be a positive multiple of {} heads and {} groups",
                    self.attn_heads, self.norm_groups
                )));
            }
        }
        if self.latent_channels == 0 || self.context_dim == 0 || self.time_embed_dim < 2 {
            return Err(Error::Config("UNet widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel width per resolution, finest first.
    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    /// Channels of `F_1..F_4`.
    pub fn feature_channels(&self) -> Vec<usize> {
        let mut c = self.channels();
        c.reverse();
        c
    }
}

/// Sinusoidal code of width `dim`: cosines in the first half, sines in the
/// second, frequencies geometric from 1 down to 1/10000.
pub fn timestep_embed<T: Float>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[j] = T::of(arg.cos());
        out[half + j] = T::of(arg.sin());
    }
    Tensor::new(out, &[dim]).expect("length matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnLocation {
    Down,
    Mid,
    Up,
}

impl fmt::Display for AttnLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnLocation::Down => "down",
            AttnLocation::Mid => "mid",
            AttnLocation::Up => "up",
        })
    }
}

/// One captured cross-attention map, `[B, |S|, H_i, W_i]`, averaged over heads.
#[derive(Clone, Debug)]
pub struct AttnRecord<T: Float = f32> {
    pub location: AttnLocation,
    pub level: usize,
    pub map: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput<T: Float = f32> {
    /// `F_1..F_4`, coarsest first.
    pub features: Vec<Tensor<T>>,
    pub attn_maps: Vec<AttnRecord<T>>,
}

/// Multi-head attention with image positions as queries and conditioning
/// rows as keys and values.
#[derive(Debug)]
pub struct CrossAttention<T: Float = f32> {
    to_q: Linear<T>,
    to_k: Linear<T>,
    to_v: Linear<T>,
    to_out: Linear<T>,
    heads: usize,
    dim: usize,
    context_dim: usize,
}

impl<T: Float> CrossAttention<T> {
    pub fn new(vb: &VarBuilder<T>, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            to_q: Linear::new(&vb.pp("to_q"), dim, dim, false)?,
            to_k: Linear::new(&vb.pp("to_k"), context_dim, dim, false)?,
            to_v: Linear::new(&vb.pp("to_v"), context_dim, dim, false)?,
            to_out: Linear::new(&vb.pp("to_out"), dim, dim, true)?,
            heads,
            dim,
            context_dim,
        })
    }

    /// `x: [B, d, H, W]` to `([B, d, H, W], map [B, |S|, H, W])`.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        cond: &ConditioningFeatures<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, d, h, w) = match x.shape() {
            &[b, d, h, w] => (b, d, h, w),
            s => return Err(Error::dim("cross_attention", format!("expected [B, d, H, W], got {s:?}"))),
        };
        let tokens = x.reshape(&[b, d, h * w])?.permute(&[0, 2, 1])?;
        let (out, map) = self.attend(&tokens, h, w, cond, None)?;
        Ok((out.permute(&[0, 2, 1])?.reshape(&[b, d, h, w])?, map))
    }

    /// Token form: `tokens: [B, H·W, d]`. `key_mask`, if given, is an
    /// additive `[B, |S|]` bias (0 to keep a key, a large negative to drop it).
    pub fn attend(
        &self,
        tokens: &Tensor<T>,
        h: usize,
        w: usize,
        cond: &ConditioningFeatures<T>,
        key_mask: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, n, d) = match tokens.shape() {
            &[b, n, d] if n == h * w => (b, n, d),
            s => {
                return Err(Error::dim(
                    "cross_attention",
                    format!("tokens {s:?} do not cover a {h}x{w} grid"),
                ))
            }
        };
        if d != self.dim {
            return Err(Error::dim(
                "cross_attention",
                format!("query width {d} but attention built for {}", self.dim),
            ));
        }
        if cond.width() != self.context_dim {
            return Err(Error::dim(
                "cross_attention",
                format!(
                    "conditioning width {} but keys expect {}",
                    cond.width(),
                    self.context_dim
                ),
            ));
        }
        let (heads, dh, s) = (self.heads, d / self.heads, cond.rows());
        // [heads, B·N, dh]
        let q = self
            .to_q
            .forward(tokens)?
            .reshape(&[b * n, heads, dh])?
            .permute(&[1, 0, 2])?;
        let ctx = cond.features();
        let kt = self.to_k.forward(ctx)?.reshape(&[s, heads, dh])?.permute(&[1, 2, 0])?;
        let v = self.to_v.forward(ctx)?.reshape(&[s, heads, dh])?.permute(&[1, 0, 2])?;
        let mut scores = q.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(mask) = key_mask {
            if mask.shape() != [b, s] {
                return Err(Error::dim(
                    "cross_attention",
                    format!("key mask {:?} for batch {b} and {s} keys", mask.shape()),
                ));
            }
            let mut full = Vec::with_capacity(b * n * s);
            for row in mask.data().chunks(s) {
                for _ in 0..n {
                    full.extend_from_slice(row);
                }
            }
            scores = scores.add(&Tensor::new(full, &[1, b * n, s])?)?;
        }
        let probs = scores.softmax(2)?;
        let out = probs
            .matmul(&v)?
            .permute(&[1, 0, 2])?
            .reshape(&[b, n, d])?;
        let map = probs
            .mean_axis(0)?
            .reshape(&[b, n, s])?
            .permute(&[0, 2, 1])?
            .reshape(&[b, s, h, w])?;
        Ok((self.to_out.forward(&out)?, map))
    }
}

/// Free-function form of [`CrossAttention::forward`].
pub fn cross_attention<T: Float>(
    attn: &CrossAttention<T>,
    query_features: &Tensor<T>,
    cond: &ConditioningFeatures<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    attn.forward(query_features, cond)
}

#[derive(Debug)]
struct ResBlock<T: Float> {
    norm1: GroupNorm<T>,
    conv1: Conv2d<T>,
    time: Linear<T>,
    norm2: GroupNorm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Float> ResBlock<T> {
    fn new(vb: &VarBuilder<T>, cin: usize, cout: usize, emb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&vb.pp("norm1"), groups, cin)?,
            conv1: Conv2d::new(&vb.pp("conv1"), cin, cout, 3, 1, 1)?,
            time: Linear::new(&vb.pp("time_emb_proj"), emb, cout, true)?,
            norm2: GroupNorm::new(&vb.pp("norm2"), groups, cout)?,
            conv2: Conv2d::new(&vb.pp("conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&vb.pp("skip"), cin, cout, 1, 1, 0)?)
            },
        })
    }

    /// `emb: [1 or B, E]` after the shared time MLP.
    fn forward(&self, x: &Tensor<T>, emb: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu())?;
        let te = self.time.forward(&emb.silu())?;
        let te = te.reshape(&[te.dim(0), te.dim(1), 1, 1])?;
        let h = h.add(&te)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu())?;
        match &self.skip {
            Some(s) => s.forward(x)?.add(&h),
            None => x.add(&h),
        }
    }
}

/// GroupNorm, 1x1 in, cross-attention and MLP on tokens, 1x1 out, residual.
#[derive(Debug)]
struct AttnBlock<T: Float> {
    norm: GroupNorm<T>,
    proj_in: Conv2d<T>,
    ln1: LayerNorm<T>,
    attn: CrossAttention<T>,
    ln2: LayerNorm<T>,
    ff1: Linear<T>,
    ff2: Linear<T>,
    proj_out: Conv2d<T>,
}

impl<T: Float> AttnBlock<T> {
    fn new(vb: &VarBuilder<T>, c: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&vb.pp("norm"), cfg.norm_groups, c)?,
            proj_in: Conv2d::new(&vb.pp("proj_in"), c, c, 1, 1, 0)?,
            ln1: LayerNorm::new(&vb.pp("ln1"), c)?,
            attn: CrossAttention::new(&vb.pp("attn"), c, cfg.context_dim, cfg.attn_heads)?,
            ln2: LayerNorm::new(&vb.pp("ln2"), c)?,
            ff1: Linear::new(&vb.pp("ff1"), c, 2 * c, true)?,
            ff2: Linear::new(&vb.pp("ff2"), 2 * c, c, true)?,
            proj_out: Conv2d::new(&vb.pp("proj_out"), c, c, 1, 1, 0)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        cond: &ConditioningFeatures<T>,
        key_mask: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let hs = self.proj_in.forward(&self.norm.forward(x)?)?;
        let tok = hs.reshape(&[b, c, h * w])?.permute(&[0, 2, 1])?;
        let (a, map) = self.attn.attend(&self.ln1.forward(&tok)?, h, w, cond, key_mask)?;
        let tok = tok.add(&a)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&tok)?)?.silu())?;
        let tok = tok.add(&ff)?;
        let hs = tok.permute(&[0, 2, 1])?.reshape(&[b, c, h, w])?;
        Ok((x.add(&self.proj_out.forward(&hs)?)?, map))
    }
}

#[derive(Debug)]
struct Stage<T: Float> {
    res: ResBlock<T>,
    attn: Option<AttnBlock<T>>,
}

#[derive(Debug)]
pub struct UNet<T: Float = f32> {
    cfg: UNetConfig,
    time_fc1: Linear<T>,
    time_fc2: Linear<T>,
    conv_in: Conv2d<T>,
    /// Finest first.
    down: Vec<Stage<T>>,
    downsample: Vec<Conv2d<T>>,
    mid_res1: ResBlock<T>,
    mid_attn: AttnBlock<T>,
    mid_res2: ResBlock<T>,
    /// Coarsest first.
    up: Vec<Stage<T>>,
    upsample: Vec<Conv2d<T>>,
    norm_out: GroupNorm<T>,
    conv_out: Conv2d<T>,
}

impl<T: Float> UNet<T> {
    pub fn new(vb: &VarBuilder<T>, cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let emb = 4 * cfg.base_channels;
        let g = cfg.norm_groups;
        let mut down = Vec::with_capacity(LEVELS);
        let mut downsample = Vec::with_capacity(LEVELS - 1);
        let mut cin = ch[0];
        for r in 0..LEVELS {
            let vbr = vb.pp(format!("down.{r}"));
            down.push(Stage {
                res: ResBlock::new(&vbr.pp("res"), cin, ch[r], emb, g)?,
                attn: if r + 1 < LEVELS {
                    Some(AttnBlock::new(&vbr.pp("attn"), ch[r], cfg)?)
                } else {
                    None
                },
            });
            if r + 1 < LEVELS {
                downsample.push(Conv2d::new(&vbr.pp("downsample"), ch[r], ch[r], 3, 2, 1)?);
            }
            cin = ch[r];
        }
        let cm = ch[LEVELS - 1];
        let mut up = Vec::with_capacity(LEVELS);
        let mut upsample = Vec::with_capacity(LEVELS - 1);
        for r in (0..LEVELS).rev() {
            let vbr = vb.pp(format!("up.{r}"));
            up.push(Stage {
                res: ResBlock::new(&vbr.pp("res"), cin + ch[r], ch[r], emb, g)?,
                attn: if r + 1 < LEVELS {
                    Some(AttnBlock::new(&vbr.pp("attn"), ch[r], cfg)?)
                } else {
                    None
                },
            });
            if r > 0 {
                upsample.push(Conv2d::new(&vbr.pp("upsample"), ch[r], ch[r], 3, 1, 1)?);
            }
            cin = ch[r];
        }
        Ok(Self {
            cfg: cfg.clone(),
            time_fc1: Linear::new(&vb.pp("time.fc1"), cfg.time_embed_dim, emb, true)?,
            time_fc2: Linear::new(&vb.pp("time.fc2"), emb, emb, true)?,
            conv_in: Conv2d::new(&vb.pp("conv_in"), cfg.latent_channels, ch[0], 3, 1, 1)?,
            down,
            downsample,
            mid_res1: ResBlock::new(&vb.pp("mid.res1"), cm, cm, emb, g)?,
            mid_attn: AttnBlock::new(&vb.pp("mid.attn"), cm, cfg)?,
            mid_res2: ResBlock::new(&vb.pp("mid.res2"), cm, cm, emb, g)?,
            up,
            upsample,
            norm_out: GroupNorm::new(&vb.pp("norm_out"), g, ch[0])?,
            conv_out: Conv2d::zeroed(&vb.pp("conv_out"), ch[0], cfg.latent_channels, 3, 1)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn time_mlp(&self, ts: &[usize]) -> Result<Tensor<T>> {
        let d = self.cfg.time_embed_dim;
        let rows: Vec<Tensor<T>> = ts.iter().map(|&t| timestep_embed(t, d)).collect();
        let codes = Tensor::concat(&rows, 0)?.reshape(&[ts.len(), d])?;
        self.time_fc2.forward(&self.time_fc1.forward(&codes)?.silu())
    }

    /// Backbone pass with one timestep for the whole batch.
    pub fn forward(
        &self,
        z: &Tensor<T>,
        t: usize,
        cond: &ConditioningFeatures<T>,
    ) -> Result<BackboneOutput<T>> {
        self.forward_masked(z, &[t], cond, None)
    }

    /// `ts` holds one timestep shared by the batch or one per sample;
    /// `key_mask` restricts which conditioning rows each sample attends to.
    pub fn forward_masked(
        &self,
        z: &Tensor<T>,
        ts: &[usize],
        cond: &ConditioningFeatures<T>,
        key_mask: Option<&Tensor<T>>,
    ) -> Result<BackboneOutput<T>> {
        let (b, side_h, side_w) = match z.shape() {
            &[b, c, h, w] if c == self.cfg.latent_channels => (b, h, w),
            s => {
                return Err(Error::dim(
                    "unet_forward",
                    format!(
                        "expected latent [B, {}, h, w], got {s:?}",
                        self.cfg.latent_channels
                    ),
                ))
            }
        };
        let div = 1 << (LEVELS - 1);
        if side_h % div != 0 || side_w % div != 0 || side_h == 0 || side_w == 0 {
            return Err(Error::dim(
                "unet_forward",
                format!("latent {side_h}x{side_w} not divisible by {div}"),
            ));
        }
        if cond.rows() == 0 {
            return Err(Error::Config("empty conditioning".into()));
        }
        if ts.len() != 1 && ts.len() != b {
            return Err(Error::dim(
                "unet_forward",
                format!("{} timesteps for batch {b}", ts.len()),
            ));
        }
        let emb = self.time_mlp(ts)?;
        let mut maps = Vec::new();
        let mut h = self.conv_in.forward(z)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for (r, stage) in self.down.iter().enumerate() {
            h = stage.res.forward(&h, &emb)?;
            if let Some(a) = &stage.attn {
                let (out, map) = a.forward(&h, cond, key_mask)?;
                h = out;
                maps.push(AttnRecord {
                    location: AttnLocation::Down,
                    level: LEVELS - r,
                    map,
                });
            }
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(r) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid_res1.forward(&h, &emb)?;
        let (out, map) = self.mid_attn.forward(&h, cond, key_mask)?;
        maps.push(AttnRecord {
            location: AttnLocation::Mid,
            level: 1,
            map,
        });
        h = self.mid_res2.forward(&out, &emb)?;
        let mut features = Vec::with_capacity(LEVELS);
        for (i, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = stage.res.forward(&Tensor::concat_channels(&[h, skip])?, &emb)?;
            if let Some(a) = &stage.attn {
                let (out, map) = a.forward(&h, cond, key_mask)?;
                h = out;
                maps.push(AttnRecord {
                    location: AttnLocation::Up,
                    level: i + 1,
                    map,
                });
            }
            features.push(h.clone());
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(&h.interpolate_nearest(2)?)?;
            }
        }
        Ok(BackboneOutput {
            features,
            attn_maps: maps,
        })
    }

    /// Noise prediction from the finest feature map.
    pub fn noise_from_features(&self, out: &BackboneOutput<T>) -> Result<Tensor<T>> {
        let f4 = out.features.last().expect("four levels");
        self.conv_out.forward(&self.norm_out.forward(f4)?.silu())
    }
}

/// Free-function form of [`UNet::forward`].
pub fn unet_forward<T: Float>(
    unet: &UNet<T>,
    z: &Tensor<T>,
    t: usize,
    cond: &ConditioningFeatures<T>,
) -> Result<BackboneOutput<T>> {
    unet.forward(z, t, cond)
}

impl<T: Float> NoisePredictor<T> for UNet<T> {
    fn predict_noise(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &ConditioningFeatures<T>,
    ) -> Result<Tensor<T>> {
        let out = self.forward(z_t, t, cond)?;
        self.noise_from_features(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{grad_check_sampled, SeededRng};
    use crate::text::PromptSet;

    fn cond<T: Float>(rng: &mut SeededRng, rows: usize, width: usize) -> ConditioningFeatures<T> {
        let prompts = PromptSet::new((0..rows).map(|i| format!("p{i}")).collect()).unwrap();
        ConditioningFeatures::new(rng.randn(&[rows, width]), prompts).unwrap()
    }

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            context_dim: 8,
            time_embed_dim: 8,
            attn_heads: 2,
            norm_groups: 4,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn timestep_zero_is_cos_one_sin_zero() {
        let e = timestep_embed::<f64>(0, 16);
        assert_eq!(&e.data()[..8], &[1.0; 8]);
        assert_eq!(&e.data()[8..], &[0.0; 8]);
    }

    #[test]
    fn timestep_codes_are_distinct_over_schedule() {
        let codes: Vec<Vec<f64>> = (0..=1000).map(|t| timestep_embed::<f64>(t, 32).to_vec()).collect();
        for i in 0..codes.len() {
            assert!(codes[i].iter().all(|v| v.is_finite()));
            for j in i + 1..codes.len() {
                let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn feature_and_map_shapes() {
        let store = ParamStore::<f32>::new();
        let u = UNet::new(&VarBuilder::new(&store, 1), &UNetConfig::default()).unwrap();
        let mut rng = SeededRng::new(2);
        let c = cond(&mut rng, 5, 64);
        let out = u.forward(&rng.randn(&[2, 4, 8, 8]), 0, &c).unwrap();
        let sides: Vec<usize> = out.features.iter().map(|f| f.dim(2)).collect();
        assert_eq!(sides, vec![1, 2, 4, 8]);
        let widths: Vec<usize> = out.features.iter().map(|f| f.dim(1)).collect();
        assert_eq!(widths, UNetConfig::default().feature_channels());
        assert_eq!(out.attn_maps.len(), 7);
        for r in &out.attn_maps {
            let side = 1 << (r.level - 1);
            assert_eq!(r.map.shape(), &[2, 5, side, side], "{} level {}", r.location, r.level);
        }
    }

    #[test]
    fn single_key_maps_are_ones() {
        let store = ParamStore::<f32>::new();
        let cfg = tiny();
        let u = UNet::new(&VarBuilder::new(&store, 1), &cfg).unwrap();
        let mut rng = SeededRng::new(3);
        let out = u.forward(&rng.randn(&[1, 4, 8, 8]), 0, &cond(&mut rng, 1, 8)).unwrap();
        for r in &out.attn_maps {
            assert!(r.map.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn identical_rows_give_uniform_maps() {
        let store = ParamStore::<f64>::new();
        let a = CrossAttention::new(&VarBuilder::new(&store, 5), 8, 6, 2).unwrap();
        let mut rng = SeededRng::new(6);
        let row: Tensor<f64> = rng.randn(&[1, 6]);
        let feats = Tensor::concat(&[row.clone(), row.clone(), row.clone()], 0).unwrap();
        let c = ConditioningFeatures::new(feats, PromptSet::new(vec!["a".into(), "b".into(), "c".into()]).unwrap()).unwrap();
        let (_, map) = a.forward(&rng.randn(&[2, 8, 3, 3]), &c).unwrap();
        assert!(map.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let store = ParamStore::<f32>::new();
        let a = CrossAttention::new(&VarBuilder::new(&store, 5), 8, 6, 2).unwrap();
        let mut rng = SeededRng::new(7);
        let c = cond(&mut rng, 3, 6);
        let x: Tensor<f32> = rng.randn(&[2, 8, 2, 2]);
        let tok = x.reshape(&[2, 8, 4]).unwrap().permute(&[0, 2, 1]).unwrap();
        let mask = Tensor::from_f64(&[0.0, -1e9, 0.0, -1e9, -1e9, 0.0], &[2, 3]).unwrap();
        let (_, map) = a.attend(&tok, 2, 2, &c, Some(&mask)).unwrap();
        let m = map.data();
        assert!(m[4..8].iter().all(|&v| v == 0.0));
        assert!(m[12..20].iter().all(|&v| v == 0.0));
        assert!(m[20..24].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_at_t0() {
        let store = ParamStore::<f32>::new();
        let u = UNet::new(&VarBuilder::new(&store, 1), &tiny()).unwrap();
        let mut rng = SeededRng::new(4);
        let c = cond(&mut rng, 3, 8);
        let z = rng.randn(&[1, 4, 8, 8]);
        let a = u.forward(&z, 0, &c).unwrap();
        let b = u.forward(&z, 0, &c).unwrap();
        for (x, y) in a.features.iter().zip(&b.features) {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in a.attn_maps.iter().zip(&b.attn_maps) {
            assert_eq!(x.map.data(), y.map.data());
        }
    }

    #[test]
    fn errors() {
        let store = ParamStore::<f32>::new();
        let u = UNet::new(&VarBuilder::new(&store, 1), &tiny()).unwrap();
        let mut rng = SeededRng::new(4);
        let c = cond(&mut rng, 3, 8);
        assert!(matches!(u.forward(&Tensor::zeros(&[1, 3, 8, 8]), 0, &c), Err(Error::Dim { .. })));
        assert!(matches!(u.forward(&Tensor::zeros(&[1, 4, 6, 6]), 0, &c), Err(Error::Dim { .. })));
        let wide = cond(&mut rng, 3, 9);
        assert!(matches!(u.forward(&Tensor::zeros(&[1, 4, 8, 8]), 0, &wide), Err(Error::Dim { .. })));
        let bad = UNetConfig {
            channel_multipliers: vec![1, 2, 4],
            ..tiny()
        };
        assert!(matches!(UNet::<f32>::new(&VarBuilder::new(&ParamStore::new(), 0), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn changing_one_row_changes_a_map() {
        let store = ParamStore::<f32>::new();
        let u = UNet::new(&VarBuilder::new(&store, 1), &tiny()).unwrap();
        let mut rng = SeededRng::new(8);
        let c = cond::<f32>(&mut rng, 4, 8);
        let z = rng.randn(&[1, 4, 8, 8]);
        let base = u.forward(&z, 0, &c).unwrap();
        for row in 0..4 {
            let mut f = c.features().to_vec();
            f[row * 8] += 0.5;
            let c2 = ConditioningFeatures::new(Tensor::new(f, &[4, 8]).unwrap(), c.prompts().clone()).unwrap();
            let other = u.forward(&z, 0, &c2).unwrap();
            assert!(base.attn_maps.iter().zip(&other.attn_maps).any(|(a, b)| a.map.data() != b.map.data()));
        }
    }

    #[test]
    fn gradient_through_backbone() {
        let store = ParamStore::<f64>::new();
        let u = UNet::new(&VarBuilder::new(&store, 1), &tiny()).unwrap();
        let mut rng = SeededRng::new(9);
        let c = cond::<f64>(&mut rng, 3, 8);
        let z: Tensor<f64> = rng.randn(&[1, 4, 8, 8]);
        let probes: Vec<Tensor<f64>> = [1usize, 2, 4, 8]
            .iter()
            .zip(tiny().feature_channels())
            .map(|(&s, ch)| rng.randn(&[1, ch, s, s]))
            .collect();
        let err = grad_check_sampled(
            |z| {
                let out = u.forward(z, 0, &c)?;
                let mut acc = Tensor::scalar(0.0);
                for (f, p) in out.features.iter().zip(&probes) {
                    acc = acc.add(&f.mul(p)?.sum_all())?;
                }
                Ok(acc)
            },
            &z,
            1e-5,
            48,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-2, "{err}");
    }
}

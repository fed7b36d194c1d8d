//! Semantic-FPN decoder and the per-task losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Module, VarBuilder};
use crate::task::TaskKind;
use crate::tensor::{Float, Tensor};
use crate::unet::LEVELS;

pub const IGNORE_INDEX: u32 = 255;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub task: TaskKind,
    /// Semseg only.
    pub num_classes: usize,
    pub fpn_channels: usize,
    pub norm_groups: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Semseg,
            num_classes: 6,
            fpn_channels: 32,
            norm_groups: 8,
        }
    }
}

impl HeadConfig {
    pub fn out_channels(&self) -> usize {
        match self.task {
            TaskKind::Semseg => self.num_classes,
            TaskKind::Refseg | TaskKind::Depth => 1,
        }
    }
}

#[derive(Debug)]
struct ScaleStage<T: Float> {
    conv: Conv2d<T>,
    norm: GroupNorm<T>,
    upsample: bool,
}

/// Lateral 1x1 projections with a top-down pathway, then per-level
/// conv-GN-ReLU stages that bring every level to the finest resolution
/// (coarser levels get one stage per factor of two), a sum, a 1x1
/// classifier and a bilinear resize to the image.
#[derive(Debug)]
pub struct FpnHead<T: Float = f32> {
    cfg: HeadConfig,
    in_widths: Vec<usize>,
    lateral: Vec<Conv2d<T>>,
    scale_heads: Vec<Vec<ScaleStage<T>>>,
    classifier: Conv2d<T>,
}

impl<T: Float> FpnHead<T> {
    /// `in_widths[i]` is the channel count of level `i + 1` after fusing.
    pub fn new(vb: &VarBuilder<T>, cfg: &HeadConfig, in_widths: &[usize]) -> Result<Self> {
        if in_widths.len() != LEVELS {
            return Err(Error::Config(format!(
                "FPN head expects {LEVELS} input levels, got {}",
                in_widths.len()
            )));
        }
        if cfg.out_channels() == 0 || cfg.fpn_channels % cfg.norm_groups != 0 {
            return Err(Error::Config(format!(
                "bad head widths: {} outputs, {} channels in {} groups",
                cfg.out_channels(),
                cfg.fpn_channels,
                cfg.norm_groups
            )));
        }
        let c = cfg.fpn_channels;
        let mut lateral = Vec::with_capacity(LEVELS);
        let mut scale_heads = Vec::with_capacity(LEVELS);
        for (i, &w) in in_widths.iter().enumerate() {
            lateral.push(Conv2d::no_bias(&vb.pp(format!("lateral.{i}")), w, c, 1, 1, 0)?);
            let ups = LEVELS - 1 - i;
            let stages = (0..ups.max(1))
                .map(|k| {
                    let v = vb.pp(format!("scale.{i}.{k}"));
                    Ok(ScaleStage {
                        conv: Conv2d::no_bias(&v.pp("conv"), c, c, 3, 1, 1)?,
                        norm: GroupNorm::new(&v.pp("norm"), cfg.norm_groups, c)?,
                        upsample: k < ups,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scale_heads.push(stages);
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_widths: in_widths.to_vec(),
            lateral,
            scale_heads,
            classifier: Conv2d::new(&vb.pp("classifier"), c, cfg.out_channels(), 1, 1, 0)?,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn in_widths(&self) -> &[usize] {
        &self.in_widths
    }

    /// `fused[i]: [B, in_widths[i], s_i, s_i]` to logits `[B, out, H, W]`.
    pub fn forward(&self, fused: &[Tensor<T>], image_hw: (usize, usize)) -> Result<Tensor<T>> {
        if fused.len() != LEVELS {
            return Err(Error::dim(
                "fpn_decode",
                format!("{} feature levels, head built for {LEVELS}", fused.len()),
            ));
        }
        for (i, (f, &w)) in fused.iter().zip(&self.in_widths).enumerate() {
            if f.rank() != 4 || f.dim(1) != w {
                return Err(Error::dim(
                    "fpn_decode",
                    format!("level {}: features {:?}, head expects {w} channels", i + 1, f.shape()),
                ));
            }
        }
        let mut lat: Vec<Tensor<T>> = fused
            .iter()
            .zip(&self.lateral)
            .map(|(f, l)| l.forward(f))
            .collect::<Result<_>>()?;
        for i in 1..LEVELS {
            let top = lat[i - 1].interpolate_nearest(2)?;
            lat[i] = lat[i].add(&top)?;
        }
        let mut sum: Option<Tensor<T>> = None;
        for (x, stages) in lat.iter().zip(&self.scale_heads) {
            let mut h = x.clone();
            for s in stages {
                h = s.norm.forward(&s.conv.forward(&h)?)?.relu();
                if s.upsample {
                    h = h.interpolate_nearest(2)?;
                }
            }
            sum = Some(match sum {
                None => h,
                Some(acc) => acc.add(&h)?,
            });
        }
        let logits = self.classifier.forward(&sum.expect("four levels"))?;
        let (h, w) = image_hw;
        if (logits.dim(2), logits.dim(3)) == (h, w) {
            Ok(logits)
        } else {
            logits.resize_bilinear(h, w)
        }
    }
}

/// Free-function form of [`FpnHead::forward`].
pub fn fpn_decode<T: Float>(
    head: &FpnHead<T>,
    fused: &[Tensor<T>],
    image_hw: (usize, usize),
) -> Result<Tensor<T>> {
    head.forward(fused, image_hw)
}

/// Mean cross-entropy over pixels whose label is not [`IGNORE_INDEX`];
/// zero (with a warning) when every pixel is ignored.
pub fn ce_loss<T: Float>(logits: &Tensor<T>, labels: &[u32]) -> Result<Tensor<T>> {
    let (loss, n) = logits.cross_entropy(labels, IGNORE_INDEX)?;
    if n == 0 {
        log::warn!("ce_loss: every pixel is ignored, loss defined as 0");
    }
    Ok(loss)
}

/// Binary cross-entropy on a single logit channel; mask values are 0, 1 or
/// [`IGNORE_INDEX`].
pub fn bce_loss<T: Float>(logits: &Tensor<T>, mask: &[u32]) -> Result<Tensor<T>> {
    if logits.rank() != 4 || logits.dim(1) != 1 {
        return Err(Error::dim(
            "bce_loss",
            format!("expected [B, 1, H, W] logits, got {:?}", logits.shape()),
        ));
    }
    let targets: Vec<Option<bool>> = mask
        .iter()
        .map(|&m| match m {
            0 => Some(false),
            IGNORE_INDEX => None,
            _ => Some(true),
        })
        .collect();
    let (loss, n) = logits.bce_with_logits(&targets)?;
    if n == 0 {
        log::warn!("bce_loss: every pixel is ignored, loss defined as 0");
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthLossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub max_depth: f64,
}

impl Default for DepthLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            alpha: 10.0,
            max_depth: 10.0,
        }
    }
}

impl DepthLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || self.alpha <= 0.0 || self.max_depth <= 1e-3 {
            return Err(Error::Config(format!("invalid depth loss settings {self:?}")));
        }
        Ok(())
    }
}

pub const MIN_DEPTH: f64 = 1e-3;

/// Positive depth from raw head output: `exp` clamped to `(1e-3, max_depth)`.
pub fn depth_from_logits<T: Float>(raw: &Tensor<T>, max_depth: f64) -> Tensor<T> {
    raw.exp().clamp(MIN_DEPTH, max_depth)
}

/// `alpha · sqrt(mean(g²) − lambda·mean(g)²)` with `g = log pred − log gt`
/// over masked pixels, evaluated as `mean((g − ḡ)²) + (1 − lambda)·ḡ²`.
pub fn si_loss<T: Float>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &[bool],
    cfg: &DepthLossConfig,
) -> Result<Tensor<T>> {
    if pred.shape() != gt.shape() || mask.len() != pred.numel() {
        return Err(Error::dim(
            "si_loss",
            format!(
                "pred {:?}, gt {:?}, mask of {}",
                pred.shape(),
                gt.shape(),
                mask.len()
            ),
        ));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        log::warn!("si_loss: empty mask, loss defined as 0");
        return Ok(pred.sum_all().scale(0.0));
    }
    let n = pred.numel();
    let p = pred.reshape(&[n, 1])?.index_select(&idx)?;
    let log_gt: Vec<T> = idx.iter().map(|&i| gt.data()[i].ln()).collect();
    let g = p.log().sub(&Tensor::new(log_gt, &[idx.len(), 1])?)?;
    let mean = g.mean_all();
    let centred = g.sub(&mean)?;
    let v = centred
        .square()
        .mean_all()
        .add(&mean.square().scale(1.0 - cfg.lambda))?;
    Ok(v.sqrt_floor(1e-6).scale(cfg.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::SeededRng;

    fn head<T: Float>(cfg: &HeadConfig, widths: &[usize]) -> FpnHead<T> {
        FpnHead::new(&VarBuilder::new(&ParamStore::new(), 3), cfg, widths).unwrap()
    }

    fn feats<T: Float>(rng: &mut SeededRng, widths: &[usize]) -> Vec<Tensor<T>> {
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| rng.randn(&[2, w, 1 << i, 1 << i]))
            .collect()
    }

    #[test]
    fn logits_cover_the_image() {
        let w = [128, 133, 69, 37];
        let h = head::<f32>(&HeadConfig::default(), &w);
        let out = h.forward(&feats(&mut SeededRng::new(1), &w), (64, 64)).unwrap();
        assert_eq!(out.shape(), &[2, 6, 64, 64]);
        let depth = head::<f32>(
            &HeadConfig {
                task: TaskKind::Depth,
                ..HeadConfig::default()
            },
            &w,
        );
        let out = depth.forward(&feats(&mut SeededRng::new(1), &w), (48, 40)).unwrap();
        assert_eq!(out.shape(), &[2, 1, 48, 40]);
    }

    // holds while GroupNorm shifts are at their zero init
    #[test]
    fn zero_features_give_constant_logits() {
        let w = [16, 16, 16, 16];
        let h = head::<f64>(&HeadConfig::default(), &w);
        let zeros: Vec<Tensor<f64>> = (0..4).map(|i| Tensor::zeros(&[1, 16, 1 << i, 1 << i])).collect();
        let out = h.forward(&zeros, (64, 64)).unwrap();
        for k in 0..6 {
            let plane = &out.data()[k * 4096..(k + 1) * 4096];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn level_count_and_width_errors() {
        let w = [16, 16, 16, 16];
        let h = head::<f32>(&HeadConfig::default(), &w);
        let mut rng = SeededRng::new(2);
        let f = feats::<f32>(&mut rng, &w);
        assert!(matches!(h.forward(&f[..3], (64, 64)), Err(Error::Dim { .. })));
        let g = feats::<f32>(&mut rng, &[16, 16, 17, 16]);
        assert!(matches!(h.forward(&g, (64, 64)), Err(Error::Dim { .. })));
    }

    #[test]
    fn uniform_logits_cost_log_k() {
        let l = ce_loss(&Tensor::<f64>::zeros(&[1, 5, 2, 2]), &[0, 1, 4, 2]).unwrap();
        assert!((l.item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_nearly_free() {
        let mut logits = vec![0.0; 3 * 4];
        let labels = [2u32, 0, 1, 2];
        for (p, &y) in labels.iter().enumerate() {
            logits[y as usize * 4 + p] = 30.0;
        }
        let l = ce_loss(&Tensor::<f64>::from_f64(&logits, &[1, 3, 2, 2]).unwrap(), &labels).unwrap();
        assert!(l.item().unwrap() < 1e-3);
    }

    #[test]
    fn all_ignored_is_zero() {
        let l = ce_loss(&Tensor::<f64>::ones(&[1, 3, 1, 2]), &[IGNORE_INDEX; 2]).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        let l = bce_loss(&Tensor::<f64>::ones(&[1, 1, 1, 2]), &[IGNORE_INDEX; 2]).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn si_loss_zero_at_truth_and_closed_form() {
        let mut rng = SeededRng::new(5);
        let gt: Tensor<f64> = rng.uniform_tensor::<f64>(&[1, 1, 4, 4], 1.0).add_scalar(2.0);
        let mask = vec![true; 16];
        let cfg = DepthLossConfig::default();
        assert_eq!(si_loss(&gt, &gt, &mask, &cfg).unwrap().item().unwrap(), 0.0);
        let l = si_loss(&gt.scale(2.0), &gt, &mask, &cfg).unwrap().item().unwrap();
        assert!((l - 10.0 * 2f64.ln() * 0.15f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn si_loss_shape_and_empty_mask() {
        let cfg = DepthLossConfig::default();
        let p = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        assert!(matches!(si_loss(&p, &p, &[true; 3], &cfg), Err(Error::Dim { .. })));
        assert_eq!(si_loss(&p, &p, &[false; 4], &cfg).unwrap().item().unwrap(), 0.0);
        assert!(matches!(
            DepthLossConfig { lambda: 1.5, ..cfg }.validate(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn depth_is_clamped_positive() {
        let raw = Tensor::<f64>::from_f64(&[-50.0, 0.0, 50.0], &[3]).unwrap();
        assert_eq!(depth_from_logits(&raw, 10.0).data(), &[1e-3, 1.0, 10.0]);
    }
}

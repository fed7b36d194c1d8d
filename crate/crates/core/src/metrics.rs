//! Segmentation and depth metrics, and the test-time protocols (sliding
//! window, horizontal flip).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Pixel counts indexed by `(gt, pred)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionState {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionState {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// Adds one image; pixels labelled `ignore` are skipped.
    pub fn update(&mut self, pred: &[u32], gt: &[u32], ignore: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(
                "confusion",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::dim(
                    "confusion",
                    format!("label pair ({g}, {p}) outside {} classes", self.k),
                ));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    /// Associative, commutative combination of two partial results.
    pub fn merge(&mut self, other: &ConfusionState) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(
                "confusion",
                format!("merging {} classes into {}", other.k, self.k),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scored(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class `(intersection, union)`.
    pub fn iou_parts(&self) -> (Vec<u64>, Vec<u64>) {
        let k = self.k;
        let mut inter = vec![0; k];
        let mut union = vec![0; k];
        for c in 0..k {
            let tp = self.count(c, c);
            let gt: u64 = (0..k).map(|p| self.count(c, p)).sum();
            let pr: u64 = (0..k).map(|g| self.count(g, c)).sum();
            inter[c] = tp;
            union[c] = gt + pr - tp;
        }
        (inter, union)
    }

    /// IoU per class; `None` where the class never appears in either map.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let (i, u) = self.iou_parts();
        i.iter()
            .zip(&u)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let tp: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        tp as f64 / self.scored() as f64
    }
}

/// Mean of per-class IoU over classes with a non-empty union.
pub fn miou(conf: &ConfusionState) -> f64 {
    if conf.scored() == 0 {
        log::warn!("miou: no scored pixels");
        return f64::NAN;
    }
    let ious: Vec<f64> = conf.class_iou().into_iter().flatten().collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Pooled `ΣI / ΣU`.
pub fn oiou(intersections: &[u64], unions: &[u64]) -> f64 {
    let u: u64 = unions.iter().sum();
    if u == 0 {
        log::warn!("oiou: empty union");
        return f64::NAN;
    }
    intersections.iter().sum::<u64>() as f64 / u as f64
}

/// `(intersection, union)` of two binary masks.
pub fn mask_iou_parts(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    let mut i = 0;
    let mut u = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        i += (p && g) as u64;
        u += (p || g) as u64;
    }
    (i, u)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl DepthMetrics {
    pub fn nan() -> Self {
        Self {
            rmse: f64::NAN,
            rel: f64::NAN,
            log10: f64::NAN,
            d1: f64::NAN,
            d2: f64::NAN,
            d3: f64::NAN,
        }
    }

    /// `(name, value)` in reporting order.
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rmse", self.rmse),
            ("rel", self.rel),
            ("log10", self.log10),
            ("d1", self.d1),
            ("d2", self.d2),
            ("d3", self.d3),
        ]
    }
}

/// Running sums for depth metrics pooled over pixels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthAccumulator {
    n: u64,
    sq: f64,
    rel: f64,
    log10: f64,
    within: [u64; 3],
}

impl DepthAccumulator {
    pub fn update<T: Float>(&mut self, pred: &[T], gt: &[T], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || mask.len() != gt.len() {
            return Err(Error::dim(
                "depth_metrics",
                format!("pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len()),
            ));
        }
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if !m {
                continue;
            }
            let (p, g) = (p.as_f64(), g.as_f64());
            if !(g > 0.0 && p > 0.0) {
                return Err(Error::Contract(format!("non-positive depth pair ({p}, {g})")));
            }
            self.n += 1;
            self.sq += (p - g) * (p - g);
            self.rel += (p - g).abs() / g;
            self.log10 += (p.log10() - g.log10()).abs();
            let ratio = (p / g).max(g / p);
            for (n, w) in self.within.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(n as i32 + 1) {
                    *w += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.n += other.n;
        self.sq += other.sq;
        self.rel += other.rel;
        self.log10 += other.log10;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
    }

    pub fn finish(&self) -> DepthMetrics {
        if self.n == 0 {
            log::warn!("depth_metrics: empty mask");
            return DepthMetrics::nan();
        }
        let n = self.n as f64;
        DepthMetrics {
            rmse: (self.sq / n).sqrt(),
            rel: self.rel / n,
            log10: self.log10 / n,
            d1: self.within[0] as f64 / n,
            d2: self.within[1] as f64 / n,
            d3: self.within[2] as f64 / n,
        }
    }
}

/// RMSE, REL, log10 and the three `δ < 1.25ⁿ` accuracies over masked pixels.
pub fn depth_metrics<T: Float>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.update(pred, gt, mask)?;
    Ok(acc.finish())
}

/// Window origins along one axis, last window flush with the far edge.
pub fn window_starts(len: usize, crop: usize, stride: usize) -> Result<Vec<usize>> {
    if crop == 0 || stride == 0 || stride > crop {
        return Err(Error::Config(format!(
            "need 0 < stride <= crop, got crop {crop} stride {stride}"
        )));
    }
    if crop > len {
        return Err(Error::Config(format!("crop {crop} larger than image side {len}")));
    }
    let grids = (len - crop).div_ceil(stride) + 1;
    Ok((0..grids)
        .map(|i| (i * stride).min(len - crop))
        .collect())
}

/// How many windows cover each pixel, `[h * w]` row-major.
pub fn coverage(h: usize, w: usize, crop: usize, stride: usize) -> Result<Vec<u32>> {
    let mut count = vec![0u32; h * w];
    for &y in &window_starts(h, crop, stride)? {
        for &x in &window_starts(w, crop, stride)? {
            for r in y..y + crop {
                for c in &mut count[r * w + x..r * w + x + crop] {
                    *c += 1;
                }
            }
        }
    }
    Ok(count)
}

/// Runs `model` on every `crop x crop` window of `image` (`[B, C, H, W]`)
/// and averages the per-pixel outputs over overlapping windows.
pub fn slide_inference<T, F>(model: F, image: &Tensor<T>, crop: usize, stride: usize) -> Result<Tensor<T>>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let (b, h, w) = match image.shape() {
        &[b, _, h, w] => (b, h, w),
        s => return Err(Error::dim("slide_inference", format!("expected [B, C, H, W], got {s:?}"))),
    };
    let ys = window_starts(h, crop, stride)?;
    let xs = window_starts(w, crop, stride)?;
    if ys.len() == 1 && xs.len() == 1 {
        return model(image);
    }
    let mut acc: Vec<T> = Vec::new();
    let mut k = 0;
    let mut count = vec![0u32; h * w];
    for &y in &ys {
        for &x in &xs {
            let window = image.narrow(2, y, crop)?.narrow(3, x, crop)?;
            let out = model(&window)?;
            if out.rank() != 4 || out.dim(0) != b || out.dim(2) != crop || out.dim(3) != crop {
                return Err(Error::dim(
                    "slide_inference",
                    format!("window output {:?} for crop {crop}", out.shape()),
                ));
            }
            if acc.is_empty() {
                k = out.dim(1);
                acc = vec![T::zero(); b * k * h * w];
            }
            let o = out.data();
            for bc in 0..b * k {
                for r in 0..crop {
                    let src = &o[(bc * crop + r) * crop..][..crop];
                    let dst = &mut acc[(bc * h + y + r) * w + x..][..crop];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
            for r in y..y + crop {
                for c in &mut count[r * w + x..r * w + x + crop] {
                    *c += 1;
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= T::of(count[i % (h * w)] as f64);
    }
    Tensor::new(acc, &[b, k, h, w])
}

/// Mean of `model(image)` and the horizontally restored `model(flip(image))`.
pub fn flip_average<T, F>(model: F, image: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let a = model(image)?;
    let b = model(&image.flip(3)?)?.flip(3)?;
    Ok(a.add(&b)?.scale(0.5))
}

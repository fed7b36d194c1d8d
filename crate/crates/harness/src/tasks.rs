//! Per-task training losses and evaluation tallies.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use diffperc_core::heads::{bce_loss, ce_loss, depth_from_logits, si_loss, IGNORE_INDEX};
use diffperc_core::metrics::{mask_iou_parts, miou, oiou, ConfusionState, DepthAccumulator};
use diffperc_core::registry::Registry;
use diffperc_core::task::TaskKind;
use diffperc_core::{Error, Result, Tensor};

use crate::config::RunConfig;
use crate::data::{hflip, Sample, Target};

/// Running evaluation state; merging is associative.
#[derive(Clone, Debug, PartialEq)]
pub enum Tally {
    Seg(ConfusionState),
    Ref { inter: u64, union: u64, iou_sum: f64, n: usize },
    Depth(DepthAccumulator),
}

impl Tally {
    pub fn merge(&mut self, other: &Tally) -> Result<()> {
        match (self, other) {
            (Tally::Seg(a), Tally::Seg(b)) => a.merge(b),
            (
                Tally::Ref { inter, union, iou_sum, n },
                Tally::Ref { inter: i, union: u, iou_sum: s, n: m },
            ) => {
                *inter += i;
                *union += u;
                *iou_sum += s;
                *n += m;
                Ok(())
            }
            (Tally::Depth(a), Tally::Depth(b)) => {
                a.merge(b);
                Ok(())
            }
            _ => Err(Error::Contract("merging tallies of different tasks".into())),
        }
    }

    pub fn finish(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        match self {
            Tally::Seg(c) => {
                out.insert("miou".into(), miou(c));
                out.insert("pixel_acc".into(), c.pixel_accuracy());
            }
            Tally::Ref { inter, union, iou_sum, n } => {
                out.insert("oiou".into(), oiou(&[*inter], &[*union]));
                out.insert("mean_iou".into(), iou_sum / (*n).max(1) as f64);
            }
            Tally::Depth(d) => {
                for (name, v) in d.finish().named() {
                    out.insert(name.into(), v);
                }
            }
        }
        out
    }
}

/// A sample's target mirrored to match its (possibly flipped) image.
pub fn oriented(t: &Target, side: usize, flip: bool) -> Target {
    if !flip {
        return t.clone();
    }
    match t {
        Target::Classes(v) => Target::Classes(hflip(v, side)),
        Target::Mask(v) => Target::Mask(hflip(v, side)),
        Target::Depth(v) => Target::Depth(hflip(v, side)),
    }
}

pub trait Task: Send + Sync {
    fn kind(&self) -> TaskKind;
    /// Generator used when a config names none.
    fn generator(&self) -> &'static str;
    /// Training loss of raw head output `[B, C, H, W]` against per-sample targets.
    fn loss(&self, cfg: &RunConfig, raw: &Tensor, targets: &[Target]) -> Result<Tensor>;
    /// Evaluation tally for a batch of raw outputs.
    fn tally(&self, cfg: &RunConfig, raw: &Tensor, samples: &[&Sample]) -> Result<Tally>;
}

fn labels(targets: &[Target]) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for t in targets {
        match t {
            Target::Classes(v) | Target::Mask(v) => out.extend_from_slice(v),
            Target::Depth(_) => return Err(Error::Contract("label targets expected".into())),
        }
    }
    Ok(out)
}

fn wrong_target(task: &str) -> Error {
    Error::Contract(format!("sample target does not match the {task} task"))
}

struct Semseg;

impl Task for Semseg {
    fn kind(&self) -> TaskKind {
        TaskKind::Semseg
    }

    fn generator(&self) -> &'static str {
        "shapes_semseg"
    }

    fn loss(&self, _: &RunConfig, raw: &Tensor, targets: &[Target]) -> Result<Tensor> {
        ce_loss(raw, &labels(targets)?)
    }

    fn tally(&self, _: &RunConfig, raw: &Tensor, samples: &[&Sample]) -> Result<Tally> {
        let (k, hw) = (raw.dim(1), raw.dim(2) * raw.dim(3));
        let r = raw.data();
        let mut conf = ConfusionState::new(k);
        for (j, s) in samples.iter().enumerate() {
            let Target::Classes(gt) = &s.target else { return Err(wrong_target("semseg")) };
            let pred: Vec<u32> = (0..hw)
                .map(|p| {
                    (0..k)
                        .max_by(|&a, &b| r[(j * k + a) * hw + p].total_cmp(&r[(j * k + b) * hw + p]))
                        .unwrap_or(0) as u32
                })
                .collect();
            conf.update(&pred, gt, IGNORE_INDEX)?;
        }
        Ok(Tally::Seg(conf))
    }
}

struct Refseg;

impl Task for Refseg {
    fn kind(&self) -> TaskKind {
        TaskKind::Refseg
    }

    fn generator(&self) -> &'static str {
        "shapes_refseg"
    }

    fn loss(&self, _: &RunConfig, raw: &Tensor, targets: &[Target]) -> Result<Tensor> {
        bce_loss(raw, &labels(targets)?)
    }

    fn tally(&self, _: &RunConfig, raw: &Tensor, samples: &[&Sample]) -> Result<Tally> {
        let hw = raw.dim(2) * raw.dim(3);
        let (mut inter, mut union, mut iou_sum) = (0, 0, 0.0);
        for (j, s) in samples.iter().enumerate() {
            let Target::Mask(gt) = &s.target else { return Err(wrong_target("refseg")) };
            let pred: Vec<bool> = raw.data()[j * hw..(j + 1) * hw].iter().map(|&v| v > 0.0).collect();
            let gt: Vec<bool> = gt.iter().map(|&m| m == 1).collect();
            let (i, u) = mask_iou_parts(&pred, &gt);
            inter += i;
            union += u;
            iou_sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        }
        Ok(Tally::Ref {
            inter,
            union,
            iou_sum,
            n: samples.len(),
        })
    }
}

struct Depth;

impl Task for Depth {
    fn kind(&self) -> TaskKind {
        TaskKind::Depth
    }

    fn generator(&self) -> &'static str {
        "layered_depth"
    }

    fn loss(&self, cfg: &RunConfig, raw: &Tensor, targets: &[Target]) -> Result<Tensor> {
        let mut gt = Vec::with_capacity(raw.numel());
        for t in targets {
            let Target::Depth(d) = t else { return Err(wrong_target("depth")) };
            gt.extend_from_slice(d);
        }
        let mask: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
        let gt = Tensor::new(gt, raw.shape())?;
        si_loss(&depth_from_logits(raw, cfg.depth_loss.max_depth), &gt, &mask, &cfg.depth_loss)
    }

    fn tally(&self, cfg: &RunConfig, raw: &Tensor, samples: &[&Sample]) -> Result<Tally> {
        let hw = raw.dim(2) * raw.dim(3);
        let pred = depth_from_logits(raw, cfg.depth_loss.max_depth);
        let mut acc = DepthAccumulator::default();
        for (j, s) in samples.iter().enumerate() {
            let Target::Depth(gt) = &s.target else { return Err(wrong_target("depth")) };
            let mask: Vec<bool> = gt.iter().map(|&d| d > 0.0).collect();
            acc.update(&pred.data()[j * hw..(j + 1) * hw], gt, &mask)?;
        }
        Ok(Tally::Depth(acc))
    }
}

pub fn tasks() -> &'static Registry<dyn Task> {
    static REG: OnceLock<Registry<dyn Task>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn Task> = Registry::new("task");
        r.register("semseg", Arc::new(Semseg))
            .register("refseg", Arc::new(Refseg))
            .register("depth", Arc::new(Depth));
        r
    })
}

pub fn task(kind: TaskKind) -> Result<Arc<dyn Task>> {
    tasks().get(kind.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_covers_every_kind() {
        for kind in TaskKind::ALL {
            let t = task(kind).unwrap();
            assert_eq!(t.kind(), kind);
            let gen = crate::data::generators().get(t.generator()).unwrap();
            assert_eq!(gen.task(), kind);
        }
    }

    #[test]
    fn perfect_semseg_logits_score_one() {
        let gt = vec![0u32, 1, 1, 0];
        let mut raw = vec![0.0f32; 8];
        for (p, &c) in gt.iter().enumerate() {
            raw[c as usize * 4 + p] = 5.0;
        }
        let raw = Tensor::new(raw, &[1, 2, 2, 2]).unwrap();
        let s = Sample {
            image: vec![],
            target: Target::Classes(gt),
            text: String::new(),
            classes: vec![],
        };
        let t = task(TaskKind::Semseg).unwrap();
        let m = t.tally(&RunConfig::default(), &raw, &[&s]).unwrap().finish();
        assert_eq!(m["miou"], 1.0);
    }

    #[test]
    fn mismatched_tallies_do_not_merge() {
        let mut a = Tally::Seg(ConfusionState::new(2));
        assert!(a.merge(&Tally::Depth(DepthAccumulator::default())).is_err());
    }

    #[test]
    fn orientation_flips_rows() {
        let t = Target::Mask(vec![1, 0, 0, 0]);
        assert_eq!(oriented(&t, 2, true), Target::Mask(vec![0, 1, 0, 0]));
    }
}

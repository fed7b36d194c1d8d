//! Cross-attention maps as explicit guidance: pick maps by block type,
//! average them per resolution, and append them to the backbone features.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::tensor::{Float, Tensor};
use crate::unet::{AttnLocation, AttnRecord, LEVELS};

/// Which attention records feed the guidance.
pub trait MapSource: Send + Sync {
    fn accepts(&self, location: AttnLocation) -> bool;
}

struct NoMaps;
impl MapSource for NoMaps {
    fn accepts(&self, _: AttnLocation) -> bool {
        false
    }
}

struct Blocks(&'static [AttnLocation]);
impl MapSource for Blocks {
    fn accepts(&self, location: AttnLocation) -> bool {
        self.0.contains(&location)
    }
}

/// Built-in sources: `none`, `mid`, `down`, `up`, `up_down`.
pub fn sources() -> &'static Registry<dyn MapSource> {
    static REG: OnceLock<Registry<dyn MapSource>> = OnceLock::new();
    REG.get_or_init(|| {
        use AttnLocation::*;
        let mut r: Registry<dyn MapSource> = Registry::new("guidance source");
        r.register("none", Arc::new(NoMaps))
            .register("mid", Arc::new(Blocks(&[Mid])))
            .register("down", Arc::new(Blocks(&[Down])))
            .register("up", Arc::new(Blocks(&[Up])))
            .register("up_down", Arc::new(Blocks(&[Up, Down])));
        r
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Registered source name.
    pub source: String,
    /// Drop maps at the coarsest level.
    pub exclude_lowest: bool,
    /// Off: features go to the head unchanged whatever the source.
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            source: "up_down".into(),
            exclude_lowest: true,
            enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn off() -> Self {
        Self {
            source: "none".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        sources().get(&self.source).map(|_| ())
    }

    fn included(&self, level: usize) -> bool {
        !(self.exclude_lowest && level == 1)
    }

    /// Levels that will carry an averaged map, given which levels have records
    /// of each location.
    pub fn guided_levels(&self, available: &[(AttnLocation, usize)]) -> Result<Vec<usize>> {
        if !self.enabled {
            return Ok(Vec::new());
        }
        let src = sources().get(&self.source)?;
        let mut levels: Vec<usize> = available
            .iter()
            .filter(|(loc, lvl)| src.accepts(*loc) && self.included(*lvl))
            .map(|&(_, lvl)| lvl)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        Ok(levels)
    }

    /// Head input width per level after fusing: `channels[i] + |S|` on guided
    /// levels.
    pub fn fused_widths(
        &self,
        feature_channels: &[usize],
        prompts: usize,
        available: &[(AttnLocation, usize)],
    ) -> Result<Vec<usize>> {
        let guided = self.guided_levels(available)?;
        Ok(feature_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| if guided.contains(&(i + 1)) { c + prompts } else { c })
            .collect())
    }
}

/// Arithmetic mean of the selected records per level, over layers and heads.
pub fn average_maps<T: Float>(
    records: &[AttnRecord<T>],
    cfg: &GuidanceConfig,
) -> Result<BTreeMap<usize, Tensor<T>>> {
    let mut out = BTreeMap::new();
    if !cfg.enabled {
        return Ok(out);
    }
    let src = sources().get(&cfg.source)?;
    let mut grouped: BTreeMap<usize, Vec<&Tensor<T>>> = BTreeMap::new();
    for r in records {
        if src.accepts(r.location) && cfg.included(r.level) {
            grouped.entry(r.level).or_default().push(&r.map);
        }
    }
    for (level, maps) in grouped {
        let mut acc = maps[0].clone();
        for m in &maps[1..] {
            if m.shape() != acc.shape() {
                return Err(Error::dim(
                    "average_maps",
                    format!("level {level} maps {:?} and {:?}", acc.shape(), m.shape()),
                ));
            }
            acc = acc.add(m)?;
        }
        if maps.len() > 1 {
            acc = acc.scale(1.0 / maps.len() as f64);
        }
        out.insert(level, acc);
    }
    Ok(out)
}

/// `F_i <- [F_i, A_i]` along channels; `features[i]` is level `i + 1`.
pub fn fuse<T: Float>(
    features: &[Tensor<T>],
    maps: &BTreeMap<usize, Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    if let Some(&level) = maps.keys().find(|&&l| l == 0 || l > features.len()) {
        return Err(Error::dim(
            "fuse",
            format!("map for level {level} but {} feature levels", features.len()),
        ));
    }
    features
        .iter()
        .enumerate()
        .map(|(i, f)| match maps.get(&(i + 1)) {
            None => Ok(f.clone()),
            Some(a) => {
                if a.rank() != 4 || f.rank() != 4 || a.dim(0) != f.dim(0) || a.shape()[2..] != f.shape()[2..] {
                    return Err(Error::dim(
                        "fuse",
                        format!("level {}: features {:?} vs map {:?}", i + 1, f.shape(), a.shape()),
                    ));
                }
                Tensor::concat_channels(&[f.clone(), a.clone()])
            }
        })
        .collect()
}

/// `(location, level)` of every map the default backbone captures.
pub fn backbone_map_sites() -> Vec<(AttnLocation, usize)> {
    let mut sites: Vec<_> = (2..=LEVELS).map(|l| (AttnLocation::Down, l)).collect();
    sites.push((AttnLocation::Mid, 1));
    sites.extend((2..=LEVELS).map(|l| (AttnLocation::Up, l)));
    sites
}

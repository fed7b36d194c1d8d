use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, SeededRng, Tensor};

/// Learning-rate group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LrGroup {
    #[serde(rename = "base")]
    Base,
    /// Pretrained backbone, trained at a fraction of the base rate.
    #[serde(rename = "backbone_0.1x")]
    Backbone,
}

pub struct Param<T: Float> {
    name: String,
    value: RwLock<Tensor<T>>,
    frozen: AtomicBool,
    group: RwLock<LrGroup>,
}

impl<T: Float> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.shape())
            .field("frozen", &self.is_frozen())
            .finish()
    }
}

impl<T: Float> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current value as a graph leaf; collects gradients unless frozen.
    pub fn tensor(&self) -> Tensor<T> {
        self.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn group(&self) -> LrGroup {
        *self.group.read().expect("param lock")
    }

    pub fn set_group(&self, group: LrGroup) {
        *self.group.write().expect("param lock") = group;
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::Relaxed);
        let data = self.tensor().to_vec();
        self.replace(data);
    }

    /// Overwrites the value; the shape is kept.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(
                "param",
                format!("{}: {} values for shape {shape:?}", self.name, data.len()),
            ));
        }
        self.replace(data);
        Ok(())
    }

    /// Installs `t` as the value as-is (used to route gradient probes
    /// through a parameter).
    pub fn set_tensor(&self, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.shape() {
            return Err(Error::dim(
                "param",
                format!("{}: shape {:?} != {:?}", self.name, t.shape(), self.shape()),
            ));
        }
        *self.value.write().expect("param lock") = t;
        Ok(())
    }

    fn replace(&self, data: Vec<T>) {
        let shape = self.shape();
        let t = if self.is_frozen() {
            Tensor::new(data, &shape)
        } else {
            Tensor::param(data, &shape)
        }
        .expect("shape preserved");
        *self.value.write().expect("param lock") = t;
    }
}

/// Ordered name → parameter map shared by every module built from it.
#[derive(Clone)]
pub struct ParamStore<T: Float = f32> {
    params: Arc<RwLock<IndexMap<String, Arc<Param<T>>>>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Arc::new(RwLock::new(IndexMap::new())),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, name: &str, value: Tensor<T>, group: LrGroup) -> Result<Arc<Param<T>>> {
        let mut map = self.params.write().expect("store lock");
        if map.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` defined twice")));
        }
        let p = Arc::new(Param {
            name: name.to_string(),
            value: RwLock::new(value.detach().to_param()),
            frozen: AtomicBool::new(false),
            group: RwLock::new(group),
        });
        map.insert(name.to_string(), p.clone());
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<Arc<Param<T>>> {
        self.params.read().expect("store lock").get(name).cloned()
    }

    pub fn all(&self) -> Vec<Arc<Param<T>>> {
        self.params.read().expect("store lock").values().cloned().collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<Arc<Param<T>>> {
        self.all()
            .into_iter()
            .filter(|p| p.name.starts_with(prefix))
            .collect()
    }

    pub fn trainable(&self) -> Vec<Arc<Param<T>>> {
        self.all().into_iter().filter(|p| !p.is_frozen()).collect()
    }

    pub fn set_frozen(&self, prefix: &str, frozen: bool) {
        for p in self.with_prefix(prefix) {
            p.set_frozen(frozen);
        }
    }

    pub fn set_group(&self, prefix: &str, group: LrGroup) {
        for p in self.with_prefix(prefix) {
            p.set_group(group);
        }
    }

    pub fn zero_grad(&self) {
        for p in self.all() {
            p.tensor().zero_grad();
        }
    }

    pub fn len(&self) -> usize {
        self.params.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn numel(&self) -> usize {
        self.all().iter().map(|p| p.tensor().numel()).sum()
    }

    /// Name → values snapshot.
    pub fn snapshot(&self) -> IndexMap<String, Vec<T>> {
        self.all()
            .into_iter()
            .map(|p| (p.name.clone(), p.tensor().to_vec()))
            .collect()
    }
}

/// Builder handing out parameters under a dotted name prefix. Each tensor's
/// initial values depend only on the seed and its full name, so adding or
/// removing modules leaves the other initialisations untouched.
#[derive(Clone)]
pub struct VarBuilder<T: Float = f32> {
    store: ParamStore<T>,
    prefix: String,
    group: LrGroup,
    seed: u64,
}

impl<T: Float> VarBuilder<T> {
    pub fn new(store: &ParamStore<T>, seed: u64) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            group: LrGroup::Base,
            seed,
        }
    }

    /// Child builder for `<prefix>.<name>`.
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn with_group(&self, group: LrGroup) -> Self {
        Self {
            group,
            ..self.clone()
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn rng_for(&self, full: &str) -> SeededRng {
        // FNV-1a, stable across platforms and releases
        let h = full
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        SeededRng::new(self.seed ^ h)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Arc<Param<T>>> {
        let full = self.full_name(name);
        let t = self.rng_for(&full).uniform_tensor(shape, bound);
        self.store.insert(&full, t, self.group)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Arc<Param<T>>> {
        let full = self.full_name(name);
        let mut rng = self.rng_for(&full);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.normal() * std)).collect();
        self.store.insert(&full, Tensor::new(data, shape)?, self.group)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Arc<Param<T>>> {
        self.store
            .insert(&self.full_name(name), Tensor::full(shape, T::of(value)), self.group)
    }
}

//! Procedural datasets: coloured primitives on textured backgrounds for
//! segmentation, positional referring expressions, and layered planar scenes
//! with analytic depth.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use diffperc_core::registry::Registry;
use diffperc_core::task::TaskKind;
use diffperc_core::tensor::SeededRng;
use diffperc_core::text::Vocabulary;
use diffperc_core::{Error, Result, Tensor};

pub const SHAPE_NAMES: [&str; 7] = ["circle", "square", "triangle", "diamond", "cross", "ring", "star"];
pub const BACKGROUND: &str = "background";
pub const SCENE_NAMES: [&str; 4] = ["kitchen", "bathroom", "bedroom", "office"];
pub const POSITIONS: [&str; 3] = ["left", "middle", "right"];
pub const MAX_DEPTH: f32 = 10.0;

/// Generator spec as found in a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Registered generator name.
    pub name: String,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Semseg class count including background.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_side() -> usize {
    64
}

fn default_classes() -> usize {
    6
}

impl DatasetSpec {
    pub fn new(name: &str, n: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            n,
            seed,
            side: default_side(),
            classes: default_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Per-pixel class ids.
    Classes(Vec<u32>),
    /// Per-pixel 0/1.
    Mask(Vec<u32>),
    Depth(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, side, side]` in `[0, 1]`.
    pub image: Vec<f32>,
    pub target: Target,
    /// Caption, referring expression or scene prompt.
    pub text: String,
    /// Class ids present (semseg), scene id (depth) or referred shape (refseg).
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub task: TaskKind,
    pub side: usize,
    /// Semseg classes, scene names or shape names.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[B, 3, side, side]`, optionally mirrored per sample.
    pub fn images(&self, idx: &[usize], flip: &[bool]) -> Result<Tensor> {
        let s = self.side;
        let mut data = Vec::with_capacity(idx.len() * 3 * s * s);
        for (k, &i) in idx.iter().enumerate() {
            let img = &self.samples[i].image;
            if flip.get(k).copied().unwrap_or(false) {
                for row in img.chunks(s) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        Tensor::new(data, &[idx.len(), 3, s, s])
    }
}

/// Mirror a row-major `side x side` plane left to right.
pub fn hflip<X: Copy>(plane: &[X], side: usize) -> Vec<X> {
    plane.chunks(side).flat_map(|r| r.iter().rev().copied()).collect()
}

/// A procedural dataset source.
pub trait Generator: Send + Sync {
    fn task(&self) -> TaskKind;
    fn generate(&self, spec: &DatasetSpec) -> Result<Dataset>;
}

pub fn generators() -> &'static Registry<dyn Generator> {
    static REG: OnceLock<Registry<dyn Generator>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn Generator> = Registry::new("dataset generator");
        r.register("shapes_semseg", Arc::new(ShapesSemseg))
            .register("shapes_refseg", Arc::new(ShapesRefseg))
            .register("layered_depth", Arc::new(LayeredDepth));
        r
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    generators().get(&spec.name)?.generate(spec)
}

/// Every word any generator or prompt template can produce.
pub fn default_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = vec!["a", "photo", "of", "the", BACKGROUND];
    words.extend(SHAPE_NAMES);
    words.extend(SCENE_NAMES);
    words.extend(POSITIONS);
    Vocabulary::from_words(words)
}

/// Every expression the refseg grammar can produce.
pub fn refseg_expressions() -> Vec<String> {
    POSITIONS
        .iter()
        .flat_map(|p| SHAPE_NAMES.iter().map(move |s| format!("the {p} {s}")))
        .collect()
}

fn sample_rng(seed: u64, i: usize) -> SeededRng {
    SeededRng::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 + 1))
}

fn check_side(spec: &DatasetSpec) -> Result<()> {
    if spec.side < 16 || spec.side % 8 != 0 {
        return Err(Error::Config(format!("image side {} must be a multiple of 8, >= 16", spec.side)));
    }
    Ok(())
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Desaturated sinusoidal texture with pixel noise.
fn textured_background(rng: &mut SeededRng, side: usize, tint: f64, base: f64) -> Vec<f32> {
    let (fx, fy) = (rng.range(0.1, 0.5), rng.range(0.1, 0.5));
    let (px, py) = (rng.range(0.0, 2.0 * PI), rng.range(0.0, 2.0 * PI));
    let mut img = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let v = base + 0.1 * (fx * x as f64 + px).sin() * (fy * y as f64 + py).cos() + rng.range(-0.05, 0.05);
            let c = hsv(tint, 0.15, v.clamp(0.0, 1.0));
            for ch in 0..3 {
                img[ch * side * side + y * side + x] = c[ch];
            }
        }
    }
    img
}

/// Primitive footprint test in coordinates normalised by the radius;
/// every shape lies inside the unit box.
pub fn shape_contains(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.9) / 1.7,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        5 => (0.3025..=1.0).contains(&(u * u + v * v)),
        _ => {
            let rho = (u * u + v * v).sqrt();
            rho <= 0.55 + 0.4 * (5.0 * v.atan2(u)).cos()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Placed {
    pub shape: usize,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub color: [f32; 3],
}

impl Placed {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let u = (x as f64 + 0.5 - self.cx) / self.r;
        let v = (y as f64 + 0.5 - self.cy) / self.r;
        u.abs() <= 1.0 && v.abs() <= 1.0 && shape_contains(self.shape, u, v)
    }
}

/// Draws `objs` in order; returns for each pixel the index of the topmost.
fn paint(img: &mut [f32], side: usize, objs: &[Placed], rng: &mut SeededRng) -> Vec<Option<usize>> {
    let mut top = vec![None; side * side];
    for (k, o) in objs.iter().enumerate() {
        for y in 0..side {
            for x in 0..side {
                if o.contains(x, y) {
                    top[y * side + x] = Some(k);
                    for ch in 0..3 {
                        let n = rng.range(-0.03, 0.03) as f32;
                        img[ch * side * side + y * side + x] = (o.color[ch] + n).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    top
}

pub struct ShapesSemseg;

impl ShapesSemseg {
    pub fn class_names(k: usize) -> Vec<String> {
        std::iter::once(BACKGROUND)
            .chain(SHAPE_NAMES)
            .take(k)
            .map(String::from)
            .collect()
    }

    fn sample(spec: &DatasetSpec, i: usize) -> Sample {
        let side = spec.side;
        let k = spec.classes;
        let mut rng = sample_rng(spec.seed, i);
        let tint = rng.range(0.0, 360.0);
        let base = rng.range(0.3, 0.55);
        let mut img = textured_background(&mut rng, side, tint, base);
        let count = 1 + rng.below(3);
        let s = side as f64;
        let objs: Vec<Placed> = (0..count)
            .map(|j| {
                // the first object cycles through the classes so each appears
                let class = if j == 0 { 1 + i % (k - 1) } else { 1 + rng.below(k - 1) };
                let r = rng.range(0.16, 0.28) * s;
                let hue = 360.0 * (class - 1) as f64 / (k - 1) as f64 + rng.range(-8.0, 8.0);
                Placed {
                    shape: class - 1,
                    cx: rng.range(0.8 * r, s - 0.8 * r),
                    cy: rng.range(0.8 * r, s - 0.8 * r),
                    r,
                    color: hsv(hue, rng.range(0.65, 0.9), rng.range(0.7, 0.95)),
                }
            })
            .collect();
        let top = paint(&mut img, side, &objs, &mut rng);
        let labels: Vec<u32> = top
            .iter()
            .map(|t| t.map_or(0, |o| objs[o].shape as u32 + 1))
            .collect();
        let mut present: Vec<u32> = labels.clone();
        present.sort_unstable();
        present.dedup();
        let names = Self::class_names(k);
        let text = present
            .iter()
            .map(|&c| names[c as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Sample {
            image: img,
            target: Target::Classes(labels),
            text,
            classes: present,
        }
    }
}

impl Generator for ShapesSemseg {
    fn task(&self) -> TaskKind {
        TaskKind::Semseg
    }

    fn generate(&self, spec: &DatasetSpec) -> Result<Dataset> {
        check_side(spec)?;
        if spec.classes < 2 || spec.classes > SHAPE_NAMES.len() + 1 {
            return Err(Error::Config(format!(
                "shapes_semseg supports 2..={} classes, got {}",
                SHAPE_NAMES.len() + 1,
                spec.classes
            )));
        }
        let samples = (0..spec.n).into_par_iter().map(|i| Self::sample(spec, i)).collect();
        Ok(Dataset {
            spec: spec.clone(),
            task: TaskKind::Semseg,
            side: spec.side,
            class_names: Self::class_names(spec.classes),
            samples,
        })
    }
}

/// Two or three primitives in disjoint vertical strips.
#[derive(Clone, Debug, PartialEq)]
pub struct RefScene {
    pub background: Vec<f32>,
    /// Left to right.
    pub objects: Vec<Placed>,
}

pub struct ShapesRefseg;

impl ShapesRefseg {
    pub fn scene(rng: &mut SeededRng, side: usize) -> RefScene {
        let s = side as f64;
        let tint = rng.range(0.0, 360.0);
        let background = textured_background(rng, side, tint, 0.4);
        let n = 2 + rng.below(2);
        let strip = s / n as f64;
        let objects = (0..n)
            .map(|j| {
                let r = rng.range(0.3, 0.45) * strip;
                Placed {
                    shape: rng.below(SHAPE_NAMES.len()),
                    cx: strip * (j as f64 + 0.5) + rng.range(-2.0, 2.0).clamp(-(strip / 2.0 - r), strip / 2.0 - r),
                    cy: rng.range(r, s - r),
                    r,
                    color: hsv(rng.range(0.0, 360.0), rng.range(0.6, 0.9), rng.range(0.7, 0.95)),
                }
            })
            .collect();
        RefScene { background, objects }
    }

    pub fn expression(scene: &RefScene, target: usize) -> String {
        let pos = match (scene.objects.len(), target) {
            (2, 0) => "left",
            (2, _) => "right",
            (_, t) => POSITIONS[t.min(2)],
        };
        format!("the {pos} {}", SHAPE_NAMES[scene.objects[target].shape])
    }

    /// Image and mask of `target` for a scene.
    pub fn render(scene: &RefScene, target: usize, side: usize, rng: &mut SeededRng) -> (Vec<f32>, Vec<u32>) {
        let mut img = scene.background.clone();
        let top = paint(&mut img, side, &scene.objects, rng);
        let mask = top.iter().map(|t| (*t == Some(target)) as u32).collect();
        (img, mask)
    }
}

impl Generator for ShapesRefseg {
    fn task(&self) -> TaskKind {
        TaskKind::Refseg
    }

    fn generate(&self, spec: &DatasetSpec) -> Result<Dataset> {
        check_side(spec)?;
        let side = spec.side;
        let samples = (0..spec.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = sample_rng(spec.seed, i);
                let scene = Self::scene(&mut rng, side);
                let target = rng.below(scene.objects.len());
                let (image, mask) = Self::render(&scene, target, side, &mut rng);
                Sample {
                    image,
                    target: Target::Mask(mask),
                    text: Self::expression(&scene, target),
                    classes: vec![scene.objects[target].shape as u32],
                }
            })
            .collect();
        Ok(Dataset {
            spec: spec.clone(),
            task: TaskKind::Refseg,
            side,
            class_names: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
            samples,
        })
    }
}

/// `d(x, y) = d0 + gx·(x − cx) + gy·(y − cy)` at pixel centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub d0: f64,
    pub gx: f64,
    pub gy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Plane {
    pub fn depth(&self, x: usize, y: usize) -> f64 {
        self.d0 + self.gx * (x as f64 + 0.5 - self.cx) + self.gy * (y as f64 + 0.5 - self.cy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub footprint: Placed,
    pub plane: Plane,
}

/// Background plane plus primitives listed far to near (drawing order).
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredScene {
    pub scene: usize,
    pub background: Plane,
    pub layers: Vec<Layer>,
}

pub struct LayeredDepth;

impl LayeredDepth {
    const BASE_DEPTH: [f64; 4] = [5.0, 3.5, 4.5, 6.5];
    const SCENE_HUE: [f64; 4] = [30.0, 190.0, 300.0, 100.0];

    pub fn scene(rng: &mut SeededRng, scene: usize, side: usize) -> LayeredScene {
        let s = side as f64;
        let base = Self::BASE_DEPTH[scene];
        let background = Plane {
            d0: base,
            gx: 0.0,
            gy: -2.5 / s,
            cx: s / 2.0,
            cy: s / 2.0,
        };
        let n = 1 + rng.below(3);
        let mut layers: Vec<Layer> = (0..n)
            .map(|_| {
                let r = rng.range(0.12, 0.25) * s;
                let (cx, cy) = (rng.range(r, s - r), rng.range(r, s - r));
                Layer {
                    footprint: Placed {
                        shape: [0, 1, 3][rng.below(3)],
                        cx,
                        cy,
                        r,
                        color: hsv(rng.range(0.0, 360.0), rng.range(0.5, 0.8), 0.9),
                    },
                    plane: Plane {
                        d0: rng.range(1.2, base - 1.0),
                        gx: rng.range(-0.01, 0.01),
                        gy: rng.range(-0.01, 0.01),
                        cx,
                        cy,
                    },
                }
            })
            .collect();
        layers.sort_by(|a, b| b.plane.d0.total_cmp(&a.plane.d0));
        LayeredScene {
            scene,
            background,
            layers,
        }
    }

    /// Painter's algorithm: image shaded by depth, and the depth map.
    pub fn render(sc: &LayeredScene, side: usize, rng: &mut SeededRng) -> (Vec<f32>, Vec<f32>) {
        let hw = side * side;
        let mut img = vec![0.0f32; 3 * hw];
        let mut depth = vec![0.0f32; hw];
        let tint = Self::SCENE_HUE[sc.scene];
        for y in 0..side {
            for x in 0..side {
                let d = sc.background.depth(x, y);
                let stripe = 0.05 * ((x / 4 + y / 4) % 2) as f64;
                let c = hsv(tint, 0.35, (1.0 - 0.08 * d + stripe + rng.range(-0.03, 0.03)).clamp(0.0, 1.0));
                for ch in 0..3 {
                    img[ch * hw + y * side + x] = c[ch];
                }
                depth[y * side + x] = d as f32;
            }
        }
        for layer in &sc.layers {
            let f = &layer.footprint;
            for y in 0..side {
                for x in 0..side {
                    if f.contains(x, y) {
                        let d = layer.plane.depth(x, y);
                        let shade = (1.1 - 0.08 * d) as f32;
                        for ch in 0..3 {
                            img[ch * hw + y * side + x] = (f.color[ch] * shade).clamp(0.0, 1.0);
                        }
                        depth[y * side + x] = d as f32;
                    }
                }
            }
        }
        (img, depth)
    }
}

impl Generator for LayeredDepth {
    fn task(&self) -> TaskKind {
        TaskKind::Depth
    }

    fn generate(&self, spec: &DatasetSpec) -> Result<Dataset> {
        check_side(spec)?;
        let side = spec.side;
        let samples = (0..spec.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = sample_rng(spec.seed, i);
                let scene = i % SCENE_NAMES.len();
                let sc = Self::scene(&mut rng, scene, side);
                let (image, depth) = Self::render(&sc, side, &mut rng);
                Sample {
                    image,
                    target: Target::Depth(depth),
                    text: SCENE_NAMES[scene].to_string(),
                    classes: vec![scene as u32],
                }
            })
            .collect();
        Ok(Dataset {
            spec: spec.clone(),
            task: TaskKind::Depth,
            side,
            class_names: SCENE_NAMES.iter().map(|s| s.to_string()).collect(),
            samples,
        })
    }
}

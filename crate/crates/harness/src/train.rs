//! Training stages: codec, toy text-to-image pretraining, perception.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{ensure, Context};
use rayon::prelude::*;

use diffperc_core::diffusion::NoiseSchedule;
use diffperc_core::metrics::{flip_average, slide_inference};
use diffperc_core::nn::LrGroup;
use diffperc_core::task::TaskKind;
use diffperc_core::tensor::{no_grad, SeededRng};
use diffperc_core::text::{build_prompts, ConditioningFeatures, PromptSet, Vocabulary};
use diffperc_core::Tensor;

use crate::checkpoint::{Checkpoint, Stage, Trailer};
use crate::config::RunConfig;
use crate::data::{self, Dataset, DatasetSpec, Sample, Target};
use crate::io::MetricsLog;
use crate::model::{predict, perceive, Conditioner, Model, CODEC, NULL, NULL_PROMPT, TEXT, UNET};
use crate::optim::AdamW;
use crate::tasks::{oriented, task, Tally};

/// Result of one training stage.
pub struct StageRun {
    pub model: Model,
    pub log: MetricsLog,
    pub checkpoint: Checkpoint,
    pub summary: BTreeMap<String, f64>,
}

/// Epoch-wise shuffled batches with random horizontal flips.
struct Batcher {
    rng: SeededRng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, rng: SeededRng) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, b: usize) -> (Vec<usize>, Vec<bool>) {
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        let flip = (0..b).map(|_| self.rng.uniform() < 0.5).collect();
        (idx, flip)
    }
}

/// Latents of every sample, unflipped and flipped.
struct LatentCache {
    shape: [usize; 3],
    z: Vec<[Vec<f32>; 2]>,
}

impl LatentCache {
    fn build(model: &Model, ds: &Dataset) -> anyhow::Result<Self> {
        let chunks: Vec<Vec<usize>> = (0..ds.len()).collect::<Vec<_>>().chunks(32).map(<[usize]>::to_vec).collect();
        let encoded = chunks
            .par_iter()
            .map(|idx| -> diffperc_core::Result<Vec<[Vec<f32>; 2]>> {
                let a = model.encode(&ds.images(idx, &[])?)?;
                let b = model.encode(&ds.images(idx, &vec![true; idx.len()])?)?;
                let per = a.numel() / idx.len();
                Ok((0..idx.len())
                    .map(|k| [a.data()[k * per..(k + 1) * per].to_vec(), b.data()[k * per..(k + 1) * per].to_vec()])
                    .collect())
            })
            .collect::<diffperc_core::Result<Vec<_>>>()?;
        let probe = model.encode(&ds.images(&[0], &[])?)?;
        Ok(Self {
            shape: [probe.dim(1), probe.dim(2), probe.dim(3)],
            z: encoded.into_iter().flatten().collect(),
        })
    }

    fn batch(&self, idx: &[usize], flip: &[bool]) -> diffperc_core::Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.z[0][0].len());
        for (&i, &f) in idx.iter().zip(flip) {
            data.extend_from_slice(&self.z[i][f as usize]);
        }
        let [c, h, w] = self.shape;
        Tensor::new(data, &[idx.len(), c, h, w])
    }
}

fn schedule(cfg: &RunConfig) -> anyhow::Result<NoiseSchedule> {
    let p = &cfg.pretrain;
    Ok(NoiseSchedule::linear(p.timesteps, p.beta_start, p.beta_end)?)
}

fn trailer(stage: Stage, cfg: &RunConfig, model: &Model, rng: &SeededRng, step: u64, prompt_rows: usize) -> Trailer {
    Trailer {
        stage,
        config: cfg.clone(),
        flags: Default::default(),
        rng: rng.state(),
        step,
        vocab: model.vocab.to_text(),
        prompt_rows,
    }
}

fn vocab_of(ck: &Checkpoint) -> anyhow::Result<Arc<Vocabulary>> {
    Ok(Arc::new(Vocabulary::parse(&ck.trailer.vocab)?))
}

/// Images from every generator so the codec sees all task domains.
fn codec_datasets(cfg: &RunConfig) -> anyhow::Result<Vec<Dataset>> {
    let base = &cfg.pretrain.dataset;
    let per = (base.n / 3).max(1);
    ["shapes_semseg", "shapes_refseg", "layered_depth"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let spec = DatasetSpec {
                name: name.to_string(),
                n: per,
                seed: base.seed.wrapping_add(k as u64 * 7919),
                ..base.clone()
            };
            Ok(data::generate(&spec)?)
        })
        .collect()
}

/// Autoencoder training on reconstruction MSE; finishes by setting the latent
/// scale to the reciprocal latent standard deviation.
pub fn pretrain_codec(cfg: &RunConfig, vocab: Vocabulary, run_id: &str) -> anyhow::Result<StageRun> {
    cfg.validate()?;
    let model = Model::backbone(cfg, Arc::new(vocab), cfg.seed)?;
    for p in model.store.all() {
        p.set_frozen(!p.name().starts_with(CODEC));
    }
    // calibrated after training, never learned
    model.codec.latent_scale().set_frozen(true);
    let sets = codec_datasets(cfg)?;
    let iters = cfg.pretrain.codec_iters;
    let mut rng = SeededRng::new(cfg.seed ^ 0xc0dec);
    let mut batchers: Vec<Batcher> = sets.iter().map(|d| Batcher::new(d.len(), rng.fork())).collect();
    let mut opt = AdamW::new(&cfg.optimizer);
    let params = model.store.all();
    let mut log = MetricsLog::default();
    let log_every = (iters / 200).max(1);
    for step in 0..iters {
        let k = step % sets.len();
        let (idx, flip) = batchers[k].next(cfg.batch_size);
        let x = sets[k].images(&idx, &flip)?;
        let loss = model.codec.reconstruction_loss(&x)?;
        loss.backward()?;
        let lr = cfg.lr_schedule.lr_at(cfg.pretrain.codec_lr, step, iters);
        opt.step(&params, |_| lr);
        if step % log_every == 0 || step + 1 == iters {
            log.push(run_id, step as u64, "recon_loss", loss.item()? as f64);
        }
    }
    let std = {
        let _g = no_grad();
        let mut vals = Vec::new();
        for ds in &sets {
            let idx: Vec<usize> = (0..ds.len().min(64)).collect();
            vals.extend(model.codec.encode(&ds.images(&idx, &[])?)?.to_f64_vec());
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    };
    model.codec.latent_scale().set_data(vec![(1.0 / std.max(1e-6)) as f32])?;
    let mut summary = BTreeMap::new();
    summary.insert("recon_loss".into(), log.last("recon_loss").unwrap_or(f64::NAN));
    summary.insert("latent_std".into(), std);
    log.push(run_id, iters as u64, "latent_std", std);
    let checkpoint = Checkpoint::capture(&model.store, &Default::default(), trailer(Stage::Codec, cfg, &model, &rng, iters as u64, 0));
    Ok(StageRun {
        model,
        log,
        checkpoint,
        summary,
    })
}

/// Per-sample `sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·eps` for a batch.
fn noised(z0: &Tensor, eps: &Tensor, ts: &[usize], s: &NoiseSchedule) -> diffperc_core::Result<Tensor> {
    let per = z0.numel() / ts.len();
    let mut out = Vec::with_capacity(z0.numel());
    for (b, &t) in ts.iter().enumerate() {
        let ab = s.alpha_bar(t)?;
        let (a, c) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let zs = &z0.data()[b * per..(b + 1) * per];
        let es = &eps.data()[b * per..(b + 1) * per];
        out.extend(zs.iter().zip(es).map(|(z, e)| a * z + c * e));
    }
    Tensor::new(out, z0.shape())
}

/// Caption keys: every class prompt plus the null row; each sample may attend
/// to the classes it shows, or only to the null row when its caption is dropped.
struct Captions {
    prompts: PromptSet,
    null_row: usize,
}

impl Captions {
    fn new(ds: &Dataset) -> anyhow::Result<Self> {
        let mut entries = build_prompts(&ds.class_names, TaskKind::Semseg)?.entries().to_vec();
        entries.push(NULL_PROMPT.into());
        Ok(Self {
            null_row: entries.len() - 1,
            prompts: PromptSet::new(entries)?,
        })
    }

    fn features(&self, model: &Model) -> anyhow::Result<ConditioningFeatures<f32>> {
        let rows = self.prompts.entries()[..self.null_row]
            .iter()
            .map(|p| model.text.encode_one(p))
            .chain(std::iter::once(Ok(model.null_prompt.tensor())))
            .collect::<diffperc_core::Result<Vec<_>>>()?;
        Ok(ConditioningFeatures::new(Tensor::concat(&rows, 0)?, self.prompts.clone())?)
    }

    fn mask(&self, present: &[&[u32]], dropped: &[bool]) -> diffperc_core::Result<Tensor> {
        let s = self.prompts.len();
        let mut m = vec![-1e9f32; present.len() * s];
        for (b, (cls, &drop)) in present.iter().zip(dropped).enumerate() {
            if drop {
                m[b * s + self.null_row] = 0.0;
            } else {
                for &c in *cls {
                    m[b * s + c as usize] = 0.0;
                }
            }
        }
        Tensor::new(m, &[present.len(), s])
    }
}

/// Held-out denoising loss on fixed samples, timesteps and noise.
fn dm_eval(model: &Model, caps: &Captions, cache: &LatentCache, ds: &Dataset, sched: &NoiseSchedule) -> anyhow::Result<f64> {
    let _g = no_grad();
    let mut rng = SeededRng::new(0xe7a1);
    let n = ds.len().min(64);
    let cond = caps.features(model)?;
    let mut total = 0.0;
    let mut batches = 0;
    for start in (0..n).step_by(16) {
        let idx: Vec<usize> = (start..(start + 16).min(n)).collect();
        let z0 = cache.batch(&idx, &vec![false; idx.len()])?;
        let ts: Vec<usize> = idx.iter().map(|_| 1 + rng.below(sched.steps())).collect();
        let eps: Tensor = rng.randn(z0.shape());
        let present: Vec<&[u32]> = idx.iter().map(|&i| ds.samples[i].classes.as_slice()).collect();
        let mask = caps.mask(&present, &vec![false; idx.len()])?;
        let out = model.unet.forward_masked(&noised(&z0, &eps, &ts, sched)?, &ts, &cond, Some(&mask))?;
        total += model.unet.noise_from_features(&out)?.mse(&eps)?.item()? as f64;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains the UNet, text encoder and null prompt on the denoising objective
/// with per-image captions; the codec stays fixed.
pub fn pretrain_toy(cfg: &RunConfig, codec: &Checkpoint, run_id: &str) -> anyhow::Result<StageRun> {
    cfg.validate()?;
    codec.require(&[CODEC]).context("pretraining needs a codec checkpoint")?;
    let model = Model::backbone(cfg, vocab_of(codec)?, cfg.seed)?;
    codec.load_into(&model.store, &[CODEC])?;
    model.apply_pretrain_policy();
    let ds = data::generate(&cfg.pretrain.dataset)?;
    ensure!(ds.task == TaskKind::Semseg, "toy pretraining needs a captioned shapes dataset");
    let cache = LatentCache::build(&model, &ds)?;
    let caps = Captions::new(&ds)?;
    let sched = schedule(cfg)?;
    let iters = cfg.pretrain.toy_iters;
    let mut rng = SeededRng::new(cfg.seed ^ 0x70f);
    let mut batcher = Batcher::new(ds.len(), rng.fork());
    let mut opt = AdamW::new(&cfg.optimizer);
    let params = model.store.all();
    let mut log = MetricsLog::default();
    let initial = dm_eval(&model, &caps, &cache, &ds, &sched)?;
    log.push(run_id, 0, "dm_loss_eval", initial);
    let log_every = (iters / 200).max(1);
    for step in 0..iters {
        let (idx, flip) = batcher.next(cfg.batch_size);
        let z0 = cache.batch(&idx, &flip)?;
        let ts: Vec<usize> = idx.iter().map(|_| 1 + rng.below(sched.steps())).collect();
        let eps: Tensor = rng.randn(z0.shape());
        let dropped: Vec<bool> = idx.iter().map(|_| rng.uniform() < cfg.pretrain.caption_dropout).collect();
        let present: Vec<&[u32]> = idx.iter().map(|&i| ds.samples[i].classes.as_slice()).collect();
        let cond = caps.features(&model)?;
        let mask = caps.mask(&present, &dropped)?;
        let out = model.unet.forward_masked(&noised(&z0, &eps, &ts, &sched)?, &ts, &cond, Some(&mask))?;
        let loss = model.unet.noise_from_features(&out)?.mse(&eps)?;
        loss.backward()?;
        let lr = cfg.lr_schedule.lr_at(cfg.pretrain.toy_lr, step, iters);
        opt.step(&params, |_| lr);
        if step % log_every == 0 || step + 1 == iters {
            log.push(run_id, step as u64, "dm_loss", loss.item()? as f64);
        }
        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && step + 1 < iters {
            log.push(run_id, step as u64 + 1, "dm_loss_eval", dm_eval(&model, &caps, &cache, &ds, &sched)?);
        }
    }
    let last = dm_eval(&model, &caps, &cache, &ds, &sched)?;
    log.push(run_id, iters as u64, "dm_loss_eval", last);
    let mut summary = BTreeMap::new();
    summary.insert("dm_loss_initial".into(), initial);
    summary.insert("dm_loss_final".into(), last);
    summary.insert("dm_loss_reduction".into(), 1.0 - last / initial);
    let checkpoint = Checkpoint::capture(&model.store, opt.state(), trailer(Stage::Pretrain, cfg, &model, &rng, iters as u64, 0));
    Ok(StageRun {
        model,
        log,
        checkpoint,
        summary,
    })
}

/// Perception run state that outlives training (for evaluation and dumps).
pub struct PerceptionRun {
    pub stage: StageRun,
    pub conditioner: Conditioner,
    pub eval_set: Dataset,
    /// Number of Gaussian tensors drawn on the perception path.
    pub noise_draws: u64,
}

/// Builds the perception model from a pretrained (or perception) checkpoint.
pub fn build_perception(cfg: &RunConfig, init: &Checkpoint, datasets: &[&Dataset]) -> anyhow::Result<(Model, Conditioner)> {
    cfg.validate()?;
    init.require(&[CODEC, TEXT, UNET, NULL])
        .context("perception training needs codec, text encoder and UNet weights")?;
    let mut model = Model::backbone(cfg, vocab_of(init)?, cfg.seed)?;
    init.load_into(&model.store, &[CODEC, TEXT, UNET, NULL])?;
    let cond = Conditioner::new(&model, cfg, datasets)?;
    model.add_perception(cfg, cond.prompt_rows(), cfg.seed)?;
    model.apply_perception_policy();
    Ok((model, cond))
}

/// Fine-tunes the backbone with a task head at t = 0.
pub fn train_perception(cfg: &RunConfig, init: &Checkpoint, run_id: &str) -> anyhow::Result<PerceptionRun> {
    let train = data::generate(&cfg.dataset)?;
    let eval_set = data::generate(&cfg.eval_dataset)?;
    let (model, cond) = build_perception(cfg, init, &[&train, &eval_set])?;
    let task = task(cfg.task)?;
    let cache = LatentCache::build(&model, &train)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut batcher = Batcher::new(train.len(), rng.fork());
    let mut opt = AdamW::new(&cfg.optimizer);
    let params = model.store.all();
    let mut log = MetricsLog::default();
    let total = cfg.total_iters;
    let side = train.side;
    let mut summary = BTreeMap::new();
    for step in 0..total {
        let (idx, flip) = batcher.next(cfg.batch_size);
        let z = cache.batch(&idx, &flip)?;
        let texts: Vec<&str> = idx.iter().map(|&i| train.samples[i].text.as_str()).collect();
        let targets: Vec<Target> = idx
            .iter()
            .zip(&flip)
            .map(|(&i, &f)| oriented(&train.samples[i].target, side, f))
            .collect();
        let (raw, _) = perceive(&model, cfg, &cond, &z, &texts, (side, side))?;
        let loss = task.loss(cfg, &raw, &targets)?;
        loss.backward()?;
        let base = cfg.lr_schedule.lr_at(cfg.optimizer.base_lr, step, total);
        let backbone = base * cfg.backbone_lr_multiplier;
        opt.step(&params, |g| match g {
            LrGroup::Base => base,
            LrGroup::Backbone => backbone,
        });
        log.push(run_id, step as u64, "loss", loss.item()? as f64);
        log.push(run_id, step as u64, "lr_base", base);
        log.push(run_id, step as u64, "lr_backbone", backbone);
        let done = step + 1;
        if done == total || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            for (name, v) in evaluate(&model, cfg, &cond, &eval_set)? {
                log.push(run_id, done as u64, &name, v);
                summary.insert(format!("{name}@{done}"), v);
                if done == total {
                    summary.insert(name, v);
                }
            }
        }
    }
    let noise_draws = rng.noise_draws();
    summary.insert("noise_draws".into(), noise_draws as f64);
    let prompt_rows = cond.prompt_rows();
    let checkpoint = Checkpoint::capture(&model.store, opt.state(), trailer(Stage::Perception, cfg, &model, &rng, total as u64, prompt_rows));
    Ok(PerceptionRun {
        stage: StageRun {
            model,
            log,
            checkpoint,
            summary,
        },
        conditioner: cond,
        eval_set,
        noise_draws,
    })
}

/// Rebuilds a trained perception model from its checkpoint.
pub fn load_perception(ck: &Checkpoint, eval: &Dataset) -> anyhow::Result<(Model, Conditioner)> {
    ensure!(ck.trailer.stage == Stage::Perception, "not a perception checkpoint");
    let cfg = &ck.trailer.config;
    let (model, cond) = build_perception(cfg, ck, &[eval])?;
    ck.load_into(&model.store, &["adapter.", "head."])?;
    Ok((model, cond))
}

/// Held-out metrics (`miou`/`pixel_acc`, `oiou`/`mean_iou`, or the six depth
/// metrics) using slide inference and optional flip averaging.
pub fn evaluate(model: &Model, cfg: &RunConfig, cond: &Conditioner, ds: &Dataset) -> anyhow::Result<BTreeMap<String, f64>> {
    let task = task(cfg.task)?;
    let chunks: Vec<Vec<usize>> = (0..ds.len()).collect::<Vec<_>>().chunks(cfg.eval.batch.max(1)).map(<[usize]>::to_vec).collect();
    // per-chunk tallies merged in order, so the result is independent of threads
    let tallies = chunks
        .par_iter()
        .map(|idx| -> diffperc_core::Result<Tally> {
            let _g = no_grad();
            let images = ds.images(idx, &[])?;
            let texts: Vec<&str> = idx.iter().map(|&i| ds.samples[i].text.as_str()).collect();
            let run = |x: &Tensor| slide_inference(|w| predict(model, cfg, cond, w, &texts), x, cfg.eval.crop, cfg.eval.stride);
            let raw = if cfg.eval.flip { flip_average(run, &images)? } else { run(&images)? };
            let samples: Vec<&Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
            task.tally(cfg, &raw, &samples)
        })
        .collect::<diffperc_core::Result<Vec<Tally>>>()?;
    let mut it = tallies.into_iter();
    let mut total = it.next().context("empty evaluation set")?;
    for t in it {
        total.merge(&t)?;
    }
    Ok(total.finish())
}

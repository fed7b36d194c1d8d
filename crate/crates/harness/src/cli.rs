//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use diffperc_core::guidance::average_maps;
use diffperc_core::tensor::no_grad;
use diffperc_core::text::Vocabulary;

use crate::ablation::run_ablation;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, default_vocabulary, DatasetSpec, Target};
use crate::io::{plot_svg, write_json, write_pgm, MetricsLog};
use crate::model::perceive;
use crate::train::{self, evaluate, load_perception, StageRun};

#[derive(Parser, Debug)]
#[command(name = "diffperc", version, about = "Diffusion backbones for dense perception, at toy scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; defaults to the toy preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single-threaded execution for bitwise-reproducible outputs.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the latent autoencoder.
    PretrainCodec {
        #[command(flatten)]
        common: Common,
        /// Vocabulary file, one token per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Toy text-to-image pretraining of the UNet and text encoder.
    PretrainToy {
        #[command(flatten)]
        common: Common,
        /// Codec checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Perception fine-tuning from a pretrained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
        /// Training dataset manifest `{name, n, seed}`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluate a perception checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation dataset manifest; defaults to the checkpoint's split.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the seven-row component ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
        /// Comma-separated subset of rows.
        #[arg(long)]
        rows: Option<String>,
    },
    /// Write features, attention maps and predictions of one sample as PGM.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Plot one metric of a metrics.csv as SVG.
    PlotCsv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "loss")]
        metric: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PretrainCodec { common, .. }
            | Command::PretrainToy { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::DumpFeatures { common, .. }
            | Command::PlotCsv { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

fn write_stage(out: &Path, run: &StageRun, extra: serde_json::Value) -> anyhow::Result<()> {
    run.log.write_csv(&out.join("metrics.csv"))?;
    run.checkpoint.save(&out.join("checkpoint.bin"))?;
    let mut summary = serde_json::to_value(&run.summary)?;
    if let (Some(obj), serde_json::Value::Object(more)) = (summary.as_object_mut(), extra) {
        obj.extend(more);
    }
    write_json(&out.join("summary.json"), &summary)
}

fn run_id(cmd: &str, seed: u64) -> String {
    format!("{cmd}-seed{seed}")
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common().clone();
    if common.deterministic {
        // ignore the error if a pool already exists (e.g. in-process callers)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let out = common.out.as_path();
    let cfg = load_config(&common)?;
    match cli.command {
        Command::PretrainCodec { vocab, iters, .. } => {
            let mut cfg = cfg;
            if let Some(n) = iters {
                cfg.pretrain.codec_iters = n;
            }
            let vocab = match vocab {
                Some(p) => Vocabulary::load(&p)?,
                None => default_vocabulary(),
            };
            vocab.save(&out.join("vocab.txt"))?;
            let run = train::pretrain_codec(&cfg, vocab, &run_id("pretrain-codec", cfg.seed))?;
            write_stage(out, &run, json!({}))
        }
        Command::PretrainToy { init, iters, .. } => {
            let mut cfg = cfg;
            if let Some(n) = iters {
                cfg.pretrain.toy_iters = n;
            }
            let codec = Checkpoint::load(&init).context("loading codec checkpoint")?;
            let run = train::pretrain_toy(&cfg, &codec, &run_id("pretrain-toy", cfg.seed))?;
            write_stage(out, &run, json!({}))
        }
        Command::Train { init, dataset, iters, .. } => {
            let mut cfg = cfg;
            if let Some(p) = dataset {
                cfg.dataset = load_manifest(&p)?;
            }
            if let Some(n) = iters {
                cfg.total_iters = n;
            }
            let ck = Checkpoint::load(&init).context("loading init checkpoint")?;
            let run = train::train_perception(&cfg, &ck, &run_id("train", cfg.seed))?;
            write_stage(out, &run.stage, json!({ "task": cfg.task }))
        }
        Command::Eval { checkpoint, dataset, .. } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut run_cfg = ck.trailer.config.clone();
            if let Some(p) = dataset {
                run_cfg.eval_dataset = load_manifest(&p)?;
            }
            let ds = data::generate(&run_cfg.eval_dataset)?;
            let (model, cond) = load_perception(&ck, &ds)?;
            let metrics = evaluate(&model, &run_cfg, &cond, &ds)?;
            let mut log = MetricsLog::default();
            for (k, v) in &metrics {
                log.push("eval", ck.trailer.step, k, *v);
            }
            log.write_csv(&out.join("metrics.csv"))?;
            write_json(&out.join("summary.json"), &json!({ "task": run_cfg.task, "dataset": run_cfg.eval_dataset, "metrics": metrics }))
        }
        Command::Ablate { init, rows, .. } => {
            let ck = Checkpoint::load(&init).context("loading init checkpoint")?;
            let names: Option<Vec<String>> = rows.map(|r| r.split(',').map(|s| s.trim().to_string()).collect());
            let refs: Option<Vec<&str>> = names.as_ref().map(|v| v.iter().map(String::as_str).collect());
            let (table, log) = run_ablation(&cfg, &ck, refs.as_deref())?;
            log.write_csv(&out.join("metrics.csv"))?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            write_json(&out.join("summary.json"), &table)
        }
        Command::DumpFeatures { checkpoint, index, .. } => dump_features(&checkpoint, index, out),
        Command::PlotCsv { csv, metric, .. } => {
            let log = MetricsLog::read_csv(&csv)?;
            let svg = plot_svg(&log, &metric)?;
            let path = out.join(format!("{}.svg", metric.replace('/', "_")));
            std::fs::write(&path, svg)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn dump_features(checkpoint: &Path, index: usize, out: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.trailer.config.clone();
    let ds = data::generate(&cfg.eval_dataset)?;
    anyhow::ensure!(index < ds.len(), "index {index} outside the {}-sample eval split", ds.len());
    let (model, cond) = load_perception(&ck, &ds)?;
    let _g = no_grad();
    let s = &ds.samples[index];
    let side = ds.side;
    let hw = side * side;
    let grey: Vec<f32> = (0..hw).map(|p| (s.image[p] + s.image[hw + p] + s.image[2 * hw + p]) / 3.0).collect();
    write_pgm(&out.join("image.pgm"), side, side, &grey)?;
    let z = model.encode(&ds.images(&[index], &[])?)?;
    let (raw, backbone) = perceive(&model, &cfg, &cond, &z, &[s.text.as_str()], (side, side))?;
    for (i, f) in backbone.features.iter().enumerate() {
        let (c, h, w) = (f.dim(1), f.dim(2), f.dim(3));
        let energy: Vec<f32> = (0..h * w)
            .map(|p| (0..c).map(|k| f.data()[k * h * w + p].abs()).sum::<f32>() / c as f32)
            .collect();
        write_pgm(&out.join(format!("feature_level{}.pgm", i + 1)), w, h, &energy)?;
    }
    let all = diffperc_core::guidance::GuidanceConfig {
        source: "up_down".into(),
        exclude_lowest: false,
        enabled: true,
    };
    for (level, map) in average_maps(&backbone.attn_maps, &all)? {
        let (sn, h, w) = (map.dim(1), map.dim(2), map.dim(3));
        for k in 0..sn {
            write_pgm(
                &out.join(format!("attn_level{level}_prompt{k}.pgm")),
                w,
                h,
                &map.data()[k * h * w..(k + 1) * h * w],
            )?;
        }
    }
    let k = raw.dim(1);
    let pred: Vec<f32> = if k == 1 {
        raw.data().to_vec()
    } else {
        (0..hw)
            .map(|p| (0..k).max_by(|&a, &b| raw.data()[a * hw + p].total_cmp(&raw.data()[b * hw + p])).unwrap_or(0) as f32)
            .collect()
    };
    write_pgm(&out.join("prediction.pgm"), side, side, &pred)?;
    let gt: Vec<f32> = match &s.target {
        Target::Classes(v) | Target::Mask(v) => v.iter().map(|&x| x as f32).collect(),
        Target::Depth(v) => v.clone(),
    };
    write_pgm(&out.join("target.pgm"), side, side, &gt)?;
    write_json(&out.join("summary.json"), &json!({ "index": index, "text": s.text, "task": cfg.task }))
}

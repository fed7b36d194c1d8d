//! Prompt construction, a small causal text transformer read out at the
//! end-of-sequence token, and the residual text adapter.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Module, Param, VarBuilder};
use crate::task::TaskKind;
use crate::tensor::{Float, Tensor};

pub const PROMPT_TEMPLATE_PREFIX: &str = "a photo of a";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
/// Longest token sequence fed to the encoder, end-of-sequence included.
pub const MAX_PROMPT_TOKENS: usize = 16;

pub fn template(name: &str) -> String {
    format!("{PROMPT_TEMPLATE_PREFIX} {name}")
}

/// Ordered, non-empty list of prompt strings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    entries: Vec<String>,
}

impl PromptSet {
    pub fn new(entries: Vec<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("prompt set must not be empty".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Prompts for a task: class and scene names are templated, referring
/// expressions are used verbatim.
pub fn build_prompts(names: &[String], mode: TaskKind) -> Result<PromptSet> {
    if names.is_empty() {
        return Err(Error::Config("no class names to build prompts from".into()));
    }
    let entries = match mode {
        TaskKind::Semseg => {
            let mut seen = std::collections::HashSet::new();
            if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
                return Err(Error::Config(format!("duplicate class name `{dup}`")));
            }
            names.iter().map(|n| template(n)).collect()
        }
        TaskKind::Refseg => names.to_vec(),
        TaskKind::Depth => names.iter().map(|n| template(n)).collect(),
    };
    PromptSet::new(entries)
}

/// Whitespace word table with reserved unknown and end-of-sequence ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            for part in w.as_ref().split_whitespace() {
                let part = normalise_word(part);
                if part.is_empty() || index.contains_key(&part) {
                    continue;
                }
                index.insert(part.clone(), tokens.len());
                tokens.push(part);
            }
        }
        Self { tokens, index }
    }

    /// One token per line; the first two lines must be the reserved tokens.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() < 2 || lines[0] != UNK_TOKEN || lines[1] != EOS_TOKEN {
            return Err(Error::Config(format!(
                "vocabulary must start with `{UNK_TOKEN}` and `{EOS_TOKEN}`"
            )));
        }
        Ok(Self::from_words(lines[2..].iter()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    /// Token ids with end-of-sequence appended, truncated to
    /// [`MAX_PROMPT_TOKENS`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(normalise_word)
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(&w).copied().unwrap_or(self.unk_id()))
            .collect();
        if ids.len() > MAX_PROMPT_TOKENS - 1 {
            log::warn!(
                "prompt `{text}` has {} words; truncated to {}",
                ids.len(),
                MAX_PROMPT_TOKENS - 1
            );
            ids.truncate(MAX_PROMPT_TOKENS - 1);
        }
        ids.push(self.eos_id());
        ids
    }
}

fn normalise_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Text features `C`: one row per prompt.
#[derive(Clone, Debug)]
pub struct ConditioningFeatures<T: Float = f32> {
    features: Tensor<T>,
    prompts: PromptSet,
}

impl<T: Float> ConditioningFeatures<T> {
    pub fn new(features: Tensor<T>, prompts: PromptSet) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != prompts.len() {
            return Err(Error::dim(
                "conditioning",
                format!(
                    "features {:?} for {} prompts",
                    features.shape(),
                    prompts.len()
                ),
            ));
        }
        Ok(Self { features, prompts })
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn rows(&self) -> usize {
        self.features.dim(0)
    }

    pub fn width(&self) -> usize {
        self.features.dim(1)
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let prompts = rows
            .iter()
            .map(|&r| self.prompts.entries.get(r).cloned())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::dim("conditioning", format!("rows {rows:?} out of range")))?;
        Self::new(self.features.index_select(rows)?, PromptSet::new(prompts)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug)]
struct TextBlock<T: Float> {
    ln1: LayerNorm<T>,
    qkv: Linear<T>,
    proj: Linear<T>,
    ln2: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    heads: usize,
}

impl<T: Float> TextBlock<T> {
    fn new(vb: &VarBuilder<T>, cfg: &TextEncoderConfig) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            ln1: LayerNorm::new(&vb.pp("ln1"), w)?,
            qkv: Linear::new(&vb.pp("qkv"), w, 3 * w, true)?,
            proj: Linear::new(&vb.pp("proj"), w, w, true)?,
            ln2: LayerNorm::new(&vb.pp("ln2"), w)?,
            fc1: Linear::new(&vb.pp("fc1"), w, w * cfg.mlp_ratio, true)?,
            fc2: Linear::new(&vb.pp("fc2"), w * cfg.mlp_ratio, w, true)?,
            heads: cfg.heads,
        })
    }

    /// `x: [L, W]`, causal self-attention then MLP, both residual.
    fn forward(&self, x: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let (len, w) = (x.dim(0), x.dim(1));
        let dh = w / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor<T>> {
            qkv.narrow(1, i * w, w)?
                .reshape(&[len, self.heads, dh])?
                .permute(&[1, 0, 2])
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = q
            .matmul(&k.permute(&[0, 2, 1])?)?
            .scale(1.0 / (dh as f64).sqrt())
            .add(mask)?;
        let attn = scores.softmax(2)?.matmul(&v)?;
        let attn = attn.permute(&[1, 0, 2])?.reshape(&[len, w])?;
        let x = x.add(&self.proj.forward(&attn)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.silu())?;
        x.add(&h)
    }
}

/// Causal transformer over word tokens; a prompt's feature is the final
/// hidden state at its end-of-sequence position.
#[derive(Debug)]
pub struct TextEncoder<T: Float = f32> {
    vocab: Arc<Vocabulary>,
    token_embedding: Arc<Param<T>>,
    position_embedding: Arc<Param<T>>,
    blocks: Vec<TextBlock<T>>,
    ln_final: LayerNorm<T>,
    width: usize,
}

impl<T: Float> TextEncoder<T> {
    pub fn new(vb: &VarBuilder<T>, vocab: Arc<Vocabulary>, cfg: &TextEncoderConfig) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let blocks = (0..cfg.layers)
            .map(|i| TextBlock::new(&vb.pp(format!("blocks.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding: vb.normal("token_embedding", &[vocab.len(), cfg.width], 0.5)?,
            position_embedding: vb.normal("position_embedding", &[MAX_PROMPT_TOKENS, cfg.width], 0.1)?,
            vocab,
            blocks,
            ln_final: LayerNorm::new(&vb.pp("ln_final"), cfg.width)?,
            width: cfg.width,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Feature row `[1, W]` for one prompt.
    pub fn encode_one(&self, text: &str) -> Result<Tensor<T>> {
        let ids = self.vocab.tokenize(text);
        let len = ids.len();
        let x = self
            .token_embedding
            .tensor()
            .index_select(&ids)?
            .add(&self.position_embedding.tensor().narrow(0, 0, len)?)?;
        let mut mask = vec![T::zero(); len * len];
        for i in 0..len {
            for j in i + 1..len {
                mask[i * len + j] = T::of(-1e9);
            }
        }
        let mask = Tensor::new(mask, &[len, len])?;
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(&h, &mask)?;
        }
        self.ln_final.forward(&h.narrow(0, len - 1, 1)?)
    }

    /// One feature row per prompt, in prompt order.
    pub fn encode(&self, prompts: &PromptSet) -> Result<ConditioningFeatures<T>> {
        let rows = prompts
            .entries()
            .iter()
            .map(|p| self.encode_one(p))
            .collect::<Result<Vec<_>>>()?;
        ConditioningFeatures::new(Tensor::concat(&rows, 0)?, prompts.clone())
    }
}

/// `encode_text`: features for a prompt set from a (frozen) encoder.
pub fn encode_text<T: Float>(
    prompts: &PromptSet,
    encoder: &TextEncoder<T>,
) -> Result<ConditioningFeatures<T>> {
    encoder.encode(prompts)
}

pub const ADAPTER_GAMMA_INIT: f64 = 1e-4;

/// Residual refinement `C + γ·MLP(C)` with a learnable scalar `γ`.
#[derive(Debug)]
pub struct TextAdapter<T: Float = f32> {
    fc1: Linear<T>,
    fc2: Linear<T>,
    gamma: Arc<Param<T>>,
    width: usize,
}

impl<T: Float> TextAdapter<T> {
    pub fn new(vb: &VarBuilder<T>, width: usize, gamma_init: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&vb.pp("fc1"), width, width, true)?,
            fc2: Linear::new(&vb.pp("fc2"), width, width, true)?,
            gamma: vb.constant("gamma", &[1], gamma_init)?,
            width,
        })
    }

    pub fn gamma(&self) -> &Arc<Param<T>> {
        &self.gamma
    }

    pub fn mlp(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(c)?.relu())
    }

    pub fn adapt(&self, c: &ConditioningFeatures<T>) -> Result<ConditioningFeatures<T>> {
        if c.width() != self.width {
            return Err(Error::dim(
                "adapt",
                format!("features of width {} into adapter of width {}", c.width(), self.width),
            ));
        }
        let refined = c
            .features()
            .add(&self.mlp(c.features())?.mul(&self.gamma.tensor())?)?;
        ConditioningFeatures::new(refined, c.prompts().clone())
    }
}

/// `adapt`: residual text refinement.
pub fn adapt<T: Float>(
    c: &ConditioningFeatures<T>,
    adapter: &TextAdapter<T>,
) -> Result<ConditioningFeatures<T>> {
    adapter.adapt(c)
}

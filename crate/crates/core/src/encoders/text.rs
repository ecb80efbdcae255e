use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, Mode, TransformerBlock};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::{ParamId, ParamStore, Session, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const UNK: u32 = 2;
pub const CONTEXT_LEN: usize = 32;

const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<unk>"];

const DEFAULT_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "of", "image", "description", "nose", "right", "left", "ear", "vc",
    "open", "closed", "throat", "vocal", "cords", "cord", "fully", "abducted", "adducted", "nasal",
    "cavity", "septum", "turbinate", "canal", "tympanic", "membrane", "pharynx", "tonsils",
    "tonsil", "larynx", "glottis", "epiglottis", "uvula", "normal", "inflamed", "mucosa", "view",
    "endoscopic", "with", "and", "visible", "clear", "healthy", "swollen", "red", "discharge",
    "polyp", "wax", "intact", "posterior", "wall", "middle", "inferior", "lateral", "side",
    "showing", "shows", "is", "in", "on", "no", "signs", "lesion", "mild", "edema", "during",
    "phonation", "breathing", "airway", "narrow", "wide", "dark", "bright", "opening", "channel",
    "meatus", "drum", "pale", "pink", "smooth", "rough", "stripes", "ring", "dot", "cross",
];

/// Token list where the line number is the id; ids 0–2 are PAD, BOS, UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(
            RESERVED
                .iter()
                .chain(DEFAULT_WORDS)
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Config("vocabulary must start with the three reserved tokens".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(RESERVED.len()) {
            let t = t.trim().to_lowercase();
            if !t.is_empty() {
                index.entry(t).or_insert(i as u32);
            }
        }
        Ok(Self { tokens, index })
    }

    /// Parses newline-separated tokens.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Lowercases, splits on anything that is not alphanumeric, maps words to
    /// ids and lays them out as `[BOS, words…, PAD…]` of length 32.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        let mut ids = Vec::with_capacity(CONTEXT_LEN);
        ids.push(BOS);
        ids.extend(
            lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| self.id(w))
                .take(CONTEXT_LEN - 1),
        );
        ids.resize(CONTEXT_LEN, PAD);
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Seed of the frozen random weights.
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_blocks: 2,
            num_heads: 4,
            mlp_ratio: 4,
            seed: 20_250_701,
        }
    }
}

/// Frozen transformer text tower. Its weights are regenerated from
/// `config.seed` and never exposed mutably.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextConfig,
    vocab: Vocabulary,
    joint_dim: usize,
    store: ParamStore,
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(config: &TextConfig, vocab: Vocabulary, joint_dim: usize) -> Result<Self> {
        let d = config.d_model;
        if config.num_heads == 0 || !d.is_multiple_of(config.num_heads) || config.num_blocks == 0 {
            return Err(Error::Config(format!(
                "text encoder width {d} with {} heads and {} blocks",
                config.num_heads, config.num_blocks
            )));
        }
        let mut rng = seeded(derive_seed(config.seed, &[0x7465_7874]));
        let mut store = ParamStore::new();
        let token_embed = store.add("text.token_embed", normal_tensor(&[vocab.len(), d], 1.0, &mut rng), false)?;
        let pos_embed = store.add("text.pos_embed", normal_tensor(&[CONTEXT_LEN, d], 0.1, &mut rng), false)?;
        let blocks = (0..config.num_blocks)
            .map(|l| {
                TransformerBlock::new(
                    &mut store,
                    &format!("text.blocks.{l}"),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(&mut store, "text.ln_final", d)?;
        let proj = Linear::new(&mut store, "text.proj", d, joint_dim, false, &mut rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        Ok(Self {
            config: config.clone(),
            vocab,
            joint_dim,
            store,
            token_embed,
            pos_embed,
            blocks,
            ln_final,
            proj,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    /// Read-only view of the frozen weights.
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Unit-norm joint-space embedding of `prompt`, pooled at the BOS
    /// position. PAD positions are dropped before the transformer, which is
    /// the same as masking them out of every attention.
    pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let ids = self.vocab.tokenize(prompt);
        let len = ids.iter().position(|&t| t == PAD).unwrap_or(CONTEXT_LEN);
        let rows: Vec<usize> = ids[..len].iter().map(|&t| t as usize).collect();
        let mut s = Session::new(&self.store);
        let table = s.param(self.token_embed);
        let tokens = s.tape.select_rows(table, &rows)?;
        let pos = s.param(self.pos_embed);
        let positions: Vec<usize> = (0..len).collect();
        let pos = s.tape.select_rows(pos, &positions)?;
        let mut x: Var = s.tape.add(tokens, pos)?;
        for block in &self.blocks {
            x = block.forward(&mut s, x, 1, Mode::eval())?;
        }
        let x = self.ln_final.forward(&mut s, x)?;
        let bos = s.tape.select_rows(x, &[0])?;
        let projected = self.proj.forward(&mut s, bos)?;
        let unit = s.tape.l2_normalize_rows(projected);
        Ok(s.value(unit).data().to_vec())
    }
}

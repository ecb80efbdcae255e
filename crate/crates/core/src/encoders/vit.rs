use serde::{Deserialize, Serialize};

use super::layers::{Mode, TransformerBlock};
use super::Linear;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

/// Image encoder geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Width of the joint image/text embedding space.
    pub joint_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_model: 64,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            joint_dim: 32,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.channels == 0 || self.joint_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("ViT sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Per-block CLS vectors and final token matrix for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub cls_per_layer: Vec<Vec<f64>>,
    pub final_tokens: Tensor,
}

/// Batched encoder result on a tape: `cls_per_layer[l]` is `[B × d_model]`.
#[derive(Clone, Debug)]
pub struct BatchEncoding {
    pub cls_per_layer: Vec<Var>,
    pub final_tokens: Var,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    pub config: VitConfig,
    pub patch: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

// Pixel values in [0, 1] are centred and scaled before projection.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

impl VisionTransformer {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, &[0x0076_6974]));
        let d = config.d_model;
        let patch = Linear::new(store, &format!("{prefix}.patch"), config.patch_dim(), d, true, &mut rng)?;
        let cls_token = store.add(format!("{prefix}.cls_token"), normal_tensor(&[d], 0.02, &mut rng), true)?;
        let pos_embed = store.add(
            format!("{prefix}.pos_embed"),
            normal_tensor(&[config.num_tokens(), d], 0.02, &mut rng),
            true,
        )?;
        let blocks = (0..config.num_blocks)
            .map(|l| {
                TransformerBlock::new(
                    store,
                    &format!("{prefix}.blocks.{l}"),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            patch,
            cls_token,
            pos_embed,
            blocks,
        })
    }

    /// Every parameter owned by the backbone (adapters excluded).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut ids = self.patch.param_ids();
        ids.push(self.cls_token);
        ids.push(self.pos_embed);
        for b in &self.blocks {
            ids.extend(b.ln1.param_ids());
            ids.extend(b.ln2.param_ids());
            for p in [&b.attn.q, &b.attn.k, &b.attn.v] {
                ids.extend(p.base().param_ids());
            }
            ids.extend(b.attn.out.param_ids());
            ids.extend(b.fc1.param_ids());
            ids.extend(b.fc2.param_ids());
        }
        ids
    }

    /// Splits a `[C × S × S]` image into `N` flattened patches, row-major
    /// over the patch grid, each flattened as (channel, y, x).
    pub fn patchify(&self, image: &Tensor) -> Result<Vec<f64>> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::dim("patch_embed", image.shape(), &expected));
        }
        let (s, p) = (c.image_size, c.patch_size);
        let grid = s / p;
        let px = image.data();
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c.channels {
                    for y in 0..p {
                        let row = (ch * s + gy * p + y) * s + gx * p;
                        out.extend(px[row..row + p].iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Token matrix `[B·(1+N) × d_model]`: per image, the CLS token followed
    /// by projected patches, plus positional embeddings.
    pub fn patch_embed(&self, s: &mut Session<'_>, images: &[&Tensor]) -> Result<Var> {
        let c = &self.config;
        let (b, n, t) = (images.len(), c.num_patches(), c.num_tokens());
        if b == 0 {
            return Err(Error::Contract("patch_embed of an empty batch".into()));
        }
        let mut flat = Vec::with_capacity(b * n * c.patch_dim());
        for img in images {
            flat.extend(self.patchify(img)?);
        }
        let patches = s.input(Tensor::new(&[b * n, c.patch_dim()], flat)?);
        let projected = self.patch.forward(s, patches)?;
        let cls = s.param(self.cls_token);
        let cls = s.tape.reshape(cls, &[1, c.d_model])?;
        let cls_rows = s.tape.select_rows(cls, &vec![0; b])?;
        let stacked = s.tape.concat_rows(&[cls_rows, projected])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| std::iter::once(i).chain((0..n).map(move |j| b + i * n + j)))
            .collect();
        let tokens = s.tape.select_rows(stacked, &order)?;
        let pos = s.param(self.pos_embed);
        let tiled: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos_rows = s.tape.select_rows(pos, &tiled)?;
        s.tape.add(tokens, pos_rows)
    }

    /// Runs every block, recording the CLS row of each image after each block.
    pub fn forward(&self, s: &mut Session<'_>, images: &[&Tensor], mode: Mode) -> Result<BatchEncoding> {
        let b = images.len();
        let t = self.config.num_tokens();
        let mut x = self.patch_embed(s, images)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let mut cls_per_layer = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(s, x, b, mode)?;
            cls_per_layer.push(s.tape.select_rows(x, &cls_rows)?);
        }
        Ok(BatchEncoding {
            cls_per_layer,
            final_tokens: x,
            batch: b,
        })
    }

    /// Inference for a single image.
    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<EncoderOutput> {
        let mut s = Session::new(store);
        let enc = self.forward(&mut s, &[image], Mode::eval())?;
        Ok(EncoderOutput {
            cls_per_layer: enc
                .cls_per_layer
                .iter()
                .map(|v| s.value(*v).data().to_vec())
                .collect(),
            final_tokens: s.value(enc.final_tokens).detached(),
        })
    }
}

//! Building blocks shared by the image, text and fusion transformers.

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::rng::{normal_tensor, ModelRng};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

/// Forward-pass mode. `seed` drives dropout masks when training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
        }
    }
}

/// `y = x·Wᵀ + b` with `W` stored as `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[out_dim, in_dim], std, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let wt = s.tape.transpose(w)?;
        let y = s.tape.matmul(x, wt)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// A q/k/v projection, optionally wrapped by a low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Plain(Linear),
    Adapted(LoraAdapter),
}

impl Projection {
    pub fn base(&self) -> &Linear {
        match self {
            Projection::Plain(l) => l,
            Projection::Adapted(a) => &a.base,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Projection::Plain(l) => l.forward(s, x),
            Projection::Adapted(a) => a.apply(s, x, mode),
        }
    }
}

/// Multi-head self-attention: per-head `softmax(q·kᵀ/√d)·v`, heads
/// concatenated and projected by `W_O`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ModelRng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Projection::Plain(Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?),
            k: Projection::Plain(Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?),
            v: Projection::Plain(Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `x` stacks `groups` equal-length sequences along its rows.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, groups: usize, mode: Mode) -> Result<Var> {
        let q = self.q.forward(s, x, mode)?;
        let k = self.k.forward(s, x, mode)?;
        let v = self.v.forward(s, x, mode)?;
        let heads = s.tape.attention(q, k, v, groups, self.heads)?;
        self.out.forward(s, heads)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `h + MLP(LN(h))`
/// with a GELU MLP of expansion `mlp_ratio`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, true, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, groups: usize, mode: Mode) -> Result<Var> {
        let n1 = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, n1, groups, mode)?;
        let h = s.tape.add(x, a)?;
        let n2 = self.ln2.forward(s, h)?;
        let f1 = self.fc1.forward(s, n2)?;
        let g = s.tape.gelu(f1);
        let f2 = self.fc2.forward(s, g)?;
        s.tape.add(h, f2)
    }
}

/// Row indices that regroup `parts` stacked blocks of `groups` rows each
/// (part-major) into group-major order: for every group, one row from each
/// part in turn.
pub(crate) fn interleave_rows(parts: usize, groups: usize) -> Vec<usize> {
    (0..groups)
        .flat_map(|g| (0..parts).map(move |p| p * groups + g))
        .collect()
}

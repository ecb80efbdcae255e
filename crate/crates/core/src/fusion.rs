//! Multi-level feature aggregation.
//!
//! CLS tokens from `K` selected encoder blocks are stacked behind a learnable
//! fusion token and passed through a small transformer without positional
//! embeddings; the fusion token's output, layer-normed, projected to the
//! joint space and L2-normalised, is the image embedding.

use serde::{Deserialize, Serialize};

use crate::encoders::{interleave_rows, LayerNorm, Linear, Mode, TransformerBlock};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::{ParamId, ParamStore, Session, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of layers picked by the default policy.
    pub k: usize,
    /// Explicit 1-based block indices; overrides `k` when present.
    pub selected_layers: Option<Vec<usize>>,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 3,
            selected_layers: None,
            fusion_blocks: 1,
            fusion_heads: 4,
        }
    }
}

impl FusionConfig {
    /// The 1-based block indices to fuse for an encoder of `num_blocks`.
    pub fn resolve(&self, num_blocks: usize) -> Result<Vec<usize>> {
        match &self.selected_layers {
            None => select_layers(num_blocks, self.k),
            Some(layers) => {
                if layers.is_empty() {
                    return Err(Error::Config("selected_layers is empty".into()));
                }
                if layers.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!("selected layers {layers:?} are not strictly increasing")));
                }
                if layers[0] == 0 || *layers.last().unwrap() > num_blocks {
                    return Err(Error::Config(format!("selected layers {layers:?} outside [1, {num_blocks}]")));
                }
                Ok(layers.clone())
            }
        }
    }
}

/// `K` evenly spaced blocks ending at the last: `round(i·L/K)` for
/// `i = 1..=K`, de-duplicated ascending.
pub fn select_layers(num_blocks: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > num_blocks {
        return Err(Error::Config(format!("cannot select {k} of {num_blocks} layers")));
    }
    let mut out: Vec<usize> = (1..=k)
        .map(|i| (i as f64 * num_blocks as f64 / k as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub layers: Vec<usize>,
    pub token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl FusionModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &FusionConfig,
        num_blocks: usize,
        d_model: usize,
        joint_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let layers = config.resolve(num_blocks)?;
        let mut rng = seeded(derive_seed(seed, &[0x6675_7365]));
        let token = store.add(format!("{prefix}.token"), normal_tensor(&[d_model], 0.02, &mut rng), true)?;
        let blocks = (0..config.fusion_blocks)
            .map(|b| {
                TransformerBlock::new(store, &format!("{prefix}.blocks.{b}"), d_model, config.fusion_heads, 4, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            token,
            blocks,
            ln: LayerNorm::new(store, &format!("{prefix}.ln"), d_model)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), d_model, joint_dim, false, &mut rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token];
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
        ids.extend(self.ln.param_ids());
        ids.extend(self.proj.param_ids());
        ids
    }

    /// Fuses per-layer CLS matrices (`[B × d_model]` each, block order) into
    /// unit joint-space embeddings `[B × joint_dim]`.
    pub fn fuse(&self, s: &mut Session<'_>, cls_per_layer: &[Var], mode: Mode) -> Result<Var> {
        let max = *self.layers.last().expect("at least one layer");
        if cls_per_layer.len() < max {
            return Err(Error::Config(format!(
                "fusion needs layer {max} but the encoder produced {}",
                cls_per_layer.len()
            )));
        }
        let first = cls_per_layer[0];
        let (batch, d) = (s.tape.shape(first)[0], s.tape.shape(first)[1]);
        let token = s.param(self.token);
        let token = s.tape.reshape(token, &[1, d])?;
        let mut parts = vec![s.tape.select_rows(token, &vec![0; batch])?];
        parts.extend(self.layers.iter().map(|&l| cls_per_layer[l - 1]));
        let stacked = s.tape.concat_rows(&parts)?;
        let seq = self.layers.len() + 1;
        let mut x = s.tape.select_rows(stacked, &interleave_rows(seq, batch))?;
        for block in &self.blocks {
            x = block.forward(s, x, batch, mode)?;
        }
        let heads: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let fused = s.tape.select_rows(x, &heads)?;
        project_to_joint(s, &self.ln, &self.proj, fused)
    }
}

/// Final-layer CLS pooling used when fusion is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalClsHead {
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl FinalClsHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, joint_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(derive_seed(seed, &[0x6669_6e61]));
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{prefix}.ln"), d_model)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), d_model, joint_dim, false, &mut rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln.param_ids();
        ids.extend(self.proj.param_ids());
        ids
    }

    pub fn pool(&self, s: &mut Session<'_>, cls_per_layer: &[Var]) -> Result<Var> {
        let last = *cls_per_layer
            .last()
            .ok_or_else(|| Error::Contract("encoder produced no layers".into()))?;
        project_to_joint(s, &self.ln, &self.proj, last)
    }
}

fn project_to_joint(s: &mut Session<'_>, ln: &LayerNorm, proj: &Linear, x: Var) -> Result<Var> {
    let normed = ln.forward(s, x)?;
    let projected = proj.forward(s, normed)?;
    Ok(s.tape.l2_normalize_rows(projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Strategy;
    use crate::tensor::{finite_diff_check, Tensor};

    #[test]
    fn default_layer_policy() {
        assert_eq!(select_layers(12, 3).unwrap(), vec![4, 8, 12]);
        assert_eq!(select_layers(4, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(select_layers(4, 1).unwrap(), vec![4]);
        assert_eq!(select_layers(4, 3).unwrap(), vec![1, 3, 4]);
        assert!(matches!(select_layers(4, 5), Err(Error::Config(_))));
        assert!(select_layers(4, 0).is_err());
    }

    #[test]
    fn explicit_layers_are_validated() {
        let cfg = |l: Vec<usize>| FusionConfig { selected_layers: Some(l), ..Default::default() };
        assert_eq!(cfg(vec![1, 4]).resolve(4).unwrap(), vec![1, 4]);
        assert!(cfg(vec![2, 2]).resolve(4).is_err());
        assert!(cfg(vec![3, 1]).resolve(4).is_err());
        assert!(cfg(vec![0, 1]).resolve(4).is_err());
        assert!(cfg(vec![1, 5]).resolve(4).is_err());
    }

    fn setup(config: &FusionConfig, d: usize) -> (ParamStore, FusionModule) {
        let mut store = ParamStore::new();
        let m = FusionModule::new(&mut store, "fusion", config, 4, d, 6, 1).unwrap();
        (store, m)
    }

    fn layers(seed: u64, batch: usize, d: usize) -> Vec<Tensor> {
        let mut rng = seeded(seed);
        (0..4).map(|_| normal_tensor(&[batch, d], 1.0, &mut rng)).collect()
    }

    fn run(store: &ParamStore, m: &FusionModule, cls: &[Tensor]) -> Tensor {
        let mut s = Session::new(store);
        let vars: Vec<Var> = cls.iter().map(|t| s.input(t.clone())).collect();
        let out = m.fuse(&mut s, &vars, Mode::eval()).unwrap();
        s.value(out).detached()
    }

    #[test]
    fn output_is_unit_norm_joint_width() {
        for k in 1..=4 {
            let (store, m) = setup(&FusionConfig { k, ..Default::default() }, 8);
            let out = run(&store, &m, &layers(2, 3, 8));
            assert_eq!(out.shape(), &[3, 6]);
            for r in 0..3 {
                let n: f64 = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invariant_to_source_token_order() {
        let cfg = FusionConfig { selected_layers: Some(vec![1, 2, 3, 4]), ..Default::default() };
        let (store, m) = setup(&cfg, 8);
        let cls = layers(3, 2, 8);
        let reversed: Vec<Tensor> = cls.iter().rev().cloned().collect();
        let a = run(&store, &m, &cls);
        let b = run(&store, &m, &reversed);
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn single_layer_depends_only_on_that_layer() {
        let (store, m) = setup(&FusionConfig { k: 1, ..Default::default() }, 8);
        let cls = layers(4, 2, 8);
        let mut changed = layers(5, 2, 8);
        changed[3] = cls[3].clone();
        assert_eq!(run(&store, &m, &cls), run(&store, &m, &changed));
    }

    #[test]
    fn fusion_requires_enough_layers() {
        let (store, m) = setup(&FusionConfig::default(), 8);
        let mut s = Session::new(&store);
        let cls: Vec<Var> = layers(6, 1, 8)[..2].iter().map(|t| s.input(t.clone())).collect();
        assert!(matches!(m.fuse(&mut s, &cls, Mode::eval()), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_gradients_match_central_differences() {
        let (store, m) = setup(&FusionConfig::default(), 8);
        let cls = layers(7, 3, 8);
        let w = normal_tensor(&[3, 6], 1.0, &mut seeded(8));
        let report = finite_diff_check(
            &store,
            |s| {
                let vars: Vec<Var> = cls.iter().map(|t| s.input(t.clone())).collect();
                let out = m.fuse(s, &vars, Mode::eval())?;
                let wv = s.input(w.clone());
                let p = s.tape.mul(out, wv)?;
                Ok(s.tape.sum(p))
            },
            1e-5,
            Strategy::default(),
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}

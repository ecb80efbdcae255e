//! Low-rank adapters on the q/k/v projections of the image encoder.
//!
//! An adapted projection computes `h = x·Wᵀ + b + γ·(drop(x)·Aᵀ)·Bᵀ` with
//! `A ∈ ℝ^{r×d₂}`, `B ∈ ℝ^{d₁×r}` and `γ = α/r`. `A` starts Kaiming-uniform
//! and `B` starts at zero, so a freshly injected model computes exactly what
//! the plain model did. The base weight `W` (and bias) stay frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Linear, Mode, Projection, VisionTransformer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, name_tag, seeded, uniform_tensor};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn gamma(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Checks the config against a `d1 × d2` projection.
    pub fn validate(&self, d1: usize, d2: usize) -> Result<()> {
        if d1 == 0 || d2 == 0 {
            return Err(Error::Config("LoRA dimensions must be positive".into()));
        }
        if self.rank == 0 || self.rank > d1.min(d2) / 2 {
            return Err(Error::Config(format!(
                "LoRA rank {} must be in [1, {}] for a {d1}×{d2} projection",
                self.rank,
                d1.min(d2) / 2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Freshly initialised adapter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
    pub gamma: f64,
}

/// `A ~ U(−√(6/d₂), √(6/d₂))` (Kaiming-uniform, fan-in `d₂`), `B = 0`.
pub fn lora_init(d1: usize, d2: usize, config: &LoraConfig, seed: u64) -> Result<LoraFactors> {
    config.validate(d1, d2)?;
    let mut rng = seeded(seed);
    let bound = (6.0 / d2 as f64).sqrt();
    Ok(LoraFactors {
        a: uniform_tensor(&[config.rank, d2], bound, &mut rng),
        b: Tensor::zeros(&[d1, config.rank]),
        gamma: config.gamma(),
    })
}

/// A frozen projection plus its trainable low-rank update.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub base: Linear,
    pub a: ParamId,
    pub b: ParamId,
    pub gamma: f64,
    pub config: LoraConfig,
    pub name: String,
}

impl LoraAdapter {
    /// Registers `A` and `B` for `base` under `name` and freezes the base.
    pub fn attach(store: &mut ParamStore, name: &str, base: Linear, config: &LoraConfig, seed: u64) -> Result<Self> {
        let factors = lora_init(base.out_dim, base.in_dim, config, seed)?;
        let a = store.add(format!("{name}.lora_a"), factors.a, true)?;
        let b = store.add(format!("{name}.lora_b"), factors.b, true)?;
        for id in base.param_ids() {
            store.set_trainable(id, false);
        }
        Ok(Self {
            base,
            a,
            b,
            gamma: factors.gamma,
            config: config.clone(),
            name: name.to_string(),
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.config.rank * (self.base.in_dim + self.base.out_dim)
    }

    /// `x·Wᵀ + b + γ·(drop(x)·Aᵀ)·Bᵀ`. Inverted dropout touches only the
    /// adapter input and only in training mode.
    pub fn apply(&self, s: &mut Session<'_>, x: Var, mode: Mode) -> Result<Var> {
        let width = *s.tape.shape(x).last().unwrap_or(&0);
        if width != self.base.in_dim {
            return Err(Error::dim("lora_apply", s.tape.shape(x), &[self.base.out_dim, self.base.in_dim]));
        }
        let base = self.base.forward(s, x)?;
        let p = self.config.dropout;
        let input = if mode.training && p > 0.0 {
            let shape = s.tape.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let mut rng = seeded(derive_seed(mode.seed, &[name_tag(&self.name)]));
            let keep = 1.0 / (1.0 - p);
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            let mask = s.input(Tensor::new(&shape, mask)?);
            s.tape.mul(x, mask)?
        } else {
            x
        };
        let a = s.param(self.a);
        let at = s.tape.transpose(a)?;
        let xa = s.tape.matmul(input, at)?;
        let b = s.param(self.b);
        let bt = s.tape.transpose(b)?;
        let xab = s.tape.matmul(xa, bt)?;
        let update = s.tape.scale(xab, self.gamma);
        s.tape.add(base, update)
    }
}

/// Wraps the q, k and v projections of every block with a fresh adapter and
/// freezes the whole backbone. Returns the number of adapters created.
pub fn inject(vit: &mut VisionTransformer, store: &mut ParamStore, config: &LoraConfig, seed: u64) -> Result<usize> {
    if adapters(vit).next().is_some() {
        return Err(Error::Contract("LoRA adapters are already injected".into()));
    }
    let d = vit.config.d_model;
    config.validate(d, d)?;
    let backbone = vit.backbone_params();
    let mut created = 0;
    for (l, block) in vit.blocks.iter_mut().enumerate() {
        for (j, (tag, proj)) in [("q", &mut block.attn.q), ("k", &mut block.attn.k), ("v", &mut block.attn.v)]
            .into_iter()
            .enumerate()
        {
            let Projection::Plain(base) = proj else { unreachable!("checked above") };
            let name = store.name(base.weight).trim_end_matches(".weight").to_string();
            debug_assert!(name.ends_with(tag));
            let adapter_seed = derive_seed(seed, &[l as u64, j as u64]);
            let adapter = LoraAdapter::attach(store, &name, base.clone(), config, adapter_seed)?;
            *proj = Projection::Adapted(adapter);
            created += 1;
        }
    }
    for id in backbone {
        store.set_trainable(id, false);
    }
    Ok(created)
}

/// Adapters currently attached to `vit`, block by block in q, k, v order.
pub fn adapters(vit: &VisionTransformer) -> impl Iterator<Item = &LoraAdapter> {
    vit.blocks.iter().flat_map(|b| {
        [&b.attn.q, &b.attn.k, &b.attn.v].into_iter().filter_map(|p| match p {
            Projection::Adapted(a) => Some(a),
            Projection::Plain(_) => None,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn linear_in(store: &mut ParamStore, w: Tensor) -> Linear {
        let (out_dim, in_dim) = w.dims2().unwrap();
        let weight = store.add("base.weight", w, true).unwrap();
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    fn run(store: &ParamStore, adapter: &LoraAdapter, x: &Tensor, mode: Mode) -> Tensor {
        let mut s = Session::new(store);
        let xv = s.input(x.clone());
        let out = adapter.apply(&mut s, xv, mode).unwrap();
        s.value(out).detached()
    }

    #[test]
    fn init_zero_b_gamma_and_determinism() {
        let cfg = LoraConfig::default();
        let f = lora_init(16, 12, &cfg, 9).unwrap();
        assert!(f.b.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.gamma, 2.0);
        assert_eq!(f.a.shape(), &[4, 12]);
        assert_eq!(f.b.shape(), &[16, 4]);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(f.a.data().iter().all(|v| v.abs() <= bound));
        let g = lora_init(16, 12, &cfg, 9).unwrap();
        assert_eq!(f.a.data(), g.a.data());
    }

    #[test]
    fn init_rejects_bad_configs() {
        let big_rank = LoraConfig { rank: 7, ..Default::default() };
        assert!(matches!(lora_init(12, 12, &big_rank, 0), Err(Error::Config(_))));
        let zero_rank = LoraConfig { rank: 0, ..Default::default() };
        assert!(lora_init(12, 12, &zero_rank, 0).is_err());
        let bad_drop = LoraConfig { dropout: 1.0, ..Default::default() };
        assert!(lora_init(12, 12, &bad_drop, 0).is_err());
    }

    #[test]
    fn zero_b_returns_base_projection_exactly() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let base = linear_in(&mut store, normal_tensor(&[10, 8], 1.0, &mut rng));
        let adapter = LoraAdapter::attach(&mut store, "base", base.clone(), &LoraConfig::default(), 3).unwrap();
        let x = normal_tensor(&[5, 8], 1.0, &mut rng);
        for mode in [Mode::eval(), Mode::train(42)] {
            let out = run(&store, &adapter, &x, mode);
            let mut s = Session::new(&store);
            let xv = s.input(x.clone());
            let plain = base.forward(&mut s, xv).unwrap();
            assert_eq!(out.data(), s.value(plain).data());
        }
    }

    #[test]
    fn identity_composition() {
        let d = 4;
        let mut store = ParamStore::new();
        let base = linear_in(&mut store, Tensor::zeros(&[d, d]));
        let a = store.add("a", Tensor::identity(d), true).unwrap();
        let b = store.add("b", Tensor::identity(d), true).unwrap();
        let adapter = LoraAdapter {
            base,
            a,
            b,
            gamma: 1.0,
            config: LoraConfig { rank: d, alpha: d as f64, dropout: 0.0 },
            name: "id".into(),
        };
        let x = normal_tensor(&[3, d], 1.0, &mut seeded(2));
        assert_eq!(run(&store, &adapter, &x, Mode::train(1)).data(), x.data());
    }

    #[test]
    fn matches_materialized_update() {
        let mut rng = seeded(3);
        let (d1, d2, r) = (9, 7, 3);
        let mut store = ParamStore::new();
        let w = normal_tensor(&[d1, d2], 1.0, &mut rng);
        let base = linear_in(&mut store, w.clone());
        let cfg = LoraConfig { rank: r, alpha: 5.0, dropout: 0.3 };
        let adapter = LoraAdapter::attach(&mut store, "base", base, &cfg, 4).unwrap();
        let b = normal_tensor(&[d1, r], 1.0, &mut rng);
        store.get_mut(adapter.b).data_mut().copy_from_slice(b.data());
        let a = store.get(adapter.a).clone();
        let x = normal_tensor(&[4, d2], 1.0, &mut rng);

        // Oracle: W' = W + γ·B·A, then x·W'ᵀ with explicit loops.
        let gamma = cfg.gamma();
        let mut merged = w.data().to_vec();
        for i in 0..d1 {
            for j in 0..d2 {
                merged[i * d2 + j] += gamma * (0..r).map(|k| b.get2(i, k) * a.get2(k, j)).sum::<f64>();
            }
        }
        let out = run(&store, &adapter, &x, Mode::eval());
        for n in 0..4 {
            for i in 0..d1 {
                let expect: f64 = (0..d2).map(|j| x.get2(n, j) * merged[i * d2 + j]).sum();
                assert!((out.get2(n, i) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_only_touches_adapter_path_and_is_seeded() {
        let mut rng = seeded(5);
        let mut store = ParamStore::new();
        let base = linear_in(&mut store, normal_tensor(&[8, 8], 1.0, &mut rng));
        let cfg = LoraConfig { rank: 2, alpha: 2.0, dropout: 0.5 };
        let adapter = LoraAdapter::attach(&mut store, "base", base, &cfg, 6).unwrap();
        store.get_mut(adapter.b).data_mut().copy_from_slice(&normal_tensor(&[8, 2], 1.0, &mut rng).into_data());
        let x = normal_tensor(&[6, 8], 1.0, &mut rng);
        let eval = run(&store, &adapter, &x, Mode::eval());
        let t1 = run(&store, &adapter, &x, Mode::train(10));
        let t2 = run(&store, &adapter, &x, Mode::train(10));
        let t3 = run(&store, &adapter, &x, Mode::train(11));
        assert_eq!(t1, t2);
        assert_ne!(t1, eval);
        assert_ne!(t1, t3);
    }

    #[test]
    fn doubling_alpha_doubles_the_update() {
        let mut rng = seeded(7);
        let mut store = ParamStore::new();
        let w = normal_tensor(&[8, 8], 1.0, &mut rng);
        let base = linear_in(&mut store, w);
        let cfg = LoraConfig { rank: 2, alpha: 3.0, dropout: 0.0 };
        let mut adapter = LoraAdapter::attach(&mut store, "base", base.clone(), &cfg, 8).unwrap();
        store.get_mut(adapter.b).data_mut().copy_from_slice(&normal_tensor(&[8, 2], 1.0, &mut rng).into_data());
        let x = normal_tensor(&[3, 8], 1.0, &mut rng);
        let mut s = Session::new(&store);
        let xv = s.input(x.clone());
        let plain = base.forward(&mut s, xv).unwrap();
        let plain = s.value(plain).detached();
        let one = run(&store, &adapter, &x, Mode::eval());
        adapter.gamma = LoraConfig { alpha: 6.0, ..cfg }.gamma();
        let two = run(&store, &adapter, &x, Mode::eval());
        for ((p, o), t) in plain.data().iter().zip(one.data()).zip(two.data()) {
            assert!(((t - p) - 2.0 * (o - p)).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let mut store = ParamStore::new();
        let base = linear_in(&mut store, Tensor::zeros(&[8, 8]));
        let adapter = LoraAdapter::attach(&mut store, "base", base, &LoraConfig { rank: 2, ..Default::default() }, 0).unwrap();
        let mut s = Session::new(&store);
        let x = s.input(Tensor::zeros(&[2, 5]));
        assert!(matches!(adapter.apply(&mut s, x, Mode::eval()), Err(Error::Dimension { .. })));
    }
}

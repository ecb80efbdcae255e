use entclip::encoders::{Mode, VisionTransformer, VitConfig, Vocabulary};
use entclip::exec::Strategy;
use entclip::lora::{adapters, inject, LoraConfig};
use entclip::rng::{normal_tensor, seeded};
use entclip::tensor::{ParamStore, Session, Tensor};
use entclip::trainer::{
    adamw_step, train, write_synthetic_dataset, AdamWHyper, AdamWState, Manifest, Model, TrainConfig,
};

fn image(seed: u64) -> Tensor {
    normal_tensor(&[3, 32, 32], 0.3, &mut seeded(seed))
}

#[test]
fn one_optimizer_step_moves_adapters_but_not_the_backbone() {
    let mut store = ParamStore::new();
    let mut vit = VisionTransformer::new(&mut store, "vit", &VitConfig::default(), 1).unwrap();
    let cfg = LoraConfig { dropout: 0.0, ..LoraConfig::default() };
    assert_eq!(inject(&mut vit, &mut store, &cfg, 2).unwrap(), 12);
    let img = image(3);
    let before = vit.encode_image(&store, &img).unwrap();
    let frozen: Vec<Tensor> = vit.backbone_params().iter().map(|&id| store.get(id).clone()).collect();

    let mut s = Session::new(&store);
    let enc = vit.forward(&mut s, &[&img], Mode::eval()).unwrap();
    let sq = s.tape.mul(enc.final_tokens, enc.final_tokens).unwrap();
    let loss = s.tape.sum(sq);
    let grads = s.backward(loss).unwrap();
    let mut full = entclip::tensor::Gradients::new(store.len());
    full.accumulate(&grads);
    for id in store.trainable_ids() {
        if full.get(id).is_none() {
            full.insert(id, vec![0.0; store.get(id).numel()]);
        }
    }
    let mut opt = AdamWState::new(&store);
    let hp = AdamWHyper { lr: 1e-2, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 };
    adamw_step(&mut store, &full, &mut opt, &hp).unwrap();

    let after = vit.encode_image(&store, &img).unwrap();
    assert!(after.final_tokens.max_abs_diff(&before.final_tokens) > 1e-6);
    for (id, t) in vit.backbone_params().iter().zip(&frozen) {
        assert_eq!(store.get(*id), t);
    }
    assert!(adapters(&vit).all(|a| store.get(a.b).data().iter().any(|&v| v != 0.0)));
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.vit.d_model = 16;
    cfg.vit.joint_dim = 8;
    cfg.text.d_model = 16;
    cfg.lora.rank = 2;
    cfg.augment.mask_patch = 8;
    cfg.batch_size = 6;
    cfg.epochs = 1;
    cfg.max_steps = Some(3);
    cfg
}

#[test]
fn parallel_and_sequential_training_agree_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(&write_synthetic_dataset(dir.path(), 2, 32, 9).unwrap()).unwrap();
    let cfg = small_config();
    let (a, _, la) = train(&cfg, &manifest, None, Strategy::Parallel).unwrap();
    let (b, _, lb) = train(&cfg, &manifest, None, Strategy::Sequential).unwrap();
    assert_eq!(la, lb);
    for ((_, _, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn ablation_arms_build_from_toggles_alone() {
    for (name, ablation) in entclip::trainer::Ablation::arms() {
        let cfg = TrainConfig { ablation, ..small_config() };
        let model = Model::new(&cfg, Vocabulary::default()).unwrap();
        assert_eq!(adapters(&model.vit).count() > 0, ablation.lora, "{name}");
        let emb = model.image_embeddings(&[image(1), image(2)], Strategy::default()).unwrap();
        assert_eq!(emb.shape(), &[2, 8], "{name}");
    }
}

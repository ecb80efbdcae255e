use serde::Serialize;

use crate::augment::draw_slerp_pairs;
use crate::encoders::Mode;
use crate::error::Result;
use crate::exec::Strategy;
use crate::objectives::{build_prompt, LossWeights, CLASS_NAMES};
use crate::rng::{derive_seed, seeded, uniform_tensor};
use crate::tensor::{finite_diff_check, GradCheckReport, Tensor};

use super::config::TrainConfig;
use super::model::Model;
use super::train::load_vocabulary;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Four seeded random images with two same-class pairs.
pub fn gradcheck_batch(config: &TrainConfig) -> (Vec<Tensor>, Vec<usize>) {
    let v = &config.vit;
    let mut rng = seeded(derive_seed(config.seed, &[0x6763]));
    let images = (0..4)
        .map(|_| {
            let t = uniform_tensor(&[v.channels, v.image_size, v.image_size], 0.5, &mut rng);
            Tensor::new(t.shape(), t.data().iter().map(|x| x + 0.5).collect()).expect("same shape")
        })
        .collect();
    (images, vec![0, 0, 3, 3])
}

/// Central-difference check of the training loss with respect to every
/// trainable tensor, end to end through encoder, pooling, augmentation and
/// head, in training mode with fixed dropout masks and interpolation pairs.
pub fn check_training_loss(model: &Model, images: &[Tensor], labels: &[usize], exec: Strategy) -> Result<GradCheckReport> {
    let cfg = &model.config;
    let prompts: Vec<String> = labels
        .iter()
        .map(|&l| build_prompt(CLASS_NAMES[l], Some("random test pattern")))
        .collect::<Result<_>>()?;
    let texts = model.text_embeddings(&prompts, Strategy::Sequential)?;
    let pairs = if cfg.ablation.sfa {
        draw_slerp_pairs(labels, &mut seeded(derive_seed(cfg.seed, &[0x5fa])), cfg.sfa_count().max(1))
    } else {
        Vec::new()
    };
    let refs: Vec<&Tensor> = images.iter().collect();
    let mode = Mode::train(derive_seed(cfg.seed, &[0x6d6f]));
    finite_diff_check(
        &model.store,
        |s| {
            let e = model.embed_batch(s, &refs, mode)?;
            Ok(model.head_loss(s, e, labels, &texts, &pairs)?.total)
        },
        GRADCHECK_STEP,
        exec,
    )
}

/// The full-loss check plus each loss term on its own.
pub fn gradcheck_suite(config: &TrainConfig, exec: Strategy) -> Result<Vec<GradCheckEntry>> {
    let (images, labels) = gradcheck_batch(config);
    let vocab = load_vocabulary(config)?;
    let variants: [(&'static str, LossWeights); 3] = [
        ("total", config.loss),
        ("classification", LossWeights { mu2: 0.0, ..config.loss }),
        ("contrastive", LossWeights { mu1: 0.0, ..config.loss }),
    ];
    variants
        .into_iter()
        .map(|(name, loss)| {
            let model = Model::new(&TrainConfig { loss, ..config.clone() }, vocab.clone())?;
            let r = check_training_loss(&model, &images, &labels, exec)?;
            Ok(GradCheckEntry {
                name,
                coordinates: r.coordinates,
                max_rel_error: r.max_rel_error,
            })
        })
        .collect()
}

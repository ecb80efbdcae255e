use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::augment::{augment_image, draw_slerp_pairs};
use crate::encoders::{Mode, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::objectives::class_name;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Gradients, Session, Tensor};

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::data::Manifest;
use super::model::Model;
use super::optim::{adamw_step, AdamWHyper, AdamWState};

/// Per-epoch means over the batches of that epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub classification: f64,
    pub contrastive: f64,
    /// Share of real (non-interpolated) training rows classified correctly.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Decoded training inputs.
pub struct TrainData {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Per-record prompt embeddings, `[n × d_e]`.
    pub texts: Tensor,
}

impl TrainData {
    pub fn from_manifest(model: &Model, manifest: &Manifest, exec: Strategy) -> Result<Self> {
        Ok(Self {
            images: manifest.load_images(model.config.vit.image_size, exec)?,
            labels: manifest.labels.clone(),
            texts: model.text_embeddings(&manifest.prompts()?, exec)?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct StepStats {
    loss: f64,
    classification: f64,
    contrastive: f64,
    correct: usize,
}

/// Gradients of the batch loss, computed in two stages so the per-image
/// encoder passes can run in parallel: every image gets its own tape up to
/// its embedding; a small batch tape holds the augmentation, head and losses
/// and yields the gradient with respect to each embedding, which is then
/// pushed back through the image tapes. Contributions are summed in batch
/// order.
fn batch_gradients(
    model: &Model,
    data: &TrainData,
    batch: &[usize],
    epoch: usize,
    step: usize,
    exec: Strategy,
) -> Result<(Gradients, StepStats)> {
    let cfg = &model.config;
    let encoded = exec
        .map(batch.len(), |i| {
            let idx = batch[i];
            let mut rng = seeded(derive_seed(cfg.augment.rng_seed, &[epoch as u64, idx as u64]));
            let image = augment_image(&data.images[idx], class_name(data.labels[idx])?, &cfg.augment, &mut rng)?;
            let mut s = Session::new(&model.store);
            let mode = Mode::train(derive_seed(cfg.seed, &[step as u64, i as u64]));
            let e = model.embed_batch(&mut s, &[&image], mode)?;
            Ok((s, e))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let d = model.joint_dim();
    let rows: Vec<f64> = encoded.iter().flat_map(|(s, e)| s.value(*e).data().to_vec()).collect();
    let embeddings = Tensor::new(&[batch.len(), d], rows)?;
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let text_rows: Vec<Vec<f64>> = batch.iter().map(|&i| data.texts.row(i).to_vec()).collect();
    let texts = Tensor::from_rows(&text_rows)?;
    let pairs = if cfg.ablation.sfa {
        draw_slerp_pairs(&labels, &mut seeded(derive_seed(cfg.seed, &[step as u64, 0x5fa])), cfg.sfa_count())
    } else {
        Vec::new()
    };

    let mut s = Session::new(&model.store);
    let e = s.tape.variable(embeddings.clone());
    let parts = model.head_loss(&mut s, e, &labels, &texts, &pairs)?;
    let stats = StepStats {
        loss: s.value(parts.total).item(),
        classification: s.value(parts.classification).item(),
        contrastive: s.value(parts.contrastive).item(),
        correct: model
            .predict(&embeddings)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count(),
    };
    if !stats.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is {} at step {step} (classification {}, contrastive {})",
            stats.loss, stats.classification, stats.contrastive
        )));
    }
    let mut grads = s.backward(parts.total)?;
    let de = s
        .tape
        .grad(e)
        .ok_or_else(|| Error::Numeric("no gradient reached the image embeddings".into()))?
        .to_vec();

    let per_image = exec
        .map_vec(encoded.into_iter().enumerate().collect(), |(i, (mut s, e))| {
            s.backward_with(e, de[i * d..(i + 1) * d].to_vec())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for g in &per_image {
        grads.accumulate(g);
    }
    Ok((grads, stats))
}

/// Trainable tensors the loss did not reach get explicit zero gradients.
fn fill_missing(model: &Model, grads: &mut Gradients) -> Result<()> {
    for id in model.store.trainable_ids() {
        match grads.get(id) {
            None => grads.insert(id, vec![0.0; model.store.get(id).numel()]),
            Some(g) if g.iter().any(|v| !v.is_finite()) => {
                return Err(Error::Numeric(format!("non-finite gradient for {}", model.store.name(id))))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Where the best-by-training-loss checkpoint goes for a given output path.
pub fn best_checkpoint_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

/// Runs the joint training loop. With `out`, writes the final checkpoint
/// there and the lowest-epoch-loss checkpoint next to it.
pub fn train_model(
    model: &mut Model,
    opt: &mut AdamWState,
    data: &TrainData,
    out: Option<&Path>,
    exec: Strategy,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Evaluation("cannot train on an empty manifest".into()));
    }
    let cfg = model.config.clone();
    let hyper = AdamWHyper {
        lr: cfg.lr,
        betas: cfg.betas,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        if log.steps >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(derive_seed(cfg.seed, &[epoch as u64, 0x5eed])));
        let (mut sums, mut batches, mut seen) = (StepStats::default(), 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if log.steps >= max_steps {
                break;
            }
            let (mut grads, stats) = batch_gradients(model, data, batch, epoch, log.steps, exec)?;
            fill_missing(model, &mut grads)?;
            adamw_step(&mut model.store, &grads, opt, &hyper)?;
            log.steps += 1;
            batches += 1;
            seen += batch.len();
            sums.loss += stats.loss;
            sums.classification += stats.classification;
            sums.contrastive += stats.contrastive;
            sums.correct += stats.correct;
        }
        let n = batches as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            steps: log.steps,
            loss: sums.loss / n,
            classification: sums.classification / n,
            contrastive: sums.contrastive / n,
            accuracy: sums.correct as f64 / seen as f64,
        };
        log::info!(
            "epoch {} step {}: loss {:.4} (cls {:.4}, con {:.4}) train acc {:.3}",
            entry.epoch,
            entry.steps,
            entry.loss,
            entry.classification,
            entry.contrastive,
            entry.accuracy
        );
        if let Some(out) = out {
            if entry.loss < best {
                best = entry.loss;
                save_checkpoint(&best_checkpoint_path(out), model, opt, entry.epoch, log.steps)?;
            }
        }
        log.epochs.push(entry);
    }
    if let Some(out) = out {
        save_checkpoint(out, model, opt, log.epochs.len(), log.steps)?;
    }
    Ok(log)
}

/// Loads the vocabulary named by the config, or the built-in one.
pub fn load_vocabulary(config: &TrainConfig) -> Result<Vocabulary> {
    match &config.vocab {
        Some(p) => Vocabulary::load(p),
        None => Ok(Vocabulary::default()),
    }
}

/// Builds a fresh model from `config`, trains it on `manifest` and returns
/// it with its optimizer state and log.
pub fn train(
    config: &TrainConfig,
    manifest: &Manifest,
    out: Option<&Path>,
    exec: Strategy,
) -> Result<(Model, AdamWState, TrainLog)> {
    let mut model = Model::new(config, load_vocabulary(config)?)?;
    let data = TrainData::from_manifest(&model, manifest, exec)?;
    let mut opt = AdamWState::new(&model.store);
    let log = train_model(&mut model, &mut opt, &data, out, exec)?;
    Ok((model, opt, log))
}

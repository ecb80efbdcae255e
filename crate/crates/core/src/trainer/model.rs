use crate::augment::{slerp_rows, SlerpPair};
use crate::encoders::{Linear, Mode, TextEncoder, VisionTransformer, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Strategy;
use crate::fusion::{FinalClsHead, FusionModule};
use crate::lora::inject;
use crate::objectives::{build_prompt, classification_loss, contrastive_loss, total_loss, CLASS_NAMES, NUM_CLASSES};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{ops, ParamStore, Session, Tensor, Var};

use super::config::TrainConfig;

/// How per-layer CLS tokens become the image embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum Pooler {
    Fusion(FusionModule),
    FinalCls(FinalClsHead),
}

/// Image tower, pooling, classifier head and the frozen text tower.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub vit: VisionTransformer,
    pub pooler: Pooler,
    pub head: Linear,
    pub text: TextEncoder,
    /// Generic prompt embedding per class, `[7 × d_e]`.
    pub class_text: Tensor,
}

/// Loss terms of one batch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub classification: Var,
    pub contrastive: Var,
}

impl Model {
    pub fn new(config: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let joint = config.vit.joint_dim;
        let mut store = ParamStore::new();
        let mut vit = VisionTransformer::new(&mut store, "vit", &config.vit, derive_seed(seed, &[1]))?;
        if config.ablation.lora {
            inject(&mut vit, &mut store, &config.lora, derive_seed(seed, &[2]))?;
        }
        let (d, blocks) = (config.vit.d_model, config.vit.num_blocks);
        let pooler = if config.ablation.mfa {
            Pooler::Fusion(FusionModule::new(&mut store, "fusion", &config.fusion, blocks, d, joint, derive_seed(seed, &[3]))?)
        } else {
            Pooler::FinalCls(FinalClsHead::new(&mut store, "pool", d, joint, derive_seed(seed, &[3]))?)
        };
        let head = Linear::new(&mut store, "head", joint, NUM_CLASSES, true, &mut seeded(derive_seed(seed, &[4])))?;
        let text = TextEncoder::new(&config.text, vocab, joint)?;
        let rows = CLASS_NAMES
            .iter()
            .map(|c| text.encode_text(&build_prompt(c, None)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            store,
            vit,
            pooler,
            head,
            text,
            class_text: Tensor::from_rows(&rows)?,
        })
    }

    pub fn joint_dim(&self) -> usize {
        self.config.vit.joint_dim
    }

    /// Unit image embeddings `[B × d_e]` on the session's tape.
    pub fn embed_batch(&self, s: &mut Session<'_>, images: &[&Tensor], mode: Mode) -> Result<Var> {
        let enc = self.vit.forward(s, images, mode)?;
        match &self.pooler {
            Pooler::Fusion(f) => f.fuse(s, &enc.cls_per_layer, mode),
            Pooler::FinalCls(h) => h.pool(s, &enc.cls_per_layer),
        }
    }

    /// Inference embeddings of `images`, one row each.
    pub fn image_embeddings(&self, images: &[Tensor], exec: Strategy) -> Result<Tensor> {
        let rows = exec
            .map(images.len(), |i| {
                let mut s = Session::new(&self.store);
                let e = self.embed_batch(&mut s, &[&images[i]], Mode::eval())?;
                Ok(s.value(e).data().to_vec())
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        rows_tensor(rows, self.joint_dim())
    }

    pub fn text_embeddings(&self, prompts: &[String], exec: Strategy) -> Result<Tensor> {
        let rows = exec
            .map(prompts.len(), |i| self.text.encode_text(&prompts[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        rows_tensor(rows, self.joint_dim())
    }

    /// Head logits `[n × 7]` for plain embeddings.
    pub fn logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (n, d) = embeddings.dims2()?;
        let w = self.store.get(self.head.weight);
        let mut out = ops::matmul_nt(embeddings.data(), w.data(), n, d, NUM_CLASSES);
        if let Some(b) = self.head.bias {
            let b = self.store.get(b).data();
            for row in out.chunks_mut(NUM_CLASSES) {
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        Tensor::new(&[n, NUM_CLASSES], out)
    }

    /// Arg-max class per embedding row; ties go to the lower index.
    pub fn predict(&self, embeddings: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(embeddings)?;
        Ok((0..logits.shape()[0])
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Weighted loss over the real rows of `embeddings` and, when `pairs` is
    /// non-empty, their interpolated same-class features. Real rows pair
    /// with `texts`; interpolated rows pair with their class prompt.
    pub fn head_loss(
        &self,
        s: &mut Session<'_>,
        embeddings: Var,
        labels: &[usize],
        texts: &Tensor,
        pairs: &[SlerpPair],
    ) -> Result<LossParts> {
        let n = s.tape.shape(embeddings)[0];
        if labels.len() != n || texts.shape()[0] != n {
            return Err(Error::dim("head_loss", &[n], &[labels.len(), texts.shape()[0]]));
        }
        let (features, all_labels, text_rows) = if pairs.is_empty() {
            (embeddings, labels.to_vec(), texts.clone())
        } else {
            let firsts: Vec<usize> = pairs.iter().map(|p| p.first).collect();
            let seconds: Vec<usize> = pairs.iter().map(|p| p.second).collect();
            let lambdas: Vec<f64> = pairs.iter().map(|p| p.lambda).collect();
            let a = s.tape.select_rows(embeddings, &firsts)?;
            let b = s.tape.select_rows(embeddings, &seconds)?;
            let aug = slerp_rows(&mut s.tape, a, b, &lambdas)?;
            let features = s.tape.concat_rows(&[embeddings, aug])?;
            let mut all = labels.to_vec();
            all.extend(firsts.iter().map(|&i| labels[i]));
            let mut rows: Vec<Vec<f64>> = (0..n).map(|r| texts.row(r).to_vec()).collect();
            rows.extend(firsts.iter().map(|&i| self.class_text.row(labels[i]).to_vec()));
            (features, all, Tensor::from_rows(&rows)?)
        };
        let classification = classification_loss(s, features, &all_labels, &self.head)?;
        let u = s.input(text_rows);
        let contrastive = contrastive_loss(&mut s.tape, features, u, self.config.loss.temperature)?;
        let total = total_loss(&mut s.tape, classification, contrastive, &self.config.loss)?;
        Ok(LossParts {
            total,
            classification,
            contrastive,
        })
    }
}

fn rows_tensor(rows: Vec<Vec<f64>>, width: usize) -> Result<Tensor> {
    let n = rows.len();
    Tensor::new(&[n, width], rows.concat())
}

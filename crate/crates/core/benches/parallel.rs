use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use entclip::encoders::Vocabulary;
use entclip::exec::Strategy;
use entclip::rng::{seeded, uniform_tensor};
use entclip::tensor::Tensor;
use entclip::trainer::{check_training_loss, gradcheck_batch, Model, TrainConfig};

const STRATEGIES: [Strategy; 2] = [Strategy::Sequential, Strategy::Parallel];

fn embeddings(c: &mut Criterion) {
    let model = Model::new(&TrainConfig::default(), Vocabulary::default()).unwrap();
    let mut rng = seeded(1);
    let images: Vec<Tensor> = (0..32).map(|_| uniform_tensor(&[3, 32, 32], 0.5, &mut rng)).collect();
    let mut group = c.benchmark_group("image_embeddings_32");
    for exec in STRATEGIES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| model.image_embeddings(&images, exec).unwrap())
        });
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut cfg = TrainConfig::default();
    cfg.vit.image_size = 16;
    cfg.vit.d_model = 16;
    cfg.vit.num_blocks = 2;
    cfg.vit.joint_dim = 8;
    cfg.text.d_model = 16;
    cfg.lora.rank = 2;
    cfg.fusion.k = 2;
    cfg.augment.mask_patch = 8;
    let model = Model::new(&cfg, Vocabulary::default()).unwrap();
    let (images, labels) = gradcheck_batch(&cfg);
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for exec in STRATEGIES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| check_training_loss(&model, &images, &labels, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, embeddings, gradcheck);
criterion_main!(benches);

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashSet;
use std::time::Instant;

use entclip::augment::{masked_patch_count, patch_mask, sample_slerp_batch, slerp, LabeledFeature};
use entclip::encoders::{Mode, VisionTransformer, VitConfig};
use entclip::exec::Strategy;
use entclip::lora::{inject, LoraConfig};
use entclip::objectives::contrastive_loss;
use entclip::retrieval::{classification_report, mrr, rank_queries, recall_at_k, EmbeddingIndex, RankedResult};
use entclip::rng::{normal_tensor, seeded};
use entclip::tensor::{ParamStore, Session, Tape, Tensor};
use entclip::trainer::{
    check_training_loss, evaluate, gradcheck_batch, load_vocabulary, read_checkpoint, train, write_checkpoint,
    write_synthetic_dataset, Ablation, EvalReport, Manifest, Model, Task, TrainConfig, TrainData,
};
use rand::Rng;

const DESK: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"));
const GRADCHECK: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/gradcheck.toml"));

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn(&mut Shared) -> Outcome;

/// State reused across criteria so the desk run is trained once.
#[derive(Default)]
struct Shared {
    dir: Option<tempfile::TempDir>,
    manifest: Option<Manifest>,
    desk: Option<(Model, Scores)>,
}

#[derive(Clone, Copy, Debug)]
struct Scores {
    accuracy: f64,
    i2i_r1: f64,
    i2i_mrr: f64,
    t2i_r1: f64,
    t2i_mrr: f64,
    seconds: f64,
}

impl Shared {
    fn manifest(&mut self) -> Manifest {
        if self.manifest.is_none() {
            let dir = tempfile::tempdir().expect("temp dir");
            let path = write_synthetic_dataset(dir.path(), 20, 32, 0).expect("synthetic data");
            self.manifest = Some(Manifest::load(&path).expect("manifest"));
            self.dir = Some(dir);
        }
        self.manifest.clone().unwrap()
    }

    fn desk(&mut self) -> (Model, Scores) {
        if self.desk.is_none() {
            let manifest = self.manifest();
            let r = run_arm(&desk_config(), &manifest);
            self.desk = Some(r);
        }
        self.desk.clone().unwrap()
    }
}

fn desk_config() -> TrainConfig {
    TrainConfig::from_toml(DESK).expect("desk config parses")
}

fn run_arm(cfg: &TrainConfig, manifest: &Manifest) -> (Model, Scores) {
    let t = Instant::now();
    let (model, _, _) = train(cfg, manifest, None, Strategy::default()).expect("training runs");
    let seconds = t.elapsed().as_secs_f64();
    let data = TrainData::from_manifest(&model, manifest, Strategy::default()).expect("data");
    let retrieval = |task| match evaluate(&model, &data, task, Strategy::default()).expect("eval") {
        EvalReport::Retrieval(r) => (r.recall_at_1, r.mrr),
        EvalReport::Classification(_) => unreachable!(),
    };
    let accuracy = match evaluate(&model, &data, Task::Classification, Strategy::default()).expect("eval") {
        EvalReport::Classification(c) => c.accuracy,
        EvalReport::Retrieval(_) => unreachable!(),
    };
    let (i2i_r1, i2i_mrr) = retrieval(Task::ImageToImage);
    let (t2i_r1, t2i_mrr) = retrieval(Task::TextToImage);
    let scores = Scores { accuracy, i2i_r1, i2i_mrr, t2i_r1, t2i_mrr, seconds };
    (model, scores)
}

fn gradient_check(_: &mut Shared) -> Outcome {
    let cfg = TrainConfig::from_toml(GRADCHECK).expect("gradcheck config parses");
    let all_on = cfg.ablation == Ablation::default() && cfg.augment.enable_mask;
    let (images, labels) = gradcheck_batch(&cfg);
    let model = Model::new(&cfg, load_vocabulary(&cfg).unwrap()).unwrap();
    let t = Instant::now();
    let r = check_training_loss(&model, &images, &labels, Strategy::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        all_on && cfg.vit.d_model == 16 && images.len() == 4 && r.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "max rel error {:.2e} < 1e-4 over {} coordinates, d_model {}, batch {}, {secs:.1}s < 60s",
            r.max_rel_error,
            r.coordinates,
            cfg.vit.d_model,
            images.len()
        ),
    )
}

fn lora_transparency(_: &mut Shared) -> Outcome {
    let cfg = VitConfig::default();
    let mut store = ParamStore::new();
    let mut vit = VisionTransformer::new(&mut store, "vit", &cfg, 11).unwrap();
    let (plain_store, plain_vit) = (store.clone(), vit.clone());
    inject(&mut vit, &mut store, &LoraConfig::default(), 12).unwrap();
    let mut rng = seeded(13);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let img = normal_tensor(&[3, cfg.image_size, cfg.image_size], 0.5, &mut rng);
        for mode in [Mode::eval(), Mode::train(i)] {
            let run = |store: &ParamStore, vit: &VisionTransformer| {
                let mut s = Session::new(store);
                let enc = vit.forward(&mut s, &[&img], mode).unwrap();
                let mut rows = vec![s.value(enc.final_tokens).clone()];
                rows.extend(enc.cls_per_layer.iter().map(|v| s.value(*v).clone()));
                rows
            };
            for (a, b) in run(&plain_store, &plain_vit).iter().zip(run(&store, &vit)) {
                worst = worst.max(a.max_abs_diff(&b));
            }
        }
    }
    outcome(worst < 1e-12, format!("max |Δ| {worst:.1e} < 1e-12 on 10 inputs, eval and train mode"))
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v = normal_tensor(&[d], 1.0, &mut seeded(rng.random())).into_data();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn slerp_suite(_: &mut Shared) -> Outcome {
    let mut rng = seeded(21);
    let d = 32;
    let pool: Vec<LabeledFeature> = (0..140)
        .map(|i| LabeledFeature { embedding: unit(&mut rng, d), class_id: i % 7 })
        .collect();
    let generated = sample_slerp_batch(&pool, &mut rng, 1000).unwrap();
    let norm_err = generated
        .iter()
        .map(|f| (f.embedding.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let mut end_err: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (unit(&mut rng, d), unit(&mut rng, d));
        end_err = end_err.max(dist(&slerp(&a, &b, 0.0).unwrap(), &a));
        end_err = end_err.max(dist(&slerp(&a, &b, 1.0).unwrap(), &b));
    }
    let mid = slerp(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mid_err = dist(&mid, &[h, h]);
    let same = unit(&mut rng, d);
    let degenerate = dist(&slerp(&same, &same, 0.3).unwrap(), &same);
    let pass = generated.len() == 1000 && norm_err < 1e-9 && end_err < 1e-9 && mid_err < 1e-12 && degenerate < 1e-12;
    outcome(
        pass,
        format!(
            "1000 same-class pairs |‖s‖−1| {norm_err:.1e} < 1e-9, endpoints {end_err:.1e} < 1e-9, \
             orthogonal midpoint {mid_err:.1e} < 1e-12, identical inputs {degenerate:.1e} < 1e-12"
        ),
    )
}

fn contrastive_value(v: &Tensor, u: &Tensor, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(v.clone()), tape.constant(u.clone()));
    let l = contrastive_loss(&mut tape, a, b, tau).unwrap();
    tape.value(l).item()
}

fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    Tensor::from_rows(&(0..n).map(|_| unit(rng, d)).collect::<Vec<_>>()).unwrap()
}

fn contrastive_oracle(_: &mut Shared) -> Outcome {
    let eye = Tensor::identity(2);
    let two = contrastive_value(&eye, &eye, 1.0);
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let one = unit_rows(&mut seeded(1), 1, 8);
    let single = contrastive_value(&one, &one, 1.0);
    let mut rng = seeded(31);
    let mut asym = 0;
    for i in 0..100 {
        let n = 2 + i % 9;
        let (v, u) = (unit_rows(&mut rng, n, 16), unit_rows(&mut rng, n, 16));
        let tau = rng.random_range(0.05..2.0);
        if contrastive_value(&v, &u, tau).to_bits() != contrastive_value(&u, &v, tau).to_bits() {
            asym += 1;
        }
    }
    outcome(
        (two - expected).abs() < 1e-9 && single == 0.0 && asym == 0,
        format!(
            "N=2 identity {two:.12} vs log(1+e^-1) ± 1e-9, N=1 {single}, \
             swapped arguments differ bitwise in {asym}/100 batches"
        ),
    )
}

/// Rank of each candidate by direct counting: candidates with a strictly
/// higher score, or an equal score and a lower index, come first.
fn brute_first_rank(row: &[f64], skip: Option<usize>, relevant: &HashSet<usize>) -> usize {
    relevant
        .iter()
        .map(|&r| {
            1 + (0..row.len())
                .filter(|&j| Some(j) != skip && j != r)
                .filter(|&j| row[j] > row[r] || (row[j] == row[r] && j < r))
                .count()
        })
        .min()
        .unwrap()
}

fn metric_oracles(_: &mut Shared) -> Outcome {
    let n = 20;
    let mut rng = seeded(41);
    let mut mismatches = 0;
    for trial in 0..100 {
        let exclude_self = trial % 2 == 0;
        // A coarse grid of values forces plenty of ties.
        let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let scores = Tensor::new(&[n, n], data).unwrap();
        let relevant: Vec<HashSet<usize>> = (0..n)
            .map(|q| loop {
                let set: HashSet<usize> = (0..n)
                    .filter(|&j| !(exclude_self && j == q) && rng.random_bool(0.2))
                    .collect();
                if !set.is_empty() {
                    break set;
                }
            })
            .collect();
        let ranked = rank_queries(&scores, exclude_self).unwrap();
        let ranks: Vec<usize> = (0..n)
            .map(|q| brute_first_rank(scores.row(q), exclude_self.then_some(q), &relevant[q]))
            .collect();
        let oracle_mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n as f64;
        if mrr(&ranked, &relevant).unwrap() != oracle_mrr {
            mismatches += 1;
        }
        for k in 1..=n {
            let oracle = ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
            if recall_at_k(&ranked, &relevant, k).unwrap() != oracle {
                mismatches += 1;
            }
        }
    }

    let synthetic: Vec<RankedResult> = [1, 2, 4]
        .iter()
        .enumerate()
        .map(|(q, &rank)| RankedResult {
            query: q,
            candidates: (0..5).map(|j| (if j + 1 == rank { 0 } else { j + 10 }, 1.0 - j as f64 / 10.0)).collect(),
        })
        .collect();
    let rel = vec![HashSet::from([0]); 3];
    let hand_mrr = mrr(&synthetic, &rel).unwrap();

    let truth = [0, 0, 1, 1, 2, 2];
    let pred = [0, 1, 1, 1, 2, 0];
    let report = classification_report(&pred, &truth).unwrap();
    let mut confusion = vec![vec![0; 7]; 7];
    confusion[0][0] = 1;
    confusion[0][1] = 1;
    confusion[1][1] = 2;
    confusion[2][2] = 1;
    confusion[2][0] = 1;
    let precision = (0.5 + 2.0 / 3.0 + 1.0) / 3.0;
    let recall = (0.5 + 1.0 + 0.5) / 3.0;
    let f1 = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
    let hand_ok = report.confusion == confusion
        && (report.accuracy - 4.0 / 6.0).abs() < 1e-12
        && (report.precision - precision).abs() < 1e-12
        && (report.recall - recall).abs() < 1e-12
        && (report.f1 - f1).abs() < 1e-12;
    outcome(
        mismatches == 0 && (hand_mrr - 7.0 / 12.0).abs() < 1e-12 && hand_ok,
        format!(
            "{mismatches} mismatches vs brute force over 100 random 20×20 matrices with ties, \
             ranks [1,2,4] MRR {hand_mrr:.12} vs 7/12, hand confusion {}",
            if hand_ok { "matches" } else { "differs" }
        ),
    )
}

fn memorization(shared: &mut Shared) -> Outcome {
    let cfg = desk_config();
    let (_, s) = shared.desk();
    let pass = s.accuracy >= 0.99
        && s.i2i_r1 >= 0.95
        && s.t2i_r1 >= 0.95
        && s.i2i_mrr >= 0.97
        && s.t2i_mrr >= 0.97
        && cfg.max_steps.is_some_and(|m| m <= 300)
        && s.seconds < 600.0;
    outcome(
        pass,
        format!(
            "accuracy {:.3} ≥ 0.99, i2i R@1 {:.3} ≥ 0.95, t2i R@1 {:.3} ≥ 0.95, \
             MRR i2i {:.3} / t2i {:.3} ≥ 0.97, {} steps in {:.0}s < 600s",
            s.accuracy,
            s.i2i_r1,
            s.t2i_r1,
            s.i2i_mrr,
            s.t2i_mrr,
            cfg.max_steps.unwrap_or(0),
            s.seconds
        ),
    )
}

fn ablation_table(shared: &mut Shared) -> Outcome {
    let manifest = shared.manifest();
    let base = desk_config();
    let mut rows = Vec::new();
    for (name, ablation) in Ablation::arms() {
        let scores = if ablation == base.ablation {
            shared.desk().1
        } else {
            run_arm(&TrainConfig { ablation, ..base.clone() }, &manifest).1
        };
        rows.push((name, scores));
    }
    println!("    {:<10} {:>8} {:>8} {:>8} {:>8} {:>8}", "arm", "acc", "i2i@1", "i2i mrr", "t2i@1", "t2i mrr");
    for (name, s) in &rows {
        println!(
            "    {name:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            s.accuracy, s.i2i_r1, s.i2i_mrr, s.t2i_r1, s.t2i_mrr
        );
    }
    let finite = rows.iter().all(|(_, s)| {
        [s.accuracy, s.i2i_r1, s.i2i_mrr, s.t2i_r1, s.t2i_mrr]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    });
    outcome(rows.len() == 4 && finite, "four arms trained from one config by toggles alone")
}

fn persistence(shared: &mut Shared) -> Outcome {
    let manifest = shared.manifest();
    let cfg = TrainConfig { max_steps: Some(20), ..desk_config() };
    let bytes = |exec| {
        let (model, opt, log) = train(&cfg, &manifest, None, exec).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, &opt, log.epochs.len(), log.steps).unwrap();
        (model, buf)
    };
    let (model, first) = bytes(Strategy::default());
    let (_, second) = bytes(Strategy::default());
    let (_, sequential) = bytes(Strategy::Sequential);
    let deterministic = first == second && first == sequential;

    let (restored, _, _) = read_checkpoint(&mut first.as_slice()).unwrap();
    let images = manifest.load_images(cfg.vit.image_size, Strategy::default()).unwrap();
    let before = model.image_embeddings(&images, Strategy::default()).unwrap();
    let after = restored.image_embeddings(&images, Strategy::default()).unwrap();
    let forward_exact = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let ids = manifest.records.iter().map(|r| r.path.clone()).collect();
    let index = EmbeddingIndex::new(ids, before, manifest.labels.iter().map(|&l| Some(l)).collect()).unwrap();
    let mut buf = Vec::new();
    index.write_to(&mut buf).unwrap();
    let back = EmbeddingIndex::read_from(&mut buf.as_slice()).unwrap();
    let index_exact = back == index
        && back.embeddings.data().iter().zip(index.embeddings.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    outcome(
        deterministic && forward_exact && index_exact,
        format!(
            "checkpoint bytes identical across runs and strategies: {deterministic}, \
             restored forward bit-exact: {forward_exact}, index round trip exact: {index_exact}"
        ),
    )
}

fn masking(_: &mut Shared) -> Outcome {
    let (side, patch, fraction) = (224, 16, 0.10);
    let image = Tensor::full(&[3, side, side], 1.0);
    let grid = side / patch;
    let mut counts = HashSet::new();
    let (mut lo, mut hi): (f64, f64) = (1.0, 0.0);
    for seed in 0..100 {
        let out = patch_mask(&image, patch, fraction, &mut seeded(seed)).unwrap();
        let d = out.data();
        let masked = (0..grid * grid)
            .filter(|cell| {
                let (gy, gx) = (cell / grid, cell % grid);
                (0..3).all(|c| {
                    (gy * patch..(gy + 1) * patch)
                        .all(|y| (gx * patch..(gx + 1) * patch).all(|x| d[(c * side + y) * side + x] == 0.0))
                })
            })
            .count();
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
        counts.insert(masked);
        lo = lo.min(zeros);
        hi = hi.max(zeros);
    }
    let expected = masked_patch_count(side, patch, fraction);
    outcome(
        expected == 20 && counts == HashSet::from([20]) && lo >= 0.08 && hi <= 0.12,
        format!("masked patches per image {counts:?} (expected 20), masked fraction in [{lo:.4}, {hi:.4}] ⊆ [0.08, 0.12]"),
    )
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("gradient check of the training loss", gradient_check),
        ("LoRA injection is transparent", lora_transparency),
        ("slerp properties", slerp_suite),
        ("contrastive loss oracles", contrastive_oracle),
        ("retrieval and classification metric oracles", metric_oracles),
        ("memorization of the synthetic set", memorization),
        ("ablation arms", ablation_table),
        ("determinism and persistence", persistence),
        ("patch masking", masking),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check(&mut shared);
        if !o.pass {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

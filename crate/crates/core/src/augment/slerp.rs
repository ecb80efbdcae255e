use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::ModelRng;
use crate::tensor::{CustomBackward, Tape, Tensor, Var};

/// Below this `sin θ` the interpolation falls back to a normalised lerp.
pub const DEGENERATE_SIN: f64 = 1e-6;
const UNIT_TOLERANCE: f64 = 1e-6;

/// A unit joint-space embedding with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeature {
    pub embedding: Vec<f64>,
    pub class_id: usize,
}

/// Interpolation weights for `f1`, `f2` and their derivatives with respect
/// to the cosine `c = f1·f2`.
#[derive(Clone, Copy, Debug)]
struct Weights {
    w1: f64,
    w2: f64,
    dw1: f64,
    dw2: f64,
}

fn weights(cos: f64, lambda: f64) -> Weights {
    let c = cos.clamp(-1.0, 1.0);
    let theta = c.acos();
    let s = theta.sin();
    if s < DEGENERATE_SIN {
        return Weights {
            w1: 1.0 - lambda,
            w2: lambda,
            dw1: 0.0,
            dw2: 0.0,
        };
    }
    let (a, b) = ((1.0 - lambda) * theta, lambda * theta);
    let w1 = a.sin() / s;
    let w2 = b.sin() / s;
    let cot = theta.cos() / s;
    // dθ/dc = −1/sinθ; zero outside the clamp.
    let dtheta = if cos.abs() > 1.0 { 0.0 } else { -1.0 / s };
    Weights {
        w1,
        w2,
        dw1: ((1.0 - lambda) * a.cos() / s - w1 * cot) * dtheta,
        dw2: (lambda * b.cos() / s - w2 * cot) * dtheta,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!("slerp {what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Unnormalised interpolant and its norm.
fn interpolate(f1: &[f64], f2: &[f64], w: Weights) -> (Vec<f64>, f64) {
    let y: Vec<f64> = f1.iter().zip(f2).map(|(a, b)| w.w1 * a + w.w2 * b).collect();
    let n = dot(&y, &y).sqrt();
    (y, n)
}

/// Spherical interpolation between unit vectors:
/// `sin((1−λ)θ)/sinθ · f1 + sin(λθ)/sinθ · f2`, renormalised.
pub fn slerp(f1: &[f64], f2: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if f1.len() != f2.len() {
        return Err(Error::dim("slerp", &[f1.len()], &[f2.len()]));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("slerp λ = {lambda} outside [0, 1]")));
    }
    check_unit(f1, "f1")?;
    check_unit(f2, "f2")?;
    let (y, n) = interpolate(f1, f2, weights(dot(f1, f2), lambda));
    Ok(y.into_iter().map(|v| v / n).collect())
}

struct SlerpBackward {
    lambdas: Vec<f64>,
}

impl CustomBackward for SlerpBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let d = *a.shape().last().unwrap_or(&1);
        let mut ga = vec![0.0; a.numel()];
        let mut gb = vec![0.0; b.numel()];
        for (r, &lambda) in self.lambdas.iter().enumerate() {
            let (f1, f2) = (a.row(r), b.row(r));
            let w = weights(dot(f1, f2), lambda);
            let (_, n) = interpolate(f1, f2, w);
            let out = output.row(r);
            let g = &grad[r * d..(r + 1) * d];
            let og = dot(out, g);
            let gy: Vec<f64> = g.iter().zip(out).map(|(gi, oi)| (gi - oi * og) / n).collect();
            let through_cos = dot(&gy, f1) * w.dw1 + dot(&gy, f2) * w.dw2;
            for j in 0..d {
                ga[r * d + j] = w.w1 * gy[j] + through_cos * f2[j];
                gb[r * d + j] = w.w2 * gy[j] + through_cos * f1[j];
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

/// Row-wise differentiable slerp of `a[n×d]` and `b[n×d]` with one λ per row.
pub fn slerp_rows(tape: &mut Tape, a: Var, b: Var, lambdas: &[f64]) -> Result<Var> {
    let (n, d) = tape.value(a).dims2()?;
    if tape.shape(b) != [n, d] || lambdas.len() != n {
        return Err(Error::dim("slerp_rows", &[n, d, lambdas.len()], tape.shape(b)));
    }
    let mut data = Vec::with_capacity(n * d);
    for (r, &lambda) in lambdas.iter().enumerate() {
        data.extend(slerp(tape.value(a).row(r), tape.value(b).row(r), lambda)?);
    }
    let value = Tensor::new(&[n, d], data)?;
    Ok(tape.custom(
        &[a, b],
        value,
        Box::new(SlerpBackward {
            lambdas: lambdas.to_vec(),
        }),
    ))
}

/// Indices of two distinct same-class items and the interpolation weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlerpPair {
    pub first: usize,
    pub second: usize,
    pub lambda: f64,
}

/// Draws `count` same-class pairs uniformly (with replacement) from all
/// eligible unordered pairs, with `λ ~ U[0, 1)`. Returns nothing, with a
/// warning, when no class has two members.
pub fn draw_slerp_pairs(labels: &[usize], rng: &mut ModelRng, count: usize) -> Vec<SlerpPair> {
    let eligible: Vec<(usize, usize)> = (0..labels.len())
        .flat_map(|i| ((i + 1)..labels.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| labels[i] == labels[j])
        .collect();
    if eligible.is_empty() {
        if count > 0 {
            log::warn!("slerp augmentation skipped: no class has two members in the batch");
        }
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let (first, second) = eligible[rng.random_range(0..eligible.len())];
            SlerpPair {
                first,
                second,
                lambda: rng.random::<f64>(),
            }
        })
        .collect()
}

/// Generates `count` interpolated features from same-class pairs.
pub fn sample_slerp_batch(features: &[LabeledFeature], rng: &mut ModelRng, count: usize) -> Result<Vec<LabeledFeature>> {
    let labels: Vec<usize> = features.iter().map(|f| f.class_id).collect();
    draw_slerp_pairs(&labels, rng, count)
        .into_iter()
        .map(|p| {
            let (a, b) = (&features[p.first], &features[p.second]);
            Ok(LabeledFeature {
                embedding: slerp(&a.embedding, &b.embedding, p.lambda)?,
                class_id: a.class_id,
            })
        })
        .collect()
}

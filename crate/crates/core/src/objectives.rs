//! Prompts, the symmetric image/text contrastive loss, the classification
//! loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::encoders::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Session, Tape, Var};

/// Class names in label order.
pub const CLASS_NAMES: [&str; 7] = ["nose-right", "nose-left", "ear-right", "ear-left", "vc-open", "vc-closed", "throat"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

const UNIT_TOLERANCE: f64 = 1e-6;

/// Label index of a class name. Matching is case-sensitive.
pub fn class_index(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Label(format!("unknown class {name:?}")))
}

pub fn class_name(label: usize) -> Result<&'static str> {
    CLASS_NAMES
        .get(label)
        .copied()
        .ok_or_else(|| Error::Label(format!("label {label} outside [0, {NUM_CLASSES})")))
}

/// `"A photo of a {class}, {description}."`, or the generic
/// `"A photo of a {class}, Image description."` when no description is given.
pub fn build_prompt(class: &str, description: Option<&str>) -> Result<String> {
    class_index(class)?;
    let desc = description
        .map(|d| d.trim().trim_end_matches('.').trim_end())
        .filter(|d| !d.is_empty())
        .unwrap_or("Image description");
    Ok(format!("A photo of a {class}, {desc}."))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Classification weight.
    pub mu1: f64,
    /// Contrastive weight.
    pub mu2: f64,
    /// Fixed divisor of the image/text dot products.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu1: 1.0,
            mu2: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {} and {}", self.mu1, self.mu2)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn check_unit_rows(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize)> {
    let (n, d) = tape.value(x).dims2()?;
    for r in 0..n {
        let norm = tape.value(x).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{what} row {r} has norm {norm}, expected 1")));
        }
    }
    Ok((n, d))
}

/// Symmetric contrastive loss over matched rows of `v` (images) and `u`
/// (texts): the mean of the two row-wise cross-entropies of `v·uᵀ/τ`
/// against the diagonal.
pub fn contrastive_loss(tape: &mut Tape, v: Var, u: Var, temperature: f64) -> Result<Var> {
    let (n, d) = check_unit_rows(tape, v, "image embedding")?;
    let (m, e) = check_unit_rows(tape, u, "text embedding")?;
    if (n, d) != (m, e) {
        return Err(Error::dim("contrastive_loss", &[n, d], &[m, e]));
    }
    if n == 0 {
        return Err(Error::Contract("contrastive loss over an empty batch".into()));
    }
    let ut = tape.transpose(u)?;
    let mut logits = tape.matmul(v, ut)?;
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature);
    }
    let diag: Vec<usize> = (0..n).collect();
    let image_to_text = tape.cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let text_to_image = tape.cross_entropy(logits_t, &diag)?;
    let both = tape.add(image_to_text, text_to_image)?;
    Ok(tape.scale(both, 0.5))
}

/// Mean cross-entropy of `head(features)` against `labels`.
pub fn classification_loss(s: &mut Session<'_>, features: Var, labels: &[usize], head: &Linear) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= head.out_dim) {
        return Err(Error::Label(format!("label {bad} outside [0, {})", head.out_dim)));
    }
    let logits = head.forward(s, features)?;
    s.tape.cross_entropy(logits, labels)
}

/// `μ1·cls + μ2·con` on the tape.
pub fn total_loss(tape: &mut Tape, cls: Var, con: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(cls, w.mu1);
    let b = tape.scale(con, w.mu2);
    tape.add(a, b)
}

/// `μ1·cls + μ2·con` on plain values.
pub fn total_value(cls: f64, con: f64, w: &LossWeights) -> f64 {
    w.mu1 * cls + w.mu2 * con
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Strategy;
    use crate::rng::{normal_tensor, seeded};
    use crate::tensor::{finite_diff_check, ParamStore, Tensor};

    #[test]
    fn prompts() {
        assert_eq!(build_prompt("throat", None).unwrap(), "A photo of a throat, Image description.");
        assert_eq!(
            build_prompt("vc-open", Some("vocal cords fully abducted")).unwrap(),
            "A photo of a vc-open, vocal cords fully abducted."
        );
        assert_eq!(build_prompt("ear-left", Some("Wax present.")).unwrap(), "A photo of a ear-left, Wax present.");
        assert_eq!(build_prompt("ear-left", Some("  ")).unwrap(), "A photo of a ear-left, Image description.");
        assert!(matches!(build_prompt("eyeball", None), Err(Error::Label(_))));
        assert!(matches!(build_prompt("Throat", None), Err(Error::Label(_))));
        for c in CLASS_NAMES {
            assert!(build_prompt(c, Some("x")).unwrap().contains(c));
        }
    }

    fn loss_of(v: &Tensor, u: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(v.clone()), tape.constant(u.clone()));
        let l = contrastive_loss(&mut tape, a, b, 1.0).unwrap();
        tape.value(l).item()
    }

    fn unit_rows(t: Tensor) -> Tensor {
        let (n, d) = t.dims2().unwrap();
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(t.row(r).iter().map(|v| v / norm));
        }
        Tensor::new(&[n, d], data).unwrap()
    }

    #[test]
    fn contrastive_closed_forms() {
        let e = Tensor::identity(2);
        assert!((loss_of(&e, &e) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        let one = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
        assert_eq!(loss_of(&one, &one), 0.0);
    }

    #[test]
    fn contrastive_is_symmetric_and_non_negative() {
        let mut rng = seeded(1);
        for _ in 0..20 {
            let v = unit_rows(normal_tensor(&[5, 4], 1.0, &mut rng));
            let u = unit_rows(normal_tensor(&[5, 4], 1.0, &mut rng));
            let l = loss_of(&v, &u);
            assert_eq!(l.to_bits(), loss_of(&u, &v).to_bits());
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn contrastive_contracts() {
        let mut tape = Tape::new();
        let bad = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        assert!(matches!(contrastive_loss(&mut tape, bad, bad, 1.0), Err(Error::Contract(_))));
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(contrastive_loss(&mut tape, empty, empty, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_alignment_minimises_loss() {
        let v = unit_rows(normal_tensor(&[3, 6], 1.0, &mut seeded(2)));
        let base = loss_of(&v, &v);
        for perm in [[1, 0, 2], [0, 2, 1], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| v.row(i).to_vec()).collect();
            assert!(loss_of(&v, &Tensor::from_rows(&rows).unwrap()) >= base);
        }
    }

    fn head_setup(zero: bool) -> (ParamStore, Linear) {
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, "head", 6, NUM_CLASSES, true, &mut seeded(3)).unwrap();
        if zero {
            store.get_mut(head.weight).data_mut().fill(0.0);
        }
        (store, head)
    }

    #[test]
    fn zero_head_gives_log_seven() {
        let (store, head) = head_setup(true);
        let mut s = Session::new(&store);
        let x = s.input(normal_tensor(&[4, 6], 1.0, &mut seeded(4)));
        let l = classification_loss(&mut s, x, &[0, 3, 6, 2], &head).unwrap();
        assert!((s.value(l).item() - 7f64.ln()).abs() < 1e-12);
        let y = s.input(Tensor::zeros(&[1, 6]));
        assert!(matches!(classification_loss(&mut s, y, &[7], &head), Err(Error::Label(_))));
    }

    #[test]
    fn classification_gradients_match_central_differences() {
        let (store, head) = head_setup(false);
        let x = normal_tensor(&[4, 6], 1.0, &mut seeded(5));
        let report = finite_diff_check(
            &store,
            |s| {
                let xv = s.input(x.clone());
                classification_loss(s, xv, &[1, 5, 0, 1], &head)
            },
            1e-5,
            Strategy::default(),
        )
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((total_value(1.9459, 0.3133, &w) - 2.10255).abs() < 1e-12);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(Tensor::scalar(1.9459)), tape.constant(Tensor::scalar(0.3133)));
        let t = total_loss(&mut tape, a, b, &w).unwrap();
        assert!((tape.value(t).item() - 2.10255).abs() < 1e-12);
        assert_eq!(total_value(1.3, 0.7, &LossWeights { mu2: 0.0, ..w }), 1.3);
        assert_eq!(total_value(1.3, 0.0, &LossWeights { mu1: 0.0, ..w }), 0.0);
    }
}

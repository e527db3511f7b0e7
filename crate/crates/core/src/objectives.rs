//! Training losses: detection BCE, explanation NLL, the weighted joint
//! objective, and the per-patch feature-alignment loss.

use crate::error::{Error, Result};
use crate::kv_config;
use crate::tensorgrad::{Real, Tape, Tensor, Var};

/// Weights of the joint objective and of the alignment term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_exp: f64,
    pub lambda_fm: f64,
    pub lambda_diga: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_det: 1.0,
            lambda_exp: 1.0,
            lambda_fm: 1.0,
            lambda_diga: 0.5,
        }
    }
}

kv_config!(LossWeights {
    lambda_det: float,
    lambda_exp: float,
    lambda_fm: float,
    lambda_diga: float,
});

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_det", self.lambda_det),
            ("lambda_exp", self.lambda_exp),
            ("lambda_fm", self.lambda_fm),
            ("lambda_diga", self.lambda_diga),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Domain(format!("{name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `labels`
/// (1 = fake), computed in the stable logit form.
pub fn det_loss<T: Real>(tape: &mut Tape<T>, fake_logits: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Data("det_loss on an empty batch".into()));
    }
    let labels: Vec<T> = labels.iter().map(|&y| T::of(y)).collect();
    tape.bce_with_logits(fake_logits, &labels)
}

/// Mean token NLL of the answer tokens; row `j` of `answer_logits`
/// predicts `answer[j]`.
pub fn exp_loss<T: Real>(tape: &mut Tape<T>, answer_logits: Var, answer: &[usize]) -> Result<Var> {
    let vocab = tape.value(answer_logits).cols();
    if let Some(&bad) = answer.iter().find(|&&a| a >= vocab) {
        return Err(Error::Index {
            what: "answer token",
            index: bad,
            size: vocab,
        });
    }
    tape.cross_entropy_logits(answer_logits, answer)
}

/// `Σ λ_i · L_i` over the present terms.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(v, w) in terms {
        let scaled = tape.scale(v, T::of(w))?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| Error::Domain("weighted sum of no terms".into()))
}

/// `λ_det·L_det + λ_exp·L_exp + λ_fm·L_fm`.
pub fn gduf_total<T: Real>(tape: &mut Tape<T>, det: Var, exp: Var, fm: Var, w: &LossWeights) -> Result<Var> {
    weighted_sum(tape, &[(det, w.lambda_det), (exp, w.lambda_exp), (fm, w.lambda_fm)])
}

/// `mean_i (1 − cos(projected[i], z_d[i]))` where `projected = h_φ(z_G)`.
pub fn diga_loss<T: Real>(tape: &mut Tape<T>, projected: Var, z_d: Var) -> Result<Var> {
    let cos = tape.cosine(projected, z_d)?;
    let mean = tape.mean(cos)?;
    let neg = tape.scale(mean, -T::one())?;
    let one = tape.constant(Tensor::scalar(T::one()));
    tape.add(one, neg)
}

/// `L_flow + λ·L_align`.
pub fn diga_total<T: Real>(tape: &mut Tape<T>, fm: Var, diga: Var, lambda: f64) -> Result<Var> {
    weighted_sum(tape, &[(fm, 1.0), (diga, lambda)])
}

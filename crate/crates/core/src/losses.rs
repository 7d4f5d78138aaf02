//! Objective terms: cross-entropy on student logits, temperature-scaled KL
//! towards the teacher's logits, and InfoNCE between student and teacher
//! features with queued negatives. All three are mean-reduced over the
//! batch and written as negative log-likelihoods, so each is ≥ 0 and is
//! minimized.

use alloc::format;
use alloc::vec;

use crate::distill::NegativeQueue;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Mean over the batch of −log softmax(logits)[label].
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).expect_matrix("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", &[n, c], &[labels.len()]));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(Error::Input(format!(
            "label {y} at index {i} is out of range for {c} classes"
        )));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_cols(logp, labels)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// T² · mean over the batch of KL(softmax(teacher/T) ‖ softmax(student/T)).
/// The teacher logits are constants.
pub fn kd_kl(tape: &mut Tape, teacher_logits: &Tensor, student_logits: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "KL temperature must be positive, got {temperature}"
        )));
    }
    let (n, _) = tape.value(student_logits).expect_matrix("kd_kl")?;
    if teacher_logits.shape() != tape.value(student_logits).shape() {
        return Err(Error::dim(
            "kd_kl",
            teacher_logits.shape(),
            tape.value(student_logits).shape(),
        ));
    }
    let inv_t = 1.0 / temperature;
    let soft_teacher = Tensor::new(
        teacher_logits.shape().to_vec(),
        tensor::scale(teacher_logits.data(), inv_t),
    )?;
    let p = tape.constant(tensor::softmax(&soft_teacher)?);
    let logp = tape.constant(tensor::log_softmax(&soft_teacher)?);
    let soft_student = tape.scale(student_logits, inv_t);
    let logq = tape.log_softmax_rows(soft_student)?;
    let diff = tape.sub(logp, logq)?;
    let weighted = tape.mul(p, diff)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, temperature * temperature / n as f64))
}

/// InfoNCE against an explicit negative set (`k × d`, constants):
/// mean over i of −log[exp(sᵢ·tᵢ/τ) / (exp(sᵢ·tᵢ/τ) + Σⱼ exp(sᵢ·nⱼ/τ))].
pub fn info_nce_with_negatives(
    tape: &mut Tape,
    z_student: Var,
    z_teacher: Var,
    negatives: &Tensor,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "InfoNCE temperature must be positive, got {tau}"
        )));
    }
    let (n, d) = tape.value(z_student).expect_matrix("info_nce")?;
    if tape.value(z_teacher).shape() != [n, d] {
        return Err(Error::dim("info_nce", &[n, d], tape.value(z_teacher).shape()));
    }
    let (k, nd) = negatives.expect_matrix("info_nce")?;
    if nd != d {
        return Err(Error::dim("info_nce", &[n, d], negatives.shape()));
    }
    if k == 0 {
        return Err(Error::State(
            "InfoNCE needs at least one negative; skip the term until the queue has been filled".into(),
        ));
    }
    let prod = tape.mul(z_student, z_teacher)?;
    let pos = tape.sum_rows(prod)?;
    let neg_t = tape.constant(Tensor::matrix(d, k, tensor::transpose(negatives.data(), k, d))?);
    let neg = tape.matmul(z_student, neg_t)?;
    let logits = tape.concat_cols(&[pos, neg])?;
    let logits = tape.scale(logits, 1.0 / tau);
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_cols(logp, &vec![0; n])?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// InfoNCE with the filled rows of `queue` as negatives.
pub fn info_nce(tape: &mut Tape, z_student: Var, z_teacher: Var, queue: &NegativeQueue, tau: f64) -> Result<Var> {
    if queue.is_empty() {
        return Err(Error::State(
            "negative queue is empty; skip the InfoNCE term until the first teacher batch is enqueued".into(),
        ));
    }
    info_nce_with_negatives(tape, z_student, z_teacher, &queue.rows(), tau)
}

/// Per-term multipliers; all 1.0 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub nce: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            nce: 1.0,
            kl: 1.0,
        }
    }
}

/// Scalar terms of one step, already weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub nce: f64,
    pub kl: f64,
    pub gamma: u8,
    pub total: f64,
    pub batch_size: usize,
}

impl LossBreakdown {
    /// `ce + nce + γ·kl`, evaluated in the same order as on the tape.
    pub fn recomposed(&self) -> f64 {
        self.ce + self.nce + f64::from(self.gamma) * self.kl
    }
}

/// Tape handles of the three terms. A missing term contributes 0.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ce: Var,
    pub nce: Option<Var>,
    pub kl: Option<Var>,
}

/// Composes ce + nce + γ·kl on the tape. `kl` is reported for γ = 0 but
/// left out of the total.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, gamma: u8, weights: LossWeights) -> Result<(Var, LossBreakdown)> {
    if gamma > 1 {
        return Err(Error::Config(format!("gamma must be 0 or 1, got {gamma}")));
    }
    let batch_size = tape.value(terms.ce).len();
    let ce = tape.scale(terms.ce, weights.ce);
    let mut total = ce;
    let mut nce_value = 0.0;
    if let Some(nce) = terms.nce {
        let nce = tape.scale(nce, weights.nce);
        nce_value = tape.value(nce).item();
        total = tape.add(total, nce)?;
    }
    let mut kl_value = 0.0;
    if let Some(kl) = terms.kl {
        let kl = tape.scale(kl, weights.kl);
        kl_value = tape.value(kl).item();
        if gamma == 1 {
            total = tape.add(total, kl)?;
        }
    }
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item(),
        nce: nce_value,
        kl: kl_value,
        gamma,
        total: tape.value(total).item(),
        batch_size,
    };
    Ok((total, breakdown))
}

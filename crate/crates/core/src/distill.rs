//! Distillation state: the momentum teacher, the negative queue and the
//! task gate for the KL term.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::Regime;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Block, Bound, ModelStack};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Unit-norm tolerance enforced on enqueued rows.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// 1 when teacher and student solve the same task, 0 otherwise.
pub fn gamma_for_task(regime: Regime) -> u8 {
    match regime {
        Regime::Same => 1,
        Regime::Relevant | Regime::Irrelevant => 0,
    }
}

/// Fixed-capacity FIFO ring of teacher embeddings used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    cursor: usize,
    fill: usize,
    unit_norm: bool,
}

impl NegativeQueue {
    /// `batch_size` is the per-step enqueue size; it may not exceed `capacity`.
    /// With `unit_norm`, every enqueued row must have norm 1.
    pub fn new(capacity: usize, dim: usize, batch_size: usize, unit_norm: bool) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and width must be positive".into()));
        }
        if batch_size > capacity {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds queue capacity {capacity}"
            )));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
            unit_norm,
        })
    }

    /// Rebuilds a queue from persisted ring storage and cursors.
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        storage: Vec<f64>,
        cursor: usize,
        fill: usize,
        unit_norm: bool,
    ) -> Result<Self> {
        if storage.len() != capacity * dim || cursor >= capacity.max(1) || fill > capacity {
            return Err(Error::State("inconsistent persisted queue".into()));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            storage,
            cursor,
            fill,
            unit_norm,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity
    }

    pub fn unit_norm(&self) -> bool {
        self.unit_norm
    }

    /// Raw ring storage, including unfilled slots.
    pub fn storage(&self) -> &[f64] {
        &self.storage
    }

    /// Writes the rows of `batch` at the cursor, overwriting the oldest rows
    /// once the ring is full.
    pub fn enqueue_dequeue(&mut self, batch: &Tensor) -> Result<()> {
        let (n, d) = batch.expect_matrix("enqueue")?;
        if d != self.dim {
            return Err(Error::dim("enqueue", batch.shape(), &[n, self.dim]));
        }
        if n > self.capacity {
            return Err(Error::Config(format!(
                "batch of {n} rows exceeds queue capacity {}",
                self.capacity
            )));
        }
        if self.unit_norm {
            for i in 0..n {
                let norm = math::sqrt(batch.row(i).iter().map(|v| v * v).sum());
                if math::abs(norm - 1.0) > UNIT_NORM_TOL {
                    return Err(Error::Input(format!("enqueued row {i} has norm {norm}, expected 1")));
                }
            }
        }
        for i in 0..n {
            let slot = self.cursor * self.dim;
            self.storage[slot..slot + self.dim].copy_from_slice(batch.row(i));
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.fill = (self.fill + n).min(self.capacity);
        Ok(())
    }

    /// Stored rows from oldest to newest, as a `fill × dim` matrix.
    pub fn rows(&self) -> Tensor {
        let start = if self.is_full() { self.cursor } else { 0 };
        let mut data = Vec::with_capacity(self.fill * self.dim);
        for k in 0..self.fill {
            let slot = (start + k) % self.capacity * self.dim;
            data.extend_from_slice(&self.storage[slot..slot + self.dim]);
        }
        Tensor::matrix(self.fill, self.dim, data).unwrap()
    }
}

/// Student ↔ teacher parameter pairs tracked by the momentum update. Only
/// the encoder and projection head are paired; the teacher's attention is
/// trained by gradient and its classifier stays frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub alpha: f64,
    pairs: Vec<(String, String)>,
}

impl MomentumPair {
    pub fn new(alpha: f64, pairs: Vec<(String, String)>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("momentum coefficient {alpha} outside [0, 1]")));
        }
        Ok(MomentumPair { alpha, pairs })
    }

    /// Pairs every encoder and projection parameter by identical name,
    /// checking that shapes agree.
    pub fn for_stacks(student: &ModelStack, teacher: &ModelStack, alpha: f64) -> Result<Self> {
        let mut pairs = Vec::new();
        for (name, value) in student.params() {
            if !matches!(Block::of(name), Some(Block::Encoder | Block::Projection)) {
                continue;
            }
            let t = teacher
                .param(name)
                .ok_or_else(|| Error::Config(format!("teacher has no parameter {name} to pair with the student")))?;
            if t.shape() != value.shape() {
                return Err(Error::dim("momentum pair", value.shape(), t.shape()));
            }
            pairs.push((name.clone(), name.clone()));
        }
        Self::new(alpha, pairs)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn is_paired_teacher(&self, name: &str) -> bool {
        self.pairs.iter().any(|(_, t)| t == name)
    }

    /// θ_teacher ← α·θ_teacher + (1 − α)·θ_student for every pair.
    pub fn momentum_update(&self, student: &ModelStack, teacher: &mut ModelStack) -> Result<()> {
        // Validate every pair before touching the teacher.
        for (s, t) in &self.pairs {
            let sv = student
                .param(s)
                .ok_or_else(|| Error::Config(format!("momentum pair names missing student parameter {s}")))?;
            let tv = teacher
                .param(t)
                .ok_or_else(|| Error::Config(format!("momentum pair names missing teacher parameter {t}")))?;
            if sv.shape() != tv.shape() {
                return Err(Error::dim("momentum_update", sv.shape(), tv.shape()));
            }
        }
        let a = self.alpha;
        for (s, t) in &self.pairs {
            let sv = student.param(s).unwrap();
            let tv = teacher.param_mut(t).unwrap();
            for (tt, ss) in tv.data_mut().iter_mut().zip(sv.data()) {
                *tt = a * *tt + (1.0 - a) * ss;
            }
        }
        Ok(())
    }
}

/// Teacher side of one step.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    /// Attention-reweighted (and optionally normalized) teacher features, on the tape.
    pub z: Var,
    /// Frozen-classifier logits on momentum-encoder features; never on the tape.
    pub logits: Tensor,
}

/// Runs the momentum encoder and projection without gradient, detaches the
/// result, then applies the teacher attention bound in `attn` (which may be
/// trainable) on `tape`.
pub fn teacher_forward_pipeline(
    teacher: &ModelStack,
    tape: &mut Tape,
    attn: &Bound,
    x: &Tensor,
    normalize: bool,
) -> Result<TeacherOutput> {
    if !teacher.is_pretrained() {
        return Err(Error::State(
            "teacher stack holds no pretrained weights; load a teacher checkpoint first".into(),
        ));
    }
    let (_, projected, logits) = teacher.predict_projected(x)?;
    let p = tape.constant(projected);
    let mut z = teacher.attention.forward(tape, attn, p)?;
    if normalize {
        z = tape.l2_normalize_rows(z)?;
    }
    Ok(TeacherOutput { z, logits })
}

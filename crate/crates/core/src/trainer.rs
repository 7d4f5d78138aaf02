//! Supervised pretraining and fine-tuning, and the distillation step.
//!
//! A distillation step runs, in order: student forward; teacher forward
//! (momentum encoder and projection detached, attention on the tape);
//! ce + nce + γ·kl; backward; Adam over every student block and the teacher
//! attention; momentum update of the teacher encoder and projection; enqueue
//! of the detached teacher features. The queue is therefore never holding
//! the current batch while its InfoNCE term is computed.
//!
//! On the very first distillation step the queue is empty and the InfoNCE
//! term is left out. Parameters the loss did not reach get zero gradients.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DistillConfig, StudentInit};
use crate::distill::{teacher_forward_pipeline, MomentumPair, NegativeQueue};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights};
use crate::metrics::{AggcRole, MetricsReport};
use crate::nn::{Block, Bound, ModelStack};
use crate::optim::AdamState;
use crate::synth::{self, Dataset};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Stream of the run seed used for input augmentation.
pub const AUGMENT_STREAM: u64 = u64::MAX;
/// XOR-ed into the run seed for student initialization, so a student never
/// starts from the same draw as a teacher pretrained with the same seed.
pub const STUDENT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// What a run trains; doubles as the tag in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunKind {
    Teacher,
    FtNone,
    FtTeacher,
    Moma,
}

impl RunKind {
    pub const ALL: [RunKind; 4] = [RunKind::Teacher, RunKind::FtNone, RunKind::FtTeacher, RunKind::Moma];

    pub fn tag(self) -> &'static str {
        match self {
            RunKind::Teacher => "Teacher",
            RunKind::FtNone => "FT_None",
            RunKind::FtTeacher => "FT_Teacher",
            RunKind::Moma => "MoMA",
        }
    }

    pub fn is_distill(self) -> bool {
        self == RunKind::Moma
    }
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RunKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown run kind {s:?}")))
    }
}

/// Teacher-side state of a distillation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillParts {
    pub teacher: ModelStack,
    pub queue: NegativeQueue,
    pub momentum: MomentumPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub kind: RunKind,
    pub config: DistillConfig,
    pub student: ModelStack,
    pub distill: Option<DistillParts>,
    pub adam: AdamState,
    pub augment_rng: ChaCha8Rng,
    /// Completed steps. The batch for step `s` is fully determined by `s`.
    pub step: u64,
    /// Breakdown of every step taken by this process.
    pub log: Vec<LossBreakdown>,
}

/// Loss and gradients of one batch, without any update applied.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub breakdown: LossBreakdown,
    /// Keyed `student.<param>` and `teacher.<param>`.
    pub grads: BTreeMap<String, Tensor>,
    pub teacher_z: Option<Tensor>,
}

struct Forward {
    tape: Tape,
    loss: Var,
    breakdown: LossBreakdown,
    student: Bound,
    teacher: Bound,
    teacher_z: Option<Var>,
}

const SUPERVISED_BLOCKS: [(Block, bool); 2] = [(Block::Encoder, true), (Block::Classifier, true)];
const ALL_BLOCKS: [(Block, bool); 4] = [
    (Block::Encoder, true),
    (Block::Projection, true),
    (Block::Attention, true),
    (Block::Classifier, true),
];

/// Position of a ChaCha8 generator, enough to continue it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub fn augment_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(AUGMENT_STREAM);
    rng
}

fn leading_cols(t: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c) = t.expect_matrix("leading_cols")?;
    if k == c {
        return Ok(t.clone());
    }
    let data = (0..n).flat_map(|i| t.row(i)[..k].iter().copied()).collect();
    Tensor::matrix(n, k, data)
}

/// Fails unless `teacher` has the encoder, projection and attention shapes
/// that `config` describes and `config.data.source_classes` outputs.
pub fn check_teacher_compatible(config: &DistillConfig, teacher: &ModelStack) -> Result<()> {
    let expected = ModelStack::new(config, config.data.source_classes, 0)?;
    if teacher.num_classes() != config.data.source_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes but source_classes = {}",
            teacher.num_classes(),
            config.data.source_classes
        )));
    }
    if teacher.encoder != expected.encoder
        || teacher.projection != expected.projection
        || teacher.attention != expected.attention
    {
        return Err(Error::Config(
            "teacher architecture does not match the [model] section of the config".into(),
        ));
    }
    Ok(())
}

/// Copies encoder, projection and attention from `teacher` into `student`,
/// and the classifier too when both predict the same number of classes.
pub fn init_student_from(student: &mut ModelStack, teacher: &ModelStack) -> Result<()> {
    student.copy_block_from(teacher, Block::Encoder)?;
    student.copy_block_from(teacher, Block::Projection)?;
    student.copy_block_from(teacher, Block::Attention)?;
    if student.num_classes() == teacher.num_classes() {
        student.copy_block_from(teacher, Block::Classifier)?;
    }
    Ok(())
}

impl TrainRun {
    /// A cross-entropy-only run over `student`'s encoder and classifier.
    pub fn supervised(kind: RunKind, config: DistillConfig, student: ModelStack) -> Result<Self> {
        config.validate()?;
        if kind.is_distill() {
            return Err(Error::Config("use TrainRun::distill for distillation runs".into()));
        }
        Ok(TrainRun {
            kind,
            adam: AdamState::new(&config.optim),
            augment_rng: augment_rng(config.optim.seed),
            config,
            student,
            distill: None,
            step: 0,
            log: Vec::new(),
        })
    }

    /// A distillation run against a pretrained `teacher`. The teacher's
    /// encoder and projection become the momentum encoder.
    pub fn distill(config: DistillConfig, teacher: ModelStack) -> Result<Self> {
        config.validate()?;
        if !teacher.is_pretrained() {
            return Err(Error::State("teacher stack holds no pretrained weights".into()));
        }
        check_teacher_compatible(&config, &teacher)?;
        let mut student = ModelStack::new(&config, config.data.target_classes, config.optim.seed ^ STUDENT_SALT)?;
        if config.distill.student_init == StudentInit::Teacher {
            init_student_from(&mut student, &teacher)?;
        }
        let momentum = MomentumPair::for_stacks(&student, &teacher, config.distill.alpha)?;
        let queue = NegativeQueue::new(
            config.distill.queue_size,
            config.model.proj_dim,
            config.optim.batch_size,
            config.distill.normalize_embeddings,
        )?;
        Ok(TrainRun {
            kind: RunKind::Moma,
            adam: AdamState::new(&config.optim),
            augment_rng: augment_rng(config.optim.seed),
            config,
            student,
            distill: Some(DistillParts {
                teacher,
                queue,
                momentum,
            }),
            step: 0,
            log: Vec::new(),
        })
    }

    fn weights(&self) -> LossWeights {
        let d = &self.config.distill;
        LossWeights {
            ce: d.ce_weight,
            nce: d.nce_weight,
            kl: d.kl_weight,
        }
    }

    fn forward(&self, x: &Tensor, y: &[usize]) -> Result<Forward> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let Some(parts) = &self.distill else {
            let student = self.student.bind(&mut tape, &SUPERVISED_BLOCKS);
            let (_, logits) = self.student.encode(&mut tape, &student, xv)?;
            let ce = losses::cross_entropy(&mut tape, logits, y)?;
            let terms = LossTerms {
                ce,
                nce: None,
                kl: None,
            };
            let (loss, breakdown) = losses::total_loss(&mut tape, terms, 0, self.weights())?;
            return Ok(Forward {
                tape,
                loss,
                breakdown: LossBreakdown {
                    batch_size: y.len(),
                    ..breakdown
                },
                student,
                teacher: Bound::new(),
                teacher_z: None,
            });
        };
        let d = &self.config.distill;
        let student = self.student.bind(&mut tape, &ALL_BLOCKS);
        let (e, logits) = self.student.encode(&mut tape, &student, xv)?;
        let p = self.student.project(&mut tape, &student, e)?;
        let mut z = self.student.attend(&mut tape, &student, p)?;
        if d.normalize_embeddings {
            z = tape.l2_normalize_rows(z)?;
        }

        let teacher = parts.teacher.bind(&mut tape, &[(Block::Attention, true)]);
        let t = teacher_forward_pipeline(&parts.teacher, &mut tape, &teacher, x, d.normalize_embeddings)?;

        let ce = losses::cross_entropy(&mut tape, logits, y)?;
        let nce = if parts.queue.is_empty() {
            None
        } else {
            Some(losses::info_nce(&mut tape, z, t.z, &parts.queue, d.tau)?)
        };
        // Differing class counts: compare the leading shared columns.
        let k = self.student.num_classes().min(parts.teacher.num_classes());
        let s_logits = if k < self.student.num_classes() {
            tape.slice_cols(logits, 0, k)?
        } else {
            logits
        };
        let t_logits = leading_cols(&t.logits, k)?;
        let kl = losses::kd_kl(&mut tape, &t_logits, s_logits, d.kd_temperature)?;
        let terms = LossTerms { ce, nce, kl: Some(kl) };
        let (loss, breakdown) = losses::total_loss(&mut tape, terms, self.config.gamma(), self.weights())?;
        Ok(Forward {
            tape,
            loss,
            breakdown: LossBreakdown {
                batch_size: y.len(),
                ..breakdown
            },
            student,
            teacher,
            teacher_z: Some(t.z),
        })
    }

    /// Total loss of one batch at the current parameters.
    pub fn loss(&self, x: &Tensor, y: &[usize]) -> Result<LossBreakdown> {
        Ok(self.forward(x, y)?.breakdown)
    }

    /// Loss and gradients of every trainable parameter for one batch.
    pub fn loss_and_grads(&self, x: &Tensor, y: &[usize]) -> Result<StepGrads> {
        let Forward {
            mut tape,
            loss,
            breakdown,
            student,
            teacher,
            teacher_z,
        } = self.forward(x, y)?;
        if !breakdown.total.is_finite() {
            return Err(Error::State(format!("loss is not finite: {breakdown:?}")));
        }
        tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (owner, bound) in [("student", &student), ("teacher", &teacher)] {
            for (name, &v) in bound {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                grads.insert(format!("{owner}.{name}"), g);
            }
        }
        Ok(StepGrads {
            breakdown,
            grads,
            teacher_z: teacher_z.map(|z| tape.value(z).clone()),
        })
    }

    /// One optimization step on a batch. Errors carry the step index.
    pub fn train_step(&mut self, x: &Tensor, y: &[usize]) -> Result<LossBreakdown> {
        let step = self.step;
        self.train_step_inner(x, y).map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })
    }

    fn train_step_inner(&mut self, x: &Tensor, y: &[usize]) -> Result<LossBreakdown> {
        let x = synth::augment(x, self.config.data.augment, &mut self.augment_rng)?;
        let StepGrads {
            breakdown,
            grads,
            teacher_z,
        } = self.loss_and_grads(&x, y)?;

        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, t) in self.student.params_mut() {
            let key = format!("student.{name}");
            if grads.contains_key(&key) {
                params.push((key, t));
            }
        }
        if let Some(parts) = self.distill.as_mut() {
            for (name, t) in parts.teacher.block_params_mut(Block::Attention) {
                params.push((format!("teacher.{name}"), t));
            }
        }
        self.adam.step(&mut params, &grads)?;
        drop(params);

        if let Some(parts) = self.distill.as_mut() {
            parts.momentum.momentum_update(&self.student, &mut parts.teacher)?;
            let z = teacher_z.ok_or_else(|| Error::State("teacher features missing".into()))?;
            parts.queue.enqueue_dequeue(&z)?;
        }
        self.step += 1;
        self.log.push(breakdown);
        log::debug!(
            "step {} ce {:.6} nce {:.6} kl {:.6} total {:.6}",
            self.step,
            breakdown.ce,
            breakdown.nce,
            breakdown.kl,
            breakdown.total
        );
        Ok(breakdown)
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.num_classes != self.student.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {}",
                data.num_classes,
                self.student.num_classes()
            )));
        }
        if data.input_dim() != self.config.data.input_dim {
            return Err(Error::Config(format!(
                "dataset inputs have {} features but input_dim = {}",
                data.input_dim(),
                self.config.data.input_dim
            )));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, data: &Dataset) -> Result<u64> {
        let bs = self.config.optim.batch_size;
        if bs == 0 || bs > data.len() {
            return Err(Error::Config(format!(
                "batch size {bs} must be between 1 and the dataset size {}",
                data.len()
            )));
        }
        Ok((data.len() / bs) as u64)
    }

    /// Trains on shuffled batches of `data` until `total_steps` steps are done.
    /// Resuming a run only needs its step count to pick up the same batches.
    pub fn train_until(&mut self, data: &Dataset, total_steps: u64) -> Result<()> {
        self.check_dataset(data)?;
        let bpe = self.batches_per_epoch(data)?;
        let bs = self.config.optim.batch_size;
        while self.step < total_steps {
            let epoch = self.step / bpe;
            let order = synth::epoch_batches(data.len(), bs, self.config.optim.seed, epoch, true)?;
            for idx in &order[(self.step % bpe) as usize..] {
                if self.step >= total_steps {
                    break;
                }
                let (x, y) = data.batch(idx);
                self.train_step(&x, &y)?;
            }
        }
        Ok(())
    }

    pub fn train_epochs(&mut self, data: &Dataset, epochs: usize) -> Result<()> {
        let target = self.batches_per_epoch(data)? * epochs as u64;
        self.train_until(data, target)
    }

    pub fn teacher(&self) -> Option<&ModelStack> {
        self.distill.as_ref().map(|p| &p.teacher)
    }
}

/// Cross-entropy training of a fresh stack on the source task.
pub fn pretrain_teacher(config: &DistillConfig, source: &Dataset) -> Result<TrainRun> {
    if source.num_classes != config.data.source_classes {
        return Err(Error::Config(format!(
            "source dataset has {} classes but source_classes = {}",
            source.num_classes, config.data.source_classes
        )));
    }
    let stack = ModelStack::new(config, config.data.source_classes, config.optim.seed)?;
    let mut run = TrainRun::supervised(RunKind::Teacher, config.clone(), stack)?;
    run.train_epochs(source, config.optim.pretrain_epochs)?;
    run.student.mark_pretrained();
    Ok(run)
}

/// Cross-entropy training of a student on the target task, from scratch or
/// from a teacher's weights.
pub fn finetune_baseline(config: &DistillConfig, target: &Dataset, init: Option<&ModelStack>) -> Result<TrainRun> {
    let mut stack = ModelStack::new(config, config.data.target_classes, config.optim.seed ^ STUDENT_SALT)?;
    let kind = match init {
        Some(teacher) => {
            check_teacher_compatible(config, teacher)?;
            init_student_from(&mut stack, teacher)?;
            RunKind::FtTeacher
        }
        None => RunKind::FtNone,
    };
    let mut run = TrainRun::supervised(kind, config.clone(), stack)?;
    run.train_epochs(target, config.optim.epochs)?;
    Ok(run)
}

/// Metrics of `stack`'s encoder and classifier on `data`.
pub fn evaluate(stack: &ModelStack, data: &Dataset, roles: Option<&[AggcRole]>) -> Result<MetricsReport> {
    let inference = stack.export_inference();
    let (embeddings, logits) = inference.predict(&data.inputs)?;
    let pred = tensor::argmax_rows(&logits);
    MetricsReport::compute(
        data.num_classes,
        &data.labels,
        &pred,
        Some(&embeddings),
        data.groups.as_deref(),
        roles,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Regime;
    use crate::synth::{generate, TaskSpec};
    use alloc::vec;
    use alloc::vec::Vec;

    fn small_config(regime: Regime, cs: usize, ct: usize) -> DistillConfig {
        let mut c = DistillConfig::default();
        c.data.regime = regime;
        c.data.input_dim = 6;
        c.data.source_classes = cs;
        c.data.target_classes = ct;
        c.data.source_per_class = 60;
        c.data.target_per_class = 12;
        c.data.val_per_class = 4;
        c.data.test_per_class = 20;
        c.data.center_scale = 2.0;
        c.model.hidden = vec![8];
        c.model.embed_dim = 8;
        c.model.proj_dim = 8;
        c.model.heads = 2;
        c.distill.queue_size = 32;
        c.optim.batch_size = 8;
        c.optim.epochs = 2;
        c.optim.pretrain_epochs = 3;
        c.optim.lr = 1e-2;
        c
    }

    fn teacher_for(c: &DistillConfig) -> (ModelStack, crate::synth::SynthTask) {
        let task = generate(&TaskSpec::new(c.data.clone(), c.optim.seed).unwrap());
        let run = pretrain_teacher(c, &task.source.train).unwrap();
        (run.student, task)
    }

    #[test]
    fn pretraining_learns_a_separable_source() {
        let mut c = small_config(Regime::Same, 2, 2);
        c.data.center_scale = 4.0;
        c.optim.pretrain_epochs = 14;
        let (teacher, task) = teacher_for(&c);
        assert!(teacher.is_pretrained());
        let report = evaluate(&teacher, &task.source.test, None).unwrap();
        assert!(report.accuracy >= 0.95, "{}", report.accuracy);
    }

    #[test]
    fn pretraining_rejects_class_mismatch() {
        let c = small_config(Regime::Same, 3, 3);
        let mut other = c.clone();
        other.data.source_classes = 4;
        other.data.target_classes = 4;
        let task = generate(&TaskSpec::new(other.data.clone(), 0).unwrap());
        assert!(matches!(
            pretrain_teacher(&c, &task.source.train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let c = small_config(Regime::Same, 3, 3);
        let (a, _) = teacher_for(&c);
        let (b, _) = teacher_for(&c);
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_init_reproduces_teacher_accuracy_at_step_zero() {
        let c = small_config(Regime::Same, 3, 3);
        let (teacher, task) = teacher_for(&c);
        let mut stack = ModelStack::new(&c, 3, 1).unwrap();
        init_student_from(&mut stack, &teacher).unwrap();
        let a = evaluate(&teacher, &task.target.test, None).unwrap();
        let b = evaluate(&stack, &task.target.test, None).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn distill_needs_a_pretrained_teacher() {
        let c = small_config(Regime::Same, 3, 3);
        let raw = ModelStack::new(&c, 3, 0).unwrap();
        assert!(matches!(TrainRun::distill(c, raw), Err(Error::State(_))));
    }

    #[test]
    fn distill_rejects_mismatched_teacher() {
        let c = small_config(Regime::Same, 3, 3);
        let (teacher, _) = teacher_for(&c);
        let mut other = c.clone();
        other.model.embed_dim = 4;
        assert!(matches!(TrainRun::distill(other, teacher), Err(Error::Config(_))));
    }

    #[test]
    fn first_step_skips_nce_then_queue_fills() {
        let c = small_config(Regime::Same, 3, 3);
        let (teacher, task) = teacher_for(&c);
        let mut run = TrainRun::distill(c, teacher).unwrap();
        run.train_until(&task.target.train, 3).unwrap();
        assert_eq!(run.log[0].nce, 0.0);
        assert!(run.log[1].nce > 0.0);
        assert_eq!(run.distill.as_ref().unwrap().queue.fill(), 24);
        for b in &run.log {
            assert_eq!(b.total.to_bits(), b.recomposed().to_bits());
            assert_eq!(b.gamma, 1);
        }
    }

    #[test]
    fn queue_never_holds_the_current_batch() {
        let c = small_config(Regime::Same, 3, 3);
        let (teacher, task) = teacher_for(&c);
        let mut run = TrainRun::distill(c, teacher).unwrap();
        let (x, y) = task.target.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        run.train_step(&x, &y).unwrap();
        let before = run.distill.as_ref().unwrap().queue.rows();
        let grads = run.loss_and_grads(&x, &y).unwrap();
        assert_eq!(run.distill.as_ref().unwrap().queue.rows(), before);
        let z = grads.teacher_z.unwrap();
        // The queued features come from the previous teacher state.
        assert_ne!(z, before);
    }

    #[test]
    fn frozen_dynamics_with_zero_lr_and_unit_alpha() {
        let mut c = small_config(Regime::Same, 3, 3);
        c.optim.lr = 0.0;
        c.distill.alpha = 1.0;
        c.distill.queue_size = 8;
        let (teacher, task) = teacher_for(&c);
        let mut run = TrainRun::distill(c, teacher.clone()).unwrap();
        let student0 = run.student.clone();
        let (x, y) = task.target.train.batch(&[3, 9, 1, 4, 20, 33, 5, 8]);
        for _ in 0..5 {
            run.train_step(&x, &y).unwrap();
        }
        assert_eq!(run.student, student0);
        assert_eq!(run.teacher().unwrap(), &teacher);
        for b in &run.log[2..] {
            assert_eq!(b.total.to_bits(), run.log[1].total.to_bits());
        }
    }

    #[test]
    fn unit_alpha_keeps_teacher_encoder_bit_identical() {
        let mut c = small_config(Regime::Same, 3, 3);
        c.distill.alpha = 1.0;
        let (teacher, task) = teacher_for(&c);
        let mut run = TrainRun::distill(c, teacher.clone()).unwrap();
        run.train_until(&task.target.train, 6).unwrap();
        let t = run.teacher().unwrap();
        for (name, value) in teacher.params() {
            if matches!(
                Block::of(name),
                Some(Block::Encoder | Block::Projection | Block::Classifier)
            ) {
                assert_eq!(t.param(name).unwrap(), value, "{name}");
            }
        }
        assert_ne!(t.param("attn.wo"), teacher.param("attn.wo"));
    }

    #[test]
    fn gamma_gating_by_regime() {
        for (regime, cs, ct, gamma) in [
            (Regime::Same, 3, 3, 1),
            (Regime::Relevant, 3, 4, 0),
            (Regime::Irrelevant, 3, 3, 0),
        ] {
            let c = small_config(regime, cs, ct);
            let (teacher, task) = teacher_for(&c);
            let mut run = TrainRun::distill(c, teacher).unwrap();
            run.train_until(&task.target.train, 3).unwrap();
            // A teacher-initialized student matches the teacher exactly at step 0.
            assert!(run.log[1..].iter().all(|b| b.kl > 0.0));
            for b in &run.log {
                assert_eq!(b.gamma, gamma);
                assert!(b.kl >= 0.0);
                assert_eq!(b.total.to_bits(), b.recomposed().to_bits());
            }
        }
    }

    #[test]
    fn resume_from_step_count_matches_uninterrupted_run() {
        let mut c = small_config(Regime::Same, 3, 3);
        c.data.augment = 0.1;
        let (teacher, task) = teacher_for(&c);
        let mut full = TrainRun::distill(c, teacher).unwrap();
        full.train_until(&task.target.train, 4).unwrap();
        let mut resumed = full.clone();
        resumed.log.clear();
        full.train_until(&task.target.train, 14).unwrap();
        resumed.train_until(&task.target.train, 14).unwrap();
        let a: Vec<u64> = full.log[4..].iter().map(|b| b.total.to_bits()).collect();
        let b: Vec<u64> = resumed.log.iter().map(|b| b.total.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(full.student, resumed.student);
    }

    #[test]
    fn step_errors_carry_the_index() {
        let c = small_config(Regime::Same, 3, 3);
        let (teacher, task) = teacher_for(&c);
        let mut run = TrainRun::distill(c, teacher).unwrap();
        let (x, _) = task.target.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        run.train_step(&x, &[0; 8]).unwrap();
        match run.train_step(&x, &[7; 8]) {
            Err(Error::Step { step: 1, source }) => assert!(matches!(*source, Error::Input(_))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn finetune_tags_and_determinism() {
        let c = small_config(Regime::Same, 3, 3);
        let (teacher, task) = teacher_for(&c);
        let none = finetune_baseline(&c, &task.target.train, None).unwrap();
        let warm = finetune_baseline(&c, &task.target.train, Some(&teacher)).unwrap();
        assert_eq!(none.kind, RunKind::FtNone);
        assert_eq!(warm.kind, RunKind::FtTeacher);
        assert_eq!(none, finetune_baseline(&c, &task.target.train, None).unwrap());
        assert_ne!(none.student, warm.student);
    }

    #[test]
    fn rng_state_continues_the_stream() {
        use rand::Rng;
        let mut a = augment_rng(7);
        let _: u64 = a.random();
        let _: u32 = a.random();
        let mut b = RngState::capture(&a).restore();
        for _ in 0..10 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn run_kind_tags_round_trip() {
        for k in RunKind::ALL {
            assert_eq!(k.tag().parse::<RunKind>().unwrap(), k);
        }
    }

    #[test]
    fn leading_columns() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(leading_cols(&t, 2).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
    }
}

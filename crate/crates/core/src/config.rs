//! Hyperparameters for data generation, model shape, distillation and
//! optimization. Text parsing lives in the `moma` crate; this module only
//! holds the values, their defaults and the cross-field checks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::AggcRole;

/// Relationship between the teacher's source task and the student's target task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Same,
    Relevant,
    Irrelevant,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Same, Regime::Relevant, Regime::Irrelevant];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Same => "same",
            Regime::Relevant => "relevant",
            Regime::Irrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Regime::Same),
            "relevant" => Ok(Regime::Relevant),
            "irrelevant" => Ok(Regime::Irrelevant),
            other => Err(Error::Config(format!(
                "unknown regime {other:?} (expected same, relevant or irrelevant)"
            ))),
        }
    }
}

/// Where the student's weights come from before target training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    /// Fresh uniform initialization from the run seed.
    None,
    /// Copy of the pretrained teacher (classifier only when class counts agree).
    Teacher,
}

impl StudentInit {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentInit::None => "none",
            StudentInit::Teacher => "teacher",
        }
    }
}

impl FromStr for StudentInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(StudentInit::None),
            "teacher" => Ok(StudentInit::Teacher),
            other => Err(Error::Config(format!(
                "unknown student_init {other:?} (expected none or teacher)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub regime: Regime,
    pub input_dim: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    /// Training samples per class; validation and test sizes below.
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class-center coordinates.
    pub center_scale: f64,
    /// Isotropic standard deviation of samples around their center.
    pub spread: f64,
    /// Length of the per-class displacement between source and target centers.
    pub shift: f64,
    /// Ratio between the largest and the smallest class size (1 = balanced).
    pub imbalance: f64,
    /// Training-time input augmentation; 0 disables it.
    pub augment: f64,
    /// Consecutive same-class samples sharing a group id; 0 disables groups.
    pub group_size: usize,
    /// Class index to AGGC role, enabling the weighted F1 in reports.
    pub aggc_roles: Option<Vec<AggcRole>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            regime: Regime::Same,
            input_dim: 16,
            source_classes: 4,
            target_classes: 4,
            source_per_class: 400,
            target_per_class: 40,
            val_per_class: 20,
            test_per_class: 100,
            center_scale: 1.0,
            spread: 1.0,
            shift: 0.5,
            imbalance: 1.0,
            augment: 0.0,
            group_size: 0,
            aggc_roles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden widths of the encoder MLP, input side first.
    pub hidden: Vec<usize>,
    /// Encoder output width D.
    pub embed_dim: usize,
    /// Projection hidden width; 0 means "same as `proj_dim`".
    pub proj_hidden: usize,
    /// Projection output width D_z, also the attention and queue width.
    pub proj_dim: usize,
    pub heads: usize,
    /// Output projection W^O after the concatenated attention heads.
    pub output_proj: bool,
}

impl ModelConfig {
    pub fn proj_hidden_width(&self) -> usize {
        if self.proj_hidden == 0 {
            self.proj_dim
        } else {
            self.proj_hidden
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            embed_dim: 32,
            proj_hidden: 0,
            proj_dim: 32,
            heads: 4,
            output_proj: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    /// Momentum coefficient for the teacher encoder and projection.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Softening temperature of the KL term.
    pub kd_temperature: f64,
    /// Derive γ from the regime; when false `gamma` is used as given.
    pub gamma_auto: bool,
    pub gamma: u8,
    pub queue_size: usize,
    pub normalize_embeddings: bool,
    pub ce_weight: f64,
    pub nce_weight: f64,
    pub kl_weight: f64,
    pub student_init: StudentInit,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            alpha: 0.9999,
            tau: 0.07,
            kd_temperature: 4.0,
            gamma_auto: true,
            gamma: 1,
            queue_size: 512,
            normalize_embeddings: true,
            ce_weight: 1.0,
            nce_weight: 1.0,
            kl_weight: 1.0,
            student_init: StudentInit::Teacher,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Target-task epochs (fine-tuning and distillation).
    pub epochs: usize,
    /// Source-task epochs for teacher pretraining.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-8,
            epochs: 50,
            pretrain_epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IoConfig {
    pub out_dir: String,
    /// Persist the negative queue in checkpoints.
    pub include_queue: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistillConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub distill: DistillSettings,
    pub optim: OptimConfig,
    pub io: IoConfig,
}

impl DistillConfig {
    /// Cross-field validation. Called by every constructor that consumes a config.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let m = &self.model;
        let s = &self.distill;
        let o = &self.optim;
        let fail = |msg: String| Err(Error::Config(msg));
        if d.input_dim == 0 || m.embed_dim == 0 || m.proj_dim == 0 {
            return fail("input_dim, embed_dim and proj_dim must be positive".into());
        }
        if m.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if m.heads == 0 || !m.proj_dim.is_multiple_of(m.heads) {
            return fail(format!("heads = {} must divide proj_dim = {}", m.heads, m.proj_dim));
        }
        if d.source_classes < 2 || d.target_classes < 2 {
            return fail("source_classes and target_classes must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return fail(format!("alpha = {} outside [0, 1]", s.alpha));
        }
        if !(s.tau > 0.0) {
            return fail(format!("tau = {} must be positive", s.tau));
        }
        if !(s.kd_temperature > 0.0) {
            return fail(format!("kd_temperature = {} must be positive", s.kd_temperature));
        }
        if s.gamma > 1 {
            return fail(format!("gamma = {} must be 0 or 1", s.gamma));
        }
        if o.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if o.batch_size > s.queue_size {
            return fail(format!(
                "batch_size = {} exceeds queue_size = {}",
                o.batch_size, s.queue_size
            ));
        }
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return fail("lr must be >= 0 and beta1, beta2 in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if d.spread < 0.0 || d.center_scale < 0.0 || d.shift < 0.0 || d.augment < 0.0 {
            return fail("spread, center_scale, shift and augment must be non-negative".into());
        }
        if !(d.imbalance >= 1.0) {
            return fail(format!("imbalance = {} must be >= 1", d.imbalance));
        }
        if let Some(roles) = &d.aggc_roles {
            if roles.len() != d.target_classes {
                return fail(format!(
                    "aggc_roles lists {} roles for {} target classes",
                    roles.len(),
                    d.target_classes
                ));
            }
        }
        Ok(())
    }

    /// γ for this run: from the regime unless auto-derivation is switched off.
    pub fn gamma(&self) -> u8 {
        if self.distill.gamma_auto {
            crate::distill::gamma_for_task(self.data.regime)
        } else {
            self.distill.gamma
        }
    }
}

//! Central finite differences, the relative-error measure used to compare
//! them with tape gradients, and a block-by-block check of the full
//! distillation objective.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{DistillConfig, Regime, StudentInit};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Block, ModelStack};
use crate::tensor::Tensor;
use crate::trainer::TrainRun;

/// Finite-difference step of the objective check.
pub const STEP: f64 = 1e-5;
/// Largest relative error a block may show.
pub const TOLERANCE: f64 = 1e-4;
/// Widest layer the objective check accepts.
pub const MAX_TINY_DIM: usize = 8;

/// Magnitudes below this are compared on an absolute scale. Central
/// differences at h = 1e-5 carry round-off near 1e-11, so entries much
/// smaller than the floor would otherwise dominate the maximum.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = math::abs(analytic).max(math::abs(numeric)).max(REL_FLOOR);
    math::abs(analytic - numeric) / denom
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Owner {
    Student,
    Teacher,
}

impl Owner {
    pub fn as_str(self) -> &'static str {
        match self {
            Owner::Student => "student",
            Owner::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockStatus {
    /// Trainable; worst relative error against central differences.
    Checked { max_rel_error: f64 },
    /// Frozen or momentum-updated, and correctly left out of backprop.
    NoGradient,
    /// Should be frozen but received a gradient.
    UnexpectedGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub owner: Owner,
    pub block: Block,
    pub params: usize,
    pub status: BlockStatus,
}

impl BlockReport {
    pub fn label(&self) -> String {
        format!("{}.{}", self.owner.as_str(), self.block.prefix())
    }

    pub fn passed(&self) -> bool {
        match self.status {
            BlockStatus::Checked { max_rel_error } => max_rel_error < TOLERANCE,
            BlockStatus::NoGradient => true,
            BlockStatus::UnexpectedGradient => false,
        }
    }
}

impl fmt::Display for BlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        match self.status {
            BlockStatus::Checked { max_rel_error } => write!(
                f,
                "{:<14} {:>6} params  max rel err {:.3e}  {verdict}",
                self.label(),
                self.params,
                max_rel_error
            ),
            BlockStatus::NoGradient => write!(
                f,
                "{:<14} {:>6} params  no gradient      {verdict}",
                self.label(),
                self.params
            ),
            BlockStatus::UnexpectedGradient => {
                write!(
                    f,
                    "{:<14} {:>6} params  unexpected grad  {verdict}",
                    self.label(),
                    self.params
                )
            }
        }
    }
}

/// Deliberately scales one block's analytic gradient, to prove the check
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub owner: Owner,
    pub block: Block,
    pub factor: f64,
}

/// A same-regime config with every width at most `MAX_TINY_DIM`.
pub fn tiny_config(seed: u64) -> DistillConfig {
    let mut c = DistillConfig::default();
    c.data.regime = Regime::Same;
    c.data.input_dim = 4;
    c.data.source_classes = 3;
    c.data.target_classes = 3;
    c.model.hidden = vec![6];
    c.model.embed_dim = 6;
    c.model.proj_hidden = 0;
    c.model.proj_dim = 8;
    c.model.heads = 4;
    c.distill.queue_size = 8;
    c.distill.student_init = StudentInit::None;
    c.optim.batch_size = 4;
    c.optim.seed = seed;
    c
}

/// Rejects configs too wide for a finite-difference sweep.
pub fn check_tiny(config: &DistillConfig) -> Result<()> {
    let m = &config.model;
    let d = &config.data;
    let widths = [
        d.input_dim,
        m.embed_dim,
        m.proj_dim,
        m.proj_hidden_width(),
        d.source_classes,
        d.target_classes,
        config.optim.batch_size,
    ];
    if widths.iter().chain(&m.hidden).any(|&w| w > MAX_TINY_DIM) {
        return Err(Error::Config(format!(
            "gradient check needs every width, class count and batch size <= {MAX_TINY_DIM}"
        )));
    }
    Ok(())
}

fn param_count(stack: &ModelStack, block: Block) -> usize {
    stack
        .params()
        .iter()
        .filter(|(n, _)| Block::of(n) == Some(block))
        .map(|(_, t)| t.len())
        .sum()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Compares analytic and numeric gradients of the total loss on `(x, y)`
/// for every parameter block of `run`.
pub fn check_objective(
    run: &TrainRun,
    x: &Tensor,
    y: &[usize],
    corrupt: Option<Corruption>,
) -> Result<Vec<BlockReport>> {
    let grads = run.loss_and_grads(x, y)?.grads;
    let mut probe = run.clone();
    let mut reports = Vec::new();
    let owners: &[Owner] = if run.distill.is_some() {
        &[Owner::Student, Owner::Teacher]
    } else {
        &[Owner::Student]
    };
    for &owner in owners {
        let stack = match owner {
            Owner::Student => &run.student,
            Owner::Teacher => run.teacher().expect("distill run"),
        };
        for block in Block::ALL {
            let names: Vec<&String> = stack.params().keys().filter(|n| Block::of(n) == Some(block)).collect();
            if names.is_empty() {
                continue;
            }
            let params = param_count(stack, block);
            let keyed = |n: &str| format!("{}.{n}", owner.as_str());
            if !names.iter().any(|n| grads.contains_key(&keyed(n))) {
                let trainable = owner == Owner::Student && run.distill.is_some()
                    || owner == Owner::Teacher && block == Block::Attention;
                let status = if trainable {
                    BlockStatus::UnexpectedGradient
                } else {
                    BlockStatus::NoGradient
                };
                if owner == Owner::Teacher || run.distill.is_some() {
                    reports.push(BlockReport {
                        owner,
                        block,
                        params,
                        status,
                    });
                }
                continue;
            }
            if owner == Owner::Teacher && block != Block::Attention {
                reports.push(BlockReport {
                    owner,
                    block,
                    params,
                    status: BlockStatus::UnexpectedGradient,
                });
                continue;
            }
            let mut worst: f64 = 0.0;
            for name in names {
                let base = stack.param(name).expect("listed").clone();
                let mut analytic = grads[&keyed(name)].data().to_vec();
                if let Some(c) = corrupt.filter(|c| c.owner == owner && c.block == block) {
                    analytic.iter_mut().for_each(|g| *g *= c.factor);
                }
                let mut failure = None;
                let numeric = central_difference(base.data(), STEP, |d| {
                    let value = Tensor::new(base.shape().to_vec(), d.to_vec()).expect("same shape");
                    let target = match owner {
                        Owner::Student => &mut probe.student,
                        Owner::Teacher => &mut probe.distill.as_mut().expect("distill run").teacher,
                    };
                    target.set_param(name, value).expect("known name");
                    match probe.loss(x, y) {
                        Ok(b) => b.total,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                });
                if let Some(e) = failure {
                    return Err(e);
                }
                let target = match owner {
                    Owner::Student => &mut probe.student,
                    Owner::Teacher => &mut probe.distill.as_mut().expect("distill run").teacher,
                };
                target.set_param(name, base)?;
                worst = worst.max(max_relative_error(&analytic, &numeric));
            }
            reports.push(BlockReport {
                owner,
                block,
                params,
                status: BlockStatus::Checked { max_rel_error: worst },
            });
        }
    }
    Ok(reports)
}

/// The objective check on one seed of `config`: a random pretrained-marked
/// teacher, a distillation run, a queue primed with one teacher batch, and
/// a random batch.
pub fn check_seed(config: &DistillConfig, seed: u64, corrupt: Option<Corruption>) -> Result<Vec<BlockReport>> {
    check_tiny(config)?;
    let mut c = config.clone();
    c.optim.seed = seed;
    let mut teacher = ModelStack::new(&c, c.data.source_classes, seed)?;
    teacher.mark_pretrained();
    let mut run = TrainRun::distill(c.clone(), teacher)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.optim.batch_size;
    let label =
        |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..n).map(|_| rng.random_range(0..c.data.target_classes)).collect() };
    let warm_x = gaussian(&mut rng, n, c.data.input_dim);
    let warm_y = label(&mut rng);
    let z = run.loss_and_grads(&warm_x, &warm_y)?.teacher_z.expect("distill run");
    run.distill.as_mut().expect("distill run").queue.enqueue_dequeue(&z)?;
    let x = gaussian(&mut rng, n, c.data.input_dim);
    let y = label(&mut rng);
    check_objective(&run, &x, &y, corrupt)
}

/// Per-block worst case of `check_seed` over seeds `0..seeds`.
pub fn check_seeds(config: &DistillConfig, seeds: u64, corrupt: Option<Corruption>) -> Result<Vec<BlockReport>> {
    let mut merged: Vec<BlockReport> = Vec::new();
    for seed in 0..seeds {
        for r in check_seed(config, seed, corrupt)? {
            match merged.iter_mut().find(|m| m.owner == r.owner && m.block == r.block) {
                None => merged.push(r),
                Some(m) => {
                    m.status = match (m.status, r.status) {
                        (BlockStatus::Checked { max_rel_error: a }, BlockStatus::Checked { max_rel_error: b }) => {
                            BlockStatus::Checked {
                                max_rel_error: a.max(b),
                            }
                        }
                        (BlockStatus::UnexpectedGradient, _) | (_, BlockStatus::UnexpectedGradient) => {
                            BlockStatus::UnexpectedGradient
                        }
                        (s, _) => s,
                    }
                }
            }
        }
    }
    Ok(merged)
}

//! Parameterized blocks: MLP encoder, projection head, multi-head
//! self-attention over the batch, and the linear classifier.
//!
//! Parameters live in a flat, name-keyed map owned by [`ModelStack`]. A
//! forward pass first binds the parameters it needs onto a [`Tape`]
//! (trainable or constant), then runs the blocks against the bound handles.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DistillConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The four parameter groups of a stack. Parameter names start with the
/// block prefix, e.g. `enc.0.w` or `attn.head1.wq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    Encoder,
    Projection,
    Attention,
    Classifier,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Encoder, Block::Projection, Block::Attention, Block::Classifier];

    pub fn prefix(self) -> &'static str {
        match self {
            Block::Encoder => "enc",
            Block::Projection => "proj",
            Block::Attention => "attn",
            Block::Classifier => "cls",
        }
    }

    pub fn of(name: &str) -> Option<Block> {
        let head = name.split('.').next()?;
        Block::ALL.into_iter().find(|b| b.prefix() == head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn spec(name: String, shape: &[usize], fan_in: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        fan_in,
    }
}

/// Tape handles for bound parameters, keyed by parameter name.
pub type Bound = BTreeMap<String, Var>;

fn param(bound: &Bound, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::State(format!("parameter {name} is not bound on this tape")))
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = param(bound, &format!("{prefix}.w"))?;
    let b = param(bound, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row_bias(xw, b)
}

/// MLP with ReLU between layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    /// Input width, hidden widths, embedding width.
    pub widths: Vec<usize>,
}

impl MlpEncoder {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (l, pair) in self.widths.windows(2).enumerate() {
            out.push(spec(format!("enc.{l}.w"), &[pair[0], pair[1]], pair[0]));
            out.push(spec(format!("enc.{l}.b"), &[pair[1]], pair[0]));
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if !tape.value(x).is_matrix() || width != self.input_dim() {
            return Err(Error::dim("encode", tape.value(x).shape(), &[0, self.input_dim()]));
        }
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = linear(tape, bound, h, &format!("enc.{l}"))?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// FC → ReLU → FC.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl ProjectionHead {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        vec![
            spec("proj.0.w".into(), &[i, h], i),
            spec("proj.0.b".into(), &[h], i),
            spec("proj.1.w".into(), &[h, o], h),
            spec("proj.1.b".into(), &[o], h),
        ]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, e: Var) -> Result<Var> {
        let h = linear(tape, bound, e, "proj.0")?;
        let h = tape.relu(h);
        linear(tape, bound, h, "proj.1")
    }
}

/// Scaled dot-product self-attention across the rows of a batch, with
/// `heads` independent heads of width `width / heads`, concatenated and
/// optionally mixed by an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub width: usize,
    pub heads: usize,
    pub output_proj: bool,
}

/// Output of [`MultiHeadAttention::forward_with_weights`].
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    /// One `N_B × N_B` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(width: usize, heads: usize, output_proj: bool) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention heads = {heads} must divide width = {width}"
            )));
        }
        Ok(MultiHeadAttention {
            width,
            heads,
            output_proj,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (w, d) = (self.width, self.head_dim());
        let mut out = Vec::new();
        for h in 0..self.heads {
            for m in ["wq", "wk", "wv"] {
                out.push(spec(format!("attn.head{h}.{m}"), &[w, d], w));
            }
        }
        if self.output_proj {
            out.push(spec("attn.wo".into(), &[w, w], w));
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, bound, z)?.output)
    }

    pub fn forward_with_weights(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Attended> {
        let (n, w) = tape.value(z).expect_matrix("attend")?;
        if w != self.width || n == 0 {
            return Err(Error::dim("attend", tape.value(z).shape(), &[n.max(1), self.width]));
        }
        let inv_sqrt = 1.0 / math::sqrt(self.head_dim() as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = param(bound, &format!("attn.head{h}.wq"))?;
            let wk = param(bound, &format!("attn.head{h}.wk"))?;
            let wv = param(bound, &format!("attn.head{h}.wv"))?;
            let q = tape.matmul(z, wq)?;
            let k = tape.matmul(z, wk)?;
            let v = tape.matmul(z, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let a = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(a, v)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let output = if self.output_proj {
            let wo = param(bound, "attn.wo")?;
            tape.matmul(cat, wo)?
        } else {
            cat
        };
        Ok(Attended { output, weights })
    }
}

/// Single fully-connected layer producing class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub input_dim: usize,
    pub num_classes: usize,
}

impl Classifier {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            spec("cls.w".into(), &[self.input_dim, self.num_classes], self.input_dim),
            spec("cls.b".into(), &[self.num_classes], self.input_dim),
        ]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, e: Var) -> Result<Var> {
        linear(tape, bound, e, "cls")
    }
}

/// Encoder, projection, attention and classifier with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStack {
    pub encoder: MlpEncoder,
    pub projection: ProjectionHead,
    pub attention: MultiHeadAttention,
    pub classifier: Classifier,
    params: BTreeMap<String, Tensor>,
    pretrained: bool,
}

/// Kept apart from the dataset streams of the same seed.
const INIT_STREAM: u64 = 1 << 40;

/// Uniform initialization in ±1/√fan_in, drawn in parameter order from `seed`.
fn init_params(specs: &[ParamSpec], seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut out = BTreeMap::new();
    for s in specs {
        let bound = 1.0 / math::sqrt(s.fan_in as f64);
        let n: usize = s.shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        out.insert(s.name.clone(), Tensor::new(s.shape.clone(), data).unwrap());
    }
    out
}

impl ModelStack {
    /// A freshly initialized stack for a task with `num_classes` classes.
    pub fn new(config: &DistillConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut widths = vec![config.data.input_dim];
        widths.extend_from_slice(&m.hidden);
        widths.push(m.embed_dim);
        let stack = ModelStack {
            encoder: MlpEncoder { widths },
            projection: ProjectionHead {
                input_dim: m.embed_dim,
                hidden_dim: m.proj_hidden_width(),
                output_dim: m.proj_dim,
            },
            attention: MultiHeadAttention::new(m.proj_dim, m.heads, m.output_proj)?,
            classifier: Classifier {
                input_dim: m.embed_dim,
                num_classes,
            },
            params: BTreeMap::new(),
            pretrained: false,
        };
        let params = init_params(&stack.param_specs(), seed);
        Ok(ModelStack { params, ..stack })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = self.encoder.param_specs();
        out.extend(self.projection.param_specs());
        out.extend(self.attention.param_specs());
        out.extend(self.classifier.param_specs());
        out
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    /// Mutable access to every parameter of `block`, in name order.
    pub fn block_params_mut(&mut self, block: Block) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params
            .iter_mut()
            .filter(move |(name, _)| Block::of(name) == Some(block))
    }

    /// Replaces a parameter, checking that the name exists and the shape matches.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every parameter of `block` from `other`.
    pub fn copy_block_from(&mut self, other: &ModelStack, block: Block) -> Result<()> {
        for (name, value) in other.params.iter().filter(|(n, _)| Block::of(n) == Some(block)) {
            self.set_param(name, value.clone())?;
        }
        Ok(())
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    /// Marks the stack as holding trained weights usable as a teacher.
    pub fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    /// Pushes the parameters of `blocks` onto `tape`; those with `true` are
    /// trainable, the rest constant.
    pub fn bind(&self, tape: &mut Tape, blocks: &[(Block, bool)]) -> Bound {
        let mut bound = Bound::new();
        for (name, value) in &self.params {
            let Some(block) = Block::of(name) else { continue };
            if let Some(&(_, trainable)) = blocks.iter().find(|(b, _)| *b == block) {
                let v = if trainable {
                    tape.variable(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                bound.insert(name.clone(), v);
            }
        }
        bound
    }

    /// Embedding and logits, as in `encode`, on a tape.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let e = self.encoder.forward(tape, bound, x)?;
        let logits = self.classifier.forward(tape, bound, e)?;
        Ok((e, logits))
    }

    pub fn project(&self, tape: &mut Tape, bound: &Bound, e: Var) -> Result<Var> {
        self.projection.forward(tape, bound, e)
    }

    pub fn attend(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        self.attention.forward(tape, bound, z)
    }

    /// Gradient-free embedding and logits for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[(Block::Encoder, false), (Block::Classifier, false)]);
        let xv = tape.constant(x.clone());
        let (e, l) = self.encode(&mut tape, &bound, xv)?;
        Ok((tape.value(e).clone(), tape.value(l).clone()))
    }

    /// Gradient-free embedding, projection and logits.
    pub fn predict_projected(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(
            &mut tape,
            &[
                (Block::Encoder, false),
                (Block::Projection, false),
                (Block::Classifier, false),
            ],
        );
        let xv = tape.constant(x.clone());
        let (e, l) = self.encode(&mut tape, &bound, xv)?;
        let p = self.project(&mut tape, &bound, e)?;
        Ok((tape.value(e).clone(), tape.value(p).clone(), tape.value(l).clone()))
    }

    /// The deployable part of the student: encoder and classifier only.
    pub fn export_inference(&self) -> InferenceModel {
        let params = self
            .params
            .iter()
            .filter(|(n, _)| matches!(Block::of(n), Some(Block::Encoder | Block::Classifier)))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        InferenceModel {
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            params,
        }
    }
}

/// Encoder plus classifier, detached from the training-only heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub encoder: MlpEncoder,
    pub classifier: Classifier,
    params: BTreeMap<String, Tensor>,
}

impl InferenceModel {
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound: Bound = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
            .collect();
        let xv = tape.constant(x.clone());
        let e = self.encoder.forward(&mut tape, &bound, xv)?;
        let l = self.classifier.forward(&mut tape, &bound, e)?;
        Ok((tape.value(e).clone(), tape.value(l).clone()))
    }

    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(crate::tensor::argmax_rows(&self.predict(x)?.1))
    }
}

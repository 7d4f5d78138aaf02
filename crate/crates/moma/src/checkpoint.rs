//! Binary checkpoints.
//!
//! Little-endian layout: magic `MOMA1`, u32 version, u32-length config text,
//! then four tensor sections (run and parameters, optimizer, RNG, queue),
//! each a u32 count followed by tensors encoded as u32-length name, u32 rank,
//! u64 extents and raw f64 values. Integers that must survive exactly (step,
//! RNG position, queue cursors) are stored as f64 bit patterns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moma_core::config::DistillConfig;
use moma_core::distill::{MomentumPair, NegativeQueue};
use moma_core::nn::ModelStack;
use moma_core::optim::AdamState;
use moma_core::trainer::{DistillParts, RngState, RunKind, TrainRun};
use moma_core::Tensor;

use crate::config_file;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 5] = b"MOMA1";
pub const VERSION: u32 = 1;

type Section = Vec<(String, Tensor)>;

fn bits(x: u64) -> f64 {
    f64::from_bits(x)
}

fn kind_code(kind: RunKind) -> u64 {
    RunKind::ALL.iter().position(|&k| k == kind).expect("listed") as u64
}

fn encode_section(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
}

fn prefixed(prefix: &str, stack: &ModelStack) -> Section {
    stack
        .params()
        .iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
        .collect()
}

/// Serializes every piece of state needed to continue `run`. The negative
/// queue is included only when `config.io.include_queue` is set.
pub fn encode(run: &TrainRun) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let text = config_file::render(&run.config);
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());

    let mut model: Section = vec![
        ("run.kind".into(), Tensor::scalar(bits(kind_code(run.kind)))),
        ("run.step".into(), Tensor::scalar(bits(run.step))),
    ];
    model.extend(prefixed("student", &run.student));
    if let Some(t) = run.teacher() {
        model.extend(prefixed("teacher", t));
    }
    encode_section(&mut out, &model);

    let mut optim: Section = vec![("adam.t".into(), Tensor::scalar(bits(run.adam.t())))];
    for (k, m) in run.adam.first_moments() {
        optim.push((format!("adam.m.{k}"), m.clone()));
    }
    for (k, v) in run.adam.second_moments() {
        optim.push((format!("adam.v.{k}"), v.clone()));
    }
    encode_section(&mut out, &optim);

    let rng = RngState::capture(&run.augment_rng);
    let seed_words = rng
        .seed
        .chunks_exact(8)
        .map(|c| bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let rng_section: Section = vec![
        ("rng.seed".into(), Tensor::new(vec![4], seed_words).unwrap()),
        ("rng.stream".into(), Tensor::scalar(bits(rng.stream))),
        (
            "rng.word_pos".into(),
            Tensor::new(
                vec![2],
                vec![bits(rng.word_pos as u64), bits((rng.word_pos >> 64) as u64)],
            )
            .unwrap(),
        ),
    ];
    encode_section(&mut out, &rng_section);

    let mut queue: Section = Vec::new();
    if let (true, Some(parts)) = (run.config.io.include_queue, &run.distill) {
        let q = &parts.queue;
        queue.push((
            "queue.storage".into(),
            Tensor::matrix(q.capacity(), q.dim(), q.storage().to_vec()).unwrap(),
        ));
        queue.push((
            "queue.state".into(),
            Tensor::new(vec![2], vec![bits(q.cursor() as u64), bits(q.fill() as u64)]).unwrap(),
        ));
    }
    encode_section(&mut out, &queue);
    out
}

pub fn save(run: &TrainRun, path: &Path) -> Result<()> {
    std::fs::write(path, encode(run)).map_err(CliError::io(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn format(&self, msg: impl Into<String>) -> CliError {
        CliError::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.format(format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.format("string is not UTF-8"))
    }

    fn section(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
                .ok_or_else(|| self.format(format!("tensor {name} has an impossible shape {shape:?}")))?;
            let raw = self.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| self.format(e.to_string()))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(self.format(format!("tensor {name} appears twice")));
            }
        }
        Ok(out)
    }
}

struct Tensors {
    map: BTreeMap<String, Tensor>,
    path: PathBuf,
}

impl Tensors {
    fn schema(&self, msg: impl Into<String>) -> CliError {
        CliError::Schema {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.map
            .remove(name)
            .ok_or_else(|| self.schema(format!("missing tensor {name}")))
    }

    fn word(&mut self, name: &str) -> Result<u64> {
        let t = self.take(name)?;
        if t.len() != 1 {
            return Err(self.schema(format!("{name} should hold one value")));
        }
        Ok(t.data()[0].to_bits())
    }

    fn words(&mut self, name: &str, n: usize) -> Result<Vec<u64>> {
        let t = self.take(name)?;
        if t.len() != n {
            return Err(self.schema(format!("{name} should hold {n} values")));
        }
        Ok(t.data().iter().map(|v| v.to_bits()).collect())
    }

    fn fill(&mut self, prefix: &str, stack: &mut ModelStack) -> Result<()> {
        let names: Vec<String> = stack.params().keys().cloned().collect();
        for name in names {
            let t = self.take(&format!("{prefix}.{name}"))?;
            stack
                .set_param(&name, t)
                .map_err(|e| self.schema(format!("{prefix}.{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Rebuilds a run from checkpoint bytes; `path` is used in messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainRun> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let text = r.string()?;
    let mut model = r.section()?;
    let optim = r.section()?;
    let rng = r.section()?;
    let queue = r.section()?;
    if r.pos != bytes.len() {
        return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.extend(optim);
    model.extend(rng);
    model.extend(queue);
    let mut t = Tensors {
        map: model,
        path: path.to_path_buf(),
    };

    let config: DistillConfig = config_file::parse(&text, &format!("{} (embedded config)", path.display()))
        .map_err(|e| t.schema(e.to_string()))?;
    let code = t.word("run.kind")? as usize;
    let kind = *RunKind::ALL
        .get(code)
        .ok_or_else(|| t.schema(format!("unknown run kind code {code}")))?;
    let step = t.word("run.step")?;

    let classes = if kind == RunKind::Teacher {
        config.data.source_classes
    } else {
        config.data.target_classes
    };
    let mut student = ModelStack::new(&config, classes, 0)?;
    t.fill("student", &mut student)?;
    if kind == RunKind::Teacher {
        student.mark_pretrained();
    }

    let distill = if kind.is_distill() {
        let mut teacher = ModelStack::new(&config, config.data.source_classes, 0)?;
        t.fill("teacher", &mut teacher)?;
        teacher.mark_pretrained();
        let momentum = MomentumPair::for_stacks(&student, &teacher, config.distill.alpha)?;
        let d = &config.distill;
        let queue = if t.map.contains_key("queue.storage") {
            let storage = t.take("queue.storage")?;
            let state = t.words("queue.state", 2)?;
            if storage.shape() != [d.queue_size, config.model.proj_dim] {
                return Err(t.schema(format!("queue.storage has shape {:?}", storage.shape())));
            }
            NegativeQueue::from_parts(
                d.queue_size,
                config.model.proj_dim,
                storage.into_data(),
                state[0] as usize,
                state[1] as usize,
                d.normalize_embeddings,
            )
            .map_err(|e| t.schema(e.to_string()))?
        } else {
            NegativeQueue::new(
                d.queue_size,
                config.model.proj_dim,
                config.optim.batch_size,
                d.normalize_embeddings,
            )?
        };
        Some(DistillParts {
            teacher,
            queue,
            momentum,
        })
    } else {
        None
    };

    let adam_t = t.word("adam.t")?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let keys: Vec<String> = t.map.keys().cloned().collect();
    for key in keys {
        if let Some(k) = key.strip_prefix("adam.m.") {
            m.insert(k.to_string(), t.take(&key)?);
        } else if let Some(k) = key.strip_prefix("adam.v.") {
            v.insert(k.to_string(), t.take(&key)?);
        }
    }
    let adam = AdamState::restore(&config.optim, adam_t, m, v).map_err(|e| t.schema(e.to_string()))?;

    let seed_words = t.words("rng.seed", 4)?;
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(&seed_words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let stream = t.word("rng.stream")?;
    let pos = t.words("rng.word_pos", 2)?;
    let word_pos = u128::from(pos[0]) | (u128::from(pos[1]) << 64);
    let augment_rng = RngState { seed, stream, word_pos }.restore();

    if let Some(extra) = t.map.keys().next() {
        return Err(t.schema(format!("unexpected tensor {extra}")));
    }
    Ok(TrainRun {
        kind,
        config,
        student,
        distill,
        adam,
        augment_rng,
        step,
        log: Vec::new(),
    })
}

pub fn load(path: &Path) -> Result<TrainRun> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes, path)
}

//! Gaussian-mixture source and target tasks, augmentation and batching.
//!
//! Every split is drawn from its own ChaCha8 stream of the task seed, so
//! changing the size of one split leaves the others untouched.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{DataConfig, Regime};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}; expected train, val or test")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Group id per sample, for majority-vote aggregation.
    pub groups: Option<Vec<usize>>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Train, validation and test splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generator parameters: the data section of a config plus a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub data: DataConfig,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(data: DataConfig, seed: u64) -> Result<Self> {
        let (cs, ct) = (data.source_classes, data.target_classes);
        match data.regime {
            Regime::Same if cs != ct => {
                return Err(Error::Config(format!(
                    "same regime needs equal class counts, got {cs} source and {ct} target"
                )))
            }
            Regime::Relevant if cs == ct => {
                return Err(Error::Config(format!(
                    "relevant regime needs differing class counts, got {cs} for both; use the same regime"
                )))
            }
            _ => {}
        }
        if cs < 2 || ct < 2 || data.input_dim == 0 {
            return Err(Error::Config(
                "need at least 2 classes per task and a positive input_dim".into(),
            ));
        }
        if data.source_per_class == 0 || data.target_per_class == 0 || data.test_per_class == 0 {
            return Err(Error::Config(
                "train and test splits need at least one sample per class".into(),
            ));
        }
        if !(data.imbalance >= 1.0) || data.spread < 0.0 || data.center_scale < 0.0 || data.shift < 0.0 {
            return Err(Error::Config(
                "imbalance must be >= 1; spread, center_scale and shift non-negative".into(),
            ));
        }
        Ok(TaskSpec { data, seed })
    }

    /// For each target class, the source class it corresponds to. `None` in
    /// the irrelevant regime, where no correspondence exists.
    pub fn label_map(&self) -> Option<Vec<Option<usize>>> {
        let d = &self.data;
        match d.regime {
            Regime::Irrelevant => None,
            Regime::Same | Regime::Relevant => Some(
                (0..d.target_classes)
                    .map(|k| (k < d.source_classes).then_some(k))
                    .collect(),
            ),
        }
    }
}

/// Both tasks with the centers they were drawn around.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub spec: TaskSpec,
    pub source_centers: Tensor,
    pub target_centers: Tensor,
    pub source: TaskData,
    pub target: TaskData,
}

const CENTER_STREAM: u64 = 0;
const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 4;
/// Epoch `e` shuffles with stream `EPOCH_STREAM + e`.
const EPOCH_STREAM: u64 = 1 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-class training counts: the first class keeps `n`, the last `n / ratio`,
/// geometric in between.
fn class_counts(n: usize, classes: usize, ratio: f64) -> Vec<usize> {
    (0..classes)
        .map(|k| {
            let frac = k as f64 / (classes - 1) as f64;
            let c = n as f64 * math::exp(-frac * math::ln(ratio));
            (libm::round(c) as usize).max(1)
        })
        .collect()
}

fn sample_split(
    rng: &mut ChaCha8Rng,
    centers: &Tensor,
    counts: &[usize],
    spread: f64,
    group_size: usize,
    split: Split,
) -> Dataset {
    let dim = centers.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut next_group = 0;
    for (k, &count) in counts.iter().enumerate() {
        for i in 0..count {
            data.extend(centers.row(k).iter().map(|&c| c + spread * normal(rng)));
            labels.push(k);
            if group_size > 0 {
                if i > 0 && i % group_size == 0 {
                    next_group += 1;
                }
                groups.push(next_group);
            }
        }
        if group_size > 0 && count > 0 {
            next_group += 1;
        }
    }
    Dataset {
        inputs: Tensor::matrix(labels.len(), dim, data).expect("rows have dim entries"),
        labels,
        groups: (group_size > 0).then_some(groups),
        split,
        num_classes: centers.rows(),
    }
}

fn sample_task(seed: u64, first_stream: u64, centers: &Tensor, train_per_class: usize, d: &DataConfig) -> TaskData {
    let classes = centers.rows();
    let train_counts = class_counts(train_per_class, classes, d.imbalance);
    let draw = |offset: u64, counts: &[usize], split: Split| {
        let mut rng = stream(seed, first_stream + offset);
        sample_split(&mut rng, centers, counts, d.spread, d.group_size, split)
    };
    TaskData {
        train: draw(0, &train_counts, Split::Train),
        val: draw(1, &vec![d.val_per_class; classes], Split::Val),
        test: draw(2, &vec![d.test_per_class; classes], Split::Test),
    }
}

/// Draws centers and every split. A pure function of `spec`.
///
/// Source centers are N(0, center_scale²) per coordinate. Corresponding
/// target classes (same regime, and the shared classes of the relevant
/// regime) sit at the source center displaced by `shift` along a random unit
/// direction; every other target class gets a fresh independent center.
/// Class imbalance applies to the training split only.
pub fn generate(spec: &TaskSpec) -> SynthTask {
    let d = &spec.data;
    let dim = d.input_dim;
    let mut rng = stream(spec.seed, CENTER_STREAM);
    let draw_centers =
        |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n * dim).map(|_| d.center_scale * normal(rng)).collect() };
    let source = draw_centers(&mut rng, d.source_classes);
    let mut target = Vec::with_capacity(d.target_classes * dim);
    let map = spec.label_map();
    for k in 0..d.target_classes {
        match map.as_ref().and_then(|m| m[k]) {
            Some(s) => {
                let u = unit_vector(&mut rng, dim);
                target.extend((0..dim).map(|j| source[s * dim + j] + d.shift * u[j]));
            }
            None => target.extend(draw_centers(&mut rng, 1)),
        }
    }
    let source_centers = Tensor::matrix(d.source_classes, dim, source).expect("center count");
    let target_centers = Tensor::matrix(d.target_classes, dim, target).expect("center count");
    SynthTask {
        source: sample_task(spec.seed, SOURCE_STREAM, &source_centers, d.source_per_class, d),
        target: sample_task(spec.seed, TARGET_STREAM, &target_centers, d.target_per_class, d),
        spec: spec.clone(),
        source_centers,
        target_centers,
    }
}

/// Multiplicative and additive Gaussian jitter: x·(1 + s·ε₁) + s·ε₂.
/// Strength 0 returns the input unchanged and draws nothing.
pub fn augment<R: Rng>(x: &Tensor, strength: f64, rng: &mut R) -> Result<Tensor> {
    if !(strength >= 0.0) {
        return Err(Error::Config(format!(
            "augmentation strength must be >= 0, got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        let scale: f64 = rng.sample(StandardNormal);
        let jitter: f64 = rng.sample(StandardNormal);
        *v = *v * (1.0 + strength * scale) + strength * jitter;
    }
    Ok(out)
}

/// Batches of one epoch as index lists. With `shuffle`, the order is a
/// permutation drawn from stream `epoch` of `seed`. The short tail is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be between 1 and the dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut stream(seed, EPOCH_STREAM + epoch));
    }
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches of one epoch of `data`, as tensors.
pub fn batches(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    Ok(epoch_batches(data.len(), batch_size, seed, epoch, shuffle)?
        .iter()
        .map(|idx| data.batch(idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(regime: Regime, cs: usize, ct: usize) -> DataConfig {
        DataConfig {
            regime,
            input_dim: 5,
            source_classes: cs,
            target_classes: ct,
            source_per_class: 200,
            target_per_class: 20,
            val_per_class: 5,
            test_per_class: 30,
            ..DataConfig::default()
        }
    }

    fn column_means(d: &Dataset, class: usize) -> (Vec<f64>, usize) {
        let dim = d.input_dim();
        let mut sum = vec![0.0; dim];
        let mut n = 0;
        for (i, &y) in d.labels.iter().enumerate() {
            if y == class {
                n += 1;
                for j in 0..dim {
                    sum[j] += d.inputs.get(i, j);
                }
            }
        }
        (sum.into_iter().map(|s| s / n as f64).collect(), n)
    }

    #[test]
    fn regime_class_combinations() {
        assert!(TaskSpec::new(cfg(Regime::Same, 3, 4), 0).is_err());
        assert!(TaskSpec::new(cfg(Regime::Relevant, 3, 3), 0).is_err());
        assert!(TaskSpec::new(cfg(Regime::Relevant, 3, 4), 0).is_ok());
        assert!(TaskSpec::new(cfg(Regime::Irrelevant, 3, 3), 0).is_ok());
    }

    #[test]
    fn label_map_exists_for_same_and_relevant_only() {
        let same = TaskSpec::new(cfg(Regime::Same, 3, 3), 0).unwrap();
        assert_eq!(same.label_map(), Some(vec![Some(0), Some(1), Some(2)]));
        let rel = TaskSpec::new(cfg(Regime::Relevant, 3, 4), 0).unwrap();
        assert_eq!(rel.label_map(), Some(vec![Some(0), Some(1), Some(2), None]));
        let irr = TaskSpec::new(cfg(Regime::Irrelevant, 3, 3), 0).unwrap();
        assert_eq!(irr.label_map(), None);
    }

    #[test]
    fn relevant_extra_class_has_its_own_center() {
        let mut c = cfg(Regime::Relevant, 3, 4);
        c.shift = 0.0;
        let t = generate(&TaskSpec::new(c, 2).unwrap());
        for k in 0..3 {
            assert_eq!(t.source_centers.row(k), t.target_centers.row(k));
        }
        for k in 0..3 {
            assert_ne!(t.source_centers.row(k), t.target_centers.row(3));
        }
        assert!(t.target.train.labels.contains(&3));
        assert_eq!(t.target.train.num_classes, 4);
    }

    #[test]
    fn shift_moves_centers_by_exactly_shift() {
        let mut c = cfg(Regime::Same, 4, 4);
        c.shift = 0.7;
        let t = generate(&TaskSpec::new(c, 9).unwrap());
        for k in 0..4 {
            let d: f64 = t
                .source_centers
                .row(k)
                .iter()
                .zip(t.target_centers.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!((d.sqrt() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn null_shift_gives_matching_distributions() {
        let mut c = cfg(Regime::Same, 3, 3);
        c.shift = 0.0;
        c.target_per_class = 200;
        let t = generate(&TaskSpec::new(c.clone(), 4).unwrap());
        for k in 0..3 {
            let (ms, ns) = column_means(&t.source.train, k);
            let (mt, nt) = column_means(&t.target.train, k);
            let bound = 3.0 * c.spread * (1.0 / ns as f64 + 1.0 / nt as f64).sqrt();
            for j in 0..c.input_dim {
                assert!((ms[j] - mt[j]).abs() < bound, "class {k} dim {j}");
            }
        }
    }

    #[test]
    fn cluster_means_within_lln_bound() {
        for seed in 0..20 {
            let c = cfg(Regime::Same, 3, 3);
            let t = generate(&TaskSpec::new(c.clone(), seed).unwrap());
            for k in 0..3 {
                let (m, n) = column_means(&t.source.train, k);
                let bound = 4.0 * c.spread / (n as f64).sqrt();
                for j in 0..c.input_dim {
                    assert!(
                        (m[j] - t.source_centers.get(k, j)).abs() < bound,
                        "seed {seed} class {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn sizes_labels_and_groups() {
        let mut c = cfg(Regime::Same, 3, 3);
        c.group_size = 4;
        c.imbalance = 4.0;
        let t = generate(&TaskSpec::new(c, 1).unwrap());
        let counts: Vec<usize> = (0..3)
            .map(|k| t.source.train.labels.iter().filter(|&&y| y == k).count())
            .collect();
        assert_eq!(counts, vec![200, 100, 50]);
        assert_eq!(t.source.test.len(), 90);
        assert!(t.source.train.len() >= 10 * t.target.train.len() / 2);
        let g = t.target.train.groups.as_ref().unwrap();
        // 20 samples of class 0 in groups of 4 → ids 0..5; the next class starts fresh.
        assert_eq!(&g[..5], &[0, 0, 0, 0, 1]);
        assert_eq!(g[20], 5);
        for split in Split::ALL {
            let d = t.target.split(split);
            assert!(d.labels.iter().all(|&y| y < 3));
            assert_eq!(d.split, split);
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = TaskSpec::new(cfg(Regime::Irrelevant, 3, 5), 11).unwrap();
        assert_eq!(generate(&spec), generate(&spec));
        let other = TaskSpec::new(cfg(Regime::Irrelevant, 3, 5), 12).unwrap();
        assert_ne!(generate(&spec).source.train, generate(&other).source.train);
    }

    #[test]
    fn split_streams_are_independent_of_other_sizes() {
        let a = cfg(Regime::Same, 3, 3);
        let mut b = a.clone();
        b.target_per_class = 7;
        let ta = generate(&TaskSpec::new(a, 3).unwrap());
        let tb = generate(&TaskSpec::new(b, 3).unwrap());
        assert_eq!(ta.source, tb.source);
        assert_eq!(ta.target.test, tb.target.test);
    }

    #[test]
    fn augment_cases() {
        let x = Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, 0.0, &mut rng).unwrap(), x);
        assert!(augment(&x, -0.1, &mut rng).is_err());
        let a = augment(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn augmentation_grows_with_strength() {
        let x = Tensor::full(&[50, 4], 1.0);
        let mut last = 0.0;
        for s in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
            let mut total = 0.0;
            for seed in 0..20 {
                let y = augment(&x, s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                total += y
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
            assert!(total >= last, "strength {s}");
            last = total;
        }
    }

    #[test]
    fn batching_cases() {
        assert_eq!(
            epoch_batches(7, 3, 0, 0, false).unwrap(),
            vec![vec![0, 1, 2], vec![3, 4, 5]]
        );
        assert!(epoch_batches(3, 4, 0, 0, false).is_err());
        assert_eq!(
            epoch_batches(20, 4, 1, 3, true).unwrap(),
            epoch_batches(20, 4, 1, 3, true).unwrap()
        );
        assert_ne!(
            epoch_batches(20, 4, 1, 3, true).unwrap(),
            epoch_batches(20, 4, 1, 4, true).unwrap()
        );
    }

    proptest! {
        #[test]
        fn epochs_are_permutations(n in 1usize..60, b in 1usize..10, seed in 0u64..100, epoch in 0u64..5) {
            prop_assume!(b <= n);
            let batches = epoch_batches(n, b, seed, epoch, true).unwrap();
            let mut seen = vec![0usize; n];
            for batch in &batches {
                prop_assert_eq!(batch.len(), b);
                for &i in batch {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c <= 1));
            if n % b == 0 {
                prop_assert!(seen.iter().all(|&c| c == 1));
            }
        }
    }
}

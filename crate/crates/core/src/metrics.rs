//! Evaluation metrics: accuracy, macro and AGGC-weighted F1, quadratic
//! weighted kappa, silhouette, class-sorted correlation blocks and
//! group-level majority voting.
//!
//! Conventions for degenerate cases:
//! - a class with precision + recall = 0 has F1 = 0 and still counts in the macro mean;
//! - κ_w with zero expected disagreement is 1 if the observed disagreement is also zero, else 0;
//! - a sample alone in its class has silhouette 0;
//! - majority-vote ties go to the lowest class index;
//! - correlations involving a constant vector are 0.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Input(format!(
                "confusion matrix needs {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let c = rows.len();
        let counts: Vec<u64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_counts(c, counts)
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Input(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            if t >= classes || p >= classes {
                return Err(Error::Input(format!(
                    "sample {i}: class ({t}, {p}) out of range for {classes} classes"
                )));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Input("confusion matrix is empty".into()));
        }
        Ok(())
    }

    /// Per-class F1 = 2PR/(P+R), 0 when P + R = 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let predicted = self.col_sum(c) as f64;
                let actual = self.row_sum(c) as f64;
                let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
                let r = if actual > 0.0 { tp / actual } else { 0.0 };
                if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let f1 = cm.per_class_f1();
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// Class roles scored by the AGGC weighted F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AggcRole {
    G3,
    G4,
    G5,
    Normal,
    Stroma,
}

impl AggcRole {
    pub const ALL: [AggcRole; 5] = [
        AggcRole::G3,
        AggcRole::G4,
        AggcRole::G5,
        AggcRole::Normal,
        AggcRole::Stroma,
    ];

    pub fn weight(self) -> f64 {
        match self {
            AggcRole::G3 | AggcRole::G4 | AggcRole::G5 => 0.25,
            AggcRole::Normal | AggcRole::Stroma => 0.125,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggcRole::G3 => "G3",
            AggcRole::G4 => "G4",
            AggcRole::G5 => "G5",
            AggcRole::Normal => "Normal",
            AggcRole::Stroma => "Stroma",
        }
    }
}

impl fmt::Display for AggcRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggcRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggcRole::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown AGGC role {s:?}")))
    }
}

/// 0.25·(F1_G3 + F1_G4 + F1_G5) + 0.125·(F1_Normal + F1_Stroma).
pub fn weighted_f1_aggc(per_class_f1: &BTreeMap<AggcRole, f64>) -> Result<f64> {
    let mut total = 0.0;
    for role in AggcRole::ALL {
        let f1 = per_class_f1
            .get(&role)
            .ok_or_else(|| Error::Input(format!("missing F1 for AGGC role {role}")))?;
        total += role.weight() * f1;
    }
    Ok(total)
}

/// Weighted F1 of a confusion matrix whose class `i` plays `roles[i]`.
/// When several classes share a role their F1 values are averaged.
pub fn weighted_f1_for_roles(cm: &ConfusionMatrix, roles: &[AggcRole]) -> Result<f64> {
    if roles.len() != cm.classes() {
        return Err(Error::Input(format!(
            "{} AGGC roles for {} classes",
            roles.len(),
            cm.classes()
        )));
    }
    let f1 = cm.per_class_f1();
    let mut acc: BTreeMap<AggcRole, (f64, usize)> = BTreeMap::new();
    for (&role, &v) in roles.iter().zip(&f1) {
        let e = acc.entry(role).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let map = acc.into_iter().map(|(r, (s, n))| (r, s / n as f64)).collect();
    weighted_f1_aggc(&map)
}

/// Quadratic weighted kappa with weights (i−j)²/(C−1)².
pub fn kappa_quadratic(cm: &ConfusionMatrix) -> Result<f64> {
    let c = cm.classes();
    if c < 2 {
        return Err(Error::Input(format!("kappa needs at least 2 classes, got {c}")));
    }
    cm.nonempty()?;
    let total = cm.total() as f64;
    let rows: Vec<f64> = (0..c).map(|i| cm.row_sum(i) as f64 / total).collect();
    let cols: Vec<f64> = (0..c).map(|j| cm.col_sum(j) as f64 / total).collect();
    let denom_w = ((c - 1) * (c - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let d = i as f64 - j as f64;
            let w = d * d / denom_w;
            observed += w * cm.get(i, j) as f64 / total;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Ok(if observed == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - observed / expected)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mean silhouette coefficient with Euclidean distances.
pub fn silhouette(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = embeddings.rows();
    if labels.len() != n || n == 0 {
        return Err(Error::Input(format!("{n} embeddings but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; classes];
    for &l in labels {
        sizes[l] += 1;
    }
    let present = sizes.iter().filter(|&&s| s > 0).count();
    if present < 2 {
        return Err(Error::Input("silhouette needs at least two classes".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; classes];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += euclidean(embeddings.row(i), embeddings.row(j));
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes)
            .filter(|&k| k != own && sizes[k] > 0)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Pearson correlation of two equal-length vectors; 0 if either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("pearson: zero-variance embedding, correlation set to 0");
        return 0.0;
    }
    sab / (math::sqrt(saa) * math::sqrt(sbb))
}

/// Pearson correlations between every sample of `a` (rows) and every sample
/// of `b` (columns), both sides sorted by class label (stable within a class).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBlock {
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub values: Tensor,
}

fn class_order(labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by_key(|&i| labels[i]);
    idx
}

pub fn class_correlations(
    emb_a: &Tensor,
    labels_a: &[usize],
    emb_b: &Tensor,
    labels_b: &[usize],
) -> Result<CorrelationBlock> {
    if emb_a.rows() != labels_a.len() || emb_b.rows() != labels_b.len() {
        return Err(Error::Input("embedding and label counts differ".into()));
    }
    if emb_a.cols() != emb_b.cols() {
        return Err(Error::dim("class_correlations", emb_a.shape(), emb_b.shape()));
    }
    let oa = class_order(labels_a);
    let ob = class_order(labels_b);
    let mut values = Vec::with_capacity(oa.len() * ob.len());
    for &i in &oa {
        for &j in &ob {
            values.push(pearson(emb_a.row(i), emb_b.row(j)));
        }
    }
    Ok(CorrelationBlock {
        row_labels: oa.iter().map(|&i| labels_a[i]).collect(),
        col_labels: ob.iter().map(|&j| labels_b[j]).collect(),
        values: Tensor::matrix(oa.len(), ob.len(), values)?,
    })
}

/// Modal predicted class per group; ties resolve to the lowest class index.
pub fn majority_vote(preds: &[usize], groups: &[usize]) -> Result<BTreeMap<usize, usize>> {
    if preds.is_empty() {
        return Err(Error::Input("majority vote over no predictions".into()));
    }
    if preds.len() != groups.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} group ids",
            preds.len(),
            groups.len()
        )));
    }
    let mut tallies: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&p, &g) in preds.iter().zip(groups) {
        *tallies.entry(g).or_default().entry(p).or_default() += 1;
    }
    Ok(tallies
        .into_iter()
        .map(|(g, votes)| {
            // BTreeMap iterates classes ascending; strict > keeps the lowest on ties.
            let mut best = (usize::MAX, 0);
            for (class, count) in votes {
                if count > best.1 {
                    best = (class, count);
                }
            }
            (g, best.0)
        })
        .collect())
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: Option<f64>,
    pub kappa_quadratic: f64,
    pub silhouette: Option<f64>,
    /// Accuracy of majority-voted group predictions, when groups are defined.
    pub group_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Builds the report from labels and predictions; `embeddings` enables
    /// the silhouette, `groups` the group-level accuracy and `roles` the AGGC F1.
    pub fn compute(
        classes: usize,
        truth: &[usize],
        pred: &[usize],
        embeddings: Option<&Tensor>,
        groups: Option<&[usize]>,
        roles: Option<&[AggcRole]>,
    ) -> Result<Self> {
        let confusion = ConfusionMatrix::from_predictions(classes, truth, pred)?;
        let silhouette = match embeddings {
            Some(e) if truth.iter().any(|&t| t != truth[0]) => Some(silhouette(e, truth)?),
            _ => None,
        };
        let group_accuracy = match groups {
            Some(g) => {
                let voted = majority_vote(pred, g)?;
                let truth_votes = majority_vote(truth, g)?;
                let hits = voted.iter().filter(|(k, v)| truth_votes[k] == **v).count();
                Some(hits as f64 / voted.len() as f64)
            }
            None => None,
        };
        Ok(MetricsReport {
            accuracy: accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion)?,
            weighted_f1: roles.map(|r| weighted_f1_for_roles(&confusion, r)).transpose()?,
            kappa_quadratic: kappa_quadratic(&confusion)?,
            silhouette,
            group_accuracy,
            confusion,
        })
    }
}

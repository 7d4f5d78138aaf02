//! Text artifacts: metrics reports, loss logs, embedding and dataset CSVs,
//! and the run comparison table. Every file starts with [`header`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use moma_core::losses::LossBreakdown;
use moma_core::metrics::{class_correlations, MetricsReport};
use moma_core::synth::Dataset;
use moma_core::{DistillConfig, Tensor};

use crate::config_file;
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Engine version plus the full config, every line commented out.
pub fn header(config: &DistillConfig) -> String {
    format!("# moma {VERSION}\n{}", config_file::render_commented(config))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |v| format!("{v:?}"))
}

/// Where an evaluation came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext<'a> {
    pub tag: &'a str,
    pub dataset: &'a str,
    pub split: &'a str,
    pub seed: u64,
    pub step: u64,
}

/// Mean Pearson correlation between embeddings of each pair of classes.
pub fn class_correlation_means(embeddings: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let block = class_correlations(embeddings, labels, embeddings, labels)?;
    let mut sum = vec![0.0; classes * classes];
    let mut count = vec![0usize; classes * classes];
    for (i, &a) in block.row_labels.iter().enumerate() {
        for (j, &b) in block.col_labels.iter().enumerate() {
            sum[a * classes + b] += block.values.get(i, j);
            count[a * classes + b] += 1;
        }
    }
    let means = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(Tensor::matrix(classes, classes, means)?)
}

fn matrix_line<T: std::fmt::Display>(rows: usize, cols: usize, at: impl Fn(usize, usize) -> T) -> String {
    (0..rows)
        .map(|i| (0..cols).map(|j| at(i, j).to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Flat `key: value` record; `correlation` is a class-by-class matrix.
pub fn metrics_text(
    config: &DistillConfig,
    ctx: &EvalContext<'_>,
    report: &MetricsReport,
    correlation: Option<&Tensor>,
) -> String {
    let mut out = header(config);
    let cm = &report.confusion;
    let k = cm.classes();
    let lines: [(&str, String); 13] = [
        ("tag", ctx.tag.into()),
        ("dataset", ctx.dataset.into()),
        ("split", ctx.split.into()),
        ("seed", ctx.seed.to_string()),
        ("step", ctx.step.to_string()),
        ("samples", cm.total().to_string()),
        ("accuracy", format!("{:?}", report.accuracy)),
        ("macro_f1", format!("{:?}", report.macro_f1)),
        ("weighted_f1", opt(report.weighted_f1)),
        ("kappa_quadratic", format!("{:?}", report.kappa_quadratic)),
        ("silhouette", opt(report.silhouette)),
        ("group_accuracy", opt(report.group_accuracy)),
        ("confusion", matrix_line(k, k, |i, j| cm.get(i, j))),
    ];
    for (key, value) in lines {
        writeln!(out, "{key}: {value}").unwrap();
    }
    if let Some(c) = correlation {
        let line = matrix_line(c.rows(), c.cols(), |i, j| format!("{:?}", c.get(i, j)));
        writeln!(out, "class_correlation_pearson: {line}").unwrap();
    }
    out
}

pub fn loss_csv(config: &DistillConfig, first_step: u64, log: &[LossBreakdown]) -> String {
    let mut out = header(config);
    out.push_str("step,ce,nce,kl,gamma,total\n");
    for (i, b) in log.iter().enumerate() {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{},{:?}",
            first_step + i as u64,
            b.ce,
            b.nce,
            b.kl,
            b.gamma,
            b.total
        )
        .unwrap();
    }
    out
}

pub fn embeddings_csv(
    config: &DistillConfig,
    model: &str,
    split: &str,
    embeddings: &Tensor,
    labels: &[usize],
) -> String {
    let mut out = header(config);
    out.push_str("model,split,label");
    for j in 0..embeddings.cols() {
        write!(out, ",dim{j}").unwrap();
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        write!(out, "{model},{split},{label}").unwrap();
        for v in embeddings.row(i) {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Rows of every dataset in order; an empty `group` cell means no group.
pub fn dataset_csv(config: &DistillConfig, sets: &[&Dataset]) -> String {
    let mut out = header(config);
    let d = sets.first().map_or(0, |s| s.input_dim());
    for j in 0..d {
        write!(out, "x{j},").unwrap();
    }
    out.push_str("label,group,split\n");
    for set in sets {
        for i in 0..set.len() {
            for v in set.inputs.row(i) {
                write!(out, "{v:?},").unwrap();
            }
            let group = set.groups.as_ref().map(|g| g[i].to_string()).unwrap_or_default();
            writeln!(out, "{},{group},{}", set.labels[i], set.split).unwrap();
        }
    }
    out
}

/// A metrics report read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub path: PathBuf,
    pub values: BTreeMap<String, String>,
}

impl ParsedReport {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| CliError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected `key: value`, got {line:?}"),
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        let report = ParsedReport {
            path: path.to_path_buf(),
            values,
        };
        for key in ["tag", "accuracy", "macro_f1", "kappa_quadratic", "silhouette"] {
            report.get(key)?;
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text, path)
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Schema {
                path: self.path.clone(),
                msg: format!("report has no {key:?} entry"),
            })
    }

    pub fn tag(&self) -> &str {
        self.get("tag").expect("checked on parse")
    }

    /// `Ok(None)` for a value written as `none`.
    pub fn metric(&self, key: &str) -> Result<Option<f64>> {
        let raw = self.get(key)?;
        if raw == "none" {
            return Ok(None);
        }
        raw.parse().map(Some).map_err(|_| CliError::Schema {
            path: self.path.clone(),
            msg: format!("{key} = {raw:?} is not a number"),
        })
    }
}

/// Columns of the comparison table, with their report keys.
pub const COMPARE_COLUMNS: [(&str, &str); 4] = [
    ("ACC", "accuracy"),
    ("macro-F1", "macro_f1"),
    ("kappa_w", "kappa_quadratic"),
    ("silhouette", "silhouette"),
];

/// Mean and sample standard deviation; `None` when `values` is empty.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub tag: String,
    pub count: usize,
    /// Per column: value (or mean) and, for summary rows, the sample std.
    pub cells: Vec<Option<(f64, Option<f64>)>>,
}

/// One row per report, then one `mean` row per tag shared by two or more reports.
pub fn compare_rows(reports: &[ParsedReport]) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    let mut by_tag: BTreeMap<&str, Vec<&ParsedReport>> = BTreeMap::new();
    for r in reports {
        let cells = COMPARE_COLUMNS
            .iter()
            .map(|(_, key)| Ok(r.metric(key)?.map(|v| (v, None))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(CompareRow {
            run: r.path.display().to_string(),
            tag: r.tag().into(),
            count: 1,
            cells,
        });
        by_tag.entry(r.tag()).or_default().push(r);
    }
    for (tag, group) in by_tag {
        if group.len() < 2 {
            continue;
        }
        let mut cells = Vec::new();
        for (_, key) in COMPARE_COLUMNS {
            let values: Vec<f64> = group
                .iter()
                .map(|r| r.metric(key))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            cells.push(mean_std(&values).map(|(m, s)| (m, Some(s))));
        }
        rows.push(CompareRow {
            run: "mean".into(),
            tag: tag.into(),
            count: group.len(),
            cells,
        });
    }
    Ok(rows)
}

pub fn compare_text(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.run.len()).chain([3]).max().unwrap_or(3);
    let tag_width = rows.iter().map(|r| r.tag.len()).chain([3]).max().unwrap_or(3);
    let mut out = format!("{:<width$}  {:<tag_width$}  {:>3}", "run", "tag", "n");
    for (name, _) in COMPARE_COLUMNS {
        write!(out, "  {name:>17}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{:<width$}  {:<tag_width$}  {:>3}", r.run, r.tag, r.count).unwrap();
        for cell in &r.cells {
            let text = match cell {
                None => "none".into(),
                Some((v, None)) => format!("{v:.4}"),
                Some((m, Some(s))) => format!("{m:.4} ± {s:.4}"),
            };
            write!(out, "  {text:>17}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("run,tag,n");
    for (_, key) in COMPARE_COLUMNS {
        write!(out, ",{key},{key}_std").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{}", r.run, r.tag, r.count).unwrap();
        for cell in &r.cells {
            match cell {
                None => out.push_str(",,"),
                Some((v, s)) => write!(out, ",{v:?},{}", s.map(|s| format!("{s:?}")).unwrap_or_default()).unwrap(),
            }
        }
        out.push('\n');
    }
    out
}

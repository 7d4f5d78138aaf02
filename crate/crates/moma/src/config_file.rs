//! `key = value` config files grouped under `[data]`, `[model]`, `[distill]`,
//! `[optim]` and `[io]`. Unknown sections and keys are errors; missing keys
//! keep their defaults. `#` starts a comment line.

use std::fmt::Write as _;
use std::path::Path;

use moma_core::config::{DistillConfig, Regime, StudentInit};
use moma_core::metrics::AggcRole;

use crate::error::{CliError, Result};

trait Value: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}

plain_value!(usize, u64, u8, bool, String);

impl Value for f64 {
    // Debug formatting is the shortest text that parses back to the same bits.
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl Value for Regime {
    fn render(&self) -> String {
        self.as_str().into()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: moma_core::Error| e.to_string())
    }
}

impl Value for StudentInit {
    fn render(&self) -> String {
        self.as_str().into()
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: moma_core::Error| e.to_string())
    }
}

impl Value for Vec<usize> {
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
            .collect()
    }
}

impl Value for Option<Vec<AggcRole>> {
    fn render(&self) -> String {
        match self {
            None => "none".into(),
            Some(r) => r.iter().map(AggcRole::to_string).collect::<Vec<_>>().join(","),
        }
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            return Ok(None);
        }
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e: moma_core::Error| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
    }
}

macro_rules! fields {
    ($($sec:literal $key:literal => $($path:ident).+;)*) => {
        /// Every `(section, key)` pair, in rendering order.
        pub const KEYS: &[(&str, &str)] = &[$(($sec, $key)),*];

        fn get(c: &DistillConfig, sec: &str, key: &str) -> String {
            match (sec, key) {
                $(($sec, $key) => c.$($path).+.render(),)*
                _ => unreachable!("listed in KEYS"),
            }
        }

        /// `Ok(false)` when the key is unknown.
        fn set(c: &mut DistillConfig, sec: &str, key: &str, v: &str) -> std::result::Result<bool, String> {
            match (sec, key) {
                $(($sec, $key) => {
                    c.$($path).+ = Value::parse(v)?;
                    Ok(true)
                })*
                _ => Ok(false),
            }
        }
    };
}

fields! {
    "data" "regime" => data.regime;
    "data" "input_dim" => data.input_dim;
    "data" "source_classes" => data.source_classes;
    "data" "target_classes" => data.target_classes;
    "data" "source_per_class" => data.source_per_class;
    "data" "target_per_class" => data.target_per_class;
    "data" "val_per_class" => data.val_per_class;
    "data" "test_per_class" => data.test_per_class;
    "data" "center_scale" => data.center_scale;
    "data" "spread" => data.spread;
    "data" "shift" => data.shift;
    "data" "imbalance" => data.imbalance;
    "data" "augment" => data.augment;
    "data" "group_size" => data.group_size;
    "data" "aggc_roles" => data.aggc_roles;
    "model" "hidden" => model.hidden;
    "model" "embed_dim" => model.embed_dim;
    "model" "proj_hidden" => model.proj_hidden;
    "model" "proj_dim" => model.proj_dim;
    "model" "heads" => model.heads;
    "model" "output_proj" => model.output_proj;
    "distill" "alpha" => distill.alpha;
    "distill" "tau" => distill.tau;
    "distill" "kd_temperature" => distill.kd_temperature;
    "distill" "gamma_auto" => distill.gamma_auto;
    "distill" "gamma" => distill.gamma;
    "distill" "queue_size" => distill.queue_size;
    "distill" "normalize_embeddings" => distill.normalize_embeddings;
    "distill" "ce_weight" => distill.ce_weight;
    "distill" "nce_weight" => distill.nce_weight;
    "distill" "kl_weight" => distill.kl_weight;
    "distill" "student_init" => distill.student_init;
    "optim" "lr" => optim.lr;
    "optim" "beta1" => optim.beta1;
    "optim" "beta2" => optim.beta2;
    "optim" "eps" => optim.eps;
    "optim" "epochs" => optim.epochs;
    "optim" "pretrain_epochs" => optim.pretrain_epochs;
    "optim" "batch_size" => optim.batch_size;
    "optim" "seed" => optim.seed;
    "io" "out_dir" => io.out_dir;
    "io" "include_queue" => io.include_queue;
}

const SECTIONS: [&str; 5] = ["data", "model", "distill", "optim", "io"];

/// Parses config text; `origin` names the source in error messages.
/// The result is validated.
pub fn parse(text: &str, origin: &str) -> Result<DistillConfig> {
    let mut config = DistillConfig::default();
    let mut section: Option<&str> = None;
    let mut seen: Vec<(&str, &str)> = Vec::new();
    let err = |line: usize, msg: String| CliError::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            section = Some(
                SECTIONS
                    .into_iter()
                    .find(|s| *s == name)
                    .ok_or_else(|| err(line_no, format!("unknown section [{name}]")))?,
            );
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected `key = value`, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| err(line_no, format!("key {key:?} appears before any [section]")))?;
        let known = set(&mut config, sec, key, value).map_err(|m| err(line_no, format!("{key}: {m}")))?;
        if !known {
            return Err(err(line_no, format!("unknown key {key:?} in [{sec}]")));
        }
        let entry = KEYS.iter().find(|(s, k)| *s == sec && *k == key).expect("known key");
        if seen.contains(entry) {
            return Err(err(line_no, format!("duplicate key {key:?} in [{sec}]")));
        }
        seen.push(*entry);
    }
    config.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<DistillConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse(&text, &path.display().to_string())
}

/// Canonical text of `config`: every key, in `KEYS` order.
pub fn render(config: &DistillConfig) -> String {
    let mut out = String::new();
    let mut current = "";
    for &(sec, key) in KEYS {
        if sec != current {
            if !current.is_empty() {
                out.push('\n');
            }
            writeln!(out, "[{sec}]").unwrap();
            current = sec;
        }
        writeln!(out, "{key} = {}", get(config, sec, key)).unwrap();
    }
    out
}

/// `render` with blank lines dropped and every line behind `# `.
pub fn render_commented(config: &DistillConfig) -> String {
    render(config)
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| format!("# {l}\n"))
        .collect()
}

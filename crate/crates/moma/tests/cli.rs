use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = include_str!("../../../configs/tiny.cfg");

fn moma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moma")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = moma(args);
    assert!(
        out.status.success(),
        "moma {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = moma(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "moma {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    fn pretrain(&self, out: &str) {
        ok(&["pretrain", "--config", &self.s("run.cfg"), "--out", &self.s(out)]);
    }
}

fn value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in report"))
}

#[test]
fn pretrain_writes_checkpoint_and_report() {
    let w = Workspace::new(TINY);
    w.pretrain("out");
    assert!(w.path("out/teacher.ckpt").is_file());
    let report = w.read("out/teacher.report");
    assert_eq!(value(&report, "tag"), "Teacher");
    assert_eq!(value(&report, "dataset"), "source");
    let acc: f64 = value(&report, "accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn unknown_key_is_a_config_error_naming_key_and_line() {
    let w = Workspace::new("[distill]\nalpha = 0.99\ntaus=0.07\n");
    let err = fails(&["pretrain", "--config", &w.s("run.cfg"), "--out", &w.s("out")], 2);
    assert!(err.contains("taus") && err.contains("line 3"), "{err}");
    assert!(!w.path("out/teacher.ckpt").exists());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let w = Workspace::new(TINY);
    w.pretrain("a");
    w.pretrain("b");
    assert_eq!(w.read("a/teacher.report"), w.read("b/teacher.report"));
    assert_eq!(
        std::fs::read(w.path("a/teacher.ckpt")).unwrap(),
        std::fs::read(w.path("b/teacher.ckpt")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_run() {
    let w = Workspace::new(TINY);
    ok(&[
        "pretrain",
        "--config",
        &w.s("run.cfg"),
        "--seed",
        "1",
        "--out",
        &w.s("a"),
    ]);
    ok(&[
        "pretrain",
        "--config",
        &w.s("run.cfg"),
        "--seed",
        "2",
        "--out",
        &w.s("b"),
    ]);
    assert_ne!(
        std::fs::read(w.path("a/teacher.ckpt")).unwrap(),
        std::fs::read(w.path("b/teacher.ckpt")).unwrap()
    );
    assert!(w.read("b/teacher.report").contains("# seed = 2\n"));
}

#[test]
fn finetune_tags_and_config_echo() {
    let w = Workspace::new(TINY);
    w.pretrain("out");
    let cfg = w.s("run.cfg");
    let out = w.s("out");
    ok(&["finetune", "--config", &cfg, "--out", &out]);
    ok(&[
        "finetune",
        "--config",
        &cfg,
        "--out",
        &out,
        "--init",
        &w.s("out/teacher.ckpt"),
    ]);
    let none = w.read("out/ft_none.report");
    let teacher = w.read("out/ft_teacher.report");
    assert_eq!(value(&none, "tag"), "FT_None");
    assert_eq!(value(&teacher, "tag"), "FT_Teacher");
    let parsed = moma::config_file::parse(TINY, "tiny").unwrap();
    let echo = moma::config_file::render_commented(&parsed);
    for report in [&none, &teacher] {
        assert!(report.starts_with(&format!("# moma {}\n{echo}", env!("CARGO_PKG_VERSION"))));
    }
}

#[test]
fn distill_loss_csv_and_gamma_override() {
    let w = Workspace::new(TINY);
    w.pretrain("out");
    let cfg = w.s("run.cfg");
    let teacher = w.s("out/teacher.ckpt");
    ok(&[
        "distill",
        "--config",
        &cfg,
        "--out",
        &w.s("auto"),
        "--teacher",
        &teacher,
    ]);
    ok(&[
        "distill",
        "--config",
        &cfg,
        "--out",
        &w.s("off"),
        "--teacher",
        &teacher,
        "--gamma",
        "0",
    ]);
    for (dir, gamma) in [("auto", "1"), ("off", "0")] {
        let csv = w.read(&format!("{dir}/moma.loss.csv"));
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], "step,ce,nce,kl,gamma,total");
        for (i, row) in rows[1..].iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells[0], i.to_string());
            assert_eq!(cells[4], gamma);
            let f = |k: usize| cells[k].parse::<f64>().unwrap();
            let g: f64 = gamma.parse().unwrap();
            assert!((f(5) - (f(1) + f(2) + g * f(3))).abs() <= 1e-12, "{row}");
        }
    }
    assert_eq!(value(&w.read("auto/moma.report"), "tag"), "MoMA");
    fails(&["distill", "--config", &cfg, "--teacher", &teacher, "--gamma", "2"], 2);
}

#[test]
fn distill_rejects_incompatible_teacher() {
    let w = Workspace::new(TINY);
    w.pretrain("out");
    let wide = TINY.replace("hidden = 16", "hidden = 12");
    std::fs::write(w.path("wide.cfg"), wide).unwrap();
    let err = fails(
        &[
            "distill",
            "--config",
            &w.s("wide.cfg"),
            "--out",
            &w.s("x"),
            "--teacher",
            &w.s("out/teacher.ckpt"),
        ],
        3,
    );
    assert!(err.contains("teacher.ckpt"), "{err}");
    // A baseline checkpoint is not a teacher.
    ok(&["finetune", "--config", &w.s("run.cfg"), "--out", &w.s("out")]);
    fails(
        &[
            "distill",
            "--config",
            &w.s("run.cfg"),
            "--out",
            &w.s("x"),
            "--teacher",
            &w.s("out/ft_none.ckpt"),
        ],
        3,
    );
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let w = Workspace::new(TINY);
    w.pretrain("out");
    let bytes = std::fs::read(w.path("out/teacher.ckpt")).unwrap();
    std::fs::write(w.path("cut.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let err = fails(&["eval", "--checkpoint", &w.s("cut.ckpt"), "--out", &w.s("e")], 3);
    assert!(err.contains("cut.ckpt") && err.contains("truncated"), "{err}");
    std::fs::write(w.path("junk.ckpt"), b"not a checkpoint").unwrap();
    fails(&["eval", "--checkpoint", &w.s("junk.ckpt"), "--out", &w.s("e")], 3);
    fails(&["eval", "--checkpoint", &w.s("missing.ckpt"), "--out", &w.s("e")], 1);
}

#[test]
fn eval_is_repeatable_and_exports_embeddings() {
    let w = Workspace::new(TINY);
    w.pretrain("out");
    let ckpt = w.s("out/teacher.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    ok(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--out",
        &w.s("e1"),
        "--export-embeddings",
        "--export-dataset",
    ]);
    ok(&["eval", "--checkpoint", &ckpt, "--out", &w.s("e2")]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), before, "eval must not touch its input");
    let r1 = w.read("e1/teacher.source.test.report");
    assert_eq!(r1, w.read("e2/teacher.source.test.report"));
    assert_eq!(r1, w.read("out/teacher.report"));

    let emb = w.read("e1/teacher.source.test.embeddings.csv");
    let rows: Vec<&str> = emb.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "model,split,label,dim0,dim1,dim2,dim3,dim4,dim5,dim6,dim7");
    // Four source classes with 50 test samples each.
    assert_eq!(rows.len() - 1, 200);
    assert!(rows[1..]
        .iter()
        .all(|r| r.starts_with("Teacher,test,") && r.split(',').count() == 11));

    let data = w.read("e1/teacher.source.test.data.csv");
    let rows: Vec<&str> = data.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "x0,x1,x2,x3,x4,x5,x6,x7,label,group,split");
    assert_eq!(rows.len() - 1, 200);
}

#[test]
fn eval_train_split_is_at_least_as_accurate_as_test() {
    let w = Workspace::new(TINY);
    let (mut train, mut test) = (0.0, 0.0);
    for seed in ["0", "1", "2"] {
        let out = w.s(&format!("s{seed}"));
        ok(&["pretrain", "--config", &w.s("run.cfg"), "--seed", seed, "--out", &out]);
        ok(&["finetune", "--config", &w.s("run.cfg"), "--seed", seed, "--out", &out]);
        let ckpt = format!("{out}/ft_none.ckpt");
        for (split, acc) in [("train", &mut train), ("test", &mut test)] {
            ok(&["eval", "--checkpoint", &ckpt, "--split", split, "--out", &out]);
            let r = std::fs::read_to_string(format!("{out}/ft_none.target.{split}.report")).unwrap();
            *acc += value(&r, "accuracy").parse::<f64>().unwrap();
        }
    }
    assert!(train >= test, "train {train} < test {test}");
}

#[test]
fn eval_rejects_class_mismatch() {
    let w = Workspace::new(&TINY.replace(
        "regime = same",
        "regime = relevant\nsource_classes = 4\ntarget_classes = 3",
    ));
    w.pretrain("out");
    let err = fails(
        &[
            "eval",
            "--checkpoint",
            &w.s("out/teacher.ckpt"),
            "--dataset",
            "target",
            "--out",
            &w.s("e"),
        ],
        3,
    );
    assert!(err.contains("classes"), "{err}");
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let table = ok(&["gradcheck", "--seeds", "3"]);
    for block in [
        "student.enc",
        "student.proj",
        "student.attn",
        "student.cls",
        "teacher.enc",
        "teacher.proj",
        "teacher.attn",
        "teacher.cls",
    ] {
        assert_eq!(table.matches(&format!("{block} ")).count(), 1, "{block}\n{table}");
    }
    let out = moma(&["gradcheck", "--seeds", "2", "--corrupt-block", "teacher.attn"]);
    assert_eq!(out.status.code(), Some(4));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout
            .lines()
            .any(|l| l.starts_with("teacher.attn") && l.ends_with("FAIL")),
        "{stdout}"
    );
}

#[test]
fn gradcheck_refuses_wide_configs() {
    let w = Workspace::new("[model]\nembed_dim = 16\n");
    fails(&["gradcheck", "--config", &w.s("run.cfg"), "--seeds", "1"], 2);
}

#[test]
fn compare_tables_and_missing_reports() {
    let w = Workspace::new(TINY);
    let mut reports = Vec::new();
    for seed in ["0", "1", "2"] {
        let out = w.s(&format!("s{seed}"));
        ok(&["pretrain", "--config", &w.s("run.cfg"), "--seed", seed, "--out", &out]);
        reports.push(format!("{out}/teacher.report"));
    }
    let mut args = vec!["compare", "--out", w.dir.path().to_str().unwrap()];
    args.extend(reports.iter().map(String::as_str));
    let text = ok(&args);
    assert!(text.lines().next().unwrap().contains("ACC"));
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    let csv = w.read("compare.csv");
    let mean = csv
        .lines()
        .find(|l| l.starts_with("mean,Teacher,3,"))
        .expect("mean row");
    let accs: Vec<f64> = reports
        .iter()
        .map(|p| value(&std::fs::read_to_string(p).unwrap(), "accuracy").parse().unwrap())
        .collect();
    let m = accs.iter().sum::<f64>() / 3.0;
    let cell: f64 = mean.split(',').nth(3).unwrap().parse().unwrap();
    assert!((cell - m).abs() < 1e-12);

    let missing = w.s("nowhere/teacher.report");
    let err = fails(&["compare", &reports[0], &missing], 1);
    assert!(err.contains(&missing), "{err}");
    assert!(!moma(&["compare", &reports[0]]).status.success());
}

#[test]
fn help_lists_every_verb() {
    let help = ok(&["--help"]);
    for verb in ["pretrain", "distill", "finetune", "eval", "gradcheck", "compare"] {
        assert!(help.contains(verb), "{verb}");
    }
    assert!(!Path::new(env!("CARGO_BIN_EXE_moma")).as_os_str().is_empty());
}

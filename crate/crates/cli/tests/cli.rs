use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use arcgem::numerics::Tensor;
use arcgem::retrieval::DescriptorSet;

const TINY: [&str; 10] = [
    "--set",
    "dataset.classes=3",
    "--set",
    "dataset.train_per_class=3",
    "--set",
    "dataset.distractor_classes=1",
    "--set",
    "train.epochs=1,1",
    "--set",
    "fix.epochs=1",
];

fn arcgem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arcgem")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_documents_its_flags() {
    let flags: [(&str, &[&str]); 7] = [
        ("gen-data", &["--run-dir", "--config", "--set"]),
        ("train", &["--run-dir", "--config", "--set"]),
        ("extract", &["--checkpoint", "--split", "--resolution", "--out", "--tag", "--config"]),
        ("ensemble", &["--a", "--b", "--out"]),
        ("search", &["--queries", "--index", "--k", "--out"]),
        ("eval", &["--results", "--ground-truth", "--k", "--out"]),
        ("report", &["--run-dir", "--config", "--set"]),
    ];
    for (cmd, expected) in flags {
        let o = arcgem(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd} --help");
        let text = stdout(&o);
        for f in expected {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert_eq!(code(&arcgem(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&arcgem(&["frobnicate"])), 1);
    assert_eq!(code(&arcgem(&["search", "--queries", "x"])), 1);
    let o = arcgem(&["gen-data", "--run-dir", s(dir.path()), "--set", "head.colour=blue"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("head.colour"));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "# fine\narcmargin.scale=thirty\n").unwrap();
    let o = arcgem(&["gen-data", "--run-dir", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("arcmargin.scale") && err.contains("line 2"), "{err}");
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&arcgem(&["train", "--run-dir", s(dir.path())])), 2);
    let missing = dir.path().join("none.dsc1");
    let o = arcgem(&["search", "--queries", s(&missing), "--index", s(&missing), "--out", "x.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut args = vec!["gen-data", "--run-dir", s(d.path())];
        args.extend(TINY);
        assert_eq!(code(&arcgem(&args)), 0);
    }
    for f in ["manifest.csv", "ground_truth.csv", "config.resolved"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_on_perfect_descriptors_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let unit = |labels: &[usize]| -> Tensor<f32> {
        Tensor::from_fn(&[labels.len(), 3], |i| if i % 3 == labels[i / 3] { 1.0 } else { 0.0 })
    };
    let ids = |pre: &str, n: usize| (0..n).map(|i| format!("{pre}{i}")).collect::<Vec<_>>();
    let index_labels = [0, 0, 1, 1, 2];
    let query_labels = [0, 1, 2];
    DescriptorSet::new(ids("i", 5), unit(&index_labels), true, "perfect").unwrap().save(p("index.dsc1")).unwrap();
    DescriptorSet::new(ids("q", 3), unit(&query_labels), true, "perfect").unwrap().save(p("query.dsc1")).unwrap();
    fs::write(p("gt.csv"), "query_id,relevant_ids\nq0,i0 i1\nq1,i2 i3\nq2,i4\n").unwrap();

    let o = arcgem(&["search", "--queries", s(&p("query.dsc1")), "--index", s(&p("index.dsc1")), "--out", s(&p("r.csv"))]);
    assert_eq!(code(&o), 0);
    let o = arcgem(&["eval", "--results", s(&p("r.csv")), "--ground-truth", s(&p("gt.csv")), "--out", s(&p("ap.csv"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "mAP@100=1");
    assert!(fs::read_to_string(p("ap.csv")).unwrap().starts_with("query_id,ap,relevant_count\n"));
}

#[test]
fn pipeline_end_to_end_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = s(dir.path());
    let p = |f: &str| dir.path().join(f);
    let mut args = vec!["gen-data", "--run-dir", run];
    args.extend(TINY);
    assert_eq!(code(&arcgem(&args)), 0);
    assert_eq!(code(&arcgem(&["train", "--run-dir", run])), 0);
    for f in ["recipe_a/checkpoint_0.agrc", "recipe_a/checkpoint_2.agrc", "recipe_b/stage_1.csv", "baseline.agrc"] {
        assert!(p(f).exists(), "{f}");
    }
    let ck = p("recipe_b/checkpoint_1.agrc");
    for split in ["index", "query"] {
        let out = p(&format!("{split}.dsc1"));
        let o = arcgem(&["extract", "--run-dir", run, "--checkpoint", s(&ck), "--split", split, "--resolution", "64", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = arcgem(&["ensemble", "--a", s(&p("query.dsc1")), "--b", s(&p("query.dsc1")), "--out", s(&p("q2.dsc1"))]);
    assert_eq!(code(&o), 0);
    // Different row sets cannot be ensembled.
    let o = arcgem(&["ensemble", "--a", s(&p("query.dsc1")), "--b", s(&p("index.dsc1")), "--out", s(&p("bad.dsc1"))]);
    assert_eq!(code(&o), 2);
    let o = arcgem(&["search", "--queries", s(&p("query.dsc1")), "--index", s(&p("index.dsc1")), "--out", s(&p("r.csv"))]);
    assert_eq!(code(&o), 0);
    let o = arcgem(&["eval", "--results", s(&p("r.csv")), "--ground-truth", s(&p("ground_truth.csv"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("mAP@100="));
    let o = arcgem(&["report", "--run-dir", run]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = fs::read_to_string(p("report.md")).unwrap();
    for row in ["untrained", "a stage 1 (64)", "b fix (184)", "ensemble a+b", "| d |"] {
        assert!(md.contains(row), "report lacks {row}");
    }
    assert!(fs::read_to_string(p("report.csv")).unwrap().starts_with("model,64,128,184\n"));
    // Later commands reuse the run directory's resolved config.
    assert!(fs::read_to_string(p("config.resolved")).unwrap().contains("dataset.classes=3"));
}

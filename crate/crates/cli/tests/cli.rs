use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vbp_core::model::{count_macs, count_params, init_weights, load_model, prune_shape, save_model, InitKind, ModelSpec};
use vbp_core::prune::PruningPlan;
use vbp_core::table::Table;

fn vbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbp")).args(args).env_remove("VBP_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vbp(args);
    assert!(out.status.success(), "vbp {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vbp(args).status.code().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Work { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }
}

fn table(path: &str) -> Table {
    Table::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// gen-data, init and stats for the toy preset.
fn toy_setup(w: &Work) {
    ok(&["gen-data", "--out", &w.p("train.vbpd"), "--samples", "256", "--seed", "1", "--separation", "3"]);
    ok(&["gen-data", "--out", &w.p("val.vbpd"), "--samples", "128", "--seed", "2", "--separation", "3"]);
    ok(&["init", "--preset", "toy", "--seed", "3", "--out", &w.p("dense.vbpm")]);
    ok(&["stats", "--model", &w.p("dense.vbpm"), "--data", &w.p("train.vbpd"), "--out", &w.p("post.json")]);
}

#[test]
fn full_pipeline_report_matches_accounting() {
    let w = Work::new();
    toy_setup(&w);
    ok(&[
        "prune", "--model", &w.p("dense.vbpm"), "--stats", &w.p("post.json"), "--rate", "0.5",
        "--out", &w.p("pruned.vbpm"), "--plan", &w.p("plan.json"), "--record", &w.p("record.json"),
        "--summary", &w.p("summary.csv"),
    ]);
    ok(&["eval", "--model", &w.p("dense.vbpm"), "--data", &w.p("val.vbpd"), "--out", &w.p("dense.csv")]);
    ok(&["eval", "--model", &w.p("pruned.vbpm"), "--data", &w.p("val.vbpd"), "--out", &w.p("pruned.csv")]);
    ok(&[
        "finetune", "--model", &w.p("pruned.vbpm"), "--data", &w.p("train.vbpd"), "--val", &w.p("val.vbpd"),
        "--teacher", &w.p("dense.vbpm"), "--plan", &w.p("plan.json"), "--epochs", "10",
        "--out", &w.p("tuned.vbpm"), "--log", &w.p("log.csv"),
    ]);
    let log = table(&w.p("log.csv"));
    assert_eq!(log.rows.len(), 10);
    let report = ok(&[
        "report", "--eval", &w.p("dense.csv"), "--eval", &w.p("pruned.csv"), "--log", &format!("pruned={}", w.p("log.csv")),
    ]);
    let report = Table::parse(&report).unwrap();
    assert_eq!(report.header, ["model", "macs", "params", "top1", "retention", "final"]);

    let (dense, _, _) = load_model(w.p("dense.vbpm")).unwrap();
    let (plan, _) = PruningPlan::load(w.p("plan.json")).unwrap();
    let pruned = prune_shape(&dense, &plan).unwrap();
    assert_eq!(report.rows[0][1], count_macs(&dense).to_string());
    assert_eq!(report.rows[0][2], count_params(&dense).to_string());
    assert_eq!(report.rows[1][1], count_macs(&pruned).to_string());
    assert_eq!(report.rows[1][2], count_params(&pruned).to_string());
    assert_eq!(report.rows[0][4], "1.000000");
    assert!(!report.rows[1][5].is_empty());
    assert_eq!(load_model(w.p("tuned.vbpm")).unwrap().0, pruned);

    let summary = table(&w.p("summary.csv"));
    let total: usize = summary.rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 128);
}

#[test]
fn lower_rate_plan_is_nested_in_higher() {
    let w = Work::new();
    toy_setup(&w);
    for rate in ["0.2", "0.5"] {
        ok(&[
            "prune", "--model", &w.p("dense.vbpm"), "--stats", &w.p("post.json"), "--rate", rate,
            "--out", &w.p(&format!("m{rate}.vbpm")), "--plan", &w.p(&format!("p{rate}.json")),
        ]);
    }
    let (small, _) = PruningPlan::load(w.p("p0.2.json")).unwrap();
    let (large, _) = PruningPlan::load(w.p("p0.5.json")).unwrap();
    assert_eq!((small.total_pruned(), large.total_pruned()), (51, 128));
    for (s, l) in small.layers.iter().zip(&large.layers) {
        assert!(s.pruned.iter().all(|i| l.pruned.contains(i)));
    }
}

#[test]
fn broken_fingerprint_chain_exits_3() {
    let w = Work::new();
    toy_setup(&w);
    ok(&["init", "--preset", "toy", "--seed", "4", "--out", &w.p("other.vbpm")]);
    let prune_other = [
        "prune", "--model", &w.p("other.vbpm"), "--stats", &w.p("post.json"), "--out", &w.p("x.vbpm"),
    ];
    let out = vbp(&prune_other);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    let (_, _, dense_fp) = load_model(w.p("dense.vbpm")).unwrap();
    let (_, _, other_fp) = load_model(w.p("other.vbpm")).unwrap();
    assert!(err.contains(&dense_fp) && err.contains(&other_fp), "{err}");
    assert!(!Path::new(&w.p("x.vbpm")).exists());

    ok(&["prune", "--model", &w.p("dense.vbpm"), "--stats", &w.p("post.json"), "--out", &w.p("p.vbpm"), "--plan", &w.p("plan.json")]);
    assert_eq!(
        code(&["prune", "--model", &w.p("other.vbpm"), "--apply", &w.p("plan.json"), "--mode", "no-shift", "--out", &w.p("x.vbpm")]),
        3
    );
    ok(&["stats", "--model", &w.p("dense.vbpm"), "--data", &w.p("val.vbpd"), "--out", &w.p("post_val.json")]);
    assert_eq!(
        code(&["prune", "--model", &w.p("dense.vbpm"), "--apply", &w.p("plan.json"), "--stats", &w.p("post_val.json"), "--out", &w.p("x.vbpm")]),
        3
    );
    assert_eq!(
        code(&[
            "finetune", "--model", &w.p("p.vbpm"), "--data", &w.p("train.vbpd"), "--teacher", &w.p("other.vbpm"),
            "--plan", &w.p("plan.json"), "--epochs", "1", "--out", &w.p("x.vbpm"),
        ]),
        3
    );
}

#[test]
fn exit_codes_by_error_class() {
    let w = Work::new();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["init", "--preset", "toy", "--blocks", "3", "--out", &w.p("m.vbpm")]), 1);
    assert_eq!(code(&["init", "--blocks", "3", "--out", &w.p("m.vbpm")]), 1);
    assert_eq!(code(&["gen-data", "--out", &w.p("d.vbpd"), "--samples", "0"]), 1);

    std::fs::write(w.p("junk.vbpm"), b"not a model at all").unwrap();
    ok(&["gen-data", "--out", &w.p("d.vbpd"), "--samples", "16"]);
    assert_eq!(code(&["eval", "--model", &w.p("junk.vbpm"), "--data", &w.p("d.vbpd")]), 2);
    assert_eq!(code(&["eval", "--model", &w.p("missing.vbpm"), "--data", &w.p("d.vbpd")]), 2);

    ok(&["init", "--preset", "toy", "--out", &w.p("toy.vbpm")]);
    ok(&["stats", "--model", &w.p("toy.vbpm"), "--data", &w.p("d.vbpd"), "--out", &w.p("s.json")]);
    assert_eq!(code(&["prune", "--model", &w.p("toy.vbpm"), "--stats", &w.p("s.json"), "--rate", "1.5", "--out", &w.p("x.vbpm")]), 1);

    let spec = ModelSpec::toy();
    let mut weights = init_weights(&spec, InitKind::default(), 0).unwrap();
    weights.get_mut("head.w").unwrap().data_mut()[0] = f32::NAN;
    save_model(&spec, &weights, w.p("nan.vbpm")).unwrap();
    assert_eq!(code(&["eval", "--model", &w.p("nan.vbpm"), "--data", &w.p("d.vbpd")]), 4);

    let out = Command::new(env!("CARGO_BIN_EXE_vbp"))
        .args(["stats", "--model", &w.p("toy.vbpm"), "--data", &w.p("d.vbpd"), "--out", &w.p("t.json")])
        .env("VBP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let run = |w: &Work| {
        toy_setup(w);
        ok(&["prune", "--model", &w.p("dense.vbpm"), "--stats", &w.p("post.json"), "--out", &w.p("p.vbpm"), "--plan", &w.p("plan.json")]);
        ok(&["prune", "--model", &w.p("dense.vbpm"), "--criterion", "random", "--seed", "9", "--stats", &w.p("post.json"), "--out", &w.p("r.vbpm")]);
        ["train.vbpd", "dense.vbpm", "post.json", "p.vbpm", "plan.json", "r.vbpm"]
            .map(|f| std::fs::read(w.p(f)).unwrap())
    };
    let (a, b) = (Work::new(), Work::new());
    assert_eq!(run(&a), run(&b));
}

#[test]
fn tsv_format_and_exports() {
    let w = Work::new();
    toy_setup(&w);
    let out = ok(&["eval", "--model", &w.p("dense.vbpm"), "--data", &w.p("val.vbpd"), "--format", "tsv"]);
    assert!(out.starts_with("model\tfingerprint\tsamples\tmacs\tparams\ttop1\tloss\n"));
    ok(&[
        "stats", "--model", &w.p("dense.vbpm"), "--data", &w.p("val.vbpd"), "--out", &w.p("s.json"),
        "--distribution", &w.p("dist.csv"), "--histograms", &w.p("hist.csv"), "--layer", "1", "--neurons", "0,5", "--bins", "8",
    ]);
    assert_eq!(table(&w.p("dist.csv")).rows.len(), 256);
    assert_eq!(table(&w.p("hist.csv")).rows.len(), 2 * 2 * 8);
    let sweep = ok(&["sweep", "--model", &w.p("dense.vbpm"), "--stats", &w.p("post.json"), "--data", &w.p("val.vbpd"), "--rates", "0.25,0.5"]);
    let sweep = Table::parse(&sweep).unwrap();
    assert_eq!(sweep.header, ["rate", "macs", "params", "retention", "final"]);
    assert_eq!(sweep.rows.len(), 2);
}

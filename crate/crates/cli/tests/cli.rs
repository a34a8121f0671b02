use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SAMPLE: &str = "\
func sample
block 0 line=s.c:3
  mov r:rdi, , r:rbx
  cfadd r:rbx, #1, e:cf
  add r:rbx, #8, g:total
  jz r:rbx, #0
block 1 line=s.c:5
  call fn:free(g:total)
block 2 line=s.c:7
  ret
edge 0 -> 1 cond
edge 0 -> 2 uncond
edge 1 -> 2 uncond
endfunc
";

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_slicegraph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "slicegraph {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(args: &[&str]) -> String {
    String::from_utf8(run(args).stdout).unwrap()
}

fn write_sample(dir: &Path) -> PathBuf {
    let p = dir.join("sample.sir");
    std::fs::write(&p, SAMPLE).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parse_slice_and_graph() {
    let dir = tempfile::tempdir().unwrap();
    let sir = write_sample(dir.path());

    let summary: serde_json::Value = serde_json::from_str(stdout(&["parse", s(&sir)]).trim()).unwrap();
    assert_eq!(summary["blocks"], 3);
    assert_eq!(summary["instructions"], 6);
    assert!(summary["valid"].is_null());
    assert_eq!(stdout(&["parse", "--print", s(&sir)]).matches("block").count(), 3);

    // the dead carry flag is pruned before slicing
    let rows: Vec<serde_json::Value> =
        stdout(&["slice", s(&sir)]).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| !r["text"].as_str().unwrap().contains("cfadd")));
    let unpruned = stdout(&["slice", "--no-prune", s(&sir)]);
    assert!(unpruned.contains("cfadd"));

    let graph: serde_json::Value = serde_json::from_str(stdout(&["graph", s(&sir)]).trim()).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 4);
    assert!(stdout(&["graph", "--dot", s(&sir)]).starts_with("digraph"));
    let flat: serde_json::Value = serde_json::from_str(stdout(&["graph", "--no-slicing", s(&sir)]).trim()).unwrap();
    assert_eq!(flat["nodes"].as_array().unwrap().len(), 3);
}

#[test]
fn malformed_input_fails_with_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.sir");
    std::fs::write(&p, "func f\nblock 0\n  mov q:zz, , r:rax\nendfunc\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slicegraph")).args(["slice", s(&p)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains('3'));
}

#[test]
fn tiny_training_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    run(&["gen-corpus", "--functions", "12", "--variants", "2", "--seed", "3", "--out", s(&corpus)]);
    let manifest = corpus.join("manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 24);

    let (pre, enc, gmn) = (d.join("pre.ck"), d.join("enc.ck"), d.join("gmn.ck"));
    let pairs = d.join("pairs.jsonl");
    run(&[
        "pretrain", "--manifest", s(&manifest), "--out", s(&pre), "--dim", "16", "--layers", "1", "--heads", "2",
        "--epochs", "1", "--min-count", "1",
    ]);
    run(&[
        "finetune", "--encoder", s(&pre), "--manifest", s(&manifest), "--out", s(&enc), "--epochs", "1",
        "--pairs-out", s(&pairs),
    ]);
    assert!(std::fs::read_to_string(&pairs).unwrap().lines().count() > 0);
    run(&[
        "train-gmn", "--encoder", s(&enc), "--manifest", s(&manifest), "--out", s(&gmn), "--epochs", "2",
        "--rounds", "2", "--hidden", "8",
    ]);

    let cache = d.join("cache");
    let models = ["--encoder", s(&enc), "--gmn", s(&gmn), "--cache", s(&cache)];
    let prefix = d.join("xo");
    let mut args = vec!["eval", "--task", "XO", "--poolsize", "5", "--queries", "4", "--manifest", s(&manifest), "--out", s(&prefix)];
    args.extend(models);
    let summary: serde_json::Value = serde_json::from_str(stdout(&args).trim()).unwrap();
    assert_eq!(summary["queries"], 4);
    let r1 = summary["recall@1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1), "{summary}");
    let ranks = std::fs::read_to_string(d.join("xo.ranks.csv")).unwrap();
    assert_eq!(ranks.lines().count(), 5);
    assert!(std::fs::read_to_string(d.join("xo.recall.csv")).unwrap().lines().count() > 1);
    assert!(std::fs::read_dir(cache.join("graphs")).unwrap().count() > 0);

    let baseline: serde_json::Value = serde_json::from_str(
        stdout(&["eval", "--task", "XO", "--poolsize", "5", "--queries", "4", "--manifest", s(&manifest), "--baseline"])
            .trim(),
    )
    .unwrap();
    assert!(baseline.is_object());

    let sirs: Vec<PathBuf> = {
        let mut v: Vec<PathBuf> = std::fs::read_dir(corpus.join("sir")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    let mut score_args = vec!["score", s(&sirs[0]), s(&sirs[0])];
    score_args.extend(models);
    let same: serde_json::Value = serde_json::from_str(stdout(&score_args).trim()).unwrap();
    assert_eq!(same["distance"].as_f64(), Some(0.0));

    let mut search_args = vec!["search", "--query", s(&sirs[0]), "--pool", s(&manifest), "--k", "3"];
    search_args.extend(models);
    let hits = stdout(&search_args);
    let lines: Vec<&str> = hits.lines().collect();
    assert_eq!(lines.len(), 4, "{hits}");
    assert!(lines[1].starts_with("1,"));

    let att = d.join("att");
    let mut att_args = vec!["export-attention", s(&sirs[0]), s(&sirs[1]), "--out", s(&att)];
    att_args.extend(models);
    run(&att_args);
    let export: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("att.json")).unwrap()).unwrap();
    assert_eq!(export["rounds"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(d.join("att.dot")).unwrap().starts_with("digraph"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hetpre(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetpre"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn hetpre")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

/// Small planted dataset so the end-to-end tests stay fast.
fn small_synth(dir: &Path, name: &str) {
    ok(hetpre(
        &["synth", "--seed", "3", "--out", name, "--types", "P:40,A:60,S:20", "--blocks", "2", "--p-in", "0.3", "--feature-dim", "4"],
        dir,
    ));
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(hetpre(&["synth", "--seed", "7", "--out", "a"], tmp.path()));
    ok(hetpre(&["synth", "--seed", "7", "--out", "b"], tmp.path()));
    let (a, b) = (dir_files(&tmp.path().join("a")), dir_files(&tmp.path().join("b")));
    assert!(a.len() >= 10);
    assert_eq!(a, b);
    ok(hetpre(&["synth", "--seed", "8", "--out", "c"], tmp.path()));
    assert_ne!(a, dir_files(&tmp.path().join("c")));
}

fn write_acm_shaped(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("schema.toml"),
        "types = [{ name = \"P\", count = 4025 }, { name = \"A\", count = 7167 }, { name = \"S\", count = 60 }]\n\
         relations = [\n  { name = \"PA\", source = \"P\", target = \"A\" },\n  { name = \"AP\", source = \"A\", target = \"P\" },\n  \
         { name = \"PS\", source = \"P\", target = \"S\" },\n  { name = \"SP\", source = \"S\", target = \"P\" },\n]\n",
    )
    .unwrap();
    let (mut pa, mut ap, mut ps, mut sp) = (String::new(), String::new(), String::new(), String::new());
    for p in 0..4025 {
        let a = (p * 7) % 7167;
        let s = p % 60;
        pa.push_str(&format!("{p}\t{a}\n"));
        ap.push_str(&format!("{a}\t{p}\n"));
        ps.push_str(&format!("{p}\t{s}\n"));
        sp.push_str(&format!("{s}\t{p}\n"));
    }
    for (name, text) in [("PA", pa), ("AP", ap), ("PS", ps), ("SP", sp)] {
        fs::write(dir.join(format!("{name}.edges")), text).unwrap();
    }
    for (name, n) in [("P", 4025), ("A", 7167), ("S", 60)] {
        let rows: String = (0..n).map(|i| format!("{} {}\n", i % 3, i % 5)).collect();
        fs::write(dir.join(format!("{name}.features")), rows).unwrap();
    }
}

#[test]
fn ingest_prints_type_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    write_acm_shaped(&tmp.path().join("acm"));
    let o = ok(hetpre(&["ingest", "acm", "--out", "acm.bin"], tmp.path()));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "types\tP (4025), A (7167), S (60)"), "{out}");
    assert!(tmp.path().join("acm.bin").exists());
}

#[test]
fn missing_feature_row_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), "ds");
    let path = tmp.path().join("ds/S.features");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(19).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    let o = hetpre(&["ingest", "ds", "--out", "ds.bin"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("S.features:20:"), "{err}");
    assert!(err.contains("error[format]"), "{err}");
}

#[test]
fn empty_relation_file_is_accepted_with_warning() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), "ds");
    fs::write(tmp.path().join("ds/PS.edges"), "").unwrap();
    let o = ok(hetpre(&["ingest", "ds", "--out", "ds.bin"], tmp.path()));
    let err = stderr(&o);
    assert!(err.contains("warning") && err.contains("PS"), "{err}");
    assert!(stdout(&o).contains("PS (0)"));
}

#[test]
fn pretrain_then_classify_prints_a_two_by_three_table() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), "ds");
    ok(hetpre(&["ingest", "ds", "--out", "ds.bin"], tmp.path()));
    ok(hetpre(
        &["pretrain", "ds.bin", "--out", "run", "--warmup-epochs", "5", "--max-epochs", "10", "--hidden-dim", "16"],
        tmp.path(),
    ));
    for f in ["checkpoint.bin", "embeddings.bin", "embeddings.tsv", "report.jsonl", "pseudo.labels", "config.resolved.toml"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
    let resolved = fs::read_to_string(tmp.path().join("run/config.resolved.toml")).unwrap();
    assert!(resolved.contains("max_epochs = 10"));
    assert!(resolved.contains("hidden_dim = 16"));

    let o = ok(hetpre(
        &["eval", "--embeddings", "run", "--labels", "ds.bin", "--task", "classify", "--fractions", "4,6,8", "--seeds", "3"],
        tmp.path(),
    ));
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3, "{out}");
    assert_eq!(rows[0], ["fraction", "4%", "6%", "8%"]);
    assert_eq!(rows[1][0], "Mic-F1");
    assert_eq!(rows[2][0], "Mac-F1");
    for r in &rows[1..] {
        assert_eq!(r.len(), 4);
        for v in &r[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=100.0).contains(&v));
        }
    }

    let o = ok(hetpre(&["eval", "--embeddings", "run/embeddings.bin", "--labels", "ds", "--task", "cluster", "--seeds", "2"], tmp.path()));
    let keys: Vec<String> = stdout(&o).lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    assert_eq!(keys, ["NMI", "ARI"]);

    ok(hetpre(&["export", "--checkpoint", "run/checkpoint.bin", "--dataset", "ds.bin", "--out", "again.bin"], tmp.path()));
    assert_eq!(fs::read(tmp.path().join("again.bin")).unwrap(), fs::read(tmp.path().join("run/embeddings.bin")).unwrap());
}

#[test]
fn eval_rejects_mismatched_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), "ds");
    ok(hetpre(&["pretrain", "ds", "--out", "run", "--warmup-epochs", "1", "--max-epochs", "1", "--hidden-dim", "4"], tmp.path()));
    ok(hetpre(&["synth", "--seed", "3", "--out", "bigger", "--types", "P:50,A:60,S:20", "--blocks", "2"], tmp.path()));
    let o = hetpre(&["eval", "--embeddings", "run", "--labels", "bigger", "--task", "cluster"], tmp.path());
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("error[size-mismatch]"));

    fs::write(tmp.path().join("far.labels"), "0\t0\n500\t1\n").unwrap();
    let o = hetpre(&["eval", "--embeddings", "run", "--labels", "far.labels"], tmp.path());
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), "ds");
    let args = |out: &'static str| ["pretrain", "ds", "--out", out, "--warmup-epochs", "3", "--max-epochs", "5", "--hidden-dim", "8"];
    let one = Command::new(env!("CARGO_BIN_EXE_hetpre"))
        .args(args("one"))
        .env("HETPRE_THREADS", "1")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    ok(one);
    ok(hetpre(&args("many"), tmp.path()));
    for f in ["embeddings.bin", "pseudo.labels", "checkpoint.bin"] {
        assert_eq!(fs::read(tmp.path().join("one").join(f)).unwrap(), fs::read(tmp.path().join("many").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_is_read_and_unknown_keys_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    small_synth(tmp.path(), "ds");
    fs::write(tmp.path().join("good.toml"), "warmup_epochs = 2\nmax_epochs = 3\nhidden_dim = 4\nseed = 11\n").unwrap();
    ok(hetpre(&["pretrain", "ds", "--config", "good.toml", "--seed", "12", "--out", "run"], tmp.path()));
    let resolved = fs::read_to_string(tmp.path().join("run/config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 12") && resolved.contains("warmup_epochs = 2"));
    let report = fs::read_to_string(tmp.path().join("run/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2 + 3 + 1);

    fs::write(tmp.path().join("bad.toml"), "warmup = 2\n").unwrap();
    let o = hetpre(&["pretrain", "ds", "--config", "bad.toml", "--out", "run2"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("bad.toml:1"));
}

#[test]
fn help_lists_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 5] = [
        ("ingest", &["--out"]),
        ("synth", &["--seed", "--config", "--out", "--blocks", "--types", "--p-in", "--p-out", "--feature-dim", "--feature-noise", "--full-schema"]),
        ("pretrain", &["--config", "--out", "--seed", "--warmup-epochs", "--max-epochs", "--learning-rate", "--weight-decay", "--hidden-dim", "--num-layers", "--lpa-max-iters"]),
        ("eval", &["--embeddings", "--labels", "--task", "--fractions", "--seeds", "--seed", "--restarts"]),
        ("export", &["--checkpoint", "--dataset", "--out"]),
    ];
    for (cmd, flags) in cases {
        let help = stdout(&ok(hetpre(&[cmd, "--help"], tmp.path())));
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn bad_arguments_exit_nonzero_without_panicking() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hetpre(&["synth", "--out", "x", "--p-in", "0.01", "--p-out", "0.5"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[invalid-argument]"));
    let o = hetpre(&["pretrain", "nowhere", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(!stderr(&o).contains("panicked"));
}

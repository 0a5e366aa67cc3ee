use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxgeom(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxgeom"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path) {
    ok(&ctxgeom(&["synth", "--out", "syn", "--statements", "16", "--n-layers", "6", "--dim", "8", "--seed", "3"], dir));
}

#[test]
fn synth_then_theta_curve() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    for f in ["synthetic.tvd", "unembed.tvd", "spec.json"] {
        assert!(tmp.path().join("syn").join(f).exists(), "{f}");
    }
    ok(&ctxgeom(&["analyze", "theta", "--dump", "syn/synthetic.tvd", "--out", "out"], tmp.path()));
    let csv = fs::read_to_string(tmp.path().join("out/theta_relevant.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# ctxgeom "));
    assert!(lines.next().unwrap().starts_with("layer,"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn compare_and_lens_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let dump = ["--dump", "syn/synthetic.tvd"];
    ok(&ctxgeom(&[&["compare"][..], &dump, &["--out", "cmp", "--layers", "all", "--format", "both"]].concat(), tmp.path()));
    let labels = fs::read_to_string(tmp.path().join("cmp/compare_labels.csv")).unwrap();
    assert!(labels.lines().nth(1).unwrap().starts_with("dataset,layer,char,word,salad,wiki,shuffle"));
    assert_eq!(labels.lines().count(), 2 + 6);
    assert!(tmp.path().join("cmp/comparisons.json").exists());

    ok(&ctxgeom(&[&["lens"][..], &dump, &["--unembed", "syn/unembed.tvd", "--out", "lens"]].concat(), tmp.path()));
    assert!(tmp.path().join("lens/lens.csv").exists());
}

#[test]
fn probe_subset_of_families() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    ok(&ctxgeom(
        &["probe", "--dump", "syn/synthetic.tvd", "--out", "p", "--families", "mass_mean,logistic_regression"],
        tmp.path(),
    ));
    assert!(tmp.path().join("p/probe_mass_mean.csv").exists());
    assert!(tmp.path().join("p/probe_logistic_regression.csv").exists());
    assert!(!tmp.path().join("p/probe_mlp.csv").exists());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = ctxgeom(&["lens", "--dump", "syn/synthetic.tvd"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--unembed"));
    let out = ctxgeom(&["analyze", "theta", "--dump", "syn/synthetic.tvd", "--layers", "0-3"], tmp.path());
    assert!(!out.status.success());
    let out = ctxgeom(&["analyze", "theta", "--dump", "missing.tvd"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn contextgen_matches_lengths() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = [("a", "one two three"), ("b", "four five"), ("c", "six seven eight nine")];
    let jsonl: String = rows
        .iter()
        .map(|(id, ctx)| format!("{{\"statement_id\":\"{id}\",\"context\":\"{ctx}\"}}\n"))
        .collect();
    fs::write(tmp.path().join("ctx.jsonl"), jsonl).unwrap();
    fs::write(tmp.path().join("words.txt"), "alpha\nbeta\ngamma\ndelta\n").unwrap();
    for kind in ["char", "word", "shuffle"] {
        let out_name = format!("{kind}.jsonl");
        ok(&ctxgeom(
            &["contextgen", "--kind", kind, "--in", "ctx.jsonl", "--lexicon", "words.txt", "--seed", "5", "--out", &out_name],
            tmp.path(),
        ));
        let text = fs::read_to_string(tmp.path().join(&out_name)).unwrap();
        let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 3);
        for (r, (id, ctx)) in records.iter().zip(rows) {
            assert_eq!(r["statement_id"], id);
            assert_eq!(r["kind"], serde_json::to_value(kind_name(kind)).unwrap());
            if kind != "shuffle" {
                assert_eq!(r["word_count"], ctx.split_whitespace().count());
            } else {
                assert_ne!(r["context"], ctx);
            }
        }
    }
    let out = ctxgeom(&["contextgen", "--kind", "relevant", "--in", "ctx.jsonl", "--out", "x.jsonl"], tmp.path());
    assert!(!out.status.success());
}

fn kind_name(kind: &str) -> &'static str {
    match kind {
        "char" => "RandChar",
        "word" => "RandWord",
        _ => "RandShuffle",
    }
}

#[test]
fn prompts_from_statements() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("s.jsonl"),
        "{\"statement_id\":\"s1\",\"statement\":\"Paris is in France.\",\"choices\":[\"Yes\",\"No\"],\"ground_truth\":\"Yes\",\"context\":\"Paris is the capital of France.\"}\n",
    )
    .unwrap();
    ok(&ctxgeom(&["prompts", "--in", "s.jsonl", "--out", "q.jsonl", "--seed", "1"], tmp.path()));
    let text = fs::read_to_string(tmp.path().join("q.jsonl")).unwrap();
    let quad: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let prompts = quad["prompts"].as_array().unwrap();
    assert_eq!(prompts.len(), 4);
    assert_eq!(prompts[0]["truth_side"], "True");
    assert_eq!(prompts[1]["truth_side"], "False");
    assert!(prompts[2]["text"].as_str().unwrap().contains("capital of France"));
}

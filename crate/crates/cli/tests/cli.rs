mod common;

use std::path::Path;

use common::{fixtures, Server, Workspace};
use rsdcase_cli::manifest::RunManifest;
use rsdcase_core::casebase::{QueryFilter, SearchResult, Store};
use rsdcase_core::outcome::OutcomeLabel;
use rsdcase_core::synth::{synth_corpus, write_synth_corpus};
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = rsdcase_cli::run(std::iter::once("rsdcase").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn last_json_line(s: &str) -> Value {
    serde_json::from_str(s.lines().last().unwrap()).unwrap()
}

#[test]
fn unknown_flag_and_subcommand_are_usage_errors() {
    let (code, _, err) = run(&["search", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage:"), "{err}");
    assert_eq!(last_json_line(&err)["error"]["kind"], "usage");

    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage:"));

    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("pipeline") && out.contains("train-predictor"));
}

#[test]
fn invalid_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let good = std::fs::read_to_string(fixtures().join("mini.toml")).unwrap();
    let cases = [
        ("missing-seed.toml", good.replace("explain = 42\n", "")),
        ("section-seed.toml", good.replace("[outcome]\n", "[outcome]\nseed = 3\n")),
        ("unknown-key.toml", format!("{good}\n[bogus]\nx = 1\n")),
        ("bad-value.toml", good.replace("lime_samples = 300", "lime_samples = 0")),
        ("syntax.toml", "[paths\n".to_string()),
    ];
    for (name, text) in cases {
        let path = write(name, &text);
        let (code, _, err) = run(&["--config", path.to_str().unwrap(), "ingest"]);
        assert_eq!(code, 2, "{name}: {err}");
        assert_eq!(last_json_line(&err)["error"]["kind"], "config", "{name}");
    }
    let (code, _, _) = run(&["--config", "/no/such/config.toml", "ingest"]);
    assert_eq!(code, 2);
}

#[test]
fn runtime_failures_exit_one() {
    let ws = Workspace::new().unwrap();
    let out = ws.command(&["index"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(last_json_line(&err)["error"]["kind"], "runtime");
    assert!(err.contains("documents.jsonl"), "{err}");
}

#[test]
fn bundled_corpus_matches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_corpus(dir.path(), &synth_corpus(50, 7), 30).unwrap();
    let bundled = fixtures().join("mini");
    let mut files = vec!["manifest.jsonl", "gold.jsonl", "outcomes.jsonl", "seeds.json"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    files.extend((1..=50).map(|i| format!("docs/case{i:03}.txt")));
    for f in files {
        let want = std::fs::read(dir.path().join(&f)).unwrap();
        let got = std::fs::read(bundled.join(&f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert!(got == want, "{f} differs from the generator output");
    }
    assert_eq!(std::fs::read_dir(bundled.join("docs")).unwrap().count(), 50);
}

fn manifest(work: &Path, command: &str) -> RunManifest {
    RunManifest::read(&work.join("manifests").join(format!("{command}.json"))).unwrap()
}

#[test]
fn pipeline_builds_a_searchable_store() {
    let ws = Workspace::new().unwrap();
    let out = ws.rsdcase(&["pipeline"]).unwrap();
    assert_eq!(out.lines().count(), 9, "{out}");
    let store = Store::open_read_only(&ws.store()).unwrap();
    assert_eq!(store.count().unwrap(), 50);

    let m = manifest(&ws.work(), "pipeline");
    assert_eq!(m.stages.len(), 9);
    assert_eq!(m.seeds.ner, 42);
    assert!(m.inputs.contains_key("corpus:docs/case001.txt"));
    assert!(m.inputs.keys().all(|k| !k.starts_with("work:")), "{:?}", m.inputs.keys());
    for out in ["work:silver.jsonl", "work:cases.sqlite#dump", "work:predictor.json", "work:ner-model.json"] {
        assert!(m.outputs.contains_key(out), "{out}");
    }
    let text = std::fs::read_to_string(ws.work().join("run-manifest.json")).unwrap();
    assert!(!text.contains(ws.work().to_str().unwrap()), "absolute path in the manifest");

    for (flag, label) in [("1", OutcomeLabel::Granted), ("denied", OutcomeLabel::Denied)] {
        let got: SearchResult =
            serde_json::from_str(&ws.rsdcase(&["search", "--outcome", flag, "--limit", "100"]).unwrap()).unwrap();
        let want = store.query(&QueryFilter { outcome: Some(label), ..Default::default() }, 0, 100).unwrap();
        assert_eq!(got, want);
    }
    let got: SearchResult = serde_json::from_str(
        &ws.rsdcase(&[
            "search",
            "--contains",
            "doc_evidence=passport",
            "--decided-from",
            "1998-01-01",
            "--limit",
            "100",
        ])
        .unwrap(),
    )
    .unwrap();
    let filter: QueryFilter = serde_json::from_str(
        r#"{"contains": [{"field": "doc_evidence", "term": "passport"}], "decision_date": {"from": "1998-01-01"}}"#,
    )
    .unwrap();
    assert_eq!(got, store.query(&filter, 0, 100).unwrap());

    let err = ws.command(&["search", "--age-min", "50", "--age-max", "20"]).output().unwrap();
    assert_eq!(err.status.code(), Some(2));

    let table = ws.rsdcase(&["explain", "--doc", "case001", "--method", "lime"]).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    let bad = ws.command(&["explain", "--doc", "case001", "--method", "saliency"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let missing = ws.command(&["explain", "--doc", "nope"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    // Queries leave the build manifest alone.
    assert_eq!(std::fs::read_to_string(ws.work().join("run-manifest.json")).unwrap(), text);
    let explain = manifest(&ws.work(), "explain");
    assert!(explain.inputs.contains_key("work:cases.sqlite#dump"));
    assert!(explain.outputs.contains_key("stdout"));

    let eval: Value = serde_json::from_str(&ws.rsdcase(&["eval"]).unwrap()).unwrap();
    assert!(eval["ner_test"]["micro"]["f1"].as_f64().unwrap() > 0.5, "{eval}");
    assert!(eval["silver_vs_gold"]["cases"].as_u64().unwrap() == 30);
}

#[test]
fn stage_reruns_reproduce_manifests() {
    let a = Workspace::new().unwrap();
    let b = Workspace::new().unwrap();
    a.rsdcase(&["pipeline"]).unwrap();
    b.rsdcase(&["pipeline"]).unwrap();
    let read = |ws: &Workspace, name: &str| std::fs::read(ws.work().join(name)).unwrap();
    assert_eq!(read(&a, "run-manifest.json"), read(&b, "run-manifest.json"));
    for stage in
        ["ingest", "termbase", "suggest", "split", "train-ner", "extract", "train-outcome", "silverlabel", "index"]
    {
        a.rsdcase(&[stage]).unwrap();
        let first = read(&a, &format!("manifests/{stage}.json"));
        a.rsdcase(&[stage]).unwrap();
        assert_eq!(first, read(&a, &format!("manifests/{stage}.json")), "{stage}");
    }
}

#[test]
fn serve_search_and_explain_round_trip() {
    let ws = Workspace::new().unwrap();
    ws.rsdcase(&["pipeline"]).unwrap();
    let server = Server::start(&ws).unwrap();
    let (status, health) = server.get("/health").unwrap();
    assert_eq!(status, 200);
    assert_eq!(health["cases"], 50);
    assert_eq!(health["predictor"], true);

    let (status, body) = server.post("/search", r#"{"filter": {"outcome": 1}, "limit": 100}"#).unwrap();
    assert_eq!(status, 200);
    let via_cli: Value =
        serde_json::from_str(&ws.rsdcase(&["search", "--outcome", "1", "--limit", "100"]).unwrap()).unwrap();
    assert_eq!(body, via_cli);

    let (status, body) = server.get("/cases/case002/attributions?method=partition_shap").unwrap();
    assert_eq!(status, 200, "{body}");
    let via_cli: Value = serde_json::from_str(
        &ws.rsdcase(&["explain", "--doc", "case002", "--method", "partition_shap", "--format", "json"]).unwrap(),
    )
    .unwrap();
    // The table rounds weights to six decimals.
    let served = body["attributions"][0]["weights"].as_array().unwrap();
    let printed = via_cli["rows"][0]["weights"].as_array().unwrap();
    assert_eq!(served.len(), printed.len());
    for (a, b) in served.iter().zip(printed) {
        assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() <= 5e-7, "{a} vs {b}");
    }
    assert_eq!(body["input_mode"], "feature_string");
}

#[test]
fn synth_and_fetch_validate_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let (code, _, err) = run(&["synth", "--out", out.to_str().unwrap(), "--cases", "3", "--annotated", "5"]);
    assert_eq!(code, 2, "{err}");
    let (code, msg, _) = run(&["synth", "--out", out.to_str().unwrap(), "--cases", "4", "--annotated", "2"]);
    assert_eq!(code, 0);
    assert!(msg.contains("4 documents"));

    let ids = dir.path().join("ids.txt");
    std::fs::write(&ids, "a\nb\n").unwrap();
    let sink = dir.path().join("sink");
    let (code, _, err) = run(&[
        "fetch",
        "--uri-template",
        "http://127.0.0.1:9/doc",
        "--ids-file",
        ids.to_str().unwrap(),
        "--sink",
        sink.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{err}");
}

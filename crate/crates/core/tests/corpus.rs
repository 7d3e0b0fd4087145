use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rsdcase_core::corpus::*;

const DOCS: [(&str, &str); 3] = [
    (
        "a",
        "IMMIGRATION AND REFUGEE BOARD\nDate of hearing: June 4, 1996\nREASONS AND DECISION\nThe claimant fears persecution.",
    ),
    ("b", "Date of decision: 1997-02-10\nReasons for decision\nShe testified."),
    ("c", "No delimiter in this one."),
];

fn write_fixture(dir: &std::path::Path) -> CorpusManifest {
    let files: Vec<(String, String)> = DOCS
        .iter()
        .map(|(id, text)| {
            std::fs::write(dir.join(format!("{id}.txt")), text).unwrap();
            (id.to_string(), format!("{id}.txt"))
        })
        .collect();
    CorpusManifest::from_files(dir, &files).unwrap()
}

#[test]
fn loads_three_documents_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_fixture(dir.path());
    let docs = load_corpus(dir.path(), &manifest, &DelimiterRules::default()).unwrap();
    assert_eq!(docs.len(), 3);
    assert_eq!(docs.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    assert!(docs[0].main_text.starts_with("REASONS AND DECISION"));
    assert_eq!(docs[0].year, Some(1996));
    assert_eq!(docs[1].year, Some(1997));
    assert!(docs[2].split_warning);
    assert!(docs[2].cover_text.is_empty());
    for (d, (_, raw)) in docs.iter().zip(DOCS) {
        assert_eq!(d.full_text(), raw);
    }
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_fixture(dir.path());
    let path = dir.path().join("manifest.jsonl");
    manifest.write_jsonl(&path).unwrap();
    assert_eq!(CorpusManifest::read_jsonl(&path).unwrap(), manifest);
}

#[test]
fn tampered_file_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_fixture(dir.path());
    std::fs::write(dir.path().join("b.txt"), "Date of decision: 1997-02-11\nReasons for decision\nShe testified.")
        .unwrap();
    assert!(matches!(
        load_corpus(dir.path(), &manifest, &DelimiterRules::default()),
        Err(CorpusError::ChecksumMismatch { doc_id, .. }) if doc_id == "b"
    ));
}

#[test]
fn missing_file_and_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = write_fixture(dir.path());
    std::fs::remove_file(dir.path().join("c.txt")).unwrap();
    assert!(matches!(manifest.validate(dir.path()), Err(CorpusError::MissingFile { .. })));
    manifest.entries[2] = manifest.entries[0].clone();
    assert!(matches!(manifest.validate(dir.path()), Err(CorpusError::DuplicateDocId { .. })));
}

#[test]
fn manifest_syntax_error_has_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, "{\"doc_id\":\"a\",\"path\":\"a.txt\",\"bytes\":1,\"sha256\":\"00\"}\nnot json\n").unwrap();
    assert!(matches!(CorpusManifest::read_jsonl(&path), Err(CorpusError::ManifestSyntax { line: 2, .. })));
}

/// Minimal HTTP/1.1 server answering each request with the next scripted
/// status for its path, or 200 with the path as body once the script is spent.
fn scripted_server(script: Vec<(&'static str, Vec<u16>)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let mut script: Vec<(String, VecDeque<u16>)> = script.into_iter().map(|(p, s)| (p.to_string(), s.into())).collect();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                    break;
                }
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
            log.lock().unwrap().push(path.clone());
            let status = script.iter_mut().find(|(p, _)| *p == path).and_then(|(_, q)| q.pop_front()).unwrap_or(200);
            let body = if status == 200 { format!("body of {path}") } else { String::new() };
            let reason = if status == 200 { "OK" } else { "Busy" };
            write!(
                stream,
                "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

#[test]
fn fetch_retries_throttled_requests_and_resumes() {
    let (base, seen) = scripted_server(vec![("/doc/2", vec![429, 429])]);
    let dir = tempfile::tempdir().unwrap();
    let job = FetchJob {
        uri_template: format!("{base}/doc/{{id}}"),
        id_list: vec!["1".into(), "2".into()],
        min_delay: Duration::from_millis(30),
        max_retries: 4,
    };
    let report = fetch_with(&job, dir.path(), &mut UreqTransport::default()).unwrap();
    assert!(report.failures.is_empty());
    assert_eq!(report.attempts["1"], 1);
    assert_eq!(report.attempts["2"], 3);
    for w in report.requests.windows(2) {
        assert!(w[1].at - w[0].at >= job.min_delay, "{:?}", report.requests);
    }
    let manifest = CorpusManifest::read_jsonl(&dir.path().join(FETCH_MANIFEST)).unwrap();
    assert_eq!(manifest.count(), 2);
    manifest.validate(dir.path()).unwrap();
    assert_eq!(manifest.entries[1].sha256, sha256_hex(b"body of /doc/2"));

    let before = seen.lock().unwrap().len();
    let rerun = fetch_with(&job, dir.path(), &mut UreqTransport::default()).unwrap();
    assert_eq!(rerun.skipped, ["1", "2"]);
    assert_eq!(seen.lock().unwrap().len(), before);
}

#[test]
fn fetch_records_client_errors_without_retry() {
    let (base, _) = scripted_server(vec![("/doc/x", vec![404])]);
    let dir = tempfile::tempdir().unwrap();
    let job = FetchJob {
        uri_template: format!("{base}/doc/{{id}}"),
        id_list: vec!["x".into()],
        min_delay: Duration::from_millis(5),
        max_retries: 3,
    };
    let report = fetch_with(&job, dir.path(), &mut UreqTransport::default()).unwrap();
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].attempts, 1);
    let failures = std::fs::read_to_string(dir.path().join(FETCH_FAILURES)).unwrap();
    assert_eq!(failures.lines().count(), 1);
}

#[test]
fn fetch_job_validation() {
    let job = |t: &str, ms| FetchJob {
        uri_template: t.into(),
        id_list: vec![],
        min_delay: Duration::from_millis(ms),
        max_retries: 0,
    };
    assert!(job("http://h/{id}", 1).validate().is_ok());
    assert!(job("http://h/", 1).validate().is_err());
    assert!(job("http://h/{id}/{id}", 1).validate().is_err());
    assert!(job("http://h/{id}", 0).validate().is_err());
}

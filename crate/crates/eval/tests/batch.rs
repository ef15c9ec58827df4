use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use selfcross_eval::{
    compute_scores, load_fixtures, parse_prompt_set, score_batch, score_offline, BatchConfig, EndpointConfig,
    EvalError, HttpVlmClient, PromptCase, RawTranscript, TranscriptStatus,
};

/// Serves canned chat-completion responses; `respond` maps the request
/// number and body to `(status, body)`.
struct MockServer {
    url: String,
    requests: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

fn mock<F>(respond: F) -> MockServer
where
    F: Fn(usize, &str) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (r, b, a) = (requests.clone(), bodies.clone(), auth.clone());
    let respond = Arc::new(respond);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (r, b, a, respond) = (r.clone(), b.clone(), a.clone(), respond.clone());
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        authorization = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                let n = r.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = respond(n, &body);
                b.lock().unwrap().push(body);
                a.lock().unwrap().push(authorization);
                let response = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                let _ = stream.write_all(response.as_bytes());
            });
        }
    });
    MockServer {
        url,
        requests,
        bodies,
        auth,
    }
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn cases() -> Vec<PromptCase> {
    parse_prompt_set("a cat and a dog | 2,5\na bear and an elephant | 2,5").unwrap()
}

fn images(dir: &Path, per_case: usize) {
    for case in cases() {
        let d = dir.join(&case.id);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..per_case {
            std::fs::write(d.join(format!("{i:03}.png")), [0x89, b'P', b'N', b'G', i as u8]).unwrap();
        }
        std::fs::write(d.join("notes.txt"), "not an image").unwrap();
    }
}

fn config(url: &str, transcripts: &Path, key_env: &str) -> BatchConfig {
    BatchConfig {
        endpoint: EndpointConfig {
            url: url.to_string(),
            api_key_env: key_env.to_string(),
            backoff_ms: 1,
            max_backoff_ms: 4,
            max_in_flight: 3,
            timeout_secs: 10,
            ..Default::default()
        },
        transcripts_dir: transcripts.to_path_buf(),
        images_per_case: None,
    }
}

const ALL_GOOD: &str = "1. A cat. True\n2. True\n3. A dog. True\n4. True\n5. Not a mixture. False";

#[test]
fn batch_scores_every_image_and_persists_transcripts() {
    let server = mock(|_, _| (200, completion(ALL_GOOD)));
    let tmp = tempfile::tempdir().unwrap();
    images(&tmp.path().join("img"), 3);
    std::env::set_var("SELFCROSS_TEST_KEY_A", "secret-a");
    let cfg = config(&server.url, &tmp.path().join("tx"), "SELFCROSS_TEST_KEY_A");
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let out = score_batch(&tmp.path().join("img"), &cases(), &client, &cfg).unwrap();
    assert_eq!(out.report.transcripts, 6);
    assert_eq!(
        (out.report.ext_pct, out.report.rec_pct, out.report.wom_pct),
        (100.0, 100.0, 100.0)
    );
    assert_eq!(server.requests.load(Ordering::SeqCst), 6);

    let body: serde_json::Value = serde_json::from_str(&server.bodies.lock().unwrap()[0]).unwrap();
    let content = &body["messages"][0]["content"];
    assert!(content[0]["text"].as_str().unwrap().contains("Sphinx"));
    assert!(content[1]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert!(server
        .auth
        .lock()
        .unwrap()
        .iter()
        .all(|a| a.as_deref() == Some("Bearer secret-a")));

    let saved: RawTranscript =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("tx/a-cat-and-a-dog/001.json")).unwrap())
            .unwrap();
    assert_eq!(saved.raw.as_deref(), Some(ALL_GOOD));
    assert_eq!(saved.attempts, 1);

    let offline = score_offline(&tmp.path().join("tx"), &cases()).unwrap();
    assert_eq!(offline.report, out.report);
}

#[test]
fn transient_errors_are_retried_with_cap() {
    let server = mock(|n, _| {
        if n < 2 {
            (503, "busy".into())
        } else {
            (200, completion(ALL_GOOD))
        }
    });
    let tmp = tempfile::tempdir().unwrap();
    let cases = parse_prompt_set("a cat and a dog | 2,5").unwrap();
    std::fs::create_dir_all(tmp.path().join("img/a-cat-and-a-dog")).unwrap();
    std::fs::write(tmp.path().join("img/a-cat-and-a-dog/0.jpg"), [1, 2]).unwrap();
    let mut cfg = config(&server.url, &tmp.path().join("tx"), "SELFCROSS_TEST_UNSET");
    cfg.endpoint.max_in_flight = 1;
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let out = score_batch(&tmp.path().join("img"), &cases, &client, &cfg).unwrap();
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
    assert_eq!(out.report.parsed, 1);
    assert!(server.auth.lock().unwrap().iter().all(Option::is_none));

    let always_down = mock(|_, _| (500, "down".into()));
    let cfg = config(&always_down.url, &tmp.path().join("tx2"), "SELFCROSS_TEST_UNSET");
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let err = score_batch(&tmp.path().join("img"), &cases, &client, &cfg)
        .err()
        .unwrap();
    assert!(matches!(err, EvalError::NoParseable));
    assert_eq!(always_down.requests.load(Ordering::SeqCst), 5);
    let saved: RawTranscript =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("tx2/a-cat-and-a-dog/0.json")).unwrap()).unwrap();
    assert_eq!(saved.attempts, 5);
    assert!(saved.raw.is_none());
}

#[test]
fn partial_failure_reports_coverage() {
    let server = mock(|_, body| {
        if body.contains("bear") {
            (500, "down".into())
        } else {
            (200, completion(ALL_GOOD))
        }
    });
    let tmp = tempfile::tempdir().unwrap();
    images(&tmp.path().join("img"), 2);
    let cfg = config(&server.url, &tmp.path().join("tx"), "SELFCROSS_TEST_UNSET");
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let out = score_batch(&tmp.path().join("img"), &cases(), &client, &cfg).unwrap();
    assert_eq!(out.report.failed, 2);
    assert_eq!(out.report.parsed, 2);
    assert_eq!(out.report.coverage, 0.5);
    assert!(out.report.to_table().contains("2 failed of 4"));
}

#[test]
fn auth_failure_aborts() {
    let server = mock(|_, _| (401, r#"{"error":"bad key"}"#.into()));
    let tmp = tempfile::tempdir().unwrap();
    images(&tmp.path().join("img"), 4);
    let cfg = config(&server.url, &tmp.path().join("tx"), "SELFCROSS_TEST_UNSET");
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let err = score_batch(&tmp.path().join("img"), &cases(), &client, &cfg)
        .err()
        .unwrap();
    assert!(matches!(err, EvalError::Auth(_)), "{err}");
    assert!(server.requests.load(Ordering::SeqCst) <= 3);
}

#[test]
fn malformed_text_is_unparseable_and_run_continues() {
    let server = mock(|n, _| {
        if n % 2 == 0 {
            (200, completion("I cannot see any image."))
        } else {
            (200, completion(ALL_GOOD))
        }
    });
    let tmp = tempfile::tempdir().unwrap();
    images(&tmp.path().join("img"), 2);
    let mut cfg = config(&server.url, &tmp.path().join("tx"), "SELFCROSS_TEST_UNSET");
    cfg.endpoint.max_in_flight = 1;
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let out = score_batch(&tmp.path().join("img"), &cases(), &client, &cfg).unwrap();
    assert_eq!(out.report.unparseable, 2);
    assert_eq!(out.report.parsed, 2);
    let statuses: Vec<_> = out.transcripts.iter().map(|t| t.status).collect();
    assert_eq!(
        statuses.iter().filter(|s| **s == TranscriptStatus::Unparseable).count(),
        2
    );
}

#[test]
fn images_per_case_limit() {
    let server = mock(|_, _| (200, completion(ALL_GOOD)));
    let tmp = tempfile::tempdir().unwrap();
    images(&tmp.path().join("img"), 5);
    let mut cfg = config(&server.url, &tmp.path().join("tx"), "SELFCROSS_TEST_UNSET");
    cfg.images_per_case = Some(2);
    let client = HttpVlmClient::new(cfg.endpoint.clone()).unwrap();
    let out = score_batch(&tmp.path().join("img"), &cases(), &client, &cfg).unwrap();
    assert_eq!(out.report.transcripts, 4);
}

#[test]
fn fixtures_are_reparsed_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |case: &str, image: &str, raw: Option<&str>| {
        let d = tmp.path().join(case);
        std::fs::create_dir_all(&d).unwrap();
        let t = RawTranscript {
            case_id: case.into(),
            image_id: image.into(),
            image_path: None,
            question: String::new(),
            raw: raw.map(str::to_string),
            attempts: 1,
            error: raw.is_none().then(|| "timeout".to_string()),
        };
        std::fs::write(d.join(format!("{image}.json")), serde_json::to_string(&t).unwrap()).unwrap();
    };
    write("a-cat-and-a-dog", "0", Some("1. True 2. True 3. True 4. True 5. False"));
    write("a-cat-and-a-dog", "1", Some("1. True 2. False 3. True 4. True 5. True"));
    write(
        "a-bear-and-an-elephant",
        "0",
        Some("1. False 2. False 3. True 4. True 5. False"),
    );
    write("a-bear-and-an-elephant", "1", None);
    let loaded = load_fixtures(tmp.path(), &cases()).unwrap();
    let report = compute_scores(&loaded).unwrap();
    assert_eq!(report.parsed, 3);
    assert_eq!(report.failed, 1);
    assert!((report.ext_pct - 200.0 / 3.0).abs() < 1e-12);
    assert!((report.rec_pct - 100.0 / 3.0).abs() < 1e-12);
    assert!((report.wom_pct - 200.0 / 3.0).abs() < 1e-12);
    let again = score_offline(tmp.path(), &cases()).unwrap();
    assert_eq!(again.report, report);
    assert_eq!(
        serde_json::to_string(&again.report).unwrap(),
        serde_json::to_string(&report).unwrap()
    );

    write("unknown-case", "0", Some("1. True"));
    assert!(matches!(load_fixtures(tmp.path(), &cases()), Err(EvalError::Case(_))));
}

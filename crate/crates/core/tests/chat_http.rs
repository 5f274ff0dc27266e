//! The HTTP transport against a local stub server.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use base64::Engine as _;
use common::{text_reply, StubServer};
use ooc_detect::chat::{batch_probe, ChatBackendConfig, ChatClient, ChatError};
use ooc_detect::images::MemoryImageStore;
use ooc_detect::manifest::{Label, Partition, Sample};
use ooc_detect::prompt::PromptSpec;

fn config(url: &str, env_var: &str) -> ChatBackendConfig {
    ChatBackendConfig {
        endpoint: url.to_string(),
        auth_env_var: env_var.to_string(),
        timeout_secs: 5.0,
        max_retries: 3,
        backoff_base_secs: 0.0,
        concurrency: 2,
    }
}

#[test]
fn echo_is_captured_verbatim_with_auth_header() {
    let reply = "Yes, the image matches the caption.";
    let server = StubServer::start(move |_, _| text_reply(reply));
    std::env::set_var("OOC_TEST_TOKEN_ECHO", "s3cret");
    let client = ChatClient::http(config(&server.url, "OOC_TEST_TOKEN_ECHO")).unwrap();

    let ex = client
        .chat_verdict_raw("a.jpg", &[1, 2, 3], "Does it match?")
        .unwrap();
    assert_eq!(ex.raw_response, reply);
    assert_eq!(ex.attempt_count, 1);

    let req = server.requests.lock().unwrap()[0].clone();
    assert_eq!(req.authorization.as_deref(), Some("Bearer s3cret"));
    let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
    assert_eq!(body["prompt"], "Does it match?");
    let image = base64::engine::general_purpose::STANDARD
        .decode(body["image"].as_str().unwrap())
        .unwrap();
    assert_eq!(image, vec![1, 2, 3]);
}

#[test]
fn missing_token_sends_no_header() {
    let server = StubServer::start(|_, _| text_reply("No."));
    let client = ChatClient::http(config(&server.url, "OOC_TEST_TOKEN_SURELY_UNSET")).unwrap();
    client.chat_verdict_raw("a", b"x", "p").unwrap();
    assert_eq!(server.requests.lock().unwrap()[0].authorization, None);
}

#[test]
fn two_failures_then_success() {
    let server = StubServer::start(|n, _| {
        if n < 2 {
            (503, "busy".into())
        } else {
            text_reply("ok")
        }
    });
    let client = ChatClient::http(config(&server.url, "UNSET_VAR_X")).unwrap();
    let ex = client.chat_verdict_raw("a", b"x", "p").unwrap();
    assert_eq!(ex.attempt_count, 3);
    assert_eq!(server.hits(), 3);
}

#[test]
fn unauthorized_stops_after_one_attempt() {
    let server = StubServer::start(|_, _| (401, "{\"error\":\"unauthorized\"}".into()));
    let client = ChatClient::http(config(&server.url, "UNSET_VAR_X")).unwrap();
    let f = client.chat_verdict_raw("a", b"x", "p").unwrap_err();
    assert_eq!(f.error, ChatError::Auth(401));
    assert_eq!(f.attempts, 1);
    assert_eq!(server.hits(), 1);
}

#[test]
fn rate_limit_exhausts_retries() {
    let server = StubServer::start(|_, _| (429, "slow down".into()));
    let client = ChatClient::http(config(&server.url, "UNSET_VAR_X")).unwrap();
    let f = client.chat_verdict_raw("a", b"x", "p").unwrap_err();
    assert!(matches!(f.error, ChatError::RetriesExhausted(_)), "{f}");
    assert_eq!(f.attempts, 4);
}

#[test]
fn slow_server_times_out() {
    let server = StubServer::start(|_, _| {
        std::thread::sleep(std::time::Duration::from_millis(1500));
        text_reply("late")
    });
    let mut c = config(&server.url, "UNSET_VAR_X");
    c.timeout_secs = 0.3;
    c.max_retries = 1;
    let client = ChatClient::http(c).unwrap();
    let f = client.chat_verdict_raw("a", b"x", "p").unwrap_err();
    assert_eq!(f.error, ChatError::Timeout, "{f}");
    assert_eq!(f.attempts, 2);
}

#[test]
fn connection_refused_is_retried_then_reported() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client =
        ChatClient::http(config(&format!("http://127.0.0.1:{port}/x"), "UNSET_VAR_X")).unwrap();
    let f = client.chat_verdict_raw("a", b"x", "p").unwrap_err();
    assert!(matches!(f.error, ChatError::RetriesExhausted(_)), "{f}");
    assert_eq!(f.attempts, 4);
}

#[test]
fn batch_isolates_a_timing_out_sample() {
    // the second sample's prompt always stalls past the timeout
    let server = StubServer::start(|_, req| {
        if req.body.contains("caption two") {
            std::thread::sleep(std::time::Duration::from_millis(800));
        }
        text_reply("Yes")
    });
    let mut c = config(&server.url, "UNSET_VAR_X");
    c.timeout_secs = 0.3;
    c.max_retries = 0;
    let client = ChatClient::http(c).unwrap();

    let mut images = MemoryImageStore::new();
    let samples: Vec<Sample> = ["one", "two", "three"]
        .iter()
        .map(|n| {
            images.insert(format!("{n}.jpg"), vec![1]);
            Sample {
                id: n.to_string(),
                image_ref: format!("{n}.jpg"),
                caption: format!("caption {n}"),
                label: Label::Mismatch,
                split: Partition::Test,
                source: None,
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let out = batch_probe(&client, &samples, &images, &PromptSpec::default(), &path).unwrap();
    assert!(out[0].is_answered() && out[2].is_answered());
    assert!(out[1].error.is_some());

    let lines: Vec<String> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("\"raw_response\"") && lines[2].contains("\"raw_response\""));
    assert!(lines[1].contains("\"error\""));

    // resume retries only the failed sample
    let hits = Arc::new(AtomicUsize::new(0));
    let counted = hits.clone();
    let healthy = StubServer::start(move |_, _| {
        counted.fetch_add(1, Ordering::SeqCst);
        text_reply("No")
    });
    let client = ChatClient::http(config(&healthy.url, "UNSET_VAR_X")).unwrap();
    let out = batch_probe(&client, &samples, &images, &PromptSpec::default(), &path).unwrap();
    assert!(out.iter().all(|r| r.is_answered()));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(out[1].raw_response.as_deref(), Some("No"));
}

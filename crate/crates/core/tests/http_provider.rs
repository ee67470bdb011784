//! HTTP client against an in-process mock of the model server.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use cape_core::mechanism::Mechanism;
use cape_core::providers::{
    ContextMode, ContextWindow, FileProvider, HttpConfig, HttpProvider, LogitProvider, RecordingProvider,
};
use cape_core::vocab::{TokenId, Vocabulary};
use cape_core::{CapeError, Execution};
use common::{load_toy, toy};
use serde_json::{json, Value};

#[derive(Default)]
struct Behavior {
    /// Number of initial /logits requests answered with 500.
    fail_first: usize,
    /// Drop this many entries from every logits response.
    truncate: usize,
    wrong_hash: bool,
    delay: Duration,
}

struct MockServer {
    url: String,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
    logits_calls: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn respond(req: tiny_http::Request, status: u16, body: Vec<u8>, json: bool) {
    let ct = if json { "application/json" } else { "application/octet-stream" };
    let header = tiny_http::Header::from_bytes("Content-Type", ct).unwrap();
    let _ = req.respond(tiny_http::Response::from_data(body).with_status_code(status).with_header(header));
}

fn serve(behavior: Behavior) -> MockServer {
    let vocab = Arc::new(Vocabulary::from_tokens(toy::tokens()).unwrap());
    let table = toy::embeddings();
    let emb_bytes = Arc::new(table.to_binary_bytes(Some(vocab.tokens())));
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let port = server.server_addr().to_ip().unwrap().port();
    let behavior = Arc::new(behavior);
    let logits_calls = Arc::new(AtomicUsize::new(0));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let max_in_flight = Arc::new(AtomicUsize::new(0));
    let workers = (0..4)
        .map(|_| {
            let (server, vocab, emb, b) = (server.clone(), vocab.clone(), emb_bytes.clone(), behavior.clone());
            let (calls, cur, peak) = (logits_calls.clone(), in_flight.clone(), max_in_flight.clone());
            std::thread::spawn(move || {
                while let Ok(mut req) = server.recv() {
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let url = req.url().to_string();
                    match url.as_str() {
                        "/info" => {
                            let hash = if b.wrong_hash { "0".repeat(64) } else { vocab.sha256() };
                            let v = json!({"model": "mock", "vocab_size": vocab.len(), "dim": toy::DIM,
                                           "mode": "bidirectional", "vocab_sha256": hash});
                            respond(req, 200, v.to_string().into_bytes(), true);
                        }
                        "/tokenize" => {
                            let v: Value = match serde_json::from_str(&body) {
                                Ok(v) => v,
                                Err(_) => {
                                    respond(req, 400, br#"{"error": "malformed JSON"}"#.to_vec(), true);
                                    continue;
                                }
                            };
                            let text = v["text"].as_str().unwrap_or_default();
                            let ids: Option<Vec<u32>> =
                                text.split_whitespace().map(|t| vocab.id(t).map(|i| i.0)).collect();
                            match ids {
                                Some(ids) => {
                                    respond(req, 200, json!({"token_ids": ids}).to_string().into_bytes(), true)
                                }
                                None => respond(req, 400, br#"{"error": "unknown word"}"#.to_vec(), true),
                            }
                        }
                        "/logits" => {
                            let n = calls.fetch_add(1, Ordering::SeqCst);
                            let now = cur.fetch_add(1, Ordering::SeqCst) + 1;
                            peak.fetch_max(now, Ordering::SeqCst);
                            std::thread::sleep(b.delay);
                            cur.fetch_sub(1, Ordering::SeqCst);
                            if n < b.fail_first {
                                respond(req, 500, br#"{"error": "warming up"}"#.to_vec(), true);
                                continue;
                            }
                            let v: Value = serde_json::from_str(&body).unwrap();
                            let ids: Vec<TokenId> = v["token_ids"]
                                .as_array()
                                .unwrap()
                                .iter()
                                .map(|x| TokenId(x.as_u64().unwrap() as u32))
                                .collect();
                            let pos = v["target_position"].as_u64().unwrap() as usize;
                            if pos >= ids.len() {
                                respond(req, 400, br#"{"error": "position out of range"}"#.to_vec(), true);
                                continue;
                            }
                            let mut logits = toy::logits(&ids, pos, vocab.len());
                            logits.truncate(logits.len() - b.truncate);
                            respond(req, 200, json!({"logits": logits}).to_string().into_bytes(), true);
                        }
                        "/embeddings" => respond(req, 200, emb.to_vec(), false),
                        _ => respond(req, 404, br#"{"error": "not found"}"#.to_vec(), true),
                    }
                }
            })
        })
        .collect();
    MockServer { url: format!("http://127.0.0.1:{port}"), server, workers, logits_calls, max_in_flight }
}

fn config(url: &str) -> HttpConfig {
    let mut c = HttpConfig::new(url);
    c.backoff = Duration::from_millis(5);
    c.timeout = Duration::from_secs(10);
    c
}

fn toy_vocab() -> Arc<Vocabulary> {
    Arc::new(Vocabulary::from_tokens(toy::tokens()).unwrap())
}

#[test]
fn info_binding_and_basic_calls() {
    let mock = serve(Behavior::default());
    let vocab = toy_vocab();
    let p = HttpProvider::connect(config(&mock.url), vocab.clone()).unwrap();
    assert_eq!(p.info().model, "mock");
    assert_eq!(p.descriptor().mode, ContextMode::Bidirectional);
    let ids = p.tokenize(toy::PROMPTS[1]).unwrap();
    assert_eq!(ids.len(), 6);
    assert!(p.tokenize("").unwrap().is_empty());
    let w = ContextWindow::new(&ids, 3, ContextMode::Bidirectional).unwrap();
    let l = p.context_logits(&w).unwrap();
    assert_eq!(l.values, toy::logits(&ids, 3, vocab.len()));
    assert!(l.values.iter().all(|v| v.is_finite()));
}

#[test]
fn embeddings_are_identical_across_fetches() {
    let mock = serve(Behavior::default());
    let p = HttpProvider::connect(config(&mock.url), toy_vocab()).unwrap();
    let a = p.embedding_table().unwrap();
    let b = p.embedding_table().unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_binary_bytes(None), b.to_binary_bytes(None));
    assert_eq!(a, toy::embeddings());
}

#[test]
fn wrong_checksum_fails_before_any_request() {
    let mock = serve(Behavior { wrong_hash: true, ..Default::default() });
    let err = HttpProvider::connect(config(&mock.url), toy_vocab()).unwrap_err();
    assert!(matches!(err, CapeError::Binding(_)), "{err}");
    assert_eq!(mock.logits_calls.load(Ordering::SeqCst), 0);
}

#[test]
fn wrong_vocabulary_size_is_a_binding_error() {
    let mock = serve(Behavior::default());
    let small = Arc::new(Vocabulary::from_tokens(["a", "b"]).unwrap());
    assert!(matches!(HttpProvider::connect(config(&mock.url), small), Err(CapeError::Binding(_))));
}

#[test]
fn length_mismatch_names_both_sizes() {
    let mock = serve(Behavior { truncate: 3, ..Default::default() });
    let vocab = toy_vocab();
    let p = HttpProvider::connect(config(&mock.url), vocab.clone()).unwrap();
    let ids = [TokenId(0), TokenId(1)];
    let err = p.context_logits(&ContextWindow::new(&ids, 0, ContextMode::Bidirectional).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&format!("{}", vocab.len() - 3)) && msg.contains(&vocab.len().to_string()), "{msg}");
    assert!(err.is_provider_error());
}

#[test]
fn server_errors_are_retried() {
    let mock = serve(Behavior { fail_first: 2, ..Default::default() });
    let p = HttpProvider::connect(config(&mock.url), toy_vocab()).unwrap();
    let ids = [TokenId(0), TokenId(1)];
    let w = ContextWindow::new(&ids, 1, ContextMode::Bidirectional).unwrap();
    assert!(p.context_logits(&w).is_ok());
    assert_eq!(mock.logits_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_give_up_after_three_attempts() {
    let mock = serve(Behavior { fail_first: 10, ..Default::default() });
    let p = HttpProvider::connect(config(&mock.url), toy_vocab()).unwrap();
    let ids = [TokenId(0)];
    let err = p.context_logits(&ContextWindow::new(&ids, 0, ContextMode::Bidirectional).unwrap()).unwrap_err();
    assert!(err.to_string().contains("3 attempts") && err.to_string().contains("warming up"), "{err}");
    assert_eq!(mock.logits_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_surface_the_message_without_retry() {
    let mock = serve(Behavior::default());
    let p = HttpProvider::connect(config(&mock.url), toy_vocab()).unwrap();
    let err = p.tokenize("zzz-not-a-word").unwrap_err();
    assert!(err.to_string().contains("unknown word"), "{err}");
}

#[test]
fn causal_requests_are_rejected_by_bidirectional_server() {
    let mock = serve(Behavior::default());
    let p = HttpProvider::connect(config(&mock.url), toy_vocab()).unwrap();
    let ids = [TokenId(0), TokenId(1)];
    assert!(p.context_logits(&ContextWindow::new(&ids, 1, ContextMode::Causal).unwrap()).is_err());
}

#[test]
fn unreachable_server_is_a_provider_error() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let err = HttpProvider::connect(config(&format!("http://127.0.0.1:{port}")), toy_vocab()).unwrap_err();
    assert!(err.is_provider_error(), "{err}");
}

#[test]
fn in_flight_requests_are_bounded() {
    let mock = serve(Behavior { delay: Duration::from_millis(30), ..Default::default() });
    let mut c = config(&mock.url);
    c.max_in_flight = 2;
    let p = HttpProvider::connect(c, toy_vocab()).unwrap();
    let ids: Vec<TokenId> = (0..8).map(TokenId).collect();
    std::thread::scope(|s| {
        for pos in 0..8 {
            let (p, ids) = (&p, &ids);
            s.spawn(move || {
                p.context_logits(&ContextWindow::new(ids, pos, ContextMode::Bidirectional).unwrap()).unwrap()
            });
        }
    });
    assert_eq!(mock.logits_calls.load(Ordering::SeqCst), 8);
    assert!(mock.max_in_flight.load(Ordering::SeqCst) <= 2);
}

#[test]
fn recorded_replay_matches_live_run() {
    let mock = serve(Behavior::default());
    let f = load_toy();
    let vocab = f.vocab.clone();
    let tmp = tempfile::tempdir().unwrap();
    let rec_dir = tmp.path().join("recorded");
    let live = HttpProvider::connect(config(&mock.url), vocab.clone()).unwrap();
    let recorder = RecordingProvider::new(live, &rec_dir, &vocab).unwrap();
    recorder.record_embeddings(&vocab).unwrap();
    let prompts: Vec<Vec<TokenId>> = toy::PROMPTS.iter().map(|p| recorder.tokenize(p).unwrap()).collect();

    let run = |provider: &dyn LogitProvider| {
        let ctx = cape_core::mechanism::MechanismContext {
            vocab: &f.vocab,
            nonsensitive: &f.nonsensitive,
            distances: &f.distances,
            provider,
        };
        let mech = Mechanism::new(common::fixed_config(4.0, 99, 10.0), ctx, Execution::Parallel).unwrap();
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| serde_json::to_string(&mech.perturb_prompt(i as u64, p).unwrap()).unwrap())
            .collect::<Vec<_>>()
    };
    let live_out = run(&recorder);
    recorder.finish().unwrap();
    let replay = FileProvider::open(&rec_dir, vocab.clone()).unwrap();
    assert_eq!(run(&replay), live_out);
    assert_eq!(replay.embedding_table().unwrap(), toy::embeddings());

    // the recorded records equal the frozen fixture's
    for (i, p) in prompts.iter().enumerate() {
        for pos in 0..p.len() {
            if f.nonsensitive.contains(p[pos]) {
                continue;
            }
            let w = ContextWindow::new(p, pos, ContextMode::Bidirectional).unwrap();
            assert_eq!(
                replay.context_logits(&w).unwrap().values,
                f.provider.context_logits(&w).unwrap().values,
                "prompt {i} position {pos}"
            );
        }
    }
}

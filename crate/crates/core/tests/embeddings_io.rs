use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use viser_core::datamodel::{AttackType, IrisSample};
use viser_core::embeddings::{
    extract_embeddings, EmbeddingStore, ExtractFailure, Extractor, ProbeKind, ProbeParams, RemoteConfig,
    RemoteExtractor, StubExtractor,
};
use viser_core::evaluation::{run_protocol, Method, ProtocolConfig, ProtocolContext};
use viser_core::imageio::ImageStore;
use viser_core::synthetic::{write_fixture_corpus, CorpusSpec};
use viser_core::training::TrainingConfig;
use viser_core::Grid;

#[test]
fn cache_limits_extraction_to_once_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_fixture_corpus(&dir.path().join("corpus"), &CorpusSpec::default()).unwrap();
    let images = ImageStore::load(&corpus.manifest);
    let samples: Vec<&IrisSample> = corpus.manifest.samples.iter().collect();
    let cache = dir.path().join("cache");

    let stub = StubExtractor::new();
    let first = extract_embeddings(&stub, &samples, &images, Some(&cache), 4).unwrap();
    let again = extract_embeddings(&stub, &samples, &images, Some(&cache), 4).unwrap();
    assert_eq!(stub.invocations(), samples.len());
    assert_eq!(first, again);
    assert_eq!(first.len(), samples.len());

    // A fresh process reads everything back from disk.
    let fresh = StubExtractor::new();
    let store = extract_embeddings(&fresh, &samples, &images, Some(&cache), 4).unwrap();
    assert_eq!(fresh.invocations(), 0);

    let saliency = BTreeMap::new();
    let out = dir.path().join("out");
    let ctx = ProtocolContext {
        manifest: &corpus.manifest,
        images: &images,
        saliency: &saliency,
        embeddings: Some(&store),
        training: TrainingConfig::default(),
        probe: ProbeParams::default(),
        output_root: &out,
        fingerprint: "fp".into(),
        cancel: None,
    };
    let cfg = ProtocolConfig {
        methods: ProbeKind::ALL.iter().map(|k| Method::Probe(*k)).collect(),
        seeds: vec![0, 1],
        save_checkpoints: false,
        ..Default::default()
    };
    let outcome = run_protocol(&ctx, &cfg).unwrap();
    assert!(outcome.is_complete(), "{:?}", outcome.failures);
    assert_eq!(outcome.results.len(), 3 * 7 * 2);
    assert_eq!(stub.invocations() + fresh.invocations(), samples.len());
}

/// Answers with the stub vector except for one sample, where the service is gone.
struct FlakyExtractor {
    dead: String,
}

impl Extractor for FlakyExtractor {
    fn id(&self) -> String {
        "flaky".into()
    }

    fn extract(&self, sample: &IrisSample, image: &Grid) -> Result<Vec<f32>, ExtractFailure> {
        if sample.sample_id == self.dead {
            Err(ExtractFailure::Unreachable("connection refused".into()))
        } else {
            StubExtractor::new().extract(sample, image)
        }
    }
}

#[test]
fn partial_results_are_cached_when_extractor_disappears() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_fixture_corpus(&dir.path().join("corpus"), &CorpusSpec::default()).unwrap();
    let images = ImageStore::load(&corpus.manifest);
    let samples: Vec<&IrisSample> = corpus.manifest.samples.iter().collect();
    let cache = dir.path().join("cache");
    let flaky = FlakyExtractor { dead: samples[3].sample_id.clone() };
    let e = extract_embeddings(&flaky, &samples, &images, Some(&cache), 2).unwrap_err();
    assert!(e.to_string().contains("unreachable"), "{e}");
    let stored = EmbeddingStore::load(&cache, "flaky").unwrap();
    assert_eq!(stored.len(), samples.len() - 1);
    assert!(stored.get(&samples[3].sample_id).is_none());
}

struct MockServer {
    endpoint: String,
    requests: Arc<Mutex<Vec<(String, String)>>>,
}

/// Serves the scripted (status, body) responses in order, one per connection.
fn mock(script: Vec<(u16, String)>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/embed", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&requests);
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut auth = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.lock().unwrap().push((auth, String::from_utf8_lossy(&buf).into_owned()));
            let mut stream = reader.into_inner();
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    MockServer { endpoint, requests }
}

fn sample() -> (IrisSample, Grid) {
    let s = IrisSample {
        sample_id: "s1".into(),
        image_path: "/nonexistent/s1.png".into(),
        label: AttackType::Printout.label(),
        attack_type: AttackType::Printout,
        source_corpus: "c".into(),
    };
    (s, Grid::filled(4, 4, 0.25))
}

fn remote(endpoint: &str, token_env: &str) -> RemoteExtractor {
    RemoteExtractor::new(RemoteConfig {
        endpoint: endpoint.into(),
        token_env: token_env.into(),
        timeout_secs: 5.0,
        retries: 2,
        backoff_ms: 1,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn remote_extractor_retries_server_errors() {
    let server = mock(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, r#"{"embedding":[0.5,-1.0,2.0]}"#.into()),
    ]);
    std::env::set_var("VISER_TEST_TOKEN_RETRY", "sekrit");
    let x = remote(&server.endpoint, "VISER_TEST_TOKEN_RETRY");
    let (s, g) = sample();
    assert_eq!(x.extract(&s, &g).unwrap(), vec![0.5, -1.0, 2.0]);
    let reqs = server.requests.lock().unwrap();
    assert_eq!(reqs.len(), 3);
    assert!(reqs.iter().all(|(auth, _)| auth == "authorization: Bearer sekrit"));
    let body: serde_json::Value = serde_json::from_str(&reqs[0].1).unwrap();
    assert_eq!(body["model"], "dinov2-base");
    assert_eq!(body["sample_id"], "s1");
    assert!(!body["image_png_b64"].as_str().unwrap().is_empty());
}

#[test]
fn remote_extractor_gives_up_after_retries() {
    let server = mock(vec![(500, "{}".into()); 3]);
    let x = remote(&server.endpoint, "VISER_TEST_TOKEN_UNSET");
    let (s, g) = sample();
    match x.extract(&s, &g) {
        Err(ExtractFailure::Unreachable(msg)) => assert!(msg.contains("3 attempts"), "{msg}"),
        other => panic!("expected unreachable, got {other:?}"),
    }
    assert_eq!(server.requests.lock().unwrap().len(), 3);
    assert!(server.requests.lock().unwrap().iter().all(|(auth, _)| auth.is_empty()));

    // Nothing listening at all.
    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let x = remote(&format!("http://{closed}/embed"), "VISER_TEST_TOKEN_UNSET");
    assert!(matches!(x.extract(&s, &g), Err(ExtractFailure::Unreachable(_))));
}

#[test]
fn remote_client_errors_are_per_sample_gaps() {
    let server = mock(vec![(400, r#"{"error":"bad image"}"#.into())]);
    let x = remote(&server.endpoint, "VISER_TEST_TOKEN_UNSET");
    let (s, g) = sample();
    assert!(matches!(x.extract(&s, &g), Err(ExtractFailure::Sample(_))));
    assert_eq!(server.requests.lock().unwrap().len(), 1);
}

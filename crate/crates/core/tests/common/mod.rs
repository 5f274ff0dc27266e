//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use ooc_detect::chat::{RawReply, Transport, TransportError};
use ooc_detect::images::MemoryImageStore;
use ooc_detect::manifest::{AnswerToken, FineTuneRecord, Label, Partition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MATCH_PALETTE: [u8; 4] = [10, 20, 30, 40];
const MISMATCH_PALETTE: [u8; 4] = [200, 210, 220, 230];
const WORDS: [&str; 12] = [
    "crowd", "harbor", "minister", "flood", "stadium", "protest", "market", "storm", "summit",
    "bridge", "rally", "village",
];

/// Image bytes drawn from a class-specific palette, so the byte histograms of
/// the two classes live on disjoint bins. Captions come from one shared
/// vocabulary and carry no label signal.
pub fn synthetic_pair(rng: &mut ChaCha8Rng, label: Label) -> (Vec<u8>, String) {
    let palette = match label {
        Label::Match => MATCH_PALETTE,
        Label::Mismatch => MISMATCH_PALETTE,
    };
    let image = (0..8).map(|_| palette[rng.gen_range(0..4)]).collect();
    let caption = (0..4)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ");
    (image, caption)
}

/// `n` alternating-label records plus their in-memory images.
pub fn separable_dataset(n: usize, seed: u64) -> (Vec<FineTuneRecord>, MemoryImageStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = MemoryImageStore::new();
    let records = (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Match
            } else {
                Label::Mismatch
            };
            let (image, caption) = synthetic_pair(&mut rng, label);
            let image_ref = format!("img/{i:04}.bin");
            images.insert(image_ref.clone(), image);
            FineTuneRecord {
                id: format!("r{i:04}"),
                image_ref,
                caption,
                label_token: match label {
                    Label::Match => AnswerToken::Yes,
                    Label::Mismatch => AnswerToken::No,
                },
            }
        })
        .collect();
    (records, images)
}

/// Write `manifest.jsonl`, image files and a run config into `dir`.
/// Returns the config path.
pub fn write_fixture(
    dir: &Path,
    counts: &[(Partition, usize)],
    extra_config: &str,
) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mut manifest = String::new();
    let mut k = 0;
    for &(partition, n) in counts {
        for i in 0..n {
            let label = if i % 2 == 0 {
                Label::Match
            } else {
                Label::Mismatch
            };
            let (image, caption) = synthetic_pair(&mut rng, label);
            let image_ref = format!("img/{k:04}.bin");
            std::fs::write(dir.join(&image_ref), image).unwrap();
            manifest.push_str(
                &serde_json::json!({
                    "id": format!("s{k:04}"),
                    "image": image_ref,
                    "caption": caption,
                    "label": label.code(),
                    "split": partition.as_str(),
                })
                .to_string(),
            );
            manifest.push('\n');
            k += 1;
        }
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest).unwrap();
    let config = format!(
        "manifest = \"manifest.jsonl\"\nsplit_name = \"Merged/Balanced\"\nout = \"run\"\nseed = 3\n{extra_config}"
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub body: String,
    pub authorization: Option<String>,
}

/// Minimal HTTP/1.1 server answering every POST through `handler`.
pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    pub requests: Arc<Mutex<Vec<StubRequest>>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(usize, &StubRequest) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler = Arc::new(handler);
        {
            let (hits, requests) = (hits.clone(), requests.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming().flatten() {
                    let (hits, requests, handler) =
                        (hits.clone(), requests.clone(), handler.clone());
                    std::thread::spawn(move || {
                        let _ = serve(stream, &hits, &requests, &*handler);
                    });
                }
            });
        }
        Self {
            url,
            hits,
            requests,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve<F>(
    stream: TcpStream,
    hits: &AtomicUsize,
    requests: &Mutex<Vec<StubRequest>>,
    handler: &F,
) -> std::io::Result<()>
where
    F: Fn(usize, &StubRequest) -> (u16, String),
{
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut headers = HashMap::new();
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers
        .get("content-length")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    let request = StubRequest {
        body: String::from_utf8_lossy(&body).into_owned(),
        authorization: headers.get("authorization").cloned(),
    };
    let n = hits.fetch_add(1, Ordering::SeqCst);
    let (status, reply) = handler(n, &request);
    requests.lock().unwrap().push(request);
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )?;
    stream.flush()
}

pub fn text_reply(text: &str) -> (u16, String) {
    (200, serde_json::json!({ "text": text }).to_string())
}

/// In-process transport that fails a seeded fraction of calls with a
/// transient error and otherwise answers from the prompt. Keeps a per-prompt
/// call count so retry accounting can be checked exactly.
pub struct FaultyTransport {
    rng: Mutex<ChaCha8Rng>,
    pub failure_rate: f64,
    pub calls: Mutex<HashMap<String, u32>>,
    pub failures: AtomicUsize,
}

impl FaultyTransport {
    pub fn new(failure_rate: f64, seed: u64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            failure_rate,
            calls: Mutex::new(HashMap::new()),
            failures: AtomicUsize::new(0),
        }
    }

    pub fn total_calls(&self) -> u32 {
        self.calls.lock().unwrap().values().sum()
    }
}

impl Transport for FaultyTransport {
    fn post(&self, body: &str) -> Result<RawReply, TransportError> {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        let prompt = v["prompt"].as_str().unwrap().to_string();
        *self
            .calls
            .lock()
            .unwrap()
            .entry(prompt.clone())
            .or_default() += 1;
        let roll: f64 = self.rng.lock().unwrap().gen();
        if roll < self.failure_rate {
            self.failures.fetch_add(1, Ordering::SeqCst);
            return if roll < self.failure_rate / 2.0 {
                Err(TransportError::Timeout)
            } else {
                Ok(RawReply {
                    status: 503,
                    body: "overloaded".into(),
                })
            };
        }
        Ok(RawReply {
            status: 200,
            body: serde_json::json!({ "text": format!("Yes. ({} chars)", prompt.len()) })
                .to_string(),
        })
    }
}

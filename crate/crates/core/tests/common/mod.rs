//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Option<Duration>,
}

impl Reply {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Reply { status, body: body.into(), delay: None }
    }

    pub fn delayed(mut self, d: Duration) -> Self {
        self.delay = Some(d);
        self
    }
}

/// A tiny HTTP/1.1 server on a random local port. One request per
/// connection; the handler sees every request in arrival order.
pub struct Stub {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl Stub {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

pub fn serve(handler: impl Fn(&Request) -> Reply + Send + Sync + 'static) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}", listener.local_addr().expect("addr"));
    let hits = Arc::new(AtomicUsize::new(0));
    let handler = Arc::new(handler);
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let handler = handler.clone();
            let counter = counter.clone();
            thread::spawn(move || {
                if let Some(req) = read_request(&stream) {
                    counter.fetch_add(1, Ordering::SeqCst);
                    let reply = handler(&req);
                    if let Some(d) = reply.delay {
                        thread::sleep(d);
                    }
                    write_reply(stream, &reply);
                }
            });
        }
    });
    Stub { url, hits }
}

fn read_request(stream: &TcpStream) -> Option<Request> {
    let mut r = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    r.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        if r.read_line(&mut h).ok()? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let req = Request { method, path, headers, body: String::new() };
    let body = if req.header("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        read_chunked(&mut r)?
    } else {
        let len: usize = req.header("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
        let mut buf = vec![0; len];
        r.read_exact(&mut buf).ok()?;
        buf
    };
    Some(Request { body: String::from_utf8_lossy(&body).into_owned(), ..req })
}

fn read_chunked(r: &mut impl BufRead) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    loop {
        let mut size = String::new();
        r.read_line(&mut size).ok()?;
        let n = usize::from_str_radix(size.trim(), 16).ok()?;
        let mut buf = vec![0; n + 2];
        r.read_exact(&mut buf).ok()?;
        if n == 0 {
            return Some(out);
        }
        out.extend_from_slice(&buf[..n]);
    }
}

fn write_reply(mut stream: TcpStream, reply: &Reply) {
    let head = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reply.body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(reply.body.as_bytes());
    let _ = stream.flush();
}

/// Stands in for the trained scorer service: 200 with a fixed score on
/// `/score`, 400 on malformed bodies, 200 on `/healthz`.
pub fn score_service(score: f64) -> Stub {
    serve(move |req| match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/healthz") => Reply::json(200, r#"{"status":"ok"}"#),
        ("POST", "/score") => match serde_json::from_str::<serde_json::Value>(&req.body) {
            Ok(v) if v["prev"].is_string() && v["cand"].is_string() => Reply::json(200, format!(r#"{{"score":{score}}}"#)),
            _ => Reply::json(400, r#"{"error":"malformed"}"#),
        },
        _ => Reply::json(404, "{}"),
    })
}

/// Independent reimplementation of the mock embedder's bucket hash:
/// SHA-256 over length-framed parts `["bow", token]`, first 8 bytes as a
/// little-endian integer, modulo 256.
pub fn oracle_bucket(token: &str) -> usize {
    let mut h = Sha256::new();
    for p in ["bow", token] {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    (u64::from_le_bytes(d[..8].try_into().unwrap()) % 256) as usize
}

/// Lowercase and drop punctuation; only meant for ASCII fixtures.
pub fn oracle_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn oracle_bag(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 256];
    for t in oracle_tokens(text) {
        v[oracle_bucket(&t)] += 1.0;
    }
    v
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn oracle_text_cosine(a: &str, b: &str) -> f64 {
    oracle_cosine(&oracle_bag(a), &oracle_bag(b))
}

/// Brute-force sentence BLEU: n-grams are listed and counted by linear
/// scan, no hashing, no smoothing.
pub fn oracle_bleu(hyp: &[String], reference: &[String], n: usize) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let grams = |t: &[String], k: usize| -> Vec<Vec<String>> {
        if t.len() < k {
            return Vec::new();
        }
        (0..=t.len() - k).map(|i| t[i..i + k].to_vec()).collect()
    };
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hg = grams(hyp, k);
        let rg = grams(reference, k);
        if hg.is_empty() {
            return 0.0;
        }
        let mut seen: Vec<&Vec<String>> = Vec::new();
        let mut clipped = 0usize;
        for g in &hg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_h = hg.iter().filter(|x| *x == g).count();
            let in_r = rg.iter().filter(|x| *x == g).count();
            clipped += in_h.min(in_r);
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / hg.len() as f64).ln() / n as f64;
    }
    let bp = if hyp.len() >= reference.len() { 1.0 } else { (1.0 - reference.len() as f64 / hyp.len() as f64).exp() };
    bp * log_sum.exp()
}

pub fn persona() -> cci::specification::Persona {
    cci::specification::Persona {
        name: "Hiro".into(),
        version: 0,
        dark_secret: "He burned the letters his brother left behind.".into(),
        family_environment: "Raised by a strict grandmother above a noodle shop.".into(),
        appearance: "Silver hair and a scar across his left palm.".into(),
        speech_tone: "Quiet, clipped, and a little formal.".into(),
        personality: "Patient until cornered, then reckless.".into(),
        significant_events: "Lost his brother in the harbor fire.".into(),
        habits: "Taps the table twice before he answers.".into(),
        relationships: None,
    }
}

/// Runs the built `cci` binary and returns its exit code, stdout and stderr.
pub fn cci(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_cci"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cci");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// `generate --mock` into `dir` with a fixed run id; returns the bundle path.
pub fn mock_generate(dir: &std::path::Path, seed: u64, extra: &[&str]) -> Result<std::path::PathBuf, String> {
    let out = dir.to_str().unwrap();
    let seed = seed.to_string();
    let mut args = vec!["--mock", "--seed", &seed, "generate", "--output", out, "--run-id", "run"];
    args.extend_from_slice(extra);
    let (code, stdout, stderr) = cci(&args);
    if code != 0 {
        return Err(format!("exit {code}: {stderr}"));
    }
    Ok(std::path::PathBuf::from(stdout.trim()))
}

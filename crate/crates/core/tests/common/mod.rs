#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// A request as the stub saw it.
#[derive(Debug, Clone)]
pub struct Seen {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: serde_json::Value,
}

impl Seen {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// One-connection-per-request HTTP server answering from a fixed script.
pub struct Stub {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    handle: Option<JoinHandle<()>>,
}

impl Stub {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = listener.accept().unwrap();
                let req = read_request(&stream);
                log.lock().unwrap().push(req);
                respond(stream, status, &body);
            }
        });
        Self {
            url,
            seen,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }

    pub fn join(mut self) -> Vec<Seen> {
        self.handle.take().unwrap().join().unwrap();
        self.requests()
    }
}

fn read_request(stream: &TcpStream) -> Seen {
    let mut r = BufReader::new(stream);
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        line.clear();
        r.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut body = vec![0; len];
    r.read_exact(&mut body).unwrap();
    Seen {
        path,
        headers,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    }
}

fn respond(mut stream: TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

pub fn chat_ok(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

use sidiff_core::guidance::ANALYSIS_STEP_KEYS;
use sidiff_core::memory::{StoreId, TrajectoryRecord};

/// A valid record for `store` whose text fields derive from `prompt`.
pub fn synthetic_record(store: StoreId, prompt: &str, n: u32) -> TrajectoryRecord {
    let map = |f: &dyn Fn(&str) -> serde_json::Value| {
        let m: serde_json::Map<String, serde_json::Value> =
            ANALYSIS_STEP_KEYS.iter().map(|k| (k.to_string(), f(k))).collect();
        serde_json::Value::Object(m).to_string()
    };
    TrajectoryRecord {
        id: None,
        timestamp: format!("2026-01-01T00:00:{:02}.000Z", n % 60),
        image_index: format!("seed-{n}/final.png"),
        original_prompt: prompt.to_string(),
        refined_prompt: format!("{prompt}, detailed, soft light"),
        evaluation_score: 7.0 + f64::from(n % 20) / 10.0,
        confidence_score: 5.0,
        regeneration_count: n % 3,
        reference_image: (store == StoreId::Edit).then(|| format!("seed-{n}/intermediate_0.png")),
        trajectory_reasoning: format!("synthetic run {n}"),
        step_scores: map(&|_| serde_json::json!(7)),
        successes: map(&|k| serde_json::json!(format!("{k} went well"))),
        pitfalls: map(&|k| serde_json::json!(format!("{k} lost some detail"))),
        overall_rating: 7.0,
        config_data: serde_json::json!({"synthetic": true}).to_string(),
        process_summary: format!("synthetic process {n}"),
    }
}

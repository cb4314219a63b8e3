#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

/// One request seen by the mock endpoint.
#[derive(Clone, Debug)]
pub struct Seen {
    pub authorization: Option<String>,
    pub body: serde_json::Value,
}

impl Seen {
    pub fn system(&self) -> &str {
        self.body["messages"][0]["content"].as_str().unwrap_or("")
    }

    pub fn user(&self) -> &str {
        self.body["messages"][1]["content"].as_str().unwrap_or("")
    }
}

pub type Reply = dyn Fn(&Seen) -> (u16, String) + Send + Sync;

/// Local chat-completions endpoint answering each request with `reply`.
pub struct MockChat {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockChat {
    pub fn start(reply: Box<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = None;
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
                        auth = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let seen = Seen {
                    authorization: auth,
                    body: serde_json::from_slice(&body).unwrap_or_default(),
                };
                let (status, content) = reply(&seen);
                log.lock().unwrap().push(seen);
                let payload = if status == 200 {
                    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
                } else {
                    content
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        Self { url, seen }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

/// True for the yes/no classification request.
pub fn is_determine(s: &Seen) -> bool {
    s.system().contains("respond with yes or no")
}

/// A run small enough to train in seconds.
pub const TINY: &str = r#"
seed = 3

[data.synth]
count = 24
min_frames = 16
max_frames = 24

[rvq]
codebook_size = 16
code_dim = 8
hidden = 8
res_blocks = 1

[rvq_train]
steps = 6
batch = 4
val_every = 3
window = 16

[hct]
d_model = 16
heads = [2, 1, 1]
depths = [1, 1, 1]
codebook_size = 16
max_rel = 64
text_dim = 16

[hct_train]
steps = 6
batch = 4
val_every = 3

[gen]
frames = 20

[eval]
mm_prompts = 2
mm_repeats = 2
gen_samples = 3
"#;

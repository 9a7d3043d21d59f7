#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Minimal HTTP/1.1 chat-completion server. Replies are chosen by the
/// `<title>` of the user message; every request is counted.
pub struct MockServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

fn title_of(body: &serde_json::Value) -> Option<String> {
    let user = body["messages"].as_array()?.iter().find(|m| m["role"] == "user")?["content"].as_str()?;
    let rest = user.split_once("<title>")?.1;
    Some(rest.split_once("</title>")?.0.to_string())
}

fn serve(stream: TcpStream, replies: &HashMap<String, String>, hits: &AtomicUsize) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut out = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let mut length = 0;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h)?;
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body)?;
        hits.fetch_add(1, Ordering::SeqCst);
        let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
        let content = title_of(&request).and_then(|t| replies.get(&t).cloned()).unwrap_or_default();
        let payload = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
        write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        )?;
        out.flush()?;
    }
}

impl MockServer {
    pub fn start(replies: HashMap<String, String>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let url = format!("http://{}", listener.local_addr()?);
        let hits = Arc::new(AtomicUsize::new(0));
        let replies = Arc::new(replies);
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (replies, counter) = (replies.clone(), counter.clone());
                std::thread::spawn(move || serve(stream, &replies, &counter));
            }
        });
        Ok(Self { url, hits })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

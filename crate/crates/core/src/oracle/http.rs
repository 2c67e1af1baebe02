// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bridge reached over HTTP: each protocol message is POSTed as the request
//! body and the reply message is the response body. The handshake is a POST
//! of `{"type":"hello"}`.

use std::time::Duration;

use reqwest::blocking::Client;

use super::{handshake, Bridge, BridgeCapabilities, Message};
use crate::error::{Error, Result};

pub struct HttpBridge {
    client: Client,
    url: String,
    capabilities: BridgeCapabilities,
}

impl HttpBridge {
    pub fn connect(url: &str, timeout: Duration) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(format!("http client: {e}")))?;
        let hello = post(&client, url, r#"{"type":"hello"}"#)?;
        Ok(Self {
            client,
            url: url.to_string(),
            capabilities: handshake(&hello)?,
        })
    }
}

fn post(client: &Client, url: &str, body: &str) -> Result<String> {
    let response = client
        .post(url)
        .header("content-type", "application/json")
        .body(body.to_string())
        .send()
        .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
    let status = response.status();
    let text = response
        .text()
        .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
    if !status.is_success() && !text.contains("\"error\"") {
        return Err(Error::Transport(format!("POST {url}: HTTP {status}")));
    }
    Ok(text)
}

impl Bridge for HttpBridge {
    fn capabilities(&self) -> &BridgeCapabilities {
        &self.capabilities
    }

    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }

    fn exchange(&mut self, requests: &[Message]) -> Result<Vec<Message>> {
        requests
            .iter()
            .map(|req| post(&self.client, &self.url, &req.to_line()).and_then(|t| Message::parse_line(&t)))
            .collect()
    }

    fn exchange_raw(&mut self, line: &str) -> Result<Message> {
        Message::parse_line(&post(&self.client, &self.url, line)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves `n` requests, answering hello with an announcement and anything
    /// else with a fixed score result.
    fn serve(n: usize) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for stream in listener.incoming().take(n) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                let reply = if body.contains("hello") {
                    r#"{"type":"hello","mask_token":"<m>","supports_attention":true,"max_batch":4}"#.to_string()
                } else {
                    r#"{"type":"score_result","id":"s1","logprobs":[-0.5]}"#.to_string()
                };
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    reply.len(),
                    reply
                )
                .unwrap();
            }
        });
        format!("http://{addr}/")
    }

    #[test]
    fn handshake_and_score_over_http() {
        let url = serve(2);
        let mut bridge = HttpBridge::connect(&url, Duration::from_secs(10)).unwrap();
        assert_eq!(bridge.capabilities().max_batch, 4);
        let replies = bridge
            .exchange(&[Message::Score {
                id: "s1".into(),
                input_tokens: vec!["a".into()],
                output_tokens: vec!["b".into()],
            }])
            .unwrap();
        assert_eq!(
            replies[0],
            Message::ScoreResult {
                id: "s1".into(),
                logprobs: vec![-0.5]
            }
        );
    }

    #[test]
    fn unreachable_endpoint() {
        // bind then drop to get a closed port
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = HttpBridge::connect(&format!("http://127.0.0.1:{port}/"), Duration::from_secs(2))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Transport(_)));
    }
}

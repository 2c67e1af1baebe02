// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bridge subprocess speaking JSON-lines over its standard streams.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::{handshake, Bridge, BridgeCapabilities, Message};
use crate::error::{Error, Result};

pub struct StdioBridge {
    command: String,
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    lines: Receiver<std::io::Result<String>>,
    capabilities: BridgeCapabilities,
    timeout: Duration,
}

impl StdioBridge {
    /// Starts `command` through `sh -c` and waits for its announcement.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start bridge {command:?}: {e}")))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take().map(BufWriter::new);

        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("bridge-stdout".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let failed = line.is_err();
                    if tx.send(line).is_err() || failed {
                        break;
                    }
                }
            })
            .map_err(Error::Io)?;

        let mut bridge = Self {
            command: command.to_string(),
            child,
            stdin,
            lines: rx,
            // replaced right below once the announcement arrives
            capabilities: BridgeCapabilities {
                mask_token: String::new(),
                supports_attention: false,
                max_batch: 1,
                supports_generate: false,
            },
            timeout,
        };
        let hello = bridge.read_line()?;
        bridge.capabilities = handshake(&hello)?;
        Ok(bridge)
    }

    fn read_line(&mut self) -> Result<String> {
        loop {
            match self.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => return Ok(line),
                Ok(Err(e)) => return Err(Error::Transport(format!("reading from bridge: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Transport(format!(
                        "bridge {:?} did not answer within {:?}",
                        self.command, self.timeout
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let status = self
                        .child
                        .try_wait()
                        .ok()
                        .flatten()
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| "closed its output".into());
                    return Err(Error::Transport(format!("bridge {:?} exited ({status})", self.command)));
                }
            }
        }
    }

    fn write_lines<'a>(&mut self, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Transport("bridge stdin closed".into()))?;
        let broken = |e: std::io::Error| Error::Transport(format!("writing to bridge: {e}"));
        for line in lines {
            stdin.write_all(line.as_bytes()).map_err(broken)?;
            stdin.write_all(b"\n").map_err(broken)?;
        }
        stdin.flush().map_err(broken)
    }
}

impl Bridge for StdioBridge {
    fn capabilities(&self) -> &BridgeCapabilities {
        &self.capabilities
    }

    fn describe(&self) -> String {
        format!("stdio:{}", self.command)
    }

    fn exchange(&mut self, requests: &[Message]) -> Result<Vec<Message>> {
        let encoded: Vec<String> = requests.iter().map(Message::to_line).collect();
        self.write_lines(encoded.iter().map(String::as_str))?;
        (0..requests.len())
            .map(|_| self.read_line().and_then(|l| Message::parse_line(&l)))
            .collect()
    }

    fn exchange_raw(&mut self, line: &str) -> Result<Message> {
        self.write_lines([line])?;
        let reply = self.read_line()?;
        Message::parse_line(&reply)
    }
}

impl Drop for StdioBridge {
    fn drop(&mut self) {
        // closing stdin is the shutdown signal
        drop(self.stdin.take());
        for _ in 0..20 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HELLO: &str = r#"{"type":"hello","mask_token":"<m>","supports_attention":false,"max_batch":2}"#;

    #[test]
    fn reads_announcement_and_echoes() {
        // replies to every request with a constant score_result for id s1
        let script = format!(
            "echo '{HELLO}'; while read -r line; do echo '{{\"type\":\"score_result\",\"id\":\"s1\",\"logprobs\":[-1.0]}}'; done"
        );
        let mut bridge = StdioBridge::spawn(&script, Duration::from_secs(10)).unwrap();
        assert_eq!(bridge.capabilities().mask_token, "<m>");
        assert_eq!(bridge.capabilities().max_batch, 2);
        let replies = bridge
            .exchange(&[Message::Score {
                id: "s1".into(),
                input_tokens: vec!["a".into()],
                output_tokens: vec!["b".into()],
            }])
            .unwrap();
        assert_eq!(replies[0].kind(), "score_result");
    }

    #[test]
    fn missing_command_is_transport_error() {
        let err = StdioBridge::spawn("exit 3", Duration::from_secs(10)).err().unwrap();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }

    #[test]
    fn bad_announcement_is_protocol_error() {
        let err = StdioBridge::spawn(
            r#"echo '{"type":"hello","supports_attention":true,"max_batch":3}'; sleep 5"#,
            Duration::from_secs(10),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn silent_bridge_times_out() {
        let err = StdioBridge::spawn("sleep 5", Duration::from_millis(200)).err().unwrap();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }
}

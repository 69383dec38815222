//! External models over a newline-delimited JSON protocol on stdio.
//!
//! Request:  `{"id": 7, "image": {"h": 32, "w": 32, "rgb_b64": "..."}}`
//! Response: `{"id": 7, "logits": [0.1, 0.9]}`

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

use super::{Classifier, Prediction};

#[derive(Serialize)]
struct WireImage<'a> {
    h: usize,
    w: usize,
    rgb_b64: &'a str,
}

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    image: WireImage<'a>,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    logits: Vec<f64>,
}

/// One running adapter process. Handles one request at a time.
pub struct AdapterHandle {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    timeout: Duration,
    broken: bool,
}

impl AdapterHandle {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::format("adapter command is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("spawning {program}: {e}")))?;
        let stdout = child.stdout.take().expect("stdout piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            timeout,
            broken: false,
        })
    }

    /// Sends one image and waits for its logits.
    pub fn predict(&mut self, image: &ImageTensor) -> Result<Prediction> {
        if self.broken {
            return Err(Error::Transport("adapter is no longer usable".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let encoded = BASE64.encode(image.data());
        let request = Request {
            id,
            image: WireImage {
                h: image.height(),
                w: image.width(),
                rgb_b64: &encoded,
            },
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Transport("adapter stdin closed".into()))?;
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            self.broken = true;
            return Err(Error::Transport(format!("writing request: {e}")));
        }
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                self.broken = true;
                return Err(Error::Transport(format!("reading response: {e}")));
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                return Err(Error::Transport("adapter exited before responding".into()));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                let _ = self.child.kill();
                return Err(Error::Timeout(self.timeout));
            }
        };
        let response: Response = serde_json::from_str(&reply)
            .map_err(|e| Error::Protocol(format!("malformed response {reply:?}: {e}")))?;
        if response.id != id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {id}",
                response.id
            )));
        }
        if response.logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Protocol("non-finite logits".into()));
        }
        Ok(Prediction {
            logits: response.logits,
        })
    }
}

impl Drop for AdapterHandle {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of adapter processes behind the [`Classifier`] interface.
pub struct AdapterClassifier {
    handles: Vec<Mutex<AdapterHandle>>,
    classes: usize,
}

impl AdapterClassifier {
    pub fn spawn(command: &[String], classes: usize, pool: usize, timeout: Duration) -> Result<Self> {
        let handles = (0..pool.max(1))
            .map(|_| AdapterHandle::spawn(command, timeout).map(Mutex::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { handles, classes })
    }
}

impl Classifier for AdapterClassifier {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn predict(&self, image: &ImageTensor) -> Result<Prediction> {
        let mut guard = self
            .handles
            .iter()
            .find_map(|h| h.try_lock().ok())
            .unwrap_or_else(|| self.handles[0].lock().unwrap());
        let p = guard.predict(image)?;
        if p.logits.len() != self.classes {
            return Err(Error::Protocol(format!(
                "expected {} logits, got {}",
                self.classes,
                p.logits.len()
            )));
        }
        Ok(p)
    }
}

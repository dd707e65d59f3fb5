//! Newline-delimited JSON protocol spoken with external detector processes.
//!
//! ```text
//! engine  -> {"type":"hello","window_size":256,"mpp":0.25,"classes":[...]}
//! adapter -> {"type":"ready","max_batch":8}
//! engine  -> {"type":"infer","id":0,"windows":[{"wid":3,"w":256,"h":256,"rgb_b64":"..."}]}
//! adapter -> {"type":"result","id":0,"detections":[[{"cx":..,"cy":..,"w":..,"h":..,"class":..,"score":..}]]}
//! engine  -> {"type":"shutdown"}
//! ```
//!
//! The hello may carry `window_index`, the path of a JSONL sidecar with one
//! [`WindowIndexEntry`] per window id, for adapters that need to know where
//! a window sits on the slide.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DetectorBackend, DetectorConfig, OracleBackend, WindowInput};
use crate::annotation::AnnotationSet;
use crate::error::{Error, Result};
use crate::slide_io::RasterImage;
use crate::tiler::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        window_size: u32,
        mpp: f64,
        classes: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window_index: Option<String>,
    },
    Ready {
        max_batch: usize,
    },
    Infer {
        id: u64,
        windows: Vec<WireWindow>,
    },
    Result {
        id: u64,
        detections: Vec<Vec<Detection>>,
    },
    Shutdown,
    Error {
        msg: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireWindow {
    pub wid: u64,
    pub w: u32,
    pub h: u32,
    pub rgb_b64: String,
}

impl WireWindow {
    pub fn encode(window: &WindowInput) -> Self {
        Self {
            wid: window.id,
            w: window.image.width(),
            h: window.image.height(),
            rgb_b64: STANDARD.encode(window.image.pixels()),
        }
    }

    pub fn decode(&self) -> Result<RasterImage> {
        let bytes = STANDARD
            .decode(&self.rgb_b64)
            .map_err(|e| protocol_error(format!("window {} has bad base64: {e}", self.wid), &self.rgb_b64))?;
        RasterImage::from_raw(self.w, self.h, bytes)
    }
}

/// Level-0 placement of one window, as written to the sidecar file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowIndexEntry {
    pub wid: u64,
    pub x: f64,
    pub y: f64,
    pub w: u32,
    pub h: u32,
    pub scale: f64,
}

pub fn write_window_index(path: &Path, entries: &[WindowIndexEntry]) -> Result<()> {
    let mut buf = String::new();
    for e in entries {
        buf.push_str(&serde_json::to_string(e)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_window_index(path: &Path) -> Result<HashMap<u64, WindowIndexEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let e: WindowIndexEntry = serde_json::from_str(line)?;
        map.insert(e.wid, e);
    }
    Ok(map)
}

fn protocol_error(message: impl Into<String>, payload: &str) -> Error {
    let message = message.into();
    log::error!("{message}; offending payload: {payload}");
    Error::Protocol {
        message,
        payload: payload.to_string(),
    }
}

fn send<W: Write>(writer: &mut W, msg: &Message) -> Result<()> {
    let mut line = serde_json::to_string(msg)?;
    line.push('\n');
    writer
        .write_all(line.as_bytes())
        .and_then(|_| writer.flush())
        .map_err(|e| Error::Backend {
            windows: Vec::new(),
            message: format!("adapter pipe closed: {e}"),
        })
}

/// Reads one message; `Ok(None)` on end of stream.
fn receive<R: BufRead>(reader: &mut R) -> Result<Option<(Message, String)>> {
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::Backend {
            windows: Vec::new(),
            message: format!("reading from adapter: {e}"),
        })?;
        if n == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    let raw = line.trim_end().to_string();
    match serde_json::from_str::<Message>(&raw) {
        Ok(msg) => Ok(Some((msg, raw))),
        Err(e) => Err(protocol_error(format!("malformed message: {e}"), &raw)),
    }
}

/// Engine side of the protocol over any reader/writer pair.
#[derive(Debug)]
pub struct ProtocolSession<R, W> {
    reader: R,
    writer: W,
    next_id: u64,
    max_batch: usize,
}

impl<R: BufRead, W: Write> ProtocolSession<R, W> {
    /// Sends hello and waits for ready.
    pub fn handshake(mut reader: R, mut writer: W, cfg: &DetectorConfig, window_index: Option<&Path>) -> Result<Self> {
        send(
            &mut writer,
            &Message::Hello {
                window_size: cfg.window_size,
                mpp: cfg.mpp,
                classes: cfg.class_names.clone(),
                window_index: window_index.map(|p| p.to_string_lossy().into_owned()),
            },
        )?;
        match receive(&mut reader)? {
            Some((Message::Ready { max_batch }, raw)) => {
                if max_batch == 0 {
                    return Err(protocol_error("adapter declared max_batch 0", &raw));
                }
                Ok(Self {
                    reader,
                    writer,
                    next_id: 0,
                    max_batch,
                })
            }
            Some((Message::Error { msg }, _)) => Err(Error::Backend {
                windows: Vec::new(),
                message: msg,
            }),
            Some((_, raw)) => Err(protocol_error("expected ready", &raw)),
            None => Err(protocol_error("adapter closed the stream before ready", "")),
        }
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    pub fn infer(&mut self, batch: &[WindowInput]) -> Result<Vec<Vec<Detection>>> {
        let id = self.next_id;
        self.next_id += 1;
        let ids = || batch.iter().map(|w| w.id).collect::<Vec<_>>();
        send(
            &mut self.writer,
            &Message::Infer {
                id,
                windows: batch.iter().map(WireWindow::encode).collect(),
            },
        )?;
        match receive(&mut self.reader)? {
            Some((Message::Result { id: got, detections }, raw)) => {
                if got != id {
                    return Err(protocol_error(format!("result id {got} does not answer request {id}"), &raw));
                }
                if detections.len() != batch.len() {
                    return Err(protocol_error(
                        format!("result carries {} lists for {} windows", detections.len(), batch.len()),
                        &raw,
                    ));
                }
                Ok(detections)
            }
            Some((Message::Error { msg }, _)) => Err(Error::Backend {
                windows: ids(),
                message: msg,
            }),
            Some((_, raw)) => Err(protocol_error(format!("expected result for request {id}"), &raw)),
            None => Err(Error::Backend {
                windows: ids(),
                message: "adapter exited mid-request".into(),
            }),
        }
    }

    pub fn shutdown(&mut self) -> Result<()> {
        send(&mut self.writer, &Message::Shutdown)
    }

    pub fn into_parts(self) -> (R, W) {
        (self.reader, self.writer)
    }
}

/// External detector running as a child process.
pub struct ProcessAdapter {
    child: Child,
    session: Option<ProtocolSession<BufReader<ChildStdout>, ChildStdin>>,
}

impl ProcessAdapter {
    /// Spawns `command[0]` with the remaining arguments and performs the
    /// handshake.
    pub fn spawn(command: &[String], cfg: &DetectorConfig, window_index: Option<&Path>) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::param("external backend needs a command"))?;
        let fail = |message: String| Error::Backend {
            windows: Vec::new(),
            message,
        };
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| fail("no stdin pipe".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| fail("no stdout pipe".into()))?;
        match ProtocolSession::handshake(BufReader::new(stdout), stdin, cfg, window_index) {
            Ok(session) => Ok(Self {
                child,
                session: Some(session),
            }),
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }
}

impl DetectorBackend for ProcessAdapter {
    fn name(&self) -> &str {
        "external"
    }

    fn detect_batch(&mut self, batch: &[WindowInput], _cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>> {
        match self.session.as_mut() {
            Some(s) => s.infer(batch),
            None => Err(Error::Backend {
                windows: batch.iter().map(|w| w.id).collect(),
                message: "adapter already shut down".into(),
            }),
        }
    }

    fn max_batch(&self) -> usize {
        self.session.as_ref().map_or(1, |s| s.max_batch())
    }
}

impl Drop for ProcessAdapter {
    fn drop(&mut self) {
        if let Some(mut s) = self.session.take() {
            let _ = s.shutdown();
        }
        let _ = self.child.wait();
    }
}

/// Adapter side serving ground-truth annotations, the reference behaviour
/// any conforming adapter reproduces.
#[derive(Debug, Clone)]
pub struct AnnotationServer {
    oracle: OracleBackend,
    max_batch: usize,
    latency: Duration,
    /// Directory relative sidecar paths are resolved against.
    pub base_dir: PathBuf,
}

impl AnnotationServer {
    pub fn new(annotations: &AnnotationSet, max_batch: usize) -> Self {
        Self {
            oracle: OracleBackend::new(annotations),
            max_batch: max_batch.max(1),
            latency: Duration::ZERO,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Serves one session until shutdown or end of input.
    pub fn serve<R: BufRead, W: Write>(&self, mut reader: R, mut writer: W) -> Result<()> {
        let reply_error = |writer: &mut W, err: Error| -> Result<()> {
            let _ = send(writer, &Message::Error { msg: err.to_string() });
            Err(err)
        };
        let index = match receive(&mut reader) {
            Ok(Some((Message::Hello { window_index, .. }, _))) => match window_index {
                Some(p) => match read_window_index(&self.base_dir.join(p)) {
                    Ok(map) => map,
                    Err(e) => return reply_error(&mut writer, e),
                },
                None => HashMap::new(),
            },
            Ok(Some((_, raw))) => return reply_error(&mut writer, protocol_error("expected hello", &raw)),
            Ok(None) => return Ok(()),
            Err(e) => return reply_error(&mut writer, e),
        };
        send(&mut writer, &Message::Ready { max_batch: self.max_batch })?;
        let cfg = DetectorConfig::default();
        let mut oracle = self.oracle.clone();
        loop {
            let (msg, raw) = match receive(&mut reader) {
                Ok(Some(m)) => m,
                Ok(None) => return Ok(()),
                Err(e) => return reply_error(&mut writer, e),
            };
            match msg {
                Message::Shutdown => return Ok(()),
                Message::Infer { id, windows } => {
                    if windows.len() > self.max_batch {
                        return reply_error(&mut writer, protocol_error("batch exceeds max_batch", &raw));
                    }
                    let mut inputs = Vec::with_capacity(windows.len());
                    for w in &windows {
                        let image = match w.decode() {
                            Ok(img) => img,
                            Err(e) => return reply_error(&mut writer, e),
                        };
                        let (origin, scale) = index.get(&w.wid).map_or(((0.0, 0.0), 1.0), |e| ((e.x, e.y), e.scale));
                        inputs.push(WindowInput {
                            id: w.wid,
                            origin,
                            scale,
                            image,
                        });
                    }
                    if !self.latency.is_zero() {
                        std::thread::sleep(self.latency);
                    }
                    let detections = oracle.detect_batch(&inputs, &cfg)?;
                    send(&mut writer, &Message::Result { id, detections })?;
                }
                _ => return reply_error(&mut writer, protocol_error("unexpected message", &raw)),
            }
        }
    }
}

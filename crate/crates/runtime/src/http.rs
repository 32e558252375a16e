//! Blocking client for the container engine HTTP API.
//!
//! One connection per request with `Connection: close`; bodies are read to EOF.

use std::fmt;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use orch_core::registry::ImageReference;
use serde_json::{json, Value};
use url::form_urlencoded;

use crate::engine::{BackendKind, ContainerConfig, ContainerEngine, WaitOutcome, OWNER_LABEL};
use crate::RuntimeError;

pub const ENDPOINT_ENV: &str = "ORCH_ENGINE_ENDPOINT";
pub const API_VERSION: &str = "v1.41";
const DEFAULT_SOCKET: &str = "/var/run/docker.sock";
const REQUEST_TIMEOUT: Duration = Duration::from_secs(300);
const STOP_GRACE_SECONDS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Unix(PathBuf),
    Tcp(String),
}

impl Default for Endpoint {
    fn default() -> Self {
        Endpoint::Unix(PathBuf::from(DEFAULT_SOCKET))
    }
}

impl Endpoint {
    /// `ORCH_ENGINE_ENDPOINT` when set, else the default local socket.
    pub fn from_env() -> Result<Self, RuntimeError> {
        match std::env::var(ENDPOINT_ENV) {
            Ok(v) if !v.trim().is_empty() => v.trim().parse(),
            _ => Ok(Endpoint::default()),
        }
    }
}

impl FromStr for Endpoint {
    type Err = RuntimeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(p) = s.strip_prefix("unix://") {
            return Ok(Endpoint::Unix(PathBuf::from(p)));
        }
        for scheme in ["tcp://", "http://"] {
            if let Some(rest) = s.strip_prefix(scheme) {
                let host = rest.trim_end_matches('/');
                if host.is_empty() || !host.contains(':') {
                    return Err(RuntimeError::InvalidJob(format!("engine endpoint {s} needs host:port")));
                }
                return Ok(Endpoint::Tcp(host.to_string()));
            }
        }
        if s.starts_with('/') {
            return Ok(Endpoint::Unix(PathBuf::from(s)));
        }
        Err(RuntimeError::InvalidJob(format!(
            "unsupported engine endpoint {s}; use unix:///path or tcp://host:port"
        )))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Unix(p) => write!(f, "unix://{}", p.display()),
            Endpoint::Tcp(h) => write!(f, "tcp://{h}"),
        }
    }
}

enum Conn {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Conn {
    fn set_read_timeout(&self, t: Duration) -> io::Result<()> {
        match self {
            Conn::Unix(s) => s.set_read_timeout(Some(t)),
            Conn::Tcp(s) => s.set_read_timeout(Some(t)),
        }
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Unix(s) => s.read(buf),
            Conn::Tcp(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Unix(s) => s.write(buf),
            Conn::Tcp(s) => s.write(buf),
        }
    }
    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Unix(s) => s.flush(),
            Conn::Tcp(s) => s.flush(),
        }
    }
}

#[derive(Debug)]
struct Response {
    status: u16,
    body: Vec<u8>,
}

impl Response {
    fn json(&self) -> Result<Value, RuntimeError> {
        serde_json::from_slice(&self.body).map_err(|e| RuntimeError::Engine(format!("invalid JSON from engine: {e}")))
    }

    fn message(&self) -> String {
        serde_json::from_slice::<Value>(&self.body)
            .ok()
            .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| String::from_utf8_lossy(&self.body).trim().to_string())
    }

    fn error(&self, what: &str) -> RuntimeError {
        RuntimeError::Engine(format!("{what}: HTTP {} {}", self.status, self.message()))
    }
}

enum Failure {
    Deadline,
    Error(RuntimeError),
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        Failure::Error(e)
    }
}

fn parse_response(raw: &[u8]) -> Result<Response, RuntimeError> {
    let mut headers = [httparse::EMPTY_HEADER; 64];
    let mut resp = httparse::Response::new(&mut headers);
    let head_len = match resp.parse(raw) {
        Ok(httparse::Status::Complete(n)) => n,
        Ok(httparse::Status::Partial) => return Err(RuntimeError::Engine("truncated response head".into())),
        Err(e) => return Err(RuntimeError::Engine(format!("malformed response: {e}"))),
    };
    let status = resp.code.unwrap_or(0);
    let header = |name: &str| {
        resp.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .map(|h| String::from_utf8_lossy(h.value).trim().to_ascii_lowercase())
    };
    let mut body = &raw[head_len..];
    if header("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
        return Ok(Response {
            status,
            body: dechunk(body)?,
        });
    }
    if let Some(n) = header("content-length").and_then(|v| v.parse::<usize>().ok()) {
        if body.len() < n {
            return Err(RuntimeError::Engine(format!("body truncated at {} of {n} bytes", body.len())));
        }
        body = &body[..n];
    }
    Ok(Response {
        status,
        body: body.to_vec(),
    })
}

fn dechunk(mut rest: &[u8]) -> Result<Vec<u8>, RuntimeError> {
    let mut out = Vec::new();
    loop {
        let (used, size) = match httparse::parse_chunk_size(rest) {
            Ok(httparse::Status::Complete(v)) => v,
            _ => return Err(RuntimeError::Engine("malformed chunked body".into())),
        };
        let size = usize::try_from(size).map_err(|_| RuntimeError::Engine("chunk too large".into()))?;
        rest = &rest[used..];
        if size == 0 {
            return Ok(out);
        }
        if rest.len() < size + 2 {
            return Err(RuntimeError::Engine("truncated chunk".into()));
        }
        out.extend_from_slice(&rest[..size]);
        rest = &rest[size + 2..];
    }
}

/// Splits the multiplexed log stream; raw bytes pass through for TTY containers.
pub fn demux_logs(body: &[u8]) -> Vec<u8> {
    let framed = body.len() >= 8 && body[0] <= 2 && body[1..4] == [0, 0, 0];
    if !framed {
        return body.to_vec();
    }
    let mut out = Vec::with_capacity(body.len());
    let mut rest = body;
    while rest.len() >= 8 {
        let n = u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]) as usize;
        let end = (8 + n).min(rest.len());
        out.extend_from_slice(&rest[8..end]);
        rest = &rest[end..];
    }
    out
}

fn query(pairs: &[(&str, &str)]) -> String {
    let mut s = form_urlencoded::Serializer::new(String::new());
    for (k, v) in pairs {
        s.append_pair(k, v);
    }
    s.finish()
}

#[derive(Debug, Clone)]
pub struct HttpEngine {
    endpoint: Endpoint,
}

impl HttpEngine {
    pub fn new(endpoint: Endpoint) -> Self {
        HttpEngine { endpoint }
    }

    pub fn from_env() -> Result<Self, RuntimeError> {
        Ok(Self::new(Endpoint::from_env()?))
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn connect(&self) -> Result<Conn, RuntimeError> {
        let unreachable = |e: io::Error| RuntimeError::EngineUnreachable(format!("{}: {e}", self.endpoint));
        Ok(match &self.endpoint {
            Endpoint::Unix(p) => Conn::Unix(UnixStream::connect(p).map_err(unreachable)?),
            Endpoint::Tcp(h) => Conn::Tcp(TcpStream::connect(h).map_err(unreachable)?),
        })
    }

    fn exchange(&self, method: &str, path: &str, body: Option<&Value>, deadline: Instant) -> Result<Response, Failure> {
        let mut conn = self.connect()?;
        let payload = body.map(|b| b.to_string()).unwrap_or_default();
        let mut head = format!(
            "{method} /{API_VERSION}{path} HTTP/1.1\r\nHost: localhost\r\nUser-Agent: orch/{}\r\nConnection: close\r\n",
            env!("CARGO_PKG_VERSION")
        );
        if body.is_some() {
            head.push_str("Content-Type: application/json\r\n");
        }
        head.push_str(&format!("Content-Length: {}\r\n\r\n", payload.len()));
        let io_err = |e: io::Error| Failure::Error(RuntimeError::EngineUnreachable(format!("{}: {e}", self.endpoint)));
        conn.write_all(head.as_bytes()).map_err(io_err)?;
        conn.write_all(payload.as_bytes()).map_err(io_err)?;
        conn.flush().map_err(io_err)?;

        let mut raw = Vec::new();
        let mut buf = [0u8; 16 * 1024];
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Failure::Deadline);
            }
            conn.set_read_timeout(left).map_err(io_err)?;
            match conn.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => raw.extend_from_slice(&buf[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(Failure::Deadline)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(io_err(e)),
            }
        }
        Ok(parse_response(&raw)?)
    }

    fn request(&self, method: &str, path: &str, body: Option<&Value>) -> Result<Response, RuntimeError> {
        match self.exchange(method, path, body, Instant::now() + REQUEST_TIMEOUT) {
            Ok(r) => Ok(r),
            Err(Failure::Deadline) => Err(RuntimeError::Engine(format!("{method} {path}: no response within {REQUEST_TIMEOUT:?}"))),
            Err(Failure::Error(e)) => Err(e),
        }
    }

    fn create_body(config: &ContainerConfig) -> Value {
        let env: Vec<String> = config.env.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let binds: Vec<String> = config
            .mounts
            .iter()
            .map(|m| format!("{}:{}:{}", m.host.display(), m.container, if m.read_only { "ro" } else { "rw" }))
            .collect();
        let mut host = json!({
            "Binds": binds,
            "NetworkMode": "none",
            "AutoRemove": false,
        });
        if config.shm_bytes > 0 {
            host["ShmSize"] = json!(config.shm_bytes);
        }
        if let Some(c) = config.cpu_limit {
            host["NanoCpus"] = json!((c * 1e9).round() as i64);
        }
        if config.gpu {
            host["DeviceRequests"] = json!([{ "Driver": "", "Count": -1, "Capabilities": [["gpu"]] }]);
        }
        json!({
            "Image": config.image.to_string(),
            "Env": env,
            "Labels": config.labels,
            "HostConfig": host,
        })
    }
}

impl ContainerEngine for HttpEngine {
    fn kind(&self) -> BackendKind {
        BackendKind::RealEngine
    }

    fn ping(&self) -> Result<(), RuntimeError> {
        let r = self.request("GET", "/_ping", None)?;
        if r.status == 200 {
            Ok(())
        } else {
            Err(RuntimeError::EngineUnreachable(format!("ping returned HTTP {}", r.status)))
        }
    }

    fn image_digests(&self, image: &ImageReference) -> Result<Option<Vec<String>>, RuntimeError> {
        let r = self.request("GET", &format!("/images/{image}/json"), None)?;
        match r.status {
            200 => {
                let v = r.json()?;
                let digests = v["RepoDigests"]
                    .as_array()
                    .map(|a| {
                        a.iter()
                            .filter_map(Value::as_str)
                            .filter_map(|s| s.split_once('@').map(|(_, d)| d.to_string()))
                            .collect()
                    })
                    .unwrap_or_default();
                Ok(Some(digests))
            }
            404 => Ok(None),
            _ => Err(r.error("image inspect")),
        }
    }

    fn pull(&self, image: &ImageReference) -> Result<(), RuntimeError> {
        let (repo, tag) = image.repository_and_tag();
        let tag = image.digest.as_deref().unwrap_or(tag);
        let r = self.request("POST", &format!("/images/create?{}", query(&[("fromImage", repo), ("tag", tag)])), None)?;
        if r.status == 404 {
            return Err(RuntimeError::ImageNotFound(format!("{image}: {}", r.message())));
        }
        if r.status != 200 {
            return Err(r.error("image pull"));
        }
        // progress stream reports failures inline
        for line in r.body.split(|&b| b == b'\n') {
            if let Ok(v) = serde_json::from_slice::<Value>(line) {
                if let Some(err) = v.get("error").and_then(Value::as_str) {
                    let lower = err.to_ascii_lowercase();
                    return Err(if ["not found", "manifest unknown", "pull access denied"].iter().any(|k| lower.contains(k)) {
                        RuntimeError::ImageNotFound(format!("{image}: {err}"))
                    } else {
                        RuntimeError::Engine(format!("pull {image}: {err}"))
                    });
                }
            }
        }
        Ok(())
    }

    fn create(&self, config: &ContainerConfig) -> Result<String, RuntimeError> {
        let r = self.request("POST", "/containers/create", Some(&Self::create_body(config)))?;
        match r.status {
            201 => r.json()?["Id"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| RuntimeError::Engine("create response without Id".into())),
            404 => Err(RuntimeError::ImageNotFound(format!("{}: {}", config.image, r.message()))),
            400 if r.message().to_ascii_lowercase().contains("mount") => Err(RuntimeError::MountFailure(r.message())),
            _ => Err(r.error("container create")),
        }
    }

    fn start(&self, id: &str) -> Result<(), RuntimeError> {
        let r = self.request("POST", &format!("/containers/{id}/start"), None)?;
        match r.status {
            204 | 304 => Ok(()),
            _ if r.message().to_ascii_lowercase().contains("mount") => Err(RuntimeError::MountFailure(r.message())),
            _ => Err(r.error("container start")),
        }
    }

    fn wait(&self, id: &str, timeout: Duration) -> Result<WaitOutcome, RuntimeError> {
        let path = format!("/containers/{id}/wait?condition=not-running");
        match self.exchange("POST", &path, None, Instant::now() + timeout) {
            Err(Failure::Deadline) => Ok(WaitOutcome::TimedOut { elapsed: None }),
            Err(Failure::Error(e)) => Err(e),
            Ok(r) if r.status == 200 => {
                let v = r.json()?;
                let code = v["StatusCode"]
                    .as_i64()
                    .ok_or_else(|| RuntimeError::Engine("wait response without StatusCode".into()))?;
                Ok(WaitOutcome::Exited { code, elapsed: None })
            }
            Ok(r) => Err(r.error("container wait")),
        }
    }

    fn stop(&self, id: &str) -> Result<(), RuntimeError> {
        let r = self.request("POST", &format!("/containers/{id}/stop?t={STOP_GRACE_SECONDS}"), None)?;
        match r.status {
            204 | 304 | 404 => Ok(()),
            _ => Err(r.error("container stop")),
        }
    }

    fn logs(&self, id: &str) -> Result<Vec<u8>, RuntimeError> {
        let r = self.request("GET", &format!("/containers/{id}/logs?stdout=1&stderr=1"), None)?;
        if r.status != 200 {
            return Err(r.error("container logs"));
        }
        Ok(demux_logs(&r.body))
    }

    fn remove(&self, id: &str) -> Result<(), RuntimeError> {
        let r = self.request("DELETE", &format!("/containers/{id}?force=1&v=1"), None)?;
        match r.status {
            204 | 404 => Ok(()),
            _ => Err(r.error("container remove")),
        }
    }

    fn list_owned(&self, owner: &str) -> Result<Vec<String>, RuntimeError> {
        let filters = json!({ "label": [format!("{OWNER_LABEL}={owner}")] }).to_string();
        let r = self.request("GET", &format!("/containers/json?{}", query(&[("all", "1"), ("filters", &filters)])), None)?;
        if r.status != 200 {
            return Err(r.error("container list"));
        }
        Ok(r.json()?
            .as_array()
            .map(|a| a.iter().filter_map(|c| c["Id"].as_str().map(str::to_string)).collect())
            .unwrap_or_default())
    }

    fn supports_gpu(&self) -> Result<bool, RuntimeError> {
        let r = self.request("GET", "/info", None)?;
        if r.status != 200 {
            return Err(r.error("engine info"));
        }
        let v = r.json()?;
        Ok(v["Runtimes"].as_object().is_some_and(|m| m.contains_key("nvidia")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!("unix:///run/x.sock".parse::<Endpoint>().unwrap(), Endpoint::Unix("/run/x.sock".into()));
        assert_eq!("tcp://127.0.0.1:2375".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:2375".into()));
        assert_eq!("http://h:1/".parse::<Endpoint>().unwrap(), Endpoint::Tcp("h:1".into()));
        assert_eq!("/a.sock".parse::<Endpoint>().unwrap(), Endpoint::Unix("/a.sock".into()));
        assert!("ftp://x".parse::<Endpoint>().is_err());
        assert!("tcp://nohost".parse::<Endpoint>().is_err());
    }

    #[test]
    fn chunked_and_length_bodies() {
        let raw = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n4\r\nabcd\r\n3\r\nefg\r\n0\r\n\r\n";
        let r = parse_response(raw).unwrap();
        assert_eq!(r.status, 200);
        assert_eq!(r.body, b"abcdefg");
        let raw = b"HTTP/1.1 404 Not Found\r\nContent-Length: 2\r\n\r\n{}trailing";
        let r = parse_response(raw).unwrap();
        assert_eq!((r.status, r.body.as_slice()), (404, &b"{}"[..]));
        assert!(parse_response(b"HTTP/1.1 200 OK\r\nContent-Length: 9\r\n\r\nab").is_err());
    }

    #[test]
    fn log_frames() {
        let mut body = vec![1, 0, 0, 0, 0, 0, 0, 3];
        body.extend_from_slice(b"out");
        body.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 4]);
        body.extend_from_slice(b"err!");
        assert_eq!(demux_logs(&body), b"outerr!");
        assert_eq!(demux_logs(b"plain tty text"), b"plain tty text");
    }
}

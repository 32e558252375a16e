use std::io::{Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use orch_core::registry::ImageReference;
use orch_runtime::{pull_image, run_job, ContainerEngine, Endpoint, HttpEngine, JobSpec, JobStatus, RuntimeError};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Request {
    method: String,
    path: String,
    body: String,
}

struct Reply {
    status: u16,
    body: Vec<u8>,
    chunked: bool,
    delay: Duration,
}

fn reply(status: u16, body: impl Into<Vec<u8>>) -> Reply {
    Reply {
        status,
        body: body.into(),
        chunked: false,
        delay: Duration::ZERO,
    }
}

type Handler = dyn Fn(&Request) -> Reply + Send + Sync;

/// Engine stand-in on a unix socket; records every request.
struct FakeEngine {
    _dir: tempfile::TempDir,
    socket: PathBuf,
    log: Arc<Mutex<Vec<Request>>>,
}

impl FakeEngine {
    fn start(handler: impl Fn(&Request) -> Reply + Send + Sync + 'static) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let socket = dir.path().join("engine.sock");
        let listener = UnixListener::bind(&socket).unwrap();
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let l = log.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (h, l) = (handler.clone(), l.clone());
                thread::spawn(move || serve(stream, &*h, &l));
            }
        });
        FakeEngine {
            _dir: dir,
            socket,
            log,
        }
    }

    fn engine(&self) -> HttpEngine {
        HttpEngine::new(Endpoint::Unix(self.socket.clone()))
    }

    fn requests(&self) -> Vec<Request> {
        self.log.lock().unwrap().clone()
    }

    fn lines(&self) -> Vec<String> {
        self.requests().iter().map(|r| format!("{} {}", r.method, r.path)).collect()
    }
}

fn serve(mut stream: UnixStream, handler: &Handler, log: &Mutex<Vec<Request>>) {
    let mut raw = Vec::new();
    let mut buf = [0u8; 4096];
    let head_end = loop {
        let n = stream.read(&mut buf).unwrap();
        if n == 0 {
            return;
        }
        raw.extend_from_slice(&buf[..n]);
        if let Some(p) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
            break p + 4;
        }
    };
    let head = String::from_utf8_lossy(&raw[..head_end]).into_owned();
    let len: usize = head
        .lines()
        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
        .unwrap_or(0);
    while raw.len() < head_end + len {
        let n = stream.read(&mut buf).unwrap();
        raw.extend_from_slice(&buf[..n]);
    }
    let mut first = head.lines().next().unwrap().split(' ');
    let req = Request {
        method: first.next().unwrap().to_string(),
        path: first.next().unwrap().to_string(),
        body: String::from_utf8_lossy(&raw[head_end..head_end + len]).into_owned(),
    };
    log.lock().unwrap().push(req.clone());
    let r = handler(&req);
    thread::sleep(r.delay);
    let mut out = format!("HTTP/1.1 {} X\r\nConnection: close\r\n", r.status).into_bytes();
    if r.chunked {
        out.extend_from_slice(b"Transfer-Encoding: chunked\r\n\r\n");
        for c in r.body.chunks(5) {
            out.extend_from_slice(format!("{:x}\r\n", c.len()).as_bytes());
            out.extend_from_slice(c);
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"0\r\n\r\n");
    } else {
        out.extend_from_slice(format!("Content-Length: {}\r\n\r\n", r.body.len()).as_bytes());
        out.extend_from_slice(&r.body);
    }
    let _ = stream.write_all(&out);
}

fn framed(stream: u8, text: &str) -> Vec<u8> {
    let mut v = vec![stream, 0, 0, 0];
    v.extend_from_slice(&(text.len() as u32).to_be_bytes());
    v.extend_from_slice(text.as_bytes());
    v
}

fn lifecycle(wait: Reply) -> impl Fn(&Request) -> Reply + Send + Sync + 'static {
    let wait = Mutex::new(Some(wait));
    move |r: &Request| match (r.method.as_str(), r.path.as_str()) {
        ("GET", "/v1.41/_ping") => reply(200, "OK"),
        ("GET", "/v1.41/info") => reply(200, r#"{"Runtimes": {"runc": {}}}"#),
        ("POST", "/v1.41/containers/create") => reply(201, r#"{"Id": "c0ffee", "Warnings": []}"#),
        ("POST", "/v1.41/containers/c0ffee/start") => reply(204, ""),
        ("POST", "/v1.41/containers/c0ffee/wait?condition=not-running") => wait.lock().unwrap().take().unwrap(),
        ("POST", "/v1.41/containers/c0ffee/stop?t=10") => reply(204, ""),
        ("GET", "/v1.41/containers/c0ffee/logs?stdout=1&stderr=1") => {
            let mut body = framed(1, "hello ");
            body.extend(framed(2, "CUDA OOM"));
            Reply {
                chunked: true,
                ..reply(200, body)
            }
        }
        ("DELETE", "/v1.41/containers/c0ffee?force=1&v=1") => reply(204, ""),
        _ => reply(500, format!(r#"{{"message": "unexpected {} {}"}}"#, r.method, r.path)),
    }
}

fn job(out: &tempfile::TempDir) -> JobSpec {
    let img = ImageReference::parse(&format!("brats/x:1@sha256:{}", "e".repeat(64))).unwrap();
    let mut s = JobSpec::new("j1", img, out.path().join("in"), out.path().join("out")).with_env("SUBJECT_ID", "s1");
    s.shm_bytes = 1 << 30;
    s.cpu_limit = Some(2.0);
    std::fs::create_dir_all(&s.input_mount).unwrap();
    std::fs::create_dir_all(&s.output_mount).unwrap();
    s
}

#[test]
fn full_lifecycle_over_unix_socket() {
    let fake = FakeEngine::start(lifecycle(Reply {
        chunked: true,
        ..reply(200, r#"{"StatusCode": 3, "Error": null}"#)
    }));
    let dir = tempfile::tempdir().unwrap();
    let s = job(&dir);
    std::fs::write(s.output_mount.join("seg.nii.gz"), b"x").unwrap();
    let r = run_job(&fake.engine(), &s, "owner-1").unwrap();
    assert_eq!(r.status, JobStatus::NonzeroExit);
    assert_eq!(r.exit_code, Some(3));
    assert_eq!(r.log_excerpt, "hello CUDA OOM");
    assert_eq!(r.produced_files, vec!["seg.nii.gz"]);
    assert_eq!(
        fake.lines(),
        vec![
            "POST /v1.41/containers/create",
            "POST /v1.41/containers/c0ffee/start",
            "POST /v1.41/containers/c0ffee/wait?condition=not-running",
            "GET /v1.41/containers/c0ffee/logs?stdout=1&stderr=1",
            "DELETE /v1.41/containers/c0ffee?force=1&v=1",
        ]
    );
    let create: Value = serde_json::from_str(&fake.requests()[0].body).unwrap();
    assert_eq!(create["Image"], format!("brats/x:1@sha256:{}", "e".repeat(64)));
    assert_eq!(create["Env"][0], "SUBJECT_ID=s1");
    assert_eq!(create["Labels"]["org.brats-orch.owner"], "owner-1");
    let binds = create["HostConfig"]["Binds"].as_array().unwrap();
    assert_eq!(binds[0], format!("{}:/mlcube_io0:ro", s.input_mount.display()));
    assert_eq!(binds[1], format!("{}:/mlcube_io1:rw", s.output_mount.display()));
    assert_eq!(create["HostConfig"]["ShmSize"], 1u64 << 30);
    assert_eq!(create["HostConfig"]["NanoCpus"], 2_000_000_000i64);
    assert!(create["HostConfig"].get("DeviceRequests").is_none());
}

#[test]
fn deadline_stops_then_removes() {
    let fake = FakeEngine::start(lifecycle(Reply {
        delay: Duration::from_secs(4),
        ..reply(200, r#"{"StatusCode": 0}"#)
    }));
    let dir = tempfile::tempdir().unwrap();
    let s = job(&dir).with_timeout(1);
    let r = run_job(&fake.engine(), &s, "o").unwrap();
    assert_eq!(r.status, JobStatus::TimedOut);
    assert!(r.duration_seconds >= 1.0 && r.duration_seconds < 3.5, "{}", r.duration_seconds);
    let lines = fake.lines();
    let stop = lines.iter().position(|l| l.contains("/stop")).unwrap();
    let delete = lines.iter().position(|l| l.starts_with("DELETE")).unwrap();
    assert!(stop < delete);
}

#[test]
fn gpu_probe_and_unreachable() {
    let fake = FakeEngine::start(lifecycle(reply(200, "{}")));
    let dir = tempfile::tempdir().unwrap();
    let mut s = job(&dir);
    s.gpu = true;
    assert!(matches!(run_job(&fake.engine(), &s, "o"), Err(RuntimeError::GpuUnavailable(_))));
    assert_eq!(fake.lines(), vec!["GET /v1.41/info"]);

    let gone = HttpEngine::new(Endpoint::Unix(dir.path().join("absent.sock")));
    assert!(matches!(gone.ping(), Err(RuntimeError::EngineUnreachable(_))));
    assert!(matches!(run_job(&gone, &job(&dir), "o"), Err(RuntimeError::EngineUnreachable(_))));
}

#[test]
fn pull_inspects_then_pulls_and_verifies() {
    let digest = format!("sha256:{}", "e".repeat(64));
    let pulled = Arc::new(AtomicUsize::new(0));
    let p = pulled.clone();
    let d = digest.clone();
    let fake = FakeEngine::start(move |r: &Request| {
        if r.path == "/v1.41/_ping" {
            return reply(200, "OK");
        }
        if r.path.starts_with("/v1.41/images/create") {
            p.fetch_add(1, Ordering::SeqCst);
            let body = if r.path.contains("missing") {
                r#"{"status":"Pulling"}
{"error":"manifest unknown: manifest unknown"}"#
            } else {
                r#"{"status":"Pulling"}
{"status":"Digest: ok"}"#
            };
            return Reply {
                chunked: true,
                ..reply(200, body)
            };
        }
        if r.path.starts_with("/v1.41/images/") && r.path.ends_with("/json") {
            if p.load(Ordering::SeqCst) == 0 || r.path.contains("missing") {
                return reply(404, r#"{"message": "No such image"}"#);
            }
            return reply(200, format!(r#"{{"Id": "sha256:1", "RepoDigests": ["brats/x@{d}"]}}"#));
        }
        reply(500, "{}")
    });
    let e = fake.engine();
    let img = ImageReference::parse(&format!("brats/x:1@{digest}")).unwrap();
    pull_image(&e, &img).unwrap();
    assert_eq!(pulled.load(Ordering::SeqCst), 1);
    // present locally: no second pull
    pull_image(&e, &img).unwrap();
    assert_eq!(pulled.load(Ordering::SeqCst), 1);
    let create = fake.lines().into_iter().find(|l| l.contains("images/create")).unwrap();
    assert!(create.contains("fromImage=brats%2Fx"), "{create}");
    assert!(create.contains(&format!("tag=sha256%3A{}", "e".repeat(64))), "{create}");

    let wrong = ImageReference::parse(&format!("brats/x:1@sha256:{}", "f".repeat(64))).unwrap();
    assert!(matches!(pull_image(&e, &wrong), Err(RuntimeError::DigestMismatch { .. })));
    let missing = ImageReference::parse("brats/missing:1").unwrap();
    assert!(matches!(pull_image(&e, &missing), Err(RuntimeError::ImageNotFound(_))));
}

#[test]
fn owned_listing_uses_label_filter() {
    let fake = FakeEngine::start(|r: &Request| {
        if r.path.starts_with("/v1.41/containers/json") {
            reply(200, r#"[{"Id": "a"}, {"Id": "b"}]"#)
        } else {
            reply(404, "{}")
        }
    });
    let ids = fake.engine().list_owned("me").unwrap();
    assert_eq!(ids, vec!["a", "b"]);
    let path = &fake.requests()[0].path;
    let query = path.split_once('?').unwrap().1;
    let pairs: Vec<(String, String)> = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
    assert_eq!(pairs[0], ("all".into(), "1".into()));
    let filters: Value = serde_json::from_str(&pairs[1].1).unwrap();
    assert_eq!(filters["label"][0], "org.brats-orch.owner=me");
    // removing an absent container is not an error
    fake.engine().remove("gone").unwrap();
}

#[test]
fn endpoint_from_environment() {
    // the only test touching this variable
    std::env::set_var("ORCH_ENGINE_ENDPOINT", "tcp://127.0.0.1:2375");
    assert_eq!(Endpoint::from_env().unwrap(), Endpoint::Tcp("127.0.0.1:2375".into()));
    std::env::remove_var("ORCH_ENGINE_ENDPOINT");
    assert_eq!(Endpoint::from_env().unwrap(), Endpoint::Unix("/var/run/docker.sock".into()));
}

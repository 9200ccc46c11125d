//! Local HTTP/JSON detector protocol.
//!
//! ```text
//! POST /v1/detect  {"image_png_b64": "...", "min_score": 0.3}
//!   200 {"model_id": "...", "detections": [{"box": [x0,y0,x1,y1], "label": "...", "score": 0.9}], "elapsed_ms": 1.2}
//!   400 undecodable image, 413 payload over limit, 429 rate limited, 500 internal
//! GET  /v1/health  {"status": "ok"}
//! GET  /v1/info    {"model_id": "...", "input_size": [h, w]}
//! ```
//!
//! Boxes are always in the pixel frame of the submitted image, even when the
//! server resizes internally.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Response, Server};

use super::{Detection, MockDetector, Oracle, OracleError};
use crate::imagecore::{decode_image, encode_png, resize_bilinear, ImageTensor, RegionRect};

pub const DEFAULT_MAX_PAYLOAD: usize = 20 * 1024 * 1024;

/// JSON Schema (draft 2020-12) for every request and response body, one
/// `$defs` entry per message.
pub const WIRE_SCHEMA: &str = include_str!("../../schema/wire.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image_png_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub model_id: String,
    pub detections: Vec<WireDetection>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub model_id: String,
    pub input_size: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

impl From<&Detection> for WireDetection {
    fn from(d: &Detection) -> Self {
        let b = d.bbox;
        WireDetection {
            bbox: [b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64],
            label: d.label.clone(),
            score: d.score,
        }
    }
}

impl WireDetection {
    /// Converts to an integer box in a `height × width` frame. Coordinates may
    /// overshoot the frame by at most one pixel (float rounding on the server
    /// side); anything further out is a protocol violation.
    pub fn to_detection(&self, height: usize, width: usize) -> Result<Detection, OracleError> {
        let [x0, y0, x1, y1] = self.bbox;
        let (w, h) = (width as f64, height as f64);
        let finite = self.bbox.iter().all(|v| v.is_finite());
        if !finite || x0 < -1.0 || y0 < -1.0 || x1 > w + 1.0 || y1 > h + 1.0 {
            return Err(OracleError::Protocol(format!("box {:?} outside {height}x{width} frame", self.bbox)));
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(OracleError::Protocol(format!("score {} outside [0, 1]", self.score)));
        }
        let bbox = RegionRect::new(
            x0.max(0.0).floor() as usize,
            y0.max(0.0).floor() as usize,
            (x1.ceil() as usize).min(width),
            (y1.ceil() as usize).min(height),
        )
        .map_err(|_| OracleError::Protocol(format!("degenerate box {:?}", self.bbox)))?;
        Ok(Detection {
            bbox,
            label: self.label.clone(),
            score: self.score,
        })
    }
}

/// Client for a remote detector speaking the wire protocol.
///
/// The underlying agent pools connections and is safe to share across
/// threads, so several attacks may have requests in flight at once.
#[derive(Debug, Clone)]
pub struct HttpOracle {
    base: String,
    agent: ureq::Agent,
    model_id: String,
    min_score: Option<f64>,
}

impl HttpOracle {
    /// Connects and fetches `/v1/info`; fails if the server is unreachable.
    pub fn connect(base_url: &str) -> Result<Self, OracleError> {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .timeout(Duration::from_secs(120))
            .build();
        let mut oracle = Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            model_id: String::new(),
            min_score: None,
        };
        oracle.model_id = oracle.info()?.model_id;
        Ok(oracle)
    }

    pub fn with_min_score(mut self, min_score: f64) -> Self {
        self.min_score = Some(min_score);
        self
    }

    pub fn health(&self) -> Result<HealthResponse, OracleError> {
        let resp = self.agent.get(&format!("{}/v1/health", self.base)).call().map_err(map_ureq)?;
        resp.into_json().map_err(|e| OracleError::Protocol(e.to_string()))
    }

    pub fn info(&self) -> Result<InfoResponse, OracleError> {
        let resp = self.agent.get(&format!("{}/v1/info", self.base)).call().map_err(map_ureq)?;
        resp.into_json().map_err(|e| OracleError::Protocol(e.to_string()))
    }
}

fn map_ureq(err: ureq::Error) -> OracleError {
    match err {
        ureq::Error::Status(413, _) => OracleError::PayloadTooLarge,
        ureq::Error::Status(429, _) => OracleError::RateLimited,
        ureq::Error::Status(status, resp) => {
            let message = resp
                .into_json::<ErrorResponse>()
                .map(|e| e.error)
                .unwrap_or_else(|_| "no error body".into());
            OracleError::Rejected { status, message }
        }
        ureq::Error::Transport(t) => OracleError::Transport(t.to_string()),
    }
}

impl Oracle for HttpOracle {
    fn id(&self) -> String {
        self.model_id.clone()
    }

    fn forward(&self, image: &ImageTensor) -> Result<Vec<Detection>, OracleError> {
        let req = DetectRequest {
            image_png_b64: B64.encode(encode_png(image)?),
            min_score: self.min_score,
        };
        let resp: DetectResponse = self
            .agent
            .post(&format!("{}/v1/detect", self.base))
            .send_json(&req)
            .map_err(map_ureq)?
            .into_json()
            .map_err(|e| OracleError::Protocol(e.to_string()))?;
        resp.detections
            .iter()
            .map(|d| d.to_detection(image.height(), image.width()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub max_payload_bytes: usize,
    /// Sustained requests per second; `None` disables rate limiting.
    pub rate_limit_per_sec: Option<f64>,
    /// Internal working size; inputs of other sizes are resized and boxes
    /// mapped back to the caller's frame.
    pub input_size: Option<(usize, usize)>,
    pub workers: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            max_payload_bytes: DEFAULT_MAX_PAYLOAD,
            rate_limit_per_sec: None,
            input_size: None,
            workers: 2,
        }
    }
}

struct TokenBucket {
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        Self {
            rate,
            state: Mutex::new((rate.max(1.0), Instant::now())),
        }
    }

    fn take(&self) -> bool {
        let mut s = self.state.lock().expect("bucket lock poisoned");
        let now = Instant::now();
        let refill = now.duration_since(s.1).as_secs_f64() * self.rate;
        s.0 = (s.0 + refill).min(self.rate.max(1.0));
        s.1 = now;
        if s.0 >= 1.0 {
            s.0 -= 1.0;
            true
        } else {
            false
        }
    }
}

struct ServerState {
    detector: MockDetector,
    opts: ServerOptions,
    bucket: Option<TokenBucket>,
}

/// Serves a [`MockDetector`] over the wire protocol.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts workers.
    pub fn start(addr: &str, detector: MockDetector, opts: ServerOptions) -> Result<Self, OracleError> {
        let server = Server::http(addr).map_err(|e| OracleError::Transport(e.to_string()))?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| OracleError::Transport("server is not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let state = Arc::new(ServerState {
            bucket: opts.rate_limit_per_sec.map(TokenBucket::new),
            detector,
            opts: opts.clone(),
        });
        let workers = (0..opts.workers.max(1))
            .map(|_| {
                let (server, stop, state) = (Arc::clone(&server), Arc::clone(&stop), Arc::clone(&state));
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv_timeout(Duration::from_millis(100)) {
                            Ok(Some(req)) => handle(&state, req),
                            Ok(None) => {}
                            Err(e) => log::warn!("accept failed: {e}"),
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            addr: bound,
            server,
            stop,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit, which only happens after `shutdown`.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

fn json_response<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).expect("response types serialize");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn error_response(status: u16, msg: impl Into<String>) -> Response<std::io::Cursor<Vec<u8>>> {
    json_response(status, &ErrorResponse { error: msg.into() })
}

fn handle(state: &ServerState, mut req: tiny_http::Request) {
    let response = route(state, &mut req);
    if let Err(e) = req.respond(response) {
        log::warn!("failed to send response: {e}");
    }
}

fn route(state: &ServerState, req: &mut tiny_http::Request) -> Response<std::io::Cursor<Vec<u8>>> {
    let path = req.url().split('?').next().unwrap_or_default().to_string();
    match (req.method(), path.as_str()) {
        (Method::Get, "/v1/health") => json_response(200, &HealthResponse { status: "ok".into() }),
        (Method::Get, "/v1/info") => {
            let (h, w) = state.opts.input_size.unwrap_or((640, 640));
            json_response(
                200,
                &InfoResponse {
                    model_id: state.detector.config().model_id.clone(),
                    input_size: [h, w],
                },
            )
        }
        (Method::Post, "/v1/detect") => detect_route(state, req),
        _ => error_response(404, format!("no route for {path}")),
    }
}

fn detect_route(state: &ServerState, req: &mut tiny_http::Request) -> Response<std::io::Cursor<Vec<u8>>> {
    let started = Instant::now();
    let limit = state.opts.max_payload_bytes;
    let mut body = Vec::new();
    let read = req.as_reader().take(limit as u64 + 1).read_to_end(&mut body);
    if read.is_err() {
        return error_response(400, "failed to read request body");
    }
    if body.len() > limit {
        // Drain the rest so the client sees the status instead of a reset.
        let _ = std::io::copy(&mut req.as_reader(), &mut std::io::sink());
        return error_response(413, format!("payload exceeds {limit} bytes"));
    }
    if let Some(bucket) = &state.bucket {
        if !bucket.take() {
            return error_response(429, "rate limit exceeded");
        }
    }
    let parsed: DetectRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(400, format!("bad request body: {e}")),
    };
    let bytes = match B64.decode(parsed.image_png_b64.as_bytes()) {
        Ok(b) => b,
        Err(e) => return error_response(400, format!("bad base64: {e}")),
    };
    let image = match decode_image(&bytes) {
        Ok(img) => img,
        Err(e) => return error_response(400, format!("undecodable image: {e}")),
    };
    let detections = match run_in_frame(&state.detector, &image, state.opts.input_size) {
        Ok(d) => d,
        Err(e) => return error_response(500, e.to_string()),
    };
    let floor = parsed.min_score.unwrap_or(0.0);
    json_response(
        200,
        &DetectResponse {
            model_id: state.detector.config().model_id.clone(),
            detections: detections.iter().filter(|d| d.score >= floor).map(WireDetection::from).collect(),
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    )
}

fn run_in_frame(
    detector: &MockDetector,
    image: &ImageTensor,
    input_size: Option<(usize, usize)>,
) -> Result<Vec<Detection>, OracleError> {
    let Some((ih, iw)) = input_size.filter(|&s| s != image.dims()) else {
        return Ok(detector.run(image));
    };
    let resized = resize_bilinear(image, ih, iw)?;
    let (sy, sx) = (image.height() as f64 / ih as f64, image.width() as f64 / iw as f64);
    detector
        .run(&resized)
        .into_iter()
        .map(|d| {
            let b = d.bbox;
            let bbox = RegionRect::new(
                (b.x0 as f64 * sx).floor() as usize,
                (b.y0 as f64 * sy).floor() as usize,
                ((b.x1 as f64 * sx).ceil() as usize).min(image.width()),
                ((b.y1 as f64 * sy).ceil() as usize).min(image.height()),
            )?;
            Ok(Detection { bbox, ..d })
        })
        .collect()
}

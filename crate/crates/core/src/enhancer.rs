//! Post-reconstruction enhancement.
//!
//! Enhancement is a view on the reconstruction: outputs are never fed back
//! into the solver. Built-in bindings are `identity` and a Gaussian blur; the
//! `external` binding ships each image to a denoiser service speaking the
//! protocol below.
//!
//! Request (little-endian): magic `DNRQ`, version u16 = 1, request_id u64,
//! height u32, width u32, scale_min f32, scale_max f32, then `height × width`
//! f32 row-major.
//!
//! Response: magic `DNRS`, version u16 = 1, request_id u64 (echoed),
//! status u8 (0 = ok), height u32, width u32, then `height × width` f32.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, sync_channel, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ndarray::Array2;

use crate::engine::{SliceUpdate, UpdateEvent};
use crate::error::{Error, Result};
use crate::geometry::Tomogram;

pub const REQUEST_MAGIC: [u8; 4] = *b"DNRQ";
pub const RESPONSE_MAGIC: [u8; 4] = *b"DNRS";
pub const PROTOCOL_VERSION: u16 = 1;
pub const REQUEST_HEADER_LEN: usize = 30;
pub const RESPONSE_HEADER_LEN: usize = 23;
const MAX_IMAGE_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputScale {
    /// Min-max scale to `[0, 1]` before dispatch, invert afterwards.
    UnitRange,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserMode {
    Identity,
    Gaussian { sigma: f64 },
    External { endpoint: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserBinding {
    pub mode: DenoiserMode,
    pub timeout: Duration,
    pub input_scale: InputScale,
}

impl DenoiserBinding {
    pub fn identity() -> Self {
        DenoiserBinding {
            mode: DenoiserMode::Identity,
            timeout: Duration::from_secs(5),
            input_scale: InputScale::UnitRange,
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        DenoiserBinding {
            mode: DenoiserMode::Gaussian { sigma },
            ..DenoiserBinding::identity()
        }
    }

    pub fn external(endpoint: impl Into<String>) -> Self {
        DenoiserBinding {
            mode: DenoiserMode::External {
                endpoint: endpoint.into(),
            },
            ..DenoiserBinding::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            DenoiserMode::Gaussian { sigma } if !(*sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::invalid("gaussian sigma must be positive"))
            }
            DenoiserMode::External { endpoint } if endpoint.trim().is_empty() => {
                Err(Error::invalid("external denoiser needs an endpoint"))
            }
            _ => Ok(()),
        }
    }
}

/// Parses `identity`, `gaussian:<sigma>` or `external`. The external endpoint
/// is supplied separately.
impl FromStr for DenoiserMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "identity" || s == "none" => Ok(DenoiserMode::Identity),
            None if s == "gaussian" => Ok(DenoiserMode::Gaussian { sigma: 1.0 }),
            None if s == "external" => Ok(DenoiserMode::External {
                endpoint: String::new(),
            }),
            Some(("gaussian", sigma)) => sigma
                .parse()
                .map(|sigma| DenoiserMode::Gaussian { sigma })
                .map_err(|_| Error::invalid(format!("bad gaussian sigma {sigma:?}"))),
            _ => Err(Error::invalid(format!("unknown denoiser {s:?}"))),
        }
    }
}

impl std::fmt::Display for DenoiserMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenoiserMode::Identity => write!(f, "identity"),
            DenoiserMode::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            DenoiserMode::External { .. } => write!(f, "external"),
        }
    }
}

/// Normalised Gaussian blur, truncated at 3σ, edges clamped.
pub fn gaussian_blur(image: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = image.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal: Array2<f64> = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .zip(-radius..=radius)
            .map(|(k, d)| k * image[[i, clamp(j as isize + d, w)]])
            .sum()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .zip(-radius..=radius)
            .map(|(k, d)| k * horizontal[[clamp(i as isize + d, h), j]])
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseRequest {
    pub request_id: u64,
    pub scale_min: f32,
    pub scale_max: f32,
    pub image: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseResponse {
    pub request_id: u64,
    pub status: u8,
    pub image: Array2<f32>,
}

fn push_payload(out: &mut Vec<u8>, image: &Array2<f32>) {
    for v in image.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_request(req: &DenoiseRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(REQUEST_HEADER_LEN + req.image.len() * 4);
    out.extend_from_slice(&REQUEST_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&req.request_id.to_le_bytes());
    out.extend_from_slice(&(req.image.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(req.image.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&req.scale_min.to_le_bytes());
    out.extend_from_slice(&req.scale_max.to_le_bytes());
    push_payload(&mut out, &req.image);
    out
}

pub fn encode_response(resp: &DenoiseResponse) -> Vec<u8> {
    let mut out = Vec::with_capacity(RESPONSE_HEADER_LEN + resp.image.len() * 4);
    out.extend_from_slice(&RESPONSE_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&resp.request_id.to_le_bytes());
    out.push(resp.status);
    out.extend_from_slice(&(resp.image.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(resp.image.ncols() as u32).to_le_bytes());
    push_payload(&mut out, &resp.image);
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic_version(b: &[u8], magic: &[u8; 4]) -> Result<()> {
    if b[0..4] != *magic {
        return Err(Error::protocol(0, format!("bad magic {:02x?}", &b[0..4])));
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != PROTOCOL_VERSION {
        return Err(Error::protocol(4, format!("unsupported version {version}")));
    }
    Ok(())
}

fn image_bytes(h: u32, w: u32, at: u64, allow_empty: bool) -> Result<usize> {
    if !allow_empty && (h == 0 || w == 0) {
        return Err(Error::protocol(at, format!("empty image {h}x{w}")));
    }
    if (h == 0) != (w == 0) {
        return Err(Error::protocol(at, format!("degenerate image {h}x{w}")));
    }
    let bytes = h as u64 * w as u64 * 4;
    if bytes > MAX_IMAGE_BYTES {
        return Err(Error::protocol(at, "image exceeds size limit"));
    }
    Ok(bytes as usize)
}

fn payload_image(h: u32, w: u32, payload: &[u8]) -> Array2<f32> {
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((h as usize, w as usize), values).expect("payload length checked")
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on EOF before the first byte.
fn read_record_part<R: Read>(reader: &mut R, buf: &mut [u8], position: u64, allow_eof: bool) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && allow_eof => return Ok(false),
            Ok(0) => {
                return Err(Error::Truncated {
                    position,
                    expected: buf.len() as u64,
                    got: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn parse_request_header(h: &[u8]) -> Result<(u64, u32, u32, f32, f32, usize)> {
    check_magic_version(h, &REQUEST_MAGIC)?;
    let (height, width) = (le_u32(h, 14), le_u32(h, 18));
    let bytes = image_bytes(height, width, 14, false)?;
    Ok((le_u64(h, 6), height, width, le_f32(h, 22), le_f32(h, 26), bytes))
}

fn parse_response_header(h: &[u8]) -> Result<(u64, u8, u32, u32, usize)> {
    check_magic_version(h, &RESPONSE_MAGIC)?;
    let status = h[14];
    let (height, width) = (le_u32(h, 15), le_u32(h, 19));
    let bytes = image_bytes(height, width, 15, status != 0)?;
    Ok((le_u64(h, 6), status, height, width, bytes))
}

fn check_total(bytes: &[u8], header: usize, payload: usize) -> Result<()> {
    let total = header + payload;
    if bytes.len() < total {
        return Err(Error::Truncated {
            position: header as u64,
            expected: payload as u64,
            got: (bytes.len() - header) as u64,
        });
    }
    if bytes.len() > total {
        return Err(Error::protocol(total as u64, "trailing bytes after record"));
    }
    Ok(())
}

fn short_header(bytes: &[u8], header: usize, magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < header {
        if bytes.len() >= 6 {
            check_magic_version(bytes, magic)?;
        }
        return Err(Error::Truncated {
            position: 0,
            expected: header as u64,
            got: bytes.len() as u64,
        });
    }
    Ok(())
}

pub fn decode_request(bytes: &[u8]) -> Result<DenoiseRequest> {
    short_header(bytes, REQUEST_HEADER_LEN, &REQUEST_MAGIC)?;
    let (request_id, h, w, scale_min, scale_max, len) = parse_request_header(&bytes[..REQUEST_HEADER_LEN])?;
    check_total(bytes, REQUEST_HEADER_LEN, len)?;
    Ok(DenoiseRequest {
        request_id,
        scale_min,
        scale_max,
        image: payload_image(h, w, &bytes[REQUEST_HEADER_LEN..]),
    })
}

pub fn decode_response(bytes: &[u8]) -> Result<DenoiseResponse> {
    short_header(bytes, RESPONSE_HEADER_LEN, &RESPONSE_MAGIC)?;
    let (request_id, status, h, w, len) = parse_response_header(&bytes[..RESPONSE_HEADER_LEN])?;
    check_total(bytes, RESPONSE_HEADER_LEN, len)?;
    Ok(DenoiseResponse {
        request_id,
        status,
        image: payload_image(h, w, &bytes[RESPONSE_HEADER_LEN..]),
    })
}

/// Next request on a stream, `None` on clean EOF.
pub fn read_request<R: Read>(reader: &mut R) -> Result<Option<DenoiseRequest>> {
    let mut header = [0u8; REQUEST_HEADER_LEN];
    if !read_record_part(reader, &mut header, 0, true)? {
        return Ok(None);
    }
    let (request_id, h, w, scale_min, scale_max, len) = parse_request_header(&header)?;
    let mut payload = vec![0u8; len];
    read_record_part(reader, &mut payload, REQUEST_HEADER_LEN as u64, false)?;
    Ok(Some(DenoiseRequest {
        request_id,
        scale_min,
        scale_max,
        image: payload_image(h, w, &payload),
    }))
}

pub fn read_response<R: Read>(reader: &mut R) -> Result<DenoiseResponse> {
    let mut header = [0u8; RESPONSE_HEADER_LEN];
    read_record_part(reader, &mut header, 0, false)?;
    let (request_id, status, h, w, len) = parse_response_header(&header)?;
    let mut payload = vec![0u8; len];
    read_record_part(reader, &mut payload, RESPONSE_HEADER_LEN as u64, false)?;
    Ok(DenoiseResponse {
        request_id,
        status,
        image: payload_image(h, w, &payload),
    })
}

/// One-request-in-flight client for an external denoiser.
pub struct DenoiserClient {
    endpoint: String,
    timeout: Duration,
    stream: Option<TcpStream>,
    next_id: u64,
}

impl DenoiserClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        DenoiserClient {
            endpoint: endpoint.into(),
            timeout,
            stream: None,
            next_id: 0,
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let fail = |e: io::Error| Error::Enhancement(format!("connect {}: {e}", self.endpoint));
        let addrs = self.endpoint.to_socket_addrs().map_err(fail)?;
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(self.timeout)).map_err(fail)?;
                    stream.set_write_timeout(Some(self.timeout)).map_err(fail)?;
                    stream.set_nodelay(true).map_err(fail)?;
                    return Ok(stream);
                }
                Err(e) => last = e,
            }
        }
        Err(fail(last))
    }

    /// Round-trips one image. Any failure drops the connection so the next
    /// call starts fresh.
    pub fn denoise(&mut self, image: &Array2<f32>, scale_min: f32, scale_max: f32) -> Result<Array2<f32>> {
        let result = self.try_denoise(image, scale_min, scale_max);
        if result.is_err() {
            self.stream = None;
        }
        result
    }

    fn try_denoise(&mut self, image: &Array2<f32>, scale_min: f32, scale_max: f32) -> Result<Array2<f32>> {
        if self.stream.is_none() {
            self.stream = Some(self.connect()?);
        }
        let stream = self.stream.as_mut().expect("connected");
        self.next_id += 1;
        let request = DenoiseRequest {
            request_id: self.next_id,
            scale_min,
            scale_max,
            image: image.clone(),
        };
        stream
            .write_all(&encode_request(&request))
            .map_err(|e| Error::Enhancement(format!("send to {}: {e}", self.endpoint)))?;
        let response = read_response(stream).map_err(|e| Error::Enhancement(format!("{}: {e}", self.endpoint)))?;
        if response.request_id != request.request_id {
            return Err(Error::Enhancement(format!(
                "response id {} for request {}",
                response.request_id, request.request_id
            )));
        }
        if response.status != 0 {
            return Err(Error::Enhancement(format!("denoiser returned status {}", response.status)));
        }
        if response.image.dim() != image.dim() {
            return Err(Error::Enhancement(format!(
                "denoiser returned {:?} for a {:?} image",
                response.image.dim(),
                image.dim()
            )));
        }
        Ok(response.image)
    }
}

/// Applies one [`DenoiserBinding`], keeping a connection open for the
/// external mode.
pub struct Enhancer {
    binding: DenoiserBinding,
    client: Option<DenoiserClient>,
}

impl Enhancer {
    pub fn new(binding: DenoiserBinding) -> Result<Self> {
        binding.validate()?;
        let client = match &binding.mode {
            DenoiserMode::External { endpoint } => Some(DenoiserClient::new(endpoint.clone(), binding.timeout)),
            _ => None,
        };
        Ok(Enhancer { binding, client })
    }

    pub fn binding(&self) -> &DenoiserBinding {
        &self.binding
    }

    pub fn enhance(&mut self, image: &Array2<f64>) -> Result<Array2<f64>> {
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        match &self.binding.mode {
            DenoiserMode::Identity => Ok(image.clone()),
            DenoiserMode::Gaussian { sigma } => Ok(gaussian_blur(image, *sigma)),
            DenoiserMode::External { .. } => {
                let client = self.client.as_mut().expect("external binding has a client");
                match self.binding.input_scale {
                    InputScale::Raw => {
                        let out = client.denoise(&image.mapv(|v| v as f32), 0.0, 1.0)?;
                        Ok(out.mapv(f64::from))
                    }
                    InputScale::UnitRange => {
                        let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let span = if hi > lo { hi - lo } else { 1.0 };
                        let scaled = image.mapv(|v| ((v - lo) / span) as f32);
                        let out = client.denoise(&scaled, lo as f32, hi as f32)?;
                        Ok(out.mapv(|v| v as f64 * span + lo))
                    }
                }
            }
        }
    }
}

/// One-shot enhancement.
pub fn enhance(image: &Array2<f64>, binding: &DenoiserBinding) -> Result<Array2<f64>> {
    Enhancer::new(binding.clone())?.enhance(image)
}

/// A minimal in-process denoiser service, handy as a loopback peer.
pub struct DenoiserService {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl DenoiserService {
    /// Serves `handler` on `listener`, one thread per connection.
    pub fn spawn<F>(listener: TcpListener, handler: F) -> Result<Self>
    where
        F: Fn(&DenoiseRequest) -> Array2<f32> + Send + Sync + 'static,
    {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let handler = Arc::new(handler);
        let stop_flag = Arc::clone(&stop);
        let accept = thread::spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = conn else { continue };
                let handler = Arc::clone(&handler);
                thread::spawn(move || {
                    let _ = stream.set_nodelay(true);
                    loop {
                        match read_request(&mut stream) {
                            Ok(Some(req)) => {
                                let resp = DenoiseResponse {
                                    request_id: req.request_id,
                                    status: 0,
                                    image: handler(&req),
                                };
                                if stream.write_all(&encode_response(&resp)).is_err() {
                                    break;
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                log::warn!("denoiser service: {e}");
                                let resp = DenoiseResponse {
                                    request_id: 0,
                                    status: 1,
                                    image: Array2::zeros((0, 0)),
                                };
                                let _ = stream.write_all(&encode_response(&resp));
                                break;
                            }
                        }
                    }
                });
            }
        });
        Ok(DenoiserService {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    /// Echoes every image back unchanged.
    pub fn echo(listener: TcpListener) -> Result<Self> {
        DenoiserService::spawn(listener, |req| req.image.clone())
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }
}

impl Drop for DenoiserService {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}

/// A reconstruction update after the enhancement stage.
#[derive(Debug, Clone)]
pub struct EnhancedUpdate {
    pub event: UpdateEvent,
    pub conventional: Arc<Tomogram>,
    pub enhanced: Arc<Array2<f64>>,
    /// Set when enhancement failed and `enhanced` is the unenhanced image.
    pub enhancement_error: Option<String>,
    pub enhance_elapsed: Duration,
    /// When the stage released this item, relative to the stage clock.
    pub emitted_at: Duration,
}

fn enhance_one(enhancer: &mut Enhancer, update: SliceUpdate, clock: Instant) -> EnhancedUpdate {
    let started = Instant::now();
    let (enhanced, enhancement_error) = match enhancer.binding().mode {
        DenoiserMode::Identity => (update.tomogram.values.clone(), None),
        _ => match enhancer.enhance(&update.tomogram.values) {
            Ok(img) => (img, None),
            Err(e) => {
                log::warn!(
                    "slice {} update {}: passing through unenhanced: {e}",
                    update.event.slice_id,
                    update.event.update_index
                );
                (update.tomogram.values.clone(), Some(e.to_string()))
            }
        },
    };
    EnhancedUpdate {
        event: update.event,
        conventional: update.tomogram,
        enhanced: Arc::new(enhanced),
        enhancement_error,
        enhance_elapsed: started.elapsed(),
        emitted_at: clock.elapsed(),
    }
}

/// Runs enhancement on its own executor(s) so it overlaps reconstruction.
///
/// Outputs leave in input order regardless of `executors`, which preserves
/// per-slice ordering. The stage drains and closes when `input` closes.
pub fn pipeline_stage(
    input: Receiver<SliceUpdate>,
    binding: DenoiserBinding,
    executors: usize,
    clock: Instant,
) -> Result<(Receiver<EnhancedUpdate>, JoinHandle<()>)> {
    binding.validate()?;
    let executors = executors.max(1);
    let (out_tx, out_rx) = channel();
    if executors == 1 {
        let mut enhancer = Enhancer::new(binding)?;
        let handle = thread::spawn(move || {
            for update in input {
                let mut item = enhance_one(&mut enhancer, update, clock);
                item.emitted_at = clock.elapsed();
                if out_tx.send(item).is_err() {
                    break;
                }
            }
        });
        return Ok((out_rx, handle));
    }

    let (done_tx, done_rx) = channel::<(u64, EnhancedUpdate)>();
    let mut lanes = Vec::with_capacity(executors);
    let mut lane_handles = Vec::with_capacity(executors);
    for _ in 0..executors {
        let (tx, rx) = sync_channel::<(u64, SliceUpdate)>(1);
        let mut enhancer = Enhancer::new(binding.clone())?;
        let done = done_tx.clone();
        lane_handles.push(thread::spawn(move || {
            for (tag, update) in rx {
                if done.send((tag, enhance_one(&mut enhancer, update, clock))).is_err() {
                    break;
                }
            }
        }));
        lanes.push(tx);
    }
    drop(done_tx);
    let dispatcher = thread::spawn(move || {
        for (tag, update) in input.into_iter().enumerate() {
            if lanes[tag % lanes.len()].send((tag as u64, update)).is_err() {
                break;
            }
        }
    });
    let handle = thread::spawn(move || {
        let mut pending = BTreeMap::new();
        let mut next = 0u64;
        for (tag, item) in done_rx {
            pending.insert(tag, item);
            while let Some(mut item) = pending.remove(&next) {
                item.emitted_at = clock.elapsed();
                if out_tx.send(item).is_err() {
                    return;
                }
                next += 1;
            }
        }
        let _ = dispatcher.join();
        for h in lane_handles {
            let _ = h.join();
        }
    });
    Ok((out_rx, handle))
}

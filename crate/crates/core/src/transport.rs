//! In-process transport with injected latency, per-destination bandwidth
//! caps, and byte accounting. Roles call each other through [`Endpoint`]s
//! so that a socket transport can replace this layer without touching the
//! training code.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Fluid-model token bucket: each reservation pushes the link's next free
/// instant forward by `bytes / rate`. Blocking senders sleep until their
/// reservation completes; fire-and-forget senders only push the clock, so
/// their traffic still delays later blocking requests.
pub struct TokenBucket {
    rate: f64,
    next_free: Mutex<Instant>,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_sec: f64) -> Self {
        assert!(rate_bytes_per_sec > 0.0);
        TokenBucket {
            rate: rate_bytes_per_sec,
            next_free: Mutex::new(Instant::now()),
        }
    }

    fn reserve(&self, bytes: u64) -> Instant {
        let mut next = self.next_free.lock().unwrap();
        let now = Instant::now();
        let start = if *next > now { *next } else { now };
        let finish = start + Duration::from_secs_f64(bytes as f64 / self.rate);
        *next = finish;
        finish
    }

    pub fn consume_blocking(&self, bytes: u64) {
        let finish = self.reserve(bytes);
        let now = Instant::now();
        if finish > now {
            std::thread::sleep(finish - now);
        }
    }

    pub fn consume_nowait(&self, bytes: u64) {
        self.reserve(bytes);
    }
}

/// Counting semaphore bounding concurrent request handling per endpoint.
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

/// One destination (a PS role) on the in-process transport.
pub struct Endpoint {
    pub name: String,
    latency: Duration,
    bucket: Option<TokenBucket>,
    bytes_received: AtomicU64,
    stopped: AtomicBool,
    workers: Semaphore,
}

pub const DEFAULT_SERVER_WORKERS: usize = 4;

impl Endpoint {
    pub fn new(
        name: impl Into<String>,
        latency_ms: f64,
        bandwidth_cap: Option<f64>,
        server_workers: usize,
    ) -> Self {
        Endpoint {
            name: name.into(),
            latency: Duration::from_secs_f64(latency_ms / 1000.0),
            bucket: bandwidth_cap.map(TokenBucket::new),
            bytes_received: AtomicU64::new(0),
            stopped: AtomicBool::new(false),
            workers: Semaphore::new(server_workers),
        }
    }

    pub fn stop(&self) {
        self.stopped.store(true, Ordering::Relaxed);
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received.load(Ordering::Relaxed)
    }
}

/// Deliver a request of `payload_bytes` to `dest` and run its handler.
///
/// Blocking sends pay the injected latency and wait for bandwidth;
/// fire-and-forget sends (`blocking = false`) only debit the bandwidth
/// clock and return as soon as the handler ran.
pub fn send<R>(
    dest: &Endpoint,
    payload_bytes: u64,
    blocking: bool,
    handler: impl FnOnce() -> R,
) -> Result<R> {
    if dest.stopped.load(Ordering::Relaxed) {
        return Err(Error::Transport(format!("destination {} stopped", dest.name)));
    }
    dest.bytes_received.fetch_add(payload_bytes, Ordering::Relaxed);
    if blocking {
        if !dest.latency.is_zero() {
            std::thread::sleep(dest.latency);
        }
        if let Some(bucket) = &dest.bucket {
            bucket.consume_blocking(payload_bytes);
        }
    } else if let Some(bucket) = &dest.bucket {
        bucket.consume_nowait(payload_bytes);
    }
    dest.workers.acquire();
    let out = handler();
    dest.workers.release();
    Ok(out)
}

pub const RETRIES: usize = 3;
pub const RETRY_BACKOFF: Duration = Duration::from_millis(10);

/// Bounded retries with backoff around [`send`].
pub fn send_with_retry<R>(
    dest: &Endpoint,
    payload_bytes: u64,
    blocking: bool,
    mut handler: impl FnMut() -> R,
) -> Result<R> {
    let mut last = None;
    for attempt in 0..=RETRIES {
        if attempt > 0 {
            std::thread::sleep(RETRY_BACKOFF);
        }
        match send(dest, payload_bytes, blocking, &mut handler) {
            Ok(r) => return Ok(r),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

use std::time::{Duration, Instant};

/// Granularity of throttled I/O. Also the bucket's burst capacity.
pub const CHUNK_BYTES: usize = 64 << 10;

/// Wall-clock token bucket over payload bytes. Starts empty and lets the
/// balance go negative, sleeping off the debt, so a continuous stream of
/// `n` bytes takes at least `n / rate`.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(bytes_per_sec: f64) -> Self {
        assert!(bytes_per_sec > 0.0 && bytes_per_sec.is_finite());
        TokenBucket { rate: bytes_per_sec, capacity: CHUNK_BYTES as f64, tokens: 0.0, last: Instant::now() }
    }

    pub fn from_gbps(gbps: f64) -> Self {
        Self::new(gbps * 1e9 / 8.0)
    }

    pub fn bytes_per_sec(&self) -> f64 {
        self.rate
    }

    /// Blocks until `n` bytes may pass.
    pub fn take(&mut self, n: usize) {
        let now = Instant::now();
        self.tokens = (self.tokens + self.rate * (now - self.last).as_secs_f64()).min(self.capacity);
        self.last = now;
        self.tokens -= n as f64;
        if self.tokens < 0.0 {
            std::thread::sleep(Duration::from_secs_f64(-self.tokens / self.rate));
        }
    }
}

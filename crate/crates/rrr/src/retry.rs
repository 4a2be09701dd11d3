//! Bounded exponential backoff shared by the HTTP clients, plus a minimum
//! interval rate limiter.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(200), max_delay: Duration::from_secs(5) }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Outcome of one attempt.
pub enum Attempt<T, E> {
    Done(T),
    /// Worth retrying: transport failure, 429, 5xx.
    Transient(E),
    Fatal(E),
}

/// Runs `op` until it succeeds, fails fatally, or runs out of retries; the
/// last transient error is returned in that case.
pub fn with_backoff<T, E>(backoff: &Backoff, mut op: impl FnMut(u32) -> Attempt<T, E>) -> Result<T, E> {
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transient(e) => {
                if attempt >= backoff.max_retries {
                    return Err(e);
                }
                log::debug!("transient failure, retry {} after {:?}", attempt + 1, backoff.delay(attempt));
                thread::sleep(backoff.delay(attempt));
                attempt += 1;
            }
        }
    }
}

/// Spaces calls at least `interval` apart across all threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_second(rate: f64) -> Self {
        let interval = if rate > 0.0 && rate.is_finite() { Duration::from_secs_f64(1.0 / rate) } else { Duration::ZERO };
        Self { interval, next: Mutex::new(None) }
    }

    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

//! Bounded in-flight request limiting shared by all remote callers.

use std::sync::{Condvar, Mutex};

/// Counting gate for concurrent remote requests.
pub struct InFlightLimiter {
    state: Mutex<Option<usize>>,
    cond: Condvar,
}

impl InFlightLimiter {
    pub const fn new() -> Self {
        Self {
            state: Mutex::new(None),
            cond: Condvar::new(),
        }
    }

    /// Blocks until a permit is free. The limit is fixed by the first
    /// acquisition on this limiter.
    pub fn acquire(&self, limit: usize) -> InFlightPermit<'_> {
        let mut available = self.state.lock().expect("limiter lock");
        if available.is_none() {
            *available = Some(limit.max(1));
        }
        loop {
            match available.as_mut() {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    return InFlightPermit { limiter: self };
                }
                _ => available = self.cond.wait(available).expect("limiter wait"),
            }
        }
    }

    fn release(&self) {
        let mut available = self.state.lock().expect("limiter lock");
        if let Some(n) = available.as_mut() {
            *n += 1;
        }
        self.cond.notify_one();
    }
}

impl Default for InFlightLimiter {
    fn default() -> Self {
        Self::new()
    }
}

/// RAII permit for one in-flight remote request.
pub struct InFlightPermit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        self.limiter.release();
    }
}

/// Process-wide gate shared by the detector's HTTP provider and the chat
/// transports; the first caller's limit wins.
static GLOBAL: InFlightLimiter = InFlightLimiter::new();

impl InFlightPermit<'static> {
    pub fn acquire(limit: usize) -> Self {
        GLOBAL.acquire(limit)
    }
}

//! Token bucket controlling the rate and burstiness of one channel.
//!
//! Tokens are denominated in operations for metadata-like channels and in
//! bytes for data channels. Time is passed in explicitly as monotonic
//! nanoseconds so the bucket works the same under a real or virtual clock.

use std::time::Duration;

use thiserror::Error;

use crate::clock::{ns_to_secs, NANOS_PER_SEC};

/// Burst allowance expressed as seconds of traffic at the current rate.
pub const DEFAULT_BURST_WINDOW: Duration = Duration::from_millis(100);

// Float slack when comparing the fill against a cost.
const FILL_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BucketError {
    #[error("burst exceeds capacity: cost {cost} > capacity {capacity}")]
    BurstExceedsCapacity { cost: f64, capacity: f64 },
    #[error("invalid rate {0}: must be a non-negative number")]
    InvalidRate(f64),
    #[error("invalid cost {0}: must be positive and finite")]
    InvalidCost(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Consume {
    Granted,
    /// Tokens will be available after this long at the current rate.
    Wait(Duration),
    /// Rate is zero; nothing is granted until the rate changes.
    Blocked,
}

#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last_refill: u64,
    burst_window: f64,
}

impl TokenBucket {
    /// A full bucket with the default 100 ms burst allowance.
    pub fn new(rate: f64, now: u64) -> Result<Self, BucketError> {
        Self::with_burst_window(rate, DEFAULT_BURST_WINDOW, now)
    }

    pub fn with_burst_window(rate: f64, burst_window: Duration, now: u64) -> Result<Self, BucketError> {
        check_rate(rate)?;
        let burst_window = burst_window.as_secs_f64();
        let capacity = capacity_for(rate, burst_window);
        Ok(TokenBucket { rate, capacity, tokens: capacity, last_refill: now, burst_window })
    }

    /// A bucket that never throttles (passthrough channel).
    pub fn unlimited(now: u64) -> Self {
        TokenBucket {
            rate: f64::INFINITY,
            capacity: f64::INFINITY,
            tokens: f64::INFINITY,
            last_refill: now,
            burst_window: DEFAULT_BURST_WINDOW.as_secs_f64(),
        }
    }

    /// Bucket with an explicit capacity, independent of the burst window.
    pub fn with_capacity(rate: f64, capacity: f64, tokens: f64, now: u64) -> Result<Self, BucketError> {
        check_rate(rate)?;
        assert!(capacity > 0.0, "capacity must be positive");
        Ok(TokenBucket {
            rate,
            capacity,
            tokens: tokens.clamp(0.0, capacity),
            last_refill: now,
            burst_window: capacity / rate.max(f64::MIN_POSITIVE),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    /// Time of the most recent refill; callers must not pass an earlier time.
    pub fn last_refill(&self) -> u64 {
        self.last_refill
    }

    pub fn is_unlimited(&self) -> bool {
        self.rate.is_infinite()
    }

    fn refill(&mut self, now: u64) {
        debug_assert!(now >= self.last_refill, "non-monotonic time: {now} < {}", self.last_refill);
        let now = now.max(self.last_refill);
        if self.rate.is_infinite() {
            self.tokens = self.capacity;
        } else if self.rate > 0.0 {
            let elapsed = ns_to_secs(now - self.last_refill);
            self.tokens = (self.tokens + self.rate * elapsed).min(self.capacity);
        }
        self.last_refill = now;
    }

    pub fn try_consume(&mut self, cost: f64, now: u64) -> Result<Consume, BucketError> {
        if !(cost > 0.0 && cost.is_finite()) {
            return Err(BucketError::InvalidCost(cost));
        }
        if cost > self.capacity {
            return Err(BucketError::BurstExceedsCapacity { cost, capacity: self.capacity });
        }
        self.refill(now);
        if self.tokens + FILL_EPSILON * cost.max(1.0) >= cost {
            self.tokens = (self.tokens - cost).max(0.0);
            return Ok(Consume::Granted);
        }
        if self.rate <= 0.0 {
            return Ok(Consume::Blocked);
        }
        let secs = (cost - self.tokens) / self.rate;
        Ok(Consume::Wait(Duration::from_nanos((secs * NANOS_PER_SEC as f64).ceil() as u64)))
    }

    /// Change the rate. Tokens earned so far are credited at the old rate and
    /// the fill is clamped to the new capacity.
    pub fn set_rate(&mut self, rate: f64, now: u64) -> Result<(), BucketError> {
        check_rate(rate)?;
        self.refill(now);
        self.rate = rate;
        self.capacity = capacity_for(rate, self.burst_window);
        self.tokens = self.tokens.min(self.capacity);
        Ok(())
    }

    pub fn set_burst_window(&mut self, window: Duration, now: u64) {
        self.refill(now);
        self.burst_window = window.as_secs_f64();
        self.capacity = capacity_for(self.rate, self.burst_window);
        self.tokens = self.tokens.min(self.capacity);
    }
}

fn check_rate(rate: f64) -> Result<(), BucketError> {
    if rate.is_nan() || rate < 0.0 {
        return Err(BucketError::InvalidRate(rate));
    }
    Ok(())
}

/// capacity = max(1, rate × burst window)
pub fn capacity_for(rate: f64, burst_window_secs: f64) -> f64 {
    if rate.is_infinite() {
        return f64::INFINITY;
    }
    (rate * burst_window_secs).max(1.0)
}

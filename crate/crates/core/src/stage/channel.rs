//! A channel: FIFO queue of pending requests paced by a token bucket.
//!
//! Two kinds of waiters share one queue. Blocking submitters park on their
//! own condition variable until they reach the head and the bucket grants
//! them. Deferred entries carry the request itself and are released by
//! whoever advances the head next (a blocked thread or [`Channel::release`]).

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::clock::Clock;
use crate::rate_limiter::{BucketError, Consume, TokenBucket};
use crate::request::{ClassifierToken, Matcher, Request};

thread_local! {
    static WAKER: Arc<Condvar> = Arc::new(Condvar::new());
}

#[derive(Debug)]
pub struct Released {
    pub request: Request,
    pub enqueued_at: u64,
    pub granted_at: u64,
}

#[derive(Debug)]
pub enum Enqueued {
    /// Granted without queueing.
    Granted(Request, u64),
    Queued,
}

#[derive(Debug)]
struct Waiter {
    ticket: u64,
    remaining: f64,
    size: u64,
    kind: WaiterKind,
}

#[derive(Debug)]
enum WaiterKind {
    Thread(Arc<Condvar>),
    Deferred { request: Request, enqueued_at: u64 },
}

enum HeadStep {
    Empty,
    Granted(Waiter),
    Wait(Duration),
    Blocked,
}

#[derive(Debug)]
struct ChannelState {
    bucket: TokenBucket,
    queue: VecDeque<Waiter>,
    next_ticket: u64,
    ready: Vec<Released>,
    window_ops: u64,
    window_bytes: u64,
    total_ops: u64,
}

impl ChannelState {
    /// Try to grant the head of the queue at `now`, splitting oversized costs
    /// into capacity-sized draws.
    fn advance_head(&mut self, now: u64) -> HeadStep {
        let Some(head) = self.queue.front_mut() else {
            return HeadStep::Empty;
        };
        while head.remaining > 0.0 {
            let draw = head.remaining.min(self.bucket.capacity());
            match self.bucket.try_consume(draw, now) {
                Ok(Consume::Granted) => head.remaining -= draw,
                Ok(Consume::Wait(d)) => return HeadStep::Wait(d),
                Ok(Consume::Blocked) => return HeadStep::Blocked,
                Err(BucketError::BurstExceedsCapacity { .. }) | Err(_) => {
                    unreachable!("draw is positive and bounded by capacity")
                }
            }
        }
        let waiter = self.queue.pop_front().expect("head exists");
        self.count_grant(waiter.size);
        self.wake_head();
        HeadStep::Granted(waiter)
    }

    /// Callers read the clock before taking the lock, so another thread may
    /// already have refilled the bucket at a later time.
    fn at(&self, now: u64) -> u64 {
        now.max(self.bucket.last_refill())
    }

    fn try_grant(&mut self, cost: f64, size: u64, now: u64) -> Option<u64> {
        let now = self.at(now);
        let granted = self.queue.is_empty()
            && cost <= self.bucket.capacity()
            && matches!(self.bucket.try_consume(cost, now), Ok(Consume::Granted));
        if granted {
            self.count_grant(size);
            return Some(now);
        }
        None
    }

    fn count_grant(&mut self, size: u64) {
        self.window_ops += 1;
        self.window_bytes += size;
        self.total_ops += 1;
    }

    /// Wake the first blocked thread; it also releases any deferred entries ahead of it.
    fn wake_head(&self) {
        for w in &self.queue {
            if let WaiterKind::Thread(cv) = &w.kind {
                cv.notify_one();
                return;
            }
        }
    }

    fn push(&mut self, remaining: f64, size: u64, kind: WaiterKind) -> u64 {
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        self.queue.push_back(Waiter { ticket, remaining, size, kind });
        ticket
    }
}

#[derive(Debug)]
pub struct Channel {
    id: u32,
    matcher: Matcher,
    token: ClassifierToken,
    state: Mutex<ChannelState>,
}

impl Channel {
    pub fn new(id: u32, matcher: Matcher, token: ClassifierToken, bucket: TokenBucket) -> Self {
        Channel {
            id,
            matcher,
            token,
            state: Mutex::new(ChannelState {
                bucket,
                queue: VecDeque::new(),
                next_ticket: 0,
                ready: Vec::new(),
                window_ops: 0,
                window_bytes: 0,
                total_ops: 0,
            }),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn matcher(&self) -> &Matcher {
        &self.matcher
    }

    pub fn token(&self) -> ClassifierToken {
        self.token
    }

    pub fn rate(&self) -> f64 {
        self.state.lock().bucket.rate()
    }

    pub fn capacity(&self) -> f64 {
        self.state.lock().bucket.capacity()
    }

    pub fn queue_len(&self) -> usize {
        self.state.lock().queue.len()
    }

    pub fn total_granted(&self) -> u64 {
        self.state.lock().total_ops
    }

    pub fn set_rate(&self, rate: f64, now: u64) -> Result<(), BucketError> {
        let mut st = self.state.lock();
        let now = st.at(now);
        st.bucket.set_rate(rate, now)?;
        st.wake_head();
        Ok(())
    }

    pub fn set_burst_window(&self, window: Duration, now: u64) {
        let mut st = self.state.lock();
        let now = st.at(now);
        st.bucket.set_burst_window(window, now);
        st.wake_head();
    }

    /// Granted ops and bytes since the previous call.
    pub fn take_window(&self) -> (u64, u64) {
        let mut st = self.state.lock();
        let out = (st.window_ops, st.window_bytes);
        st.window_ops = 0;
        st.window_bytes = 0;
        out
    }

    /// Grant `cost` without waiting if nothing is queued and the bucket can pay it.
    /// Returns the grant time, which is never before `now`.
    pub fn try_grant(&self, cost: f64, size: u64, now: u64) -> Option<u64> {
        self.state.lock().try_grant(cost, size, now)
    }

    /// Block the calling thread until `cost` tokens are granted in FIFO order.
    /// Returns the grant time.
    pub fn acquire(&self, cost: f64, size: u64, clock: &dyn Clock) -> u64 {
        let mut st = self.state.lock();
        let now = clock.now_ns();
        if let Some(at) = st.try_grant(cost, size, now) {
            return at;
        }
        let waker = WAKER.with(Arc::clone);
        let ticket = st.push(cost, size, WaiterKind::Thread(Arc::clone(&waker)));
        loop {
            let now = clock.now_ns();
            let head_ticket = st.queue.front().map(|w| (w.ticket, matches!(w.kind, WaiterKind::Thread(_))));
            match head_ticket {
                Some((t, _)) if t == ticket => match st.advance_head(now) {
                    HeadStep::Granted(_) => return now,
                    HeadStep::Wait(d) => {
                        waker.wait_for(&mut st, d);
                    }
                    HeadStep::Blocked => waker.wait(&mut st),
                    HeadStep::Empty => unreachable!("own ticket is queued"),
                },
                Some((_, false)) => match st.advance_head(now) {
                    HeadStep::Granted(w) => {
                        if let WaiterKind::Deferred { request, enqueued_at } = w.kind {
                            st.ready.push(Released { request, enqueued_at, granted_at: now });
                        }
                    }
                    HeadStep::Wait(d) => {
                        waker.wait_for(&mut st, d);
                    }
                    HeadStep::Blocked => waker.wait(&mut st),
                    HeadStep::Empty => unreachable!("own ticket is queued"),
                },
                // Another thread is at the head; it wakes us when it leaves.
                Some((_, true)) => waker.wait(&mut st),
                None => unreachable!("own ticket is queued"),
            }
        }
    }

    /// Non-blocking admission. The request is either granted on the spot or
    /// parked in the queue until [`Channel::release`] grants it.
    pub fn enqueue(&self, request: Request, cost: f64, now: u64) -> Enqueued {
        let size = request.size;
        let mut st = self.state.lock();
        let now = st.at(now);
        let was_empty = st.queue.is_empty();
        st.push(cost, size, WaiterKind::Deferred { request, enqueued_at: now });
        if was_empty {
            if let HeadStep::Granted(Waiter { kind: WaiterKind::Deferred { request, .. }, .. }) = st.advance_head(now) {
                return Enqueued::Granted(request, now);
            }
        }
        Enqueued::Queued
    }

    /// Release every deferred request that can be granted at `now`, in FIFO order.
    pub fn release(&self, now: u64) -> Vec<Released> {
        let mut st = self.state.lock();
        let now = st.at(now);
        let mut out = std::mem::take(&mut st.ready);
        while let Some(Waiter { kind: WaiterKind::Deferred { .. }, .. }) = st.queue.front() {
            match st.advance_head(now) {
                HeadStep::Granted(Waiter { kind: WaiterKind::Deferred { request, enqueued_at }, .. }) => {
                    out.push(Released { request, enqueued_at, granted_at: now })
                }
                _ => break,
            }
        }
        out
    }
}

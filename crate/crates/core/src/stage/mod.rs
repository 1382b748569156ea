//! Data-plane stage: mountpoint filtering, descriptor tracking, request
//! classification, channel rate limiting and forwarding to a backend sink.

mod channel;
mod fd_table;
mod mountpoint;
mod sink;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use channel::{Channel, Enqueued, Released};
pub use fd_table::{FdEntry, FdTable};
pub use mountpoint::{normalize_path, MountpointRegistry};
pub use sink::{DirectorySink, NullSink, RecordingSink, Sink, SinkError, SinkOutcome, SinkResult};

use crate::clock::{Clock, MonotonicClock};
use crate::rate_limiter::{BucketError, TokenBucket, DEFAULT_BURST_WINDOW};
use crate::request::{classify, ClassifierToken, Granularity, Matcher, OpClass, Request, RequestError, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("mountpoint must be an absolute path: {0}")]
    RelativeMountpoint(String),
    #[error("unknown channel {0}")]
    UnknownChannel(u32),
    #[error("duplicate channel {0}")]
    DuplicateChannel(u32),
    #[error("channel {existing} already matches {granularity}={value}")]
    DuplicateMatcher { existing: u32, granularity: Granularity, value: String },
    #[error(transparent)]
    Matcher(#[from] RequestError),
    #[error(transparent)]
    Bucket(#[from] BucketError),
    #[error("stage info requires a non-empty job id")]
    MissingJobId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub stage_id: u64,
    pub job_id: String,
    pub pid: u32,
    pub hostname: String,
    pub user_id: String,
}

impl StageInfo {
    pub fn new(job_id: impl Into<String>) -> Self {
        StageInfo {
            stage_id: 0,
            job_id: job_id.into(),
            pid: std::process::id(),
            hostname: "localhost".to_string(),
            user_id: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), StageError> {
        if self.job_id.is_empty() {
            return Err(StageError::MissingJobId);
        }
        Ok(())
    }
}

/// Control-plane instructions a stage accepts.
#[derive(Debug, Clone, PartialEq)]
pub enum HousekeepingRule {
    CreateChannel { channel_id: u32, granularity: Granularity, value: String, rate: f64 },
    SetChannelRate { channel_id: u32, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Bypass,
    Channel(u32),
}

#[derive(Debug, Clone)]
pub struct CompletionRecord {
    pub request: Request,
    pub route: Route,
    pub enqueued_at: u64,
    pub granted_at: u64,
    pub completed_at: u64,
    pub sink_result: SinkResult,
}

#[derive(Debug)]
pub enum Offer {
    Completed(CompletionRecord),
    Queued(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelStats {
    pub channel_id: u32,
    pub ops: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageStats {
    pub stage_id: u64,
    pub job_id: String,
    pub window_ns: u64,
    pub channels: Vec<ChannelStats>,
}

impl StageStats {
    pub fn ops_rate(&self, channel_id: u32) -> f64 {
        if self.window_ns == 0 {
            return 0.0;
        }
        self.channels
            .iter()
            .filter(|c| c.channel_id == channel_id)
            .map(|c| c.ops as f64)
            .sum::<f64>()
            / crate::clock::ns_to_secs(self.window_ns)
    }
}

#[derive(Default)]
struct ChannelTable {
    by_id: BTreeMap<u32, Arc<Channel>>,
    by_token: BTreeMap<ClassifierToken, Arc<Channel>>,
    granularities: Vec<Granularity>,
}

impl ChannelTable {
    fn lookup(&self, request: &Request, salt: u64) -> Option<Arc<Channel>> {
        self.granularities
            .iter()
            .find_map(|g| self.by_token.get(&classify(request, *g, salt)))
            .cloned()
    }
}

/// Token cost of a request: bytes for data, one per operation otherwise.
pub fn request_cost(request: &Request) -> f64 {
    if request.op_class() == OpClass::Data {
        request.size as f64
    } else {
        1.0
    }
}

pub struct Stage {
    info: RwLock<StageInfo>,
    job_id: Arc<str>,
    user_id: Arc<str>,
    mountpoints: RwLock<MountpointRegistry>,
    fds: Mutex<FdTable>,
    channels: RwLock<ChannelTable>,
    sink: Arc<dyn Sink>,
    clock: Arc<dyn Clock>,
    salt: u64,
    burst_window: Duration,
    last_collect: AtomicU64,
}

impl std::fmt::Debug for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stage").field("info", &*self.info.read()).finish_non_exhaustive()
    }
}

impl Stage {
    pub fn new(info: StageInfo, sink: Arc<dyn Sink>) -> Self {
        Self::with_clock(info, sink, Arc::new(MonotonicClock::new()))
    }

    pub fn with_clock(info: StageInfo, sink: Arc<dyn Sink>, clock: Arc<dyn Clock>) -> Self {
        let now = clock.now_ns();
        Stage {
            job_id: Arc::from(info.job_id.as_str()),
            user_id: Arc::from(info.user_id.as_str()),
            info: RwLock::new(info),
            mountpoints: RwLock::new(MountpointRegistry::new()),
            fds: Mutex::new(FdTable::new()),
            channels: RwLock::new(ChannelTable::default()),
            sink,
            clock,
            salt: crate::request::DEFAULT_SALT,
            burst_window: DEFAULT_BURST_WINDOW,
            last_collect: AtomicU64::new(now),
        }
    }

    pub fn with_salt(mut self, salt: u64) -> Self {
        self.salt = salt;
        self
    }

    /// Burst window applied to channels created after this call.
    pub fn with_burst_window(mut self, window: Duration) -> Self {
        self.burst_window = window;
        self
    }

    pub fn info(&self) -> StageInfo {
        self.info.read().clone()
    }

    pub fn set_stage_id(&self, id: u64) {
        self.info.write().stage_id = id;
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn register_mountpoint(&self, path: &str) -> Result<(), StageError> {
        self.mountpoints.write().register(path)
    }

    pub fn is_fd_managed(&self, fd: i32) -> bool {
        self.fds.lock().is_managed(fd)
    }

    pub fn open_fds(&self) -> usize {
        self.fds.lock().len()
    }

    pub fn channel(&self, id: u32) -> Option<Arc<Channel>> {
        self.channels.read().by_id.get(&id).cloned()
    }

    pub fn channel_ids(&self) -> Vec<u32> {
        self.channels.read().by_id.keys().copied().collect()
    }

    fn is_managed(&self, request: &Request) -> bool {
        match &request.target {
            Target::Path(p) => self.mountpoints.read().is_managed(p),
            Target::Fd(fd) => self.fds.lock().is_managed(*fd),
        }
    }

    /// Requests carry the identity of the process the stage runs in.
    fn stamp(&self, request: &mut Request, now: u64) {
        if request.submit_time == 0 {
            request.submit_time = now;
        }
        if request.job_id.is_empty() {
            request.job_id = Arc::clone(&self.job_id);
        }
        if request.user_id.is_empty() {
            request.user_id = Arc::clone(&self.user_id);
        }
    }

    /// Decide where a request goes without executing it.
    pub fn route(&self, request: &Request) -> (bool, Option<Arc<Channel>>) {
        if !self.is_managed(request) {
            return (false, None);
        }
        (true, self.channels.read().lookup(request, self.salt))
    }

    /// Submit a request and block until the sink has executed it.
    pub fn submit(&self, mut request: Request) -> CompletionRecord {
        let enqueued_at = self.clock.now_ns();
        self.stamp(&mut request, enqueued_at);
        let (managed, channel) = self.route(&request);
        let (route, granted_at) = match channel {
            Some(ch) => {
                let cost = request_cost(&request);
                let granted = match ch.try_grant(cost, request.size, enqueued_at) {
                    Some(at) => at,
                    None => ch.acquire(cost, request.size, self.clock.as_ref()),
                };
                (Route::Channel(ch.id()), granted)
            }
            None => (Route::Bypass, enqueued_at),
        };
        self.execute(request, managed, route, enqueued_at, granted_at)
    }

    /// Non-blocking submission. Queued requests complete through [`Stage::poll`].
    pub fn offer(&self, mut request: Request) -> Offer {
        let now = self.clock.now_ns();
        self.stamp(&mut request, now);
        let (managed, channel) = self.route(&request);
        match channel {
            None => Offer::Completed(self.execute(request, managed, Route::Bypass, now, now)),
            Some(ch) => {
                let id = ch.id();
                let cost = request_cost(&request);
                match ch.enqueue(request, cost, now) {
                    Enqueued::Granted(request, at) => Offer::Completed(self.execute(request, true, Route::Channel(id), now, at)),
                    Enqueued::Queued => Offer::Queued(id),
                }
            }
        }
    }

    /// Execute every deferred request whose grant is due at the current clock.
    pub fn poll(&self) -> Vec<CompletionRecord> {
        let now = self.clock.now_ns();
        let channels: Vec<Arc<Channel>> = self.channels.read().by_id.values().cloned().collect();
        let mut out = Vec::new();
        for ch in channels {
            for r in ch.release(now) {
                out.push(self.execute(r.request, true, Route::Channel(ch.id()), r.enqueued_at, r.granted_at));
            }
        }
        out
    }

    fn execute(&self, request: Request, managed: bool, route: Route, enqueued_at: u64, granted_at: u64) -> CompletionRecord {
        let result = self.sink.execute(&request);
        match (&request.target, &result) {
            (Target::Path(p), Ok(SinkOutcome::Opened(fd))) if request.op_type.is_open_like() => {
                self.fds.lock().insert(*fd, p.clone(), managed);
            }
            (Target::Fd(fd), _) if request.op_type.is_close_like() => {
                self.fds.lock().remove(*fd);
            }
            _ => {}
        }
        CompletionRecord { request, route, enqueued_at, granted_at, completed_at: self.clock.now_ns(), sink_result: result }
    }

    pub fn apply_housekeeping_rule(&self, rule: &HousekeepingRule) -> Result<(), StageError> {
        let now = self.clock.now_ns();
        match rule {
            HousekeepingRule::CreateChannel { channel_id, granularity, value, rate } => {
                let matcher = Matcher::parse(*granularity, value)?;
                let token = matcher.token(self.salt);
                let bucket = if rate.is_infinite() && *rate > 0.0 {
                    TokenBucket::unlimited(now)
                } else {
                    TokenBucket::with_burst_window(*rate, self.burst_window, now)?
                };
                let mut table = self.channels.write();
                if table.by_id.contains_key(channel_id) {
                    return Err(StageError::DuplicateChannel(*channel_id));
                }
                if let Some(existing) = table.by_token.get(&token) {
                    return Err(StageError::DuplicateMatcher {
                        existing: existing.id(),
                        granularity: *granularity,
                        value: value.clone(),
                    });
                }
                let channel = Arc::new(Channel::new(*channel_id, matcher, token, bucket));
                table.by_id.insert(*channel_id, Arc::clone(&channel));
                table.by_token.insert(token, channel);
                if !table.granularities.contains(granularity) {
                    table.granularities.push(*granularity);
                }
                Ok(())
            }
            HousekeepingRule::SetChannelRate { channel_id, rate } => {
                let channel = self.channel(*channel_id).ok_or(StageError::UnknownChannel(*channel_id))?;
                channel.set_rate(*rate, now)?;
                Ok(())
            }
        }
    }

    /// Per-channel counters since the previous collect (delta semantics).
    pub fn collect_stats(&self) -> StageStats {
        let now = self.clock.now_ns();
        let prev = self.last_collect.swap(now, Ordering::SeqCst);
        let channels = self
            .channels
            .read()
            .by_id
            .values()
            .map(|ch| {
                let (ops, bytes) = ch.take_window();
                ChannelStats { channel_id: ch.id(), ops, bytes }
            })
            .collect();
        let info = self.info.read();
        StageStats { stage_id: info.stage_id, job_id: info.job_id.clone(), window_ns: now.saturating_sub(prev), channels }
    }
}

/// Sink selection in a stage configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SinkConfig {
    Null,
    Directory { root: PathBuf },
    Recording,
}

impl SinkConfig {
    pub fn build(&self) -> std::io::Result<Arc<dyn Sink>> {
        Ok(match self {
            SinkConfig::Null => Arc::new(NullSink::new()),
            SinkConfig::Directory { root } => Arc::new(DirectorySink::new(root.clone())?),
            SinkConfig::Recording => Arc::new(RecordingSink::new()),
        })
    }
}

/// Stage configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default)]
    pub stage_id: u64,
    pub job_id: String,
    #[serde(default)]
    pub user_id: String,
    #[serde(default)]
    pub mountpoints: Vec<String>,
    pub sink: SinkConfig,
    pub controller: Option<String>,
    #[serde(default = "default_burst_ms")]
    pub burst_window_ms: u64,
}

fn default_burst_ms() -> u64 {
    DEFAULT_BURST_WINDOW.as_millis() as u64
}

impl StageConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn build(&self, clock: Arc<dyn Clock>) -> Result<Stage, crate::Error> {
        let info = StageInfo {
            stage_id: self.stage_id,
            job_id: self.job_id.clone(),
            pid: std::process::id(),
            hostname: hostname(),
            user_id: self.user_id.clone(),
        };
        info.validate()?;
        let sink = self.sink.build()?;
        let stage = Stage::with_clock(info, sink, clock).with_burst_window(Duration::from_millis(self.burst_window_ms));
        for m in &self.mountpoints {
            stage.register_mountpoint(m)?;
        }
        Ok(stage)
    }
}

pub fn hostname() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok().map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "localhost".to_string())
}

//! Per-node proxy between stages and the global controller.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use super::{rule_to_housekeeping, stats_to_entries, LinkError, StageLink, Upstream};
use crate::protocol::{Rule, StatEntry, Status};
use crate::stage::{StageInfo, StageStats};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LocalError {
    #[error("stage registration requires a non-empty job id")]
    MissingJobId,
    #[error("a stage for job {job_id} pid {pid} is already registered")]
    Duplicate { job_id: String, pid: u32 },
    #[error("upstream rejected the registration")]
    UpstreamRejected,
}

/// Per-job totals reported upstream for one cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeStats {
    /// Summed per (job, channel); `window_ns` is the longest stage window.
    pub entries: Vec<StatEntry>,
    /// Stages that missed the stats deadline; their window counts as zero.
    pub stale: Vec<u64>,
    /// Stages found disconnected and dropped this cycle.
    pub dead: Vec<u64>,
}

impl NodeStats {
    pub fn job_ops(&self, job_id: &str) -> u64 {
        self.entries.iter().filter(|e| e.job_id == job_id).map(|e| e.ops).sum()
    }
}

struct StageSession {
    info: StageInfo,
    link: Arc<dyn StageLink>,
    last_stats: Option<StageStats>,
    stale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    pub info: StageInfo,
    pub stale: bool,
    pub last_stats: Option<StageStats>,
}

pub struct LocalController {
    sessions: Mutex<BTreeMap<u64, StageSession>>,
    next_id: AtomicU64,
    upstream: RwLock<Option<Arc<dyn Upstream>>>,
    stats_timeout: Duration,
}

impl LocalController {
    pub fn new(stats_timeout: Duration) -> Self {
        LocalController {
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            upstream: RwLock::new(None),
            stats_timeout,
        }
    }

    /// Timeout derived from the control loop period.
    pub fn for_loop_interval(loop_interval: Duration) -> Self {
        LocalController::new(loop_interval / 4)
    }

    pub fn set_upstream(&self, upstream: Arc<dyn Upstream>) {
        *self.upstream.write() = Some(upstream);
    }

    pub fn stats_timeout(&self) -> Duration {
        self.stats_timeout
    }

    pub fn sessions(&self) -> BTreeMap<u64, SessionInfo> {
        self.sessions
            .lock()
            .iter()
            .map(|(id, s)| (*id, SessionInfo { info: s.info.clone(), stale: s.stale, last_stats: s.last_stats.clone() }))
            .collect()
    }

    /// Admit a stage, assign it a node-unique id and announce it upstream.
    pub fn register_stage(&self, mut info: StageInfo, link: Arc<dyn StageLink>) -> Result<u64, LocalError> {
        if info.job_id.is_empty() {
            return Err(LocalError::MissingJobId);
        }
        let stage_id = {
            let mut sessions = self.sessions.lock();
            if sessions.values().any(|s| s.info.job_id == info.job_id && s.info.pid == info.pid) {
                return Err(LocalError::Duplicate { job_id: info.job_id, pid: info.pid });
            }
            let id = self.next_id.fetch_add(1, Ordering::Relaxed);
            info.stage_id = id;
            sessions.insert(id, StageSession { info: info.clone(), link, last_stats: None, stale: false });
            id
        };
        let upstream = self.upstream.read().clone();
        if let Some(up) = upstream {
            match up.register(&info) {
                Ok(()) => {}
                Err(LinkError::Rejected(_)) => {
                    self.sessions.lock().remove(&stage_id);
                    return Err(LocalError::UpstreamRejected);
                }
                Err(e) => log::warn!("stage {stage_id} registered locally but upstream failed: {e}"),
            }
        }
        log::debug!("stage {stage_id} registered for job {}", info.job_id);
        Ok(stage_id)
    }

    /// Drop a session and tell upstream. Returns false for unknown ids.
    pub fn deregister_stage(&self, stage_id: u64) -> bool {
        if self.sessions.lock().remove(&stage_id).is_none() {
            return false;
        }
        let upstream = self.upstream.read().clone();
        if let Some(up) = upstream {
            if let Err(e) = up.deregister(stage_id) {
                log::warn!("upstream deregistration of stage {stage_id} failed: {e}");
            }
        }
        true
    }

    /// Poll every stage and sum their windows per (job, channel).
    pub fn aggregate_and_report(&self) -> NodeStats {
        let links: Vec<(u64, Arc<dyn StageLink>)> =
            self.sessions.lock().iter().map(|(id, s)| (*id, Arc::clone(&s.link))).collect();
        let timeout = self.stats_timeout;
        let results: Vec<(u64, Result<StageStats, LinkError>)> = if links.len() <= 1 {
            links.iter().map(|(id, l)| (*id, l.collect(timeout))).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> =
                    links.iter().map(|(id, l)| (*id, s.spawn(move || l.collect(timeout)))).collect();
                handles
                    .into_iter()
                    .map(|(id, h)| (id, h.join().unwrap_or(Err(LinkError::Transport("collector panicked".into())))))
                    .collect()
            })
        };

        let mut totals: BTreeMap<(String, u32), StatEntry> = BTreeMap::new();
        let mut out = NodeStats::default();
        {
            let mut sessions = self.sessions.lock();
            for (id, result) in results {
                match result {
                    Ok(stats) => {
                        for e in stats_to_entries(&stats) {
                            let slot = totals.entry((e.job_id.clone(), e.channel_id)).or_insert_with(|| StatEntry {
                                ops: 0,
                                bytes: 0,
                                window_ns: 0,
                                ..e.clone()
                            });
                            slot.ops += e.ops;
                            slot.bytes += e.bytes;
                            slot.window_ns = slot.window_ns.max(e.window_ns);
                        }
                        if let Some(s) = sessions.get_mut(&id) {
                            s.last_stats = Some(stats);
                            s.stale = false;
                        }
                    }
                    Err(LinkError::Timeout) | Err(LinkError::Rejected(_)) => {
                        if let Some(s) = sessions.get_mut(&id) {
                            s.stale = true;
                        }
                        out.stale.push(id);
                    }
                    Err(LinkError::Closed) | Err(LinkError::Transport(_)) => out.dead.push(id),
                }
            }
        }
        for id in &out.dead {
            log::info!("stage {id} unreachable, dropping it");
            self.deregister_stage(*id);
        }
        out.entries = totals.into_values().collect();
        out
    }

    /// Forward each rule verbatim to its stage.
    pub fn apply_rules(&self, rules: &[Rule]) -> Vec<Status> {
        rules
            .iter()
            .map(|rule| {
                let link = self.sessions.lock().get(&rule.stage_id).map(|s| Arc::clone(&s.link));
                match link {
                    None => Status::UnknownStage,
                    Some(link) => match link.apply(&rule_to_housekeeping(rule), self.stats_timeout) {
                        Ok(()) => Status::Ok,
                        Err(LinkError::Rejected(s)) => s,
                        Err(_) => Status::Failed,
                    },
                }
            })
            .collect()
    }
}

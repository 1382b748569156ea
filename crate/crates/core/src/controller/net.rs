//! Wire-protocol adapters: remote links plus the servers and clients that
//! connect stages, local controllers and the global controller over TCP.

use std::collections::HashSet;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use super::global::GlobalHandle;
use super::local::LocalController;
use super::policy::Policy;
use super::{rule_to_housekeeping, stats_to_entries, status_of, LinkError, NodeLink, StageLink, Upstream};
use crate::protocol::transport::{Connection, Handler, Server, TransportError};
use crate::protocol::{Body, Rule, RuleAction, StatEntry, Status};
use crate::stage::{ChannelStats, HousekeepingRule, Stage, StageInfo, StageStats};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("request rejected: {0}")]
    Rejected(String),
}

/// A stage reached through its connection to the local controller.
pub struct RemoteStage {
    conn: Arc<Connection>,
    stage_id: u64,
    job_id: String,
}

impl StageLink for RemoteStage {
    fn collect(&self, timeout: Duration) -> Result<StageStats, LinkError> {
        match self.conn.call(Body::CollectReq, timeout)? {
            Body::CollectResp(entries) => Ok(StageStats {
                stage_id: self.stage_id,
                job_id: self.job_id.clone(),
                window_ns: entries.iter().map(|e| e.window_ns).max().unwrap_or(0),
                channels: entries
                    .iter()
                    .map(|e| ChannelStats { channel_id: e.channel_id, ops: e.ops, bytes: e.bytes })
                    .collect(),
            }),
            _ => Err(LinkError::Transport("unexpected collect response".into())),
        }
    }

    fn apply(&self, rule: &HousekeepingRule, timeout: Duration) -> Result<(), LinkError> {
        let rule = match rule {
            HousekeepingRule::CreateChannel { channel_id, granularity, value, rate } => Rule {
                stage_id: self.stage_id,
                channel_id: *channel_id,
                action: RuleAction::CreateChannel { granularity: *granularity, value: value.clone(), rate: *rate },
            },
            HousekeepingRule::SetChannelRate { channel_id, rate } => {
                Rule { stage_id: self.stage_id, channel_id: *channel_id, action: RuleAction::SetRate { rate: *rate } }
            }
        };
        match self.conn.call(Body::Rule(rule), timeout)? {
            Body::RuleAck(Status::Ok) => Ok(()),
            Body::RuleAck(s) => Err(LinkError::Rejected(s)),
            _ => Err(LinkError::Transport("unexpected rule response".into())),
        }
    }
}

/// A local controller reached over its upstream connection.
pub struct RemoteNode(pub Arc<Connection>);

impl NodeLink for RemoteNode {
    fn collect(&self, timeout: Duration) -> Result<Vec<StatEntry>, LinkError> {
        match self.0.call(Body::CollectReq, timeout)? {
            Body::CollectResp(entries) => Ok(entries),
            _ => Err(LinkError::Transport("unexpected collect response".into())),
        }
    }

    fn apply_rules(&self, rules: &[Rule], timeout: Duration) -> Vec<Status> {
        rules
            .iter()
            .map(|r| match self.0.call(Body::Rule(r.clone()), timeout) {
                Ok(Body::RuleAck(s)) => s,
                _ => Status::Failed,
            })
            .collect()
    }
}

/// The global controller reached from a local controller.
pub struct RemoteUpstream(pub Arc<Connection>, pub Duration);

impl Upstream for RemoteUpstream {
    fn register(&self, info: &StageInfo) -> Result<(), LinkError> {
        match self.0.call(Body::RegisterStage(info.clone()), self.1)? {
            Body::RegisterAck { stage_id: 0 } => Err(LinkError::Rejected(Status::Failed)),
            _ => Ok(()),
        }
    }

    fn deregister(&self, stage_id: u64) -> Result<(), LinkError> {
        match self.0.call(Body::DeregisterStage { stage_id }, self.1)? {
            Body::DeregisterAck(Status::Ok) => Ok(()),
            Body::DeregisterAck(s) => Err(LinkError::Rejected(s)),
            _ => Err(LinkError::Transport("unexpected deregister response".into())),
        }
    }
}

/// A local controller serving stages on one socket and proxying to the
/// global controller over another.
pub struct LocalControllerServer {
    controller: Arc<LocalController>,
    upstream: Option<Arc<Connection>>,
    server: Server,
}

impl LocalControllerServer {
    pub fn start(
        listen: impl ToSocketAddrs,
        global: Option<SocketAddr>,
        controller: Arc<LocalController>,
    ) -> io::Result<Self> {
        let upstream = match global {
            Some(addr) => {
                let lc = Arc::downgrade(&controller);
                let handler: Handler = Arc::new(move |_, body| {
                    let lc = lc.upgrade()?;
                    match body {
                        Body::CollectReq => Some(Body::CollectResp(lc.aggregate_and_report().entries)),
                        Body::Rule(rule) => Some(Body::RuleAck(lc.apply_rules(&[rule])[0])),
                        _ => None,
                    }
                });
                let conn = Connection::connect(addr, handler)?;
                controller.set_upstream(Arc::new(RemoteUpstream(Arc::clone(&conn), Duration::from_secs(5))));
                Some(conn)
            }
            None => None,
        };
        let lc = Arc::downgrade(&controller);
        let handler: Handler = Arc::new(move |conn, body| {
            let lc = lc.upgrade()?;
            Some(match body {
                Body::RegisterStage(info) => {
                    let link = RemoteStage { conn: Arc::clone(conn), stage_id: 0, job_id: info.job_id.clone() };
                    let link = Arc::new(link);
                    // Link needs the id it is about to get; register through a slot.
                    let slot = Arc::new(Mutex::new(None::<u64>));
                    let result = lc.register_stage(info, Arc::new(LazyStage { inner: link, id: Arc::clone(&slot) }));
                    match result {
                        Ok(id) => {
                            *slot.lock() = Some(id);
                            let weak: Weak<LocalController> = Arc::downgrade(&lc);
                            conn.on_close(move || {
                                if let Some(lc) = weak.upgrade() {
                                    lc.deregister_stage(id);
                                }
                            });
                            Body::RegisterAck { stage_id: id }
                        }
                        Err(e) => {
                            log::warn!("rejected stage from {}: {e}", conn.peer());
                            Body::RegisterAck { stage_id: 0 }
                        }
                    }
                }
                Body::DeregisterStage { stage_id } => {
                    Body::DeregisterAck(if lc.deregister_stage(stage_id) { Status::Ok } else { Status::UnknownStage })
                }
                _ => return None,
            })
        });
        let server = Server::bind(listen, handler, |_| {})?;
        Ok(LocalControllerServer { controller, upstream, server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn controller(&self) -> &Arc<LocalController> {
        &self.controller
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
        if let Some(up) = self.upstream.take() {
            up.close();
        }
    }
}

impl Drop for LocalControllerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// RemoteStage whose stage id is filled in once registration completes.
struct LazyStage {
    inner: Arc<RemoteStage>,
    id: Arc<Mutex<Option<u64>>>,
}

impl LazyStage {
    fn bound(&self) -> RemoteStage {
        RemoteStage {
            conn: Arc::clone(&self.inner.conn),
            stage_id: self.id.lock().unwrap_or(0),
            job_id: self.inner.job_id.clone(),
        }
    }
}

impl StageLink for LazyStage {
    fn collect(&self, timeout: Duration) -> Result<StageStats, LinkError> {
        self.bound().collect(timeout)
    }

    fn apply(&self, rule: &HousekeepingRule, timeout: Duration) -> Result<(), LinkError> {
        self.bound().apply(rule, timeout)
    }
}

/// Accepts local controllers and feeds their registrations to a global controller.
pub struct GlobalControllerServer {
    server: Server,
}

impl GlobalControllerServer {
    pub fn start(listen: impl ToSocketAddrs, handle: GlobalHandle) -> io::Result<Self> {
        let joined: Arc<Mutex<HashSet<SocketAddr>>> = Arc::new(Mutex::new(HashSet::new()));
        let handler: Handler = Arc::new(move |conn, body| {
            let node = conn.peer().to_string();
            Some(match body {
                Body::RegisterStage(info) => {
                    if joined.lock().insert(conn.peer()) {
                        handle.node_joined(node.clone(), Arc::new(RemoteNode(Arc::clone(conn))));
                        let (h, n, j, peer) = (handle.clone(), node.clone(), Arc::clone(&joined), conn.peer());
                        conn.on_close(move || {
                            j.lock().remove(&peer);
                            h.node_left(n);
                        });
                    }
                    let stage_id = info.stage_id;
                    handle.stage_registered(node, info);
                    Body::RegisterAck { stage_id }
                }
                Body::DeregisterStage { stage_id } => {
                    handle.stage_deregistered(node, stage_id);
                    Body::DeregisterAck(Status::Ok)
                }
                Body::SetPolicy(blob) => {
                    let ok = Policy::from_blob(&blob).and_then(|p| handle.set_policy(p));
                    if let Err(e) = &ok {
                        log::warn!("policy from {node} rejected: {e}");
                    }
                    Body::PolicyAck(if ok.is_ok() { Status::Ok } else { Status::InvalidPolicy })
                }
                _ => return None,
            })
        });
        Ok(GlobalControllerServer { server: Server::bind(listen, handler, |_| {})? })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
    }
}

/// Submit a policy to a running global controller.
pub fn send_policy(addr: SocketAddr, policy: &Policy, timeout: Duration) -> Result<(), NetError> {
    let conn = Connection::connect(addr, Arc::new(|_, _| None))?;
    let resp = conn.call(Body::SetPolicy(policy.to_toml().into_bytes()), timeout);
    conn.close();
    match resp? {
        Body::PolicyAck(Status::Ok) => Ok(()),
        other => Err(NetError::Rejected(format!("{other:?}"))),
    }
}

/// A stage's connection to its local controller.
pub struct StageClient {
    conn: Arc<Connection>,
    stage_id: u64,
}

impl StageClient {
    /// Connect, register and start serving stats and rules for `stage`.
    pub fn attach(stage: Arc<Stage>, local: SocketAddr, timeout: Duration) -> Result<Self, NetError> {
        let s = Arc::clone(&stage);
        let handler: Handler = Arc::new(move |_, body| match body {
            Body::CollectReq => Some(Body::CollectResp(stats_to_entries(&s.collect_stats()))),
            Body::Rule(rule) => Some(Body::RuleAck(match s.apply_housekeeping_rule(&rule_to_housekeeping(&rule)) {
                Ok(()) => Status::Ok,
                Err(e) => status_of(&e),
            })),
            _ => None,
        });
        let conn = Connection::connect(local, handler)?;
        match conn.call(Body::RegisterStage(stage.info()), timeout)? {
            Body::RegisterAck { stage_id } if stage_id != 0 => {
                stage.set_stage_id(stage_id);
                Ok(StageClient { conn, stage_id })
            }
            _ => {
                conn.close();
                Err(NetError::Rejected("stage registration".into()))
            }
        }
    }

    pub fn stage_id(&self) -> u64 {
        self.stage_id
    }

    pub fn is_connected(&self) -> bool {
        !self.conn.is_closed()
    }

    /// Deregister and disconnect.
    pub fn detach(self, timeout: Duration) {
        let _ = self.conn.call(Body::DeregisterStage { stage_id: self.stage_id }, timeout);
    }
}

impl Drop for StageClient {
    fn drop(&mut self) {
        self.conn.close();
    }
}

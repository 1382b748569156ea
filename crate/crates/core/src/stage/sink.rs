//! Backends that requests are forwarded to once released by a stage.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicI32, AtomicU64, Ordering};

use parking_lot::Mutex;
use thiserror::Error;

use crate::request::{OpType, Request, Target};

/// First descriptor handed out by the in-memory sinks, mirroring POSIX where 0-2 are taken.
const FIRST_FD: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkOutcome {
    Done,
    Opened(i32),
    Transferred(u64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SinkError {
    #[error("bad file descriptor {0}")]
    BadFd(i32),
    #[error("path escapes sink root: {0}")]
    OutsideRoot(String),
    #[error("{op} failed on {target}: {message}")]
    Io { op: OpType, target: String, message: String },
    #[error("unsupported request: {0}")]
    Unsupported(String),
}

pub type SinkResult = Result<SinkOutcome, SinkError>;

pub trait Sink: Send + Sync {
    fn execute(&self, request: &Request) -> SinkResult;
}

/// Counts operations and fabricates descriptors; no side effects.
#[derive(Debug)]
pub struct NullSink {
    ops: AtomicU64,
    next_fd: AtomicI32,
}

impl NullSink {
    pub fn new() -> Self {
        NullSink { ops: AtomicU64::new(0), next_fd: AtomicI32::new(FIRST_FD) }
    }

    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }
}

impl Default for NullSink {
    fn default() -> Self {
        Self::new()
    }
}

impl Sink for NullSink {
    fn execute(&self, request: &Request) -> SinkResult {
        self.ops.fetch_add(1, Ordering::Relaxed);
        Ok(match request.op_type {
            OpType::Open => SinkOutcome::Opened(self.next_fd.fetch_add(1, Ordering::Relaxed)),
            OpType::Read | OpType::Write => SinkOutcome::Transferred(request.size),
            _ => SinkOutcome::Done,
        })
    }
}

/// Appends every executed request to an in-memory log.
#[derive(Debug)]
pub struct RecordingSink {
    log: Mutex<Vec<Request>>,
    next_fd: AtomicI32,
}

impl RecordingSink {
    pub fn new() -> Self {
        RecordingSink { log: Mutex::new(Vec::new()), next_fd: AtomicI32::new(FIRST_FD) }
    }

    pub fn log(&self) -> Vec<Request> {
        self.log.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.log.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.lock().is_empty()
    }
}

impl Default for RecordingSink {
    fn default() -> Self {
        Self::new()
    }
}

impl Sink for RecordingSink {
    fn execute(&self, request: &Request) -> SinkResult {
        self.log.lock().push(request.clone());
        Ok(match request.op_type {
            OpType::Open => SinkOutcome::Opened(self.next_fd.fetch_add(1, Ordering::Relaxed)),
            OpType::Read | OpType::Write => SinkOutcome::Transferred(request.size),
            _ => SinkOutcome::Done,
        })
    }
}

/// Applies operations to a real directory tree. Absolute request paths are
/// re-rooted under `root`; `..` components are refused.
#[derive(Debug)]
pub struct DirectorySink {
    root: PathBuf,
    files: Mutex<HashMap<i32, File>>,
    next_fd: AtomicI32,
}

impl DirectorySink {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(DirectorySink { root, files: Mutex::new(HashMap::new()), next_fd: AtomicI32::new(FIRST_FD) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, SinkError> {
        let mut out = self.root.clone();
        for comp in Path::new(path).components() {
            match comp {
                Component::RootDir | Component::CurDir => {}
                Component::Normal(c) => out.push(c),
                Component::ParentDir | Component::Prefix(_) => {
                    return Err(SinkError::OutsideRoot(path.to_string()))
                }
            }
        }
        Ok(out)
    }

    fn io_err(op: OpType, target: &str, e: std::io::Error) -> SinkError {
        SinkError::Io { op, target: target.to_string(), message: e.to_string() }
    }

    fn with_file<T>(&self, fd: i32, f: impl FnOnce(&mut File) -> std::io::Result<T>, op: OpType) -> Result<T, SinkError> {
        let mut files = self.files.lock();
        let file = files.get_mut(&fd).ok_or(SinkError::BadFd(fd))?;
        f(file).map_err(|e| Self::io_err(op, &fd.to_string(), e))
    }
}

impl Sink for DirectorySink {
    fn execute(&self, request: &Request) -> SinkResult {
        let op = request.op_type;
        match &request.target {
            Target::Path(p) => {
                let path = self.resolve(p)?;
                let err = |e| Self::io_err(op, p, e);
                match op {
                    OpType::Open => {
                        if let Some(parent) = path.parent() {
                            fs::create_dir_all(parent).map_err(err)?;
                        }
                        let file = OpenOptions::new()
                            .read(true)
                            .write(true)
                            .create(true)
                            .truncate(false)
                            .open(&path)
                            .map_err(err)?;
                        let fd = self.next_fd.fetch_add(1, Ordering::Relaxed);
                        self.files.lock().insert(fd, file);
                        Ok(SinkOutcome::Opened(fd))
                    }
                    OpType::Getattr => fs::metadata(&path).map(|_| SinkOutcome::Done).map_err(err),
                    OpType::Setattr => {
                        let perms = fs::metadata(&path).map_err(err)?.permissions();
                        fs::set_permissions(&path, perms).map(|_| SinkOutcome::Done).map_err(err)
                    }
                    OpType::Rename => {
                        let dest = request
                            .dest
                            .as_deref()
                            .ok_or_else(|| SinkError::Unsupported("rename without destination".into()))?;
                        let dest = self.resolve(dest)?;
                        fs::rename(&path, dest).map(|_| SinkOutcome::Done).map_err(err)
                    }
                    OpType::Mkdir => fs::create_dir(&path).map(|_| SinkOutcome::Done).map_err(err),
                    OpType::Mknod => OpenOptions::new()
                        .write(true)
                        .create_new(true)
                        .open(&path)
                        .map(|_| SinkOutcome::Done)
                        .map_err(err),
                    OpType::Rmdir => fs::remove_dir(&path).map(|_| SinkOutcome::Done).map_err(err),
                    OpType::Unlink => fs::remove_file(&path).map(|_| SinkOutcome::Done).map_err(err),
                    // statvfs is not in std; the root's metadata stands in for it.
                    OpType::Statfs => fs::metadata(&self.root).map(|_| SinkOutcome::Done).map_err(err),
                    OpType::Sync => Ok(SinkOutcome::Done),
                    OpType::Close | OpType::Read | OpType::Write => {
                        Err(SinkError::Unsupported(format!("{op} on a path")))
                    }
                }
            }
            Target::Fd(fd) => {
                let fd = *fd;
                match op {
                    OpType::Close => self.files.lock().remove(&fd).map(|_| SinkOutcome::Done).ok_or(SinkError::BadFd(fd)),
                    OpType::Read => {
                        let mut buf = vec![0u8; request.size as usize];
                        self.with_file(fd, |f| f.read(&mut buf), op).map(|n| SinkOutcome::Transferred(n as u64))
                    }
                    OpType::Write => {
                        let buf = vec![0xA5u8; request.size as usize];
                        self.with_file(
                            fd,
                            |f| {
                                f.seek(SeekFrom::End(0))?;
                                f.write_all(&buf)
                            },
                            op,
                        )
                        .map(|_| SinkOutcome::Transferred(request.size))
                    }
                    OpType::Sync => self.with_file(fd, |f| f.sync_all(), op).map(|_| SinkOutcome::Done),
                    _ => Err(SinkError::Unsupported(format!("{op} on a descriptor"))),
                }
            }
        }
    }
}

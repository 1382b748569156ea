//! Request vocabulary and attribute classification.
//!
//! A [`Request`] is one POSIX-like operation. Stages route requests to
//! channels by hashing a single selected attribute into a [`ClassifierToken`].
//! The hash is MurmurHash64A seeded with a deployment-wide salt mixed with
//! the granularity, so tokens of different granularities never share a domain.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default deployment salt. Controllers and stages must agree on it.
pub const DEFAULT_SALT: u64 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("unknown operation type `{0}`")]
    UnknownOpType(String),
    #[error("unknown operation class `{0}`")]
    UnknownOpClass(String),
    #[error("unknown match granularity `{0}`")]
    UnknownGranularity(String),
    #[error("{op} is not a data operation and must have size 0 (got {size})")]
    SizeOnNonData { op: OpType, size: u64 },
    #[error("{0} requires a path target")]
    PathRequired(OpType),
    #[error("{0} requires a file-descriptor target")]
    FdRequired(OpType),
    #[error("empty matcher value")]
    EmptyMatcher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Open,
    Close,
    Read,
    Write,
    Getattr,
    Setattr,
    Rename,
    Mkdir,
    Mknod,
    Rmdir,
    Statfs,
    Sync,
    Unlink,
}

impl OpType {
    pub const ALL: [OpType; 13] = [
        OpType::Open,
        OpType::Close,
        OpType::Read,
        OpType::Write,
        OpType::Getattr,
        OpType::Setattr,
        OpType::Rename,
        OpType::Mkdir,
        OpType::Mknod,
        OpType::Rmdir,
        OpType::Statfs,
        OpType::Sync,
        OpType::Unlink,
    ];

    pub fn class(self) -> OpClass {
        op_class_of(self)
    }

    /// Stable numeric code, used by the hash and the wire format.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<OpType> {
        OpType::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpType::Open => "open",
            OpType::Close => "close",
            OpType::Read => "read",
            OpType::Write => "write",
            OpType::Getattr => "getattr",
            OpType::Setattr => "setattr",
            OpType::Rename => "rename",
            OpType::Mkdir => "mkdir",
            OpType::Mknod => "mknod",
            OpType::Rmdir => "rmdir",
            OpType::Statfs => "statfs",
            OpType::Sync => "sync",
            OpType::Unlink => "unlink",
        }
    }

    /// Operations addressed by file descriptor rather than by path.
    pub fn is_fd_based(self) -> bool {
        matches!(self, OpType::Close | OpType::Read | OpType::Write | OpType::Sync)
    }

    pub fn is_open_like(self) -> bool {
        self == OpType::Open
    }

    pub fn is_close_like(self) -> bool {
        self == OpType::Close
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpType {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpType::ALL
            .iter()
            .copied()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RequestError::UnknownOpType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Data,
    Metadata,
    ExtendedAttributes,
    DirectoryManagement,
}

impl OpClass {
    pub const ALL: [OpClass; 4] = [
        OpClass::Data,
        OpClass::Metadata,
        OpClass::ExtendedAttributes,
        OpClass::DirectoryManagement,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Data => "data",
            OpClass::Metadata => "metadata",
            OpClass::ExtendedAttributes => "extended_attributes",
            OpClass::DirectoryManagement => "directory_management",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpClass {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpClass::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RequestError::UnknownOpClass(s.to_string()))
    }
}

pub fn op_class_of(op: OpType) -> OpClass {
    match op {
        OpType::Read | OpType::Write => OpClass::Data,
        OpType::Open | OpType::Close | OpType::Rename | OpType::Unlink | OpType::Statfs | OpType::Sync => {
            OpClass::Metadata
        }
        OpType::Getattr | OpType::Setattr => OpClass::ExtendedAttributes,
        OpType::Mkdir | OpType::Mknod | OpType::Rmdir => OpClass::DirectoryManagement,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Path(String),
    Fd(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op_type: OpType,
    /// Bytes moved; zero for every non-data operation.
    pub size: u64,
    pub target: Target,
    /// Destination path for `rename`.
    pub dest: Option<String>,
    pub user_id: Arc<str>,
    pub job_id: Arc<str>,
    /// Monotonic nanoseconds, filled in by the submitter.
    pub submit_time: u64,
}

thread_local! {
    static EMPTY_ID: Arc<str> = Arc::from("");
}

fn empty_id() -> Arc<str> {
    EMPTY_ID.with(Arc::clone)
}

impl Request {
    pub fn path(op_type: OpType, path: impl Into<String>) -> Self {
        Request {
            op_type,
            size: 0,
            target: Target::Path(path.into()),
            dest: None,
            user_id: empty_id(),
            job_id: empty_id(),
            submit_time: 0,
        }
    }

    pub fn fd(op_type: OpType, fd: i32) -> Self {
        Request {
            op_type,
            size: 0,
            target: Target::Fd(fd),
            dest: None,
            user_id: empty_id(),
            job_id: empty_id(),
            submit_time: 0,
        }
    }

    pub fn with_size(mut self, size: u64) -> Self {
        self.size = size;
        self
    }

    pub fn with_job(mut self, job_id: impl Into<String>) -> Self {
        self.job_id = Arc::from(job_id.into());
        self
    }

    pub fn with_user(mut self, user_id: impl Into<String>) -> Self {
        self.user_id = Arc::from(user_id.into());
        self
    }

    pub fn with_dest(mut self, dest: impl Into<String>) -> Self {
        self.dest = Some(dest.into());
        self
    }

    pub fn op_class(&self) -> OpClass {
        op_class_of(self.op_type)
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        if self.size > 0 && self.op_class() != OpClass::Data {
            return Err(RequestError::SizeOnNonData { op: self.op_type, size: self.size });
        }
        match (&self.target, self.op_type.is_fd_based()) {
            (Target::Path(_), true) if self.op_type != OpType::Sync => Err(RequestError::FdRequired(self.op_type)),
            (Target::Fd(_), false) => Err(RequestError::PathRequired(self.op_type)),
            _ => Ok(()),
        }
    }
}

/// Which single attribute a channel matches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    OpType,
    OpClass,
    Job,
    User,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Granularity::OpType, Granularity::OpClass, Granularity::Job, Granularity::User];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Granularity> {
        Granularity::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::OpType => "op_type",
            Granularity::OpClass => "op_class",
            Granularity::Job => "job",
            Granularity::User => "user",
        }
    }

    fn seed(self, salt: u64) -> u64 {
        // Distinct odd multipliers keep the four hash domains apart.
        salt ^ (u64::from(self.code()) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .iter()
            .copied()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RequestError::UnknownGranularity(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassifierToken(pub u64);

impl fmt::Display for ClassifierToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// A channel matcher: one attribute value at one granularity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Matcher {
    OpType(OpType),
    OpClass(OpClass),
    Job(String),
    User(String),
}

impl Matcher {
    pub fn parse(granularity: Granularity, value: &str) -> Result<Matcher, RequestError> {
        Ok(match granularity {
            Granularity::OpType => Matcher::OpType(value.parse()?),
            Granularity::OpClass => Matcher::OpClass(value.parse()?),
            Granularity::Job if value.is_empty() => return Err(RequestError::EmptyMatcher),
            Granularity::Job => Matcher::Job(value.to_string()),
            Granularity::User if value.is_empty() => return Err(RequestError::EmptyMatcher),
            Granularity::User => Matcher::User(value.to_string()),
        })
    }

    pub fn granularity(&self) -> Granularity {
        match self {
            Matcher::OpType(_) => Granularity::OpType,
            Matcher::OpClass(_) => Granularity::OpClass,
            Matcher::Job(_) => Granularity::Job,
            Matcher::User(_) => Granularity::User,
        }
    }

    pub fn value(&self) -> String {
        match self {
            Matcher::OpType(op) => op.name().to_string(),
            Matcher::OpClass(c) => c.name().to_string(),
            Matcher::Job(s) | Matcher::User(s) => s.clone(),
        }
    }

    pub fn token(&self, salt: u64) -> ClassifierToken {
        let g = self.granularity();
        match self {
            Matcher::OpType(op) => attribute_token(g, &[op.code()], salt),
            Matcher::OpClass(c) => attribute_token(g, &[c.code()], salt),
            Matcher::Job(s) | Matcher::User(s) => attribute_token(g, s.as_bytes(), salt),
        }
    }
}

fn attribute_token(granularity: Granularity, bytes: &[u8], salt: u64) -> ClassifierToken {
    ClassifierToken(murmur64a(bytes, granularity.seed(salt)))
}

/// Hash exactly the attribute selected by `granularity`.
pub fn classify(request: &Request, granularity: Granularity, salt: u64) -> ClassifierToken {
    match granularity {
        Granularity::OpType => attribute_token(granularity, &[request.op_type.code()], salt),
        Granularity::OpClass => attribute_token(granularity, &[request.op_class().code()], salt),
        Granularity::Job => attribute_token(granularity, request.job_id.as_bytes(), salt),
        Granularity::User => attribute_token(granularity, request.user_id.as_bytes(), salt),
    }
}

/// MurmurHash64A (Austin Appleby), little-endian block reads.
pub fn murmur64a(key: &[u8], seed: u64) -> u64 {
    const M: u64 = 0xc6a4_a793_5bd1_e995;
    const R: u32 = 47;

    let mut h = seed ^ (key.len() as u64).wrapping_mul(M);

    let mut blocks = key.chunks_exact(8);
    for block in &mut blocks {
        let mut k = u64::from_le_bytes(block.try_into().expect("8-byte chunk"));
        k = k.wrapping_mul(M);
        k ^= k >> R;
        k = k.wrapping_mul(M);
        h ^= k;
        h = h.wrapping_mul(M);
    }

    let tail = blocks.remainder();
    if !tail.is_empty() {
        for (i, b) in tail.iter().enumerate() {
            h ^= u64::from(*b) << (8 * i);
        }
        h = h.wrapping_mul(M);
    }

    h ^= h >> R;
    h = h.wrapping_mul(M);
    h ^= h >> R;
    h
}

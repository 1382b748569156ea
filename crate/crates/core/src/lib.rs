//! Storage QoS middleware: a rate-limiting data plane for file-system
//! requests and the hierarchical control plane that drives it.
//!
//! Applications submit [`request::Request`]s to a [`stage::Stage`], which
//! filters by mountpoint, classifies each request onto a channel and paces
//! channels with token buckets. Local controllers proxy stage statistics and
//! rules; the global controller runs the collect/compute/enforce loop with
//! one of the allocation algorithms in [`algorithms`].

pub mod algorithms;
pub mod clock;
pub mod controller;
pub mod protocol;
pub mod rate_limiter;
pub mod request;
pub mod stage;
pub mod workload;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Stage(#[from] stage::StageError),
    #[error(transparent)]
    Request(#[from] request::RequestError),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

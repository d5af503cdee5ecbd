//! HTTP job service for guided sampling.
//!
//! Jobs are submitted as JSON with base64 PNG drawings, executed FIFO on a
//! worker pool sharing one loaded checkpoint, and persisted under a data
//! directory so that a restarted service resumes unfinished work.

pub mod api;
pub mod error;
pub mod job;
pub mod service;
pub mod store;

pub use api::{router, serve, shutdown_signal};
pub use error::{Result, ServiceError};
pub use job::{JobKind, JobRecord, JobRequest, JobStatus, Model};
pub use service::{Health, Service, ServiceConfig};
pub use store::JobStore;

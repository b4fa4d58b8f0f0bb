//! Asynchronous inpainting jobs over HTTP.
//!
//! Clients submit an image, a hole mask and a line drawing as PNG parts of a
//! multipart request, poll the job, and fetch the composited result. Each
//! loaded model has one worker thread fed by a bounded FIFO queue.

pub mod api;
pub mod error;
pub mod jobs;
pub mod registry;

pub use api::{decode_job_input, router, serve, AppState, DEFAULT_MODEL};
pub use error::ServiceError;
pub use jobs::{JobInput, JobManager, JobStatus, JobView, QUEUE_CAPACITY};
pub use registry::{ModelView, Registry};

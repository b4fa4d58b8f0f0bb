use std::collections::HashMap;
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use muralfill_core::models::ModelBundle;
use muralfill_core::raster::encode_rgb_png;
use muralfill_core::{LineDrawing, Mask};
use ndarray::Array3;
use serde::Serialize;

use crate::error::ServiceError;

/// Jobs waiting per model beyond the one running.
pub const QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

/// Validated inputs of one job, at their submitted size.
#[derive(Debug, Clone)]
pub struct JobInput {
    pub image: Array3<u8>,
    pub mask: Mask,
    pub line: LineDrawing,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub queued_ms: Option<u64>,
    pub run_ms: Option<u64>,
}

/// Status document of `GET /api/jobs/{id}`.
#[derive(Debug, Clone, Serialize)]
pub struct JobView {
    pub id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub hole_ratio: f64,
    pub model: String,
    pub model_fingerprint: String,
    pub height: usize,
    pub width: usize,
    pub timings: Timings,
}

struct Job {
    view: JobView,
    submitted: Instant,
    started: Option<Instant>,
    /// PNG bytes; set in the same critical section that marks the job done.
    result: Option<Arc<Vec<u8>>>,
}

struct Ticket {
    id: String,
    bundle: Arc<ModelBundle>,
    input: JobInput,
}

/// A finished job's payload.
#[derive(Debug, Clone)]
pub struct JobResult {
    pub view: JobView,
    pub png: Arc<Vec<u8>>,
}

/// Job table plus one FIFO worker thread per model.
#[derive(Default)]
pub struct JobManager {
    jobs: Arc<Mutex<HashMap<String, Job>>>,
    workers: Mutex<HashMap<String, SyncSender<Ticket>>>,
}

impl JobManager {
    pub fn new() -> Self {
        Self::default()
    }

    fn sender(&self, model: &str) -> SyncSender<Ticket> {
        let mut workers = self.workers.lock().expect("worker map");
        workers
            .entry(model.to_string())
            .or_insert_with(|| {
                let (tx, rx) = sync_channel::<Ticket>(QUEUE_CAPACITY);
                let jobs = self.jobs.clone();
                std::thread::Builder::new()
                    .name(format!("inpaint-{model}"))
                    .spawn(move || {
                        for ticket in rx {
                            run_ticket(&jobs, ticket);
                        }
                    })
                    .expect("spawn inference worker");
                tx
            })
            .clone()
    }

    /// Queues a job and returns its id without waiting for it.
    pub fn submit(&self, model: &str, bundle: Arc<ModelBundle>, input: JobInput) -> Result<String, ServiceError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (height, width, _) = input.image.dim();
        let view = JobView {
            id: id.clone(),
            status: JobStatus::Queued,
            error: None,
            hole_ratio: input.mask.hole_fraction(),
            model: model.to_string(),
            model_fingerprint: bundle.fingerprint(),
            height,
            width,
            timings: Timings::default(),
        };
        self.jobs.lock().expect("job table").insert(
            id.clone(),
            Job {
                view,
                submitted: Instant::now(),
                started: None,
                result: None,
            },
        );
        let ticket = Ticket {
            id: id.clone(),
            bundle,
            input,
        };
        match self.sender(model).try_send(ticket) {
            Ok(()) => Ok(id),
            Err(e) => {
                self.jobs.lock().expect("job table").remove(&id);
                Err(match e {
                    TrySendError::Full(_) => ServiceError::QueueFull(model.to_string()),
                    TrySendError::Disconnected(_) => ServiceError::Internal(format!("the worker for `{model}` has stopped")),
                })
            }
        }
    }

    pub fn status(&self, id: &str) -> Result<JobView, ServiceError> {
        self.jobs
            .lock()
            .expect("job table")
            .get(id)
            .map(|j| j.view.clone())
            .ok_or_else(|| ServiceError::NotFound(format!("no job `{id}`")))
    }

    pub fn result(&self, id: &str) -> Result<JobResult, ServiceError> {
        let jobs = self.jobs.lock().expect("job table");
        let job = jobs.get(id).ok_or_else(|| ServiceError::NotFound(format!("no job `{id}`")))?;
        match (job.view.status, &job.result) {
            (JobStatus::Done, Some(png)) => Ok(JobResult {
                view: job.view.clone(),
                png: png.clone(),
            }),
            (JobStatus::Failed, _) => Err(ServiceError::JobFailed(
                job.view.error.clone().unwrap_or_else(|| "job failed".into()),
            )),
            (status, _) => Err(ServiceError::Conflict(format!(
                "job `{id}` is {} and has no result yet",
                serde_json::to_value(status).expect("status serializes").as_str().unwrap_or("pending")
            ))),
        }
    }

    /// Blocks until the job leaves the queue; used by the CLI and tests.
    pub fn wait(&self, id: &str) -> Result<JobView, ServiceError> {
        loop {
            let view = self.status(id)?;
            if matches!(view.status, JobStatus::Done | JobStatus::Failed) {
                return Ok(view);
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
    }
}

fn run_ticket(jobs: &Mutex<HashMap<String, Job>>, ticket: Ticket) {
    {
        let mut table = jobs.lock().expect("job table");
        let Some(job) = table.get_mut(&ticket.id) else { return };
        let now = Instant::now();
        job.view.status = JobStatus::Running;
        job.view.timings.queued_ms = Some(now.duration_since(job.submitted).as_millis() as u64);
        job.started = Some(now);
    }
    let JobInput { image, mask, line } = &ticket.input;
    let outcome = ticket
        .bundle
        .inpaint_pixels(image, line, mask)
        .and_then(|pixels| encode_rgb_png(&pixels));
    let mut table = jobs.lock().expect("job table");
    let Some(job) = table.get_mut(&ticket.id) else { return };
    job.view.timings.run_ms = job.started.map(|s| s.elapsed().as_millis() as u64);
    match outcome {
        Ok(png) => {
            job.result = Some(Arc::new(png));
            job.view.status = JobStatus::Done;
        }
        Err(e) => {
            log::warn!("job {} failed: {e}", ticket.id);
            job.view.error = Some(e.to_string());
            job.view.status = JobStatus::Failed;
        }
    }
}

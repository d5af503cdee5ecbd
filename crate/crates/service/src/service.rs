use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use diss_core::Checkpoint;

use crate::error::{Result, ServiceError};
use crate::job::{self, JobRecord, JobRequest, JobStatus, Model};
use crate::store::JobStore;

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_QUEUE_CAPACITY: usize = 256;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub port: u16,
    pub workers: usize,
    pub queue_capacity: usize,
}

/// One less than the number of cores, but at least one.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get().saturating_sub(1).max(1))
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, checkpoint: Option<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            checkpoint,
            port: DEFAULT_PORT,
            workers: default_workers(),
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }

    /// Reads `DISS_DATA_DIR`, `DISS_CHECKPOINT` and `DISS_PORT`.
    pub fn from_env() -> Result<Self> {
        let data_dir = std::env::var_os("DISS_DATA_DIR").map_or_else(|| PathBuf::from("diss-data"), PathBuf::from);
        let checkpoint = std::env::var_os("DISS_CHECKPOINT").map(PathBuf::from);
        let mut cfg = ServiceConfig::new(data_dir, checkpoint);
        if let Ok(p) = std::env::var("DISS_PORT") {
            cfg.port = p
                .parse()
                .map_err(|_| ServiceError::validation("DISS_PORT", format!("not a port number: {p:?}")))?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    /// `ok`, or `degraded` when no model is loaded.
    pub status: String,
    pub checkpoint_sha256: Option<String>,
    pub model_size: Option<usize>,
    pub steps: Option<usize>,
    pub queue_depth: usize,
    pub workers: usize,
    pub running: usize,
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

struct Queue {
    ids: VecDeque<String>,
    shutting_down: bool,
}

pub struct Service {
    store: JobStore,
    model: Option<Arc<Model>>,
    degraded: Option<String>,
    queue: Mutex<Queue>,
    ready: Condvar,
    capacity: usize,
    workers: usize,
    running: AtomicUsize,
    submitted: AtomicU64,
    completed: AtomicU64,
    failed: AtomicU64,
    handles: Mutex<Vec<JoinHandle<()>>>,
}

impl Service {
    /// Opens the store, re-queues unfinished jobs and starts the workers.
    ///
    /// A missing or unreadable checkpoint yields a degraded service that
    /// answers health and status queries but rejects new jobs.
    pub fn start(cfg: &ServiceConfig) -> Result<Arc<Self>> {
        let (model, degraded) = match &cfg.checkpoint {
            None => (None, Some("no checkpoint configured".to_string())),
            Some(p) => match Checkpoint::load(p).and_then(|c| Model::from_checkpoint(&c)) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(format!("checkpoint {}: {e}", p.display()))),
            },
        };
        Self::with_model(cfg, model, degraded)
    }

    /// Like [`Service::start`] but fails when the checkpoint cannot be loaded.
    pub fn start_strict(cfg: &ServiceConfig) -> Result<Arc<Self>> {
        let path = cfg
            .checkpoint
            .as_ref()
            .ok_or_else(|| ServiceError::validation("checkpoint", "no checkpoint configured"))?;
        let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
        Self::with_model(cfg, Some(model), None)
    }

    pub fn with_model(cfg: &ServiceConfig, model: Option<Model>, degraded: Option<String>) -> Result<Arc<Self>> {
        let (store, recovery) = JobStore::open(&cfg.data_dir)?;
        if !recovery.requeued.is_empty() {
            tracing::info!("re-queued {} unfinished jobs", recovery.requeued.len());
        }
        let workers = if model.is_some() { cfg.workers.max(1) } else { 0 };
        let svc = Arc::new(Service {
            store,
            model: model.map(Arc::new),
            degraded,
            queue: Mutex::new(Queue {
                ids: recovery.requeued.into(),
                shutting_down: false,
            }),
            ready: Condvar::new(),
            capacity: cfg.queue_capacity,
            workers,
            running: AtomicUsize::new(0),
            submitted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            handles: Mutex::new(Vec::new()),
        });
        let mut handles = svc.handles.lock().unwrap();
        for i in 0..workers {
            let s = Arc::clone(&svc);
            let h = std::thread::Builder::new()
                .name(format!("diss-worker-{i}"))
                .spawn(move || s.worker_loop())?;
            handles.push(h);
        }
        drop(handles);
        Ok(svc)
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_deref()
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn submit(&self, req: JobRequest) -> Result<String> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| ServiceError::Degraded(self.degraded.clone().unwrap_or_default()))?;
        let inputs = job::validate(&req, model.image_size(), model.steps())?;
        let mut q = self.queue.lock().unwrap();
        if q.shutting_down {
            return Err(ServiceError::Degraded("shutting down".into()));
        }
        if q.ids.len() >= self.capacity {
            return Err(ServiceError::AtCapacity(q.ids.len()));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.store.insert(JobRecord::new(id.clone(), inputs.kind, req))?;
        q.ids.push_back(id.clone());
        self.submitted.fetch_add(1, Ordering::SeqCst);
        drop(q);
        self.ready.notify_one();
        Ok(id)
    }

    pub fn status(&self, id: &str) -> Result<JobRecord> {
        self.store.get(id)
    }

    pub fn image(&self, reference: &str) -> Result<Vec<u8>> {
        self.store.image(reference)
    }

    pub fn queue_depth(&self) -> usize {
        self.queue.lock().unwrap().ids.len()
    }

    pub fn health(&self) -> Health {
        let m = self.model.as_deref();
        Health {
            status: if m.is_some() { "ok" } else { "degraded" }.into(),
            checkpoint_sha256: m.map(|m| m.checkpoint_sha256.clone()),
            model_size: m.map(Model::image_size),
            steps: m.map(Model::steps),
            queue_depth: self.queue_depth(),
            workers: self.workers,
            running: self.running.load(Ordering::SeqCst),
            submitted: self.submitted.load(Ordering::SeqCst),
            completed: self.completed.load(Ordering::SeqCst),
            failed: self.failed.load(Ordering::SeqCst),
            detail: self.degraded.clone(),
        }
    }

    fn next_job(&self) -> Option<String> {
        let mut q = self.queue.lock().unwrap();
        loop {
            if q.shutting_down {
                return None;
            }
            if let Some(id) = q.ids.pop_front() {
                self.running.fetch_add(1, Ordering::SeqCst);
                return Some(id);
            }
            q = self.ready.wait(q).unwrap();
        }
    }

    fn worker_loop(&self) {
        while let Some(id) = self.next_job() {
            if let Err(e) = self.process(&id) {
                tracing::error!("job {id}: {e}");
            }
            self.running.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn process(&self, id: &str) -> Result<()> {
        let Some(model) = self.model.as_deref() else {
            return Ok(());
        };
        let rec = self.store.update(id, |r| r.advance(JobStatus::Running))?;
        let outcome = catch_unwind(AssertUnwindSafe(|| job::execute(&rec.request, model)))
            .unwrap_or_else(|_| Err(ServiceError::Degraded("worker panicked".into())));
        match outcome {
            Ok(png) => {
                self.store.complete(id, &png)?;
                self.completed.fetch_add(1, Ordering::SeqCst);
            }
            Err(e) => {
                self.store.fail(id, e.to_string())?;
                self.failed.fetch_add(1, Ordering::SeqCst);
            }
        }
        Ok(())
    }

    /// Stops taking jobs, lets running jobs finish and joins the workers.
    /// Jobs still queued stay queued on disk and run after the next start.
    pub fn shutdown(&self) {
        self.queue.lock().unwrap().shutting_down = true;
        self.ready.notify_all();
        let handles: Vec<_> = self.handles.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

//! On-disk job store: one JSON file per job plus one PNG per finished job.
//!
//! ```text
//! <data_dir>/jobs/<id>.json
//! <data_dir>/images/<id>.png
//! ```
//!
//! Every file is replaced atomically, so a crash leaves either the previous
//! or the next version of a record. All record writes go through one lock.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use diss_core::fsio::{is_temp_file, write_atomic};

use crate::error::{Result, ServiceError};
use crate::job::{JobRecord, JobStatus};

pub struct JobStore {
    jobs_dir: PathBuf,
    images_dir: PathBuf,
    records: Mutex<HashMap<String, JobRecord>>,
}

/// What [`JobStore::open`] found on disk.
#[derive(Debug, Default)]
pub struct Recovery {
    /// Unfinished jobs, re-marked queued, oldest first.
    pub requeued: Vec<String>,
    /// Unreadable record files moved aside.
    pub quarantined: Vec<PathBuf>,
    pub removed_temp_files: usize,
}

impl JobStore {
    /// Opens (or creates) a store and recovers from an unclean shutdown.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<(Self, Recovery)> {
        let data_dir = data_dir.as_ref();
        let jobs_dir = data_dir.join("jobs");
        let images_dir = data_dir.join("images");
        fs::create_dir_all(&jobs_dir)?;
        fs::create_dir_all(&images_dir)?;

        let mut recovery = Recovery::default();
        for dir in [&jobs_dir, &images_dir] {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if is_temp_file(&path) {
                    fs::remove_file(&path)?;
                    recovery.removed_temp_files += 1;
                }
            }
        }

        let mut records = HashMap::new();
        for entry in fs::read_dir(&jobs_dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let parsed = fs::read(&path)
                .map_err(ServiceError::from)
                .and_then(|b| serde_json::from_slice::<JobRecord>(&b).map_err(ServiceError::from));
            match parsed {
                Ok(rec) => {
                    records.insert(rec.id.clone(), rec);
                }
                Err(e) => {
                    tracing::warn!("quarantining unreadable job record {}: {e}", path.display());
                    let bad = data_dir.join("quarantine");
                    fs::create_dir_all(&bad)?;
                    let dest = bad.join(path.file_name().unwrap_or_default());
                    fs::rename(&path, &dest)?;
                    recovery.quarantined.push(dest);
                }
            }
        }

        let store = JobStore {
            jobs_dir,
            images_dir,
            records: Mutex::new(HashMap::new()),
        };
        let mut pending: Vec<JobRecord> = Vec::new();
        for (_, mut rec) in records {
            if rec.status == JobStatus::Done && !store.image_path(&rec.id).exists() {
                // A done record always follows its image; treat a missing one as unfinished.
                rec.status = JobStatus::Running;
                rec.output = None;
                rec.finished = None;
            }
            if !rec.status.is_terminal() {
                rec.requeue();
                store.write_record(&rec)?;
                pending.push(rec.clone());
            }
            store.records.lock().unwrap().insert(rec.id.clone(), rec);
        }
        pending.sort_by(|a, b| (&a.created, &a.id).cmp(&(&b.created, &b.id)));
        recovery.requeued = pending.into_iter().map(|r| r.id).collect();
        Ok((store, recovery))
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.jobs_dir.join(format!("{id}.json"))
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.images_dir.join(format!("{id}.png"))
    }

    fn write_record(&self, rec: &JobRecord) -> Result<()> {
        write_atomic(self.record_path(&rec.id), &serde_json::to_vec_pretty(rec)?)?;
        Ok(())
    }

    pub fn insert(&self, rec: JobRecord) -> Result<()> {
        let mut records = self.records.lock().unwrap();
        if records.contains_key(&rec.id) {
            return Err(ServiceError::validation("id", format!("duplicate job id {}", rec.id)));
        }
        self.write_record(&rec)?;
        records.insert(rec.id.clone(), rec);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<JobRecord> {
        self.records
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    /// Applies `f` to a record and persists the result, under the store lock.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord) -> Result<()>) -> Result<JobRecord> {
        let mut records = self.records.lock().unwrap();
        let current = records.get(id).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
        let mut next = current.clone();
        f(&mut next)?;
        self.write_record(&next)?;
        records.insert(id.to_string(), next.clone());
        Ok(next)
    }

    /// Stores the output image, then marks the job done.
    pub fn complete(&self, id: &str, png: &[u8]) -> Result<JobRecord> {
        write_atomic(self.image_path(id), png)?;
        self.update(id, |r| {
            r.advance(JobStatus::Done)?;
            r.output = Some(id.to_string());
            Ok(())
        })
    }

    pub fn fail(&self, id: &str, message: String) -> Result<JobRecord> {
        self.update(id, |r| {
            r.advance(JobStatus::Failed)?;
            r.error = Some(message);
            Ok(())
        })
    }

    /// Output bytes of a finished job.
    pub fn image(&self, reference: &str) -> Result<Vec<u8>> {
        let not_found = || ServiceError::NotFound(format!("image {reference}"));
        let rec = self.get(reference).map_err(|_| not_found())?;
        if rec.status != JobStatus::Done || rec.output.as_deref() != Some(reference) {
            return Err(not_found());
        }
        fs::read(self.image_path(reference)).map_err(|_| not_found())
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, status: JobStatus) -> usize {
        self.records.lock().unwrap().values().filter(|r| r.status == status).count()
    }
}

//! In-memory registry of map-all jobs. Progress only moves forward and a job
//! reaches a terminal state once.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobStatus {
    pub job_id: String,
    pub project_id: String,
    pub state: JobState,
    pub total: usize,
    pub processed: usize,
    /// Elements whose recommendation failed; they keep their previous status.
    pub failed: usize,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
pub struct Jobs {
    inner: Mutex<HashMap<String, JobStatus>>,
}

impl Jobs {
    pub fn create(&self, project_id: &str, total: usize) -> JobStatus {
        let status = JobStatus {
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            project_id: project_id.to_string(),
            state: JobState::Running,
            total,
            processed: 0,
            failed: 0,
            error: None,
        };
        self.lock().insert(status.job_id.clone(), status.clone());
        status
    }

    pub fn get(&self, job_id: &str) -> Option<JobStatus> {
        self.lock().get(job_id).cloned()
    }

    pub fn progress(&self, job_id: &str, processed: usize) {
        if let Some(job) = self.lock().get_mut(job_id) {
            if job.state == JobState::Running {
                job.processed = job.processed.max(processed.min(job.total));
            }
        }
    }

    /// Moves a running job to its terminal state. Later calls are ignored.
    pub fn finish(&self, job_id: &str, failed: usize, error: Option<String>) {
        if let Some(job) = self.lock().get_mut(job_id) {
            if job.state != JobState::Running {
                return;
            }
            job.failed = failed;
            job.state = if error.is_some() { JobState::Failed } else { JobState::Completed };
            if job.state == JobState::Completed {
                job.processed = job.total;
            }
            job.error = error;
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, JobStatus>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

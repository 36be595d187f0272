//! Background detection jobs and their progress.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::providers::{DetectOutput, DetectionRequest, Detector, ImageInput, ProviderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Queued,
    Detecting,
    Classifying,
    Deduplicating,
    Done,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub survey_id: String,
    pub phase: Phase,
    pub images_total: usize,
    pub images_done: usize,
    pub records: Option<usize>,
    pub failed_images: usize,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
struct Inner {
    jobs: BTreeMap<String, JobStatus>,
    running: HashMap<String, String>,
}

/// At most one unfinished job per survey.
#[derive(Debug, Default)]
pub struct JobRegistry {
    inner: Mutex<Inner>,
    next: AtomicU64,
}

impl JobRegistry {
    /// Register a queued job, or return the id of the job already running
    /// for this survey.
    pub fn start(&self, survey_id: &str, images_total: usize) -> Result<JobStatus, String> {
        let mut inner = self.inner.lock().expect("jobs lock");
        if let Some(existing) = inner.running.get(survey_id) {
            return Err(existing.clone());
        }
        let n = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        let job = JobStatus {
            job_id: format!("job-{n:04}"),
            survey_id: survey_id.to_string(),
            phase: Phase::Queued,
            images_total,
            images_done: 0,
            records: None,
            failed_images: 0,
            error: None,
        };
        inner.running.insert(survey_id.to_string(), job.job_id.clone());
        inner.jobs.insert(job.job_id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, job_id: &str) -> Option<JobStatus> {
        self.inner.lock().expect("jobs lock").jobs.get(job_id).cloned()
    }

    pub fn is_running(&self, survey_id: &str) -> bool {
        self.inner.lock().expect("jobs lock").running.contains_key(survey_id)
    }

    /// Move forward to `phase`; backward moves are ignored.
    pub fn advance(&self, job_id: &str, phase: Phase) {
        self.update(job_id, |j| {
            if phase > j.phase {
                j.phase = phase;
            }
        });
    }

    pub fn set_progress(&self, job_id: &str, done: usize) {
        self.update(job_id, |j| j.images_done = done.min(j.images_total).max(j.images_done));
    }

    pub fn finish(&self, job_id: &str, result: Result<(usize, usize), String>) {
        let mut inner = self.inner.lock().expect("jobs lock");
        let Some(job) = inner.jobs.get_mut(job_id) else {
            return;
        };
        match result {
            Ok((records, failed)) => {
                job.phase = Phase::Done;
                job.images_done = job.images_total;
                job.records = Some(records);
                job.failed_images = failed;
            }
            Err(e) => {
                job.phase = Phase::Failed;
                job.error = Some(e);
            }
        }
        let survey = job.survey_id.clone();
        inner.running.remove(&survey);
    }

    fn update(&self, job_id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.inner.lock().expect("jobs lock").jobs.get_mut(job_id) {
            if !j.phase.is_terminal() {
                f(j);
            }
        }
    }
}

/// Detector wrapper that reports how many images have had all of their
/// detection requests answered.
pub struct ProgressDetector<F: Fn(usize) + Send + Sync> {
    pub inner: Arc<dyn Detector>,
    pub calls_per_image: usize,
    pub on_progress: F,
    calls: AtomicUsize,
}

impl<F: Fn(usize) + Send + Sync> ProgressDetector<F> {
    pub fn new(inner: Arc<dyn Detector>, calls_per_image: usize, on_progress: F) -> Self {
        Self {
            inner,
            calls_per_image: calls_per_image.max(1),
            on_progress,
            calls: AtomicUsize::new(0),
        }
    }
}

impl<F: Fn(usize) + Send + Sync> Detector for ProgressDetector<F> {
    fn detect(&self, request: &DetectionRequest, image: &ImageInput<'_>) -> Result<DetectOutput, ProviderError> {
        let out = self.inner.detect(request, image);
        let n = self.calls.fetch_add(1, Ordering::Relaxed) + 1;
        (self.on_progress)(n / self.calls_per_image);
        out
    }
}

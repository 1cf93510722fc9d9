//! Load management: persistent load and scale jobs.
//!
//! A load job tracks one delivery of source media through the cutter; a
//! scale job asks the scaler to rebuild the pyramid over a rectangle of base
//! tiles. Every transition is appended to the store before the work it
//! announces starts.

use std::collections::BTreeSet;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Scale, SceneId, ThemeId};
use crate::manifest::Manifest;
use crate::store::{Event, Store, StoreError};

#[derive(Debug, Error)]
pub enum JobError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown load job {0}")]
    UnknownLoadJob(u64),
    #[error("unknown scale job {0}")]
    UnknownScaleJob(u64),
    #[error("job {job} cannot move from {from} to {to}")]
    Transition { job: u64, from: String, to: String },
    #[error("job {job} still missing files: {missing:?}")]
    MissingFiles { job: u64, missing: Vec<String> },
    #[error("file {file} is not in job {job}'s manifest")]
    UnknownFile { job: u64, file: String },
    #[error("media {media_id} is being loaded by live job {job}")]
    InProgress { media_id: String, job: u64 },
    #[error("scale rectangle is empty")]
    EmptyRect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadStatus {
    Queued,
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleStatus {
    Queued,
    Running,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadJob {
    pub job_id: u64,
    pub source_path: String,
    pub media_id: String,
    pub theme: ThemeId,
    pub machine: String,
    pub program_version: String,
    /// Unix milliseconds.
    pub start_date: u64,
    pub status: LoadStatus,
    pub files: Vec<String>,
    pub files_done: BTreeSet<String>,
    pub heartbeat: u64,
    /// Store sequence before the first tile of this delivery was written.
    pub start_seq: u64,
    /// Scene assigned to a raw delivery.
    #[serde(default)]
    pub scene: Option<SceneId>,
    #[serde(default)]
    pub resumed_from: Option<u64>,
}

/// Inclusive rectangle of base tile indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub x_min: u32,
    pub x_max: u32,
    pub y_min: u32,
    pub y_max: u32,
}

impl TileRect {
    pub fn point(x: u32, y: u32) -> Self {
        TileRect { x_min: x, x_max: x, y_min: y, y_max: y }
    }

    pub fn is_empty(&self) -> bool {
        self.x_min > self.x_max || self.y_min > self.y_max
    }

    pub fn include(&mut self, x: u32, y: u32) {
        self.x_min = self.x_min.min(x);
        self.x_max = self.x_max.max(x);
        self.y_min = self.y_min.min(y);
        self.y_max = self.y_max.max(y);
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleJob {
    pub job_id: u64,
    pub theme: ThemeId,
    pub scene: SceneId,
    pub base_scale: Scale,
    pub rect: TileRect,
    /// Tiles with a greater insert sequence are newer than this job.
    pub watermark_seq: u64,
    pub status: ScaleStatus,
    #[serde(default)]
    pub claimed_by: Option<String>,
    #[serde(default)]
    pub heartbeat: u64,
    #[serde(default)]
    pub load_job: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct JobsConfig {
    /// A running job whose heartbeat is older than this may be taken over.
    pub stale_after: Duration,
    pub machine: String,
    pub program_version: String,
}

impl Default for JobsConfig {
    fn default() -> Self {
        JobsConfig {
            stale_after: Duration::from_secs(300),
            machine: hostname(),
            program_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

fn hostname() -> String {
    std::fs::read_to_string("/etc/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "localhost".into())
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn is_stale(heartbeat: u64, cfg: &JobsConfig) -> bool {
    now_ms().saturating_sub(heartbeat) >= cfg.stale_after.as_millis() as u64
}

fn load_status_name(s: LoadStatus) -> String {
    format!("{s:?}").to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CreateOutcome {
    Created(LoadJob),
    /// The media was already loaded by this completed job.
    Duplicate { completed_job: u64 },
}

/// Registers a delivery. A media id that already completed is a duplicate;
/// one whose previous job was aborted (or went stale) gets a new job that
/// inherits the files already done.
pub fn create_load_job(
    store: &Store,
    source_path: &str,
    media_id: &str,
    manifest: &Manifest,
    cfg: &JobsConfig,
) -> Result<CreateOutcome, JobError> {
    manifest.validate().map_err(|e| StoreError::Rejected(e.to_string()))?;
    store.transact(|st| {
        let same_media: Vec<&LoadJob> = st.load_jobs.values().filter(|j| j.media_id == media_id).collect();
        if let Some(done) = same_media.iter().find(|j| j.status == LoadStatus::Completed) {
            return Ok((CreateOutcome::Duplicate { completed_job: done.job_id }, vec![]));
        }
        let mut events = vec![];
        let mut prior: Option<&LoadJob> = None;
        for j in &same_media {
            match j.status {
                LoadStatus::Queued | LoadStatus::Running if !is_stale(j.heartbeat, cfg) => {
                    return Err(JobError::InProgress { media_id: media_id.into(), job: j.job_id });
                }
                LoadStatus::Queued | LoadStatus::Running => {
                    let mut dead = (*j).clone();
                    dead.status = LoadStatus::Aborted;
                    events.push(Event::LoadJob(dead));
                }
                _ => {}
            }
            if prior.is_none_or(|p| p.job_id < j.job_id) {
                prior = Some(j);
            }
        }
        let files = manifest.files();
        let now = now_ms();
        let job = LoadJob {
            job_id: st.load_jobs.keys().next_back().copied().unwrap_or(0) + 1,
            source_path: source_path.to_string(),
            media_id: media_id.to_string(),
            theme: manifest.theme,
            machine: cfg.machine.clone(),
            program_version: cfg.program_version.clone(),
            start_date: now,
            status: LoadStatus::Queued,
            files_done: prior
                .map(|p| p.files_done.iter().filter(|f| files.contains(f)).cloned().collect())
                .unwrap_or_default(),
            files,
            heartbeat: now,
            start_seq: prior.map(|p| p.start_seq).unwrap_or(st.last_seq()),
            scene: prior.and_then(|p| p.scene),
            resumed_from: prior.map(|p| p.job_id),
        };
        events.push(Event::LoadJob(job.clone()));
        Ok((CreateOutcome::Created(job), events))
    })
}

fn update_load<T>(
    store: &Store,
    job_id: u64,
    f: impl FnOnce(&mut LoadJob, &crate::store::State) -> Result<(T, bool), JobError>,
) -> Result<T, JobError> {
    store.transact(|st| {
        let mut job = st.load_jobs.get(&job_id).cloned().ok_or(JobError::UnknownLoadJob(job_id))?;
        let (out, changed) = f(&mut job, st)?;
        Ok((out, if changed { vec![Event::LoadJob(job)] } else { vec![] }))
    })
}

fn transition(job: &LoadJob, to: LoadStatus) -> JobError {
    JobError::Transition { job: job.job_id, from: load_status_name(job.status), to: load_status_name(to) }
}

/// A queued, never started job for `media_id`, as registered by an
/// administrator ahead of the loader.
pub fn queued_load_job(store: &Store, media_id: &str) -> Option<LoadJob> {
    store.load_jobs().into_iter().find(|j| j.media_id == media_id && j.status == LoadStatus::Queued)
}

pub fn start_load_job(store: &Store, job_id: u64) -> Result<LoadJob, JobError> {
    update_load(store, job_id, |j, _| {
        match j.status {
            LoadStatus::Queued => {}
            LoadStatus::Running => {}
            _ => return Err(transition(j, LoadStatus::Running)),
        }
        j.status = LoadStatus::Running;
        j.heartbeat = now_ms();
        Ok((j.clone(), true))
    })
}

pub fn heartbeat_load_job(store: &Store, job_id: u64) -> Result<(), JobError> {
    update_load(store, job_id, |j, _| {
        j.heartbeat = now_ms();
        Ok(((), true))
    })
}

pub fn mark_file_done(store: &Store, job_id: u64, file: &str) -> Result<LoadJob, JobError> {
    update_load(store, job_id, |j, _| {
        if j.status != LoadStatus::Running {
            return Err(transition(j, LoadStatus::Running));
        }
        if !j.files.iter().any(|f| f == file) {
            return Err(JobError::UnknownFile { job: j.job_id, file: file.into() });
        }
        let fresh = j.files_done.insert(file.to_string());
        j.heartbeat = now_ms();
        Ok((j.clone(), fresh))
    })
}

pub fn complete_load_job(store: &Store, job_id: u64) -> Result<LoadJob, JobError> {
    update_load(store, job_id, |j, _| {
        if j.status != LoadStatus::Running {
            return Err(transition(j, LoadStatus::Completed));
        }
        let missing: Vec<String> = j.files.iter().filter(|f| !j.files_done.contains(*f)).cloned().collect();
        if !missing.is_empty() {
            return Err(JobError::MissingFiles { job: j.job_id, missing });
        }
        j.status = LoadStatus::Completed;
        j.heartbeat = now_ms();
        Ok((j.clone(), true))
    })
}

pub fn abort_load_job(store: &Store, job_id: u64) -> Result<LoadJob, JobError> {
    update_load(store, job_id, |j, _| match j.status {
        LoadStatus::Queued | LoadStatus::Running => {
            j.status = LoadStatus::Aborted;
            Ok((j.clone(), true))
        }
        LoadStatus::Aborted => Ok((j.clone(), false)),
        LoadStatus::Completed => Err(transition(j, LoadStatus::Aborted)),
    })
}

/// Scene id of a raw delivery, allocated from the theme's counter on first use.
pub fn allocate_scene(store: &Store, job_id: u64) -> Result<SceneId, JobError> {
    store.transact(|st| {
        let mut job = st.load_jobs.get(&job_id).cloned().ok_or(JobError::UnknownLoadJob(job_id))?;
        if let Some(s) = job.scene {
            return Ok((s, vec![]));
        }
        let scene = SceneId(st.scene_counters.get(&job.theme).copied().unwrap_or(0) + 1);
        job.scene = Some(scene);
        Ok((scene, vec![Event::SceneAllocated { theme: job.theme, scene }, Event::LoadJob(job)]))
    })
}

pub fn enqueue_scale_job(
    store: &Store,
    theme: ThemeId,
    scene: SceneId,
    base_scale: Scale,
    rect: TileRect,
    watermark_seq: u64,
    load_job: Option<u64>,
) -> Result<ScaleJob, JobError> {
    if rect.is_empty() {
        return Err(JobError::EmptyRect);
    }
    let t = store.theme(theme)?;
    if !t.base_scales.contains(&base_scale) {
        return Err(StoreError::Rejected(format!("scale {base_scale} is not a base of theme {theme}")).into());
    }
    store.transact(|st| {
        let job = ScaleJob {
            job_id: st.scale_jobs.keys().next_back().copied().unwrap_or(0) + 1,
            theme,
            scene,
            base_scale,
            rect,
            watermark_seq,
            status: ScaleStatus::Queued,
            claimed_by: None,
            heartbeat: now_ms(),
            load_job,
        };
        Ok((job.clone(), vec![Event::ScaleJob(job)]))
    })
}

/// Atomically takes the oldest queued (or abandoned running) scale job for
/// `theme`, optionally limited to one scene/zone.
pub fn claim_scale_job(
    store: &Store,
    theme: ThemeId,
    scene: Option<SceneId>,
    claimer: &str,
    cfg: &JobsConfig,
) -> Result<Option<ScaleJob>, JobError> {
    store.transact(|st| {
        let pick = st.scale_jobs.values().find(|j| {
            j.theme == theme
                && scene.is_none_or(|s| s == j.scene)
                && match j.status {
                    ScaleStatus::Queued => true,
                    ScaleStatus::Running => is_stale(j.heartbeat, cfg),
                    ScaleStatus::Completed => false,
                }
        });
        match pick {
            None => Ok((None, vec![])),
            Some(j) => {
                let mut j = j.clone();
                j.status = ScaleStatus::Running;
                j.claimed_by = Some(claimer.to_string());
                j.heartbeat = now_ms();
                Ok((Some(j.clone()), vec![Event::ScaleJob(j)]))
            }
        }
    })
}

fn update_scale(
    store: &Store,
    job_id: u64,
    claimer: &str,
    f: impl FnOnce(&mut ScaleJob) -> Result<(), JobError>,
) -> Result<ScaleJob, JobError> {
    store.transact(|st| {
        let mut j = st.scale_jobs.get(&job_id).cloned().ok_or(JobError::UnknownScaleJob(job_id))?;
        if j.status != ScaleStatus::Running || j.claimed_by.as_deref() != Some(claimer) {
            return Err(JobError::Transition {
                job: job_id,
                from: format!("{:?} by {:?}", j.status, j.claimed_by),
                to: format!("held by {claimer}"),
            });
        }
        f(&mut j)?;
        Ok((j.clone(), vec![Event::ScaleJob(j)]))
    })
}

pub fn heartbeat_scale_job(store: &Store, job_id: u64, claimer: &str) -> Result<ScaleJob, JobError> {
    update_scale(store, job_id, claimer, |j| {
        j.heartbeat = now_ms();
        Ok(())
    })
}

pub fn complete_scale_job(store: &Store, job_id: u64, claimer: &str) -> Result<ScaleJob, JobError> {
    update_scale(store, job_id, claimer, |j| {
        j.status = ScaleStatus::Completed;
        j.heartbeat = now_ms();
        Ok(())
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFilter {
    pub theme: Option<ThemeId>,
    pub media_id: Option<String>,
    pub active_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub queued: usize,
    pub running: usize,
    pub completed: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobListing {
    pub load_jobs: Vec<LoadJob>,
    pub scale_jobs: Vec<ScaleJob>,
    pub load_counts: StatusCounts,
    pub scale_counts: StatusCounts,
}

/// Read-only snapshot for the admin surfaces.
pub fn list_jobs(store: &Store, filter: &JobFilter) -> JobListing {
    let mut out = JobListing::default();
    for j in store.load_jobs() {
        if filter.theme.is_some_and(|t| t != j.theme)
            || filter.media_id.as_ref().is_some_and(|m| *m != j.media_id)
            || (filter.active_only && matches!(j.status, LoadStatus::Completed | LoadStatus::Aborted))
        {
            continue;
        }
        match j.status {
            LoadStatus::Queued => out.load_counts.queued += 1,
            LoadStatus::Running => out.load_counts.running += 1,
            LoadStatus::Completed => out.load_counts.completed += 1,
            LoadStatus::Aborted => out.load_counts.aborted += 1,
        }
        out.load_jobs.push(j);
    }
    for j in store.scale_jobs() {
        if filter.theme.is_some_and(|t| t != j.theme)
            || filter.media_id.is_some()
            || (filter.active_only && j.status == ScaleStatus::Completed)
        {
            continue;
        }
        match j.status {
            ScaleStatus::Queued => out.scale_counts.queued += 1,
            ScaleStatus::Running => out.scale_counts.running += 1,
            ScaleStatus::Completed => out.scale_counts.completed += 1,
        }
        out.scale_jobs.push(j);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Manifest;
    use crate::store::StoreConfig;
    use std::sync::{Arc, Barrier};

    fn manifest(media: &str, files: &[&str]) -> Manifest {
        let images: Vec<String> = files
            .iter()
            .map(|f| {
                format!(
                    r#"{{"file":"{f}","format":"pgm","resolution_m":1.0,
                    "utm":{{"zone":10,"top_left_easting":0,"top_left_northing":400}},"acquisition_date":"d"}}"#
                )
            })
            .collect();
        Manifest::parse(&format!(
            r#"{{"media_id":"{media}","theme":1,"kind":"projected","images":[{}]}}"#,
            images.join(",")
        ))
        .unwrap()
    }

    fn store() -> (tempfile::TempDir, Store) {
        let d = tempfile::tempdir().unwrap();
        let s = Store::open_with(d.path(), StoreConfig { durable: false, ..Default::default() }).unwrap();
        (d, s)
    }

    fn created(o: CreateOutcome) -> LoadJob {
        match o {
            CreateOutcome::Created(j) => j,
            other => panic!("{other:?}"),
        }
    }

    fn cfg() -> JobsConfig {
        JobsConfig { stale_after: Duration::from_secs(3600), ..Default::default() }
    }

    #[test]
    fn fresh_media_is_queued_and_duplicates_caught() {
        let (_d, s) = store();
        let m = manifest("CD-1", &["a.pgm", "b.pgm"]);
        let j = created(create_load_job(&s, "/in", "CD-1", &m, &cfg()).unwrap());
        assert_eq!(j.status, LoadStatus::Queued);
        start_load_job(&s, j.job_id).unwrap();
        mark_file_done(&s, j.job_id, "a.pgm").unwrap();
        assert!(matches!(complete_load_job(&s, j.job_id), Err(JobError::MissingFiles { .. })));
        mark_file_done(&s, j.job_id, "b.pgm").unwrap();
        assert!(matches!(mark_file_done(&s, j.job_id, "zzz"), Err(_)));
        complete_load_job(&s, j.job_id).unwrap();
        assert_eq!(
            create_load_job(&s, "/in", "CD-1", &m, &cfg()).unwrap(),
            CreateOutcome::Duplicate { completed_job: j.job_id }
        );
    }

    #[test]
    fn aborted_media_resumes_files_done() {
        let (_d, s) = store();
        let m = manifest("CD-2", &["a.pgm", "b.pgm"]);
        let j = created(create_load_job(&s, "/in", "CD-2", &m, &cfg()).unwrap());
        start_load_job(&s, j.job_id).unwrap();
        mark_file_done(&s, j.job_id, "a.pgm").unwrap();
        abort_load_job(&s, j.job_id).unwrap();
        let k = created(create_load_job(&s, "/in", "CD-2", &m, &cfg()).unwrap());
        assert_ne!(k.job_id, j.job_id);
        assert_eq!(k.resumed_from, Some(j.job_id));
        assert_eq!(k.start_seq, j.start_seq);
        assert!(k.files_done.contains("a.pgm") && !k.files_done.contains("b.pgm"));
    }

    #[test]
    fn live_job_blocks_and_stale_job_is_taken_over() {
        let (_d, s) = store();
        let m = manifest("CD-3", &["a.pgm"]);
        let j = created(create_load_job(&s, "/in", "CD-3", &m, &cfg()).unwrap());
        start_load_job(&s, j.job_id).unwrap();
        assert!(matches!(create_load_job(&s, "/in", "CD-3", &m, &cfg()), Err(JobError::InProgress { .. })));
        let eager = JobsConfig { stale_after: Duration::ZERO, ..cfg() };
        let k = created(create_load_job(&s, "/in", "CD-3", &m, &eager).unwrap());
        assert_eq!(s.load_job(j.job_id).unwrap().status, LoadStatus::Aborted);
        assert_eq!(k.resumed_from, Some(j.job_id));
    }

    #[test]
    fn completed_cannot_go_back() {
        let (_d, s) = store();
        let m = manifest("CD-4", &[]);
        let j = created(create_load_job(&s, "/in", "CD-4", &m, &cfg()).unwrap());
        start_load_job(&s, j.job_id).unwrap();
        complete_load_job(&s, j.job_id).unwrap();
        assert!(start_load_job(&s, j.job_id).is_err());
        assert!(abort_load_job(&s, j.job_id).is_err());
    }

    #[test]
    fn scale_jobs_enqueue_and_claim() {
        let (_d, s) = store();
        let t = ThemeId(1);
        let b = Scale::new(10).unwrap();
        let empty = TileRect { x_min: 3, x_max: 2, y_min: 0, y_max: 0 };
        assert!(matches!(enqueue_scale_job(&s, t, SceneId(10), b, empty, 0, None), Err(JobError::EmptyRect)));
        let a = enqueue_scale_job(&s, t, SceneId(10), b, TileRect::point(1, 1), 0, None).unwrap();
        let c = enqueue_scale_job(&s, t, SceneId(11), b, TileRect::point(1, 1), 0, None).unwrap();
        assert_ne!(a.job_id, c.job_id);
        assert_eq!(claim_scale_job(&s, t, Some(SceneId(12)), "w", &cfg()).unwrap(), None);
        let got = claim_scale_job(&s, t, Some(SceneId(11)), "w", &cfg()).unwrap().unwrap();
        assert_eq!(got.job_id, c.job_id);
        assert!(complete_scale_job(&s, got.job_id, "other").is_err());
        complete_scale_job(&s, got.job_id, "w").unwrap();
        let got = claim_scale_job(&s, t, None, "w", &cfg()).unwrap().unwrap();
        assert_eq!(got.job_id, a.job_id);
        assert_eq!(claim_scale_job(&s, t, None, "w", &cfg()).unwrap(), None);
        let stale = JobsConfig { stale_after: Duration::ZERO, ..cfg() };
        let again = claim_scale_job(&s, t, None, "w2", &stale).unwrap().unwrap();
        assert_eq!(again.job_id, a.job_id);
    }

    #[test]
    fn claims_are_mutually_exclusive() {
        let (_d, s) = store();
        let s = Arc::new(s);
        let b = Scale::new(10).unwrap();
        for trial in 0..1000u32 {
            let job = enqueue_scale_job(&s, ThemeId(1), SceneId(5), b, TileRect::point(trial, 1), 0, None).unwrap();
            let barrier = Arc::new(Barrier::new(2));
            let handles: Vec<_> = (0..2)
                .map(|i| {
                    let s = s.clone();
                    let barrier = barrier.clone();
                    std::thread::spawn(move || {
                        barrier.wait();
                        claim_scale_job(&s, ThemeId(1), Some(SceneId(5)), &format!("c{i}"), &cfg()).unwrap()
                    })
                })
                .collect();
            let wins: Vec<_> = handles.into_iter().filter_map(|h| h.join().unwrap()).collect();
            assert_eq!(wins.len(), 1, "trial {trial}");
            assert_eq!(wins[0].job_id, job.job_id);
        }
    }

    #[test]
    fn listing_counts_match_scan() {
        let (_d, s) = store();
        assert_eq!(list_jobs(&s, &JobFilter::default()), JobListing::default());
        for (i, media) in ["A", "B", "C"].iter().enumerate() {
            let j = created(create_load_job(&s, "/in", media, &manifest(media, &[]), &cfg()).unwrap());
            if i > 0 {
                start_load_job(&s, j.job_id).unwrap();
            }
            if i > 1 {
                complete_load_job(&s, j.job_id).unwrap();
            }
        }
        let l = list_jobs(&s, &JobFilter::default());
        let brute = |st: LoadStatus| s.load_jobs().iter().filter(|j| j.status == st).count();
        assert_eq!(l.load_counts.queued, brute(LoadStatus::Queued));
        assert_eq!(l.load_counts.running, brute(LoadStatus::Running));
        assert_eq!(l.load_counts.completed, brute(LoadStatus::Completed));
        assert_eq!(l.load_jobs.len(), 3);
        let active = list_jobs(&s, &JobFilter { active_only: true, ..Default::default() });
        assert_eq!(active.load_jobs.len(), 2);
    }

    #[test]
    fn state_survives_reopen() {
        let d = tempfile::tempdir().unwrap();
        let id = {
            let s = Store::open(d.path()).unwrap();
            let j = created(create_load_job(&s, "/in", "R", &manifest("R", &["a.pgm"]), &cfg()).unwrap());
            start_load_job(&s, j.job_id).unwrap();
            mark_file_done(&s, j.job_id, "a.pgm").unwrap();
            j.job_id
        };
        let s = Store::open(d.path()).unwrap();
        let j = s.load_job(id).unwrap();
        assert_eq!(j.status, LoadStatus::Running);
        assert!(j.files_done.contains("a.pgm"));
    }
}

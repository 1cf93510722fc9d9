//! Turns ingest images into base-scale tiles.
//!
//! Projected images are resampled to their theme's base resolution, placed
//! on the grid and merged tile by tile against whatever the store already
//! holds. Raw scenes are assembled in a staging directory first and then
//! inserted as one new scene.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::grid::{self, GridError, PixelFormat, Scale, SceneId, Theme, ThemeKind, TileAddress, UtmCoord, TILE_PIXELS};
use crate::jobs::{self, CreateOutcome, JobError, JobsConfig, LoadJob, TileRect};
use crate::manifest::{ImageFormat, Manifest, ManifestError, ManifestImage};
use crate::raster::{self, BlankStats, Raster, RasterError};
use crate::store::{
    Event, NewTile, OriginalMeta, ProdStatus, SceneExtent, SourceFootprint, Store, StoreError, TileInfo,
    WriteDecision,
};

/// What to do with a freshly cut tile given the one already stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    InsertVisible,
    ReplaceOld,
    DiscardNew,
    MergeThenReplace,
}

/// The blankness decision table.
pub fn decide(new: BlankStats, old: Option<BlankStats>) -> Verdict {
    match old {
        None => Verdict::InsertVisible,
        Some(_) if !new.has_blanks() => Verdict::ReplaceOld,
        Some(old) if !old.has_blanks() => Verdict::DiscardNew,
        Some(_) => Verdict::MergeThenReplace,
    }
}

#[derive(Debug, Error)]
pub enum CutError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{file}: {source}")]
    Raster { file: String, source: RasterError },
    #[error("{file}: {reason}")]
    Image { file: String, reason: String },
    #[error("staging: {0}")]
    Staging(#[from] std::io::Error),
}

impl CutError {
    /// Errors raised after the load job exists leave it resumable.
    pub fn is_store_crash(&self) -> bool {
        matches!(
            self,
            CutError::Store(StoreError::InjectedCrash | StoreError::Poisoned)
                | CutError::Job(JobError::Store(StoreError::InjectedCrash | StoreError::Poisoned))
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct CutOptions {
    pub jobs: JobsConfig,
    /// Recorded on the load job; defaults to the manifest's directory.
    pub source_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CutOutcome {
    Completed,
    Duplicate { completed_job: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct CutStats {
    pub written: u64,
    pub discarded: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CutReport {
    pub job_id: Option<u64>,
    pub outcome: CutOutcome,
    /// Source files read from disk, in order.
    pub files_read: Vec<String>,
    pub images_skipped: u64,
    pub tiles: CutStats,
    pub scale_jobs: Vec<u64>,
}

enum TileOutcome {
    Written,
    Discarded,
    Skipped,
}

const MAX_CONFLICT_RETRIES: usize = 16;

/// Writes one cut tile following the decision table. `skip` recognises a
/// record this load already wrote before a restart.
fn write_tile(
    store: &Store,
    addr: TileAddress,
    tile: &Raster,
    tag: u64,
    skip: impl Fn(&TileInfo) -> bool,
) -> Result<TileOutcome, CutError> {
    let mut attempt = 0;
    loop {
        if attempt > MAX_CONFLICT_RETRIES {
            return Err(StoreError::Rejected(format!("{addr}: gave up after {attempt} conflicting writes")).into());
        }
        let claim = store.claim(addr);
        let old = store.visible_info(&addr);
        if old.as_ref().is_some_and(&skip) {
            return Ok(TileOutcome::Skipped);
        }
        let new_stats = raster::blankness(tile);
        let old_stats = old.map(|o| BlankStats { blank_count: o.blank_count, total: TILE_PIXELS * TILE_PIXELS });
        let (pixels, decision) = match (decide(new_stats, old_stats), old) {
            (Verdict::InsertVisible, _) => (tile.clone(), WriteDecision::InsertVisible),
            (Verdict::ReplaceOld, Some(o)) => (tile.clone(), WriteDecision::ReplaceOld { old_seq: o.insert_seq }),
            (Verdict::DiscardNew, _) => return Ok(TileOutcome::Discarded),
            (Verdict::MergeThenReplace, Some(o)) => match store.load_visible_raster(&addr)? {
                Some((info, old_r)) if info.insert_seq == o.insert_seq => {
                    let merged = raster::merge_prefer_nonblank(tile, &old_r)
                        .map_err(|source| CutError::Raster { file: addr.to_string(), source })?;
                    (merged, WriteDecision::MergedReplace { old_seq: o.insert_seq })
                }
                _ => {
                    attempt += 1;
                    continue;
                }
            },
            (_, None) => unreachable!("verdict needs an existing record"),
        };
        let new = NewTile::from_raster(addr, tag, &pixels)?;
        match store.put_tile_txn(&claim, new, decision) {
            Ok(_) => return Ok(TileOutcome::Written),
            Err(StoreError::Conflict { .. }) => {
                debug!(%addr, "tile changed by another writer, retrying");
                attempt += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn tally(stats: &mut CutStats, o: TileOutcome) {
    match o {
        TileOutcome::Written => stats.written += 1,
        TileOutcome::Discarded => stats.discarded += 1,
        TileOutcome::Skipped => stats.skipped += 1,
    }
}

fn read_image(dir: &Path, img: &ManifestImage, theme: &Theme) -> Result<Raster, CutError> {
    let path = dir.join(&img.file);
    let bytes = std::fs::read(&path).map_err(|e| CutError::Image { file: img.file.clone(), reason: e.to_string() })?;
    let r = match img.format {
        ImageFormat::Pgm => raster::read_pgm(&bytes),
        ImageFormat::PngIndexed => raster::decode_png(&bytes),
    }
    .map_err(|source| CutError::Raster { file: img.file.clone(), source })?;
    if r.format() != theme.format {
        return Err(CutError::Image {
            file: img.file.clone(),
            reason: format!("pixel format {:?} does not match theme {:?}", r.format(), theme.format),
        });
    }
    Ok(r)
}

/// Where a projected image lands on the base grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    /// Offset of the image's top-left pixel inside the first tile.
    pub dx: i64,
    pub dy: i64,
    pub cols: u32,
    pub rows: u32,
    pub x0: u32,
    /// Row index of the top tile row.
    pub y_top: u32,
}

/// Grid placement of a `width`×`height` image (already at `base`
/// resolution) whose top-left corner is `tl`.
pub fn placement(tl: UtmCoord, width: u32, height: u32, base: Scale) -> Placement {
    let m = base.resolution().meters();
    let ext = base.resolution().tile_meters();
    let snapped = grid::snap_to_grid(tl, base);
    let dx = ((tl.easting - snapped.easting) / m).round() as i64;
    let dy = ((snapped.northing - tl.northing) / m).round() as i64;
    let t = TILE_PIXELS as i64;
    Placement {
        dx,
        dy,
        cols: ((dx + width as i64 + t - 1) / t) as u32,
        rows: ((dy + height as i64 + t - 1) / t) as u32,
        x0: (snapped.easting / ext).round() as u32,
        y_top: (snapped.northing / ext).round() as u32,
    }
}

impl Placement {
    /// Base tiles covered, or `None` when the image is empty.
    pub fn rect(&self) -> Option<TileRect> {
        if self.cols == 0 || self.rows == 0 {
            return None;
        }
        Some(TileRect {
            x_min: self.x0,
            x_max: self.x0 + self.cols - 1,
            y_min: self.y_top.saturating_sub(self.rows - 1),
            y_max: self.y_top,
        })
    }
}

fn footprint_placement(m: &OriginalMeta, theme: &Theme, img: &ManifestImage) -> Option<(SceneId, Scale, Placement)> {
    let SourceFootprint::Utm { zone, left, top, width_m, height_m } = m.footprint else { return None };
    let base = theme.base_for_source(img.resolution_m);
    let px = base.resolution().meters();
    let tl = UtmCoord::new(zone as i32, left, top).ok()?;
    let p = placement(tl, (width_m / px).round() as u32, (height_m / px).round() as u32, base);
    Some((SceneId(zone as u32), base, p))
}

/// Load jobs this one continues, newest first, itself included.
fn lineage(store: &Store, job: &LoadJob) -> Vec<u64> {
    let mut out = vec![job.job_id];
    let mut cur = job.resumed_from;
    while let Some(id) = cur {
        out.push(id);
        cur = store.load_job(id).and_then(|j| j.resumed_from);
    }
    out
}

fn enqueue_scale_jobs(
    store: &Store,
    job: &LoadJob,
    rects: &BTreeMap<(SceneId, Scale), TileRect>,
) -> Result<Vec<u64>, CutError> {
    let ids = lineage(store, job);
    let existing = store.scale_jobs();
    let mut out = vec![];
    for (&(scene, base), rect) in rects {
        let done = existing.iter().find(|s| {
            s.theme == job.theme
                && s.scene == scene
                && s.base_scale == base
                && s.load_job.is_some_and(|l| ids.contains(&l))
        });
        let id = match done {
            Some(s) => s.job_id,
            None => jobs::enqueue_scale_job(store, job.theme, scene, base, *rect, job.start_seq, Some(job.job_id))?.job_id,
        };
        out.push(id);
    }
    Ok(out)
}

fn meta_for(
    store: &Store,
    manifest: &Manifest,
    img: &ManifestImage,
    footprint: SourceFootprint,
) -> Result<OriginalMeta, CutError> {
    let tag = match store.find_original_meta(manifest.theme, &manifest.media_id, &img.file) {
        Some(m) => m.orig_meta_tag,
        None => store.upsert_original_meta(OriginalMeta {
            orig_meta_tag: 0,
            theme: manifest.theme,
            media_id: manifest.media_id.clone(),
            source_file: img.file.clone(),
            acquisition_date: img.acquisition_date.clone(),
            footprint,
            prod_status: ProdStatus::Pending,
            tiling_seq: None,
        })?,
    };
    Ok(store.set_prod_status(tag, ProdStatus::Tiling)?)
}

struct Run<'a> {
    store: &'a Store,
    theme: &'a Theme,
    manifest: &'a Manifest,
    dir: &'a Path,
    job: LoadJob,
    report: CutReport,
}

impl Run<'_> {
    fn projected(&mut self) -> Result<(), CutError> {
        let store = self.store;
        let mut rects: BTreeMap<(SceneId, Scale), TileRect> = BTreeMap::new();
        let mut add = |scene, base, r: Option<TileRect>| {
            if let Some(r) = r {
                rects
                    .entry((scene, base))
                    .and_modify(|acc: &mut TileRect| {
                        acc.include(r.x_min, r.y_min);
                        acc.include(r.x_max, r.y_max);
                    })
                    .or_insert(r);
            }
        };
        for img in &self.manifest.images {
            let existing = store.find_original_meta(self.manifest.theme, &self.manifest.media_id, &img.file);
            if let Some(m) = existing.as_ref().filter(|m| m.prod_status == ProdStatus::Completed) {
                if let Some((scene, base, p)) = footprint_placement(m, self.theme, img) {
                    add(scene, base, p.rect());
                }
                if !self.job.files_done.contains(&img.file) {
                    self.job = jobs::mark_file_done(store, self.job.job_id, &img.file)?;
                }
                self.report.images_skipped += 1;
                continue;
            }
            let georef = img.utm.ok_or_else(|| CutError::Image {
                file: img.file.clone(),
                reason: "projected image has no utm georeference".into(),
            })?;
            let tl = UtmCoord::new(georef.zone as i32, georef.top_left_easting, georef.top_left_northing)?;
            let base = self.theme.base_for_source(img.resolution_m);
            let base_m = base.resolution().meters();

            let src = read_image(self.dir, img, self.theme)?;
            self.report.files_read.push(img.file.clone());
            let r = raster::resample(&src, img.resolution_m, base_m)
                .map_err(|source| CutError::Raster { file: img.file.clone(), source })?;
            let (w_m, h_m) = (r.width() as f64 * base_m, r.height() as f64 * base_m);
            let footprint = SourceFootprint::Utm {
                zone: tl.zone,
                left: tl.easting,
                top: tl.northing,
                width_m: w_m,
                height_m: h_m,
            };
            let meta = meta_for(store, self.manifest, img, footprint)?;
            let tag = meta.orig_meta_tag;
            let since = meta.tiling_seq.unwrap_or(0);
            info!(file = %img.file, tag, "tiling projected image");

            let p = placement(tl, r.width(), r.height(), base);
            let scene = SceneId(tl.zone as u32);
            let t = TILE_PIXELS as i64;
            for row in 0..p.rows {
                let Some(y) = p.y_top.checked_sub(row) else { break };
                for col in 0..p.cols {
                    let tile = r.crop(col as i64 * t - p.dx, row as i64 * t - p.dy, TILE_PIXELS, TILE_PIXELS);
                    let addr = TileAddress::new(self.theme.id, base, scene, p.x0 + col, y);
                    let o = write_tile(store, addr, &tile, tag, |i| i.orig_meta_tag == tag && i.insert_seq > since)?;
                    tally(&mut self.report.tiles, o);
                }
                jobs::heartbeat_load_job(store, self.job.job_id)?;
            }
            add(scene, base, p.rect());
            store.coverage_paint(self.theme.id, grid::geo_box_of_utm_rect(tl.zone, tl.easting, tl.northing, w_m, h_m)?)?;
            store.set_prod_status(tag, ProdStatus::Completed)?;
            self.job = jobs::mark_file_done(store, self.job.job_id, &img.file)?;
        }
        self.report.scale_jobs = enqueue_scale_jobs(store, &self.job, &rects)?;
        Ok(())
    }

    fn staging_dir(&self) -> PathBuf {
        let safe: String = self
            .manifest
            .media_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.store.dir().join("staging").join(format!("{}-{safe}", self.theme.id))
    }

    fn raw(&mut self) -> Result<(), CutError> {
        let store = self.store;
        if self.manifest.images.is_empty() {
            return Ok(());
        }
        let scene = match self.job.scene {
            Some(s) => s,
            None => {
                let s = jobs::allocate_scene(store, self.job.job_id)?;
                self.job.scene = Some(s);
                s
            }
        };
        let base = self.theme.base_scale();
        let base_m = base.resolution().meters();
        let staging = self.staging_dir();
        std::fs::create_dir_all(&staging)?;

        for img in &self.manifest.images {
            if self.job.files_done.contains(&img.file) {
                self.report.images_skipped += 1;
                continue;
            }
            let off = img.scene_offset.ok_or_else(|| CutError::Image {
                file: img.file.clone(),
                reason: "raw image has no scene_offset".into(),
            })?;
            let src = read_image(self.dir, img, self.theme)?;
            self.report.files_read.push(img.file.clone());
            let r = raster::resample(&src, img.resolution_m, base_m)
                .map_err(|source| CutError::Raster { file: img.file.clone(), source })?;
            let footprint = SourceFootprint::ScenePixels { x: off.x, y: off.y, width: r.width(), height: r.height() };
            let meta = meta_for(store, self.manifest, img, footprint)?;
            info!(file = %img.file, tag = meta.orig_meta_tag, "staging raw image");
            let t = TILE_PIXELS;
            for row in off.y / t..(off.y + r.height()).div_ceil(t) {
                for col in off.x / t..(off.x + r.width()).div_ceil(t) {
                    let piece = r.crop(
                        col as i64 * t as i64 - off.x as i64,
                        row as i64 * t as i64 - off.y as i64,
                        t,
                        t,
                    );
                    stage_tile(&staging, col, row, &piece)?;
                }
            }
            self.job = jobs::mark_file_done(store, self.job.job_id, &img.file)?;
        }

        // Every image is staged; its footprint is on record.
        let metas: Vec<OriginalMeta> = self
            .manifest
            .images
            .iter()
            .map(|img| {
                store.find_original_meta(self.manifest.theme, &self.manifest.media_id, &img.file).ok_or_else(|| {
                    CutError::Image { file: img.file.clone(), reason: "staged without metadata".into() }
                })
            })
            .collect::<Result<_, _>>()?;
        let mut width_px = 0;
        let mut height_px = 0;
        let mut spans = vec![];
        for m in &metas {
            if let SourceFootprint::ScenePixels { x, y, width, height } = m.footprint {
                width_px = width_px.max(x + width);
                height_px = height_px.max(y + height);
                spans.push((m.orig_meta_tag, x, y, width, height));
            }
        }
        let rows = height_px.div_ceil(TILE_PIXELS);
        let cols = width_px.div_ceil(TILE_PIXELS);
        let extent = SceneExtent {
            theme: self.theme.id,
            scene,
            base_scale: base,
            width_px,
            height_px,
            rows,
            geo_bbox: self.manifest.geo_bbox,
        };
        if store.scene_extent(self.theme.id, scene).as_ref() != Some(&extent) {
            store.append_events(vec![Event::SceneExtent(extent)])?;
        }

        let start = self.job.start_seq;
        for (col, row, path) in staged_tiles(&staging)? {
            let tile = raster::decode_tile(&std::fs::read(&path)?)
                .map_err(|source| CutError::Raster { file: path.display().to_string(), source })?;
            // The last image in manifest order touching this tile names it.
            let (x0, y0) = (col * TILE_PIXELS, row * TILE_PIXELS);
            let tag = spans
                .iter()
                .rev()
                .find(|(_, x, y, w, h)| *x < x0 + TILE_PIXELS && x0 < x + w && *y < y0 + TILE_PIXELS && y0 < y + h)
                .map(|s| s.0)
                .unwrap_or(metas[0].orig_meta_tag);
            let addr = TileAddress::new(self.theme.id, base, scene, col, rows - row);
            let o = write_tile(store, addr, &tile, tag, |i| i.insert_seq > start)?;
            tally(&mut self.report.tiles, o);
        }
        for m in &metas {
            store.set_prod_status(m.orig_meta_tag, ProdStatus::Completed)?;
        }
        if let Some(b) = self.manifest.geo_bbox {
            store.coverage_paint(self.theme.id, b)?;
        }
        let mut rects = BTreeMap::new();
        if cols > 0 && rows > 0 {
            rects.insert((scene, base), TileRect { x_min: 0, x_max: cols - 1, y_min: 1, y_max: rows });
        }
        self.report.scale_jobs = enqueue_scale_jobs(store, &self.job, &rects)?;
        if let Err(e) = std::fs::remove_dir_all(&staging) {
            warn!(dir = %staging.display(), "leaving staging directory: {e}");
        }
        Ok(())
    }
}

fn stage_path(dir: &Path, col: u32, row: u32) -> PathBuf {
    dir.join(format!("{col}_{row}.png"))
}

/// Merges `piece` into the staged tile at (`col`, `row`); the new piece
/// wins where both carry data. The file is replaced atomically.
fn stage_tile(dir: &Path, col: u32, row: u32, piece: &Raster) -> Result<(), CutError> {
    let path = stage_path(dir, col, row);
    let merged = match std::fs::read(&path) {
        Ok(bytes) => {
            let old = raster::decode_tile(&bytes)
                .map_err(|source| CutError::Raster { file: path.display().to_string(), source })?;
            raster::merge_prefer_nonblank(piece, &old)
                .map_err(|source| CutError::Raster { file: path.display().to_string(), source })?
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => piece.clone(),
        Err(e) => return Err(e.into()),
    };
    let blob = raster::encode_tile(&merged).map_err(|source| CutError::Raster { file: path.display().to_string(), source })?;
    let tmp = dir.join(format!("{col}_{row}.tmp"));
    std::fs::write(&tmp, blob)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

/// Staged tiles ordered top to bottom, left to right.
fn staged_tiles(dir: &Path) -> Result<Vec<(u32, u32, PathBuf)>, CutError> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".png")) else {
            continue;
        };
        if let Some((c, r)) = stem.split_once('_') {
            if let (Ok(c), Ok(r)) = (c.parse::<u32>(), r.parse::<u32>()) {
                out.insert((r, c, path));
            }
        }
    }
    Ok(out.into_iter().map(|(r, c, p)| (c, r, p)).collect())
}

/// Cuts every image of `manifest` (image paths relative to `dir`).
pub fn cut(store: &Store, manifest: &Manifest, dir: &Path, opts: &CutOptions) -> Result<CutReport, CutError> {
    manifest.validate()?;
    let theme = store.theme(manifest.theme)?;
    if theme.kind != manifest.kind {
        return Err(ManifestError::Invalid(format!("manifest kind {:?} but theme {} is {:?}", manifest.kind, theme.id, theme.kind)).into());
    }
    if theme.kind == ThemeKind::Raw && theme.format == PixelFormat::Indexed8 && manifest.images.iter().any(|i| i.format == ImageFormat::Pgm) {
        return Err(ManifestError::Invalid("gray image in a paletted raw theme".into()).into());
    }
    let source = opts.source_path.clone().unwrap_or_else(|| dir.display().to_string());
    if let Some(j) = jobs::queued_load_job(store, &manifest.media_id) {
        if let Ok(started) = jobs::start_load_job(store, j.job_id) {
            return run_job(store, theme, manifest, dir, started);
        }
    }
    let job = match jobs::create_load_job(store, &source, &manifest.media_id, manifest, &opts.jobs)? {
        CreateOutcome::Duplicate { completed_job } => {
            info!(media = %manifest.media_id, completed_job, "media already loaded");
            return Ok(CutReport {
                job_id: None,
                outcome: CutOutcome::Duplicate { completed_job },
                files_read: vec![],
                images_skipped: 0,
                tiles: CutStats::default(),
                scale_jobs: vec![],
            });
        }
        CreateOutcome::Created(j) => j,
    };
    let job = jobs::start_load_job(store, job.job_id)?;
    run_job(store, theme, manifest, dir, job)
}

fn run_job(store: &Store, theme: &Theme, manifest: &Manifest, dir: &Path, job: LoadJob) -> Result<CutReport, CutError> {
    let mut run = Run {
        store,
        theme,
        manifest,
        dir,
        report: CutReport {
            job_id: Some(job.job_id),
            outcome: CutOutcome::Completed,
            files_read: vec![],
            images_skipped: 0,
            tiles: CutStats::default(),
            scale_jobs: vec![],
        },
        job,
    };
    let result = match theme.kind {
        ThemeKind::Projected => run.projected(),
        ThemeKind::Raw => run.raw(),
    }
    .and_then(|_| jobs::complete_load_job(store, run.job.job_id).map_err(CutError::from));
    match result {
        Ok(_) => Ok(run.report),
        Err(e) => {
            if !e.is_store_crash() {
                if let Err(abort) = jobs::abort_load_job(store, run.job.job_id) {
                    warn!("could not mark job {} aborted: {abort}", run.job.job_id);
                }
            }
            Err(e)
        }
    }
}

/// Reads the manifest at `path` and cuts it.
pub fn cut_manifest(store: &Store, path: &Path, opts: &CutOptions) -> Result<CutReport, CutError> {
    let manifest = Manifest::load(path)?;
    let mut opts = opts.clone();
    opts.source_path.get_or_insert_with(|| path.display().to_string());
    cut(store, &manifest, &crate::manifest::ingest_dir(path), &opts)
}

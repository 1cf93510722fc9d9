//! Builds and maintains the coarser pyramid levels above the base tiles.
//!
//! A scale job names a rectangle of base tiles and a watermark. The scaler
//! walks down from every coarsest cell covering the rectangle and
//! recomputes a tile whenever something beneath it was written after the
//! watermark. Search records for a cell are published only once the whole
//! cell is current.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, info};

use crate::grid::{self, GeoBox, Scale, SceneId, Theme, ThemeId, ThemeKind, TileAddress, TILE_PIXELS};
use crate::jobs::{self, JobError, JobsConfig, ScaleJob};
use crate::raster::{self, Raster, RasterError};
use crate::store::{ImageSearchRecord, NewTile, Store, StoreError, TileInfo, WriteDecision};

/// Marks the orig_meta_tag of a derived tile; the low bits name the scale
/// job (zero for a full rebuild).
pub const DERIVED_TAG: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("theme {theme}: level {level} has no finer level to derive from")]
    BadPlan { theme: ThemeId, level: Scale },
    #[error("scale {scale} is not a base of theme {theme}")]
    NotABase { theme: ThemeId, scale: Scale },
}

/// Which level each derived level is computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PyramidPlan {
    pub theme: ThemeId,
    /// (source, derived) pairs, ascending.
    pub edges: Vec<(Scale, Scale)>,
    /// Levels whose tiles get search records.
    pub search_scales: Vec<Scale>,
}

impl PyramidPlan {
    /// Coarsest level derived (directly or transitively) from `base`.
    pub fn chain_top(&self, base: Scale) -> Scale {
        let mut top = base;
        while let Some(&(_, d)) = self.edges.iter().find(|(s, _)| *s == top) {
            top = d;
        }
        top
    }

    pub fn derived_levels(&self) -> Vec<Scale> {
        self.edges.iter().map(|e| e.1).collect()
    }
}

pub fn plan_for_theme(theme: &Theme) -> Result<PyramidPlan, ScaleError> {
    let mut edges = vec![];
    for &level in &theme.pyramid_levels {
        if theme.base_scales.contains(&level) {
            continue;
        }
        let src = Scale::new(level.level() as i32 - 1).ok().filter(|s| theme.pyramid_levels.contains(s));
        match src {
            Some(s) => edges.push((s, level)),
            None => return Err(ScaleError::BadPlan { theme: theme.id, level }),
        }
    }
    Ok(PyramidPlan { theme: theme.id, edges, search_scales: theme.pyramid_levels.clone() })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScaleReport {
    pub cells: u64,
    pub tiles_written: u64,
    pub search_records: u64,
}

/// Fault hook for tests: called before each derived tile write.
pub type BeforeWrite<'a> = &'a mut dyn FnMut(&TileAddress);

fn tile_geo_box(store: &Store, theme: &Theme, addr: &TileAddress) -> Option<GeoBox> {
    match theme.kind {
        ThemeKind::Projected => {
            let tl = grid::utm_of_tile(*addr, theme).ok()?;
            let ext = addr.scale.resolution().tile_meters();
            grid::geo_box_of_utm_rect(tl.zone, tl.easting, tl.northing, ext, ext).ok()
        }
        ThemeKind::Raw => {
            let e = store.scene_extent(theme.id, addr.scene)?;
            let b = e.geo_bbox?;
            let k = addr.scale.level().checked_sub(e.base_scale.level())?;
            let size = (TILE_PIXELS as f64) * f64::from(1u32 << k);
            let (w, h) = (e.width_px as f64, e.height_px as f64);
            let scene_top = (e.rows * TILE_PIXELS) as f64;
            let u0 = addr.x as f64 * size;
            let u1 = (u0 + size).min(w);
            let v_top = (addr.y as f64 * size).min(scene_top);
            let v_bot = (v_top - size).max(scene_top - h);
            if u0 >= u1 || v_bot >= v_top {
                return None;
            }
            let (lat_span, lon_span) = (b.max_lat - b.min_lat, b.max_lon - b.min_lon);
            let lat = |v: f64| b.max_lat - (scene_top - v) / h * lat_span;
            let lon = |u: f64| b.min_lon + u / w * lon_span;
            Some(GeoBox { min_lat: lat(v_bot), min_lon: lon(u0), max_lat: lat(v_top), max_lon: lon(u1) })
        }
    }
}

fn write_derived(store: &Store, addr: TileAddress, tile: &Raster, tag: u64) -> Result<u64, ScaleError> {
    let new = NewTile::from_raster(addr, tag, tile)?;
    let mut attempts = 0;
    loop {
        let claim = store.claim(addr);
        let decision = match store.visible_info(&addr) {
            None => WriteDecision::InsertVisible,
            Some(i) => WriteDecision::ReplaceOld { old_seq: i.insert_seq },
        };
        match store.put_tile_txn(&claim, new.clone(), decision) {
            Err(StoreError::Conflict { .. }) if attempts < 16 => attempts += 1,
            other => return Ok(other?),
        }
    }
}

/// Descendants of `top` at `level`, as inclusive x and y ranges.
fn descendant_ranges(top: &TileAddress, level: Scale) -> (u32, u32, u32, u32) {
    let d = top.scale.level() - level.level();
    let x0 = top.x << d;
    let x1 = ((top.x + 1) << d) - 1;
    let y1 = top.y << d;
    let y0 = if top.y == 0 { 0 } else { ((top.y - 1) << d) + 1 };
    (x0, x1, y0, y1)
}

struct Cell<'a> {
    store: &'a Store,
    base: Scale,
    watermark: u64,
    tag: u64,
    infos: HashMap<TileAddress, TileInfo>,
    written: u64,
    hook: Option<&'a mut dyn FnMut(&TileAddress)>,
}

impl Cell<'_> {
    fn load(store: &Store, top: &TileAddress, base: Scale) -> HashMap<TileAddress, TileInfo> {
        let mut infos = HashMap::new();
        for l in base.level()..=top.scale.level() {
            let level = Scale::new(l as i32).expect("level inside theme range");
            let (x0, x1, y0, y1) = descendant_ranges(top, level);
            for i in store.query_infos(top.theme, level, top.scene, x0..=x1, y0..=y1) {
                infos.insert(i.address, i);
            }
        }
        infos
    }

    /// Returns (present, newer than the watermark) for `node` after
    /// bringing it up to date.
    fn visit(&mut self, node: TileAddress) -> Result<(bool, bool), ScaleError> {
        if node.scale == self.base {
            let i = self.infos.get(&node);
            return Ok((i.is_some(), i.is_some_and(|i| i.insert_seq > self.watermark)));
        }
        let kids = grid::children_unchecked(node);
        let mut any_present = false;
        let mut any_dirty = false;
        for (child, _) in kids.iter().flatten() {
            let (p, d) = self.visit(*child)?;
            any_present |= p;
            any_dirty |= d;
        }
        let own = self.infos.get(&node).copied();
        if any_present && (any_dirty || own.is_none()) {
            let mut rasters: [Option<Raster>; 4] = Default::default();
            for (slot, kid) in rasters.iter_mut().zip(kids.iter()) {
                if let Some((a, _)) = kid {
                    *slot = self.store.load_visible_raster(a)?.map(|(_, r)| r);
                }
            }
            let refs: [Option<&Raster>; 4] = std::array::from_fn(|i| rasters[i].as_ref());
            if refs.iter().all(Option::is_none) {
                return Ok((own.is_some(), false));
            }
            let tile = raster::downsample_2x2(refs)?;
            if let Some(h) = self.hook.as_mut() {
                h(&node);
            }
            let seq = write_derived(self.store, node, &tile, self.tag)?;
            self.written += 1;
            if let Some(info) = self.store.visible_info(&node) {
                self.infos.insert(node, info);
            }
            debug!(%node, seq, "derived tile written");
            return Ok((true, true));
        }
        Ok((own.is_some(), own.is_some_and(|i| i.insert_seq > self.watermark)))
    }
}

fn publish(
    store: &Store,
    theme: &Theme,
    search_scales: &[Scale],
    infos: impl Iterator<Item = TileInfo>,
) -> Result<u64, ScaleError> {
    let mut records = vec![];
    for i in infos {
        if !search_scales.contains(&i.address.scale) {
            continue;
        }
        if store.search_record(&i.address).is_some_and(|r| r.tile_seq == i.insert_seq) {
            continue;
        }
        if let Some(b) = tile_geo_box(store, theme, &i.address) {
            records.push(ImageSearchRecord { address: i.address, geo_bbox: b, tile_seq: i.insert_seq });
        }
    }
    records.sort_by_key(|r| r.address);
    let n = records.len() as u64;
    store.put_search_records(records)?;
    Ok(n)
}

/// Coarsest cells whose pyramids contain the job rectangle.
fn top_cells(job: &ScaleJob, top: Scale) -> Vec<TileAddress> {
    let k = top.level() - job.base_scale.level();
    let up_x = |x: u32| x >> k;
    let up_y = |y: u32| y.div_ceil(1 << k);
    let mut out = vec![];
    for y in (up_y(job.rect.y_min)..=up_y(job.rect.y_max)).rev() {
        for x in up_x(job.rect.x_min)..=up_x(job.rect.x_max) {
            out.push(TileAddress::new(job.theme, top, job.scene, x, y));
        }
    }
    out
}

/// Runs a claimed job to completion, optionally calling `hook` before
/// every derived write.
pub fn run_scale_job_with(
    store: &Store,
    job: &ScaleJob,
    claimer: &str,
    mut hook: Option<BeforeWrite<'_>>,
) -> Result<ScaleReport, ScaleError> {
    let theme = store.theme(job.theme)?;
    if !theme.base_scales.contains(&job.base_scale) {
        return Err(ScaleError::NotABase { theme: theme.id, scale: job.base_scale });
    }
    let plan = plan_for_theme(theme)?;
    let top = plan.chain_top(job.base_scale);
    let mut report = ScaleReport::default();
    info!(job = job.job_id, theme = %job.theme, scene = %job.scene, "scale job started");
    for cell in top_cells(job, top) {
        let infos = Cell::load(store, &cell, job.base_scale);
        let mut c = Cell {
            store,
            base: job.base_scale,
            watermark: job.watermark_seq,
            tag: DERIVED_TAG | job.job_id,
            infos,
            written: 0,
            hook: match hook.as_mut() {
                Some(h) => Some(&mut **h),
                None => None,
            },
        };
        c.visit(cell)?;
        report.tiles_written += c.written;
        let infos: Vec<TileInfo> = c.infos.into_values().collect();
        report.search_records += publish(store, theme, &plan.search_scales, infos.into_iter())?;
        report.cells += 1;
        jobs::heartbeat_scale_job(store, job.job_id, claimer)?;
    }
    jobs::complete_scale_job(store, job.job_id, claimer)?;
    info!(job = job.job_id, written = report.tiles_written, "scale job completed");
    Ok(report)
}

pub fn run_scale_job(store: &Store, job: &ScaleJob, claimer: &str) -> Result<ScaleReport, ScaleError> {
    run_scale_job_with(store, job, claimer, None)
}

/// Claims and runs queued jobs for `theme` (optionally one scene) until none
/// are left. Returns the number of jobs run.
pub fn run_pending(
    store: &Store,
    theme: ThemeId,
    scene: Option<SceneId>,
    claimer: &str,
    cfg: &JobsConfig,
) -> Result<usize, ScaleError> {
    let mut n = 0;
    while let Some(job) = jobs::claim_scale_job(store, theme, scene, claimer, cfg)? {
        run_scale_job(store, &job, claimer)?;
        n += 1;
    }
    Ok(n)
}

/// Every derived tile of one scene, computed from the base tiles alone.
pub fn compute_full_pyramid(
    store: &Store,
    theme: ThemeId,
    scene: SceneId,
) -> Result<BTreeMap<TileAddress, Raster>, ScaleError> {
    let t = store.theme(theme)?;
    let plan = plan_for_theme(t)?;
    let mut out = BTreeMap::new();
    for &base in &t.base_scales {
        let mut level: BTreeMap<TileAddress, Raster> = BTreeMap::new();
        for i in store.query_infos(theme, base, scene, 0..=u32::MAX, 0..=u32::MAX) {
            if let Some((_, r)) = store.load_visible_raster(&i.address)? {
                level.insert(i.address, r);
            }
        }
        let top = plan.chain_top(base);
        while level.keys().next().is_some_and(|a| a.scale < top) {
            let mut parents: BTreeMap<TileAddress, [Option<&Raster>; 4]> = BTreeMap::new();
            for (a, r) in &level {
                let p = grid::parent_unchecked(*a);
                let kids = grid::children_unchecked(p);
                let slot = kids.iter().position(|k| k.is_some_and(|(c, _)| c == *a)).expect("child of its parent");
                parents.entry(p).or_default()[slot] = Some(r);
            }
            let mut next = BTreeMap::new();
            for (p, kids) in parents {
                next.insert(p, raster::downsample_2x2(kids)?);
            }
            out.extend(next.iter().map(|(a, r)| (*a, r.clone())));
            level = next;
        }
    }
    Ok(out)
}

/// Recomputes and rewrites every derived tile of a scene unconditionally.
pub fn build_full_pyramid(store: &Store, theme: ThemeId, scene: SceneId) -> Result<ScaleReport, ScaleError> {
    let tiles = compute_full_pyramid(store, theme, scene)?;
    let t = store.theme(theme)?;
    let plan = plan_for_theme(t)?;
    let mut report = ScaleReport::default();
    for (a, r) in &tiles {
        write_derived(store, *a, r, DERIVED_TAG)?;
        report.tiles_written += 1;
    }
    let mut infos = vec![];
    for &level in &t.pyramid_levels {
        infos.extend(store.query_infos(theme, level, scene, 0..=u32::MAX, 0..=u32::MAX));
    }
    report.search_records = publish(store, t, &plan.search_scales, infos.into_iter())?;
    Ok(report)
}

//! The warehouse: tiles, source-image metadata, search rows, coverage and
//! job state, persisted in one append-only log under a store directory.
//!
//! Every mutation is framed and checksummed before it becomes observable.
//! Writers serialise on an exclusive lock of the log file (so several
//! processes may load into one store), catch up on records appended by other
//! processes, then append. Readers never take that lock: they work from the
//! in-memory index and read blobs positionally, so a reader always sees a
//! complete visible tile.
//!
//! Replacing a tile appends the new record first and the hide record for the
//! old one last. The new tile only becomes visible once the hide record is
//! applied, and a replacement whose hide record never made it to disk is
//! rolled back when the log is next replayed.

mod coverage;
mod integrity;
mod log;
mod search;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::ops::RangeInclusive;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, GeoBox, GeoCoord, Scale, SceneId, Theme, ThemeId, ThemeKind, TileAddress};
use crate::jobs::{LoadJob, ScaleJob};
use crate::raster::{self, Raster};

pub use coverage::{cell_span as coverage_cell_span, CoverageGrid, COVERAGE_DENSITIES};
pub use integrity::{integrity_scan, IntegrityReport};
pub use search::ImageSearchRecord;

use log::{Body, Frame, HideRecord, InsertHeader, LogReader};

const LOG_FILE: &str = "warehouse.log";
const THEMES_FILE: &str = "themes.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store config: {0}")]
    Config(String),
    #[error("write claim for {0} not held")]
    ClaimNotHeld(TileAddress),
    #[error("tile {addr} changed underneath the writer (expected visible {expected:?}, found {found:?})")]
    Conflict { addr: TileAddress, expected: Option<u64>, found: Option<u64> },
    #[error("unknown theme {0}")]
    UnknownTheme(ThemeId),
    #[error("unknown original image tag {0}")]
    UnknownMeta(u64),
    #[error("production status of tag {tag} cannot move from {from:?} to {to:?}")]
    BackwardStatus { tag: u64, from: ProdStatus, to: ProdStatus },
    #[error("no visible tile at {0}")]
    NotVisible(TileAddress),
    #[error("invalid coverage box {0:?}")]
    BadBox(GeoBox),
    #[error("tile blob: {0}")]
    Raster(#[from] raster::RasterError),
    #[error("event encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("injected crash")]
    InjectedCrash,
    #[error("store handle is dead after an earlier crash")]
    Poisoned,
    #[error("{0}")]
    Rejected(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisplayStatus {
    Visible,
    Invisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProdStatus {
    Pending,
    Tiling,
    Completed,
}

/// Footprint of a source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceFootprint {
    Utm { zone: u8, left: f64, top: f64, width_m: f64, height_m: f64 },
    ScenePixels { x: u32, y: u32, width: u32, height: u32 },
}

/// Per-source-image metadata; the unit of load restartability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginalMeta {
    pub orig_meta_tag: u64,
    pub theme: ThemeId,
    pub media_id: String,
    pub source_file: String,
    pub acquisition_date: String,
    pub footprint: SourceFootprint,
    pub prod_status: ProdStatus,
    /// Store sequence when tiling of this image began.
    #[serde(default)]
    pub tiling_seq: Option<u64>,
}

/// Everything but the blob of a stored tile record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileInfo {
    pub address: TileAddress,
    pub insert_seq: u64,
    pub orig_meta_tag: u64,
    pub blank_count: u32,
    pub blob_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub address: TileAddress,
    pub display_status: DisplayStatus,
    pub orig_meta_tag: u64,
    pub insert_seq: u64,
    pub blank_count: u32,
    pub blob: Vec<u8>,
}

/// A tile about to be written. The store assigns its sequence.
#[derive(Debug, Clone)]
pub struct NewTile {
    pub address: TileAddress,
    pub orig_meta_tag: u64,
    pub blank_count: u32,
    pub blob: Vec<u8>,
}

impl NewTile {
    pub fn from_raster(address: TileAddress, orig_meta_tag: u64, r: &Raster) -> Result<Self> {
        Ok(NewTile {
            address,
            orig_meta_tag,
            blank_count: raster::blankness(r).blank_count,
            blob: raster::encode_tile(r)?,
        })
    }
}

/// How a write relates to the record currently visible at its address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteDecision {
    /// No record is visible yet.
    InsertVisible,
    /// The record with this sequence is replaced outright.
    ReplaceOld { old_seq: u64 },
    /// The record with this sequence is replaced by a merge of old and new.
    MergedReplace { old_seq: u64 },
}

impl WriteDecision {
    fn expected(self) -> Option<u64> {
        match self {
            WriteDecision::InsertVisible => None,
            WriteDecision::ReplaceOld { old_seq } | WriteDecision::MergedReplace { old_seq } => Some(old_seq),
        }
    }
}

/// Fault injection: the store handle "dies" on the given append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    /// Number of appends that succeed before the crash.
    pub crash_after_appends: u64,
    /// Write half of the fatal record before dying.
    pub torn_write: bool,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// `fsync` at the end of every write transaction.
    pub durable: bool,
    pub fault: Option<FaultPlan>,
    /// Themes used when the store is created; ignored for existing stores.
    pub themes: Vec<Theme>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { durable: true, fault: None, themes: grid::standard_themes() }
    }
}

/// Pixel extent and optional geographic box of a raw scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneExtent {
    pub theme: ThemeId,
    pub scene: SceneId,
    pub base_scale: Scale,
    /// Scene size in base pixels.
    pub width_px: u32,
    pub height_px: u32,
    /// Tile rows at the base scale; the top row has `y == rows`.
    pub rows: u32,
    pub geo_bbox: Option<GeoBox>,
}

/// Store JSON event; everything that is not tile pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Meta(OriginalMeta),
    Search(ImageSearchRecord),
    Paint { theme: ThemeId, bbox: GeoBox },
    LoadJob(LoadJob),
    ScaleJob(ScaleJob),
    SceneAllocated { theme: ThemeId, scene: SceneId },
    SceneExtent(SceneExtent),
}

#[derive(Debug, Clone, Copy)]
struct TileMeta {
    seq: u64,
    orig_meta_tag: u64,
    blank_count: u32,
    blob_offset: u64,
    blob_len: u32,
}

#[derive(Debug, Default)]
struct Slot {
    visible: Option<TileMeta>,
    hidden: Vec<TileMeta>,
}

/// In-memory image of the log.
#[derive(Debug, Default)]
pub struct State {
    offset: u64,
    last_seq: u64,
    tiles: HashMap<(ThemeId, Scale), BTreeMap<(SceneId, u32, u32), Slot>>,
    pending: HashMap<u64, (TileAddress, TileMeta)>,
    rolled_back: u64,
    metas: BTreeMap<u64, OriginalMeta>,
    search: search::SearchIndex,
    coverage: coverage::Coverage,
    pub(crate) load_jobs: BTreeMap<u64, LoadJob>,
    pub(crate) scale_jobs: BTreeMap<u64, ScaleJob>,
    pub(crate) scene_counters: HashMap<ThemeId, u32>,
    scene_extents: HashMap<(ThemeId, SceneId), SceneExtent>,
}

impl State {
    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    fn slot(&self, a: &TileAddress) -> Option<&Slot> {
        self.tiles.get(&(a.theme, a.scale))?.get(&(a.scene, a.x, a.y))
    }

    fn slot_mut(&mut self, a: &TileAddress) -> &mut Slot {
        self.tiles.entry((a.theme, a.scale)).or_default().entry((a.scene, a.x, a.y)).or_default()
    }

    fn visible(&self, a: &TileAddress) -> Option<TileMeta> {
        self.slot(a).and_then(|s| s.visible)
    }

    pub fn metas(&self) -> impl Iterator<Item = &OriginalMeta> {
        self.metas.values()
    }

    fn apply(&mut self, frame: Frame) -> Result<()> {
        match frame.body {
            Body::Insert { header, blob_offset, blob_len } => {
                let meta = TileMeta {
                    seq: header.seq,
                    orig_meta_tag: header.orig_meta_tag,
                    blank_count: header.blank_count,
                    blob_offset,
                    blob_len,
                };
                self.last_seq = self.last_seq.max(header.seq);
                match header.replaces {
                    Some(_) => {
                        self.pending.insert(header.seq, (header.addr, meta));
                    }
                    None => {
                        let slot = self.slot_mut(&header.addr);
                        match slot.visible {
                            Some(old) if old.seq > meta.seq => slot.hidden.push(meta),
                            Some(old) => {
                                slot.hidden.push(old);
                                slot.visible = Some(meta);
                            }
                            None => slot.visible = Some(meta),
                        }
                    }
                }
            }
            Body::Hide(HideRecord { addr, hidden_seq, by_seq }) => {
                let incoming = self.pending.remove(&by_seq);
                let slot = self.slot_mut(&addr);
                if slot.visible.is_some_and(|v| v.seq == hidden_seq) {
                    slot.hidden.push(slot.visible.take().unwrap());
                }
                if let Some((_, meta)) = incoming {
                    if let Some(cur) = slot.visible.take() {
                        slot.hidden.push(cur);
                    }
                    slot.visible = Some(meta);
                }
            }
            Body::Event(bytes) => {
                let ev: Event = serde_json::from_slice(&bytes)?;
                self.apply_event(ev);
            }
        }
        Ok(())
    }

    fn apply_event(&mut self, ev: Event) {
        match ev {
            Event::Meta(m) => {
                self.metas.insert(m.orig_meta_tag, m);
            }
            Event::Search(r) => self.search.insert(r),
            Event::Paint { theme, bbox } => self.coverage.paint(theme, &bbox),
            Event::LoadJob(j) => {
                self.load_jobs.insert(j.job_id, j);
            }
            Event::ScaleJob(j) => {
                self.scale_jobs.insert(j.job_id, j);
            }
            Event::SceneAllocated { theme, scene } => {
                let c = self.scene_counters.entry(theme).or_default();
                *c = (*c).max(scene.0);
            }
            Event::SceneExtent(e) => {
                self.scene_extents.insert((e.theme, e.scene), e);
            }
        }
    }

    /// Replacements left without their hide record by a dead writer.
    fn abandon_pending(&mut self) {
        let pending = std::mem::take(&mut self.pending);
        for (_, (addr, meta)) in pending {
            self.rolled_back += 1;
            self.slot_mut(&addr).hidden.push(meta);
        }
    }
}

struct Writer {
    file: File,
    appends: u64,
    fault: Option<FaultPlan>,
    poisoned: bool,
}

impl Writer {
    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        if self.poisoned {
            return Err(StoreError::Poisoned);
        }
        if let Some(f) = self.fault {
            if self.appends >= f.crash_after_appends {
                if f.torn_write {
                    self.file.write_all(&bytes[..bytes.len() / 2])?;
                }
                self.poisoned = true;
                return Err(StoreError::InjectedCrash);
            }
        }
        self.file.write_all(bytes)?;
        self.appends += 1;
        Ok(())
    }
}

pub struct Store {
    dir: PathBuf,
    reader: File,
    writer: Mutex<Writer>,
    state: RwLock<State>,
    claims: Mutex<HashSet<TileAddress>>,
    claim_freed: Condvar,
    themes: Vec<Theme>,
    durable: bool,
}

/// Exclusive right to write one address through one store handle.
pub struct WriteClaim<'a> {
    store: &'a Store,
    addr: TileAddress,
}

impl WriteClaim<'_> {
    pub fn address(&self) -> TileAddress {
        self.addr
    }
}

impl Drop for WriteClaim<'_> {
    fn drop(&mut self) {
        self.store.claims.lock().remove(&self.addr);
        self.store.claim_freed.notify_all();
    }
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(dir, StoreConfig::default())
    }

    pub fn open_with(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let themes_path = dir.join(THEMES_FILE);
        let themes: Vec<Theme> = if themes_path.exists() {
            serde_json::from_slice(&std::fs::read(&themes_path)?)?
        } else {
            validate_themes(&config.themes)?;
            let tmp = dir.join("themes.json.tmp");
            std::fs::write(&tmp, serde_json::to_vec_pretty(&config.themes)?)?;
            std::fs::rename(&tmp, &themes_path)?;
            config.themes.clone()
        };
        validate_themes(&themes)?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        let reader = File::open(&path)?;
        let store = Store {
            dir,
            reader,
            writer: Mutex::new(Writer { file, appends: 0, fault: config.fault, poisoned: false }),
            state: RwLock::new(State::default()),
            claims: Mutex::new(HashSet::new()),
            claim_freed: Condvar::new(),
            themes,
            durable: config.durable,
        };
        {
            let mut w = store.writer.lock();
            w.file.lock()?;
            let r = store.recover(&mut w);
            w.file.unlock()?;
            r?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn themes(&self) -> &[Theme] {
        &self.themes
    }

    pub fn theme(&self, id: ThemeId) -> Result<&Theme> {
        self.themes.iter().find(|t| t.id == id).ok_or(StoreError::UnknownTheme(id))
    }

    pub fn last_seq(&self) -> u64 {
        self.state.read().last_seq
    }

    pub fn rolled_back_count(&self) -> u64 {
        self.state.read().rolled_back
    }

    /// Reads everything new in the log. Caller holds the file lock, so a
    /// short tail belongs to a dead writer and is cut off.
    fn recover(&self, w: &mut Writer) -> Result<()> {
        let trailing = self.catch_up()?;
        if trailing {
            let end = self.state.read().offset;
            w.file.set_len(end)?;
            w.file.sync_all()?;
        }
        self.state.write().abandon_pending();
        Ok(())
    }

    /// Applies complete records past the current offset. Returns whether
    /// unreadable bytes follow them.
    fn catch_up(&self) -> Result<bool> {
        let from = self.state.read().offset;
        let mut r = LogReader::open(&self.reader, from)?;
        let mut frames = Vec::new();
        while let Some(f) = r.next_frame()? {
            frames.push(f);
        }
        let trailing = r.has_trailing_bytes();
        let mut st = self.state.write();
        if st.offset != from {
            // Someone else caught up first.
            return Ok(false);
        }
        for f in frames {
            st.apply(f)?;
        }
        st.offset = r.position();
        Ok(trailing)
    }

    /// Picks up records written by other processes. Never blocks writers.
    pub fn refresh(&self) -> Result<()> {
        let _w = self.writer.lock();
        self.catch_up()?;
        Ok(())
    }

    fn with_write_lock<T>(&self, f: impl FnOnce(&mut Writer) -> Result<T>) -> Result<T> {
        let mut w = self.writer.lock();
        if w.poisoned {
            return Err(StoreError::Poisoned);
        }
        w.file.lock()?;
        let out = self.recover(&mut w).and_then(|_| f(&mut w));
        let synced = if out.is_ok() && self.durable { w.file.sync_data().map_err(StoreError::from) } else { Ok(()) };
        let applied = if w.poisoned { Ok(false) } else { self.catch_up() };
        w.file.unlock()?;
        let out = out?;
        synced?;
        applied?;
        Ok(out)
    }

    /// Runs `f` against the current state under the write lock and appends
    /// the events it returns. `f` sees every record committed before it.
    pub fn transact<T, E>(&self, f: impl FnOnce(&State) -> std::result::Result<(T, Vec<Event>), E>) -> std::result::Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut result = None;
        let r = self.with_write_lock(|w| {
            let (value, events) = {
                let st = self.state.read();
                match f(&st) {
                    Ok(v) => v,
                    Err(e) => {
                        result = Some(Err(e));
                        return Ok(());
                    }
                }
            };
            for ev in &events {
                w.append(&log::encode_event(&serde_json::to_vec(ev)?))?;
            }
            result = Some(Ok(value));
            Ok(())
        });
        match (r, result) {
            (Err(e), _) => Err(e.into()),
            (Ok(()), Some(v)) => v,
            (Ok(()), None) => unreachable!("transaction closure did not run"),
        }
    }

    pub fn append_events(&self, events: Vec<Event>) -> Result<()> {
        self.transact(|_| Ok::<_, StoreError>(((), events)))
    }

    // ---- claims ------------------------------------------------------------

    /// Waits for and takes the write claim on `addr`.
    pub fn claim(&self, addr: TileAddress) -> WriteClaim<'_> {
        let mut c = self.claims.lock();
        while c.contains(&addr) {
            self.claim_freed.wait(&mut c);
        }
        c.insert(addr);
        WriteClaim { store: self, addr }
    }

    pub fn try_claim(&self, addr: TileAddress) -> Option<WriteClaim<'_>> {
        if !self.claims.lock().insert(addr) {
            return None;
        }
        Some(WriteClaim { store: self, addr })
    }

    // ---- tiles -------------------------------------------------------------

    /// The four-step tile write. The caller has already looked at the
    /// existing record and merged pixels; this checks that the record is
    /// still the one the decision was made against, appends the new record
    /// and then, last, the record that hides the old one.
    pub fn put_tile_txn(&self, claim: &WriteClaim<'_>, new: NewTile, decision: WriteDecision) -> Result<u64> {
        if !std::ptr::eq(claim.store, self) || claim.addr != new.address {
            return Err(StoreError::ClaimNotHeld(new.address));
        }
        let addr = new.address;
        self.theme(addr.theme)?;
        self.with_write_lock(|w| {
            let (seq, found) = {
                let st = self.state.read();
                (st.last_seq + 1, st.visible(&addr).map(|m| m.seq))
            };
            if found != decision.expected() {
                return Err(StoreError::Conflict { addr, expected: decision.expected(), found });
            }
            let header = InsertHeader {
                seq,
                addr,
                orig_meta_tag: new.orig_meta_tag,
                blank_count: new.blank_count,
                replaces: decision.expected(),
            };
            w.append(&log::encode_insert(&header, &new.blob))?;
            if let Some(old_seq) = decision.expected() {
                w.append(&log::encode_hide(&HideRecord { addr, hidden_seq: old_seq, by_seq: seq }))?;
            }
            Ok(seq)
        })
    }

    fn read_blob(&self, m: &TileMeta) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; m.blob_len as usize];
        self.reader.read_exact_at(&mut buf, m.blob_offset)?;
        Ok(buf)
    }

    fn info(addr: TileAddress, m: &TileMeta) -> TileInfo {
        TileInfo {
            address: addr,
            insert_seq: m.seq,
            orig_meta_tag: m.orig_meta_tag,
            blank_count: m.blank_count,
            blob_len: m.blob_len,
        }
    }

    pub fn visible_info(&self, addr: &TileAddress) -> Option<TileInfo> {
        self.state.read().visible(addr).map(|m| Self::info(*addr, &m))
    }

    /// Blob of the visible record at `addr`.
    pub fn get_visible_tile(&self, addr: &TileAddress) -> Result<Option<Vec<u8>>> {
        let meta = self.state.read().visible(addr);
        meta.map(|m| self.read_blob(&m)).transpose()
    }

    pub fn get_visible_record(&self, addr: &TileAddress) -> Result<Option<TileRecord>> {
        let meta = self.state.read().visible(addr);
        meta.map(|m| self.record(*addr, &m, DisplayStatus::Visible)).transpose()
    }

    pub fn load_visible_raster(&self, addr: &TileAddress) -> Result<Option<(TileInfo, Raster)>> {
        let meta = self.state.read().visible(addr);
        match meta {
            None => Ok(None),
            Some(m) => Ok(Some((Self::info(*addr, &m), raster::decode_tile(&self.read_blob(&m)?)?))),
        }
    }

    fn record(&self, addr: TileAddress, m: &TileMeta, status: DisplayStatus) -> Result<TileRecord> {
        Ok(TileRecord {
            address: addr,
            display_status: status,
            orig_meta_tag: m.orig_meta_tag,
            insert_seq: m.seq,
            blank_count: m.blank_count,
            blob: self.read_blob(m)?,
        })
    }

    /// Visibility of many addresses under one lock acquisition.
    pub fn visible_many(&self, addrs: &[TileAddress]) -> Vec<Option<TileInfo>> {
        let st = self.state.read();
        addrs.iter().map(|a| st.visible(a).map(|m| Self::info(*a, &m))).collect()
    }

    /// Every record ever written at `addr`, visible or not, by sequence.
    pub fn records_at(&self, addr: &TileAddress) -> Result<Vec<TileRecord>> {
        let metas: Vec<(TileMeta, DisplayStatus)> = {
            let st = self.state.read();
            match st.slot(addr) {
                None => vec![],
                Some(s) => s
                    .hidden
                    .iter()
                    .map(|m| (*m, DisplayStatus::Invisible))
                    .chain(s.visible.map(|m| (m, DisplayStatus::Visible)))
                    .collect(),
            }
        };
        let mut out: Vec<TileRecord> =
            metas.iter().map(|(m, s)| self.record(*addr, m, *s)).collect::<Result<_>>()?;
        out.sort_by_key(|r| r.insert_seq);
        Ok(out)
    }

    /// Visible records inside the rectangle, ordered by y descending then x.
    pub fn query_tiles(
        &self,
        theme: ThemeId,
        scale: Scale,
        scene: SceneId,
        xs: RangeInclusive<u32>,
        ys: RangeInclusive<u32>,
    ) -> Result<Vec<TileRecord>> {
        let mut found: Vec<(TileAddress, TileMeta)> = {
            let st = self.state.read();
            match st.tiles.get(&(theme, scale)) {
                Some(table) if !xs.is_empty() && !ys.is_empty() => table
                    .range((scene, *xs.start(), 0)..=(scene, *xs.end(), u32::MAX))
                    .filter(|((_, _, y), _)| ys.contains(y))
                    .filter_map(|((sc, x, y), s)| s.visible.map(|m| (TileAddress::new(theme, scale, *sc, *x, *y), m)))
                    .collect(),
                _ => vec![],
            }
        };
        found.sort_by(|(a, _), (b, _)| b.y.cmp(&a.y).then(a.x.cmp(&b.x)));
        found.iter().map(|(a, m)| self.record(*a, m, DisplayStatus::Visible)).collect()
    }

    pub fn query_infos(
        &self,
        theme: ThemeId,
        scale: Scale,
        scene: SceneId,
        xs: RangeInclusive<u32>,
        ys: RangeInclusive<u32>,
    ) -> Vec<TileInfo> {
        let st = self.state.read();
        let Some(table) = st.tiles.get(&(theme, scale)) else { return vec![] };
        if xs.is_empty() || ys.is_empty() {
            return vec![];
        }
        table
            .range((scene, *xs.start(), 0)..=(scene, *xs.end(), u32::MAX))
            .filter(|((_, _, y), s)| ys.contains(y) && s.visible.is_some())
            .map(|((sc, x, y), s)| Self::info(TileAddress::new(theme, scale, *sc, *x, *y), s.visible.as_ref().unwrap()))
            .collect()
    }

    /// Scenes with at least one visible tile at (`theme`, `scale`).
    pub fn scenes(&self, theme: ThemeId, scale: Scale) -> Vec<SceneId> {
        let st = self.state.read();
        let mut out: Vec<SceneId> = st
            .tiles
            .get(&(theme, scale))
            .map(|t| t.iter().filter(|(_, s)| s.visible.is_some()).map(|((sc, _, _), _)| *sc).collect())
            .unwrap_or_default();
        out.dedup();
        out
    }

    /// All visible tiles of a theme, for admin tooling and comparisons.
    pub fn visible_infos(&self, theme: ThemeId) -> Vec<TileInfo> {
        let st = self.state.read();
        let mut out = vec![];
        for ((t, scale), table) in &st.tiles {
            if *t != theme {
                continue;
            }
            for ((sc, x, y), s) in table {
                if let Some(m) = &s.visible {
                    out.push(Self::info(TileAddress::new(*t, *scale, *sc, *x, *y), m));
                }
            }
        }
        out.sort_by_key(|i| i.address);
        out
    }

    // ---- source metadata ---------------------------------------------------

    /// Stores `m`. A zero tag allocates the next free one. Returns the tag.
    pub fn upsert_original_meta(&self, mut m: OriginalMeta) -> Result<u64> {
        self.theme(m.theme)?;
        self.transact(|st| {
            if m.orig_meta_tag == 0 {
                m.orig_meta_tag = st.metas.keys().next_back().copied().unwrap_or(0) + 1;
            } else if let Some(prev) = st.metas.get(&m.orig_meta_tag) {
                if m.prod_status < prev.prod_status {
                    return Err(StoreError::BackwardStatus {
                        tag: m.orig_meta_tag,
                        from: prev.prod_status,
                        to: m.prod_status,
                    });
                }
            }
            Ok((m.orig_meta_tag, vec![Event::Meta(m.clone())]))
        })
    }

    pub fn set_prod_status(&self, tag: u64, status: ProdStatus) -> Result<OriginalMeta> {
        self.transact(|st| {
            let mut m = st.metas.get(&tag).cloned().ok_or(StoreError::UnknownMeta(tag))?;
            if status < m.prod_status {
                return Err(StoreError::BackwardStatus { tag, from: m.prod_status, to: status });
            }
            if status == m.prod_status {
                return Ok((m, vec![]));
            }
            if status == ProdStatus::Tiling {
                m.tiling_seq = Some(st.last_seq);
            }
            m.prod_status = status;
            Ok((m.clone(), vec![Event::Meta(m)]))
        })
    }

    pub fn get_original_meta(&self, tag: u64) -> Option<OriginalMeta> {
        self.state.read().metas.get(&tag).cloned()
    }

    pub fn find_original_meta(&self, theme: ThemeId, media_id: &str, source_file: &str) -> Option<OriginalMeta> {
        self.state
            .read()
            .metas
            .values()
            .find(|m| m.theme == theme && m.media_id == media_id && m.source_file == source_file)
            .cloned()
    }

    // ---- search ------------------------------------------------------------

    pub fn put_search_records(&self, records: Vec<ImageSearchRecord>) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        self.transact(|st| {
            for r in &records {
                if st.visible(&r.address).is_none() {
                    return Err(StoreError::NotVisible(r.address));
                }
            }
            Ok(((), records.iter().cloned().map(Event::Search).collect()))
        })
    }

    pub fn put_search_record(&self, r: ImageSearchRecord) -> Result<()> {
        self.put_search_records(vec![r])
    }

    pub fn search_record(&self, addr: &TileAddress) -> Option<ImageSearchRecord> {
        self.state.read().search.get(addr).cloned()
    }

    pub fn search_record_count(&self) -> usize {
        self.state.read().search.len()
    }

    pub fn search_records(&self) -> Vec<ImageSearchRecord> {
        let mut v: Vec<_> = self.state.read().search.all().cloned().collect();
        v.sort_by_key(|r| r.address);
        v
    }

    /// Finest searchable tile of `theme` containing `geo`. Among tiles of
    /// equal scale, one whose exact UTM footprint contains the point beats
    /// one that only matches by bounding box; then the later insert wins.
    pub fn search_tiles_at(&self, geo: GeoCoord, theme: ThemeId) -> Option<TileAddress> {
        let t = self.theme(theme).ok()?;
        let st = self.state.read();
        st.search
            .candidates(theme, geo)
            .into_iter()
            .map(|r| {
                let exact = t.kind == ThemeKind::Projected && footprint_contains(t, &r.address, geo);
                (r.address.scale, std::cmp::Reverse(exact), std::cmp::Reverse(r.tile_seq), r.address)
            })
            .min()
            .map(|k| k.3)
    }

    // ---- coverage ----------------------------------------------------------

    pub fn coverage_paint(&self, theme: ThemeId, bbox: GeoBox) -> Result<()> {
        if !bbox.is_valid() {
            return Err(StoreError::BadBox(bbox));
        }
        self.theme(theme)?;
        self.append_events(vec![Event::Paint { theme, bbox }])
    }

    pub fn coverage_snapshot(&self, theme: Option<ThemeId>, pixels_per_degree: u32) -> CoverageGrid {
        self.state.read().coverage.snapshot(theme, pixels_per_degree)
    }

    pub fn scene_extent(&self, theme: ThemeId, scene: SceneId) -> Option<SceneExtent> {
        self.state.read().scene_extents.get(&(theme, scene)).cloned()
    }

    // ---- jobs --------------------------------------------------------------

    pub fn load_jobs(&self) -> Vec<LoadJob> {
        self.state.read().load_jobs.values().cloned().collect()
    }

    pub fn scale_jobs(&self) -> Vec<ScaleJob> {
        self.state.read().scale_jobs.values().cloned().collect()
    }

    pub fn load_job(&self, id: u64) -> Option<LoadJob> {
        self.state.read().load_jobs.get(&id).cloned()
    }

    pub fn scale_job(&self, id: u64) -> Option<ScaleJob> {
        self.state.read().scale_jobs.get(&id).cloned()
    }
}

fn footprint_contains(theme: &Theme, addr: &TileAddress, geo: GeoCoord) -> bool {
    let Ok(u) = grid::latlon_to_utm_in_zone(geo, addr.scene.0 as u8) else { return false };
    let Ok(tl) = grid::utm_of_tile(*addr, theme) else { return false };
    let ext = addr.scale.resolution().tile_meters();
    u.easting >= tl.easting && u.easting < tl.easting + ext && u.northing <= tl.northing && u.northing > tl.northing - ext
}

fn validate_themes(themes: &[Theme]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in themes {
        if !seen.insert(t.id) {
            return Err(StoreError::Config(format!("duplicate theme id {}", t.id)));
        }
        if t.base_scales.is_empty() || t.pyramid_levels.is_empty() {
            return Err(StoreError::Config(format!("theme {} has no levels", t.id)));
        }
        if !t.pyramid_levels.windows(2).all(|w| w[0] < w[1]) {
            return Err(StoreError::Config(format!("theme {} levels not ascending", t.id)));
        }
        if !t.base_scales.iter().all(|b| t.pyramid_levels.contains(b)) || t.base_scales[0] != t.pyramid_levels[0] {
            return Err(StoreError::Config(format!("theme {} base scales inconsistent", t.id)));
        }
    }
    Ok(())
}

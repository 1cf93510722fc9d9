#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};
use tilevault::grid::{GeoBox, Scale, SceneId, ThemeId, TileAddress, TILE_PIXELS};
use tilevault::jobs::JobsConfig;
use tilevault::raster::{self, Raster};
use tilevault::store::{FaultPlan, NewTile, Store, StoreConfig, WriteDecision};

pub fn s(v: i32) -> Scale {
    Scale::new(v).unwrap()
}

pub fn quick_store(dir: &Path) -> Store {
    Store::open_with(dir, StoreConfig { durable: false, ..Default::default() }).unwrap()
}

pub fn faulty_store(dir: &Path, crash_after_appends: u64, torn_write: bool) -> Store {
    let cfg = StoreConfig {
        durable: false,
        fault: Some(FaultPlan { crash_after_appends, torn_write }),
        ..Default::default()
    };
    Store::open_with(dir, cfg).unwrap()
}

/// Jobs left running by a dead process are taken over at once.
pub fn eager_jobs() -> JobsConfig {
    JobsConfig { stale_after: Duration::ZERO, ..Default::default() }
}

pub fn gray_image(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> Raster {
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            px.push(f(x, y));
        }
    }
    Raster::gray(w, h, px).unwrap()
}

/// Deterministic non-blank ground pattern at integer metres.
pub fn ground(e: i64, n: i64) -> u8 {
    let v = (e.wrapping_mul(7919) ^ n.wrapping_mul(104_729)).rem_euclid(251);
    v as u8
}

pub fn write_pgm(dir: &Path, name: &str, r: &Raster) {
    std::fs::write(dir.join(name), raster::write_pgm(r).unwrap()).unwrap();
}

pub fn write_png(dir: &Path, name: &str, r: &Raster) {
    std::fs::write(dir.join(name), raster::encode_png(r).unwrap()).unwrap();
}

pub fn projected_image(file: &str, res: f64, zone: u8, left: f64, top: f64) -> Value {
    json!({
        "file": file, "format": "pgm", "resolution_m": res,
        "utm": { "zone": zone, "top_left_easting": left, "top_left_northing": top },
        "acquisition_date": "1998-06-24"
    })
}

pub fn raw_image(file: &str, res: f64, x: u32, y: u32) -> Value {
    json!({
        "file": file, "format": "pgm", "resolution_m": res,
        "scene_offset": { "x": x, "y": y }, "acquisition_date": "1996-03-01"
    })
}

pub fn write_manifest(
    dir: &Path,
    name: &str,
    media: &str,
    theme: u16,
    kind: &str,
    images: Vec<Value>,
    geo_bbox: Option<GeoBox>,
) -> PathBuf {
    let mut m = json!({ "media_id": media, "theme": theme, "kind": kind, "images": images });
    if let Some(b) = geo_bbox {
        m["geo_bbox"] = serde_json::to_value(b).unwrap();
    }
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(&m).unwrap()).unwrap();
    path
}

/// Blob of every visible tile of `theme`.
pub fn visible_blobs(store: &Store, theme: ThemeId) -> BTreeMap<TileAddress, Vec<u8>> {
    store
        .visible_infos(theme)
        .into_iter()
        .map(|i| (i.address, store.get_visible_tile(&i.address).unwrap().unwrap()))
        .collect()
}

pub fn visible_seqs(store: &Store, theme: ThemeId) -> BTreeMap<TileAddress, u64> {
    store.visible_infos(theme).into_iter().map(|i| (i.address, i.insert_seq)).collect()
}

/// Writes `r` at `addr`, replacing whatever is visible.
pub fn put_tile(store: &Store, addr: TileAddress, r: &Raster) -> u64 {
    let c = store.claim(addr);
    let d = match store.visible_info(&addr) {
        None => WriteDecision::InsertVisible,
        Some(i) => WriteDecision::ReplaceOld { old_seq: i.insert_seq },
    };
    store.put_tile_txn(&c, NewTile::from_raster(addr, 1, r).unwrap(), d).unwrap()
}

pub fn constant_tile(v: u8) -> Raster {
    Raster::filled_gray(TILE_PIXELS, TILE_PIXELS, v)
}

pub fn doq(scale: i32, x: u32, y: u32) -> TileAddress {
    TileAddress::new(ThemeId(1), s(scale), SceneId(10), x, y)
}

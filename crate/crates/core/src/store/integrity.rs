//! Offline consistency check of a store directory.
//!
//! Replays the log without the in-memory index, so it catches bugs in the
//! index as well as damage on disk.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::Path;

use serde::Serialize;

use super::log::{Body, LogReader};
use super::{Event, ProdStatus, LOG_FILE};
use crate::grid::TileAddress;
use crate::jobs::{LoadStatus, ScaleStatus};
use crate::raster;

#[derive(Debug, Clone, Default, Serialize)]
pub struct IntegrityReport {
    pub frames: u64,
    pub tile_records: u64,
    pub visible_tiles: u64,
    /// Bytes after the last valid frame (a torn tail not yet recovered).
    pub trailing_bytes: u64,
    /// Replacements whose hide record is missing.
    pub unfinished_replacements: u64,
    pub problems: Vec<String>,
}

impl IntegrityReport {
    pub fn is_consistent(&self) -> bool {
        self.problems.is_empty()
    }
}

fn load_rank(s: LoadStatus) -> u8 {
    match s {
        LoadStatus::Queued => 0,
        LoadStatus::Running => 1,
        LoadStatus::Completed | LoadStatus::Aborted => 2,
    }
}

/// Scans `dir`'s log. A torn tail or an unfinished replacement is what a
/// crash leaves behind and is reported in counts, not as a problem.
pub fn integrity_scan(dir: &Path) -> std::io::Result<IntegrityReport> {
    let file = File::open(dir.join(LOG_FILE))?;
    let mut r = LogReader::open(&file, 0)?;
    let mut rep = IntegrityReport::default();
    let mut last_seq = 0u64;
    // address -> visible (seq, blob offset, blob len)
    let mut visible: HashMap<TileAddress, (u64, u64, u32)> = HashMap::new();
    let mut pending: HashMap<u64, (TileAddress, u64, u32, u64)> = HashMap::new();
    let mut prod: BTreeMap<u64, ProdStatus> = BTreeMap::new();
    let mut loads: BTreeMap<u64, LoadStatus> = BTreeMap::new();
    let mut scales: BTreeMap<u64, ScaleStatus> = BTreeMap::new();

    while let Some(f) = r.next_frame()? {
        rep.frames += 1;
        match f.body {
            Body::Insert { header, blob_offset, blob_len } => {
                rep.tile_records += 1;
                if header.seq <= last_seq {
                    rep.problems.push(format!("insert seq {} not above {}", header.seq, last_seq));
                }
                last_seq = last_seq.max(header.seq);
                match header.replaces {
                    None => {
                        if let Some((old, _, _)) = visible.get(&header.addr) {
                            rep.problems.push(format!(
                                "{}: plain insert {} while {} is visible",
                                header.addr, header.seq, old
                            ));
                        }
                        visible.insert(header.addr, (header.seq, blob_offset, blob_len));
                    }
                    Some(old) => {
                        pending.insert(header.seq, (header.addr, blob_offset, blob_len, old));
                    }
                }
            }
            Body::Hide(h) => match pending.remove(&h.by_seq) {
                None => rep.problems.push(format!("{}: hide by unknown record {}", h.addr, h.by_seq)),
                Some((addr, off, len, old)) => {
                    if addr != h.addr || old != h.hidden_seq {
                        rep.problems.push(format!("{}: hide record does not match its insert", h.addr));
                    }
                    match visible.get(&addr) {
                        Some((seq, _, _)) if *seq == h.hidden_seq => {}
                        other => rep.problems.push(format!(
                            "{addr}: hides {} but visible is {:?}",
                            h.hidden_seq,
                            other.map(|v| v.0)
                        )),
                    }
                    visible.insert(addr, (h.by_seq, off, len));
                }
            },
            Body::Event(bytes) => match serde_json::from_slice::<Event>(&bytes) {
                Err(e) => rep.problems.push(format!("event at {}: {e}", f.offset)),
                Ok(Event::Meta(m)) => {
                    if let Some(prev) = prod.insert(m.orig_meta_tag, m.prod_status) {
                        if m.prod_status < prev {
                            rep.problems.push(format!("meta {} went from {prev:?} to {:?}", m.orig_meta_tag, m.prod_status));
                        }
                    }
                }
                Ok(Event::LoadJob(j)) => {
                    if let Some(prev) = loads.insert(j.job_id, j.status) {
                        if load_rank(j.status) < load_rank(prev) || (load_rank(prev) == 2 && prev != j.status) {
                            rep.problems.push(format!("load job {} went from {prev:?} to {:?}", j.job_id, j.status));
                        }
                    }
                }
                Ok(Event::ScaleJob(j)) => {
                    if let Some(prev) = scales.insert(j.job_id, j.status) {
                        if j.status < prev && prev == ScaleStatus::Completed {
                            rep.problems.push(format!("scale job {} reopened", j.job_id));
                        }
                    }
                }
                Ok(_) => {}
            },
        }
    }
    rep.trailing_bytes = file.metadata()?.len() - r.position();
    rep.unfinished_replacements = pending.len() as u64;
    rep.visible_tiles = visible.len() as u64;

    let mut addrs: Vec<_> = visible.into_iter().collect();
    addrs.sort_by_key(|(a, _)| *a);
    for (addr, (seq, off, len)) in addrs {
        let mut buf = vec![0u8; len as usize];
        if let Err(e) = file.read_exact_at(&mut buf, off) {
            rep.problems.push(format!("{addr}: record {seq} unreadable: {e}"));
            continue;
        }
        if let Err(e) = raster::decode_tile(&buf) {
            rep.problems.push(format!("{addr}: record {seq} does not decode: {e}"));
        }
    }
    Ok(rep)
}

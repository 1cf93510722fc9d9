use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::grid::{GeoBox, GeoCoord, ThemeId, TileAddress};

/// Row that makes a tile findable by location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSearchRecord {
    pub address: TileAddress,
    pub geo_bbox: GeoBox,
    /// Insert sequence of the tile when the record was published.
    pub tile_seq: u64,
}

/// Search records bucketed by whole-degree cell.
#[derive(Debug, Default)]
pub(crate) struct SearchIndex {
    records: HashMap<TileAddress, ImageSearchRecord>,
    buckets: HashMap<(ThemeId, i32, i32), Vec<TileAddress>>,
}

fn cells(b: &GeoBox) -> impl Iterator<Item = (i32, i32)> {
    let (la0, la1) = (b.min_lat.floor() as i32, b.max_lat.floor() as i32);
    let (lo0, lo1) = (b.min_lon.floor() as i32, b.max_lon.floor() as i32);
    (la0..=la1).flat_map(move |la| (lo0..=lo1).map(move |lo| (la, lo)))
}

impl SearchIndex {
    pub fn insert(&mut self, r: ImageSearchRecord) {
        let addr = r.address;
        if let Some(prev) = self.records.get(&addr) {
            if prev.geo_bbox == r.geo_bbox {
                self.records.insert(addr, r);
                return;
            }
            for (la, lo) in cells(&prev.geo_bbox) {
                if let Some(v) = self.buckets.get_mut(&(addr.theme, la, lo)) {
                    v.retain(|a| *a != addr);
                }
            }
        }
        for (la, lo) in cells(&r.geo_bbox) {
            self.buckets.entry((addr.theme, la, lo)).or_default().push(addr);
        }
        self.records.insert(addr, r);
    }

    pub fn get(&self, addr: &TileAddress) -> Option<&ImageSearchRecord> {
        self.records.get(addr)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &ImageSearchRecord> {
        self.records.values()
    }

    /// Records of `theme` whose box contains `geo`.
    pub fn candidates(&self, theme: ThemeId, geo: GeoCoord) -> Vec<&ImageSearchRecord> {
        let key = (theme, geo.lat.floor() as i32, geo.lon.floor() as i32);
        self.buckets
            .get(&key)
            .into_iter()
            .flatten()
            .filter_map(|a| self.records.get(a))
            .filter(|r| r.geo_bbox.contains(geo))
            .collect()
    }
}

//! Place-name directory: countries, states and places with their alternate
//! names, name search, nearest-place captions and the famous-places list.
//!
//! Import reads tab-separated rows `name, type, parent, lat, lon`. Parents
//! are named by path: a state's parent is its country, a place's parent is
//! `Country` or `Country/State`, and an alternate place name's parent is
//! `[Country/[State/]]Place`, which must pick out exactly one place.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, GeoCoord, GridError, Scale, Theme, TileAddress};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const WINDS: [&str; 16] = [
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW",
];

const TABLES_FILE: &str = "gazetteer.json";
const FAMOUS_FILE: &str = "famous.json";

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("gazetteer is empty")]
    Empty,
    #[error("gazetteer i/o: {0}")]
    Io(#[from] io::Error),
    #[error("gazetteer file: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Country {
    pub country_id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub state_id: u32,
    pub name: String,
    pub country_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub place_id: u32,
    pub formal_name: String,
    pub state_id: Option<u32>,
    pub country_id: u32,
    pub location: GeoCoord,
}

/// Synonym row; `parent` is the id of the place, state or country it names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltName {
    pub alt_name: String,
    pub parent: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamousTarget {
    Tile { address: TileAddress },
    Geo { location: GeoCoord },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamousPlace {
    pub label: String,
    pub target: FamousTarget,
    #[serde(default = "yes")]
    pub curated: bool,
}

fn yes() -> bool {
    true
}

impl FamousPlace {
    /// Tile the entry links to. Geographic targets go through the grid at
    /// `scale` of `theme`.
    pub fn resolve(&self, theme: &Theme, scale: Scale) -> Result<TileAddress, GridError> {
        match &self.target {
            FamousTarget::Tile { address } => Ok(*address),
            FamousTarget::Geo { location } => {
                let g = GeoCoord::new(location.lat, location.lon)?;
                grid::tile_from_utm(grid::latlon_to_utm(g)?, theme, scale)
            }
        }
    }
}

/// The persisted tables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Tables {
    countries: Vec<Country>,
    states: Vec<State>,
    places: Vec<Place>,
    alt_countries: Vec<AltName>,
    alt_states: Vec<AltName>,
    alt_places: Vec<AltName>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportReport {
    pub countries: usize,
    pub states: usize,
    pub places: usize,
    pub alt_names: usize,
    /// Formal and alternate place names added.
    pub searchable_names: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum MatchRank {
    Exact,
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub rank: MatchRank,
    pub place: Place,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Nearest {
    pub place: Place,
    pub distance_km: f64,
    pub wind: &'static str,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RowKind {
    Country,
    AltCountry,
    State,
    AltState,
    Place,
    AltPlace,
}

impl RowKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "country" => RowKind::Country,
            "alt_country" => RowKind::AltCountry,
            "state" => RowKind::State,
            "alt_state" => RowKind::AltState,
            "place" => RowKind::Place,
            "alt_place" => RowKind::AltPlace,
            _ => return None,
        })
    }
}

struct Row<'a> {
    line: usize,
    kind: RowKind,
    name: &'a str,
    parent: &'a str,
    lat: &'a str,
    lon: &'a str,
}

fn fold(s: &str) -> String {
    s.to_lowercase()
}

#[derive(Debug, Default)]
pub struct Gazetteer {
    t: Tables,
    /// Folded place name (formal or alternate) -> place ids.
    names: BTreeMap<String, BTreeSet<u32>>,
    /// Folded country name (formal or alternate) -> country ids.
    country_names: BTreeMap<String, BTreeSet<u32>>,
    state_names: BTreeMap<String, BTreeSet<u32>>,
    /// Place indices sorted by latitude.
    by_lat: Vec<(f64, usize)>,
    place_index: BTreeMap<u32, usize>,
    famous: Vec<FamousPlace>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(dir: &Path) -> Result<Self, GazetteerError> {
        let t: Tables = match fs::read(dir.join(TABLES_FILE)) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Tables::default(),
            Err(e) => return Err(e.into()),
        };
        let famous = match fs::read(dir.join(FAMOUS_FILE)) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => vec![],
            Err(e) => return Err(e.into()),
        };
        let mut g = Gazetteer { t, famous, ..Default::default() };
        g.reindex();
        Ok(g)
    }

    pub fn save(&self, dir: &Path) -> Result<(), GazetteerError> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(TABLES_FILE), &serde_json::to_vec(&self.t)?)?;
        write_atomic(&dir.join(FAMOUS_FILE), &serde_json::to_vec_pretty(&self.famous)?)?;
        Ok(())
    }

    fn reindex(&mut self) {
        self.names.clear();
        self.country_names.clear();
        self.state_names.clear();
        self.place_index.clear();
        for c in &self.t.countries {
            self.country_names.entry(fold(&c.name)).or_default().insert(c.country_id);
        }
        for a in &self.t.alt_countries {
            self.country_names.entry(fold(&a.alt_name)).or_default().insert(a.parent);
        }
        for s in &self.t.states {
            self.state_names.entry(fold(&s.name)).or_default().insert(s.state_id);
        }
        for a in &self.t.alt_states {
            self.state_names.entry(fold(&a.alt_name)).or_default().insert(a.parent);
        }
        for (i, p) in self.t.places.iter().enumerate() {
            self.names.entry(fold(&p.formal_name)).or_default().insert(p.place_id);
            self.place_index.insert(p.place_id, i);
        }
        for a in &self.t.alt_places {
            self.names.entry(fold(&a.alt_name)).or_default().insert(a.parent);
        }
        self.by_lat = self.t.places.iter().enumerate().map(|(i, p)| (p.location.lat, i)).collect();
        self.by_lat.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }

    pub fn place_count(&self) -> usize {
        self.t.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.places.is_empty()
    }

    pub fn places(&self) -> &[Place] {
        &self.t.places
    }

    pub fn countries(&self) -> &[Country] {
        &self.t.countries
    }

    pub fn states(&self) -> &[State] {
        &self.t.states
    }

    pub fn place(&self, id: u32) -> Option<&Place> {
        self.place_index.get(&id).map(|&i| &self.t.places[i])
    }

    /// Alternate names of a place.
    pub fn alt_names_of(&self, place_id: u32) -> Vec<&str> {
        self.t.alt_places.iter().filter(|a| a.parent == place_id).map(|a| a.alt_name.as_str()).collect()
    }

    pub fn state_name(&self, id: u32) -> Option<&str> {
        self.t.states.iter().find(|s| s.state_id == id).map(|s| s.name.as_str())
    }

    pub fn country_name(&self, id: u32) -> Option<&str> {
        self.t.countries.iter().find(|c| c.country_id == id).map(|c| c.name.as_str())
    }

    pub fn import_file(&mut self, path: &Path) -> Result<ImportReport, GazetteerError> {
        let text = fs::read_to_string(path)?;
        Ok(self.import_tsv(&text))
    }

    /// Adds the rows of `text`. Rows are applied parents first, whatever
    /// their order in the file; bad rows are skipped and reported.
    pub fn import_tsv(&mut self, text: &str) -> ImportReport {
        let mut rep = ImportReport::default();
        let mut rows = vec![];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() < 2 {
                rep.rejected.push(RejectedRow { line, reason: "expected tab-separated columns".into() });
                continue;
            }
            let Some(kind) = RowKind::parse(cols[1].trim()) else {
                rep.rejected.push(RejectedRow { line, reason: format!("unknown row type {:?}", cols[1]) });
                continue;
            };
            let col = |k: usize| cols.get(k).map(|s| s.trim()).unwrap_or("");
            rows.push(Row { line, kind, name: cols[0].trim(), parent: col(2), lat: col(3), lon: col(4) });
        }
        rows.sort_by_key(|r| (r.kind, r.line));
        for r in &rows {
            if r.name.is_empty() {
                rep.rejected.push(RejectedRow { line: r.line, reason: "empty name".into() });
                continue;
            }
            match self.apply(r, &mut rep) {
                Ok(()) => {}
                Err(reason) => rep.rejected.push(RejectedRow { line: r.line, reason }),
            }
        }
        rep.rejected.sort_by_key(|r| r.line);
        self.reindex();
        rep
    }

    fn apply(&mut self, r: &Row<'_>, rep: &mut ImportReport) -> Result<(), String> {
        match r.kind {
            RowKind::Country => {
                if self.country_names.contains_key(&fold(r.name)) {
                    return Err(format!("country {:?} already exists", r.name));
                }
                let id = next_id(self.t.countries.iter().map(|c| c.country_id));
                self.t.countries.push(Country { country_id: id, name: r.name.into() });
                self.country_names.entry(fold(r.name)).or_default().insert(id);
                rep.countries += 1;
            }
            RowKind::AltCountry => {
                let parent = self.country_by_name(r.parent)?;
                self.t.alt_countries.push(AltName { alt_name: r.name.into(), parent });
                self.country_names.entry(fold(r.name)).or_default().insert(parent);
                rep.alt_names += 1;
            }
            RowKind::State => {
                let country_id = self.country_by_name(r.parent)?;
                if self.states_in(r.name, Some(country_id)).next().is_some() {
                    return Err(format!("state {:?} already exists in {:?}", r.name, r.parent));
                }
                let id = next_id(self.t.states.iter().map(|s| s.state_id));
                self.t.states.push(State { state_id: id, name: r.name.into(), country_id });
                self.state_names.entry(fold(r.name)).or_default().insert(id);
                rep.states += 1;
            }
            RowKind::AltState => {
                let parent = self.state_by_path(r.parent)?;
                self.t.alt_states.push(AltName { alt_name: r.name.into(), parent });
                self.state_names.entry(fold(r.name)).or_default().insert(parent);
                rep.alt_names += 1;
            }
            RowKind::Place => {
                let (country_id, state_id) = self.region_by_path(r.parent)?;
                let lat: f64 = r.lat.parse().map_err(|_| format!("bad latitude {:?}", r.lat))?;
                let lon: f64 = r.lon.parse().map_err(|_| format!("bad longitude {:?}", r.lon))?;
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    return Err(format!("location ({lat}, {lon}) out of range"));
                }
                let id = next_id(self.t.places.iter().map(|p| p.place_id));
                self.t.places.push(Place {
                    place_id: id,
                    formal_name: r.name.into(),
                    state_id,
                    country_id,
                    location: GeoCoord { lat, lon },
                });
                self.place_index.insert(id, self.t.places.len() - 1);
                rep.places += 1;
                rep.searchable_names += 1;
            }
            RowKind::AltPlace => {
                let parent = self.place_by_path(r.parent)?;
                self.t.alt_places.push(AltName { alt_name: r.name.into(), parent });
                rep.alt_names += 1;
                rep.searchable_names += 1;
            }
        }
        Ok(())
    }

    fn country_by_name(&self, name: &str) -> Result<u32, String> {
        match self.country_names.get(&fold(name)).map(|s| s.iter().collect::<Vec<_>>()) {
            Some(ids) if ids.len() == 1 => Ok(*ids[0]),
            Some(_) => Err(format!("country name {name:?} is ambiguous")),
            None => Err(format!("unknown country {name:?}")),
        }
    }

    fn states_in<'a>(&'a self, name: &str, country: Option<u32>) -> impl Iterator<Item = u32> + 'a {
        let ids = self.state_names.get(&fold(name)).cloned().unwrap_or_default();
        ids.into_iter().filter(move |id| {
            country.is_none_or(|c| self.t.states.iter().any(|s| s.state_id == *id && s.country_id == c))
        })
    }

    fn state_by_path(&self, path: &str) -> Result<u32, String> {
        let parts: Vec<&str> = path.split('/').map(str::trim).collect();
        let (country, name) = match parts.as_slice() {
            [s] => (None, *s),
            [c, s] => (Some(self.country_by_name(c)?), *s),
            _ => return Err(format!("bad state path {path:?}")),
        };
        let ids: Vec<u32> = self.states_in(name, country).collect();
        match ids.as_slice() {
            [id] => Ok(*id),
            [] => Err(format!("unknown state {path:?}")),
            _ => Err(format!("state {path:?} is ambiguous")),
        }
    }

    /// `Country` or `Country/State`.
    fn region_by_path(&self, path: &str) -> Result<(u32, Option<u32>), String> {
        let parts: Vec<&str> = path.split('/').map(str::trim).collect();
        match parts.as_slice() {
            [c] => Ok((self.country_by_name(c)?, None)),
            [_, _] => {
                let country = self.country_by_name(parts[0])?;
                Ok((country, Some(self.state_by_path(path)?)))
            }
            _ => Err(format!("bad place parent {path:?}")),
        }
    }

    fn place_by_path(&self, path: &str) -> Result<u32, String> {
        let parts: Vec<&str> = path.split('/').map(str::trim).collect();
        let (name, region) = parts.split_last().ok_or_else(|| format!("bad place path {path:?}"))?;
        let (country, state) = match region {
            [] => (None, None),
            [c] => (Some(self.country_by_name(c)?), None),
            [c, _] => {
                let (c, s) = self.region_by_path(&format!("{c}/{}", region[1]))?;
                (Some(c), s)
            }
            _ => return Err(format!("bad place path {path:?}")),
        };
        let key = fold(name);
        let ids: Vec<u32> = self
            .t
            .places
            .iter()
            .filter(|p| fold(&p.formal_name) == key)
            .filter(|p| country.is_none_or(|c| p.country_id == c))
            .filter(|p| state.is_none_or(|s| p.state_id == Some(s)))
            .map(|p| p.place_id)
            .collect();
        match ids.as_slice() {
            [id] => Ok(*id),
            [] => Err(format!("unknown place {path:?}")),
            _ => Err(format!("place {path:?} is ambiguous")),
        }
    }

    /// Places whose formal or alternate name equals or starts with `name`,
    /// ignoring case. Exact matches come first, then by formal name and id.
    pub fn search_by_name(&self, name: &str, state: Option<&str>, country: Option<&str>) -> Vec<SearchHit> {
        if name.is_empty() {
            return vec![];
        }
        let key = fold(name);
        let state_ids = state.map(|s| self.state_names.get(&fold(s)).cloned().unwrap_or_default());
        let country_ids = country.map(|c| self.country_names.get(&fold(c)).cloned().unwrap_or_default());
        let mut best: BTreeMap<u32, MatchRank> = BTreeMap::new();
        for (n, ids) in self.names.range(key.clone()..) {
            if !n.starts_with(&key) {
                break;
            }
            let rank = if *n == key { MatchRank::Exact } else { MatchRank::Prefix };
            for id in ids {
                let e = best.entry(*id).or_insert(rank);
                *e = (*e).min(rank);
            }
        }
        let mut hits: Vec<SearchHit> = best
            .into_iter()
            .filter_map(|(id, rank)| self.place(id).map(|p| SearchHit { rank, place: p.clone() }))
            .filter(|h| state_ids.as_ref().is_none_or(|s| h.place.state_id.is_some_and(|id| s.contains(&id))))
            .filter(|h| country_ids.as_ref().is_none_or(|c| c.contains(&h.place.country_id)))
            .collect();
        hits.sort_by(|a, b| {
            (a.rank, &a.place.formal_name, a.place.place_id).cmp(&(b.rank, &b.place.formal_name, b.place.place_id))
        });
        hits
    }

    /// Closest place to `geo` with the wind from the place to the point.
    pub fn nearest_place(&self, geo: GeoCoord) -> Result<Nearest, GazetteerError> {
        if self.by_lat.is_empty() {
            return Err(GazetteerError::Empty);
        }
        let start = self.by_lat.partition_point(|(lat, _)| *lat < geo.lat);
        let mut best: Option<(f64, u32, usize)> = None;
        let bound = |lat: f64| EARTH_RADIUS_KM * (lat - geo.lat).abs().to_radians();
        let consider = |i: usize, best: &mut Option<(f64, u32, usize)>| {
            let p = &self.t.places[i];
            let d = haversine_km(geo, p.location);
            if best.is_none_or(|(bd, bid, _)| (d, p.place_id) < (bd, bid)) {
                *best = Some((d, p.place_id, i));
            }
        };
        // Latitude difference alone bounds the distance from below, so each
        // direction stops once that bound exceeds the best so far.
        for &(lat, i) in &self.by_lat[start..] {
            if best.is_some_and(|(bd, _, _)| bound(lat) > bd) {
                break;
            }
            consider(i, &mut best);
        }
        for &(lat, i) in self.by_lat[..start].iter().rev() {
            if best.is_some_and(|(bd, _, _)| bound(lat) > bd) {
                break;
            }
            consider(i, &mut best);
        }
        let (distance_km, _, i) = best.expect("nonempty");
        let place = self.t.places[i].clone();
        let wind = wind_of(bearing_deg(place.location, geo));
        let caption = self.caption(&place, distance_km, wind);
        Ok(Nearest { place, distance_km, wind, caption })
    }

    /// "<name>, <state>, <country>", leaving out a missing state.
    pub fn full_name(&self, place: &Place) -> String {
        let mut s = place.formal_name.clone();
        for part in [place.state_id.and_then(|id| self.state_name(id)), self.country_name(place.country_id)]
            .into_iter()
            .flatten()
        {
            s.push_str(", ");
            s.push_str(part);
        }
        s
    }

    pub fn caption(&self, place: &Place, distance_km: f64, wind: &str) -> String {
        format!("{} Km {} of {}", distance_km.round() as i64, wind, self.full_name(place))
    }

    pub fn list_famous(&self) -> &[FamousPlace] {
        &self.famous
    }

    pub fn add_famous(&mut self, f: FamousPlace) {
        self.famous.push(f);
    }

    /// Appends the entries of a JSON array of famous places.
    pub fn import_famous(&mut self, path: &Path) -> Result<usize, GazetteerError> {
        let list: Vec<FamousPlace> = serde_json::from_slice(&fs::read(path)?)?;
        let n = list.len();
        self.famous.extend(list);
        Ok(n)
    }
}

fn next_id(ids: impl Iterator<Item = u32>) -> u32 {
    ids.max().map_or(1, |m| m + 1)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

pub fn haversine_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `from` to `to`, degrees clockwise from
/// north in [0, 360).
pub fn bearing_deg(from: GeoCoord, to: GeoCoord) -> f64 {
    let (p1, p2) = (from.lat.to_radians(), to.lat.to_radians());
    let dl = (to.lon - from.lon).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

pub fn wind_of(bearing: f64) -> &'static str {
    WINDS[((bearing / 22.5).round() as usize) % 16]
}

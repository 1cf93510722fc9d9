//! HTTP front end: tiles, page composition, place and coordinate search,
//! coverage maps, image metadata and job administration.
//!
//! Handlers only read the store, except `POST /jobs`, which registers a
//! load job. Each handler makes one batched store call for its tiles.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tracing::{info, warn};

use crate::gazetteer::{Gazetteer, Place};
use crate::grid::{self, GeoBox, GeoCoord, Scale, SceneId, ThemeId, ThemeKind, TileAddress};
use crate::jobs::{self, CreateOutcome, JobError, JobFilter, JobsConfig, LoadJob};
use crate::manifest::Manifest;
use crate::scaler::DERIVED_TAG;
use crate::store::{CoverageGrid, Store, COVERAGE_DENSITIES};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub gazetteer: Arc<Gazetteer>,
    pub jobs: JobsConfig,
}

impl AppState {
    pub fn new(store: Arc<Store>, gazetteer: Arc<Gazetteer>) -> Self {
        AppState { store, gazetteer, jobs: JobsConfig::default() }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tile", get(tile))
        .route("/page", get(page))
        .route("/search", get(search))
        .route("/latlon", get(latlon))
        .route("/coverage", get(coverage))
        .route("/meta", get(meta))
        .route("/jobs", get(list_jobs).post(create_job))
        .route("/famous", get(famous))
        .route("/themes", get(themes))
        .with_state(state)
}

/// Serves until ctrl-c, refreshing the store from its log every `refresh`.
pub async fn serve(listener: TcpListener, state: AppState, refresh: Duration) -> io::Result<()> {
    let store = state.store.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(refresh);
        loop {
            tick.tick().await;
            let s = store.clone();
            match tokio::task::spawn_blocking(move || s.refresh()).await {
                Ok(Err(e)) => warn!("store refresh failed: {e}"),
                Err(e) => warn!("store refresh panicked: {e}"),
                Ok(Ok(())) => {}
            }
        }
    });
    info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }

    fn not_found(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::NOT_FOUND, msg.into())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, self.1).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Params = Query<HashMap<String, String>>;

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<T>> {
    match q.get(key) {
        None => Ok(None),
        Some(v) => v.trim().parse().map(Some).map_err(|_| ApiError::bad(format!("bad {key}: {v:?}"))),
    }
}

fn required<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> ApiResult<T> {
    param(q, key)?.ok_or_else(|| ApiError::bad(format!("missing {key}")))
}

fn theme_param(st: &AppState, q: &HashMap<String, String>, key: &str) -> ApiResult<ThemeId> {
    let t = ThemeId(param(q, key)?.unwrap_or(1));
    st.store.theme(t).map_err(|e| ApiError::bad(e.to_string()))?;
    Ok(t)
}

/// Parses the `T, S, Z, X, Y` key of a tile.
fn address(st: &AppState, q: &HashMap<String, String>) -> ApiResult<TileAddress> {
    let theme = ThemeId(required(q, "T")?);
    let scene = SceneId(required(q, "S")?);
    let scale = Scale::new(required(q, "Z")?).map_err(|e| ApiError::bad(e.to_string()))?;
    let (x, y) = (required(q, "X")?, required(q, "Y")?);
    let t = st.store.theme(theme).map_err(|e| ApiError::bad(e.to_string()))?;
    if !t.has_level(scale) {
        return Err(ApiError::bad(format!("theme {theme} has no scale {scale}")));
    }
    Ok(TileAddress::new(theme, scale, scene, x, y))
}

pub fn tile_url(a: &TileAddress) -> String {
    format!("/tile?{}", a.query_string())
}

async fn tile(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    let addr = address(&st, &q)?;
    match st.store.get_visible_tile(&addr).map_err(ApiError::internal)? {
        None => Err(ApiError::not_found("no such tile")),
        Some(blob) => Ok((
            [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "public, max-age=60")],
            blob,
        )
            .into_response()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageSize {
    Small,
    Medium,
    Large,
}

impl PageSize {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small" => Some(PageSize::Small),
            "medium" => Some(PageSize::Medium),
            "large" => Some(PageSize::Large),
            _ => None,
        }
    }

    /// (rows, cols)
    pub fn dims(self) -> (u32, u32) {
        match self {
            PageSize::Small => (2, 3),
            PageSize::Medium => (3, 4),
            PageSize::Large => (4, 5),
        }
    }
}

pub const DIRECTIONS: [(&str, i64, i64); 8] =
    [("n", 0, 1), ("ne", 1, 1), ("e", 1, 0), ("se", 1, -1), ("s", 0, -1), ("sw", -1, -1), ("w", -1, 0), ("nw", -1, 1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageCell {
    pub address: Option<TileAddress>,
    pub available: bool,
    pub tile_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageDescriptor {
    pub center: TileAddress,
    pub size: PageSize,
    pub rows: u32,
    pub cols: u32,
    /// Row-major, north row first.
    pub grid: Vec<Vec<PageCell>>,
    pub pan_targets: BTreeMap<String, Option<TileAddress>>,
    pub zoom_in: Option<TileAddress>,
    pub zoom_out: Option<TileAddress>,
    pub caption: Option<String>,
    pub scale_bar_m: f64,
    pub source_logo_id: String,
    pub image_date: Option<String>,
}

fn shifted(a: TileAddress, dx: i64, dy: i64) -> Option<TileAddress> {
    let x = u32::try_from(a.x as i64 + dx).ok()?;
    let y = u32::try_from(a.y as i64 + dy).ok()?;
    Some(a.with_xy(x, y))
}

/// Position of the center cell within a page.
pub fn center_cell(rows: u32, cols: u32) -> (u32, u32) {
    ((rows - 1) / 2, (cols - 1) / 2)
}

pub fn compose_page(st: &AppState, center: TileAddress, size: PageSize) -> ApiResult<PageDescriptor> {
    let theme = st.store.theme(center.theme).map_err(|e| ApiError::bad(e.to_string()))?;
    let (rows, cols) = size.dims();
    let (cr, cc) = center_cell(rows, cols);
    let cells: Vec<Option<TileAddress>> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| shifted(center, c as i64 - cc as i64, cr as i64 - r as i64))
        .collect();
    let pans: Vec<Option<TileAddress>> = DIRECTIONS.iter().map(|(_, dx, dy)| shifted(center, *dx, *dy)).collect();
    let kids: Vec<TileAddress> = grid::children(center, theme).map(|v| v.into_iter().map(|k| k.0).collect()).unwrap_or_default();
    let parent = grid::parent(center, theme).ok();

    let mut wanted: Vec<TileAddress> = cells.iter().chain(&pans).flatten().copied().collect();
    wanted.extend(&kids);
    wanted.extend(parent);
    let found = st.store.visible_many(&wanted);
    let info: HashMap<TileAddress, _> = wanted.iter().zip(found).filter_map(|(a, f)| f.map(|f| (*a, f))).collect();
    let live = |a: &Option<TileAddress>| a.filter(|a| info.contains_key(a));

    let grid_rows = cells
        .chunks(cols as usize)
        .map(|row| {
            row.iter()
                .map(|a| {
                    let available = live(a).is_some();
                    PageCell { address: *a, available, tile_url: a.filter(|_| available).map(|a| tile_url(&a)) }
                })
                .collect()
        })
        .collect();
    let pan_targets = DIRECTIONS.iter().zip(&pans).map(|((d, _, _), a)| (d.to_string(), live(a))).collect();
    let image_date = info
        .get(&center)
        .filter(|i| i.orig_meta_tag & DERIVED_TAG == 0)
        .and_then(|i| st.store.get_original_meta(i.orig_meta_tag))
        .map(|m| m.acquisition_date);
    Ok(PageDescriptor {
        center,
        size,
        rows,
        cols,
        grid: grid_rows,
        pan_targets,
        zoom_in: kids.iter().copied().find(|k| info.contains_key(k)),
        zoom_out: live(&parent),
        caption: center_geo(st, center).and_then(|g| st.gazetteer.nearest_place(g).ok()).map(|n| n.caption),
        scale_bar_m: center.scale.resolution().tile_meters(),
        source_logo_id: theme.name.clone(),
        image_date,
    })
}

/// Geographic center of a tile: from its UTM square for projected themes,
/// from its search record for raw ones.
fn center_geo(st: &AppState, a: TileAddress) -> Option<GeoCoord> {
    let theme = st.store.theme(a.theme).ok()?;
    match theme.kind {
        ThemeKind::Projected => {
            let tl = grid::utm_of_tile(a, theme).ok()?;
            let half = a.scale.resolution().tile_meters() / 2.0;
            let c = grid::UtmCoord::new(tl.zone as i32, tl.easting + half, tl.northing - half).ok()?;
            grid::utm_to_latlon(c).ok()
        }
        ThemeKind::Raw => {
            let b = st.store.search_record(&a)?.geo_bbox;
            Some(GeoCoord { lat: (b.min_lat + b.max_lat) / 2.0, lon: (b.min_lon + b.max_lon) / 2.0 })
        }
    }
}

async fn page(State(st): State<AppState>, Query(q): Params) -> ApiResult<Json<PageDescriptor>> {
    let center = address(&st, &q)?;
    let size = match q.get("size") {
        None => PageSize::Small,
        Some(s) => PageSize::parse(s).ok_or_else(|| ApiError::bad(format!("bad size {s:?}")))?,
    };
    Ok(Json(compose_page(&st, center, size)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub place: Place,
    pub caption: String,
    pub tile_address: Option<TileAddress>,
}

async fn search(State(st): State<AppState>, Query(q): Params) -> ApiResult<Json<Vec<SearchResult>>> {
    let name = q.get("place").map(String::as_str).unwrap_or("");
    if name.trim().is_empty() {
        return Err(ApiError::bad("missing place"));
    }
    let theme = theme_param(&st, &q, "T")?;
    let g = &st.gazetteer;
    let hits = g.search_by_name(name, q.get("state").map(String::as_str), q.get("country").map(String::as_str));
    let out = hits
        .into_iter()
        .map(|h| {
            let tile_address = GeoCoord::new(h.place.location.lat, h.place.location.lon)
                .ok()
                .and_then(|geo| st.store.search_tiles_at(geo, theme));
            SearchResult { caption: g.full_name(&h.place), place: h.place, tile_address }
        })
        .collect();
    Ok(Json(out))
}

async fn latlon(State(st): State<AppState>, Query(q): Params) -> ApiResult<Json<TileAddress>> {
    let geo = GeoCoord::new(required(&q, "lat")?, required(&q, "lon")?).map_err(|e| ApiError::bad(e.to_string()))?;
    let theme = theme_param(&st, &q, "T")?;
    st.store.search_tiles_at(geo, theme).map(Json).ok_or_else(|| ApiError::not_found("no coverage"))
}

/// Gray PNG of a coverage grid, covered cells black. `window` limits the
/// picture to whole cells inside a lat/lon box.
pub fn coverage_png(g: &CoverageGrid, window: Option<GeoBox>) -> io::Result<Vec<u8>> {
    let ppd = g.pixels_per_degree;
    let (r0, r1, c0, c1) = match window {
        None => (0, g.height() - 1, 0, g.width() - 1),
        Some(b) => crate::store::coverage_cell_span(&b, ppd),
    };
    let (w, h) = (c1 - c0 + 1, r1 - r0 + 1);
    let mut out = vec![];
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(io::Error::other)?;
        let mut stream = wr.stream_writer().map_err(io::Error::other)?;
        let mut row = vec![255u8; w as usize];
        for r in r0..=r1 {
            row.fill(255);
            for &(_, c) in g.cells.range((r, c0)..=(r, c1)) {
                row[(c - c0) as usize] = 0;
            }
            io::Write::write_all(&mut stream, &row)?;
        }
        stream.finish().map_err(io::Error::other)?;
    }
    Ok(out)
}

async fn coverage(State(st): State<AppState>, Query(q): Params) -> ApiResult<Response> {
    let theme = match q.get("theme").map(String::as_str) {
        None | Some("all") => None,
        Some(_) => Some(theme_param(&st, &q, "theme")?),
    };
    let ppd: u32 = param(&q, "ppd")?.unwrap_or(1);
    if !COVERAGE_DENSITIES.contains(&ppd) {
        return Err(ApiError::bad(format!("ppd must be one of {COVERAGE_DENSITIES:?}")));
    }
    let window = match q.get("bbox") {
        None => None,
        Some(s) => {
            let v: Vec<f64> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|_| ApiError::bad("bad bbox"))?;
            let b = match v.as_slice() {
                [a, b, c, d] => GeoBox { min_lat: *a, min_lon: *b, max_lat: *c, max_lon: *d },
                _ => return Err(ApiError::bad("bbox needs min_lat,min_lon,max_lat,max_lon")),
            };
            if !b.is_valid() {
                return Err(ApiError::bad("bbox out of range"));
            }
            Some(b)
        }
    };
    let store = st.store.clone();
    let png = tokio::task::spawn_blocking(move || coverage_png(&store.coverage_snapshot(theme, ppd), window))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn meta(State(st): State<AppState>, Query(q): Params) -> ApiResult<Json<crate::store::OriginalMeta>> {
    let tag: u64 = required(&q, "tag")?;
    st.store.get_original_meta(tag).map(Json).ok_or_else(|| ApiError::not_found("no such image"))
}

async fn list_jobs(State(st): State<AppState>, Query(q): Params) -> ApiResult<Json<jobs::JobListing>> {
    let filter = JobFilter {
        theme: param::<u16>(&q, "theme")?.map(ThemeId),
        media_id: q.get("media_id").cloned(),
        active_only: param(&q, "active")?.unwrap_or(false),
    };
    Ok(Json(jobs::list_jobs(&st.store, &filter)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewLoadJob {
    /// Path of the scene manifest, as seen by the loader.
    pub manifest: PathBuf,
    #[serde(default)]
    pub media_id: Option<String>,
}

async fn create_job(State(st): State<AppState>, Json(req): Json<NewLoadJob>) -> ApiResult<(StatusCode, Json<LoadJob>)> {
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || {
        let m = Manifest::load(&req.manifest).map_err(|e| ApiError::bad(e.to_string()))?;
        if req.media_id.as_ref().is_some_and(|id| *id != m.media_id) {
            return Err(ApiError::bad(format!("manifest is for media {}", m.media_id)));
        }
        let source = req.manifest.display().to_string();
        match jobs::create_load_job(&st2.store, &source, &m.media_id, &m, &st2.jobs) {
            Ok(CreateOutcome::Created(j)) => Ok((StatusCode::CREATED, Json(j))),
            Ok(CreateOutcome::Duplicate { completed_job }) => Err(ApiError(
                StatusCode::CONFLICT,
                format!("media {} already loaded by job {completed_job}", m.media_id),
            )),
            Err(e @ JobError::InProgress { .. }) => Err(ApiError(StatusCode::CONFLICT, e.to_string())),
            Err(e) => Err(ApiError::internal(e)),
        }
    })
    .await
    .map_err(ApiError::internal)?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamousLink {
    pub label: String,
    pub curated: bool,
    pub address: Option<TileAddress>,
}

async fn famous(State(st): State<AppState>, Query(q): Params) -> ApiResult<Json<Vec<FamousLink>>> {
    let theme = st.store.theme(theme_param(&st, &q, "T")?).map_err(ApiError::internal)?;
    let out = st
        .gazetteer
        .list_famous()
        .iter()
        .map(|f| FamousLink {
            label: f.label.clone(),
            curated: f.curated,
            address: f.resolve(theme, theme.base_scale()).ok(),
        })
        .collect();
    Ok(Json(out))
}

async fn themes(State(st): State<AppState>) -> Json<Vec<grid::Theme>> {
    Json(st.store.themes().to_vec())
}

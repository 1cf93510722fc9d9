//! Coordinate mathematics for the tile grid.
//!
//! Every tile is 200×200 pixels. Resolutions are powers of two from 1/1024 m
//! (scale 0) to 4096 m (scale 22), and a projected tile is addressed by the
//! UTM coordinate of its top-left pixel divided by the tile's ground extent.
//! Because northing grows upward, tile row `y` covers northings
//! `(y - 1) * E .. y * E` where `E = 200 * resolution`.

mod utm;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use utm::{latlon_to_utm, latlon_to_utm_in_zone, utm_to_latlon, utm_zone_of_lon};

/// Pixels on each side of a tile.
pub const TILE_PIXELS: u32 = 200;

/// Lowest and highest valid scale levels.
pub const MIN_SCALE: u8 = 0;
pub const MAX_SCALE: u8 = 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("scale {0} outside 0..=22")]
    ScaleOutOfRange(i32),
    #[error("resolution exponent {0} outside -10..=12")]
    ResolutionOutOfRange(i32),
    #[error("{0} m/px is not a power of two")]
    NotPowerOfTwo(f64),
    #[error("theme {0} is raw and has no UTM addressing")]
    RawTheme(u16),
    #[error("UTM zone {0} outside 1..=60")]
    ZoneOutOfRange(i32),
    #[error("negative coordinate (easting {easting}, northing {northing})")]
    NegativeCoordinate { easting: f64, northing: f64 },
    #[error("latitude {0} outside the UTM band -80..=84")]
    LatitudeOutOfBand(f64),
    #[error("longitude {0} outside -180..180")]
    LongitudeOutOfRange(f64),
    #[error("easting {0} outside the zone validity range 100 km..900 km")]
    EastingOutOfZone(f64),
    #[error("southern hemisphere coordinates are not supported (latitude {0})")]
    SouthernHemisphere(f64),
    #[error("tile at scale {scale} is already at the top of theme {theme}'s pyramid")]
    AtTopLevel { theme: u16, scale: u8 },
    #[error("tile at scale {scale} is at the base of theme {theme}'s pyramid")]
    AtBaseLevel { theme: u16, scale: u8 },
}

/// Meters per pixel, held as a base-two exponent so the power-of-two
/// invariant is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Resolution(i8);

impl Resolution {
    pub const MIN_EXPONENT: i32 = -10;
    pub const MAX_EXPONENT: i32 = 12;

    pub fn from_exponent(exp: i32) -> Result<Self, GridError> {
        if (Self::MIN_EXPONENT..=Self::MAX_EXPONENT).contains(&exp) {
            Ok(Resolution(exp as i8))
        } else {
            Err(GridError::ResolutionOutOfRange(exp))
        }
    }

    /// Accepts only exact powers of two.
    pub fn from_meters(m: f64) -> Result<Self, GridError> {
        if !(m.is_finite() && m > 0.0) {
            return Err(GridError::NotPowerOfTwo(m));
        }
        let exp = m.log2().round() as i32;
        if 2f64.powi(exp) != m {
            return Err(GridError::NotPowerOfTwo(m));
        }
        Self::from_exponent(exp)
    }

    pub fn exponent(self) -> i32 {
        self.0 as i32
    }

    pub fn meters(self) -> f64 {
        2f64.powi(self.0 as i32)
    }

    /// Ground extent of one tile side in meters.
    pub fn tile_meters(self) -> f64 {
        TILE_PIXELS as f64 * self.meters()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} m/px", self.meters())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Scale(u8);

impl Scale {
    pub fn new(level: i32) -> Result<Self, GridError> {
        if (MIN_SCALE as i32..=MAX_SCALE as i32).contains(&level) {
            Ok(Scale(level as u8))
        } else {
            Err(GridError::ScaleOutOfRange(level))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn resolution(self) -> Resolution {
        resolution_of_scale(self)
    }

    pub fn all() -> impl Iterator<Item = Scale> {
        (MIN_SCALE..=MAX_SCALE).map(Scale)
    }
}

impl TryFrom<u8> for Scale {
    type Error = GridError;
    fn try_from(v: u8) -> Result<Self, GridError> {
        Scale::new(v as i32)
    }
}

impl From<Scale> for u8 {
    fn from(s: Scale) -> u8 {
        s.0
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `Scale = log2(resolution) + 10`.
pub fn scale_of_resolution(res: Resolution) -> Scale {
    Scale((res.exponent() + 10) as u8)
}

pub fn resolution_of_scale(scale: Scale) -> Resolution {
    Resolution(scale.0 as i8 - 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThemeId(pub u16);

impl fmt::Display for ThemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// UTM zone for projected themes, load-order counter for raw themes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneId(pub u32);

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThemeKind {
    Projected,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelFormat {
    Gray8,
    Indexed8,
}

/// Source resolution bound to the base table it is resampled into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceBinding {
    pub source_resolution_m: f64,
    pub base_scale: Scale,
}

/// A data theme: projection kind, pixel format and the scales it populates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    pub id: ThemeId,
    pub name: String,
    pub kind: ThemeKind,
    pub format: PixelFormat,
    /// Scales the cutter writes directly, ascending.
    pub base_scales: Vec<Scale>,
    /// Every scale with a tile table, ascending.
    pub pyramid_levels: Vec<Scale>,
    /// Maps ingest resolutions to base scales. Empty means "always the first base".
    #[serde(default)]
    pub source_bindings: Vec<SourceBinding>,
}

impl Theme {
    pub fn base_scale(&self) -> Scale {
        self.base_scales[0]
    }

    pub fn top_scale(&self) -> Scale {
        *self.pyramid_levels.last().expect("theme has at least one level")
    }

    pub fn has_level(&self, s: Scale) -> bool {
        self.pyramid_levels.contains(&s)
    }

    /// Base scale an ingest image of the given resolution is resampled into.
    pub fn base_for_source(&self, source_resolution_m: f64) -> Scale {
        self.source_bindings
            .iter()
            .min_by(|a, b| {
                let da = (a.source_resolution_m.ln() - source_resolution_m.ln()).abs();
                let db = (b.source_resolution_m.ln() - source_resolution_m.ln()).abs();
                da.total_cmp(&db)
            })
            .map(|b| b.base_scale)
            .unwrap_or_else(|| self.base_scale())
    }

    fn require_projected(&self) -> Result<(), GridError> {
        match self.kind {
            ThemeKind::Projected => Ok(()),
            ThemeKind::Raw => Err(GridError::RawTheme(self.id.0)),
        }
    }
}

/// The five-part key of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileAddress {
    pub theme: ThemeId,
    pub scale: Scale,
    pub scene: SceneId,
    pub x: u32,
    pub y: u32,
}

impl TileAddress {
    pub fn new(theme: ThemeId, scale: Scale, scene: SceneId, x: u32, y: u32) -> Self {
        TileAddress { theme, scale, scene, x, y }
    }

    pub fn with_xy(self, x: u32, y: u32) -> Self {
        TileAddress { x, y, ..self }
    }

    /// Query string in the `T=&S=&Z=&X=&Y=` form used by the tile endpoint.
    pub fn query_string(&self) -> String {
        format!(
            "T={}&S={}&Z={}&X={}&Y={}",
            self.theme, self.scene, self.scale, self.x, self.y
        )
    }
}

impl fmt::Display for TileAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T{}/Z{}/S{}/{},{}",
            self.theme, self.scale, self.scene, self.x, self.y
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmCoord {
    pub zone: u8,
    pub easting: f64,
    pub northing: f64,
}

impl UtmCoord {
    pub fn new(zone: i32, easting: f64, northing: f64) -> Result<Self, GridError> {
        if !(1..=60).contains(&zone) {
            return Err(GridError::ZoneOutOfRange(zone));
        }
        if northing < 0.0 || easting < 0.0 {
            return Err(GridError::NegativeCoordinate { easting, northing });
        }
        Ok(UtmCoord { zone: zone as u8, easting, northing })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoord {
    pub lat: f64,
    pub lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GridError> {
        if !(-80.0..=84.0).contains(&lat) || lat.is_nan() {
            return Err(GridError::LatitudeOutOfBand(lat));
        }
        if !(-180.0..180.0).contains(&lon) || lon.is_nan() {
            return Err(GridError::LongitudeOutOfRange(lon));
        }
        Ok(GeoCoord { lat, lon })
    }
}

/// Axis-aligned lat/lon rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBox {
    pub fn contains(&self, g: GeoCoord) -> bool {
        g.lat >= self.min_lat && g.lat <= self.max_lat && g.lon >= self.min_lon && g.lon <= self.max_lon
    }

    pub fn is_valid(&self) -> bool {
        self.min_lat <= self.max_lat
            && self.min_lon <= self.max_lon
            && self.min_lat >= -90.0
            && self.max_lat <= 90.0
            && self.min_lon >= -180.0
            && self.max_lon <= 180.0
    }
}

/// Lat/lon bounds of a UTM rectangle given by its top-left corner and size.
/// The boundary is sampled so that the curvature of grid lines is captured.
pub fn geo_box_of_utm_rect(
    zone: u8,
    left: f64,
    top: f64,
    width_m: f64,
    height_m: f64,
) -> Result<GeoBox, GridError> {
    const STEPS: usize = 8;
    let mut b = GeoBox {
        min_lat: f64::INFINITY,
        min_lon: f64::INFINITY,
        max_lat: f64::NEG_INFINITY,
        max_lon: f64::NEG_INFINITY,
    };
    for i in 0..=STEPS {
        let t = i as f64 / STEPS as f64;
        let pts = [
            (left + t * width_m, top),
            (left + t * width_m, top - height_m),
            (left, top - t * height_m),
            (left + width_m, top - t * height_m),
        ];
        for (e, n) in pts {
            let g = utm::inverse_unchecked(zone, e, n.max(0.0));
            b.min_lat = b.min_lat.min(g.lat);
            b.max_lat = b.max_lat.max(g.lat);
            b.min_lon = b.min_lon.min(g.lon);
            b.max_lon = b.max_lon.max(g.lon);
        }
    }
    Ok(b)
}

/// Tile containing `utm`, anchored on its top-left corner.
pub fn tile_from_utm(utm: UtmCoord, theme: &Theme, scale: Scale) -> Result<TileAddress, GridError> {
    theme.require_projected()?;
    if utm.easting < 0.0 || utm.northing < 0.0 {
        return Err(GridError::NegativeCoordinate { easting: utm.easting, northing: utm.northing });
    }
    let extent = scale.resolution().tile_meters();
    let x = (utm.easting / extent).floor() as u32;
    let y = (utm.northing / extent).ceil() as u32;
    Ok(TileAddress::new(theme.id, scale, SceneId(utm.zone as u32), x, y))
}

/// Top-left corner of a projected tile.
pub fn utm_of_tile(addr: TileAddress, theme: &Theme) -> Result<UtmCoord, GridError> {
    theme.require_projected()?;
    let extent = addr.scale.resolution().tile_meters();
    Ok(UtmCoord {
        zone: addr.scene.0 as u8,
        easting: addr.x as f64 * extent,
        northing: addr.y as f64 * extent,
    })
}

/// Rounds easting down and northing up to the tile grid of `scale`.
pub fn snap_to_grid(utm: UtmCoord, scale: Scale) -> UtmCoord {
    let extent = scale.resolution().tile_meters();
    UtmCoord {
        zone: utm.zone,
        easting: (utm.easting / extent).floor() * extent,
        northing: (utm.northing / extent).ceil() * extent,
    }
}

/// The tile one level coarser that contains `addr`.
pub fn parent(addr: TileAddress, theme: &Theme) -> Result<TileAddress, GridError> {
    if addr.scale >= theme.top_scale() {
        return Err(GridError::AtTopLevel { theme: addr.theme.0, scale: addr.scale.0 });
    }
    Ok(parent_unchecked(addr))
}

pub(crate) fn parent_unchecked(addr: TileAddress) -> TileAddress {
    TileAddress {
        scale: Scale(addr.scale.0 + 1),
        x: addr.x / 2,
        y: addr.y.div_ceil(2),
        ..addr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    /// Pixel offset of this quadrant inside the parent tile.
    pub fn pixel_offset(self) -> (u32, u32) {
        let h = TILE_PIXELS / 2;
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (h, 0),
            Quadrant::BottomLeft => (0, h),
            Quadrant::BottomRight => (h, h),
        }
    }
}

/// The four tiles one level finer that make up `addr`. Children that would
/// fall below northing zero (row `-1`) are omitted.
pub fn children(addr: TileAddress, theme: &Theme) -> Result<Vec<(TileAddress, Quadrant)>, GridError> {
    if addr.scale <= theme.base_scale() {
        return Err(GridError::AtBaseLevel { theme: addr.theme.0, scale: addr.scale.0 });
    }
    Ok(children_unchecked(addr).into_iter().flatten().collect())
}

pub(crate) fn children_unchecked(addr: TileAddress) -> [Option<(TileAddress, Quadrant)>; 4] {
    let scale = Scale(addr.scale.0 - 1);
    let (x, y) = (addr.x * 2, addr.y * 2);
    let at = |x: u32, y: u32| TileAddress { scale, x, y, ..addr };
    [
        Some((at(x, y), Quadrant::TopLeft)),
        Some((at(x + 1, y), Quadrant::TopRight)),
        y.checked_sub(1).map(|y| (at(x, y), Quadrant::BottomLeft)),
        y.checked_sub(1).map(|y| (at(x + 1, y), Quadrant::BottomRight)),
    ]
}

/// Standard theme set: a 1 m grayscale ortho theme, a paletted topographic
/// map theme with three base tables and a raw grayscale satellite theme.
pub fn standard_themes() -> Vec<Theme> {
    let s = |v: i32| Scale::new(v).unwrap();
    vec![
        Theme {
            id: ThemeId(1),
            name: "doq".into(),
            kind: ThemeKind::Projected,
            format: PixelFormat::Gray8,
            base_scales: vec![s(10)],
            pyramid_levels: (10..=16).map(s).collect(),
            source_bindings: vec![],
        },
        Theme {
            id: ThemeId(2),
            name: "drg".into(),
            kind: ThemeKind::Projected,
            format: PixelFormat::Indexed8,
            base_scales: vec![s(11), s(14), s(16)],
            pyramid_levels: (11..=17).map(s).collect(),
            source_bindings: vec![
                SourceBinding { source_resolution_m: 2.5, base_scale: s(11) },
                SourceBinding { source_resolution_m: 10.0, base_scale: s(14) },
                SourceBinding { source_resolution_m: 25.0, base_scale: s(16) },
            ],
        },
        Theme {
            id: ThemeId(3),
            name: "spin".into(),
            kind: ThemeKind::Raw,
            format: PixelFormat::Gray8,
            base_scales: vec![s(10)],
            pyramid_levels: (10..=16).map(s).collect(),
            source_bindings: vec![],
        },
    ]
}

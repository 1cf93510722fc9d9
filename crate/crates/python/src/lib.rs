//! Python bindings: grid arithmetic, rasters, the tile store with its
//! loader and scaler, and the gazetteer.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use tilevault::cutter::{self, CutOptions, CutOutcome};
use tilevault::gazetteer;
use tilevault::grid::{self, GeoCoord, Scale, SceneId, ThemeId, UtmCoord};
use tilevault::jobs::JobsConfig;
use tilevault::raster;
use tilevault::scaler;
use tilevault::store;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn scale(v: i32) -> PyResult<Scale> {
    Scale::new(v).map_err(value_err)
}

#[pyclass(frozen, eq, hash, skip_from_py_object, module = "tilevault_py")]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileAddress {
    inner: grid::TileAddress,
}

impl From<grid::TileAddress> for TileAddress {
    fn from(inner: grid::TileAddress) -> Self {
        TileAddress { inner }
    }
}

#[pymethods]
impl TileAddress {
    #[new]
    #[pyo3(signature = (theme, scale, scene, x, y))]
    fn new(theme: u16, scale: i32, scene: u32, x: u32, y: u32) -> PyResult<Self> {
        Ok(grid::TileAddress::new(ThemeId(theme), self::scale(scale)?, SceneId(scene), x, y).into())
    }

    #[getter]
    fn theme(&self) -> u16 {
        self.inner.theme.0
    }

    #[getter]
    fn scale(&self) -> u8 {
        self.inner.scale.level()
    }

    #[getter]
    fn scene(&self) -> u32 {
        self.inner.scene.0
    }

    #[getter]
    fn x(&self) -> u32 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> u32 {
        self.inner.y
    }

    fn query_string(&self) -> String {
        self.inner.query_string()
    }

    fn __repr__(&self) -> String {
        let a = &self.inner;
        format!("TileAddress(theme={}, scale={}, scene={}, x={}, y={})", a.theme, a.scale, a.scene, a.x, a.y)
    }
}

fn theme_of(id: u16) -> PyResult<grid::Theme> {
    grid::standard_themes()
        .into_iter()
        .find(|t| t.id == ThemeId(id))
        .ok_or_else(|| PyValueError::new_err(format!("unknown theme {id}")))
}

#[pyfunction]
fn scale_of_resolution(meters: f64) -> PyResult<u8> {
    Ok(grid::scale_of_resolution(grid::Resolution::from_meters(meters).map_err(value_err)?).level())
}

#[pyfunction]
fn resolution_of_scale(level: i32) -> PyResult<f64> {
    Ok(grid::resolution_of_scale(scale(level)?).meters())
}

#[pyfunction]
#[pyo3(signature = (zone, easting, northing, theme = 1, scale = 10))]
fn tile_from_utm(zone: i32, easting: f64, northing: f64, theme: u16, scale: i32) -> PyResult<TileAddress> {
    let utm = UtmCoord::new(zone, easting, northing).map_err(value_err)?;
    let t = theme_of(theme)?;
    Ok(grid::tile_from_utm(utm, &t, self::scale(scale)?).map_err(value_err)?.into())
}

/// Top-left corner of a projected tile as (zone, easting, northing).
#[pyfunction]
fn utm_of_tile(addr: &TileAddress) -> PyResult<(u8, f64, f64)> {
    let t = theme_of(addr.inner.theme.0)?;
    let u = grid::utm_of_tile(addr.inner, &t).map_err(value_err)?;
    Ok((u.zone, u.easting, u.northing))
}

#[pyfunction]
fn latlon_to_utm(lat: f64, lon: f64) -> PyResult<(u8, f64, f64)> {
    let u = grid::latlon_to_utm(GeoCoord::new(lat, lon).map_err(value_err)?).map_err(value_err)?;
    Ok((u.zone, u.easting, u.northing))
}

#[pyfunction]
fn utm_to_latlon(zone: i32, easting: f64, northing: f64) -> PyResult<(f64, f64)> {
    let g = grid::utm_to_latlon(UtmCoord::new(zone, easting, northing).map_err(value_err)?).map_err(value_err)?;
    Ok((g.lat, g.lon))
}

#[pyfunction]
fn parent(addr: &TileAddress) -> PyResult<TileAddress> {
    let t = theme_of(addr.inner.theme.0)?;
    Ok(grid::parent(addr.inner, &t).map_err(value_err)?.into())
}

#[pyfunction]
fn children(addr: &TileAddress) -> PyResult<Vec<TileAddress>> {
    let t = theme_of(addr.inner.theme.0)?;
    Ok(grid::children(addr.inner, &t).map_err(value_err)?.into_iter().map(|(a, _)| a.into()).collect())
}

#[pyclass(frozen, module = "tilevault_py")]
pub struct Raster {
    inner: raster::Raster,
}

#[pymethods]
impl Raster {
    /// Grayscale raster from row-major bytes.
    #[staticmethod]
    fn gray(width: u32, height: u32, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(Raster { inner: raster::Raster::gray(width, height, pixels).map_err(value_err)? })
    }

    /// Decodes a stored tile blob.
    #[staticmethod]
    fn decode(blob: &[u8]) -> PyResult<Self> {
        Ok(Raster { inner: raster::decode_png(blob).map_err(value_err)? })
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height()
    }

    fn get(&self, x: u32, y: u32) -> PyResult<u8> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err("pixel outside raster"));
        }
        Ok(self.inner.get(x, y))
    }

    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.pixels())
    }

    /// Number of blank pixels.
    fn blank_count(&self) -> u32 {
        raster::blankness(&self.inner).blank_count
    }

    fn encode_png<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &raster::encode_png(&self.inner).map_err(value_err)?))
    }
}

/// One coarser tile from four finer ones (top-left, top-right, bottom-left,
/// bottom-right); `None` marks a missing child.
#[pyfunction]
fn downsample_2x2(children: [Option<PyRef<'_, Raster>>; 4]) -> PyResult<Raster> {
    let refs: [Option<&raster::Raster>; 4] = std::array::from_fn(|i| children[i].as_ref().map(|r| &r.inner));
    Ok(Raster { inner: raster::downsample_2x2(refs).map_err(value_err)? })
}

#[pyclass(frozen, module = "tilevault_py")]
pub struct Store {
    inner: store::Store,
}

#[pymethods]
impl Store {
    #[new]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Store { inner: store::Store::open(&path).map_err(|e| PyIOError::new_err(e.to_string()))? })
    }

    #[getter]
    fn last_seq(&self) -> u64 {
        self.inner.last_seq()
    }

    fn refresh(&self) -> PyResult<()> {
        self.inner.refresh().map_err(runtime_err)
    }

    fn get_tile<'py>(&self, py: Python<'py>, addr: &TileAddress) -> PyResult<Option<Bound<'py, PyBytes>>> {
        let blob = self.inner.get_visible_tile(&addr.inner).map_err(runtime_err)?;
        Ok(blob.map(|b| PyBytes::new(py, &b)))
    }

    /// Visible tiles of a theme at one scale.
    fn tiles(&self, theme: u16, scale: i32) -> PyResult<Vec<TileAddress>> {
        let s = self::scale(scale)?;
        Ok(self.inner.visible_infos(ThemeId(theme)).into_iter().filter(|i| i.address.scale == s).map(|i| i.address.into()).collect())
    }

    /// Loads a scene manifest; returns a summary dict.
    fn cut<'py>(&self, py: Python<'py>, manifest: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let rep = py
            .detach(|| cutter::cut_manifest(&self.inner, &manifest, &CutOptions::default()))
            .map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("job_id", rep.job_id)?;
        d.set_item("duplicate", matches!(rep.outcome, CutOutcome::Duplicate { .. }))?;
        d.set_item("written", rep.tiles.written)?;
        d.set_item("discarded", rep.tiles.discarded)?;
        d.set_item("scale_jobs", rep.scale_jobs)?;
        Ok(d)
    }

    /// Runs every queued scale job of `theme`; returns how many ran.
    fn scale(&self, py: Python<'_>, theme: u16) -> PyResult<usize> {
        py.detach(|| scaler::run_pending(&self.inner, ThemeId(theme), None, "python", &JobsConfig::default()))
            .map_err(runtime_err)
    }

    /// Finest searchable tile containing a point.
    #[pyo3(signature = (lat, lon, theme = 1))]
    fn search_tile(&self, lat: f64, lon: f64, theme: u16) -> PyResult<Option<TileAddress>> {
        let g = GeoCoord::new(lat, lon).map_err(value_err)?;
        Ok(self.inner.search_tiles_at(g, ThemeId(theme)).map(Into::into))
    }

    /// Offline log check: (consistent, problems).
    fn fsck(&self) -> PyResult<(bool, Vec<String>)> {
        let rep = store::integrity_scan(self.inner.dir()).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok((rep.is_consistent(), rep.problems))
    }
}

#[pyclass(module = "tilevault_py")]
pub struct Gazetteer {
    inner: gazetteer::Gazetteer,
}

#[pymethods]
impl Gazetteer {
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            None => gazetteer::Gazetteer::new(),
            Some(p) => gazetteer::Gazetteer::load(&p).map_err(|e| PyIOError::new_err(e.to_string()))?,
        };
        Ok(Gazetteer { inner })
    }

    /// Imports tab-separated rows; returns (searchable names added,
    /// [(line, reason)] for rejected rows).
    fn import_tsv(&mut self, text: &str) -> (usize, Vec<(usize, String)>) {
        let rep = self.inner.import_tsv(text);
        (rep.searchable_names, rep.rejected.into_iter().map(|r| (r.line, r.reason)).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Ranked matches as (place_id, formal name, lat, lon).
    #[pyo3(signature = (name, state = None, country = None))]
    fn search(&self, name: &str, state: Option<&str>, country: Option<&str>) -> Vec<(u32, String, f64, f64)> {
        self.inner
            .search_by_name(name, state, country)
            .into_iter()
            .map(|h| (h.place.place_id, h.place.formal_name, h.place.location.lat, h.place.location.lon))
            .collect()
    }

    /// (caption, distance in km, wind) for the place nearest a point.
    fn nearest(&self, lat: f64, lon: f64) -> PyResult<(String, f64, String)> {
        let n = self.inner.nearest_place(GeoCoord { lat, lon }).map_err(value_err)?;
        Ok((n.caption, n.distance_km, n.wind.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.place_count()
    }
}

#[pymodule]
pub fn tilevault_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TileAddress>()?;
    m.add_class::<Raster>()?;
    m.add_class::<Store>()?;
    m.add_class::<Gazetteer>()?;
    m.add_function(wrap_pyfunction!(scale_of_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(resolution_of_scale, m)?)?;
    m.add_function(wrap_pyfunction!(tile_from_utm, m)?)?;
    m.add_function(wrap_pyfunction!(utm_of_tile, m)?)?;
    m.add_function(wrap_pyfunction!(latlon_to_utm, m)?)?;
    m.add_function(wrap_pyfunction!(utm_to_latlon, m)?)?;
    m.add_function(wrap_pyfunction!(parent, m)?)?;
    m.add_function(wrap_pyfunction!(children, m)?)?;
    m.add_function(wrap_pyfunction!(downsample_2x2, m)?)?;
    Ok(())
}

//! Scene manifest: the ingest unit handed to the cutter.
//!
//! ```json
//! { "media_id": "CD-0042", "theme": 1, "kind": "projected",
//!   "images": [ { "file": "a.pgm", "format": "pgm", "resolution_m": 1.0,
//!                 "utm": { "zone": 10, "top_left_easting": 553200,
//!                          "top_left_northing": 4182600 },
//!                 "acquisition_date": "1998-06-24" } ] }
//! ```
//!
//! Raw-scene images carry `scene_offset: { x, y }` (pixels at the theme's
//! base resolution) instead of `utm`; a raw manifest may also give the
//! scene's lat/lon box as `geo_bbox`, which makes its tiles searchable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GeoBox, ThemeId, ThemeKind};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageFormat {
    #[serde(rename = "pgm")]
    Pgm,
    #[serde(rename = "png-indexed")]
    PngIndexed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmGeoref {
    pub zone: u8,
    pub top_left_easting: f64,
    pub top_left_northing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneOffset {
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub file: String,
    pub format: ImageFormat,
    pub resolution_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utm: Option<UtmGeoref>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_offset: Option<SceneOffset>,
    pub acquisition_date: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub media_id: String,
    pub theme: ThemeId,
    pub kind: ThemeKind,
    pub images: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_bbox: Option<GeoBox>,
}

impl Manifest {
    pub fn parse(json: &str) -> Result<Self, ManifestError> {
        let m: Manifest = serde_json::from_str(json)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Shape checks that do not need the store. Per-image georeference
    /// problems are reported when the image is cut.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.media_id.trim().is_empty() {
            return Err(ManifestError::Invalid("empty media_id".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for img in &self.images {
            if !seen.insert(img.file.as_str()) {
                return Err(ManifestError::Invalid(format!("file {} listed twice", img.file)));
            }
            if !(img.resolution_m.is_finite() && img.resolution_m > 0.0) {
                return Err(ManifestError::Invalid(format!("{}: bad resolution", img.file)));
            }
        }
        if let Some(b) = &self.geo_bbox {
            if !b.is_valid() {
                return Err(ManifestError::Invalid("geo_bbox out of range".into()));
            }
        }
        Ok(())
    }

    pub fn files(&self) -> Vec<String> {
        self.images.iter().map(|i| i.file.clone()).collect()
    }
}

/// Directory that image paths in a manifest are relative to.
pub fn ingest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_projected_and_raw() {
        let p = Manifest::parse(
            r#"{"media_id":"CD1","theme":1,"kind":"projected","images":[
                {"file":"a.pgm","format":"pgm","resolution_m":1.0,
                 "utm":{"zone":10,"top_left_easting":553200,"top_left_northing":4182600},
                 "acquisition_date":"1998-06-24"}]}"#,
        )
        .unwrap();
        assert_eq!(p.kind, ThemeKind::Projected);
        assert_eq!(p.images[0].utm.unwrap().zone, 10);

        let r = Manifest::parse(
            r#"{"media_id":"T9","theme":3,"kind":"raw","images":[
                {"file":"s.pgm","format":"pgm","resolution_m":1.56,"scene_offset":{"x":0,"y":0},
                 "acquisition_date":"1996-01-01"},
                {"file":"i.png","format":"png-indexed","resolution_m":1.0,"scene_offset":{"x":300,"y":0},
                 "acquisition_date":"1996-01-01"}]}"#,
        )
        .unwrap();
        assert_eq!(r.images[1].format, ImageFormat::PngIndexed);
        assert_eq!(r.images[1].scene_offset, Some(SceneOffset { x: 300, y: 0 }));
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(Manifest::parse("{").is_err());
        assert!(Manifest::parse(r#"{"media_id":"","theme":1,"kind":"raw","images":[]}"#).is_err());
        assert!(Manifest::parse(
            r#"{"media_id":"x","theme":1,"kind":"raw","images":[
              {"file":"a","format":"pgm","resolution_m":1,"acquisition_date":""},
              {"file":"a","format":"pgm","resolution_m":1,"acquisition_date":""}]}"#
        )
        .is_err());
        assert!(Manifest::parse(r#"{"media_id":"x","theme":1,"kind":"sideways","images":[]}"#).is_err());
    }
}

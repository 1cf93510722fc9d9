use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::grid::{GeoBox, ThemeId};

/// Grid densities kept for every theme.
pub const COVERAGE_DENSITIES: [u32; 3] = [1, 8, 48];

/// Set cells of a global degree grid. Row 0 is the band just south of 90°N,
/// column 0 the band just east of 180°W.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageGrid {
    pub pixels_per_degree: u32,
    pub cells: BTreeSet<(u32, u32)>,
}

impl CoverageGrid {
    pub fn new(pixels_per_degree: u32) -> Self {
        CoverageGrid { pixels_per_degree, cells: BTreeSet::new() }
    }

    pub fn width(&self) -> u32 {
        360 * self.pixels_per_degree
    }

    pub fn height(&self) -> u32 {
        180 * self.pixels_per_degree
    }

    pub fn is_set(&self, row: u32, col: u32) -> bool {
        self.cells.contains(&(row, col))
    }

    pub fn count(&self) -> usize {
        self.cells.len()
    }

    /// Sets every cell whose interior intersects `b`; a degenerate box sets
    /// the single cell containing it.
    pub fn paint(&mut self, b: &GeoBox) {
        let (r0, r1, c0, c1) = cell_span(b, self.pixels_per_degree);
        for r in r0..=r1 {
            for c in c0..=c1 {
                self.cells.insert((r, c));
            }
        }
    }

    pub fn union_with(&mut self, other: &CoverageGrid) {
        debug_assert_eq!(self.pixels_per_degree, other.pixels_per_degree);
        self.cells.extend(other.cells.iter().copied());
    }
}

fn span(lo: f64, hi: f64, n: u32) -> (u32, u32) {
    let max = n - 1;
    let a = lo.floor().clamp(0.0, max as f64) as u32;
    let b = if hi > lo { (hi.ceil() - 1.0).clamp(a as f64, max as f64) as u32 } else { a };
    (a, b)
}

/// Inclusive (row_min, row_max, col_min, col_max) covering `b`.
pub fn cell_span(b: &GeoBox, ppd: u32) -> (u32, u32, u32, u32) {
    let p = ppd as f64;
    let (c0, c1) = span((b.min_lon + 180.0) * p, (b.max_lon + 180.0) * p, 360 * ppd);
    let (r0, r1) = span((90.0 - b.max_lat) * p, (90.0 - b.min_lat) * p, 180 * ppd);
    (r0, r1, c0, c1)
}

#[derive(Debug, Default)]
pub(crate) struct Coverage {
    grids: HashMap<(ThemeId, u32), CoverageGrid>,
}

impl Coverage {
    pub fn paint(&mut self, theme: ThemeId, b: &GeoBox) {
        for ppd in COVERAGE_DENSITIES {
            self.grids
                .entry((theme, ppd))
                .or_insert_with(|| CoverageGrid::new(ppd))
                .paint(b);
        }
    }

    /// Copy of one theme's grid, or the union over all themes for `None`.
    pub fn snapshot(&self, theme: Option<ThemeId>, ppd: u32) -> CoverageGrid {
        let mut out = CoverageGrid::new(ppd);
        for ((t, p), g) in &self.grids {
            if *p == ppd && theme.is_none_or(|want| want == *t) {
                out.union_with(g);
            }
        }
        out
    }
}

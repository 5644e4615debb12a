//! Geospatial data model: locations, labeled grids, and the paired
//! overhead/ground imagery every experiment is built on.

mod dataset;
mod synthetic;
mod tiles;

pub use dataset::{load_dataset, save_dataset, Dataset, MANIFEST_FILE};
pub use synthetic::{generate_synthetic_world, Layout, SyntheticWorld, SyntheticWorldSpec};
pub use tiles::{MosaicSource, TileClient, TileClientConfig, WorldFile, API_KEY_ENV};

use image::RgbImage;

use crate::error::{Error, Result};

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Side length of a preprocessed ground-level image.
pub const GROUND_SIZE: u32 = 64;

/// Default overhead patch side length in pixels.
pub const DEFAULT_PATCH_SIZE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoLocation {
    pub lat: f64,
    pub lon: f64,
}

impl GeoLocation {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidLocation(format!("({lat}, {lon})")));
        }
        Ok(Self { lat, lon })
    }

    /// Great-circle (haversine) distance in kilometers.
    pub fn distance_km(&self, other: &GeoLocation) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

impl std::fmt::Display for GeoLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandCoverClass {
    pub id: usize,
    pub name: String,
}

/// Ordered set of land-cover classes with dense ids `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::config("class set must not be empty"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid class name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// The two super-classes used throughout: urban (0) and rural (1).
    pub fn urban_rural() -> Self {
        Self {
            names: vec!["urban".into(), "rural".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, id: usize) -> Option<LandCoverClass> {
        self.name(id).map(|n| LandCoverClass {
            id,
            name: n.to_string(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl Bounds {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self> {
        let ok = min_lat < max_lat
            && min_lon < max_lon
            && min_lat >= -90.0
            && max_lat <= 90.0
            && min_lon >= -180.0
            && max_lon <= 180.0;
        if !ok {
            return Err(Error::config(format!(
                "degenerate bounds lat [{min_lat}, {max_lat}] lon [{min_lon}, {max_lon}]"
            )));
        }
        Ok(Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        })
    }

    /// Half-open containment `[min, max)` on both axes.
    pub fn contains_half_open(&self, loc: &GeoLocation) -> bool {
        loc.lat >= self.min_lat && loc.lat < self.max_lat && loc.lon >= self.min_lon && loc.lon < self.max_lon
    }

    pub fn contains_closed(&self, loc: &GeoLocation) -> bool {
        loc.lat >= self.min_lat && loc.lat <= self.max_lat && loc.lon >= self.min_lon && loc.lon <= self.max_lon
    }

    pub fn center(&self) -> GeoLocation {
        GeoLocation {
            lat: 0.5 * (self.min_lat + self.max_lat),
            lon: 0.5 * (self.min_lon + self.max_lon),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub label: usize,
    pub bounds: Bounds,
}

impl GridCell {
    /// Cell containment under the grid's ownership rule: half-open, except
    /// that cells on the last row/column also own the global max edge.
    pub fn owns(&self, loc: &GeoLocation, grid_rows: usize, grid_cols: usize) -> bool {
        let b = &self.bounds;
        let lat_ok = loc.lat >= b.min_lat && (loc.lat < b.max_lat || (self.row + 1 == grid_rows && loc.lat == b.max_lat));
        let lon_ok = loc.lon >= b.min_lon && (loc.lon < b.max_lon || (self.col + 1 == grid_cols && loc.lon == b.max_lon));
        lat_ok && lon_ok
    }
}

/// A labeled equirectangular grid. Row 0 is the southernmost row and
/// column 0 the westernmost column.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    extent: Bounds,
    rows: usize,
    cols: usize,
    labels: Vec<usize>,
    classes: ClassSet,
}

impl Grid {
    pub fn new(extent: Bounds, rows: usize, cols: usize, labels: Vec<usize>, classes: ClassSet) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid must have at least one row and column"));
        }
        if labels.len() != rows * cols {
            return Err(Error::dim(format!("{} labels for a {rows}x{cols} grid", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::config(format!("label id {bad} not in class set")));
        }
        Ok(Self {
            extent,
            rows,
            cols,
            labels,
            classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn extent(&self) -> Bounds {
        self.extent
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.cols + col]
    }

    fn lat_edge(&self, r: usize) -> f64 {
        if r == self.rows {
            return self.extent.max_lat;
        }
        self.extent.min_lat + (self.extent.max_lat - self.extent.min_lat) * r as f64 / self.rows as f64
    }

    fn lon_edge(&self, c: usize) -> f64 {
        if c == self.cols {
            return self.extent.max_lon;
        }
        self.extent.min_lon + (self.extent.max_lon - self.extent.min_lon) * c as f64 / self.cols as f64
    }

    pub fn cell_bounds(&self, row: usize, col: usize) -> Bounds {
        Bounds {
            min_lat: self.lat_edge(row),
            max_lat: self.lat_edge(row + 1),
            min_lon: self.lon_edge(col),
            max_lon: self.lon_edge(col + 1),
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> GridCell {
        GridCell {
            row,
            col,
            label: self.label(row, col),
            bounds: self.cell_bounds(row, col),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = GridCell> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| self.cell(r, c)))
    }

    /// Locate the cell owning `loc` under half-open containment; the global
    /// max edges belong to the last row/column.
    pub fn locate(&self, loc: &GeoLocation) -> Result<(usize, usize)> {
        if !self.extent.contains_closed(loc) {
            return Err(Error::OutOfBounds {
                lat: loc.lat,
                lon: loc.lon,
            });
        }
        let row = Self::index_along(loc.lat, self.rows, |i| self.lat_edge(i));
        let col = Self::index_along(loc.lon, self.cols, |i| self.lon_edge(i));
        Ok((row, col))
    }

    fn index_along(v: f64, n: usize, edge: impl Fn(usize) -> f64) -> usize {
        let (lo, hi) = (edge(0), edge(n));
        let mut i = (((v - lo) / (hi - lo)) * n as f64).floor().clamp(0.0, (n - 1) as f64) as usize;
        // Reconcile the estimate with the exact edges used for cell bounds.
        while i > 0 && v < edge(i) {
            i -= 1;
        }
        while i + 1 < n && v >= edge(i + 1) {
            i += 1;
        }
        i
    }
}

/// Assign every location the label of the grid cell containing it.
pub fn propagate_labels(grid: &Grid, locations: &[GeoLocation]) -> Result<Vec<usize>> {
    locations
        .iter()
        .map(|loc| grid.locate(loc).map(|(r, c)| grid.label(r, c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadPatch {
    pub pixels: RgbImage,
    pub center: GeoLocation,
}

impl OverheadPatch {
    pub fn new(pixels: RgbImage, center: GeoLocation) -> Result<Self> {
        if pixels.width() != pixels.height() || pixels.width() == 0 {
            return Err(Error::dim(format!(
                "overhead patch must be square, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(Self { pixels, center })
    }

    pub fn patch_size(&self) -> u32 {
        self.pixels.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundImage {
    pub pixels: RgbImage,
    pub location: GeoLocation,
    pub label: Option<usize>,
}

impl GroundImage {
    /// Wrap an image, resizing bilinearly to 64x64 if needed.
    pub fn new(pixels: RgbImage, location: GeoLocation, label: Option<usize>) -> Self {
        let pixels = if pixels.dimensions() == (GROUND_SIZE, GROUND_SIZE) {
            pixels
        } else {
            crate::imageops::resize_bilinear(&pixels, GROUND_SIZE, GROUND_SIZE)
        };
        Self {
            pixels,
            location,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub ground: GroundImage,
    pub overhead: OverheadPatch,
    pub cell: GridCell,
}

impl PairedSample {
    pub fn new(ground: GroundImage, overhead: OverheadPatch, cell: GridCell) -> Result<Self> {
        if !cell.bounds.contains_closed(&overhead.center) || !cell.bounds.contains_closed(&ground.location) {
            return Err(Error::Coverage(format!(
                "sample at {} is outside cell ({}, {})",
                ground.location, cell.row, cell.col
            )));
        }
        Ok(Self { ground, overhead, cell })
    }

    pub fn label(&self) -> usize {
        self.cell.label
    }

    pub fn location(&self) -> GeoLocation {
        self.ground.location
    }
}

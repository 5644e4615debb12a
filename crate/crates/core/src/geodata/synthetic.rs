//! Deterministic synthetic worlds for desk-scale experiments.
//!
//! Urban cells render gray, blocky, high-frequency textures in both views;
//! rural cells render smooth green textures. Rendering uses only
//! `ChaCha8Rng` draws and IEEE-exact arithmetic (no transcendental calls),
//! so output bytes are identical across platforms for a given spec.

use image::{Rgb, RgbImage};
use rand::Rng as _;

use super::{Bounds, ClassSet, GeoLocation, Grid, GroundImage, OverheadPatch, PairedSample, DEFAULT_PATCH_SIZE, GROUND_SIZE};
use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;
use crate::rng::{derive_indexed, derive_seed, rng, Rng};

pub const URBAN: usize = 0;
pub const RURAL: usize = 1;

/// Kilometers per degree of latitude on the reference sphere.
const KM_PER_DEG_LAT: f64 = super::EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

/// Ground views are rendered at this size and then resized to 64x64.
const RAW_GROUND_SIZE: u32 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Checkerboard,
    /// West half urban, east half rural.
    Halves,
    Random { seed: u64 },
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(Layout::Checkerboard),
            "halves" => Ok(Layout::Halves),
            _ => match s.strip_prefix("random:").or_else(|| s.strip_prefix("random")) {
                Some(rest) => {
                    let seed = if rest.is_empty() {
                        0
                    } else {
                        rest.parse().map_err(|_| Error::config(format!("bad layout seed in {s:?}")))?
                    };
                    Ok(Layout::Random { seed })
                }
                None => Err(Error::config(format!("unknown layout {s:?}"))),
            },
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Layout::Checkerboard => write!(f, "checkerboard"),
            Layout::Halves => write!(f, "halves"),
            Layout::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub layout: Layout,
    pub images_per_cell: usize,
    pub seed: u64,
    pub patch_size: u32,
    /// South-west corner of the grid.
    pub origin: GeoLocation,
    pub cell_km: f64,
    /// Probability that a sample depicts the other class in both views
    /// (its label still comes from the cell).
    pub heterogeneity: f64,
    /// Probability that only the overhead patch depicts the other class.
    pub overhead_ambiguity: f64,
    /// Mixed land cover in the overhead view: each patch blends the urban
    /// and rural renderings with rural weight `t`, drawn from `U(0, mix)`
    /// for urban patches and `U(1 - mix, 1)` for rural ones. Above 0.5 the
    /// two classes overlap. 0 renders pure patches.
    pub overhead_mix: f64,
}

impl SyntheticWorldSpec {
    pub fn new(grid_h: usize, grid_w: usize, layout: Layout, images_per_cell: usize, seed: u64) -> Self {
        Self {
            grid_h,
            grid_w,
            layout,
            images_per_cell,
            seed,
            patch_size: DEFAULT_PATCH_SIZE,
            // Central London.
            origin: GeoLocation { lat: 51.43, lon: -0.25 },
            cell_km: 1.0,
            heterogeneity: 0.0,
            overhead_ambiguity: 0.0,
            overhead_mix: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 2 || self.grid_w < 2 {
            return Err(Error::config("synthetic grid must be at least 2x2"));
        }
        if self.images_per_cell < 1 {
            return Err(Error::config("images_per_cell must be >= 1"));
        }
        if self.patch_size < 1 {
            return Err(Error::config("patch_size must be >= 1"));
        }
        if !(self.cell_km > 0.0) {
            return Err(Error::config("cell_km must be positive"));
        }
        for (name, p) in [("heterogeneity", self.heterogeneity), ("overhead_ambiguity", self.overhead_ambiguity), ("overhead_mix", self.overhead_mix)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn extent(&self) -> Result<Bounds> {
        let dlat = self.cell_km / KM_PER_DEG_LAT;
        // Longitude spacing uses the cosine at the origin, evaluated once
        // through f64 so it is the only libm call in the generator.
        let dlon = dlat / self.origin.lat.to_radians().cos();
        Bounds::new(
            self.origin.lat,
            self.origin.lat + dlat * self.grid_h as f64,
            self.origin.lon,
            self.origin.lon + dlon * self.grid_w as f64,
        )
    }

    fn cell_class(&self, row: usize, col: usize, rng: &mut Rng) -> usize {
        match self.layout {
            Layout::Checkerboard => {
                if (row + col) % 2 == 0 {
                    URBAN
                } else {
                    RURAL
                }
            }
            Layout::Halves => {
                if col < self.grid_w / 2 {
                    URBAN
                } else {
                    RURAL
                }
            }
            Layout::Random { .. } => {
                if rng.random::<bool>() {
                    URBAN
                } else {
                    RURAL
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub grid: Grid,
    pub samples: Vec<PairedSample>,
}

pub fn generate_synthetic_world(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let layout_seed = match spec.layout {
        Layout::Random { seed } => seed,
        _ => derive_seed(spec.seed, "layout"),
    };
    let mut layout_rng = rng(layout_seed);
    let mut labels = Vec::with_capacity(spec.grid_h * spec.grid_w);
    for r in 0..spec.grid_h {
        for c in 0..spec.grid_w {
            labels.push(spec.cell_class(r, c, &mut layout_rng));
        }
    }
    let grid = Grid::new(spec.extent()?, spec.grid_h, spec.grid_w, labels, ClassSet::urban_rural())?;

    let mut samples = Vec::with_capacity(grid.rows() * grid.cols() * spec.images_per_cell);
    for cell in grid.cells() {
        for k in 0..spec.images_per_cell {
            let index = ((cell.row * grid.cols() + cell.col) * spec.images_per_cell + k) as u64;
            let mut r = rng(derive_indexed(spec.seed, "sample", index));
            let b = cell.bounds;
            let loc = GeoLocation {
                lat: b.min_lat + r.random::<f64>() * (b.max_lat - b.min_lat),
                lon: b.min_lon + r.random::<f64>() * (b.max_lon - b.min_lon),
            };
            let mut depicted = cell.label;
            if r.random::<f64>() < spec.heterogeneity {
                depicted = 1 - depicted;
            }
            let mut overhead_class = depicted;
            if r.random::<f64>() < spec.overhead_ambiguity {
                overhead_class = 1 - overhead_class;
            }
            let patch = if spec.overhead_mix > 0.0 {
                let t = r.random::<f64>() * spec.overhead_mix;
                let t = if overhead_class == RURAL { 1.0 - t } else { t };
                let urban = render_overhead(URBAN, spec.patch_size, &mut r);
                let rural = render_overhead(RURAL, spec.patch_size, &mut r);
                blend(&urban, &rural, t)
            } else {
                render_overhead(overhead_class, spec.patch_size, &mut r)
            };
            let raw = render_ground(depicted, &mut r);
            let ground = GroundImage {
                pixels: resize_bilinear(&raw, GROUND_SIZE, GROUND_SIZE),
                location: loc,
                label: Some(cell.label),
            };
            let overhead = OverheadPatch::new(patch, loc)?;
            samples.push(PairedSample::new(ground, overhead, cell.clone())?);
        }
    }
    Ok(SyntheticWorld { grid, samples })
}

/// Irwin-Hall approximation of a standard normal (sum of four uniforms).
fn gauss(r: &mut Rng) -> f64 {
    let s: f64 = (0..4).map(|_| r.random::<f64>()).sum();
    (s - 2.0) * 3.0f64.sqrt()
}

fn px(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

fn render_overhead(class: usize, size: u32, r: &mut Rng) -> RgbImage {
    let n = size as usize;
    let mut out = RgbImage::new(size, size);
    if class == URBAN {
        // Roof/road mosaic of 2x2 blocks around a gray base level.
        let base = 125.0 + 12.0 * gauss(r);
        let blocks = n.div_ceil(2);
        let levels: Vec<f64> = (0..blocks * blocks).map(|_| base + r.random_range(-45.0..45.0)).collect();
        for y in 0..n {
            for x in 0..n {
                let v = levels[(y / 2) * blocks + x / 2] + 6.0 * gauss(r);
                out.put_pixel(x as u32, y as u32, px([v + 4.0, v, v - 4.0]));
            }
        }
    } else {
        // Fields: green base with a gentle linear gradient.
        let shift = 10.0 * gauss(r);
        let (gx, gy) = (gauss(r), gauss(r));
        let norm = (gx * gx + gy * gy).sqrt().max(1e-9);
        let (gx, gy) = (gx / norm, gy / norm);
        for y in 0..n {
            for x in 0..n {
                let t = ((x as f64 - n as f64 / 2.0) * gx + (y as f64 - n as f64 / 2.0) * gy) / n as f64;
                let v = shift + 24.0 * t + 4.0 * gauss(r);
                out.put_pixel(x as u32, y as u32, px([70.0 + v, 115.0 + v, 55.0 + 0.5 * v]));
            }
        }
    }
    out
}

/// `(1 - t) * a + t * b`, per channel.
fn blend(a: &RgbImage, b: &RgbImage, t: f64) -> RgbImage {
    RgbImage::from_fn(a.width(), a.height(), |x, y| {
        let (p, q) = (a.get_pixel(x, y), b.get_pixel(x, y));
        px([0, 1, 2].map(|c| (1.0 - t) * p[c] as f64 + t * q[c] as f64))
    })
}

fn render_ground(class: usize, r: &mut Rng) -> RgbImage {
    let s = RAW_GROUND_SIZE as i64;
    let mut img = RgbImage::new(RAW_GROUND_SIZE, RAW_GROUND_SIZE);
    let fill = |img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [f64; 3]| {
        for y in y0.max(0)..y1.min(s) {
            for x in x0.max(0)..x1.min(s) {
                img.put_pixel(x as u32, y as u32, px(c));
            }
        }
    };
    if class == URBAN {
        let horizon = r.random_range(12..28);
        fill(&mut img, 0, 0, s, horizon, [182.0, 190.0, 200.0]);
        fill(&mut img, 0, horizon, s, s, [120.0, 118.0, 115.0]);
        // Facades with window grids.
        for _ in 0..r.random_range(4..8) {
            let x0 = r.random_range(-10..s - 10);
            let w = r.random_range(14..40);
            let top = r.random_range(horizon - 10..horizon + 30);
            let g = r.random_range(60.0..170.0);
            fill(&mut img, x0, top, x0 + w, s, [g + 6.0, g, g - 4.0]);
            let win = if g > 115.0 { g - 55.0 } else { g + 60.0 };
            let mut y = top + 3;
            while y + 3 < s - 16 {
                let mut x = x0 + 3;
                while x + 3 < x0 + w {
                    fill(&mut img, x, y, x + 3, y + 3, [win, win, win + 10.0]);
                    x += 6;
                }
                y += 6;
            }
        }
        // Road with lane markings.
        fill(&mut img, 0, s - 14, s, s, [70.0, 70.0, 75.0]);
        let mut x = r.random_range(0..8);
        while x < s {
            fill(&mut img, x, s - 8, x + 6, s - 6, [235.0, 235.0, 235.0]);
            x += 14;
        }
    } else {
        let horizon = r.random_range(30..46);
        for y in 0..horizon {
            let t = y as f64 / horizon as f64;
            fill(&mut img, 0, y, s, y + 1, [120.0 + 60.0 * t, 170.0 + 40.0 * t, 230.0]);
        }
        let (g0, g1) = (r.random_range(120.0..160.0), r.random_range(-20.0..20.0));
        for y in horizon..s {
            let t = (y - horizon) as f64 / (s - horizon) as f64;
            // Smooth quadratic swell across the field.
            let swell = g1 * (1.0 - 4.0 * (t - 0.5) * (t - 0.5));
            fill(&mut img, 0, y, s, y + 1, [70.0 + 0.3 * swell, g0 + swell, 45.0]);
        }
        for _ in 0..r.random_range(0..4) {
            let (cx, cy) = (r.random_range(0..s), horizon + r.random_range(-4..6));
            let rad = r.random_range(6..12);
            for y in cy - rad..=cy + rad {
                for x in cx - rad..=cx + rad {
                    if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad && (0..s).contains(&x) && (0..s).contains(&y) {
                        img.put_pixel(x as u32, y as u32, px([35.0, 80.0, 35.0]));
                    }
                }
            }
        }
    }
    for p in img.pixels_mut() {
        let n = 5.0 * gauss(r);
        *p = px([p[0] as f64 + n, p[1] as f64 + n, p[2] as f64 + n]);
    }
    img
}

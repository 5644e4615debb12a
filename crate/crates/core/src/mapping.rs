//! Gridded land-cover maps: majority-vote cell labelling, agreement
//! accuracy, CSV persistence and PNG rendering.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{Bounds, GeoLocation, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    GroundImages,
    CganFeatures,
    Interpolated,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::GroundTruth => "ground-truth",
            Provenance::GroundImages => "ground-images",
            Provenance::CganFeatures => "cgan-features",
            Provenance::Interpolated => "interpolated",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(Provenance::GroundTruth),
            "ground-images" => Ok(Provenance::GroundImages),
            "cgan-features" => Ok(Provenance::CganFeatures),
            "interpolated" => Ok(Provenance::Interpolated),
            _ => Err(Error::config(format!("unknown map provenance {s:?}"))),
        }
    }
}

/// Class id per cell, row-major with row 0 the southern row.
#[derive(Debug, Clone, PartialEq)]
pub struct LandCoverMap {
    rows: usize,
    cols: usize,
    cells: Vec<usize>,
    pub extent: Bounds,
    pub provenance: Provenance,
}

impl LandCoverMap {
    pub fn new(rows: usize, cols: usize, cells: Vec<usize>, extent: Bounds, provenance: Provenance) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("maps need at least one row and column"));
        }
        if cells.len() != rows * cols {
            return Err(Error::dim(format!("{} cells for a {rows}x{cols} map", cells.len())));
        }
        Ok(Self {
            rows,
            cols,
            cells,
            extent,
            provenance,
        })
    }

    /// The labels a grid already carries.
    pub fn ground_truth(grid: &Grid) -> Self {
        Self {
            rows: grid.rows(),
            cols: grid.cols(),
            cells: grid.labels().to_vec(),
            extent: grid.extent(),
            provenance: Provenance::GroundTruth,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.cells[row * self.cols + col]
    }

    /// CSV grid of class ids, northern row first, after a one-line comment
    /// header carrying provenance and extent.
    pub fn to_csv(&self) -> String {
        let e = &self.extent;
        let mut s = format!(
            "# provenance={} extent={:?},{:?},{:?},{:?}\n",
            self.provenance, e.min_lat, e.max_lat, e.min_lon, e.max_lon
        );
        for r in (0..self.rows).rev() {
            let row: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| perr(1, "empty map file".into()))?;
        let mut provenance = None;
        let mut extent = None;
        for tok in head.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("provenance=") {
                provenance = Some(v.parse::<Provenance>().map_err(|e| perr(1, e.to_string()))?);
            } else if let Some(v) = tok.strip_prefix("extent=") {
                let n: Vec<f64> = v.split(',').map(|x| x.parse().map_err(|_| perr(1, format!("bad extent {v:?}")))).collect::<Result<_>>()?;
                if n.len() != 4 {
                    return Err(perr(1, "extent needs four numbers".into()));
                }
                extent = Some(Bounds::new(n[0], n[1], n[2], n[3])?);
            }
        }
        let mut rows_north_first = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<usize> = line
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| perr(i + 2, format!("bad class id {t:?}"))))
                .collect::<Result<_>>()?;
            if let Some(first) = rows_north_first.first() {
                if Vec::len(first) != row.len() {
                    return Err(perr(i + 2, "ragged map row".into()));
                }
            }
            rows_north_first.push(row);
        }
        let rows = rows_north_first.len();
        let cols = rows_north_first.first().map_or(0, Vec::len);
        let cells = rows_north_first.into_iter().rev().flatten().collect();
        Self::new(
            rows,
            cols,
            cells,
            extent.ok_or_else(|| perr(1, "missing extent".into()))?,
            provenance.ok_or_else(|| perr(1, "missing provenance".into()))?,
        )
    }
}

/// The modal class; ties go to the lowest class id.
pub fn majority_vote(labels: &[usize]) -> Result<usize> {
    let max = *labels.iter().max().ok_or_else(|| Error::config("majority vote over an empty label list"))?;
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Group per-location predictions by the grid cell owning each location
/// (row-major cell order).
pub fn labels_per_cell(grid: &Grid, locations: &[GeoLocation], labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if locations.len() != labels.len() {
        return Err(Error::dim(format!("{} locations for {} labels", locations.len(), labels.len())));
    }
    let mut per = vec![Vec::new(); grid.rows() * grid.cols()];
    for (loc, &l) in locations.iter().zip(labels) {
        let (r, c) = grid.locate(loc)?;
        per[r * grid.cols() + c].push(l);
    }
    Ok(per)
}

/// Majority-vote map from per-cell label lists (row-major).
pub fn build_map(grid: &Grid, per_cell: &[Vec<usize>], provenance: Provenance) -> Result<LandCoverMap> {
    if per_cell.len() != grid.rows() * grid.cols() {
        return Err(Error::dim(format!("{} label lists for {} cells", per_cell.len(), grid.rows() * grid.cols())));
    }
    let missing: Vec<String> = per_cell
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_empty())
        .map(|(i, _)| format!("({}, {})", i / grid.cols(), i % grid.cols()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(format!("cells without labels: {}", missing.join(", "))));
    }
    let cells = per_cell.iter().map(|v| majority_vote(v)).collect::<Result<Vec<_>>>()?;
    LandCoverMap::new(grid.rows(), grid.cols(), cells, grid.extent(), provenance)
}

/// Fraction of cells on which two maps agree.
pub fn map_accuracy(pred: &LandCoverMap, truth: &LandCoverMap) -> Result<f64> {
    if (pred.rows, pred.cols) != (truth.rows, truth.cols) {
        return Err(Error::dim(format!(
            "map {}x{} vs {}x{}",
            pred.rows, pred.cols, truth.rows, truth.cols
        )));
    }
    let agree = pred.cells.iter().zip(&truth.cells).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.cells.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Default for Palette {
    /// Brown for urban (id 0), green for rural (id 1).
    fn default() -> Self {
        Self {
            colors: vec![[150, 90, 40], [60, 150, 60]],
        }
    }
}

/// One `block x block` square per cell, north up.
pub fn render_map(map: &LandCoverMap, palette: &Palette, block: u32) -> Result<RgbImage> {
    if let Some(&bad) = map.cells.iter().find(|&&c| c >= palette.colors.len()) {
        return Err(Error::config(format!("palette has no colour for class {bad}")));
    }
    let block = block.max(1);
    let (w, h) = (map.cols as u32 * block, map.rows as u32 * block);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let row = map.rows - 1 - (y / block) as usize;
        let col = (x / block) as usize;
        Rgb(palette.colors[map.get(row, col)])
    }))
}

/// PNG bytes of the rendered map.
pub fn render_map_png(map: &LandCoverMap, palette: &Palette, block: u32) -> Result<Vec<u8>> {
    let img = render_map(map, palette, block)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

//! On-disk paired datasets: a tab-separated manifest plus PNG files.
//!
//! ```text
//! # groundview-manifest v1
//! # classes urban rural
//! # grid <rows> <cols> <min_lat> <max_lat> <min_lon> <max_lon>
//! # labels <row-major cell label ids>
//! ground/000000.png<TAB>overhead/000000.png<TAB>lat<TAB>lon<TAB>row<TAB>col<TAB>label<TAB>ground_label|-
//! ```
//!
//! Overhead patches are centered on their ground image's location, so one
//! coordinate pair serves both. Floats are written in Rust's shortest
//! round-trip form.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Bounds, ClassSet, GeoLocation, Grid, GroundImage, OverheadPatch, PairedSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MAGIC: &str = "# groundview-manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    pub samples: Vec<PairedSample>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("ground"))?;
    fs::create_dir_all(dir.join("overhead"))?;
    let grid = &dataset.grid;
    let e = grid.extent();
    let mut out = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "# classes {}", grid.classes().names().join(" "))?;
    writeln!(
        out,
        "# grid {} {} {} {} {} {}",
        grid.rows(),
        grid.cols(),
        e.min_lat,
        e.max_lat,
        e.min_lon,
        e.max_lon
    )?;
    let labels: Vec<String> = grid.labels().iter().map(usize::to_string).collect();
    writeln!(out, "# labels {}", labels.join(" "))?;

    for (i, s) in dataset.samples.iter().enumerate() {
        if s.overhead.center != s.ground.location {
            return Err(Error::config(format!(
                "sample {i}: overhead patch centre {} differs from ground location {}",
                s.overhead.center, s.ground.location
            )));
        }
        let g = format!("ground/{i:06}.png");
        let o = format!("overhead/{i:06}.png");
        let gl = s.ground.label.map_or("-".to_string(), |l| l.to_string());
        writeln!(
            out,
            "{g}\t{o}\t{}\t{}\t{}\t{}\t{}\t{gl}",
            s.ground.location.lat, s.ground.location.lon, s.cell.row, s.cell.col, s.cell.label
        )?;
    }
    out.flush()?;

    dataset.samples.par_iter().enumerate().try_for_each(|(i, s)| -> Result<()> {
        s.ground.pixels.save(dir.join(format!("ground/{i:06}.png")))?;
        s.overhead.pixels.save(dir.join(format!("overhead/{i:06}.png")))?;
        Ok(())
    })
}

struct Record {
    ground: PathBuf,
    overhead: PathBuf,
    loc: GeoLocation,
    row: usize,
    col: usize,
    label: usize,
    ground_label: Option<usize>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(manifest.clone()),
        _ => e.into(),
    })?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: manifest.clone(),
        line,
        msg,
    };

    let mut classes = None;
    let mut geometry = None;
    let mut labels = None;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let ln = idx + 1;
        if idx == 0 {
            if line.trim() != MAGIC {
                return Err(perr(ln, format!("expected header {MAGIC:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.split_whitespace();
            match it.next() {
                Some("classes") => {
                    classes = Some(ClassSet::new(it.map(str::to_string)).map_err(|e| perr(ln, e.to_string()))?);
                }
                Some("grid") => {
                    let f: Vec<&str> = it.collect();
                    if f.len() != 6 {
                        return Err(perr(ln, format!("grid line needs 6 fields, got {}", f.len())));
                    }
                    let rows = parse_num::<usize>(f[0], "rows").map_err(|m| perr(ln, m))?;
                    let cols = parse_num::<usize>(f[1], "cols").map_err(|m| perr(ln, m))?;
                    let mut b = [0.0; 4];
                    for (k, v) in b.iter_mut().enumerate() {
                        *v = parse_num::<f64>(f[2 + k], "bound").map_err(|m| perr(ln, m))?;
                    }
                    let bounds = Bounds::new(b[0], b[1], b[2], b[3]).map_err(|e| perr(ln, e.to_string()))?;
                    geometry = Some((rows, cols, bounds));
                }
                Some("labels") => {
                    let l: std::result::Result<Vec<usize>, String> = it.map(|t| parse_num(t, "label")).collect();
                    labels = Some(l.map_err(|m| perr(ln, m))?);
                }
                _ => {}
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(perr(ln, format!("expected 8 tab-separated fields, got {}", f.len())));
        }
        let num = |s: &str, what: &str| parse_num::<f64>(s, what).map_err(|m| perr(ln, m));
        let int = |s: &str, what: &str| parse_num::<usize>(s, what).map_err(|m| perr(ln, m));
        let loc = GeoLocation::new(num(f[2], "lat")?, num(f[3], "lon")?).map_err(|e| perr(ln, e.to_string()))?;
        records.push((
            ln,
            Record {
                ground: dir.join(f[0]),
                overhead: dir.join(f[1]),
                loc,
                row: int(f[4], "row")?,
                col: int(f[5], "col")?,
                label: int(f[6], "label")?,
                ground_label: if f[7] == "-" { None } else { Some(int(f[7], "ground label")?) },
            },
        ));
    }

    let (rows, cols, extent) = geometry.ok_or_else(|| perr(1, "missing '# grid' header".into()))?;
    let classes = classes.ok_or_else(|| perr(1, "missing '# classes' header".into()))?;
    let labels = labels.ok_or_else(|| perr(1, "missing '# labels' header".into()))?;
    let grid = Grid::new(extent, rows, cols, labels, classes).map_err(|e| perr(1, e.to_string()))?;

    for (ln, r) in &records {
        if r.row >= rows || r.col >= cols {
            return Err(perr(*ln, format!("cell ({}, {}) outside {rows}x{cols} grid", r.row, r.col)));
        }
        if grid.label(r.row, r.col) != r.label {
            return Err(perr(*ln, format!("label {} disagrees with grid cell label", r.label)));
        }
    }

    let samples = records
        .into_par_iter()
        .map(|(ln, r)| {
            let ground = read_png(&r.ground)?;
            let overhead = read_png(&r.overhead)?;
            let overhead = OverheadPatch::new(overhead, r.loc)?;
            let ground = GroundImage::new(ground, r.loc, r.ground_label);
            PairedSample::new(ground, overhead, grid.cell(r.row, r.col)).map_err(|e| perr(ln, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { grid, samples })
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
    s.trim().parse().map_err(|_| format!("invalid {what} {s:?}"))
}

fn read_png(path: &Path) -> Result<image::RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?.to_rgb8())
}

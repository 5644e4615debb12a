//! The discriminator as a dense feature extractor.
//!
//! The sigmoid head is dropped and the activation map that fed it is
//! averaged spatially. Bare overhead patches are featurised by generating a
//! ground view from their embedding first (overhead -> G -> D features).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::cgan::{Discriminator, Generator};
use crate::checkpoint::{read_blob, write_blob};
use crate::embeddings::Embedder;
use crate::error::{Error, Result};
use crate::geodata::{GeoLocation, OverheadPatch};
use crate::imageops::image_to_tensor;
use crate::rng::{derive_indexed, normal_vec, rng};

/// Mean over the spatial axes: `(N, C, H, W)` -> `(N, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    x.to_shape((n, c, h * w)).expect("reshape").sum_axis(Axis(2)) / (h * w) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub location: Option<GeoLocation>,
}

/// Which noise vectors accompany an embedding through the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum ZPolicy {
    FixedZero,
    FixedSeed { seed: u64 },
    /// Features averaged over `k` seeded draws; draw 0 is the fixed-seed draw.
    AverageOfK { k: usize, seed: u64 },
}

impl Default for ZPolicy {
    fn default() -> Self {
        ZPolicy::AverageOfK { k: 4, seed: 0 }
    }
}

impl ZPolicy {
    /// The noise vectors used, shared by every patch.
    pub fn draws(&self, nz: usize) -> Result<Vec<Vec<f64>>> {
        match *self {
            ZPolicy::FixedZero => Ok(vec![vec![0.0; nz]]),
            ZPolicy::FixedSeed { seed } => Ok(vec![draw(seed, 0, nz)]),
            ZPolicy::AverageOfK { k, seed } => {
                if k == 0 {
                    return Err(Error::config("average-of-k needs k >= 1"));
                }
                Ok((0..k as u64).map(|j| draw(seed, j, nz)).collect())
            }
        }
    }
}

fn draw(seed: u64, j: u64, nz: usize) -> Vec<f64> {
    normal_vec(&mut rng(derive_indexed(seed, "z", j)), nz)
}

impl fmt::Display for ZPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZPolicy::FixedZero => write!(f, "zero"),
            ZPolicy::FixedSeed { seed } => write!(f, "seed:{seed}"),
            ZPolicy::AverageOfK { k, seed } => write!(f, "avg:{k}:{seed}"),
        }
    }
}

impl FromStr for ZPolicy {
    type Err = Error;

    /// `zero`, `seed:S` or `avg:K:S`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<u64>().map_err(|_| Error::config(format!("bad z policy {s:?}")));
        match parts.as_slice() {
            ["zero"] => Ok(ZPolicy::FixedZero),
            ["seed", n] => Ok(ZPolicy::FixedSeed { seed: num(n)? }),
            ["avg", k, n] => Ok(ZPolicy::AverageOfK {
                k: num(k)? as usize,
                seed: num(n)?,
            }),
            _ => Err(Error::config(format!("bad z policy {s:?}; expected zero, seed:S or avg:K:S"))),
        }
    }
}

/// Pooled discriminator features for a batch of images with their
/// conditioning embeddings.
pub fn extract_features(d: &Discriminator, imgs: &Array4<f64>, embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    d.features(imgs, embeddings)
}

pub fn extract_feature(d: &Discriminator, img: &image::RgbImage, embedding: &[f64]) -> Result<FeatureVector> {
    let t = image_to_tensor(img).insert_axis(Axis(0));
    let e = Array2::from_shape_vec((1, embedding.len()), embedding.to_vec()).expect("row");
    let f = d.features(&t, &e)?;
    Ok(FeatureVector {
        values: f.row(0).to_vec(),
        location: None,
    })
}

/// Features for embedded overhead patches: for every z draw, generate a
/// ground view from `(z, e)` and featurise it with `e`; average over draws.
pub fn features_from_embeddings(g: &Generator, d: &Discriminator, embeddings: &Array2<f64>, policy: ZPolicy) -> Result<Array2<f64>> {
    if g.nef() != d.nef() {
        return Err(Error::dim(format!("generator nef {} != discriminator nef {}", g.nef(), d.nef())));
    }
    let draws = policy.draws(g.arch().nz)?;
    let n = embeddings.nrows();
    let mut acc = Array2::<f64>::zeros((n, d.arch().feature_dim()));
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let e = embeddings.slice(ndarray::s![start..end, ..]).to_owned();
        let mut part = acc.slice_mut(ndarray::s![start..end, ..]);
        for zv in &draws {
            let z = Array2::from_shape_fn((end - start, zv.len()), |(_, j)| zv[j]);
            let fake = g.generate(&z, &e)?;
            part += &d.features(&fake, &e)?;
        }
    }
    Ok(acc / draws.len() as f64)
}

pub fn extract_feature_from_overhead(
    g: &Generator,
    d: &Discriminator,
    patch: &OverheadPatch,
    embedder: &dyn Embedder,
    policy: ZPolicy,
) -> Result<FeatureVector> {
    let e = embedder.embed(patch)?;
    let m = Array2::from_shape_vec((1, e.nef()), e.values).expect("row");
    let f = features_from_embeddings(g, d, &m, policy)?;
    Ok(FeatureVector {
        values: f.row(0).to_vec(),
        location: Some(patch.center),
    })
}

/// Features with their locations; all rows share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub locations: Vec<GeoLocation>,
    pub features: Array2<f64>,
}

const FEATURE_MAGIC: &str = "groundview-features v1";

impl FeatureSet {
    pub fn new(locations: Vec<GeoLocation>, features: Array2<f64>) -> Result<Self> {
        if locations.len() != features.nrows() {
            return Err(Error::dim(format!("{} locations for {} feature rows", locations.len(), features.nrows())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("feature values must be finite"));
        }
        Ok(Self { locations, features })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn get(&self, i: usize) -> FeatureVector {
        FeatureVector {
            values: self.features.row(i).to_vec(),
            location: Some(self.locations[i]),
        }
    }

    /// CSV rows `lat,lon,f0,f1,...` with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let mut head = vec!["lat".to_string(), "lon".to_string()];
        head.extend((0..self.dim()).map(|i| format!("f{i}")));
        w.write_record(&head).map_err(csv_err(path))?;
        for (loc, row) in self.locations.iter().zip(self.features.rows()) {
            let mut rec = vec![format!("{:?}", loc.lat), format!("{:?}", loc.lon)];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let mut locations = Vec::new();
        let mut flat = Vec::new();
        let mut dim = None;
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(csv_err(path))?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("not a number: {s:?}"),
                })
            };
            if rec.len() < 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: "expected lat, lon and at least one feature".into(),
                });
            }
            let d = rec.len() - 2;
            if *dim.get_or_insert(d) != d {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("row has {d} features, expected {}", dim.unwrap_or(d)),
                });
            }
            locations.push(GeoLocation::new(parse(&rec[0])?, parse(&rec[1])?)?);
            for f in rec.iter().skip(2) {
                flat.push(parse(f)?);
            }
        }
        let d = dim.unwrap_or(0);
        let features = Array2::from_shape_vec((locations.len(), d), flat).expect("rows consistent");
        Self::new(locations, features)
    }

    /// Binary variant: header with counts, then `lat, lon, values...` per row.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let header = [("rows", self.len().to_string()), ("dim", self.dim().to_string())].map(|(k, v)| (k.to_string(), v));
        let mut vals = Vec::with_capacity(self.len() * (self.dim() + 2));
        for (loc, row) in self.locations.iter().zip(self.features.rows()) {
            vals.push(loc.lat);
            vals.push(loc.lon);
            vals.extend(row.iter().copied());
        }
        write_blob(path, FEATURE_MAGIC, &header, &vals)
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (h, vals) = read_blob(path, FEATURE_MAGIC)?;
        let field = |k: &str| -> Result<usize> {
            h.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("missing or invalid {k}"),
            })
        };
        let (rows, dim) = (field("rows")?, field("dim")?);
        if vals.len() != rows * (dim + 2) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "payload size does not match rows x dim".into(),
            });
        }
        let mut locations = Vec::with_capacity(rows);
        let mut flat = Vec::with_capacity(rows * dim);
        for chunk in vals.chunks_exact(dim + 2) {
            locations.push(GeoLocation::new(chunk[0], chunk[1])?);
            flat.extend_from_slice(&chunk[2..]);
        }
        Self::new(locations, Array2::from_shape_vec((rows, dim), flat).expect("shape"))
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pooling_a_constant_map_returns_the_constant() {
        let x = Array4::from_elem((2, 1024, 4, 4), 0.37);
        let f = global_avg_pool(&x);
        assert_eq!(f.dim(), (2, 1024));
        assert!(f.iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn pooling_is_linear(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4 * 4), alpha in -3.0f64..3.0) {
            let a = Array4::from_shape_vec((2, 3, 4, 4), vals).unwrap();
            let lhs = global_avg_pool(&(&a * alpha));
            let rhs = global_avg_pool(&a) * alpha;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_policy_parsing_round_trips() {
        for p in [ZPolicy::FixedZero, ZPolicy::FixedSeed { seed: 9 }, ZPolicy::AverageOfK { k: 4, seed: 2 }] {
            assert_eq!(p.to_string().parse::<ZPolicy>().unwrap(), p);
        }
        assert!("avg:x:1".parse::<ZPolicy>().is_err());
    }

    #[test]
    fn average_of_one_equals_fixed_seed() {
        let a = ZPolicy::AverageOfK { k: 1, seed: 5 }.draws(100).unwrap();
        let b = ZPolicy::FixedSeed { seed: 5 }.draws(100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let locs = vec![GeoLocation::new(51.5, -0.1).unwrap(), GeoLocation::new(51.6, 0.2).unwrap()];
        let f = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64 / 7.0 - 0.3);
        let set = FeatureSet::new(locs, f).unwrap();
        set.write_csv(&dir.path().join("f.csv")).unwrap();
        assert_eq!(FeatureSet::read_csv(&dir.path().join("f.csv")).unwrap(), set);
        set.write_binary(&dir.path().join("f.bin")).unwrap();
        assert_eq!(FeatureSet::read_binary(&dir.path().join("f.bin")).unwrap(), set);
    }
}

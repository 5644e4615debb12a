use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CNN_EMBEDDING_DIM: usize = 25;

const MAGIC: &str = "groundview-pca v1";
const SIGN_CONVENTION: &str = "largest-abs-coordinate-positive";

/// Principal-component projection fitted on a set of descriptors, plus the
/// per-coordinate range of the projected training data.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// `(k, d)`, rows orthonormal, ordered by descending variance.
    pub components: Array2<f64>,
    pub train_min: Array1<f64>,
    pub train_max: Array1<f64>,
    pub fingerprint: String,
}

fn fingerprint(x: ArrayView2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Fit a `k`-component PCA on `(N, d)` features.
pub fn fit_pca(features: ArrayView2<f64>, k: usize) -> Result<PcaProjection> {
    let (n, d) = features.dim();
    if n < k {
        return Err(Error::InsufficientSamples { needed: k, got: n });
    }
    if k > d {
        return Err(Error::dim(format!("cannot keep {k} components of {d}D data")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("PCA input contains non-finite values"));
    }
    let mean = features.mean_axis(Axis(0)).expect("n > 0");
    let xc = &features - &mean;
    let xm = DMatrix::from_fn(n, d, |i, j| xc[[i, j]]);

    // Eigen-decompose whichever of the Gram or scatter matrix is smaller.
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    if n <= d {
        let gram = &xm * xm.transpose();
        let eig = SymmetricEigen::new(gram);
        for idx in descending(eig.eigenvalues.as_slice()).into_iter().take(k) {
            let u = eig.eigenvectors.column(idx);
            let v = xm.transpose() * u;
            comps.push(v.iter().copied().collect());
        }
    } else {
        let scatter = xm.transpose() * &xm;
        let eig = SymmetricEigen::new(scatter);
        for idx in descending(eig.eigenvalues.as_slice()).into_iter().take(k) {
            comps.push(eig.eigenvectors.column(idx).iter().copied().collect());
        }
    }
    orthonormalize(&mut comps, d);
    for c in comps.iter_mut() {
        let mut best = 0;
        for (i, v) in c.iter().enumerate() {
            if v.abs() > c[best].abs() {
                best = i;
            }
        }
        if c[best] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let components = Array2::from_shape_fn((k, d), |(i, j)| comps[i][j]);
    let mut pca = PcaProjection {
        mean,
        components,
        train_min: Array1::from_elem(k, f64::INFINITY),
        train_max: Array1::from_elem(k, f64::NEG_INFINITY),
        fingerprint: fingerprint(features),
    };
    // Same arithmetic path as `project`, so training rows rescale exactly
    // into [-1, 1].
    for row in features.rows() {
        let y = pca.project(row)?;
        for (i, v) in y.iter().enumerate() {
            pca.train_min[i] = pca.train_min[i].min(*v);
            pca.train_max[i] = pca.train_max[i].max(*v);
        }
    }
    Ok(pca)
}

fn descending(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx
}

/// Modified Gram-Schmidt; rank-deficient directions are replaced by the
/// first standard basis vectors that remain independent.
fn orthonormalize(comps: &mut [Vec<f64>], d: usize) {
    let mut basis_next = 0;
    for i in 0..comps.len() {
        loop {
            for j in 0..i {
                let dot: f64 = comps[i].iter().zip(&comps[j]).map(|(a, b)| a * b).sum();
                let prev = comps[j].clone();
                comps[i].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = comps[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                comps[i].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            comps[i] = vec![0.0; d];
            comps[i][basis_next % d] = 1.0;
            basis_next += 1;
        }
    }
}

impl PcaProjection {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn project(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!("PCA expects {}D input, got {}D", self.input_dim(), x.len())));
        }
        Ok(self.components.dot(&(&x - &self.mean)))
    }

    pub fn reconstruct(&self, y: ArrayView1<f64>) -> Array1<f64> {
        self.components.t().dot(&y) + &self.mean
    }

    /// Affine map of each projected coordinate from its training range onto
    /// [-1, 1]. Values outside the training range fall outside [-1, 1].
    pub fn rescale(&self, y: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(y.len(), |i| {
            let (lo, hi) = (self.train_min[i], self.train_max[i]);
            if hi > lo {
                2.0 * (y[i] - lo) / (hi - lo) - 1.0
            } else {
                0.0
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{MAGIC}")?;
        writeln!(f, "input_dim={}", self.input_dim())?;
        writeln!(f, "components={}", self.output_dim())?;
        writeln!(f, "sign={SIGN_CONVENTION}")?;
        writeln!(f, "fingerprint={}", self.fingerprint)?;
        writeln!(f, "layout=f64le mean[input_dim] components[components*input_dim] min[components] max[components]")?;
        writeln!(f)?;
        let mut buf = Vec::new();
        for v in self
            .mean
            .iter()
            .chain(self.components.iter())
            .chain(self.train_min.iter())
            .chain(self.train_max.iter())
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (header, body) = crate::checkpoint::split_header(&bytes, path)?;
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg,
        };
        if header.first().map(String::as_str) != Some(MAGIC) {
            return Err(perr(format!("expected {MAGIC:?} header")));
        }
        let kv = crate::checkpoint::header_map(&header[1..]);
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| perr(format!("missing {k}")));
        let d: usize = get("input_dim")?.parse().map_err(|_| perr("bad input_dim".into()))?;
        let k: usize = get("components")?.parse().map_err(|_| perr("bad components".into()))?;
        let vals = crate::checkpoint::f64s(body);
        if vals.len() != d + k * d + 2 * k {
            return Err(perr(format!("payload has {} values, expected {}", vals.len(), d + k * d + 2 * k)));
        }
        let (mean, rest) = vals.split_at(d);
        let (comps, rest) = rest.split_at(k * d);
        let (mn, mx) = rest.split_at(k);
        Ok(Self {
            mean: Array1::from(mean.to_vec()),
            components: Array2::from_shape_vec((k, d), comps.to_vec()).expect("shape"),
            train_min: Array1::from(mn.to_vec()),
            train_max: Array1::from(mx.to_vec()),
            fingerprint: get("fingerprint")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng, standard_normal};

    fn randn(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_simple_fn((n, d), || standard_normal(&mut r))
    }

    /// Exact rank-25 data in 60 dimensions with an offset.
    fn rank25(n: usize) -> Array2<f64> {
        let a = randn(n, 25, 1);
        let b = randn(25, 60, 2);
        a.dot(&b) + 3.0
    }

    #[test]
    fn too_few_samples() {
        let err = fit_pca(randn(10, 30, 0).view(), 25).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: 25, got: 10 }));
    }

    #[test]
    fn mean_projects_to_zero() {
        let x = randn(40, 50, 3);
        let p = fit_pca(x.view(), 25).unwrap();
        let y = p.project(p.mean.view()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn components_are_orthonormal_and_train_projection_is_centered() {
        for (n, d) in [(40, 60), (120, 30)] {
            let x = randn(n, d, n as u64);
            let p = fit_pca(x.view(), 25).unwrap();
            let g = p.components.dot(&p.components.t());
            for i in 0..25 {
                for j in 0..25 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((g[[i, j]] - e).abs() < 1e-6);
                }
            }
            let proj = (&x - &p.mean).dot(&p.components.t());
            for m in proj.mean_axis(Axis(0)).unwrap() {
                assert!(m.abs() < 1e-9);
            }
        }
    }

    /// Reconstruction of exact rank-25 data, with the principal subspace
    /// checked against an SVD of the centered data.
    #[test]
    fn rank25_data_reconstructs_and_matches_svd_subspace() {
        for n in [40, 200] {
            let x = rank25(n);
            let p = fit_pca(x.view(), 25).unwrap();
            let mut err = 0.0;
            let mut norm = 0.0;
            for row in x.rows() {
                let r = p.reconstruct(p.project(row).unwrap().view());
                err += (&r - &row).mapv(|v| v * v).sum();
                norm += row.mapv(|v| v * v).sum();
            }
            assert!((err / norm).sqrt() < 1e-6);

            let xc = &x - &x.mean_axis(Axis(0)).unwrap();
            let m = DMatrix::from_fn(xc.nrows(), xc.ncols(), |i, j| xc[[i, j]]);
            let svd = m.svd(false, true);
            let vt = svd.v_t.unwrap();
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let v = Array2::from_shape_fn((25, 60), |(i, j)| vt[(order[i], j)]);
            let p_svd = v.t().dot(&v);
            let p_eig = p.components.t().dot(&p.components);
            let diff = (&p_svd - &p_eig).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-6, "projector mismatch {diff}");
        }
    }

    #[test]
    fn fitting_is_deterministic_with_sign_convention() {
        let x = randn(60, 40, 5);
        let a = fit_pca(x.view(), 25).unwrap();
        let b = fit_pca(x.view(), 25).unwrap();
        assert_eq!(a, b);
        for row in a.components.rows() {
            let best = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn rescale_maps_training_range_to_unit_interval() {
        let x = randn(50, 30, 6);
        let p = fit_pca(x.view(), 25).unwrap();
        for row in x.rows() {
            let y = p.rescale(p.project(row).unwrap().view());
            assert!(y.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = fit_pca(randn(30, 28, 7).view(), 25).unwrap();
        let path = dir.path().join("pca.bin");
        p.save(&path).unwrap();
        assert_eq!(PcaProjection::load(&path).unwrap(), p);
    }
}

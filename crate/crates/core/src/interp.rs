//! Interpolate-then-classify baseline: sparse features spread over space
//! with a normalised Gaussian kernel, then handed to a feature classifier.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{GeoLocation, EARTH_RADIUS_KM};
use crate::probes::{accuracy, Classifier};

pub const DEFAULT_SIGMA_KM: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// Great-circle distance.
    #[default]
    Haversine,
    /// Equirectangular approximation (adequate for small synthetic worlds).
    Planar,
}

impl DistanceMetric {
    pub fn km(self, a: &GeoLocation, b: &GeoLocation) -> f64 {
        match self {
            DistanceMetric::Haversine => a.distance_km(b),
            DistanceMetric::Planar => {
                let lat0 = ((a.lat + b.lat) / 2.0).to_radians();
                let dx = (b.lon - a.lon).to_radians() * lat0.cos();
                let dy = (b.lat - a.lat).to_radians();
                EARTH_RADIUS_KM * (dx * dx + dy * dy).sqrt()
            }
        }
    }
}

/// Anchored feature vectors with a kernel bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureField {
    locations: Vec<GeoLocation>,
    features: Array2<f64>,
    sigma_km: f64,
    metric: DistanceMetric,
}

impl SparseFeatureField {
    pub fn new(locations: Vec<GeoLocation>, features: Array2<f64>, sigma_km: f64) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        if locations.len() != features.nrows() {
            return Err(Error::dim(format!("{} anchor locations for {} feature rows", locations.len(), features.nrows())));
        }
        if !(sigma_km > 0.0 && sigma_km.is_finite()) {
            return Err(Error::config(format!("bandwidth must be positive, got {sigma_km}")));
        }
        Ok(Self {
            locations,
            features,
            sigma_km,
            metric: DistanceMetric::Haversine,
        })
    }

    pub fn with_metric(mut self, metric: DistanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_sigma(&self, sigma_km: f64) -> Result<Self> {
        Ok(Self::new(self.locations.clone(), self.features.clone(), sigma_km)?.with_metric(self.metric))
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

    pub fn sigma_km(&self) -> f64 {
        self.sigma_km
    }

    /// Normalised kernel weights for `query`, or `None` when every weight
    /// underflows.
    pub fn weights(&self, query: &GeoLocation) -> Option<Array1<f64>> {
        let s2 = 2.0 * self.sigma_km * self.sigma_km;
        let d2: Vec<f64> = self
            .locations
            .iter()
            .map(|a| {
                let d = self.metric.km(query, a);
                d * d
            })
            .collect();
        let w: Array1<f64> = d2.iter().map(|d| (-d / s2).exp()).collect();
        let total = w.sum();
        if total > 0.0 && total.is_finite() {
            Some(w / total)
        } else {
            None
        }
    }

    fn nearest(&self, query: &GeoLocation) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, a) in self.locations.iter().enumerate() {
            let d = self.metric.km(query, a);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Kernel-weighted mean of the anchor features at `query`.
    pub fn interpolate(&self, query: &GeoLocation) -> Array1<f64> {
        match self.weights(query) {
            Some(w) => w.dot(&self.features),
            None => {
                warn!(
                    "all kernel weights underflowed at ({:.5}, {:.5}) with sigma {} km; using the nearest anchor",
                    query.lat, query.lon, self.sigma_km
                );
                self.features.row(self.nearest(query)).to_owned()
            }
        }
    }

    pub fn interpolate_all(&self, queries: &[GeoLocation]) -> Array2<f64> {
        use rayon::prelude::*;
        let rows: Vec<Array1<f64>> = queries.par_iter().map(|q| self.interpolate(q)).collect();
        let mut out = Array2::zeros((queries.len(), self.dim()));
        for (mut r, v) in out.rows_mut().into_iter().zip(rows) {
            r.assign(&v);
        }
        out
    }

    pub fn anchor(&self, i: usize) -> (GeoLocation, ArrayView1<'_, f64>) {
        (self.locations[i], self.features.row(i))
    }
}

/// Classify interpolated features at each query.
pub fn interpolate_then_classify(field: &SparseFeatureField, probe: &dyn Classifier, queries: &[GeoLocation]) -> Result<Vec<usize>> {
    if probe.dim() != field.dim() {
        return Err(Error::dim(format!("probe expects {}D features, field holds {}D", probe.dim(), field.dim())));
    }
    probe.predict(field.interpolate_all(queries).view())
}

/// Accuracy of interpolate-then-classify for each bandwidth.
pub fn sigma_sweep(
    field: &SparseFeatureField,
    probe: &dyn Classifier,
    queries: &[GeoLocation],
    truth: &[usize],
    sigmas_km: &[f64],
) -> Result<Vec<(f64, f64)>> {
    sigmas_km
        .iter()
        .map(|&s| {
            let pred = interpolate_then_classify(&field.with_sigma(s)?, probe, queries)?;
            Ok((s, accuracy(&pred, truth)))
        })
        .collect()
}

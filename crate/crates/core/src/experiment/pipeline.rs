use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::info;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::config::{DatasetSource, ExperimentConfig, TrainFeatureSource};
use super::plot;
use crate::cgan::{self, discriminator_accuracy, load_models, save_models, Discriminator, Generator, LossHistory, LossRecord};
use crate::embeddings::{encoder_from_recipe, stack_embeddings, CnnEmbedder, Embedder, EmbeddingKind, GrayscaleEmbedder, HsvEmbedder, PcaProjection};
use crate::error::{Error, Result};
use crate::features::{features_from_embeddings, FeatureSet};
use crate::geodata::{generate_synthetic_world, load_dataset, save_dataset, Dataset, GeoLocation, MosaicSource, PairedSample, TileClient, TileClientConfig};
use crate::imageops::{batch_from_images, tensor_to_image};
use crate::interp::{interpolate_then_classify, sigma_sweep, SparseFeatureField};
use crate::mapping::{build_map, labels_per_cell, map_accuracy, render_map, LandCoverMap, Provenance};
use crate::probes::{accuracy, read_metrics_csv, train_reference_cnn, train_svm, write_metrics_csv, Classifier, MetricsRow, ReferenceCnn, CNN_FEATURE_DIM};
use crate::rng::{derive_indexed, derive_seed, normal_vec, rng};

pub const CONFIG_FILE: &str = "config.toml";

/// An output directory holding a materialised dataset, plus the split and
/// config every later stage works from.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Held-out discriminator quality after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: LossHistory,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapScore {
    pub provenance: Provenance,
    pub accuracy: f64,
}

/// Reference-CNN accuracy with real vs generated images on both sides of
/// the split.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeImageScore {
    pub real_real: f64,
    pub fake_fake: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub probes: Vec<MetricsRow>,
    pub maps: Vec<MapScore>,
    pub fake_images: FakeImageScore,
    pub train_steps: usize,
    pub heldout_d_accuracy: f64,
}

impl Summary {
    pub fn probe(&self, feature_type: &str) -> Option<f64> {
        self.probes.iter().find(|r| r.feature_type == feature_type).map(|r| r.accuracy)
    }

    pub fn map(&self, p: Provenance) -> Option<f64> {
        self.maps.iter().find(|m| m.provenance == p).map(|m| m.accuracy)
    }
}

fn sub(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::create_dir_all(&p)?;
    Ok(p)
}

fn need(path: PathBuf, stage: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        log::error!("{} is missing; run the `{stage}` stage first", path.display());
        Err(Error::MissingFile(path))
    }
}

/// Deterministic train/test partition of `n` samples.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(seed, "split")));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let (mut test, mut train) = (order[..n_test].to_vec(), order[n_test..].to_vec());
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Produce the dataset described by the config and store it, with the
/// resolved config and the split, under the output directory.
pub fn synth(cfg: &ExperimentConfig) -> Result<Workspace> {
    let cfg = cfg.clone().resolve();
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join(CONFIG_FILE))?;
    let dataset = match &cfg.dataset {
        DatasetSource::Synthetic(s) => {
            let w = generate_synthetic_world(&s.spec(derive_seed(cfg.seed, "world"))?)?;
            Dataset {
                grid: w.grid,
                samples: w.samples,
            }
        }
        DatasetSource::Manifest { path } => load_dataset(path)?,
        DatasetSource::Tiles(t) => {
            let mut ds = load_dataset(&t.manifest)?;
            let client_cfg = match (&t.url_template, &t.mosaic) {
                (Some(url), _) => TileClientConfig {
                    zoom: t.zoom,
                    fetch_size: t.fetch_size,
                    ..TileClientConfig::online(url.clone(), t.cache_dir.clone())
                },
                (None, Some(m)) => TileClientConfig::offline(MosaicSource::load(m)?),
                (None, None) => return Err(Error::config("tile source needs url_template or mosaic")),
            };
            let client = TileClient::new(client_cfg)?;
            for s in &mut ds.samples {
                let size = s.overhead.patch_size();
                s.overhead = client.fetch_overhead_patch(&s.location(), size)?;
            }
            ds
        }
    };
    save_dataset(&dataset, &cfg.output_dir.join("dataset"))?;
    let ws = Workspace::from_parts(cfg, dataset);
    let mut text = String::from("index,split\n");
    let mut is_test = vec![false; ws.dataset.samples.len()];
    for &i in &ws.test_idx {
        is_test[i] = true;
    }
    for (i, t) in is_test.iter().enumerate() {
        writeln!(text, "{i},{}", if *t { "test" } else { "train" }).unwrap();
    }
    fs::write(ws.dir.join("split.csv"), text)?;
    info!(
        "dataset: {} samples on a {}x{} grid ({} train / {} test)",
        ws.dataset.samples.len(),
        ws.dataset.grid.rows(),
        ws.dataset.grid.cols(),
        ws.train_idx.len(),
        ws.test_idx.len()
    );
    Ok(ws)
}

impl Workspace {
    fn from_parts(cfg: ExperimentConfig, dataset: Dataset) -> Self {
        let (train_idx, test_idx) = split_indices(dataset.samples.len(), cfg.test_fraction, cfg.seed);
        Self {
            dir: cfg.output_dir.clone(),
            cfg,
            dataset,
            train_idx,
            test_idx,
        }
    }

    /// Reopen the dataset written by [`synth`]. The resolved config is
    /// rewritten so it always matches the artifacts that follow.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let cfg = cfg.clone().resolve();
        cfg.validate()?;
        let dir = need(cfg.output_dir.join("dataset"), "synth")?;
        let dataset = load_dataset(&dir)?;
        cfg.save(&cfg.output_dir.join(CONFIG_FILE))?;
        Ok(Self::from_parts(cfg, dataset))
    }

    fn samples(&self, idx: &[usize]) -> Vec<PairedSample> {
        idx.iter().map(|&i| self.dataset.samples[i].clone()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.dataset.samples[i].label()).collect()
    }

    pub fn locations(&self) -> Vec<GeoLocation> {
        self.dataset.samples.iter().map(PairedSample::location).collect()
    }

    pub fn all_idx(&self) -> Vec<usize> {
        (0..self.dataset.samples.len()).collect()
    }

    /// The configured embedder. The CNN embedding's PCA is fitted on the
    /// training patches once and stored under `embeddings/`.
    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self.cfg.embedding.kind {
            EmbeddingKind::Grayscale => Box::new(GrayscaleEmbedder::default()),
            EmbeddingKind::Hsv => Box::new(HsvEmbedder::default()),
            EmbeddingKind::Cnn => {
                let encoder = encoder_from_recipe(&self.cfg.embedding.encoder)?;
                let path = sub(&self.dir, "embeddings")?.join("pca.bin");
                if path.exists() {
                    Box::new(CnnEmbedder::with_pca(encoder, PcaProjection::load(&path)?)?)
                } else {
                    let mut e = CnnEmbedder::unfitted(encoder);
                    let patches: Vec<_> = self.train_idx.iter().map(|&i| &self.dataset.samples[i].overhead).collect();
                    e.fit(&patches)?;
                    e.pca().expect("fitted").save(&path)?;
                    Box::new(e)
                }
            }
        })
    }

    /// Embeddings of every sample's overhead patch, in sample order.
    pub fn embeddings(&self) -> Result<Array2<f64>> {
        let embedder = self.embedder()?;
        let patches: Vec<_> = self.dataset.samples.iter().map(|s| &s.overhead).collect();
        stack_embeddings(&embedder.embed_all(&patches)?)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    pub fn load_trained(&self) -> Result<(Generator, Discriminator)> {
        let (g, d, _) = load_models(&need(self.checkpoint("final.ckpt"), "train")?)?;
        Ok((g, d))
    }
}

fn rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Train the cGAN on the training split. Writes the initial and final
/// checkpoints, the loss CSV and the held-out discriminator accuracy.
pub fn train(ws: &Workspace) -> Result<TrainOutcome> {
    let cfg = &ws.cfg;
    let emb = ws.embeddings()?;
    let arch = cfg.cgan.arch(emb.ncols());
    let mut init_rng = rng(derive_seed(cfg.seed, "init"));
    let mut g = Generator::new(arch, &mut init_rng)?;
    let mut d = Discriminator::new(arch, &mut init_rng)?;
    sub(&ws.dir, "checkpoints")?;
    save_models(&ws.checkpoint("init.ckpt"), &g, &d, cfg.seed, 0)?;

    let train_samples = ws.samples(&ws.train_idx);
    info!("training cGAN ({arch:?}) on {} samples", train_samples.len());
    let history = cgan::train(&mut g, &mut d, &train_samples, &rows(&emb, &ws.train_idx), &cfg.cgan.train)?;
    save_models(&ws.checkpoint("final.ckpt"), &g, &d, cfg.seed, history.len())?;
    history.write_csv(&ws.dir.join("losses.csv"))?;

    let heldout = discriminator_accuracy(&g, &d, &ws.samples(&ws.test_idx), &rows(&emb, &ws.test_idx), derive_seed(cfg.seed, "heldout"))?;
    let tail = history.tail_mean_d(20);
    fs::write(
        sub(&ws.dir, "metrics")?.join("train.csv"),
        format!("steps,tail_mean_d_loss,heldout_d_accuracy\n{},{tail:e},{heldout:e}\n", history.len()),
    )?;
    info!("trained {} steps; held-out D accuracy {heldout:.3}", history.len());
    Ok(TrainOutcome {
        history,
        heldout_accuracy: heldout,
    })
}

/// One generated ground view per sample location, each from its own
/// seeded noise vector.
pub fn generate_views(g: &Generator, emb: &Array2<f64>, seed: u64) -> Result<Vec<RgbImage>> {
    let nz = g.arch().nz;
    let mut out = Vec::with_capacity(emb.nrows());
    for start in (0..emb.nrows()).step_by(64) {
        let end = (start + 64).min(emb.nrows());
        let mut flat = Vec::with_capacity((end - start) * nz);
        for i in start..end {
            flat.extend(normal_vec(&mut rng(derive_indexed(seed, "view", i as u64)), nz));
        }
        let z = Array2::from_shape_vec((end - start, nz), flat).expect("shape");
        let e = emb.slice(ndarray::s![start..end, ..]).to_owned();
        let imgs = g.generate(&z, &e)?;
        out.extend(imgs.outer_iter().map(tensor_to_image));
    }
    Ok(out)
}

fn view_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:05}.png"))
}

/// Write a generated view for every location plus a real-over-fake
/// montage of the first 16 test locations.
pub fn generate(ws: &Workspace) -> Result<Vec<RgbImage>> {
    let (g, _) = ws.load_trained()?;
    let views = generate_views(&g, &ws.embeddings()?, derive_seed(ws.cfg.seed, "views"))?;
    let dir = sub(&ws.dir, "generated")?;
    for (i, v) in views.iter().enumerate() {
        v.save(view_path(&dir, i))?;
    }
    let shown: Vec<usize> = ws.test_idx.iter().copied().take(16).collect();
    let real: Vec<&RgbImage> = shown.iter().map(|&i| &ws.dataset.samples[i].ground.pixels).collect();
    let fake: Vec<&RgbImage> = shown.iter().map(|&i| &views[i]).collect();
    let (top, bottom) = (plot::hstack(&real, 2), plot::hstack(&fake, 2));
    let mut montage = RgbImage::new(top.width(), top.height() + bottom.height());
    image::imageops::replace(&mut montage, &top, 0, 0);
    image::imageops::replace(&mut montage, &bottom, 0, top.height() as i64);
    montage.save(ws.dir.join("generated_montage.png"))?;
    Ok(views)
}

fn load_views(ws: &Workspace) -> Result<Vec<RgbImage>> {
    let dir = ws.dir.join("generated");
    (0..ws.dataset.samples.len())
        .map(|i| Ok(image::open(need(view_path(&dir, i), "generate")?)?.to_rgb8()))
        .collect()
}

/// Discriminator features at every location: from the overhead patch via
/// the generator (`cgan.csv`) and from the real ground image
/// (`cgan_real.csv`).
pub fn extract(ws: &Workspace) -> Result<(FeatureSet, FeatureSet)> {
    let (g, d) = ws.load_trained()?;
    let emb = ws.embeddings()?;
    let dir = sub(&ws.dir, "features")?;
    let generated = FeatureSet::new(ws.locations(), features_from_embeddings(&g, &d, &emb, ws.cfg.features.z_policy)?)?;
    generated.write_csv(&dir.join("cgan.csv"))?;

    let mut parts = Vec::new();
    for chunk in ws.all_idx().chunks(64) {
        let imgs = batch_from_images(chunk.iter().map(|&i| &ws.dataset.samples[i].ground.pixels));
        parts.push(d.features(&imgs, &rows(&emb, chunk))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let real_f = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dim(e.to_string()))?;
    let real = FeatureSet::new(ws.locations(), real_f)?;
    real.write_csv(&dir.join("cgan_real.csv"))?;
    Ok((generated, real))
}

fn pick<'a>(imgs: &[&'a RgbImage], idx: &[usize]) -> Vec<&'a RgbImage> {
    idx.iter().map(|&i| imgs[i]).collect()
}

fn write_predictions(path: &Path, locs: &[GeoLocation], labels: &[usize]) -> Result<()> {
    let mut text = String::from("index,lat,lon,label\n");
    for (i, (l, y)) in locs.iter().zip(labels).enumerate() {
        writeln!(text, "{i},{:?},{:?},{y}", l.lat, l.lon).unwrap();
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<(Vec<GeoLocation>, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let (mut locs, mut labels) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("bad prediction row {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let lat = f[1].parse().map_err(|_| bad())?;
        let lon = f[2].parse().map_err(|_| bad())?;
        locs.push(GeoLocation::new(lat, lon)?);
        labels.push(f[3].parse().map_err(|_| bad())?);
    }
    Ok((locs, labels))
}

fn prediction_path(ws: &Workspace, p: Provenance) -> Result<PathBuf> {
    Ok(sub(&ws.dir, "predictions")?.join(format!("{p}.csv")))
}

/// Train and evaluate the feature probes and the reference CNN:
///
/// * `embedding-probe`: SVM on the overhead embeddings;
/// * `cgan-feature-probe`: SVM on discriminator features;
/// * `ground-image-probe`: reference CNN on real ground images;
///
/// and the generated-image ablation (CNN trained and tested on generated
/// views). Per-location predictions for the maps are written alongside.
pub fn probe(ws: &Workspace) -> Result<(Vec<MetricsRow>, FakeImageScore)> {
    let cfg = &ws.cfg;
    let (tr, te) = (&ws.train_idx, &ws.test_idx);
    let (ytr, yte) = (ws.labels(tr), ws.labels(te));
    let models = sub(&ws.dir, "models")?;
    let mut rows_out = Vec::new();

    let emb = ws.embeddings()?;
    let svm = train_svm(rows(&emb, tr).view(), &ytr, &cfg.probe.svm)?;
    let acc = accuracy(&svm.predict(rows(&emb, te).view())?, &yte);
    info!("embedding probe: {acc:.4}");
    svm.save(&models.join("embedding_svm.bin"), cfg.embedding.kind.name())?;
    rows_out.push(MetricsRow {
        feature_type: "embedding-probe".into(),
        name: cfg.embedding.kind.name().into(),
        dimension: emb.ncols(),
        accuracy: acc,
    });

    let feature_dir = ws.dir.join("features");
    let generated = FeatureSet::read_csv(&need(feature_dir.join("cgan.csv"), "extract")?)?;
    let train_set = match cfg.features.train_source {
        TrainFeatureSource::Generated => generated.clone(),
        TrainFeatureSource::Real => FeatureSet::read_csv(&need(feature_dir.join("cgan_real.csv"), "extract")?)?,
    };
    let svm = train_svm(rows(&train_set.features, tr).view(), &ytr, &cfg.probe.svm)?;
    let acc = accuracy(&svm.predict(rows(&generated.features, te).view())?, &yte);
    info!("cgan feature probe: {acc:.4}");
    svm.save(&models.join("cgan_svm.bin"), &format!("cgan-{}", cfg.embedding.kind))?;
    write_predictions(&prediction_path(ws, Provenance::CganFeatures)?, &ws.locations(), &svm.predict(generated.features.view())?)?;
    rows_out.push(MetricsRow {
        feature_type: "cgan-feature-probe".into(),
        name: format!("cgan-{}", cfg.embedding.kind),
        dimension: generated.dim(),
        accuracy: acc,
    });

    let real: Vec<&RgbImage> = ws.dataset.samples.iter().map(|s| &s.ground.pixels).collect();
    let cnn = train_reference_cnn(&pick(&real, tr), &ytr, &cfg.probe.cnn)?;
    let all_pred = cnn.predict_images(&real)?;
    let real_real = accuracy(&te.iter().map(|&i| all_pred[i]).collect::<Vec<_>>(), &yte);
    info!("reference CNN on real images: {real_real:.4}");
    cnn.save(&models.join("refcnn.bin"), "real")?;
    write_predictions(&prediction_path(ws, Provenance::GroundImages)?, &ws.locations(), &all_pred)?;
    rows_out.push(MetricsRow {
        feature_type: "ground-image-probe".into(),
        name: "reference-cnn".into(),
        dimension: CNN_FEATURE_DIM,
        accuracy: real_real,
    });

    let views = load_views(ws)?;
    let fake: Vec<&RgbImage> = views.iter().collect();
    let fake_cnn = train_reference_cnn(&pick(&fake, tr), &ytr, &cfg.probe.cnn)?;
    let fake_fake = accuracy(&fake_cnn.predict_images(&pick(&fake, te))?, &yte);
    info!("reference CNN on generated images: {fake_fake:.4}");
    let score = FakeImageScore { real_real, fake_fake };

    let metrics = sub(&ws.dir, "metrics")?;
    write_metrics_csv(&metrics.join("probes.csv"), &rows_out)?;
    write_fake_scores(&metrics.join("generated_images.csv"), &score)?;
    Ok((rows_out, score))
}

fn write_fake_scores(path: &Path, s: &FakeImageScore) -> Result<()> {
    fs::write(path, format!("train_images,test_images,accuracy\nreal,real,{:.4}\ngenerated,generated,{:.4}\n", s.real_real, s.fake_fake))?;
    Ok(())
}

fn read_fake_scores(path: &Path) -> Result<FakeImageScore> {
    let text = fs::read_to_string(path)?;
    let value = |kind: &str| -> Result<f64> {
        text.lines()
            .find(|l| l.starts_with(&format!("{kind},{kind},")))
            .and_then(|l| l.rsplit(',').next()?.parse().ok())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("no {kind} row"),
            })
    };
    Ok(FakeImageScore {
        real_real: value("real")?,
        fake_fake: value("generated")?,
    })
}

/// The interpolate-then-classify baseline on reference-CNN features.
///
/// The probe row interpolates the training locations' features to the test
/// locations; the map predictions interpolate a sparse random subset of
/// `anchor_fraction` of all locations to every location.
pub fn interp(ws: &Workspace, sigma_km: Option<f64>) -> Result<(MetricsRow, Vec<(f64, f64)>)> {
    let cfg = &ws.cfg;
    let sigma = sigma_km.unwrap_or(cfg.interp.sigma_km);
    let cnn = ReferenceCnn::load(&need(ws.dir.join("models").join("refcnn.bin"), "probe")?)?;
    let real: Vec<&RgbImage> = ws.dataset.samples.iter().map(|s| &s.ground.pixels).collect();
    let feats = cnn.image_features(&real)?;
    let locs = ws.locations();
    let at = |idx: &[usize]| -> Vec<GeoLocation> { idx.iter().map(|&i| locs[i]).collect() };

    let field = SparseFeatureField::new(at(&ws.train_idx), rows(&feats, &ws.train_idx), sigma)?.with_metric(cfg.interp.metric);
    let queries = at(&ws.test_idx);
    let truth = ws.labels(&ws.test_idx);
    let acc = accuracy(&interpolate_then_classify(&field, &cnn, &queries)?, &truth);
    info!("interpolated probe (sigma {sigma} km): {acc:.4}");
    let sweep = sigma_sweep(&field, &cnn, &queries, &truth, &cfg.interp.sweep)?;
    let row = MetricsRow {
        feature_type: "interpolated-probe".into(),
        name: format!("reference-cnn-sigma{sigma}km"),
        dimension: cnn.dim(),
        accuracy: acc,
    };

    let n = locs.len();
    let k = ((n as f64 * cfg.interp.anchor_fraction).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(cfg.seed, "anchors")));
    let mut anchors = order[..k].to_vec();
    anchors.sort_unstable();
    let sparse = SparseFeatureField::new(at(&anchors), rows(&feats, &anchors), sigma)?.with_metric(cfg.interp.metric);
    let pred = interpolate_then_classify(&sparse, &cnn, &locs)?;
    write_predictions(&prediction_path(ws, Provenance::Interpolated)?, &locs, &pred)?;
    FeatureSet::new(at(&anchors), rows(&feats, &anchors))?.write_csv(&sub(&ws.dir, "features")?.join("anchors.csv"))?;

    let metrics = sub(&ws.dir, "metrics")?;
    write_metrics_csv(&metrics.join("interp.csv"), std::slice::from_ref(&row))?;
    let mut text = String::from("sigma_km,accuracy\n");
    for (s, a) in &sweep {
        writeln!(text, "{s},{a:.4}").unwrap();
    }
    fs::write(metrics.join("sigma_sweep.csv"), text)?;
    Ok((row, sweep))
}

const MAP_SOURCES: [Provenance; 3] = [Provenance::GroundImages, Provenance::CganFeatures, Provenance::Interpolated];

/// Majority-vote maps from each set of per-location predictions, scored
/// against the ground-truth grid.
pub fn map(ws: &Workspace) -> Result<Vec<MapScore>> {
    let grid = &ws.dataset.grid;
    let dir = sub(&ws.dir, "maps")?;
    let truth = LandCoverMap::ground_truth(grid);
    let save = |m: &LandCoverMap| -> Result<()> {
        m.write_csv(&dir.join(format!("{}.csv", m.provenance)))?;
        render_map(m, &ws.cfg.mapping.palette, ws.cfg.mapping.block)?.save(dir.join(format!("{}.png", m.provenance)))?;
        Ok(())
    };
    save(&truth)?;
    let mut scores = Vec::new();
    for p in MAP_SOURCES {
        let path = ws.dir.join("predictions").join(format!("{p}.csv"));
        let stage = if p == Provenance::Interpolated { "interp" } else { "probe" };
        let (locs, labels) = read_predictions(&need(path, stage)?)?;
        let m = build_map(grid, &labels_per_cell(grid, &locs, &labels)?, p)?;
        save(&m)?;
        let accuracy = map_accuracy(&m, &truth)?;
        info!("{p} map accuracy: {accuracy:.4}");
        scores.push(MapScore { provenance: p, accuracy });
    }
    let mut text = String::from("provenance,accuracy\n");
    for s in &scores {
        writeln!(text, "{},{:.4}", s.provenance, s.accuracy).unwrap();
    }
    fs::write(sub(&ws.dir, "metrics")?.join("maps.csv"), text)?;
    Ok(scores)
}

fn read_map_scores(path: &Path) -> Result<Vec<MapScore>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                msg: format!("bad map score row {line:?}"),
            };
            let (p, a) = line.split_once(',').ok_or_else(bad)?;
            Ok(MapScore {
                provenance: p.parse().map_err(|_| bad())?,
                accuracy: a.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn read_loss_csv(path: &Path) -> Result<LossHistory> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("bad loss row {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        records.push(LossRecord {
            step: f[0].parse().map_err(|_| bad())?,
            d_loss: f[1].parse().map_err(|_| bad())?,
            g_loss: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(LossHistory { records })
}

/// Collect the stage outputs into the final tables and figures:
/// `table2.csv` (feature probes), `table3.csv` (maps), `table4.csv`
/// (generated-image ablation), `loss_curve.png` and `maps.png`.
pub fn report(ws: &Workspace) -> Result<Summary> {
    let metrics = ws.dir.join("metrics");
    let mut probes = read_metrics_csv(&need(metrics.join("probes.csv"), "probe")?)?;
    probes.extend(read_metrics_csv(&need(metrics.join("interp.csv"), "interp")?)?);
    let order = |t: &str| ["embedding-probe", "cgan-feature-probe", "interpolated-probe"].iter().position(|&x| x == t).unwrap_or(3);
    probes.sort_by_key(|r| order(&r.feature_type));
    write_metrics_csv(&ws.dir.join("table2.csv"), &probes)?;

    let maps = read_map_scores(&need(metrics.join("maps.csv"), "map")?)?;
    fs::copy(metrics.join("maps.csv"), ws.dir.join("table3.csv"))?;
    let fake_images = read_fake_scores(&metrics.join("generated_images.csv"))?;
    fs::copy(metrics.join("generated_images.csv"), ws.dir.join("table4.csv"))?;

    let history = read_loss_csv(&need(ws.dir.join("losses.csv"), "train")?)?;
    plot::loss_curve(&history).save(ws.dir.join("loss_curve.png"))?;
    let train_text = fs::read_to_string(need(metrics.join("train.csv"), "train")?)?;
    let heldout_d_accuracy = train_text
        .lines()
        .nth(1)
        .and_then(|l| l.rsplit(',').next()?.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: metrics.join("train.csv"),
            line: 2,
            msg: "missing held-out accuracy".into(),
        })?;

    let map_dir = ws.dir.join("maps");
    let mut panels = Vec::new();
    for p in [Provenance::GroundTruth, Provenance::GroundImages, Provenance::CganFeatures, Provenance::Interpolated] {
        panels.push(image::open(need(map_dir.join(format!("{p}.png")), "map")?)?.to_rgb8());
    }
    plot::hstack(&panels.iter().collect::<Vec<_>>(), 8).save(ws.dir.join("maps.png"))?;

    Ok(Summary {
        probes,
        maps,
        fake_images,
        train_steps: history.len(),
        heldout_d_accuracy,
    })
}

/// Every stage in order on one output directory.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Summary> {
    let ws = synth(cfg)?;
    train(&ws)?;
    generate(&ws)?;
    extract(&ws)?;
    probe(&ws)?;
    interp(&ws, None)?;
    map(&ws)?;
    report(&ws)
}

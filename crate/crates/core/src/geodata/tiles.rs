//! Overhead imagery client: HTTP tile endpoint with an on-disk cache, or an
//! offline georeferenced PNG mosaic.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use sha2::{Digest, Sha256};

use super::{GeoLocation, OverheadPatch};
use crate::error::{Error, Result};

/// Environment variable holding the tile API key substituted for `{key}`.
pub const API_KEY_ENV: &str = "GROUNDVIEW_TILE_API_KEY";

#[derive(Debug, Clone)]
pub struct TileClientConfig {
    /// URL with `{lat}`, `{lon}`, `{zoom}`, `{size}` and optional `{key}`
    /// placeholders.
    pub url_template: Option<String>,
    pub zoom: u32,
    /// Side length of the image requested from the endpoint; the patch is
    /// its central crop.
    pub fetch_size: u32,
    pub cache_dir: PathBuf,
    pub mosaic: Option<MosaicSource>,
}

impl TileClientConfig {
    pub fn online(url_template: impl Into<String>, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            url_template: Some(url_template.into()),
            zoom: 18,
            fetch_size: 64,
            cache_dir: cache_dir.into(),
            mosaic: None,
        }
    }

    pub fn offline(mosaic: MosaicSource) -> Self {
        Self {
            url_template: None,
            zoom: 0,
            fetch_size: 0,
            cache_dir: PathBuf::new(),
            mosaic: Some(mosaic),
        }
    }
}

/// ESRI world file (`.pgw`) affine georeference. Rotation terms must be zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldFile {
    /// Degrees of longitude per pixel column.
    pub pixel_width: f64,
    /// Degrees of latitude per pixel row (negative for north-up images).
    pub pixel_height: f64,
    /// Longitude of the centre of the upper-left pixel.
    pub origin_lon: f64,
    /// Latitude of the centre of the upper-left pixel.
    pub origin_lat: f64,
}

impl WorldFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let vals: Vec<f64> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("invalid number {l:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: vals.len(),
                msg: "world file needs exactly 6 values".into(),
            });
        }
        if vals[1] != 0.0 || vals[2] != 0.0 {
            return Err(Error::config("rotated world files are not supported"));
        }
        Ok(Self {
            pixel_width: vals[0],
            pixel_height: vals[3],
            origin_lon: vals[4],
            origin_lat: vals[5],
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}\n0\n0\n{}\n{}\n{}\n",
            self.pixel_width, self.pixel_height, self.origin_lon, self.origin_lat
        )
    }

    /// Nearest pixel (column, row) to a location, possibly outside the image.
    pub fn pixel_of(&self, loc: &GeoLocation) -> (i64, i64) {
        let col = ((loc.lon - self.origin_lon) / self.pixel_width).round() as i64;
        let row = ((loc.lat - self.origin_lat) / self.pixel_height).round() as i64;
        (col, row)
    }
}

#[derive(Debug, Clone)]
pub struct MosaicSource {
    pub image: RgbImage,
    pub world: WorldFile,
}

impl MosaicSource {
    /// Load `name.png` with its sibling `name.pgw`.
    pub fn load(png: &Path) -> Result<Self> {
        if !png.exists() {
            return Err(Error::MissingFile(png.to_path_buf()));
        }
        let pgw = png.with_extension("pgw");
        let text = fs::read_to_string(&pgw).map_err(|_| Error::MissingFile(pgw.clone()))?;
        Ok(Self {
            image: image::open(png)?.to_rgb8(),
            world: WorldFile::parse(&text, &pgw)?,
        })
    }

    pub fn crop(&self, loc: &GeoLocation, patch_size: u32) -> Result<RgbImage> {
        let (cx, cy) = self.world.pixel_of(loc);
        let half = patch_size as i64 / 2;
        let (x0, y0) = (cx - half, cy - half);
        let (w, h) = self.image.dimensions();
        if x0 < 0 || y0 < 0 || x0 + patch_size as i64 > w as i64 || y0 + patch_size as i64 > h as i64 {
            return Err(Error::Coverage(format!("{loc} is not covered by the offline mosaic")));
        }
        Ok(image::imageops::crop_imm(&self.image, x0 as u32, y0 as u32, patch_size, patch_size).to_image())
    }
}

pub struct TileClient {
    config: TileClientConfig,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    network_requests: AtomicUsize,
}

impl TileClient {
    pub fn new(config: TileClientConfig) -> Result<Self> {
        if config.url_template.is_none() && config.mosaic.is_none() {
            return Err(Error::config("tile client needs a URL template or an offline mosaic"));
        }
        Ok(Self {
            config,
            key_locks: Mutex::new(HashMap::new()),
            network_requests: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests issued so far (cache hits excluded).
    pub fn network_requests(&self) -> usize {
        self.network_requests.load(Ordering::SeqCst)
    }

    pub fn request_url(&self, loc: &GeoLocation) -> Option<String> {
        self.config.url_template.as_ref().map(|t| {
            t.replace("{lat}", &loc.lat.to_string())
                .replace("{lon}", &loc.lon.to_string())
                .replace("{zoom}", &self.config.zoom.to_string())
                .replace("{size}", &self.config.fetch_size.to_string())
        })
    }

    fn cache_path(&self, url: &str) -> PathBuf {
        let digest = Sha256::digest(url.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.config.cache_dir.join(format!("{hex}.png"))
    }

    pub fn fetch_overhead_patch(&self, loc: &GeoLocation, patch_size: u32) -> Result<OverheadPatch> {
        if let Some(mosaic) = &self.config.mosaic {
            return OverheadPatch::new(mosaic.crop(loc, patch_size)?, *loc);
        }
        // The cache key excludes the API key so rotating keys keeps the cache.
        let url = self.request_url(loc).expect("online mode has a template");
        let path = self.cache_path(&url);
        let tile = match read_cached(&path) {
            Some(img) => img,
            None => {
                let lock = {
                    let mut locks = self.key_locks.lock().expect("lock poisoned");
                    locks.entry(url.clone()).or_default().clone()
                };
                let _guard = lock.lock().expect("lock poisoned");
                match read_cached(&path) {
                    Some(img) => img,
                    None => {
                        let img = self.download(&url)?;
                        fs::create_dir_all(&self.config.cache_dir)?;
                        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                        img.save_with_format(&tmp, image::ImageFormat::Png)?;
                        fs::rename(&tmp, &path)?;
                        img
                    }
                }
            }
        };
        OverheadPatch::new(center_patch(&tile, patch_size), *loc)
    }

    fn download(&self, url: &str) -> Result<RgbImage> {
        let full = match std::env::var(API_KEY_ENV) {
            Ok(key) => url.replace("{key}", &key),
            Err(_) => url.replace("{key}", ""),
        };
        self.network_requests.fetch_add(1, Ordering::SeqCst);
        let mut resp = ureq::get(&full).call().map_err(|e| Error::Network(format!("GET {url}: {e}")))?;
        let bytes = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| Error::Network(format!("reading {url}: {e}")))?;
        Ok(image::load_from_memory(&bytes)?.to_rgb8())
    }
}

fn read_cached(path: &Path) -> Option<RgbImage> {
    image::open(path).ok().map(|i| i.to_rgb8())
}

fn center_patch(tile: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = tile.dimensions();
    if w < size || h < size {
        return crate::imageops::resize_bilinear(tile, size, size);
    }
    image::imageops::crop_imm(tile, (w - size) / 2, (h - size) / 2, size, size).to_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn mosaic() -> MosaicSource {
        let image = RgbImage::from_fn(40, 30, |x, y| Rgb([x as u8 * 5, y as u8 * 7, (x + y) as u8]));
        let world = WorldFile {
            pixel_width: 0.001,
            pixel_height: -0.001,
            origin_lon: -0.2,
            origin_lat: 51.6,
        };
        MosaicSource { image, world }
    }

    #[test]
    fn offline_crop_matches_array_slice() {
        let m = mosaic();
        let client = TileClient::new(TileClientConfig::offline(m.clone())).unwrap();
        // Pixel (col 17, row 12).
        let loc = GeoLocation {
            lat: 51.6 - 0.012,
            lon: -0.2 + 0.017,
        };
        let patch = client.fetch_overhead_patch(&loc, 10).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(patch.pixels.get_pixel(x, y), m.image.get_pixel(12 + x, 7 + y));
            }
        }
    }

    #[test]
    fn outside_mosaic_is_a_coverage_error() {
        let client = TileClient::new(TileClientConfig::offline(mosaic())).unwrap();
        let err = client
            .fetch_overhead_patch(&GeoLocation { lat: 50.0, lon: 0.0 }, 10)
            .unwrap_err();
        assert!(matches!(err, Error::Coverage(_)), "{err}");
    }

    #[test]
    fn world_file_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = mosaic();
        let png = dir.path().join("mosaic.png");
        m.image.save(&png).unwrap();
        fs::write(png.with_extension("pgw"), m.world.to_text()).unwrap();
        let loaded = MosaicSource::load(&png).unwrap();
        assert_eq!(loaded.world, m.world);
        assert_eq!(loaded.image, m.image);
    }

    /// Serves a fixed PNG to every request, counting connections.
    fn serve_png(n: usize) -> (String, std::thread::JoinHandle<usize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut png = Vec::new();
        RgbImage::from_fn(16, 16, |x, y| Rgb([x as u8 * 10, y as u8 * 10, 99]))
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .unwrap();
        let handle = std::thread::spawn(move || {
            let mut served = 0;
            for stream in listener.incoming().take(n) {
                let mut s = stream.unwrap();
                let mut buf = [0u8; 4096];
                let _ = s.read(&mut buf).unwrap();
                let head = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: image/png\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    png.len()
                );
                s.write_all(head.as_bytes()).unwrap();
                s.write_all(&png).unwrap();
                served += 1;
            }
            served
        });
        (format!("http://{addr}/tile?c={{lat}},{{lon}}&z={{zoom}}&s={{size}}&k={{key}}"), handle)
    }

    #[test]
    fn second_request_is_served_from_cache() {
        let (url, server) = serve_png(1);
        let cache = tempfile::tempdir().unwrap();
        let mut cfg = TileClientConfig::online(url, cache.path());
        cfg.fetch_size = 16;
        let client = TileClient::new(cfg).unwrap();
        let loc = GeoLocation { lat: 51.5, lon: -0.1 };
        let a = client.fetch_overhead_patch(&loc, 10).unwrap();
        let b = client.fetch_overhead_patch(&loc, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(client.network_requests(), 1);
        assert_eq!(server.join().unwrap(), 1);
        // Central crop of the served 16x16 tile.
        assert_eq!(*a.pixels.get_pixel(0, 0), Rgb([30, 30, 99]));
    }

    #[test]
    fn connection_failure_is_retryable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cache = tempfile::tempdir().unwrap();
        let client = TileClient::new(TileClientConfig::online(
            format!("http://127.0.0.1:{port}/{{lat}}/{{lon}}"),
            cache.path(),
        ))
        .unwrap();
        let err = client
            .fetch_overhead_patch(&GeoLocation { lat: 1.0, lon: 1.0 }, 10)
            .unwrap_err();
        assert!(err.is_retryable(), "{err}");
    }
}

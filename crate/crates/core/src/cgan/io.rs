use std::path::Path;

use super::{ArchConfig, Discriminator, Generator};
use crate::checkpoint::{read_blob, write_blob};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::rng::rng;

pub const CHECKPOINT_MAGIC: &str = "groundview-cgan v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub seed: u64,
    pub step: usize,
}

fn values(m: &impl Module) -> Vec<f64> {
    let mut v = m.flat_params();
    for b in m.buffers() {
        v.extend(b.iter().copied());
    }
    v
}

fn restore(m: &mut impl Module, vals: &mut std::slice::Iter<'_, f64>) -> bool {
    for p in m.params_mut() {
        for w in p.value.iter_mut() {
            match vals.next() {
                Some(&x) => *w = x,
                None => return false,
            }
        }
    }
    for b in m.buffers_mut() {
        for w in b.iter_mut() {
            match vals.next() {
                Some(&x) => *w = x,
                None => return false,
            }
        }
    }
    true
}

/// Write both networks (parameters then batch-norm running statistics) to
/// one blob.
pub fn save_models(path: &Path, g: &Generator, d: &Discriminator, seed: u64, step: usize) -> Result<()> {
    let a = g.arch();
    let header = [
        ("arch_hash", a.hash()),
        ("nef", a.nef.to_string()),
        ("nz", a.nz.to_string()),
        ("ngf", a.ngf.to_string()),
        ("ndf", a.ndf.to_string()),
        ("image_size", a.image_size.to_string()),
        ("seed", seed.to_string()),
        ("step", step.to_string()),
    ]
    .map(|(k, v)| (k.to_string(), v));
    let mut vals = values(g);
    vals.extend(values(d));
    write_blob(path, CHECKPOINT_MAGIC, &header, &vals)
}

pub fn load_models(path: &Path) -> Result<(Generator, Discriminator, CheckpointMeta)> {
    let (h, vals) = read_blob(path, CHECKPOINT_MAGIC)?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    };
    let get = |k: &str| -> Result<u64> {
        h.get(k)
            .ok_or_else(|| bad(format!("missing header field {k}")))?
            .parse()
            .map_err(|_| bad(format!("header field {k} is not an integer")))
    };
    let arch = ArchConfig {
        nz: get("nz")? as usize,
        nef: get("nef")? as usize,
        ngf: get("ngf")? as usize,
        ndf: get("ndf")? as usize,
        image_size: get("image_size")? as usize,
    };
    if h.get("arch_hash") != Some(&arch.hash()) {
        return Err(bad("architecture hash does not match the recorded widths".into()));
    }
    let mut r = rng(0);
    let mut g = Generator::new(arch, &mut r)?;
    let mut d = Discriminator::new(arch, &mut r)?;
    let mut it = vals.iter();
    if !restore(&mut g, &mut it) || !restore(&mut d, &mut it) || it.next().is_some() {
        return Err(bad("parameter payload length does not match the architecture".into()));
    }
    let meta = CheckpointMeta {
        arch,
        seed: get("seed")?,
        step: get("step")? as usize,
    };
    Ok((g, d, meta))
}

//! Checkpoint file:
//!
//! ```text
//! "SVGAN1"  u32 version  u32 len  descriptor (UTF-8 JSON)
//! u32 blocks, then per block:
//!   u32 len  name   u32 ndim  u32 dims...   u32 crc32   f32 values (LE)
//! ```
//!
//! Blocks carry generator and discriminator parameters (`gen/`, `disc/`)
//! and their RMSprop accumulators (`gen_opt/`, `disc_opt/`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use svgan_core::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use svgan_core::optim::RmsProp;
use svgan_core::params::ParamStore;
use svgan_core::trainer::{TrainConfig, TrainState};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const MAGIC: &[u8; 6] = b"SVGAN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: usize,
    pub config_hash: u64,
}

struct Block {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_block(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&crc32fast::hash(&bytes).to_le_bytes());
    out.extend_from_slice(&bytes);
}

pub fn encode(desc: &Descriptor, state: &TrainState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_string(desc).expect("descriptor serialises");
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    let stores: [(&str, &ParamStore<f32>, &RmsProp<f32>); 2] = [
        ("gen", &state.gen.params, &state.g_opt),
        ("disc", &state.disc.params, &state.d_opt),
    ];
    put_u32(&mut out, 2 * (state.gen.params.len() + state.disc.params.len()));
    for (prefix, store, opt) in stores {
        for p in store.iter() {
            encode_block(
                &mut out,
                &format!("{prefix}/{}", p.name),
                p.value.shape(),
                p.value.data(),
            );
        }
        for (p, s) in store.iter().zip(&opt.states) {
            encode_block(&mut out, &format!("{prefix}_opt/{}", p.name), p.value.shape(), &s.v);
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {}", what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Descriptor, Vec<Block>)> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(6, "magic")? != MAGIC {
        return Err(Error::format(path, "not an SVGAN1 checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version as u32 != VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint version {}, this build reads {}", version, VERSION),
        ));
    }
    let n = r.u32("descriptor length")?;
    let text =
        std::str::from_utf8(r.take(n, "descriptor")?).map_err(|_| Error::format(path, "descriptor is not UTF-8"))?;
    let desc: Descriptor = serde_json::from_str(text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    let count = r.u32("block count")?;
    let mut blocks = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("block name")?;
        let name = String::from_utf8(r.take(len, "block name")?.to_vec())
            .map_err(|_| Error::format(path, format!("block {} name is not UTF-8", i)))?;
        let ndim = r.u32(&name)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&name)?);
        }
        let crc = r.u32(&name)? as u32;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("parameter {}", name))?;
        if crc32fast::hash(raw) != crc {
            return Err(Error::format(
                path,
                format!("parameter {} is corrupted (checksum mismatch)", name),
            ));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(Block { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((desc, blocks))
}

fn fill(
    path: &Path,
    prefix: &str,
    store: &mut ParamStore<f32>,
    opt: &mut RmsProp<f32>,
    blocks: &mut Vec<Block>,
) -> Result<()> {
    let mut take = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
        let i = blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::format(path, format!("missing parameter {}", name)))?;
        let b = blocks.swap_remove(i);
        if b.shape != shape {
            return Err(Error::format(
                path,
                format!("parameter {} has shape {:?}, config expects {:?}", name, b.shape, shape),
            ));
        }
        Ok(b.values)
    };
    for (p, s) in store.iter_mut().zip(opt.states.iter_mut()) {
        let shape = p.value.shape().to_vec();
        let v = take(format!("{prefix}/{}", p.name), &shape)?;
        p.value.data_mut().copy_from_slice(&v);
        s.v = take(format!("{prefix}_opt/{}", p.name), &shape)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, desc: &Descriptor, state: &TrainState<f32>) -> Result<()> {
    atomic_write(path, &encode(desc, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(Descriptor, TrainState<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (desc, mut blocks) = decode(path, &bytes)?;
    let gen = Generator::<f32>::new(desc.generator.clone(), desc.train.seed)?;
    let disc = Discriminator::<f32>::new(desc.discriminator.clone(), desc.train.seed)?;
    let mut state = TrainState {
        g_opt: RmsProp::new(desc.train.optimizer(desc.epoch), &gen.params)?,
        d_opt: RmsProp::new(desc.train.optimizer(desc.epoch), &disc.params)?,
        gen,
        disc,
        epoch: desc.epoch,
        step: desc.step,
    };
    fill(path, "gen", &mut state.gen.params, &mut state.g_opt, &mut blocks)?;
    fill(path, "disc", &mut state.disc.params, &mut state.d_opt, &mut blocks)?;
    if let Some(b) = blocks.first() {
        return Err(Error::format(path, format!("unexpected parameter {}", b.name)));
    }
    Ok((desc, state))
}

/// Loads and insists the stored network configs equal the expected ones.
pub fn load_checkpoint_for(
    path: &Path,
    generator: &GeneratorConfig,
    discriminator: &DiscriminatorConfig,
) -> Result<(Descriptor, TrainState<f32>)> {
    let (desc, state) = load_checkpoint(path)?;
    if &desc.generator != generator || &desc.discriminator != discriminator {
        return Err(Error::Validation(format!(
            "{}: checkpoint was written for a different network configuration",
            path.display()
        )));
    }
    Ok((desc, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> (Descriptor, TrainState<f32>) {
        let g = GeneratorConfig {
            height: 16,
            width: 16,
            ..GeneratorConfig::default()
        };
        let d = DiscriminatorConfig::matching(&g);
        let t = TrainConfig::default();
        let mut s = TrainState::new(g.clone(), d.clone(), &t).unwrap();
        s.g_opt.states[0].v[0] = 0.25;
        s.epoch = 3;
        s.step = 17;
        let desc = Descriptor {
            generator: g,
            discriminator: d,
            train: t,
            epoch: 3,
            step: 17,
            config_hash: 99,
        };
        (desc, s)
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svgan");
        let (desc, s) = state();
        save_checkpoint(&p, &desc, &s).unwrap();
        let (d2, s2) = load_checkpoint(&p).unwrap();
        assert_eq!(d2, desc);
        assert_eq!(s2.gen.params, s.gen.params);
        assert_eq!(s2.disc.params, s.disc.params);
        assert_eq!(s2.g_opt.states, s.g_opt.states);
        assert_eq!(s2.d_opt.states, s.d_opt.states);
        assert_eq!((s2.epoch, s2.step), (3, 17));
    }

    #[test]
    fn corrupted_block_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svgan");
        let (desc, s) = state();
        save_checkpoint(&p, &desc, &s).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let msg = load_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("corrupted") && msg.contains("disc_opt/"), "{msg}");
        fs::write(&p, &bytes[..n / 2]).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("truncated"));
        fs::write(&p, b"SVGAN2xxxxxxxx").unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svgan");
        let (desc, s) = state();
        save_checkpoint(&p, &desc, &s).unwrap();
        let mut other = desc.generator.clone();
        other.base_channels = 8;
        assert!(load_checkpoint_for(&p, &other, &desc.discriminator).is_err());
        assert!(load_checkpoint_for(&p, &desc.generator, &desc.discriminator).is_ok());
    }

    #[test]
    fn shape_mismatch_is_not_reshaped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.svgan");
        let (mut desc, s) = state();
        // descriptor claims a wider network than the stored blocks
        desc.generator.base_channels = 8;
        save_checkpoint(&p, &desc, &s).unwrap();
        let msg = load_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("shape"), "{msg}");
    }
}

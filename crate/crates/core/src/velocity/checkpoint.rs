//! `MSFC` checkpoint files: magic, version, the configuration as `u32`
//! fields, then every named parameter tensor.

use std::io::{Read, Write};
use std::path::Path;

use super::{ScaleSpec, VelocityConfig, VelocityParams};
use crate::error::{bail, MsfError, Result};
use crate::grid::read_u32;

pub const MSFC_MAGIC: [u8; 4] = *b"MSFC";
pub const MSFC_VERSION: u32 = 1;

impl VelocityParams<f32> {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let cfg = self.config();
        w.write_all(&MSFC_MAGIC)?;
        let mut header = vec![
            MSFC_VERSION,
            cfg.channels as u32,
            cfg.hidden as u32,
            cfg.depth as u32,
            cfg.heads as u32,
            cfg.num_classes as u32,
            cfg.num_scales() as u32,
            cfg.has_null_class() as u32,
        ];
        for s in &cfg.scales {
            header.extend([s.height as u32, s.width as u32, s.patch as u32]);
        }
        let tensors = self.tensors();
        header.push(tensors.len() as u32);
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MSFC_MAGIC {
            bail!(Format, "bad MSFC magic {magic:02x?}");
        }
        let version = read_u32(&mut r)?;
        if version != MSFC_VERSION {
            bail!(Format, "unsupported MSFC version {version}");
        }
        let mut field = || read_u32(&mut r).map(|v| v as usize);
        let channels = field()?;
        let hidden = field()?;
        let depth = field()?;
        let heads = field()?;
        let num_classes = field()?;
        let num_scales = field()?;
        if field()? != 1 {
            bail!(Format, "checkpoint lacks the null class");
        }
        if num_scales > 64 {
            bail!(Format, "implausible scale count {num_scales}");
        }
        let mut scales = Vec::with_capacity(num_scales);
        for _ in 0..num_scales {
            scales.push(ScaleSpec {
                height: field()?,
                width: field()?,
                patch: field()?,
            });
        }
        let count = field()?;
        let config = VelocityConfig {
            channels,
            hidden,
            depth,
            heads,
            num_classes,
            scales,
        };
        let mut params = VelocityParams::<f32>::zeros(&config)
            .map_err(|e| MsfError::Format(format!("checkpoint config: {e}")))?;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            bail!(Format, "checkpoint has {count} tensors, config implies {}", slots.len());
        }
        for (expected_name, t) in slots.iter_mut() {
            let len = read_u32(&mut r)? as usize;
            if len > 256 {
                bail!(Format, "tensor name too long");
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| MsfError::Format("tensor name is not UTF-8".into()))?;
            if &name != expected_name {
                bail!(Format, "expected tensor `{expected_name}`, found `{name}`");
            }
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != t.dims {
                bail!(Format, "tensor `{name}` has dims {dims:?}, expected {:?}", t.dims);
            }
            let mut bytes = vec![0u8; t.len() * 4];
            r.read_exact(&mut bytes)?;
            for (v, b) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        drop(slots);
        if !params.all_finite() {
            bail!(Format, "checkpoint contains non-finite parameters");
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &VelocityParams, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    params.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, rejecting it when `expected` is given and differs.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&VelocityConfig>) -> Result<VelocityParams> {
    let f = std::fs::File::open(path)?;
    let params = VelocityParams::read_from(std::io::BufReader::new(f))?;
    if let Some(cfg) = expected {
        if params.config() != cfg {
            bail!(
                Config,
                "checkpoint config {:?} is incompatible with {:?}",
                params.config(),
                cfg
            );
        }
    }
    Ok(params)
}

//! Binary checkpoint format.
//!
//! ```text
//! "FDSN" | version: u16 | record*
//! record = name_len: u32 | name: utf-8 | rank: u32 | extents: u32 × rank | values: f64 × Π extents
//! ```
//!
//! All integers and floats are little-endian. Architecture hyperparameters are
//! stored as `config.*` records ahead of the parameters; batch-norm buffers
//! are recognised by their `.running_mean` / `.running_var` suffix.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::tensor::{Padding, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FDSN";
pub const VERSION: u16 = 1;

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn config_records(c: &ModelConfig) -> Vec<(String, Tensor)> {
    let s = |v: f64| Tensor::scalar(v);
    let padding = match c.padding {
        Padding::CircularHReplicateV => 0.0,
        Padding::Circular => 1.0,
    };
    vec![
        ("config.height".into(), s(c.height as f64)),
        ("config.width".into(), s(c.width as f64)),
        ("config.num_classes".into(), s(c.num_classes as f64)),
        (
            "config.extractor_widths".into(),
            Tensor::new(&[6], c.extractor_widths.iter().map(|&w| w as f64).collect()).expect("6 widths"),
        ),
        ("config.block_width".into(), s(c.block_width as f64)),
        ("config.branch_width".into(), s(c.branch_width as f64)),
        ("config.alpha_global".into(), s(c.alpha_global)),
        ("config.prelu_init".into(), s(c.prelu_init)),
        ("config.skip_init".into(), s(c.skip_init)),
        ("config.semantic_fusion".into(), s(c.semantic_fusion as f64)),
        ("config.depth_fusion".into(), s(c.depth_fusion as f64)),
        ("config.padding".into(), s(padding)),
        ("config.bn_momentum".into(), s(c.bn_momentum)),
        ("config.bn_eps".into(), s(c.bn_eps)),
        ("config.depth_bias_init".into(), s(c.depth_bias_init)),
    ]
}

fn config_from_records(recs: &[(String, Tensor)]) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&Tensor> {
        recs.iter()
            .find(|(n, _)| n == &format!("config.{key}"))
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing record config.{key}")))
    };
    let u = |key: &str| -> Result<usize> { Ok(get(key)?.item() as usize) };
    let f = |key: &str| -> Result<f64> { Ok(get(key)?.item()) };
    let ew = get("extractor_widths")?;
    if ew.len() != 6 {
        return Err(Error::Checkpoint("config.extractor_widths must hold 6 values".into()));
    }
    let mut widths = [0usize; 6];
    for (w, &v) in widths.iter_mut().zip(ew.data()) {
        *w = v as usize;
    }
    let config = ModelConfig {
        height: u("height")?,
        width: u("width")?,
        num_classes: u("num_classes")?,
        extractor_widths: widths,
        block_width: u("block_width")?,
        branch_width: u("branch_width")?,
        alpha_global: f("alpha_global")?,
        prelu_init: f("prelu_init")?,
        skip_init: f("skip_init")?,
        semantic_fusion: u("semantic_fusion")?,
        depth_fusion: u("depth_fusion")?,
        padding: if f("padding")? == 0.0 { Padding::CircularHReplicateV } else { Padding::Circular },
        bn_momentum: f("bn_momentum")?,
        bn_eps: f("bn_eps")?,
        depth_bias_init: f("depth_bias_init")?,
    };
    config.validate()?;
    Ok(config)
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize a configuration and state to bytes.
pub fn to_bytes(config: &ModelConfig, state: &ModelState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in config_records(config) {
        write_record(&mut out, &name, &t)?;
    }
    for (name, t) in state.params.iter().chain(&state.buffers) {
        write_record(&mut out, name, t)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse bytes produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelState)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut config_recs = Vec::new();
    let mut state = ModelState::new();
    while c.pos < bytes.len() {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("record name is not utf-8: {e}")))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)?;
        let dup = if name.starts_with("config.") {
            config_recs.push((name.clone(), t));
            false
        } else if is_buffer(&name) {
            state.buffers.insert(name.clone(), t).is_some()
        } else {
            state.params.insert(name.clone(), t).is_some()
        };
        if dup {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    Ok((config_from_records(&config_recs)?, state))
}

pub fn save(path: &Path, config: &ModelConfig, state: &ModelState) -> Result<()> {
    let bytes = to_bytes(config, state)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

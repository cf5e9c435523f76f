//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CCLR"  u32 version  u8 family tag  u64 backbone seed
//! u32 config length, config text (`key=value` lines)
//! u32 tensor count, then per tensor:
//!   u16 name length, name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! The frozen backbone is stored alongside the trainable tensors so a
//! checkpoint is self-contained and round-trips bit-exactly.

use std::path::Path;

use crate::adapters::Family;
use crate::backbone::{FrozenBackbone, FrozenLinear};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"CCLR";
pub const FORMAT_VERSION: u32 = 1;

fn backbone_tensors(backbone: &FrozenBackbone) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    for (l, layer) in backbone.layers().iter().enumerate() {
        out.push((format!("backbone.{l}.w0"), layer.w0().clone()));
        let bias = layer.bias().to_vec();
        let n = bias.len();
        out.push((
            format!("backbone.{l}.bias"),
            Matrix::new(n, 1, bias).expect("bias length matches"),
        ));
    }
    out
}

fn config_text(config: &ModelConfig) -> String {
    config
        .entries()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Serializes a model.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(model.family().tag());
    buf.extend_from_slice(&model.backbone().seed().to_le_bytes());
    let text = config_text(&model.config);
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());

    let mut tensors = backbone_tensors(model.backbone());
    tensors.extend(model.params.tensors().into_iter().map(|(n, _, m)| (n, m.clone())));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses a model written by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let tag = r.array::<1>()?[0];
    let family = Family::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown family tag {tag}")))?;
    let seed = r.u64()?;
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    let mut config = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line `{line}`")))?;
        config.apply(k, v).map_err(Error::Checkpoint)?;
    }
    if config.family != family || config.backbone_seed != seed {
        return Err(Error::Checkpoint("header disagrees with config echo".into()));
    }

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((name, Matrix::new(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let depth = config.depth;
    if tensors.len() < 2 * depth {
        return Err(Error::Checkpoint("missing backbone tensors".into()));
    }
    let trainable = tensors.split_off(2 * depth);
    let mut layers = Vec::with_capacity(depth);
    for (l, pair) in tensors.chunks_exact(2).enumerate() {
        let (w_name, w0) = &pair[0];
        let (b_name, bias) = &pair[1];
        if *w_name != format!("backbone.{l}.w0") || *b_name != format!("backbone.{l}.bias") {
            return Err(Error::Checkpoint(format!("unexpected tensor `{w_name}` or `{b_name}`")));
        }
        layers.push(FrozenLinear::new(w0.clone(), bias.data().to_vec())?);
    }
    let backbone = FrozenBackbone::from_layers(layers, config.residual, seed)?;

    let mut params = Model::new(config.clone(), 0)?.params;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    if names.len() != trainable.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} trainable tensors, found {}",
            names.len(),
            trainable.len()
        )));
    }
    for ((slot, want), (name, m)) in params.tensors_mut().into_iter().zip(&names).zip(trainable) {
        if *want != name || slot.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` {:?} does not match expected `{want}` {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    Model::from_parts(config, backbone, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

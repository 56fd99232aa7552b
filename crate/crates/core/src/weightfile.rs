//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ENQE" | u16 version | u32 header_len | header (TOML: mode + model config)
//! u32 tensor_count | directory entries | payloads | u32 CRC-32 of everything before it
//! ```
//!
//! A directory entry is `u16 name_len, name, u8 kind, u32 rows, u32 cols,
//! u32 block_size, u64 offset, u64 length` with `offset` measured from the
//! start of the file. Dense payloads are row-major `f32`; quantized
//! payloads are the block scales (`f32`) followed by the packed codes; an
//! adapter pair is `u32 rank, f32 alpha, A, B`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{data, Error, Result};
use crate::model::{Block, Embedder, ExitHead, LayerNormParams, Linear, ModelConfig, ModelMode, MultiExitModel, Weight};
use crate::numerics::Matrix;
use crate::quantizer::{QuantizedTensor, Scheme};

pub const MAGIC: &[u8; 4] = b"ENQE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    DenseF32 = 0,
    Nf4 = 1,
    Uniform4 = 2,
    Uniform8 = 3,
    LoraPair = 4,
}

impl TensorKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => TensorKind::DenseF32,
            1 => TensorKind::Nf4,
            2 => TensorKind::Uniform4,
            3 => TensorKind::Uniform8,
            4 => TensorKind::LoraPair,
            _ => return Err(data(format!("unknown tensor kind {v}"))),
        })
    }

    fn of_scheme(s: Scheme) -> Self {
        match s {
            Scheme::Nf4 => TensorKind::Nf4,
            Scheme::Uniform { bits: 4 } => TensorKind::Uniform4,
            Scheme::Uniform { .. } => TensorKind::Uniform8,
        }
    }

    fn scheme(self) -> Option<Scheme> {
        match self {
            TensorKind::Nf4 => Some(Scheme::Nf4),
            TensorKind::Uniform4 => Some(Scheme::Uniform { bits: 4 }),
            TensorKind::Uniform8 => Some(Scheme::Uniform { bits: 8 }),
            _ => None,
        }
    }
}

/// Configuration block stored in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub mode: ModelMode,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub offset: u64,
    pub length: u64,
}

enum Payload<'a> {
    Dense { rows: usize, cols: usize, data: &'a [f32] },
    Quant(&'a QuantizedTensor),
    Lora(&'a LoraAdapter<f32>),
}

fn tensors(model: &MultiExitModel<f32>) -> Vec<(String, Payload<'_>)> {
    fn mat(m: &Matrix<f32>) -> Payload<'_> {
        Payload::Dense {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data(),
        }
    }
    fn vec(v: &[f32]) -> Payload<'_> {
        Payload::Dense {
            rows: 1,
            cols: v.len(),
            data: v,
        }
    }
    let mut out = Vec::new();
    let e = &model.embedder;
    out.push(("embed.row_proj".to_string(), mat(&e.row_proj)));
    out.push(("embed.row_bias".to_string(), vec(&e.row_bias)));
    out.push(("embed.compass_proj".to_string(), mat(&e.compass_proj)));
    out.push(("embed.compass_bias".to_string(), vec(&e.compass_bias)));
    out.push(("embed.positions".to_string(), mat(&e.positions)));
    out.push(("embed.readout".to_string(), vec(&e.readout)));
    for (l, b) in model.blocks.iter().enumerate() {
        out.push((format!("blocks.{l}.ln1.gain"), vec(&b.ln1.gain)));
        out.push((format!("blocks.{l}.ln1.bias"), vec(&b.ln1.bias)));
        out.push((format!("blocks.{l}.ln2.gain"), vec(&b.ln2.gain)));
        out.push((format!("blocks.{l}.ln2.bias"), vec(&b.ln2.bias)));
        for (name, lin) in b.linears() {
            let p = match &lin.weight {
                Weight::Dense(m) => mat(m),
                Weight::Quantized(q) => Payload::Quant(q),
            };
            out.push((format!("blocks.{l}.{name}"), p));
            if let Some(bias) = &lin.bias {
                out.push((format!("blocks.{l}.{name}.bias"), vec(bias)));
            }
            if let Some(ad) = &lin.lora {
                out.push((format!("blocks.{l}.{name}.lora"), Payload::Lora(ad)));
            }
        }
    }
    let heads = model.exit_heads.iter().enumerate().map(|(i, h)| (format!("exits.{i}"), h));
    for (prefix, h) in heads.chain([("final".to_string(), &model.final_head)]) {
        out.push((format!("{prefix}.w1"), mat(&h.w1)));
        out.push((format!("{prefix}.b1"), vec(&h.b1)));
        out.push((format!("{prefix}.w2"), mat(&h.w2)));
        out.push((format!("{prefix}.b2"), vec(&h.b2)));
    }
    out
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a model; the output depends only on the model's contents.
pub fn encode(model: &MultiExitModel<f32>) -> Result<Vec<u8>> {
    let header = toml::to_string(&FileHeader {
        mode: model.mode,
        model: model.config.clone(),
    })
    .map_err(|e| Error::Structural(format!("cannot serialize header: {e}")))?;
    let list = tensors(model);

    let mut payloads: Vec<(TensorKind, usize, usize, usize, Vec<u8>)> = Vec::with_capacity(list.len());
    for (_, p) in &list {
        let mut buf = Vec::new();
        let meta = match p {
            Payload::Dense { rows, cols, data } => {
                put_f32s(&mut buf, data);
                (TensorKind::DenseF32, *rows, *cols, 0)
            }
            Payload::Quant(q) => {
                put_f32s(&mut buf, q.scales());
                buf.extend_from_slice(q.packed_codes());
                (TensorKind::of_scheme(q.scheme()), q.shape().0, q.shape().1, q.block_size())
            }
            Payload::Lora(ad) => {
                buf.extend_from_slice(&(ad.rank() as u32).to_le_bytes());
                buf.extend_from_slice(&ad.alpha.to_le_bytes());
                put_f32s(&mut buf, ad.a.data());
                put_f32s(&mut buf, ad.b.data());
                (TensorKind::LoraPair, ad.d_out(), ad.d_in(), 0)
            }
        };
        payloads.push((meta.0, meta.1, meta.2, meta.3, buf));
    }

    let dir_len: usize = list.iter().map(|(n, _)| 2 + n.len() + 1 + 4 * 3 + 8 * 2).sum();
    let mut offset = (4 + 2 + 4 + header.len() + 4 + dir_len) as u64;
    let mut out = Vec::with_capacity(offset as usize + payloads.iter().map(|p| p.4.len()).sum::<usize>() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for ((name, _), (kind, rows, cols, block, buf)) in list.iter().zip(&payloads) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(*kind as u8);
        out.extend_from_slice(&(*rows as u32).to_le_bytes());
        out.extend_from_slice(&(*cols as u32).to_le_bytes());
        out.extend_from_slice(&(*block as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
        offset += buf.len() as u64;
    }
    for p in &payloads {
        out.extend_from_slice(&p.4);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| data("weight file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

/// Validates magic, version and checksum and returns the header and
/// directory.
pub fn read_directory(bytes: &[u8]) -> Result<(FileHeader, Vec<TensorEntry>)> {
    if bytes.len() < 4 + 2 + 4 + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(data("not a weight file (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(data("weight file checksum mismatch"));
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(data(format!("unsupported weight file version {version}")));
    }
    let header_len = c.u32()? as usize;
    let header = std::str::from_utf8(c.take(header_len)?).map_err(|_| data("header is not UTF-8"))?;
    let header: FileHeader = toml::from_str(header).map_err(|e| data(format!("bad header: {e}")))?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| data("tensor name is not UTF-8"))?;
        let entry = TensorEntry {
            name,
            kind: TensorKind::from_u8(c.u8()?)?,
            rows: c.u32()? as usize,
            cols: c.u32()? as usize,
            block_size: c.u32()? as usize,
            offset: c.u64()?,
            length: c.u64()?,
        };
        let end = entry.offset.checked_add(entry.length);
        if end.is_none_or(|e| e > body.len() as u64) {
            return Err(data(format!("payload of {} lies outside the file", entry.name)));
        }
        entries.push(entry);
    }
    Ok((header, entries))
}

/// Raw payload bytes of every quantized base tensor, by name.
pub fn base_payloads(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    let (_, entries) = read_directory(bytes)?;
    Ok(entries
        .iter()
        .filter(|e| e.kind.scheme().is_some())
        .map(|e| (e.name.clone(), bytes[e.offset as usize..(e.offset + e.length) as usize].to_vec()))
        .collect())
}

struct Store<'a> {
    bytes: &'a [u8],
    entries: BTreeMap<String, TensorEntry>,
}

impl Store<'_> {
    fn entry(&mut self, name: &str) -> Result<TensorEntry> {
        self.entries
            .remove(name)
            .ok_or_else(|| data(format!("missing tensor {name}")))
    }

    fn payload(&self, e: &TensorEntry) -> &[u8] {
        &self.bytes[e.offset as usize..(e.offset + e.length) as usize]
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let e = self.entry(name)?;
        if e.kind != TensorKind::DenseF32 || (e.rows, e.cols) != (rows, cols) || e.length != (rows * cols * 4) as u64 {
            return Err(data(format!("tensor {name} is not a dense {rows}x{cols} tensor")));
        }
        Matrix::new(rows, cols, f32s(self.payload(&e)))
    }

    fn vector(&mut self, name: &str, n: usize) -> Result<Vec<f32>> {
        Ok(self.dense(name, 1, n)?.into_data())
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams<f32>> {
        Ok(LayerNormParams {
            gain: self.vector(&format!("{prefix}.gain"), d)?,
            bias: self.vector(&format!("{prefix}.bias"), d)?,
        })
    }

    fn linear(&mut self, name: &str, d_out: usize, d_in: usize, bias: bool) -> Result<Linear<f32>> {
        let e = self.entry(name)?;
        if (e.rows, e.cols) != (d_out, d_in) {
            return Err(data(format!("tensor {name} has shape {}x{}, expected {d_out}x{d_in}", e.rows, e.cols)));
        }
        let weight = match e.kind.scheme() {
            None if e.kind == TensorKind::DenseF32 => {
                self.entries.insert(name.to_string(), e);
                Weight::Dense(self.dense(name, d_out, d_in)?)
            }
            None => return Err(data(format!("tensor {name} has kind {:?}", e.kind))),
            Some(scheme) => {
                let n_scales = (d_out * d_in).div_ceil(e.block_size.max(1));
                let p = self.payload(&e);
                if p.len() < n_scales * 4 {
                    return Err(data(format!("tensor {name} payload too short")));
                }
                let (scales, codes) = p.split_at(n_scales * 4);
                Weight::Quantized(QuantizedTensor::from_parts(d_out, d_in, e.block_size, scheme, f32s(scales), codes.to_vec())?)
            }
        };
        let bias = if bias {
            Some(self.vector(&format!("{name}.bias"), d_out)?)
        } else {
            None
        };
        let lora_name = format!("{name}.lora");
        let lora = match self.entries.remove(&lora_name) {
            None => None,
            Some(e) => {
                if e.kind != TensorKind::LoraPair || (e.rows, e.cols) != (d_out, d_in) {
                    return Err(data(format!("tensor {lora_name} is not an adapter for {d_out}x{d_in}")));
                }
                let mut c = Cursor {
                    bytes: self.payload(&e),
                    pos: 0,
                };
                let rank = c.u32()? as usize;
                let alpha = f32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
                let a = Matrix::new(rank, d_in, f32s(c.take(rank * d_in * 4)?))?;
                let b = Matrix::new(d_out, rank, f32s(c.take(d_out * rank * 4)?))?;
                if c.pos != c.bytes.len() {
                    return Err(data(format!("trailing bytes in {lora_name}")));
                }
                Some(LoraAdapter::new(a, b, alpha)?)
            }
        };
        Ok(Linear { weight, bias, lora })
    }

    fn head(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<ExitHead<f32>> {
        Ok(ExitHead {
            w1: self.dense(&format!("{prefix}.w1"), cfg.exit_hidden, cfg.d_model)?,
            b1: self.vector(&format!("{prefix}.b1"), cfg.exit_hidden)?,
            w2: self.dense(&format!("{prefix}.w2"), cfg.action_count, cfg.exit_hidden)?,
            b2: self.vector(&format!("{prefix}.b2"), cfg.action_count)?,
        })
    }
}

/// Parses and fully validates a weight file.
pub fn decode(bytes: &[u8]) -> Result<MultiExitModel<f32>> {
    let (header, list) = read_directory(bytes)?;
    let cfg = header.model;
    cfg.validate().map_err(|e| data(format!("stored model config is invalid: {e}")))?;
    let mut entries = BTreeMap::new();
    for e in list {
        let name = e.name.clone();
        if entries.insert(name.clone(), e).is_some() {
            return Err(data(format!("duplicate tensor {name}")));
        }
    }
    let mut s = Store { bytes, entries };
    let (d, k) = (cfg.d_model, cfg.window);
    let embedder = Embedder {
        row_proj: s.dense("embed.row_proj", d, k)?,
        row_bias: s.vector("embed.row_bias", d)?,
        compass_proj: s.dense("embed.compass_proj", d, crate::model::COMPASS_FEATURES)?,
        compass_bias: s.vector("embed.compass_bias", d)?,
        positions: s.dense("embed.positions", cfg.seq_len(), d)?,
        readout: s.vector("embed.readout", d)?,
    };
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = format!("blocks.{l}");
        blocks.push(Block {
            ln1: s.norm(&format!("{p}.ln1"), d)?,
            ln2: s.norm(&format!("{p}.ln2"), d)?,
            wq: s.linear(&format!("{p}.wq"), d, d, false)?,
            wk: s.linear(&format!("{p}.wk"), d, d, false)?,
            wv: s.linear(&format!("{p}.wv"), d, d, false)?,
            wo: s.linear(&format!("{p}.wo"), d, d, false)?,
            ff1: s.linear(&format!("{p}.ff1"), cfg.d_ff, d, true)?,
            ff2: s.linear(&format!("{p}.ff2"), d, cfg.d_ff, true)?,
        });
    }
    let exit_heads = (0..cfg.exit_layers.len())
        .map(|i| s.head(&format!("exits.{i}"), &cfg))
        .collect::<Result<Vec<_>>>()?;
    let final_head = s.head("final", &cfg)?;
    if let Some(name) = s.entries.keys().next() {
        return Err(data(format!("unexpected tensor {name}")));
    }
    let model = MultiExitModel {
        config: cfg,
        mode: header.mode,
        embedder,
        blocks,
        exit_heads,
        final_head,
    };
    let compressed = model
        .blocks
        .iter()
        .flat_map(|b| b.linears())
        .any(|(_, l)| l.lora.is_some() || matches!(l.weight, Weight::Quantized(_)));
    if model.mode == ModelMode::FullPrecision && compressed {
        return Err(data("full-precision file contains quantized tensors or adapters"));
    }
    Ok(model)
}

pub fn write_model(path: &Path, model: &MultiExitModel<f32>) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<MultiExitModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

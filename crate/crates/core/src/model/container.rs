//! `CQM1` weight container.
//!
//! ```text
//! "CQM1" | u32 version | u64 len | config text (sorted `key = value` lines)
//! u32 count | count × (u32 len | name | u8 dtype | u32 ndim | ndim × u64 | payload)
//! ```
//!
//! All integers are little-endian. Tensors appear in sorted-name order.
//! dtype 0 is `f32`, 1 is packed nibbles (low nibble first), 2 is `i8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DecoderLayerWeights, ExpertWeights, Linear, ModelConfig, ModelWeights, Site, SiteId, WeightRepr};
use crate::accf::Codebook;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{pack_nibbles, unpack_nibbles, RtnWeights};

const MAGIC: &[u8; 4] = b"CQM1";
const VERSION: u32 = 1;
const RTN_BITS_KEY: &str = "format.rtn_bits";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    Nibble = 1,
    I8 = 2,
}

impl DType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DType::F32),
            1 => Some(DType::Nibble),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    fn payload_len(self, elems: usize) -> usize {
        match self {
            DType::F32 => elems * 4,
            DType::Nibble => elems.div_ceil(2),
            DType::I8 => elems,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::Nibble => "u4",
            DType::I8 => "i8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
}

/// Header contents of a container, without materializing a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorInfo>,
}

struct RawTensor {
    dtype: DType,
    dims: Vec<u64>,
    payload: Vec<u8>,
}

impl RawTensor {
    fn f32s(values: impl IntoIterator<Item = f64>, dims: Vec<u64>) -> Self {
        let payload = values
            .into_iter()
            .flat_map(|v| (v as f32).to_le_bytes())
            .collect();
        Self {
            dtype: DType::F32,
            dims,
            payload,
        }
    }
}

fn matrix_tensor(m: &Matrix) -> RawTensor {
    RawTensor::f32s(m.as_slice().iter().copied(), vec![m.rows() as u64, m.cols() as u64])
}

fn encode(w: &ModelWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let mut config: BTreeMap<String, String> = w.config.to_pairs().into_iter().collect();
    for (k, v) in &w.metadata {
        if k.is_empty() || k.contains(['=', '\n']) || k.trim() != k || v.contains('\n') || v.trim() != v {
            return Err(Error::Format(format!("metadata entry `{k}` cannot be stored")));
        }
        config.insert(format!("meta.{k}"), v.clone());
    }

    let mut tensors: BTreeMap<String, RawTensor> = BTreeMap::new();
    let mut rtn_bits = None;
    for (l, layer) in w.layers.iter().enumerate() {
        let d = layer.attn_norm.len() as u64;
        tensors.insert(format!("layer{l}.attn_norm"), RawTensor::f32s(layer.attn_norm.iter().copied(), vec![d]));
        tensors.insert(format!("layer{l}.moe_norm"), RawTensor::f32s(layer.moe_norm.iter().copied(), vec![d]));
    }
    for id in w.site_ids() {
        let base = id.tensor_name();
        let lin = w.get(id);
        match &lin.repr {
            WeightRepr::Dense => {
                tensors.insert(base, matrix_tensor(&lin.weight));
            }
            WeightRepr::Clustered(cb) => {
                let dims = vec![cb.d_out as u64, cb.n_groups() as u64, cb.k as u64];
                tensors.insert(format!("{base}.centroids"), RawTensor::f32s(cb.centroids.iter().copied(), dims));
                tensors.insert(
                    format!("{base}.ids"),
                    RawTensor {
                        dtype: DType::Nibble,
                        dims: vec![cb.d_out as u64, cb.d_in as u64],
                        payload: pack_nibbles(&cb.ids)?,
                    },
                );
            }
            WeightRepr::Rtn(q) => {
                match rtn_bits {
                    None => rtn_bits = Some(q.bits),
                    Some(b) if b != q.bits => {
                        return Err(Error::Format("RTN sites with mixed bit widths".into()))
                    }
                    _ => {}
                }
                let dims = vec![q.d_out as u64, q.n_groups() as u64];
                tensors.insert(format!("{base}.scales"), RawTensor::f32s(q.scales.iter().copied(), dims));
                tensors.insert(
                    format!("{base}.q"),
                    RawTensor {
                        dtype: DType::I8,
                        dims: vec![q.d_out as u64, q.d_in as u64],
                        payload: q.q.iter().map(|&v| v as u8).collect(),
                    },
                );
            }
        }
    }
    if let Some(b) = rtn_bits {
        config.insert(RTN_BITS_KEY.to_string(), b.to_string());
    }
    if let Some(r) = &w.input_rotation {
        tensors.insert("input_rotation".to_string(), matrix_tensor(r));
    }

    let text: String = config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype as u8);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8], with_payload: bool) -> Result<(Vec<(String, String)>, Vec<(String, RawTensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, not a CQM1 container".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let text_len = r.u64("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config text")?)
        .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let mut config = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("malformed config line `{line}`")))?;
        config.push((k.to_string(), v.to_string()));
    }

    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let what = format!("header of tensor {i} of {count}");
        let name_len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype_raw = r.u8(&format!("dtype of `{name}`"))?;
        let dtype = DType::from_u8(dtype_raw)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has unknown dtype {dtype_raw}")))?;
        let ndim = r.u32(&format!("rank of `{name}`"))?;
        let dims = (0..ndim)
            .map(|_| r.u64(&format!("dims of `{name}`")))
            .collect::<Result<Vec<_>>>()?;
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` dims overflow")))?;
        let len = dtype.payload_len(elems);
        if r.buf.len() - r.pos < len {
            return Err(Error::Format(format!(
                "tensor `{name}` is declared but its payload is missing ({} of {len} bytes)",
                r.buf.len() - r.pos
            )));
        }
        let payload = r.take(len, &name)?;
        if let Some((prev, _)) = tensors.last() {
            if *prev >= name {
                return Err(Error::Format(format!("tensor `{name}` out of sorted order")));
            }
        }
        tensors.push((
            name,
            RawTensor {
                dtype,
                dims,
                payload: if with_payload { payload.to_vec() } else { Vec::new() },
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok((config, tensors))
}

struct Tensors(BTreeMap<String, RawTensor>);

impl Tensors {
    fn take(&mut self, name: &str, dtype: DType, dims: &[usize]) -> Result<RawTensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        let want: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
        if t.dtype != dtype || t.dims != want {
            return Err(Error::Format(format!(
                "tensor `{name}` is {} {:?}, expected {} {want:?}",
                t.dtype.name(),
                t.dims,
                dtype.name()
            )));
        }
        Ok(t)
    }

    fn f32_values(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let t = self.take(name, DType::F32, dims)?;
        let vals: Vec<f64> = t
            .payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor `{name}` holds non-finite values")));
        }
        Ok(vals)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.f32_values(name, &[rows, cols])?)
    }

    /// Dense, clustered or RTN, whichever tensors exist under `base`.
    fn linear(&mut self, base: &str, d_in: usize, d_out: usize, rtn_bits: Option<u8>) -> Result<Linear> {
        let cname = format!("{base}.centroids");
        let sname = format!("{base}.scales");
        if let Some(c) = self.0.get(&cname) {
            if c.dims.len() != 3 {
                return Err(Error::Format(format!("tensor `{cname}` must have rank 3")));
            }
            let (ng, k) = (c.dims[1] as usize, c.dims[2] as usize);
            if ng == 0 || d_in % ng != 0 || k == 0 || k > 16 {
                return Err(Error::Format(format!("tensor `{cname}` has invalid dims {:?}", c.dims)));
            }
            let centroids = self.f32_values(&cname, &[d_out, ng, k])?;
            let iname = format!("{base}.ids");
            let raw = self.take(&iname, DType::Nibble, &[d_out, d_in])?;
            let ids = unpack_nibbles(&raw.payload, d_out * d_in)?;
            if ids.iter().any(|&v| usize::from(v) >= k) {
                return Err(Error::Format(format!("tensor `{iname}` has ids beyond {k} centroids")));
            }
            let cb = Codebook {
                d_in,
                d_out,
                group: d_in / ng,
                k,
                centroids,
                ids,
            };
            Ok(Linear::clustered(cb))
        } else if let Some(s) = self.0.get(&sname) {
            let ng = s.dims.get(1).copied().unwrap_or(0) as usize;
            if ng == 0 || d_in % ng != 0 {
                return Err(Error::Format(format!("tensor `{sname}` has invalid dims {:?}", s.dims)));
            }
            let bits = rtn_bits.ok_or_else(|| Error::Format(format!("`{RTN_BITS_KEY}` missing for `{base}`")))?;
            let scales = self.f32_values(&sname, &[d_out, ng])?;
            let qname = format!("{base}.q");
            let raw = self.take(&qname, DType::I8, &[d_out, d_in])?;
            let q = RtnWeights {
                d_in,
                d_out,
                bits,
                group: d_in / ng,
                q: raw.payload.iter().map(|&b| b as i8).collect(),
                scales,
            };
            Ok(Linear::rtn(q))
        } else {
            Ok(Linear::dense(self.matrix(base, d_in, d_out)?))
        }
    }
}

fn build(config: Vec<(String, String)>, raw: Vec<(String, RawTensor)>) -> Result<ModelWeights> {
    let mut cfg = ModelConfig::default();
    let mut metadata = BTreeMap::new();
    let mut rtn_bits = None;
    for (k, v) in &config {
        if let Some(m) = k.strip_prefix("meta.") {
            metadata.insert(m.to_string(), v.clone());
        } else if k == RTN_BITS_KEY {
            rtn_bits = Some(v.parse().map_err(|_| Error::Format(format!("bad {RTN_BITS_KEY} `{v}`")))?);
        } else if !cfg.set(k, v).map_err(|e| Error::Format(e.to_string()))? {
            return Err(Error::Format(format!("unknown config key `{k}`")));
        }
    }
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;

    let mut t = Tensors(raw.into_iter().collect());
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let attn_norm = t.f32_values(&format!("layer{l}.attn_norm"), &[d])?;
        let moe_norm = t.f32_values(&format!("layer{l}.moe_norm"), &[d])?;
        let mut lin = |id: SiteId, d_in: usize, d_out: usize| t.linear(&id.tensor_name(), d_in, d_out, rtn_bits);
        let wq = lin(SiteId::attn(l, Site::Q), d, d)?;
        let wk = lin(SiteId::attn(l, Site::K), d, d)?;
        let wv = lin(SiteId::attn(l, Site::V), d, d)?;
        let wo = lin(SiteId::attn(l, Site::Out), d, d)?;
        let router = lin(SiteId::attn(l, Site::Router), d, cfg.n_experts)?;
        let mut experts = Vec::with_capacity(cfg.n_experts);
        for e in 0..cfg.n_experts {
            experts.push(ExpertWeights {
                gate: lin(SiteId::expert(l, e, Site::Gate), d, cfg.d_ff)?,
                up: lin(SiteId::expert(l, e, Site::Up), d, cfg.d_ff)?,
                down: lin(SiteId::expert(l, e, Site::Down), cfg.d_ff, d)?,
            });
        }
        layers.push(DecoderLayerWeights {
            attn_norm,
            moe_norm,
            wq,
            wk,
            wv,
            wo,
            router,
            experts,
        });
    }
    let input_rotation = if t.0.contains_key("input_rotation") {
        Some(t.matrix("input_rotation", d, d)?)
    } else {
        None
    };
    if let Some(extra) = t.0.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }
    let w = ModelWeights {
        config: cfg,
        layers,
        metadata,
        input_rotation,
    };
    w.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(w)
}

/// Serializes `w`. Weights are stored as `f32`, so values that are not
/// exactly representable are rounded.
pub fn model_to_bytes(w: &ModelWeights) -> Result<Vec<u8>> {
    encode(w)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let (config, tensors) = decode(bytes, true)?;
    build(config, tensors)
}

pub fn save_model(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(w)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    model_from_bytes(&fs::read(path)?)
}

/// Reads the config text and tensor headers of a container.
pub fn inspect(bytes: &[u8]) -> Result<Manifest> {
    let (config, tensors) = decode(bytes, false)?;
    Ok(Manifest {
        config,
        tensors: tensors
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                dtype: t.dtype,
                dims: t.dims,
            })
            .collect(),
    })
}

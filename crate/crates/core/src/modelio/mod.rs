//! Model container, MNIST IDX ingestion and magnitude pruning.
//!
//! The container is a little-endian byte layout closed by a CRC32 of
//! everything before it; see `docs/model-format.md` for the field table.

mod idx;
mod pruning;

pub use idx::{load_idx, Dataset};
pub use pruning::apply_magnitude_pruning;

use std::path::Path;

use thiserror::Error;

use crate::kernels::{
    ConvLayer, Layer, LayerCalibration, LayerKind, LayerSpec, LinearLayer, ModelGraph, PruneConfig,
};
use crate::numerics::QFormat;
use crate::tensor::{Shape, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"UNIT";
pub const FORMAT_VERSION: u16 = 1;
/// `fraction_bits` value marking a float payload.
pub const FLOAT_SENTINEL: u8 = 0xFF;

const FLAG_PRUNE: u8 = 1;
const FLAG_BIAS: u8 = 2;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number")]
    BadMagic,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("inconsistent model: {0}")]
    ShapeInconsistent(String),
    #[error("{images} images but {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn inconsistent(msg: impl Into<String>) -> ModelIoError {
    ModelIoError::ShapeInconsistent(msg.into())
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<(), ModelIoError> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<ModelGraph, ModelIoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn extents(&mut self, dims: &[usize]) -> Result<(), ModelIoError> {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(u32::try_from(d).map_err(|_| inconsistent("extent exceeds u32"))?);
        }
        Ok(())
    }

    fn payload(&mut self, t: &Tensor, fmt: Option<QFormat>) -> Result<(), ModelIoError> {
        match (t.data(), fmt) {
            (TensorData::F32(v), None) => v.iter().for_each(|&x| self.f32(x)),
            (TensorData::Fixed { raw, format }, Some(f)) if *format == f => {
                if f.word_bits() == 16 {
                    for &r in raw {
                        let r = i16::try_from(r).map_err(|_| inconsistent("raw value exceeds word"))?;
                        self.buf.extend_from_slice(&r.to_le_bytes());
                    }
                } else {
                    raw.iter().for_each(|&r| self.buf.extend_from_slice(&r.to_le_bytes()));
                }
            }
            _ => return Err(inconsistent("tensor does not match the model number format")),
        }
        Ok(())
    }
}

/// Serialize a model. Fails on graphs that do not validate.
pub fn to_bytes(model: &ModelGraph) -> Result<Vec<u8>, ModelIoError> {
    model
        .validate()
        .map_err(|e| inconsistent(e.to_string()))?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    match model.format {
        Some(f) => {
            w.u8(f.integer_bits());
            w.u8(f.fraction_bits());
        }
        None => {
            w.u8(0);
            w.u8(FLOAT_SENTINEL);
        }
    }
    w.f32(model.input_max_abs);
    w.extents(model.input_shape.dims())?;
    w.u32(model.layers.len() as u32);
    for spec in &model.layers {
        let layer = &spec.layer;
        w.u8(layer.kind() as u8);
        match layer {
            Layer::Conv2d(ConvLayer { weights, .. }) | Layer::Linear(LinearLayer { weights, .. }) => {
                w.extents(weights.shape().dims())?
            }
            Layer::MaxPool { size } => w.extents(&[*size])?,
            Layer::Relu | Layer::FatRelu { .. } => w.extents(&[])?,
        }
        w.f32(layer.weights().map_or(1.0, |t| t.scale()));
        w.f32(spec.calib.act_max_abs);
        w.f32(match layer {
            Layer::FatRelu { threshold } => *threshold,
            _ => 0.0,
        });
        let prune = layer.prune().copied().unwrap_or(PruneConfig {
            enabled: false,
            groups: 1,
        });
        let mut flags = 0;
        if prune.enabled {
            flags |= FLAG_PRUNE;
        }
        if layer.bias().is_some() {
            flags |= FLAG_BIAS;
        }
        w.u8(flags);
        w.u32(prune.groups as u32);
        w.u32(spec.calib.thresholds.len() as u32);
        spec.calib.thresholds.iter().for_each(|&t| w.f32(t));
        w.f32(spec.calib.percentile);
        w.u32(spec.calib.sample_count);
        if let Some(t) = layer.weights() {
            w.payload(t, model.format)?;
        }
        if let Some(b) = layer.bias() {
            w.f32(b.scale());
            w.payload(b, model.format)?;
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.buf.len() - self.pos < n {
            return Err(inconsistent("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, ModelIoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn extents(&mut self) -> Result<Vec<usize>, ModelIoError> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn scale(&mut self) -> Result<f32, ModelIoError> {
        let s = self.f32()?;
        if !(s.is_finite() && s > 0.0) {
            return Err(inconsistent("scale must be finite and positive"));
        }
        Ok(s)
    }

    fn tensor(&mut self, dims: &[usize], scale: f32, fmt: Option<QFormat>) -> Result<Tensor, ModelIoError> {
        let shape = Shape::new(dims.to_vec()).map_err(|e| inconsistent(e.to_string()))?;
        let n = shape.len();
        let width = match fmt {
            Some(f) if f.word_bits() == 16 => 2,
            _ => 4,
        };
        let bytes = self.take(n.checked_mul(width).ok_or_else(|| inconsistent("blob too large"))?)?;
        let t = match fmt {
            None => Tensor::from_f32(
                shape,
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Some(f) => {
                let raw: Vec<i32> = if width == 2 {
                    bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect()
                } else {
                    bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()
                };
                if raw.iter().any(|&r| r < f.raw_min() || r > f.raw_max()) {
                    return Err(inconsistent("raw value outside the number format"));
                }
                Tensor::from_raw(shape, raw, f, scale)
            }
        };
        t.map_err(|e| inconsistent(e.to_string()))
    }
}

/// Parse a model. Checks magic, version and checksum before anything else,
/// so a corrupted or truncated file never yields a partial model.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph, ModelIoError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(inconsistent("file too short"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(ModelIoError::VersionUnsupported(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelIoError::CrcMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 6 };
    let (ib, fb) = (r.u8()?, r.u8()?);
    let format = if fb == FLOAT_SENTINEL {
        None
    } else {
        Some(QFormat::new(ib, fb).map_err(|e| inconsistent(e.to_string()))?)
    };
    let input_max_abs = r.f32()?;
    let input_shape = Shape::new(r.extents()?).map_err(|e| inconsistent(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let kind = LayerKind::from_tag(r.u8()?)
            .ok_or_else(|| inconsistent(format!("layer {i}: unknown kind")))?;
        let dims = r.extents()?;
        let w_scale = r.scale()?;
        let act_max_abs = r.f32()?;
        let fat_threshold = r.f32()?;
        let flags = r.u8()?;
        let groups = r.u32()? as usize;
        let n_thresholds = r.u32()? as usize;
        if n_thresholds > body.len() / 4 {
            return Err(inconsistent(format!("layer {i}: threshold count")));
        }
        let thresholds = (0..n_thresholds).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        let calib = LayerCalibration {
            thresholds,
            percentile: r.f32()?,
            sample_count: r.u32()?,
            act_max_abs,
        };
        let prune = PruneConfig {
            enabled: flags & FLAG_PRUNE != 0,
            groups,
        };
        let expect_rank = match kind {
            LayerKind::Conv2d => 4,
            LayerKind::Linear => 2,
            LayerKind::MaxPool => 1,
            LayerKind::Relu | LayerKind::FatRelu => 0,
        };
        if dims.len() != expect_rank {
            return Err(inconsistent(format!("layer {i}: expected rank {expect_rank}")));
        }
        let layer = match kind {
            LayerKind::Conv2d | LayerKind::Linear => {
                let weights = r.tensor(&dims, w_scale, format)?;
                let bias = if flags & FLAG_BIAS != 0 {
                    let out = if kind == LayerKind::Conv2d { dims[0] } else { dims[1] };
                    let s = r.scale()?;
                    Some(r.tensor(&[out], s, format)?)
                } else {
                    None
                };
                if kind == LayerKind::Conv2d {
                    Layer::Conv2d(ConvLayer { weights, bias, prune })
                } else {
                    Layer::Linear(LinearLayer { weights, bias, prune })
                }
            }
            LayerKind::MaxPool => Layer::MaxPool { size: dims[0] },
            LayerKind::Relu => Layer::Relu,
            LayerKind::FatRelu => Layer::FatRelu {
                threshold: fat_threshold,
            },
        };
        if !calib.thresholds.is_empty() && calib.thresholds.len() != groups {
            return Err(inconsistent(format!(
                "layer {i}: {} thresholds for {groups} groups",
                calib.thresholds.len()
            )));
        }
        layers.push(LayerSpec { layer, calib });
    }
    if r.pos != body.len() {
        return Err(inconsistent("trailing bytes after the last layer"));
    }
    let model = ModelGraph {
        format,
        input_shape,
        input_max_abs,
        layers,
    };
    model.validate().map_err(|e| inconsistent(e.to_string()))?;
    Ok(model)
}

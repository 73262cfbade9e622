//! IDX (MNIST) reader: big-endian header, unsigned byte payload.

use std::ops::Range;
use std::path::Path;

use super::{io_err, ModelIoError};
use crate::tensor::{Shape, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]` and their labels, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per-sample shape, `1 × rows × cols`.
    pub sample_shape: Shape,
    pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(sample_shape: Shape, pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self, ModelIoError> {
        if pixels.len() != sample_shape.len() * labels.len() {
            return Err(ModelIoError::LengthMismatch {
                images: pixels.len() / sample_shape.len().max(1),
                labels: labels.len(),
            });
        }
        Ok(Self {
            sample_shape,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::from_f32(self.sample_shape.clone(), self.image(i).to_vec()).unwrap()
    }

    pub fn images(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.pixels.chunks_exact(self.sample_shape.len())
    }

    pub fn subset(&self, range: Range<usize>) -> Dataset {
        let n = self.sample_shape.len();
        Dataset {
            sample_shape: self.sample_shape.clone(),
            pixels: self.pixels[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// The first `n` samples (all if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        self.subset(0..n.min(self.len()))
    }
}

fn header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8]), ModelIoError> {
    if bytes.len() < 4 || u32::from_be_bytes(bytes[..4].try_into().unwrap()) != magic {
        return Err(ModelIoError::BadMagic);
    }
    let rank = (magic & 0xFF) as usize;
    let end = 4 + 4 * rank;
    if bytes.len() < end {
        return Err(ModelIoError::ShapeInconsistent("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &bytes[end..];
    if dims.iter().product::<usize>() != payload.len() {
        return Err(ModelIoError::ShapeInconsistent(format!(
            "IDX dimensions {dims:?} do not match {} payload bytes",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Parse in-memory IDX image and label files.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, ModelIoError> {
    let (idims, pixels) = header(images, IMAGES_MAGIC)?;
    let (ldims, labels) = header(labels, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(ModelIoError::LengthMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let shape = Shape::new(vec![1, idims[1], idims[2]])
        .map_err(|e| ModelIoError::ShapeInconsistent(e.to_string()))?;
    Dataset::new(
        shape,
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels.to_vec(),
    )
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, ModelIoError> {
    let i = std::fs::read(images).map_err(io_err(images))?;
    let l = std::fs::read(labels).map_err(io_err(labels))?;
    parse_idx(&i, &l)
}

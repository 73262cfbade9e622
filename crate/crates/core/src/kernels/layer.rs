use crate::numerics::QFormat;
use crate::tensor::{symmetric_scale, Shape, Tensor};

use super::KernelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    Conv2d = 0,
    Linear = 1,
    MaxPool = 2,
    Relu = 3,
    FatRelu = 4,
}

impl LayerKind {
    pub fn from_tag(tag: u8) -> Option<LayerKind> {
        Some(match tag {
            0 => LayerKind::Conv2d,
            1 => LayerKind::Linear,
            2 => LayerKind::MaxPool,
            3 => LayerKind::Relu,
            4 => LayerKind::FatRelu,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::FatRelu => "fatrelu",
        }
    }
}

/// Per-layer pruning switch and group count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneConfig {
    pub enabled: bool,
    /// Contiguous threshold groups over output channels (conv) or input rows
    /// (linear).
    pub groups: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            groups: 1,
        }
    }
}

/// Convolution, stride 1, no padding. Weights are `out × in × kH × kW`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub prune: PruneConfig,
}

impl ConvLayer {
    /// `(out_ch, in_ch, kh, kw)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.weights.shape().dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// Fully connected layer. Weights are `m inputs × n outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub prune: PruneConfig,
}

impl LinearLayer {
    /// `(m, n)`.
    pub fn dims(&self) -> (usize, usize) {
        let d = self.weights.shape().dims();
        (d[0], d[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(ConvLayer),
    Linear(LinearLayer),
    MaxPool { size: usize },
    Relu,
    FatRelu { threshold: f32 },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Relu => LayerKind::Relu,
            Layer::FatRelu { .. } => LayerKind::FatRelu,
        }
    }

    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weights),
            Layer::Linear(l) => Some(&l.weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.weights),
            Layer::Linear(l) => Some(&mut l.weights),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => c.bias.as_ref(),
            Layer::Linear(l) => l.bias.as_ref(),
            _ => None,
        }
    }

    pub fn prune(&self) -> Option<&PruneConfig> {
        match self {
            Layer::Conv2d(c) => Some(&c.prune),
            Layer::Linear(l) => Some(&l.prune),
            _ => None,
        }
    }

    pub fn prune_mut(&mut self) -> Option<&mut PruneConfig> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.prune),
            Layer::Linear(l) => Some(&mut l.prune),
            _ => None,
        }
    }

    /// Size of the dimension thresholds are grouped over.
    pub fn control_dim(&self) -> Option<(usize, &'static str)> {
        match self {
            Layer::Conv2d(c) => Some((c.dims().0, "output channels")),
            Layer::Linear(l) => Some((l.dims().0, "input rows")),
            _ => None,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape, KernelError> {
        let d = input.dims();
        let mismatch = |msg: String| KernelError::ShapeMismatch(msg);
        match self {
            Layer::Conv2d(c) => {
                let (oc, ic, kh, kw) = c.dims();
                if d.len() != 3 || d[0] != ic || d[1] < kh || d[2] < kw {
                    return Err(mismatch(format!(
                        "conv {oc}×{ic}×{kh}×{kw} cannot take input {input}"
                    )));
                }
                Ok(Shape::new(vec![oc, d[1] - kh + 1, d[2] - kw + 1])?)
            }
            Layer::Linear(l) => {
                let (m, n) = l.dims();
                if input.len() != m {
                    return Err(mismatch(format!(
                        "linear {m}×{n} cannot take input {input}"
                    )));
                }
                Ok(Shape::new(vec![n])?)
            }
            Layer::MaxPool { size } => {
                if d.len() != 3 || *size == 0 || !d[1].is_multiple_of(*size) || !d[2].is_multiple_of(*size) {
                    return Err(mismatch(format!(
                        "{size}×{size} pooling cannot tile input {input}"
                    )));
                }
                Ok(Shape::new(vec![d[0], d[1] / size, d[2] / size])?)
            }
            Layer::Relu | Layer::FatRelu { .. } => Ok(input.clone()),
        }
    }

    /// Dense MAC count for a given input shape.
    pub fn dense_macs(&self, input: &Shape) -> Result<u64, KernelError> {
        let out = self.output_shape(input)?;
        Ok(match self {
            Layer::Conv2d(c) => {
                let (oc, ic, kh, kw) = c.dims();
                let o = out.dims();
                (o[1] * o[2] * oc * ic * kh * kw) as u64
            }
            Layer::Linear(l) => {
                let (m, n) = l.dims();
                (m * n) as u64
            }
            _ => 0,
        })
    }
}

/// Calibration results attached to a layer: the per-group pruning threshold
/// `T` (real units), the percentile and sample count it came from, and the
/// largest output magnitude seen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCalibration {
    pub thresholds: Vec<f32>,
    pub percentile: f32,
    pub sample_count: u32,
    pub act_max_abs: f32,
}

impl LayerCalibration {
    pub fn is_calibrated(&self) -> bool {
        !self.thresholds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub layer: Layer,
    pub calib: LayerCalibration,
}

impl From<Layer> for LayerSpec {
    fn from(layer: Layer) -> Self {
        Self {
            layer,
            calib: LayerCalibration::default(),
        }
    }
}

/// An ordered stack of layers over a `C × H × W` input.
///
/// `format` is `None` for float models. `input_max_abs` fixes the input
/// quantization scale of fixed models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub format: Option<QFormat>,
    pub input_shape: Shape,
    pub input_max_abs: f32,
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    pub fn new(input_shape: Shape, layers: Vec<LayerSpec>) -> Self {
        Self {
            format: None,
            input_shape,
            input_max_abs: 1.0,
            layers,
        }
    }

    /// Input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, KernelError> {
        let mut shapes = vec![self.input_shape.clone()];
        for spec in &self.layers {
            let next = spec.layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape, KernelError> {
        Ok(self.shapes()?.pop().unwrap())
    }

    /// Analytic dense MAC count per layer.
    pub fn dense_macs(&self) -> Result<Vec<u64>, KernelError> {
        let shapes = self.shapes()?;
        self.layers
            .iter()
            .zip(&shapes)
            .map(|(s, shape)| s.layer.dense_macs(shape))
            .collect()
    }

    /// Check shape composition, weight formats and group divisibility.
    pub fn validate(&self) -> Result<(), KernelError> {
        self.shapes()?;
        for (i, spec) in self.layers.iter().enumerate() {
            if let Some(w) = spec.layer.weights() {
                if w.format() != self.format {
                    return Err(KernelError::ShapeMismatch(format!(
                        "layer {i} weights do not match the model number format"
                    )));
                }
            }
            if let (Some(p), Some((dim, what))) = (spec.layer.prune(), spec.layer.control_dim()) {
                if p.groups == 0 || dim % p.groups != 0 {
                    return Err(KernelError::BadGroups {
                        layer: i,
                        groups: p.groups,
                        what,
                        dim,
                    });
                }
                if spec.calib.is_calibrated() && spec.calib.thresholds.len() != p.groups {
                    return Err(KernelError::ShapeMismatch(format!(
                        "layer {i} has {} thresholds for {} groups",
                        spec.calib.thresholds.len(),
                        p.groups
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply a group count to every prunable layer.
    /// Leaves the model untouched on error.
    pub fn set_groups(&mut self, groups: usize) -> Result<(), KernelError> {
        for (i, spec) in self.layers.iter().enumerate() {
            if let Some((dim, what)) = spec.layer.control_dim() {
                if groups == 0 || dim % groups != 0 {
                    return Err(KernelError::BadGroups {
                        layer: i,
                        groups,
                        what,
                        dim,
                    });
                }
            }
        }
        for spec in &mut self.layers {
            if let Some(p) = spec.layer.prune_mut() {
                p.groups = groups;
            }
        }
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.layers
            .iter()
            .filter(|s| s.layer.prune().is_some_and(|p| p.enabled))
            .all(|s| s.calib.is_calibrated())
    }

    /// Total number of weights across conv and linear layers.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|s| s.layer.weights())
            .map(Tensor::len)
            .sum()
    }

    /// Input quantization scale under `fmt`.
    pub fn input_scale(&self, fmt: QFormat) -> f32 {
        symmetric_scale(self.input_max_abs, fmt)
    }
}

/// The MNIST network: conv 6×1×5×5, pool 2, conv 16×6×5×5, pool 2,
/// linear 256×10, with ReLU after each convolution.
///
/// Weights are zero; the trainer initializes them.
pub fn mnist_architecture() -> ModelGraph {
    let conv = |oc, ic, k| {
        Layer::Conv2d(ConvLayer {
            weights: zeros(&[oc, ic, k, k]),
            bias: Some(zeros(&[oc])),
            prune: PruneConfig::default(),
        })
    };
    let layers = vec![
        conv(6, 1, 5),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        conv(16, 6, 5),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Linear(LinearLayer {
            weights: zeros(&[256, 10]),
            bias: Some(zeros(&[10])),
            prune: PruneConfig::default(),
        }),
    ];
    ModelGraph::new(
        Shape::new(vec![1, 28, 28]).unwrap(),
        layers.into_iter().map(LayerSpec::from).collect(),
    )
}

fn zeros(dims: &[usize]) -> Tensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let n = shape.len();
    Tensor::from_f32(shape, vec![0.0; n]).unwrap()
}

//! Global unstructured magnitude pruning, the train-time baseline.

use crate::kernels::ModelGraph;
use crate::tensor::TensorData;

/// Zero the `ceil(sparsity · N)` smallest-magnitude weights across every
/// conv and linear weight tensor. Ties go to the lower (layer, flat index).
/// Fixed models are ranked by real magnitude `raw · scale`. Biases are kept.
pub fn apply_magnitude_pruning(model: &ModelGraph, sparsity: f64) -> ModelGraph {
    assert!(
        (0.0..1.0).contains(&sparsity),
        "sparsity must be in [0, 1), got {sparsity}"
    );
    let mut out = model.clone();
    let mut ranked: Vec<(f32, usize, usize)> = Vec::new();
    for (li, spec) in out.layers.iter().enumerate() {
        if let Some(w) = spec.layer.weights() {
            ranked.extend((0..w.len()).map(|i| (w.real_at(i).abs(), li, i)));
        }
    }
    let k = (sparsity * ranked.len() as f64).ceil() as usize;
    if k == 0 {
        return out;
    }
    ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, li, i) in &ranked[..k] {
        let w = out.layers[li].layer.weights_mut().unwrap();
        match w.data() {
            TensorData::F32(_) => w.as_f32_mut().unwrap()[i] = 0.0,
            TensorData::Fixed { .. } => w.as_raw_mut().unwrap()[i] = 0,
        }
    }
    out
}

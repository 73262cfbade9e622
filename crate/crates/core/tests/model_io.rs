use proptest::prelude::*;
use unit_core::calibration::quantize_model;
use unit_core::kernels::*;
use unit_core::modelio::*;
use unit_core::numerics::QFormat;
use unit_core::tensor::{Shape, Tensor};

fn model_from(conv: Vec<f32>, lin: Vec<f32>, bias: bool, groups: usize, t: f32) -> ModelGraph {
    let cw = Tensor::from_f32(Shape::new(vec![2, 1, 2, 2]).unwrap(), conv).unwrap();
    let lw = Tensor::from_f32(Shape::new(vec![8, 3]).unwrap(), lin).unwrap();
    let cb = bias.then(|| Tensor::from_f32(Shape::new(vec![2]).unwrap(), vec![0.25, -0.5]).unwrap());
    let calib = LayerCalibration { thresholds: vec![t; groups], percentile: 20.0, sample_count: 7, act_max_abs: 3.0 };
    let mut m = ModelGraph::new(
        Shape::new(vec![1, 3, 3]).unwrap(),
        vec![
            LayerSpec { layer: Layer::Conv2d(ConvLayer { weights: cw, bias: cb, prune: PruneConfig::default() }), calib: calib.clone() },
            LayerSpec::from(Layer::FatRelu { threshold: 0.125 }),
            LayerSpec { layer: Layer::Linear(LinearLayer { weights: lw, bias: None, prune: PruneConfig::default() }), calib },
        ],
    );
    m.set_groups(groups).unwrap();
    m.input_max_abs = 1.0;
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn round_trip_preserves_models(
        conv in prop::collection::vec(-4f32..4.0, 8),
        lin in prop::collection::vec(-4f32..4.0, 24),
        bias: bool,
        groups in prop::sample::select(vec![1usize, 2]),
        t in 0f32..10.0,
        fmt in prop::sample::select(vec![QFormat::Q8_8, QFormat::new(15, 16).unwrap(), QFormat::new(3, 12).unwrap()]),
    ) {
        let m = model_from(conv, lin, bias, groups, t);
        prop_assert_eq!(&from_bytes(&to_bytes(&m).unwrap()).unwrap(), &m);
        let q = quantize_model(&m, fmt).unwrap();
        prop_assert_eq!(&from_bytes(&to_bytes(&q).unwrap()).unwrap(), &q);
    }

    #[test]
    fn any_flipped_bit_is_rejected(lin in prop::collection::vec(-4f32..4.0, 24), pos: prop::sample::Index, bit in 0u8..8) {
        let m = model_from(vec![1.0; 8], lin, true, 1, 1.0);
        let mut bytes = to_bytes(&m).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(from_bytes(&bytes).is_err());
    }

    /// Exactly `ceil(s·N)` weights are zeroed and none of them is larger
    /// than a survivor.
    #[test]
    fn pruning_takes_the_smallest_weights(
        conv in prop::collection::vec(0.01f32..4.0, 8),
        lin in prop::collection::vec(0.01f32..4.0, 24),
        signs in prop::collection::vec(any::<bool>(), 32),
        s in 0f64..0.99,
    ) {
        let mut all: Vec<f32> = conv.into_iter().chain(lin).collect();
        for (v, &neg) in all.iter_mut().zip(&signs) {
            if neg { *v = -*v; }
        }
        let m = model_from(all[..8].to_vec(), all[8..].to_vec(), true, 1, 1.0);
        let p = apply_magnitude_pruning(&m, s);
        let after: Vec<f32> = p.layers.iter()
            .filter_map(|l| l.layer.weights())
            .flat_map(|w| w.as_f32().unwrap().to_vec())
            .collect();
        let zeroed: Vec<f32> = all.iter().zip(&after).filter(|(_, &a)| a == 0.0).map(|(&b, _)| b.abs()).collect();
        let kept: Vec<f32> = all.iter().zip(&after).filter(|(_, &a)| a != 0.0).map(|(&b, _)| b.abs()).collect();
        prop_assert_eq!(zeroed.len(), (s * 32.0).ceil() as usize);
        for (&b, &a) in all.iter().zip(&after) {
            prop_assert!(a == 0.0 || a == b);
        }
        let zmax = zeroed.iter().cloned().fold(0f32, f32::max);
        prop_assert!(kept.iter().all(|&k| k >= zmax));
        // Biases are never pruned.
        prop_assert_eq!(p.layers[0].layer.bias(), m.layers[0].layer.bias());
    }
}

#[test]
fn save_and_load_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.unit");
    let m = quantize_model(&model_from(vec![0.5; 8], vec![-0.25; 24], true, 2, 0.3), QFormat::Q8_8).unwrap();
    save_model(&m, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), m);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert!(matches!(load_model(&dir.path().join("missing.unit")), Err(ModelIoError::Io { .. })));
}

#[test]
fn magic_and_version_checked_before_crc() {
    let m = model_from(vec![0.5; 8], vec![-0.25; 24], false, 1, 0.3);
    let mut bytes = to_bytes(&m).unwrap();
    bytes[0] = b'X';
    assert!(matches!(from_bytes(&bytes), Err(ModelIoError::BadMagic)));
    let mut bytes = to_bytes(&m).unwrap();
    bytes[4] = 9;
    assert!(matches!(from_bytes(&bytes), Err(ModelIoError::VersionUnsupported(_))));
    let mut bytes = to_bytes(&m).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0x40;
    assert!(matches!(from_bytes(&bytes), Err(ModelIoError::CrcMismatch { .. })));
}

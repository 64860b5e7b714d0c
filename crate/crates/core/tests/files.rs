use std::path::{Path, PathBuf};

use proptest::prelude::*;
use qbrew_core::io::{self, ModelFile};
use qbrew_core::network::{LayerKind, LayerSpec, NetworkSpec, ParameterSet, QuantizationConfig};
use qbrew_core::numerics::{DynamicFixedPointFormat, MinifloatFormat, NumberFormat, RoundingMode};
use qbrew_core::Error;
use sha2::{Digest, Sha256};

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("QBREW_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

#[test]
fn mnist_files_are_the_canonical_ones() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not present, skipping");
        return;
    };
    let raw = std::fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
    let first = &raw[16..16 + 784];
    assert_eq!(
        Sha256::digest(first).iter().map(|b| format!("{b:02x}")).collect::<String>(),
        "23ceaef5eb61f0e70d64ac18fdf0f60df3d5971cf30bbadac7b6ebf07f782d2c"
    );

    let data = io::load_mnist(&dir).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (60_000, 10_000));
    assert_eq!(data.train.sample_shape, vec![1, 28, 28]);
    assert_eq!(&data.train.labels[..10], &[5, 0, 4, 1, 9, 2, 1, 3, 1, 4]);
    assert!(data.train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(data.train.images[..784].iter().map(|&v| (v * 255.0).round() as u8).collect::<Vec<_>>(), first);
}

#[test]
fn truncated_idx_file_is_rejected_without_allocating() {
    let dir = tempfile::tempdir().unwrap();
    let mut header = vec![0, 0, 8, 3];
    header.extend(u32::MAX.to_be_bytes());
    header.extend(28u32.to_be_bytes());
    header.extend(28u32.to_be_bytes());
    header.extend([0u8; 100]);
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), &header).unwrap();
    std::fs::write(dir.path().join("train-labels-idx1-ubyte"), [0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    assert!(matches!(io::load_mnist(dir.path()), Err(Error::Corrupt(_))));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(io::load_dataset(dir.path()), Err(Error::Config(_))));
}

fn small_net(hidden: usize, classes: usize) -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![2, 6, 6],
        layers: vec![
            LayerSpec::new("conv", LayerKind::Convolution { out_channels: 3, kernel: 3, stride: 1, pad: 1 }),
            LayerSpec::new("pool", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            LayerSpec::new("fc1", LayerKind::FullyConnected { out_features: hidden }),
            LayerSpec::new("relu", LayerKind::Relu),
            LayerSpec::new("fc2", LayerKind::FullyConnected { out_features: classes }),
            LayerSpec::new("loss", LayerKind::SoftmaxLoss),
        ],
    }
}

fn format_strategy() -> impl Strategy<Value = NumberFormat> {
    prop_oneof![
        (2u32..=32, -8i32..24).prop_map(|(b, fl)| DynamicFixedPointFormat::new(b, fl).unwrap().into()),
        (1u32..=7, 0u32..=10).prop_map(|(e, m)| MinifloatFormat::new(e, m).unwrap().into()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_files_round_trip_through_disk(
        hidden in 1usize..12,
        classes in 2usize..6,
        seed in any::<u64>(),
        bits in proptest::collection::vec(any::<u32>(), 16),
        fmt in proptest::option::of(format_strategy()),
        stochastic in any::<Option<u64>>(),
    ) {
        let mut net = small_net(hidden, classes);
        if let Some(f) = fmt {
            for l in net.layers.iter_mut().filter(|l| l.kind.is_quantizable()) {
                l.quant = Some(QuantizationConfig {
                    rounding: stochastic.map_or(RoundingMode::NearestEven, |seed| RoundingMode::Stochastic { seed }),
                    ..QuantizationConfig::uniform(f)
                });
            }
        }
        let mut params = ParameterSet::init(&net, seed).unwrap();
        // arbitrary bit patterns, including NaN payloads and signed zeros
        for (i, v) in params.tensors_mut().flat_map(|t| t.data_mut().iter_mut()).enumerate().take(bits.len()) {
            *v = f32::from_bits(bits[i]);
        }
        let model = ModelFile { net, params };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qbm");
        io::save_model(&path, &model).unwrap();
        let back = io::load_model(&path).unwrap();
        prop_assert_eq!(&back.net, &model.net);
        let a: Vec<u32> = back.params.tensors().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        let b: Vec<u32> = model.params.tensors().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};
use tempfile::TempDir;

use tldr::classifier::{
    cross_entropy, train_classifier, ClassifierSpec, ConvBlockSpec, FrozenClassifier, TrainHyper, WEIGHTS_FILE,
};
use tldr::data::LabeledImageSet;
use tldr::Error;

/// Four classes on 8x8 images: a bright quadrant per class plus noise.
fn quadrants(per_class: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..4 * per_class {
        let class = i % 4;
        labels.push(class as i64);
        for y in 0..8 {
            for x in 0..8 {
                let q = (y / 4) * 2 + x / 4;
                let base = if q == class { 0.8 } else { 0.1 };
                pixels.push(base + rng.random_range(0.0..0.2f32));
            }
        }
    }
    LabeledImageSet::new("quadrants", (1, 8, 8), 4, pixels, labels).unwrap()
}

fn small_spec() -> ClassifierSpec {
    ClassifierSpec {
        conv_blocks: vec![ConvBlockSpec {
            out_channels: 4,
            kernel: 3,
            stride: 1,
        }],
        fc_widths: vec![8, 4],
        dropout_rate: 0.1,
        leaky_slope: 0.01,
        num_classes: 4,
        input_shape: (1, 8, 8),
    }
}

fn hyper() -> TrainHyper {
    TrainHyper {
        learning_rate: 1e-2,
        batch_size: 16,
        max_epochs: 20,
        ..TrainHyper::default()
    }
}

#[test]
fn learns_a_separable_task() {
    let train = quadrants(40, 1);
    let test = quadrants(10, 2);
    let clf = train_classifier(&small_spec(), &train, Some(&test), &hyper(), 3).unwrap();
    assert!(clf.metrics().train_accuracy >= 0.95, "{:?}", clf.metrics());
    assert!(clf.metrics().test_accuracy.unwrap() >= 0.9, "{:?}", clf.metrics());
    assert!(clf.metrics().epochs >= 1 && clf.metrics().epochs <= 20);
}

#[test]
fn training_is_seed_deterministic() {
    let train = quadrants(20, 1);
    let a = train_classifier(&small_spec(), &train, None, &hyper(), 9).unwrap();
    let b = train_classifier(&small_spec(), &train, None, &hyper(), 9).unwrap();
    let c = train_classifier(&small_spec(), &train, None, &hyper(), 10).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn save_load_round_trip_and_tamper_detection() {
    let train = quadrants(20, 1);
    let clf = train_classifier(&small_spec(), &train, None, &hyper(), 4).unwrap();
    let dir = TempDir::new().unwrap();
    clf.save(dir.path(), "quadrants", 80, 4, &hyper()).unwrap();
    let (back, manifest) = FrozenClassifier::load(dir.path()).unwrap();
    assert_eq!(back.checksum(), clf.checksum());
    assert_eq!(manifest.spec, small_spec());
    assert_eq!(manifest.subset_size, 80);

    let x = train.to_tensors(tch::Device::Cpu).0;
    let diff = (clf.logits(&x).unwrap() - back.logits(&x).unwrap()).abs().max().double_value(&[]);
    assert_eq!(diff, 0.0);

    let other = FrozenClassifier::untrained(&small_spec(), 99).unwrap();
    let donor = TempDir::new().unwrap();
    other.save(donor.path(), "quadrants", 80, 99, &hyper()).unwrap();
    std::fs::copy(donor.path().join(WEIGHTS_FILE), dir.path().join(WEIGHTS_FILE)).unwrap();
    assert!(matches!(FrozenClassifier::load(dir.path()), Err(Error::Config(_))));
}

#[test]
fn cross_entropy_matches_a_direct_computation() {
    let logits = [[2.0, -1.0, 0.5], [0.0, 0.0, 0.0], [-3.0, 4.0, 1.0]];
    let labels = [0i64, 2, 1];
    let mut expected = 0.0;
    for (row, &y) in logits.iter().zip(&labels) {
        let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        expected += lse - row[y as usize];
    }
    expected /= 3.0;
    let t = Tensor::from_slice(&logits.concat()).view([3, 3]);
    let got = cross_entropy(&t, &Tensor::from_slice(&labels)).double_value(&[]);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn weight_grad_norm_is_linear_in_scale_and_leaves_weights_alone() {
    let clf = FrozenClassifier::untrained(&small_spec(), 5).unwrap();
    let train = quadrants(4, 6);
    let (x, y) = train.to_tensors(tch::Device::Cpu);
    let before = clf.checksum();
    let g1 = clf.weight_grad_norm(&x, &y).unwrap();
    let g3 = clf.weight_grad_norm_scaled(&x, &y, 3.0).unwrap();
    let g0 = clf.weight_grad_norm_scaled(&x, &y, 0.0).unwrap();
    assert!(g1 > 0.0);
    assert!((g3 - 3.0 * g1).abs() <= 1e-5 * g3, "{g3} vs 3 * {g1}");
    assert_eq!(g0, 0.0);
    assert_eq!(clf.checksum(), before);
    assert_eq!(clf.weight_grad_norm(&x, &y).unwrap(), g1);
}

#[test]
fn trained_classifier_has_smaller_gradients_on_its_data_than_on_noise() {
    let train = quadrants(40, 1);
    let clf = train_classifier(&small_spec(), &train, None, &hyper(), 3).unwrap();
    let (x, y) = train.to_tensors(tch::Device::Cpu);
    let noise = Tensor::rand_like(&x);
    let g_train = clf.weight_grad_norm(&x, &y).unwrap();
    let g_noise = clf.weight_grad_norm(&noise, &y).unwrap();
    assert!(g_noise > g_train, "{g_noise} <= {g_train}");
}

#[test]
fn rejects_bad_inputs() {
    let clf = FrozenClassifier::untrained(&small_spec(), 5).unwrap();
    let wrong = Tensor::zeros([2, 1, 9, 8], (Kind::Float, tch::Device::Cpu));
    assert!(matches!(clf.logits(&wrong), Err(Error::Argument(_))));
    let x = Tensor::zeros([2, 1, 8, 8], (Kind::Float, tch::Device::Cpu));
    let out_of_range = Tensor::from_slice(&[0i64, 4]);
    assert!(matches!(clf.weight_grad_norm(&x, &out_of_range), Err(Error::Argument(_))));

    let mut spec = small_spec();
    spec.fc_widths = vec![8, 5];
    assert!(matches!(spec.validate(), Err(Error::Config(_))));
    let mut spec = small_spec();
    spec.dropout_rate = 1.0;
    assert!(matches!(spec.validate(), Err(Error::Config(_))));

    let other_shape = LabeledImageSet::new("tiny", (1, 4, 4), 4, vec![0.5; 64], vec![0, 1, 2, 3]).unwrap();
    assert!(matches!(
        train_classifier(&small_spec(), &other_shape, None, &hyper(), 0),
        Err(Error::Argument(_))
    ));
}

#[test]
fn penultimate_features_have_the_declared_width() {
    let clf = FrozenClassifier::untrained(&small_spec(), 5).unwrap();
    let x = Tensor::rand([3, 1, 8, 8], (Kind::Float, tch::Device::Cpu));
    let f = clf.penultimate_features(&x).unwrap();
    assert_eq!(f.size(), vec![3, small_spec().feature_width() as i64]);
    let p = clf.predict_proba(&x).unwrap();
    let sums = p.sum_dim_intlist(1, false, Kind::Double);
    assert!((sums - 1.0).abs().max().double_value(&[]) < 1e-6);
}

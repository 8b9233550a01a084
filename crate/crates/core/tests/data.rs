use std::fs;

use dnas::autodiff::{Optimizer, Tape};
use dnas::data::*;
use dnas::pipeline::{predictions, train_child, ChildConfig, SgdConfig};
use dnas::supernet::{ArchMeta, Architecture, SuperNetSpec};
use dnas::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n: usize, classes: usize) -> Dataset {
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let images: Vec<f32> = (0..n).map(|i| i as f32).collect();
    Dataset::new([1, 1, 1], classes, images, labels).unwrap()
}

#[test]
fn split_of_cifar_sized_set_is_forty_and_ten_thousand() {
    let data = tiny(50_000, 10);
    let (a, b) = split_stratified(&data, 0.8, 0).unwrap();
    assert_eq!((a.len(), b.len()), (40_000, 10_000));
    assert!(a.class_counts().iter().all(|&c| c == 4000));
}

#[test]
fn split_is_disjoint_exhaustive_stratified_and_seeded() {
    let data = tiny(10, 2);
    let (a, b) = split_stratified(&data, 0.5, 3).unwrap();
    assert_eq!((a.len(), b.len()), (5, 5));
    let diff = a.class_counts()[0] as i64 - a.class_counts()[1] as i64;
    assert!(diff.abs() <= 1);
    let mut ids: Vec<f32> = a.image_values().chain(b.image_values()).collect();
    ids.sort_by(f32::total_cmp);
    assert_eq!(ids, (0..10).map(|i| i as f32).collect::<Vec<_>>());
    let (a2, b2) = split_stratified(&data, 0.5, 3).unwrap();
    assert_eq!((a, b), (a2, b2));
}

trait Values {
    fn image_values(&self) -> Box<dyn Iterator<Item = f32> + '_>;
}

impl Values for Dataset {
    fn image_values(&self) -> Box<dyn Iterator<Item = f32> + '_> {
        Box::new((0..self.len()).map(|i| self.image(i)[0]))
    }
}

#[test]
fn split_rejects_bad_inputs() {
    assert!(split_stratified(&tiny(1, 1), 0.5, 0).is_err());
    assert!(split_stratified(&tiny(10, 2), 0.0, 0).is_err());
    assert!(split_stratified(&tiny(10, 2), 1.0, 0).is_err());
}

#[test]
fn synthetic_is_seeded_and_noise_free_classes_are_constant() {
    let spec = SyntheticSpec::default();
    assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
    let other = SyntheticSpec {
        seed: 1,
        ..spec.clone()
    }
    .generate()
    .unwrap();
    assert_ne!(other, spec.generate().unwrap());

    let clean = SyntheticSpec {
        noise: 0.0,
        train_per_class: 5,
        ..SyntheticSpec::default()
    };
    let (train, _) = clean.generate().unwrap();
    for i in 0..train.len() {
        let first = (0..train.len())
            .find(|&j| train.labels()[j] == train.labels()[i])
            .unwrap();
        assert_eq!(train.image(i), train.image(first));
    }
    let (train, test) = SyntheticSpec::default().generate().unwrap();
    assert_eq!((train.len(), test.len()), (2000, 500));
    assert_eq!(train.class_counts(), vec![200; 10]);
}

#[test]
fn synthetic_pixels_have_unit_scale() {
    let (train, _) = SyntheticSpec::default().generate().unwrap();
    let n = train.len() as f64 * 768.0;
    let (mut s, mut s2) = (0.0, 0.0);
    for i in 0..train.len() {
        for &v in train.image(i) {
            s += v as f64;
            s2 += (v as f64).powi(2);
        }
    }
    let mean = s / n;
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((s2 / n - mean * mean - 1.0).abs() < 0.1);
}

/// Softmax regression on raw pixels, trained with plain SGD.
#[test]
fn linear_probe_exceeds_ninety_percent() {
    let (train, test) = SyntheticSpec::default().generate().unwrap();
    let d: usize = train.shape().iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut w = Tensor::<f32>::from_fn(&[10, d], |_| rng.gen_range(-0.01..0.01));
    let mut b = Tensor::<f32>::zeros(&[10]);
    let mut opt = Optimizer::sgd(0.05, 0.9, 0.0);
    let mut store = dnas::autodiff::ParamStore::new();
    let wid = store.insert("w", dnas::autodiff::ParamKind::Weight, w.clone()).unwrap();
    let bid = store.insert("b", dnas::autodiff::ParamKind::Weight, b.clone()).unwrap();
    for _ in 0..5 {
        for idx in train.batches(50, Some(&mut rng)) {
            let (x, labels) = train.batch(&idx);
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape, |_| true);
            let xv = tape.constant(x.reshape(&[labels.len(), d]).unwrap());
            let logits = tape.linear(xv, bind.var(wid), Some(bind.var(bid))).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            let mut g = tape.backward(loss).unwrap();
            let grads = bind.gradients(&mut g);
            opt.step(&mut store, &grads, 0.05);
        }
    }
    w = store.get(wid).clone();
    b = store.get(bid).clone();
    let (x, labels) = test.batch(&(0..test.len()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let xv = tape.constant(x.reshape(&[labels.len(), d]).unwrap());
    let (wv, bv) = (tape.constant(w), tape.constant(b));
    let logits = tape.linear(xv, wv, Some(bv)).unwrap();
    let pred = predictions(tape.value(logits));
    let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    assert!(acc > 0.9, "linear probe accuracy {acc}");
}

/// One convolution plus a classifier, trained for at most 30 epochs.
#[test]
fn reference_net_reaches_ninety_five_percent() {
    let (train, test) = SyntheticSpec::default().generate().unwrap();
    let spec = SuperNetSpec::conv_chain([3, 16, 16], 10, 16, 0, &[]);
    let arch = Architecture::from_indices(&spec, &[], ArchMeta::default()).unwrap();
    let cfg = ChildConfig {
        epochs: 30,
        batch_size: 64,
        optimizer: SgdConfig {
            lr: 0.1,
            ..SgdConfig::default()
        },
        cutout: None,
        inherit_weights: false,
        seed: 0,
    };
    let r = train_child(&spec, &arch, &train, &test, &cfg, None).unwrap();
    let acc = r.evaluation.unwrap().accuracy;
    assert!(acc >= 0.95, "reference accuracy {acc}");
}

#[test]
fn cutout_full_size_zeroes_everything_when_centred() {
    let img = Tensor::<f32>::ones(&[2, 4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut full = false;
    for _ in 0..500 {
        let out = cutout(&img, 4, &mut rng).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        // clipped square still covers at least (size/2)^2 pixels per channel
        assert!(zeros >= 2 * 4);
        full |= zeros == 32;
    }
    assert!(full);
}

#[test]
fn cutout_of_size_one_zeroes_one_pixel_column() {
    let img = Tensor::<f32>::from_fn(&[3, 5, 5], |i| 1.0 + i as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let out = cutout(&img, 1, &mut rng).unwrap();
        let zeros: Vec<usize> = (0..75).filter(|&i| out.data()[i] == 0.0).collect();
        assert_eq!(zeros.len(), 3);
        assert!(zeros.iter().all(|&i| i % 25 == zeros[0] % 25));
    }
}

#[test]
fn cutout_lowers_the_mean_of_positive_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::<f32>::from_fn(&[3, 8, 8], |_| rng.gen_range(0.1..1.0));
    let before = img.sum() / img.len() as f32;
    for _ in 0..1000 {
        let out = cutout(&img, 4, &mut rng).unwrap();
        assert!(out.sum() / (out.len() as f32) < before);
    }
}

#[test]
fn cutout_rejects_bad_sizes() {
    let img = Tensor::<f32>::ones(&[1, 4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(cutout(&img, 0, &mut rng).is_err());
    assert!(cutout(&img, 5, &mut rng).is_err());
}

fn random_records(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for _ in 0..n {
        out.push(rng.gen_range(0..10));
        out.extend((0..3072).map(|_| rng.gen::<u8>()));
    }
    out
}

#[test]
fn cifar_files_load_and_records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut train_bytes = Vec::new();
    for (i, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let b = random_records(7, i as u64);
        fs::write(dir.path().join(f), &b).unwrap();
        train_bytes.extend(b);
    }
    fs::write(dir.path().join(CIFAR_TEST_FILE), random_records(4, 99)).unwrap();
    let norm = Normalization::cifar10();
    let (train, test) = load_cifar10(dir.path(), &norm, None, None).unwrap();
    assert_eq!((train.len(), test.len()), (35, 4));
    assert_eq!(train.shape(), [3, 32, 32]);
    assert!(train.labels().iter().all(|&l| l <= 9));
    for i in 0..train.len() {
        let rec = encode_cifar_record(&train, i, &norm).unwrap();
        assert_eq!(rec, train_bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD]);
    }
    let (limited, _) = load_cifar10(dir.path(), &norm, Some(10), Some(2)).unwrap();
    assert_eq!(limited.len(), 10);
}

#[test]
fn cifar_errors_carry_offsets() {
    let norm = Normalization::cifar10();
    let mut bytes = random_records(3, 0);
    bytes.truncate(2 * CIFAR_RECORD + 100);
    match parse_cifar_records(&bytes, &norm, None) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut bad = random_records(2, 0);
    bad[CIFAR_RECORD] = 10;
    match parse_cifar_records(&bad, &norm, None) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_cifar10(dir.path(), &norm, None, None),
        Err(Error::File { .. })
    ));
}

#[test]
fn idx_files_parse() {
    let n = 3u32;
    let mut imgs = vec![0, 0, 8, 3];
    for d in [n, 2, 2] {
        imgs.extend(d.to_be_bytes());
    }
    imgs.extend([0u8, 255, 128, 64, 1, 2, 3, 4, 9, 9, 9, 9]);
    let mut labels = vec![0, 0, 8, 1];
    labels.extend(n.to_be_bytes());
    labels.extend([2u8, 0, 1]);
    let norm = Normalization::unit(1);
    let d = parse_idx(&imgs, &labels, 3, &norm).unwrap();
    assert_eq!(d.shape(), [1, 2, 2]);
    assert_eq!(d.labels(), &[2, 0, 1]);
    assert_eq!(d.image(0), &[-1.0, 1.0, norm.encode(128, 0), norm.encode(64, 0)]);
    assert!(parse_idx(&imgs[..imgs.len() - 1], &labels, 3, &norm).is_err());
    assert!(parse_idx(&imgs, &labels, 2, &norm).is_err());
}

#[test]
fn normalization_round_trips_bytes() {
    let norm = Normalization::cifar10();
    for c in 0..3 {
        for b in 0..=255u8 {
            assert_eq!(norm.decode(norm.encode(b, c), c), b);
        }
    }
}

#[test]
fn dataset_spec_parses_each_source() {
    let s: DatasetSpec = serde_json::from_str(r#"{"source": "synthetic", "classes": 3, "noise": 0.5}"#).unwrap();
    let (train, _) = s.load(std::path::Path::new(".")).unwrap();
    assert_eq!(train.classes(), 3);
    let c: DatasetSpec = serde_json::from_str(r#"{"source": "cifar10-binary", "dir": "x", "train_limit": 5}"#).unwrap();
    assert!(matches!(
        c,
        DatasetSpec::Cifar10Binary {
            train_limit: Some(5),
            ..
        }
    ));
    assert!(serde_json::from_str::<DatasetSpec>(r#"{"source": "synthetic", "colour": 1}"#).is_err());
}

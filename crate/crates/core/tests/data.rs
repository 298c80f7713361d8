use ecvit::data::{
    augment, augment_rng, epoch_order, load_cifar, preprocess, resize_bilinear, synthetic, BatchIterator, Dataset,
    Split, Variant, MEAN, PIXELS, STD,
};
use ecvit::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hand_record(label: u8, r: u8, g: u8) -> Vec<u8> {
    let mut rec = vec![label];
    rec.extend(std::iter::repeat_n(r, 1024));
    rec.extend(std::iter::repeat_n(g, 1024));
    rec.extend((0..1024).map(|i| (i % 256) as u8));
    rec
}

#[test]
fn hand_written_records_decode() {
    let mut bytes = hand_record(3, 10, 20);
    bytes.extend(hand_record(9, 200, 0));
    let ds = Dataset::parse(Variant::Cifar10, Split::Test, "fixture.bin", &bytes).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!((ds.label(0), ds.label(1)), (3, 9));
    let img = ds.image(1);
    assert_eq!((img[0], img[1023], img[1024], img[2048 + 300]), (200, 200, 0, 44));
    assert_eq!(ds.encode(0..2), bytes);

    // pixel/255 standardised per channel, no augmentation at native size
    let x = preprocess(&ds, &[0], (32, 32), None);
    assert_eq!(x.shape(), &[1, 3, 32, 32]);
    let want_r = (10.0 / 255.0 - MEAN[0]) / STD[0];
    assert!((x.data()[5] - want_r).abs() < 1e-6);
    let want_b = (7.0 / 255.0 - MEAN[2]) / STD[2];
    assert!((x.data()[2048 + 7] - want_b).abs() < 1e-6);
}

fn write_split(dir: &std::path::Path, variant: Variant, split: Split, per_file: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut contents = Vec::new();
    for (k, name) in variant.files(split).iter().enumerate() {
        let bytes = synthetic(variant, split, per_file, seed + k as u64).encode(0..per_file);
        std::fs::write(dir.join(name), &bytes).unwrap();
        contents.push(bytes);
    }
    contents
}

#[test]
fn directories_round_trip_byte_exact() {
    for variant in [Variant::Cifar10, Variant::Cifar100] {
        for split in [Split::Train, Split::Test] {
            let (src, dst) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            let originals = write_split(src.path(), variant, split, 3, 40);
            let ds = load_cifar(src.path(), variant, split).unwrap();
            assert_eq!(ds.len(), 3 * originals.len());
            ds.write_dir(dst.path()).unwrap();
            for (name, bytes) in variant.files(split).iter().zip(&originals) {
                assert_eq!(&std::fs::read(dst.path().join(name)).unwrap(), bytes, "{variant:?} {name}");
            }
        }
    }
}

#[test]
fn cifar100_keeps_fine_and_coarse_labels() {
    let mut rec = vec![7u8, 61];
    rec.extend(vec![1u8; PIXELS]);
    let ds = Dataset::parse(Variant::Cifar100, Split::Train, "train.bin", &rec).unwrap();
    assert_eq!(ds.label(0), 61);
    assert_eq!(ds.coarse.as_deref(), Some(&[7u8][..]));
}

#[test]
fn malformed_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), Variant::Cifar10, Split::Test, 2, 1);
    let path = dir.path().join("test_batch.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    match load_cifar(dir.path(), Variant::Cifar10, Split::Test) {
        Err(Error::Format { path: p, actual, .. }) => {
            assert_eq!(p, path);
            assert_eq!(actual, 2 * 3073 - 1);
        }
        other => panic!("{other:?}"),
    }

    let mut bad = hand_record(10, 0, 0);
    bad.extend(hand_record(0, 0, 0));
    assert!(matches!(
        Dataset::parse(Variant::Cifar10, Split::Test, "x.bin", &bad),
        Err(Error::Format { actual: 10, .. })
    ));
    assert!(matches!(
        load_cifar(dir.path(), Variant::Cifar100, Split::Test),
        Err(Error::Io { .. })
    ));
}

#[test]
fn channel_stats_match_brute_force() {
    let ds = synthetic(Variant::Cifar10, Split::Train, 5, 9);
    let (mean, std) = ds.channel_stats();
    for c in 0..3 {
        let vals: Vec<f64> = (0..ds.len())
            .flat_map(|i| ds.image(i)[c * 1024..(c + 1) * 1024].to_vec())
            .map(|p| p as f64 / 255.0)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!((mean[c] - m).abs() < 1e-12);
        assert!((std[c] - v.sqrt()).abs() < 1e-9);
    }
}

/// Sample position of output pixel `o` for half-pixel-centred resizing.
fn source_coord(o: usize, from: usize, to: usize) -> f32 {
    (((o as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, from as f64 - 1.0)) as f32
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resize_reproduces_linear_ramps(oh in 1usize..80, ow in 1usize..80, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let (h, w) = (32, 32);
        let src: Vec<f32> = (0..3 * h * w).map(|i| {
            let (y, x) = ((i / w) % h, i % w);
            a * y as f32 + b * x as f32
        }).collect();
        let out = resize_bilinear(&src, 3, (h, w), (oh, ow));
        prop_assert_eq!(out.len(), 3 * oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let want = a * source_coord(y, h, oh) + b * source_coord(x, w, ow);
                let got = out[2 * oh * ow + y * ow + x];
                prop_assert!((got - want).abs() < 1e-4, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn resize_keeps_constants(oh in 1usize..64, ow in 1usize..64, c in -3.0f32..3.0) {
        let out = resize_bilinear(&vec![c; 3 * 32 * 32], 3, (32, 32), (oh, ow));
        prop_assert!(out.iter().all(|&v| (v - c).abs() < 1e-6));
    }

    #[test]
    fn augmentation_is_a_padded_crop_and_flip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f32> = synthetic(Variant::Cifar10, Split::Train, 1, seed).image(0).iter().map(|&p| p as f32).collect();
        let out = augment(&img, &mut rng);
        let mirror = |i: isize| -> usize {
            if i < 0 { (-i) as usize } else if i > 31 { (62 - i) as usize } else { i as usize }
        };
        let mut matches = 0;
        for dy in -4isize..=4 {
            for dx in -4isize..=4 {
                for flip in [false, true] {
                    let same = (0..3).all(|c| (0..32).all(|y| (0..32).all(|x| {
                        let sx = if flip { 31 - x } else { x };
                        let v = img[c * 1024 + mirror(y as isize + dy) * 32 + mirror(sx as isize + dx)];
                        out[c * 1024 + y * 32 + x] == v
                    })));
                    matches += usize::from(same);
                }
            }
        }
        prop_assert!(matches >= 1);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation(n in 1usize..300, seed in any::<u64>(), epoch in 0u64..50) {
        let order = epoch_order(n, seed, epoch);
        prop_assert_eq!(&order, &epoch_order(n, seed, epoch));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn epochs_shuffle_differently() {
    assert_ne!(epoch_order(100, 1, 0), epoch_order(100, 1, 1));
    assert_ne!(epoch_order(100, 1, 0), epoch_order(100, 2, 0));
    let a: Vec<u32> = (0..4).map(|_| rand::Rng::random(&mut augment_rng(1, 0))).collect();
    let b: u32 = rand::Rng::random(&mut augment_rng(1, 1));
    assert_eq!(a[0], a[1]);
    assert_ne!(a[0], b);
}

#[test]
fn batches_cover_each_record_once() {
    let ds = synthetic(Variant::Cifar10, Split::Train, 23, 3);
    let it = BatchIterator::new(&ds, 5, (16, 16), 8, 2, true, true);
    assert_eq!(it.num_batches(), 5);
    let batches: Vec<_> = it.collect();
    assert_eq!(batches.last().unwrap().labels.len(), 3);
    assert_eq!(batches[0].images.shape(), &[5, 3, 16, 16]);
    let order = epoch_order(23, 8, 2);
    let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.clone()).collect();
    assert_eq!(labels, order.iter().map(|&i| ds.label(i)).collect::<Vec<_>>());

    // same arguments, same bytes
    let again: Vec<_> = BatchIterator::new(&ds, 5, (16, 16), 8, 2, true, true).collect();
    for (x, y) in batches.iter().zip(&again) {
        assert_eq!(x.images.data(), y.images.data());
    }
}

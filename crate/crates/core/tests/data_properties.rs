use std::path::Path;

use proptest::prelude::*;
use retformer::data::*;
use retformer::numerics::Tensor;

fn write_gray(path: &Path, w: u32, h: u32, seed: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let buf: Vec<u8> = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
    image::save_buffer(path, &buf, w, h, image::ExtendedColorType::L8).unwrap();
}

#[test]
fn class_directories_load_in_path_order() {
    let dir = tempfile::tempdir().unwrap();
    for (class, n) in [("AD", 2), ("HC", 2)] {
        for i in 0..n {
            write_gray(&dir.path().join(class).join(format!("{i}.png")), 12, 9, i as u8);
        }
    }
    std::fs::write(dir.path().join("HC").join("notes.txt"), "x").unwrap();
    let d = load_image_dataset(dir.path(), 8, 1).unwrap();
    assert_eq!(d.len(), 4);
    assert_eq!(d.class_counts(), [2, 2]);
    assert_eq!(d.warnings.len(), 1);
    assert!(d.warnings[0].contains("notes.txt"));
    assert!(d.samples[0].source.ends_with("0.png") && d.samples[0].label == Label::Ad);
    assert!(d.samples.iter().all(|s| s.pixels.shape() == [8, 8, 1]));
    assert!(d.samples.iter().all(|s| s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));

    let rgb = load_image_dataset(dir.path(), 5, 3).unwrap();
    assert_eq!(rgb.samples[0].pixels.shape(), &[5, 5, 3]);
}

#[test]
fn corrupted_image_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("AD/ok.png"), 4, 4, 0);
    std::fs::create_dir_all(dir.path().join("HC")).unwrap();
    std::fs::write(dir.path().join("HC/broken.png"), b"not a png").unwrap();
    let err = load_image_dataset(dir.path(), 4, 1).unwrap_err();
    assert!(err.to_string().contains("broken.png"), "{err}");
}

#[test]
fn empty_or_unknown_class_directories_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("AD/a.png"), 4, 4, 0);
    std::fs::create_dir_all(dir.path().join("HC")).unwrap();
    assert!(matches!(load_image_dataset(dir.path(), 4, 1), Err(DataError::Empty(_))));
    write_gray(&dir.path().join("HC/b.png"), 4, 4, 0);
    write_gray(&dir.path().join("MCI/c.png"), 4, 4, 0);
    assert!(matches!(load_image_dataset(dir.path(), 4, 1), Err(DataError::UnknownClass(_))));
}

#[test]
fn oct_volumes_become_subject_tagged_slices() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..5 {
        // Mixed slice sizes within one volume.
        write_gray(&dir.path().join(format!("AD/vol01/slice_{i:03}.png")), 10 + i, 7 + 2 * i, i as u8);
    }
    let samples = slice_oct_volume(&dir.path().join("AD/vol01"), Label::Ad, "AD/vol01", 6).unwrap();
    assert_eq!(samples.len(), 5);
    assert!(samples.iter().all(|s| s.subject_id == "AD/vol01" && s.label == Label::Ad));
    assert!(samples.iter().all(|s| s.pixels.shape() == [6, 6, 1]));

    std::fs::create_dir_all(dir.path().join("HC/empty")).unwrap();
    assert!(matches!(slice_oct_volume(&dir.path().join("HC/empty"), Label::Hc, "x", 6), Err(DataError::Empty(_))));
}

#[test]
fn full_scale_oct_layout_gives_1120_slices() {
    let dir = tempfile::tempdir().unwrap();
    for v in 0..224 {
        let class = if v % 2 == 0 { "AD" } else { "HC" };
        for s in 0..5 {
            write_gray(&dir.path().join(format!("{class}/v{v:03}/slice_{s:03}.png")), 4, 4, s as u8);
        }
    }
    let d = load_oct_dataset(dir.path(), 4).unwrap();
    assert_eq!(d.len(), 1120);
    assert_eq!(d.class_counts(), [560, 560]);
    let subjects: std::collections::BTreeSet<_> = d.subjects().into_iter().collect();
    assert_eq!(subjects.len(), 224);
    let plan = d.nested_folds(3, 3, 1, true).unwrap();
    for o in &plan.outer {
        let test_subjects: std::collections::BTreeSet<_> = o.test.iter().map(|&i| &d.samples[i].subject_id).collect();
        assert!(o.development().iter().all(|&i| !test_subjects.contains(&d.samples[i].subject_id)));
    }
}

#[test]
fn written_datasets_round_trip_through_the_loaders() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthesize_dataset(&SynthSpec::fundus(2, 10, 1.0, 0.02, 4));
    write_dataset(&d, dir.path(), false).unwrap();
    let back = load_image_dataset(dir.path(), 10, 3).unwrap();
    assert_eq!(back.class_counts(), d.class_counts());
    for (a, b) in d.samples.iter().filter(|s| s.label == Label::Ad).zip(&back.samples) {
        assert!(a.pixels.max_abs_diff(&b.pixels).unwrap() <= 0.5 / 255.0 + 1e-12);
    }
    let oct_dir = tempfile::tempdir().unwrap();
    write_dataset(&synthesize_dataset(&SynthSpec::oct(2, 10, 1.0, 0.02, 4)), oct_dir.path(), true).unwrap();
    assert_eq!(load_oct_dataset(oct_dir.path(), 10).unwrap().len(), 4);
}

#[test]
fn zero_effect_makes_classes_indistinguishable_on_average() {
    let d = synthesize_dataset(&SynthSpec::oct(400, 12, 0.0, 0.05, 8));
    let mean = |label: Label| {
        let s: Vec<f64> = d.samples.iter().filter(|s| s.label == label).map(|s| s.pixels.mean()).collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    assert!((mean(Label::Ad) - mean(Label::Hc)).abs() < 5e-3);
}

fn raw_image() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..12, 1usize..12, prop::sample::select(vec![1usize, 3]))
        .prop_flat_map(|(h, w, c)| prop::collection::vec(0u8..=255, h * w * c).prop_map(move |v| {
            Tensor::new(vec![h, w, c], v.into_iter().map(f64::from).collect()).unwrap()
        }))
}

proptest! {
    #[test]
    fn resizing_is_idempotent_and_stays_in_hull(raw in raw_image(), size in 1usize..16) {
        let once = preprocess(&raw, size).unwrap();
        prop_assert_eq!(resize_bilinear(&once, size, size), once.clone());
        let (lo, hi) = raw.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v / 255.0), b.max(v / 255.0)));
        prop_assert!(once.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn split_plans_partition_the_data(k1 in 2usize..5, k2 in 2usize..5, extra in 0usize..30, seed in any::<u64>(), stratify in any::<bool>()) {
        let n = k1 * k2 + extra;
        let labels: Vec<Label> = (0..n).map(|i| Label::from_index((i * 7 + 3) % 3 % 2)).collect();
        let grouping = Grouping { labels: stratify.then_some(labels.as_slice()), subjects: None };
        let plan = nested_folds(n, k1, k2, seed, &grouping).unwrap();
        prop_assert_eq!(plan.outer.len(), k1);
        let mut seen = vec![0; n];
        for o in &plan.outer {
            o.test.iter().for_each(|&i| seen[i] += 1);
            prop_assert!(o.test.len().abs_diff(n / k1) <= 1);
            let rest = n - o.test.len();
            prop_assert_eq!(o.inner.len(), k2);
            for s in &o.inner {
                let mut union: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
                union.sort_unstable();
                let expected: Vec<usize> = (0..n).filter(|i| !o.test.contains(i)).collect();
                prop_assert_eq!(&union, &expected);
                prop_assert!(s.train.iter().all(|i| !s.validation.contains(i)));
                prop_assert!(s.validation.len().abs_diff(rest / k2) <= 1);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn oversampling_never_drops_a_training_index(labels in prop::collection::vec(0usize..2, 2..40), seed in any::<u64>()) {
        let labels: Vec<Label> = labels.into_iter().map(Label::from_index).collect();
        prop_assume!(labels.contains(&Label::Ad) && labels.contains(&Label::Hc));
        let train: Vec<usize> = (0..labels.len()).collect();
        let out = random_oversample(&train, &labels, seed).unwrap();
        prop_assert_eq!(&out[..train.len()], &train[..]);
        let ad = out.iter().filter(|&&i| labels[i] == Label::Ad).count();
        prop_assert_eq!(2 * ad, out.len());
    }
}

use panoseg::data::{
    class_weights, classes, generate_dataset, load_sample, make_batch, read_pfm, render_scene, save_sample, write_pfm,
    Augment, Dataset, Depth16Dataset, DiskDataset, Sample, SceneBox, SceneSpec, IGNORE_LABEL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sample(rng: &mut ChaCha8Rng, h: usize) -> Sample {
    let spec = SceneSpec::random(rng);
    render_scene(&spec, "r", h, 2 * h).unwrap()
}

#[test]
fn nadir_and_zenith_of_empty_room() {
    let spec = SceneSpec::empty_room([4.0, 4.0, 2.4], [2.0, 2.0, 1.2]);
    let (h, w) = (64, 128);
    let s = render_scene(&spec, "room", h, w).unwrap();
    // bottom row rays are within half a pixel of straight down
    let half = std::f64::consts::PI / (2.0 * h as f64);
    let nadir = 1.2 / half.cos();
    for u in 0..w {
        let i = (h - 1) * w + u;
        assert_eq!(s.labels[i], classes::FLOOR);
        assert!((s.depth[i] - nadir).abs() < 1e-12);
        assert_eq!(s.labels[u], classes::CEILING);
    }
    assert!((nadir - 1.2).abs() < 1e-3);

    // a ray exactly straight down
    let (d, class, _) = spec.cast([0.0, 0.0, -1.0]);
    assert_eq!((d, class), (1.2, classes::FLOOR));
}

#[test]
fn render_rejects_bad_specs() {
    let mut spec = SceneSpec::empty_room([4.0, 4.0, 2.4], [2.0, 2.0, 1.2]);
    spec.camera = [5.0, 2.0, 1.2];
    assert!(render_scene(&spec, "x", 8, 16).is_err());
    spec.camera = [2.0, 2.0, 1.2];
    spec.boxes.push(SceneBox {
        min: [1.5, 1.5, 0.0],
        max: [2.5, 2.5, 2.4],
        class: classes::COLUMN,
        color: [0; 3],
    });
    assert!(render_scene(&spec, "x", 8, 16).is_err());
    spec.boxes[0].max[2] = 3.0;
    assert!(spec.validate().is_err());
    assert!(render_scene(&SceneSpec::empty_room([4.0, 4.0, 2.4], [2.0, 2.0, 1.2]), "x", 8, 8).is_err());
}

#[test]
fn render_is_deterministic_and_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let spec = SceneSpec::random(&mut rng);
        spec.validate().unwrap();
        let a = render_scene(&spec, "a", 32, 64).unwrap();
        let b = render_scene(&spec, "a", 32, 64).unwrap();
        assert_eq!(a, b);
        a.validate(classes::NUM_CLASSES).unwrap();
        assert!(a.depth.iter().all(|&d| d > 0.0));
    }
}

#[test]
fn box_occludes_wall() {
    let mut spec = SceneSpec::empty_room([4.0, 4.0, 2.4], [1.0, 2.0, 1.2]);
    spec.boxes.push(SceneBox {
        min: [2.5, 1.5, 0.0],
        max: [3.0, 2.5, 2.4],
        class: classes::COLUMN,
        color: [1, 2, 3],
    });
    let (d, class, color) = spec.cast([1.0, 0.0, 0.0]);
    assert_eq!((d, class, color), (1.5, classes::COLUMN, [1, 2, 3]));
    let (d, class, _) = spec.cast([-1.0, 0.0, 0.0]);
    assert_eq!((d, class), (1.0, classes::WALL));
}

#[test]
fn roll_identities_and_class_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_sample(&mut rng, 16);
    let w = s.width;
    assert_eq!(s.rolled(0), s);
    assert_eq!(s.rolled(w), s);
    let count = |s: &Sample| {
        let mut c = [0usize; 256];
        s.labels.iter().for_each(|&l| c[l as usize] += 1);
        c
    };
    for k in 1..w {
        let r = s.rolled(k);
        assert_eq!(r.rolled(w - k), s);
        assert_eq!(count(&r), count(&s));
        assert_eq!(r.depth[k], s.depth[0]);
        assert_eq!(&r.rgb[3 * k..3 * k + 3], &s.rgb[0..3]);
    }
}

#[test]
fn batch_layout_and_augmentation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Sample> = (0..3).map(|_| random_sample(&mut rng, 16)).collect();
    let b = make_batch(&samples, Augment::None, &mut rng).unwrap();
    assert_eq!(b.input.shape(), &[3, 3, 16, 32]);
    assert_eq!(b.depth.shape(), &[3, 1, 16, 32]);
    assert_eq!(b.labels.len(), 3 * 512);
    assert!(b.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let n = 512;
    assert_eq!(b.input.data()[(3 + 2) * n + 7], samples[1].rgb[3 * 7 + 2] as f64 / 255.0);
    assert_eq!(b.input.data()[..3 * n], samples[0].input_tensor().data()[..]);

    let a = make_batch(&samples, Augment::CircularRoll, &mut rng).unwrap();
    for i in 0..3 {
        let mut before = samples[i].labels.clone();
        let mut after = a.labels[i * n..(i + 1) * n].to_vec();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    let odd = render_scene(&SceneSpec::random(&mut rng), "odd", 8, 16).unwrap();
    assert!(make_batch(&[samples[0].clone(), odd], Augment::None, &mut rng).is_err());
    assert!(make_batch(&[], Augment::None, &mut rng).is_err());
}

#[test]
fn median_frequency_weights() {
    let balanced = [0u8, 1, 2, 3];
    assert_eq!(class_weights([&balanced[..]], 4).unwrap(), vec![1.0; 4]);

    let skewed = [0u8, 0, 0, 1];
    let w = class_weights([&skewed[..]], 2).unwrap();
    assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0).abs() < 1e-12, "{w:?}");

    let absent = [0u8, 2, IGNORE_LABEL, 2];
    let w = class_weights([&absent[..]], 3).unwrap();
    assert_eq!(w[1], 0.0);
    assert!(w[0] > 0.0 && w[2] > 0.0);

    // brute force against the definition over random splits
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let c = rng.gen_range(2..7);
        let maps: Vec<Vec<u8>> = (0..3).map(|_| (0..50).map(|_| rng.gen_range(0..c as u8)).collect()).collect();
        let w = class_weights(maps.iter().map(|m| m.as_slice()), c).unwrap();
        let all: Vec<u8> = maps.concat();
        let freq: Vec<f64> = (0..c).map(|k| all.iter().filter(|&&l| l as usize == k).count() as f64 / all.len() as f64).collect();
        let mut present: Vec<f64> = freq.iter().copied().filter(|&f| f > 0.0).collect();
        present.sort_by(f64::total_cmp);
        let m = present.len();
        let median = if m % 2 == 1 { present[m / 2] } else { (present[m / 2 - 1] + present[m / 2]) / 2.0 };
        for k in 0..c {
            let expected = if freq[k] > 0.0 { median / freq[k] } else { 0.0 };
            assert!((w[k] - expected).abs() < 1e-12);
        }
    }
    assert!(class_weights([&[IGNORE_LABEL][..]], 2).is_err());
    assert!(class_weights([&[5u8][..]], 2).is_err());
}

#[test]
fn sample_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_sample(&mut rng, 8);
    let mut bad = s.clone();
    bad.labels[0] = 9;
    assert!(bad.validate(classes::NUM_CLASSES).is_err());
    bad.labels[0] = IGNORE_LABEL;
    assert!(bad.validate(classes::NUM_CLASSES).is_ok());
    bad.depth[3] = -1.0;
    assert!(bad.validate(classes::NUM_CLASSES).is_err());
    let mut narrow = s.clone();
    narrow.width = s.height;
    assert!(narrow.validate(classes::NUM_CLASSES).is_err());
    let mut hole = s;
    hole.depth[0] = 0.0;
    assert!(!hole.valid_mask()[0]);
    assert_eq!(hole.valid_mask().iter().filter(|&&m| m).count(), hole.depth.len() - 1);
}

#[test]
fn pfm_roundtrip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pfm");
    let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
    write_pfm(&path, &data, 2, 3).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"Pf\n3 2\n-1.0\n";
    assert_eq!(&bytes[..header.len()], header);
    // first stored row is the bottom image row
    assert_eq!(&bytes[header.len()..header.len() + 4], &1.5f32.to_le_bytes());
    let (back, h, w) = read_pfm(&path).unwrap();
    assert_eq!((h, w), (2, 3));
    assert_eq!(back, data);

    std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
    assert!(read_pfm(&path).is_err());
    std::fs::write(&path, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
    assert!(read_pfm(&path).is_err());
}

#[test]
fn sample_disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_sample(&mut rng, 16);
    save_sample(dir.path(), &s).unwrap();
    let back = load_sample(dir.path(), &s.id).unwrap();
    assert_eq!((back.rgb.clone(), back.labels.clone()), (s.rgb.clone(), s.labels.clone()));
    for (a, b) in back.depth.iter().zip(&s.depth) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn generated_dataset_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(a.path(), &[("train", 3), ("val", 2)], 16, 32, 11).unwrap();
    generate_dataset(b.path(), &[("train", 3), ("val", 2)], 16, 32, 11).unwrap();
    let train = DiskDataset::open(a.path(), "train").unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(DiskDataset::open(a.path(), "val").unwrap().len(), 2);
    for id in &train.ids {
        for suffix in ["_rgb.png", "_labels.png", "_depth.pfm"] {
            let name = format!("{id}{suffix}");
            assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
        }
    }
    let all = train.load_all().unwrap();
    assert_ne!(all[0].rgb, all[1].rgb);
    assert!(train.get(3).is_err());
    assert!(DiskDataset::open(a.path(), "test").is_err());
}

#[test]
fn depth16_adapter_scales_and_masks_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (2u32, 4u32);
    image::RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30])).save(dir.path().join("p_rgb.png")).unwrap();
    let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(w, h, image::Luma([1024]));
    depth.put_pixel(1, 0, image::Luma([u16::MAX]));
    depth.save(dir.path().join("p_depth.png")).unwrap();
    let mut labels = image::GrayImage::from_pixel(w, h, image::Luma([1]));
    labels.put_pixel(2, 1, image::Luma([40]));
    labels.save(dir.path().join("p_labels.png")).unwrap();
    std::fs::write(dir.path().join("test.txt"), "p\n").unwrap();

    let mut ds = Depth16Dataset::open(dir.path(), "test").unwrap();
    ds.label_map = Some(vec![0, 3]);
    let s = ds.get(0).unwrap();
    assert_eq!(s.depth[0], 2.0);
    assert_eq!(s.depth[1], 0.0);
    assert!(!s.valid_mask()[1]);
    assert_eq!(s.labels[0], 3);
    assert_eq!(s.labels[4 + 2], IGNORE_LABEL);
    s.validate(classes::NUM_CLASSES).unwrap();
}

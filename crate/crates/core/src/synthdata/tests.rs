use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::imgproc::{harris_mask, sobel_mask, BinaryMask, HarrisParams};
use crate::model::Modality;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn clean_optical() -> OpticalStyle {
    OpticalStyle {
        clutter: 0,
        noise_sigma: 0.0,
        background: Some(80.0),
        texture: 8.0,
        ..OpticalStyle::default()
    }
}

#[test]
fn categories_share_body_and_differ_in_wings() {
    let protos: Vec<ObjectSpec> = (0..NUM_CATEGORIES).map(ObjectSpec::prototype).collect();
    for a in 0..NUM_CATEGORIES {
        assert_eq!(protos[a].body_width, protos[0].body_width);
        assert_eq!(protos[a].wing_chord, protos[0].wing_chord);
        for b in a + 1..NUM_CATEGORIES {
            let (p, q) = (&protos[a], &protos[b]);
            assert!(
                p.wing_pos != q.wing_pos || p.wing_span != q.wing_span || p.wing_sweep != q.wing_sweep,
                "categories {a} and {b} identical"
            );
        }
    }
}

#[test]
fn clean_optical_object_brighter_than_background() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let spec = ObjectSpec::sample(seed as usize % NUM_CATEGORIES, &mut r);
        let (img, pose) = render_optical(&spec, 64, &clean_optical(), &mut r);
        let cov = coverage(&spec, &pose, 64);
        let max_bg = cov
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0.0)
            .flat_map(|(i, _)| img.channels.iter().map(move |ch| ch.data()[i]))
            .fold(f64::MIN, f64::max);
        let min_obj = cov
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 1.0)
            .flat_map(|(i, _)| img.channels.iter().map(move |ch| ch.data()[i]))
            .fold(f64::MAX, f64::min);
        assert!(cov.contains(&1.0));
        assert!(min_obj > max_bg, "object {min_obj} vs background {max_bg}");
    }
}

#[test]
fn renders_are_bit_identical_under_fixed_seed() {
    let spec = ObjectSpec::prototype(3);
    let a = render_optical(&spec, 48, &OpticalStyle::default(), &mut rng(9)).0;
    let b = render_optical(&spec, 48, &OpticalStyle::default(), &mut rng(9)).0;
    assert_eq!(a, b);
    let s1 = render_sar(&spec, 48, &SarStyle::default(), &mut rng(9)).0;
    let s2 = render_sar(&spec, 48, &SarStyle::default(), &mut rng(9)).0;
    assert_eq!(s1, s2);
}

/// Pixels of partial coverage, dilated by one pixel.
fn boundary_band(cov: &[f64], size: usize) -> BinaryMask {
    let mut band = BinaryMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let edge = (y.saturating_sub(1)..(y + 2).min(size)).any(|yy| {
                (x.saturating_sub(1)..(x + 2).min(size)).any(|xx| {
                    let c = cov[yy * size + xx];
                    c > 0.0 && c < 1.0
                })
            });
            band.set(y, x, edge);
        }
    }
    band
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x || **y).count();
    inter as f64 / union as f64
}

#[test]
fn sobel_mask_concentrates_on_boundary() {
    for seed in 0..6 {
        let mut r = rng(100 + seed);
        let spec = ObjectSpec::sample(seed as usize, &mut r);
        let (img, pose) = render_optical(&spec, 64, &clean_optical(), &mut r);
        let band = boundary_band(&coverage(&spec, &pose, 64), 64);
        let mask = sobel_mask(&img.luma(), 0.85).unwrap();
        let v = iou(&mask, &band);
        assert!(v > 0.5, "seed {seed}: IoU {v}");
    }
}

#[test]
fn speckle_free_sar_has_clean_background() {
    let style = SarStyle {
        looks: None,
        ..SarStyle::default()
    };
    let spec = ObjectSpec::prototype(0);
    let (img, pose, centers) = render_sar(&spec, 64, &style, &mut rng(4));
    let cov = coverage(&spec, &pose, 64);
    let mut far = 0;
    for y in 0..64 {
        for x in 0..64 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let dmin = centers
                .iter()
                .map(|&(cx, cy)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt())
                .fold(f64::MAX, f64::min);
            if cov[y * 64 + x] == 0.0 && dmin > 8.0 {
                assert!((img.get(y, x) - style.background).abs() < 1e-9);
                far += 1;
            }
        }
    }
    assert!(far > 1000);
    for &(cx, cy) in &centers {
        let v = img.get(cy as usize, cx as usize);
        assert!(v > 100.0, "blob at ({cx},{cy}) only {v}");
    }
}

#[test]
fn harris_finds_planted_scattering_centers() {
    let (mut hits, mut total) = (0, 0);
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let spec = ObjectSpec::sample(seed as usize % NUM_CATEGORIES, &mut r);
        let (img, _, centers) = render_sar(&spec, 64, &SarStyle::default(), &mut r);
        let mask = harris_mask(&img, &HarrisParams::default()).unwrap();
        for &(cx, cy) in &centers {
            if !(2.0..62.0).contains(&cx) || !(2.0..62.0).contains(&cy) {
                continue;
            }
            total += 1;
            let hit = (0..64).any(|y| {
                (0..64).any(|x| {
                    mask.get(y, x) && (x as f64 + 0.5 - cx).abs() <= 2.0 && (y as f64 + 0.5 - cy).abs() <= 2.0
                })
            });
            hits += usize::from(hit);
        }
    }
    let rate = hits as f64 / total as f64;
    assert!(rate >= 0.6, "hit rate {rate} ({hits}/{total})");
}

#[test]
fn two_renders_of_one_instance_differ_in_pose() {
    let spec = ObjectSpec::sample(2, &mut rng(1));
    let mut r = rng(2);
    let (_, p1) = render_optical(&spec, 64, &OpticalStyle::default(), &mut r);
    let (_, p2, _) = render_sar(&spec, 64, &SarStyle::default(), &mut r);
    assert!(p1 != p2);
    assert!((p1.angle - p2.angle).abs() > 1e-6);
}

fn small_config(train: usize, query: usize, gallery: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        image_size: 32,
        counts: SplitCounts { train, query, gallery },
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn manifest_split_sizes_are_exact_and_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(800, 100, 300, 1);
    let recs = build_manifest(&cfg, dir.path()).unwrap();
    for split in Split::ALL {
        let n = recs.iter().filter(|r| r.split == split).count();
        assert_eq!(n, cfg.counts.get(split));
        for label in 0..NUM_CATEGORIES {
            for m in [Modality::Opt, Modality::Sar] {
                let c = recs
                    .iter()
                    .filter(|r| r.split == split && r.label == label && r.modality == m)
                    .count() as f64;
                let target = cfg.counts.get(split) as f64 / (2 * NUM_CATEGORIES) as f64;
                assert!((c - target).abs() <= 1.0, "{split} {label} {m}: {c} vs {target}");
            }
        }
    }
    let paths: std::collections::HashSet<_> = recs.iter().map(|r| r.path.clone()).collect();
    assert_eq!(paths.len(), recs.len());
    for r in &recs {
        let expect = format!("{}/{}/{}/{}.png", r.split, r.modality, r.label, r.id);
        assert_eq!(r.path.to_str().unwrap(), expect);
        assert!(dir.path().join(&r.path).is_file());
    }
    assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), recs);
}

#[test]
fn generator_is_deterministic_and_refuses_overwrite() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config(32, 16, 16, 7);
    let ra = build_manifest(&cfg, a.path()).unwrap();
    let rb = build_manifest(&cfg, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    for r in &ra {
        assert_eq!(
            std::fs::read(a.path().join(&r.path)).unwrap(),
            std::fs::read(b.path().join(&r.path)).unwrap()
        );
    }
    assert!(matches!(build_manifest(&cfg, a.path()), Err(DataError::Exists(_))));
    let other = tempfile::tempdir().unwrap();
    let rc = build_manifest(&small_config(32, 16, 16, 8), other.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join(&ra[0].path)).unwrap(),
        std::fs::read(other.path().join(&rc[0].path)).unwrap()
    );
}

#[test]
fn manifest_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let rec = ManifestRecord {
        id: "a".into(),
        path: "train/opt/0/a.png".into(),
        modality: Modality::Opt,
        label: 0,
        split: Split::Train,
        width: 8,
        height: 8,
    };
    let path = dir.path().join("m.jsonl");
    write_manifest(&path, &[rec.clone(), rec]).unwrap();
    assert!(matches!(read_manifest(&path), Err(DataError::Manifest { line: 2, .. })));
}

#[test]
fn dataset_rejects_open_set_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(16, 16, 16, 3);
    let mut recs = build_manifest(&cfg, dir.path()).unwrap();
    recs.retain(|r| !(r.split == Split::Train && r.label == 5));
    let err = Dataset::from_records(dir.path(), recs, &DataConfig::default()).unwrap_err();
    assert!(matches!(err, DataError::Config(_)));
}

#[test]
fn dataset_loads_and_builds_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(32, 16, 16, 5);
    build_manifest(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path(), &DataConfig::default()).unwrap();
    assert_eq!(ds.len(), 64);
    assert_eq!(ds.num_labels(), NUM_CATEGORIES);
    let opt = ds.indices(Split::Train, Some(Modality::Opt));
    let sar = ds.indices(Split::Train, Some(Modality::Sar));
    assert_eq!((opt.len(), sar.len()), (16, 16));
    assert!(ds.samples[opt[0]].image.channels == 3 && ds.samples[sar[0]].image.channels == 1);
    for i in &sar {
        assert!(ds.samples[*i].mask.count_ones() > 0);
    }
    let imgs: Vec<&Planes> = sar.iter().take(3).map(|&i| &ds.samples[i].image).collect();
    let t = images_tensor::<f64>(&imgs, 3);
    assert_eq!(t.shape(), &[3, 3, 32, 32]);
    assert_eq!(&t.data()[..1024], &t.data()[1024..2048]);
    let geo: Vec<(&Planes, &BinaryMask)> = sar.iter().take(2).map(|&i| (&ds.samples[i].image, &ds.samples[i].mask)).collect();
    let g = geo_tensor::<f64>(&geo);
    assert_eq!(g.shape(), &[2, 2, 32, 32]);
    assert!(g.data()[1024..2048].iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(normalize(127.5), 0.0);
}

fn test_planes(seed: u64) -> (Planes, BinaryMask) {
    let mut r = rng(seed);
    let (img, _) = render_optical(&ObjectSpec::prototype(1), 32, &OpticalStyle::default(), &mut r);
    let data = img.channels.iter().flat_map(|c| c.data().to_vec()).collect();
    let mask = sobel_mask(&img.luma(), 0.85).unwrap();
    (
        Planes {
            channels: 3,
            height: 32,
            width: 32,
            data,
        },
        mask,
    )
}

#[test]
fn identity_augment_is_noop() {
    let (img, mask) = test_planes(1);
    let (out, m) = augment(&img, Some(&mask), &AugmentConfig::identity(), &mut rng(3));
    assert_eq!(out, img);
    assert_eq!(m.unwrap(), mask);
}

#[test]
fn flip_only_mirrors_image_and_mask() {
    let (img, mask) = test_planes(2);
    let cfg = AugmentConfig {
        flip_prob: 1.0,
        ..AugmentConfig::identity()
    };
    let (out, m) = augment(&img, Some(&mask), &cfg, &mut rng(0));
    let m = m.unwrap();
    assert_eq!(m, mask.flip_horizontal());
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(out.data[32 + y * 32 + x + 1024 - 32], img.data[32 + y * 32 + (31 - x) + 1024 - 32]);
        }
    }
}

#[test]
fn augment_preserves_size_and_mask_consistency() {
    let (img, mask) = test_planes(3);
    let mut r = rng(11);
    let cfg = AugmentConfig::default();
    for _ in 0..200 {
        let (out, m) = augment(&img, Some(&mask), &cfg, &mut r);
        let m = m.unwrap();
        assert_eq!((out.channels, out.height, out.width), (3, 32, 32));
        assert_eq!(out.data.len(), img.data.len());
        assert_eq!((m.height(), m.width()), (32, 32));
    }
}

#[test]
fn padding_shift_moves_content() {
    let (img, _) = test_planes(4);
    let cfg = AugmentConfig {
        pad: 4,
        ..AugmentConfig::identity()
    };
    let mut r = rng(5);
    let mut shifted = 0;
    for _ in 0..20 {
        let (out, _) = augment(&img, None, &cfg, &mut r);
        shifted += usize::from(out != img);
        // Pad fill is zero and survives only at the borders.
        assert!(out.data.iter().all(|v| (0.0..=255.0).contains(v)));
    }
    assert!(shifted > 10);
}

#[test]
fn erase_area_within_bounds() {
    let cfg = AugmentConfig::default();
    let mut r = rng(8);
    let mut drawn = 0;
    for _ in 0..1000 {
        if let Some((y, x, h, w)) = erase_rect(64, 64, &cfg, &mut r) {
            drawn += 1;
            let frac = (h * w) as f64 / 4096.0;
            assert!((0.02..=0.2).contains(&frac), "area fraction {frac}");
            assert!(y + h <= 64 && x + w <= 64);
        }
    }
    assert!(drawn >= 990);
}

#[test]
fn erased_region_clears_mask() {
    let (img, _) = test_planes(5);
    let full = BinaryMask::new(32, 32, vec![true; 1024]).unwrap();
    let cfg = AugmentConfig {
        erase_prob: 1.0,
        ..AugmentConfig::identity()
    };
    let (_, m) = augment(&img, Some(&full), &cfg, &mut rng(6));
    let cleared = 1024 - m.unwrap().count_ones();
    let frac = cleared as f64 / 1024.0;
    assert!((0.02..=0.2).contains(&frac), "cleared fraction {frac}");
}

/// Nearest class centroid on 8×8 average-pooled pixels, within one modality.
fn centroid_accuracy(modality: Modality) -> f64 {
    let size = 32;
    let pool = |data: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; 64];
        for y in 0..size {
            for x in 0..size {
                out[(y / 4) * 8 + x / 4] += data[y * size + x] / 16.0;
            }
        }
        out
    };
    let render = |label: usize, seed: u64| -> Vec<f64> {
        let mut r = sample_rng(seed, &format!("sep-{label}"));
        let spec = ObjectSpec::sample(label, &mut r);
        match modality {
            Modality::Opt => pool(render_optical(&spec, size, &OpticalStyle::default(), &mut r).0.luma().data()),
            Modality::Sar => pool(render_sar(&spec, size, &SarStyle::default(), &mut r).0.data()),
        }
    };
    let centroids: Vec<Vec<f64>> = (0..NUM_CATEGORIES)
        .map(|l| {
            let mut c = vec![0.0; 64];
            for s in 0..60 {
                for (a, v) in c.iter_mut().zip(render(l, s)) {
                    *a += v / 60.0;
                }
            }
            c
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for l in 0..NUM_CATEGORIES {
        for s in 1000..1040 {
            let f = render(l, s);
            let pred = (0..NUM_CATEGORIES)
                .min_by(|&a, &b| {
                    let d = |c: &Vec<f64>| c.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    d(&centroids[a]).total_cmp(&d(&centroids[b]))
                })
                .unwrap();
            correct += usize::from(pred == l);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn classes_are_separable_but_not_trivially() {
    for m in [Modality::Opt, Modality::Sar] {
        let acc = centroid_accuracy(m);
        eprintln!("{m} nearest-centroid accuracy {acc:.3}");
        assert!(acc > 1.0 / NUM_CATEGORIES as f64 && acc < 0.9, "{m}: {acc}");
    }
}

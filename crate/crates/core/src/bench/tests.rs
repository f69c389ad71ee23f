use super::*;
use crate::nn::{build_model, cross_entropy, DropoutCtx, ModelSpec};
use crate::tensor::{Graph, RngState, Tensor};

fn faces(n: usize) -> Vec<FaceParams> {
    let root = RngState::new(21);
    (0..n as u64).map(|i| FaceParams::sample(&mut root.split(i))).collect()
}

#[test]
fn faces_stay_in_bounds() {
    for p in faces(300) {
        for b in [p.left_eye, p.right_eye, p.mouth, p.mouth.expand(2)] {
            assert!(b.fits(SIZE, SIZE), "{b:?}");
        }
        // landmarks sit inside the face outline
        for b in [p.left_eye, p.right_eye, p.mouth] {
            for (y, x) in [(b.top, b.left), (b.bottom() - 1, b.right() - 1)] {
                assert!(p.radius(y, x) < 1.0);
            }
        }
        let img = p.render();
        assert_eq!(img.len(), IMAGE_LEN);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn canonical_boxes_cover_every_face() {
    let [le, re, mo] = canonical_landmarks();
    for p in faces(300) {
        for (c, b) in [(le, p.left_eye), (re, p.right_eye), (mo.expand(2), p.mouth.expand(2))] {
            assert_eq!(c.union(&b), c);
        }
    }
}

#[test]
fn generation_is_balanced_and_deterministic() {
    let specs = GeneratorSpec::defaults();
    let a = generate_dataset(7, &specs, 3).unwrap();
    assert_eq!(a, generate_dataset(7, &specs, 3).unwrap());
    assert_ne!(a.images, generate_dataset(7, &specs, 4).unwrap().images);
    assert_eq!(a.len(), 42);
    for c in 0..6 {
        assert_eq!(a.samples.iter().filter(|s| s.source_label == c).count(), 7);
    }
    for (i, s) in a.samples.iter().enumerate() {
        assert_eq!(s.sample_id, i);
        assert_eq!(s.binary_label, usize::from(s.source_label > 0));
        assert_eq!(s.generator.is_some(), s.source_label > 0);
    }
    assert!(generate_dataset(0, &specs, 3).is_err());
    assert!(generate_dataset(2, &[specs[0], specs[0]], 3).is_err());
    assert!(generate_dataset(2, &[specs[0].with_amplitude(0.6)], 3).is_err());
}

#[test]
fn artifacts_stay_inside_their_region() {
    for spec in GeneratorSpec::defaults() {
        for (i, p) in faces(20).iter().enumerate() {
            let clean = synthesize(p, None, 0);
            let fake = synthesize(p, Some(&spec), i as u64);
            let region = spec.region_mask(p);
            let mut changed = 0;
            for (j, (a, b)) in clean.iter().zip(&fake).enumerate() {
                if region[j % PIXELS] {
                    changed += usize::from(a != b);
                } else {
                    assert_eq!(a, b, "{} pixel {j}", spec.id);
                }
            }
            assert!(changed > 0, "{} planted nothing", spec.id);
        }
    }
}

#[test]
fn zero_amplitude_plants_nothing() {
    for spec in GeneratorSpec::defaults() {
        for (i, p) in faces(10).iter().enumerate() {
            let spec = spec.with_amplitude(0.0);
            assert_eq!(synthesize(p, None, 0), synthesize(p, Some(&spec), i as u64), "{}", spec.id);
        }
    }
}

#[test]
fn generator_names_parse() {
    for g in GeneratorId::ALL {
        assert_eq!(g.as_str().parse::<GeneratorId>().unwrap(), g);
    }
    assert_eq!("nt".parse::<GeneratorId>().unwrap(), GeneratorId::Nt);
    assert!("G-XX".parse::<GeneratorId>().is_err());
}

#[test]
fn region_masks() {
    let ds = generate_dataset(3, &GeneratorSpec::defaults()[..2], 1).unwrap();
    let fill = ds.mean_pixel();
    let full = RegionMask::for_dataset(RegionMaskKind::Full, &ds);
    assert_eq!(apply_region_mask(&ds, &full), ds);

    let half = apply_region_mask(&ds, &RegionMask::new(RegionMaskKind::NoBottomHalf, fill));
    for img in half.images.chunks(IMAGE_LEN) {
        for plane in img.chunks(PIXELS) {
            assert!(plane[SIZE / 2 * SIZE..].iter().all(|&v| v == fill));
        }
    }
    assert_eq!(half.images[..SIZE / 2 * SIZE], ds.images[..SIZE / 2 * SIZE]);

    let mouth = RegionMask::new(RegionMaskKind::NoMouth, fill);
    let half_mouth = RegionMask::new(RegionMaskKind::NoHalfMouth, fill);
    let eye = RegionMask::new(RegionMaskKind::NoOneEye, fill);
    assert!(half_mouth.masked_pixels() < mouth.masked_pixels());
    assert!(half_mouth.mask.iter().zip(&mouth.mask).all(|(h, m)| !h || *m));
    assert!(eye.masked_pixels() > 0);
    // the whole mouth artifact region is covered for every face
    for p in faces(200) {
        let nt = GeneratorSpec::default_for(GeneratorId::Nt).region_mask(&p);
        assert!(nt.iter().zip(&mouth.mask).all(|(r, m)| !r || *m));
    }
    for k in RegionMaskKind::ALL {
        assert_eq!(k.as_str().parse::<RegionMaskKind>().unwrap(), k);
    }
}

#[test]
fn stratified_split_properties() {
    for seed in 0..20 {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let s = stratified_split(&labels, seed);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(s.test.len(), 60);
        for c in 0..4 {
            assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 15);
            assert_eq!(s.class_counts[c].iter().sum::<usize>(), 50);
        }
        assert_eq!(s, stratified_split(&labels, seed));
    }
}

#[test]
fn loo_split_properties() {
    let ds = generate_dataset(10, &GeneratorSpec::defaults(), 2).unwrap();
    let labels = ds.source_labels();
    for g in GeneratorId::ALL {
        let loo = make_loo_split(&ds, g, 5).unwrap();
        let out = ds.source_label_of(g).unwrap();
        assert!(loo.split.train.iter().chain(&loo.split.val).all(|&i| labels[i] != out));
        assert!(loo.held_out_test.iter().all(|&i| labels[i] == out));
        assert!(loo.split.test.iter().all(|&i| labels[i] == out || labels[i] == 0));
        let mut all: Vec<usize> = loo
            .split
            .train
            .iter()
            .chain(&loo.split.val)
            .chain(&loo.in_dist_test)
            .chain(&loo.held_out_test)
            .copied()
            .collect();
        all.sort_unstable();
        // the left-out generator's non-test samples are never used
        let intended: Vec<usize> = (0..ds.len())
            .filter(|&i| labels[i] != out || loo.held_out_test.contains(&i))
            .collect();
        assert_eq!(all, intended);
        assert_eq!(loo.held_out_test.len(), 3);
    }
    let partial = generate_dataset(2, &GeneratorSpec::defaults()[..2], 2).unwrap();
    assert!(make_loo_split(&partial, GeneratorId::Nt, 5).is_err());
}

fn attack_setup() -> (crate::nn::DeterministicModel, Tensor, Vec<usize>) {
    let ds = generate_dataset(4, &GeneratorSpec::defaults()[..1], 9).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let data = ds.labeled(&idx, LabelKind::Binary);
    let model = build_model(&ModelSpec::compact_cnn(2, 0.0), &mut RngState::new(2)).unwrap();
    let (x, y) = data.batch(&idx);
    (model, x, y)
}

fn loss(model: &crate::nn::DeterministicModel, x: &Tensor, y: &[usize]) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let (t, _) = model.forward(&mut g, xv, false, &mut DropoutCtx::off()).unwrap();
    let l = cross_entropy(&mut g, t.logits, y).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn fgsm_respects_budget_and_raises_loss() {
    let (model, x, y) = attack_setup();
    let zero = fgsm_attack(&model, &x, &y, &AdversarialConfig::new(0.0)).unwrap();
    assert_eq!(zero, x);
    for eps in [0.01, 0.05, 0.1] {
        let adv = fgsm_attack(&model, &x, &y, &AdversarialConfig::new(eps)).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps);
            assert!((0.0..=1.0).contains(a));
        }
        assert!(loss(&model, &adv, &y) > loss(&model, &x, &y));
    }
    assert!(fgsm_attack(&model, &x, &y, &AdversarialConfig::new(0.2)).is_err());
    assert!(fgsm_attack(&model, &x, &y[1..], &AdversarialConfig::new(0.05)).is_err());
}

#[test]
fn dataset_files_round_trip() {
    let ds = generate_dataset(2, &GeneratorSpec::defaults()[..2], 1).unwrap();
    let split = stratified_split(&ds.source_labels(), 1);
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(&ds, &split, dir.path()).unwrap();
    assert_eq!(written.len(), ds.len() + 1);
    let rows = read_labels(&dir.path().join("labels.csv")).unwrap();
    assert_eq!(rows.len(), ds.len());
    for (r, s) in rows.iter().zip(&ds.samples) {
        assert_eq!((r.sample_id, r.binary_label, r.source_label), (s.sample_id, s.binary_label, s.source_label));
        assert!(["train", "val", "test"].contains(&r.split.as_str()));
    }
    let img = image::open(&written[0]).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (32, 32));
    let px = img.get_pixel(5, 3).0;
    for (c, v) in px.iter().enumerate() {
        let orig = ds.image(0)[c * PIXELS + 3 * SIZE + 5];
        assert!((*v as f64 / 255.0 - orig).abs() <= 0.5 / 255.0 + 1e-12);
    }
    let bytes = std::fs::read(&written[0]).unwrap();
    assert!(bytes.starts_with(b"P6"));
}

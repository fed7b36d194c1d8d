use diffperc::data::{generate, DatasetSpec, LayeredDepth, ShapesRefseg, Target, MAX_DEPTH};
use diffperc::core::tensor::SeededRng;
use proptest::prelude::*;

#[test]
fn same_seed_same_dataset() {
    for name in ["shapes_semseg", "shapes_refseg", "layered_depth"] {
        let spec = DatasetSpec::new(name, 8, 42);
        assert_eq!(generate(&spec).unwrap().samples, generate(&spec).unwrap().samples, "{name}");
        let other = DatasetSpec::new(name, 8, 43);
        assert_ne!(generate(&spec).unwrap().samples, generate(&other).unwrap().samples, "{name}");
    }
}

#[test]
fn every_class_appears_with_ten_per_class() {
    for k in [2, 5, 8] {
        let mut spec = DatasetSpec::new("shapes_semseg", 10 * k, 3);
        spec.classes = k;
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.class_names.len(), k);
        let mut seen = vec![0usize; k];
        for s in &ds.samples {
            let Target::Classes(l) = &s.target else { panic!() };
            for &c in l {
                assert!((c as usize) < k || c == 255);
                if (c as usize) < k {
                    seen[c as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&n| n > 0), "K={k}: {seen:?}");
    }
}

#[test]
fn refseg_masks_nonempty_and_name_the_target() {
    let ds = generate(&DatasetSpec::new("shapes_refseg", 64, 5)).unwrap();
    for s in &ds.samples {
        let Target::Mask(m) = &s.target else { panic!() };
        assert!(m.iter().any(|&v| v == 1), "{}", s.text);
        assert!(m.iter().all(|&v| v <= 1));
        let words: Vec<&str> = s.text.split(' ').collect();
        assert_eq!(words.len(), 3);
        assert_eq!(words[0], "the");
        assert_eq!(ds.class_names[s.classes[0] as usize], words[2]);
        // the mask sits in the strip its position word names
        let side = ds.side;
        let xs: Vec<usize> = (0..m.len()).filter(|&p| m[p] == 1).map(|p| p % side).collect();
        let cx = xs.iter().sum::<usize>() as f64 / xs.len() as f64 / side as f64;
        match words[1] {
            "left" => assert!(cx < 0.5),
            "right" => assert!(cx > 0.5),
            _ => assert!((cx - 0.5).abs() < 1.0 / 6.0),
        }
    }
}

#[test]
fn same_scene_different_expressions_give_different_masks() {
    let mut rng = SeededRng::new(17);
    let side = 64;
    for _ in 0..10 {
        let scene = ShapesRefseg::scene(&mut rng, side);
        let (_, a) = ShapesRefseg::render(&scene, 0, side, &mut rng.clone());
        let (_, b) = ShapesRefseg::render(&scene, 1, side, &mut rng.clone());
        assert_ne!(ShapesRefseg::expression(&scene, 0), ShapesRefseg::expression(&scene, 1));
        assert_ne!(a, b);
    }
}

#[test]
fn depth_is_topmost_plane() {
    let side = 64;
    let mut rng = SeededRng::new(23);
    for scene in 0..4 {
        let sc = LayeredDepth::scene(&mut rng, scene, side);
        let (_, depth) = LayeredDepth::render(&sc, side, &mut rng);
        for y in 0..side {
            for x in 0..side {
                // recompute from the scene description, nearest layer wins
                let mut expect = sc.background.depth(x, y);
                let mut best = f64::INFINITY;
                for l in &sc.layers {
                    if l.footprint.contains(x, y) && l.plane.d0 < best {
                        best = l.plane.d0;
                        expect = l.plane.depth(x, y);
                    }
                }
                let got = depth[y * side + x] as f64;
                assert!((got - expect).abs() < 1e-5, "({x},{y}): {got} vs {expect}");
            }
        }
    }
}

#[test]
fn nearer_layer_occludes_in_image_and_depth() {
    let side = 64;
    let mut rng = SeededRng::new(29);
    let mut checked = 0;
    for _ in 0..40 {
        let sc = LayeredDepth::scene(&mut rng, 0, side);
        let (img, depth) = LayeredDepth::render(&sc, side, &mut SeededRng::new(1));
        for p in 0..side * side {
            let (x, y) = (p % side, p / side);
            let covering: Vec<_> = sc.layers.iter().filter(|l| l.footprint.contains(x, y)).collect();
            if covering.len() < 2 {
                continue;
            }
            let near = covering.iter().min_by(|a, b| a.plane.d0.total_cmp(&b.plane.d0)).unwrap();
            assert!((depth[p] as f64 - near.plane.depth(x, y)).abs() < 1e-5);
            let shade = (1.1 - 0.08 * near.plane.depth(x, y)) as f32;
            for ch in 0..3 {
                let want = (near.footprint.color[ch] * shade).clamp(0.0, 1.0);
                assert!((img[ch * side * side + p] - want).abs() < 1e-5);
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn depth_in_range(seed in 0u64..1000) {
        let ds = generate(&DatasetSpec::new("layered_depth", 4, seed)).unwrap();
        for s in &ds.samples {
            let Target::Depth(d) = &s.target else { panic!() };
            prop_assert!(d.iter().all(|&v| v > 0.0 && v <= MAX_DEPTH));
            prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn semseg_labels_in_range(seed in 0u64..1000, k in 2usize..=8) {
        let mut spec = DatasetSpec::new("shapes_semseg", 3, seed);
        spec.classes = k;
        let ds = generate(&spec).unwrap();
        for s in &ds.samples {
            let Target::Classes(l) = &s.target else { panic!() };
            prop_assert!(l.iter().all(|&c| (c as usize) < k || c == 255));
            prop_assert_eq!(l.len(), 64 * 64);
        }
    }
}

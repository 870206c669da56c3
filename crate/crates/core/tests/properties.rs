use gazebench::boxgeom::{iou, msoc, uoc, wuoc, BBox};
use gazebench::data::parse_annotations;
use gazebench::featmap::{defocus, refocus, FeatureGrid};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn similarity_bounds_and_symmetry(p in boxes(), g in boxes()) {
        let (m, w) = (msoc(&p, &g), wuoc(&p, &g));
        prop_assert!(0.0 < m && m <= w + 1e-12 && w <= 1.0 + 1e-12);
        prop_assert!((m - msoc(&g, &p)).abs() < 1e-12);
        prop_assert!((w - wuoc(&g, &p)).abs() < 1e-12);
        prop_assert!((iou(&p, &g) - iou(&g, &p)).abs() < 1e-12);
        prop_assert!((uoc(&p, &g) - uoc(&g, &p)).abs() < 1e-12);
    }

    #[test]
    fn identity_iff_equal(p in boxes(), g in boxes()) {
        prop_assert!((msoc(&p, &p) - 1.0).abs() < 1e-12);
        if msoc(&p, &g) > 1.0 - 1e-12 {
            let (a, b) = (p.to_array(), g.to_array());
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
        }
    }

    #[test]
    fn translation_and_scale_invariance(p in boxes(), g in boxes(), dx in -30.0..30.0f64, dy in -30.0..30.0f64, s in 0.1..10.0f64) {
        let (pt, gt) = (p.translate(dx, dy).unwrap(), g.translate(dx, dy).unwrap());
        let (ps, gs) = (p.scale(s).unwrap(), g.scale(s).unwrap());
        for f in [iou, uoc, wuoc, msoc] {
            let v = f(&p, &g);
            prop_assert!((f(&pt, &gt) - v).abs() < 1e-9);
            prop_assert!((f(&ps, &gs) - v).abs() < 1e-9);
        }
    }
}

fn grids() -> impl Strategy<Value = (FeatureGrid<f32>, usize)> {
    (prop::sample::select(vec![1usize, 2, 4]), 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(r, k, h, w)| {
        let c = k * r * r;
        prop::collection::vec(-1e3f32..1e3, c * h * w)
            .prop_map(move |data| (FeatureGrid::from_vec(c, h, w, data).unwrap(), r))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn defocus_round_trip_and_shape((x, r) in grids()) {
        let y = defocus(&x, r).unwrap();
        prop_assert_eq!(y.shape(), (x.c / (r * r), x.h * r, x.w * r));
        prop_assert_eq!(&refocus(&y, r).unwrap(), &x);
        let mut a = x.data.clone();
        let mut b = y.data.clone();
        a.sort_by(|u, v| u.total_cmp(v));
        b.sort_by(|u, v| u.total_cmp(v));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn annotation_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_annotations(&String::from_utf8_lossy(&bytes));
    }

    #[test]
    fn annotation_parser_rejects_mutated_records(
        field in prop::sample::select(vec!["image", "objects", "heads", "gaze", "version", "box", "class", "point", "object", "head"]),
        value in prop::sample::select(vec!["null", "-1", "\"x\"", "[]", "[1,2]", "[5,5,1,1]", "1e400"]),
    ) {
        let good = r#"{"version":"goomini-1","scenes":[{"image":"images/000000.png","objects":[{"box":[10,10,40,40],"class":3}],"heads":[[100,150,124,174]],"gaze":[{"head":0,"point":[0.1,0.1],"object":0}]}]}"#;
        prop_assert!(parse_annotations(good).is_ok());
        let needle = format!("\"{field}\":");
        let at = good.find(&needle).unwrap() + needle.len();
        let end = {
            let rest = &good[at..];
            let mut depth = 0i32;
            let mut cut = rest.len();
            for (i, ch) in rest.char_indices() {
                match ch {
                    '[' | '{' => depth += 1,
                    ']' | '}' if depth == 0 => { cut = i; break; }
                    ']' | '}' => depth -= 1,
                    ',' if depth == 0 => { cut = i; break; }
                    _ => {}
                }
            }
            at + cut
        };
        let bad = format!("{}{}{}", &good[..at], value, &good[end..]);
        // Mutations either fail cleanly or still describe a valid dataset.
        if let Ok(scenes) = parse_annotations(&bad) {
            for (i, s) in scenes.iter().enumerate() {
                prop_assert!(s.validate(i).is_ok());
            }
        }
    }
}

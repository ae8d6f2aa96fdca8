use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subjectflow::encoders::Vocab;
use subjectflow::numerics::Tensor;
use subjectflow::synthdata::io::{dump_video, load_tensor, read_tensor, write_tensor};
use subjectflow::synthdata::render::{coverage, footprint};
use subjectflow::synthdata::*;

fn spec(shape: ShapeKind, color: usize, size: f64, motion: (f64, f64), start: (f64, f64)) -> SubjectSpec {
    SubjectSpec { shape, color: ColorId(color), size, motion, start }
}

/// Pixels classified as `color` in frame `f`.
fn color_mask(video: &Tensor, f: usize, color: ColorId) -> Vec<bool> {
    let s = video.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let d = &video.data()[f * 3 * plane..(f + 1) * 3 * plane];
    (0..plane).map(|i| classify_pixel([d[i], d[plane + i], d[2 * plane + i]]) == Some(color)).collect()
}

fn centroid(mask: &[bool], w: usize) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            sx += (i % w) as f64 + 0.5;
            sy += (i / w) as f64 + 0.5;
            n += 1.0;
        }
    }
    (sx / n, sy / n)
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    inter / union
}

#[test]
fn static_subject_repeats_frames() {
    let v = render_clip(&[spec(ShapeKind::Square, 0, 5.0, (0.0, 0.0), (16.0, 16.0))], 4, 32, 32).unwrap();
    let first = v.slice_outer(0, 1).unwrap();
    for f in 1..4 {
        assert_eq!(v.slice_outer(f, f + 1).unwrap(), first);
    }
}

#[test]
fn centroid_tracks_motion() {
    for shape in ShapeKind::ALL {
        let v = render_clip(&[spec(shape, 3, 5.0, (1.0, 0.0), (8.3, 15.7))], 8, 32, 32).unwrap();
        let c0 = centroid(&color_mask(&v, 0, ColorId(3)), 32);
        for f in 1..8 {
            let c = centroid(&color_mask(&v, f, ColorId(3)), 32);
            assert!((c.0 - c0.0 - f as f64).abs() <= 0.5, "{shape:?} frame {f}: {c:?} vs {c0:?}");
            assert!((c.1 - c0.1).abs() <= 0.5);
        }
    }
}

#[test]
fn disjoint_trajectories_give_disjoint_masks() {
    let a = spec(ShapeKind::Circle, 0, 4.0, (1.0, 0.0), (6.0, 6.0));
    let b = spec(ShapeKind::Triangle, 2, 4.0, (-1.0, 0.0), (25.0, 24.0));
    let v = render_clip(&[a, b], 8, 32, 32).unwrap();
    for f in 0..8 {
        let (ma, mb) = (color_mask(&v, f, a.color), color_mask(&v, f, b.color));
        assert!(ma.iter().zip(&mb).all(|(x, y)| !(x & y)));
        assert!(ma.iter().any(|&x| x) && mb.iter().any(|&x| x));
    }
}

#[test]
fn leaving_the_frame_is_rejected_at_spec_time() {
    let s = spec(ShapeKind::Circle, 0, 4.0, (2.0, 0.0), (20.0, 16.0));
    assert!(s.validate(8, 32, 32).is_err());
    assert!(render_clip(&[s], 8, 32, 32).is_err());
    assert!(s.validate(3, 32, 32).is_ok());
}

#[test]
fn prompts_follow_the_grammar() {
    let vocab = Vocab::toy();
    let red = spec(ShapeKind::Circle, 0, 4.0, (1.0, 0.0), (8.0, 8.0));
    let blue = spec(ShapeKind::Square, 2, 4.0, (0.0, -1.0), (24.0, 24.0));
    let t = make_prompt(&vocab, &[red]).unwrap();
    assert_eq!(vocab.detokenize(&t).unwrap(), "red circle moves right");
    let t = make_prompt(&vocab, &[red, blue]).unwrap();
    assert_eq!(vocab.detokenize(&t).unwrap(), "red circle moves right and blue square moves up");
}

#[test]
fn conflict_prompt_names_a_far_color() {
    let vocab = Vocab::toy();
    let g = Geometry::default();
    let m = build_corpus(0, 30, &[Mode::Conflict], &g, 5).unwrap();
    for r in &m.records {
        let s = generate_sample(&vocab, &g, r).unwrap();
        let named = s.prompt_colors[0];
        // Dominant reference color by palette lookup over its pixels.
        let img = &s.ref_images[0].pixels;
        let plane = img.shape()[1] * img.shape()[2];
        let d = img.data();
        let mut counts = [0usize; 8];
        for i in 0..plane {
            if let Some(c) = classify_pixel([d[i], d[plane + i], d[2 * plane + i]]) {
                counts[c.0] += 1;
            }
        }
        let dominant = (0..8).max_by_key(|&c| counts[c]).unwrap();
        assert_eq!(dominant, s.subjects[0].color.0);
        assert_ne!(named.0, dominant);
        assert!(rgb_distance_ok(named.rgb(), PALETTE[dominant].1));
        let word = vocab.word(s.prompt_tokens[0]).unwrap();
        assert_eq!(word, named.name());
    }
}

fn rgb_distance_ok(a: Rgb, b: Rgb) -> bool {
    palette::rgb_distance(a, b) >= 0.5
}

#[test]
fn references_without_augmentation_are_clean_centered_renders() {
    let s = spec(ShapeKind::Triangle, 4, 5.0, (1.0, 0.0), (8.0, 8.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let refs = make_references(&[s], 32, 32, false, &mut rng).unwrap();
    let centered = SubjectSpec { start: (16.0, 16.0), motion: (0.0, 0.0), ..s };
    let clean = render_clip(&[centered], 1, 32, 32).unwrap();
    assert_eq!(refs[0].pixels.data(), clean.data());
}

#[test]
fn scaled_reference_area_grows_quadratically() {
    for shape in ShapeKind::ALL {
        let s = spec(shape, 1, 9.0, (0.0, 0.0), (16.0, 16.0));
        let area = |scale: f64| {
            let img = render_reference(&s, Augmentation { rotation: 0.0, scale }, 32, 32).unwrap();
            color_mask(&Tensor::new(&[1, 3, 32, 32], img.into_data()).unwrap(), 0, s.color).iter().filter(|&&m| m).count()
                as f64
        };
        let ratio = area(1.3) / area(1.0);
        assert!((ratio / 1.69 - 1.0).abs() <= 0.10, "{shape:?}: {ratio}");
    }
}

#[test]
fn augmentation_is_seeded() {
    let s = spec(ShapeKind::Square, 5, 5.0, (0.0, 0.0), (16.0, 16.0));
    let a = make_references(&[s], 32, 32, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = make_references(&[s], 32, 32, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corpus_tiers_and_modes() {
    let vocab = Vocab::toy();
    let g = Geometry::default();
    let m = build_corpus(7, 20, &[Mode::Single], &g, 3).unwrap();
    assert_eq!((m.count(Tier::Core), m.count(Tier::Full)), (7, 20));
    for r in &m.records {
        assert_eq!(generate_sample(&vocab, &g, r).unwrap().k(), 1);
    }
    assert!(build_corpus(5, 4, &[Mode::Single], &g, 3).is_err());
    let m = build_corpus(4, 12, &[Mode::Single, Mode::Multi], &g, 3).unwrap();
    for r in m.records.iter().filter(|r| r.tier == Tier::Core) {
        let s = generate_sample(&vocab, &g, r).unwrap();
        assert_eq!(s.mode, Mode::Single);
        let (dx, dy) = s.subjects[0].motion;
        assert_eq!(dx.abs() + dy.abs(), g.core_speed);
    }
    assert!(m.records.iter().any(|r| r.mode == Mode::Multi && r.k == 2));
}

#[test]
fn corpus_is_reproducible_from_its_manifest() {
    let vocab = Vocab::toy();
    let g = Geometry::default();
    let m = build_corpus(3, 6, &[Mode::Single, Mode::Multi, Mode::Conflict], &g, 11).unwrap();
    let again = Manifest::parse(&m.to_text()).unwrap();
    assert_eq!(m, again);
    for (a, b) in m.records.iter().zip(&again.records) {
        assert_eq!(generate_sample(&vocab, &g, a).unwrap(), generate_sample(&vocab, &g, b).unwrap());
    }
}

#[test]
fn tensor_container_round_trips() {
    let t = Tensor::randn(&[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(0));
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t).unwrap();
    assert_eq!(&buf[..4], b"SFTN");
    assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_tensor(&bad[..]).is_err());

    let dir = std::env::temp_dir().join(format!("sf-dump-{}", std::process::id()));
    let v = render_clip(&[spec(ShapeKind::Circle, 0, 4.0, (0.0, 0.0), (8.0, 8.0))], 2, 16, 16).unwrap();
    dump_video(&dir, "clip", &v).unwrap();
    assert_eq!(load_tensor(&dir.join("clip.sft")).unwrap(), v);
    let ppm = std::fs::read(dir.join("clip_f01.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
    std::fs::remove_dir_all(dir).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segmentation_recovers_footprint(
        shape in 0usize..3,
        color in 0usize..8,
        size in 4.0f64..6.0,
        cx in 7.0f64..25.0,
        cy in 7.0f64..25.0,
    ) {
        let shape = ShapeKind::ALL[shape];
        let s = spec(shape, color, size, (0.0, 0.0), (cx, cy));
        let v = render_clip(&[s], 1, 32, 32).unwrap();
        let seg = color_mask(&v, 0, s.color);
        let truth = footprint(shape, (cx, cy), size, 0.0, 32, 32);
        let score = iou(&seg, &truth);
        prop_assert!(score >= 0.9, "{:?} r={} iou={}", shape, size, score);
    }

    #[test]
    fn coverage_is_a_fraction(size in 1.0f64..6.0, angle in -1.0f64..1.0) {
        let c = coverage(ShapeKind::Square, (10.0, 10.0), size, angle, 20, 20);
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}


use proptest::prelude::*;
use tubesal::datapipe::{
    generate_synthetic, generate_synthetic_set, load_dataset, sample_clip, write_dataset, Difficulty, Shape,
    SyntheticConfig,
};

fn config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        height: 48,
        width: 40,
        frames: 30,
        num_objects: 3,
        shapes: vec![Shape::Disk, Shape::Square, Shape::Disk],
        object_size: 5.5,
        velocities: vec![(1.3, -0.7), (-2.1, 0.4), (0.0, 1.9)],
        shift_times: vec![7, 19, 23],
        camera_drift: (0.5, -0.25),
        noise_level: 0.2,
        seed,
    }
}

/// Pixels whose centre lies in the shape, counted row by row from the
/// shape's horizontal extent at each centre height.
fn area_oracle(shape: Shape, cx: f64, cy: f64, r: f64, h: usize, w: usize) -> usize {
    let mut count = 0;
    for y in 0..h {
        let py = y as f64 + 0.5;
        let dy = (py - cy).abs();
        if dy > r {
            continue;
        }
        let half = match shape {
            Shape::Disk => (r * r - dy * dy).sqrt(),
            Shape::Square => r,
        };
        // integer x with x + 0.5 in [cx - half, cx + half]
        let lo = ((cx - half - 0.5).ceil() as i64).max(0);
        let hi = ((cx + half - 0.5).floor() as i64).min(w as i64 - 1);
        if hi >= lo {
            count += (hi - lo + 1) as usize;
        }
    }
    count
}

#[test]
fn same_seed_same_video() {
    let a = generate_synthetic(&config(11), "a").unwrap();
    let b = generate_synthetic(&config(11), "a").unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&config(12), "a").unwrap();
    assert_ne!(a.video.frames, c.video.frames);
}

#[test]
fn mask_area_matches_rasterization_oracle() {
    for seed in 0..5 {
        let cfg = config(seed);
        let v = generate_synthetic(&cfg, "v").unwrap();
        for t in 0..cfg.frames {
            let id = v.salient_ids[t];
            let (cx, cy) = v.centres[t][id];
            let expect = area_oracle(v.shapes[id], cx, cy, cfg.object_size, cfg.height, cfg.width);
            let got = v.video.masks[t].data().iter().filter(|&&m| m == 1.0).count();
            assert_eq!(got, expect, "seed {seed} frame {t}");
            assert!(v.video.masks[t].data().iter().all(|&m| m == 0.0 || m == 1.0));
        }
    }
}

#[test]
fn salient_identity_changes_exactly_at_shift_times() {
    let cfg = config(3);
    let v = generate_synthetic(&cfg, "v").unwrap();
    assert_eq!(v.salient_ids[0], 0);
    for t in 1..cfg.frames {
        let changed = v.salient_ids[t] != v.salient_ids[t - 1];
        assert_eq!(changed, cfg.shift_times.contains(&t), "frame {t}");
        assert!(v.salient_ids[t] < cfg.num_objects);
    }
}

#[test]
fn shift_moves_mask_to_other_object() {
    // seeds where the two squares touch at the shift are skipped
    let cfg = SyntheticConfig {
        height: 64,
        width: 64,
        frames: 20,
        num_objects: 2,
        shapes: vec![Shape::Square],
        object_size: 6.0,
        velocities: vec![(0.0, 1.0), (0.0, -1.0)],
        shift_times: vec![10],
        camera_drift: (0.0, 0.0),
        noise_level: 0.0,
        seed: 1,
    };
    for seed in 0..20 {
        let v = generate_synthetic(&SyntheticConfig { seed, ..cfg.clone() }, "v").unwrap();
        let (a, b) = (v.centres[10][0], v.centres[10][1]);
        if (a.0 - b.0).abs() <= 2.0 * cfg.object_size + 1.0 && (a.1 - b.1).abs() <= 2.0 * cfg.object_size + 1.0 {
            continue;
        }
        let before = v.video.masks[9].data();
        let after = v.video.masks[10].data();
        // the frame-10 mask marks object 1, which must not cover object 0's frame-10 pixels
        let obj0_now = area_oracle(Shape::Square, a.0, a.1, cfg.object_size, 64, 64);
        assert!(obj0_now > 0);
        assert!(before.iter().any(|&m| m == 1.0) && after.iter().any(|&m| m == 1.0));
        for y in 0..64 {
            for x in 0..64 {
                let inside0 = Shape::Square.contains(a.0, a.1, cfg.object_size, x as f64 + 0.5, y as f64 + 0.5);
                if inside0 {
                    assert_eq!(after[y * 64 + x], 0.0);
                }
            }
        }
    }
}

#[test]
fn dataset_roundtrip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { frames: 6, ..config(5) };
    let videos: Vec<_> = generate_synthetic_set(&cfg, 2)
        .unwrap()
        .into_iter()
        .map(|s| s.video)
        .collect();
    write_dataset(dir.path(), "train", &videos).unwrap();
    let mut easy = videos[0].clone();
    easy.id = "e1".into();
    write_dataset(dir.path(), "Easy-1", &[easy]).unwrap();
    assert!(dir.path().join("train/syn_000/frames/00005.ppm").is_file());
    assert!(dir.path().join("train/syn_001/gt/00000.pgm").is_file());

    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded[0].difficulty, Difficulty::Easy);
    assert_eq!(loaded[1].id, "syn_000");
    assert_eq!(loaded[1].difficulty, Difficulty::Synthetic);
    for (orig, back) in videos.iter().zip(&loaded[1..]) {
        assert_eq!(orig.masks, back.masks);
        for (a, b) in orig.frames.iter().zip(&back.frames) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clips_are_in_range_and_consistent(seed in 0u64..1000, depth in 1usize..5, stride in 1usize..4, extra in 0usize..10) {
        let cfg = SyntheticConfig { height: 16, width: 24, frames: 30, object_size: 3.0, ..config(seed) };
        let v = generate_synthetic(&cfg, "p").unwrap().video;
        let t_last = ((depth - 1) * stride + extra).min(cfg.frames - 1);
        let clip = sample_clip(&v, t_last, depth, stride).unwrap();
        prop_assert_eq!(clip.frames.shape(), &[depth, 3, 16, 24]);
        prop_assert_eq!(clip.prior_maps.shape(), &[depth, 1, 16, 24]);
        prop_assert_eq!(clip.target_map.shape(), &[1, 16, 24]);
        for t in [&clip.frames, &clip.prior_maps, &clip.target_map] {
            prop_assert!(t.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let idx = &clip.meta.frame_indices;
        prop_assert!(idx.windows(2).all(|w| w[1] - w[0] == stride));
    }
}

use bout_core::analysis::{
    aggregate_heatmaps, confidence, confidence_in_base, confidence_windows, corner_mass, event_time_distribution,
    frame_relevance_distribution, overlay_image, render_overlay, GroupBy, Region,
};
use bout_core::explain::{Method, RelevanceRecord};
use bout_core::twostream::Stream;
use bout_core::Frame;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(values: Vec<f32>, shape: [usize; 3], class: usize, p0: f64) -> RelevanceRecord {
    RelevanceRecord {
        event_id: "video_0001_s0000".into(),
        label: class as u8,
        target_class: class,
        method: Method::Dtd,
        stream: Stream::Temporal,
        decomposed_output: values.iter().map(|&v| v as f64).sum(),
        probabilities: [p0, 1.0 - p0],
        flip: false,
        crop_offset: (0, 0),
        frame_size: shape[1],
        frame_indices: (0..=shape[0] / 2).map(|k| (k * 3) as u16).collect(),
        shape: shape.to_vec(),
        values,
    }
}

#[test]
fn uniform_relevance_spreads_evenly_over_frames() {
    let d = frame_relevance_distribution(&vec![1.0; 170 * 4], 170).unwrap();
    assert_eq!(d.len(), 85);
    assert!(d.iter().all(|&v| v == 8.0));
}

#[test]
fn channel_pair_maps_to_one_frame() {
    let plane = 9;
    let mut v = vec![0.0f32; 170 * plane];
    for x in &mut v[14 * plane..16 * plane] {
        *x = 1.0;
    }
    let d = frame_relevance_distribution(&v, 170).unwrap();
    for (k, &m) in d.iter().enumerate() {
        assert_eq!(m, if k == 7 { 18.0 } else { 0.0 });
    }
    assert!(frame_relevance_distribution(&[1.0; 3], 1).is_err());
}

#[test]
fn event_time_profile_spreads_each_flow_over_its_span() {
    // 2 flow frames between event frames 0 -> 3 -> 6
    let mut r = record(vec![0.0; 4], [4, 1, 1], 0, 0.9);
    r.values = vec![3.0, 0.0, 6.0, 0.0];
    let d = event_time_distribution(&[r], 10).unwrap();
    assert_eq!(&d[..7], &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 0.0]);
}

#[test]
fn single_and_identical_maps() {
    let r = record((0..2 * 3 * 3).map(|v| v as f32).collect(), [2, 3, 3], 0, 0.8);
    let one = aggregate_heatmaps(std::slice::from_ref(&r), GroupBy::All).unwrap();
    assert_eq!(one[0].mean_map, r.channel_sum());
    let two = aggregate_heatmaps(&[r.clone(), r.clone()], GroupBy::All).unwrap();
    assert_eq!(two[0].mean_map, r.channel_sum());
    assert_eq!(two[0].count, 2);
}

#[test]
fn class_groups_skip_empty_classes() {
    let a = record(vec![1.0; 8], [2, 2, 2], 0, 0.9);
    let b = record(vec![2.0; 8], [2, 2, 2], 0, 0.8);
    let groups = aggregate_heatmaps(&[a, b], GroupBy::Class).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].key, "class0");
    assert_eq!(groups[0].mean_map, vec![3.0; 4]);
}

#[test]
fn confidence_formula() {
    assert_eq!(confidence(0.5, 0.5), 0.0);
    assert!((confidence(0.9, 0.1) - (-3.084)).abs() < 1e-3);
    // probabilities at the boundary are clamped, not infinite
    assert!(confidence(1.0, 0.0).is_finite());
    assert!(confidence(0.0, 1.0).is_finite());
}

#[test]
fn window_counts_and_partial_flag() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mk = |n: usize, rng: &mut ChaCha8Rng| -> Vec<RelevanceRecord> {
        (0..n).map(|_| record(vec![1.0; 4], [2, 1, 2], 0, rng.gen_range(0.5..0.999))).collect()
    };
    let w = confidence_windows(&mk(312, &mut rng), 104).unwrap();
    assert_eq!(w.len(), 3);
    assert!(w.iter().all(|w| !w.aggregate.partial && w.aggregate.count == 104));
    let w = confidence_windows(&mk(313, &mut rng), 104).unwrap();
    assert_eq!(w.len(), 4);
    assert!(w[3].aggregate.partial && w[3].aggregate.count == 1);
    // positives are excluded
    let mut recs = mk(10, &mut rng);
    recs.push(record(vec![1.0; 4], [2, 1, 2], 1, 0.2));
    let total: usize = confidence_windows(&recs, 4).unwrap().iter().map(|w| w.aggregate.count).sum();
    assert_eq!(total, 10);
}

#[test]
fn delta_map_tints_exactly_one_pixel() {
    let base = Frame::new(4, 4, (0..16).map(|v| (v * 10) as u8).collect()).unwrap();
    let zero = overlay_image(&base, &[0.0; 16]).unwrap();
    for (i, p) in zero.pixels().enumerate() {
        let g = base.pixels()[i];
        assert_eq!(p.0, [g, g, g]);
    }
    let mut delta = vec![0.0; 16];
    delta[5] = 3.0;
    let img = overlay_image(&base, &delta).unwrap();
    let tinted = img.pixels().filter(|p| p.0[0] != p.0[1]).count();
    assert_eq!(tinted, 1);
    assert_eq!(img.get_pixel(1, 1).0, [255, 0, 0]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.png");
    render_overlay(&base, &delta, &path).unwrap();
    assert!(path.exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_accounting(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<_> = (0..n)
            .map(|_| record((0..2 * 4 * 4).map(|_| rng.gen_range(0.0f32..5.0)).collect(), [2, 4, 4], 0, 0.7))
            .collect();
        let agg = &aggregate_heatmaps(&recs, GroupBy::All).unwrap()[0];
        let per_sample: f64 = recs.iter().map(|r| r.channel_sum().iter().sum::<f64>()).sum();
        prop_assert!((agg.mean_total() * n as f64 - per_sample).abs() <= 1e-6 * per_sample.abs().max(1.0));
        prop_assert!((agg.total_relevance - per_sample).abs() <= 1e-9 * per_sample.abs().max(1.0));
    }

    #[test]
    fn sort_order_is_base_invariant(ps in proptest::collection::vec(0.5001f64..0.9999, 2..40)) {
        let mut by_e: Vec<usize> = (0..ps.len()).collect();
        let mut by_10 = by_e.clone();
        by_e.sort_by(|&a, &b| confidence(ps[a], 1.0 - ps[a]).total_cmp(&confidence(ps[b], 1.0 - ps[b])));
        by_10.sort_by(|&a, &b| {
            confidence_in_base(ps[a], 1.0 - ps[a], 10.0).total_cmp(&confidence_in_base(ps[b], 1.0 - ps[b], 10.0))
        });
        // ties may order differently; compare the sorted confidence values instead
        let e: Vec<f64> = by_e.iter().map(|&i| ps[i]).collect();
        let t: Vec<f64> = by_10.iter().map(|&i| ps[i]).collect();
        prop_assert_eq!(e, t);
    }

    #[test]
    fn corner_mass_is_flip_consistent(size in 16usize..80, top in 0usize..8, left in 0usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = size + 8;
        let map: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let region = Region::masked_corners(frame, (top, left), size, size);
        let flipped: Vec<f64> = (0..size * size).map(|i| map[(size - 1 - i / size) * size + i % size]).collect();
        let a = corner_mass(&map, size, &region);
        let b = corner_mass(&flipped, size, &region.flip_vertical(size));
        prop_assert!((a - b).abs() < 1e-12);
    }
}

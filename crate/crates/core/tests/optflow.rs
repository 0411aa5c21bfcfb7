use bout_core::optflow::{farneback_flow, FlowField, FlowParams};
use bout_core::synthgen::{render_tail, TailPose, N_SEGMENTS};
use bout_core::Frame;

fn texture(r: f64, c: f64) -> f64 {
    128.0 + 45.0 * (0.31 * r + 0.17 * c).sin() + 35.0 * (0.23 * c - 0.29 * r).cos() + 20.0 * (0.11 * r * 0.7 + 0.41 * c).sin()
}

/// Flat background with a textured square whose content is offset by `shift`.
fn patch_scene(h: usize, w: usize, top: usize, left: usize, size: usize, shift: (isize, isize)) -> Frame {
    let mut px = vec![200u8; h * w];
    let (sr, sc) = shift;
    for r in 0..size {
        for c in 0..size {
            let rr = (top as isize + r as isize + sr) as usize;
            let cc = (left as isize + c as isize + sc) as usize;
            px[rr * w + cc] = texture(r as f64, c as f64).round() as u8;
        }
    }
    Frame::new(h, w, px).unwrap()
}

/// Integer shift minimizing the SAD of a block between two frames.
fn block_match(a: &Frame, b: &Frame, top: usize, left: usize, size: usize, radius: isize) -> (isize, isize) {
    let mut best = (0, 0);
    let mut best_cost = u64::MAX;
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let mut cost = 0u64;
            for r in top..top + size {
                for c in left..left + size {
                    let x = a.get(r, c) as i64;
                    let y = b.get((r as isize + dr) as usize, (c as isize + dc) as usize) as i64;
                    cost += (x - y).unsigned_abs();
                }
            }
            if cost < best_cost {
                best_cost = cost;
                best = (dr, dc);
            }
        }
    }
    best
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

fn region(flow: &FlowField, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> (Vec<f32>, Vec<f32>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in rows {
        for c in cols.clone() {
            let (dx, dy) = flow.at(r, c);
            xs.push(dx);
            ys.push(dy);
        }
    }
    (xs, ys)
}

#[test]
fn translated_patch_matches_block_matching() {
    let prev = patch_scene(96, 96, 28, 28, 40, (0, 0));
    // content moves 3 px right (columns) and 2 px up (rows)
    let next = patch_scene(96, 96, 28, 28, 40, (-2, 3));
    let (or, oc) = block_match(&prev, &next, 36, 36, 24, 5);
    assert_eq!((oc, or), (3, -2));

    let flow = farneback_flow(&prev, &next, &FlowParams::default()).unwrap();
    let (xs, ys) = region(&flow, 36..60, 36..60);
    let (mx, my) = (median(xs), median(ys));
    assert!((mx - oc as f32).abs() < 0.5, "median dx {mx}");
    assert!((my - or as f32).abs() < 0.5, "median dy {my}");
}

#[test]
fn flow_is_approximately_antisymmetric() {
    let prev = patch_scene(96, 96, 28, 28, 40, (0, 0));
    let next = patch_scene(96, 96, 28, 28, 40, (-2, 3));
    let fwd = farneback_flow(&prev, &next, &FlowParams::default()).unwrap();
    let bwd = farneback_flow(&next, &prev, &FlowParams::default()).unwrap();
    let (fx, fy) = region(&fwd, 36..60, 36..60);
    let (bx, by) = region(&bwd, 36..60, 36..60);
    let sx = median(fx.iter().zip(&bx).map(|(a, b)| (a + b).abs()).collect());
    let sy = median(fy.iter().zip(&by).map(|(a, b)| (a + b).abs()).collect());
    assert!(sx < 0.5 && sy < 0.5, "residual ({sx}, {sy})");
}

#[test]
fn integer_translation_of_both_frames_leaves_flow_unchanged() {
    let big_prev = patch_scene(140, 140, 40, 40, 50, (0, 0));
    let big_next = patch_scene(140, 140, 40, 40, 50, (1, 2));
    let window = |f: &Frame, top: usize, left: usize| f.crop(top, left, 100, 100).unwrap();
    let params = FlowParams::default();
    let a = farneback_flow(&window(&big_prev, 10, 10), &window(&big_next, 10, 10), &params).unwrap();
    let (dr, dc) = (7usize, 4usize);
    let b = farneback_flow(&window(&big_prev, 10 + dr, 10 + dc), &window(&big_next, 10 + dr, 10 + dc), &params).unwrap();
    // interior of the moving patch, expressed in each window's coordinates
    let mut diffs = Vec::new();
    for r in 40..60 {
        for c in 40..60 {
            let (ax, ay) = a.at(r, c);
            let (bx, by) = b.at(r - dr, c - dc);
            diffs.push((ax - bx).abs().max((ay - by).abs()));
        }
    }
    let m = median(diffs);
    assert!(m < 0.1, "median difference {m}");
}

fn tail_frame(pose: &TailPose, h: usize, w: usize) -> Frame {
    let mut canvas = vec![225.0; h * w];
    render_tail(&mut canvas, w, h, pose);
    Frame::new(h, w, canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()).unwrap()
}

#[test]
fn fast_tail_tip_motion_is_recovered() {
    let base = TailPose::straight((128.5, 40.5));
    let bend = |total_deg: f64| {
        let mut p = base.clone();
        let per = total_deg.to_radians() / N_SEGMENTS as f64;
        p.joint_angles = vec![per; N_SEGMENTS];
        p
    };
    // find the uniform bend whose tip moves 10 px relative to the previous pose
    let prev_pose = bend(20.0);
    let prev_tip = *prev_pose.points().last().unwrap();
    let tip_shift = |deg: f64| {
        let t = *bend(deg).points().last().unwrap();
        ((t.0 - prev_tip.0).powi(2) + (t.1 - prev_tip.1).powi(2)).sqrt()
    };
    let mut deg = 20.0;
    while tip_shift(deg) < 10.0 {
        deg += 0.05;
    }
    let next_pose = bend(deg);
    let prev = tail_frame(&prev_pose, 256, 256);
    let next = tail_frame(&next_pose, 256, 256);
    let flow = farneback_flow(&prev, &next, &FlowParams::default()).unwrap();

    let (pp, np) = (prev_pose.points(), next_pose.points());
    let j = N_SEGMENTS - 1;
    let truth = (np[j].1 - pp[j].1, np[j].0 - pp[j].0);
    let (r, c) = (pp[j].0.round() as usize, pp[j].1.round() as usize);
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0);
    for rr in r - 1..=r + 1 {
        for cc in c - 1..=c + 1 {
            let (dx, dy) = flow.at(rr, cc);
            sx += dx as f64;
            sy += dy as f64;
            n += 1.0;
        }
    }
    let est = (sx / n, sy / n);
    let err = ((est.0 - truth.0).powi(2) + (est.1 - truth.1).powi(2)).sqrt();
    let mag = (truth.0.powi(2) + truth.1.powi(2)).sqrt();
    assert!(err / mag < 0.25, "estimated {est:?} truth {truth:?}");
}

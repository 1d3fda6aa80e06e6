use proptest::prelude::*;

use super::*;

fn grid(h: usize, w: usize) -> GridSpec {
    GridSpec::new(h, w, 1.0).unwrap()
}

fn gt_frames(g: GridSpec, maps: Vec<Vec<u32>>) -> Vec<BevFrameGT> {
    maps.into_iter()
        .enumerate()
        .map(|(t, ids)| BevFrameGT {
            grid: g,
            frame: t,
            backward_flow: vec![0.0; 2 * ids.len()],
            flow_valid: vec![false; ids.len()],
            instance_ids: ids,
            boxes: Default::default(),
            classes: Default::default(),
        })
        .collect()
}

fn whole() -> RoiSpec {
    RoiSpec::new("all", 1e3).unwrap()
}

#[test]
fn iou_hand_cases() {
    let g = grid(4, 4);
    // 8-cell object in the top two rows
    let mut gt = vec![0u32; 16];
    gt[..8].iter_mut().for_each(|v| *v = 1);
    let frames = gt_frames(g, vec![gt.clone()]);
    let same = InstanceSegResult::from_gt(&frames);
    assert_eq!(foreground_iou(&same, &frames, &whole()).unwrap(), 1.0);
    let none = InstanceSegResult::empty(g, 1);
    assert_eq!(foreground_iou(&none, &frames, &whole()).unwrap(), 0.0);
    let mut half = vec![0u32; 16];
    half[..4].iter_mut().for_each(|v| *v = 7);
    let half = InstanceSegResult { grid: g, frames: vec![half] };
    assert_eq!(foreground_iou(&half, &frames, &whole()).unwrap(), 0.5);
    // IoU of exactly 0.5 is not a match
    assert_eq!(vpq(&half, &frames, &whole()).unwrap(), 0.0);
}

#[test]
fn vpq_single_match_at_point_six() {
    let g = grid(3, 3);
    let gt = vec![1, 1, 1, 1, 1, 0, 0, 0, 0];
    let pred = vec![4, 4, 4, 0, 0, 0, 0, 0, 0];
    let frames = gt_frames(g, vec![gt]);
    let p = InstanceSegResult { grid: g, frames: vec![pred] };
    assert!((vpq(&p, &frames, &whole()).unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn vpq_id_switch_counts_fp_and_fn() {
    let g = grid(2, 4);
    let a = vec![1, 1, 0, 0, 1, 1, 0, 0];
    let b = vec![0, 0, 2, 2, 0, 0, 2, 2];
    let gt: Vec<u32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let frames = gt_frames(g, vec![gt.clone(), gt.clone()]);
    let swapped: Vec<u32> = gt.iter().map(|&v| [0, 20, 10][v as usize]).collect();
    let straight: Vec<u32> = gt.iter().map(|&v| [0, 10, 20][v as usize]).collect();
    let p = InstanceSegResult {
        grid: g,
        frames: vec![straight.clone(), swapped],
    };
    let mut acc = MetricAccumulator::new(whole(), 2);
    acc.add(&p, &frames).unwrap();
    assert_eq!(acc.frames[0], PqCounts { iou_sum: 2.0, tp: 2, fp: 0, fn_: 0 });
    assert_eq!(acc.frames[1], PqCounts { iou_sum: 0.0, tp: 0, fp: 2, fn_: 2 });
    // (1 + 0/2) / 2
    assert_eq!(acc.vpq(), 0.5);
    assert_eq!(acc.id_consistency(), 0.0);
    let good = InstanceSegResult {
        grid: g,
        frames: vec![straight.clone(), straight],
    };
    assert_eq!(vpq(&good, &frames, &whole()).unwrap(), 1.0);
    assert!(vpq(&p, &frames, &whole()).unwrap() < 1.0);
}

#[test]
fn grid_mismatch_rejected() {
    let frames = gt_frames(grid(2, 2), vec![vec![0; 4]]);
    let p = InstanceSegResult::empty(grid(1, 4), 1);
    assert!(foreground_iou(&p, &frames, &whole()).is_err());
    let p2 = InstanceSegResult::empty(grid(2, 2), 2);
    assert!(vpq(&p2, &frames, &whole()).is_err());
}

#[test]
fn roi_presets() {
    let g = GridSpec::new(96, 96, 0.5).unwrap();
    assert_eq!(RoiSpec::near().mask(&g).iter().filter(|&&v| v).count(), 60 * 60);
    assert!(RoiSpec::far().clamped(&g));
    assert!(RoiSpec::far().mask(&g).iter().all(|&v| v));
    assert!(RoiSpec::new("x", 0.0).is_err());
    assert!(RoiSpec::new("x", f64::NAN).is_err());
}

#[test]
fn near_roi_ignores_far_cells() {
    let g = GridSpec::new(40, 40, 1.0).unwrap();
    let near = RoiSpec::near();
    let mask = near.mask(&g);
    let mut gt = vec![0u32; 1600];
    for r in 18..22 {
        for c in 18..23 {
            gt[r * 40 + c] = 1;
        }
    }
    gt[0] = 2;
    let frames = gt_frames(g, vec![gt.clone()]);
    let mut corrupted = gt.clone();
    for (i, v) in corrupted.iter_mut().enumerate() {
        if !mask[i] {
            *v = (i % 3) as u32 * 5;
        }
    }
    let p = InstanceSegResult { grid: g, frames: vec![corrupted] };
    assert_eq!(foreground_iou(&p, &frames, &near).unwrap(), 1.0);
    assert_eq!(vpq(&p, &frames, &near).unwrap(), 1.0);
    assert!(vpq(&p, &frames, &whole()).unwrap() < 1.0);
}

#[test]
fn box_iou_cases() {
    let b = |cx: f64, cy: f64, l: f64, w: f64, yaw: f64| AgentBox {
        cx,
        cy,
        length: l,
        width: w,
        yaw,
        vx: 0.0,
        vy: 0.0,
        yaw_rate: 0.0,
    };
    assert!((box_iou(&b(0.0, 0.0, 4.0, 2.0, 0.3), &b(0.0, 0.0, 4.0, 2.0, 0.3)) - 1.0).abs() < 1e-12);
    assert!((box_iou(&b(0.0, 0.0, 2.0, 2.0, 0.0), &b(1.0, 0.0, 2.0, 2.0, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    assert!((box_iou(&b(0.0, 0.0, 2.0, 2.0, 0.0), &b(0.0, 0.0, 2.0, 2.0, std::f64::consts::FRAC_PI_2)) - 1.0).abs() < 1e-12);
    assert_eq!(box_iou(&b(0.0, 0.0, 2.0, 2.0, 0.0), &b(5.0, 0.0, 2.0, 2.0, 0.0)), 0.0);
    // dense point-sampling oracle
    let x = b(0.3, -0.2, 4.0, 1.8, 0.7);
    let y = b(1.1, 0.4, 3.5, 2.1, -0.4);
    let inside = |q: &AgentBox, px: f64, py: f64| {
        let (s, c) = q.yaw.sin_cos();
        let (dx, dy) = (px - q.cx, py - q.cy);
        (dx * c + dy * s).abs() <= q.length / 2.0 && (-dx * s + dy * c).abs() <= q.width / 2.0
    };
    let (mut i, mut u) = (0usize, 0usize);
    let n = 800;
    for a in 0..n {
        for c in 0..n {
            let px = -4.0 + 8.0 * (a as f64 + 0.5) / n as f64;
            let py = -4.0 + 8.0 * (c as f64 + 0.5) / n as f64;
            let (p, q) = (inside(&x, px, py), inside(&y, px, py));
            i += (p && q) as usize;
            u += (p || q) as usize;
        }
    }
    assert!((box_iou(&x, &y) - i as f64 / u as f64).abs() < 2e-3);
}

#[test]
fn box_ap_hand_case() {
    let b = |cx: f64, vx: f64| AgentBox {
        cx,
        cy: 0.0,
        length: 2.0,
        width: 1.0,
        yaw: 0.0,
        vx,
        vy: 0.0,
        yaw_rate: 0.0,
    };
    let gt = [b(0.0, 1.0), b(10.0, 2.0)];
    let mut acc = BoxApAccumulator::default();
    acc.add(&[(0.9, b(0.0, 1.5)), (0.8, b(30.0, 0.0)), (0.7, b(10.0, 2.0))], &gt);
    // recall 0.5 at precision 1, then recall 1 at precision 2/3
    assert!((acc.ap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    assert!((acc.velocity_error().unwrap() - 0.25).abs() < 1e-12);
    let mut perfect = BoxApAccumulator::default();
    perfect.add(&[(0.5, gt[0]), (0.4, gt[1])], &gt);
    assert_eq!(perfect.ap(), 1.0);
}

fn arb_scene() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    // 3 frames of a 6x6 grid, ids 0..4; the prediction keeps each cell with
    // probability ~0.85
    (
        proptest::collection::vec(proptest::collection::vec(0u32..4, 36), 3),
        proptest::collection::vec(proptest::collection::vec(0u8..100, 36), 3),
    )
        .prop_map(|(gt, keep)| {
            let pred = gt
                .iter()
                .zip(&keep)
                .map(|(g, k)| g.iter().zip(k).map(|(&v, &k)| if k < 85 { v } else { 0 }).collect())
                .collect();
            (gt, pred)
        })
}

proptest! {
    #[test]
    fn vpq_bounded_and_perfect_is_one((gt, pred) in arb_scene()) {
        let g = grid(6, 6);
        let frames = gt_frames(g, gt.clone());
        let p = InstanceSegResult { grid: g, frames: pred };
        let v = vpq(&p, &frames, &whole()).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let iou = foreground_iou(&p, &frames, &whole()).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(vpq(&InstanceSegResult::from_gt(&frames), &frames, &whole()).unwrap(), 1.0);
    }

    #[test]
    fn swapping_ids_never_increases_vpq((gt, pred) in arb_scene(), a in 1u32..4, b in 1u32..4, from in 0usize..3) {
        let g = grid(6, 6);
        let frames = gt_frames(g, gt);
        let p = InstanceSegResult { grid: g, frames: pred.clone() };
        let base = vpq(&p, &frames, &whole()).unwrap();
        let mut sw = pred;
        for f in sw.iter_mut().skip(from) {
            for v in f.iter_mut() {
                if *v == a { *v = b } else if *v == b { *v = a }
            }
        }
        let s = InstanceSegResult { grid: g, frames: sw };
        prop_assert!(vpq(&s, &frames, &whole()).unwrap() <= base + 1e-12);
    }

    #[test]
    fn accumulators_merge_like_concatenation((g1, p1) in arb_scene(), (g2, p2) in arb_scene()) {
        let g = grid(6, 6);
        let (f1, f2) = (gt_frames(g, g1), gt_frames(g, g2));
        let (r1, r2) = (InstanceSegResult { grid: g, frames: p1 }, InstanceSegResult { grid: g, frames: p2 });
        let mut all = MetricAccumulator::new(whole(), 3);
        all.add(&r1, &f1).unwrap();
        all.add(&r2, &f2).unwrap();
        let mut a = MetricAccumulator::new(whole(), 3);
        a.add(&r1, &f1).unwrap();
        let mut b = MetricAccumulator::new(whole(), 3);
        b.add(&r2, &f2).unwrap();
        a.merge(&b);
        prop_assert_eq!(a, all);
    }
}

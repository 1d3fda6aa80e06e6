use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;
use crate::gradcheck::{check_params, GradCheckConfig};
use crate::model::{forward, ModelConfig};
use crate::nn::{Binder, ParamStore};

fn brute_force(cost: &CostMatrix) -> f64 {
    let (small, big, tr) = if cost.rows <= cost.cols {
        (cost.rows, cost.cols, false)
    } else {
        (cost.cols, cost.rows, true)
    };
    let at = |i: usize, j: usize| if tr { cost.at(j, i) } else { cost.at(i, j) };
    fn rec(i: usize, small: usize, big: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, at: &dyn Fn(usize, usize) -> f64) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..big {
            if !used[j] {
                used[j] = true;
                rec(i + 1, small, big, used, acc + at(i, j), best, at);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, small, big, &mut vec![false; big], 0.0, &mut best, &at);
    best
}

fn random_cost(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CostMatrix {
    CostMatrix {
        rows: r,
        cols: c,
        data: (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect(),
    }
}

#[test]
fn hungarian_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..100 {
        let (r, c) = if k % 2 == 0 { (5, 7) } else { (7, 5) };
        let cost = random_cost(&mut rng, r, c);
        let m = hungarian(&cost).unwrap();
        assert_eq!(m.pairs.len(), 5);
        let got = m.total(&cost);
        assert!((got - brute_force(&cost)).abs() < 1e-9, "{got}");
    }
}

#[test]
fn hungarian_basic_cases() {
    let mut eye = CostMatrix {
        rows: 4,
        cols: 4,
        data: vec![1.0; 16],
    };
    for i in 0..4 {
        eye.data[i * 5] = 0.0;
    }
    assert_eq!(hungarian(&eye).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    let one = CostMatrix {
        rows: 1,
        cols: 1,
        data: vec![3.0],
    };
    assert_eq!(hungarian(&one).unwrap().pairs, vec![(0, 0)]);
    let bad = CostMatrix {
        rows: 1,
        cols: 2,
        data: vec![1.0, f64::NAN],
    };
    assert!(hungarian(&bad).is_err());
    assert!(hungarian(&CostMatrix::zeros(3, 0)).unwrap().pairs.is_empty());
}

proptest! {
    #[test]
    fn scaling_keeps_the_assignment(seed in 0u64..1000, s in 0.1f64..50.0, r in 1usize..6, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(&mut rng, r, c);
        let mut scaled = cost.clone();
        scaled.data.iter_mut().for_each(|v| *v *= s);
        let a = hungarian(&cost).unwrap();
        let b = hungarian(&scaled).unwrap();
        // ties are measure-zero for random costs, so the argmin is unique
        prop_assert_eq!(a, b);
    }

    #[test]
    fn permuting_objects_permutes_assignment(seed in 0u64..1000, r in 1usize..6, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(&mut rng, r, c);
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // column j of the permuted matrix is column perm[j] of the original
        let mut pc = CostMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                pc.data[i * c + j] = cost.at(i, perm[j]);
            }
        }
        let a = hungarian(&cost).unwrap();
        let b = hungarian(&pc).unwrap();
        let mapped: Vec<(usize, usize)> = b.pairs.iter().map(|&(i, j)| (i, perm[j])).collect();
        let mut mapped = mapped;
        mapped.sort_unstable();
        prop_assert_eq!(a.pairs, mapped);
    }
}

fn gt_fixture(masks_per_frame: Vec<Vec<Vec<f64>>>, hw: usize) -> GroundTruthSet {
    let n = masks_per_frame[0].len();
    GroundTruthSet {
        ids: (1..=n as u32).collect(),
        classes: vec![0; n],
        boxes: (0..n).map(|j| [0.1 * j as f64, 0.5, 2.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).collect(),
        masks: masks_per_frame
            .into_iter()
            .map(|f| Tensor::new(&[n, hw], f.into_iter().flatten().collect()))
            .collect(),
        flows: Vec::new(),
    }
}

fn bundle(class: Vec<[f64; 2]>, boxes: Option<Vec<[f64; 9]>>, masks: Vec<Vec<Vec<f64>>>, h: usize, w: usize) -> PredictionBundle {
    let m = class.len();
    let t1 = masks[0].len();
    PredictionBundle {
        class_logits: Tensor::new(&[m, 2], class.into_iter().flatten().collect()),
        boxes: boxes.map(|b| Tensor::new(&[m, 9], b.into_iter().flatten().collect())),
        mask_logits: Tensor::new(&[m, t1, h, w], masks.into_iter().flatten().flatten().collect()),
        flows: Vec::new(),
    }
}

#[test]
fn dice_hand_case() {
    let p = [0.5, 0.5, 0.0, 0.0];
    let g = [1.0, 0.0, 0.0, 0.0];
    assert!((dice_cost(&p, &g, 0.0) - 0.5).abs() < 1e-15);
    assert!((dice_cost(&p, &g, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(dice_cost(&[0.0; 4], &[0.0; 4], 0.0), 0.0);
    assert_eq!(dice_cost(&[0.0; 4], &[0.0; 4], 1.0), 0.0);
}

#[test]
fn mask_cost_perfect_and_disjoint() {
    let gtm = vec![1.0, 1.0, 0.0, 0.0];
    let frames = 3;
    let gt = gt_fixture(vec![vec![gtm.clone()]; frames], 4);
    let big = 40.0;
    let good: Vec<f64> = gtm.iter().map(|&v| if v > 0.5 { big } else { -big }).collect();
    let bad: Vec<f64> = gtm.iter().map(|&v| if v > 0.5 { -big } else { big }).collect();
    let p = bundle(vec![[0.0, 0.0]; 2], None, vec![vec![good; frames], vec![bad; frames]], 2, 2);
    let c = mask_cost(&p, &gt, 0..frames, 1.0);
    assert!(c.at(0, 0) < 1e-12);
    // 1 - 1/(2 + 2 + 1) per frame with eps = 1
    assert!((c.at(1, 0) - frames as f64 * 0.8).abs() < 1e-12);
    let c0 = mask_cost(&p, &gt, 0..frames, 0.0);
    assert!((c0.at(1, 0) - frames as f64).abs() < 1e-12);
}

#[test]
fn detection_cost_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig::default();
    let class: Vec<[f64; 2]> = (0..3).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let boxes: Vec<[f64; 9]> = (0..3).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let gt = gt_fixture(vec![vec![vec![1.0, 0.0, 0.0, 0.0]; 2]], 4);
    let p = bundle(class.clone(), Some(boxes.clone()), vec![vec![vec![0.0; 4]]; 3], 2, 2);
    let c = detection_cost(&p, &gt, &cfg);
    for i in 0..3 {
        for j in 0..2 {
            let pr = 1.0 / (1.0 + (class[i][1] - class[i][0]).exp());
            let pos = 0.25 * (1.0 - pr).powi(2) * -(pr + 1e-8).ln();
            let neg = 0.75 * pr.powi(2) * -(1.0 - pr + 1e-8).ln();
            let l1: f64 = (0..9).map(|k| (boxes[i][k] - gt.boxes[j][k]).abs()).sum();
            let want = 2.0 * (pos - neg) + 0.25 * l1;
            assert!((c.at(i, j) - want).abs() < 1e-12);
        }
    }
    // a confident exact prediction is the row minimum
    let mut class2 = class.clone();
    class2[1] = [30.0, -30.0];
    let mut boxes2 = boxes.clone();
    boxes2[1] = gt.boxes[0];
    let p2 = bundle(class2, Some(boxes2), vec![vec![vec![0.0; 4]]; 3], 2, 2);
    let c2 = detection_cost(&p2, &gt, &cfg);
    assert!((0..3).all(|i| c2.at(1, 0) <= c2.at(i, 0)));
    // identical predictions give identical rows
    let p3 = bundle(vec![class[0]; 2], Some(vec![boxes[0]; 2]), vec![vec![vec![0.0; 4]]; 2], 2, 2);
    let c3 = detection_cost(&p3, &gt, &cfg);
    assert_eq!(c3.data[..2], c3.data[2..]);
}

#[test]
fn matching_picks_the_mask_match() {
    let gtm = vec![0.0, 1.0, 1.0, 0.0];
    let gt = gt_fixture(vec![vec![gtm.clone()]; 2], 4);
    let good: Vec<f64> = gtm.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
    let poor = vec![0.0; 4];
    let mut masks = vec![vec![poor.clone(); 2]; 5];
    masks[3] = vec![good; 2];
    let p = bundle(vec![[0.0, 0.0]; 5], None, masks, 2, 2);
    let m = match_predictions(&p, &gt, &LossConfig::default()).unwrap();
    assert_eq!(m.pairs, vec![(3, 0)]);
    let empty = gt_fixture(vec![vec![]; 2], 4);
    let empty = GroundTruthSet {
        masks: vec![Tensor::zeros(&[0, 4]); 2],
        ..empty
    };
    assert!(match_predictions(&p, &empty, &LossConfig::default()).unwrap().pairs.is_empty());
}

#[test]
fn no_mask_matching_is_detection_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gt = gt_fixture(vec![vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]]; 3], 4);
    let masks: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|_| (0..3).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect())
        .collect();
    let class: Vec<[f64; 2]> = (0..4).map(|_| [rng.random_range(-2.0..2.0), 0.0]).collect();
    let boxes: Vec<[f64; 9]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let p = bundle(class, Some(boxes), masks, 2, 2);
    let cfg = LossConfig {
        matching: MatchMode::None,
        ..Default::default()
    };
    assert_eq!(matching_cost(&p, &gt, &cfg), detection_cost(&p, &gt, &cfg));
    let zero_w = LossConfig { dice: 0.0, ..Default::default() };
    assert_eq!(
        match_predictions(&p, &gt, &cfg).unwrap(),
        match_predictions(&p, &gt, &zero_w).unwrap()
    );
}

fn tiny_sample() -> (crate::world::Sample, f64) {
    let mut world = crate::world::ScenarioConfig::default();
    world.grid = crate::world::GridSpec::new(8, 8, 1.0).unwrap();
    world.t_out = 2;
    world.agents = [2, 2];
    world.spawn_half_extent = 2.5;
    world.min_gap = 0.0;
    world.speed = [0.5, 1.0];
    let s = crate::world::Sample::from_scenario(0, 11, &world).unwrap();
    (s, world.dt)
}

#[test]
fn perfect_masks_give_zero_mask_terms_and_flow_mask_convention() {
    let (sample, dt) = tiny_sample();
    let gt = GroundTruthSet::from_sample(&sample, dt);
    assert!(!gt.is_empty());
    let tape = Tape::new();
    let mut store = ParamStore::new(0);
    let b = Binder::new(&tape, &mut store);
    let cfg = ModelConfig {
        t_out: 2,
        num_queries: 3,
        ..ModelConfig::tiny()
    };
    let mut fw = forward(&b, &cfg, &sample.input_tensor()).unwrap();
    // overwrite the mask logits of query j with a saturated copy of object j
    let hw = sample.grid.cells();
    for t in 0..3 {
        let mut l = Tensor::full(&[3, hw], -40.0);
        for j in 0..gt.len().min(3) {
            for p in 0..hw {
                if gt.masks[t].data()[j * hw + p] > 0.5 {
                    l.data_mut()[j * hw + p] = 40.0;
                }
            }
        }
        fw.mask_logits[t] = tape.leaf(l);
    }
    let matched = MatchResult {
        pairs: (0..gt.len().min(3)).map(|j| (j, j)).collect(),
    };
    let with_bce = LossConfig {
        mask_bce: 1.0,
        ..LossConfig::default()
    };
    let (_, br) = training_loss(&fw, &gt, &matched, &with_bce);
    assert!(br.dice.abs() < 1e-12, "{br:?}");
    assert!(br.mask_l1.abs() < 1e-12);
    assert!(br.mask_bce.abs() < 1e-12);
    // no flow-valid cells -> zero flow term
    let mut gt2 = gt.clone();
    for f in &mut gt2.flows {
        f.1.iter_mut().for_each(|v| *v = false);
    }
    let (_, br2) = training_loss(&fw, &gt2, &matched, &LossConfig::default());
    assert_eq!(br2.flow, 0.0);
    assert!(br.cls >= 0.0 && br.box_l1 >= 0.0 && br.flow >= 0.0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (sample, dt) = tiny_sample();
    let gt = GroundTruthSet::from_sample(&sample, dt);
    let cfg = ModelConfig {
        t_out: 2,
        num_queries: 3,
        decoder_layers: 1,
        ..ModelConfig::tiny()
    };
    let lc = LossConfig::default();
    let input = sample.input_tensor();
    let mut store = ParamStore::new(2);
    let matched = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &mut store);
        let fw = forward(&b, &cfg, &input).unwrap();
        match_predictions(&fw.bundle(), &gt, &lc).unwrap()
    };
    assert!(!matched.pairs.is_empty());
    let gc = GradCheckConfig {
        samples_per_tensor: 3,
        ..Default::default()
    };
    let rep = check_params(&mut store, |n| n.starts_with("mask.1") || n.starts_with("head.cls"), &gc, |b| {
        let fw = forward(b, &cfg, &input).unwrap();
        training_loss(&fw, &gt, &matched, &lc).0
    });
    assert!(rep.passed(&gc), "{:?}", rep.worst());
    assert!(rep.informative() > 5);
}

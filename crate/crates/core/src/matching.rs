//! Set matching between instance queries and ground-truth objects, and the
//! training loss built on the matching.

use serde::{Deserialize, Serialize};

use crate::autograd::{sum_all, FocalParams, Var};
use crate::model::{encode_box, Forward, PredictionBundle};
use crate::tensor::Tensor;
use crate::world::Sample;
use crate::{Error, Result};

/// Ground truth of one sample in the model's parameterisation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    /// Agent ids, ascending; object `j` is agent `ids[j]`.
    pub ids: Vec<u32>,
    pub classes: Vec<usize>,
    pub boxes: Vec<[f64; 9]>,
    /// One `[N, H*W]` 0/1 tensor per frame `0..=T_out`.
    pub masks: Vec<Tensor>,
    /// Backward flow targets `[2, H*W]` and per-cell validity for frames
    /// `1..=T_out`.
    pub flows: Vec<(Tensor, Vec<bool>)>,
}

impl GroundTruthSet {
    pub fn from_sample(sample: &Sample, dt: f64) -> Self {
        let hw = sample.grid.cells();
        let mut ids: Vec<u32> = sample
            .frames
            .iter()
            .flat_map(|f| f.instance_ids.iter().copied())
            .filter(|&i| i != 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let n = ids.len();
        let mut classes = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        for id in &ids {
            let f = sample
                .frames
                .iter()
                .find(|f| f.boxes.contains_key(id))
                .expect("painted agents have boxes");
            classes.push(f.classes[id] as usize);
            boxes.push(encode_box(&f.boxes[id], &sample.grid, dt));
        }
        let masks = sample
            .frames
            .iter()
            .map(|f| {
                let mut m = Tensor::zeros(&[n, hw]);
                for (j, id) in ids.iter().enumerate() {
                    for (p, &v) in f.instance_ids.iter().enumerate() {
                        if v == *id {
                            m.data_mut()[j * hw + p] = 1.0;
                        }
                    }
                }
                m
            })
            .collect();
        let flows = sample.frames[1..]
            .iter()
            .map(|f| {
                let t = Tensor::new(&[2, hw], f.backward_flow.iter().map(|&v| v as f64).collect());
                (t, f.flow_valid.clone())
            })
            .collect();
        Self {
            ids,
            classes,
            boxes,
            masks,
            flows,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Which frames enter the mask term of the matching cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Costs accumulated over every frame.
    #[default]
    Multi,
    /// Current frame only.
    Single,
    /// Detection cost only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_l1: f64,
    pub dice: f64,
    pub mask_l1: f64,
    /// Sigmoid cross-entropy on matched masks; keeps a gradient on
    /// saturated cells, where Dice and L1 on probabilities have none.
    pub mask_bce: f64,
    pub flow: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Additive smoothing in numerator and denominator of Dice.
    pub dice_eps: f64,
    pub smooth_l1_beta: f64,
    pub matching: MatchMode,
    /// Class and box losses on every intermediate decoder layer.
    pub aux_loss: bool,
    /// Mask L1 on logits instead of sigmoid probabilities.
    pub mask_l1_on_logits: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls: 2.0,
            box_l1: 0.25,
            dice: 1.0,
            mask_l1: 1.0,
            mask_bce: 0.0,
            flow: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
            smooth_l1_beta: 1.0,
            matching: MatchMode::Multi,
            aux_loss: true,
            mask_l1_on_logits: false,
        }
    }
}

impl LossConfig {
    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }
}

/// Row-major `rows x cols` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn add_scaled(&mut self, other: &CostMatrix, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

const LOG_EPS: f64 = 1e-8;

/// Focal-style classification cost of assigning a prediction with class
/// probability `p` to its target: `pos(p) - neg(p)`.
pub fn focal_class_cost(p: f64, f: FocalParams) -> f64 {
    let pos = f.alpha * (1.0 - p).powf(f.gamma) * -(p + LOG_EPS).ln();
    let neg = (1.0 - f.alpha) * p.powf(f.gamma) * -(1.0 - p + LOG_EPS).ln();
    pos - neg
}

/// Weighted class cost plus weighted L1 box distance (the latter only when
/// the prediction carries boxes).
pub fn detection_cost(pred: &PredictionBundle, gt: &GroundTruthSet, cfg: &LossConfig) -> CostMatrix {
    let (m, n) = (pred.num_queries(), gt.len());
    let k = pred.class_logits.cols();
    let mut c = CostMatrix::zeros(m, n);
    for i in 0..m {
        let p = softmax(&pred.class_logits.data()[i * k..(i + 1) * k]);
        for j in 0..n {
            let mut v = cfg.cls * focal_class_cost(p[gt.classes[j]], cfg.focal());
            if let Some(b) = &pred.boxes {
                let row = &b.data()[i * 9..(i + 1) * 9];
                v += cfg.box_l1 * row.iter().zip(&gt.boxes[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
            c.data[i * n + j] = v;
        }
    }
    c
}

/// `1 - (2 sum(p m) + eps) / (sum(p) + sum(m) + eps)`; zero when both masks
/// are empty and `eps` is zero.
pub fn dice_cost(prob: &[f64], target: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut den = 0.0;
    for (p, t) in prob.iter().zip(target) {
        inter += p * t;
        den += p + t;
    }
    if den + eps == 0.0 {
        return 0.0;
    }
    1.0 - (2.0 * inter + eps) / (den + eps)
}

/// Dice costs summed over `frames`.
pub fn mask_cost(pred: &PredictionBundle, gt: &GroundTruthSet, frames: std::ops::Range<usize>, eps: f64) -> CostMatrix {
    let s = pred.mask_logits.shape();
    let (m, t1, hw) = (s[0], s[1], s[2] * s[3]);
    let n = gt.len();
    let mut c = CostMatrix::zeros(m, n);
    let probs: Vec<f64> = pred.mask_logits.data().iter().map(|&v| crate::autograd::sigmoid(v)).collect();
    for t in frames {
        for i in 0..m {
            let p = &probs[(i * t1 + t) * hw..(i * t1 + t + 1) * hw];
            for j in 0..n {
                let g = &gt.masks[t].data()[j * hw..(j + 1) * hw];
                c.data[i * n + j] += dice_cost(p, g, eps);
            }
        }
    }
    c
}

/// One-to-one assignment of queries to objects, reused at every frame.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(query, object)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// Target class per query, `background` for unmatched ones.
    pub fn query_targets(&self, m: usize, classes: &[usize], background: usize) -> Vec<usize> {
        let mut t = vec![background; m];
        for &(q, j) in &self.pairs {
            t[q] = classes[j];
        }
        t
    }

    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.at(i, j)).sum()
    }
}

/// Minimum-cost assignment of size `min(rows, cols)` by shortest augmenting
/// paths with row/column potentials.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in cost matrix".into()));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(MatchResult::default());
    }
    let transposed = cost.rows > cost.cols;
    let (n, m) = if transposed { (cost.cols, cost.rows) } else { (cost.rows, cost.cols) };
    let a = |i: usize, j: usize| if transposed { cost.at(j, i) } else { cost.at(i, j) };
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            let (r, c) = (p[j] - 1, j - 1);
            if transposed { (c, r) } else { (r, c) }
        })
        .collect();
    pairs.sort_unstable();
    Ok(MatchResult { pairs })
}

/// Total matching cost under `cfg.matching`.
pub fn matching_cost(pred: &PredictionBundle, gt: &GroundTruthSet, cfg: &LossConfig) -> CostMatrix {
    let mut c = detection_cost(pred, gt, cfg);
    let frames = match cfg.matching {
        MatchMode::Multi => 0..pred.num_frames(),
        MatchMode::Single => 0..1,
        MatchMode::None => 0..0,
    };
    if !frames.is_empty() {
        c.add_scaled(&mask_cost(pred, gt, frames, cfg.dice_eps), cfg.dice);
    }
    c
}

pub fn match_predictions(pred: &PredictionBundle, gt: &GroundTruthSet, cfg: &LossConfig) -> Result<MatchResult> {
    if gt.is_empty() {
        return Ok(MatchResult::default());
    }
    hungarian(&matching_cost(pred, gt, cfg))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_l1: f64,
    pub dice: f64,
    pub mask_l1: f64,
    #[serde(default)]
    pub mask_bce: f64,
    pub flow: f64,
    pub aux: f64,
    pub total: f64,
}

/// Weighted sum of all loss terms for one sample. Class, box and mask terms
/// are normalised by `max(1, N)`; the flow term is a mean over flow-valid
/// cells per frame, summed over frames.
pub fn training_loss<'t>(
    fw: &Forward<'t>,
    gt: &GroundTruthSet,
    matched: &MatchResult,
    cfg: &LossConfig,
) -> (Var<'t>, LossBreakdown) {
    let norm = 1.0 / (gt.len().max(1) as f64);
    let queries: Vec<usize> = matched.pairs.iter().map(|p| p.0).collect();
    let objects: Vec<usize> = matched.pairs.iter().map(|p| p.1).collect();
    let box_targets = Tensor::new(
        &[objects.len(), 9],
        objects.iter().flat_map(|&j| gt.boxes[j]).collect(),
    );

    let det_terms = |heads: &crate::decoder::LayerHeads<'t>| -> (Var<'t>, Option<Var<'t>>) {
        let k = heads.class_logits.shape()[1];
        let m = heads.class_logits.shape()[0];
        let targets = matched.query_targets(m, &gt.classes, k - 1);
        let cls = heads.class_logits.focal_loss(&targets, cfg.focal()).scale(norm);
        let bx = heads.boxes.filter(|_| !queries.is_empty()).map(|b| b.select_rows(&queries).l1_loss(&box_targets).scale(norm));
        (cls, bx)
    };

    let last = fw.decoded.layers.last().expect("decoder has layers");
    let (cls, bx) = det_terms(last);
    let mut terms: Vec<Var<'t>> = vec![cls.scale(cfg.cls)];
    let mut br = LossBreakdown {
        cls: cls.item(),
        ..Default::default()
    };
    if let Some(b) = bx {
        br.box_l1 = b.item();
        terms.push(b.scale(cfg.box_l1));
    }

    if !queries.is_empty() {
        let mut dice = Vec::new();
        let mut l1 = Vec::new();
        let mut bce = Vec::new();
        for (t, logits) in fw.mask_logits.iter().enumerate() {
            let sel = logits.select_rows(&queries);
            let hw = gt.masks[t].cols();
            let target = Tensor::new(
                &[objects.len(), hw],
                objects.iter().flat_map(|&j| gt.masks[t].data()[j * hw..(j + 1) * hw].iter().copied()).collect(),
            );
            dice.push(sel.dice_loss(&target, cfg.dice_eps));
            l1.push(if cfg.mask_l1_on_logits {
                sel.l1_loss(&target).scale(1.0 / hw as f64)
            } else {
                sel.sigmoid_l1_loss(&target)
            });
            if cfg.mask_bce != 0.0 {
                bce.push(sel.sigmoid_bce_loss(&target));
            }
        }
        let dice = sum_all(&dice).scale(norm);
        let l1 = sum_all(&l1).scale(norm);
        br.dice = dice.item();
        br.mask_l1 = l1.item();
        terms.push(dice.scale(cfg.dice));
        terms.push(l1.scale(cfg.mask_l1));
        if !bce.is_empty() {
            let bce = sum_all(&bce).scale(norm);
            br.mask_bce = bce.item();
            terms.push(bce.scale(cfg.mask_bce));
        }
    }

    let flows: Vec<Var<'t>> = fw
        .rollout
        .flows
        .iter()
        .zip(&gt.flows)
        .map(|(f, (target, valid))| f.reshape(&[2, target.cols()]).masked_smooth_l1(target, valid, cfg.smooth_l1_beta))
        .collect();
    if !flows.is_empty() {
        let fl = sum_all(&flows);
        br.flow = fl.item();
        terms.push(fl.scale(cfg.flow));
    }

    if cfg.aux_loss {
        let n_layers = fw.decoded.layers.len();
        let mut aux = Vec::new();
        for heads in &fw.decoded.layers[..n_layers - 1] {
            let (c, b) = det_terms(heads);
            aux.push(c.scale(cfg.cls));
            if let Some(b) = b {
                aux.push(b.scale(cfg.box_l1));
            }
        }
        if !aux.is_empty() {
            let a = sum_all(&aux);
            br.aux = a.item();
            terms.push(a);
        }
    }
    let total = sum_all(&terms);
    br.total = total.item();
    (total, br)
}

#[cfg(test)]
mod tests;

//! Foreground IoU, future video panoptic quality and a toy box AP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::world::{AgentBox, BevFrameGT, GridSpec};
use crate::{Error, Result};

/// Decoded instance maps, one row-major `H x W` map per frame `0..=T_out`.
/// 0 is background; an ID denotes the same instance in every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSegResult {
    pub grid: GridSpec,
    pub frames: Vec<Vec<u32>>,
}

impl InstanceSegResult {
    pub fn empty(grid: GridSpec, frames: usize) -> Self {
        Self {
            grid,
            frames: vec![vec![0; grid.cells()]; frames],
        }
    }

    /// Ground-truth instance maps of a sample, as if predicted perfectly.
    pub fn from_gt(gt: &[BevFrameGT]) -> Self {
        Self {
            grid: gt.first().map(|f| f.grid).unwrap_or_default(),
            frames: gt.iter().map(|f| f.instance_ids.clone()).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames.iter().any(|f| f.len() != self.grid.cells()) {
            return Err(Error::Shape(format!(
                "instance map does not match grid {}x{}",
                self.grid.height, self.grid.width
            )));
        }
        Ok(())
    }
}

/// Square evaluation window centred on the ego vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub name: String,
    /// Metres from the ego to each side of the window.
    pub half_extent: f64,
}

impl RoiSpec {
    pub fn new(name: &str, half_extent: f64) -> Result<Self> {
        if !(half_extent > 0.0) || !half_extent.is_finite() {
            return Err(Error::Config(format!("roi {name}: half extent must be positive, got {half_extent}")));
        }
        Ok(Self {
            name: name.to_string(),
            half_extent,
        })
    }

    /// 30 m x 30 m.
    pub fn near() -> Self {
        Self::new("near", 15.0).unwrap()
    }

    /// 100 m x 100 m.
    pub fn far() -> Self {
        Self::new("far", 50.0).unwrap()
    }

    /// Cells whose centre lies in the window. A window larger than the grid
    /// covers the whole grid.
    pub fn mask(&self, grid: &GridSpec) -> Vec<bool> {
        let mut out = Vec::with_capacity(grid.cells());
        for row in 0..grid.height {
            for col in 0..grid.width {
                let (x, y) = grid.cell_center(col, row);
                out.push(x.abs() <= self.half_extent && y.abs() <= self.half_extent);
            }
        }
        out
    }

    /// True when the window is at least as large as the grid.
    pub fn clamped(&self, grid: &GridSpec) -> bool {
        let (hx, hy) = grid.half_extent();
        self.half_extent >= hx.max(hy)
    }
}

/// Panoptic counts of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqCounts {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PqCounts {
    /// `sum IoU / (TP + FP/2 + FN/2)`; an empty frame scores 1.
    pub fn quality(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if den == 0.0 {
            1.0
        } else {
            self.iou_sum / den
        }
    }

    fn merge(&mut self, o: &PqCounts) {
        self.iou_sum += o.iou_sum;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Summable metric state for one ROI over any number of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricAccumulator {
    pub roi: RoiSpec,
    pub intersection: u64,
    pub union: u64,
    pub frames: Vec<PqCounts>,
    /// Predicted instances matched at least once, and those whose matches
    /// all went to a single ground-truth instance.
    pub matched_instances: usize,
    pub consistent_instances: usize,
}

fn check_grid(pred: &InstanceSegResult, gt: &[BevFrameGT]) -> Result<()> {
    pred.validate()?;
    if pred.frames.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames.len(),
            gt.len()
        )));
    }
    if let Some(f) = gt.iter().find(|f| f.grid != pred.grid) {
        return Err(Error::Shape(format!(
            "grid mismatch: prediction {:?}, ground truth {:?}",
            pred.grid, f.grid
        )));
    }
    Ok(())
}

/// Intersection and per-segment areas of two ID maps restricted to `roi`.
struct Overlap {
    pred_area: BTreeMap<u32, u64>,
    gt_area: BTreeMap<u32, u64>,
    inter: BTreeMap<(u32, u32), u64>,
}

fn overlap(pred: &[u32], gt: &[u32], roi: &[bool]) -> Overlap {
    let mut o = Overlap {
        pred_area: BTreeMap::new(),
        gt_area: BTreeMap::new(),
        inter: BTreeMap::new(),
    };
    for ((&p, &g), _) in pred.iter().zip(gt).zip(roi).filter(|(_, &r)| r) {
        if p != 0 {
            *o.pred_area.entry(p).or_default() += 1;
        }
        if g != 0 {
            *o.gt_area.entry(g).or_default() += 1;
        }
        if p != 0 && g != 0 {
            *o.inter.entry((p, g)).or_default() += 1;
        }
    }
    o
}

impl MetricAccumulator {
    pub fn new(roi: RoiSpec, frames: usize) -> Self {
        Self {
            roi,
            intersection: 0,
            union: 0,
            frames: vec![PqCounts::default(); frames],
            matched_instances: 0,
            consistent_instances: 0,
        }
    }

    pub fn add(&mut self, pred: &InstanceSegResult, gt: &[BevFrameGT]) -> Result<()> {
        check_grid(pred, gt)?;
        if gt.len() != self.frames.len() {
            return Err(Error::Shape(format!(
                "accumulator expects {} frames, got {}",
                self.frames.len(),
                gt.len()
            )));
        }
        let roi = self.roi.mask(&pred.grid);
        // first-matched-frame associations, both directions
        let mut gt_to_pred: BTreeMap<u32, u32> = BTreeMap::new();
        let mut pred_to_gt: BTreeMap<u32, u32> = BTreeMap::new();
        let mut partners: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for (t, (pm, g)) in pred.frames.iter().zip(gt).enumerate() {
            for ((&p, &q), _) in pm.iter().zip(&g.instance_ids).zip(&roi).filter(|(_, &r)| r) {
                let (a, b) = (p != 0, q != 0);
                self.intersection += (a && b) as u64;
                self.union += (a || b) as u64;
            }
            let o = overlap(pm, &g.instance_ids, &roi);
            let mut c = PqCounts::default();
            let mut hit_pred = BTreeSet::new();
            let mut hit_gt = BTreeSet::new();
            for (&(p, q), &i) in &o.inter {
                let u = o.pred_area[&p] + o.gt_area[&q] - i;
                let iou = i as f64 / u as f64;
                if iou <= 0.5 {
                    continue;
                }
                partners.entry(p).or_default().insert(q);
                let ok = match (gt_to_pred.get(&q), pred_to_gt.get(&p)) {
                    (None, None) => {
                        gt_to_pred.insert(q, p);
                        pred_to_gt.insert(p, q);
                        true
                    }
                    (Some(&pp), Some(&qq)) => pp == p && qq == q,
                    _ => false,
                };
                if ok {
                    c.iou_sum += iou;
                    c.tp += 1;
                    hit_pred.insert(p);
                    hit_gt.insert(q);
                }
            }
            c.fp = o.pred_area.len() - hit_pred.len();
            c.fn_ = o.gt_area.len() - hit_gt.len();
            self.frames[t].merge(&c);
        }
        self.matched_instances += partners.len();
        self.consistent_instances += partners.values().filter(|s| s.len() == 1).count();
        Ok(())
    }

    pub fn merge(&mut self, o: &MetricAccumulator) {
        self.intersection += o.intersection;
        self.union += o.union;
        for (a, b) in self.frames.iter_mut().zip(&o.frames) {
            a.merge(b);
        }
        self.matched_instances += o.matched_instances;
        self.consistent_instances += o.consistent_instances;
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    pub fn per_frame_vpq(&self) -> Vec<f64> {
        self.frames.iter().map(PqCounts::quality).collect()
    }

    /// Mean over frames of the per-frame panoptic quality.
    pub fn vpq(&self) -> f64 {
        let v = self.per_frame_vpq();
        if v.is_empty() {
            return 1.0;
        }
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn id_consistency(&self) -> f64 {
        if self.matched_instances == 0 {
            1.0
        } else {
            self.consistent_instances as f64 / self.matched_instances as f64
        }
    }

    pub fn report(&self, model: &str) -> MetricRow {
        MetricRow {
            model: model.to_string(),
            roi: self.roi.name.clone(),
            iou: self.iou(),
            vpq: self.vpq(),
            per_frame_vpq: self.per_frame_vpq(),
            id_consistency: self.id_consistency(),
        }
    }
}

pub fn foreground_iou(pred: &InstanceSegResult, gt: &[BevFrameGT], roi: &RoiSpec) -> Result<f64> {
    let mut acc = MetricAccumulator::new(roi.clone(), gt.len());
    acc.add(pred, gt)?;
    Ok(acc.iou())
}

/// Mean-per-frame VPQ of one sample.
pub fn vpq(pred: &InstanceSegResult, gt: &[BevFrameGT], roi: &RoiSpec) -> Result<f64> {
    let mut acc = MetricAccumulator::new(roi.clone(), gt.len());
    acc.add(pred, gt)?;
    Ok(acc.vpq())
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub roi: String,
    pub iou: f64,
    /// Mean-per-frame VPQ.
    pub vpq: f64,
    pub per_frame_vpq: Vec<f64>,
    pub id_consistency: f64,
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "model={} roi={} iou={:.4} vpq_mean_per_frame={:.4} id_consistency={:.4} per_frame=[",
            self.model, self.roi, self.iou, self.vpq, self.id_consistency
        )?;
        for (i, v) in self.per_frame_vpq.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, "]")
    }
}

fn corners(b: &AgentBox) -> Vec<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(u, v)| (b.cx + u * c - v * s, b.cy + u * s + v * c))
        .collect()
}

fn area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Clip a polygon against a convex counter-clockwise one.
fn clip(subject: Vec<(f64, f64)>, clipper: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject;
    let n = clipper.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clipper[i], clipper[(i + 1) % n]);
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// IoU of two oriented boxes in the ground plane.
pub fn box_iou(a: &AgentBox, b: &AgentBox) -> f64 {
    let (pa, pb) = (corners(a), corners(b));
    let inter = area(&clip(pa.clone(), &pb));
    let u = area(&pa) + area(&pb) - inter;
    if u <= 0.0 {
        0.0
    } else {
        inter / u
    }
}

/// Toy detection AP at a single box-IoU threshold, plus mean velocity
/// error (m/s) on true positives. Not comparable to benchmark protocols.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxApAccumulator {
    /// `(score, true positive, velocity error)` of every detection.
    pub detections: Vec<(f64, bool, f64)>,
    pub num_gt: usize,
}

impl BoxApAccumulator {
    pub const IOU_THRESHOLD: f64 = 0.5;

    /// Greedy score-ordered matching of one sample's detections.
    pub fn add(&mut self, dets: &[(f64, AgentBox)], gt: &[AgentBox]) {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0).then(a.cmp(&b)));
        let mut used = vec![false; gt.len()];
        for i in order {
            let (score, d) = &dets[i];
            let best = (0..gt.len())
                .filter(|&j| !used[j])
                .map(|j| (j, box_iou(d, &gt[j])))
                .filter(|&(_, v)| v >= Self::IOU_THRESHOLD)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    let ve = ((d.vx - gt[j].vx).powi(2) + (d.vy - gt[j].vy).powi(2)).sqrt();
                    self.detections.push((*score, true, ve));
                }
                None => self.detections.push((*score, false, 0.0)),
            }
        }
        self.num_gt += gt.len();
    }

    /// Area under the monotone precision envelope.
    pub fn ap(&self) -> f64 {
        if self.num_gt == 0 {
            return if self.detections.is_empty() { 1.0 } else { 0.0 };
        }
        let mut d = self.detections.clone();
        d.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp = 0usize;
        let mut pts = Vec::with_capacity(d.len());
        for (k, &(_, ok, _)) in d.iter().enumerate() {
            tp += ok as usize;
            pts.push((tp as f64 / self.num_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for k in 0..pts.len() {
            let p = pts[k..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (pts[k].0 - prev_r) * p;
            prev_r = pts[k].0;
        }
        ap
    }

    pub fn velocity_error(&self) -> Option<f64> {
        let v: Vec<f64> = self.detections.iter().filter(|d| d.1).map(|d| d.2).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[cfg(test)]
mod tests;

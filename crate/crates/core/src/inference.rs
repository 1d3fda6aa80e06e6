//! Turning a prediction bundle into per-frame instance-ID maps.

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::container::Container;
use crate::metrics::InstanceSegResult;
use crate::model::{decode_box, PredictionBundle};
use crate::world::{AgentBox, GridSpec};
use crate::{Error, Result};

/// How a query's class probabilities reduce to one object score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreReduction {
    /// Largest foreground probability.
    #[default]
    Max,
    /// Sum of foreground probabilities, i.e. `1 - p(background)`.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// δ: a cell is foreground when its best fused value exceeds this.
    pub score_threshold: f64,
    /// Keep only the highest-scoring queries; 0 keeps all.
    pub max_instances: usize,
    pub reduction: ScoreReduction,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            max_instances: 0,
            reduction: ScoreReduction::Max,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "inference.score_threshold must lie in (0, 1), got {}",
                self.score_threshold
            )));
        }
        Ok(())
    }
}

/// Object score of every query.
pub fn query_scores(pred: &PredictionBundle, reduction: ScoreReduction) -> Vec<f64> {
    let k1 = pred.class_logits.cols();
    pred.class_logits
        .data()
        .chunks(k1)
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let fg = &e[..k1 - 1];
            match reduction {
                ScoreReduction::Max => fg.iter().cloned().fold(0.0, f64::max) / z,
                ScoreReduction::Sum => fg.iter().sum::<f64>() / z,
            }
        })
        .collect()
}

/// Query indices kept under `max_instances`, best score first, ties to the
/// lower index.
fn kept(scores: &[f64], max: usize) -> Vec<bool> {
    let m = scores.len();
    if max == 0 || max >= m {
        return vec![true; m];
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; m];
    for &i in &order[..max] {
        keep[i] = true;
    }
    keep
}

/// Each cell goes to the query with the largest `score * sigmoid(logit)`
/// if that value exceeds the threshold. Query `i` is instance `i + 1` in
/// every frame.
pub fn decode_instances(pred: &PredictionBundle, grid: &GridSpec, cfg: &InferenceConfig) -> Result<InstanceSegResult> {
    cfg.validate()?;
    let s = pred.mask_logits.shape();
    if s[2] != grid.height || s[3] != grid.width {
        return Err(Error::Shape(format!("mask logits {s:?} do not match grid {}x{}", grid.height, grid.width)));
    }
    let (m, t1, hw) = (s[0], s[1], grid.cells());
    let scores = query_scores(pred, cfg.reduction);
    let keep = kept(&scores, cfg.max_instances);
    let d = pred.mask_logits.data();
    let mut frames = vec![vec![0u32; hw]; t1];
    let mut best = vec![0.0f64; hw];
    for (t, frame) in frames.iter_mut().enumerate() {
        best.iter_mut().for_each(|v| *v = cfg.score_threshold);
        for i in (0..m).filter(|&i| keep[i]) {
            let row = &d[(i * t1 + t) * hw..(i * t1 + t + 1) * hw];
            for p in 0..hw {
                // strict: the first query to reach a value keeps it on ties
                let v = scores[i] * sigmoid(row[p]);
                if v > best[p] {
                    best[p] = v;
                    frame[p] = i as u32 + 1;
                }
            }
        }
    }
    Ok(InstanceSegResult { grid: *grid, frames })
}

/// Scored boxes of every query, for detection metrics.
pub fn detections(pred: &PredictionBundle, grid: &GridSpec, dt: f64, reduction: ScoreReduction) -> Vec<(f64, AgentBox)> {
    let Some(boxes) = &pred.boxes else {
        return Vec::new();
    };
    query_scores(pred, reduction)
        .into_iter()
        .zip(boxes.data().chunks(9))
        .map(|(s, e)| (s, decode_box(e, grid, dt)))
        .collect()
}

impl InstanceSegResult {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("instance_maps");
        c.set_attr("height", self.grid.height.to_string());
        c.set_attr("width", self.grid.width.to_string());
        c.set_attr("resolution", format!("{:?}", self.grid.resolution));
        let flat: Vec<u32> = self.frames.concat();
        c.put_u32("ids", &[self.frames.len(), self.grid.height, self.grid.width], &flat)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != "instance_maps" {
            return Err(Error::Data(format!("expected instance_maps container, got {}", c.kind())));
        }
        let num = |k: &str| -> Result<f64> {
            c.require_attr(k)?
                .parse()
                .map_err(|_| Error::Data(format!("instance map attribute {k} unparsable")))
        };
        let grid = GridSpec::new(num("height")? as usize, num("width")? as usize, num("resolution")?)?;
        let (shape, ids) = c.get_u32("ids")?;
        if shape.len() != 3 || shape[1] != grid.height || shape[2] != grid.width {
            return Err(Error::Data(format!("instance map shape {shape:?} does not match attributes")));
        }
        Ok(Self {
            grid,
            frames: ids.chunks(grid.cells().max(1)).map(<[u32]>::to_vec).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    fn bundle(class: &[[f64; 2]], masks: &[f64], t1: usize, h: usize, w: usize) -> PredictionBundle {
        PredictionBundle {
            class_logits: Tensor::new(&[class.len(), 2], class.iter().flatten().copied().collect()),
            boxes: None,
            mask_logits: Tensor::new(&[class.len(), t1, h, w], masks.to_vec()),
            flows: Vec::new(),
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    const SURE: [f64; 2] = [40.0, -40.0];

    #[test]
    fn low_scores_decode_to_background() {
        let g = GridSpec::new(2, 2, 1.0).unwrap();
        let p = bundle(&[[-3.0, 3.0], [0.0, 0.0]], &[20.0; 16], 2, 2, 2);
        let r = decode_instances(&p, &g, &InferenceConfig::default()).unwrap();
        assert!(r.frames.iter().flatten().all(|&v| v == 0));
    }

    #[test]
    fn confident_query_reproduces_its_support() {
        let g = GridSpec::new(2, 3, 1.0).unwrap();
        let support = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let masks: Vec<f64> = support.iter().map(|&s| if s > 0.5 { 40.0 } else { -40.0 }).collect();
        let p = bundle(&[SURE], &masks, 1, 2, 3);
        let r = decode_instances(&p, &g, &InferenceConfig::default()).unwrap();
        assert_eq!(r.frames[0], vec![1, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn overlap_goes_to_larger_fused_value() {
        let g = GridSpec::new(1, 1, 1.0).unwrap();
        let p = bundle(&[SURE, SURE], &[logit(0.6), logit(0.8)], 1, 1, 1);
        let r = decode_instances(&p, &g, &InferenceConfig::default()).unwrap();
        assert_eq!(r.frames[0], vec![2]);
        let tie = bundle(&[SURE, SURE], &[logit(0.7), logit(0.7)], 1, 1, 1);
        assert_eq!(decode_instances(&tie, &g, &InferenceConfig::default()).unwrap().frames[0], vec![1]);
    }

    #[test]
    fn max_instances_keeps_best_queries() {
        let g = GridSpec::new(1, 2, 1.0).unwrap();
        let p = bundle(&[[1.0, 0.0], SURE], &[30.0, 30.0, -30.0, 30.0], 1, 1, 2);
        let cfg = InferenceConfig {
            max_instances: 1,
            ..Default::default()
        };
        assert_eq!(decode_instances(&p, &g, &cfg).unwrap().frames[0], vec![0, 2]);
        assert_eq!(decode_instances(&p, &g, &InferenceConfig::default()).unwrap().frames[0], vec![1, 2]);
    }

    #[test]
    fn threshold_validated_and_container_roundtrip() {
        let g = GridSpec::new(2, 2, 0.5).unwrap();
        let p = bundle(&[SURE], &[5.0, -5.0, 5.0, -5.0, 5.0, 5.0, -5.0, -5.0], 2, 2, 2);
        for bad in [0.0, 1.0, f64::NAN] {
            let cfg = InferenceConfig {
                score_threshold: bad,
                ..Default::default()
            };
            assert!(decode_instances(&p, &g, &cfg).is_err());
        }
        let r = decode_instances(&p, &g, &InferenceConfig::default()).unwrap();
        let back = InstanceSegResult::from_container(&Container::from_bytes(&r.to_container().unwrap().to_bytes(), std::path::Path::new("x")).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(decode_instances(&p, &GridSpec::new(3, 2, 1.0).unwrap(), &InferenceConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn decoding_invariants(
            class in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 4),
            masks in proptest::collection::vec(-4.0f64..4.0, 4 * 3 * 9),
            lo in 0.05f64..0.9,
            dt in 0.0f64..0.09,
        ) {
            let g = GridSpec::new(3, 3, 1.0).unwrap();
            let class: Vec<[f64; 2]> = class.into_iter().map(|(a, b)| [a, b]).collect();
            let p = bundle(&class, &masks, 3, 3, 3);
            let c1 = InferenceConfig { score_threshold: lo, ..Default::default() };
            let c2 = InferenceConfig { score_threshold: lo + dt, ..Default::default() };
            let a = decode_instances(&p, &g, &c1).unwrap();
            prop_assert_eq!(&a, &decode_instances(&p, &g, &c1).unwrap());
            let b = decode_instances(&p, &g, &c2).unwrap();
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (&x, &y) in fa.iter().zip(fb) {
                    // raising the threshold only removes foreground
                    prop_assert!(y == 0 || y == x);
                }
            }
            prop_assert!(a.frames.iter().flatten().all(|&v| v as usize <= class.len()));
        }
    }
}

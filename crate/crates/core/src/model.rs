//! Full model: encoder, flow-aware predictor and instance decoder.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::decoder::{mask_head, refine_queries, Refined};
use crate::encoder::encode;
use crate::nn::Binder;
use crate::predictor::{rollout, AttentionKind, Rollout};
use crate::tensor::Tensor;
use crate::world::{AgentBox, GridSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub encoder_blocks: usize,
    /// Biases on every convolution.
    pub bias: bool,
    pub t_out: usize,
    /// Attention heads and sampling points of the deformable samplers.
    pub heads: usize,
    pub points: usize,
    pub fada_layers: usize,
    /// Hidden width of feed-forward blocks as a multiple of `channels`.
    pub ffn_mult: usize,
    pub attention: AttentionKind,
    /// Stop gradients from the attention offsets into the flow heads.
    pub detach_flow: bool,
    /// Stop gradients through the refined reference points between decoder
    /// layers.
    pub detach_refs: bool,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    /// One mask MLP/context network for all frames instead of one per frame.
    pub shared_heads: bool,
    pub box_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            encoder_blocks: 4,
            bias: true,
            t_out: 4,
            heads: 8,
            points: 4,
            fada_layers: 4,
            ffn_mult: 2,
            attention: AttentionKind::Fada,
            detach_flow: false,
            detach_refs: true,
            decoder_layers: 6,
            decoder_heads: 8,
            num_queries: 50,
            num_classes: 1,
            shared_heads: false,
            box_branch: true,
        }
    }
}

impl ModelConfig {
    /// A very small model for unit tests.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            encoder_blocks: 1,
            t_out: 2,
            heads: 2,
            points: 2,
            fada_layers: 1,
            decoder_layers: 1,
            decoder_heads: 2,
            num_queries: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.num_queries == 0 || self.t_out == 0 || self.num_classes == 0 {
            return bad("model.channels, num_queries, t_out and num_classes must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("model.channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.decoder_heads == 0 || self.channels % self.decoder_heads != 0 {
            return bad(format!(
                "model.channels {} not divisible by decoder_heads {}",
                self.channels, self.decoder_heads
            ));
        }
        if self.points == 0 || self.ffn_mult == 0 || self.decoder_layers == 0 {
            return bad("model.points, ffn_mult and decoder_layers must be positive".into());
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal position code `[c, h, w]`. The first half of the
/// channels encode x, the second half y, as sin/cos pairs whose spatial
/// frequencies run geometrically from one cycle per grid to one per four
/// cells.
pub fn sine_pos_2d(c: usize, h: usize, w: usize) -> Tensor {
    let half = c / 2;
    let mut out = Tensor::zeros(&[c, h, w]);
    let fill = |out: &mut Tensor, ch0: usize, nch: usize, along_x: bool| {
        let size = if along_x { w } else { h };
        let nf = nch / 2;
        let top = (size as f64 / 4.0).max(1.0);
        for i in 0..nf {
            let f = if nf > 1 { top.powf(i as f64 / (nf - 1) as f64) } else { 1.0 };
            for row in 0..h {
                for col in 0..w {
                    let p = if along_x { col } else { row };
                    let a = 2.0 * std::f64::consts::PI * f * (p as f64 + 0.5) / size as f64;
                    let d = out.data_mut();
                    d[(ch0 + 2 * i) * h * w + row * w + col] = a.sin();
                    d[(ch0 + 2 * i + 1) * h * w + row * w + col] = a.cos();
                }
            }
        }
    };
    fill(&mut out, 0, half, true);
    fill(&mut out, half, c - half, false);
    out
}

/// Everything one forward pass records on the tape.
pub struct Forward<'t> {
    pub f0: Var<'t>,
    pub rollout: Rollout<'t>,
    pub decoded: Refined<'t>,
    /// One `[M, H*W]` logit map per frame `0..=T_out`.
    pub mask_logits: Vec<Var<'t>>,
    pub height: usize,
    pub width: usize,
}

pub fn forward<'t>(b: &Binder<'t>, cfg: &ModelConfig, input: &Tensor) -> Result<Forward<'t>> {
    cfg.validate()?;
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("model input must be [C, H, W], got {s:?}")));
    }
    let x = b.tape().constant(input.clone());
    let f0 = encode(b, cfg, x)?;
    let roll = rollout(b, cfg, f0)?;
    let decoded = refine_queries(b, cfg, f0)?;
    let mut feats = vec![f0];
    feats.extend(roll.features.iter().copied());
    let mask_logits = mask_head(b, cfg, decoded.queries, &feats)?;
    Ok(Forward {
        f0,
        rollout: roll,
        decoded,
        mask_logits,
        height: s[1],
        width: s[2],
    })
}

/// Plain-value model output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// `[M, num_classes + 1]`, background last.
    pub class_logits: Tensor,
    /// `[M, 9]`, see [`encode_box`]; absent without a box branch.
    pub boxes: Option<Tensor>,
    /// `[M, T_out + 1, H, W]`, pre-sigmoid.
    pub mask_logits: Tensor,
    /// `f_1 .. f_Tout`, each `[2, H, W]`.
    pub flows: Vec<Tensor>,
}

impl PredictionBundle {
    pub fn num_queries(&self) -> usize {
        self.class_logits.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.mask_logits.shape()[1]
    }

    pub fn all_finite(&self) -> bool {
        self.class_logits.all_finite()
            && self.mask_logits.all_finite()
            && self.boxes.as_ref().is_none_or(|b| b.all_finite())
            && self.flows.iter().all(|f| f.all_finite())
    }
}

impl Forward<'_> {
    pub fn bundle(&self) -> PredictionBundle {
        let last = self.decoded.layers.last().expect("at least one decoder layer");
        let m = last.class_logits.shape()[0];
        let t1 = self.mask_logits.len();
        let hw = self.height * self.width;
        let mut masks = Vec::with_capacity(m * t1 * hw);
        let maps: Vec<_> = self.mask_logits.iter().map(|v| v.value()).collect();
        for i in 0..m {
            for map in &maps {
                masks.extend_from_slice(&map.data()[i * hw..(i + 1) * hw]);
            }
        }
        PredictionBundle {
            class_logits: (*last.class_logits.value()).clone(),
            boxes: last.boxes.map(|b| (*b.value()).clone()),
            mask_logits: Tensor::new(&[m, t1, self.height, self.width], masks),
            flows: self.rollout.flows.iter().map(|f| (*f.value()).clone()).collect(),
        }
    }
}

/// 9-value box target: normalised centre `(cx, cy)` in `[0, 1]` grid
/// units, `ln` of length and width in cells, `(sin, cos)` of yaw, yaw rate
/// in rad per frame and velocity in cells per frame.
pub fn encode_box(b: &AgentBox, grid: &GridSpec, dt: f64) -> [f64; 9] {
    let (col, row) = grid.to_cell(b.cx, b.cy);
    let res = grid.resolution;
    [
        (col + 0.5) / grid.width as f64,
        (row + 0.5) / grid.height as f64,
        (b.length / res).ln(),
        (b.width / res).ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.yaw_rate * dt,
        b.vx * dt / res,
        b.vy * dt / res,
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(e: &[f64], grid: &GridSpec, dt: f64) -> AgentBox {
    let res = grid.resolution;
    AgentBox {
        cx: (e[0] * grid.width as f64 - grid.width as f64 / 2.0) * res,
        cy: (e[1] * grid.height as f64 - grid.height as f64 / 2.0) * res,
        length: e[2].exp() * res,
        width: e[3].exp() * res,
        yaw: e[4].atan2(e[5]),
        vx: e[7] * res / dt,
        vy: e[8] * res / dt,
        yaw_rate: e[6] / dt,
    }
}

//! Flow-aware BEV predictor: per-step backward flow heads and the stacked
//! flow-aware deformable attention that rolls `F_0` forward in time.

use serde::{Deserialize, Serialize};

use crate::autograd::{concat_rows, deformable_gather, Var};
use crate::model::{sine_pos_2d, ModelConfig};
use crate::nn::{conv, linear_cm, res_block, Binder, Init};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// How sampling offsets are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Offsets from the query concatenated with the predicted flow.
    #[default]
    Fada,
    /// Offsets from the query alone.
    Vanilla,
}

/// Per-layer switches. `bare` drops the residual, normalisation and
/// feed-forward sublayers, leaving the attention sum alone.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerOptions {
    pub bare: bool,
}

/// Backward flow head for future step `t` (1-based): two residual blocks and
/// a 1x1 projection to `[2, H, W]`. Every `t` has its own weights.
pub fn predict_flow<'t>(b: &Binder<'t>, cfg: &ModelConfig, f_prev: Var<'t>, t: usize) -> Result<Var<'t>> {
    if t == 0 || t > cfg.t_out {
        return Err(Error::OutOfRange {
            index: t,
            len: cfg.t_out + 1,
        });
    }
    let x = res_block(b, &format!("flow.{t}.rb0"), f_prev, cfg.bias);
    let x = res_block(b, &format!("flow.{t}.rb1"), x, cfg.bias);
    Ok(conv(b, &format!("flow.{t}.out"), x, 2, 1, cfg.bias, 0.1))
}

/// Cell-centre reference points of an `h x w` grid as `[2, h*w]`.
pub fn grid_reference(h: usize, w: usize) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[2, n], |i| if i < n { (i % w) as f64 } else { ((i - n) / w) as f64 })
}

/// Multi-head deformable attention of channel-major queries `q` (`[C, N]`)
/// into `value_src` (`[C, H, W]`) around `reference` (`[2, N]`, cells).
///
/// With `flow` given, offsets are `W [flow(p); q(p)]`; without it, `W q(p)`.
/// Value projection is bias-free; attention weights are a softmax over the
/// `points` sampling locations of each head.
#[allow(clippy::too_many_arguments)]
pub fn deform_attention<'t>(
    b: &Binder<'t>,
    name: &str,
    q: Var<'t>,
    reference: Var<'t>,
    flow: Option<Var<'t>>,
    value_src: Var<'t>,
    heads: usize,
    points: usize,
) -> Var<'t> {
    let vs = value_src.shape();
    let (c, h, w) = (vs[0], vs[1], vs[2]);
    let value = linear_cm(b, &format!("{name}.value"), value_src.reshape(&[c, h * w]), c, false, Init::Glorot)
        .reshape(&[c, h, w]);
    let mk = heads * points;
    let offsets = match flow {
        Some(f) => linear_cm(b, &format!("{name}.offset"), concat_rows(&[f, q]), mk * 2, true, Init::Normal(0.01)),
        None => linear_cm(b, &format!("{name}.offset_q"), q, mk * 2, true, Init::Normal(0.01)),
    };
    let weights = linear_cm(b, &format!("{name}.attn"), q, mk, true, Init::Zeros).softmax_row_groups(points);
    let gathered = deformable_gather(value, reference, offsets, weights, heads, points);
    linear_cm(b, &format!("{name}.out"), gathered, c, true, Init::Glorot)
}

/// One flow-aware deformable attention layer over reference points at every
/// cell. `q` is `[C, H*W]`; returns the same shape.
#[allow(clippy::too_many_arguments)]
pub fn fada_layer<'t>(
    b: &Binder<'t>,
    cfg: &ModelConfig,
    name: &str,
    q: Var<'t>,
    flow: Var<'t>,
    f_prev: Var<'t>,
    reference: Var<'t>,
    opts: LayerOptions,
) -> Var<'t> {
    let hw = q.shape()[1];
    let flow = flow.reshape(&[2, hw]);
    let flow = match cfg.attention {
        AttentionKind::Fada => Some(flow),
        AttentionKind::Vanilla => None,
    };
    if opts.bare {
        return deform_attention(b, &format!("{name}.attn"), q, reference, flow, f_prev, cfg.heads, cfg.points);
    }
    let c = q.shape()[0];
    let qn = crate::nn::layer_norm(b, &format!("{name}.ln1"), q, true);
    let a = deform_attention(b, &format!("{name}.attn"), qn, reference, flow, f_prev, cfg.heads, cfg.points);
    let x = q.add(a);
    let xn = crate::nn::layer_norm(b, &format!("{name}.ln2"), x, true);
    let hdn = linear_cm(b, &format!("{name}.ffn1"), xn, cfg.ffn_mult * c, true, Init::Glorot).relu();
    let f = linear_cm(b, &format!("{name}.ffn2"), hdn, c, true, Init::Normal(0.01));
    x.add(f)
}

pub struct Rollout<'t> {
    /// `F_1 .. F_Tout`, each `[C, H, W]`.
    pub features: Vec<Var<'t>>,
    /// `f_1 .. f_Tout`, each `[2, H, W]`.
    pub flows: Vec<Var<'t>>,
}

/// Iterates `f_t = flow_t(F_{t-1})`, `F_t = FADA^L(Q + pos; f_t, F_{t-1})`.
pub fn rollout<'t>(b: &Binder<'t>, cfg: &ModelConfig, f0: Var<'t>) -> Result<Rollout<'t>> {
    let s = f0.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let tape = b.tape();
    let query = b.param("pred.query", &[c, h * w], Init::Normal(0.02));
    let pos = b.param("pred.pos", &[c, h * w], Init::Given(sine_pos_2d(c, h, w).reshaped(&[c, h * w])));
    let q0 = query.add(pos);
    let reference = tape.constant(grid_reference(h, w));
    let mut prev = f0;
    let mut out = Rollout {
        features: Vec::new(),
        flows: Vec::new(),
    };
    for t in 1..=cfg.t_out {
        let flow = predict_flow(b, cfg, prev, t)?;
        let flow_in = if cfg.detach_flow { flow.detach() } else { flow };
        let mut x = q0;
        for l in 0..cfg.fada_layers {
            x = fada_layer(b, cfg, &format!("fada.{l}"), x, flow_in, prev, reference, LayerOptions::default());
        }
        let ft = x.reshape(&[c, h, w]);
        out.flows.push(flow);
        out.features.push(ft);
        prev = ft;
    }
    Ok(out)
}

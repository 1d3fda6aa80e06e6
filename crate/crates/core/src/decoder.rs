//! Instance decoder: deformable-DETR style refinement of instance queries
//! over `F_0`, class and box heads, and per-frame mask heads.

use crate::autograd::{concat_cols, Var};
use crate::model::{sine_pos_2d, ModelConfig};
use crate::nn::{layer_norm, linear, mlp, mlp_init, res_block, Binder, Init};
use crate::predictor::deform_attention;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Output of one decoder layer's heads.
#[derive(Clone, Copy, Debug)]
pub struct LayerHeads<'t> {
    /// `[M, num_classes + 1]`, background last.
    pub class_logits: Var<'t>,
    /// `[M, 9]`, `None` when the box branch is disabled.
    pub boxes: Option<Var<'t>>,
}

pub struct Refined<'t> {
    /// Final query embeddings `[M, C]`.
    pub queries: Var<'t>,
    /// Heads after every layer; the last entry belongs to the final layer.
    pub layers: Vec<LayerHeads<'t>>,
}

/// Normalised `[M, 2]` reference points to `[2, M]` cell coordinates.
fn to_cells<'t>(r: Var<'t>, h: usize, w: usize) -> Var<'t> {
    let m = r.shape()[0];
    let tape = r.tape();
    let scale = Tensor::from_fn(&[2, m], |i| if i < m { w as f64 } else { h as f64 });
    r.t().mul(tape.constant(scale)).add_scalar(-0.5)
}

fn self_attention<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, pos: Var<'t>, heads: usize) -> Var<'t> {
    let c = x.shape()[1];
    let d = c / heads;
    let qk_in = x.add(pos);
    let q = linear(b, &format!("{name}.q"), qk_in, c, true);
    let k = linear(b, &format!("{name}.k"), qk_in, c, true);
    let v = linear(b, &format!("{name}.v"), x, c, true);
    let scale = 1.0 / (d as f64).sqrt();
    let parts: Vec<Var> = (0..heads)
        .map(|hd| {
            let (qh, kh, vh) = (q.slice_cols(hd * d, d), k.slice_cols(hd * d, d), v.slice_cols(hd * d, d));
            qh.matmul_t(kh, false, true).scale(scale).softmax_rows().matmul(vh)
        })
        .collect();
    linear(b, &format!("{name}.out"), concat_cols(&parts), c, true)
}

/// Logits of `m` points on a regular lattice over the unit square, so that
/// queries start out spread over the grid.
fn lattice_logits(m: usize) -> Tensor {
    let cols = (m as f64).sqrt().ceil().max(1.0) as usize;
    let rows = m.div_ceil(cols).max(1);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    Tensor::from_fn(&[m, 2], |i| {
        let (q, axis) = (i / 2, i % 2);
        let (k, n) = if axis == 0 { (q % cols, cols) } else { (q / cols, rows) };
        logit((k as f64 + 0.5) / n as f64)
    })
}

/// Runs the decoder layers. Each layer applies, pre-normalised with
/// residuals: self-attention among queries, deformable cross-attention into
/// `F_0` (the predictor's sampler with zero flow), and a feed-forward block.
/// Reference points start on a lattice and are refined by the
/// box head from layer to layer, by default without gradient through the
/// chain.
pub fn refine_queries<'t>(b: &Binder<'t>, cfg: &ModelConfig, f0: Var<'t>) -> Result<Refined<'t>> {
    let s = f0.shape();
    if s.len() != 3 || s[0] != cfg.channels {
        return Err(Error::Shape(format!("decoder expects [{}, H, W], got {s:?}", cfg.channels)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let m = cfg.num_queries;
    let tape = b.tape();
    let mut x = b.param("dec.query", &[m, c], Init::Normal(1.0));
    let pos = b.param("dec.query_pos", &[m, c], Init::Normal(1.0));
    // reference points are kept as logits; the normalised point is their sigmoid
    let mut ref_logit = b.param("dec.ref", &[m, 2], Init::Given(lattice_logits(m)));
    let zero_flow = tape.zeros(&[2, m]);
    // sampled values carry absolute position so queries can localise
    let memory = f0.add(tape.constant(sine_pos_2d(c, h, w)));
    let mut layers = Vec::with_capacity(cfg.decoder_layers);
    let mut last = x;
    for l in 0..cfg.decoder_layers {
        let name = format!("dec.{l}");
        let xn = layer_norm(b, &format!("{name}.ln_sa"), x, false);
        x = x.add(self_attention(b, &format!("{name}.sa"), xn, pos, cfg.decoder_heads));

        let xn = layer_norm(b, &format!("{name}.ln_ca"), x, false);
        let qcm = xn.add(pos).t();
        let refc = to_cells(ref_logit.sigmoid(), h, w);
        let ca = deform_attention(b, &format!("{name}.ca"), qcm, refc, Some(zero_flow), memory, cfg.heads, cfg.points);
        x = x.add(ca.t());

        let xn = layer_norm(b, &format!("{name}.ln_ffn"), x, false);
        let hdn = linear(b, &format!("{name}.ffn1"), xn, cfg.ffn_mult * c, true).relu();
        x = x.add(linear(b, &format!("{name}.ffn2"), hdn, c, true));

        let out = layer_norm(b, "dec.ln_out", x, false);
        let (heads, centre_logit) = predict_heads(b, cfg, out, ref_logit);
        if let Some(z) = centre_logit {
            ref_logit = if cfg.detach_refs { z.detach() } else { z };
        }
        layers.push(heads);
        last = out;
    }
    Ok(Refined { queries: last, layers })
}

/// The class head and, when enabled, the box head. Box centres are
/// predicted relative to the reference point:
/// `(cx, cy) = sigmoid(raw + ref_logit)`. Also returns the centre logits.
pub fn predict_heads<'t>(
    b: &Binder<'t>,
    cfg: &ModelConfig,
    q: Var<'t>,
    ref_logit: Var<'t>,
) -> (LayerHeads<'t>, Option<Var<'t>>) {
    let c = cfg.channels;
    let class_logits = mlp(b, "head.cls", q, &[c, c, cfg.num_classes + 1]);
    if !cfg.box_branch {
        return (LayerHeads { class_logits, boxes: None }, None);
    }
    let raw = mlp(b, "head.box", q, &[c, c, 9]);
    let z = raw.slice_cols(0, 2).add(ref_logit);
    let boxes = concat_cols(&[z.sigmoid(), raw.slice_cols(2, 7)]);
    (
        LayerHeads {
            class_logits,
            boxes: Some(boxes),
        },
        Some(z),
    )
}

/// Mask logits for every frame: `logit[i, t, p] = <MLP_t(q_i), ctx_t(F_t)(p)>`.
/// `features[t]` is `F_t` for `t = 0..=T_out`; returns one `[M, H*W]` per
/// frame. A fixed sinusoidal position code is added to each `F_t` before
/// its context network.
pub fn mask_head<'t>(b: &Binder<'t>, cfg: &ModelConfig, queries: Var<'t>, features: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let c = queries.shape()[1];
    let mut out = Vec::with_capacity(features.len());
    for (t, f) in features.iter().enumerate() {
        let s = f.shape();
        if s[0] != c {
            return Err(Error::Shape(format!("mask head: query width {c} vs feature channels {}", s[0])));
        }
        let tag = if cfg.shared_heads { "shared".to_string() } else { t.to_string() };
        // small output layer so fresh logits start near zero
        let qt = mlp_init(b, &format!("mask.{tag}.mlp"), queries, &[c, c, c], Init::Normal(0.02));
        let pe = b.tape().constant(sine_pos_2d(c, s[1], s[2]));
        let ctx = res_block(b, &format!("mask.{tag}.ctx0"), f.add(pe), cfg.bias);
        let ctx = res_block(b, &format!("mask.{tag}.ctx1"), ctx, cfg.bias);
        // per-cell channel norm keeps logits off the upstream feature scale
        let ctx = layer_norm(b, &format!("mask.{tag}.ln"), ctx.reshape(&[c, s[1] * s[2]]), true);
        out.push(mask_logits(qt, ctx));
    }
    Ok(out)
}

/// `[M, C] x [C, N] -> [M, N]`: per-cell dot products of transformed
/// queries and context features.
pub fn mask_logits<'t>(queries: Var<'t>, context: Var<'t>) -> Var<'t> {
    queries.matmul(context)
}

/// Yaw from the `(sin, cos)` box slots.
pub fn decode_yaw(sin: f64, cos: f64) -> f64 {
    sin.atan2(cos)
}

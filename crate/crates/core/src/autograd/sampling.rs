//! Bilinear sampling at fractional grid locations and the fused
//! multi-head deformable attention gather built on it.
//!
//! Coordinates are in grid cells with cell centres on the integer lattice:
//! the point `(x, y)` reads column `x`, row `y`. Taps that fall outside the
//! grid contribute zero.

use super::Var;
use crate::tensor::{transpose_into, Tensor};

/// One of the four bilinear neighbours of a sample point.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    /// Flat `y * w + x` cell index, `None` when outside the grid.
    pub cell: Option<usize>,
    pub weight: f64,
    /// Derivatives of `weight` with respect to the sample coordinates.
    pub dw_dx: f64,
    pub dw_dy: f64,
}

pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [BilinearTap; 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let cell = |cx: f64, cy: f64| {
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
            Some(cy as usize * w + cx as usize)
        } else {
            None
        }
    };
    [
        BilinearTap {
            cell: cell(x0, y0),
            weight: (1.0 - fx) * (1.0 - fy),
            dw_dx: -(1.0 - fy),
            dw_dy: -(1.0 - fx),
        },
        BilinearTap {
            cell: cell(x0 + 1.0, y0),
            weight: fx * (1.0 - fy),
            dw_dx: 1.0 - fy,
            dw_dy: -fx,
        },
        BilinearTap {
            cell: cell(x0, y0 + 1.0),
            weight: (1.0 - fx) * fy,
            dw_dx: -fy,
            dw_dy: 1.0 - fx,
        },
        BilinearTap {
            cell: cell(x0 + 1.0, y0 + 1.0),
            weight: fx * fy,
            dw_dx: fy,
            dw_dy: fx,
        },
    ]
}

fn spatial(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a [c, h, w] map, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

impl<'t> Var<'t> {
    /// Samples a `[c, h, w]` map at `points` (`[2, n]`, rows x then y) and
    /// returns `[c, n]`. Differentiable in both the map and the points.
    pub fn sample_bilinear(&self, points: Var<'t>) -> Var<'t> {
        let (f, p) = (self.value(), points.value());
        let (c, h, w) = spatial(f.shape());
        assert_eq!(p.rows(), 2, "points must be [2, n]");
        let n = p.cols();
        let hw = h * w;
        let (px, py) = p.data().split_at(n);
        let mut out = vec![0.0; c * n];
        let taps: Vec<[BilinearTap; 4]> = (0..n).map(|i| bilinear_taps(px[i], py[i], h, w)).collect();
        for (i, tp) in taps.iter().enumerate() {
            for tap in tp {
                if let Some(cell) = tap.cell {
                    for ch in 0..c {
                        out[ch * n + i] += tap.weight * f.data()[ch * hw + cell];
                    }
                }
            }
        }
        let (i_f, i_p) = (self.id, points.id);
        self.tape.op(&[*self, points], Tensor::new(&[c, n], out), move |g, gs| {
            let gd = g.data();
            if let Some(d) = gs.slot(i_f) {
                for (i, tp) in taps.iter().enumerate() {
                    for tap in tp {
                        if let Some(cell) = tap.cell {
                            for ch in 0..c {
                                d[ch * hw + cell] += tap.weight * gd[ch * n + i];
                            }
                        }
                    }
                }
            }
            if let Some(d) = gs.slot(i_p) {
                for (i, tp) in taps.iter().enumerate() {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for tap in tp {
                        if let Some(cell) = tap.cell {
                            for ch in 0..c {
                                let v = f.data()[ch * hw + cell] * gd[ch * n + i];
                                dx += tap.dw_dx * v;
                                dy += tap.dw_dy * v;
                            }
                        }
                    }
                    d[i] += dx;
                    d[n + i] += dy;
                }
            }
        })
    }
}

/// Multi-head deformable attention gather.
///
/// * `value`: `[c, h, w]` projected values, `c = heads * head_dim`
/// * `reference`: `[2, n]` reference points (x row, y row)
/// * `offsets`: `[heads*points*2, n]`, row `(m*points + k)*2 + {0: dx, 1: dy}`
/// * `weights`: `[heads*points, n]`, already normalised over `k`
///
/// Returns `[c, n]` with
/// `out[m*d + j, i] = sum_k weights[m*points+k, i] * value_{m*d+j}(ref_i + off_{mk,i})`.
pub fn deformable_gather<'t>(
    value: Var<'t>,
    reference: Var<'t>,
    offsets: Var<'t>,
    weights: Var<'t>,
    heads: usize,
    points: usize,
) -> Var<'t> {
    let tape = value.tape;
    let (v, r, o, a) = (value.value(), reference.value(), offsets.value(), weights.value());
    let (c, h, w) = spatial(v.shape());
    assert_eq!(c % heads, 0, "channels {c} not divisible by {heads} heads");
    let d = c / heads;
    let n = r.cols();
    assert_eq!(r.rows(), 2, "reference must be [2, n]");
    assert_eq!(o.shape(), [heads * points * 2, n], "offsets shape");
    assert_eq!(a.shape(), [heads * points, n], "weights shape");
    let hw = h * w;
    // token-major copy so each tap reads a contiguous head slice
    let mut vt = vec![0.0; c * hw];
    transpose_into(v.data(), c, hw, &mut vt);
    let (rd, od, ad) = (r.data(), o.data(), a.data());

    let mut taps = Vec::with_capacity(heads * points * n);
    for mk in 0..heads * points {
        for i in 0..n {
            let x = rd[i] + od[(mk * 2) * n + i];
            let y = rd[n + i] + od[(mk * 2 + 1) * n + i];
            taps.push(bilinear_taps(x, y, h, w));
        }
    }
    // sampled[(mk, i), j] before weighting, kept for the weight gradient
    let mut sampled = vec![0.0; heads * points * n * d];
    let mut out_t = vec![0.0; n * c];
    for m in 0..heads {
        for k in 0..points {
            let mk = m * points + k;
            for i in 0..n {
                let s = &mut sampled[(mk * n + i) * d..(mk * n + i + 1) * d];
                for tap in &taps[mk * n + i] {
                    if let Some(cell) = tap.cell {
                        let src = &vt[cell * c + m * d..cell * c + (m + 1) * d];
                        for (sv, vv) in s.iter_mut().zip(src) {
                            *sv += tap.weight * vv;
                        }
                    }
                }
                let wgt = ad[mk * n + i];
                let dst = &mut out_t[i * c + m * d..i * c + (m + 1) * d];
                for (ov, sv) in dst.iter_mut().zip(s.iter()) {
                    *ov += wgt * sv;
                }
            }
        }
    }
    let mut out = vec![0.0; c * n];
    transpose_into(&out_t, n, c, &mut out);

    let (iv, ir, io, ia) = (value.id, reference.id, offsets.id, weights.id);
    let a_held = a.clone();
    tape.op(
        &[value, reference, offsets, weights],
        Tensor::new(&[c, n], out),
        move |g, gs| {
            let ad = a_held.data();
            let mut gt = vec![0.0; n * c];
            transpose_into(g.data(), c, n, &mut gt);
            if let Some(da) = gs.slot(ia) {
                for m in 0..heads {
                    for k in 0..points {
                        let mk = m * points + k;
                        for i in 0..n {
                            let s = &sampled[(mk * n + i) * d..(mk * n + i + 1) * d];
                            let gi = &gt[i * c + m * d..i * c + (m + 1) * d];
                            da[mk * n + i] += s.iter().zip(gi).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            let want_loc = gs.wants(io) || gs.wants(ir);
            let mut dloc = if want_loc { vec![0.0; heads * points * 2 * n] } else { Vec::new() };
            let want_v = gs.wants(iv);
            let mut dvt = if want_v { vec![0.0; hw * c] } else { Vec::new() };
            for m in 0..heads {
                for k in 0..points {
                    let mk = m * points + k;
                    for i in 0..n {
                        let wgt = ad[mk * n + i];
                        let gi = &gt[i * c + m * d..i * c + (m + 1) * d];
                        for tap in &taps[mk * n + i] {
                            let Some(cell) = tap.cell else { continue };
                            if want_v {
                                let dst = &mut dvt[cell * c + m * d..cell * c + (m + 1) * d];
                                for (dv, gv) in dst.iter_mut().zip(gi) {
                                    *dv += wgt * tap.weight * gv;
                                }
                            }
                            if want_loc {
                                let src = &vt[cell * c + m * d..cell * c + (m + 1) * d];
                                let dotv: f64 = src.iter().zip(gi).map(|(x, y)| x * y).sum();
                                dloc[(mk * 2) * n + i] += wgt * tap.dw_dx * dotv;
                                dloc[(mk * 2 + 1) * n + i] += wgt * tap.dw_dy * dotv;
                            }
                        }
                    }
                }
            }
            if want_v {
                let mut dv = vec![0.0; c * hw];
                transpose_into(&dvt, hw, c, &mut dv);
                gs.accumulate(iv, &dv);
            }
            if want_loc {
                if let Some(dr) = gs.slot(ir) {
                    for mk in 0..heads * points {
                        for i in 0..n {
                            dr[i] += dloc[(mk * 2) * n + i];
                            dr[n + i] += dloc[(mk * 2 + 1) * n + i];
                        }
                    }
                }
                gs.accumulate(io, &dloc);
            }
        },
    )
}

//! Fused loss kernels with hand-written gradients.

use super::ops::sigmoid;
use super::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl<'t> Var<'t> {
    /// Softmax focal loss summed over rows of `[n, k]` logits. The last
    /// column is the background class: rows targeting it are weighted by
    /// `1 - alpha`, all others by `alpha`.
    pub fn focal_loss(&self, targets: &[usize], p: FocalParams) -> Var<'t> {
        let x = self.value();
        let (n, k) = (x.rows(), x.cols());
        assert_eq!(targets.len(), n, "one target per row");
        let bg = k - 1;
        let mut total = 0.0;
        let mut grad = vec![0.0; n * k];
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of {k} classes");
            let row = &x.data()[i * k..(i + 1) * k];
            let ls = log_softmax_row(row);
            let lpt = ls[t];
            let pt = lpt.exp();
            let a = if t == bg { 1.0 - p.alpha } else { p.alpha };
            let q = (1.0 - pt).max(0.0);
            total += -a * q.powf(p.gamma) * lpt;
            // dL/dz_j = -a [(1-pt)^g - g (1-pt)^(g-1) pt log pt] (delta_tj - p_j)
            let qg1 = if p.gamma == 0.0 { 0.0 } else { p.gamma * q.powf(p.gamma - 1.0) };
            let coef = -a * (q.powf(p.gamma) - qg1 * pt * lpt);
            for j in 0..k {
                let pj = ls[j].exp();
                let delta = if j == t { 1.0 } else { 0.0 };
                grad[i * k + j] = coef * (delta - pj);
            }
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::scalar(total), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ix) {
                for (dv, gr) in d.iter_mut().zip(&grad) {
                    *dv += gv * gr;
                }
            }
        })
    }

    /// Soft Dice loss of `sigmoid(self)` against binary `targets`, one term
    /// per row of `[n, p]`, summed over rows:
    /// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
    /// A row where both sums vanish with `eps == 0` contributes zero.
    pub fn dice_loss(&self, targets: &Tensor, eps: f64) -> Var<'t> {
        let x = self.value();
        same_shape(&x, targets, "dice_loss");
        let (n, pn) = (x.rows(), x.cols());
        let mut total = 0.0;
        let mut grad = vec![0.0; n * pn];
        for i in 0..n {
            let row = &x.data()[i * pn..(i + 1) * pn];
            let tg = &targets.data()[i * pn..(i + 1) * pn];
            let probs: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
            let inter: f64 = probs.iter().zip(tg).map(|(a, b)| a * b).sum();
            let s: f64 = probs.iter().sum::<f64>() + tg.iter().sum::<f64>();
            let den = s + eps;
            if den <= 0.0 {
                continue;
            }
            let num = 2.0 * inter + eps;
            total += 1.0 - num / den;
            for j in 0..pn {
                let dd_dp = -(2.0 * tg[j] * den - num) / (den * den);
                grad[i * pn + j] = dd_dp * probs[j] * (1.0 - probs[j]);
            }
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::scalar(total), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ix) {
                for (dv, gr) in d.iter_mut().zip(&grad) {
                    *dv += gv * gr;
                }
            }
        })
    }

    /// Per-row mean of `|sigmoid(self) - targets|`, summed over rows.
    pub fn sigmoid_l1_loss(&self, targets: &Tensor) -> Var<'t> {
        let x = self.value();
        same_shape(&x, targets, "sigmoid_l1_loss");
        let pn = x.cols().max(1) as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (j, (&v, &t)) in x.data().iter().zip(targets.data()).enumerate() {
            let s = sigmoid(v);
            let diff = s - t;
            total += diff.abs() / pn;
            grad[j] = diff.signum() * s * (1.0 - s) / pn;
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::scalar(total), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ix) {
                for (dv, gr) in d.iter_mut().zip(&grad) {
                    *dv += gv * gr;
                }
            }
        })
    }

    /// Per-row mean binary cross-entropy of `sigmoid(self)` against
    /// `targets`, summed over rows.
    pub fn sigmoid_bce_loss(&self, targets: &Tensor) -> Var<'t> {
        let x = self.value();
        same_shape(&x, targets, "sigmoid_bce_loss");
        let pn = x.cols().max(1) as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (j, (&v, &t)) in x.data().iter().zip(targets.data()).enumerate() {
            // max(v, 0) - v t + log(1 + e^-|v|)
            total += (v.max(0.0) - v * t + (-v.abs()).exp().ln_1p()) / pn;
            grad[j] = (sigmoid(v) - t) / pn;
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::scalar(total), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ix) {
                for (dv, gr) in d.iter_mut().zip(&grad) {
                    *dv += gv * gr;
                }
            }
        })
    }

    /// `sum |self - targets|`.
    pub fn l1_loss(&self, targets: &Tensor) -> Var<'t> {
        let x = self.value();
        same_shape(&x, targets, "l1_loss");
        let mut total = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (j, (&v, &t)) in x.data().iter().zip(targets.data()).enumerate() {
            total += (v - t).abs();
            grad[j] = (v - t).signum();
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::scalar(total), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ix) {
                for (dv, gr) in d.iter_mut().zip(&grad) {
                    *dv += gv * gr;
                }
            }
        })
    }

    /// Smooth-L1 between a `[ch, n]` prediction and `targets`, averaged over
    /// the elements of cells where `valid[cell]` is set. Zero when no cell
    /// is valid.
    pub fn masked_smooth_l1(&self, targets: &Tensor, valid: &[bool], beta: f64) -> Var<'t> {
        let x = self.value();
        same_shape(&x, targets, "masked_smooth_l1");
        let (ch, n) = (x.rows(), x.cols());
        assert_eq!(valid.len(), n, "one validity flag per cell");
        let count = valid.iter().filter(|v| **v).count() * ch;
        let mut total = 0.0;
        let mut grad = vec![0.0; x.len()];
        if count > 0 {
            let norm = 1.0 / count as f64;
            for c in 0..ch {
                for i in 0..n {
                    if !valid[i] {
                        continue;
                    }
                    let j = c * n + i;
                    let d = x.data()[j] - targets.data()[j];
                    let (l, dl) = if d.abs() < beta {
                        (0.5 * d * d / beta, d / beta)
                    } else {
                        (d.abs() - 0.5 * beta, d.signum())
                    };
                    total += l * norm;
                    grad[j] = dl * norm;
                }
            }
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::scalar(total), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ix) {
                for (dv, gr) in d.iter_mut().zip(&grad) {
                    *dv += gv * gr;
                }
            }
        })
    }
}

fn same_shape(x: &Tensor, t: &Tensor, what: &str) {
    assert_eq!(x.len(), t.len(), "{what}: {:?} vs {:?}", x.shape(), t.shape());
}

//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::nn::{Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            samples_per_tensor: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.rel_err <= cfg.rel_tol)
    }

    /// Count of samples whose analytic gradient is not numerically zero.
    pub fn informative(&self) -> usize {
        self.samples.iter().filter(|s| s.analytic.abs() > 1e-9).count()
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn pick(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..len);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Checks gradients of a scalar loss with respect to parameters whose name
/// satisfies `select`. `loss` must be a pure function of the store.
pub fn check_params<F>(
    store: &mut ParamStore,
    select: impl Fn(&str) -> bool,
    cfg: &GradCheckConfig,
    loss: F,
) -> GradCheckReport
where
    F: for<'t> Fn(&Binder<'t>) -> Var<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let l = loss(&b);
        let g = tape.backward(l);
        b.param_grads(&g)
    };
    let eval = |store: &mut ParamStore| {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, store);
        loss(&b).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic {
        if !select(name) {
            continue;
        }
        for idx in pick(&mut rng, grad.len(), cfg.samples_per_tensor) {
            let orig = store.get(name).unwrap().data()[idx];
            store.get_mut(name).unwrap().data_mut()[idx] = orig + cfg.step;
            let up = eval(store);
            store.get_mut(name).unwrap().data_mut()[idx] = orig - cfg.step;
            let down = eval(store);
            store.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            report.samples.push(GradSample {
                tensor: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric, cfg.abs_floor),
            });
        }
    }
    report
}

/// Checks gradients of `f` with respect to each of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = f(&tape, &vars);
        let g = tape.backward(l);
        vars.iter().map(|v| g.wrt(*v)).collect()
    };
    let eval = |vals: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vals = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (ti, grad) in analytic.iter().enumerate() {
        for idx in pick(&mut rng, grad.len(), cfg.samples_per_tensor) {
            let orig = vals[ti].data()[idx];
            vals[ti].data_mut()[idx] = orig + cfg.step;
            let up = eval(&vals);
            vals[ti].data_mut()[idx] = orig - cfg.step;
            let down = eval(&vals);
            vals[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            report.samples.push(GradSample {
                tensor: format!("input{ti}"),
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric, cfg.abs_floor),
            });
        }
    }
    report
}

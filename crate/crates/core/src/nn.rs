//! Parameters, layer helpers and the optimiser.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A [`Binder`]
//! exposes them to one forward pass on a [`Tape`]; a parameter is created
//! (and deterministically initialised from the store seed and its name) the
//! first time a forward pass asks for it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal scaled by `gain`, with the given fan-in.
    He { fan_in: usize, gain: f64 },
    /// Glorot-uniform for a `[fan_out, fan_in]` matrix.
    Glorot,
    Given(Tensor),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the store seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    fn init(&self, name: &str, shape: &[usize], init: &Init) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let mut normal = |std: f64| {
            let d = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| d.sample(&mut rng))
        };
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal(std) => normal(*std),
            Init::He { fan_in, gain } => normal(gain * (2.0 / *fan_in as f64).sqrt()),
            Init::Glorot => {
                let fan_out = shape[0];
                let fan_in: usize = shape[1..].iter().product();
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let d = rand_distr::Uniform::new_inclusive(-a, a).expect("valid range");
                Tensor::from_fn(shape, |_| d.sample(&mut rng))
            }
            Init::Given(t) => {
                assert_eq!(t.shape(), shape, "given init for {name}");
                t.clone()
            }
        }
    }
}

/// Binds a [`ParamStore`] to one [`Tape`].
pub struct Binder<'t> {
    tape: &'t Tape,
    store: RefCell<&'t mut ParamStore>,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
    trainable: bool,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, store: &'t mut ParamStore) -> Self {
        Self {
            tape,
            store: RefCell::new(store),
            bound: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants; no gradients are recorded.
    pub fn frozen(tape: &'t Tape, store: &'t mut ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let mut store = self.store.borrow_mut();
        let value = match store.params.get(name) {
            Some(t) => {
                assert_eq!(t.shape(), shape, "parameter {name} has shape {:?}, wanted {shape:?}", t.shape());
                t.clone()
            }
            None => {
                let t = Arc::new(store.init(name, shape, &init));
                store.params.insert(name.to_string(), t.clone());
                t
            }
        };
        let var = if self.trainable {
            self.tape.leaf_shared(value)
        } else {
            self.tape.constant((*value).clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients of every parameter bound during this pass.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v)))
            .collect()
    }
}

/// Token-major linear layer: `[n, in] -> [n, out]`.
pub fn linear<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, out: usize, bias: bool) -> Var<'t> {
    linear_init(b, name, x, out, bias, Init::Glorot)
}

pub fn linear_init<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, out: usize, bias: bool, init: Init) -> Var<'t> {
    let inp = x.value().cols();
    let w = b.param(&format!("{name}.w"), &[out, inp], init);
    let y = x.matmul_t(w, false, true);
    if bias {
        y.add_row_bias(b.param(&format!("{name}.b"), &[out], Init::Zeros))
    } else {
        y
    }
}

/// Channel-major linear layer (a 1x1 projection): `[in, n] -> [out, n]`.
pub fn linear_cm<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, out: usize, bias: bool, init: Init) -> Var<'t> {
    let inp = x.value().rows();
    let w = b.param(&format!("{name}.w"), &[out, inp], init);
    let n = x.value().cols();
    let y = w.matmul(x.reshape(&[inp, n]));
    if bias {
        y.add_channel_bias(b.param(&format!("{name}.b"), &[out], Init::Zeros))
    } else {
        y
    }
}

pub fn conv<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, out: usize, k: usize, bias: bool, gain: f64) -> Var<'t> {
    let ci = x.value().rows();
    let fan_in = ci * k * k;
    let w = b.param(&format!("{name}.w"), &[out, fan_in], Init::He { fan_in, gain });
    let y = x.conv2d(w, k);
    if bias {
        y.add_channel_bias(b.param(&format!("{name}.b"), &[out], Init::Zeros))
    } else {
        y
    }
}

/// `relu(x + conv(relu(conv(x))))` with 3x3 kernels. The second conv
/// starts small so a fresh block is close to `relu(x)`.
pub fn res_block<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, bias: bool) -> Var<'t> {
    let c = x.value().rows();
    let h = conv(b, &format!("{name}.conv1"), x, c, 3, bias, 1.0).relu();
    let h = conv(b, &format!("{name}.conv2"), h, c, 3, bias, 0.1);
    x.add(h).relu()
}

/// Token-major MLP with ReLU between layers; `dims` are the output widths.
pub fn mlp<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, dims: &[usize]) -> Var<'t> {
    mlp_init(b, name, x, dims, Init::Glorot)
}

/// [`mlp`] with a custom initialiser for the output layer.
pub fn mlp_init<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, dims: &[usize], last: Init) -> Var<'t> {
    let mut h = x;
    for (i, &d) in dims.iter().enumerate() {
        let init = if i + 1 == dims.len() { last.clone() } else { Init::Glorot };
        h = linear_init(b, &format!("{name}.{i}"), h, d, true, init);
        if i + 1 < dims.len() {
            h = h.relu();
        }
    }
    h
}

pub fn layer_norm<'t>(b: &Binder<'t>, name: &str, x: Var<'t>, over_rows: bool) -> Var<'t> {
    let len = if over_rows { x.value().rows() } else { x.value().cols() };
    let g = b.param(&format!("{name}.g"), &[len], Init::Ones);
    let bt = b.param(&format!("{name}.b"), &[len], Init::Zeros);
    x.layer_norm(g, bt, over_rows)
}

/// Global L2 norm over a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            ..Default::default()
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = 1.0 - lr * c.weight_decay;
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let a = ParamStore::new(3).init("x.w", &[4, 4], &Init::Normal(1.0));
        let b = ParamStore::new(3).init("x.w", &[4, 4], &Init::Normal(1.0));
        let c = ParamStore::new(3).init("y.w", &[4, 4], &Init::Normal(1.0));
        let d = ParamStore::new(4).init("x.w", &[4, 4], &Init::Normal(1.0));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::full(&[10], 30.0));
        g.insert("b".to_string(), Tensor::full(&[5], -40.0));
        let before = clip_grad_norm(&mut g, 35.0);
        assert!(before > 35.0);
        assert!(grad_norm(&g) <= 35.0);
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Tensor::full(&[2], 1.0));
        clip_grad_norm(&mut small, 35.0);
        assert_eq!(small["a"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn adamw_moves_against_gradient_and_decays() {
        let mut store = ParamStore::new(0);
        store.insert("p", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::new(&[2], vec![1.0, -1.0]));
        opt.update(&mut store, &g, 0.1);
        let p = store.get("p").unwrap().data().to_vec();
        // first bias-corrected Adam step has magnitude ~lr
        assert!((p[0] - (1.0 * (1.0 - 0.001) - 0.1)).abs() < 1e-6);
        assert!((p[1] - (-1.0 * (1.0 - 0.001) + 0.1)).abs() < 1e-6);
    }
}

//! Parameters, layers and optimisation on top of the tape.

use rand::Rng;

use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "parameter shape");
        self.params[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// A graph plus the lazily bound parameter leaves used while building it.
pub struct Ctx<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) {
            self.g.variable(value)
        } else {
            self.g.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Backpropagate `loss` and collect per-parameter gradients. Parameters
    /// that did not take part in the graph get zero gradients.
    pub fn backward(&self, loss: Var) -> Vec<Tensor> {
        let mut grads: Grads = self.g.backward(loss);
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}

/// Affine map on the last axis: `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform(−1/√d_in, 1/√d_in) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::new(
            vec![d_in, d_out],
            (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        );
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let y = ctx.g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let rank = ctx.g.shape(y).len();
                let mut shape = vec![1; rank];
                shape[rank - 1] = self.d_out;
                let bv = ctx.param(b);
                let bv = ctx.g.reshape(bv, &shape);
                ctx.g.add(y, bv)
            }
            None => y,
        }
    }

    /// Overwrite weight with the identity (requires `d_in == d_out`) and zero the bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        assert_eq!(self.d_in, self.d_out);
        let mut w = Tensor::zeros(&[self.d_in, self.d_out]);
        for i in 0..self.d_in {
            w.data_mut()[i * self.d_out + i] = 1.0;
        }
        store.set(self.weight, w);
        if let Some(b) = self.bias {
            store.set(b, Tensor::zeros(&[self.d_out]));
        }
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        store.set(self.weight, Tensor::zeros(&[self.d_in, self.d_out]));
        if let Some(b) = self.bias {
            store.set(b, Tensor::zeros(&[self.d_out]));
        }
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d_k) V` over rank-3
/// `(B, n, ·)` inputs. Returns the output and the attention weights.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> (Var, Var) {
    let dk = *g.shape(q).last().expect("rank-3 query");
    let kt = g.transpose_last(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let w = g.softmax_last(scores);
    (g.matmul(w, v), w)
}

/// One attention head with bias-free query, key and value projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttentionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_in, d_k, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d_in, d_k, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d_in, d_v, false, rng),
        }
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, ctx: &mut Ctx, xq: Var, xkv: Var) -> (Var, Var) {
        let q = self.q.forward(ctx, xq);
        let k = self.k.forward(ctx, xkv);
        let v = self.v.forward(ctx, xkv);
        attend(&mut ctx.g, q, k, v)
    }
}

/// Adaptive moment estimation with optional cosine learning-rate decay and
/// global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    /// Total step count for cosine decay; `None` keeps the rate constant.
    pub decay_steps: Option<usize>,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            decay_steps: None,
            step: 0,
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.decay_steps {
            Some(total) if total > 0 => {
                let frac = (self.step as f64 / total as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.lr,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        let scale = match self.grad_clip {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), g) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grads[i].data())
            {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Sinusoidal embedding of integer steps, base 10000: the first half of the
/// width holds sines, the second cosines.
pub fn sinusoidal_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; steps.len() * dim];
    for (r, &s) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = 10000f64.powf(-(i as f64) / half.max(1) as f64);
            let arg = s as f64 * freq;
            data[r * dim + i] = arg.sin();
            data[r * dim + half + i] = arg.cos();
        }
    }
    Tensor::new(vec![steps.len(), dim], data)
}

/// Central finite-difference gradient of `f` with respect to every scalar of
/// every trainable parameter, in store order.
pub fn finite_difference_grads(
    store: &ParamStore,
    h: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> Vec<Tensor> {
    let mut work = store.clone();
    store
        .ids()
        .map(|id| {
            let n = store.get(id).numel();
            let mut out = vec![0.0; n];
            if store.is_trainable(id) {
                for (j, o) in out.iter_mut().enumerate() {
                    let orig = store.get(id).data()[j];
                    work.get_mut(id).data_mut()[j] = orig + h;
                    let fp = f(&work);
                    work.get_mut(id).data_mut()[j] = orig - h;
                    let fm = f(&work);
                    work.get_mut(id).data_mut()[j] = orig;
                    *o = (fp - fm) / (2.0 * h);
                }
            }
            Tensor::new(store.get(id).shape().to_vec(), out)
        })
        .collect()
}

/// Analytic and central finite-difference gradients of the scalar built by
/// `f`, in store order.
pub fn gradient_check(store: &ParamStore, h: f64, f: impl Fn(&mut Ctx) -> Var) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut ctx = Ctx::new(store);
    let loss = f(&mut ctx);
    let analytic = ctx.backward(loss);
    let numeric = finite_difference_grads(store, h, |s| {
        let mut c = Ctx::new(s);
        let l = f(&mut c);
        c.value(l).item()
    });
    (analytic, numeric)
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 3, true, &mut rng);
        store.set(lin.weight, Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        store.set(lin.bias.unwrap(), Tensor::new(vec![3], vec![0.5, 0.0, -1.0]));
        let mut ctx = Ctx::new(&store);
        let x = ctx.constant(Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]));
        let y = lin.forward(&mut ctx, x);
        assert_eq!(ctx.value(y).data(), &[-2.5, -3.0, -4.0]);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut ctx = Ctx::new(&store);
            let x = ctx.param(id);
            let sq = ctx.g.square(x);
            let loss = ctx.g.sum_all(sq);
            let grads = ctx.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add_frozen("x", Tensor::new(vec![1], vec![3.0]));
        let mut opt = Adam::new(&store, 0.1);
        let mut ctx = Ctx::new(&store);
        let x = ctx.param(id);
        let loss = ctx.g.square(x);
        let grads = ctx.backward(loss);
        opt.step(&mut store, &grads);
        assert_eq!(store.get(id).item(), 3.0);
    }

    #[test]
    fn cosine_decay_reaches_zero() {
        let store = ParamStore::new();
        let mut opt = Adam::new(&store, 1.0);
        opt.decay_steps = Some(10);
        assert_eq!(opt.current_lr(), 1.0);
        for _ in 0..10 {
            opt.step(&mut ParamStore::new(), &[]);
        }
        assert!(opt.current_lr().abs() < 1e-12);
    }

    #[test]
    fn embedding_layout() {
        let e = sinusoidal_embedding(&[0, 3], 4);
        assert_eq!(e.shape(), &[2, 4]);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
    }
}

//! Single-layer gated recurrent unit on the tape engine.

use rand::Rng;

use crate::graph::Var;
use crate::nn::{Ctx, Linear, ParamStore};

/// `z = σ(x W_z + h U_z)`, `r = σ(x W_r + h U_r)`,
/// `n = tanh(x W_n + r ⊙ (h U_n))`, `h' = (1 − z) ⊙ n + z ⊙ h`,
/// each product carrying its own bias.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * hidden, true, rng),
            recurrent: Linear::new(store, &format!("{name}.recurrent"), hidden, 3 * hidden, true, rng),
            hidden,
        }
    }

    /// Hidden state after every step of a `(B, T, input)` sequence, starting
    /// from zeros.
    pub fn run(&self, ctx: &mut Ctx, x: Var) -> Vec<Var> {
        let shape = ctx.g.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let hsz = self.hidden;
        let xw = self.input.forward(ctx, x);
        let mut h = ctx.constant(crate::tensor::Tensor::zeros(&[b, hsz]));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let xt = ctx.g.select_axis1(xw, step);
            let hu = self.recurrent.forward(ctx, h);
            let xz = ctx.g.slice_last(xt, 0, hsz);
            let xr = ctx.g.slice_last(xt, hsz, hsz);
            let xn = ctx.g.slice_last(xt, 2 * hsz, hsz);
            let hz = ctx.g.slice_last(hu, 0, hsz);
            let hr = ctx.g.slice_last(hu, hsz, hsz);
            let hn = ctx.g.slice_last(hu, 2 * hsz, hsz);
            let z = ctx.g.add(xz, hz);
            let z = ctx.g.sigmoid(z);
            let r = ctx.g.add(xr, hr);
            let r = ctx.g.sigmoid(r);
            let rn = ctx.g.mul(r, hn);
            let n = ctx.g.add(xn, rn);
            let n = ctx.g.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = ctx.g.sub(h, n);
            let zd = ctx.g.mul(z, diff);
            h = ctx.g.add(n, zd);
            states.push(h);
        }
        states
    }

    /// Final hidden state only.
    pub fn last(&self, ctx: &mut Ctx, x: Var) -> Var {
        *self.run(ctx, x).last().expect("non-empty sequence")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, relative_error};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::new(&mut store, "g", 1, 1, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.7, &mut rng));
        }
        let w = store.get(gru.input.weight).data().to_vec();
        let bw = store.get(gru.input.bias.unwrap()).data().to_vec();
        let u = store.get(gru.recurrent.weight).data().to_vec();
        let bu = store.get(gru.recurrent.bias.unwrap()).data().to_vec();
        let xs = [0.5, -1.0, 2.0];
        let mut h = 0.0;
        let mut want = Vec::new();
        for &x in &xs {
            let z = sig(x * w[0] + bw[0] + h * u[0] + bu[0]);
            let r = sig(x * w[1] + bw[1] + h * u[1] + bu[1]);
            let n = (x * w[2] + bw[2] + r * (h * u[2] + bu[2])).tanh();
            h = (1.0 - z) * n + z * h;
            want.push(h);
        }
        let mut ctx = Ctx::new(&store);
        let xv = ctx.constant(Tensor::new(vec![1, 3, 1], xs.to_vec()));
        let states = gru.run(&mut ctx, xv);
        for (s, w) in states.iter().zip(want) {
            assert!((ctx.value(*s).item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = Gru::new(&mut store, "g", 2, 3, &mut rng);
        let x = Tensor::randn(&[2, 5, 2], 1.0, &mut rng);
        let (a, n) = gradient_check(&store, 1e-5, |ctx| {
            let xv = ctx.constant(x.clone());
            let h = gru.last(ctx, xv);
            let sq = ctx.g.square(h);
            ctx.g.sum_all(sq)
        });
        for (ta, tn) in a.iter().zip(&n) {
            for (x, y) in ta.data().iter().zip(tn.data()) {
                assert!(relative_error(*x, *y, 1e-6) < 1e-5, "{x} vs {y}");
            }
        }
    }
}

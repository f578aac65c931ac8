//! Trend block: reversible instance normalization wrapped around a stack of
//! residual perceptron layers, each conditioned on the diffusion step.

use rand::Rng;

use crate::config::{Activation, TrendConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Stabilizer inside the standard deviation: `std = sqrt(var + EPS²)`.
pub const REVIN_EPS: f64 = 1e-5;

/// Statistics captured by a normalization call, per (instance, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    /// `(B, 1, C)`
    pub mean: Tensor,
    /// `(B, 1, C)`, never below [`REVIN_EPS`].
    pub std: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

fn instance_stats(x: &Tensor) -> (Tensor, Tensor) {
    let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut mean = vec![0.0; b * c];
    let mut std = vec![0.0; b * c];
    for i in 0..b {
        for ch in 0..c {
            let col = (0..l).map(|t| x.data()[(i * l + t) * c + ch]);
            let m = col.clone().sum::<f64>() / l as f64;
            let v = col.map(|v| (v - m) * (v - m)).sum::<f64>() / l as f64;
            mean[i * c + ch] = m;
            std[i * c + ch] = (v + REVIN_EPS * REVIN_EPS).sqrt();
        }
    }
    (Tensor::new(vec![b, 1, c], mean), Tensor::new(vec![b, 1, c], std))
}

/// Standardize each (instance, channel) series over time, then apply the
/// per-channel affine `y = scale · z + shift`.
pub fn revin_normalize(x: &Tensor, scale: &[f64], shift: &[f64]) -> Result<(Tensor, RevinState)> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("expected (batch, length, channels), got {:?}", x.shape())));
    }
    let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    if scale.len() != c || shift.len() != c {
        return Err(Error::Shape(format!("{c} channels, {} scales, {} shifts", scale.len(), shift.len())));
    }
    let (mean, std) = instance_stats(x);
    let mut out = x.clone();
    for i in 0..b {
        for t in 0..l {
            for ch in 0..c {
                let v = &mut out.data_mut()[(i * l + t) * c + ch];
                let z = (*v - mean.data()[i * c + ch]) / std.data()[i * c + ch];
                *v = scale[ch] * z + shift[ch];
            }
        }
    }
    let state = RevinState {
        mean,
        std,
        scale: scale.to_vec(),
        shift: shift.to_vec(),
    };
    Ok((out, state))
}

/// Exact inverse of [`revin_normalize`] for the captured state.
pub fn revin_denormalize(y: &Tensor, state: &RevinState) -> Result<Tensor> {
    let (b, c) = (state.mean.dim(0), state.mean.dim(2));
    if y.rank() != 3 || y.dim(0) != b || y.dim(2) != c {
        return Err(Error::Shape(format!(
            "input {:?} does not match captured statistics for ({b}, _, {c})",
            y.shape()
        )));
    }
    let l = y.dim(1);
    let mut out = y.clone();
    for i in 0..b {
        for t in 0..l {
            for ch in 0..c {
                let v = &mut out.data_mut()[(i * l + t) * c + ch];
                let z = (*v - state.shift[ch]) / state.scale[ch];
                *v = z * state.std.data()[i * c + ch] + state.mean.data()[i * c + ch];
            }
        }
    }
    Ok(out)
}

/// Graph nodes of a normalization, kept for the paired denormalization.
#[derive(Clone, Copy, Debug)]
pub struct RevinVars {
    mean: Var,
    std: Var,
    scale: Var,
    shift: Var,
}

fn revin_norm_graph(g: &mut Graph, x: Var, scale: Var, shift: Var) -> (Var, RevinVars) {
    let mean = g.mean_axis(x, 1);
    let centred = g.sub(x, mean);
    let sq = g.square(centred);
    let var = g.mean_axis(sq, 1);
    let var = g.add_scalar(var, REVIN_EPS * REVIN_EPS);
    let std = g.sqrt(var);
    let z = g.div(centred, std);
    let z = g.mul(z, scale);
    let y = g.add(z, shift);
    (y, RevinVars { mean, std, scale, shift })
}

fn revin_denorm_graph(g: &mut Graph, y: Var, st: &RevinVars) -> Var {
    let z = g.sub(y, st.shift);
    let z = g.div(z, st.scale);
    let z = g.mul(z, st.std);
    g.add(z, st.mean)
}

#[derive(Clone, Copy, Debug)]
pub struct TrendLayer {
    pub cond: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct TrendNet {
    pub width: usize,
    pub layers: Vec<TrendLayer>,
    pub activation: Activation,
    pub revin_scale: ParamId,
    pub revin_shift: ParamId,
}

impl TrendNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &TrendConfig, width: usize, rng: &mut R) -> Self {
        let hidden = cfg.hidden_mult.max(1) * width;
        let layers = (0..cfg.layers)
            .map(|i| TrendLayer {
                cond: Linear::new(store, &format!("trend.{i}.cond"), width, width, true, rng),
                hidden: Linear::new(store, &format!("trend.{i}.fc1"), width, hidden, true, rng),
                out: Linear::new(store, &format!("trend.{i}.fc2"), hidden, width, true, rng),
            })
            .collect();
        Self {
            width,
            layers,
            activation: cfg.activation,
            revin_scale: store.add("trend.revin.scale", Tensor::ones(&[width])),
            revin_shift: store.add("trend.revin.shift", Tensor::zeros(&[width])),
        }
    }

    /// Zero every residual branch output so the block reduces to the identity.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            layer.out.set_zero(store);
        }
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        match self.activation {
            Activation::Silu => g.silu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    /// `x`: `(B, L, d)` encoded trend; `emb`: `(B, d)` step embedding.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, emb: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::Shape(format!("trend block width {} got {shape:?}", self.width)));
        }
        let b = shape[0];
        if ctx.g.shape(emb) != [b, self.width] {
            return Err(Error::Shape(format!("step embedding {:?} for batch {b}", ctx.g.shape(emb))));
        }
        let d = self.width;
        let scale = ctx.param(self.revin_scale);
        let scale = ctx.g.reshape(scale, &[1, 1, d]);
        let shift = ctx.param(self.revin_shift);
        let shift = ctx.g.reshape(shift, &[1, 1, d]);
        let (mut h, st) = revin_norm_graph(&mut ctx.g, x, scale, shift);
        for layer in &self.layers {
            let c = layer.cond.forward(ctx, emb);
            let c = ctx.g.reshape(c, &[b, 1, d]);
            let u = ctx.g.add(h, c);
            let u = layer.hidden.forward(ctx, u);
            let u = self.act(&mut ctx.g, u);
            let u = layer.out.forward(ctx, u);
            h = ctx.g.add(h, u);
        }
        Ok(revin_denorm_graph(&mut ctx.g, h, &st))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full(&[2, 5, 3], 4.2);
        let (y, st) = revin_normalize(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.max_abs() < 1e-9);
        assert!(st.std.data().iter().all(|&s| s >= REVIN_EPS));
        let back = revin_denormalize(&y, &st).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn known_mean_and_std() {
        // Mean 5, population std 2.
        let v = [3.0, 7.0, 3.0, 7.0];
        let x = Tensor::new(vec![1, 4, 1], v.to_vec());
        let (y, _) = revin_normalize(&x, &[1.0], &[0.0]).unwrap();
        for (o, i) in y.data().iter().zip(v) {
            assert!((o - (i - 5.0) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_statistics_and_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 16, 4], 3.0, &mut rng).map(|v| v + 2.0);
        let (y, st) = revin_normalize(&x, &[1.0; 4], &[0.0; 4]).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let col: Vec<f64> = (0..16).map(|t| y.data()[(i * 16 + t) * 4 + c]).collect();
                let m = col.iter().sum::<f64>() / 16.0;
                let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
                assert!(m.abs() < 1e-6);
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert!(revin_denormalize(&y, &st).unwrap().max_abs_diff(&x) < 1e-5);
        let zeros = revin_denormalize(&Tensor::zeros(&[3, 16, 4]), &st).unwrap();
        for i in 0..3 {
            for t in 0..16 {
                for c in 0..4 {
                    assert!((zeros.data()[(i * 16 + t) * 4 + c] - st.mean.data()[i * 4 + c]).abs() < 1e-12);
                }
            }
        }
        let (y, st) = revin_normalize(&x, &[3.0; 4], &[1.0; 4]).unwrap();
        assert!(revin_denormalize(&y, &st).unwrap().max_abs_diff(&x) < 1e-9);
        assert!(revin_denormalize(&Tensor::zeros(&[2, 16, 4]), &st).is_err());
    }

    #[test]
    fn graph_revin_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 6, 3], 1.0, &mut rng);
        let (want, _) = revin_normalize(&x, &[2.0, 0.5, 1.0], &[0.1, 0.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.constant(Tensor::new(vec![1, 1, 3], vec![2.0, 0.5, 1.0]));
        let b = g.constant(Tensor::new(vec![1, 1, 3], vec![0.1, 0.0, -1.0]));
        let (y, st) = revin_norm_graph(&mut g, xv, s, b);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        let back = revin_denorm_graph(&mut g, y, &st);
        assert!(g.value(back).max_abs_diff(&x) < 1e-9);
    }

    fn block(seed: u64, d: usize) -> (TrendNet, ParamStore, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = TrendNet::new(&mut store, &TrendConfig::default(), d, &mut rng);
        (net, store, rng)
    }

    fn run(net: &TrendNet, store: &ParamStore, x: &Tensor, e: &Tensor) -> Tensor {
        let mut ctx = Ctx::new(store);
        let xv = ctx.constant(x.clone());
        let ev = ctx.constant(e.clone());
        let y = net.forward(&mut ctx, xv, ev).unwrap();
        ctx.value(y).clone()
    }

    #[test]
    fn zero_branches_give_identity_and_shapes_hold() {
        let (net, mut store, mut rng) = block(2, 5);
        for &(b, l) in &[(1, 1), (3, 7), (2, 24)] {
            let x = Tensor::randn(&[b, l, 5], 1.0, &mut rng);
            let e = Tensor::randn(&[b, 5], 1.0, &mut rng);
            assert_eq!(run(&net, &store, &x, &e).shape(), x.shape());
        }
        net.zero_branches(&mut store);
        let x = Tensor::randn(&[3, 7, 5], 1.0, &mut rng);
        let e = Tensor::randn(&[3, 5], 1.0, &mut rng);
        assert!(run(&net, &store, &x, &e).max_abs_diff(&x) < 1e-12);
        let mut ctx = Ctx::new(&store);
        let bad = ctx.constant(Tensor::zeros(&[1, 2, 4]));
        let ev = ctx.constant(Tensor::zeros(&[1, 5]));
        assert!(net.forward(&mut ctx, bad, ev).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (net, mut store, mut rng) = block(3, 3);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.5, &mut rng));
        }
        store.set(net.revin_scale, Tensor::new(vec![3], vec![1.3, 0.7, -1.1]));
        let x = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let e = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let (analytic, numeric) = gradient_check(&store, 1e-5, |ctx| {
            let xv = ctx.constant(x.clone());
            let ev = ctx.constant(e.clone());
            let y = net.forward(ctx, xv, ev).unwrap();
            let wv = ctx.constant(w.clone());
            let p = ctx.g.mul(y, wv);
            ctx.g.sum_all(p)
        });
        for (id, (a, n)) in store.ids().zip(analytic.iter().zip(&numeric)) {
            for (x, y) in a.data().iter().zip(n.data()) {
                assert!(relative_error(*x, *y, 1e-6) < 1e-4, "{}: {x} vs {y}", store.name(id));
            }
        }
    }
}

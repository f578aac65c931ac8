//! Learnable moving average: a reversible trend/seasonal split.
//!
//! The trend is a softmax-weighted mixture of causal moving averages at several
//! widths followed by a per-channel affine map; the seasonal part is the input
//! minus the pre-affine mixture, so [`Lma::restore`] inverts [`Lma::decompose`]
//! exactly.

use log::warn;
use rand::Rng;

use crate::config::LmaConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Smallest scale the affine map can reach.
pub const GAMMA_FLOOR: f64 = 1e-4;

/// Kernel width used when the learnable mixture is switched off.
pub const FIXED_KERNEL: usize = 3;

/// Causal moving average of width `l` along the time axis of a `(B, L, K)`
/// tensor, left edge replicated.
pub fn moving_average(x: &Tensor, l: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("expected (batch, length, channels), got {:?}", x.shape())));
    }
    if l == 0 || l > x.dim(1) {
        return Err(Error::InvalidArgument(format!(
            "kernel {l} must lie in 1..={}",
            x.dim(1)
        )));
    }
    Ok(crate::graph::causal_ma(x, l))
}

#[derive(Clone, Debug)]
enum Weighting {
    /// Position- and channel-wise weights from a small perceptron over the
    /// stacked averages.
    Local { hidden: Linear, out: Linear },
    /// One learnable logit vector per channel, shared over time.
    Global { logits: ParamId },
    /// A single fixed kernel, no learnable weights.
    Fixed,
}

#[derive(Clone, Debug)]
pub struct KernelBank {
    kernels: Vec<usize>,
    weighting: Weighting,
}

impl KernelBank {
    pub fn kernels(&self) -> &[usize] {
        &self.kernels
    }

    pub fn is_learnable(&self) -> bool {
        !matches!(self.weighting, Weighting::Fixed)
    }
}

/// Per-channel `γ = GAMMA_FLOOR + exp(g)` and `β`.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub log_gamma: ParamId,
    pub beta: ParamId,
}

impl AffineParams {
    pub fn gamma_values(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.log_gamma).data().iter().map(|g| GAMMA_FLOOR + g.exp()).collect()
    }

    pub fn beta_values(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.beta).data().to_vec()
    }

    /// Set `γ` directly; values at or below the floor are clamped just above it.
    pub fn set_gamma(&self, store: &mut ParamStore, gamma: &[f64]) {
        let g = gamma.iter().map(|&v| (v - GAMMA_FLOOR).max(f64::MIN_POSITIVE).ln()).collect();
        store.set(self.log_gamma, Tensor::new(vec![gamma.len()], g));
    }

    pub fn set_beta(&self, store: &mut ParamStore, beta: &[f64]) {
        store.set(self.beta, Tensor::new(vec![beta.len()], beta.to_vec()));
    }
}

/// Graph nodes of one decomposition.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionVars {
    pub trend: Var,
    pub seasonal: Var,
    pub raw_trend: Var,
    /// `(B, L, K, n_kernels)` weights.
    pub weights: Var,
    /// `(1, 1, K)` affine coefficients, reused by [`Lma::restore`].
    pub gamma: Var,
    pub beta: Var,
}

/// Plain-array view of a decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    pub trend: Tensor,
    pub seasonal: Tensor,
    pub raw_trend: Tensor,
    pub weights: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Lma {
    pub bank: KernelBank,
    /// Absent when the module is disabled: the affine map is then the identity.
    pub affine: Option<AffineParams>,
    channels: usize,
}

impl Lma {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &LmaConfig,
        window: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !cfg.enabled {
            let k = FIXED_KERNEL.min(window);
            return Ok(Self {
                bank: KernelBank {
                    kernels: vec![k],
                    weighting: Weighting::Fixed,
                },
                affine: None,
                channels,
            });
        }
        let mut kernels = Vec::new();
        for &l in &cfg.kernels {
            if l == 0 {
                return Err(Error::Config("moving-average kernels must be positive".into()));
            }
            if kernels.contains(&l) {
                return Err(Error::Config(format!("duplicate moving-average kernel {l}")));
            }
            if l > window {
                warn!("dropping moving-average kernel {l}: longer than window {window}");
                continue;
            }
            kernels.push(l);
        }
        if kernels.is_empty() {
            return Err(Error::Config(format!("no moving-average kernel fits window {window}")));
        }
        let n = kernels.len();
        let weighting = if cfg.global_weights {
            Weighting::Global {
                logits: store.add("lma.logits", Tensor::zeros(&[channels, n])),
            }
        } else {
            Weighting::Local {
                hidden: Linear::new(store, "lma.net.0", n, cfg.hidden, true, rng),
                out: Linear::new(store, "lma.net.1", cfg.hidden, n, true, rng),
            }
        };
        let g0 = (1.0 - GAMMA_FLOOR).ln();
        let affine = AffineParams {
            log_gamma: store.add("lma.log_gamma", Tensor::full(&[channels], g0)),
            beta: store.add("lma.beta", Tensor::zeros(&[channels])),
        };
        Ok(Self {
            bank: KernelBank { kernels, weighting },
            affine: Some(affine),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Overwrite the local weight net so that it puts (numerically) all mass
    /// on kernel `index`. For tests and inspection.
    pub fn force_kernel(&self, store: &mut ParamStore, index: usize) {
        let n = self.bank.kernels.len();
        match &self.bank.weighting {
            Weighting::Local { hidden, out } => {
                hidden.set_zero(store);
                out.set_zero(store);
                let mut b = vec![-1e3; n];
                b[index] = 0.0;
                store.set(out.bias.expect("bias"), Tensor::new(vec![n], b));
            }
            Weighting::Global { logits } => {
                let mut v = vec![-1e3; self.channels * n];
                for c in 0..self.channels {
                    v[c * n + index] = 0.0;
                }
                store.set(*logits, Tensor::new(vec![self.channels, n], v));
            }
            Weighting::Fixed => {}
        }
    }

    fn affine_vars(&self, ctx: &mut Ctx) -> (Var, Var) {
        let k = self.channels;
        match self.affine {
            Some(a) => {
                let g = ctx.param(a.log_gamma);
                let g = ctx.g.exp(g);
                let g = ctx.g.add_scalar(g, GAMMA_FLOOR);
                let g = ctx.g.reshape(g, &[1, 1, k]);
                let b = ctx.param(a.beta);
                let b = ctx.g.reshape(b, &[1, 1, k]);
                (g, b)
            }
            None => (ctx.constant(Tensor::ones(&[1, 1, k])), ctx.constant(Tensor::zeros(&[1, 1, k]))),
        }
    }

    pub fn decompose(&self, ctx: &mut Ctx, x: Var) -> Result<DecompositionVars> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::Shape(format!(
                "decomposition expects (batch, length, {}), got {shape:?}",
                self.channels
            )));
        }
        let (b, l, k) = (shape[0], shape[1], shape[2]);
        if let Some(&max) = self.bank.kernels.iter().max() {
            if max > l {
                return Err(Error::InvalidArgument(format!("kernel {max} exceeds window {l}")));
            }
        }
        let n = self.bank.kernels.len();
        let mas: Vec<Var> = self.bank.kernels.iter().map(|&w| ctx.g.causal_ma(x, w)).collect();
        let stacked = ctx.g.stack_last(&mas);
        let weights = match &self.bank.weighting {
            Weighting::Local { hidden, out } => {
                let h = hidden.forward(ctx, stacked);
                let h = ctx.g.silu(h);
                let logits = out.forward(ctx, h);
                ctx.g.softmax_last(logits)
            }
            Weighting::Global { logits } => {
                let p = ctx.param(*logits);
                let w = ctx.g.softmax_last(p);
                let w = ctx.g.reshape(w, &[1, 1, k, n]);
                let zero = ctx.constant(Tensor::zeros(&[b, l, k, n]));
                ctx.g.add(zero, w)
            }
            Weighting::Fixed => ctx.constant(Tensor::ones(&[b, l, k, 1])),
        };
        let mixed = ctx.g.mul(weights, stacked);
        let raw = ctx.g.sum_axis(mixed, 3);
        let raw_trend = ctx.g.reshape(raw, &[b, l, k]);
        let (gamma, beta) = self.affine_vars(ctx);
        let scaled = ctx.g.mul(raw_trend, gamma);
        let trend = ctx.g.add(scaled, beta);
        let seasonal = ctx.g.sub(x, raw_trend);
        Ok(DecompositionVars {
            trend,
            seasonal,
            raw_trend,
            weights,
            gamma,
            beta,
        })
    }

    /// `x̂ = (T − β)/γ + S` with the affine nodes of the paired decomposition.
    pub fn restore(&self, ctx: &mut Ctx, dec: &DecompositionVars, trend: Var, seasonal: Var) -> Result<Var> {
        if ctx.g.shape(trend) != ctx.g.shape(seasonal) {
            return Err(Error::Shape(format!(
                "trend {:?} vs seasonal {:?}",
                ctx.g.shape(trend),
                ctx.g.shape(seasonal)
            )));
        }
        let centred = ctx.g.sub(trend, dec.beta);
        let unscaled = ctx.g.div(centred, dec.gamma);
        Ok(ctx.g.add(unscaled, seasonal))
    }

    /// Run a decomposition outside of training and return plain arrays.
    pub fn decompose_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<DecompositionResult> {
        let mut ctx = Ctx::new(store);
        let xv = ctx.constant(x.clone());
        let dec = self.decompose(&mut ctx, xv)?;
        Ok(DecompositionResult {
            trend: ctx.value(dec.trend).clone(),
            seasonal: ctx.value(dec.seasonal).clone(),
            raw_trend: ctx.value(dec.raw_trend).clone(),
            weights: ctx.value(dec.weights).clone(),
            gamma: ctx.value(dec.gamma).data().to_vec(),
            beta: ctx.value(dec.beta).data().to_vec(),
        })
    }
}

/// Mean kernel weights per channel from `(B, L, K, n)` weights, as `K` rows
/// of `n` entries.
pub fn kernel_weight_summary(weights: &Tensor) -> Result<Vec<Vec<f64>>> {
    if weights.rank() != 4 {
        return Err(Error::Shape(format!("expected (B, L, K, n) weights, got {:?}", weights.shape())));
    }
    let (b, l, k, n) = (weights.dim(0), weights.dim(1), weights.dim(2), weights.dim(3));
    let mut out = vec![vec![0.0; n]; k];
    for (i, w) in weights.data().iter().enumerate() {
        out[(i / n) % k][i % n] += w;
    }
    let count = (b * l).max(1) as f64;
    out.iter_mut().flatten().for_each(|v| *v /= count);
    Ok(out)
}

/// `(T − β)/γ + S` on plain arrays, with per-channel `γ` and `β`.
pub fn restore(trend: &Tensor, seasonal: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    if trend.shape() != seasonal.shape() {
        return Err(Error::Shape(format!("trend {:?} vs seasonal {:?}", trend.shape(), seasonal.shape())));
    }
    let k = *trend.shape().last().unwrap_or(&0);
    if gamma.len() != k || beta.len() != k {
        return Err(Error::Shape(format!("{k} channels but {} scales, {} shifts", gamma.len(), beta.len())));
    }
    let data = trend
        .data()
        .iter()
        .zip(seasonal.data())
        .enumerate()
        .map(|(i, (t, s))| (t - beta[i % k]) / gamma[i % k] + s)
        .collect();
    Ok(Tensor::new(trend.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kernels: &[usize]) -> LmaConfig {
        LmaConfig {
            kernels: kernels.to_vec(),
            ..LmaConfig::default()
        }
    }

    fn series(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len(), 1], v.to_vec())
    }

    #[test]
    fn weight_summary_averages_over_batch_and_time() {
        let w = Tensor::new(vec![2, 1, 2, 2], vec![0.2, 0.8, 1.0, 0.0, 0.4, 0.6, 0.0, 1.0]);
        let s = kernel_weight_summary(&w).unwrap();
        assert!((s[0][0] - 0.3).abs() < 1e-12 && (s[0][1] - 0.7).abs() < 1e-12);
        assert_eq!(s[1], vec![0.5, 0.5]);
        assert!(kernel_weight_summary(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn moving_average_examples() {
        let x = series(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(moving_average(&x, 1).unwrap(), x);
        assert_eq!(moving_average(&x, 2).unwrap().data(), &[1.0, 1.5, 2.5, 3.5]);
        let c = Tensor::full(&[2, 6, 3], 0.3);
        for l in 1..=6 {
            assert!(moving_average(&c, l).unwrap().max_abs_diff(&c) < 1e-15);
        }
        assert!(moving_average(&x, 5).is_err());
        assert!(moving_average(&x, 0).is_err());
    }

    #[test]
    fn oversized_kernels_dropped() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lma = Lma::new(&mut store, &cfg(&[1, 2, 4, 6, 12]), 8, 2, &mut rng).unwrap();
        assert_eq!(lma.bank.kernels(), &[1, 2, 4, 6]);
        assert!(Lma::new(&mut store, &cfg(&[12]), 8, 2, &mut rng).is_err());
        assert!(Lma::new(&mut store, &cfg(&[2, 2]), 8, 2, &mut rng).is_err());
    }

    #[test]
    fn kernel_one_selected_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lma = Lma::new(&mut store, &cfg(&[1, 2, 4]), 8, 2, &mut rng).unwrap();
        lma.force_kernel(&mut store, 0);
        lma.affine.unwrap().set_gamma(&mut store, &[1.0, 1.0]);
        let x = Tensor::randn(&[3, 8, 2], 1.0, &mut rng);
        let d = lma.decompose_tensor(&store, &x).unwrap();
        assert!(d.trend.max_abs_diff(&x) < 1e-12);
        assert!(d.seasonal.max_abs() < 1e-12);
    }

    #[test]
    fn constant_input_has_no_seasonal() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lma = Lma::new(&mut store, &cfg(&[1, 2, 4, 6]), 12, 1, &mut rng).unwrap();
        let aff = lma.affine.unwrap();
        aff.set_gamma(&mut store, &[2.5]);
        aff.set_beta(&mut store, &[-0.5]);
        let d = lma.decompose_tensor(&store, &Tensor::full(&[2, 12, 1], 3.0)).unwrap();
        assert!(d.seasonal.max_abs() < 1e-12);
        for t in d.trend.data() {
            assert!((t - (2.5 * 3.0 - 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_two_kernel_example() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = LmaConfig {
            global_weights: true,
            ..cfg(&[1, 2])
        };
        let lma = Lma::new(&mut store, &c, 4, 1, &mut rng).unwrap();
        lma.affine.unwrap().set_gamma(&mut store, &[1.0]);
        let d = lma.decompose_tensor(&store, &series(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let want_raw = [1.0, 1.75, 2.75, 3.75];
        let want_s = [0.0, 0.25, 0.25, 0.25];
        for i in 0..4 {
            assert!((d.raw_trend.data()[i] - want_raw[i]).abs() < 1e-12);
            assert!((d.trend.data()[i] - want_raw[i]).abs() < 1e-9);
            assert!((d.seasonal.data()[i] - want_s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn restore_arithmetic_and_guards() {
        let t = Tensor::new(vec![1, 1, 1], vec![3.0]);
        let s = Tensor::new(vec![1, 1, 1], vec![0.5]);
        assert_eq!(restore(&t, &s, &[2.0], &[1.0]).unwrap().data(), &[1.5]);
        let out = restore(&t, &s, &[GAMMA_FLOOR], &[0.0]).unwrap();
        assert!(out.is_finite());
        assert!(restore(&t, &Tensor::zeros(&[1, 2, 1]), &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn gamma_floor_holds() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lma = Lma::new(&mut store, &cfg(&[1, 2]), 4, 1, &mut rng).unwrap();
        let aff = lma.affine.unwrap();
        store.set(aff.log_gamma, Tensor::new(vec![1], vec![-1e6]));
        assert!(aff.gamma_values(&store)[0] >= GAMMA_FLOOR);
        let x = Tensor::randn(&[2, 4, 1], 1.0, &mut rng);
        let d = lma.decompose_tensor(&store, &x).unwrap();
        let back = restore(&d.trend, &d.seasonal, &d.gamma, &d.beta).unwrap();
        assert!(back.is_finite());
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn disabled_uses_fixed_kernel_three() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = LmaConfig {
            enabled: false,
            ..LmaConfig::default()
        };
        let lma = Lma::new(&mut store, &c, 24, 2, &mut rng).unwrap();
        assert_eq!(lma.bank.kernels(), &[FIXED_KERNEL]);
        assert!(store.is_empty());
        let x = Tensor::randn(&[2, 24, 2], 1.0, &mut rng);
        let d = lma.decompose_tensor(&store, &x).unwrap();
        assert_eq!(d.raw_trend, moving_average(&x, 3).unwrap());
        assert_eq!(d.trend, d.raw_trend);
    }

    fn random_lma(seed: u64, global: bool, k: usize) -> (Lma, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = LmaConfig {
            global_weights: global,
            ..LmaConfig::default()
        };
        let lma = Lma::new(&mut store, &c, 24, k, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 1.0, &mut rng));
        }
        (lma, store)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn roundtrip_and_weight_simplex(seed in 0u64..10_000, global in any::<bool>()) {
            let (lma, store) = random_lma(seed, global, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let x = Tensor::randn(&[4, 24, 3], 2.0, &mut rng);
            let d = lma.decompose_tensor(&store, &x).unwrap();
            let back = restore(&d.trend, &d.seasonal, &d.gamma, &d.beta).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-6);
            let seasonal_check = x.data().iter().zip(d.raw_trend.data()).map(|(a, b)| a - b);
            for (s, want) in d.seasonal.data().iter().zip(seasonal_check) {
                prop_assert_eq!(*s, want);
            }
            for row in d.weights.data().chunks(5) {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn moving_average_shift_equivariant(v in proptest::collection::vec(-5.0f64..5.0, 12), l in 1usize..6) {
            let x = series(&v);
            let mut shifted = vec![v[0] - 1.0];
            shifted.extend_from_slice(&v[..11]);
            let ma = moving_average(&x, l).unwrap();
            let ms = moving_average(&series(&shifted), l).unwrap();
            for t in l..12 {
                prop_assert!((ms.data()[t] - ma.data()[t - 1]).abs() < 1e-12);
            }
        }
    }
}

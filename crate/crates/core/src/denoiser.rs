//! The full denoising network, its training objective and optimisation loop.
//!
//! Forward pass: learnable moving-average decomposition, per-component
//! encoders, trend and seasonal blocks conditioned on the step, cross
//! correction, decoders, and the inverse affine restoration to `x̂₀`.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Parameterization, RunConfig};
use crate::correction::Correction;
use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lma::{DecompositionVars, Lma};
use crate::nn::{sinusoidal_embedding, Adam, Ctx, Linear, ParamId, ParamStore};
use crate::seasonal::SeasonalBlock;
use crate::tensor::Tensor;
use crate::trend::TrendNet;

/// Batch size used when running the network without gradients.
const INFERENCE_CHUNK: usize = 128;

#[derive(Clone, Debug)]
pub struct StepEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

impl StepEmbedding {
    fn forward(&self, ctx: &mut Ctx, steps: &[usize]) -> Var {
        let e = ctx.constant(sinusoidal_embedding(steps, self.width));
        let h = self.fc1.forward(ctx, e);
        let h = ctx.g.silu(h);
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: RunConfig,
    pub window: usize,
    pub channels: usize,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub lma: Lma,
    pub trend_encoder: Linear,
    pub seasonal_encoder: Linear,
    /// `(1, L, d)` embedding added to both encodings when enabled.
    pub position: Option<ParamId>,
    pub step_embedding: StepEmbedding,
    pub trend: TrendNet,
    pub seasonal: SeasonalBlock,
    pub correction: Correction,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub x0_hat: Var,
    pub decomposition: DecompositionVars,
}

/// Graph nodes of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub denoise: Var,
    pub regularizer: Var,
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub denoise: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl Denoiser {
    /// Build a freshly initialised network for `channels` features, seeded
    /// from `config.seed`.
    pub fn new(config: &RunConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::InvalidArgument("need at least one channel".into()));
        }
        let window = config.data.window;
        let d = config.model.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let schedule = NoiseSchedule::from_config(&config.diffusion)?;
        let lma = Lma::new(&mut store, &config.lma, window, channels, &mut rng)?;
        let trend_encoder = Linear::new(&mut store, "encoder.trend", channels, d, true, &mut rng);
        let seasonal_encoder = Linear::new(&mut store, "encoder.seasonal", channels, d, true, &mut rng);
        let position = config
            .model
            .positional
            .then(|| store.add("encoder.position", Tensor::zeros(&[1, window, d])));
        let step_embedding = StepEmbedding {
            fc1: Linear::new(&mut store, "step.fc1", d, d, true, &mut rng),
            fc2: Linear::new(&mut store, "step.fc2", d, d, true, &mut rng),
            width: d,
        };
        let trend = TrendNet::new(&mut store, &config.trend, d, &mut rng);
        let seasonal = SeasonalBlock::new(&mut store, &config.wavelet, &config.attention, d, window, &mut rng)?;
        let correction = Correction::new(&mut store, &config.correction, d, channels, &mut rng);
        Ok(Self {
            config: config.clone(),
            window,
            channels,
            store,
            schedule,
            lma,
            trend_encoder,
            seasonal_encoder,
            position,
            step_embedding,
            trend,
            seasonal,
            correction,
        })
    }

    fn check_input(&self, shape: &[usize], steps: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.window || shape[2] != self.channels {
            return Err(Error::Shape(format!(
                "expected (batch, {}, {}), got {shape:?}",
                self.window, self.channels
            )));
        }
        if steps.len() != shape[0] {
            return Err(Error::Shape(format!("{} steps for batch of {}", steps.len(), shape[0])));
        }
        if let Some(&s) = steps.iter().find(|&&s| s == 0 || s > self.schedule.steps) {
            return Err(Error::StepOutOfRange {
                step: s,
                steps: self.schedule.steps,
            });
        }
        Ok(())
    }

    /// Build `x̂₀` for the noisy batch `x` at per-sample `steps`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, steps: &[usize]) -> Result<ForwardVars> {
        self.check_input(ctx.g.shape(x), steps)?;
        let emb = self.step_embedding.forward(ctx, steps);
        let dec = self.lma.decompose(ctx, x)?;
        let t = self.trend_encoder.forward(ctx, dec.trend);
        let s = self.seasonal_encoder.forward(ctx, dec.seasonal);
        let (t, s) = match self.position {
            Some(p) => {
                let p = ctx.param(p);
                (ctx.g.add(t, p), ctx.g.add(s, p))
            }
            None => (t, s),
        };
        let t = self.trend.forward(ctx, t, emb)?;
        let s = self.seasonal.forward(ctx, s, emb)?;
        let (t, s) = self.correction.forward(ctx, t, s)?;
        let x0_hat = self.lma.restore(ctx, &dec, t, s)?;
        Ok(ForwardVars {
            x0_hat,
            decomposition: dec,
        })
    }

    /// `x̂₀` in model space without gradients, evaluated in chunks.
    pub fn predict_x0(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.check_input(x.shape(), steps)?;
        let n = x.dim(0);
        let mut out = Vec::with_capacity(x.numel());
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let rows: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let mut ctx = Ctx::new(&self.store);
            let xv = ctx.constant(x.select_rows(&rows));
            let f = self.forward(&mut ctx, xv, &steps[start..start + rows.len()])?;
            out.extend_from_slice(ctx.value(f.x0_hat).data());
        }
        Ok(Tensor::new(x.shape().to_vec(), out))
    }

    /// Map `[0, 1]` data to the space the diffusion runs in.
    pub fn to_model_space(&self, x: &Tensor) -> Tensor {
        if self.config.model.rescale {
            x.map(|v| 2.0 * v - 1.0)
        } else {
            x.clone()
        }
    }

    /// Bounds of `[0, 1]` data in model space.
    pub fn data_range(&self) -> (f64, f64) {
        if self.config.model.rescale {
            (-1.0, 1.0)
        } else {
            (0.0, 1.0)
        }
    }

    pub fn from_model_space(&self, x: &Tensor) -> Tensor {
        if self.config.model.rescale {
            x.map(|v| (v + 1.0) / 2.0)
        } else {
            x.clone()
        }
    }

    /// Objective for a clean `[0, 1]` batch with explicit steps and noise.
    pub fn loss(&self, ctx: &mut Ctx, x0: &Tensor, steps: &[usize], eps: &Tensor) -> Result<LossVars> {
        if x0.numel() == 0 {
            return Err(Error::Empty("training batch"));
        }
        self.check_input(x0.shape(), steps)?;
        let x0 = &self.to_model_space(x0);
        let xs = diffusion::forward_diffuse_batch(x0, steps, eps, &self.schedule)?;
        let xv = ctx.constant(xs.clone());
        let f = self.forward(ctx, xv, steps)?;
        let denoise = objective(
            &mut ctx.g,
            f.x0_hat,
            x0,
            &xs,
            eps,
            steps,
            &self.schedule,
            self.config.model.parameterization,
        );
        let regularizer = self.seasonal.filter.regularizer(ctx);
        let weighted = ctx.g.scale(regularizer, self.config.wavelet.reg_weight);
        let total = ctx.g.add(denoise, weighted);
        Ok(LossVars {
            total,
            denoise,
            regularizer,
        })
    }

    /// Sample steps uniformly from `1..=S` and standard normal noise, then
    /// return the objective and per-parameter gradients.
    pub fn training_loss<R: Rng + ?Sized>(&self, x0: &Tensor, rng: &mut R) -> Result<(LossRecord, Vec<Tensor>)> {
        if x0.numel() == 0 {
            return Err(Error::Empty("training batch"));
        }
        let steps: Vec<usize> = (0..x0.dim(0)).map(|_| rng.gen_range(1..=self.schedule.steps)).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, rng);
        let mut ctx = Ctx::new(&self.store);
        let l = self.loss(&mut ctx, x0, &steps, &eps)?;
        let grads = ctx.backward(l.total);
        let rec = LossRecord {
            step: 0,
            epoch: 0,
            denoise: ctx.value(l.denoise).item(),
            regularizer: ctx.value(l.regularizer).item(),
            total: ctx.value(l.total).item(),
        };
        Ok((rec, grads))
    }

    /// Ancestral sampling of `n` windows in `[0, 1]` data units.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        let shape = [n, self.window, self.channels];
        let x = diffusion::sample(&self.schedule, shape, seed, |x, s| {
            let steps = vec![s; x.dim(0)];
            let mut x0_hat = self.predict_x0(x, &steps)?;
            if self.config.diffusion.clip_x0 {
                let (lo, hi) = self.data_range();
                x0_hat = x0_hat.map(|v| v.clamp(lo, hi));
            }
            eps_from_x0(&x0_hat, x, s, &self.schedule)
        })?;
        Ok(self.from_model_space(&x))
    }

    /// Fixed-noise objective averaged over `x0`, for progress comparisons.
    pub fn evaluation_loss(&self, x0: &Tensor, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps: Vec<usize> = (0..x0.dim(0)).map(|_| rng.gen_range(1..=self.schedule.steps)).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let n = x0.dim(0);
        let mut sum = 0.0;
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let rows: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let mut ctx = Ctx::new(&self.store);
            let l = self.loss(
                &mut ctx,
                &x0.select_rows(&rows),
                &steps[start..start + rows.len()],
                &eps.select_rows(&rows),
            )?;
            sum += ctx.value(l.denoise).item() * rows.len() as f64;
        }
        Ok(sum / n as f64)
    }
}

/// Mean squared error of the chosen parameterization. Under `PredictEps` the
/// network's `x̂₀` is first converted to a noise estimate.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    g: &mut Graph,
    x0_hat: Var,
    x0: &Tensor,
    xs: &Tensor,
    eps: &Tensor,
    steps: &[usize],
    schedule: &NoiseSchedule,
    param: Parameterization,
) -> Var {
    let diff = match param {
        Parameterization::PredictX0 => {
            let target = g.constant(x0.clone());
            g.sub(x0_hat, target)
        }
        Parameterization::PredictEps => {
            let b = steps.len();
            let a = Tensor::new(
                vec![b, 1, 1],
                steps.iter().map(|&s| schedule.alpha_bar_at(s).sqrt()).collect(),
            );
            let inv = Tensor::new(
                vec![b, 1, 1],
                steps.iter().map(|&s| 1.0 / (1.0 - schedule.alpha_bar_at(s)).sqrt()).collect(),
            );
            let (a, inv) = (g.constant(a), g.constant(inv));
            let xsv = g.constant(xs.clone());
            let scaled = g.mul(x0_hat, a);
            let num = g.sub(xsv, scaled);
            let eps_hat = g.mul(num, inv);
            let target = g.constant(eps.clone());
            g.sub(eps_hat, target)
        }
    };
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// `ε̂ = (x_s − √ᾱ_s x̂₀) / √(1 − ᾱ_s)`.
pub fn eps_from_x0(x0_hat: &Tensor, xs: &Tensor, s: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if s == 0 || s > schedule.steps {
        return Err(Error::StepOutOfRange {
            step: s,
            steps: schedule.steps,
        });
    }
    if x0_hat.shape() != xs.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x0_hat.shape(), xs.shape())));
    }
    let ab = schedule.alpha_bar_at(s);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = xs.data().iter().zip(x0_hat.data()).map(|(x, x0)| (x - a * x0) / b).collect();
    Ok(Tensor::new(xs.shape().to_vec(), data))
}

/// Optimisation progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub optimizer: Adam,
    /// One record per optimisation step.
    pub history: Vec<LossRecord>,
    pub seed: u64,
}

impl TrainState {
    /// Mean total loss of each completed epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = vec![(0.0, 0); self.epoch];
        for r in &self.history {
            if r.epoch >= 1 && r.epoch <= self.epoch {
                out[r.epoch - 1].0 += r.denoise;
                out[r.epoch - 1].1 += 1;
            }
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Train on scaled windows `(N, L, K)` for `epochs` passes. `on_epoch` runs
/// after every epoch and may write checkpoints.
pub fn train_with<F>(model: &mut Denoiser, data: &Tensor, epochs: usize, seed: u64, mut on_epoch: F) -> Result<TrainState>
where
    F: FnMut(&Denoiser, &TrainState) -> Result<()>,
{
    let n = data.dim(0);
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    if data.dim(1) != model.window || data.dim(2) != model.channels {
        return Err(Error::Shape(format!(
            "training windows {:?}, model expects (_, {}, {})",
            data.shape(),
            model.window,
            model.channels
        )));
    }
    let tc = model.config.train.clone();
    let batches_per_epoch = n.div_ceil(tc.batch_size);
    let mut optimizer = Adam::new(&model.store, tc.lr);
    optimizer.grad_clip = tc.grad_clip;
    if tc.cosine_decay {
        optimizer.decay_steps = Some(epochs * batches_per_epoch);
    }
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        optimizer,
        history: Vec::with_capacity(epochs * batches_per_epoch),
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let batch = data.select_rows(chunk);
            let (mut rec, grads) = model.training_loss(&batch, &mut rng)?;
            state.step += 1;
            if !rec.total.is_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    loss: rec.total,
                });
            }
            state.optimizer.step(&mut model.store, &grads);
            if model.store.iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Diverged {
                    step: state.step,
                    loss: f64::NAN,
                });
            }
            rec.step = state.step;
            rec.epoch = epoch;
            state.history.push(rec);
        }
        state.epoch = epoch;
        let mean = state.epoch_means()[epoch - 1];
        if epoch == 1 || epoch % 10 == 0 || epoch == epochs {
            info!("epoch {epoch}/{epochs}: loss {mean:.5}");
        } else {
            debug!("epoch {epoch}/{epochs}: loss {mean:.5}");
        }
        on_epoch(model, &state)?;
    }
    Ok(state)
}

pub fn train(model: &mut Denoiser, data: &Tensor, epochs: usize, seed: u64) -> Result<TrainState> {
    train_with(model, data, epochs, seed, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Levels, LmaConfig};
    use crate::nn::relative_error;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.window = 8;
        c.model.width = 4;
        c.diffusion.steps = 20;
        c.lma.kernels = vec![1, 2, 4];
        c.wavelet.levels = Levels::Fixed(1);
        c
    }

    fn randomize(model: &mut Denoiser, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in model.store.ids().collect::<Vec<_>>() {
            if !model.store.is_trainable(id) {
                continue;
            }
            let shape = model.store.get(id).shape().to_vec();
            let noise = Tensor::randn(&shape, std, &mut rng);
            let name = model.store.name(id).to_string();
            let v = model.store.get_mut(id);
            for (x, e) in v.data_mut().iter_mut().zip(noise.data()) {
                *x = if name == "trend.revin.scale" { 1.0 + e } else { *x + e };
            }
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let model = Denoiser::new(&tiny_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 8, 2], 1.0, &mut rng);
        let a = model.predict_x0(&x, &[1, 5, 20]).unwrap();
        let b = model.predict_x0(&x, &[1, 5, 20]).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
        assert!(model.predict_x0(&x, &[0, 5, 20]).is_err());
        assert!(model.predict_x0(&x, &[1, 5, 21]).is_err());
        assert!(model.predict_x0(&Tensor::zeros(&[3, 7, 2]), &[1, 1, 1]).is_err());
        let again = Denoiser::new(&tiny_config(), 2).unwrap();
        assert_eq!(again.predict_x0(&x, &[1, 5, 20]).unwrap(), a);
    }

    fn identity_model(cfg: &RunConfig, k: usize) -> Denoiser {
        let mut m = Denoiser::new(cfg, k).unwrap();
        let s = &mut m.store;
        m.lma.force_kernel(s, 0);
        if let Some(a) = m.lma.affine {
            a.set_gamma(s, &vec![1.0; k]);
            a.set_beta(s, &vec![0.0; k]);
        }
        m.trend_encoder.set_identity(s);
        m.seasonal_encoder.set_identity(s);
        m.trend.zero_branches(s);
        for la in &m.seasonal.attention.levels {
            la.cond.set_zero(s);
            for h in &la.heads {
                h.v.set_identity(s);
            }
        }
        if let Some(p) = m.correction.parts {
            for proj in [p.trend_proj, p.seasonal_proj] {
                let mut w = Tensor::zeros(&[k, 2 * k]);
                for i in 0..k {
                    w.data_mut()[i * 2 * k + i] = 1.0;
                    w.data_mut()[i * 2 * k + k + i] = 1.0;
                }
                s.set(proj.proj.weight, w);
                s.set(proj.proj.bias.unwrap(), Tensor::zeros(&[2 * k]));
            }
            for h in [p.attention.trend, p.attention.seasonal] {
                h.q.set_identity(s);
                h.k.set_identity(s);
                h.v.set_identity(s);
            }
        }
        m.correction.trend_decoder.set_identity(s);
        m.correction.seasonal_decoder.set_identity(s);
        m
    }

    #[test]
    fn identity_blocks_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // One timestep, no wavelet levels: every attention sees a single token.
        let mut cfg = tiny_config();
        cfg.data.window = 1;
        cfg.model.width = 3;
        cfg.lma.kernels = vec![1];
        cfg.wavelet.levels = Levels::Fixed(0);
        let m = identity_model(&cfg, 3);
        let x = Tensor::randn(&[4, 1, 3], 1.0, &mut rng);
        assert!(m.predict_x0(&x, &[1, 2, 3, 4]).unwrap().max_abs_diff(&x) < 1e-12);

        // Two timesteps, one level, correction off, global uniform weights so
        // the seasonal path carries signal.
        let mut cfg = tiny_config();
        cfg.data.window = 2;
        cfg.model.width = 2;
        cfg.lma = LmaConfig {
            kernels: vec![1, 2],
            global_weights: true,
            ..LmaConfig::default()
        };
        cfg.correction.enabled = false;
        let m = identity_model(&cfg, 2);
        let m = {
            let mut m = m;
            let logits = m.store.find("lma.logits").unwrap();
            m.store.set(logits, Tensor::zeros(&[2, 2]));
            m
        };
        let x = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        assert!(m.predict_x0(&x, &[1, 7, 20]).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn eps_conversion_examples() {
        let m = Denoiser::new(&tiny_config(), 2).unwrap();
        let sch = &m.schedule;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[2, 8, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 8, 2], 1.0, &mut rng);
        for s in [1, 10, 20] {
            let xs = diffusion::forward_diffuse(&x0, s, &eps, sch).unwrap().x;
            assert!(eps_from_x0(&x0, &xs, s, sch).unwrap().max_abs_diff(&eps) < 1e-6);
            let scaled = xs.map(|v| v / sch.alpha_bar_at(s).sqrt());
            assert!(eps_from_x0(&scaled, &xs, s, sch).unwrap().max_abs() < 1e-12);
        }
        let (x0h, xs) = (0.3, -1.1);
        let s = 7;
        let want = (xs - sch.alpha_bar_at(s).sqrt() * x0h) / (1.0 - sch.alpha_bar_at(s)).sqrt();
        let got = eps_from_x0(&Tensor::scalar(x0h), &Tensor::scalar(xs), s, sch).unwrap();
        assert!((got.item() - want).abs() < 1e-15);
        assert!(eps_from_x0(&x0, &x0, 0, sch).is_err());
        assert!(eps_from_x0(&x0, &x0, 21, sch).is_err());
    }

    #[test]
    fn oracle_prediction_has_zero_loss_and_parameterizations_relate() {
        let m = Denoiser::new(&tiny_config(), 2).unwrap();
        let sch = &m.schedule;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[3, 8, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 8, 2], 1.0, &mut rng);
        let steps = [2, 9, 17];
        let xs = diffusion::forward_diffuse_batch(&x0, &steps, &eps, sch).unwrap();
        for p in [Parameterization::PredictX0, Parameterization::PredictEps] {
            let mut g = Graph::new();
            let oracle = g.constant(x0.clone());
            let l = objective(&mut g, oracle, &x0, &xs, &eps, &steps, sch, p);
            assert!(g.value(l).item() <= 1e-10);
        }
        // Per-sample: eps error = sqrt(ᾱ/(1−ᾱ)) · x0 error.
        for &s in &steps {
            let guess = Tensor::randn(&[1, 8, 2], 1.0, &mut rng);
            let x0s = x0.select_rows(&[0]);
            let epss = eps.select_rows(&[0]);
            let xss = diffusion::forward_diffuse_batch(&x0s, &[s], &epss, sch).unwrap();
            let mut g = Graph::new();
            let gv = g.constant(guess.clone());
            let lx = objective(&mut g, gv, &x0s, &xss, &epss, &[s], sch, Parameterization::PredictX0);
            let le = objective(&mut g, gv, &x0s, &xss, &epss, &[s], sch, Parameterization::PredictEps);
            let ab = sch.alpha_bar_at(s);
            let ratio = g.value(le).item() / g.value(lx).item();
            assert!((ratio - ab / (1.0 - ab)).abs() < 1e-9 * ratio.max(1.0));
        }
    }

    #[test]
    fn untrained_loss_finite_positive() {
        let mut cfg = tiny_config();
        cfg.wavelet.reg_weight = 0.0;
        let m = Denoiser::new(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::randn(&[4, 8, 2], 1.0, &mut rng);
        let (rec, grads) = m.training_loss(&x0, &mut rng).unwrap();
        assert!(rec.total.is_finite() && rec.total > 0.0);
        assert_eq!(rec.total, rec.denoise);
        assert_eq!(grads.len(), m.store.len());
        assert!(m.training_loss(&Tensor::zeros(&[0, 8, 2]), &mut rng).is_err());
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        for p in [Parameterization::PredictX0, Parameterization::PredictEps] {
            let mut cfg = tiny_config();
            cfg.model.parameterization = p;
            let mut m = Denoiser::new(&cfg, 2).unwrap();
            randomize(&mut m, 5, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x0 = Tensor::randn(&[2, 8, 2], 1.0, &mut rng);
            let eps = Tensor::randn(&[2, 8, 2], 1.0, &mut rng);
            let steps = [3, 14];
            let (analytic, numeric) = crate::nn::gradient_check(&m.store, 1e-5, |ctx| {
                m.loss(ctx, &x0, &steps, &eps).unwrap().total
            });
            for (id, (a, n)) in m.store.ids().zip(analytic.iter().zip(&numeric)) {
                for (x, y) in a.data().iter().zip(n.data()) {
                    assert!(relative_error(*x, *y, 1e-6) < 1e-4, "{}: {x} vs {y}", m.store.name(id));
                }
            }
        }
    }

    #[test]
    fn ablations_remove_their_modules() {
        let mut cfg = tiny_config();
        let full = Denoiser::new(&cfg, 2).unwrap();
        assert!(full.store.find("lma.log_gamma").is_some());
        assert!(full.store.is_trainable(full.seasonal.filter.h));
        assert!(full.correction.enabled());

        cfg.lma.enabled = false;
        let m = Denoiser::new(&cfg, 2).unwrap();
        assert!(m.store.iter().all(|p| !p.name.starts_with("lma.")));
        assert_eq!(m.lma.bank.kernels(), &[3]);

        let mut cfg = tiny_config();
        cfg.wavelet.learnable = false;
        let m = Denoiser::new(&cfg, 2).unwrap();
        assert!(!m.store.is_trainable(m.seasonal.filter.h));

        let mut cfg = tiny_config();
        cfg.correction.enabled = false;
        let m = Denoiser::new(&cfg, 2).unwrap();
        assert!(m.store.iter().all(|p| !p.name.starts_with("correction.")));
        assert!(m.store.find("decoder.trend.weight").is_some());
    }

    #[test]
    fn positional_embedding_starts_inert() {
        let mut cfg = tiny_config();
        let plain = Denoiser::new(&cfg, 2).unwrap();
        assert!(plain.position.is_none());
        cfg.model.positional = true;
        let pos = Denoiser::new(&cfg, 2).unwrap();
        let id = pos.position.unwrap();
        assert_eq!(pos.store.get(id).shape(), &[1, 8, 4]);
        assert_eq!(pos.store.len(), plain.store.len() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 8, 2], 1.0, &mut rng);
        let a = plain.predict_x0(&x, &[2, 9]).unwrap();
        let b = pos.predict_x0(&x, &[2, 9]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut m = Denoiser::new(&tiny_config(), 2).unwrap();
        let before = m.store.clone();
        let data = Tensor::full(&[5, 8, 2], 0.5);
        let st = train(&mut m, &data, 0, 1).unwrap();
        assert_eq!(st.step, 0);
        assert!(st.history.is_empty());
        for (a, b) in before.iter().zip(m.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic_and_frozen_filter_stays_put() {
        let mut cfg = tiny_config();
        cfg.train.batch_size = 4;
        cfg.wavelet.learnable = false;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = Tensor::randn(&[10, 8, 2], 0.3, &mut rng);
        let run = || {
            let mut m = Denoiser::new(&cfg, 2).unwrap();
            let st = train(&mut m, &data, 3, 9).unwrap();
            (m, st)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(s1.history, s2.history);
        assert_eq!(s1.step, 9);
        assert_eq!(s1.epoch_means().len(), 3);
        for (a, b) in m1.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let h = m1.seasonal.filter.values(&m1.store);
        assert_eq!(h, crate::wavelet::db3().to_vec());
        assert_eq!(m1.sample(3, 4).unwrap(), m2.sample(3, 4).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = Denoiser::new(&tiny_config(), 2).unwrap();
        let id = m.store.find("encoder.trend.bias").unwrap();
        m.store.set(id, Tensor::full(&[4], f64::NAN));
        let data = Tensor::full(&[4, 8, 2], 0.5);
        assert!(matches!(train(&mut m, &data, 1, 0), Err(Error::Diverged { step: 1, .. })));
    }

    #[test]
    fn checkpoint_callback_sees_every_epoch() {
        let mut m = Denoiser::new(&tiny_config(), 2).unwrap();
        let data = Tensor::full(&[4, 8, 2], 0.5);
        let mut seen = Vec::new();
        train_with(&mut m, &data, 3, 0, |_, st| {
            seen.push(st.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
    }
}

//! Noise schedule, closed-form forward process and ancestral sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DiffusionConfig, ScheduleKind, SigmaMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step coefficients. Vectors are indexed by `s − 1` for steps `1..=S`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        build_schedule(cfg.steps, cfg.schedule, cfg.beta_start, cfg.beta_end, cfg.sigma_mode)
    }

    fn check_step(&self, s: usize) -> Result<usize> {
        if s == 0 || s > self.steps {
            return Err(Error::StepOutOfRange {
                step: s,
                steps: self.steps,
            });
        }
        Ok(s - 1)
    }

    pub fn beta_at(&self, s: usize) -> f64 {
        self.beta[s - 1]
    }

    pub fn alpha_at(&self, s: usize) -> f64 {
        self.alpha[s - 1]
    }

    pub fn alpha_bar_at(&self, s: usize) -> f64 {
        self.alpha_bar[s - 1]
    }

    pub fn sigma_at(&self, s: usize) -> f64 {
        self.sigma[s - 1]
    }
}

pub fn build_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("diffusion needs at least one step".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
                )));
            }
            if steps == 1 {
                vec![beta_start]
            } else {
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let offset = 0.008;
            let f = |t: f64| {
                let v = ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
                v * v
            };
            (1..=steps)
                .map(|s| (1.0 - f(s as f64) / f((s - 1) as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma = (0..steps)
        .map(|i| match sigma_mode {
            SigmaMode::Beta => beta[i].sqrt(),
            SigmaMode::Posterior => {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            }
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// A noisy batch at diffusion step `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    pub step: usize,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_s = √ᾱ_s x₀ + √(1 − ᾱ_s) ε`.
pub fn forward_diffuse(x0: &Tensor, s: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentState> {
    same_shape(x0, eps, "noise")?;
    let i = schedule.check_step(s)?;
    let (a, b) = (schedule.alpha_bar[i].sqrt(), (1.0 - schedule.alpha_bar[i]).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(LatentState {
        x: Tensor::new(x0.shape().to_vec(), data),
        step: s,
    })
}

/// Per-sample variant of [`forward_diffuse`] with one step per batch row.
pub fn forward_diffuse_batch(x0: &Tensor, steps: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "noise")?;
    if steps.len() != x0.dim(0) {
        return Err(Error::Shape(format!("{} steps for batch of {}", steps.len(), x0.dim(0))));
    }
    let row = x0.numel() / x0.dim(0).max(1);
    let mut data = Vec::with_capacity(x0.numel());
    for (r, &s) in steps.iter().enumerate() {
        let i = schedule.check_step(s)?;
        let (a, b) = (schedule.alpha_bar[i].sqrt(), (1.0 - schedule.alpha_bar[i]).sqrt());
        let xs = &x0.data()[r * row..(r + 1) * row];
        let es = &eps.data()[r * row..(r + 1) * row];
        data.extend(xs.iter().zip(es).map(|(x, e)| a * x + b * e));
    }
    Ok(Tensor::new(x0.shape().to_vec(), data))
}

/// `x_{s−1} = (x_s − β_s/√(1 − ᾱ_s) ε̂) / √α_s + σ_s z`. At `s = 1` the noise
/// term is absent and a non-zero `z` is rejected.
pub fn reverse_step(
    state: &LatentState,
    eps_hat: &Tensor,
    z: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let s = state.step;
    let i = schedule.check_step(s)?;
    same_shape(&state.x, eps_hat, "predicted noise")?;
    if let Some(z) = z {
        same_shape(&state.x, z, "sampling noise")?;
        if s == 1 && z.data().iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument("the final reverse step takes no noise".into()));
        }
    }
    let coef = schedule.beta[i] / (1.0 - schedule.alpha_bar[i]).sqrt();
    let inv = 1.0 / schedule.alpha[i].sqrt();
    let sigma = schedule.sigma[i];
    let mut data: Vec<f64> = state
        .x
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| inv * (x - coef * e))
        .collect();
    if let Some(z) = z {
        if s > 1 {
            for (d, zv) in data.iter_mut().zip(z.data()) {
                *d += sigma * zv;
            }
        }
    }
    Ok(LatentState {
        x: Tensor::new(state.x.shape().to_vec(), data),
        step: s - 1,
    })
}

/// Ancestral sampling from `x_S ~ N(0, I)` of the given `(n, L, K)` shape.
/// `denoiser(x_s, s)` returns the predicted noise.
pub fn sample<F>(schedule: &NoiseSchedule, shape: [usize; 3], seed: u64, mut denoiser: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if shape[0] == 0 {
        return Ok(Tensor::zeros(&shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LatentState {
        x: Tensor::randn(&shape, 1.0, &mut rng),
        step: schedule.steps,
    };
    for s in (1..=schedule.steps).rev() {
        let eps_hat = denoiser(&state.x, s)?;
        if eps_hat.shape() != state.x.shape() {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for input {:?}",
                eps_hat.shape(),
                state.x.shape()
            )));
        }
        let z = (s > 1).then(|| Tensor::randn(&shape, 1.0, &mut rng));
        state = reverse_step(&state, &eps_hat, z.as_ref(), schedule)?;
    }
    Ok(state.x)
}

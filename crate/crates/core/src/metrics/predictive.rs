//! Train-on-synthetic, test-on-real one-step-ahead prediction error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gru::Gru;
use super::{check_pair, random_batch, MetricEntry};
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx, Linear, ParamStore};
use crate::tensor::Tensor;

/// Split windows into predictor inputs (steps `0..L−1`) and targets
/// (last feature at steps `1..L`). A single-feature corpus predicts its own
/// next value.
fn inputs_and_targets(x: &Tensor) -> (Tensor, Tensor) {
    let (n, l, k) = (x.dim(0), x.dim(1), x.dim(2));
    let kin = if k >= 2 { k - 1 } else { 1 };
    let mut inp = Vec::with_capacity(n * (l - 1) * kin);
    let mut tgt = Vec::with_capacity(n * (l - 1));
    for i in 0..n {
        for t in 0..l - 1 {
            let base = (i * l + t) * k;
            inp.extend_from_slice(&x.data()[base..base + kin]);
            tgt.push(x.data()[(i * l + t + 1) * k + (k - 1)]);
        }
    }
    (Tensor::new(vec![n, l - 1, kin], inp), Tensor::new(vec![n, l - 1, 1], tgt))
}

/// One trial: fit a recurrent predictor on `synth`, return its mean absolute
/// error on `real`.
pub fn predictive_trial(real: &Tensor, synth: &Tensor, iterations: usize, batch: usize, seed: u64) -> Result<f64> {
    check_pair(real, synth)?;
    if real.dim(1) < 2 {
        return Err(Error::InvalidArgument("predictive score needs windows of length >= 2".into()));
    }
    if real.dim(0) == 0 || synth.dim(0) == 0 {
        return Err(Error::Empty("predictive corpus"));
    }
    let k = real.dim(2);
    if k < 2 {
        log::warn!("single-feature corpus: the predictor autoregresses that feature");
    }
    let kin = if k >= 2 { k - 1 } else { 1 };
    let hidden = kin;
    let (xs, ys) = inputs_and_targets(synth);
    let (xr, yr) = inputs_and_targets(real);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "pred.gru", kin, hidden, &mut rng);
    let head = Linear::new(&mut store, "pred.head", hidden, 1, true, &mut rng);
    let predict = |ctx: &mut Ctx, x: Tensor| {
        let xv = ctx.constant(x);
        let states = gru.run(ctx, xv);
        let h = ctx.g.stack_axis1(&states);
        let y = head.forward(ctx, h);
        ctx.g.sigmoid(y)
    };
    let mut opt = Adam::new(&store, 1e-3);
    for _ in 0..iterations {
        let rows = random_batch(xs.dim(0), batch, &mut rng);
        let grads = {
            let mut ctx = Ctx::new(&store);
            let y = predict(&mut ctx, xs.select_rows(&rows));
            let t = ctx.constant(ys.select_rows(&rows));
            let d = ctx.g.sub(y, t);
            let a = ctx.g.abs(d);
            let loss = ctx.g.mean_all(a);
            ctx.backward(loss)
        };
        opt.step(&mut store, &grads);
    }
    let mut ctx = Ctx::new(&store);
    let y = predict(&mut ctx, xr);
    let mae = ctx
        .value(y)
        .data()
        .iter()
        .zip(yr.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / yr.numel() as f64;
    Ok(mae)
}

pub fn predictive_score(real: &Tensor, synth: &Tensor, cfg: &EvalConfig, seed: u64) -> Result<MetricEntry> {
    let scores = (0..cfg.trials)
        .map(|t| predictive_trial(real, synth, cfg.iterations, cfg.batch_size, seed.wrapping_add(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricEntry::from_trials("predictive", scores))
}

//! Post-hoc real-versus-synthetic classification score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gru::Gru;
use super::{check_pair, random_batch, MetricEntry};
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx, Linear, ParamStore};
use crate::tensor::Tensor;

/// Minimum windows in each corpus.
pub const MIN_WINDOWS: usize = 32;

/// One trial: label real 1 and synthetic 0, shuffle, split 80/20, train a
/// recurrent classifier on the first part and return `|accuracy − 0.5|` on
/// the held-out part.
pub fn discriminative_trial(real: &Tensor, synth: &Tensor, iterations: usize, batch: usize, seed: u64) -> Result<f64> {
    check_pair(real, synth)?;
    for t in [real, synth] {
        if t.dim(0) < MIN_WINDOWS {
            return Err(Error::TooFewWindows {
                need: MIN_WINDOWS,
                got: t.dim(0),
            });
        }
    }
    let (nr, k) = (real.dim(0), real.dim(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<(bool, usize)> = (0..nr).map(|i| (true, i)).chain((0..synth.dim(0)).map(|i| (false, i))).collect();
    items.shuffle(&mut rng);
    let n_train = items.len() * 4 / 5;
    let (train, test) = items.split_at(n_train);

    let gather = |set: &[(bool, usize)]| -> (Tensor, Tensor) {
        let row = real.numel() / nr;
        let mut data = Vec::with_capacity(set.len() * row);
        let mut labels = Vec::with_capacity(set.len());
        for &(is_real, i) in set {
            let src = if is_real { real } else { synth };
            data.extend_from_slice(&src.data()[i * row..(i + 1) * row]);
            labels.push(if is_real { 1.0 } else { 0.0 });
        }
        let mut shape = real.shape().to_vec();
        shape[0] = set.len();
        (Tensor::new(shape, data), Tensor::new(vec![set.len(), 1], labels))
    };
    let (xtr, ytr) = gather(train);
    let (xte, yte) = gather(test);

    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "disc.gru", k, k, &mut rng);
    let head = Linear::new(&mut store, "disc.head", k, 1, true, &mut rng);
    let mut opt = Adam::new(&store, 1e-3);
    for _ in 0..iterations {
        let rows = random_batch(xtr.dim(0), batch, &mut rng);
        let (xb, yb) = (xtr.select_rows(&rows), ytr.select_rows(&rows));
        let grads = {
            let mut ctx = Ctx::new(&store);
            let xv = ctx.constant(xb);
            let h = gru.last(&mut ctx, xv);
            let logit = head.forward(&mut ctx, h);
            let loss = ctx.g.bce_logits(logit, yb);
            ctx.backward(loss)
        };
        opt.step(&mut store, &grads);
    }
    let mut ctx = Ctx::new(&store);
    let xv = ctx.constant(xte);
    let h = gru.last(&mut ctx, xv);
    let logit = head.forward(&mut ctx, h);
    let correct = ctx
        .value(logit)
        .data()
        .iter()
        .zip(yte.data())
        .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
        .count();
    let acc = correct as f64 / test.len() as f64;
    Ok((acc - 0.5).abs())
}

pub fn discriminative_score(real: &Tensor, synth: &Tensor, cfg: &EvalConfig, seed: u64) -> Result<MetricEntry> {
    let scores = (0..cfg.trials)
        .map(|t| discriminative_trial(real, synth, cfg.iterations, cfg.batch_size, seed.wrapping_add(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricEntry::from_trials("discriminative", scores))
}

//! Fréchet distance between Gaussian fits of window embeddings, with a small
//! contrastively trained recurrent encoder providing the embeddings.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gru::Gru;
use super::{check_pair, random_batch, MetricEntry};
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx, ParamStore};
use crate::tensor::Tensor;

/// Minimum real windows to train an encoder on.
pub const MIN_ENCODER_WINDOWS: usize = 64;
/// Share of the window kept by each crop.
const CROP_FRACTION: f64 = 0.75;
const TEMPERATURE: f64 = 0.2;
const EMBED_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub store: ParamStore,
    pub gru: Gru,
    pub channels: usize,
    pub width: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredEncoder {
    channels: usize,
    width: usize,
    params: Vec<StoredParam>,
}

impl ContextEncoder {
    /// Random-weight encoder.
    pub fn new(channels: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "encoder.gru", channels, width, &mut rng);
        Self {
            store,
            gru,
            channels,
            width,
        }
    }

    /// Final recurrent state of each window, `(n, width)`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.dim(2) != self.channels {
            return Err(Error::Shape(format!(
                "encoder expects (n, L, {}), got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let n = x.dim(0);
        let mut out = Vec::with_capacity(n * self.width);
        for start in (0..n).step_by(EMBED_CHUNK) {
            let rows: Vec<usize> = (start..(start + EMBED_CHUNK).min(n)).collect();
            let mut ctx = Ctx::new(&self.store);
            let xv = ctx.constant(x.select_rows(&rows));
            let h = self.gru.last(&mut ctx, xv);
            out.extend_from_slice(ctx.value(h).data());
        }
        Ok(Tensor::new(vec![n, self.width], out))
    }

    /// Contrastive training: two overlapping crops of a window form a
    /// positive pair, crops of the other windows in the batch are negatives.
    pub fn train(real: &Tensor, width: usize, iterations: usize, batch: usize, seed: u64) -> Result<Self> {
        if real.rank() != 3 {
            return Err(Error::Shape(format!("expected (n, L, K), got {:?}", real.shape())));
        }
        if real.dim(0) < MIN_ENCODER_WINDOWS {
            return Err(Error::TooFewWindows {
                need: MIN_ENCODER_WINDOWS,
                got: real.dim(0),
            });
        }
        let (n, l, k) = (real.dim(0), real.dim(1), real.dim(2));
        let mut enc = Self::new(k, width, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let crop = ((l as f64 * CROP_FRACTION).ceil() as usize).clamp(1, l);
        let mut opt = Adam::new(&enc.store, 1e-3);
        let batch = batch.min(n).max(2);
        for _ in 0..iterations {
            let rows = random_batch(n, batch, &mut rng);
            let views: Vec<Tensor> = (0..2)
                .map(|_| {
                    let mut data = Vec::with_capacity(rows.len() * crop * k);
                    for &r in &rows {
                        let s = rng.gen_range(0..=l - crop);
                        let base = (r * l + s) * k;
                        data.extend_from_slice(&real.data()[base..base + crop * k]);
                    }
                    Tensor::new(vec![rows.len(), crop, k], data)
                })
                .collect();
            let grads = {
                let mut ctx = Ctx::new(&enc.store);
                let mut z = Vec::new();
                for v in &views {
                    let xv = ctx.constant(v.clone());
                    let h = enc.gru.last(&mut ctx, xv);
                    let sq = ctx.g.square(h);
                    let norm = ctx.g.sum_axis(sq, 1);
                    let norm = ctx.g.add_scalar(norm, 1e-8);
                    let norm = ctx.g.sqrt(norm);
                    z.push(ctx.g.div(h, norm));
                }
                let zt = ctx.g.transpose_last(z[1]);
                let logits = ctx.g.matmul(z[0], zt);
                let logits = ctx.g.scale(logits, 1.0 / TEMPERATURE);
                let logp = ctx.g.log_softmax_last(logits);
                let loss = ctx.g.nll_rows(logp, (0..rows.len()).collect());
                ctx.backward(loss)
            };
            opt.step(&mut enc.store, &grads);
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredEncoder {
            channels: self.channels,
            width: self.width,
            params: self
                .store
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&stored)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let stored: StoredEncoder = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut enc = Self::new(stored.channels, stored.width, 0);
        if stored.params.len() != enc.store.len() {
            return Err(Error::Checkpoint(format!("encoder file {} has wrong parameter count", path.display())));
        }
        for (id, p) in enc.store.ids().collect::<Vec<_>>().into_iter().zip(stored.params) {
            if enc.store.name(id) != p.name || enc.store.get(id).shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!("encoder parameter `{}` does not match", p.name)));
            }
            enc.store.set(id, Tensor::new(p.shape, p.values));
        }
        Ok(enc)
    }
}

/// Sample mean and unbiased covariance of the rows of `(n, w)` embeddings.
pub fn gaussian_stats(emb: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, w) = (emb.dim(0), emb.dim(1));
    if n < 2 {
        return Err(Error::TooFewWindows { need: 2, got: n });
    }
    let m = DMatrix::from_row_slice(n, w, emb.data());
    let mu = DVector::from_iterator(w, m.column_iter().map(|c| c.mean()));
    let mut centred = m.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mu, cov))
}

/// Square root of a symmetric positive semi-definite matrix, with negative
/// eigenvalues from round-off clamped to zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^{½} Σ₂ Σ₁^{½})^{½})`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Shape(format!(
            "embedding widths {} and {} differ",
            mu1.len(),
            mu2.len()
        )));
    }
    let r = sym_sqrt(s1);
    let m = &r * s2 * &r;
    let cross = sym_sqrt(&m).trace();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between the embedding distributions of two corpora.
pub fn fid_between(encoder: &ContextEncoder, real: &Tensor, synth: &Tensor) -> Result<f64> {
    check_pair(real, synth)?;
    let (mr, sr) = gaussian_stats(&encoder.embed(real)?)?;
    let (ms, ss) = gaussian_stats(&encoder.embed(synth)?)?;
    frechet_distance(&mr, &sr, &ms, &ss)
}

/// Context-FID over `trials` random subsets, each holding 80% of the smaller
/// corpus size drawn from both sides.
pub fn context_fid(real: &Tensor, synth: &Tensor, encoder: &ContextEncoder, trials: usize, seed: u64) -> Result<MetricEntry> {
    check_pair(real, synth)?;
    let size = (real.dim(0).min(synth.dim(0)) * 4 / 5).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..trials)
        .map(|_| {
            let r = sample(&mut rng, real.dim(0), size.min(real.dim(0))).into_vec();
            let s = sample(&mut rng, synth.dim(0), size.min(synth.dim(0))).into_vec();
            fid_between(encoder, &real.select_rows(&r), &synth.select_rows(&s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricEntry::from_trials("context_fid", scores))
}

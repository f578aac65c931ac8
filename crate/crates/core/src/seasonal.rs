//! Seasonal block: learnable wavelet analysis, per-level self-attention over
//! the coefficients, and synthesis with the same low-pass filter.

use rand::Rng;

use crate::config::{AttentionConfig, Levels, WaveletConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{AttentionHead, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::{self, DB3_LEN};

/// The single low-pass filter `h_θ` shared by analysis and synthesis. The
/// high-pass partner is rebuilt from it on every pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveletFilter {
    pub h: ParamId,
}

impl WaveletFilter {
    pub fn new(store: &mut ParamStore, learnable: bool) -> Self {
        let init = Tensor::new(vec![DB3_LEN], wavelet::db3().to_vec());
        let h = if learnable {
            store.add("wavelet.h", init)
        } else {
            store.add_frozen("wavelet.h", init)
        };
        Self { h }
    }

    pub fn values(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.h).data().to_vec()
    }

    pub fn regularizer(&self, ctx: &mut Ctx) -> Var {
        let h = ctx.param(self.h);
        ctx.g.wavelet_reg(h)
    }
}

/// Resolve the configured level count for window length `len`.
pub fn resolve_levels(levels: &Levels, len: usize) -> Result<usize> {
    match levels {
        Levels::Fixed(j) => {
            wavelet::check_levels(len, *j)?;
            Ok(*j)
        }
        Levels::Auto(_) => Ok(wavelet::auto_levels(len, DB3_LEN)),
    }
}

/// Attention parameters of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelAttention {
    pub cond: Linear,
    pub heads: Vec<AttentionHead>,
}

#[derive(Clone, Debug)]
pub struct FrequencyAttention {
    /// `levels[i]` for `i < J` attends over `d_{i+1}`; the last entry over `a_J`.
    pub levels: Vec<LevelAttention>,
    pub width: usize,
    pub residual: bool,
}

impl FrequencyAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &AttentionConfig,
        width: usize,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = cfg.heads.max(1);
        let dk = cfg.dk.unwrap_or(width);
        if width % heads != 0 || dk % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {heads} must divide width {width} and key width {dk}"
            )));
        }
        let levels = (0..=levels)
            .map(|i| LevelAttention {
                cond: Linear::new(store, &format!("seasonal.{i}.cond"), width, width, true, rng),
                heads: (0..heads)
                    .map(|h| {
                        AttentionHead::new(
                            store,
                            &format!("seasonal.{i}.head{h}"),
                            width,
                            dk / heads,
                            width / heads,
                            rng,
                        )
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            levels,
            width,
            residual: cfg.residual,
        })
    }

    /// Self-attention over one level's `(B, n, d)` coefficients, with the
    /// step embedding `(B, d)` added to every token first.
    pub fn forward_level(&self, ctx: &mut Ctx, level: usize, coeffs: Var, emb: Var) -> Result<Var> {
        let la = self
            .levels
            .get(level)
            .ok_or_else(|| Error::InvalidArgument(format!("level {level} of {}", self.levels.len())))?;
        let shape = ctx.g.shape(coeffs).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::Shape(format!("coefficients {shape:?}, width {}", self.width)));
        }
        let c = la.cond.forward(ctx, emb);
        let c = ctx.g.reshape(c, &[shape[0], 1, self.width]);
        let x = ctx.g.add(coeffs, c);
        let outs: Vec<Var> = la.heads.iter().map(|h| h.forward(ctx, x, x).0).collect();
        let out = if outs.len() == 1 { outs[0] } else { ctx.g.concat_last(&outs) };
        Ok(if self.residual { ctx.g.add(coeffs, out) } else { out })
    }
}

#[derive(Clone, Debug)]
pub struct SeasonalBlock {
    pub filter: WaveletFilter,
    pub attention: FrequencyAttention,
    pub levels: usize,
}

impl SeasonalBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        wcfg: &WaveletConfig,
        acfg: &AttentionConfig,
        width: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = resolve_levels(&wcfg.levels, window)?;
        let filter = WaveletFilter::new(store, wcfg.learnable);
        let attention = FrequencyAttention::new(store, acfg, width, levels, rng)?;
        Ok(Self {
            filter,
            attention,
            levels,
        })
    }

    /// Multi-level analysis of `(B, L, d)` along time: returns
    /// `[d_1, …, d_J, a_J]`.
    pub fn analyse(&self, ctx: &mut Ctx, x: Var) -> Vec<Var> {
        let h = ctx.param(self.filter.h);
        let g = ctx.g.qmf(h);
        let mut a = x;
        let mut out = Vec::with_capacity(self.levels + 1);
        for _ in 0..self.levels {
            out.push(ctx.g.wave_analysis(a, g));
            a = ctx.g.wave_analysis(a, h);
        }
        out.push(a);
        out
    }

    /// Inverse of [`SeasonalBlock::analyse`] with the same filter.
    pub fn synthesise(&self, ctx: &mut Ctx, coeffs: &[Var]) -> Var {
        let h = ctx.param(self.filter.h);
        let g = ctx.g.qmf(h);
        let mut a = coeffs[self.levels];
        for j in (0..self.levels).rev() {
            let lo = ctx.g.wave_synthesis(a, h);
            let hi = ctx.g.wave_synthesis(coeffs[j], g);
            a = ctx.g.add(lo, hi);
        }
        a
    }

    /// `x`: `(B, L, d)` encoded seasonal part; `emb`: `(B, d)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, emb: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.attention.width {
            return Err(Error::Shape(format!("seasonal block width {} got {shape:?}", self.attention.width)));
        }
        wavelet::check_levels(shape[1], self.levels)?;
        let coeffs = self.analyse(ctx, x);
        let refined = coeffs
            .iter()
            .enumerate()
            .map(|(i, &c)| self.attention.forward_level(ctx, i, c, emb))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.synthesise(ctx, &refined))
    }
}

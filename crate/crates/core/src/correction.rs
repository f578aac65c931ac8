//! Seasonal-trend correction: each refined component is projected and split
//! into an input stream and a conditional stream, then each input stream
//! cross-attends over the other component's conditional stream. Also holds
//! the decoders back to data channels.

use rand::Rng;

use crate::config::CorrectionConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{AttentionHead, Ctx, Linear, ParamStore};

/// Linear `d → 2d` whose output is split into `(input, conditional)` halves.
#[derive(Clone, Copy, Debug)]
pub struct ChunkProjection {
    pub proj: Linear,
}

impl ChunkProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, name, width, 2 * width, true, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.proj.d_in
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let d = self.width();
        let shape = ctx.g.shape(x);
        if shape.last() != Some(&d) {
            return Err(Error::Shape(format!("chunk projection width {d} got {shape:?}")));
        }
        let y = self.proj.forward(ctx, x);
        Ok((ctx.g.slice_last(y, 0, d), ctx.g.slice_last(y, d, d)))
    }
}

/// Independent query/key/value sets for the two directions.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    /// Trend queries over seasonal keys and values.
    pub trend: AttentionHead,
    /// Seasonal queries over trend keys and values.
    pub seasonal: AttentionHead,
}

/// Projections and attention of an enabled correction stage.
#[derive(Clone, Copy, Debug)]
pub struct CrossParts {
    pub trend_proj: ChunkProjection,
    pub seasonal_proj: ChunkProjection,
    pub attention: CrossAttention,
}

#[derive(Clone, Debug)]
pub struct Correction {
    /// Absent when the stage is disabled.
    pub parts: Option<CrossParts>,
    pub trend_decoder: Linear,
    pub seasonal_decoder: Linear,
    pub residual: bool,
    pub width: usize,
}

/// Corrected components plus the attention maps of both directions.
#[derive(Clone, Copy, Debug)]
pub struct CorrectionVars {
    pub trend: Var,
    pub seasonal: Var,
    pub trend_weights: Var,
    pub seasonal_weights: Var,
}

impl Correction {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &CorrectionConfig,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let dk = cfg.dk.unwrap_or(width);
        let parts = cfg.enabled.then(|| CrossParts {
            trend_proj: ChunkProjection::new(store, "correction.trend_proj", width, rng),
            seasonal_proj: ChunkProjection::new(store, "correction.seasonal_proj", width, rng),
            attention: CrossAttention {
                trend: AttentionHead::new(store, "correction.trend_attn", width, dk, width, rng),
                seasonal: AttentionHead::new(store, "correction.seasonal_attn", width, dk, width, rng),
            },
        });
        Self {
            parts,
            trend_decoder: Linear::new(store, "decoder.trend", width, channels, true, rng),
            seasonal_decoder: Linear::new(store, "decoder.seasonal", width, channels, true, rng),
            residual: cfg.residual,
            width,
        }
    }

    pub fn enabled(&self) -> bool {
        self.parts.is_some()
    }

    /// Cross-correct `(B, L, d)` trend and seasonal predictions.
    pub fn cross_correct(&self, ctx: &mut Ctx, trend: Var, seasonal: Var) -> Result<CorrectionVars> {
        let (ts, ss) = (ctx.g.shape(trend).to_vec(), ctx.g.shape(seasonal).to_vec());
        if ts != ss || ts.len() != 3 || ts[2] != self.width {
            return Err(Error::Shape(format!("trend {ts:?} vs seasonal {ss:?}, width {}", self.width)));
        }
        let p = self
            .parts
            .ok_or_else(|| Error::InvalidArgument("correction is disabled".into()))?;
        let (t_in, t_cnd) = p.trend_proj.forward(ctx, trend)?;
        let (s_in, s_cnd) = p.seasonal_proj.forward(ctx, seasonal)?;
        let (mut t_cr, tw) = p.attention.trend.forward(ctx, t_in, s_cnd);
        let (mut s_cr, sw) = p.attention.seasonal.forward(ctx, s_in, t_cnd);
        if self.residual {
            t_cr = ctx.g.add(trend, t_cr);
            s_cr = ctx.g.add(seasonal, s_cr);
        }
        Ok(CorrectionVars {
            trend: t_cr,
            seasonal: s_cr,
            trend_weights: tw,
            seasonal_weights: sw,
        })
    }

    /// Correct (when enabled) and decode both components to `K` channels.
    pub fn forward(&self, ctx: &mut Ctx, trend: Var, seasonal: Var) -> Result<(Var, Var)> {
        let (t, s) = if self.enabled() {
            let c = self.cross_correct(ctx, trend, seasonal)?;
            (c.trend, c.seasonal)
        } else {
            (trend, seasonal)
        };
        Ok((self.trend_decoder.forward(ctx, t), self.seasonal_decoder.forward(ctx, s)))
    }
}

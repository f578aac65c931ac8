//! Synthetic corpora of sinusoids with linear trends and noise.

use std::f64::consts::TAU;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{RawSeries, Scaling, SeriesBatch};
use crate::error::{Error, Result};

/// Standard deviation of the additive noise, in units of the sinusoid amplitude.
pub const NOISE_STD: f64 = 0.05;

/// `n` independent windows of shape `(window, channels)`, min-max scaled to
/// `[0, 1]` per feature. In each window every feature is a sinusoid sharing
/// one frequency (1 to 2.5 cycles per window) with its own phase and
/// amplitude, plus a linear trend of random slope and Gaussian noise.
pub fn synthetic_windows(n: usize, window: usize, channels: usize, seed: u64) -> Result<SeriesBatch> {
    if window == 0 || channels == 0 {
        return Err(Error::InvalidArgument("window and channels must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let mut raw = Array3::zeros((n, window, channels));
    for w in 0..n {
        let cycles = rng.gen_range(1.0..2.5);
        let params: Vec<(f64, f64, f64, f64)> = (0..channels)
            .map(|j| {
                let amp = rng.gen_range(0.5..1.0);
                let phase = rng.gen_range(0.0..TAU);
                let slope = rng.gen_range(-1.0..1.0);
                (amp, phase, slope, 0.5 * j as f64)
            })
            .collect();
        for t in 0..window {
            let u = t as f64 / window as f64;
            for (j, &(amp, phase, slope, offset)) in params.iter().enumerate() {
                raw[[w, t, j]] = offset + amp * (TAU * cycles * u + phase).sin() + slope * u + noise.sample(&mut rng);
            }
        }
    }
    let names = feature_names(channels);
    let flat = Array2::from_shape_vec((n * window, channels), raw.iter().copied().collect()).expect("shape");
    let scaling = Scaling::fit(&flat, &names);
    Ok(SeriesBatch {
        windows: scaling.scale(&raw),
        scaling: Some(scaling),
        source_id: format!("synthetic:{n}x{window}x{channels}:seed{seed}"),
    })
}

/// One long multivariate series with a slow drift, two seasonal periods and
/// noise, suitable for writing to CSV and windowing.
pub fn synthetic_series(len: usize, channels: usize, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let params: Vec<(f64, f64, f64, f64)> = (0..channels)
        .map(|_| {
            (
                rng.gen_range(12.0..30.0),
                rng.gen_range(0.0..TAU),
                rng.gen_range(-0.002..0.002),
                rng.gen_range(0.2..0.6),
            )
        })
        .collect();
    let mut values = Array2::zeros((len, channels));
    for t in 0..len {
        let tf = t as f64;
        for (j, &(period, phase, drift, second)) in params.iter().enumerate() {
            values[[t, j]] = (TAU * tf / period + phase).sin()
                + second * (TAU * tf / (period / 3.0) + phase).sin()
                + drift * tf
                + noise.sample(&mut rng);
        }
    }
    RawSeries::new(values, feature_names(channels))
}

pub fn feature_names(channels: usize) -> Vec<String> {
    (0..channels).map(|j| format!("f{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_scaled_and_seeded() {
        let a = synthetic_windows(50, 24, 3, 1).unwrap();
        assert_eq!(a.windows.dim(), (50, 24, 3));
        for j in 0..3 {
            let lane = a.windows.index_axis(ndarray::Axis(2), j);
            let lo = lane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, synthetic_windows(50, 24, 3, 1).unwrap());
        assert_ne!(a.windows, synthetic_windows(50, 24, 3, 2).unwrap().windows);
        assert!(synthetic_windows(5, 0, 3, 0).is_err());
    }

    #[test]
    fn residual_after_removing_sinusoid_and_trend_is_noise() {
        // A single window regressed on its known design recovers noise of the
        // configured level.
        let l = 200;
        let b = synthetic_windows(1, l, 1, 5).unwrap();
        let s = b.scaling.as_ref().unwrap();
        let raw: Vec<f64> = (0..l).map(|t| b.windows[[0, t, 0]] * (s.max[0] - s.min[0]) + s.min[0]).collect();
        let diffs: Vec<f64> = raw.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
        // Second differences remove the trend and shrink the smooth part to
        // O(1/L²); the rest has variance 6σ².
        let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let sigma = (var / 6.0).sqrt();
        assert!((sigma - NOISE_STD).abs() < 0.015, "{sigma}");
    }

    #[test]
    fn series_has_requested_shape() {
        let s = synthetic_series(300, 2, 0);
        assert_eq!(s.values.dim(), (300, 2));
        assert_eq!(s.feature_names, vec!["f0", "f1"]);
    }
}

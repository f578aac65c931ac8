//! Cross-feature correlation discrepancy.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_pair, MetricEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pearson correlation matrix of each window, averaged over windows.
/// Features with zero variance inside a window contribute 0 to every entry
/// of their row and column. Returns the `K × K` matrix (row-major) and the
/// number of windows in which such a feature occurred.
pub fn mean_correlation(x: &Tensor) -> Result<(Vec<f64>, usize)> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("expected (n, L, K), got {:?}", x.shape())));
    }
    let (n, l, k) = (x.dim(0), x.dim(1), x.dim(2));
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    let mut acc = vec![0.0; k * k];
    let mut degenerate = 0;
    let d = x.data();
    for w in 0..n {
        let at = |t: usize, j: usize| d[(w * l + t) * k + j];
        let mean: Vec<f64> = (0..k).map(|j| (0..l).map(|t| at(t, j)).sum::<f64>() / l as f64).collect();
        let sd: Vec<f64> = (0..k)
            .map(|j| (0..l).map(|t| (at(t, j) - mean[j]).powi(2)).sum::<f64>().sqrt())
            .collect();
        if sd.iter().any(|&s| s <= 1e-12) {
            degenerate += 1;
        }
        for a in 0..k {
            for b in 0..k {
                if sd[a] <= 1e-12 || sd[b] <= 1e-12 {
                    continue;
                }
                let cov: f64 = (0..l).map(|t| (at(t, a) - mean[a]) * (at(t, b) - mean[b])).sum();
                acc[a * k + b] += cov / (sd[a] * sd[b]);
            }
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    Ok((acc, degenerate))
}

/// Mean absolute difference between the averaged correlation matrices.
pub fn correlation_score(real: &Tensor, synth: &Tensor) -> Result<f64> {
    check_pair(real, synth)?;
    let (a, da) = mean_correlation(real)?;
    let (b, db) = mean_correlation(synth)?;
    if da + db > 0 {
        log::warn!("{} windows had a zero-variance feature; their correlations were set to 0", da + db);
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Correlation score over `trials` random 80% subsets.
pub fn correlation_entry(real: &Tensor, synth: &Tensor, trials: usize, seed: u64) -> Result<MetricEntry> {
    check_pair(real, synth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |x: &Tensor, rng: &mut ChaCha8Rng| {
        let n = x.dim(0);
        x.select_rows(&sample(rng, n, (n * 4 / 5).max(1)).into_vec())
    };
    let scores = (0..trials)
        .map(|_| {
            let r = pick(real, &mut rng);
            let s = pick(synth, &mut rng);
            correlation_score(&r, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricEntry::from_trials("correlation", scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pair_corpus(n: usize, l: usize, coupled: bool, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::with_capacity(n * l * 2);
        for _ in 0..n {
            for _ in 0..l {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b = if coupled { 2.0 * a + 1.0 } else { rng.gen_range(-1.0..1.0) };
                v.extend([a, b]);
            }
        }
        Tensor::new(vec![n, l, 2], v)
    }

    #[test]
    fn identical_corpora_score_zero() {
        let x = pair_corpus(20, 16, false, 0);
        assert_eq!(correlation_score(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn coupled_versus_independent_pair() {
        let a = pair_corpus(400, 200, true, 1);
        let b = pair_corpus(400, 200, false, 2);
        let s = correlation_score(&a, &b).unwrap();
        assert!((s - 0.5).abs() < 0.01, "{s}");
    }

    #[test]
    fn zero_variance_feature_contributes_zero() {
        let mut x = pair_corpus(3, 8, false, 3);
        for w in 0..3 {
            for t in 0..8 {
                x.data_mut()[(w * 8 + t) * 2 + 1] = 4.0;
            }
        }
        let (m, bad) = mean_correlation(&x).unwrap();
        assert_eq!(bad, 3);
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert_eq!(&m[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let a = pair_corpus(4, 8, false, 0);
        let b = pair_corpus(4, 6, false, 0);
        assert!(correlation_score(&a, &b).is_err());
        assert!(mean_correlation(&Tensor::zeros(&[0, 4, 2])).is_err());
    }

    proptest! {
        #[test]
        fn score_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = pair_corpus(5, 10, s1 % 2 == 0, s1);
            let b = pair_corpus(5, 10, s2 % 2 == 0, s2);
            let ab = correlation_score(&a, &b).unwrap();
            let ba = correlation_score(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&ab));
        }
    }
}

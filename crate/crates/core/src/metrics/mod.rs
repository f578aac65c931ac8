//! Post-hoc metrics comparing real and synthetic window corpora.

pub mod context_fid;
pub mod correlation;
pub mod discriminative;
pub mod gru;
pub mod predictive;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use context_fid::ContextEncoder;

/// Mean over trials with a 95% normal-approximation half width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub mean: f64,
    pub ci95: f64,
    pub trials: usize,
    pub scores: Vec<f64>,
}

impl MetricEntry {
    pub fn from_trials(name: &str, scores: Vec<f64>) -> Self {
        let n = scores.len();
        if n == 0 {
            log::warn!("metric `{name}` has no trials");
            return Self {
                mean: f64::NAN,
                ci95: 0.0,
                trials: 0,
                scores,
            };
        }
        let mean = scores.iter().sum::<f64>() / n as f64;
        let ci95 = if n == 1 {
            log::warn!("metric `{name}` has a single trial; reporting a zero interval");
            0.0
        } else {
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Self {
            mean,
            ci95,
            trials: n,
            scores,
        }
    }
}

/// Both corpora must be `(n, L, K)` with matching `L` and `K`.
pub fn check_pair(real: &Tensor, synth: &Tensor) -> Result<()> {
    if real.rank() != 3 || synth.rank() != 3 || real.shape()[1..] != synth.shape()[1..] {
        return Err(Error::Shape(format!(
            "real {:?} and synthetic {:?} windows differ",
            real.shape(),
            synth.shape()
        )));
    }
    Ok(())
}

/// `batch` row indices drawn uniformly with replacement from `0..n`.
pub fn random_batch<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metrics: BTreeMap<String, MetricEntry>,
    pub config: serde_json::Value,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one metric per row.
    pub fn to_table(&self) -> String {
        let w = self.metrics.keys().map(|k| k.len()).max().unwrap_or(0).max("metric".len());
        let mut out = format!("{:<w$}  {:>12}  {:>12}  {:>6}\n", "metric", "mean", "ci95", "trials");
        for (name, e) in &self.metrics {
            out.push_str(&format!("{:<w$}  {:>12.6}  {:>12.6}  {:>6}\n", name, e.mean, e.ci95, e.trials));
        }
        out
    }
}

/// Loads the cached context encoder when present and compatible, otherwise
/// trains one on `real` and writes it to the cache path if set.
pub fn obtain_encoder(real: &Tensor, cfg: &EvalConfig, seed: u64) -> Result<ContextEncoder> {
    if let Some(path) = &cfg.encoder_cache {
        if path.exists() {
            let enc = ContextEncoder::load(path)?;
            if enc.channels == real.dim(2) && enc.width == cfg.encoder_width {
                return Ok(enc);
            }
            log::warn!("cached encoder {} does not fit this corpus; retraining", path.display());
        }
    }
    let enc = ContextEncoder::train(real, cfg.encoder_width, cfg.encoder_iterations, cfg.batch_size, seed)?;
    if let Some(path) = &cfg.encoder_cache {
        enc.save(path)?;
    }
    Ok(enc)
}

/// Every metric over `cfg.eval.trials` trials.
pub fn evaluate_all(real: &Tensor, synth: &Tensor, cfg: &RunConfig, seed: u64) -> Result<EvaluationReport> {
    check_pair(real, synth)?;
    let e = &cfg.eval;
    let encoder = obtain_encoder(real, e, seed)?;
    let mut metrics = BTreeMap::new();
    metrics.insert(
        "context_fid".into(),
        context_fid::context_fid(real, synth, &encoder, e.trials, seed)?,
    );
    metrics.insert(
        "correlation".into(),
        correlation::correlation_entry(real, synth, e.trials, seed)?,
    );
    metrics.insert(
        "discriminative".into(),
        discriminative::discriminative_score(real, synth, e, seed)?,
    );
    metrics.insert("predictive".into(), predictive::predictive_score(real, synth, e, seed)?);
    Ok(EvaluationReport {
        metrics,
        config: serde_json::to_value(cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_from_trials() {
        let e = MetricEntry::from_trials("m", vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((e.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
        let one = MetricEntry::from_trials("m", vec![0.3]);
        assert_eq!((one.mean, one.ci95, one.trials), (0.3, 0.0, 1));
    }

    #[test]
    fn pair_check() {
        assert!(check_pair(&Tensor::zeros(&[2, 4, 3]), &Tensor::zeros(&[5, 4, 3])).is_ok());
        assert!(check_pair(&Tensor::zeros(&[2, 4, 3]), &Tensor::zeros(&[2, 4, 2])).is_err());
        assert!(check_pair(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let mut metrics = BTreeMap::new();
        metrics.insert("a".to_string(), MetricEntry::from_trials("a", vec![1.0, 1.0]));
        metrics.insert("longer_name".to_string(), MetricEntry::from_trials("b", vec![0.5, 0.7]));
        let r = EvaluationReport {
            metrics,
            config: serde_json::Value::Null,
        };
        let t = r.to_table();
        let widths: Vec<usize> = t.lines().map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["metrics"]["longer_name"]["trials"], 2);
    }
}

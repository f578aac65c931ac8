//! Visual comparison of real and synthetic corpora: PCA and t-SNE
//! projections, pooled-value density curves, and SVG rendering.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use plotters::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows of `L·K` values, one per window.
pub fn flatten_windows(x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.dim(0);
    if n == 0 {
        return Vec::new();
    }
    x.data().chunks(x.numel() / n).map(<[f64]>::to_vec).collect()
}

/// At most `max` windows chosen without replacement, in their original order.
pub fn subsample(x: &Tensor, max: usize, seed: u64) -> Tensor {
    let n = x.dim(0);
    if n <= max {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, n, max).into_vec();
    rows.sort_unstable();
    x.select_rows(&rows)
}

/// Two leading principal axes from the covariance eigendecomposition.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub explained: [f64; 2],
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n < 2 || d < 2 {
            return Err(Error::TooFewPoints {
                points: n.min(d),
                components: 2,
            });
        }
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
        let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            // Fix the sign so the largest loading is positive.
            let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Ok(Self {
            mean,
            components: [axis(0), axis(1)],
            explained: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]],
        })
    }

    pub fn project(&self, rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
        rows.iter()
            .map(|r| {
                let dot = |c: &[f64]| r.iter().zip(&self.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum();
                [dot(&self.components[0]), dot(&self.components[1])]
            })
            .collect()
    }
}

/// Conditional probabilities `p_{j|i}` for one row of squared distances,
/// with the Gaussian precision searched so the entropy is `ln(perplexity)`.
fn conditional_row(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..100 {
        let mut sum = 0.0;
        for (j, (pj, &d)) in p.iter_mut().zip(d2).enumerate() {
            *pj = if j == i { 0.0 } else { (-beta * d).exp() };
            sum += *pj;
        }
        let sum = sum.max(1e-300);
        let mut h = 0.0;
        for (pj, &d) in p.iter_mut().zip(d2) {
            *pj /= sum;
            h += beta * d * *pj;
        }
        let h = h + sum.ln();
        if (h - target).abs() < 1e-5 {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE to two dimensions. The perplexity is capped at `(n − 1) / 3`.
pub fn tsne(rows: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::TooFewPoints { points: n, components: 2 });
    }
    if !(perplexity > 0.0) {
        return Err(Error::InvalidArgument(format!("perplexity {perplexity} must be positive")));
    }
    let perp = perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d2: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(&rows[i]).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        p[i * n..(i + 1) * n].copy_from_slice(&conditional_row(&d2, i, perp));
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            p[i * n + j] = s;
            p[j * n + i] = s;
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("finite std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let lr = (n as f64 / 12.0).max(50.0);
    let early = 250.min(iterations / 4);
    let mut num = vec![0.0; n * n];
    for it in 0..iterations {
        let exaggeration = if it < early { 12.0 } else { 1.0 };
        let momentum = if it < early { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                let q = 1.0 / (1.0 + d);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                grad[0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                gains[i][c] = if (grad[c] > 0.0) != (velocity[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                velocity[i][c] = momentum * velocity[i][c] - lr * gains[i][c] * grad[c];
            }
        }
        for (yi, vi) in y.iter_mut().zip(&velocity) {
            yi[0] += vi[0];
            yi[1] += vi[1];
        }
        let centre = y.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= centre[0] / n as f64;
            yi[1] -= centre[1] / n as f64;
        }
    }
    Ok(y)
}

/// Gaussian kernel density of `values` at each grid point.
pub fn kde(values: &[f64], grid: &[f64], bandwidth: f64) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / bandwidth).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Density curves of the pooled values of two corpora on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityCurves {
    pub grid: Vec<f64>,
    pub real: Vec<f64>,
    pub synth: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurves {
    /// Largest pointwise difference between the two unit-area curves.
    pub fn max_gap(&self) -> f64 {
        self.real.iter().zip(&self.synth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn unit_area(grid: &[f64], y: &mut [f64]) {
    let area: f64 = grid.windows(2).zip(y.windows(2)).map(|(g, v)| (g[1] - g[0]) * (v[0] + v[1]) / 2.0).sum();
    if area > 0.0 {
        y.iter_mut().for_each(|v| *v /= area);
    }
}

/// Both curves use one Silverman bandwidth computed from the pooled values of
/// both corpora and are rescaled to unit area over the grid.
pub fn density_curves(real: &Tensor, synth: &Tensor, points: usize) -> Result<DensityCurves> {
    if real.numel() == 0 || synth.numel() == 0 {
        return Err(Error::Empty("corpus"));
    }
    if points < 2 {
        return Err(Error::InvalidArgument("density needs at least 2 grid points".into()));
    }
    let all: Vec<f64> = real.data().iter().chain(synth.data()).copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let bandwidth = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let mut r = kde(real.data(), &grid, bandwidth);
    let mut s = kde(synth.data(), &grid, bandwidth);
    unit_area(&grid, &mut r);
    unit_area(&grid, &mut s);
    Ok(DensityCurves {
        grid,
        real: r,
        synth: s,
        bandwidth,
    })
}

/// Whitespace-aligned table of labelled 2-D points.
pub fn points_table(sets: &[(&str, &[[f64; 2]])]) -> String {
    let mut out = format!("{:<8} {:>14} {:>14}\n", "source", "x", "y");
    for (label, pts) in sets {
        for p in pts.iter() {
            out.push_str(&format!("{:<8} {:>14.6} {:>14.6}\n", label, p[0], p[1]));
        }
    }
    out
}

pub fn density_table(c: &DensityCurves) -> String {
    let mut out = format!("{:>12} {:>12} {:>12}\n", "value", "real", "synthetic");
    for ((g, r), s) in c.grid.iter().zip(&c.real).zip(&c.synth) {
        out.push_str(&format!("{g:>12.6} {r:>12.6} {s:>12.6}\n"));
    }
    out
}

fn render_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Render(e.to_string())
}

fn range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    lo - pad..hi + pad
}

/// Scatter plot of real (blue) and synthetic (red) points as SVG.
pub fn render_scatter(path: &Path, title: &str, real: &[[f64; 2]], synth: &[[f64; 2]]) -> Result<()> {
    let xr = range(real.iter().chain(synth).map(|p| p[0]));
    let yr = range(real.iter().chain(synth).map(|p| p[1]));
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(xr, yr)
        .map_err(render_err)?;
    chart.configure_mesh().draw().map_err(render_err)?;
    chart
        .draw_series(real.iter().map(|p| Circle::new((p[0], p[1]), 2, BLUE.mix(0.5).filled())))
        .map_err(render_err)?
        .label("real")
        .legend(|(x, y)| Circle::new((x, y), 3, BLUE.filled()));
    chart
        .draw_series(synth.iter().map(|p| Circle::new((p[0], p[1]), 2, RED.mix(0.5).filled())))
        .map_err(render_err)?
        .label("synthetic")
        .legend(|(x, y)| Circle::new((x, y), 3, RED.filled()));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)?;
    Ok(())
}

pub fn render_density(path: &Path, c: &DensityCurves) -> Result<()> {
    let xr = range(c.grid.iter().copied());
    let yr = range(c.real.iter().chain(&c.synth).copied().chain([0.0]));
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("density", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(xr, yr)
        .map_err(render_err)?;
    chart.configure_mesh().draw().map_err(render_err)?;
    for (label, ys, colour) in [("real", &c.real, BLUE), ("synthetic", &c.synth, RED)] {
        chart
            .draw_series(LineSeries::new(c.grid.iter().copied().zip(ys.iter().copied()), colour.stroke_width(2)))
            .map_err(render_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], colour));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)?;
    Ok(())
}

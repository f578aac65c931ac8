//! Periodic two-channel filter banks on plain slices.
//!
//! Analysis correlates with the filter and keeps every second sample,
//! `a[p] = Σ_n h[n − 2p] x[n]`; synthesis upsamples and convolves,
//! `x̂[p] = Σ_n h[p − 2n] a[n]`. Indices wrap periodically. With an orthonormal
//! low-pass `h` and its quadrature mirror `g`, the pair is perfectly
//! reconstructing and energy preserving.

use crate::error::{Error, Result};

pub const DB3_LEN: usize = 6;

/// Order-3 Daubechies scaling filter from its closed form.
pub fn db3() -> [f64; DB3_LEN] {
    let r10 = 10f64.sqrt();
    let q = (5.0 + 2.0 * r10).sqrt();
    let norm = 16.0 * std::f64::consts::SQRT_2;
    [
        (1.0 + r10 + q) / norm,
        (5.0 + r10 + 3.0 * q) / norm,
        (10.0 - 2.0 * r10 + 2.0 * q) / norm,
        (10.0 - 2.0 * r10 - 2.0 * q) / norm,
        (5.0 + r10 - 3.0 * q) / norm,
        (1.0 + r10 - q) / norm,
    ]
}

/// High-pass partner `g[n] = (−1)ⁿ h[len − 1 − n]`.
pub fn qmf_highpass(h: &[f64]) -> Result<Vec<f64>> {
    if h.len() % 2 != 0 {
        return Err(Error::OddLength {
            what: "filter",
            len: h.len(),
        });
    }
    let m = h.len();
    Ok((0..m)
        .map(|n| if n % 2 == 0 { h[m - 1 - n] } else { -h[m - 1 - n] })
        .collect())
}

/// Stride-2 periodic correlation. Panics on odd input length.
pub fn analysis(x: &[f64], f: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert!(n % 2 == 0, "analysis needs even length, got {n}");
    (0..n / 2)
        .map(|p| f.iter().enumerate().map(|(k, fk)| fk * x[(2 * p + k) % n]).sum())
        .collect()
}

/// Upsample-by-two periodic convolution; adjoint of [`analysis`].
pub fn synthesis(c: &[f64], f: &[f64]) -> Vec<f64> {
    let big = 2 * c.len();
    let mut out = vec![0.0; big];
    for (n, cn) in c.iter().enumerate() {
        for (k, fk) in f.iter().enumerate() {
            out[(2 * n + k) % big] += fk * cn;
        }
    }
    out
}

/// One analysis level: `(approximation, detail)`.
pub fn dwt_step(x: &[f64], h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() % 2 != 0 {
        return Err(Error::OddLength {
            what: "signal",
            len: x.len(),
        });
    }
    let g = qmf_highpass(h)?;
    Ok((analysis(x, h), analysis(x, &g)))
}

/// One synthesis level from approximation and detail of equal length.
pub fn idwt_step(approx: &[f64], detail: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if approx.len() != detail.len() {
        return Err(Error::Shape(format!(
            "approximation length {} vs detail length {}",
            approx.len(),
            detail.len()
        )));
    }
    let g = qmf_highpass(h)?;
    let mut out = synthesis(approx, h);
    for (o, d) in out.iter_mut().zip(synthesis(detail, &g)) {
        *o += d;
    }
    Ok(out)
}

/// Multilevel coefficients of a 1-D signal.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    /// `details[j]` is `d_{j+1}`, of length `L / 2^{j+1}`.
    pub details: Vec<Vec<f64>>,
    pub approx: Vec<f64>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn detail_lengths(&self) -> Vec<usize> {
        self.details.iter().map(Vec::len).collect()
    }
}

pub fn check_levels(len: usize, levels: usize) -> Result<()> {
    if levels >= usize::BITS as usize || len % (1usize << levels) != 0 {
        return Err(Error::Divisibility { len, levels });
    }
    Ok(())
}

pub fn dwt(x: &[f64], levels: usize, h: &[f64]) -> Result<WaveletPyramid> {
    check_levels(x.len(), levels)?;
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = dwt_step(&approx, h)?;
        details.push(d);
        approx = a;
    }
    Ok(WaveletPyramid { details, approx })
}

pub fn idwt(pyr: &WaveletPyramid, h: &[f64]) -> Result<Vec<f64>> {
    let mut approx = pyr.approx.clone();
    for d in pyr.details.iter().rev() {
        approx = idwt_step(&approx, d, h)?;
    }
    Ok(approx)
}

/// Largest level count with `len` divisible by `2^J` and `len / 2^J` at least
/// the filter length.
pub fn auto_levels(len: usize, filter_len: usize) -> usize {
    let mut j = 0;
    while len % (1 << (j + 1)) == 0 && len >> (j + 1) >= filter_len {
        j += 1;
    }
    j
}

fn shifted_dot(h: &[f64], shift: usize) -> f64 {
    h.iter().zip(h.iter().skip(shift)).map(|(a, b)| a * b).sum()
}

/// Soft orthonormality penalty:
/// `Σ_{k=1,2} (Σ h[n]h[n+2k])² + (Σ h² − 1)² + (Σ h − √2)²`.
pub fn regularizer(h: &[f64]) -> f64 {
    let shifts: f64 = [2, 4].iter().map(|&s| shifted_dot(h, s).powi(2)).sum();
    let energy = h.iter().map(|v| v * v).sum::<f64>() - 1.0;
    let sum = h.iter().sum::<f64>() - std::f64::consts::SQRT_2;
    shifts + energy * energy + sum * sum
}

pub fn regularizer_grad(h: &[f64]) -> Vec<f64> {
    let m = h.len();
    let energy = h.iter().map(|v| v * v).sum::<f64>() - 1.0;
    let sum = h.iter().sum::<f64>() - std::f64::consts::SQRT_2;
    let mut grad: Vec<f64> = h.iter().map(|&v| 4.0 * energy * v + 2.0 * sum).collect();
    for s in [2usize, 4] {
        let c = shifted_dot(h, s);
        for (i, gi) in grad.iter_mut().enumerate() {
            let fwd = if i + s < m { h[i + s] } else { 0.0 };
            let back = if i >= s { h[i - s] } else { 0.0 };
            *gi += 2.0 * c * (fwd + back);
        }
    }
    grad
}

/// Scaling and wavelet function samples from the cascade algorithm.
#[derive(Clone, Debug)]
pub struct WaveletFunction {
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Iterate the two-scale relation `φ(x) = √2 Σ_k h_k φ(2x − k)` from a unit
/// impulse for `iterations` rounds, giving samples on the grid `n / 2^iterations`.
pub fn cascade(h: &[f64], iterations: u32) -> Result<WaveletFunction> {
    let g = qmf_highpass(h)?;
    let m = h.len();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut v = vec![1.0];
    for j in 0..iterations {
        let step = 1usize << j;
        let len = 2 * step * (m - 1) + 1;
        let mut next = vec![0.0; len];
        for (n, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate() {
                if let Some(idx) = n.checked_sub(k * step) {
                    if idx < v.len() {
                        acc += hk * v[idx];
                    }
                }
            }
            *out = sqrt2 * acc;
        }
        v = next;
    }
    // ψ(x) = √2 Σ_k g_k φ(2x − k); φ(2x − k) sits at index 2n − k·2^J.
    let res = 1usize << iterations;
    let len = v.len();
    let psi = (0..len)
        .map(|n| {
            sqrt2
                * g.iter()
                    .enumerate()
                    .filter_map(|(k, gk)| {
                        (2 * n).checked_sub(k * res).and_then(|i| v.get(i)).map(|p| gk * p)
                    })
                    .sum::<f64>()
        })
        .collect();
    let x = (0..len).map(|n| n as f64 / res as f64).collect();
    Ok(WaveletFunction { x, phi: v, psi })
}

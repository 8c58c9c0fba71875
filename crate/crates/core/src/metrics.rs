//! Quality metrics and the small statistics used by the experiment runners:
//! PSNR between unit-range images, Spearman rank correlation, and the exact
//! one-sided sign test for paired comparisons.

use crate::error::{Error, Result};
use crate::image::ImageRgb;

/// Mean squared error over all channels; shapes must match.
pub fn compute_mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "mse needs matching shapes, got {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.data.is_empty() {
        return Err(Error::Dimension("mse of an empty image".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images: 10 log10(1 / MSE),
/// reported as 99 dB once the error drops below 1e-10.
pub fn compute_psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let mse = compute_mse(a, b)?;
    if mse < 1e-10 {
        Ok(99.0)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].partial_cmp(&values[*b]).expect("rank values are finite"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Tied entries share the average of the ranks they span.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "rank correlation needs equal lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Dimension("rank correlation needs at least 2 samples".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::Config("rank correlation is undefined for constant input".into()));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Exact one-sided sign test: the probability of observing at least `wins`
/// successes out of `wins + losses` fair coin flips. Ties must be excluded
/// by the caller. Zero trials carry no evidence and return 1.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // Exact binomial tail; n stays tiny (seed counts) so the direct sum in
    // f64 is fine.
    let mut tail = 0.0f64;
    for k in wins..=n {
        tail += binomial(n, k);
    }
    tail / 2.0f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

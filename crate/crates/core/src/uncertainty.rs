//! View uncertainty estimation. Candidate poses are scored either from the
//! latent ensemble directly (pairwise transport divergence between members)
//! or from decoded images (gradient energy of the mean decode), and both
//! modes add a weighted perceptual disagreement between a canonical member
//! pair. Higher scores mark views the prior is least sure about.

use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::image::{GrayImage, ImageRgb};
use crate::prior::{LatentEnsemble, ViewPrior};
use crate::scene::{candidate_seed, Pose};
use rayon::prelude::*;

pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Image-mode gradient scores are rescaled by this batch percentile so their
/// magnitude is comparable to the perceptual term.
pub const SOBEL_RESCALE_PERCENTILE: f64 = 0.95;

/// Per-pixel L2 magnitude of the 3x3 Sobel gradient with replicate padding.
pub fn sobel_magnitude(gray: &GrayImage) -> Result<GrayImage> {
    if gray.width < 3 || gray.height < 3 {
        return Err(Error::Dimension(format!(
            "sobel needs at least 3x3 input, got {}x{}",
            gray.width, gray.height
        )));
    }
    let mut out = GrayImage::new(gray.width, gray.height);
    // Smoothing weight 2 on the center row/column, 1 on the outer ones.
    let weight = |offset: isize| if offset == 0 { 2.0f64 } else { 1.0 };
    for y in 0..gray.height as isize {
        for x in 0..gray.width as isize {
            let mut gx = 0.0f64;
            let mut gy = 0.0f64;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let v = gray.get_clamped(x + dx, y + dy) as f64;
                    gx += v * dx as f64 * weight(dy);
                    gy += v * dy as f64 * weight(dx);
                }
            }
            out.set(x as usize, y as usize, (gx * gx + gy * gy).sqrt() as f32);
        }
    }
    Ok(out)
}

/// Mean Sobel gradient magnitude of the channel-averaged image.
pub fn sobel_gradient_scalar(img: &ImageRgb) -> Result<f64> {
    Ok(sobel_magnitude(&img.to_gray())?.mean())
}

/// Block-statistics proxy for perceptual dissimilarity: a three-level pyramid
/// is split into 8x8 blocks, each block contributes half the absolute mean
/// difference plus half the absolute deviation difference, and the level
/// averages are averaged. Symmetric, zero for identical images.
pub fn perceptual_distance(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "perceptual distance needs matching shapes, got {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width == 0 || a.height == 0 {
        return Err(Error::Dimension("perceptual distance needs nonempty images".into()));
    }
    let mut la = a.clone();
    let mut lb = b.clone();
    let mut total = 0.0;
    for level in 0..3 {
        if level > 0 {
            let (w, h) = (la.width.div_ceil(2).max(1), la.height.div_ceil(2).max(1));
            la = la.resize_bilinear(w, h);
            lb = lb.resize_bilinear(w, h);
        }
        total += level_block_distance(&la.to_gray(), &lb.to_gray());
    }
    Ok(total / 3.0)
}

fn level_block_distance(a: &GrayImage, b: &GrayImage) -> f64 {
    let mut sum = 0.0;
    let mut blocks = 0usize;
    for by in (0..a.height).step_by(8) {
        for bx in (0..a.width).step_by(8) {
            let (ma, sa) = block_stats(a, bx, by);
            let (mb, sb) = block_stats(b, bx, by);
            sum += 0.5 * ((ma - mb).abs() + (sa - sb).abs());
            blocks += 1;
        }
    }
    sum / blocks as f64
}

fn block_stats(g: &GrayImage, bx: usize, by: usize) -> (f64, f64) {
    let x1 = (bx + 8).min(g.width);
    let y1 = (by + 8).min(g.height);
    let n = ((x1 - bx) * (y1 - by)) as f64;
    let mut mean = 0.0;
    for y in by..y1 {
        for x in bx..x1 {
            mean += g.get(x, y) as f64;
        }
    }
    mean /= n;
    let mut var = 0.0;
    for y in by..y1 {
        for x in bx..x1 {
            let d = g.get(x, y) as f64 - mean;
            var += d * d;
        }
    }
    (mean, (var / n).sqrt())
}

/// Pairwise transport divergence of an ensemble, kept in f64 so reference
/// recomputations can match to tight tolerances.
#[derive(Debug, Clone)]
pub struct W2Divergence {
    pub scalar: f64,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl W2Divergence {
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|v| *v as f32).collect(),
        }
    }
}

/// Mean over member pairs (i, j) of the closed-form squared 2-Wasserstein
/// distance between the diagonal Gaussians at each location:
/// ||mu_i - mu_j||^2 + sum_c (v_i + v_j - 2 sqrt(v_i v_j)). The scalar is the
/// spatial mean. Uses the moment identity
/// sum_{i<j} (a_i - a_j)^2 = M sum a^2 - (sum a)^2 per channel, so the cost
/// is linear rather than quadratic in the member count.
pub fn w2_ensemble(ens: &LatentEnsemble) -> Result<W2Divergence> {
    let m = ens.samples.len();
    if m < 2 {
        return Err(Error::Config(format!("divergence needs >= 2 members, have {}", m)));
    }
    let shape = {
        let t = &ens.samples[0].mean;
        (t.channels, t.height, t.width)
    };
    for (i, s) in ens.samples.iter().enumerate() {
        for t in [&s.mean, &s.variance] {
            if (t.channels, t.height, t.width) != shape {
                return Err(Error::Dimension(format!(
                    "member {} shape ({},{},{}) disagrees with ({},{},{})",
                    i, t.channels, t.height, t.width, shape.0, shape.1, shape.2
                )));
            }
        }
        if let Some(v) = s.variance.data.iter().find(|v| **v < 0.0) {
            return Err(Error::Integrity(format!(
                "member {} carries a negative variance {}",
                i, v
            )));
        }
    }
    let (channels, height, width) = shape;
    let pairs = (m * (m - 1) / 2) as f64;
    let mut values = vec![0.0f64; width * height];
    for c in 0..channels {
        for p in 0..width * height {
            let mut sum_mu = 0.0f64;
            let mut sum_mu2 = 0.0f64;
            let mut sum_sd = 0.0f64;
            let mut sum_var = 0.0f64;
            for s in &ens.samples {
                let mu = s.mean.data[c * width * height + p] as f64;
                let var = s.variance.data[c * width * height + p] as f64;
                sum_mu += mu;
                sum_mu2 += mu * mu;
                sum_sd += var.sqrt();
                sum_var += var;
            }
            let mean_pairs = m as f64 * sum_mu2 - sum_mu * sum_mu;
            let var_pairs = m as f64 * sum_var - sum_sd * sum_sd;
            values[p] += (mean_pairs + var_pairs) / pairs;
        }
    }
    let scalar = values.iter().sum::<f64>() / values.len() as f64;
    Ok(W2Divergence { scalar, width, height, values })
}

/// Scalar operation count for scoring a candidate batch; the product of all
/// five extents.
pub fn estimate_cost(
    candidates: usize,
    members: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> u64 {
    [members, channels, height, width]
        .iter()
        .fold(candidates as u64, |acc, d| acc.saturating_mul(*d as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Ensemble divergence measured on the latent tensors.
    LatentSpace,
    /// Gradient energy measured on the mean decoded image.
    ImageSpace,
}

/// Which two decoded members feed the perceptual term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// The two lowest members after sorting by mean-tensor norm; stable
    /// under member permutation.
    LowestNorm,
    /// Explicit member indices, for callers substituting their own rule.
    Fixed { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mode: ScoreMode,
    pub lambda: f64,
    pub pair_rule: PairRule,
}

impl Default for EstimatorConfig {
    fn default() -> EstimatorConfig {
        EstimatorConfig {
            mode: ScoreMode::LatentSpace,
            lambda: DEFAULT_LAMBDA,
            pair_rule: PairRule::LowestNorm,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Uncertainty verdict for one candidate pose.
///
/// Invariants: `score = w2_component + lambda * perceptual_component` and
/// `w2_component` equals the mean of `spatial_map`, so both components can
/// be recomputed from the stored fields.
#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub pose_index: usize,
    pub score: f64,
    pub w2_component: f64,
    pub perceptual_component: f64,
    pub spatial_map: GrayImage,
}

/// Scores one sampled ensemble. Latent mode uses the member divergence map;
/// image mode uses the gradient magnitude of the mean decoded image (left
/// raw here; the batch scorer applies the percentile rescale). Both add the
/// weighted perceptual distance of the configured decoded pair.
pub fn score_view(
    ens: &LatentEnsemble,
    pose_index: usize,
    config: &EstimatorConfig,
) -> Result<UncertaintyReport> {
    let (map, perceptual) = score_parts(ens, config)?;
    Ok(report_from_parts(pose_index, map, perceptual, config.lambda))
}

fn score_parts(ens: &LatentEnsemble, config: &EstimatorConfig) -> Result<(GrayImage, f64)> {
    config.validate()?;
    if ens.decoded.len() != ens.samples.len() {
        return Err(Error::Config(format!(
            "ensemble stores {} decodes for {} members",
            ens.decoded.len(),
            ens.samples.len()
        )));
    }
    let map = match config.mode {
        ScoreMode::LatentSpace => w2_ensemble(ens)?.to_gray(),
        ScoreMode::ImageSpace => sobel_magnitude(&mean_image(&ens.decoded)?.to_gray())?,
    };
    let (a, b) = match config.pair_rule {
        PairRule::LowestNorm => ens.canonical_pair()?,
        PairRule::Fixed { a, b } => {
            if a >= ens.decoded.len() || b >= ens.decoded.len() {
                return Err(Error::Config(format!(
                    "fixed pair ({}, {}) out of range for {} members",
                    a,
                    b,
                    ens.decoded.len()
                )));
            }
            (a, b)
        }
    };
    let perceptual = perceptual_distance(&ens.decoded[a], &ens.decoded[b])?;
    Ok((map, perceptual))
}

fn mean_image(images: &[ImageRgb]) -> Result<ImageRgb> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("cannot average zero images".into()))?;
    // f64 accumulation keeps the average insensitive to member order.
    let mut acc = vec![0.0f64; first.data.len()];
    for img in images {
        if img.width != first.width || img.height != first.height {
            return Err(Error::Dimension("decoded images disagree on shape".into()));
        }
        for (o, v) in acc.iter_mut().zip(&img.data) {
            *o += *v as f64;
        }
    }
    let mut out = ImageRgb::new(first.width, first.height);
    let inv = 1.0 / images.len() as f64;
    for (o, v) in out.data.iter_mut().zip(&acc) {
        *o = (v * inv) as f32;
    }
    Ok(out)
}

fn report_from_parts(
    pose_index: usize,
    spatial_map: GrayImage,
    perceptual: f64,
    lambda: f64,
) -> UncertaintyReport {
    // The divergence component is defined as the stored map's mean so the
    // report invariant holds exactly, including after any rescale of the
    // map.
    let w2_component = spatial_map.mean();
    UncertaintyReport {
        pose_index,
        score: w2_component + lambda * perceptual,
        w2_component,
        perceptual_component: perceptual,
        spatial_map,
    }
}

/// Scores every candidate with a per-candidate derived seed. In image mode
/// the gradient maps are divided by the batch's 95th percentile gradient
/// score, bringing them onto the same numeric footing as the perceptual
/// term.
pub fn score_views<P: ViewPrior + Sync + ?Sized>(
    prior: &P,
    field: &GaussianField,
    poses: &[(usize, Pose)],
    base_seed: u64,
    config: &EstimatorConfig,
) -> Result<Vec<UncertaintyReport>> {
    config.validate()?;
    let scored: Vec<(usize, GrayImage, f64)> = poses
        .par_iter()
        .map(|(index, pose)| {
            let ens = prior.sample_ensemble(field, pose, candidate_seed(base_seed, *index))?;
            let (map, perceptual) = score_parts(&ens, config)?;
            Ok((*index, map, perceptual))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = match config.mode {
        ScoreMode::LatentSpace => 1.0,
        ScoreMode::ImageSpace => {
            let mut raw: Vec<f64> = scored.iter().map(|(_, map, _)| map.mean()).collect();
            raw.sort_by(|a, b| a.partial_cmp(b).expect("gradient scores are finite"));
            let rank = ((raw.len() as f64 * SOBEL_RESCALE_PERCENTILE).ceil() as usize)
                .clamp(1, raw.len())
                - 1;
            if raw[rank] > 1e-12 {
                raw[rank]
            } else {
                1.0
            }
        }
    };
    Ok(scored
        .into_iter()
        .map(|(index, mut map, perceptual)| {
            if scale != 1.0 {
                for v in &mut map.data {
                    *v /= scale as f32;
                }
            }
            report_from_parts(index, map, perceptual, config.lambda)
        })
        .collect())
}

/// Splats each report's spatial map onto the ground plane (z = 0) and returns
/// the per-cell mean. Cells never covered by any report are filled with the
/// maximum observed value, treating unobserved ground as fully uncertain.
pub fn project_uncertainty_to_ground(
    reports: &[(Pose, GrayImage)],
    extent: f64,
    resolution: usize,
) -> Result<GrayImage> {
    if resolution == 0 || !(extent > 0.0) {
        return Err(Error::Config("ground projection needs positive resolution and extent".into()));
    }
    let mut sum = vec![0.0f64; resolution * resolution];
    let mut count = vec![0u32; resolution * resolution];
    let half = extent / 2.0;
    for (pose, map) in reports {
        if map.width == 0 || map.height == 0 {
            return Err(Error::Dimension("cannot project an empty uncertainty map".into()));
        }
        let cam = pose.camera(map.width, map.height);
        for y in 0..map.height {
            for x in 0..map.width {
                let dir = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                if dir.z.abs() < 1e-12 {
                    continue;
                }
                let t = -cam.eye.z / dir.z;
                if t <= 0.0 {
                    continue;
                }
                let p = cam.eye + dir * t;
                if p.x < -half || p.x > half || p.y < -half || p.y > half {
                    continue;
                }
                let gx = (((p.x + half) / extent) * resolution as f64) as usize;
                let gy = (((p.y + half) / extent) * resolution as f64) as usize;
                let cell = gy.min(resolution - 1) * resolution + gx.min(resolution - 1);
                sum[cell] += map.get(x, y) as f64;
                count[cell] += 1;
            }
        }
    }
    let mut out = GrayImage::new(resolution, resolution);
    let mut peak = 0.0f32;
    for (i, c) in count.iter().enumerate() {
        if *c > 0 {
            let v = (sum[i] / *c as f64) as f32;
            out.data[i] = v;
            peak = peak.max(v);
        }
    }
    for (v, c) in out.data.iter_mut().zip(&count) {
        if *c == 0 {
            *v = peak;
        }
    }
    Ok(out)
}

//! Active view selection: score candidate poses with the ensemble estimator,
//! capture the top-k, fold them into the field with bounded refinement, and
//! repeat until the iteration or capture budget runs out.
//!
//! Candidate, bootstrap, and validation pose sets are drawn from disjoint
//! seed streams, so validation views are never capturable by the loop.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_view, GaussianField, RenderParams};
use crate::math::mix_seed3;
use crate::metrics::compute_psnr;
use crate::prior::ViewPrior;
use crate::refine::{refine_bounded, RefineOptions};
use crate::scene::{capture, sample_candidate_poses, Capture, Pose, PoseBounds, SyntheticScene};
use crate::uncertainty::{score_views, EstimatorConfig};

/// Validation set size; held out from every candidate pool.
pub const VALIDATION_VIEWS: usize = 16;
/// Validation error may rise by at most this factor per loop iteration before
/// it counts as a monotonicity violation.
pub const ERROR_RISE_TOLERANCE: f64 = 1.02;

const CANDIDATE_SALT: u64 = 0xca4d;
const BOOTSTRAP_SALT: u64 = 0xb007;
const VALIDATION_SALT: u64 = 0x7a11;
const SCORE_SALT: u64 = 0x5c0e;
const RANDOM_SALT: u64 = 0x7a9d;

/// How the loop picks the next captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Top-k ensemble uncertainty scores.
    Uncertainty,
    /// k distinct uniform draws from the unexplored pool.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    /// Candidate pool size.
    pub candidates: usize,
    /// Views captured per iteration.
    pub k: usize,
    /// Loop iterations.
    pub iterations: usize,
    /// Total capture budget; `None` means `k * iterations`. The loop stops
    /// before any iteration that would exceed it.
    pub budget: Option<usize>,
    /// Bootstrap captures taken before the loop starts.
    pub n_init: usize,
    pub capture_resolution: (usize, usize),
    /// Pixel stride for back-projecting new splats from a capture.
    pub insert_stride: usize,
    /// Refinement steps per loop iteration (over all captures so far).
    pub refine_iterations: usize,
    pub refine_learning_rate: f64,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    /// Restricts bootstrap poses to an azimuth window, leaving the rest of
    /// the scene unobserved at loop start.
    pub init_azimuth: Option<(f64, f64)>,
}

impl Default for ActiveConfig {
    fn default() -> ActiveConfig {
        ActiveConfig {
            candidates: 64,
            k: 4,
            iterations: 3,
            budget: None,
            n_init: 8,
            capture_resolution: (128, 128),
            insert_stride: 4,
            refine_iterations: 40,
            refine_learning_rate: 1.0,
            strategy: SelectionStrategy::Uncertainty,
            seed: 0,
            init_azimuth: None,
        }
    }
}

impl ActiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("candidate pool must be nonempty".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.n_init == 0 {
            return Err(Error::Config("bootstrap needs at least one view".into()));
        }
        if self.capture_resolution.0 < 8 || self.capture_resolution.1 < 8 {
            return Err(Error::Config("capture resolution below 8x8".into()));
        }
        if self.insert_stride == 0 {
            return Err(Error::Config("insertion stride must be positive".into()));
        }
        if !(self.refine_learning_rate > 0.0 && self.refine_learning_rate.is_finite()) {
            return Err(Error::Config("refine learning rate must be positive".into()));
        }
        if let Some((lo, hi)) = self.init_azimuth {
            if !(lo < hi && (hi - lo) <= std::f64::consts::TAU + 1e-12) {
                return Err(Error::Config("bootstrap azimuth window is not ordered".into()));
            }
        }
        Ok(())
    }

    /// Effective iteration count after budget truncation.
    pub fn effective_iterations(&self) -> usize {
        let budget = self.budget.unwrap_or(self.k * self.iterations);
        self.iterations.min(budget / self.k)
    }
}

/// Candidate pool for this config's seed.
pub fn candidate_poses(cfg: &ActiveConfig, bounds: &PoseBounds) -> Result<Vec<Pose>> {
    sample_candidate_poses(cfg.candidates, *bounds, mix_seed3(cfg.seed, CANDIDATE_SALT, 0))
}

/// Bootstrap poses, optionally confined to the config's azimuth window.
pub fn bootstrap_poses(cfg: &ActiveConfig, bounds: &PoseBounds) -> Result<Vec<Pose>> {
    let mut b = *bounds;
    if let Some(window) = cfg.init_azimuth {
        b.azimuth = window;
    }
    sample_candidate_poses(cfg.n_init, b, mix_seed3(cfg.seed, BOOTSTRAP_SALT, 0))
}

/// Held-out evaluation poses; a reserved seed stream keeps them disjoint from
/// candidate and bootstrap pools.
pub fn validation_poses(seed: u64) -> Result<Vec<Pose>> {
    sample_candidate_poses(VALIDATION_VIEWS, PoseBounds::default(), mix_seed3(seed, VALIDATION_SALT, 0))
}

/// Captures every pose, back-projects splats, and runs one bounded
/// refinement pass (skipped when `refine_iterations` is zero).
pub fn train_on_poses(
    scene: &SyntheticScene,
    poses: &[Pose],
    cfg: &ActiveConfig,
) -> Result<(GaussianField, Vec<Capture>)> {
    let mut field = GaussianField::new();
    let mut captures = Vec::with_capacity(poses.len());
    for pose in poses {
        let cap = capture(scene, *pose, cfg.capture_resolution)?;
        crate::field::insert_from_capture(&mut field, &cap, cfg.insert_stride)?;
        captures.push(cap);
    }
    if cfg.refine_iterations > 0 && !captures.is_empty() {
        refine_bounded(&mut field, &captures, &refine_options(cfg))?;
    }
    Ok((field, captures))
}

/// Builds the starting field from the bootstrap poses and registers them
/// with the prior.
pub fn bootstrap_field<P: ViewPrior + ?Sized>(
    scene: &SyntheticScene,
    cfg: &ActiveConfig,
    bounds: &PoseBounds,
    prior: &mut P,
) -> Result<(GaussianField, Vec<Capture>)> {
    let poses = bootstrap_poses(cfg, bounds)?;
    let out = train_on_poses(scene, &poses, cfg)?;
    for pose in &poses {
        prior.note_captured_view(pose);
    }
    Ok(out)
}

fn refine_options(cfg: &ActiveConfig) -> RefineOptions {
    RefineOptions {
        iterations: cfg.refine_iterations,
        learning_rate: cfg.refine_learning_rate,
        ..RefineOptions::default()
    }
}

/// Picks the k highest-scoring reports outside `exclude`. Ties break toward
/// the lowest pose index; the result is sorted by descending score.
pub fn select_top_k(
    reports: &[crate::uncertainty::UncertaintyReport],
    k: usize,
    exclude: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    let mut pool: Vec<(f64, usize)> = reports
        .iter()
        .filter(|r| !exclude.contains(&r.pose_index))
        .map(|r| (r.score, r.pose_index))
        .collect();
    if pool.len() < k {
        return Err(Error::Budget(format!(
            "requested {} views but only {} candidates remain",
            k,
            pool.len()
        )));
    }
    pool.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    });
    Ok(pool.into_iter().take(k).map(|(_, idx)| idx).collect())
}

/// One loop iteration: which poses were taken, at what scores, and how the
/// field looked afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopRecord {
    pub iteration: usize,
    /// Candidate indices captured this iteration, highest score first.
    pub selected: Vec<usize>,
    /// Scores aligned with `selected`; zero under random selection.
    pub scores: Vec<f64>,
    /// Mean absolute validation error after the update.
    pub validation_l1: f64,
    /// Mean validation PSNR after the update (dB).
    pub validation_psnr: f64,
    pub field_revision: u64,
    /// Candidates scored this iteration; zero under random selection.
    pub scored_candidates: usize,
    /// Wall time of the scoring stage (milliseconds).
    pub score_ms: f64,
    /// Wall time of capture plus insertion (milliseconds).
    pub capture_ms: f64,
    /// Wall time of the refinement pass (milliseconds).
    pub refine_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoopTrace {
    pub records: Vec<LoopRecord>,
    /// Candidate indices in capture order across all iterations.
    pub captured: Vec<usize>,
    /// Iterations where validation error rose beyond the tolerance.
    pub monotonicity_violations: usize,
}

impl LoopTrace {
    /// One row per captured view: iteration, pose_index, score, psnr_after.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "iteration,pose_index,score,psnr_after\r\n")?;
        for rec in &self.records {
            for (idx, score) in rec.selected.iter().zip(&rec.scores) {
                write!(out, "{},{},{},{}\r\n", rec.iteration, idx, score, rec.validation_psnr)?;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("string write cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Mean (L1, PSNR) of the field rendered against ground-truth captures.
pub fn evaluate_field(
    field: &GaussianField,
    targets: &[Capture],
    params: &RenderParams,
) -> Result<(f64, f64)> {
    if targets.is_empty() {
        return Err(Error::Config("evaluation needs at least one target".into()));
    }
    let mut l1 = 0.0;
    let mut psnr = 0.0;
    for cap in targets {
        let cam = cap.pose.camera(cap.image.width, cap.image.height);
        let rendered = render_view(field, &cam, None, params)?.image;
        l1 += rendered.mean_abs_diff(&cap.image);
        psnr += compute_psnr(&rendered, &cap.image)?;
    }
    let n = targets.len() as f64;
    Ok((l1 / n, psnr / n))
}

/// Runs the selection loop on a field already bootstrapped from
/// `init_captures`. Every iteration scores the unexplored candidates,
/// captures the chosen poses, refines over all captures so far, and records
/// validation quality. Returns the refined field and the full trace.
///
/// No candidate index is ever captured twice; the trace holds exactly
/// `cfg.effective_iterations()` records.
pub fn run_dav_loop<P: ViewPrior + Sync + ?Sized>(
    scene: &SyntheticScene,
    mut field: GaussianField,
    init_captures: Vec<Capture>,
    candidates: &[Pose],
    prior: &mut P,
    cfg: &ActiveConfig,
    estimator: &EstimatorConfig,
) -> Result<(GaussianField, LoopTrace)> {
    cfg.validate()?;
    estimator.validate()?;
    let render_params = RenderParams::default();
    let validation: Vec<Capture> = validation_poses(cfg.seed)?
        .into_iter()
        .map(|p| capture(scene, p, cfg.capture_resolution))
        .collect::<Result<_>>()?;

    let mut captures = init_captures;
    let mut taken: BTreeSet<usize> = BTreeSet::new();
    let mut trace = LoopTrace::default();
    let mut prev_error: Option<f64> = None;

    for t in 0..cfg.effective_iterations() {
        let remaining: Vec<(usize, Pose)> = (0..candidates.len())
            .filter(|i| !taken.contains(i))
            .map(|i| (i, candidates[i]))
            .collect();
        if remaining.len() < cfg.k {
            return Err(Error::Budget(format!(
                "iteration {} needs {} fresh candidates but only {} remain",
                t,
                cfg.k,
                remaining.len()
            )));
        }

        let score_start = std::time::Instant::now();
        let scored_candidates = match cfg.strategy {
            SelectionStrategy::Uncertainty => remaining.len(),
            SelectionStrategy::Random => 0,
        };
        let (selected, scores) = match cfg.strategy {
            SelectionStrategy::Uncertainty => {
                let reports = score_views(
                    prior,
                    &field,
                    &remaining,
                    mix_seed3(cfg.seed, SCORE_SALT, t as u64),
                    estimator,
                )?;
                let picks = select_top_k(&reports, cfg.k, &BTreeSet::new())?;
                let score_of = |idx: usize| {
                    reports.iter().find(|r| r.pose_index == idx).map(|r| r.score).unwrap_or(0.0)
                };
                let scores = picks.iter().map(|&i| score_of(i)).collect();
                (picks, scores)
            }
            SelectionStrategy::Random => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed3(cfg.seed, RANDOM_SALT, t as u64));
                let mut pool: Vec<usize> = remaining.iter().map(|(i, _)| *i).collect();
                let mut picks = Vec::with_capacity(cfg.k);
                for _ in 0..cfg.k {
                    let j = rng.gen_range(0..pool.len());
                    picks.push(pool.swap_remove(j));
                }
                let scores = vec![0.0; picks.len()];
                (picks, scores)
            }
        };

        let score_ms = score_start.elapsed().as_secs_f64() * 1e3;

        let capture_start = std::time::Instant::now();
        for &idx in &selected {
            let cap = capture(scene, candidates[idx], cfg.capture_resolution)?;
            crate::field::insert_from_capture(&mut field, &cap, cfg.insert_stride)?;
            prior.note_captured_view(&candidates[idx]);
            captures.push(cap);
            taken.insert(idx);
            trace.captured.push(idx);
        }
        let capture_ms = capture_start.elapsed().as_secs_f64() * 1e3;

        let refine_start = std::time::Instant::now();
        if cfg.refine_iterations > 0 {
            refine_bounded(&mut field, &captures, &refine_options(cfg))?;
        }
        let refine_ms = refine_start.elapsed().as_secs_f64() * 1e3;

        let (val_l1, val_psnr) = evaluate_field(&field, &validation, &render_params)?;
        if let Some(prev) = prev_error {
            if val_l1 > prev * ERROR_RISE_TOLERANCE {
                trace.monotonicity_violations += 1;
                log::warn!(
                    "iteration {}: validation error rose from {:.6} to {:.6}",
                    t,
                    prev,
                    val_l1
                );
            }
        }
        prev_error = Some(val_l1);
        trace.records.push(LoopRecord {
            iteration: t,
            selected,
            scores,
            validation_l1: val_l1,
            validation_psnr: val_psnr,
            field_revision: field.revision(),
            scored_candidates,
            score_ms,
            capture_ms,
            refine_ms,
        });
    }
    Ok((field, trace))
}

//! Experiment configuration and the boundary-crop seam metric. The config is
//! one flat document holding every knob in the pipeline; it validates against
//! each module's own preconditions at load time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::active::{ActiveConfig, SelectionStrategy};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::lod::{CachePolicy, LodParams};
use crate::prior::PriorConfig;
use crate::scene::TerrainParams;
use crate::tiling::{TileParams, TileSet, TilingMap};
use crate::uncertainty::{perceptual_distance, EstimatorConfig, ScoreMode};

pub const SCHEMA_VERSION: u32 = 1;

/// Every knob of the pipeline in one flat document. Defaults are the desk
/// configuration: 64 candidate poses, 4 captures per iteration over 3
/// iterations, a 5-member prior, and 128 px tiles with 2 edge colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Base seed for sampling, selection, and tiling randomness.
    pub seed: u64,
    pub scene_seed: u64,
    pub scene_grid: usize,
    pub world_size: f64,
    pub terrain_amplitude: f64,
    /// Ensemble size M.
    pub members: usize,
    pub p_drop: f64,
    pub noise_gain: f64,
    /// Square latent resolution of the prior.
    pub latent: usize,
    /// Perceptual term weight.
    pub lambda: f64,
    pub score_mode: ScoreMode,
    /// Candidate pool size per experiment.
    pub candidates: usize,
    /// Captures per iteration.
    pub k: usize,
    /// Loop iterations T.
    pub iterations: usize,
    /// Total capture budget; unset means k * T.
    pub budget: Option<usize>,
    pub n_init: usize,
    pub capture_resolution: usize,
    pub insert_stride: usize,
    pub refine_iterations: usize,
    pub refine_learning_rate: f64,
    /// Edge colors K.
    pub tile_colors: usize,
    pub tile_resolution: usize,
    pub tile_overlap: usize,
    pub tile_world: f64,
    /// When false, seam optimization uses a fixed balance instead of the
    /// uncertainty-driven weight.
    pub gamma_enabled: bool,
    pub ground_map_resolution: usize,
    pub lod_levels: usize,
    pub lod_ratio: f64,
    pub lod_threshold_base: f64,
    pub lod_threshold_step: f64,
    pub lod_delta: f64,
    pub tau: f64,
    pub base_bins: usize,
    pub hot_bins: usize,
    pub base_prefetch: usize,
    pub hot_prefetch: usize,
    /// Realized tiling size for the tiles and render experiments.
    pub tiling_width: usize,
    pub tiling_height: usize,
    pub crop_size: usize,
    pub render_resolution: usize,
    pub render_elevation: f64,
    pub render_radius: f64,
    pub frames: usize,
    /// Seed count for multi-seed experiments.
    pub seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            scene_seed: 7,
            scene_grid: 256,
            world_size: 10.0,
            terrain_amplitude: 1.2,
            members: 5,
            p_drop: 0.15,
            noise_gain: 0.25,
            latent: 32,
            lambda: 0.1,
            score_mode: ScoreMode::LatentSpace,
            candidates: 64,
            k: 4,
            iterations: 3,
            budget: None,
            n_init: 8,
            capture_resolution: 128,
            insert_stride: 4,
            refine_iterations: 40,
            refine_learning_rate: 1.0,
            tile_colors: 2,
            tile_resolution: 128,
            tile_overlap: 16,
            tile_world: 4.0,
            gamma_enabled: true,
            ground_map_resolution: 48,
            lod_levels: 6,
            lod_ratio: 4.0,
            lod_threshold_base: 6.0,
            lod_threshold_step: 4.0,
            lod_delta: 1.0,
            tau: 0.6,
            base_bins: 8,
            hot_bins: 16,
            base_prefetch: 3,
            hot_prefetch: 6,
            tiling_width: 6,
            tiling_height: 6,
            crop_size: 32,
            render_resolution: 128,
            render_elevation: 0.6,
            render_radius: 6.5,
            frames: 120,
            seeds: 5,
        }
    }
}

impl ExperimentConfig {
    /// Parses either JSON or the flat `key = value` format (one pair per
    /// line, `#` comments). Unknown keys are rejected in both.
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str::<serde_json::Value>(text)
                .map_err(|e| Error::Format(format!("config is not valid JSON: {e}")))?
        } else {
            let mut map = serde_json::Map::new();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, val)) = line.split_once('=') else {
                    return Err(Error::Format(format!(
                        "config line {}: expected key = value, got {:?}",
                        lineno + 1,
                        line
                    )));
                };
                let key = key.trim().to_string();
                let val = val.trim();
                let parsed = serde_json::from_str::<serde_json::Value>(val)
                    .unwrap_or_else(|_| serde_json::Value::String(val.to_string()));
                if map.insert(key.clone(), parsed).is_some() {
                    return Err(Error::Format(format!("config key {key} appears twice")));
                }
            }
            serde_json::Value::Object(map)
        };
        let config: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config rejected: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks the schema version plus every embedded module configuration.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} does not match supported version {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.scene_grid < 16 {
            return Err(Error::Config("scene grid below 16".into()));
        }
        if !(self.world_size > 0.0) || !(self.terrain_amplitude >= 0.0) {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        if self.crop_size < 8 || self.crop_size > self.tile_resolution || self.crop_size % 2 != 0 {
            return Err(Error::Config(
                "crop size must be even and within [8, tile_resolution]".into(),
            ));
        }
        if self.frames == 0 || self.seeds == 0 {
            return Err(Error::Config("frame and seed counts must be positive".into()));
        }
        if self.render_resolution < 8 {
            return Err(Error::Config("render resolution below 8".into()));
        }
        if !(self.render_radius > 0.0)
            || !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.render_elevation)
        {
            return Err(Error::Config("render pose outside the valid orbit".into()));
        }
        if self.tiling_width == 0 || self.tiling_height == 0 {
            return Err(Error::Config("tiling region must be nonempty".into()));
        }
        self.active_config().validate()?;
        self.estimator_config().validate()?;
        self.prior_config().validate()?;
        self.tile_params().validate()?;
        self.lod_params().validate()?;
        self.cache_policy().validate()?;
        Ok(())
    }

    pub fn terrain_params(&self) -> TerrainParams {
        TerrainParams {
            amplitude: self.terrain_amplitude,
            world_size: self.world_size,
            ..TerrainParams::default()
        }
    }

    pub fn active_config(&self) -> ActiveConfig {
        ActiveConfig {
            candidates: self.candidates,
            k: self.k,
            iterations: self.iterations,
            budget: self.budget,
            n_init: self.n_init,
            capture_resolution: (self.capture_resolution, self.capture_resolution),
            insert_stride: self.insert_stride,
            refine_iterations: self.refine_iterations,
            refine_learning_rate: self.refine_learning_rate,
            strategy: SelectionStrategy::Uncertainty,
            seed: self.seed,
            init_azimuth: None,
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            mode: self.score_mode,
            lambda: self.lambda,
            ..EstimatorConfig::default()
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            members: self.members,
            latent_width: self.latent,
            latent_height: self.latent,
            noise_gain: self.noise_gain,
            drop_prob: self.p_drop,
            ..PriorConfig::default()
        }
    }

    pub fn tile_params(&self) -> TileParams {
        TileParams {
            resolution: self.tile_resolution,
            overlap: self.tile_overlap,
            tile_world: self.tile_world,
            seed: self.seed,
            gamma_from_uncertainty: self.gamma_enabled,
        }
    }

    pub fn lod_params(&self) -> LodParams {
        LodParams {
            levels: self.lod_levels,
            reduction_ratio: self.lod_ratio,
            threshold_base: self.lod_threshold_base,
            threshold_step: self.lod_threshold_step,
            delta: self.lod_delta,
        }
    }

    pub fn cache_policy(&self) -> CachePolicy {
        CachePolicy {
            tau: self.tau,
            base_bins: self.base_bins,
            hot_bins: self.hot_bins,
            base_prefetch: self.base_prefetch,
            hot_prefetch: self.hot_prefetch,
        }
    }
}

/// One experiment measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub seed: u64,
    /// Validation PSNR in dB, capped at 99.
    pub psnr: f64,
    /// Boundary-crop perceptual penalty in [0, 1]; lower is better.
    pub seam_score: f64,
    /// Wall time per pipeline stage, milliseconds.
    pub wall_times: BTreeMap<String, f64>,
}

/// Mean perceptual penalty of tile boundaries: each boundary-crossing crop is
/// compared against itself with the two seam-adjacent rows or columns
/// replaced by interpolation across the boundary, so perfectly continuous
/// seams score near zero. Lower is better.
pub fn seam_score(tiling: &TilingMap, tile_set: &TileSet, crop_size: usize) -> Result<f64> {
    let res = tile_set.params.resolution;
    if crop_size < 8 || crop_size > res || crop_size % 2 != 0 {
        return Err(Error::Config(format!(
            "crop size {crop_size} must be even and within [8, {res}]"
        )));
    }
    if tiling.cells.is_empty() {
        return Err(Error::Config("cannot score an empty tiling".into()));
    }
    let is = tiling.cells.keys().map(|&(i, _)| i);
    let js = tiling.cells.keys().map(|&(_, j)| j);
    let spread_i = is.clone().max().unwrap() - is.min().unwrap();
    let spread_j = js.clone().max().unwrap() - js.min().unwrap();
    if spread_i < 1 || spread_j < 1 {
        return Err(Error::Config("seam scoring needs a tiling of at least 2x2 cells".into()));
    }

    let half = crop_size / 2;
    let band0 = (res - crop_size) / 2;
    let mut total = 0.0;
    let mut boundaries = 0usize;
    for (&(i, j), &id) in &tiling.cells {
        let a = &tile_set.tiles[id as usize].composite_preview;
        if let Some(east) = tiling.get(i + 1, j) {
            let b = &tile_set.tiles[east as usize].composite_preview;
            let mut crop = ImageRgb::new(crop_size, crop_size);
            for y in 0..crop_size {
                for x in 0..half {
                    crop.set(x, y, a.get(res - half + x, band0 + y));
                    crop.set(half + x, y, b.get(x, band0 + y));
                }
            }
            total += seam_penalty(&crop, half, false)?;
            boundaries += 1;
        }
        if let Some(south) = tiling.get(i, j + 1) {
            let b = &tile_set.tiles[south as usize].composite_preview;
            let mut crop = ImageRgb::new(crop_size, crop_size);
            for y in 0..half {
                for x in 0..crop_size {
                    crop.set(x, y, a.get(band0 + x, res - half + y));
                    crop.set(x, half + y, b.get(band0 + x, y));
                }
            }
            total += seam_penalty(&crop, half, true)?;
            boundaries += 1;
        }
    }
    if boundaries == 0 {
        return Err(Error::Config("tiling has no interior boundaries to score".into()));
    }
    Ok(total / boundaries as f64)
}

/// Perceptual distance between a boundary crop and the same crop with the two
/// seam-adjacent lines replaced by interpolating their outer neighbors.
fn seam_penalty(crop: &ImageRgb, half: usize, horizontal: bool) -> Result<f64> {
    let mut smooth = crop.clone();
    let n = if horizontal { crop.width } else { crop.height };
    for t in 0..n {
        let fetch = |line: usize| {
            if horizontal {
                crop.get(t, line)
            } else {
                crop.get(line, t)
            }
        };
        let outer_a = fetch(half - 2);
        let outer_b = fetch(half + 1);
        let mix = |wa: f32, wb: f32| {
            [
                wa * outer_a[0] + wb * outer_b[0],
                wa * outer_a[1] + wb * outer_b[1],
                wa * outer_a[2] + wb * outer_b[2],
            ]
        };
        let near = mix(2.0 / 3.0, 1.0 / 3.0);
        let far = mix(1.0 / 3.0, 2.0 / 3.0);
        if horizontal {
            smooth.set(t, half - 1, near);
            smooth.set(t, half, far);
        } else {
            smooth.set(half - 1, t, near);
            smooth.set(half, t, far);
        }
    }
    perceptual_distance(crop, &smooth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{insert_from_capture, GaussianField};
    use crate::image::GrayImage;
    use crate::scene::{capture, generate_scene, Pose};
    use crate::tiling::{build_tile_set, stochastic_tiling, GridRect};

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn flat_text_overrides_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_text(
            "# comment\n\nk = 7\nlambda = 0.25\nscore_mode = image_space\nbudget = 14\n",
        )
        .unwrap();
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.score_mode, ScoreMode::ImageSpace);
        assert_eq!(cfg.budget, Some(14));

        match ExperimentConfig::from_text("mystery_knob = 3\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("mystery_knob"), "{msg}"),
            other => panic!("unknown key must be rejected, got {other:?}"),
        }
        assert!(ExperimentConfig::from_text("k 7").is_err());
        assert!(ExperimentConfig::from_text("k = 7\nk = 8").is_err());
    }

    #[test]
    fn json_text_parses_and_validates_module_preconditions() {
        let cfg = ExperimentConfig::from_text("{\"members\": 3, \"tau\": 0.4}").unwrap();
        assert_eq!(cfg.members, 3);
        assert_eq!(cfg.tau, 0.4);
        // Module preconditions surface at load: one member is too few.
        assert!(ExperimentConfig::from_text("members = 1").is_err());
        // Blend bandwidth wider than half the threshold gap.
        assert!(ExperimentConfig::from_text("lod_delta = 3.0").is_err());
        // Overlap beyond half the tile.
        assert!(ExperimentConfig::from_text("tile_overlap = 70").is_err());
        assert!(ExperimentConfig::from_text("schema_version = 99").is_err());
    }

    fn tiny_tiles() -> (crate::tiling::TileSet, TilingMap) {
        let scene = generate_scene(11, (48, 48), crate::scene::TerrainParams::default()).unwrap();
        let mut field = GaussianField::new();
        for (el, az) in [(0.9, 0.3), (0.8, 2.1), (1.0, 4.2), (0.7, 5.5)] {
            let cap = capture(&scene, Pose::new(el, az, 10.0).unwrap(), (48, 48)).unwrap();
            insert_from_capture(&mut field, &cap, 3).unwrap();
        }
        let ground = GrayImage::new(16, 16);
        let params =
            TileParams { resolution: 24, overlap: 4, tile_world: 3.0, seed: 5, ..TileParams::default() };
        let set = build_tile_set(&field, &ground, scene.extent(), 2, &params).unwrap();
        let map =
            stochastic_tiling(&set, GridRect { i0: 0, j0: 0, width: 4, height: 4 }, 9).unwrap();
        (set, map)
    }

    #[test]
    fn seam_score_is_nonnegative_and_zero_for_constant_tiles() {
        let (mut set, map) = tiny_tiles();
        let real = seam_score(&map, &set, 16).unwrap();
        assert!(real >= 0.0);
        // Flattening every preview to one color removes every seam.
        for tile in &mut set.tiles {
            tile.composite_preview = ImageRgb::filled(24, 24, [0.4, 0.4, 0.4]);
        }
        let flat = seam_score(&map, &set, 16).unwrap();
        assert!(flat <= 1e-9, "constant tiles still scored {flat}");
        assert!(flat <= real);
    }

    #[test]
    fn seam_score_rejects_degenerate_inputs() {
        let (set, _) = tiny_tiles();
        let row = stochastic_tiling(&set, GridRect { i0: 0, j0: 0, width: 4, height: 1 }, 9)
            .unwrap();
        assert!(seam_score(&row, &set, 16).is_err());
        let (_, map) = tiny_tiles();
        assert!(seam_score(&map, &set, 7).is_err());
        assert!(seam_score(&map, &set, 48).is_err());
    }

    #[test]
    fn visible_seams_score_worse_than_matched_edges() {
        let (mut set, map) = tiny_tiles();
        // Paint each tile a distinct flat luminance: every boundary becomes
        // a hard step, which must score worse than flat-identical tiles.
        for (i, tile) in set.tiles.iter_mut().enumerate() {
            let v = i as f32 / 15.0;
            tile.composite_preview = ImageRgb::filled(24, 24, [v, v, v]);
        }
        let stepped = seam_score(&map, &set, 16).unwrap();
        for tile in &mut set.tiles {
            tile.composite_preview = ImageRgb::filled(24, 24, [0.4, 0.4, 0.4]);
        }
        let flat = seam_score(&map, &set, 16).unwrap();
        assert!(stepped > flat + 1e-6, "step seams {stepped} vs flat {flat}");
    }
}

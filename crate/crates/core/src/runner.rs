//! Experiment runner: each run kind drives the pipeline end to end, writes
//! RFC-4180 CSV tables, preview images, and a JSON run record into an output
//! directory. Every CSV row is re-derivable from the run record; tables whose
//! name starts with `timings` hold measured wall times and are the only
//! outputs exempt from byte-level determinism.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::active::{
    bootstrap_field, candidate_poses, evaluate_field, run_dav_loop, validation_poses,
    ActiveConfig, LoopTrace, SelectionStrategy,
};
use crate::error::{Error, Result};
use crate::field::{render_view, GaussianField, RenderParams, Splat};
use crate::harness::{seam_score, ExperimentConfig, SCHEMA_VERSION};
use crate::image::{GrayImage, ImageRgb};
use crate::lod::{
    build_lod_hierarchy, build_sorted_caches, select_ordering_and_render, LodHierarchy, TileCache,
};
use crate::math::mix_seed;
use crate::prior::{SyntheticPrior, LATENT_CHANNELS};
use crate::scene::{capture, generate_scene, Capture, Pose, PoseBounds};
use crate::tiling::{build_tile_set, stochastic_tiling, GridRect, TileSet, TilingMap, WangTile};
use crate::uncertainty::{
    estimate_cost, project_uncertainty_to_ground, score_views, EstimatorConfig,
};

pub const FIELD_FILE: &str = "field.json";
pub const GROUND_MAP_FILE: &str = "ground_map.json";
const GROUND_SALT: u64 = 0x96d0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Reconstruct,
    Tiles,
    Render,
    Ablate,
    Sweep,
    BudgetCurve,
}

impl RunKind {
    pub fn parse(text: &str) -> Result<RunKind> {
        match text {
            "reconstruct" => Ok(RunKind::Reconstruct),
            "tiles" => Ok(RunKind::Tiles),
            "render" => Ok(RunKind::Render),
            "ablate" => Ok(RunKind::Ablate),
            "sweep" => Ok(RunKind::Sweep),
            "budget-curve" | "budget_curve" => Ok(RunKind::BudgetCurve),
            other => Err(Error::Config(format!("unknown run kind {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Reconstruct => "reconstruct",
            RunKind::Tiles => "tiles",
            RunKind::Render => "render",
            RunKind::Ablate => "ablate",
            RunKind::Sweep => "sweep",
            RunKind::BudgetCurve => "budget_curve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    PDrop,
    Lambda,
    Tau,
}

impl SweepParam {
    pub fn parse(text: &str) -> Result<SweepParam> {
        match text {
            "k" => Ok(SweepParam::K),
            "pdrop" | "p_drop" => Ok(SweepParam::PDrop),
            "lambda" => Ok(SweepParam::Lambda),
            "tau" => Ok(SweepParam::Tau),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected k, pdrop, lambda, or tau"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::PDrop => "pdrop",
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
        }
    }

    pub fn grid(self) -> &'static [f64] {
        match self {
            SweepParam::K => &[10.0, 20.0, 30.0],
            SweepParam::PDrop => &[0.05, 0.15, 0.30],
            SweepParam::Lambda => &[0.01, 0.10, 1.00],
            SweepParam::Tau => &[0.3, 0.6, 0.9],
        }
    }
}

/// One named output table; rows are pre-formatted strings so the CSV on disk
/// and the copy in the run record cannot drift apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<const N: usize>(columns: [&str; N]) -> Table {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "table row width mismatch");
        self.rows.push(row);
    }

    /// RFC-4180: CRLF line endings, fields containing commas, quotes, or
    /// line breaks are quoted with doubled inner quotes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        write_csv_row(&mut out, &self.columns);
        for row in &self.rows {
            write_csv_row(&mut out, row);
        }
        out
    }
}

fn write_csv_row(out: &mut String, fields: &[String]) {
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if field.contains([',', '"', '\r', '\n']) {
            out.push('"');
            out.push_str(&field.replace('"', "\"\""));
            out.push('"');
        } else {
            out.push_str(field);
        }
    }
    out.push_str("\r\n");
}

/// Replayable record of one run: the exact config plus every output table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub kind: String,
    pub sweep_param: Option<String>,
    pub config: ExperimentConfig,
    pub tables: BTreeMap<String, Table>,
}

/// Runs one experiment kind into `out_dir`. On success every table lands as
/// `<name>.csv` next to `run_record.json`; on failure the partial outputs
/// stay and `error_manifest.json` describes what went wrong.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    kind: RunKind,
    out_dir: &Path,
    sweep_param: Option<SweepParam>,
) -> Result<RunRecord> {
    fs::create_dir_all(out_dir)?;
    match execute(cfg, kind, out_dir, sweep_param) {
        Ok(record) => {
            for (name, table) in &record.tables {
                fs::write(out_dir.join(format!("{name}.csv")), table.to_csv())?;
            }
            let json = serde_json::to_string_pretty(&record)
                .map_err(|e| Error::Format(format!("run record serialization failed: {e}")))?;
            fs::write(out_dir.join("run_record.json"), json)?;
            Ok(record)
        }
        Err(err) => {
            let manifest =
                serde_json::json!({ "kind": kind.as_str(), "message": err.to_string() });
            let body = serde_json::to_string_pretty(&manifest).unwrap_or_default();
            let _ = fs::write(out_dir.join("error_manifest.json"), body);
            Err(err)
        }
    }
}

fn execute(
    cfg: &ExperimentConfig,
    kind: RunKind,
    out_dir: &Path,
    sweep_param: Option<SweepParam>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if kind == RunKind::Sweep && sweep_param.is_none() {
        return Err(Error::Config("sweep runs need a parameter (k, pdrop, lambda, tau)".into()));
    }
    let tables = match kind {
        RunKind::Reconstruct => kind_reconstruct(cfg, out_dir)?,
        RunKind::Tiles => kind_tiles(cfg, out_dir)?,
        RunKind::Render => kind_render(cfg, out_dir)?,
        RunKind::Ablate => kind_ablate(cfg)?,
        RunKind::Sweep => kind_sweep(cfg, sweep_param.expect("checked above"))?,
        RunKind::BudgetCurve => kind_budget_curve(cfg)?,
    };
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        kind: kind.as_str().to_string(),
        sweep_param: sweep_param.map(|p| p.as_str().to_string()),
        config: cfg.clone(),
        tables,
    })
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything the downstream stages need from one reconstruction run.
struct ReconOutput {
    field: GaussianField,
    /// Final per-candidate uncertainty projected onto the ground plane; only
    /// built when a tiling stage follows.
    ground: Option<GrayImage>,
    extent: f64,
    trace: LoopTrace,
    validation_psnr: f64,
    validation_l1: f64,
    views_used: usize,
    /// Deterministic scoring cost over the whole loop.
    unc_cost: u64,
    times: Vec<(&'static str, f64)>,
}

fn run_reconstruction(
    cfg: &ExperimentConfig,
    scene_seed: u64,
    active: &ActiveConfig,
    estimator: &EstimatorConfig,
    with_ground: bool,
) -> Result<ReconOutput> {
    let prior_cfg = cfg.prior_config();
    let scene = generate_scene(scene_seed, (cfg.scene_grid, cfg.scene_grid), cfg.terrain_params())?;
    let mut prior = SyntheticPrior::from_config(scene.extent(), &prior_cfg)?;

    let t = Instant::now();
    let (field, captures) = bootstrap_field(&scene, active, &PoseBounds::default(), &mut prior)?;
    let bootstrap_ms = ms(t);

    let candidates = candidate_poses(active, &PoseBounds::default())?;
    let t = Instant::now();
    let (field, trace) =
        run_dav_loop(&scene, field, captures, &candidates, &mut prior, active, estimator)?;
    let loop_ms = ms(t);

    let t = Instant::now();
    let validation: Vec<Capture> = validation_poses(active.seed)?
        .into_iter()
        .map(|p| capture(&scene, p, active.capture_resolution))
        .collect::<Result<_>>()?;
    let (validation_l1, validation_psnr) =
        evaluate_field(&field, &validation, &RenderParams::default())?;
    let evaluate_ms = ms(t);

    let t = Instant::now();
    let ground = if with_ground {
        let indexed: Vec<(usize, Pose)> = candidates.iter().copied().enumerate().collect();
        let reports = score_views(
            &prior,
            &field,
            &indexed,
            mix_seed(active.seed, GROUND_SALT),
            estimator,
        )?;
        let pairs: Vec<(Pose, GrayImage)> =
            reports.into_iter().map(|r| (candidates[r.pose_index], r.spatial_map)).collect();
        Some(project_uncertainty_to_ground(&pairs, scene.extent(), cfg.ground_map_resolution)?)
    } else {
        None
    };
    let ground_ms = ms(t);

    let scored: usize = trace.records.iter().map(|r| r.scored_candidates).sum();
    let unc_cost = estimate_cost(
        scored,
        prior_cfg.members,
        LATENT_CHANNELS,
        prior_cfg.latent_height,
        prior_cfg.latent_width,
    );
    let score_ms: f64 = trace.records.iter().map(|r| r.score_ms).sum();
    let capture_ms: f64 = trace.records.iter().map(|r| r.capture_ms).sum();
    let refine_ms: f64 = trace.records.iter().map(|r| r.refine_ms).sum();
    let views_used = active.n_init + trace.captured.len();
    Ok(ReconOutput {
        field,
        ground,
        extent: scene.extent(),
        trace,
        validation_psnr,
        validation_l1,
        views_used,
        unc_cost,
        times: vec![
            ("bootstrap", bootstrap_ms),
            ("loop", loop_ms),
            ("score", score_ms),
            ("capture", capture_ms),
            ("refine", refine_ms),
            ("evaluate", evaluate_ms),
            ("ground_projection", ground_ms),
        ],
    })
}

#[derive(Serialize, Deserialize)]
struct GroundMapFile {
    width: usize,
    height: usize,
    extent: f64,
    data: Vec<f32>,
}

fn save_artifacts(out_dir: &Path, recon: &ReconOutput) -> Result<()> {
    let splats = serde_json::to_string(recon.field.splats())
        .map_err(|e| Error::Format(format!("field serialization failed: {e}")))?;
    fs::write(out_dir.join(FIELD_FILE), splats)?;
    let ground = recon.ground.as_ref().expect("artifact save needs a ground map");
    let file = GroundMapFile {
        width: ground.width,
        height: ground.height,
        extent: recon.extent,
        data: ground.data.clone(),
    };
    let body = serde_json::to_string(&file)
        .map_err(|e| Error::Format(format!("ground map serialization failed: {e}")))?;
    fs::write(out_dir.join(GROUND_MAP_FILE), body)?;
    Ok(())
}

/// Reuses a saved reconstruction from `out_dir` when both artifacts are
/// present; otherwise reconstructs and persists them for the next stage.
fn load_or_reconstruct(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    times: &mut Vec<(&'static str, f64)>,
) -> Result<(GaussianField, GrayImage, f64)> {
    let field_path = out_dir.join(FIELD_FILE);
    let ground_path = out_dir.join(GROUND_MAP_FILE);
    if field_path.exists() && ground_path.exists() {
        let splats: Vec<Splat> = serde_json::from_str(&fs::read_to_string(&field_path)?)
            .map_err(|e| Error::Format(format!("saved field is unreadable: {e}")))?;
        let mut field = GaussianField::new();
        field.insert_batch(splats)?;
        let file: GroundMapFile = serde_json::from_str(&fs::read_to_string(&ground_path)?)
            .map_err(|e| Error::Format(format!("saved ground map is unreadable: {e}")))?;
        if file.width * file.height != file.data.len() {
            return Err(Error::Format("saved ground map shape disagrees with its data".into()));
        }
        let ground = GrayImage { width: file.width, height: file.height, data: file.data };
        Ok((field, ground, file.extent))
    } else {
        let t = Instant::now();
        let recon = run_reconstruction(
            cfg,
            cfg.scene_seed,
            &cfg.active_config(),
            &cfg.estimator_config(),
            true,
        )?;
        save_artifacts(out_dir, &recon)?;
        times.push(("reconstruct", ms(t)));
        Ok((recon.field, recon.ground.expect("requested above"), recon.extent))
    }
}

fn times_table(times: &[(&'static str, f64)]) -> Table {
    let mut table = Table::new(["stage", "ms"]);
    for (stage, t) in times {
        table.push(vec![stage.to_string(), f3(*t)]);
    }
    table
}

fn write_ppm(out_dir: &Path, name: &str, image: &ImageRgb) -> Result<()> {
    let mut file = fs::File::create(out_dir.join(name))?;
    image.write_ppm(&mut file)
}

fn gray_to_rgb(gray: &GrayImage) -> ImageRgb {
    let max = gray.data.iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut img = ImageRgb::new(gray.width, gray.height);
    for y in 0..gray.height {
        for x in 0..gray.width {
            let v = gray.get(x, y) * scale;
            img.set(x, y, [v, v, v]);
        }
    }
    img
}

fn kind_reconstruct(cfg: &ExperimentConfig, out_dir: &Path) -> Result<BTreeMap<String, Table>> {
    let recon = run_reconstruction(
        cfg,
        cfg.scene_seed,
        &cfg.active_config(),
        &cfg.estimator_config(),
        true,
    )?;
    save_artifacts(out_dir, &recon)?;

    let mut trace = Table::new(["iteration", "pose_index", "score", "psnr_after"]);
    for rec in &recon.trace.records {
        for (idx, score) in rec.selected.iter().zip(&rec.scores) {
            trace.push(vec![
                rec.iteration.to_string(),
                idx.to_string(),
                f6(*score),
                f6(rec.validation_psnr),
            ]);
        }
    }

    let mut summary = Table::new([
        "seed",
        "views_used",
        "splats",
        "validation_psnr",
        "validation_l1",
        "uncertainty_cost",
        "monotonicity_violations",
    ]);
    summary.push(vec![
        cfg.seed.to_string(),
        recon.views_used.to_string(),
        recon.field.len().to_string(),
        f6(recon.validation_psnr),
        f6(recon.validation_l1),
        recon.unc_cost.to_string(),
        recon.trace.monotonicity_violations.to_string(),
    ]);

    let view = validation_poses(cfg.seed)?[0];
    let cam = view.camera(cfg.capture_resolution, cfg.capture_resolution);
    let image = render_view(&recon.field, &cam, None, &RenderParams::default())?.image;
    write_ppm(out_dir, "final_view.ppm", &image)?;
    let ground = recon.ground.as_ref().expect("reconstruct builds the ground map");
    write_ppm(out_dir, "uncertainty_map.ppm", &gray_to_rgb(ground))?;

    Ok(BTreeMap::from([
        ("loop_trace".to_string(), trace),
        ("summary".to_string(), summary),
        ("timings".to_string(), times_table(&recon.times)),
    ]))
}

fn tiling_region(cfg: &ExperimentConfig) -> GridRect {
    GridRect { i0: 0, j0: 0, width: cfg.tiling_width, height: cfg.tiling_height }
}

fn build_tiles_stage(
    cfg: &ExperimentConfig,
    field: &GaussianField,
    ground: &GrayImage,
    extent: f64,
    seed: u64,
) -> Result<(TileSet, TilingMap)> {
    let mut params = cfg.tile_params();
    params.seed = seed;
    let set = build_tile_set(field, ground, extent, cfg.tile_colors, &params)?;
    let map = stochastic_tiling(&set, tiling_region(cfg), seed)?;
    Ok((set, map))
}

fn kind_tiles(cfg: &ExperimentConfig, out_dir: &Path) -> Result<BTreeMap<String, Table>> {
    let mut times = Vec::new();
    let (field, ground, extent) = load_or_reconstruct(cfg, out_dir, &mut times)?;

    let t = Instant::now();
    let (set, map) = build_tiles_stage(cfg, &field, &ground, extent, cfg.seed)?;
    times.push(("tiles", ms(t)));
    let violations = map.violations(&set);

    let t = Instant::now();
    let seam = seam_score(&map, &set, cfg.crop_size)?;
    times.push(("seam_score", ms(t)));

    let mut tiles = Table::new([
        "tile_id",
        "north",
        "east",
        "south",
        "west",
        "u_bar",
        "splats",
        "seam_energy",
    ]);
    for tile in &set.tiles {
        tiles.push(vec![
            tile.tile_id.to_string(),
            tile.edge_codes.north.to_string(),
            tile.edge_codes.east.to_string(),
            tile.edge_codes.south.to_string(),
            tile.edge_codes.west.to_string(),
            f6(tile.u_bar),
            tile.splats.len().to_string(),
            f6(tile.seam.energy),
        ]);
    }

    let mut tiling = Table::new(["i", "j", "tile_id"]);
    for (&(i, j), &id) in &map.cells {
        tiling.push(vec![i.to_string(), j.to_string(), id.to_string()]);
    }

    let hot = set.tiles.iter().filter(|t| t.u_bar > cfg.tau).count();
    let mut metrics = Table::new([
        "seed",
        "cells",
        "tiles",
        "edge_violations",
        "seam_score",
        "hot_tiles",
    ]);
    metrics.push(vec![
        cfg.seed.to_string(),
        map.cells.len().to_string(),
        set.tiles.len().to_string(),
        violations.to_string(),
        f6(seam),
        hot.to_string(),
    ]);

    let mut manifest = fs::File::create(out_dir.join("manifest.json"))?;
    set.write_manifest(&mut manifest)?;
    for tile in &set.tiles {
        write_ppm(out_dir, &format!("tile_{:03}.ppm", tile.tile_id), &tile.composite_preview)?;
    }

    Ok(BTreeMap::from([
        ("tiles".to_string(), tiles),
        ("tiling".to_string(), tiling),
        ("metrics".to_string(), metrics),
        ("timings".to_string(), times_table(&times)),
    ]))
}

/// Hierarchy plus caches for one tile, splats re-centered so the render orbit
/// circles the tile instead of its corner.
fn tile_assets(
    tile: &WangTile,
    cfg: &ExperimentConfig,
) -> Result<(WangTile, LodHierarchy, TileCache)> {
    let mut centered = tile.clone();
    let half = tile.world_size / 2.0;
    for splat in &mut centered.splats {
        splat.position.x -= half;
        splat.position.y -= half;
    }
    let hierarchy = build_lod_hierarchy(&centered.splats, &cfg.lod_params())?;
    let cache = build_sorted_caches(&centered, &hierarchy, &cfg.cache_policy())?;
    Ok((centered, hierarchy, cache))
}

fn kind_render(cfg: &ExperimentConfig, out_dir: &Path) -> Result<BTreeMap<String, Table>> {
    let mut times = Vec::new();
    let (field, ground, extent) = load_or_reconstruct(cfg, out_dir, &mut times)?;
    let t = Instant::now();
    let (set, map) = build_tiles_stage(cfg, &field, &ground, extent, cfg.seed)?;
    times.push(("tiles", ms(t)));

    let t = Instant::now();
    let mut assets: BTreeMap<u32, (WangTile, LodHierarchy, TileCache)> = BTreeMap::new();
    for &id in map.cells.values() {
        if !assets.contains_key(&id) {
            assets.insert(id, tile_assets(&set.tiles[id as usize], cfg)?);
        }
    }
    times.push(("cache_build", ms(t)));

    let mut frames = Table::new([
        "frame", "i", "j", "tile_id", "bin", "levels", "weights", "fallback",
    ]);
    let mut timings_frames =
        Table::new(["frame", "sort_ms", "render_ms", "update_ms", "total_ms"]);
    let sample_every = (cfg.frames / 6).max(1);
    let region = tiling_region(cfg);
    let mut sorts = Vec::new();
    let mut renders = Vec::new();
    let mut updates = Vec::new();
    for f in 0..cfg.frames {
        let theta = std::f64::consts::TAU * f as f64 / cfg.frames as f64;
        // The orbit walks the region: the viewed cell follows the azimuth.
        let ci = region.i0
            + ((theta.cos() + 1.0) / 2.0 * (region.width - 1) as f64).round() as i64;
        let cj = region.j0
            + ((theta.sin() + 1.0) / 2.0 * (region.height - 1) as f64).round() as i64;
        let id = map
            .get(ci, cj)
            .ok_or_else(|| Error::Tiling { i: ci, j: cj, reason: "cell outside region".into() })?;
        let (tile, hierarchy, cache) = assets.get(&id).expect("asset built for every cell");
        let pose = Pose::new(cfg.render_elevation, theta, cfg.render_radius)?;
        let t = Instant::now();
        let frame = select_ordering_and_render(
            tile,
            cache,
            hierarchy,
            &pose,
            (cfg.render_resolution, cfg.render_resolution),
        )?;
        let total_ms = ms(t);
        let levels: Vec<String> = frame.levels.iter().map(|(l, _)| l.to_string()).collect();
        let weights: Vec<String> = frame.levels.iter().map(|(_, w)| f6(*w)).collect();
        frames.push(vec![
            f.to_string(),
            ci.to_string(),
            cj.to_string(),
            id.to_string(),
            frame.bin.to_string(),
            levels.join(";"),
            weights.join(";"),
            frame.timing.fallback.to_string(),
        ]);
        timings_frames.push(vec![
            f.to_string(),
            f3(frame.timing.sort_ms),
            f3(frame.timing.render_ms),
            f3(frame.timing.update_ms),
            f3(total_ms),
        ]);
        sorts.push(frame.timing.sort_ms);
        renders.push(frame.timing.render_ms);
        updates.push(frame.timing.update_ms);
        if f % sample_every == 0 {
            write_ppm(out_dir, &format!("frame_{f:04}.ppm"), &frame.image)?;
        }
    }

    let mut timings_summary = Table::new(["stat", "sort_ms", "render_ms", "update_ms"]);
    let (sm, ss) = mean_std(&sorts);
    let (rm, rs) = mean_std(&renders);
    let (um, us) = mean_std(&updates);
    timings_summary.push(vec!["mean".into(), f3(sm), f3(rm), f3(um)]);
    timings_summary.push(vec!["std".into(), f3(ss), f3(rs), f3(us)]);

    Ok(BTreeMap::from([
        ("frames".to_string(), frames),
        ("timings".to_string(), times_table(&times)),
        ("timings_frames".to_string(), timings_frames),
        ("timings_summary".to_string(), timings_summary),
    ]))
}

const VARIANTS: [&str; 6] =
    ["full", "w2_only", "image_grad", "single_forward", "no_gamma", "exhaustive"];

/// Applies one ablation variant to a copy of the config. The exhaustive
/// variant also rewrites the loop shape: every candidate is captured in one
/// pass with no scoring.
fn variant_config(cfg: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut v = cfg.clone();
    match variant {
        "full" => {}
        "w2_only" => v.lambda = 0.0,
        "image_grad" => v.score_mode = crate::uncertainty::ScoreMode::ImageSpace,
        "single_forward" => {
            // Smallest legal ensemble with the stochasticity turned off:
            // members collapse onto one forward pass.
            v.members = 2;
            v.noise_gain = 0.0;
            v.p_drop = 0.0;
        }
        "no_gamma" => v.gamma_enabled = false,
        "exhaustive" => {}
        other => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
    }
    v.validate()?;
    Ok(v)
}

/// Runs reconstruction, tiling, and the seam metric for one (variant, seed)
/// cell of a multi-seed experiment.
fn pipeline_for_seed(
    cfg: &ExperimentConfig,
    experiment_seed: u64,
    exhaustive: bool,
) -> Result<(ReconOutput, f64, f64)> {
    let scene_seed = mix_seed(cfg.scene_seed, experiment_seed);
    let loop_seed = mix_seed(cfg.seed, experiment_seed);
    let mut active = cfg.active_config();
    active.seed = loop_seed;
    if exhaustive {
        active.strategy = SelectionStrategy::Random;
        active.k = cfg.candidates;
        active.iterations = 1;
        active.budget = None;
    }
    let t = Instant::now();
    let recon = run_reconstruction(cfg, scene_seed, &active, &cfg.estimator_config(), true)?;
    let ground = recon.ground.as_ref().expect("requested above");
    let (set, map) = build_tiles_stage(cfg, &recon.field, ground, recon.extent, loop_seed)?;
    let seam = seam_score(&map, &set, cfg.crop_size)?;
    let pipeline_ms = ms(t);
    Ok((recon, seam, pipeline_ms))
}

fn kind_ablate(cfg: &ExperimentConfig) -> Result<BTreeMap<String, Table>> {
    let mut rows =
        Table::new(["variant", "seed", "psnr", "seam_score", "unc_cost", "views_used"]);
    let mut summary = Table::new([
        "variant",
        "psnr_mean",
        "psnr_std",
        "seam_mean",
        "seam_std",
    ]);
    let mut timings = Table::new([
        "variant",
        "seed",
        "score_ms",
        "capture_ms",
        "refine_ms",
        "pipeline_ms",
    ]);

    for variant in VARIANTS {
        let vcfg = variant_config(cfg, variant)?;
        let exhaustive = variant == "exhaustive";
        let mut psnrs = Vec::new();
        let mut seams = Vec::new();
        for s in 0..cfg.seeds as u64 {
            let (recon, seam, pipeline_ms) = pipeline_for_seed(&vcfg, s, exhaustive)?;
            // The exhaustive arm never scores, so its cost cell stays empty
            // instead of pretending a zero-cost estimator ran.
            let cost = if exhaustive { String::new() } else { recon.unc_cost.to_string() };
            rows.push(vec![
                variant.to_string(),
                s.to_string(),
                f6(recon.validation_psnr),
                f6(seam),
                cost,
                recon.views_used.to_string(),
            ]);
            let stage = |name: &str| {
                recon.times.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).unwrap_or(0.0)
            };
            timings.push(vec![
                variant.to_string(),
                s.to_string(),
                f3(stage("score")),
                f3(stage("capture")),
                f3(stage("refine")),
                f3(pipeline_ms),
            ]);
            psnrs.push(recon.validation_psnr);
            seams.push(seam);
        }
        let (pm, ps) = mean_std(&psnrs);
        let (sm, ss) = mean_std(&seams);
        summary.push(vec![variant.to_string(), f6(pm), f6(ps), f6(sm), f6(ss)]);
    }

    Ok(BTreeMap::from([
        ("ablation".to_string(), rows),
        ("ablation_summary".to_string(), summary),
        ("timings_ablation".to_string(), timings),
    ]))
}

/// Applies one sweep value. The capture-per-iteration sweep clamps to the
/// candidate pool and truncates iterations so the pool never runs dry.
fn sweep_config(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut v = cfg.clone();
    match param {
        SweepParam::K => {
            let k = (value as usize).min(cfg.candidates).max(1);
            v.k = k;
            v.iterations = cfg.iterations.min((cfg.candidates / k).max(1));
        }
        SweepParam::PDrop => v.p_drop = value,
        SweepParam::Lambda => v.lambda = value,
        SweepParam::Tau => v.tau = value,
    }
    v.validate()?;
    Ok(v)
}

fn sweep_value_label(param: SweepParam, value: f64) -> String {
    match param {
        SweepParam::K => format!("{}", value as usize),
        _ => format!("{value:.2}"),
    }
}

fn kind_sweep(cfg: &ExperimentConfig, param: SweepParam) -> Result<BTreeMap<String, Table>> {
    let mut rows = Table::new([
        "param",
        "value",
        "seed",
        "psnr",
        "seam_score",
        "unc_cost",
        "hot_tiles",
    ]);
    let mut summary = Table::new([
        "param",
        "value",
        "psnr_mean",
        "seam_mean",
        "unc_cost_mean",
    ]);
    let mut timings = Table::new(["param", "value", "seed", "score_ms", "pipeline_ms"]);

    for &value in param.grid() {
        let vcfg = sweep_config(cfg, param, value)?;
        let label = sweep_value_label(param, value);
        let mut psnrs = Vec::new();
        let mut seams = Vec::new();
        let mut costs = Vec::new();
        for s in 0..cfg.seeds as u64 {
            let scene_seed = mix_seed(vcfg.scene_seed, s);
            let loop_seed = mix_seed(vcfg.seed, s);
            let mut active = vcfg.active_config();
            active.seed = loop_seed;
            let t = Instant::now();
            let recon =
                run_reconstruction(&vcfg, scene_seed, &active, &vcfg.estimator_config(), true)?;
            let ground = recon.ground.as_ref().expect("requested above");
            let (set, map) = build_tiles_stage(&vcfg, &recon.field, ground, recon.extent, loop_seed)?;
            let seam = seam_score(&map, &set, vcfg.crop_size)?;
            let pipeline_ms = ms(t);
            let hot = set.tiles.iter().filter(|t| t.u_bar > vcfg.tau).count();
            rows.push(vec![
                param.as_str().to_string(),
                label.clone(),
                s.to_string(),
                f6(recon.validation_psnr),
                f6(seam),
                recon.unc_cost.to_string(),
                hot.to_string(),
            ]);
            let score_ms =
                recon.times.iter().find(|(n, _)| *n == "score").map(|(_, t)| *t).unwrap_or(0.0);
            timings.push(vec![
                param.as_str().to_string(),
                label.clone(),
                s.to_string(),
                f3(score_ms),
                f3(pipeline_ms),
            ]);
            psnrs.push(recon.validation_psnr);
            seams.push(seam);
            costs.push(recon.unc_cost as f64);
        }
        let (pm, _) = mean_std(&psnrs);
        let (sm, _) = mean_std(&seams);
        let (cm, _) = mean_std(&costs);
        summary.push(vec![param.as_str().to_string(), label, f6(pm), f6(sm), f6(cm)]);
    }

    Ok(BTreeMap::from([
        ("sweep".to_string(), rows),
        ("sweep_summary".to_string(), summary),
        ("timings_sweep".to_string(), timings),
    ]))
}

fn kind_budget_curve(cfg: &ExperimentConfig) -> Result<BTreeMap<String, Table>> {
    let mut rows = Table::new(["arm", "budget", "seed", "views_used", "psnr"]);
    let mut timings = Table::new(["arm", "seed", "pipeline_ms"]);
    // (arm, budget) -> psnrs across seeds, in first-seen order.
    let mut groups: Vec<((String, usize), Vec<f64>)> = Vec::new();
    let mut push_group = |arm: &str, budget: usize, psnr: f64| {
        let key = (arm.to_string(), budget);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, xs)) => xs.push(psnr),
            None => groups.push((key, vec![psnr])),
        }
    };

    for (arm, strategy) in
        [("active", SelectionStrategy::Uncertainty), ("random", SelectionStrategy::Random)]
    {
        for s in 0..cfg.seeds as u64 {
            let scene_seed = mix_seed(cfg.scene_seed, s);
            let mut active = cfg.active_config();
            active.seed = mix_seed(cfg.seed, s);
            active.strategy = strategy;
            let t = Instant::now();
            let recon =
                run_reconstruction(cfg, scene_seed, &active, &cfg.estimator_config(), false)?;
            timings.push(vec![arm.to_string(), s.to_string(), f3(ms(t))]);
            // The trace already evaluates after every iteration, so one run
            // yields the whole curve.
            for (t_idx, rec) in recon.trace.records.iter().enumerate() {
                let budget = (t_idx + 1) * cfg.k;
                let views = cfg.n_init + budget;
                rows.push(vec![
                    arm.to_string(),
                    budget.to_string(),
                    s.to_string(),
                    views.to_string(),
                    f6(rec.validation_psnr),
                ]);
                push_group(arm, budget, rec.validation_psnr);
            }
        }
    }

    for s in 0..cfg.seeds as u64 {
        let scene_seed = mix_seed(cfg.scene_seed, s);
        let mut active = cfg.active_config();
        active.seed = mix_seed(cfg.seed, s);
        active.strategy = SelectionStrategy::Random;
        active.k = cfg.candidates;
        active.iterations = 1;
        active.budget = None;
        let t = Instant::now();
        let recon = run_reconstruction(cfg, scene_seed, &active, &cfg.estimator_config(), false)?;
        timings.push(vec!["exhaustive".to_string(), s.to_string(), f3(ms(t))]);
        rows.push(vec![
            "exhaustive".to_string(),
            cfg.candidates.to_string(),
            s.to_string(),
            recon.views_used.to_string(),
            f6(recon.validation_psnr),
        ]);
        push_group("exhaustive", cfg.candidates, recon.validation_psnr);
    }

    let mut summary = Table::new(["arm", "budget", "psnr_mean", "psnr_std"]);
    for ((arm, budget), psnrs) in &groups {
        let (m, sd) = mean_std(psnrs);
        summary.push(vec![arm.clone(), budget.to_string(), f6(m), f6(sd)]);
    }

    Ok(BTreeMap::from([
        ("curve".to_string(), rows),
        ("curve_summary".to_string(), summary),
        ("timings_budget".to_string(), timings),
    ]))
}

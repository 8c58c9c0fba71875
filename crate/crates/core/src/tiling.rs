//! Wang tiles over the reconstructed field: every edge code owns one strip of
//! field content, tiles composite a per-tile center region with the four
//! strips through seam optimization, and a seeded edge-hash lattice tiles the
//! plane so that shared edges always agree without a neighbor lookup.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{rasterize, GaussianField, RenderEntry, RenderParams, Splat};
use crate::image::{GrayImage, ImageRgb};
use crate::math::{mix_seed, mix_seed3};
use crate::seam::{build_tile_patch, segment_labels, PatchSource, SeamResult};

const H_EDGE_SALT: u64 = 0x7e09;
const V_EDGE_SALT: u64 = 0x7e0a;
const CENTER_SALT: u64 = 0x7e0b;
const STRIP_SALT: u64 = 0x7e0c;
/// Palette bins for the segmentation stand-in used during tile assembly.
const SEGMENT_BINS: usize = 4;

/// Axis-aligned world rectangle on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldRect {
    pub min_x: f64,
    pub min_y: f64,
    pub size_x: f64,
    pub size_y: f64,
}

impl WorldRect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x
            && x < self.min_x + self.size_x
            && y >= self.min_y
            && y < self.min_y + self.size_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileParams {
    /// Tile image resolution (square).
    pub resolution: usize,
    /// Overlap band width in pixels.
    pub overlap: usize,
    /// World-space side length of one tile.
    pub tile_world: f64,
    pub seed: u64,
    /// When false, seams use a fixed balance weight instead of the tile's
    /// normalized uncertainty. The stored uncertainty stays truthful.
    pub gamma_from_uncertainty: bool,
}

impl Default for TileParams {
    fn default() -> TileParams {
        TileParams {
            resolution: 128,
            overlap: 16,
            tile_world: 4.0,
            seed: 0,
            gamma_from_uncertainty: true,
        }
    }
}

impl TileParams {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config("tile resolution below 8".into()));
        }
        if self.overlap < 2 || 2 * self.overlap > self.resolution {
            return Err(Error::Config("overlap must be in [2, resolution/2]".into()));
        }
        if !(self.tile_world > 0.0 && self.tile_world.is_finite()) {
            return Err(Error::Config("tile world size must be positive".into()));
        }
        Ok(())
    }

    /// World width of one overlap band.
    pub fn band_world(&self) -> f64 {
        self.tile_world * self.overlap as f64 / self.resolution as f64
    }
}

/// Orthographic top-down projection of splats over a world rectangle. Mirrors
/// the perspective path: dilated covariance, inverse stored, radius from the
/// largest eigenvalue. Depth is negated height so higher splats composite
/// first.
pub fn project_topdown(
    splats: &[Splat],
    rect: &WorldRect,
    width: usize,
    height: usize,
    params: &RenderParams,
) -> Vec<RenderEntry> {
    let sx = width as f64 / rect.size_x;
    let sy = height as f64 / rect.size_y;
    let mut entries = Vec::new();
    for (i, s) in splats.iter().enumerate() {
        let u = (s.position.x - rect.min_x) * sx;
        let v = (s.position.y - rect.min_y) * sy;
        let cov3 = s.covariance();
        let a = cov3.m[0][0] * sx * sx + params.dilation;
        let b = cov3.m[0][1] * sx * sy;
        let c = cov3.m[1][1] * sy * sy + params.dilation;
        let det = a * c - b * b;
        if det <= 1e-12 || !det.is_finite() {
            continue;
        }
        let lam_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let radius = (params.q_cut * lam_max).sqrt() + 1.0;
        if u + radius < 0.0 || u - radius > width as f64 || v + radius < 0.0 || v - radius > height as f64
        {
            continue;
        }
        let inv = (c / det, -b / det, a / det);
        entries.push(RenderEntry {
            splat_index: i as u32,
            mean: (u as f32, v as f32),
            inv_cov: (inv.0 as f32, inv.1 as f32, inv.2 as f32),
            depth: -s.position.z as f32,
            color: [s.color[0] as f32, s.color[1] as f32, s.color[2] as f32],
            alpha: s.opacity as f32,
            radius: radius as f32,
        });
    }
    entries
}

/// Top-down orthographic render of the field over a world rectangle.
pub fn render_topdown(
    field: &GaussianField,
    rect: &WorldRect,
    width: usize,
    height: usize,
    params: &RenderParams,
) -> ImageRgb {
    let mut entries = project_topdown(field.splats(), rect, width, height, params);
    crate::field::sort_entries_by_depth(&mut entries);
    rasterize(&entries, width, height, params.q_cut as f32).image
}

/// Edge colors of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCodes {
    pub north: u8,
    pub east: u8,
    pub south: u8,
    pub west: u8,
}

#[derive(Debug, Clone)]
pub struct WangTile {
    pub tile_id: u32,
    pub edge_codes: EdgeCodes,
    /// Splats in tile-local coordinates (xy within [0, tile_world]).
    pub splats: Vec<Splat>,
    pub composite_preview: ImageRgb,
    pub seam: SeamResult,
    /// Mean patch uncertainty, min-max normalized across the set.
    pub u_bar: f64,
    pub world_size: f64,
}

/// Returns the tile's normalized mean uncertainty.
pub fn tile_uncertainty(tile: &WangTile) -> f64 {
    tile.u_bar
}

#[derive(Debug, Clone)]
pub struct TileSet {
    pub tiles: Vec<WangTile>,
    pub k: usize,
    pub complete: bool,
    /// Strip renders per horizontal edge code (tile width x 2*overlap).
    pub strips_h: Vec<ImageRgb>,
    /// Strip renders per vertical edge code (2*overlap x tile height).
    pub strips_v: Vec<ImageRgb>,
    pub params: TileParams,
}

impl TileSet {
    /// Tile id for an edge-code tuple; index arithmetic when complete.
    pub fn tile_by_codes(&self, codes: EdgeCodes) -> Option<u32> {
        let k = self.k as u32;
        if self.complete {
            let id = ((codes.north as u32 * k + codes.east as u32) * k + codes.south as u32) * k
                + codes.west as u32;
            return (self.tiles.get(id as usize)?.edge_codes == codes).then_some(id);
        }
        self.tiles.iter().position(|t| t.edge_codes == codes).map(|i| i as u32)
    }

    /// Tiles compatible with optional west/north neighbor constraints: the
    /// candidate's west code must equal the west neighbor's east code, and
    /// its north code the north neighbor's south code.
    pub fn matching_tiles(&self, west: Option<u8>, north: Option<u8>) -> Vec<u32> {
        self.tiles
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                west.map_or(true, |w| t.edge_codes.west == w)
                    && north.map_or(true, |n| t.edge_codes.north == n)
            })
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Manifest of tile metadata as pretty JSON.
    pub fn write_manifest<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            tile_id: u32,
            edge_codes: &'a EdgeCodes,
            u_bar: f64,
            splat_count: usize,
            seam_energy: f64,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            k: usize,
            complete: bool,
            tile_world: f64,
            resolution: usize,
            overlap: usize,
            tiles: Vec<Row<'a>>,
        }
        let manifest = Manifest {
            k: self.k,
            complete: self.complete,
            tile_world: self.params.tile_world,
            resolution: self.params.resolution,
            overlap: self.params.overlap,
            tiles: self
                .tiles
                .iter()
                .map(|t| Row {
                    tile_id: t.tile_id,
                    edge_codes: &t.edge_codes,
                    u_bar: t.u_bar,
                    splat_count: t.splats.len(),
                    seam_energy: t.seam.energy,
                })
                .collect(),
        };
        serde_json::to_writer_pretty(out, &manifest)
            .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))
    }
}

/// Deterministic sub-rectangle of the field footprint for a hashed key.
fn hashed_rect(bounds: (f64, f64, f64, f64), size_x: f64, size_y: f64, hash: u64) -> WorldRect {
    let (min_x, min_y, max_x, max_y) = bounds;
    let span_x = (max_x - min_x - size_x).max(0.0);
    let span_y = (max_y - min_y - size_y).max(0.0);
    let fx = (hash >> 32) as f64 / 2f64.powi(32);
    let fy = (hash & 0xffff_ffff) as f64 / 2f64.powi(32);
    WorldRect { min_x: min_x + fx * span_x, min_y: min_y + fy * span_y, size_x, size_y }
}

fn mean_over_rect(map: &GrayImage, extent: f64, rect: &WorldRect) -> f64 {
    // Ground map covers [-extent/2, extent/2]^2.
    let half = extent / 2.0;
    let to_px = |v: f64, n: usize| (((v + half) / extent) * n as f64).floor() as isize;
    let x0 = to_px(rect.min_x, map.width).clamp(0, map.width as isize - 1) as usize;
    let x1 = to_px(rect.min_x + rect.size_x, map.width).clamp(0, map.width as isize - 1) as usize;
    let y0 = to_px(rect.min_y, map.height).clamp(0, map.height as isize - 1) as usize;
    let y1 = to_px(rect.min_y + rect.size_y, map.height).clamp(0, map.height as isize - 1) as usize;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            sum += map.get(x, y) as f64;
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

struct StripSources {
    images_h: Vec<ImageRgb>,
    images_v: Vec<ImageRgb>,
    rects_h: Vec<WorldRect>,
    rects_v: Vec<WorldRect>,
}

/// Builds the complete K^4 tile set. Each horizontal/vertical edge code owns
/// one strip region of the field; every tile renders its own hashed center
/// region and composites the four code strips over it with seam optimization.
/// Per-tile uncertainty is the ground-map mean over the center region,
/// min-max normalized across the set.
pub fn build_tile_set(
    field: &GaussianField,
    ground: &GrayImage,
    ground_extent: f64,
    k: usize,
    params: &TileParams,
) -> Result<TileSet> {
    params.validate()?;
    if field.is_empty() {
        return Err(Error::Config("cannot tile an empty field".into()));
    }
    if k < 2 {
        return Err(Error::Config("tile sets need at least two edge colors".into()));
    }
    if k > 8 {
        return Err(Error::Config("more than 8 edge colors is unsupported".into()));
    }
    let b = field.bounds();
    let bounds = (b.min.x, b.min.y, b.max.x, b.max.y);
    let tw = params.tile_world;
    if bounds.2 - bounds.0 < tw || bounds.3 - bounds.1 < tw {
        return Err(Error::Config(format!(
            "field footprint {:.2}x{:.2} is too small to sample {} distinct strips of {:.2} world units",
            bounds.2 - bounds.0,
            bounds.3 - bounds.1,
            4 * k,
            tw
        )));
    }

    let res = params.resolution;
    let ow = params.overlap;
    let bw = params.band_world();
    let render = RenderParams::default();

    // One strip region per (axis, code); the band boundary runs through the
    // strip's center line so both sides of a shared edge read adjacent rows.
    let strip_rect = |axis: u64, code: usize| {
        let hash = mix_seed3(params.seed, STRIP_SALT ^ axis, code as u64);
        if axis == 0 {
            hashed_rect(bounds, tw, 2.0 * bw, hash)
        } else {
            hashed_rect(bounds, 2.0 * bw, tw, hash)
        }
    };
    let strips = StripSources {
        images_h: (0..k)
            .map(|c| render_topdown(field, &strip_rect(0, c), res, 2 * ow, &render))
            .collect(),
        images_v: (0..k)
            .map(|c| render_topdown(field, &strip_rect(1, c), 2 * ow, res, &render))
            .collect(),
        rects_h: (0..k).map(|c| strip_rect(0, c)).collect(),
        rects_v: (0..k).map(|c| strip_rect(1, c)).collect(),
    };

    let count = k * k * k * k;
    let raw_bars: Vec<f64> = (0..count)
        .map(|id| {
            let rect = hashed_rect(bounds, tw, tw, mix_seed3(params.seed, CENTER_SALT, id as u64));
            mean_over_rect(ground, ground_extent, &rect)
        })
        .collect();
    let lo = raw_bars.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw_bars.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalize = |v: f64| {
        if hi - lo <= 1e-12 {
            v.clamp(0.0, 1.0)
        } else {
            (v - lo) / (hi - lo)
        }
    };

    let tiles: Result<Vec<WangTile>> = (0..count as u32)
        .into_par_iter()
        .map(|id| build_one_tile(field, &strips, k, params, id, normalize(raw_bars[id as usize])))
        .collect();
    Ok(TileSet {
        tiles: tiles?,
        k,
        complete: true,
        strips_h: strips.images_h,
        strips_v: strips.images_v,
        params: params.clone(),
    })
}

fn codes_of(id: u32, k: usize) -> EdgeCodes {
    let k = k as u32;
    EdgeCodes {
        north: (id / (k * k * k) % k) as u8,
        east: (id / (k * k) % k) as u8,
        south: (id / k % k) as u8,
        west: (id % k) as u8,
    }
}

fn build_one_tile(
    field: &GaussianField,
    strips: &StripSources,
    k: usize,
    params: &TileParams,
    id: u32,
    u_bar: f64,
) -> Result<WangTile> {
    let res = params.resolution;
    let ow = params.overlap;
    let tw = params.tile_world;
    let bw = params.band_world();
    let render = RenderParams::default();
    let codes = codes_of(id, k);
    let b = field.bounds();
    let bounds = (b.min.x, b.min.y, b.max.x, b.max.y);
    let center_rect = hashed_rect(bounds, tw, tw, mix_seed3(params.seed, CENTER_SALT, id as u64));
    let center_img = render_topdown(field, &center_rect, res, res, &render);

    // Full-frame strip sources: the band rows/cols come from the strip render
    // (outer half beyond the shared center line), everything else falls back
    // to the center so seam costs stay meaningful at band borders.
    let mut source_imgs: Vec<ImageRgb> = vec![center_img.clone(); 5];
    for y in 0..ow {
        for x in 0..res {
            // North band reads the strip's lower half, south its upper half.
            source_imgs[1].set(x, y, strips.images_h[codes.north as usize].get(x, ow + y));
            source_imgs[3].set(x, res - ow + y, strips.images_h[codes.south as usize].get(x, y));
        }
    }
    for y in 0..res {
        for x in 0..ow {
            source_imgs[2].set(res - ow + x, y, strips.images_v[codes.east as usize].get(x, y));
            source_imgs[4].set(x, y, strips.images_v[codes.west as usize].get(ow + x, y));
        }
    }
    let sources: Vec<PatchSource> = source_imgs
        .into_iter()
        .map(|image| -> Result<PatchSource> {
            let labels = segment_labels(&image, SEGMENT_BINS)?;
            Ok(PatchSource { image, labels })
        })
        .collect::<Result<_>>()?;
    let strip_sources: [PatchSource; 4] =
        [sources[1].clone(), sources[2].clone(), sources[3].clone(), sources[4].clone()];
    let gamma_u = if params.gamma_from_uncertainty { u_bar } else { 0.5 };
    let patch = build_tile_patch(&sources[0], &strip_sources, ow, gamma_u)?;

    // Gather splats per source region, map them into the tile frame, and keep
    // each one only when the seam assigns its pixel to that source.
    let px_per_world = res as f64 / tw;
    let mut local = Vec::new();
    let mut keep = |splat: &Splat, sx: f64, sy: f64, label: u32| {
        let lx = splat.position.x + sx;
        let ly = splat.position.y + sy;
        if lx < 0.0 || lx >= tw || ly < 0.0 || ly >= tw {
            return;
        }
        let px = ((lx * px_per_world) as usize).min(res - 1);
        let py = ((ly * px_per_world) as usize).min(res - 1);
        if patch.seam.label(px, py) == label {
            let mut s = *splat;
            s.position.x = lx;
            s.position.y = ly;
            local.push(s);
        }
    };
    for s in field.splats() {
        let (x, y) = (s.position.x, s.position.y);
        if center_rect.contains(x, y) {
            keep(s, -center_rect.min_x, -center_rect.min_y, 0);
        }
        // Strip halves map onto their band: the north band aligns the strip
        // center line with the tile's top edge, and so on per side.
        let nh = &strips.rects_h[codes.north as usize];
        if x >= nh.min_x && x < nh.min_x + tw && y >= nh.min_y + bw && y < nh.min_y + 2.0 * bw {
            keep(s, -nh.min_x, -(nh.min_y + bw), 1);
        }
        let sh = &strips.rects_h[codes.south as usize];
        if x >= sh.min_x && x < sh.min_x + tw && y >= sh.min_y && y < sh.min_y + bw {
            keep(s, -sh.min_x, tw - bw - sh.min_y, 3);
        }
        let ev = &strips.rects_v[codes.east as usize];
        if y >= ev.min_y && y < ev.min_y + tw && x >= ev.min_x && x < ev.min_x + bw {
            keep(s, tw - bw - ev.min_x, -ev.min_y, 2);
        }
        let wv = &strips.rects_v[codes.west as usize];
        if y >= wv.min_y && y < wv.min_y + tw && x >= wv.min_x + bw && x < wv.min_x + 2.0 * bw {
            keep(s, -(wv.min_x + bw), -wv.min_y, 4);
        }
    }

    Ok(WangTile {
        tile_id: id,
        edge_codes: codes,
        splats: local,
        composite_preview: patch.composite,
        seam: patch.seam,
        u_bar,
        world_size: tw,
    })
}

/// Grid region to tile: cells (i0..i0+width, j0..j0+height).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRect {
    pub i0: i64,
    pub j0: i64,
    pub width: usize,
    pub height: usize,
}

/// Realized tiling: sparse cell -> tile id map plus the seed that generated
/// it. Any cell is recomputable independently, so disjoint regions agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingMap {
    pub cells: BTreeMap<(i64, i64), u32>,
    pub seed: u64,
}

impl TilingMap {
    pub fn get(&self, i: i64, j: i64) -> Option<u32> {
        self.cells.get(&(i, j)).copied()
    }

    /// CSV rows (i, j, tile_id) in scanline order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "i,j,tile_id\r\n")?;
        for (&(i, j), &id) in &self.cells {
            write!(out, "{},{},{}\r\n", i, j, id)?;
        }
        Ok(())
    }

    /// Post-hoc edge-matching check: counts realized neighbor pairs whose
    /// shared codes disagree.
    pub fn violations(&self, tile_set: &TileSet) -> usize {
        let mut bad = 0;
        for (&(i, j), &id) in &self.cells {
            let codes = tile_set.tiles[id as usize].edge_codes;
            if let Some(east) = self.get(i + 1, j) {
                if tile_set.tiles[east as usize].edge_codes.west != codes.east {
                    bad += 1;
                }
            }
            if let Some(south) = self.get(i, j + 1) {
                if tile_set.tiles[south as usize].edge_codes.north != codes.south {
                    bad += 1;
                }
            }
        }
        bad
    }
}

/// Code of the horizontal lattice edge above cell (i, j).
fn h_edge(seed: u64, k: usize, i: i64, j: i64) -> u8 {
    (mix_seed3(mix_seed(seed, H_EDGE_SALT), i as u64, j as u64) % k as u64) as u8
}

/// Code of the vertical lattice edge left of cell (i, j).
fn v_edge(seed: u64, k: usize, i: i64, j: i64) -> u8 {
    (mix_seed3(mix_seed(seed, V_EDGE_SALT), i as u64, j as u64) % k as u64) as u8
}

/// Edge codes the lattice assigns to cell (i, j).
pub fn cell_codes(seed: u64, k: usize, i: i64, j: i64) -> EdgeCodes {
    EdgeCodes {
        north: h_edge(seed, k, i, j),
        south: h_edge(seed, k, i, j + 1),
        west: v_edge(seed, k, i, j),
        east: v_edge(seed, k, i + 1, j),
    }
}

/// Tiles a rectangular region. Every lattice edge hashes to a code, so each
/// cell's tile is a pure function of (seed, i, j); adjacent cells share the
/// hash of their common edge and therefore always match. The draw is uniform
/// over the K^2 tiles compatible with the already-determined west and north
/// codes.
pub fn stochastic_tiling(tile_set: &TileSet, region: GridRect, seed: u64) -> Result<TilingMap> {
    if region.width == 0 || region.height == 0 {
        return Err(Error::Config("tiling region must be nonempty".into()));
    }
    let mut cells = BTreeMap::new();
    for j in region.j0..region.j0 + region.height as i64 {
        for i in region.i0..region.i0 + region.width as i64 {
            let codes = cell_codes(seed, tile_set.k, i, j);
            let id = tile_set.tile_by_codes(codes).ok_or(Error::Tiling {
                i,
                j,
                reason: format!(
                    "no tile with codes (n={}, e={}, s={}, w={})",
                    codes.north, codes.east, codes.south, codes.west
                ),
            })?;
            cells.insert((i, j), id);
        }
    }
    Ok(TilingMap { cells, seed })
}

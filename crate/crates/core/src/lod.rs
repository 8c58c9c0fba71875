//! Six-level splat hierarchy with a continuous distance blend, plus per-tile
//! caches of pre-sorted view-direction orderings whose depth follows tile
//! uncertainty.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    project_entries, rasterize, sort_entries_by_depth, RenderEntry, RenderParams, Splat,
};
use crate::image::ImageRgb;
use crate::math::{vec3, Vec3};
use crate::scene::Pose;
use crate::tiling::WangTile;

const MERGED_ALPHA_CEIL: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LodParams {
    pub levels: usize,
    /// Target count divisor between consecutive levels.
    pub reduction_ratio: f64,
    /// Switch distance of the finest level.
    pub threshold_base: f64,
    /// Spacing between consecutive switch distances.
    pub threshold_step: f64,
    /// Blend bandwidth around each switch distance.
    pub delta: f64,
}

impl Default for LodParams {
    fn default() -> LodParams {
        LodParams {
            levels: 6,
            reduction_ratio: 4.0,
            threshold_base: 6.0,
            threshold_step: 4.0,
            delta: 1.0,
        }
    }
}

impl LodParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config("hierarchies need at least two levels".into()));
        }
        if !(self.reduction_ratio > 1.0) {
            return Err(Error::Config("reduction ratio must exceed 1".into()));
        }
        if !(self.threshold_base > 0.0 && self.threshold_step > 0.0) {
            return Err(Error::Config("switch distances must be positive and increasing".into()));
        }
        if !(self.delta > 0.0 && 2.0 * self.delta < self.threshold_step) {
            return Err(Error::Config(
                "blend bandwidth must satisfy 0 < 2*delta < threshold gap".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LodLevel {
    pub splats: Vec<Splat>,
    /// Mean of the per-splat average axis scale.
    pub mean_scale: f64,
}

#[derive(Debug, Clone)]
pub struct LodHierarchy {
    /// Level 0 is the finest.
    pub levels: Vec<LodLevel>,
    /// Switch distance per level, strictly increasing.
    pub thresholds: Vec<f64>,
    pub delta: f64,
}

impl LodHierarchy {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.splats.len()).collect()
    }
}

fn mean_scale(splats: &[Splat]) -> f64 {
    let sum: f64 = splats.iter().map(|s| (s.scale.x + s.scale.y + s.scale.z) / 3.0).sum();
    sum / splats.len().max(1) as f64
}

trait AxisAccess {
    fn axis(&self, i: usize) -> f64;
}

impl AxisAccess for Vec3 {
    fn axis(&self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

fn grid_clusters(splats: &[Splat], origin: Vec3, cell: f64) -> Vec<Vec<usize>> {
    let mut clusters: std::collections::BTreeMap<(i64, i64, i64), Vec<usize>> = Default::default();
    for (i, s) in splats.iter().enumerate() {
        let key = (
            ((s.position.x - origin.x) / cell).floor() as i64,
            ((s.position.y - origin.y) / cell).floor() as i64,
            ((s.position.z - origin.z) / cell).floor() as i64,
        );
        clusters.entry(key).or_default().push(i);
    }
    clusters.into_values().collect()
}

/// Splits the most populous clusters at the median of their widest axis
/// until the count reaches `target`. Deterministic: ties go to the cluster
/// holding the lowest splat index.
fn split_to_target(splats: &[Splat], mut clusters: Vec<Vec<usize>>, target: usize) -> Vec<Vec<usize>> {
    while clusters.len() < target {
        let Some(pick) = (0..clusters.len())
            .filter(|&i| clusters[i].len() > 1)
            .max_by(|&a, &b| {
                clusters[a].len().cmp(&clusters[b].len()).then(clusters[b][0].cmp(&clusters[a][0]))
            })
        else {
            break;
        };
        let mut members = std::mem::take(&mut clusters[pick]);
        let mut spread = [0.0f64; 3];
        for axis in 0..3 {
            let coords = members.iter().map(|&i| splats[i].position.axis(axis));
            let lo = coords.clone().fold(f64::INFINITY, f64::min);
            let hi = coords.fold(f64::NEG_INFINITY, f64::max);
            spread[axis] = hi - lo;
        }
        let axis = (0..3).max_by(|&a, &b| spread[a].total_cmp(&spread[b])).unwrap();
        members.sort_by(|&a, &b| {
            splats[a].position.axis(axis).total_cmp(&splats[b].position.axis(axis)).then(a.cmp(&b))
        });
        let tail = members.split_off(members.len() / 2);
        clusters[pick] = members;
        clusters.push(tail);
    }
    clusters
}

/// Per-level target counts. Each step wants the largest count at or under
/// count/ratio whose own successors can keep the reduction inside the
/// [ratio-1, ratio+1] band; when no such chain exists (tiny inputs) the plain
/// capped count is used.
fn plan_counts(n0: usize, levels: usize, ratio: f64) -> Vec<usize> {
    fn feasible(
        m: usize,
        steps: usize,
        ratio: f64,
        memo: &mut std::collections::HashMap<(usize, usize), Option<usize>>,
    ) -> Option<usize> {
        if steps == 0 {
            return Some(m);
        }
        if let Some(&hit) = memo.get(&(m, steps)) {
            return hit;
        }
        let cap = (m as f64 / ratio).floor() as usize;
        let lo = (m as f64 / (ratio + 1.0)).ceil() as usize;
        let mut choice = None;
        for t in (lo..=cap).rev() {
            if t >= 1 && feasible(t, steps - 1, ratio, memo).is_some() {
                choice = Some(t);
                break;
            }
        }
        memo.insert((m, steps), choice);
        choice
    }
    let mut memo = Default::default();
    let mut counts = vec![n0];
    for step in 1..levels {
        let m = *counts.last().unwrap();
        let next = feasible(m, levels - step, ratio, &mut memo)
            .unwrap_or(((m as f64 / ratio).floor() as usize).max(1));
        counts.push(next.max(1));
    }
    counts
}

/// Merges clusters of one level into the next level's splats. Position and
/// color are opacity-weighted means, opacity is the union coverage of the
/// members, and each axis scale grows to cover every member's offset plus
/// its own extent.
fn merge_clusters(splats: &[Splat], clusters: &[Vec<usize>]) -> Vec<Splat> {
    clusters
        .iter()
        .map(|members| {
            let mut wsum = 0.0;
            let mut pos = Vec3::ZERO;
            let mut color = [0.0f64; 3];
            let mut transparency = 1.0;
            for &i in members {
                let s = &splats[i];
                let w = s.opacity.max(1e-6);
                wsum += w;
                pos = pos + s.position * w;
                for c in 0..3 {
                    color[c] += s.color[c] * w;
                }
                transparency *= 1.0 - s.opacity.clamp(0.0, MERGED_ALPHA_CEIL);
            }
            pos = pos * (1.0 / wsum);
            for c in color.iter_mut() {
                *c /= wsum;
            }
            let mut scale = Vec3::ZERO;
            for &i in members {
                let s = &splats[i];
                let cov = s.covariance();
                let extent = vec3(cov.m[0][0].sqrt(), cov.m[1][1].sqrt(), cov.m[2][2].sqrt());
                scale.x = scale.x.max((s.position.x - pos.x).abs() + extent.x);
                scale.y = scale.y.max((s.position.y - pos.y).abs() + extent.y);
                scale.z = scale.z.max((s.position.z - pos.z).abs() + extent.z);
            }
            Splat {
                position: pos,
                scale,
                rotation: crate::math::Quat::IDENTITY,
                opacity: (1.0 - transparency).min(MERGED_ALPHA_CEIL),
                color,
            }
        })
        .collect()
}

/// Builds the hierarchy by repeated grid merging. Each level bisects its
/// grid cell size to the largest cluster count at or under the planned
/// target, then median-splits the biggest clusters until the count matches,
/// so default inputs follow the geometric reduction chain exactly.
pub fn build_lod_hierarchy(splats: &[Splat], params: &LodParams) -> Result<LodHierarchy> {
    params.validate()?;
    if splats.is_empty() {
        return Err(Error::Dimension("cannot build a hierarchy from zero splats".into()));
    }
    let mut origin = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = vec3(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in splats {
        origin = origin.min_by_component(s.position);
        hi = hi.max_by_component(s.position);
    }
    let extent = (hi.x - origin.x).max(hi.y - origin.y).max(hi.z - origin.z).max(1e-6);

    let targets = plan_counts(splats.len(), params.levels, params.reduction_ratio);
    let mut levels = vec![LodLevel { splats: splats.to_vec(), mean_scale: mean_scale(splats) }];
    for &target in targets.iter().skip(1) {
        let prev = &levels.last().unwrap().splats;
        let mut lo_cell = extent / (prev.len() as f64).max(2.0) * 1e-3;
        let mut hi_cell = 2.0 * extent;
        for _ in 0..60 {
            let mid = 0.5 * (lo_cell + hi_cell);
            if grid_clusters(prev, origin, mid).len() <= target {
                hi_cell = mid;
            } else {
                lo_cell = mid;
            }
        }
        let clusters = split_to_target(prev, grid_clusters(prev, origin, hi_cell), target);
        let merged = merge_clusters(prev, &clusters);
        let ms = mean_scale(&merged);
        levels.push(LodLevel { splats: merged, mean_scale: ms });
    }
    let thresholds =
        (0..params.levels).map(|i| params.threshold_base + i as f64 * params.threshold_step).collect();
    Ok(LodHierarchy { levels, thresholds, delta: params.delta })
}

/// Blend weight of level `i` at camera distance `d`. The clamped ramp form is
/// authoritative: 1 closer than the band, a linear falloff across it, 0
/// beyond. This makes the weight Lipschitz with constant 1/(2*delta)
/// everywhere, so level transitions are C0.
pub fn lod_blend_weight(d: f64, hierarchy: &LodHierarchy, level: usize) -> f64 {
    let di = hierarchy.thresholds[level];
    (0.5 - (d - di) / (2.0 * hierarchy.delta)).clamp(0.0, 1.0)
}

/// The one or two levels active at distance `d` with their opacity weights.
/// Inside a blend band the finer level carries the ramp weight and the
/// coarser its complement; elsewhere a single level renders at full weight.
pub fn active_levels(d: f64, hierarchy: &LodHierarchy) -> Vec<(usize, f64)> {
    let last = hierarchy.levels.len() - 1;
    for i in 0..hierarchy.levels.len() {
        let alpha = lod_blend_weight(d, hierarchy, i);
        if alpha <= 0.0 {
            continue;
        }
        if alpha >= 1.0 || i == last {
            return vec![(i, 1.0)];
        }
        return vec![(i, alpha), (i + 1, 1.0 - alpha)];
    }
    vec![(last, 1.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CachePolicy {
    /// Tiles with mean uncertainty above this keep the hot configuration.
    pub tau: f64,
    pub base_bins: usize,
    pub hot_bins: usize,
    /// Levels kept resident for cold tiles.
    pub base_prefetch: usize,
    /// Levels kept resident for hot tiles.
    pub hot_prefetch: usize,
}

impl Default for CachePolicy {
    fn default() -> CachePolicy {
        CachePolicy { tau: 0.6, base_bins: 8, hot_bins: 16, base_prefetch: 3, hot_prefetch: 6 }
    }
}

impl CachePolicy {
    pub fn validate(&self) -> Result<()> {
        for bins in [self.base_bins, self.hot_bins] {
            if bins != 8 && bins != 16 {
                return Err(Error::Config("direction bin counts are 8 or 16".into()));
            }
        }
        if self.base_bins > self.hot_bins || self.base_prefetch > self.hot_prefetch {
            return Err(Error::Config("hot tiles cannot cache less than cold tiles".into()));
        }
        if self.base_prefetch == 0 {
            return Err(Error::Config("at least one level must be prefetched".into()));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        Ok(())
    }

    pub fn bin_count_for(&self, u_bar: f64) -> usize {
        if u_bar > self.tau {
            self.hot_bins
        } else {
            self.base_bins
        }
    }
}

#[derive(Debug, Clone)]
pub struct TileCache {
    pub tile_id: u32,
    pub hot: bool,
    pub bin_count: usize,
    /// Number of resident levels, finest first.
    pub prefetch_depth: usize,
    /// orderings[level][bin] is a permutation of that level's splat indices;
    /// None past the prefetch depth.
    pub orderings: Vec<Option<Vec<Vec<u32>>>>,
}

impl TileCache {
    /// Unit azimuthal direction of one bin.
    pub fn bin_direction(bin: usize, bin_count: usize) -> Vec3 {
        let theta = std::f64::consts::TAU * bin as f64 / bin_count as f64;
        vec3(theta.cos(), theta.sin(), 0.0)
    }

    /// Total cached permutation entries, a proxy for cache memory.
    pub fn cached_index_count(&self) -> usize {
        self.orderings
            .iter()
            .flatten()
            .map(|bins| bins.iter().map(Vec::len).sum::<usize>())
            .sum()
    }
}

/// Splat indices sorted by descending projection onto `dir`, i.e. back to
/// front for a viewer looking along `dir`. Ties break toward the lower index.
pub fn bin_ordering(splats: &[Splat], dir: Vec3) -> Vec<u32> {
    let mut keyed: Vec<(f64, u32)> = splats
        .iter()
        .enumerate()
        .map(|(i, s)| (s.position.dot(dir), i as u32))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Builds the per-tile ordering cache. Hot tiles (u_bar above tau) get the
/// wider bin set and deeper level prefetch.
pub fn build_sorted_caches(
    tile: &WangTile,
    hierarchy: &LodHierarchy,
    policy: &CachePolicy,
) -> Result<TileCache> {
    policy.validate()?;
    let hot = tile.u_bar > policy.tau;
    let bin_count = if hot { policy.hot_bins } else { policy.base_bins };
    let prefetch_depth = if hot { policy.hot_prefetch } else { policy.base_prefetch };
    let orderings: Vec<Option<Vec<Vec<u32>>>> = hierarchy
        .levels
        .par_iter()
        .enumerate()
        .map(|(level, l)| {
            (level < prefetch_depth).then(|| {
                (0..bin_count)
                    .map(|b| bin_ordering(&l.splats, TileCache::bin_direction(b, bin_count)))
                    .collect()
            })
        })
        .collect();
    Ok(TileCache { tile_id: tile.tile_id, hot, bin_count, prefetch_depth, orderings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub sort_ms: f64,
    pub render_ms: f64,
    pub update_ms: f64,
    /// True when a level missing from the cache was built synchronously.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct LodFrame {
    pub image: ImageRgb,
    pub bin: usize,
    /// Levels composited this frame with their opacity weights.
    pub levels: Vec<(usize, f64)>,
    pub timing: FrameTiming,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Entries for one level, weighted and tagged with the bin sort key, emitted
/// front to back (ascending projection onto the bin direction).
fn level_entries(
    splats: &[Splat],
    ordering: &[u32],
    weight: f64,
    dir: Vec3,
    pose: &Pose,
    resolution: (usize, usize),
    params: &RenderParams,
) -> Result<Vec<(f64, RenderEntry)>> {
    if ordering.len() != splats.len() {
        return Err(Error::Config("cached ordering does not cover the level".into()));
    }
    let cam = pose.camera(resolution.0, resolution.1);
    let weights = vec![weight as f32; splats.len()];
    let entries = project_entries(splats, &cam, Some(&weights), params);
    let mut by_splat: Vec<Option<RenderEntry>> = vec![None; splats.len()];
    for e in entries {
        by_splat[e.splat_index as usize] = Some(e);
    }
    // Cached orderings are back to front, so walk them in reverse.
    Ok(ordering
        .iter()
        .rev()
        .filter_map(|&i| {
            by_splat[i as usize].map(|e| (splats[i as usize].position.dot(dir), e))
        })
        .collect())
}

/// Renders the tile through its cached orderings: nearest azimuthal bin by
/// view direction, active levels composited with the blend weight and its
/// complement. A level past the prefetch depth is sorted on the spot and the
/// frame flagged.
pub fn select_ordering_and_render(
    tile: &WangTile,
    cache: &TileCache,
    hierarchy: &LodHierarchy,
    pose: &Pose,
    resolution: (usize, usize),
) -> Result<LodFrame> {
    if cache.tile_id != tile.tile_id {
        return Err(Error::Config("cache belongs to a different tile".into()));
    }
    if cache.orderings.len() != hierarchy.levels.len() {
        return Err(Error::Config("cache and hierarchy level counts differ".into()));
    }
    if resolution.0 < 8 || resolution.1 < 8 {
        return Err(Error::Dimension("render target below 8x8".into()));
    }
    let params = RenderParams::default();

    let sort_start = Instant::now();
    let view_dir = (Vec3::ZERO - pose.eye()).normalized();
    let bin = (0..cache.bin_count)
        .max_by(|&a, &b| {
            let da = view_dir.dot(TileCache::bin_direction(a, cache.bin_count));
            let db = view_dir.dot(TileCache::bin_direction(b, cache.bin_count));
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let dir = TileCache::bin_direction(bin, cache.bin_count);
    let levels = active_levels(pose.radius, hierarchy);
    let mut sort_ms = elapsed_ms(sort_start);

    let mut update_ms = 0.0;
    let mut fallback = false;
    let mut streams: Vec<Vec<(f64, RenderEntry)>> = Vec::new();
    for &(level, weight) in &levels {
        let splats = &hierarchy.levels[level].splats;
        let stream = match &cache.orderings[level] {
            Some(bins) => {
                let t = Instant::now();
                let s = level_entries(splats, &bins[bin], weight, dir, pose, resolution, &params)?;
                sort_ms += elapsed_ms(t);
                s
            }
            None => {
                let t = Instant::now();
                let ordering = bin_ordering(splats, dir);
                fallback = true;
                let s = level_entries(splats, &ordering, weight, dir, pose, resolution, &params)?;
                update_ms += elapsed_ms(t);
                s
            }
        };
        streams.push(stream);
    }

    let render_start = Instant::now();
    let mut merged: Vec<RenderEntry> = Vec::with_capacity(streams.iter().map(Vec::len).sum());
    match streams.len() {
        1 => merged.extend(streams.remove(0).into_iter().map(|(_, e)| e)),
        _ => {
            // Two active levels: merge the front-to-back streams on the
            // shared bin key so compositing stays depth-ordered across
            // levels.
            let second = streams.pop().unwrap();
            let first = streams.pop().unwrap();
            let (mut a, mut b) = (first.into_iter().peekable(), second.into_iter().peekable());
            loop {
                match (a.peek(), b.peek()) {
                    (Some(x), Some(y)) => {
                        if x.0 <= y.0 {
                            merged.push(a.next().unwrap().1);
                        } else {
                            merged.push(b.next().unwrap().1);
                        }
                    }
                    (Some(_), None) => merged.push(a.next().unwrap().1),
                    (None, Some(_)) => merged.push(b.next().unwrap().1),
                    (None, None) => break,
                }
            }
        }
    }
    let image = rasterize(&merged, resolution.0, resolution.1, params.q_cut as f32).image;
    let render_ms = elapsed_ms(render_start);

    Ok(LodFrame {
        image,
        bin,
        levels,
        timing: FrameTiming { sort_ms, render_ms, update_ms, fallback },
    })
}

/// Exact-sort reference for the same composite: per-frame depth sort instead
/// of the cached bin ordering.
pub fn render_blend_exact(
    hierarchy: &LodHierarchy,
    pose: &Pose,
    resolution: (usize, usize),
) -> Result<ImageRgb> {
    if resolution.0 < 8 || resolution.1 < 8 {
        return Err(Error::Dimension("render target below 8x8".into()));
    }
    let params = RenderParams::default();
    let cam = pose.camera(resolution.0, resolution.1);
    let mut entries = Vec::new();
    for (level, weight) in active_levels(pose.radius, hierarchy) {
        let splats = &hierarchy.levels[level].splats;
        let weights = vec![weight as f32; splats.len()];
        let mut level_entries = project_entries(splats, &cam, Some(&weights), &params);
        // Disambiguate splat indices across levels before the global sort.
        for e in &mut level_entries {
            e.splat_index = (level as u32) << 24 | e.splat_index;
        }
        entries.extend(level_entries);
    }
    sort_entries_by_depth(&mut entries);
    Ok(rasterize(&entries, resolution.0, resolution.1, params.q_cut as f32).image)
}

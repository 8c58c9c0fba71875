//! Procedural ground-truth scene and its capture oracle. The scene is the
//! only source of "real" imagery in the pipeline; everything downstream sees
//! it exclusively through `capture`.

use crate::error::{Error, Result};
use crate::image::{GrayImage, ImageRgb};
use crate::math::{mix_seed, mix_seed3, splitmix64, vec3, Aabb, Camera, Vec3, TAU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Vertical field of view shared by every capture and field render.
pub const FOV_Y_RAD: f64 = 55.0 * std::f64::consts::PI / 180.0;

/// Fixed, view-independent light so captures stay photometrically consistent
/// across poses.
const LIGHT_DIR: Vec3 = Vec3 { x: 0.32, y: 0.22, z: 0.92 };
const AMBIENT: f32 = 0.35;
const DIFFUSE: f32 = 0.65;

/// Height-band palette; the band index doubles as the semantic label.
const PALETTE: [[f32; 3]; 5] = [
    [0.16, 0.29, 0.53],
    [0.76, 0.70, 0.50],
    [0.30, 0.55, 0.25],
    [0.47, 0.43, 0.40],
    [0.92, 0.93, 0.95],
];
const BAND_EDGES: [f32; 4] = [0.28, 0.45, 0.62, 0.82];

/// Camera pose on the upper hemisphere, looking at the world origin.
/// Azimuth is canonicalized into [0, tau) at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
}

impl Pose {
    pub fn new(elevation: f64, azimuth: f64, radius: f64) -> Result<Pose> {
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&elevation) {
            return Err(Error::Pose(format!("elevation {} outside [0, pi/2]", elevation)));
        }
        if !(radius > 0.0) {
            return Err(Error::Pose(format!("radius {} must be positive", radius)));
        }
        if !azimuth.is_finite() {
            return Err(Error::Pose("azimuth must be finite".into()));
        }
        Ok(Pose { elevation, azimuth: azimuth.rem_euclid(TAU), radius })
    }

    pub fn eye(&self) -> Vec3 {
        let (se, ce) = (self.elevation.sin(), self.elevation.cos());
        let (sa, ca) = (self.azimuth.sin(), self.azimuth.cos());
        vec3(self.radius * ce * ca, self.radius * ce * sa, self.radius * se)
    }

    pub fn camera(&self, width: usize, height: usize) -> Camera {
        Camera::look_at(self.eye(), Vec3::ZERO, FOV_Y_RAD, width, height)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TerrainParams {
    /// Peak-to-valley height range; zero yields a flat field at `h_min`.
    pub amplitude: f64,
    pub octaves: u32,
    pub h_min: f64,
    /// Side length of the square ground footprint, centered on the origin.
    pub world_size: f64,
}

impl Default for TerrainParams {
    fn default() -> TerrainParams {
        TerrainParams { amplitude: 1.2, octaves: 4, h_min: 0.0, world_size: 10.0 }
    }
}

/// Ground-truth scene: height, albedo, and semantic grids over a square
/// footprint. All grids share dimensions and row-major layout.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub height: GrayImage,
    pub albedo: ImageRgb,
    pub semantic: Vec<u16>,
    pub seed: u64,
    pub params: TerrainParams,
}

fn lattice_value(seed: u64, xi: i64, yi: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(xi as u64 ^ (yi as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Single octave of seeded value noise in [0, 1] at lattice frequency `freq`.
fn value_noise(seed: u64, x: f64, y: f64, freq: f64) -> f64 {
    let fx = x * freq;
    let fy = y * freq;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (smooth(fx - x0), smooth(fy - y0));
    let (xi, yi) = (x0 as i64, y0 as i64);
    let v00 = lattice_value(seed, xi, yi);
    let v10 = lattice_value(seed, xi + 1, yi);
    let v01 = lattice_value(seed, xi, yi + 1);
    let v11 = lattice_value(seed, xi + 1, yi + 1);
    let a = v00 + (v10 - v00) * tx;
    let b = v01 + (v11 - v01) * tx;
    a + (b - a) * ty
}

/// Octave sum normalized back into [0, 1].
fn fbm(seed: u64, x: f64, y: f64, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut weight = 1.0;
    let mut total = 0.0;
    let mut freq = 1.5;
    for o in 0..octaves.max(1) {
        sum += weight * value_noise(mix_seed(seed, o as u64), x, y, freq);
        total += weight;
        weight *= 0.5;
        freq *= 2.0;
    }
    sum / total
}

fn band_index(t: f32) -> usize {
    BAND_EDGES.iter().position(|e| t < *e).unwrap_or(PALETTE.len() - 1)
}

/// Builds the deterministic scene for (seed, size, params).
pub fn generate_scene(
    seed: u64,
    size: (usize, usize),
    params: TerrainParams,
) -> Result<SyntheticScene> {
    let (w, h) = size;
    if w < 16 || h < 16 {
        return Err(Error::Config(format!("scene grid {}x{} below minimum 16x16", w, h)));
    }
    if !(params.amplitude >= 0.0) {
        return Err(Error::Config("terrain amplitude must be >= 0".into()));
    }
    if !(params.world_size > 0.0) {
        return Err(Error::Config("world size must be positive".into()));
    }
    let mut height = GrayImage::new(w, h);
    let mut albedo = ImageRgb::new(w, h);
    let mut semantic = vec![0u16; w * h];
    let detail_seed = mix_seed(seed, 0x51);
    for gy in 0..h {
        for gx in 0..w {
            // Sample in unit scene coordinates so grid resolution does not
            // change the terrain shape.
            let ux = (gx as f64 + 0.5) / w as f64;
            let uy = (gy as f64 + 0.5) / h as f64;
            let t = if params.amplitude > 0.0 { fbm(seed, ux, uy, params.octaves) } else { 0.0 };
            height.set(gx, gy, (params.h_min + params.amplitude * t) as f32);
            let band = band_index(t as f32);
            semantic[gy * w + gx] = band as u16;
            let base = PALETTE[band];
            let grain =
                (value_noise(detail_seed, ux, uy, 24.0) as f32 - 0.5) * 0.16;
            albedo.set(
                gx,
                gy,
                [
                    (base[0] + grain).clamp(0.0, 1.0),
                    (base[1] + grain).clamp(0.0, 1.0),
                    (base[2] + grain).clamp(0.0, 1.0),
                ],
            );
        }
    }
    Ok(SyntheticScene { height, albedo, semantic, seed, params })
}

impl SyntheticScene {
    pub fn extent(&self) -> f64 {
        self.params.world_size
    }

    /// World xy to continuous grid coordinates (pixel centers at +0.5).
    fn grid_coords(&self, x: f64, y: f64) -> (f32, f32) {
        let half = self.params.world_size / 2.0;
        let gx = (x + half) / self.params.world_size * self.height.width as f64;
        let gy = (y + half) / self.params.world_size * self.height.height as f64;
        (gx as f32, gy as f32)
    }

    pub fn inside_footprint(&self, x: f64, y: f64) -> bool {
        let half = self.params.world_size / 2.0;
        x >= -half && x <= half && y >= -half && y <= half
    }

    /// Bilinear terrain height; clamped at the footprint border.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = self.grid_coords(x, y);
        bilinear_gray(&self.height, gx, gy) as f64
    }

    pub fn albedo_at(&self, x: f64, y: f64) -> [f32; 3] {
        let (gx, gy) = self.grid_coords(x, y);
        self.albedo.sample_bilinear(gx, gy)
    }

    pub fn semantic_at(&self, x: f64, y: f64) -> u16 {
        let (gx, gy) = self.grid_coords(x, y);
        let cx = (gx - 0.5).round().clamp(0.0, (self.height.width - 1) as f32) as usize;
        let cy = (gy - 0.5).round().clamp(0.0, (self.height.height - 1) as f32) as usize;
        self.semantic[cy * self.height.width + cx]
    }

    /// Outward normal from central height differences.
    pub fn normal_at(&self, x: f64, y: f64) -> Vec3 {
        let e = self.params.world_size / self.height.width as f64;
        let dx = (self.height_at(x + e, y) - self.height_at(x - e, y)) / (2.0 * e);
        let dy = (self.height_at(x, y + e) - self.height_at(x, y - e)) / (2.0 * e);
        vec3(-dx, -dy, 1.0).normalized()
    }

    pub fn bounding_box(&self) -> Aabb {
        let half = self.params.world_size / 2.0;
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for v in &self.height.data {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        let mut b = Aabb::empty();
        b.expand(vec3(-half, -half, lo as f64 - 1e-6));
        b.expand(vec3(half, half, hi as f64 + 1e-6));
        b
    }
}

fn bilinear_gray(g: &GrayImage, x: f32, y: f32) -> f32 {
    let (w, h) = (g.width, g.height);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
    let top = g.get(x0, y0) + (g.get(x1, y0) - g.get(x0, y0)) * tx;
    let bot = g.get(x0, y1) + (g.get(x1, y1) - g.get(x0, y1)) * tx;
    top + (bot - top) * ty
}

/// Ground-truth view: shaded image plus per-pixel ray depth (0 where the ray
/// misses the terrain).
#[derive(Debug, Clone)]
pub struct Capture {
    pub image: ImageRgb,
    pub depth: GrayImage,
    pub pose: Pose,
}

/// Ray-marched capture with bisection refinement. Depth is Euclidean distance
/// along the pixel ray, so eye + ray * depth lies on the surface.
pub fn capture(scene: &SyntheticScene, pose: Pose, resolution: (usize, usize)) -> Result<Capture> {
    let (width, height) = resolution;
    if width == 0 || height == 0 {
        return Err(Error::Dimension("capture resolution must be nonzero".into()));
    }
    let bbox = scene.bounding_box();
    let eye = pose.eye();
    if bbox.contains(eye) {
        return Err(Error::Pose(format!(
            "camera at ({:.3}, {:.3}, {:.3}) is inside the terrain bounds",
            eye.x, eye.y, eye.z
        )));
    }
    let cam = pose.camera(width, height);
    let step = 0.5 * scene.params.world_size / scene.height.width as f64;
    let light = LIGHT_DIR.normalized();

    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..height)
        .map(|py| {
            let mut img_row = vec![0.0f32; width * 3];
            let mut depth_row = vec![0.0f32; width];
            for px in 0..width {
                let dir = cam.pixel_ray(px as f64 + 0.5, py as f64 + 0.5);
                if let Some(t) = march_ray(scene, &bbox, eye, dir, step) {
                    let p = eye + dir * t;
                    let albedo = scene.albedo_at(p.x, p.y);
                    let n = scene.normal_at(p.x, p.y);
                    let shade = AMBIENT + DIFFUSE * n.dot(light).max(0.0) as f32;
                    for c in 0..3 {
                        img_row[px * 3 + c] = (albedo[c] * shade).clamp(0.0, 1.0);
                    }
                    depth_row[px] = t as f32;
                }
            }
            (img_row, depth_row)
        })
        .collect();

    let mut image = ImageRgb::new(width, height);
    let mut depth = GrayImage::new(width, height);
    for (py, (img_row, depth_row)) in rows.into_iter().enumerate() {
        image.data[py * width * 3..(py + 1) * width * 3].copy_from_slice(&img_row);
        depth.data[py * width..(py + 1) * width].copy_from_slice(&depth_row);
    }
    Ok(Capture { image, depth, pose })
}

fn surface_excess(scene: &SyntheticScene, p: Vec3) -> Option<f64> {
    if scene.inside_footprint(p.x, p.y) {
        Some(p.z - scene.height_at(p.x, p.y))
    } else {
        None
    }
}

fn march_ray(
    scene: &SyntheticScene,
    bbox: &Aabb,
    eye: Vec3,
    dir: Vec3,
    step: f64,
) -> Option<f64> {
    let (t_enter, t_exit) = bbox.ray_range(eye, dir)?;
    let mut t_prev = t_enter.max(0.0);
    let mut excess_prev = match surface_excess(scene, eye + dir * t_prev) {
        Some(e) if e <= 0.0 => return Some(t_prev),
        other => other,
    };
    let mut t = t_prev;
    while t < t_exit {
        t = (t + step).min(t_exit);
        let excess = surface_excess(scene, eye + dir * t);
        if let (Some(_above), Some(below)) = (excess_prev, excess) {
            if below <= 0.0 {
                return Some(bisect_hit(scene, eye, dir, t_prev, t));
            }
        }
        if excess_prev.is_none() && matches!(excess, Some(e) if e <= 0.0) {
            // Entered the footprint already under the surface; snap to entry.
            return Some(t);
        }
        t_prev = t;
        excess_prev = excess;
        if t >= t_exit {
            break;
        }
    }
    None
}

fn bisect_hit(scene: &SyntheticScene, eye: Vec3, dir: Vec3, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..26 {
        let mid = 0.5 * (lo + hi);
        let e = surface_excess(scene, eye + dir * mid).unwrap_or(1.0);
        if e > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Admissible pose ranges for candidate generation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseBounds {
    pub elevation: (f64, f64),
    pub radius: (f64, f64),
    /// Sampled azimuth window; defaults to the full circle.
    pub azimuth: (f64, f64),
}

impl Default for PoseBounds {
    fn default() -> PoseBounds {
        PoseBounds { elevation: (0.3, 1.2), radius: (9.0, 11.0), azimuth: (0.0, TAU) }
    }
}

/// Stratified hemisphere sampling: one azimuth stratum per candidate plus a
/// shuffled elevation stratum, both jittered. Max azimuth gap stays below
/// twice the uniform spacing.
pub fn sample_candidate_poses(n: usize, bounds: PoseBounds, seed: u64) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::Config("candidate count must be positive".into()));
    }
    let (elo, ehi) = bounds.elevation;
    let (rlo, rhi) = bounds.radius;
    let (alo, ahi) = bounds.azimuth;
    if !(elo <= ehi && (0.0..=std::f64::consts::FRAC_PI_2).contains(&elo) && ehi <= std::f64::consts::FRAC_PI_2)
    {
        return Err(Error::Config("elevation bounds outside [0, pi/2]".into()));
    }
    if !(0.0 < rlo && rlo <= rhi) {
        return Err(Error::Config("radius bounds must be positive and ordered".into()));
    }
    if !(alo < ahi && ahi - alo <= TAU + 1e-12) {
        return Err(Error::Config("azimuth window must be ordered and at most a full turn".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xca9d));
    let mut elev_strata: Vec<usize> = (0..n).collect();
    // Fisher-Yates so elevation strata pair with azimuth strata in a
    // different order each seed.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        elev_strata.swap(i, j);
    }
    let az_span = ahi - alo;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let az = alo + (i as f64 + rng.gen_range(0.0..1.0)) / n as f64 * az_span;
        let el = elo + (elev_strata[i] as f64 + rng.gen_range(0.0..1.0)) / n as f64 * (ehi - elo);
        let r = rng.gen_range(rlo..=rhi);
        poses.push(Pose::new(el, az, r)?);
    }
    Ok(poses)
}

/// Derived per-candidate seed: a pure function of (base seed, pose index).
pub fn candidate_seed(base_seed: u64, pose_index: usize) -> u64 {
    mix_seed3(base_seed, 0x9e1e, pose_index as u64)
}

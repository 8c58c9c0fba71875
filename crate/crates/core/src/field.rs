//! Explicit Gaussian splat field: storage, perspective projection of splats
//! to screen-space Gaussians, and front-to-back alpha compositing in global
//! painter's order.

use crate::error::{Error, Result};
use crate::image::{GrayImage, ImageRgb};
use crate::math::{vec3, Aabb, Camera, Mat3, Quat, Vec3};
use crate::scene::Capture;
use serde::{Deserialize, Serialize};

/// Splats whose Mahalanobis distance squared exceeds this are not rasterized.
pub const DEFAULT_Q_CUT: f64 = 12.25;
/// Screen-space covariance dilation (pixels^2) applied by the rasterizer, not
/// by `project_splat`.
pub const COV_DILATION: f64 = 0.1;
/// Camera-space depth below which a splat is culled.
pub const NEAR_CLIP: f64 = 0.05;

const INSERT_OPACITY: f64 = 0.8;
/// Projected standard deviation per stride pixel for inserted splats.
const INSERT_SIGMA: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub position: Vec3,
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat {
    /// World-space 3x3 covariance R diag(s^2) R^T.
    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation.rotation_matrix();
        let s2 = [self.scale.x * self.scale.x, self.scale.y * self.scale.y, self.scale.z * self.scale.z];
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    m[i][j] += r.m[i][k] * s2[k] * r.m[j][k];
                }
            }
        }
        Mat3 { m }
    }

    fn validate(&self) -> Result<()> {
        let finite = self.position.x.is_finite()
            && self.position.y.is_finite()
            && self.position.z.is_finite();
        if !finite {
            return Err(Error::Integrity("splat position must be finite".into()));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::Integrity(format!("opacity {} outside (0, 1]", self.opacity)));
        }
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::Integrity("scale components must be positive".into()));
        }
        if self.rotation.norm() < 1e-9 {
            return Err(Error::Integrity("rotation quaternion is degenerate".into()));
        }
        Ok(())
    }
}

/// Mutable splat collection with a bounding box over all positions and a
/// revision counter that increments on every mutation.
#[derive(Debug, Clone, Default)]
pub struct GaussianField {
    splats: Vec<Splat>,
    bounds: Aabb,
    revision: u64,
}

impl GaussianField {
    pub fn new() -> GaussianField {
        GaussianField { splats: Vec::new(), bounds: Aabb::empty(), revision: 0 }
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn insert(&mut self, splat: Splat) -> Result<()> {
        splat.validate()?;
        let mut s = splat;
        s.rotation = s.rotation.normalized();
        self.bounds.expand(s.position);
        self.splats.push(s);
        self.revision += 1;
        Ok(())
    }

    pub fn insert_batch(&mut self, splats: Vec<Splat>) -> Result<usize> {
        for s in &splats {
            s.validate()?;
        }
        let n = splats.len();
        for mut s in splats {
            s.rotation = s.rotation.normalized();
            self.bounds.expand(s.position);
            self.splats.push(s);
        }
        if n > 0 {
            self.revision += 1;
        }
        Ok(n)
    }

    /// Rebuild from raw splats (deserialization path).
    pub fn from_splats(splats: Vec<Splat>) -> Result<GaussianField> {
        let mut f = GaussianField::new();
        f.insert_batch(splats)?;
        Ok(f)
    }

    /// Drops splats with opacity below `min_opacity`. Returns removed count.
    pub fn prune(&mut self, min_opacity: f64) -> usize {
        let before = self.splats.len();
        self.splats.retain(|s| s.opacity >= min_opacity);
        let removed = before - self.splats.len();
        if removed > 0 {
            self.revision += 1;
        }
        removed
    }

    /// In-place parameter mutation used by refinement; keeps the bounds
    /// invariant by expanding around moved splats.
    pub(crate) fn apply_updates<F: FnMut(usize, &mut Splat)>(&mut self, mut f: F) {
        for (i, s) in self.splats.iter_mut().enumerate() {
            f(i, s);
            self.bounds.expand(s.position);
        }
        self.revision += 1;
    }
}

/// Screen-space footprint of one splat.
#[derive(Debug, Clone, Copy)]
pub struct Projected {
    pub mean: (f64, f64),
    /// Symmetric 2x2 covariance (xx, xy, yy) without dilation.
    pub cov: (f64, f64, f64),
    pub depth: f64,
}

/// EWA projection of a splat: perspective-projected center plus the local
/// affine propagation J W Sigma W^T J^T of the world covariance. Returns None
/// when the center is behind the near plane (culled, not an error).
pub fn project_splat(splat: &Splat, cam: &Camera) -> Option<Projected> {
    let t = cam.world_to_cam(splat.position);
    if t.z <= NEAR_CLIP {
        return None;
    }
    let u = cam.fx * t.x / t.z + cam.cx;
    let v = cam.fy * t.y / t.z + cam.cy;
    let j = jacobian(cam, t);
    let v3 = splat.covariance();
    let pcam = cam.rot.mul_mat(&v3).mul_mat(&cam.rot.transpose());
    let cov = propagate(&j, &pcam);
    Some(Projected { mean: (u, v), cov, depth: t.z })
}

/// Projection Jacobian rows d(u,v)/d(camera-space point).
pub(crate) fn jacobian(cam: &Camera, t: Vec3) -> [[f64; 3]; 2] {
    let inv_z = 1.0 / t.z;
    [
        [cam.fx * inv_z, 0.0, -cam.fx * t.x * inv_z * inv_z],
        [0.0, cam.fy * inv_z, -cam.fy * t.y * inv_z * inv_z],
    ]
}

/// (J P J^T) for symmetric P.
pub(crate) fn propagate(j: &[[f64; 3]; 2], p: &Mat3) -> (f64, f64, f64) {
    let mut jp = [[0.0f64; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            for k in 0..3 {
                jp[r][c] += j[r][k] * p.m[k][c];
            }
        }
    }
    let mut out = [[0.0f64; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..3 {
                out[r][c] += jp[r][k] * j[c][k];
            }
        }
    }
    (out[0][0], out[0][1], out[1][1])
}

/// One rasterizable footprint; produced by `project_entries`.
#[derive(Debug, Clone, Copy)]
pub struct RenderEntry {
    pub splat_index: u32,
    pub mean: (f32, f32),
    /// Inverse dilated covariance (ia, ib, ic): q = ia dx^2 + 2 ib dx dy + ic dy^2.
    pub inv_cov: (f32, f32, f32),
    pub depth: f32,
    pub color: [f32; 3],
    pub alpha: f32,
    /// Half-extent of the raster bounding box in pixels.
    pub radius: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderParams {
    pub q_cut: f64,
    pub dilation: f64,
}

impl Default for RenderParams {
    fn default() -> RenderParams {
        RenderParams { q_cut: DEFAULT_Q_CUT, dilation: COV_DILATION }
    }
}

/// Projects splats to render entries, culling behind-camera splats. An
/// optional per-splat opacity multiplier supports blended level-of-detail
/// rendering; zero multipliers cull.
pub fn project_entries(
    splats: &[Splat],
    cam: &Camera,
    opacity_scale: Option<&[f32]>,
    params: &RenderParams,
) -> Vec<RenderEntry> {
    let mut entries = Vec::with_capacity(splats.len());
    for (i, s) in splats.iter().enumerate() {
        let mult = opacity_scale.map(|m| m[i]).unwrap_or(1.0);
        if mult <= 0.0 {
            continue;
        }
        let Some(p) = project_splat(s, cam) else { continue };
        let (a, b, c) = (p.cov.0 + params.dilation, p.cov.1, p.cov.2 + params.dilation);
        let det = a * c - b * b;
        if det <= 1e-12 || !det.is_finite() {
            continue;
        }
        let inv = (c / det, -b / det, a / det);
        let lam_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let radius = (params.q_cut * lam_max).sqrt() + 1.0;
        entries.push(RenderEntry {
            splat_index: i as u32,
            mean: (p.mean.0 as f32, p.mean.1 as f32),
            inv_cov: (inv.0 as f32, inv.1 as f32, inv.2 as f32),
            depth: p.depth as f32,
            color: [s.color[0] as f32, s.color[1] as f32, s.color[2] as f32],
            alpha: (s.opacity * mult as f64) as f32,
            radius: radius as f32,
        });
    }
    entries
}

pub struct RenderOutput {
    pub image: ImageRgb,
    /// Per-pixel accumulated alpha (1 - final transmittance).
    pub alpha: GrayImage,
}

#[inline]
pub(crate) fn entry_bbox(e: &RenderEntry, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = (e.mean.0 - e.radius).floor().max(0.0) as isize;
    let x1 = (e.mean.0 + e.radius).ceil().min(width as f32 - 1.0) as isize;
    let y0 = (e.mean.1 - e.radius).floor().max(0.0) as isize;
    let y1 = (e.mean.1 + e.radius).ceil().min(height as f32 - 1.0) as isize;
    if x0 > x1 || y0 > y1 || x1 < 0 || y1 < 0 {
        return None;
    }
    Some((x0.max(0) as usize, x1 as usize, y0.max(0) as usize, y1 as usize))
}

/// Composites entries front-to-back in the order given. Callers must pass
/// entries already sorted by ascending depth (or a deliberate cache order).
pub fn rasterize(
    entries: &[RenderEntry],
    width: usize,
    height: usize,
    q_cut: f32,
) -> RenderOutput {
    let npix = width * height;
    let mut color = vec![0.0f32; npix * 3];
    let mut transmit = vec![1.0f32; npix];
    for e in entries {
        let Some((x0, x1, y0, y1)) = entry_bbox(e, width, height) else { continue };
        for py in y0..=y1 {
            let dy = py as f32 + 0.5 - e.mean.1;
            let row = py * width;
            for px in x0..=x1 {
                let t = transmit[row + px];
                if t < 1e-5 {
                    continue;
                }
                let dx = px as f32 + 0.5 - e.mean.0;
                let q = e.inv_cov.0 * dx * dx
                    + 2.0 * e.inv_cov.1 * dx * dy
                    + e.inv_cov.2 * dy * dy;
                if q > q_cut || q < 0.0 {
                    continue;
                }
                let alpha = e.alpha * (-0.5 * q).exp();
                let w = t * alpha;
                let base = (row + px) * 3;
                color[base] += w * e.color[0];
                color[base + 1] += w * e.color[1];
                color[base + 2] += w * e.color[2];
                transmit[row + px] = t * (1.0 - alpha);
            }
        }
    }
    let mut alpha = GrayImage::new(width, height);
    for p in 0..npix {
        alpha.data[p] = 1.0 - transmit[p];
    }
    RenderOutput { image: ImageRgb { width, height, data: color }, alpha }
}

/// Ascending-depth painter's order over the entries, ties broken by splat
/// index so renders are bit-deterministic.
pub fn sort_entries_by_depth(entries: &mut [RenderEntry]) {
    entries.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| a.splat_index.cmp(&b.splat_index))
    });
}

/// Renders the field from a camera. `ordering`, when provided, must be a
/// permutation of splat indices and replaces the per-frame depth sort.
pub fn render_view(
    field: &GaussianField,
    cam: &Camera,
    ordering: Option<&[u32]>,
    params: &RenderParams,
) -> Result<RenderOutput> {
    let mut entries = project_entries(field.splats(), cam, None, params);
    match ordering {
        None => sort_entries_by_depth(&mut entries),
        Some(order) => {
            if order.len() != field.len() {
                return Err(Error::Integrity(format!(
                    "ordering length {} does not match splat count {}",
                    order.len(),
                    field.len()
                )));
            }
            let mut seen = vec![false; field.len()];
            for &i in order {
                let i = i as usize;
                if i >= field.len() || seen[i] {
                    return Err(Error::Integrity("ordering is not a permutation".into()));
                }
                seen[i] = true;
            }
            let mut rank = vec![0u32; field.len()];
            for (r, &i) in order.iter().enumerate() {
                rank[i as usize] = r as u32;
            }
            entries.sort_by_key(|e| rank[e.splat_index as usize]);
        }
    }
    Ok(rasterize(&entries, cam.width, cam.height, params.q_cut as f32))
}

/// Back-projects capture pixels on a stride grid into new splats: position
/// along the pixel ray at the captured depth, color from the image, isotropic
/// scale proportional to depth * pixel angle * stride.
pub fn insert_from_capture(
    field: &mut GaussianField,
    capture: &Capture,
    stride: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("insertion stride must be positive".into()));
    }
    let (w, h) = (capture.image.width, capture.image.height);
    let cam = capture.pose.camera(w, h);
    let mut new_splats = Vec::new();
    let mut y = stride / 2;
    while y < h {
        let mut x = stride / 2;
        while x < w {
            let d = capture.depth.get(x, y) as f64;
            if d > 0.0 {
                let dir = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                let pos = cam.eye + dir * d;
                let rgb = capture.image.get(x, y);
                let sigma = INSERT_SIGMA * stride as f64 * d / cam.fy;
                new_splats.push(Splat {
                    position: pos,
                    scale: vec3(sigma, sigma, sigma),
                    rotation: Quat::IDENTITY,
                    opacity: INSERT_OPACITY,
                    color: [rgb[0] as f64, rgb[1] as f64, rgb[2] as f64],
                });
            }
            x += stride;
        }
        y += stride;
    }
    if new_splats.is_empty() {
        log::warn!(
            "insert_from_capture added no splats (all-zero depth or stride {} too large)",
            stride
        );
        return Ok(0);
    }
    field.insert_batch(new_splats)
}

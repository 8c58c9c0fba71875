//! Bounded gradient-descent refinement of splat parameters against captured
//! images. The loss is the mean per-pixel L1 over the capture batch; color,
//! opacity, position, and scale receive analytic gradients propagated through
//! the alpha compositing and the EWA projection.

use crate::error::{Error, Result};
use crate::field::{jacobian, propagate, GaussianField, RenderParams, NEAR_CLIP};
use crate::math::{vec3, Camera, Vec3};
use crate::scene::Capture;

/// Per-parameter learning-rate scales; position is additionally scaled by the
/// scene bounding-box diagonal.
const LR_POSITION: f64 = 1e-3;
const LR_COLOR: f64 = 1e-2;
const LR_OPACITY: f64 = 1e-2;
const LR_LOG_SCALE: f64 = 1e-3;

const OPACITY_MIN: f64 = 1e-3;
const OPACITY_MAX: f64 = 0.999;
/// Compositing alpha ceiling; keeps the reverse-pass transmittance recurrence
/// finite.
const ALPHA_CEIL: f64 = 0.9999;

#[derive(Debug, Clone, Copy)]
pub struct RefineOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Splats below this opacity are pruned after the final iteration.
    pub prune_opacity: f64,
    pub render: RenderParams,
}

impl Default for RefineOptions {
    fn default() -> RefineOptions {
        RefineOptions {
            iterations: 200,
            learning_rate: 1.0,
            prune_opacity: 0.01,
            render: RenderParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    /// iterations + 1 entries; the first is the loss before any update.
    pub loss_trace: Vec<f64>,
    pub pruned: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SplatGrads {
    pub position: Vec3,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// f64 rasterization state for one projected splat; mirrors the fast f32
/// renderer but keeps every intermediate needed by the backward pass.
struct GradEntry {
    splat: usize,
    t_cam: Vec3,
    mean: (f64, f64),
    /// Dilated screen covariance and its inverse.
    cov: (f64, f64, f64),
    inv: (f64, f64, f64),
    color: [f64; 3],
    opacity: f64,
    radius: f64,
    // Accumulated per-entry adjoints.
    g_mean: (f64, f64),
    g_cov: (f64, f64, f64),
    g_opacity: f64,
    g_color: [f64; 3],
}

fn build_entries(field: &GaussianField, cam: &Camera, params: &RenderParams) -> Vec<GradEntry> {
    let mut entries: Vec<GradEntry> = Vec::new();
    for (i, s) in field.splats().iter().enumerate() {
        let t = cam.world_to_cam(s.position);
        if t.z <= NEAR_CLIP {
            continue;
        }
        let u = cam.fx * t.x / t.z + cam.cx;
        let v = cam.fy * t.y / t.z + cam.cy;
        let j = jacobian(cam, t);
        let pcam = cam.rot.mul_mat(&s.covariance()).mul_mat(&cam.rot.transpose());
        let (a0, b0, c0) = propagate(&j, &pcam);
        let (a, b, c) = (a0 + params.dilation, b0, c0 + params.dilation);
        let det = a * c - b * b;
        if det <= 1e-12 || !det.is_finite() {
            continue;
        }
        let inv = (c / det, -b / det, a / det);
        let lam_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        entries.push(GradEntry {
            splat: i,
            t_cam: t,
            mean: (u, v),
            cov: (a, b, c),
            inv,
            color: s.color,
            opacity: s.opacity,
            radius: (params.q_cut * lam_max).sqrt() + 1.0,
            g_mean: (0.0, 0.0),
            g_cov: (0.0, 0.0, 0.0),
            g_opacity: 0.0,
            g_color: [0.0; 3],
        });
    }
    entries.sort_by(|x, y| x.t_cam.z.total_cmp(&y.t_cam.z).then(x.splat.cmp(&y.splat)));
    entries
}

fn bbox(e: &GradEntry, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = (e.mean.0 - e.radius).floor().max(0.0);
    let x1 = (e.mean.0 + e.radius).ceil().min(w as f64 - 1.0);
    let y0 = (e.mean.1 - e.radius).floor().max(0.0);
    let y1 = (e.mean.1 + e.radius).ceil().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

#[inline]
fn splat_alpha(e: &GradEntry, dx: f64, dy: f64, q_cut: f64) -> Option<(f64, f64)> {
    let q = e.inv.0 * dx * dx + 2.0 * e.inv.1 * dx * dy + e.inv.2 * dy * dy;
    if q > q_cut || q < 0.0 {
        return None;
    }
    let g = (-0.5 * q).exp();
    Some((q, (e.opacity * g).min(ALPHA_CEIL)))
}

/// Forward composite in f64. Returns interleaved RGB colors per pixel.
fn forward(entries: &[GradEntry], w: usize, h: usize, q_cut: f64) -> (Vec<f64>, Vec<f64>) {
    let npix = w * h;
    let mut color = vec![0.0f64; npix * 3];
    let mut transmit = vec![1.0f64; npix];
    for e in entries {
        let Some((x0, x1, y0, y1)) = bbox(e, w, h) else { continue };
        for py in y0..=y1 {
            let dy = py as f64 + 0.5 - e.mean.1;
            for px in x0..=x1 {
                let p = py * w + px;
                let dx = px as f64 + 0.5 - e.mean.0;
                let Some((_q, alpha)) = splat_alpha(e, dx, dy, q_cut) else { continue };
                let wgt = transmit[p] * alpha;
                for ch in 0..3 {
                    color[p * 3 + ch] += wgt * e.color[ch];
                }
                transmit[p] *= 1.0 - alpha;
            }
        }
    }
    (color, transmit)
}

/// Loss of one capture given its rendered colors: mean |render - target| over
/// pixels and channels.
fn capture_loss(color: &[f64], target: &crate::image::ImageRgb) -> f64 {
    let n = color.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += (color[i] - target.data[i] as f64).abs();
    }
    acc / n as f64
}

/// Mean L1 loss over the capture batch with the gradient renderer. This is
/// the exact function refined by `refine_bounded`, so finite differences of
/// it validate `loss_and_gradients`.
pub fn batch_loss(field: &GaussianField, captures: &[Capture], params: &RenderParams) -> f64 {
    let mut total = 0.0;
    for cap in captures {
        let cam = cap.pose.camera(cap.image.width, cap.image.height);
        let entries = build_entries(field, &cam, params);
        let (color, _) = forward(&entries, cam.width, cam.height, params.q_cut);
        total += capture_loss(&color, &cap.image);
    }
    total / captures.len().max(1) as f64
}

/// Computes the batch loss and per-splat analytic gradients.
pub fn loss_and_gradients(
    field: &GaussianField,
    captures: &[Capture],
    params: &RenderParams,
) -> (f64, Vec<SplatGrads>) {
    let mut grads = vec![SplatGrads::default(); field.len()];
    let mut total_loss = 0.0;
    let inv_caps = 1.0 / captures.len().max(1) as f64;
    for cap in captures {
        let cam = cap.pose.camera(cap.image.width, cap.image.height);
        let mut entries = build_entries(field, &cam, params);
        let (w, h) = (cam.width, cam.height);
        let npix = w * h;
        let (color, transmit_final) = forward(&entries, w, h, params.q_cut);
        total_loss += capture_loss(&color, &cap.image) * inv_caps;

        // dL/dC per pixel channel for mean-L1; zero residual has a zero
        // subgradient, making an exact match a fixed point.
        let norm = inv_caps / (npix * 3) as f64;
        let mut dldc = vec![0.0f64; npix * 3];
        for i in 0..npix * 3 {
            let r = color[i] - cap.image.data[i] as f64;
            dldc[i] = if r > 0.0 {
                norm
            } else if r < 0.0 {
                -norm
            } else {
                0.0
            };
        }

        // Reverse sweep: walk entries back to front, reconstructing the
        // transmittance in front of each entry and the suffix color sums.
        let mut t_cur = transmit_final;
        let mut suffix = vec![0.0f64; npix * 3];
        for e in entries.iter_mut().rev() {
            let Some((x0, x1, y0, y1)) = bbox(e, w, h) else { continue };
            for py in y0..=y1 {
                let dy = py as f64 + 0.5 - e.mean.1;
                for px in x0..=x1 {
                    let p = py * w + px;
                    let dx = px as f64 + 0.5 - e.mean.0;
                    let Some((q, alpha)) = splat_alpha(e, dx, dy, params.q_cut) else {
                        continue;
                    };
                    let one_minus = 1.0 - alpha;
                    let t_front = t_cur[p] / one_minus;
                    let wgt = t_front * alpha;
                    // dL/dalpha via this pixel, all channels.
                    let mut dl_dalpha = 0.0;
                    for ch in 0..3 {
                        let g = dldc[p * 3 + ch];
                        e.g_color[ch] += g * wgt;
                        dl_dalpha += g * (e.color[ch] * t_front - suffix[p * 3 + ch] / one_minus);
                    }
                    let g = alpha / e.opacity; // exp term, <= 1
                    e.g_opacity += dl_dalpha * g;
                    // alpha = opacity * exp(-q/2): dalpha/dq = -alpha/2.
                    let dl_dq = dl_dalpha * (-0.5 * alpha);
                    let (ia, ib, ic) = e.inv;
                    // q depends on the offset (dx, dy) = pixel - mean.
                    let dq_ddx = 2.0 * (ia * dx + ib * dy);
                    let dq_ddy = 2.0 * (ib * dx + ic * dy);
                    e.g_mean.0 -= dl_dq * dq_ddx;
                    e.g_mean.1 -= dl_dq * dq_ddy;
                    // q = N / det with N the adjugate quadratic form; its
                    // derivative w.r.t. the covariance entries (b counted
                    // once for both off-diagonal slots):
                    let det = e.cov.0 * e.cov.2 - e.cov.1 * e.cov.1;
                    e.g_cov.0 += dl_dq * (dy * dy - q * e.cov.2) / det;
                    e.g_cov.1 += dl_dq * (-2.0 * dx * dy + 2.0 * q * e.cov.1) / det;
                    e.g_cov.2 += dl_dq * (dx * dx - q * e.cov.0) / det;
                    // Step the per-pixel state to "in front of this entry".
                    for ch in 0..3 {
                        suffix[p * 3 + ch] += wgt * e.color[ch];
                    }
                    t_cur[p] = t_front;
                }
            }
        }

        // Chain entry adjoints back to world-space splat parameters.
        for e in &entries {
            let s = &field.splats()[e.splat];
            let g = &mut grads[e.splat];
            for ch in 0..3 {
                g.color[ch] += e.g_color[ch];
            }
            g.opacity += e.g_opacity;

            let t = e.t_cam;
            let inv_z = 1.0 / t.z;
            // Mean path: du/dt, dv/dt.
            let mut g_t = vec3(
                e.g_mean.0 * cam.fx * inv_z,
                e.g_mean.1 * cam.fy * inv_z,
                -e.g_mean.0 * cam.fx * t.x * inv_z * inv_z
                    - e.g_mean.1 * cam.fy * t.y * inv_z * inv_z,
            );
            // Covariance path: Sigma = J P J^T with J a function of t.
            let j = jacobian(&cam, t);
            let pcam = cam.rot.mul_mat(&s.covariance()).mul_mat(&cam.rot.transpose());
            // P J^T (3x2).
            let mut pjt = [[0.0f64; 2]; 3];
            for r in 0..3 {
                for c in 0..2 {
                    for k in 0..3 {
                        pjt[r][c] += pcam.m[r][k] * j[c][k];
                    }
                }
            }
            let iz2 = inv_z * inv_z;
            let jk_list: [[[f64; 3]; 2]; 3] = [
                [[0.0, 0.0, -cam.fx * iz2], [0.0, 0.0, 0.0]],
                [[0.0, 0.0, 0.0], [0.0, 0.0, -cam.fy * iz2]],
                [
                    [-cam.fx * iz2, 0.0, 2.0 * cam.fx * t.x * iz2 * inv_z],
                    [0.0, -cam.fy * iz2, 2.0 * cam.fy * t.y * iz2 * inv_z],
                ],
            ];
            for (k, jk) in jk_list.iter().enumerate() {
                // M_k = J_k (P J^T): contributes J_k P J^T + its transpose.
                let mut mk = [[0.0f64; 2]; 2];
                for r in 0..2 {
                    for c in 0..2 {
                        for m in 0..3 {
                            mk[r][c] += jk[r][m] * pjt[m][c];
                        }
                    }
                }
                let d = e.g_cov.0 * 2.0 * mk[0][0]
                    + e.g_cov.1 * (mk[0][1] + mk[1][0])
                    + e.g_cov.2 * 2.0 * mk[1][1];
                match k {
                    0 => g_t.x += d,
                    1 => g_t.y += d,
                    _ => g_t.z += d,
                }
            }
            // t = R_w2c (x - eye) so dL/dx = R^T dL/dt.
            let gx = cam.rot.transpose().mul_vec(g_t);
            g.position = g.position + gx;

            // Scale path: dSigma/ds_k = 2 s_k (M r_k)(M r_k)^T with M = J W.
            let rot = s.rotation.rotation_matrix();
            let mut m = [[0.0f64; 3]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    for k in 0..3 {
                        m[r][c] += j[r][k] * cam.rot.m[k][c];
                    }
                }
            }
            for k in 0..3 {
                let col = vec3(rot.m[0][k], rot.m[1][k], rot.m[2][k]);
                let m0 = m[0][0] * col.x + m[0][1] * col.y + m[0][2] * col.z;
                let m1 = m[1][0] * col.x + m[1][1] * col.y + m[1][2] * col.z;
                let sk = [s.scale.x, s.scale.y, s.scale.z][k];
                // g_cov.1 is the adjoint of the single symmetric off-diagonal
                // entry, so the xy term is counted once.
                let d = 2.0
                    * sk
                    * (e.g_cov.0 * m0 * m0 + e.g_cov.1 * m0 * m1 + e.g_cov.2 * m1 * m1);
                match k {
                    0 => g.scale.x += d,
                    1 => g.scale.y += d,
                    _ => g.scale.z += d,
                }
            }
        }
    }
    (total_loss, grads)
}

/// Gradient-descent refinement. The loss trace has `iterations + 1` entries,
/// the first being the initial loss; low-opacity splats are pruned at the
/// end.
pub fn refine_bounded(
    field: &mut GaussianField,
    captures: &[Capture],
    opts: &RefineOptions,
) -> Result<RefineReport> {
    if captures.is_empty() {
        return Err(Error::Config("refinement requires at least one capture".into()));
    }
    let diag = field.bounds().diagonal().max(1e-6);
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    for _ in 0..opts.iterations {
        let (loss, grads) = loss_and_gradients(field, captures, &opts.render);
        trace.push(loss);
        let lr = opts.learning_rate;
        field.apply_updates(|i, s| {
            let g = &grads[i];
            s.position = s.position - g.position * (lr * LR_POSITION * diag);
            for ch in 0..3 {
                s.color[ch] = (s.color[ch] - lr * LR_COLOR * g.color[ch]).clamp(0.0, 1.0);
            }
            s.opacity = (s.opacity - lr * LR_OPACITY * g.opacity).clamp(OPACITY_MIN, OPACITY_MAX);
            // Multiplicative update = descent in log-scale coordinates.
            let gs = [g.scale.x * s.scale.x, g.scale.y * s.scale.y, g.scale.z * s.scale.z];
            s.scale.x = (s.scale.x * (-lr * LR_LOG_SCALE * gs[0]).exp()).clamp(1e-6 * diag, diag);
            s.scale.y = (s.scale.y * (-lr * LR_LOG_SCALE * gs[1]).exp()).clamp(1e-6 * diag, diag);
            s.scale.z = (s.scale.z * (-lr * LR_LOG_SCALE * gs[2]).exp()).clamp(1e-6 * diag, diag);
        });
    }
    trace.push(batch_loss(field, captures, &opts.render));
    let pruned = field.prune(opts.prune_opacity);
    Ok(RefineReport { loss_trace: trace, pruned })
}

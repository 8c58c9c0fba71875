//! View prior: proposes an ensemble of latent hypotheses for what a candidate
//! viewpoint would reveal. The synthetic prior renders the current field at
//! latent resolution and perturbs it with noise whose power grows where the
//! ground has been observed least, standing in for a learned generative model.
//! An external process can replace the proposal through a stdio byte
//! protocol.

use crate::error::{Error, Result};
use crate::field::{render_view, GaussianField, RenderParams};
use crate::image::ImageRgb;
use crate::math::mix_seed3;
use crate::scene::Pose;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use std::io::{Read, Write};

pub const LATENT_CHANNELS: usize = 4;
const DEFAULT_LATENT: usize = 64;
const DEFAULT_MEMBERS: usize = 5;
const DEFAULT_NOISE_GAIN: f64 = 0.25;
/// Fraction of latent locations left noise-free in each member.
const DEFAULT_DROP_PROB: f64 = 0.15;

/// Knobs for the ensemble proposal. Deserializable so experiment configs can
/// override individual fields; `validate` enforces the module preconditions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub members: usize,
    pub channels: usize,
    pub latent_width: usize,
    pub latent_height: usize,
    pub noise_gain: f64,
    pub drop_prob: f64,
}

impl Default for PriorConfig {
    fn default() -> PriorConfig {
        PriorConfig {
            members: DEFAULT_MEMBERS,
            channels: LATENT_CHANNELS,
            latent_width: DEFAULT_LATENT,
            latent_height: DEFAULT_LATENT,
            noise_gain: DEFAULT_NOISE_GAIN,
            drop_prob: DEFAULT_DROP_PROB,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::Config(format!(
                "ensemble needs >= 2 members, got {}",
                self.members
            )));
        }
        if self.channels != LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "latent channel count is fixed at {}, got {}",
                LATENT_CHANNELS, self.channels
            )));
        }
        if self.latent_width < 4 || self.latent_height < 4 {
            return Err(Error::Config("latent resolution below 4x4".into()));
        }
        if !(self.noise_gain >= 0.0) {
            return Err(Error::Config("noise gain must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "drop probability must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// Dense row-major [channels][height][width] tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize) -> Tensor {
        Tensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
    }
}

/// One ensemble member: a diagonal Gaussian over latent space, described by
/// its mean and per-location variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mean: Tensor,
    pub variance: Tensor,
}

/// Ensemble of latent hypotheses for one candidate pose, with each member
/// decoded to an image at latent resolution (decoded[i] is exactly
/// decode(samples[i])).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEnsemble {
    pub samples: Vec<LatentSample>,
    pub pose: Pose,
    pub decoded: Vec<ImageRgb>,
}

impl LatentEnsemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The two members with the smallest mean-tensor L2 norms, ordered by
    /// (norm, index) with ties broken toward the lower index. Deterministic
    /// and stable under member permutation, so downstream pairwise
    /// comparisons never depend on sampling order.
    pub fn canonical_pair(&self) -> Result<(usize, usize)> {
        if self.samples.len() < 2 {
            return Err(Error::Dimension(format!(
                "canonical pair needs >= 2 members, have {}",
                self.samples.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let norms: Vec<f64> = self.samples.iter().map(|s| s.mean.l2_norm()).collect();
        order.sort_by(|a, b| {
            norms[*a].partial_cmp(&norms[*b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b))
        });
        Ok((order[0], order[1]))
    }

    /// Pointwise average of the member means.
    pub fn merged_mean(&self) -> Result<Tensor> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Dimension("cannot merge an empty ensemble".into()))?;
        let mut out = Tensor::new(first.mean.channels, first.mean.height, first.mean.width);
        let inv = 1.0 / self.samples.len() as f32;
        for s in &self.samples {
            if s.mean.data.len() != out.data.len() {
                return Err(Error::Dimension("ensemble members disagree on shape".into()));
            }
            for (o, v) in out.data.iter_mut().zip(&s.mean.data) {
                *o += v * inv;
            }
        }
        Ok(out)
    }
}

/// Ground-plane view-coverage counts: how many recorded views have seen each
/// cell of the scene footprint. Drives the noise deficit of unseen regions.
#[derive(Debug, Clone)]
pub struct ObservationMap {
    counts: Vec<u32>,
    resolution: usize,
    extent: f64,
    plane_z: f64,
}

impl ObservationMap {
    pub fn new(resolution: usize, extent: f64, plane_z: f64) -> Result<ObservationMap> {
        if resolution == 0 || !(extent > 0.0) {
            return Err(Error::Config("observation map needs positive resolution and extent".into()));
        }
        Ok(ObservationMap { counts: vec![0; resolution * resolution], resolution, extent, plane_z })
    }

    fn cell(&self, x: f64, y: f64) -> Option<usize> {
        let half = self.extent / 2.0;
        if x < -half || x > half || y < -half || y > half {
            return None;
        }
        let gx = (((x + half) / self.extent) * self.resolution as f64) as usize;
        let gy = (((y + half) / self.extent) * self.resolution as f64) as usize;
        Some(gy.min(self.resolution - 1) * self.resolution + gx.min(self.resolution - 1))
    }

    /// Casts a ray grid from the pose and increments every footprint cell the
    /// view covers, each cell at most once per call.
    pub fn record_view(&mut self, pose: &Pose, rays: usize) {
        let cam = pose.camera(rays.max(2), rays.max(2));
        let mut hit = vec![false; self.counts.len()];
        for py in 0..cam.height {
            for px in 0..cam.width {
                let dir = cam.pixel_ray(px as f64 + 0.5, py as f64 + 0.5);
                if dir.z.abs() < 1e-12 {
                    continue;
                }
                let t = (self.plane_z - cam.eye.z) / dir.z;
                if t <= 0.0 {
                    continue;
                }
                let p = cam.eye + dir * t;
                if let Some(c) = self.cell(p.x, p.y) {
                    hit[c] = true;
                }
            }
        }
        for (c, h) in hit.iter().enumerate() {
            if *h {
                self.counts[c] += 1;
            }
        }
    }

    pub fn count_at(&self, x: f64, y: f64) -> u32 {
        self.cell(x, y).map(|c| self.counts[c]).unwrap_or(0)
    }

    /// 1 / (1 + views); 1 for never-observed ground, decaying toward 0.
    pub fn deficit(&self, x: f64, y: f64) -> f64 {
        1.0 / (1.0 + self.count_at(x, y) as f64)
    }

    pub fn coverage_fraction(&self) -> f64 {
        let seen = self.counts.iter().filter(|c| **c > 0).count();
        seen as f64 / self.counts.len() as f64
    }
}

/// Source of latent view hypotheses. Object safe so priors can be swapped at
/// run time.
pub trait ViewPrior {
    /// Tells the prior a view was captured, shrinking its uncertainty there.
    fn note_captured_view(&mut self, pose: &Pose);
    /// Proposes an ensemble for the candidate pose given the current field.
    fn sample_ensemble(
        &self,
        field: &GaussianField,
        pose: &Pose,
        seed: u64,
    ) -> Result<LatentEnsemble>;
    /// Decodes one member to an image at the requested resolution.
    fn decode(&self, sample: &LatentSample, width: usize, height: usize) -> Result<ImageRgb>;
    fn latent_size(&self) -> (usize, usize);
    fn member_count(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct SyntheticPrior {
    pub latent: (usize, usize),
    pub members: usize,
    pub noise_gain: f64,
    pub drop_prob: f64,
    observations: ObservationMap,
}

impl SyntheticPrior {
    pub fn new(footprint_extent: f64) -> Result<SyntheticPrior> {
        SyntheticPrior::with_options(
            footprint_extent,
            (DEFAULT_LATENT, DEFAULT_LATENT),
            DEFAULT_MEMBERS,
            DEFAULT_NOISE_GAIN,
            DEFAULT_DROP_PROB,
        )
    }

    pub fn with_options(
        footprint_extent: f64,
        latent: (usize, usize),
        members: usize,
        noise_gain: f64,
        drop_prob: f64,
    ) -> Result<SyntheticPrior> {
        let config = PriorConfig {
            members,
            channels: LATENT_CHANNELS,
            latent_width: latent.0,
            latent_height: latent.1,
            noise_gain,
            drop_prob,
        };
        SyntheticPrior::from_config(footprint_extent, &config)
    }

    pub fn from_config(footprint_extent: f64, config: &PriorConfig) -> Result<SyntheticPrior> {
        config.validate()?;
        Ok(SyntheticPrior {
            latent: (config.latent_width, config.latent_height),
            members: config.members,
            noise_gain: config.noise_gain,
            drop_prob: config.drop_prob,
            observations: ObservationMap::new(48, footprint_extent, 0.0)?,
        })
    }

    pub fn observations(&self) -> &ObservationMap {
        &self.observations
    }

    /// Renders the field into the base latent: channels R, G, B plus
    /// accumulated alpha.
    fn base_latent(&self, field: &GaussianField, pose: &Pose) -> Result<Tensor> {
        let (lw, lh) = self.latent;
        let cam = pose.camera(lw, lh);
        let out = render_view(field, &cam, None, &RenderParams::default())?;
        let mut t = Tensor::new(LATENT_CHANNELS, lh, lw);
        for y in 0..lh {
            for x in 0..lw {
                let rgb = out.image.get(x, y);
                t.set(0, y, x, rgb[0]);
                t.set(1, y, x, rgb[1]);
                t.set(2, y, x, rgb[2]);
                t.set(3, y, x, out.alpha.get(x, y));
            }
        }
        Ok(t)
    }
}

impl ViewPrior for SyntheticPrior {
    fn note_captured_view(&mut self, pose: &Pose) {
        // Ray grid at least twice the map resolution so no covered cell falls
        // between rays.
        let rays = self.latent.0.max(self.latent.1).max(2 * self.observations.resolution);
        self.observations.record_view(pose, rays);
    }

    fn sample_ensemble(
        &self,
        field: &GaussianField,
        pose: &Pose,
        seed: u64,
    ) -> Result<LatentEnsemble> {
        let base = self.base_latent(field, pose)?;
        let (lw, lh) = self.latent;
        let cam = pose.camera(lw, lh);
        // Per-location deficit from the ground-plane intersection of each
        // latent pixel ray; rays that miss the footprint count as unseen.
        let mut deficit = vec![1.0f64; lw * lh];
        for y in 0..lh {
            for x in 0..lw {
                let dir = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                if dir.z.abs() < 1e-12 {
                    continue;
                }
                let t = (self.observations.plane_z - cam.eye.z) / dir.z;
                if t <= 0.0 {
                    continue;
                }
                let p = cam.eye + dir * t;
                deficit[y * lw + x] = self.observations.deficit(p.x, p.y);
            }
        }
        let normal = rand_distr::StandardNormal;
        let mut samples = Vec::with_capacity(self.members);
        for m in 0..self.members {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed3(seed, 0x970a, m as u64));
            let mut mean = base.clone();
            let mut variance = Tensor::new(LATENT_CHANNELS, lh, lw);
            for y in 0..lh {
                for x in 0..lw {
                    // One drop draw and one spatial noise scale per location,
                    // shared across channels.
                    let dropped = rand::Rng::gen_bool(&mut rng, self.drop_prob);
                    let sigma = if dropped {
                        0.0
                    } else {
                        self.noise_gain * (1.0 + deficit[y * lw + x])
                    };
                    for c in 0..LATENT_CHANNELS {
                        let z: f64 = normal.sample(&mut rng);
                        let i = mean.idx(c, y, x);
                        mean.data[i] += (sigma * z) as f32;
                        variance.data[i] = (sigma * sigma) as f32;
                    }
                }
            }
            samples.push(LatentSample { mean, variance });
        }
        let decoded = samples
            .iter()
            .map(|s| decode_sample(s, lw, lh))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentEnsemble { samples, pose: *pose, decoded })
    }

    fn decode(&self, sample: &LatentSample, width: usize, height: usize) -> Result<ImageRgb> {
        decode_sample(sample, width, height)
    }

    fn latent_size(&self) -> (usize, usize) {
        self.latent
    }

    fn member_count(&self) -> usize {
        self.members
    }
}

/// Maps the first three latent channels to RGB, resamples to the target size,
/// and clamps to the displayable range.
pub fn decode_sample(sample: &LatentSample, width: usize, height: usize) -> Result<ImageRgb> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension("decode target resolution must be nonzero".into()));
    }
    let t = &sample.mean;
    if t.channels < 3 {
        return Err(Error::Dimension(format!(
            "latent has {} channels, need >= 3 to decode",
            t.channels
        )));
    }
    let mut latent_img = ImageRgb::new(t.width, t.height);
    for y in 0..t.height {
        for x in 0..t.width {
            latent_img.set(x, y, [t.get(0, y, x), t.get(1, y, x), t.get(2, y, x)]);
        }
    }
    let mut out = latent_img.resize_bilinear(width, height);
    out.clamp01();
    Ok(out)
}

const BRIDGE_MAGIC: &[u8; 4] = b"TSPB";
const BRIDGE_VERSION: u32 = 1;

/// Serializes an ensemble proposal for an external prior process. Decoded
/// images are omitted (the reader rebuilds them), and the response uses the
/// identical layout, so an identity process (`cat`) acts as a pass-through
/// prior.
pub fn write_bridge_message(w: &mut impl Write, ensemble: &LatentEnsemble) -> Result<()> {
    let first = ensemble
        .samples
        .first()
        .ok_or_else(|| Error::Dimension("cannot serialize an empty ensemble".into()))?;
    let (c, h, wd) = (first.mean.channels, first.mean.height, first.mean.width);
    w.write_all(BRIDGE_MAGIC)?;
    w.write_all(&BRIDGE_VERSION.to_le_bytes())?;
    w.write_all(&(ensemble.samples.len() as u32).to_le_bytes())?;
    for dim in [c, h, wd] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in [ensemble.pose.elevation, ensemble.pose.azimuth, ensemble.pose.radius] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &ensemble.samples {
        if s.mean.channels != c || s.mean.height != h || s.mean.width != wd {
            return Err(Error::Dimension("ensemble members disagree on shape".into()));
        }
        for t in [&s.mean, &s.variance] {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parses a bridge message and re-decodes each member; shape must match the
/// expectation exactly.
pub fn read_bridge_message(
    r: &mut impl Read,
    expect_members: usize,
    expect_shape: (usize, usize, usize),
) -> Result<LatentEnsemble> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BRIDGE_MAGIC {
        return Err(Error::Format(format!("bad prior bridge magic {:?}", magic)));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(r)?;
    if version != BRIDGE_VERSION {
        return Err(Error::Format(format!("unsupported prior bridge version {}", version)));
    }
    let members = read_u32(r)? as usize;
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let wd = read_u32(r)? as usize;
    if members != expect_members || (c, h, wd) != expect_shape {
        return Err(Error::Format(format!(
            "prior bridge shape {}x({},{},{}) does not match expected {}x{:?}",
            members, c, h, wd, expect_members, expect_shape
        )));
    }
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
        r.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let elevation = read_f64(r)?;
    let azimuth = read_f64(r)?;
    let radius = read_f64(r)?;
    let pose = Pose::new(elevation, azimuth, radius)?;
    let mut samples = Vec::with_capacity(members);
    let mut fbuf = vec![0u8; c * h * wd * 4];
    for _ in 0..members {
        let mut pair = Vec::with_capacity(2);
        for _ in 0..2 {
            r.read_exact(&mut fbuf)?;
            let mut t = Tensor::new(c, h, wd);
            for (i, chunk) in fbuf.chunks_exact(4).enumerate() {
                t.data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            pair.push(t);
        }
        let variance = pair.pop().unwrap();
        let mean = pair.pop().unwrap();
        samples.push(LatentSample { mean, variance });
    }
    let decoded = samples
        .iter()
        .map(|s| decode_sample(s, wd, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentEnsemble { samples, pose, decoded })
}

/// Prior that pipes the synthetic proposal through an external command and
/// uses whatever ensemble the process writes back.
pub struct ExternalPrior {
    inner: SyntheticPrior,
    command: Vec<String>,
}

impl ExternalPrior {
    pub fn new(inner: SyntheticPrior, command: Vec<String>) -> Result<ExternalPrior> {
        if command.is_empty() {
            return Err(Error::Config("external prior needs a command".into()));
        }
        Ok(ExternalPrior { inner, command })
    }
}

impl ViewPrior for ExternalPrior {
    fn note_captured_view(&mut self, pose: &Pose) {
        self.inner.note_captured_view(pose);
    }

    fn sample_ensemble(
        &self,
        field: &GaussianField,
        pose: &Pose,
        seed: u64,
    ) -> Result<LatentEnsemble> {
        let proposal = self.inner.sample_ensemble(field, pose, seed)?;
        let mut child = std::process::Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut request = Vec::new();
        write_bridge_message(&mut request, &proposal)?;
        // Writer thread so a slow child cannot deadlock on full pipes.
        let writer = std::thread::spawn(move || stdin.write_all(&request));
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (lw, lh) = self.inner.latent;
        let parsed = read_bridge_message(
            &mut stdout,
            self.inner.members,
            (LATENT_CHANNELS, lh, lw),
        );
        let write_res = writer.join().map_err(|_| Error::Format("bridge writer panicked".into()))?;
        let status = child.wait()?;
        write_res?;
        if !status.success() {
            return Err(Error::Format(format!("external prior exited with {}", status)));
        }
        parsed
    }

    fn decode(&self, sample: &LatentSample, width: usize, height: usize) -> Result<ImageRgb> {
        self.inner.decode(sample, width, height)
    }

    fn latent_size(&self) -> (usize, usize) {
        self.inner.latent_size()
    }

    fn member_count(&self) -> usize {
        self.inner.member_count()
    }
}

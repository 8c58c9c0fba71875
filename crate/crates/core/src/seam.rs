//! Seam optimization for tile overlaps: a color/semantic pairwise energy on
//! the pixel grid, solved exactly for two sources by min-cut and approximately
//! for more by label expansion. The semantic share of the energy grows with
//! patch uncertainty, steering seams away from pixels where candidate sources
//! disagree about scene content.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::maxflow::MaxFlow;
use crate::uncertainty::sobel_magnitude;

/// Unary cost that pins a node to a label; large but finite so energies stay
/// recomputable.
pub const HARD_UNARY: f64 = 1e9;
/// Pairwise denominator floor.
const DENOM_FLOOR: f64 = 1e-6;
/// Semantic gradient away from segment boundaries.
const OFF_BOUNDARY_GRADIENT: f64 = 1e-3;
/// Float weights are scaled by this and rounded before max-flow, making the
/// cut itself exact integer arithmetic.
const FLOW_SCALE: f64 = 1e6;
/// Expansion sweeps for tile patches; descent always terminates earlier once
/// a sweep stops improving.
const PATCH_SWEEPS: usize = 8;

/// Segmentation stand-in output: connected components over a quantized
/// palette. `classes` holds the palette cell per pixel and is comparable
/// across images segmented with the same quantization; `labels` are the
/// per-image connected components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    /// Connected-component id per pixel, each < `label_count`.
    pub labels: Vec<u32>,
    pub label_count: usize,
    /// Quantized palette cell per pixel.
    pub classes: Vec<u32>,
}

impl LabelMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn class(&self, x: usize, y: usize) -> u32 {
        self.classes[y * self.width + x]
    }

    /// True when any 4-neighbor belongs to a different component.
    pub fn on_boundary(&self, x: usize, y: usize) -> bool {
        let here = self.label(x, y);
        (x > 0 && self.label(x - 1, y) != here)
            || (x + 1 < self.width && self.label(x + 1, y) != here)
            || (y > 0 && self.label(x, y - 1) != here)
            || (y + 1 < self.height && self.label(x, y + 1) != here)
    }
}

/// Uniform color quantization into `q`^3 palette cells followed by 4-connected
/// component relabeling in scan order.
pub fn segment_labels(image: &ImageRgb, q: usize) -> Result<LabelMap> {
    if q < 2 {
        return Err(Error::Config("quantization needs at least 2 bins per channel".into()));
    }
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::Dimension("cannot segment an empty image".into()));
    }
    let bin = |v: f32| ((v.clamp(0.0, 1.0) as f64 * q as f64) as usize).min(q - 1) as u32;
    let mut classes = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.get(x, y);
            classes[y * w + x] = bin(r) * (q * q) as u32 + bin(g) * q as u32 + bin(b);
        }
    }

    let mut labels = vec![u32::MAX; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if labels[start] != u32::MAX {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut visit = |nx: usize, ny: usize| {
                let np = ny * w + nx;
                if labels[np] == u32::MAX && classes[np] == classes[p] {
                    labels[np] = next;
                    stack.push(np);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        next += 1;
    }
    Ok(LabelMap { width: w, height: h, labels, label_count: next as usize, classes })
}

/// Uncertainty-to-color-weight mapping: 1 - logistic(2(u - 0.5)). Strictly
/// decreasing, so high uncertainty shifts weight onto the semantic terms.
pub fn gamma_weight(u_bar: f64) -> f64 {
    1.0 / (1.0 + (2.0 * (u_bar - 0.5)).exp())
}

/// Per-edge energy ingredients: color and semantic divergence between the two
/// candidate sources, image and semantic gradient of the reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeamTerms {
    pub color_divergence: f64,
    pub semantic_divergence: f64,
    pub image_gradient: f64,
    pub semantic_gradient: f64,
}

/// Divergences over gradients, mixed by gamma; the denominator is floored so
/// the weight stays finite. Expects gamma in (0,1).
pub fn pairwise_weight(terms: &SeamTerms, gamma: f64) -> f64 {
    let num = gamma * terms.color_divergence + (1.0 - gamma) * terms.semantic_divergence;
    let den = gamma * terms.image_gradient + (1.0 - gamma) * terms.semantic_gradient;
    num / den.max(DENOM_FLOOR)
}

/// Pixel-grid energy: per-node unary costs plus, for every 4-neighbor edge, a
/// weight per unordered label pair paid when the seam separates that pair.
/// All weights are finite and nonnegative; hard constraints use [`HARD_UNARY`].
#[derive(Debug, Clone)]
pub struct SeamGraph {
    pub width: usize,
    pub height: usize,
    pub label_count: usize,
    /// (width-1)*height edges (x,y)-(x+1,y), each `pair_len()` weights.
    pair_h: Vec<f64>,
    /// width*(height-1) edges (x,y)-(x,y+1).
    pair_v: Vec<f64>,
    /// width*height*label_count node costs.
    unary: Vec<f64>,
}

impl SeamGraph {
    pub fn new(width: usize, height: usize, label_count: usize) -> Result<SeamGraph> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("seam graph has no nodes".into()));
        }
        if label_count < 2 {
            return Err(Error::Config("seam graph needs at least two labels".into()));
        }
        let pairs = label_count * (label_count - 1) / 2;
        Ok(SeamGraph {
            width,
            height,
            label_count,
            pair_h: vec![0.0; (width - 1) * height * pairs],
            pair_v: vec![0.0; width * (height - 1) * pairs],
            unary: vec![0.0; width * height * label_count],
        })
    }

    /// Same weight for every label pair of an edge (a Potts energy).
    pub fn with_potts_weights(
        width: usize,
        height: usize,
        label_count: usize,
        horizontal: &[f64],
        vertical: &[f64],
    ) -> Result<SeamGraph> {
        let mut graph = SeamGraph::new(width, height, label_count)?;
        if horizontal.len() != (width - 1) * height || vertical.len() != width * (height - 1) {
            return Err(Error::Dimension("edge weight counts do not match the grid".into()));
        }
        for w in horizontal.iter().chain(vertical) {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Integrity("edge weights must be finite and nonnegative".into()));
            }
        }
        let pairs = graph.pair_len();
        for (e, &w) in horizontal.iter().enumerate() {
            graph.pair_h[e * pairs..(e + 1) * pairs].fill(w);
        }
        for (e, &w) in vertical.iter().enumerate() {
            graph.pair_v[e * pairs..(e + 1) * pairs].fill(w);
        }
        Ok(graph)
    }

    fn pair_len(&self) -> usize {
        self.label_count * (self.label_count - 1) / 2
    }

    fn pair_index(&self, a: u32, b: u32) -> usize {
        let (lo, hi) = if a < b { (a as usize, b as usize) } else { (b as usize, a as usize) };
        let l = self.label_count;
        lo * (2 * l - lo - 1) / 2 + (hi - lo - 1)
    }

    pub fn node(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Weight of the horizontal edge (x,y)-(x+1,y) separating labels a and b.
    pub fn weight_h(&self, x: usize, y: usize, a: u32, b: u32) -> f64 {
        if a == b {
            return 0.0;
        }
        self.pair_h[(y * (self.width - 1) + x) * self.pair_len() + self.pair_index(a, b)]
    }

    pub fn weight_v(&self, x: usize, y: usize, a: u32, b: u32) -> f64 {
        if a == b {
            return 0.0;
        }
        self.pair_v[(y * self.width + x) * self.pair_len() + self.pair_index(a, b)]
    }

    pub fn set_pair_weight_h(&mut self, x: usize, y: usize, a: u32, b: u32, w: f64) {
        let i = (y * (self.width - 1) + x) * self.pair_len() + self.pair_index(a, b);
        self.pair_h[i] = w;
    }

    pub fn set_pair_weight_v(&mut self, x: usize, y: usize, a: u32, b: u32, w: f64) {
        let i = (y * self.width + x) * self.pair_len() + self.pair_index(a, b);
        self.pair_v[i] = w;
    }

    pub fn unary(&self, x: usize, y: usize, label: u32) -> f64 {
        self.unary[self.node(x, y) * self.label_count + label as usize]
    }

    pub fn set_unary(&mut self, x: usize, y: usize, label: u32, cost: f64) {
        let i = self.node(x, y) * self.label_count + label as usize;
        self.unary[i] = cost;
    }

    /// Forces a node to `label`: zero cost there, [`HARD_UNARY`] elsewhere.
    pub fn pin_node(&mut self, x: usize, y: usize, label: u32) {
        for l in 0..self.label_count as u32 {
            self.set_unary(x, y, l, if l == label { 0.0 } else { HARD_UNARY });
        }
    }

    pub fn forbid_label(&mut self, x: usize, y: usize, label: u32) {
        self.set_unary(x, y, label, HARD_UNARY);
    }

    /// Total energy of an assignment: chosen unary costs plus the weight of
    /// every edge whose endpoints disagree.
    pub fn energy_of(&self, assignment: &[u32]) -> Result<f64> {
        if assignment.len() != self.width * self.height {
            return Err(Error::Dimension("assignment length does not match the grid".into()));
        }
        if assignment.iter().any(|&l| l as usize >= self.label_count) {
            return Err(Error::Integrity("assignment uses an out-of-range label".into()));
        }
        let mut energy = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let a = assignment[self.node(x, y)];
                energy += self.unary(x, y, a);
                if x + 1 < self.width {
                    energy += self.weight_h(x, y, a, assignment[self.node(x + 1, y)]);
                }
                if y + 1 < self.height {
                    energy += self.weight_v(x, y, a, assignment[self.node(x, y + 1)]);
                }
            }
        }
        Ok(energy)
    }

    /// Builds the label-pair weights from one source per label. Color
    /// divergence compares sources at the seam pixels, semantic divergence
    /// compares their palette classes, and both gradient terms come from the
    /// reference source.
    pub fn from_sources(sources: &[SeamSource<'_>], reference: usize, gamma: f64) -> Result<SeamGraph> {
        if sources.len() < 2 {
            return Err(Error::Config("seam graph needs at least two sources".into()));
        }
        if reference >= sources.len() {
            return Err(Error::Config("reference index out of range".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config("gamma must lie strictly inside (0,1)".into()));
        }
        let (w, h) = (sources[0].image.width, sources[0].image.height);
        for s in sources {
            if s.image.width != w
                || s.image.height != h
                || s.labels.width != w
                || s.labels.height != h
            {
                return Err(Error::Dimension("seam sources must share one resolution".into()));
            }
        }
        let mut graph = SeamGraph::new(w, h, sources.len())?;
        let grad = sobel_magnitude(&sources[reference].image.to_gray())?;
        let boundary = |x: usize, y: usize| sources[reference].labels.on_boundary(x, y);

        let color_div = |a: usize, b: usize, x: usize, y: usize| {
            let ca = sources[a].image.get(x, y);
            let cb = sources[b].image.get(x, y);
            let dr = (ca[0] - cb[0]) as f64;
            let dg = (ca[1] - cb[1]) as f64;
            let db = (ca[2] - cb[2]) as f64;
            (dr * dr + dg * dg + db * db).sqrt()
        };
        let class_eq = |a: usize, b: usize, x: usize, y: usize| {
            sources[a].labels.class(x, y) == sources[b].labels.class(x, y)
        };

        let fill = |graph: &mut SeamGraph, x: usize, y: usize, nx: usize, ny: usize, horizontal: bool| {
            let g_i = 0.5 * (grad.get(x, y) as f64 + grad.get(nx, ny) as f64);
            let g_s = if boundary(x, y) || boundary(nx, ny) { 1.0 } else { OFF_BOUNDARY_GRADIENT };
            for a in 0..sources.len() {
                for b in (a + 1)..sources.len() {
                    let terms = SeamTerms {
                        color_divergence: 0.5 * (color_div(a, b, x, y) + color_div(a, b, nx, ny)),
                        semantic_divergence: if class_eq(a, b, x, y) && class_eq(a, b, nx, ny) {
                            0.0
                        } else {
                            1.0
                        },
                        image_gradient: g_i,
                        semantic_gradient: g_s,
                    };
                    let weight = pairwise_weight(&terms, gamma);
                    if horizontal {
                        graph.set_pair_weight_h(x, y, a as u32, b as u32, weight);
                    } else {
                        graph.set_pair_weight_v(x, y, a as u32, b as u32, weight);
                    }
                }
            }
        };
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    fill(&mut graph, x, y, x + 1, y, true);
                }
                if y + 1 < h {
                    fill(&mut graph, x, y, x, y + 1, false);
                }
            }
        }
        Ok(graph)
    }
}

/// One candidate source for a seam: its pixels plus its segmentation.
#[derive(Debug, Clone, Copy)]
pub struct SeamSource<'a> {
    pub image: &'a ImageRgb,
    pub labels: &'a LabelMap,
}

/// Solved seam: per-pixel source labels, the recomputable energy, and the
/// pixels adjacent to a label change.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeamResult {
    pub width: usize,
    pub height: usize,
    pub assignment: Vec<u32>,
    pub energy: f64,
    pub seam_pixels: Vec<(usize, usize)>,
    /// Expansion edges clamped to keep the cut submodular; zero for any
    /// metric energy, including everything built by this module.
    pub truncated_edges: usize,
}

impl SeamResult {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.assignment[y * self.width + x]
    }

    /// Label map rendered through a small fixed palette, as binary PPM.
    pub fn write_indexed_ppm<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        const PALETTE: [[u8; 3]; 8] = [
            [230, 80, 60],
            [70, 150, 230],
            [90, 200, 110],
            [235, 200, 70],
            [170, 100, 220],
            [80, 210, 200],
            [230, 140, 60],
            [150, 150, 150],
        ];
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut row = Vec::with_capacity(self.width * 3);
        for y in 0..self.height {
            row.clear();
            for x in 0..self.width {
                row.extend_from_slice(&PALETTE[self.label(x, y) as usize % PALETTE.len()]);
            }
            out.write_all(&row)?;
        }
        Ok(())
    }
}

fn seam_pixels(width: usize, height: usize, assignment: &[u32]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let here = assignment[y * width + x];
            let differs = (x > 0 && assignment[y * width + x - 1] != here)
                || (x + 1 < width && assignment[y * width + x + 1] != here)
                || (y > 0 && assignment[(y - 1) * width + x] != here)
                || (y + 1 < height && assignment[(y + 1) * width + x] != here);
            if differs {
                out.push((x, y));
            }
        }
    }
    out
}

fn scale_cap(w: f64) -> u64 {
    (w * FLOW_SCALE).round() as u64
}

fn result_from_assignment(graph: &SeamGraph, assignment: Vec<u32>, truncated: usize) -> Result<SeamResult> {
    let energy = graph.energy_of(&assignment)?;
    let pixels = seam_pixels(graph.width, graph.height, &assignment);
    Ok(SeamResult {
        width: graph.width,
        height: graph.height,
        assignment,
        energy,
        seam_pixels: pixels,
        truncated_edges: truncated,
    })
}

/// Exact two-label cut. Unary costs become terminal links after per-node
/// normalization, every grid edge becomes a symmetric capacity, and the
/// residual reachability side of the max-flow gives the assignment.
pub fn min_cut_binary(graph: &SeamGraph) -> Result<SeamResult> {
    if graph.label_count != 2 {
        return Err(Error::Config("binary cut requires exactly two labels".into()));
    }
    let n = graph.width * graph.height;
    let (source, sink) = (n, n + 1);
    let mut net = MaxFlow::new(n + 2);
    for y in 0..graph.height {
        for x in 0..graph.width {
            let p = graph.node(x, y);
            let c0 = graph.unary(x, y, 0);
            let c1 = graph.unary(x, y, 1);
            let m = c0.min(c1);
            // Source side pays the label-0 cost, sink side the label-1 cost.
            if c1 > m {
                net.add_edge(source, p, scale_cap(c1 - m), 0);
            }
            if c0 > m {
                net.add_edge(p, sink, scale_cap(c0 - m), 0);
            }
            if x + 1 < graph.width {
                let c = scale_cap(graph.weight_h(x, y, 0, 1));
                if c > 0 {
                    net.add_edge(p, graph.node(x + 1, y), c, c);
                }
            }
            if y + 1 < graph.height {
                let c = scale_cap(graph.weight_v(x, y, 0, 1));
                if c > 0 {
                    net.add_edge(p, graph.node(x, y + 1), c, c);
                }
            }
        }
    }
    net.max_flow(source, sink);
    let side = net.min_cut_side(source);
    let assignment: Vec<u32> = (0..n).map(|p| if side[p] { 0 } else { 1 }).collect();
    result_from_assignment(graph, assignment, 0)
}

/// One expansion move: every node either keeps its label or switches to
/// `alpha`, solved as a binary cut. Returns the move's assignment and how
/// many edge terms had to be clamped to stay submodular.
fn expansion_move(graph: &SeamGraph, current: &[u32], alpha: u32) -> (Vec<u32>, usize) {
    let n = graph.width * graph.height;
    let (source, sink) = (n, n + 1);
    // keep = binary 0 (source side), switch to alpha = binary 1 (sink side).
    let mut cost_keep = vec![0.0f64; n];
    let mut cost_switch = vec![0.0f64; n];
    for y in 0..graph.height {
        for x in 0..graph.width {
            let p = graph.node(x, y);
            cost_keep[p] = graph.unary(x, y, current[p]);
            cost_switch[p] = graph.unary(x, y, alpha);
        }
    }

    let mut truncated = 0usize;
    let mut grid_edges = Vec::new();
    let mut visit_edge = |p: usize, q: usize, weight_of: &dyn Fn(u32, u32) -> f64| {
        let (cp, cq) = (current[p], current[q]);
        let a = weight_of(cp, cq);
        let b = weight_of(cp, alpha);
        let c = weight_of(alpha, cq);
        // Decompose E(xp,xq) over {keep,switch}: constant a, linear parts on
        // the switch costs, and a residual on (keep p, switch q).
        cost_switch[p] += c - a;
        cost_switch[q] -= c;
        let mut residual = b + c - a;
        if residual < 0.0 {
            truncated += 1;
            residual = 0.0;
        }
        if residual > 0.0 {
            grid_edges.push((p, q, scale_cap(residual)));
        }
    };
    for y in 0..graph.height {
        for x in 0..graph.width {
            let p = graph.node(x, y);
            if x + 1 < graph.width {
                let q = graph.node(x + 1, y);
                visit_edge(p, q, &|l, r| graph.weight_h(x, y, l, r));
            }
            if y + 1 < graph.height {
                let q = graph.node(x, y + 1);
                visit_edge(p, q, &|l, r| graph.weight_v(x, y, l, r));
            }
        }
    }

    let mut net = MaxFlow::new(n + 2);
    for p in 0..n {
        let m = cost_keep[p].min(cost_switch[p]);
        let keep = cost_keep[p] - m;
        let switch = cost_switch[p] - m;
        if switch > 0.0 {
            net.add_edge(source, p, scale_cap(switch), 0);
        }
        if keep > 0.0 {
            net.add_edge(p, sink, scale_cap(keep), 0);
        }
    }
    for (p, q, cap) in grid_edges {
        net.add_edge(p, q, cap, 0);
    }
    net.max_flow(source, sink);
    let side = net.min_cut_side(source);
    let assignment: Vec<u32> =
        (0..n).map(|p| if side[p] { current[p] } else { alpha }).collect();
    (assignment, truncated)
}

/// Label expansion: sweeps labels 0..L-1, adopting any move that lowers the
/// energy, until a full sweep stops improving or `max_sweeps` is reached.
/// Energy never increases between records.
pub fn alpha_expansion(graph: &SeamGraph, max_sweeps: usize) -> Result<SeamResult> {
    if max_sweeps == 0 {
        return Err(Error::Config("expansion needs at least one sweep".into()));
    }
    let n = graph.width * graph.height;
    // Start from the per-node unary argmin, ties toward the lowest label.
    let mut current: Vec<u32> = (0..n)
        .map(|p| {
            let (x, y) = (p % graph.width, p / graph.width);
            (0..graph.label_count as u32)
                .min_by(|&a, &b| {
                    graph
                        .unary(x, y, a)
                        .partial_cmp(&graph.unary(x, y, b))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap()
        })
        .collect();
    let mut energy = graph.energy_of(&current)?;
    let mut truncated = 0usize;
    for _ in 0..max_sweeps {
        let mut improved = false;
        for alpha in 0..graph.label_count as u32 {
            let (candidate, clamped) = expansion_move(graph, &current, alpha);
            truncated += clamped;
            let cand_energy = graph.energy_of(&candidate)?;
            if cand_energy < energy - 1e-12 {
                current = candidate;
                energy = cand_energy;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    result_from_assignment(graph, current, truncated)
}

/// One seam source with owned buffers, as assembled by tile construction.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub image: ImageRgb,
    pub labels: LabelMap,
}

impl PatchSource {
    pub fn as_seam_source(&self) -> SeamSource<'_> {
        SeamSource { image: &self.image, labels: &self.labels }
    }
}

/// Optimized tile overlap: the seam over center + four strips, the composited
/// image, and the gamma the energy was built with.
#[derive(Debug, Clone)]
pub struct TilePatch {
    pub seam: SeamResult,
    pub composite: ImageRgb,
    pub gamma: f64,
}

/// Strip order within a tile patch: center is label 0, then these.
pub const STRIP_LABELS: [&str; 4] = ["north", "east", "south", "west"];

/// Builds the 5-label seam for a tile: strips claim their outer edge, the
/// core keeps the center, and each strip is confined to its overlap band.
/// Corner pixels shared by two strips go to the first in north/east/south/west
/// order. The composite reads every pixel from its assigned source.
pub fn build_tile_patch(
    center: &PatchSource,
    strips: &[PatchSource; 4],
    overlap_width: usize,
    u_bar: f64,
) -> Result<TilePatch> {
    let (w, h) = (center.image.width, center.image.height);
    if overlap_width < 2 {
        return Err(Error::Config("overlap width must be at least 2".into()));
    }
    if 2 * overlap_width > w.min(h) {
        return Err(Error::Config("overlap bands may not cross the tile center".into()));
    }
    if !u_bar.is_finite() {
        return Err(Error::Config("patch uncertainty must be finite".into()));
    }
    let gamma = gamma_weight(u_bar);
    let sources: Vec<SeamSource<'_>> = std::iter::once(center.as_seam_source())
        .chain(strips.iter().map(|s| s.as_seam_source()))
        .collect();
    let mut graph = SeamGraph::from_sources(&sources, 0, gamma)?;

    // Band membership per strip label (1..=4).
    let in_band = |label: u32, x: usize, y: usize| match label {
        1 => y < overlap_width,
        2 => x >= w - overlap_width,
        3 => y >= h - overlap_width,
        4 => x < overlap_width,
        _ => unreachable!(),
    };
    let mut pinned = vec![false; w * h];
    let pin = |graph: &mut SeamGraph, pinned: &mut [bool], x: usize, y: usize, l: u32| {
        if !pinned[y * w + x] {
            graph.pin_node(x, y, l);
            pinned[y * w + x] = true;
        }
    };
    for x in 0..w {
        pin(&mut graph, &mut pinned, x, 0, 1);
    }
    for y in 0..h {
        pin(&mut graph, &mut pinned, w - 1, y, 2);
    }
    for x in 0..w {
        pin(&mut graph, &mut pinned, x, h - 1, 3);
    }
    for y in 0..h {
        pin(&mut graph, &mut pinned, 0, y, 4);
    }
    for y in overlap_width..h - overlap_width {
        for x in overlap_width..w - overlap_width {
            pin(&mut graph, &mut pinned, x, y, 0);
        }
    }
    // A strip label is meaningless outside its band.
    for y in 0..h {
        for x in 0..w {
            if pinned[y * w + x] {
                continue;
            }
            for l in 1..=4u32 {
                if !in_band(l, x, y) {
                    graph.forbid_label(x, y, l);
                }
            }
        }
    }

    let seam = alpha_expansion(&graph, PATCH_SWEEPS)?;
    let mut composite = ImageRgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let l = seam.label(x, y);
            let src = if l == 0 { &center.image } else { &strips[l as usize - 1].image };
            composite.set(x, y, src.get(x, y));
        }
    }
    Ok(TilePatch { seam, composite, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_label_map(w: usize, h: usize, class: u32) -> LabelMap {
        LabelMap {
            width: w,
            height: h,
            labels: vec![0; w * h],
            label_count: 1,
            classes: vec![class; w * h],
        }
    }

    #[test]
    fn constant_image_segments_to_one_label() {
        let img = ImageRgb::filled(8, 6, [0.4, 0.4, 0.4]);
        let map = segment_labels(&img, 3).unwrap();
        assert_eq!(map.label_count, 1);
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn split_image_segments_to_two_labels() {
        let mut img = ImageRgb::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, if x < 4 { [0.05; 3] } else { [0.95; 3] });
            }
        }
        let map = segment_labels(&img, 2).unwrap();
        assert_eq!(map.label_count, 2);
        assert_ne!(map.label(0, 0), map.label(7, 0));
        assert!(map.on_boundary(3, 2) && map.on_boundary(4, 2));
        assert!(!map.on_boundary(1, 2));
    }

    /// Independent component count via union-find over the quantized classes.
    fn union_find_components(img: &ImageRgb, q: usize) -> usize {
        let bin = |v: f32| ((v.clamp(0.0, 1.0) as f64 * q as f64) as usize).min(q - 1) as u32;
        let (w, h) = (img.width, img.height);
        let class = |x: usize, y: usize| {
            let [r, g, b] = img.get(x, y);
            bin(r) * (q * q) as u32 + bin(g) * q as u32 + bin(b)
        };
        let mut parent: Vec<usize> = (0..w * h).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let root = find(parent, parent[i]);
                parent[i] = root;
            }
            parent[i]
        }
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w && class(x, y) == class(x + 1, y) {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, y * w + x + 1));
                    parent[a] = b;
                }
                if y + 1 < h && class(x, y) == class(x, y + 1) {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, (y + 1) * w + x));
                    parent[a] = b;
                }
            }
        }
        let mut roots: Vec<usize> = (0..w * h).map(|i| find(&mut parent, i)).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    #[test]
    fn terrain_capture_component_count_matches_union_find() {
        use crate::scene::{capture, generate_scene, Pose, TerrainParams};
        let scene = generate_scene(21, (48, 48), TerrainParams::default()).unwrap();
        let cap = capture(&scene, Pose::new(0.9, 1.3, 10.0).unwrap(), (40, 40)).unwrap();
        let map = segment_labels(&cap.image, 4).unwrap();
        assert_eq!(map.label_count, union_find_components(&cap.image, 4));
        assert!(map.label_count > 1);
    }

    #[test]
    fn gamma_is_half_at_half_and_decreasing() {
        assert_relative_eq!(gamma_weight(0.5), 0.5, max_relative = 1e-12);
        assert_relative_eq!(gamma_weight(1.0), 0.268_941_421_369_995_1, max_relative = 1e-9);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let g = gamma_weight(i as f64 / 1000.0);
            assert!(g > 0.0 && g < 1.0);
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn pairwise_weight_matches_hand_evaluation() {
        let terms = SeamTerms {
            color_divergence: 0.2,
            semantic_divergence: 1.0,
            image_gradient: 0.1,
            semantic_gradient: 1.0,
        };
        assert_relative_eq!(pairwise_weight(&terms, 0.5), 0.6 / 0.55, max_relative = 1e-12);

        let same = SeamTerms {
            color_divergence: 0.0,
            semantic_divergence: 0.0,
            image_gradient: 0.7,
            semantic_gradient: 1.0,
        };
        assert_eq!(pairwise_weight(&same, 0.5), 0.0);

        // gamma near 1 approaches pure color over image gradient.
        let mixed = SeamTerms {
            color_divergence: 0.4,
            semantic_divergence: 1.0,
            image_gradient: 0.8,
            semantic_gradient: 1.0,
        };
        assert_relative_eq!(pairwise_weight(&mixed, 1.0 - 1e-9), 0.5, max_relative = 1e-6);
    }

    #[test]
    fn two_node_chain_cuts_the_cheaper_edge() {
        let mut graph = SeamGraph::with_potts_weights(3, 1, 2, &[0.3, 0.8], &[]).unwrap();
        graph.pin_node(0, 0, 0);
        graph.pin_node(2, 0, 1);
        let result = min_cut_binary(&graph).unwrap();
        assert_eq!(result.assignment, vec![0, 1, 1]);
        assert_relative_eq!(result.energy, 0.3, max_relative = 1e-9);
        assert_eq!(result.seam_pixels, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn identical_sources_cut_at_zero_energy() {
        let img = ImageRgb::filled(6, 6, [0.3, 0.5, 0.2]);
        let labels = segment_labels(&img, 2).unwrap();
        let sources =
            [SeamSource { image: &img, labels: &labels }, SeamSource { image: &img, labels: &labels }];
        let mut graph = SeamGraph::from_sources(&sources, 0, 0.5).unwrap();
        graph.pin_node(0, 0, 0);
        graph.pin_node(5, 5, 1);
        let result = min_cut_binary(&graph).unwrap();
        assert_eq!(result.energy, 0.0);
        assert_eq!(result.label(0, 0), 0);
        assert_eq!(result.label(5, 5), 1);
    }

    fn random_binary_graph(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SeamGraph {
        let hw: Vec<f64> = (0..(w - 1) * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let vw: Vec<f64> = (0..w * (h - 1)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut graph = SeamGraph::with_potts_weights(w, h, 2, &hw, &vw).unwrap();
        for y in 0..h {
            for x in 0..w {
                match rng.gen_range(0..4) {
                    0 => graph.pin_node(x, y, 0),
                    1 => graph.pin_node(x, y, 1),
                    _ => {
                        graph.set_unary(x, y, 0, rng.gen_range(0.0..0.5));
                        graph.set_unary(x, y, 1, rng.gen_range(0.0..0.5));
                    }
                }
            }
        }
        graph
    }

    fn brute_force_min_energy(graph: &SeamGraph) -> f64 {
        let n = graph.width * graph.height;
        assert!(n <= 16);
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << n) {
            let assignment: Vec<u32> = (0..n).map(|p| (mask >> p) & 1).collect();
            best = best.min(graph.energy_of(&assignment).unwrap());
        }
        best
    }

    #[test]
    fn binary_cut_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..10 {
            let (w, h) = if round % 2 == 0 { (4, 3) } else { (3, 4) };
            let graph = random_binary_graph(&mut rng, w, h);
            let result = min_cut_binary(&graph).unwrap();
            let best = brute_force_min_energy(&graph);
            // Capacities are rounded at 1e-6 granularity, so allow that much
            // slack times the number of terms; never better than the optimum.
            assert!(result.energy >= best - 1e-9);
            assert!(result.energy <= best + 2e-5, "cut {} vs brute {}", result.energy, best);
        }
    }

    #[test]
    fn energy_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let graph = random_binary_graph(&mut rng, 4, 4);
        let result = min_cut_binary(&graph).unwrap();
        let mut energy = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let a = result.label(x, y);
                energy += graph.unary(x, y, a);
                if x + 1 < 4 && result.label(x + 1, y) != a {
                    energy += graph.weight_h(x, y, a, result.label(x + 1, y));
                }
                if y + 1 < 4 && result.label(x, y + 1) != a {
                    energy += graph.weight_v(x, y, a, result.label(x, y + 1));
                }
            }
        }
        assert!((energy - result.energy).abs() < 1e-9);
    }

    #[test]
    fn pins_always_survive_the_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            let graph = random_binary_graph(&mut rng, 4, 4);
            let result = min_cut_binary(&graph).unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    for l in 0..2u32 {
                        if graph.unary(x, y, l) == 0.0 && graph.unary(x, y, 1 - l) >= HARD_UNARY {
                            assert_eq!(result.label(x, y), l);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn expansion_on_two_labels_matches_the_exact_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..6 {
            let graph = random_binary_graph(&mut rng, 4, 4);
            let exact = min_cut_binary(&graph).unwrap();
            let expanded = alpha_expansion(&graph, 6).unwrap();
            assert!((exact.energy - expanded.energy).abs() < 1e-6);
            assert_eq!(expanded.truncated_edges, 0);
        }
    }

    fn random_multilabel_graph(rng: &mut ChaCha8Rng, w: usize, h: usize, l: usize) -> SeamGraph {
        // Random Potts weights stay a metric, so expansion never truncates.
        let hw: Vec<f64> = (0..(w - 1) * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let vw: Vec<f64> = (0..w * (h - 1)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut graph = SeamGraph::with_potts_weights(w, h, l, &hw, &vw).unwrap();
        for y in 0..h {
            for x in 0..w {
                for label in 0..l as u32 {
                    graph.set_unary(x, y, label, rng.gen_range(0.0..1.0));
                }
            }
        }
        graph
    }

    /// Exact multilabel optimum by dynamic programming over column states.
    fn column_dp_min_energy(graph: &SeamGraph) -> f64 {
        let (w, h, l) = (graph.width, graph.height, graph.label_count);
        let states = l.pow(h as u32);
        let decode = |s: usize| -> Vec<u32> {
            let mut s = s;
            (0..h)
                .map(|_| {
                    let v = (s % l) as u32;
                    s /= l;
                    v
                })
                .collect()
        };
        let column_cost = |x: usize, labels: &[u32]| -> f64 {
            let mut cost = 0.0;
            for y in 0..h {
                cost += graph.unary(x, y, labels[y]);
                if y + 1 < h {
                    cost += graph.weight_v(x, y, labels[y], labels[y + 1]);
                }
            }
            cost
        };
        let mut dp: Vec<f64> = (0..states).map(|s| column_cost(0, &decode(s))).collect();
        for x in 1..w {
            let mut next = vec![f64::INFINITY; states];
            let decoded: Vec<Vec<u32>> = (0..states).map(decode).collect();
            for (s, cur) in decoded.iter().enumerate() {
                let base = column_cost(x, cur);
                for (t, prev) in decoded.iter().enumerate() {
                    if dp[t].is_finite() {
                        let mut link = 0.0;
                        for y in 0..h {
                            link += graph.weight_h(x - 1, y, prev[y], cur[y]);
                        }
                        let total = dp[t] + link + base;
                        if total < next[s] {
                            next[s] = total;
                        }
                    }
                }
            }
            dp = next;
        }
        dp.into_iter().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn expansion_lands_near_the_exact_multilabel_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..3 {
            let graph = random_multilabel_graph(&mut rng, 4, 4, 3);
            let result = alpha_expansion(&graph, 10).unwrap();
            let best = column_dp_min_energy(&graph);
            assert!(result.energy >= best - 1e-9);
            assert!(result.energy <= best * 1.05 + 1e-9, "{} vs {}", result.energy, best);
            assert_eq!(result.truncated_edges, 0);
        }
    }

    #[test]
    fn tile_patch_with_identical_sources_is_free() {
        let mut img = ImageRgb::new(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                img.set(x, y, [x as f32 / 12.0, y as f32 / 12.0, 0.5]);
            }
        }
        let labels = segment_labels(&img, 2).unwrap();
        let src = PatchSource { image: img.clone(), labels };
        let patch =
            build_tile_patch(&src, &[src.clone(), src.clone(), src.clone(), src.clone()], 3, 0.5)
                .unwrap();
        assert_eq!(patch.seam.energy, 0.0);
        assert_eq!(patch.composite, img);
        // Pins: strip outer edges, with north/east taking shared corners.
        assert_eq!(patch.seam.label(5, 0), 1);
        assert_eq!(patch.seam.label(11, 5), 2);
        assert_eq!(patch.seam.label(5, 11), 3);
        assert_eq!(patch.seam.label(0, 5), 4);
        assert_eq!(patch.seam.label(0, 0), 1);
        assert_eq!(patch.seam.label(11, 11), 2);
        assert_eq!(patch.seam.label(6, 6), 0);
    }

    #[test]
    fn tile_patch_rejects_bad_overlap_widths() {
        let img = ImageRgb::filled(12, 12, [0.5; 3]);
        let labels = segment_labels(&img, 2).unwrap();
        let src = PatchSource { image: img, labels };
        let strips = [src.clone(), src.clone(), src.clone(), src.clone()];
        assert!(build_tile_patch(&src, &strips, 1, 0.5).is_err());
        assert!(build_tile_patch(&src, &strips, 7, 0.5).is_err());
        assert!(build_tile_patch(&src, &strips, 2, 0.5).is_ok());
    }

    /// High uncertainty must push the seam off pixels where the sources
    /// disagree semantically, even when cutting there is cheaper in color.
    #[test]
    fn high_uncertainty_avoids_semantic_disagreement() {
        let (w, h) = (12, 12);
        let gray = [0.3f32; 3];
        let center = PatchSource {
            image: ImageRgb::filled(w, h, gray),
            labels: uniform_label_map(w, h, 7),
        };

        // North strip: rows 0-1 match the center's color but carry a foreign
        // class; rows 2+ have a visible color offset but agree semantically.
        let mut north_img = ImageRgb::filled(w, h, gray);
        let mut north_classes = vec![7u32; w * h];
        let mut north_components = vec![1u32; w * h];
        for y in 0..h {
            for x in 0..w {
                if y < 2 {
                    north_classes[y * w + x] = 9;
                    north_components[y * w + x] = 0;
                } else {
                    north_img.set(x, y, [0.55, 0.3, 0.3]);
                }
            }
        }
        let north = PatchSource {
            image: north_img,
            labels: LabelMap {
                width: w,
                height: h,
                labels: north_components,
                label_count: 2,
                classes: north_classes,
            },
        };
        let plain = PatchSource {
            image: ImageRgb::filled(w, h, gray),
            labels: uniform_label_map(w, h, 7),
        };
        let strips = [north.clone(), plain.clone(), plain.clone(), plain];

        let disagreement_cuts = |patch: &TilePatch| -> usize {
            let classes = |l: u32, x: usize, y: usize| match l {
                0 => 7u32,
                1 => strips[0].labels.class(x, y),
                _ => 7u32,
            };
            let mut count = 0;
            for y in 0..h {
                for x in 0..w {
                    let a = patch.seam.label(x, y);
                    let mut check = |nx: usize, ny: usize| {
                        let b = patch.seam.label(nx, ny);
                        if a != b
                            && (classes(a, x, y) != classes(b, x, y)
                                || classes(a, nx, ny) != classes(b, nx, ny))
                        {
                            count += 1;
                        }
                    };
                    if x + 1 < w {
                        check(x + 1, y);
                    }
                    if y + 1 < h {
                        check(x, y + 1);
                    }
                }
            }
            count
        };

        let calm = build_tile_patch(&center, &strips, 4, 0.0).unwrap();
        let tense = build_tile_patch(&center, &strips, 4, 1.0).unwrap();
        assert!(tense.gamma < calm.gamma);
        assert!(
            disagreement_cuts(&tense) < disagreement_cuts(&calm),
            "semantic crossings: tense {} vs calm {}",
            disagreement_cuts(&tense),
            disagreement_cuts(&calm)
        );
    }

    #[test]
    fn indexed_ppm_export_roundtrips_header() {
        let mut graph = SeamGraph::with_potts_weights(3, 1, 2, &[0.3, 0.8], &[]).unwrap();
        graph.pin_node(0, 0, 0);
        graph.pin_node(2, 0, 1);
        let result = min_cut_binary(&graph).unwrap();
        let mut buf = Vec::new();
        result.write_indexed_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n3 1\n255\n"));
        assert_eq!(buf.len(), b"P6\n3 1\n255\n".len() + 9);
    }
}

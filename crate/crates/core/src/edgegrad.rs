//! Visibility gradients from pixel pairs.
//!
//! Every pair of horizontally or vertically adjacent pixels is treated as if
//! a single unit-length, axis-aligned boundary sat halfway between the two
//! centers. Pairs are classified from the index buffer and point-in-triangle
//! tests; the loss gradient with respect to the boundary position `p` is
//! routed to the fragment (or fragments) whose motion moves the boundary.
//!
//! `p` grows from pixel `a` toward pixel `b`. A positive `dL/dp` means the
//! loss increases when `a`'s color spreads into `b`.

use rayon::prelude::*;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::raster::{pixel_center, RasterBuffers, ScreenGeometry, TriangleSetup};
use crate::scene::ImageF;
use crate::smooth::{FragmentGrad, FragmentTangent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairOrientation {
    Horizontal,
    Vertical,
}

impl PairOrientation {
    fn axis(self) -> usize {
        match self {
            PairOrientation::Horizontal => 0,
            PairOrientation::Vertical => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn swap(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    NoEdge,
    Adjacent,
    Overhang { top: Side },
    Intersection,
}

/// A classified pixel pair. Pixels are `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeRecord {
    pub orientation: PairOrientation,
    pub pixel_a: [usize; 2],
    pub pixel_b: [usize; 2],
    pub id_a: Option<u32>,
    pub id_b: Option<u32>,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGradConfig {
    /// Intersection pairs whose unit normals are closer to parallel than this
    /// are skipped.
    pub intersection_denominator_epsilon: f64,
    pub include_intersections: bool,
    /// Pair each border pixel with a virtual pixel just outside the image.
    pub include_image_border: bool,
    /// Color seen outside the image; empty means zero in every channel.
    pub border_background: Vec<f32>,
}

impl Default for EdgeGradConfig {
    fn default() -> Self {
        EdgeGradConfig {
            intersection_denominator_epsilon: 1e-4,
            include_intersections: true,
            include_image_border: true,
            border_background: Vec::new(),
        }
    }
}

impl EdgeGradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.intersection_denominator_epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "intersection_denominator_epsilon must be positive, got {}",
                self.intersection_denominator_epsilon
            )));
        }
        Ok(())
    }
}

/// Pair counts per classification, as reported by `grad --stats`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeStats {
    pub no_edge: usize,
    pub adjacent: usize,
    pub overhang: usize,
    pub intersection: usize,
    /// Intersection pairs skipped because the two planes are nearly parallel.
    pub near_parallel: usize,
    /// Overhang pairs against the image border (also counted in `overhang`).
    pub border: usize,
}

impl EdgeStats {
    pub fn total(&self) -> usize {
        self.no_edge + self.adjacent + self.overhang + self.intersection
    }

    fn record(&mut self, route: &PairRoute, border: bool) {
        match route.kind {
            EdgeKind::NoEdge => self.no_edge += 1,
            EdgeKind::Adjacent => self.adjacent += 1,
            EdgeKind::Overhang { .. } => {
                self.overhang += 1;
                if border {
                    self.border += 1;
                }
            }
            EdgeKind::Intersection => self.intersection += 1,
        }
        if route.near_parallel {
            self.near_parallel += 1;
        }
    }

    pub fn add(&mut self, o: &EdgeStats) {
        self.no_edge += o.no_edge;
        self.adjacent += o.adjacent;
        self.overhang += o.overhang;
        self.intersection += o.intersection;
        self.near_parallel += o.near_parallel;
        self.border += o.border;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Error)]
#[error("intersecting planes are nearly parallel (denominator {denominator:e})")]
pub struct NearParallel {
    pub denominator: f64,
}

/// `dL/dp = 1/2 * sum_c (g_a + g_b) * (I_a - I_b)`.
pub fn edge_loss_gradient(g_a: &[f32], g_b: &[f32], i_a: &[f32], i_b: &[f32]) -> f64 {
    let mut s = 0.0;
    for c in 0..g_a.len() {
        s += (g_a[c] as f64 + g_b[c] as f64) * (i_a[c] as f64 - i_b[c] as f64);
    }
    0.5 * s
}

/// Motion of the intersection of two lines per unit motion of the varying
/// line along its own normal. Normals are unit 2-vectors `(in-plane, depth)`;
/// the result is the in-plane displacement of the crossing point.
pub fn intersection_dp_dr(n_fixed: [f64; 2], n_varying: [f64; 2], epsilon: f64) -> Result<f64, NearParallel> {
    let denominator = n_fixed[0] * n_varying[1] - n_fixed[1] * n_varying[0];
    if denominator.abs() <= epsilon || !denominator.is_finite() {
        return Err(NearParallel { denominator });
    }
    Ok(-n_fixed[1] / denominator)
}

fn orientation_of(a: [usize; 2], b: [usize; 2]) -> (PairOrientation, f64) {
    let dx = b[0] as i64 - a[0] as i64;
    let dy = b[1] as i64 - a[1] as i64;
    match (dx, dy) {
        (1, 0) => (PairOrientation::Horizontal, 1.0),
        (-1, 0) => (PairOrientation::Horizontal, -1.0),
        (0, 1) => (PairOrientation::Vertical, 1.0),
        (0, -1) => (PairOrientation::Vertical, -1.0),
        _ => panic!("pixels {a:?} and {b:?} are not adjacent"),
    }
}

fn classify_ids(geo: &ScreenGeometry, id_a: Option<u32>, id_b: Option<u32>, ca: [f64; 2], cb: [f64; 2]) -> EdgeKind {
    match (id_a, id_b) {
        (a, b) if a == b => EdgeKind::NoEdge,
        (Some(_), None) => EdgeKind::Overhang { top: Side::A },
        (None, Some(_)) => EdgeKind::Overhang { top: Side::B },
        (Some(a), Some(b)) => {
            let ta = geo.triangle(a).expect("visible triangle is set up");
            let tb = geo.triangle(b).expect("visible triangle is set up");
            // A center inside the other triangle that still shows its own
            // triangle means its own triangle is in front there.
            match (tb.contains(ca), ta.contains(cb)) {
                (false, false) => EdgeKind::Adjacent,
                (true, true) => EdgeKind::Intersection,
                (true, false) => EdgeKind::Overhang { top: Side::A },
                (false, true) => EdgeKind::Overhang { top: Side::B },
            }
        }
        (None, None) => unreachable!(),
    }
}

/// Classifies two adjacent in-image pixels.
pub fn classify_edge(pixel_a: [usize; 2], pixel_b: [usize; 2], buffers: &RasterBuffers, geo: &ScreenGeometry) -> EdgeRecord {
    let (orientation, _) = orientation_of(pixel_a, pixel_b);
    let id_a = buffers.triangle_at(pixel_a[0], pixel_a[1]);
    let id_b = buffers.triangle_at(pixel_b[0], pixel_b[1]);
    let ca = pixel_center(pixel_a[0], pixel_a[1]);
    let cb = pixel_center(pixel_b[0], pixel_b[1]);
    EdgeRecord {
        orientation,
        pixel_a,
        pixel_b,
        id_a,
        id_b,
        kind: classify_ids(geo, id_a, id_b, ca, cb),
    }
}

/// How the boundary of one pair moves with its fragments: `dp/dr` for each
/// side's fragment, in `(x_px, y_px, z/w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairRoute {
    pub kind: EdgeKind,
    pub coeff_a: [f64; 3],
    pub coeff_b: [f64; 3],
    pub near_parallel: bool,
}

/// Per-fragment in-plane and depth coefficients of the intersection point's
/// motion along `axis`, for the triangles at `a` and `b`.
fn intersection_covectors(
    ta: &TriangleSetup,
    tb: &TriangleSetup,
    axis: usize,
    extent: usize,
    epsilon: f64,
) -> Result<([f64; 2], [f64; 2]), NearParallel> {
    // Normals live in a space where the axis is rescaled to [-1, 1] like NDC
    // depth, so the parallelism threshold does not depend on resolution.
    let half = 0.5 * extent as f64;
    let normal = |t: &TriangleSetup| {
        let s = t.depth_gradient()[axis] * half;
        let n = (1.0 + s * s).sqrt();
        [-s / n, 1.0 / n]
    };
    let (na, nb) = (normal(ta), normal(tb));
    let pa = intersection_dp_dr(nb, na, epsilon)?;
    let pb = intersection_dp_dr(na, nb, epsilon)?;
    Ok(([pa * na[0], pa * na[1] * half], [pb * nb[0], pb * nb[1] * half]))
}

fn route(
    geo: &ScreenGeometry,
    kind: EdgeKind,
    id_a: Option<u32>,
    id_b: Option<u32>,
    axis: usize,
    sign: f64,
    cfg: &EdgeGradConfig,
) -> PairRoute {
    let mut r = PairRoute {
        kind,
        coeff_a: [0.0; 3],
        coeff_b: [0.0; 3],
        near_parallel: false,
    };
    match kind {
        EdgeKind::NoEdge | EdgeKind::Adjacent => {}
        EdgeKind::Overhang { top: Side::A } => r.coeff_a[axis] = sign,
        EdgeKind::Overhang { top: Side::B } => r.coeff_b[axis] = sign,
        EdgeKind::Intersection => {
            if !cfg.include_intersections {
                return r;
            }
            let ta = geo.triangle(id_a.unwrap()).expect("visible triangle is set up");
            let tb = geo.triangle(id_b.unwrap()).expect("visible triangle is set up");
            let extent = if axis == 0 { geo.width } else { geo.height };
            match intersection_covectors(ta, tb, axis, extent, cfg.intersection_denominator_epsilon) {
                Ok((ca, cb)) => {
                    // A depth change moves the intersection line along its
                    // screen normal m, and both pair directions see it. Each
                    // direction alone already accounts for the whole swept
                    // area, so the depth part is shared out by m_axis^2.
                    let (ga, gb) = (ta.depth_gradient(), tb.depth_gradient());
                    let f = [ga[0] - gb[0], ga[1] - gb[1]];
                    let share = f[axis] * f[axis] / (f[0] * f[0] + f[1] * f[1]);
                    r.coeff_a[axis] = sign * ca[0];
                    r.coeff_a[2] = sign * ca[1] * share;
                    r.coeff_b[axis] = sign * cb[0];
                    r.coeff_b[2] = sign * cb[1] * share;
                }
                Err(_) => r.near_parallel = true,
            }
        }
    }
    r
}

/// Gradient contribution of a single in-image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGradient {
    pub record: EdgeRecord,
    pub route: PairRoute,
    pub dl_dp: f64,
    /// Added to `FragmentGrad::position` at `pixel_a`.
    pub to_a: [f64; 3],
    /// Added to `FragmentGrad::position` at `pixel_b`.
    pub to_b: [f64; 3],
}

pub fn pair_gradient(
    pixel_a: [usize; 2],
    pixel_b: [usize; 2],
    dl_dimage: &ImageF,
    image: &ImageF,
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    cfg: &EdgeGradConfig,
) -> PairGradient {
    let record = classify_edge(pixel_a, pixel_b, buffers, geo);
    let (_, sign) = orientation_of(pixel_a, pixel_b);
    let route = route(geo, record.kind, record.id_a, record.id_b, record.orientation.axis(), sign, cfg);
    let (ax, ay) = (pixel_a[0], pixel_a[1]);
    let (bx, by) = (pixel_b[0], pixel_b[1]);
    let dl_dp = edge_loss_gradient(dl_dimage.pixel(ax, ay), dl_dimage.pixel(bx, by), image.pixel(ax, ay), image.pixel(bx, by));
    PairGradient {
        record,
        route,
        dl_dp,
        to_a: route.coeff_a.map(|c| c * dl_dp),
        to_b: route.coeff_b.map(|c| c * dl_dp),
    }
}

/// Pair analysis over the whole image. Slot `k` of a row (or column) pairs
/// pixel `k - 1` with pixel `k`; slots `0` and `n` reach outside the image.
struct PairGrid {
    horizontal: Vec<PairRoute>,
    vertical: Vec<PairRoute>,
    stats: EdgeStats,
}

fn analyze(buffers: &RasterBuffers, geo: &ScreenGeometry, cfg: &EdgeGradConfig) -> PairGrid {
    let (w, h) = (buffers.width, buffers.height);
    let idle = PairRoute {
        kind: EdgeKind::NoEdge,
        coeff_a: [0.0; 3],
        coeff_b: [0.0; 3],
        near_parallel: false,
    };
    let slot = |axis: usize, line: usize, k: usize| -> (PairRoute, bool) {
        let n = if axis == 0 { w } else { h };
        let at = |i: usize| if axis == 0 { [i, line] } else { [line, i] };
        let center = |i: isize| {
            let (u, v) = (i as f64 + 0.5, line as f64 + 0.5);
            if axis == 0 {
                [u, v]
            } else {
                [v, u]
            }
        };
        let id = |i: usize| buffers.triangle_at(at(i)[0], at(i)[1]);
        let border = k == 0 || k == n;
        if border && !cfg.include_image_border {
            return (idle, true);
        }
        // The virtual pixel outside the image is either background or hidden
        // geometry we know nothing about; the latter is treated as no edge.
        let (id_a, id_b) = if k == 0 {
            let b = id(0);
            (if geo.covered(center(-1)) { b } else { None }, b)
        } else if k == n {
            let a = id(n - 1);
            (a, if geo.covered(center(n as isize)) { a } else { None })
        } else {
            (id(k - 1), id(k))
        };
        let kind = if border {
            match (id_a, id_b) {
                (a, b) if a == b => EdgeKind::NoEdge,
                (Some(_), _) => EdgeKind::Overhang { top: Side::A },
                _ => EdgeKind::Overhang { top: Side::B },
            }
        } else {
            classify_ids(geo, id_a, id_b, center(k as isize - 1), center(k as isize))
        };
        (route(geo, kind, id_a, id_b, axis, 1.0, cfg), border)
    };
    let build = |axis: usize, lines: usize, n: usize| -> (Vec<PairRoute>, EdgeStats) {
        let rows: Vec<(Vec<PairRoute>, EdgeStats)> = (0..lines)
            .into_par_iter()
            .map(|line| {
                let mut stats = EdgeStats::default();
                let routes = (0..=n)
                    .map(|k| {
                        let (r, border) = slot(axis, line, k);
                        if !border || cfg.include_image_border {
                            stats.record(&r, border);
                        }
                        r
                    })
                    .collect();
                (routes, stats)
            })
            .collect();
        let mut stats = EdgeStats::default();
        let mut out = Vec::with_capacity(lines * (n + 1));
        for (r, s) in rows {
            out.extend(r);
            stats.add(&s);
        }
        (out, stats)
    };
    let (horizontal, mut stats) = build(0, h, w);
    let (vertical, vs) = build(1, w, h);
    stats.add(&vs);
    PairGrid {
        horizontal,
        vertical,
        stats,
    }
}

fn check_inputs(dl: Option<&ImageF>, image: &ImageF, buffers: &RasterBuffers, cfg: &EdgeGradConfig) -> Result<()> {
    cfg.validate()?;
    if (image.width, image.height) != (buffers.width, buffers.height) {
        return Err(Error::shape(format!("{}x{}", buffers.width, buffers.height), image.shape_string()));
    }
    if let Some(dl) = dl {
        image.check_shape(dl)?;
    }
    if !cfg.border_background.is_empty() && cfg.border_background.len() != image.channels {
        return Err(Error::shape(
            format!("border background with {} channels", image.channels),
            format!("{} channels", cfg.border_background.len()),
        ));
    }
    Ok(())
}

/// Values of the virtual pixel outside the image.
fn border_color(cfg: &EdgeGradConfig, channels: usize) -> Vec<f32> {
    if cfg.border_background.is_empty() {
        vec![0.0; channels]
    } else {
        cfg.border_background.clone()
    }
}

/// Runs every pair of the image and gathers the boundary gradient into the
/// fragments. Each pixel sums its (up to four) pairs in a fixed order, so the
/// result does not depend on the number of threads.
pub fn scatter_edge_gradients(
    dl_dimage: &ImageF,
    image: &ImageF,
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    cfg: &EdgeGradConfig,
) -> Result<(FragmentGrad, EdgeStats)> {
    check_inputs(Some(dl_dimage), image, buffers, cfg)?;
    let (w, h, k) = (buffers.width, buffers.height, image.channels);
    let grid = analyze(buffers, geo, cfg);
    let bg = border_color(cfg, k);
    let zero = vec![0.0f32; k];
    // Returns (value, gradient) for the pixel at index `i` along a line, where
    // `-1` and `n` are outside.
    let px = |axis: usize, line: usize, i: isize, n: usize| -> (&[f32], &[f32]) {
        if i < 0 || i as usize >= n {
            return (&bg, &zero);
        }
        let (x, y) = if axis == 0 { (i as usize, line) } else { (line, i as usize) };
        (image.pixel(x, y), dl_dimage.pixel(x, y))
    };
    let dl_dp = |axis: usize, line: usize, slot: usize, n: usize| {
        let (ia, ga) = px(axis, line, slot as isize - 1, n);
        let (ib, gb) = px(axis, line, slot as isize, n);
        edge_loss_gradient(ga, gb, ia, ib)
    };

    let mut frag = FragmentGrad::zeros(w, h);
    frag.position.par_iter_mut().enumerate().for_each(|(p, out)| {
        let (x, y) = (p % w, p / w);
        let mut acc = [0.0; 3];
        let mut add = |coeff: [f64; 3], g: f64| {
            if coeff != [0.0; 3] {
                for c in 0..3 {
                    acc[c] += coeff[c] * g;
                }
            }
        };
        // Left pair (this pixel is `b`), right pair (`a`), then up and down.
        let hl = &grid.horizontal[y * (w + 1) + x];
        let hr = &grid.horizontal[y * (w + 1) + x + 1];
        let vu = &grid.vertical[x * (h + 1) + y];
        let vd = &grid.vertical[x * (h + 1) + y + 1];
        if hl.coeff_b != [0.0; 3] {
            add(hl.coeff_b, dl_dp(0, y, x, w));
        }
        if hr.coeff_a != [0.0; 3] {
            add(hr.coeff_a, dl_dp(0, y, x + 1, w));
        }
        if vu.coeff_b != [0.0; 3] {
            add(vu.coeff_b, dl_dp(1, x, y, h));
        }
        if vd.coeff_a != [0.0; 3] {
            add(vd.coeff_a, dl_dp(1, x, y + 1, h));
        }
        *out = acc;
    });
    Ok((frag, grid.stats))
}

/// Classification counts without computing any gradient.
pub fn edge_stats(buffers: &RasterBuffers, geo: &ScreenGeometry, cfg: &EdgeGradConfig) -> EdgeStats {
    analyze(buffers, geo, cfg).stats
}

/// Forward-mode counterpart of [`scatter_edge_gradients`]: the first-order
/// image change from boundary motion, split evenly between the two pixels of
/// each pair. Layout matches [`ImageF::data`].
pub fn edge_jvp(
    image: &ImageF,
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    tangent: &FragmentTangent,
    cfg: &EdgeGradConfig,
) -> Result<Vec<f64>> {
    check_inputs(None, image, buffers, cfg)?;
    let (w, h, k) = (buffers.width, buffers.height, image.channels);
    let grid = analyze(buffers, geo, cfg);
    let bg = border_color(cfg, k);
    let value = |axis: usize, line: usize, i: isize, n: usize| -> &[f32] {
        if i < 0 || i as usize >= n {
            return &bg;
        }
        if axis == 0 {
            image.pixel(i as usize, line)
        } else {
            image.pixel(line, i as usize)
        }
    };
    let motion = |axis: usize, line: usize, i: isize, n: usize| -> [f64; 3] {
        if i < 0 || i as usize >= n {
            return [0.0; 3];
        }
        let p = if axis == 0 { line * w + i as usize } else { i as usize * w + line };
        tangent.position[p]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let pair_delta = |axis: usize, line: usize, slot: usize, n: usize, r: &PairRoute, out: &mut [f64]| {
        let (ia, ib) = (slot as isize - 1, slot as isize);
        let dp = dot(r.coeff_a, motion(axis, line, ia, n)) + dot(r.coeff_b, motion(axis, line, ib, n));
        if dp == 0.0 {
            return;
        }
        let (va, vb) = (value(axis, line, ia, n), value(axis, line, ib, n));
        for c in 0..k {
            out[c] += 0.5 * (va[c] as f64 - vb[c] as f64) * dp;
        }
    };
    let mut out = vec![0.0; w * h * k];
    out.par_chunks_mut(k).enumerate().for_each(|(p, px)| {
        let (x, y) = (p % w, p / w);
        pair_delta(0, y, x, w, &grid.horizontal[y * (w + 1) + x], px);
        pair_delta(0, y, x + 1, w, &grid.horizontal[y * (w + 1) + x + 1], px);
        pair_delta(1, x, y, h, &grid.vertical[x * (h + 1) + y], px);
        pair_delta(1, x, y + 1, h, &grid.vertical[x * (h + 1) + y + 1], px);
    });
    Ok(out)
}

#[cfg(test)]
mod tests;

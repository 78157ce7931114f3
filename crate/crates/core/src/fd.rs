//! Finite-difference reference gradients on a supersampled renderer.
//!
//! Pixels are box-filtered averages of `n x n` regular point samples drawn
//! from the same rasterizer, so `n = 1` reproduces [`pipeline::render`]
//! exactly. Step sizes are given in screen pixels and converted to world
//! units per vertex through the projection Jacobian.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::Scene;
use crate::raster::{blend, ScreenGeometry};
use crate::scene::{transform_positions, Camera, ImageF};
use crate::smooth::VertexGrad;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FdScheme {
    #[default]
    Central,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FDConfig {
    /// Samples per pixel along each axis.
    pub supersampling: usize,
    /// Step size in screen pixels.
    pub epsilon: f64,
    pub scheme: FdScheme,
}

impl Default for FDConfig {
    fn default() -> Self {
        FDConfig {
            supersampling: 16,
            epsilon: 0.5,
            scheme: FdScheme::Central,
        }
    }
}

impl FDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.supersampling == 0 {
            return Err(Error::InvalidConfig("supersampling must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Pixel rectangle `[x0, y0, x1, y1)`.
type Rect = [usize; 4];

/// Box-filtered color of every pixel in `rect`, row-major.
fn shade_rect(scene: &Scene, geo: &ScreenGeometry, ss: usize, rect: Rect) -> Vec<f64> {
    let k = scene.channels();
    let [x0, y0, x1, y1] = rect;
    let bg: Vec<f32> = (0..k).map(|c| scene.background_value(c)).collect();
    let norm = 1.0 / (ss * ss) as f64;
    let rows: Vec<Vec<f64>> = (y0..y1)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; (x1 - x0) * k];
            let mut sample = vec![0.0f32; k];
            for x in x0..x1 {
                let acc = &mut row[(x - x0) * k..(x - x0 + 1) * k];
                for b in 0..ss {
                    for a in 0..ss {
                        let p = [x as f64 + (a as f64 + 0.5) / ss as f64, y as f64 + (b as f64 + 0.5) / ss as f64];
                        match geo.sample(p) {
                            Some(hit) => {
                                let setup = geo.triangle(hit.triangle).expect("hit triangle exists");
                                let beta = setup.perspective(hit.lambda);
                                let attrs = setup.vertices.map(|v| scene.attributes.get(v as usize));
                                if ss == 1 {
                                    // Same arithmetic as the rasterizer.
                                    blend([beta[0] as f32, beta[1] as f32], attrs, &mut sample);
                                    for c in 0..k {
                                        acc[c] += sample[c] as f64;
                                    }
                                } else {
                                    for c in 0..k {
                                        acc[c] += (0..3).map(|m| beta[m] * attrs[m][c] as f64).sum::<f64>();
                                    }
                                }
                            }
                            None => {
                                for c in 0..k {
                                    acc[c] += bg[c] as f64;
                                }
                            }
                        }
                    }
                }
                for v in acc.iter_mut() {
                    *v *= norm;
                }
            }
            row
        })
        .collect();
    rows.concat()
}

fn geometry(scene: &Scene, positions: &[[f64; 3]], camera: &Camera) -> ScreenGeometry {
    let clip = transform_positions(positions, camera);
    ScreenGeometry::new(&clip, &scene.mesh.triangles)
}

fn full(camera: &Camera) -> Rect {
    [0, 0, camera.width, camera.height]
}

fn to_image(camera: &Camera, k: usize, data: Vec<f64>) -> ImageF {
    ImageF {
        width: camera.width,
        height: camera.height,
        channels: k,
        data: data.into_iter().map(|v| v as f32).collect(),
    }
}

pub fn render_supersampled(scene: &Scene, camera: &Camera, supersampling: usize) -> Result<ImageF> {
    scene.validate()?;
    if supersampling == 0 {
        return Err(Error::InvalidConfig("supersampling must be at least 1".into()));
    }
    let geo = geometry(scene, &scene.mesh.positions, camera);
    Ok(to_image(camera, scene.channels(), shade_rect(scene, &geo, supersampling, full(camera))))
}

/// Rigid world-space translation of a subset of vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub vertices: Vec<u32>,
    pub direction: [f64; 3],
}

impl Perturbation {
    pub fn all(num_vertices: usize, direction: [f64; 3]) -> Self {
        Perturbation {
            vertices: (0..num_vertices as u32).collect(),
            direction,
        }
    }

    /// Per-vertex displacement for a unit parameter change.
    pub fn displacement(&self, num_vertices: usize) -> Vec<[f64; 3]> {
        let mut d = vec![[0.0; 3]; num_vertices];
        for &v in &self.vertices {
            d[v as usize] = self.direction;
        }
        d
    }
}

fn displaced(positions: &[[f64; 3]], d: &[[f64; 3]], h: f64) -> Vec<[f64; 3]> {
    positions
        .iter()
        .zip(d)
        .map(|(p, d)| [p[0] + h * d[0], p[1] + h * d[1], p[2] + h * d[2]])
        .collect()
}

fn screen_speed(camera: &Camera, p: [f64; 3], d: [f64; 3]) -> f64 {
    let j = camera.screen_jacobian(p);
    let sx = j[0][0] * d[0] + j[0][1] * d[1] + j[0][2] * d[2];
    let sy = j[1][0] * d[0] + j[1][1] * d[1] + j[1][2] * d[2];
    (sx * sx + sy * sy).sqrt()
}

/// Parameter step that moves the fastest perturbed vertex by `epsilon` pixels.
pub fn parameter_step(scene: &Scene, camera: &Camera, param: &Perturbation, epsilon: f64) -> Option<f64> {
    let speed = param
        .vertices
        .iter()
        .map(|&v| screen_speed(camera, scene.mesh.positions[v as usize], param.direction))
        .fold(0.0, f64::max);
    (speed > 0.0 && speed.is_finite()).then(|| epsilon / speed)
}

/// Per-pixel derivative of the supersampled image with respect to the scalar
/// parameter `param`.
pub fn fd_forward_gradient(scene: &Scene, camera: &Camera, param: &Perturbation, cfg: &FDConfig) -> Result<ImageF> {
    cfg.validate()?;
    scene.validate()?;
    let k = scene.channels();
    let Some(h) = parameter_step(scene, camera, param, cfg.epsilon) else {
        return Ok(ImageF::zeros(camera.width, camera.height, k));
    };
    let d = param.displacement(scene.mesh.num_vertices());
    let render = |s: f64| {
        let geo = geometry(scene, &displaced(&scene.mesh.positions, &d, s), camera);
        shade_rect(scene, &geo, cfg.supersampling, full(camera))
    };
    let (hi, lo, span) = match cfg.scheme {
        FdScheme::Central => (render(h), render(-h), 2.0 * h),
        FdScheme::Forward => (render(h), render(0.0), h),
    };
    Ok(to_image(camera, k, hi.iter().zip(&lo).map(|(a, b)| (a - b) / span).collect()))
}

/// Scalar losses the oracle can evaluate. Both are sums of per-pixel terms,
/// which lets the oracle re-render only the pixels a vertex can reach.
#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    /// `sum (I - target)^2`.
    L2 { target: ImageF },
    /// Mean over pixels and channels.
    MeanIntensity,
}

impl LossSpec {
    fn term(&self, pixel: usize, value: &[f64], scale: f64) -> f64 {
        match self {
            LossSpec::L2 { target } => {
                let k = value.len();
                let t = &target.data[pixel * k..(pixel + 1) * k];
                value.iter().zip(t).map(|(v, &t)| (v - t as f64).powi(2)).sum()
            }
            LossSpec::MeanIntensity => value.iter().sum::<f64>() * scale,
        }
    }

    fn check(&self, camera: &Camera, channels: usize) -> Result<()> {
        if let LossSpec::L2 { target } = self {
            if (target.width, target.height, target.channels) != (camera.width, camera.height, channels) {
                return Err(Error::shape(
                    format!("{}x{}x{}", camera.width, camera.height, channels),
                    target.shape_string(),
                ));
            }
        }
        Ok(())
    }

    fn sum_rect(&self, values: &[f64], rect: Rect, width: usize, k: usize, scale: f64) -> f64 {
        let [x0, y0, x1, _] = rect;
        let w = x1 - x0;
        values
            .chunks_exact(k)
            .enumerate()
            .map(|(i, v)| self.term((y0 + i / w) * width + x0 + i % w, v, scale))
            .sum()
    }

    pub fn evaluate(&self, image: &ImageF) -> f64 {
        let data: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
        let scale = 1.0 / image.data.len().max(1) as f64;
        self.sum_rect(&data, [0, 0, image.width, image.height], image.width, image.channels, scale)
    }

    /// `dL/dI` at `image`.
    pub fn gradient(&self, image: &ImageF) -> ImageF {
        let data = match self {
            LossSpec::L2 { target } => image.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b)).collect(),
            LossSpec::MeanIntensity => vec![1.0 / image.data.len().max(1) as f32; image.data.len()],
        };
        ImageF { data, ..image.clone() }
    }
}

/// Screen rectangle, padded by one pixel, that contains every triangle around
/// `v` in both perturbed states; `None` when it cannot be bounded.
fn reach(scene: &Scene, camera: &Camera, incident: &[u32], states: &[&[[f64; 3]]]) -> Option<Rect> {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for positions in states {
        for &t in incident {
            for &v in &scene.mesh.triangles[t as usize] {
                let c = camera.project(positions[v as usize]);
                if !(c[3] > 0.0) {
                    return None;
                }
                let s = camera.clip_to_screen(c);
                b = [b[0].min(s[0]), b[1].min(s[1]), b[2].max(s[0]), b[3].max(s[1])];
            }
        }
    }
    let clamp = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
    let rect = [
        clamp(b[0].floor() - 1.0, camera.width),
        clamp(b[1].floor() - 1.0, camera.height),
        clamp(b[2].ceil() + 1.0, camera.width),
        clamp(b[3].ceil() + 1.0, camera.height),
    ];
    Some(rect)
}

/// Central (or forward) differences of the loss for every coordinate of the
/// selected vertices (all when `vertices` is `None`).
pub fn fd_backward_gradient(
    scene: &Scene,
    camera: &Camera,
    loss: &LossSpec,
    cfg: &FDConfig,
    vertices: Option<&[u32]>,
) -> Result<VertexGrad> {
    cfg.validate()?;
    scene.validate()?;
    let k = scene.channels();
    loss.check(camera, k)?;
    let n = scene.mesh.num_vertices();
    let mut incident = vec![Vec::new(); n];
    for (t, tri) in scene.mesh.triangles.iter().enumerate() {
        for &v in tri {
            incident[v as usize].push(t as u32);
        }
    }
    let scale = 1.0 / (camera.width * camera.height * k).max(1) as f64;
    let all: Vec<u32> = (0..n as u32).collect();
    let mut grad = VertexGrad::zeros(n);
    for &v in vertices.unwrap_or(&all) {
        let p = scene.mesh.positions[v as usize];
        let j = camera.screen_jacobian(p);
        let s = (j.iter().flatten().map(|x| x * x).sum::<f64>() / 2.0).sqrt();
        if !(s > 0.0 && s.is_finite()) || incident[v as usize].is_empty() {
            continue;
        }
        let h = cfg.epsilon / s;
        for c in 0..3 {
            let state = |offset: f64| {
                let mut pos = scene.mesh.positions.clone();
                pos[v as usize][c] += offset;
                pos
            };
            let (hi, lo, span) = match cfg.scheme {
                FdScheme::Central => (state(h), state(-h), 2.0 * h),
                FdScheme::Forward => (state(h), state(0.0), h),
            };
            let rect = reach(scene, camera, &incident[v as usize], &[&hi, &lo]).unwrap_or(full(camera));
            if rect[0] >= rect[2] || rect[1] >= rect[3] {
                continue;
            }
            let eval = |pos: &[[f64; 3]]| {
                let geo = geometry(scene, pos, camera);
                loss.sum_rect(&shade_rect(scene, &geo, cfg.supersampling, rect), rect, camera.width, k, scale)
            };
            grad.positions[v as usize][c] = (eval(&hi) - eval(&lo)) / span;
        }
    }
    Ok(grad)
}

/// `|a - b| / |b|` over flattened vectors.
pub fn relative_l2_error(method: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(method.len(), reference.len());
    let num: f64 = method.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

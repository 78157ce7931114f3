//! Adjoint of the smooth part of the pipeline: attribute interpolation,
//! perspective-correct barycentrics and the vertex transform.
//!
//! Gradients are first expressed per pixel on the visible fragment
//! ([`FragmentGrad`]) and then gathered to vertices. A fragment's `position`
//! entry is the derivative of the loss with respect to a rigid screen-space
//! translation `(x_px, y_px, z/w)` of the fragment's triangle; `persp` holds
//! the derivative with respect to the `1/w` of its three vertices.
//!
//! The per-pixel work is always parallel (each pixel writes only itself). The
//! gather to vertices has a sequential scanline mode, used as the reference,
//! and a parallel mode that sums fixed row blocks in order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{check_attributes, pixel_center, RasterBuffers, ScreenGeometry, TriangleSetup};
use crate::scene::{Camera, ClipVertices, ImageF, VertexAttributes};

const CHUNK_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    #[default]
    Sequential,
    Parallel,
}

/// Per-pixel gradient with respect to the visible fragment.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentGrad {
    pub width: usize,
    pub height: usize,
    pub position: Vec<[f64; 3]>,
    pub persp: Vec<[f64; 3]>,
}

impl FragmentGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        FragmentGrad {
            width,
            height,
            position: vec![[0.0; 3]; width * height],
            persp: vec![[0.0; 3]; width * height],
        }
    }

    pub fn add_assign(&mut self, other: &FragmentGrad) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.position.iter_mut().zip(&other.position) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.persp.iter_mut().zip(&other.persp) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.position.iter().chain(&self.persp).all(|v| v.iter().all(|&c| c == 0.0))
    }
}

/// First-order change of every visible fragment under a vertex perturbation;
/// the forward-mode counterpart of [`FragmentGrad`].
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentTangent {
    pub width: usize,
    pub height: usize,
    pub position: Vec<[f64; 3]>,
    pub persp: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeGrad {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl AttributeGrad {
    pub fn get(&self, vertex: usize) -> &[f64] {
        &self.data[vertex * self.channels..(vertex + 1) * self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VertexGrad {
    /// World-space `dL/dposition`.
    pub positions: Vec<[f64; 3]>,
    pub attributes: Option<AttributeGrad>,
}

impl VertexGrad {
    pub fn zeros(vertices: usize) -> Self {
        VertexGrad {
            positions: vec![[0.0; 3]; vertices],
            attributes: None,
        }
    }

    pub fn add_assign(&mut self, other: &VertexGrad) {
        assert_eq!(self.positions.len(), other.positions.len());
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        match (&mut self.attributes, &other.attributes) {
            (Some(a), Some(b)) => {
                assert_eq!(a.data.len(), b.data.len());
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            (a @ None, Some(b)) => *a = Some(b.clone()),
            _ => {}
        }
    }

    /// Positions flattened as `x0, y0, z0, x1, ...`.
    pub fn flat(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.attributes.as_ref().is_none_or(|a| a.data.iter().all(|v| v.is_finite()))
    }
}

/// Barycentric quantities of one fragment, recomputed in `f64`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FragmentWeights {
    /// Affine barycentrics.
    pub lambda: [f64; 3],
    /// Perspective-correct barycentrics.
    pub beta: [f64; 3],
    /// `sum_k lambda_k / w_k`.
    pub denom: f64,
}

impl FragmentWeights {
    pub fn at(setup: &TriangleSetup, p: [f64; 2]) -> Self {
        let lambda = setup.lambda(p);
        let t = [0, 1, 2].map(|k| lambda[k] * setup.inv_w[k]);
        let denom = t[0] + t[1] + t[2];
        FragmentWeights {
            lambda,
            beta: t.map(|v| v / denom),
            denom,
        }
    }
}

/// Runs `f` over every pixel index and sums what it accumulates.
fn accumulate<F>(width: usize, height: usize, len: usize, mode: Accumulation, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    match mode {
        Accumulation::Sequential => {
            let mut acc = vec![0.0; len];
            for p in 0..width * height {
                f(p, &mut acc);
            }
            acc
        }
        Accumulation::Parallel => {
            let blocks: Vec<Vec<f64>> = (0..height.div_ceil(CHUNK_ROWS))
                .into_par_iter()
                .map(|b| {
                    let mut acc = vec![0.0; len];
                    for y in b * CHUNK_ROWS..((b + 1) * CHUNK_ROWS).min(height) {
                        for x in 0..width {
                            f(y * width + x, &mut acc);
                        }
                    }
                    acc
                })
                .collect();
            let mut acc = vec![0.0; len];
            for block in blocks {
                for (a, b) in acc.iter_mut().zip(block) {
                    *a += b;
                }
            }
            acc
        }
    }
}

fn visible<'a>(buffers: &RasterBuffers, geo: &'a ScreenGeometry, p: usize) -> Option<&'a TriangleSetup> {
    match buffers.index[p] {
        0 => None,
        id => geo.triangle(id - 1),
    }
}

fn center_of(width: usize, p: usize) -> [f64; 2] {
    pixel_center(p % width, p / width)
}

/// Backward pass of [`crate::raster::interpolate`].
pub fn interpolate_backward(
    dl_dimage: &ImageF,
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    attributes: &VertexAttributes,
    mode: Accumulation,
) -> Result<(AttributeGrad, FragmentGrad)> {
    let k = attributes.channels;
    if (dl_dimage.width, dl_dimage.height, dl_dimage.channels) != (buffers.width, buffers.height, k) {
        return Err(Error::shape(
            format!("{}x{}x{}", buffers.width, buffers.height, k),
            dl_dimage.shape_string(),
        ));
    }
    let triangles: Vec<[u32; 3]> = (0..geo.num_triangles() as u32)
        .filter_map(|id| geo.triangle(id).map(|t| t.vertices))
        .collect();
    check_attributes(&triangles, attributes)?;

    let width = buffers.width;
    let mut frag = FragmentGrad::zeros(width, buffers.height);
    frag.position
        .par_iter_mut()
        .zip(frag.persp.par_iter_mut())
        .enumerate()
        .for_each(|(p, (pos, persp))| {
            let Some(setup) = visible(buffers, geo, p) else { return };
            let w = FragmentWeights::at(setup, center_of(width, p));
            let g = &dl_dimage.data[p * k..(p + 1) * k];
            let a = setup.vertices.map(|v| attributes.get(v as usize));
            let g_beta = [0, 1, 2].map(|m| (0..k).map(|c| a[m][c] as f64 * g[c] as f64).sum::<f64>());
            let s = (0..3).map(|m| g_beta[m] * w.beta[m]).sum::<f64>();
            let mut f = [0.0; 2];
            for m in 0..3 {
                let g_lambda = setup.inv_w[m] / w.denom * (g_beta[m] - s);
                f[0] -= g_lambda * setup.grad_lambda[m][0];
                f[1] -= g_lambda * setup.grad_lambda[m][1];
                persp[m] = w.lambda[m] / w.denom * (g_beta[m] - s);
            }
            *pos = [f[0], f[1], 0.0];
        });

    let data = accumulate(width, buffers.height, attributes.len() * k, mode, |p, acc| {
        let Some(setup) = visible(buffers, geo, p) else { return };
        let w = FragmentWeights::at(setup, center_of(width, p));
        let g = &dl_dimage.data[p * k..(p + 1) * k];
        for m in 0..3 {
            let v = setup.vertices[m] as usize;
            for c in 0..k {
                acc[v * k + c] += w.beta[m] * g[c] as f64;
            }
        }
    });
    Ok((AttributeGrad { channels: k, data }, frag))
}

/// Gathers fragment gradients into per-vertex screen-space gradients
/// `(x_px, y_px, z/w, 1/w)`.
pub fn gather_screen(
    frag: &FragmentGrad,
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    vertices: usize,
    mode: Accumulation,
) -> Vec<[f64; 4]> {
    let width = buffers.width;
    let flat = accumulate(width, buffers.height, vertices * 4, mode, |p, acc| {
        let Some(setup) = visible(buffers, geo, p) else { return };
        let f = frag.position[p];
        let q = frag.persp[p];
        if f == [0.0; 3] && q == [0.0; 3] {
            return;
        }
        let lambda = setup.lambda(center_of(width, p));
        for m in 0..3 {
            let v = setup.vertices[m] as usize * 4;
            acc[v] += lambda[m] * f[0];
            acc[v + 1] += lambda[m] * f[1];
            acc[v + 2] += lambda[m] * f[2];
            acc[v + 3] += q[m];
        }
    });
    flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

/// Chains per-vertex screen gradients through the viewport, perspective
/// divide and view-projection matrix to world positions.
pub fn screen_to_world(screen_grad: &[[f64; 4]], clip: &ClipVertices, camera: &Camera) -> Vec<[f64; 3]> {
    let m = camera.view_projection();
    let hw = 0.5 * clip.width as f64;
    let hh = 0.5 * clip.height as f64;
    screen_grad
        .iter()
        .zip(&clip.clip)
        .map(|(g, c)| {
            let iw = 1.0 / c[3];
            let gc = [
                g[0] * hw * iw,
                -g[1] * hh * iw,
                g[2] * iw,
                (-g[0] * hw * c[0] + g[1] * hh * c[1] - g[2] * c[2] - g[3]) * iw * iw,
            ];
            [0, 1, 2].map(|j| (0..4).map(|i| m[(i, j)] * gc[i]).sum())
        })
        .collect()
}

/// Forward-mode counterpart of [`screen_to_world`]: per-vertex screen
/// tangents for a world-space displacement of every vertex.
pub fn world_to_screen(d_positions: &[[f64; 3]], clip: &ClipVertices, camera: &Camera) -> Vec<[f64; 4]> {
    let m = camera.view_projection();
    let hw = 0.5 * clip.width as f64;
    let hh = 0.5 * clip.height as f64;
    d_positions
        .iter()
        .zip(&clip.clip)
        .map(|(d, c)| {
            let dc: [f64; 4] = [0, 1, 2, 3].map(|i| (0..3).map(|j| m[(i, j)] * d[j]).sum());
            let iw = 1.0 / c[3];
            let dw = dc[3] * iw * iw;
            [
                hw * (dc[0] * iw - c[0] * dw),
                -hh * (dc[1] * iw - c[1] * dw),
                dc[2] * iw - c[2] * dw,
                -dw,
            ]
        })
        .collect()
}

/// Gathers a [`FragmentGrad`] into world-space vertex gradients.
pub fn vertex_backward(
    frag: &FragmentGrad,
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    clip: &ClipVertices,
    camera: &Camera,
    mode: Accumulation,
) -> VertexGrad {
    let screen = gather_screen(frag, buffers, geo, clip.len(), mode);
    VertexGrad {
        positions: screen_to_world(&screen, clip, camera),
        attributes: None,
    }
}

/// How each visible fragment moves under per-vertex screen tangents.
pub fn fragment_tangent(buffers: &RasterBuffers, geo: &ScreenGeometry, screen_tangents: &[[f64; 4]]) -> FragmentTangent {
    let width = buffers.width;
    let mut out = FragmentTangent {
        width,
        height: buffers.height,
        position: vec![[0.0; 3]; width * buffers.height],
        persp: vec![[0.0; 3]; width * buffers.height],
    };
    out.position
        .par_iter_mut()
        .zip(out.persp.par_iter_mut())
        .enumerate()
        .for_each(|(p, (pos, persp))| {
            let Some(setup) = visible(buffers, geo, p) else { return };
            let lambda = setup.lambda(center_of(width, p));
            for m in 0..3 {
                let t = screen_tangents[setup.vertices[m] as usize];
                pos[0] += lambda[m] * t[0];
                pos[1] += lambda[m] * t[1];
                pos[2] += lambda[m] * t[2];
                persp[m] = t[3];
            }
        });
    out
}

/// Forward-mode derivative of the interpolated image; `K` values per pixel in
/// the same layout as [`ImageF::data`].
pub fn interpolate_jvp(
    buffers: &RasterBuffers,
    geo: &ScreenGeometry,
    attributes: &VertexAttributes,
    tangent: &FragmentTangent,
    d_attributes: Option<&[f64]>,
) -> Vec<f64> {
    let k = attributes.channels;
    let width = buffers.width;
    let mut out = vec![0.0; width * buffers.height * k];
    out.par_chunks_mut(k).enumerate().for_each(|(p, px)| {
        let Some(setup) = visible(buffers, geo, p) else { return };
        let w = FragmentWeights::at(setup, center_of(width, p));
        let r = tangent.position[p];
        let dq = tangent.persp[p];
        let d_lambda = [0, 1, 2].map(|m| -(setup.grad_lambda[m][0] * r[0] + setup.grad_lambda[m][1] * r[1]));
        // t_m = lambda_m q_m, beta = t / sum(t)
        let dt = [0, 1, 2].map(|m| d_lambda[m] * setup.inv_w[m] + w.lambda[m] * dq[m]);
        let dt_sum = dt[0] + dt[1] + dt[2];
        let d_beta = [0, 1, 2].map(|m| (dt[m] - w.beta[m] * dt_sum) / w.denom);
        for m in 0..3 {
            let v = setup.vertices[m] as usize;
            let a = attributes.get(v);
            for c in 0..k {
                px[c] += d_beta[m] * a[c] as f64;
                if let Some(da) = d_attributes {
                    px[c] += w.beta[m] * da[v * k + c];
                }
            }
        }
    });
    out
}

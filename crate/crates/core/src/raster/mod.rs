//! Forward rasterization: index, depth and barycentric buffers, attribute
//! interpolation and the back-face mask. Nothing here is differentiable; the
//! gradients live in `smooth` and `edgegrad`.

mod setup;

use rayon::prelude::*;

pub use setup::{Hit, ScreenGeometry, TriangleSetup, NEAR_W_EPSILON, TILE_SIZE};

use crate::error::{Error, Result};
use crate::scene::{ClipVertices, ImageF, VertexAttributes};

/// Output of the rasterizer, one entry per pixel in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterBuffers {
    pub width: usize,
    pub height: usize,
    /// `0` is background, triangle `t` is stored as `t + 1`.
    pub index: Vec<u32>,
    /// NDC depth `z / w` of the visible fragment; `+inf` on background.
    pub depth: Vec<f32>,
    /// First two perspective-correct barycentrics; the third is `1 - b0 - b1`.
    pub bary: Vec<[f32; 2]>,
}

impl RasterBuffers {
    #[inline]
    pub fn triangle_at(&self, x: usize, y: usize) -> Option<u32> {
        match self.index[y * self.width + x] {
            0 => None,
            id => Some(id - 1),
        }
    }

    pub fn covered_pixels(&self) -> usize {
        self.index.iter().filter(|&&i| i != 0).count()
    }

    /// Single-channel coverage mask.
    pub fn mask(&self) -> ImageF {
        let data = self.index.iter().map(|&i| if i != 0 { 1.0 } else { 0.0 }).collect();
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// Pixel center of column `x`, row `y`.
#[inline]
pub fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

pub fn rasterize(clip: &ClipVertices, triangles: &[[u32; 3]]) -> RasterBuffers {
    rasterize_geometry(&ScreenGeometry::new(clip, triangles))
}

/// Tile-parallel z-buffer rasterization. Each tile owns its pixels, so the
/// result does not depend on the thread schedule.
pub fn rasterize_geometry(geo: &ScreenGeometry) -> RasterBuffers {
    let (width, height) = (geo.width, geo.height);
    let (tiles_x, tiles_y) = geo.tiles();
    let tiles: Vec<(usize, usize, Vec<Option<Hit>>)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let bin = geo.tile_bin(tx, ty);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(width);
            let y1 = (y0 + TILE_SIZE).min(height);
            let mut hits = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    hits.push(if bin.is_empty() {
                        None
                    } else {
                        geo.sample_in(bin, pixel_center(x, y))
                    });
                }
            }
            (tx, ty, hits)
        })
        .collect();

    let mut out = RasterBuffers {
        width,
        height,
        index: vec![0; width * height],
        depth: vec![f32::INFINITY; width * height],
        bary: vec![[0.0; 2]; width * height],
    };
    for (tx, ty, hits) in tiles {
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let tw = (x0 + TILE_SIZE).min(width) - x0;
        for (k, hit) in hits.into_iter().enumerate() {
            let Some(hit) = hit else { continue };
            let p = (y0 + k / tw) * width + x0 + k % tw;
            let setup = geo.triangle(hit.triangle).expect("hit triangle exists");
            let b = setup.perspective(hit.lambda);
            out.index[p] = hit.triangle + 1;
            out.depth[p] = hit.depth as f32;
            out.bary[p] = [b[0] as f32, b[1] as f32];
        }
    }
    out
}

/// Interpolation of one attribute vector with `f32` barycentrics. Shared with
/// the supersampling renderer so both produce identical values.
#[inline]
pub(crate) fn blend(bary: [f32; 2], a: [&[f32]; 3], out: &mut [f32]) {
    let b2 = 1.0 - bary[0] - bary[1];
    for c in 0..out.len() {
        out[c] = bary[0] * a[0][c] + bary[1] * a[1][c] + b2 * a[2][c];
    }
}

/// Perspective-correct interpolation of per-vertex attributes; background
/// pixels are zero.
pub fn interpolate(
    buffers: &RasterBuffers,
    triangles: &[[u32; 3]],
    attributes: &VertexAttributes,
) -> Result<ImageF> {
    check_attributes(triangles, attributes)?;
    let k = attributes.channels;
    let mut img = ImageF::zeros(buffers.width, buffers.height, k);
    img.data
        .par_chunks_mut(buffers.width * k)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..buffers.width {
                let p = y * buffers.width + x;
                let id = buffers.index[p];
                if id == 0 {
                    continue;
                }
                let t = triangles[(id - 1) as usize];
                let a = t.map(|v| attributes.get(v as usize));
                blend(buffers.bary[p], a, &mut row[x * k..(x + 1) * k]);
            }
        });
    Ok(img)
}

pub(crate) fn check_attributes(triangles: &[[u32; 3]], attributes: &VertexAttributes) -> Result<()> {
    let n = attributes.len();
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v as usize >= n)) {
        return Err(Error::shape(
            format!("attributes for every vertex referenced by {t:?}"),
            format!("{n} attribute vectors"),
        ));
    }
    Ok(())
}

/// 1 where the visible fragment belongs to a back-facing triangle.
pub fn render_backface_mask(buffers: &RasterBuffers, geo: &ScreenGeometry) -> ImageF {
    let data = buffers
        .index
        .iter()
        .map(|&id| match id {
            0 => 0.0,
            id => match geo.triangle(id - 1) {
                Some(t) if t.is_back_facing() => 1.0,
                _ => 0.0,
            },
        })
        .collect();
    ImageF {
        width: buffers.width,
        height: buffers.height,
        channels: 1,
        data,
    }
}

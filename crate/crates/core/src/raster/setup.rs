//! Screen-space triangle setup shared by the rasterizer, the edge classifier
//! and the supersampling oracle.
//!
//! Edge functions are always evaluated from the lexicographically smaller
//! endpoint, so two triangles sharing an edge see exactly negated values at
//! every point. Together with the top-left ownership rule this makes coverage
//! watertight: a pixel center on a shared edge belongs to exactly one side.

use crate::scene::ClipVertices;

/// Vertices with `w` below this are culled together with their triangles.
pub const NEAR_W_EPSILON: f64 = 1e-6;

pub const TILE_SIZE: usize = 16;

#[derive(Clone, Debug)]
pub struct TriangleSetup {
    pub vertices: [u32; 3],
    /// Screen positions in pixels.
    pub screen: [[f64; 2]; 3],
    /// NDC depth `z / w` per vertex.
    pub depth: [f64; 3],
    pub inv_w: [f64; 3],
    /// Twice the signed area in y-down screen space.
    pub area: f64,
    /// Screen-space gradients of the affine barycentrics.
    pub grad_lambda: [[f64; 2]; 3],
    /// `(x_min, y_min, x_max, y_max)` of the screen-space bounding box.
    pub bounds: [f64; 4],
    flip: [bool; 3],
    owns: [bool; 3],
}

/// A point sample that landed on a triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub triangle: u32,
    /// Affine (screen-linear) barycentrics.
    pub lambda: [f64; 3],
    pub depth: f64,
}

impl TriangleSetup {
    fn new(vertices: [u32; 3], clip: &ClipVertices) -> Option<Self> {
        let mut screen = [[0.0; 2]; 3];
        let mut depth = [0.0; 3];
        let mut inv_w = [0.0; 3];
        for k in 0..3 {
            let c = clip.clip[vertices[k] as usize];
            if !(c[3] >= NEAR_W_EPSILON) {
                return None;
            }
            let s = clip.screen[vertices[k] as usize];
            if !s.iter().all(|v| v.is_finite()) {
                return None;
            }
            screen[k] = [s[0], s[1]];
            depth[k] = s[2];
            inv_w[k] = 1.0 / c[3];
        }
        let area = cross(sub(screen[1], screen[0]), sub(screen[2], screen[0]));
        if area == 0.0 || !area.is_finite() {
            return None;
        }
        let orient = area.signum();
        let mut flip = [false; 3];
        let mut owns = [false; 3];
        let mut grad_lambda = [[0.0; 2]; 3];
        for m in 0..3 {
            let a = screen[(m + 1) % 3];
            let b = screen[(m + 2) % 3];
            flip[m] = lex_less(b, a);
            let n = [-(b[1] - a[1]) * orient, (b[0] - a[0]) * orient];
            owns[m] = n[0] > 0.0 || (n[0] == 0.0 && n[1] > 0.0);
            grad_lambda[m] = [-(b[1] - a[1]) / area, (b[0] - a[0]) / area];
        }
        let xs = screen.map(|s| s[0]);
        let ys = screen.map(|s| s[1]);
        let bounds = [
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            ys.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ];
        Some(TriangleSetup {
            vertices,
            screen,
            depth,
            inv_w,
            area,
            grad_lambda,
            bounds,
            flip,
            owns,
        })
    }

    /// Edge function of the edge opposite vertex `m`; equals `lambda_m * area`.
    #[inline]
    pub fn edge_value(&self, m: usize, p: [f64; 2]) -> f64 {
        let a = self.screen[(m + 1) % 3];
        let b = self.screen[(m + 2) % 3];
        if self.flip[m] {
            -cross(sub(a, b), sub(p, b))
        } else {
            cross(sub(b, a), sub(p, a))
        }
    }

    /// Fill-rule coverage test.
    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        if p[0] < self.bounds[0] || p[0] > self.bounds[2] || p[1] < self.bounds[1] || p[1] > self.bounds[3] {
            return false;
        }
        (0..3).all(|m| self.inside_edge(m, self.edge_value(m, p)))
    }

    #[inline]
    fn inside_edge(&self, m: usize, e: f64) -> bool {
        let e = if self.area > 0.0 { e } else { -e };
        e > 0.0 || (e == 0.0 && self.owns[m])
    }

    /// Affine barycentrics at `p`, whether or not `p` is inside.
    #[inline]
    pub fn lambda(&self, p: [f64; 2]) -> [f64; 3] {
        let e = [self.edge_value(0, p), self.edge_value(1, p), self.edge_value(2, p)];
        let sum = e[0] + e[1] + e[2];
        [e[0] / sum, e[1] / sum, e[2] / sum]
    }

    /// Coverage test returning the affine barycentrics when covered.
    #[inline]
    pub fn hit(&self, p: [f64; 2]) -> Option<[f64; 3]> {
        if p[0] < self.bounds[0] || p[0] > self.bounds[2] || p[1] < self.bounds[1] || p[1] > self.bounds[3] {
            return None;
        }
        let e = [self.edge_value(0, p), self.edge_value(1, p), self.edge_value(2, p)];
        if !(0..3).all(|m| self.inside_edge(m, e[m])) {
            return None;
        }
        let sum = e[0] + e[1] + e[2];
        Some([e[0] / sum, e[1] / sum, e[2] / sum])
    }

    #[inline]
    pub fn depth_at(&self, lambda: [f64; 3]) -> f64 {
        lambda[0] * self.depth[0] + lambda[1] * self.depth[1] + lambda[2] * self.depth[2]
    }

    /// Perspective-correct barycentrics from affine ones.
    #[inline]
    pub fn perspective(&self, lambda: [f64; 3]) -> [f64; 3] {
        let t = [
            lambda[0] * self.inv_w[0],
            lambda[1] * self.inv_w[1],
            lambda[2] * self.inv_w[2],
        ];
        let s = t[0] + t[1] + t[2];
        [t[0] / s, t[1] / s, t[2] / s]
    }

    /// Screen-space gradient `(d depth / dx, d depth / dy)` of the triangle plane.
    pub fn depth_gradient(&self) -> [f64; 2] {
        let mut g = [0.0; 2];
        for k in 0..3 {
            g[0] += self.depth[k] * self.grad_lambda[k][0];
            g[1] += self.depth[k] * self.grad_lambda[k][1];
        }
        g
    }

    /// Counter-clockwise in NDC (y up) counts as front-facing.
    pub fn is_back_facing(&self) -> bool {
        self.area > 0.0
    }
}

/// Per-camera screen geometry for a triangle list, binned into tiles.
#[derive(Clone, Debug)]
pub struct ScreenGeometry {
    pub width: usize,
    pub height: usize,
    triangles: Vec<Option<TriangleSetup>>,
    tiles_x: usize,
    tiles_y: usize,
    bins: Vec<Vec<u32>>,
}

impl ScreenGeometry {
    pub fn new(clip: &ClipVertices, triangles: &[[u32; 3]]) -> Self {
        let (width, height) = (clip.width, clip.height);
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        let setups: Vec<Option<TriangleSetup>> = triangles
            .iter()
            .map(|&t| TriangleSetup::new(t, clip))
            .collect();
        for (id, setup) in setups.iter().enumerate() {
            let Some(s) = setup else { continue };
            let [x0, y0, x1, y1] = s.bounds;
            if x1 < 0.0 || y1 < 0.0 || x0 >= width as f64 || y0 >= height as f64 {
                continue;
            }
            let tx0 = (x0.max(0.0) as usize / TILE_SIZE).min(tiles_x - 1);
            let ty0 = (y0.max(0.0) as usize / TILE_SIZE).min(tiles_y - 1);
            let tx1 = ((x1.min(width as f64 - 1.0)) as usize / TILE_SIZE).min(tiles_x - 1);
            let ty1 = ((y1.min(height as f64 - 1.0)) as usize / TILE_SIZE).min(tiles_y - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(id as u32);
                }
            }
        }
        ScreenGeometry {
            width,
            height,
            triangles: setups,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// `None` for triangles culled at the near plane or degenerate on screen.
    pub fn triangle(&self, id: u32) -> Option<&TriangleSetup> {
        self.triangles.get(id as usize).and_then(Option::as_ref)
    }

    pub fn tiles(&self) -> (usize, usize) {
        (self.tiles_x, self.tiles_y)
    }

    pub(crate) fn tile_bin(&self, tx: usize, ty: usize) -> &[u32] {
        &self.bins[ty * self.tiles_x + tx]
    }

    /// Front-most triangle covering the point; ties go to the lower id.
    /// Points outside the image return `None`.
    #[inline]
    pub fn sample(&self, p: [f64; 2]) -> Option<Hit> {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64) {
            return None;
        }
        let tx = p[0] as usize / TILE_SIZE;
        let ty = p[1] as usize / TILE_SIZE;
        self.sample_in(self.tile_bin(tx, ty), p)
    }

    /// Whether any triangle covers `p`, which may lie outside the image.
    pub fn covered(&self, p: [f64; 2]) -> bool {
        self.triangles.iter().flatten().any(|t| t.contains(p))
    }

    #[inline]
    pub(crate) fn sample_in(&self, candidates: &[u32], p: [f64; 2]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for &id in candidates {
            let s = self.triangles[id as usize].as_ref().expect("binned triangles are set up");
            if let Some(lambda) = s.hit(p) {
                let depth = s.depth_at(lambda);
                if best.is_none_or(|b| depth < b.depth) {
                    best = Some(Hit {
                        triangle: id,
                        lambda,
                        depth,
                    });
                }
            }
        }
        best
    }
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn lex_less(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] < b[0] || (a[0] == b[0] && a[1] < b[1])
}

use nalgebra::{Matrix4, Point3, Vector3, Vector4};

use super::mesh::Mesh;

/// Pinhole camera with OpenGL conventions: the camera looks down its local
/// `-z`, NDC spans `[-1, 1]` on every axis and depth is stored as `z / w`.
///
/// Screen space is measured in pixels with `y` pointing down; pixel `(row i,
/// col j)` has its center at `(j + 0.5, i + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub view: Matrix4<f64>,
    pub projection: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(view: Matrix4<f64>, projection: Matrix4<f64>, width: usize, height: usize) -> Self {
        Camera {
            view,
            projection,
            width,
            height,
        }
    }

    /// Perspective camera at `eye` looking at `target`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fovy_deg: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Self {
        let view = Matrix4::look_at_rh(
            &Point3::from(eye),
            &Point3::from(target),
            &Vector3::from(up),
        );
        let aspect = width as f64 / height as f64;
        let projection = perspective(fovy_deg.to_radians(), aspect, near, far);
        Camera::new(view, projection, width, height)
    }

    pub fn view_projection(&self) -> Matrix4<f64> {
        self.projection * self.view
    }

    /// Same camera rendering at a different resolution.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        let mut cam = self.clone();
        let old_aspect = self.width as f64 / self.height as f64;
        let new_aspect = width as f64 / height as f64;
        cam.projection[(0, 0)] *= old_aspect / new_aspect;
        cam.width = width;
        cam.height = height;
        cam
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 4] {
        let c = self.view_projection() * Vector4::new(p[0], p[1], p[2], 1.0);
        [c.x, c.y, c.z, c.w]
    }

    /// Maps clip coordinates to `(x_px, y_px, z/w)`.
    pub fn clip_to_screen(&self, c: [f64; 4]) -> [f64; 3] {
        clip_to_screen(c, self.width, self.height)
    }

    /// Inverse of project + viewport: recovers the world point at screen
    /// position `(x_px, y_px)` and NDC depth `z/w`.
    pub fn unproject(&self, s: [f64; 3]) -> Option<[f64; 3]> {
        let ndc_x = 2.0 * s[0] / self.width as f64 - 1.0;
        let ndc_y = 1.0 - 2.0 * s[1] / self.height as f64;
        let inv = self.view_projection().try_inverse()?;
        let h = inv * Vector4::new(ndc_x, ndc_y, s[2], 1.0);
        Some([h.x / h.w, h.y / h.w, h.z / h.w])
    }

    /// Jacobian of the pixel position `(x_px, y_px)` with respect to the world
    /// position of `p`.
    pub fn screen_jacobian(&self, p: [f64; 3]) -> [[f64; 3]; 2] {
        let m = self.view_projection();
        let c = self.project(p);
        let (w, h) = (self.width as f64, self.height as f64);
        let inv_w = 1.0 / c[3];
        let mut jac = [[0.0; 3]; 2];
        for k in 0..3 {
            let dx = m[(0, k)];
            let dy = m[(1, k)];
            let dw = m[(3, k)];
            jac[0][k] = 0.5 * w * (dx * inv_w - c[0] * dw * inv_w * inv_w);
            jac[1][k] = -0.5 * h * (dy * inv_w - c[1] * dw * inv_w * inv_w);
        }
        jac
    }
}

/// OpenGL-style perspective projection (`fovy` in radians).
pub fn perspective(fovy: f64, aspect: f64, near: f64, far: f64) -> Matrix4<f64> {
    let f = 1.0 / (0.5 * fovy).tan();
    let mut m = Matrix4::zeros();
    m[(0, 0)] = f / aspect;
    m[(1, 1)] = f;
    m[(2, 2)] = (far + near) / (near - far);
    m[(2, 3)] = 2.0 * far * near / (near - far);
    m[(3, 2)] = -1.0;
    m
}

pub fn clip_to_screen(c: [f64; 4], width: usize, height: usize) -> [f64; 3] {
    let inv_w = 1.0 / c[3];
    [
        (c[0] * inv_w + 1.0) * 0.5 * width as f64,
        (1.0 - c[1] * inv_w) * 0.5 * height as f64,
        c[2] * inv_w,
    ]
}

/// Per-vertex clip and screen coordinates for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipVertices {
    pub clip: Vec<[f64; 4]>,
    /// `(x_px, y_px, z/w)`; always equal to `clip_to_screen(clip[i])`.
    pub screen: Vec<[f64; 3]>,
    pub width: usize,
    pub height: usize,
}

impl ClipVertices {
    pub fn from_clip(clip: Vec<[f64; 4]>, width: usize, height: usize) -> Self {
        let screen = clip.iter().map(|&c| clip_to_screen(c, width, height)).collect();
        ClipVertices {
            clip,
            screen,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip.is_empty()
    }
}

pub fn transform_vertices(mesh: &Mesh, camera: &Camera) -> ClipVertices {
    transform_positions(&mesh.positions, camera)
}

pub fn transform_positions(positions: &[[f64; 3]], camera: &Camera) -> ClipVertices {
    let m = camera.view_projection();
    let clip = positions
        .iter()
        .map(|p| {
            let c = m * Vector4::new(p[0], p[1], p[2], 1.0);
            [c.x, c.y, c.z, c.w]
        })
        .collect();
    ClipVertices::from_clip(clip, camera.width, camera.height)
}

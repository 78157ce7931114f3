//! End-to-end render and gradient passes for one camera.

use crate::edgegrad::{edge_jvp, scatter_edge_gradients, EdgeGradConfig, EdgeStats};
use crate::error::{Error, Result};
use crate::raster::{interpolate, rasterize_geometry, render_backface_mask, RasterBuffers, ScreenGeometry};
use crate::scene::{transform_positions, Camera, ClipVertices, ImageF, Mesh, VertexAttributes};
use crate::smooth::{
    fragment_tangent, interpolate_backward, interpolate_jvp, vertex_backward, world_to_screen, Accumulation,
    VertexGrad,
};

/// Geometry plus per-vertex shading and the color of uncovered pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mesh: Mesh,
    pub attributes: VertexAttributes,
    /// One value per channel; empty means zero.
    pub background: Vec<f32>,
}

impl Scene {
    pub fn new(mesh: Mesh, attributes: VertexAttributes) -> Result<Self> {
        let scene = Scene {
            mesh,
            attributes,
            background: Vec::new(),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn with_background(mut self, background: Vec<f32>) -> Result<Self> {
        self.background = background;
        self.validate()?;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.attributes.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() != self.mesh.num_vertices() {
            return Err(Error::shape(
                format!("{} attribute vectors", self.mesh.num_vertices()),
                self.attributes.len(),
            ));
        }
        if !self.background.is_empty() && self.background.len() != self.channels() {
            return Err(Error::shape(
                format!("background with {} channels", self.channels()),
                format!("{} channels", self.background.len()),
            ));
        }
        Ok(())
    }

    /// Background value for channel `c`.
    pub fn background_value(&self, c: usize) -> f32 {
        self.background.get(c).copied().unwrap_or(0.0)
    }
}

/// Everything the backward passes need from a forward render.
#[derive(Clone, Debug)]
pub struct Frame {
    pub clip: ClipVertices,
    pub geo: ScreenGeometry,
    pub buffers: RasterBuffers,
    pub image: ImageF,
}

pub fn render(scene: &Scene, camera: &Camera) -> Result<Frame> {
    scene.validate()?;
    let clip = transform_positions(&scene.mesh.positions, camera);
    let geo = ScreenGeometry::new(&clip, &scene.mesh.triangles);
    let buffers = rasterize_geometry(&geo);
    let mut image = interpolate(&buffers, &scene.mesh.triangles, &scene.attributes)?;
    if scene.background.iter().any(|&v| v != 0.0) {
        let k = scene.channels();
        for (p, &id) in buffers.index.iter().enumerate() {
            if id == 0 {
                image.data[p * k..(p + 1) * k].copy_from_slice(&scene.background);
            }
        }
    }
    Ok(Frame {
        clip,
        geo,
        buffers,
        image,
    })
}

/// `None` for `edges` gives the "continuous only" gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientOptions {
    pub edges: Option<EdgeGradConfig>,
    pub accumulation: Accumulation,
}

impl Default for GradientOptions {
    fn default() -> Self {
        GradientOptions {
            edges: Some(EdgeGradConfig::default()),
            accumulation: Accumulation::Sequential,
        }
    }
}

fn edge_config(scene: &Scene, cfg: &EdgeGradConfig) -> EdgeGradConfig {
    let mut cfg = cfg.clone();
    if cfg.border_background.is_empty() && !scene.background.is_empty() {
        cfg.border_background = scene.background.clone();
    }
    cfg
}

/// Vertex and attribute gradients of a loss whose image gradient is
/// `dl_dimage`.
pub fn backward(
    scene: &Scene,
    camera: &Camera,
    frame: &Frame,
    dl_dimage: &ImageF,
    opts: &GradientOptions,
) -> Result<(VertexGrad, EdgeStats)> {
    let (attr_grad, mut frag) =
        interpolate_backward(dl_dimage, &frame.buffers, &frame.geo, &scene.attributes, opts.accumulation)?;
    let mut stats = EdgeStats::default();
    if let Some(cfg) = &opts.edges {
        let (edge_frag, s) =
            scatter_edge_gradients(dl_dimage, &frame.image, &frame.buffers, &frame.geo, &edge_config(scene, cfg))?;
        frag.add_assign(&edge_frag);
        stats = s;
    }
    let mut grad = vertex_backward(&frag, &frame.buffers, &frame.geo, &frame.clip, camera, opts.accumulation);
    grad.attributes = Some(attr_grad);
    Ok((grad, stats))
}

/// Back-face coverage of a frame: 1 where the visible triangle faces away.
pub fn backface_mask(frame: &Frame) -> ImageF {
    render_backface_mask(&frame.buffers, &frame.geo)
}

/// Vertex gradient of a loss on the back-face mask. The mask is piecewise
/// constant, so only its boundaries carry gradient.
pub fn backward_mask(
    camera: &Camera,
    frame: &Frame,
    mask: &ImageF,
    dl_dmask: &ImageF,
    cfg: &EdgeGradConfig,
    accumulation: Accumulation,
) -> Result<(VertexGrad, EdgeStats)> {
    let mut cfg = cfg.clone();
    cfg.border_background = Vec::new();
    let (frag, stats) = scatter_edge_gradients(dl_dmask, mask, &frame.buffers, &frame.geo, &cfg)?;
    Ok((vertex_backward(&frag, &frame.buffers, &frame.geo, &frame.clip, camera, accumulation), stats))
}

/// Per-pixel derivative of the rendered image along a world-space vertex
/// displacement, in the layout of [`ImageF::data`].
pub fn forward_gradient(
    scene: &Scene,
    camera: &Camera,
    frame: &Frame,
    d_positions: &[[f64; 3]],
    edges: Option<&EdgeGradConfig>,
) -> Result<Vec<f64>> {
    if d_positions.len() != scene.mesh.num_vertices() {
        return Err(Error::shape(scene.mesh.num_vertices(), d_positions.len()));
    }
    let screen = world_to_screen(d_positions, &frame.clip, camera);
    let tangent = fragment_tangent(&frame.buffers, &frame.geo, &screen);
    let mut out = interpolate_jvp(&frame.buffers, &frame.geo, &scene.attributes, &tangent, None);
    if let Some(cfg) = edges {
        let e = edge_jvp(&frame.image, &frame.buffers, &frame.geo, &tangent, &edge_config(scene, cfg))?;
        for (o, v) in out.iter_mut().zip(e) {
            *o += v;
        }
    }
    Ok(out)
}

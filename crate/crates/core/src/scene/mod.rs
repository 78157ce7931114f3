//! Scene description: meshes, cameras, images and their file formats.

pub mod camera;
pub mod image;
pub mod mesh;
pub mod obj;
pub mod shapes;

pub use camera::{transform_positions, transform_vertices, Camera, ClipVertices};
pub use image::{read_image, write_image, ImageF, ImageFormat};
pub use mesh::Mesh;
pub use obj::{load_obj, load_obj_with, write_obj, ObjOptions};

/// Per-vertex attribute vectors with `channels` components each.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexAttributes {
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VertexAttributes {
    pub fn new(channels: usize, data: Vec<f32>) -> Self {
        assert!(channels > 0 && data.len() % channels == 0);
        VertexAttributes { channels, data }
    }

    pub fn zeros(vertices: usize, channels: usize) -> Self {
        VertexAttributes::new(channels, vec![0.0; vertices * channels])
    }

    /// The same value on every vertex.
    pub fn constant(vertices: usize, value: &[f32]) -> Self {
        let data = (0..vertices).flat_map(|_| value.iter().copied()).collect();
        VertexAttributes::new(value.len(), data)
    }

    pub fn from_colors(colors: &[[f32; 3]]) -> Self {
        VertexAttributes::new(3, colors.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, vertex: usize) -> &[f32] {
        &self.data[vertex * self.channels..(vertex + 1) * self.channels]
    }

    pub fn get_mut(&mut self, vertex: usize) -> &mut [f32] {
        &mut self.data[vertex * self.channels..(vertex + 1) * self.channels]
    }
}

//! JSON scene and experiment configs. Paths inside a config are resolved
//! against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use edgegrad::pipeline::Scene;
use edgegrad::scene::{load_obj, shapes, Camera, Mesh, VertexAttributes};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Label for output files and reports; defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub meshes: Vec<MeshSpec>,
    #[serde(default)]
    pub cameras: Vec<CameraSpec>,
    pub width: usize,
    pub height: usize,
    /// One value per channel; defaults to zero.
    #[serde(default)]
    pub background: Vec<f32>,
    #[serde(default)]
    pub seed: u64,
    /// Scene config whose render (through this config's cameras) is the
    /// default loss target.
    #[serde(default)]
    pub target: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub shape: Option<ShapeSpec>,
    /// Flat color; otherwise OBJ vertex colors, otherwise white.
    #[serde(default)]
    pub color: Option<Vec<f32>>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub translate: [f64; 3],
    #[serde(default)]
    pub flip_winding: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Cube { half_size: f64 },
    Icosphere { subdivisions: usize, radius: f64 },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    #[serde(default)]
    pub target: [f64; 3],
    #[serde(default = "up")]
    pub up: [f64; 3],
    #[serde(default = "fov")]
    pub fov_y: f64,
    #[serde(default = "near")]
    pub near: f64,
    #[serde(default = "far")]
    pub far: f64,
}

fn up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}
fn fov() -> f64 {
    40.0
}
fn near() -> f64 {
    0.1
}
fn far() -> f64 {
    100.0
}

impl CameraSpec {
    pub fn build(&self, width: usize, height: usize) -> Camera {
        Camera::look_at(self.eye, self.target, self.up, self.fov_y, width, height, self.near, self.far)
    }
}

/// A scene config with its files loaded.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub name: String,
    pub path: PathBuf,
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub seed: u64,
    pub target: Option<Box<LoadedScene>>,
}

impl LoadedScene {
    /// Same cameras at `res x res`.
    pub fn at_resolution(&self, res: usize) -> Vec<Camera> {
        self.cameras.iter().map(|c| c.with_resolution(res, res)).collect()
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn build_mesh(spec: &MeshSpec, base: &Path) -> anyhow::Result<(Mesh, VertexAttributes)> {
    let mut mesh = match (&spec.path, &spec.shape) {
        (Some(p), None) => {
            let p = resolve(base, p);
            load_obj(&p).with_context(|| format!("cannot load mesh {}", p.display()))?
        }
        (None, Some(ShapeSpec::Cube { half_size })) => shapes::cube(*half_size),
        (None, Some(ShapeSpec::Icosphere { subdivisions, radius })) => {
            ensure!(*subdivisions <= 6, "icosphere subdivisions must be at most 6");
            shapes::icosphere(*subdivisions, *radius)
        }
        _ => bail!("each mesh needs exactly one of `path` or `shape`"),
    };
    for p in &mut mesh.positions {
        for c in 0..3 {
            p[c] = p[c] * spec.scale + spec.translate[c];
        }
    }
    if spec.flip_winding {
        mesh.flip_winding();
    }
    let n = mesh.num_vertices();
    let attrs = match (&spec.color, &mesh.vertex_colors) {
        (Some(c), _) => {
            ensure!(!c.is_empty(), "mesh color must have at least one channel");
            VertexAttributes::constant(n, c)
        }
        (None, Some(colors)) => VertexAttributes::from_colors(colors),
        (None, None) => VertexAttributes::constant(n, &[1.0, 1.0, 1.0]),
    };
    Ok((mesh, attrs))
}

pub fn load_scene(path: &Path) -> anyhow::Result<LoadedScene> {
    load_scene_inner(path, 0)
}

fn load_scene_inner(path: &Path, depth: usize) -> anyhow::Result<LoadedScene> {
    ensure!(depth < 4, "target chain too deep at {}", path.display());
    let cfg: SceneConfig = read_json(path)?;
    let base = base_dir(path);
    ensure!(cfg.width >= 8 && cfg.height >= 8, "image size must be at least 8x8, got {}x{}", cfg.width, cfg.height);
    ensure!(!cfg.meshes.is_empty(), "scene has no meshes");
    let mut combined: Option<(Mesh, VertexAttributes)> = None;
    for (i, spec) in cfg.meshes.iter().enumerate() {
        let (mesh, attrs) = build_mesh(spec, &base).with_context(|| format!("mesh {i}"))?;
        combined = Some(match combined {
            None => (mesh, attrs),
            Some((mut m, mut a)) => {
                ensure!(
                    a.channels == attrs.channels,
                    "mesh {i} has {} color channels, earlier meshes have {}",
                    attrs.channels,
                    a.channels
                );
                m.append(&mesh);
                a.data.extend_from_slice(&attrs.data);
                (m, a)
            }
        });
    }
    let (mut mesh, attrs) = combined.expect("at least one mesh");
    mesh.vertex_colors = None;
    let scene = Scene::new(mesh, attrs)
        .and_then(|s| s.with_background(cfg.background.clone()))
        .with_context(|| format!("invalid scene {}", path.display()))?;
    let cameras = cfg.cameras.iter().map(|c| c.build(cfg.width, cfg.height)).collect();
    let target = match &cfg.target {
        Some(t) => Some(Box::new(load_scene_inner(&resolve(&base, t), depth + 1)?)),
        None => None,
    };
    let name = match cfg.name {
        Some(n) => {
            ensure!(
                !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'),
                "name `{n}` must be non-empty ASCII letters, digits, `_` or `-`"
            );
            n
        }
        None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    Ok(LoadedScene {
        name,
        path: path.to_path_buf(),
        scene,
        cameras,
        seed: cfg.seed,
        target,
    })
}

/// A scene that must be rendered: at least one camera.
pub fn load_view_scene(path: &Path) -> anyhow::Result<LoadedScene> {
    let s = load_scene(path)?;
    ensure!(!s.cameras.is_empty(), "{} has no cameras", path.display());
    Ok(s)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Initial scene (cameras and resolution come from here).
    pub scene: PathBuf,
    /// Target scene; defaults to the initial scene's `target`.
    #[serde(default)]
    pub target: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    /// Geometric decay to this learning rate over `steps`.
    #[serde(default)]
    pub lr_final: Option<f64>,
    #[serde(default = "lambda")]
    pub lambda: f64,
    #[serde(default = "backface")]
    pub backface_weight: f64,
    #[serde(default)]
    pub laplacian_weight: f64,
    /// `false` gives the continuous-only baseline.
    #[serde(default = "yes")]
    pub edges: bool,
    #[serde(default = "yes")]
    pub include_intersections: bool,
    /// Write an OBJ every this many steps; 0 disables.
    #[serde(default)]
    pub snapshot_every: usize,
    /// Stop once the mean mask IoU reaches this value.
    #[serde(default)]
    pub stop_iou: Option<f64>,
    /// Uniform random displacement of the initial vertices, seeded.
    #[serde(default)]
    pub init_jitter: f64,
}

fn lambda() -> f64 {
    16.0
}
fn backface() -> f64 {
    edgegrad::optim::BACKFACE_WEIGHT
}
fn yes() -> bool {
    true
}

pub struct LoadedExperiment {
    pub config: ExperimentConfig,
    pub scene: LoadedScene,
    pub target: LoadedScene,
}

pub fn load_experiment(path: &Path) -> anyhow::Result<LoadedExperiment> {
    let cfg: ExperimentConfig = read_json(path)?;
    ensure!(cfg.steps >= 1, "steps must be at least 1");
    ensure!(cfg.lr > 0.0 && cfg.lr.is_finite(), "lr must be positive");
    if let Some(l) = cfg.lr_final {
        ensure!(l > 0.0 && l.is_finite(), "lr_final must be positive");
    }
    ensure!(cfg.lambda >= 0.0 && cfg.lambda.is_finite(), "lambda must be >= 0");
    ensure!(cfg.backface_weight >= 0.0 && cfg.laplacian_weight >= 0.0, "loss weights must be >= 0");
    ensure!(cfg.init_jitter >= 0.0, "init_jitter must be >= 0");
    let base = base_dir(path);
    let mut scene = load_view_scene(&resolve(&base, &cfg.scene))?;
    let target = match (&cfg.target, scene.target.take()) {
        (Some(t), _) => load_scene(&resolve(&base, t))?,
        (None, Some(t)) => *t,
        (None, None) => bail!("experiment needs a target scene"),
    };
    ensure!(
        target.scene.channels() == scene.scene.channels(),
        "target has {} channels, scene has {}",
        target.scene.channels(),
        scene.scene.channels()
    );
    Ok(LoadedExperiment {
        config: cfg,
        scene,
        target,
    })
}

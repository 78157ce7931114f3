//! Losses, Laplacian preconditioning, Adam, and a multi-view fitting loop.
//!
//! Positions are optimized in the smoothed parameterization
//! `u = (I + lambda L) x`: the raw gradient is mapped to `(I + lambda L)^-1 g`,
//! Adam steps `u`, and positions are recovered with the same solve.

use nalgebra::{DMatrix, Dyn};

use crate::edgegrad::{EdgeGradConfig, EdgeStats};
use crate::error::{Error, Result};
use crate::pipeline::{backface_mask, backward, backward_mask, render, Frame, GradientOptions, Scene};
use crate::scene::{Camera, ImageF, Mesh};
use crate::smooth::VertexGrad;

pub const BACKFACE_WEIGHT: f64 = 10.0;
pub const LAPLACIAN_REG_WEIGHT: f64 = 4e-8;

/// `sum (render - target)^2` and its image gradient.
pub fn l2_loss(render: &ImageF, target: &ImageF) -> Result<(f64, ImageF)> {
    render.check_shape(target)?;
    let mut loss = 0.0;
    let data = render
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            loss += d * d;
            (2.0 * d) as f32
        })
        .collect();
    Ok((loss, ImageF { data, ..render.clone() }))
}

/// `weight * sum mask^2` with [`BACKFACE_WEIGHT`].
pub fn backface_loss(mask: &ImageF) -> (f64, ImageF) {
    backface_loss_weighted(mask, BACKFACE_WEIGHT)
}

pub fn backface_loss_weighted(mask: &ImageF, weight: f64) -> (f64, ImageF) {
    let loss = weight * mask.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    let data = mask.data.iter().map(|&v| (2.0 * weight * v as f64) as f32).collect();
    (loss, ImageF { data, ..mask.clone() })
}

/// Intersection over union of two coverage masks (channel 0 above 0.5).
pub fn mask_iou(a: &ImageF, b: &ImageF) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(a.shape_string(), b.shape_string()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for p in 0..a.num_pixels() {
        let x = a.data[p * a.channels] > 0.5;
        let y = b.data[p * b.channels] > 0.5;
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr(a: &ImageF, b: &ImageF) -> Result<f64> {
    let (sse, _) = l2_loss(a, b)?;
    let mse = sse / a.data.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Uniform (combinatorial) Laplacian `L = D - A`.
#[derive(Clone, Debug)]
pub struct Laplacian {
    neighbors: Vec<Vec<u32>>,
}

impl Laplacian {
    pub fn uniform(mesh: &Mesh) -> Self {
        Laplacian {
            neighbors: mesh.vertex_neighbors(),
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn apply(&self, x: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut out = x[i].map(|v| v * nb.len() as f64);
                for &j in nb {
                    for c in 0..3 {
                        out[c] -= x[j as usize][c];
                    }
                }
                out
            })
            .collect()
    }

    /// Regularizer `weight * |L x|^2` and its gradient `2 weight L^T L x`.
    pub fn regularization(&self, x: &[[f64; 3]], weight: f64) -> (f64, Vec<[f64; 3]>) {
        let lx = self.apply(x);
        let loss = weight * lx.iter().flatten().map(|v| v * v).sum::<f64>();
        let mut g = self.apply(&lx);
        g.iter_mut().flatten().for_each(|v| *v *= 2.0 * weight);
        (loss, g)
    }

    fn dense_system(&self, lambda: f64) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::identity(n, n);
        for (i, nb) in self.neighbors.iter().enumerate() {
            m[(i, i)] += lambda * nb.len() as f64;
            for &j in nb {
                m[(i, j as usize)] -= lambda;
            }
        }
        m
    }
}

const DENSE_LIMIT: usize = 5000;
const CG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Solver {
    Identity,
    Dense(nalgebra::Cholesky<f64, Dyn>),
    ConjugateGradient,
}

/// Solves and applies `I + lambda L` for the uniform Laplacian of a fixed
/// topology.
#[derive(Clone, Debug)]
pub struct LaplacianPreconditioner {
    pub lambda: f64,
    laplacian: Laplacian,
    solver: Solver,
}

impl LaplacianPreconditioner {
    pub fn new(mesh: &Mesh, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        let laplacian = Laplacian::uniform(mesh);
        let solver = if lambda == 0.0 {
            Solver::Identity
        } else if laplacian.len() < DENSE_LIMIT {
            let chol = laplacian.dense_system(lambda).cholesky();
            Solver::Dense(chol.expect("I + lambda L is positive definite"))
        } else {
            Solver::ConjugateGradient
        };
        Ok(LaplacianPreconditioner {
            lambda,
            laplacian,
            solver,
        })
    }

    pub fn laplacian(&self) -> &Laplacian {
        &self.laplacian
    }

    /// `(I + lambda L) x`.
    pub fn apply(&self, x: &[[f64; 3]]) -> Vec<[f64; 3]> {
        if let Solver::Identity = self.solver {
            return x.to_vec();
        }
        let lx = self.laplacian.apply(x);
        x.iter()
            .zip(lx)
            .map(|(a, b)| [0, 1, 2].map(|c| a[c] + self.lambda * b[c]))
            .collect()
    }

    /// `(I + lambda L)^-1 b`.
    pub fn solve(&self, b: &[[f64; 3]]) -> Vec<[f64; 3]> {
        assert_eq!(b.len(), self.laplacian.len());
        match &self.solver {
            Solver::Identity => b.to_vec(),
            Solver::Dense(chol) => {
                let rhs = DMatrix::from_fn(b.len(), 3, |i, c| b[i][c]);
                let x = chol.solve(&rhs);
                (0..b.len()).map(|i| [x[(i, 0)], x[(i, 1)], x[(i, 2)]]).collect()
            }
            Solver::ConjugateGradient => self.conjugate_gradient(b),
        }
    }

    /// Jacobi-preconditioned CG, one column at a time.
    fn conjugate_gradient(&self, b: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let n = b.len();
        let diag: Vec<f64> = self.laplacian.neighbors.iter().map(|nb| 1.0 + self.lambda * nb.len() as f64).collect();
        let mut out = vec![[0.0; 3]; n];
        for c in 0..3 {
            let rhs: Vec<f64> = b.iter().map(|v| v[c]).collect();
            let norm_b = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm_b == 0.0 {
                continue;
            }
            let op = |x: &[f64]| -> Vec<f64> {
                let cols: Vec<[f64; 3]> = x.iter().map(|&v| [v, 0.0, 0.0]).collect();
                self.apply(&cols).into_iter().map(|v| v[0]).collect()
            };
            let mut x: Vec<f64> = rhs.iter().zip(&diag).map(|(r, d)| r / d).collect();
            let ax = op(&x);
            let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(a, b)| a - b).collect();
            let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
            let mut p = z.clone();
            let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            for _ in 0..10 * n.max(10) {
                if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= CG_TOLERANCE * norm_b {
                    break;
                }
                let ap = op(&p);
                let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
                for i in 0..n {
                    x[i] += alpha * p[i];
                    r[i] -= alpha * ap[i];
                }
                z = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
                let next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
                let beta = next / rz;
                rz = next;
                for i in 0..n {
                    p[i] = z[i] + beta * p[i];
                }
            }
            for i in 0..n {
                out[i][c] = x[i];
            }
        }
        out
    }

    /// Gradient with respect to `u = (I + lambda L) x`.
    pub fn precondition(&self, raw: &VertexGrad) -> VertexGrad {
        VertexGrad {
            positions: self.solve(&raw.positions),
            attributes: raw.attributes.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Geometric decay from `initial` to `last` over `steps`.
    Exponential { initial: f64, last: f64, steps: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Exponential { initial, last, steps } => {
                let t = (step as f64 / steps.max(1) as f64).min(1.0);
                initial * (last / initial).powf(t)
            }
        }
    }
}

/// Adam moments, step count and learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(num_params: usize, schedule: LrSchedule) -> Self {
        OptimState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update at the scheduled learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let lr = self.schedule.at(self.step);
        adam_step(self, params, grads, lr)
    }
}

pub fn adam_step(state: &mut OptimState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape(
            format!("{} parameters", state.m.len()),
            format!("{} parameters and {} gradients", params.len(), grads.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// One camera and the image it should see.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub target: ImageF,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub schedule: LrSchedule,
    pub lambda: f64,
    /// Zero disables the back-face term.
    pub backface_weight: f64,
    /// Zero disables the regularizer.
    pub laplacian_weight: f64,
    pub gradient: GradientOptions,
    /// Stop when the loss stays above `10x` its initial value this many steps.
    pub divergence_patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 300,
            schedule: LrSchedule::Constant(0.01),
            lambda: 16.0,
            backface_weight: BACKFACE_WEIGHT,
            laplacian_weight: 0.0,
            gradient: GradientOptions::default(),
            divergence_patience: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub photometric: f64,
    pub backface: f64,
    pub regularization: f64,
    pub lr: f64,
    pub edges: EdgeStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<StepRecord>,
    pub diverged: bool,
}

/// Loss and raw position gradient of `scene` over all views.
pub fn evaluate(scene: &Scene, views: &[View], cfg: &FitConfig) -> Result<(StepRecord, VertexGrad, Vec<Frame>)> {
    let mut rec = StepRecord::default();
    let mut grad = VertexGrad::zeros(scene.mesh.num_vertices());
    let mut frames = Vec::with_capacity(views.len());
    for view in views {
        let frame = render(scene, &view.camera)?;
        let (loss, dl) = l2_loss(&frame.image, &view.target)?;
        let (g, stats) = backward(scene, &view.camera, &frame, &dl, &cfg.gradient)?;
        rec.photometric += loss;
        rec.edges.add(&stats);
        grad.add_assign(&VertexGrad {
            positions: g.positions,
            attributes: None,
        });
        if cfg.backface_weight > 0.0 {
            let mask = backface_mask(&frame);
            let (loss, dl) = backface_loss_weighted(&mask, cfg.backface_weight);
            if loss > 0.0 {
                let edges = cfg.gradient.edges.clone().unwrap_or_else(EdgeGradConfig::default);
                let (g, _) = backward_mask(&view.camera, &frame, &mask, &dl, &edges, cfg.gradient.accumulation)?;
                grad.add_assign(&g);
            }
            rec.backface += loss;
        }
        frames.push(frame);
    }
    rec.loss = rec.photometric + rec.backface;
    Ok((rec, grad, frames))
}

/// Runs Adam on the smoothed positions of `scene`. `on_step` sees every
/// evaluated state (before its update) and returns `false` to stop early.
pub fn fit(
    scene: &mut Scene,
    views: &[View],
    cfg: &FitConfig,
    mut on_step: impl FnMut(&StepRecord, &Scene, &[Frame]) -> bool,
) -> Result<FitOutcome> {
    let precond = LaplacianPreconditioner::new(&scene.mesh, cfg.lambda)?;
    let n = scene.mesh.num_vertices();
    let mut u: Vec<f64> = precond.apply(&scene.mesh.positions).into_iter().flatten().collect();
    let mut state = OptimState::new(3 * n, cfg.schedule);
    let mut outcome = FitOutcome::default();
    let mut initial = None;
    let mut above = 0;
    for step in 0..cfg.steps {
        let (mut rec, mut grad, frames) = evaluate(scene, views, cfg)?;
        if cfg.laplacian_weight > 0.0 {
            let (loss, g) = precond.laplacian().regularization(&scene.mesh.positions, cfg.laplacian_weight);
            rec.regularization = loss;
            rec.loss += loss;
            grad.add_assign(&VertexGrad {
                positions: g,
                attributes: None,
            });
        }
        rec.step = step;
        rec.lr = cfg.schedule.at(step);
        let keep_going = on_step(&rec, scene, &frames);
        let init = *initial.get_or_insert(rec.loss);
        above = if rec.loss > 10.0 * init { above + 1 } else { 0 };
        let finite = rec.loss.is_finite() && grad.is_finite();
        outcome.history.push(rec);
        if !finite || (cfg.divergence_patience > 0 && above >= cfg.divergence_patience) {
            outcome.diverged = true;
            break;
        }
        if !keep_going {
            break;
        }
        let gu = precond.precondition(&grad);
        state.step(&mut u, &gu.flat())?;
        let uu: Vec<[f64; 3]> = u.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        scene.mesh.positions = precond.solve(&uu);
    }
    Ok(outcome)
}

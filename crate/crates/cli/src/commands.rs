//! The `render`, `grad`, `fd-check` and `optimize` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use edgegrad::edgegrad::{edge_stats, EdgeGradConfig, EdgeStats};
use edgegrad::fd::{fd_backward_gradient, fd_forward_gradient, relative_l2_error, FDConfig, LossSpec, Perturbation};
use edgegrad::optim::{fit, mask_iou, psnr, FitConfig, LrSchedule, View};
use edgegrad::pipeline::{backface_mask, backward, forward_gradient, render, Frame, GradientOptions, Scene};
use edgegrad::scene::{write_image, write_obj, Camera, ImageF, ImageFormat};
use edgegrad::smooth::Accumulation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{load_experiment, load_view_scene, LoadedScene};
use crate::{Classify, CliResult};

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub stats: bool,
}

impl Common {
    /// `--threads 1` selects the sequential reference accumulation.
    pub fn accumulation(&self) -> Accumulation {
        match self.threads {
            Some(1) => Accumulation::Sequential,
            _ => Accumulation::Parallel,
        }
    }

    fn ensure_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create output directory {}", self.out.display()))
            .runtime()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display())).runtime()
}

fn save(img: &ImageF, path: &Path, format: ImageFormat) -> CliResult<()> {
    write_image(img, path, format).with_context(|| format!("cannot write {}", path.display())).runtime()
}

fn stats_line(s: &EdgeStats) -> String {
    format!(
        "pairs {} | no-edge {} adjacent {} overhang {} (border {}) intersection {} near-parallel {}",
        s.total(),
        s.no_edge,
        s.adjacent,
        s.overhang,
        s.border,
        s.intersection,
        s.near_parallel
    )
}

fn cameras_at(scene: &LoadedScene, resolution: Option<usize>) -> Vec<Camera> {
    match resolution {
        Some(r) => scene.at_resolution(r),
        None => scene.cameras.clone(),
    }
}

fn render_frame(scene: &Scene, camera: &Camera) -> CliResult<Frame> {
    render(scene, camera).runtime()
}

#[derive(Clone, Debug, Default)]
pub struct RenderArgs {
    pub resolution: Option<usize>,
    pub dump_index: bool,
    pub dump_depth: bool,
    pub dump_bary: bool,
    pub dump_backface: bool,
}

/// Color PNG per camera plus optional PFM buffer dumps.
pub fn cmd_render(config: &Path, common: &Common, args: &RenderArgs, log: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let scene = load_view_scene(config).config()?;
    common.ensure_out()?;
    let mut written = Vec::new();
    for (i, cam) in cameras_at(&scene, args.resolution).iter().enumerate() {
        let frame = render_frame(&scene.scene, cam)?;
        let stem = format!("{}_v{i}", scene.name);
        let mut emit = |img: &ImageF, suffix: &str, format| -> CliResult<()> {
            let p = common.path(&format!("{stem}{suffix}"));
            save(img, &p, format)?;
            written.push(p);
            Ok(())
        };
        emit(&frame.image, ".png", ImageFormat::Png8)?;
        let b = &frame.buffers;
        let (w, h) = (b.width, b.height);
        if args.dump_index {
            let data = b.index.iter().map(|&v| v as f32).collect();
            emit(&ImageF::from_vec(w, h, 1, data).runtime()?, "_index.pfm", ImageFormat::Pfm)?;
        }
        if args.dump_depth {
            let data = b.depth.iter().map(|&d| if d.is_finite() { d } else { 1.0 }).collect();
            emit(&ImageF::from_vec(w, h, 1, data).runtime()?, "_depth.pfm", ImageFormat::Pfm)?;
        }
        if args.dump_bary {
            let data = b
                .bary
                .iter()
                .zip(&b.index)
                .flat_map(|(c, &id)| if id == 0 { [0.0; 3] } else { [c[0], c[1], 1.0 - c[0] - c[1]] })
                .collect();
            emit(&ImageF::from_vec(w, h, 3, data).runtime()?, "_bary.pfm", ImageFormat::Pfm)?;
        }
        if args.dump_backface {
            emit(&backface_mask(&frame), "_backface.pfm", ImageFormat::Pfm)?;
        }
        let _ = writeln!(log, "view {i}: {}x{} covered {} pixels", w, h, b.covered_pixels());
        if common.stats {
            let s = edge_stats(&frame.buffers, &frame.geo, &EdgeGradConfig::default());
            let _ = writeln!(log, "view {i}: {}", stats_line(&s));
        }
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L2,
    Mean,
}

impl LossKind {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "mean" => Ok(LossKind::Mean),
            other => bail!("unknown loss `{other}` (expected `l2` or `mean`)"),
        }
    }
}

fn loss_for(kind: Option<LossKind>, scene: &LoadedScene, camera: &Camera) -> CliResult<LossSpec> {
    let kind = kind.unwrap_or(if scene.target.is_some() { LossKind::L2 } else { LossKind::Mean });
    match kind {
        LossKind::Mean => Ok(LossSpec::MeanIntensity),
        LossKind::L2 => {
            let t = scene.target.as_ref().ok_or_else(|| anyhow!("the l2 loss needs a `target` in the scene config")).config()?;
            Ok(LossSpec::L2 {
                target: render_frame(&t.scene, camera)?.image,
            })
        }
    }
}

/// `V:AXIS` (V a vertex index or `all`, AXIS one of x/y/z) or `random`.
pub fn parse_param(s: &str, num_vertices: usize, seed: u64) -> anyhow::Result<Perturbation> {
    if s == "random" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d: [f64; 3] = [0.0; 3].map(|_: f64| rng.gen_range(-1.0..1.0));
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        return Ok(Perturbation::all(num_vertices, d));
    }
    let (v, axis) = s.split_once(':').ok_or_else(|| anyhow!("unknown parameter `{s}` (expected V:AXIS or random)"))?;
    let direction = match axis {
        "x" => [1.0, 0.0, 0.0],
        "y" => [0.0, 1.0, 0.0],
        "z" => [0.0, 0.0, 1.0],
        _ => bail!("unknown axis `{axis}` in parameter `{s}`"),
    };
    let vertices = if v == "all" {
        (0..num_vertices as u32).collect()
    } else {
        let i: u32 = v.parse().map_err(|_| anyhow!("bad vertex `{v}` in parameter `{s}`"))?;
        if i as usize >= num_vertices {
            bail!("vertex {i} out of range (mesh has {num_vertices})");
        }
        vec![i]
    };
    Ok(Perturbation { vertices, direction })
}

fn gradient_options(no_edges: bool, no_intersections: bool, accumulation: Accumulation) -> GradientOptions {
    GradientOptions {
        edges: (!no_edges).then(|| EdgeGradConfig {
            include_intersections: !no_intersections,
            ..EdgeGradConfig::default()
        }),
        accumulation,
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradArgs {
    pub loss: Option<String>,
    pub param: Option<String>,
    pub resolution: Option<usize>,
    pub no_edges: bool,
    pub no_intersections: bool,
    /// Also write the oracle's forward gradient for `param`.
    pub fd: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub loss: Vec<f64>,
    pub stats: Vec<EdgeStats>,
    pub files: Vec<PathBuf>,
}

/// Vertex gradient table, forward-gradient images and pair statistics.
pub fn cmd_grad(config: &Path, common: &Common, args: &GradArgs, log: &mut dyn Write) -> CliResult<GradReport> {
    let scene = load_view_scene(config).config()?;
    let kind = args.loss.as_deref().map(LossKind::parse).transpose().config()?;
    let n = scene.scene.mesh.num_vertices();
    let seed = common.seed.unwrap_or(scene.seed);
    let param = parse_param(args.param.as_deref().unwrap_or("all:x"), n, seed).config()?;
    common.ensure_out()?;
    let opts = gradient_options(args.no_edges, args.no_intersections, common.accumulation());
    let mut report = GradReport {
        loss: Vec::new(),
        stats: Vec::new(),
        files: Vec::new(),
    };
    for (i, cam) in cameras_at(&scene, args.resolution).iter().enumerate() {
        let loss = loss_for(kind, &scene, cam)?;
        let frame = render_frame(&scene.scene, cam)?;
        let (g, stats) = backward(&scene.scene, cam, &frame, &loss.gradient(&frame.image), &opts).runtime()?;
        if !g.is_finite() {
            return Err(anyhow!("non-finite gradient in view {i}")).runtime();
        }
        let mut table = String::from("vertex,dx,dy,dz\n");
        for (v, p) in g.positions.iter().enumerate() {
            let _ = writeln!(table, "{v},{},{},{}", p[0], p[1], p[2]);
        }
        let stem = format!("{}_v{i}", scene.name);
        let p = common.path(&format!("{stem}_grad.csv"));
        write_file(&p, &table)?;
        report.files.push(p);

        let d = param.displacement(n);
        let total = forward_gradient(&scene.scene, cam, &frame, &d, opts.edges.as_ref()).runtime()?;
        let smooth = forward_gradient(&scene.scene, cam, &frame, &d, None).runtime()?;
        let (w, h, k) = (cam.width, cam.height, scene.scene.channels());
        let edge_part: Vec<f32> = total.iter().zip(&smooth).map(|(a, b)| (a - b) as f32).collect();
        let total: Vec<f32> = total.iter().map(|&v| v as f32).collect();
        for (suffix, data) in [("_fwd.pfm", total), ("_fwd_edges.pfm", edge_part)] {
            let p = common.path(&format!("{stem}{suffix}"));
            save(&ImageF::from_vec(w, h, k, data).runtime()?, &p, ImageFormat::Pfm)?;
            report.files.push(p);
        }
        if args.fd {
            let img = fd_forward_gradient(&scene.scene, cam, &param, &FDConfig::default()).runtime()?;
            let p = common.path(&format!("{stem}_fwd_fd.pfm"));
            save(&img, &p, ImageFormat::Pfm)?;
            report.files.push(p);
        }
        let value = loss.evaluate(&frame.image);
        let _ = writeln!(log, "view {i}: loss {value}");
        if common.stats {
            let _ = writeln!(log, "view {i}: {}", stats_line(&stats));
        }
        report.loss.push(value);
        report.stats.push(stats);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct FdCheckArgs {
    pub loss: Option<String>,
    /// Square resolutions to sweep; empty uses the config size.
    pub resolutions: Vec<usize>,
    pub fd: FDConfig,
    pub csv: bool,
}

impl Default for FdCheckArgs {
    fn default() -> Self {
        FdCheckArgs {
            loss: None,
            resolutions: Vec::new(),
            fd: FDConfig::default(),
            csv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdRow {
    pub scene: String,
    pub resolution: String,
    pub method: String,
    pub rel_error_pct: f64,
    pub runtime_ms: f64,
}

pub const FD_CSV_HEADER: &str = "scene,resolution,method,rel_error_pct,runtime_ms";

pub fn fd_csv(rows: &[FdRow]) -> String {
    let mut s = format!("{FD_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.3}", r.scene, r.resolution, r.method, r.rel_error_pct, r.runtime_ms);
    }
    s
}

/// Relative error of each gradient variant against the supersampled oracle.
pub fn cmd_fd_check(config: &Path, common: &Common, args: &FdCheckArgs, log: &mut dyn Write) -> CliResult<Vec<FdRow>> {
    let scene = load_view_scene(config).config()?;
    let kind = args.loss.as_deref().map(LossKind::parse).transpose().config()?;
    args.fd.validate().config()?;
    let sweep: Vec<Option<usize>> = if args.resolutions.is_empty() {
        vec![None]
    } else {
        args.resolutions.iter().map(|&r| Some(r)).collect()
    };
    let multi = scene.cameras.len() > 1;
    let methods = [
        ("edgegrad", gradient_options(false, false, common.accumulation())),
        ("edgegrad-no-intersect", gradient_options(false, true, common.accumulation())),
        ("continuous-only", gradient_options(true, false, common.accumulation())),
    ];
    let mut rows = Vec::new();
    for res in sweep {
        for (i, cam) in cameras_at(&scene, res).iter().enumerate() {
            let label = if multi { format!("{}#{i}", scene.name) } else { scene.name.clone() };
            let resolution = format!("{}x{}", cam.width, cam.height);
            let loss = loss_for(kind, &scene, cam)?;
            let t = Instant::now();
            let reference = fd_backward_gradient(&scene.scene, cam, &loss, &args.fd, None).runtime()?.flat();
            let oracle_ms = t.elapsed().as_secs_f64() * 1e3;
            rows.push(FdRow {
                scene: label.clone(),
                resolution: resolution.clone(),
                method: "fd-oracle".into(),
                rel_error_pct: 0.0,
                runtime_ms: oracle_ms,
            });
            for (name, opts) in &methods {
                let t = Instant::now();
                let frame = render_frame(&scene.scene, cam)?;
                let (g, _) = backward(&scene.scene, cam, &frame, &loss.gradient(&frame.image), opts).runtime()?;
                let ms = t.elapsed().as_secs_f64() * 1e3;
                rows.push(FdRow {
                    scene: label.clone(),
                    resolution: resolution.clone(),
                    method: (*name).into(),
                    rel_error_pct: 100.0 * relative_l2_error(&g.flat(), &reference),
                    runtime_ms: ms,
                });
            }
        }
    }
    for r in &rows {
        let _ = writeln!(
            log,
            "{:<16} {:>9} {:<22} {:>9.3}% {:>10.1} ms",
            r.scene, r.resolution, r.method, r.rel_error_pct, r.runtime_ms
        );
    }
    if args.csv {
        common.ensure_out()?;
        write_file(&common.path("fd_check.csv"), &fd_csv(&rows))?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OptimizeMetrics {
    pub steps_run: usize,
    pub diverged: bool,
    pub initial_iou: f64,
    pub final_iou: f64,
    pub best_iou: f64,
    /// First evaluated step whose mean IoU passed `stop_iou`, if any.
    pub reached_at: Option<usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_psnr: f64,
}

fn mean_metrics(frames: &[Frame], targets: &[Frame]) -> CliResult<(f64, f64)> {
    let mut iou = 0.0;
    let mut p = 0.0;
    for (f, t) in frames.iter().zip(targets) {
        iou += mask_iou(&f.buffers.mask(), &t.buffers.mask()).runtime()?;
        p += psnr(&f.image, &t.image).runtime()?;
    }
    let n = frames.len().max(1) as f64;
    Ok((iou / n, p / n))
}

/// Multi-view mesh fit. Writes `loss.csv`, snapshots, the final mesh,
/// final renders and `metrics.json`.
pub fn cmd_optimize(config: &Path, common: &Common, log: &mut dyn Write) -> CliResult<OptimizeMetrics> {
    let exp = load_experiment(config).config()?;
    let cfg = &exp.config;
    common.ensure_out()?;
    let mut scene = exp.scene.scene.clone();
    if cfg.init_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(exp.scene.seed));
        for p in &mut scene.mesh.positions {
            for v in p.iter_mut() {
                *v += rng.gen_range(-cfg.init_jitter..cfg.init_jitter);
            }
        }
    }
    let cameras = &exp.scene.cameras;
    let targets: Vec<Frame> = cameras.iter().map(|c| render_frame(&exp.target.scene, c)).collect::<CliResult<_>>()?;
    let views: Vec<View> = cameras
        .iter()
        .zip(&targets)
        .map(|(c, t)| View {
            camera: c.clone(),
            target: t.image.clone(),
        })
        .collect();
    let schedule = match cfg.lr_final {
        Some(last) => LrSchedule::Exponential {
            initial: cfg.lr,
            last,
            steps: cfg.steps,
        },
        None => LrSchedule::Constant(cfg.lr),
    };
    let fit_cfg = FitConfig {
        steps: cfg.steps,
        schedule,
        lambda: cfg.lambda,
        backface_weight: cfg.backface_weight,
        laplacian_weight: cfg.laplacian_weight,
        gradient: gradient_options(!cfg.edges, !cfg.include_intersections, common.accumulation()),
        divergence_patience: 50,
    };
    let snapshots = common.path("snapshots");
    if cfg.snapshot_every > 0 {
        fs::create_dir_all(&snapshots).with_context(|| format!("cannot create {}", snapshots.display())).runtime()?;
    }
    let mut csv = String::from("step,loss,photometric,backface,regularization,lr,iou,psnr\n");
    let mut metrics = OptimizeMetrics::default();
    let mut failure: Option<crate::CliError> = None;
    let outcome = fit(&mut scene, &views, &fit_cfg, |rec, s, frames| {
        let (iou, p) = match mean_metrics(frames, &targets) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                return false;
            }
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            rec.step, rec.loss, rec.photometric, rec.backface, rec.regularization, rec.lr, iou, p
        );
        if rec.step == 0 {
            metrics.initial_iou = iou;
            metrics.initial_loss = rec.loss;
        }
        metrics.best_iou = metrics.best_iou.max(iou);
        if cfg.snapshot_every > 0 && rec.step % cfg.snapshot_every == 0 {
            let p = snapshots.join(format!("step_{:05}.obj", rec.step));
            if let Err(e) = write_obj(&s.mesh, &p).with_context(|| format!("cannot write {}", p.display())) {
                failure = Some(crate::CliError {
                    kind: crate::FailureKind::Runtime,
                    error: e,
                });
                return false;
            }
        }
        match cfg.stop_iou {
            Some(goal) if iou >= goal => {
                metrics.reached_at.get_or_insert(rec.step);
                false
            }
            _ => true,
        }
    })
    .runtime()?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_file(&common.path("loss.csv"), &csv)?;
    let p = common.path("final.obj");
    write_obj(&scene.mesh, &p).with_context(|| format!("cannot write {}", p.display())).runtime()?;
    let finals: Vec<Frame> = cameras.iter().map(|c| render_frame(&scene, c)).collect::<CliResult<_>>()?;
    for (i, f) in finals.iter().enumerate() {
        save(&f.image, &common.path(&format!("final_v{i}.png")), ImageFormat::Png8)?;
    }
    let (iou, p) = mean_metrics(&finals, &targets)?;
    metrics.steps_run = outcome.history.len();
    metrics.diverged = outcome.diverged;
    metrics.final_iou = iou;
    metrics.best_iou = metrics.best_iou.max(iou);
    metrics.final_psnr = p;
    metrics.final_loss = outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let json = serde_json::to_string_pretty(&metrics).runtime()?;
    write_file(&common.path("metrics.json"), &(json + "\n"))?;
    let _ = writeln!(
        log,
        "steps {} loss {:.6} -> {:.6} iou {:.4} -> {:.4} psnr {:.2} dB",
        metrics.steps_run, metrics.initial_loss, metrics.final_loss, metrics.initial_iou, metrics.final_iou, metrics.final_psnr
    );
    if outcome.diverged {
        let last = outcome.history.last().map(|r| r.step).unwrap_or(0);
        return Err(anyhow!(
            "diverged at step {last}: loss stayed above 10x its initial value ({}) for 50 steps or became non-finite; try a smaller lr or a larger lambda",
            metrics.initial_loss
        ))
        .runtime();
    }
    Ok(metrics)
}

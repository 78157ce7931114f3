//! Acceptance run: one PASS/FAIL line per criterion. Criteria 4 to 10 drive
//! the `edgegrad` binary twice with `--threads 1`; the first run supplies the
//! numbers and the second checks byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use edgegrad::edgegrad::{edge_loss_gradient, intersection_dp_dr};
use edgegrad::fd::LossSpec;
use edgegrad::pipeline::{backward, render, GradientOptions};
use edgegrad_cli::config::load_view_scene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SILHOUETTE_MAX_PCT: f64 = 15.0;
const CROSSING_MAX_PCT: f64 = 25.0;
const MIXED_MAX_PCT: f64 = 25.0;
const ABLATION_MIN_RATIO: f64 = 2.0;
const CONVERGENCE_ALLOWED_INCREASES: usize = 1;
const SMOOTH_MAX_PCT: f64 = 1.0;
const FIT_MIN_IOU: f64 = 0.99;
const FIT_MAX_STEPS: usize = 300;
const CONTINUOUS_MAX_GAIN: f64 = 0.05;
const CUBE_MIN_IOU: f64 = 0.95;
const CUBE_MAX_STEPS: usize = 2000;
const DP_DR_REL_TOL: f64 = 1e-3;
const DP_DR_MIN_DENOMINATOR: f64 = 0.05;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, elapsed: Duration, limit: Option<Duration>, o: Outcome, failures: &mut usize) {
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let pass = o.pass && in_time;
    if !pass {
        *failures += 1;
    }
    let limit = limit.map_or(String::new(), |l| format!(", limit {:.0} s", l.as_secs_f64()));
    println!(
        "criterion {n:>2} [{}] {name}: {} ({:.2} s{limit})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
}

/// Runs the binary with `--threads 1`; returns wall time.
fn run_bin(args: &[&str], config: &Path, out: &Path) -> Result<Duration, String> {
    let t = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_edgegrad"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?} on {}: {}", config.display(), String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(t.elapsed())
}

fn scene_configs() -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(fixture("")).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    for d in dirs.into_iter().filter(|d| d.is_dir()) {
        let mut files: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        for f in files {
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if name.ends_with(".json") && !name.starts_with("fit") {
                out.push(f);
            }
        }
    }
    out
}

fn forward_purity() -> Outcome {
    let mut frames = 0;
    for cfg in scene_configs() {
        let scene = match load_view_scene(&cfg) {
            Ok(s) => s,
            Err(e) => return Outcome { pass: false, detail: format!("{}: {e:#}", cfg.display()) },
        };
        for cam in &scene.cameras {
            let frame = render(&scene.scene, cam).unwrap();
            let before = frame.image.data.clone();
            let g = LossSpec::MeanIntensity.gradient(&frame.image);
            for opts in [GradientOptions::default(), GradientOptions { edges: None, ..Default::default() }] {
                backward(&scene.scene, cam, &frame, &g, &opts).unwrap();
                let again = render(&scene.scene, cam).unwrap();
                let same = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
                if !same(&frame.image.data, &before) || !same(&again.image.data, &before) {
                    return Outcome {
                        pass: false,
                        detail: format!("forward image changed on {}", cfg.display()),
                    };
                }
            }
            frames += 1;
        }
    }
    Outcome { pass: frames > 0, detail: format!("{frames} frames bit-identical with edge gradients on and off") }
}

fn edge_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=4);
        let mut v = || (0..k).map(|_| rng.gen_range(-4.0f32..4.0)).collect::<Vec<f32>>();
        let (ga, gb, ia, ib) = (v(), v(), v(), v());
        let mut direct = 0.0f64;
        for c in 0..k {
            direct += (ga[c] as f64 + gb[c] as f64) * (ia[c] as f64 - ib[c] as f64);
        }
        direct *= 0.5;
        if edge_loss_gradient(&ga, &gb, &ia, &ib).to_bits() != direct.to_bits() {
            mismatches += 1;
        }
    }
    let hand = edge_loss_gradient(&[1.0], &[1.0], &[1.0], &[0.0]);
    Outcome {
        pass: mismatches == 0 && hand == 1.0,
        detail: format!("{mismatches}/100 tuples differ from direct evaluation; unit example {hand}"),
    }
}

/// Crossing point of `n_f . q = 0` and `n_v . q = r` in (in-plane, depth).
fn crossing(n_f: [f64; 2], n_v: [f64; 2], r: f64) -> [f64; 2] {
    let det = n_f[0] * n_v[1] - n_f[1] * n_v[0];
    [(-n_f[1] * r) / det, (n_f[0] * r) / det]
}

fn dp_dr_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut tested, mut worst) = (0, 0.0f64);
    let delta = 1e-4;
    while tested < 1000 {
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let b = rng.gen_range(0.0..std::f64::consts::TAU);
        let (n_f, n_v) = ([a.cos(), a.sin()], [b.cos(), b.sin()]);
        if (n_f[0] * n_v[1] - n_f[1] * n_v[0]).abs() < DP_DR_MIN_DENOMINATOR {
            continue;
        }
        let r0 = rng.gen_range(-1.0..1.0);
        let fd = (crossing(n_f, n_v, r0 + delta)[0] - crossing(n_f, n_v, r0 - delta)[0]) / (2.0 * delta);
        let Ok(analytic) = intersection_dp_dr(n_f, n_v, 1e-4) else {
            return Outcome { pass: false, detail: format!("NearParallel on {n_f:?} {n_v:?}") };
        };
        let err = (fd - analytic).abs() / analytic.abs().max(1e-9);
        worst = worst.max(if analytic.abs() < 1e-9 { (fd - analytic).abs() } else { err });
        tested += 1;
    }
    Outcome {
        pass: worst <= DP_DR_REL_TOL,
        detail: format!("1000 pairs, worst relative error {worst:.2e} (tol {DP_DR_REL_TOL:e})"),
    }
}

/// `(scene, resolution, method) -> rel_error_pct` from an fd_check.csv.
fn read_fd_csv(path: &Path) -> Result<BTreeMap<(String, String, String), f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let v: f64 = f[3].parse().map_err(|_| format!("bad row {line}"))?;
        rows.insert((f[0].to_string(), f[1].to_string(), f[2].to_string()), v);
    }
    Ok(rows)
}

fn err_at(rows: &BTreeMap<(String, String, String), f64>, scene: &str, res: usize, method: &str) -> f64 {
    rows.get(&(scene.to_string(), format!("{res}x{res}"), method.to_string()))
        .copied()
        .unwrap_or(f64::NAN)
}

fn metrics(dir: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn num(m: &serde_json::Value, key: &str) -> f64 {
    m[key].as_f64().unwrap_or(f64::NAN)
}

/// Every file under `dir`, relative path to contents; fd_check.csv loses its
/// wall-clock column.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().is_some_and(|n| n == "fd_check.csv") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
                    .collect::<String>()
                    .into_bytes();
            }
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

struct Job {
    key: &'static str,
    args: Vec<&'static str>,
    config: &'static str,
}

fn jobs() -> Vec<Job> {
    let fd = |key, config, res| Job {
        key,
        args: vec!["fd-check", "--csv", "--resolutions", res],
        config,
    };
    vec![
        fd("silhouette", "tri/scene.json", "256"),
        fd("crossing", "x_intersect/scene.json", "256"),
        fd("mixed", "mixed/scene.json", "256"),
        fd("diagonal", "diagonal/scene.json", "32,64,128,256"),
        fd("smooth", "smooth/scene.json", "64,128"),
        Job { key: "fit", args: vec!["optimize"], config: "tri/fit.json" },
        Job { key: "fit_continuous", args: vec!["optimize"], config: "tri/fit_continuous.json" },
        Job { key: "cube", args: vec!["optimize"], config: "icosphere/fit_cube.json" },
        Job { key: "render", args: vec!["render", "--dump-index", "--dump-depth", "--dump-bary", "--dump-backface"], config: "mixed/scene.json" },
        Job { key: "grad", args: vec!["grad", "--param", "random"], config: "x_intersect/scene.json" },
    ]
}

fn main() -> ExitCode {
    let mut failures = 0;

    let t = Instant::now();
    let o = forward_purity();
    report(1, "forward purity", t.elapsed(), Some(Duration::from_secs(1)), o, &mut failures);

    let t = Instant::now();
    let o = edge_formula();
    report(2, "edge gradient formula", t.elapsed(), None, o, &mut failures);

    let t = Instant::now();
    let o = dp_dr_oracle();
    report(3, "intersection motion vs line-intersection FD", t.elapsed(), Some(Duration::from_secs(1)), o, &mut failures);

    let root = tempfile::tempdir().expect("temp dir");
    let runs = [root.path().join("a"), root.path().join("b")];
    let mut times: BTreeMap<&str, Duration> = BTreeMap::new();
    let mut errors: BTreeMap<&str, String> = BTreeMap::new();
    for (r, run) in runs.iter().enumerate() {
        for job in jobs() {
            match run_bin(&job.args, &fixture(job.config), &run.join(job.key)) {
                Ok(d) if r == 0 => {
                    times.insert(job.key, d);
                }
                Ok(_) => {}
                Err(e) => {
                    errors.entry(job.key).or_insert(e);
                }
            }
        }
    }
    let a = &runs[0];
    let time = |keys: &[&str]| keys.iter().map(|k| times.get(k).copied().unwrap_or_default()).sum::<Duration>();
    let failed = |keys: &[&str]| keys.iter().find_map(|k| errors.get(k).map(|e| Outcome { pass: false, detail: e.clone() }));
    let fd_rows = |key: &str| read_fd_csv(&a.join(key).join("fd_check.csv")).unwrap_or_default();

    let o = failed(&["silhouette", "crossing", "mixed"]).unwrap_or_else(|| {
        let s = err_at(&fd_rows("silhouette"), "tri", 256, "edgegrad");
        let x = err_at(&fd_rows("crossing"), "x_intersect", 256, "edgegrad");
        let m = err_at(&fd_rows("mixed"), "mixed", 256, "edgegrad");
        Outcome {
            pass: s < SILHOUETTE_MAX_PCT && x < CROSSING_MAX_PCT && m < MIXED_MAX_PCT,
            detail: format!(
                "256^2 silhouette {s:.2}% (< {SILHOUETTE_MAX_PCT}), crossing {x:.2}% (< {CROSSING_MAX_PCT}), mixed {m:.2}% (< {MIXED_MAX_PCT})"
            ),
        }
    });
    let t4 = time(&["silhouette", "crossing", "mixed"]);
    report(4, "backward accuracy vs supersampled FD", t4, Some(Duration::from_secs(120)), o, &mut failures);

    let o = failed(&["crossing"]).unwrap_or_else(|| {
        let rows = fd_rows("crossing");
        let on = err_at(&rows, "x_intersect", 256, "edgegrad");
        let off = err_at(&rows, "x_intersect", 256, "edgegrad-no-intersect");
        Outcome {
            pass: off >= ABLATION_MIN_RATIO * on,
            detail: format!("without intersections {off:.2}% vs with {on:.2}% (ratio {:.1}, need >= {ABLATION_MIN_RATIO})", off / on),
        }
    });
    report(5, "intersection ablation", time(&["crossing"]), Some(Duration::from_secs(120)), o, &mut failures);

    let o = failed(&["diagonal"]).unwrap_or_else(|| {
        let rows = fd_rows("diagonal");
        let errs: Vec<f64> = [32, 64, 128, 256].iter().map(|&r| err_at(&rows, "diagonal", r, "edgegrad")).collect();
        let increases = errs.windows(2).filter(|w| !(w[1] <= w[0])).count();
        Outcome {
            pass: errs.iter().all(|e| e.is_finite()) && increases <= CONVERGENCE_ALLOWED_INCREASES && errs[3] < errs[0],
            detail: format!(
                "errors over 32..256: {} ({increases} increases, allowed {CONVERGENCE_ALLOWED_INCREASES})",
                errs.iter().map(|e| format!("{e:.2}%")).collect::<Vec<_>>().join(", ")
            ),
        }
    });
    report(6, "resolution convergence", time(&["diagonal"]), Some(Duration::from_secs(120)), o, &mut failures);

    let o = failed(&["smooth"]).unwrap_or_else(|| {
        let rows = fd_rows("smooth");
        let errs: Vec<f64> = [64, 128].iter().map(|&r| err_at(&rows, "smooth", r, "edgegrad")).collect();
        Outcome {
            pass: errs.iter().all(|&e| e < SMOOTH_MAX_PCT),
            detail: format!("64^2 {:.4}%, 128^2 {:.4}% (< {SMOOTH_MAX_PCT})", errs[0], errs[1]),
        }
    });
    report(7, "smooth-path exactness", time(&["smooth"]), Some(Duration::from_secs(30)), o, &mut failures);

    let o = failed(&["fit", "fit_continuous"]).unwrap_or_else(|| match (metrics(&a.join("fit")), metrics(&a.join("fit_continuous"))) {
        (Ok(f), Ok(c)) => {
            let (best, steps) = (num(&f, "best_iou"), f["steps_run"].as_u64().unwrap_or(u64::MAX) as usize);
            let (c0, cb) = (num(&c, "initial_iou"), num(&c, "best_iou"));
            Outcome {
                pass: best > FIT_MIN_IOU && steps <= FIT_MAX_STEPS && cb <= c0 + CONTINUOUS_MAX_GAIN,
                detail: format!(
                    "edge fit IoU {:.4} -> best {best:.4} (> {FIT_MIN_IOU}) in {} steps; continuous-only {c0:.4} -> best {cb:.4} (<= init + {CONTINUOUS_MAX_GAIN})",
                    num(&f, "initial_iou"),
                    steps
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome { pass: false, detail: e },
    });
    report(8, "triangle translation fit", time(&["fit", "fit_continuous"]), Some(Duration::from_secs(120)), o, &mut failures);

    let o = failed(&["cube"]).unwrap_or_else(|| match metrics(&a.join("cube")) {
        Ok(m) => {
            let steps = m["steps_run"].as_u64().unwrap_or(u64::MAX) as usize;
            let best = num(&m, "best_iou");
            Outcome {
                pass: best > CUBE_MIN_IOU && steps <= CUBE_MAX_STEPS,
                detail: format!(
                    "4 views at 128^2, lambda 16: IoU {:.4} -> best {best:.4}, final {:.4} (> {CUBE_MIN_IOU}) in {} steps",
                    num(&m, "initial_iou"),
                    num(&m, "final_iou"),
                    steps
                ),
            }
        }
        Err(e) => Outcome { pass: false, detail: e },
    });
    report(9, "sphere to cube multi-view fit", time(&["cube"]), Some(Duration::from_secs(600)), o, &mut failures);

    let t = Instant::now();
    let o = if errors.is_empty() {
        let (sa, sb) = (snapshot(&runs[0]), snapshot(&runs[1]));
        let differing: Vec<String> = sa
            .iter()
            .filter(|(p, bytes)| sb.get(*p) != Some(*bytes))
            .map(|(p, _)| p.display().to_string())
            .chain(sb.keys().filter(|p| !sa.contains_key(*p)).map(|p| p.display().to_string()))
            .collect();
        Outcome {
            pass: differing.is_empty() && !sa.is_empty(),
            detail: format!(
                "{} output files from {} single-threaded runs compared twice (fd_check.csv runtime_ms masked), {} differ{}",
                sa.len(),
                jobs().len(),
                differing.len(),
                if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
            ),
        }
    } else {
        Outcome { pass: false, detail: format!("runs failed: {}", errors.values().cloned().collect::<Vec<_>>().join("; ")) }
    };
    report(10, "single-threaded determinism", t.elapsed(), None, o, &mut failures);

    if failures == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 criteria failed");
        ExitCode::FAILURE
    }
}

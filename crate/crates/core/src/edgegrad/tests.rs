use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::raster::{interpolate, rasterize_geometry};
use crate::scene::{ClipVertices, VertexAttributes};

/// Clip coordinates landing exactly on `(x_px, y_px, depth)` with `w = 1`.
fn clip_at(screen: &[[f64; 3]], w: usize, h: usize) -> ClipVertices {
    let clip = screen
        .iter()
        .map(|s| [2.0 * s[0] / w as f64 - 1.0, 1.0 - 2.0 * s[1] / h as f64, s[2], 1.0])
        .collect();
    ClipVertices::from_clip(clip, w, h)
}

struct Frame {
    geo: ScreenGeometry,
    buffers: RasterBuffers,
    image: ImageF,
}

fn frame(screen: &[[f64; 3]], tris: &[[u32; 3]], colors: &[f32], w: usize, h: usize) -> Frame {
    let clip = clip_at(screen, w, h);
    let geo = ScreenGeometry::new(&clip, tris);
    let buffers = rasterize_geometry(&geo);
    let attrs = VertexAttributes::new(colors.len() / screen.len(), colors.to_vec());
    let image = interpolate(&buffers, tris, &attrs).unwrap();
    Frame { geo, buffers, image }
}

/// Two full-frame triangles whose depths cross at `x = 8`: the first is in
/// front for `x < 8`.
fn x_crossing() -> Frame {
    let corners = [[-4.0, -4.0], [36.0, -4.0], [-4.0, 36.0]];
    let mut screen = Vec::new();
    for slope in [0.02, -0.02] {
        for c in corners {
            screen.push([c[0], c[1], 0.5 + slope * (c[0] - 8.0)]);
        }
    }
    frame(&screen, &[[0, 1, 2], [3, 4, 5]], &[1.0, 1.0, 1.0, 0.2, 0.2, 0.2], 16, 16)
}

#[test]
fn loss_gradient_examples() {
    assert_eq!(edge_loss_gradient(&[0.3, -2.0], &[1.5, 4.0], &[0.5, 0.25], &[0.5, 0.25]), 0.0);
    assert_eq!(edge_loss_gradient(&[0.0], &[0.0], &[1.0], &[0.0]), 0.0);
    assert_eq!(edge_loss_gradient(&[1.0], &[1.0], &[1.0], &[0.0]), 1.0);
    assert_eq!(edge_loss_gradient(&[1.0], &[1.0], &[0.0], &[1.0]), -1.0);
}

#[test]
fn intersection_formula_examples() {
    assert_eq!(intersection_dp_dr([0.0, 1.0], [1.0, 0.0], 1e-4), Ok(1.0));
    let n = [0.6, 0.8];
    assert!(intersection_dp_dr(n, n, 1e-4).is_err());
}

/// Moves the varying line along its normal and re-intersects.
fn line_oracle(n_f: [f64; 2], n_v: [f64; 2], c_f: f64, c_v: f64, delta: f64) -> f64 {
    let cross = |c_v: f64| {
        let det = n_f[0] * n_v[1] - n_f[1] * n_v[0];
        (c_f * n_v[1] - n_f[1] * c_v) / det
    };
    (cross(c_v + delta) - cross(c_v - delta)) / (2.0 * delta)
}

#[test]
fn intersection_formula_matches_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 1000 {
        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let b: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (n_f, n_v) = ([a.cos(), a.sin()], [b.cos(), b.sin()]);
        let Ok(dpdr) = intersection_dp_dr(n_f, n_v, 1e-2) else { continue };
        let oracle = line_oracle(n_f, n_v, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1e-4);
        assert!((dpdr - oracle).abs() <= 1e-3 * oracle.abs().max(1e-12), "{dpdr} vs {oracle}");
        checked += 1;
    }
}

#[test]
fn classification_cases() {
    // Triangle 0 is a lower-left half, triangle 1 the matching upper-right half
    // of a square, triangle 2 floats in front of both.
    let f = frame(
        &[
            [2.0, 2.0, 0.5],
            [2.0, 14.0, 0.5],
            [14.0, 14.0, 0.5],
            [14.0, 2.0, 0.5],
            [9.0, 9.0, 0.1],
            [13.0, 9.0, 0.1],
            [9.0, 13.0, 0.1],
        ],
        &[[0, 1, 2], [0, 2, 3], [4, 5, 6]],
        &[0.5; 7],
        16,
        16,
    );
    let c = |a: [usize; 2], b: [usize; 2]| classify_edge(a, b, &f.buffers, &f.geo);
    assert_eq!(c([3, 10], [4, 10]).kind, EdgeKind::NoEdge);
    assert_eq!(c([1, 8], [2, 8]).kind, EdgeKind::Overhang { top: Side::B });
    assert_eq!(c([2, 8], [1, 8]).kind, EdgeKind::Overhang { top: Side::A });
    // Across the shared diagonal.
    let r = c([5, 6], [6, 6]);
    assert_eq!((r.id_a, r.id_b), (Some(0), Some(1)));
    assert_eq!(r.kind, EdgeKind::Adjacent);
    // Into the occluder from the square below it.
    let r = c([9, 8], [9, 9]);
    assert_eq!((r.id_a, r.id_b), (Some(1), Some(2)));
    assert_eq!(r.kind, EdgeKind::Overhang { top: Side::B });
    assert_eq!(r.orientation, PairOrientation::Vertical);

    let x = x_crossing();
    let r = classify_edge([7, 5], [8, 5], &x.buffers, &x.geo);
    assert_eq!((r.id_a, r.id_b), (Some(0), Some(1)));
    assert_eq!(r.kind, EdgeKind::Intersection);
}

#[test]
fn intersection_route_splits_motion_between_planes() {
    let x = x_crossing();
    let g = ImageF::zeros(16, 16, 1);
    let pg = pair_gradient([7, 5], [8, 5], &g, &x.image, &x.buffers, &x.geo, &EdgeGradConfig::default());
    // Crossing at x* where 0.02 (x - 8) + dz_a = -0.02 (x - 8).
    let r = pg.route;
    assert!((r.coeff_a[0] - 0.5).abs() < 1e-12 && (r.coeff_b[0] - 0.5).abs() < 1e-12);
    assert!((r.coeff_a[2] + 25.0).abs() < 1e-9 && (r.coeff_b[2] - 25.0).abs() < 1e-9);
    assert_eq!(r.coeff_a[1], 0.0);

    let off = EdgeGradConfig {
        include_intersections: false,
        ..EdgeGradConfig::default()
    };
    let pg = pair_gradient([7, 5], [8, 5], &g, &x.image, &x.buffers, &x.geo, &off);
    assert_eq!(pg.record.kind, EdgeKind::Intersection);
    assert_eq!((pg.route.coeff_a, pg.route.coeff_b), ([0.0; 3], [0.0; 3]));
    let (_, stats) = scatter_edge_gradients(&g, &x.image, &x.buffers, &x.geo, &EdgeGradConfig::default()).unwrap();
    assert_eq!(stats.intersection, 16);
}

#[test]
fn uniform_frame_has_no_boundary_gradient() {
    let f = frame(&[[-20.0, -20.0, 0.3], [60.0, -20.0, 0.3], [-20.0, 60.0, 0.3]], &[[0, 1, 2]], &[0.7; 3], 12, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = ImageF::from_vec(12, 10, 1, (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (frag, stats) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &EdgeGradConfig::default()).unwrap();
    assert!(frag.is_zero());
    assert_eq!(stats.total(), stats.no_edge);
    assert_eq!(stats.total(), 11 * 10 + 12 * 9 + 2 * 10 + 2 * 12);
}

#[test]
fn shared_edge_of_flat_quad_is_silent() {
    let f = frame(
        &[[-3.0, -3.0, 0.4], [20.0, -3.0, 0.4], [20.0, 20.0, 0.4], [-3.0, 20.0, 0.4]],
        &[[0, 1, 2], [0, 2, 3]],
        &[0.6; 4],
        16,
        16,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = ImageF::from_vec(16, 16, 1, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (frag, stats) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &EdgeGradConfig::default()).unwrap();
    assert!(stats.adjacent > 0);
    assert!(frag.is_zero());
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> Frame {
    let mut screen = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..3 * n {
        screen.push([
            rng.gen_range(-2.0..w as f64 + 2.0),
            rng.gen_range(-2.0..h as f64 + 2.0),
            rng.gen_range(0.1..0.9),
        ]);
        colors.extend([rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32)]);
    }
    let tris: Vec<[u32; 3]> = (0..n as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    frame(&screen, &tris, &colors, w, h)
}

#[test]
fn pairs_are_symmetric_and_covered_fragments_get_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = EdgeGradConfig::default();
    for _ in 0..5 {
        let (w, h) = (20, 14);
        let f = random_scene(&mut rng, 8, w, h);
        let g = ImageF::from_vec(w, h, 2, (0..w * h * 2).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (frag, _) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &cfg).unwrap();
        // Gather of every in-image pair, enumerated in reverse order.
        let mut gathered = vec![[0.0; 3]; w * h];
        let mut seen = std::collections::HashMap::new();
        for y in 0..h {
            for x in 0..w {
                for (dx, dy) in [(1usize, 0usize), (0, 1)] {
                    let (bx, by) = (x + dx, y + dy);
                    if bx >= w || by >= h {
                        continue;
                    }
                    let fwd = pair_gradient([x, y], [bx, by], &g, &f.image, &f.buffers, &f.geo, &cfg);
                    let rev = pair_gradient([bx, by], [x, y], &g, &f.image, &f.buffers, &f.geo, &cfg);
                    let relabeled = match rev.record.kind {
                        EdgeKind::Overhang { top } => EdgeKind::Overhang { top: top.swap() },
                        k => k,
                    };
                    assert_eq!(fwd.record.kind, relabeled);
                    // Bit-equal up to the sign of zero.
                    assert_eq!(fwd.to_a, rev.to_b);
                    assert_eq!(fwd.to_b, rev.to_a);
                    match fwd.record.kind {
                        EdgeKind::Overhang { top: Side::A } => assert_eq!(fwd.to_b, [0.0; 3]),
                        EdgeKind::Overhang { top: Side::B } => assert_eq!(fwd.to_a, [0.0; 3]),
                        EdgeKind::NoEdge | EdgeKind::Adjacent => assert_eq!((fwd.to_a, fwd.to_b), ([0.0; 3], [0.0; 3])),
                        EdgeKind::Intersection => {}
                    }
                    *seen.entry(format!("{:?}", fwd.record.kind)).or_insert(0) += 1;
                    for c in 0..3 {
                        gathered[y * w + x][c] += fwd.to_a[c];
                        gathered[by * w + bx][c] += fwd.to_b[c];
                    }
                }
            }
        }
        // Interior pixels only: border pixels also see the virtual neighbour.
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let (a, b) = (gathered[y * w + x], frag.position[y * w + x]);
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() <= 1e-12 * (1.0 + a[c].abs()), "pixel {x},{y}: {a:?} vs {b:?}");
                }
            }
        }
        assert!(seen.len() >= 3, "{seen:?}");
    }
}

#[test]
fn bright_triangle_is_pushed_outward_by_brighten_loss() {
    let (w, h) = (24, 24);
    let f = frame(&[[4.0, 5.0, 0.5], [20.0, 6.0, 0.5], [11.0, 19.0, 0.5]], &[[0, 1, 2]], &[1.0; 3], w, h);
    let g = ImageF::from_vec(w, h, 1, vec![-1.0; w * h]).unwrap();
    let (frag, stats) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &EdgeGradConfig::default()).unwrap();
    assert!(stats.overhang > 0);
    let centroid = [35.0 / 3.0, 10.0];
    let mut moved = 0;
    for (p, d) in frag.position.iter().enumerate() {
        if *d == [0.0; 3] {
            continue;
        }
        // Descent moves the fragment along -d, which must point away from the center.
        let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        assert!(-d[0] * (x - centroid[0]) - d[1] * (y - centroid[1]) > 0.0, "pixel {p}: {d:?}");
        assert_eq!(d[2], 0.0);
        moved += 1;
    }
    assert!(moved > 20);
}

#[test]
fn forward_mode_is_the_transpose_of_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = EdgeGradConfig::default();
    let (w, h) = (18, 16);
    for scene in 0..4 {
        let f = if scene == 0 { x_crossing() } else { random_scene(&mut rng, 6, w, h) };
        let (w, h) = (f.buffers.width, f.buffers.height);
        let k = f.image.channels;
        let g = ImageF::from_vec(w, h, k, (0..w * h * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tangent = FragmentTangent {
            width: w,
            height: h,
            position: (0..w * h).map(|_| [0; 3].map(|_: i32| rng.gen_range(-1.0..1.0))).collect(),
            persp: vec![[0.0; 3]; w * h],
        };
        let (frag, _) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &cfg).unwrap();
        let jvp = edge_jvp(&f.image, &f.buffers, &f.geo, &tangent, &cfg).unwrap();
        let lhs: f64 = jvp.iter().zip(&g.data).map(|(a, &b)| a * b as f64).sum();
        let rhs: f64 = frag
            .position
            .iter()
            .zip(&tangent.position)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum();
        assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn image_border_pairs() {
    // The triangle runs off the left edge; its right edge stays inside.
    let f = frame(&[[-10.0, 2.0, 0.5], [9.3, 2.0, 0.5], [-10.0, 14.0, 0.5]], &[[0, 1, 2]], &[1.0; 3], 16, 16);
    let g = ImageF::from_vec(16, 16, 1, vec![1.0; 256]).unwrap();
    let (_, with) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &EdgeGradConfig::default()).unwrap();
    assert_eq!(with.border, 0);
    // Touching the left edge without crossing it: border pixels become overhangs.
    let f = frame(&[[0.2, 2.0, 0.5], [9.3, 2.0, 0.5], [0.2, 14.0, 0.5]], &[[0, 1, 2]], &[1.0; 3], 16, 16);
    let (frag, with) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &EdgeGradConfig::default()).unwrap();
    assert!(with.border >= 10);
    // Moving right lets the black outside into the pixel and lowers the sum;
    // the outside pixel carries no loss gradient, leaving half the weight.
    let p = 8 * 16;
    assert_eq!(frag.position[p][0], -0.5);
    let cfg = EdgeGradConfig {
        include_image_border: false,
        ..EdgeGradConfig::default()
    };
    let (frag, without) = scatter_edge_gradients(&g, &f.image, &f.buffers, &f.geo, &cfg).unwrap();
    assert_eq!(without.border, 0);
    assert_eq!(frag.position[p][0], 0.0);
    assert!(with.total() > without.total());
}

#[test]
fn invalid_inputs_are_rejected() {
    let x = x_crossing();
    let bad = EdgeGradConfig {
        intersection_denominator_epsilon: 0.0,
        ..EdgeGradConfig::default()
    };
    let g = ImageF::zeros(16, 16, 1);
    assert!(matches!(
        scatter_edge_gradients(&g, &x.image, &x.buffers, &x.geo, &bad),
        Err(Error::InvalidConfig(_))
    ));
    let g = ImageF::zeros(16, 16, 3);
    assert!(matches!(
        scatter_edge_gradients(&g, &x.image, &x.buffers, &x.geo, &EdgeGradConfig::default()),
        Err(Error::ShapeMismatch { .. })
    ));
}

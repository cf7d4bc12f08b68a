use std::sync::Arc;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{eval_anchor, gen_wedge_phantom, PhantomResolution, PhantomSize, TetMesh};
use crate::xpbd::{ConstraintSet, MaterialParams, SimConfig};

fn triangles(tris: &[[Vec3; 3]]) -> (SurfaceMesh, ParticleState) {
    let positions: Vec<Vec3> = tris.iter().flatten().copied().collect();
    let faces: Vec<[usize; 3]> = (0..tris.len()).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
    let vertex_faces = (0..positions.len()).map(|v| vec![v / 3]).collect();
    let surface = SurfaceMesh {
        faces,
        vertices: (0..positions.len()).collect(),
        vertex_faces,
    };
    (surface, ParticleState::new(positions))
}

fn overhead(width: usize, height: usize) -> CameraModel {
    CameraModel::look_at(&CameraSpec {
        eye: Vec3::new(0.0, 0.0, 1.0),
        target: Vec3::zeros(),
        up: Vec3::y(),
        fov_y_deg: 30.0,
        width,
        height,
    })
    .unwrap()
}

fn slab() -> TetMesh {
    gen_wedge_phantom(180.0, PhantomSize::default(), PhantomResolution { along: 6, across: 6, depth: 2 }).unwrap()
}

fn oblique(width: usize, height: usize) -> CameraModel {
    CameraModel::look_at(&CameraSpec {
        eye: Vec3::new(0.031, -0.047, 0.063),
        target: Vec3::new(0.001, 0.002, 0.008),
        up: Vec3::z(),
        fov_y_deg: 45.0,
        width,
        height,
    })
    .unwrap()
}

#[test]
fn projection_inverts_pixel_rays() {
    let cam = oblique(64, 48);
    for (u, v) in [(0, 0), (10, 20), (63, 47)] {
        let ray = cam.pixel_ray(u, v);
        let (pu, pv) = cam.project(&(ray.origin + 0.1 * ray.direction)).unwrap();
        assert_abs_diff_eq!(pu, u as f64 + 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(pv, v as f64 + 0.5, epsilon = 1e-9);
    }
}

#[test]
fn facing_triangle_is_visible() {
    let (s, x) = triangles(&[[Vec3::new(-0.1, -0.1, 0.0), Vec3::new(0.1, -0.1, 0.0), Vec3::new(0.0, 0.1, 0.0)]]);
    let cam = overhead(32, 32);
    let vis = render_visibility(&cam, &s, &x, &MaskImage::full(32, 32));
    assert_eq!(vis.faces, vec![true]);
}

#[test]
fn occluded_triangle_is_hidden_and_reappears() {
    let small = [Vec3::new(-0.02, -0.02, 0.0), Vec3::new(0.02, -0.02, 0.0), Vec3::new(0.0, 0.02, 0.0)];
    let big = [Vec3::new(-0.5, -0.5, 0.1), Vec3::new(0.5, -0.5, 0.1), Vec3::new(0.0, 0.5, 0.1)];
    let cam = overhead(32, 32);
    let mask = MaskImage::full(32, 32);
    let (s, x) = triangles(&[small, big]);
    assert_eq!(render_visibility(&cam, &s, &x, &mask).faces, vec![false, true]);
    let (s, x) = triangles(&[small]);
    assert_eq!(render_visibility(&cam, &s, &x, &mask).faces, vec![true]);
}

#[test]
fn segmentation_filters_rays() {
    let (s, x) = triangles(&[[Vec3::new(-0.1, -0.1, 0.0), Vec3::new(0.1, -0.1, 0.0), Vec3::new(0.0, 0.1, 0.0)]]);
    let cam = overhead(16, 16);
    let empty = MaskImage {
        width: 16,
        height: 16,
        data: vec![0; 256],
    };
    assert_eq!(render_visibility(&cam, &s, &x, &empty).visible_count(), 0);
}

#[test]
fn empty_scene_and_full_frame_masks() {
    let cam = overhead(20, 10);
    let (s, x) = triangles(&[]);
    assert_eq!(synth_segmentation(&cam, &s, &x).count(), 0);
    let huge = [Vec3::new(-10.0, -10.0, 0.0), Vec3::new(10.0, -10.0, 0.0), Vec3::new(0.0, 10.0, 0.0)];
    let (s, x) = triangles(&[huge]);
    assert_eq!(synth_segmentation(&cam, &s, &x).count(), 200);
}

/// Rasterizes front-facing triangles with a per-pixel depth test.
fn zbuffer_visibility(cam: &CameraModel, s: &SurfaceMesh, x: &ParticleState) -> Vec<bool> {
    let mut depth = vec![f64::INFINITY; cam.pixel_count()];
    let mut owner: Vec<Option<usize>> = vec![None; cam.pixel_count()];
    for f in 0..s.face_count() {
        let [a, b, c] = s.corners(f, &x.positions);
        let n = (b - a).cross(&(c - a));
        if n.dot(&(cam.position - a)) <= 0.0 {
            continue;
        }
        let (Some(pa), Some(pb), Some(pc)) = (cam.project(&a), cam.project(&b), cam.project(&c)) else {
            continue;
        };
        let edge = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
        let area = edge(pa, pb, pc);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let p = (u as f64 + 0.5, v as f64 + 0.5);
                let w = [edge(pb, pc, p), edge(pc, pa, p), edge(pa, pb, p)];
                if !w.iter().all(|w| w * area >= 0.0) {
                    continue;
                }
                let ray = cam.pixel_ray(u, v);
                let t = n.dot(&(a - ray.origin)) / n.dot(&ray.direction);
                let i = v * cam.width + u;
                if t < depth[i] {
                    depth[i] = t;
                    owner[i] = Some(f);
                }
            }
        }
    }
    let mut vis = vec![false; s.face_count()];
    for f in owner.into_iter().flatten() {
        vis[f] = true;
    }
    vis
}

#[test]
fn convex_phantom_matches_zbuffer() {
    let mesh = slab();
    let x = mesh.rest_state();
    let cam = oblique(160, 120);
    let seg = synth_segmentation(&cam, &mesh.surface, &x);
    let vis = render_visibility(&cam, &mesh.surface, &x, &seg);
    assert_eq!(vis.faces, zbuffer_visibility(&cam, &mesh.surface, &x));
    assert!(vis.visible_count() > 0);
}

fn convex_hull_area(mut pts: Vec<(f64, f64)>) -> (f64, f64) {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let n = hull.len();
    let mut area = 0.0;
    let mut perimeter = 0.0;
    for i in 0..n {
        let (p, q) = (hull[i], hull[(i + 1) % n]);
        area += p.0 * q.1 - q.0 * p.1;
        perimeter += ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
    }
    (0.5 * area.abs(), perimeter)
}

#[test]
fn mask_area_matches_projected_silhouette() {
    let mesh = slab();
    let x = mesh.rest_state();
    let cam = oblique(160, 120);
    let mask = synth_segmentation(&cam, &mesh.surface, &x);
    let projected: Vec<(f64, f64)> = x.positions.iter().map(|p| cam.project(p).unwrap()).collect();
    let (area, perimeter) = convex_hull_area(projected);
    let count = mask.count() as f64;
    assert!((count - area).abs() <= perimeter, "mask {count} area {area} ring {perimeter}");
}

#[test]
fn pgm_header_and_size() {
    let m = MaskImage::full(3, 2);
    let pgm = m.to_pgm();
    assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(pgm.len(), 11 + 6);
}

fn top_faces(mesh: &TetMesh) -> Vec<bool> {
    (0..mesh.surface.face_count())
        .map(|f| mesh.surface.area_normal(f, &mesh.vertices).z > 0.0)
        .collect()
}

#[test]
fn noiseless_cloud_lies_on_visible_faces() {
    let mesh = slab();
    let x = mesh.rest_state();
    let vis = top_faces(&mesh);
    let cloud = synth_point_cloud(&mesh.surface, &x, &vis, 500, 0.0, 4).unwrap();
    let top = PhantomSize::default().height;
    assert!(cloud.points.iter().all(|p| (p.z - top).abs() < 1e-15));
    let anchors = sample_visible_anchors(&mesh.surface, &x, &vis, 500, 4).unwrap();
    assert!(anchors.iter().all(|a| vis[a.face]));
    assert!(cloud.to_ply().contains("element vertex 500"));
}

#[test]
fn noisy_cloud_matches_folded_gaussian() {
    let mesh = slab();
    let x = mesh.rest_state();
    let sigma = 5e-4;
    let cloud = synth_point_cloud(&mesh.surface, &x, &top_faces(&mesh), 4000, sigma, 9).unwrap();
    let top = PhantomSize::default().height;
    let mean = cloud.points.iter().map(|p| (p.z - top).abs()).sum::<f64>() / cloud.len() as f64;
    let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean / expected - 1.0).abs() < 0.1, "{mean} vs {expected}");
}

#[test]
fn clouds_are_seeded() {
    let mesh = slab();
    let x = mesh.rest_state();
    let vis = top_faces(&mesh);
    let a = synth_point_cloud(&mesh.surface, &x, &vis, 100, 1e-3, 5).unwrap();
    let b = synth_point_cloud(&mesh.surface, &x, &vis, 100, 1e-3, 5).unwrap();
    let c = synth_point_cloud(&mesh.surface, &x, &vis, 100, 1e-3, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cloud_needs_visible_faces_and_valid_noise() {
    let mesh = slab();
    let x = mesh.rest_state();
    let none = vec![false; mesh.surface.face_count()];
    assert_eq!(synth_point_cloud(&mesh.surface, &x, &none, 10, 0.0, 1), Err(PerceptionError::NothingVisible));
    assert_eq!(synth_point_cloud(&mesh.surface, &x, &top_faces(&mesh), 10, -1.0, 1), Err(PerceptionError::BadNoise));
}

fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |f: &[Vec3], t: &[Vec3]| -> f64 {
        f.iter()
            .map(|p| t.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum()
    };
    one(a, b) + one(b, a)
}

#[test]
fn chamfer_examples() {
    let a = vec![Vec3::new(0.1, 0.2, 0.3)];
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    let b = vec![Vec3::new(0.1, 0.2, 0.8)];
    assert_abs_diff_eq!(chamfer(&a, &b).unwrap(), 2.0 * 0.25, epsilon = 1e-15);
    assert_eq!(chamfer(&a, &[]), Err(PerceptionError::EmptySet));
}

#[test]
fn chamfer_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let mut set = |n: usize| -> Vec<Vec3> {
            (0..n)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        };
        let a = set(100);
        let b = set(100);
        let fast = chamfer(&a, &b).unwrap();
        assert!((fast - brute_chamfer(&a, &b)).abs() <= 1e-12);
        assert_eq!(fast, chamfer(&b, &a).unwrap());
    }
}

fn wedge_sim(material: MaterialParams) -> SimState {
    let mesh = Arc::new(gen_wedge_phantom(45.0, PhantomSize::default(), PhantomResolution { along: 8, across: 8, depth: 3 }).unwrap());
    let set = ConstraintSet::from_mesh(&mesh, &material);
    SimState::new(mesh, set, SimConfig::default()).unwrap()
}

#[test]
fn noiseless_cloud_of_current_state_changes_nothing() {
    let mut sim = wedge_sim(MaterialParams::default());
    let x = sim.state().clone();
    let vis = VisibilityMask {
        faces: top_faces(sim.mesh()),
        step: 0,
    };
    let cloud = synth_point_cloud(&sim.mesh().surface, &x, &vis.faces, 800, 0.0, 2).unwrap();
    let est = estimate_state(&mut sim, &cloud, &vis).unwrap();
    assert!(est.max_distance(&x) < 1e-9);
}

#[test]
fn registration_reduces_chamfer_and_keeps_hard_constraints() {
    // A uniform scaling leaves the equilibrium unchanged; soften shape matching only.
    let truth_material = MaterialParams {
        shape_compliance: 2e-2,
        ..MaterialParams::default()
    };
    let mut truth = wedge_sim(truth_material);
    let mut est = wedge_sim(MaterialParams::default());
    let s = truth.mesh().surface.clone();
    let face = (0..s.face_count())
        .filter(|&f| s.area_normal(f, &truth.mesh().vertices).z > 0.0)
        .min_by(|&a, &b| {
            let c = Vec3::new(0.0, -0.015, 0.02);
            (s.centroid(a, &truth.mesh().vertices) - c)
                .norm()
                .total_cmp(&(s.centroid(b, &truth.mesh().vertices) - c).norm())
        })
        .unwrap();
    let p0 = s.centroid(face, &truth.mesh().vertices);
    let p = p0 + Vec3::new(0.0, -3e-3, 3e-3);
    for sim in [&mut truth, &mut est] {
        sim.couple_face(face, p0).unwrap();
        sim.solve(Some(p), None).unwrap();
    }
    let vis = VisibilityMask {
        faces: top_faces(truth.mesh()),
        step: 1,
    };
    let cloud = synth_point_cloud(&s, truth.state(), &vis.faces, 1500, 0.0, 3).unwrap();
    let samples = sample_visible_anchors(&s, est.state(), &vis.faces, 1500, 8).unwrap();
    let eval = |state: &ParticleState| -> Vec<Vec3> { samples.iter().map(|a| eval_anchor(&s, a, state)).collect() };
    let before = chamfer(&eval(est.state()), &cloud.points).unwrap();
    estimate_state(&mut est, &cloud, &vis).unwrap();
    let after = chamfer(&eval(est.state()), &cloud.points).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert!(est.hard_constraint_error() <= 1e-12);
}

#[test]
fn empty_visibility_is_an_error() {
    let mut sim = wedge_sim(MaterialParams::default());
    let vis = VisibilityMask {
        faces: vec![false; sim.mesh().surface.face_count()],
        step: 0,
    };
    let cloud = PointCloud {
        points: vec![Vec3::zeros()],
        sigma: 0.0,
    };
    assert_eq!(estimate_state(&mut sim, &cloud, &vis), Err(PerceptionError::NothingVisible));
}

#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softply::geometry::{enumerate_grid, DeformationState, PoseGridSpec, RestConfiguration, RigidTransform};
use softply::plysim::{
    build_mesh, gravity_down, max_free_residual, solve_equilibrium, spring_force, total_energy, GraspConfig, NodeKind,
    PhysicsSpec, PlyMesh, SolverSettings, Spring, SpringKind,
};
use softply::render::{rasterize_triangles, CameraModel, DepthImage};

/// Per-pixel depth from intersecting the pixel-center ray with every triangle.
/// `ambiguous` marks pixels whose center sits within 1e-9 of some edge, where
/// coverage is decided by rounding.
pub struct RayCast {
    pub depth: Vec<Option<f64>>,
    pub ambiguous: Vec<bool>,
}

pub fn raycast(cam: &CameraModel, verts: &[Vector3<f64>], tris: &[[usize; 3]]) -> RayCast {
    let n = cam.width * cam.height;
    let mut depth = vec![None; n];
    let mut ambiguous = vec![false; n];
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = Vector3::new(
                (u as f64 + 0.5 - cam.cx) / cam.fx,
                (v as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            );
            let mut best: Option<f64> = None;
            for tri in tris {
                let [a, b, c] = tri.map(|i| verts[i]);
                if a.z <= 1e-9 || b.z <= 1e-9 || c.z <= 1e-9 {
                    continue;
                }
                // Moller-Trumbore with the ray origin at the camera center
                let (e1, e2) = (b - a, c - a);
                let p = dir.cross(&e2);
                let det = e1.dot(&p);
                if det.abs() < 1e-14 {
                    continue;
                }
                let s = -a;
                let bu = s.dot(&p) / det;
                let q = s.cross(&e1);
                let bv = dir.dot(&q) / det;
                let t = e2.dot(&q) / det;
                let bw = 1.0 - bu - bv;
                let margin = bu.min(bv).min(bw);
                if margin.abs() < 1e-9 {
                    ambiguous[v * cam.width + u] = true;
                }
                if margin < 0.0 || t < cam.z_near || t > cam.z_far {
                    continue;
                }
                if best.is_none_or(|d| t < d) {
                    best = Some(t);
                }
            }
            depth[v * cam.width + u] = best;
        }
    }
    RayCast { depth, ambiguous }
}

/// Largest rasterizer-vs-ray-cast depth gap over unambiguous pixels, and the
/// number of pixels where exactly one of them reports a surface.
pub fn compare_with_raycast(cam: &CameraModel, verts: &[Vector3<f64>], tris: &[[usize; 3]]) -> (f64, usize, usize) {
    let img = rasterize_triangles(cam, verts, tris);
    let oracle = raycast(cam, verts, tris);
    let (mut worst, mut coverage_mismatch, mut compared) = (0.0f64, 0, 0);
    for i in 0..img.data.len() {
        if oracle.ambiguous[i] {
            continue;
        }
        match (img.data[i], oracle.depth[i]) {
            (0.0, None) => {}
            (d, Some(t)) if d != 0.0 => {
                compared += 1;
                worst = worst.max((f64::from(d) - t).abs());
            }
            _ => coverage_mismatch += 1,
        }
    }
    (worst, coverage_mismatch, compared)
}

/// Small camera looking down +z with random intrinsics.
pub fn small_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    let (width, height) = (rng.random_range(16..40), rng.random_range(12..32));
    CameraModel {
        fx: rng.random_range(20.0..60.0),
        fy: rng.random_range(20.0..60.0),
        cx: width as f64 / 2.0 + rng.random_range(-2.0..2.0),
        cy: height as f64 / 2.0 + rng.random_range(-2.0..2.0),
        width,
        height,
        pose: RigidTransform::identity(),
        z_near: 0.2,
        z_far: 3.0,
    }
}

/// Randomly perturbed grid sheet, tilted and partly overlapping itself.
pub fn random_sheet(rng: &mut ChaCha8Rng) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let (nu, nv) = (rng.random_range(2..5), rng.random_range(2..5));
    let z0 = rng.random_range(0.6..1.6);
    let tilt = rng.random_range(-0.4..0.4);
    let mut verts = Vec::new();
    for j in 0..nv {
        for i in 0..nu {
            let x = -0.3 + 0.6 * i as f64 / (nu - 1) as f64 + rng.random_range(-0.03..0.03);
            let y = -0.25 + 0.5 * j as f64 / (nv - 1) as f64 + rng.random_range(-0.03..0.03);
            verts.push(Vector3::new(x, y, z0 + tilt * x + rng.random_range(-0.1..0.1)));
        }
    }
    let mut tris = Vec::new();
    for j in 0..nv - 1 {
        for i in 0..nu - 1 {
            let a = j * nu + i;
            tris.push([a, a + 1, a + nu + 1]);
            tris.push([a, a + nu + 1, a + nu]);
        }
    }
    // a stray triangle in front, so occlusion is exercised
    let base = verts.len();
    let zf = z0 - rng.random_range(0.1..0.4);
    for _ in 0..3 {
        verts.push(Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.25..0.25), zf + rng.random_range(-0.05..0.05)));
    }
    tris.push([base, base + 1, base + 2]);
    (verts, tris)
}

/// Free positions of a horizontal chain fixed at both ends: nodes 0 and 4
/// clamped at x = 0 and x = `span`, three free masses between.
pub fn chain(span: f64, rest: f64, k: f64, mass: f64) -> PlyMesh {
    let pos: Vec<_> = (0..5).map(|i| Vector3::new(span * i as f64 / 4.0, 0.0, 0.0)).collect();
    let kinds = (0..5).map(|i| if i == 0 || i == 4 { NodeKind::RobotEdge } else { NodeKind::Free }).collect();
    let springs = (0..4).map(|i| Spring { a: i, b: i + 1, rest_length: rest, stiffness: k, kind: SpringKind::Structural }).collect();
    PlyMesh::from_parts(pos, vec![mass; 5], kinds, springs)
}

fn chain_energy(span: f64, rest: f64, k: f64, mass: f64, g: f64, free: &[(f64, f64); 3]) -> f64 {
    let pts = [(0.0, 0.0), free[0], free[1], free[2], (span, 0.0)];
    let mut e = 0.0;
    for w in pts.windows(2) {
        let len = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        let s = (len - rest).max(0.0);
        e += 0.5 * k * s * s;
    }
    e + free.iter().map(|p| mass * g * p.1).sum::<f64>()
}

/// Equilibrium of the chain by nested grid scans of the energy. The sag is
/// mirror symmetric, so the scan runs over the first mass (x, z) and the
/// middle mass height.
pub fn chain_scan_oracle(span: f64, rest: f64, k: f64, mass: f64, g: f64) -> [(f64, f64); 3] {
    let mid = span / 2.0;
    let pts = |x1: f64, z1: f64, z2: f64| [(x1, z1), (mid, z2), (span - x1, z1)];
    let (mut c, mut half) = ([span / 4.0, -0.1, -0.1], 0.3);
    const N: i32 = 20;
    while half > 1e-9 {
        let h = half / N as f64;
        let mut best = (f64::INFINITY, c);
        for a in -N..=N {
            for b in -N..=N {
                for d in -N..=N {
                    let p = [c[0] + a as f64 * h, c[1] + b as f64 * h, c[2] + d as f64 * h];
                    let e = chain_energy(span, rest, k, mass, g, &pts(p[0], p[1], p[2]));
                    if e < best.0 {
                        best = (e, p);
                    }
                }
            }
        }
        c = best.1;
        half = 4.0 * h;
    }
    pts(c[0], c[1], c[2])
}

/// Largest distance between solver and scan-oracle positions for the 3-mass chain.
pub fn chain_oracle_gap() -> f64 {
    let (span, rest, k, mass, g) = (0.4, 0.1, 50.0, 0.05, 9.81);
    let mut m = chain(span, rest, k, mass);
    solve_equilibrium(&mut m, &gravity_down(g), &SolverSettings { tol: 1e-12, max_iters: 1000 }).expect("chain converges");
    let oracle = chain_scan_oracle(span, rest, k, mass, g);
    (1..4)
        .map(|i| {
            let p = m.positions[i];
            let (ox, oz) = oracle[i - 1];
            ((p.x - ox).powi(2) + p.y.powi(2) + (p.z - oz).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

pub struct PhysicsCheck {
    pub max_residual: f64,
    pub min_spring_force: f64,
    pub poses: usize,
}

/// Settles the default mesh at `count` random poses of `grid`.
pub fn physics_at_random_poses(grid: &PoseGridSpec, count: usize, seed: u64) -> PhysicsCheck {
    let physics = PhysicsSpec::default();
    let poses = enumerate_grid(grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grasps = GraspConfig::default_set();
    let mut out = PhysicsCheck { max_residual: 0.0, min_spring_force: f64::INFINITY, poses: 0 };
    for _ in 0..count {
        let pose = poses[rng.random_range(0..poses.len())];
        let grasp = &grasps[rng.random_range(0..grasps.len())];
        let mut mesh = build_mesh(&physics.material, grasp).unwrap();
        physics.settle(&mut mesh, &pose).unwrap();
        out.max_residual = out.max_residual.max(max_free_residual(&mesh, &physics.gravity_vector()));
        for s in &mesh.springs {
            let len = (mesh.positions[s.a] - mesh.positions[s.b]).norm();
            out.min_spring_force = out.min_spring_force.min(spring_force(s.rest_length, len, s.stiffness));
        }
        out.poses += 1;
    }
    out
}

/// Largest gap between each node and the x-mirror of its column partner in
/// the rest-pose equilibrium of a symmetric grasp.
pub fn rest_mirror_gap() -> f64 {
    let physics = PhysicsSpec::default();
    let grasp = GraspConfig::default_set().into_iter().find(|g| g.is_symmetric()).unwrap();
    let mut mesh = build_mesh(&physics.material, &grasp).unwrap();
    physics.settle(&mut mesh, &RestConfiguration::default().desired).unwrap();
    let mut gap: f64 = 0.0;
    for j in 0..mesh.nv {
        for i in 0..mesh.nu {
            let p = mesh.positions[mesh.node(i, j)];
            let q = mesh.positions[mesh.node(mesh.nu - 1 - i, j)];
            gap = gap.max((p - Vector3::new(-q.x, q.y, q.z)).norm());
        }
    }
    gap
}

/// Energy of the settled mesh never exceeds that of small random perturbations.
pub fn is_local_minimum(mesh: &PlyMesh, gravity: &Vector3<f64>, seed: u64) -> bool {
    let e0 = total_energy(mesh, gravity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20).all(|_| {
        let mut m = mesh.clone();
        for (p, kind) in m.positions.iter_mut().zip(&mesh.kinds) {
            if *kind == NodeKind::Free {
                *p += Vector3::new(rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4));
            }
        }
        total_energy(&m, gravity) >= e0 - 1e-12
    })
}

/// Exact area average by replicating every source pixel `out x out` times and
/// averaging blocks of `width x height` fine samples.
pub fn box_filter_oracle(img: &DepthImage, u0: usize, v0: usize, width: usize, height: usize, out: usize) -> Vec<f64> {
    let mut res = vec![0.0; out * out];
    for ov in 0..out {
        for ou in 0..out {
            let mut sum = 0.0;
            for fv in ov * height..(ov + 1) * height {
                for fu in ou * width..(ou + 1) * width {
                    sum += f64::from(img.get(u0 + fu / out, v0 + fv / out));
                }
            }
            res[ov * out + ou] = sum / (width * height) as f64;
        }
    }
    res
}

/// `Some(true)` when the pixel center lies above the shifted anchor line
/// (smaller v), `None` within 1e-9 of it. Only for non-vertical lines.
pub fn above_line(a: (f64, f64), b: (f64, f64), offset: f64, u: usize, v: usize) -> Option<bool> {
    let (cu, cv) = (u as f64 + 0.5, v as f64 + 0.5);
    let line_v = a.1 - offset + (cu - a.0) * (b.1 - a.1) / (b.0 - a.0);
    let d = line_v - cv;
    (d.abs() > 1e-9).then_some(d > 0.0)
}

pub fn random_state(rng: &mut ChaCha8Rng) -> DeformationState {
    DeformationState::new(
        rng.random_range(-0.1..0.1),
        0.6 + rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.35..0.35),
        rng.random_range(-0.35..0.35),
    )
}

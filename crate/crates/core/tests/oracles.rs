mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use softply::geometry::{PoseGridSpec, RestConfiguration};
use softply::plysim::{build_mesh, GraspConfig, PhysicsSpec};
use softply::preprocess::{crop_resize, mask_above_line, CropRect};
use softply::render::{project, CameraModel, DepthImage};

#[test]
fn rasterizer_matches_ray_cast() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0;
    for case in 0..20 {
        let cam = small_camera(&mut rng);
        let (verts, tris) = random_sheet(&mut rng);
        let (worst, mismatched, compared) = compare_with_raycast(&cam, &verts, &tris);
        assert!(worst < 1e-5, "case {case}: depth gap {worst}");
        assert_eq!(mismatched, 0, "case {case}");
        total += compared;
    }
    assert!(total > 1000, "too few covered pixels: {total}");
}

#[test]
fn rendered_ply_matches_ray_cast() {
    let physics = PhysicsSpec::default();
    let cam = CameraModel::from_spec(&Default::default()).unwrap();
    let mut mesh = build_mesh(&physics.material, &GraspConfig::default_set()[3]).unwrap();
    physics.settle(&mut mesh, &RestConfiguration::default().desired).unwrap();
    let verts: Vec<_> = mesh.positions.iter().map(|p| cam.to_camera(p)).collect();
    let (worst, mismatched, compared) = compare_with_raycast(&cam, &verts, &mesh.triangles());
    assert!(worst < 1e-5 && mismatched == 0 && compared > 2000, "{worst} {mismatched} {compared}");
}

#[test]
fn analytic_projection() {
    let cam = CameraModel { fx: 100.0, fy: 80.0, cx: 32.0, cy: 24.0, ..CameraModel::from_spec(&Default::default()).unwrap() };
    let cases = [
        (Vector3::new(0.0, 0.0, 2.0), (32.0, 24.0)),
        (Vector3::new(0.5, 0.0, 1.0), (82.0, 24.0)),
        (Vector3::new(-0.2, 0.3, 2.0), (22.0, 36.0)),
    ];
    for (p, (u, v)) in cases {
        let (pu, pv, z) = project(&cam, &p).unwrap();
        assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6 && (z - p.z).abs() < 1e-12);
    }
    assert!(project(&cam, &Vector3::new(0.0, 0.0, -1.0)).is_err());
}

#[test]
fn three_mass_chain_matches_energy_scan() {
    let gap = chain_oracle_gap();
    assert!(gap < 1e-4, "chain gap {gap}");
}

#[test]
fn equilibrium_invariants_on_grid_poses() {
    let grid = PoseGridSpec::full(&RestConfiguration::default());
    let c = physics_at_random_poses(&grid, 10, 5);
    assert_eq!(c.poses, 10);
    assert!(c.max_residual <= 1e-6, "residual {}", c.max_residual);
    assert!(c.min_spring_force >= 0.0);
}

#[test]
fn rest_equilibrium_is_mirror_symmetric() {
    let gap = rest_mirror_gap();
    assert!(gap < 1e-6, "mirror gap {gap}");
}

#[test]
fn settled_shape_is_an_energy_minimum() {
    let physics = PhysicsSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for grasp in GraspConfig::default_set().iter().take(3) {
        let mut mesh = build_mesh(&physics.material, grasp).unwrap();
        physics.settle(&mut mesh, &random_state(&mut rng)).unwrap();
        assert!(is_local_minimum(&mesh, &physics.gravity_vector(), 9));
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthImage {
    let data = (0..w * h).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.5f32..2.0) }).collect();
    DepthImage { width: w, height: h, data }
}

proptest! {
    #[test]
    fn resize_matches_box_filter(seed in 0u64..1000, w in 8usize..40, h in 8usize..40, out in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, w + 5, h + 3);
        let (u0, v0) = (rng.random_range(0..=5), rng.random_range(0..=3));
        let got = crop_resize(&img, &CropRect { u0, v0, width: w, height: h }, out);
        let want = box_filter_oracle(&img, u0, v0, w, h, out);
        for (g, o) in got.data.iter().zip(&want) {
            prop_assert!((f64::from(*g) - o).abs() < 1e-5, "{} vs {}", g, o);
        }
    }

    #[test]
    fn mask_matches_half_plane(seed in 0u64..1000, offset in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = DepthImage::filled(30, 20, 1.0);
        let a = (rng.random_range(0.0..12.0), rng.random_range(0.0..20.0));
        let b = (rng.random_range(18.0..30.0), rng.random_range(0.0..20.0));
        let (first, second) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let m = mask_above_line(&img, first, second, offset).unwrap();
        for v in 0..20 {
            for u in 0..30 {
                if let Some(above) = above_line(a, b, offset, u, v) {
                    prop_assert_eq!(m.get(u, v) == 0.0, above, "pixel ({}, {})", u, v);
                }
            }
        }
    }
}

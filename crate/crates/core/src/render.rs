//! Synthetic depth sensor: pinhole projection, z-buffered triangle
//! rasterization of the ply surface, and a seeded per-pixel noise model.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::plysim::PlyMesh;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("point at camera depth {0} is not in front of the camera")]
    BehindCamera(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Camera intrinsics and placement as written in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Optical center in the gripper frame, meters.
    pub eye: [f64; 3],
    /// Point on the optical axis in the gripper frame, meters.
    pub target: [f64; 3],
    pub z_near: f64,
    pub z_far: f64,
}

impl Default for CameraSpec {
    /// 160x120 sensor mounted above and behind the gripper, pitched toward the human.
    fn default() -> Self {
        Self {
            fx: 140.0,
            fy: 140.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
            eye: [0.0, -0.15, 1.15],
            target: [0.0, 0.45, -0.1],
            z_near: 0.2,
            z_far: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera frame expressed in the gripper frame.
    pub pose: RigidTransform,
    pub z_near: f64,
    pub z_far: f64,
}

/// Camera pose looking from `eye` at `target`, with image rows growing away
/// from `up` (so `up` points toward the top of the image).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let y = -(up - z * up.dot(&z)).normalize();
    let x = y.cross(&z);
    RigidTransform::new(nalgebra::Matrix3::from_columns(&[x, y, z]), eye)
}

impl CameraModel {
    pub fn from_spec(spec: &CameraSpec) -> Result<Self, RenderError> {
        let eye = Vector3::from(spec.eye);
        let target = Vector3::from(spec.target);
        if (target - eye).norm() < 1e-9 {
            return Err(RenderError::InvalidCamera("eye and target coincide".into()));
        }
        // image up points toward the human side of the ply (+y)
        let cam = Self {
            fx: spec.fx,
            fy: spec.fy,
            cx: spec.cx,
            cy: spec.cy,
            width: spec.width,
            height: spec.height,
            pose: look_at(eye, target, Vector3::y()),
            z_near: spec.z_near,
            z_far: spec.z_far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(RenderError::InvalidCamera("need 0 < z_near < z_far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("empty sensor".into()));
        }
        if !self.pose.is_proper(1e-9) {
            return Err(RenderError::InvalidCamera("pose rotation is not proper".into()));
        }
        Ok(())
    }

    /// Gripper-frame point to camera frame.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }
}

/// Row-major depth grid in meters; 0 means no return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Binary 16-bit PGM in millimeters.
    pub fn to_pgm16(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &v in &self.data {
            let mm = (f64::from(v) * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&mm.to_be_bytes());
        }
        out
    }
}

/// Pinhole projection of a camera-frame point to continuous pixel coordinates;
/// pixel `(u, v)` covers `[u, u+1) x [v, v+1)`.
pub fn project(cam: &CameraModel, point: &Vector3<f64>) -> Result<(f64, f64, f64), RenderError> {
    if !(point.z > 0.0) {
        return Err(RenderError::BehindCamera(point.z));
    }
    Ok((cam.fx * point.x / point.z + cam.cx, cam.fy * point.y / point.z + cam.cy, point.z))
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffered rasterization of camera-frame triangles.
///
/// Depth is interpolated perspective-correctly (1/z is affine in screen space).
/// Fragments outside `[z_near, z_far]` are discarded; triangles with a vertex at
/// or behind the camera plane are skipped.
pub fn rasterize_triangles(cam: &CameraModel, verts: &[Vector3<f64>], tris: &[[usize; 3]]) -> DepthImage {
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for tri in tris {
        let p = tri.map(|i| verts[i]);
        if p.iter().any(|v| v.z <= 1e-9) {
            continue;
        }
        let s = p.map(|v| (cam.fx * v.x / v.z + cam.cx, cam.fy * v.y / v.z + cam.cy));
        let inv_z = p.map(|v| 1.0 / v.z);
        let area = edge(s[0], s[1], s[2]);
        if area.abs() < 1e-12 || !area.is_finite() {
            continue;
        }
        let min_x = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
        let u0 = (min_x - 0.5).ceil().max(0.0);
        let u1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
        let v0 = (min_y - 0.5).ceil().max(0.0);
        let v1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        let (u0, u1, v0, v1) = (u0 as usize, u1 as usize, v0 as usize, v1 as usize);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let pc = (u as f64 + 0.5, v as f64 + 0.5);
                let b0 = edge(s[1], s[2], pc) / area;
                let b1 = edge(s[2], s[0], pc) / area;
                let b2 = edge(s[0], s[1], pc) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2]);
                if z < cam.z_near || z > cam.z_far {
                    continue;
                }
                let slot = &mut zbuf[v * w + u];
                if z < *slot {
                    *slot = z;
                }
            }
        }
    }
    DepthImage {
        width: w,
        height: h,
        data: zbuf.into_iter().map(|z| if z.is_finite() { z as f32 } else { 0.0 }).collect(),
    }
}

/// Renders the ply surface as seen by `cam`.
pub fn rasterize(cam: &CameraModel, mesh: &PlyMesh) -> DepthImage {
    let verts: Vec<_> = mesh.positions.iter().map(|p| cam.to_camera(p)).collect();
    rasterize_triangles(cam, &verts, &mesh.triangles())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Standard deviation per meter of depth.
    pub sigma_per_meter: f64,
    pub dropout_prob: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma_per_meter: 0.003, dropout_prob: 0.01, seed: 0 }
    }
}

/// Multiplicative Gaussian depth noise plus random dropouts. Pixel `i` draws
/// from ChaCha stream `i` of the model seed, so the result is a pure function of
/// the inputs and independent of evaluation order.
pub fn apply_noise(img: &DepthImage, noise: &NoiseModel, z_near: f64, z_far: f64) -> DepthImage {
    let base = ChaCha8Rng::seed_from_u64(noise.seed);
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                return 0.0;
            }
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            rng.set_word_pos(0);
            let u: f64 = rng.random();
            if u < noise.dropout_prob {
                return 0.0;
            }
            if noise.sigma_per_meter == 0.0 {
                return v;
            }
            let n: f64 = rng.sample(StandardNormal);
            let d = f64::from(v);
            (d + n * noise.sigma_per_meter * d).clamp(z_near, z_far) as f32
        })
        .collect();
    DepthImage { width: img.width, height: img.height, data }
}

/// Pixel positions of the two clip endpoints, the synthetic stand-ins for fiducial tags.
pub fn project_anchors(cam: &CameraModel, mesh: &PlyMesh) -> Result<[(f64, f64); 2], RenderError> {
    let (l, r) = mesh.clip_nodes;
    let a = project(cam, &cam.to_camera(&mesh.positions[l]))?;
    let b = project(cam, &cam.to_camera(&mesh.positions[r]))?;
    Ok([(a.0, a.1), (b.0, b.1)])
}

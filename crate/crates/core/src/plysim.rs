//! Quasi-static membrane model of the ply.
//!
//! The ply is a regular particle grid joined by tension-only springs
//! (structural 4-neighbour plus both cell diagonals, no bending springs).
//! Grid rows run from the robot edge (`v = 0`, clamped to the gripper) to
//! the human edge (`v = nv - 1`). On the human edge the nodes between the two
//! clip columns are carried rigidly by the grasp proxy frame; everything else
//! is free. All positions are in the robot gripper frame, z up.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{to_transform, DeformationState, RigidTransform};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("invalid grasp {id}: {reason}")]
    InvalidGrasp { id: u32, reason: String },
    #[error("equilibrium not reached after {iterations} iterations (residual {residual:.3e} N)")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("non-finite node state after dynamics step")]
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlyMaterialSpec {
    /// Robot-edge length, meters.
    pub width: f64,
    /// Robot-to-human extent, meters.
    pub length: f64,
    pub grid_nu: usize,
    pub grid_nv: usize,
    /// kg/m².
    pub areal_density: f64,
    /// Structural spring stiffness, N/m.
    pub spring_stiffness: f64,
    /// Diagonal spring stiffness, N/m.
    pub shear_stiffness: f64,
}

impl Default for PlyMaterialSpec {
    fn default() -> Self {
        Self {
            width: 0.9,
            length: 0.6,
            grid_nu: 19,
            grid_nv: 13,
            areal_density: 0.3,
            spring_stiffness: 400.0,
            shear_stiffness: 200.0,
        }
    }
}

impl PlyMaterialSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("width", self.width),
            ("length", self.length),
            ("areal_density", self.areal_density),
            ("spring_stiffness", self.spring_stiffness),
            ("shear_stiffness", self.shear_stiffness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidMaterial(format!("{name} must be positive")));
            }
        }
        if self.grid_nu < 2 || self.grid_nv < 2 {
            return Err(SimError::InvalidMaterial("grid needs at least 2x2 nodes".into()));
        }
        Ok(())
    }
}

/// Placement of the two human-side clips, measured along the human edge from its midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspConfig {
    pub id: u32,
    pub clip_left_offset: f64,
    pub clip_right_offset: f64,
}

impl GraspConfig {
    pub const fn new(id: u32, left: f64, right: f64) -> Self {
        Self { id, clip_left_offset: left, clip_right_offset: right }
    }

    /// Nine placements: symmetric grasps of several spreads plus offset grasps.
    pub fn default_set() -> Vec<GraspConfig> {
        [
            (-0.30, 0.30),
            (-0.20, 0.20),
            (-0.40, 0.40),
            (-0.35, 0.15),
            (-0.15, 0.35),
            (-0.45, 0.45),
            (-0.25, 0.25),
            (-0.40, 0.10),
            (-0.10, 0.40),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(l, r))| GraspConfig::new(i as u32, l, r))
        .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (self.clip_left_offset + self.clip_right_offset).abs() < 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Free,
    /// Held by the robot gripper.
    RobotEdge,
    /// Carried rigidly by the human grasp proxy frame.
    HumanSegment,
}

impl NodeKind {
    pub fn is_clamped(self) -> bool {
        self != NodeKind::Free
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpringKind {
    Structural,
    Shear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub kind: SpringKind,
}

/// Tension-only Hooke law: pulls only when stretched beyond rest.
pub fn spring_force(rest: f64, current_length: f64, k: f64) -> f64 {
    if current_length > rest {
        k * (current_length - rest)
    } else {
        0.0
    }
}

/// `½·k·max(0, ℓ-ℓ₀)²`.
pub fn spring_energy(rest: f64, current_length: f64, k: f64) -> f64 {
    let s = (current_length - rest).max(0.0);
    0.5 * k * s * s
}

/// Gravity acceleration `g` pointing down the gripper z axis.
pub fn gravity_down(g: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -g)
}

#[derive(Debug, Clone)]
pub struct PlyMesh {
    /// Grid size; zero for meshes built with [`PlyMesh::from_parts`].
    pub nu: usize,
    pub nv: usize,
    /// Flat layout in the gripper frame (robot edge at y = 0).
    pub home: Vec<Vector3<f64>>,
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub masses: Vec<f64>,
    pub kinds: Vec<NodeKind>,
    pub springs: Vec<Spring>,
    /// Human-segment nodes expressed in the grasp proxy frame.
    pub segment_offsets: Vec<(usize, Vector3<f64>)>,
    /// Current pose of the grasp proxy.
    pub grasp_frame: RigidTransform,
    /// The two clip endpoint nodes (left, right).
    pub clip_nodes: (usize, usize),
    /// Node permutation used to keep the solver's Hessian narrow-banded.
    pub solve_order: Vec<usize>,
    pub width: f64,
    pub length: f64,
}

impl PlyMesh {
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.nu + i
    }

    pub fn free_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == NodeKind::Free).count()
    }

    /// Builds an arbitrary spring network (tests, chains). Nodes start at
    /// `positions`, which also serve as their home.
    pub fn from_parts(
        positions: Vec<Vector3<f64>>,
        masses: Vec<f64>,
        kinds: Vec<NodeKind>,
        springs: Vec<Spring>,
    ) -> Self {
        let n = positions.len();
        assert!(masses.len() == n && kinds.len() == n, "node arrays must agree in length");
        let segment_offsets = (0..n)
            .filter(|&i| kinds[i] == NodeKind::HumanSegment)
            .map(|i| (i, positions[i]))
            .collect();
        Self {
            nu: 0,
            nv: 0,
            home: positions.clone(),
            velocities: vec![Vector3::zeros(); n],
            positions,
            masses,
            kinds,
            springs,
            segment_offsets,
            grasp_frame: RigidTransform::identity(),
            clip_nodes: (0, 0),
            solve_order: (0..n).collect(),
            width: 0.0,
            length: 0.0,
        }
    }

    /// Triangles of the surface, two per cell with the (i,j)-(i+1,j+1) diagonal.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        let mut tris = Vec::with_capacity(2 * (self.nu.saturating_sub(1)) * (self.nv.saturating_sub(1)));
        for j in 0..self.nv.saturating_sub(1) {
            for i in 0..self.nu - 1 {
                let (a, b, c, d) =
                    (self.node(i, j), self.node(i + 1, j), self.node(i + 1, j + 1), self.node(i, j + 1));
                tris.push([a, b, c]);
                tris.push([a, c, d]);
            }
        }
        tris
    }

    /// Plain-text dump: one `x y z kind` line per node.
    pub fn dump_points(&self) -> String {
        let mut s = String::new();
        for (p, k) in self.positions.iter().zip(&self.kinds) {
            let tag = match k {
                NodeKind::Free => 'f',
                NodeKind::RobotEdge => 'r',
                NodeKind::HumanSegment => 'h',
            };
            let _ = writeln!(s, "{:.9} {:.9} {:.9} {tag}", p.x, p.y, p.z);
        }
        s
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Regular grid with the robot row clamped and the human edge clamped between the clip columns.
pub fn build_mesh(mat: &PlyMaterialSpec, grasp: &GraspConfig) -> Result<PlyMesh, SimError> {
    mat.validate()?;
    let bad = |reason: &str| SimError::InvalidGrasp { id: grasp.id, reason: reason.to_string() };
    let half = mat.width / 2.0;
    let (l, r) = (grasp.clip_left_offset, grasp.clip_right_offset);
    if !(l.is_finite() && r.is_finite()) || l.abs() > half + 1e-12 || r.abs() > half + 1e-12 {
        return Err(bad("clip offsets must lie on the human edge"));
    }
    if l >= r {
        return Err(bad("left clip must be left of the right clip"));
    }
    let (nu, nv) = (mat.grid_nu, mat.grid_nv);
    let du = mat.width / (nu - 1) as f64;
    let dv = mat.length / (nv - 1) as f64;
    let col = |off: f64| (((off + half) / du).round() as usize).min(nu - 1);
    let (cl, cr) = (col(l), col(r));
    if cl == cr {
        return Err(bad("clips fall on the same grid column"));
    }

    let n = nu * nv;
    let mut home = Vec::with_capacity(n);
    let mut masses = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let cell_mass = mat.areal_density * du * dv;
    for j in 0..nv {
        for i in 0..nu {
            home.push(Vector3::new(-half + i as f64 * du, j as f64 * dv, 0.0));
            let wu = if i == 0 || i == nu - 1 { 0.5 } else { 1.0 };
            let wv = if j == 0 || j == nv - 1 { 0.5 } else { 1.0 };
            masses.push(cell_mass * wu * wv);
            kinds.push(if j == 0 {
                NodeKind::RobotEdge
            } else if j == nv - 1 && (cl..=cr).contains(&i) {
                NodeKind::HumanSegment
            } else {
                NodeKind::Free
            });
        }
    }

    let idx = |i: usize, j: usize| j * nu + i;
    let mut springs = Vec::new();
    let mut link = |a: usize, b: usize, k: f64, kind: SpringKind, home: &[Vector3<f64>]| {
        springs.push(Spring { a, b, rest_length: (home[b] - home[a]).norm(), stiffness: k, kind });
    };
    for j in 0..nv {
        for i in 0..nu {
            if i + 1 < nu {
                link(idx(i, j), idx(i + 1, j), mat.spring_stiffness, SpringKind::Structural, &home);
            }
            if j + 1 < nv {
                link(idx(i, j), idx(i, j + 1), mat.spring_stiffness, SpringKind::Structural, &home);
            }
            if i + 1 < nu && j + 1 < nv {
                link(idx(i, j), idx(i + 1, j + 1), mat.shear_stiffness, SpringKind::Shear, &home);
                link(idx(i + 1, j), idx(i, j + 1), mat.shear_stiffness, SpringKind::Shear, &home);
            }
        }
    }

    let hgp = Vector3::new(0.0, mat.length, 0.0);
    let segment_offsets =
        (cl..=cr).map(|i| (idx(i, nv - 1), home[idx(i, nv - 1)] - hgp)).collect::<Vec<_>>();

    // Walk the shorter grid direction innermost so Hessian couplings stay close to the diagonal.
    let solve_order = if nu >= nv {
        (0..nu).flat_map(|i| (0..nv).map(move |j| idx(i, j))).collect()
    } else {
        (0..n).collect()
    };

    Ok(PlyMesh {
        nu,
        nv,
        positions: home.clone(),
        velocities: vec![Vector3::zeros(); n],
        home,
        masses,
        kinds,
        springs,
        segment_offsets,
        grasp_frame: RigidTransform::from_translation(hgp),
        clip_nodes: (idx(cl, nv - 1), idx(cr, nv - 1)),
        solve_order,
        width: mat.width,
        length: mat.length,
    })
}

/// Places the clamped nodes for deformation state `state`: robot edge at home,
/// human segment carried rigidly by the grasp proxy pose.
pub fn set_boundary(mesh: &mut PlyMesh, state: &DeformationState) {
    set_boundary_transform(mesh, &to_transform(state));
}

pub fn set_boundary_transform(mesh: &mut PlyMesh, grasp_frame: &RigidTransform) {
    mesh.grasp_frame = *grasp_frame;
    for (i, kind) in mesh.kinds.iter().enumerate() {
        if *kind == NodeKind::RobotEdge {
            mesh.positions[i] = mesh.home[i];
            mesh.velocities[i] = Vector3::zeros();
        }
    }
    for &(i, off) in &mesh.segment_offsets {
        mesh.positions[i] = grasp_frame.apply(&off);
        mesh.velocities[i] = Vector3::zeros();
    }
}

/// Deterministic starting shape for [`solve_equilibrium`]: each grid column is
/// sheared linearly from its (fixed) robot-edge node toward where the rigidly
/// extended human edge would put its last node, with a parabolic sag wherever
/// that chord is shorter than the ply length. Non-grid meshes are left untouched.
pub fn reset_free_nodes(mesh: &mut PlyMesh, gravity: &Vector3<f64>) {
    if mesh.nu == 0 {
        return;
    }
    let down = if gravity.norm() > 0.0 { gravity.normalize() } else { Vector3::new(0.0, 0.0, -1.0) };
    let hgp_home = Vector3::new(0.0, mesh.length, 0.0);
    let nv = mesh.nv;
    // a column of cells behaves like an elastic string: structural plus diagonal springs in series
    let link_k = mesh
        .springs
        .iter()
        .filter(|s| s.a == mesh.node(0, 0))
        .map(|s| s.stiffness)
        .sum::<f64>();
    let column_stiffness = link_k / (nv - 1) as f64;
    let load_per_length = mesh.total_mass() * gravity.norm() / (mesh.width * mesh.length) * mesh.width
        / (mesh.nu - 1) as f64;
    for i in 0..mesh.nu {
        let (first, last) = (mesh.node(i, 0), mesh.node(i, nv - 1));
        let start = mesh.home[first];
        let end = mesh.grasp_frame.apply(&(mesh.home[last] - hgp_home));
        let end_shift = end - mesh.home[last];
        let chord = (end - start).norm();
        let sag = column_sag(chord, mesh.length, load_per_length, column_stiffness);
        for j in 0..nv {
            let id = mesh.node(i, j);
            if mesh.kinds[id].is_clamped() {
                continue;
            }
            let s = j as f64 / (nv - 1) as f64;
            mesh.positions[id] = mesh.home[id] + end_shift * s + down * (4.0 * sag * s * (1.0 - s));
            mesh.velocities[id] = Vector3::zeros();
        }
    }
}

/// Warm start after the boundary moved from `previous_frame` to the current
/// grasp frame: keeps the free nodes' shape and shears it by the motion of the
/// human edge, column by column.
pub fn carry_free_nodes(mesh: &mut PlyMesh, previous_frame: &RigidTransform) {
    if mesh.nu == 0 {
        return;
    }
    let hgp_home = Vector3::new(0.0, mesh.length, 0.0);
    let nv = mesh.nv;
    for i in 0..mesh.nu {
        let rel = mesh.home[mesh.node(i, nv - 1)] - hgp_home;
        let shift = mesh.grasp_frame.apply(&rel) - previous_frame.apply(&rel);
        for j in 0..nv {
            let id = mesh.node(i, j);
            if !mesh.kinds[id].is_clamped() {
                mesh.positions[id] += shift * (j as f64 / (nv - 1) as f64);
                mesh.velocities[id] = Vector3::zeros();
            }
        }
    }
}

/// Mid-span sag of a parabolic elastic string with chord `chord`, unstretched
/// length `length`, distributed load `w` (N/m) and axial stiffness `k` (N/m).
fn column_sag(chord: f64, length: f64, w: f64, k: f64) -> f64 {
    if chord <= 0.0 {
        return 0.0;
    }
    let inextensible = if length > chord { (3.0 * chord * (length - chord) / 8.0).sqrt() } else { 0.0 };
    if w <= 0.0 || k <= 0.0 {
        return inextensible;
    }
    // tension from stretch minus tension the load needs; increasing in sag
    let imbalance = |d: f64| k * (chord + 8.0 * d * d / (3.0 * chord) - length) - w * chord * chord / (8.0 * d);
    let (mut lo, mut hi) = (inextensible.max(1e-9), inextensible.max(1e-9));
    while imbalance(hi) < 0.0 && hi < 10.0 * length {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if imbalance(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Total energy: spring tension energy plus gravitational potential of every node.
pub fn total_energy(mesh: &PlyMesh, gravity: &Vector3<f64>) -> f64 {
    let springs: f64 = mesh
        .springs
        .iter()
        .map(|s| spring_energy(s.rest_length, (mesh.positions[s.b] - mesh.positions[s.a]).norm(), s.stiffness))
        .sum();
    let potential: f64 =
        mesh.positions.iter().zip(&mesh.masses).map(|(p, m)| -m * gravity.dot(p)).sum();
    springs + potential
}

/// Net spring + gravity force on every node (clamped nodes included).
pub fn node_forces(mesh: &PlyMesh, gravity: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let mut f: Vec<Vector3<f64>> = mesh.masses.iter().map(|m| gravity * *m).collect();
    for s in &mesh.springs {
        let d = mesh.positions[s.b] - mesh.positions[s.a];
        let len = d.norm();
        let t = spring_force(s.rest_length, len, s.stiffness);
        if t > 0.0 {
            let pull = d * (t / len);
            f[s.a] += pull;
            f[s.b] -= pull;
        }
    }
    f
}

/// Largest force norm over free nodes.
pub fn max_free_residual(mesh: &PlyMesh, gravity: &Vector3<f64>) -> f64 {
    node_forces(mesh, gravity)
        .iter()
        .zip(&mesh.kinds)
        .filter(|(_, k)| **k == NodeKind::Free)
        .fold(0.0, |m, (f, _)| m.max(f.norm()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Residual force tolerance, N.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 500 }
    }
}

/// Everything needed to turn a grasp and a boundary pose into an equilibrium shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSpec {
    pub material: PlyMaterialSpec,
    /// m/s², acting along -z of the gripper frame.
    pub gravity: f64,
    pub solver: SolverSettings,
}

impl Default for PhysicsSpec {
    fn default() -> Self {
        Self { material: PlyMaterialSpec::default(), gravity: 9.81, solver: SolverSettings::default() }
    }
}

impl PhysicsSpec {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        gravity_down(self.gravity)
    }

    /// Cold-start equilibrium of `mesh` with its boundary at `state`.
    pub fn settle(&self, mesh: &mut PlyMesh, state: &DeformationState) -> Result<SolveReport, SimError> {
        self.settle_frame(mesh, &to_transform(state), &self.gravity_vector())
    }

    /// Cold-start equilibrium for an arbitrary grasp frame and gravity vector,
    /// both expressed in the gripper frame.
    pub fn settle_frame(
        &self,
        mesh: &mut PlyMesh,
        grasp_frame: &RigidTransform,
        gravity: &Vector3<f64>,
    ) -> Result<SolveReport, SimError> {
        set_boundary_transform(mesh, grasp_frame);
        reset_free_nodes(mesh, gravity);
        solve_equilibrium(mesh, gravity, &self.solver)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Accepted iterations.
    pub iterations: usize,
    /// Accepted plus rejected trial steps.
    pub evaluations: usize,
    pub residual: f64,
    /// Total energy after each accepted iteration, starting with the initial state.
    pub energy_trace: Vec<f64>,
}

/// Symmetric band matrix stored by rows: `data[i * (bw + 1) + (j + bw - i)]` holds `A[i][j]` for `i - bw <= j <= i`.
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn new(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(j <= i && i - j <= self.bw);
        &mut self.data[i * (self.bw + 1) + j + self.bw - i]
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + j + self.bw - i]
    }

    /// Adds a symmetric 3x3 block coupling dof blocks `p` and `q`, `p >= q`.
    fn add_block(&mut self, p: usize, q: usize, m: &Matrix3<f64>) {
        for r in 0..3 {
            for c in 0..3 {
                let (i, j) = (3 * p + r, 3 * q + c);
                if j <= i {
                    *self.at(i, j) += m[(r, c)];
                } else if p != q {
                    // upper triangle of an off-diagonal block maps to its transpose
                    *self.at(j, i) += m[(r, c)];
                }
            }
        }
    }

    /// In-place Cholesky into `out`; fails if not positive definite.
    fn cholesky_into(&self, shift: f64, out: &mut BandMatrix) -> bool {
        let (n, bw) = (self.n, self.bw);
        out.data.copy_from_slice(&self.data);
        for i in 0..n {
            *out.at(i, i) += shift;
        }
        let w = bw + 1;
        let data = &mut out.data;
        for j in 0..n {
            // row j holds columns j-bw..=j at offsets 0..=bw
            let lo = j.saturating_sub(bw);
            let row_j = j * w + (lo + bw - j);
            let len_j = j - lo;
            let d = data[row_j + len_j] - dot(&data[row_j..row_j + len_j], &data[row_j..row_j + len_j]);
            if d <= 0.0 || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            data[row_j + len_j] = d;
            for i in j + 1..(j + bw + 1).min(n) {
                let lo_i = i.saturating_sub(bw).max(lo);
                let len = j - lo_i;
                let a = i * w + (lo_i + bw - i);
                let b = j * w + (lo_i + bw - j);
                let s = data[a + len] - dot(&data[a..a + len], &data[b..b + len]);
                data[a + len] = s / d;
            }
        }
        true
    }

    fn cholesky_solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.get(i, k) * b[k];
            }
            b[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= self.get(k, i) * b[k];
            }
            b[i] = s / self.get(i, i);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Exact change of total energy when free nodes move by `step`, accumulated
/// element by element so that tiny decreases are not lost to cancellation.
fn energy_change(mesh: &PlyMesh, step: &[Vector3<f64>], gravity: &Vector3<f64>) -> f64 {
    let mut de = 0.0;
    for s in &mesh.springs {
        let (da, db) = (step[s.a], step[s.b]);
        if da == Vector3::zeros() && db == Vector3::zeros() {
            continue;
        }
        let d0 = mesh.positions[s.b] - mesh.positions[s.a];
        let dd = db - da;
        let d1 = d0 + dd;
        let (l0, l1) = (d0.norm(), d1.norm());
        let dl = if l0 + l1 > 0.0 { dd.dot(&(d0 + d1)) / (l0 + l1) } else { 0.0 };
        let s0 = (l0 - s.rest_length).max(0.0);
        let s1 = (l1 - s.rest_length).max(0.0);
        let ds = if s0 > 0.0 && s1 > 0.0 { dl } else { s1 - s0 };
        de += 0.5 * s.stiffness * ds * (s0 + s1);
    }
    for (i, d) in step.iter().enumerate() {
        de -= mesh.masses[i] * gravity.dot(d);
    }
    de
}

const LINE_SEARCH_STEPS: usize = 8;

/// Minimizes total energy over the free nodes.
///
/// Each iteration takes the gradient step preconditioned by the tension-only
/// Hessian plus an adaptive diagonal damping `λ·I`; a step is accepted only if
/// it does not increase the energy. The step is halved a few times before `λ`
/// grows, which pulls the step toward plain gradient descent. Clamped nodes are never moved. Starts from the
/// mesh's current positions.
pub fn solve_equilibrium(
    mesh: &mut PlyMesh,
    gravity: &Vector3<f64>,
    settings: &SolverSettings,
) -> Result<SolveReport, SimError> {
    let n_nodes = mesh.positions.len();
    // dof block index of each free node, in solve order
    let mut block = vec![usize::MAX; n_nodes];
    let mut free_nodes = Vec::new();
    for &id in &mesh.solve_order {
        if mesh.kinds[id] == NodeKind::Free {
            block[id] = free_nodes.len();
            free_nodes.push(id);
        }
    }
    let nb = free_nodes.len();
    let mut energy = total_energy(mesh, gravity);
    let mut report = SolveReport { iterations: 0, evaluations: 0, residual: 0.0, energy_trace: vec![energy] };
    if nb == 0 {
        return Ok(report);
    }
    let mut bw_blocks = 0;
    for s in &mesh.springs {
        let (pa, pb) = (block[s.a], block[s.b]);
        if pa != usize::MAX && pb != usize::MAX {
            bw_blocks = bw_blocks.max(pa.abs_diff(pb));
        }
    }
    let bw = 3 * bw_blocks + 2;
    let n = 3 * nb;
    let mut hess = BandMatrix::new(n, bw);
    let mut factor = BandMatrix::new(n, bw);
    let mut rhs = vec![0.0; n];
    let mut step = vec![Vector3::zeros(); n_nodes];
    let k_scale = mesh.springs.iter().fold(0.0f64, |m, s| m.max(s.stiffness)).max(1e-12);
    let mut lambda = 1e-3 * k_scale;
    let lambda_min = 1e-8 * k_scale;

    loop {
        let forces = node_forces(mesh, gravity);
        let residual = free_nodes.iter().fold(0.0f64, |m, &id| m.max(forces[id].norm()));
        report.residual = residual;
        if !residual.is_finite() {
            return Err(SimError::NotConverged { iterations: report.iterations, residual });
        }
        if residual <= settings.tol {
            return Ok(report);
        }
        if report.evaluations >= settings.max_iters {
            return Err(SimError::NotConverged { iterations: report.iterations, residual });
        }

        hess.clear();
        for s in &mesh.springs {
            let d = mesh.positions[s.b] - mesh.positions[s.a];
            let len = d.norm();
            if len <= s.rest_length || len == 0.0 {
                continue;
            }
            let u = d / len;
            let uu = u * u.transpose();
            let k = (uu + (Matrix3::identity() - uu) * (1.0 - s.rest_length / len)) * s.stiffness;
            let (pa, pb) = (block[s.a], block[s.b]);
            if pa != usize::MAX {
                hess.add_block(pa, pa, &k);
            }
            if pb != usize::MAX {
                hess.add_block(pb, pb, &k);
            }
            if pa != usize::MAX && pb != usize::MAX {
                let (p, q) = if pa > pb { (pa, pb) } else { (pb, pa) };
                hess.add_block(p, q, &(-k));
            }
        }

        loop {
            report.evaluations += 1;
            if report.evaluations > settings.max_iters {
                return Err(SimError::NotConverged { iterations: report.iterations, residual });
            }
            if !hess.cholesky_into(lambda, &mut factor) {
                lambda *= 10.0;
                continue;
            }
            for (b, &id) in free_nodes.iter().enumerate() {
                rhs[3 * b..3 * b + 3].copy_from_slice(forces[id].as_slice());
            }
            factor.cholesky_solve(&mut rhs);
            for (b, &id) in free_nodes.iter().enumerate() {
                step[id] = Vector3::new(rhs[3 * b], rhs[3 * b + 1], rhs[3 * b + 2]);
            }
            // backtracking along the damped Newton direction
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..LINE_SEARCH_STEPS {
                let de = energy_change(mesh, &step, gravity);
                if de <= 0.0 && de.is_finite() {
                    accepted = Some(de);
                    break;
                }
                scale *= 0.5;
                for &id in &free_nodes {
                    step[id] *= 0.5;
                }
            }
            if let Some(de) = accepted {
                for &id in &free_nodes {
                    mesh.positions[id] += step[id];
                }
                energy += de;
                report.iterations += 1;
                report.energy_trace.push(energy);
                lambda = if scale == 1.0 { (lambda * 0.1).max(lambda_min) } else { lambda };
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 * k_scale {
                return Err(SimError::NotConverged { iterations: report.iterations, residual });
            }
        }
    }
}

/// One semi-implicit Euler step with viscous damping `damping` (1/s).
/// Clamped nodes stay where the boundary put them.
pub fn step_dynamics(
    mesh: &mut PlyMesh,
    gravity: &Vector3<f64>,
    dt: f64,
    damping: f64,
) -> Result<(), SimError> {
    let forces = node_forces(mesh, gravity);
    for i in 0..mesh.positions.len() {
        if mesh.kinds[i].is_clamped() {
            mesh.velocities[i] = Vector3::zeros();
            continue;
        }
        let acc = forces[i] / mesh.masses[i] - mesh.velocities[i] * damping;
        mesh.velocities[i] += acc * dt;
        mesh.positions[i] += mesh.velocities[i] * dt;
        if !(mesh.positions[i].iter().all(|v| v.is_finite())) {
            return Err(SimError::Diverged);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RestConfiguration;

    fn tiny(nu: usize, nv: usize) -> PlyMaterialSpec {
        PlyMaterialSpec { grid_nu: nu, grid_nv: nv, ..Default::default() }
    }

    fn count(mesh: &PlyMesh, kind: SpringKind) -> usize {
        mesh.springs.iter().filter(|s| s.kind == kind).count()
    }

    #[test]
    fn spring_counts_for_small_grids() {
        let m = build_mesh(&tiny(2, 2), &GraspConfig::new(0, -0.45, 0.45)).unwrap();
        assert_eq!((count(&m, SpringKind::Structural), count(&m, SpringKind::Shear)), (4, 2));
        let m = build_mesh(&tiny(3, 3), &GraspConfig::new(0, -0.45, 0.45)).unwrap();
        assert_eq!((count(&m, SpringKind::Structural), count(&m, SpringKind::Shear)), (12, 8));
        assert!(m.springs.iter().all(|s| s.rest_length > 0.0));
    }

    #[test]
    fn corner_clips_clamp_whole_human_edge() {
        let m = build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(0, -0.45, 0.45)).unwrap();
        for i in 0..m.nu {
            assert_eq!(m.kinds[m.node(i, m.nv - 1)], NodeKind::HumanSegment);
            assert_eq!(m.kinds[m.node(i, 0)], NodeKind::RobotEdge);
        }
        assert_eq!(m.free_count(), m.nu * (m.nv - 2));
    }

    #[test]
    fn clamped_set_is_robot_row_plus_clip_span() {
        let m = build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(3, -0.35, 0.15)).unwrap();
        // columns spaced 5 cm: -0.35 -> 2, 0.15 -> 12
        let human: Vec<_> = (0..m.nu).filter(|&i| m.kinds[m.node(i, m.nv - 1)].is_clamped()).collect();
        assert_eq!(human, (2..=12).collect::<Vec<_>>());
        assert_eq!(m.clip_nodes, (m.node(2, m.nv - 1), m.node(12, m.nv - 1)));
        let clamped = m.kinds.iter().filter(|k| k.is_clamped()).count();
        assert_eq!(clamped, m.nu + 11);
    }

    #[test]
    fn coincident_clip_columns_rejected() {
        let err = build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(4, 0.0, 0.01)).unwrap_err();
        assert!(matches!(err, SimError::InvalidGrasp { id: 4, .. }));
        assert!(build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(4, 0.1, -0.1)).is_err());
        assert!(build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(4, -0.6, 0.1)).is_err());
    }

    #[test]
    fn mass_is_lumped_exactly() {
        let mat = PlyMaterialSpec::default();
        let m = build_mesh(&mat, &GraspConfig::new(0, -0.3, 0.3)).unwrap();
        let expected = mat.areal_density * mat.width * mat.length;
        assert!((m.total_mass() - expected).abs() < 1e-12);
    }

    #[test]
    fn tension_only_law() {
        assert!((spring_force(0.03, 0.04, 100.0) - 1.0).abs() < 1e-12);
        assert_eq!(spring_force(0.03, 0.02, 100.0), 0.0);
        assert_eq!(spring_force(0.03, 0.03, 100.0), 0.0);
        assert_eq!(spring_energy(0.03, 0.01, 100.0), 0.0);
    }

    #[test]
    fn boundary_placement() {
        let mut m = build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(0, -0.3, 0.3)).unwrap();
        set_boundary(&mut m, &RestConfiguration::default().desired);
        for &(i, _) in &m.segment_offsets {
            assert!((m.positions[i] - m.home[i]).norm() < 1e-15);
        }
        let s = DeformationState { gamma: 5f64.to_radians(), ..RestConfiguration::default().desired };
        set_boundary(&mut m, &s);
        let first = m.positions.clone();
        for &(i, off) in &m.segment_offsets {
            let p = m.positions[i] - Vector3::new(0.0, 0.6, 0.0);
            let angle = p.y.atan2(p.x);
            if off.x > 0.0 {
                assert!((angle - 5f64.to_radians()).abs() < 1e-12);
            }
            assert!((p.norm() - off.norm()).abs() < 1e-12);
        }
        set_boundary(&mut m, &s);
        assert_eq!(first, m.positions);
    }

    #[test]
    fn flat_pose_without_gravity_is_already_in_equilibrium() {
        let mut m = build_mesh(&PlyMaterialSpec::default(), &GraspConfig::new(0, -0.3, 0.3)).unwrap();
        set_boundary(&mut m, &RestConfiguration::default().desired);
        reset_free_nodes(&mut m, &Vector3::zeros());
        let r = solve_equilibrium(&mut m, &Vector3::zeros(), &SolverSettings::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.residual, 0.0);
    }

    fn chain() -> PlyMesh {
        let pos: Vec<_> = (0..5).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        let kinds = (0..5)
            .map(|i| if i == 0 || i == 4 { NodeKind::RobotEdge } else { NodeKind::Free })
            .collect();
        let springs = (0..4)
            .map(|i| Spring { a: i, b: i + 1, rest_length: 0.1, stiffness: 50.0, kind: SpringKind::Structural })
            .collect();
        PlyMesh::from_parts(pos, vec![0.05; 5], kinds, springs)
    }

    #[test]
    fn chain_sags_symmetrically() {
        let mut m = chain();
        let g = gravity_down(9.81);
        let r = solve_equilibrium(&mut m, &g, &SolverSettings { tol: 1e-10, max_iters: 500 }).unwrap();
        assert!(r.residual <= 1e-10);
        let z: Vec<f64> = m.positions.iter().map(|p| p.z).collect();
        assert!(z[2] < z[1] && z[2] < z[3] && z[1] < 0.0);
        assert!((z[1] - z[3]).abs() < 1e-12);
        assert!((m.positions[1].x + m.positions[3].x - 0.4).abs() < 1e-12);
        for w in r.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15 * w[0].abs());
        }
    }

    #[test]
    fn single_mass_free_fall_step() {
        let mat = PlyMaterialSpec { grid_nu: 2, grid_nv: 3, ..Default::default() };
        let mut m = build_mesh(&mat, &GraspConfig::new(0, -0.45, 0.45)).unwrap();
        set_boundary(&mut m, &RestConfiguration::default().desired);
        let g = gravity_down(9.81);
        let before = m.positions.clone();
        let dt = 1e-3;
        step_dynamics(&mut m, &g, dt, 0.0).unwrap();
        for i in 0..m.positions.len() {
            if m.kinds[i].is_clamped() {
                assert_eq!(m.positions[i], before[i]);
            } else {
                assert!((m.velocities[i] - g * dt).norm() < 1e-15);
                assert!((m.positions[i] - (before[i] + g * dt * dt)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_force_step_keeps_positions() {
        let mut m = build_mesh(&tiny(4, 4), &GraspConfig::new(0, -0.3, 0.3)).unwrap();
        set_boundary(&mut m, &RestConfiguration::default().desired);
        let before = m.positions.clone();
        step_dynamics(&mut m, &Vector3::zeros(), 1e-3, 1.0).unwrap();
        assert_eq!(before, m.positions);
    }

    #[test]
    fn damped_dynamics_settles_on_equilibrium() {
        let g = gravity_down(9.81);
        let mut dynamic = chain();
        let mut stat = chain();
        let tol = 1e-6;
        solve_equilibrium(&mut stat, &g, &SolverSettings { tol: 1e-12, max_iters: 500 }).unwrap();
        // stable: sqrt(2k/m) ~ 45 rad/s, dt well below 2/omega
        for _ in 0..200_000 {
            step_dynamics(&mut dynamic, &g, 1e-3, 5.0).unwrap();
            if max_free_residual(&dynamic, &g) < tol && dynamic.velocities.iter().all(|v| v.norm() < 1e-9) {
                break;
            }
        }
        assert!(max_free_residual(&dynamic, &g) <= 2.0 * tol);
        for (a, b) in dynamic.positions.iter().zip(&stat.positions) {
            assert!((a - b).norm() < 1e-6);
        }
    }
}

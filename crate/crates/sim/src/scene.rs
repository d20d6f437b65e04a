//! Labelled triangle meshes, anomaly edits and ray casting.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crloc_core::geom::rot_z;

use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Vector3<f64>; 3],
}

impl Triangle {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Self {
        Self { v: [a, b, c] }
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.v[1] - self.v[0]).cross(&(self.v[2] - self.v[0])).norm()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        (self.v[0] + self.v[1] + self.v[2]) / 3.0
    }

    /// Möller–Trumbore; distance along the (unit) ray, or `None`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let e1 = self.v[1] - self.v[0];
        let e2 = self.v[2] - self.v[0];
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 * e1.norm() * e2.norm() {
            return None;
        }
        let inv = 1.0 / det;
        let s = origin - self.v[0];
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > 1e-12).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub label: String,
    pub triangles: Vec<Triangle>,
}

/// Four-sided rectangle `corner + u a + v b`, `u, v ∈ [0, 1]`.
pub fn rectangle(label: &str, corner: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) -> Mesh {
    let (p0, p1, p2, p3) = (corner, corner + a, corner + a + b, corner + b);
    Mesh { label: label.to_string(), triangles: vec![Triangle::new(p0, p1, p2), Triangle::new(p0, p2, p3)] }
}

/// Closed box with outward-facing triangles.
pub fn box_mesh(label: &str, center: Vector3<f64>, half: Vector3<f64>, rotation: Matrix3<f64>) -> Mesh {
    let corner = |sx: f64, sy: f64, sz: f64| center + rotation * Vector3::new(sx * half.x, sy * half.y, sz * half.z);
    let c: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            let s = |bit: usize| if i & bit != 0 { 1.0 } else { -1.0 };
            corner(s(1), s(2), s(4))
        })
        .collect();
    const FACES: [[usize; 4]; 6] = [[0, 2, 6, 4], [1, 5, 7, 3], [0, 4, 5, 1], [2, 3, 7, 6], [0, 1, 3, 2], [4, 6, 7, 5]];
    let mut triangles = Vec::with_capacity(12);
    for f in FACES {
        let mut quad = [c[f[0]], c[f[1]], c[f[2]], c[f[3]]];
        let n = (quad[1] - quad[0]).cross(&(quad[2] - quad[0]));
        if n.dot(&(quad[0] - center)) < 0.0 {
            quad.swap(1, 3);
        }
        triangles.push(Triangle::new(quad[0], quad[1], quad[2]));
        triangles.push(Triangle::new(quad[0], quad[2], quad[3]));
    }
    Mesh { label: label.to_string(), triangles }
}

/// Edits that turn the modelled scene into the one the sensors see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneEdit {
    /// Axis-aligned box rotated by `yaw` about z.
    AddBox { label: String, center: [f64; 3], half_extents: [f64; 3], #[serde(default)] yaw: f64 },
    RemoveLabel { label: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimScene {
    pub meshes: Vec<Mesh>,
}

impl SimScene {
    pub fn new(meshes: Vec<Mesh>) -> Result<Self, SimError> {
        let scene = Self { meshes };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for m in &self.meshes {
            for (i, t) in m.triangles.iter().enumerate() {
                if !t.v.iter().all(|v| v.iter().all(|x| x.is_finite())) || !t.area().is_finite() {
                    return Err(SimError::Mesh(format!("triangle {i} of '{}' has non-finite vertices", m.label)));
                }
            }
        }
        Ok(())
    }

    pub fn triangles(&self) -> impl Iterator<Item = (&str, &Triangle)> {
        self.meshes.iter().flat_map(|m| m.triangles.iter().map(move |t| (m.label.as_str(), t)))
    }

    pub fn num_triangles(&self) -> usize {
        self.meshes.iter().map(|m| m.triangles.len()).sum()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles().map(|(_, t)| t.area()).sum()
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.meshes.iter().any(|m| m.label == label)
    }
}

/// Apply `edits` in order. Removing a label that is not present is an error.
pub fn apply_anomalies(scene: &SimScene, edits: &[SceneEdit]) -> Result<SimScene, SimError> {
    let mut out = scene.clone();
    for edit in edits {
        match edit {
            SceneEdit::AddBox { label, center, half_extents, yaw } => {
                if half_extents.iter().any(|h| !(*h > 0.0)) {
                    return Err(SimError::Config(format!("box '{label}' needs positive half extents")));
                }
                out.meshes.push(box_mesh(label, Vector3::from(*center), Vector3::from(*half_extents), rot_z(*yaw)));
            }
            SceneEdit::RemoveLabel { label } => {
                if !out.has_label(label) {
                    return Err(SimError::UnknownLabel(label.clone()));
                }
                out.meshes.retain(|m| &m.label != label);
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Closest hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    /// Index into the caster's triangle list (scene order).
    pub triangle: usize,
    /// Index into `SimScene::meshes`.
    pub mesh: usize,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self { min: Vector3::repeat(f64::INFINITY), max: Vector3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    /// Entry distance of the slab test, if the ray meets the box before `t_max`.
    fn entry(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let (mut lo, mut hi) = (0.0f64, t_max);
        for a in 0..3 {
            if inv_dir[a].is_infinite() {
                // parallel to this slab
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t0 = (self.min[a] - origin[a]) * inv_dir[a];
            let t1 = (self.max[a] - origin[a]) * inv_dir[a];
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
            if lo > hi * (1.0 + 1e-12) + 1e-12 {
                return None;
            }
        }
        Some(lo)
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over every triangle of a scene.
#[derive(Debug, Clone)]
pub struct RayCaster {
    triangles: Vec<Triangle>,
    mesh_of: Vec<usize>,
    /// Triangle indices in leaf order.
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

impl RayCaster {
    pub fn new(scene: &SimScene) -> Self {
        let mut triangles = Vec::new();
        let mut mesh_of = Vec::new();
        for (m, mesh) in scene.meshes.iter().enumerate() {
            triangles.extend_from_slice(&mesh.triangles);
            mesh_of.extend(std::iter::repeat_n(m, mesh.triangles.len()));
        }
        let mut caster = Self { order: (0..triangles.len()).collect(), triangles, mesh_of, nodes: Vec::new() };
        if !caster.triangles.is_empty() {
            let n = caster.triangles.len();
            caster.build(0, n);
        }
        caster
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut centers = Aabb::empty();
        for &i in &self.order[start..end] {
            for v in &self.triangles[i].v {
                bounds.grow(v);
            }
            centers.grow(&self.triangles[i].centroid());
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(BvhNode::Leaf { bounds, start, end });
            return id;
        }
        let axis = (centers.max - centers.min).imax();
        let tris = &self.triangles;
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            tris[a].centroid()[axis].total_cmp(&tris[b].centroid()[axis]).then(a.cmp(&b))
        });
        self.nodes.push(BvhNode::Leaf { bounds, start, end }); // placeholder
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = BvhNode::Inner { bounds, left, right };
        id
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Nearest hit within `max_range` along unit direction `dir`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let limit = best.map_or(max_range, |h| h.distance);
            if self.nodes[id].bounds().entry(origin, &inv, limit).is_none() {
                continue;
            }
            match self.nodes[id] {
                BvhNode::Leaf { start, end, .. } => {
                    for &i in &self.order[start..end] {
                        if let Some(t) = self.triangles[i].intersect(origin, dir) {
                            best = closer(best, t, i, self.mesh_of[i], max_range);
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// Linear scan over every triangle; the oracle for [`RayCaster::cast`].
    pub fn cast_brute_force(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<Hit> {
        let mut best = None;
        for (i, tri) in self.triangles.iter().enumerate() {
            if let Some(t) = tri.intersect(origin, dir) {
                best = closer(best, t, i, self.mesh_of[i], max_range);
            }
        }
        best
    }
}

fn closer(best: Option<Hit>, t: f64, triangle: usize, mesh: usize, max_range: f64) -> Option<Hit> {
    if t > max_range {
        return best;
    }
    match best {
        Some(h) if h.distance < t || (h.distance == t && h.triangle < triangle) => best,
        _ => Some(Hit { distance: t, triangle, mesh }),
    }
}

/// Room walls, floor and ceiling of an axis-aligned box, each its own label.
pub fn room(min: Vector3<f64>, max: Vector3<f64>) -> Vec<Mesh> {
    let d = max - min;
    let (x, y, z) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
    vec![
        rectangle("floor", min, y, x),
        rectangle("ceiling", Vector3::new(min.x, min.y, max.z), x, y),
        rectangle("wall_x_min", min, z, y),
        rectangle("wall_x_max", Vector3::new(max.x, min.y, min.z), y, z),
        rectangle("wall_y_min", min, x, z),
        rectangle("wall_y_max", Vector3::new(min.x, max.y, min.z), z, x),
    ]
}

/// The desk-scale default: a 1 m room with three obstacles.
pub fn default_scene() -> SimScene {
    let mut meshes = room(Vector3::new(-0.5, -0.5, 0.0), Vector3::new(0.5, 0.5, 1.0));
    meshes.push(box_mesh("crate", Vector3::new(0.32, 0.3, 0.15), Vector3::new(0.12, 0.14, 0.15), Matrix3::identity()));
    meshes.push(box_mesh("pillar", Vector3::new(-0.33, -0.25, 0.35), Vector3::new(0.07, 0.1, 0.35), rot_z(0.5)));
    meshes.push(box_mesh("shelf", Vector3::new(-0.3, 0.36, 0.75), Vector3::new(0.15, 0.1, 0.03), Matrix3::identity()));
    SimScene { meshes }
}

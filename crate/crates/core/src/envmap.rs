//! Prior map: a voxel-hashed point cloud with per-point normals, planarity
//! weights and prior covariances.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::ply::VertexTable;

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// `(σ₂ - σ₃) / σ₁` from the neighborhood PCA.
    pub planarity: f64,
    /// `Σ_nn`, in m².
    pub prior_covariance: Matrix3<f64>,
    /// Neighborhood collapsed to a point; normal is arbitrary.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapBuildOptions {
    pub voxel_size: f64,
    pub k_neighbors: usize,
    /// Interior point normals are oriented towards; `None` orients towards +z.
    pub viewpoint: Option<Vector3<f64>>,
    /// Isotropic standard deviation of `Σ_nn`, meters.
    pub prior_sigma: f64,
}

impl Default for MapBuildOptions {
    fn default() -> Self {
        Self { voxel_size: 0.05, k_neighbors: 20, viewpoint: None, prior_sigma: 0.001 }
    }
}

type VoxelKey = [i64; 3];

/// Nearest-neighbor hit.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub index: usize,
    pub point: &'a MapPoint,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct EnvironmentMap {
    voxel_size: f64,
    points: Vec<MapPoint>,
    cells: FxHashMap<VoxelKey, Vec<usize>>,
    bounds: KeyBounds,
}

/// Eigen square-roots `σ₁ ≥ σ₂ ≥ σ₃` and unit eigenvectors of a 3×3
/// covariance, sorted descending.
pub fn principal_axes(cov: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sig = order.map(|i| eig.eigenvalues[i].max(0.0).sqrt());
    let vecs = order.map(|i| eig.eigenvectors.column(i).normalize());
    (sig, vecs)
}

fn voxel_key(p: &Vector3<f64>, voxel: f64) -> VoxelKey {
    [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64]
}

/// Occupied keys lie inside `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
struct KeyBounds {
    lo: VoxelKey,
    hi: VoxelKey,
}

impl KeyBounds {
    /// Whether the cube of radius `r` around `c` contains every occupied key.
    fn covered_by(&self, c: VoxelKey, r: i64) -> bool {
        (0..3).all(|i| c[i] - r <= self.lo[i] && c[i] + r >= self.hi[i])
    }
}

/// Keys at Chebyshev distance exactly `r` from `c`, clipped to `b`.
fn shell(c: VoxelKey, r: i64, b: &KeyBounds, mut f: impl FnMut(VoxelKey)) {
    let range = |i: usize| ((c[i] - r).max(b.lo[i]), (c[i] + r).min(b.hi[i]));
    let ((x0, x1), (y0, y1), (z0, z1)) = (range(0), range(1), range(2));
    for x in x0..=x1 {
        for y in y0..=y1 {
            if (x - c[0]).abs() == r || (y - c[1]).abs() == r {
                for z in z0..=z1 {
                    f([x, y, z]);
                }
            } else {
                // r > 0 here: only the two z faces
                for z in [c[2] - r, c[2] + r] {
                    if z >= b.lo[2] && z <= b.hi[2] {
                        f([x, y, z]);
                    }
                }
            }
        }
    }
}

fn orient(normal: Vector3<f64>, position: &Vector3<f64>, viewpoint: Option<&Vector3<f64>>) -> Vector3<f64> {
    let flip = match viewpoint {
        Some(v) => normal.dot(&(v - position)) < 0.0,
        None => {
            let lead = [normal.z, normal.y, normal.x].into_iter().find(|c| c.abs() > 1e-12).unwrap_or(1.0);
            lead < 0.0
        }
    };
    if flip {
        -normal
    } else {
        normal
    }
}

impl EnvironmentMap {
    fn index(points: &[MapPoint], voxel_size: f64) -> FxHashMap<VoxelKey, Vec<usize>> {
        let mut cells: FxHashMap<VoxelKey, Vec<usize>> = FxHashMap::default();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_key(&p.position, voxel_size)).or_default().push(i);
        }
        cells
    }

    /// Wrap already-attributed points (e.g. an augmented PLY) without PCA.
    pub fn from_points(points: Vec<MapPoint>, voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0) {
            return Err(Error::InvalidMap(format!("voxel size must be positive, got {voxel_size}")));
        }
        let cells = Self::index(&points, voxel_size);
        let mut bounds = KeyBounds { lo: [i64::MAX; 3], hi: [i64::MIN; 3] };
        for key in cells.keys() {
            for i in 0..3 {
                bounds.lo[i] = bounds.lo[i].min(key[i]);
                bounds.hi[i] = bounds.hi[i].max(key[i]);
            }
        }
        Ok(Self { voxel_size, points, cells, bounds })
    }

    /// Build from raw positions, estimating normals and planarity by PCA
    /// over each point's `k` nearest neighbors (the point included).
    pub fn build(positions: &[Vector3<f64>], options: &MapBuildOptions) -> Result<Self> {
        let k = options.k_neighbors;
        if k < 3 {
            return Err(Error::InvalidMap("need at least 3 neighbors for PCA".into()));
        }
        if positions.len() < k + 1 {
            return Err(Error::InvalidMap(format!("need at least {} points, got {}", k + 1, positions.len())));
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMap("non-finite point coordinates".into()));
        }
        let prior = Matrix3::identity() * options.prior_sigma.powi(2);
        let raw: Vec<MapPoint> = positions
            .iter()
            .map(|&position| MapPoint {
                position,
                normal: Vector3::z(),
                planarity: 0.0,
                prior_covariance: prior,
                degenerate: false,
            })
            .collect();
        let mut map = Self::from_points(raw, options.voxel_size)?;
        let attributes: Vec<(Vector3<f64>, f64, bool)> = (0..map.points.len())
            .into_par_iter()
            .map(|i| {
                let p = map.points[i].position;
                let nbrs = map.k_nearest(&p, k);
                let mean = nbrs.iter().fold(Vector3::zeros(), |acc, n| acc + n.point.position) / nbrs.len() as f64;
                let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, n| {
                    let d = n.point.position - mean;
                    acc + d * d.transpose()
                }) / nbrs.len() as f64;
                let (sig, vecs) = principal_axes(&cov);
                let scale = mean.norm().max(1.0);
                if sig[0] <= 1e-12 * scale {
                    return (Vector3::z(), 0.0, true);
                }
                let normal = orient(vecs[2], &p, options.viewpoint.as_ref());
                let planarity = ((sig[1] - sig[2]) / sig[0]).clamp(0.0, 1.0);
                (normal, planarity, false)
            })
            .collect();
        for (mp, (normal, planarity, degenerate)) in map.points.iter_mut().zip(attributes) {
            mp.normal = normal;
            mp.planarity = planarity;
            mp.degenerate = degenerate;
        }
        Ok(map)
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Cell key a position hashes to.
    pub fn cell_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        voxel_key(p, self.voxel_size)
    }

    pub fn cell_points(&self, key: &[i64; 3]) -> impl Iterator<Item = &MapPoint> {
        self.cells.get(key).into_iter().flatten().map(|&i| &self.points[i])
    }

    /// Cells in the shell of Chebyshev radius `r`.
    fn shell_size(r: i64) -> usize {
        if r == 0 {
            1
        } else {
            ((2 * r + 1).pow(3) - (2 * r - 1).pow(3)) as usize
        }
    }

    /// `(squared distance, index)` of every point, for far-away queries where
    /// walking empty shells costs more than a scan.
    fn scan_all(&self, query: &Vector3<f64>) -> Vec<(f64, usize)> {
        self.points.iter().enumerate().map(|(i, p)| ((p.position - query).norm_squared(), i)).collect()
    }

    /// Euclidean-nearest map point within `max_radius`. Ties go to the lower
    /// point index, so results match a brute-force scan exactly.
    pub fn query_nn(&self, query: &Vector3<f64>, max_radius: f64) -> Option<Neighbor<'_>> {
        if self.points.is_empty() || !(max_radius >= 0.0) {
            return None;
        }
        let better = |best: Option<(f64, usize)>, d2: f64, i: usize| best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && i < bi));
        let center = voxel_key(query, self.voxel_size);
        let max_shell = (max_radius / self.voxel_size).ceil().min(1e15) as i64 + 1;
        let mut best: Option<(f64, usize)> = None;
        for r in 0..=max_shell {
            if Self::shell_size(r) > self.cells.len() {
                best = None;
                for (d2, i) in self.scan_all(query) {
                    if better(best, d2, i) {
                        best = Some((d2, i));
                    }
                }
                break;
            }
            shell(center, r, &self.bounds, |key| {
                if let Some(ids) = self.cells.get(&key) {
                    for &i in ids {
                        let d2 = (self.points[i].position - query).norm_squared();
                        if better(best, d2, i) {
                            best = Some((d2, i));
                        }
                    }
                }
            });
            // anything outside shells 0..=r is at least r voxels away
            let covered = r as f64 * self.voxel_size;
            if let Some((bd, _)) = best {
                if bd.sqrt() < covered {
                    break;
                }
            }
            if covered > max_radius || self.bounds.covered_by(center, r) {
                break;
            }
        }
        best.and_then(|(d2, i)| {
            let distance = d2.sqrt();
            (distance <= max_radius).then_some(Neighbor { index: i, point: &self.points[i], distance })
        })
    }

    /// The `k` nearest points, nearest first (ties by index).
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor<'_>> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let center = voxel_key(query, self.voxel_size);
        let mut found: Vec<(f64, usize)> = Vec::new();
        let mut r = 0i64;
        loop {
            if Self::shell_size(r) > self.cells.len() {
                found = self.scan_all(query);
                break;
            }
            shell(center, r, &self.bounds, |key| {
                if let Some(ids) = self.cells.get(&key) {
                    found.extend(ids.iter().map(|&i| ((self.points[i].position - query).norm_squared(), i)));
                }
            });
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let covered = r as f64 * self.voxel_size;
                if found[k - 1].0.sqrt() < covered || self.bounds.covered_by(center, r) {
                    break;
                }
            }
            r += 1;
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(d2, i)| Neighbor { index: i, point: &self.points[i], distance: d2.sqrt() }).collect()
    }

    pub fn to_table(&self) -> VertexTable {
        let col = |f: &dyn Fn(&MapPoint) -> f64| self.points.iter().map(f).collect::<Vec<_>>();
        let mut t = VertexTable::default();
        t.push_column("x", col(&|p| p.position.x));
        t.push_column("y", col(&|p| p.position.y));
        t.push_column("z", col(&|p| p.position.z));
        t.push_column("nx", col(&|p| p.normal.x));
        t.push_column("ny", col(&|p| p.normal.y));
        t.push_column("nz", col(&|p| p.normal.z));
        t.push_column("planarity", col(&|p| p.planarity));
        t
    }

    /// Load a map from a PLY table. Tables carrying `nx, ny, nz, planarity`
    /// are taken as already augmented; anything else is built by PCA.
    pub fn from_table(table: &VertexTable, options: &MapBuildOptions) -> Result<Self> {
        let positions = table.vec3("x", "y", "z").ok_or_else(|| Error::InvalidMap("PLY lacks x/y/z".into()))?;
        match (table.vec3("nx", "ny", "nz"), table.column("planarity")) {
            (Some(normals), Some(planarity)) => {
                let prior = Matrix3::identity() * options.prior_sigma.powi(2);
                let points = positions
                    .into_iter()
                    .zip(normals)
                    .zip(planarity)
                    .map(|((position, n), &alpha)| {
                        let norm = n.norm();
                        MapPoint {
                            position,
                            normal: if norm > 0.0 { n / norm } else { Vector3::z() },
                            planarity: alpha.clamp(0.0, 1.0),
                            prior_covariance: prior,
                            degenerate: norm == 0.0,
                        }
                    })
                    .collect();
                Self::from_points(points, options.voxel_size)
            }
            _ => Self::build(&positions, options),
        }
    }
}

//! Poisson-disk sampling of scene surfaces for prior maps.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{SimScene, Triangle};
use crate::SimError;

/// Dart-throwing attempts per `spacing²` of surface area. Enough to get
/// close to the jamming density of random sequential disk packing.
const ATTEMPTS_PER_CELL: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub position: Vector3<f64>,
    /// Index into the flattened triangle list of the scene.
    pub triangle: usize,
}

fn sample_triangle(t: &Triangle, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let (r1, r2): (f64, f64) = (rng.random(), rng.random());
    let a = r1.sqrt();
    t.v[0] * (1.0 - a) + t.v[1] * (a * (1.0 - r2)) + t.v[2] * (a * r2)
}

/// Samples no closer than `spacing` to each other, drawn uniformly over the
/// scene's surface area by dart throwing.
pub fn make_prior_map(scene: &SimScene, spacing: f64, seed: u64) -> Result<Vec<SurfaceSample>, SimError> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(SimError::Config(format!("sample spacing must be positive, got {spacing}")));
    }
    let tris: Vec<&Triangle> = scene.triangles().map(|(_, t)| t).collect();
    let mut cumulative = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for t in &tris {
        total += t.area();
        cumulative.push(total);
    }
    if tris.is_empty() || total <= 0.0 {
        return Ok(Vec::new());
    }
    let attempts = (ATTEMPTS_PER_CELL * total / (spacing * spacing)).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut out: Vec<SurfaceSample> = Vec::new();
    let key = |p: &Vector3<f64>| p.map(|x| (x / spacing).floor() as i64);
    let r2 = spacing * spacing;
    for _ in 0..attempts {
        let u = rng.random::<f64>() * total;
        let i = cumulative.partition_point(|&c| c <= u).min(tris.len() - 1);
        let p = sample_triangle(tris[i], &mut rng);
        let k = key(&p);
        let mut free = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(cell) = grid.get(&[k.x + dx, k.y + dy, k.z + dz]) {
                        if cell.iter().any(|&j| (out[j].position - p).norm_squared() < r2) {
                            free = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if free {
            grid.entry([k.x, k.y, k.z]).or_default().push(out.len());
            out.push(SurfaceSample { position: p, triangle: i });
        }
    }
    Ok(out)
}

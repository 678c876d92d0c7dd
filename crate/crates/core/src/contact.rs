//! Contact points and the voxel-space searches the drag loss relies on.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{distance_sq, voxel_center, voxel_of, BinaryGrid, Point3, PointCloud, VoxelIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Drawn from the hidden surface of a known ground-truth grid.
    SampledFromGroundTruth { seed: u64 },
    /// Supplied by an upstream estimator.
    External { source: String },
}

/// Contact points in unit-cube coordinates.
///
/// On disk this is a JSON object:
/// `{"provenance": {...}, "points": [[x, y, z], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSet {
    pub provenance: Provenance,
    pub points: Vec<Point3>,
}

impl ContactSet {
    pub fn new(points: Vec<Point3>, provenance: Provenance) -> Result<Self> {
        let set = Self { provenance, points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidParameter(format!("contact {p:?} lies outside the unit cube")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }
}

/// Surface voxels of `gt` outside the visible region.
pub fn hidden_surface(gt: &BinaryGrid, visibility: &BinaryGrid) -> Vec<VoxelIndex> {
    gt.surface_voxels().into_iter().filter(|&v| !visibility.get(v)).collect()
}

/// Draws `count` distinct hidden-surface voxel centers uniformly at random.
pub fn sample_contacts(gt: &BinaryGrid, visibility: &BinaryGrid, count: usize, seed: u64) -> Result<ContactSet> {
    if gt.n() != visibility.n() {
        return Err(Error::Shape("ground truth and visibility resolutions differ".into()));
    }
    let hidden = hidden_surface(gt, visibility);
    if hidden.is_empty() {
        return Err(Error::EmptyHiddenSurface);
    }
    if count > hidden.len() {
        return Err(Error::NotEnoughPoints { requested: count, available: hidden.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points =
        index::sample(&mut rng, hidden.len(), count).into_iter().map(|i| voxel_center(gt.n(), hidden[i])).collect();
    ContactSet::new(points, Provenance::SampledFromGroundTruth { seed })
}

/// Greedy farthest point sampling starting from a seed-chosen point.
pub fn farthest_point_sample(points: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..points.len());
    let picked = farthest_point_indices(&points.points, k, start)?;
    Ok(PointCloud::new(picked.into_iter().map(|i| points.points[i]).collect()))
}

/// Indices chosen by FPS from `start`; ties go to the lowest index.
pub fn farthest_point_indices(points: &[Point3], k: usize, start: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::NotEnoughPoints { requested: k, available: points.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![start];
    let mut taken = vec![false; points.len()];
    taken[start] = true;
    let mut min_d2: Vec<f64> = points.iter().map(|&p| distance_sq(p, points[start])).collect();
    while chosen.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if !taken[i] && best.map_or(true, |b| min_d2[i] > min_d2[b]) {
                best = Some(i);
            }
        }
        let best = best.expect("k <= len leaves a candidate");
        taken[best] = true;
        chosen.push(best);
        let anchor = points[best];
        for (d, &p) in min_d2.iter_mut().zip(points) {
            *d = d.min(distance_sq(p, anchor));
        }
    }
    Ok(chosen)
}

/// Occupied voxel whose center is closest to `p`, with its distance.
/// Equidistant candidates resolve to the lexicographically smallest index.
pub fn nearest_occupied(reference: &BinaryGrid, p: Point3) -> Result<(VoxelIndex, f64)> {
    if reference.is_empty() {
        return Err(Error::EmptyGrid("reference shape has no occupied voxel"));
    }
    let n = reference.n();
    let home = voxel_of(n, p);
    let mut best: Option<(f64, VoxelIndex)> = None;
    for r in 0..n {
        // every center in shell r sits at least (r - 0.5)/n from p along one axis
        let bound = (r as f64 - 0.5).max(0.0) / n as f64;
        if let Some((d2, _)) = best {
            if bound * bound > d2 {
                break;
            }
        }
        let lo = |a: usize| home[a].saturating_sub(r);
        let hi = |a: usize| (home[a] + r).min(n - 1);
        for i in lo(0)..=hi(0) {
            for j in lo(1)..=hi(1) {
                for k in lo(2)..=hi(2) {
                    let v = [i, j, k];
                    let cheb = (0..3).map(|a| v[a].abs_diff(home[a])).max().unwrap();
                    if cheb != r || !reference.get(v) {
                        continue;
                    }
                    let d2 = distance_sq(p, voxel_center(n, v));
                    let better = match best {
                        None => true,
                        Some((bd, bv)) => d2 < bd || (d2 == bd && v < bv),
                    };
                    if better {
                        best = Some((d2, v));
                    }
                }
            }
        }
    }
    let (d2, v) = best.expect("non-empty grid has a nearest voxel");
    Ok((v, d2.sqrt()))
}

//! Geometry metrics: Chamfer distance, F-score, unit-cube normalization and
//! contact residuals.
//!
//! Chamfer is the mean of the two directed mean nearest-neighbor Euclidean
//! distances (not squared). Absolute values depend on that convention.

use serde::{Deserialize, Serialize};

use crate::contact::{nearest_occupied, ContactSet};
use crate::error::{Error, Result};
use crate::voxel::{distance_sq, BinaryGrid, OccupancyGrid, Point3, PointCloud};

/// F-score thresholds reported for every run.
pub const F_THRESHOLDS: [f64; 3] = [0.01, 0.02, 0.05];

/// Exact nearest-neighbor queries over a uniform bucket grid.
#[derive(Debug, Clone)]
pub struct NearestIndex<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        assert!(!points.is_empty(), "index needs at least one point");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(1 << 10));
        let mut index = Self { points, origin: lo, cell, dims, starts: Vec::new(), order: Vec::new() };
        let total = dims.iter().product::<usize>();
        let mut counts = vec![0usize; total + 1];
        let keys: Vec<usize> = points.iter().map(|&p| index.flat(index.bucket(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        index.starts = counts;
        index.order = order;
        index
    }

    fn bucket(&self, p: Point3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, b: [usize; 3]) -> usize {
        (b[0] * self.dims[1] + b[1]) * self.dims[2] + b[2]
    }

    /// Smallest squared distance from `q` to the indexed points.
    pub fn nearest_sq(&self, q: Point3) -> f64 {
        let home = self.bucket(q);
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            if r > 0 {
                // points in shell r are at least (r-1)*cell from q along one axis,
                // measured from q's clamped bucket; clamping only moves q farther
                let bound = (r as f64 - 1.0) * self.cell;
                if bound > 0.0 && bound * bound > best {
                    break;
                }
            }
            let lo = |a: usize| home[a].saturating_sub(r);
            let hi = |a: usize| (home[a] + r).min(self.dims[a] - 1);
            for i in lo(0)..=hi(0) {
                for j in lo(1)..=hi(1) {
                    for k in lo(2)..=hi(2) {
                        let b = [i, j, k];
                        if (0..3).map(|a| b[a].abs_diff(home[a])).max().unwrap() != r {
                            continue;
                        }
                        let f = self.flat(b);
                        for &pi in &self.order[self.starts[f]..self.starts[f + 1]] {
                            best = best.min(distance_sq(q, self.points[pi]));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Nearest-neighbor distance from every point of `from` to `to`.
pub fn nearest_distances(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    let index = NearestIndex::new(to);
    from.iter().map(|&p| index.nearest_sq(p).sqrt()).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = nearest_distances(&a.points, &b.points);
    let ba = nearest_distances(&b.points, &a.points);
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

fn f_from_distances(pred_to_gt: &[f64], gt_to_pred: &[f64], tau: f64) -> f64 {
    let precision = pred_to_gt.iter().filter(|&&d| d <= tau).count() as f64 / pred_to_gt.len() as f64;
    let recall = gt_to_pred.iter().filter(|&&d| d <= tau).count() as f64 / gt_to_pred.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f_score(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("F-score threshold must be positive, got {tau}")));
    }
    let pg = nearest_distances(&pred.points, &gt.points);
    let gp = nearest_distances(&gt.points, &pred.points);
    Ok(f_from_distances(&pg, &gp, tau))
}

/// Isotropic map sending a bounding box to a centered box in `[0,1]^3`
/// whose longest edge has length 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn fit(points: &PointCloud) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &points.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(extent > 0.0) {
            return Err(Error::ZeroExtent);
        }
        Ok(Self { center: [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a])), scale: 1.0 / extent })
    }

    pub fn apply(&self, points: &PointCloud) -> PointCloud {
        PointCloud::new(
            points.points.iter().map(|p| [0, 1, 2].map(|a| (p[a] - self.center[a]) * self.scale + 0.5)).collect(),
        )
    }
}

pub fn normalize_to_unit_cube(points: &PointCloud) -> Result<PointCloud> {
    Ok(Normalization::fit(points)?.apply(points))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Geometry metrics for one generated shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chamfer: f64,
    pub f_001: f64,
    pub f_002: f64,
    pub f_005: f64,
    /// Median over contacts of the distance to the nearest occupied voxel
    /// center of the prediction, in unit-cube units.
    pub contact_residual_median: f64,
    /// The prediction binarized to nothing; metric fields hold sentinels.
    pub failed: bool,
}

/// Chamfer and residual sentinel for a failed generation: the cube diagonal.
pub const FAILURE_DISTANCE: f64 = 1.732_050_807_568_877_2;

impl MetricsReport {
    pub fn failure() -> Self {
        Self {
            chamfer: FAILURE_DISTANCE,
            f_001: 0.0,
            f_002: 0.0,
            f_005: 0.0,
            contact_residual_median: FAILURE_DISTANCE,
            failed: true,
        }
    }

    pub fn f_scores(&self) -> [(f64, f64); 3] {
        [(F_THRESHOLDS[0], self.f_001), (F_THRESHOLDS[1], self.f_002), (F_THRESHOLDS[2], self.f_005)]
    }
}

/// Distance from each contact to the nearest occupied voxel center of `shape`.
pub fn contact_residuals(shape: &BinaryGrid, contacts: &ContactSet) -> Result<Vec<f64>> {
    contacts.points.iter().map(|&p| Ok(nearest_occupied(shape, p)?.1)).collect()
}

/// Compares a generated occupancy grid against ground truth. Both surfaces
/// are normalized with the transform that normalizes the ground truth.
pub fn evaluate_run(
    output: &OccupancyGrid,
    gt: &BinaryGrid,
    contacts: &ContactSet,
    threshold: f64,
) -> Result<MetricsReport> {
    if output.n() != gt.n() {
        return Err(Error::Shape(format!("output is {}^3, ground truth {}^3", output.n(), gt.n())));
    }
    let predicted = output.binarize(threshold);
    if predicted.is_empty() {
        return Ok(MetricsReport::failure());
    }
    let gt_surface = gt.extract_surface()?;
    let pred_surface = predicted.extract_surface()?;
    let norm = Normalization::fit(&gt_surface)?;
    let (gt_n, pred_n) = (norm.apply(&gt_surface), norm.apply(&pred_surface));
    let pg = nearest_distances(&pred_n.points, &gt_n.points);
    let gp = nearest_distances(&gt_n.points, &pred_n.points);
    let residual = if contacts.is_empty() { 0.0 } else { median(&contact_residuals(&predicted, contacts)?) };
    Ok(MetricsReport {
        chamfer: 0.5 * (mean(&pg) + mean(&gp)),
        f_001: f_from_distances(&pg, &gp, F_THRESHOLDS[0]),
        f_002: f_from_distances(&pg, &gp, F_THRESHOLDS[1]),
        f_005: f_from_distances(&pg, &gp, F_THRESHOLDS[2]),
        contact_residual_median: residual,
        failed: false,
    })
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are excluded by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0; // ln C(n, 0)
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (ln_choose + ln_half_n).exp();
        }
    }
    tail.min(1.0)
}

#![allow(dead_code)]

use contact_flow::contact::{ContactSet, Provenance};
use contact_flow::decoder::{DecoderParams, UPSAMPLE};
use contact_flow::flow::MixtureFlow;
use contact_flow::guidance::{GuidanceConfig, ReferenceShape};
use contact_flow::scenario::{GridSpec, LibraryEntry, ModelSpec, ScenarioSpec, SeedSpec, Side, VisibilitySpec};
use contact_flow::voxel::{Aabb, Axis, LatentGrid, OccupancyGrid, Point3, Primitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_latent(rng: &mut ChaCha8Rng, n: usize, channels: usize, scale: f64) -> LatentGrid {
    let data = (0..n * n * n * channels).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    LatentGrid::from_vec(n, channels, data).unwrap()
}

/// A small random guidance problem: mixture, decoder, random reference and
/// random contacts.
pub struct Instance {
    pub model: MixtureFlow,
    pub decoder: DecoderParams,
    pub reference: ReferenceShape,
    pub contacts: ContactSet,
    pub cfg: GuidanceConfig,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, channels: usize, k: usize, radius: usize) -> Instance {
    let means = (0..k).map(|_| gaussian_latent(rng, n, channels, 0.6)).collect();
    let weights = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let model = MixtureFlow::new(means, weights, 0.5).unwrap();
    let weights: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.2..1.0)).collect();
    let decoder = DecoderParams::new(weights, rng.gen_range(1.0..3.0)).unwrap();
    let big = n * UPSAMPLE;
    let reference = loop {
        let occ = OccupancyGrid::from_vec(big, (0..big * big * big).map(|_| rng.gen()).collect()).unwrap();
        if let Ok(r) = ReferenceShape::from_occupancy(occ, 0.5, 0) {
            break r;
        }
    };
    let points: Vec<Point3> = (0..3).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let contacts = ContactSet::new(points, Provenance::External { source: "test".into() }).unwrap();
    let cfg = GuidanceConfig { radius, ..GuidanceConfig::default() };
    Instance { model, decoder, reference, contacts, cfg }
}

/// Test-size scenario: 16^3 occupancy, two boxes sharing their visible half.
pub fn tiny_spec() -> ScenarioSpec {
    let slab = |x_max: f64| Aabb { min: [0.25, 0.25, 0.25], max: [x_max, 0.75, 0.75] };
    ScenarioSpec {
        name: "tiny".into(),
        description: "test-size depth pair".into(),
        true_shape: 0,
        ambiguous: false,
        contact_count: 6,
        grid: GridSpec { latent: 4, channels: 2 },
        model: ModelSpec { sigma: 0.3, sharpness: 0.05, gain: 4.0 },
        visibility: VisibilitySpec { axis: Axis::X, offset: 0.5, visible: Side::Below },
        seeds: SeedSpec { reference: 11, contacts: 12, runs: (0..50).collect() },
        guidance: GuidanceConfig { radius: 3, ..GuidanceConfig::default() },
        library: vec![
            LibraryEntry { label: "deep".into(), weight: 0.4, shape: Primitive::Box(slab(1.0)) },
            LibraryEntry { label: "shallow".into(), weight: 0.6, shape: Primitive::Box(slab(0.75)) },
        ],
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn dist_sq(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Double loop over all pairs.
pub fn brute_one_sided(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    from.iter()
        .map(|&a| {
            let mut best = f64::INFINITY;
            for &b in to {
                let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect()
}

pub fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let ab = brute_one_sided(a, b);
    let ba = brute_one_sided(b, a);
    0.5 * (ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64)
}

pub fn brute_f_score(pred: &[Point3], gt: &[Point3], tau: f64) -> f64 {
    let p = brute_one_sided(pred, gt).iter().filter(|&&d| d <= tau).count() as f64 / pred.len() as f64;
    let r = brute_one_sided(gt, pred).iter().filter(|&&d| d <= tau).count() as f64 / gt.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Quadratic greedy farthest point sampling, lowest index on ties.
pub fn brute_fps(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, &p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| dist_sq(p, points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

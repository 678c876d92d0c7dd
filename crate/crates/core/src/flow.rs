//! Analytic flow-matching model over latent grids.
//!
//! The target is an isotropic Gaussian mixture `x0 ~ sum_k w_k N(mu_k, sigma^2 I)`,
//! the base is `x1 ~ N(0, I)`, and the path is `x_t = (1-t) x0 + t x1`.
//! Conditioned on component `k`, `(x0, x_t)` is jointly Gaussian with
//!
//! ```text
//! x_t | k            ~ N((1-t) mu_k, s_t^2 I),   s_t^2 = (1-t)^2 sigma^2 + t^2
//! E[x0 | x_t, k]     = mu_k + (1-t) sigma^2 / s_t^2 * (x_t - (1-t) mu_k)
//! E[x1 | x_t, k]     =            t / s_t^2         * (x_t - (1-t) mu_k)
//! ```
//!
//! so the per-component velocity `E[x1 - x0 | x_t, k]` is
//!
//! ```text
//! v_k(x) = a (x - (1-t) mu_k) - mu_k = a x - b mu_k,
//! a = (t - (1-t) sigma^2) / s_t^2,   b = 1 + (1-t) a.
//! ```
//!
//! The marginal field is `v(x) = a x - b mu_bar` with `mu_bar = sum_k r_k mu_k`
//! and `r_k` the softmax responsibilities of `x` under the component
//! marginals. Because every component shares `s_t`, its Jacobian is
//!
//! ```text
//! dv/dx = a I - c * sum_k r_k (mu_k - mu_bar)(mu_k - mu_bar)^T,   c = b (1-t) / s_t^2,
//! ```
//!
//! which is symmetric, so the VJP applies the same matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::voxel::{BinaryGrid, LatentGrid};

/// Visible half of the volume together with what is observed there.
#[derive(Debug, Clone)]
pub struct VisibilityCondition {
    pub mask: BinaryGrid,
    /// Observed occupancy over the whole grid; only masked voxels are read.
    pub observation: Vec<f64>,
    pub sharpness: f64,
}

impl VisibilityCondition {
    pub fn new(mask: BinaryGrid, observation: Vec<f64>, sharpness: f64) -> Result<Self> {
        if mask.is_empty() || mask.is_full() {
            return Err(Error::InvalidParameter("visibility mask must be neither empty nor full".into()));
        }
        if observation.len() != mask.as_slice().len() {
            return Err(Error::Shape("observation and mask sizes differ".into()));
        }
        if !(sharpness >= 0.0) {
            return Err(Error::InvalidParameter(format!("sharpness must be >= 0, got {sharpness}")));
        }
        Ok(Self { mask, observation, sharpness })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFlow {
    means: Vec<LatentGrid>,
    weights: Vec<f64>,
    sigma: f64,
}

/// Everything the velocity and its VJP share at one `(x_t, t)`.
#[derive(Debug, Clone)]
pub struct FlowPoint {
    pub t: f64,
    pub responsibilities: Vec<f64>,
    pub mean: LatentGrid,
    pub velocity: LatentGrid,
    a: f64,
    c: f64,
}

impl FlowPoint {
    /// One-step prediction `x_t - t v`.
    pub fn predict_x0(&self, x: &LatentGrid) -> LatentGrid {
        let mut x0 = x.clone();
        x0.add_scaled(&self.velocity, -self.t);
        x0
    }
}

impl MixtureFlow {
    pub fn new(means: Vec<LatentGrid>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::InvalidParameter(format!("{} means but {} weights", means.len(), weights.len())));
        }
        if means.iter().any(|m| !m.same_shape(&means[0]) || !m.is_finite()) {
            return Err(Error::InvalidParameter("means must be finite and share one shape".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidParameter("weights sum to zero".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { means, weights: weights.into_iter().map(|w| w / total).collect(), sigma })
    }

    pub fn means(&self) -> &[LatentGrid] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Reweights components by how well their decoded means explain the
    /// visible observation: `w_k' ~ w_k exp(-gamma * sum_V (decode(mu_k) - o)^2)`.
    pub fn condition(&self, cond: &VisibilityCondition, decoder: &DecoderParams) -> Result<Self> {
        let mut log_mass = Vec::with_capacity(self.components());
        let mut any_survives = false;
        for (mu, &w) in self.means.iter().zip(&self.weights) {
            let decoded = decoder.decode(mu)?;
            if decoded.as_slice().len() != cond.mask.as_slice().len() {
                return Err(Error::Shape("visibility mask resolution differs from decoder output".into()));
            }
            let sse: f64 = decoded
                .as_slice()
                .iter()
                .zip(&cond.observation)
                .zip(cond.mask.as_slice())
                .filter(|(_, &m)| m)
                .map(|((s, o), _)| (s - o) * (s - o))
                .sum();
            let penalty = cond.sharpness * sse;
            any_survives |= w * (-penalty).exp() > 0.0;
            log_mass.push(w.ln() - penalty);
        }
        if !any_survives {
            return Err(Error::ConditionInconsistent);
        }
        let weights = softmax(&log_mass).ok_or(Error::ConditionInconsistent)?;
        Ok(Self { means: self.means.clone(), weights, sigma: self.sigma })
    }

    fn coefficients(&self, t: f64) -> Result<(f64, f64, f64, f64)> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidTime(t));
        }
        let s2 = (1.0 - t).powi(2) * self.sigma * self.sigma + t * t;
        let a = (t - (1.0 - t) * self.sigma * self.sigma) / s2;
        let b = 1.0 + (1.0 - t) * a;
        let c = b * (1.0 - t) / s2;
        Ok((s2, a, b, c))
    }

    /// Posterior component probabilities of `x` at time `t`.
    pub fn responsibilities(&self, x: &LatentGrid, t: f64) -> Result<Vec<f64>> {
        let (s2, ..) = self.coefficients(t)?;
        self.check_shape(x)?;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(mu, &w)| {
                let d2: f64 = x
                    .as_slice()
                    .iter()
                    .zip(mu.as_slice())
                    .map(|(xv, m)| {
                        let d = xv - (1.0 - t) * m;
                        d * d
                    })
                    .sum();
                w.ln() - d2 / (2.0 * s2)
            })
            .collect();
        softmax(&logits).ok_or(Error::ResponsibilityUnderflow)
    }

    /// Evaluates the field at `(x, t)`, keeping what the VJP needs.
    pub fn at(&self, x: &LatentGrid, t: f64) -> Result<FlowPoint> {
        let (_, a, b, c) = self.coefficients(t)?;
        let responsibilities = self.responsibilities(x, t)?;
        let mut mean = LatentGrid::zeros(x.n(), x.channels());
        for (mu, &r) in self.means.iter().zip(&responsibilities) {
            if r > 0.0 {
                mean.add_scaled(mu, r);
            }
        }
        let mut velocity = x.clone();
        velocity.scale(a);
        velocity.add_scaled(&mean, -b);
        Ok(FlowPoint { t, responsibilities, mean, velocity, a, c })
    }

    pub fn velocity(&self, x: &LatentGrid, t: f64) -> Result<LatentGrid> {
        Ok(self.at(x, t)?.velocity)
    }

    /// `x_t - t v_t(x_t)`, the posterior mean `E[x0 | x_t]`.
    pub fn predict_x0(&self, x: &LatentGrid, t: f64) -> Result<LatentGrid> {
        Ok(self.at(x, t)?.predict_x0(x))
    }

    /// `(dv/dx)^T u` at a point already evaluated with [`MixtureFlow::at`].
    pub fn vjp_at(&self, point: &FlowPoint, cotangent: &LatentGrid) -> LatentGrid {
        let mut out = cotangent.clone();
        out.scale(point.a);
        for (mu, &r) in self.means.iter().zip(&point.responsibilities) {
            if r == 0.0 {
                continue;
            }
            let mut centered = mu.clone();
            centered.add_scaled(&point.mean, -1.0);
            let proj = centered.dot(cotangent);
            out.add_scaled(&centered, -point.c * r * proj);
        }
        out
    }

    pub fn velocity_vjp(&self, x: &LatentGrid, t: f64, cotangent: &LatentGrid) -> Result<LatentGrid> {
        self.check_shape(cotangent)?;
        let point = self.at(x, t)?;
        Ok(self.vjp_at(&point, cotangent))
    }

    /// Standard normal latent, deterministic in `seed`.
    pub fn sample_base(&self, seed: u64) -> LatentGrid {
        let shape = &self.means[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        LatentGrid::from_vec(shape.n(), shape.channels(), data).expect("shape taken from a valid mean")
    }

    /// Index of the component mean closest to `x`.
    pub fn nearest_component(&self, x: &LatentGrid) -> (usize, f64) {
        self.means
            .iter()
            .enumerate()
            .map(|(k, mu)| (k, x.distance_sq(mu).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one component")
    }

    fn check_shape(&self, x: &LatentGrid) -> Result<()> {
        if !x.same_shape(&self.means[0]) {
            return Err(Error::Shape(format!(
                "latent is {}^3 x {}, model expects {}^3 x {}",
                x.n(),
                x.channels(),
                self.means[0].n(),
                self.means[0].channels()
            )));
        }
        Ok(())
    }
}

/// Log-sum-exp normalized softmax; `None` if no logit is finite.
fn softmax(logits: &[f64]) -> Option<Vec<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Some(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_latent(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> LatentGrid {
        LatentGrid::from_vec(n, c, (0..n * n * n * c).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, k: usize, n: usize, c: usize) -> MixtureFlow {
        let means = (0..k).map(|_| random_latent(rng, n, c, 1.0)).collect();
        let weights = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        MixtureFlow::new(means, weights, 0.3).unwrap()
    }

    // Posterior mean computed from first principles: Gaussian conditioning
    // of x0 on x_t per component, mixed with Bayes-rule weights.
    fn oracle_posterior_mean(model: &MixtureFlow, x: &LatentGrid, t: f64) -> Vec<f64> {
        let sigma2 = model.sigma() * model.sigma();
        let var_xt = (1.0 - t) * (1.0 - t) * sigma2 + t * t;
        let cov = (1.0 - t) * sigma2;
        let log_post: Vec<f64> = model
            .means()
            .iter()
            .zip(model.weights())
            .map(|(mu, w)| {
                let mut q = 0.0;
                for (xv, m) in x.as_slice().iter().zip(mu.as_slice()) {
                    q += (xv - (1.0 - t) * m).powi(2);
                }
                w.ln() - 0.5 * q / var_xt
            })
            .collect();
        let m = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_post.iter().map(|l| (l - m).exp()).sum();
        let mut out = vec![0.0; x.len()];
        for (mu, l) in model.means().iter().zip(&log_post) {
            let p = (l - m).exp() / z;
            for (o, (xv, mv)) in out.iter_mut().zip(x.as_slice().iter().zip(mu.as_slice())) {
                *o += p * (mv + cov / var_xt * (xv - (1.0 - t) * mv));
            }
        }
        out
    }

    #[test]
    fn single_sharp_component_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = random_latent(&mut rng, 2, 2, 1.0);
        let model = MixtureFlow::new(vec![mu.clone()], vec![1.0], 1e-9).unwrap();
        let x = random_latent(&mut rng, 2, 2, 2.0);
        for t in [0.1, 0.5, 1.0] {
            let v = model.velocity(&x, t).unwrap();
            for ((vv, xv), m) in v.as_slice().iter().zip(x.as_slice()).zip(mu.as_slice()) {
                assert!((vv - (xv - m) / t).abs() < 1e-9);
            }
            let x0 = model.predict_x0(&x, t).unwrap();
            assert!(x0.distance_sq(&mu).sqrt() < 1e-8);
        }
    }

    #[test]
    fn posterior_mean_identity_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let model = random_model(&mut rng, 3, 2, 2);
            let x = random_latent(&mut rng, 2, 2, 1.5);
            let t = rng.gen_range(0.01..=1.0);
            let x0 = model.predict_x0(&x, t).unwrap();
            for (a, b) in x0.as_slice().iter().zip(oracle_posterior_mean(&model, &x, t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prediction_tends_to_identity_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 2, 2, 2);
        let x = model.means()[0].clone();
        let x0 = model.predict_x0(&x, 1e-3).unwrap();
        let worst = x0.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < model.sigma() * 1e-2, "worst deviation {worst}");
    }

    #[test]
    fn saturated_responsibility_reduces_to_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_latent(&mut rng, 2, 2, 1.0);
        let mut b = a.clone();
        b.as_mut_slice().iter_mut().for_each(|v| *v += 5.0);
        let pair = MixtureFlow::new(vec![a.clone(), b], vec![0.5, 0.5], 0.05).unwrap();
        let single = MixtureFlow::new(vec![a.clone()], vec![1.0], 0.05).unwrap();
        let t = 0.3;
        let mut x = a.clone();
        x.scale(1.0 - t);
        x.add_scaled(&random_latent(&mut rng, 2, 2, 0.1), 1.0);
        let (vp, vs) = (pair.velocity(&x, t).unwrap(), single.velocity(&x, t).unwrap());
        for (p, s) in vp.as_slice().iter().zip(vs.as_slice()) {
            assert!((p - s).abs() < 1e-6);
        }
    }

    #[test]
    fn single_component_vjp_is_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = 0.2;
        let model = MixtureFlow::new(vec![random_latent(&mut rng, 2, 1, 1.0)], vec![1.0], sigma).unwrap();
        let x = random_latent(&mut rng, 2, 1, 1.0);
        let u = random_latent(&mut rng, 2, 1, 1.0);
        let t = 0.4;
        let s2 = (1.0 - t) * (1.0 - t) * sigma * sigma + t * t;
        let a = (t - (1.0 - t) * sigma * sigma) / s2;
        let g = model.velocity_vjp(&x, t, &u).unwrap();
        for (gv, uv) in g.as_slice().iter().zip(u.as_slice()) {
            assert!((gv - a * uv).abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let model = random_model(&mut rng, 3, 2, 2);
            let x = random_latent(&mut rng, 2, 2, 0.8);
            let u = random_latent(&mut rng, 2, 2, 1.0);
            let t = rng.gen_range(0.2..0.9);
            let analytic = model.velocity_vjp(&x, t, &u).unwrap();
            let h = 1e-5;
            let mut fd = vec![0.0; x.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[i] -= h;
                let vp = model.velocity(&xp, t).unwrap();
                let vm = model.velocity(&xm, t).unwrap();
                // column i of the Jacobian, dotted with u
                *slot = vp
                    .as_slice()
                    .iter()
                    .zip(vm.as_slice())
                    .zip(u.as_slice())
                    .map(|((p, m), uu)| (p - m) / (2.0 * h) * uu)
                    .sum();
            }
            let err: f64 = fd.iter().zip(analytic.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / scale < 1e-5, "relative error {}", err / scale);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = random_model(&mut rng, 3, 2, 2);
        let x = random_latent(&mut rng, 2, 2, 1.0);
        let g = model.velocity_vjp(&x, 0.5, &LatentGrid::zeros(2, 2)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn base_samples_are_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = random_model(&mut rng, 1, 2, 2);
        assert_eq!(model.sample_base(3), model.sample_base(3));
        assert_ne!(model.sample_base(3), model.sample_base(4));
    }

    #[test]
    fn base_sample_mean_obeys_clt_bound() {
        let model = MixtureFlow::new(vec![LatentGrid::zeros(1, 4)], vec![1.0], 0.1).unwrap();
        let draws = 10_000;
        let mut sum = [0.0f64; 4];
        for seed in 0..draws {
            for (s, v) in sum.iter_mut().zip(model.sample_base(seed).as_slice()) {
                *s += v;
            }
        }
        for s in sum {
            assert!((s / draws as f64).abs() < 4.0 / (draws as f64).sqrt());
        }
    }

    #[test]
    fn time_zero_is_rejected() {
        let model = MixtureFlow::new(vec![LatentGrid::zeros(1, 1)], vec![1.0], 0.1).unwrap();
        assert!(matches!(model.velocity(&LatentGrid::zeros(1, 1), 0.0), Err(Error::InvalidTime(_))));
    }

    mod conditioning {
        use super::*;
        use crate::voxel::BinaryGrid;

        fn left_half(n: usize) -> BinaryGrid {
            BinaryGrid::from_fn(n, |[i, _, _]| i < n / 2)
        }

        #[test]
        fn zero_sharpness_keeps_weights() {
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let decoder = DecoderParams::uniform(2, 4.0).unwrap();
            let model = random_model(&mut rng, 3, 2, 2);
            let cond = VisibilityCondition::new(left_half(8), vec![0.3; 512], 0.0).unwrap();
            let c = model.condition(&cond, &decoder).unwrap();
            for (a, b) in c.weights().iter().zip(model.weights()) {
                assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn exact_observation_dominates_when_sharp() {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let decoder = DecoderParams::uniform(2, 4.0).unwrap();
            let model = random_model(&mut rng, 3, 2, 2);
            let obs = decoder.decode(&model.means()[1]).unwrap().as_slice().to_vec();
            let cond = VisibilityCondition::new(left_half(8), obs, 1e6).unwrap();
            let c = model.condition(&cond, &decoder).unwrap();
            assert!((c.weights()[1] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ambiguous_pair_splits_prior_mass() {
            let decoder = DecoderParams::uniform(1, 4.0).unwrap();
            let n = 2;
            // identical on the visible (i = 0) layer, different on i = 1
            let a = LatentGrid::from_vec(n, 1, vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
            let b = LatentGrid::from_vec(n, 1, vec![1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0]).unwrap();
            let other = LatentGrid::from_vec(n, 1, vec![-1.0; 8]).unwrap();
            let model = MixtureFlow::new(vec![a.clone(), b, other], vec![0.2, 0.5, 0.3], 0.05).unwrap();
            let obs = decoder.decode(&a).unwrap().as_slice().to_vec();
            // only fine voxels whose interpolation stencil stays in coarse layer 0
            let mask = BinaryGrid::from_fn(8, |[i, _, _]| i < 2);
            let gamma = 2.0;
            let cond = VisibilityCondition::new(mask.clone(), obs.clone(), gamma).unwrap();
            let c = model.condition(&cond, &decoder).unwrap();
            // closed form
            let sse = |m: &LatentGrid| -> f64 {
                let d = decoder.decode(m).unwrap();
                d.as_slice()
                    .iter()
                    .zip(&obs)
                    .zip(mask.as_slice())
                    .filter(|(_, &k)| k)
                    .map(|((s, o), _)| (s - o).powi(2))
                    .sum()
            };
            let raw: Vec<f64> =
                model.means().iter().zip(model.weights()).map(|(m, w)| w * (-gamma * sse(m)).exp()).collect();
            let z: f64 = raw.iter().sum();
            for (got, want) in c.weights().iter().zip(&raw) {
                assert!((got - want / z).abs() < 1e-12);
            }
            assert!((c.weights()[0] / c.weights()[1] - 0.2 / 0.5).abs() < 1e-12);
        }

        #[test]
        fn hopeless_observation_is_reported() {
            let decoder = DecoderParams::uniform(1, 4.0).unwrap();
            let model =
                MixtureFlow::new(vec![LatentGrid::from_vec(2, 1, vec![-3.0; 8]).unwrap()], vec![1.0], 0.05).unwrap();
            let cond = VisibilityCondition::new(left_half(8), vec![1.0; 512], 1e3).unwrap();
            assert!(matches!(model.condition(&cond, &decoder), Err(Error::ConditionInconsistent)));
        }
    }
}

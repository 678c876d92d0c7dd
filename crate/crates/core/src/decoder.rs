//! Analytic latent-to-occupancy decoder and its matching encoder.
//!
//! Decoding contracts the latent channels against a unit vector `w`,
//! trilinearly upsamples the resulting `n^3` logit grid to `N^3 = (4n)^3`
//! voxel centers, and squashes with a logistic of gain `beta`:
//!
//! ```text
//! s = sigmoid(beta * U(<x, w>))
//! ```
//!
//! Coarse cell `i` is centered at `(i+0.5)/n`, fine voxel `I` at `(I+0.5)/N`;
//! the upsampler interpolates between coarse centers and holds the edge value
//! past the outermost centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{BinaryGrid, LatentGrid, OccupancyGrid, Point3};

/// Fine voxels per coarse cell along each axis.
pub const UPSAMPLE: usize = 4;

/// Clamp applied to pooled occupancies before the logit transform.
pub const ENCODE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    weights: Vec<f64>,
    gain: f64,
}

impl DecoderParams {
    /// `weights` is normalized to unit length; `gain` must be positive.
    pub fn new(weights: Vec<f64>, gain: f64) -> Result<Self> {
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if weights.is_empty() || !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidParameter("decoder weights must be a nonzero finite vector".into()));
        }
        if !(gain > 0.0) || !gain.is_finite() {
            return Err(Error::InvalidParameter(format!("decoder gain must be positive, got {gain}")));
        }
        Ok(Self { weights: weights.into_iter().map(|w| w / norm).collect(), gain })
    }

    /// Uniform channel mixing `w = (1, ..., 1)/sqrt(C)`.
    pub fn uniform(channels: usize, gain: f64) -> Result<Self> {
        Self::new(vec![1.0; channels], gain)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Restores the unit-norm invariant after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.weights, self.gain)
    }

    /// Decodes `x` to occupancy at resolution `4n`.
    pub fn decode(&self, x: &LatentGrid) -> Result<OccupancyGrid> {
        let logits = self.upsampled_logits(x)?;
        let n_fine = x.n() * UPSAMPLE;
        let beta = self.gain;
        OccupancyGrid::from_vec(n_fine, logits.into_iter().map(|l| sigmoid(beta * l)).collect())
    }

    /// Transpose-Jacobian product of [`DecoderParams::decode`] at `x`.
    pub fn decode_vjp(&self, x: &LatentGrid, cotangent: &[f64]) -> Result<LatentGrid> {
        let n = x.n();
        let n_fine = n * UPSAMPLE;
        if cotangent.len() != n_fine.pow(3) {
            return Err(Error::Shape(format!("cotangent has {} entries, expected {n_fine}^3", cotangent.len())));
        }
        let beta = self.gain;
        let fine_logits = self.upsampled_logits(x)?;
        // d s / d l = beta * s * (1 - s)
        let fine_grad: Vec<f64> = fine_logits
            .iter()
            .zip(cotangent)
            .map(|(&l, &g)| {
                let s = sigmoid(beta * l);
                g * beta * s * (1.0 - s)
            })
            .collect();
        let coarse_grad = upsample_transpose(&fine_grad, n, n_fine);
        let c = self.channels();
        let mut out = Vec::with_capacity(n.pow(3) * c);
        for g in coarse_grad {
            out.extend(self.weights.iter().map(|w| g * w));
        }
        LatentGrid::from_vec(n, c, out)
    }

    /// Average-pools `s` over `4^3` blocks, clamps to `[eps, 1-eps]`, maps
    /// through `logit(p)/beta` and spreads the scalar over channels along `w`.
    pub fn encode(&self, s: &BinaryGrid) -> Result<LatentGrid> {
        if s.is_empty() {
            return Err(Error::EmptyGrid("cannot encode an empty shape"));
        }
        let n_fine = s.n();
        if n_fine % UPSAMPLE != 0 {
            return Err(Error::Shape(format!("resolution {n_fine} is not a multiple of {UPSAMPLE}")));
        }
        let n = n_fine / UPSAMPLE;
        let block = (UPSAMPLE * UPSAMPLE * UPSAMPLE) as f64;
        let mut out = Vec::with_capacity(n.pow(3) * self.channels());
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut filled = 0usize;
                    for a in 0..UPSAMPLE {
                        for b in 0..UPSAMPLE {
                            for c in 0..UPSAMPLE {
                                filled += s.get([i * UPSAMPLE + a, j * UPSAMPLE + b, k * UPSAMPLE + c]) as usize;
                            }
                        }
                    }
                    let p = (filled as f64 / block).clamp(ENCODE_EPS, 1.0 - ENCODE_EPS);
                    let level = logit(p) / self.gain;
                    out.extend(self.weights.iter().map(|w| level * w));
                }
            }
        }
        LatentGrid::from_vec(n, self.channels(), out)
    }

    /// Channel contraction `<x, w>` per coarse cell.
    pub fn contract(&self, x: &LatentGrid) -> Result<Vec<f64>> {
        if x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "latent has {} channels, decoder expects {}",
                x.channels(),
                self.channels()
            )));
        }
        Ok(x.as_slice()
            .chunks_exact(self.channels())
            .map(|cell| cell.iter().zip(&self.weights).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Upsampled logit at an arbitrary cube point, using the same
    /// interpolation rule as [`DecoderParams::decode`].
    pub fn logit_at(&self, x: &LatentGrid, p: Point3) -> Result<f64> {
        let coarse = self.contract(x)?;
        let n = x.n();
        let taps: Vec<Tap> = p.iter().map(|&c| Tap::at(c * n as f64 - 0.5, n)).collect();
        let mut acc = 0.0;
        for (ia, wa) in taps[0].pairs() {
            for (ib, wb) in taps[1].pairs() {
                for (ic, wc) in taps[2].pairs() {
                    acc += wa * wb * wc * coarse[(ia * n + ib) * n + ic];
                }
            }
        }
        Ok(acc)
    }

    fn upsampled_logits(&self, x: &LatentGrid) -> Result<Vec<f64>> {
        if !x.is_finite() {
            return Err(Error::InvalidParameter("latent contains non-finite values".into()));
        }
        let coarse = self.contract(x)?;
        Ok(upsample(&coarse, x.n(), x.n() * UPSAMPLE))
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Two-point linear interpolation stencil along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

impl Tap {
    /// Stencil at continuous coarse coordinate `q` (cell centers at integers).
    fn at(q: f64, n: usize) -> Self {
        let q = q.clamp(0.0, (n - 1) as f64);
        let lo = (q.floor() as usize).min(n.saturating_sub(2));
        let hi = (lo + 1).min(n - 1);
        Self { lo, hi, frac: if hi == lo { 0.0 } else { q - lo as f64 } }
    }

    fn pairs(self) -> [(usize, f64); 2] {
        [(self.lo, 1.0 - self.frac), (self.hi, self.frac)]
    }
}

fn taps(n: usize, n_fine: usize) -> Vec<Tap> {
    (0..n_fine).map(|i| Tap::at((i as f64 + 0.5) * n as f64 / n_fine as f64 - 0.5, n)).collect()
}

/// Resample `src` (shape `dims`, x-major) along `axis` to `out_len` using `taps`.
fn resample_axis(src: &[f64], dims: [usize; 3], axis: usize, out_len: usize, taps: &[Tap]) -> Vec<f64> {
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let mut out = vec![0.0; out_dims.iter().product()];
    let src_stride = [dims[1] * dims[2], dims[2], 1];
    let dst_stride = [out_dims[1] * out_dims[2], out_dims[2], 1];
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let mut idx = [a, b, c];
                let tap = taps[idx[axis]];
                idx[axis] = tap.lo;
                let lo = idx[0] * src_stride[0] + idx[1] * src_stride[1] + idx[2];
                idx[axis] = tap.hi;
                let hi = idx[0] * src_stride[0] + idx[1] * src_stride[1] + idx[2];
                out[a * dst_stride[0] + b * dst_stride[1] + c] = (1.0 - tap.frac) * src[lo] + tap.frac * src[hi];
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`]: scatter `src` (shape with `axis` of length
/// `taps.len()`) back onto `in_len` coarse samples.
fn resample_axis_transpose(src: &[f64], dims: [usize; 3], axis: usize, in_len: usize, taps: &[Tap]) -> Vec<f64> {
    let mut in_dims = dims;
    in_dims[axis] = in_len;
    let mut out = vec![0.0; in_dims.iter().product()];
    let in_stride = [in_dims[1] * in_dims[2], in_dims[2], 1];
    let src_stride = [dims[1] * dims[2], dims[2], 1];
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                let g = src[a * src_stride[0] + b * src_stride[1] + c];
                let mut idx = [a, b, c];
                let tap = taps[idx[axis]];
                idx[axis] = tap.lo;
                out[idx[0] * in_stride[0] + idx[1] * in_stride[1] + idx[2]] += (1.0 - tap.frac) * g;
                idx[axis] = tap.hi;
                out[idx[0] * in_stride[0] + idx[1] * in_stride[1] + idx[2]] += tap.frac * g;
            }
        }
    }
    out
}

fn upsample(coarse: &[f64], n: usize, n_fine: usize) -> Vec<f64> {
    let t = taps(n, n_fine);
    let a = resample_axis(coarse, [n, n, n], 0, n_fine, &t);
    let b = resample_axis(&a, [n_fine, n, n], 1, n_fine, &t);
    resample_axis(&b, [n_fine, n_fine, n], 2, n_fine, &t)
}

fn upsample_transpose(fine: &[f64], n: usize, n_fine: usize) -> Vec<f64> {
    let t = taps(n, n_fine);
    let b = resample_axis_transpose(fine, [n_fine, n_fine, n_fine], 2, n, &t);
    let a = resample_axis_transpose(&b, [n_fine, n_fine, n], 1, n, &t);
    resample_axis_transpose(&a, [n_fine, n, n], 0, n, &t)
}

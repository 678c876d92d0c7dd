//! Contact-driven guidance for the flow sampler.
//!
//! The energy of a one-step prediction `x0_hat` is a drag loss in occupancy
//! space: around every contact point, the predicted occupancy should look
//! like the reference shape's occupancy around the reference voxel nearest
//! to that contact,
//!
//! ```text
//! J = sum_contacts sum_{d in cube(r)} (s_hat(p_c + d) - s_ref(p_s + d))^2,
//! ```
//!
//! with `s_hat = decode(x0_hat)`. Its gradient with respect to the current
//! state follows the chain `x_t -> x0_hat = x_t - t v(x_t) -> s_hat -> J`:
//!
//! ```text
//! grad_xt J = (I - t dv/dx)^T grad_x0 J.
//! ```
//!
//! Each guided update is rescaled so that its norm equals `|grad_x0 J|`
//! (attenuation) and weighted by a per-stage schedule.

use serde::{Deserialize, Serialize};

use crate::contact::{nearest_occupied, ContactSet};
use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::flow::{FlowPoint, MixtureFlow};
use crate::voxel::{voxel_of, BinaryGrid, LatentGrid, OccupancyGrid, VoxelIndex};

/// Gradient norms below this suppress guidance for the step.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Piecewise-constant weight per early/middle/late stage.
    #[default]
    Staged,
    /// `t / (1 - t)`; unbounded at `t = 1`.
    Covg,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(Schedule::Staged),
            "covg" => Ok(Schedule::Covg),
            other => Err(Error::InvalidParameter(format!("unknown schedule {other:?}"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Staged => "staged",
            Schedule::Covg => "covg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Number of denoising steps.
    pub steps: usize,
    /// Steps in the early, middle and late stage; must sum to `steps`.
    pub stage_lengths: [usize; 3],
    pub stage_lambdas: [f64; 3],
    pub schedule: Schedule,
    /// Guided updates per timestep.
    pub recurrence: usize,
    /// Half-width of the drag neighborhood in voxels.
    pub radius: usize,
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Last time on the uniform grid from 1 down.
    pub t_min: f64,
    /// Keep full latent states in trajectory records.
    #[serde(skip)]
    pub keep_states: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 12,
            stage_lengths: [4, 4, 4],
            stage_lambdas: [0.2, 1.0, 0.5],
            schedule: Schedule::Staged,
            recurrence: 3,
            radius: 10,
            threshold: 0.5,
            aggregation: Aggregation::Sum,
            t_min: 1e-3,
            keep_states: false,
        }
    }
}

impl GuidanceConfig {
    /// Defaults with `steps` split into near-equal thirds.
    pub fn with_steps(steps: usize) -> Self {
        let third = steps / 3;
        let stage_lengths = [third, steps - 2 * third, third];
        Self { steps, stage_lengths, ..Self::default() }
    }

    pub fn unguided(mut self) -> Self {
        self.stage_lambdas = [0.0; 3];
        self.schedule = Schedule::Staged;
        self
    }

    pub fn validate(&self, grid_n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.steps < 3 {
            return bad(format!("need at least 3 steps, got {}", self.steps));
        }
        if self.stage_lengths.iter().sum::<usize>() != self.steps {
            return bad(format!("stage lengths {:?} do not partition {} steps", self.stage_lengths, self.steps));
        }
        if self.stage_lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad(format!("stage weights must be finite and >= 0: {:?}", self.stage_lambdas));
        }
        if self.recurrence == 0 {
            return bad("recurrence must be at least 1".into());
        }
        if 2 * self.radius + 1 > grid_n {
            return bad(format!("neighborhood 2*{}+1 exceeds grid size {grid_n}", self.radius));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0,1)", self.threshold));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad(format!("t_min {} outside (0,1)", self.t_min));
        }
        Ok(())
    }

    /// Uniform grid `t_0 = 1 > t_1 > ... > t_steps = t_min`.
    pub fn timesteps(&self) -> Vec<f64> {
        let h = (1.0 - self.t_min) / self.steps as f64;
        (0..=self.steps).map(|i| if i == self.steps { self.t_min } else { 1.0 - i as f64 * h }).collect()
    }

    /// Schedule weight for step `index` at time `t`.
    pub fn schedule_weight(&self, index: usize, t: f64) -> f64 {
        match self.schedule {
            Schedule::Staged => {
                let mut end = 0;
                for (len, lambda) in self.stage_lengths.iter().zip(self.stage_lambdas) {
                    end += len;
                    if index < end {
                        return lambda;
                    }
                }
                self.stage_lambdas[2]
            }
            Schedule::Covg => t / (1.0 - t),
        }
    }

    pub fn is_unguided(&self) -> bool {
        self.schedule == Schedule::Staged && self.stage_lambdas.iter().all(|&l| l == 0.0)
    }
}

/// The unguided sample that guidance drags from.
#[derive(Debug, Clone)]
pub struct ReferenceShape {
    pub occupancy: OccupancyGrid,
    pub binary: BinaryGrid,
    pub seed: u64,
}

impl ReferenceShape {
    pub fn from_occupancy(occupancy: OccupancyGrid, threshold: f64, seed: u64) -> Result<Self> {
        let binary = occupancy.binarize(threshold);
        if binary.is_empty() {
            return Err(Error::EmptyGrid("reference generation produced no occupied voxel"));
        }
        Ok(Self { occupancy, binary, seed })
    }
}

/// Voxel pair a contact drags between: the contact voxel and the reference
/// voxel nearest to the contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DragAnchor {
    pub contact: VoxelIndex,
    pub source: VoxelIndex,
}

pub fn drag_anchors(contacts: &ContactSet, reference: &ReferenceShape) -> Result<Vec<DragAnchor>> {
    if contacts.is_empty() {
        return Err(Error::InvalidParameter("guidance needs at least one contact".into()));
    }
    let n = reference.binary.n();
    contacts
        .points
        .iter()
        .map(|&p| Ok(DragAnchor { contact: voxel_of(n, p), source: nearest_occupied(&reference.binary, p)?.0 }))
        .collect()
}

/// Drag loss and its gradient with respect to the predicted occupancy.
/// Offsets that leave the grid on either side are skipped.
pub fn drag_loss_anchored(
    predicted: &OccupancyGrid,
    reference: &OccupancyGrid,
    anchors: &[DragAnchor],
    radius: usize,
    aggregation: Aggregation,
) -> (f64, Vec<f64>) {
    let n = predicted.n() as isize;
    let r = radius as isize;
    let s_hat = predicted.as_slice();
    let s_ref = reference.as_slice();
    let mut loss = 0.0;
    let mut grad = vec![0.0; s_hat.len()];
    let inside = |v: isize| (0..n).contains(&v);
    for anchor in anchors {
        let c = anchor.contact.map(|v| v as isize);
        let s = anchor.source.map(|v| v as isize);
        for di in -r..=r {
            let (ci, si) = (c[0] + di, s[0] + di);
            if !inside(ci) || !inside(si) {
                continue;
            }
            for dj in -r..=r {
                let (cj, sj) = (c[1] + dj, s[1] + dj);
                if !inside(cj) || !inside(sj) {
                    continue;
                }
                for dk in -r..=r {
                    let (ck, sk) = (c[2] + dk, s[2] + dk);
                    if !inside(ck) || !inside(sk) {
                        continue;
                    }
                    let at = ((ci * n + cj) * n + ck) as usize;
                    let from = ((si * n + sj) * n + sk) as usize;
                    let diff = s_hat[at] - s_ref[from];
                    loss += diff * diff;
                    grad[at] += 2.0 * diff;
                }
            }
        }
    }
    if aggregation == Aggregation::Mean && !anchors.is_empty() {
        let k = anchors.len() as f64;
        loss /= k;
        grad.iter_mut().for_each(|g| *g /= k);
    }
    (loss, grad)
}

/// Drag loss from raw contacts; locates the reference anchors first.
pub fn drag_loss(
    predicted: &OccupancyGrid,
    contacts: &ContactSet,
    reference: &ReferenceShape,
    cfg: &GuidanceConfig,
) -> Result<(f64, Vec<f64>)> {
    if predicted.n() != reference.occupancy.n() {
        return Err(Error::Shape("prediction and reference resolutions differ".into()));
    }
    let anchors = drag_anchors(contacts, reference)?;
    Ok(drag_loss_anchored(predicted, &reference.occupancy, &anchors, cfg.radius, cfg.aggregation))
}

/// Energy and both gradients at one state.
#[derive(Debug, Clone)]
pub struct EnergyGradient {
    pub energy: f64,
    pub grad_xt: LatentGrid,
    pub grad_x0: LatentGrid,
    pub x0: LatentGrid,
    pub flow: FlowPoint,
}

/// Everything guidance needs besides the state: flow, decoder, drag targets.
#[derive(Debug, Clone)]
pub struct Energy<'a> {
    pub model: &'a MixtureFlow,
    pub decoder: &'a DecoderParams,
    pub reference: &'a ReferenceShape,
    pub anchors: Vec<DragAnchor>,
    pub radius: usize,
    pub aggregation: Aggregation,
}

impl<'a> Energy<'a> {
    pub fn new(
        model: &'a MixtureFlow,
        decoder: &'a DecoderParams,
        contacts: &ContactSet,
        reference: &'a ReferenceShape,
        cfg: &GuidanceConfig,
    ) -> Result<Self> {
        let grid_n = model.means()[0].n() * crate::decoder::UPSAMPLE;
        if reference.occupancy.n() != grid_n {
            return Err(Error::Shape(format!(
                "reference is {}^3 but decoder produces {grid_n}^3",
                reference.occupancy.n()
            )));
        }
        Ok(Self {
            model,
            decoder,
            reference,
            anchors: drag_anchors(contacts, reference)?,
            radius: cfg.radius,
            aggregation: cfg.aggregation,
        })
    }

    /// `J(decode(x0))` for an already-denoised latent.
    pub fn of_prediction(&self, x0: &LatentGrid) -> Result<f64> {
        let s = self.decoder.decode(x0)?;
        Ok(drag_loss_anchored(&s, &self.reference.occupancy, &self.anchors, self.radius, self.aggregation).0)
    }

    /// `J(x_t - t v(x_t))`.
    pub fn at_state(&self, x: &LatentGrid, t: f64) -> Result<f64> {
        self.of_prediction(&self.model.predict_x0(x, t)?)
    }

    pub fn gradient(&self, x: &LatentGrid, t: f64) -> Result<EnergyGradient> {
        let flow = self.model.at(x, t)?;
        let x0 = flow.predict_x0(x);
        let s = self.decoder.decode(&x0)?;
        let (energy, grad_s) =
            drag_loss_anchored(&s, &self.reference.occupancy, &self.anchors, self.radius, self.aggregation);
        let grad_x0 = self.decoder.decode_vjp(&x0, &grad_s)?;
        let mut grad_xt = grad_x0.clone();
        grad_xt.add_scaled(&self.model.vjp_at(&flow, &grad_x0), -t);
        Ok(EnergyGradient { energy, grad_xt, grad_x0, x0, flow })
    }
}

/// `|grad_x0| / |grad_xt|`, or `(0, true)` when `grad_xt` vanishes.
pub fn attenuation(grad_x0: &LatentGrid, grad_xt: &LatentGrid) -> (f64, bool) {
    let denom = grad_xt.norm();
    if denom < DEGENERATE_NORM {
        (0.0, true)
    } else {
        (grad_x0.norm() / denom, false)
    }
}

/// Floats that may be NaN or infinite, written as JSON strings in that case
/// so aborted trajectories survive a round trip.
mod non_finite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

/// One guided inner update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub inner: usize,
    #[serde(with = "non_finite")]
    pub t: f64,
    #[serde(with = "non_finite")]
    pub t_next: f64,
    #[serde(with = "non_finite")]
    pub energy: f64,
    #[serde(with = "non_finite")]
    pub grad_x0_norm: f64,
    #[serde(with = "non_finite")]
    pub grad_xt_norm: f64,
    #[serde(with = "non_finite")]
    pub lambda_schedule: f64,
    #[serde(with = "non_finite")]
    pub lambda_attenuation: f64,
    #[serde(with = "non_finite")]
    pub lambda: f64,
    #[serde(with = "non_finite")]
    pub guidance_norm: f64,
    pub degenerate: bool,
    #[serde(with = "non_finite")]
    pub state_norm: f64,
    #[serde(with = "non_finite")]
    pub velocity_norm: f64,
    #[serde(with = "non_finite")]
    pub prediction_norm: f64,
    #[serde(skip)]
    pub states: Option<StepStates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStates {
    pub x_t: LatentGrid,
    pub v_t: LatentGrid,
    pub x0: LatentGrid,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidedTrajectory {
    pub records: Vec<StepRecord>,
}

impl GuidedTrajectory {
    /// JSON-lines, one record per inner step.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub occupancy: OccupancyGrid,
    pub x0: LatentGrid,
    pub trajectory: GuidedTrajectory,
}

/// Generation stopped on a non-finite state.
#[derive(Debug, Clone)]
pub struct Aborted {
    pub step: usize,
    pub last: Option<StepRecord>,
    pub trajectory: GuidedTrajectory,
}

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("generation aborted at step {}: state became non-finite", .0.step)]
    Aborted(Box<Aborted>),
    #[error(transparent)]
    Other(#[from] Error),
}

/// Euler sampler over a mixture flow, with optional contact guidance.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    pub model: &'a MixtureFlow,
    pub decoder: &'a DecoderParams,
    pub cfg: &'a GuidanceConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a MixtureFlow, decoder: &'a DecoderParams, cfg: &'a GuidanceConfig) -> Result<Self> {
        cfg.validate(model.means()[0].n() * crate::decoder::UPSAMPLE)?;
        if decoder.channels() != model.means()[0].channels() {
            return Err(Error::Shape("decoder and model disagree on channel count".into()));
        }
        Ok(Self { model, decoder, cfg })
    }

    /// Plain Euler integration from `x_1 ~ N(0, I)`.
    pub fn unguided(&self, seed: u64) -> Result<SampleOutput, SampleError> {
        let times = self.cfg.timesteps();
        let mut x = self.model.sample_base(seed);
        for (step, w) in times.windows(2).enumerate() {
            let (t, t_next) = (w[0], w[1]);
            let v = self.model.velocity(&x, t)?;
            x.add_scaled(&v, t_next - t);
            if !x.is_finite() {
                return Err(abort(step, GuidedTrajectory::default()));
            }
        }
        self.finish(x, GuidedTrajectory::default())
    }

    /// Recurrent guided sampling over every timestep.
    pub fn guided(&self, energy: &Energy<'_>, seed: u64) -> Result<SampleOutput, SampleError> {
        let times = self.cfg.timesteps();
        let mut x = self.model.sample_base(seed);
        let mut trajectory = GuidedTrajectory::default();
        for (step, w) in times.windows(2).enumerate() {
            let (t, t_next) = (w[0], w[1]);
            let dt = t_next - t;
            let lambda_schedule = self.cfg.schedule_weight(step, t);
            let mut velocity = None;
            for inner in 0..self.cfg.recurrence {
                let eg = energy.gradient(&x, t)?;
                let (lambda_attenuation, degenerate) = attenuation(&eg.grad_x0, &eg.grad_xt);
                let lambda = lambda_schedule * lambda_attenuation;
                let record = StepRecord {
                    step,
                    inner,
                    t,
                    t_next,
                    energy: eg.energy,
                    grad_x0_norm: eg.grad_x0.norm(),
                    grad_xt_norm: eg.grad_xt.norm(),
                    lambda_schedule,
                    lambda_attenuation,
                    lambda,
                    guidance_norm: lambda.abs() * eg.grad_xt.norm(),
                    degenerate,
                    state_norm: x.norm(),
                    velocity_norm: eg.flow.velocity.norm(),
                    prediction_norm: eg.x0.norm(),
                    states: self.cfg.keep_states.then(|| StepStates {
                        x_t: x.clone(),
                        v_t: eg.flow.velocity.clone(),
                        x0: eg.x0.clone(),
                    }),
                };
                let finite = record.energy.is_finite();
                trajectory.records.push(record);
                if !finite {
                    return Err(abort(step, trajectory));
                }
                if lambda != 0.0 {
                    x.add_scaled(&eg.grad_xt, lambda * dt);
                }
                if !x.is_finite() {
                    return Err(abort(step, trajectory));
                }
                velocity = Some(eg.flow.velocity);
            }
            // the last inner iteration's velocity advances time
            let v = velocity.expect("recurrence >= 1");
            x.add_scaled(&v, dt);
            if !x.is_finite() {
                return Err(abort(step, trajectory));
            }
        }
        self.finish(x, trajectory)
    }

    fn finish(&self, x: LatentGrid, trajectory: GuidedTrajectory) -> Result<SampleOutput, SampleError> {
        let x0 = self.model.predict_x0(&x, self.cfg.t_min)?;
        if !x0.is_finite() {
            return Err(abort(self.cfg.steps, trajectory));
        }
        let occupancy = self.decoder.decode(&x0)?;
        Ok(SampleOutput { occupancy, x0, trajectory })
    }

    /// Unguided sample used as the drag reference.
    pub fn reference(&self, seed: u64) -> Result<ReferenceShape, SampleError> {
        let out = self.unguided(seed)?;
        Ok(ReferenceShape::from_occupancy(out.occupancy, self.cfg.threshold, seed)?)
    }
}

fn abort(step: usize, trajectory: GuidedTrajectory) -> SampleError {
    SampleError::Aborted(Box::new(Aborted { step, last: trajectory.records.last().cloned(), trajectory }))
}

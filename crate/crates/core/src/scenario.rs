//! Procedural experiment definitions.
//!
//! A scenario names a small library of primitives, which one is the true
//! object, a half-space visibility mask, the mixture prior over the library
//! and the seeds that pin down every random draw. Building it voxelizes and
//! encodes the library, conditions the mixture on the visible half of the
//! true shape and samples contacts from its hidden surface.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contact::{sample_contacts, ContactSet};
use crate::decoder::{DecoderParams, UPSAMPLE};
use crate::error::{Error, Result};
use crate::flow::{MixtureFlow, VisibilityCondition};
use crate::guidance::GuidanceConfig;
use crate::voxel::{voxel_center, Aabb, Axis, BinaryGrid, Primitive};

/// Bumped whenever the standard suite changes.
pub const SUITE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryEntry {
    pub label: String,
    pub weight: f64,
    pub shape: Primitive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Voxels whose center coordinate is below the offset are visible.
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilitySpec {
    pub axis: Axis,
    pub offset: f64,
    pub visible: Side,
}

impl VisibilitySpec {
    pub fn mask(&self, n: usize) -> BinaryGrid {
        let a = self.axis.index();
        BinaryGrid::from_fn(n, |v| {
            let c = voxel_center(n, v)[a];
            match self.visible {
                Side::Below => c < self.offset,
                Side::Above => c >= self.offset,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Latent cells per axis; the occupancy grid has four times as many.
    pub latent: usize,
    pub channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { latent: 16, channels: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Component noise scale in latent units.
    pub sigma: f64,
    /// Sharpness of the visibility likelihood.
    pub sharpness: f64,
    /// Decoder logistic gain.
    pub gain: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { sigma: 0.3, sharpness: 0.05, gain: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub reference: u64,
    pub contacts: u64,
    /// One generation per entry; guided and unguided runs share the seed.
    pub runs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub description: String,
    pub true_shape: usize,
    /// Require at least one other library shape to match the true shape on
    /// the visible side while differing on the hidden side.
    pub ambiguous: bool,
    pub contact_count: usize,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub visibility: VisibilitySpec,
    pub seeds: SeedSpec,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub library: Vec<LibraryEntry>,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Scenario(msg) => Error::Scenario(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn grid_n(&self) -> usize {
        self.grid.latent * UPSAMPLE
    }

    pub fn decoder(&self) -> Result<DecoderParams> {
        DecoderParams::uniform(self.grid.channels, self.model.gain)
    }

    pub fn build(&self) -> Result<Scenario> {
        if self.library.is_empty() {
            return Err(Error::Scenario("library is empty".into()));
        }
        if self.true_shape >= self.library.len() {
            return Err(Error::Scenario(format!(
                "true shape {} is not in a library of {}",
                self.true_shape,
                self.library.len()
            )));
        }
        let n = self.grid_n();
        self.guidance.validate(n)?;
        let decoder = self.decoder()?;
        let shapes = self
            .library
            .iter()
            .map(|e| e.shape.voxelize(n).map_err(|err| Error::Scenario(format!("{}: {err}", e.label))))
            .collect::<Result<Vec<_>>>()?;
        let means = shapes.iter().map(|s| decoder.encode(s)).collect::<Result<Vec<_>>>()?;
        let prior = MixtureFlow::new(means, self.library.iter().map(|e| e.weight).collect(), self.model.sigma)?;

        let visibility = self.visibility.mask(n);
        let truth = shapes[self.true_shape].clone();
        let observation = truth.as_slice().iter().map(|&b| b as u8 as f64).collect();
        let condition = VisibilityCondition::new(visibility.clone(), observation, self.model.sharpness)?;
        let model = prior.condition(&condition, &decoder)?;

        let decoded = prior
            .means()
            .iter()
            .map(|m| Ok(decoder.decode(m)?.binarize(self.guidance.threshold)))
            .collect::<Result<Vec<_>>>()?;
        let ambiguity = AmbiguityReport::measure(&decoded, self.true_shape, &visibility);
        if self.ambiguous && ambiguity.partners.is_empty() {
            return Err(Error::Scenario(format!(
                "{}: no library shape matches the true shape on the visible side while differing hidden: {:?}",
                self.name, ambiguity
            )));
        }

        let contacts = sample_contacts(&truth, &visibility, self.contact_count, self.seeds.contacts)?;
        Ok(Scenario { spec: self.clone(), decoder, prior, model, truth, visibility, contacts, shapes, ambiguity })
    }
}

/// Visible/hidden disagreement between decoded library shapes and the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    /// Per component: voxels on the visible side differing from the truth.
    pub visible_mismatch: Vec<usize>,
    /// Per component: hidden-side mismatch as a fraction of the truth's
    /// occupied volume.
    pub hidden_difference: Vec<f64>,
    /// Components other than the truth that look identical when visible
    /// and differ by at least [`AmbiguityReport::MIN_HIDDEN_DIFFERENCE`].
    pub partners: Vec<usize>,
}

impl AmbiguityReport {
    pub const MIN_HIDDEN_DIFFERENCE: f64 = 0.10;

    pub fn measure(decoded: &[BinaryGrid], truth: usize, visibility: &BinaryGrid) -> Self {
        let hidden = visibility.complement();
        let volume = decoded[truth].count().max(1) as f64;
        let visible_mismatch: Vec<usize> =
            decoded.iter().map(|d| d.mismatch_within(&decoded[truth], visibility)).collect();
        let hidden_difference: Vec<f64> =
            decoded.iter().map(|d| d.mismatch_within(&decoded[truth], &hidden) as f64 / volume).collect();
        let partners = (0..decoded.len())
            .filter(|&k| k != truth && visible_mismatch[k] == 0 && hidden_difference[k] >= Self::MIN_HIDDEN_DIFFERENCE)
            .collect();
        Self { visible_mismatch, hidden_difference, partners }
    }
}

/// A built scenario: conditioned model, ground truth and contacts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub decoder: DecoderParams,
    pub prior: MixtureFlow,
    pub model: MixtureFlow,
    pub truth: BinaryGrid,
    pub visibility: BinaryGrid,
    pub contacts: ContactSet,
    pub shapes: Vec<BinaryGrid>,
    pub ambiguity: AmbiguityReport,
}

fn aabb(min: [f64; 3], max: [f64; 3]) -> Aabb {
    Aabb { min, max }
}

fn entry(label: &str, weight: f64, shape: Primitive) -> LibraryEntry {
    LibraryEntry { label: label.into(), weight, shape }
}

fn suite_spec(
    name: &str,
    description: &str,
    index: u64,
    true_shape: usize,
    ambiguous: bool,
    library: Vec<LibraryEntry>,
) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        description: description.into(),
        true_shape,
        ambiguous,
        contact_count: 10,
        grid: GridSpec::default(),
        model: ModelSpec::default(),
        visibility: VisibilitySpec { axis: Axis::X, offset: 0.5, visible: Side::Below },
        seeds: SeedSpec { reference: 1000 + index, contacts: 2000 + index, runs: (0..50).collect() },
        guidance: GuidanceConfig::default(),
        library,
    }
}

/// The fixed acceptance suite: four scenarios with 50 run seeds each.
pub fn standard_suite() -> Vec<ScenarioSpec> {
    let slab = |x_max: f64| aabb([0.1875, 0.125, 0.125], [x_max, 0.875, 0.875]);
    let beam = aabb([0.1875, 0.375, 0.375], [0.8125, 0.625, 0.625]);
    let section = |x_max: f64| aabb([0.25, 0.3125, 0.3125], [x_max, 0.6875, 0.6875]);
    vec![
        suite_spec(
            "a-single-box",
            "one-component sanity check",
            0,
            0,
            false,
            vec![entry("box", 1.0, Primitive::Box(aabb([0.1875, 0.25, 0.3125], [0.75, 0.6875, 0.625])))],
        ),
        suite_spec(
            "b-depth-boxes",
            "two slabs identical on the visible side with different hidden depth",
            1,
            0,
            true,
            vec![
                entry("deep slab", 0.4, Primitive::Box(slab(0.8125))),
                entry("shallow slab", 0.6, Primitive::Box(slab(0.5625))),
            ],
        ),
        suite_spec(
            "c-bracket-orientation",
            "L-brackets whose hidden arm points up, down or sideways",
            2,
            0,
            true,
            vec![
                entry(
                    "arm up",
                    1.0 / 3.0,
                    Primitive::LBracket { leg: beam, foot: aabb([0.625, 0.375, 0.375], [0.8125, 0.625, 0.875]) },
                ),
                entry(
                    "arm down",
                    1.0 / 3.0,
                    Primitive::LBracket { leg: beam, foot: aabb([0.625, 0.375, 0.125], [0.8125, 0.625, 0.625]) },
                ),
                entry(
                    "arm sideways",
                    1.0 / 3.0,
                    Primitive::LBracket { leg: beam, foot: aabb([0.625, 0.375, 0.375], [0.8125, 0.875, 0.625]) },
                ),
            ],
        ),
        suite_spec(
            "d-aspect-ratio",
            "same visible cross-section, hidden length and end cap vary",
            3,
            0,
            true,
            vec![
                entry("long box", 0.25, Primitive::Box(section(0.875))),
                entry("short box", 0.5, Primitive::Box(section(0.625))),
                entry(
                    "capped box",
                    0.25,
                    Primitive::SphereCappedBox { body: section(0.6875), axis: Axis::X, radius: 0.1875 },
                ),
            ],
        ),
    ]
}

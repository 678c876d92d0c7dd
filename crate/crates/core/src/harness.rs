//! Runs, run directories and reports.
//!
//! A run directory holds everything one generation produced plus a
//! `manifest.json` naming the scenario, the effective guidance config, every
//! seed and the sha256 of every artifact:
//!
//! ```text
//! run/
//!   manifest.json      RunManifest
//!   scenario.toml      scenario snapshot
//!   contacts.json      contact set used for guidance and residuals
//!   ground_truth.bin   packed binary grid of the true shape
//!   ground_truth.ply   its voxel surface
//!   reference.occ      drag reference occupancy
//!   trajectory.jsonl   one record per guided inner step (empty if unguided)
//!   output.occ         generated occupancy (absent after an abort)
//!   output.bin         generated occupancy binarized at the threshold
//!   output.ply         its voxel surface (absent if nothing is occupied)
//!   metrics.csv        the run's metric row
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate_run, median, sign_test_p, MetricsReport};
use crate::guidance::{Energy, GuidanceConfig, ReferenceShape, SampleError, Sampler, Schedule, StepRecord};
use crate::scenario::{Scenario, ScenarioSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_VERSION: u32 = 1;
/// Bumped whenever [`MetricRow`] columns change.
pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// Worker threads for sweeps; defaults to the available parallelism.
pub const WORKERS_ENV: &str = "CONTACT_FLOW_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(Error),
    #[error("generation aborted at step {step} for seed {seed}")]
    Aborted { step: usize, seed: u64, manifest: Box<RunManifest> },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("i/o error: {0}")]
    Io(Error),
}

impl HarnessError {
    /// 2 for an aborted generation, 3 for a failed evaluation, 4 for bad
    /// configuration and 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Aborted { .. } => 2,
            HarnessError::Evaluation(_) => 3,
            HarnessError::Config(_) => 4,
            HarnessError::Io(_) => 1,
        }
    }
}

impl From<Error> for HarnessError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => HarnessError::Io(e),
            other => HarnessError::Config(other),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.into())
    }
}

/// Row label in summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Unguided,
    GuidedNoRecurrence,
    Guided,
}

impl Method {
    pub fn of(cfg: &GuidanceConfig) -> Self {
        if cfg.is_unguided() {
            Method::Unguided
        } else if cfg.recurrence == 1 {
            Method::GuidedNoRecurrence
        } else {
            Method::Guided
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Unguided => "unguided",
            Method::GuidedNoRecurrence => "guided w/o recurrence",
            Method::Guided => "guided",
        }
    }
}

/// One run's metrics; the CSV column schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub seed: u64,
    pub method: Method,
    pub schedule: Schedule,
    pub lambda_early: f64,
    pub lambda_middle: f64,
    pub lambda_late: f64,
    pub recurrence: usize,
    pub radius: usize,
    pub aborted: bool,
    pub failed: bool,
    pub chamfer: f64,
    pub f_001: f64,
    pub f_002: f64,
    pub f_005: f64,
    pub contact_residual_median: f64,
    /// Drag energy of the final prediction against the scenario reference.
    pub final_energy: Option<f64>,
    /// Library component nearest to the final latent.
    pub nearest_component: Option<usize>,
}

impl MetricRow {
    pub fn from_report(scenario: &str, seed: u64, cfg: &GuidanceConfig, report: &MetricsReport) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            method: Method::of(cfg),
            schedule: cfg.schedule,
            lambda_early: cfg.stage_lambdas[0],
            lambda_middle: cfg.stage_lambdas[1],
            lambda_late: cfg.stage_lambdas[2],
            recurrence: cfg.recurrence,
            radius: cfg.radius,
            aborted: false,
            failed: report.failed,
            chamfer: report.chamfer,
            f_001: report.f_001,
            f_002: report.f_002,
            f_005: report.f_005,
            contact_residual_median: report.contact_residual_median,
            final_energy: None,
            nearest_component: None,
        }
    }
}

/// A built scenario together with its drag reference.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub reference: ReferenceShape,
    /// sha256 of each voxelized library shape, in library order.
    pub library_digests: Vec<String>,
}

/// Builds the scenario and draws the reference with its dedicated seed.
pub fn prepare(spec: &ScenarioSpec) -> Result<Prepared> {
    let scenario = spec.build()?;
    let cfg = spec.guidance.clone().unguided();
    let sampler = Sampler::new(&scenario.model, &scenario.decoder, &cfg)?;
    let reference = sampler.reference(spec.seeds.reference).map_err(|e| match e {
        SampleError::Aborted(a) => Error::NonFinite { step: a.step },
        SampleError::Other(e) => e,
    })?;
    let library_digests = scenario
        .shapes
        .iter()
        .map(|s| {
            let mut bytes = Vec::new();
            s.write_to(&mut bytes)?;
            Ok(sha256_hex(&bytes))
        })
        .collect::<Result<_>>()?;
    Ok(Prepared { scenario, reference, library_digests })
}

/// Result of one generation, before anything touches the disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: MetricRow,
    pub sample: Option<crate::guidance::SampleOutput>,
    pub abort: Option<crate::guidance::Aborted>,
}

/// Generates and evaluates one seed. Unguided configs use the plain sampler.
pub fn run(prepared: &Prepared, cfg: &GuidanceConfig, seed: u64) -> Result<RunOutcome> {
    let sc = &prepared.scenario;
    let sampler = Sampler::new(&sc.model, &sc.decoder, cfg)?;
    let energy = if sc.contacts.is_empty() {
        None
    } else {
        Some(Energy::new(&sc.model, &sc.decoder, &sc.contacts, &prepared.reference, cfg)?)
    };
    let result = if cfg.is_unguided() {
        sampler.unguided(seed)
    } else {
        let energy = energy
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("guided generation needs at least one contact".into()))?;
        sampler.guided(energy, seed)
    };
    match result {
        Ok(sample) => {
            let report = evaluate_run(&sample.occupancy, &sc.truth, &sc.contacts, cfg.threshold)?;
            let mut row = MetricRow::from_report(&sc.spec.name, seed, cfg, &report);
            row.final_energy = energy.as_ref().map(|e| e.of_prediction(&sample.x0)).transpose()?;
            row.nearest_component = Some(sc.model.nearest_component(&sample.x0).0);
            Ok(RunOutcome { row, sample: Some(sample), abort: None })
        }
        Err(SampleError::Aborted(abort)) => {
            let mut row = MetricRow::from_report(&sc.spec.name, seed, cfg, &MetricsReport::failure());
            row.aborted = true;
            Ok(RunOutcome { row, sample: None, abort: Some(*abort) })
        }
        Err(SampleError::Other(e)) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub reference: u64,
    pub contacts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, last_record: Option<StepRecord> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_seconds: f64,
    pub generate_seconds: f64,
    pub write_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub scenario: ScenarioSpec,
    pub guidance: GuidanceConfig,
    pub seeds: RunSeeds,
    pub library_digests: Vec<String>,
    pub status: RunStatus,
    pub metrics: MetricRow,
    /// Artifact file name to sha256.
    pub files: BTreeMap<String, String>,
    /// Wall-clock only; excluded from reproducibility checks.
    pub timings: Timings,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        if manifest.manifest_version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.manifest_version),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Lists every manifest file that is missing or whose digest differs.
pub fn verify_run_dir(dir: &Path, manifest: &RunManifest) -> Vec<String> {
    manifest
        .files
        .iter()
        .filter_map(|(name, digest)| match file_digest(&dir.join(name)) {
            Ok(d) if &d == digest => None,
            Ok(_) => Some(format!("{name}: digest mismatch")),
            Err(e) => Some(format!("{name}: {e}")),
        })
        .collect()
}

/// What to generate.
#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub spec: ScenarioSpec,
    pub guidance: GuidanceConfig,
    pub seed: u64,
}

/// Prepares, generates and writes one run directory.
pub fn generate(req: &GenerateRequest, out: &Path) -> Result<RunManifest, HarnessError> {
    let start = Instant::now();
    req.guidance.validate(req.spec.grid_n())?;
    let prepared = prepare(&req.spec)?;
    let prepare_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let outcome = run(&prepared, &req.guidance, req.seed)?;
    let generate_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut manifest = write_run_dir(&prepared, req, &outcome, out)?;
    manifest.timings = Timings { prepare_seconds, generate_seconds, write_seconds: start.elapsed().as_secs_f64() };
    manifest.save(&out.join(MANIFEST_FILE))?;
    match &manifest.status {
        RunStatus::Completed => Ok(manifest),
        RunStatus::Aborted { step, .. } => {
            Err(HarnessError::Aborted { step: *step, seed: req.seed, manifest: Box::new(manifest) })
        }
    }
}

fn write_run_dir(prepared: &Prepared, req: &GenerateRequest, outcome: &RunOutcome, out: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out)?;
    let sc = &prepared.scenario;
    let mut files = BTreeMap::new();
    let mut record = |name: &str| -> Result<()> {
        files.insert(name.to_string(), file_digest(&out.join(name))?);
        Ok(())
    };

    fs::write(out.join("scenario.toml"), req.spec.to_toml()?)?;
    record("scenario.toml")?;
    sc.contacts.save(&out.join("contacts.json"))?;
    record("contacts.json")?;
    sc.truth.save(&out.join("ground_truth.bin"))?;
    record("ground_truth.bin")?;
    sc.truth.extract_surface()?.save_ply(&out.join("ground_truth.ply"))?;
    record("ground_truth.ply")?;
    prepared.reference.occupancy.save(&out.join("reference.occ"))?;
    record("reference.occ")?;

    let trajectory = match (&outcome.sample, &outcome.abort) {
        (Some(s), _) => &s.trajectory,
        (None, Some(a)) => &a.trajectory,
        (None, None) => unreachable!("a run either completes or aborts"),
    };
    let mut w = BufWriter::new(fs::File::create(out.join("trajectory.jsonl"))?);
    trajectory.write_jsonl(&mut w)?;
    w.flush()?;
    drop(w);
    record("trajectory.jsonl")?;

    if let Some(sample) = &outcome.sample {
        sample.occupancy.save(&out.join("output.occ"))?;
        record("output.occ")?;
        let binary = sample.occupancy.binarize(req.guidance.threshold);
        binary.save(&out.join("output.bin"))?;
        record("output.bin")?;
        if !binary.is_empty() {
            binary.extract_surface()?.save_ply(&out.join("output.ply"))?;
            record("output.ply")?;
        }
    }
    write_metrics_csv(std::slice::from_ref(&outcome.row), &out.join("metrics.csv"))?;
    record("metrics.csv")?;

    let status = match &outcome.abort {
        None => RunStatus::Completed,
        Some(a) => RunStatus::Aborted { step: a.step, last_record: a.last.clone() },
    };
    Ok(RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        scenario: req.spec.clone(),
        guidance: req.guidance.clone(),
        seeds: RunSeeds { run: req.seed, reference: req.spec.seeds.reference, contacts: req.spec.seeds.contacts },
        library_digests: prepared.library_digests.clone(),
        status,
        metrics: outcome.row.clone(),
        files,
        timings: Timings { prepare_seconds: 0.0, generate_seconds: 0.0, write_seconds: 0.0 },
    })
}

/// Outcome of re-running a manifest into a fresh directory.
#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub original: RunManifest,
    pub replayed: RunManifest,
    /// Empty when metrics, statuses, library digests and every artifact
    /// digest agree.
    pub differences: Vec<String>,
}

pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport, HarnessError> {
    let original = RunManifest::load(manifest_path)?;
    let req = GenerateRequest {
        spec: original.scenario.clone(),
        guidance: original.guidance.clone(),
        seed: original.seeds.run,
    };
    let replayed = match generate(&req, out) {
        Ok(m) => m,
        Err(HarnessError::Aborted { manifest, .. }) => *manifest,
        Err(e) => return Err(e),
    };
    let mut differences = Vec::new();
    if original.metrics != replayed.metrics {
        differences.push(format!("metrics: {:?} vs {:?}", original.metrics, replayed.metrics));
    }
    let status_json = |s: &RunStatus| serde_json::to_string(s).map_err(|e| HarnessError::Io(Error::Json(e)));
    if status_json(&original.status)? != status_json(&replayed.status)? {
        differences.push("status differs".into());
    }
    if original.library_digests != replayed.library_digests {
        differences.push("library digests differ".into());
    }
    if original.tool_version != replayed.tool_version {
        differences.push(format!("tool version {} vs {}", original.tool_version, replayed.tool_version));
    }
    for (name, digest) in &original.files {
        match replayed.files.get(name) {
            Some(d) if d == digest => {}
            Some(_) => differences.push(format!("{name}: digest differs")),
            None => differences.push(format!("{name}: not produced")),
        }
    }
    for name in replayed.files.keys().filter(|n| !original.files.contains_key(*n)) {
        differences.push(format!("{name}: not in original manifest"));
    }
    Ok(ReplayReport { original, replayed, differences })
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean and median of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, median: f64::NAN };
        }
        Self { mean: values.iter().sum::<f64>() / values.len() as f64, median: median(values) }
    }
}

/// Aggregate over a group of runs. Aborted and failed runs contribute their
/// sentinel metrics; the energy statistic skips runs without one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub aborted: usize,
    pub failed: usize,
    pub chamfer: Stat,
    pub f_001: Stat,
    pub f_002: Stat,
    pub f_005: Stat,
    pub contact_residual: Stat,
    pub final_energy: Stat,
}

impl SummaryRow {
    pub fn of(label: impl Into<String>, rows: &[&MetricRow]) -> Self {
        let col = |f: fn(&MetricRow) -> f64| Stat::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            label: label.into(),
            runs: rows.len(),
            aborted: rows.iter().filter(|r| r.aborted).count(),
            failed: rows.iter().filter(|r| r.failed).count(),
            chamfer: col(|r| r.chamfer),
            f_001: col(|r| r.f_001),
            f_002: col(|r| r.f_002),
            f_005: col(|r| r.f_005),
            contact_residual: col(|r| r.contact_residual_median),
            final_energy: Stat::of(&rows.iter().filter_map(|r| r.final_energy).collect::<Vec<_>>()),
        }
    }
}

/// One summary row per method present, in unguided / w/o recurrence /
/// guided order.
pub fn summarize_by_method(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<Method, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.method).or_default().push(r);
    }
    groups.into_iter().map(|(m, rs)| SummaryRow::of(m.label(), &rs)).collect()
}

pub fn format_summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<24} {:>5} {:>7} | {:>17} | {:>15} | {:>15} | {:>15} | {:>17}\n",
        "method", "runs", "aborts", "Chamfer", "F@0.01", "F@0.02", "F@0.05", "contact residual"
    );
    s.push_str(&format!(
        "{:<24} {:>5} {:>7} | {:>8} {:>8} | {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>8} {:>8}\n",
        "", "", "", "mean", "median", "mean", "median", "mean", "median", "mean", "median", "mean", "median"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>5} {:>7} | {:>8.5} {:>8.5} | {:>7.4} {:>7.4} | {:>7.4} {:>7.4} | {:>7.4} {:>7.4} | {:>8.5} {:>8.5}\n",
            r.label,
            r.runs,
            r.aborted,
            r.chamfer.mean,
            r.chamfer.median,
            r.f_001.mean,
            r.f_001.median,
            r.f_002.mean,
            r.f_002.median,
            r.f_005.mean,
            r.f_005.median,
            r.contact_residual.mean,
            r.contact_residual.median,
        ));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
struct FlatSummary<'a> {
    label: &'a str,
    runs: usize,
    aborted: usize,
    failed: usize,
    chamfer_mean: f64,
    chamfer_median: f64,
    f_001_mean: f64,
    f_001_median: f64,
    f_002_mean: f64,
    f_002_median: f64,
    f_005_mean: f64,
    f_005_median: f64,
    contact_residual_mean: f64,
    contact_residual_median: f64,
    final_energy_mean: f64,
    final_energy_median: f64,
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(FlatSummary {
            label: &r.label,
            runs: r.runs,
            aborted: r.aborted,
            failed: r.failed,
            chamfer_mean: r.chamfer.mean,
            chamfer_median: r.chamfer.median,
            f_001_mean: r.f_001.mean,
            f_001_median: r.f_001.median,
            f_002_mean: r.f_002.mean,
            f_002_median: r.f_002.median,
            f_005_mean: r.f_005.mean,
            f_005_median: r.f_005.median,
            contact_residual_mean: r.contact_residual.mean,
            contact_residual_median: r.contact_residual.median,
            final_energy_mean: r.final_energy.mean,
            final_energy_median: r.final_energy.median,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregated run directories.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// Directories whose manifest was missing, unreadable or did not match
    /// the files on disk.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Every directory at or below `root` that contains a manifest.
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if root.join(MANIFEST_FILE).is_file() {
        found.push(root.to_path_buf());
        return Ok(found);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries.into_iter().filter(|p| p.is_dir()) {
        found.extend(find_run_dirs(&p)?);
    }
    Ok(found)
}

pub fn evaluate_dirs(inputs: &[PathBuf]) -> Result<Evaluation, HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::Evaluation("no run directories given".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for input in inputs {
        let dirs = match find_run_dirs(input) {
            Ok(d) if d.is_empty() => {
                skipped.push((input.clone(), "no manifest found".into()));
                continue;
            }
            Ok(d) => d,
            Err(e) => {
                skipped.push((input.clone(), e.to_string()));
                continue;
            }
        };
        for dir in dirs {
            match RunManifest::load(&dir.join(MANIFEST_FILE)) {
                Ok(m) => {
                    let problems = verify_run_dir(&dir, &m);
                    if problems.is_empty() {
                        rows.push(m.metrics);
                    } else {
                        skipped.push((dir, problems.join("; ")));
                    }
                }
                Err(e) => skipped.push((dir, e.to_string())),
            }
        }
    }
    if rows.is_empty() {
        let why: Vec<String> = skipped.iter().map(|(p, r)| format!("{}: {r}", p.display())).collect();
        return Err(HarnessError::Evaluation(format!("no usable runs ({})", why.join(", "))));
    }
    let summary = summarize_by_method(&rows);
    Ok(Evaluation { rows, summary, skipped })
}

/// Parameter grid for a sweep. Empty axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<[f64; 3]>,
    pub recurrences: Vec<usize>,
    pub schedules: Vec<Schedule>,
    pub radii: Vec<usize>,
}

impl SweepGrid {
    pub fn cells(&self, base: &GuidanceConfig) -> Vec<GuidanceConfig> {
        fn axis<T: Clone>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let mut cells = Vec::new();
        for lambdas in axis(&self.lambdas, base.stage_lambdas) {
            for &recurrence in &axis(&self.recurrences, base.recurrence) {
                for &schedule in &axis(&self.schedules, base.schedule) {
                    for &radius in &axis(&self.radii, base.radius) {
                        cells.push(GuidanceConfig {
                            stage_lambdas: lambdas,
                            recurrence,
                            schedule,
                            radius,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        cells
    }
}

/// One sweep cell, compared seed by seed with the unguided baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub config: GuidanceConfig,
    pub summary: SummaryRow,
    /// Seeds whose Chamfer beat / lost to / tied the unguided run.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test for "guidance lowers Chamfer".
    pub sign_test_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub tool_version: String,
    pub scenario: ScenarioSpec,
    pub grid: SweepGrid,
    pub seeds: Vec<u64>,
    pub baseline: SummaryRow,
    pub cells: Vec<SweepCell>,
    /// Unguided rows first, then every cell's rows in cell order.
    pub rows: Vec<MetricRow>,
}

/// Reads the worker count from [`WORKERS_ENV`].
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidParameter(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Runs every cell of `grid` plus an unguided baseline over `seeds`, in
/// parallel across seeds. Aborted runs are recorded and the sweep goes on.
pub fn sweep(
    spec: &ScenarioSpec,
    grid: &SweepGrid,
    seeds: &[u64],
    workers: usize,
) -> Result<SweepReport, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config(Error::InvalidParameter("sweep needs at least one seed".into())));
    }
    let cells = grid.cells(&spec.guidance);
    for c in &cells {
        c.validate(spec.grid_n())?;
    }
    let prepared = prepare(spec)?;
    let baseline_cfg = spec.guidance.clone().unguided();
    let configs: Vec<&GuidanceConfig> = std::iter::once(&baseline_cfg).chain(cells.iter()).collect();
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(Error::InvalidParameter(e.to_string())))?;
    let rows: Vec<MetricRow> = pool.install(|| {
        jobs.par_iter().map(|&(c, seed)| run(&prepared, configs[c], seed).map(|o| o.row)).collect::<Result<Vec<_>>>()
    })?;

    let per = seeds.len();
    let base_rows = &rows[..per];
    let baseline = SummaryRow::of(Method::Unguided.label(), &base_rows.iter().collect::<Vec<_>>());
    let cells = cells
        .into_iter()
        .enumerate()
        .map(|(i, config)| {
            let cell_rows = &rows[(i + 1) * per..(i + 2) * per];
            let (mut wins, mut losses, mut ties) = (0, 0, 0);
            for (g, u) in cell_rows.iter().zip(base_rows) {
                match g.chamfer.partial_cmp(&u.chamfer) {
                    Some(std::cmp::Ordering::Less) => wins += 1,
                    Some(std::cmp::Ordering::Greater) => losses += 1,
                    _ => ties += 1,
                }
            }
            let label = cell_label(&config);
            SweepCell {
                summary: SummaryRow::of(label, &cell_rows.iter().collect::<Vec<_>>()),
                config,
                wins,
                losses,
                ties,
                sign_test_p: sign_test_p(wins, losses),
            }
        })
        .collect();
    Ok(SweepReport {
        tool_version: TOOL_VERSION.to_string(),
        scenario: spec.clone(),
        grid: grid.clone(),
        seeds: seeds.to_vec(),
        baseline,
        cells,
        rows,
    })
}

pub fn cell_label(cfg: &GuidanceConfig) -> String {
    let l = cfg.stage_lambdas;
    match cfg.schedule {
        Schedule::Staged => format!("staged {}/{}/{} m={} r={}", l[0], l[1], l[2], cfg.recurrence, cfg.radius),
        Schedule::Covg => format!("covg m={} r={}", cfg.recurrence, cfg.radius),
    }
}

impl SweepReport {
    /// Writes `runs.csv`, `summary.csv` and `sweep.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        write_metrics_csv(&self.rows, &out.join("runs.csv"))?;
        let summary: Vec<SummaryRow> =
            std::iter::once(self.baseline.clone()).chain(self.cells.iter().map(|c| c.summary.clone())).collect();
        write_summary_csv(&summary, &out.join("summary.csv"))?;
        let mut w = BufWriter::new(fs::File::create(out.join("sweep.json"))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn format_table(&self) -> String {
        let summary: Vec<SummaryRow> =
            std::iter::once(self.baseline.clone()).chain(self.cells.iter().map(|c| c.summary.clone())).collect();
        let mut s = format_summary_table(&summary);
        s.push('\n');
        for c in &self.cells {
            s.push_str(&format!(
                "{:<32} wins {:>3} losses {:>3} ties {:>3}  sign test p = {:.3e}  median J {:.1}\n",
                c.summary.label, c.wins, c.losses, c.ties, c.sign_test_p, c.summary.final_energy.median
            ));
        }
        s
    }
}

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Worker count comes from `CONTACT_FLOW_WORKERS`.

mod common;

use std::time::Instant;

use common::{bits, brute_chamfer, brute_f_score, brute_fps, gaussian_latent, random_instance};
use contact_flow::decoder::DecoderParams;
use contact_flow::eval::{chamfer, f_score, sign_test_p, F_THRESHOLDS};
use contact_flow::flow::{MixtureFlow, VisibilityCondition};
use contact_flow::guidance::{Energy, GuidanceConfig, Sampler, Schedule};
use contact_flow::harness::{
    generate, prepare, replay, run, workers_from_env, GenerateRequest, HarnessError, MetricRow, Prepared, MANIFEST_FILE,
};
use contact_flow::scenario::standard_suite;
use contact_flow::voxel::{voxel_center, BinaryGrid, LatentGrid, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const FD_TOLERANCE: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const POSTERIOR_TOLERANCE: f64 = 1e-10;
const MC_SAMPLES: usize = 100_000;
const MC_STANDARD_ERRORS: f64 = 3.0;
const LANDING_TOLERANCE: f64 = 0.05;
const LANDING_SIGMAS: f64 = 3.0;
const ATTENUATION_TOLERANCE: f64 = 1e-9;
const SIGN_TEST_ALPHA: f64 = 0.05;
const DEPTH_SCENARIO: &str = "b-depth-boxes";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let inst = random_instance(&mut rng, 2, 2, 2, 1);
        let energy = Energy::new(&inst.model, &inst.decoder, &inst.contacts, &inst.reference, &inst.cfg).unwrap();
        let x = gaussian_latent(&mut rng, 2, 2, 1.0);
        let t = rng.gen_range(0.1..0.95);
        let g = energy.gradient(&x, t).unwrap();
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.as_mut_slice()[i] += FD_STEP;
                let mut minus = x.clone();
                minus.as_mut_slice()[i] -= FD_STEP;
                (energy.at_state(&plus, t).unwrap() - energy.at_state(&minus, t).unwrap()) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(g.grad_xt.as_slice(), &fd));
    }
    outcome(worst < FD_TOLERANCE, format!("worst relative error {worst:.2e} over 20 instances (< {FD_TOLERANCE:.0e})"))
}

/// Bayes over components, each `x_t | k ~ N((1-t) mu_k, s^2 I)`, then the
/// Gaussian conditional mean of `x0` within the component.
fn closed_form_posterior_mean(means: &[Vec<f64>], weights: &[f64], sigma: f64, x: &[f64], t: f64) -> Vec<f64> {
    let var0 = sigma * sigma;
    let var_t = (1.0 - t).powi(2) * var0 + t * t;
    let log_post: Vec<f64> = means
        .iter()
        .zip(weights)
        .map(|(mu, w)| {
            let q: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - (1.0 - t) * mi).powi(2)).sum();
            w.ln() - 0.5 * q / var_t
        })
        .collect();
    let top = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_post.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let gain = (1.0 - t) * var0 / var_t;
    let mut out = vec![0.0; x.len()];
    for (mu, u) in means.iter().zip(&unnorm) {
        for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(mu)) {
            *o += u / z * (mi + gain * (xi - (1.0 - t) * mi));
        }
    }
    out
}

fn posterior_mean_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (n, channels) = (2, 2);
    let means: Vec<LatentGrid> = (0..3).map(|_| gaussian_latent(&mut rng, n, channels, 1.0)).collect();
    let weights = vec![0.5, 0.3, 0.2];
    let sigma = 0.4;
    let model = MixtureFlow::new(means.clone(), weights.clone(), sigma).unwrap();
    let raw: Vec<Vec<f64>> = means.iter().map(|m| m.as_slice().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = gaussian_latent(&mut rng, n, channels, 1.5);
        let t = rng.gen_range(0.01..1.0);
        let got = model.predict_x0(&x, t).unwrap();
        let want = closed_form_posterior_mean(&raw, &weights, sigma, x.as_slice(), t);
        for (g, w) in got.as_slice().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }

    // self-normalized importance sampling with the prior as proposal on a
    // two-dimensional mixture, on its own random stream
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let small: Vec<LatentGrid> =
        [[-1.0, 0.5], [1.0, -0.5]].iter().map(|m| LatentGrid::from_vec(1, 2, m.to_vec()).unwrap()).collect();
    let small_weights = [0.4, 0.6];
    let small_sigma = 0.5;
    let small_model = MixtureFlow::new(small.clone(), small_weights.to_vec(), small_sigma).unwrap();
    let mut worst_z: f64 = 0.0;
    for (xt, t) in [([0.3, -0.2], 0.5), ([-0.6, 0.4], 0.7), ([0.1, 0.1], 0.85)] {
        let mut w_sum = 0.0;
        let mut samples = Vec::with_capacity(MC_SAMPLES);
        for _ in 0..MC_SAMPLES {
            let k = if rng.gen::<f64>() < small_weights[0] { 0 } else { 1 };
            let x0: [f64; 2] =
                std::array::from_fn(|d| small[k].as_slice()[d] + small_sigma * rng.sample::<f64, _>(StandardNormal));
            let q: f64 = (0..2).map(|d| (xt[d] - (1.0 - t) * x0[d]).powi(2)).sum();
            let w = (-0.5 * q / (t * t)).exp();
            w_sum += w;
            samples.push((w, x0));
        }
        let predicted = small_model.predict_x0(&LatentGrid::from_vec(1, 2, xt.to_vec()).unwrap(), t).unwrap();
        for d in 0..2 {
            let est = samples.iter().map(|(w, x)| w * x[d]).sum::<f64>() / w_sum;
            let var = samples.iter().map(|(w, x)| (w / w_sum).powi(2) * (x[d] - est).powi(2)).sum::<f64>();
            worst_z = worst_z.max((predicted.as_slice()[d] - est).abs() / var.sqrt());
        }
    }
    outcome(
        worst < POSTERIOR_TOLERANCE && worst_z < MC_STANDARD_ERRORS,
        format!(
            "max |difference| {worst:.1e} on 100 states (< {POSTERIOR_TOLERANCE:.0e}); Monte Carlo worst {worst_z:.2} standard errors at {MC_SAMPLES} samples (< {MC_STANDARD_ERRORS})"
        ),
    )
}

fn sampling_fidelity_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (n, channels, sigma) = (2, 2, 0.1);
    let means: Vec<LatentGrid> = (0..3).map(|_| gaussian_latent(&mut rng, n, channels, 1.5)).collect();
    let prior = MixtureFlow::new(means, vec![0.4, 0.35, 0.25], sigma).unwrap();
    let decoder = DecoderParams::new(vec![1.0, 0.5], 2.0).unwrap();
    let big = n * contact_flow::decoder::UPSAMPLE;
    let mask = BinaryGrid::from_fn(big, |[i, _, _]| i < big / 2);
    let observation = decoder.decode(&prior.means()[0]).unwrap().binarize(0.5);
    let observation: Vec<f64> = observation.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let cond = VisibilityCondition::new(mask, observation, 0.01).unwrap();
    let model = prior.condition(&cond, &decoder).unwrap();
    let cfg = GuidanceConfig { radius: 1, ..GuidanceConfig::with_steps(200) }.unguided();
    let sampler = Sampler::new(&model, &decoder, &cfg).unwrap();
    let runs = 1000;
    let landed: Vec<(usize, f64)> = (0..runs as u64)
        .into_par_iter()
        .map(|seed| {
            let x0 = sampler.unguided(seed).unwrap().x0;
            let (k, d) = model.nearest_component(&x0);
            (k, d / (x0.len() as f64).sqrt())
        })
        .collect();
    let mut counts = [0usize; 3];
    for (k, _) in &landed {
        counts[*k] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / runs as f64).collect();
    let worst_freq = freq.iter().zip(model.weights()).map(|(f, w)| (f - w).abs()).fold(0.0, f64::max);
    let worst_rms = landed.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    let w = model.weights();
    outcome(
        worst_freq <= LANDING_TOLERANCE && worst_rms <= LANDING_SIGMAS * sigma,
        format!(
            "frequencies {:.3}/{:.3}/{:.3} vs conditioned weights {:.3}/{:.3}/{:.3} (max gap {worst_freq:.3} <= {LANDING_TOLERANCE}); worst per-coordinate RMS {worst_rms:.3} <= {:.2}",
            freq[0], freq[1], freq[2], w[0], w[1], w[2], LANDING_SIGMAS * sigma
        ),
    )
}

struct SuiteRun {
    scenario: String,
    unguided: MetricRow,
    guided: MetricRow,
    single: MetricRow,
    worst_attenuation: f64,
    guided_aborted: bool,
}

fn suite_runs(prepared: &[Prepared]) -> Vec<SuiteRun> {
    let jobs: Vec<(usize, u64)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.scenario.spec.seeds.runs.iter().map(move |&s| (i, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, seed)| {
            let p = &prepared[i];
            let base = p.scenario.spec.guidance.clone();
            let unguided = run(p, &base.clone().unguided(), seed).unwrap().row;
            let guided = run(p, &base, seed).unwrap();
            let single = run(p, &GuidanceConfig { recurrence: 1, ..base.clone() }, seed).unwrap().row;
            let mut worst: f64 = 0.0;
            if let Some(sample) = &guided.sample {
                for r in &sample.trajectory.records {
                    let gap = if r.degenerate {
                        r.lambda_attenuation.abs()
                    } else {
                        (r.lambda_attenuation * r.grad_xt_norm - r.grad_x0_norm).abs() / r.grad_x0_norm.max(1.0)
                    };
                    worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
                }
            }
            SuiteRun {
                scenario: p.scenario.spec.name.clone(),
                unguided,
                guided_aborted: guided.abort.is_some(),
                guided: guided.row,
                single,
                worst_attenuation: worst,
            }
        })
        .collect()
}

fn attenuation_check(runs: &[SuiteRun]) -> Outcome {
    let worst = runs.iter().map(|r| r.worst_attenuation).fold(0.0, f64::max);
    let aborted = runs.iter().filter(|r| r.guided_aborted || r.single.aborted || r.unguided.aborted).count();
    outcome(
        worst <= ATTENUATION_TOLERANCE && aborted == 0,
        format!(
            "worst scaled identity gap {worst:.1e} (<= {ATTENUATION_TOLERANCE:.0e}); {aborted} aborted of {} runs",
            3 * runs.len()
        ),
    )
}

fn efficacy_check(runs: &[SuiteRun]) -> Outcome {
    let depth: Vec<&SuiteRun> = runs.iter().filter(|r| r.scenario == DEPTH_SCENARIO).collect();
    let med = |f: &dyn Fn(&SuiteRun) -> f64| median(depth.iter().map(|r| f(r)).collect());
    let (cu, cg) = (med(&|r| r.unguided.chamfer), med(&|r| r.guided.chamfer));
    let (ru, rg) = (med(&|r| r.unguided.contact_residual_median), med(&|r| r.guided.contact_residual_median));
    let wins = depth.iter().filter(|r| r.guided.chamfer < r.unguided.chamfer).count();
    let losses = depth.iter().filter(|r| r.guided.chamfer > r.unguided.chamfer).count();
    let p = sign_test_p(wins, losses);
    let modes = |pick: &dyn Fn(&SuiteRun) -> Option<usize>| {
        let mut c = [0usize; 2];
        for r in &depth {
            if let Some(k) = pick(r) {
                c[k.min(1)] += 1;
            }
        }
        c
    };
    let mu = modes(&|r| r.unguided.nearest_component);
    let mg = modes(&|r| r.guided.nearest_component);
    outcome(
        cg < cu && p < SIGN_TEST_ALPHA && rg < ru,
        format!(
            "{} seeds: chamfer median {cu:.4} -> {cg:.4}; sign test {wins} wins {losses} losses p={p:.2e} (< {SIGN_TEST_ALPHA}); residual median {ru:.4} -> {rg:.4}; modes deep/shallow unguided {}/{} guided {}/{}",
            depth.len(), mu[0], mu[1], mg[0], mg[1]
        ),
    )
}

fn recurrence_check(runs: &[SuiteRun]) -> Outcome {
    let energy = |pick: &dyn Fn(&SuiteRun) -> &MetricRow| {
        median(runs.iter().map(|r| pick(r).final_energy.unwrap_or(f64::INFINITY)).collect())
    };
    let cham = |pick: &dyn Fn(&SuiteRun) -> &MetricRow| median(runs.iter().map(|r| pick(r).chamfer).collect());
    let (j3, j1) = (energy(&|r| &r.guided), energy(&|r| &r.single));
    let (c3, c1) = (cham(&|r| &r.guided), cham(&|r| &r.single));
    let mut per = String::new();
    for spec in standard_suite() {
        let sub: Vec<&SuiteRun> = runs.iter().filter(|r| r.scenario == spec.name).collect();
        let m = |f: &dyn Fn(&SuiteRun) -> f64| median(sub.iter().map(|r| f(r)).collect());
        per.push_str(&format!(
            "; {} chamfer m3 {:.4} m1 {:.4}",
            spec.name,
            m(&|r| r.guided.chamfer),
            m(&|r| r.single.chamfer)
        ));
    }
    outcome(
        j3 <= j1 && c3 <= c1,
        format!("pooled median J m3 {j3:.3} <= m1 {j1:.3}; pooled median chamfer m3 {c3:.6} <= m1 {c1:.6}{per}"),
    )
}

fn zero_guidance_check(prepared: &[Prepared]) -> Outcome {
    let p = prepared.iter().find(|p| p.scenario.spec.name == DEPTH_SCENARIO).unwrap();
    let sc = &p.scenario;
    let cfg = GuidanceConfig { stage_lambdas: [0.0; 3], ..sc.spec.guidance.clone() };
    let sampler = Sampler::new(&sc.model, &sc.decoder, &cfg).unwrap();
    let energy = Energy::new(&sc.model, &sc.decoder, &sc.contacts, &p.reference, &cfg).unwrap();
    let identical = (0..10u64)
        .into_par_iter()
        .filter(|&seed| {
            let u = sampler.unguided(seed).unwrap();
            let g = sampler.guided(&energy, seed).unwrap();
            bits(u.occupancy.as_slice()) == bits(g.occupancy.as_slice())
                && bits(u.x0.as_slice()) == bits(g.x0.as_slice())
        })
        .count();
    outcome(identical == 10, format!("{identical}/10 seeds bit-identical at recurrence {}", cfg.recurrence))
}

fn random_cloud(rng: &mut ChaCha8Rng, len: usize, quantized: bool) -> Vec<Point3> {
    (0..len)
        .map(|_| {
            if quantized {
                voxel_center(8, [rng.gen_range(0..8), rng.gen_range(0..8), rng.gen_range(0..8)])
            } else {
                [rng.gen(), rng.gen(), rng.gen()]
            }
        })
        .collect()
}

fn metric_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut mismatches = 0;
    for pair in 0..100 {
        let quantized = pair % 4 == 0;
        let len = rng.gen_range(1..=500);
        let a = random_cloud(&mut rng, len, quantized);
        let len = rng.gen_range(1..=500);
        let b = random_cloud(&mut rng, len, quantized);
        let (pa, pb) = (PointCloud::new(a.clone()), PointCloud::new(b.clone()));
        if chamfer(&pa, &pb).unwrap() != brute_chamfer(&a, &b) {
            mismatches += 1;
        }
        for tau in F_THRESHOLDS.iter().chain(&[0.1, 0.2]) {
            if f_score(&pa, &pb, *tau).unwrap() != brute_f_score(&a, &b, *tau) {
                mismatches += 1;
            }
        }
    }
    let mut fps_cases = 0;
    let mut fps_mismatches = 0;
    for case in 0..200 {
        let len = rng.gen_range(1..=64);
        let points = random_cloud(&mut rng, len, case % 3 == 0);
        let k = rng.gen_range(1..=len);
        let start = rng.gen_range(0..len);
        fps_cases += 1;
        if contact_flow::contact::farthest_point_indices(&points, k, start).unwrap() != brute_fps(&points, k, start) {
            fps_mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && fps_mismatches == 0,
        format!(
            "{mismatches} chamfer/F mismatches on 100 cloud pairs; {fps_mismatches} FPS mismatches on {fps_cases} inputs"
        ),
    )
}

fn determinism_check() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = standard_suite().into_iter().find(|s| s.name == DEPTH_SCENARIO).unwrap();
    let cases = [
        ("guided", spec.guidance.clone()),
        ("unguided", spec.guidance.clone().unguided()),
        ("aborted", GuidanceConfig { schedule: Schedule::Covg, ..spec.guidance.clone() }),
    ];
    let mut notes = Vec::new();
    let mut pass = true;
    for (label, guidance) in cases {
        let out = dir.path().join(label);
        match generate(&GenerateRequest { spec: spec.clone(), guidance, seed: 5 }, &out) {
            Ok(_) | Err(HarnessError::Aborted { .. }) => {}
            Err(e) => {
                pass = false;
                notes.push(format!("{label}: {e}"));
                continue;
            }
        }
        let report = replay(&out.join(MANIFEST_FILE), &dir.path().join(format!("{label}-replay"))).unwrap();
        if !report.differences.is_empty() {
            pass = false;
        }
        notes.push(format!("{label}: {} files, {} differences", report.original.files.len(), report.differences.len()));
    }
    outcome(pass, notes.join("; "))
}

fn main() {
    let workers = workers_from_env().expect("worker count");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    let started = Instant::now();
    let results = pool.install(|| {
        let mut results = Vec::new();
        let mut record = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
            let t = Instant::now();
            let o = f();
            let status = if o.pass { "PASS" } else { "FAIL" };
            println!("{status} criterion {n}: {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
            results.push(o.pass);
        };
        record(1, "state gradient vs central differences", &mut gradient_check);
        record(2, "posterior mean identity", &mut posterior_mean_check);
        record(3, "unguided sampling fidelity", &mut sampling_fidelity_check);
        let prepared: Vec<Prepared> = standard_suite().par_iter().map(|s| prepare(s).unwrap()).collect();
        let t = Instant::now();
        let runs = suite_runs(&prepared);
        println!(
            "suite: {} seeds x 3 methods over {} scenarios in {:.1}s",
            runs.len(),
            prepared.len(),
            t.elapsed().as_secs_f64()
        );
        record(4, "attenuation identity and no aborts", &mut || attenuation_check(&runs));
        record(5, "guidance efficacy on the depth scenario", &mut || efficacy_check(&runs));
        record(6, "recurrence ablation", &mut || recurrence_check(&runs));
        record(7, "zero guidance equivalence", &mut || zero_guidance_check(&prepared));
        record(8, "metric oracles", &mut metric_oracle_check);
        record(9, "manifest replay determinism", &mut determinism_check);
        results
    });
    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s with {workers} workers",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

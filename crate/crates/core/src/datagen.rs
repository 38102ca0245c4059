//! Correlated load sampling and labeled dataset generation.
//!
//! A profile scales every load by `alpha + beta[region] + gamma[load]`: one
//! system-wide draw, one per region and one per load, all uniform. Each
//! profile is labeled by solving the AC-OPF; profiles the solver cannot
//! certify are replaced by fresh draws.
//!
//! On disk a dataset is a directory with `manifest.json` and
//! `samples.ndjson` (one JSON record per line). The manifest carries the
//! SHA-256 of the samples file, checked on read.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acopf::{LoadProfile, OpfSolution};
use crate::error::{Error, Result};
use crate::netmodel::{case_stats, hex_digest, CaseStats, NetworkCase};
use crate::partition::Partition;
use crate::solver::{solve_acopf, SolveOptions, SolveReport};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const TRAIN_FRACTION: f64 = 0.8;

/// Stream reserved for the train/test shuffle; sample streams use the draw
/// index.
const SPLIT_STREAM: u64 = u64::MAX;
/// Aborting needs at least this many attempts, so that one early failure
/// does not count as a majority.
const MIN_ATTEMPTS_FOR_ABORT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadSamplerConfig {
    pub alpha_range: [f64; 2],
    pub beta_range: [f64; 2],
    pub gamma_range: [f64; 2],
    pub seed: u64,
}

impl Default for LoadSamplerConfig {
    fn default() -> Self {
        LoadSamplerConfig {
            alpha_range: [0.875, 0.975],
            beta_range: [-0.025, 0.025],
            gamma_range: [-0.0025, 0.0025],
            seed: 0,
        }
    }
}

impl LoadSamplerConfig {
    pub fn check(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("alpha", self.alpha_range),
            ("beta", self.beta_range),
            ("gamma", self.gamma_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        Ok(())
    }

    /// Smallest and largest possible scale factor.
    pub fn factor_bounds(&self) -> (f64, f64) {
        (
            self.alpha_range[0] + self.beta_range[0] + self.gamma_range[0],
            self.alpha_range[1] + self.beta_range[1] + self.gamma_range[1],
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// The sampler stream for one draw; independent of every other draw.
fn draw_rng(seed: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    rng
}

/// Scale factor of every load (load order) for one draw.
pub fn sample_scale_factors(case: &NetworkCase, partition: &Partition, cfg: &LoadSamplerConfig, draw: u64) -> Vec<f64> {
    let mut rng = draw_rng(cfg.seed, draw);
    let alpha = uniform(&mut rng, cfg.alpha_range);
    let beta: Vec<f64> = (0..partition.k()).map(|_| uniform(&mut rng, cfg.beta_range)).collect();
    (0..case.loads().len())
        .map(|l| {
            let region = partition.region_of_bus[case.load_bus(l)];
            alpha + beta[region] + uniform(&mut rng, cfg.gamma_range)
        })
        .collect()
}

pub fn sample_load_profile(case: &NetworkCase, partition: &Partition, cfg: &LoadSamplerConfig, draw: u64) -> LoadProfile {
    LoadProfile::scaled(case, &sample_scale_factors(case, partition, cfg, draw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Draw index that produced the profile.
    pub draw: u64,
    pub loads: LoadProfile,
    pub solution: OpfSolution,
    pub report: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub case_hash: String,
    pub case_stats: CaseStats,
    pub partition_hash: String,
    pub base_mva: f64,
    pub sampler: LoadSamplerConfig,
    pub solver: SolveOptions,
    pub samples: usize,
    /// Draws made, including the ones rejected by the solver.
    pub attempts: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// SHA-256 of `samples.ndjson`.
    pub samples_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Rejects a dataset generated for another case or partition.
    pub fn check_compatible(&self, case: &NetworkCase, partition: Option<&Partition>) -> Result<()> {
        if self.manifest.case_hash != case.content_hash() {
            return Err(Error::Integrity("dataset was generated for a different case".into()));
        }
        if let Some(p) = partition {
            if self.manifest.partition_hash != p.assignment.content_hash() {
                return Err(Error::Integrity("dataset was generated for a different partition".into()));
            }
        }
        Ok(())
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> + '_ {
        self.manifest.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> + '_ {
        self.manifest.test.iter().map(|&i| &self.samples[i])
    }

    fn check_split(&self) -> Result<()> {
        let t = self.samples.len();
        let mut seen = vec![false; t];
        for &i in self.manifest.train.iter().chain(&self.manifest.test) {
            if i >= t || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Integrity(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) || self.manifest.train.len() != train_size(t) {
            return Err(Error::Integrity("split does not cover the samples 80/20".into()));
        }
        Ok(())
    }
}

pub fn train_size(t: usize) -> usize {
    (TRAIN_FRACTION * t as f64).round() as usize
}

/// Sorted train and test index sets from a seeded shuffle.
pub fn split_indices(t: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(&mut draw_rng(seed, SPLIT_STREAM));
    let mut train = idx[..train_size(t)].to_vec();
    let mut test = idx[train_size(t)..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Solves `t` sampled profiles on `workers` threads.
///
/// Draws are consumed in index order and the first `t` that converge are
/// kept, so the result does not depend on the worker count.
pub fn generate_dataset(
    case: &NetworkCase,
    partition: &Partition,
    t: usize,
    cfg: &LoadSamplerConfig,
    options: &SolveOptions,
    workers: usize,
) -> Result<Dataset> {
    if t < 5 {
        return Err(Error::InvalidArgument(format!("dataset needs at least 5 samples, got {t}")));
    }
    cfg.check()?;
    options.check()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let mut samples = Vec::with_capacity(t);
    let mut next: u64 = 0;
    let mut failures = 0usize;
    while samples.len() < t {
        let need = t - samples.len();
        // A little slack so that a few failures do not force another round.
        let window = next..next + (need + need / 10 + 1) as u64;
        let results: Vec<Result<(u64, LoadProfile, OpfSolution, SolveReport)>> = pool.install(|| {
            window
                .clone()
                .into_par_iter()
                .map(|draw| {
                    let loads = sample_load_profile(case, partition, cfg, draw);
                    let (sol, rep) = solve_acopf(case, &loads, options)?;
                    Ok((draw, loads, sol, rep))
                })
                .collect()
        });
        for r in results {
            let (draw, loads, mut solution, report) = r?;
            next = draw + 1;
            if report.converged() {
                solution.p_f = None;
                solution.q_f = None;
                samples.push(Sample {
                    draw,
                    loads,
                    solution,
                    report,
                });
                if samples.len() == t {
                    break;
                }
            } else {
                failures += 1;
                log::debug!("draw {draw} rejected: {:?}", report.status);
            }
        }
        let attempts = next as usize;
        if attempts >= MIN_ATTEMPTS_FOR_ABORT && failures * 2 > attempts {
            return Err(Error::Solver(format!(
                "{failures} of {attempts} sampled profiles failed to solve; the case or sampler ranges are likely infeasible"
            )));
        }
    }
    if failures > 0 {
        log::info!("{failures} of {next} draws were resampled after solver failure");
    }
    let (train, test) = split_indices(t, cfg.seed);
    let samples_sha256 = hex_digest(&samples_bytes(&samples)?);
    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_FORMAT_VERSION,
            case_hash: case.content_hash(),
            case_stats: case_stats(case),
            partition_hash: partition.assignment.content_hash(),
            base_mva: case.base_mva(),
            sampler: *cfg,
            solver: *options,
            samples: t,
            attempts: next,
            train,
            test,
            samples_sha256,
        },
        samples,
    })
}

fn samples_bytes(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = samples_bytes(&dataset.samples)?;
    let mut manifest = dataset.manifest.clone();
    manifest.samples_sha256 = hex_digest(&bytes);
    let samples_path = dir.join("samples.ndjson");
    fs::write(&samples_path, &bytes).map_err(|e| Error::io(&samples_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let samples_path = dir.join("samples.ndjson");
    let bytes = fs::read(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
    if hex_digest(&bytes) != manifest.samples_sha256 {
        return Err(Error::Integrity(format!("{} does not match its manifest hash", samples_path.display())));
    }
    let samples = bytes
        .split(|&b| b == b'\n')
        .filter(|line| !line.is_empty())
        .map(serde_json::from_slice)
        .collect::<std::result::Result<Vec<Sample>, _>>()?;
    if samples.len() != manifest.samples {
        return Err(Error::Integrity(format!(
            "manifest lists {} samples, file holds {}",
            manifest.samples,
            samples.len()
        )));
    }
    let dataset = Dataset { manifest, samples };
    dataset.check_split()?;
    Ok(dataset)
}

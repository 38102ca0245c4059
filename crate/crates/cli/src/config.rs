use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use splitopf::datagen::LoadSamplerConfig;
use splitopf::evaluation::Thresholds;
use splitopf::solver::SolveOptions;
use splitopf::training::{LossNorm, TrainConfig};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub case: Option<PathBuf>,
    /// Input assignment for `partition`; the automatic partitioner runs when unset.
    pub assignment: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

/// Everything a command reads, as loaded from `--config` and the flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory. Copied into the sampler, trainer and solver seeds.
    pub seed: Option<u64>,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub sampler: LoadSamplerConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Dataset size T.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Region count for the automatic partitioner.
    #[serde(default = "default_regions")]
    pub regions: usize,
    /// Widen every bus voltage band to at least `[lo, hi]`.
    #[serde(default)]
    pub voltage_band: Option<[f64; 2]>,
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("run")
}

fn default_workers() -> usize {
    1
}

fn default_samples() -> usize {
    500
}

fn default_regions() -> usize {
    4
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            run_dir: default_run_dir(),
            paths: Paths::default(),
            train: TrainConfig::default(),
            solver: SolveOptions::default(),
            sampler: LoadSamplerConfig::default(),
            thresholds: Thresholds::default(),
            workers: default_workers(),
            samples: default_samples(),
            regions: default_regions(),
            voltage_band: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    SquaredL2,
}

/// Flags shared by every subcommand; each overrides one config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; flags given on the command line win over it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for artifacts and the run.json echo
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Case file (native JSON or MATPOWER .m)
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    /// Region assignment to validate and install instead of partitioning automatically
    #[arg(long, global = true)]
    pub assignment: Option<PathBuf>,
    /// Partition file [default: <run-dir>/partition.json]
    #[arg(long, global = true)]
    pub partition: Option<PathBuf>,
    /// Dataset directory [default: <run-dir>/dataset]
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Model directory [default: <run-dir>/models]
    #[arg(long, global = true)]
    pub models: Option<PathBuf>,
    /// Report directory [default: <run-dir>/reports]
    #[arg(long, global = true)]
    pub reports: Option<PathBuf>,
    /// Master seed (required here or in the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for dataset generation and stage 2
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Number of solved samples to generate
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Number of regions for the automatic partitioner
    #[arg(long, global = true)]
    pub regions: Option<usize>,
    /// Widen voltage bounds to at least LO,HI p.u.
    #[arg(long, global = true, value_delimiter = ',', num_args = 2)]
    pub voltage_band: Option<Vec<f64>>,
    /// Dual (lambda) epochs
    #[arg(long, global = true)]
    pub epochs_lambda: Option<usize>,
    /// Weight epochs per lambda-epoch
    #[arg(long, global = true)]
    pub epochs_w: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Dual step size
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    /// Initial learning rate
    #[arg(long, global = true)]
    pub lr_start: Option<f64>,
    /// Final learning rate
    #[arg(long, global = true)]
    pub lr_end: Option<f64>,
    /// Wall-clock seconds per training command (stage 2: for the whole stage)
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// Regression loss
    #[arg(long, global = true, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long, global = true)]
    pub tol_feas: Option<f64>,
    #[arg(long, global = true)]
    pub tol_opt: Option<f64>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub barrier_mu0: Option<f64>,
    #[arg(long, global = true)]
    pub barrier_shrink: Option<f64>,
    /// Global load factor range LO,HI
    #[arg(long, global = true, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    pub alpha_range: Option<Vec<f64>>,
    /// Regional load factor range LO,HI
    #[arg(long, global = true, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    pub beta_range: Option<Vec<f64>>,
    /// Per-load factor range LO,HI
    #[arg(long, global = true, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    pub gamma_range: Option<Vec<f64>>,
    /// Dispatch bound threshold, MW
    #[arg(long, global = true)]
    pub p_g_mw: Option<f64>,
    /// Dispatch bound threshold as a fraction of generator range
    #[arg(long, global = true)]
    pub p_g_range_fraction: Option<f64>,
    /// Voltage bound threshold, p.u.
    #[arg(long, global = true)]
    pub v_pu: Option<f64>,
}

fn pair(name: &str, v: &[f64]) -> Result<[f64; 2], Failure> {
    match v {
        [a, b] => Ok([*a, *b]),
        _ => Err(Failure::config(format!("--{name} takes two values"))),
    }
}

impl RunConfig {
    pub fn load(o: &Overrides) -> Result<Self, Failure> {
        let mut cfg = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(o)?;
        cfg.finish()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) -> Result<(), Failure> {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        set(&mut self.run_dir, &o.run_dir);
        set_opt(&mut self.paths.case, &o.case);
        set_opt(&mut self.paths.assignment, &o.assignment);
        set_opt(&mut self.paths.partition, &o.partition);
        set_opt(&mut self.paths.dataset, &o.dataset);
        set_opt(&mut self.paths.models, &o.models);
        set_opt(&mut self.paths.reports, &o.reports);
        set_opt(&mut self.seed, &o.seed);
        set(&mut self.workers, &o.workers);
        set(&mut self.samples, &o.samples);
        set(&mut self.regions, &o.regions);
        if let Some(v) = &o.voltage_band {
            self.voltage_band = Some(pair("voltage-band", v)?);
        }
        let t = &mut self.train;
        set(&mut t.epochs_lambda, &o.epochs_lambda);
        set(&mut t.epochs_w, &o.epochs_w);
        set(&mut t.batch_size, &o.batch_size);
        set(&mut t.rho, &o.rho);
        set(&mut t.lr.start, &o.lr_start);
        set(&mut t.lr.end, &o.lr_end);
        if o.budget.is_some() {
            t.wall_clock_budget = o.budget;
        }
        if let Some(n) = o.norm {
            t.norm = match n {
                NormArg::L1 => LossNorm::L1,
                NormArg::SquaredL2 => LossNorm::SquaredL2,
            };
        }
        let s = &mut self.solver;
        set(&mut s.tol_feas, &o.tol_feas);
        set(&mut s.tol_opt, &o.tol_opt);
        set(&mut s.max_iter, &o.max_iter);
        set(&mut s.barrier_mu0, &o.barrier_mu0);
        set(&mut s.barrier_shrink, &o.barrier_shrink);
        if let Some(v) = &o.alpha_range {
            self.sampler.alpha_range = pair("alpha-range", v)?;
        }
        if let Some(v) = &o.beta_range {
            self.sampler.beta_range = pair("beta-range", v)?;
        }
        if let Some(v) = &o.gamma_range {
            self.sampler.gamma_range = pair("gamma-range", v)?;
        }
        set(&mut self.thresholds.p_g_mw, &o.p_g_mw);
        set(&mut self.thresholds.p_g_range_fraction, &o.p_g_range_fraction);
        set(&mut self.thresholds.v_pu, &o.v_pu);
        Ok(())
    }

    // Fills defaults that hang off the run directory and validates.
    fn finish(&mut self) -> Result<(), Failure> {
        let seed = self
            .seed
            .ok_or_else(|| Failure::config("a seed is required (--seed or \"seed\" in the config)".into()))?;
        self.train.seed = seed;
        self.sampler.seed = seed;
        self.solver.seed = seed;
        let dir = self.run_dir.clone();
        let p = &mut self.paths;
        p.partition.get_or_insert_with(|| dir.join("partition.json"));
        p.dataset.get_or_insert_with(|| dir.join("dataset"));
        p.models.get_or_insert_with(|| dir.join("models"));
        p.reports.get_or_insert_with(|| dir.join("reports"));
        if self.workers == 0 {
            return Err(Failure::config("--workers must be at least 1".into()));
        }
        if self.regions == 0 {
            return Err(Failure::config("--regions must be at least 1".into()));
        }
        self.train.check().map_err(Failure::from)?;
        self.solver.check().map_err(Failure::from)?;
        self.sampler.check().map_err(Failure::from)?;
        self.thresholds.check().map_err(Failure::from)?;
        Ok(())
    }

    pub fn case_path(&self) -> Result<&Path, Failure> {
        self.paths.case.as_deref().ok_or_else(|| Failure::config("no case given (--case)".into()))
    }

    // Set by `finish`.
    pub fn partition_path(&self) -> &Path {
        self.paths.partition.as_deref().expect("resolved")
    }

    pub fn dataset_dir(&self) -> &Path {
        self.paths.dataset.as_deref().expect("resolved")
    }

    pub fn models_dir(&self) -> &Path {
        self.paths.models.as_deref().expect("resolved")
    }

    pub fn reports_dir(&self) -> &Path {
        self.paths.reports.as_deref().expect("resolved")
    }
}

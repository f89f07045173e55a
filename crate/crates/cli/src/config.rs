//! Run configuration: a plain JSON document, overridden by command-line flags
//! and validated in full before any computation starts.

use std::path::{Path, PathBuf};

use dynhmc::kernels::{KernelConfig, KernelKind, Mutation, DEFAULT_MAX_DEPTH};
use dynhmc::target::{MassSpec, Target, TargetKind, TargetSpec};
use dynhmc::verify::StepsizeParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that overrides the seed of the config file.
pub const SEED_ENV: &str = "NUTS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    NutsIterative,
    NutsRecursive,
    Hmc,
    Rhmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSpec {
    pub kind: KindName,
    pub h: f64,
    pub k_m: u32,
    #[serde(default)]
    pub mass: MassSpec,
    /// Trajectory length of `hmc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
    /// Length distribution of `rhmc`: weight of length `T` at index `T - 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub mutation: Mutation,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KindName::NutsIterative,
            h: 0.25,
            k_m: DEFAULT_MAX_DEPTH,
            mass: MassSpec::Identity,
            steps: None,
            weights: None,
            mutation: Mutation::None,
        }
    }
}

impl KernelSpec {
    pub fn kernel_kind(&self) -> Result<KernelKind, CliError> {
        Ok(match self.kind {
            KindName::NutsIterative => KernelKind::NutsIterative,
            KindName::NutsRecursive => KernelKind::NutsRecursive,
            KindName::Hmc => KernelKind::Hmc {
                steps: self
                    .steps
                    .ok_or_else(|| CliError::config("kernel.steps is required for hmc"))?,
            },
            KindName::Rhmc => KernelKind::Rhmc {
                weights: self
                    .weights
                    .clone()
                    .ok_or_else(|| CliError::config("kernel.weights is required for rhmc"))?,
            },
        })
    }

    pub fn build(&self, dim: usize) -> Result<KernelConfig, CliError> {
        let mass = self.mass.build(dim).map_err(|e| CliError::config(format!("kernel.mass: {e}")))?;
        let cfg = KernelConfig::new(self.h, self.k_m, mass, self.kernel_kind()?)
            .map_err(|e| CliError::config(format!("kernel: {e}")))?;
        Ok(cfg.with_mutation(self.mutation))
    }
}

/// Phase point of the `pmf` subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub dims: Vec<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { dims: vec![10, 100] }
    }
}

/// Parsed configuration. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub kernel: KernelSpec,
    pub chains: usize,
    pub iters: usize,
    pub seed: u64,
    /// Initial position of every chain; the origin when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Summary path of `sample`; `<out>.summary.json` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<PathBuf>,
    pub suite: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhaseSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<StepsizeParams>,
    pub bench: BenchSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target: TargetSpec {
                kind: TargetKind::StandardGaussian,
                dim: 2,
                sigma: None,
                a5: None,
            },
            kernel: KernelSpec::default(),
            chains: 1,
            iters: 1000,
            seed: dynhmc::rng::DEFAULT_SEED,
            init: None,
            out: None,
            summary: None,
            suite: "all".into(),
            phase: None,
            conditions: None,
            bench: BenchSpec::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file's key.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub iters: Option<usize>,
    pub out: Option<PathBuf>,
    pub suite: Option<String>,
    pub h: Option<f64>,
    pub k_m: Option<u32>,
    pub mutate: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Precedence: flag, then `NUTS_SEED`, then the file, then the default.
    pub fn apply(&mut self, o: Overrides, env_seed: Option<String>) -> Result<(), CliError> {
        if let Some(s) = env_seed {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV}: `{s}` is not an unsigned integer")))?;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = o.chains {
            self.chains = c;
        }
        if let Some(i) = o.iters {
            self.iters = i;
        }
        if let Some(out) = o.out {
            self.out = Some(out);
        }
        if let Some(s) = o.suite {
            self.suite = s;
        }
        if let Some(h) = o.h {
            self.kernel.h = h;
        }
        if let Some(k) = o.k_m {
            self.kernel.k_m = k;
        }
        if o.mutate {
            self.kernel.mutation = Mutation::SkipSwapUniform;
        }
        Ok(())
    }

    pub fn build_target(&self) -> Result<Target, CliError> {
        self.target.build().map_err(|e| CliError::config(format!("target: {e}")))
    }

    /// Checks everything a sampling run needs.
    pub fn validate_sampling(&self) -> Result<(Target, KernelConfig), CliError> {
        let target = self.build_target()?;
        let cfg = self.kernel.build(target.dim())?;
        if self.chains == 0 {
            return Err(CliError::config("chains: must be positive"));
        }
        if let Some(init) = &self.init {
            if init.len() != target.dim() {
                return Err(CliError::config(format!(
                    "init: expected {} coordinates, got {}",
                    target.dim(),
                    init.len()
                )));
            }
            if init.iter().any(|x| !x.is_finite()) {
                return Err(CliError::config("init: coordinates must be finite"));
            }
        }
        Ok((target, cfg))
    }

    pub fn summary_path(&self) -> Option<PathBuf> {
        self.summary.clone().or_else(|| {
            self.out.as_ref().map(|p| {
                let mut s = p.clone().into_os_string();
                s.push(".summary.json");
                PathBuf::from(s)
            })
        })
    }
}

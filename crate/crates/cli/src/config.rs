//! JSON configuration schema, strict validation and the built-in presets.
//!
//! The schema rejects unknown keys everywhere; parser errors carry the JSON
//! path of the offending field. Presets encode the two applications (cubic
//! heat equation and the autocatalytic two-species reaction) in both noise
//! regimes as parameterized families.

use fastdiff_core::harness::{ExperimentPlan, StepRule};
use fastdiff_core::noise::DecayLaw;
use fastdiff_core::{
    BoundaryNoiseSpec, EdgeNoise, Error, ModeIndex, ReactionPolynomial, Regime, Result,
    SystemSpec, Truncation,
};
use serde::{Deserialize, Serialize};

/// One polynomial term `coeff * u^powers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    /// Exponent per species.
    pub powers: Vec<u32>,
    /// Coefficient.
    pub coeff: f64,
}

/// The `system` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Species count.
    pub n: usize,
    /// Diffusion constants.
    pub d: Vec<f64>,
    /// Noise scaling regime: `"case1"` or `"case2"`.
    pub regime: Regime,
    /// Reaction polynomial per species, as term lists.
    pub reactions: Vec<Vec<TermConfig>>,
    /// Stop limit integrations when a component turns negative.
    #[serde(default)]
    pub positivity_stop: bool,
}

/// One edge record of the `noise` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeNoiseConfig {
    /// Mean-mode amplitude (must vanish in case 1).
    pub alpha0: f64,
    /// `"power"` or `"list"`.
    pub law: String,
    /// Power-law scale (law = "power").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Power-law exponent (law = "power").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Explicit amplitudes for `l = 1, 2, ...` (law = "list").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl EdgeNoiseConfig {
    fn to_core(&self) -> Result<EdgeNoise> {
        let law = match self.law.as_str() {
            "power" => {
                if self.values.is_some() {
                    return Err(Error::Config("power-law edge must not carry values".into()));
                }
                DecayLaw::Power {
                    c: self.c.ok_or_else(|| Error::Config("power law needs c".into()))?,
                    mu: self.mu.ok_or_else(|| Error::Config("power law needs mu".into()))?,
                }
            }
            "list" => {
                if self.c.is_some() || self.mu.is_some() {
                    return Err(Error::Config("list edge must not carry c or mu".into()));
                }
                DecayLaw::List {
                    values: self
                        .values
                        .clone()
                        .ok_or_else(|| Error::Config("list law needs values".into()))?,
                }
            }
            other => return Err(Error::Config(format!("unknown decay law '{other}'"))),
        };
        Ok(EdgeNoise { alpha0: self.alpha0, law })
    }

    /// Power-law record.
    pub fn power(alpha0: f64, c: f64, mu: f64) -> Self {
        EdgeNoiseConfig { alpha0, law: "power".into(), c: Some(c), mu: Some(mu), values: None }
    }
}

/// Step-size rule of the `numerics` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    /// `"fixed"` or `"eps2"` (`h = value * eps^2`).
    pub mode: String,
    /// Step size or coefficient.
    pub value: f64,
}

impl StepConfig {
    fn to_core(&self) -> Result<StepRule> {
        match self.mode.as_str() {
            "fixed" => Ok(StepRule::Fixed(self.value)),
            "eps2" => Ok(StepRule::Eps2(self.value)),
            other => Err(Error::Config(format!("unknown step mode '{other}'"))),
        }
    }
}

/// The `numerics` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    /// Interior band cutoff `K`.
    pub k: u32,
    /// Physical grid per axis; defaults to `2K + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<usize>,
    /// Step-size rule.
    pub h: StepConfig,
    /// Time horizon.
    pub t0: f64,
    /// Cutoff exponent of the stopping time.
    pub kappa: f64,
    /// Error norm exponent.
    pub p: u32,
    /// Save times per path (both endpoints included).
    #[serde(default = "default_save_count")]
    pub save_count: usize,
    /// Limit-grid substeps per save interval.
    #[serde(default = "default_limit_substeps")]
    pub limit_substeps: usize,
    /// Tail tolerance of the constant series.
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
}

fn default_save_count() -> usize {
    51
}
fn default_limit_substeps() -> usize {
    10
}
fn default_tail_tol() -> f64 {
    1e-4
}

/// A fluctuation mode of the initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Psi0Config {
    /// Species index.
    pub species: usize,
    /// Mode `[k1, k2]`.
    pub mode: [u32; 2],
    /// Amplitude (of `psi(0)`; case 2 scales it by epsilon internally).
    pub amp: f64,
}

/// Averaging-check parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingConfig {
    /// Species of the tracked mode.
    pub species: usize,
    /// Tracked fluctuation mode `[k1, k2]`.
    pub mode: [u32; 2],
    /// Averaging horizon.
    pub t: f64,
    /// Paths per epsilon.
    pub paths: usize,
    /// Per-step relaxation target.
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_theta() -> f64 {
    0.25
}

/// The `experiment` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scale parameters, strictly decreasing.
    pub epsilons: Vec<f64>,
    /// Monte-Carlo paths per epsilon.
    pub paths: usize,
    /// Experiment seed.
    pub seed: u64,
    /// Self-convergence companion paths at the smallest epsilon.
    #[serde(default = "default_sc_paths")]
    pub sc_paths: usize,
    /// Initial means `a(0)`.
    pub u0_mean: Vec<f64>,
    /// Initial fluctuation modes.
    #[serde(default)]
    pub psi0: Vec<Psi0Config>,
    /// Averaging-check parameters (for the `average` subcommand).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<AveragingConfig>,
}

fn default_sc_paths() -> usize {
    4
}

/// The `output` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory.
    pub dir: String,
    /// `"csv"` and/or `"bin"` trajectory formats.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
    /// Coefficient probes written to trajectories, as `[k1, k2]`.
    #[serde(default = "default_probes")]
    pub probes: Vec<[u32; 2]>,
}

fn default_formats() -> Vec<String> {
    vec!["csv".into()]
}
fn default_probes() -> Vec<[u32; 2]> {
    vec![[1, 0], [1, 1]]
}

/// Full configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Reaction-diffusion system.
    pub system: SystemConfig,
    /// Per-species, per-edge boundary noise (edge order: y=0, y=1, x=0, x=1).
    pub noise: Vec<[EdgeNoiseConfig; 4]>,
    /// Discretization parameters.
    pub numerics: NumericsConfig,
    /// Monte-Carlo experiment parameters.
    pub experiment: ExperimentConfig,
    /// Output destination and formats.
    pub output: OutputConfig,
}

impl Config {
    /// Parse a JSON document, reporting the JSON path of schema violations.
    /// Accepts either a bare config or a `report.json` with an embedded
    /// resolved config.
    pub fn from_json(text: &str) -> Result<Config> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let body = match value.get("config") {
            Some(embedded) if value.get("tool").is_some() => embedded.clone(),
            _ => value,
        };
        let de = body.clone();
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("config error at /{}: {}", e.path(), e.inner())))
    }

    /// Serialize to pretty JSON (stable field order).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Convert and validate into the core system spec.
    pub fn system_spec(&self) -> Result<SystemSpec> {
        let reactions = self
            .system
            .reactions
            .iter()
            .map(|terms| {
                let list: Vec<(Vec<u32>, f64)> =
                    terms.iter().map(|t| (t.powers.clone(), t.coeff)).collect();
                ReactionPolynomial::from_terms(self.system.n, &list)
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = SystemSpec {
            n: self.system.n,
            d: self.system.d.clone(),
            reactions,
            regime: self.system.regime,
            positivity_stop: self.system.positivity_stop,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Convert and validate the boundary noise.
    pub fn noise_spec(&self) -> Result<BoundaryNoiseSpec> {
        if self.noise.len() != self.system.n {
            return Err(Error::Config(format!(
                "noise section has {} species, system has {}",
                self.noise.len(),
                self.system.n
            )));
        }
        let species = self
            .noise
            .iter()
            .map(|edges| {
                Ok([
                    edges[0].to_core()?,
                    edges[1].to_core()?,
                    edges[2].to_core()?,
                    edges[3].to_core()?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = BoundaryNoiseSpec { regime: self.system.regime, species };
        let m = self.system_spec()?.max_degree().max(1);
        spec.validate(m)?;
        Ok(spec)
    }

    /// The interior truncation.
    pub fn truncation(&self) -> Result<Truncation> {
        match self.numerics.grid_n {
            Some(n) => Truncation::with_grid(self.numerics.k, n),
            None => Ok(Truncation::new(self.numerics.k)),
        }
    }

    /// Assemble the full experiment plan (workers filled by the caller).
    pub fn plan(&self, workers: usize) -> Result<ExperimentPlan> {
        let plan = ExperimentPlan {
            system: self.system_spec()?,
            noise: self.noise_spec()?,
            trunc: self.truncation()?,
            epsilons: self.experiment.epsilons.clone(),
            paths: self.experiment.paths,
            seed: self.experiment.seed,
            t0: self.numerics.t0,
            h_rule: self.numerics.h.to_core()?,
            save_count: self.numerics.save_count,
            kappa: self.numerics.kappa,
            p: self.numerics.p,
            u0_mean: self.experiment.u0_mean.clone(),
            psi0: self
                .experiment
                .psi0
                .iter()
                .map(|p| (p.species, ModeIndex::new(p.mode[0], p.mode[1]), p.amp))
                .collect(),
            sc_paths: self.experiment.sc_paths,
            limit_substeps: self.numerics.limit_substeps,
            tail_tol: self.numerics.tail_tol,
            workers,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// SHA-256 of the canonical serialized config.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).expect("config serializes"));
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Built-in preset names.
pub const PRESETS: [&str; 4] = ["heat-case1", "heat-case2", "autocat-case1", "autocat-case2"];

/// Look up a preset configuration by name.
pub fn preset(name: &str) -> Result<Config> {
    match name {
        "heat-case1" => Ok(heat_preset(Regime::Case1)),
        "heat-case2" => Ok(heat_preset(Regime::Case2)),
        "autocat-case1" => Ok(autocat_preset(Regime::Case1)),
        "autocat-case2" => Ok(autocat_preset(Regime::Case2)),
        other => Err(Error::Config(format!(
            "unknown preset '{other}' (available: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Cubic heat equation `du = eps^-2 lap u + u - u^3` with power-law boundary
/// noise on all four edges.
fn heat_preset(regime: Regime) -> Config {
    let alpha0 = match regime {
        Regime::Case1 => 0.0,
        Regime::Case2 => 0.1,
    };
    Config {
        system: SystemConfig {
            n: 1,
            d: vec![1.0],
            regime,
            reactions: vec![vec![
                TermConfig { powers: vec![1], coeff: 1.0 },
                TermConfig { powers: vec![3], coeff: -1.0 },
            ]],
            positivity_stop: false,
        },
        noise: vec![std::array::from_fn(|_| EdgeNoiseConfig::power(alpha0, 0.25, 2.0))],
        numerics: NumericsConfig {
            k: 16,
            grid_n: None,
            h: StepConfig { mode: "eps2".into(), value: 1e-4 },
            t0: 1.0,
            kappa: 0.02,
            p: 2,
            save_count: 51,
            limit_substeps: 10,
            tail_tol: 1e-4,
        },
        experiment: ExperimentConfig {
            epsilons: vec![0.2, 0.1, 0.05],
            paths: 32,
            seed: 42,
            sc_paths: 4,
            u0_mean: vec![0.2],
            psi0: vec![Psi0Config { species: 0, mode: [1, 1], amp: 0.3 }],
            averaging: Some(AveragingConfig {
                species: 0,
                mode: [1, 0],
                t: 1.0,
                paths: 10_000,
                theta: 0.25,
            }),
        },
        output: OutputConfig {
            dir: "out".into(),
            formats: vec!["csv".into()],
            probes: vec![[1, 0], [1, 1]],
        },
    }
}

/// Cubic autocatalytic reaction `A + B -> 2B` with rate `rho u1 u2^2`, two
/// species with independent boundary noise.
fn autocat_preset(regime: Regime) -> Config {
    let rho = 1.0;
    let alpha0 = match regime {
        Regime::Case1 => 0.0,
        Regime::Case2 => 0.05,
    };
    Config {
        system: SystemConfig {
            n: 2,
            d: vec![1.0, 1.5],
            regime,
            reactions: vec![
                vec![TermConfig { powers: vec![1, 2], coeff: -rho }],
                vec![TermConfig { powers: vec![1, 2], coeff: rho }],
            ],
            positivity_stop: true,
        },
        noise: vec![
            std::array::from_fn(|_| EdgeNoiseConfig::power(alpha0, 0.25, 2.0)),
            std::array::from_fn(|_| EdgeNoiseConfig::power(alpha0, 0.25, 2.0)),
        ],
        numerics: NumericsConfig {
            k: 16,
            grid_n: None,
            h: StepConfig { mode: "eps2".into(), value: 1e-4 },
            t0: 1.0,
            kappa: 0.02,
            p: 2,
            save_count: 51,
            limit_substeps: 10,
            tail_tol: 1e-4,
        },
        experiment: ExperimentConfig {
            epsilons: vec![0.2, 0.1, 0.05],
            paths: 32,
            seed: 42,
            sc_paths: 4,
            u0_mean: vec![0.8, 0.4],
            psi0: vec![
                Psi0Config { species: 0, mode: [1, 1], amp: 0.2 },
                Psi0Config { species: 1, mode: [1, 0], amp: 0.2 },
            ],
            averaging: Some(AveragingConfig {
                species: 1,
                mode: [1, 0],
                t: 1.0,
                paths: 10_000,
                theta: 0.25,
            }),
        },
        output: OutputConfig {
            dir: "out".into(),
            formats: vec!["csv".into()],
            probes: vec![[1, 0], [1, 1]],
        },
    }
}

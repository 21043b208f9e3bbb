//! Experiment configuration: the TOML schema, its validation, and the
//! builders that turn a parsed config into library objects.
//!
//! A config is identified by its fingerprint, the first 16 hex digits of the
//! SHA-256 of its canonical JSON form (object keys sorted). Overrides from
//! the command line are folded into the config before fingerprinting, so the
//! fingerprint always names the experiment that actually ran.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shallow_diffusion::rng::stream;
use shallow_diffusion::schedule::{make_time_grid, schedule_from_accuracy, ScheduleParams, TimeGrid};
use shallow_diffusion::targets::{
    random_mixing, random_orthonormal, IndependentModel, LatentMixture, MixedModel,
    MixtureComponent, SubspaceModel, Target,
};
use shallow_diffusion::train::{OptimizerKind, RadiusPolicy, StepSize, TrainConfig};

use crate::Failure;

/// One Gaussian mixture component. Omitting `cov` makes it a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    #[serde(default = "one")]
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

/// One independent latent group, written as `[[target.group]]` with nested
/// `[[target.group.component]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub component: Vec<ComponentSpec>,
}

/// Which target family to synthesize and its mixture content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    /// `subspace`, `independent`, or `mixed`.
    pub kind: String,
    pub ambient_dim: usize,
    /// Latent dimension of the subspace model; group models infer theirs
    /// from the group contents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Seed for the frame or mixing matrix, separate from the run seeds so
    /// all cells of a sweep share one geometry.
    #[serde(default)]
    pub frame_seed: u64,
    /// Use the identity instead of a random orthonormal frame (group models
    /// only, and only when every group dimension lines up).
    #[serde(default)]
    pub identity_frame: bool,
    /// Condition number of the mixing matrix (mixed model only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
    /// Latent mixture of the subspace model; empty means standard Gaussian.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub component: Vec<ComponentSpec>,
    /// Latent groups of the independent and mixed models.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group: Vec<GroupSpec>,
}

/// Reverse-time discretization, either given directly as (horizon, steps)
/// or derived from a target accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub zeta: f64,
    /// Target sampling accuracy; mutually exclusive with horizon/steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "two")]
    pub c0: f64,
    #[serde(default = "one")]
    pub c1: f64,
}

/// Optimizer settings shared by every timestep and cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `cosine` (decay to zero) or `constant`.
    #[serde(default = "cosine")]
    pub lr_schedule: String,
    /// `adam` or `gd`.
    #[serde(default = "adam")]
    pub optimizer: String,
    /// Base constant of the per-timestep radius schedule. Defaults to 8
    /// when neither radius field is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_bar: Option<f64>,
    /// One fixed path-norm radius for all timesteps instead of the
    /// per-timestep schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_radius: Option<f64>,
    #[serde(default = "one")]
    pub r_init: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub fresh_noise: bool,
    #[serde(default)]
    pub warm_start: bool,
}

/// The cell grid and evaluation budgets of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Sample sizes; one cell per (n, seed) pair.
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Forward time of the per-cell probe risk that the report fits
    /// against n.
    #[serde(default = "half")]
    pub eval_time: f64,
    /// Monte Carlo budget per risk estimate.
    #[serde(default = "four_thousand")]
    pub n_mc: usize,
    /// Reverse-chain samples drawn per sampled cell.
    #[serde(default = "four_thousand")]
    pub sample_count: usize,
    /// Sample sizes whose cells additionally train the full grid and run
    /// the sampler; empty means the largest entry of `n_grid`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_at: Vec<usize>,
    /// Seeds whose cells run the sampler; empty means every seed. Full-grid
    /// training dominates a sweep's cost, so this bounds it independently
    /// of how many seeds the probe grid uses.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_seeds: Vec<u64>,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn half() -> f64 {
    0.5
}

fn four_thousand() -> usize {
    4000
}

fn cosine() -> String {
    "cosine".to_string()
}

fn adam() -> String {
    "adam".to_string()
}

/// A full experiment description, as read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    pub schedule: ScheduleSpec,
    pub train: TrainSpec,
    pub experiment: ExperimentSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, Failure> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(Failure::config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    ///
    /// serde_json keeps object keys sorted, so two configs fingerprint
    /// equal exactly when they serialize to the same values.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_string(&value).expect("json prints");
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Folds command-line and environment overrides into the config, so the
    /// fingerprint computed afterwards names the run as it actually
    /// executed. The `--seed` flag wins over `SEED_OVERRIDE`; either
    /// replaces the whole seed list.
    pub fn apply_overrides(
        &mut self,
        seed_flag: Option<u64>,
        seed_env: Option<&str>,
        n_mc: Option<usize>,
    ) -> Result<(), Failure> {
        if let Some(s) = seed_flag {
            self.experiment.seeds = vec![s];
        } else if let Some(raw) = seed_env {
            let s: u64 = raw.trim().parse().map_err(|_| {
                Failure::config(format!("SEED_OVERRIDE must be an integer, got {raw:?}"))
            })?;
            self.experiment.seeds = vec![s];
        }
        if let Some(m) = n_mc {
            if m == 0 {
                return Err(Failure::config("--n-mc must be positive"));
            }
            self.experiment.n_mc = m;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let t = &self.target;
        match t.kind.as_str() {
            "subspace" => {
                if t.latent_dim.is_none() {
                    return Err(Failure::config("subspace target needs target.latent_dim"));
                }
                if !t.group.is_empty() {
                    return Err(Failure::config(
                        "subspace target takes [[target.component]], not [[target.group]]",
                    ));
                }
                if t.identity_frame {
                    return Err(Failure::config(
                        "identity_frame only applies to group targets",
                    ));
                }
            }
            "independent" | "mixed" => {
                if t.group.is_empty() {
                    return Err(Failure::config(format!(
                        "{} target needs at least one [[target.group]]",
                        t.kind
                    )));
                }
                if !t.component.is_empty() {
                    return Err(Failure::config(format!(
                        "{} target takes [[target.group]], not [[target.component]]",
                        t.kind
                    )));
                }
                if t.kind == "mixed" && t.condition_number.is_none() {
                    return Err(Failure::config(
                        "mixed target needs target.condition_number",
                    ));
                }
                if t.kind == "mixed" && t.identity_frame {
                    return Err(Failure::config(
                        "identity_frame contradicts a conditioned mixing matrix",
                    ));
                }
            }
            other => {
                return Err(Failure::config(format!(
                    "unknown target kind {other:?}; expected subspace, independent, or mixed"
                )));
            }
        }
        if t.kind != "mixed" && t.condition_number.is_some() {
            return Err(Failure::config(
                "condition_number only applies to the mixed target",
            ));
        }

        let s = &self.schedule;
        match (s.epsilon, s.horizon, s.steps) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => {
                return Err(Failure::config(
                    "schedule.epsilon is mutually exclusive with horizon/steps",
                ));
            }
            _ => {
                return Err(Failure::config(
                    "schedule needs either epsilon or both horizon and steps",
                ));
            }
        }

        let tr = &self.train;
        if tr.lr_schedule != "cosine" && tr.lr_schedule != "constant" {
            return Err(Failure::config(format!(
                "train.lr_schedule must be cosine or constant, got {:?}",
                tr.lr_schedule
            )));
        }
        if tr.optimizer != "adam" && tr.optimizer != "gd" {
            return Err(Failure::config(format!(
                "train.optimizer must be adam or gd, got {:?}",
                tr.optimizer
            )));
        }
        if tr.r_bar.is_some() && tr.fixed_radius.is_some() {
            return Err(Failure::config(
                "set train.r_bar or train.fixed_radius, not both",
            ));
        }
        if !(tr.learning_rate > 0.0) {
            return Err(Failure::config("train.learning_rate must be positive"));
        }
        if tr.width == 0 || tr.epochs == 0 || tr.batch_size == 0 {
            return Err(Failure::config(
                "train.width, train.epochs, and train.batch_size must be positive",
            ));
        }

        let e = &self.experiment;
        if e.n_grid.is_empty() || e.seeds.is_empty() {
            return Err(Failure::config(
                "experiment.n_grid and experiment.seeds must be nonempty",
            ));
        }
        if e.n_grid.iter().any(|&n| n == 0) {
            return Err(Failure::config("sample sizes must be positive"));
        }
        if !(e.eval_time > 0.0) {
            return Err(Failure::config("experiment.eval_time must be positive"));
        }
        if e.n_mc == 0 || e.sample_count == 0 {
            return Err(Failure::config(
                "experiment.n_mc and experiment.sample_count must be positive",
            ));
        }
        for n in &e.sample_at {
            if !e.n_grid.contains(n) {
                return Err(Failure::config(format!(
                    "experiment.sample_at entry {n} is not in n_grid"
                )));
            }
        }
        for s in &e.sample_seeds {
            if !e.seeds.contains(s) {
                return Err(Failure::config(format!(
                    "experiment.sample_seeds entry {s} is not in seeds"
                )));
            }
        }
        Ok(())
    }

    /// Sample sizes whose cells run the full grid and the sampler.
    pub fn sample_at(&self) -> Vec<usize> {
        if self.experiment.sample_at.is_empty() {
            vec![*self.experiment.n_grid.iter().max().expect("nonempty")]
        } else {
            self.experiment.sample_at.clone()
        }
    }

    /// Whether one cell runs the full grid and the sampler.
    pub fn samples_cell(&self, seed: u64, n: usize) -> bool {
        self.sample_at().contains(&n)
            && (self.experiment.sample_seeds.is_empty()
                || self.experiment.sample_seeds.contains(&seed))
    }

    pub fn build_target(&self) -> Result<Target, Failure> {
        let t = &self.target;
        let big_d = t.ambient_dim;
        let mut frame_rng = stream(t.frame_seed, 0);
        match t.kind.as_str() {
            "subspace" => {
                let d = t.latent_dim.expect("validated");
                let latent = if t.component.is_empty() {
                    LatentMixture::standard_gaussian(d)
                } else {
                    mixture_from(&t.component, d)?
                };
                let u = random_orthonormal(big_d, d, &mut frame_rng).map_err(Failure::config)?;
                let model = SubspaceModel::new(u, latent).map_err(Failure::config)?;
                Ok(Target::Subspace(model))
            }
            "independent" => {
                let groups = group_mixtures(&t.group)?;
                let u = if t.identity_frame {
                    Array2::eye(big_d)
                } else {
                    random_orthonormal(big_d, big_d, &mut frame_rng).map_err(Failure::config)?
                };
                let model = IndependentModel::new(u, groups).map_err(Failure::config)?;
                Ok(Target::Independent(model))
            }
            "mixed" => {
                let groups = group_mixtures(&t.group)?;
                let cond = t.condition_number.expect("validated");
                let a = random_mixing(big_d, cond, &mut frame_rng).map_err(Failure::config)?;
                let model = MixedModel::new(a, groups).map_err(Failure::config)?;
                Ok(Target::Mixed(model))
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn schedule_params(&self, target: &Target) -> Result<ScheduleParams, Failure> {
        let s = &self.schedule;
        let params = if let Some(eps) = s.epsilon {
            schedule_from_accuracy(eps, s.zeta, target.ambient_dim(), target.mu0(), s.c0, s.c1)
                .map_err(Failure::config)?
        } else {
            ScheduleParams::new(
                s.horizon.expect("validated"),
                s.steps.expect("validated"),
                s.zeta,
            )
            .map_err(Failure::config)?
        };
        if self.experiment.eval_time > params.horizon {
            return Err(Failure::config(format!(
                "experiment.eval_time {} exceeds the horizon {}",
                self.experiment.eval_time, params.horizon
            )));
        }
        Ok(params)
    }

    pub fn build_grid(&self, target: &Target) -> Result<TimeGrid, Failure> {
        let params = self.schedule_params(target)?;
        make_time_grid(&params).map_err(Failure::config)
    }

    /// The library training config for one cell. The radius policy's latent
    /// dimension comes from the target's rate dimension.
    pub fn train_config(&self, seed: u64, rate_dim: usize) -> TrainConfig {
        let tr = &self.train;
        let step = match tr.lr_schedule.as_str() {
            "constant" => StepSize::Constant(tr.learning_rate),
            _ => StepSize::Cosine {
                initial: tr.learning_rate,
            },
        };
        let optimizer = match tr.optimizer.as_str() {
            "gd" => OptimizerKind::Gd,
            _ => OptimizerKind::adam(),
        };
        let radius = match (tr.fixed_radius, tr.r_bar) {
            (Some(r), _) => RadiusPolicy::Fixed { radius: r },
            (None, r_bar) => RadiusPolicy::PerTime {
                r_bar: r_bar.unwrap_or(8.0),
                d_latent: rate_dim,
            },
        };
        TrainConfig {
            width: tr.width,
            epochs: tr.epochs,
            batch_size: tr.batch_size,
            step,
            optimizer,
            radius,
            r_init: tr.r_init,
            seed,
            max_steps: tr.max_steps,
            fresh_noise: tr.fresh_noise,
            warm_start: tr.warm_start,
        }
    }
}

fn mixture_from(specs: &[ComponentSpec], dim: usize) -> Result<LatentMixture, Failure> {
    let mut components = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.mean.len() != dim {
            return Err(Failure::config(format!(
                "component mean has {} entries, expected {dim}",
                spec.mean.len()
            )));
        }
        let mean = Array1::from_vec(spec.mean.clone());
        let cov = match &spec.cov {
            None => Array2::zeros((dim, dim)),
            Some(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Failure::config(format!(
                        "component cov must be {dim}×{dim}"
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Array2::from_shape_vec((dim, dim), flat).expect("shape checked")
            }
        };
        components.push(MixtureComponent {
            weight: spec.weight,
            mean,
            cov,
        });
    }
    LatentMixture::new(components).map_err(Failure::config)
}

fn group_mixtures(groups: &[GroupSpec]) -> Result<Vec<LatentMixture>, Failure> {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if g.component.is_empty() {
                return Err(Failure::config(format!("target.group {i} has no components")));
            }
            let dim = g.component[0].mean.len();
            mixture_from(&g.component, dim)
        })
        .collect()
}

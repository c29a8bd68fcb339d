//! Run configuration: per-environment defaults, TOML overlay and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderKind;
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::policy::PolicyMode;

/// Output directory used when neither a flag, the file nor `GSSM_OUT_DIR`
/// names one.
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Environment variable consulted for the output directory.
pub const OUT_DIR_VAR: &str = "GSSM_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvId,
    pub seed: u64,
    pub iterations: usize,
    pub encoder: EncoderKind,
    pub policy_mode: PolicyMode,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub test: TestConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim_lat: usize,
    pub dim_latxy: usize,
    /// Message-passing layers in the encoder.
    pub enc_layers: usize,
    pub dim_h: usize,
    /// Linear layers in the decoder.
    pub dec_layers: usize,
    pub self_loop: bool,
    pub lr: f64,
    /// Latent samples per target in the training ELBO.
    pub k_train: usize,
    /// Mixture components for evaluation predictions.
    pub k_eval: usize,
    /// ELBO updates per iteration.
    pub updates: usize,
    /// Tasks per ELBO update.
    pub tasks_per_update: usize,
    pub context_min: usize,
    pub context_max: usize,
    /// Targets kept per task item after the split.
    pub max_targets: usize,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    /// Policy updates per iteration.
    pub updates: usize,
    pub gamma: f64,
    /// Start states per BPTT update.
    pub batch: usize,
    pub horizon: usize,
    /// Length scale of the cart-pole reward used for training rollouts.
    pub train_reward_width: f64,
    pub grad_clip: f64,
    /// Std of Gaussian action noise (cart-pole) or probability of a uniform
    /// action (acrobot) while exploring with the current policy.
    pub exploration_noise: f64,
    pub ppo: PpoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSection {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lambda: f64,
    pub rollouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Iterations between task resamples.
    pub resample_every: usize,
    /// Episodes kept per task.
    pub buffer_episodes: usize,
    /// Leading iterations that explore with uniform random actions.
    pub random_iterations: usize,
    pub eval_tasks: usize,
    pub eval_episodes: usize,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    pub tasks: usize,
    pub episodes: usize,
    /// Exploration transitions collected before inference.
    pub context: usize,
    /// Fine-tuning updates per task for the non-amortized baseline.
    pub finetune_steps: usize,
}

impl RunConfig {
    pub fn defaults(env: EnvId) -> Self {
        let (dec_layers, dim_h, hidden) = match env {
            EnvId::Cartpole => (2, 200, 50),
            EnvId::Acrobot => (5, 400, 128),
        };
        Self {
            env,
            seed: 0,
            iterations: match env {
                EnvId::Cartpole => 200,
                EnvId::Acrobot => 60,
            },
            encoder: EncoderKind::Gssm,
            policy_mode: PolicyMode::Amortized,
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
            model: ModelConfig {
                dim_lat: 16,
                dim_latxy: 32,
                enc_layers: 2,
                dim_h,
                dec_layers,
                self_loop: true,
                lr: 1e-3,
                k_train: 4,
                k_eval: 32,
                updates: match env {
                    EnvId::Cartpole => 10,
                    EnvId::Acrobot => 20,
                },
                tasks_per_update: 8,
                context_min: 5,
                context_max: 50,
                max_targets: 64,
                grad_clip: 10.0,
            },
            policy: PolicyConfig {
                hidden,
                layers: 2,
                lr: match env {
                    EnvId::Cartpole => 3e-3,
                    EnvId::Acrobot => 3e-4,
                },
                updates: match env {
                    EnvId::Cartpole => 5,
                    EnvId::Acrobot => 3,
                },
                gamma: match env {
                    EnvId::Cartpole => 0.95,
                    EnvId::Acrobot => 0.99,
                },
                batch: 16,
                horizon: match env {
                    EnvId::Cartpole => 25,
                    EnvId::Acrobot => 50,
                },
                train_reward_width: 1.0,
                grad_clip: match env {
                    EnvId::Cartpole => 10.0,
                    EnvId::Acrobot => 0.5,
                },
                exploration_noise: match env {
                    EnvId::Cartpole => 1.0,
                    EnvId::Acrobot => 0.1,
                },
                ppo: PpoSection {
                    clip: 0.2,
                    epochs: 10,
                    minibatch: 64,
                    entropy_coef: 0.01,
                    value_coef: 0.5,
                    lambda: 0.95,
                    rollouts: 16,
                },
            },
            train: TrainConfig {
                resample_every: match env {
                    EnvId::Cartpole => 10,
                    EnvId::Acrobot => 3,
                },
                buffer_episodes: 20,
                random_iterations: 1,
                eval_tasks: 3,
                eval_episodes: 10,
                checkpoint_every: 50,
            },
            test: TestConfig {
                tasks: 10,
                episodes: 50,
                context: 50,
                finetune_steps: 5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim_lat", self.model.dim_lat),
            ("model.dim_latxy", self.model.dim_latxy),
            ("model.enc_layers", self.model.enc_layers),
            ("model.dim_h", self.model.dim_h),
            ("model.dec_layers", self.model.dec_layers),
            ("model.k_train", self.model.k_train),
            ("model.k_eval", self.model.k_eval),
            ("model.tasks_per_update", self.model.tasks_per_update),
            ("model.context_min", self.model.context_min),
            ("model.max_targets", self.model.max_targets),
            ("policy.hidden", self.policy.hidden),
            ("policy.batch", self.policy.batch),
            ("policy.ppo.epochs", self.policy.ppo.epochs),
            ("policy.ppo.minibatch", self.policy.ppo.minibatch),
            ("policy.ppo.rollouts", self.policy.ppo.rollouts),
            ("train.resample_every", self.train.resample_every),
            ("train.buffer_episodes", self.train.buffer_episodes),
            ("test.episodes", self.test.episodes),
            ("test.context", self.test.context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model.context_min > self.model.context_max {
            return Err(Error::Config(format!(
                "model.context_min {} exceeds model.context_max {}",
                self.model.context_min, self.model.context_max
            )));
        }
        let rates = [
            ("model.lr", self.model.lr),
            ("model.grad_clip", self.model.grad_clip),
            ("policy.lr", self.policy.lr),
            ("policy.grad_clip", self.policy.grad_clip),
            ("policy.train_reward_width", self.policy.train_reward_width),
            ("policy.ppo.clip", self.policy.ppo.clip),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let unit = [
            ("policy.gamma", self.policy.gamma),
            ("policy.ppo.lambda", self.policy.ppo.lambda),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let nonneg = [
            ("policy.exploration_noise", self.policy.exploration_noise),
            ("policy.ppo.entropy_coef", self.policy.ppo.entropy_coef),
            ("policy.ppo.value_coef", self.policy.ppo.value_coef),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.env == EnvId::Acrobot && self.policy.exploration_noise > 1.0 {
            return Err(Error::Config(
                "policy.exploration_noise is a probability on acrobot".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parse a complete config, such as an effective-config dump.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub env: Option<EnvId>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub encoder: Option<EncoderKind>,
    pub policy_mode: Option<PolicyMode>,
    pub out_dir: Option<PathBuf>,
}

/// Resolve a config from an optional TOML document, flag overrides and the
/// output-directory environment value.
///
/// Keys absent from the file take the defaults of the resolved environment.
/// The output directory comes from the flag, then the file, then
/// `env_out_dir`, then [`DEFAULT_OUT_DIR`].
pub fn resolve(
    file: Option<&str>,
    overrides: &Overrides,
    env_out_dir: Option<&str>,
) -> Result<RunConfig> {
    let table: toml::Table = match file {
        Some(text) => text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?,
        None => toml::Table::new(),
    };
    let env = match (overrides.env, table.get("env")) {
        (Some(env), _) => env,
        (None, Some(v)) => v
            .as_str()
            .ok_or_else(|| Error::Config("env must be a string".into()))?
            .parse()?,
        (None, None) => EnvId::Cartpole,
    };
    let file_sets_out = table.contains_key("out_dir");
    let mut merged = toml::Table::try_from(RunConfig::defaults(env)).expect("defaults serialize");
    overlay(&mut merged, table);
    let mut cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.env = env;
    if !file_sets_out {
        if let Some(dir) = env_out_dir.filter(|d| !d.is_empty()) {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(iterations) = overrides.iterations {
        cfg.iterations = iterations;
    }
    if let Some(encoder) = overrides.encoder {
        cfg.encoder = encoder;
    }
    if let Some(mode) = overrides.policy_mode {
        cfg.policy_mode = mode;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively replace entries of `base` with those of `top`. Keys missing
/// from `base` are inserted so deserialization can reject them.
fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_environment_defaults() {
        let c = resolve(Some(""), &Overrides::default(), None).unwrap();
        assert_eq!(c, RunConfig::defaults(EnvId::Cartpole));
        assert_eq!(
            (c.model.enc_layers, c.model.dim_latxy, c.model.dim_lat),
            (2, 32, 16)
        );
        assert_eq!(
            (c.model.dec_layers, c.model.dim_h, c.policy.hidden),
            (2, 200, 50)
        );
        let a = resolve(Some("env = \"acrobot\""), &Overrides::default(), None).unwrap();
        assert_eq!(
            (a.model.dec_layers, a.model.dim_h, a.policy.hidden),
            (5, 400, 128)
        );
    }

    #[test]
    fn zero_latent_dimension_is_rejected() {
        let err = resolve(Some("[model]\ndim_lat = 0"), &Overrides::default(), None).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn unknown_keys_and_envs_are_rejected() {
        assert!(resolve(Some("bogus = 1"), &Overrides::default(), None).is_err());
        assert!(resolve(
            Some("[model]\ndim_lat_typo = 3"),
            &Overrides::default(),
            None
        )
        .is_err());
        assert!(resolve(Some("env = \"mountaincar\""), &Overrides::default(), None).is_err());
    }
}

//! Experiment configuration: a TOML file, a named profile and flag overrides.
//!
//! ```toml
//! profile = "desk"
//!
//! [task]
//! n_symbols = 30
//! l_max = 9
//! train_size = 200000
//! test_size = 5000
//! seed = 0
//!
//! [train]              # base GRU
//! hidden = 64
//! mode = "autoregressive"      # or "no-input"
//! feedback = "teacher-forced"  # or "self-fed"
//! batch_size = 256
//! steps = 10000
//! eval_every = 1000
//! eval_size = 5000
//! seed = 0
//! adam = { lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.1 }
//!
//! [aux]                # interventions, probes, toy model
//! steps = 10000
//! batch_size = 256
//! eval_every = 1000
//! eval_size = 1000
//! seed = 0
//! adam = { lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.1 }
//! ```
//!
//! Every table and key is optional; missing values come from the profile.

use std::path::Path;
use std::str::FromStr;

use clap::Args;
use onion_core::trainer::{AuxConfig, TrainConfig};
use onion_core::{DecodeMode, Feedback, TaskConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 200K training sequences, 10K steps.
    Desk,
    /// 1M training sequences, 40K steps.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub aux: AuxConfig,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let (task, train) = match p {
            Profile::Desk => (TaskConfig::desk(), TrainConfig::desk()),
            Profile::Paper => (TaskConfig::paper(), TrainConfig::paper()),
        };
        Self {
            profile: p,
            task,
            train,
            aux: AuxConfig::default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Base profile for values missing from the file.
    #[arg(long, value_enum, global = true)]
    pub profile: Option<Profile>,
    /// Hidden size of the base GRU (and of the toy model).
    #[arg(long = "n", global = true)]
    pub hidden: Option<usize>,
    /// Decode mode: `ar` or `noinput`.
    #[arg(long, global = true, value_parser = DecodeMode::from_str)]
    pub mode: Option<DecodeMode>,
    /// Base-model training feedback: `teacher-forced` or `self-fed`.
    #[arg(long, global = true, value_parser = parse_feedback)]
    pub feedback: Option<Feedback>,
    /// Optimisation steps (base model for `train`, auxiliary model otherwise).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub eval_every: Option<usize>,
    #[arg(long, global = true)]
    pub eval_size: Option<usize>,
    /// Seed for initialisation and batching.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seed for corpus generation.
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    #[arg(long, global = true)]
    pub n_symbols: Option<usize>,
    #[arg(long, global = true)]
    pub l_max: Option<usize>,
    #[arg(long, global = true)]
    pub train_size: Option<usize>,
    #[arg(long, global = true)]
    pub test_size: Option<usize>,
}

fn parse_feedback(s: &str) -> Result<Feedback, String> {
    match s {
        "teacher-forced" | "tf" => Ok(Feedback::TeacherForced),
        "self-fed" | "sf" => Ok(Feedback::SelfFed),
        _ => Err(format!("unknown feedback `{s}` (teacher-forced | self-fed)")),
    }
}

/// Which section the optimisation flags apply to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Base,
    Aux,
}

impl ConfigArgs {
    pub fn resolve(&self, target: Target) -> Result<ExperimentConfig, Failure> {
        let file = match &self.config {
            Some(p) => Some(read_toml(p)?),
            None => None,
        };
        let profile = self
            .profile
            .or_else(|| {
                file.as_ref()
                    .and_then(|v| v.get("profile"))
                    .and_then(|p| p.clone().try_into().ok())
            })
            .unwrap_or(Profile::Desk);
        let mut value = toml::Value::try_from(ExperimentConfig::profile(profile)).expect("serializable");
        if let Some(f) = file {
            merge(&mut value, f);
        }
        let mut cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Failure::usage(format!("invalid configuration: {e}")))?;
        cfg.profile = profile;
        self.apply(&mut cfg, target);
        cfg.task.validate()?;
        cfg.train.validate()?;
        cfg.aux.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig, target: Target) {
        let t = &mut cfg.task;
        set(&mut t.n_symbols, self.n_symbols);
        set(&mut t.l_max, self.l_max);
        set(&mut t.train_size, self.train_size);
        set(&mut t.test_size, self.test_size);
        set(&mut t.seed, self.data_seed);
        let tr = &mut cfg.train;
        set(&mut tr.hidden, self.hidden);
        set(&mut tr.mode, self.mode);
        set(&mut tr.feedback, self.feedback);
        match target {
            Target::Base => {
                set(&mut tr.steps, self.steps);
                set(&mut tr.batch_size, self.batch_size);
                set(&mut tr.eval_every, self.eval_every);
                set(&mut tr.eval_size, self.eval_size);
                set(&mut tr.seed, self.seed);
                set(&mut tr.adam.lr, self.lr);
                set(&mut tr.adam.weight_decay, self.weight_decay);
            }
            Target::Aux => {
                let a = &mut cfg.aux;
                set(&mut a.steps, self.steps);
                set(&mut a.batch_size, self.batch_size);
                set(&mut a.eval_every, self.eval_every);
                set(&mut a.eval_size, self.eval_size);
                set(&mut a.seed, self.seed);
                set(&mut a.adam.lr, self.lr);
                set(&mut a.adam.weight_decay, self.weight_decay);
            }
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn read_toml(path: &Path) -> Result<toml::Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    text.parse::<toml::Value>()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Overlay `top` onto `base`, recursing into tables.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_profile_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nhidden = 48\nsteps = 7\n[train.adam]\nlr = 0.01\n").unwrap();
        let args = ConfigArgs {
            config: Some(p),
            steps: Some(9),
            ..Default::default()
        };
        let cfg = args.resolve(Target::Base).unwrap();
        assert_eq!(cfg.train.hidden, 48);
        assert_eq!(cfg.train.steps, 9);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.train.adam.weight_decay, 0.1);
        assert_eq!(cfg.task.train_size, 200_000);
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn aux_target_leaves_base_steps_alone() {
        let args = ConfigArgs {
            steps: Some(5),
            profile: Some(Profile::Paper),
            ..Default::default()
        };
        let cfg = args.resolve(Target::Aux).unwrap();
        assert_eq!(cfg.aux.steps, 5);
        assert_eq!(cfg.train.steps, 40_000);
        assert_eq!(cfg.task.train_size, 1_000_000);
    }
}

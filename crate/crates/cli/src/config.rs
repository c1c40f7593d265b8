//! `key = value` run configuration. Keys are grouped by prefix: `env.`,
//! `train.`, `tsne.` and `cmv.`. Lines starting with `#` and anything after
//! a `#` are comments.

use std::str::FromStr;

use rlvis_core::classviz::{CmvConfig, CmvInit};
use rlvis_core::policy::{Baseline, TrainConfig};
use rlvis_core::tsne::TsneConfig;
use rlvis_core::{EnvConfig, Objective};

use crate::error::{usage, CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub tsne: TsneConfig,
    pub cmv: CmvConfig,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| format!("invalid value '{raw}' for {key}: {e}"))
}

fn flag(key: &str, raw: &str) -> Result<bool, String> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("invalid value '{raw}' for {key}: expected true or false")),
    }
}

pub fn parse_objective(raw: &str) -> Result<Objective, String> {
    match raw {
        "probability" => Ok(Objective::Probability),
        "log-probability" => Ok(Objective::LogProbability),
        "logit" => Ok(Objective::Logit),
        _ => Err(format!("unknown objective '{raw}' (expected probability, log-probability or logit)")),
    }
}

pub fn parse_init(raw: &str) -> Result<CmvInit, String> {
    match raw {
        "mid-gray" => Ok(CmvInit::MidGray),
        "noise" => Ok(CmvInit::Noise),
        _ => Err(format!("unknown init '{raw}' (expected mid-gray or noise)")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return usage(format!("config line {}: duplicate key {key}", n + 1));
            }
            cfg.set(key, raw)
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.tsne.validate()?;
        self.cmv.validate()?;
        Ok(())
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let (e, t, s, c) = (&mut self.env, &mut self.train, &mut self.tsne, &mut self.cmv);
        match key {
            "env.num_cubes" => e.num_cubes = value(key, raw)?,
            "env.arena_half_width" => e.arena_half_width = value(key, raw)?,
            "env.spawn_depth_min" => e.spawn_depth_min = value(key, raw)?,
            "env.spawn_depth_max" => e.spawn_depth_max = value(key, raw)?,
            "env.collect_radius" => e.collect_radius = value(key, raw)?,
            "env.step_forward" => e.step_forward = value(key, raw)?,
            "env.step_lateral" => e.step_lateral = value(key, raw)?,
            "env.horizon" => e.horizon = value(key, raw)?,
            "env.image_h" => e.image_h = value(key, raw)?,
            "env.image_w" => e.image_w = value(key, raw)?,
            "env.seed" => e.seed = value(key, raw)?,
            "env.fov_degrees" => e.fov_degrees = value(key, raw)?,
            "env.cube_size" => e.cube_size = value(key, raw)?,
            "env.camera_height" => e.camera_height = value(key, raw)?,

            "train.learning_rate" => t.learning_rate = value(key, raw)?,
            "train.episodes" => t.episodes = value(key, raw)?,
            "train.batch_episodes" => t.batch_episodes = value(key, raw)?,
            "train.mask_left" => t.mask_left = flag(key, raw)?,
            "train.discount" => t.discount = value(key, raw)?,
            "train.baseline" => {
                t.baseline = match raw {
                    "none" => Baseline::None,
                    "mean-return" => Baseline::MeanReturn,
                    _ => return Err(format!("invalid value '{raw}' for {key}: expected none or mean-return")),
                }
            }
            "train.seed" => t.seed = value(key, raw)?,
            "train.eval_every" => t.eval_every = value(key, raw)?,
            "train.eval_episodes" => t.eval_episodes = value(key, raw)?,
            "train.target_mean_cubes" => t.target_mean_cubes = value(key, raw)?,

            "tsne.perplexity" => s.perplexity = value(key, raw)?,
            "tsne.iterations" => s.iterations = value(key, raw)?,
            "tsne.learning_rate" => s.learning_rate = value(key, raw)?,
            "tsne.early_exaggeration" => s.early_exaggeration = value(key, raw)?,
            "tsne.exaggeration_iters" => s.exaggeration_iters = value(key, raw)?,
            "tsne.initial_momentum" => s.initial_momentum = value(key, raw)?,
            "tsne.final_momentum" => s.final_momentum = value(key, raw)?,
            "tsne.momentum_switch" => s.momentum_switch = value(key, raw)?,
            "tsne.seed" => s.seed = value(key, raw)?,

            "cmv.steps" => c.steps = value(key, raw)?,
            "cmv.step_size" => c.step_size = value(key, raw)?,
            "cmv.l2_decay" => c.l2_decay = value(key, raw)?,
            "cmv.blur_every" => c.blur_every = value(key, raw)?,
            "cmv.clamp_min" => c.clamp_min = value(key, raw)?,
            "cmv.clamp_max" => c.clamp_max = value(key, raw)?,
            "cmv.init" => c.init = parse_init(raw)?,
            "cmv.objective" => c.objective = parse_objective(raw)?,
            "cmv.seed" => c.seed = value(key, raw)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn load(path: Option<&std::path::Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = crate::formats::read_file(p)?;
                let text = String::from_utf8(bytes)
                    .map_err(|_| CliError::Usage(format!("{} is not UTF-8", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_are_applied() {
        let cfg = RunConfig::parse(
            "env.num_cubes = 2\ntrain.learning_rate=0.1 # trailing comment\ntrain.baseline = none\n\
             train.mask_left = true\ntsne.perplexity = 12.5\ncmv.init = noise\ncmv.objective = logit\n",
        )
        .unwrap();
        assert_eq!(cfg.env.num_cubes, 2);
        assert_eq!(cfg.train.learning_rate, 0.1);
        assert_eq!(cfg.train.baseline, Baseline::None);
        assert!(cfg.train.mask_left);
        assert_eq!(cfg.tsne.perplexity, 12.5);
        assert_eq!(cfg.cmv.init, CmvInit::Noise);
        assert_eq!(cfg.cmv.objective, Objective::Logit);
    }

    #[test]
    fn bad_input_is_rejected() {
        for text in [
            "env.num_cubez = 3",
            "env.num_cubes = three",
            "env.num_cubes = -1",
            "train.mask_left = yes",
            "no equals sign",
            "env.horizon = 5\nenv.horizon = 6",
            "train.learning_rate = 0",
            "env.spawn_depth_min = 20",
            "tsne.perplexity = 1",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }
}

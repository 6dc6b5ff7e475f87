//! Layered run settings: command-line flags over a `key = value` config file
//! over an optional preset over built-in defaults.
//!
//! Training keys (`steps`, `lr`, `batch`, `seed`, `weight_decay`,
//! `charbonnier_eps`, `sample_steps`, `augment`) may be prefixed with
//! `stage<N>.` to target one stage; the prefixed form wins within a layer.
//! `model.<key>` entries are model configuration keys, `schedule.<key>`
//! entries configure the noise schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use sateco::diffusion::SchedulerConfig;
use sateco::networks::{ModelConfig, Variant};
use sateco::pipeline::{Stage, StageConfig, TrainPlan};

use crate::CliError;

const STAGE_KEYS: [&str; 8] = ["steps", "lr", "batch", "seed", "weight_decay", "charbonnier_eps", "sample_steps", "augment"];
const GLOBAL_KEYS: [&str; 5] = ["variant", "preset", "infer_steps", "eval_seed", "held_out"];

/// Parse a `key = value` file; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!("config line {}: expected key = value, got {raw:?}", n + 1)).into());
        };
        let (k, v) = (k.trim(), v.trim());
        check_key(k).map_err(|e| CliError::Config(format!("config line {}: {e}", n + 1)))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn check_key(k: &str) -> std::result::Result<(), String> {
    if k.starts_with("model.") || k.starts_with("schedule.") || GLOBAL_KEYS.contains(&k) || STAGE_KEYS.contains(&k) {
        return Ok(());
    }
    if let Some((prefix, rest)) = k.split_once('.') {
        if let Some(n) = prefix.strip_prefix("stage") {
            if n.parse::<u8>().ok().is_some_and(|n| n <= 4) && STAGE_KEYS.contains(&rest) {
                return Ok(());
            }
        }
    }
    Err(format!("unknown key {k:?}"))
}

/// Built-in presets as config layers.
pub fn preset(name: &str) -> Result<BTreeMap<String, String>> {
    match name {
        "none" => Ok(BTreeMap::new()),
        "desk" => {
            let plan = TrainPlan::desk(0);
            let mut m = BTreeMap::new();
            m.insert("batch".into(), "2".into());
            for s in Stage::ALL {
                let c = plan.stage(s);
                m.insert(format!("stage{}.steps", s.index()), c.steps.to_string());
                m.insert(format!("stage{}.lr", s.index()), format!("{:?}", c.learning_rate));
            }
            Ok(m)
        }
        _ => Err(CliError::Config(format!("unknown preset {name:?} (expected none or desk)")).into()),
    }
}

/// Resolved settings of one invocation.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    flags: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
    preset: BTreeMap<String, String>,
    pub config_path: Option<PathBuf>,
}

impl Settings {
    /// `flags` holds only the flags actually given.
    pub fn load(config: Option<&Path>, flags: BTreeMap<String, String>) -> Result<Self> {
        let file = match config {
            Some(p) => parse_config(&fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?)?,
            None => BTreeMap::new(),
        };
        let name = flags.get("preset").or_else(|| file.get("preset")).map_or("none", String::as_str).to_string();
        Ok(Settings { preset: preset(&name)?, flags, file, config_path: config.map(Path::to_path_buf) })
    }

    /// Highest-precedence value of `key` for `stage` (global keys when `None`).
    pub fn raw(&self, stage: Option<Stage>, key: &str) -> Option<&str> {
        let scoped = stage.map(|s| format!("stage{}.{key}", s.index()));
        [&self.flags, &self.file, &self.preset].into_iter().find_map(|layer| scoped.as_ref().and_then(|k| layer.get(k)).or_else(|| layer.get(key))).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, stage: Option<Stage>, key: &str) -> Result<Option<T>> {
        match self.raw(stage, key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| CliError::Config(format!("invalid value {v:?} for {key}")).into()),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.get(None, "seed")?.unwrap_or(0))
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.get(None, "variant")?.unwrap_or(Variant::D))
    }

    /// Model configuration for the resolved variant plus `model.*` keys.
    pub fn model(&self) -> Result<ModelConfig> {
        let (unet, vae) = self.variant()?.guidance();
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        pairs.insert("unet_guidance".into(), unet.as_str().into());
        pairs.insert("vae_guidance".into(), vae.as_str().into());
        for layer in [&self.preset, &self.file, &self.flags] {
            pairs.extend(layer.iter().filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone()))));
        }
        Ok(ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
    }

    pub fn schedule(&self) -> Result<SchedulerConfig> {
        let d = SchedulerConfig::default();
        Ok(SchedulerConfig {
            beta_1: self.get(None, "schedule.beta_1")?.unwrap_or(d.beta_1),
            beta_t: self.get(None, "schedule.beta_t")?.unwrap_or(d.beta_t),
            steps: self.get(None, "schedule.steps")?.unwrap_or(d.steps),
            sqrt_space: self.get(None, "schedule.sqrt_space")?.unwrap_or(d.sqrt_space),
        })
    }

    /// Stage configuration; the stage seed defaults to `seed + 11 + stage`.
    pub fn stage(&self, s: Stage) -> Result<StageConfig> {
        let base = StageConfig::new(s, 1000);
        let seed = self.seed()?.wrapping_add(11 + s.index() as u64);
        let cfg = StageConfig {
            stage: s,
            steps: self.get(Some(s), "steps")?.unwrap_or(base.steps),
            batch_clips: self.get(Some(s), "batch")?.unwrap_or(base.batch_clips),
            learning_rate: self.get(Some(s), "lr")?.unwrap_or(base.learning_rate),
            seed: if self.scoped(s, "seed") { self.get(Some(s), "seed")?.unwrap_or(seed) } else { seed },
            charbonnier_eps: self.get(Some(s), "charbonnier_eps")?.unwrap_or(base.charbonnier_eps),
            weight_decay: self.get(Some(s), "weight_decay")?.unwrap_or(base.weight_decay),
            sample_steps: self.get(Some(s), "sample_steps")?.unwrap_or(base.sample_steps),
            augment: self.get(Some(s), "augment")?.unwrap_or(base.augment),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Whether some layer sets `stage<N>.key` explicitly.
    fn scoped(&self, s: Stage, key: &str) -> bool {
        let k = format!("stage{}.{key}", s.index());
        [&self.flags, &self.file, &self.preset].iter().any(|l| l.contains_key(&k))
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        let seed = self.seed()?;
        let out = Stage::ALL.into_iter().map(|s| self.stage(s)).collect::<Result<Vec<_>>>()?;
        Ok(TrainPlan {
            seed,
            schedule: self.schedule()?,
            stages: out.try_into().expect("five stages"),
            sample_steps: self.get(None, "infer_steps")?.unwrap_or(50),
            eval_seed: self.get(None, "eval_seed")?.unwrap_or(seed.wrapping_add(3)),
        })
    }

    /// Every resolved value, for manifests.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let mut keys: Vec<&String> = self.preset.keys().chain(self.file.keys()).chain(self.flags.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter().filter_map(|k| self.raw(None, k).map(|v| (k.clone(), v.to_string()))).collect()
    }
}

/// Parse `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let Some((h, w)) = s.split_once(['x', 'X']) else { bail!(CliError::Config(format!("size {s:?} is not HxW"))) };
    match (h.parse(), w.parse()) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => bail!(CliError::Config(format!("size {s:?} is not HxW"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn settings(flags: &[(&str, &str)], file: &str) -> Settings {
        let file = parse_config(file).unwrap();
        let flags = map(flags);
        let name = flags.get("preset").or_else(|| file.get("preset")).cloned().unwrap_or("none".into());
        Settings { preset: preset(&name).unwrap(), flags, file, config_path: None }
    }

    #[test]
    fn config_parsing_skips_comments_and_rejects_unknown_keys() {
        let m = parse_config("# header\n steps = 12 # trailing\n\nstage3.lr=0.5\nmodel.frames = 2\n").unwrap();
        assert_eq!(m, map(&[("steps", "12"), ("stage3.lr", "0.5"), ("model.frames", "2")]));
        assert!(parse_config("stage5.lr = 1").is_err());
        assert!(parse_config("stage1.frames = 1").is_err());
        assert!(parse_config("lr 1e-3").is_err());
    }

    #[test]
    fn precedence_is_flags_then_file_then_preset_then_default() {
        let s = settings(&[("lr", "0.3")], "lr = 0.2\nsteps = 7\nstage1.steps = 9\npreset = desk\n");
        let c0 = s.stage(Stage::Pretrain).unwrap();
        let c1 = s.stage(Stage::Upscaler).unwrap();
        // global flag beats the preset's stage-scoped value; file-scoped beats file-global
        assert_eq!((c0.learning_rate, c1.learning_rate), (0.3, 0.3));
        assert_eq!((c0.steps, c1.steps), (7, 9));
        assert_eq!(c0.batch_clips, 2);
        let d = settings(&[], "");
        assert_eq!(d.stage(Stage::Refiner).unwrap(), StageConfig { seed: 15, ..StageConfig::new(Stage::Refiner, 1000) });
    }

    #[test]
    fn desk_preset_reproduces_the_desk_plan() {
        let s = settings(&[("preset", "desk")], "");
        assert_eq!(s.plan().unwrap(), TrainPlan::desk(0));
        let s = settings(&[("preset", "desk"), ("seed", "5")], "");
        assert_eq!(s.plan().unwrap(), TrainPlan::desk(5));
    }

    #[test]
    fn model_keys_layer_over_the_variant() {
        let s = settings(&[("variant", "A"), ("model.frames", "3")], "model.frames = 2\nmodel.temb_dim = 8\n");
        let m = s.model().unwrap();
        assert_eq!(m.variant(), Some(Variant::A));
        assert_eq!((m.frames, m.temb_dim), (3, 8));
        assert_eq!(settings(&[], "").model().unwrap(), ModelConfig::default());
        assert!(settings(&[("model.bogus", "1")], "").model().is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = settings(&[("steps", "many")], "").stage(Stage::Upscaler).unwrap_err();
        assert!(e.downcast_ref::<CliError>().is_some());
        assert!(settings(&[("steps", "0")], "").stage(Stage::Upscaler).is_err());
        assert!(preset("huge").is_err());
        assert_eq!(parse_size("32x48").unwrap(), (32, 48));
        assert!(parse_size("0x4").is_err() && parse_size("4").is_err());
    }
}

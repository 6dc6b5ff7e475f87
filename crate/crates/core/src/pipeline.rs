//! Staged training with per-stage freeze masks, resumable checkpoints,
//! end-to-end inference and the ablation harness.
//!
//! Stages form a chain: the pretraining stage 0 fits the VAE by plain
//! reconstruction and then the UNet by unconditional denoising; stage 1 fits
//! the upscaler; stage 2 the UNet-side guidance modules and latent encoder;
//! stage 3 the VAE-decoder guidance modules; stage 4 the refiner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::data_io::{bicubic_up, Archive, ArchiveEntry, ClipPair};
use crate::diffusion::{add_noise, ddim_sample, diffusion_loss, NoiseSchedule, SchedulerConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{psnr, ssim, temporal_consistency};
use crate::networks::{self, Model, ModelConfig, Variant};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Tensor, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain = 0,
    Upscaler = 1,
    UnetModules = 2,
    VaeModules = 3,
    Refiner = 4,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Pretrain, Stage::Upscaler, Stage::UnetModules, Stage::VaeModules, Stage::Refiner];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Result<Self> {
        Stage::ALL.get(i as usize).copied().ok_or_else(|| Error::Config(format!("no training stage {i} (expected 0..=4)")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Upscaler => "upscaler",
            Stage::UnetModules => "unet_modules",
            Stage::VaeModules => "vae_modules",
            Stage::Refiner => "refiner",
        }
    }

    pub fn prerequisite(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i as usize])
    }

    /// Checkpoint file written when the stage completes.
    pub fn checkpoint_name(self) -> String {
        format!("stage{}.ckpt", self.index())
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(self.checkpoint_name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

impl FromStr for Stage {
    type Err = Error;
    /// Accepts the index or the name.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<u8>() {
            return Stage::from_index(i);
        }
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Parameter groups that receive updates in a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn for_stage(stage: Stage) -> Self {
        use ParamGroup::*;
        let groups: &[ParamGroup] = match stage {
            Stage::Pretrain => &[VaeEncoder, VaeDecoder, UnetBackbone],
            Stage::Upscaler => &[Upscaler],
            Stage::UnetModules => &[UnetSfa, UnetTfa, UnetAdapter, LatentEncoder],
            Stage::VaeModules => &[VaeSfa, VaeTfa, VaeAdapter],
            Stage::Refiner => &[Refiner],
        };
        FreezeMask { trainable: groups.iter().copied().collect() }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    pub fn apply<T: crate::element::Element>(&self, store: &mut ParamStore<T>) {
        store.set_trainable(&self.trainable.iter().copied().collect::<Vec<_>>());
    }
}

/// Groups whose hashes differ between two snapshots.
pub fn changed_groups(before: &BTreeMap<ParamGroup, String>, after: &BTreeMap<ParamGroup, String>) -> BTreeSet<ParamGroup> {
    let keys: BTreeSet<ParamGroup> = before.keys().chain(after.keys()).copied().collect();
    keys.into_iter().filter(|g| before.get(g) != after.get(g)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_clips: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub charbonnier_eps: f64,
    pub weight_decay: f64,
    /// DDIM steps used to decode the training clips before stage 4.
    pub sample_steps: usize,
    /// Draw a random flip, transpose and time reversal per sampled clip.
    pub augment: bool,
}

impl StageConfig {
    pub fn new(stage: Stage, steps: usize) -> Self {
        StageConfig { stage, steps, batch_clips: 2, learning_rate: 5e-5, seed: stage.index() as u64, charbonnier_eps: 1e-3, weight_decay: 0.0, sample_steps: 50, augment: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_clips == 0 || self.sample_steps == 0 {
            return Err(Error::Config("steps, batch clips and sample steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.stage == Stage::Pretrain && self.steps < 2 {
            return Err(Error::Config("stage 0 needs at least two steps, one per phase".into()));
        }
        if !(self.charbonnier_eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("charbonnier eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    /// Steps spent on VAE reconstruction before the UNet in stage 0.
    pub fn vae_steps(&self) -> usize {
        if self.stage == Stage::Pretrain {
            self.steps.div_ceil(2)
        } else {
            0
        }
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let kv = [
            ("stage", self.stage.index().to_string()),
            ("steps", self.steps.to_string()),
            ("batch_clips", self.batch_clips.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("seed", self.seed.to_string()),
            ("charbonnier_eps", format!("{:?}", self.charbonnier_eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("sample_steps", self.sample_steps.to_string()),
            ("augment", self.augment.to_string()),
        ];
        for (k, v) in kv {
            meta.insert(format!("active.{k}"), v);
        }
    }

    fn from_meta(a: &Archive) -> Result<Self> {
        let stage = Stage::from_index(meta_num(a, "active.stage")?)?;
        Ok(StageConfig {
            stage,
            steps: meta_num(a, "active.steps")?,
            batch_clips: meta_num(a, "active.batch_clips")?,
            learning_rate: meta_num(a, "active.learning_rate")?,
            seed: meta_num(a, "active.seed")?,
            charbonnier_eps: meta_num(a, "active.charbonnier_eps")?,
            weight_decay: meta_num(a, "active.weight_decay")?,
            sample_steps: meta_num(a, "active.sample_steps")?,
            augment: meta_num(a, "active.augment")?,
        })
    }
}

fn meta_num<N: FromStr>(a: &Archive, key: &str) -> Result<N> {
    let v = a.meta(key).ok_or_else(|| Error::Checkpoint(format!("missing meta key {key:?}")))?;
    v.parse().map_err(|_| Error::Checkpoint(format!("bad value {v:?} for meta key {key:?}")))
}

/// One optimizer step in the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

impl LogRecord {
    /// `stage=<n> step=<k> loss=<v> wall_ms=<ms>`
    pub fn to_line(&self) -> String {
        format!("stage={} step={} loss={:.9e} wall_ms={:.3}", self.stage, self.step, self.loss, self.wall_ms)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let f: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| f.get(k).copied().ok_or_else(|| Error::Config(format!("log record lacks {k:?}: {line}")));
        let bad = |k: &str| Error::Config(format!("bad {k} in log record: {line}"));
        Ok(LogRecord {
            stage: get("stage")?.parse()?,
            step: get("step")?.parse().map_err(|_| bad("step"))?,
            loss: get("loss")?.parse().map_err(|_| bad("loss"))?,
            wall_ms: get("wall_ms")?.parse().map_err(|_| bad("wall_ms"))?,
        })
    }
}

/// Frozen-network features of one training clip, derived once per stage.
#[derive(Clone, Debug, Default)]
struct ClipCache {
    z_gt: Option<VideoTensor>,
    z_u: Option<VideoTensor>,
    x_u: Option<VideoTensor>,
    skips_u: Option<Vec<VideoTensor>>,
    x_d: Option<VideoTensor>,
}

/// A stage in progress.
#[derive(Clone, Debug)]
pub struct ActiveStage {
    pub config: StageConfig,
    pub step: usize,
    pub opt: AdamW,
    pub rng: RngState,
    cache: Vec<ClipCache>,
}

/// Model, parameters and progress through the stage chain.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ModelConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    /// Initialization seed.
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub completed: Option<Stage>,
    pub active: Option<ActiveStage>,
    /// `1 / std` of the training latents; fixed when the UNet pretraining
    /// phase starts.
    pub latent_scale: Option<f64>,
}

fn stack_levels(levels: &[&Vec<VideoTensor>]) -> Result<Vec<VideoTensor>> {
    let n = levels[0].len();
    (0..n).map(|i| Tensor::stack_frames(&levels.iter().map(|l| l[i].clone()).collect::<Vec<_>>())).collect()
}

/// Joint dihedral and time-reversal transform of a `(L, H, W, C)` clip.
/// Bit 0 flips rows, bit 1 flips columns, bit 2 transposes (square frames
/// only) and bit 3 reverses time; code 0 is the identity.
pub fn augment_clip(t: &VideoTensor, code: u8) -> Result<VideoTensor> {
    if code == 0 {
        return Ok(t.clone());
    }
    let (l, h, w, c) = t.dims4()?;
    if code & 4 != 0 && h != w {
        return Err(Error::invalid("augment_clip", t.shape(), "transpose needs square frames"));
    }
    let src = t.data();
    Ok(Tensor::from_fn(t.shape(), |i| {
        let (ch, x, y, f) = (i % c, (i / c) % w, (i / (c * w)) % h, i / (c * w * h));
        let (mut sy, mut sx) = if code & 4 != 0 { (x, y) } else { (y, x) };
        if code & 1 != 0 {
            sy = h - 1 - sy;
        }
        if code & 2 != 0 {
            sx = w - 1 - sx;
        }
        let sf = if code & 8 != 0 { l - 1 - f } else { f };
        src[((sf * h + sy) * w + sx) * c + ch]
    }))
}

fn stack_aug(clips: &[&VideoTensor], codes: &[u8]) -> Result<VideoTensor> {
    Tensor::stack_frames(&clips.iter().zip(codes).map(|(&c, &k)| augment_clip(c, k)).collect::<Result<Vec<_>>>()?)
}

/// Deterministic per-clip seed.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    RngState::new(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

impl TrainState {
    pub fn new(config: ModelConfig, seed: u64, schedule: SchedulerConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Model::build(&config, &mut store, seed)?;
        Ok(TrainState { config, model, store, seed, schedule: NoiseSchedule::new(schedule)?, completed: None, active: None, latent_scale: None })
    }

    pub fn scale(&self) -> Result<f64> {
        self.latent_scale.ok_or_else(|| Error::Checkpoint("latent scale not set; stage 0 has not reached its UNet phase".into()))
    }

    /// Start a stage. Its predecessor must be complete.
    pub fn begin(&mut self, config: StageConfig) -> Result<()> {
        config.validate()?;
        if self.active.is_some() {
            return Err(Error::Config("a stage is already in progress".into()));
        }
        let stage = config.stage;
        let done = self.completed.map_or(-1, |s| s.index() as i32);
        if let Some(pre) = stage.prerequisite() {
            if done < pre.index() as i32 {
                return Err(Error::MissingStage { stage: pre.index(), path: PathBuf::from(pre.checkpoint_name()) });
            }
        }
        if done >= stage.index() as i32 {
            return Err(Error::Config(format!("stage {stage} is already complete")));
        }
        self.set_phase_mask(stage, 0, &config);
        let opt = AdamW::new(AdamWConfig { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() }, &self.store);
        let rng = RngState::new(config.seed);
        self.active = Some(ActiveStage { config, step: 0, opt, rng, cache: Vec::new() });
        Ok(())
    }

    fn set_phase_mask(&mut self, stage: Stage, step: usize, config: &StageConfig) {
        if stage == Stage::Pretrain {
            let groups: &[ParamGroup] = if step < config.vae_steps() { &[ParamGroup::VaeEncoder, ParamGroup::VaeDecoder] } else { &[ParamGroup::UnetBackbone] };
            self.store.set_trainable(groups);
        } else {
            FreezeMask::for_stage(stage).apply(&mut self.store);
        }
    }

    fn active(&self) -> Result<&ActiveStage> {
        self.active.as_ref().ok_or_else(|| Error::Config("no stage in progress".into()))
    }

    /// Fill the per-clip features the active stage reads.
    fn ensure_cache(&mut self, data: &[ClipPair]) -> Result<()> {
        let act = self.active()?;
        if act.cache.len() == data.len() {
            return Ok(());
        }
        let (stage, step, cfg) = (act.config.stage, act.step, act.config.clone());
        let unet_phase = stage == Stage::Pretrain && step >= cfg.vae_steps();
        let (m, s) = (&self.model, &self.store);
        let mut cache = Vec::with_capacity(data.len());
        for (i, c) in data.iter().enumerate() {
            check_clip(&self.config, c)?;
            let mut e = ClipCache::default();
            if unet_phase || matches!(stage, Stage::UnetModules | Stage::VaeModules) {
                e.z_gt = Some(networks::vae_encode(m, s, &c.gt)?.0);
            }
            if stage >= Stage::UnetModules {
                let x_u = networks::upscale(m, s, &c.lr)?;
                let (z_u, skips) = networks::vae_encode(m, s, &x_u)?;
                if stage == Stage::UnetModules {
                    e.z_u = Some(z_u);
                }
                if stage == Stage::VaeModules {
                    e.skips_u = Some(skips);
                }
                if stage == Stage::Refiner {
                    let out = infer_with(m, s, &self.schedule, self.scale()?, &c.lr, cfg.sample_steps, clip_seed(cfg.seed, i))?;
                    e.x_d = Some(out.x_d);
                }
                e.x_u = Some(x_u);
            }
            cache.push(e);
        }
        if unet_phase && self.latent_scale.is_none() {
            let z: Vec<&VideoTensor> = cache.iter().map(|e| e.z_gt.as_ref().unwrap()).collect();
            self.latent_scale = Some(latent_scale_of(&z));
        }
        self.active.as_mut().unwrap().cache = cache;
        Ok(())
    }

    /// Replace the decoded-clip cache of an active stage 4 with `x_d`
    /// (one tensor per training clip).
    pub fn set_decoded(&mut self, data: &[ClipPair], x_d: Vec<VideoTensor>) -> Result<()> {
        let act = self.active()?;
        if act.config.stage != Stage::Refiner || x_d.len() != data.len() {
            return Err(Error::Config("decoded clips apply to stage 4 with one tensor per clip".into()));
        }
        let (m, s) = (&self.model, &self.store);
        let cache =
            data.iter().zip(x_d).map(|(c, d)| Ok(ClipCache { x_u: Some(networks::upscale(m, s, &c.lr)?), x_d: Some(d), ..Default::default() })).collect::<Result<Vec<_>>>()?;
        self.active.as_mut().unwrap().cache = cache;
        Ok(())
    }

    /// Decoded clips cached by an active stage 4.
    pub fn decoded(&self) -> Option<Vec<VideoTensor>> {
        let act = self.active.as_ref()?;
        act.cache.iter().map(|e| e.x_d.clone()).collect()
    }

    /// Loss on the given clip indices; `rng` drives diffusion noise.
    fn batch_loss(
        &self,
        g: &mut Graph<'_, f32>,
        cfg: &StageConfig,
        step: usize,
        cache: &[ClipCache],
        data: &[ClipPair],
        idx: &[usize],
        codes: &[u8],
        rng: &mut RngState,
        zero_guidance: bool,
    ) -> Result<Var> {
        let m = &self.model;
        let l = self.config.frames;
        let eps = cfg.charbonnier_eps;
        let gt = || stack_aug(&idx.iter().map(|&i| &data[i].gt).collect::<Vec<_>>(), codes);
        let field = |f: fn(&ClipCache) -> Option<&VideoTensor>| -> Result<VideoTensor> {
            stack_aug(&idx.iter().map(|&i| f(&cache[i]).ok_or_else(|| Error::Checkpoint("feature cache incomplete".into()))).collect::<Result<Vec<_>>>()?, codes)
        };
        match cfg.stage {
            Stage::Pretrain if step < cfg.vae_steps() => {
                let x = g.constant(gt()?);
                let e = m.vae.encode(g, x)?;
                let y = m.vae.decode(g, e.z, None, l)?;
                g.charbonnier(y, x, eps)
            }
            Stage::Pretrain => {
                let z0 = field(|c| c.z_gt.as_ref())?.scale(self.scale()? as f32);
                let max_t = self.schedule.max_t();
                diffusion_loss(g, &z0, idx.len(), &self.schedule, rng, |g, zt, ts| m.unet.forward(g, zt, ts, max_t, None, l))
            }
            Stage::Upscaler => {
                let x_l = g.constant(stack_aug(&idx.iter().map(|&i| &data[i].lr).collect::<Vec<_>>(), codes)?);
                let y = m.upscaler.forward(g, x_l, l)?;
                let t = g.constant(gt()?);
                g.charbonnier(y, t, eps)
            }
            Stage::UnetModules => {
                let scale = self.scale()? as f32;
                let z0 = field(|c| c.z_gt.as_ref())?.scale(scale);
                let zu = g.constant(field(|c| c.z_u.as_ref())?.scale(scale));
                let mut guides = m.latent_encoder.forward(g, zu)?;
                if zero_guidance {
                    guides = guides.iter().map(|&v| g.constant(Tensor::zeros(g.shape(v)))).collect();
                }
                let max_t = self.schedule.max_t();
                diffusion_loss(g, &z0, idx.len(), &self.schedule, rng, |g, zt, ts| m.unet.forward(g, zt, ts, max_t, Some(&guides), l))
            }
            Stage::VaeModules => {
                let z = g.constant(field(|c| c.z_gt.as_ref())?);
                let levels: Vec<&Vec<VideoTensor>> =
                    idx.iter().map(|&i| cache[i].skips_u.as_ref().ok_or_else(|| Error::Checkpoint("feature cache incomplete".into()))).collect::<Result<_>>()?;
                let levels: Vec<Vec<VideoTensor>> = levels.iter().zip(codes).map(|(lv, &k)| lv.iter().map(|t| augment_clip(t, k)).collect::<Result<_>>()).collect::<Result<_>>()?;
                let guides: Vec<Var> = stack_levels(&levels.iter().collect::<Vec<_>>())?
                    .into_iter()
                    .map(|t| if zero_guidance { g.constant(Tensor::zeros(t.shape())) } else { g.constant(t) })
                    .collect();
                let y = m.vae.decode(g, z, Some(&guides), l)?;
                let t = g.constant(gt()?);
                g.charbonnier(y, t, eps)
            }
            Stage::Refiner => {
                let x_u = g.constant(field(|c| c.x_u.as_ref())?);
                let x_d = g.constant(field(|c| c.x_d.as_ref())?);
                let y = m.refiner.forward(g, x_u, x_d)?;
                let t = g.constant(gt()?);
                g.charbonnier(y, t, eps)
            }
        }
    }

    /// One optimizer step of the active stage.
    pub fn step(&mut self, data: &[ClipPair]) -> Result<LogRecord> {
        let start = Instant::now();
        let act = self.active()?;
        let (cfg, step) = (act.config.clone(), act.step);
        if step >= cfg.steps {
            return Err(Error::Config(format!("stage {} already ran its {} steps", cfg.stage, cfg.steps)));
        }
        if data.len() < cfg.batch_clips {
            return Err(Error::Config(format!("{} clips cannot fill a batch of {}", data.len(), cfg.batch_clips)));
        }
        if cfg.stage == Stage::Pretrain && step == cfg.vae_steps() {
            // VAE phase over: encoder features change meaning for the UNet phase
            self.active.as_mut().unwrap().cache.clear();
        }
        self.set_phase_mask(cfg.stage, step, &cfg);
        self.ensure_cache(data)?;
        let mut act = self.active.take().unwrap();
        let mut order: Vec<usize> = (0..data.len()).collect();
        act.rng.shuffle(&mut order);
        let idx = &order[..cfg.batch_clips];
        let square = data[idx[0]].gt.shape()[1] == data[idx[0]].gt.shape()[2];
        let codes: Vec<u8> = idx.iter().map(|_| if cfg.augment { act.rng.int_inclusive(0, 15) as u8 & if square { 15 } else { 11 } } else { 0 }).collect();
        let result = (|| {
            let mut g = Graph::new(&self.store);
            let loss = self.batch_loss(&mut g, &cfg, step, &act.cache, data, idx, &codes, &mut act.rng, false)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Config(format!("stage {} loss became {value} at step {step}", cfg.stage)));
            }
            Ok((value, g.backward(loss)?))
        })();
        let (loss, grads) = match result {
            Ok(v) => v,
            Err(e) => {
                self.active = Some(act);
                return Err(e);
            }
        };
        grads.apply_to(&mut self.store);
        act.opt.step(&mut self.store, 1.0);
        act.step += 1;
        self.active = Some(act);
        Ok(LogRecord { stage: cfg.stage, step, loss, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
    }

    /// Run up to `max_steps` further steps (all remaining when `None`).
    pub fn run(&mut self, data: &[ClipPair], max_steps: Option<usize>, mut on_log: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let act = self.active()?;
        let remaining = act.config.steps - act.step;
        let n = max_steps.map_or(remaining, |m| m.min(remaining));
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r = self.step(data)?;
            on_log(&r);
            out.push(r);
        }
        Ok(out)
    }

    /// Close the active stage once all its steps ran.
    pub fn finish(&mut self) -> Result<Stage> {
        let act = self.active()?;
        if act.step < act.config.steps {
            return Err(Error::Config(format!("stage {} has {} of {} steps done", act.config.stage, act.step, act.config.steps)));
        }
        let stage = act.config.stage;
        self.active = None;
        self.store.freeze_all();
        self.completed = Some(stage);
        Ok(stage)
    }

    /// `begin`, `run` and `finish` in one call.
    pub fn train_stage(&mut self, config: StageConfig, data: &[ClipPair], on_log: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        self.begin(config)?;
        let log = self.run(data, None, on_log)?;
        self.finish()?;
        Ok(log)
    }

    /// Mean loss of `cfg.stage` over `clips`, one clip at a time, with noise
    /// drawn from `seed`. For stage 0 this is the VAE reconstruction loss.
    pub fn eval_loss(&self, cfg: &StageConfig, clips: &[ClipPair], seed: u64, zero_guidance: bool) -> Result<f64> {
        let mut probe = self.clone();
        probe.active = None;
        probe.completed = cfg.stage.prerequisite();
        probe.begin(StageConfig { steps: 1, batch_clips: 1, ..cfg.clone() })?;
        probe.ensure_cache(clips)?;
        let act = probe.active.as_ref().unwrap();
        let mut rng = RngState::new(seed);
        let mut total = 0.0;
        for i in 0..clips.len() {
            let mut g = Graph::new(&probe.store);
            let loss = probe.batch_loss(&mut g, &act.config, 0, &act.cache, clips, &[i], &[0], &mut rng, zero_guidance)?;
            total += g.value(loss).data()[0] as f64;
        }
        Ok(total / clips.len() as f64)
    }

    /// Same seed and trained values under another model configuration; the
    /// new variant's extra parameters keep their fresh initialization.
    pub fn rebase(&self, config: ModelConfig) -> Result<Self> {
        if self.active.is_some() {
            return Err(Error::Config("cannot rebase during a stage".into()));
        }
        let mut next = TrainState::new(config, self.seed, self.schedule.config)?;
        next.store.load_values_from(&self.store);
        next.store.freeze_all();
        next.completed = self.completed;
        next.latent_scale = self.latent_scale;
        Ok(next)
    }

    /// Copy the values of `groups` from `other` by parameter name.
    pub fn transplant(&mut self, other: &TrainState, groups: &[ParamGroup]) -> usize {
        let mut n = 0;
        for (_, src) in other.store.iter().filter(|(_, p)| groups.contains(&p.group)) {
            if let Some(id) = self.store.id(&src.name) {
                let p = self.store.get_mut(id);
                if p.group == src.group && p.value.shape() == src.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        let meta = &mut a.meta;
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("completed".into(), self.completed.map_or("none".into(), |s| s.index().to_string()));
        if let Some(s) = self.latent_scale {
            meta.insert("latent_scale".into(), format!("{s:?}"));
        }
        let sc = self.schedule.config;
        meta.insert("schedule.beta_1".into(), format!("{:?}", sc.beta_1));
        meta.insert("schedule.beta_t".into(), format!("{:?}", sc.beta_t));
        meta.insert("schedule.steps".into(), sc.steps.to_string());
        meta.insert("schedule.sqrt_space".into(), sc.sqrt_space.to_string());
        for (k, v) in self.config.to_pairs() {
            meta.insert(format!("model.{k}"), v);
        }
        if let Some(act) = &self.active {
            act.config.to_meta(meta);
            meta.insert("active.step".into(), act.step.to_string());
            meta.insert("active.rng_seed".into(), act.rng.seed().to_string());
            meta.insert("active.rng_counter".into(), act.rng.counter().to_string());
            meta.insert("active.adam_step".into(), act.opt.step.to_string());
        }
        for (id, p) in self.store.iter() {
            let entry = |kind: &str, tensor: Tensor<f32>| ArchiveEntry { kind: kind.into(), name: p.name.clone(), group: p.group.as_str().into(), frozen: p.frozen, tensor };
            a.entries.push(entry("param", p.value.clone()));
            if let Some(act) = &self.active {
                if !p.frozen {
                    a.entries.push(entry("adam.m", act.opt.m[id.index()].clone()));
                    a.entries.push(entry("adam.v", act.opt.v[id.index()].clone()));
                }
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = a.meta.iter().filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k, v.as_str()))).collect();
        let config = ModelConfig::from_pairs(pairs)?;
        let schedule = SchedulerConfig {
            beta_1: meta_num(a, "schedule.beta_1")?,
            beta_t: meta_num(a, "schedule.beta_t")?,
            steps: meta_num(a, "schedule.steps")?,
            sqrt_space: meta_num(a, "schedule.sqrt_space")?,
        };
        let mut st = TrainState::new(config, meta_num(a, "seed")?, schedule)?;
        st.completed = match a.meta("completed") {
            Some("none") => None,
            Some(_) => Some(Stage::from_index(meta_num(a, "completed")?)?),
            None => return Err(Error::Checkpoint("missing meta key \"completed\"".into())),
        };
        st.latent_scale = a.meta("latent_scale").map(|_| meta_num(a, "latent_scale")).transpose()?;
        let ids: Vec<_> = st.store.ids().collect();
        for &id in &ids {
            let p = st.store.get_mut(id);
            let e = a.entry("param", &p.name).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {:?}", p.name)))?;
            if e.tensor.shape() != p.value.shape() || e.group != p.group.as_str() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?} in group {}, expected {:?} in {}",
                    p.name,
                    e.tensor.shape(),
                    e.group,
                    p.value.shape(),
                    p.group
                )));
            }
            p.value = e.tensor.clone();
            p.frozen = e.frozen;
        }
        let expected = st.store.len();
        let stored = a.entries.iter().filter(|e| e.kind == "param").count();
        if stored != expected {
            return Err(Error::Checkpoint(format!("checkpoint holds {stored} parameters, model has {expected}")));
        }
        if a.meta("active.stage").is_some() {
            let config = StageConfig::from_meta(a)?;
            let mut opt = AdamW::new(AdamWConfig { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() }, &st.store);
            opt.step = meta_num(a, "active.adam_step")?;
            for &id in &ids {
                let p = st.store.get(id);
                if p.frozen {
                    continue;
                }
                let slot = |kind: &str| a.entry(kind, &p.name).map(|e| e.tensor.clone()).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {kind} for {:?}", p.name)));
                opt.m[id.index()] = slot("adam.m")?;
                opt.v[id.index()] = slot("adam.v")?;
            }
            let rng = RngState::resume(meta_num(a, "active.rng_seed")?, meta_num(a, "active.rng_counter")?);
            st.active = Some(ActiveStage { config, step: meta_num(a, "active.step")?, opt, rng, cache: Vec::new() });
        }
        Ok(st)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainState::from_archive(&Archive::read(path)?)
    }

    /// Load the checkpoint of `stage` from `dir`, naming the stage when the
    /// file is absent.
    pub fn load_stage(dir: &Path, stage: Stage) -> Result<Self> {
        let path = stage.checkpoint_path(dir);
        if !path.exists() {
            return Err(Error::MissingStage { stage: stage.index(), path });
        }
        let st = TrainState::load(&path)?;
        if st.completed.is_none_or(|c| c < stage) {
            return Err(Error::Checkpoint(format!("{} does not hold a completed stage {stage}", path.display())));
        }
        Ok(st)
    }

    /// End-to-end inference; needs the full chain.
    pub fn infer(&self, x_l: &VideoTensor, steps: usize, seed: u64) -> Result<Inference> {
        if self.completed != Some(Stage::Refiner) {
            let next = self.completed.map_or(0, |s| s.index() + 1);
            return Err(Error::MissingStage { stage: next, path: PathBuf::from(Stage::from_index(next)?.checkpoint_name()) });
        }
        infer_with(&self.model, &self.store, &self.schedule, self.scale()?, x_l, steps, seed)
    }
}

fn check_clip(config: &ModelConfig, c: &ClipPair) -> Result<()> {
    let (l, h, w, _) = c.lr.dims4()?;
    let (gl, gh, gw, _) = c.gt.dims4()?;
    if l != config.frames || gl != config.frames {
        return Err(Error::Config(format!("clip {} has {l}/{gl} frames, model expects {}", c.name, config.frames)));
    }
    let r = config.upscaler.factor;
    if (gh, gw) != (h * r, w * r) {
        return Err(Error::shape("clip pair", c.gt.shape(), c.lr.shape()));
    }
    Ok(())
}

/// `1 / std` over all latent values.
pub fn latent_scale_of(latents: &[&VideoTensor]) -> f64 {
    let n: usize = latents.iter().map(|z| z.len()).sum();
    let mean = latents.iter().flat_map(|z| z.data()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = latents.iter().flat_map(|z| z.data()).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    1.0 / var.sqrt().max(1e-6)
}

/// Intermediate and final clips of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub x_u: VideoTensor,
    pub x_d: VideoTensor,
    pub x_h: VideoTensor,
}

/// `X_u = upscale(X_L)`, `Z = scale * E(X_u)`, `G = latent_encode(Z)`,
/// `Z_T = add_noise(Z, eps, T)`, DDIM to `Z_0`, decode with the encoder
/// features of `X_u`, refine against `X_u`.
pub fn infer_with(model: &Model, store: &ParamStore<f32>, sched: &NoiseSchedule, latent_scale: f64, x_l: &VideoTensor, steps: usize, seed: u64) -> Result<Inference> {
    let (l, ..) = x_l.dims4()?;
    if l != model.config.frames {
        return Err(Error::Config(format!("input has {l} frames, model expects {}", model.config.frames)));
    }
    let x_u = networks::upscale(model, store, x_l)?;
    let (z, skips) = networks::vae_encode(model, store, &x_u)?;
    let z_u = z.scale(latent_scale as f32);
    let guides = networks::latent_encode(model, store, &z_u)?;
    let max_t = sched.max_t();
    let eps = Tensor::randn(z_u.shape(), 1.0, &mut RngState::new(seed));
    let z_t = add_noise(&z_u, &eps, max_t, sched)?;
    let z0 = ddim_sample(&z_t, |z, t| networks::unet_eps(model, store, z, t, max_t, Some(&guides)), steps, sched)?;
    let x_d = networks::vae_decode(model, store, &z0.scale((1.0 / latent_scale) as f32), Some(&skips))?;
    let x_h = networks::refine(model, store, &x_d, &x_u)?;
    Ok(Inference { x_u, x_d, x_h })
}

/// Mean held-out scores of one model and of the bicubic baseline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub tc: f64,
    pub psnr_upscaled: f64,
    pub psnr_decoded: f64,
    pub psnr_bicubic: f64,
    pub ssim_bicubic: f64,
    pub tc_bicubic: f64,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "psnr={:.3} ssim={:.4} tc={:.5} psnr_u={:.3} psnr_d={:.3} | bicubic psnr={:.3} ssim={:.4} tc={:.5}",
            self.psnr, self.ssim, self.tc, self.psnr_upscaled, self.psnr_decoded, self.psnr_bicubic, self.ssim_bicubic, self.tc_bicubic
        )
    }
}

/// Run inference on every clip (seeded per clip) and average the metrics.
pub fn evaluate(state: &TrainState, clips: &[ClipPair], steps: usize, seed: u64) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    for (i, c) in clips.iter().enumerate() {
        let out = state.infer(&c.lr, steps, clip_seed(seed, i))?;
        let bic = bicubic_up(&c.lr, state.config.upscaler.factor)?;
        e.psnr += psnr(&out.x_h, &c.gt, 1.0)?.mean;
        e.ssim += ssim(&out.x_h, &c.gt)?.mean;
        e.tc += temporal_consistency(&out.x_h, &c.gt)?.mean;
        e.psnr_upscaled += psnr(&out.x_u, &c.gt, 1.0)?.mean;
        e.psnr_decoded += psnr(&out.x_d, &c.gt, 1.0)?.mean;
        e.psnr_bicubic += psnr(&bic, &c.gt, 1.0)?.mean;
        e.ssim_bicubic += ssim(&bic, &c.gt)?.mean;
        e.tc_bicubic += temporal_consistency(&bic, &c.gt)?.mean;
    }
    let n = clips.len() as f64;
    for v in [&mut e.psnr, &mut e.ssim, &mut e.tc, &mut e.psnr_upscaled, &mut e.psnr_decoded, &mut e.psnr_bicubic, &mut e.ssim_bicubic, &mut e.tc_bicubic] {
        *v /= n;
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Full chain and ablation

/// Stage settings for a full five-stage run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub seed: u64,
    pub schedule: SchedulerConfig,
    pub stages: [StageConfig; 5],
    /// DDIM steps at evaluation.
    pub sample_steps: usize,
    pub eval_seed: u64,
}

impl TrainPlan {
    /// Desk-scale schedule for 24 training clips of 6x32x32 on one core:
    /// steps 3000/2000/1000/150/3000, learning rate 2e-3 for the upscaler
    /// and 1e-3 elsewhere, two clips per batch.
    pub fn desk(seed: u64) -> Self {
        let steps = [3000, 2000, 1000, 150, 3000];
        let lrs = [1e-3, 2e-3, 1e-3, 1e-3, 1e-3];
        let stages = Stage::ALL.map(|s| {
            let i = s.index() as usize;
            StageConfig { learning_rate: lrs[i], seed: seed.wrapping_add(11 + i as u64), ..StageConfig::new(s, steps[i]) }
        });
        TrainPlan { seed, schedule: SchedulerConfig::default(), stages, sample_steps: 50, eval_seed: seed.wrapping_add(3) }
    }

    /// Uniform settings across stages.
    pub fn uniform(seed: u64, steps: usize, batch_clips: usize, learning_rate: f64) -> Self {
        let stages = Stage::ALL.map(|s| StageConfig { batch_clips, learning_rate, seed: seed.wrapping_add(101 * (s.index() as u64 + 1)), ..StageConfig::new(s, steps) });
        TrainPlan { seed, schedule: SchedulerConfig::default(), stages, sample_steps: 50, eval_seed: seed ^ 0xE7A1 }
    }

    pub fn stage(&self, s: Stage) -> &StageConfig {
        &self.stages[s.index() as usize]
    }
}

/// Train all stages of one configuration.
pub fn train_full(config: ModelConfig, plan: &TrainPlan, data: &[ClipPair], mut on_log: impl FnMut(&LogRecord)) -> Result<TrainState> {
    let mut st = TrainState::new(config, plan.seed, plan.schedule)?;
    for s in Stage::ALL {
        st.train_stage(plan.stage(s).clone(), data, &mut on_log)?;
    }
    Ok(st)
}

/// One trained ablation model.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub refiner_w: f64,
    pub eval: Evaluation,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Train variants A-D plus refiner weights 0 and 1 on top of D, sharing
/// every stage whose inputs coincide: stages 0-1 once, stage 2 per UNet
/// guidance kind, stage 3 per VAE guidance kind, stage 4 per row.
pub fn run_ablation(base: &ModelConfig, plan: &TrainPlan, train: &[ClipPair], held_out: &[ClipPair], mut on_log: impl FnMut(&str, &LogRecord)) -> Result<AblationReport> {
    let with = |v: Variant| {
        let (unet_guidance, vae_guidance) = v.guidance();
        ModelConfig { unet_guidance, vae_guidance, ..base.clone() }
    };
    let mut root = TrainState::new(with(Variant::D), plan.seed, plan.schedule)?;
    for s in [Stage::Pretrain, Stage::Upscaler] {
        root.train_stage(plan.stage(s).clone(), train, |r| on_log("shared", r))?;
    }
    // stage 2 depends on the UNet guidance only; C and D share it
    let mut unet_trained: BTreeMap<Variant, TrainState> = BTreeMap::new();
    for v in [Variant::A, Variant::B, Variant::C] {
        let mut st = root.rebase(with(v))?;
        st.train_stage(plan.stage(Stage::UnetModules).clone(), train, |r| on_log(&format!("{v}"), r))?;
        unet_trained.insert(v, st);
    }
    // stage 3 depends on the VAE guidance only
    let vae_zero = {
        let mut st = unet_trained[&Variant::A].clone();
        st.train_stage(plan.stage(Stage::VaeModules).clone(), train, |r| on_log("vae-zeroconv", r))?;
        st
    };
    let mut variants: BTreeMap<Variant, TrainState> = BTreeMap::new();
    for v in [Variant::A, Variant::B, Variant::C] {
        let mut st = unet_trained[&v].clone();
        st.transplant(&vae_zero, &[ParamGroup::VaeAdapter]);
        st.completed = Some(Stage::VaeModules);
        variants.insert(v, st);
    }
    let mut d = unet_trained[&Variant::C].rebase(with(Variant::D))?;
    d.train_stage(plan.stage(Stage::VaeModules).clone(), train, |r| on_log("D", r))?;
    variants.insert(Variant::D, d);

    let mut rows = Vec::new();
    let refiner_cfg = plan.stage(Stage::Refiner).clone();
    let mut d_decoded = None;
    for (v, st) in &variants {
        let mut st = st.clone();
        st.begin(refiner_cfg.clone())?;
        st.run(train, None, |r| on_log(&format!("{v}"), r))?;
        if *v == Variant::D {
            d_decoded = st.decoded();
        }
        st.finish()?;
        let eval = evaluate(&st, held_out, plan.sample_steps, plan.eval_seed)?;
        rows.push(AblationRow { label: format!("{v}"), variant: *v, refiner_w: st.config.refiner_w, eval });
    }
    let decoded = d_decoded.ok_or_else(|| Error::Config("variant D decoded cache missing".into()))?;
    for w in [0.0, 1.0] {
        let mut st = variants[&Variant::D].rebase(ModelConfig { refiner_w: w, ..with(Variant::D) })?;
        st.begin(refiner_cfg.clone())?;
        st.set_decoded(train, decoded.clone())?;
        let label = format!("D-w{w}");
        st.run(train, None, |r| on_log(&label, r))?;
        st.finish()?;
        let eval = evaluate(&st, held_out, plan.sample_steps, plan.eval_seed)?;
        rows.push(AblationRow { label, variant: Variant::D, refiner_w: w, eval });
    }
    Ok(AblationReport { rows })
}

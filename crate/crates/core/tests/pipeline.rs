use std::collections::BTreeSet;

use sateco::data_io::{synth_dataset, ClipPair, Motion};
use sateco::diffusion::SchedulerConfig;
use sateco::metrics::psnr;
use sateco::networks::{ModelConfig, Variant};
use sateco::pipeline::*;
use sateco::{Error, ParamGroup, Tensor};

fn clips(seed: u64, n: usize) -> Vec<ClipPair> {
    synth_dataset(seed, n, 6, (32, 32), &Motion::ALL, 4).unwrap()
}

fn fresh(config: ModelConfig) -> TrainState {
    TrainState::new(config, 0, SchedulerConfig::default()).unwrap()
}

fn cfg(stage: Stage, steps: usize, lr: f64) -> StageConfig {
    StageConfig { batch_clips: 1, learning_rate: lr, sample_steps: 2, seed: 40 + stage.index() as u64, ..StageConfig::new(stage, steps) }
}

/// Groups of `state` that exist in its store.
fn present(state: &TrainState, groups: impl IntoIterator<Item = ParamGroup>) -> BTreeSet<ParamGroup> {
    let have: BTreeSet<_> = state.store.groups().into_iter().collect();
    groups.into_iter().filter(|g| have.contains(g)).collect()
}

#[test]
fn every_stage_changes_exactly_its_groups() {
    let data = clips(1, 2);
    let mut st = fresh(ModelConfig::default());
    for stage in Stage::ALL {
        let before = st.store.group_hashes();
        st.train_stage(cfg(stage, 2, 1e-3), &data, |_| {}).unwrap();
        let changed = changed_groups(&before, &st.store.group_hashes());
        assert_eq!(changed, present(&st, FreezeMask::for_stage(stage).trainable), "stage {stage}");
    }
    assert_eq!(st.completed, Some(Stage::Refiner));
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let mut st = fresh(ModelConfig::default());
    for stage in [Stage::Upscaler, Stage::UnetModules, Stage::Refiner] {
        let want = stage.index() - 1;
        match st.begin(cfg(stage, 2, 1e-3)) {
            Err(Error::MissingStage { stage: s, .. }) => assert_eq!(s, want),
            other => panic!("stage {stage}: {other:?}"),
        }
    }
    let lr = Tensor::<f32>::zeros(&[6, 8, 8, 3]);
    assert!(matches!(st.infer(&lr, 1, 0), Err(Error::MissingStage { stage: 0, .. })));

    let dir = tempfile::tempdir().unwrap();
    let err = TrainState::load_stage(dir.path(), Stage::Upscaler).unwrap_err();
    assert!(matches!(err, Error::MissingStage { stage: 1, .. }));
    assert!(err.to_string().contains("stage 1") && err.to_string().contains("stage1.ckpt"), "{err}");
}

#[test]
fn rejects_bad_stage_configs_and_clips() {
    let mut st = fresh(ModelConfig::default());
    assert!(matches!(st.begin(StageConfig::new(Stage::Pretrain, 1)), Err(Error::Config(_))));
    assert!(matches!(st.begin(StageConfig { learning_rate: 0.0, ..StageConfig::new(Stage::Pretrain, 4) }), Err(Error::Config(_))));
    let short = synth_dataset(2, 2, 4, (32, 32), &Motion::ALL, 4).unwrap();
    st.begin(cfg(Stage::Pretrain, 4, 1e-3)).unwrap();
    assert!(st.step(&short).is_err());
    assert!(st.step(&[]).is_err());
    assert!(st.finish().is_err());
}

#[test]
fn augmentation_is_a_group_of_sixteen_transforms() {
    let x = Tensor::<f32>::randn(&[3, 5, 5, 2], 1.0, &mut sateco::RngState::new(4));
    assert!(augment_clip(&x, 0).unwrap().bit_eq(&x));
    for code in [1, 2, 4, 8] {
        assert!(augment_clip(&augment_clip(&x, code).unwrap(), code).unwrap().bit_eq(&x), "code {code}");
    }
    let images: Vec<_> = (0..16).map(|k| augment_clip(&x, k).unwrap()).collect();
    for i in 0..16 {
        for j in 0..i {
            assert!(!images[i].bit_eq(&images[j]), "codes {i} and {j} coincide");
        }
    }
    // time reversal of row 0 of frame 0 lands in the last frame
    let y = augment_clip(&x, 8).unwrap();
    assert_eq!(y.frame(2).unwrap().data()[..10], x.frame(0).unwrap().data()[..10]);
    let wide = Tensor::<f32>::zeros(&[2, 4, 6, 3]);
    assert!(augment_clip(&wide, 3).is_ok());
    assert!(augment_clip(&wide, 4).is_err());
}

#[test]
fn stage_config_defaults() {
    let c = StageConfig::new(Stage::UnetModules, 10);
    assert_eq!(c.learning_rate, 5e-5);
    assert_eq!(c.charbonnier_eps, 1e-3);
    assert_eq!(c.weight_decay, 0.0);
    assert!(c.augment);
    assert_eq!(StageConfig::new(Stage::Pretrain, 5).vae_steps(), 3);
    assert_eq!(c.vae_steps(), 0);
    assert_eq!("3".parse::<Stage>().unwrap(), Stage::VaeModules);
    assert_eq!("refiner".parse::<Stage>().unwrap(), Stage::Refiner);
    assert!("5".parse::<Stage>().is_err());
    assert_eq!(Stage::Pretrain.prerequisite(), None);
    assert_eq!(Stage::Refiner.prerequisite(), Some(Stage::VaeModules));
}

#[test]
fn log_records_roundtrip() {
    let r = LogRecord { stage: Stage::UnetModules, step: 17, loss: 0.123_456_789, wall_ms: 12.5 };
    assert_eq!(LogRecord::from_line(&r.to_line()).unwrap(), r);
    assert!(LogRecord::from_line("stage=2 step=x loss=1 wall_ms=1").is_err());
}

/// Interrupt after `split` steps, checkpoint to disk, resume and compare
/// with the uninterrupted run.
fn resume_matches(st: &TrainState, stage_cfg: StageConfig, data: &[ClipPair], split: usize) {
    let mut full = st.clone();
    full.begin(stage_cfg.clone()).unwrap();
    let straight: Vec<f64> = full.run(data, None, |_| {}).unwrap().iter().map(|r| r.loss).collect();

    let mut part = st.clone();
    part.begin(stage_cfg).unwrap();
    let mut losses: Vec<f64> = part.run(data, Some(split), |_| {}).unwrap().iter().map(|r| r.loss).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.ckpt");
    part.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    losses.extend(resumed.run(data, None, |_| {}).unwrap().iter().map(|r| r.loss));

    assert_eq!(losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), straight.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(resumed.store.group_hashes(), full.store.group_hashes());
    assert_eq!(resumed.active.as_ref().unwrap().opt.step, full.active.as_ref().unwrap().opt.step);
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_trajectory() {
    let data = clips(3, 3);
    let st = fresh(ModelConfig::default());
    // across the VAE/UNet phase boundary of stage 0
    resume_matches(&st, StageConfig { batch_clips: 2, ..cfg(Stage::Pretrain, 6, 1e-3) }, &data, 4);
    let mut st = st;
    st.train_stage(cfg(Stage::Pretrain, 4, 1e-3), &data, |_| {}).unwrap();
    resume_matches(&st, cfg(Stage::Upscaler, 5, 1e-3), &data, 2);
    st.train_stage(cfg(Stage::Upscaler, 2, 1e-3), &data, |_| {}).unwrap();
    // diffusion noise and timesteps come from the resumed stream
    resume_matches(&st, StageConfig { batch_clips: 2, ..cfg(Stage::UnetModules, 4, 1e-3) }, &data, 1);
}

#[test]
fn checkpoints_roundtrip_completed_states() {
    let data = clips(4, 2);
    let mut st = fresh(ModelConfig::for_variant(Variant::B));
    st.train_stage(cfg(Stage::Pretrain, 2, 1e-3), &data, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    st.save(Stage::Pretrain.checkpoint_path(dir.path())).unwrap();
    let back = TrainState::load_stage(dir.path(), Stage::Pretrain).unwrap();
    assert_eq!(back.config, st.config);
    assert_eq!(back.completed, Some(Stage::Pretrain));
    assert_eq!(back.latent_scale, st.latent_scale);
    assert_eq!(back.store.group_hashes(), st.store.group_hashes());
    assert!(back.active.is_none());
    // a completed stage-0 file does not satisfy a stage-1 prerequisite
    std::fs::copy(Stage::Pretrain.checkpoint_path(dir.path()), Stage::Upscaler.checkpoint_path(dir.path())).unwrap();
    assert!(matches!(TrainState::load_stage(dir.path(), Stage::Upscaler), Err(Error::Checkpoint(_))));
}

#[test]
fn ablation_variants_come_from_configuration_alone() {
    assert_eq!(ModelConfig::for_variant(Variant::D), ModelConfig::default());
    let module_groups = [ParamGroup::UnetSfa, ParamGroup::UnetTfa, ParamGroup::VaeSfa, ParamGroup::VaeTfa];
    let count = |v: Variant, g: ParamGroup| fresh(ModelConfig::for_variant(v)).store.count_in(g);
    for g in module_groups {
        assert_eq!(count(Variant::A, g), 0, "{g}");
    }
    assert!(count(Variant::B, ParamGroup::UnetSfa) > 0 && count(Variant::B, ParamGroup::UnetTfa) == 0);
    assert!(count(Variant::C, ParamGroup::UnetTfa) > 0 && count(Variant::C, ParamGroup::VaeSfa) == 0);
    assert!(module_groups.iter().all(|&g| count(Variant::D, g) > 0));
    assert!(count(Variant::A, ParamGroup::UnetAdapter) > 0 && count(Variant::D, ParamGroup::UnetAdapter) == 0);

    // backbones agree, so trained stages carry across variants
    let data = clips(5, 2);
    let mut a = fresh(ModelConfig::for_variant(Variant::A));
    a.train_stage(cfg(Stage::Pretrain, 2, 1e-3), &data, |_| {}).unwrap();
    let d = a.rebase(ModelConfig::default()).unwrap();
    assert_eq!(d.completed, Some(Stage::Pretrain));
    for g in [ParamGroup::VaeEncoder, ParamGroup::VaeDecoder, ParamGroup::UnetBackbone, ParamGroup::Upscaler] {
        assert_eq!(d.store.group_hash(g), a.store.group_hash(g));
    }
    let mut c = fresh(ModelConfig::for_variant(Variant::C));
    assert!(c.transplant(&d, &[ParamGroup::UnetSfa, ParamGroup::UnetTfa]) > 0);
    assert_eq!(c.store.group_hash(ParamGroup::UnetTfa), d.store.group_hash(ParamGroup::UnetTfa));
}

fn mean_psnr(xs: &[Tensor<f32>], data: &[ClipPair]) -> f64 {
    xs.iter().zip(data).map(|(x, c)| psnr(x, &c.gt, 1.0).unwrap().mean).sum::<f64>() / xs.len() as f64
}

/// One seed-pinned pass through the chain on a toy set; every stage's
/// training contract is checked against its own deterministic loss.
#[test]
fn staged_training_contracts() {
    let all = clips(6, 12);
    let (train, held) = all.split_at(10);
    let mut st = fresh(ModelConfig::default());
    st.train_stage(StageConfig { batch_clips: 2, ..cfg(Stage::Pretrain, 120, 3e-3) }, train, |_| {}).unwrap();

    // stage 1: first 100 steps
    let c1 = StageConfig { batch_clips: 2, ..cfg(Stage::Upscaler, 100, 3e-3) };
    let l0 = st.eval_loss(&c1, train, 0, false).unwrap();
    st.train_stage(c1.clone(), train, |_| {}).unwrap();
    let l1 = st.eval_loss(&c1, train, 0, false).unwrap();
    assert!(l1 < 0.8 * l0, "stage 1: {l0} -> {l1}");

    // stage 2
    let c2 = StageConfig { batch_clips: 2, ..cfg(Stage::UnetModules, 100, 3e-3) };
    let l0 = st.eval_loss(&c2, train, 9, false).unwrap();
    st.train_stage(c2.clone(), train, |_| {}).unwrap();
    let l1 = st.eval_loss(&c2, train, 9, false).unwrap();
    assert!(l1 < 0.9 * l0, "stage 2: {l0} -> {l1}");
    let zeroed = st.eval_loss(&c2, train, 9, true).unwrap();
    assert!(zeroed > l1, "zeroed guidance {zeroed} vs live {l1}");

    // stage 3, compared with the same decoder before its modules train
    let c3 = cfg(Stage::VaeModules, 30, 3e-3);
    let identity = st.clone();
    let l0 = st.eval_loss(&c3, train, 0, false).unwrap();
    let h0 = identity.eval_loss(&c3, held, 0, false).unwrap();
    st.train_stage(c3.clone(), train, |_| {}).unwrap();
    let l1 = st.eval_loss(&c3, train, 0, false).unwrap();
    assert!(l1 < 0.9 * l0, "stage 3: {l0} -> {l1}");
    let h1 = st.eval_loss(&c3, held, 0, false).unwrap();
    assert!(h1 < h0, "held-out stage 3: trained {h1} vs identity {h0}");

    // stage 4
    let c4 = StageConfig { batch_clips: 2, ..cfg(Stage::Refiner, 150, 3e-3) };
    let before = st.eval_loss(&c4, train, 0, false).unwrap();
    st.begin(c4.clone()).unwrap();
    st.step(train).unwrap();
    let decoded = st.decoded().unwrap();
    st.run(train, None, |_| {}).unwrap();
    st.finish().unwrap();
    let after = st.eval_loss(&c4, train, 0, false).unwrap();
    assert!(after < 0.95 * before, "stage 4: {before} -> {after}");
    let refined: Vec<Tensor<f32>> = decoded
        .iter()
        .zip(train)
        .map(|(x_d, c)| sateco::networks::refine(&st.model, &st.store, x_d, &sateco::networks::upscale(&st.model, &st.store, &c.lr).unwrap()).unwrap())
        .collect();
    assert!(mean_psnr(&refined, train) >= mean_psnr(&decoded, train));

    // inference
    let out = st.infer(&held[0].lr, 3, 5).unwrap();
    assert_eq!(out.x_h.shape(), &[6, 32, 32, 3]);
    assert!(out.x_h.bit_eq(&st.infer(&held[0].lr, 3, 5).unwrap().x_h));
    assert!(!out.x_h.bit_eq(&st.infer(&held[0].lr, 3, 6).unwrap().x_h));
    assert!(st.infer(&held[0].lr, 1, 5).unwrap().x_h.all_finite());
    assert!(st.infer(&Tensor::zeros(&[4, 8, 8, 3]), 1, 5).is_err());
}

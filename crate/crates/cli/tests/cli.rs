use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sateco::data_io::{decode_svt_header, read_svt};

const TINY: &str = "\
# small enough for sub-second stages
model.frames = 2
model.unet_widths = 8,8
model.vae_widths = 4,8,12
model.temb_dim = 8
model.refiner_hidden = 4
model.upscaler.channels = 8
model.upscaler.heads = 2
model.upscaler.window = 2x2
model.tfa.heads = 2
model.tfa.window = 2x2
sample_steps = 2
batch = 1
lr = 1e-3
steps = 3
";

fn sateco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sateco")).args(args).env_remove("SATECO_CKPT_DIR").output().expect("spawn sateco")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, clips: usize, seed: u64) -> PathBuf {
    let out = dir.join("data");
    ok(sateco(&["gen-data", "--out", s(&out), "--clips", &clips.to_string(), "--size", "16x16", "--frames", "2", "--seed", &seed.to_string()]));
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p
}

/// Data, config and a checkpoint directory holding all five stages.
fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = gen(dir, 3, 1);
    let cfg = tiny_config(dir);
    let ckpt = dir.join("ckpt");
    for stage in 0..5 {
        ok(sateco(&["train", "--stage", &stage.to_string(), "--data", s(&data), "--ckpt", s(&ckpt), "--config", s(&cfg)]));
    }
    (data, cfg, ckpt)
}

fn svt_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).filter(|n| n.ends_with(".svt")).collect();
    v.sort();
    v
}

fn manifest_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix(" = "))
}

#[test]
fn gen_data_writes_paired_files_with_quarter_size_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 5);
    assert_eq!(svt_names(&data), ["clip_0000_gt.svt", "clip_0000_lr.svt", "clip_0001_gt.svt", "clip_0001_lr.svt"]);
    let gt = decode_svt_header(&fs::read(data.join("clip_0000_gt.svt")).unwrap()).unwrap();
    let lr = decode_svt_header(&fs::read(data.join("clip_0000_lr.svt")).unwrap()).unwrap();
    assert_eq!(gt, [2, 16, 16, 3]);
    assert_eq!(lr, [2, 4, 4, 3]);
    assert!(data.join("gen-data.manifest").exists());
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (gen(a.path(), 2, 9), gen(b.path(), 2, 9));
    for n in svt_names(&da) {
        assert_eq!(fs::read(da.join(&n)).unwrap(), fs::read(db.join(&n)).unwrap(), "{n}");
    }
    let c = tempfile::tempdir().unwrap();
    let dc = gen(c.path(), 2, 10);
    assert_ne!(fs::read(da.join("clip_0000_gt.svt")).unwrap(), fs::read(dc.join("clip_0000_gt.svt")).unwrap());
}

#[test]
fn gen_data_refuses_a_non_empty_directory_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 1, 0);
    let again = sateco(&["gen-data", "--out", s(&data), "--clips", "1", "--size", "16x16", "--frames", "2"]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    ok(sateco(&["gen-data", "--out", s(&data), "--clips", "1", "--size", "16x16", "--frames", "2", "--force"]));
}

#[test]
fn gen_data_rejects_bad_sizes_and_motions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&sateco(&["gen-data", "--out", s(&out), "--size", "18x16"])), 2);
    assert_eq!(code(&sateco(&["gen-data", "--out", s(&out), "--size", "16"])), 2);
    assert_eq!(code(&sateco(&["gen-data", "--out", s(&out), "--motion", "spin"])), 2);
    ok(sateco(&["gen-data", "--out", s(&out), "--clips", "1", "--size", "16x16", "--frames", "2", "--motion", "bounce"]));
}

#[test]
fn train_names_the_missing_prerequisite_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 0);
    let cfg = tiny_config(dir.path());
    let o = sateco(&["train", "--stage", "2", "--data", s(&data), "--ckpt", s(&dir.path().join("ck")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("stage 1"), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_manifest_and_one_log_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 0);
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("ck");
    ok(sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--config", s(&cfg), "--steps", "6"]));
    ok(sateco(&["train", "--stage", "1", "--data", s(&data), "--ckpt", s(&ck), "--config", s(&cfg), "--steps", "5"]));
    for (stage, steps) in [(0, 6), (1, 5)] {
        assert!(ck.join(format!("stage{stage}.ckpt")).exists());
        let log = fs::read_to_string(ck.join(format!("stage{stage}.log"))).unwrap();
        assert_eq!(log.lines().count(), steps);
        for line in log.lines() {
            sateco::pipeline::LogRecord::from_line(line).unwrap();
        }
        let m = fs::read_to_string(ck.join(format!("stage{stage}.manifest"))).unwrap();
        assert_eq!(manifest_value(&m, "command"), Some("train"));
        assert_eq!(manifest_value(&m, "extra.stage.steps"), Some(steps.to_string().as_str()));
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 0);
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("ck");
    ok(sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--config", s(&cfg), "--lr", "0.0025"]));
    let m = fs::read_to_string(ck.join("stage0.manifest")).unwrap();
    assert_eq!(manifest_value(&m, "extra.stage.lr"), Some("0.0025"));
    assert_eq!(manifest_value(&m, "extra.stage.steps"), Some("3"));
    ok(sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--config", s(&cfg), "--set", "stage0.steps=4"]));
    let m = fs::read_to_string(ck.join("stage0.manifest")).unwrap();
    assert_eq!(manifest_value(&m, "extra.stage.steps"), Some("4"));
    assert_eq!(manifest_value(&m, "extra.stage.lr"), Some("0.001"));
}

#[test]
fn config_errors_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 0);
    let ck = dir.path().join("ck");
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "stepz = 3\n").unwrap();
    assert_eq!(code(&sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--config", s(&bad)])), 2);
    assert_eq!(code(&sateco(&["train", "--stage", "7", "--data", s(&data), "--ckpt", s(&ck)])), 2);
    assert_eq!(code(&sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--preset", "huge"])), 2);
    assert_eq!(code(&sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--lr", "-1"])), 2);
    assert_eq!(code(&sateco(&["train", "--stage", "0", "--data", s(&data), "--ckpt", s(&ck), "--variant", "E"])), 2);
    assert_eq!(code(&sateco(&["frobnicate"])), 2);
}

#[test]
fn checkpoint_directory_defaults_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 0);
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("envck");
    let o = Command::new(env!("CARGO_BIN_EXE_sateco")).args(["train", "--stage", "0", "--data", s(&data), "--config", s(&cfg)]).env("SATECO_CKPT_DIR", &ck).output().unwrap();
    ok(o);
    assert!(ck.join("stage0.ckpt").exists());
}

#[test]
fn infer_upscales_four_times_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, ck) = trained(dir.path());
    let out = dir.path().join("out");
    let a = out.join("clip_0000_hr.svt");
    let b = out.join("again_hr.svt");
    let input = data.join("clip_0000_lr.svt");
    ok(sateco(&["infer", "--in", s(&input), "--ckpt", s(&ck), "--steps", "3", "--seed", "4", "--out", s(&a)]));
    ok(sateco(&["infer", "--in", s(&input), "--ckpt", s(&ck), "--steps", "3", "--seed", "4", "--out", s(&b)]));
    let lr = decode_svt_header(&fs::read(&input).unwrap()).unwrap();
    let hr = decode_svt_header(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(hr, [lr[0], lr[1] * 4, lr[2] * 4, lr[3]]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(out.join("clip_0000_hr.svt.manifest").exists());
}

#[test]
fn infer_with_one_step_completes_and_writes_intermediates() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, ck) = trained(dir.path());
    let out = dir.path().join("out").join("clip_0001_hr.svt");
    ok(sateco(&["infer", "--in", s(&data.join("clip_0001_lr.svt")), "--ckpt", s(&ck), "--steps", "1", "--out", s(&out), "--intermediates"]));
    let inter = dir.path().join("out").join("intermediates");
    assert_eq!(svt_names(&inter), ["clip_0001_hr_d.svt", "clip_0001_hr_u.svt"]);
    assert_eq!(read_svt(&out).unwrap().shape(), read_svt(inter.join("clip_0001_hr_u.svt")).unwrap().shape());
}

#[test]
fn infer_needs_the_final_stage() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 0);
    let o = sateco(&["infer", "--in", s(&data.join("clip_0000_lr.svt")), "--ckpt", s(&dir.path().join("none")), "--out", s(&dir.path().join("x.svt"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("stage 4"), "{}", stderr(&o));
}

#[test]
fn infer_surfaces_codec_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ck) = trained(dir.path());
    let junk = dir.path().join("junk.svt");
    fs::write(&junk, b"NOPE0000").unwrap();
    let o = sateco(&["infer", "--in", s(&junk), "--ckpt", s(&ck), "--out", s(&dir.path().join("x.svt"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("svt"), "{}", stderr(&o));
}

fn table_rows(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split_whitespace();
            let name = it.next().unwrap().to_string();
            (name, it.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn eval_of_identical_clips_hits_the_metric_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 3);
    let pred = dir.path().join("pred");
    fs::create_dir(&pred).unwrap();
    for n in ["clip_0000", "clip_0001"] {
        fs::copy(data.join(format!("{n}_gt.svt")), pred.join(format!("{n}_pred.svt"))).unwrap();
    }
    let rep = dir.path().join("rep.txt");
    ok(sateco(&["eval", "--pred", s(&pred), "--gt", s(&data), "--metrics", "psnr,ssim,tc", "--out", s(&rep)]));
    let rows = table_rows(&fs::read_to_string(&rep).unwrap());
    assert_eq!(rows.len(), 3);
    for (_, v) in &rows {
        assert_eq!(v[0], 100.0);
        assert!((v[1] - 1.0).abs() < 1e-6, "{v:?}");
        assert_eq!(v[2], 0.0);
    }
    let records = fs::read_to_string(dir.path().join("rep.txt.records")).unwrap();
    assert_eq!(records.lines().count(), 6);
}

#[test]
fn eval_mean_row_is_the_mean_of_clip_rows_and_bicubic_is_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 3, 2);
    let rep = dir.path().join("bic.txt");
    ok(sateco(&["eval", "--pred", s(&data), "--gt", s(&data), "--upsample", "4", "--out", s(&rep)]));
    let rows = table_rows(&fs::read_to_string(&rep).unwrap());
    let (mean, clips) = rows.split_last().unwrap();
    assert_eq!(mean.0, "mean");
    assert_eq!(clips.len(), 3);
    for m in 0..3 {
        let avg = clips.iter().map(|r| r.1[m]).sum::<f64>() / 3.0;
        assert!((avg - mean.1[m]).abs() < 2e-6, "metric {m}: {avg} vs {}", mean.1[m]);
    }
    // bicubic is a real baseline: finite PSNR well below the cap
    assert!(mean.1[0] > 10.0 && mean.1[0] < 60.0, "{:?}", mean.1);
}

#[test]
fn eval_skips_unpaired_files_and_fails_when_nothing_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2, 3);
    let pred = dir.path().join("pred");
    fs::create_dir(&pred).unwrap();
    fs::copy(data.join("clip_0000_gt.svt"), pred.join("clip_0000_sr.svt")).unwrap();
    fs::copy(data.join("clip_0000_gt.svt"), pred.join("orphan_sr.svt")).unwrap();
    let o = ok(sateco(&["eval", "--pred", s(&pred), "--gt", s(&data), "--metrics", "psnr", "--out", s(&dir.path().join("r.txt"))]));
    let err = stderr(&o);
    assert!(err.contains("orphan_sr.svt") && err.contains("clip_0001_gt.svt"), "{err}");
    assert_eq!(table_rows(&fs::read_to_string(dir.path().join("r.txt")).unwrap()).len(), 2);

    fs::remove_file(pred.join("clip_0000_sr.svt")).unwrap();
    let o = sateco(&["eval", "--pred", s(&pred), "--gt", s(&data), "--out", s(&dir.path().join("r2.txt"))]);
    assert_eq!(code(&o), 3);
    assert_eq!(code(&sateco(&["eval", "--pred", s(&pred), "--gt", s(&data), "--metrics", "lpips", "--out", s(&dir.path().join("r3.txt"))])), 2);
}

fn group_count(manifest: &str, group: &str) -> usize {
    manifest_value(manifest, &format!("extra.params.{group}")).unwrap().parse().unwrap()
}

#[test]
fn ablate_variant_a_has_no_guidance_module_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 3, 1);
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("abl");
    for v in ["A", "D"] {
        ok(sateco(&["ablate", "--variant", v, "--data", s(&data), "--ckpt", s(&ck), "--config", s(&cfg), "--held-out", "0.3"]));
    }
    let a = fs::read_to_string(ck.join("ablate_A.manifest")).unwrap();
    let d = fs::read_to_string(ck.join("ablate_D.manifest")).unwrap();
    for g in ["vae.sfa", "vae.tfa", "unet.sfa", "unet.tfa"] {
        assert_eq!(group_count(&a, g), 0, "{g}");
        assert!(group_count(&d, g) > 0, "{g}");
    }
    assert_eq!(manifest_value(&a, "extra.train_clips"), Some("2"));
    assert_eq!(manifest_value(&a, "extra.held_out_clips"), Some("1"));
    let report = fs::read_to_string(ck.join("ablate_D.txt")).unwrap();
    assert!(report.starts_with("D w=0.5 psnr="), "{report}");
}

#[test]
fn ablate_all_reports_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 3, 1);
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("abl");
    ok(sateco(&["ablate", "--variant", "all", "--data", s(&data), "--ckpt", s(&ck), "--config", s(&cfg), "--held-out", "0.3"]));
    let report = fs::read_to_string(ck.join("ablate_all.txt")).unwrap();
    let labels: Vec<&str> = report.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(labels, ["A", "B", "C", "D", "D-w0", "D-w1"]);
}

#[test]
fn ablate_rejects_unknown_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 3, 1);
    let o = sateco(&["ablate", "--variant", "E", "--data", s(&data), "--ckpt", s(&dir.path().join("abl"))]);
    assert_eq!(code(&o), 2);
    let o = sateco(&["ablate", "--variant", "A", "--data", s(&data), "--ckpt", s(&dir.path().join("abl")), "--held-out", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_every_registered_case_at_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let rep = dir.path().join("gc.txt");
    let o = ok(sateco(&["gradcheck", "--module", "all", "--tol", "1e-3", "--out", s(&rep)]));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), sateco::gradcheck::suite().len() * 5);
    assert!(lines.iter().all(|l| l.ends_with(" ok")));
    assert!(dir.path().join("gc.txt.manifest").exists());
}

#[test]
fn gradcheck_exit_codes_distinguish_unknown_modules_from_failures() {
    assert_eq!(code(&sateco(&["gradcheck", "--module", "lpips"])), 2);
    assert_eq!(code(&sateco(&["gradcheck", "--module", "gelu", "--tol", "1e-15", "--seeds", "1"])), 4);
    ok(sateco(&["gradcheck", "--module", "sfa", "--seeds", "2"]));
}

#[test]
fn rerun_reproduces_training_and_inference_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, ck) = trained(dir.path());
    let first = fs::read(ck.join("stage4.ckpt")).unwrap();
    fs::remove_file(ck.join("stage4.ckpt")).unwrap();
    ok(sateco(&["rerun", s(&ck.join("stage4.manifest"))]));
    assert_eq!(fs::read(ck.join("stage4.ckpt")).unwrap(), first);

    let out = dir.path().join("clip_0002_hr.svt");
    ok(sateco(&["infer", "--in", s(&data.join("clip_0002_lr.svt")), "--ckpt", s(&ck), "--steps", "2", "--out", s(&out)]));
    let first = fs::read(&out).unwrap();
    fs::remove_file(&out).unwrap();
    ok(sateco(&["rerun", s(&dir.path().join("clip_0002_hr.svt.manifest"))]));
    assert_eq!(fs::read(&out).unwrap(), first);

    let before: Vec<Vec<u8>> = svt_names(&data).iter().map(|n| fs::read(data.join(n)).unwrap()).collect();
    ok(sateco(&["rerun", s(&data.join("gen-data.manifest"))]));
    let after: Vec<Vec<u8>> = svt_names(&data).iter().map(|n| fs::read(data.join(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn rerun_rejects_malformed_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("bad.manifest");
    fs::write(&m, "command = train\nbogus = 1\n").unwrap();
    assert_eq!(code(&sateco(&["rerun", s(&m)])), 2);
    fs::write(&m, "command = rerun\narg = rerun\narg = x\n").unwrap();
    assert_eq!(code(&sateco(&["rerun", s(&m)])), 2);
}

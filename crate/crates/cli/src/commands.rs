//! Command implementations. Every command except `rerun` writes a manifest
//! holding its argument vector and working directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;
use sateco::data_io::{bicubic_up, read_svt, synth_dataset, write_svt, ClipPair, Motion};
use sateco::gradcheck::suite;
use sateco::metrics::Metric;
use sateco::networks::Variant;
use sateco::pipeline::{evaluate, run_ablation, train_full, LogRecord, Stage, TrainState};
use sateco::ParamGroup;

use crate::manifest::{digest_files, RunManifest};
use crate::settings::{check_key, parse_size, Settings};
use crate::{Cli, CliError, Command, SettingArgs};

const DEGRADATION_FACTOR: usize = 4;

pub fn dispatch(cli: Cli, args: &[String]) -> Result<()> {
    match cli.command {
        Command::GenData { out, clips, size, frames, seed, motion, force } => gen_data(args, &out, clips, &size, frames, seed, &motion, force),
        Command::Train { stage, data, ckpt, steps, seed, lr, batch, variant, settings } => {
            let mut flags = BTreeMap::new();
            put(&mut flags, "steps", steps);
            put(&mut flags, "seed", seed);
            put(&mut flags, "lr", lr);
            put(&mut flags, "batch", batch);
            put(&mut flags, "variant", variant);
            train(args, stage, &data, &ckpt, &settings, flags)
        }
        Command::Infer { input, ckpt, steps, seed, out, intermediates } => infer(args, &input, &ckpt, steps, seed, &out, intermediates),
        Command::Eval { pred, gt, metrics, out, upsample } => eval(args, &pred, &gt, &metrics, &out, upsample),
        Command::Ablate { variant, data, ckpt, held_out, seed, settings } => {
            let mut flags = BTreeMap::new();
            put(&mut flags, "seed", seed);
            ablate(args, &variant, &data, &ckpt, held_out, &settings, flags)
        }
        Command::Gradcheck { module, tol, seeds, out } => gradcheck(args, &module, tol, seeds, out.as_deref()),
        Command::Rerun { manifest } => rerun(&manifest),
    }
}

fn put<T: ToString>(flags: &mut BTreeMap<String, String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.insert(key.into(), v.to_string());
    }
}

fn load_settings(s: &SettingArgs, mut flags: BTreeMap<String, String>) -> Result<Settings> {
    for kv in &s.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        check_key(k).map_err(CliError::Config)?;
        flags.entry(k.to_string()).or_insert_with(|| v.to_string());
    }
    if let Some(p) = &s.preset {
        flags.insert("preset".into(), p.clone());
    }
    Settings::load(s.config.as_deref(), flags)
}

fn manifest(command: &str, args: &[String]) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, args);
    let cwd = std::env::current_dir().context("reading working directory")?;
    m.extra.push(("cwd".into(), cwd.display().to_string()));
    Ok(m)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn svt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "svt") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Every `<name>_gt.svt` with its `<name>_lr.svt`, sorted by name.
fn load_pairs(dir: &Path) -> Result<(Vec<ClipPair>, Vec<PathBuf>)> {
    let mut clips = Vec::new();
    let mut files = Vec::new();
    for gt in svt_files(dir)? {
        let Some(name) = gt.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix("_gt.svt")).map(str::to_string) else { continue };
        let lr = dir.join(format!("{name}_lr.svt"));
        if !lr.exists() {
            return Err(CliError::Missing(format!("{} has no matching {}", gt.display(), lr.display())).into());
        }
        clips.push(ClipPair { name, gt: read_svt(&gt)?, lr: read_svt(&lr)? });
        files.push(gt);
        files.push(lr);
    }
    if clips.is_empty() {
        return Err(CliError::Missing(format!("no <name>_gt.svt / <name>_lr.svt pairs in {}", dir.display())).into());
    }
    Ok((clips, files))
}

/// Writes log lines as they arrive; the first IO error is kept for later.
struct LogSink {
    out: BufWriter<fs::File>,
    err: Option<std::io::Error>,
    every: usize,
}

impl LogSink {
    fn create(path: &Path, total: usize) -> Result<Self> {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(LogSink { out: BufWriter::new(f), err: None, every: (total / 10).max(1) })
    }

    fn record(&mut self, label: &str, r: &LogRecord) {
        if self.err.is_none() {
            if let Err(e) = writeln!(self.out, "{}", r.to_line()) {
                self.err = Some(e);
            }
        }
        if (r.step + 1).is_multiple_of(self.every) {
            eprintln!("[{label}] stage {} step {} loss {:.5}", r.stage.index(), r.step + 1, r.loss);
        }
    }

    fn close(mut self) -> Result<()> {
        if let Some(e) = self.err.take() {
            return Err(e).context("writing training log");
        }
        self.out.flush().context("writing training log")
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(args: &[String], out: &Path, clips: usize, size: &str, frames: usize, seed: u64, motion: &str, force: bool) -> Result<()> {
    let (h, w) = parse_size(size)?;
    if clips == 0 || frames == 0 {
        return Err(CliError::Config("--clips and --frames must be positive".into()).into());
    }
    if h % DEGRADATION_FACTOR != 0 || w % DEGRADATION_FACTOR != 0 {
        return Err(CliError::Config(format!("size {h}x{w} is not divisible by {DEGRADATION_FACTOR}")).into());
    }
    let motions: Vec<Motion> = if motion == "all" { Motion::ALL.to_vec() } else { vec![motion.parse()?] };
    if out.exists() && !force && fs::read_dir(out)?.next().is_some() {
        return Err(CliError::Config(format!("{} is not empty (pass --force to write into it)", out.display())).into());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = synth_dataset(seed, clips, frames, (h, w), &motions, DEGRADATION_FACTOR)?;
    let mut m = manifest("gen-data", args)?;
    for c in &data {
        for (suffix, t) in [("gt", &c.gt), ("lr", &c.lr)] {
            let p = out.join(format!("{}_{suffix}.svt", c.name));
            write_svt(&p, t)?;
            m.outputs.push(p);
        }
    }
    m.seed = Some(seed);
    m.output_dir = Some(out.to_path_buf());
    m.extra.push(("digest".into(), digest_files(&m.outputs)?));
    m.write(&out.join("gen-data.manifest"))?;
    println!("wrote {} clips ({} files) to {}", data.len(), m.outputs.len(), out.display());
    Ok(())
}

fn has_model_keys(s: &Settings) -> bool {
    s.resolved_pairs().iter().any(|(k, _)| k == "variant" || k.starts_with("model."))
}

fn train(args: &[String], stage: u8, data: &Path, ckpt: &Path, sa: &SettingArgs, flags: BTreeMap<String, String>) -> Result<()> {
    let stage = Stage::from_index(stage)?;
    let s = load_settings(sa, flags)?;
    let cfg = s.stage(stage)?;
    let (clips, data_files) = load_pairs(data)?;
    let mut m = manifest("train", args)?;
    let mut st = match stage.prerequisite() {
        None => TrainState::new(s.model()?, s.seed()?, s.schedule()?)?,
        Some(p) => {
            let st = TrainState::load_stage(ckpt, p)?;
            if has_model_keys(&s) && s.model()? != st.config {
                return Err(CliError::Config(format!("model settings differ from the stage-{} checkpoint; they are fixed at stage 0", p.index())).into());
            }
            m.inputs.push(p.checkpoint_path(ckpt));
            st
        }
    };
    fs::create_dir_all(ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    let log_path = ckpt.join(format!("stage{}.log", stage.index()));
    let mut sink = LogSink::create(&log_path, cfg.steps)?;
    let records = st.train_stage(cfg.clone(), &clips, |r| sink.record("train", r))?;
    sink.close()?;
    let ckpt_path = stage.checkpoint_path(ckpt);
    st.save(&ckpt_path)?;

    m.config_path = s.config_path.clone();
    if let Some(p) = &s.config_path {
        m.extra.push(("config_digest".into(), digest_files(std::slice::from_ref(p))?));
    }
    m.seed = Some(cfg.seed);
    m.outputs = vec![ckpt_path.clone(), log_path];
    m.output_dir = Some(ckpt.to_path_buf());
    m.extra.push(("data".into(), data.display().to_string()));
    m.extra.push(("data_digest".into(), digest_files(&data_files)?));
    m.extra.extend(s.resolved_pairs().into_iter().map(|(k, v)| (format!("setting.{k}"), v)));
    m.extra.push(("stage.steps".into(), cfg.steps.to_string()));
    m.extra.push(("stage.lr".into(), format!("{:?}", cfg.learning_rate)));
    m.extra.push(("stage.batch".into(), cfg.batch_clips.to_string()));
    m.write(&ckpt.join(format!("stage{}.manifest", stage.index())))?;
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    println!("stage {} ({}) done: {} steps, final loss {last:.6}, checkpoint {}", stage.index(), stage.as_str(), records.len(), ckpt_path.display());
    Ok(())
}

fn infer(args: &[String], input: &Path, ckpt: &Path, steps: usize, seed: u64, out: &Path, intermediates: bool) -> Result<()> {
    if steps == 0 {
        return Err(CliError::Config("--steps must be positive".into()).into());
    }
    let st = TrainState::load_stage(ckpt, Stage::Refiner)?;
    let x_l = read_svt(input)?;
    let res = st.infer(&x_l, steps, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_svt(out, &res.x_h)?;
    let mut m = manifest("infer", args)?;
    m.seed = Some(seed);
    m.inputs = vec![Stage::Refiner.checkpoint_path(ckpt), input.to_path_buf()];
    m.outputs.push(out.to_path_buf());
    if intermediates {
        // a subdirectory keeps them out of `eval --pred` pairing
        let dir = out.parent().unwrap_or(Path::new("")).join("intermediates");
        fs::create_dir_all(&dir)?;
        let stem = out.file_stem().map_or("clip".into(), |s| s.to_string_lossy().into_owned());
        for (tag, t) in [("u", &res.x_u), ("d", &res.x_d)] {
            let p = dir.join(format!("{stem}_{tag}.svt"));
            write_svt(&p, t)?;
            m.outputs.push(p);
        }
    }
    m.output_dir = out.parent().map(Path::to_path_buf);
    m.write(&with_suffix(out, ".manifest"))?;
    let (l, h, w, c) = res.x_h.dims4()?;
    println!("wrote {} ({l}x{h}x{w}x{c})", out.display());
    Ok(())
}

/// Clip name of a file: the stem without a trailing role suffix.
fn clip_name(p: &Path) -> Option<String> {
    let stem = p.file_stem()?.to_str()?;
    let name = ["_gt", "_lr", "_hr", "_pred", "_sr"].iter().find_map(|s| stem.strip_suffix(s)).unwrap_or(stem);
    Some(name.to_string())
}

fn by_name(dir: &Path, skip_suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in svt_files(dir)? {
        if p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(skip_suffix)) {
            continue;
        }
        if let Some(n) = clip_name(&p) {
            if let Some(prev) = out.insert(n.clone(), p.clone()) {
                return Err(CliError::Config(format!("{} and {} both name clip {n}", prev.display(), p.display())).into());
            }
        }
    }
    Ok(out)
}

fn eval(args: &[String], pred: &Path, gt: &Path, metrics: &str, out: &Path, upsample: Option<usize>) -> Result<()> {
    let metrics = Metric::parse_list(metrics)?;
    let preds = by_name(pred, "_gt")?;
    let gts = by_name(gt, "_lr")?;
    for (n, p) in preds.iter().filter(|(n, _)| !gts.contains_key(*n)) {
        eprintln!("unpaired prediction {} (no ground truth for {n}), skipped", p.display());
    }
    for (n, p) in gts.iter().filter(|(n, _)| !preds.contains_key(*n)) {
        eprintln!("unpaired ground truth {} (no prediction for {n}), skipped", p.display());
    }
    let names: Vec<&String> = preds.keys().filter(|n| gts.contains_key(*n)).collect();
    if names.is_empty() {
        return Err(CliError::Missing(format!("no prediction in {} pairs with ground truth in {}", pred.display(), gt.display())).into());
    }
    let model = pred.file_name().map_or("pred".into(), |n| n.to_string_lossy().into_owned());
    let mut table = String::new();
    let mut records = String::new();
    let _ = write!(table, "{:<24}", "clip");
    for mt in &metrics {
        let _ = write!(table, " {:>14}", mt.as_str());
    }
    table.push('\n');
    let mut sums = vec![0.0; metrics.len()];
    let mut m = manifest("eval", args)?;
    for n in &names {
        let mut x = read_svt(&preds[*n])?;
        if let Some(f) = upsample {
            x = bicubic_up(&x, f)?;
        }
        let y = read_svt(&gts[*n])?;
        let _ = write!(table, "{n:<24}");
        for (i, mt) in metrics.iter().enumerate() {
            let r = mt.evaluate(&x, &y).with_context(|| format!("scoring clip {n}"))?.with_ids(n, &model);
            sums[i] += r.mean;
            let _ = write!(table, " {:>14.6}", r.mean);
            let _ = writeln!(records, "{}", r.to_line());
        }
        table.push('\n');
        m.inputs.push(preds[*n].clone());
        m.inputs.push(gts[*n].clone());
    }
    let _ = write!(table, "{:<24}", "mean");
    for s in &sums {
        let _ = write!(table, " {:>14.6}", s / names.len() as f64);
    }
    table.push('\n');
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    let rec_path = with_suffix(out, ".records");
    fs::write(&rec_path, records).with_context(|| format!("writing {}", rec_path.display()))?;
    m.outputs = vec![out.to_path_buf(), rec_path];
    m.output_dir = out.parent().map(Path::to_path_buf);
    m.write(&with_suffix(out, ".manifest"))?;
    print!("{table}");
    Ok(())
}

/// Sorted clips split into training and held-out sets; the held-out set is
/// the last `ceil(frac * n)` clips, at least one and never all.
fn split(mut clips: Vec<ClipPair>, frac: f64) -> Result<(Vec<ClipPair>, Vec<ClipPair>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(CliError::Config(format!("--held-out {frac} must lie in (0, 1)")).into());
    }
    if clips.len() < 2 {
        return Err(CliError::Config("ablation needs at least two clips".into()).into());
    }
    clips.sort_by(|a, b| a.name.cmp(&b.name));
    let k = ((clips.len() as f64 * frac).ceil() as usize).clamp(1, clips.len() - 1);
    let held = clips.split_off(clips.len() - k);
    Ok((clips, held))
}

fn ablate(args: &[String], variant: &str, data: &Path, ckpt: &Path, held_out: f64, sa: &SettingArgs, mut flags: BTreeMap<String, String>) -> Result<()> {
    let single: Option<Variant> = if variant == "all" { None } else { Some(variant.parse()?) };
    if let Some(v) = single {
        flags.insert("variant".into(), v.to_string());
    }
    let s = load_settings(sa, flags)?;
    let plan = s.plan()?;
    let (clips, data_files) = load_pairs(data)?;
    let (train, held) = split(clips, held_out)?;
    fs::create_dir_all(ckpt).with_context(|| format!("creating {}", ckpt.display()))?;
    let label = single.map_or("all".to_string(), |v| v.to_string());
    let log_path = ckpt.join(format!("ablate_{label}.log"));
    let total: usize = plan.stages.iter().map(|c| c.steps).sum();
    let mut sink = LogSink::create(&log_path, total)?;
    let mut m = manifest("ablate", args)?;
    let mut report = String::new();
    match single {
        Some(v) => {
            let st = train_full(s.model()?, &plan, &train, |r| sink.record(&label, r))?;
            sink.close()?;
            let ckpt_path = ckpt.join(format!("ablate_{v}.ckpt"));
            st.save(&ckpt_path)?;
            let e = evaluate(&st, &held, plan.sample_steps, plan.eval_seed)?;
            let _ = writeln!(report, "{v} w={} {e}", st.config.refiner_w);
            m.outputs.push(ckpt_path);
            for g in ParamGroup::ALL {
                m.extra.push((format!("params.{}", g.as_str()), st.store.count_in(g).to_string()));
            }
        }
        None => {
            let r = run_ablation(&s.model()?, &plan, &train, &held, |l, r| sink.record(l, r))?;
            sink.close()?;
            for row in &r.rows {
                let _ = writeln!(report, "{} w={} {}", row.label, row.refiner_w, row.eval);
            }
        }
    }
    let rep_path = ckpt.join(format!("ablate_{label}.txt"));
    fs::write(&rep_path, &report).with_context(|| format!("writing {}", rep_path.display()))?;
    m.config_path = s.config_path.clone();
    if let Some(p) = &s.config_path {
        m.extra.push(("config_digest".into(), digest_files(std::slice::from_ref(p))?));
    }
    m.seed = Some(plan.seed);
    m.outputs.extend([log_path, rep_path]);
    m.output_dir = Some(ckpt.to_path_buf());
    m.extra.push(("data".into(), data.display().to_string()));
    m.extra.push(("data_digest".into(), digest_files(&data_files)?));
    m.extra.push(("train_clips".into(), train.len().to_string()));
    m.extra.push(("held_out_clips".into(), held.len().to_string()));
    m.extra.extend(s.resolved_pairs().into_iter().map(|(k, v)| (format!("setting.{k}"), v)));
    m.write(&ckpt.join(format!("ablate_{label}.manifest")))?;
    print!("{report}");
    Ok(())
}

fn gradcheck(args: &[String], module: &str, tol: f64, seeds: u64, out: Option<&Path>) -> Result<()> {
    if tol.is_nan() || tol <= 0.0 || seeds == 0 {
        return Err(CliError::Config("--tol and --seeds must be positive".into()).into());
    }
    let cases = suite();
    let names: Vec<&str> = cases.iter().map(|c| c.name).collect();
    if module != "all" && !names.contains(&module) {
        return Err(CliError::Config(format!("unknown module {module:?}; known: all, {}", names.join(", "))).into());
    }
    let mut text = String::new();
    let mut failed = Vec::new();
    for case in cases.iter().filter(|c| module == "all" || c.name == module) {
        for seed in 0..seeds {
            let mut r = (case.run)(seed)?;
            r.tol = tol;
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(text, "{:<20} seed={seed} worst={:.3e} {verdict}", case.name, r.worst());
            if !r.passed() {
                let _ = write!(text, "{r}");
                failed.push(format!("{}@{seed}", case.name));
            }
        }
    }
    print!("{text}");
    if let Some(out) = out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        let mut m = manifest("gradcheck", args)?;
        m.outputs.push(out.to_path_buf());
        m.output_dir = out.parent().map(Path::to_path_buf);
        m.write(&with_suffix(out, ".manifest"))?;
    }
    if !failed.is_empty() {
        return Err(CliError::Check(format!("gradient check failed at tolerance {tol:e}: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn rerun(path: &Path) -> Result<()> {
    let m = RunManifest::read(path)?;
    if let Some((_, cwd)) = m.extra.iter().find(|(k, _)| k == "cwd") {
        std::env::set_current_dir(cwd).with_context(|| format!("entering recorded working directory {cwd}"))?;
    }
    let mut cli =
        Cli::try_parse_from(std::iter::once("sateco".to_string()).chain(m.args.iter().cloned())).map_err(|e| CliError::Config(format!("manifest arguments do not parse: {e}")))?;
    match &mut cli.command {
        Command::Rerun { .. } => return Err(CliError::Config("a manifest cannot record a rerun".into()).into()),
        // the recorded run may overwrite its own outputs
        Command::GenData { force, .. } => *force = true,
        _ => {}
    }
    eprintln!("rerunning: sateco {}", m.args.join(" "));
    dispatch(cli, &m.args)
}

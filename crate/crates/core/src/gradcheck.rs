//! Central finite-difference oracle for the analytic gradients on the tape.

use std::fmt;
use std::sync::Arc;

use crate::adaptation::{SfaConfig, SfaParams};
use crate::alignment::{TfaConfig, TfaParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::{Model, ModelConfig, Variant};
use crate::ops::{pixel_shuffle_index, NormMode};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tubelet::WindowSpec;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the per-operand maximum relative error.
    pub tol: f64,
    /// Coordinates sampled per operand (all when the operand is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, tol: 1e-3, max_coords: 48, seed: 0x5eed }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions { tol, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct OperandReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub operands: Vec<OperandReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.operands.iter().all(|o| o.max_rel_err <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.operands.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.operands {
            let verdict = if o.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "  {:<32} coords={:<4} max_rel_err={:.3e} {}", o.name, o.checked, o.max_rel_err, verdict)?;
        }
        Ok(())
    }
}

/// Relative error of one coordinate. The denominator is floored at a small
/// fraction of the operand's largest gradient, and at a small fraction of the
/// reduced output, below which the difference quotient is rounding noise.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const FLOOR_FRACTION: f64 = 1e-3;
const OUTPUT_FLOOR_FRACTION: f64 = 1e-6;

fn pick_coords(len: usize, max: usize, rng: &mut RngState) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(max);
    all.sort_unstable();
    all
}

/// Compare the tape gradient of `f` against central differences.
///
/// `f` builds an output from the input vars (and any parameters it pulls
/// from `store`). Non-scalar outputs are reduced by a fixed random
/// projection. Every input and every non-frozen parameter is checked.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor<f64>)], store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = RngState::new(opts.seed);
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: &Option<Tensor<f64>>| -> Result<(f64, Tensor<f64>)> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).clone();
        let s = match proj {
            Some(r) => value.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            None => value.data()[0],
        };
        Ok((s, value))
    };

    let base_inputs: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, out0) = eval(store, &base_inputs, &None)?;
    let proj = (out0.len() != 1).then(|| Tensor::<f64>::randn(out0.shape(), 1.0, &mut rng));

    // Analytic pass.
    let mut g = Graph::new(store);
    let vars: Vec<Var> = base_inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = match &proj {
        Some(r) => g.dot(out, r.clone())?,
        None => out,
    };
    let grads = g.backward(loss)?;
    let noise_floor = OUTPUT_FLOOR_FRACTION * g.value(loss).data()[0].abs().max(1.0);

    let mut operands = Vec::new();
    let h = opts.step;

    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        if let Some(i) = analytic.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { operand: name.to_string(), index: i });
        }
        let coords = pick_coords(t.len(), opts.max_coords, &mut rng);
        let mut numeric = Vec::with_capacity(coords.len());
        let mut perturbed = base_inputs.clone();
        for &c in &coords {
            let orig = perturbed[k].data()[c];
            perturbed[k].data_mut()[c] = orig + h;
            let (fp, _) = eval(store, &perturbed, &proj)?;
            perturbed[k].data_mut()[c] = orig - h;
            let (fm, _) = eval(store, &perturbed, &proj)?;
            perturbed[k].data_mut()[c] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        operands.push(summarize(name.to_string(), &coords, &analytic, &numeric, noise_floor));
    }

    let live: Vec<ParamId> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    let mut work = store.clone();
    for id in live {
        let name = store.get(id).name.clone();
        let len = store.value(id).len();
        let analytic = grads.param(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        if let Some(i) = analytic.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { operand: name, index: i });
        }
        let coords = pick_coords(len, opts.max_coords, &mut rng);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = work.value(id).data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + h;
            let (fp, _) = eval(&work, &base_inputs, &proj)?;
            work.get_mut(id).value.data_mut()[c] = orig - h;
            let (fm, _) = eval(&work, &base_inputs, &proj)?;
            work.get_mut(id).value.data_mut()[c] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        operands.push(summarize(name, &coords, &analytic, &numeric, noise_floor));
    }

    Ok(GradCheckReport { tol: opts.tol, operands })
}

fn summarize(name: String, coords: &[usize], analytic: &[f64], numeric: &[f64], noise_floor: f64) -> OperandReport {
    let scale = coords.iter().zip(numeric).map(|(&c, &n)| analytic[c].abs().max(n.abs())).fold(0.0, f64::max);
    let floor = (FLOOR_FRACTION * scale).max(noise_floor);
    let max_rel_err = coords.iter().zip(numeric).map(|(&c, &n)| rel_err(analytic[c], n, floor)).fold(0.0, f64::max);
    OperandReport { name, checked: coords.len(), max_rel_err }
}

/// One entry of [`suite`]: a named builder run once per seed.
pub struct SuiteCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

/// Outcome of one case on one seed.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

// h = 1e-4 keeps the O(h^2) truncation of normalization well under the
// tolerance while f64 rounding stays near 1e-12
fn suite_options(seed: u64, max_coords: usize) -> GradCheckOptions {
    GradCheckOptions { step: 1e-4, tol: 1e-3, max_coords, seed }
}

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn check_inputs(seed: u64, shapes: &[&[usize]], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let names: Vec<String> = (0..shapes.len()).map(|i| format!("in{i}")).collect();
    let inputs: Vec<(&str, Tensor<f64>)> = shapes.iter().zip(&names).map(|(s, n)| (n.as_str(), randn(s, &mut rng))).collect();
    grad_check(f, &inputs, &ParamStore::new(), &suite_options(seed, 48))
}

fn jitter(store: &mut ParamStore<f64>, std: f64, rng: &mut RngState) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        p.value = p.value.add(&Tensor::randn(p.value.shape(), std, rng)).expect("same shape");
    }
}

fn tiny_model(store: &mut ParamStore<f64>, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        frames: 2,
        unet_widths: [8, 8],
        vae_widths: [4, 8, 12],
        temb_dim: 4,
        refiner_hidden: 4,
        tfa: TfaConfig { heads: 2, window: WindowSpec { h: 2, w: 2 }, ..TfaConfig::default() },
        ..ModelConfig::for_variant(Variant::D)
    };
    Model::build(&cfg, store, seed)
}

fn sfa_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let p = SfaParams::register(&mut store, "sfa", ParamGroup::UnetSfa, 4, 3, SfaConfig::default(), &mut rng);
    jitter(&mut store, 0.3, &mut rng);
    let inputs = [("f", randn(&[2, 4, 4, 4], &mut rng)), ("guide", randn(&[2, 4, 4, 3], &mut rng))];
    grad_check(|g, x| p.forward(g, x[0], x[1]), &inputs, &store, &suite_options(seed, 24))
}

fn tfa_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let cfg = TfaConfig { heads: 2, window: WindowSpec { h: 2, w: 2 }, ..TfaConfig::default() };
    let p = TfaParams::register(&mut store, "tfa", ParamGroup::UnetTfa, 4, 3, cfg, &mut rng);
    jitter(&mut store, 0.3, &mut rng);
    let inputs = [("f", randn(&[4, 4, 4, 4], &mut rng)), ("guide", randn(&[4, 4, 4, 3], &mut rng))];
    grad_check(|g, x| p.forward(g, x[0], x[1], 2), &inputs, &store, &suite_options(seed, 24))
}

fn unet_block_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let m = tiny_model(&mut store, seed)?;
    jitter(&mut store, 0.05, &mut rng);
    store.set_trainable(&[ParamGroup::UnetBackbone, ParamGroup::UnetSfa, ParamGroup::UnetTfa]);
    let inputs = [("x", randn(&[2, 2, 2, 16], &mut rng)), ("temb", randn(&[1, 8], &mut rng)), ("guide", randn(&[2, 2, 2, 8], &mut rng))];
    grad_check(|g, x| m.unet.decoder_block(g, 0, x[0], x[1], Some(x[2]), 2), &inputs, &store, &suite_options(seed, 12))
}

fn refiner_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let m = tiny_model(&mut store, seed)?;
    jitter(&mut store, 0.05, &mut rng);
    store.set_trainable(&[ParamGroup::Refiner]);
    let inputs = [("x_u", randn(&[2, 5, 5, 3], &mut rng)), ("x_d", randn(&[2, 5, 5, 3], &mut rng))];
    grad_check(|g, x| m.refiner.forward(g, x[0], x[1]), &inputs, &store, &suite_options(seed, 24))
}

fn pixel_shuffle_case(seed: u64) -> Result<GradCheckReport> {
    let (shape, idx) = pixel_shuffle_index(&[2, 3, 3, 8], 2)?;
    let idx = Arc::new(idx);
    check_inputs(seed, &[&[2, 3, 3, 8]], |g, x| g.gather(x[0], shape.clone(), idx.clone()))
}

fn gather_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed ^ 0xA5);
    let idx: Vec<u32> = (0..12).map(|_| rng.int_inclusive(0, 5) as u32).collect();
    let idx = Arc::new(idx);
    check_inputs(seed, &[&[6]], |g, x| g.gather(x[0], vec![3, 4], idx.clone()))
}

/// Every differentiable op and composite module.
pub fn suite() -> Vec<SuiteCase> {
    macro_rules! case {
        ($name:literal, $shapes:expr, $f:expr) => {
            SuiteCase { name: $name, run: |seed| check_inputs(seed, $shapes, $f) }
        };
    }
    vec![
        case!("conv2d", &[&[2, 5, 5, 3], &[3, 3, 3, 4], &[4]], |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1)),
        case!("conv2d_strided", &[&[2, 6, 5, 3], &[3, 3, 3, 2], &[2]], |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1)),
        case!("conv3d", &[&[1, 3, 4, 4, 2], &[3, 3, 3, 2, 3], &[3]], |g, x| g.conv3d(x[0], x[1], Some(x[2]), (1, 1), (1, 1))),
        case!("linear", &[&[2, 3, 5], &[5, 4], &[4]], |g, x| g.linear(x[0], x[1], Some(x[2]))),
        case!("attention", &[&[2, 5, 8], &[2, 7, 8], &[2, 7, 8]], |g, x| g.attention(x[0], x[1], x[2], 2)),
        SuiteCase { name: "gather", run: gather_case },
        SuiteCase { name: "pixel_shuffle", run: pixel_shuffle_case },
        case!("concat_channels", &[&[2, 3, 3, 2], &[2, 3, 3, 3]], |g, x| g.concat_channels(x[0], x[1])),
        case!("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case!("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case!("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case!("add_bias", &[&[2, 3, 4], &[4]], |g, x| g.add_bias(x[0], x[1])),
        case!("scale_channels", &[&[2, 3, 4], &[4]], |g, x| g.scale_channels(x[0], x[1])),
        case!("scale", &[&[5]], |g, x| Ok(g.scale(x[0], -1.7))),
        case!("gelu", &[&[4, 5]], |g, x| Ok(g.gelu(x[0]))),
        case!("reshape", &[&[3, 4]], |g, x| g.reshape(x[0], &[6, 2])),
        case!("norm_per_channel", &[&[2, 3, 4, 5]], |g, x| g.norm(x[0], NormMode::PerChannel)),
        case!("norm_per_map", &[&[2, 3, 4, 5]], |g, x| g.norm(x[0], NormMode::PerMap)),
        case!("mse", &[&[3, 4], &[3, 4]], |g, x| g.mse(x[0], x[1])),
        case!("charbonnier", &[&[3, 4], &[3, 4]], |g, x| g.charbonnier(x[0], x[1], 1e-2)),
        SuiteCase { name: "sfa", run: sfa_case },
        SuiteCase { name: "tfa", run: tfa_case },
        SuiteCase { name: "unet_decoder_block", run: unet_block_case },
        SuiteCase { name: "refiner", run: refiner_case },
    ]
}

/// Run the cases whose name contains `filter` (all when `None`) on each seed.
pub fn run_suite(seeds: &[u64], filter: Option<&str>) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for case in suite().into_iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))) {
        for &seed in seeds {
            out.push(SuiteResult { name: case.name, seed, report: (case.run)(seed)? });
        }
    }
    Ok(out)
}

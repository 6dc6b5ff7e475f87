//! Temporal feature alignment: self-attention inside each HR tubelet, then
//! cross-attention from HR queries to keys and values of the matching LR
//! guidance tubelet.
//!
//! All projections are pointwise 3D convolutions over the `(L, h, w)` view of
//! a tubelet. With residual connections and zero-initialized output
//! projections a fresh module is an exact identity.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tubelet::{TubeletBatch, TubeletLayout, WindowSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TfaConfig {
    pub heads: usize,
    pub window: WindowSpec,
    /// Add each attention result back onto its query input.
    pub residual: bool,
    /// Zero-initialized projection after each attention stage.
    pub out_proj: bool,
}

impl Default for TfaConfig {
    fn default() -> Self {
        TfaConfig { heads: 4, window: WindowSpec::default(), residual: true, out_proj: true }
    }
}

/// Pointwise 3D convolution `(1, 1, 1, Cin, Cout)` plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Proj {
    pub w: ParamId,
    pub b: ParamId,
}

impl Proj {
    fn register<T: Element>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cin: usize, cout: usize, zero: bool, rng: &mut RngState) -> Self {
        let init = if zero { Init::Zeros } else { Init::FanIn { fan_in: cin, gain: 1.0 } };
        Proj { w: store.register(&format!("{name}.w"), group, &[1, 1, 1, cin, cout], init, rng), b: store.register(&format!("{name}.b"), group, &[cout], Init::Zeros, rng) }
    }

    /// Apply to an `(N, tokens, Cin)` var viewed as `(N, L, h, w, Cin)`.
    fn apply<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, volume: &[usize]) -> Result<Var> {
        let n_tok = g.shape(x)[..2].to_vec();
        let cin = g.shape(x)[2];
        let vol = [&volume[..4], &[cin]].concat();
        let xv = g.reshape(x, &vol)?;
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.conv3d(xv, w, Some(b), (1, 1), (0, 0))?;
        let cout = g.shape(y)[4];
        g.reshape(y, &[n_tok[0], n_tok[1], cout])
    }
}

#[derive(Clone, Debug)]
pub struct TfaParams {
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub q_cross: Proj,
    pub k_cross: Proj,
    pub v_cross: Proj,
    pub out_self: Option<Proj>,
    pub out_cross: Option<Proj>,
    pub channels: usize,
    pub guide_channels: usize,
    pub config: TfaConfig,
}

impl TfaParams {
    pub fn register<T: Element>(store: &mut ParamStore<T>, prefix: &str, group: ParamGroup, channels: usize, guide_channels: usize, config: TfaConfig, rng: &mut RngState) -> Self {
        assert!(config.heads > 0 && channels.is_multiple_of(config.heads), "{} heads do not divide {channels} channels", config.heads);
        let c = channels;
        let mut proj = |name: &str, cin: usize, zero: bool| Proj::register(store, &format!("{prefix}.{name}"), group, cin, c, zero, rng);
        let q = proj("self.q", c, false);
        let k = proj("self.k", c, false);
        let v = proj("self.v", c, false);
        let q_cross = proj("cross.q", c, false);
        let k_cross = proj("cross.k", guide_channels, false);
        let v_cross = proj("cross.v", guide_channels, false);
        let out_self = config.out_proj.then(|| proj("self.out", c, true));
        let out_cross = config.out_proj.then(|| proj("cross.out", c, true));
        TfaParams { q, k, v, q_cross, k_cross, v_cross, out_self, out_cross, channels, guide_channels, config }
    }

    fn finish<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, attended: Var, out: Option<Proj>, volume: &[usize]) -> Result<Var> {
        let y = match out {
            Some(p) => p.apply(g, attended, volume)?,
            None => attended,
        };
        if self.config.residual {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }

    /// Self-attention within each `(N, L*h*w, C)` tubelet.
    pub fn self_attend<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, layout: &TubeletLayout) -> Result<Var> {
        if g.shape(x) != [layout.count(), layout.tokens(), self.channels] {
            return Err(Error::invalid("tfa self", g.shape(x), format!("expected tubelets of {} channels", self.channels)));
        }
        let vol = layout.volume_shape();
        let q = self.q.apply(g, x, &vol)?;
        let k = self.k.apply(g, x, &vol)?;
        let v = self.v.apply(g, x, &vol)?;
        let a = g.attention(q, k, v, self.config.heads)?;
        self.finish(g, x, a, self.out_self, &vol)
    }

    /// Cross-attention from HR tubelets `x` to guidance tubelets.
    pub fn cross_attend<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, guide: Var, layout: &TubeletLayout) -> Result<Var> {
        let (xs, gs) = (g.shape(x).to_vec(), g.shape(guide).to_vec());
        if xs != [layout.count(), layout.tokens(), self.channels] || gs != [layout.count(), layout.tokens(), self.guide_channels] {
            return Err(Error::shape("tfa cross (HR vs LR tubelets)", &xs, &gs));
        }
        let vol = layout.volume_shape();
        let q = self.q_cross.apply(g, x, &vol)?;
        let k = self.k_cross.apply(g, guide, &vol)?;
        let v = self.v_cross.apply(g, guide, &vol)?;
        let a = g.attention(q, k, v, self.config.heads)?;
        self.finish(g, x, a, self.out_cross, &vol)
    }

    /// Partition, self-attend, cross-attend and merge a `(clips*L, H, W, C)`
    /// map. The window shrinks to the map when the map is smaller.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, f: Var, guide: Var, frames: usize) -> Result<Var> {
        let (fs, gs) = (g.shape(f).to_vec(), g.shape(guide).to_vec());
        if fs.len() != 4 || gs.len() != 4 || fs[..3] != gs[..3] {
            return Err(Error::shape("tfa", &fs, &gs));
        }
        let spec = self.config.window.clamped(fs[1], fs[2]);
        let layout = TubeletLayout::for_shape(&fs, frames, spec)?;
        let glayout = TubeletLayout { channels: gs[3], ..layout };
        let ft = layout.partition_var(g, f)?;
        let gt = glayout.partition_var(g, guide)?;
        let hat = self.self_attend(g, ft, &layout)?;
        let bar = self.cross_attend(g, hat, gt, &layout)?;
        layout.merge_var(g, bar)
    }
}

fn batch_layout<T: Element>(b: &TubeletBatch<T>) -> TubeletLayout {
    let mut l = b.layout();
    l.channels = b.tubelets.shape()[2];
    l
}

/// `F_hat = F + Attention(QKV(F))` on every tubelet of a batch.
pub fn tfa_self<T: Element>(f_tub: &TubeletBatch<T>, params: &TfaParams, store: &ParamStore<T>) -> Result<TubeletBatch<T>> {
    if params.config.heads == 0 || !params.channels.is_multiple_of(params.config.heads) {
        return Err(Error::arg("tfa_self", format!("{} heads do not divide {} channels", params.config.heads, params.channels)));
    }
    let mut g = Graph::new(store);
    let x = g.constant(f_tub.tubelets.clone());
    let y = params.self_attend(&mut g, x, &batch_layout(f_tub))?;
    f_tub.with_tubelets(g.value(y).clone())
}

/// `F_bar = F_hat + Attention(Q(F_hat), KV(G))` on matching tubelets.
pub fn tfa_cross<T: Element>(f_hat: &TubeletBatch<T>, g_tub: &TubeletBatch<T>, params: &TfaParams, store: &ParamStore<T>) -> Result<TubeletBatch<T>> {
    f_hat.check_compatible(g_tub)?;
    let mut g = Graph::new(store);
    let x = g.constant(f_hat.tubelets.clone());
    let gd = g.constant(g_tub.tubelets.clone());
    let y = params.cross_attend(&mut g, x, gd, &batch_layout(f_hat))?;
    f_hat.with_tubelets(g.value(y).clone())
}

/// Full alignment of one `(L, H, W, C)` clip against its guidance.
pub fn tfa_forward<T: Element>(f: &Tensor<T>, guide: &Tensor<T>, spec: WindowSpec, params: &TfaParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let (l, ..) = f.dims4()?;
    let mut p = params.clone();
    p.config.window = spec;
    let mut g = Graph::new(store);
    let fv = g.constant(f.clone());
    let gv = g.constant(guide.clone());
    let out = p.forward(&mut g, fv, gv, l)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tubelet::partition;

    fn setup(c: usize, config: TfaConfig) -> (ParamStore<f64>, TfaParams) {
        let mut rng = RngState::new(21);
        let mut store = ParamStore::new();
        let p = TfaParams::register(&mut store, "tfa", ParamGroup::UnetTfa, c, c, config, &mut rng);
        (store, p)
    }

    #[test]
    fn fresh_module_is_identity() {
        let (store, p) = setup(4, TfaConfig::default());
        let mut rng = RngState::new(2);
        let f = Tensor::randn(&[3, 10, 6, 4], 1.0, &mut rng);
        let gd = Tensor::randn(&[3, 10, 6, 4], 1.0, &mut rng);
        let out = tfa_forward(&f, &gd, WindowSpec::new(4, 4).unwrap(), &p, &store).unwrap();
        assert!(out.bit_eq(&f));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let (store, p) = setup(4, TfaConfig { out_proj: false, ..Default::default() });
        let mut rng = RngState::new(3);
        let row = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let f = Tensor::from_fn(&[2, 2, 2, 4], |i| row.data()[i % 4]);
        let b = partition(&f, WindowSpec::new(2, 2).unwrap()).unwrap();
        let out = tfa_self(&b, &p, &store).unwrap();
        let first = out.tubelets.data()[..4].to_vec();
        for r in out.tubelets.data().chunks(4) {
            for (a, b) in r.iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_returns_the_value_projection() {
        let (store, p) = setup(2, TfaConfig { residual: false, out_proj: false, heads: 1, window: WindowSpec::new(1, 1).unwrap() });
        let f = Tensor::new(&[1, 1, 1, 2], vec![0.7, -1.3]).unwrap();
        let b = partition(&f, WindowSpec::new(1, 1).unwrap()).unwrap();
        let out = tfa_self(&b, &p, &store).unwrap();
        let expect = crate::ops::conv3d(&f, store.value(p.v.w), store.value(p.v.b), (1, 1), (0, 0)).unwrap();
        assert!(out.tubelets.max_abs_diff(&expect.reshape(&[1, 1, 2]).unwrap()) < 1e-12);
    }

    #[test]
    fn constant_guidance_adds_a_projected_constant() {
        let (mut store, p) = setup(4, TfaConfig::default());
        let mut rng = RngState::new(5);
        let out_cross = p.out_cross.unwrap();
        store.get_mut(out_cross.w).value = Tensor::randn(&[1, 1, 1, 4, 4], 1.0, &mut rng);
        let f = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let v = [0.3, -0.2, 1.1, 0.5];
        let gd = Tensor::from_fn(&[2, 4, 4, 4], |i| v[i % 4]);
        let spec = WindowSpec::new(4, 4).unwrap();
        let fb = partition(&f, spec).unwrap();
        let gb = partition(&gd, spec).unwrap();
        let out = tfa_cross(&fb, &gb, &p, &store).unwrap();
        let vt = Tensor::new(&[1, 1, 1, 4], v.to_vec()).unwrap();
        let vp = crate::ops::conv3d(&vt, store.value(p.v_cross.w), store.value(p.v_cross.b), (1, 1), (0, 0)).unwrap();
        let shift = crate::ops::conv3d(&vp, store.value(out_cross.w), store.value(out_cross.b), (1, 1), (0, 0)).unwrap();
        for (o_row, f_row) in out.tubelets.data().chunks(4).zip(fb.tubelets.data().chunks(4)) {
            for c in 0..4 {
                assert!((o_row[c] - f_row[c] - shift.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let (store, p) = setup(4, TfaConfig::default());
        let a = partition(&Tensor::<f64>::zeros(&[2, 4, 4, 4]), WindowSpec::new(2, 2).unwrap()).unwrap();
        let b = partition(&Tensor::<f64>::zeros(&[2, 4, 8, 4]), WindowSpec::new(2, 2).unwrap()).unwrap();
        assert!(tfa_cross(&a, &b, &p, &store).is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        let (store, mut p) = setup(4, TfaConfig::default());
        p.config.heads = 3;
        let a = partition(&Tensor::<f64>::zeros(&[1, 2, 2, 4]), WindowSpec::new(2, 2).unwrap()).unwrap();
        assert!(tfa_self(&a, &p, &store).is_err());
    }
}

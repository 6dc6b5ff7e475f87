//! Spatial feature adaptation: per-pixel scale and bias predicted from a
//! guidance map modulate a normalized feature map.
//!
//! `S = conv(g)`, `M = conv(g)`, `out = S * (f - mu) / sigma + M`, with
//! `mu`, `sigma` taken per frame over spatial positions.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::NormMode;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SfaConfig {
    /// Odd kernel size of both affine convolutions.
    pub kernel: usize,
    pub norm: NormMode,
}

impl Default for SfaConfig {
    fn default() -> Self {
        SfaConfig { kernel: 3, norm: NormMode::PerChannel }
    }
}

#[derive(Clone, Debug)]
pub struct SfaParams {
    pub scale_w: ParamId,
    pub scale_b: ParamId,
    pub bias_w: ParamId,
    pub bias_b: ParamId,
    pub channels: usize,
    pub guide_channels: usize,
    pub config: SfaConfig,
}

impl SfaParams {
    /// Register identity-initialized parameters: both convolutions start
    /// with zero weights, the scale bias at 1 and the shift bias at 0.
    pub fn register<T: Element>(store: &mut ParamStore<T>, prefix: &str, group: ParamGroup, channels: usize, guide_channels: usize, config: SfaConfig, rng: &mut RngState) -> Self {
        assert!(config.kernel % 2 == 1, "SFA kernel must be odd");
        let k = config.kernel;
        let wshape = [k, k, guide_channels, channels];
        SfaParams {
            scale_w: store.register(&format!("{prefix}.scale.w"), group, &wshape, Init::Zeros, rng),
            scale_b: store.register(&format!("{prefix}.scale.b"), group, &[channels], Init::Const(1.0), rng),
            bias_w: store.register(&format!("{prefix}.shift.w"), group, &wshape, Init::Zeros, rng),
            bias_b: store.register(&format!("{prefix}.shift.b"), group, &[channels], Init::Zeros, rng),
            channels,
            guide_channels,
            config,
        }
    }

    fn check_guide(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != self.guide_channels {
            return Err(Error::invalid("sfa guidance", shape, format!("expected (B, H, W, {}) guidance", self.guide_channels)));
        }
        Ok(())
    }

    /// `(S, M)` fields for a `(B, H, W, Cg)` guidance var.
    pub fn affine<T: Element>(&self, g: &mut Graph<'_, T>, guide: Var) -> Result<(Var, Var)> {
        self.check_guide(g.shape(guide))?;
        let pad = self.config.kernel / 2;
        let (sw, sb) = (g.param(self.scale_w), g.param(self.scale_b));
        let (mw, mb) = (g.param(self.bias_w), g.param(self.bias_b));
        let s = g.conv2d(guide, sw, Some(sb), 1, pad)?;
        let m = g.conv2d(guide, mw, Some(mb), 1, pad)?;
        Ok((s, m))
    }

    /// Modulate `f (B, H, W, C)` with guidance `(B, H, W, Cg)`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, f: Var, guide: Var) -> Result<Var> {
        let (fs, gs) = (g.shape(f).to_vec(), g.shape(guide).to_vec());
        if fs.len() != 4 || gs.len() != 4 || fs[..3] != gs[..3] || fs[3] != self.channels {
            return Err(Error::shape("sfa", &fs, &gs));
        }
        let normed = g.norm(f, self.config.norm)?;
        let (s, m) = self.affine(g, guide)?;
        let scaled = g.mul(s, normed)?;
        g.add(scaled, m)
    }

    /// `SFA(f, g) - norm(f)` evaluated as `(S - 1) * norm(f) + M` from a
    /// precomputed `norm(f)`; exactly zero at identity init.
    pub fn residual<T: Element>(&self, g: &mut Graph<'_, T>, normed: Var, guide: Var) -> Result<Var> {
        let (fs, gs) = (g.shape(normed).to_vec(), g.shape(guide).to_vec());
        if fs.len() != 4 || gs.len() != 4 || fs[..3] != gs[..3] || fs[3] != self.channels {
            return Err(Error::shape("sfa", &fs, &gs));
        }
        let (s, m) = self.affine(g, guide)?;
        let ones = g.constant(Tensor::full(&fs, T::one()));
        let s1 = g.sub(s, ones)?;
        let scaled = g.mul(s1, normed)?;
        g.add(scaled, m)
    }
}

fn with_frame_axis<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let [h, w, c] = t.shape()[..] else {
        return Err(Error::invalid(op, t.shape(), "expected (H, W, C)"));
    };
    t.clone().reshape(&[1, h, w, c])
}

fn without_frame_axis<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    t.clone().reshape(&s[1..]).expect("leading axis is 1")
}

/// Affine fields `(S, M)` for one `(H, W, C)` guidance frame.
pub fn sfa_affine<T: Element>(g_i: &Tensor<T>, params: &SfaParams, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new(store);
    let guide = g.constant(with_frame_axis(g_i, "sfa_affine")?);
    let (s, m) = params.affine(&mut g, guide)?;
    Ok((without_frame_axis(g.value(s)), without_frame_axis(g.value(m))))
}

/// Modulated feature frame for `f_i`, `g_i` of shape `(H, W, C)`.
pub fn sfa_forward<T: Element>(f_i: &Tensor<T>, g_i: &Tensor<T>, params: &SfaParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(store);
    let f = g.constant(with_frame_axis(f_i, "sfa_forward")?);
    let guide = g.constant(with_frame_axis(g_i, "sfa_forward")?);
    let out = params.forward(&mut g, f, guide)?;
    Ok(without_frame_axis(g.value(out)))
}

/// Frame-wise SFA over `(L, H, W, C)` maps; frames do not interact.
pub fn sfa_apply<T: Element>(f: &Tensor<T>, guide: &Tensor<T>, params: &SfaParams, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let (lf, ..) = f.dims4()?;
    let (lg, ..) = guide.dims4()?;
    if lf != lg {
        return Err(Error::arg("sfa_apply", format!("{lf} feature frames vs {lg} guidance frames")));
    }
    let mut g = Graph::new(store);
    let fv = g.constant(f.clone());
    let gv = g.constant(guide.clone());
    let out = params.forward(&mut g, fv, gv)?;
    Ok(g.value(out).clone())
}

//! Parameterized networks: video upscaler, toy VAE, latent encoder, guided
//! UNet denoiser and video refiner.
//!
//! Every network works on frame batches `(clips*L, H, W, C)`; `L` is
//! [`ModelConfig::frames`]. Backbone decoder blocks end in a guidance site
//! whose module-free form is `r + a * norm(r)`, with `a` a per-channel
//! backbone gate starting at 0. The guided forms add to it:
//!
//! * zero-conv: `r + a * norm(r) + Z(g)` with a zero-initialized 1x1 conv `Z`
//! * SFA: `r + a * norm(r) + (SFA(r, g) - norm(r))`
//! * SFA+TFA: `TFA` applied to the SFA form
//!
//! A fresh SFA is exactly `norm(r)` and a fresh TFA is exactly the identity,
//! so inserting modules leaves the backbone output bit-identical.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::adaptation::{SfaConfig, SfaParams};
use crate::alignment::{TfaConfig, TfaParams};
use crate::data_io::bicubic_up;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{pixel_shuffle_index, NormMode};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tubelet::{TubeletLayout, WindowSpec};

// ---------------------------------------------------------------------------
// Building blocks

/// Same-padded 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    /// `gain == 0` gives a zero-initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, k: usize, cin: usize, cout: usize, stride: usize, gain: f64, rng: &mut RngState) -> Self {
        let init = if gain == 0.0 { Init::Zeros } else { Init::FanIn { fan_in: k * k * cin, gain } };
        Conv { w: store.register(&format!("{name}.w"), group, &[k, k, cin, cout], init, rng), b: store.register(&format!("{name}.b"), group, &[cout], Init::Zeros, rng), k, stride }
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.stride, self.k / 2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<T: Element>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cin: usize, cout: usize, gain: f64, rng: &mut RngState) -> Self {
        let init = if gain == 0.0 { Init::Zeros } else { Init::FanIn { fan_in: cin, gain } };
        Linear { w: store.register(&format!("{name}.w"), group, &[cin, cout], init, rng), b: store.register(&format!("{name}.b"), group, &[cout], Init::Zeros, rng) }
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

const GELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// `skip(x) + conv2(gelu(conv1(gelu(x)) + temb))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
    pub temb: Option<Linear>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, cin: usize, cout: usize, temb_dim: Option<usize>, rng: &mut RngState) -> Self {
        ResBlock {
            conv1: Conv::register(store, &format!("{name}.conv1"), group, 3, cin, cout, 1, GELU_GAIN, rng),
            conv2: Conv::register(store, &format!("{name}.conv2"), group, 3, cout, cout, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv::register(store, &format!("{name}.skip"), group, 1, cin, cout, 1, 1.0, rng)),
            temb: temb_dim.map(|d| Linear::register(store, &format!("{name}.temb"), group, d, cout, 1.0, rng)),
        }
    }

    /// `temb` is the `(clips, D)` timestep embedding, broadcast over frames.
    pub fn apply<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, temb: Option<Var>) -> Result<Var> {
        let a = g.gelu(x);
        let mut h = self.conv1.apply(g, a)?;
        if let (Some(lin), Some(t)) = (self.temb, temb) {
            let e = lin.apply(g, t)?;
            let shape = g.shape(h).to_vec();
            let expanded = expand_clip_vectors(g, e, &shape)?;
            h = g.add(h, expanded)?;
        }
        let a = g.gelu(h);
        let h = self.conv2.apply(g, a)?;
        let s = match self.skip {
            Some(c) => c.apply(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Broadcast `(clips, C)` to `(clips*L, H, W, C)`.
fn expand_clip_vectors<T: Element>(g: &mut Graph<'_, T>, v: Var, shape: &[usize]) -> Result<Var> {
    let [clips, c] = g.shape(v)[..] else {
        return Err(Error::invalid("expand", g.shape(v), "expected (clips, C)"));
    };
    let [n, h, w, sc] = shape[..] else {
        return Err(Error::invalid("expand", shape, "expected (frames, H, W, C)"));
    };
    if sc != c || n % clips != 0 {
        return Err(Error::shape("expand", g.shape(v), shape));
    }
    let per_clip = n / clips;
    let mut idx = Vec::with_capacity(n * h * w * c);
    for f in 0..n {
        let base = (f / per_clip) * c;
        for _ in 0..h * w {
            idx.extend((0..c).map(|ch| (base + ch) as u32));
        }
    }
    g.gather(v, shape.to_vec(), Arc::new(idx))
}

/// Nearest-neighbour x2 upsampling of `(B, H, W, C)`.
fn upsample2<T: Element>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let [b, h, w, c] = g.shape(x)[..] else {
        return Err(Error::invalid("upsample", g.shape(x), "expected (B, H, W, C)"));
    };
    let mut idx = Vec::with_capacity(b * 4 * h * w * c);
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let base = ((bi * h + y / 2) * w + xx / 2) * c;
                idx.extend((0..c).map(|ch| (base + ch) as u32));
            }
        }
    }
    g.gather(x, vec![b, 2 * h, 2 * w, c], Arc::new(idx))
}

/// Replicate-pad `(B, H, W, C)` on the bottom/right to `(B, H2, W2, C)`, or
/// crop when the target is smaller.
fn fit_spatial<T: Element>(g: &mut Graph<'_, T>, x: Var, h2: usize, w2: usize) -> Result<Var> {
    let [b, h, w, c] = g.shape(x)[..] else {
        return Err(Error::invalid("fit", g.shape(x), "expected (B, H, W, C)"));
    };
    if (h, w) == (h2, w2) {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(b * h2 * w2 * c);
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let base = ((bi * h + y.min(h - 1)) * w + xx.min(w - 1)) * c;
                idx.extend((0..c).map(|ch| (base + ch) as u32));
            }
        }
    }
    g.gather(x, vec![b, h2, w2, c], Arc::new(idx))
}

// ---------------------------------------------------------------------------
// Guidance sites

/// Which module a decoder-block guidance site hosts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Guidance {
    /// Module-free backbone.
    Plain,
    /// Zero-initialized 1x1 convolution adding the guidance.
    ZeroConv,
    Sfa,
    SfaTfa,
}

impl Guidance {
    pub fn as_str(self) -> &'static str {
        match self {
            Guidance::Plain => "plain",
            Guidance::ZeroConv => "zeroconv",
            Guidance::Sfa => "sfa",
            Guidance::SfaTfa => "sfa+tfa",
        }
    }
}

impl FromStr for Guidance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Guidance::Plain, Guidance::ZeroConv, Guidance::Sfa, Guidance::SfaTfa]
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown guidance kind {s:?}")))
    }
}

/// Network side a site lives on; selects its parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Unet,
    Vae,
}

impl Side {
    fn groups(self) -> (ParamGroup, ParamGroup, ParamGroup) {
        match self {
            Side::Unet => (ParamGroup::UnetSfa, ParamGroup::UnetTfa, ParamGroup::UnetAdapter),
            Side::Vae => (ParamGroup::VaeSfa, ParamGroup::VaeTfa, ParamGroup::VaeAdapter),
        }
    }

    fn backbone(self) -> ParamGroup {
        match self {
            Side::Unet => ParamGroup::UnetBackbone,
            Side::Vae => ParamGroup::VaeDecoder,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceSite {
    pub kind: Guidance,
    pub norm: NormMode,
    pub gate: ParamId,
    pub zero: Option<Conv>,
    pub sfa: Option<SfaParams>,
    pub tfa: Option<TfaParams>,
}

impl GuidanceSite {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        side: Side,
        kind: Guidance,
        channels: usize,
        guide_channels: usize,
        sfa: SfaConfig,
        tfa: TfaConfig,
        rng: &mut RngState,
    ) -> Self {
        let (g_sfa, g_tfa, g_ad) = side.groups();
        let gate = store.register(&format!("{prefix}.gate"), side.backbone(), &[channels], Init::Zeros, rng);
        let zero = (kind == Guidance::ZeroConv).then(|| Conv::register(store, &format!("{prefix}.zeroconv"), g_ad, 1, guide_channels, channels, 1, 0.0, rng));
        let sfa_p = matches!(kind, Guidance::Sfa | Guidance::SfaTfa).then(|| SfaParams::register(store, &format!("{prefix}.sfa"), g_sfa, channels, guide_channels, sfa, rng));
        let tfa_p = (kind == Guidance::SfaTfa).then(|| TfaParams::register(store, &format!("{prefix}.tfa"), g_tfa, channels, guide_channels, tfa, rng));
        GuidanceSite { kind, norm: sfa.norm, gate, zero, sfa: sfa_p, tfa: tfa_p }
    }

    /// Apply to a resblock output `r`. Without guidance the site falls back
    /// to the module-free form.
    pub fn apply<T: Element>(&self, g: &mut Graph<'_, T>, r: Var, guide: Option<Var>, frames: usize) -> Result<Var> {
        let n = g.norm(r, self.norm)?;
        let a = g.param(self.gate);
        let gated = g.scale_channels(n, a)?;
        let base = g.add(r, gated)?;
        let Some(gd) = guide.filter(|_| self.kind != Guidance::Plain) else {
            return Ok(base);
        };
        match self.kind {
            Guidance::Plain => unreachable!(),
            Guidance::ZeroConv => {
                let z = self.zero.as_ref().unwrap().apply(g, gd)?;
                g.add(base, z)
            }
            Guidance::Sfa | Guidance::SfaTfa => {
                let m = self.sfa.as_ref().unwrap().residual(g, n, gd)?;
                let f = g.add(base, m)?;
                match &self.tfa {
                    Some(t) => t.forward(g, f, gd, frames),
                    None => Ok(f),
                }
            }
        }
    }
}

fn check_guides<T: Element>(g: &Graph<'_, T>, guides: &[Var], expected: &[Vec<usize>]) -> Result<()> {
    if guides.len() != expected.len() {
        return Err(Error::arg("guidance", format!("{} guidance levels supplied, {} expected", guides.len(), expected.len())));
    }
    for (level, (&v, exp)) in guides.iter().zip(expected).enumerate() {
        if g.shape(v) != &exp[..] {
            return Err(Error::GuidanceShape { level, expected: exp.clone(), got: g.shape(v).to_vec() });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

/// Ablation variants: A uses zero-conv guidance on both sides, B adds SFA
/// to the UNet, C adds TFA to the UNet, D adds SFA+TFA to the VAE decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    /// `(UNet side, VAE side)`.
    pub fn guidance(self) -> (Guidance, Guidance) {
        match self {
            Variant::A => (Guidance::ZeroConv, Guidance::ZeroConv),
            Variant::B => (Guidance::Sfa, Guidance::ZeroConv),
            Variant::C => (Guidance::SfaTfa, Guidance::ZeroConv),
            Variant::D => (Guidance::SfaTfa, Guidance::SfaTfa),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected A, B, C or D)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpscalerConfig {
    pub channels: usize,
    /// Temporal attention blocks; 0 gives the plain pixel-shuffle upscaler.
    pub blocks: usize,
    pub heads: usize,
    /// Frames per attention group.
    pub group: usize,
    pub window: WindowSpec,
    pub ffn_mult: usize,
    pub factor: usize,
}

impl Default for UpscalerConfig {
    fn default() -> Self {
        UpscalerConfig { channels: 32, blocks: 2, heads: 4, group: 2, window: WindowSpec::default(), ffn_mult: 2, factor: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub unet_guidance: Guidance,
    pub vae_guidance: Guidance,
    pub sfa: SfaConfig,
    pub tfa: TfaConfig,
    pub upscaler: UpscalerConfig,
    pub latent_channels: usize,
    /// VAE widths at full, half and quarter resolution.
    pub vae_widths: [usize; 3],
    /// UNet widths at latent and half-latent resolution.
    pub unet_widths: [usize; 2],
    pub temb_dim: usize,
    pub refiner_hidden: usize,
    pub refiner_w: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_variant(Variant::D)
    }
}

impl ModelConfig {
    pub fn for_variant(v: Variant) -> Self {
        let (unet_guidance, vae_guidance) = v.guidance();
        ModelConfig {
            frames: 6,
            unet_guidance,
            vae_guidance,
            sfa: SfaConfig::default(),
            tfa: TfaConfig::default(),
            upscaler: UpscalerConfig::default(),
            latent_channels: 4,
            vae_widths: [16, 32, 64],
            unet_widths: [32, 64],
            temb_dim: 64,
            refiner_hidden: 16,
            refiner_w: 0.5,
        }
    }

    /// The model with every guidance site in module-free form.
    pub fn plain(&self) -> Self {
        ModelConfig { unet_guidance: Guidance::Plain, vae_guidance: Guidance::Plain, ..self.clone() }
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.guidance() == (self.unet_guidance, self.vae_guidance))
    }

    /// Spatial downsampling factor of the VAE.
    pub fn latent_factor(&self) -> usize {
        4
    }
}

// ---------------------------------------------------------------------------
// Video upscaler

#[derive(Clone, Debug)]
struct TemporalBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ffn1: Linear,
    ffn2: Linear,
    /// Frame offset of the grouping (alternates between blocks).
    shift: usize,
}

#[derive(Clone, Debug)]
pub struct Upscaler {
    pub config: UpscalerConfig,
    conv_in: Conv,
    blocks: Vec<TemporalBlock>,
    tail: Conv,
}

/// Frame map of grouping `frames` frames into `ceil(L/group)` groups of
/// `group` consecutive frames starting at `shift`, wrapping cyclically.
fn frame_groups(frames: usize, group: usize, shift: usize) -> Vec<usize> {
    let groups = frames.div_ceil(group);
    (0..groups * group).map(|i| (i + shift) % frames).collect()
}

impl Upscaler {
    fn register<T: Element>(store: &mut ParamStore<T>, config: &UpscalerConfig, rng: &mut RngState) -> Self {
        let g = ParamGroup::Upscaler;
        let c = config.channels;
        let conv_in = Conv::register(store, "upscaler.conv_in", g, 3, 3, c, 1, 1.0, rng);
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("upscaler.block{i}");
                TemporalBlock {
                    q: Linear::register(store, &format!("{p}.q"), g, c, c, 1.0, rng),
                    k: Linear::register(store, &format!("{p}.k"), g, c, c, 1.0, rng),
                    v: Linear::register(store, &format!("{p}.v"), g, c, c, 1.0, rng),
                    out: Linear::register(store, &format!("{p}.out"), g, c, c, 0.5, rng),
                    ffn1: Linear::register(store, &format!("{p}.ffn1"), g, c, c * config.ffn_mult, GELU_GAIN, rng),
                    ffn2: Linear::register(store, &format!("{p}.ffn2"), g, c * config.ffn_mult, c, 0.5, rng),
                    shift: i % 2,
                }
            })
            .collect();
        let r2 = config.factor * config.factor;
        let tail = Conv::register(store, "upscaler.tail", g, 3, c, 3 * r2, 1, 0.1, rng);
        Upscaler { config: config.clone(), conv_in, blocks, tail }
    }

    fn temporal_block<T: Element>(&self, g: &mut Graph<'_, T>, b: &TemporalBlock, x: Var, frames: usize) -> Result<Var> {
        let [n, h, w, c] = g.shape(x)[..] else { unreachable!() };
        let clips = n / frames;
        let group = self.config.group.min(frames).max(1);
        let order = frame_groups(frames, group, b.shift % frames);
        let seq = order.len();
        // regrouped frame sequence -> source frame
        let src_frame: Vec<usize> = (0..clips).flat_map(|cl| order.iter().map(move |&f| cl * frames + f)).collect();
        let spec = self.config.window.clamped(h, w);
        let layout = TubeletLayout::new(clips * seq / group, group, h, w, c, spec)?;
        let fsize = h * w * c;
        let part: Vec<u32> = layout
            .partition_index()
            .into_iter()
            .map(|i| {
                let (f, off) = (i as usize / fsize, i as usize % fsize);
                (src_frame[f] * fsize + off) as u32
            })
            .collect();
        // first occurrence of each source frame in the regrouped sequence
        let mut first = vec![usize::MAX; n];
        for (k, &f) in src_frame.iter().enumerate() {
            if first[f] == usize::MAX {
                first[f] = k;
            }
        }
        let merge_all = layout.merge_index();
        let merge: Vec<u32> = (0..n * fsize).map(|e| merge_all[first[e / fsize] * fsize + e % fsize]).collect();

        let tok = g.gather(x, layout.tubelet_shape(), Arc::new(part))?;
        let q = b.q.apply(g, tok)?;
        let k = b.k.apply(g, tok)?;
        let v = b.v.apply(g, tok)?;
        let a = g.attention(q, k, v, self.config.heads)?;
        let a = b.out.apply(g, a)?;
        let a = g.gather(a, vec![n, h, w, c], Arc::new(merge))?;
        let y = g.add(x, a)?;
        let f1 = b.ffn1.apply(g, y)?;
        let f1 = g.gelu(f1);
        let f2 = b.ffn2.apply(g, f1)?;
        g.add(y, f2)
    }

    /// `X_u` from `X_L (clips*L, h, w, 3)`. The bicubic skip path is computed
    /// from the value of `x_l` and carries no gradient.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x_l: Var, frames: usize) -> Result<Var> {
        let s = g.shape(x_l).to_vec();
        let [n, h, w, 3] = s[..] else {
            return Err(Error::invalid("upscale", &s, "expected (frames, H, W, 3)"));
        };
        if n % frames != 0 {
            return Err(Error::invalid("upscale", &s, format!("frame axis is not a multiple of L = {frames}")));
        }
        let r = self.config.factor;
        let mut f = self.conv_in.apply(g, x_l)?;
        for b in &self.blocks {
            f = self.temporal_block(g, b, f, frames)?;
        }
        let t = self.tail.apply(g, f)?;
        let (shape, idx) = pixel_shuffle_index(g.shape(t), r)?;
        let up = g.gather(t, shape, Arc::new(idx))?;
        let base = bicubic_up(&g.value(x_l).cast::<f32>(), r)?.cast::<T>();
        let base = g.constant(base);
        debug_assert_eq!(g.shape(base), &[n, h * r, w * r, 3]);
        g.add(base, up)
    }
}

// ---------------------------------------------------------------------------
// VAE

#[derive(Clone, Debug)]
pub struct Vae {
    enc_in: Conv,
    enc_res: [ResBlock; 3],
    enc_down: [Conv; 2],
    enc_out: Conv,
    dec_in: Conv,
    dec_res: [ResBlock; 3],
    dec_up: [Conv; 2],
    pub dec_sites: [GuidanceSite; 3],
    dec_out: Conv,
    widths: [usize; 3],
    latent_channels: usize,
}

/// Encoder outputs: the latent and the skip features in decoder order
/// (quarter, half, full resolution).
pub struct Encoded {
    pub z: Var,
    pub skips: Vec<Var>,
}

impl Vae {
    fn register<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngState, module_rng: &mut RngState) -> Self {
        let (ge, gd) = (ParamGroup::VaeEncoder, ParamGroup::VaeDecoder);
        let [c0, c1, c2] = cfg.vae_widths;
        let cz = cfg.latent_channels;
        let enc_in = Conv::register(store, "vae.enc.in", ge, 3, 3, c0, 1, 1.0, rng);
        let enc_res = [c0, c1, c2].map(|c| ResBlock::register(store, &format!("vae.enc.res{c}"), ge, c, c, None, rng));
        let enc_down = [Conv::register(store, "vae.enc.down0", ge, 3, c0, c1, 2, 1.0, rng), Conv::register(store, "vae.enc.down1", ge, 3, c1, c2, 2, 1.0, rng)];
        let enc_out = Conv::register(store, "vae.enc.out", ge, 3, c2, cz, 1, 1.0, rng);
        let dec_in = Conv::register(store, "vae.dec.in", gd, 3, cz, c2, 1, 1.0, rng);
        let dec_res = [c2, c1, c0].map(|c| ResBlock::register(store, &format!("vae.dec.res{c}"), gd, c, c, None, rng));
        let dec_up = [Conv::register(store, "vae.dec.up0", gd, 3, c2, c1, 1, 1.0, rng), Conv::register(store, "vae.dec.up1", gd, 3, c1, c0, 1, 1.0, rng)];
        let dec_out = Conv::register(store, "vae.dec.out", gd, 3, c0, 3, 1, 1.0, rng);
        let dec_sites =
            [(0, c2), (1, c1), (2, c0)].map(|(i, c)| GuidanceSite::register(store, &format!("vae.dec.site{i}"), Side::Vae, cfg.vae_guidance, c, c, cfg.sfa, cfg.tfa, module_rng));
        Vae { enc_in, enc_res, enc_down, enc_out, dec_in, dec_res, dec_up, dec_sites, dec_out, widths: cfg.vae_widths, latent_channels: cz }
    }

    /// Encode `(B, H, W, 3)`; sizes that are not a multiple of 4 are
    /// replicate-padded first.
    pub fn encode<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Encoded> {
        let s = g.shape(x).to_vec();
        let [_, h, w, 3] = s[..] else {
            return Err(Error::invalid("vae_encode", &s, "expected (frames, H, W, 3)"));
        };
        let x = fit_spatial(g, x, h.next_multiple_of(4), w.next_multiple_of(4))?;
        let mut skips = Vec::with_capacity(3);
        let a = self.enc_in.apply(g, x)?;
        let f0 = self.enc_res[0].apply(g, a, None)?;
        skips.push(f0);
        let d = self.enc_down[0].apply(g, f0)?;
        let d = g.gelu(d);
        let f1 = self.enc_res[1].apply(g, d, None)?;
        skips.push(f1);
        let d = self.enc_down[1].apply(g, f1)?;
        let d = g.gelu(d);
        let f2 = self.enc_res[2].apply(g, d, None)?;
        skips.push(f2);
        let a = g.gelu(f2);
        let z = self.enc_out.apply(g, a)?;
        skips.reverse();
        Ok(Encoded { z, skips })
    }

    /// Shapes the decoder expects for its guidance levels given a latent.
    pub fn guide_shapes(&self, z_shape: &[usize]) -> Vec<Vec<usize>> {
        let (n, h, w) = (z_shape[0], z_shape[1], z_shape[2]);
        let [c0, c1, c2] = self.widths;
        vec![vec![n, h, w, c2], vec![n, 2 * h, 2 * w, c1], vec![n, 4 * h, 4 * w, c0]]
    }

    /// Decode a latent `(B, h, w, Cz)` to `(B, 4h, 4w, 3)`.
    pub fn decode<T: Element>(&self, g: &mut Graph<'_, T>, z: Var, guides: Option<&[Var]>, frames: usize) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 4 || zs[3] != self.latent_channels {
            return Err(Error::invalid("vae_decode", &zs, format!("expected (frames, h, w, {})", self.latent_channels)));
        }
        if let Some(gs) = guides {
            check_guides(g, gs, &self.guide_shapes(&zs))?;
        }
        let guide = |i: usize| guides.map(|gs| gs[i]);
        let mut h = self.dec_in.apply(g, z)?;
        for i in 0..3 {
            if i > 0 {
                let u = upsample2(g, h)?;
                h = self.dec_up[i - 1].apply(g, u)?;
            }
            let r = self.dec_res[i].apply(g, h, None)?;
            h = self.dec_sites[i].apply(g, r, guide(i), frames)?;
        }
        let a = g.gelu(h);
        self.dec_out.apply(g, a)
    }
}

// ---------------------------------------------------------------------------
// Latent encoder

#[derive(Clone, Debug)]
pub struct LatentEncoder {
    c_in: Conv,
    c_lvl1: Conv,
    c_down: Conv,
    c_lvl0: Conv,
}

impl LatentEncoder {
    fn register<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let g = ParamGroup::LatentEncoder;
        let [u0, u1] = cfg.unet_widths;
        LatentEncoder {
            c_in: Conv::register(store, "latent_enc.in", g, 3, cfg.latent_channels, u0, 1, GELU_GAIN, rng),
            c_lvl1: Conv::register(store, "latent_enc.level1", g, 3, u0, u0, 1, 1.0, rng),
            c_down: Conv::register(store, "latent_enc.down", g, 3, u0, u1, 2, GELU_GAIN, rng),
            c_lvl0: Conv::register(store, "latent_enc.level0", g, 3, u1, u1, 1, 1.0, rng),
        }
    }

    /// Guidance maps in UNet decoder order: half-latent, then latent
    /// resolution.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Vec<Var>> {
        let a = self.c_in.apply(g, z)?;
        let a = g.gelu(a);
        let lvl1 = self.c_lvl1.apply(g, a)?;
        let d = self.c_down.apply(g, a)?;
        let d = g.gelu(d);
        let lvl0 = self.c_lvl0.apply(g, d)?;
        Ok(vec![lvl0, lvl1])
    }
}

// ---------------------------------------------------------------------------
// UNet

#[derive(Clone, Debug)]
pub struct Unet {
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv,
    enc1: ResBlock,
    down: Conv,
    enc2: ResBlock,
    mid: ResBlock,
    dec0: ResBlock,
    up: Conv,
    dec1: ResBlock,
    pub sites: [GuidanceSite; 2],
    conv_out: Conv,
    temb_dim: usize,
    widths: [usize; 2],
    latent_channels: usize,
}

/// Sinusoidal embedding of `t` with `dim` components (sines then cosines).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = (t as f64 * freq).sin();
        e[half + i] = (t as f64 * freq).cos();
    }
    e
}

impl Unet {
    fn register<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngState, module_rng: &mut RngState) -> Self {
        let g = ParamGroup::UnetBackbone;
        let [u0, u1] = cfg.unet_widths;
        let d = cfg.temb_dim;
        let td = 2 * d;
        let cz = cfg.latent_channels;
        let sites = [(0, u1), (1, u0)].map(|(i, c)| GuidanceSite::register(store, &format!("unet.site{i}"), Side::Unet, cfg.unet_guidance, c, c, cfg.sfa, cfg.tfa, module_rng));
        Unet {
            temb1: Linear::register(store, "unet.temb1", g, d, td, GELU_GAIN, rng),
            temb2: Linear::register(store, "unet.temb2", g, td, td, 1.0, rng),
            conv_in: Conv::register(store, "unet.conv_in", g, 3, cz, u0, 1, 1.0, rng),
            enc1: ResBlock::register(store, "unet.enc1", g, u0, u0, Some(td), rng),
            down: Conv::register(store, "unet.down", g, 3, u0, u1, 2, 1.0, rng),
            enc2: ResBlock::register(store, "unet.enc2", g, u1, u1, Some(td), rng),
            mid: ResBlock::register(store, "unet.mid", g, u1, u1, Some(td), rng),
            dec0: ResBlock::register(store, "unet.dec0", g, 2 * u1, u1, Some(td), rng),
            up: Conv::register(store, "unet.up", g, 3, u1, u0, 1, 1.0, rng),
            dec1: ResBlock::register(store, "unet.dec1", g, 2 * u0, u0, Some(td), rng),
            sites,
            conv_out: Conv::register(store, "unet.conv_out", g, 3, u0, cz, 1, 0.1, rng),
            temb_dim: d,
            widths: cfg.unet_widths,
            latent_channels: cz,
        }
    }

    /// Guidance shapes for a latent of shape `z_shape`, in decoder order.
    pub fn guide_shapes(&self, z_shape: &[usize]) -> Vec<Vec<usize>> {
        let (n, h, w) = (z_shape[0], z_shape[1], z_shape[2]);
        let [u0, u1] = self.widths;
        vec![vec![n, h.div_ceil(2), w.div_ceil(2), u1], vec![n, h, w, u0]]
    }

    /// Timestep embedding `(ts.len(), 2 * temb_dim)` fed to every resblock.
    pub fn embed<T: Element>(&self, g: &mut Graph<'_, T>, ts: &[usize]) -> Result<Var> {
        let d = self.temb_dim;
        let data: Vec<T> = ts.iter().flat_map(|&t| timestep_embedding(t, d)).map(T::of).collect();
        let e = g.constant(Tensor::new(&[ts.len(), d], data)?);
        let h = self.temb1.apply(g, e)?;
        let h = g.gelu(h);
        self.temb2.apply(g, h)
    }

    /// Decoder block `level` (0 at half-latent resolution): resblock on the
    /// skip-concatenated input, then the guidance site.
    pub fn decoder_block<T: Element>(&self, g: &mut Graph<'_, T>, level: usize, x: Var, temb: Var, guide: Option<Var>, frames: usize) -> Result<Var> {
        let res = match level {
            0 => &self.dec0,
            1 => &self.dec1,
            _ => return Err(Error::arg("unet decoder block", format!("level {level} out of range 0..2"))),
        };
        let r = res.apply(g, x, Some(temb))?;
        self.sites[level].apply(g, r, guide, frames)
    }

    /// Predict the noise in `z_t (clips*L, h, w, Cz)`; `ts[i]` is the
    /// timestep of clip `i`, each in `1..=max_t`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, z_t: Var, ts: &[usize], max_t: usize, guides: Option<&[Var]>, frames: usize) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 || zs[3] != self.latent_channels {
            return Err(Error::invalid("unet", &zs, format!("expected (frames, h, w, {})", self.latent_channels)));
        }
        if ts.is_empty() || zs[0] != ts.len() * frames {
            return Err(Error::arg("unet", format!("{} timesteps for {} frames of {frames}-frame clips", ts.len(), zs[0])));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > max_t) {
            return Err(Error::TimestepOutOfRange { t, max: max_t });
        }
        if let Some(gs) = guides {
            check_guides(g, gs, &self.guide_shapes(&zs))?;
        }
        let guide = |i: usize| guides.map(|gs| gs[i]);
        let temb = self.embed(g, ts)?;
        let h0 = self.conv_in.apply(g, z_t)?;
        let e1 = self.enc1.apply(g, h0, Some(temb))?;
        let d = self.down.apply(g, e1)?;
        let e2 = self.enc2.apply(g, d, Some(temb))?;
        let m = self.mid.apply(g, e2, Some(temb))?;
        let c0 = g.concat_channels(m, e2)?;
        let s0 = self.decoder_block(g, 0, c0, temb, guide(0), frames)?;
        let u = upsample2(g, s0)?;
        let u = fit_spatial(g, u, zs[1], zs[2])?;
        let u = self.up.apply(g, u)?;
        let c1 = g.concat_channels(u, e1)?;
        let s1 = self.decoder_block(g, 1, c1, temb, guide(1), frames)?;
        let a = g.gelu(s1);
        self.conv_out.apply(g, a)
    }
}

// ---------------------------------------------------------------------------
// Refiner

#[derive(Clone, Debug)]
pub struct Refiner {
    conv1: Conv,
    conv2: Conv,
    pub w: f64,
}

impl Refiner {
    fn register<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let g = ParamGroup::Refiner;
        Refiner {
            conv1: Conv::register(store, "refiner.conv1", g, 3, 6, cfg.refiner_hidden, 1, GELU_GAIN, rng),
            conv2: Conv::register(store, "refiner.conv2", g, 3, cfg.refiner_hidden, 3, 1, 0.0, rng),
            w: cfg.refiner_w,
        }
    }

    /// `w * x_u + (1 - w) * x_d + ResBlock([x_u, x_d])`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x_u: Var, x_d: Var) -> Result<Var> {
        if g.shape(x_u) != g.shape(x_d) {
            return Err(Error::shape("refine", g.shape(x_u), g.shape(x_d)));
        }
        let cat = g.concat_channels(x_u, x_d)?;
        let h = self.conv1.apply(g, cat)?;
        let h = g.gelu(h);
        let res = self.conv2.apply(g, h)?;
        let a = g.scale(x_u, self.w);
        let b = g.scale(x_d, 1.0 - self.w);
        let mix = g.add(a, b)?;
        g.add(mix, res)
    }
}

// ---------------------------------------------------------------------------
// Full model

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub upscaler: Upscaler,
    pub vae: Vae,
    pub latent_encoder: LatentEncoder,
    pub unet: Unet,
    pub refiner: Refiner,
}

impl Model {
    /// Register every parameter. Backbone initialization depends only on
    /// `seed`, not on the guidance variant.
    pub fn build<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        if config.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        let tfa = &config.tfa;
        for c in config.vae_widths.iter().chain(&config.unet_widths) {
            if config.needs_tfa() && c % tfa.heads != 0 {
                return Err(Error::Config(format!("{} TFA heads do not divide width {c}", tfa.heads)));
            }
        }
        if !config.upscaler.channels.is_multiple_of(config.upscaler.heads) {
            return Err(Error::Config("upscaler heads must divide its width".into()));
        }
        if !(0.0..=1.0).contains(&config.refiner_w) {
            return Err(Error::Config(format!("refiner w = {} outside [0, 1]", config.refiner_w)));
        }
        let mut root = RngState::new(seed);
        let mut streams: Vec<RngState> = (0..7).map(|_| root.fork()).collect();
        let [up, vae, venc_mod, lat, unet, unet_mod, refine]: &mut [RngState; 7] = (&mut streams[..]).try_into().unwrap();
        Ok(Model {
            config: config.clone(),
            upscaler: Upscaler::register(store, &config.upscaler, up),
            vae: Vae::register(store, config, vae, venc_mod),
            latent_encoder: LatentEncoder::register(store, config, lat),
            unet: Unet::register(store, config, unet, unet_mod),
            refiner: Refiner::register(store, config, refine),
        })
    }
}

impl ModelConfig {
    /// Flat `key value` form used in checkpoint manifests.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let norm = |n: NormMode| match n {
            NormMode::PerChannel => "per_channel",
            NormMode::PerMap => "per_map",
        };
        let u = &self.upscaler;
        [
            ("frames", self.frames.to_string()),
            ("unet_guidance", self.unet_guidance.as_str().into()),
            ("vae_guidance", self.vae_guidance.as_str().into()),
            ("sfa.kernel", self.sfa.kernel.to_string()),
            ("sfa.norm", norm(self.sfa.norm).into()),
            ("tfa.heads", self.tfa.heads.to_string()),
            ("tfa.window", format!("{}x{}", self.tfa.window.h, self.tfa.window.w)),
            ("tfa.residual", self.tfa.residual.to_string()),
            ("tfa.out_proj", self.tfa.out_proj.to_string()),
            ("upscaler.channels", u.channels.to_string()),
            ("upscaler.blocks", u.blocks.to_string()),
            ("upscaler.heads", u.heads.to_string()),
            ("upscaler.group", u.group.to_string()),
            ("upscaler.window", format!("{}x{}", u.window.h, u.window.w)),
            ("upscaler.ffn_mult", u.ffn_mult.to_string()),
            ("upscaler.factor", u.factor.to_string()),
            ("latent_channels", self.latent_channels.to_string()),
            ("vae_widths", self.vae_widths.map(|w| w.to_string()).join(",")),
            ("unet_widths", self.unet_widths.map(|w| w.to_string()).join(",")),
            ("temb_dim", self.temb_dim.to_string()),
            ("refiner_hidden", self.refiner_hidden.to_string()),
            ("refiner_w", format!("{:?}", self.refiner_w)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Inverse of [`ModelConfig::to_pairs`]; absent keys keep their defaults.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        let bad = |k: &str, v: &str| Error::Config(format!("invalid value {v:?} for model key {k:?}"));
        for (k, v) in pairs {
            let num = || v.parse::<usize>().map_err(|_| bad(k, v));
            let flag = || v.parse::<bool>().map_err(|_| bad(k, v));
            let window = || -> Result<WindowSpec> {
                let (h, w) = v.split_once('x').ok_or_else(|| bad(k, v))?;
                WindowSpec::new(h.parse().map_err(|_| bad(k, v))?, w.parse().map_err(|_| bad(k, v))?)
            };
            let widths = || -> Result<Vec<usize>> { v.split(',').map(|p| p.parse().map_err(|_| bad(k, v))).collect() };
            match k {
                "frames" => c.frames = num()?,
                "unet_guidance" => c.unet_guidance = v.parse()?,
                "vae_guidance" => c.vae_guidance = v.parse()?,
                "sfa.kernel" => c.sfa.kernel = num()?,
                "sfa.norm" => {
                    c.sfa.norm = match v {
                        "per_channel" => NormMode::PerChannel,
                        "per_map" => NormMode::PerMap,
                        _ => return Err(bad(k, v)),
                    }
                }
                "tfa.heads" => c.tfa.heads = num()?,
                "tfa.window" => c.tfa.window = window()?,
                "tfa.residual" => c.tfa.residual = flag()?,
                "tfa.out_proj" => c.tfa.out_proj = flag()?,
                "upscaler.channels" => c.upscaler.channels = num()?,
                "upscaler.blocks" => c.upscaler.blocks = num()?,
                "upscaler.heads" => c.upscaler.heads = num()?,
                "upscaler.group" => c.upscaler.group = num()?,
                "upscaler.window" => c.upscaler.window = window()?,
                "upscaler.ffn_mult" => c.upscaler.ffn_mult = num()?,
                "upscaler.factor" => c.upscaler.factor = num()?,
                "latent_channels" => c.latent_channels = num()?,
                "vae_widths" => c.vae_widths = widths()?.try_into().map_err(|_| bad(k, v))?,
                "unet_widths" => c.unet_widths = widths()?.try_into().map_err(|_| bad(k, v))?,
                "temb_dim" => c.temb_dim = num()?,
                "refiner_hidden" => c.refiner_hidden = num()?,
                "refiner_w" => c.refiner_w = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(Error::Config(format!("unknown model key {k:?}"))),
            }
        }
        Ok(c)
    }

    fn needs_tfa(&self) -> bool {
        self.unet_guidance == Guidance::SfaTfa || self.vae_guidance == Guidance::SfaTfa
    }
}

// ---------------------------------------------------------------------------
// Single-clip tensor API

fn run<T: Element, R>(store: &ParamStore<T>, f: impl FnOnce(&mut Graph<'_, T>) -> Result<R>) -> Result<R> {
    let mut g = Graph::new(store);
    f(&mut g)
}

/// `X_u` for one `(L, H, W, 3)` clip.
pub fn upscale<T: Element>(model: &Model, store: &ParamStore<T>, x_l: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, ..) = x_l.dims4()?;
    run(store, |g| {
        let x = g.constant(x_l.clone());
        let y = model.upscaler.forward(g, x, l)?;
        Ok(g.value(y).clone())
    })
}

/// Latent and decoder-order skip features of one clip.
pub fn vae_encode<T: Element>(model: &Model, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    run(store, |g| {
        let xv = g.constant(x.clone());
        let e = model.vae.encode(g, xv)?;
        Ok((g.value(e.z).clone(), e.skips.iter().map(|&s| g.value(s).clone()).collect()))
    })
}

pub fn vae_decode<T: Element>(model: &Model, store: &ParamStore<T>, z: &Tensor<T>, guides: Option<&[Tensor<T>]>) -> Result<Tensor<T>> {
    let (l, ..) = z.dims4()?;
    run(store, |g| {
        let zv = g.constant(z.clone());
        let gv: Option<Vec<Var>> = guides.map(|gs| gs.iter().map(|t| g.constant(t.clone())).collect());
        let y = model.vae.decode(g, zv, gv.as_deref(), l)?;
        Ok(g.value(y).clone())
    })
}

pub fn latent_encode<T: Element>(model: &Model, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    run(store, |g| {
        let zv = g.constant(z.clone());
        let gs = model.latent_encoder.forward(g, zv)?;
        Ok(gs.iter().map(|&v| g.value(v).clone()).collect())
    })
}

pub fn unet_eps<T: Element>(model: &Model, store: &ParamStore<T>, z_t: &Tensor<T>, t: usize, max_t: usize, guides: Option<&[Tensor<T>]>) -> Result<Tensor<T>> {
    let (l, ..) = z_t.dims4()?;
    run(store, |g| {
        let zv = g.constant(z_t.clone());
        let gv: Option<Vec<Var>> = guides.map(|gs| gs.iter().map(|t| g.constant(t.clone())).collect());
        let y = model.unet.forward(g, zv, &[t], max_t, gv.as_deref(), l)?;
        Ok(g.value(y).clone())
    })
}

pub fn refine<T: Element>(model: &Model, store: &ParamStore<T>, x_d: &Tensor<T>, x_u: &Tensor<T>) -> Result<Tensor<T>> {
    run(store, |g| {
        let d = g.constant(x_d.clone());
        let u = g.constant(x_u.clone());
        let y = model.refiner.forward(g, u, d)?;
        Ok(g.value(y).clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.frames = 2;
        c
    }

    #[test]
    fn config_pairs_roundtrip() {
        let mut c = ModelConfig::for_variant(Variant::B);
        c.refiner_w = 0.3;
        c.upscaler.blocks = 0;
        c.tfa.window = WindowSpec::new(4, 2).unwrap();
        let pairs = c.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::from_pairs([("frames", "x")]).is_err());
        assert!(ModelConfig::from_pairs([("depth", "3")]).is_err());
    }

    #[test]
    fn frame_groups_wrap_cyclically() {
        assert_eq!(frame_groups(6, 2, 0), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(frame_groups(6, 2, 1), vec![1, 2, 3, 4, 5, 0]);
        assert_eq!(frame_groups(3, 2, 0), vec![0, 1, 2, 0]);
    }

    #[test]
    fn upscaler_multiplies_spatial_size() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let m = Model::build(&cfg, &mut store, 1).unwrap();
        let mut rng = RngState::new(0);
        let x = Tensor::rand_uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut rng);
        let y = upscale(&m, &store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 32, 32, 3]);
    }

    #[test]
    fn timestep_embedding_starts_with_sin_zero_cos_one() {
        let e = timestep_embedding(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn refiner_mixes_inputs_at_init() {
        let mut cfg = small();
        let mut rng = RngState::new(4);
        let xu = Tensor::<f64>::rand_uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut rng);
        let xd = Tensor::<f64>::rand_uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut rng);
        for w in [0.0, 0.5, 1.0] {
            cfg.refiner_w = w;
            let mut store = ParamStore::<f64>::new();
            let m = Model::build(&cfg, &mut store, 1).unwrap();
            let y = refine(&m, &store, &xd, &xu).unwrap();
            let expect = xu.zip_map(&xd, |a, b| w * a + (1.0 - w) * b).unwrap();
            assert!(y.max_abs_diff(&expect) < 1e-15);
        }
        cfg.refiner_w = 1.5;
        assert!(Model::build(&cfg, &mut ParamStore::<f32>::new(), 1).is_err());
    }

    #[test]
    fn unet_rejects_timestep_out_of_range() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let m = Model::build(&cfg, &mut store, 1).unwrap();
        let z = Tensor::zeros(&[2, 8, 8, 4]);
        assert!(matches!(unet_eps(&m, &store, &z, 0, 1000, None), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(unet_eps(&m, &store, &z, 1001, 1000, None), Err(Error::TimestepOutOfRange { .. })));
        assert!(unet_eps(&m, &store, &z, 1000, 1000, None).is_ok());
    }
}

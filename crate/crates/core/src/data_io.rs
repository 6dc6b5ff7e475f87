//! Synthetic clips, bicubic resampling, the SVT tensor file and the
//! checkpoint archive.
//!
//! SVT layout: the 4 magic bytes `SVT1`, then `L, H, W, C` as little-endian
//! `u32`, then `L*H*W*C` little-endian `f32` values in row-major order.
//!
//! A checkpoint archive is a text manifest followed by concatenated SVT
//! payloads:
//!
//! ```text
//! SATECO-CKPT 1
//! meta <key> <value>
//! tensor <kind> <name> <group> <frozen 0|1> <d0,d1,..> <offset> <bytes>
//! END
//! <payload bytes>
//! ```
//!
//! Offsets count from the first payload byte. Tensors of rank below 4 are
//! stored as SVT with leading unit axes; the manifest keeps the true shape.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Tensor, VideoTensor};

pub const SVT_MAGIC: [u8; 4] = *b"SVT1";
pub const SVT_HEADER_BYTES: usize = 20;

/// Payload size in bytes declared by an `(L, H, W, C)` header.
pub fn svt_payload_bytes(shape: [u32; 4]) -> usize {
    4 * shape.iter().map(|&d| d as usize).product::<usize>()
}

pub fn encode_svt(x: &VideoTensor) -> Result<Vec<u8>> {
    let (l, h, w, c) = x.dims4()?;
    let mut out = Vec::with_capacity(SVT_HEADER_BYTES + 4 * x.len());
    out.extend_from_slice(&SVT_MAGIC);
    for d in [l, h, w, c] {
        let d = u32::try_from(d).map_err(|_| Error::invalid("svt", x.shape(), "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse the header, returning the `(L, H, W, C)` dims.
pub fn decode_svt_header(bytes: &[u8]) -> Result<[u32; 4]> {
    if bytes.len() < 4 {
        return Err(Error::HeaderShort { got: bytes.len() });
    }
    if bytes[..4] != SVT_MAGIC {
        return Err(Error::BadMagic { found: bytes[..4].try_into().unwrap() });
    }
    if bytes.len() < SVT_HEADER_BYTES {
        return Err(Error::HeaderShort { got: bytes.len() });
    }
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    }
    Ok(dims)
}

pub fn decode_svt(bytes: &[u8]) -> Result<VideoTensor> {
    let dims = decode_svt_header(bytes)?;
    let expected = svt_payload_bytes(dims);
    let got = bytes.len() - SVT_HEADER_BYTES;
    if got < expected {
        return Err(Error::PayloadShort { expected, got });
    }
    if got > expected {
        return Err(Error::PayloadLong { expected, got });
    }
    let data = bytes[SVT_HEADER_BYTES..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Tensor::new(&shape, data)
}

pub fn write_svt(path: impl AsRef<Path>, x: &VideoTensor) -> Result<()> {
    fs::write(path, encode_svt(x)?)?;
    Ok(())
}

pub fn read_svt(path: impl AsRef<Path>) -> Result<VideoTensor> {
    decode_svt(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Bicubic resampling

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(source indices, normalized weights)` for
/// resampling an axis of length `n_in` to `n_out` with half-pixel centers,
/// replicated edges, and a kernel stretched by `n_in / n_out` when shrinking.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..=hi {
                let wgt = cubic((center - j as f64) / stretch);
                if wgt != 0.0 {
                    idx.push(j.clamp(0, n_in as isize - 1) as usize);
                    wts.push(wgt);
                }
            }
            let s: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= s);
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resize of every frame of an `(L, H, W, C)` video.
pub fn bicubic_resize(x: &VideoTensor, out_h: usize, out_w: usize) -> Result<VideoTensor> {
    let (l, h, w, c) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("bicubic", "output size must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let taps_w = resample_taps(w, out_w);
    let taps_h = resample_taps(h, out_h);
    let mut out = vec![0f32; l * out_h * out_w * c];
    let mut rows = vec![0f64; h * out_w * c];
    for f in 0..l {
        let src = &x.data()[f * h * w * c..(f + 1) * h * w * c];
        for y in 0..h {
            for (ox, (idx, wts)) in taps_w.iter().enumerate() {
                for ch in 0..c {
                    rows[(y * out_w + ox) * c + ch] = idx.iter().zip(wts).map(|(&j, &wt)| wt * src[(y * w + j) * c + ch] as f64).sum();
                }
            }
        }
        let dst = &mut out[f * out_h * out_w * c..(f + 1) * out_h * out_w * c];
        for (oy, (idx, wts)) in taps_h.iter().enumerate() {
            for ox in 0..out_w {
                for ch in 0..c {
                    let v: f64 = idx.iter().zip(wts).map(|(&j, &wt)| wt * rows[(j * out_w + ox) * c + ch]).sum();
                    dst[(oy * out_w + ox) * c + ch] = v as f32;
                }
            }
        }
    }
    Tensor::new(&[l, out_h, out_w, c], out)
}

/// Antialiased bicubic downsampling by an integer factor.
pub fn bicubic_down(x: &VideoTensor, factor: usize) -> Result<VideoTensor> {
    let (_, h, w, _) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid("bicubic_down", x.shape(), format!("spatial size not divisible by factor {factor}")));
    }
    bicubic_resize(x, h / factor, w / factor)
}

/// Bicubic upsampling by an integer factor (the interpolation baseline).
pub fn bicubic_up(x: &VideoTensor, factor: usize) -> Result<VideoTensor> {
    let (_, h, w, _) = x.dims4()?;
    if factor == 0 {
        return Err(Error::arg("bicubic_up", "factor must be positive"));
    }
    bicubic_resize(x, h * factor, w * factor)
}

// ---------------------------------------------------------------------------
// Synthetic clips

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    TranslatingTexture,
    RotatingGradient,
    BouncingShapes,
}

impl Motion {
    pub const ALL: [Motion; 3] = [Motion::TranslatingTexture, Motion::RotatingGradient, Motion::BouncingShapes];

    pub fn as_str(self) -> &'static str {
        match self {
            Motion::TranslatingTexture => "translate",
            Motion::RotatingGradient => "rotate",
            Motion::BouncingShapes => "bounce",
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Motion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Motion::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown motion model {s:?} (expected translate, rotate or bounce)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion: Motion,
    /// Speed range in pixels per frame.
    pub velocity: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, frames: 6, height: 32, width: 32, motion: Motion::TranslatingTexture, velocity: (0.25, 1.0) }
    }
}

/// One periodic sinusoid `amp * sin(2pi (kx x / W + ky y / H) + phase)`.
#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    amp: [f64; 3],
    phase: f64,
}

/// Random texture that tiles the frame exactly. Frequencies stay at or
/// below a quarter cycle per pixel with a 1/f amplitude falloff.
fn periodic_waves(rng: &mut RngState, h: usize, w: usize, count: usize, budget: f64) -> Vec<Wave> {
    let (kx_max, ky_max) = ((w / 4).max(1), (h / 4).max(1));
    let mut waves = Vec::with_capacity(count);
    for _ in 0..count {
        let kx = rng.int_inclusive(0, kx_max) as f64 * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let ky = rng.int_inclusive(if kx == 0.0 { 1 } else { 0 }, ky_max) as f64;
        let f = ((kx / w as f64).powi(2) + (ky / h as f64).powi(2)).sqrt();
        let base = 1.0 / (1.0 + 12.0 * f);
        let amp = [0, 1, 2].map(|_| base * rng.uniform_range(0.3, 1.0));
        waves.push(Wave { kx, ky, amp, phase: rng.uniform_range(0.0, 2.0 * PI) });
    }
    let total: f64 = waves.iter().map(|wv| wv.amp.iter().cloned().fold(0.0, f64::max)).sum();
    let norm = budget / total.max(1e-12);
    for wv in &mut waves {
        wv.amp.iter_mut().for_each(|a| *a *= norm);
    }
    waves
}

fn eval_waves(waves: &[Wave], x: f64, y: f64, h: usize, w: usize, ch: usize) -> f64 {
    waves.iter().map(|wv| wv.amp[ch] * (2.0 * PI * (wv.kx * x / w as f64 + wv.ky * y / h as f64) + wv.phase).sin()).sum()
}

fn smoothstep_edge(d: f64) -> f64 {
    // d: signed distance in pixels, negative inside
    1.0 / (1.0 + (d * 2.5).exp())
}

fn translation_draws(rng: &mut RngState, h: usize, w: usize, (vlo, vhi): (f64, f64)) -> (Vec<Wave>, (f64, f64)) {
    let waves = periodic_waves(rng, h, w, 10, 0.48);
    let speed = rng.uniform_range(vlo, vhi);
    let angle = rng.uniform_range(0.0, 2.0 * PI);
    (waves, (speed * angle.cos(), speed * angle.sin()))
}

/// Per-frame `(dx, dy)` displacement of a translating-texture clip, or
/// `None` for other motion models.
pub fn translation_velocity(cfg: &SynthConfig) -> Option<(f64, f64)> {
    (cfg.motion == Motion::TranslatingTexture).then(|| translation_draws(&mut RngState::new(cfg.seed), cfg.height, cfg.width, cfg.velocity).1)
}

/// Generate one `(L, H, W, 3)` clip with values in `[0, 1]`.
pub fn synth_clip(cfg: &SynthConfig) -> Result<VideoTensor> {
    let (l, h, w) = (cfg.frames, cfg.height, cfg.width);
    if l == 0 || h < 4 || w < 4 {
        return Err(Error::arg("synth_clip", format!("degenerate clip size {l}x{h}x{w}")));
    }
    let (vlo, vhi) = cfg.velocity;
    if !(vlo >= 0.0 && vhi >= vlo && vhi.is_finite()) {
        return Err(Error::arg("synth_clip", format!("invalid velocity range {vlo}..{vhi}")));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut data = vec![0f32; l * h * w * 3];
    let mut put = |f: usize, y: usize, x: usize, ch: usize, v: f64| {
        data[((f * h + y) * w + x) * 3 + ch] = v.clamp(0.0, 1.0) as f32;
    };
    match cfg.motion {
        Motion::TranslatingTexture => {
            let (waves, (vx, vy)) = translation_draws(&mut rng, h, w, cfg.velocity);
            for f in 0..l {
                let (sx, sy) = (vx * f as f64, vy * f as f64);
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..3 {
                            put(f, y, x, ch, 0.5 + eval_waves(&waves, x as f64 - sx, y as f64 - sy, h, w, ch));
                        }
                    }
                }
            }
        }
        Motion::RotatingGradient => {
            let period = rng.uniform_range(10.0, 20.0);
            let theta0 = rng.uniform_range(0.0, 2.0 * PI);
            let omega = rng.uniform_range(vlo, vhi) / (0.5 * h.min(w) as f64);
            let phases = [0, 1, 2].map(|_| rng.uniform_range(0.0, 2.0 * PI));
            let detail = periodic_waves(&mut rng, h, w, 4, 0.12);
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            for f in 0..l {
                let th = theta0 + omega * f as f64;
                let (c, s) = (th.cos(), th.sin());
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        // rotate the detail layer with the gradient
                        let (rx, ry) = (c * dx + s * dy + cx, -s * dx + c * dy + cy);
                        let u = rx - cx;
                        for ch in 0..3 {
                            let v = 0.5 + 0.3 * (2.0 * PI * u / period + phases[ch]).sin() + eval_waves(&detail, rx, ry, h, w, ch);
                            put(f, y, x, ch, v);
                        }
                    }
                }
            }
        }
        Motion::BouncingShapes => {
            let background = periodic_waves(&mut rng, h, w, 5, 0.2);
            let n_shapes = rng.int_inclusive(2, 4);
            struct Shape {
                x: f64,
                y: f64,
                vx: f64,
                vy: f64,
                r: f64,
                square: bool,
                color: [f64; 3],
            }
            let mut shapes: Vec<Shape> = (0..n_shapes)
                .map(|_| {
                    let r = rng.uniform_range(3.0, 0.22 * h.min(w) as f64 + 3.0);
                    let speed = rng.uniform_range(vlo, vhi);
                    let a = rng.uniform_range(0.0, 2.0 * PI);
                    Shape {
                        x: rng.uniform_range(r, w as f64 - r),
                        y: rng.uniform_range(r, h as f64 - r),
                        vx: speed * a.cos(),
                        vy: speed * a.sin(),
                        r,
                        square: rng.uniform() < 0.5,
                        color: [0, 1, 2].map(|_| rng.uniform_range(0.05, 0.95)),
                    }
                })
                .collect();
            for f in 0..l {
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let mut rgb = [0, 1, 2].map(|ch| 0.5 + eval_waves(&background, px, py, h, w, ch));
                        for s in &shapes {
                            let d = if s.square { (px - s.x).abs().max((py - s.y).abs()) - s.r } else { ((px - s.x).powi(2) + (py - s.y).powi(2)).sqrt() - s.r };
                            let a = smoothstep_edge(d);
                            for ch in 0..3 {
                                rgb[ch] = (1.0 - a) * rgb[ch] + a * s.color[ch];
                            }
                        }
                        for (ch, v) in rgb.into_iter().enumerate() {
                            put(f, y, x, ch, v);
                        }
                    }
                }
                for s in &mut shapes {
                    s.x += s.vx;
                    s.y += s.vy;
                    if s.x < s.r || s.x > w as f64 - s.r {
                        s.vx = -s.vx;
                        s.x = s.x.clamp(s.r, w as f64 - s.r);
                    }
                    if s.y < s.r || s.y > h as f64 - s.r {
                        s.vy = -s.vy;
                        s.y = s.y.clamp(s.r, h as f64 - s.r);
                    }
                }
            }
        }
    }
    Tensor::new(&[l, h, w, 3], data)
}

/// Paired ground-truth and degraded clips.
#[derive(Clone, Debug)]
pub struct ClipPair {
    pub name: String,
    pub gt: VideoTensor,
    pub lr: VideoTensor,
}

/// `count` clips cycling through the motion models, each with its own seed
/// derived from `seed`.
pub fn synth_dataset(seed: u64, count: usize, frames: usize, size: (usize, usize), motions: &[Motion], factor: usize) -> Result<Vec<ClipPair>> {
    if motions.is_empty() {
        return Err(Error::arg("synth_dataset", "no motion models"));
    }
    let mut rng = RngState::new(seed);
    (0..count)
        .map(|i| {
            let cfg = SynthConfig { seed: rng.next_u64(), frames, height: size.0, width: size.1, motion: motions[i % motions.len()], ..Default::default() };
            let gt = synth_clip(&cfg)?;
            let lr = bicubic_down(&gt, factor)?;
            Ok(ClipPair { name: format!("clip_{i:04}"), gt, lr })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint archive

pub const CKPT_MAGIC: &str = "SATECO-CKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    /// `param`, or an optimizer slot name.
    pub kind: String,
    pub name: String,
    pub group: String,
    pub frozen: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ArchiveEntry>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("{what} {s:?} must be a non-empty token without whitespace")));
    }
    Ok(())
}

fn as_rank4(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() > 4 {
        let lead: usize = s[..s.len() - 3].iter().product();
        return t.clone().reshape(&[lead, s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]]);
    }
    let mut shape = vec![1; 4 - s.len()];
    shape.extend_from_slice(s);
    t.clone().reshape(&shape)
}

impl Archive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn entry(&self, kind: &str, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.kind == kind && e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(CKPT_MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta value for {k} contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for e in &self.entries {
            check_token("tensor kind", &e.kind)?;
            check_token("tensor name", &e.name)?;
            check_token("tensor group", &e.group)?;
            let blob = encode_svt(&as_rank4(&e.tensor)?)?;
            let dims: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {} {} {} {} {} {}\n", e.kind, e.name, e.group, u8::from(e.frozen), dims.join(","), payload.len(), blob.len()));
            payload.extend_from_slice(&blob);
        }
        header.push_str("END\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let end = bytes.windows(5).position(|w| w == b"\nEND\n").map(|p| p + 1).ok_or_else(|| bad("manifest has no END line".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &bytes[end + 4..];
        let mut lines = header.lines();
        if lines.next() != Some(CKPT_MAGIC) {
            return Err(bad(format!("missing {CKPT_MAGIC:?} header")));
        }
        let mut archive = Archive::default();
        let mut covered = 0usize;
        for line in lines {
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    archive.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let f: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    let [kind, name, group, frozen, dims, offset, len] = f[..] else {
                        return Err(bad(format!("malformed tensor line {line:?}")));
                    };
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?} in {line:?}")));
                    let shape = dims.split(',').map(parse).collect::<Result<Vec<_>>>()?;
                    let (offset, len) = (parse(offset)?, parse(len)?);
                    let blob = payload.get(offset..offset + len).ok_or_else(|| bad(format!("tensor {name} lies outside the payload")))?;
                    covered += len;
                    let tensor = decode_svt(blob)?.reshape(&shape)?;
                    archive.entries.push(ArchiveEntry { kind: kind.into(), name: name.into(), group: group.into(), frozen: frozen == "1", tensor });
                }
                _ => return Err(bad(format!("unrecognized manifest line {line:?}"))),
            }
        }
        if covered != payload.len() {
            return Err(bad(format!("payload holds {} bytes but the manifest covers {covered}", payload.len())));
        }
        Ok(archive)
    }

    /// Write atomically through a sibling temporary file.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // partition of unity at an arbitrary offset
        let t = 0.3;
        let s: f64 = (-2..=2).map(|k| cubic(t - k as f64)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn header_errors_are_distinct() {
        assert!(matches!(decode_svt(b"SV"), Err(Error::HeaderShort { .. })));
        assert!(matches!(decode_svt(b"XXXX0000000000000000"), Err(Error::BadMagic { .. })));
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 1]);
        let mut bytes = encode_svt(&x).unwrap();
        bytes.push(0);
        assert!(matches!(decode_svt(&bytes), Err(Error::PayloadLong { .. })));
    }

    #[test]
    fn archive_roundtrip() {
        let mut a = Archive::default();
        a.meta.insert("stage".into(), "2".into());
        a.meta.insert("note".into(), "two words".into());
        a.entries.push(ArchiveEntry {
            kind: "param".into(),
            name: "unet.conv.w".into(),
            group: "unet.backbone".into(),
            frozen: true,
            tensor: Tensor::from_fn(&[3, 3, 2, 5], |i| i as f32 * 0.5),
        });
        a.entries.push(ArchiveEntry { kind: "adam.m".into(), name: "b".into(), group: "refiner".into(), frozen: false, tensor: Tensor::from_fn(&[7], |i| -(i as f32)) });
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        let mut cut = a.to_bytes().unwrap();
        cut.truncate(cut.len() - 3);
        assert!(Archive::from_bytes(&cut).is_err());
    }
}

//! Full-reference video metrics: PSNR, SSIM and a temporal-consistency
//! score, with a line-delimited report format.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

/// Aggregation cap for identical frames.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Psnr,
    Ssim,
    TemporalConsistency,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::TemporalConsistency];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::TemporalConsistency => "tc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown metric {s:?} (expected psnr, ssim or tc)")))
    }

    /// Parse a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(|p| Metric::parse(p.trim())).collect()
    }

    pub fn evaluate(self, x: &VideoTensor, y: &VideoTensor) -> Result<MetricReport> {
        match self {
            Metric::Psnr => psnr(x, y, 1.0),
            Metric::Ssim => ssim(x, y),
            Metric::TemporalConsistency => temporal_consistency(x, y),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-frame values and their mean. For temporal consistency the entries
/// are per adjacent-frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub per_frame: Vec<f64>,
    pub mean: f64,
    pub clip: String,
    pub model: String,
}

impl MetricReport {
    pub fn new(metric: Metric, per_frame: Vec<f64>) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        MetricReport { metric, per_frame, mean, clip: "-".into(), model: "-".into() }
    }

    pub fn with_ids(mut self, clip: &str, model: &str) -> Self {
        self.clip = clip.into();
        self.model = model.into();
        self
    }

    /// `metric=<m> clip=<id> model=<id> mean=<v> frames=<v,v,..>`
    pub fn to_line(&self) -> String {
        let frames: Vec<String> = self.per_frame.iter().map(|v| format!("{v:.17e}")).collect();
        format!("metric={} clip={} model={} mean={:.17e} frames={}", self.metric, self.clip, self.model, self.mean, frames.join(","))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Config(format!("metric record lacks {k:?}: {line}")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?} in metric record")));
        let per_frame = get("frames")?.split(',').map(num).collect::<Result<Vec<_>>>()?;
        Ok(MetricReport { metric: Metric::parse(get("metric")?)?, per_frame, mean: num(get("mean")?)?, clip: get("clip")?.into(), model: get("model")?.into() })
    }
}

fn check_pair(op: &'static str, x: &VideoTensor, y: &VideoTensor) -> Result<(usize, usize, usize, usize)> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, x.shape(), y.shape()));
    }
    let d = x.dims4()?;
    if d.0 == 0 {
        return Err(Error::invalid(op, x.shape(), "empty clip"));
    }
    Ok(d)
}

/// Uncapped PSNR of one pair of equally sized slices; `+inf` when equal.
pub fn psnr_frame(x: &[f32], y: &[f32], max_val: f64) -> f64 {
    let mse = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    10.0 * (max_val * max_val / mse).log10()
}

/// Per-frame PSNR, each capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &VideoTensor, y: &VideoTensor, max_val: f64) -> Result<MetricReport> {
    let (l, h, w, c) = check_pair("psnr", x, y)?;
    let n = h * w * c;
    let per: Vec<f64> = (0..l).map(|f| psnr_frame(&x.data()[f * n..(f + 1) * n], &y.data()[f * n..(f + 1) * n], max_val).min(PSNR_CAP_DB)).collect();
    Ok(MetricReport::new(Metric::Psnr, per))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` map.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn gray(frame: &[f32], c: usize) -> Vec<f64> {
    frame.chunks_exact(c).map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64).collect()
}

/// Single-scale SSIM of two grayscale maps over the fully covered windows.
pub fn ssim_map_mean(a: &[f64], b: &[f64], h: usize, w: usize, max_val: f64) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&prod(a, a), h, w, &k);
    let e_bb = filter_valid(&prod(b, b), h, w, &k);
    let e_ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Per-frame SSIM on channel-mean grayscale with an 11x11 Gaussian window.
pub fn ssim(x: &VideoTensor, y: &VideoTensor) -> Result<MetricReport> {
    let (l, h, w, c) = check_pair("ssim", x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", x.shape(), format!("frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let n = h * w * c;
    let per = (0..l)
        .map(|f| {
            let (a, b) = (gray(&x.data()[f * n..(f + 1) * n], c), gray(&y.data()[f * n..(f + 1) * n], c));
            if a == b {
                1.0
            } else {
                ssim_map_mean(&a, &b, h, w, 1.0)
            }
        })
        .collect();
    Ok(MetricReport::new(Metric::Ssim, per))
}

/// `mean |(x_{i+1} - x_i) - (y_{i+1} - y_i)|` per adjacent pair; lower is
/// better and static clips score 0 regardless of appearance.
pub fn temporal_consistency(x: &VideoTensor, y: &VideoTensor) -> Result<MetricReport> {
    let (l, h, w, c) = check_pair("temporal_consistency", x, y)?;
    if l < 2 {
        return Err(Error::invalid("temporal_consistency", x.shape(), "needs at least two frames"));
    }
    let n = h * w * c;
    let (xd, yd) = (x.data(), y.data());
    let per = (0..l - 1)
        .map(|f| {
            (0..n)
                .map(|i| {
                    let (a, b) = (f * n + i, (f + 1) * n + i);
                    ((xd[b] as f64 - xd[a] as f64) - (yd[b] as f64 - yd[a] as f64)).abs()
                })
                .sum::<f64>()
                / n as f64
        })
        .collect();
    Ok(MetricReport::new(Metric::TemporalConsistency, per))
}

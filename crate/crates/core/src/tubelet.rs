//! Non-overlapping spatio-temporal windows ("tubelets").
//!
//! A tubelet is the same `h x w` spatial window linked across all `L`
//! frames of a clip, flattened to `L*h*w` tokens in frame-major, then row,
//! then column order. Tubelets are ordered by clip, then window row, then
//! window column. Extents that are not a window multiple are replicate-padded
//! on the bottom/right before partitioning and cropped again on merge.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub h: usize,
    pub w: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { h: 8, w: 8 }
    }
}

impl WindowSpec {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::arg("window", format!("window {h}x{w} must be at least 1x1")));
        }
        Ok(WindowSpec { h, w })
    }

    /// The window shrunk to fit a `height x width` map.
    pub fn clamped(self, height: usize, width: usize) -> Self {
        WindowSpec { h: self.h.min(height), w: self.w.min(width) }
    }
}

/// Geometry of partitioning a `(clips*L, H, W, C)` frame batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TubeletLayout {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spec: WindowSpec,
}

impl TubeletLayout {
    pub fn new(clips: usize, frames: usize, height: usize, width: usize, channels: usize, spec: WindowSpec) -> Result<Self> {
        let layout = TubeletLayout { clips, frames, height, width, channels, spec };
        if [clips, frames, height, width, channels].contains(&0) {
            return Err(Error::invalid("tubelet", &layout.source_shape(), "dimensions must be positive"));
        }
        WindowSpec::new(spec.h, spec.w)?;
        Ok(layout)
    }

    /// Layout for a frame-batch shape `(clips*frames, H, W, C)`.
    pub fn for_shape(shape: &[usize], frames: usize, spec: WindowSpec) -> Result<Self> {
        let [n, h, w, c] = shape[..] else {
            return Err(Error::invalid("tubelet", shape, "expected (frames, H, W, C)"));
        };
        if frames == 0 || n % frames != 0 {
            return Err(Error::invalid("tubelet", shape, format!("frame axis is not a multiple of L = {frames}")));
        }
        Self::new(n / frames, frames, h, w, c, spec)
    }

    pub fn source_shape(&self) -> Vec<usize> {
        vec![self.clips * self.frames, self.height, self.width, self.channels]
    }

    /// Window grid `(rows, cols)` per clip.
    pub fn grid(&self) -> (usize, usize) {
        (self.height.div_ceil(self.spec.h), self.width.div_ceil(self.spec.w))
    }

    /// Replicate padding `(rows, cols)` added on the bottom/right.
    pub fn pad(&self) -> (usize, usize) {
        let (r, c) = self.grid();
        (r * self.spec.h - self.height, c * self.spec.w - self.width)
    }

    /// Total tubelet count over all clips.
    pub fn count(&self) -> usize {
        let (r, c) = self.grid();
        self.clips * r * c
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.spec.h * self.spec.w
    }

    /// `(N, L*h*w, C)`.
    pub fn tubelet_shape(&self) -> Vec<usize> {
        vec![self.count(), self.tokens(), self.channels]
    }

    /// `(N, L, h, w, C)`, the view a pointwise 3D convolution sees.
    pub fn volume_shape(&self) -> Vec<usize> {
        vec![self.count(), self.frames, self.spec.h, self.spec.w, self.channels]
    }

    /// For every tubelet element, its flat source index in the frame batch.
    pub fn partition_index(&self) -> Vec<u32> {
        let (rows, cols) = self.grid();
        let (h, w, c) = (self.spec.h, self.spec.w, self.channels);
        let mut idx = Vec::with_capacity(self.count() * self.tokens() * c);
        for clip in 0..self.clips {
            for r in 0..rows {
                for col in 0..cols {
                    for l in 0..self.frames {
                        let frame = clip * self.frames + l;
                        for dy in 0..h {
                            let y = (r * h + dy).min(self.height - 1);
                            for dx in 0..w {
                                let x = (col * w + dx).min(self.width - 1);
                                let base = ((frame * self.height + y) * self.width + x) * c;
                                idx.extend((0..c).map(|ch| (base + ch) as u32));
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// For every frame-batch element, its flat index in the tubelet tensor.
    /// Padding tokens are never referenced.
    pub fn merge_index(&self) -> Vec<u32> {
        let (rows, cols) = self.grid();
        let order: Vec<usize> = (0..self.clips * rows * cols).collect();
        self.merge_index_with(&order)
    }

    /// As [`merge_index`](Self::merge_index) where tubelet slot `order[k]`
    /// holds window `k` in canonical order.
    fn merge_index_with(&self, slot_of: &[usize]) -> Vec<u32> {
        let (rows, cols) = self.grid();
        let (h, w, c) = (self.spec.h, self.spec.w, self.channels);
        let tokens = self.tokens();
        let mut idx = Vec::with_capacity(self.clips * self.frames * self.height * self.width * c);
        for clip in 0..self.clips {
            for l in 0..self.frames {
                for y in 0..self.height {
                    let (r, dy) = (y / h, y % h);
                    for x in 0..self.width {
                        let (col, dx) = (x / w, x % w);
                        let slot = slot_of[(clip * rows + r) * cols + col];
                        let token = (l * h + dy) * w + dx;
                        let base = (slot * tokens + token) * c;
                        idx.extend((0..c).map(|ch| (base + ch) as u32));
                    }
                }
            }
        }
        idx
    }

    /// Record the partition of a `(clips*L, H, W, C)` var on the tape.
    pub fn partition_var<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.shape(x) != self.source_shape() {
            return Err(Error::shape("tubelet partition", g.shape(x), &self.source_shape()));
        }
        g.gather(x, self.tubelet_shape(), Arc::new(self.partition_index()))
    }

    /// Record the merge of an `(N, L*h*w, C)` var on the tape.
    pub fn merge_var<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.shape(x) != self.tubelet_shape() {
            return Err(Error::shape("tubelet merge", g.shape(x), &self.tubelet_shape()));
        }
        g.gather(x, self.source_shape(), Arc::new(self.merge_index()))
    }
}

/// Tubelets of one clip together with the bookkeeping needed to invert the
/// partition.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeletBatch<T = f32> {
    /// `(N, L*h*w, C)`.
    pub tubelets: Tensor<T>,
    /// Window-grid `(row, col)` of each tubelet.
    pub origins: Vec<(usize, usize)>,
    /// `(L, H, W, C)` before padding.
    pub source_shape: [usize; 4],
    /// Replicate padding `(rows, cols)` added on the bottom/right.
    pub pad: (usize, usize),
    pub spec: WindowSpec,
}

impl<T: Element> TubeletBatch<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn layout(&self) -> TubeletLayout {
        let [l, h, w, c] = self.source_shape;
        TubeletLayout { clips: 1, frames: l, height: h, width: w, channels: c, spec: self.spec }
    }

    /// Tubelet `i` as an `(L*h*w, C)` matrix.
    pub fn tubelet(&self, i: usize) -> Tensor<T> {
        let (tokens, c) = (self.tubelets.shape()[1], self.tubelets.shape()[2]);
        let n = tokens * c;
        Tensor::from_parts(vec![tokens, c], self.tubelets.data()[i * n..(i + 1) * n].to_vec())
    }

    /// Reorder tubelets: slot `i` of the result is slot `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::arg("tubelet permute", format!("{order:?} is not a permutation of 0..{n}")));
        }
        let per = self.tubelets.len() / n;
        let mut data = Vec::with_capacity(self.tubelets.len());
        for &i in order {
            data.extend_from_slice(&self.tubelets.data()[i * per..(i + 1) * per]);
        }
        Ok(TubeletBatch { tubelets: Tensor::from_parts(self.tubelets.shape().to_vec(), data), origins: order.iter().map(|&i| self.origins[i]).collect(), ..self.clone() })
    }

    /// Same geometry, new tubelet contents.
    pub fn with_tubelets(&self, tubelets: Tensor<T>) -> Result<Self> {
        if tubelets.shape() != self.tubelets.shape() {
            return Err(Error::shape("tubelet batch", self.tubelets.shape(), tubelets.shape()));
        }
        Ok(TubeletBatch { tubelets, ..self.clone() })
    }

    /// Shared geometry check for binary tubelet ops.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let same = self.tubelets.shape()[..2] == other.tubelets.shape()[..2]
            && self.origins == other.origins
            && self.source_shape[..3] == other.source_shape[..3]
            && self.spec == other.spec;
        if !same {
            return Err(Error::shape("tubelet geometry", self.tubelets.shape(), other.tubelets.shape()));
        }
        Ok(())
    }
}

/// Split an `(L, H, W, C)` map into tubelets.
pub fn partition<T: Element>(f: &Tensor<T>, spec: WindowSpec) -> Result<TubeletBatch<T>> {
    let (l, h, w, c) = f.dims4()?;
    let layout = TubeletLayout::new(1, l, h, w, c, spec)?;
    let data = crate::ops::gather(f.data(), &layout.partition_index());
    let (rows, cols) = layout.grid();
    Ok(TubeletBatch {
        tubelets: Tensor::from_parts(layout.tubelet_shape(), data),
        origins: (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect(),
        source_shape: [l, h, w, c],
        pad: layout.pad(),
        spec,
    })
}

/// Exact inverse of [`partition`]; tubelets are placed by their origins, so
/// their order within the batch is irrelevant.
pub fn merge<T: Element>(batch: &TubeletBatch<T>) -> Result<Tensor<T>> {
    let layout = batch.layout();
    TubeletLayout::new(1, layout.frames, layout.height, layout.width, layout.channels, layout.spec)?;
    if batch.tubelets.shape() != layout.tubelet_shape() {
        return Err(Error::shape("tubelet merge", batch.tubelets.shape(), &layout.tubelet_shape()));
    }
    if batch.pad != layout.pad() {
        return Err(Error::arg("tubelet merge", format!("padding {:?} inconsistent with layout {:?}", batch.pad, layout.pad())));
    }
    let (rows, cols) = layout.grid();
    let mut slot_of = vec![usize::MAX; rows * cols];
    for (slot, &(r, c)) in batch.origins.iter().enumerate() {
        if r >= rows || c >= cols {
            return Err(Error::arg("tubelet merge", format!("origin ({r}, {c}) outside the {rows}x{cols} window grid")));
        }
        if slot_of[r * cols + c] != usize::MAX {
            return Err(Error::arg("tubelet merge", format!("origin ({r}, {c}) appears twice")));
        }
        slot_of[r * cols + c] = slot;
    }
    if batch.origins.len() != rows * cols {
        return Err(Error::arg("tubelet merge", format!("{} origins do not tile the {rows}x{cols} window grid", batch.origins.len())));
    }
    let data = crate::ops::gather(batch.tubelets.data(), &layout.merge_index_with(&slot_of));
    Ok(Tensor::from_parts(batch.source_shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn window_count_for_divisible_map() {
        let f = Tensor::<f32>::zeros(&[2, 16, 16, 3]);
        let b = partition(&f, WindowSpec::default()).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.pad, (0, 0));
        assert_eq!(b.tubelets.shape(), &[4, 2 * 64, 3]);
    }

    #[test]
    fn single_window_is_the_flattened_input() {
        let mut rng = RngState::new(3);
        let f = Tensor::<f32>::randn(&[3, 4, 5, 2], 1.0, &mut rng);
        let b = partition(&f, WindowSpec::new(4, 5).unwrap()).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.tubelets.data(), f.data());
    }

    #[test]
    fn tokens_are_frame_major() {
        let f = Tensor::<f32>::from_fn(&[2, 2, 2, 1], |i| i as f32);
        let b = partition(&f, WindowSpec::new(1, 2).unwrap()).unwrap();
        // window (0, 0): frame 0 row 0, then frame 1 row 0
        assert_eq!(b.tubelet(0).data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(b.tubelet(1).data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn padding_replicates_the_last_row_and_column() {
        let f = Tensor::<f32>::from_fn(&[1, 3, 3, 1], |i| i as f32);
        let b = partition(&f, WindowSpec::new(2, 2).unwrap()).unwrap();
        assert_eq!(b.pad, (1, 1));
        assert_eq!(b.tubelet(3).data(), &[8.0, 8.0, 8.0, 8.0]);
        assert_eq!(b.tubelet(1).data(), &[2.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn merge_rejects_inconsistent_origins() {
        let f = Tensor::<f32>::zeros(&[1, 4, 4, 1]);
        let mut b = partition(&f, WindowSpec::new(2, 2).unwrap()).unwrap();
        b.origins[3] = b.origins[0];
        assert!(merge(&b).is_err());
        b.origins[3] = (2, 0);
        assert!(merge(&b).is_err());
    }

    #[test]
    fn graph_partition_matches_plain_partition() {
        let mut rng = RngState::new(5);
        let f = Tensor::<f64>::randn(&[4, 5, 7, 2], 1.0, &mut rng);
        let layout = TubeletLayout::for_shape(f.shape(), 2, WindowSpec::new(3, 4).unwrap()).unwrap();
        let store = crate::params::ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(f.clone());
        let t = layout.partition_var(&mut g, x).unwrap();
        let back = layout.merge_var(&mut g, t).unwrap();
        assert!(g.value(back).bit_eq(&f));
        let clip1 = Tensor::stack_frames(&[f.frame(2).unwrap(), f.frame(3).unwrap()]).unwrap();
        let plain = partition(&clip1, layout.spec).unwrap();
        let per = plain.tubelets.len();
        assert_eq!(&g.value(t).data()[per..], plain.tubelets.data());
    }
}

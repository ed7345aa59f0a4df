//! Per-image patch cache and the fast window accumulator.
//!
//! Patches of an image are described and quantized once; every candidate
//! window then only accumulates the cached point-wise FVs of the patches it
//! contains. Groups that no model uses can be skipped during accumulation.

use crate::codebook::GmmModel;
use crate::encoder::{
    self, cell_bin, cell_coord, footprint_in_window, intra_normalize_bins, l2, pointwise_into, FvLayout,
    Normalization, PyramidFv,
};
use crate::error::Result;
use crate::features::{extract_patches_with_grid, DescriptorParams, Patch, PatchParams, ScaleGrid};
use crate::geometry::Window;
use crate::image::GrayImage;
use crate::model::LinearModel;
use crate::pca::PcaProjection;

/// Everything needed to turn an image window into a normalized pyramid FV.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub patch: PatchParams,
    pub descriptor: DescriptorParams,
    /// Exclude patches without gradient energy from pooling.
    pub drop_zero_energy: bool,
    pub pca: PcaProjection,
    pub gmm: GmmModel,
    pub pyramid: usize,
    pub normalization: Normalization,
}

impl FeaturePipeline {
    pub fn layout(&self) -> FvLayout {
        FvLayout::new(self.pyramid, self.gmm.num_components(), self.gmm.dim())
    }

    /// Extracts patches and fills in their projected descriptors.
    pub fn extract_projected(&self, image: &GrayImage) -> Vec<Patch> {
        self.extract_projected_with_grid(image).0
    }

    fn extract_projected_with_grid(&self, image: &GrayImage) -> (Vec<Patch>, Vec<ScaleGrid>) {
        let (mut patches, grids) = extract_patches_with_grid(image, &self.patch, &self.descriptor);
        for p in &mut patches {
            p.projected = self.pca.project(&p.raw);
        }
        (patches, grids)
    }

    pub fn encode_image(&self, image: &GrayImage) -> ImageEncoding {
        let (patches, grids) = self.extract_projected_with_grid(image);
        ImageEncoding::from_patches(self, image.width(), image.height(), &patches, grids)
    }

    /// Cache-free path: extract, aggregate and normalize a single window.
    pub fn encode_window_reference(&self, image: &GrayImage, window: &Window) -> Result<PyramidFv> {
        let patches: Vec<Patch> = self
            .extract_projected(image)
            .into_iter()
            .filter(|p| !(self.drop_zero_energy && p.zero_energy))
            .collect();
        let raw = encoder::aggregate(&self.gmm, &patches, window, self.pyramid)?;
        encoder::normalize(raw, self.normalization)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedPatch {
    pub left: f64,
    pub top: f64,
    pub side: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub scale_index: usize,
    pub gaussian: u32,
    /// Excluded from pooling (zero-energy patch with dropping enabled).
    pub skip: bool,
}

/// Quantized patches of one image with their point-wise FVs.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    pub width: usize,
    pub height: usize,
    pub layout: FvLayout,
    pub normalization: Normalization,
    step: usize,
    grids: Vec<ScaleGrid>,
    patches: Vec<EncodedPatch>,
    /// `2D` values per patch.
    values: Vec<f64>,
    /// Projected descriptors, `D` per patch.
    descriptors: Vec<f64>,
}

impl ImageEncoding {
    fn from_patches(
        pipeline: &FeaturePipeline,
        width: usize,
        height: usize,
        patches: &[Patch],
        grids: Vec<ScaleGrid>,
    ) -> Self {
        let layout = pipeline.layout();
        let block = layout.block_len();
        let mut values = vec![0.0; patches.len() * block];
        let mut descriptors = Vec::with_capacity(patches.len() * layout.d);
        let mut encoded = Vec::with_capacity(patches.len());
        for (p, out) in patches.iter().zip(values.chunks_exact_mut(block)) {
            let k = pipeline.gmm.hard_assign(&p.projected);
            pointwise_into(&pipeline.gmm, &p.projected, k, out);
            descriptors.extend_from_slice(&p.projected);
            encoded.push(EncodedPatch {
                left: p.left,
                top: p.top,
                side: p.side,
                center_x: p.center_x,
                center_y: p.center_y,
                scale_index: p.scale_index,
                gaussian: k as u32,
                skip: pipeline.drop_zero_energy && p.zero_energy,
            });
        }
        Self {
            width,
            height,
            layout,
            normalization: pipeline.normalization,
            step: pipeline.patch.step,
            grids,
            patches: encoded,
            values,
            descriptors,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[EncodedPatch] {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &EncodedPatch {
        &self.patches[i]
    }

    pub fn pointwise(&self, i: usize) -> &[f64] {
        let b = self.layout.block_len();
        &self.values[i * b..(i + 1) * b]
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        let d = self.layout.d;
        &self.descriptors[i * d..(i + 1) * d]
    }

    /// Calls `f` with the index of every pooled patch whose footprint lies in
    /// `window`, in (scale, row, column) order.
    pub fn for_each_in_window(&self, window: &Window, mut f: impl FnMut(usize)) {
        let (x0, y0) = (f64::from(window.x), f64::from(window.y));
        let (x1, y1) = (f64::from(window.right()), f64::from(window.bottom()));
        for g in &self.grids {
            let side = self.patches[g.first].side;
            if side > f64::from(window.w) || side > f64::from(window.h) {
                continue;
            }
            let pitch = self.step as f64 * g.scale;
            let range = |lo: f64, hi: f64, n: usize| {
                let a = ((lo / pitch).ceil() as i64 - 1).max(0) as usize;
                let b = (((hi - side) / pitch).floor() as i64 + 1).min(n as i64 - 1);
                (a, b)
            };
            let (ix0, ix1) = range(x0, x1, g.nx);
            let (iy0, iy1) = range(y0, y1, g.ny);
            if ix1 < 0 || iy1 < 0 {
                continue;
            }
            for iy in iy0..=iy1 as usize {
                for ix in ix0..=ix1 as usize {
                    let i = g.first + iy * g.nx + ix;
                    let p = &self.patches[i];
                    if !p.skip && footprint_in_window(window, p.left, p.top, p.side) {
                        f(i);
                    }
                }
            }
        }
    }

    pub fn patches_in_window(&self, window: &Window) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_in_window(window, |i| out.push(i));
        out
    }
}

const UNTOUCHED: u8 = 0;
const TOUCHED: u8 = 1;
const SUMMED: u8 = 2;

/// Reusable per-window scratch space: raw per-group sums plus counts.
#[derive(Debug, Clone)]
pub struct Accumulator {
    layout: FvLayout,
    sums: Vec<f64>,
    bin_counts: Vec<u32>,
    /// Per group: [`UNTOUCHED`], [`TOUCHED`] (patches present, statistics
    /// skipped) or [`SUMMED`].
    state: Vec<u8>,
    /// Groups with at least one patch in the window.
    touched: Vec<u32>,
    /// Touched groups whose statistics were summed.
    summed: Vec<u32>,
    /// Per-window scratch: (grid column, cell column) of contained columns.
    cols: Vec<(usize, usize)>,
    /// (patch, group) pairs to sum, in pooling order; the first `queued`
    /// entries are live.
    queue: Vec<(u32, u32)>,
    queued: usize,
}

impl Accumulator {
    pub fn new(layout: FvLayout) -> Self {
        Self {
            layout,
            sums: vec![0.0; layout.len()],
            bin_counts: vec![0; layout.bins()],
            state: vec![UNTOUCHED; layout.groups()],
            touched: Vec::new(),
            summed: Vec::new(),
            cols: Vec::new(),
            queue: Vec::new(),
            queued: 0,
        }
    }

    pub fn reset(&mut self) {
        for &g in &self.summed {
            self.sums[self.layout.group_range(g as usize)].fill(0.0);
        }
        for &g in &self.touched {
            self.state[g as usize] = UNTOUCHED;
        }
        self.touched.clear();
        self.summed.clear();
        self.bin_counts.fill(0);
    }

    pub fn is_degenerate(&self) -> bool {
        self.bin_counts[0] == 0
    }

    pub fn bin_count(&self, bin: usize) -> u32 {
        self.bin_counts[bin]
    }

    /// Pools patch `i` into bin 0 and its cell. Groups with `active[g] ==
    /// false` are counted but their statistics are not summed.
    #[inline]
    pub fn add(&mut self, enc: &ImageEncoding, i: usize, window: &Window, active: Option<&[bool]>) {
        let p = &enc.patches[i];
        let cell = cell_bin(window, self.layout.r, p.center_x, p.center_y);
        self.reserve(2);
        self.note(enc, i, cell, active);
        self.flush(enc);
    }

    fn reserve(&mut self, extra: usize) {
        if self.queue.len() < self.queued + extra {
            self.queue.resize(self.queued + extra, (0, 0));
        }
    }

    /// Counts patch `i` in bin 0 and `cell` and queues the active groups.
    /// Queueing is branch-free so that skipping does not cost mispredictions.
    #[inline]
    fn note(&mut self, enc: &ImageEncoding, i: usize, cell: usize, active: Option<&[bool]>) {
        let k = enc.patches[i].gaussian as usize;
        for bin in [0, cell] {
            self.bin_counts[bin] += 1;
            let g = self.layout.group(bin, k);
            if self.state[g] == UNTOUCHED {
                self.touched.push(g as u32);
                self.state[g] = TOUCHED;
            }
            let on = active.map_or(true, |a| a[g]);
            self.queue[self.queued] = (i as u32, g as u32);
            self.queued += usize::from(on);
            if on & (self.state[g] != SUMMED) {
                self.state[g] = SUMMED;
                self.summed.push(g as u32);
            }
        }
    }

    /// Sums the queued point-wise FVs.
    fn flush(&mut self, enc: &ImageEncoding) {
        for &(i, g) in &self.queue[..self.queued] {
            let range = self.layout.group_range(g as usize);
            self.sums[range]
                .iter_mut()
                .zip(enc.pointwise(i as usize))
                .for_each(|(s, v)| *s += v);
        }
        self.queued = 0;
    }

    /// Pools every patch of `window`, in the order of
    /// [`ImageEncoding::for_each_in_window`]. Patch positions depend only on
    /// the grid column (x) and row (y), so containment and cells are
    /// resolved once per column and row.
    pub fn accumulate(&mut self, enc: &ImageEncoding, window: &Window, active: Option<&[bool]>) {
        self.reset();
        let r = self.layout.r;
        let (x0, y0) = (f64::from(window.x), f64::from(window.y));
        let (x1, y1) = (f64::from(window.right()), f64::from(window.bottom()));
        let mut cols = std::mem::take(&mut self.cols);
        self.reserve(2 * enc.patches.len());
        for g in &enc.grids {
            let side = enc.patches[g.first].side;
            if side > f64::from(window.w) || side > f64::from(window.h) {
                continue;
            }
            cols.clear();
            for ix in 0..g.nx {
                let p = &enc.patches[g.first + ix];
                if p.left >= x0 && p.left + side <= x1 {
                    cols.push((ix, cell_coord(p.center_x - x0, window.w, r)));
                }
            }
            if cols.is_empty() {
                continue;
            }
            for iy in 0..g.ny {
                let p = &enc.patches[g.first + iy * g.nx];
                if !(p.top >= y0 && p.top + side <= y1) {
                    continue;
                }
                let row = 1 + cell_coord(p.center_y - y0, window.h, r) * r;
                for &(ix, col) in &cols {
                    let i = g.first + iy * g.nx + ix;
                    if !enc.patches[i].skip {
                        self.note(enc, i, row + col, active);
                    }
                }
            }
        }
        self.cols = cols;
        self.flush(enc);
    }

    /// Score of the accumulated window under `normalization`. Skipped groups
    /// are exact for raw and intra normalization as long as the model has
    /// zero weight on them; SSR needs every statistic and must not be used
    /// with skipping.
    pub fn score(&self, model: &LinearModel, normalization: Normalization) -> f64 {
        if self.is_degenerate() {
            return model.bias;
        }
        let layout = &self.layout;
        let bin_of = |g: usize| g / layout.k;
        match normalization {
            Normalization::Intra => {
                let mut acc = 0.0;
                let mut nonzero = 0usize;
                for &g in &self.touched {
                    let g = g as usize;
                    if self.state[g] != SUMMED {
                        // skipped groups carry zero weight; only presence matters
                        nonzero += 1;
                        continue;
                    }
                    let w = model.group(g);
                    let s = &self.sums[layout.group_range(g)];
                    let n = l2(s);
                    if n == 0.0 {
                        continue;
                    }
                    nonzero += 1;
                    acc += w.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / n;
                }
                if nonzero == 0 {
                    return model.bias;
                }
                acc / (nonzero as f64).sqrt() + model.bias
            }
            Normalization::Ssr => {
                let mut acc = 0.0;
                let mut norm2 = 0.0;
                for &g in &self.touched {
                    let g = g as usize;
                    let inv = 1.0 / f64::from(self.bin_counts[bin_of(g)]);
                    let s = &self.sums[layout.group_range(g)];
                    for (w, v) in model.group(g).iter().zip(s) {
                        let v = v * inv;
                        norm2 += v.abs();
                        acc += w * v.signum() * v.abs().sqrt();
                    }
                }
                if norm2 == 0.0 {
                    return model.bias;
                }
                acc / norm2.sqrt() + model.bias
            }
            Normalization::Raw => {
                let mut acc = 0.0;
                for &g in &self.summed {
                    let g = g as usize;
                    let inv = 1.0 / f64::from(self.bin_counts[bin_of(g)]);
                    let s = &self.sums[layout.group_range(g)];
                    acc += model.group(g).iter().zip(s).map(|(a, b)| a * b).sum::<f64>() * inv;
                }
                acc + model.bias
            }
        }
    }

    /// Dense raw (per-bin mean) pyramid FV of the accumulated window.
    pub fn to_raw(&self) -> PyramidFv {
        let layout = self.layout;
        let mut fv = PyramidFv::zeros(layout);
        for &g in &self.touched {
            let g = g as usize;
            let inv = f64::from(self.bin_counts[g / layout.k]);
            let range = layout.group_range(g);
            for (o, s) in fv.data[range.clone()].iter_mut().zip(&self.sums[range]) {
                *o = s / inv;
            }
        }
        fv.bin_counts = self.bin_counts.iter().map(|&c| c as usize).collect();
        fv.degenerate = self.is_degenerate();
        fv
    }

    pub fn to_normalized(&self, normalization: Normalization) -> PyramidFv {
        encoder::normalize(self.to_raw(), normalization).expect("raw input")
    }

    /// Intra-normalized bins before the final l2 step (used for analysis).
    pub fn intra_bins(&self) -> Vec<f64> {
        let mut fv = self.to_raw();
        intra_normalize_bins(&mut fv.data, &self.layout);
        fv.data
    }
}

/// Union of the active groups of several models, or `None` when every group
/// is used by some model.
pub fn union_support(models: &[&LinearModel]) -> Option<Vec<bool>> {
    let groups = models.first()?.layout.groups();
    let mut active = vec![false; groups];
    for m in models {
        for (a, b) in active.iter_mut().zip(m.active_groups()) {
            *a |= b;
        }
    }
    if active.iter().all(|&a| a) {
        None
    } else {
        Some(active)
    }
}

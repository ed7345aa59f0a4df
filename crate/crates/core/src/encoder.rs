//! Point-wise Fisher Vectors, spatial-pyramid aggregation and normalization.
//!
//! A pyramid FV is stored bin-major: bin 0 is the whole window, bins
//! `1..=R*R` are the row-major cells. Each bin holds `K` blocks of `2D`
//! values (first-order statistics, then second-order statistics).

use std::fmt;
use std::str::FromStr;

use crate::codebook::GmmModel;
use crate::error::{Error, Result};
use crate::features::Patch;
use crate::geometry::Window;

/// Shape of a stacked pyramid FV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FvLayout {
    /// Pyramid side `R` (the pyramid has `R*R + 1` bins).
    pub r: usize,
    /// Number of Gaussians `K`.
    pub k: usize,
    /// Descriptor dimension `D`.
    pub d: usize,
}

impl FvLayout {
    pub fn new(r: usize, k: usize, d: usize) -> Self {
        Self { r, k, d }
    }

    pub fn bins(&self) -> usize {
        self.r * self.r + 1
    }

    pub fn block_len(&self) -> usize {
        2 * self.d
    }

    pub fn bin_len(&self) -> usize {
        self.k * self.block_len()
    }

    /// `(R^2 + 1) * 2KD`.
    pub fn len(&self) -> usize {
        self.bins() * self.bin_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (bin, gaussian) groups.
    pub fn groups(&self) -> usize {
        self.bins() * self.k
    }

    pub fn group(&self, bin: usize, gaussian: usize) -> usize {
        bin * self.k + gaussian
    }

    pub fn group_range(&self, group: usize) -> std::ops::Range<usize> {
        let b = self.block_len();
        group * b..(group + 1) * b
    }

    pub fn bin_range(&self, bin: usize) -> std::ops::Range<usize> {
        let b = self.bin_len();
        bin * b..(bin + 1) * b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    Raw,
    Ssr,
    Intra,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::Ssr => "ssr",
            Normalization::Intra => "intra",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "none" => Ok(Normalization::Raw),
            "ssr" => Ok(Normalization::Ssr),
            "intra" => Ok(Normalization::Intra),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Statistics of a single descriptor: one non-zero block at its Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseFv {
    pub gaussian: usize,
    /// First-order then second-order statistics, `2D` values.
    pub values: Vec<f64>,
}

impl PointwiseFv {
    pub fn densify(&self, k: usize) -> Vec<f64> {
        let b = self.values.len();
        let mut out = vec![0.0; k * b];
        out[self.gaussian * b..(self.gaussian + 1) * b].copy_from_slice(&self.values);
        out
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn encode_pointwise(gmm: &GmmModel, x: &[f64]) -> PointwiseFv {
    let k = gmm.hard_assign(x);
    encode_pointwise_as(gmm, x, k)
}

/// Point-wise statistics of `x` with the assignment forced to `gaussian`.
pub fn encode_pointwise_as(gmm: &GmmModel, x: &[f64], gaussian: usize) -> PointwiseFv {
    let mut values = vec![0.0; 2 * gmm.dim()];
    pointwise_into(gmm, x, gaussian, &mut values);
    PointwiseFv { gaussian, values }
}

pub(crate) fn pointwise_into(gmm: &GmmModel, x: &[f64], k: usize, out: &mut [f64]) {
    let d = gmm.dim();
    let prior = gmm.priors()[k];
    let c1 = 1.0 / prior.sqrt();
    let c2 = 1.0 / (2.0 * prior).sqrt();
    let (first, second) = out.split_at_mut(d);
    for j in 0..d {
        let z = (x[j] - gmm.mean(k)[j]) * gmm.inv_std(k)[j];
        first[j] = z * c1;
        second[j] = (z * z - 1.0) * c2;
    }
}

/// A stacked, possibly normalized, pyramid FV of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFv {
    pub layout: FvLayout,
    pub data: Vec<f64>,
    pub normalization: Normalization,
    /// Patches pooled into each bin.
    pub bin_counts: Vec<usize>,
    /// No patch fell in the window (or the vector is entirely zero).
    pub degenerate: bool,
}

impl PyramidFv {
    pub fn zeros(layout: FvLayout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.len()],
            normalization: Normalization::Raw,
            bin_counts: vec![0; layout.bins()],
            degenerate: true,
        }
    }

    pub fn bin(&self, bin: usize) -> &[f64] {
        &self.data[self.layout.bin_range(bin)]
    }

    pub fn block(&self, bin: usize, gaussian: usize) -> &[f64] {
        &self.data[self.layout.group_range(self.layout.group(bin, gaussian))]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Whether a patch footprint lies entirely inside the window.
#[inline]
pub fn footprint_in_window(window: &Window, left: f64, top: f64, side: f64) -> bool {
    left >= f64::from(window.x)
        && top >= f64::from(window.y)
        && left + side <= f64::from(window.right())
        && top + side <= f64::from(window.bottom())
}

/// Pyramid bin (in `1..=r*r`) of the cell containing `(cx, cy)`. Centers on
/// an internal cell boundary go to the higher-index cell.
#[inline]
pub fn cell_bin(window: &Window, r: usize, cx: f64, cy: f64) -> usize {
    let col = cell_coord(cx - f64::from(window.x), window.w, r);
    let row = cell_coord(cy - f64::from(window.y), window.h, r);
    1 + row * r + col
}

/// Cell column (or row) in `0..r` of a center at `offset` from the window
/// edge along an axis of length `extent`.
#[inline]
pub fn cell_coord(offset: f64, extent: u32, r: usize) -> usize {
    let v = ((offset * r as f64) / f64::from(extent)).floor();
    (v.max(0.0) as usize).min(r - 1)
}

/// Reference aggregation: the mean densified point-wise FV per bin over the
/// patches whose footprint lies in `window`. Patches are summed in canonical
/// (scale, row, column) order, so input order does not affect the result.
/// `patches` must carry projected descriptors.
pub fn aggregate(gmm: &GmmModel, patches: &[Patch], window: &Window, r: usize) -> Result<PyramidFv> {
    if r == 0 {
        return Err(Error::InvalidArgument("pyramid side R must be >= 1".into()));
    }
    if window.is_degenerate() {
        return Err(Error::InvalidArgument(format!("degenerate window {window:?}")));
    }
    let layout = FvLayout::new(r, gmm.num_components(), gmm.dim());
    let mut inside: Vec<&Patch> = patches
        .iter()
        .filter(|p| footprint_in_window(window, p.left, p.top, p.side))
        .collect();
    inside.sort_by(|a, b| {
        a.scale_index
            .cmp(&b.scale_index)
            .then(a.top.total_cmp(&b.top))
            .then(a.left.total_cmp(&b.left))
            .then_with(|| {
                a.projected
                    .iter()
                    .zip(&b.projected)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let mut fv = PyramidFv::zeros(layout);
    let block = layout.block_len();
    let mut values = vec![0.0; block];
    for p in inside {
        if p.projected.len() != layout.d {
            return Err(Error::DimensionMismatch {
                what: "projected descriptor",
                expected: layout.d,
                got: p.projected.len(),
            });
        }
        let k = gmm.hard_assign(&p.projected);
        pointwise_into(gmm, &p.projected, k, &mut values);
        for bin in [0, cell_bin(window, r, p.center_x, p.center_y)] {
            fv.bin_counts[bin] += 1;
            let range = layout.group_range(layout.group(bin, k));
            fv.data[range].iter_mut().zip(&values).for_each(|(a, v)| *a += v);
        }
    }
    for bin in 0..layout.bins() {
        let n = fv.bin_counts[bin];
        if n > 0 {
            let inv = n as f64;
            fv.data[layout.bin_range(bin)].iter_mut().for_each(|v| *v /= inv);
        }
    }
    fv.degenerate = fv.bin_counts[0] == 0;
    Ok(fv)
}

fn require_raw(fv: &PyramidFv) -> Result<()> {
    if fv.normalization != Normalization::Raw {
        return Err(Error::InvalidArgument(format!(
            "expected a raw FV, got {}",
            fv.normalization
        )));
    }
    Ok(())
}

/// Scales `v` to unit l2 norm; zero vectors are left alone. Returns the
/// original norm.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Signed square root of every entry, then whole-vector l2 normalization.
pub fn normalize_ssr(mut fv: PyramidFv) -> Result<PyramidFv> {
    require_raw(&fv)?;
    fv.data
        .iter_mut()
        .for_each(|v| *v = v.signum() * v.abs().sqrt());
    let n = normalize_in_place(&mut fv.data);
    fv.degenerate |= n == 0.0;
    fv.normalization = Normalization::Ssr;
    Ok(fv)
}

/// Per-bin intra-normalization without the final whole-vector step: each
/// Gaussian block is scaled to unit norm (zero blocks stay zero) and each
/// bin is scaled by `1/sqrt(K)`.
pub fn intra_normalize_bins(data: &mut [f64], layout: &FvLayout) {
    let scale = 1.0 / (layout.k as f64).sqrt();
    for block in data.chunks_exact_mut(layout.block_len()) {
        let n = l2(block);
        if n > 0.0 {
            block.iter_mut().for_each(|v| *v = *v / n * scale);
        }
    }
}

/// Intra-normalization followed by whole-vector l2 normalization.
pub fn normalize_intra(mut fv: PyramidFv) -> Result<PyramidFv> {
    require_raw(&fv)?;
    intra_normalize_bins(&mut fv.data, &fv.layout);
    let n = normalize_in_place(&mut fv.data);
    fv.degenerate |= n == 0.0;
    fv.normalization = Normalization::Intra;
    Ok(fv)
}

pub fn normalize(fv: PyramidFv, scheme: Normalization) -> Result<PyramidFv> {
    match scheme {
        Normalization::Raw => {
            require_raw(&fv)?;
            Ok(fv)
        }
        Normalization::Ssr => normalize_ssr(fv),
        Normalization::Intra => normalize_intra(fv),
    }
}

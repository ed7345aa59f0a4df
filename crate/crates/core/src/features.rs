//! Dense multi-scale patch extraction and the gradient-histogram descriptor.

use std::f64::consts::PI;

use crate::image::GrayImage;

pub const DESCRIPTOR_LEN: usize = 128;
const SPATIAL_CELLS: usize = 4;
const ORIENTATION_BINS: usize = 8;
const CLAMP: f64 = 0.2;

/// Patch sampling geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchParams {
    pub patch_size: usize,
    pub step: usize,
    pub num_scales: usize,
    pub scale_factor: f64,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            patch_size: 12,
            step: 3,
            num_scales: 15,
            scale_factor: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DescriptorParams {
    /// Hellinger (RootSIFT-style) mapping after normalization. Off by default.
    pub root_sift: bool,
}

/// One scale level of the dense grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleGrid {
    pub scale_index: usize,
    pub scale: f64,
    /// Size of the resampled image.
    pub width: usize,
    pub height: usize,
    pub nx: usize,
    pub ny: usize,
    /// Index of this level's first patch in the flattened patch list.
    pub first: usize,
}

impl ScaleGrid {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An extracted patch, positioned in original-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center_x: f64,
    pub center_y: f64,
    pub scale: f64,
    pub scale_index: usize,
    /// Footprint `[left, left + side) x [top, top + side)` in the original image.
    pub left: f64,
    pub top: f64,
    pub side: f64,
    pub raw: Vec<f64>,
    pub zero_energy: bool,
    /// PCA-projected descriptor; empty until projected.
    pub projected: Vec<f64>,
}

impl Patch {
    /// Canonical ordering key: scale, then row, then column.
    pub fn order_key(&self) -> (usize, f64, f64) {
        (self.scale_index, self.top, self.left)
    }
}

/// Number of grid placements along an axis of length `dim`.
pub fn grid_count(dim: usize, patch_size: usize, step: usize) -> usize {
    if dim < patch_size || step == 0 {
        0
    } else {
        (dim - patch_size) / step + 1
    }
}

/// Scale levels that hold at least one patch, with their grid sizes.
pub fn patch_grid(width: usize, height: usize, params: &PatchParams) -> Vec<ScaleGrid> {
    let mut grids = Vec::new();
    let mut first = 0;
    for s in 0..params.num_scales {
        let scale = params.scale_factor.powi(s as i32);
        let w = (width as f64 / scale).floor() as usize;
        let h = (height as f64 / scale).floor() as usize;
        let nx = grid_count(w, params.patch_size, params.step);
        let ny = grid_count(h, params.patch_size, params.step);
        if nx == 0 || ny == 0 {
            continue;
        }
        grids.push(ScaleGrid {
            scale_index: s,
            scale,
            width: w,
            height: h,
            nx,
            ny,
            first,
        });
        first += nx * ny;
    }
    grids
}

/// Extracts every grid patch at every scale together with its raw descriptor.
pub fn extract_patches(
    image: &GrayImage,
    params: &PatchParams,
    descriptor: &DescriptorParams,
) -> Vec<Patch> {
    extract_patches_with_grid(image, params, descriptor).0
}

pub fn extract_patches_with_grid(
    image: &GrayImage,
    params: &PatchParams,
    descriptor: &DescriptorParams,
) -> (Vec<Patch>, Vec<ScaleGrid>) {
    let grids = patch_grid(image.width(), image.height(), params);
    let total = grids.iter().map(ScaleGrid::len).sum();
    let mut patches = Vec::with_capacity(total);
    let p = params.patch_size;
    let mut buf = vec![0.0; p * p];
    for grid in &grids {
        let level = if grid.scale_index == 0 {
            image.clone()
        } else {
            image.resample(grid.width, grid.height, grid.scale, grid.scale)
        };
        let side = p as f64 * grid.scale;
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (px, py) = (ix * params.step, iy * params.step);
                for row in 0..p {
                    let start = (py + row) * level.width() + px;
                    buf[row * p..(row + 1) * p].copy_from_slice(&level.pixels()[start..start + p]);
                }
                let desc = compute_sift_like(&buf, p, descriptor);
                let left = px as f64 * grid.scale;
                let top = py as f64 * grid.scale;
                patches.push(Patch {
                    center_x: left + side / 2.0,
                    center_y: top + side / 2.0,
                    scale: grid.scale,
                    scale_index: grid.scale_index,
                    left,
                    top,
                    side,
                    raw: desc.values,
                    zero_energy: desc.zero_energy,
                    projected: Vec::new(),
                });
            }
        }
    }
    (patches, grids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftLike {
    pub values: Vec<f64>,
    /// Set when the patch has no gradient; `values` is then all zeros.
    pub zero_energy: bool,
}

/// 4x4 spatial cells x 8 orientations of gradient magnitude, trilinearly
/// interpolated, l2-normalized, clamped at 0.2 and renormalized.
pub fn compute_sift_like(pixels: &[f64], size: usize, params: &DescriptorParams) -> SiftLike {
    assert_eq!(pixels.len(), size * size, "patch must be square");
    let mut hist = vec![0.0; DESCRIPTOR_LEN];
    let at = |r: usize, c: usize| pixels[r * size + c];
    let cells = SPATIAL_CELLS as f64;
    let mut energy = 0.0;
    for r in 0..size {
        let (up, down) = (r.saturating_sub(1), (r + 1).min(size - 1));
        let v = (r as f64 + 0.5) / size as f64 * cells - 0.5;
        for c in 0..size {
            let (left, right) = (c.saturating_sub(1), (c + 1).min(size - 1));
            let gx = (at(r, right) - at(r, left)) / 2.0;
            let gy = (at(down, c) - at(up, c)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            energy += mag;
            let u = (c as f64 + 0.5) / size as f64 * cells - 0.5;
            let mut o = gy.atan2(gx) / (2.0 * PI) * ORIENTATION_BINS as f64;
            if o < 0.0 {
                o += ORIENTATION_BINS as f64;
            }
            let o0 = o.floor();
            let fo = o - o0;
            let o0 = (o0 as usize) % ORIENTATION_BINS;
            let o1 = (o0 + 1) % ORIENTATION_BINS;
            let (u0, fu) = (u.floor(), u - u.floor());
            let (v0, fv) = (v.floor(), v - v.floor());
            for (dy, wy) in [(0i64, 1.0 - fv), (1, fv)] {
                let cy = v0 as i64 + dy;
                if !(0..SPATIAL_CELLS as i64).contains(&cy) || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0i64, 1.0 - fu), (1, fu)] {
                    let cx = u0 as i64 + dx;
                    if !(0..SPATIAL_CELLS as i64).contains(&cx) || wx == 0.0 {
                        continue;
                    }
                    let base = (cy as usize * SPATIAL_CELLS + cx as usize) * ORIENTATION_BINS;
                    let w = mag * wx * wy;
                    hist[base + o0] += w * (1.0 - fo);
                    hist[base + o1] += w * fo;
                }
            }
        }
    }
    if energy == 0.0 {
        return SiftLike {
            values: hist,
            zero_energy: true,
        };
    }
    normalize_l2(&mut hist);
    for v in hist.iter_mut() {
        *v = v.min(CLAMP);
    }
    normalize_l2(&mut hist);
    if params.root_sift {
        let l1: f64 = hist.iter().sum();
        for v in hist.iter_mut() {
            *v = (*v / l1).sqrt();
        }
    }
    SiftLike {
        values: hist,
        zero_energy: false,
    }
}

fn normalize_l2(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn grid_count_matches_small_examples() {
        assert_eq!(grid_count(24, 12, 3), 5);
        assert_eq!(grid_count(11, 12, 3), 0);
        assert_eq!(grid_count(12, 12, 3), 1);
    }

    #[test]
    fn single_scale_24px_image_has_25_patches() {
        let img = GrayImage::filled(24, 24, 0.5);
        let params = PatchParams {
            num_scales: 1,
            ..Default::default()
        };
        let patches = extract_patches(&img, &params, &DescriptorParams::default());
        assert_eq!(patches.len(), 25);
        assert_eq!(patches[0].center_x, 6.0);
        assert_eq!(patches[24].center_y, 18.0);
    }

    #[test]
    fn image_smaller_than_patch_gives_nothing() {
        let img = GrayImage::filled(11, 11, 0.5);
        assert!(extract_patches(&img, &PatchParams::default(), &DescriptorParams::default()).is_empty());
    }

    #[test]
    fn constant_patch_is_zero_energy() {
        let d = compute_sift_like(&[0.3; 144], 12, &DescriptorParams::default());
        assert!(d.zero_energy);
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edge_lands_in_horizontal_gradient_bins() {
        let mut px = vec![0.0; 144];
        for r in 0..12 {
            for c in 6..12 {
                px[r * 12 + c] = 1.0;
            }
        }
        let d = compute_sift_like(&px, 12, &DescriptorParams::default());
        assert!(!d.zero_energy);
        assert!((norm(&d.values) - 1.0).abs() < 1e-12);
        // gradient points along +x: orientation bin 0 only
        let in_bin0: f64 = d.values.iter().skip(0).step_by(8).map(|v| v * v).sum();
        assert!((in_bin0 - 1.0).abs() < 1e-12, "energy in bin 0 = {in_bin0}");
        assert!(d.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn root_sift_output_is_unit_norm() {
        let px: Vec<f64> = (0..144).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let d = compute_sift_like(&px, 12, &DescriptorParams { root_sift: true });
        assert!((norm(&d.values) - 1.0).abs() < 1e-9);
    }
}

//! Procedural detection dataset: textured noise backgrounds with elliptical
//! objects from distinct texture families and small texture fragments as
//! clutter.

use std::fs;
use std::path::{Path, PathBuf};

use fvdet_core::error::Result;
use fvdet_core::geometry::Window;
use fvdet_core::image::GrayImage;
use fvdet_core::learner::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetIndex, Object, Record};

/// Class names by family index.
pub const CLASS_NAMES: [&str; 3] = ["stripes", "checker", "rings"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Number of families in use, 1 to 3.
    pub classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_objects: usize,
    /// Texture fragments (too small to be objects) per image.
    pub distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 160,
            classes: 2,
            min_size: 60,
            max_size: 90,
            max_objects: 2,
            distractors: 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    family: usize,
    angle: f64,
    period: f64,
    phase: f64,
    mean: f64,
    amplitude: f64,
}

impl Texture {
    fn random(family: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            family,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            period: rng.gen_range(6.0..10.0),
            phase: rng.gen_range(0.0..1.0),
            mean: rng.gen_range(0.3..0.7),
            amplitude: rng.gen_range(0.15..0.3),
        }
    }

    /// Intensity at `(x, y)` relative to the center `(cx, cy)`.
    fn at(&self, x: f64, y: f64, cx: f64, cy: f64) -> f64 {
        let (dx, dy) = (x - cx, y - cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let sign = match self.family {
            0 => (u / self.period + self.phase).floor() as i64,
            1 => {
                let cell = self.period * 0.75;
                (u / cell + self.phase).floor() as i64 + (v / cell).floor() as i64
            }
            _ => ((dx * dx + dy * dy).sqrt() / (self.period * 0.6) + self.phase).floor() as i64,
        };
        if sign.rem_euclid(2) == 0 {
            self.mean + self.amplitude
        } else {
            self.mean - self.amplitude
        }
    }

    /// Whether `(x, y)` lies inside the ellipse inscribed in `w`.
    fn inside(&self, x: f64, y: f64, w: &Window) -> bool {
        let (rx, ry) = (f64::from(w.w) / 2.0, f64::from(w.h) / 2.0);
        let nx = (x - f64::from(w.x) - rx) / rx;
        let ny = (y - f64::from(w.y) - ry) / ry;
        nx * nx + ny * ny <= 1.0
    }
}

fn paint(img: &mut GrayImage, w: &Window, tex: &Texture) {
    let (cx, cy) = (f64::from(w.x) + f64::from(w.w) / 2.0, f64::from(w.y) + f64::from(w.h) / 2.0);
    for y in w.y..w.bottom() {
        for x in w.x..w.right() {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            if tex.inside(px, py, w) {
                img.set(x as usize, y as usize, tex.at(px, py, cx, cy));
            }
        }
    }
}

fn overlaps(a: &Window, b: &Window) -> bool {
    a.intersection_area(b) > 0.0
}

/// Renders one image and its ground truth `(family, box)` list.
pub fn render(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (GrayImage, Vec<(usize, Window)>) {
    let (w, h) = (spec.width, spec.height);
    // smooth background: bilinear upsampling of a coarse random grid
    let base = rng.gen_range(0.3..0.7);
    let (gw, gh) = (w / 16 + 2, h / 16 + 2);
    let coarse: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-0.15..0.15)).collect();
    let coarse = GrayImage::new(gw, gh, coarse).expect("grid size");
    let smooth = coarse.resample(w, h, (gw - 1) as f64 / w as f64, (gh - 1) as f64 / h as f64);
    let mut img = GrayImage::new(w, h, smooth.pixels().iter().map(|v| base + v).collect()).expect("size");

    let max_side = spec.max_size.min(w).min(h);
    let min_side = spec.min_size.min(max_side);
    let count = rng.gen_range(1..=spec.max_objects);
    let mut objects: Vec<(usize, Window)> = Vec::new();
    for _ in 0..count {
        let family = rng.gen_range(0..spec.classes);
        for _ in 0..100 {
            let ow = rng.gen_range(min_side..=max_side);
            let lo = ((ow as f64 / 1.3).ceil() as usize).max(min_side);
            let hi = ((ow as f64 * 1.3).floor() as usize).min(max_side);
            let oh = rng.gen_range(lo.min(hi)..=hi);
            let x = rng.gen_range(0..=w - ow);
            let y = rng.gen_range(0..=h - oh);
            let win = Window::new(x as u32, y as u32, ow as u32, oh as u32);
            if objects.iter().all(|(_, o)| !overlaps(o, &win)) {
                paint(&mut img, &win, &Texture::random(family, rng));
                objects.push((family, win));
                break;
            }
        }
    }

    for _ in 0..spec.distractors {
        let family = rng.gen_range(0..spec.classes);
        for _ in 0..20 {
            let side = rng.gen_range(12..=24usize).min(w).min(h);
            let x = rng.gen_range(0..=w - side);
            let y = rng.gen_range(0..=h - side);
            let win = Window::new(x as u32, y as u32, side as u32, side as u32);
            if objects.iter().all(|(_, o)| !overlaps(o, &win)) {
                paint(&mut img, &win, &Texture::random(family, rng));
                break;
            }
        }
    }

    for v in img.pixels_mut() {
        *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    (img, objects)
}

fn split_tag(split: &str) -> u64 {
    split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Writes `num_images` PGM images under `out_root/images` and the index to
/// `out_root/<split>.jsonl`. Identical arguments give identical files.
pub fn generate_synthetic(
    out_root: &Path,
    split: &str,
    num_images: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<DatasetIndex> {
    fs::create_dir_all(out_root.join("images"))?;
    let mut records = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split_tag(split), i as u64]));
        let (img, objects) = render(spec, &mut rng);
        let rel = PathBuf::from("images").join(format!("{split}_{i:05}.pgm"));
        img.save_pgm(&out_root.join(&rel))?;
        records.push(Record {
            image: rel,
            width: img.width(),
            height: img.height(),
            objects: objects
                .into_iter()
                .map(|(family, bbox)| Object {
                    class: CLASS_NAMES[family].to_string(),
                    bbox,
                })
                .collect(),
        });
    }
    let index = DatasetIndex {
        root: out_root.to_path_buf(),
        split: split.to_string(),
        records,
    };
    index.write_jsonl(&out_root.join(format!("{split}.jsonl")))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ingest_jsonl;

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SynthSpec::default();
        generate_synthetic(a.path(), "train", 4, 7, &spec).unwrap();
        generate_synthetic(b.path(), "train", 4, 7, &spec).unwrap();
        for name in ["train.jsonl", "images/train_00000.pgm", "images/train_00003.pgm"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn written_index_ingests_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let idx = generate_synthetic(dir.path(), "test", 6, 1, &SynthSpec::default()).unwrap();
        let back = ingest_jsonl(&dir.path().join("test.jsonl"), dir.path(), "test").unwrap();
        assert_eq!(idx, back);
        assert_eq!(idx.class_counts(), back.class_counts());
        assert!(idx.records.iter().all(|r| !r.objects.is_empty()));
    }

    #[test]
    fn candidate_windows_cover_the_objects() {
        use fvdet_core::detector::generate_candidates;
        use fvdet_core::geometry::iou;
        let spec = SynthSpec::default();
        let windows = generate_candidates(spec.width, spec.height, &crate::config::Config::default().candidate_params());
        let (mut found, mut total) = (0, 0);
        let mut per_family = [0usize; 3];
        for i in 0..60 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let (img, objects) = render(&spec, &mut rng);
            assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(!objects.is_empty() && objects.len() <= spec.max_objects);
            for (family, bbox) in &objects {
                per_family[*family] += 1;
                assert!(bbox.w >= spec.min_size as u32 && bbox.h >= spec.min_size as u32);
                assert!(bbox.right() as usize <= spec.width && bbox.bottom() as usize <= spec.height);
                total += 1;
                found += windows.iter().any(|w| iou(w, bbox) >= 0.5) as usize;
            }
        }
        assert!(found as f64 >= 0.95 * total as f64, "{found} of {total}");
        assert_eq!(per_family[2], 0);
        assert!(per_family[0] > total / 4 && per_family[1] > total / 4, "{per_family:?}");
    }
}


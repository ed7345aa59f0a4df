//! Flat `key = value` configuration with documented defaults.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown or repeated keys
//! are errors. [`Config::canonical`] renders every key in a fixed format, so
//! it doubles as the snapshot stored in model containers and as the input
//! of stage hashes.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use fvdet_core::detector::{ApMethod, CandidateParams};
use fvdet_core::encoder::Normalization;
use fvdet_core::features::{DescriptorParams, PatchParams};
use fvdet_core::learner::TrainConfig;
use fvdet_core::analysis::PatchScoreMode;

use crate::synth::SynthSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Synthetic,
    Jsonl,
    VocXml,
}

impl FromStr for DatasetFormat {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "jsonl" => Ok(Self::Jsonl),
            "voc-xml" | "voc" => Ok(Self::VocXml),
            other => bail!("unknown dataset format `{other}` (synthetic, jsonl, voc-xml)"),
        }
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Jsonl => "jsonl",
            Self::VocXml => "voc-xml",
        })
    }
}

/// Declares the config struct, its defaults and key documentation in one
/// place. Each entry: field, key, type, default, description.
macro_rules! config {
    ($($field:ident, $key:literal, $ty:ty, $default:expr, $doc:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl Config {
            /// `(key, default, description)` for every key.
            pub fn documentation() -> Vec<(&'static str, String, &'static str)> {
                let d = Self::default();
                vec![$(($key, Value::render(&d.$field), $doc),)*]
            }

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = Value::parse(value).with_context(|| format!("key `{key}`"))?;
                    })*
                    other => bail!("unknown config key `{other}`"),
                }
                Ok(())
            }

            /// Every key with its canonical value, sorted by key.
            pub fn canonical(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(m.insert($key.to_string(), Value::render(&self.$field));)*
                m
            }
        }
    };
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| anyhow!("invalid value `{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, bool, String, DatasetFormat, Normalization, PatchScoreMode);

impl Value for ApMethod {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "11point" => Ok(ApMethod::ElevenPoint),
            "allpoint" => Ok(ApMethod::AllPoint),
            other => bail!("unknown AP method `{other}` (11point, allpoint)"),
        }
    }
    fn render(&self) -> String {
        match self {
            ApMethod::ElevenPoint => "11point".into(),
            ApMethod::AllPoint => "allpoint".into(),
        }
    }
}

impl Value for Vec<f64> {
    fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| anyhow!("invalid number `{t}`: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Value for Vec<usize> {
    fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>().map_err(|e| anyhow!("invalid integer `{t}`: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

config! {
    seed, "seed", u64, 0, "Master seed; every random choice derives from it.";

    dataset_format, "dataset_format", DatasetFormat, DatasetFormat::Synthetic, "synthetic, jsonl or voc-xml.";
    dataset_root, "dataset_root", String, String::new(), "Dataset directory for jsonl and voc-xml.";
    train_split, "train_split", String, "train".into(), "Training split name.";
    test_split, "test_split", String, "test".into(), "Test split name.";
    synth_train_images, "synth_train_images", usize, 200, "Synthetic training images.";
    synth_test_images, "synth_test_images", usize, 100, "Synthetic test images.";
    synth_classes, "synth_classes", usize, 2, "Synthetic object classes (1 to 3).";
    synth_width, "synth_width", usize, 160, "Synthetic image width.";
    synth_height, "synth_height", usize, 160, "Synthetic image height.";
    synth_min_size, "synth_min_size", usize, 60, "Smallest synthetic object side.";
    synth_max_size, "synth_max_size", usize, 90, "Largest synthetic object side.";
    synth_max_objects, "synth_max_objects", usize, 2, "Objects per synthetic image (at least one).";
    synth_distractors, "synth_distractors", usize, 3, "Small texture fragments per synthetic image.";

    patch_size, "patch_size", usize, 12, "Patch side in pixels.";
    step, "step", usize, 3, "Patch grid step in pixels.";
    scales, "scales", usize, 15, "Number of pyramid scales.";
    scale_factor, "scale_factor", f64, 1.2, "Downscaling factor between scales.";
    root_sift, "root_sift", bool, false, "Square-root descriptors after normalization.";
    drop_zero_energy, "drop_zero_energy", bool, false, "Exclude flat patches from pooling.";
    sample_size, "sample_size", usize, 100_000, "Descriptors sampled from training images for PCA and GMM.";
    d, "D", usize, 64, "Projected descriptor dimension.";
    k, "K", usize, 64, "GMM components.";
    gmm_max_iter, "gmm_max_iter", usize, 200, "EM iteration cap.";
    gmm_tol, "gmm_tol", f64, 1e-5, "EM relative log-likelihood tolerance.";
    gmm_floor_ratio, "gmm_floor_ratio", f64, 1e-4, "Variance floor relative to the mean data variance.";
    r, "R", usize, 4, "Spatial pyramid side (R*R cells plus the whole window).";
    normalization, "normalization", Normalization, Normalization::Intra, "intra, ssr or raw.";

    candidates, "candidates", usize, 1500, "Candidate windows per image.";
    min_window, "min_window", usize, 32, "Smallest candidate side.";
    nms, "nms", f64, 0.3, "NMS overlap threshold.";
    ap_method, "ap_method", ApMethod, ApMethod::ElevenPoint, "11point or allpoint.";

    lambda_l2, "lambda_l2", f64, 1e-4, "SVM l2 strength.";
    svm_epochs, "svm_epochs", usize, 10, "SGD passes over the distinct examples.";
    eta0, "eta0", f64, 1.0, "Initial SGD step.";
    check_every, "check_every", usize, 100, "Steps between objective checks.";
    mining_rounds, "mining_rounds", usize, 3, "Hard-negative mining rounds.";
    negatives_per_image, "negatives_per_image", usize, 2, "Hard negatives per image and round.";
    initial_negatives, "initial_negatives", usize, 10, "Random negatives per image before mining.";
    positive_iou, "positive_iou", f64, 0.7, "Candidate overlap with a box to count as positive.";
    rda_gamma, "rda_gamma", f64, 1.0, "RDA step constant.";
    rda_iterations, "rda_iterations", usize, 2000, "RDA steps.";
    rda_batch, "rda_batch", usize, 64, "Examples per RDA step (0 for full batch).";

    analyses, "analyses", String, "prune-patches,prune-gaussians,surfaces,top-patches,parts".into(), "Analyses performed by `run`, comma-separated.";
    prune_fractions, "prune_fractions", Vec<f64>, vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0], "Patch pruning fractions.";
    patch_score_mode, "patch_score_mode", PatchScoreMode, PatchScoreMode::Normalized, "normalized or raw.";
    lambda_grid, "lambda_grid", Vec<f64>, vec![0.0, 1e-4, 3e-4, 5e-4, 1e-3], "Group-lasso strengths to sweep.";
    surface_gaussians, "surface_gaussians", Vec<usize>, vec![0], "Gaussians to draw score surfaces for.";
    surface_grid, "surface_grid", usize, 64, "Surface resolution.";
    top_patches, "top_patches", usize, 36, "Patches retrieved per (gaussian, bin).";
    part_top, "part_top", usize, 200, "Detections clustered into part appearances.";
    part_clusters, "part_clusters", usize, 6, "Part appearance clusters.";
    part_raster, "part_raster", usize, 64, "Side of the averaged part images.";
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("line {}: key `{key}` given twice", n + 1);
            }
            cfg.set(key, value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Canonical `key = value` text of every key.
    pub fn to_text(&self) -> String {
        self.canonical().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set_value(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 || self.step == 0 || self.scales == 0 || !(self.scale_factor > 1.0) {
            bail!("patch geometry needs patch_size >= 4, step >= 1, scales >= 1, scale_factor > 1");
        }
        if self.d == 0 || self.d > fvdet_core::features::DESCRIPTOR_LEN || self.k == 0 || self.r == 0 {
            bail!("need 1 <= D <= 128, K >= 1, R >= 1");
        }
        if !(0.0..=1.0).contains(&self.nms) || !(0.0..=1.0).contains(&self.positive_iou) {
            bail!("overlap thresholds must lie in [0, 1]");
        }
        if self.synth_classes == 0 || self.synth_classes > 3 || self.synth_max_objects == 0 {
            bail!("synthetic data needs 1 to 3 classes and at least one object per image");
        }
        if self.synth_min_size > self.synth_max_size || self.synth_min_size == 0 {
            bail!("synth_min_size must be positive and at most synth_max_size");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn patch_params(&self) -> PatchParams {
        PatchParams {
            patch_size: self.patch_size,
            step: self.step,
            num_scales: self.scales,
            scale_factor: self.scale_factor,
        }
    }

    pub fn descriptor_params(&self) -> DescriptorParams {
        DescriptorParams {
            root_sift: self.root_sift,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            width: self.synth_width,
            height: self.synth_height,
            classes: self.synth_classes,
            min_size: self.synth_min_size,
            max_size: self.synth_max_size,
            max_objects: self.synth_max_objects,
            distractors: self.synth_distractors,
        }
    }

    pub fn candidate_params(&self) -> CandidateParams {
        CandidateParams {
            max_candidates: self.candidates,
            min_side: self.min_window as u32,
            ..CandidateParams::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_l2: self.lambda_l2,
            mining_rounds: self.mining_rounds,
            negatives_per_image: self.negatives_per_image,
            initial_negatives_per_image: self.initial_negatives,
            positive_iou: self.positive_iou,
            rda_gamma: self.rda_gamma,
            rda_iterations: self.rda_iterations,
            rda_batch: self.rda_batch,
            svm_epochs: self.svm_epochs,
            eta0: self.eta0,
            check_every: self.check_every,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = Config::parse("# comment\nK = 16  # fewer\nD=32\nlambda_grid = 0, 0.001\n").unwrap();
        assert_eq!((cfg.k, cfg.d), (16, 32));
        assert_eq!(cfg.lambda_grid, vec![0.0, 0.001]);
    }

    #[test]
    fn rejects_unknown_repeated_and_invalid() {
        assert!(Config::parse("bogus = 1").is_err());
        assert!(Config::parse("K = 1\nK = 2").is_err());
        assert!(Config::parse("K = many").is_err());
        assert!(Config::parse("D = 500").is_err());
        assert!(Config::parse("no equals sign").is_err());
    }

    #[test]
    fn documented_defaults_match_the_standard_setup() {
        let m = Config::default().canonical();
        for (k, v) in [
            ("patch_size", "12"),
            ("step", "3"),
            ("scales", "15"),
            ("scale_factor", "1.2"),
            ("D", "64"),
            ("K", "64"),
            ("R", "4"),
            ("nms", "0.3"),
            ("mining_rounds", "3"),
            ("negatives_per_image", "2"),
            ("candidates", "1500"),
        ] {
            assert_eq!(m[k], v, "{k}");
        }
    }
}

//! Staged experiment runner with hash-keyed caching.
//!
//! Stages run in dependency order: data, sample, pca, gmm, train, detect,
//! eval, then the analyses. Each stage's hash covers the config keys it
//! reads and the hashes of its upstream stages; `manifest.json` records the
//! hash and artifacts of every completed stage, and a stage whose recorded
//! hash matches (with all artifacts present) is skipped. Patch encodings are
//! recomputed in process when a computed stage needs them and are never
//! written to disk.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fvdet_core::analysis::{
    cluster_part_appearances, gaussian_members, prune_gaussians_experiment, prune_patches_experiment, score_surface,
    top_patches,
};
use fvdet_core::codebook::{fit_gmm_with, GmmParams};
use fvdet_core::detector::{
    detect_all, evaluate_ap, evaluate_models, generate_candidates, ApReport, CandidateParams, Detection,
    EncodedImage, GroundTruth, ImageDetection,
};
use fvdet_core::encoding::FeaturePipeline;
use fvdet_core::features::{extract_patches, DESCRIPTOR_LEN};
use fvdet_core::geometry::Window;
use fvdet_core::image::GrayImage;
use fvdet_core::learner::{derive_seed, train_with_mining, FeatureStore, MiningRun, WindowKey};
use fvdet_core::model::LinearModel;
use fvdet_core::pca::fit_pca;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, DatasetFormat};
use crate::container::{self, ModelBundle};
use crate::dataset::{ingest_jsonl, ingest_voc, DatasetIndex};
use crate::synth::generate_synthetic;

const DATA_KEYS: &[&str] = &[
    "seed",
    "dataset_format",
    "dataset_root",
    "train_split",
    "test_split",
    "synth_train_images",
    "synth_test_images",
    "synth_classes",
    "synth_width",
    "synth_height",
    "synth_min_size",
    "synth_max_size",
    "synth_max_objects",
    "synth_distractors",
];
const SAMPLE_KEYS: &[&str] = &[
    "seed",
    "patch_size",
    "step",
    "scales",
    "scale_factor",
    "root_sift",
    "drop_zero_energy",
    "sample_size",
];
const PCA_KEYS: &[&str] = &["D"];
const GMM_KEYS: &[&str] = &["seed", "K", "gmm_max_iter", "gmm_tol", "gmm_floor_ratio"];
const TRAIN_KEYS: &[&str] = &[
    "seed",
    "R",
    "normalization",
    "candidates",
    "min_window",
    "lambda_l2",
    "svm_epochs",
    "eta0",
    "check_every",
    "mining_rounds",
    "negatives_per_image",
    "initial_negatives",
    "positive_iou",
];
const DETECT_KEYS: &[&str] = &["nms"];
const EVAL_KEYS: &[&str] = &["ap_method"];
const PRUNE_PATCHES_KEYS: &[&str] = &["prune_fractions", "patch_score_mode", "nms", "ap_method"];
const PRUNE_GAUSSIANS_KEYS: &[&str] = &["lambda_grid", "rda_gamma", "rda_iterations", "rda_batch", "nms", "ap_method"];
const SURFACE_KEYS: &[&str] = &["surface_gaussians", "surface_grid"];
const TOP_PATCH_KEYS: &[&str] = &["surface_gaussians", "top_patches"];
const PART_KEYS: &[&str] = &["seed", "part_top", "part_clusters", "part_raster", "nms"];

/// Analyses accepted by [`Pipeline::analyze`].
pub const ANALYSES: [&str; 5] = ["prune-patches", "prune-gaussians", "surfaces", "top-patches", "parts"];

const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";
const TILE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Cached,
    Computed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageEntry {
    hash: String,
    artifacts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageEntry>,
}

/// Exclusive ownership of an output directory for the life of the value.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        fs::OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "{} exists: another run owns this directory (delete the file if no run is active)",
                path.display()
            )
        })?;
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn stage_hash(cfg: &Config, stage: &str, keys: &[&str], upstream: &[(&str, &str)]) -> String {
    let canonical = cfg.canonical();
    let mut text = format!("fvdet stage {stage}\n");
    for k in keys {
        text.push_str(&format!("{k}={}\n", canonical[*k]));
    }
    for (name, hash) in upstream {
        text.push_str(&format!("after {name} {hash}\n"));
    }
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn strings<const N: usize>(v: [&str; N]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Maps a record's objects to ground truth, dropping unknown classes.
fn ground_truth(index: &DatasetIndex, classes: &[String]) -> Vec<Vec<GroundTruth>> {
    index
        .records
        .iter()
        .map(|r| {
            r.objects
                .iter()
                .filter_map(|o| {
                    let class_id = classes.iter().position(|c| *c == o.class);
                    if class_id.is_none() {
                        log::warn!("{}: class `{}` absent from training; ignored", r.image.display(), o.class);
                    }
                    class_id.map(|class_id| GroundTruth { class_id, window: o.bbox })
                })
                .collect()
        })
        .collect()
}

/// Encodes every image of `index` and generates its candidates.
pub fn encode_index(
    index: &DatasetIndex,
    classes: &[String],
    pipeline: &FeaturePipeline,
    candidates: &CandidateParams,
) -> Result<Vec<EncodedImage>> {
    let gt = ground_truth(index, classes);
    (0..index.records.len())
        .into_par_iter()
        .map(|i| {
            let img = index.load_image(i)?;
            Ok(EncodedImage {
                encoding: pipeline.encode_image(&img),
                objects: gt[i].clone(),
                candidates: generate_candidates(img.width(), img.height(), candidates),
            })
        })
        .collect()
}

/// Writes detections as `image_id,class,x,y,w,h,score`.
pub fn write_detections_to<W: std::io::Write>(
    out: W,
    index: &DatasetIndex,
    classes: &[String],
    dets: &[ImageDetection],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "class", "x", "y", "w", "h", "score"])?;
    for d in dets {
        let b = d.detection.window;
        w.write_record([
            index.records[d.image].image.to_string_lossy().into_owned(),
            classes[d.detection.class_id].clone(),
            b.x.to_string(),
            b.y.to_string(),
            b.w.to_string(),
            b.h.to_string(),
            d.detection.score.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_detections(path: &Path, index: &DatasetIndex, classes: &[String], dets: &[ImageDetection]) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_detections_to(std::io::BufWriter::new(f), index, classes, dets)
}

/// Reads a detections file written by [`write_detections`].
pub fn read_detections(path: &Path, index: &DatasetIndex, classes: &[String]) -> Result<Vec<ImageDetection>> {
    let ids: HashMap<String, usize> = index
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image.to_string_lossy().into_owned(), i))
        .collect();
    let mut out = Vec::new();
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        let at = || format!("{} row {}", path.display(), n + 2);
        let image = *ids.get(&rec[0]).ok_or_else(|| anyhow!("{}: unknown image `{}`", at(), &rec[0]))?;
        let class_id = classes
            .iter()
            .position(|c| *c == rec[1])
            .ok_or_else(|| anyhow!("{}: unknown class `{}`", at(), &rec[1]))?;
        let num = |i: usize| rec[i].parse::<u32>().with_context(at);
        out.push(ImageDetection {
            image,
            detection: Detection {
                window: Window::new(num(2)?, num(3)?, num(4)?, num(5)?),
                class_id,
                score: rec[6].parse().with_context(at)?,
                degenerate: false,
            },
        });
    }
    Ok(out)
}

fn ap_rows(report: &ApReport, classes: &[String]) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = classes
        .iter()
        .zip(&report.per_class)
        .map(|(c, ap)| vec![c.clone(), fmt_opt(*ap)])
        .collect();
    rows.push(vec!["mAP".into(), report.map.to_string()]);
    rows
}

/// Min-max scales `values` into a `w x h` image.
fn heatmap(w: usize, h: usize, values: &[f64]) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    GrayImage::new(w, h, values.iter().map(|v| (v - lo) / span).collect()).expect("grid size")
}

/// Places `tiles` (all `tile x tile`) on a grid with `cols` columns.
fn mosaic(tiles: &[Option<GrayImage>], cols: usize, tile: usize) -> GrayImage {
    let rows = tiles.len().div_ceil(cols).max(1);
    let (w, h) = (cols * tile, rows * tile);
    let mut out = GrayImage::filled(w, h, 0.0);
    for (i, t) in tiles.iter().enumerate() {
        let Some(t) = t else { continue };
        let (ox, oy) = ((i % cols) * tile, (i / cols) * tile);
        for y in 0..tile {
            for x in 0..tile {
                out.set(ox + x, oy + y, t.get(x, y));
            }
        }
    }
    out
}

/// The square patch footprint clipped to the image, as a window.
fn footprint(left: f64, top: f64, side: f64, width: usize, height: usize) -> Option<Window> {
    let x0 = left.floor().max(0.0) as u32;
    let y0 = top.floor().max(0.0) as u32;
    let x1 = ((left + side).ceil() as u32).min(width as u32);
    let y1 = ((top + side).ceil() as u32).min(height as u32);
    (x1 > x0 && y1 > y0).then(|| Window::new(x0, y0, x1 - x0, y1 - y0))
}

/// One run over an output directory.
pub struct Pipeline {
    out: PathBuf,
    cfg: Config,
    manifest: Manifest,
    hashes: HashMap<&'static str, String>,
    events: Vec<(String, Outcome)>,
    indices: Option<(DatasetIndex, DatasetIndex)>,
    bundle: Option<ModelBundle>,
    train_encoded: Option<Vec<EncodedImage>>,
    test_encoded: Option<Vec<EncodedImage>>,
    _lock: OutputLock,
}

impl Pipeline {
    /// Takes the directory lock and reads any existing manifest.
    pub fn open(out: &Path, cfg: Config) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let lock = OutputLock::acquire(out)?;
        let manifest_path = out.join(MANIFEST);
        let manifest = if manifest_path.is_file() {
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)
                .with_context(|| format!("parsing {}", manifest_path.display()))?
        } else {
            Manifest::default()
        };
        Ok(Self {
            out: out.to_path_buf(),
            cfg,
            manifest,
            hashes: HashMap::new(),
            events: Vec::new(),
            indices: None,
            bundle: None,
            train_encoded: None,
            test_encoded: None,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Every stage visited so far and whether it was recomputed.
    pub fn events(&self) -> &[(String, Outcome)] {
        &self.events
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }

    /// Runs `compute` unless the manifest holds `hash` for `name` and every
    /// recorded artifact exists. `compute` returns its artifact paths
    /// relative to the output directory.
    fn stage(
        &mut self,
        name: &'static str,
        hash: String,
        compute: impl FnOnce(&mut Self) -> Result<Vec<String>>,
    ) -> Result<String> {
        if let Some(h) = self.hashes.get(name) {
            return Ok(h.clone());
        }
        let fresh = self
            .manifest
            .stages
            .get(name)
            .is_some_and(|e| e.hash == hash && e.artifacts.iter().all(|a| self.out.join(a).exists()));
        if fresh {
            log::info!("stage {name}: cached");
            self.events.push((name.to_string(), Outcome::Cached));
        } else {
            log::info!("stage {name}: computing");
            self.manifest.stages.remove(name);
            self.save_manifest()?;
            let artifacts = compute(self).with_context(|| format!("stage `{name}` failed"))?;
            self.manifest.stages.insert(
                name.to_string(),
                StageEntry {
                    hash: hash.clone(),
                    artifacts,
                },
            );
            self.save_manifest()?;
            self.events.push((name.to_string(), Outcome::Computed));
        }
        self.hashes.insert(name, hash.clone());
        Ok(hash)
    }

    // ---- data --------------------------------------------------------

    pub fn data(&mut self) -> Result<String> {
        let hash = stage_hash(&self.cfg, "data", DATA_KEYS, &[]);
        self.stage("data", hash, |p| {
            let cfg = p.cfg.clone();
            let dir = p.path("data");
            fs::create_dir_all(&dir)?;
            let (train, test, root) = match cfg.dataset_format {
                DatasetFormat::Synthetic => {
                    let spec = cfg.synth_spec();
                    let train = generate_synthetic(&dir, &cfg.train_split, cfg.synth_train_images, cfg.seed, &spec)?;
                    let test = generate_synthetic(&dir, &cfg.test_split, cfg.synth_test_images, cfg.seed, &spec)?;
                    (train, test, ".".to_string())
                }
                DatasetFormat::Jsonl | DatasetFormat::VocXml => {
                    if cfg.dataset_root.is_empty() {
                        bail!("dataset_root must be set for {}", cfg.dataset_format);
                    }
                    let root = fs::canonicalize(&cfg.dataset_root)
                        .with_context(|| format!("dataset_root {}", cfg.dataset_root))?;
                    let load = |split: &str| match cfg.dataset_format {
                        DatasetFormat::Jsonl => ingest_jsonl(&root.join(format!("{split}.jsonl")), &root, split),
                        _ => ingest_voc(&root, split),
                    };
                    let (train, test) = (load(&cfg.train_split)?, load(&cfg.test_split)?);
                    train.write_jsonl(&dir.join("train.jsonl"))?;
                    test.write_jsonl(&dir.join("test.jsonl"))?;
                    (train, test, root.to_string_lossy().into_owned())
                }
            };
            if cfg.dataset_format == DatasetFormat::Synthetic {
                // the generator names its index files after the splits
                fs::write(dir.join("train.jsonl"), train.to_jsonl())?;
                fs::write(dir.join("test.jsonl"), test.to_jsonl())?;
            }
            fs::write(dir.join("root.txt"), format!("{root}\n"))?;
            if train.class_names().is_empty() {
                bail!("the training split has no annotated objects");
            }
            p.indices = Some((train, test));
            Ok(strings(["data/train.jsonl", "data/test.jsonl", "data/root.txt"]))
        })
    }

    /// Training and test indices.
    pub fn indices(&mut self) -> Result<&(DatasetIndex, DatasetIndex)> {
        self.data()?;
        if self.indices.is_none() {
            let dir = self.path("data");
            let root_text = fs::read_to_string(dir.join("root.txt"))?;
            let root = dir.join(root_text.trim());
            let train = ingest_jsonl(&dir.join("train.jsonl"), &root, &self.cfg.train_split)?;
            let test = ingest_jsonl(&dir.join("test.jsonl"), &root, &self.cfg.test_split)?;
            self.indices = Some((train, test));
        }
        Ok(self.indices.as_ref().expect("set above"))
    }

    pub fn class_names(&mut self) -> Result<Vec<String>> {
        Ok(self.indices()?.0.class_names())
    }

    // ---- codebook ----------------------------------------------------

    /// Descriptors sampled evenly over the training images.
    pub fn sample(&mut self) -> Result<String> {
        let data = self.data()?;
        let hash = stage_hash(&self.cfg, "sample", SAMPLE_KEYS, &[("data", &data)]);
        self.stage("sample", hash, |p| {
            let cfg = p.cfg.clone();
            let (train, _) = p.indices()?;
            let n = train.records.len();
            if n == 0 {
                bail!("no training images");
            }
            let per_image = cfg.sample_size.div_ceil(n);
            let per: Vec<Vec<Vec<f64>>> = (0..n)
                .into_par_iter()
                .map(|i| -> Result<Vec<Vec<f64>>> {
                    let img = train.load_image(i)?;
                    let mut patches = extract_patches(&img, &cfg.patch_params(), &cfg.descriptor_params());
                    if cfg.drop_zero_energy {
                        patches.retain(|p| !p.zero_energy);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x736d_706c, i as u64]));
                    let mut chosen = rand::seq::index::sample(&mut rng, patches.len(), per_image.min(patches.len()))
                        .into_vec();
                    chosen.sort_unstable();
                    Ok(chosen.into_iter().map(|j| std::mem::take(&mut patches[j].raw)).collect())
                })
                .collect::<Result<_>>()?;
            let mut rows: Vec<Vec<f64>> = per.into_iter().flatten().collect();
            rows.truncate(cfg.sample_size);
            container::save_samples(&p.path("samples.bin"), &rows, DESCRIPTOR_LEN)?;
            Ok(strings(["samples.bin"]))
        })
    }

    pub fn pca(&mut self) -> Result<String> {
        let sample = self.sample()?;
        let hash = stage_hash(&self.cfg, "pca", PCA_KEYS, &[("sample", &sample)]);
        self.stage("pca", hash, |p| {
            let rows = container::load_samples(&p.path("samples.bin"))?;
            let pca = container::round_pca(&fit_pca(&rows, p.cfg.d)?)?;
            container::save_pca(&p.path("pca.bin"), &pca)?;
            Ok(strings(["pca.bin"]))
        })
    }

    pub fn gmm(&mut self) -> Result<String> {
        let pca = self.pca()?;
        let hash = stage_hash(&self.cfg, "gmm", GMM_KEYS, &[("pca", &pca)]);
        self.stage("gmm", hash, |p| {
            let proj = container::load_pca(&p.path("pca.bin"))?;
            let rows: Vec<Vec<f64>> = container::load_samples(&p.path("samples.bin"))?
                .par_iter()
                .map(|r| proj.project(r))
                .collect();
            let params = GmmParams {
                max_iter: p.cfg.gmm_max_iter,
                tol: p.cfg.gmm_tol,
                floor_ratio: p.cfg.gmm_floor_ratio,
            };
            let fit = fit_gmm_with(&rows, p.cfg.k, derive_seed(p.cfg.seed, &[0x676d_6d]), &params)?;
            container::save_gmm(&p.path("gmm.bin"), &container::round_gmm(&fit.model)?)?;
            let log: Vec<Vec<String>> = fit
                .log_likelihoods
                .iter()
                .enumerate()
                .map(|(i, ll)| vec![i.to_string(), ll.to_string()])
                .collect();
            write_csv(&p.path("gmm_log.csv"), &strings(["iteration", "mean_log_likelihood"]), &log)?;
            Ok(strings(["gmm.bin", "gmm_log.csv"]))
        })
    }

    /// The feature pipeline from the cached PCA and GMM.
    pub fn feature_pipeline(&mut self) -> Result<FeaturePipeline> {
        self.gmm()?;
        Ok(FeaturePipeline {
            patch: self.cfg.patch_params(),
            descriptor: self.cfg.descriptor_params(),
            drop_zero_energy: self.cfg.drop_zero_energy,
            pca: container::load_pca(&self.path("pca.bin"))?,
            gmm: container::load_gmm(&self.path("gmm.bin"))?,
            pyramid: self.cfg.r,
            normalization: self.cfg.normalization,
        })
    }

    pub fn train_encoded(&mut self) -> Result<&[EncodedImage]> {
        if self.train_encoded.is_none() {
            let fp = self.feature_pipeline()?;
            let classes = self.class_names()?;
            let cand = self.cfg.candidate_params();
            let enc = encode_index(&self.indices()?.0, &classes, &fp, &cand)?;
            self.train_encoded = Some(enc);
        }
        Ok(self.train_encoded.as_deref().expect("set above"))
    }

    pub fn test_encoded(&mut self) -> Result<&[EncodedImage]> {
        if self.test_encoded.is_none() {
            let fp = self.feature_pipeline()?;
            let classes = self.class_names()?;
            let cand = self.cfg.candidate_params();
            let enc = encode_index(&self.indices()?.1, &classes, &fp, &cand)?;
            self.test_encoded = Some(enc);
        }
        Ok(self.test_encoded.as_deref().expect("set above"))
    }

    // ---- training and detection ---------------------------------------

    fn train_hash_inputs(&mut self) -> Result<String> {
        let gmm = self.gmm()?;
        let data = self.data()?;
        Ok(stage_hash(&self.cfg, "train", TRAIN_KEYS, &[("gmm", &gmm), ("data", &data)]))
    }

    /// Keys whose values must agree between a stored model and the config.
    pub fn model_keys() -> Vec<&'static str> {
        let mut keys: Vec<&str> = [DATA_KEYS, SAMPLE_KEYS, PCA_KEYS, GMM_KEYS, TRAIN_KEYS].concat();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn train(&mut self) -> Result<String> {
        let hash = self.train_hash_inputs()?;
        self.stage("train", hash, |p| {
            let classes = p.class_names()?;
            let tc = p.cfg.train_config();
            let run = train_with_mining(p.train_encoded()?, classes.len(), &tc)?;
            let fp = p.feature_pipeline()?;
            let mut artifacts = Vec::new();
            for (round, models) in run.history.iter().enumerate() {
                let b = ModelBundle::new(p.cfg.clone(), classes.clone(), &fp.pca, &fp.gmm, models)?;
                let name = format!("model_round{round}.fvd");
                b.save(&p.path(&name))?;
                artifacts.push(name);
            }
            let bundle = ModelBundle::new(p.cfg.clone(), classes.clone(), &fp.pca, &fp.gmm, &run.models)?;
            bundle.save(&p.path("model.fvd"))?;
            artifacts.push("model.fvd".into());

            let mut progress = Vec::new();
            for (c, rows) in run.progress.iter().enumerate() {
                for r in rows {
                    progress.push(vec![
                        classes[c].clone(),
                        r.iteration.to_string(),
                        r.objective.to_string(),
                        r.active_groups.to_string(),
                    ]);
                }
            }
            write_csv(
                &p.path("training_progress.csv"),
                &strings(["class", "iteration", "objective", "active_groups"]),
                &progress,
            )?;
            let mut pools = Vec::new();
            for c in 0..classes.len() {
                for (kind, keys) in [("positive", &run.positive_keys[c]), ("negative", &run.negative_keys[c])] {
                    for (image, w) in keys.iter() {
                        pools.push(vec![
                            classes[c].clone(),
                            kind.to_string(),
                            image.to_string(),
                            w.x.to_string(),
                            w.y.to_string(),
                            w.w.to_string(),
                            w.h.to_string(),
                        ]);
                    }
                }
            }
            write_csv(
                &p.path("training_pools.csv"),
                &strings(["class", "kind", "image", "x", "y", "w", "h"]),
                &pools,
            )?;
            let sizes: Vec<Vec<String>> = run
                .pool_sizes
                .iter()
                .enumerate()
                .flat_map(|(round, per_class)| {
                    per_class
                        .iter()
                        .enumerate()
                        .map(move |(c, n)| vec![round.to_string(), c.to_string(), n.to_string()])
                })
                .map(|mut r| {
                    let c: usize = r[1].parse().expect("index");
                    r[1] = classes[c].clone();
                    r
                })
                .collect();
            write_csv(&p.path("mining_pools.csv"), &strings(["round", "class", "negatives"]), &sizes)?;
            artifacts.extend(strings(["training_progress.csv", "training_pools.csv", "mining_pools.csv"]));
            p.bundle = Some(bundle);
            Ok(artifacts)
        })
    }

    /// Loads a stored bundle and checks its config snapshot against ours.
    fn load_bundle(&self, name: &str) -> Result<ModelBundle> {
        let b = ModelBundle::load(&self.path(name))?;
        let (ours, theirs) = (self.cfg.canonical(), b.config.canonical());
        for k in Self::model_keys() {
            if ours[k] != theirs[k] {
                bail!("{name} was trained with {k} = {} but the config has {}", theirs[k], ours[k]);
            }
        }
        Ok(b)
    }

    pub fn bundle(&mut self) -> Result<&ModelBundle> {
        self.train()?;
        if self.bundle.is_none() {
            self.bundle = Some(self.load_bundle("model.fvd")?);
        }
        Ok(self.bundle.as_ref().expect("set above"))
    }

    pub fn detect(&mut self) -> Result<String> {
        let train = self.train()?;
        let hash = stage_hash(&self.cfg, "detect", DETECT_KEYS, &[("train", &train)]);
        self.stage("detect", hash, |p| {
            let models = p.bundle()?.models.clone();
            let classes = p.class_names()?;
            let refs: Vec<&LinearModel> = models.iter().collect();
            let nms = p.cfg.nms;
            let dets = detect_all(p.test_encoded()?, &refs, nms, true);
            let path = p.path("detections.csv");
            let (_, test) = p.indices()?;
            write_detections(&path, test, &classes, &dets)?;
            Ok(strings(["detections.csv"]))
        })
    }

    pub fn eval(&mut self) -> Result<String> {
        let detect = self.detect()?;
        let hash = stage_hash(&self.cfg, "eval", EVAL_KEYS, &[("detect", &detect)]);
        self.stage("eval", hash, |p| {
            let classes = p.class_names()?;
            let method = p.cfg.ap_method;
            let path = p.path("detections.csv");
            let (_, test) = p.indices()?;
            let dets = read_detections(&path, test, &classes)?;
            let gt = ground_truth(test, &classes);
            let report = evaluate_ap(&dets, &gt, classes.len(), 0.5, method);
            write_csv(&p.path("ap_report.csv"), &strings(["class", "ap"]), &ap_rows(&report, &classes))?;

            let mut rows = Vec::new();
            for round in 0..=p.cfg.mining_rounds {
                let b = p.load_bundle(&format!("model_round{round}.fvd"))?;
                let refs: Vec<&LinearModel> = b.models.iter().collect();
                let nms = p.cfg.nms;
                let r = evaluate_models(p.test_encoded()?, &refs, classes.len(), nms, method);
                let mut row = vec![round.to_string()];
                row.extend(r.per_class.iter().map(|a| fmt_opt(*a)));
                row.push(r.map.to_string());
                rows.push(row);
            }
            let mut header = vec!["round".to_string()];
            header.extend(classes.iter().map(|c| format!("ap_{c}")));
            header.push("map".into());
            write_csv(&p.path("mining_ap.csv"), &header, &rows)?;
            Ok(strings(["ap_report.csv", "mining_ap.csv"]))
        })
    }

    /// Runs everything through evaluation plus the analyses listed in the
    /// `analyses` key.
    pub fn run_all(&mut self) -> Result<()> {
        self.eval()?;
        let list = self.cfg.analyses.clone();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            self.analyze(name)?;
        }
        Ok(())
    }

    // ---- analyses ----------------------------------------------------

    pub fn analyze(&mut self, name: &str) -> Result<String> {
        match name {
            "prune-patches" => self.prune_patches(),
            "prune-gaussians" => self.prune_gaussians(),
            "surfaces" => self.surfaces(),
            "top-patches" => self.top_patches(),
            "parts" => self.parts(),
            other => bail!("unknown analysis `{other}` ({})", ANALYSES.join(", ")),
        }
    }

    fn analysis_hash(&mut self, name: &str, keys: &[&str]) -> Result<String> {
        let train = self.train()?;
        Ok(stage_hash(&self.cfg, name, keys, &[("train", &train)]))
    }

    fn prune_patches(&mut self) -> Result<String> {
        let hash = self.analysis_hash("prune-patches", PRUNE_PATCHES_KEYS)?;
        self.stage("prune-patches", hash, |p| {
            let models = p.bundle()?.models.clone();
            let classes = p.class_names()?;
            let refs: Vec<&LinearModel> = models.iter().collect();
            let cfg = p.cfg.clone();
            let curve = prune_patches_experiment(
                p.test_encoded()?,
                &refs,
                classes.len(),
                &cfg.prune_fractions,
                cfg.patch_score_mode,
                cfg.nms,
                cfg.ap_method,
            )?;
            let mut header = strings(["fraction", "map", "all_bias"]);
            header.extend(classes.iter().map(|c| format!("ap_{c}")));
            let rows: Vec<Vec<String>> = (0..curve.fractions.len())
                .map(|i| {
                    let mut row = vec![
                        curve.fractions[i].to_string(),
                        curve.ap_values[i].to_string(),
                        curve.all_bias[i].to_string(),
                    ];
                    row.extend(curve.per_class[i].iter().map(|a| fmt_opt(*a)));
                    row
                })
                .collect();
            write_csv(&p.path("prune_patches.csv"), &header, &rows)?;
            Ok(strings(["prune_patches.csv"]))
        })
    }

    /// Rebuilds the baseline training pools from `training_pools.csv`.
    fn baseline_run(&mut self) -> Result<MiningRun> {
        let classes = self.class_names()?;
        let models = self.bundle()?.models.clone();
        let path = self.path("training_pools.csv");
        let mut positive_keys: Vec<Vec<WindowKey>> = vec![Vec::new(); classes.len()];
        let mut negative_keys: Vec<Vec<WindowKey>> = vec![Vec::new(); classes.len()];
        let mut reader = csv::Reader::from_path(&path)?;
        for rec in reader.records() {
            let rec = rec?;
            let c = classes
                .iter()
                .position(|n| *n == rec[0])
                .ok_or_else(|| anyhow!("{}: unknown class `{}`", path.display(), &rec[0]))?;
            let num = |i: usize| rec[i].parse::<u32>().with_context(|| format!("{}", path.display()));
            let key = (rec[2].parse::<usize>()?, Window::new(num(3)?, num(4)?, num(5)?, num(6)?));
            match &rec[1] {
                "positive" => positive_keys[c].push(key),
                _ => negative_keys[c].push(key),
            }
        }
        let images = self.train_encoded()?;
        let layout = models[0].layout;
        let mut store = FeatureStore::new(layout.len());
        let all: Vec<WindowKey> = positive_keys.iter().chain(&negative_keys).flatten().copied().collect();
        store.ensure(images, &all);
        Ok(MiningRun {
            positives: positive_keys.iter().map(Vec::len).collect(),
            positive_keys,
            negative_keys,
            store,
            models,
            history: Vec::new(),
            pool_sizes: Vec::new(),
            progress: Vec::new(),
        })
    }

    fn prune_gaussians(&mut self) -> Result<String> {
        let hash = self.analysis_hash("prune-gaussians", PRUNE_GAUSSIANS_KEYS)?;
        self.stage("prune-gaussians", hash, |p| {
            let classes = p.class_names()?;
            let baseline = p.baseline_run()?;
            let cfg = p.cfg.clone();
            let tc = cfg.train_config();
            p.train_encoded()?;
            p.test_encoded()?;
            let (train, test) = (
                p.train_encoded.as_deref().expect("encoded"),
                p.test_encoded.as_deref().expect("encoded"),
            );
            let points = prune_gaussians_experiment(
                train,
                test,
                classes.len(),
                &baseline,
                &cfg.lambda_grid,
                &tc,
                cfg.nms,
                cfg.ap_method,
            )?;
            let mut header = strings(["lambda", "support_fraction", "raw_map", "finetuned_map"]);
            for c in &classes {
                header.extend([format!("support_{c}"), format!("raw_ap_{c}"), format!("finetuned_ap_{c}")]);
            }
            let rows: Vec<Vec<String>> = points
                .iter()
                .map(|pt| {
                    let mut row = vec![
                        pt.lambda.to_string(),
                        pt.support_fraction.to_string(),
                        pt.raw.map.to_string(),
                        pt.finetuned.map.to_string(),
                    ];
                    for c in 0..classes.len() {
                        row.extend([
                            pt.class_fractions[c].to_string(),
                            fmt_opt(pt.raw.per_class[c]),
                            fmt_opt(pt.finetuned.per_class[c]),
                        ]);
                    }
                    row
                })
                .collect();
            write_csv(&p.path("prune_gaussians.csv"), &header, &rows)?;
            let support: Vec<Vec<String>> = points
                .iter()
                .flat_map(|pt| {
                    pt.active.iter().zip(&classes).map(|(mask, c)| {
                        let bits: String = mask.iter().map(|&a| if a { '1' } else { '0' }).collect();
                        vec![pt.lambda.to_string(), c.clone(), bits]
                    })
                })
                .collect();
            write_csv(
                &p.path("prune_gaussians_support.csv"),
                &strings(["lambda", "class", "active_groups"]),
                &support,
            )?;
            Ok(strings(["prune_gaussians.csv", "prune_gaussians_support.csv"]))
        })
    }

    fn check_gaussians(&self) -> Result<Vec<usize>> {
        let g = self.cfg.surface_gaussians.clone();
        if let Some(bad) = g.iter().find(|&&k| k >= self.cfg.k) {
            bail!("surface gaussian {bad} out of range for K = {}", self.cfg.k);
        }
        Ok(g)
    }

    fn surfaces(&mut self) -> Result<String> {
        let hash = self.analysis_hash("surfaces", SURFACE_KEYS)?;
        self.stage("surfaces", hash, |p| {
            let dir = p.out.clone();
            let gaussians = p.check_gaussians()?;
            let bundle = p.bundle()?.clone();
            let classes = p.class_names()?;
            let grid = p.cfg.surface_grid;
            fs::create_dir_all(dir.join("surfaces"))?;
            let images = p.train_encoded()?;
            let mut artifacts = Vec::new();
            for g in gaussians {
                let members = gaussian_members(images, g);
                let mut rows = Vec::new();
                for (c, model) in bundle.models.iter().enumerate() {
                    for bin in 0..model.layout.bins() {
                        let s = match score_surface(&members, &bundle.gmm, model, g, bin, grid) {
                            Ok(s) => s,
                            Err(e) => {
                                log::warn!("surface for gaussian {g}: {e}");
                                continue;
                            }
                        };
                        for row in 0..s.grid_size {
                            for col in 0..s.grid_size {
                                let [u, v] = s.coords(row, col);
                                rows.push(vec![
                                    classes[c].clone(),
                                    bin.to_string(),
                                    row.to_string(),
                                    col.to_string(),
                                    u.to_string(),
                                    v.to_string(),
                                    s.value(row, col).to_string(),
                                ]);
                            }
                        }
                        let name = format!("surfaces/g{g}_{}_b{bin}.pgm", classes[c]);
                        heatmap(s.grid_size, s.grid_size, &s.values).save_pgm(&dir.join(&name))?;
                        artifacts.push(name);
                    }
                }
                let name = format!("surfaces/g{g}.csv");
                write_csv(
                    &dir.join(&name),
                    &strings(["class", "bin", "row", "col", "u", "v", "score"]),
                    &rows,
                )?;
                artifacts.push(name);
            }
            Ok(artifacts)
        })
    }

    fn top_patches(&mut self) -> Result<String> {
        let hash = self.analysis_hash("top-patches", TOP_PATCH_KEYS)?;
        self.stage("top-patches", hash, |p| {
            let dir = p.out.clone();
            let gaussians = p.check_gaussians()?;
            let models = p.bundle()?.models.clone();
            let classes = p.class_names()?;
            let n = p.cfg.top_patches;
            fs::create_dir_all(dir.join("top_patches"))?;
            let index = p.indices()?.0.clone();
            let images = p.train_encoded()?;
            let mut pixels: HashMap<usize, GrayImage> = HashMap::new();
            let mut artifacts = Vec::new();
            for g in gaussians {
                for (c, model) in models.iter().enumerate() {
                    let mut rows = Vec::new();
                    let mut tiles = Vec::new();
                    for bin in 0..model.layout.bins() {
                        let (records, short) = top_patches(images, model, g, bin, n)?;
                        if short {
                            log::warn!("gaussian {g}, bin {bin}: only {} patches", records.len());
                        }
                        for (rank, r) in records.iter().enumerate() {
                            rows.push(vec![
                                bin.to_string(),
                                rank.to_string(),
                                index.records[r.image].image.to_string_lossy().into_owned(),
                                r.left.to_string(),
                                r.top.to_string(),
                                r.side.to_string(),
                                r.scale_index.to_string(),
                                r.score.to_string(),
                            ]);
                        }
                        for slot in 0..n {
                            let tile = match records.get(slot) {
                                Some(r) => {
                                    if !pixels.contains_key(&r.image) {
                                        pixels.insert(r.image, index.load_image(r.image)?);
                                    }
                                    let img = &pixels[&r.image];
                                    footprint(r.left, r.top, r.side, img.width(), img.height())
                                        .map(|w| img.crop(&w).resize(TILE, TILE))
                                }
                                None => None,
                            };
                            tiles.push(tile);
                        }
                    }
                    let stem = format!("top_patches/g{g}_{}", classes[c]);
                    write_csv(
                        &dir.join(&format!("{stem}.csv")),
                        &strings(["bin", "rank", "image_id", "left", "top", "side", "scale_index", "score"]),
                        &rows,
                    )?;
                    mosaic(&tiles, n, TILE).save_pgm(&dir.join(&format!("{stem}.pgm")))?;
                    artifacts.extend([format!("{stem}.csv"), format!("{stem}.pgm")]);
                }
            }
            Ok(artifacts)
        })
    }

    fn parts(&mut self) -> Result<String> {
        let hash = self.analysis_hash("parts", PART_KEYS)?;
        self.stage("parts", hash, |p| {
            let dir = p.out.clone();
            let models = p.bundle()?.models.clone();
            let classes = p.class_names()?;
            let cfg = p.cfg.clone();
            fs::create_dir_all(dir.join("parts"))?;
            let test = p.indices()?.1.clone();
            let pixels: Vec<GrayImage> = (0..test.records.len())
                .into_par_iter()
                .map(|i| test.load_image(i))
                .collect::<fvdet_core::Result<_>>()?;
            let images = p.test_encoded()?;
            let mut rows = Vec::new();
            let mut artifacts = Vec::new();
            for (c, model) in models.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[0x7061_7274, c as u64]);
                let parts = cluster_part_appearances(
                    images,
                    &pixels,
                    model,
                    cfg.part_top,
                    cfg.part_clusters,
                    cfg.part_raster,
                    cfg.nms,
                    seed,
                )?;
                for b in &parts.bins {
                    for k in 0..parts.clusters {
                        let members = b.assignments.iter().filter(|&&a| a == k).count();
                        rows.push(vec![
                            classes[c].clone(),
                            b.bin.to_string(),
                            k.to_string(),
                            members.to_string(),
                            b.objective.to_string(),
                        ]);
                    }
                    let tiles: Vec<Option<GrayImage>> = b.means.iter().cloned().map(Some).collect();
                    let name = format!("parts/{}_b{}.pgm", classes[c], b.bin);
                    mosaic(&tiles, tiles.len(), cfg.part_raster).save_pgm(&dir.join(&name))?;
                    artifacts.push(name);
                }
            }
            write_csv(
                &dir.join("parts/parts.csv"),
                &strings(["class", "bin", "cluster", "members", "objective"]),
                &rows,
            )?;
            artifacts.push("parts/parts.csv".into());
            Ok(artifacts)
        })
    }
}

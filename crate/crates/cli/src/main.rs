use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fvdet_cli::config::Config;
use fvdet_cli::container::ModelBundle;
use fvdet_cli::dataset::{ingest_jsonl, ingest_voc, DatasetIndex, Object, Record};
use fvdet_cli::pipeline::{encode_index, write_detections, write_detections_to, Outcome, Pipeline, ANALYSES};
use fvdet_cli::synth::generate_synthetic;
use fvdet_core::detector::detect_all;
use fvdet_core::model::LinearModel;

/// Sliding-window detector on spatial-pyramid Fisher Vectors.
#[derive(Parser)]
#[command(name = "fvdet", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long, global = true, default_value = "fvdet-out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (both splits) to the output directory.
    Synth,
    /// Validate an annotated dataset and write it as jsonl.
    Ingest {
        /// jsonl or voc-xml.
        #[arg(long)]
        format: String,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Fit the descriptor projection.
    Pca,
    /// Fit the Gaussian mixture vocabulary.
    Gmm,
    /// Train one detector per class with hard-negative mining.
    Train,
    /// Detect on the test split and write detections.csv.
    Detect,
    /// Score detections and write ap_report.csv.
    Eval,
    /// Run one analysis.
    Analyze {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(ANALYSES))]
        name: String,
    },
    /// Run every stage and the configured analyses.
    Run,
    /// Model container operations.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
    /// Print every config key with its default and description.
    Defaults,
}

#[derive(Subcommand)]
enum ModelAction {
    /// Train (or reuse the cached model) and copy the container to `path`.
    Save { path: PathBuf },
    /// Load and validate a container; optionally detect on images.
    Load {
        path: PathBuf,
        /// Images to run detection on.
        #[arg(long)]
        image: Vec<PathBuf>,
        /// Where to write detections (default: stdout).
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Summarize a container.
    Info { path: PathBuf },
}

fn load_config(g: &Global) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &g.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{o}`"))?;
        cfg.set_value(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report(p: &Pipeline) {
    for (stage, outcome) in p.events() {
        let what = match outcome {
            Outcome::Cached => "cached",
            Outcome::Computed => "computed",
        };
        println!("{stage:<16} {what}");
    }
}

fn model_load(path: &Path, images: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let bundle = ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
    eprintln!("{}: valid, {} classes", path.display(), bundle.class_names.len());
    if images.is_empty() {
        return Ok(());
    }
    let mut records = Vec::new();
    for img in images {
        let decoded = fvdet_core::image::GrayImage::load(img)?;
        records.push(Record {
            image: std::fs::canonicalize(img)?,
            width: decoded.width(),
            height: decoded.height(),
            objects: Vec::<Object>::new(),
        });
    }
    let index = DatasetIndex {
        root: PathBuf::from("/"),
        split: "input".into(),
        records,
    };
    let cfg = &bundle.config;
    let encoded = encode_index(&index, &bundle.class_names, &bundle.pipeline(), &cfg.candidate_params())?;
    let refs: Vec<&LinearModel> = bundle.models.iter().collect();
    let dets = detect_all(&encoded, &refs, cfg.nms, true);
    match out {
        Some(p) => write_detections(p, &index, &bundle.class_names, &dets)?,
        None => write_detections_to(std::io::stdout().lock(), &index, &bundle.class_names, &dets)?,
    }
    Ok(())
}

fn model_info(path: &Path) -> Result<()> {
    let b = ModelBundle::load(path)?;
    let layout = b.layout();
    println!("container  {}", path.display());
    println!("classes    {}", b.class_names.join(", "));
    println!("pca        {} -> {}", b.pca.in_dim(), b.pca.out_dim());
    println!("gmm        K={} D={}", b.gmm.num_components(), b.gmm.dim());
    println!("pyramid    R={} ({} bins), {} weights per model", layout.r, layout.bins(), layout.len());
    println!("encoding   {}", b.config.normalization);
    for (name, m) in b.class_names.iter().zip(&b.models) {
        let active = m.active_groups().iter().filter(|&&a| a).count();
        println!("model {name:<10} bias {:+.6}, {active}/{} groups active", m.bias, layout.groups());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    match &cli.command {
        Command::Defaults => {
            for (key, default, doc) in Config::documentation() {
                println!("# {doc}\n{key} = {default}\n");
            }
        }
        Command::Synth => {
            let spec = cfg.synth_spec();
            for (split, n) in [(&cfg.train_split, cfg.synth_train_images), (&cfg.test_split, cfg.synth_test_images)] {
                let idx = generate_synthetic(out, split, n, cfg.seed, &spec)?;
                println!("{split}: {} images, objects {:?}", idx.records.len(), idx.class_counts());
            }
        }
        Command::Ingest { format, root, split } => {
            let idx = match format.as_str() {
                "jsonl" => ingest_jsonl(&root.join(format!("{split}.jsonl")), root, split)?,
                "voc-xml" | "voc" => ingest_voc(root, split)?,
                other => bail!("unknown format `{other}` (jsonl, voc-xml)"),
            };
            std::fs::create_dir_all(out)?;
            let dest = out.join(format!("{split}.jsonl"));
            idx.write_jsonl(&dest)?;
            println!("{}: {} images, objects {:?}", dest.display(), idx.records.len(), idx.class_counts());
        }
        Command::Model { action } => match action {
            ModelAction::Save { path } => {
                let mut p = Pipeline::open(out, cfg)?;
                p.bundle()?.save(path)?;
                report(&p);
                println!("saved {}", path.display());
            }
            ModelAction::Load { path, image, detections } => model_load(path, image, detections.as_deref())?,
            ModelAction::Info { path } => model_info(path)?,
        },
        stage => {
            let mut p = Pipeline::open(out, cfg)?;
            match stage {
                Command::Pca => p.pca().map(drop)?,
                Command::Gmm => p.gmm().map(drop)?,
                Command::Train => p.train().map(drop)?,
                Command::Detect => p.detect().map(drop)?,
                Command::Eval => p.eval().map(drop)?,
                Command::Analyze { name } => p.analyze(name).map(drop)?,
                Command::Run => p.run_all()?,
                _ => unreachable!("handled above"),
            }
            report(&p);
            if matches!(stage, Command::Eval | Command::Run) {
                print!("{}", std::fs::read_to_string(out.join("ap_report.csv"))?);
            }
        }
    }
    Ok(())
}

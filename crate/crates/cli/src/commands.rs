use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use looklab_core::desk::{self, DeskPlan, PdpTruth};
use looklab_core::detect::{
    evaluate_detections, ArticleTaxonomy, CenterNetConfig, CenterNetDetector, DetRecord, DetectorTrainOptions, Granularity,
    GtRecord,
};
use looklab_core::embed::{encode_embedding, EmbedDataset, EmbedTrainConfig, EmbeddingModel, PairRecord, TripletLossConfig};
use looklab_core::feedback::{
    assemble_retrain_set, compare_ap, enqueue_candidates, run_noise_rounds, FeedbackStore, NoiseExperiment, ReviewCandidate,
    ReviewQueue, SystemClock,
};
use looklab_core::io::{read_json, read_jsonl, resolve, write_json, write_jsonl};
use looklab_core::keypoints::{
    is_full_shot, KeypointModel, KeypointModelConfig, KeypointRecord, KeypointSample, KeypointSchema, KeypointTrainOptions,
};
use looklab_core::pipeline::{profile_request, LookRecommendation, ModelRegistry, PdpRequest, RegistryHandle, StageTiming};
use looklab_core::pose::{precision_recall_per_class, PoseModel, PoseModelConfig, PoseRecord, PoseTrainOptions};
use looklab_core::retrieve::{
    metrics_csv, precision_recall_at_k, write_catalog, CatalogEntry, RetrievalResult, DEFAULT_K,
};
use looklab_core::vision::load_image;
use serde::{Deserialize, Serialize};

use crate::server::{AppState, ReviewDesk};
use crate::RequestImages;

#[derive(Debug, Parser)]
#[command(name = "looklab", version, about = "Shop-the-look pipeline tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Body keypoint estimation.
    #[command(subcommand)]
    Keypoints(KeypointsCmd),
    /// Shot pose classification.
    #[command(subcommand)]
    Pose(PoseCmd),
    /// Article detection.
    #[command(subcommand)]
    Detect(DetectCmd),
    /// Triplet embedding models and catalog indexing.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Retrieval evaluation.
    #[command(subcommand)]
    Retrieve(RetrieveCmd),
    /// Batch recommendations for a manifest of product pages.
    Run(RunArgs),
    /// HTTP service for recommendations and tagger review.
    Serve(ServeArgs),
    /// Active-learning review queue and retrain sets.
    #[command(subcommand)]
    Feedback(FeedbackCmd),
    /// Procedural desk world: train a model set, write fixtures, score runs.
    #[command(subcommand)]
    Desk(DeskCmd),
}

#[derive(Debug, Subcommand)]
pub enum KeypointsCmd {
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image paths are relative to this directory (default: the manifest's).
        #[arg(long)]
        root: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum PoseCmd {
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Writes confusion.csv and per_class.json into `out_dir`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DetectCmd {
    Train {
        /// Ground-truth manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Runs a detector over every image of a manifest.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class AP table (CSV) and mAP.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GranularityArg::Finer)]
        granularity: GranularityArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GranularityArg {
    Finer,
    Broad,
}

#[derive(Debug, Subcommand)]
pub enum EmbedCmd {
    Train {
        /// Broad category the model serves, e.g. topwear.
        #[arg(long)]
        category: String,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        /// JSON file with `train` and `loss` sections; missing fields take
        /// the profile's values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
    /// Writes `{d: u32 LE, f32 LE x d}` to `out` and a JSON sidecar next to it.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embeds catalog images into a catalog embeddings file.
    Index {
        #[arg(long)]
        model: PathBuf,
        /// JSONL of {product_id, article_type, broad_category, image_path}.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "unversioned")]
        model_version: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Profile {
    /// Full-size architecture and learning rate.
    Paper,
    /// Tiny architecture for CPU training.
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum RetrieveCmd {
    /// P@K / R@K grid as CSV.
    Eval {
        /// JSONL of retrieval results.
        #[arg(long)]
        results: PathBuf,
        /// JSON map of query_ref -> relevant product ids.
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 10, 14])]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory holding registry.json.
    #[arg(long)]
    pub registry: PathBuf,
    /// JSONL of PDP requests.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides per-request k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Image refs are relative to this directory (default: the manifest's).
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Also write per-request stage timings as JSONL.
    #[arg(long)]
    pub timings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Root for path image refs in recommend requests.
    #[arg(long, default_value = ".")]
    pub images_root: PathBuf,
    /// Review candidates (JSONL) to serve to taggers.
    #[arg(long)]
    pub review_candidates: Option<PathBuf>,
    /// Feedback store (JSONL), created when missing.
    #[arg(long, requires = "review_candidates")]
    pub feedback_store: Option<PathBuf>,
    /// Root for candidate image paths (default: the candidates file's directory).
    #[arg(long)]
    pub review_images_root: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    pub lease_secs: u64,
}

#[derive(Debug, Subcommand)]
pub enum FeedbackCmd {
    /// Uncertain detections ranked for review.
    Enqueue {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.8])]
        band: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Applies the feedback store to a ground-truth manifest.
    Assemble {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per broad category AP before and after, as CSV.
    Compare {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label-noise experiment with simulated taggers over a clean manifest.
    Simulate {
        #[arg(long)]
        gt: PathBuf,
        /// JSON NoiseExperiment; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DeskCmd {
    /// Trains the desk model set into a registry directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Seconds-long training that only exercises the plumbing.
        #[arg(long)]
        smoke: bool,
        /// JSON DeskPlan overriding the built-in one.
        #[arg(long, conflicts_with = "smoke")]
        plan: Option<PathBuf>,
    },
    /// Writes PDP fixtures, their ground truth and relevance sets.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Scores a recommendations file against fixture ground truth.
    Score {
        #[arg(long)]
        recs: PathBuf,
        /// Directory written by `desk fixtures`.
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
}

/// Optimiser overrides shared by the train commands.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! apply_flags {
    ($flags:expr, $opts:expr) => {{
        let f = &$flags;
        let mut o = $opts;
        if let Some(v) = f.epochs {
            o.epochs = v;
        }
        if let Some(v) = f.batch_size {
            o.batch_size = v;
        }
        if let Some(v) = f.learning_rate {
            o.learning_rate = v;
        }
        if let Some(v) = f.seed {
            o.seed = v;
        }
        o
    }};
}

fn root_for(root: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    root.clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn taxonomy_or_default(path: &Option<PathBuf>) -> Result<ArticleTaxonomy> {
    Ok(match path {
        Some(p) => ArticleTaxonomy::load(p)?,
        None => ArticleTaxonomy::default(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keypoints(c) => keypoints(c),
        Command::Pose(c) => pose(c),
        Command::Detect(c) => detect(c),
        Command::Embed(c) => embed(c),
        Command::Retrieve(c) => retrieve(c),
        Command::Run(a) => batch_run(&a),
        Command::Serve(a) => serve(a),
        Command::Feedback(c) => feedback(c),
        Command::Desk(c) => desk_cmd(c),
    }
}

fn keypoints(cmd: KeypointsCmd) -> Result<()> {
    match cmd {
        KeypointsCmd::Train {
            manifest,
            out,
            root,
            train,
        } => {
            let root = root_for(&root, &manifest);
            let records: Vec<KeypointRecord> = read_jsonl(&manifest)?;
            let samples = records
                .iter()
                .map(|r| {
                    Ok(KeypointSample {
                        image: load_image(&resolve(&root, &r.image_path))?,
                        keypoints: r.keypoints.iter().map(|k| k.map(|v| v as f32)).collect(),
                    })
                })
                .collect::<looklab_core::Result<Vec<_>>>()?;
            let opts = apply_flags!(train, KeypointTrainOptions::default());
            let model = KeypointModel::train(&samples, &KeypointSchema::coco17(), &KeypointModelConfig::desk(), &opts)?;
            model.save(&out)?;
            log::info!("wrote {}", out.display());
        }
        KeypointsCmd::Infer { model, image, threshold } => {
            let model = KeypointModel::load(&model)?;
            let kps = model.predict(&load_image(&image)?);
            let full_shot = is_full_shot(&kps, model.schema(), threshold)?;
            print_json(&serde_json::json!({ "keypoints": kps, "full_shot": full_shot }))?;
        }
    }
    Ok(())
}

fn load_pose_samples(manifest: &Path, root: &Option<PathBuf>) -> Result<Vec<(image::RgbImage, looklab_core::pose::PoseLabel)>> {
    let root = root_for(root, manifest);
    let records: Vec<PoseRecord> = read_jsonl(manifest)?;
    Ok(records
        .iter()
        .map(|r| Ok((load_image(&resolve(&root, &r.image_path))?, r.pose_label)))
        .collect::<looklab_core::Result<Vec<_>>>()?)
}

fn pose(cmd: PoseCmd) -> Result<()> {
    match cmd {
        PoseCmd::Train {
            manifest,
            out,
            root,
            train,
        } => {
            let samples = load_pose_samples(&manifest, &root)?;
            let opts = apply_flags!(train, PoseTrainOptions::default());
            PoseModel::train(&samples, &PoseModelConfig::desk(), &opts)?.save(&out)?;
        }
        PoseCmd::Eval {
            model,
            manifest,
            root,
            out_dir,
        } => {
            let model = PoseModel::load(&model)?;
            let cm = model.evaluate(&load_pose_samples(&manifest, &root)?)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("confusion.csv"), cm.to_csv())?;
            write_json(&out_dir.join("per_class.json"), &precision_recall_per_class(&cm))?;
            println!("accuracy {:.4}", cm.accuracy());
        }
        PoseCmd::Infer { model, image } => {
            print_json(&PoseModel::load(&model)?.classify(&load_image(&image)?))?;
        }
    }
    Ok(())
}

fn detect(cmd: DetectCmd) -> Result<()> {
    match cmd {
        DetectCmd::Train {
            manifest,
            out,
            root,
            train,
        } => {
            let root = root_for(&root, &manifest);
            let gts: Vec<GtRecord> = read_jsonl(&manifest)?;
            let classes: BTreeSet<String> = gts
                .iter()
                .flat_map(|r| r.boxes.iter().map(|b| b.article_type.clone()))
                .collect();
            let samples = gts
                .iter()
                .map(|r| Ok((load_image(&resolve(&root, &r.image_path))?, r.boxes.clone())))
                .collect::<looklab_core::Result<Vec<_>>>()?;
            let opts = apply_flags!(train, DetectorTrainOptions::default());
            let config = CenterNetConfig::desk(classes.into_iter().collect());
            CenterNetDetector::train(&samples, &config, &opts)?.save(&out)?;
        }
        DetectCmd::Infer {
            model,
            manifest,
            root,
            out,
        } => {
            let root = root_for(&root, &manifest);
            let det = CenterNetDetector::load(&model)?;
            let gts: Vec<GtRecord> = read_jsonl(&manifest)?;
            let dets = gts
                .iter()
                .map(|r| {
                    Ok(DetRecord {
                        image_path: r.image_path.clone(),
                        boxes: det.detect_image(&load_image(&resolve(&root, &r.image_path))?),
                    })
                })
                .collect::<looklab_core::Result<Vec<_>>>()?;
            write_jsonl(&out, &dets)?;
        }
        DetectCmd::Eval {
            gt,
            dets,
            iou,
            taxonomy,
            granularity,
            out,
        } => {
            let tax = taxonomy_or_default(&taxonomy)?;
            let gran = match granularity {
                GranularityArg::Finer => Granularity::Finer,
                GranularityArg::Broad => Granularity::Broad,
            };
            let report = evaluate_detections(&read_jsonl(&gt)?, &read_jsonl(&dets)?, iou, gran, &tax)?;
            emit(&report.to_csv(), &out)?;
            eprintln!("mAP@{iou} {:.6}", report.map);
        }
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
struct EmbedConfigFile {
    #[serde(default)]
    train: Option<serde_json::Value>,
    #[serde(default)]
    loss: Option<serde_json::Value>,
}

/// Overlays the fields present in `patch` onto `base`.
fn merge<T: Serialize + serde::de::DeserializeOwned>(base: T, patch: Option<serde_json::Value>) -> Result<T> {
    let Some(serde_json::Value::Object(patch)) = patch else {
        return Ok(base);
    };
    let mut value = serde_json::to_value(base)?;
    if let serde_json::Value::Object(map) = &mut value {
        for (k, v) in patch {
            if !map.contains_key(&k) {
                bail!("unknown config field `{k}`");
            }
            map.insert(k, v);
        }
    }
    Ok(serde_json::from_value(value)?)
}

#[derive(Debug, Deserialize)]
struct CatalogItem {
    product_id: String,
    article_type: String,
    broad_category: String,
    image_path: String,
}

fn embed(cmd: EmbedCmd) -> Result<()> {
    match cmd {
        EmbedCmd::Train {
            category,
            pairs,
            out,
            root,
            config,
            profile,
        } => {
            let base = match profile {
                Profile::Paper => EmbedTrainConfig::default(),
                Profile::Desk => EmbedTrainConfig::desk(),
            };
            let file: EmbedConfigFile = match &config {
                Some(p) => read_json(p)?,
                None => EmbedConfigFile::default(),
            };
            let train = merge(base, file.train)?;
            let loss = merge(TripletLossConfig::default(), file.loss)?;
            let records: Vec<PairRecord> = read_jsonl(&pairs)?;
            let data = EmbedDataset::from_pairs(&records, &root_for(&root, &pairs), train.seed)?;
            let (model, report) = EmbeddingModel::train(&data, &category, &train, &loss)?;
            model.save(&out)?;
            if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
                eprintln!("loss {first:.5} -> {last:.5} over {} epochs", report.epoch_losses.len());
            }
        }
        EmbedCmd::Infer { model, image, out } => {
            let model = EmbeddingModel::load(&model)?;
            let v = model.embed(&load_image(&image)?);
            std::fs::write(&out, encode_embedding(&v))?;
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".json");
            write_json(
                Path::new(&sidecar),
                &serde_json::json!({
                    "image": image,
                    "category": model.category(),
                    "d": v.len(),
                    "encoding": "u32le d, f32le x d",
                }),
            )?;
        }
        EmbedCmd::Index {
            model,
            catalog,
            root,
            out,
            model_version,
        } => {
            let model = EmbeddingModel::load(&model)?;
            let root = root_for(&root, &catalog);
            let items: Vec<CatalogItem> = read_jsonl(&catalog)?;
            let entries = items
                .into_iter()
                .map(|i| {
                    Ok(CatalogEntry {
                        embedding: model.embed(&load_image(&resolve(&root, &i.image_path))?),
                        product_id: i.product_id,
                        article_type: i.article_type,
                        broad_category: i.broad_category,
                        metadata: Default::default(),
                    })
                })
                .collect::<looklab_core::Result<Vec<_>>>()?;
            write_catalog(&out, &model_version, model.category(), &entries)?;
        }
    }
    Ok(())
}

fn retrieve(cmd: RetrieveCmd) -> Result<()> {
    let RetrieveCmd::Eval {
        results,
        relevance,
        k,
        out,
    } = cmd;
    let results: Vec<RetrievalResult> = read_jsonl(&results)?;
    let relevance: BTreeMap<String, BTreeSet<String>> = read_json(&relevance)?;
    emit(&metrics_csv(&precision_recall_at_k(&results, &relevance, &k)), &out)
}

#[derive(Debug, Serialize)]
struct TimingLine<'a> {
    request_id: &'a str,
    stages: &'a [StageTiming],
}

/// Runs every request of the manifest in order; one recommendation per line.
pub fn batch_run(a: &RunArgs) -> Result<()> {
    let registry = ModelRegistry::load(&a.registry).with_context(|| format!("loading registry {}", a.registry.display()))?;
    let requests: Vec<PdpRequest> = read_jsonl(&a.manifest)?;
    let images = RequestImages::new(root_for(&a.root, &a.manifest));
    let mut recs: Vec<LookRecommendation> = Vec::with_capacity(requests.len());
    let mut timings = Vec::new();
    for req in &requests {
        let k = a.k.unwrap_or_else(|| looklab_core::pipeline::effective_k(req));
        match profile_request(req, &registry, k, &images) {
            Ok((rec, t)) => {
                recs.push(rec);
                timings.push((req.request_id.clone(), t));
            }
            Err(e) => {
                log::warn!("{}: {e}", req.request_id);
                recs.push(LookRecommendation {
                    request_id: req.request_id.clone(),
                    model_version: registry.version.clone(),
                    selected_image: None,
                    rejection_reasons: Vec::new(),
                    per_article: Vec::new(),
                });
            }
        }
    }
    write_jsonl(&a.out, &recs)?;
    if let Some(path) = &a.timings {
        let lines: Vec<_> = timings
            .iter()
            .map(|(id, t)| TimingLine {
                request_id: id,
                stages: t,
            })
            .collect();
        write_jsonl(path, &lines)?;
    }
    eprintln!("wrote {} recommendations to {}", recs.len(), a.out.display());
    Ok(())
}

pub fn build_state(a: &ServeArgs) -> Result<AppState> {
    let registry = match &a.registry {
        Some(dir) => Some(RegistryHandle::new(ModelRegistry::load(dir)?)),
        None => None,
    };
    let review = match &a.review_candidates {
        Some(path) => {
            let taxonomy = taxonomy_or_default(&a.taxonomy)?;
            let candidates: Vec<ReviewCandidate> = read_jsonl(path)?;
            let store = match &a.feedback_store {
                Some(p) => FeedbackStore::open(p)?,
                None => FeedbackStore::in_memory(),
            };
            let mut queue = ReviewQueue::new(Arc::new(SystemClock), Duration::from_secs(a.lease_secs).as_millis() as u64);
            queue.extend(candidates)?;
            queue.replay(store.records());
            Some(ReviewDesk {
                queue,
                store,
                taxonomy,
                image_root: root_for(&a.review_images_root, path),
            })
        }
        None => None,
    };
    if registry.is_none() && review.is_none() {
        bail!("nothing to serve: pass --registry and/or --review-candidates");
    }
    Ok(AppState::new(registry, RequestImages::new(&a.images_root), review))
}

fn serve(a: ServeArgs) -> Result<()> {
    let state = Arc::new(build_state(&a)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(state, &a.addr))
}

fn feedback(cmd: FeedbackCmd) -> Result<()> {
    match cmd {
        FeedbackCmd::Enqueue { dets, band, budget, out } => {
            let [lo, hi] = band[..] else {
                bail!("--band takes two values, lo,hi");
            };
            let corpus: Vec<DetRecord> = read_jsonl(&dets)?;
            let queue = enqueue_candidates(&corpus, (lo, hi), budget)?;
            write_jsonl(&out, &queue)?;
            eprintln!("{} candidates", queue.len());
        }
        FeedbackCmd::Assemble {
            gt,
            candidates,
            store,
            out,
        } => {
            let base: Vec<GtRecord> = read_jsonl(&gt)?;
            let cands: Vec<ReviewCandidate> = read_jsonl(&candidates)?;
            let store = FeedbackStore::open(&store)?;
            write_jsonl(&out, &assemble_retrain_set(&base, &cands, store.records())?)?;
        }
        FeedbackCmd::Compare {
            gt,
            before,
            after,
            iou,
            taxonomy,
            out,
        } => {
            let tax = taxonomy_or_default(&taxonomy)?;
            let cmp = compare_ap(&read_jsonl(&before)?, &read_jsonl(&after)?, &read_jsonl(&gt)?, iou, &tax)?;
            emit(&cmp.to_csv(), &out)?;
        }
        FeedbackCmd::Simulate {
            gt,
            config,
            taxonomy,
            out,
        } => {
            let exp: NoiseExperiment = match &config {
                Some(p) => read_json(p)?,
                None => NoiseExperiment::default(),
            };
            let tax = taxonomy_or_default(&taxonomy)?;
            let rounds = run_noise_rounds(&read_jsonl(&gt)?, &exp, &tax)?;
            for r in &rounds {
                eprintln!("round {}: {} reviewed, {} corrections", r.round, r.reviewed, r.corrections);
                eprint!("{}", r.comparison.to_csv());
            }
            write_json(&out, &rounds)?;
        }
    }
    Ok(())
}

fn desk_cmd(cmd: DeskCmd) -> Result<()> {
    match cmd {
        DeskCmd::Train { out, smoke, plan } => {
            let plan = match (&plan, smoke) {
                (Some(p), _) => read_json(p)?,
                (None, true) => DeskPlan::smoke(),
                (None, false) => DeskPlan::standard(),
            };
            let summary = desk::train_desk(&out, &plan)?;
            write_json(&out.join("train_summary.json"), &summary)?;
            eprintln!("trained {} in {:.1}s", summary.version, summary.total_seconds());
        }
        DeskCmd::Fixtures { out, n, seed } => {
            let truth = desk::write_pdp_set(&out, n, seed)?;
            eprintln!("wrote {} pages to {}", truth.len(), out.display());
        }
        DeskCmd::Score { recs, fixtures, k } => {
            let recs: Vec<LookRecommendation> = read_jsonl(&recs)?;
            let truth: Vec<PdpTruth> = read_jsonl(&fixtures.join(desk::PDP_TRUTH))?;
            let relevance = read_json(&fixtures.join(desk::RELEVANCE_FILE))?;
            let score = desk::score_looks(&recs, &truth, &relevance, k);
            print_json(&serde_json::json!({
                "queries": score.queries,
                "selected_correctly": score.selected_correctly,
                "rank1_hits": score.rank1_hits,
                "rank1_rate": score.rank1_rate(),
                "k": score.k,
                "recall_at_k": score.recall_at_k,
            }))?;
        }
    }
    Ok(())
}

//! Desk-scale model set trained on the procedural world, plus the PDP
//! fixtures and scoring used to check the whole pipeline end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{ArticleTaxonomy, CenterNetConfig, CenterNetDetector, DetectorTrainOptions};
use crate::embed::{EmbedTrainConfig, EmbeddingModel, TripletLossConfig};
use crate::error::Result;
use crate::io::{write_json, write_jsonl};
use crate::keypoints::{KeypointModel, KeypointModelConfig, KeypointSchema, KeypointTrainOptions};
use crate::pipeline::{DetectorSpec, LookRecommendation, PdpRequest, PipelineConfig, RegistryManifest, REGISTRY_FILE};
use crate::pose::{PoseModel, PoseModelConfig, PoseTrainOptions};
use crate::retrieve::{write_catalog, CatalogEntry, RetrievalResult};
use crate::synth::{self, catalog_garments, catalog_image, relevance_set, ARTICLE_TYPES};
use crate::vision::save_png;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskPlan {
    pub version: String,
    pub seed: u64,
    pub keypoint_figures: usize,
    pub keypoint_options: KeypointTrainOptions,
    pub pose_samples: usize,
    pub pose_options: PoseTrainOptions,
    pub detector_samples: usize,
    pub detector_options: DetectorTrainOptions,
    pub embed_views_per_item: usize,
    pub embed_config: EmbedTrainConfig,
    pub loss: TripletLossConfig,
}

impl DeskPlan {
    /// The settings the end-to-end check is calibrated against.
    pub fn standard() -> Self {
        DeskPlan {
            version: "desk-1".into(),
            seed: 1,
            keypoint_figures: 400,
            keypoint_options: KeypointTrainOptions::default(),
            pose_samples: 300,
            pose_options: PoseTrainOptions {
                epochs: 10,
                ..Default::default()
            },
            detector_samples: 300,
            detector_options: DetectorTrainOptions::default(),
            embed_views_per_item: 24,
            embed_config: EmbedTrainConfig::desk(),
            loss: TripletLossConfig::default(),
        }
    }

    /// A few seconds of training; the models are not useful, only valid.
    pub fn smoke() -> Self {
        let mut p = Self::standard();
        p.version = "desk-smoke".into();
        p.keypoint_figures = 8;
        p.keypoint_options.epochs = 1;
        p.pose_samples = 10;
        p.pose_options.epochs = 1;
        p.detector_samples = 8;
        p.detector_options.epochs = 1;
        p.embed_views_per_item = 1;
        p.embed_config.epochs = 1;
        p.embed_config.mining_warmup_epochs = 0;
        p
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DeskSummary {
    pub version: String,
    /// Wall-clock training seconds per model.
    pub seconds: BTreeMap<String, f64>,
    pub embed_losses: BTreeMap<String, Vec<f64>>,
}

impl DeskSummary {
    pub fn total_seconds(&self) -> f64 {
        self.seconds.values().sum()
    }
}

pub const TAXONOMY_FILE: &str = "taxonomy.json";

/// The three article types of the procedural world, one per broad category.
pub fn desk_taxonomy() -> ArticleTaxonomy {
    ArticleTaxonomy {
        broad_categories: ARTICLE_TYPES
            .iter()
            .map(|(t, b, _)| (b.to_string(), vec![t.to_string()]))
            .collect(),
    }
}

/// Trains every model and writes a loadable registry directory.
pub fn train_desk(dir: &Path, plan: &DeskPlan) -> Result<DeskSummary> {
    let mut summary = DeskSummary {
        version: plan.version.clone(),
        ..Default::default()
    };
    let mut timed = |name: &str, start: Instant| {
        let s = start.elapsed().as_secs_f64();
        log::info!("trained {name} in {s:.1}s");
        summary.seconds.insert(name.to_string(), s);
    };
    std::fs::create_dir_all(dir.join("models")).map_err(|e| crate::LookError::io(dir, e))?;

    let start = Instant::now();
    let samples: Vec<_> = synth::stick_figures(plan.keypoint_figures, plan.seed)
        .iter()
        .map(|f| f.keypoint_sample())
        .collect();
    let kp = KeypointModel::train(&samples, &KeypointSchema::coco17(), &KeypointModelConfig::desk(), &plan.keypoint_options)?;
    kp.save(&dir.join("models/keypoints.ckpt"))?;
    timed("keypoints", start);

    let start = Instant::now();
    let pose = PoseModel::train(&synth::pose_dataset(plan.pose_samples, plan.seed), &PoseModelConfig::desk(), &plan.pose_options)?;
    pose.save(&dir.join("models/pose.ckpt"))?;
    timed("pose", start);

    let start = Instant::now();
    let classes = ARTICLE_TYPES.iter().map(|t| t.0.to_string()).collect();
    let det = CenterNetDetector::train(
        &synth::detector_dataset(plan.detector_samples, plan.seed),
        &CenterNetConfig::desk(classes),
        &plan.detector_options,
    )?;
    det.save(&dir.join("models/detector.ckpt"))?;
    timed("detector", start);

    let garments = catalog_garments();
    let mut embedders = BTreeMap::new();
    let mut catalogs = Vec::new();
    for (i, (article_type, broad, _)) in ARTICLE_TYPES.iter().enumerate() {
        let start = Instant::now();
        let data = synth::embed_dataset(article_type, plan.embed_views_per_item, plan.seed + 100 + i as u64);
        let (model, report) = EmbeddingModel::train(&data, broad, &plan.embed_config, &plan.loss)?;
        let model_path = format!("models/embed-{}.ckpt", broad.to_lowercase());
        model.save(&dir.join(&model_path))?;
        let entries: Vec<CatalogEntry> = garments
            .iter()
            .filter(|g| g.article_type == *article_type)
            .map(|g| CatalogEntry {
                product_id: g.product_id.clone(),
                article_type: g.article_type.clone(),
                broad_category: g.broad_category.clone(),
                embedding: model.embed(&catalog_image(g)),
                metadata: [
                    ("family".to_string(), g.family.clone().into()),
                    ("pattern".to_string(), g.pattern.clone().into()),
                ]
                .into_iter()
                .collect(),
            })
            .collect();
        let catalog_path = format!("catalog/{}.emb", broad.to_lowercase());
        write_catalog(&dir.join(&catalog_path), &plan.version, broad, &entries)?;
        embedders.insert(broad.to_string(), model_path);
        catalogs.push(catalog_path);
        summary.embed_losses.insert(broad.to_string(), report.epoch_losses);
        timed(&format!("embed-{broad}"), start);
    }

    let manifest = RegistryManifest {
        version: plan.version.clone(),
        taxonomy: Some(TAXONOMY_FILE.into()),
        keypoints: "models/keypoints.ckpt".into(),
        pose: "models/pose.ckpt".into(),
        detector: DetectorSpec::Centernet {
            path: "models/detector.ckpt".into(),
        },
        embedders,
        catalogs,
        config: PipelineConfig::default(),
    };
    write_json(&dir.join(TAXONOMY_FILE), &desk_taxonomy())?;
    write_json(&dir.join(REGISTRY_FILE), &manifest)?;
    write_json(&dir.join("plan.json"), plan)?;
    Ok(summary)
}

/// Ground truth for one generated PDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdpTruth {
    pub request_id: String,
    pub front_full_image: String,
    pub primary: String,
    pub primary_type: String,
    pub outfit: Vec<String>,
}

pub const PDP_MANIFEST: &str = "pdps.jsonl";
pub const PDP_TRUTH: &str = "truth.jsonl";
pub const RELEVANCE_FILE: &str = "relevance.json";

/// Writes `n` PDP fixtures as PNG views under `dir`, with a request
/// manifest, ground truth and product relevance sets.
pub fn write_pdp_set(dir: &Path, n: usize, seed: u64) -> Result<Vec<PdpTruth>> {
    let garments = catalog_garments();
    let mut requests = Vec::new();
    let mut truth = Vec::new();
    for pdp in synth::pdp_fixtures(n, seed) {
        let mut images = Vec::new();
        for (v, img) in pdp.views.iter().enumerate() {
            let rel = format!("images/{}/view-{v}.png", pdp.request_id);
            save_png(img, &dir.join(&rel))?;
            images.push(rel);
        }
        let primary_type = garments
            .iter()
            .find(|g| g.product_id == pdp.primary)
            .map(|g| g.article_type.clone())
            .unwrap_or_default();
        truth.push(PdpTruth {
            request_id: pdp.request_id.clone(),
            front_full_image: images[pdp.front_full].clone(),
            primary: pdp.primary.clone(),
            primary_type,
            outfit: pdp.outfit.to_vec(),
        });
        requests.push(PdpRequest {
            request_id: pdp.request_id,
            images,
            ugc: false,
            k: None,
        });
    }
    let relevance: BTreeMap<String, BTreeSet<String>> = garments
        .iter()
        .map(|g| (g.product_id.clone(), relevance_set(&garments, &g.product_id)))
        .collect();
    write_jsonl(&dir.join(PDP_MANIFEST), &requests)?;
    write_jsonl(&dir.join(PDP_TRUTH), &truth)?;
    write_json(&dir.join(RELEVANCE_FILE), &relevance)?;
    Ok(truth)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LookScore {
    pub queries: usize,
    /// Pages whose selected image is the front full shot.
    pub selected_correctly: usize,
    /// Pages whose primary product is ranked first.
    pub rank1_hits: usize,
    pub recall_at_k: f64,
    pub k: usize,
}

impl LookScore {
    pub fn rank1_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.rank1_hits as f64 / self.queries as f64
        }
    }
}

/// Scores each page by its primary product: the top-scoring detection of
/// the primary's article type is the query, the primary's colour family is
/// the relevant set. A page with no such detection scores zero.
pub fn score_looks(
    recs: &[LookRecommendation],
    truth: &[PdpTruth],
    relevance: &BTreeMap<String, BTreeSet<String>>,
    k: usize,
) -> LookScore {
    let by_id: BTreeMap<&str, &LookRecommendation> = recs.iter().map(|r| (r.request_id.as_str(), r)).collect();
    let mut score = LookScore {
        queries: truth.len(),
        k,
        ..Default::default()
    };
    let mut results = Vec::new();
    let mut rel = BTreeMap::new();
    for t in truth {
        rel.insert(t.request_id.clone(), relevance.get(&t.primary).cloned().unwrap_or_default());
        let rec = by_id.get(t.request_id.as_str());
        if rec.and_then(|r| r.selected_image.as_deref()) == Some(t.front_full_image.as_str()) {
            score.selected_correctly += 1;
        }
        // per_article is sorted by descending score.
        let ranked = rec
            .and_then(|r| r.per_article.iter().find(|a| a.detection.article_type == t.primary_type))
            .map(|a| a.result.ranked.clone())
            .unwrap_or_default();
        if ranked.first().map(|r| r.product_id.as_str()) == Some(t.primary.as_str()) {
            score.rank1_hits += 1;
        }
        results.push(RetrievalResult {
            query_ref: t.request_id.clone(),
            ranked,
        });
    }
    score.recall_at_k = crate::retrieve::precision_recall_at_k(&results, &rel, &[k])[0].recall;
    score
}

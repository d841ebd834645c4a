//! End-to-end look recommendation: full-shot selection, front-pose filter,
//! detection, cropping, embedding and per-article retrieval.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::detect::{crop_rois, ArticleTaxonomy, CenterNetDetector, Detection, Detector, ReplayDetector};
use crate::embed::EmbeddingModel;
use crate::error::{LookError, Result};
use crate::keypoints::{is_full_shot, KeypointModel, KeypointSchema, KeypointSet};
use crate::pose::{PoseLabel, PoseModel, PosePrediction};
use crate::retrieve::{read_catalog, CatalogIndex, RetrievalResult, ScoringMode, DEFAULT_K};
use crate::vision::{load_image, LoadedImage};

/// Anything that finds body keypoints in an image.
pub trait KeypointEstimator: Send + Sync {
    fn schema(&self) -> &KeypointSchema;
    fn estimate(&self, image: &RgbImage) -> KeypointSet;
}

impl KeypointEstimator for KeypointModel {
    fn schema(&self) -> &KeypointSchema {
        KeypointModel::schema(self)
    }

    fn estimate(&self, image: &RgbImage) -> KeypointSet {
        self.predict(image)
    }
}

pub trait PoseClassifier: Send + Sync {
    fn classify(&self, image: &RgbImage) -> PosePrediction;
}

impl PoseClassifier for PoseModel {
    fn classify(&self, image: &RgbImage) -> PosePrediction {
        PoseModel::classify(self, image)
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &RgbImage) -> Vec<f32>;
}

impl Embedder for EmbeddingModel {
    fn dim(&self) -> usize {
        EmbeddingModel::dim(self)
    }

    fn embed(&self, image: &RgbImage) -> Vec<f32> {
        EmbeddingModel::embed(self, image)
    }
}

/// Resolves image references from requests.
pub trait ImageSource: Send + Sync {
    fn load(&self, image_ref: &str) -> Result<RgbImage>;
}

/// Image references are file paths, relative ones resolved against `root`.
#[derive(Clone, Debug, Default)]
pub struct FsImageSource {
    pub root: PathBuf,
}

impl FsImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsImageSource { root: root.into() }
    }
}

impl ImageSource for FsImageSource {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        load_image(&crate::io::resolve(&self.root, image_ref))
    }
}

/// In-memory images keyed by reference, for tests and embedding callers.
#[derive(Clone, Debug, Default)]
pub struct MemoryImageSource {
    pub images: BTreeMap<String, RgbImage>,
}

impl ImageSource for MemoryImageSource {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        self.images.get(image_ref).cloned().ok_or_else(|| LookError::Decode {
            path: image_ref.to_string(),
            reason: "no such image".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Keypoint confidence needed for the head/ankle presence test.
    pub full_shot_threshold: f64,
    /// Fraction of each box side added around detections before cropping.
    pub roi_pad: f64,
    pub scoring: ScoringMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            full_shot_threshold: 0.5,
            roi_pad: 0.0,
            scoring: ScoringMode::Cosine,
        }
    }
}

/// Everything one request needs, pinned to a single version.
pub struct ModelRegistry {
    pub version: String,
    pub taxonomy: ArticleTaxonomy,
    pub keypoints: Box<dyn KeypointEstimator>,
    pub pose: Box<dyn PoseClassifier>,
    pub detector: Box<dyn Detector>,
    /// Embedding model per broad category.
    pub embedders: BTreeMap<String, Box<dyn Embedder>>,
    pub index: CatalogIndex,
    pub config: PipelineConfig,
}

impl ModelRegistry {
    /// Broad categories of the taxonomy without an embedding model.
    pub fn missing_embedders(&self) -> Vec<String> {
        self.taxonomy
            .broad_names()
            .filter(|b| !self.embedders.contains_key(*b))
            .map(str::to_string)
            .collect()
    }

    pub fn info(&self) -> RegistryInfo {
        RegistryInfo {
            version: self.version.clone(),
            detector: self.detector.metadata(),
            embedders: self.embedders.iter().map(|(k, e)| (k.clone(), e.dim())).collect(),
            catalog_size: self.index.len(),
            article_types: self.index.article_types().map(str::to_string).collect(),
            config: self.config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryInfo {
    pub version: String,
    pub detector: crate::detect::DetectorMetadata,
    /// Broad category -> embedding dimension.
    pub embedders: BTreeMap<String, usize>,
    pub catalog_size: usize,
    pub article_types: Vec<String>,
    pub config: PipelineConfig,
}

/// Where a registry directory keeps its parts. Paths are relative to the
/// directory holding `registry.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<String>,
    pub keypoints: String,
    pub pose: String,
    pub detector: DetectorSpec,
    pub embedders: BTreeMap<String, String>,
    pub catalogs: Vec<String>,
    #[serde(default)]
    pub config: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    Centernet { path: String },
    Replay { path: String },
}

pub const REGISTRY_FILE: &str = "registry.json";

impl ModelRegistry {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RegistryManifest = crate::io::read_json(&dir.join(REGISTRY_FILE))?;
        let at = |p: &str| crate::io::resolve(dir, p);
        let taxonomy = match &manifest.taxonomy {
            Some(p) => ArticleTaxonomy::load(&at(p))?,
            None => ArticleTaxonomy::default(),
        };
        let detector: Box<dyn Detector> = match &manifest.detector {
            DetectorSpec::Centernet { path } => Box::new(CenterNetDetector::load(&at(path))?),
            DetectorSpec::Replay { path } => Box::new(ReplayDetector::load(&at(path))?),
        };
        let mut embedders: BTreeMap<String, Box<dyn Embedder>> = BTreeMap::new();
        for (broad, path) in &manifest.embedders {
            embedders.insert(broad.clone(), Box::new(EmbeddingModel::load(&at(path))?));
        }
        let mut entries = Vec::new();
        for path in &manifest.catalogs {
            entries.extend(read_catalog(&at(path))?.1);
        }
        Ok(ModelRegistry {
            version: manifest.version,
            taxonomy,
            keypoints: Box::new(KeypointModel::load(&at(&manifest.keypoints))?),
            pose: Box::new(PoseModel::load(&at(&manifest.pose))?),
            detector,
            embedders,
            index: CatalogIndex::build(entries)?,
            config: manifest.config,
        })
    }
}

/// Shared, swappable registry. Each request takes one snapshot up front, so
/// a swap only affects requests that start after it.
pub struct RegistryHandle {
    current: RwLock<Arc<ModelRegistry>>,
}

impl RegistryHandle {
    pub fn new(registry: ModelRegistry) -> Self {
        RegistryHandle {
            current: RwLock::new(Arc::new(registry)),
        }
    }

    pub fn snapshot(&self) -> Arc<ModelRegistry> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `next` and returns the previous registry.
    pub fn swap(&self, next: ModelRegistry) -> Arc<ModelRegistry> {
        let mut guard = self.current.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, Arc::new(next))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdpRequest {
    #[serde(default)]
    pub request_id: String,
    pub images: Vec<String>,
    #[serde(default)]
    pub ugc: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl PdpRequest {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(LookError::Request("request has no images".into()));
        }
        if self.ugc && self.images.len() != 1 {
            return Err(LookError::Request("a UGC request carries exactly one image".into()));
        }
        if self.k == Some(0) {
            return Err(LookError::Request("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why an image was not used as the look image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    Undecodable,
    NoFullShot,
    NotFront,
    /// A front full shot with lower front confidence than the chosen one.
    LowerFrontConfidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRejection {
    pub image: String,
    pub reason: RejectionReason,
}

/// Why an article has no (or an empty) retrieval result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArticleFailure {
    NoModel,
    CropFailed,
    EmptyIndex,
    DimensionMismatch,
    EmbeddingFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecommendation {
    pub detection: Detection,
    pub result: RetrievalResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ArticleFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookRecommendation {
    pub request_id: String,
    pub model_version: String,
    pub selected_image: Option<String>,
    pub rejection_reasons: Vec<ImageRejection>,
    pub per_article: Vec<ArticleRecommendation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Keypoints,
    Pose,
    Detect,
    Embed,
    Retrieve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed_ms: f64,
}

/// Per-image outcome of full-shot selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotAssessment {
    pub image: String,
    pub full_shot: Option<bool>,
    pub pose: Option<PosePrediction>,
}

#[derive(Default)]
struct Timer {
    totals: BTreeMap<Stage, f64>,
}

impl Timer {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.totals.entry(stage).or_default() += start.elapsed().as_secs_f64() * 1e3;
        out
    }

    fn into_list(self) -> Vec<StageTiming> {
        self.totals
            .into_iter()
            .map(|(stage, elapsed_ms)| StageTiming { stage, elapsed_ms })
            .collect()
    }
}

/// Picks the look image: keep full shots, then front poses, then the
/// highest front confidence (earliest image on ties). `None` entries are
/// undecodable images.
pub fn select_full_shot(
    images: &[(String, Option<RgbImage>)],
    keypoints: &dyn KeypointEstimator,
    pose: &dyn PoseClassifier,
    threshold: f64,
) -> Result<(Option<usize>, Vec<ImageRejection>, Vec<ShotAssessment>)> {
    let mut timer = Timer::default();
    select_timed(images, keypoints, pose, threshold, &mut timer)
}

fn select_timed(
    images: &[(String, Option<RgbImage>)],
    keypoints: &dyn KeypointEstimator,
    pose: &dyn PoseClassifier,
    threshold: f64,
    timer: &mut Timer,
) -> Result<(Option<usize>, Vec<ImageRejection>, Vec<ShotAssessment>)> {
    if images.iter().all(|(_, img)| img.is_none()) {
        return Err(LookError::Request("no decodable image in request".into()));
    }
    let mut assessments: Vec<ShotAssessment> = images
        .iter()
        .map(|(r, _)| ShotAssessment {
            image: r.clone(),
            full_shot: None,
            pose: None,
        })
        .collect();
    for (a, (_, img)) in assessments.iter_mut().zip(images) {
        if let Some(img) = img {
            let kps = timer.time(Stage::Keypoints, || keypoints.estimate(img));
            a.full_shot = Some(is_full_shot(&kps, keypoints.schema(), threshold)?);
        }
    }
    for (a, (_, img)) in assessments.iter_mut().zip(images) {
        if let (Some(true), Some(img)) = (a.full_shot, img) {
            a.pose = Some(timer.time(Stage::Pose, || pose.classify(img)));
        }
    }
    let front_conf = |a: &ShotAssessment| {
        a.pose
            .as_ref()
            .filter(|p| p.label == PoseLabel::Front)
            .map(|p| p.scores[PoseLabel::Front.index()])
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in assessments.iter().enumerate() {
        if let Some(c) = front_conf(a) {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
    }
    let chosen = best.map(|(i, _)| i);
    let rejections = assessments
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != chosen)
        .map(|(_, a)| ImageRejection {
            image: a.image.clone(),
            reason: match (a.full_shot, front_conf(a)) {
                (None, _) => RejectionReason::Undecodable,
                (Some(false), _) => RejectionReason::NoFullShot,
                (Some(true), None) => RejectionReason::NotFront,
                (Some(true), Some(_)) => RejectionReason::LowerFrontConfidence,
            },
        })
        .collect();
    Ok((chosen, rejections, assessments))
}

/// Runs the whole chain for one request.
pub fn recommend_look(req: &PdpRequest, registry: &ModelRegistry, k: usize, source: &dyn ImageSource) -> Result<LookRecommendation> {
    profile_request(req, registry, k, source).map(|(rec, _)| rec)
}

/// [`recommend_look`] plus wall-clock time per executed stage.
pub fn profile_request(
    req: &PdpRequest,
    registry: &ModelRegistry,
    k: usize,
    source: &dyn ImageSource,
) -> Result<(LookRecommendation, Vec<StageTiming>)> {
    req.validate()?;
    if k == 0 {
        return Err(LookError::Request("k must be at least 1".into()));
    }
    let mut timer = Timer::default();
    let images: Vec<(String, Option<RgbImage>)> = req
        .images
        .iter()
        .map(|r| {
            let img = source.load(r);
            if let Err(e) = &img {
                log::warn!("{}: {e}", req.request_id);
            }
            (r.clone(), img.ok())
        })
        .collect();
    let (chosen, rejection_reasons) = if req.ugc {
        match &images[0].1 {
            Some(_) => (Some(0), Vec::new()),
            None => return Err(LookError::Request("UGC image is undecodable".into())),
        }
    } else {
        let (c, r, _) = select_timed(
            &images,
            registry.keypoints.as_ref(),
            registry.pose.as_ref(),
            registry.config.full_shot_threshold,
            &mut timer,
        )?;
        (c, r)
    };
    let mut rec = LookRecommendation {
        request_id: req.request_id.clone(),
        model_version: registry.version.clone(),
        selected_image: chosen.map(|i| images[i].0.clone()),
        rejection_reasons,
        per_article: Vec::new(),
    };
    let Some(ci) = chosen else {
        return Ok((rec, timer.into_list()));
    };
    let (image_ref, Some(pixels)) = images[ci].clone() else {
        return Ok((rec, timer.into_list()));
    };
    let loaded = LoadedImage::new(image_ref, pixels);
    let mut dets = timer.time(Stage::Detect, || registry.detector.detect(&loaded))?;
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
            .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
            .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
            .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
            .then(a.article_type.cmp(&b.article_type))
    });
    for (i, det) in dets.into_iter().enumerate() {
        let query_ref = format!("{}#{i}", req.request_id);
        let (result, failure) = recommend_article(&det, &query_ref, &loaded.pixels, registry, k, &mut timer);
        rec.per_article.push(ArticleRecommendation {
            detection: det,
            result: RetrievalResult {
                query_ref,
                ranked: result,
            },
            failure,
        });
    }
    Ok((rec, timer.into_list()))
}

fn recommend_article(
    det: &Detection,
    query_ref: &str,
    image: &RgbImage,
    registry: &ModelRegistry,
    k: usize,
    timer: &mut Timer,
) -> (Vec<crate::retrieve::Ranked>, Option<ArticleFailure>) {
    let broad = registry.taxonomy.broad_of(&det.article_type);
    let Some(embedder) = broad.and_then(|b| registry.embedders.get(b)) else {
        log::warn!("{query_ref}: no embedding model for `{}`", det.article_type);
        return (Vec::new(), Some(ArticleFailure::NoModel));
    };
    if registry.index.partition_len(&det.article_type) == 0 {
        return (Vec::new(), Some(ArticleFailure::EmptyIndex));
    }
    let roi = match crop_rois(image, std::slice::from_ref(det), registry.config.roi_pad) {
        Ok(mut rois) if !rois.is_empty() => rois.remove(0),
        _ => return (Vec::new(), Some(ArticleFailure::CropFailed)),
    };
    let embedding = timer.time(Stage::Embed, || embedder.embed(&roi.image));
    if embedding.iter().any(|v| !v.is_finite()) {
        return (Vec::new(), Some(ArticleFailure::EmbeddingFailed));
    }
    let ranked = timer.time(Stage::Retrieve, || {
        registry
            .index
            .top_k(&embedding, &det.article_type, k, registry.config.scoring)
    });
    match ranked {
        Ok(r) => (r, None),
        Err(LookError::Dimension { .. }) => (Vec::new(), Some(ArticleFailure::DimensionMismatch)),
        Err(e) => {
            log::warn!("{query_ref}: retrieval failed: {e}");
            (Vec::new(), Some(ArticleFailure::EmbeddingFailed))
        }
    }
}

/// The `k` a request asks for, falling back to the default.
pub fn effective_k(req: &PdpRequest) -> usize {
    req.k.unwrap_or(DEFAULT_K)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{BoundingBox, DetectorMetadata};
    use crate::keypoints::Keypoint;
    use crate::retrieve::CatalogEntry;
    use image::Rgb;
    use proptest::prelude::*;

    // Fake models read their answers from pixel (0, 0): red = head visible,
    // green = ankles visible, blue = front confidence x 255.
    struct PixelKeypoints(KeypointSchema);

    impl KeypointEstimator for PixelKeypoints {
        fn schema(&self) -> &KeypointSchema {
            &self.0
        }

        fn estimate(&self, image: &RgbImage) -> KeypointSet {
            let p = image.get_pixel(0, 0);
            let points = self
                .0
                .names
                .iter()
                .map(|n| {
                    let conf = if self.0.head_group.contains(n) {
                        p[0] as f64 / 255.0
                    } else if self.0.ankle_group.contains(n) {
                        p[1] as f64 / 255.0
                    } else {
                        1.0
                    };
                    Keypoint { name: n.clone(), x: 0.0, y: 0.0, confidence: conf }
                })
                .collect();
            KeypointSet { points }
        }
    }

    struct PixelPose;

    impl PoseClassifier for PixelPose {
        fn classify(&self, image: &RgbImage) -> PosePrediction {
            let front = image.get_pixel(0, 0)[2] as f64 / 255.0;
            let rest = (1.0 - front) / 4.0;
            let scores = [front, rest, rest, rest, rest];
            let (label, confidence) = crate::pose::argmax_pose(&scores);
            PosePrediction { label, confidence, scores }
        }
    }

    /// Mean colour of the crop.
    struct MeanColour;

    impl Embedder for MeanColour {
        fn dim(&self) -> usize {
            3
        }

        fn embed(&self, image: &RgbImage) -> Vec<f32> {
            let n = (image.width() * image.height()).max(1) as f32;
            let mut acc = [0.0f32; 3];
            for p in image.pixels() {
                for c in 0..3 {
                    acc[c] += p[c] as f32 + 1.0;
                }
            }
            acc.iter().map(|v| v / n).collect()
        }
    }

    fn shot(head: u8, ankles: u8, front: u8) -> RgbImage {
        let mut img = RgbImage::from_pixel(40, 40, Rgb([200, 200, 200]));
        img.put_pixel(0, 0, Rgb([head, ankles, front]));
        // Three planted articles.
        for (x0, colour) in [(2u32, [250u8, 10, 10]), (14, [10, 250, 10]), (26, [10, 10, 250])] {
            for y in 10..30 {
                for x in x0..x0 + 10 {
                    img.put_pixel(x, y, Rgb(colour));
                }
            }
        }
        img
    }

    fn planted() -> Vec<Detection> {
        [(2.0, "T-shirts", 0.9), (14.0, "Jeans", 0.8), (26.0, "Casual shoes", 0.7)]
            .iter()
            .map(|&(x, t, s)| Detection {
                bbox: BoundingBox { x_min: x, y_min: 10.0, x_max: x + 10.0, y_max: 30.0 },
                article_type: t.into(),
                score: s,
            })
            .collect()
    }

    struct FixedDetector(Vec<Detection>);

    impl Detector for FixedDetector {
        fn detect(&self, _: &LoadedImage) -> Result<Vec<Detection>> {
            Ok(self.0.clone())
        }

        fn metadata(&self) -> DetectorMetadata {
            DetectorMetadata { name: "fixed".into(), version: "1".into() }
        }
    }

    fn entry(id: &str, t: &str, broad: &str, e: [f32; 3]) -> CatalogEntry {
        CatalogEntry {
            product_id: id.into(),
            article_type: t.into(),
            broad_category: broad.into(),
            embedding: e.to_vec(),
            metadata: Default::default(),
        }
    }

    fn registry(catalog: Vec<CatalogEntry>) -> ModelRegistry {
        let mut embedders: BTreeMap<String, Box<dyn Embedder>> = BTreeMap::new();
        for b in ["Topwear", "BottomWear", "Footwear"] {
            embedders.insert(b.into(), Box::new(MeanColour));
        }
        ModelRegistry {
            version: "test-1".into(),
            taxonomy: ArticleTaxonomy::default(),
            keypoints: Box::new(PixelKeypoints(KeypointSchema::coco17())),
            pose: Box::new(PixelPose),
            detector: Box::new(FixedDetector(planted())),
            embedders,
            index: CatalogIndex::build(catalog).unwrap(),
            config: PipelineConfig::default(),
        }
    }

    fn catalog() -> Vec<CatalogEntry> {
        let mut c = vec![
            entry("tee-red", "T-shirts", "Topwear", [251.0, 11.0, 11.0]),
            entry("tee-pink", "T-shirts", "Topwear", [250.0, 120.0, 120.0]),
            entry("tee-dark", "T-shirts", "Topwear", [90.0, 11.0, 11.0]),
            entry("jeans-green", "Jeans", "BottomWear", [11.0, 251.0, 11.0]),
            entry("jeans-olive", "Jeans", "BottomWear", [120.0, 160.0, 11.0]),
            entry("shoes-blue", "Casual shoes", "Footwear", [11.0, 11.0, 251.0]),
            entry("shoes-navy", "Casual shoes", "Footwear", [11.0, 11.0, 100.0]),
        ];
        c.reverse();
        c
    }

    fn source(images: Vec<(&str, RgbImage)>) -> MemoryImageSource {
        MemoryImageSource {
            images: images.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    fn req(images: &[&str], ugc: bool) -> PdpRequest {
        PdpRequest {
            request_id: "r1".into(),
            images: images.iter().map(|s| s.to_string()).collect(),
            ugc,
            k: None,
        }
    }

    #[test]
    fn selects_the_only_front_full_shot() {
        let imgs = vec![
            ("back".to_string(), Some(shot(255, 255, 10))),
            ("nohead".to_string(), Some(shot(0, 255, 250))),
            ("front".to_string(), Some(shot(255, 255, 240))),
            ("noankle".to_string(), Some(shot(255, 100, 250))),
        ];
        let (c, reasons, _) = select_full_shot(&imgs, &PixelKeypoints(KeypointSchema::coco17()), &PixelPose, 0.5).unwrap();
        assert_eq!(c, Some(2));
        let codes: Vec<_> = reasons.iter().map(|r| (r.image.as_str(), r.reason)).collect();
        assert_eq!(
            codes,
            vec![
                ("back", RejectionReason::NotFront),
                ("nohead", RejectionReason::NoFullShot),
                ("noankle", RejectionReason::NoFullShot)
            ]
        );
    }

    #[test]
    fn selection_edge_cases() {
        let kp = PixelKeypoints(KeypointSchema::coco17());
        let none = vec![("a".to_string(), Some(shot(0, 0, 255))), ("b".to_string(), Some(shot(10, 255, 255)))];
        let (c, reasons, _) = select_full_shot(&none, &kp, &PixelPose, 0.5).unwrap();
        assert_eq!(c, None);
        assert!(reasons.iter().all(|r| r.reason == RejectionReason::NoFullShot));
        let two = vec![
            ("p7".to_string(), Some(shot(255, 255, 178))),
            ("p9".to_string(), Some(shot(255, 255, 230))),
        ];
        let (c, reasons, _) = select_full_shot(&two, &kp, &PixelPose, 0.5).unwrap();
        assert_eq!(c, Some(1));
        assert_eq!(reasons[0].reason, RejectionReason::LowerFrontConfidence);
        let broken = vec![("x".to_string(), None), ("y".to_string(), None)];
        assert!(select_full_shot(&broken, &kp, &PixelPose, 0.5).is_err());
        let mixed = vec![("x".to_string(), None), ("f".to_string(), Some(shot(255, 255, 255)))];
        let (c, reasons, _) = select_full_shot(&mixed, &kp, &PixelPose, 0.5).unwrap();
        assert_eq!(c, Some(1));
        assert_eq!(reasons[0].reason, RejectionReason::Undecodable);
    }

    #[test]
    fn planted_articles_retrieve_their_items() {
        let reg = registry(catalog());
        let src = source(vec![("back", shot(255, 255, 0)), ("front", shot(255, 255, 255))]);
        let rec = recommend_look(&req(&["back", "front"], false), &reg, 14, &src).unwrap();
        assert_eq!(rec.selected_image.as_deref(), Some("front"));
        assert_eq!(rec.per_article.len(), 3);
        let tops: Vec<_> = rec.per_article.iter().map(|a| a.result.ranked[0].product_id.as_str()).collect();
        assert_eq!(tops, vec!["tee-red", "jeans-green", "shoes-blue"]);
        for a in &rec.per_article {
            for r in &a.result.ranked {
                assert_eq!(reg.index.get(&r.product_id).unwrap().article_type, a.detection.article_type);
            }
        }
        let (again, timings) = profile_request(&req(&["back", "front"], false), &reg, 14, &src).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&rec).unwrap());
        let stages: Vec<_> = timings.iter().map(|t| t.stage).collect();
        assert_eq!(stages, vec![Stage::Keypoints, Stage::Pose, Stage::Detect, Stage::Embed, Stage::Retrieve]);
        assert!(timings.iter().all(|t| t.elapsed_ms >= 0.0));
    }

    #[test]
    fn ugc_skips_selection() {
        let reg = registry(catalog());
        let src = source(vec![("ugc", shot(0, 0, 0))]);
        let (rec, timings) = profile_request(&req(&["ugc"], true), &reg, 3, &src).unwrap();
        assert_eq!(rec.selected_image.as_deref(), Some("ugc"));
        assert_eq!(rec.per_article.len(), 3);
        assert!(timings.iter().all(|t| !matches!(t.stage, Stage::Keypoints | Stage::Pose)));
        assert!(profile_request(&req(&["a", "b"], true), &reg, 3, &src).is_err());
    }

    #[test]
    fn failures_stay_per_article() {
        let cat: Vec<_> = catalog().into_iter().filter(|e| e.article_type != "Jeans").collect();
        let mut reg = registry(cat);
        reg.embedders.remove("Footwear");
        let src = source(vec![("f", shot(255, 255, 255))]);
        let rec = recommend_look(&req(&["f"], false), &reg, 5, &src).unwrap();
        let failures: Vec<_> = rec.per_article.iter().map(|a| a.failure).collect();
        assert_eq!(failures, vec![None, Some(ArticleFailure::EmptyIndex), Some(ArticleFailure::NoModel)]);
        assert!(rec.per_article[1].result.ranked.is_empty());
        assert_eq!(rec.per_article[0].result.ranked[0].product_id, "tee-red");
    }

    #[test]
    fn no_selection_means_no_articles() {
        let reg = registry(catalog());
        let src = source(vec![("a", shot(0, 255, 255))]);
        let (rec, timings) = profile_request(&req(&["a"], false), &reg, 5, &src).unwrap();
        assert!(rec.selected_image.is_none());
        assert!(rec.per_article.is_empty());
        assert_eq!(timings.iter().map(|t| t.stage).collect::<Vec<_>>(), vec![Stage::Keypoints]);
    }

    #[test]
    fn hot_swap_keeps_existing_snapshots() {
        let handle = RegistryHandle::new(registry(catalog()));
        let before = handle.snapshot();
        let mut next = registry(catalog());
        next.version = "test-2".into();
        handle.swap(next);
        assert_eq!(before.version, "test-1");
        assert_eq!(handle.snapshot().version, "test-2");
    }

    proptest! {
        #[test]
        fn results_are_prefix_monotone_in_k(j in 1usize..4, extra in 0usize..4) {
            let reg = registry(catalog());
            let src = source(vec![("f", shot(255, 255, 255))]);
            let small = recommend_look(&req(&["f"], false), &reg, j, &src).unwrap();
            let large = recommend_look(&req(&["f"], false), &reg, j + extra, &src).unwrap();
            for (s, l) in small.per_article.iter().zip(&large.per_article) {
                prop_assert!(s.result.ranked.len() <= j);
                prop_assert_eq!(&s.result.ranked[..], &l.result.ranked[..s.result.ranked.len()]);
            }
        }
    }
}

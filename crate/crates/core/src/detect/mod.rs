//! Article detection contract, taxonomy, box matching, AP evaluation and ROI cropping.

mod centernet;

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{LookError, Result};
use crate::vision::LoadedImage;

pub use centernet::{CenterNetConfig, CenterNetDetector, DetectorTrainOptions};

/// Broad category -> finer article types, in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArticleTaxonomy {
    pub broad_categories: IndexMap<String, Vec<String>>,
}

impl ArticleTaxonomy {
    pub fn new(broad_categories: IndexMap<String, Vec<String>>) -> Result<Self> {
        let t = ArticleTaxonomy { broad_categories };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: ArticleTaxonomy = crate::io::read_json(path)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (broad, finer) in &self.broad_categories {
            if finer.is_empty() {
                return Err(LookError::Config(format!("broad category `{broad}` has no article types")));
            }
            for f in finer {
                if !seen.insert(f.as_str()) {
                    return Err(LookError::Config(format!("article type `{f}` listed twice")));
                }
            }
        }
        Ok(())
    }

    pub fn broad_of(&self, article_type: &str) -> Option<&str> {
        self.broad_categories
            .iter()
            .find(|(_, finer)| finer.iter().any(|f| f == article_type))
            .map(|(b, _)| b.as_str())
    }

    pub fn contains(&self, article_type: &str) -> bool {
        self.broad_of(article_type).is_some()
    }

    pub fn finer_types(&self) -> impl Iterator<Item = &str> {
        self.broad_categories.values().flatten().map(String::as_str)
    }

    pub fn broad_names(&self) -> impl Iterator<Item = &str> {
        self.broad_categories.keys().map(String::as_str)
    }
}

impl Default for ArticleTaxonomy {
    fn default() -> Self {
        let table: [(&str, &[&str]); 7] = [
            ("Topwear", &["Women tops", "Shirts", "T-shirts"]),
            (
                "Outerwear",
                &["Sweaters", "SweatShirts", "Jackets", "Blazers", "Shrug", "NehruJackets"],
            ),
            (
                "BottomWear",
                &["Jeans", "Trousers", "Shorts", "Track pants", "Palazzos", "Capris"],
            ),
            ("Skirts", &["Skirts"]),
            ("Dresses", &["Women dress"]),
            ("Footwear", &["Sports shoes", "Casual shoes"]),
            ("Bags", &["Hand bags"]),
        ];
        ArticleTaxonomy {
            broad_categories: table
                .iter()
                .map(|(b, f)| (b.to_string(), f.iter().map(|s| s.to_string()).collect()))
                .collect(),
        }
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(LookError::Validation(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        BoundingBox {
            x_min: self.x_min * s,
            y_min: self.y_min * s,
            x_max: self.x_max * s,
            y_max: self.y_max * s,
        }
    }

    /// Clamp to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<Self> {
        let b = BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub article_type: String,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self, taxonomy: &ArticleTaxonomy) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(LookError::Validation(format!("score {} outside [0, 1]", self.score)));
        }
        if !taxonomy.contains(&self.article_type) {
            return Err(LookError::Validation(format!(
                "article type `{}` is not in the taxonomy",
                self.article_type
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub article_type: String,
    /// Review candidates whose verdicts shaped this box.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrected_by: Vec<String>,
}

impl GroundTruth {
    pub fn new(bbox: BoundingBox, article_type: impl Into<String>) -> Self {
        GroundTruth {
            bbox,
            article_type: article_type.into(),
            corrected_by: Vec::new(),
        }
    }
}

/// Ground-truth manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_path: String,
    pub boxes: Vec<GroundTruth>,
}

/// Detections file line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetRecord {
    pub image_path: String,
    pub boxes: Vec<Detection>,
}

fn check_threshold(iou_thresh: f64) -> Result<()> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(LookError::InvalidArgument(format!(
            "IoU threshold {iou_thresh} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Greedy matching in descending score order (stable, so equal scores keep
/// input order). Each detection takes the unmatched same-class ground truth
/// with the highest IoU, provided it reaches `iou_thresh`. Returned flags are
/// aligned with the input order of `dets`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Result<Vec<bool>> {
    check_threshold(iou_thresh)?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.article_type != d.article_type {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    Ok(flags)
}

/// All-point interpolated AP for detections already in descending score order.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (rank, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // Monotone precision envelope, scanned from the tail.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Unweighted mean over classes with ground truth.
pub fn mean_average_precision(per_class: &BTreeMap<String, ClassAp>) -> Result<f64> {
    let evaluable: Vec<f64> = per_class.values().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    if evaluable.is_empty() {
        return Err(LookError::NoEvaluableClass);
    }
    Ok(evaluable.iter().sum::<f64>() / evaluable.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Finer,
    Broad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: BTreeMap<String, ClassAp>,
    pub map: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap,num_gt,num_det\n");
        for (name, c) in &self.per_class {
            out.push_str(&format!("{},{:.6},{},{}\n", csv_field(name), c.ap, c.num_gt, c.num_det));
        }
        out.push_str(&format!("mAP,{:.6},,\n", self.map));
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Dataset-level evaluation. Images are paired by `image_path`; detections
/// for images without a ground-truth record count as false positives.
/// Classes are finer article types or, with [`Granularity::Broad`], their
/// taxonomy parents.
pub fn evaluate_detections(
    gts: &[GtRecord],
    dets: &[DetRecord],
    iou_thresh: f64,
    granularity: Granularity,
    taxonomy: &ArticleTaxonomy,
) -> Result<EvalReport> {
    check_threshold(iou_thresh)?;
    let class_of = |t: &str| -> String {
        match granularity {
            Granularity::Finer => t.to_string(),
            Granularity::Broad => taxonomy.broad_of(t).unwrap_or(t).to_string(),
        }
    };
    let gt_by_image: BTreeMap<&str, &GtRecord> = gts.iter().map(|r| (r.image_path.as_str(), r)).collect();
    let mut per_class: BTreeMap<String, (usize, Vec<(f64, bool)>)> = BTreeMap::new();
    for r in gts {
        for g in &r.boxes {
            per_class.entry(class_of(&g.article_type)).or_default().0 += 1;
        }
    }
    for r in dets {
        let image_gts: Vec<GroundTruth> = gt_by_image
            .get(r.image_path.as_str())
            .map(|g| {
                g.boxes
                    .iter()
                    .map(|b| GroundTruth::new(b.bbox, class_of(&b.article_type)))
                    .collect()
            })
            .unwrap_or_default();
        let mapped: Vec<Detection> = r
            .boxes
            .iter()
            .map(|d| Detection { article_type: class_of(&d.article_type), ..d.clone() })
            .collect();
        let flags = match_detections(&mapped, &image_gts, iou_thresh)?;
        for (d, f) in mapped.iter().zip(flags) {
            per_class.entry(d.article_type.clone()).or_default().1.push((d.score, f));
        }
    }
    let per_class: BTreeMap<String, ClassAp> = per_class
        .into_iter()
        .map(|(name, (num_gt, mut hits))| {
            hits.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = hits.iter().map(|h| h.1).collect();
            let ap = average_precision(&flags, num_gt);
            (name, ClassAp { ap, num_gt, num_det: hits.len() })
        })
        .collect();
    let map = mean_average_precision(&per_class)?;
    Ok(EvalReport { iou_threshold: iou_thresh, per_class, map })
}

/// One cropped region handed to the embedding stage.
#[derive(Clone, Debug)]
pub struct Roi {
    pub article_type: String,
    pub score: f64,
    /// Padded, clamped box the crop was cut from.
    pub bbox: BoundingBox,
    pub image: RgbImage,
}

/// Expands each box by `pad_fraction` of its width/height per side, clamps it
/// to the image and cuts pixels `floor(min) .. ceil(max)`. Boxes that vanish
/// after clamping are skipped.
pub fn crop_rois(image: &RgbImage, dets: &[Detection], pad_fraction: f64) -> Result<Vec<Roi>> {
    if !(pad_fraction >= 0.0) {
        return Err(LookError::InvalidArgument("pad_fraction must be non-negative".into()));
    }
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let b = &d.bbox;
        let px = pad_fraction * b.width();
        let py = pad_fraction * b.height();
        let padded = BoundingBox {
            x_min: b.x_min - px,
            y_min: b.y_min - py,
            x_max: b.x_max + px,
            y_max: b.y_max + py,
        };
        let Some(c) = padded.clamp_to(w, h) else {
            log::warn!("skipping {} ROI: box {:?} is empty inside the image", d.article_type, b);
            continue;
        };
        let (x0, y0) = (c.x_min.floor() as u32, c.y_min.floor() as u32);
        let (x1, y1) = (c.x_max.ceil() as u32, c.y_max.ceil() as u32);
        if x1 <= x0 || y1 <= y0 {
            log::warn!("skipping {} ROI: degenerate crop", d.article_type);
            continue;
        }
        let crop = image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
        out.push(Roi {
            article_type: d.article_type.clone(),
            score: d.score,
            bbox: c,
            image: crop,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorMetadata {
    pub name: String,
    pub version: String,
}

/// Anything that turns an image into article detections.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>>;
    fn metadata(&self) -> DetectorMetadata;
}

/// Serves precomputed detections keyed by image reference. Lookups try the
/// full id first and then the file name. Unknown images yield no detections.
#[derive(Clone, Debug, Default)]
pub struct ReplayDetector {
    by_image: BTreeMap<String, Vec<Detection>>,
    version: String,
}

impl ReplayDetector {
    pub fn new(records: Vec<DetRecord>) -> Self {
        let by_image = records.into_iter().map(|r| (r.image_path, r.boxes)).collect();
        ReplayDetector { by_image, version: "1".into() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut d = Self::new(crate::io::read_jsonl(path)?);
        d.version = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(d)
    }

    pub fn records(&self) -> Vec<DetRecord> {
        self.by_image
            .iter()
            .map(|(k, v)| DetRecord { image_path: k.clone(), boxes: v.clone() })
            .collect()
    }
}

fn file_name(id: &str) -> &str {
    id.rsplit(['/', '\\']).next().unwrap_or(id)
}

impl Detector for ReplayDetector {
    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>> {
        if let Some(d) = self.by_image.get(&image.id) {
            return Ok(d.clone());
        }
        let name = file_name(&image.id);
        Ok(self
            .by_image
            .iter()
            .find(|(k, _)| file_name(k) == name)
            .map(|(_, v)| v.clone())
            .unwrap_or_default())
    }

    fn metadata(&self) -> DetectorMetadata {
        DetectorMetadata { name: "replay".into(), version: self.version.clone() }
    }
}

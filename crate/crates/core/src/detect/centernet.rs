//! Small single-stage, anchor-free detector.
//!
//! Each output cell predicts a per-class centre heatmap, the box size in cells
//! and the sub-cell offset of the centre. Heatmaps are trained with a
//! penalty-reduced focal loss against Gaussian splats, size and offset with
//! L1 at the centre cells only.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Detection, Detector, DetectorMetadata, GroundTruth};
use crate::error::{LookError, Result};
use crate::nn::{
    self, build_backbone, Adam, BackboneDepth, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Relu,
    Sequential,
};
use crate::vision::{to_chw, LoadedImage};

const FOCAL_ALPHA: f32 = 2.0;
const FOCAL_BETA: f32 = 4.0;
const SIZE_WEIGHT: f32 = 0.1;
const PRIOR_BIAS: f32 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterNetConfig {
    pub classes: Vec<String>,
    pub backbone_depth: BackboneDepth,
    pub backbone_width: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub deconv_layers: usize,
    pub deconv_filters: usize,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl CenterNetConfig {
    pub fn desk(classes: Vec<String>) -> Self {
        CenterNetConfig {
            classes,
            backbone_depth: BackboneDepth::Tiny,
            backbone_width: 8,
            input_height: 64,
            input_width: 32,
            deconv_layers: 2,
            deconv_filters: 16,
            score_threshold: 0.3,
            max_detections: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(LookError::Config("detector needs at least one class".into()));
        }
        if self.deconv_layers == 0 || self.deconv_layers > 3 {
            return Err(LookError::Config("deconv_layers must be 1..=3".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(LookError::Config("score_threshold outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for DetectorTrainOptions {
    fn default() -> Self {
        DetectorTrainOptions {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 5,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Stored {
    config: CenterNetConfig,
    version: String,
}

pub struct CenterNetDetector {
    config: CenterNetConfig,
    net: Sequential,
    /// Output cell size in model-input pixels.
    out_stride: usize,
    version: String,
}

const CHECKPOINT_KIND: &str = "detector";

struct Targets {
    heat: Array3<f32>,
    /// (row, col, class, w, h, off_x, off_y) per object.
    centres: Vec<(usize, usize, usize, f32, f32, f32, f32)>,
}

impl CenterNetDetector {
    fn build(config: &CenterNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = nn::seeded_rng(seed);
        let backbone = build_backbone(config.backbone_depth, 3, config.backbone_width, &mut rng);
        let mut net = backbone.layers;
        let mut channels = backbone.out_channels;
        for _ in 0..config.deconv_layers {
            net.push(ConvTranspose2d::new(channels, config.deconv_filters, 4, 2, 1, &mut rng));
            net.push(BatchNorm2d::new(config.deconv_filters));
            net.push(Relu::default());
            channels = config.deconv_filters;
        }
        let c = config.classes.len();
        let mut head = Conv2d::new(channels, c + 4, 3, 1, 1, true, &mut rng);
        if let Some(bias) = head.params_mut().into_iter().nth(1) {
            for k in 0..c {
                bias.value[[k]] = PRIOR_BIAS;
            }
        }
        net.push(head);
        let out_stride = (backbone.stride >> config.deconv_layers).max(1);
        Ok(CenterNetDetector {
            config: config.clone(),
            net,
            out_stride,
            version: format!("seed-{seed}"),
        })
    }

    pub fn config(&self) -> &CenterNetConfig {
        &self.config
    }

    fn out_shape(&self) -> (usize, usize) {
        (
            self.config.input_height / self.out_stride,
            self.config.input_width / self.out_stride,
        )
    }

    fn targets(&self, img_w: f64, img_h: f64, boxes: &[GroundTruth]) -> Result<Targets> {
        let (oh, ow) = self.out_shape();
        let c = self.config.classes.len();
        let sx = ow as f64 / img_w;
        let sy = oh as f64 / img_h;
        let mut heat = Array3::<f32>::zeros((c, oh, ow));
        let mut centres = Vec::new();
        for g in boxes {
            let class = self
                .config
                .classes
                .iter()
                .position(|n| *n == g.article_type)
                .ok_or_else(|| LookError::Validation(format!("detector has no class `{}`", g.article_type)))?;
            let w = g.bbox.width() * sx;
            let h = g.bbox.height() * sy;
            let cx = (g.bbox.x_min + g.bbox.x_max) / 2.0 * sx;
            let cy = (g.bbox.y_min + g.bbox.y_max) / 2.0 * sy;
            let col = (cx.floor().max(0.0) as usize).min(ow - 1);
            let row = (cy.floor().max(0.0) as usize).min(oh - 1);
            let sig_x = (w / 6.0).max(0.5);
            let sig_y = (h / 6.0).max(0.5);
            for r in 0..oh {
                for q in 0..ow {
                    let dx = (q as f64 - col as f64) / sig_x;
                    let dy = (r as f64 - row as f64) / sig_y;
                    let v = (-(dx * dx + dy * dy) / 2.0).exp() as f32;
                    let cell = &mut heat[[class, r, q]];
                    *cell = cell.max(v);
                }
            }
            centres.push((
                row,
                col,
                class,
                w as f32,
                h as f32,
                (cx - col as f64) as f32,
                (cy - row as f64) as f32,
            ));
        }
        Ok(Targets { heat, centres })
    }

    pub fn train(
        samples: &[(RgbImage, Vec<GroundTruth>)],
        config: &CenterNetConfig,
        options: &DetectorTrainOptions,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(LookError::Config("detector dataset is empty".into()));
        }
        let mut model = Self::build(config, options.seed)?;
        let inputs: Vec<_> = samples
            .iter()
            .map(|(img, _)| to_chw(img, config.input_height, config.input_width))
            .collect();
        let targets: Vec<Targets> = samples
            .iter()
            .map(|(img, boxes)| model.targets(img.width() as f64, img.height() as f64, boxes))
            .collect::<Result<_>>()?;
        let c = config.classes.len();
        let mut rng = nn::seeded_rng(options.seed ^ 0xde7);
        let mut opt = Adam::new(options.learning_rate);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..options.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            for batch in order.chunks(options.batch_size.max(1)) {
                let x = nn::stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
                model.net.zero_grad();
                let y = model.net.forward_train(&x);
                let num_pos = batch.iter().map(|&i| targets[i].centres.len()).sum::<usize>().max(1) as f32;
                let mut grad = Array4::<f32>::zeros(y.raw_dim());
                for (bi, &i) in batch.iter().enumerate() {
                    let t = &targets[i];
                    for ((k, r, q), &tv) in t.heat.indexed_iter() {
                        let z = y[[bi, k, r, q]];
                        let p = sigmoid(z).clamp(1e-6, 1.0 - 1e-6);
                        let (loss, g) = if tv >= 1.0 {
                            let omp = 1.0 - p;
                            (
                                -omp.powf(FOCAL_ALPHA) * p.ln(),
                                omp.powf(FOCAL_ALPHA) * (FOCAL_ALPHA * p * p.ln() - omp),
                            )
                        } else {
                            let w = (1.0 - tv).powf(FOCAL_BETA);
                            let pa = p.powf(FOCAL_ALPHA);
                            let l1p = (1.0 - p).ln();
                            (-w * pa * l1p, -w * pa * (FOCAL_ALPHA * (1.0 - p) * l1p - p))
                        };
                        epoch_loss += (loss / num_pos) as f64;
                        grad[[bi, k, r, q]] = g / num_pos;
                    }
                    for &(r, q, _, w, h, ox, oy) in &t.centres {
                        let regress = [(c, w, SIZE_WEIGHT), (c + 1, h, SIZE_WEIGHT), (c + 2, ox, 1.0), (c + 3, oy, 1.0)];
                        for (ch, target, weight) in regress {
                            let d = y[[bi, ch, r, q]] - target;
                            epoch_loss += (weight * d.abs() / num_pos) as f64;
                            grad[[bi, ch, r, q]] += weight * d.signum() / num_pos;
                        }
                    }
                }
                model.net.backward(&grad);
                opt.step(model.net.params_mut());
            }
            log::debug!("detector epoch {epoch}: loss {epoch_loss:.4}");
        }
        model.version = format!("seed-{}-epochs-{}", options.seed, options.epochs);
        Ok(model)
    }

    /// Peaks of the class heatmaps (3x3 local maxima above the score
    /// threshold), best first, mapped back to image pixels.
    pub fn detect_image(&self, image: &RgbImage) -> Vec<Detection> {
        let (oh, ow) = self.out_shape();
        let c = self.config.classes.len();
        let x = to_chw(image, self.config.input_height, self.config.input_width).insert_axis(Axis(0));
        let y = self.net.forward(&x);
        let y = y.index_axis(Axis(0), 0);
        let (img_w, img_h) = (image.width() as f64, image.height() as f64);
        let sx = img_w / ow as f64;
        let sy = img_h / oh as f64;
        let thr = self.config.score_threshold as f32;
        let mut peaks: Vec<(f32, usize, usize, usize)> = Vec::new();
        for k in 0..c {
            let heat = y.index_axis(Axis(0), k).mapv(sigmoid);
            for r in 0..oh {
                for q in 0..ow {
                    let p = heat[[r, q]];
                    if p < thr {
                        continue;
                    }
                    let mut is_peak = true;
                    for dr in -1i64..=1 {
                        for dq in -1i64..=1 {
                            let (rr, qq) = (r as i64 + dr, q as i64 + dq);
                            if (dr, dq) == (0, 0) || rr < 0 || qq < 0 || rr >= oh as i64 || qq >= ow as i64 {
                                continue;
                            }
                            let v = heat[[rr as usize, qq as usize]];
                            // Plateaus keep only their first cell in scan order.
                            let earlier = (dr, dq) < (0, 0);
                            if v > p || (earlier && v == p) {
                                is_peak = false;
                            }
                        }
                    }
                    if is_peak {
                        peaks.push((p, k, r, q));
                    }
                }
            }
        }
        peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
        peaks.truncate(self.config.max_detections);
        peaks
            .into_iter()
            .filter_map(|(p, k, r, q)| {
                let w = y[[c, r, q]].max(0.0) as f64 * sx;
                let h = y[[c + 1, r, q]].max(0.0) as f64 * sy;
                let cx = (q as f64 + y[[c + 2, r, q]] as f64) * sx;
                let cy = (r as f64 + y[[c + 3, r, q]] as f64) * sy;
                let bbox = BoundingBox {
                    x_min: cx - w / 2.0,
                    y_min: cy - h / 2.0,
                    x_max: cx + w / 2.0,
                    y_max: cy + h / 2.0,
                }
                .clamp_to(img_w, img_h)?;
                Some(Detection {
                    bbox,
                    article_type: self.config.classes[k].clone(),
                    score: (p as f64).clamp(0.0, 1.0),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (shapes, data) = self.net.export_weights();
        let stored = Stored {
            config: self.config.clone(),
            version: self.version.clone(),
        };
        nn::write_checkpoint(path, CHECKPOINT_KIND, &stored, shapes, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::read_checkpoint(path, CHECKPOINT_KIND)?;
        let stored: Stored = serde_json::from_value(ck.config)?;
        let mut model = Self::build(&stored.config, 0)?;
        model.net.import_weights(&ck.shapes, &ck.data)?;
        model.version = stored.version;
        Ok(model)
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

impl Detector for CenterNetDetector {
    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>> {
        Ok(self.detect_image(&image.pixels))
    }

    fn metadata(&self) -> DetectorMetadata {
        DetectorMetadata {
            name: "centernet".into(),
            version: self.version.clone(),
        }
    }
}

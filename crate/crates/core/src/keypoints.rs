//! Heatmap-based human keypoint model and the full-shot heuristic.
//!
//! The network is a residual backbone followed by a stack of transposed
//! convolutions (batch norm + ReLU) and a 1x1 convolution that emits one
//! heatmap per keypoint. Training regresses unnormalised Gaussian targets
//! with a mean squared error.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LookError, Result};
use crate::nn::{
    self, build_backbone, Adam, BackboneDepth, BatchNorm2d, Conv2d, ConvTranspose2d, Layer,
    Relu, Sequential,
};
use crate::vision::to_chw;

pub const COCO_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSchema {
    pub names: Vec<String>,
    pub head_group: Vec<String>,
    pub ankle_group: Vec<String>,
}

impl KeypointSchema {
    pub fn new(names: Vec<String>, head_group: Vec<String>, ankle_group: Vec<String>) -> Result<Self> {
        let schema = KeypointSchema {
            names,
            head_group,
            ankle_group,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// 17-point COCO layout; head = nose, eyes and ears.
    pub fn coco17() -> Self {
        let names: Vec<String> = COCO_KEYPOINTS.iter().map(|s| s.to_string()).collect();
        KeypointSchema {
            head_group: names[..5].to_vec(),
            ankle_group: names[15..].to_vec(),
            names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.names {
            if !seen.insert(n) {
                return Err(LookError::Schema(format!("duplicate keypoint name `{n}`")));
            }
        }
        if self.head_group.is_empty() || self.ankle_group.is_empty() {
            return Err(LookError::Schema("head and ankle groups must be non-empty".into()));
        }
        for n in self.head_group.iter().chain(&self.ankle_group) {
            if !seen.contains(n) {
                return Err(LookError::Schema(format!("group member `{n}` is not a keypoint")));
            }
        }
        if self.head_group.iter().any(|h| self.ankle_group.contains(h)) {
            return Err(LookError::Schema("head and ankle groups overlap".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for KeypointSchema {
    fn default() -> Self {
        KeypointSchema::coco17()
    }
}

/// One keypoint's H x W grid; `stride` maps cells back to image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f32>,
    pub stride: usize,
}

impl Heatmap {
    pub fn new(values: Array2<f32>, stride: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LookError::InvalidArgument(
                "heatmap values must be finite and non-negative".into(),
            ));
        }
        Ok(Heatmap {
            values,
            stride: stride.max(1),
        })
    }

    pub fn zeros(height: usize, width: usize, stride: usize) -> Self {
        Heatmap {
            values: Array2::zeros((height, width)),
            stride: stride.max(1),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Gaussian bump `exp(-d^2 / (2 sigma^2))` centred on the image point `(x, y)`
/// mapped into cells by the grid stride. `sigma` is in cells.
pub fn make_target_heatmap(x: f64, y: f64, grid: GridShape, sigma: f64) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(LookError::InvalidArgument("sigma must be positive".into()));
    }
    let stride = grid.stride.max(1) as f64;
    let (cx, cy) = (x / stride, y / stride);
    if !(cx >= 0.0 && cy >= 0.0 && cx < grid.width as f64 && cy < grid.height as f64) {
        return Err(LookError::OutOfBounds {
            x,
            y,
            width: grid.width,
            height: grid.height,
        });
    }
    let denom = 2.0 * sigma * sigma;
    let values = Array2::from_shape_fn((grid.height, grid.width), |(row, col)| {
        let dx = col as f64 - cx;
        let dy = row as f64 - cy;
        (-(dx * dx + dy * dy) / denom).exp() as f32
    });
    Ok(Heatmap {
        values,
        stride: grid.stride.max(1),
    })
}

fn check_pairs(predicted: &[Heatmap], target: &[Heatmap]) -> Result<()> {
    if predicted.len() != target.len() {
        return Err(LookError::Dimension {
            expected: target.len(),
            got: predicted.len(),
        });
    }
    for (p, t) in predicted.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(LookError::Shape(format!(
                "heatmap {:?} vs target {:?}",
                p.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Mean squared difference over every cell of every keypoint.
pub fn heatmap_l2_loss(predicted: &[Heatmap], target: &[Heatmap]) -> Result<f64> {
    check_pairs(predicted, target)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(target) {
        for (a, b) in p.values.iter().zip(t.values.iter()) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
        count += p.values.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of [`heatmap_l2_loss`] with respect to each predicted cell.
pub fn heatmap_l2_loss_grad(predicted: &[Heatmap], target: &[Heatmap]) -> Result<Vec<Array2<f64>>> {
    check_pairs(predicted, target)?;
    let count: usize = predicted.iter().map(|p| p.values.len()).sum();
    let scale = 2.0 / count.max(1) as f64;
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            Array2::from_shape_fn(p.shape(), |ix| scale * (p.values[ix] as f64 - t.values[ix] as f64))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Decoded keypoints in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn get(&self, name: &str) -> Option<&Keypoint> {
        self.points.iter().find(|p| p.name == name)
    }
}

/// Argmax decoding: location = argmax cell x stride, confidence = peak clamped
/// to [0, 1]. Ties go to the smallest row, then the smallest column.
pub fn decode_heatmaps(heatmaps: &[Heatmap], stride: usize, schema: &KeypointSchema) -> Result<KeypointSet> {
    if heatmaps.len() != schema.len() {
        return Err(LookError::Dimension {
            expected: schema.len(),
            got: heatmaps.len(),
        });
    }
    let stride = stride.max(1) as f64;
    let points = heatmaps
        .iter()
        .zip(&schema.names)
        .map(|(hm, name)| {
            let (mut best_row, mut best_col, mut best) = (0usize, 0usize, f32::NEG_INFINITY);
            for ((row, col), &v) in hm.values.indexed_iter() {
                // Row-major scan with strict `>` keeps the first maximum.
                if v > best {
                    best = v;
                    best_row = row;
                    best_col = col;
                }
            }
            let confidence = if best.is_finite() { best.clamp(0.0, 1.0) as f64 } else { 0.0 };
            Keypoint {
                name: name.clone(),
                x: best_col as f64 * stride,
                y: best_row as f64 * stride,
                confidence,
            }
        })
        .collect();
    Ok(KeypointSet { points })
}

/// True iff at least one head keypoint and every ankle keypoint reach `conf_threshold`.
pub fn is_full_shot(kps: &KeypointSet, schema: &KeypointSchema, conf_threshold: f64) -> Result<bool> {
    if kps.points.len() != schema.len()
        || kps.points.iter().zip(&schema.names).any(|(p, n)| &p.name != n)
    {
        return Err(LookError::Schema("keypoint set does not follow the schema".into()));
    }
    let conf = |name: &String| kps.get(name).map(|p| p.confidence).unwrap_or(0.0);
    let head = schema.head_group.iter().any(|n| conf(n) >= conf_threshold);
    let ankles = schema.ankle_group.iter().all(|n| conf(n) >= conf_threshold);
    Ok(head && ankles)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointModelConfig {
    pub backbone_depth: BackboneDepth,
    /// Channels of the first backbone stage.
    pub backbone_width: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub deconv_layers: usize,
    pub deconv_filters: usize,
    pub deconv_kernel: usize,
    pub deconv_stride: usize,
    /// Target Gaussian width, in heatmap cells.
    pub heatmap_sigma: f64,
}

impl Default for KeypointModelConfig {
    /// Simple-baseline head: three 4x4 stride-2 deconvolutions with 256 filters.
    fn default() -> Self {
        KeypointModelConfig {
            backbone_depth: BackboneDepth::ResNet50,
            backbone_width: 64,
            input_height: 256,
            input_width: 192,
            deconv_layers: 3,
            deconv_filters: 256,
            deconv_kernel: 4,
            deconv_stride: 2,
            heatmap_sigma: 2.0,
        }
    }
}

impl KeypointModelConfig {
    /// Small network for the synthetic 128x64 figures.
    pub fn desk() -> Self {
        KeypointModelConfig {
            backbone_depth: BackboneDepth::Tiny,
            backbone_width: 8,
            input_height: 64,
            input_width: 32,
            deconv_layers: 2,
            deconv_filters: 16,
            deconv_kernel: 4,
            deconv_stride: 2,
            heatmap_sigma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deconv_layers < 1 {
            return Err(LookError::Config("deconv_layers must be at least 1".into()));
        }
        if self.deconv_stride < 1 {
            return Err(LookError::Config("deconv_stride must be at least 1".into()));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(LookError::Config("heatmap_sigma must be positive".into()));
        }
        if self.deconv_kernel < self.deconv_stride || (self.deconv_kernel - self.deconv_stride) % 2 != 0 {
            return Err(LookError::Config(
                "deconv_kernel - deconv_stride must be a non-negative even number".into(),
            ));
        }
        if self.backbone_width == 0 || self.deconv_filters == 0 {
            return Err(LookError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for KeypointTrainOptions {
    fn default() -> Self {
        KeypointTrainOptions {
            epochs: 50,
            batch_size: 8,
            learning_rate: 4e-3,
            seed: 7,
        }
    }
}

/// One annotated image: `keypoints[i] = [x, y, visible]` in schema order.
#[derive(Clone, Debug)]
pub struct KeypointSample {
    pub image: RgbImage,
    pub keypoints: Vec<[f32; 3]>,
}

/// Dataset manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub image_path: String,
    pub keypoints: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct StoredKeypointModel {
    config: KeypointModelConfig,
    schema: KeypointSchema,
}

pub struct KeypointModel {
    config: KeypointModelConfig,
    schema: KeypointSchema,
    net: Sequential,
    heatmap_stride: usize,
}

const CHECKPOINT_KIND: &str = "keypoints";

impl KeypointModel {
    fn build(config: &KeypointModelConfig, schema: &KeypointSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut rng = nn::seeded_rng(seed);
        let backbone = build_backbone(config.backbone_depth, 3, config.backbone_width, &mut rng);
        let upsample = config.deconv_stride.pow(config.deconv_layers as u32);
        if backbone.stride % upsample != 0 && upsample % backbone.stride != 0 {
            return Err(LookError::Config("deconvolution stack does not tile the backbone stride".into()));
        }
        let mut net = backbone.layers;
        let pad = (config.deconv_kernel - config.deconv_stride) / 2;
        let mut channels = backbone.out_channels;
        for _ in 0..config.deconv_layers {
            net.push(ConvTranspose2d::new(
                channels,
                config.deconv_filters,
                config.deconv_kernel,
                config.deconv_stride,
                pad,
                &mut rng,
            ));
            net.push(BatchNorm2d::new(config.deconv_filters));
            net.push(Relu::default());
            channels = config.deconv_filters;
        }
        net.push(Conv2d::new(channels, schema.len(), 1, 1, 0, true, &mut rng));
        Ok(KeypointModel {
            config: config.clone(),
            schema: schema.clone(),
            net,
            heatmap_stride: (backbone.stride / upsample).max(1),
        })
    }

    pub fn config(&self) -> &KeypointModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &KeypointSchema {
        &self.schema
    }

    pub fn num_keypoints(&self) -> usize {
        self.schema.len()
    }

    /// Heatmap cell size in model-input pixels.
    pub fn heatmap_stride(&self) -> usize {
        self.heatmap_stride
    }

    pub fn heatmap_shape(&self) -> (usize, usize) {
        (
            self.config.input_height / self.heatmap_stride,
            self.config.input_width / self.heatmap_stride,
        )
    }

    pub fn train(
        samples: &[KeypointSample],
        schema: &KeypointSchema,
        config: &KeypointModelConfig,
        options: &KeypointTrainOptions,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(LookError::Config("keypoint dataset is empty".into()));
        }
        if samples.iter().all(|s| s.keypoints.iter().all(|k| k[2] <= 0.0)) {
            return Err(LookError::Config("dataset has no annotated keypoints".into()));
        }
        if let Some(bad) = samples.iter().find(|s| s.keypoints.len() != schema.len()) {
            return Err(LookError::Dimension {
                expected: schema.len(),
                got: bad.keypoints.len(),
            });
        }
        let mut model = Self::build(config, schema, options.seed)?;
        let (hh, hw) = model.heatmap_shape();
        let k = schema.len();
        let inputs: Vec<_> = samples
            .iter()
            .map(|s| to_chw(&s.image, config.input_height, config.input_width))
            .collect();
        let targets: Vec<Vec<Heatmap>> = samples
            .iter()
            .map(|s| {
                let sx = hw as f64 / s.image.width() as f64;
                let sy = hh as f64 / s.image.height() as f64;
                s.keypoints
                    .iter()
                    .map(|kp| {
                        if kp[2] <= 0.0 {
                            return Heatmap::zeros(hh, hw, 1);
                        }
                        let grid = GridShape { height: hh, width: hw, stride: 1 };
                        make_target_heatmap(kp[0] as f64 * sx, kp[1] as f64 * sy, grid, config.heatmap_sigma)
                            .unwrap_or_else(|_| Heatmap::zeros(hh, hw, 1))
                    })
                    .collect()
            })
            .collect();

        let mut rng = nn::seeded_rng(options.seed ^ 0x6b70);
        let mut opt = Adam::new(options.learning_rate);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..options.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(options.batch_size.max(1)) {
                let x = nn::stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
                model.net.zero_grad();
                let y = model.net.forward_train(&x);
                let n = batch.len();
                let count = (n * k * hh * hw) as f32;
                let mut grad = Array4::<f32>::zeros(y.raw_dim());
                let mut loss = 0.0f64;
                for (bi, &i) in batch.iter().enumerate() {
                    for (ki, t) in targets[i].iter().enumerate() {
                        for ((r, c), &tv) in t.values.indexed_iter() {
                            let d = y[[bi, ki, r, c]] - tv;
                            loss += (d * d) as f64;
                            grad[[bi, ki, r, c]] = 2.0 * d / count;
                        }
                    }
                }
                epoch_loss += loss / count as f64;
                model.net.backward(&grad);
                opt.step(model.net.params_mut());
            }
            log::debug!("keypoints epoch {epoch}: loss {epoch_loss:.5}");
        }
        Ok(model)
    }

    /// Heatmaps for an image, with values clipped at zero.
    pub fn predict_heatmaps(&self, image: &RgbImage) -> Vec<Heatmap> {
        let x = to_chw(image, self.config.input_height, self.config.input_width)
            .insert_axis(ndarray::Axis(0));
        let y = self.net.forward(&x);
        y.index_axis(ndarray::Axis(0), 0)
            .outer_iter()
            .map(|m| Heatmap {
                values: m.mapv(|v| if v.is_finite() { v.max(0.0) } else { 0.0 }),
                stride: self.heatmap_stride,
            })
            .collect()
    }

    /// Keypoints in original-image pixel coordinates.
    pub fn predict(&self, image: &RgbImage) -> KeypointSet {
        let heatmaps = self.predict_heatmaps(image);
        let mut set = decode_heatmaps(&heatmaps, self.heatmap_stride, &self.schema)
            .expect("network emits one heatmap per keypoint");
        let sx = image.width() as f64 / self.config.input_width as f64;
        let sy = image.height() as f64 / self.config.input_height as f64;
        let max_x = (image.width().max(1) - 1) as f64;
        let max_y = (image.height().max(1) - 1) as f64;
        for p in &mut set.points {
            p.x = (p.x * sx).clamp(0.0, max_x);
            p.y = (p.y * sy).clamp(0.0, max_y);
        }
        set
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (shapes, data) = self.net.export_weights();
        let stored = StoredKeypointModel {
            config: self.config.clone(),
            schema: self.schema.clone(),
        };
        nn::write_checkpoint(path, CHECKPOINT_KIND, &stored, shapes, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::read_checkpoint(path, CHECKPOINT_KIND)?;
        let stored: StoredKeypointModel = serde_json::from_value(ck.config)?;
        let mut model = Self::build(&stored.config, &stored.schema, 0)?;
        model.net.import_weights(&ck.shapes, &ck.data)?;
        Ok(model)
    }
}

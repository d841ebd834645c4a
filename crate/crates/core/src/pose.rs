//! Five-way shot-orientation classifier and its evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LookError, Result};
use crate::nn::{self, build_backbone, Adam, BackboneDepth, GlobalAvgPool, Layer, Linear, Sequential};
use crate::vision::to_chw;

/// Declaration order is the canonical tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseLabel {
    Front,
    Back,
    Left,
    Right,
    Detailed,
}

impl PoseLabel {
    pub const ALL: [PoseLabel; 5] = [
        PoseLabel::Front,
        PoseLabel::Back,
        PoseLabel::Left,
        PoseLabel::Right,
        PoseLabel::Detailed,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoseLabel::Front => "front",
            PoseLabel::Back => "back",
            PoseLabel::Left => "left",
            PoseLabel::Right => "right",
            PoseLabel::Detailed => "detailed",
        }
    }
}

impl fmt::Display for PoseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoseLabel {
    type Err = LookError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| LookError::InvalidArgument(format!("unknown pose label `{s}`")))
    }
}

/// Argmax over five class scores; equal scores resolve to the earlier label.
pub fn argmax_pose(scores: &[f64; 5]) -> (PoseLabel, f64) {
    let mut best = 0;
    for i in 1..5 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (PoseLabel::ALL[best], scores[best])
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Rows are ground truth, columns predictions, both in canonical label order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 5]; 5],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, label: PoseLabel) -> u64 {
        self.counts[label.index()].iter().sum()
    }

    pub fn get(&self, truth: PoseLabel, pred: PoseLabel) -> u64 {
        self.counts[truth.index()][pred.index()]
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..5).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for l in PoseLabel::ALL {
            out.push(',');
            out.push_str(l.as_str());
        }
        out.push('\n');
        for t in PoseLabel::ALL {
            out.push_str(t.as_str());
            for c in self.counts[t.index()] {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(truths: &[PoseLabel], preds: &[PoseLabel]) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(LookError::Dimension {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    if truths.is_empty() {
        return Err(LookError::InvalidArgument("confusion matrix needs at least one sample".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in truths.iter().zip(preds) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: PoseLabel,
    pub precision: f64,
    pub recall: f64,
}

/// Precision = diagonal / column sum, recall = diagonal / row sum; 0/0 is 0.
pub fn precision_recall_per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    PoseLabel::ALL
        .iter()
        .map(|&label| {
            let i = label.index();
            let diag = cm.counts[i][i];
            let col: u64 = (0..5).map(|r| cm.counts[r][i]).sum();
            let row: u64 = cm.counts[i].iter().sum();
            ClassMetrics {
                label,
                precision: ratio(diag, col),
                recall: ratio(diag, row),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseModelConfig {
    pub backbone_depth: BackboneDepth,
    pub backbone_width: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for PoseModelConfig {
    fn default() -> Self {
        PoseModelConfig {
            backbone_depth: BackboneDepth::ResNet18,
            backbone_width: 64,
            input_height: 224,
            input_width: 224,
        }
    }
}

impl PoseModelConfig {
    pub fn desk() -> Self {
        PoseModelConfig {
            backbone_depth: BackboneDepth::Tiny,
            backbone_width: 8,
            input_height: 64,
            input_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_width == 0 || self.input_height < 8 || self.input_width < 8 {
            return Err(LookError::Config("pose model dimensions are too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for PoseTrainOptions {
    fn default() -> Self {
        PoseTrainOptions {
            epochs: 8,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 11,
        }
    }
}

/// Dataset manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub image_path: String,
    pub pose_label: PoseLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub label: PoseLabel,
    pub confidence: f64,
    pub scores: [f64; 5],
}

pub struct PoseModel {
    config: PoseModelConfig,
    net: Sequential,
}

const CHECKPOINT_KIND: &str = "pose";

impl PoseModel {
    fn build(config: &PoseModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = nn::seeded_rng(seed);
        let backbone = build_backbone(config.backbone_depth, 3, config.backbone_width, &mut rng);
        let mut net = backbone.layers;
        net.push(GlobalAvgPool::default());
        net.push(Linear::new(backbone.out_channels, 5, &mut rng));
        Ok(PoseModel {
            config: config.clone(),
            net,
        })
    }

    pub fn config(&self) -> &PoseModelConfig {
        &self.config
    }

    pub fn train(samples: &[(RgbImage, PoseLabel)], config: &PoseModelConfig, options: &PoseTrainOptions) -> Result<Self> {
        if samples.is_empty() {
            return Err(LookError::Config("pose dataset is empty".into()));
        }
        let mut model = Self::build(config, options.seed)?;
        let inputs: Vec<_> = samples
            .iter()
            .map(|(img, _)| to_chw(img, config.input_height, config.input_width))
            .collect();
        let mut rng = nn::seeded_rng(options.seed ^ 0x705e);
        let mut opt = Adam::new(options.learning_rate);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..options.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(options.batch_size.max(1)) {
                let x = nn::stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
                model.net.zero_grad();
                let logits = model.net.forward_train(&x);
                let n = batch.len() as f64;
                let mut grad = Array4::<f32>::zeros(logits.raw_dim());
                for (bi, &i) in batch.iter().enumerate() {
                    let row: Vec<f64> = (0..5).map(|c| logits[[bi, c, 0, 0]] as f64).collect();
                    let p = softmax(&row);
                    let target = samples[i].1.index();
                    epoch_loss -= p[target].max(1e-12).ln() / n;
                    for c in 0..5 {
                        let y = if c == target { 1.0 } else { 0.0 };
                        grad[[bi, c, 0, 0]] = ((p[c] - y) / n) as f32;
                    }
                }
                model.net.backward(&grad);
                opt.step(model.net.params_mut());
            }
            log::debug!("pose epoch {epoch}: loss {epoch_loss:.4}");
        }
        Ok(model)
    }

    pub fn scores(&self, image: &RgbImage) -> [f64; 5] {
        let x = to_chw(image, self.config.input_height, self.config.input_width).insert_axis(Axis(0));
        let logits = self.net.forward(&x);
        let row: Vec<f64> = (0..5).map(|c| logits[[0, c, 0, 0]] as f64).collect();
        let p = softmax(&row);
        [p[0], p[1], p[2], p[3], p[4]]
    }

    pub fn classify(&self, image: &RgbImage) -> PosePrediction {
        let scores = self.scores(image);
        let (label, confidence) = argmax_pose(&scores);
        PosePrediction {
            label,
            confidence,
            scores,
        }
    }

    pub fn evaluate(&self, samples: &[(RgbImage, PoseLabel)]) -> Result<ConfusionMatrix> {
        let truths: Vec<_> = samples.iter().map(|s| s.1).collect();
        let preds: Vec<_> = samples.iter().map(|s| self.classify(&s.0).label).collect();
        confusion_matrix(&truths, &preds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (shapes, data) = self.net.export_weights();
        nn::write_checkpoint(path, CHECKPOINT_KIND, &self.config, shapes, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::read_checkpoint(path, CHECKPOINT_KIND)?;
        let config: PoseModelConfig = serde_json::from_value(ck.config)?;
        let mut model = Self::build(&config, 0)?;
        model.net.import_weights(&ck.shapes, &ck.data)?;
        Ok(model)
    }
}

/// Convenience wrapper: label and confidence for one image.
pub fn classify_pose(image: &RgbImage, model: &PoseModel) -> (PoseLabel, f64) {
    let p = model.classify(image);
    (p.label, p.confidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use PoseLabel::*;

    fn label() -> impl Strategy<Value = PoseLabel> {
        (0usize..5).prop_map(|i| PoseLabel::ALL[i])
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_pose(&[0.9, 0.02, 0.03, 0.03, 0.02]), (Front, 0.9));
        assert_eq!(argmax_pose(&[0.2; 5]), (Front, 0.2));
        assert_eq!(argmax_pose(&[0.1, 0.1, 0.35, 0.35, 0.1]), (Left, 0.35));
    }

    #[test]
    fn label_round_trip() {
        for l in PoseLabel::ALL {
            assert_eq!(l.as_str().parse::<PoseLabel>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
        assert!("side".parse::<PoseLabel>().is_err());
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[Front, Back], &[Front, Back]).unwrap();
        let diag: Vec<u64> = (0..5).map(|i| cm.counts[i][i]).collect();
        assert_eq!(diag, vec![1, 1, 0, 0, 0]);
        let cm = confusion_matrix(&[Front], &[Back]).unwrap();
        assert_eq!(cm.get(Front, Back), 1);
        assert!(confusion_matrix(&[Front], &[]).is_err());
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn precision_recall_conventions() {
        let cm = confusion_matrix(&[Front, Back, Left], &[Front, Back, Left]).unwrap();
        for m in precision_recall_per_class(&cm).iter().take(3) {
            assert_eq!((m.precision, m.recall), (1.0, 1.0));
        }
        let cm = confusion_matrix(&[Right, Right], &[Front, Front]).unwrap();
        let pr = precision_recall_per_class(&cm);
        assert_eq!(pr[Right.index()].precision, 0.0);
        assert_eq!(pr[Right.index()].recall, 0.0);
        assert_eq!(pr[Front.index()].precision, 0.0);
    }

    #[test]
    fn precision_recall_hand_built() {
        let cm = ConfusionMatrix {
            counts: [
                [8, 1, 1, 0, 0],
                [2, 6, 0, 0, 2],
                [0, 0, 5, 0, 0],
                [0, 0, 3, 4, 1],
                [0, 0, 0, 0, 0],
            ],
        };
        let pr = precision_recall_per_class(&cm);
        let expect = [
            (8.0 / 10.0, 8.0 / 10.0),
            (6.0 / 7.0, 6.0 / 10.0),
            (5.0 / 9.0, 5.0 / 5.0),
            (4.0 / 4.0, 4.0 / 8.0),
            (0.0, 0.0),
        ];
        for (m, (p, r)) in pr.iter().zip(expect) {
            assert!((m.precision - p).abs() < 1e-12 && (m.recall - r).abs() < 1e-12);
        }
        assert!(cm.to_csv().starts_with("truth\\pred,front,back,left,right,detailed\nfront,8,1,1,0,0\n"));
    }

    #[test]
    fn untrained_model_outputs_probabilities() {
        let model = PoseModel::build(&PoseModelConfig::desk(), 1).unwrap();
        let p = model.classify(&RgbImage::new(64, 128));
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let dir = tempfile::tempdir().unwrap();
        model.save(&dir.path().join("p.ckpt")).unwrap();
        let loaded = PoseModel::load(&dir.path().join("p.ckpt")).unwrap();
        assert_eq!(loaded.classify(&RgbImage::new(64, 128)), p);
    }

    proptest! {
        #[test]
        fn confusion_matches_tally(pairs in proptest::collection::vec((label(), label()), 1..40)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let cm = confusion_matrix(&t, &p).unwrap();
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            for a in PoseLabel::ALL {
                for b in PoseLabel::ALL {
                    let n = pairs.iter().filter(|(x, y)| *x == a && *y == b).count() as u64;
                    prop_assert_eq!(cm.get(a, b), n);
                }
                prop_assert_eq!(cm.support(a), t.iter().filter(|x| **x == a).count() as u64);
            }
        }

        #[test]
        fn precision_recall_equivariant_under_permutation(
            counts in proptest::array::uniform5(proptest::array::uniform5(0u64..20)),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let cm = ConfusionMatrix { counts };
            let mut permuted = ConfusionMatrix::default();
            for i in 0..5 {
                for j in 0..5 {
                    permuted.counts[perm[i]][perm[j]] = counts[i][j];
                }
            }
            let a = precision_recall_per_class(&cm);
            let b = precision_recall_per_class(&permuted);
            for i in 0..5 {
                prop_assert_eq!(a[i].precision, b[perm[i]].precision);
                prop_assert_eq!(a[i].recall, b[perm[i]].recall);
            }
        }

        #[test]
        fn softmax_is_probability_vector(logits in proptest::array::uniform5(-50.0f64..50.0)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

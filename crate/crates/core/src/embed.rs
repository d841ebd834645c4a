//! Triplet embedding: losses and their gradients, triplet sampling,
//! semi-hard negative mining and the shared-weight encoder.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LookError, Result};
use crate::nn::{self, build_backbone, Adam, BackboneDepth, GlobalAvgPool, Layer, Linear, Sequential};
use crate::vision::to_chw;

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LookError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub fn sq_euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Margin `m` and norm-penalty weight `alpha`; `tau = 1 / (3d)` follows from
/// the embedding dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletLossConfig {
    pub margin: f64,
    pub alpha: f64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        TripletLossConfig {
            margin: 0.2,
            alpha: 5e-5,
        }
    }
}

impl TripletLossConfig {
    pub fn new(margin: f64, alpha: f64) -> Result<Self> {
        let c = TripletLossConfig { margin, alpha };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(LookError::Config("margin must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(LookError::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }

    pub fn tau(d: usize) -> f64 {
        1.0 / (3.0 * d as f64)
    }
}

/// `max(0, m + d(a,p) - d(a,n))` with squared Euclidean `d`.
pub fn triplet_margin_loss(xa: &[f64], xp: &[f64], xn: &[f64], m: f64) -> Result<f64> {
    check_dims(xa, xn)?;
    let ap = sq_euclidean(xa, xp)?;
    let an = sq_euclidean(xa, xn)?;
    Ok((m + (ap - an)).max(0.0))
}

/// `tau * (|a|^2 + |p|^2 + |n|^2)` with `tau = 1/(3d)`.
pub fn embedding_norm_loss(xa: &[f64], xp: &[f64], xn: &[f64]) -> Result<f64> {
    check_dims(xa, xp)?;
    check_dims(xa, xn)?;
    if xa.is_empty() {
        return Ok(0.0);
    }
    Ok(TripletLossConfig::tau(xa.len()) * (sq_norm(xa) + sq_norm(xp) + sq_norm(xn)))
}

pub fn total_loss(xa: &[f64], xp: &[f64], xn: &[f64], cfg: &TripletLossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(triplet_margin_loss(xa, xp, xn, cfg.margin)? + cfg.alpha * embedding_norm_loss(xa, xp, xn)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Analytic gradient of [`total_loss`]. At the hinge itself the margin
/// term is treated as inactive.
pub fn total_loss_grad(xa: &[f64], xp: &[f64], xn: &[f64], cfg: &TripletLossConfig) -> Result<TripletGrad> {
    cfg.validate()?;
    check_dims(xa, xp)?;
    check_dims(xa, xn)?;
    let d = xa.len();
    let reg = if d == 0 { 0.0 } else { cfg.alpha * TripletLossConfig::tau(d) * 2.0 };
    let active = cfg.margin + (sq_euclidean(xa, xp)? - sq_euclidean(xa, xn)?) > 0.0;
    let hinge = if active { 2.0 } else { 0.0 };
    let mut g = TripletGrad {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negative: vec![0.0; d],
    };
    for i in 0..d {
        let (a, p, n) = (xa[i], xp[i], xn[i]);
        g.anchor[i] = hinge * (n - p) + reg * a;
        g.positive[i] = hinge * (p - a) + reg * p;
        g.negative[i] = hinge * (a - n) + reg * n;
    }
    Ok(g)
}

/// Semi-hard negative for `anchor_idx` among `embeddings`.
///
/// The positive is the nearest other example with the anchor's label (lowest
/// index on ties). Among negatives with `d_ap < d_an < d_ap + m` the one with
/// the smallest `d_an` wins; failing that, the smallest `d_an` among
/// negatives with `d_an >= d_ap + m`; otherwise `None`. Ties resolve to the
/// lowest index. Returns `(positive, negative)`.
pub fn mine_semi_hard<L: PartialEq>(
    anchor_idx: usize,
    embeddings: &[Vec<f64>],
    labels: &[L],
    m: f64,
) -> Result<(usize, Option<usize>)> {
    if embeddings.len() != labels.len() {
        return Err(LookError::Dimension {
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    if anchor_idx >= embeddings.len() {
        return Err(LookError::InvalidArgument(format!("anchor index {anchor_idx} out of range")));
    }
    let anchor = &embeddings[anchor_idx];
    let mut positive: Option<(usize, f64)> = None;
    for (i, e) in embeddings.iter().enumerate() {
        if i != anchor_idx && labels[i] == labels[anchor_idx] {
            let d = sq_euclidean(anchor, e)?;
            if positive.is_none_or(|(_, best)| d < best) {
                positive = Some((i, d));
            }
        }
    }
    let (p_idx, d_ap) = positive.ok_or_else(|| LookError::Mining(format!("anchor {anchor_idx} has no positive in the batch")))?;
    let mut semi: Option<(usize, f64)> = None;
    let mut easy: Option<(usize, f64)> = None;
    for (i, e) in embeddings.iter().enumerate() {
        if labels[i] == labels[anchor_idx] {
            continue;
        }
        let d = sq_euclidean(anchor, e)?;
        let slot = if d > d_ap && d < d_ap + m {
            &mut semi
        } else if d >= d_ap + m {
            &mut easy
        } else {
            continue;
        };
        if slot.is_none_or(|(_, best)| d < best) {
            *slot = Some((i, d));
        }
    }
    Ok((p_idx, semi.or(easy).map(|(i, _)| i)))
}

/// Cross-domain pair: a wild (street) view and a catalog view of one garment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair<T> {
    pub wild: T,
    pub catalog: T,
    pub garment_id: String,
    pub article_type: String,
}

/// Pairs manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub wild_path: String,
    pub catalog_path: String,
    pub garment_id: String,
    pub article_type: String,
}

impl From<PairRecord> for Pair<String> {
    fn from(r: PairRecord) -> Self {
        Pair {
            wild: r.wild_path,
            catalog: r.catalog_path,
            garment_id: r.garment_id,
            article_type: r.article_type,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet<T> {
    pub anchor: T,
    pub positive: T,
    pub negative: T,
    pub garment_id: String,
    pub negative_garment_id: String,
    pub article_type: String,
}

/// One triplet per pair. The negative garment is drawn uniformly from the
/// other garments of the same article type, then one of its catalog views is
/// drawn uniformly. Article types with a single garment are skipped.
pub fn build_triplets<T: Clone + PartialEq>(pairs: &[Pair<T>], seed: u64) -> Vec<Triplet<T>> {
    // article type -> garment -> distinct catalog views in input order
    let mut catalog: BTreeMap<&str, BTreeMap<&str, Vec<&T>>> = BTreeMap::new();
    for p in pairs {
        let views = catalog
            .entry(p.article_type.as_str())
            .or_default()
            .entry(p.garment_id.as_str())
            .or_default();
        if !views.contains(&&p.catalog) {
            views.push(&p.catalog);
        }
    }
    for (t, garments) in &catalog {
        if garments.len() < 2 {
            log::warn!("article type `{t}` has a single garment; its pairs are skipped");
        }
    }
    let mut rng = nn::seeded_rng(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let garments = &catalog[p.article_type.as_str()];
        let others: Vec<(&&str, &Vec<&T>)> = garments.iter().filter(|(g, _)| **g != p.garment_id).collect();
        if others.is_empty() {
            continue;
        }
        let (neg_id, views) = others[rng.random_range(0..others.len())];
        let negative = views[rng.random_range(0..views.len())].clone();
        out.push(Triplet {
            anchor: p.wild.clone(),
            positive: p.catalog.clone(),
            negative,
            garment_id: p.garment_id.clone(),
            negative_garment_id: neg_id.to_string(),
            article_type: p.article_type.clone(),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub backbone_depth: BackboneDepth,
    pub backbone_width: usize,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub semi_hard_mining: bool,
    /// Epochs trained on the sampled negatives before mining starts.
    pub mining_warmup_epochs: usize,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 30,
            seed: 17,
            backbone_depth: BackboneDepth::ResNet50,
            backbone_width: 64,
            embedding_dim: 2048,
            input_size: 224,
            semi_hard_mining: true,
            mining_warmup_epochs: 0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn desk() -> Self {
        EmbedTrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 22,
            seed: 17,
            backbone_depth: BackboneDepth::Tiny,
            backbone_width: 12,
            embedding_dim: 64,
            input_size: 40,
            semi_hard_mining: true,
            mining_warmup_epochs: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(LookError::Config("learning rate and batch size must be positive".into()));
        }
        if self.embedding_dim == 0 || self.backbone_width == 0 || self.input_size < 8 {
            return Err(LookError::Config("embedding model dimensions are too small".into()));
        }
        Ok(())
    }
}

/// In-memory training data: images plus triplets of indices into them.
pub struct EmbedDataset {
    pub images: Vec<RgbImage>,
    pub triplets: Vec<Triplet<usize>>,
}

impl EmbedDataset {
    /// Loads the images a pairs manifest names (each path once, relative
    /// paths against `root`) and samples triplets from the pairs.
    pub fn from_pairs(records: &[PairRecord], root: &Path, seed: u64) -> Result<Self> {
        let mut slots: BTreeMap<String, usize> = BTreeMap::new();
        let mut images = Vec::new();
        let mut slot = |p: &str| -> Result<usize> {
            if let Some(&i) = slots.get(p) {
                return Ok(i);
            }
            images.push(crate::vision::load_image(&crate::io::resolve(root, p))?);
            slots.insert(p.to_string(), images.len() - 1);
            Ok(images.len() - 1)
        };
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            pairs.push(Pair {
                wild: slot(&r.wild_path)?,
                catalog: slot(&r.catalog_path)?,
                garment_id: r.garment_id.clone(),
                article_type: r.article_type.clone(),
            });
        }
        let triplets = build_triplets(&pairs, seed);
        Ok(EmbedDataset { images, triplets })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    train: EmbedTrainConfig,
    loss: TripletLossConfig,
    category: String,
}

/// Shared-weight encoder: every branch of the triplet is this one network.
pub struct EmbeddingModel {
    train: EmbedTrainConfig,
    loss: TripletLossConfig,
    category: String,
    net: Sequential,
}

const CHECKPOINT_KIND: &str = "embedding";

impl EmbeddingModel {
    fn build(train: &EmbedTrainConfig, loss: &TripletLossConfig, category: &str) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let mut rng = nn::seeded_rng(train.seed);
        let backbone = build_backbone(train.backbone_depth, 3, train.backbone_width, &mut rng);
        let mut net = backbone.layers;
        net.push(GlobalAvgPool::default());
        net.push(Linear::new(backbone.out_channels, train.embedding_dim, &mut rng));
        Ok(EmbeddingModel {
            train: train.clone(),
            loss: *loss,
            category: category.to_string(),
            net,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.embedding_dim
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn train_config(&self) -> &EmbedTrainConfig {
        &self.train
    }

    pub fn loss_config(&self) -> &TripletLossConfig {
        &self.loss
    }

    fn input(&self, img: &RgbImage) -> ndarray::Array3<f32> {
        to_chw(img, self.train.input_size, self.train.input_size)
    }

    pub fn embed(&self, image: &RgbImage) -> Vec<f32> {
        self.embed_batch(std::slice::from_ref(image)).pop().expect("one embedding")
    }

    pub fn embed_batch(&self, images: &[RgbImage]) -> Vec<Vec<f32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = nn::stack(&chunk.iter().map(|i| self.input(i)).collect::<Vec<_>>());
            let y = self.net.forward(&x);
            for row in y.outer_iter() {
                out.push(row.iter().copied().collect());
            }
        }
        out
    }

    pub fn train(
        data: &EmbedDataset,
        category: &str,
        train: &EmbedTrainConfig,
        loss: &TripletLossConfig,
    ) -> Result<(Self, TrainReport)> {
        if data.triplets.is_empty() || data.images.is_empty() {
            return Err(LookError::Config("embedding training data is empty".into()));
        }
        if let Some(t) = data.triplets.iter().find(|t| {
            [t.anchor, t.positive, t.negative].iter().any(|&i| i >= data.images.len())
        }) {
            return Err(LookError::Validation(format!("triplet references missing image: {t:?}")));
        }
        let mut model = Self::build(train, loss, category)?;
        let inputs: Vec<_> = data.images.iter().map(|i| model.input(i)).collect();
        let mut rng = nn::seeded_rng(train.seed ^ 0xe4b);
        let mut opt = Adam::new(train.learning_rate);
        let mut order: Vec<usize> = (0..data.triplets.len()).collect();
        let mut report = TrainReport::default();
        let d = train.embedding_dim;
        for epoch in 0..train.epochs {
            order.shuffle(&mut rng);
            let mining = train.semi_hard_mining && epoch >= train.mining_warmup_epochs;
            let mut epoch_loss = 0.0;
            for batch in order.chunks(train.batch_size) {
                let b = batch.len();
                // Rows: anchors, then positives, then negatives.
                let mut idx = Vec::with_capacity(3 * b);
                for slot in 0..3 {
                    for &ti in batch {
                        let t = &data.triplets[ti];
                        idx.push([t.anchor, t.positive, t.negative][slot]);
                    }
                }
                let x = nn::stack(&idx.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
                model.net.zero_grad();
                let y = model.net.forward_train(&x);
                let emb: Vec<Vec<f64>> = y.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
                let labels: Vec<&str> = (0..3 * b)
                    .map(|row| {
                        let t = &data.triplets[batch[row % b]];
                        if row / b == 2 {
                            t.negative_garment_id.as_str()
                        } else {
                            t.garment_id.as_str()
                        }
                    })
                    .collect();
                let mut grad = Array4::<f32>::zeros(y.raw_dim());
                let mut batch_loss = 0.0;
                for i in 0..b {
                    let (p, n) = if mining {
                        match mine_semi_hard(i, &emb, &labels, loss.margin) {
                            Ok((p, Some(n))) => (p, n),
                            _ => (b + i, 2 * b + i),
                        }
                    } else {
                        (b + i, 2 * b + i)
                    };
                    batch_loss += total_loss(&emb[i], &emb[p], &emb[n], loss)?;
                    let g = total_loss_grad(&emb[i], &emb[p], &emb[n], loss)?;
                    for (row, gv) in [(i, &g.anchor), (p, &g.positive), (n, &g.negative)] {
                        for k in 0..d {
                            grad[[row, k, 0, 0]] += (gv[k] / b as f64) as f32;
                        }
                    }
                }
                epoch_loss += batch_loss;
                model.net.backward(&grad);
                opt.step(model.net.params_mut());
            }
            let mean = epoch_loss / data.triplets.len() as f64;
            log::debug!("embed[{category}] epoch {epoch}: loss {mean:.5}");
            report.epoch_losses.push(mean);
        }
        Ok((model, report))
    }

    /// Fraction of triplets with `d(a,p) + margin < d(a,n)`; `margin = 0`
    /// gives the plain ordering accuracy.
    pub fn triplet_accuracy(&self, images: &[RgbImage], triplets: &[Triplet<usize>], margin: f64) -> f64 {
        if triplets.is_empty() {
            return 0.0;
        }
        let emb: Vec<Vec<f64>> = self
            .embed_batch(images)
            .into_iter()
            .map(|v| v.into_iter().map(f64::from).collect())
            .collect();
        let ok = triplets
            .iter()
            .filter(|t| {
                let ap = sq_euclidean(&emb[t.anchor], &emb[t.positive]).unwrap_or(f64::INFINITY);
                let an = sq_euclidean(&emb[t.anchor], &emb[t.negative]).unwrap_or(0.0);
                ap + margin < an
            })
            .count();
        ok as f64 / triplets.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (shapes, data) = self.net.export_weights();
        let stored = Stored {
            train: self.train.clone(),
            loss: self.loss,
            category: self.category.clone(),
        };
        nn::write_checkpoint(path, CHECKPOINT_KIND, &stored, shapes, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = nn::read_checkpoint(path, CHECKPOINT_KIND)?;
        let stored: Stored = serde_json::from_value(ck.config)?;
        let mut model = Self::build(&stored.train, &stored.loss, &stored.category)?;
        model.net.import_weights(&ck.shapes, &ck.data)?;
        Ok(model)
    }
}

/// Embedding of one image; identical inputs give identical vectors.
pub fn embed_image(image: &RgbImage, model: &EmbeddingModel) -> Vec<f32> {
    model.embed(image)
}

/// Binary record `{u32 LE d, f32 LE x d}`.
pub fn encode_embedding(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * v.len());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 4 {
        return Err(LookError::Validation("embedding record is truncated".into()));
    }
    let d = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() != 4 + 4 * d {
        return Err(LookError::Validation(format!(
            "embedding record declares d={d} but holds {} bytes",
            bytes.len() - 4
        )));
    }
    Ok(bytes[4..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

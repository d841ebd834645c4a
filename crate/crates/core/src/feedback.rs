//! Active-learning loop: review queue with leases, append-only feedback
//! store, retrain-set assembly and before/after AP comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{
    evaluate_detections, iou, ArticleTaxonomy, BoundingBox, DetRecord, Detection, Granularity,
    GroundTruth, GtRecord,
};
use crate::error::{LookError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateReason {
    LowScore,
    ClassDisagreement,
    UserFlag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Reviewed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewCandidate {
    pub candidate_id: String,
    pub image_path: String,
    pub detection: Detection,
    pub reason: CandidateReason,
    pub status: CandidateStatus,
}

/// Detections whose score lies in `[lo, hi)`, closest to the band midpoint
/// first (input order on ties), at most `budget` of them. Candidate ids are
/// `<image index>-<detection index>` positions in `corpus`.
pub fn enqueue_candidates(corpus: &[DetRecord], band: (f64, f64), budget: usize) -> Result<Vec<ReviewCandidate>> {
    let (lo, hi) = band;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(LookError::InvalidArgument(format!("score band ({lo}, {hi}) is not inside [0, 1]")));
    }
    if budget == 0 {
        return Err(LookError::InvalidArgument("budget must be at least 1".into()));
    }
    let mid = (lo + hi) / 2.0;
    let mut pool: Vec<(f64, ReviewCandidate)> = Vec::new();
    for (ii, rec) in corpus.iter().enumerate() {
        for (di, det) in rec.boxes.iter().enumerate() {
            if det.score >= lo && det.score < hi {
                pool.push((
                    (det.score - mid).abs(),
                    ReviewCandidate {
                        candidate_id: format!("{ii}-{di}"),
                        image_path: rec.image_path.clone(),
                        detection: det.clone(),
                        reason: CandidateReason::LowScore,
                        status: CandidateStatus::Pending,
                    },
                ));
            }
        }
    }
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    pool.truncate(budget);
    Ok(pool.into_iter().map(|(_, c)| c).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    WrongClass,
    WrongBox,
    MissedObject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub candidate_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub corrected_label: Option<String>,
    #[serde(default)]
    pub corrected_box: Option<BoundingBox>,
    pub tagger_id: String,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

impl FeedbackRecord {
    /// `wrong_class` needs a label, `wrong_box` and `missed_object` a box;
    /// any label must belong to the taxonomy.
    pub fn validate(&self, taxonomy: &ArticleTaxonomy) -> Result<()> {
        match self.verdict {
            Verdict::WrongClass if self.corrected_label.is_none() => {
                return Err(LookError::Validation("wrong_class requires corrected_label".into()))
            }
            Verdict::WrongBox | Verdict::MissedObject if self.corrected_box.is_none() => {
                return Err(LookError::Validation(format!(
                    "{} requires corrected_box",
                    serde_json::to_value(self.verdict)?.as_str().unwrap_or_default()
                )))
            }
            _ => {}
        }
        if let Some(b) = &self.corrected_box {
            b.validate()?;
        }
        if let Some(l) = &self.corrected_label {
            if !taxonomy.contains(l) {
                return Err(LookError::Validation(format!("label `{l}` is not in the taxonomy")));
            }
        }
        if self.tagger_id.trim().is_empty() {
            return Err(LookError::Validation("tagger_id must not be empty".into()));
        }
        Ok(())
    }
}

/// Append-only JSONL log of verdicts. Without a path it lives in memory.
#[derive(Debug, Default)]
pub struct FeedbackStore {
    path: Option<PathBuf>,
    records: Vec<FeedbackRecord>,
}

impl FeedbackStore {
    pub fn in_memory() -> Self {
        FeedbackStore::default()
    }

    /// Opens (or creates) the log at `path`, loading existing records.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.exists() {
            crate::io::read_jsonl(path)?
        } else {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| LookError::io(parent, e))?;
            }
            Vec::new()
        };
        Ok(FeedbackStore {
            path: Some(path.to_path_buf()),
            records,
        })
    }

    pub fn append(&mut self, record: FeedbackRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| LookError::io(path, e))?;
            f.write_all(&line).map_err(|e| LookError::io(path, e))?;
            f.flush().map_err(|e| LookError::io(path, e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Time source for leases.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Hand-driven clock for tests and simulations.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub tagger_id: String,
    pub expires_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeasedCandidate {
    pub candidate: ReviewCandidate,
    pub lease: Lease,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub total: usize,
    pub pending: usize,
    pub leased: usize,
    pub reviewed: usize,
    pub by_verdict: BTreeMap<String, usize>,
}

struct Slot {
    candidate: ReviewCandidate,
    lease: Option<Lease>,
}

/// Pending candidates handed out under time-limited leases. A tagger holds at
/// most one lease; concurrent callers always receive distinct candidates.
pub struct ReviewQueue {
    slots: IndexMap<String, Slot>,
    verdicts: BTreeMap<String, usize>,
    clock: Arc<dyn Clock>,
    lease_ms: u64,
}

impl ReviewQueue {
    pub fn new(clock: Arc<dyn Clock>, lease_ms: u64) -> Self {
        ReviewQueue {
            slots: IndexMap::new(),
            verdicts: BTreeMap::new(),
            clock,
            lease_ms: lease_ms.max(1),
        }
    }

    pub fn lease_ms(&self) -> u64 {
        self.lease_ms
    }

    /// Adds candidates; ids already present are rejected.
    pub fn extend(&mut self, candidates: impl IntoIterator<Item = ReviewCandidate>) -> Result<()> {
        for c in candidates {
            if self.slots.contains_key(&c.candidate_id) {
                return Err(LookError::Validation(format!("candidate `{}` is already queued", c.candidate_id)));
            }
            self.slots.insert(c.candidate_id.clone(), Slot { candidate: c, lease: None });
        }
        Ok(())
    }

    /// Marks candidates reviewed according to previously stored verdicts.
    pub fn replay(&mut self, records: &[FeedbackRecord]) {
        for r in records {
            if let Some(slot) = self.slots.get_mut(&r.candidate_id) {
                if slot.candidate.status == CandidateStatus::Pending {
                    slot.candidate.status = CandidateStatus::Reviewed;
                    slot.lease = None;
                    *self.verdicts.entry(verdict_name(r.verdict)).or_default() += 1;
                }
            }
        }
    }

    /// Re-opens a reviewed candidate under a fresh id `<id>/r<n>`.
    pub fn requeue(&mut self, candidate_id: &str) -> Result<String> {
        let slot = self
            .slots
            .get(candidate_id)
            .ok_or_else(|| LookError::UnknownCandidate(candidate_id.into()))?;
        let mut n = 1;
        while self.slots.contains_key(&format!("{candidate_id}/r{n}")) {
            n += 1;
        }
        let id = format!("{candidate_id}/r{n}");
        let mut c = slot.candidate.clone();
        c.candidate_id = id.clone();
        c.status = CandidateStatus::Pending;
        c.reason = CandidateReason::UserFlag;
        self.slots.insert(id.clone(), Slot { candidate: c, lease: None });
        Ok(id)
    }

    pub fn get(&self, candidate_id: &str) -> Option<&ReviewCandidate> {
        self.slots.get(candidate_id).map(|s| &s.candidate)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &ReviewCandidate> {
        self.slots.values().map(|s| &s.candidate)
    }

    fn active(lease: &Option<Lease>, now: u64) -> Option<&Lease> {
        lease.as_ref().filter(|l| l.expires_at_ms > now)
    }

    /// Leases the next pending candidate to `tagger_id`. A tagger that
    /// already holds a live lease gets the same candidate back.
    pub fn next(&mut self, tagger_id: &str) -> Option<LeasedCandidate> {
        let now = self.clock.now_ms();
        let held = self.slots.values().position(|s| {
            s.candidate.status == CandidateStatus::Pending
                && Self::active(&s.lease, now).is_some_and(|l| l.tagger_id == tagger_id)
        });
        let idx = held.or_else(|| {
            self.slots
                .values()
                .position(|s| s.candidate.status == CandidateStatus::Pending && Self::active(&s.lease, now).is_none())
        })?;
        let (_, slot) = self.slots.get_index_mut(idx)?;
        let lease = Lease {
            tagger_id: tagger_id.to_string(),
            expires_at_ms: now + self.lease_ms,
        };
        slot.lease = Some(lease.clone());
        Some(LeasedCandidate {
            candidate: slot.candidate.clone(),
            lease,
        })
    }

    /// Extends a live lease held by `tagger_id`.
    pub fn renew(&mut self, candidate_id: &str, tagger_id: &str) -> Result<Lease> {
        let now = self.clock.now_ms();
        let lease_ms = self.lease_ms;
        let slot = self
            .slots
            .get_mut(candidate_id)
            .ok_or_else(|| LookError::UnknownCandidate(candidate_id.into()))?;
        if slot.candidate.status == CandidateStatus::Reviewed {
            return Err(LookError::AlreadyReviewed(candidate_id.into()));
        }
        match &slot.lease {
            Some(l) if l.tagger_id != tagger_id && l.expires_at_ms > now => Err(LookError::LeasedToOther {
                candidate: candidate_id.into(),
                holder: l.tagger_id.clone(),
            }),
            Some(l) if l.tagger_id == tagger_id && l.expires_at_ms > now => {
                let lease = Lease {
                    tagger_id: tagger_id.into(),
                    expires_at_ms: now + lease_ms,
                };
                slot.lease = Some(lease.clone());
                Ok(lease)
            }
            _ => Err(LookError::LeaseExpired(candidate_id.into())),
        }
    }

    /// Validates and persists a verdict, closing the candidate. Rejected:
    /// unknown or already reviewed candidates, candidates under another
    /// tagger's live lease, and submissions on the submitter's own expired
    /// lease. Candidates never leased may be reviewed directly.
    pub fn ingest(&mut self, record: FeedbackRecord, store: &mut FeedbackStore, taxonomy: &ArticleTaxonomy) -> Result<()> {
        let now = self.clock.now_ms();
        let slot = self
            .slots
            .get_mut(&record.candidate_id)
            .ok_or_else(|| LookError::UnknownCandidate(record.candidate_id.clone()))?;
        if slot.candidate.status == CandidateStatus::Reviewed {
            return Err(LookError::AlreadyReviewed(record.candidate_id.clone()));
        }
        if let Some(l) = &slot.lease {
            if l.tagger_id != record.tagger_id && l.expires_at_ms > now {
                return Err(LookError::LeasedToOther {
                    candidate: record.candidate_id.clone(),
                    holder: l.tagger_id.clone(),
                });
            }
            if l.tagger_id == record.tagger_id && l.expires_at_ms <= now {
                return Err(LookError::LeaseExpired(record.candidate_id.clone()));
            }
        }
        record.validate(taxonomy)?;
        let verdict = record.verdict;
        store.append(record)?;
        slot.candidate.status = CandidateStatus::Reviewed;
        slot.lease = None;
        *self.verdicts.entry(verdict_name(verdict)).or_default() += 1;
        Ok(())
    }

    pub fn stats(&self) -> QueueStats {
        let now = self.clock.now_ms();
        let mut s = QueueStats {
            total: self.slots.len(),
            by_verdict: self.verdicts.clone(),
            ..QueueStats::default()
        };
        for slot in self.slots.values() {
            match slot.candidate.status {
                CandidateStatus::Reviewed => s.reviewed += 1,
                CandidateStatus::Pending => {
                    s.pending += 1;
                    if Self::active(&slot.lease, now).is_some() {
                        s.leased += 1;
                    }
                }
            }
        }
        s
    }
}

fn verdict_name(v: Verdict) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|x| x.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Best base box for a detection: highest IoU >= 0.5, lowest index on ties.
fn match_box(boxes: &[GroundTruth], det: &BoundingBox) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        let o = iou(&b.bbox, det);
        if o >= 0.5 && best.is_none_or(|(_, bo)| o > bo) {
            best = Some((i, o));
        }
    }
    best.map(|(i, _)| i)
}

/// Applies verdicts in store order on top of `base`.
///
/// `wrong_class` relabels the base box matched by the reviewed detection
/// (IoU >= 0.5) and `wrong_box` moves it to the corrected box; when nothing
/// matches, the corrected box is appended. `missed_object` appends its box,
/// labelled with `corrected_label` or the detection's type. Touched boxes
/// record the candidate id in `corrected_by`, and a record whose id is
/// already present in the image is skipped, so re-applying a store changes
/// nothing.
pub fn assemble_retrain_set(
    base: &[GtRecord],
    candidates: &[ReviewCandidate],
    records: &[FeedbackRecord],
) -> Result<Vec<GtRecord>> {
    let by_id: BTreeMap<&str, &ReviewCandidate> = candidates.iter().map(|c| (c.candidate_id.as_str(), c)).collect();
    let mut out: Vec<GtRecord> = base.to_vec();
    let index: BTreeMap<String, usize> = out.iter().enumerate().map(|(i, r)| (r.image_path.clone(), i)).collect();
    for r in records {
        let cand = by_id
            .get(r.candidate_id.as_str())
            .ok_or_else(|| LookError::UnknownCandidate(r.candidate_id.clone()))?;
        let &img = index
            .get(&cand.image_path)
            .ok_or_else(|| LookError::UnknownImage(cand.image_path.clone()))?;
        let boxes = &mut out[img].boxes;
        if r.verdict == Verdict::Correct || boxes.iter().any(|b| b.corrected_by.contains(&r.candidate_id)) {
            continue;
        }
        let label = r.corrected_label.clone().unwrap_or_else(|| cand.detection.article_type.clone());
        let matched = match r.verdict {
            Verdict::WrongClass | Verdict::WrongBox => match_box(boxes, &cand.detection.bbox),
            _ => None,
        };
        match (r.verdict, matched) {
            (Verdict::WrongClass, Some(i)) => {
                boxes[i].article_type = label;
                boxes[i].corrected_by.push(r.candidate_id.clone());
            }
            (Verdict::WrongBox, Some(i)) => {
                boxes[i].bbox = r.corrected_box.unwrap_or(cand.detection.bbox);
                if let Some(l) = &r.corrected_label {
                    boxes[i].article_type = l.clone();
                }
                boxes[i].corrected_by.push(r.candidate_id.clone());
            }
            _ => {
                let bbox = r.corrected_box.unwrap_or(cand.detection.bbox);
                boxes.push(GroundTruth {
                    bbox,
                    article_type: label,
                    corrected_by: vec![r.candidate_id.clone()],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub category: String,
    pub ap_before: f64,
    pub ap_after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApComparison {
    pub iou_threshold: f64,
    pub rows: Vec<ApRow>,
    pub map_before: f64,
    pub map_after: f64,
}

impl ApComparison {
    pub fn row(&self, category: &str) -> Option<&ApRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,ap_before,ap_after,delta\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.category, r.ap_before, r.ap_after, r.delta));
        }
        out.push_str(&format!(
            "mAP,{:.6},{:.6},{:.6}\n",
            self.map_before,
            self.map_after,
            self.map_after - self.map_before
        ));
        out
    }
}

/// Per broad category AP of two detection sets on the same ground truth.
pub fn compare_ap(
    before: &[DetRecord],
    after: &[DetRecord],
    gts: &[GtRecord],
    iou_thresh: f64,
    taxonomy: &ArticleTaxonomy,
) -> Result<ApComparison> {
    let b = evaluate_detections(gts, before, iou_thresh, Granularity::Broad, taxonomy)?;
    let a = evaluate_detections(gts, after, iou_thresh, Granularity::Broad, taxonomy)?;
    let names: BTreeSet<&String> = b.per_class.keys().chain(a.per_class.keys()).collect();
    let rows = names
        .into_iter()
        .filter(|n| b.per_class.get(*n).or(a.per_class.get(*n)).is_some_and(|c| c.num_gt > 0))
        .map(|n| {
            let ap_before = b.per_class.get(n).map_or(0.0, |c| c.ap);
            let ap_after = a.per_class.get(n).map_or(0.0, |c| c.ap);
            ApRow {
                category: n.clone(),
                ap_before,
                ap_after,
                delta: ap_after - ap_before,
            }
        })
        .collect();
    Ok(ApComparison {
        iou_threshold: iou_thresh,
        rows,
        map_before: b.map,
        map_after: a.map,
    })
}

/// Settings for the label-noise simulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseExperiment {
    /// Article type whose training labels get corrupted.
    pub noisy_class: String,
    /// Label written onto corrupted boxes.
    pub noise_label: String,
    pub noise_rate: f64,
    pub rounds: usize,
    pub band: (f64, f64),
    pub budget: usize,
    pub iou_threshold: f64,
    pub seed: u64,
}

impl Default for NoiseExperiment {
    fn default() -> Self {
        NoiseExperiment {
            noisy_class: "Jeans".into(),
            noise_label: "Skirts".into(),
            noise_rate: 0.2,
            rounds: 2,
            band: (0.3, 0.8),
            budget: 40,
            iou_threshold: 0.5,
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub reviewed: usize,
    pub corrections: usize,
    pub comparison: ApComparison,
}

/// Deterministic pseudo-random value in [0, 1) for a (seed, image, box) key.
fn unit_hash(seed: u64, image: &str, slot: usize, salt: u64) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt;
    for b in image.bytes().chain((slot as u64).to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// A stand-in for a detector fitted to `manifest`: every annotated box comes
/// back with its label, a small jitter and a score keyed by image and box
/// position (so relabelling a box leaves its score unchanged).
pub fn replay_fit(manifest: &[GtRecord], seed: u64) -> Vec<DetRecord> {
    manifest
        .iter()
        .map(|r| DetRecord {
            image_path: r.image_path.clone(),
            boxes: r
                .boxes
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let jitter = |salt: u64| (unit_hash(seed, &r.image_path, i, salt) - 0.5) * 0.04;
                    let (w, h) = (g.bbox.width(), g.bbox.height());
                    Detection {
                        bbox: BoundingBox {
                            x_min: g.bbox.x_min + jitter(1) * w,
                            y_min: g.bbox.y_min + jitter(2) * h,
                            x_max: g.bbox.x_max + jitter(3) * w,
                            y_max: g.bbox.y_max + jitter(4) * h,
                        },
                        article_type: g.article_type.clone(),
                        score: 0.3 + 0.69 * unit_hash(seed, &r.image_path, i, 5),
                    }
                })
                .collect(),
        })
        .collect()
}

/// Copies `clean` and relabels each `noisy_class` box to `noise_label` with
/// probability `rate`.
pub fn inject_label_noise(clean: &[GtRecord], noisy_class: &str, noise_label: &str, rate: f64, seed: u64) -> Vec<GtRecord> {
    let mut rng = crate::nn::seeded_rng(seed);
    clean
        .iter()
        .map(|r| GtRecord {
            image_path: r.image_path.clone(),
            boxes: r
                .boxes
                .iter()
                .map(|g| {
                    let mut g = g.clone();
                    if g.article_type == noisy_class && rng.random::<f64>() < rate {
                        g.article_type = noise_label.to_string();
                    }
                    g
                })
                .collect(),
        })
        .collect()
}

/// Simulated tagger: compares a candidate with the clean annotation of its
/// image and answers `wrong_class` (with the true label) or `correct`.
/// Candidates matching no true box are skipped.
pub fn simulated_verdict(cand: &ReviewCandidate, truth: &GtRecord, tagger_id: &str, timestamp: u64) -> Option<FeedbackRecord> {
    let i = match_box(&truth.boxes, &cand.detection.bbox)?;
    let true_label = &truth.boxes[i].article_type;
    let (verdict, corrected_label) = if *true_label != cand.detection.article_type {
        (Verdict::WrongClass, Some(true_label.clone()))
    } else {
        (Verdict::Correct, None)
    };
    Some(FeedbackRecord {
        candidate_id: cand.candidate_id.clone(),
        verdict,
        corrected_label,
        corrected_box: None,
        tagger_id: tagger_id.to_string(),
        timestamp,
    })
}

/// Label-noise experiment over `rounds` feedback rounds. Each round fits the
/// replay stand-in to the current training manifest, queues in-band
/// detections not yet reviewed, lets the simulated tagger judge them,
/// assembles the corrected manifest and refits. The returned reports hold
/// the before/after AP of each round against the clean annotations.
pub fn run_noise_rounds(clean: &[GtRecord], exp: &NoiseExperiment, taxonomy: &ArticleTaxonomy) -> Result<Vec<RoundReport>> {
    let truth: BTreeMap<&str, &GtRecord> = clean.iter().map(|r| (r.image_path.as_str(), r)).collect();
    let mut train = inject_label_noise(clean, &exp.noisy_class, &exp.noise_label, exp.noise_rate, exp.seed);
    let mut reviewed: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut reports = Vec::with_capacity(exp.rounds);
    for round in 0..exp.rounds {
        let before = replay_fit(&train, exp.seed);
        // Hide detections reviewed in earlier rounds from the queue.
        let visible: Vec<DetRecord> = before
            .iter()
            .map(|r| DetRecord {
                image_path: r.image_path.clone(),
                boxes: r
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(di, d)| {
                        let mut d = d.clone();
                        if reviewed.contains(&(r.image_path.clone(), di)) {
                            d.score = -1.0;
                        }
                        d
                    })
                    .collect(),
            })
            .collect();
        let mut candidates = enqueue_candidates(&visible, exp.band, exp.budget)?;
        for c in &mut candidates {
            c.candidate_id = format!("r{round}:{}", c.candidate_id);
        }
        let mut store = FeedbackStore::in_memory();
        let mut queue = ReviewQueue::new(Arc::new(ManualClock::new(0)), 60_000);
        queue.extend(candidates.clone())?;
        for c in &candidates {
            let di: usize = c.candidate_id.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            reviewed.insert((c.image_path.clone(), di));
            let Some(t) = truth.get(c.image_path.as_str()) else { continue };
            if let Some(rec) = simulated_verdict(c, t, "sim-tagger", round as u64) {
                queue.ingest(rec, &mut store, taxonomy)?;
            }
        }
        let corrections = store.records().iter().filter(|r| r.verdict != Verdict::Correct).count();
        train = assemble_retrain_set(&train, &candidates, store.records())?;
        let after = replay_fit(&train, exp.seed);
        reports.push(RoundReport {
            round,
            reviewed: store.len(),
            corrections,
            comparison: compare_ap(&before, &after, clean, exp.iou_threshold, taxonomy)?,
        });
    }
    Ok(reports)
}

//! Exact-scan catalog index, scoring modes, top-K retrieval and P@K / R@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LookError, Result};

/// Fusion constant for reciprocal-rank fusion.
pub const RRF_C: f64 = 60.0;
pub const DEFAULT_K: usize = 14;

pub fn cosine_similarity(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(LookError::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(LookError::ZeroVector);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

fn dot(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum()
}

fn norm(x: &[f32]) -> f64 {
    dot(x, x).sqrt()
}

fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    #[default]
    Cosine,
    /// Score is the negated squared distance, so higher is still better.
    Euclidean,
    /// Reciprocal-rank fusion of the cosine and euclidean rankings.
    Combined,
}

impl std::str::FromStr for ScoringMode {
    type Err = LookError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScoringMode::Cosine),
            "euclidean" => Ok(ScoringMode::Euclidean),
            "combined" => Ok(ScoringMode::Combined),
            other => Err(LookError::InvalidArgument(format!("unknown scoring mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub product_id: String,
    pub article_type: String,
    pub broad_category: String,
    pub embedding: Vec<f32>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub product_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_ref: String,
    pub ranked: Vec<Ranked>,
}

struct Partition {
    /// Sorted by product id, so index order is the tie-break order.
    entries: Vec<CatalogEntry>,
    norms: Vec<f64>,
}

/// Immutable exact-scan index, partitioned by article type.
#[derive(Default)]
pub struct CatalogIndex {
    partitions: BTreeMap<String, Partition>,
    dims: BTreeMap<String, usize>,
}

pub fn index_catalog(entries: Vec<CatalogEntry>) -> Result<CatalogIndex> {
    CatalogIndex::build(entries)
}

impl CatalogIndex {
    pub fn build(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut dims: BTreeMap<String, usize> = BTreeMap::new();
        let mut grouped: BTreeMap<String, Vec<CatalogEntry>> = BTreeMap::new();
        for e in entries {
            if !seen.insert(e.product_id.clone()) {
                return Err(LookError::DuplicateProduct(e.product_id));
            }
            let d = *dims.entry(e.broad_category.clone()).or_insert(e.embedding.len());
            if d != e.embedding.len() {
                return Err(LookError::Dimension {
                    expected: d,
                    got: e.embedding.len(),
                });
            }
            if e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(LookError::Validation(format!("{} has a non-finite embedding", e.product_id)));
            }
            if norm(&e.embedding) == 0.0 {
                return Err(LookError::ZeroVector);
            }
            grouped.entry(e.article_type.clone()).or_default().push(e);
        }
        let partitions = grouped
            .into_iter()
            .map(|(t, mut entries)| {
                entries.sort_by(|a, b| a.product_id.cmp(&b.product_id));
                let norms = entries.iter().map(|e| norm(&e.embedding)).collect();
                (t, Partition { entries, norms })
            })
            .collect();
        Ok(CatalogIndex { partitions, dims })
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(|p| p.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn article_types(&self) -> impl Iterator<Item = &str> {
        self.partitions.keys().map(String::as_str)
    }

    pub fn partition_len(&self, article_type: &str) -> usize {
        self.partitions.get(article_type).map_or(0, |p| p.entries.len())
    }

    pub fn dim_for_category(&self, broad: &str) -> Option<usize> {
        self.dims.get(broad).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.partitions.values().flat_map(|p| p.entries.iter())
    }

    pub fn get(&self, product_id: &str) -> Option<&CatalogEntry> {
        self.entries().find(|e| e.product_id == product_id)
    }

    /// Exact top-`k` within `article_type`. Equal scores rank by product id.
    pub fn top_k(&self, query: &[f32], article_type: &str, k: usize, mode: ScoringMode) -> Result<Vec<Ranked>> {
        if k == 0 {
            return Err(LookError::InvalidArgument("k must be at least 1".into()));
        }
        let Some(part) = self.partitions.get(article_type) else {
            return Ok(Vec::new());
        };
        let d = part.entries[0].embedding.len();
        if query.len() != d {
            return Err(LookError::Dimension {
                expected: d,
                got: query.len(),
            });
        }
        let scores = match mode {
            ScoringMode::Cosine => Self::cosine_scores(part, query)?,
            ScoringMode::Euclidean => Self::euclidean_scores(part, query),
            ScoringMode::Combined => {
                let n = part.entries.len();
                let mut fused = vec![0.0; n];
                for s in [Self::cosine_scores(part, query)?, Self::euclidean_scores(part, query)] {
                    for (rank, i) in ranking(&s).into_iter().enumerate() {
                        fused[i] += 1.0 / (RRF_C + (rank + 1) as f64);
                    }
                }
                fused
            }
        };
        let mut order = ranking(&scores);
        order.truncate(k);
        Ok(order
            .into_iter()
            .map(|i| Ranked {
                product_id: part.entries[i].product_id.clone(),
                score: scores[i],
            })
            .collect())
    }

    fn cosine_scores(part: &Partition, query: &[f32]) -> Result<Vec<f64>> {
        let qn = norm(query);
        if qn == 0.0 {
            return Err(LookError::ZeroVector);
        }
        Ok(part
            .entries
            .iter()
            .zip(&part.norms)
            .map(|(e, n)| (dot(query, &e.embedding) / (qn * n)).clamp(-1.0, 1.0))
            .collect())
    }

    fn euclidean_scores(part: &Partition, query: &[f32]) -> Vec<f64> {
        part.entries.iter().map(|e| -sq_dist(query, &e.embedding)).collect()
    }

    pub fn query(&self, query_ref: &str, embedding: &[f32], article_type: &str, k: usize, mode: ScoringMode) -> Result<RetrievalResult> {
        Ok(RetrievalResult {
            query_ref: query_ref.to_string(),
            ranked: self.top_k(embedding, article_type, k, mode)?,
        })
    }
}

/// Indices by descending score; partitions are id-sorted so a stable sort
/// resolves ties by product id.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// RRF over the cosine and euclidean rankings.
pub fn combined_score_rank(index: &CatalogIndex, query: &[f32], article_type: &str, k: usize) -> Result<Vec<Ranked>> {
    index.top_k(query, article_type, k, ScoringMode::Combined)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Macro-averaged P@K and R@K. Queries absent from `relevance` have an empty
/// relevant set: they add 0 to P@K and are left out of R@K.
pub fn precision_recall_at_k(
    results: &[RetrievalResult],
    relevance: &BTreeMap<String, BTreeSet<String>>,
    ks: &[usize],
) -> Vec<MetricsAtK> {
    let empty = BTreeSet::new();
    ks.iter()
        .map(|&k| {
            let mut p_sum = 0.0;
            let mut r_sum = 0.0;
            let mut r_count = 0usize;
            for r in results {
                let rel = relevance.get(&r.query_ref).unwrap_or(&empty);
                let hits = r.ranked.iter().take(k).filter(|x| rel.contains(&x.product_id)).count();
                if k > 0 {
                    p_sum += hits as f64 / k as f64;
                }
                if !rel.is_empty() {
                    r_sum += hits as f64 / rel.len() as f64;
                    r_count += 1;
                }
            }
            MetricsAtK {
                k,
                precision: if results.is_empty() { 0.0 } else { p_sum / results.len() as f64 },
                recall: if r_count == 0 { 0.0 } else { r_sum / r_count as f64 },
            }
        })
        .collect()
}

/// `K,P@K,R@K` rows.
pub fn metrics_csv(rows: &[MetricsAtK]) -> String {
    let mut out = String::from("k,precision,recall\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.k, r.precision, r.recall));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogHeader {
    pub format: String,
    pub version: u32,
    pub model_version: String,
    pub category: String,
    pub count: usize,
}

const CATALOG_FORMAT: &str = "looklab-catalog";

/// Catalog embeddings file: one JSON header line, then per entry the
/// length-prefixed (u32 LE) UTF-8 fields product_id, article_type and
/// broad_category, u32 LE `d`, `d` f32 LE values and a length-prefixed
/// metadata JSON object.
pub fn write_catalog(path: &Path, model_version: &str, category: &str, entries: &[CatalogEntry]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LookError::io(parent, e))?;
    }
    let header = CatalogHeader {
        format: CATALOG_FORMAT.into(),
        version: 1,
        model_version: model_version.into(),
        category: category.into(),
        count: entries.len(),
    };
    let file = File::create(path).map_err(|e| LookError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| LookError::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for e in entries {
        for s in [&e.product_id, &e.article_type, &e.broad_category] {
            w.write_all(&(s.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(s.as_bytes()).map_err(io)?;
        }
        w.write_all(&(e.embedding.len() as u32).to_le_bytes()).map_err(io)?;
        for v in &e.embedding {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        let meta = serde_json::to_vec(&e.metadata)?;
        w.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_catalog(path: &Path) -> Result<(CatalogHeader, Vec<CatalogEntry>)> {
    let file = File::open(path).map_err(|e| LookError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| LookError::io(path, e);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    let header: CatalogHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CATALOG_FORMAT || header.version != 1 {
        return Err(LookError::Validation(format!("{} is not a version-1 catalog file", path.display())));
    }
    let u32_at = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        Ok(u32::from_le_bytes(b))
    };
    let mut entries = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut strings = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = u32_at(&mut r)? as usize;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(io)?;
            strings.push(String::from_utf8(buf).map_err(|e| LookError::Validation(e.to_string()))?);
        }
        let d = u32_at(&mut r)? as usize;
        let mut buf = vec![0u8; 4 * d];
        r.read_exact(&mut buf).map_err(io)?;
        let embedding = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let n = u32_at(&mut r)? as usize;
        let mut meta = vec![0u8; n];
        r.read_exact(&mut meta).map_err(io)?;
        let broad_category = strings.pop().unwrap_or_default();
        let article_type = strings.pop().unwrap_or_default();
        let product_id = strings.pop().unwrap_or_default();
        entries.push(CatalogEntry {
            product_id,
            article_type,
            broad_category,
            embedding,
            metadata: serde_json::from_slice(&meta)?,
        });
    }
    Ok((header, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: &str, t: &str, v: Vec<f32>) -> CatalogEntry {
        CatalogEntry {
            product_id: id.into(),
            article_type: t.into(),
            broad_category: "Topwear".into(),
            embedding: v,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(LookError::ZeroVector)));
    }

    #[test]
    fn index_validation() {
        let idx = index_catalog(vec![]).unwrap();
        assert!(idx.top_k(&[1.0], "T-shirts", 3, ScoringMode::Cosine).unwrap().is_empty());
        let dup = vec![entry("a", "T-shirts", vec![1.0]), entry("a", "Shirts", vec![1.0])];
        assert!(matches!(index_catalog(dup), Err(LookError::DuplicateProduct(_))));
        let mixed = vec![entry("a", "T-shirts", vec![1.0]), entry("b", "Shirts", vec![1.0, 2.0])];
        assert!(matches!(index_catalog(mixed), Err(LookError::Dimension { .. })));
        assert!(index_catalog(vec![entry("z", "T-shirts", vec![0.0])]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let idx = index_catalog(vec![
            entry("b", "T-shirts", vec![1.0, 0.0]),
            entry("a", "T-shirts", vec![2.0, 0.0]),
            entry("c", "T-shirts", vec![0.0, 1.0]),
            entry("d", "Jeans", vec![1.0, 0.0]),
        ])
        .unwrap();
        let r = idx.top_k(&[0.0, 3.0], "T-shirts", 1, ScoringMode::Cosine).unwrap();
        assert_eq!(r[0].product_id, "c");
        // Equal cosine scores fall back to product id order.
        let r = idx.top_k(&[1.0, 0.0], "T-shirts", 10, ScoringMode::Cosine).unwrap();
        let ids: Vec<_> = r.iter().map(|x| x.product_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let r = idx.top_k(&[1.0, 0.0], "T-shirts", 10, ScoringMode::Euclidean).unwrap();
        assert_eq!((r[0].product_id.as_str(), r[0].score), ("b", -0.0));
        assert!(idx.top_k(&[1.0], "T-shirts", 1, ScoringMode::Cosine).is_err());
        assert!(idx.top_k(&[1.0, 0.0], "T-shirts", 0, ScoringMode::Cosine).is_err());
        assert!(idx.top_k(&[0.0, 0.0], "T-shirts", 2, ScoringMode::Cosine).is_err());
        let single = idx.top_k(&[0.3, 0.1], "Jeans", 5, ScoringMode::Combined).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].product_id, "d");
    }

    #[test]
    fn rrf_prefers_consistent_item() {
        // Four items: x is 1st by cosine and last by euclidean, y is 2nd by both.
        let x = 1.0 / (RRF_C + 1.0) + 1.0 / (RRF_C + 4.0);
        let y = 2.0 / (RRF_C + 2.0);
        assert!(y > x);
        let idx = index_catalog(vec![
            entry("x", "T", vec![10.0, 0.0]),
            entry("y", "T", vec![1.0, 0.08]),
            entry("z", "T", vec![1.0, 0.5]),
            entry("w", "T", vec![0.2, 1.0]),
        ])
        .unwrap();
        let q = [1.0, 0.0];
        let cos: Vec<_> = idx.top_k(&q, "T", 4, ScoringMode::Cosine).unwrap().into_iter().map(|r| r.product_id).collect();
        let euc: Vec<_> = idx.top_k(&q, "T", 4, ScoringMode::Euclidean).unwrap().into_iter().map(|r| r.product_id).collect();
        assert_eq!(cos, ["x", "y", "z", "w"]);
        assert_eq!(euc, ["y", "z", "w", "x"]);
        let fused = idx.top_k(&q, "T", 4, ScoringMode::Combined).unwrap();
        assert_eq!(fused[0].product_id, "y");
        assert!((fused[0].score - (1.0 / 62.0 + 1.0 / 61.0)).abs() < 1e-15);
    }

    #[test]
    fn precision_recall_examples() {
        let res = |q: &str, ids: &[&str]| RetrievalResult {
            query_ref: q.into(),
            ranked: ids.iter().map(|i| Ranked { product_id: i.to_string(), score: 0.0 }).collect(),
        };
        let rel: BTreeMap<String, BTreeSet<String>> = [
            ("q1".to_string(), ["a", "c", "x", "y"].iter().map(|s| s.to_string()).collect()),
            ("q2".to_string(), ["a", "b"].iter().map(|s| s.to_string()).collect()),
        ]
        .into_iter()
        .collect();
        let m = precision_recall_at_k(&[res("q1", &["a", "b", "c", "d", "e"])], &rel, &[5]);
        assert_eq!((m[0].precision, m[0].recall), (0.4, 0.5));
        let m = precision_recall_at_k(&[res("q2", &["a", "b", "c"])], &rel, &[1, 2, 3]);
        assert_eq!((m[0].precision, m[0].recall), (1.0, 0.5));
        assert_eq!((m[2].precision, m[2].recall), (2.0 / 3.0, 1.0));
        // q3 has no relevance entry: P@K contribution 0, excluded from R@K.
        let m = precision_recall_at_k(&[res("q2", &["a", "b"]), res("q3", &["a", "b"])], &rel, &[2]);
        assert_eq!((m[0].precision, m[0].recall), (0.5, 1.0));
        assert_eq!(metrics_csv(&m), "k,precision,recall\n2,0.500000,1.000000\n");
    }

    #[test]
    fn catalog_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.emb");
        let mut e = entry("p-1", "T-shirts", vec![0.5, -1.25, 3.0]);
        e.metadata.insert("title".into(), serde_json::json!("Striped tee"));
        let entries = vec![e, entry("p-2", "Jeans", vec![1.0, 2.0, 3.0])];
        write_catalog(&path, "m1", "all", &entries).unwrap();
        let (h, back) = read_catalog(&path).unwrap();
        assert_eq!(h.count, 2);
        assert_eq!(back, entries);
    }

    fn brute_force(entries: &[CatalogEntry], q: &[f32], k: usize, mode: ScoringMode) -> Vec<String> {
        let mut ids: Vec<&CatalogEntry> = entries.iter().collect();
        ids.sort_by(|a, b| a.product_id.cmp(&b.product_id));
        let cos = |e: &CatalogEntry| dot(q, &e.embedding) / (norm(q) * norm(&e.embedding));
        let euc = |e: &CatalogEntry| -sq_dist(q, &e.embedding);
        let rank_of = |f: &dyn Fn(&CatalogEntry) -> f64| -> BTreeMap<String, usize> {
            let mut v: Vec<(f64, &str)> = ids.iter().map(|e| (f(e), e.product_id.as_str())).collect();
            v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            v.iter().enumerate().map(|(r, (_, id))| (id.to_string(), r + 1)).collect()
        };
        let mut scored: Vec<(f64, String)> = match mode {
            ScoringMode::Cosine => ids.iter().map(|e| (cos(e).clamp(-1.0, 1.0), e.product_id.clone())).collect(),
            ScoringMode::Euclidean => ids.iter().map(|e| (euc(e), e.product_id.clone())).collect(),
            ScoringMode::Combined => {
                let rc = rank_of(&|e| cos(e).clamp(-1.0, 1.0));
                let re = rank_of(&euc);
                ids.iter()
                    .map(|e| {
                        let id = &e.product_id;
                        (1.0 / (60.0 + rc[id] as f64) + 1.0 / (60.0 + re[id] as f64), id.clone())
                    })
                    .collect()
            }
        };
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|s| s.1).collect()
    }

    fn random_entries() -> impl Strategy<Value = Vec<CatalogEntry>> {
        proptest::collection::vec(proptest::collection::vec(-4i8..4, 4), 1..50).prop_map(|vs| {
            vs.into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let mut e: Vec<f32> = v.into_iter().map(|x| x as f32 * 0.5).collect();
                    if e.iter().all(|x| *x == 0.0) {
                        e[0] = 1.0;
                    }
                    entry(&format!("p{:02}", (i * 37) % 101), "T", e)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn top_k_equals_brute_force(
            entries in random_entries(),
            q in proptest::collection::vec(-4i8..4, 4),
            k in 1usize..60,
            mode in prop_oneof![Just(ScoringMode::Cosine), Just(ScoringMode::Euclidean), Just(ScoringMode::Combined)],
        ) {
            let mut q: Vec<f32> = q.into_iter().map(|x| x as f32 * 0.5).collect();
            if q.iter().all(|x| *x == 0.0) {
                q[1] = 1.0;
            }
            let idx = index_catalog(entries.clone()).unwrap();
            let got: Vec<String> = idx.top_k(&q, "T", k, mode).unwrap().into_iter().map(|r| r.product_id).collect();
            prop_assert_eq!(got, brute_force(&entries, &q, k, mode));
        }

        #[test]
        fn cosine_ranking_scale_invariant(
            entries in random_entries(), q in proptest::collection::vec(0.1f32..2.0, 4), s in 0.25f32..8.0,
        ) {
            let idx = index_catalog(entries).unwrap();
            let ids = |q: &[f32]| -> Vec<String> {
                idx.top_k(q, "T", 100, ScoringMode::Cosine).unwrap().into_iter().map(|r| r.product_id).collect()
            };
            // Power-of-two scales are exact in floating point.
            let s = 2f32.powi(s.log2().round() as i32);
            let scaled: Vec<f32> = q.iter().map(|x| x * s).collect();
            prop_assert_eq!(ids(&q), ids(&scaled));
        }

        #[test]
        fn euclidean_matches_cosine_on_unit_norm(
            raw in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..30),
            q in proptest::collection::vec(-1.0f32..1.0, 3),
        ) {
            let unit = |v: &[f32]| -> Option<Vec<f32>> {
                let n = norm(v);
                (n > 1e-3).then(|| v.iter().map(|x| (*x as f64 / n) as f32).collect())
            };
            let Some(q) = unit(&q) else { return Ok(()); };
            let entries: Vec<_> = raw.iter().enumerate().filter_map(|(i, v)| unit(v).map(|u| entry(&format!("e{i:03}"), "T", u))).collect();
            prop_assume!(!entries.is_empty());
            let idx = index_catalog(entries).unwrap();
            let cos = idx.top_k(&q, "T", 100, ScoringMode::Cosine).unwrap();
            let euc = idx.top_k(&q, "T", 100, ScoringMode::Euclidean).unwrap();
            // Walking the euclidean order, cosine scores never rise beyond rounding noise.
            let cos_of: BTreeMap<&str, f64> = cos.iter().map(|r| (r.product_id.as_str(), r.score)).collect();
            for pair in euc.windows(2) {
                prop_assert!(cos_of[pair[1].product_id.as_str()] <= cos_of[pair[0].product_id.as_str()] + 1e-6);
            }
            prop_assert_eq!(cos.len(), euc.len());
        }

        #[test]
        fn counts_are_integral(
            hits in proptest::collection::vec(any::<bool>(), 1..20), extra in 0usize..5, k in 1usize..20,
        ) {
            let ranked: Vec<Ranked> = hits.iter().enumerate().map(|(i, _)| Ranked { product_id: format!("i{i}"), score: 0.0 }).collect();
            let mut rel: BTreeSet<String> = hits.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| format!("i{i}")).collect();
            for j in 0..extra {
                rel.insert(format!("missing{j}"));
            }
            prop_assume!(!rel.is_empty());
            let n_rel = rel.len();
            let relevance = BTreeMap::from([("q".to_string(), rel)]);
            let m = precision_recall_at_k(&[RetrievalResult { query_ref: "q".into(), ranked }], &relevance, &[k]);
            let pk = m[0].precision * k as f64;
            let rk = m[0].recall * n_rel as f64;
            prop_assert!((pk - pk.round()).abs() < 1e-9 && (rk - rk.round()).abs() < 1e-9);
            prop_assert!((pk - rk).abs() < 1e-9);
        }
    }
}

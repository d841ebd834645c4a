//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every expected value here comes from code in this file (closed forms,
//! brute-force scans, exhaustive enumeration), never from the library under
//! test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use looklab_core::desk::{score_looks, PdpTruth, PDP_MANIFEST, PDP_TRUTH, RELEVANCE_FILE};
use looklab_core::detect::{
    average_precision, evaluate_detections, iou, ArticleTaxonomy, BoundingBox, DetRecord, Detection, Granularity, GroundTruth,
    GtRecord,
};
use looklab_core::embed::{embedding_norm_loss, mine_semi_hard, total_loss, total_loss_grad, triplet_margin_loss, TripletLossConfig};
use looklab_core::feedback::{run_noise_rounds, NoiseExperiment};
use looklab_core::io::{read_json, read_jsonl};
use looklab_core::keypoints::{is_full_shot, KeypointModel};
use looklab_core::pipeline::LookRecommendation;
use looklab_core::retrieve::{CatalogEntry, CatalogIndex, ScoringMode};
use looklab_core::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if took > limit {
        o.pass = false;
    }
    o.detail = format!("{} [{:.2}s, limit {}s]", o.detail, took.as_secs_f64(), limit.as_secs());
    o
}

// ---------------------------------------------------------------- losses

/// Triplets on small integer grids so every value is a short hand sum.
fn fixed_triplets() -> Vec<[Vec<f64>; 3]> {
    let mut out = vec![
        [vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]],
        [vec![1.0, 0.0], vec![0.0, 0.0], vec![3.0, 0.0]],
        [vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]],
        [vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], vec![-1.0, -1.0, -1.0]],
        [vec![0.5, -0.5], vec![0.5, 0.5], vec![0.5, -0.25]],
        [vec![2.0], vec![1.0], vec![2.5]],
        [vec![2.0], vec![2.1], vec![5.0]],
        [vec![0.0, 0.0, 0.0, 0.0], vec![0.25; 4], vec![0.1, 0.0, 0.0, 0.0]],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    while out.len() < 24 {
        let d = rng.random_range(1..=6usize);
        let mut v = || (0..d).map(|_| rng.random_range(-8i32..=8) as f64 / 4.0).collect::<Vec<_>>();
        out.push([v(), v(), v()]);
    }
    out
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s
}

fn loss_oracles() -> Outcome {
    let m = 0.2;
    let alpha = 5e-5;
    let cfg = TripletLossConfig { margin: m, alpha };
    let triplets = fixed_triplets();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for [a, p, n] in &triplets {
        let d = a.len() as f64;
        let hinge = {
            let v = m + sq(a, p) - sq(a, n);
            if v > 0.0 {
                v
            } else {
                0.0
            }
        };
        let zero = vec![0.0; a.len()];
        let norms = (sq(a, &zero) + sq(p, &zero) + sq(n, &zero)) / (3.0 * d);
        let eq2 = triplet_margin_loss(a, p, n, m).unwrap();
        let eq3 = embedding_norm_loss(a, p, n).unwrap();
        let eq1 = total_loss(a, p, n, &cfg).unwrap();
        worst.0 = worst.0.max((eq2 - hinge).abs());
        worst.1 = worst.1.max((eq3 - norms).abs());
        worst.2 = worst.2.max((eq1 - (hinge + alpha * norms)).abs());
    }
    // Hand-checked spot values.
    let spot = [
        (triplet_margin_loss(&[1.0, 0.0], &[0.0, 0.0], &[3.0, 0.0], m).unwrap(), 0.0),
        (triplet_margin_loss(&[2.0], &[1.0], &[2.5], m).unwrap(), 0.2 + 1.0 - 0.25),
        (embedding_norm_loss(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &[-1.0, -1.0, -1.0]).unwrap(), 6.0 / 9.0),
        (embedding_norm_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 15.0 / 6.0),
    ];
    let spot_err = spot.iter().map(|(g, e)| (g - e).abs()).fold(0.0, f64::max);
    let pass = triplets.len() >= 20 && worst.0 <= 1e-9 && worst.1 <= 1e-9 && worst.2 <= 1e-12 && spot_err <= 1e-9;
    outcome(
        pass,
        format!(
            "{} triplets, max err eq2 {:.1e} eq3 {:.1e} total {:.1e} (tol 1e-9/1e-9/1e-12)",
            triplets.len(),
            worst.0,
            worst.1,
            worst.2
        ),
    )
}

fn gradient_check() -> Outcome {
    let cfg = TripletLossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let h = 1e-5;
    while checked < 100 {
        let mut v = || (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, p, n) = (v(), v(), v());
        if (cfg.margin + sq(&a, &p) - sq(&a, &n)).abs() < 1e-3 {
            continue;
        }
        let g = total_loss_grad(&a, &p, &n, &cfg).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (which, grad) in [&g.anchor, &g.positive, &g.negative].into_iter().enumerate() {
            for i in 0..8 {
                let mut x = [a.clone(), p.clone(), n.clone()];
                x[which][i] += h;
                let up = total_loss(&x[0], &x[1], &x[2], &cfg).unwrap();
                x[which][i] -= 2.0 * h;
                let down = total_loss(&x[0], &x[1], &x[2], &cfg).unwrap();
                numeric.push((up - down) / (2.0 * h));
                analytic.push(grad[i]);
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
        checked += 1;
    }
    outcome(worst < 1e-4, format!("{checked} triplets d=8, max relative error {worst:.2e} (tol 1e-4)"))
}

// ---------------------------------------------------------------- mining

/// Exhaustive scan: nearest same-label positive; then, over every negative,
/// the semi-hard band first, the easy side second, smallest distance, lowest
/// index.
fn mining_oracle(anchor: usize, emb: &[Vec<f64>], labels: &[u8], m: f64) -> Option<(usize, Option<usize>)> {
    let dist: Vec<f64> = emb.iter().map(|e| sq(&emb[anchor], e)).collect();
    let positives: Vec<usize> = (0..emb.len()).filter(|&i| i != anchor && labels[i] == labels[anchor]).collect();
    let &p = positives
        .iter()
        .min_by(|&&x, &&y| dist[x].partial_cmp(&dist[y]).unwrap().then(x.cmp(&y)))?;
    let d_ap = dist[p];
    let mut candidates: Vec<(u8, f64, usize)> = (0..emb.len())
        .filter(|&i| labels[i] != labels[anchor])
        .filter_map(|i| {
            let d = dist[i];
            if d > d_ap && d < d_ap + m {
                Some((0, d, i))
            } else if d >= d_ap + m {
                Some((1, d, i))
            } else {
                None
            }
        })
        .collect();
    candidates.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.partial_cmp(&y.1).unwrap()).then(x.2.cmp(&y.2)));
    Some((p, candidates.first().map(|c| c.2)))
}

fn mining_equivalence() -> Outcome {
    let m = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut anchors = 0usize;
    let mut mismatches = 0usize;
    for trial in 0..1000 {
        let b = rng.random_range(2..=16usize);
        let d = rng.random_range(1..=4usize);
        let classes = rng.random_range(1..=4u8);
        // Coarse grids on some trials force exact distance ties.
        let grid = trial % 3 == 0;
        let emb: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                (0..d)
                    .map(|_| if grid { rng.random_range(-2i32..=2) as f64 * 0.1 } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        for a in 0..b {
            anchors += 1;
            let got = mine_semi_hard(a, &emb, &labels, m).ok();
            if got != mining_oracle(a, &emb, &labels, m) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("1000 trials, {anchors} anchors, {mismatches} mismatches"))
}

// ---------------------------------------------------------------- retrieval

fn brute_force(query: &[f32], entries: &[CatalogEntry], k: usize, mode: ScoringMode) -> Vec<(String, f64)> {
    let dot = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
    let cos: Vec<f64> = entries
        .iter()
        .map(|e| (dot(query, &e.embedding) / (dot(query, query).sqrt() * dot(&e.embedding, &e.embedding).sqrt())).clamp(-1.0, 1.0))
        .collect();
    let euc: Vec<f64> = entries
        .iter()
        .map(|e| {
            -query
                .iter()
                .zip(&e.embedding)
                .map(|(a, b)| (*a as f64 - *b as f64) * (*a as f64 - *b as f64))
                .sum::<f64>()
        })
        .collect();
    let order = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&x, &y| s[y].partial_cmp(&s[x]).unwrap().then(entries[x].product_id.cmp(&entries[y].product_id)));
        idx
    };
    let scores = match mode {
        ScoringMode::Cosine => cos,
        ScoringMode::Euclidean => euc,
        ScoringMode::Combined => {
            let mut fused = vec![0.0; entries.len()];
            for s in [&cos, &euc] {
                for (r, i) in order(s).into_iter().enumerate() {
                    fused[i] += 1.0 / (60.0 + (r + 1) as f64);
                }
            }
            fused
        }
    };
    order(&scores).into_iter().take(k).map(|i| (entries[i].product_id.clone(), scores[i])).collect()
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut compared = 0usize;
    let mut failures = Vec::new();
    for &(n, d) in &[(1usize, 3usize), (7, 2), (50, 8), (500, 16), (2_000, 64), (10_000, 64)] {
        let mut entries: Vec<CatalogEntry> = (0..n)
            .map(|i| CatalogEntry {
                // Zero-padded ids would sort like indices; shuffle the digits to
                // make id order differ from insertion order.
                product_id: format!("p{:05}", (i * 7919) % 100_000),
                article_type: "T".into(),
                broad_category: "B".into(),
                embedding: (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                metadata: Default::default(),
            })
            .collect();
        // Duplicated vectors and scaled copies create exact score ties.
        for i in (0..n).step_by(5).skip(1) {
            entries[i].embedding = entries[i - 1].embedding.clone();
        }
        for i in (0..n).step_by(11).skip(1) {
            entries[i].embedding = entries[i - 1].embedding.iter().map(|v| v * 2.0).collect();
        }
        let index = CatalogIndex::build(entries.clone()).unwrap();
        let queries = if n >= 2_000 { 4 } else { 20 };
        for q in 0..queries {
            let query: Vec<f32> = if q % 4 == 0 {
                entries[q % n].embedding.clone()
            } else {
                (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
            };
            for mode in [ScoringMode::Cosine, ScoringMode::Euclidean, ScoringMode::Combined] {
                for k in [1, 14, n] {
                    let got: Vec<(String, f64)> = index
                        .top_k(&query, "T", k, mode)
                        .unwrap()
                        .into_iter()
                        .map(|r| (r.product_id, r.score))
                        .collect();
                    compared += 1;
                    if got != brute_force(&query, &entries, k, mode) {
                        failures.push(format!("n={n} d={d} q={q} {mode:?} k={k}"));
                    }
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{compared} ranked lists up to 10000x64, {} mismatches {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

// ---------------------------------------------------------------- detection metrics

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

fn detection_metrics() -> Outcome {
    let mut problems = Vec::new();
    let a = bx(0.0, 0.0, 2.0, 1.0);
    for (got, want, name) in [
        (iou(&a, &a), 1.0, "identical"),
        (iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0, "disjoint"),
        (iou(&a, &bx(1.0, 0.0, 3.0, 1.0)), 1.0 / 3.0, "half-overlap"),
    ] {
        if got != want {
            problems.push(format!("iou {name}: {got} != {want}"));
        }
    }
    // (flags in score order, num_gt, hand value).
    let t = true;
    let f = false;
    let ap_cases: [(&[bool], usize, f64); 5] = [
        (&[t, t, t], 3, 1.0),
        (&[f, f], 2, 0.0),
        (&[t, f, t], 2, 0.5 * 1.0 + 0.5 * (2.0 / 3.0)),
        (&[f, t, f, t], 4, 0.25 * 0.5 + 0.25 * 0.5),
        // Precision 1, 1/2, 3/5 at the three hits; the envelope lifts 1/2 to 3/5.
        (&[t, f, f, t, t], 3, (1.0 + 0.6 + 0.6) / 3.0),
    ];
    let mut worst_ap = 0.0f64;
    for (flags, num_gt, want) in ap_cases {
        worst_ap = worst_ap.max((average_precision(flags, num_gt) - want).abs());
    }
    if worst_ap > 1e-9 {
        problems.push(format!("AP error {worst_ap:e}"));
    }

    // Three classes through the full evaluator: AP 1, 5/6 and 1/4.
    let gt = |x: f64, t: &str| GroundTruth::new(bx(x, 0.0, x + 10.0, 10.0), t);
    let det = |x: f64, t: &str, s: f64| Detection {
        bbox: bx(x, 0.0, x + 10.0, 10.0),
        article_type: t.into(),
        score: s,
    };
    let gts = vec![GtRecord {
        image_path: "i".into(),
        boxes: vec![
            gt(0.0, "T-shirts"),
            gt(100.0, "Jeans"),
            gt(200.0, "Jeans"),
            gt(300.0, "Skirts"),
            gt(400.0, "Skirts"),
            gt(500.0, "Skirts"),
            gt(600.0, "Skirts"),
        ],
    }];
    let dets = vec![DetRecord {
        image_path: "i".into(),
        boxes: vec![
            det(0.0, "T-shirts", 0.9),
            det(100.0, "Jeans", 0.9),
            det(150.0, "Jeans", 0.8),
            det(200.0, "Jeans", 0.7),
            det(350.0, "Skirts", 0.9),
            det(300.0, "Skirts", 0.8),
            det(450.0, "Skirts", 0.7),
            det(400.0, "Skirts", 0.6),
        ],
    }];
    let report = evaluate_detections(&gts, &dets, 0.5, Granularity::Finer, &ArticleTaxonomy::default()).unwrap();
    let want: BTreeMap<&str, f64> = [("T-shirts", 1.0), ("Jeans", 5.0 / 6.0), ("Skirts", 0.25)].into();
    for (class, w) in &want {
        let got = report.per_class.get(*class).map(|c| c.ap).unwrap_or(f64::NAN);
        if (got - w).abs() > 1e-9 {
            problems.push(format!("{class} AP {got} != {w}"));
        }
    }
    let evaluable: Vec<f64> = report.per_class.values().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    let exact_mean = evaluable.iter().sum::<f64>() / evaluable.len() as f64;
    if report.map != exact_mean || (report.map - (1.0 + 5.0 / 6.0 + 0.25) / 3.0).abs() > 1e-12 {
        problems.push(format!("mAP {} is not the mean {exact_mean}", report.map));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "IoU 1 / 0 / 1/3 exact, 5 AP fixtures within 1e-9, mAP = exact mean".to_string()
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- end to end

fn looklab(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_looklab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("looklab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

struct DeskRun {
    trained: Result<Duration, String>,
}

fn train_models(dir: &Path) -> DeskRun {
    let start = Instant::now();
    let trained = looklab(&["desk", "train", "--out", dir.to_str().unwrap()]).map(|_| start.elapsed());
    DeskRun { trained }
}

fn end_to_end(dir: &Path, run: &DeskRun) -> Outcome {
    let took = match &run.trained {
        Ok(t) => *t,
        Err(e) => return outcome(false, e.clone()),
    };
    let fixtures = dir.join("pdps");
    let recs = dir.join("recs-1.jsonl");
    let steps = looklab(&["desk", "fixtures", "--out", fixtures.to_str().unwrap(), "--n", "50", "--seed", "2024"]).and_then(|_| {
        looklab(&[
            "run",
            "--registry",
            dir.to_str().unwrap(),
            "--manifest",
            fixtures.join(PDP_MANIFEST).to_str().unwrap(),
            "--out",
            recs.to_str().unwrap(),
            "--k",
            "14",
        ])
    });
    if let Err(e) = steps {
        return outcome(false, e);
    }
    let recs: Vec<LookRecommendation> = read_jsonl(&recs).unwrap();
    let truth: Vec<PdpTruth> = read_jsonl(&fixtures.join(PDP_TRUTH)).unwrap();
    let relevance: BTreeMap<String, BTreeSet<String>> = read_json(&fixtures.join(RELEVANCE_FILE)).unwrap();
    let catalog: BTreeSet<String> = synth::catalog_garments().into_iter().map(|g| g.product_id).collect();
    let s = score_looks(&recs, &truth, &relevance, 14);
    let pass = catalog.len() == 60
        && truth.len() == 50
        && s.rank1_rate() >= 0.90
        && s.recall_at_k >= 0.95
        && took <= Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "training {:.0}s (limit 600s), planted item at rank 1 for {}/{} ({:.3}, need 0.90), R@14 {:.3} (need 0.95), look image chosen correctly {}/{}",
            took.as_secs_f64(),
            s.rank1_hits,
            s.queries,
            s.rank1_rate(),
            s.recall_at_k,
            s.selected_correctly,
            s.queries
        ),
    )
}

fn full_shot_agreement(dir: &Path, run: &DeskRun) -> Outcome {
    if let Err(e) = &run.trained {
        return outcome(false, e.clone());
    }
    let model = KeypointModel::load(&dir.join("models/keypoints.ckpt")).unwrap();
    // Seed differs from the training figures.
    let figures = synth::stick_figures(200, 4242);
    let agree = figures
        .iter()
        .filter(|f| is_full_shot(&model.predict(&f.image), model.schema(), 0.5).unwrap() == f.full_shot)
        .count();
    let positives = figures.iter().filter(|f| f.full_shot).count();
    outcome(
        agree as f64 / 200.0 >= 0.98,
        format!("{agree}/200 agree at threshold 0.5 ({positives} full shots in the set, need 196)"),
    )
}

fn determinism(dir: &Path, run: &DeskRun) -> Outcome {
    if let Err(e) = &run.trained {
        return outcome(false, e.clone());
    }
    let manifest = dir.join("pdps").join(PDP_MANIFEST);
    let second = dir.join("recs-2.jsonl");
    if let Err(e) = looklab(&[
        "run",
        "--registry",
        dir.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
        "--k",
        "14",
    ]) {
        return outcome(false, e);
    }
    let a = std::fs::read(dir.join("recs-1.jsonl")).unwrap_or_default();
    let b = std::fs::read(&second).unwrap_or_default();
    outcome(!a.is_empty() && a == b, format!("two batch runs, {} bytes each, identical: {}", a.len(), a == b))
}

fn active_learning() -> Outcome {
    let tax = ArticleTaxonomy::default();
    let clean: Vec<GtRecord> = synth::detector_dataset(120, 77)
        .into_iter()
        .enumerate()
        .map(|(i, (_, boxes))| GtRecord {
            image_path: format!("fig-{i:03}.png"),
            boxes,
        })
        .collect();
    let exp = NoiseExperiment::default();
    let rounds = run_noise_rounds(&clean, &exp, &tax).unwrap();
    let broad = tax.broad_of(&exp.noisy_class).unwrap_or("?").to_string();
    let deltas: Vec<f64> = rounds
        .iter()
        .map(|r| r.comparison.row(&broad).map_or(f64::NAN, |row| row.delta))
        .collect();
    let pass = !deltas.is_empty() && deltas.iter().all(|d| *d > 0.0);
    outcome(
        pass,
        format!(
            "{:.0}% noise on {} ({broad}); AP delta per round {:?}",
            exp.noise_rate * 100.0,
            exp.noisy_class,
            deltas.iter().map(|d| format!("{d:+.4}")).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters from the harness are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("loss oracles", timed(Duration::from_secs(1), loss_oracles)),
        ("gradient check", timed(Duration::from_secs(10), gradient_check)),
        ("semi-hard mining", timed(Duration::from_secs(30), mining_equivalence)),
        ("retrieval exactness", timed(Duration::from_secs(60), retrieval_exactness)),
        ("detection metrics", detection_metrics()),
    ];
    let run = train_models(work.path());
    results.push(("synthetic end-to-end", end_to_end(work.path(), &run)));
    results.push(("full-shot heuristic", full_shot_agreement(work.path(), &run)));
    results.push(("active learning", active_learning()));
    results.push(("determinism", determinism(work.path(), &run)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

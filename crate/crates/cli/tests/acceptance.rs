//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Oracles here are written independently of the library code.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ccfr::eval::{classification_accuracy, compare_modes, generate_fixture, sweep, FixtureConfig};
use ccfr::geometry::{scale_separated_nms_indices, BoundingBox, DEFAULT_NMS_THRESHOLD};
use ccfr::hierarchy::build_hierarchy;
use ccfr::losses::{gradient_suite, GRADIENT_TOLERANCE};
use ccfr::rerank::{
    candidates, class_similarity_scores, rerank_batch, rerank_query, rerank_with_neighbours, retrieve,
    Gate, PredictionRecord, QueryIndex, RerankConfig, TopmMode,
};
use ccfr::retrieval::{Database, EmbeddingRecord, DEFAULT_TOPM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn lib<T>(r: ccfr::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn gradient_suite_criterion() -> Outcome {
    let start = Instant::now();
    let rows = lib(gradient_suite(2024, 100))?;
    let elapsed = start.elapsed();
    let mut detail = Vec::new();
    for r in &rows {
        ensure!(r.instances == 100, "{} ran {} instances", r.loss, r.instances);
        ensure!(
            r.max_rel_error < GRADIENT_TOLERANCE,
            "{} max relative error {:.3e}",
            r.loss,
            r.max_rel_error
        );
        detail.push(format!("{} {:.1e}", r.loss, r.max_rel_error));
    }
    ensure!(rows.len() == 3, "expected 3 losses, got {}", rows.len());
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:.2?}");
    Ok(format!("{}; {elapsed:.2?}", detail.join(", ")))
}

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |r: &BoundingBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// Greedy NMS, one scale at a time: repeatedly take the best remaining box
/// (first in input order on equal scores) and drop everything overlapping it.
fn oracle_nms(boxes: &[BoundingBox], threshold: f64, keep: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for scale in 0..2 {
        let mut remaining: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].scale_index == scale).collect();
        let mut kept = 0;
        while !remaining.is_empty() && kept < keep {
            let mut best = 0;
            for j in 1..remaining.len() {
                if boxes[remaining[j]].score > boxes[remaining[best]].score {
                    best = j;
                }
            }
            let chosen = remaining.remove(best);
            out.push(chosen);
            kept += 1;
            remaining.retain(|&i| oracle_iou(&boxes[chosen], &boxes[i]) <= threshold);
        }
    }
    out
}

fn nms_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut kept_total = 0;
    for set in 0..500 {
        let n = rng.random_range(0..=10);
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..300.0);
                let y = rng.random_range(0.0..300.0);
                let w = rng.random_range(10.0..150.0);
                let h = rng.random_range(10.0..150.0);
                // coarse scores so ties occur
                let score = rng.random_range(0..6) as f64 / 5.0;
                BoundingBox::new(x, y, x + w, y + h, rng.random_range(0..2), score)
            })
            .collect();
        let keep = rng.random_range(1..=4);
        let got = lib(scale_separated_nms_indices(&boxes, DEFAULT_NMS_THRESHOLD, keep))?;
        let want = oracle_nms(&boxes, DEFAULT_NMS_THRESHOLD, keep);
        ensure!(got == want, "set {set}: got {got:?}, oracle {want:?}");
        kept_total += got.len();
    }
    Ok(format!("500 sets, {kept_total} boxes kept, threshold {DEFAULT_NMS_THRESHOLD}"))
}

fn retrieval_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut queries = 0;
    for round in 0..20 {
        let n = rng.random_range(1..=1000);
        let dim = rng.random_range(1..=64);
        let mut records: Vec<EmbeddingRecord> = (0..n)
            .map(|i| EmbeddingRecord {
                id: format!("r{:05}", rng.random_range(0..1_000_000) * 1000 + i),
                label: rng.random_range(0..10),
                embedding: unit(&mut rng, dim),
            })
            .collect();
        // exact duplicates force similarity ties
        for i in 0..n / 10 {
            let src = rng.random_range(0..n);
            records[i].embedding = records[src].embedding.clone();
        }
        let db = lib(Database::build(&records))?;
        for _ in 0..10 {
            let q = if rng.random_bool(0.3) {
                db.embedding(rng.random_range(0..n)).to_vec()
            } else {
                unit(&mut rng, dim)
            };
            let got = lib(db.query_topm(&q, DEFAULT_TOPM))?;
            // oracle: sort every row's similarity, truncate
            let sims = lib(db.similarities(&q))?;
            for (i, s) in sims.iter().enumerate() {
                let by_hand: f64 = db.embedding(i).iter().zip(&q).map(|(a, b)| a * b).sum();
                ensure!((s - by_hand.clamp(-1.0, 1.0)).abs() < 1e-12, "round {round}: similarity {i} off");
            }
            let mut all: Vec<(f64, &str)> = sims.iter().enumerate().map(|(i, &s)| (s, db.id(i))).collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            all.truncate(DEFAULT_TOPM);
            let got_pairs: Vec<(f64, &str)> = got.hits.iter().map(|h| (h.similarity, h.id.as_str())).collect();
            ensure!(got_pairs == all, "round {round}: top-{DEFAULT_TOPM} differs from full sort");
            queries += 1;
        }
    }
    Ok(format!("{queries} queries over 20 databases, topm {DEFAULT_TOPM}"))
}

fn random_prediction(rng: &mut ChaCha8Rng, id: String, classes: usize) -> PredictionRecord {
    let z: Vec<f64> = (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect();
    PredictionRecord::from_logits(id, &z).expect("finite logits")
}

fn random_world(rng: &mut ChaCha8Rng, n: usize, queries: usize, classes: usize, dim: usize)
    -> (Database, QueryIndex, Vec<PredictionRecord>)
{
    let db_records: Vec<EmbeddingRecord> = (0..n)
        .map(|i| EmbeddingRecord {
            id: format!("db-{i}"),
            label: rng.random_range(0..classes),
            embedding: unit(rng, dim),
        })
        .collect();
    let q_records: Vec<EmbeddingRecord> = (0..queries)
        .map(|i| EmbeddingRecord {
            id: format!("q-{i}"),
            label: rng.random_range(0..classes),
            embedding: unit(rng, dim),
        })
        .collect();
    let preds = (0..queries).map(|i| random_prediction(rng, format!("q-{i}"), classes)).collect();
    (
        Database::build(&db_records).expect("valid db"),
        QueryIndex::new(q_records).expect("unique ids"),
        preds,
    )
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn gate_law_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (db, queries, preds) = random_world(&mut rng, 400, 1200, 15, 12);
    let mut mismatches = 0;
    for mode in [TopmMode::FixedTopm, TopmMode::ThresholdOnly] {
        for t_sc in [-1.0, 0.0, 0.5] {
            let cfg = RerankConfig {
                t_sf: 0.0,
                t_sc,
                topm_mode: mode,
                ..RerankConfig::default()
            };
            let out = lib(rerank_batch(&preds, &queries, &db, &cfg))?;
            mismatches += preds
                .iter()
                .zip(&out)
                .filter(|(p, o)| o.predicted_class != argmax(&p.probs) || o.gate != Gate::SoftmaxKept)
                .count();
        }
    }
    ensure!(mismatches == 0, "{mismatches} mismatches");
    Ok(format!("{} queries x 6 settings, 0 mismatches", preds.len()))
}

fn normalization_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (db, queries, preds) = random_world(&mut rng, 300, 1000, 12, 6);
    let mut fired = 0;
    let mut worst = 0.0f64;
    for p in &preds {
        let cfg = RerankConfig {
            t_sf: 1.0,
            t_sc: rng.random_range(-0.5..0.9),
            topn: rng.random_range(1..=12),
            topm: rng.random_range(1..=100),
            alpha: 0.0,
            beta: 1.0,
            topm_mode: if rng.random_bool(0.5) { TopmMode::FixedTopm } else { TopmMode::ThresholdOnly },
        };
        let q = lib(queries.embedding(&p.id))?;
        let neighbours = lib(retrieve(&db, q, &cfg))?;
        let cands = candidates(&p.probs, cfg.topn);
        let passing = neighbours
            .hits
            .iter()
            .any(|h| h.similarity > cfg.t_sc && cands.contains(&h.label));
        let sc = class_similarity_scores(&neighbours, &cands, cfg.t_sc);
        let out = rerank_with_neighbours(p, &neighbours, &cfg);
        if passing && out.gate == Gate::Reranked {
            fired += 1;
            worst = worst.max((sc.values().sum::<f64>() - 1.0).abs());
            worst = worst.max((out.scores.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(fired > 100, "second branch fired only {fired} times");
    ensure!(worst < 1e-9, "Sc sums deviate from 1 by {worst:.3e}");
    Ok(format!("{fired} re-ranked queries, max |sum - 1| = {worst:.1e}"))
}

/// Ten classes; the query belongs to class 7, the classifier leans to class 8
/// at low confidence, and the neighbourhood is mostly class 7.
fn rectification_fixture() -> (Database, QueryIndex, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut train = Vec::new();
    for class in 0..10 {
        for k in 0..6 {
            let mut v = vec![0.0; 10];
            v[class] = 1.0;
            for x in v.iter_mut() {
                *x += rng.random_range(-0.05..0.05);
            }
            if class == 8 {
                v[7] += 0.6;
            }
            train.push(EmbeddingRecord {
                id: format!("train-{class}-{k}"),
                label: class,
                embedding: v,
            });
        }
    }
    let mut q = vec![0.0; 10];
    q[7] = 1.0;
    q[8] = 0.3;
    let queries = QueryIndex::new(vec![EmbeddingRecord {
        id: "query".into(),
        label: 7,
        embedding: q,
    }])
    .expect("one query");
    let mut probs = vec![0.02; 10];
    probs[8] = 0.38;
    probs[7] = 0.34;
    probs[3] = 0.12;
    let s: f64 = probs.iter().sum();
    (
        Database::build(&train).expect("valid db"),
        queries,
        probs.into_iter().map(|p| p / s).collect(),
    )
}

fn rectification_criterion() -> Outcome {
    let (db, queries, probs) = rectification_fixture();
    let low = lib(PredictionRecord::from_probs("query", probs))?;
    ensure!(argmax(&low.probs) == 8 && low.top1_prob() < 0.5, "fixture is not a low-confidence mistake");
    let cfg = RerankConfig {
        topm: 10,
        t_sc: 0.5,
        ..RerankConfig::default()
    };
    let fixed = lib(rerank_query(&low, &queries, &db, &cfg))?;
    ensure!(
        fixed.gate == Gate::Reranked && fixed.predicted_class == 7,
        "low-confidence query ended as class {} ({:?})",
        fixed.predicted_class,
        fixed.gate
    );

    let mut confident = vec![0.01; 10];
    confident[8] = 0.91;
    let high = lib(PredictionRecord::from_probs("query", confident))?;
    let kept = lib(rerank_query(&high, &queries, &db, &cfg))?;
    ensure!(
        kept.gate == Gate::SoftmaxKept && kept.predicted_class == 8,
        "high-confidence query changed to {} ({:?})",
        kept.predicted_class,
        kept.gate
    );
    Ok(format!(
        "top1 {:.2} corrected 8 -> 7; top1 0.91 kept at 8",
        low.top1_prob()
    ))
}

struct DefaultFixture {
    db: Database,
    queries: QueryIndex,
    preds: Vec<PredictionRecord>,
}

fn default_fixture() -> Result<DefaultFixture, String> {
    let f = lib(generate_fixture(&FixtureConfig::default()))?;
    Ok(DefaultFixture {
        db: lib(Database::build(&f.train))?,
        queries: lib(QueryIndex::new(f.test))?,
        preds: f.predictions,
    })
}

fn improvement_criterion() -> Outcome {
    let start = Instant::now();
    let fx = default_fixture()?;
    let cfg = FixtureConfig::default();
    ensure!(
        cfg.num_classes == 200 && cfg.train_per_class == 30 && cfg.test_per_class == 20 && cfg.dim == 64,
        "fixture defaults drifted"
    );
    let truth = fx.queries.truth();
    let rcfg = RerankConfig::default();
    let cmp = lib(compare_modes(&fx.preds, &fx.queries, &fx.db, &rcfg, &truth))?;
    let gated = fx.preds.iter().filter(|p| p.top1_prob() < rcfg.t_sf).count();
    let elapsed = start.elapsed();
    let (ccfr, cls) = (cmp.ccfr.top1_accuracy, cmp.classification.top1_accuracy);
    ensure!(ccfr >= cls, "ccfr {ccfr:.4} < classification {cls:.4}");
    if gated > 0 {
        ensure!(ccfr > cls, "ccfr {ccfr:.4} not above classification {cls:.4} with {gated} gated");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.2?}");
    Ok(format!(
        "ccfr {ccfr:.4} vs classification {cls:.4}, {gated} gated of {}; {elapsed:.2?}",
        fx.preds.len()
    ))
}

fn hierarchy_criterion() -> Outcome {
    let a = vec![1.0, 0.0, 0.0];
    let b = vec![0.0, 1.0, 0.0];
    let h = lib(build_hierarchy(&[a.clone(), a.clone(), b.clone(), b.clone()], 2))?;
    ensure!(h.parent() == [0, 0, 1, 1], "duplicated means gave {:?}", h.parent());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let means: Vec<Vec<f64>> = (0..9).map(|_| unit(&mut rng, 5)).collect();
    let id = lib(build_hierarchy(&means, 9))?;
    ensure!(id.parent() == (0..9).collect::<Vec<_>>(), "C_f = C gave {:?}", id.parent());

    let means: Vec<Vec<f64>> = (0..40).map(|_| unit(&mut rng, 8)).collect();
    let first = serde_json::to_vec(&lib(build_hierarchy(&means, 10))?).map_err(|e| e.to_string())?;
    for _ in 0..5 {
        let again = serde_json::to_vec(&lib(build_hierarchy(&means, 10))?).map_err(|e| e.to_string())?;
        ensure!(again == first, "repeated clustering differs");
    }
    Ok("[0,0,1,1]; identity at C_f = C; 6 identical runs".into())
}

fn sweep_criterion() -> Outcome {
    let start = Instant::now();
    let fx = default_fixture()?;
    let truth = fx.queries.truth();
    let topn: Vec<usize> = (2..=6).collect();
    let t_sf: Vec<f64> = (0..12).map(|i| ((0.40 + 0.05 * i as f64) * 1e9).round() / 1e9).collect();
    let t_sc: Vec<f64> = (0..10).map(|i| ((0.50 + 0.05 * i as f64) * 1e9).round() / 1e9).collect();
    let grid = lib(sweep(&fx.preds, &fx.queries, &fx.db, &truth, &RerankConfig::default(), &topn, &t_sf, &t_sc))?;
    let elapsed = start.elapsed();
    let csv = grid.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    ensure!(lines.len() == 601, "csv has {} lines", lines.len());
    ensure!(lines[0] == "topn,t_sf,t_sc,top1_acc", "header {}", lines[0]);
    let mut seen = std::collections::BTreeSet::new();
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 4 && f.iter().all(|x| !x.is_empty()), "bad row {line}");
        seen.insert((f[0].to_string(), f[1].to_string(), f[2].to_string()));
    }
    ensure!(seen.len() == 600, "{} distinct cells", seen.len());

    // where no query falls below t_sf the gate never fires, so the cell must
    // equal classification-only accuracy
    let cls = lib(classification_accuracy(&fx.preds, &truth))?;
    let mut degenerate = 0;
    for c in &grid.cells {
        let gated = fx.preds.iter().filter(|p| p.top1_prob() < c.t_sf).count();
        ensure!(gated == c.gated, "cell ({}, {}, {}) reports {} gated, expected {gated}", c.topn, c.t_sf, c.t_sc, c.gated);
        if gated == 0 {
            degenerate += 1;
            ensure!(c.top1_accuracy == cls, "degenerate cell t_sf={} has {}", c.t_sf, c.top1_accuracy);
        }
    }
    // the lowest-threshold column also follows the gate law query by query
    let base = RerankConfig {
        t_sf: t_sf[0],
        ..RerankConfig::default()
    };
    let out = lib(rerank_batch(&fx.preds, &fx.queries, &fx.db, &base))?;
    for (p, o) in fx.preds.iter().zip(&out) {
        if p.top1_prob() >= base.t_sf {
            ensure!(o.predicted_class == argmax(&p.probs), "{} left the softmax argmax above t_sf", p.id);
        }
    }
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:.2?}");
    Ok(format!("600 rows, {degenerate} gate-free cells at classification accuracy; {elapsed:.2?}"))
}

fn run_bin(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ccfr"))
        .current_dir(dir)
        .env("CCFR_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "ccfr {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(())
}

fn end_to_end_criterion() -> Outcome {
    let outputs = ["fx/train.jsonl", "fx/queries.jsonl", "fx/preds.jsonl", "db.bin", "rerank.jsonl", "eval.json"];
    let mut runs: Vec<BTreeMap<&str, Vec<u8>>> = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path();
        run_bin(d, &["--seed", "11", "gen-fixture", "--out-dir", "fx"])?;
        run_bin(d, &["build-db", "--embeddings", "fx/train.jsonl", "--out", "db.bin"])?;
        let pipe = ["--db", "db.bin", "--preds", "fx/preds.jsonl", "--queries", "fx/queries.jsonl"];
        let mut rerank = vec!["rerank"];
        rerank.extend(pipe);
        rerank.extend(["--out", "rerank.jsonl"]);
        run_bin(d, &rerank)?;
        let mut eval = vec!["eval"];
        eval.extend(pipe);
        eval.extend(["--out", "eval.json"]);
        run_bin(d, &eval)?;
        let mut files = BTreeMap::new();
        for f in outputs {
            files.insert(f, std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"))?);
        }
        runs.push(files);
    }
    for f in outputs {
        ensure!(runs[0][f] == runs[1][f], "{f} differs between runs");
    }
    let report: serde_json::Value = serde_json::from_slice(&runs[0]["eval.json"]).map_err(|e| e.to_string())?;
    ensure!(report["ccfr"]["top1_accuracy"].is_number(), "eval.json lacks ccfr accuracy");
    Ok(format!("{} outputs byte-identical across 2 runs", outputs.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite_criterion),
        ("nms oracle", nms_criterion),
        ("retrieval oracle", retrieval_criterion),
        ("gate law (t_sf = 0)", gate_law_criterion),
        ("Sc normalization", normalization_criterion),
        ("rectification fixture", rectification_criterion),
        ("synthetic improvement", improvement_criterion),
        ("hierarchy determinism", hierarchy_criterion),
        ("sweep shape", sweep_criterion),
        ("end-to-end determinism", end_to_end_criterion),
    ];
    println!("INFO  published benchmark accuracies: not reproducible without trained CNNs; acceptance is property-based");
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}

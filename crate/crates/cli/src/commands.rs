use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ccfr::eval::{compare_modes, generate_fixture, parse_axis, parse_int_axis, sweep};
use ccfr::features::{assemble_embedding, pad_missing_regions, FeatureBundle, FusionWeights};
use ccfr::geometry::{generate_anchors, scale_separated_nms_indices, BoxRecord};
use ccfr::hierarchy::{build_hierarchy, class_means, default_num_super};
use ccfr::io::{read_jsonl, write_jsonl};
use ccfr::losses::gradient_suite;
use ccfr::rerank::{rerank_batch, PredictionRecord, QueryIndex};
use ccfr::retrieval::{Database, EmbeddingRecord};
use log::info;
use serde::{Deserialize, Serialize};

use crate::args::{Command, NmsArgs, PipelineInputs};
use crate::config::RunConfig;

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_jsonl_atomic<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, rows)?;
    write_atomic(path, &buf)
}

fn load<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>> {
    let start = Instant::now();
    let rows: Vec<T> = read_jsonl(path)?;
    info!("{what}: {} records from {} in {:.2?}", rows.len(), path.display(), start.elapsed());
    Ok(rows)
}

struct Pipeline {
    db: Database,
    preds: Vec<PredictionRecord>,
    queries: QueryIndex,
}

fn load_pipeline(inputs: &PipelineInputs) -> Result<Pipeline> {
    let start = Instant::now();
    let db = Database::load(&inputs.db)?;
    info!("database: {} rows, dim {} in {:.2?}", db.len(), db.dim(), start.elapsed());
    let preds = load(&inputs.preds, "predictions")?;
    let queries = QueryIndex::new(load(&inputs.queries, "queries")?)?;
    Ok(Pipeline { db, preds, queries })
}

/// One line of the fuse input: an id, a label and the features to fuse.
#[derive(Debug, Deserialize)]
struct BundleRecord {
    id: String,
    label: usize,
    #[serde(flatten)]
    bundle: FeatureBundle,
}

#[derive(Serialize)]
struct LogitsRecord<'a> {
    id: &'a str,
    logits: &'a [f64],
}

pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::BuildDb { embeddings, out } => {
            let records: Vec<EmbeddingRecord> = load(embeddings, "embeddings")?;
            let start = Instant::now();
            let db = Database::build(&records)?;
            write_atomic(out, &db.to_bytes())?;
            info!("database: {} rows written to {} in {:.2?}", db.len(), out.display(), start.elapsed());
        }
        Command::Hierarchy {
            embeddings,
            num_super,
            out,
        } => {
            let records: Vec<EmbeddingRecord> = load(embeddings, "embeddings")?;
            let Some(max_label) = records.iter().map(|r| r.label).max() else {
                bail!("no embeddings in {}", embeddings.display());
            };
            let classes = max_label + 1;
            let num_super = num_super.unwrap_or_else(|| default_num_super(classes));
            let start = Instant::now();
            let h = build_hierarchy(&class_means(&records, classes)?, num_super)?;
            let mut json = serde_json::to_vec_pretty(&h)?;
            json.push(b'\n');
            write_atomic(out, &json)?;
            info!("hierarchy: {classes} classes into {num_super} super classes in {:.2?}", start.elapsed());
        }
        Command::Fuse {
            bundle,
            weights,
            out,
            no_normalize,
        } => {
            let rows: Vec<BundleRecord> = load(bundle, "bundles")?;
            let weights: FusionWeights = serde_json::from_str(
                &std::fs::read_to_string(weights).with_context(|| format!("reading {}", weights.display()))?,
            )
            .with_context(|| format!("parsing {}", weights.display()))?;
            weights.validate()?;
            let mut fused = Vec::with_capacity(rows.len());
            for row in rows {
                let dim = row.bundle.global_feature.len();
                let per_scale = weights.regions_per_scale(dim)?;
                let locals = row
                    .bundle
                    .local_features
                    .into_iter()
                    .zip(&per_scale)
                    .map(|(l, &k)| pad_missing_regions(l, k, dim))
                    .collect::<ccfr::Result<Vec<_>>>()?;
                let padded = FeatureBundle {
                    global_feature: row.bundle.global_feature,
                    local_features: locals,
                };
                let embedding = assemble_embedding(&padded, &weights, !no_normalize)
                    .with_context(|| format!("fusing {}", row.id))?;
                fused.push(EmbeddingRecord {
                    id: row.id,
                    label: row.label,
                    embedding,
                });
            }
            write_jsonl_atomic(out, &fused)?;
            info!("fuse: {} embeddings written to {}", fused.len(), out.display());
        }
        Command::Nms(NmsArgs { boxes, out, .. }) => {
            let records: Vec<BoxRecord> = match boxes {
                None => generate_anchors(&cfg.nms.anchors)?
                    .iter()
                    .enumerate()
                    .map(|(i, b)| BoxRecord::from_box(format!("anchor-{i:04}"), b))
                    .collect(),
                Some(path) => {
                    let input: Vec<BoxRecord> = load(path, "boxes")?;
                    let bs: Vec<_> = input.iter().map(BoxRecord::to_box).collect();
                    let idx = scale_separated_nms_indices(
                        &bs,
                        cfg.nms.iou_threshold,
                        cfg.nms.keep_per_scale,
                    )?;
                    idx.into_iter().map(|i| input[i].clone()).collect()
                }
            };
            write_jsonl_atomic(out, &records)?;
            info!("nms: {} boxes written to {}", records.len(), out.display());
        }
        Command::Rerank { inputs, out, .. } => {
            let p = load_pipeline(inputs)?;
            let start = Instant::now();
            let outcomes = rerank_batch(&p.preds, &p.queries, &p.db, &cfg.rerank)?;
            write_jsonl_atomic(out, &outcomes)?;
            info!("rerank: {} queries in {:.2?}", outcomes.len(), start.elapsed());
        }
        Command::Eval { inputs, out, .. } => {
            let p = load_pipeline(inputs)?;
            let start = Instant::now();
            let truth = p.queries.truth();
            let cmp = compare_modes(&p.preds, &p.queries, &p.db, &cfg.rerank, &truth)?;
            let mut json = serde_json::to_vec_pretty(&cmp)?;
            json.push(b'\n');
            write_atomic(out, &json)?;
            info!(
                "eval: retrieval {:.4}, classification {:.4}, ccfr {:.4} over {} queries in {:.2?}",
                cmp.retrieval.top1_accuracy,
                cmp.classification.top1_accuracy,
                cmp.ccfr.top1_accuracy,
                cmp.ccfr.queries,
                start.elapsed()
            );
        }
        Command::Sweep {
            inputs,
            topn,
            t_sf,
            t_sc,
            out,
            ..
        } => {
            let topn = parse_int_axis(topn).context("invalid `topn` axis")?;
            let t_sf = parse_axis(t_sf).context("invalid `t_sf` axis")?;
            let t_sc = parse_axis(t_sc).context("invalid `t_sc` axis")?;
            let p = load_pipeline(inputs)?;
            let start = Instant::now();
            let truth = p.queries.truth();
            let grid = sweep(&p.preds, &p.queries, &p.db, &truth, &cfg.rerank, &topn, &t_sf, &t_sc)?;
            write_atomic(out, grid.to_csv().as_bytes())?;
            info!("sweep: {} cells in {:.2?}", grid.cells.len(), start.elapsed());
        }
        Command::LossCheck { instances } => {
            let start = Instant::now();
            let rows = gradient_suite(cfg.seed, *instances)?;
            println!("{:<16} {:>9} {:>14}  status", "loss", "instances", "max_rel_error");
            for r in &rows {
                println!(
                    "{:<16} {:>9} {:>14.3e}  {}",
                    r.loss,
                    r.instances,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            info!("loss-check: {} losses in {:.2?}", rows.len(), start.elapsed());
            if let Some(bad) = rows.iter().find(|r| !r.passed()) {
                bail!("gradient check failed for {}", bad.loss);
            }
        }
        Command::GenFixture { out_dir, .. } => {
            let start = Instant::now();
            let f = generate_fixture(&cfg.fixture)?;
            write_jsonl_atomic(&out_dir.join("train.jsonl"), &f.train)?;
            write_jsonl_atomic(&out_dir.join("queries.jsonl"), &f.test)?;
            let preds: Vec<LogitsRecord> = f
                .test
                .iter()
                .zip(&f.logits)
                .map(|(r, z)| LogitsRecord { id: &r.id, logits: z })
                .collect();
            write_jsonl_atomic(&out_dir.join("preds.jsonl"), &preds)?;
            info!(
                "gen-fixture: {} train, {} queries, {} classes in {:.2?}",
                f.train.len(),
                f.test.len(),
                cfg.fixture.num_classes,
                start.elapsed()
            );
        }
    }
    Ok(())
}

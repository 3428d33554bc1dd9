//! End-to-end steps shared by the command-line tool and the experiments:
//! dataset generation, training, encoding, indexing, querying, evaluation
//! and saliency rendering.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hashcode::{encode_all, CodeBundle};
use crate::index::{query_category_aware, saliency_map, GroupedIndex, QueryResult};
use crate::metrics::{evaluate, Labeled, Report};
use crate::model::ModelKind;
use crate::synthdata::{generate_dataset, Dataset, Manifest, Record};
use crate::trainer::{self, TraceRow};

pub fn make_dataset(cfg: &RunConfig, exec: Execution) -> Result<(Dataset, Manifest)> {
    let data = generate_dataset(cfg.seed, cfg.splits, &cfg.scene, &cfg.proposals, exec)?;
    let manifest = Manifest {
        categories: cfg.scene.categories,
        height: cfg.scene.height,
        width: cfg.scene.width,
        proposals: cfg.proposals.count,
        seed: cfg.seed,
        splits: cfg.splits,
        config_hash: cfg.hash(),
    };
    Ok((data, manifest))
}

/// Trains a model of `kind` on the training split.
pub fn train_model(cfg: &RunConfig, train: &[Record], kind: ModelKind, exec: Execution) -> Result<(Checkpoint, Vec<TraceRow>)> {
    let mut tcfg = cfg.train.clone();
    if kind == ModelKind::FlatBaseline {
        tcfg.semantic = false;
    }
    let out = trainer::train(kind, cfg.model_shape(), train, &tcfg, cfg.seed, exec)?;
    let ckpt = Checkpoint {
        params: out.params,
        config_hash: cfg.hash_bytes(),
    };
    Ok((ckpt, out.trace))
}

/// Codes for the database and query splits, database first.
pub fn encode_dataset(ckpt: &Checkpoint, data: &Dataset, exec: Execution) -> Result<Vec<CodeBundle>> {
    let mut codes = encode_all(&data.database, &ckpt.params, exec)?;
    codes.extend(encode_all(&data.query, &ckpt.params, exec)?);
    Ok(codes)
}

/// Splits `codes` into (queries, database) by the dataset's split membership.
pub fn split_codes<'a>(codes: &'a [CodeBundle], data: &Dataset) -> Result<(Vec<&'a CodeBundle>, Vec<&'a CodeBundle>)> {
    let db_ids: std::collections::HashSet<u64> = data.database.iter().map(|r| r.scene.id).collect();
    let q_ids: std::collections::HashSet<u64> = data.query.iter().map(|r| r.scene.id).collect();
    let mut queries = Vec::new();
    let mut database = Vec::new();
    for c in codes {
        if q_ids.contains(&c.id) {
            queries.push(c);
        } else if db_ids.contains(&c.id) {
            database.push(c);
        } else {
            return Err(Error::Invalid(format!("code for image {} is not in the database or query split", c.id)));
        }
    }
    Ok((queries, database))
}

/// Database-split codes only.
pub fn database_codes(codes: &[CodeBundle], data: &Dataset) -> Result<Vec<CodeBundle>> {
    let (_, db) = split_codes(codes, data)?;
    Ok(db.into_iter().cloned().collect())
}

/// Query-split codes only.
pub fn query_codes(codes: &[CodeBundle], data: &Dataset) -> Result<Vec<CodeBundle>> {
    let (q, _) = split_codes(codes, data)?;
    Ok(q.into_iter().cloned().collect())
}

/// The full metric report from codes and ground truth.
pub fn evaluate_codes(codes: &[CodeBundle], data: &Dataset, cfg: &RunConfig, exec: Execution) -> Result<Report> {
    let labels: HashMap<u64, &Record> = data
        .database
        .iter()
        .chain(&data.query)
        .map(|r| (r.scene.id, r))
        .collect();
    let (queries, database) = split_codes(codes, data)?;
    let (q, d) = (attach(&queries, &labels), attach(&database, &labels));
    evaluate(&q, &d, cfg.eval_config(), exec)
}

fn attach<'a>(codes: &[&'a CodeBundle], labels: &HashMap<u64, &'a Record>) -> Vec<Labeled<'a>> {
    codes
        .iter()
        .map(|c| Labeled {
            codes: c,
            labels: &labels[&c.id].scene.labels,
        })
        .collect()
}

/// Runs every query against the index.
pub fn run_queries(queries: &[CodeBundle], idx: &GroupedIndex, threshold: f64, top_k: usize, exec: Execution) -> Result<Vec<(u64, QueryResult)>> {
    exec.map(queries, |q| query_category_aware(q, idx, threshold, top_k).map(|r| (q.id, r)))
        .into_iter()
        .collect()
}

/// `query_id  category  rank  image_id  distance`, one line per hit; a query
/// with no retained category gets a single `query_id  -` line.
pub fn format_results(results: &[(u64, QueryResult)]) -> String {
    let mut out = String::from("query\tcategory\trank\timage\tdistance\n");
    for (qid, res) in results {
        if res.groups.is_empty() {
            writeln!(out, "{qid}\t-").expect("write to string");
        }
        for (j, list) in &res.groups {
            if list.is_empty() {
                writeln!(out, "{qid}\t{j}").expect("write to string");
            }
            for (rank, (id, d)) in list.iter().enumerate() {
                writeln!(out, "{qid}\t{j}\t{}\t{id}\t{d}", rank + 1).expect("write to string");
            }
        }
    }
    out
}

pub fn write_results(path: &Path, results: &[(u64, QueryResult)]) -> Result<()> {
    fs::write(path, format_results(results)).map_err(|e| Error::io(path, e))
}

/// Saliency map of image `id` for category `j`, from the model's
/// per-proposal probabilities.
pub fn saliency_for(ckpt: &Checkpoint, record: &Record, j: usize) -> Result<Vec<f64>> {
    let fwd = ckpt.params.forward(record)?;
    let probs = fwd
        .probs()
        .ok_or_else(|| Error::Invalid("saliency needs a model with per-proposal probabilities".into()))?;
    let boxes: Vec<_> = record.proposals.iter().map(|p| p.bbox).collect();
    saliency_map(record.scene.width, record.scene.height, &boxes, probs, j)
}

/// Writes the checkpoint, creating its parent directory.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ensure_parent(path)?;
    checkpoint::save(path, ckpt)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

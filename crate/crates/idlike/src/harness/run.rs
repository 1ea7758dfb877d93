//! Experiment stages: mine, train, score, eval, and the full run.
//!
//! Stages communicate through files under the output directory, so each CLI
//! subcommand can run in isolation and a full run is just the four stages in
//! sequence. Everything is deterministic for a fixed config with the toy
//! encoder: rerunning a stage rewrites byte-identical artifacts.

use std::path::{Path, PathBuf};

use crate::detect::{score_idlike_logit, score_sample, ScoreRecord};
use crate::embed::{normalize, SimilarityRow};
use crate::encoder::{toy_backend, Backend, ImageRef};
use crate::harness::artifacts::{
    average_row, read_jsonl, render_table, write_jsonl, MinedRecord, ReportRow, ScoreDumpRecord,
};
use crate::harness::cache::EmbeddingCache;
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{EncoderChoice, RunConfig};
use crate::harness::manifest::{class_table, ingest_dataset, load_image, sample_fewshot};
use crate::metrics::{auroc, fpr_at_tpr, id_accuracy, EvalResult};
use crate::miner::{build_mined_datasets, MinedDatasets, MinedExample, MinedOutlier};
use crate::prompt::{init_prompts, prompt_features, train, LossWeights};
use crate::{Error, Result};

/// Pipeline scalar: compute in f64, store caches and checkpoints as f32.
pub type Scalar = f64;

pub const TARGET_TPR: f64 = 0.95;

pub fn make_backend(cfg: &RunConfig) -> Result<Box<dyn Backend<Scalar>>> {
    match &cfg.encoder {
        EncoderChoice::Toy { seed, dim } => Ok(Box::new(toy_backend::<Scalar>(*seed, *dim))),
        EncoderChoice::Adapter { endpoint } => Err(Error::BackendUnavailable(format!(
            "no adapter transport is linked into this build (endpoint {endpoint})"
        ))),
    }
}

fn class_names_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("class_names.txt")
}

fn mined_manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("mined.jsonl")
}

fn mined_cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.cache_dir().join("mined_embeddings.bin")
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint.bin")
}

fn id_scores_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("scores_id.jsonl")
}

/// Unique, filename-derived names for the OOD sets, in config order.
pub fn ood_set_names(cfg: &RunConfig) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for path in &cfg.ood_tests {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ood".to_string());
        let mut name = stem.clone();
        let mut suffix = 2;
        while names.contains(&name) {
            name = format!("{stem}_{suffix}");
            suffix += 1;
        }
        names.push(name);
    }
    names
}

fn ood_scores_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(format!("scores_ood_{name}.jsonl"))
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("{key} is required for this stage")))
}

/// Mine crops from the few-shot set; writes the class table, the few-shot
/// list, the mined manifest, and the embedding cache.
pub fn stage_mine(cfg: &RunConfig) -> Result<()> {
    let id_train = require(&cfg.id_train, "data.id_train")?;
    let manifest = ingest_dataset(id_train)?;
    if manifest.class_names.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "id_train manifest {} has no labels",
            id_train.display()
        )));
    }
    let table = class_table(&manifest.class_names);
    let resolved = manifest.resolve_labels(&table)?;
    let labeled: Vec<(PathBuf, usize)> = resolved
        .into_iter()
        .map(|(path, label)| {
            label.map(|l| (path.clone(), l)).ok_or_else(|| {
                Error::UnknownLabel {
                    label: format!("<missing> for {}", path.display()),
                    manifest: id_train.display().to_string(),
                }
            })
        })
        .collect::<Result<_>>()?;

    let fewshot_paths = sample_fewshot(
        &labeled,
        &manifest.class_names,
        cfg.shots,
        cfg.fewshot_seed,
    )?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(
        class_names_path(cfg),
        manifest.class_names.join("\n") + "\n",
    )?;
    let fewshot_lines: Vec<String> = fewshot_paths
        .iter()
        .map(|(p, l)| format!("{}\t{}", p.display(), manifest.class_names[*l]))
        .collect();
    std::fs::write(
        cfg.output_dir.join("fewshot.tsv"),
        fewshot_lines.join("\n") + "\n",
    )?;

    let fewshot: Vec<(ImageRef, usize)> = fewshot_paths
        .iter()
        .map(|(p, l)| Ok((load_image(p)?, *l)))
        .collect::<Result<_>>()?;

    let backend = make_backend(cfg)?;
    let mined = build_mined_datasets(
        &fewshot,
        &manifest.class_names,
        backend.as_ref(),
        &cfg.miner,
        &cfg.templates,
    )?;

    let mut cache = EmbeddingCache::new(backend.dim());
    let mut records = Vec::with_capacity(mined.d_in.len() + mined.d_out.len());
    for ex in &mined.d_in {
        let row = cache.push(&ex.crop_id, Some(ex.label), ex.embedding.as_slice())?;
        records.push(MinedRecord {
            source_index: ex.source_index,
            label: Some(ex.label),
            crop_box: ex.crop_box,
            sim: ex.sim,
            embedding_offset: row,
        });
    }
    for ex in &mined.d_out {
        let row = cache.push(&ex.crop_id, None, ex.embedding.as_slice())?;
        records.push(MinedRecord {
            source_index: ex.source_index,
            label: None,
            crop_box: ex.crop_box,
            sim: ex.sim,
            embedding_offset: row,
        });
    }
    cache.write(&mined_cache_path(cfg))?;
    write_jsonl(&mined_manifest_path(cfg), &records)?;
    Ok(())
}

fn read_class_names(cfg: &RunConfig) -> Result<Vec<String>> {
    let path = class_names_path(cfg);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Rebuild the mined datasets from the manifest plus the embedding cache.
pub fn read_mined(cfg: &RunConfig) -> Result<MinedDatasets<Scalar>> {
    let records: Vec<MinedRecord> = read_jsonl(&mined_manifest_path(cfg))?;
    let cache = EmbeddingCache::read(&mined_cache_path(cfg))?;
    let mut mined = MinedDatasets::default();
    for record in records {
        let values = cache.row::<Scalar>(record.embedding_offset)?;
        let embedding = normalize(&values)?;
        let crop_id = cache.index[record.embedding_offset].sample_id.clone();
        match record.label {
            Some(label) => mined.d_in.push(MinedExample {
                embedding,
                label,
                source_index: record.source_index,
                sim: record.sim,
                crop_box: record.crop_box,
                crop_id,
            }),
            None => mined.d_out.push(MinedOutlier {
                embedding,
                source_index: record.source_index,
                sim: record.sim,
                crop_box: record.crop_box,
                crop_id,
            }),
        }
    }
    Ok(mined)
}

/// Tune prompts on the mined sets; writes the checkpoint and loss history.
pub fn stage_train(cfg: &RunConfig) -> Result<()> {
    let class_names = read_class_names(cfg)?;
    let mined = read_mined(cfg)?;
    let backend = make_backend(cfg)?;
    let prompts = init_prompts(
        &class_names,
        cfg.num_ood_prompts,
        cfg.token_len,
        cfg.prompts_seed,
        backend.as_ref(),
    )?;
    let weights = LossWeights::new(cfg.lambda_out, cfg.lambda_div, cfg.tau)?;
    let (trained, history) = train(&mined, &prompts, backend.as_ref(), &cfg.train, &weights)?;
    save_checkpoint(
        &checkpoint_path(cfg),
        &trained,
        history.len() as u64,
        &cfg.canonical(),
    )?;
    write_jsonl(&cfg.output_dir.join("history.jsonl"), &history)?;
    Ok(())
}

fn score_manifest(
    cfg: &RunConfig,
    backend: &dyn Backend<Scalar>,
    id_feats: &[crate::embed::Embedding<Scalar>],
    ood_feats: &[crate::embed::Embedding<Scalar>],
    manifest_path: &Path,
    labels_from: Option<&[String]>,
) -> Result<Vec<ScoreDumpRecord>> {
    let manifest = ingest_dataset(manifest_path)?;
    let resolved = match labels_from {
        Some(names) => manifest.resolve_labels(&class_table(names))?,
        None => manifest
            .entries
            .iter()
            .map(|e| (e.path.clone(), None))
            .collect(),
    };
    let mut dump = Vec::with_capacity(resolved.len());
    for (path, label) in resolved {
        let image = backend.encode_image(&load_image(&path)?)?;
        let id_sims = id_feats
            .iter()
            .map(|f| f.dot(&image))
            .collect::<Result<Vec<Scalar>>>()?;
        let ood_sims = ood_feats
            .iter()
            .map(|f| f.dot(&image))
            .collect::<Result<Vec<Scalar>>>()?;
        let row = SimilarityRow::new(id_sims, ood_sims)?;
        let record = score_sample(path.display().to_string(), row, cfg.tau)?;
        dump.push(ScoreDumpRecord::from_record(&record, label));
    }
    Ok(dump)
}

/// Score the ID test set and every OOD set against the trained prompts.
pub fn stage_score(cfg: &RunConfig) -> Result<()> {
    let id_test = require(&cfg.id_test, "data.id_test")?;
    if cfg.ood_tests.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one data.ood_test is required".into(),
        ));
    }
    let backend = make_backend(cfg)?;
    let checkpoint = load_checkpoint(&checkpoint_path(cfg), backend.as_ref())?;
    let (id_feats, ood_feats) = prompt_features(&checkpoint.prompts, backend.as_ref())?;

    let id_dump = score_manifest(
        cfg,
        backend.as_ref(),
        &id_feats,
        &ood_feats,
        id_test,
        Some(&checkpoint.class_names),
    )?;
    write_jsonl(&id_scores_path(cfg), &id_dump)?;

    for (path, name) in cfg.ood_tests.iter().zip(ood_set_names(cfg)) {
        let dump = score_manifest(cfg, backend.as_ref(), &id_feats, &ood_feats, path, None)?;
        write_jsonl(&ood_scores_path(cfg, &name), &dump)?;
    }
    Ok(())
}

/// Ranking score recomputed from raw similarities: the log-odds form of the
/// prompt-ratio score (infinite when no OOD prompts exist).
fn ranking_score(row: &SimilarityRow<f64>, tau: f64) -> Result<f64> {
    if row.num_ood() == 0 {
        return Ok(f64::INFINITY);
    }
    score_idlike_logit(row, tau)
}

fn rebuild_records(
    dump: &[ScoreDumpRecord],
    tau: f64,
) -> Result<(Vec<ScoreRecord<f64>>, Vec<f64>)> {
    let mut records = Vec::with_capacity(dump.len());
    let mut rank_scores = Vec::with_capacity(dump.len());
    for rec in dump {
        let row = rec.sim_row()?;
        rank_scores.push(ranking_score(&row, tau)?);
        records.push(score_sample(rec.sample_id.clone(), row, tau)?);
    }
    Ok((records, rank_scores))
}

/// Evaluate a mixed pile of dump records: labeled records are the ID set,
/// unlabeled ones the OOD set.
pub fn evaluate_mixed_dump(dump: &[ScoreDumpRecord], tau: f64) -> Result<EvalResult> {
    let id_dump: Vec<ScoreDumpRecord> =
        dump.iter().filter(|r| r.label.is_some()).cloned().collect();
    let ood_dump: Vec<ScoreDumpRecord> =
        dump.iter().filter(|r| r.label.is_none()).cloned().collect();
    if id_dump.is_empty() || ood_dump.is_empty() {
        return Err(Error::EmptyScores);
    }
    let (id_records, id_scores) = rebuild_records(&id_dump, tau)?;
    let (_, ood_scores) = rebuild_records(&ood_dump, tau)?;
    let labels: Vec<usize> = id_dump.iter().map(|r| r.label.expect("filtered")).collect();
    Ok(EvalResult {
        fpr_at_95: fpr_at_tpr(&id_scores, &ood_scores, TARGET_TPR)?,
        auroc: auroc(&id_scores, &ood_scores)?,
        id_acc: id_accuracy(&id_records, &labels)?,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// Recompute the report from the score dumps on disk.
pub fn stage_eval(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let id_dump: Vec<ScoreDumpRecord> = read_jsonl(&id_scores_path(cfg))?;
    let (id_records, id_scores) = rebuild_records(&id_dump, cfg.tau)?;
    let labels: Vec<usize> = id_dump
        .iter()
        .map(|r| {
            r.label.ok_or_else(|| Error::MalformedFile {
                path: id_scores_path(cfg).display().to_string(),
                detail: format!("sample {} has no label", r.sample_id),
            })
        })
        .collect::<Result<_>>()?;
    let id_acc = id_accuracy(&id_records, &labels)?;

    let mut rows = Vec::new();
    for name in ood_set_names(cfg) {
        let ood_dump: Vec<ScoreDumpRecord> = read_jsonl(&ood_scores_path(cfg, &name))?;
        let (_, ood_scores) = rebuild_records(&ood_dump, cfg.tau)?;
        rows.push(ReportRow {
            ood_set: name,
            result: EvalResult {
                fpr_at_95: fpr_at_tpr(&id_scores, &ood_scores, TARGET_TPR)?,
                auroc: auroc(&id_scores, &ood_scores)?,
                id_acc,
                n_id: id_scores.len(),
                n_ood: ood_scores.len(),
            },
        });
    }
    if let Some(avg) = average_row(&rows) {
        rows.push(avg);
    }
    write_jsonl(&cfg.output_dir.join("report.jsonl"), &rows)?;
    std::fs::write(cfg.output_dir.join("report.txt"), render_table(&rows))?;
    Ok(rows)
}

/// Full pipeline: mine, train, score, eval.
///
/// On failure a `FAILED` marker holding the error text is left next to
/// whatever artifacts were already flushed.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let marker = cfg.output_dir.join("FAILED");
    if marker.exists() {
        std::fs::remove_file(&marker)?;
    }
    let outcome = stage_mine(cfg)
        .and_then(|()| stage_train(cfg))
        .and_then(|()| stage_score(cfg))
        .and_then(|()| stage_eval(cfg));
    if let Err(e) = &outcome {
        let _ = std::fs::write(&marker, format!("{e}\n"));
    }
    outcome
}

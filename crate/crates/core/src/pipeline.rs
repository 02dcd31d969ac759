//! The steps behind the CLI: prepare, evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{
    build_concept_dictionary, load_label_map, load_manifest, read_id_list, split_train_val, write_id_list,
    ConceptDictionary, Letterbox, Raster, SampleRecord, SplitSpec,
};
use crate::geometry::Grid;
use crate::inference::{aggregate, dice, iou, predict_semantic_map, EvalRecord, Segmenter, SplitKind};
use crate::report::{compare, Comparison};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub train: usize,
    pub val: usize,
    pub concepts: usize,
}

/// Writes `train.txt`, `val.txt` and `concepts.tsv` into `out_dir`.
pub fn prepare(manifest: &Path, spec: &SplitSpec, out_dir: &Path) -> Result<PrepareSummary> {
    let records = load_manifest(manifest)?;
    let dict = build_concept_dictionary(&records)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let (train, val) = split_train_val(&ids, spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    write_id_list(&out_dir.join("train.txt"), &train)?;
    write_id_list(&out_dir.join("val.txt"), &val)?;
    let dict_path = out_dir.join("concepts.tsv");
    fs::write(&dict_path, dict.to_tsv()).map_err(|e| Error::file(&dict_path, e))?;
    Ok(PrepareSummary {
        train: train.len(),
        val: val.len(),
        concepts: dict.vocabulary().len(),
    })
}

/// Scores one sample: letterbox, predict a semantic map over the dataset's
/// concepts, map it back to the original resolution and compare each
/// concept's region with the ground-truth label map.
pub fn evaluate_sample(
    model: &dyn Segmenter,
    record: &SampleRecord,
    image: &Raster,
    labels: &Grid<u8>,
    dict: &ConceptDictionary,
    kind: SplitKind,
) -> Result<Vec<EvalRecord>> {
    let concepts = dict.dataset_concepts(&record.dataset_name);
    if concepts.is_empty() {
        return Ok(Vec::new());
    }
    let lb = Letterbox::fit(image.height(), image.width(), model.canvas());
    let (map, _) = predict_semantic_map(model, &lb.apply_image(image)?, &concepts)?;
    let predicted = lb.invert_grid(&map.labels);
    concepts
        .iter()
        .enumerate()
        .map(|(i, concept)| {
            let gt = labels.map(|&l| l != 0 && dict.concept(&record.dataset_name, l) == Some(concept.as_str()));
            let pred = predicted.map(|&l| l == i as u32 + 1);
            Ok(EvalRecord {
                dataset: record.dataset_name.clone(),
                concept: concept.clone(),
                dice: dice(&pred, &gt)?,
                iou: iou(&pred, &gt)?,
                sample_id: record.id.clone(),
                split_kind: kind,
            })
        })
        .collect()
}

/// Ids of a named split: `train`, `val` (from the split directory) or
/// `all` (manifest order).
pub fn split_ids(records: &[SampleRecord], split_dir: &Path, split: &str) -> Result<Vec<String>> {
    match split {
        "all" => Ok(records.iter().map(|r| r.id.clone()).collect()),
        "train" | "val" => read_id_list(&split_dir.join(format!("{split}.txt"))),
        other => Err(Error::Validation(format!("unknown split {other:?}; use train, val or all"))),
    }
}

/// Evaluates every sample of a split, in split order.
pub fn evaluate(
    model: &dyn Segmenter,
    manifest: &Path,
    split_dir: &Path,
    split: &str,
    kind: SplitKind,
) -> Result<Vec<EvalRecord>> {
    let records = load_manifest(manifest)?;
    let dict_path = split_dir.join("concepts.tsv");
    let dict = match fs::read_to_string(&dict_path) {
        Ok(text) => ConceptDictionary::from_tsv(&text)?,
        Err(_) => build_concept_dictionary(&records)?,
    };
    let ids = split_ids(&records, split_dir, split)?;
    let mut out = Vec::new();
    for id in &ids {
        let record = records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::Validation(format!("split lists unknown id {id:?}")))?;
        let image = Raster::load(&record.image_path)?;
        let labels = load_label_map(&record.mask_path)?;
        out.extend(evaluate_sample(model, record, &image, &labels, &dict, kind)?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if records.is_empty() {
        return Err(Error::Validation(format!("{}: no evaluation records", path.display())));
    }
    Ok(records)
}

/// Writes `records.jsonl`, `summary.json` and `report.txt` for one run.
pub fn write_eval_outputs(out_dir: &Path, records: &[EvalRecord]) -> Result<Comparison> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    write_records(&out_dir.join("records.jsonl"), records)?;
    let summary = aggregate(records)?;
    let summary_path = out_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::file(&summary_path, e))?;
    let comparison = compare(&[("run".to_string(), summary)])?;
    let report_path = out_dir.join("report.txt");
    fs::write(&report_path, comparison.render_table()).map_err(|e| Error::file(&report_path, e))?;
    Ok(comparison)
}

/// Display name of a record file: its stem, or its directory's name when
/// the stem is the default `records`.
fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "records" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

/// Compares one or two record files; writes `report.txt`,
/// `comparison.json` and `radar.svg` into `out_dir`.
pub fn report(files: &[PathBuf], out_dir: &Path) -> Result<Comparison> {
    let mut runs = Vec::new();
    for f in files {
        let mut name = run_name(f);
        if runs.iter().any(|(n, _)| *n == name) {
            name = format!("{name}#{}", runs.len() + 1);
        }
        runs.push((name, aggregate(&read_records(f)?)?));
    }
    let comparison = compare(&runs)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::file(&p, e))
    };
    write("report.txt", comparison.render_table())?;
    write("comparison.json", serde_json::to_string_pretty(&comparison)? + "\n")?;
    write("radar.svg", comparison.radar_svg())?;
    Ok(comparison)
}

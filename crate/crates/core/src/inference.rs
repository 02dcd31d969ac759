//! Text-only inference and the Dice/IoU evaluation harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Raster;
use crate::geometry::{resize_bilinear, BinaryMask, Grid, ScoreMap};
use crate::model::QueryPrediction;
use crate::objective::sigmoid;
use crate::{Error, Result};

/// Mask binarization threshold on pixel probabilities.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Anything that maps a letterboxed image and a list of concepts to one row
/// of query predictions per concept.
pub trait Segmenter {
    /// Side of the square canvas the model expects.
    fn canvas(&self) -> usize;

    fn predict(&self, image: &Raster, concepts: &[String]) -> Result<Vec<Vec<QueryPrediction>>>;
}

/// The selected mask for one text prompt, at canvas resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptResult {
    pub concept: String,
    pub confidence: f64,
    pub mask: BinaryMask,
    pub raw_probs: ScoreMap,
}

/// Picks the highest-confidence query (lowest index on ties), upsamples its
/// mask logits to `canvas` and thresholds the probabilities.
pub fn select_prompt(concept: &str, preds: &[QueryPrediction], canvas: usize) -> Result<PromptResult> {
    let (best, confidence) = preds
        .iter()
        .map(QueryPrediction::confidence)
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, c)| match acc {
            Some((_, bc)) if c <= bc => acc,
            _ => Some((i, c)),
        })
        .ok_or_else(|| Error::Validation(format!("no query predictions for {concept:?}")))?;
    let raw_probs = resize_bilinear(&preds[best].mask_logits, canvas, canvas).map(|&x| sigmoid(x));
    Ok(PromptResult {
        concept: concept.to_string(),
        confidence,
        mask: raw_probs.map(|&p| p >= MASK_THRESHOLD),
        raw_probs,
    })
}

pub fn predict_concept(model: &dyn Segmenter, image: &Raster, concept: &str) -> Result<PromptResult> {
    let rows = model.predict(image, &[concept.to_string()])?;
    select_prompt(concept, rows.first().map(Vec::as_slice).unwrap_or(&[]), model.canvas())
}

/// One label per pixel; 0 is background, `i + 1` the `i`-th concept.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub labels: Grid<u32>,
    pub legend: BTreeMap<u32, String>,
}

impl SemanticMap {
    pub fn mask_of(&self, label: u32) -> BinaryMask {
        self.labels.map(|&l| l == label)
    }
}

/// Resolves per-concept results into one map: each pixel goes to the
/// concept with the largest `confidence * prob` among those whose
/// probability clears the threshold; earlier concepts win ties.
pub fn merge_prompts(results: &[PromptResult]) -> Result<SemanticMap> {
    let first = results
        .first()
        .ok_or_else(|| Error::Validation("semantic map needs at least one concept".into()))?;
    let (h, w) = first.raw_probs.dims();
    if results.iter().any(|r| r.raw_probs.dims() != (h, w)) {
        return Err(Error::Validation("prompt results differ in shape".into()));
    }
    let labels = Grid::from_fn(h, w, |r, c| {
        let mut best: Option<(u32, f64)> = None;
        for (i, res) in results.iter().enumerate() {
            let p = *res.raw_probs.get(r, c);
            if p < MASK_THRESHOLD {
                continue;
            }
            let score = res.confidence * p;
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((i as u32 + 1, score));
            }
        }
        best.map_or(0, |(l, _)| l)
    });
    let legend = results
        .iter()
        .enumerate()
        .map(|(i, r)| (i as u32 + 1, r.concept.clone()))
        .collect();
    Ok(SemanticMap { labels, legend })
}

/// Queries each concept independently and merges the results.
pub fn predict_semantic_map(
    model: &dyn Segmenter,
    image: &Raster,
    concepts: &[String],
) -> Result<(SemanticMap, Vec<PromptResult>)> {
    if concepts.is_empty() {
        return Err(Error::Validation("semantic map needs at least one concept".into()));
    }
    let rows = model.predict(image, concepts)?;
    if rows.len() != concepts.len() {
        return Err(Error::Validation(format!(
            "model returned {} prediction rows for {} concepts",
            rows.len(),
            concepts.len()
        )));
    }
    let results = concepts
        .iter()
        .zip(&rows)
        .map(|(c, preds)| select_prompt(c, preds, model.canvas()))
        .collect::<Result<Vec<_>>>()?;
    Ok((merge_prompts(&results)?, results))
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g) = (pred.count(), gt.count());
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / (p + g) as f64)
}

/// `|P ∩ G| / |P ∪ G|`; 1 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let inter = pred.intersection_count(gt);
    let union = pred.count() + gt.count() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Internal,
    External,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Internal => "internal",
            SplitKind::External => "external",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(SplitKind::Internal),
            "external" => Ok(SplitKind::External),
            other => Err(Error::Config(format!("split kind must be internal or external, got {other:?}"))),
        }
    }
}

/// Per-sample, per-concept scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub concept: String,
    pub dice: f64,
    pub iou: f64,
    pub sample_id: String,
    pub split_kind: SplitKind,
}

/// Mean scores of one dataset, in percent and unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub kind: SplitKind,
    pub records: usize,
    pub dice: f64,
    pub iou: f64,
}

/// Unweighted mean over the datasets of one split kind, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindAverage {
    pub kind: SplitKind,
    pub datasets: usize,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub datasets: Vec<DatasetScore>,
    pub averages: Vec<KindAverage>,
}

impl Summary {
    pub fn dataset(&self, name: &str) -> Option<&DatasetScore> {
        self.datasets.iter().find(|d| d.dataset == name)
    }

    pub fn average(&self, kind: SplitKind) -> Option<&KindAverage> {
        self.averages.iter().find(|a| a.kind == kind)
    }
}

/// Per-dataset means over records, then unweighted means over the datasets
/// of each split kind. Datasets keep their order of first appearance.
/// Records are summed in sample-id order so that the result does not
/// depend on the order they were produced in.
pub fn aggregate(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Validation("cannot aggregate zero evaluation records".into()));
    }
    let mut order: Vec<(String, SplitKind)> = Vec::new();
    let mut grouped: BTreeMap<(String, SplitKind), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.dataset.clone(), r.split_kind);
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().push(r);
    }
    let datasets: Vec<DatasetScore> = order
        .into_iter()
        .map(|key| {
            let mut rs = grouped.remove(&key).unwrap_or_default();
            rs.sort_by(|a, b| (&a.sample_id, &a.concept).cmp(&(&b.sample_id, &b.concept)));
            let n = rs.len() as f64;
            DatasetScore {
                records: rs.len(),
                dice: 100.0 * rs.iter().map(|r| r.dice).sum::<f64>() / n,
                iou: 100.0 * rs.iter().map(|r| r.iou).sum::<f64>() / n,
                dataset: key.0,
                kind: key.1,
            }
        })
        .collect();
    let averages = [SplitKind::Internal, SplitKind::External]
        .into_iter()
        .filter_map(|kind| {
            let ds: Vec<&DatasetScore> = datasets.iter().filter(|d| d.kind == kind).collect();
            (!ds.is_empty()).then(|| {
                let n = ds.len() as f64;
                KindAverage {
                    kind,
                    datasets: ds.len(),
                    dice: ds.iter().map(|d| d.dice).sum::<f64>() / n,
                    iou: ds.iter().map(|d| d.iou).sum::<f64>() / n,
                }
            })
        })
        .collect();
    Ok(Summary { datasets, averages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NormBox;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        Grid::from_fn(rows.len(), rows[0].len(), |r, c| rows[r].as_bytes()[c] == b'1')
    }

    fn query(conf_logit: f64, fill: f64) -> QueryPrediction {
        QueryPrediction {
            class_logit: conf_logit,
            presence_logit: 10.0,
            bbox: NormBox::new(0.5, 0.5, 0.5, 0.5),
            mask_logits: Grid::filled(2, 2, fill),
        }
    }

    fn prompt(concept: &str, confidence: f64, probs: Vec<f64>, w: usize) -> PromptResult {
        let raw = Grid::from_vec(probs.len() / w, w, probs).unwrap();
        PromptResult {
            concept: concept.into(),
            confidence,
            mask: raw.map(|&p| p >= 0.5),
            raw_probs: raw,
        }
    }

    #[test]
    fn metric_examples() {
        let p = mask(&["1111", "0000"]);
        let g = mask(&["1100", "1100"]);
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        let empty = mask(&["0000", "0000"]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&p, &empty).unwrap(), 0.0);
        assert_eq!(iou(&mask(&["10"]), &mask(&["01"])).unwrap(), 0.0);
        assert!(dice(&mask(&["1"]), &p).is_err());
    }

    #[test]
    fn argmax_query_and_ties() {
        let preds = [query(-3.0, -5.0), query(2.2, 5.0)];
        let r = select_prompt("x", &preds, 4).unwrap();
        assert!(r.confidence > 0.89 && r.mask.count() == 16);
        let tied = [query(1.0, -5.0), query(1.0, 5.0)];
        assert_eq!(select_prompt("x", &tied, 4).unwrap().mask.count(), 0);
    }

    #[test]
    fn semantic_map_examples() {
        let none = merge_prompts(&[prompt("a", 0.9, vec![0.1; 4], 2)]).unwrap();
        assert!(none.labels.as_slice().iter().all(|&l| l == 0));

        let disjoint = merge_prompts(&[
            prompt("a", 0.9, vec![0.9, 0.9, 0.1, 0.1], 2),
            prompt("b", 0.9, vec![0.1, 0.1, 0.9, 0.9], 2),
        ])
        .unwrap();
        assert_eq!(disjoint.labels.as_slice(), [1, 1, 2, 2]);

        let contested = merge_prompts(&[prompt("a", 0.9, vec![0.8], 1), prompt("b", 0.7, vec![0.9], 1)]).unwrap();
        assert_eq!(contested.labels.as_slice(), [1]);
        assert_eq!(contested.legend[&1], "a");

        let tie = merge_prompts(&[prompt("a", 0.5, vec![0.8], 1), prompt("b", 0.8, vec![0.5], 1)]).unwrap();
        assert_eq!(tie.labels.as_slice(), [1]);
    }

    fn rec(dataset: &str, kind: SplitKind, id: &str, dice: f64) -> EvalRecord {
        EvalRecord {
            dataset: dataset.into(),
            concept: "c".into(),
            dice,
            iou: dice / 2.0,
            sample_id: id.into(),
            split_kind: kind,
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[rec("d", SplitKind::Internal, "1", 0.5), rec("d", SplitKind::Internal, "2", 0.7)]).unwrap();
        assert!((s.datasets[0].dice - 60.0).abs() < 1e-12);

        let s = aggregate(&[
            rec("a", SplitKind::External, "1", 0.8),
            rec("b", SplitKind::External, "1", 0.6),
            rec("b", SplitKind::External, "2", 0.6),
        ])
        .unwrap();
        assert!((s.average(SplitKind::External).unwrap().dice - 70.0).abs() < 1e-12);
        assert!(s.average(SplitKind::Internal).is_none());

        let same: Vec<_> = (0..5).map(|i| rec(&format!("d{i}"), SplitKind::Internal, "x", 0.42)).collect();
        let s = aggregate(&same).unwrap();
        assert!((s.average(SplitKind::Internal).unwrap().dice - 42.0).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    fn random_mask(seed: u64, h: usize, w: usize, density: f64) -> BinaryMask {
        let mut s = crate::rng::Stream::new(seed);
        Grid::from_fn(h, w, |_, _| s.unit() < density)
    }

    proptest! {
        #[test]
        fn dice_dominates_iou(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, d in 0.0..1.0f64) {
            let p = random_mask(seed, h, w, d);
            let g = random_mask(seed ^ 0x55, h, w, d);
            let (dv, iv) = (dice(&p, &g).unwrap(), iou(&p, &g).unwrap());
            prop_assert!(dv >= iv);
            if dv != 0.0 && dv != 1.0 {
                prop_assert!(dv > iv);
            }
            prop_assert_eq!(dv, dice(&g, &p).unwrap());
            prop_assert_eq!(iv, iou(&g, &p).unwrap());
        }
    }
}

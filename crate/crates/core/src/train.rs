//! The training loop: batching, matching, the loss graph, grouped rates,
//! logging, validation and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{
    expand_to_triplets, load_label_map, read_id_list, ConceptDictionary, InstanceTarget, Raster, SampleRecord,
    TripletSample,
};
use crate::geometry::{Grid, NormBox};
use crate::inference::{EvalRecord, SplitKind};
use crate::matching::{
    hungarian_assign, one_to_many_assign, pairwise_cost, Assignment, MatcherWeights, O2MConfig,
};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{embed_concept, ConceptEmbedding, ModelOutput, ParamGroup, QueryPrediction, ToyModel};
use crate::objective::graph::{batch_loss, ImageTargets};
use crate::objective::LossBreakdown;
use crate::pipeline::evaluate_sample;
use crate::rng::{derive_seed, Stream};
use crate::schedule::AdamW;
use crate::{Error, Result};

/// A corpus sample in memory: original image and label map, plus the
/// letterboxed triplet used for training.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: SampleRecord,
    pub image: Raster,
    pub labels: Grid<u8>,
    pub triplet: TripletSample,
}

/// Loads the records named by `ids`, in `ids` order.
pub fn load_samples(
    records: &[SampleRecord],
    ids: &[String],
    dict: &ConceptDictionary,
    canvas: usize,
) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            let record = *by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Validation(format!("split lists unknown id {id:?}")))?;
            let triplet = expand_to_triplets(record, dict)?;
            let labels = load_label_map(&record.mask_path)?;
            Ok(Sample {
                record: record.clone(),
                image: triplet.image.clone(),
                labels,
                triplet: triplet.letterboxed(canvas)?,
            })
        })
        .collect()
}

/// One prompted training example: a sample and one of its dataset's
/// concepts (possibly absent from the image).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainItem {
    pub sample: usize,
    pub concept: String,
}

pub fn build_items(samples: &[Sample], dict: &ConceptDictionary) -> Vec<TrainItem> {
    let mut items = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for concept in dict.dataset_concepts(&s.record.dataset_name) {
            items.push(TrainItem { sample: i, concept });
        }
    }
    items
}

/// Item order of one epoch: a seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Stream::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
    order
}

/// Detached class/presence/box outputs for matching (masks omitted).
fn matcher_view(out: &ModelOutput) -> Result<Vec<Vec<QueryPrediction>>> {
    let cls = out.class_logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let pres = out.presence_logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let boxes = out.boxes.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    Ok(cls
        .iter()
        .zip(&pres)
        .zip(&boxes)
        .map(|((c, p), b)| {
            c.iter()
                .zip(p)
                .zip(b)
                .map(|((&class_logit, &presence_logit), bx)| QueryPrediction {
                    class_logit,
                    presence_logit,
                    bbox: NormBox::new(bx[0], bx[1], bx[2], bx[3]),
                    mask_logits: Grid::filled(1, 1, 0.0),
                })
                .collect()
        })
        .collect())
}

/// Matches each image's targets against its (detached) predictions: focal
/// Hungarian one-to-one plus the auxiliary one-to-many assignment.
pub fn supervise(
    out: &ModelOutput,
    targets: Vec<Vec<InstanceTarget>>,
    matcher: &MatcherWeights,
    o2m: &O2MConfig,
) -> Result<Vec<ImageTargets>> {
    let view = matcher_view(out)?;
    if view.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} prediction rows for {} target sets",
            view.len(),
            targets.len()
        )));
    }
    view.iter()
        .zip(targets)
        .map(|(preds, targets)| {
            let o2o = if targets.is_empty() {
                Assignment::empty(preds.len())
            } else {
                hungarian_assign(&pairwise_cost(preds, &targets, matcher)?)?
            };
            let o2m = one_to_many_assign(preds, &targets, &o2o, o2m);
            Ok(ImageTargets {
                prompt_present: !targets.is_empty(),
                targets,
                o2o,
                o2m,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct StepLog<'a> {
    step: usize,
    epoch: usize,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
    lr: BTreeMap<&'static str, f64>,
}

#[derive(Debug, Serialize)]
struct ValLog {
    step: usize,
    val_dice: f64,
    val_iou: f64,
    best: bool,
}

/// Model, optimizer and position of a training run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: ToyModel,
    optimizer: AdamW,
    step: usize,
    best_val_dice: Option<f64>,
    embeddings: HashMap<String, ConceptEmbedding>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let (model, step, best, moments) = if config.resume.as_os_str().is_empty() {
            (ToyModel::new(config.model, config.seed, DType::F32, &device)?, 0, None, None)
        } else {
            let loaded = checkpoint::load(&config.resume, DType::F32, &device)?;
            if loaded.meta.model != config.model {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            (loaded.model, loaded.meta.step, loaded.meta.best_val_dice, loaded.moments)
        };
        let vars: Vec<_> = model.params().iter().map(|p| &p.var).collect();
        let mut optimizer = AdamW::new(&vars, config.rates.schedule)?;
        if let Some(m) = moments {
            optimizer.restore(step, m)?;
        }
        Ok(Trainer {
            config,
            model,
            optimizer,
            step,
            best_val_dice: best,
            embeddings: HashMap::new(),
        })
    }

    /// Optimizer steps completed.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn best_val_dice(&self) -> Option<f64> {
        self.best_val_dice
    }

    fn embedding(&mut self, concept: &str) -> Result<ConceptEmbedding> {
        if let Some(e) = self.embeddings.get(concept) {
            return Ok(e.clone());
        }
        let e = embed_concept(concept, self.config.model.text_dim)?;
        self.embeddings.insert(concept.to_string(), e.clone());
        Ok(e)
    }

    /// Per-group rate at step `t` (the vision backbone at its top layer).
    pub fn group_rates(&self, t: usize) -> Result<BTreeMap<&'static str, f64>> {
        let plan = &self.config.rates;
        ParamGroup::ALL
            .iter()
            .map(|&g| {
                let layer = (g == ParamGroup::VisionBackbone).then_some(plan.llrd_layers);
                Ok((g.name(), plan.effective_rate(g, layer, t)?))
            })
            .collect()
    }

    /// Forward pass, matching and loss for a batch, without updating.
    pub fn batch_loss(&mut self, samples: &[Sample], items: &[&TrainItem]) -> Result<(Tensor, LossBreakdown)> {
        let images: Vec<&Raster> = items.iter().map(|it| &samples[it.sample].triplet.image).collect();
        let embs = items
            .iter()
            .map(|it| self.embedding(&it.concept))
            .collect::<Result<Vec<_>>>()?;
        let image_t = self.model.image_batch(&images)?;
        let text_t = self.model.text_batch(&embs.iter().collect::<Vec<_>>())?;
        let out = self.model.forward(&image_t, &text_t)?;
        if !out.is_finite()? {
            return Err(self.nonfinite(samples, items));
        }

        let targets = items
            .iter()
            .map(|it| samples[it.sample].triplet.targets_for(&it.concept))
            .collect::<Result<Vec<_>>>()?;
        let supervision = supervise(&out, targets, &self.config.matcher, &self.config.o2m)?;
        let canvas = self.config.model.canvas;
        batch_loss(&out, &supervision, (canvas, canvas), &self.config.objective)
    }

    fn nonfinite(&self, samples: &[Sample], items: &[&TrainItem]) -> Error {
        Error::NonFiniteLoss {
            step: self.step + 1,
            batch_ids: items
                .iter()
                .map(|it| format!("{}:{}", samples[it.sample].record.id, it.concept))
                .collect(),
        }
    }

    /// One optimizer step on a batch; returns the pre-update loss.
    pub fn train_step(&mut self, samples: &[Sample], items: &[&TrainItem]) -> Result<LossBreakdown> {
        let t = self.step + 1;
        let (loss, breakdown) = self.batch_loss(samples, items)?;
        if !breakdown.is_finite() {
            return Err(self.nonfinite(samples, items));
        }
        let grads = loss.backward()?;
        let params = self.model.params();
        let vars: Vec<_> = params.iter().map(|p| &p.var).collect();
        let g: Vec<Option<Tensor>> = params.iter().map(|p| grads.get(p.var.as_tensor()).cloned()).collect();
        let rates = params
            .iter()
            .map(|p| self.config.rates.effective_rate(p.group, p.layer, t))
            .collect::<Result<Vec<_>>>()?;
        self.optimizer.step(&vars, &g, &rates)?;
        self.step = t;
        Ok(breakdown)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = CheckpointMeta::new(self.config.model, self.step, self.config.seed);
        meta.best_val_dice = self.best_val_dice;
        checkpoint::save(path, &self.model, Some(&self.optimizer), &meta)
    }
}

/// Mean Dice/IoU of `samples` under the evaluation protocol.
pub fn validate(model: &ToyModel, samples: &[Sample], dict: &ConceptDictionary) -> Result<(f64, f64)> {
    let mut records: Vec<EvalRecord> = Vec::new();
    for s in samples {
        records.extend(evaluate_sample(model, &s.record, &s.image, &s.labels, dict, SplitKind::Internal)?);
    }
    if records.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = records.len() as f64;
    Ok((
        records.iter().map(|r| r.dice).sum::<f64>() / n,
        records.iter().map(|r| r.iou).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub last_loss: Option<LossBreakdown>,
    pub best_val_dice: Option<f64>,
    pub output_dir: PathBuf,
}

/// Prepared data of a run: training and validation samples plus the
/// dictionary.
pub struct RunData {
    pub dict: ConceptDictionary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    if cfg.manifest.as_os_str().is_empty() {
        return Err(Error::Config("no manifest configured".into()));
    }
    let records = crate::corpus::load_manifest(&cfg.manifest)?;
    let dir = cfg.split_directory();
    let dict_path = dir.join("concepts.tsv");
    let dict_text = fs::read_to_string(&dict_path).map_err(|e| Error::file(&dict_path, e))?;
    let dict = ConceptDictionary::from_tsv(&dict_text)?;
    let train_ids = read_id_list(&dir.join("train.txt"))?;
    let val_ids = read_id_list(&dir.join("val.txt"))?;
    let canvas = cfg.model.canvas;
    Ok(RunData {
        train: load_samples(&records, &train_ids, &dict, canvas)?,
        val: load_samples(&records, &val_ids, &dict, canvas)?,
        dict,
    })
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    Ok(BufWriter::new(file))
}

/// Trains per `cfg`, writing into `cfg.output_dir`:
/// `loss_log.jsonl` (one line per step), `val_log.jsonl`, `config.toml`,
/// `last.safetensors` and `best.safetensors`.
pub fn run(cfg: &RunConfig, data: &RunData) -> Result<TrainSummary> {
    let out_dir = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::file(&out_dir, e))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let resumed = trainer.step() > 0;
    fs::write(out_dir.join("config.toml"), cfg.render()).map_err(|e| Error::file(&out_dir, e))?;

    let items = build_items(&data.train, &data.dict);
    if items.is_empty() {
        return Err(Error::Validation("training split has no prompted items".into()));
    }
    let batch = cfg.batch_size;
    let per_epoch = items.len().div_ceil(batch);
    let total = if cfg.max_steps > 0 { cfg.max_steps } else { cfg.max_epochs * per_epoch };

    let mut loss_log = open_log(&out_dir.join("loss_log.jsonl"), resumed)?;
    let mut val_log = open_log(&out_dir.join("val_log.jsonl"), resumed)?;
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    let mut last = None;
    let started = Instant::now();

    while trainer.step() < total {
        let t = trainer.step() + 1;
        let epoch = (t - 1) / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(items.len(), cfg.seed, epoch);
            order_epoch = epoch;
        }
        let k = (t - 1) % per_epoch;
        let chosen: Vec<&TrainItem> = order[k * batch..((k + 1) * batch).min(items.len())]
            .iter()
            .map(|&i| &items[i])
            .collect();
        let breakdown = match trainer.train_step(&data.train, &chosen) {
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let _ = fs::write(out_dir.join("nonfinite_batch.txt"), format!("{e}\n"));
                return Err(e);
            }
            other => other?,
        };
        let line = StepLog {
            step: t,
            epoch,
            loss: &breakdown,
            lr: trainer.group_rates(t)?,
        };
        serde_json::to_writer(&mut loss_log, &line)?;
        loss_log.write_all(b"\n")?;
        if t % 50 == 0 || t == 1 {
            log::info!(
                "step {t}/{total} loss {:.4} ({:.1}s)",
                breakdown.total,
                started.elapsed().as_secs_f64()
            );
        }
        last = Some(breakdown);

        let finished = t == total;
        if (t % cfg.eval_every == 0 || finished) && !data.val.is_empty() {
            let (dice, iou) = validate(&trainer.model, &data.val, &data.dict)?;
            let best = trainer.best_val_dice.map_or(true, |b| dice > b);
            if best {
                trainer.best_val_dice = Some(dice);
                trainer.save(&out_dir.join("best.safetensors"))?;
            }
            serde_json::to_writer(&mut val_log, &ValLog { step: t, val_dice: dice, val_iou: iou, best })?;
            val_log.write_all(b"\n")?;
            val_log.flush()?;
            log::info!("step {t}: validation dice {dice:.4} iou {iou:.4}");
        }
        if t % cfg.checkpoint_every == 0 || finished {
            loss_log.flush()?;
            trainer.save(&out_dir.join("last.safetensors"))?;
        }
    }
    loss_log.flush()?;
    Ok(TrainSummary {
        steps: trainer.step(),
        last_loss: last,
        best_val_dice: trainer.best_val_dice(),
        output_dir: out_dir,
    })
}

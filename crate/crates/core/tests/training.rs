use std::fs;
use std::path::{Path, PathBuf};

use promptseg::config::RunConfig;
use promptseg::corpus::{Raster, SplitSpec};
use promptseg::geometry::{Grid, NormBox};
use promptseg::inference::{aggregate, Segmenter, SplitKind};
use promptseg::model::checkpoint;
use promptseg::model::QueryPrediction;
use promptseg::synthetic::{self, write_corpus, SyntheticSpec};
use promptseg::{pipeline, train, Error};
use serde_json::Value;

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
}

fn corpus(images: usize, size: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    write_corpus(&data, &SyntheticSpec { images, size, seed: 21 }).unwrap();
    let manifest = data.join("manifest.jsonl");
    pipeline::prepare(&manifest, &SplitSpec::default(), &data).unwrap();
    Corpus {
        _dir: dir,
        root,
        manifest,
    }
}

fn small_config(c: &Corpus, out: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.manifest = c.manifest.clone();
    cfg.output_dir = c.root.join(out);
    for (k, v) in [
        ("canvas", "32"),
        ("n_q", "4"),
        ("embed_dim", "8"),
        ("text_dim", "8"),
        ("stem_dim", "4"),
        ("mask_dim", "4"),
        ("heads", "2"),
        ("batch_size", "4"),
        ("eval_every", "2"),
        ("checkpoint_every", "3"),
        ("warmup_steps", "4"),
        ("lr_decoder_seg_dot", "0.003"),
        ("lr_vision_backbone", "0.001"),
        ("lr_language_backbone", "0.001"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.sync();
    cfg
}

fn loss_log(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("loss_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn resumed_run_continues_the_uninterrupted_one() {
    let c = corpus(8, 32);
    let mut straight = small_config(&c, "straight");
    straight.max_steps = 6;
    let data = train::load_run_data(&straight).unwrap();
    train::run(&straight, &data).unwrap();

    let mut first = small_config(&c, "split");
    first.max_steps = 3;
    train::run(&first, &data).unwrap();
    let mut second = first.clone();
    second.max_steps = 6;
    second.resume = first.output_dir.join("last.safetensors");
    let summary = train::run(&second, &data).unwrap();
    assert_eq!(summary.steps, 6);

    let a = loss_log(&straight.output_dir);
    let b = loss_log(&second.output_dir);
    assert_eq!(a.len(), 6);
    assert_eq!(b.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["step"], y["step"]);
        let (lx, ly) = (x["total"].as_f64().unwrap(), y["total"].as_f64().unwrap());
        assert!((lx - ly).abs() <= 1e-4 * lx.abs().max(1.0), "step {}: {lx} vs {ly}", x["step"]);
    }
}

#[test]
fn step_one_rate_is_base_over_warmup() {
    let c = corpus(6, 32);
    let mut cfg = small_config(&c, "warm");
    for key in ["lr_decoder_seg_dot", "lr_vision_backbone", "lr_language_backbone", "warmup_steps"] {
        let default = RunConfig::default().render();
        let line = default.lines().find(|l| l.starts_with(&format!("{key} = "))).unwrap();
        cfg.set(key, line.split(" = ").nth(1).unwrap()).unwrap();
    }
    cfg.max_steps = 1;
    let data = train::load_run_data(&cfg).unwrap();
    train::run(&cfg, &data).unwrap();
    let log = loss_log(&cfg.output_dir);
    let lr = &log[0]["lr"];
    let close = |v: &Value, want: f64| (v.as_f64().unwrap() - want).abs() <= 1e-15;
    assert!(close(&lr["decoder_seg_dot"], 3e-4 / 1000.0));
    assert!(close(&lr["vision_backbone"], 5e-5 / 1000.0));
    assert!(close(&lr["language_backbone"], 5e-5 / 1000.0));
    assert!(close(&lr["geometry_prompt"], 1e-4 / 1000.0));
    for key in ["ce", "pres", "l1", "giou", "find_o2o", "find_o2m", "seg_focal", "dice", "seg_pres", "total", "matched_count"] {
        assert!(log[0].get(key).is_some(), "loss log lacks {key}");
    }
}

#[test]
fn diverging_run_aborts_with_batch_ids() {
    let c = corpus(6, 32);
    let mut cfg = small_config(&c, "boom");
    for key in ["lr_decoder_seg_dot", "lr_vision_backbone", "lr_language_backbone"] {
        cfg.set(key, "1e30").unwrap();
    }
    cfg.set("warmup_steps", "1").unwrap();
    cfg.max_steps = 10;
    let data = train::load_run_data(&cfg).unwrap();
    match train::run(&cfg, &data) {
        Err(Error::NonFiniteLoss { step, batch_ids }) => {
            assert!(step > 1);
            assert_eq!(batch_ids.len(), 4);
            assert!(batch_ids.iter().all(|id| id.starts_with("syn-")));
            let dump = fs::read_to_string(cfg.output_dir.join("nonfinite_batch.txt")).unwrap();
            assert!(dump.contains(&batch_ids[0]));
        }
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn trained_model_responds_to_the_concept() {
    let c = corpus(8, 32);
    let mut cfg = small_config(&c, "concept");
    cfg.max_steps = 4;
    let data = train::load_run_data(&cfg).unwrap();
    train::run(&cfg, &data).unwrap();
    let model = checkpoint::load_model(&cfg.output_dir.join("last.safetensors")).unwrap();
    let image = &data.train[0].triplet.image;
    let rows = model
        .predict(image, &["polyp".to_string(), "nodule".to_string()])
        .unwrap();
    let logits = |i: usize| rows[i].iter().map(|q| q.class_logit).collect::<Vec<_>>();
    assert_ne!(logits(0), logits(1));
}

/// Reads the synthetic shapes straight off the pixel colors.
struct ColorOracle {
    canvas: usize,
}

impl Segmenter for ColorOracle {
    fn canvas(&self) -> usize {
        self.canvas
    }

    fn predict(&self, image: &Raster, concepts: &[String]) -> promptseg::Result<Vec<Vec<QueryPrediction>>> {
        let names = synthetic::concepts();
        Ok(concepts
            .iter()
            .map(|concept| {
                let channel = names.iter().position(|n| n == concept).expect("synthetic concept");
                let logits = Grid::from_fn(image.height(), image.width(), |r, c| {
                    if image.pixel(r, c)[channel] > 0.6 {
                        20.0
                    } else {
                        -20.0
                    }
                });
                vec![QueryPrediction {
                    class_logit: 5.0,
                    presence_logit: 5.0,
                    bbox: NormBox::new(0.5, 0.5, 0.5, 0.5),
                    mask_logits: logits,
                }]
            })
            .collect())
    }
}

/// Predicts nothing anywhere.
struct Background {
    canvas: usize,
}

impl Segmenter for Background {
    fn canvas(&self) -> usize {
        self.canvas
    }

    fn predict(&self, _image: &Raster, concepts: &[String]) -> promptseg::Result<Vec<Vec<QueryPrediction>>> {
        Ok(concepts
            .iter()
            .map(|_| {
                vec![QueryPrediction {
                    class_logit: 0.0,
                    presence_logit: 0.0,
                    bbox: NormBox::new(0.5, 0.5, 0.5, 0.5),
                    mask_logits: Grid::filled(4, 4, -10.0),
                }]
            })
            .collect())
    }
}

#[test]
fn oracle_and_background_bound_the_report() {
    let c = corpus(10, 48);
    let data_dir = c.manifest.parent().unwrap();
    let records = pipeline::evaluate(&ColorOracle { canvas: 48 }, &c.manifest, data_dir, "all", SplitKind::Internal).unwrap();
    assert_eq!(records.len(), 30);
    let out = c.root.join("oracle");
    pipeline::write_eval_outputs(&out, &records).unwrap();
    let summary = aggregate(&records).unwrap();
    assert_eq!(summary.datasets[0].dice, 100.0);
    assert_eq!(summary.datasets[0].iou, 100.0);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("100.0"));

    let records = pipeline::evaluate(&Background { canvas: 64 }, &c.manifest, data_dir, "val", SplitKind::External).unwrap();
    assert!(!records.is_empty());
    let summary = aggregate(&records).unwrap();
    assert_eq!(summary.datasets[0].dice, 0.0);
    assert_eq!(summary.datasets[0].iou, 0.0);
    assert_eq!(summary.datasets[0].kind, SplitKind::External);
}

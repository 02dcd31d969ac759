use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use promptseg::corpus::{InstanceTarget, Raster};
use promptseg::geometry::{box_from_mask, Grid};
use promptseg::matching::{MatcherWeights, O2MConfig};
use promptseg::model::{embed_concept, ModelConfig, ParamGroup, ToyModel};
use promptseg::objective::graph::{batch_loss, ImageTargets};
use promptseg::objective::ObjectiveWeights;
use promptseg::rng::Stream;
use promptseg::synthetic;
use promptseg::train::supervise;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_q: 4,
        embed_dim: 8,
        text_dim: 6,
        stem_dim: 4,
        mask_dim: 4,
        heads: 2,
        canvas: 32,
        ..ModelConfig::toy()
    }
}

/// Two synthetic images at the tiny canvas, each prompted with one of its
/// concepts.
fn batch(model: &ToyModel) -> (Tensor, Tensor, Vec<Vec<InstanceTarget>>) {
    let side = model.config().canvas;
    let names = synthetic::concepts();
    let mut images = Vec::new();
    let mut targets = Vec::new();
    let mut embeddings = Vec::new();
    for (i, seed) in [3u64, 8].into_iter().enumerate() {
        let (image, labels): (Raster, Grid<u8>) = synthetic::render(side, seed);
        let label = i as u8 + 1;
        let mask = labels.map(|&l| l == label);
        targets.push(vec![InstanceTarget {
            concept: names[i].to_string(),
            bbox: box_from_mask(&mask).unwrap(),
            mask,
        }]);
        images.push(image);
        embeddings.push(embed_concept(names[i], model.config().text_dim).unwrap());
    }
    let image_t = model.image_batch(&images.iter().collect::<Vec<_>>()).unwrap();
    let text_t = model.text_batch(&embeddings.iter().collect::<Vec<_>>()).unwrap();
    (image_t, text_t, targets)
}

fn weights(n_q: usize) -> ObjectiveWeights {
    let mut w = ObjectiveWeights::default();
    w.find.n_q = n_q;
    w
}

fn loss(model: &ToyModel, images: &Tensor, text: &Tensor, sup: &[ImageTargets]) -> Tensor {
    let side = model.config().canvas;
    let out = model.forward(images, text).unwrap();
    batch_loss(&out, sup, (side, side), &weights(model.config().n_q)).unwrap().0
}

#[test]
fn golden_concept_embeddings() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_embeddings.json");
    let golden: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let dim = golden["dim"].as_u64().unwrap() as usize;
    let vectors: BTreeMap<String, Vec<f64>> = serde_json::from_value(golden["vectors"].clone()).unwrap();
    for (concept, expected) in &vectors {
        let got = embed_concept(concept, dim).unwrap().vector;
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() <= 1e-12, "{concept}: {g} vs {e}");
        }
        let norm = got.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }
    assert_ne!(vectors["polyp"], vectors["lung"]);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let model = ToyModel::new(tiny(), 5, DType::F64, &Device::Cpu).unwrap();
    let (images, text, targets) = batch(&model);
    let out = model.forward(&images, &text).unwrap();
    // The assignment is held fixed: matching is piecewise constant.
    let sup = supervise(&out, targets, &MatcherWeights::default(), &O2MConfig::default()).unwrap();
    let grads = loss(&model, &images, &text, &sup).backward().unwrap();

    let candidates: Vec<_> = model
        .params()
        .iter()
        .filter(|p| p.group != ParamGroup::GeometryPrompt)
        .collect();
    let mut s = Stream::new(17);
    let h = 1e-5;
    for _ in 0..10 {
        let p = candidates[s.below(candidates.len())];
        let shape = p.var.dims().to_vec();
        let base: Vec<f64> = p.var.flatten_all().unwrap().to_vec1().unwrap();
        let k = s.below(base.len());
        let analytic: Vec<f64> = grads.get(p.var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            p.var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            loss(&model, &images, &text, &sup).to_scalar::<f64>().unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        eval(0.0);
        let g = analytic[k];
        // Floor at the round-off of a difference quotient on a loss of this size.
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-4);
        assert!(rel < 1e-3, "{}[{k}]: backprop {g:e} vs finite difference {numeric:e} (rel {rel:e})", p.name);
    }
}

#[test]
fn every_trained_group_receives_gradient() {
    let model = ToyModel::new(tiny(), 9, DType::F32, &Device::Cpu).unwrap();
    let (images, text, targets) = batch(&model);
    let out = model.forward(&images, &text).unwrap();
    let sup = supervise(&out, targets, &MatcherWeights::default(), &O2MConfig::default()).unwrap();
    let grads = loss(&model, &images, &text, &sup).backward().unwrap();
    for (group, params) in model.parameter_groups() {
        let mut total = 0.0f64;
        for p in &params {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                let v: Vec<f32> = g.flatten_all().unwrap().to_vec1().unwrap();
                assert!(v.iter().all(|x| x.is_finite()), "{} has a non-finite gradient", p.name);
                total += v.iter().map(|x| x.abs() as f64).sum::<f64>();
            }
        }
        if group == ParamGroup::GeometryPrompt {
            assert_eq!(total, 0.0, "text-only training must not touch the geometry encoder");
        } else {
            assert!(total > 0.0, "{} received no gradient", group.name());
        }
    }
    let layers = model.vision_layers();
    assert_eq!(layers, (1..=12).collect::<Vec<_>>());
}

#[test]
fn output_shapes_follow_the_config() {
    let model = ToyModel::new(tiny(), 2, DType::F32, &Device::Cpu).unwrap();
    let (images, text, _) = batch(&model);
    let preds = model.forward(&images, &text).unwrap().to_predictions().unwrap();
    assert_eq!(preds.len(), 2);
    for row in &preds {
        assert_eq!(row.len(), 4);
        for q in row {
            assert_eq!(q.mask_logits.dims(), (16, 16));
            assert!(q.bbox.to_array().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
    assert!(ModelConfig::toy().validate().is_ok());
    assert!(model.param_count() < 2_000_000);
    let toy = ToyModel::new(ModelConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
    assert!(toy.param_count() < 2_000_000);
}

//! Differentiable versions of the objective, built from candle tensor ops
//! so gradients flow back into the model.

use candle_core::{DType, Device, Tensor, D};

use super::{FindTerms, LossBreakdown, ObjectiveWeights, SegTerms, PROB_EPS};
use crate::corpus::InstanceTarget;
use crate::geometry::bilinear_weights;
use crate::matching::{Assignment, MultiAssignment};
use crate::model::ModelOutput;
use crate::{Error, Result};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Elementwise focal BCE; `y` holds 0/1 labels with the shape of `p`.
pub fn focal_bce(p: &Tensor, y: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let p = clamp_prob(p)?;
    let q = p.affine(-1.0, 1.0)?;
    let pos = (q.powf(gamma)? * p.log()?)?.affine(-alpha, 0.0)?;
    let neg = (p.powf(gamma)? * q.log()?)?.affine(-(1.0 - alpha), 0.0)?;
    Ok((&neg + y.mul(&(pos - &neg)?)?)?)
}

/// Elementwise BCE with the positive term scaled by `pos_weight`.
pub fn presence_loss(p: &Tensor, y: &Tensor, pos_weight: f64) -> Result<Tensor> {
    let p = clamp_prob(p)?;
    let pos = p.log()?.affine(-pos_weight, 0.0)?;
    let neg = p.affine(-1.0, 1.0)?.log()?.neg()?;
    Ok((&neg + y.mul(&(pos - &neg)?)?)?)
}

/// Row-wise smooth Dice loss of `(K, P)` probabilities against `(K, P)` targets.
pub fn dice_loss(probs: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    if probs.dims() != gt.dims() {
        return Err(Error::Validation(format!(
            "dice shape mismatch: {:?} vs {:?}",
            probs.dims(),
            gt.dims()
        )));
    }
    let inter = (probs * gt)?.sum(D::Minus1)?;
    let denom = (probs.sum(D::Minus1)? + gt.sum(D::Minus1)?)?.affine(1.0, eps)?;
    Ok(inter.affine(2.0, eps)?.div(&denom)?.affine(-1.0, 1.0)?)
}

/// Row-wise L1 distance between `(K, 4)` center-size boxes.
pub fn l1_box(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.sum(D::Minus1)?)
}

fn corners(boxes: &Tensor) -> Result<[Tensor; 4]> {
    let col = |i: usize| boxes.narrow(1, i, 1);
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let half_w = w.affine(0.5, 0.0)?;
    let half_h = h.affine(0.5, 0.0)?;
    let clamp = |t: Tensor| t.clamp(0.0, 1.0);
    Ok([
        clamp((&cx - &half_w)?)?,
        clamp((&cy - &half_h)?)?,
        clamp((&cx + &half_w)?)?,
        clamp((&cy + &half_h)?)?,
    ])
}

/// Row-wise generalized IoU of `(K, 4)` center-size boxes, with corners
/// clamped to the unit square.
pub fn giou(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let area = |x0: &Tensor, y0: &Tensor, x1: &Tensor, y1: &Tensor| -> candle_core::Result<Tensor> {
        (x1 - x0)?.relu()? * (y1 - y0)?.relu()?
    };
    let inter = area(&ax0.maximum(&bx0)?, &ay0.maximum(&by0)?, &ax1.minimum(&bx1)?, &ay1.minimum(&by1)?)?;
    let union = ((area(&ax0, &ay0, &ax1, &ay1)? + area(&bx0, &by0, &bx1, &by1)?)? - &inter)?;
    let hull = area(&ax0.minimum(&bx0)?, &ay0.minimum(&by0)?, &ax1.maximum(&bx1)?, &ay1.maximum(&by1)?)?;
    let iou = inter.div(&union)?;
    let penalty = (&hull - &union)?.div(&hull)?;
    Ok((iou - penalty)?.squeeze(1)?)
}

/// Bilinear resize of `(K, h, w)` maps to `(K, height, width)` as two
/// matrix products, so the result stays differentiable.
pub fn resize_bilinear(maps: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, h, w) = maps.dims3()?;
    if (h, w) == (height, width) {
        return Ok(maps.clone());
    }
    let (dtype, device) = (maps.dtype(), maps.device());
    let wy = Tensor::from_vec(bilinear_weights(h, height), (height, h), device)?.to_dtype(dtype)?;
    let wx = Tensor::from_vec(bilinear_weights(w, width), (width, w), device)?.to_dtype(dtype)?;
    let cols = maps.broadcast_matmul(&wx.t()?)?; // (K, h, width)
    Ok(wy.broadcast_matmul(&cols)?) // (K, height, width)
}

/// Supervision for one prompted image in a batch.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    pub targets: Vec<InstanceTarget>,
    pub o2o: Assignment,
    pub o2m: MultiAssignment,
    pub prompt_present: bool,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn labels(n: usize, positives: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut y = vec![0f64; n];
    for &i in positives {
        y[i] = 1.0;
    }
    Ok(Tensor::from_vec(y, n, device)?.to_dtype(dtype)?)
}

struct FindGraph {
    total: Tensor,
    terms: FindTerms,
}

fn find_graph(
    out: &ModelOutput,
    items: &[ImageTargets],
    pairs_of: impl Fn(&ImageTargets) -> &[(usize, usize)],
    norm: f64,
    w: &ObjectiveWeights,
) -> Result<FindGraph> {
    let (b, n_q) = out.class_logits.dims2()?;
    let (dtype, device) = (out.class_logits.dtype(), out.class_logits.device().clone());
    let f = &w.find;

    let mut flat_pos = Vec::new();
    let mut pred_idx = Vec::new();
    let mut tgt_boxes = Vec::new();
    for (i, item) in items.iter().enumerate() {
        for &(q, t) in pairs_of(item) {
            if q >= n_q || t >= item.targets.len() {
                return Err(Error::Validation(format!("assignment pair ({q}, {t}) out of range")));
            }
            flat_pos.push(i * n_q + q);
            pred_idx.push((i * n_q + q) as u32);
            tgt_boxes.extend_from_slice(&item.targets[t].bbox.to_array());
        }
    }

    let y = labels(b * n_q, &flat_pos, dtype, &device)?;
    let p_cls = sigmoid(&out.class_logits.flatten_all()?)?;
    let p_pres = sigmoid(&out.presence_logits.flatten_all()?)?;
    let ce = focal_bce(&p_cls, &y, f.alpha_cls, f.gamma_cls)?
        .sum_all()?
        .affine(f.lambda_ce / norm, 0.0)?;
    let pres = presence_loss(&p_pres, &y, f.pos_weight)?
        .sum_all()?
        .affine(f.lambda_pr / norm, 0.0)?;

    let mut total = (&ce + &pres)?;
    let mut terms = FindTerms {
        ce: scalar(&ce)?,
        pres: scalar(&pres)?,
        ..FindTerms::default()
    };
    if !pred_idx.is_empty() {
        let k = pred_idx.len();
        let idx = Tensor::from_vec(pred_idx, k, &device)?;
        let pred = out.boxes.reshape((b * n_q, 4))?.index_select(&idx, 0)?;
        let tgt = Tensor::from_vec(tgt_boxes, (k, 4), &device)?.to_dtype(dtype)?;
        let l1 = l1_box(&pred, &tgt)?.sum_all()?.affine(f.lambda_l1 / norm, 0.0)?;
        let gi = giou(&pred, &tgt)?
            .affine(-1.0, 1.0)?
            .sum_all()?
            .affine(f.lambda_g / norm, 0.0)?;
        terms.l1 = scalar(&l1)?;
        terms.giou = scalar(&gi)?;
        total = ((total + l1)? + gi)?;
    }
    Ok(FindGraph { total, terms })
}

/// Builds the full training loss of a batch. Returns the differentiable
/// total and its per-component values.
pub fn batch_loss(
    out: &ModelOutput,
    items: &[ImageTargets],
    canvas: (usize, usize),
    w: &ObjectiveWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let (b, n_q) = out.class_logits.dims2()?;
    if items.len() != b {
        return Err(Error::Validation(format!(
            "batch has {b} predictions but {} target sets",
            items.len()
        )));
    }
    if n_q > w.find.n_q {
        return Err(Error::Validation(format!(
            "{n_q} queries exceed the padded query count {}",
            w.find.n_q
        )));
    }
    let (dtype, device) = (out.class_logits.dtype(), out.class_logits.device().clone());
    let matched: usize = items.iter().map(|i| i.o2o.pairs.len()).sum();
    let norm = matched.max(1) as f64;

    let o2o = find_graph(out, items, |i| &i.o2o.pairs, norm, w)?;
    let o2m = find_graph(out, items, |i| &i.o2m.pairs, norm, w)?;

    // Segmentation over one-to-one matched masks.
    let s = &w.seg;
    let (height, width) = canvas;
    let mut seg_terms = SegTerms::default();
    let mut seg_total: Option<Tensor> = None;
    let mut idx = Vec::new();
    let mut gt = Vec::new();
    for (i, item) in items.iter().enumerate() {
        for &(q, t) in &item.o2o.pairs {
            let mask = &item.targets[t].mask;
            if mask.dims() != canvas {
                return Err(Error::Validation(format!(
                    "target mask {:?} does not match canvas {canvas:?}",
                    mask.dims()
                )));
            }
            idx.push((i * n_q + q) as u32);
            gt.extend(mask.as_slice().iter().map(|&v| if v { 1f32 } else { 0f32 }));
        }
    }
    if !idx.is_empty() {
        let k = idx.len();
        let (_, _, mh, mw) = out.mask_logits.dims4()?;
        let idx = Tensor::from_vec(idx, k, &device)?;
        let logits = out.mask_logits.reshape((b * n_q, mh, mw))?.index_select(&idx, 0)?;
        let logits = resize_bilinear(&logits, height, width)?.reshape((k, height * width))?;
        let probs = sigmoid(&logits)?;
        let gt = Tensor::from_vec(gt, (k, height * width), &device)?.to_dtype(dtype)?;
        let focal = focal_bce(&probs, &gt, s.alpha_seg, s.gamma_seg)?
            .mean(D::Minus1)?
            .sum_all()?
            .affine(s.lambda_f / norm, 0.0)?;
        let dice = dice_loss(&probs, &gt, s.dice_eps)?
            .sum_all()?
            .affine(s.lambda_d / norm, 0.0)?;
        seg_terms.focal = scalar(&focal)?;
        seg_terms.dice = scalar(&dice)?;
        seg_total = Some((focal + dice)?);
    }
    let present: Vec<usize> = (0..b).filter(|&i| items[i].prompt_present).collect();
    let y = labels(b, &present, dtype, &device)?;
    let p = sigmoid(&out.global_presence_logits)?;
    let seg_pres = presence_loss(&p, &y, 1.0)?.mean_all()?.affine(s.lambda_sp, 0.0)?;
    seg_terms.presence = scalar(&seg_pres)?;
    let seg_total = match seg_total {
        Some(t) => (t + seg_pres)?,
        None => seg_pres,
    };

    let total = ((o2o.total + o2m.total.affine(w.lambda_o2m, 0.0)?)? + seg_total)?;
    let breakdown = LossBreakdown::compose(o2o.terms, o2m.terms, seg_terms, w.lambda_o2m, matched);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::Var;

    fn t64(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn elementwise_losses_match_scalar_versions() {
        let ps = [0.05, 0.3, 0.5, 0.77, 0.999];
        for y in [0.0, 1.0] {
            let yt = t64(&[y; 5]);
            let focal = vals(&focal_bce(&t64(&ps), &yt, 0.25, 2.0).unwrap());
            let pres = vals(&presence_loss(&t64(&ps), &yt, 10.0).unwrap());
            for (i, &p) in ps.iter().enumerate() {
                assert_abs_diff_eq!(focal[i], super::super::focal_bce(p, y == 1.0, 0.25, 2.0), epsilon = 1e-12);
                assert_abs_diff_eq!(pres[i], super::super::presence_loss(p, y == 1.0, 10.0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn giou_matches_geometry() {
        use crate::geometry::{box_giou, NormBox};
        let a = NormBox::new(0.3, 0.4, 0.2, 0.3);
        let b = NormBox::new(0.35, 0.5, 0.3, 0.1);
        let ta = Tensor::from_vec(a.to_array().to_vec(), (1, 4), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b.to_array().to_vec(), (1, 4), &Device::Cpu).unwrap();
        assert_abs_diff_eq!(vals(&giou(&ta, &tb).unwrap())[0], box_giou(&a, &b), epsilon = 1e-12);
    }

    #[test]
    fn resize_matches_scalar_route() {
        use crate::geometry::{resize_bilinear as scalar_resize, Grid};
        let src = Grid::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1 - 0.3);
        let t = Tensor::from_vec(src.as_slice().to_vec(), (1, 3, 4), &Device::Cpu).unwrap();
        let up = resize_bilinear(&t, 7, 9).unwrap().flatten_all().unwrap();
        let expected = scalar_resize(&src, 7, 9);
        for (a, b) in vals(&up).iter().zip(expected.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn dice_gradient_flows() {
        let v = Var::from_tensor(&Tensor::from_vec(vec![0.2f64, 0.7, 0.1, 0.9], (1, 4), &Device::Cpu).unwrap()).unwrap();
        let gt = Tensor::from_vec(vec![0f64, 1.0, 0.0, 1.0], (1, 4), &Device::Cpu).unwrap();
        let loss = dice_loss(v.as_tensor(), &gt, 1.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = vals(&grads.get(v.as_tensor()).unwrap().flatten_all().unwrap());
        // Raising a foreground probability lowers the loss; raising background raises it.
        assert!(g[1] < 0.0 && g[3] < 0.0);
        assert!(g[0] > 0.0 && g[2] > 0.0);
    }
}

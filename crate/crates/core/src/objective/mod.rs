//! The set-prediction training objective.
//!
//! `total = find(o2o) + lambda_o2m * find(o2m) + seg`, where the find loss
//! supervises classification, query presence and boxes, and the
//! segmentation loss supervises the masks of one-to-one matched queries plus
//! an image-level prompt-presence score. Everything here works on plain
//! `f64` values; [`graph`] builds the same quantities as differentiable
//! tensors for training.

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::corpus::InstanceTarget;
use crate::geometry::{box_giou, l1_box, resize_bilinear, BinaryMask, ScoreMap};
use crate::model::QueryPrediction;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal binary cross-entropy of probability `p` against label `y`.
pub fn focal_bce(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Binary cross-entropy with the positive term scaled by `pos_weight`.
pub fn presence_loss(p: f64, y: bool, pos_weight: f64) -> f64 {
    let p = clamp_prob(p);
    if y {
        -pos_weight * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn bce(p: f64, y: bool) -> f64 {
    presence_loss(p, y, 1.0)
}

/// Smooth Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(probs: &ScoreMap, gt: &BinaryMask, eps: f64) -> Result<f64> {
    probs.same_shape(gt)?;
    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.as_slice().iter().zip(gt.as_slice()) {
        let g = if g { 1.0 } else { 0.0 };
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sum_p + sum_g + eps))
}

pub fn total_loss(find_o2o: f64, find_o2m: f64, seg: f64, lambda_o2m: f64) -> f64 {
    find_o2o + lambda_o2m * find_o2m + seg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FindWeights {
    pub lambda_ce: f64,
    pub lambda_pr: f64,
    pub alpha_cls: f64,
    pub gamma_cls: f64,
    pub pos_weight: f64,
    pub lambda_l1: f64,
    pub lambda_g: f64,
    /// Padded query count.
    pub n_q: usize,
}

impl Default for FindWeights {
    fn default() -> Self {
        FindWeights {
            lambda_ce: 20.0,
            lambda_pr: 20.0,
            alpha_cls: 0.25,
            gamma_cls: 2.0,
            pos_weight: 10.0,
            lambda_l1: 5.0,
            lambda_g: 2.0,
            n_q: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegWeights {
    pub alpha_seg: f64,
    pub gamma_seg: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub lambda_sp: f64,
    pub dice_eps: f64,
}

impl Default for SegWeights {
    fn default() -> Self {
        SegWeights {
            alpha_seg: 0.6,
            gamma_seg: 2.0,
            lambda_f: 20.0,
            lambda_d: 30.0,
            lambda_sp: 1.0,
            dice_eps: 1.0,
        }
    }
}

/// All loss weights, including the one-to-many branch weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub find: FindWeights,
    pub seg: SegWeights,
    pub lambda_o2m: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            find: FindWeights::default(),
            seg: SegWeights::default(),
            lambda_o2m: 2.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let f = &self.find;
        let s = &self.seg;
        let all = [
            f.lambda_ce, f.lambda_pr, f.alpha_cls, f.gamma_cls, f.pos_weight, f.lambda_l1,
            f.lambda_g, s.alpha_seg, s.gamma_seg, s.lambda_f, s.lambda_d, s.lambda_sp,
            s.dice_eps, self.lambda_o2m,
        ];
        if all.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if f.n_q == 0 {
            return Err(Error::Config("n_q must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weighted, normalized find-loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FindTerms {
    pub ce: f64,
    pub pres: f64,
    pub l1: f64,
    pub giou: f64,
}

impl FindTerms {
    pub fn total(&self) -> f64 {
        self.ce + self.pres + self.l1 + self.giou
    }
}

/// Weighted, normalized segmentation-loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegTerms {
    pub focal: f64,
    pub dice: f64,
    pub presence: f64,
}

impl SegTerms {
    pub fn total(&self) -> f64 {
        self.focal + self.dice + self.presence
    }
}

/// Per-component values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pres: f64,
    pub l1: f64,
    pub giou: f64,
    pub find_o2o: f64,
    pub find_o2m: f64,
    pub seg_focal: f64,
    pub dice: f64,
    pub seg_pres: f64,
    pub total: f64,
    pub matched_count: usize,
}

impl LossBreakdown {
    pub fn compose(
        o2o: FindTerms,
        o2m: FindTerms,
        seg: SegTerms,
        lambda_o2m: f64,
        matched_count: usize,
    ) -> Self {
        LossBreakdown {
            ce: o2o.ce,
            pres: o2o.pres,
            l1: o2o.l1,
            giou: o2o.giou,
            find_o2o: o2o.total(),
            find_o2m: o2m.total(),
            seg_focal: seg.focal,
            dice: seg.dice,
            seg_pres: seg.presence,
            total: total_loss(o2o.total(), o2m.total(), seg.total(), lambda_o2m),
            matched_count: matched_count.max(1),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ce, self.pres, self.l1, self.giou, self.find_o2o, self.find_o2m,
            self.seg_focal, self.dice, self.seg_pres, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_pairs(pairs: &[(usize, usize)], queries: usize, targets: usize) -> Result<()> {
    for &(q, t) in pairs {
        if q >= queries || t >= targets {
            return Err(Error::Validation(format!(
                "assignment pair ({q}, {t}) out of range for {queries} queries and {targets} targets"
            )));
        }
    }
    Ok(())
}

/// Find loss of one image. `positives` are the `(query, target)` pairs
/// treated as positives; every other query is a negative. Queries beyond
/// `preds.len()` up to `w.n_q` are padding with vanishing probability and
/// contribute nothing. The sum is divided by `matched_count` (clamped to 1).
pub fn find_loss(
    preds: &[QueryPrediction],
    targets: &[InstanceTarget],
    positives: &[(usize, usize)],
    matched_count: usize,
    w: &FindWeights,
) -> Result<FindTerms> {
    check_pairs(positives, preds.len(), targets.len())?;
    if preds.len() > w.n_q {
        return Err(Error::Validation(format!(
            "{} queries exceed the padded query count {}",
            preds.len(),
            w.n_q
        )));
    }
    let norm = matched_count.max(1) as f64;
    let mut positive = vec![false; preds.len()];
    for &(q, _) in positives {
        positive[q] = true;
    }
    let mut terms = FindTerms::default();
    for (pred, &y) in preds.iter().zip(&positive) {
        terms.ce += focal_bce(pred.class_prob(), y, w.alpha_cls, w.gamma_cls);
        terms.pres += presence_loss(pred.presence_prob(), y, w.pos_weight);
    }
    for &(q, t) in positives {
        let (p, g) = (&preds[q].bbox, &targets[t].bbox);
        terms.l1 += l1_box(p, g);
        terms.giou += 1.0 - box_giou(p, g);
    }
    terms.ce *= w.lambda_ce / norm;
    terms.pres *= w.lambda_pr / norm;
    terms.l1 *= w.lambda_l1 / norm;
    terms.giou *= w.lambda_g / norm;
    Ok(terms)
}

/// Upsamples a query's mask logits to `height x width` and applies the sigmoid.
pub fn mask_probs(pred: &QueryPrediction, height: usize, width: usize) -> ScoreMap {
    resize_bilinear(&pred.mask_logits, height, width).map(|&x| sigmoid(x))
}

/// Segmentation loss of one image: pixel-mean focal and Dice over the masks
/// of `pairs` (normalized by `matched_count`) plus the BCE of the image-level
/// presence probability against `prompt_present`.
pub fn seg_loss(
    preds: &[QueryPrediction],
    targets: &[InstanceTarget],
    pairs: &[(usize, usize)],
    matched_count: usize,
    presence_prob: f64,
    prompt_present: bool,
    w: &SegWeights,
) -> Result<SegTerms> {
    check_pairs(pairs, preds.len(), targets.len())?;
    let norm = matched_count.max(1) as f64;
    let mut terms = SegTerms::default();
    for &(q, t) in pairs {
        let gt = &targets[t].mask;
        let probs = mask_probs(&preds[q], gt.height(), gt.width());
        let focal: f64 = probs
            .as_slice()
            .iter()
            .zip(gt.as_slice())
            .map(|(&p, &g)| focal_bce(p, g, w.alpha_seg, w.gamma_seg))
            .sum::<f64>()
            / probs.as_slice().len() as f64;
        terms.focal += focal;
        terms.dice += dice_loss(&probs, gt, w.dice_eps)?;
    }
    terms.focal *= w.lambda_f / norm;
    terms.dice *= w.lambda_d / norm;
    terms.presence = w.lambda_sp * bce(presence_prob, prompt_present);
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Grid, NormBox};
    use approx::assert_abs_diff_eq;

    const LN2: f64 = std::f64::consts::LN_2;

    fn query(p_cls: f64, p_pres: f64, bbox: NormBox, logits: ScoreMap) -> QueryPrediction {
        QueryPrediction::from_probs(p_cls, p_pres, bbox, logits)
    }

    fn target(bbox: NormBox, mask: BinaryMask) -> InstanceTarget {
        InstanceTarget {
            concept: "lung".into(),
            bbox,
            mask,
        }
    }

    #[test]
    fn focal_examples() {
        assert_abs_diff_eq!(focal_bce(0.5, true, 0.25, 2.0), 0.043322, epsilon = 1e-6);
        assert!(focal_bce(1.0, true, 0.25, 2.0) < 1e-12);
        for p in [0.1, 0.4, 0.8] {
            assert_abs_diff_eq!(focal_bce(p, true, 0.5, 0.0), 0.5 * bce(p, true), epsilon = 1e-12);
            assert_abs_diff_eq!(focal_bce(p, false, 0.5, 0.0), 0.5 * bce(p, false), epsilon = 1e-12);
        }
    }

    #[test]
    fn presence_examples() {
        assert_abs_diff_eq!(presence_loss(0.5, true, 10.0), 6.93147, epsilon = 1e-5);
        assert!(presence_loss(0.0, false, 10.0) < 1e-6);
        assert_abs_diff_eq!(presence_loss(0.5, false, 10.0), LN2, epsilon = 1e-12);
    }

    #[test]
    fn dice_examples() {
        let gt = Grid::from_fn(2, 2, |r, c| r == 0 || c == 0);
        let hard = gt.map(|&g| if g { 1.0 } else { 0.0 });
        assert_eq!(dice_loss(&hard, &gt, 1.0).unwrap(), 0.0);

        let gt3 = Grid::from_fn(2, 2, |r, c| !(r == 1 && c == 1));
        assert_abs_diff_eq!(dice_loss(&Grid::filled(2, 2, 0.0), &gt3, 1.0).unwrap(), 0.75, epsilon = 1e-12);

        let empty = Grid::filled(3, 3, false);
        assert_eq!(dice_loss(&Grid::filled(3, 3, 0.0), &empty, 1.0).unwrap(), 0.0);

        assert!(dice_loss(&Grid::filled(3, 2, 0.0), &empty, 1.0).is_err());
    }

    #[test]
    fn dice_loss_symmetric_for_hard_masks() {
        let a = Grid::from_fn(4, 4, |r, c| r + c < 4);
        let b = Grid::from_fn(4, 4, |r, _| r < 2);
        let f = |m: &BinaryMask| m.map(|&v| if v { 1.0 } else { 0.0 });
        assert_abs_diff_eq!(
            dice_loss(&f(&a), &b, 1.0).unwrap(),
            dice_loss(&f(&b), &a, 1.0).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_is_linear() {
        assert_eq!(total_loss(1.0, 0.5, 2.0, 2.0), 4.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 2.0), 0.0);
        let d = total_loss(1.0, 1.75, 2.0, 2.0) - total_loss(1.0, 0.5, 2.0, 2.0);
        assert_abs_diff_eq!(d, 2.0 * 1.25, epsilon = 1e-12);
    }

    #[test]
    fn find_loss_no_targets_confident_negatives() {
        let preds: Vec<_> = (0..5)
            .map(|_| query(1e-9, 1e-9, NormBox::new(0.5, 0.5, 0.2, 0.2), Grid::filled(2, 2, 0.0)))
            .collect();
        let t = find_loss(&preds, &[], &[], 0, &FindWeights::default()).unwrap();
        // Only the clamp floor remains: five presence terms of -ln(1 - 1e-7).
        assert!(t.total() < 5.0 * 20.0 * 1.01e-7);
    }

    #[test]
    fn find_loss_single_pair() {
        let b = NormBox::new(0.5, 0.5, 0.3, 0.3);
        let preds = [query(0.5, 0.5, b, Grid::filled(2, 2, 0.0))];
        let targets = [target(b, Grid::filled(2, 2, true))];
        let w = FindWeights {
            n_q: 1,
            ..FindWeights::default()
        };
        let t = find_loss(&preds, &targets, &[(0, 0)], 1, &w).unwrap();
        assert_abs_diff_eq!(t.l1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.giou, 0.0, epsilon = 1e-12);
        let expected = 20.0 * 0.25 * 0.25 * LN2 + 20.0 * 10.0 * LN2;
        assert_abs_diff_eq!(t.total(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(t.total(), 139.496, epsilon = 1e-3);
    }

    #[test]
    fn find_loss_rejects_bad_pairs() {
        let b = NormBox::new(0.5, 0.5, 0.3, 0.3);
        let preds = [query(0.5, 0.5, b, Grid::filled(2, 2, 0.0))];
        assert!(find_loss(&preds, &[], &[(0, 0)], 1, &FindWeights::default()).is_err());
        assert!(find_loss(&preds, &[target(b, Grid::filled(2, 2, true))], &[(3, 0)], 1, &FindWeights::default()).is_err());
    }

    #[test]
    fn find_loss_permutation_equivariant() {
        let mut s = crate::rng::Stream::new(3);
        let mut preds: Vec<_> = (0..6)
            .map(|_| {
                let b = NormBox::new(0.2 + 0.6 * s.unit(), 0.2 + 0.6 * s.unit(), 0.1 + 0.2 * s.unit(), 0.1 + 0.2 * s.unit());
                query(s.unit(), s.unit(), b, Grid::filled(2, 2, 0.0))
            })
            .collect();
        let targets = [
            target(NormBox::new(0.3, 0.3, 0.2, 0.2), Grid::filled(2, 2, true)),
            target(NormBox::new(0.7, 0.6, 0.1, 0.3), Grid::filled(2, 2, true)),
        ];
        let w = FindWeights::default();
        let base = find_loss(&preds, &targets, &[(1, 0), (4, 1)], 2, &w).unwrap();
        // Rotate queries by two positions and the pairs with them.
        preds.rotate_right(2);
        let rotated = find_loss(&preds, &targets, &[(3, 0), (0, 1)], 2, &w).unwrap();
        assert_abs_diff_eq!(base.total(), rotated.total(), epsilon = 1e-12);
    }

    #[test]
    fn seg_loss_examples() {
        let w = SegWeights::default();
        let b = NormBox::new(0.5, 0.5, 1.0, 1.0);
        let gt = Grid::filled(2, 2, true);

        // Hard, correct masks and a confident presence score.
        let preds = [query(0.9, 0.9, b, Grid::filled(2, 2, 40.0))];
        let t = seg_loss(&preds, &[target(b, gt.clone())], &[(0, 0)], 1, 1.0, true, &w).unwrap();
        assert!(t.total() < 1e-5, "{t:?}");

        // Probability 0.5 everywhere over a 4-pixel all-foreground target.
        let preds = [query(0.9, 0.9, b, Grid::filled(2, 2, 0.0))];
        let t = seg_loss(&preds, &[target(b, gt)], &[(0, 0)], 1, 0.5, true, &w).unwrap();
        let focal_px = 0.6 * 0.25 * LN2;
        assert_abs_diff_eq!(focal_px, 0.103972, epsilon = 1e-6);
        assert_abs_diff_eq!(t.focal, 20.0 * focal_px, epsilon = 1e-9);
        assert_abs_diff_eq!(t.dice, 30.0 * (1.0 - 5.0 / 7.0), epsilon = 1e-9);
        assert_abs_diff_eq!(t.presence, LN2, epsilon = 1e-12);

        // No matches and an absent prompt: only the presence term remains.
        let t = seg_loss(&preds, &[], &[], 0, 0.5, false, &w).unwrap();
        assert_eq!(t.focal + t.dice, 0.0);
        assert_abs_diff_eq!(t.total(), 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn breakdown_composition() {
        let o2o = FindTerms { ce: 1.0, pres: 2.0, l1: 0.5, giou: 0.25 };
        let o2m = FindTerms { ce: 0.5, pres: 0.5, l1: 0.0, giou: 0.0 };
        let seg = SegTerms { focal: 1.0, dice: 2.0, presence: 0.5 };
        let b = LossBreakdown::compose(o2o, o2m, seg, 2.0, 0);
        assert_eq!(b.matched_count, 1);
        assert_abs_diff_eq!(b.total, 3.75 + 2.0 * 1.0 + 3.5, epsilon = 1e-12);
    }
}

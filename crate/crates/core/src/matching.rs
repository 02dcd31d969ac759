//! Query-to-target assignment.
//!
//! The one-to-one matcher minimises a focal classification cost plus L1 and
//! GIoU box costs with the Kuhn-Munkres algorithm. The one-to-many matcher
//! then lets up to `top_k` queries share each target.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::InstanceTarget;
use crate::geometry::{box_giou, box_iou, l1_box};
use crate::model::QueryPrediction;
use crate::objective::clamp_prob;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherWeights {
    pub w_cls: f64,
    pub w_box: f64,
    pub w_giou: f64,
    pub alpha_match: f64,
    pub gamma_match: f64,
    /// When false, ties are resolved by index order with no cost perturbation.
    pub stable: bool,
}

impl Default for MatcherWeights {
    fn default() -> Self {
        MatcherWeights {
            w_cls: 2.0,
            w_box: 5.0,
            w_giou: 2.0,
            alpha_match: 0.25,
            gamma_match: 2.0,
            stable: false,
        }
    }
}

impl MatcherWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_cls, self.w_box, self.w_giou].iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("matcher weights must be >= 0".into()));
        }
        if !(self.alpha_match > 0.0 && self.alpha_match < 1.0) {
            return Err(Error::Config("alpha_match must lie in (0, 1)".into()));
        }
        if !(self.gamma_match >= 0.0) {
            return Err(Error::Config("gamma_match must be >= 0".into()));
        }
        Ok(())
    }

    /// Focal matching cost of a query with probability `p` for the prompted
    /// concept: positive focal term minus negative focal term.
    pub fn focal_cost(&self, p: f64) -> f64 {
        let p = clamp_prob(p);
        let (a, g) = (self.alpha_match, self.gamma_match);
        let pos = a * (1.0 - p).powf(g) * -p.ln();
        let neg = (1.0 - a) * p.powf(g) * -(1.0 - p).ln();
        pos - neg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct O2MConfig {
    pub top_k: usize,
    pub threshold: f64,
    pub alpha_o2m: f64,
}

impl Default for O2MConfig {
    fn default() -> Self {
        O2MConfig {
            top_k: 4,
            threshold: 0.4,
            alpha_o2m: 0.3,
        }
    }
}

impl O2MConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("o2m top_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("o2m threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_o2m) {
            return Err(Error::Config("alpha_o2m must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Dense cost matrix with one row per query and one column per target.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    queries: usize,
    targets: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, targets: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != queries * targets {
            return Err(Error::Validation(format!(
                "cost matrix {queries}x{targets} needs {} entries, got {}",
                queries * targets,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix {
            queries,
            targets,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let targets = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != targets) {
            return Err(Error::Validation("ragged cost matrix".into()));
        }
        CostMatrix::new(rows.len(), targets, rows.concat())
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.data[query * self.targets + target]
    }

    /// Sum of `cost[q][t]` over `pairs`, accumulated in target order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        let mut by_target: Vec<_> = pairs.to_vec();
        by_target.sort_by_key(|&(_, t)| t);
        by_target.iter().map(|&(q, t)| self.get(q, t)).sum()
    }
}

/// One-to-one assignment of targets to queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query, target)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_targets(cost: &CostMatrix, query_of_target: &[usize]) -> Self {
        let mut pairs: Vec<(usize, usize)> = query_of_target
            .iter()
            .enumerate()
            .map(|(t, &q)| (q, t))
            .collect();
        pairs.sort_unstable();
        let mut taken = vec![false; cost.queries()];
        for &(q, _) in &pairs {
            taken[q] = true;
        }
        Assignment {
            total_cost: cost.total(&pairs),
            unmatched_queries: (0..cost.queries()).filter(|&q| !taken[q]).collect(),
            pairs,
        }
    }

    pub fn empty(queries: usize) -> Self {
        Assignment {
            pairs: Vec::new(),
            unmatched_queries: (0..queries).collect(),
            total_cost: 0.0,
        }
    }

    pub fn partner_of_target(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == target).map(|p| p.0)
    }
}

/// `(query, target)` pairs where several queries may share a target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiAssignment {
    /// Sorted by query index; each query appears at most once.
    pub pairs: Vec<(usize, usize)>,
}

impl MultiAssignment {
    pub fn count_for_target(&self, target: usize) -> usize {
        self.pairs.iter().filter(|p| p.1 == target).count()
    }
}

/// Matching cost between every query and every target of the prompted concept.
pub fn pairwise_cost(
    preds: &[QueryPrediction],
    targets: &[InstanceTarget],
    w: &MatcherWeights,
) -> Result<CostMatrix> {
    if preds.is_empty() || targets.is_empty() {
        return Err(Error::Validation(
            "pairwise cost needs at least one query and one target".into(),
        ));
    }
    let mut data = Vec::with_capacity(preds.len() * targets.len());
    for pred in preds {
        if !pred.class_logit.is_finite() || !pred.bbox.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite prediction in matcher input".into()));
        }
        let cls = w.w_cls * w.focal_cost(pred.class_prob());
        for target in targets {
            data.push(
                cls + w.w_box * l1_box(&pred.bbox, &target.bbox)
                    - w.w_giou * box_giou(&pred.bbox, &target.bbox),
            );
        }
    }
    CostMatrix::new(preds.len(), targets.len(), data)
}

/// Minimum-cost injection of targets into queries (Kuhn-Munkres with
/// potentials, `O(M^2 N)`). Among equal reduced costs the lowest query index
/// is taken.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<Assignment> {
    let (n_q, n_t) = (cost.queries(), cost.targets());
    if n_q < n_t {
        return Err(Error::MoreTargetsThanQueries {
            targets: n_t,
            queries: n_q,
        });
    }
    if n_t == 0 {
        return Ok(Assignment::empty(n_q));
    }

    // Rows are targets (1-based), columns are queries (1-based); column 0 is
    // the virtual source of each augmenting path.
    let a = |t: usize, q: usize| cost.get(q - 1, t - 1);
    let mut u = vec![0.0; n_t + 1];
    let mut v = vec![0.0; n_q + 1];
    let mut owner = vec![0usize; n_q + 1];
    let mut way = vec![0usize; n_q + 1];

    for t in 1..=n_t {
        owner[0] = t;
        let mut col = 0usize;
        let mut min_v = vec![f64::INFINITY; n_q + 1];
        let mut used = vec![false; n_q + 1];
        loop {
            used[col] = true;
            let row = owner[col];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for q in 1..=n_q {
                if used[q] {
                    continue;
                }
                let reduced = a(row, q) - u[row] - v[q];
                if reduced < min_v[q] {
                    min_v[q] = reduced;
                    way[q] = col;
                }
                if min_v[q] < delta {
                    delta = min_v[q];
                    next = q;
                }
            }
            for q in 0..=n_q {
                if used[q] {
                    u[owner[q]] += delta;
                    v[q] -= delta;
                } else {
                    min_v[q] -= delta;
                }
            }
            col = next;
            if owner[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            owner[col] = owner[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }

    let mut query_of_target = vec![0usize; n_t];
    for q in 1..=n_q {
        if owner[q] != 0 {
            query_of_target[owner[q] - 1] = q - 1;
        }
    }
    Ok(Assignment::from_targets(cost, &query_of_target))
}

/// Largest target count accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_MAX_TARGETS: usize = 8;

/// Exhaustive search over all injections. Candidates are visited in
/// lexicographic order of `(query of target 0, query of target 1, ...)` and
/// only a strictly lower total replaces the incumbent.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    let (n_q, n_t) = (cost.queries(), cost.targets());
    if n_t > BRUTE_FORCE_MAX_TARGETS {
        return Err(Error::Validation(format!(
            "brute-force assignment supports at most {BRUTE_FORCE_MAX_TARGETS} targets, got {n_t}"
        )));
    }
    if n_q < n_t {
        return Err(Error::MoreTargetsThanQueries {
            targets: n_t,
            queries: n_q,
        });
    }

    struct Search<'a> {
        cost: &'a CostMatrix,
        current: Vec<usize>,
        used: Vec<bool>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, target: usize, partial: f64) {
            if target == self.cost.targets() {
                if self.best.as_ref().is_none_or(|(b, _)| partial < *b) {
                    self.best = Some((partial, self.current.clone()));
                }
                return;
            }
            for q in 0..self.cost.queries() {
                if self.used[q] {
                    continue;
                }
                self.used[q] = true;
                self.current.push(q);
                self.visit(target + 1, partial + self.cost.get(q, target));
                self.current.pop();
                self.used[q] = false;
            }
        }
    }

    let mut search = Search {
        cost,
        current: Vec::with_capacity(n_t),
        used: vec![false; n_q],
        best: None,
    };
    search.visit(0, 0.0);
    let (_, query_of_target) = search.best.expect("at least one injection exists");
    Ok(Assignment::from_targets(cost, &query_of_target))
}

/// One-to-many score of a query for a target: blend of its concept
/// probability and its box IoU with the target.
pub fn o2m_score(pred: &QueryPrediction, target: &InstanceTarget, cfg: &O2MConfig) -> f64 {
    cfg.alpha_o2m * pred.class_prob() + (1.0 - cfg.alpha_o2m) * box_iou(&pred.bbox, &target.bbox)
}

/// Auxiliary one-to-many assignment built on top of the one-to-one result.
///
/// For each target, queries matched one-to-one to a different target are
/// excluded. The target's own one-to-one partner is always admitted; the
/// remaining slots up to `top_k` go to the highest-scoring queries with a
/// score at or above the threshold. A query admitted by several targets
/// keeps only its best-scoring one.
pub fn one_to_many_assign(
    preds: &[QueryPrediction],
    targets: &[InstanceTarget],
    o2o: &Assignment,
    cfg: &O2MConfig,
) -> MultiAssignment {
    let o2o_target_of: BTreeMap<usize, usize> = o2o.pairs.iter().copied().collect();
    // query -> (score, target, is_o2o_partner)
    let mut best: BTreeMap<usize, (f64, usize, bool)> = BTreeMap::new();

    for (t, target) in targets.iter().enumerate() {
        let partner = o2o.partner_of_target(t);
        let mut candidates: Vec<(f64, usize)> = preds
            .iter()
            .enumerate()
            .filter(|&(q, _)| Some(q) != partner && !o2o_target_of.contains_key(&q))
            .map(|(q, pred)| (o2m_score(pred, target, cfg), q))
            .filter(|&(s, _)| s >= cfg.threshold)
            .collect();
        // Highest score first; lower query index on ties.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut admitted = Vec::with_capacity(cfg.top_k);
        if let Some(q) = partner {
            admitted.push((o2m_score(&preds[q], target, cfg), q, true));
        }
        for (s, q) in candidates {
            if admitted.len() >= cfg.top_k {
                break;
            }
            admitted.push((s, q, false));
        }

        for (score, q, is_partner) in admitted {
            match best.get(&q) {
                Some(&(_, _, true)) => {}
                Some(&(prev, _, false)) if !is_partner && prev >= score => {}
                _ => {
                    best.insert(q, (score, t, is_partner));
                }
            }
        }
    }

    MultiAssignment {
        pairs: best.into_iter().map(|(q, (_, t, _))| (q, t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Grid, NormBox};
    use approx::assert_abs_diff_eq;

    fn pred(p: f64, b: NormBox) -> QueryPrediction {
        QueryPrediction::from_probs(p, 0.5, b, Grid::filled(2, 2, 0.0))
    }

    fn target(b: NormBox) -> InstanceTarget {
        InstanceTarget {
            concept: "polyp".into(),
            bbox: b,
            mask: Grid::filled(2, 2, true),
        }
    }

    fn unit_box() -> NormBox {
        NormBox::new(0.5, 0.5, 0.4, 0.4)
    }

    #[test]
    fn pairwise_cost_half_probability_identical_boxes() {
        let w = MatcherWeights::default();
        let c = pairwise_cost(&[pred(0.5, unit_box())], &[target(unit_box())], &w).unwrap();
        let focal = 0.25 * 0.25 * 2f64.ln() - 0.75 * 0.25 * 2f64.ln();
        assert_abs_diff_eq!(focal, -0.086643, epsilon = 1e-6);
        assert_abs_diff_eq!(c.get(0, 0), -2.173287, epsilon = 1e-6);
    }

    #[test]
    fn pairwise_cost_confident_query_approaches_minus_two() {
        let w = MatcherWeights::default();
        // The positive focal term vanishes; the negative one grows with p and
        // is bounded only by the probability clamp.
        let c = pairwise_cost(&[pred(1.0 - 1e-9, unit_box())], &[target(unit_box())], &w).unwrap();
        let p = 1.0 - crate::objective::PROB_EPS;
        let expected = -2.0 + 2.0 * (0.25 * (1.0 - p).powi(2) * -p.ln() - 0.75 * p * p * -(1.0 - p).ln());
        assert!(c.get(0, 0) < -2.0);
        assert_abs_diff_eq!(c.get(0, 0), expected, epsilon = 1e-6);
    }

    #[test]
    fn box_weight_scales_only_l1_term() {
        let w = MatcherWeights::default();
        let w2 = MatcherWeights {
            w_box: 2.0 * w.w_box,
            ..w
        };
        let p = [pred(0.3, NormBox::new(0.4, 0.5, 0.2, 0.3))];
        let t = [target(NormBox::new(0.5, 0.45, 0.3, 0.3))];
        let diff = pairwise_cost(&p, &t, &w2).unwrap().get(0, 0) - pairwise_cost(&p, &t, &w).unwrap().get(0, 0);
        assert_abs_diff_eq!(diff, w.w_box * l1_box(&p[0].bbox, &t[0].bbox), epsilon = 1e-12);
    }

    #[test]
    fn non_finite_logit_rejected() {
        let mut p = pred(0.5, unit_box());
        p.class_logit = f64::NAN;
        assert!(pairwise_cost(&[p], &[target(unit_box())], &MatcherWeights::default()).is_err());
    }

    #[test]
    fn focal_cost_strictly_decreasing() {
        let w = MatcherWeights::default();
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let c = w.focal_cost(i as f64 / 100.0);
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian_assign(&CostMatrix::from_rows(&[vec![0.0]]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 0.0);

        let a = hungarian_assign(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        assert!(a.unmatched_queries.is_empty());
    }

    #[test]
    fn ties_prefer_lowest_query_index() {
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(brute_force_assign(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian_assign(&c).unwrap().pairs, vec![(0, 0), (1, 1)]);

        let c = CostMatrix::from_rows(&[vec![3.0], vec![3.0], vec![3.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unmatched_queries, vec![1, 2]);
    }

    #[test]
    fn more_targets_than_queries_is_an_error() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let err = hungarian_assign(&c).unwrap_err();
        assert!(err.to_string().contains("more targets than queries"));
    }

    #[test]
    fn brute_force_guards_target_count() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(brute_force_assign(&c).is_err());
        assert_eq!(
            brute_force_assign(&CostMatrix::from_rows(&[vec![0.0]]).unwrap()).unwrap(),
            hungarian_assign(&CostMatrix::from_rows(&[vec![0.0]]).unwrap()).unwrap()
        );
    }

    #[test]
    fn o2o_partner_always_admitted() {
        let preds = [pred(0.01, NormBox::new(0.1, 0.1, 0.05, 0.05))];
        let targets = [target(NormBox::new(0.8, 0.8, 0.1, 0.1))];
        let cost = pairwise_cost(&preds, &targets, &MatcherWeights::default()).unwrap();
        let o2o = hungarian_assign(&cost).unwrap();
        assert!(o2m_score(&preds[0], &targets[0], &O2MConfig::default()) < 0.4);
        let m = one_to_many_assign(&preds, &targets, &o2o, &O2MConfig::default());
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn o2m_caps_at_top_k() {
        let b = unit_box();
        let preds: Vec<_> = (0..7).map(|i| pred(0.9 - 0.01 * i as f64, b)).collect();
        let targets = [target(b)];
        let cost = pairwise_cost(&preds, &targets, &MatcherWeights::default()).unwrap();
        let o2o = hungarian_assign(&cost).unwrap();
        let m = one_to_many_assign(&preds, &targets, &o2o, &O2MConfig::default());
        assert_eq!(m.count_for_target(0), 4);
        assert!(m.pairs.contains(&o2o.pairs[0]));
    }

    #[test]
    fn perfect_query_scores_one() {
        let b = unit_box();
        let s = o2m_score(&pred(1.0, b), &target(b), &O2MConfig::default());
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn shared_query_keeps_best_target() {
        let a = NormBox::new(0.3, 0.5, 0.3, 0.3);
        let b = NormBox::new(0.7, 0.5, 0.3, 0.3);
        let between = NormBox::new(0.35, 0.5, 0.3, 0.3);
        let preds = vec![pred(0.9, a), pred(0.9, b), pred(0.9, between)];
        let targets = vec![target(a), target(b)];
        let o2o = Assignment {
            pairs: vec![(0, 0), (1, 1)],
            unmatched_queries: vec![2],
            total_cost: 0.0,
        };
        let cfg = O2MConfig {
            threshold: 0.0,
            ..O2MConfig::default()
        };
        let m = one_to_many_assign(&preds, &targets, &o2o, &cfg);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 0)]);
    }
}

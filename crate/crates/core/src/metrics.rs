//! Evaluation metrics (Mean IoU, KL divergence), threshold selection, and
//! report assembly with CSV rendering.
//!
//! Conventions fixed here:
//! - IoU thresholds the *sigmoid* of the logits at `tau` (strictly
//!   greater); an empty prediction against an empty ground truth scores
//!   1.0, against a non-empty one 0.0.
//! - KL runs from the ground truth to the prediction: the ground-truth
//!   mask is normalized to a uniform distribution over its cells, the
//!   prediction is the softmax of all L^2 logits (always a valid
//!   distribution, even when every logit is negative), and predicted
//!   probabilities are clamped below at `KL_EPSILON`.

use crate::error::{Error, Result};
use crate::model::Query;
use crate::scalar::Scalar;
use crate::scene::{GroundMask, PREDICATES};
use crate::tensor::Tensor;
use crate::train::{Grounder, SplitData};

/// Floor for predicted probabilities inside the KL logarithm.
pub const KL_EPSILON: f64 = 1e-12;

fn check_map<S: Scalar>(op: &'static str, logits: &Tensor<S>, gt: &GroundMask) -> Result<()> {
    if logits.len() != gt.l * gt.l {
        return Err(Error::Dimension {
            op,
            axis: "cell count",
            expected: gt.l * gt.l,
            got: logits.len(),
        });
    }
    Ok(())
}

/// Intersection-over-union between the thresholded prediction and the
/// ground-truth mask: P = {cells with sigmoid(logit) > tau}.
pub fn mean_iou<S: Scalar>(logits: &Tensor<S>, gt: &GroundMask, tau: f64) -> Result<f64> {
    check_map("mean_iou", logits, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (z, &g) in logits.data().iter().zip(&gt.cells) {
        let z = z.as_f64();
        let sig = 1.0 / (1.0 + (-z).exp());
        let p = sig > tau;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// KL(gt ‖ softmax(logits)) in nats. The ground truth must cover at least
/// one cell; it is treated as uniform over its cells.
pub fn kl_divergence<S: Scalar>(gt: &GroundMask, logits: &Tensor<S>) -> Result<f64> {
    check_map("kl_divergence", logits, gt)?;
    let m = gt.count();
    if m == 0 {
        return Err(Error::Invalid(
            "kl_divergence needs a non-empty ground-truth mask".into(),
        ));
    }
    // Max-subtracted softmax in f64.
    let zmax = logits
        .data()
        .iter()
        .map(|z| z.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if !zmax.is_finite() {
        return Err(Error::Numeric(format!("non-finite logits in kl_divergence (max {zmax})")));
    }
    let mut denom = 0.0f64;
    for z in logits.data() {
        denom += (z.as_f64() - zmax).exp();
    }
    let g = 1.0 / m as f64;
    let mut kl = 0.0f64;
    for (z, &on) in logits.data().iter().zip(&gt.cells) {
        if !on {
            continue;
        }
        let q = ((z.as_f64() - zmax).exp() / denom).max(KL_EPSILON);
        kl += g * (g / q).ln();
    }
    Ok(kl)
}

/// What to hide from the model at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Subject,
    Object,
    Both,
}

impl MaskMode {
    /// The query the model actually sees under this mode.
    pub fn apply(&self, q: &Query) -> Query {
        let mut out = *q;
        if matches!(self, MaskMode::Subject | MaskMode::Both) {
            out.subject = None;
        }
        if matches!(self, MaskMode::Object | MaskMode::Both) {
            out.object = None;
        }
        out
    }
}

/// One query's inference outputs with its ground truth, the unit the
/// threshold search and the evaluator both consume.
#[derive(Debug, Clone)]
pub struct ScoredMaps<S: Scalar> {
    pub s_logits: Tensor<S>,
    pub o_logits: Tensor<S>,
    pub s_mask: GroundMask,
    pub o_mask: GroundMask,
}

/// Run inference over a split once, in example order.
pub fn collect_maps<S: Scalar>(
    model: &Grounder<S>,
    data: &SplitData<S>,
    mask: MaskMode,
) -> Result<Vec<ScoredMaps<S>>> {
    let mut out = Vec::with_capacity(data.examples.len());
    for ex in &data.examples {
        let q = mask.apply(&ex.query);
        let (s, o) = model.infer(&data.features[ex.scene], &q)?;
        out.push(ScoredMaps {
            s_logits: s.logits,
            o_logits: o.logits,
            s_mask: ex.s_mask.clone(),
            o_mask: ex.o_mask.clone(),
        });
    }
    Ok(out)
}

/// Pick the threshold in {0.1, 0.2, ..., 0.9} maximizing the mean of
/// subject and object IoU; ties resolve to the smaller threshold
/// (ascending scan with strictly-greater replacement).
pub fn select_tau<S: Scalar>(maps: &[ScoredMaps<S>]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Invalid("select_tau needs at least one query".into()));
    }
    let mut best_tau = 0.0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 1..=9 {
        let tau = k as f64 / 10.0;
        let mut total = 0.0f64;
        for m in maps {
            total += mean_iou(&m.s_logits, &m.s_mask, tau)?;
            total += mean_iou(&m.o_logits, &m.o_mask, tau)?;
        }
        let score = total / (2 * maps.len()) as f64;
        if score > best_score {
            best_score = score;
            best_tau = tau;
        }
    }
    Ok(best_tau)
}

/// One evaluated query; category and predicate fields name the true
/// (unmasked) query even when evaluation masked a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub scene: String,
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub ambiguous: bool,
    pub s_iou: f64,
    pub o_iou: f64,
    pub s_kl: f64,
    pub o_kl: f64,
}

/// Mean scores over a record subset. A by-entity aggregate averages the
/// subject columns over the queries where the category is the subject and
/// the object columns over those where it is the object; `n` counts
/// queries mentioning the category in either role. A role with no
/// occurrences reports 0.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub s_iou: f64,
    pub o_iou: f64,
    pub s_kl: f64,
    pub o_kl: f64,
}

impl Aggregate {
    fn over<'a>(records: impl Iterator<Item = &'a QueryRecord>) -> Aggregate {
        let (mut n, mut si, mut oi, mut sk, mut ok) = (0usize, 0.0, 0.0, 0.0, 0.0);
        for r in records {
            n += 1;
            si += r.s_iou;
            oi += r.o_iou;
            sk += r.s_kl;
            ok += r.o_kl;
        }
        if n == 0 {
            return Aggregate { n, s_iou: 0.0, o_iou: 0.0, s_kl: 0.0, o_kl: 0.0 };
        }
        let d = n as f64;
        Aggregate { n, s_iou: si / d, o_iou: oi / d, s_kl: sk / d, o_kl: ok / d }
    }

    fn by_entity(records: &[QueryRecord], category: &str) -> Aggregate {
        let (mut ns, mut no, mut n) = (0usize, 0usize, 0usize);
        let (mut si, mut sk, mut oi, mut ok) = (0.0, 0.0, 0.0, 0.0);
        for r in records {
            let is_s = r.subject == category;
            let is_o = r.object == category;
            if is_s {
                ns += 1;
                si += r.s_iou;
                sk += r.s_kl;
            }
            if is_o {
                no += 1;
                oi += r.o_iou;
                ok += r.o_kl;
            }
            if is_s || is_o {
                n += 1;
            }
        }
        Aggregate {
            n,
            s_iou: if ns == 0 { 0.0 } else { si / ns as f64 },
            s_kl: if ns == 0 { 0.0 } else { sk / ns as f64 },
            o_iou: if no == 0 { 0.0 } else { oi / no as f64 },
            o_kl: if no == 0 { 0.0 } else { ok / no as f64 },
        }
    }
}

/// Full evaluation output: per-query records plus deterministic
/// aggregates (overall, ambiguous subset, per predicate, per entity
/// category).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub mask: MaskMode,
    pub records: Vec<QueryRecord>,
    pub overall: Aggregate,
    pub ambiguous: Aggregate,
    /// In fixed predicate-table order.
    pub by_predicate: Vec<(String, Aggregate)>,
    /// In vocabulary order, one row per category.
    pub by_entity: Vec<(String, Aggregate)>,
}

/// Evaluate a split at a fixed threshold. `scene_ids` aligns with
/// `data.features`. Inference sees the mask-adjusted query; records keep
/// the true names so the breakdowns stay meaningful.
pub fn evaluate<S: Scalar>(
    model: &Grounder<S>,
    data: &SplitData<S>,
    scene_ids: &[String],
    tau: f64,
    mask: MaskMode,
) -> Result<EvalReport> {
    if scene_ids.len() != data.features.len() {
        return Err(Error::Dimension {
            op: "evaluate",
            axis: "scene id count",
            expected: data.features.len(),
            got: scene_ids.len(),
        });
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Invalid(format!("threshold {tau} outside [0, 1)")));
    }
    let vocab = model.net.vocab().to_vec();
    let name = |slot: Option<usize>| -> Result<String> {
        let i = slot.ok_or_else(|| Error::Invalid("example query has a masked slot".into()))?;
        vocab
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("category id {i} outside vocabulary")))
    };
    let mut records = Vec::with_capacity(data.examples.len());
    for ex in &data.examples {
        let q = mask.apply(&ex.query);
        let (s, o) = model.infer(&data.features[ex.scene], &q)?;
        records.push(QueryRecord {
            scene: scene_ids[ex.scene].clone(),
            subject: name(ex.query.subject)?,
            predicate: PREDICATES[ex.query.predicate].to_string(),
            object: name(ex.query.object)?,
            ambiguous: ex.ambiguous,
            s_iou: mean_iou(&s.logits, &ex.s_mask, tau)?,
            o_iou: mean_iou(&o.logits, &ex.o_mask, tau)?,
            s_kl: kl_divergence(&ex.s_mask, &s.logits)?,
            o_kl: kl_divergence(&ex.o_mask, &o.logits)?,
        });
    }
    let overall = Aggregate::over(records.iter());
    let ambiguous = Aggregate::over(records.iter().filter(|r| r.ambiguous));
    let by_predicate = PREDICATES
        .iter()
        .map(|p| (p.to_string(), Aggregate::over(records.iter().filter(|r| r.predicate == *p))))
        .collect();
    let by_entity = vocab
        .iter()
        .map(|c| (c.clone(), Aggregate::by_entity(&records, c)))
        .collect();
    Ok(EvalReport { tau, mask, records, overall, ambiguous, by_predicate, by_entity })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-query CSV (metrics.csv).
pub fn render_metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("scene,subject,predicate,object,ambiguous,s_iou,o_iou,s_kl,o_kl\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.scene,
            r.subject,
            r.predicate,
            r.object,
            r.ambiguous,
            fmt(r.s_iou),
            fmt(r.o_iou),
            fmt(r.s_kl),
            fmt(r.o_kl),
        ));
    }
    out
}

fn push_row(out: &mut String, label: &str, a: &Aggregate) {
    out.push_str(&format!(
        "{},{},{},{},{},{}\n",
        label,
        a.n,
        fmt(a.s_iou),
        fmt(a.o_iou),
        fmt(a.s_kl),
        fmt(a.o_kl),
    ));
}

/// Predicate breakdown CSV (report_by_predicate.csv), led by the
/// `_overall` and `_ambiguous` pseudo-rows.
pub fn render_predicate_csv(report: &EvalReport) -> String {
    let mut out = String::from("category,n,s_iou,o_iou,s_kl,o_kl\n");
    push_row(&mut out, "_overall", &report.overall);
    push_row(&mut out, "_ambiguous", &report.ambiguous);
    for (p, a) in &report.by_predicate {
        push_row(&mut out, p, a);
    }
    out
}

/// Entity-category breakdown CSV (report_by_entity.csv).
pub fn render_entity_csv(report: &EvalReport) -> String {
    let mut out = String::from("category,n,s_iou,o_iou,s_kl,o_kl\n");
    for (c, a) in &report.by_entity {
        push_row(&mut out, c, a);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::CooccurModel;
    use crate::model::{Query, SsasConfig, SsasModel};
    use crate::rng::rng_from;
    use crate::train::{Example, Net, SceneFeatures};
    use rand::Rng;

    /// Encode a membership set as confident logits: +4 inside, -4 outside
    /// (sigmoid 0.982 / 0.018, on the right side of every grid threshold).
    fn logits_of(l: usize, cells: &[usize]) -> Tensor<f64> {
        let mut t = Tensor::filled(&[l, l], -4.0);
        for &c in cells {
            t.data_mut()[c] = 4.0;
        }
        t
    }

    fn mask_of(l: usize, cells: &[usize]) -> GroundMask {
        let mut m = GroundMask { l, cells: vec![false; l * l] };
        for &c in cells {
            m.cells[c] = true;
        }
        m
    }

    #[test]
    fn iou_identical_sets_score_one() {
        let cells = [5usize, 6, 9, 10];
        let v = mean_iou(&logits_of(4, &cells), &mask_of(4, &cells), 0.5).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn iou_disjoint_equal_sets_score_zero() {
        let v = mean_iou(&logits_of(4, &[0, 1]), &mask_of(4, &[14, 15]), 0.5).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn iou_half_width_shift_scores_one_third() {
        // G is a 2x4 block; P is G shifted right by half its width (2
        // columns): overlap 2x2, union 2x6 -> 1/3.
        let l = 8;
        let g: Vec<usize> = (0..2).flat_map(|r| (0..4).map(move |c| r * l + c)).collect();
        let p: Vec<usize> = (0..2).flat_map(|r| (2..6).map(move |c| r * l + c)).collect();
        let v = mean_iou(&logits_of(l, &p), &mask_of(l, &g), 0.5).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn iou_empty_conventions() {
        let both = mean_iou(&logits_of(4, &[]), &mask_of(4, &[]), 0.5).unwrap();
        assert!((both - 1.0).abs() < 1e-9);
        let pred_only_empty = mean_iou(&logits_of(4, &[]), &mask_of(4, &[3]), 0.5).unwrap();
        assert!(pred_only_empty.abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_in_the_two_sets() {
        let mut rng = rng_from(31);
        for _ in 0..20 {
            let l = 5;
            let a: Vec<usize> = (0..l * l).filter(|_| rng.gen_bool(0.3)).collect();
            let b: Vec<usize> = (0..l * l).filter(|_| rng.gen_bool(0.3)).collect();
            let ab = mean_iou(&logits_of(l, &a), &mask_of(l, &b), 0.5).unwrap();
            let ba = mean_iou(&logits_of(l, &b), &mask_of(l, &a), 0.5).unwrap();
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn iou_rejects_mismatched_grid() {
        assert!(mean_iou(&logits_of(4, &[]), &mask_of(5, &[0]), 0.5).is_err());
    }

    #[test]
    fn kl_matching_distributions_is_zero() {
        // Uniform mass on the mask, vanishing mass elsewhere: logits 0 on
        // the mask, -40 off it (off-mask softmax mass ~ e^-40 per cell).
        let l = 6;
        let cells = [7usize, 8, 13, 14];
        let mut logits = Tensor::filled(&[l, l], -40.0);
        for c in cells {
            logits.data_mut()[c] = 0.0;
        }
        let v = kl_divergence(&mask_of(l, &cells), &logits).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn kl_uniform_prediction_scores_log_ratio() {
        // q uniform over L^2 = 36 cells, g uniform over m = 4 cells:
        // KL = ln(36/4) = ln 9.
        let l = 6;
        let cells = [0usize, 5, 17, 35];
        let logits = Tensor::filled(&[l, l], 0.7);
        let v = kl_divergence(&mask_of(l, &cells), &logits).unwrap();
        assert!((v - 9.0f64.ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn kl_matches_a_naive_reference_on_random_cases() {
        let mut rng = rng_from(77);
        for _ in 0..20 {
            let l = 5;
            let logits = Tensor::from_vec(
                &[l, l],
                (0..l * l).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>(),
            )
            .unwrap();
            let cells: Vec<usize> = (0..l * l).filter(|_| rng.gen_bool(0.25)).collect();
            if cells.is_empty() {
                continue;
            }
            // Naive reference: plain exp-sum softmax (safe in this logit
            // range), direct KL sum.
            let denom: f64 = logits.data().iter().map(|z| z.exp()).sum();
            let g = 1.0 / cells.len() as f64;
            let want: f64 = cells
                .iter()
                .map(|&c| g * (g / (logits.data()[c].exp() / denom)).ln())
                .sum();
            let got = kl_divergence(&mask_of(l, &cells), &logits).unwrap();
            assert!((got - want).abs() < 1e-12, "got {got} want {want}");
            assert!(got >= -1e-12);
        }
    }

    #[test]
    fn kl_rejects_an_empty_ground_truth() {
        assert!(kl_divergence(&mask_of(4, &[]), &logits_of(4, &[1])).is_err());
    }

    #[test]
    fn mask_mode_nulls_the_right_slots() {
        let q = Query { subject: Some(2), predicate: 1, object: Some(5) };
        assert_eq!(MaskMode::None.apply(&q), q);
        let s = MaskMode::Subject.apply(&q);
        assert_eq!((s.subject, s.object), (None, Some(5)));
        let o = MaskMode::Object.apply(&q);
        assert_eq!((o.subject, o.object), (Some(2), None));
        let b = MaskMode::Both.apply(&q);
        assert_eq!((b.subject, b.object), (None, None));
        assert_eq!(b.predicate, 1);
    }

    #[test]
    fn select_tau_breaks_ties_toward_the_smaller_threshold() {
        // Saturated logits: every grid threshold yields the same
        // prediction set, so every tau ties and 0.1 must win.
        let cells = [1usize, 2];
        let maps = vec![ScoredMaps {
            s_logits: logits_of(4, &cells),
            o_logits: logits_of(4, &cells),
            s_mask: mask_of(4, &cells),
            o_mask: mask_of(4, &cells),
        }];
        assert_eq!(select_tau(&maps).unwrap(), 0.1);
    }

    #[test]
    fn select_tau_finds_the_separating_threshold() {
        // On-mask sigmoid 0.65, off-mask 0.25 (both clear of the grid
        // values, so rounding cannot flip the strict comparison):
        // thresholds 0.3..0.6 predict exactly the mask (IoU 1), lower
        // ones cover everything, higher ones nothing. The smallest
        // perfect threshold, 0.3, wins the tie.
        let l = 4;
        let cells = [5usize, 6];
        let z_on = (0.65f64 / 0.35).ln();
        let z_off = (0.25f64 / 0.75).ln();
        let mut logits = Tensor::filled(&[l, l], z_off);
        for c in cells {
            logits.data_mut()[c] = z_on;
        }
        let maps = vec![ScoredMaps {
            s_logits: logits.clone(),
            o_logits: logits,
            s_mask: mask_of(l, &cells),
            o_mask: mask_of(l, &cells),
        }];
        assert_eq!(select_tau(&maps).unwrap(), 0.3);
    }

    #[test]
    fn select_tau_rejects_an_empty_set() {
        assert!(select_tau::<f64>(&[]).is_err());
    }

    // --- evaluate / report -------------------------------------------

    fn tiny_eval_setup() -> (Grounder<f64>, SplitData<f64>, Vec<String>) {
        let vocab = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let mut rng = rng_from(11);
        let model = CooccurModel::new(4, 3, vocab, &mut rng);
        let g = Grounder::oracle(Net::Cooccur(model));
        let mut rng = rng_from(12);
        let features: Vec<SceneFeatures<f64>> = (0..2)
            .map(|_| {
                SceneFeatures::Grid(
                    Tensor::from_vec(
                        &[4, 4, 3],
                        (0..48).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>(),
                    )
                    .unwrap(),
                )
            })
            .collect();
        let mk = |scene: usize, s: usize, p: usize, o: usize, s_cells: &[usize], o_cells: &[usize], amb: bool| {
            let s_mask = mask_of(4, s_cells);
            let o_mask = mask_of(4, o_cells);
            Example {
                scene,
                query: Query { subject: Some(s), predicate: p, object: Some(o) },
                s_entity: 0,
                o_entity: 1,
                s_target: s_mask.to_tensor(),
                o_target: o_mask.to_tensor(),
                s_mask,
                o_mask,
                ambiguous: amb,
            }
        };
        let examples = vec![
            mk(0, 0, 0, 1, &[1, 2], &[9], false),
            mk(0, 1, 1, 2, &[9], &[4, 8], true),
            mk(1, 2, 2, 0, &[3], &[12], true),
        ];
        let data = SplitData { features, examples };
        (g, data, vec!["s0".to_string(), "s1".to_string()])
    }

    #[test]
    fn evaluate_aggregates_match_a_naive_recompute() {
        let (g, data, ids) = tiny_eval_setup();
        let rep = evaluate(&g, &data, &ids, 0.5, MaskMode::None).unwrap();
        assert_eq!(rep.records.len(), 3);
        let n = rep.records.len() as f64;
        let s_iou: f64 = rep.records.iter().map(|r| r.s_iou).sum::<f64>() / n;
        let o_kl: f64 = rep.records.iter().map(|r| r.o_kl).sum::<f64>() / n;
        assert_eq!(rep.overall.n, 3);
        assert_eq!(rep.overall.s_iou, s_iou);
        assert_eq!(rep.overall.o_kl, o_kl);
        // Ambiguous subset = records 1 and 2.
        let amb: Vec<&QueryRecord> = rep.records.iter().filter(|r| r.ambiguous).collect();
        assert_eq!(rep.ambiguous.n, 2);
        assert_eq!(rep.ambiguous.o_iou, (amb[0].o_iou + amb[1].o_iou) / 2.0);
        // Per-predicate rows carry exactly one record each here.
        for (p, a) in &rep.by_predicate {
            let rows: Vec<&QueryRecord> =
                rep.records.iter().filter(|r| &r.predicate == p).collect();
            assert_eq!(a.n, rows.len());
            if a.n == 1 {
                assert_eq!(a.s_iou, rows[0].s_iou);
            }
        }
        // Entity row "a": subject of record 0, object of record 2.
        let a_row = &rep.by_entity.iter().find(|(c, _)| c == "a").unwrap().1;
        assert_eq!(a_row.n, 2);
        assert_eq!(a_row.s_iou, rep.records[0].s_iou);
        assert_eq!(a_row.o_iou, rep.records[2].o_iou);
    }

    #[test]
    fn evaluate_is_order_invariant_up_to_record_order() {
        let (g, data, ids) = tiny_eval_setup();
        let rep1 = evaluate(&g, &data, &ids, 0.5, MaskMode::None).unwrap();
        let mut data2 = data.clone();
        data2.examples.reverse();
        let rep2 = evaluate(&g, &data2, &ids, 0.5, MaskMode::None).unwrap();
        assert_eq!(rep1.overall.n, rep2.overall.n);
        // Same three records, so the sums agree to the last bit only if
        // summation order is irrelevant; means must agree to f64 noise.
        assert!((rep1.overall.s_iou - rep2.overall.s_iou).abs() < 1e-15);
        assert!((rep1.ambiguous.o_kl - rep2.ambiguous.o_kl).abs() < 1e-15);
        for (r1, r2) in rep1.by_predicate.iter().zip(&rep2.by_predicate) {
            assert_eq!(r1.0, r2.0);
            assert_eq!(r1.1.n, r2.1.n);
        }
    }

    #[test]
    fn evaluate_applies_the_mask_at_inference_only() {
        let (g, data, ids) = tiny_eval_setup();
        let plain = evaluate(&g, &data, &ids, 0.5, MaskMode::None).unwrap();
        let masked = evaluate(&g, &data, &ids, 0.5, MaskMode::Subject).unwrap();
        // Records still carry the true subject names...
        assert_eq!(plain.records[0].subject, masked.records[0].subject);
        // ...but the maps came from the unknown-subject embedding, so the
        // scores differ somewhere.
        assert!(
            plain
                .records
                .iter()
                .zip(&masked.records)
                .any(|(a, b)| a.s_iou != b.s_iou || a.s_kl != b.s_kl),
            "masking changed nothing"
        );
    }

    #[test]
    fn evaluate_rejects_misaligned_scene_ids() {
        let (g, data, _) = tiny_eval_setup();
        assert!(evaluate(&g, &data, &["only-one".to_string()], 0.5, MaskMode::None).is_err());
    }

    #[test]
    fn csv_renderers_format_to_six_decimals() {
        let (g, data, ids) = tiny_eval_setup();
        let rep = evaluate(&g, &data, &ids, 0.5, MaskMode::None).unwrap();
        let metrics = render_metrics_csv(&rep);
        let mut lines = metrics.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scene,subject,predicate,object,ambiguous,s_iou,o_iou,s_kl,o_kl"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("s0,a,left,b,false,"), "{first}");
        let fields: Vec<&str> = first.split(',').collect();
        assert_eq!(fields.len(), 9);
        for f in &fields[5..] {
            let (_, frac) = f.split_once('.').expect("decimal point");
            assert_eq!(frac.len(), 6, "field {f}");
        }
        let pred = render_predicate_csv(&rep);
        let rows: Vec<&str> = pred.lines().collect();
        assert_eq!(rows[0], "category,n,s_iou,o_iou,s_kl,o_kl");
        assert!(rows[1].starts_with("_overall,3,"));
        assert!(rows[2].starts_with("_ambiguous,2,"));
        assert!(rows[3].starts_with("left,"));
        let ent = render_entity_csv(&rep);
        assert!(ent.lines().nth(1).unwrap().starts_with("a,2,"), "{ent}");
    }

    #[test]
    fn report_on_an_ssas_model_runs_end_to_end() {
        // Smoke: the evaluator works with the main model, whose inference
        // path differs (rollout, not fusion).
        let vocab = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let cfg = SsasConfig {
            grid: 4,
            channels: 3,
            stages: 2,
            kernel: 3,
            hidden: 4,
            iterations: 1,
            supervise_intermediate: false,
        };
        let mut rng = rng_from(21);
        let model = SsasModel::new(cfg, vocab, &mut rng).unwrap();
        let g = Grounder::oracle(Net::Ssas(model));
        let (_, data, ids) = tiny_eval_setup();
        let maps = collect_maps(&g, &data, MaskMode::None).unwrap();
        let tau = select_tau(&maps).unwrap();
        let rep = evaluate(&g, &data, &ids, tau, MaskMode::None).unwrap();
        assert_eq!(rep.records.len(), 3);
        assert!(rep.overall.s_kl.is_finite());
    }
}

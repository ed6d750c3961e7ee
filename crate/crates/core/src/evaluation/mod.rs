//! Detection scoring, Deauville response classification and agreement measures.

mod report;
mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lesions::LesionSet;
use crate::volgrid::check_same_grid;

pub use report::{
    build_report, evaluate_patient, fmt_ci, group_by_eval, group_key, CORRELATED_METRICS, BinaryAgreement, CorrelationRow, CriterionRow,
    DsAgreement, EvalConfig, EvalReport, GroupKey, MetricPair, PatientRecord, SegmentationSummary,
    REPORT_SCHEMA_VERSION,
};
pub use stats::{
    bootstrap_ci, bootstrap_values, pearson, percentile, ranks, resample_indices, spearman, superiority_test,
    BootstrapCi, Superiority, SUPERIORITY_LEVEL,
};

/// Relative tolerance for SUVmax equality.
pub const SUVMAX_MATCH_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionCriterion {
    /// Any voxel overlap with a true lesion.
    Overlap,
    /// Overlap, and the predicted lesion's SUVmax equals the true lesion's.
    SuvmaxMatch,
    /// One-to-one pairing with Dice above 0.5.
    DiceAbove50,
}

impl DetectionCriterion {
    pub const ALL: [DetectionCriterion; 3] = [
        DetectionCriterion::Overlap,
        DetectionCriterion::SuvmaxMatch,
        DetectionCriterion::DiceAbove50,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectionCriterion::Overlap => "overlap",
            DetectionCriterion::SuvmaxMatch => "suvmax",
            DetectionCriterion::DiceAbove50 => "dice50",
        }
    }

    pub fn parse(s: &str) -> Option<DetectionCriterion> {
        DetectionCriterion::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Lesion-level detection counts.
///
/// `tp` and `fp` count predicted lesions; `tp_gt` and `fn_` count true
/// lesions. Precision is `tp / (tp + fp)`, recall `tp_gt / (tp_gt + fn)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp_gt: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl DetectionCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp_gt, self.tp_gt + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&self, o: &DetectionCounts) -> DetectionCounts {
        DetectionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tp_gt: self.tp_gt + o.tp_gt,
        }
    }

    pub fn sum<'a>(it: impl IntoIterator<Item = &'a DetectionCounts>) -> DetectionCounts {
        it.into_iter().fold(DetectionCounts::default(), |a, c| a.add(c))
    }
}

fn suvmax_matches(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= SUVMAX_MATCH_RTOL * b.abs(),
        _ => false,
    }
}

/// Scores predicted lesions against ground truth.
///
/// With `include_equivocal = false`, equivocal true lesions are never false
/// negatives and predictions overlapping only equivocal lesions are left out
/// of every count. With `true`, equivocal lesions count like any other.
pub fn score_detection(
    pred: &LesionSet,
    gt: &LesionSet,
    criterion: DetectionCriterion,
    include_equivocal: bool,
) -> Result<DetectionCounts> {
    check_same_grid(&pred.grid, &gt.grid, "score_detection")?;
    if criterion == DetectionCriterion::SuvmaxMatch
        && (pred.lesions.iter().chain(&gt.lesions)).any(|l| l.suv.is_none())
    {
        return Err(invalid("SUVmax matching needs lesions extracted with a PET volume"));
    }
    let counted = |g: usize| include_equivocal || !gt.lesions[g].equivocal;

    // gt lesion position per voxel, +1
    let mut owner = vec![0u32; gt.grid.len()];
    for (k, l) in gt.lesions.iter().enumerate() {
        for &v in &l.voxels {
            owner[v] = k as u32 + 1;
        }
    }
    // overlapped gt lesions and shared voxel counts per prediction
    let mut touches: Vec<Vec<(usize, usize)>> = Vec::with_capacity(pred.len());
    for p in &pred.lesions {
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for &v in &p.voxels {
            let o = owner[v];
            if o > 0 {
                let g = o as usize - 1;
                match hits.iter_mut().find(|h| h.0 == g) {
                    Some(h) => h.1 += 1,
                    None => hits.push((g, 1)),
                }
            }
        }
        hits.sort_unstable();
        touches.push(hits);
    }

    let n_gt = gt.len();
    let mut gt_hit = vec![false; n_gt];
    let mut counts = DetectionCounts::default();
    let mut scored: Vec<usize> = Vec::new();
    for (pi, hits) in touches.iter().enumerate() {
        if !hits.is_empty() && hits.iter().all(|h| !counted(h.0)) {
            continue;
        }
        scored.push(pi);
    }

    match criterion {
        DetectionCriterion::Overlap | DetectionCriterion::SuvmaxMatch => {
            for &pi in &scored {
                let mut ok = false;
                for &(g, _) in touches[pi].iter().filter(|h| counted(h.0)) {
                    let good = criterion == DetectionCriterion::Overlap
                        || suvmax_matches(pred.lesions[pi].suvmax(), gt.lesions[g].suvmax());
                    if good {
                        ok = true;
                        gt_hit[g] = true;
                    }
                }
                if ok {
                    counts.tp += 1;
                } else {
                    counts.fp += 1;
                }
            }
        }
        DetectionCriterion::DiceAbove50 => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for &pi in &scored {
                let np = pred.lesions[pi].voxels.len();
                for &(g, shared) in touches[pi].iter().filter(|h| counted(h.0)) {
                    let d = 2.0 * shared as f64 / (np + gt.lesions[g].voxels.len()) as f64;
                    if d > 0.5 {
                        pairs.push((d, pi, g));
                    }
                }
            }
            // ties broken by position in space, not by list order
            let first = |ls: &LesionSet, k: usize| ls.lesions[k].voxels.first().copied();
            pairs.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(first(pred, a.1).cmp(&first(pred, b.1)))
                    .then(first(gt, a.2).cmp(&first(gt, b.2)))
            });
            let mut pred_used = vec![false; pred.len()];
            for (_, pi, g) in pairs {
                if !pred_used[pi] && !gt_hit[g] {
                    pred_used[pi] = true;
                    gt_hit[g] = true;
                }
            }
            for &pi in &scored {
                if pred_used[pi] {
                    counts.tp += 1;
                } else {
                    counts.fp += 1;
                }
            }
        }
    }
    for g in 0..n_gt {
        if counted(g) {
            if gt_hit[g] {
                counts.tp_gt += 1;
            } else {
                counts.fn_ += 1;
            }
        }
    }
    Ok(counts)
}

/// qPET boundaries between consecutive Deauville scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpetThresholds {
    pub t12: f64,
    pub t23: f64,
    pub t34: f64,
    pub t45: f64,
}

impl Default for QpetThresholds {
    fn default() -> Self {
        QpetThresholds {
            t12: 0.95,
            t23: 1.3,
            t34: 2.0,
            t45: 3.0,
        }
    }
}

impl QpetThresholds {
    pub fn new(t12: f64, t23: f64, t34: f64, t45: f64) -> Result<QpetThresholds> {
        let t = QpetThresholds { t12, t23, t34, t45 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.t12, self.t23, self.t34, self.t45];
        if v[0] > 0.0 && v.windows(2).all(|w| w[0] < w[1]) && v[3].is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("qPET thresholds must be positive and strictly ascending, got {v:?}")))
        }
    }
}

/// Deauville score from qPET; a value on a boundary takes the higher score
/// and a scan without residual lesions (`None`) scores 1.
pub fn qpet_to_ds(q: Option<f64>, th: &QpetThresholds) -> u8 {
    let Some(q) = q else { return 1 };
    if q < th.t12 {
        1
    } else if q < th.t23 {
        2
    } else if q < th.t34 {
        3
    } else if q < th.t45 {
        4
    } else {
        5
    }
}

/// Highest lesion-level score in the set, 1 when no lesion carries one.
pub fn patient_ds(ls: &LesionSet) -> u8 {
    ls.lesions.iter().filter_map(|l| l.lds).max().unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseLabel {
    pub patient_ds: u8,
    /// DS 3-5 versus 1-2.
    pub binary_3plus: bool,
    /// DS 4-5 versus 1-3.
    pub binary_4plus: bool,
}

impl ResponseLabel {
    pub fn from_ds(ds: u8) -> Result<ResponseLabel> {
        if !(1..=5).contains(&ds) {
            return Err(invalid(format!("Deauville score {ds} outside 1..=5")));
        }
        Ok(ResponseLabel {
            patient_ds: ds,
            binary_3plus: ds >= 3,
            binary_4plus: ds >= 4,
        })
    }
}

/// Cohen's kappa for two raters over the same cases. Perfect agreement
/// returns 1 even when chance agreement is also 1.
pub fn cohen_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid(format!(
            "kappa needs two non-empty label lists of equal length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut cats: Vec<T> = a.iter().chain(b).cloned().collect();
    cats.sort();
    cats.dedup();
    let n = a.len() as f64;
    let idx = |x: &T| cats.binary_search(x).expect("category collected");
    let mut ma = vec![0f64; cats.len()];
    let mut mb = vec![0f64; cats.len()];
    let mut agree = 0f64;
    for (x, y) in a.iter().zip(b) {
        ma[idx(x)] += 1.0;
        mb[idx(y)] += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let po = agree / n;
    let pe: f64 = ma.iter().zip(&mb).map(|(x, y)| x * y).sum::<f64>() / (n * n);
    if pe >= 1.0 {
        return Ok(if po >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

/// F1 on the positive class; 1 when neither list has a positive.
pub fn binary_f1(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(invalid("binary_f1 needs lists of equal length"));
    }
    let (mut tp, mut fp, mut fnc) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnc += 1,
            _ => {}
        }
    }
    let d = 2 * tp + fp + fnc;
    Ok(if d == 0 { 1.0 } else { 2.0 * tp as f64 / d as f64 })
}

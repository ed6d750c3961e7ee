//! Per-patient evaluation records and cohort reports with bootstrap intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_ci, spearman, BootstrapCi};
use super::{
    binary_f1, cohen_kappa, patient_ds, qpet_to_ds, score_detection, DetectionCounts, DetectionCriterion,
    QpetThresholds,
};
use crate::error::{invalid, Result};
use crate::lesions::{dice, fnv, fpv, LesionSet, Mask};
use crate::phantom::PatientInfo;
use crate::quant::{baseline_metrics, interim_metrics, BaselineMetrics, DmaxMode, InterimMetrics};
use crate::volgrid::Volume3D;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub include_equivocal: bool,
    pub n_trials: usize,
    pub seed: u64,
    pub thresholds: QpetThresholds,
    pub dmax_mode: DmaxMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            include_equivocal: false,
            n_trials: 10_000,
            seed: 0,
            thresholds: QpetThresholds::default(),
            dmax_mode: DmaxMode::Centroid,
        }
    }
}

/// Everything the cohort report needs from one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub info: PatientInfo,
    /// Interim detection counts per criterion, in [`DetectionCriterion::ALL`] order.
    pub detection: [DetectionCounts; 3],
    pub dice_pet1: f64,
    pub dice_pet2: f64,
    pub fpv_ml_pet2: f64,
    pub fnv_ml_pet2: f64,
    pub baseline_pred: BaselineMetrics,
    pub baseline_gt: BaselineMetrics,
    pub interim_pred: InterimMetrics,
    pub interim_gt: InterimMetrics,
    pub ds_pred: u8,
    pub ds_gt: u8,
}

impl PatientRecord {
    pub fn counts(&self, c: DetectionCriterion) -> &DetectionCounts {
        &self.detection[c as usize]
    }
}

/// Scores one patient. Predicted lesion sets must carry SUV statistics from
/// their own time point. Ground-truth interim metrics and the reference
/// Deauville score leave equivocal lesions out.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_patient(
    patient_id: &str,
    info: &PatientInfo,
    pred1: &LesionSet,
    pred2: &LesionSet,
    gt1: &LesionSet,
    gt2: &LesionSet,
    pet2: &Volume3D,
    liver: &Mask,
    spleen: &Mask,
    cfg: &EvalConfig,
) -> Result<PatientRecord> {
    let mut detection = [DetectionCounts::default(); 3];
    for c in DetectionCriterion::ALL {
        detection[c as usize] = score_detection(pred2, gt2, c, cfg.include_equivocal)?;
    }
    let (m1p, m1g) = (pred1.mask(), gt1.mask());
    let (m2p, m2g) = (pred2.mask(), gt2.mask());
    let baseline_pred = baseline_metrics(pred1, Some(spleen), cfg.dmax_mode)?;
    let baseline_gt = baseline_metrics(gt1, Some(spleen), cfg.dmax_mode)?;
    let interim_pred = interim_metrics(pred2, liver, pet2, baseline_pred.suvmax)?;
    let interim_gt = interim_metrics(gt2, liver, pet2, baseline_gt.suvmax)?;
    Ok(PatientRecord {
        patient_id: patient_id.to_string(),
        info: info.clone(),
        detection,
        dice_pet1: dice(&m1p, &m1g)?,
        dice_pet2: dice(&m2p, &m2g)?,
        fpv_ml_pet2: fpv(&m2p, &m2g)?,
        fnv_ml_pet2: fnv(&m2p, &m2g)?,
        ds_pred: qpet_to_ds(interim_pred.qpet, &cfg.thresholds),
        ds_gt: patient_ds(&gt2.non_equivocal()),
        baseline_pred,
        baseline_gt,
        interim_pred,
        interim_gt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub criterion: DetectionCriterion,
    pub counts: DetectionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_ci: BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub dice_pet1: BootstrapCi,
    pub dice_pet2: BootstrapCi,
    pub fpv_ml_pet2: BootstrapCi,
    pub fnv_ml_pet2: BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub rho: Option<f64>,
    pub ci: BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryAgreement {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub f1: BootstrapCi,
    pub kappa: BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsAgreement {
    /// `confusion[gt - 1][pred - 1]`.
    pub confusion: [[usize; 5]; 5],
    pub kappa: BootstrapCi,
    pub binary_3plus: BinaryAgreement,
    pub binary_4plus: BinaryAgreement,
}

/// Predicted and reference value of one metric, absent values read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub pred: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n_patients: usize,
    pub config: EvalConfig,
    pub detection: Vec<CriterionRow>,
    pub segmentation: SegmentationSummary,
    pub correlations: Vec<CorrelationRow>,
    pub ds_agreement: DsAgreement,
    pub patients: Vec<PatientRecord>,
}

type MetricFn = fn(&PatientRecord) -> MetricPair;

fn pair(pred: Option<f64>, gt: Option<f64>) -> MetricPair {
    MetricPair {
        pred: pred.unwrap_or(0.0),
        gt: gt.unwrap_or(0.0),
    }
}

/// Metrics correlated between prediction and reference.
pub const CORRELATED_METRICS: [(&str, MetricFn); 10] = [
    ("baseline_mtv_ml", |r| pair(Some(r.baseline_pred.mtv_ml), Some(r.baseline_gt.mtv_ml))),
    ("baseline_tlg", |r| pair(Some(r.baseline_pred.tlg_ml_suv), Some(r.baseline_gt.tlg_ml_suv))),
    ("baseline_suvmax", |r| pair(r.baseline_pred.suvmax, r.baseline_gt.suvmax)),
    ("baseline_dmax_mm", |r| pair(r.baseline_pred.dmax_mm, r.baseline_gt.dmax_mm)),
    ("baseline_dspleen_mm", |r| pair(r.baseline_pred.dspleen_mm, r.baseline_gt.dspleen_mm)),
    ("baseline_n_lesions", |r| {
        pair(Some(r.baseline_pred.n_lesions as f64), Some(r.baseline_gt.n_lesions as f64))
    }),
    ("interim_suvmax", |r| pair(Some(r.interim_pred.suvmax), Some(r.interim_gt.suvmax))),
    ("interim_delta_suvmax_pct", |r| {
        pair(r.interim_pred.delta_suvmax_pct, r.interim_gt.delta_suvmax_pct)
    }),
    ("interim_qpet", |r| pair(r.interim_pred.qpet, r.interim_gt.qpet)),
    ("interim_n_residual", |r| {
        pair(Some(r.interim_pred.n_residual as f64), Some(r.interim_gt.n_residual as f64))
    }),
];

fn mean_of(records: &[PatientRecord], idx: &[usize], f: impl Fn(&PatientRecord) -> f64) -> Option<f64> {
    Some(idx.iter().map(|&i| f(&records[i])).sum::<f64>() / idx.len() as f64)
}

fn binary_agreement(records: &[PatientRecord], cut: u8, cfg: &EvalConfig) -> Result<BinaryAgreement> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        match (r.ds_pred >= cut, r.ds_gt >= cut) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let sides = |idx: &[usize]| -> (Vec<bool>, Vec<bool>) {
        idx.iter()
            .map(|&i| (records[i].ds_pred >= cut, records[i].ds_gt >= cut))
            .unzip()
    };
    let n = records.len();
    let f1 = bootstrap_ci(
        n,
        |idx| {
            let (p, g) = sides(idx);
            binary_f1(&p, &g).ok()
        },
        cfg.n_trials,
        cfg.seed,
    )?;
    let kappa = bootstrap_ci(
        n,
        |idx| {
            let (p, g) = sides(idx);
            cohen_kappa(&p, &g).ok()
        },
        cfg.n_trials,
        cfg.seed,
    )?;
    Ok(BinaryAgreement {
        tp,
        fp,
        fn_,
        tn,
        f1,
        kappa,
    })
}

/// Cohort report: pooled detection counts, segmentation overlap, metric
/// correlations and Deauville agreement, each with a patient-level bootstrap
/// interval. Every interval uses the same seed, so trials are paired.
pub fn build_report(records: &[PatientRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(invalid("report needs at least one patient"));
    }
    cfg.thresholds.validate()?;
    let n = records.len();
    let ci = |f: &(dyn Fn(&[usize]) -> Option<f64> + Sync)| bootstrap_ci(n, f, cfg.n_trials, cfg.seed);

    let mut detection = Vec::new();
    for c in DetectionCriterion::ALL {
        let counts = DetectionCounts::sum(records.iter().map(|r| r.counts(c)));
        let f1_ci = ci(&|idx| Some(DetectionCounts::sum(idx.iter().map(|&i| records[i].counts(c))).f1()))?;
        detection.push(CriterionRow {
            criterion: c,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            f1_ci,
        });
    }

    let segmentation = SegmentationSummary {
        dice_pet1: ci(&|idx| mean_of(records, idx, |r| r.dice_pet1))?,
        dice_pet2: ci(&|idx| mean_of(records, idx, |r| r.dice_pet2))?,
        fpv_ml_pet2: ci(&|idx| mean_of(records, idx, |r| r.fpv_ml_pet2))?,
        fnv_ml_pet2: ci(&|idx| mean_of(records, idx, |r| r.fnv_ml_pet2))?,
    };

    let mut correlations = Vec::new();
    for (name, f) in CORRELATED_METRICS {
        let pairs: Vec<MetricPair> = records.iter().map(f).collect();
        let rho_of = |idx: &[usize]| -> Option<f64> {
            let x: Vec<f64> = idx.iter().map(|&i| pairs[i].pred).collect();
            let y: Vec<f64> = idx.iter().map(|&i| pairs[i].gt).collect();
            spearman(&x, &y).ok().flatten()
        };
        let all: Vec<usize> = (0..n).collect();
        correlations.push(CorrelationRow {
            metric: name.to_string(),
            rho: rho_of(&all),
            ci: ci(&rho_of)?,
        });
    }

    let mut confusion = [[0usize; 5]; 5];
    for r in records {
        confusion[r.ds_gt as usize - 1][r.ds_pred as usize - 1] += 1;
    }
    let kappa = ci(&|idx| {
        let p: Vec<u8> = idx.iter().map(|&i| records[i].ds_pred).collect();
        let g: Vec<u8> = idx.iter().map(|&i| records[i].ds_gt).collect();
        cohen_kappa(&p, &g).ok()
    })?;
    let ds_agreement = DsAgreement {
        confusion,
        kappa,
        binary_3plus: binary_agreement(records, 3, cfg)?,
        binary_4plus: binary_agreement(records, 4, cfg)?,
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_patients: n,
        config: cfg.clone(),
        detection,
        segmentation,
        correlations,
        ds_agreement,
        patients: records.to_vec(),
    })
}

/// Covariate used to stratify a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Age,
    Sex,
    Weight,
    Dose,
    Scanner,
}

impl GroupKey {
    pub fn parse(s: &str) -> Option<GroupKey> {
        match s {
            "age" => Some(GroupKey::Age),
            "sex" => Some(GroupKey::Sex),
            "weight" => Some(GroupKey::Weight),
            "dose" => Some(GroupKey::Dose),
            "scanner" => Some(GroupKey::Scanner),
            _ => None,
        }
    }
}

/// Group label of a patient: age ≤ 15 y, weight ≤ 60 kg and dose ≤ 5.5 MBq/kg
/// split the continuous covariates.
pub fn group_key(info: &PatientInfo, key: GroupKey) -> String {
    match key {
        GroupKey::Age => if info.age_years <= 15.0 { "age<=15" } else { "age>15" }.to_string(),
        GroupKey::Sex => format!("sex={:?}", info.sex),
        GroupKey::Weight => if info.weight_kg <= 60.0 { "weight<=60kg" } else { "weight>60kg" }.to_string(),
        GroupKey::Dose => if info.dose_mbq_per_kg <= 5.5 {
            "dose<=5.5MBq/kg"
        } else {
            "dose>5.5MBq/kg"
        }
        .to_string(),
        GroupKey::Scanner => format!("scanner={}", info.scanner),
    }
}

/// One report per group, groups in lexical order.
pub fn group_by_eval(records: &[PatientRecord], key: GroupKey, cfg: &EvalConfig) -> Result<Vec<(String, EvalReport)>> {
    let mut groups: BTreeMap<String, Vec<PatientRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_key(&r.info, key)).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, rs)| Ok((k, build_report(&rs, cfg)?)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// `mean [lo, hi]` with six decimals, `NA` where undefined.
pub fn fmt_ci(ci: &BootstrapCi) -> String {
    format!("{} [{}, {}]", opt(ci.estimate), opt(ci.lo), opt(ci.hi))
}

impl EvalReport {
    pub fn detection_csv(&self) -> String {
        let mut s = String::from("criterion,tp,fp,fn,tp_gt,precision,recall,f1,f1_lo,f1_hi\n");
        for r in &self.detection {
            let c = &r.counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{},{}",
                r.criterion.name(),
                c.tp,
                c.fp,
                c.fn_,
                c.tp_gt,
                r.precision,
                r.recall,
                r.f1,
                opt(r.f1_ci.lo),
                opt(r.f1_ci.hi)
            );
        }
        s
    }

    pub fn correlations_csv(&self) -> String {
        let mut s = String::from("metric,rho,lo,hi,n_valid\n");
        for r in &self.correlations {
            let _ = writeln!(s, "{},{},{},{},{}", r.metric, opt(r.rho), opt(r.ci.lo), opt(r.ci.hi), r.ci.n_valid);
        }
        s
    }

    pub fn ds_csv(&self) -> String {
        let a = &self.ds_agreement;
        let mut s = String::from("measure,estimate,lo,hi\n");
        let mut row = |name: &str, ci: &BootstrapCi| {
            let _ = writeln!(s, "{name},{},{},{}", opt(ci.estimate), opt(ci.lo), opt(ci.hi));
        };
        row("kappa_ds", &a.kappa);
        row("f1_ds3plus", &a.binary_3plus.f1);
        row("kappa_ds3plus", &a.binary_3plus.kappa);
        row("f1_ds4plus", &a.binary_4plus.f1);
        row("kappa_ds4plus", &a.binary_4plus.kappa);
        s.push_str("\ngt\\pred,1,2,3,4,5\n");
        for (g, r) in a.confusion.iter().enumerate() {
            let cells: Vec<String> = r.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{},{}", g + 1, cells.join(","));
        }
        s
    }

    pub fn patients_csv(&self) -> String {
        let mut s = String::from(
            "patient_id,tp,fp,fn,dice_pet1,dice_pet2,fpv_ml_pet2,fnv_ml_pet2,qpet_pred,qpet_gt,ds_pred,ds_gt\n",
        );
        for r in &self.patients {
            let c = r.counts(DetectionCriterion::Overlap);
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
                r.patient_id,
                c.tp,
                c.fp,
                c.fn_,
                r.dice_pet1,
                r.dice_pet2,
                r.fpv_ml_pet2,
                r.fnv_ml_pet2,
                opt(r.interim_pred.qpet),
                opt(r.interim_gt.qpet),
                r.ds_pred,
                r.ds_gt
            );
        }
        s
    }

    /// Plain-text summary of the cohort aggregates.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "patients: {}", self.n_patients);
        let _ = writeln!(
            s,
            "equivocal lesions: {}",
            if self.config.include_equivocal { "included" } else { "excluded" }
        );
        for r in &self.detection {
            let _ = writeln!(
                s,
                "detection {:<8} precision {:.3} recall {:.3} F1 {}",
                r.criterion.name(),
                r.precision,
                r.recall,
                fmt_ci(&r.f1_ci)
            );
        }
        let seg = &self.segmentation;
        let _ = writeln!(s, "dice pet1 {}", fmt_ci(&seg.dice_pet1));
        let _ = writeln!(s, "dice pet2 {}", fmt_ci(&seg.dice_pet2));
        let _ = writeln!(s, "fpv pet2 ml {}", fmt_ci(&seg.fpv_ml_pet2));
        let _ = writeln!(s, "fnv pet2 ml {}", fmt_ci(&seg.fnv_ml_pet2));
        for r in &self.correlations {
            let _ = writeln!(s, "rho {:<26} {}", r.metric, fmt_ci(&r.ci));
        }
        let a = &self.ds_agreement;
        let _ = writeln!(s, "kappa DS {}", fmt_ci(&a.kappa));
        let _ = writeln!(s, "F1 DS3+ {}", fmt_ci(&a.binary_3plus.f1));
        let _ = writeln!(s, "F1 DS4+ {}", fmt_ci(&a.binary_4plus.f1));
        s
    }
}

//! Phantom cohort → optional training → segmentation → metrics → report.

use std::path::Path;

use laspet_core::evaluation::{evaluate_patient, EvalConfig, GroupKey, PatientRecord};
use laspet_core::phantom::{generate, inject_misregistration, PatientStudy, PhantomConfig};
use laspet_core::seed::derive;
use laspet_core::volgrid::write_mvol;
use laspet_neural::checkpoint;
use laspet_neural::train::{train_toy, TrainConfig, TrainOutput};
use laspet_neural::LasNetParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stages, PipelineConfig, SegmenterKind};
use crate::error::{CliError, CliResult, Stage, StageExt};
use crate::manifest::{write_json, ManifestBuilder, DIR_MANIFEST};
use crate::report::ReportDocument;
use crate::segment::{alignment_transform, apply_mpdr, model_based, oracle, rule_based, Prediction};

pub const THREADS_ENV: &str = "LASPET_THREADS";

/// Worker pool sized by `LASPET_THREADS`, or rayon's default when unset.
pub fn worker_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::msg(Stage::Config, format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().stage(Stage::Config)
}

/// Runs `f` over `0..n` on the pool and returns results in index order.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> CliResult<T> + Sync + Send) -> CliResult<Vec<T>> {
    let pool = worker_pool()?;
    pool.install(|| (0..n).into_par_iter().map(f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

/// Patient `k` of the cohort: its own phantom seed, a lesion count varied by
/// `k % 3` when requested, and an optional random PET1 displacement.
pub fn cohort_study(cfg: &PipelineConfig, k: usize) -> CliResult<PatientStudy> {
    let c = &cfg.cohort;
    let extra = if c.vary_lesion_count { k % 3 } else { 0 };
    let pc = PhantomConfig {
        seed: derive(cfg.seed, stages::PHANTOM, k as u64),
        n_baseline_lesions: c.phantom.n_baseline_lesions + extra,
        ..c.phantom.clone()
    };
    let mut s = generate(&pc).stage(Stage::Phantom)?;
    s.patient_id = format!("P{k:03}");
    if c.max_shift_mm > 0.0 || c.max_rotation_deg > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, stages::MISREGISTRATION, k as u64));
        let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift = [0; 3].map(|_| draw(c.max_shift_mm));
        let rot = [0; 3].map(|_| draw(c.max_rotation_deg));
        s = inject_misregistration(&s, shift, rot).stage(Stage::Phantom)?;
    }
    Ok(s)
}

/// Training studies, independent of the evaluation cohort.
pub fn training_studies(cfg: &PipelineConfig) -> CliResult<Vec<PatientStudy>> {
    par_map(cfg.cohort.n_train_studies, |k| {
        let pc = PhantomConfig {
            seed: derive(cfg.seed, stages::TRAIN_PHANTOM, k as u64),
            ..cfg.cohort.phantom.clone()
        };
        generate(&pc).stage(Stage::Phantom)
    })
}

/// Trains the network on [`training_studies`] with the derived training seed.
pub fn train_model(cfg: &PipelineConfig) -> CliResult<TrainOutput> {
    let studies = training_studies(cfg)?;
    let tc = TrainConfig {
        seed: derive(cfg.seed, stages::TRAIN, 0),
        ..cfg.train.clone()
    };
    train_toy(&studies, &cfg.network, &tc).stage(Stage::Train)
}

/// Evaluation settings with the derived bootstrap seed.
pub fn eval_config(cfg: &PipelineConfig) -> EvalConfig {
    EvalConfig {
        seed: derive(cfg.seed, stages::BOOTSTRAP, 0),
        ..cfg.eval.clone()
    }
}

/// Scores one patient against its ground truth.
pub fn patient_record(study: &PatientStudy, pred: &Prediction, cfg: &EvalConfig) -> CliResult<PatientRecord> {
    evaluate_patient(
        &study.patient_id,
        &study.info,
        &pred.pred1,
        &pred.pred2,
        &study.gt1,
        &study.gt2,
        &study.pet2,
        &study.liver(),
        &study.spleen(),
        cfg,
    )
    .stage(Stage::Metrics)
}

/// Segments one study with the configured segmenter, applying MPDR if asked.
pub fn predict(cfg: &PipelineConfig, study: &PatientStudy, model: Option<&LasNetParams>) -> CliResult<Prediction> {
    let needs_t = cfg.mpdr || cfg.segmenter.kind == SegmenterKind::Model;
    let t = if needs_t {
        alignment_transform(study, cfg.alignment, &cfg.registration)?
    } else {
        laspet_core::longitudinal::RigidTransform::identity()
    };
    let pred = match cfg.segmenter.kind {
        SegmenterKind::Oracle => oracle(study),
        SegmenterKind::ThresholdUnion => rule_based(study, cfg.segmenter.roi_margin_vox, cfg.segmenter.min_ml)?,
        SegmenterKind::Model => {
            let params = model.ok_or_else(|| CliError::msg(Stage::Segment, "model segmenter without parameters"))?;
            model_based(params, study, &t, &cfg.infer)?.0
        }
    };
    if cfg.mpdr {
        apply_mpdr(&pred, &t)
    } else {
        Ok(pred)
    }
}

/// Loss trace of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub schema_version: u32,
    pub run_manifest: String,
    pub loss: Vec<f64>,
}

/// Everything a pipeline run produced, besides the files.
pub struct PipelineOutput {
    pub document: ReportDocument,
    pub loss_trace: Option<Vec<f64>>,
}

/// Runs the whole pipeline and writes its artifacts into `out`:
/// `cohort/<id>/` studies, `preds/<id>/pred{1,2}.mvol`, the model and loss
/// trace when trained, `report.json` with its tables, and `run_manifest.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, config_path: Option<&Path>) -> CliResult<PipelineOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut mb = ManifestBuilder::new("pipeline", hash.clone(), Some(cfg.seed));
    if let Some(p) = config_path {
        mb.input(p);
    }
    std::fs::create_dir_all(out).stage(Stage::Config)?;

    let mut loss_trace = None;
    let model = if cfg.segmenter.kind == SegmenterKind::Model {
        match &cfg.segmenter.checkpoint {
            Some(p) => {
                mb.input(p);
                Some(checkpoint::load(p).stage(Stage::Train)?)
            }
            None => {
                let t = train_model(cfg)?;
                let ckpt = out.join("model.lasp");
                checkpoint::save(&t.params, &ckpt).stage(Stage::Train)?;
                let trace = out.join("train_trace.json");
                write_json(
                    &trace,
                    &TrainTrace {
                        schema_version: 1,
                        run_manifest: DIR_MANIFEST.to_string(),
                        loss: t.loss_trace.clone(),
                    },
                    Stage::Train,
                )?;
                mb.output(&ckpt);
                mb.output(&trace);
                loss_trace = Some(t.loss_trace);
                Some(t.params)
            }
        }
    } else {
        None
    };

    let ecfg = eval_config(cfg);
    let records = par_map(cfg.cohort.size, |k| {
        let study = cohort_study(cfg, k)?;
        let sdir = out.join("cohort").join(&study.patient_id);
        study.save(&sdir).stage(Stage::Phantom)?;
        let pred = predict(cfg, &study, model.as_ref())?;
        let pdir = out.join("preds").join(&study.patient_id);
        std::fs::create_dir_all(&pdir).stage(Stage::Segment)?;
        write_mvol(&pred.pred1.label_volume(), pdir.join("pred1.mvol")).stage(Stage::Segment)?;
        write_mvol(&pred.pred2.label_volume(), pdir.join("pred2.mvol")).stage(Stage::Segment)?;
        patient_record(&study, &pred, &ecfg)
    })?;
    mb.output(&out.join("cohort"));
    mb.output(&out.join("preds"));

    let group = cfg.group_by.as_deref().and_then(GroupKey::parse);
    let doc = ReportDocument::build(&records, &ecfg, group, DIR_MANIFEST.to_string(), hash)?;
    let report_path = out.join("report.json");
    doc.write(&report_path)?;
    mb.output(&report_path);
    for p in doc.write_tables(out)? {
        mb.output(&p);
    }
    mb.write(&out.join(DIR_MANIFEST), Stage::Report)?;
    Ok(PipelineOutput {
        document: doc,
        loss_trace,
    })
}

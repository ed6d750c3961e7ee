//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use laspet_core::evaluation::{EvalConfig, GroupKey};
use laspet_core::evaluation::DetectionCriterion;
use laspet_core::lesions::extract_lesions;
use laspet_core::longitudinal::{apply_transform_to, mpdr, propagate_mask, register_rigid, RegistrationConfig, RigidTransform};
use laspet_core::phantom::{generate, inject_misregistration, PatientStudy, PhantomConfig, STUDY_FILES};
use laspet_core::quant::{baseline_metrics, interim_metrics, BaselineMetrics, DmaxMode, InterimMetrics};
use laspet_core::volgrid::{read_mvol, write_mvol};
use laspet_core::volgrid::{crop, foreground_bbox, normalize, pad_to, resample};
use laspet_core::{Interp, Volume3D};
use laspet_neural::checkpoint;
use laspet_neural::infer::InferConfig;
use laspet_neural::train::{train_toy, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{hash_json, Alignment, PipelineConfig, SegmenterKind};
use crate::error::{CliError, CliResult, Stage, StageExt};
use crate::manifest::{file_name, manifest_for_file, write_json, ManifestBuilder, DIR_MANIFEST};
use crate::pipeline::{cohort_study, par_map, patient_record, run_pipeline, training_studies, TrainTrace};
use crate::report::ReportDocument;
use crate::segment::{alignment_transform, model_based, oracle, rule_based, Prediction};

pub const JSON_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "laspet", version, about = "Longitudinal PET/CT phantom pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom studies.
    Phantom(PhantomArgs),
    /// Inspect or convert MVOL volumes.
    #[command(subcommand)]
    Vol(VolCommand),
    /// Segment both time points of a study.
    Segment(SegmentArgs),
    /// Rigidly register two volumes.
    Register(RegisterArgs),
    /// Drop PET2 components without a PET1 counterpart.
    Mpdr(MpdrArgs),
    /// Baseline or interim metrics of a label volume.
    Metrics(MetricsArgs),
    /// Score a cohort of predictions against ground truth.
    Eval(EvalArgs),
    /// Train the network on phantom studies.
    TrainToy(TrainToyArgs),
    /// Sliding-window network inference on a study.
    Infer(InferArgs),
    /// Run phantom generation, segmentation, metrics and evaluation end to end.
    Pipeline(PipelineArgs),
    /// Print a report and write its CSV tables.
    Report(ReportArgs),
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("invalid number {p:?}"))?);
    }
    out.try_into().map_err(|_| "three values".to_string())
}

fn parse_f3(s: &str) -> Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_u3(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v: Vec<&str> = s.split(',').map(str::trim).collect();
    match v.as_slice() {
        [a, b] => Ok((
            a.parse().map_err(|_| format!("invalid number {a:?}"))?,
            b.parse().map_err(|_| format!("invalid number {b:?}"))?,
        )),
        _ => Err(format!("expected two comma-separated values, got {s:?}")),
    }
}

fn read_text(path: &Path, stage: Stage) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::msg(stage, format!("reading {}: {e}", path.display())))
}

fn read_volume(path: &Path, stage: Stage) -> CliResult<Volume3D> {
    read_mvol(path).map_err(|e| CliError::msg(stage, format!("reading {}: {e}", path.display())))
}

fn load_study(dir: &Path, stage: Stage) -> CliResult<PatientStudy> {
    PatientStudy::load(dir).map_err(|e| CliError::msg(stage, format!("loading study {}: {e}", dir.display())))
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub seed: u64,
    /// TOML file with phantom settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of studies; more than one writes `P000`, `P001`, ... subdirectories.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Add `k % 3` baseline lesions to study `k` of a cohort.
    #[arg(long)]
    pub vary_lesion_count: bool,
    /// Shift PET1 by this many mm (x,y,z).
    #[arg(long, value_parser = parse_f3)]
    pub shift_mm: Option<[f64; 3]>,
    /// Rotate PET1 by these Euler angles in degrees (x,y,z).
    #[arg(long, value_parser = parse_f3)]
    pub rotate_deg: Option<[f64; 3]>,
    pub out_dir: PathBuf,
}

pub fn cmd_phantom(a: &PhantomArgs) -> CliResult<()> {
    let mut pc = match &a.config {
        Some(p) => toml::from_str::<PhantomConfig>(&read_text(p, Stage::Config)?).stage(Stage::Config)?,
        None => PhantomConfig::default(),
    };
    pc.validate().stage(Stage::Config)?;
    if a.count == 0 {
        return Err(CliError::msg(Stage::Config, "--count must be at least 1"));
    }
    let settings = serde_json::json!({
        "phantom": pc, "count": a.count, "vary_lesion_count": a.vary_lesion_count,
        "shift_mm": a.shift_mm, "rotate_deg": a.rotate_deg,
    });
    let mut mb = ManifestBuilder::new("phantom", hash_json(&settings), Some(a.seed));
    if let Some(p) = &a.config {
        mb.input(p);
    }
    let moved = |s: PatientStudy| -> CliResult<PatientStudy> {
        if a.shift_mm.is_none() && a.rotate_deg.is_none() {
            return Ok(s);
        }
        inject_misregistration(&s, a.shift_mm.unwrap_or([0.0; 3]), a.rotate_deg.unwrap_or([0.0; 3])).stage(Stage::Phantom)
    };
    if a.count == 1 {
        pc.seed = a.seed;
        let s = moved(generate(&pc).stage(Stage::Phantom)?)?;
        s.save(&a.out_dir).stage(Stage::Phantom)?;
        for f in STUDY_FILES.iter().chain(["manifest.json"].iter()) {
            mb.output(&a.out_dir.join(f));
        }
    } else {
        let mut cfg = PipelineConfig {
            seed: a.seed,
            ..PipelineConfig::default()
        };
        cfg.cohort.phantom = pc;
        cfg.cohort.vary_lesion_count = a.vary_lesion_count;
        let dirs = par_map(a.count, |k| {
            let s = moved(cohort_study(&cfg, k)?)?;
            let d = a.out_dir.join(&s.patient_id);
            s.save(&d).stage(Stage::Phantom)?;
            Ok(d)
        })?;
        for d in &dirs {
            mb.output(d);
        }
    }
    mb.write(&a.out_dir.join(DIR_MANIFEST), Stage::Phantom)?;
    println!("wrote {} stud{} to {}", a.count, if a.count == 1 { "y" } else { "ies" }, a.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------- vol

#[derive(Debug, Subcommand)]
pub enum VolCommand {
    /// Print the header and value range of a volume.
    Info {
        path: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Resample, crop, normalize or pad a volume.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InterpArg {
    Trilinear,
    Nearest,
}

impl From<InterpArg> for Interp {
    fn from(i: InterpArg) -> Interp {
        match i {
            InterpArg::Trilinear => Interp::Trilinear,
            InterpArg::Nearest => Interp::Nearest,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Target spacing in mm (x,y,z).
    #[arg(long, value_parser = parse_f3)]
    pub spacing: Option<[f64; 3]>,
    #[arg(long, value_enum, default_value = "trilinear")]
    pub interp: InterpArg,
    /// Crop to the bounding box of voxels above this SUV.
    #[arg(long)]
    pub crop_suv: Option<f64>,
    /// Clip to lo,hi and rescale to [0, 1].
    #[arg(long, value_parser = parse_pair)]
    pub normalize: Option<(f64, f64)>,
    /// Pad with the background value up to these dimensions (x,y,z).
    #[arg(long, value_parser = parse_u3)]
    pub pad: Option<[usize; 3]>,
}

#[derive(Debug, Serialize)]
struct VolInfo {
    schema_version: u32,
    kind: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    min: f64,
    max: f64,
    mean: f64,
}

fn vol_info(v: &Volume3D) -> VolInfo {
    let vals = v.values();
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &x in vals {
        let x = x as f64;
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x;
    }
    VolInfo {
        schema_version: JSON_SCHEMA_VERSION,
        kind: v.kind().to_string(),
        dims: v.dims(),
        spacing_mm: v.spacing(),
        origin_mm: v.origin(),
        min: lo,
        max: hi,
        mean: sum / vals.len() as f64,
    }
}

pub fn cmd_vol(c: &VolCommand) -> CliResult<()> {
    match c {
        VolCommand::Info { path, json } => {
            let info = vol_info(&read_volume(path, Stage::Volume)?);
            if *json {
                println!("{}", serde_json::to_string_pretty(&info).stage(Stage::Volume)?);
            } else {
                println!("kind     {}", info.kind);
                println!("dims     {} x {} x {}", info.dims[0], info.dims[1], info.dims[2]);
                println!("spacing  {:?} mm", info.spacing_mm);
                println!("origin   {:?} mm", info.origin_mm);
                println!("range    [{}, {}] mean {:.6}", info.min, info.max, info.mean);
            }
            Ok(())
        }
        VolCommand::Convert(a) => {
            let mut v = read_volume(&a.input, Stage::Volume)?;
            if let Some(t) = a.crop_suv {
                v = crop(&v, &foreground_bbox(&v, t)).stage(Stage::Volume)?;
            }
            if let Some(s) = a.spacing {
                v = resample(&v, s, a.interp.into()).stage(Stage::Volume)?;
            }
            if let Some((lo, hi)) = a.normalize {
                v = normalize(&v, lo, hi).stage(Stage::Volume)?;
            }
            if let Some(d) = a.pad {
                let fill = if v.kind() == laspet_core::Kind::Hu { -1000.0 } else { 0.0 };
                v = pad_to(&v, d, fill).stage(Stage::Volume)?;
            }
            write_mvol(&v, &a.output).stage(Stage::Volume)?;
            let settings = serde_json::json!({
                "spacing": a.spacing, "interp": format!("{:?}", a.interp), "crop_suv": a.crop_suv,
                "normalize": a.normalize, "pad": a.pad,
            });
            let mut mb = ManifestBuilder::new("vol convert", hash_json(&settings), None);
            mb.input(&a.input);
            mb.output(&a.output);
            mb.write(&manifest_for_file(&a.output), Stage::Volume)?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- segment / infer

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    ThresholdUnion,
    Model,
    Oracle,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentArg {
    Identity,
    Known,
    Rigid,
}

impl From<AlignmentArg> for Alignment {
    fn from(a: AlignmentArg) -> Alignment {
        match a {
            AlignmentArg::Identity => Alignment::Identity,
            AlignmentArg::Known => Alignment::Known,
            AlignmentArg::Rigid => Alignment::Rigid,
        }
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long, value_enum)]
    pub rule: RuleArg,
    /// Parameters for `--rule model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub min_ml: f64,
    /// Box margin in voxels for `--rule threshold-union`.
    #[arg(long, default_value_t = 2)]
    pub roi_margin: usize,
    #[arg(long, default_value_t = 0.625)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// PET2 → PET1 transform used to align network inputs.
    #[arg(long, value_enum, default_value = "known")]
    pub alignment: AlignmentArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long, default_value_t = 0.625)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    pub min_ml: f64,
    #[arg(long, value_enum, default_value = "known")]
    pub alignment: AlignmentArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn write_prediction(pred: &Prediction, out: &Path, mb: &mut ManifestBuilder) -> CliResult<()> {
    std::fs::create_dir_all(out).stage(Stage::Segment)?;
    for (name, ls) in [("pred1.mvol", &pred.pred1), ("pred2.mvol", &pred.pred2)] {
        let p = out.join(name);
        write_mvol(&ls.label_volume(), &p).stage(Stage::Segment)?;
        mb.output(&p);
    }
    Ok(())
}

fn run_model(
    checkpoint_path: &Path,
    study_dir: &Path,
    alignment: Alignment,
    cfg: &InferConfig,
    out: &Path,
    mb: &mut ManifestBuilder,
) -> CliResult<Prediction> {
    cfg.validate().stage(Stage::Config)?;
    let params = checkpoint::load(checkpoint_path)
        .map_err(|e| CliError::msg(Stage::Segment, format!("loading {}: {e}", checkpoint_path.display())))?;
    let study = load_study(study_dir, Stage::Segment)?;
    let t = alignment_transform(&study, alignment, &RegistrationConfig::default())?;
    let (pred, probs) = model_based(&params, &study, &t, cfg)?;
    write_prediction(&pred, out, mb)?;
    for (name, v) in [("prob1.mvol", &probs.prob1), ("prob2.mvol", &probs.prob2)] {
        let p = out.join(name);
        write_mvol(v, &p).stage(Stage::Segment)?;
        mb.output(&p);
    }
    Ok(pred)
}

pub fn cmd_segment(a: &SegmentArgs) -> CliResult<()> {
    let settings = serde_json::json!({
        "rule": a.rule, "min_ml": a.min_ml, "roi_margin": a.roi_margin,
        "overlap": a.overlap, "threshold": a.threshold, "alignment": a.alignment,
    });
    let mut mb = ManifestBuilder::new("segment", hash_json(&settings), None);
    mb.input(&a.study);
    let pred = match a.rule {
        RuleArg::Model => {
            let ck = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::msg(Stage::Config, "--rule model needs --checkpoint"))?;
            mb.input(ck);
            let cfg = InferConfig {
                overlap: a.overlap,
                threshold: a.threshold,
                min_ml: a.min_ml,
                ..InferConfig::default()
            };
            run_model(ck, &a.study, a.alignment.into(), &cfg, &a.out, &mut mb)?
        }
        RuleArg::ThresholdUnion | RuleArg::Oracle => {
            let study = load_study(&a.study, Stage::Segment)?;
            let pred = if matches!(a.rule, RuleArg::Oracle) {
                oracle(&study)
            } else {
                rule_based(&study, a.roi_margin, a.min_ml)?
            };
            write_prediction(&pred, &a.out, &mut mb)?;
            pred
        }
    };
    mb.write(&a.out.join(DIR_MANIFEST), Stage::Segment)?;
    println!("pet1 lesions {}  pet2 lesions {}", pred.pred1.len(), pred.pred2.len());
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> CliResult<()> {
    let cfg = InferConfig {
        overlap: a.overlap,
        threshold: a.threshold,
        min_ml: a.min_ml,
        ..InferConfig::default()
    };
    let settings = serde_json::json!({ "infer": cfg, "alignment": a.alignment });
    let mut mb = ManifestBuilder::new("infer", hash_json(&settings), None);
    mb.input(&a.checkpoint);
    mb.input(&a.study);
    let pred = run_model(&a.checkpoint, &a.study, a.alignment.into(), &cfg, &a.out, &mut mb)?;
    mb.write(&a.out.join(DIR_MANIFEST), Stage::Segment)?;
    println!("pet1 lesions {}  pet2 lesions {}", pred.pred1.len(), pred.pred2.len());
    Ok(())
}

// ---------------------------------------------------------------- register / mpdr

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// JSON file receiving the fixed → moving transform.
    #[arg(long)]
    pub out_transform: PathBuf,
    /// Also write the moving volume resampled onto the fixed grid.
    #[arg(long)]
    pub resampled: Option<PathBuf>,
}

/// Rigid transform file: row-major rotation then translation, 12 numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    pub schema_version: u32,
    #[serde(default)]
    pub run_manifest: String,
    pub transform: Vec<f64>,
    #[serde(default)]
    pub converged: Option<bool>,
    #[serde(default)]
    pub final_mse: Option<f64>,
}

impl TransformFile {
    pub fn load(path: &Path, stage: Stage) -> CliResult<RigidTransform> {
        let f: TransformFile = serde_json::from_str(&read_text(path, stage)?).stage(stage)?;
        if f.schema_version != JSON_SCHEMA_VERSION {
            return Err(CliError::msg(stage, format!("unsupported transform schema_version {}", f.schema_version)));
        }
        RigidTransform::from_array(&f.transform).stage(stage)
    }
}

pub fn cmd_register(a: &RegisterArgs) -> CliResult<()> {
    let moving = read_volume(&a.moving, Stage::Register)?;
    let fixed = read_volume(&a.fixed, Stage::Register)?;
    let cfg = RegistrationConfig::default();
    let r = register_rigid(&moving, &fixed, &cfg).stage(Stage::Register)?;
    let manifest = manifest_for_file(&a.out_transform);
    let file = TransformFile {
        schema_version: JSON_SCHEMA_VERSION,
        run_manifest: file_name(&manifest),
        transform: r.transform.to_array().to_vec(),
        converged: Some(r.converged),
        final_mse: Some(r.final_mse),
    };
    write_json(&a.out_transform, &file, Stage::Register)?;
    let mut mb = ManifestBuilder::new("register", hash_json(&cfg), None);
    mb.input(&a.moving);
    mb.input(&a.fixed);
    mb.output(&a.out_transform);
    if let Some(p) = &a.resampled {
        let mode = if moving.kind() == laspet_core::Kind::Label { Interp::Nearest } else { Interp::Trilinear };
        let v = apply_transform_to(&moving, &r.transform, mode, fixed.grid()).stage(Stage::Register)?;
        write_mvol(&v, p).stage(Stage::Register)?;
        mb.output(p);
    }
    mb.write(&manifest, Stage::Register)?;
    println!(
        "rotation {:.3} deg  translation {:?} mm  converged {}",
        r.transform.rotation_angle_deg(),
        r.transform.translation,
        r.converged
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct MpdrArgs {
    /// PET1 label volume.
    #[arg(long)]
    pub pred1: PathBuf,
    /// PET2 label volume.
    #[arg(long)]
    pub pred2: PathBuf,
    /// PET2 → PET1 transform; identity when omitted.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_mpdr(a: &MpdrArgs) -> CliResult<()> {
    let p1 = read_volume(&a.pred1, Stage::Mpdr)?;
    let p2 = read_volume(&a.pred2, Stage::Mpdr)?;
    let t = match &a.transform {
        Some(p) => TransformFile::load(p, Stage::Mpdr)?,
        None => RigidTransform::identity(),
    };
    let prior = propagate_mask(&p1, &t, p2.grid()).stage(Stage::Mpdr)?;
    let kept = mpdr(&prior, &p2).stage(Stage::Mpdr)?;
    write_mvol(&kept, &a.out).stage(Stage::Mpdr)?;
    let mut mb = ManifestBuilder::new("mpdr", hash_json(&t.to_array().to_vec()), None);
    mb.input(&a.pred1);
    mb.input(&a.pred2);
    if let Some(p) = &a.transform {
        mb.input(p);
    }
    mb.output(&a.out);
    mb.write(&manifest_for_file(&a.out), Stage::Mpdr)?;
    let count = |v: &Volume3D| v.labels().into_iter().max().unwrap_or(0);
    println!("kept {} of {} components", count(&kept), count(&p2));
    Ok(())
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DmaxArg {
    Centroid,
    Voxel,
}

impl From<DmaxArg> for DmaxMode {
    fn from(d: DmaxArg) -> DmaxMode {
        match d {
            DmaxArg::Centroid => DmaxMode::Centroid,
            DmaxArg::Voxel => DmaxMode::Voxel,
        }
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("time_point").required(true).args(["baseline", "interim"]))]
pub struct MetricsArgs {
    /// Study directory providing PET, liver and spleen volumes.
    #[arg(long)]
    pub study: PathBuf,
    /// Label volume to measure; the study's ground truth when omitted.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub interim: bool,
    /// PET1 labels supplying the baseline SUVmax for ΔSUVmax (interim only);
    /// the study's baseline ground truth when omitted.
    #[arg(long)]
    pub baseline_labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "centroid")]
    pub dmax: DmaxArg,
    #[arg(long)]
    pub json: PathBuf,
}

#[derive(Debug, Serialize)]
struct MetricsFile<M: Serialize> {
    schema_version: u32,
    run_manifest: String,
    patient_id: String,
    time_point: &'static str,
    #[serde(flatten)]
    metrics: M,
}

pub fn cmd_metrics(a: &MetricsArgs) -> CliResult<()> {
    let study = load_study(&a.study, Stage::Metrics)?;
    let lesions = |path: &Option<PathBuf>, pet: &Volume3D, gt: &laspet_core::LesionSet| -> CliResult<laspet_core::LesionSet> {
        match path {
            Some(p) => extract_lesions(&read_volume(p, Stage::Metrics)?, Some(pet)).stage(Stage::Metrics),
            None => Ok(gt.clone()),
        }
    };
    let manifest = manifest_for_file(&a.json);
    let run_manifest = file_name(&manifest);
    let mut mb = ManifestBuilder::new(
        "metrics",
        hash_json(&serde_json::json!({ "baseline": a.baseline, "dmax": a.dmax })),
        None,
    );
    mb.input(&a.study);
    if a.baseline {
        let ls = lesions(&a.labels, &study.pet1, &study.gt1)?;
        let m: BaselineMetrics = baseline_metrics(&ls, Some(&study.spleen()), a.dmax.into()).stage(Stage::Metrics)?;
        let f = MetricsFile {
            schema_version: JSON_SCHEMA_VERSION,
            run_manifest,
            patient_id: study.patient_id.clone(),
            time_point: "baseline",
            metrics: m,
        };
        write_json(&a.json, &f, Stage::Metrics)?;
    } else {
        let ls = lesions(&a.labels, &study.pet2, &study.gt2)?;
        let base = lesions(&a.baseline_labels, &study.pet1, &study.gt1)?;
        let s1 = laspet_core::quant::suvmax(&base);
        let m: InterimMetrics = interim_metrics(&ls, &study.liver(), &study.pet2, s1).stage(Stage::Metrics)?;
        let f = MetricsFile {
            schema_version: JSON_SCHEMA_VERSION,
            run_manifest,
            patient_id: study.patient_id.clone(),
            time_point: "interim",
            metrics: m,
        };
        write_json(&a.json, &f, Stage::Metrics)?;
    }
    for p in [&a.labels, &a.baseline_labels].into_iter().flatten() {
        mb.input(p);
    }
    mb.output(&a.json);
    mb.write(&manifest, Stage::Metrics)?;
    Ok(())
}

// ---------------------------------------------------------------- eval / report

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Overlap,
    Suvmax,
    Dice50,
}

impl From<CriterionArg> for DetectionCriterion {
    fn from(c: CriterionArg) -> DetectionCriterion {
        match c {
            CriterionArg::Overlap => DetectionCriterion::Overlap,
            CriterionArg::Suvmax => DetectionCriterion::SuvmaxMatch,
            CriterionArg::Dice50 => DetectionCriterion::DiceAbove50,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EquivocalArg {
    Include,
    Exclude,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of study subdirectories.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Directory with `<patient_id>/pred1.mvol` and `pred2.mvol`.
    #[arg(long)]
    pub preds: PathBuf,
    /// Criterion printed as the headline; the report carries all three.
    #[arg(long, value_enum, default_value = "overlap")]
    pub criterion: CriterionArg,
    #[arg(long, value_enum, default_value = "exclude")]
    pub equivocal: EquivocalArg,
    /// Bootstrap trials per interval.
    #[arg(long, default_value_t = 10_000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "centroid")]
    pub dmax: DmaxArg,
    /// Extra per-group reports: sex, age, weight, dose or scanner.
    #[arg(long)]
    pub group_by: Option<String>,
    #[arg(long)]
    pub json: PathBuf,
}

/// Study directories under `dir`, sorted by name.
pub fn study_dirs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::msg(Stage::Eval, format!("reading {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let group = match &a.group_by {
        Some(k) => Some(GroupKey::parse(k).ok_or_else(|| CliError::msg(Stage::Config, format!("unknown group key {k}")))?),
        None => None,
    };
    let cfg = EvalConfig {
        include_equivocal: matches!(a.equivocal, EquivocalArg::Include),
        n_trials: a.bootstrap,
        seed: a.seed,
        dmax_mode: a.dmax.into(),
        ..EvalConfig::default()
    };
    let dirs = study_dirs(&a.cohort)?;
    if dirs.is_empty() {
        return Err(CliError::msg(Stage::Eval, format!("no studies under {}", a.cohort.display())));
    }
    let records = par_map(dirs.len(), |k| {
        let study = load_study(&dirs[k], Stage::Eval)?;
        let pd = a.preds.join(&study.patient_id);
        let l1 = read_volume(&pd.join("pred1.mvol"), Stage::Eval)?;
        let l2 = read_volume(&pd.join("pred2.mvol"), Stage::Eval)?;
        let pred = Prediction {
            pred1: extract_lesions(&l1, Some(&study.pet1)).stage(Stage::Eval)?,
            pred2: extract_lesions(&l2, Some(&study.pet2)).stage(Stage::Eval)?,
        };
        patient_record(&study, &pred, &cfg)
    })?;
    let manifest = manifest_for_file(&a.json);
    let hash = hash_json(&serde_json::json!({ "eval": cfg, "group_by": a.group_by }));
    let doc = ReportDocument::build(&records, &cfg, group, file_name(&manifest), hash.clone())?;
    doc.write(&a.json)?;
    let mut mb = ManifestBuilder::new("eval", hash, Some(a.seed));
    mb.input(&a.cohort);
    mb.input(&a.preds);
    mb.output(&a.json);
    mb.write(&manifest, Stage::Eval)?;
    let c: DetectionCriterion = a.criterion.into();
    if let Some(row) = doc.report.detection.iter().find(|r| r.criterion == c) {
        println!(
            "{} patients  {}: precision {:.3} recall {:.3} F1 {}",
            doc.report.n_patients,
            c.name(),
            row.precision,
            row.recall,
            laspet_core::evaluation::fmt_ci(&row.f1_ci)
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub report: PathBuf,
    /// Where to write the CSV tables; the report's directory by default.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let doc = ReportDocument::load(&a.report)?;
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.report.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let written = doc.write_tables(&dir)?;
    let mut mb = ManifestBuilder::new("report", doc.config_hash.clone(), None);
    mb.input(&a.report);
    for p in &written {
        mb.output(p);
    }
    mb.write(&dir.join("report.run.json"), Stage::Report)?;
    print!("{}", doc.summary());
    Ok(())
}

// ---------------------------------------------------------------- train-toy / pipeline

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Pipeline TOML supplying `[network]`, `[train]` and `[cohort.phantom]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    /// Checkpoint path; the loss trace goes to `<stem>.trace.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_train_toy(a: &TrainToyArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.train.steps = n;
    }
    if let Some(lr) = a.lr {
        cfg.train.optim.lr = lr;
    }
    if a.no_augment {
        cfg.train.augment = false;
    }
    cfg.network.validate().stage(Stage::Config)?;
    cfg.train.validate().stage(Stage::Config)?;
    if cfg.cohort.n_train_studies == 0 {
        return Err(CliError::msg(Stage::Config, "cohort.n_train_studies must be at least 1"));
    }
    let studies = training_studies(&cfg)?;
    let tc = TrainConfig {
        seed: laspet_core::seed::derive(cfg.seed, crate::config::stages::TRAIN, 0),
        ..cfg.train.clone()
    };
    let out = train_toy(&studies, &cfg.network, &tc).stage(Stage::Train)?;
    checkpoint::save(&out.params, &a.out).stage(Stage::Train)?;
    let manifest = manifest_for_file(&a.out);
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let trace_path = a.out.with_file_name(format!("{stem}.trace.json"));
    write_json(
        &trace_path,
        &TrainTrace {
            schema_version: JSON_SCHEMA_VERSION,
            run_manifest: file_name(&manifest),
            loss: out.loss_trace.clone(),
        },
        Stage::Train,
    )?;
    let mut mb = ManifestBuilder::new("train-toy", hash_json(&(&cfg.network, &tc, &cfg.cohort)), Some(cfg.seed));
    if let Some(p) = &a.config {
        mb.input(p);
    }
    mb.output(&a.out);
    mb.output(&trace_path);
    mb.write(&manifest, Stage::Train)?;
    let first = out.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = out.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!("{} steps  loss {first:.4} -> {last:.4}", out.loss_trace.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the cohort size.
    #[arg(long)]
    pub cohort_size: Option<usize>,
    /// Overrides the segmenter.
    #[arg(long, value_enum)]
    pub segmenter: Option<RuleArg>,
    /// Enables MPDR.
    #[arg(long)]
    pub mpdr: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_pipeline(a: &PipelineArgs) -> CliResult<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.cohort_size {
        cfg.cohort.size = n;
    }
    if let Some(s) = a.segmenter {
        cfg.segmenter.kind = match s {
            RuleArg::Oracle => SegmenterKind::Oracle,
            RuleArg::ThresholdUnion => SegmenterKind::ThresholdUnion,
            RuleArg::Model => SegmenterKind::Model,
        };
    }
    if a.mpdr {
        cfg.mpdr = true;
    }
    let out = run_pipeline(&cfg, &a.out, Some(&a.config))?;
    print!("{}", out.document.summary());
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Vol(c) => cmd_vol(c),
        Command::Segment(a) => cmd_segment(a),
        Command::Register(a) => cmd_register(a),
        Command::Mpdr(a) => cmd_mpdr(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Report(a) => cmd_report(a),
    }
}

//! Acceptance criteria, one line each. Runs as a plain binary so every
//! criterion reports even when an earlier one fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use laspet_cli::config::{Alignment, SegmenterKind};
use laspet_cli::pipeline::{cohort_study, run_pipeline};
use laspet_cli::report::TABLE_FILES;
use laspet_cli::segment::{apply_mpdr, oracle, Prediction};
use laspet_cli::PipelineConfig;
use laspet_core::evaluation::{
    bootstrap_values, score_detection, spearman, superiority_test, DetectionCounts, DetectionCriterion,
};
use laspet_core::lesions::{connected_components, dice, extract_lesions, fnv, fpv};
use laspet_core::longitudinal::{euler_rotation, register_rigid, RegistrationConfig, RigidTransform};
use laspet_core::phantom::{generate, inject_misregistration, LesionShape, Origin, PatientStudy, PhantomConfig};
use laspet_core::quant::{dmax, mtv, tlg, DmaxMode};
use laspet_core::{Connectivity, Grid, Kind, LesionSet, Mask, Volume3D};
use laspet_neural::gradcheck::layer_suite;
use laspet_neural::infer::{infer_probabilities, segment, InferConfig};
use laspet_neural::optim::OptimConfig;
use laspet_neural::params::normal_tensor;
use laspet_neural::tape::Tape;
use laspet_neural::train::{train_toy, Sample, TrainConfig};
use laspet_neural::{lasnet_forward, LasNetConfig, LasNetParams, ParamTag, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Outcome {
    let msg = msg.into();
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// one-way flow

fn small_net() -> LasNetConfig {
    LasNetConfig {
        base_dim: 4,
        depths: vec![1, 2],
        heads: vec![1, 2],
        patch_size: 12,
        ..Default::default()
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    normal_tensor(shape, 1.0, rng)
}

/// Initialized weights with every cross-branch parameter redrawn, so the LAAG
/// kernels are not left at their zero initialization.
fn random_params(cfg: &LasNetConfig, seed: u64) -> LasNetParams {
    let mut p = LasNetParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..p.registry.len() {
        let param = p.registry.param_mut(i);
        if param.tag == ParamTag::Cross {
            param.value = normal_tensor(param.value.shape(), 0.3, &mut rng);
        }
    }
    p
}

fn one_way_flow() -> Outcome {
    let cfg = small_net();
    let shape = [2, 12, 12, 12];
    let mut worst = 0usize;
    for d in 0..100u64 {
        let p = random_params(&cfg, d);
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + d);
        let x1 = randn(&shape, &mut rng);
        let noise = randn(&shape, &mut rng);
        let (a, a2) = p.predict(&x1, &Tensor::zeros(&shape)).unwrap();
        let (b, b2) = p.predict(&x1, &noise).unwrap();
        let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        worst = worst.max(differing);
        if a2.data() == b2.data() {
            return Err(format!("draw {d}: interim logits ignore the interim input"));
        }
    }
    check(worst == 0, format!("100 draws, max differing logits1 entries {worst}"))
}

// gradient suite

fn gradient_suite() -> Outcome {
    let checks = layer_suite(20, 1e-5).map_err(|e| e.to_string())?;
    let worst = checks.iter().map(|c| c.max_error).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e} (n={})", c.op, c.max_error, c.draws))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        checks.len() == 7 && worst < 1e-4 && checks.iter().all(|c| c.draws >= 20),
        detail,
    )
}

// weight sharing

fn weight_sharing() -> Outcome {
    let mut notes = Vec::new();
    for cfg in [small_net(), LasNetConfig::default()] {
        let full = LasNetParams::init(&cfg, 0).unwrap();
        let single = LasNetParams::init_single_branch(&cfg, 0).unwrap();
        if full.shared_count() != single.total_count() || single.cross_count() != 0 {
            return Err(format!(
                "shared {} vs single-branch {} (single cross {})",
                full.shared_count(),
                single.total_count(),
                single.cross_count()
            ));
        }
        for p in full.registry.iter() {
            let cross_name = p.name.starts_with("lawa") || p.name.starts_with("laag");
            if (p.tag == ParamTag::Cross) != cross_name {
                return Err(format!("{} tagged {:?}", p.name, p.tag));
            }
        }
        notes.push(format!(
            "shared {} = single {}, cross {}",
            full.shared_count(),
            single.total_count(),
            full.cross_count()
        ));
    }
    // baseline logits must not reach any cross parameter
    let p = random_params(&small_net(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let b = p.registry.bind(&tape);
    let x1 = tape.constant(randn(&[2, 12, 12, 12], &mut rng));
    let x2 = tape.constant(randn(&[2, 12, 12, 12], &mut rng));
    let (l1, _) = lasnet_forward(&b, &p.config, x1, x2).unwrap();
    let grads = tape.backward(tape.sum(l1));
    for prm in p.registry.iter().filter(|q| q.tag == ParamTag::Cross) {
        if let Some(g) = grads.get(b.p(&prm.name)) {
            if g.iter().any(|&v| v != 0.0) {
                return Err(format!("baseline logits depend on {}", prm.name));
            }
        }
    }
    notes.push("d(logits1)/d(cross) = 0".into());
    Ok(notes.join("; "))
}

// metric oracles

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn world(g: &Grid, x: usize, y: usize, z: usize) -> [f64; 3] {
    [
        g.origin[0] + x as f64 * g.spacing[0],
        g.origin[1] + y as f64 * g.spacing[1],
        g.origin[2] + z as f64 * g.spacing[2],
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Every voxel of the grid as (index, world position).
fn all_voxels(g: &Grid) -> Vec<(usize, [f64; 3])> {
    let mut out = Vec::new();
    for z in 0..g.dims[2] {
        for y in 0..g.dims[1] {
            for x in 0..g.dims[0] {
                out.push((g.index(x, y, z), world(g, x, y, z)));
            }
        }
    }
    out
}

/// Component ids of the set voxels by union-find over all pairs within one
/// voxel step on every axis.
fn brute_components(m: &Mask) -> Vec<(usize, usize)> {
    let g = m.grid();
    let set: Vec<usize> = (0..g.len()).filter(|&i| m.get(i)).collect();
    let mut parent: Vec<usize> = (0..set.len()).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            i = p[i];
        }
        i
    }
    for a in 0..set.len() {
        for b in a + 1..set.len() {
            let (ca, cb) = (g.coords(set[a]), g.coords(set[b]));
            if (0..3).all(|k| ca[k].abs_diff(cb[k]) <= 1) {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    (0..set.len()).map(|a| (set[a], root(&mut parent, a))).collect()
}

fn brute_unmatched_volume(a: &Mask, b: &Mask) -> f64 {
    let comps = brute_components(a);
    let hit: std::collections::HashSet<usize> = comps.iter().filter(|(v, _)| b.get(*v)).map(|(_, c)| *c).collect();
    let n = comps.iter().filter(|(_, c)| !hit.contains(c)).count();
    n as f64 * a.grid().voxel_volume_ml()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Volume3D, Volume3D, Mask) {
    let dims = [rng.random_range(4..9), rng.random_range(4..9), rng.random_range(3..8)];
    let spacing = [0; 3].map(|_| rng.random_range(0.5..3.0));
    let origin = [0; 3].map(|_| rng.random_range(-50.0..50.0));
    let g = Grid::new(dims, spacing, origin).unwrap();
    let n_labels = rng.random_range(1..5u32);
    let density = rng.random_range(0.05..0.35);
    let labels: Vec<u32> = (0..g.len())
        .map(|_| if rng.random_bool(density) { rng.random_range(1..=n_labels) } else { 0 })
        .collect();
    let pet = Volume3D::from_fn(g, Kind::Suv, |_| rng.random_range(0.0..15.0f32)).unwrap();
    let other = Mask::new(g, (0..g.len()).map(|_| rng.random_bool(density)).collect()).unwrap();
    (Volume3D::from_labels(g, &labels).unwrap(), pet, other)
}

fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let tied = v.iter().filter(|&&b| b == a).count() as f64;
                below + (tied + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for inst in 0..50 {
        let (labels, pet, other) = random_instance(&mut rng);
        let g = *labels.grid();
        let ls = extract_lesions(&labels, Some(&pet)).unwrap();
        let lab = labels.labels();
        let vox = all_voxels(&g);
        let vml = g.spacing[0] * g.spacing[1] * g.spacing[2] / 1000.0;

        let fail = |what: &str, got: f64, want: f64| Err(format!("instance {inst}: {what} {got} vs oracle {want}"));

        let n_in = vox.iter().filter(|(i, _)| lab[*i] > 0).count();
        let want_mtv = n_in as f64 * vml;
        if !close(mtv(&ls), want_mtv) {
            return fail("MTV", mtv(&ls), want_mtv);
        }
        let want_tlg: f64 = vox.iter().filter(|(i, _)| lab[*i] > 0).map(|(i, _)| pet.value(*i) * vml).sum();
        let got_tlg = tlg(&ls).unwrap();
        if !close(got_tlg, want_tlg) {
            return fail("TLG", got_tlg, want_tlg);
        }

        let pred = Mask::from_volume(&labels);
        let inter = vox.iter().filter(|(i, _)| pred.get(*i) && other.get(*i)).count();
        let n_other = vox.iter().filter(|(i, _)| other.get(*i)).count();
        let want_dice = if n_in + n_other == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (n_in + n_other) as f64
        };
        let got_dice = dice(&pred, &other).unwrap();
        if !close(got_dice, want_dice) {
            return fail("Dice", got_dice, want_dice);
        }
        let (got_fpv, want_fpv) = (fpv(&pred, &other).unwrap(), brute_unmatched_volume(&pred, &other));
        if !close(got_fpv, want_fpv) {
            return fail("FPV", got_fpv, want_fpv);
        }
        let (got_fnv, want_fnv) = (fnv(&pred, &other).unwrap(), brute_unmatched_volume(&other, &pred));
        if !close(got_fnv, want_fnv) {
            return fail("FNV", got_fnv, want_fnv);
        }

        // Dmax by lesion label, over centroids and over voxel pairs
        let ids: Vec<u32> = {
            let mut v: Vec<u32> = lab.iter().copied().filter(|&l| l > 0).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let members = |l: u32| -> Vec<[f64; 3]> { vox.iter().filter(|(i, _)| lab[*i] == l).map(|(_, p)| *p).collect() };
        let centroids: Vec<[f64; 3]> = ids
            .iter()
            .map(|&l| {
                let m = members(l);
                let n = m.len() as f64;
                [0, 1, 2].map(|a| m.iter().map(|p| p[a]).sum::<f64>() / n)
            })
            .collect();
        let mut want_c: Option<f64> = None;
        let mut want_v: Option<f64> = None;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let c = dist(centroids[i], centroids[j]);
                want_c = Some(want_c.map_or(c, |m| m.max(c)));
                for p in members(ids[i]) {
                    for q in members(ids[j]) {
                        let d = dist(p, q);
                        want_v = Some(want_v.map_or(d, |m| m.max(d)));
                    }
                }
            }
        }
        for (mode, want) in [(DmaxMode::Centroid, want_c), (DmaxMode::Voxel, want_v)] {
            let got = dmax(&ls, mode);
            let ok = match (got, want) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(format!("instance {inst}: Dmax {mode:?} {got:?} vs oracle {want:?}"));
            }
        }

        // Spearman with ties from rounding
        let n = rng.random_range(2..30);
        let round = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            let v = rng.random_range(0.0..10.0f64);
            if round {
                v.round()
            } else {
                v
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|&a| if rng.random_bool(0.3) { draw(&mut rng) } else { a * 0.5 }).collect();
        let got = spearman(&x, &y).unwrap();
        let want = brute_spearman(&x, &y);
        let ok = match (got, want) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !ok {
            return Err(format!("instance {inst}: Spearman {got:?} vs oracle {want:?}"));
        }
    }

    // phantom volumes against voxel counts of the inserted shapes
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let s = generate(&PhantomConfig {
            seed,
            box_lesions: seed % 2 == 1,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let g = *s.pet1.grid();
        let vml = g.voxel_volume_ml();
        let rows = s.manifest().lesions;
        for (tp, ls, shapes) in [(1u8, &s.gt1, &s.shapes1), (2, &s.gt2, &s.shapes2)] {
            let inside = |sh: &LesionShape, p: [f64; 3]| -> bool {
                let c = world(&g, sh.center_voxel[0], sh.center_voxel[1], sh.center_voxel[2]);
                let u = [0, 1, 2].map(|a| ((p[a] - c[a]) / sh.semi_axes_mm[a]).abs());
                match sh.exponent {
                    None => u.iter().all(|&v| v <= 1.0),
                    Some(e) => u.iter().map(|v| v.powf(e)).sum::<f64>() <= 1.0,
                }
            };
            let count = all_voxels(&g).iter().filter(|(_, p)| shapes.iter().any(|sh| inside(sh, *p))).count();
            let manifest: f64 = rows.iter().filter(|r| r.time_point == tp).map(|r| r.volume_ml).sum();
            let m = mtv(ls);
            worst = worst.max((m - count as f64 * vml).abs() / vml).max((m - manifest).abs() / vml);
            if seed % 2 == 1 {
                let analytic: f64 = shapes.iter().map(LesionShape::analytic_volume_ml).sum();
                worst = worst.max((m - analytic).abs() / vml);
            }
        }
    }
    check(
        worst <= 1.0,
        format!("50 instances within 1e-9 relative; phantom MTV within {worst:.3} voxel volumes"),
    )
}

// criterion strictness

fn cohort_config(seed: u64, variant: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        ..Default::default()
    };
    cfg.cohort.size = 6;
    match variant {
        1 => cfg.cohort.phantom.box_lesions = true,
        2 => {
            cfg.cohort.phantom.n_equivocal = 1;
            cfg.cohort.phantom.new_lesion_count = 2;
        }
        3 => {
            cfg.cohort.phantom.n_baseline_lesions = 5;
            cfg.cohort.phantom.lesion_radius_mm = [4.0, 7.0];
        }
        _ => {}
    }
    cfg
}

/// Lesion set over `pet` from a voxel mask, one lesion per 26-connected component.
fn lesions_of(mask: &Mask, pet: &Volume3D) -> LesionSet {
    extract_lesions(&connected_components(mask, Connectivity::TwentySix), Some(pet)).unwrap()
}

fn peak_core(l: &laspet_core::lesions::Lesion, pet: &Volume3D, f: f64) -> Vec<usize> {
    let m = l.suvmax().unwrap();
    l.voxels.iter().copied().filter(|&v| pet.value(v) >= f * m).collect()
}

/// The `k` coolest voxels of a lesion with `3k < n`: Dice below 0.5 and the
/// peak voxel left out.
fn cool_fragment(l: &laspet_core::lesions::Lesion, pet: &Volume3D) -> Vec<usize> {
    let n = l.voxels.len();
    let k = n.saturating_sub(1) / 3;
    let mut v = l.voxels.clone();
    v.sort_by(|a, b| pet.value(*a).total_cmp(&pet.value(*b)));
    v.truncate(k.max(1).min(n - 1));
    v
}

/// Small cubes in the body, away from every lesion.
fn background_blobs(s: &PatientStudy, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let g = *s.pet2.grid();
    let keep_out = s.gt2.mask().dilate(3);
    let mut out = Vec::new();
    let mut placed = 0;
    for _ in 0..500 {
        if placed == n {
            break;
        }
        let c = [0, 1, 2].map(|a| rng.random_range(g.dims[a] / 4..3 * g.dims[a] / 4));
        let cube: Vec<usize> = (0..8)
            .map(|b| g.index(c[0] + (b & 1), c[1] + ((b >> 1) & 1), c[2] + ((b >> 2) & 1)))
            .collect();
        if cube.iter().all(|&v| !keep_out.get(v)) {
            out.extend(cube);
            placed += 1;
        }
    }
    out
}

fn predictor(name: &str, s: &PatientStudy, rng: &mut ChaCha8Rng) -> LesionSet {
    let g = *s.pet2.grid();
    let pet = &s.pet2;
    let gt = &s.gt2;
    let mask = |vox: Vec<usize>| Mask::from_indices(g, vox);
    match name {
        "core30" | "core50" | "core70" => {
            let f = name[4..].parse::<f64>().unwrap() / 100.0;
            lesions_of(&mask(gt.lesions.iter().flat_map(|l| peak_core(l, pet, f)).collect()), pet)
        }
        "dilate1" => lesions_of(&gt.mask().dilate(1), pet),
        "dilate2" => lesions_of(&gt.mask().dilate(2), pet),
        "fragments" => lesions_of(&mask(gt.lesions.iter().flat_map(|l| cool_fragment(l, pet)).collect()), pet),
        "drop-half" => lesions_of(
            &mask(gt.lesions.iter().step_by(2).flat_map(|l| l.voxels.clone()).collect()),
            pet,
        ),
        "false-positives" => {
            let mut v: Vec<usize> = gt.mask().indices().collect();
            v.extend(background_blobs(s, 2, rng));
            lesions_of(&mask(v), pet)
        }
        "mixed" => {
            let mut v: Vec<usize> = Vec::new();
            for l in &gt.lesions {
                match rng.random_range(0..5) {
                    0 => v.extend(peak_core(l, pet, 0.5)),
                    1 => v.extend(cool_fragment(l, pet)),
                    2 => {}
                    3 => v.extend(Mask::from_indices(g, l.voxels.iter().copied()).dilate(1).indices()),
                    _ => v.extend(l.voxels.iter().copied()),
                }
            }
            v.extend(background_blobs(s, 1, rng));
            lesions_of(&mask(v), pet)
        }
        _ => unreachable!("unknown predictor {name}"),
    }
}

const PREDICTORS: [&str; 9] = [
    "core30",
    "core50",
    "core70",
    "dilate1",
    "dilate2",
    "fragments",
    "drop-half",
    "false-positives",
    "mixed",
];

fn strictness() -> Outcome {
    let mut checked = 0;
    let mut imperfect = 0;
    let mut example = String::new();
    for variant in 0..4 {
        for seed in [5u64, 6] {
            let cfg = cohort_config(seed, variant);
            let studies: Vec<PatientStudy> = (0..cfg.cohort.size).map(|k| cohort_study(&cfg, k).unwrap()).collect();
            for name in PREDICTORS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + variant as u64);
                let preds: Vec<LesionSet> = studies.iter().map(|s| predictor(name, s, &mut rng)).collect();
                for include_equivocal in [false, true] {
                    let f1: Vec<f64> = DetectionCriterion::ALL
                        .iter()
                        .map(|&c| {
                            let per: Vec<DetectionCounts> = studies
                                .iter()
                                .zip(&preds)
                                .map(|(s, p)| score_detection(p, &s.gt2, c, include_equivocal).unwrap())
                                .collect();
                            DetectionCounts::sum(&per).f1()
                        })
                        .collect();
                    checked += 1;
                    if f1[0] < 1.0 || f1[2] < 1.0 {
                        imperfect += 1;
                    }
                    if name == "mixed" && variant == 0 && !include_equivocal && example.is_empty() {
                        example = format!("mixed: {:.3}/{:.3}/{:.3}", f1[0], f1[1], f1[2]);
                    }
                    if !(f1[0] >= f1[1] && f1[1] >= f1[2]) {
                        return Err(format!(
                            "variant {variant} seed {seed} {name} equivocal={include_equivocal}: F1 {:.4} / {:.4} / {:.4}",
                            f1[0], f1[1], f1[2]
                        ));
                    }
                }
            }
        }
    }
    check(
        imperfect > 0,
        format!("{checked} cohort/predictor cases ({imperfect} imperfect) ordered; {example}"),
    )
}

// MPDR direction

fn mpdr_direction() -> Outcome {
    let mut cfg = PipelineConfig {
        seed: 21,
        ..Default::default()
    };
    cfg.cohort.size = 20;
    cfg.cohort.max_shift_mm = 4.0;
    cfg.cohort.max_rotation_deg = 3.0;
    cfg.alignment = Alignment::Known;
    let mut plain = [DetectionCounts::default(); 3];
    let mut filtered = [DetectionCounts::default(); 3];
    for k in 0..cfg.cohort.size {
        let s = cohort_study(&cfg, k).unwrap();
        let n_new = s.origins2.iter().filter(|o| matches!(o, Origin::New)).count();
        if n_new == 0 {
            return Err(format!("patient {k} has no new lesion"));
        }
        let pred: Prediction = oracle(&s);
        let kept = apply_mpdr(&pred, &s.transform).map_err(|e| e.to_string())?;
        for c in DetectionCriterion::ALL {
            let i = c as usize;
            plain[i] = plain[i].add(&score_detection(&pred.pred2, &s.gt2, c, false).unwrap());
            filtered[i] = filtered[i].add(&score_detection(&kept.pred2, &s.gt2, c, false).unwrap());
        }
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for c in DetectionCriterion::ALL {
        let (a, b) = (&plain[c as usize], &filtered[c as usize]);
        ok &= b.precision() >= a.precision() && b.recall() < a.recall();
        lines.push(format!(
            "{} P {:.3}->{:.3} R {:.3}->{:.3}",
            c.name(),
            a.precision(),
            b.precision(),
            a.recall(),
            b.recall()
        ));
    }
    check(ok, lines.join("; "))
}

// toy training

fn toy_training() -> Outcome {
    let study = generate(&PhantomConfig {
        seed: 11,
        dims: [24; 3],
        spacing_mm: [4.0; 3],
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let net = LasNetConfig::default();
    let cfg = TrainConfig {
        steps: 200,
        seed: 5,
        augment: false,
        optim: OptimConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train_toy(std::slice::from_ref(&study), &net, &cfg).map_err(|e| e.to_string())?;
    let trace = &out.loss_trace;
    let first = trace[0];
    let last = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - last / first;

    let sample = Sample::from_study(&study).map_err(|e| e.to_string())?;
    let icfg = InferConfig::default();
    let (p1, p2) = infer_probabilities(&out.params, &sample.x1, &sample.x2, &icfg).map_err(|e| e.to_string())?;
    let grid = *study.pet1.grid();
    let m1 = Mask::from_volume(&segment(&p1, grid, &icfg).unwrap());
    let m2 = Mask::from_volume(&segment(&p2, grid, &icfg).unwrap());
    let d1 = dice(&m1, &study.gt1.mask()).unwrap();
    let d2 = dice(&m2, &study.gt2.mask()).unwrap();
    check(
        drop >= 0.5 && d1 > 0.8 && d2 > 0.8,
        format!(
            "{} steps, loss {first:.4} -> {last:.4} (drop {:.1}%), Dice {d1:.3} / {d2:.3}",
            trace.len(),
            100.0 * drop
        ),
    )
}

// registration

fn registration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_mm: f64 = 0.0;
    let mut worst_deg: f64 = 0.0;
    let mut passed = 0;
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let s = generate(&PhantomConfig {
            seed,
            noise_sigma: 0.0,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let dir: [f64; 3] = loop {
            let d = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
            let n = dist(d, [0.0; 3]);
            if n > 0.1 && n <= 1.0 {
                break d.map(|v| v / n);
            }
        };
        let shift = dir.map(|v| v * rng.random_range(3.0..9.0));
        let rot: [f64; 3] = loop {
            let r = [0; 3].map(|_| rng.random_range(-10.0..10.0f64));
            let angle = RigidTransform::new(euler_rotation(r.map(f64::to_radians)), [0.0; 3])
                .unwrap()
                .rotation_angle_deg();
            if (3.0..=10.0).contains(&angle) {
                break r;
            }
        };
        let moved = inject_misregistration(&s, shift, rot).map_err(|e| e.to_string())?;
        // the unmoved PET1 is the fixed image, so the recorded transform is the
        // injected motion alone
        let r = register_rigid(&moved.pet1, &s.pet1, &RegistrationConfig::default()).map_err(|e| e.to_string())?;
        let truth = moved.transform;
        let g = *s.pet1.grid();
        let pts: Vec<[f64; 3]> = s.gt1.lesions.iter().map(|l| l.centroid_mm).chain([g.center()]).collect();
        let err = pts
            .iter()
            .map(|&p| dist(r.transform.apply(p), truth.apply(p)))
            .fold(0.0, f64::max);
        let rot_err = r.transform.compose(&truth.inverse()).rotation_angle_deg();
        worst_mm = worst_mm.max(err);
        worst_deg = worst_deg.max(rot_err);
        let voxel = g.spacing.iter().cloned().fold(0.0, f64::max);
        if err <= voxel && rot_err <= 2.0 {
            passed += 1;
        } else {
            failures.push(format!("seed {seed}: {err:.2} mm {rot_err:.2} deg"));
        }
    }
    check(
        passed == 10,
        format!("{passed}/10 seeds, worst {worst_mm:.2} mm / {worst_deg:.2} deg")
            + &failures.iter().map(|f| format!("; {f}")).collect::<String>(),
    )
}

// bootstrap

fn bootstrap() -> Outcome {
    let values = [0.0, 1.0];
    let draws = bootstrap_values(2, 10_000, 17, |idx| {
        Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    });
    // exact distribution: all ordered index pairs are equally likely
    let mut exact = [0.0; 3];
    for a in 0..2 {
        for b in 0..2 {
            exact[a + b] += 0.25;
        }
    }
    let mut seen = [0.0; 3];
    for d in draws.iter().flatten() {
        seen[(d * 2.0).round() as usize] += 1.0 / draws.len() as f64;
    }
    let worst = (0..3).map(|k| (seen[k] - exact[k]).abs()).fold(0.0, f64::max);
    if worst > 0.02 {
        return Err(format!("atoms {seen:?} vs exact {exact:?}"));
    }

    // superiority fires exactly when at least 95 % of paired trials favour `a`
    let mut decisions = 0;
    for wins in [0usize, 500, 940, 949, 950, 951, 999, 1000] {
        let a: Vec<f64> = (0..1000).map(|t| if t < wins { 1.0 } else { 0.0 }).collect();
        let b = vec![0.5; 1000];
        let s = superiority_test(&a, &b).unwrap();
        let want = wins as f64 / 1000.0 >= 0.95;
        if s.significant != want || s.fraction != wins as f64 / 1000.0 {
            return Err(format!("{wins}/1000 wins: significant {} fraction {}", s.significant, s.fraction));
        }
        decisions += 1;
    }
    // ties never count as wins
    let tie = superiority_test(&[1.0; 100], &[1.0; 100]).unwrap();
    if tie.significant {
        return Err("ties counted as wins".into());
    }
    check(
        true,
        format!(
            "atoms {:.4}/{:.4}/{:.4} vs 0.25/0.5/0.25 (max dev {worst:.4}); {decisions} superiority cases",
            seen[0], seen[1], seen[2]
        ),
    )
}

// end-to-end oracle pipeline

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::iter::once("report.json")
        .chain(TABLE_FILES)
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

fn oracle_pipeline() -> Outcome {
    let mut cfg = PipelineConfig {
        seed: 7,
        ..Default::default()
    };
    cfg.cohort.size = 5;
    cfg.segmenter.kind = SegmenterKind::Oracle;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = run_pipeline(&cfg, &a, None).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, &b, None).map_err(|e| e.to_string())?;
    let r = &out.document.report;
    let mut problems = Vec::new();
    for row in &r.detection {
        if row.f1 != 1.0 {
            problems.push(format!("F1 {} = {}", row.criterion.name(), row.f1));
        }
    }
    for c in &r.correlations {
        if c.rho != Some(1.0) {
            problems.push(format!("rho {} = {:?}", c.metric, c.rho));
        }
    }
    let ds = &r.ds_agreement;
    for (name, ci) in [
        ("kappa", &ds.kappa),
        ("kappa 3+", &ds.binary_3plus.kappa),
        ("kappa 4+", &ds.binary_4plus.kappa),
    ] {
        if ci.estimate != Some(1.0) {
            problems.push(format!("{name} = {:?}", ci.estimate));
        }
    }
    for p in &r.patients {
        if p.fpv_ml_pet2 != 0.0 || p.fnv_ml_pet2 != 0.0 {
            problems.push(format!("{} FPV {} FNV {}", p.patient_id, p.fpv_ml_pet2, p.fnv_ml_pet2));
        }
    }
    let (ra, rb) = (read_outputs(&a), read_outputs(&b));
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        if x != y {
            problems.push(format!("{name} differs between reruns"));
        }
    }
    check(
        problems.is_empty() && r.n_patients == 5,
        if problems.is_empty() {
            format!(
                "{} patients: F1 = rho = kappa = 1, FPV = FNV = 0; {} files byte-identical",
                r.n_patients,
                ra.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("one-way flow", one_way_flow),
        ("gradient suite", gradient_suite),
        ("weight-sharing audit", weight_sharing),
        ("metric oracle equivalence", metric_oracles),
        ("criterion-strictness ordering", strictness),
        ("MPDR direction", mpdr_direction),
        ("toy training", toy_training),
        ("registration recovery", registration),
        ("bootstrap correctness", bootstrap),
        ("end-to-end oracle pipeline", oracle_pipeline),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Segmenters producing lesion predictions for both time points.

use laspet_core::lesions::{connected_components, extract_lesions, remove_small, threshold_union_rois};
use laspet_core::longitudinal::{apply_transform_to, propagate_mask, register_rigid, RegistrationConfig, RigidTransform};
use laspet_core::phantom::PatientStudy;
use laspet_core::{Connectivity, Interp, LesionSet, Mask, Volume3D};
use laspet_neural::infer::{infer_probabilities, probability_volume, segment, InferConfig};
use laspet_neural::train::input_tensor;
use laspet_neural::LasNetParams;

use crate::config::Alignment;
use crate::error::{CliResult, Stage, StageExt};

/// Predicted lesions: `pred1` on the PET1 grid, `pred2` on the PET2 grid.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub pred1: LesionSet,
    pub pred2: LesionSet,
}

/// Probability maps of both branches, on the PET2 grid.
#[derive(Debug, Clone)]
pub struct Probabilities {
    pub prob1: Volume3D,
    pub prob2: Volume3D,
}

/// Ground truth as the prediction.
pub fn oracle(study: &PatientStudy) -> Prediction {
    Prediction {
        pred1: study.gt1.clone(),
        pred2: study.gt2.clone(),
    }
}

/// Label volume of axis-aligned boxes around each lesion, grown by `margin`
/// voxels and clipped to the grid. Later lesions overwrite earlier ones where
/// boxes overlap.
pub fn lesion_boxes(ls: &LesionSet, margin: usize) -> Volume3D {
    let g = ls.grid;
    let mut labels = vec![0u32; g.len()];
    for (k, l) in ls.lesions.iter().enumerate() {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &v in &l.voxels {
            let c = g.coords(v);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let lo = lo.map(|v| v.saturating_sub(margin));
        let hi = [0, 1, 2].map(|a| (hi[a] + margin).min(g.dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    labels[g.index(x, y, z)] = k as u32 + 1;
                }
            }
        }
    }
    Volume3D::from_labels(g, &labels).expect("grid is valid")
}

/// Threshold-union inside boxes drawn around the reference lesions, labeled
/// with 26-connectivity and cleaned of components under `min_ml`.
pub fn threshold_union_labels(pet: &Volume3D, reference: &LesionSet, margin: usize, min_ml: f64) -> CliResult<Volume3D> {
    if reference.is_empty() {
        return Ok(Volume3D::from_labels(*pet.grid(), &vec![0; pet.len()]).stage(Stage::Segment)?);
    }
    let boxes = lesion_boxes(reference, margin);
    let mask = threshold_union_rois(pet, &boxes).stage(Stage::Segment)?;
    remove_small(&connected_components(&mask, Connectivity::TwentySix), min_ml).stage(Stage::Segment)
}

/// Rule-based segmentation of both time points.
pub fn rule_based(study: &PatientStudy, margin: usize, min_ml: f64) -> CliResult<Prediction> {
    let l1 = threshold_union_labels(&study.pet1, &study.gt1, margin, min_ml)?;
    let l2 = threshold_union_labels(&study.pet2, &study.gt2, margin, min_ml)?;
    Ok(Prediction {
        pred1: extract_lesions(&l1, Some(&study.pet1)).stage(Stage::Segment)?,
        pred2: extract_lesions(&l2, Some(&study.pet2)).stage(Stage::Segment)?,
    })
}

fn is_identity(t: &RigidTransform) -> bool {
    t.to_array() == RigidTransform::identity().to_array()
}

/// PET2 → PET1 transform chosen by `alignment`.
pub fn alignment_transform(study: &PatientStudy, alignment: Alignment, reg: &RegistrationConfig) -> CliResult<RigidTransform> {
    match alignment {
        Alignment::Identity => Ok(RigidTransform::identity()),
        Alignment::Known => Ok(study.transform),
        Alignment::Rigid => Ok(register_rigid(&study.pet1, &study.pet2, reg).stage(Stage::Register)?.transform),
    }
}

/// Network segmentation. PET1 and CT1 are resampled into the PET2 frame with
/// `t` before inference; the baseline prediction is mapped back afterwards.
pub fn model_based(
    params: &LasNetParams,
    study: &PatientStudy,
    t: &RigidTransform,
    cfg: &InferConfig,
) -> CliResult<(Prediction, Probabilities)> {
    let g2 = *study.pet2.grid();
    let (pet1, ct1) = if is_identity(t) {
        (study.pet1.clone(), study.ct1.clone())
    } else {
        (
            apply_transform_to(&study.pet1, t, Interp::Trilinear, &g2).stage(Stage::Segment)?,
            apply_transform_to(&study.ct1, t, Interp::Trilinear, &g2).stage(Stage::Segment)?,
        )
    };
    let x1 = input_tensor(&pet1, &ct1).stage(Stage::Segment)?;
    let x2 = input_tensor(&study.pet2, &study.ct2).stage(Stage::Segment)?;
    let (p1, p2) = infer_probabilities(params, &x1, &x2, cfg).stage(Stage::Segment)?;
    let mut l1 = segment(&p1, g2, cfg).stage(Stage::Segment)?;
    let l2 = segment(&p2, g2, cfg).stage(Stage::Segment)?;
    if !is_identity(t) {
        let back = apply_transform_to(&l1, &t.inverse(), Interp::Nearest, study.pet1.grid()).stage(Stage::Segment)?;
        let relabeled = connected_components(&Mask::from_volume(&back), Connectivity::TwentySix);
        l1 = remove_small(&relabeled, cfg.min_ml).stage(Stage::Segment)?;
    }
    let pred = Prediction {
        pred1: extract_lesions(&l1, Some(&study.pet1)).stage(Stage::Segment)?,
        pred2: extract_lesions(&l2, Some(&study.pet2)).stage(Stage::Segment)?,
    };
    let probs = Probabilities {
        prob1: probability_volume(&p1, g2).stage(Stage::Segment)?,
        prob2: probability_volume(&p2, g2).stage(Stage::Segment)?,
    };
    Ok((pred, probs))
}

/// Keeps the PET2 lesions sharing at least one voxel with the baseline
/// prediction propagated through `t` (PET2 → PET1).
pub fn apply_mpdr(pred: &Prediction, t: &RigidTransform) -> CliResult<Prediction> {
    let prior = propagate_mask(&pred.pred1.label_volume(), t, &pred.pred2.grid).stage(Stage::Mpdr)?;
    Ok(Prediction {
        pred1: pred.pred1.clone(),
        pred2: pred.pred2.filtered(|l| l.voxels.iter().any(|&v| prior.get(v))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use laspet_core::phantom::{generate, PhantomConfig};

    fn study(seed: u64) -> PatientStudy {
        generate(&PhantomConfig {
            seed,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn boxes_contain_their_lesions() {
        let s = study(1);
        let boxes = lesion_boxes(&s.gt1, 1);
        let m = Mask::from_volume(&boxes);
        for l in &s.gt1.lesions {
            assert!(l.voxels.iter().all(|&v| m.get(v)));
        }
        assert!(m.count() > s.gt1.mask().count());
    }

    #[test]
    fn rule_based_finds_every_lesion() {
        let s = study(2);
        let p = rule_based(&s, 2, 0.2).unwrap();
        let gt = s.gt2.mask();
        for l in &s.gt2.lesions {
            assert!(p.pred2.mask().indices().any(|v| l.voxels.binary_search(&v).is_ok()));
        }
        assert!(laspet_core::lesions::dice(&p.pred2.mask(), &gt).unwrap() > 0.5);
    }

    #[test]
    fn mpdr_drops_new_lesions_under_oracle() {
        let s = study(3);
        let p = apply_mpdr(&oracle(&s), &s.transform).unwrap();
        let n_new = s
            .origins2
            .iter()
            .filter(|o| matches!(o, laspet_core::phantom::Origin::New))
            .count();
        assert!(n_new >= 1);
        assert_eq!(p.pred2.len(), s.gt2.len() - n_new);
    }
}

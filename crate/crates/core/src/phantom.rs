//! Deterministic synthetic baseline/interim PET/CT studies with exact ground truth.
//!
//! A phantom is an ellipsoidal body of uniform uptake holding three organ
//! reference regions (liver, spleen, mediastinum) and superellipsoidal lesions
//! with a smooth radial falloff. Interim (PET2) lesions are either shrunken
//! copies of baseline lesions, concentric with their parent, or new lesions
//! placed away from every baseline lesion. Interim lesion intensities are set
//! so that each lesion's qPET falls inside the band of its Deauville score.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::evaluation::QpetThresholds;
use crate::lesions::{extract_lesions, Lesion, LesionSet, Mask};
use crate::longitudinal::{apply_transform, RigidTransform};
use crate::quant;
use crate::seed;
use crate::volgrid::{read_mvol, write_mvol, Grid, Interp, Kind, Volume3D};

pub const SOFT_TISSUE_HU: f32 = 40.0;
pub const AIR_HU: f32 = -1000.0;
/// Relative intensity at the lesion surface is `1 - FALLOFF`.
pub const FALLOFF: f64 = 0.4;
/// Bounded retries per lesion placement.
pub const MAX_PLACEMENT_TRIES: usize = 500;
pub const MANIFEST_VERSION: u32 = 1;

/// An ellipsoidal organ reference region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrganRoi {
    /// Center as a fraction of the grid extent along each axis.
    pub center_frac: [f64; 3],
    pub radii_mm: [f64; 3],
    pub suv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_baseline_lesions: usize,
    /// Fraction of baseline lesions still present at PET2.
    pub residual_fraction: f64,
    pub new_lesion_count: usize,
    /// Peak SUV range of baseline lesions.
    pub lesion_suv_range: [f64; 2],
    /// Semi-axis range of baseline and new lesions.
    pub lesion_radius_mm: [f64; 2],
    /// Superellipsoid exponent range (2 = ellipsoid).
    pub lesion_exponent_range: [f64; 2],
    /// Box-shaped lesions (infinite exponent).
    pub box_lesions: bool,
    /// Semi-axis scale range applied to persisting lesions.
    pub shrink_range: [f64; 2],
    pub background_suv: f64,
    /// Body semi-axes as fractions of the grid half-extent.
    pub body_frac: [f64; 3],
    pub liver: OrganRoi,
    pub spleen: OrganRoi,
    pub mediastinum: OrganRoi,
    pub noise_sigma: f64,
    /// Number of PET2 lesions flagged equivocal.
    pub n_equivocal: usize,
    /// Bands used to give PET2 lesions their Deauville-consistent uptake.
    pub qpet_thresholds: QpetThresholds,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            dims: [32, 32, 32],
            spacing_mm: [3.0; 3],
            n_baseline_lesions: 3,
            residual_fraction: 0.67,
            new_lesion_count: 1,
            lesion_suv_range: [5.0, 12.0],
            lesion_radius_mm: [6.0, 9.0],
            lesion_exponent_range: [2.0, 3.0],
            box_lesions: false,
            shrink_range: [0.6, 0.85],
            background_suv: 1.0,
            body_frac: [0.92, 0.84, 0.88],
            liver: OrganRoi {
                center_frac: [0.3, 0.35, 0.5],
                radii_mm: [12.0, 10.0, 12.0],
                suv: 2.2,
            },
            spleen: OrganRoi {
                center_frac: [0.72, 0.35, 0.5],
                radii_mm: [7.0, 7.0, 8.0],
                suv: 2.0,
            },
            mediastinum: OrganRoi {
                center_frac: [0.5, 0.66, 0.5],
                radii_mm: [5.0, 5.0, 9.0],
                suv: 1.5,
            },
            noise_sigma: 0.1,
            n_equivocal: 0,
            qpet_thresholds: QpetThresholds::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing_mm, [0.0; 3])?;
        let pos_range = |r: [f64; 2], what: &str| {
            if r[0] > 0.0 && r[0].is_finite() && r[1] >= r[0] && r[1].is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{what} must be a positive ascending range, got {r:?}")))
            }
        };
        pos_range(self.lesion_suv_range, "lesion_suv_range")?;
        pos_range(self.lesion_radius_mm, "lesion_radius_mm")?;
        pos_range(self.lesion_exponent_range, "lesion_exponent_range")?;
        pos_range(self.shrink_range, "shrink_range")?;
        if self.shrink_range[1] > 1.0 {
            return Err(invalid("shrink_range must stay within (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.residual_fraction) {
            return Err(invalid(format!("residual_fraction {} outside [0, 1]", self.residual_fraction)));
        }
        if !(self.background_suv > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(invalid("background SUV must be positive and noise sigma non-negative"));
        }
        if self.body_frac.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(invalid("body_frac entries must lie in (0, 1]"));
        }
        for (name, o) in self.organs() {
            if o.radii_mm.iter().any(|&r| !(r > 0.0)) || !(o.suv > 0.0) {
                return Err(invalid(format!("{name} ROI needs positive radii and SUV")));
            }
        }
        self.qpet_thresholds.validate()?;
        // weakest lesion voxel (surface of a faint lesion, lowest noise draw)
        // must still clear background + 3 sigma
        let floor = self.background_suv + 6.0 * self.noise_sigma;
        if (1.0 - FALLOFF) * self.lesion_suv_range[0] <= floor {
            return Err(invalid(format!(
                "lesion_suv_range too faint: surface SUV {} must exceed {floor}",
                (1.0 - FALLOFF) * self.lesion_suv_range[0]
            )));
        }
        let weakest_pet2 = self.lds_target_qpet(3) * self.liver.suv;
        if (1.0 - FALLOFF) * weakest_pet2 <= floor {
            return Err(invalid("liver SUV too low for detectable LDS 3 lesions"));
        }
        Ok(())
    }

    fn organs(&self) -> [(&'static str, &OrganRoi); 3] {
        [("liver", &self.liver), ("spleen", &self.spleen), ("mediastinum", &self.mediastinum)]
    }

    /// qPET aimed at for a PET2 lesion of the given score: the middle of its
    /// band, or 20 % above the top threshold for LDS 5.
    pub fn lds_target_qpet(&self, lds: u8) -> f64 {
        let t = &self.qpet_thresholds;
        match lds {
            1 => t.t12 / 2.0,
            2 => (t.t12 + t.t23) / 2.0,
            3 => (t.t23 + t.t34) / 2.0,
            4 => (t.t34 + t.t45) / 2.0,
            _ => 1.2 * t.t45,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        let origin = [0.0; 3];
        Grid::new(self.dims, self.spacing_mm, origin)
    }
}

/// Shape and uptake of one inserted lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionShape {
    pub center_voxel: [usize; 3],
    pub semi_axes_mm: [f64; 3],
    /// `None` for a box.
    pub exponent: Option<f64>,
    pub peak_suv: f64,
}

impl LesionShape {
    /// Normalized superellipsoid radius of an offset (mm); ≤ 1 inside.
    fn rho(&self, d: [f64; 3]) -> f64 {
        let u = [
            (d[0] / self.semi_axes_mm[0]).abs(),
            (d[1] / self.semi_axes_mm[1]).abs(),
            (d[2] / self.semi_axes_mm[2]).abs(),
        ];
        match self.exponent {
            None => u[0].max(u[1]).max(u[2]),
            Some(p) => (u[0].powf(p) + u[1].powf(p) + u[2].powf(p)).powf(1.0 / p),
        }
    }

    /// Voxels whose centers lie inside the shape, with their relative
    /// intensity `1 - 0.4 rho^2`, ascending by index. `None` when the shape
    /// leaves the grid.
    pub fn voxels(&self, g: &Grid) -> Option<Vec<(usize, f64)>> {
        let mut reach = [0i64; 3];
        for a in 0..3 {
            reach[a] = (self.semi_axes_mm[a] / g.spacing[a]).floor() as i64;
            let c = self.center_voxel[a] as i64;
            if c - reach[a] < 0 || c + reach[a] >= g.dims[a] as i64 {
                return None;
            }
        }
        let mut out = Vec::new();
        for dz in -reach[2]..=reach[2] {
            for dy in -reach[1]..=reach[1] {
                for dx in -reach[0]..=reach[0] {
                    let d = [
                        dx as f64 * g.spacing[0],
                        dy as f64 * g.spacing[1],
                        dz as f64 * g.spacing[2],
                    ];
                    let r = self.rho(d);
                    if r <= 1.0 {
                        let x = (self.center_voxel[0] as i64 + dx) as usize;
                        let y = (self.center_voxel[1] as i64 + dy) as usize;
                        let z = (self.center_voxel[2] as i64 + dz) as usize;
                        out.push((g.index(x, y, z), 1.0 - FALLOFF * r * r));
                    }
                }
            }
        }
        out.sort_by_key(|v| v.0);
        Some(out)
    }

    /// Boxes get half-integer semi-axes (in voxels) so that the voxelized box
    /// coincides with the continuous one.
    fn snapped(mut self, g: &Grid) -> LesionShape {
        if self.exponent.is_none() {
            for a in 0..3 {
                let s = g.spacing[a];
                self.semi_axes_mm[a] = ((self.semi_axes_mm[a] / s - 0.5).round().max(0.0) + 0.5) * s;
            }
        }
        self
    }

    /// Continuous volume `8abc Γ(1+1/p)³ / Γ(1+3/p)` in ml.
    pub fn analytic_volume_ml(&self) -> f64 {
        let [a, b, c] = self.semi_axes_mm;
        let shape = match self.exponent {
            None => 1.0,
            Some(p) => gamma(1.0 + 1.0 / p).powi(3) / gamma(1.0 + 3.0 / p),
        };
        8.0 * a * b * c * shape / 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    F,
    M,
}

/// Patient covariates used for stratified evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub age_years: f64,
    pub sex: Sex,
    pub weight_kg: f64,
    pub dose_mbq_per_kg: f64,
    pub scanner: String,
}

/// Where each PET2 lesion came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Shrunken copy of the baseline lesion at this position in `gt1`.
    Persisting(usize),
    New,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientStudy {
    pub patient_id: String,
    pub info: PatientInfo,
    pub pet1: Volume3D,
    pub ct1: Volume3D,
    pub pet2: Volume3D,
    pub ct2: Volume3D,
    pub gt1: LesionSet,
    pub gt2: LesionSet,
    pub shapes1: Vec<LesionShape>,
    pub shapes2: Vec<LesionShape>,
    pub origins2: Vec<Origin>,
    pub liver_mask: Volume3D,
    pub spleen_mask: Volume3D,
    pub mediastinum_mask: Volume3D,
    /// Maps PET2 points to PET1 points (identity unless misregistered).
    pub transform: RigidTransform,
}

fn ellipsoid_mask(g: &Grid, center_mm: [f64; 3], radii_mm: [f64; 3]) -> Mask {
    let bits = (0..g.len())
        .map(|i| {
            let p = g.world(i);
            (0..3)
                .map(|a| ((p[a] - center_mm[a]) / radii_mm[a]).powi(2))
                .sum::<f64>()
                <= 1.0
        })
        .collect();
    Mask::new(*g, bits).expect("length matches grid")
}

fn organ_mask(g: &Grid, o: &OrganRoi) -> Mask {
    let c = [0, 1, 2].map(|a| g.origin[a] + o.center_frac[a] * (g.dims[a] - 1) as f64 * g.spacing[a]);
    ellipsoid_mask(g, c, o.radii_mm)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

struct Placer<'a> {
    grid: &'a Grid,
    body: &'a Mask,
    blocked: Mask,
}

impl Placer<'_> {
    fn fits(&self, vox: &[(usize, f64)]) -> bool {
        vox.iter().all(|&(i, _)| self.body.get(i) && !self.blocked.get(i))
    }

    fn block(&mut self, vox: &[(usize, f64)]) {
        let m = Mask::from_indices(*self.grid, vox.iter().map(|v| v.0)).dilate(1);
        for i in m.indices().collect::<Vec<_>>() {
            self.blocked.bits_mut()[i] = true;
        }
    }

    fn place(&mut self, rng: &mut ChaCha8Rng, cfg: &PhantomConfig, what: &str) -> Result<(LesionShape, Vec<(usize, f64)>)> {
        for _ in 0..MAX_PLACEMENT_TRIES {
            let shape = LesionShape {
                center_voxel: [0, 1, 2].map(|a| rng.random_range(0..self.grid.dims[a])),
                semi_axes_mm: [0; 3].map(|_| uniform(rng, cfg.lesion_radius_mm)),
                exponent: if cfg.box_lesions {
                    None
                } else {
                    Some(uniform(rng, cfg.lesion_exponent_range))
                },
                peak_suv: 1.0,
            }
            .snapped(self.grid);
            if let Some(vox) = shape.voxels(self.grid) {
                if self.fits(&vox) {
                    self.block(&vox);
                    return Ok((shape, vox));
                }
            }
        }
        Err(Error::Placement(format!(
            "could not place {what} without overlap after {MAX_PLACEMENT_TRIES} tries"
        )))
    }
}

/// Relative SUVpeak of a unit-peak profile, used to scale PET2 lesions.
fn unit_suvpeak(g: &Grid, vox: &[(usize, f64)]) -> f64 {
    let mut vals = vec![0f32; g.len()];
    for &(i, w) in vox {
        vals[i] = w as f32;
    }
    let v = Volume3D::new(*g, Kind::Suv, vals).expect("length matches grid");
    let idx: Vec<usize> = vox.iter().map(|v| v.0).collect();
    quant::suvpeak_of(&v, &idx, quant::DEFAULT_PEAK_ML)
}

fn paint(
    g: &Grid,
    body: &Mask,
    organs: &[(&Mask, f64)],
    lesions: &[(Vec<(usize, f64)>, f64)],
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Volume3D {
    let mut v = vec![0f64; g.len()];
    for i in body.indices() {
        v[i] = cfg.background_suv;
    }
    for (m, suv) in organs {
        for i in m.indices() {
            v[i] = *suv;
        }
    }
    for (vox, peak) in lesions {
        for &(i, w) in vox {
            v[i] = peak * w;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma is finite");
        let cap = 3.0 * cfg.noise_sigma;
        for i in body.indices() {
            let n = loop {
                let n: f64 = normal.sample(rng);
                if n.abs() <= cap {
                    break n;
                }
            };
            v[i] += n;
        }
    }
    Volume3D::new(*g, Kind::Suv, v.into_iter().map(|x| x as f32).collect()).expect("length matches grid")
}

fn lesion_set(g: &Grid, vox: &[Vec<(usize, f64)>], pet: &Volume3D) -> Result<LesionSet> {
    let mut labels = vec![0u32; g.len()];
    for (k, lv) in vox.iter().enumerate() {
        for &(i, _) in lv {
            labels[i] = k as u32 + 1;
        }
    }
    extract_lesions(&Volume3D::from_labels(*g, &labels)?, Some(pet))
}

fn patient_info(rng: &mut ChaCha8Rng) -> PatientInfo {
    PatientInfo {
        age_years: (rng.random_range(5.0..22.0f64) * 10.0).round() / 10.0,
        sex: if rng.random_bool(0.5) { Sex::F } else { Sex::M },
        weight_kg: (rng.random_range(20.0..100.0f64) * 10.0).round() / 10.0,
        dose_mbq_per_kg: (rng.random_range(3.0..8.0f64) * 100.0).round() / 100.0,
        scanner: ["scanner-a", "scanner-b", "scanner-c"][rng.random_range(0..3)].to_string(),
    }
}

/// Builds one paired study. Deterministic in `cfg`.
pub fn generate(cfg: &PhantomConfig) -> Result<PatientStudy> {
    cfg.validate()?;
    let g = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "phantom", 0));
    let info = patient_info(&mut rng);

    let half = [0, 1, 2].map(|a| (g.dims[a] - 1) as f64 * g.spacing[a] / 2.0);
    let body = ellipsoid_mask(
        &g,
        g.center(),
        [0, 1, 2].map(|a| cfg.body_frac[a] * (half[a] + g.spacing[a] / 2.0)),
    );
    let liver = organ_mask(&g, &cfg.liver);
    let spleen = organ_mask(&g, &cfg.spleen);
    let mediastinum = organ_mask(&g, &cfg.mediastinum);
    let organs = [(&liver, "liver"), (&spleen, "spleen"), (&mediastinum, "mediastinum")];
    for (m, name) in organs {
        if m.is_empty() || m.indices().any(|i| !body.get(i)) {
            return Err(invalid(format!("{name} ROI must be non-empty and inside the body")));
        }
    }
    let organ_union = liver.union(&spleen)?.union(&mediastinum)?;
    if organ_union.count() != liver.count() + spleen.count() + mediastinum.count() {
        return Err(invalid("organ ROIs overlap"));
    }

    let mut placer = Placer {
        grid: &g,
        body: &body,
        blocked: organ_union.dilate(1),
    };
    let mut shapes1 = Vec::new();
    let mut vox1 = Vec::new();
    for k in 0..cfg.n_baseline_lesions {
        let (mut s, v) = placer.place(&mut rng, cfg, &format!("baseline lesion {k}"))?;
        s.peak_suv = uniform(&mut rng, cfg.lesion_suv_range);
        shapes1.push(s);
        vox1.push(v);
    }

    let n_persist = (cfg.residual_fraction * cfg.n_baseline_lesions as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_baseline_lesions).collect();
    order.shuffle(&mut rng);
    let mut persist: Vec<usize> = order[..n_persist].to_vec();
    persist.sort_unstable();

    let min_vox = ((quant_min_ml() / g.voxel_volume_ml()).ceil() as usize).max(8);
    let mut shapes2 = Vec::new();
    let mut vox2 = Vec::new();
    let mut origins2 = Vec::new();
    for &p in &persist {
        let parent = shapes1[p];
        let mut scale = uniform(&mut rng, cfg.shrink_range);
        let (shape, vox) = loop {
            let s = LesionShape {
                semi_axes_mm: parent.semi_axes_mm.map(|a| a * scale),
                ..parent
            }
            .snapped(&g);
            let v = s.voxels(&g).expect("shrunken lesion stays inside its parent");
            if v.len() >= min_vox || scale >= 1.0 {
                break (s, v);
            }
            scale = (scale + 0.05).min(1.0);
        };
        shapes2.push(shape);
        vox2.push(vox);
        origins2.push(Origin::Persisting(p));
    }
    for k in 0..cfg.new_lesion_count {
        let (s, v) = placer.place(&mut rng, cfg, &format!("new lesion {k}"))?;
        shapes2.push(s);
        vox2.push(v);
        origins2.push(Origin::New);
    }

    let mut lds = Vec::with_capacity(shapes2.len());
    for (s, v) in shapes2.iter_mut().zip(&vox2) {
        let score = rng.random_range(3..=5u8);
        s.peak_suv = cfg.lds_target_qpet(score) * cfg.liver.suv / unit_suvpeak(&g, v);
        lds.push(score);
    }
    let mut equivocal = vec![false; shapes2.len()];
    let mut eq_order: Vec<usize> = (0..shapes2.len()).collect();
    eq_order.shuffle(&mut rng);
    for &k in eq_order.iter().take(cfg.n_equivocal) {
        equivocal[k] = true;
    }

    let organ_suv = [(&liver, cfg.liver.suv), (&spleen, cfg.spleen.suv), (&mediastinum, cfg.mediastinum.suv)];
    let les1: Vec<_> = vox1.iter().cloned().zip(shapes1.iter().map(|s| s.peak_suv)).collect();
    let les2: Vec<_> = vox2.iter().cloned().zip(shapes2.iter().map(|s| s.peak_suv)).collect();
    let pet1 = paint(&g, &body, &organ_suv, &les1, cfg, &mut rng);
    let pet2 = paint(&g, &body, &organ_suv, &les2, cfg, &mut rng);
    let ct = Volume3D::new(
        g,
        Kind::Hu,
        body.bits().iter().map(|&b| if b { SOFT_TISSUE_HU } else { AIR_HU }).collect(),
    )?;

    let gt1 = lesion_set(&g, &vox1, &pet1)?;
    let mut gt2 = lesion_set(&g, &vox2, &pet2)?;
    for (k, l) in gt2.lesions.iter_mut().enumerate() {
        l.lds = Some(lds[k]);
        l.equivocal = equivocal[k];
    }

    Ok(PatientStudy {
        patient_id: format!("phantom-{:04}", cfg.seed),
        info,
        pet1,
        ct1: ct.clone(),
        pet2,
        ct2: ct,
        gt1,
        gt2,
        shapes1,
        shapes2,
        origins2,
        liver_mask: liver.to_volume(),
        spleen_mask: spleen.to_volume(),
        mediastinum_mask: mediastinum.to_volume(),
        transform: RigidTransform::identity(),
    })
}

fn quant_min_ml() -> f64 {
    crate::lesions::DEFAULT_MIN_ML
}

/// Moves the PET1 time point rigidly: its content is rotated about the grid
/// center by `rotation_deg` (Euler x, y, z) and then shifted by `shift_mm`.
/// Ground-truth labels follow with nearest-neighbour resampling and keep their
/// flags; the stored PET2→PET1 transform is updated accordingly.
pub fn inject_misregistration(s: &PatientStudy, shift_mm: [f64; 3], rotation_deg: [f64; 3]) -> Result<PatientStudy> {
    let g = *s.pet1.grid();
    let motion = RigidTransform::about_center(rotation_deg, shift_mm, g.center());
    let pull = motion.inverse();
    let pet1 = apply_transform(&s.pet1, &pull, Interp::Trilinear)?;
    let ct1 = apply_transform(&s.ct1, &pull, Interp::Trilinear)?;
    let labels = apply_transform(&s.gt1.label_volume(), &pull, Interp::Nearest)?;
    let mut moved = extract_lesions(&labels, Some(&pet1))?;
    // labels are positions + 1 in the original list; lesions pushed out of
    // view disappear
    for l in moved.lesions.iter_mut() {
        let old = &s.gt1.lesions[l.id as usize - 1];
        l.id = old.id;
        l.equivocal = old.equivocal;
        l.lds = old.lds;
    }
    Ok(PatientStudy {
        pet1,
        ct1,
        gt1: moved,
        transform: motion.compose(&s.transform),
        ..s.clone()
    })
}

/// One row of the manifest lesion table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub time_point: u8,
    pub id: u32,
    pub centroid_mm: [f64; 3],
    pub volume_ml: f64,
    pub suvmax: Option<f64>,
    pub lds: Option<u8>,
    pub equivocal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub patient_id: String,
    pub info: PatientInfo,
    pub lesions: Vec<LesionRow>,
    pub shapes1: Vec<LesionShape>,
    pub shapes2: Vec<LesionShape>,
    pub origins2: Vec<Origin>,
    pub transform: [f64; 12],
}

fn rows(tp: u8, ls: &LesionSet) -> impl Iterator<Item = LesionRow> + '_ {
    ls.lesions.iter().map(move |l: &Lesion| LesionRow {
        time_point: tp,
        id: l.id,
        centroid_mm: l.centroid_mm,
        volume_ml: l.volume_ml,
        suvmax: l.suvmax(),
        lds: l.lds,
        equivocal: l.equivocal,
    })
}

pub const STUDY_FILES: [&str; 9] = [
    "pet1.mvol",
    "ct1.mvol",
    "pet2.mvol",
    "ct2.mvol",
    "gt1.mvol",
    "gt2.mvol",
    "liver.mvol",
    "spleen.mvol",
    "mediastinum.mvol",
];

impl PatientStudy {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema_version: MANIFEST_VERSION,
            patient_id: self.patient_id.clone(),
            info: self.info.clone(),
            lesions: rows(1, &self.gt1).chain(rows(2, &self.gt2)).collect(),
            shapes1: self.shapes1.clone(),
            shapes2: self.shapes2.clone(),
            origins2: self.origins2.clone(),
            transform: self.transform.to_array(),
        }
    }

    pub fn liver(&self) -> Mask {
        Mask::from_volume(&self.liver_mask)
    }

    pub fn spleen(&self) -> Mask {
        Mask::from_volume(&self.spleen_mask)
    }

    pub fn mediastinum(&self) -> Mask {
        Mask::from_volume(&self.mediastinum_mask)
    }

    /// Writes every volume as MVOL plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let vols = [
            &self.pet1,
            &self.ct1,
            &self.pet2,
            &self.ct2,
            &self.gt1.label_volume(),
            &self.gt2.label_volume(),
            &self.liver_mask,
            &self.spleen_mask,
            &self.mediastinum_mask,
        ];
        for (name, v) in STUDY_FILES.iter().zip(vols) {
            write_mvol(v, dir.join(name))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    /// Reads a study written by [`PatientStudy::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<PatientStudy> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(Error::MalformedFile(format!(
                "unsupported manifest version {}",
                manifest.schema_version
            )));
        }
        let mut v = Vec::with_capacity(STUDY_FILES.len());
        for name in STUDY_FILES {
            v.push(read_mvol(dir.join(name))?);
        }
        let restore = |labels: &Volume3D, pet: &Volume3D, tp: u8| -> Result<LesionSet> {
            let mut ls = extract_lesions(labels, Some(pet))?;
            let table: Vec<&LesionRow> = manifest.lesions.iter().filter(|r| r.time_point == tp).collect();
            for (k, l) in ls.lesions.iter_mut().enumerate() {
                let row = table
                    .get(l.id as usize - 1)
                    .ok_or_else(|| Error::MalformedFile(format!("label {} missing from manifest", l.id)))?;
                l.id = row.id;
                l.lds = row.lds;
                l.equivocal = row.equivocal;
                let _ = k;
            }
            Ok(ls)
        };
        let gt1 = restore(&v[4], &v[0], 1)?;
        let gt2 = restore(&v[5], &v[2], 2)?;
        let mut it = v.into_iter();
        let pet1 = it.next().unwrap();
        let ct1 = it.next().unwrap();
        let pet2 = it.next().unwrap();
        let ct2 = it.next().unwrap();
        let _gt1 = it.next();
        let _gt2 = it.next();
        Ok(PatientStudy {
            patient_id: manifest.patient_id,
            info: manifest.info,
            pet1,
            ct1,
            pet2,
            ct2,
            gt1,
            gt2,
            shapes1: manifest.shapes1,
            shapes2: manifest.shapes2,
            origins2: manifest.origins2,
            liver_mask: it.next().unwrap(),
            spleen_mask: it.next().unwrap(),
            mediastinum_mask: it.next().unwrap(),
            transform: RigidTransform::from_array(&manifest.transform)?,
        })
    }
}

/// Studies for seeds `root, root+1, ...` sharing the remaining settings.
pub fn cohort(base: &PhantomConfig, n: usize) -> Result<Vec<PatientStudy>> {
    (0..n)
        .map(|k| {
            generate(&PhantomConfig {
                seed: base.seed.wrapping_add(k as u64),
                ..base.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesions::{component_count, connected_components, Connectivity};
    use crate::quant::{organ_mean, suvpeak};

    fn cfg(seed: u64) -> PhantomConfig {
        PhantomConfig {
            seed,
            ..PhantomConfig::default()
        }
    }

    fn overlaps(a: &Lesion, b: &Lesion) -> bool {
        a.voxels.iter().any(|v| b.voxels.binary_search(v).is_ok())
    }

    #[test]
    fn full_persistence() {
        let s = generate(&PhantomConfig {
            seed: 1,
            n_baseline_lesions: 3,
            residual_fraction: 1.0,
            new_lesion_count: 0,
            ..PhantomConfig::default()
        })
        .unwrap();
        assert_eq!(s.gt1.len(), 3);
        assert_eq!(s.gt2.len(), 3);
        for (k, l2) in s.gt2.lesions.iter().enumerate() {
            let Origin::Persisting(p) = s.origins2[k] else {
                panic!("expected persisting lesion")
            };
            let parent = &s.gt1.lesions[p];
            assert!(overlaps(l2, parent));
            assert!(l2.voxels.iter().all(|v| parent.voxels.binary_search(v).is_ok()));
        }
    }

    #[test]
    fn only_new_lesion() {
        let s = generate(&PhantomConfig {
            seed: 1,
            residual_fraction: 0.0,
            new_lesion_count: 1,
            ..PhantomConfig::default()
        })
        .unwrap();
        assert_eq!(s.gt2.len(), 1);
        let m1 = s.gt1.mask();
        assert!(s.gt2.lesions[0].voxels.iter().all(|&v| !m1.get(v)));
    }

    #[test]
    fn deterministic() {
        let a = generate(&cfg(11)).unwrap();
        let b = generate(&cfg(11)).unwrap();
        let bits = |v: &Volume3D| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.pet1), bits(&b.pet1));
        assert_eq!(bits(&a.pet2), bits(&b.pet2));
        assert_eq!(a, b);
        assert_ne!(generate(&cfg(12)).unwrap().pet1, a.pet1);
    }

    #[test]
    fn ground_truth_properties() {
        for seed in 0..6 {
            let c = PhantomConfig {
                n_equivocal: 1,
                ..cfg(seed)
            };
            let s = generate(&c).unwrap();
            let floor = c.background_suv + 3.0 * c.noise_sigma;
            let organs = s.liver().union(&s.spleen()).unwrap().union(&s.mediastinum()).unwrap();
            for (ls, pet) in [(&s.gt1, &s.pet1), (&s.gt2, &s.pet2)] {
                // masks mark exactly the painted voxels, each one detectable
                for l in &ls.lesions {
                    assert!(l.voxels.iter().all(|&i| pet.value(i) > floor));
                    assert!(l.voxels.iter().all(|&i| !organs.get(i)));
                }
                // lesions are separate 26-connected components
                let cc = connected_components(&ls.mask(), Connectivity::TwentySix);
                assert_eq!(component_count(&cc), ls.len());
            }
            assert_eq!(s.gt2.lesions.iter().filter(|l| l.equivocal).count(), 1);
            let liver_mean = organ_mean(&s.pet2, &s.liver()).unwrap();
            let med_mean = organ_mean(&s.pet2, &s.mediastinum()).unwrap();
            let t = &c.qpet_thresholds;
            for l in &s.gt2.lesions {
                let lds = l.lds.unwrap();
                assert!((3..=5).contains(&lds));
                let q = suvpeak(l, &s.pet2, 1.0).unwrap() / liver_mean;
                let band = match lds {
                    3 => t.t23..t.t34,
                    4 => t.t34..t.t45,
                    _ => t.t45..f64::INFINITY,
                };
                assert!(band.contains(&q), "lds {lds} q {q}");
                assert!(q * liver_mean > med_mean);
            }
        }
    }

    #[test]
    fn box_lesions_match_analytic_volume() {
        for seed in 0..4 {
            let s = generate(&PhantomConfig {
                box_lesions: true,
                ..cfg(seed)
            })
            .unwrap();
            let vox_ml = s.pet1.grid().voxel_volume_ml();
            let analytic: f64 = s.shapes1.iter().map(LesionShape::analytic_volume_ml).sum();
            assert!((quant::mtv(&s.gt1) - analytic).abs() <= vox_ml);
            let analytic2: f64 = s.shapes2.iter().map(LesionShape::analytic_volume_ml).sum();
            assert!((quant::mtv(&s.gt2) - analytic2).abs() <= vox_ml);
        }
    }

    #[test]
    fn analytic_volume_formula() {
        let sphere = LesionShape {
            center_voxel: [0; 3],
            semi_axes_mm: [10.0; 3],
            exponent: Some(2.0),
            peak_suv: 1.0,
        };
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 1000.0 / 1000.0;
        assert!((sphere.analytic_volume_ml() - exact).abs() < 1e-9);
        let cube = LesionShape {
            exponent: None,
            ..sphere
        };
        assert!((cube.analytic_volume_ml() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            PhantomConfig {
                residual_fraction: 1.5,
                ..cfg(0)
            },
            PhantomConfig {
                lesion_suv_range: [-1.0, 2.0],
                ..cfg(0)
            },
            PhantomConfig {
                lesion_suv_range: [2.0, 3.0],
                ..cfg(0)
            },
            PhantomConfig {
                dims: [0, 4, 4],
                ..cfg(0)
            },
        ];
        for c in bad {
            assert!(generate(&c).is_err());
        }
        let crowded = PhantomConfig {
            n_baseline_lesions: 60,
            ..cfg(0)
        };
        assert!(matches!(generate(&crowded), Err(Error::Placement(_))));
    }

    #[test]
    fn misregistration_zero_is_identity() {
        let s = generate(&cfg(5)).unwrap();
        let m = inject_misregistration(&s, [0.0; 3], [0.0; 3]).unwrap();
        assert_eq!(m, s);
    }

    #[test]
    fn misregistration_shift_moves_centroids() {
        let s = generate(&cfg(5)).unwrap();
        let m = inject_misregistration(&s, [6.0, 0.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!(m.gt1.len(), s.gt1.len());
        for (a, b) in s.gt1.lesions.iter().zip(&m.gt1.lesions) {
            assert_eq!(a.id, b.id);
            assert!((b.centroid_mm[0] - a.centroid_mm[0] - 6.0).abs() < 1e-9);
            assert!((b.centroid_mm[1] - a.centroid_mm[1]).abs() < 1e-9);
            assert_eq!(a.voxels.len(), b.voxels.len());
        }
        let back = inject_misregistration(&m, [-6.0, 0.0, 0.0], [0.0; 3]).unwrap();
        for (a, b) in s.gt1.lesions.iter().zip(&back.gt1.lesions) {
            let d: f64 = (0..3).map(|k| (a.centroid_mm[k] - b.centroid_mm[k]).powi(2)).sum::<f64>().sqrt();
            assert!(d <= 3.0);
        }
        let c = back.pet1.grid().center();
        let p = back.transform.apply(c);
        assert!((0..3).all(|k| (p[k] - c[k]).abs() < 1e-9));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&PhantomConfig {
            n_equivocal: 1,
            ..cfg(9)
        })
        .unwrap();
        s.save(dir.path()).unwrap();
        let back = PatientStudy::load(dir.path()).unwrap();
        assert_eq!(back, s);
        let m = s.manifest();
        assert_eq!(m.lesions.len(), s.gt1.len() + s.gt2.len());
        for (row, l) in m.lesions.iter().filter(|r| r.time_point == 1).zip(&s.gt1.lesions) {
            assert_eq!(row.volume_ml, l.volume_ml);
        }
    }
}

//! Baseline and interim PET metrics computed from lesion sets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lesions::{Lesion, LesionSet, Mask};
use crate::volgrid::{check_same_grid, Volume3D};

/// Volume of the SUVpeak sphere.
pub const DEFAULT_PEAK_ML: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub mtv_ml: f64,
    pub tlg_ml_suv: f64,
    pub suvmax: Option<f64>,
    pub dmax_mm: Option<f64>,
    pub dspleen_mm: Option<f64>,
    pub n_lesions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterimMetrics {
    /// Hottest non-equivocal residual voxel; 0 when nothing remains.
    pub suvmax: f64,
    pub delta_suvmax_pct: Option<f64>,
    pub qpet: Option<f64>,
    pub n_residual: usize,
}

/// How Dmax measures lesion separation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmaxMode {
    #[default]
    Centroid,
    Voxel,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Metabolic tumor volume: total lesion volume in ml.
pub fn mtv(ls: &LesionSet) -> f64 {
    ls.lesions.iter().map(|l| l.volume_ml).sum()
}

/// Total lesion glycolysis: Σ volume · SUVmean.
pub fn tlg(ls: &LesionSet) -> Result<f64> {
    ls.lesions
        .iter()
        .map(|l| {
            l.suv
                .map(|s| l.volume_ml * s.mean)
                .ok_or_else(|| invalid(format!("lesion {} has no SUV statistics", l.id)))
        })
        .sum()
}

pub fn suvmax(ls: &LesionSet) -> Option<f64> {
    ls.lesions
        .iter()
        .filter_map(Lesion::suvmax)
        .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Largest distance between lesions; `None` with fewer than two lesions.
pub fn dmax(ls: &LesionSet, mode: DmaxMode) -> Option<f64> {
    if ls.len() < 2 {
        return None;
    }
    let mut best = 0f64;
    match mode {
        DmaxMode::Centroid => {
            for (i, a) in ls.lesions.iter().enumerate() {
                for b in &ls.lesions[i + 1..] {
                    best = best.max(dist(a.centroid_mm, b.centroid_mm));
                }
            }
        }
        DmaxMode::Voxel => {
            let world: Vec<Vec<[f64; 3]>> = ls
                .lesions
                .iter()
                .map(|l| l.voxels.iter().map(|&v| ls.grid.world(v)).collect())
                .collect();
            for (i, a) in world.iter().enumerate() {
                for b in &world[i + 1..] {
                    for p in a {
                        for q in b {
                            best = best.max(dist(*p, *q));
                        }
                    }
                }
            }
        }
    }
    Some(best)
}

/// Largest lesion-centroid distance to the spleen-mask centroid.
pub fn dspleen(ls: &LesionSet, spleen: &Mask) -> Result<Option<f64>> {
    check_same_grid(&ls.grid, spleen.grid(), "dspleen")?;
    let c = spleen
        .centroid_mm()
        .ok_or_else(|| Error::EmptyMask("spleen".into()))?;
    Ok(ls
        .lesions
        .iter()
        .map(|l| dist(l.centroid_mm, c))
        .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v)))))
}

/// Percentage reduction of SUVmax from baseline to interim (positive = reduction).
pub fn delta_suvmax(suvmax1: f64, suvmax2: f64) -> Result<f64> {
    if !(suvmax1 > 0.0) {
        return Err(invalid(format!("baseline SUVmax must be > 0, got {suvmax1}")));
    }
    Ok(100.0 * (suvmax1 - suvmax2) / suvmax1)
}

fn sphere_radius_mm(peak_ml: f64) -> f64 {
    (3.0 * peak_ml * 1000.0 / (4.0 * std::f64::consts::PI)).cbrt()
}

/// Mean SUV over `voxels` lying within a sphere of `peak_ml` centered on the
/// hottest of them (first in scan order on ties).
pub fn suvpeak_of(pet: &Volume3D, voxels: &[usize], peak_ml: f64) -> f64 {
    let g = pet.grid();
    let mut hottest = voxels[0];
    for &i in voxels {
        if pet.value(i) > pet.value(hottest) {
            hottest = i;
        }
    }
    let center = g.world(hottest);
    let r = sphere_radius_mm(peak_ml);
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in voxels {
        if dist(g.world(i), center) <= r + 1e-9 {
            sum += pet.value(i);
            n += 1;
        }
    }
    sum / n as f64
}

pub fn suvpeak(lesion: &Lesion, pet: &Volume3D, peak_ml: f64) -> Result<f64> {
    if lesion.voxels.is_empty() {
        return Err(Error::EmptyMask(format!("lesion {}", lesion.id)));
    }
    if !(peak_ml > 0.0) {
        return Err(invalid("peak volume must be positive"));
    }
    Ok(suvpeak_of(pet, &lesion.voxels, peak_ml))
}

/// Mean SUV inside an organ mask.
pub fn organ_mean(pet: &Volume3D, organ: &Mask) -> Result<f64> {
    check_same_grid(pet.grid(), organ.grid(), "organ_mean")?;
    let (sum, n) = organ
        .indices()
        .fold((0.0, 0usize), |(s, n), i| (s + pet.value(i), n + 1));
    if n == 0 {
        return Err(Error::EmptyMask("organ reference".into()));
    }
    Ok(sum / n as f64)
}

/// qPET: SUVpeak of the hottest residual lesion over mean liver SUV.
/// `None` when there is no residual lesion.
pub fn qpet(residual: &LesionSet, liver: &Mask, pet2: &Volume3D) -> Result<Option<f64>> {
    check_same_grid(&residual.grid, pet2.grid(), "qpet")?;
    let liver_mean = organ_mean(pet2, liver)?;
    if !(liver_mean > 0.0) {
        return Err(invalid("mean liver SUV must be positive"));
    }
    let mut best: Option<f64> = None;
    for l in &residual.lesions {
        let p = suvpeak(l, pet2, DEFAULT_PEAK_ML)?;
        best = Some(best.map_or(p, |b| b.max(p)));
    }
    Ok(best.map(|p| p / liver_mean))
}

pub fn baseline_metrics(ls: &LesionSet, spleen: Option<&Mask>, mode: DmaxMode) -> Result<BaselineMetrics> {
    let dspleen_mm = match spleen {
        Some(s) if !ls.is_empty() => dspleen(ls, s)?,
        _ => None,
    };
    Ok(BaselineMetrics {
        mtv_ml: mtv(ls),
        tlg_ml_suv: tlg(ls)?,
        suvmax: suvmax(ls),
        dmax_mm: dmax(ls, mode),
        dspleen_mm,
        n_lesions: ls.len(),
    })
}

/// Interim metrics; equivocal lesions are left out of every quantity.
pub fn interim_metrics(
    residual: &LesionSet,
    liver: &Mask,
    pet2: &Volume3D,
    baseline_suvmax: Option<f64>,
) -> Result<InterimMetrics> {
    let confident = residual.non_equivocal();
    let s2 = suvmax(&confident).unwrap_or(0.0);
    let delta = match baseline_suvmax {
        Some(s1) if s1 > 0.0 => Some(delta_suvmax(s1, s2)?),
        _ => None,
    };
    Ok(InterimMetrics {
        suvmax: s2,
        delta_suvmax_pct: delta,
        qpet: qpet(&confident, liver, pet2)?,
        n_residual: confident.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesions::extract_lesions;
    use crate::volgrid::{Grid, Kind};

    fn grid(n: usize) -> Grid {
        Grid::new([n, n, n], [3.0; 3], [0.0; 3]).unwrap()
    }

    fn lesion_at(id: u32, c: [f64; 3], vol: f64) -> Lesion {
        Lesion {
            id,
            voxels: vec![0],
            volume_ml: vol,
            centroid_mm: c,
            suv: None,
            equivocal: false,
            lds: None,
        }
    }

    fn set(lesions: Vec<Lesion>) -> LesionSet {
        LesionSet {
            grid: grid(40),
            lesions,
        }
    }

    #[test]
    fn mtv_examples() {
        let g = grid(5);
        let labels: Vec<u32> = (0..125).map(|i| (i < 10) as u32).collect();
        let ls = extract_lesions(&Volume3D::from_labels(g, &labels).unwrap(), None).unwrap();
        assert!((mtv(&ls) - 0.27).abs() < 1e-12);
        assert_eq!(mtv(&LesionSet::empty(g)), 0.0);
    }

    #[test]
    fn tlg_examples() {
        let g = grid(5);
        let labels: Vec<u32> = (0..125).map(|i| (i < 10) as u32).collect();
        let pet = Volume3D::filled(g, Kind::Suv, 5.0).unwrap();
        let ls = extract_lesions(&Volume3D::from_labels(g, &labels).unwrap(), Some(&pet)).unwrap();
        assert!((tlg(&ls).unwrap() - 1.35).abs() < 1e-12);
        assert_eq!(tlg(&LesionSet::empty(g)).unwrap(), 0.0);
        let bare = extract_lesions(&Volume3D::from_labels(g, &labels).unwrap(), None).unwrap();
        assert!(tlg(&bare).is_err());
    }

    #[test]
    fn dmax_examples() {
        let ls = set(vec![
            lesion_at(1, [0.0, 0.0, 0.0], 1.0),
            lesion_at(2, [30.0, 40.0, 0.0], 1.0),
        ]);
        assert!((dmax(&ls, DmaxMode::Centroid).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(dmax(&set(vec![lesion_at(1, [1.0; 3], 1.0)]), DmaxMode::Centroid), None);
        let ls = set(vec![
            lesion_at(1, [0.0; 3], 1.0),
            lesion_at(2, [10.0, 0.0, 0.0], 1.0),
            lesion_at(3, [25.0, 0.0, 0.0], 1.0),
        ]);
        assert_eq!(dmax(&ls, DmaxMode::Centroid), Some(25.0));
    }

    #[test]
    fn dmax_voxel_mode() {
        let g = grid(10);
        let mut labels = vec![0u32; g.len()];
        labels[g.index(0, 0, 0)] = 1;
        labels[g.index(1, 0, 0)] = 1;
        labels[g.index(5, 0, 0)] = 2;
        let ls = extract_lesions(&Volume3D::from_labels(g, &labels).unwrap(), None).unwrap();
        assert!((dmax(&ls, DmaxMode::Voxel).unwrap() - 15.0).abs() < 1e-12);
        assert!((dmax(&ls, DmaxMode::Centroid).unwrap() - 13.5).abs() < 1e-12);
    }

    #[test]
    fn dspleen_examples() {
        let g = grid(40);
        let spleen = Mask::from_indices(g, [g.index(10, 10, 10)]);
        let c = spleen.centroid_mm().unwrap();
        let ls = LesionSet {
            grid: g,
            lesions: vec![lesion_at(1, c, 1.0)],
        };
        assert_eq!(dspleen(&ls, &spleen).unwrap(), Some(0.0));
        let ls = LesionSet {
            grid: g,
            lesions: vec![lesion_at(1, [c[0] + 36.0, c[1] + 48.0, c[2]], 1.0)],
        };
        assert!((dspleen(&ls, &spleen).unwrap().unwrap() - 60.0).abs() < 1e-12);
        assert!(dspleen(&ls, &Mask::empty(g)).is_err());
    }

    #[test]
    fn delta_examples() {
        assert!((delta_suvmax(10.0, 4.0).unwrap() - 60.0).abs() < 1e-12);
        assert_eq!(delta_suvmax(7.0, 7.0).unwrap(), 0.0);
        assert_eq!(delta_suvmax(7.0, 0.0).unwrap(), 100.0);
        assert!(delta_suvmax(0.0, 1.0).is_err());
    }

    /// Enumerates every lesion voxel and tests the sphere condition directly.
    fn sphere_mean_oracle(pet: &Volume3D, vox: &[usize], ml: f64) -> f64 {
        let g = pet.grid();
        let (mut h, mut hv) = (vox[0], f64::MIN);
        for &i in vox {
            if pet.value(i) > hv {
                hv = pet.value(i);
                h = i;
            }
        }
        let r2 = (ml * 1000.0 * 3.0 / (4.0 * std::f64::consts::PI)).powf(2.0 / 3.0);
        let hc = g.coords(h);
        let inside: Vec<f64> = vox
            .iter()
            .filter(|&&i| {
                let c = g.coords(i);
                let d2: f64 = (0..3)
                    .map(|a| ((c[a] as f64 - hc[a] as f64) * g.spacing[a]).powi(2))
                    .sum();
                d2 <= r2
            })
            .map(|&i| pet.value(i))
            .collect();
        inside.iter().sum::<f64>() / inside.len() as f64
    }

    #[test]
    fn suvpeak_examples() {
        let g = grid(9);
        let all: Vec<usize> = (0..g.len()).collect();
        let uniform = Volume3D::filled(g, Kind::Suv, 5.0).unwrap();
        let l = Lesion {
            voxels: all.clone(),
            ..lesion_at(1, [0.0; 3], 1.0)
        };
        assert!((suvpeak(&l, &uniform, 1.0).unwrap() - 5.0).abs() < 1e-12);

        // lesion of two voxels, far smaller than the 1 ml sphere (radius ~6.2 mm)
        let mut vals = vec![0f32; g.len()];
        vals[g.index(4, 4, 4)] = 6.0;
        vals[g.index(5, 4, 4)] = 4.0;
        let pet = Volume3D::new(g, Kind::Suv, vals).unwrap();
        let small = Lesion {
            voxels: vec![g.index(4, 4, 4), g.index(5, 4, 4)],
            ..lesion_at(1, [0.0; 3], 0.054)
        };
        assert!((suvpeak(&small, &pet, 1.0).unwrap() - 5.0).abs() < 1e-12);

        // peaked lesion vs oracle
        let peaked = Volume3D::from_fn(g, Kind::Suv, |[x, y, z]| {
            let d2 = (x as f64 - 3.0).powi(2) + (y as f64 - 5.0).powi(2) + (z as f64 - 4.0).powi(2);
            (10.0 * (-d2 / 6.0).exp()) as f32
        })
        .unwrap();
        for ml in [0.5, 1.0, 2.0] {
            let got = suvpeak_of(&peaked, &all, ml);
            let want = sphere_mean_oracle(&peaked, &all, ml);
            assert!((got - want).abs() < 1e-12, "{ml}: {got} vs {want}");
        }
    }

    fn qpet_fixture(peaks: &[f32], liver_suv: f32) -> (LesionSet, Mask, Volume3D) {
        let g = grid(12);
        let mut vals = vec![0.5f32; g.len()];
        let mut labels = vec![0u32; g.len()];
        for (k, &p) in peaks.iter().enumerate() {
            let i = g.index(2 + 4 * k, 2, 2);
            vals[i] = p;
            labels[i] = k as u32 + 1;
        }
        let liver: Vec<usize> = (0..4).flat_map(|x| (0..4).map(move |y| g.index(x, y + 8, 8))).collect();
        for &i in &liver {
            vals[i] = liver_suv;
        }
        let pet = Volume3D::new(g, Kind::Suv, vals).unwrap();
        let ls = extract_lesions(&Volume3D::from_labels(g, &labels).unwrap(), Some(&pet)).unwrap();
        (ls, Mask::from_indices(g, liver), pet)
    }

    #[test]
    fn qpet_examples() {
        let (ls, liver, pet) = qpet_fixture(&[2.6], 2.0);
        assert!((qpet(&ls, &liver, &pet).unwrap().unwrap() - 1.3).abs() < 1e-6);
        let (ls, liver, pet) = qpet_fixture(&[2.0], 2.0);
        assert!((qpet(&ls, &liver, &pet).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let (ls, liver, pet) = qpet_fixture(&[1.8, 2.4], 2.0);
        assert!((qpet(&ls, &liver, &pet).unwrap().unwrap() - 1.2).abs() < 1e-6);

        let empty = LesionSet::empty(*pet.grid());
        assert_eq!(qpet(&empty, &liver, &pet).unwrap(), None);
        assert!(qpet(&ls, &Mask::empty(*pet.grid()), &pet).is_err());
    }

    #[test]
    fn interim_excludes_equivocal() {
        let (mut ls, liver, pet) = qpet_fixture(&[1.8, 2.4], 2.0);
        ls.lesions[1].equivocal = true;
        let m = interim_metrics(&ls, &liver, &pet, Some(3.6)).unwrap();
        assert!((m.suvmax - 1.8).abs() < 1e-6);
        assert_eq!(m.n_residual, 1);
        assert!((m.qpet.unwrap() - 0.9).abs() < 1e-6);
        assert!((m.delta_suvmax_pct.unwrap() - 50.0).abs() < 1e-4);

        let none = interim_metrics(&LesionSet::empty(*pet.grid()), &liver, &pet, Some(4.0)).unwrap();
        assert_eq!(none.suvmax, 0.0);
        assert_eq!(none.delta_suvmax_pct, Some(100.0));
        assert_eq!(none.qpet, None);
    }

    #[test]
    fn baseline_empty_set() {
        let g = grid(4);
        let m = baseline_metrics(&LesionSet::empty(g), None, DmaxMode::Centroid).unwrap();
        assert_eq!(m.mtv_ml, 0.0);
        assert_eq!(m.tlg_ml_suv, 0.0);
        assert_eq!(m.dmax_mm, None);
        assert_eq!(m.dspleen_mm, None);
        assert_eq!(m.suvmax, None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tlg_equals_voxelwise_sum_and_is_additive(seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let g = Grid::new([6, 5, 4], [2.0, 3.0, 4.0], [0.0; 3]).unwrap();
                let labels: Vec<u32> = (0..g.len()).map(|_| rng.random_range(0..4u32)).collect();
                let vals: Vec<f32> = (0..g.len()).map(|_| rng.random_range(0.1f32..20.0)).collect();
                let pet = Volume3D::new(g, Kind::Suv, vals).unwrap();
                let ls = extract_lesions(&Volume3D::from_labels(g, &labels).unwrap(), Some(&pet)).unwrap();
                let oracle: f64 = (0..g.len()).filter(|&i| labels[i] > 0).map(|i| pet.value(i) * g.voxel_volume_ml()).sum();
                let t = tlg(&ls).unwrap();
                prop_assert!((t - oracle).abs() <= 1e-9 * oracle.abs().max(1e-300));
                let (a, b) = ls.lesions.split_at(1);
                let la = LesionSet { grid: g, lesions: a.to_vec() };
                let lb = LesionSet { grid: g, lesions: b.to_vec() };
                prop_assert!((tlg(&la).unwrap() + tlg(&lb).unwrap() - t).abs() <= 1e-9 * t);
                prop_assert!((mtv(&la) + mtv(&lb) - mtv(&ls)).abs() <= 1e-12);
            }

            #[test]
            fn dmax_rigid_invariant(pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 2..6), ang in -3.0f64..3.0, t in (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0)) {
                let (s, c) = ang.sin_cos();
                let ls = set(pts.iter().enumerate().map(|(i, p)| lesion_at(i as u32, [p.0, p.1, p.2], 1.0)).collect());
                let moved = set(pts.iter().enumerate().map(|(i, p)| lesion_at(i as u32, [c * p.0 - s * p.1 + t.0, s * p.0 + c * p.1 + t.1, p.2 + t.2], 1.0)).collect());
                let a = dmax(&ls, DmaxMode::Centroid).unwrap();
                let b = dmax(&moved, DmaxMode::Centroid).unwrap();
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
            }

            #[test]
            fn qpet_and_delta_scaling(k in 0.2f64..5.0, s1 in 0.5f64..20.0, s2 in 0.0f64..20.0) {
                let (ls, liver, pet) = qpet_fixture(&[3.0, 4.5], 2.0);
                let q = qpet(&ls, &liver, &pet).unwrap().unwrap();
                let liver_scaled = pet.map(Kind::Suv, |v| if v == 2.0 { (2.0 * k) as f32 } else { v }).unwrap();
                let q2 = qpet(&ls, &liver, &liver_scaled).unwrap().unwrap();
                prop_assert!((q2 - q / k).abs() < 1e-5 * q);
                let d = delta_suvmax(s1, s2).unwrap();
                prop_assert!((delta_suvmax(s1 * k, s2 * k).unwrap() - d).abs() < 1e-9 * (1.0 + d.abs()));
            }
        }
    }
}

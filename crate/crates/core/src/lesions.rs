//! Lesion masks, connected components and overlap metrics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quant;
use crate::volgrid::{check_same_grid, Grid, Kind, Volume3D};

/// Absolute SUV cutoff of the threshold-union rule.
pub const UNION_ABS_SUV: f64 = 2.5;
/// Relative cutoff (fraction of ROI SUVmax) of the threshold-union rule.
pub const UNION_REL_FRACTION: f64 = 0.4;
/// Components below this volume are dropped after segmentation.
pub const DEFAULT_MIN_ML: f64 = 0.2;
/// Probability cut used to binarize network output.
pub const PROB_THRESHOLD: f64 = 0.5;

/// Binary voxel mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Mask> {
        if bits.len() != grid.len() {
            return Err(invalid(format!(
                "mask length {} != {} voxels",
                bits.len(),
                grid.len()
            )));
        }
        Ok(Mask { grid, bits })
    }

    pub fn empty(grid: Grid) -> Mask {
        Mask {
            grid,
            bits: vec![false; grid.len()],
        }
    }

    pub fn from_indices(grid: Grid, idx: impl IntoIterator<Item = usize>) -> Mask {
        let mut m = Mask::empty(grid);
        for i in idx {
            m.bits[i] = true;
        }
        m
    }

    /// Nonzero voxels of a label or probability volume.
    pub fn from_volume(v: &Volume3D) -> Mask {
        Mask {
            grid: *v.grid(),
            bits: v.values().iter().map(|&x| x != 0.0).collect(),
        }
    }

    /// Voxels with value strictly above `t`.
    pub fn threshold(v: &Volume3D, t: f64) -> Mask {
        Mask {
            grid: *v.grid(),
            bits: v.values().iter().map(|&x| x as f64 > t).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn volume_ml(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume_ml()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        check_same_grid(&self.grid, &other.grid, "mask union")?;
        Ok(Mask {
            grid: self.grid,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::from_mask(self.grid, &self.bits).expect("mask grid is valid")
    }

    /// Centroid (mm) of the set voxels, `None` when empty.
    pub fn centroid_mm(&self) -> Option<[f64; 3]> {
        centroid(&self.grid, self.indices())
    }

    /// Morphological dilation by `r` voxels (26-neighbourhood, Chebyshev ball).
    pub fn dilate(&self, r: usize) -> Mask {
        let d = self.grid.dims;
        let mut out = Mask::empty(self.grid);
        let r = r as isize;
        for i in self.indices() {
            let c = self.grid.coords(i);
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if let Some(n) = offset(c, [dx, dy, dz], d) {
                            out.bits[self.grid.index(n[0], n[1], n[2])] = true;
                        }
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn offset(c: [usize; 3], o: [isize; 3], d: [usize; 3]) -> Option<[usize; 3]> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + o[a];
        if v < 0 || v >= d[a] as isize {
            return None;
        }
        n[a] = v as usize;
    }
    Some(n)
}

pub(crate) fn centroid(grid: &Grid, idx: impl Iterator<Item = usize>) -> Option<[f64; 3]> {
    let mut acc = [0f64; 3];
    let mut n = 0usize;
    for i in idx {
        let w = grid.world(i);
        for a in 0..3 {
            acc[a] += w[a];
        }
        n += 1;
    }
    (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64])
}

/// Voxel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

/// One segmented lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub id: u32,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_ml: f64,
    pub centroid_mm: [f64; 3],
    pub suv: Option<SuvStats>,
    #[serde(default)]
    pub equivocal: bool,
    #[serde(default)]
    pub lds: Option<u8>,
}

/// Per-lesion uptake statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuvStats {
    pub max: f64,
    pub mean: f64,
    pub peak: f64,
    /// Linear index of the first voxel (scan order) attaining `max`.
    pub hottest_voxel: usize,
}

impl Lesion {
    pub fn suvmax(&self) -> Option<f64> {
        self.suv.map(|s| s.max)
    }
}

/// Labeled lesions over a grid. Voxel lists are disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSet {
    pub grid: Grid,
    pub lesions: Vec<Lesion>,
}

impl LesionSet {
    pub fn empty(grid: Grid) -> LesionSet {
        LesionSet {
            grid,
            lesions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    pub fn mask(&self) -> Mask {
        Mask::from_indices(
            self.grid,
            self.lesions.iter().flat_map(|l| l.voxels.iter().copied()),
        )
    }

    /// Label volume with lesion `k` (position in the list) painted as `k + 1`.
    pub fn label_volume(&self) -> Volume3D {
        let mut labels = vec![0u32; self.grid.len()];
        for (k, l) in self.lesions.iter().enumerate() {
            for &i in &l.voxels {
                labels[i] = k as u32 + 1;
            }
        }
        Volume3D::from_labels(self.grid, &labels).expect("grid is valid")
    }

    pub fn filtered(&self, keep: impl Fn(&Lesion) -> bool) -> LesionSet {
        LesionSet {
            grid: self.grid,
            lesions: self.lesions.iter().filter(|l| keep(l)).cloned().collect(),
        }
    }

    pub fn non_equivocal(&self) -> LesionSet {
        self.filtered(|l| !l.equivocal)
    }
}

/// Threshold-union rule inside one ROI: a voxel is kept when it lies in the
/// ROI and its SUV exceeds 2.5 or 40 % of the ROI SUVmax.
pub fn threshold_union(pet: &Volume3D, roi: &Mask) -> Result<Mask> {
    check_same_grid(pet.grid(), roi.grid(), "threshold_union")?;
    if pet.kind() != Kind::Suv {
        return Err(invalid(format!("threshold_union needs an SUV volume, got {}", pet.kind())));
    }
    if roi.is_empty() {
        return Err(Error::EmptyMask("threshold_union roi".into()));
    }
    let roi_max = roi
        .indices()
        .map(|i| pet.value(i))
        .fold(f64::NEG_INFINITY, f64::max);
    let rel = UNION_REL_FRACTION * roi_max;
    let mut out = Mask::empty(*pet.grid());
    for i in roi.indices() {
        let s = pet.value(i);
        if s > UNION_ABS_SUV || s > rel {
            out.bits[i] = true;
        }
    }
    Ok(out)
}

/// Applies [`threshold_union`] to every ROI of a label volume separately.
pub fn threshold_union_rois(pet: &Volume3D, rois: &Volume3D) -> Result<Mask> {
    check_same_grid(pet.grid(), rois.grid(), "threshold_union_rois")?;
    let labels = rois.labels();
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut out = Mask::empty(*pet.grid());
    for l in 1..=max_label {
        let roi = Mask::new(*pet.grid(), labels.iter().map(|&x| x == l).collect())?;
        if roi.is_empty() {
            continue;
        }
        let seg = threshold_union(pet, &roi)?;
        out = out.union(&seg)?;
    }
    Ok(out)
}

/// Labels connected foreground components `1..=K`, numbered in scan order of
/// each component's lowest voxel index.
pub fn connected_components(mask: &Mask, conn: Connectivity) -> Volume3D {
    let labels = component_labels(mask, conn);
    Volume3D::from_labels(mask.grid, &labels).expect("grid is valid")
}

pub(crate) fn component_labels(mask: &Mask, conn: Connectivity) -> Vec<u32> {
    let g = mask.grid;
    let offs = conn.offsets();
    let mut labels = vec![0u32; g.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let c = g.coords(i);
            for o in &offs {
                if let Some(n) = offset(c, *o, g.dims) {
                    let j = g.index(n[0], n[1], n[2]);
                    if mask.bits[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    labels
}

/// Number of components in a label volume (its maximum label).
pub fn component_count(labels: &Volume3D) -> usize {
    labels.values().iter().fold(0f32, |m, &v| m.max(v)) as usize
}

/// Deletes components whose volume is below `min_ml` and renumbers the rest
/// `1..=K'` keeping their relative order.
pub fn remove_small(labels: &Volume3D, min_ml: f64) -> Result<Volume3D> {
    if labels.kind() != Kind::Label {
        return Err(invalid("remove_small expects a label volume"));
    }
    let lab = labels.labels();
    let k = lab.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0usize; k + 1];
    for &l in &lab {
        counts[l as usize] += 1;
    }
    let vox_ml = labels.grid().voxel_volume_ml();
    let mut remap = vec![0u32; k + 1];
    let mut next = 0u32;
    for l in 1..=k {
        if counts[l] > 0 && counts[l] as f64 * vox_ml >= min_ml {
            next += 1;
            remap[l] = next;
        }
    }
    let out: Vec<u32> = lab.iter().map(|&l| remap[l as usize]).collect();
    Volume3D::from_labels(*labels.grid(), &out)
}

/// Threshold, label and clean a probability map: `p > threshold`, components
/// under `conn`, then [`remove_small`].
pub fn binarize_probabilities(
    prob: &Volume3D,
    threshold: f64,
    min_ml: f64,
    conn: Connectivity,
) -> Result<Volume3D> {
    let m = Mask::threshold(prob, threshold);
    remove_small(&connected_components(&m, conn), min_ml)
}

/// One lesion per label, with voxel statistics when a PET volume is given.
pub fn extract_lesions(labels: &Volume3D, pet: Option<&Volume3D>) -> Result<LesionSet> {
    if let Some(p) = pet {
        check_same_grid(labels.grid(), p.grid(), "extract_lesions")?;
    }
    let g = *labels.grid();
    let lab = labels.labels();
    let k = lab.iter().copied().max().unwrap_or(0) as usize;
    let mut voxels: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for (i, &l) in lab.iter().enumerate() {
        if l > 0 {
            voxels[l as usize].push(i);
        }
    }
    let vox_ml = g.voxel_volume_ml();
    let mut lesions = Vec::new();
    for (l, vox) in voxels.into_iter().enumerate().skip(1) {
        if vox.is_empty() {
            continue;
        }
        let suv = pet.map(|p| suv_stats(p, &vox));
        lesions.push(Lesion {
            id: l as u32,
            volume_ml: vox.len() as f64 * vox_ml,
            centroid_mm: centroid(&g, vox.iter().copied()).expect("non-empty"),
            voxels: vox,
            suv,
            equivocal: false,
            lds: None,
        });
    }
    Ok(LesionSet { grid: g, lesions })
}

/// SUV statistics of a voxel set; the peak uses the default 1 ml sphere.
pub fn suv_stats(pet: &Volume3D, voxels: &[usize]) -> SuvStats {
    let mut max = f64::NEG_INFINITY;
    let mut hottest = voxels[0];
    let mut sum = 0.0;
    for &i in voxels {
        let v = pet.value(i);
        sum += v;
        if v > max {
            max = v;
            hottest = i;
        }
    }
    SuvStats {
        max,
        mean: sum / voxels.len() as f64,
        peak: quant::suvpeak_of(pet, voxels, quant::DEFAULT_PEAK_ML),
        hottest_voxel: hottest,
    }
}

/// Sørensen–Dice overlap; 1.0 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_same_grid(&a.grid, &b.grid, "dice")?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Total volume (ml) of `a`'s components (26-connected) that share no voxel with `b`.
fn unmatched_component_volume(a: &Mask, b: &Mask) -> f64 {
    let labels = component_labels(a, Connectivity::TwentySix);
    let k = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut size = vec![0usize; k + 1];
    let mut hit = vec![false; k + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            size[l as usize] += 1;
            if b.bits[i] {
                hit[l as usize] = true;
            }
        }
    }
    let vox = (1..=k).filter(|&l| !hit[l]).map(|l| size[l]).sum::<usize>();
    vox as f64 * a.grid.voxel_volume_ml()
}

/// False-positive volume: predicted components without any ground-truth overlap.
pub fn fpv(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_grid(&pred.grid, &gt.grid, "fpv")?;
    Ok(unmatched_component_volume(pred, gt))
}

/// False-negative volume: ground-truth components without any predicted overlap.
pub fn fnv(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_grid(&pred.grid, &gt.grid, "fnv")?;
    Ok(unmatched_component_volume(gt, pred))
}

//! Scalar 3D volumes on a physical grid.
//!
//! A [`Volume3D`] stores one `f32` per voxel in x-fastest order together with
//! its voxel spacing and origin (both in mm). The origin is the physical
//! position of the *center* of voxel `(0, 0, 0)`; voxel `(i, j, k)` sits at
//! `origin + spacing * (i, j, k)`. Metric code converts to `f64` on read.

mod mvol;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use mvol::{read_mvol, read_mvol_from, write_mvol, write_mvol_to, MVOL_MAGIC, MVOL_VERSION};

/// What the voxel values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Suv,
    Hu,
    Label,
    Prob,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Suv => 0,
            Kind::Hu => 1,
            Kind::Label => 2,
            Kind::Prob => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Kind> {
        match code {
            0 => Some(Kind::Suv),
            1 => Some(Kind::Hu),
            2 => Some(Kind::Label),
            3 => Some(Kind::Prob),
            _ => None,
        }
    }
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Kind::Suv => "SUV",
            Kind::Hu => "HU",
            Kind::Label => "LABEL",
            Kind::Prob => "PROB",
        };
        f.write_str(s)
    }
}

/// Voxel lattice geometry shared by volumes, masks and lesion sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Grid> {
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let yz = idx / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// Physical position (mm) of a voxel center.
    #[inline]
    pub fn world(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        self.world_of([c[0] as f64, c[1] as f64, c[2] as f64])
    }

    #[inline]
    pub fn world_of(&self, cont: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * cont[0],
            self.origin[1] + self.spacing[1] * cont[1],
            self.origin[2] + self.spacing[2] * cont[2],
        ]
    }

    /// Continuous voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn voxel_volume_ml(&self) -> f64 {
        self.voxel_volume_mm3() / 1000.0
    }

    /// Physical center of the whole grid.
    pub fn center(&self) -> [f64; 3] {
        self.world_of([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }

    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && close3(self.spacing, other.spacing)
            && close3(self.origin, other.origin)
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox {
            min_voxel: [0, 0, 0],
            max_voxel: [self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1],
        }
    }
}

fn close3(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())))
}

pub(crate) fn check_same_grid(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if a.same_lattice(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!(
            "{what}: {:?}/{:?} vs {:?}/{:?}",
            a.dims, a.spacing, b.dims, b.spacing
        )))
    }
}

/// Inclusive voxel-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_voxel: [usize; 3],
    pub max_voxel: [usize; 3],
}

impl BoundingBox {
    pub fn new(min_voxel: [usize; 3], max_voxel: [usize; 3]) -> Result<BoundingBox> {
        if (0..3).any(|a| min_voxel[a] > max_voxel[a]) {
            return Err(invalid(format!(
                "box min {min_voxel:?} exceeds max {max_voxel:?}"
            )));
        }
        Ok(BoundingBox {
            min_voxel,
            max_voxel,
        })
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.max_voxel[0] - self.min_voxel[0] + 1,
            self.max_voxel[1] - self.min_voxel[1] + 1,
            self.max_voxel[2] - self.min_voxel[2] + 1,
        ]
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.min_voxel[a] <= self.max_voxel[a] && self.max_voxel[a] < dims[a])
    }
}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    kind: Kind,
    values: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, kind: Kind, values: Vec<f32>) -> Result<Volume3D> {
        let grid = Grid::new(grid.dims, grid.spacing, grid.origin)?;
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "values length {} != {} voxels",
                values.len(),
                grid.len()
            )));
        }
        if kind == Kind::Label {
            if let Some(bad) = values
                .iter()
                .find(|&&v| !(v >= 0.0) || v.fract() != 0.0 || v > 16_777_216.0)
            {
                return Err(invalid(format!("label value {bad} is not a non-negative integer")));
            }
        }
        Ok(Volume3D { grid, kind, values })
    }

    pub fn filled(grid: Grid, kind: Kind, value: f32) -> Result<Volume3D> {
        let n = grid.len();
        Volume3D::new(grid, kind, vec![value; n])
    }

    pub fn from_fn(grid: Grid, kind: Kind, mut f: impl FnMut([usize; 3]) -> f32) -> Result<Volume3D> {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Volume3D::new(grid, kind, values)
    }

    /// Label volume from integer labels.
    pub fn from_labels(grid: Grid, labels: &[u32]) -> Result<Volume3D> {
        Volume3D::new(grid, Kind::Label, labels.iter().map(|&l| l as f32).collect())
    }

    /// Binary label volume (0/1) from a boolean mask.
    pub fn from_mask(grid: Grid, mask: &[bool]) -> Result<Volume3D> {
        Volume3D::new(
            grid,
            Kind::Label,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx] as f64
    }

    pub fn labels(&self) -> Vec<u32> {
        self.values.iter().map(|&v| v.max(0.0) as u32).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0.0).collect()
    }

    pub fn with_kind(mut self, kind: Kind) -> Result<Volume3D> {
        self.kind = kind;
        Volume3D::new(self.grid, self.kind, self.values)
    }

    pub fn map(&self, kind: Kind, f: impl Fn(f32) -> f32) -> Result<Volume3D> {
        Volume3D::new(self.grid, kind, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
    }

    /// Trilinear sample at a continuous voxel index; `None` when the point lies
    /// outside the voxel-center hull (more than half a voxel beyond any face).
    pub fn sample_linear(&self, c: [f64; 3]) -> Option<f64> {
        let d = self.grid.dims;
        for a in 0..3 {
            if !(c[a] >= -0.5 && c[a] <= d[a] as f64 - 0.5) {
                return None;
            }
        }
        Some(self.sample_linear_clamped(c))
    }

    /// Trilinear sample with edge clamping (never fails).
    pub fn sample_linear_clamped(&self, c: [f64; 3]) -> f64 {
        let d = self.grid.dims;
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            let u = c[a].clamp(0.0, (d[a] - 1) as f64);
            let f = u.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(d[a] - 1);
            t[a] = u - f;
        }
        let g = &self.grid;
        let v = |x: usize, y: usize, z: usize| self.values[g.index(x, y, z)] as f64;
        let c00 = v(i0[0], i0[1], i0[2]) * (1.0 - t[0]) + v(i1[0], i0[1], i0[2]) * t[0];
        let c10 = v(i0[0], i1[1], i0[2]) * (1.0 - t[0]) + v(i1[0], i1[1], i0[2]) * t[0];
        let c01 = v(i0[0], i0[1], i1[2]) * (1.0 - t[0]) + v(i1[0], i0[1], i1[2]) * t[0];
        let c11 = v(i0[0], i1[1], i1[2]) * (1.0 - t[0]) + v(i1[0], i1[1], i1[2]) * t[0];
        let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
        let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
        c0 * (1.0 - t[2]) + c1 * t[2]
    }

    /// Nearest-voxel sample; `None` outside the grid.
    pub fn sample_nearest(&self, c: [f64; 3]) -> Option<f32> {
        let d = self.grid.dims;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = (c[a] + 0.5).floor();
            if r < 0.0 || r >= d[a] as f64 {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(self.get(idx[0], idx[1], idx[2]))
    }
}

/// Interpolation used when resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Resamples onto a new spacing covering the same physical extent.
///
/// Output dims are `ceil(dims * spacing / target)`. Voxel values live at voxel
/// centers and the outer faces of the first voxel are kept aligned, so the new
/// origin is `origin - spacing/2 + target/2`.
pub fn resample(v: &Volume3D, target_spacing: [f64; 3], mode: Interp) -> Result<Volume3D> {
    if target_spacing.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(invalid(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    if v.kind() == Kind::Label && mode != Interp::Nearest {
        return Err(invalid("label volumes must be resampled with nearest"));
    }
    let g = v.grid();
    let mut dims = [0usize; 3];
    let mut origin = [0f64; 3];
    for a in 0..3 {
        let extent = g.dims[a] as f64 * g.spacing[a] / target_spacing[a];
        // guard against 2.0000000001 -> 3
        dims[a] = ((extent - 1e-9).ceil() as usize).max(1);
        origin[a] = g.origin[a] - g.spacing[a] / 2.0 + target_spacing[a] / 2.0;
    }
    let out_grid = Grid::new(dims, target_spacing, origin)?;
    let ratio = [
        target_spacing[0] / g.spacing[0],
        target_spacing[1] / g.spacing[1],
        target_spacing[2] / g.spacing[2],
    ];
    let values = (0..out_grid.len())
        .map(|i| {
            let j = out_grid.coords(i);
            let u = [
                (j[0] as f64 + 0.5) * ratio[0] - 0.5,
                (j[1] as f64 + 0.5) * ratio[1] - 0.5,
                (j[2] as f64 + 0.5) * ratio[2] - 0.5,
            ];
            match mode {
                Interp::Trilinear => v.sample_linear_clamped(u) as f32,
                Interp::Nearest => {
                    let mut k = [0usize; 3];
                    for a in 0..3 {
                        k[a] = ((u[a] + 0.5).floor().max(0.0) as usize).min(g.dims[a] - 1);
                    }
                    v.get(k[0], k[1], k[2])
                }
            }
        })
        .collect();
    Volume3D::new(out_grid, v.kind(), values)
}

/// Linear rescale of `[lo, hi]` to `[0, 1]`, clamping values outside the range.
pub fn normalize(v: &Volume3D, lo: f64, hi: f64) -> Result<Volume3D> {
    if !(hi > lo) {
        return Err(invalid(format!("normalize needs hi > lo, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    v.map(Kind::Prob, |x| (((x as f64) - lo) / span).clamp(0.0, 1.0) as f32)
}

/// Tightest box around voxels with value strictly above `suv_threshold`;
/// the whole volume when nothing exceeds it.
pub fn foreground_bbox(pet: &Volume3D, suv_threshold: f64) -> BoundingBox {
    let g = pet.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in pet.values().iter().enumerate() {
        if v as f64 > suv_threshold {
            any = true;
            let c = g.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if any {
        BoundingBox {
            min_voxel: lo,
            max_voxel: hi,
        }
    } else {
        g.full_box()
    }
}

/// Extracts the voxels inside `bbox`; spacing is kept and the origin moves to
/// the first retained voxel.
pub fn crop(v: &Volume3D, bbox: &BoundingBox) -> Result<Volume3D> {
    let g = v.grid();
    if !bbox.fits(g.dims) {
        return Err(Error::BoxOutOfBounds {
            min: bbox.min_voxel,
            max: bbox.max_voxel,
            dims: g.dims,
        });
    }
    let ext = bbox.extent();
    let m = bbox.min_voxel;
    let origin = g.world_of([m[0] as f64, m[1] as f64, m[2] as f64]);
    let out = Grid::new(ext, g.spacing, origin)?;
    let mut values = Vec::with_capacity(out.len());
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            let start = g.index(m[0], m[1] + y, m[2] + z);
            values.extend_from_slice(&v.values()[start..start + ext[0]]);
        }
    }
    Volume3D::new(out, v.kind(), values)
}

/// Pads (at the high end of each axis) to at least `dims`, filling with `fill`.
pub fn pad_to(v: &Volume3D, dims: [usize; 3], fill: f32) -> Result<Volume3D> {
    let g = v.grid();
    let out_dims = [
        dims[0].max(g.dims[0]),
        dims[1].max(g.dims[1]),
        dims[2].max(g.dims[2]),
    ];
    if out_dims == g.dims {
        return Ok(v.clone());
    }
    let out = Grid::new(out_dims, g.spacing, g.origin)?;
    Volume3D::from_fn(out, v.kind(), |[x, y, z]| {
        if x < g.dims[0] && y < g.dims[1] && z < g.dims[2] {
            v.get(x, y, z)
        } else {
            fill
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3], s: f64) -> Grid {
        Grid::new(d, [s; 3], [0.0; 3]).unwrap()
    }

    /// Independent trilinear interpolant written directly from the corner
    /// weights, used to check `resample`.
    fn oracle_trilinear(vals: &[f32], d: [usize; 3], u: [f64; 3]) -> f64 {
        let mut acc = 0.0;
        let uc: Vec<f64> = (0..3).map(|a| u[a].clamp(0.0, (d[a] - 1) as f64)).collect();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let w = |p: usize, q: f64| (1.0 - (p as f64 - q).abs()).max(0.0);
                    let wt = w(x, uc[0]) * w(y, uc[1]) * w(z, uc[2]);
                    acc += wt * vals[x + d[0] * (y + d[1] * z)] as f64;
                }
            }
        }
        acc
    }

    #[test]
    fn identity_resample() {
        let g = grid([3, 4, 5], 3.0);
        let v = Volume3D::from_fn(g, Kind::Suv, |[x, y, z]| (x * 7 + y * 3 + z) as f32 * 0.37)
            .unwrap();
        let r = resample(&v, [3.0; 3], Interp::Trilinear).unwrap();
        assert_eq!(r.dims(), v.dims());
        assert_eq!(r.origin(), v.origin());
        for (a, b) in r.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_matches_oracle() {
        let g = grid([2, 2, 2], 6.0);
        let vals: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let v = Volume3D::new(g, Kind::Suv, vals.clone()).unwrap();
        let r = resample(&v, [3.0; 3], Interp::Trilinear).unwrap();
        assert_eq!(r.dims(), [4, 4, 4]);
        assert_eq!(r.origin(), [-1.5, -1.5, -1.5]);
        for i in 0..r.len() {
            let j = r.grid().coords(i);
            // output voxel j center maps to input index (j + 0.5) / 2 - 0.5
            let u = [
                (j[0] as f64 + 0.5) / 2.0 - 0.5,
                (j[1] as f64 + 0.5) / 2.0 - 0.5,
                (j[2] as f64 + 0.5) / 2.0 - 0.5,
            ];
            let want = oracle_trilinear(&vals, [2, 2, 2], u);
            assert!((r.value(i) - want).abs() < 1e-6, "voxel {j:?}: {} vs {want}", r.value(i));
        }
        // a center voxel: u = (0.25, 0.25, 0.25)
        let c = r.get(1, 1, 1) as f64;
        assert!((c - (0.25 + 2.0 * 0.25 + 4.0 * 0.25)).abs() < 1e-6);
    }

    #[test]
    fn nearest_keeps_label_set() {
        let g = grid([5, 4, 3], 4.0);
        let v = Volume3D::from_fn(g, Kind::Label, |[x, y, z]| ((x + y + z) % 3) as f32).unwrap();
        for t in [1.3, 2.0, 3.0, 7.5] {
            let r = resample(&v, [t; 3], Interp::Nearest).unwrap();
            assert!(r.values().iter().all(|&l| l == 0.0 || l == 1.0 || l == 2.0));
        }
        assert!(resample(&v, [3.0; 3], Interp::Trilinear).is_err());
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = Volume3D::filled(grid([2, 2, 2], 1.0), Kind::Suv, 1.0).unwrap();
        assert!(resample(&v, [0.0, 1.0, 1.0], Interp::Trilinear).is_err());
        assert!(resample(&v, [1.0, -2.0, 1.0], Interp::Nearest).is_err());
    }

    #[test]
    fn resample_dims_rule() {
        let g = Grid::new([10, 7, 3], [2.0, 3.0, 5.0], [0.0; 3]).unwrap();
        let v = Volume3D::filled(g, Kind::Suv, 1.0).unwrap();
        let r = resample(&v, [3.0; 3], Interp::Trilinear).unwrap();
        assert_eq!(r.dims(), [7, 7, 5]);
    }

    #[test]
    fn normalize_examples() {
        let g = grid([1, 1, 4], 1.0);
        let suv = Volume3D::new(g, Kind::Suv, vec![15.0, 45.0, 0.0, -1.0]).unwrap();
        let n = normalize(&suv, 0.0, 30.0).unwrap();
        assert_eq!(n.values(), &[0.5, 1.0, 0.0, 0.0]);
        assert_eq!(n.kind(), Kind::Prob);
        let hu = Volume3D::new(g, Kind::Hu, vec![-150.0, 250.0, 50.0, -1000.0]).unwrap();
        let n = normalize(&hu, -150.0, 250.0).unwrap();
        assert_eq!(n.values(), &[0.0, 1.0, 0.5, 0.0]);
        assert!(normalize(&hu, 1.0, 1.0).is_err());
    }

    #[test]
    fn bbox_examples() {
        let g = grid([10, 10, 10], 3.0);
        let mut vals = vec![0f32; 1000];
        vals[g.index(5, 5, 5)] = 0.3;
        let v = Volume3D::new(g, Kind::Suv, vals).unwrap();
        assert_eq!(
            foreground_bbox(&v, 0.2),
            BoundingBox::new([5, 5, 5], [5, 5, 5]).unwrap()
        );

        let zero = Volume3D::filled(g, Kind::Suv, 0.0).unwrap();
        assert_eq!(foreground_bbox(&zero, 0.2), g.full_box());

        let mut vals = vec![0f32; 1000];
        vals[g.index(1, 1, 1)] = 0.5;
        vals[g.index(8, 2, 3)] = 0.5;
        let v = Volume3D::new(g, Kind::Suv, vals).unwrap();
        assert_eq!(
            foreground_bbox(&v, 0.2),
            BoundingBox::new([1, 1, 1], [8, 2, 3]).unwrap()
        );
    }

    #[test]
    fn crop_examples() {
        let g = Grid::new([4, 4, 4], [3.0, 2.0, 1.0], [10.0, 20.0, 30.0]).unwrap();
        let v = Volume3D::from_fn(g, Kind::Suv, |[x, y, z]| (x + 4 * y + 16 * z) as f32).unwrap();
        assert_eq!(crop(&v, &g.full_box()).unwrap(), v);

        let c = crop(&v, &BoundingBox::new([1, 1, 1], [2, 2, 2]).unwrap()).unwrap();
        assert_eq!(c.dims(), [2, 2, 2]);
        assert_eq!(c.spacing(), v.spacing());
        assert_eq!(c.origin(), [13.0, 22.0, 31.0]);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(c.get(x, y, z), v.get(x + 1, y + 1, z + 1));
                }
            }
        }
        assert!(crop(&v, &BoundingBox::new([1, 1, 1], [4, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn label_invariant_enforced() {
        let g = grid([2, 1, 1], 1.0);
        assert!(Volume3D::new(g, Kind::Label, vec![1.0, 0.5]).is_err());
        assert!(Volume3D::new(g, Kind::Label, vec![1.0, -1.0]).is_err());
        assert!(Volume3D::new(g, Kind::Suv, vec![1.0]).is_err());
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn pad_keeps_content() {
        let g = grid([2, 3, 1], 1.0);
        let v = Volume3D::from_fn(g, Kind::Suv, |[x, y, _]| (x + 10 * y) as f32).unwrap();
        let p = pad_to(&v, [4, 3, 2], -1.0).unwrap();
        assert_eq!(p.dims(), [4, 3, 2]);
        assert_eq!(p.get(1, 2, 0), 21.0);
        assert_eq!(p.get(3, 0, 0), -1.0);
        assert_eq!(p.get(0, 0, 1), -1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_bounded_and_monotone(a in -1e4f32..1e4, b in -1e4f32..1e4, lo in -500.0f64..500.0, span in 0.1f64..800.0) {
                let g = grid([2, 1, 1], 1.0);
                let v = Volume3D::new(g, Kind::Suv, vec![a.min(b), a.max(b)]).unwrap();
                let n = normalize(&v, lo, lo + span).unwrap();
                let o = n.values();
                prop_assert!(o.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!(o[0] <= o[1]);
            }

            #[test]
            fn bbox_ignores_background_permutation(seed in 0u64..1000) {
                use rand::{seq::SliceRandom, SeedableRng};
                let g = grid([6, 5, 4], 3.0);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut vals = vec![0.1f32; g.len()];
                vals[g.index(2, 1, 3)] = 3.0;
                vals[g.index(4, 4, 0)] = 1.0;
                let fg: Vec<usize> = vec![g.index(2, 1, 3), g.index(4, 4, 0)];
                let a = foreground_bbox(&Volume3D::new(g, Kind::Suv, vals.clone()).unwrap(), 0.2);
                let mut bg: Vec<f32> = (0..g.len() - 2).map(|i| (i % 7) as f32 * 0.02).collect();
                bg.shuffle(&mut rng);
                let mut it = bg.into_iter();
                for (i, v) in vals.iter_mut().enumerate() {
                    if !fg.contains(&i) {
                        *v = it.next().unwrap();
                    }
                }
                let b = foreground_bbox(&Volume3D::new(g, Kind::Suv, vals).unwrap(), 0.2);
                prop_assert_eq!(a, b);
            }
        }
    }
}

//! Rigid alignment of time points and mask propagation through registration (MPDR).
//!
//! A [`RigidTransform`] maps points of the *fixed* frame (PET2) into the
//! *moving* frame (PET1): `p_moving = R · p_fixed + t`. Resampling a moving
//! volume into the fixed frame therefore reads `moving(T(p))` at every fixed
//! voxel center `p`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lesions::{component_labels, Connectivity, Mask};
use crate::volgrid::{check_same_grid, Grid, Interp, Kind, Volume3D};

pub type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

fn matvec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation `Rz(c) · Ry(b) · Rx(a)`, angles in radians.
pub fn euler_rotation(angles: [f64; 3]) -> Mat3 {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// Proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> RigidTransform {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: [f64; 3]) -> Result<RigidTransform> {
        let rrt = matmul(&rotation, &transpose(&rotation));
        let ortho = (0..3).all(|i| (0..3).all(|j| (rrt[i][j] - (i == j) as u8 as f64).abs() < 1e-6));
        if !ortho || (det(&rotation) - 1.0).abs() > 1e-6 {
            return Err(invalid("rotation must be orthonormal with det +1"));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    /// Rotation by Euler angles (degrees) about `center`, followed by `shift_mm`:
    /// `p ↦ R (p − c) + c + shift`.
    pub fn about_center(angles_deg: [f64; 3], shift_mm: [f64; 3], center: [f64; 3]) -> RigidTransform {
        let rotation = euler_rotation(angles_deg.map(f64::to_radians));
        let rc = matvec(&rotation, center);
        RigidTransform {
            rotation,
            translation: [
                center[0] - rc[0] + shift_mm[0],
                center[1] - rc[1] + shift_mm[1],
                center[2] - rc[2] + shift_mm[2],
            ],
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = matvec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let t = matvec(&self.rotation, other.translation);
        RigidTransform {
            rotation: matmul(&self.rotation, &other.rotation),
            translation: [
                t[0] + self.translation[0],
                t[1] + self.translation[1],
                t[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        let t = matvec(&rt, self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn determinant(&self) -> f64 {
        det(&self.rotation)
    }

    /// Rotation angle of `R` in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        let tr = self.rotation[0][0] + self.rotation[1][1] + self.rotation[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t[0],
            t[1], t[2],
        ]
    }

    pub fn from_array(a: &[f64]) -> Result<RigidTransform> {
        if a.len() != 12 {
            return Err(invalid(format!("transform needs 12 numbers, got {}", a.len())));
        }
        RigidTransform::new(
            [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]],
            [a[9], a[10], a[11]],
        )
    }
}

fn fill_value(kind: Kind) -> f32 {
    match kind {
        Kind::Hu => -1000.0,
        _ => 0.0,
    }
}

/// Resamples `v` onto `out_grid`, reading `v` at `t(p)` for each output voxel
/// center `p`. Points falling outside `v` take the background value of its kind
/// (−1000 HU for CT, 0 otherwise).
pub fn apply_transform_to(v: &Volume3D, t: &RigidTransform, mode: Interp, out_grid: &Grid) -> Result<Volume3D> {
    if v.kind() == Kind::Label && mode != Interp::Nearest {
        return Err(invalid("label volumes must be transformed with nearest"));
    }
    let fill = fill_value(v.kind());
    let g = v.grid();
    let values = (0..out_grid.len())
        .map(|i| {
            let q = g.continuous_index(t.apply(out_grid.world(i)));
            match mode {
                Interp::Trilinear => v.sample_linear(q).map_or(fill, |x| x as f32),
                Interp::Nearest => v.sample_nearest(q).unwrap_or(fill),
            }
        })
        .collect();
    Volume3D::new(*out_grid, v.kind(), values)
}

/// [`apply_transform_to`] on the volume's own grid.
pub fn apply_transform(v: &Volume3D, t: &RigidTransform, mode: Interp) -> Result<Volume3D> {
    apply_transform_to(v, t, mode, v.grid())
}

/// Registration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Downsampling factors, coarse to fine.
    pub levels: Vec<usize>,
    pub max_iterations: usize,
    /// Half-width of the translation grid searched at the coarsest level.
    pub search_mm: f64,
    /// Spacing of the translation grid.
    pub search_step_mm: f64,
    /// Stop a level once the step length falls below this fraction of its spacing.
    pub tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: vec![4, 2, 1],
            max_iterations: 150,
            search_mm: 12.0,
            search_step_mm: 6.0,
            tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub converged: bool,
    pub final_mse: f64,
    pub iterations: usize,
}

/// Block-average downsampling by an integer factor; the new origin sits at the
/// center of the first block.
pub fn downsample(v: &Volume3D, factor: usize) -> Result<Volume3D> {
    if factor <= 1 {
        return Ok(v.clone());
    }
    let g = v.grid();
    let dims = g.dims.map(|d| d.div_ceil(factor));
    let f = factor as f64;
    let spacing = [g.spacing[0] * f, g.spacing[1] * f, g.spacing[2] * f];
    let origin = [
        g.origin[0] + (f - 1.0) / 2.0 * g.spacing[0],
        g.origin[1] + (f - 1.0) / 2.0 * g.spacing[1],
        g.origin[2] + (f - 1.0) / 2.0 * g.spacing[2],
    ];
    let out = Grid::new(dims, spacing, origin)?;
    let mut sums = vec![0f64; out.len()];
    let mut counts = vec![0u32; out.len()];
    for (i, &x) in v.values().iter().enumerate() {
        let c = g.coords(i);
        let o = out.index(c[0] / factor, c[1] / factor, c[2] / factor);
        sums[o] += x as f64;
        counts[o] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (s / n as f64) as f32)
        .collect();
    Volume3D::new(out, v.kind(), values)
}

struct Problem<'a> {
    moving: &'a Volume3D,
    fixed: &'a Volume3D,
    fixed_world: Vec<[f64; 3]>,
    scale: f64,
    center: [f64; 3],
    /// Radius (mm) converting rotation angles to arc length.
    radius: f64,
}

impl Problem<'_> {
    fn transform(&self, p: &[f64; 6]) -> RigidTransform {
        let angles = [p[0] / self.radius, p[1] / self.radius, p[2] / self.radius];
        RigidTransform::about_center(angles.map(f64::to_degrees), [p[3], p[4], p[5]], self.center)
    }

    fn mse(&self, p: &[f64; 6]) -> f64 {
        let t = self.transform(p);
        let mg = self.moving.grid();
        let mut acc = 0.0;
        let mut n = 0usize;
        for (i, w) in self.fixed_world.iter().enumerate() {
            if let Some(m) = self.moving.sample_linear(mg.continuous_index(t.apply(*w))) {
                let d = (m - self.fixed.value(i)) / self.scale;
                acc += d * d;
                n += 1;
            }
        }
        // require a reasonable overlap so the optimizer cannot slide out of view
        if n * 4 < self.fixed_world.len() {
            return f64::INFINITY;
        }
        acc / n as f64
    }

    fn gradient(&self, p: &[f64; 6], h: f64) -> [f64; 6] {
        let mut g = [0.0; 6];
        for k in 0..6 {
            let mut a = *p;
            let mut b = *p;
            a[k] += h;
            b[k] -= h;
            g[k] = (self.mse(&a) - self.mse(&b)) / (2.0 * h);
        }
        g
    }
}

/// Rigid registration minimizing the mean squared difference of normalized
/// intensities with multi-resolution gradient descent over three rotation
/// angles and three translations. The coarsest level starts from the best
/// point of a translation grid.
pub fn register_rigid(moving: &Volume3D, fixed: &Volume3D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    if moving.kind() != fixed.kind() {
        return Err(invalid(format!(
            "registration needs volumes of the same kind ({} vs {})",
            moving.kind(),
            fixed.kind()
        )));
    }
    if cfg.levels.is_empty() {
        return Err(invalid("registration needs at least one level"));
    }
    let scale = {
        let m = fixed.max_value().abs().max(moving.max_value().abs());
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let fg = fixed.grid();
    let center = fg.center();
    let radius = (0..3)
        .map(|a| fg.dims[a] as f64 * fg.spacing[a] / 2.0)
        .fold(0.0, f64::max)
        .max(1.0);

    let mut params = [0.0f64; 6];
    let mut converged = false;
    let mut iterations = 0;
    let mut final_mse = f64::INFINITY;
    for (level_no, &factor) in cfg.levels.iter().enumerate() {
        let m = downsample(moving, factor)?;
        let f = downsample(fixed, factor)?;
        let fixed_world: Vec<[f64; 3]> = (0..f.len()).map(|i| f.grid().world(i)).collect();
        let prob = Problem {
            moving: &m,
            fixed: &f,
            fixed_world,
            scale,
            center,
            radius,
        };
        let spacing = f.spacing().iter().cloned().fold(0.0, f64::max);

        if level_no == 0 && cfg.search_mm > 0.0 && cfg.search_step_mm > 0.0 {
            let n = (cfg.search_mm / cfg.search_step_mm).floor() as i64;
            let mut best = (prob.mse(&params), params);
            for iz in -n..=n {
                for iy in -n..=n {
                    for ix in -n..=n {
                        let mut p = params;
                        p[3] += ix as f64 * cfg.search_step_mm;
                        p[4] += iy as f64 * cfg.search_step_mm;
                        p[5] += iz as f64 * cfg.search_step_mm;
                        let c = prob.mse(&p);
                        if c < best.0 {
                            best = (c, p);
                        }
                    }
                }
            }
            params = best.1;
        }

        let mut cost = prob.mse(&params);
        let mut step = spacing;
        let min_step = cfg.tolerance * spacing;
        let h = 0.25 * spacing;
        converged = false;
        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let g = prob.gradient(&params, h);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                converged = true;
                break;
            }
            // backtracking on a normalized descent direction
            loop {
                let mut trial = params;
                for k in 0..6 {
                    trial[k] -= step * g[k] / norm;
                }
                let c = prob.mse(&trial);
                if c < cost {
                    params = trial;
                    cost = c;
                    step *= 1.25;
                    break;
                }
                step *= 0.5;
                if step < min_step {
                    break;
                }
            }
            if step < min_step {
                converged = true;
                break;
            }
        }
        final_mse = cost;
    }
    let probe = Problem {
        moving,
        fixed,
        fixed_world: Vec::new(),
        scale,
        center,
        radius,
    };
    Ok(RegistrationResult {
        transform: probe.transform(&params),
        converged,
        final_mse,
        iterations,
    })
}

/// Resamples a PET1 label volume into the PET2 frame (`t` maps PET2 points to
/// PET1 points) and returns its foreground mask.
pub fn propagate_mask(labels1: &Volume3D, t: &RigidTransform, pet2_grid: &Grid) -> Result<Mask> {
    let moved = apply_transform_to(labels1, t, Interp::Nearest, pet2_grid)?;
    Ok(Mask::from_volume(&moved))
}

/// Keeps the PET2 components that share at least one voxel with the
/// propagated PET1 mask; survivors are renumbered in their original order.
pub fn mpdr(pred1_in_pet2: &Mask, pred2_labels: &Volume3D) -> Result<Volume3D> {
    check_same_grid(pred1_in_pet2.grid(), pred2_labels.grid(), "mpdr")?;
    let lab = pred2_labels.labels();
    let k = lab.iter().copied().max().unwrap_or(0) as usize;
    let mut hit = vec![false; k + 1];
    for (i, &l) in lab.iter().enumerate() {
        if l > 0 && pred1_in_pet2.get(i) {
            hit[l as usize] = true;
        }
    }
    let mut remap = vec![0u32; k + 1];
    let mut next = 0;
    for l in 1..=k {
        if hit[l] {
            next += 1;
            remap[l] = next;
        }
    }
    let out: Vec<u32> = lab.iter().map(|&l| remap[l as usize]).collect();
    Volume3D::from_labels(*pred2_labels.grid(), &out)
}

/// MPDR on a binary PET2 mask (components labeled with `conn`).
pub fn mpdr_mask(pred1_in_pet2: &Mask, pred2: &Mask, conn: Connectivity) -> Result<Volume3D> {
    let labels = Volume3D::from_labels(*pred2.grid(), &component_labels(pred2, conn))?;
    mpdr(pred1_in_pet2, &labels)
}

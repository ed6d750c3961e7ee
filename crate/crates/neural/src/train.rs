//! Patch-based toy training on phantom studies.

use std::rc::Rc;

use laspet_core::phantom::PatientStudy;
use laspet_core::{LesionSet, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::loss::joint_loss;
use crate::model::{lasnet_forward, LasNetConfig, LasNetParams};
use crate::optim::{cosine_lr, AdamW, OptimConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// SUV window mapped to [0, 1].
pub const PET_WINDOW: (f64, f64) = (0.0, 30.0);
/// HU window mapped to [0, 1].
pub const CT_WINDOW: (f64, f64) = (-150.0, 250.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Probability of centering a patch on a lesion voxel.
    pub lesion_fraction: f64,
    pub augment: bool,
    pub max_rotation_deg: f64,
    pub zoom_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            seed: 0,
            optim: OptimConfig::default(),
            lesion_fraction: 8.0 / 9.0,
            augment: true,
            max_rotation_deg: 25.0,
            zoom_range: [0.8, 1.2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        let [lo, hi] = self.zoom_range;
        if !(0.0..=1.0).contains(&self.lesion_fraction) || !(lo > 0.0 && lo <= hi) || !(self.max_rotation_deg >= 0.0) {
            return Err(NeuralError::Config(format!(
                "lesion_fraction {} zoom {:?} rotation {}",
                self.lesion_fraction, self.zoom_range, self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

pub struct TrainOutput {
    pub params: LasNetParams,
    pub loss_trace: Vec<f64>,
}

fn window(v: f32, (lo, hi): (f64, f64)) -> f64 {
    ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Two-channel network input `[2, Z, Y, X]` from a PET (SUV) and CT (HU)
/// volume on the same grid.
pub fn input_tensor(pet: &Volume3D, ct: &Volume3D) -> Result<Tensor> {
    if pet.grid() != ct.grid() {
        return Err(NeuralError::Shape("PET and CT grids differ".into()));
    }
    let [nx, ny, nz] = pet.dims();
    let mut data: Vec<f64> = pet.values().iter().map(|&v| window(v, PET_WINDOW)).collect();
    data.extend(ct.values().iter().map(|&v| window(v, CT_WINDOW)));
    Tensor::new(&[2, nz, ny, nx], data)
}

/// Binary lesion target `[1, Z, Y, X]`.
pub fn target_tensor(lesions: &LesionSet) -> Tensor {
    let [nx, ny, nz] = lesions.grid.dims;
    let mask = lesions.mask();
    let data = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, nz, ny, nx], data).expect("mask matches grid")
}

/// One co-registered training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x1: Tensor,
    pub x2: Tensor,
    pub y1: Tensor,
    pub y2: Tensor,
}

impl Sample {
    pub fn from_study(s: &PatientStudy) -> Result<Sample> {
        Ok(Sample {
            x1: input_tensor(&s.pet1, &s.ct1)?,
            x2: input_tensor(&s.pet2, &s.ct2)?,
            y1: target_tensor(&s.gt1),
            y2: target_tensor(&s.gt2),
        })
    }

    fn spatial(&self) -> [usize; 3] {
        let s = self.x1.shape();
        [s[1], s[2], s[3]]
    }

    fn foreground(&self) -> Vec<usize> {
        let (a, b) = (self.y1.data(), self.y2.data());
        (0..a.len()).filter(|&i| a[i] > 0.5 || b[i] > 0.5).collect()
    }
}

/// Cube of side `p` starting at `start`; voxels outside the source are 0.
pub fn crop(t: &Tensor, start: [usize; 3], p: usize) -> Tensor {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; c * p * p * p];
    for ch in 0..c {
        for z in 0..p {
            let zs = start[0] + z;
            if zs >= d {
                continue;
            }
            for y in 0..p {
                let ys = start[1] + y;
                if ys >= h {
                    continue;
                }
                let xn = p.min(w.saturating_sub(start[2]));
                let src = ((ch * d + zs) * h + ys) * w + start[2];
                let dst = ((ch * p + z) * p + y) * p;
                out[dst..dst + xn].copy_from_slice(&t.data()[src..src + xn]);
            }
        }
    }
    Tensor::new(&[c, p, p, p], out).expect("sized by patch")
}

/// Random in-plane rotation, zoom and axis flips shared by all tensors of a
/// sample.
struct Augmentation {
    flip: [bool; 3],
    angle: f64,
    zoom: f64,
}

impl Augmentation {
    fn draw(cfg: &TrainConfig, rng: &mut impl Rng) -> Augmentation {
        let r = cfg.max_rotation_deg.to_radians();
        Augmentation {
            flip: [rng.random::<bool>(), rng.random::<bool>(), rng.random::<bool>()],
            angle: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            zoom: rng.random_range(cfg.zoom_range[0]..=cfg.zoom_range[1]),
        }
    }

    /// Source position (z, y, x) in the patch for output voxel `q`.
    fn source(&self, q: [usize; 3], p: usize) -> [f64; 3] {
        let c = (p as f64 - 1.0) / 2.0;
        let mut u = [q[0] as f64 - c, q[1] as f64 - c, q[2] as f64 - c];
        for a in 0..3 {
            if self.flip[a] {
                u[a] = -u[a];
            }
        }
        let (sn, cs) = self.angle.sin_cos();
        let y = (cs * u[1] - sn * u[2]) / self.zoom;
        let x = (sn * u[1] + cs * u[2]) / self.zoom;
        [u[0] / self.zoom + c, y + c, x + c]
    }

    fn apply(&self, t: &Tensor, nearest: bool) -> Tensor {
        let s = t.shape();
        let (ch, p) = (s[0], s[1]);
        let at = |c: usize, z: isize, y: isize, x: isize| -> f64 {
            let n = p as isize;
            if z < 0 || y < 0 || x < 0 || z >= n || y >= n || x >= n {
                return 0.0;
            }
            t.data()[((c * p + z as usize) * p + y as usize) * p + x as usize]
        };
        let mut out = vec![0.0; t.len()];
        for z in 0..p {
            for y in 0..p {
                for x in 0..p {
                    let src = self.source([z, y, x], p);
                    for c in 0..ch {
                        let v = if nearest {
                            at(c, src[0].round() as isize, src[1].round() as isize, src[2].round() as isize)
                        } else {
                            let f = [src[0].floor(), src[1].floor(), src[2].floor()];
                            let d = [src[0] - f[0], src[1] - f[1], src[2] - f[2]];
                            let mut acc = 0.0;
                            for corner in 0..8 {
                                let o = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
                                let wgt: f64 = (0..3).map(|a| if o[a] == 1 { d[a] } else { 1.0 - d[a] }).product();
                                if wgt > 0.0 {
                                    acc += wgt
                                        * at(
                                            c,
                                            f[0] as isize + o[0] as isize,
                                            f[1] as isize + o[1] as isize,
                                            f[2] as isize + o[2] as isize,
                                        );
                                }
                            }
                            acc
                        };
                        out[((c * p + z) * p + y) * p + x] = v;
                    }
                }
            }
        }
        Tensor::new(s, out).expect("same shape")
    }
}

fn sample_patch(sample: &Sample, p: usize, cfg: &TrainConfig, fg: &[usize], rng: &mut impl Rng) -> Sample {
    let dims = sample.spatial();
    let start: [usize; 3] = if !fg.is_empty() && rng.random::<f64>() < cfg.lesion_fraction {
        let v = fg[rng.random_range(0..fg.len())];
        let c = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
        std::array::from_fn(|a| c[a].saturating_sub(p / 2).min(dims[a].saturating_sub(p)))
    } else {
        std::array::from_fn(|a| rng.random_range(0..=dims[a].saturating_sub(p)))
    };
    let mut out = Sample {
        x1: crop(&sample.x1, start, p),
        x2: crop(&sample.x2, start, p),
        y1: crop(&sample.y1, start, p),
        y2: crop(&sample.y2, start, p),
    };
    if cfg.augment {
        let aug = Augmentation::draw(cfg, rng);
        out = Sample {
            x1: aug.apply(&out.x1, false),
            x2: aug.apply(&out.x2, false),
            y1: aug.apply(&out.y1, true),
            y2: aug.apply(&out.y2, true),
        };
    }
    out
}

/// Trains a freshly initialized network; see [`train_from`].
pub fn train_toy(studies: &[PatientStudy], net: &LasNetConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    let params = LasNetParams::init(net, cfg.seed)?;
    let samples = studies.iter().map(Sample::from_study).collect::<Result<Vec<_>>>()?;
    train_from(params, &samples, cfg, |_, _| {})
}

/// Runs `cfg.steps` AdamW steps on random patches of `samples`, calling
/// `on_step(step, loss)` after each. Deterministic for a fixed seed.
pub fn train_from(
    mut params: LasNetParams,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NeuralError::Config("no training studies".into()));
    }
    let p = params.config.patch_size;
    let fgs: Vec<Vec<usize>> = samples.iter().map(Sample::foreground).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut opt = AdamW::new(&params.registry, &cfg.optim)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let k = rng.random_range(0..samples.len());
        let patch = sample_patch(&samples[k], p, cfg, &fgs[k], &mut rng);
        let tape = Tape::new();
        let b = params.registry.bind(&tape);
        let x1 = tape.constant(patch.x1);
        let x2 = tape.constant(patch.x2);
        let (l1, l2) = lasnet_forward(&b, &params.config, x1, x2)?;
        let loss = joint_loss(&tape, Rc::new(patch.y1), Rc::new(patch.y2), l1, l2)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(NeuralError::Config(format!("loss diverged at step {step}")));
        }
        let grads = b.collect_grads(&tape.backward(loss));
        drop(b);
        let lr = cosine_lr(cfg.optim.lr, step, cfg.steps);
        opt.step(&mut params.registry, &grads, lr)?;
        trace.push(value);
        on_step(step, value);
    }
    Ok(TrainOutput {
        params,
        loss_trace: trace,
    })
}

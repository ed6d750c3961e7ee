//! Dual-branch longitudinal segmentation network.
//!
//! Both branches run the same encoder-decoder weights. The interim branch
//! additionally receives cross-attention from the baseline branch at every
//! transformer stage and refines its decoder gate coefficients with the
//! baseline coefficients. Nothing flows from the interim branch back into
//! the baseline branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::layers::{self, StageSpec};
use crate::params::{normal_tensor, Bound, ParamTag, Registry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LasNetConfig {
    /// Input channels per branch (PET and CT).
    pub in_channels: usize,
    /// Feature width of the first stage; doubles per stage.
    pub base_dim: usize,
    /// Transformer blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub patch_size: usize,
    /// MLP hidden width as a multiple of the stage width.
    pub mlp_ratio: usize,
    pub leaky_slope: f64,
}

impl Default for LasNetConfig {
    fn default() -> Self {
        LasNetConfig {
            in_channels: 2,
            base_dim: 12,
            depths: vec![2, 2, 2],
            heads: vec![2, 2, 2],
            window_size: 3,
            patch_size: 24,
            mlp_ratio: 2,
            leaky_slope: 0.01,
        }
    }
}

impl LasNetConfig {
    pub fn n_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.base_dim << s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NeuralError::Config(m));
        if self.in_channels == 0 || self.base_dim == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, base_dim and mlp_ratio must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!("{} depths vs {} head counts", self.depths.len(), self.heads.len()));
        }
        if self.depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        for (s, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_dim(s) % h != 0 {
                return bad(format!("stage {s} width {} is not divisible by {h} heads", self.stage_dim(s)));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky slope {} must be non-negative", self.leaky_slope));
        }
        self.stage_dims([self.patch_size; 3]).map(|_| ())
    }

    /// Grid of every transformer stage for an input of `dims`.
    pub fn stage_dims(&self, dims: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let ws = self.window_size;
        if ws == 0 {
            return Err(NeuralError::Config("window size must be positive".into()));
        }
        (0..self.n_stages())
            .map(|s| {
                let f = 2usize << s;
                if dims.iter().any(|&d| d % f != 0 || (d / f) % ws != 0 || d / f == 0) {
                    return Err(NeuralError::Config(format!(
                        "input {dims:?} at stage {s} (1/{f}) is not divisible by window {ws}"
                    )));
                }
                Ok([dims[0] / f, dims[1] / f, dims[2] / f])
            })
            .collect()
    }

    fn stage_specs(&self, dims: [usize; 3]) -> Result<Vec<StageSpec>> {
        Ok(self
            .stage_dims(dims)?
            .into_iter()
            .enumerate()
            .map(|(s, g)| StageSpec {
                dims: g,
                dim: self.stage_dim(s),
                heads: self.heads[s],
                ws: self.window_size,
                depth: self.depths[s],
                mlp_hidden: self.stage_dim(s) * self.mlp_ratio,
            })
            .collect())
    }

    /// Skip width for decoder level `j` (coarse to fine).
    fn decoder_dim(&self, j: usize) -> usize {
        let n = self.n_stages();
        if j + 1 < n {
            self.stage_dim(n - 2 - j)
        } else {
            self.base_dim
        }
    }
}

/// Network weights: one shared copy for both branches plus cross-branch
/// parameters used only by the interim branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LasNetParams {
    pub config: LasNetConfig,
    pub registry: Registry,
}

impl LasNetParams {
    pub fn init(config: &LasNetConfig, seed: u64) -> Result<LasNetParams> {
        Self::build(config, seed, true)
    }

    /// The same network without any cross-branch parameters.
    pub fn init_single_branch(config: &LasNetConfig, seed: u64) -> Result<LasNetParams> {
        Self::build(config, seed, false)
    }

    fn build(config: &LasNetConfig, seed: u64, cross: bool) -> Result<LasNetParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut reg = Registry::new();
        let c = config.base_dim;
        let shared = ParamTag::Shared;
        let specs = config.stage_specs([config.patch_size; 3])?;

        layers::register_conv_block(&mut reg, "enc0", config.in_channels, c, shared, rng)?;
        layers::register_linear(&mut reg, "embed", 8 * config.in_channels, c, true, shared, rng)?;
        for (s, spec) in specs.iter().enumerate() {
            layers::register_shared_path(&mut reg, &format!("stage{s}"), spec, rng)?;
            if cross {
                layers::register_lawa_cross(&mut reg, &format!("lawa{s}"), spec, rng)?;
            }
            if s + 1 < specs.len() {
                layers::register_layer_norm(&mut reg, &format!("merge{s}.norm"), 8 * spec.dim, shared)?;
                layers::register_linear(&mut reg, &format!("merge{s}.red"), 8 * spec.dim, 2 * spec.dim, false, shared, rng)?;
            }
        }
        let deepest = config.stage_dim(specs.len() - 1);
        layers::register_conv_block(&mut reg, "bottleneck", deepest, deepest, shared, rng)?;
        let mut cin = deepest;
        for j in 0..specs.len() {
            let cs = config.decoder_dim(j);
            layers::register_linear(&mut reg, &format!("up{j}"), cin, 8 * cs, true, shared, rng)?;
            layers::register_gate(&mut reg, &format!("gate{j}"), cs, rng)?;
            if cross {
                layers::register_laag(&mut reg, &format!("laag{j}"))?;
            }
            layers::register_conv_block(&mut reg, &format!("dec{j}"), 2 * cs, cs, shared, rng)?;
            cin = cs;
        }
        reg.add("head.w", shared, normal_tensor(&[1, c, 1, 1, 1], (1.0 / c as f64).sqrt(), rng))?;
        reg.add("head.b", shared, Tensor::zeros(&[1]))?;
        Ok(LasNetParams {
            config: config.clone(),
            registry: reg,
        })
    }

    pub fn shared_count(&self) -> usize {
        self.registry.count(ParamTag::Shared)
    }

    pub fn cross_count(&self) -> usize {
        self.registry.count(ParamTag::Cross)
    }

    pub fn total_count(&self) -> usize {
        self.registry.total()
    }

    /// Forward pass without gradient recording; returns both logit maps
    /// `[1, D, H, W]`.
    pub fn predict(&self, pet1ct: &Tensor, pet2ct: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::inference();
        let b = self.registry.bind(&tape);
        let x1 = tape.constant(pet1ct.clone());
        let x2 = tape.constant(pet2ct.clone());
        let (l1, l2) = lasnet_forward(&b, &self.config, x1, x2)?;
        Ok(((*tape.value(l1)).clone(), (*tape.value(l2)).clone()))
    }
}

/// Both logit maps `[1, D, H, W]` for inputs `[in_channels, D, H, W]`.
pub fn lasnet_forward(b: &Bound, cfg: &LasNetConfig, x1: Var, x2: Var) -> Result<(Var, Var)> {
    let t = b.tape;
    let (s1, s2) = (t.shape(x1), t.shape(x2));
    if s1 != s2 || s1.len() != 4 || s1[0] != cfg.in_channels {
        return Err(NeuralError::Shape(format!(
            "inputs {s1:?} and {s2:?} must both be [{}, D, H, W]",
            cfg.in_channels
        )));
    }
    let dims = [s1[1], s1[2], s1[3]];
    let specs = cfg.stage_specs(dims)?;
    let slope = cfg.leaky_slope;

    let e1 = layers::conv_block(b, "enc0", x1, slope)?;
    let e2 = layers::conv_block(b, "enc0", x2, slope)?;

    let embed = |x: Var| -> Result<Var> {
        let tok = layers::volume_to_tokens(t, x)?;
        let tok = layers::space_to_depth(t, tok, dims)?;
        layers::linear(b, "embed", tok)
    };
    let (mut z1, mut z2) = (embed(x1)?, embed(x2)?);
    let mut skips: Vec<(Var, Var)> = Vec::with_capacity(specs.len());
    for (s, spec) in specs.iter().enumerate() {
        let (o1, o2) = layers::lawa_block(b, &format!("stage{s}"), &format!("lawa{s}"), z1, z2, spec)?;
        skips.push((
            layers::tokens_to_volume(t, o1, spec.dims)?,
            layers::tokens_to_volume(t, o2, spec.dims)?,
        ));
        if s + 1 < specs.len() {
            let merge = |z: Var| -> Result<Var> {
                let z = layers::space_to_depth(t, z, spec.dims)?;
                let z = layers::layer_norm(b, &format!("merge{s}.norm"), z)?;
                layers::linear(b, &format!("merge{s}.red"), z)
            };
            z1 = merge(o1)?;
            z2 = merge(o2)?;
        }
    }

    let (deep1, deep2) = skips[specs.len() - 1];
    let mut d1 = layers::conv_block(b, "bottleneck", deep1, slope)?;
    let mut d2 = layers::conv_block(b, "bottleneck", deep2, slope)?;
    let mut grid = specs[specs.len() - 1].dims;
    for j in 0..specs.len() {
        let (x1s, x2s) = if j + 1 < specs.len() { skips[specs.len() - 2 - j] } else { (e1, e2) };
        let up = |d: Var| -> Result<Var> {
            let tok = layers::volume_to_tokens(t, d)?;
            let tok = layers::linear(b, &format!("up{j}"), tok)?;
            layers::depth_to_space(t, tok, grid)
        };
        let (g1, g2) = (up(d1)?, up(d2)?);
        let gate = format!("gate{j}");
        let laag = format!("laag{j}");
        let (gx1, gx2) = if b.has(&format!("{laag}.k")) {
            let out = layers::laag(b, &gate, &laag, g1, x1s, g2, x2s)?;
            (out.x1, out.x2)
        } else {
            let a1 = layers::attention_gate(b, &gate, g1, x1s)?;
            let a2 = layers::attention_gate(b, &gate, g2, x2s)?;
            (layers::apply_gate(t, x1s, a1)?, layers::apply_gate(t, x2s, a2)?)
        };
        d1 = layers::conv_block(b, &format!("dec{j}"), t.concat0(&[g1, gx1])?, slope)?;
        d2 = layers::conv_block(b, &format!("dec{j}"), t.concat0(&[g2, gx2])?, slope)?;
        grid = [grid[0] * 2, grid[1] * 2, grid[2] * 2];
    }
    let head = |d: Var| -> Result<Var> { t.add_prefix(t.conv3d(d, b.p("head.w"))?, b.p("head.b")) };
    Ok((head(d1)?, head(d2)?))
}

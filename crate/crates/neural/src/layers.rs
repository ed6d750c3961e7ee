//! Network building blocks. Each block has a `register_*` function adding its
//! parameters under a name prefix and a forward function reading them back
//! from a [`Bound`] registry.
//!
//! Feature maps are `[C, D, H, W]`; token sequences are `[S, C]`.

use std::rc::Rc;

use rand::Rng;

use crate::error::{NeuralError, Result};
use crate::params::{normal_tensor, Bound, ParamTag, Registry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::windows::{relative_position_index, WindowGeom};

pub const NORM_EPS: f64 = 1e-5;
/// Side of the cubic kernel refining interim-scan gate coefficients.
pub const LAAG_KERNEL: usize = 7;

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

// ---- layout ----

/// `[C, D, H, W]` to `[S, C]`.
pub fn volume_to_tokens(t: &Tape, x: Var) -> Result<Var> {
    let s = t.shape(x);
    let (c, n) = (s[0], s[1..].iter().product::<usize>());
    let idx: Vec<usize> = (0..n).flat_map(|v| (0..c).map(move |ch| ch * n + v)).collect();
    t.gather(x, Rc::new(idx), &[n, c])
}

/// `[S, C]` to `[C, D, H, W]`.
pub fn tokens_to_volume(t: &Tape, x: Var, dims: [usize; 3]) -> Result<Var> {
    let s = t.shape(x);
    let (n, c) = (s[0], s[1]);
    if n != dims.iter().product::<usize>() {
        return Err(NeuralError::Shape(format!("{n} tokens do not fill {dims:?}")));
    }
    let idx: Vec<usize> = (0..c).flat_map(|ch| (0..n).map(move |v| v * c + ch)).collect();
    t.gather(x, Rc::new(idx), &[c, dims[0], dims[1], dims[2]])
}

/// Folds every 2x2x2 block of tokens into one token with 8x the channels.
pub fn space_to_depth(t: &Tape, x: Var, dims: [usize; 3]) -> Result<Var> {
    let c = t.shape(x)[1];
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(NeuralError::Shape(format!("grid {dims:?} is not even")));
    }
    let [d, h, w] = dims;
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    let mut idx = Vec::with_capacity(d * h * w * c);
    for z in 0..d2 {
        for y in 0..h2 {
            for xx in 0..w2 {
                for q in 0..8 {
                    let (dz, dy, dx) = (q / 4, (q / 2) % 2, q % 2);
                    let src = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                    idx.extend((0..c).map(|ch| src * c + ch));
                }
            }
        }
    }
    t.gather(x, Rc::new(idx), &[d2 * h2 * w2, 8 * c])
}

/// Tokens `[s, 8c]` on grid `dims` to a feature map `[c, 2d, 2h, 2w]`.
pub fn depth_to_space(t: &Tape, x: Var, dims: [usize; 3]) -> Result<Var> {
    let c8 = t.shape(x)[1];
    if c8 % 8 != 0 {
        return Err(NeuralError::Shape(format!("{c8} channels are not divisible by 8")));
    }
    let c = c8 / 8;
    let [d, h, w] = dims;
    let mut idx = Vec::with_capacity(8 * d * h * w * c);
    for ch in 0..c {
        for z in 0..2 * d {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let tok = ((z / 2) * h + y / 2) * w + xx / 2;
                    let q = ((z % 2) * 2 + y % 2) * 2 + xx % 2;
                    idx.push(tok * c8 + q * c + ch);
                }
            }
        }
    }
    t.gather(x, Rc::new(idx), &[c, 2 * d, 2 * h, 2 * w])
}

// ---- dense layers ----

pub fn register_linear(
    reg: &mut Registry,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    tag: ParamTag,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    reg.add(&join(prefix, "w"), tag, normal_tensor(&[fan_in, fan_out], std, rng))?;
    if bias {
        reg.add(&join(prefix, "b"), tag, Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

pub fn linear(b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let bias_name = join(prefix, "b");
    let bias = b.has(&bias_name).then(|| b.p(&bias_name));
    b.tape.linear(x, b.p(&join(prefix, "w")), bias)
}

pub fn register_layer_norm(reg: &mut Registry, prefix: &str, dim: usize, tag: ParamTag) -> Result<()> {
    reg.add(&join(prefix, "g"), tag, Tensor::full(&[dim], 1.0))?;
    reg.add(&join(prefix, "b"), tag, Tensor::zeros(&[dim]))
}

pub fn layer_norm(b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let t = b.tape;
    let y = t.layer_norm_last(x, NORM_EPS);
    let y = t.mul_suffix(y, b.p(&join(prefix, "g")))?;
    t.add_suffix(y, b.p(&join(prefix, "b")))
}

pub fn register_mlp(
    reg: &mut Registry,
    prefix: &str,
    dim: usize,
    hidden: usize,
    tag: ParamTag,
    rng: &mut impl Rng,
) -> Result<()> {
    register_linear(reg, &join(prefix, "fc1"), dim, hidden, true, tag, rng)?;
    register_linear(reg, &join(prefix, "fc2"), hidden, dim, true, tag, rng)
}

pub fn mlp(b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(b, &join(prefix, "fc1"), x)?;
    let h = b.tape.gelu(h);
    linear(b, &join(prefix, "fc2"), h)
}

// ---- convolution ----

pub fn register_conv(
    reg: &mut Registry,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    tag: ParamTag,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = (2.0 / (cin * k * k * k) as f64).sqrt();
    reg.add(name, tag, normal_tensor(&[cout, cin, k, k, k], std, rng))
}

pub fn register_conv_block(
    reg: &mut Registry,
    prefix: &str,
    cin: usize,
    cout: usize,
    tag: ParamTag,
    rng: &mut impl Rng,
) -> Result<()> {
    register_conv(reg, &join(prefix, "c1"), cin, cout, 3, tag, rng)?;
    register_conv(reg, &join(prefix, "c2"), cout, cout, 3, tag, rng)?;
    if cin != cout {
        register_conv(reg, &join(prefix, "skip"), cin, cout, 1, tag, rng)?;
    }
    Ok(())
}

/// Two conv-norm-activation units with a residual connection. The skip is
/// the identity when channel counts agree and a 1x1x1 projection otherwise.
pub fn conv_block(b: &Bound, prefix: &str, x: Var, slope: f64) -> Result<Var> {
    let t = b.tape;
    let unit = |x: Var, name: &str| -> Result<Var> {
        let y = t.conv3d(x, b.p(&join(prefix, name)))?;
        let y = t.instance_norm(y, NORM_EPS);
        Ok(t.leaky_relu(y, slope))
    };
    let y = unit(unit(x, "c1")?, "c2")?;
    let skip_name = join(prefix, "skip");
    let skip = if b.has(&skip_name) { t.conv3d(x, b.p(&skip_name))? } else { x };
    t.add(skip, y)
}

// ---- windowed attention ----

#[derive(Debug, Clone, Copy)]
pub struct AttnSpec {
    pub geom: WindowGeom,
    pub heads: usize,
    pub dim: usize,
}

impl AttnSpec {
    pub fn new(geom: WindowGeom, heads: usize, dim: usize) -> Result<AttnSpec> {
        if heads == 0 || dim % heads != 0 {
            return Err(NeuralError::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(AttnSpec { geom, heads, dim })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn rel_table_len(ws: usize) -> usize {
    (2 * ws - 1).pow(3)
}

fn register_rel_bias(reg: &mut Registry, name: &str, ws: usize, heads: usize, tag: ParamTag, rng: &mut impl Rng) -> Result<()> {
    reg.add(name, tag, normal_tensor(&[rel_table_len(ws), heads], 0.02, rng))
}

/// Windowed scaled-dot-product attention. `q` holds queries at column
/// offset `q_off`; `kv` holds keys at `k_off` and values at `v_off`.
/// Returns the per-token output `[S, dim]` (before projection) and the
/// attention weights `[n_windows * heads, T, T]`.
#[allow(clippy::too_many_arguments)]
fn attend(
    b: &Bound,
    rel_name: &str,
    q: Var,
    q_off: usize,
    kv: Var,
    k_off: usize,
    v_off: usize,
    spec: &AttnSpec,
) -> Result<(Var, Var)> {
    let t = b.tape;
    let g = &spec.geom;
    let (nw, tn, heads, hd) = (g.n_windows(), g.tokens_per_window(), spec.heads, spec.head_dim());
    let (sq, skv) = (t.shape(q), t.shape(kv));
    if sq[0] != g.n_tokens() || skv[0] != g.n_tokens() {
        return Err(NeuralError::Shape(format!(
            "attention over {} tokens got inputs {sq:?} and {skv:?}",
            g.n_tokens()
        )));
    }
    let src = g.source();
    let split = |width: usize, off: usize| -> Rc<Vec<usize>> {
        let mut idx = Vec::with_capacity(nw * heads * tn * hd);
        for w in 0..nw {
            for h in 0..heads {
                for p in 0..tn {
                    let base = src[w * tn + p] * width + off + h * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        Rc::new(idx)
    };
    let shape = [nw * heads, tn, hd];
    let qh = t.gather(q, split(sq[1], q_off), &shape)?;
    let kh = t.gather(kv, split(skv[1], k_off), &shape)?;
    let vh = t.gather(kv, split(skv[1], v_off), &shape)?;

    let scores = t.bmm(qh, kh, true)?;
    let scores = t.scale(scores, 1.0 / (hd as f64).sqrt());
    let scores = t.reshape(scores, &[nw, heads, tn, tn])?;
    let rpi = relative_position_index(g.ws);
    let bias_idx: Vec<usize> = (0..heads)
        .flat_map(|h| rpi.iter().map(move |&r| r * heads + h))
        .collect();
    let bias = t.gather(b.p(rel_name), Rc::new(bias_idx), &[heads, tn, tn])?;
    let mut scores = t.add_suffix(scores, bias)?;
    if let Some(mask) = g.shift_mask() {
        let mut full = Vec::with_capacity(nw * heads * tn * tn);
        for w in 0..nw {
            for _ in 0..heads {
                full.extend_from_slice(&mask[w * tn * tn..(w + 1) * tn * tn]);
            }
        }
        let m = t.constant(Tensor::new(&[nw, heads, tn, tn], full)?);
        scores = t.add(scores, m)?;
    }
    let scores = t.reshape(scores, &[nw * heads, tn, tn])?;
    let attn = t.softmax_last(scores);
    let out = t.bmm(attn, vh, false)?;

    let slot = g.slot();
    let mut back = Vec::with_capacity(g.n_tokens() * spec.dim);
    for &sl in &slot {
        let (w, p) = (sl / tn, sl % tn);
        for h in 0..heads {
            let base = ((w * heads + h) * tn + p) * hd;
            back.extend(base..base + hd);
        }
    }
    let merged = t.gather(out, Rc::new(back), &[g.n_tokens(), spec.dim])?;
    Ok((merged, attn))
}

pub fn register_w_msa(reg: &mut Registry, prefix: &str, spec: &AttnSpec, tag: ParamTag, rng: &mut impl Rng) -> Result<()> {
    let c = spec.dim;
    register_linear(reg, &join(prefix, "qkv"), c, 3 * c, true, tag, rng)?;
    register_rel_bias(reg, &join(prefix, "rel"), spec.geom.ws, spec.heads, tag, rng)?;
    register_linear(reg, &join(prefix, "proj"), c, c, true, tag, rng)
}

/// Windowed multi-head self-attention on `x [S, C]`; also returns the
/// attention weights.
pub fn w_msa_with_attn(b: &Bound, prefix: &str, x: Var, spec: &AttnSpec) -> Result<(Var, Var)> {
    let c = spec.dim;
    let qkv = linear(b, &join(prefix, "qkv"), x)?;
    let (out, attn) = attend(b, &join(prefix, "rel"), qkv, 0, qkv, c, 2 * c, spec)?;
    Ok((linear(b, &join(prefix, "proj"), out)?, attn))
}

pub fn w_msa(b: &Bound, prefix: &str, x: Var, spec: &AttnSpec) -> Result<Var> {
    Ok(w_msa_with_attn(b, prefix, x, spec)?.0)
}

pub fn register_w_mca(reg: &mut Registry, prefix: &str, spec: &AttnSpec, tag: ParamTag, rng: &mut impl Rng) -> Result<()> {
    let c = spec.dim;
    register_linear(reg, &join(prefix, "q"), c, c, true, tag, rng)?;
    register_linear(reg, &join(prefix, "kv"), c, 2 * c, true, tag, rng)?;
    register_rel_bias(reg, &join(prefix, "rel"), spec.geom.ws, spec.heads, tag, rng)?;
    register_linear(reg, &join(prefix, "proj"), c, c, true, tag, rng)
}

/// Windowed cross-attention: queries from `q_src`, keys and values from
/// `kv_src`.
pub fn w_mca(b: &Bound, prefix: &str, q_src: Var, kv_src: Var, spec: &AttnSpec) -> Result<Var> {
    let c = spec.dim;
    if b.tape.shape(q_src) != b.tape.shape(kv_src) {
        return Err(NeuralError::Shape(format!(
            "cross-attention sources {:?} and {:?} differ",
            b.tape.shape(q_src),
            b.tape.shape(kv_src)
        )));
    }
    let q = linear(b, &join(prefix, "q"), q_src)?;
    let kv = linear(b, &join(prefix, "kv"), kv_src)?;
    let (out, _) = attend(b, &join(prefix, "rel"), q, 0, kv, 0, c, spec)?;
    linear(b, &join(prefix, "proj"), out)
}

// ---- transformer blocks ----

/// One resolution level of the windowed transformer encoder.
#[derive(Debug, Clone, Copy)]
pub struct StageSpec {
    pub dims: [usize; 3],
    pub dim: usize,
    pub heads: usize,
    pub ws: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

impl StageSpec {
    /// Attention geometry of block `i`: odd blocks use shifted windows
    /// unless one window already covers the grid.
    pub fn attn(&self, i: usize) -> Result<AttnSpec> {
        let shift = if i % 2 == 1 && self.dims.iter().any(|&d| d > self.ws) { self.ws / 2 } else { 0 };
        AttnSpec::new(WindowGeom::new(self.dims, self.ws, shift)?, self.heads, self.dim)
    }
}

pub fn register_swin_block(reg: &mut Registry, prefix: &str, spec: &AttnSpec, hidden: usize, tag: ParamTag, rng: &mut impl Rng) -> Result<()> {
    register_layer_norm(reg, &join(prefix, "norm1"), spec.dim, tag)?;
    register_w_msa(reg, &join(prefix, "attn"), spec, tag, rng)?;
    register_layer_norm(reg, &join(prefix, "norm2"), spec.dim, tag)?;
    register_mlp(reg, &join(prefix, "mlp"), spec.dim, hidden, tag, rng)
}

/// Pre-norm transformer block: attention and MLP, each with a residual.
pub fn swin_block(b: &Bound, prefix: &str, x: Var, spec: &AttnSpec) -> Result<Var> {
    let t = b.tape;
    let h = layer_norm(b, &join(prefix, "norm1"), x)?;
    let x = t.add(x, w_msa(b, &join(prefix, "attn"), h, spec)?)?;
    let h = layer_norm(b, &join(prefix, "norm2"), x)?;
    t.add(x, mlp(b, &join(prefix, "mlp"), h)?)
}

pub fn register_shared_path(reg: &mut Registry, prefix: &str, stage: &StageSpec, rng: &mut impl Rng) -> Result<()> {
    for i in 0..stage.depth {
        register_swin_block(reg, &format!("{prefix}.block{i}"), &stage.attn(i)?, stage.mlp_hidden, ParamTag::Shared, rng)?;
    }
    Ok(())
}

/// The self-attention blocks of one stage, used by both branches.
pub fn shared_path(b: &Bound, prefix: &str, x: Var, stage: &StageSpec) -> Result<Var> {
    let mut x = x;
    for i in 0..stage.depth {
        x = swin_block(b, &format!("{prefix}.block{i}"), x, &stage.attn(i)?)?;
    }
    Ok(x)
}

pub fn register_lawa_cross(reg: &mut Registry, prefix: &str, stage: &StageSpec, rng: &mut impl Rng) -> Result<()> {
    let tag = ParamTag::Cross;
    register_layer_norm(reg, &join(prefix, "norm_q"), stage.dim, tag)?;
    register_layer_norm(reg, &join(prefix, "norm_kv"), stage.dim, tag)?;
    register_w_mca(reg, &join(prefix, "attn"), &stage.attn(0)?, tag, rng)?;
    register_layer_norm(reg, &join(prefix, "norm_mlp"), stage.dim, tag)?;
    register_mlp(reg, &join(prefix, "mlp"), stage.dim, stage.mlp_hidden, tag, rng)
}

/// Longitudinally-aware window attention for one stage. The baseline
/// features pass through the shared path only; the interim features pass
/// through the same shared path and then receive cross-attention from the
/// baseline output, followed by an MLP, each with a residual.
pub fn lawa_block(
    b: &Bound,
    shared_prefix: &str,
    cross_prefix: &str,
    z1: Var,
    z2: Var,
    stage: &StageSpec,
) -> Result<(Var, Var)> {
    let t = b.tape;
    let z1o = shared_path(b, shared_prefix, z1, stage)?;
    let z2s = shared_path(b, shared_prefix, z2, stage)?;
    let q = layer_norm(b, &join(cross_prefix, "norm_q"), z2s)?;
    let kv = layer_norm(b, &join(cross_prefix, "norm_kv"), z1o)?;
    let c = t.add(z2s, w_mca(b, &join(cross_prefix, "attn"), q, kv, &stage.attn(0)?)?)?;
    let h = layer_norm(b, &join(cross_prefix, "norm_mlp"), c)?;
    let z2o = t.add(c, mlp(b, &join(cross_prefix, "mlp"), h)?)?;
    Ok((z1o, z2o))
}

// ---- gates ----

pub fn register_gate(reg: &mut Registry, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
    let tag = ParamTag::Shared;
    register_conv(reg, &join(prefix, "wg"), channels, channels, 1, tag, rng)?;
    register_conv(reg, &join(prefix, "wx"), channels, channels, 1, tag, rng)?;
    reg.add(&join(prefix, "b"), tag, Tensor::zeros(&[channels]))?;
    register_conv(reg, &join(prefix, "psi"), channels, 1, 1, tag, rng)?;
    reg.add(&join(prefix, "psi_b"), tag, Tensor::zeros(&[1]))
}

/// Pre-sigmoid gate coefficients `[1, D, H, W]` from gating signal `g` and
/// skip features `x`.
pub fn gate_logits(b: &Bound, prefix: &str, g: Var, x: Var) -> Result<Var> {
    let t = b.tape;
    let a = t.add(t.conv3d(g, b.p(&join(prefix, "wg")))?, t.conv3d(x, b.p(&join(prefix, "wx")))?)?;
    let a = t.relu(t.add_prefix(a, b.p(&join(prefix, "b")))?);
    t.add_prefix(t.conv3d(a, b.p(&join(prefix, "psi")))?, b.p(&join(prefix, "psi_b")))
}

/// Gate coefficients in (0, 1).
pub fn attention_gate(b: &Bound, prefix: &str, g: Var, x: Var) -> Result<Var> {
    Ok(b.tape.sigmoid(gate_logits(b, prefix, g, x)?))
}

/// Scales every channel of `x [C, D, H, W]` by `alpha [1, D, H, W]`.
pub fn apply_gate(t: &Tape, x: Var, alpha: Var) -> Result<Var> {
    let s = t.shape(alpha);
    let a = t.reshape(alpha, &s[1..])?;
    t.mul_suffix(x, a)
}

pub fn register_laag(reg: &mut Registry, prefix: &str) -> Result<()> {
    let k = LAAG_KERNEL;
    reg.add(&join(prefix, "k"), ParamTag::Cross, Tensor::zeros(&[1, 2, k, k, k]))?;
    reg.add(&join(prefix, "b"), ParamTag::Cross, Tensor::zeros(&[1]))
}

/// Longitudinally-aware attention gate. The baseline skip is gated by its
/// own coefficients; the interim coefficients are refined by a convolution
/// over both coefficient maps before gating. Returns the gated skips and the
/// coefficient maps actually applied.
pub fn laag(
    b: &Bound,
    gate_prefix: &str,
    laag_prefix: &str,
    g1: Var,
    x1: Var,
    g2: Var,
    x2: Var,
) -> Result<LaagOutput> {
    let t = b.tape;
    let l1 = gate_logits(b, gate_prefix, g1, x1)?;
    let l2 = gate_logits(b, gate_prefix, g2, x2)?;
    let a1 = t.sigmoid(l1);
    let a2 = t.sigmoid(l2);
    let both = t.concat0(&[a1, a2])?;
    let r = t.add_prefix(t.conv3d(both, b.p(&join(laag_prefix, "k")))?, b.p(&join(laag_prefix, "b")))?;
    let a2r = t.sigmoid(t.add(l2, r)?);
    Ok(LaagOutput {
        x1: apply_gate(t, x1, a1)?,
        x2: apply_gate(t, x2, a2r)?,
        alpha1: a1,
        alpha2: a2r,
    })
}

pub struct LaagOutput {
    pub x1: Var,
    pub x2: Var,
    pub alpha1: Var,
    pub alpha2: Var,
}

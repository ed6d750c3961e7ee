//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NeuralError, Result};
use crate::layers::{self, AttnSpec};
use crate::loss::joint_loss;
use crate::params::{normal_tensor, Bound, ParamTag, Registry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::windows::WindowGeom;

/// Relative error `|a - n| / max(|a|, |n|)` between analytic and numeric
/// gradients of every input, measured in the Euclidean norm. Both vectors
/// vanishing counts as an exact match.
pub fn relative_errors(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&Tape, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(NeuralError::Shape("gradient check needs a scalar function".into()));
    }
    let grads = tape.backward(out);

    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (k, n) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x0;
            *n = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        errors.push(if scale == 0.0 { 0.0 } else { norm(&diff) / scale });
    }
    Ok(errors)
}

/// Contracts `x` with a fixed weight tensor so any output becomes a scalar
/// with a generic gradient.
pub fn project(t: &Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone().reshaped(&t.shape(x))?);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

/// Worst relative error of one operation over its random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub draws: usize,
    pub max_error: f64,
}

fn max_error_over(
    draws: usize,
    seed: u64,
    build: impl Fn(&mut ChaCha8Rng) -> (Registry, Vec<Tensor>),
    f: impl Fn(&Bound, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000).wrapping_add(d as u64));
        let (reg, extra) = build(&mut r);
        let n = reg.len();
        let mut inputs: Vec<Tensor> = reg.iter().map(|p| p.value.clone()).collect();
        inputs.extend(extra);
        let run = |t: &Tape, v: &[Var]| -> Result<Var> {
            let b = Bound::from_vars(t, &reg, v[..n].to_vec())?;
            f(&b, &v[n..])
        };
        let shape = {
            let t = Tape::inference();
            let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = run(&t, &vars)?;
            t.shape(out)
        };
        let w = normal_tensor(&shape, 1.0, &mut r);
        let errs = relative_errors(&inputs, h, |t, v| {
            let y = run(t, v)?;
            project(t, y, &w)
        })?;
        worst = errs.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    normal_tensor(shape, 1.0, r)
}

/// Smallest distance of a gate's ReLU inputs from the kink. Central
/// differences are only meaningful when every input stays on one side of it.
fn gate_margin(reg: &Registry, pairs: &[(&Tensor, &Tensor)]) -> f64 {
    let t = Tape::inference();
    let b = reg.bind(&t);
    let pre = |g: &Tensor, x: &Tensor| -> Result<Var> {
        let a = t.conv3d(t.constant(g.clone()), b.p("g.wg"))?;
        let a = t.add(a, t.conv3d(t.constant(x.clone()), b.p("g.wx"))?)?;
        t.add_prefix(a, b.p("g.b"))
    };
    pairs
        .iter()
        .map(|&(g, x)| pre(g, x).expect("gate shapes match"))
        .flat_map(|v| t.value(v).data().to_vec())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Draws gate inputs until every ReLU input sits at least `100 h` from zero.
fn smooth_gate_draw(r: &mut ChaCha8Rng, h: f64, laag: bool) -> (Registry, Vec<Tensor>) {
    loop {
        let mut reg = Registry::new();
        layers::register_gate(&mut reg, "g", 2, r).expect("valid gate");
        let n = if laag {
            layers::register_laag(&mut reg, "l").expect("valid laag");
            let k = reg.get_mut("l.k").expect("registered");
            *k = normal_tensor(k.shape(), 0.1, r);
            4
        } else {
            2
        };
        let x: Vec<Tensor> = (0..n).map(|_| randn(&[2, 3, 3, 3], r)).collect();
        let pairs: Vec<(&Tensor, &Tensor)> = x.chunks(2).map(|c| (&c[0], &c[1])).collect();
        if gate_margin(&reg, &pairs) >= 100.0 * h {
            return (reg, x);
        }
    }
}

fn spec(shift: usize) -> Result<AttnSpec> {
    AttnSpec::new(WindowGeom::new([3, 3, 6], 3, shift)?, 2, 4)
}

/// Finite-difference checks of every trainable building block: conv block,
/// shifted and unshifted windowed self-attention, windowed cross-attention,
/// the attention gate, the LAAG refinement and the joint loss. Each runs on
/// `draws` random small inputs with step `h`; gate draws are kept away from
/// the ReLU kink.
pub fn layer_suite(draws: usize, h: f64) -> Result<Vec<OpCheck>> {
    let empty = Registry::new;
    let mut out = Vec::new();
    let mut push = |op: &'static str, e: f64| out.push(OpCheck { op, draws, max_error: e });

    push(
        "conv block",
        max_error_over(
            draws,
            1,
            |r| {
                let mut reg = empty();
                layers::register_conv_block(&mut reg, "cb", 2, 3, ParamTag::Shared, r).expect("valid block");
                (reg, vec![randn(&[2, 3, 3, 4], r)])
            },
            |b, v| layers::conv_block(b, "cb", v[0], 0.01),
            h,
        )?,
    );
    for (op, shift) in [("w-msa", 0), ("w-msa shifted", 1)] {
        let s = spec(shift)?;
        push(
            op,
            max_error_over(
                draws,
                2 + shift as u64,
                |r| {
                    let mut reg = empty();
                    layers::register_w_msa(&mut reg, "a", &s, ParamTag::Shared, r).expect("valid attention");
                    (reg, vec![randn(&[54, 4], r)])
                },
                |b, v| layers::w_msa(b, "a", v[0], &s),
                h,
            )?,
        );
    }
    let s = spec(0)?;
    push(
        "w-mca",
        max_error_over(
            draws,
            4,
            |r| {
                let mut reg = empty();
                layers::register_w_mca(&mut reg, "x", &s, ParamTag::Cross, r).expect("valid attention");
                (reg, vec![randn(&[54, 4], r), randn(&[54, 4], r)])
            },
            |b, v| layers::w_mca(b, "x", v[0], v[1], &s),
            h,
        )?,
    );
    push(
        "attention gate",
        max_error_over(
            draws,
            5,
            |r| smooth_gate_draw(r, h, false),
            |b, v| {
                let a = layers::attention_gate(b, "g", v[0], v[1])?;
                layers::apply_gate(b.tape, v[1], a)
            },
            h,
        )?,
    );
    push(
        "laag kernel",
        max_error_over(
            draws,
            6,
            |r| smooth_gate_draw(r, h, true),
            |b, v| {
                let o = layers::laag(b, "g", "l", v[0], v[1], v[2], v[3])?;
                b.tape.concat0(&[o.x1, o.x2])
            },
            h,
        )?,
    );
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let mut r = ChaCha8Rng::seed_from_u64(7_000 + d as u64);
        let mut bits = || {
            let v = (0..18).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
            Rc::new(Tensor::new(&[1, 2, 3, 3], v).expect("sized"))
        };
        let (y1, y2) = (bits(), bits());
        let inputs = vec![randn(&[1, 2, 3, 3], &mut r), randn(&[1, 2, 3, 3], &mut r)];
        let errs = relative_errors(&inputs, h, |t, v| joint_loss(t, y1.clone(), y2.clone(), v[0], v[1]))?;
        worst = errs.into_iter().fold(worst, f64::max);
    }
    push("joint loss", worst);
    Ok(out)
}

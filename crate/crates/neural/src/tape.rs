//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every operation pushes a node holding its value and, when any input needs
//! a gradient, a closure mapping the output gradient to input gradients.
//! [`Tape::backward`] replays the closures in reverse order. An inference tape
//! records values only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{NeuralError, Result};
use crate::tensor::Tensor;

type BackFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(msg: String) -> NeuralError {
    NeuralError::Shape(msg)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    /// A tape that records gradients.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that only evaluates.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: BackFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs = self.record && parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            back: if needs { Some(back) } else { None },
            needs_grad: needs,
        });
        Var(id)
    }

    /// Trainable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(t),
            parents: vec![],
            back: None,
            needs_grad: self.record,
        });
        Var(id)
    }

    /// Input without gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(t),
            parents: vec![],
            back: None,
            needs_grad: false,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].value.len() != 1 {
            panic!("backward needs a scalar loss");
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
                let pg = back(&g, &needs);
                for (k, gp) in pg.into_iter().enumerate() {
                    let (Some(gp), true) = (gp, needs[k]) else { continue };
                    let p = node.parents[k];
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- structural ----

    /// `out[i] = x[index[i]]`; covers permutations, window partitioning,
    /// rolls and replication.
    pub fn gather(&self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err(format!("gather shape {shape:?} needs {} indices", index.len())));
        }
        let xv = self.value(x);
        let src = xv.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let m = src.len();
        let idx = index.clone();
        Ok(self.push(
            Tensor::new(shape, data)?,
            vec![x.0],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(x)).clone().reshaped(shape)?;
        Ok(self.push(t, vec![x.0], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// Concatenation along the first axis.
    pub fn concat0(&self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut first = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for v in &vals {
            if v.shape()[1..] != tail[..] {
                return Err(shape_err(format!("concat of {:?} and {:?}", vals[0].shape(), v.shape())));
            }
            first += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![first];
        shape.extend_from_slice(&tail);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            xs.iter().map(|v| v.0).collect(),
            Box::new(move |g, _| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let s = g[off..off + n].to_vec();
                        off += n;
                        Some(s)
                    })
                    .collect()
            }),
        ))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(
            Tensor::new(av.shape(), data)?,
            vec![a.0, b.0],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        Ok(self.push(
            Tensor::new(av.shape(), data)?,
            vec![a.0, b.0],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(
            Tensor::new(av.shape(), data)?,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(bv.data()).map(|(g, y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(av.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, vec![a.0], Box::new(move |g, _| vec![Some(g.iter().map(|x| x * s).collect())]))
    }

    fn suffix_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err(format!("{what}: {sb:?} is not a suffix of {sa:?}")));
        }
        Ok(self.numel(b))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_suffix(&self, a: Var, b: Var) -> Result<Var> {
        let m = self.suffix_len(a, b, "add_suffix")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i % m]).collect();
        Ok(self.push(
            Tensor::new(av.shape(), data)?,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; m];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % m] += x;
                    }
                    gb
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    /// `a * b` with `b` broadcast over the leading axes of `a`.
    pub fn mul_suffix(&self, a: Var, b: Var) -> Result<Var> {
        let m = self.suffix_len(a, b, "mul_suffix")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv.data()[i % m]).collect();
        Ok(self.push(
            Tensor::new(av.shape(), data)?,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().enumerate().map(|(i, x)| x * bv.data()[i % m]).collect());
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; m];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % m] += x * av.data()[i];
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `a + b` with `b` (shape = leading axes of `a`) broadcast over the
    /// trailing axes, e.g. a per-channel bias on `[C, D, H, W]`.
    pub fn add_prefix(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != sb[..] {
            return Err(shape_err(format!("add_prefix: {sb:?} is not a prefix of {sa:?}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let inner = av.len() / bv.len().max(1);
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i / inner]).collect();
        let m = bv.len();
        Ok(self.push(
            Tensor::new(&sa, data)?,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| (0..m).map(|c| g[c * inner..(c + 1) * inner].iter().sum()).collect());
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let av = self.value(a);
        let out = Rc::new(av.map(f));
        let o2 = out.clone();
        self.push(
            (*out).clone(),
            vec![a.0],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(av.data())
                        .zip(o2.data())
                        .map(|((g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4;
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        self.push(
            Tensor::scalar(av.data().iter().sum()),
            vec![a.0],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.numel(a) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ----

    /// `[M, K] x [K, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let out = mm(av.data(), bv.data(), 1, m, k, n, false);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            vec![a.0, b.0],
            Box::new(move |g, needs| mm_back(g, av.data(), bv.data(), 1, m, k, n, false, needs)),
        ))
    }

    /// Batched product `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T`
    /// when `transpose_b`.
    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err(format!("bmm {sa:?} x {sb:?} (transpose {transpose_b})")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a), self.value(b));
        let out = mm(av.data(), bv.data(), bs, m, k, n, transpose_b);
        Ok(self.push(
            Tensor::new(&[bs, m, n], out)?,
            vec![a.0, b.0],
            Box::new(move |g, needs| mm_back(g, av.data(), bv.data(), bs, m, k, n, transpose_b, needs)),
        ))
    }

    /// `x [N, in] · w [in, out] (+ b [out])`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let rows = sx[..sx.len() - 1].iter().product::<usize>();
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, sx[sx.len() - 1]])? };
        let y = self.matmul(flat, w)?;
        let y = match b {
            Some(b) => self.add_suffix(y, b)?,
            None => y,
        };
        if sx.len() == 2 {
            return Ok(y);
        }
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(self.shape(y)[1]);
        self.reshape(y, &shape)
    }

    // ---- normalization ----

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().unwrap_or(&1);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(Tensor::new(av.shape(), out).expect("same shape"));
        let y2 = y.clone();
        self.push(
            (*y).clone(),
            vec![a.0],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y2.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(gr, yr);
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - s);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Zero-mean unit-variance normalization of contiguous groups of `n`.
    fn normalize_groups(&self, a: Var, n: usize, eps: f64) -> Var {
        let av = self.value(a);
        let mut y = vec![0.0; av.len()];
        let mut inv_std = Vec::with_capacity(av.len() / n.max(1));
        for (xr, yr) in av.data().chunks(n).zip(y.chunks_mut(n)) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in yr.iter_mut().zip(xr) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let yt = Rc::new(Tensor::new(av.shape(), y).expect("same shape"));
        let y2 = yt.clone();
        self.push(
            (*yt).clone(),
            vec![a.0],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), out), &is) in g.chunks(n).zip(y2.data().chunks(n)).zip(gx.chunks_mut(n)).zip(&inv_std)
                {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = dot(gr, yr) / n as f64;
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = is * (gi - mg - yi * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm_last(&self, a: Var, eps: f64) -> Var {
        let n = *self.shape(a).last().unwrap_or(&1);
        self.normalize_groups(a, n, eps)
    }

    /// Instance normalization of `[C, ...]` over everything but the channel
    /// axis, without affine terms.
    pub fn instance_norm(&self, a: Var, eps: f64) -> Var {
        let s = self.shape(a);
        let n = s[1..].iter().product();
        self.normalize_groups(a, n, eps)
    }

    // ---- convolution ----

    /// Same-padded stride-1 convolution: `x [Cin, D, H, W]`,
    /// `w [Cout, Cin, k, k, k]` with odd `k`.
    pub fn conv3d(&self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] || sw[2] % 2 == 0 {
            return Err(shape_err(format!("conv3d input {sx:?} kernel {sw:?}")));
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sw[0],
            dims: [sx[1], sx[2], sx[3]],
            k: sw[2],
        };
        let (xv, wv) = (self.value(x), self.value(w));
        let out = conv_forward(&geom, xv.data(), wv.data());
        Ok(self.push(
            Tensor::new(&[geom.cout, sx[1], sx[2], sx[3]], out)?,
            vec![x.0, w.0],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| conv_back_input(&geom, g, wv.data()));
                let gw = needs[1].then(|| conv_back_weight(&geom, g, xv.data()));
                vec![gx, gw]
            }),
        ))
    }

    // ---- losses ----

    /// Mean binary cross-entropy of logits against fixed targets.
    pub fn bce_with_logits_mean(&self, logits: Var, target: Rc<Tensor>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != target.len() {
            return Err(shape_err(format!("bce: {} logits vs {} targets", lv.len(), target.len())));
        }
        let n = lv.len() as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Box::new(move |g, _| {
                vec![Some(
                    lv.data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                        .collect(),
                )]
            }),
        ))
    }

    /// Soft Dice loss `1 - (2 Σ p y + ε) / (Σ p + Σ y + ε)`.
    pub fn soft_dice_loss(&self, prob: Var, target: Rc<Tensor>, eps: f64) -> Result<Var> {
        let pv = self.value(prob);
        if pv.len() != target.len() {
            return Err(shape_err(format!("dice: {} probabilities vs {} targets", pv.len(), target.len())));
        }
        let inter = dot(pv.data(), target.data());
        let union = pv.data().iter().sum::<f64>() + target.data().iter().sum::<f64>();
        let num = 2.0 * inter + eps;
        let den = union + eps;
        Ok(self.push(
            Tensor::scalar(1.0 - num / den),
            vec![prob.0],
            Box::new(move |g, _| {
                vec![Some(
                    target
                        .data()
                        .iter()
                        .map(|&y| -g[0] * (2.0 * y * den - num) / (den * den))
                        .collect(),
                )]
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C[b] = A[b] B[b]` (or `A[b] B[b]^T`).
fn mm(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; bs * m * n];
    for bi in 0..bs {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            if tb {
                for (j, cj) in crow.iter_mut().enumerate() {
                    *cj = dot(arow, &b[j * k..(j + 1) * k]);
                }
            } else {
                for (kk, &aik) in arow.iter().enumerate() {
                    axpy(crow, aik, &b[kk * n..(kk + 1) * n]);
                }
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn mm_back(
    g: &[f64],
    a: &[f64],
    b: &[f64],
    bs: usize,
    m: usize,
    k: usize,
    n: usize,
    tb: bool,
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut ga = needs[0].then(|| vec![0.0; bs * m * k]);
    let mut gb = needs[1].then(|| vec![0.0; bs * k * n]);
    for bi in 0..bs {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let g = &g[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let garow = &mut ga[i * k..(i + 1) * k];
                if tb {
                    // C = A B^T, B is [n, k]: dA[i] = Σ_j g[i, j] B[j]
                    for (j, &gij) in grow.iter().enumerate() {
                        axpy(garow, gij, &b[j * k..(j + 1) * k]);
                    }
                } else {
                    for (kk, gak) in garow.iter_mut().enumerate() {
                        *gak = dot(grow, &b[kk * n..(kk + 1) * n]);
                    }
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            let gb = &mut gb[bi * k * n..(bi + 1) * k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                if tb {
                    // dB[j] += g[i, j] A[i]
                    for (j, &gij) in grow.iter().enumerate() {
                        axpy(&mut gb[j * k..(j + 1) * k], gij, arow);
                    }
                } else {
                    for (kk, &aik) in arow.iter().enumerate() {
                        axpy(&mut gb[kk * n..(kk + 1) * n], aik, grow);
                    }
                }
            }
        }
    }
    vec![ga, gb]
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    k: usize,
}

impl ConvGeom {
    /// Valid output range along one axis for kernel offset `o` (centered).
    fn range(&self, axis: usize, o: isize) -> (usize, usize) {
        let n = self.dims[axis] as isize;
        let lo = (-o).max(0);
        let hi = (n - o).min(n);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    /// Calls `f(out_row_start, in_row_start, len)` for every contiguous
    /// x-run paired by kernel offset `(oz, oy, ox)`.
    fn for_rows(&self, oz: isize, oy: isize, ox: isize, mut f: impl FnMut(usize, usize, usize)) {
        let [_, h, w] = self.dims;
        let (z0, z1) = self.range(0, oz);
        let (y0, y1) = self.range(1, oy);
        let (x0, x1) = self.range(2, ox);
        if x1 <= x0 {
            return;
        }
        for z in z0..z1 {
            let zi = (z as isize + oz) as usize;
            for y in y0..y1 {
                let yi = (y as isize + oy) as usize;
                let out = (z * h + y) * w + x0;
                let inp = (zi * h + yi) * w + (x0 as isize + ox) as usize;
                f(out, inp, x1 - x0);
            }
        }
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize, isize)> {
        let k = self.k;
        let p = (k / 2) as isize;
        (0..k * k * k).map(move |t| {
            let kz = (t / (k * k)) as isize;
            let ky = ((t / k) % k) as isize;
            let kx = (t % k) as isize;
            (t, kz - p, ky - p, kx - p)
        })
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let s: usize = g.dims.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut out = vec![0.0; g.cout * s];
    for co in 0..g.cout {
        let o = &mut out[co * s..(co + 1) * s];
        for ci in 0..g.cin {
            let xin = &x[ci * s..(ci + 1) * s];
            for (t, oz, oy, ox) in g.offsets() {
                let wv = w[(co * g.cin + ci) * k3 + t];
                if wv == 0.0 {
                    continue;
                }
                g.for_rows(oz, oy, ox, |a, b, n| axpy(&mut o[a..a + n], wv, &xin[b..b + n]));
            }
        }
    }
    out
}

fn conv_back_input(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let s: usize = g.dims.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut gx = vec![0.0; g.cin * s];
    for ci in 0..g.cin {
        let gi = &mut gx[ci * s..(ci + 1) * s];
        for co in 0..g.cout {
            let go = &gout[co * s..(co + 1) * s];
            for (t, oz, oy, ox) in g.offsets() {
                let wv = w[(co * g.cin + ci) * k3 + t];
                if wv == 0.0 {
                    continue;
                }
                g.for_rows(oz, oy, ox, |a, b, n| axpy(&mut gi[b..b + n], wv, &go[a..a + n]));
            }
        }
    }
    gx
}

fn conv_back_weight(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let s: usize = g.dims.iter().product();
    let k3 = g.k * g.k * g.k;
    let mut gw = vec![0.0; g.cout * g.cin * k3];
    for co in 0..g.cout {
        let go = &gout[co * s..(co + 1) * s];
        for ci in 0..g.cin {
            let xin = &x[ci * s..(ci + 1) * s];
            for (t, oz, oy, ox) in g.offsets() {
                let mut acc = 0.0;
                g.for_rows(oz, oy, ox, |a, b, n| acc += dot(&go[a..a + n], &xin[b..b + n]));
                gw[(co * g.cin + ci) * k3 + t] = acc;
            }
        }
    }
    gw
}

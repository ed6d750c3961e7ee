//! Non-overlapping cubic windows over a token grid.
//!
//! Tokens are stored `[S, C]` with `S = D*H*W`, x fastest. A window layout
//! orders tokens by `(window, position)`; a cyclic shift rolls the grid by
//! `-shift` on every axis before partitioning.

use crate::error::{NeuralError, Result};
use crate::tensor::Tensor;

/// Attention logit added between tokens from different shifted regions.
pub const MASK_VALUE: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeom {
    pub dims: [usize; 3],
    pub ws: usize,
    pub shift: usize,
}

impl WindowGeom {
    pub fn new(dims: [usize; 3], ws: usize, shift: usize) -> Result<WindowGeom> {
        if ws == 0 || dims.iter().any(|&d| d == 0 || d % ws != 0) {
            return Err(NeuralError::Shape(format!("grid {dims:?} is not divisible by window {ws}")));
        }
        if shift >= ws {
            return Err(NeuralError::Shape(format!("shift {shift} must be smaller than window {ws}")));
        }
        Ok(WindowGeom { dims, ws, shift })
    }

    pub fn n_tokens(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.ws * self.ws * self.ws
    }

    pub fn n_windows(&self) -> usize {
        self.n_tokens() / self.tokens_per_window()
    }

    fn grid_windows(&self) -> [usize; 3] {
        [self.dims[0] / self.ws, self.dims[1] / self.ws, self.dims[2] / self.ws]
    }

    /// Rolled coordinate of window `w`, position `t`.
    fn rolled(&self, w: usize, t: usize) -> [usize; 3] {
        let [_, gy, gx] = self.grid_windows();
        let ws = self.ws;
        let (wz, wy, wx) = (w / (gy * gx), (w / gx) % gy, w % gx);
        let (tz, ty, tx) = (t / (ws * ws), (t / ws) % ws, t % ws);
        [wz * ws + tz, wy * ws + ty, wx * ws + tx]
    }

    /// Source token of every `(window, position)` slot.
    pub fn source(&self) -> Vec<usize> {
        let t_n = self.tokens_per_window();
        let [d, h, w] = self.dims;
        let mut out = Vec::with_capacity(self.n_tokens());
        for win in 0..self.n_windows() {
            for t in 0..t_n {
                let r = self.rolled(win, t);
                let z = (r[0] + self.shift) % d;
                let y = (r[1] + self.shift) % h;
                let x = (r[2] + self.shift) % w;
                out.push((z * h + y) * w + x);
            }
        }
        out
    }

    /// Inverse of [`WindowGeom::source`]: slot of every token.
    pub fn slot(&self) -> Vec<usize> {
        let src = self.source();
        let mut inv = vec![0; src.len()];
        for (slot, &s) in src.iter().enumerate() {
            inv[s] = slot;
        }
        inv
    }

    /// Additive attention mask `[n_windows, T, T]`, or `None` when unshifted.
    pub fn shift_mask(&self) -> Option<Vec<f64>> {
        if self.shift == 0 {
            return None;
        }
        let region = |r: usize, n: usize| -> usize {
            if r < n - self.ws {
                0
            } else if r < n - self.shift {
                1
            } else {
                2
            }
        };
        let t_n = self.tokens_per_window();
        let mut mask = Vec::with_capacity(self.n_windows() * t_n * t_n);
        for win in 0..self.n_windows() {
            let labels: Vec<[usize; 3]> = (0..t_n)
                .map(|t| {
                    let r = self.rolled(win, t);
                    [region(r[0], self.dims[0]), region(r[1], self.dims[1]), region(r[2], self.dims[2])]
                })
                .collect();
            for i in 0..t_n {
                for j in 0..t_n {
                    mask.push(if labels[i] == labels[j] { 0.0 } else { MASK_VALUE });
                }
            }
        }
        Some(mask)
    }
}

/// Index into a `(2ws-1)^3` relative-position table for every token pair of
/// a window, row-major `[T, T]`.
pub fn relative_position_index(ws: usize) -> Vec<usize> {
    let t_n = ws * ws * ws;
    let m = 2 * ws - 1;
    let coord = |t: usize| [t / (ws * ws), (t / ws) % ws, t % ws];
    let mut out = Vec::with_capacity(t_n * t_n);
    for i in 0..t_n {
        let ci = coord(i);
        for j in 0..t_n {
            let cj = coord(j);
            let d: Vec<usize> = (0..3).map(|a| ci[a] + ws - 1 - cj[a]).collect();
            out.push((d[0] * m + d[1]) * m + d[2]);
        }
    }
    out
}

fn check_tokens(x: &Tensor, dims: [usize; 3]) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[..3] != dims[..] {
        return Err(NeuralError::Shape(format!("expected [D, H, W, C] with grid {dims:?}, got {s:?}")));
    }
    Ok(s[3])
}

/// `[D, H, W, C]` to `[n_windows, ws^3, C]`.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(NeuralError::Shape(format!("expected [D, H, W, C], got {s:?}")));
    }
    let geom = WindowGeom::new([s[0], s[1], s[2]], ws, 0)?;
    let c = check_tokens(x, geom.dims)?;
    let mut data = Vec::with_capacity(x.len());
    for src in geom.source() {
        data.extend_from_slice(&x.data()[src * c..(src + 1) * c]);
    }
    Tensor::new(&[geom.n_windows(), geom.tokens_per_window(), c], data)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, ws: usize, dims: [usize; 3]) -> Result<Tensor> {
    let geom = WindowGeom::new(dims, ws, 0)?;
    let s = windows.shape();
    if s.len() != 3 || s[0] != geom.n_windows() || s[1] != geom.tokens_per_window() {
        return Err(NeuralError::Shape(format!("windows {s:?} do not tile {dims:?} with window {ws}")));
    }
    let c = s[2];
    let mut data = vec![0.0; windows.len()];
    for (slot, src) in geom.source().into_iter().enumerate() {
        data[src * c..(src + 1) * c].copy_from_slice(&windows.data()[slot * c..(slot + 1) * c]);
    }
    Tensor::new(&[dims[0], dims[1], dims[2], c], data)
}

//! Sliding-window inference with Gaussian blending of overlapping patches.

use laspet_core::lesions::binarize_probabilities;
use laspet_core::{Connectivity, Grid, Kind, Volume3D};
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::model::LasNetParams;
use crate::tape::sigmoid;
use crate::tensor::Tensor;
use crate::train::crop;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Fraction of a patch shared with its neighbour.
    pub overlap: f64,
    /// Gaussian standard deviation as a fraction of the patch side.
    pub sigma_scale: f64,
    pub threshold: f64,
    /// Components smaller than this are discarded.
    pub min_ml: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            overlap: 0.625,
            sigma_scale: 0.125,
            threshold: 0.5,
            min_ml: 0.2,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) || !(self.sigma_scale > 0.0) || !(0.0..1.0).contains(&self.threshold) {
            return Err(NeuralError::Config(format!("invalid inference settings {self:?}")));
        }
        Ok(())
    }
}

/// Patch origins along an axis of length `n`; the last patch is clamped to
/// end at the border.
pub fn window_starts(n: usize, p: usize, overlap: f64) -> Vec<usize> {
    if n <= p {
        return vec![0];
    }
    let stride = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + p < n).collect();
    starts.push(n - p);
    starts
}

/// Separable Gaussian importance map of side `p`, peak 1 at the centre.
pub fn gaussian_importance(p: usize, sigma_scale: f64) -> Vec<f64> {
    let sigma = sigma_scale * p as f64;
    let c = (p as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..p).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let mut out = Vec::with_capacity(p * p * p);
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                out.push((g[z] * g[y] * g[x]).max(f64::MIN_POSITIVE));
            }
        }
    }
    out
}

/// Blends per-patch probabilities from `predict` over the whole volume.
/// Inputs are `[C, Z, Y, X]`; `predict` maps two `[C, p, p, p]` patches to
/// two `[1, p, p, p]` probability patches. Returns `[1, Z, Y, X]` maps.
pub fn sliding_window_infer(
    pet1ct: &Tensor,
    pet2ct: &Tensor,
    patch: usize,
    cfg: &InferConfig,
    mut predict: impl FnMut(&Tensor, &Tensor) -> Result<(Tensor, Tensor)>,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let s = pet1ct.shape();
    if s.len() != 4 || s != pet2ct.shape() || patch == 0 {
        return Err(NeuralError::Shape(format!("inputs {:?} and {:?}", s, pet2ct.shape())));
    }
    let dims = [s[1], s[2], s[3]];
    let n: usize = dims.iter().product();
    let weight = gaussian_importance(patch, cfg.sigma_scale);
    let starts: Vec<Vec<usize>> = dims.iter().map(|&d| window_starts(d, patch, cfg.overlap)).collect();
    let mut acc1 = vec![0.0; n];
    let mut acc2 = vec![0.0; n];
    let mut wsum = vec![0.0; n];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let start = [z0, y0, x0];
                let (p1, p2) = predict(&crop(pet1ct, start, patch), &crop(pet2ct, start, patch))?;
                if p1.len() != patch.pow(3) || p2.len() != patch.pow(3) {
                    return Err(NeuralError::Shape(format!("predictor returned {:?}", p1.shape())));
                }
                for z in 0..patch.min(dims[0] - z0) {
                    for y in 0..patch.min(dims[1] - y0) {
                        for x in 0..patch.min(dims[2] - x0) {
                            let q = (z * patch + y) * patch + x;
                            let v = ((z0 + z) * dims[1] + y0 + y) * dims[2] + x0 + x;
                            let w = weight[q];
                            acc1[v] += w * p1.data()[q];
                            acc2[v] += w * p2.data()[q];
                            wsum[v] += w;
                        }
                    }
                }
            }
        }
    }
    let finish = |acc: Vec<f64>| -> Result<Tensor> {
        let data = acc.iter().zip(&wsum).map(|(a, w)| a / w).collect();
        Tensor::new(&[1, dims[0], dims[1], dims[2]], data)
    };
    Ok((finish(acc1)?, finish(acc2)?))
}

/// Probability maps of both branches for network inputs `[2, Z, Y, X]`.
pub fn infer_probabilities(params: &LasNetParams, pet1ct: &Tensor, pet2ct: &Tensor, cfg: &InferConfig) -> Result<(Tensor, Tensor)> {
    sliding_window_infer(pet1ct, pet2ct, params.config.patch_size, cfg, |a, b| {
        let (l1, l2) = params.predict(a, b)?;
        Ok((l1.map(sigmoid), l2.map(sigmoid)))
    })
}

/// Probability volume on `grid` from a `[1, Z, Y, X]` map.
pub fn probability_volume(prob: &Tensor, grid: Grid) -> Result<Volume3D> {
    if prob.len() != grid.len() {
        return Err(NeuralError::Shape(format!("{} probabilities for grid {:?}", prob.len(), grid.dims)));
    }
    Ok(Volume3D::new(grid, Kind::Prob, prob.data().iter().map(|&p| p as f32).collect())?)
}

/// Thresholded, component-labeled and size-filtered segmentation.
pub fn segment(prob: &Tensor, grid: Grid, cfg: &InferConfig) -> Result<Volume3D> {
    let v = probability_volume(prob, grid)?;
    Ok(binarize_probabilities(&v, cfg.threshold, cfg.min_ml, Connectivity::TwentySix)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_axis() {
        assert_eq!(window_starts(24, 24, 0.625), vec![0]);
        assert_eq!(window_starts(10, 24, 0.625), vec![0]);
        assert_eq!(window_starts(40, 24, 0.625), vec![0, 9, 16]);
        assert_eq!(window_starts(33, 24, 0.625), vec![0, 9]);
    }

    #[test]
    fn importance_peaks_at_centre() {
        let w = gaussian_importance(5, 0.125);
        assert_eq!(w[(2 * 5 + 2) * 5 + 2], 1.0);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

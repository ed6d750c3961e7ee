//! Rank correlation, patient-level bootstrap and paired superiority testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Fraction of paired trials that must favour the first method.
pub const SUPERIORITY_LEVEL: f64 = 0.95;

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    // sqrt of a rounded square is exact, so identical inputs give exactly 1
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho as the Pearson correlation of average ranks. `None` when
/// fewer than two points or a constant list make it undefined.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(invalid(format!("spearman needs equal lengths ({} vs {})", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("spearman needs finite values"));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// Linear-interpolation percentile (`q` in 0..=100) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * w
}

/// Patient indices drawn with replacement for one trial. Each trial owns a
/// ChaCha stream, so the draw does not depend on evaluation order.
pub fn resample_indices(n: usize, trial: u64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Statistic value per trial, `None` where it is undefined on the resample.
pub fn bootstrap_values<F>(n: usize, n_trials: usize, seed: u64, statistic: F) -> Vec<Option<f64>>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let mut slots = vec![None; n_trials];
    slots.par_iter_mut().enumerate().for_each(|(t, slot)| {
        let idx = resample_indices(n, t as u64, seed);
        *slot = statistic(&idx).filter(|v| v.is_finite());
    });
    slots
}

/// Percentile bootstrap summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    /// Statistic on the full sample.
    pub estimate: Option<f64>,
    /// Mean over defined trials.
    pub mean: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n_valid: usize,
}

/// 95 % percentile interval of `statistic` over `n_trials` patient-level
/// resamples of `n` patients. Trials where the statistic is undefined are
/// dropped and counted out of `n_valid`.
pub fn bootstrap_ci<F>(n: usize, statistic: F, n_trials: usize, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n == 0 {
        return Err(invalid("bootstrap needs at least one patient"));
    }
    if n_trials == 0 {
        return Err(invalid("bootstrap needs at least one trial"));
    }
    let all: Vec<usize> = (0..n).collect();
    let estimate = statistic(&all).filter(|v| v.is_finite());
    let mut vals: Vec<f64> = bootstrap_values(n, n_trials, seed, &statistic)
        .into_iter()
        .flatten()
        .collect();
    if vals.is_empty() {
        return Ok(BootstrapCi {
            estimate,
            mean: None,
            lo: None,
            hi: None,
            n_valid: 0,
        });
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.sort_by(f64::total_cmp);
    // a constant statistic must give an exactly degenerate interval
    let (lo, hi) = if vals[0] == vals[vals.len() - 1] {
        (vals[0], vals[0])
    } else {
        (percentile(&vals, 2.5), percentile(&vals, 97.5))
    };
    let mean = if vals[0] == vals[vals.len() - 1] { vals[0] } else { mean };
    Ok(BootstrapCi {
        estimate,
        mean: Some(mean),
        lo: Some(lo),
        hi: Some(hi),
        n_valid: vals.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Superiority {
    /// Fraction of paired trials with `a > b`.
    pub fraction: f64,
    pub significant: bool,
}

/// Paired comparison over bootstrap trials: `a` is superior when it exceeds
/// `b` in at least 95 % of the trials.
pub fn superiority_test(a: &[f64], b: &[f64]) -> Result<Superiority> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid("superiority test needs paired, non-empty trial lists"));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let fraction = wins as f64 / a.len() as f64;
    Ok(Superiority {
        fraction,
        significant: fraction >= SUPERIORITY_LEVEL,
    })
}

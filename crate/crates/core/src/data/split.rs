use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeded_rng;

/// Target domain: train / eval / test.
pub const TARGET_RATIOS: [f64; 3] = [0.5, 0.25, 0.25];
/// Source domain: train / eval.
pub const SOURCE_RATIOS: [f64; 2] = [0.6, 0.4];

/// Shuffles `0..n` with `seed` and cuts it into consecutive parts whose sizes
/// follow `ratios`. Cut points are `round(n * cumulative_ratio)`, so the
/// parts are disjoint and cover every index.
pub fn split_indices(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, crate::streams::SPLIT));

    let mut parts = Vec::with_capacity(ratios.len());
    let mut start = 0usize;
    let mut cum = 0.0;
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        let end = if k + 1 == ratios.len() {
            n
        } else {
            ((n as f64) * cum).round() as usize
        };
        let end = end.clamp(start, n);
        parts.push(idx[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

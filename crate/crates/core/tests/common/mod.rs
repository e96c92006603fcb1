//! Shared generators and reference implementations for integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use fairda::adaptation::{AttributeEstimate, Proportions};
use fairda::autodiff::Matrix;
use fairda::data::{Dataset, Domain, DATA_DIR_ENV};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    fairda::seeded_rng(seed, 1000)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sample(rng)
}

/// Labeled rows before they are wrapped into datasets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub a: Vec<u8>,
}

impl Sample {
    pub fn matrix(&self) -> Matrix {
        Matrix::from_rows(&self.x)
    }

    pub fn source(&self) -> Dataset {
        Dataset::new(self.matrix(), self.y.clone(), Some(self.a.clone()), Domain::Source).unwrap()
    }

    pub fn target(&self) -> Dataset {
        Dataset::new(self.matrix(), self.y.clone(), None, Domain::Target).unwrap()
    }
}

pub fn estimate_from(a: &[u8]) -> AttributeEstimate {
    AttributeEstimate::from_probs(a.iter().map(|&v| f64::from(v)).collect(), &Proportions::default())
}

/// Two features; the attribute is the side of the line `x0 + x1 = 0`, with a
/// margin of 0.5 around it.
pub fn separable(n: usize, seed: u64) -> Sample {
    let mut r = rng(seed);
    let mut s = Sample { x: vec![], y: vec![], a: vec![] };
    while s.x.len() < n {
        let p: [f64; 2] = [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
        let m = p[0] + p[1];
        if m.abs() < 0.5 {
            continue;
        }
        s.x.push(p.to_vec());
        s.a.push(u8::from(m > 0.0));
        s.y.push(u8::from(p[0] > 0.0));
    }
    s
}

/// Attribute with prior `p1`; features are unit Gaussians whose first
/// `informative` coordinates are shifted by `+-sep` according to it, and the
/// whole vector is shifted by `offset`.
pub fn gaussian_attribute(
    n: usize,
    d: usize,
    informative: usize,
    sep: f64,
    p1: f64,
    offset: f64,
    seed: u64,
) -> Sample {
    let mut r = rng(seed);
    let mut s = Sample { x: vec![], y: vec![], a: vec![] };
    for _ in 0..n {
        let a = u8::from(r.gen_bool(p1));
        let sign = if a == 1 { 1.0 } else { -1.0 };
        let x: Vec<f64> = (0..d)
            .map(|k| {
                let shift = if k < informative { sign * sep } else { 0.0 };
                normal(&mut r) + shift + offset
            })
            .collect();
        s.y.push(u8::from(x[d - 1] + normal(&mut r) * 0.5 > offset));
        s.a.push(a);
        s.x.push(x);
    }
    s
}

/// Labels depend on features only; the attribute is an independent coin.
pub fn independent(n: usize, seed: u64) -> Sample {
    let mut r = rng(seed);
    let mut s = Sample { x: vec![], y: vec![], a: vec![] };
    for _ in 0..n {
        let x: Vec<f64> = (0..4).map(|_| normal(&mut r)).collect();
        s.y.push(u8::from(x[0] + 0.5 * x[1] + 0.5 * normal(&mut r) > 0.0));
        s.a.push(u8::from(r.gen_bool(0.5)));
        s.x.push(x);
    }
    s
}

/// The last feature is the attribute itself; labels ignore it.
pub fn leaky(n: usize, seed: u64) -> Sample {
    let mut r = rng(seed);
    let mut s = Sample { x: vec![], y: vec![], a: vec![] };
    for _ in 0..n {
        let a = u8::from(r.gen_bool(0.5));
        let mut x: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
        s.y.push(u8::from(x[0] + 0.5 * normal(&mut r) > 0.0));
        x.push(f64::from(a));
        s.a.push(a);
        s.x.push(x);
    }
    s
}

/// Data meeting both theorem assumptions: the first feature has a mean of
/// `+-2` by true attribute, labels lean on the attribute under heavy label
/// noise, and the estimate is the true attribute flipped independently with
/// rate `q`. Returns the sample (with TRUE attributes in `a`) and the noisy
/// estimate.
pub fn noisy_estimate(n: usize, q: f64, seed: u64) -> (Sample, Vec<u8>) {
    let mut r = rng(seed);
    let mut s = Sample { x: vec![], y: vec![], a: vec![] };
    let mut a_hat = Vec::with_capacity(n);
    for _ in 0..n {
        let a = u8::from(r.gen_bool(0.5));
        let sign = if a == 1 { 1.0 } else { -1.0 };
        let x = vec![
            2.0 * sign + normal(&mut r),
            normal(&mut r),
            normal(&mut r),
            normal(&mut r),
        ];
        s.y.push(u8::from(x[1] + 0.7 * sign + 2.5 * normal(&mut r) > 0.0));
        s.a.push(a);
        s.x.push(x);
        a_hat.push(if r.gen_bool(q) { 1 - a } else { a });
    }
    (s, a_hat)
}

/// Counts over `(y_hat, y, a)` cells.
pub struct Contingency {
    pub cells: [[[usize; 2]; 2]; 2],
}

impl Contingency {
    pub fn new(y_hat: &[u8], y: &[u8], a: &[u8]) -> Self {
        let mut cells = [[[0; 2]; 2]; 2];
        for i in 0..y_hat.len() {
            cells[y_hat[i] as usize][y[i] as usize][a[i] as usize] += 1;
        }
        Self { cells }
    }

    fn count(&self, yh: Option<usize>, y: Option<usize>, a: Option<usize>) -> usize {
        let mut n = 0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    if yh.map_or(true, |v| v == i) && y.map_or(true, |v| v == j) && a.map_or(true, |v| v == k) {
                        n += self.cells[i][j][k];
                    }
                }
            }
        }
        n
    }

    pub fn accuracy(&self) -> f64 {
        let hits = self.count(Some(0), Some(0), None) + self.count(Some(1), Some(1), None);
        hits as f64 / self.count(None, None, None) as f64
    }

    pub fn f1(&self) -> f64 {
        let tp = self.count(Some(1), Some(1), None);
        let fp = self.count(Some(1), Some(0), None);
        let fneg = self.count(Some(0), Some(1), None);
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let r = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// `None` when a group is empty.
    pub fn dp_gap(&self) -> Option<f64> {
        let n0 = self.count(None, None, Some(0));
        let n1 = self.count(None, None, Some(1));
        if n0 == 0 || n1 == 0 {
            return None;
        }
        let r0 = self.count(Some(1), None, Some(0)) as f64 / n0 as f64;
        let r1 = self.count(Some(1), None, Some(1)) as f64 / n1 as f64;
        Some((r1 - r0).abs())
    }

    /// `None` when a group has no positives.
    pub fn eo_gap(&self) -> Option<f64> {
        let n0 = self.count(None, Some(1), Some(0));
        let n1 = self.count(None, Some(1), Some(1));
        if n0 == 0 || n1 == 0 {
            return None;
        }
        let r0 = self.count(Some(1), Some(1), Some(0)) as f64 / n0 as f64;
        let r1 = self.count(Some(1), Some(1), Some(1)) as f64 / n1 as f64;
        Some((r1 - r0).abs())
    }
}

/// Best point of `||M1 w - mu2||^2` over the simplex grid `w = (1 - k h, k h)`.
pub fn grid_search(m1: [[f64; 2]; 2], mu2: [f64; 2], h: f64) -> ([f64; 2], f64) {
    let steps = (1.0 / h).round() as usize;
    let mut best = ([1.0, 0.0], f64::INFINITY);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let w = [1.0 - t, t];
        let f: f64 = (0..2)
            .map(|r| (m1[r][0] * w[0] + m1[r][1] * w[1] - mu2[r]).powi(2))
            .sum();
        if f < best.1 {
            best = (w, f);
        }
    }
    best
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;
pub mod ncut;

use rand::Rng;

/// Minimum Ncut over every bipartition of `w` (dense rows), by enumeration.
/// Degrees include the diagonal.
pub fn brute_force_min_ncut(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    assert!((2..=20).contains(&n));
    let degree: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let mut best = f64::INFINITY;
    // the last vertex always sits on side B
    for mask in 1u32..(1 << (n - 1)) {
        let in_a = |i: usize| i < n - 1 && mask & (1 << i) != 0;
        let mut cut = 0.0;
        let (mut va, mut vb) = (0.0, 0.0);
        for i in 0..n {
            if in_a(i) {
                va += degree[i];
                for j in 0..n {
                    if !in_a(j) {
                        cut += w[i][j];
                    }
                }
            } else {
                vb += degree[i];
            }
        }
        best = best.min(cut / va + cut / vb);
    }
    best
}

/// IoU by counting pixels on a raster.
pub fn rasterized_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let inside = |r: (usize, usize, usize, usize), x: usize, y: usize| {
        x >= r.0 && x < r.0 + r.2 && y >= r.1 && y < r.1 + r.3
    };
    let xmax = (a.0 + a.2).max(b.0 + b.2);
    let ymax = (a.1 + a.3).max(b.1 + b.3);
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..ymax {
        for x in 0..xmax {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

pub fn random_box<R: Rng>(rng: &mut R, extent: usize, max_side: usize) -> (usize, usize, usize, usize) {
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    (rng.random_range(0..extent - w), rng.random_range(0..extent - h), w, h)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of `|a - n| / max(|a| + |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// 11-point interpolated AP by direct evaluation of the precision envelope
/// at each recall level, from an explicit ranked label list.
pub fn ap11_reference(ranked_labels: &[bool]) -> f64 {
    let total = ranked_labels.iter().filter(|&&l| l).count() as f64;
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, &l) in ranked_labels.iter().enumerate() {
        if l {
            tp += 1.0;
        }
        points.push((tp / total, tp / (i + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

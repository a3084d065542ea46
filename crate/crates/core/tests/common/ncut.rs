//! Random affinity matrices and the exhaustive-Ncut comparison.

use hcp::bbox::{BoundingBox, ScoredProposal};
use hcp::hselect::{bipartition, build_affinity, AffinityMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rows(w: &AffinityMatrix) -> Vec<Vec<f64>> {
    (0..w.n()).map(|i| (0..w.n()).map(|j| w.get(i, j)).collect()).collect()
}

/// IoU affinity of `n` random boxes in a 60x60 field.
pub fn iou_affinity(rng: &mut ChaCha8Rng, n: usize) -> AffinityMatrix {
    let props: Vec<ScoredProposal> = (0..n)
        .map(|_| {
            let (x, y, w, h) = super::random_box(rng, 60, 40);
            ScoredProposal::new(BoundingBox::new(x, y, w, h).unwrap(), 0.0)
        })
        .collect();
    build_affinity(&props).unwrap()
}

/// Unit diagonal, independent uniform off-diagonal weights.
pub fn dense_affinity(rng: &mut ChaCha8Rng, n: usize) -> AffinityMatrix {
    let mut e = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = rng.random();
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    AffinityMatrix::new(n, e).unwrap()
}

pub type MakeAffinity = fn(&mut ChaCha8Rng, usize) -> AffinityMatrix;

/// Over `count` matrices with 2 <= n <= 12: how many 2-way cuts exceed the
/// exhaustive minimum by more than 1e-9, and the worst excess.
pub fn oracle_gaps(make: MakeAffinity, seed: u64, count: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for _ in 0..count {
        let n = rng.random_range(2..=12);
        let w = make(&mut rng, n);
        let (_, found) = bipartition(&w).unwrap();
        let best = super::brute_force_min_ncut(&rows(&w));
        if found - best > 1e-9 {
            misses += 1;
        }
        worst = worst.max(found - best);
    }
    (misses, worst)
}

//! Recursive two-way normalized cut.
//!
//! Degrees include the unit self-affinity on the diagonal, so every vertex
//! has degree at least 1. For a vertex set `S` split into `A` and `B`,
//! `Ncut(A, B) = cut(A, B) / vol(A) + cut(A, B) / vol(B)` where the volumes
//! are degree sums taken inside `S`.

use nalgebra::{DMatrix, SymmetricEigen};

use super::AffinityMatrix;

/// Number of leading nontrivial eigenvectors swept for split candidates.
const SWEEP_VECTORS: usize = 8;
const MAX_PASSES: usize = 8;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    clusters: usize,
}

impl ClusterAssignment {
    /// Labels are renumbered so that cluster ids appear in order of their
    /// smallest member index.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let mut remap: Vec<Option<usize>> = Vec::new();
        let mut next = 0;
        let labels = labels
            .into_iter()
            .map(|l| {
                if remap.len() <= l {
                    remap.resize(l + 1, None);
                }
                *remap[l].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        ClusterAssignment { labels, clusters: next }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    /// The partition as a sorted family of sorted index sets.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut p: Vec<Vec<usize>> = (0..self.clusters).map(|c| self.members(c)).collect();
        p.sort();
        p
    }
}

/// Ncut of the bipartition of `subset` given by `in_a` (indexed like `subset`).
pub fn ncut_value(w: &AffinityMatrix, subset: &[usize], in_a: &[bool]) -> f64 {
    let (mut cut, mut vol_a, mut vol_b) = (0.0, 0.0, 0.0);
    for (p, &i) in subset.iter().enumerate() {
        for (q, &j) in subset.iter().enumerate() {
            let v = w.get(i, j);
            if in_a[p] {
                vol_a += v;
            } else {
                vol_b += v;
            }
            if in_a[p] && !in_a[q] {
                cut += v;
            }
        }
    }
    if vol_a == 0.0 || vol_b == 0.0 {
        return f64::INFINITY;
    }
    cut / vol_a + cut / vol_b
}

#[derive(Debug, Clone)]
struct Split {
    value: f64,
    /// Membership of each subset element in the first side.
    in_a: Vec<bool>,
}

/// Best bipartition of `subset` found by sweeping the sorted second
/// generalized eigenvector, followed by greedy single-vertex moves.
fn best_split(w: &AffinityMatrix, subset: &[usize]) -> Split {
    let n = subset.len();
    debug_assert!(n >= 2);
    let sub = |p: usize, q: usize| w.get(subset[p], subset[q]);
    let mut degree: Vec<f64> = (0..n).map(|p| (0..n).map(|q| sub(p, q)).sum()).collect();
    for d in degree.iter_mut() {
        if *d <= 0.0 {
            *d = 1.0;
        }
    }

    if let Some(in_a) = disconnected_split(w, subset) {
        return Split { value: ncut_value(w, subset, &in_a), in_a };
    }

    // (D - W) x = lambda D x  <=>  D^-1/2 W D^-1/2 v = (1 - lambda) v, x = D^-1/2 v
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let m = DMatrix::from_fn(n, n, |p, q| inv_sqrt[p] * sub(p, q) * inv_sqrt[q]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut best: Option<Split> = None;
    for &col in order.iter().skip(1).take(SWEEP_VECTORS) {
        let x: Vec<f64> = (0..n).map(|p| eig.eigenvectors[(p, col)] * inv_sqrt[p]).collect();
        let candidate = refine(w, subset, sweep(w, subset, &x));
        if best.as_ref().is_none_or(|b| candidate.value < b.value - 1e-12) {
            best = Some(candidate);
        }
    }
    best.expect("n >= 2 gives at least one eigenvector")
}

/// Threshold sweep along `x`: every split of the sorted order into a
/// nonempty prefix and suffix.
fn sweep(w: &AffinityMatrix, subset: &[usize], x: &[f64]) -> Split {
    let n = subset.len();
    let sub = |p: usize, q: usize| w.get(subset[p], subset[q]);
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let total: f64 = (0..n).map(|p| (0..n).map(|q| sub(p, q)).sum::<f64>()).sum();
    let mut in_a = vec![false; n];
    let (mut cut, mut vol_a) = (0.0, 0.0);
    let mut best_k = 0;
    let mut best_v = f64::INFINITY;
    for (k, &p) in ranked[..n - 1].iter().enumerate() {
        // moving p into A: edges to A stop being cut, edges to B start
        let (mut to_a, mut to_b, mut deg) = (0.0, 0.0, 0.0);
        for q in 0..n {
            let a = sub(p, q);
            deg += a;
            if q == p {
                continue;
            }
            if in_a[q] {
                to_a += a;
            } else {
                to_b += a;
            }
        }
        in_a[p] = true;
        cut += to_b - to_a;
        vol_a += deg;
        let v = cut / vol_a + cut / (total - vol_a);
        if v < best_v {
            best_v = v;
            best_k = k;
        }
    }
    let mut in_a = vec![false; n];
    for &p in &ranked[..=best_k] {
        in_a[p] = true;
    }
    Split { value: ncut_value(w, subset, &in_a), in_a }
}

/// Fiduccia-Mattheyses passes: each pass moves every vertex once, always
/// taking the best available move even when it raises Ncut, then rolls back
/// to the best split seen. Passes repeat while they improve.
fn refine(w: &AffinityMatrix, subset: &[usize], mut split: Split) -> Split {
    let n = subset.len();
    if n < 3 {
        return split;
    }
    let sub = |p: usize, q: usize| w.get(subset[p], subset[q]);
    let ncut = |cut: f64, va: f64, vb: f64| cut / va + cut / vb;
    for _ in 0..MAX_PASSES {
        let mut in_a = split.in_a.clone();
        // affinity of each vertex to the A and B sides, self excluded
        let mut to_a = vec![0f64; n];
        let mut to_b = vec![0f64; n];
        let mut degree = vec![0f64; n];
        for p in 0..n {
            for q in 0..n {
                degree[p] += sub(p, q);
                if q != p {
                    if in_a[q] {
                        to_a[p] += sub(p, q);
                    } else {
                        to_b[p] += sub(p, q);
                    }
                }
            }
        }
        let mut size_a = in_a.iter().filter(|&&a| a).count();
        let mut cut: f64 = (0..n).filter(|&p| in_a[p]).map(|p| to_b[p]).sum();
        let mut vol_a: f64 = (0..n).filter(|&p| in_a[p]).map(|p| degree[p]).sum();
        let total: f64 = degree.iter().sum();
        let start = ncut(cut, vol_a, total - vol_a);
        let mut best = (start, 0usize);
        let mut moves = Vec::with_capacity(n);
        let mut locked = vec![false; n];
        for step in 1..=n {
            let mut choice: Option<(usize, f64, f64, f64)> = None;
            for p in (0..n).filter(|&p| !locked[p]) {
                let (new_cut, new_vol_a) = if in_a[p] {
                    if size_a == 1 {
                        continue;
                    }
                    (cut - to_b[p] + to_a[p], vol_a - degree[p])
                } else {
                    if size_a == n - 1 {
                        continue;
                    }
                    (cut - to_a[p] + to_b[p], vol_a + degree[p])
                };
                let v = ncut(new_cut, new_vol_a, total - new_vol_a);
                if choice.is_none_or(|(_, bv, _, _)| v < bv) {
                    choice = Some((p, v, new_cut, new_vol_a));
                }
            }
            let Some((p, v, new_cut, new_vol_a)) = choice else { break };
            locked[p] = true;
            let joins_a = !in_a[p];
            in_a[p] = joins_a;
            size_a = if joins_a { size_a + 1 } else { size_a - 1 };
            cut = new_cut;
            vol_a = new_vol_a;
            for q in (0..n).filter(|&q| q != p) {
                let a = sub(q, p);
                if joins_a {
                    to_a[q] += a;
                    to_b[q] -= a;
                } else {
                    to_a[q] -= a;
                    to_b[q] += a;
                }
            }
            moves.push(p);
            if v < best.0 - 1e-12 {
                best = (v, step);
            }
        }
        if best.1 == 0 {
            break;
        }
        for &p in &moves[..best.1] {
            split.in_a[p] = !split.in_a[p];
        }
        split.value = ncut_value(w, subset, &split.in_a);
    }
    split
}

/// If the subgraph has more than one connected component, the component
/// with the largest volume (lowest first element on ties) versus the rest,
/// an Ncut of zero.
fn disconnected_split(w: &AffinityMatrix, subset: &[usize]) -> Option<Vec<bool>> {
    let n = subset.len();
    let mut component = vec![usize::MAX; n];
    let mut volumes = Vec::new();
    for root in 0..n {
        if component[root] != usize::MAX {
            continue;
        }
        let id = volumes.len();
        let mut volume = 0.0;
        component[root] = id;
        let mut stack = vec![root];
        while let Some(p) = stack.pop() {
            for q in 0..n {
                let a = w.get(subset[p], subset[q]);
                volume += a;
                if component[q] == usize::MAX && a > 0.0 {
                    component[q] = id;
                    stack.push(q);
                }
            }
        }
        volumes.push(volume);
    }
    if volumes.len() < 2 {
        return None;
    }
    let largest = (0..volumes.len())
        .fold(0, |best, c| if volumes[c] > volumes[best] { c } else { best });
    Some(component.iter().map(|&c| c == largest).collect())
}

/// Best two-way cut of the whole graph, as a membership mask.
pub fn bipartition(w: &AffinityMatrix) -> Result<(Vec<bool>, f64)> {
    if w.n() < 2 {
        return Err(Error::InvalidArgument("bipartition needs at least two vertices".into()));
    }
    let all: Vec<usize> = (0..w.n()).collect();
    let s = best_split(w, &all);
    Ok((s.in_a, s.value))
}

/// Splits until `m` clusters exist, each time dividing the cluster whose
/// best internal bipartition has the lowest Ncut (ties to the lower id).
pub fn normalized_cut(w: &AffinityMatrix, m: usize) -> Result<ClusterAssignment> {
    let n = w.n();
    if m == 0 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {m} clusters from {n} items"
        )));
    }
    let mut clusters: Vec<Vec<usize>> = vec![(0..n).collect()];
    let mut splits: Vec<Option<Split>> = vec![None];
    while clusters.len() < m {
        for (c, s) in splits.iter_mut().enumerate() {
            if s.is_none() && clusters[c].len() >= 2 {
                *s = Some(best_split(w, &clusters[c]));
            }
        }
        let (target, _) = splits
            .iter()
            .enumerate()
            .filter_map(|(c, s)| s.as_ref().map(|s| (c, s.value)))
            .fold(None, |acc: Option<(usize, f64)>, (c, v)| match acc {
                Some((_, bv)) if bv <= v => acc,
                _ => Some((c, v)),
            })
            .expect("n >= m leaves a splittable cluster");
        let split = splits[target].take().expect("chosen split exists");
        let members = std::mem::take(&mut clusters[target]);
        let (a, b): (Vec<(usize, bool)>, Vec<(usize, bool)>) = members
            .into_iter()
            .zip(split.in_a)
            .partition(|&(_, in_a)| in_a);
        clusters[target] = a.into_iter().map(|(i, _)| i).collect();
        clusters.push(b.into_iter().map(|(i, _)| i).collect());
        splits.push(None);
    }
    let mut labels = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = c;
        }
    }
    Ok(ClusterAssignment::from_labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_matrix(sizes: &[usize], within: f64) -> AffinityMatrix {
        let n: usize = sizes.iter().sum();
        let mut block = Vec::new();
        for (b, &s) in sizes.iter().enumerate() {
            block.extend(std::iter::repeat_n(b, s));
        }
        let entries = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                if i == j {
                    1.0
                } else if block[i] == block[j] {
                    within
                } else {
                    0.0
                }
            })
            .collect();
        AffinityMatrix::new(n, entries).unwrap()
    }

    #[test]
    fn two_blocks_split_apart() {
        let w = block_matrix(&[4, 3], 0.8);
        let c = normalized_cut(&w, 2).unwrap();
        assert_eq!(c.partition(), vec![vec![0, 1, 2, 3], vec![4, 5, 6]]);
    }

    #[test]
    fn m_equal_n_gives_singletons() {
        let w = block_matrix(&[3, 2], 0.5);
        let c = normalized_cut(&w, 5).unwrap();
        assert_eq!(c.num_clusters(), 5);
        assert_eq!(c.labels(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn rejects_bad_counts() {
        let w = block_matrix(&[2], 0.5);
        assert!(normalized_cut(&w, 3).is_err());
        assert!(normalized_cut(&w, 0).is_err());
        assert_eq!(normalized_cut(&w, 1).unwrap().labels(), &[0, 0]);
    }

    #[test]
    fn connected_weak_link_is_cut() {
        // two dense blocks joined by one weak edge
        let mut w = block_matrix(&[3, 3], 0.9);
        w.set(2, 3, 0.05);
        let (mask, value) = bipartition(&w).unwrap();
        assert_eq!(mask[..3].iter().collect::<Vec<_>>(), vec![&mask[0]; 3]);
        assert!(mask[0] != mask[3]);
        assert!(value > 0.0 && value < 0.1);
    }
}

//! Hypothesis selection: cluster proposals by IoU affinity, drop tiny and
//! elongated boxes, keep the best few per cluster and resize them to squares.

mod ncut;

pub use ncut::{bipartition, ncut_value, normalized_cut, ClusterAssignment};

use serde::{Deserialize, Serialize};

use crate::bbox::{proposal_order, BoundingBox, ScoredProposal};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::Tensor;

pub use crate::bbox::iou;

/// Dense symmetric affinity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::Shape(format!(
                "affinity matrix of order {n} needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        for i in 0..n {
            if entries[i * n + i] != 1.0 {
                return Err(Error::InvalidArgument("affinity diagonal must be 1".into()));
            }
            for j in 0..n {
                let v = entries[i * n + j];
                if !(0.0..=1.0).contains(&v) || v != entries[j * n + i] {
                    return Err(Error::InvalidArgument(format!(
                        "affinity entry ({i}, {j}) = {v} is out of range or asymmetric"
                    )));
                }
            }
        }
        Ok(AffinityMatrix { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i != j && (0.0..=1.0).contains(&v), "off-diagonal entry in [0, 1]");
        self.entries[i * self.n + j] = v;
        self.entries[j * self.n + i] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// `W_ij = IoU(h_i, h_j)`.
pub fn build_affinity(proposals: &[ScoredProposal]) -> Result<AffinityMatrix> {
    let n = proposals.len();
    if n == 0 {
        return Err(Error::InvalidArgument("affinity of an empty proposal set".into()));
    }
    let mut entries = vec![0f64; n * n];
    for i in 0..n {
        entries[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = proposals[i].bbox.iou(&proposals[j].bbox);
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    Ok(AffinityMatrix { n, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HSConfig {
    pub m: usize,
    pub k: usize,
    pub min_area: usize,
    pub max_ratio: f64,
    pub crop_size: usize,
}

impl HSConfig {
    /// One hypothesis per cluster.
    pub fn train() -> Self {
        HSConfig {
            m: 10,
            k: 1,
            min_area: 900,
            max_ratio: 4.0,
            crop_size: 64,
        }
    }

    pub fn test() -> Self {
        HSConfig { k: 50, ..Self::train() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.min_area == 0 || self.crop_size == 0 {
            return Err(Error::Config("m, k, min_area and crop_size must be positive".into()));
        }
        if !(self.max_ratio > 1.0) {
            return Err(Error::Config(format!("max_ratio must exceed 1, got {}", self.max_ratio)));
        }
        Ok(())
    }

    pub fn keeps(&self, b: &BoundingBox) -> bool {
        b.area() >= self.min_area && b.aspect_ratio() <= self.max_ratio
    }
}

/// Proposals (with their cluster ids) that pass the area and ratio filter,
/// in input order.
pub fn filter_hypotheses(
    proposals: &[ScoredProposal],
    cluster_labels: &[usize],
    cfg: &HSConfig,
) -> Vec<(ScoredProposal, usize)> {
    proposals
        .iter()
        .zip(cluster_labels)
        .filter(|(p, _)| cfg.keeps(&p.bbox))
        .map(|(p, &c)| (*p, c))
        .collect()
}

/// Per-proposal record of one selection run, for debugging dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsRecord {
    pub cluster: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub cluster: usize,
}

/// Chooses hypothesis boxes without touching pixels. Returns the selection
/// (in descending score order) and one record per input proposal.
pub fn select_boxes(proposals: &[ScoredProposal], cfg: &HSConfig) -> Result<(Vec<Hypothesis>, Vec<HsRecord>)> {
    cfg.validate()?;
    if proposals.is_empty() {
        return Err(Error::Degenerate("no proposals to select from".into()));
    }
    let mut sorted = proposals.to_vec();
    sorted.sort_by(proposal_order);
    let m = cfg.m.min(sorted.len());
    let clusters = normalized_cut(&build_affinity(&sorted)?, m)?;
    let labels = clusters.labels();

    let mut taken = vec![0usize; m];
    let mut chosen = vec![false; sorted.len()];
    let survivors: Vec<usize> = (0..sorted.len()).filter(|&i| cfg.keeps(&sorted[i].bbox)).collect();
    if survivors.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {} proposals fail the area/ratio filter",
            sorted.len()
        )));
    }
    for &i in &survivors {
        if taken[labels[i]] < cfg.k {
            taken[labels[i]] += 1;
            chosen[i] = true;
        }
    }
    // depleted clusters are backfilled from the best remaining survivors
    let target = (cfg.m * cfg.k).min(survivors.len());
    let mut count = chosen.iter().filter(|&&c| c).count();
    for &i in &survivors {
        if count >= target {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            count += 1;
        }
    }

    let selection = (0..sorted.len())
        .filter(|&i| chosen[i])
        .map(|i| Hypothesis {
            bbox: sorted[i].bbox,
            score: sorted[i].score,
            cluster: labels[i],
        })
        .collect();
    let records = (0..sorted.len())
        .map(|i| HsRecord {
            cluster: labels[i],
            bbox: sorted[i].bbox,
            score: sorted[i].score,
            kept: chosen[i],
        })
        .collect();
    Ok((selection, records))
}

#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    /// `[3, crop_size, crop_size]` crops with values in `[0, 255]`.
    pub crops: Vec<Tensor<f32>>,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

pub fn crop_hypotheses(image: &RgbImage, hypotheses: &[Hypothesis], crop_size: usize) -> Result<Vec<Tensor<f32>>> {
    hypotheses
        .iter()
        .map(|h| image.crop_resize(&h.bbox, crop_size, crop_size))
        .collect()
}

pub fn select_hypotheses(image: &RgbImage, proposals: &[ScoredProposal], cfg: &HSConfig) -> Result<HypothesisSet> {
    let (hypotheses, _) = select_boxes(proposals, cfg)?;
    let crops = crop_hypotheses(image, &hypotheses, cfg.crop_size)?;
    Ok(HypothesisSet { hypotheses, crops })
}

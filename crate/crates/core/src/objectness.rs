//! Class-agnostic window proposals from a linear scorer over 8x8 normed
//! gradient features, with per-size score calibration.
//!
//! Windows come from a quantized grid: widths and heights are powers of two
//! from `min_window` up to the image extent, placed at a stride of a quarter
//! of the window size. Each window's normed-gradient content is averaged into
//! an 8x8 cell grid, scored linearly, then mapped through the size's
//! `(scale, offset)` calibration so that scores are comparable across sizes.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{proposal_order, sort_proposals, BoundingBox, ScoredProposal};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::Tensor;

pub const FEATURE_SIDE: usize = 8;
pub const FEATURE_LEN: usize = FEATURE_SIDE * FEATURE_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeCalibration {
    pub w: usize,
    pub h: usize,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectnessModel {
    /// Row-major 8x8 template over the cell features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub calibration: Vec<SizeCalibration>,
}

impl Default for ObjectnessModel {
    /// Uniform template (mean normed gradient), identity calibration.
    fn default() -> Self {
        ObjectnessModel {
            weights: vec![1.0 / FEATURE_LEN as f64; FEATURE_LEN],
            bias: 0.0,
            calibration: Vec::new(),
        }
    }
}

impl ObjectnessModel {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != FEATURE_LEN {
            return Err(Error::format(
                "objectness model",
                format!("expected {FEATURE_LEN} weights, got {}", self.weights.len()),
            ));
        }
        if !self.weights.iter().chain([&self.bias]).all(|v| v.is_finite()) {
            return Err(Error::format("objectness model", "non-finite weights"));
        }
        Ok(())
    }

    pub fn weights_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![FEATURE_SIDE, FEATURE_SIDE], self.weights.clone()).expect("64 weights")
    }

    fn calibration_map(&self) -> HashMap<(usize, usize), (f64, f64)> {
        self.calibration
            .iter()
            .map(|c| ((c.w, c.h), (c.scale, c.offset)))
            .collect()
    }

    /// `true` when every size in `sizes` has a fitted calibration.
    pub fn covers(&self, sizes: &[WindowSize]) -> bool {
        let map = self.calibration_map();
        sizes.iter().all(|s| map.contains_key(&(s.w, s.h)))
    }

    pub fn raw_score(&self, feature: &[f64]) -> f64 {
        self.weights.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>() + self.bias
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("objectness model", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ObjectnessModel = serde_json::from_str(&text)
            .map_err(|e| Error::format("objectness model", e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowSize {
    pub w: usize,
    pub h: usize,
}

impl WindowSize {
    pub fn stride_x(&self) -> usize {
        (self.w / 4).max(1)
    }

    pub fn stride_y(&self) -> usize {
        (self.h / 4).max(1)
    }

    /// Number of grid positions inside a `width x height` image.
    pub fn positions(&self, width: usize, height: usize) -> usize {
        if self.w > width || self.h > height {
            return 0;
        }
        ((width - self.w) / self.stride_x() + 1) * ((height - self.h) / self.stride_y() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectnessConfig {
    /// Cap on the normed gradient magnitude.
    pub saturation: f32,
    pub min_window: usize,
    pub nms_iou: f64,
}

impl Default for ObjectnessConfig {
    fn default() -> Self {
        ObjectnessConfig {
            saturation: 255.0,
            min_window: 16,
            nms_iou: 0.8,
        }
    }
}

/// Powers of two per dimension from `min_window` up to the image extent.
pub fn quantized_sizes(width: usize, height: usize, min_window: usize) -> Vec<WindowSize> {
    let side = |limit: usize| {
        let mut v = Vec::new();
        let mut s = min_window.max(FEATURE_SIDE).next_power_of_two();
        while s <= limit {
            v.push(s);
            s *= 2;
        }
        v
    };
    let ws = side(width);
    let hs = side(height);
    ws.iter()
        .flat_map(|&w| hs.iter().map(move |&h| WindowSize { w, h }))
        .collect()
}

/// `min(|dI/dx| + |dI/dy|, saturation)` on the channel-mean image, using
/// forward differences (backward on the last row/column).
pub fn normed_gradient_map(image: &Tensor<f32>, saturation: f32) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "normed gradients need at least 2x2 pixels, got {w}x{h}"
        )));
    }
    let plane = h * w;
    let mut gray = vec![0f32; plane];
    for ch in 0..c {
        for (g, &v) in gray.iter_mut().zip(&image.data()[ch * plane..(ch + 1) * plane]) {
            *g += v;
        }
    }
    gray.iter_mut().for_each(|g| *g /= c as f32);
    let at = |x: usize, y: usize| gray[y * w + x];
    let mut out = vec![0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let dx = if x + 1 < w { at(x + 1, y) - at(x, y) } else { at(x, y) - at(x - 1, y) };
            let dy = if y + 1 < h { at(x, y + 1) - at(x, y) } else { at(x, y) - at(x, y - 1) };
            out[y * w + x] = (dx.abs() + dy.abs()).min(saturation);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Summed-area table over a normed gradient map, for O(1) cell means.
struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(map: &Tensor<f32>) -> Self {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut sums = vec![0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0f64;
            for x in 0..w {
                row += f64::from(map.data()[y * w + x]);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { width: w + 1, sums }
    }

    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = |x: usize, y: usize| self.sums[y * self.width + x];
        s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0)
    }

    /// Mean normed gradient per cell of an 8x8 grid over the window, scaled to `[0, 1]`.
    fn feature(&self, b: &BoundingBox, saturation: f32) -> [f64; FEATURE_LEN] {
        let mut f = [0f64; FEATURE_LEN];
        let norm = 1.0 / f64::from(saturation);
        for cy in 0..FEATURE_SIDE {
            let y0 = b.y0 + cy * b.h / FEATURE_SIDE;
            let y1 = b.y0 + (cy + 1) * b.h / FEATURE_SIDE;
            for cx in 0..FEATURE_SIDE {
                let x0 = b.x0 + cx * b.w / FEATURE_SIDE;
                let x1 = b.x0 + (cx + 1) * b.w / FEATURE_SIDE;
                let area = ((x1 - x0) * (y1 - y0)).max(1) as f64;
                f[cy * FEATURE_SIDE + cx] = self.rect(x0, y0, x1, y1) / area * norm;
            }
        }
        f
    }
}

fn grid_windows(size: WindowSize, width: usize, height: usize) -> impl Iterator<Item = BoundingBox> {
    let nx = if size.w <= width { (width - size.w) / size.stride_x() + 1 } else { 0 };
    let ny = if size.h <= height { (height - size.h) / size.stride_y() + 1 } else { 0 };
    (0..ny).flat_map(move |iy| {
        (0..nx).map(move |ix| BoundingBox {
            x0: ix * size.stride_x(),
            y0: iy * size.stride_y(),
            w: size.w,
            h: size.h,
        })
    })
}

/// Scores every grid window of every size in `sizes`, sorted by descending
/// calibrated score.
pub fn score_windows(
    image: &RgbImage,
    model: &ObjectnessModel,
    sizes: &[WindowSize],
    cfg: &ObjectnessConfig,
) -> Result<Vec<ScoredProposal>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no window sizes to score".into()));
    }
    model.validate()?;
    let ng = normed_gradient_map(&image.to_tensor(), cfg.saturation)?;
    let integral = Integral::new(&ng);
    let calib = model.calibration_map();
    let mut out = Vec::new();
    for &size in sizes {
        let (scale, offset) = calib.get(&(size.w, size.h)).copied().unwrap_or((1.0, 0.0));
        for b in grid_windows(size, image.width(), image.height()) {
            let raw = model.raw_score(&integral.feature(&b, cfg.saturation));
            out.push(ScoredProposal::new(b, scale * raw + offset));
        }
    }
    sort_proposals(&mut out);
    Ok(out)
}

/// Greedy suppression: a proposal survives iff its IoU with every survivor
/// ranked above it is below `iou_threshold`. Stops once `limit` survive.
pub fn nms_limited(
    proposals: &[ScoredProposal],
    iou_threshold: f64,
    limit: usize,
) -> Result<Vec<ScoredProposal>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nms threshold {iou_threshold} outside (0, 1]"
        )));
    }
    let mut sorted = proposals.to_vec();
    sorted.sort_by(proposal_order);
    let mut kept: Vec<ScoredProposal> = Vec::new();
    for p in sorted {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&p.bbox) < iou_threshold) {
            kept.push(p);
        }
    }
    Ok(kept)
}

pub fn nms(proposals: &[ScoredProposal], iou_threshold: f64) -> Result<Vec<ScoredProposal>> {
    nms_limited(proposals, iou_threshold, usize::MAX)
}

/// Scored windows after suppression, truncated to the top `n`.
pub fn generate_proposals(
    image: &RgbImage,
    model: &ObjectnessModel,
    n: usize,
    cfg: &ObjectnessConfig,
) -> Result<Vec<ScoredProposal>> {
    if n == 0 {
        return Err(Error::InvalidArgument("proposal count must be at least 1".into()));
    }
    let sizes = quantized_sizes(image.width(), image.height(), cfg.min_window);
    if sizes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the minimum window {}",
            image.width(),
            image.height(),
            cfg.min_window
        )));
    }
    let scored = score_windows(image, model, &sizes, cfg)?;
    nms_limited(&scored, cfg.nms_iou, n)
}

/// Fraction of ground-truth boxes matched by at least one proposal with
/// IoU >= `iou_threshold`.
pub fn recall_evaluation(
    proposals: &[Vec<ScoredProposal>],
    ground_truth: &[Vec<BoundingBox>],
    iou_threshold: f64,
) -> Result<f64> {
    if proposals.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} proposal lists for {} images",
            proposals.len(),
            ground_truth.len()
        )));
    }
    let total: usize = ground_truth.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Data("no ground-truth boxes to evaluate".into()));
    }
    let hit: usize = proposals
        .iter()
        .zip(ground_truth)
        .map(|(props, gts)| {
            gts.iter()
                .filter(|g| props.iter().any(|p| p.bbox.iou(g) >= iou_threshold))
                .count()
        })
        .sum();
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessTrainConfig {
    pub negatives_per_image: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ObjectnessTrainConfig {
    fn default() -> Self {
        ObjectnessTrainConfig {
            negatives_per_image: 64,
            positive_iou: 0.5,
            negative_iou: 0.3,
            epochs: 20,
            lambda: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Sample {
    feature: [f64; FEATURE_LEN],
    size: WindowSize,
    positive: bool,
}

/// Fits the template with a class-balanced hinge loss (Pegasos-style SGD),
/// then fits a per-size least-squares map from raw score to the 0/1
/// positive indicator over every grid window of the training images.
pub fn train_objectness(
    annotated: &[(RgbImage, Vec<BoundingBox>)],
    obj_cfg: &ObjectnessConfig,
    cfg: &ObjectnessTrainConfig,
) -> Result<ObjectnessModel> {
    if annotated.iter().all(|(_, b)| b.is_empty()) {
        return Err(Error::Data("no annotated boxes for objectness training".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut svm_set: Vec<Sample> = Vec::new();
    let mut calib_set: Vec<Sample> = Vec::new();

    for (image, gts) in annotated {
        let ng = normed_gradient_map(&image.to_tensor(), obj_cfg.saturation)?;
        let integral = Integral::new(&ng);
        let mut negatives = Vec::new();
        for size in quantized_sizes(image.width(), image.height(), obj_cfg.min_window) {
            for b in grid_windows(size, image.width(), image.height()) {
                let best = gts.iter().map(|g| g.iou(&b)).fold(0.0, f64::max);
                let sample = Sample {
                    feature: integral.feature(&b, obj_cfg.saturation),
                    size,
                    positive: best >= cfg.positive_iou,
                };
                if sample.positive {
                    svm_set.push(sample);
                    calib_set.push(sample);
                } else {
                    if best < cfg.negative_iou {
                        negatives.push(sample);
                    }
                    calib_set.push(sample);
                }
            }
        }
        negatives.shuffle(&mut rng);
        svm_set.extend(negatives.into_iter().take(cfg.negatives_per_image));
    }

    let n_pos = svm_set.iter().filter(|s| s.positive).count();
    let n_neg = svm_set.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::Data("no positive windows could be extracted".into()));
    }
    if n_neg == 0 {
        return Err(Error::Data("empty negative pool".into()));
    }

    // stage 1: linear hinge-loss template
    let total = svm_set.len() as f64;
    let w_pos = total / (2.0 * n_pos as f64);
    let w_neg = total / (2.0 * n_neg as f64);
    let mut w = vec![0f64; FEATURE_LEN];
    let mut b = 0f64;
    let mut order: Vec<usize> = (0..svm_set.len()).collect();
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * (t as f64 + 1e3));
            let s = &svm_set[i];
            let y = if s.positive { 1.0 } else { -1.0 };
            let weight = if s.positive { w_pos } else { w_neg };
            let margin = y * (w.iter().zip(&s.feature).map(|(a, f)| a * f).sum::<f64>() + b);
            w.iter_mut().for_each(|wi| *wi *= 1.0 - eta * cfg.lambda);
            if margin < 1.0 {
                for (wi, f) in w.iter_mut().zip(&s.feature) {
                    *wi += eta * weight * y * f;
                }
                b += eta * weight * y;
            }
        }
    }
    let template = ObjectnessModel {
        weights: w,
        bias: b,
        calibration: Vec::new(),
    };

    // stage 2: per-size calibration
    let mut per_size: HashMap<WindowSize, (f64, f64, f64, f64, f64)> = HashMap::new();
    for s in &calib_set {
        let raw = template.raw_score(&s.feature);
        let t = if s.positive { 1.0 } else { 0.0 };
        let e = per_size.entry(s.size).or_default();
        e.0 += 1.0;
        e.1 += raw;
        e.2 += t;
        e.3 += raw * raw;
        e.4 += raw * t;
    }
    let mut sizes: Vec<_> = per_size.into_iter().collect();
    sizes.sort_by_key(|(s, _)| *s);
    let calibration = sizes
        .into_iter()
        .map(|(size, (n, sr, st, srr, srt))| {
            let mean_r = sr / n;
            let mean_t = st / n;
            let var = srr / n - mean_r * mean_r;
            let cov = srt / n - mean_r * mean_t;
            let scale = if var > 1e-12 { cov / var } else { 0.0 };
            SizeCalibration {
                w: size.w,
                h: size.h,
                scale,
                offset: mean_t - scale * mean_r,
            }
        })
        .collect();
    Ok(ObjectnessModel {
        calibration,
        ..template
    })
}

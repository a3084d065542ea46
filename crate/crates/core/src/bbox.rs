use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box covering columns `x0..x0+w` and rows `y0..y0+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "box extent must be positive, got {w}x{h}"
            )));
        }
        Ok(BoundingBox { x0, y0, w, h })
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Exclusive right edge.
    pub fn x1(&self) -> usize {
        self.x0 + self.w
    }

    /// Exclusive bottom edge.
    pub fn y1(&self) -> usize {
        self.y0 + self.h
    }

    /// `max(w/h, h/w)`.
    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (self.w as f64, self.h as f64);
        (w / h).max(h / w)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x1().min(other.x1()).saturating_sub(self.x0.max(other.x0));
        let h = self.y1().min(other.y1()).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    /// Intersection over union of the two pixel sets.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// The part of the box inside a `width x height` image, if any.
    pub fn clip(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x1 = self.x1().min(width);
        let y1 = self.y1().min(height);
        if self.x0 >= x1 || self.y0 >= y1 {
            return None;
        }
        Some(BoundingBox {
            x0: self.x0,
            y0: self.y0,
            w: x1 - self.x0,
            h: y1 - self.y0,
        })
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1() <= width && self.y1() <= height
    }
}

/// Free function form of [`BoundingBox::iou`].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoredProposal {
    pub fn new(bbox: BoundingBox, score: f64) -> Self {
        ScoredProposal { bbox, score }
    }
}

/// Descending score, ties by `(x0, y0, w, h)` ascending.
pub fn proposal_order(a: &ScoredProposal, b: &ScoredProposal) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.bbox.cmp(&b.bbox))
}

pub fn sort_proposals(proposals: &mut [ScoredProposal]) {
    proposals.sort_by(proposal_order);
}

//! Procedural multi-label scenes of small textured shapes.
//!
//! A category is a (shape, stripe orientation) pair. Stripes have a period
//! of two pixels, so they survive when an object is cropped and enlarged
//! but average out when the whole scene is halved in resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

pub const SHAPES: [Shape; 6] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Ring,
    Shape::Cross,
    Shape::Diamond,
];

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether `(u, v)` in the unit box (centre 0.5, 0.5) is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - 0.5, v - 0.5);
        match self {
            Shape::Disk => dx * dx + dy * dy <= 0.25,
            Shape::Square => dx.abs() <= 0.42 && dy.abs() <= 0.42,
            Shape::Triangle => v >= 0.05 && v <= 0.95 && dx.abs() <= 0.5 * (v - 0.05) / 0.9,
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.09..=0.25).contains(&r2)
            }
            Shape::Cross => (dx.abs() <= 0.17 && dy.abs() <= 0.5) || (dy.abs() <= 0.17 && dx.abs() <= 0.5),
            Shape::Diamond => dx.abs() + dy.abs() <= 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stripes {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub shape: Shape,
    pub stripes: Stripes,
}

impl Category {
    pub fn name(&self) -> String {
        let s = match self.stripes {
            Stripes::Horizontal => "h",
            Stripes::Vertical => "v",
        };
        format!("{}-{s}", self.shape.name())
    }
}

/// The first `c` categories: shapes in order, each in both stripe directions.
pub fn categories(c: usize) -> Result<Vec<Category>> {
    if c == 0 || c > 2 * SHAPES.len() {
        return Err(Error::Config(format!(
            "category count must be in 1..={}, got {c}",
            2 * SHAPES.len()
        )));
    }
    Ok((0..c)
        .map(|i| Category {
            shape: SHAPES[i / 2],
            stripes: if i % 2 == 0 { Stripes::Horizontal } else { Stripes::Vertical },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub categories: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_min: usize,
    pub object_max: usize,
    /// Chance that an object may overlap earlier ones.
    pub occlusion_prob: f64,
    /// Small low-contrast rectangles scattered over the background.
    pub clutter: usize,
    /// Canvas side of the single-object pre-training images.
    pub pretrain_canvas: usize,
    /// Pre-training objects are shrunk by a factor drawn from
    /// `[pretrain_min_scale, 1]`, so features see small objects too.
    pub pretrain_min_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 128,
            categories: 10,
            min_objects: 1,
            max_objects: 4,
            object_min: 30,
            object_max: 42,
            occlusion_prob: 0.1,
            clutter: 6,
            pretrain_canvas: 48,
            pretrain_min_scale: 0.33,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        categories(self.categories)?;
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if self.object_min < 8 || self.object_min > self.object_max || self.object_max > self.image_size {
            return Err(Error::Config("object size range must fit in the image".into()));
        }
        if self.pretrain_canvas < self.object_max {
            return Err(Error::Config("pre-training canvas is smaller than the largest object".into()));
        }
        if !(self.pretrain_min_scale > 0.0 && self.pretrain_min_scale <= 1.0) {
            return Err(Error::Config("pretrain_min_scale must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Pretrain,
    /// Scenes of held-out categories for training the objectness scorer.
    Objectness,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Pretrain => "pretrain",
            Split::Objectness => "objectness",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
            Split::Pretrain => 4,
            Split::Objectness => 5,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "pretrain" => Ok(Split::Pretrain),
            "objectness" => Ok(Split::Objectness),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Categories beyond the first `spec.categories`, used only for objectness
/// training; all categories when none are left over.
pub fn objectness_categories(spec: &SyntheticSpec) -> Result<Vec<Category>> {
    let all = categories(2 * SHAPES.len())?;
    if spec.categories >= all.len() {
        return Ok(all);
    }
    Ok(all[spec.categories..].to_vec())
}

/// Independent generator for one image of one split.
fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

fn background<R: Rng>(rng: &mut R, side: usize, clutter: usize) -> RgbImage {
    let base: [i32; 3] = [rng.random_range(60..110), rng.random_range(60..110), rng.random_range(60..110)];
    let mut img = RgbImage::filled(side, side, [0, 0, 0]);
    for y in 0..side {
        for x in 0..side {
            let n = rng.random_range(-6..=6);
            img.put(x, y, base.map(|b| (b + n).clamp(0, 255) as u8));
        }
    }
    for _ in 0..clutter {
        let w = rng.random_range(3..=8);
        let h = rng.random_range(3..=8);
        if w >= side || h >= side {
            continue;
        }
        let (x0, y0) = (rng.random_range(0..side - w), rng.random_range(0..side - h));
        let shift = rng.random_range(-25..=25);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let p = img.get(x, y);
                img.put(x, y, p.map(|v| (i32::from(v) + shift).clamp(0, 255) as u8));
            }
        }
    }
    img
}

fn object_color<R: Rng>(rng: &mut R) -> ([u8; 3], [u8; 3]) {
    // bright stripe colour and a dark partner, both far from the background range
    let bright = [rng.random_range(170..=255), rng.random_range(170..=255), rng.random_range(120..=255)];
    let dark = bright.map(|v: u8| (f64::from(v) * rng.random_range(0.1..0.25)) as u8);
    (bright, dark)
}

fn draw<R: Rng>(img: &mut RgbImage, b: &BoundingBox, cat: Category, rng: &mut R) {
    let (bright, dark) = object_color(rng);
    for y in b.y0..b.y1() {
        for x in b.x0..b.x1() {
            let u = (x - b.x0) as f64 / b.w as f64 + 0.5 / b.w as f64;
            let v = (y - b.y0) as f64 / b.h as f64 + 0.5 / b.h as f64;
            if cat.shape.contains(u, v) {
                let on = match cat.stripes {
                    Stripes::Horizontal => y % 2 == 0,
                    Stripes::Vertical => x % 2 == 0,
                };
                img.put(x, y, if on { bright } else { dark });
            }
        }
    }
}

fn random_box<R: Rng>(rng: &mut R, spec: &SyntheticSpec, side: usize) -> BoundingBox {
    let w = rng.random_range(spec.object_min..=spec.object_max);
    let h = rng.random_range(spec.object_min..=spec.object_max);
    let x0 = rng.random_range(0..=side - w);
    let y0 = rng.random_range(0..=side - h);
    BoundingBox { x0, y0, w, h }
}

/// A multi-object scene; a pure function of `(spec, split, index)`. Scenes
/// of the objectness split use [`objectness_categories`], and their
/// annotation categories index that list.
pub fn generate_scene(spec: &SyntheticSpec, split: Split, index: usize) -> Result<(RgbImage, Vec<ObjectAnnotation>)> {
    spec.validate()?;
    let cats = if split == Split::Objectness {
        objectness_categories(spec)?
    } else {
        categories(spec.categories)?
    };
    let mut rng = image_rng(spec.seed, split, index);
    let side = spec.image_size;
    let mut img = background(&mut rng, side, spec.clutter);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<ObjectAnnotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let may_overlap = rng.random_bool(spec.occlusion_prob);
        // rejection sampling for free space; give up on crowded scenes
        let placed = (0..100).map(|_| random_box(&mut rng, spec, side)).find(|b| {
            may_overlap || objects.iter().all(|o| o.bbox.intersection_area(b) == 0)
        });
        let Some(bbox) = placed else { continue };
        let category = rng.random_range(0..cats.len());
        draw(&mut img, &bbox, cats[category], &mut rng);
        objects.push(ObjectAnnotation { bbox, category });
    }
    if objects.is_empty() {
        // the first placement attempt always succeeds on an empty canvas
        unreachable!("an empty scene always fits one object");
    }
    Ok((img, objects))
}

/// One object near the canvas centre, at a random scale, for pre-training.
pub fn generate_isolated(spec: &SyntheticSpec, index: usize) -> Result<(RgbImage, ObjectAnnotation)> {
    spec.validate()?;
    let cats = categories(spec.categories)?;
    let mut rng = image_rng(spec.seed, Split::Pretrain, index);
    let side = spec.pretrain_canvas;
    let mut img = background(&mut rng, side, spec.clutter / 4);
    let scale = rng.random_range(spec.pretrain_min_scale..=1.0);
    let mut extent = || {
        let full = rng.random_range(spec.object_min..=spec.object_max) as f64;
        ((full * scale).round() as usize).max(8)
    };
    let (w, h) = (extent(), extent());
    let jitter = |rng: &mut ChaCha8Rng, extent: usize| {
        let centre = (side - extent) / 2;
        let lo = centre.saturating_sub(side / 8);
        let hi = (centre + side / 8).min(side - extent);
        rng.random_range(lo..=hi)
    };
    let x0 = jitter(&mut rng, w);
    let y0 = jitter(&mut rng, h);
    let bbox = BoundingBox { x0, y0, w, h };
    let category = rng.random_range(0..cats.len());
    draw(&mut img, &bbox, cats[category], &mut rng);
    Ok((img, ObjectAnnotation { bbox, category }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_reproducible_and_in_bounds() {
        let spec = SyntheticSpec::default();
        let (a, objs) = generate_scene(&spec, Split::Train, 7).unwrap();
        let (b, objs2) = generate_scene(&spec, Split::Train, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(objs, objs2);
        assert_ne!(generate_scene(&spec, Split::Test, 7).unwrap().0, a);
        for o in &objs {
            assert!(o.bbox.within(128, 128));
            assert!(o.category < 10);
        }
    }

    #[test]
    fn object_counts_cover_the_range() {
        let spec = SyntheticSpec::default();
        let mut hist = [0usize; 5];
        for i in 0..300 {
            let n = generate_scene(&spec, Split::Val, i).unwrap().1.len();
            assert!((1..=4).contains(&n));
            hist[n] += 1;
        }
        assert!(hist[1..].iter().all(|&h| h > 30));
    }

    #[test]
    fn stripes_vanish_at_half_resolution() {
        let spec = SyntheticSpec {
            clutter: 0,
            ..SyntheticSpec::default()
        };
        let cats = categories(2).unwrap();
        let b = BoundingBox::new(16, 16, 32, 32).unwrap();
        let mut imgs = Vec::new();
        for &cat in &cats {
            let mut img = RgbImage::filled(64, 64, [80, 80, 80]);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            draw(&mut img, &b, Category { shape: Shape::Square, ..cat }, &mut rng);
            imgs.push(img.crop_resize(&img.full_box(), 32, 32).unwrap());
        }
        let diff = imgs[0]
            .data()
            .iter()
            .zip(imgs[1].data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        // only the object outline may differ
        let interior: f32 = (10..22)
            .flat_map(|y| (10..22).map(move |x| (y, x)))
            .map(|(y, x)| (imgs[0].data()[y * 32 + x] - imgs[1].data()[y * 32 + x]).abs())
            .fold(0f32, f32::max);
        assert!(interior < 1e-3, "interior differs by {interior}");
        assert!(diff > 0.0);
    }

    #[test]
    fn category_names_and_limits() {
        let c = categories(10).unwrap();
        assert_eq!(c[0].name(), "disk-h");
        assert_eq!(c[9].name(), "cross-v");
        assert!(categories(0).is_err());
        assert!(categories(13).is_err());
    }
}

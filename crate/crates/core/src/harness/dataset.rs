//! On-disk datasets: a `dataset.json` header, one JSON-lines manifest per
//! split and PPM images.
//!
//! Box annotations are only reachable through [`Record::boxes`], which counts
//! every access on a thread-local audit counter so tests can verify that the
//! training and prediction stages never look at them.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{
    categories, generate_isolated, generate_scene, objectness_categories, ObjectAnnotation, Split, SyntheticSpec,
};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::labels::LabelVector;

thread_local! {
    static BOX_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of box-annotation reads on this thread so far.
pub fn box_reads() -> usize {
    BOX_READS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Image path relative to the dataset root.
    pub image: String,
    pub labels: LabelVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<ObjectAnnotation>>,
}

impl Record {
    pub fn new(image: String, labels: LabelVector, boxes: Option<Vec<ObjectAnnotation>>) -> Self {
        Record { image, labels, boxes }
    }

    /// Ground-truth objects, if annotated. Audited.
    pub fn boxes(&self) -> Option<&[ObjectAnnotation]> {
        BOX_READS.with(|c| c.set(c.get() + 1));
        self.boxes.as_deref()
    }

    pub fn id(&self) -> &str {
        Path::new(&self.image)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub categories: Vec<String>,
    /// Categories of the objectness split; box categories there index this.
    #[serde(default)]
    pub objectness_categories: Vec<String>,
    pub image_size: usize,
    /// Split name to image count.
    pub splits: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub info: DatasetInfo,
}

fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.jsonl", split.name()))
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("dataset.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let info: DatasetInfo =
            serde_json::from_str(&text).map_err(|e| Error::format("dataset.json", e.to_string()))?;
        if info.categories.is_empty() {
            return Err(Error::format("dataset.json", "no categories"));
        }
        Ok(Dataset { root, info })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_classes(&self) -> usize {
        self.info.categories.len()
    }

    /// Parses and validates one split's manifest.
    pub fn records(&self, split: Split) -> Result<Vec<Record>> {
        let path = manifest_path(&self.root, split);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let c = self.num_classes();
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::format("manifest", format!("{}:{}: {e}", path.display(), n + 1)))?;
            if rec.labels.len() != c {
                return Err(Error::format(
                    "manifest",
                    format!("{}:{}: {} labels for {c} categories", path.display(), n + 1, rec.labels.len()),
                ));
            }
            if let Some(boxes) = &rec.boxes {
                let side = self.info.image_size;
                let cats = if split == Split::Objectness {
                    self.info.objectness_categories.len()
                } else {
                    c
                };
                if boxes.iter().any(|o| o.category >= cats || (split != Split::Pretrain && !o.bbox.within(side, side))) {
                    return Err(Error::format(
                        "manifest",
                        format!("{}:{}: box outside the image or bad category", path.display(), n + 1),
                    ));
                }
            }
            out.push(rec);
        }
        Ok(out)
    }

    pub fn load_image(&self, record: &Record) -> Result<RgbImage> {
        RgbImage::load_ppm(self.root.join(&record.image))
    }

    /// Images and label vectors of a split, in manifest order.
    pub fn load_labelled(&self, split: Split) -> Result<Vec<(String, RgbImage, LabelVector)>> {
        self.records(split)?
            .into_iter()
            .map(|r| Ok((r.id().to_string(), self.load_image(&r)?, r.labels)))
            .collect()
    }

    /// Label vectors keyed by image id.
    pub fn labels_by_id(&self, split: Split) -> Result<BTreeMap<String, LabelVector>> {
        Ok(self
            .records(split)?
            .into_iter()
            .map(|r| (r.id().to_string(), r.labels))
            .collect())
    }
}

pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub pretrain: usize,
    pub objectness: usize,
}

/// Renders every split to `root` and writes the manifests.
pub fn write_synthetic(root: impl AsRef<Path>, spec: &SyntheticSpec, counts: &SplitCounts) -> Result<Dataset> {
    spec.validate()?;
    if counts.train == 0 || counts.test == 0 || counts.pretrain == 0 || counts.objectness == 0 {
        return Err(Error::Config("every split needs at least one image".into()));
    }
    let root = root.as_ref();
    let cats = categories(spec.categories)?;
    let names: Vec<String> = cats.iter().map(|c| c.name()).collect();
    let mut splits = BTreeMap::new();
    let splits_to_write = [
        (Split::Train, counts.train),
        (Split::Test, counts.test),
        (Split::Pretrain, counts.pretrain),
        (Split::Objectness, counts.objectness),
    ];
    for (split, n) in splits_to_write {
        let dir = root.join("images").join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = manifest_path(root, split);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for i in 0..n {
            let (img, objects) = if split == Split::Pretrain {
                let (img, o) = generate_isolated(spec, i)?;
                (img, vec![o])
            } else {
                generate_scene(spec, split, i)?
            };
            let rel = format!("images/{}/{}_{i:05}.ppm", split.name(), split.name());
            img.save_ppm(root.join(&rel))?;
            // objectness scenes carry no classification labels
            let present: Vec<usize> = if split == Split::Objectness {
                Vec::new()
            } else {
                objects.iter().map(|o| o.category).collect()
            };
            let labels = LabelVector::from_indices(spec.categories, &present)?;
            let rec = Record::new(rel, labels, Some(objects));
            let line = serde_json::to_string(&rec).map_err(|e| Error::format("manifest", e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        splits.insert(split.name().to_string(), n);
    }
    let info = DatasetInfo {
        categories: names,
        objectness_categories: objectness_categories(spec)?.iter().map(|c| c.name()).collect(),
        image_size: spec.image_size,
        splits,
    };
    let path = root.join("dataset.json");
    let text = serde_json::to_string_pretty(&info).map_err(|e| Error::format("dataset.json", e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Dataset::open(root)
}

/// Boxes of annotated images for objectness training or recall evaluation.
pub fn annotated(records: &[Record], dataset: &Dataset) -> Result<Vec<(RgbImage, Vec<BoundingBox>)>> {
    records
        .iter()
        .map(|r| {
            let boxes = r
                .boxes()
                .ok_or_else(|| Error::Data(format!("{} has no box annotations", r.image)))?
                .iter()
                .map(|o| o.bbox)
                .collect();
            Ok((dataset.load_image(r)?, boxes))
        })
        .collect()
}

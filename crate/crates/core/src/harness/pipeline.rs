//! The pipeline stages behind the CLI subcommands, callable in-process.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::info;
use serde::Serialize;

use super::config::PipelineConfig;
use super::dataset::{annotated, write_synthetic, Dataset, SplitCounts};
use super::synth::Split;
use crate::bbox::{BoundingBox, ScoredProposal};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, EvalReport};
use crate::hcp::{
    hypothesis_fine_tune, image_fine_tune, late_fusion, predict_image, predict_whole_image, pretrain, StageReport,
};
use crate::hselect::select_boxes;
use crate::image::RgbImage;
use crate::nn::{Checkpoint, Stage};
use crate::objectness::{generate_proposals, recall_evaluation, train_objectness, ObjectnessModel};

pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<Dataset> {
    let counts = SplitCounts {
        train: cfg.train_images,
        test: cfg.test_images,
        pretrain: cfg.pretrain_images,
        objectness: cfg.objectness_images,
    };
    write_synthetic(out, &cfg.synthetic(), &counts)
}

/// Trains the proposal scorer on the box annotations of the objectness
/// split, whose categories are disjoint from the classification ones.
pub fn run_train_objectness(cfg: &PipelineConfig, data: &Dataset) -> Result<ObjectnessModel> {
    let records = data.records(Split::Objectness)?;
    let samples = annotated(&records, data)?;
    train_objectness(&samples, &cfg.objectness(), &cfg.objectness_training())
}

pub fn proposals_for(cfg: &PipelineConfig, model: &ObjectnessModel, image: &RgbImage) -> Result<Vec<ScoredProposal>> {
    generate_proposals(image, model, cfg.proposals, &cfg.objectness())
}

/// Detection rate at IoU 0.5 for the first `n` proposals of each image, for
/// each `n` in `counts`.
pub fn proposal_recall(
    cfg: &PipelineConfig,
    data: &Dataset,
    model: &ObjectnessModel,
    split: Split,
    counts: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let records = data.records(split)?;
    let samples = annotated(&records, data)?;
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let all = samples
        .iter()
        .map(|(img, _)| generate_proposals(img, model, max, &cfg.objectness()))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<BoundingBox>> = samples.into_iter().map(|(_, b)| b).collect();
    counts
        .iter()
        .map(|&n| {
            let cut: Vec<Vec<ScoredProposal>> = all.iter().map(|p| p[..n.min(p.len())].to_vec()).collect();
            Ok((n, recall_evaluation(&cut, &gt, 0.5)?))
        })
        .collect()
}

#[derive(Serialize)]
struct ProposalLine<'a> {
    image: &'a str,
    proposals: &'a [ScoredProposal],
}

#[derive(Serialize)]
struct HsLine<'a> {
    image: &'a str,
    cluster: usize,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    score: f64,
    kept: bool,
}

/// Writes proposals (or, with `hs`, per-proposal selection records with the
/// test-time `k`) as JSON lines.
pub fn dump_proposals<W: Write>(
    cfg: &PipelineConfig,
    data: &Dataset,
    model: &ObjectnessModel,
    split: Split,
    hs: bool,
    mut out: W,
) -> Result<()> {
    let io = |e: std::io::Error| Error::format("proposal dump", e.to_string());
    for rec in data.records(split)? {
        let img = data.load_image(&rec)?;
        let props = proposals_for(cfg, model, &img)?;
        if hs {
            let (_, records) = select_boxes(&props, &cfg.hs_test())?;
            for r in records {
                let line = HsLine {
                    image: rec.id(),
                    cluster: r.cluster,
                    bbox: r.bbox,
                    score: r.score,
                    kept: r.kept,
                };
                writeln!(out, "{}", serde_json::to_string(&line).expect("plain data")).map_err(io)?;
            }
        } else {
            let line = ProposalLine {
                image: rec.id(),
                proposals: &props,
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("plain data")).map_err(io)?;
        }
    }
    Ok(())
}

pub fn run_pretrain(cfg: &PipelineConfig, data: &Dataset) -> Result<(Checkpoint, StageReport)> {
    let samples = data
        .load_labelled(Split::Pretrain)?
        .into_iter()
        .map(|(id, img, y)| {
            let mut pos = y.positives();
            match (pos.next(), pos.next()) {
                (Some(c), None) => Ok((img, c)),
                _ => Err(Error::Data(format!("pre-training image {id} must have exactly one label"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    info!("pre-training on {} images", samples.len());
    pretrain(&cfg.cnn(), &samples, data.num_classes(), &cfg.stage(Stage::Pretrain), &cfg.augment())
}

fn multi_label(data: &Dataset, split: Split) -> Result<Vec<(RgbImage, crate::labels::LabelVector)>> {
    Ok(data
        .load_labelled(split)?
        .into_iter()
        .map(|(_, img, y)| (img, y))
        .collect())
}

pub fn run_ift(cfg: &PipelineConfig, data: &Dataset, checkpoint: &Checkpoint) -> Result<(Checkpoint, StageReport)> {
    checkpoint.expect_stage(Stage::Pretrain)?;
    let samples = multi_label(data, Split::Train)?;
    image_fine_tune(checkpoint, &samples, data.num_classes(), &cfg.stage(Stage::Ift))
}

/// Training-time hypotheses (train `k`) for each image; empty when nothing
/// survives selection.
pub fn train_hypotheses(cfg: &PipelineConfig, model: &ObjectnessModel, images: &[RgbImage]) -> Result<Vec<Vec<BoundingBox>>> {
    images
        .iter()
        .map(|img| {
            let props = proposals_for(cfg, model, img)?;
            match select_boxes(&props, &cfg.hs_train()) {
                Ok((sel, _)) => Ok(sel.into_iter().map(|h| h.bbox).collect()),
                Err(Error::Degenerate(_)) => Ok(Vec::new()),
                Err(e) => Err(e),
            }
        })
        .collect()
}

pub fn run_hft(
    cfg: &PipelineConfig,
    data: &Dataset,
    checkpoint: &Checkpoint,
    model: &ObjectnessModel,
) -> Result<(Checkpoint, StageReport)> {
    checkpoint.expect_stage(Stage::Ift)?;
    let samples = multi_label(data, Split::Train)?;
    let images: Vec<RgbImage> = samples.iter().map(|(img, _)| img.clone()).collect();
    let hyps = train_hypotheses(cfg, model, &images)?;
    info!("selected hypotheses for {} training images", hyps.len());
    hypothesis_fine_tune(checkpoint, &samples, &hyps, &cfg.stage(Stage::Hft))
}

pub type ScoreRows = Vec<(String, Vec<f64>)>;

/// Per-image class scores for a split. An `hft` checkpoint predicts through
/// hypotheses (which needs `model`); `ift` and `pretrain` checkpoints score
/// the whole image.
pub fn run_predict(
    cfg: &PipelineConfig,
    data: &Dataset,
    split: Split,
    checkpoint: &Checkpoint,
    model: Option<&ObjectnessModel>,
) -> Result<ScoreRows> {
    let records = data.records(split)?;
    records
        .iter()
        .map(|rec| {
            let img = data.load_image(rec)?;
            let scores = if checkpoint.stage == Stage::Hft {
                let model = model.ok_or_else(|| {
                    Error::Config("hypothesis prediction needs an objectness model".into())
                })?;
                let props = proposals_for(cfg, model, &img)?;
                predict_image(checkpoint, &img, &props, &cfg.hs_test(), cfg.fusion_order)?.scores
            } else {
                predict_whole_image(checkpoint, &img)?
            };
            Ok((rec.id().to_string(), scores))
        })
        .collect()
}

/// AP report for score rows against a split's labels, matched by image id.
pub fn run_eval(cfg: &PipelineConfig, data: &Dataset, split: Split, rows: &[(String, Vec<f64>)]) -> Result<EvalReport> {
    let labels = data.labels_by_id(split)?;
    let mut scores = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for (id, s) in rows {
        let y = labels
            .get(id)
            .ok_or_else(|| Error::Data(format!("no label for image {id}")))?;
        scores.push(s.clone());
        ys.push(y.clone());
    }
    mean_ap(&scores, &ys, &data.info.categories, cfg.ap_protocol)
}

/// Late fusion of two score files over the images they share.
pub fn run_fuse(a: &[(String, Vec<f64>)], b: &[(String, Vec<f64>)], weight: f64) -> Result<ScoreRows> {
    let index: BTreeMap<&str, &Vec<f64>> = b.iter().map(|(id, s)| (id.as_str(), s)).collect();
    a.iter()
        .map(|(id, sa)| {
            let sb = index
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("image {id} missing from the second score file")))?;
            Ok((id.clone(), late_fusion(sa, sb, weight)?))
        })
        .collect()
}

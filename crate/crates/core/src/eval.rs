//! Ranking metrics: per-class average precision and its mean, plus the
//! score/report file formats.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApProtocol {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Area under the interpolated precision envelope at every recall step.
    AllPoints,
}

impl fmt::Display for ApProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApProtocol::ElevenPoint => "11-point",
            ApProtocol::AllPoints => "all-points",
        })
    }
}

impl FromStr for ApProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "11-point" | "eleven-point" => Ok(ApProtocol::ElevenPoint),
            "all-points" => Ok(ApProtocol::AllPoints),
            other => Err(Error::Config(format!(
                "AP protocol must be 11-point or all-points, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// One point per ranked item, highest score first.
    pub curve: Vec<PrPoint>,
    /// Some group of equal scores mixes positives and negatives, so the
    /// value depends on input order.
    pub ties_cross_labels: bool,
}

/// Indices sorted by descending score; equal scores keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores are not NaN"));
    order
}

pub fn average_precision_detailed(scores: &[f64], labels: &[bool], protocol: ApProtocol) -> Result<ApResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let order = ranking(scores);

    let mut ties_cross_labels = false;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        if group.iter().any(|&i| labels[i]) && group.iter().any(|&i| !labels[i]) {
            ties_cross_labels = true;
        }
        start = end;
    }

    let mut tp = 0usize;
    let mut hits = Vec::with_capacity(order.len());
    let curve: Vec<PrPoint> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            tp += usize::from(labels[i]);
            hits.push(tp);
            PrPoint {
                recall: tp as f64 / total as f64,
                precision: tp as f64 / (rank + 1) as f64,
            }
        })
        .collect();

    let ap = match protocol {
        ApProtocol::ElevenPoint => {
            // integer comparison tp/total >= t/10 avoids rounding at the thresholds
            (0..=10usize)
                .map(|t| {
                    curve
                        .iter()
                        .zip(&hits)
                        .filter(|(_, &h)| h * 10 >= t * total)
                        .map(|(p, _)| p.precision)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApProtocol::AllPoints => {
            let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (p, env) in curve.iter().zip(&envelope) {
                if p.recall > prev_recall {
                    area += (p.recall - prev_recall) * env;
                    prev_recall = p.recall;
                }
            }
            area
        }
    };
    Ok(ApResult {
        ap,
        curve,
        ties_cross_labels,
    })
}

/// 11-point interpolated average precision.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(average_precision_detailed(scores, labels, ApProtocol::ElevenPoint)?.ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: usize,
    pub name: String,
    pub positives: usize,
    pub ap: f64,
    pub ties_cross_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ApProtocol,
    pub images: usize,
    pub map: f64,
    pub classes: Vec<ClassResult>,
    /// Classes left out of the mean because they have no positives.
    pub excluded: Vec<usize>,
    #[serde(skip)]
    pub curves: Vec<Vec<PrPoint>>,
}

/// Per-class AP over `scores[image][class]`, and their mean over classes
/// that have at least one positive.
pub fn mean_ap(
    scores: &[Vec<f64>],
    labels: &[LabelVector],
    names: &[String],
    protocol: ApProtocol,
) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} label vectors",
            scores.len(),
            labels.len()
        )));
    }
    let c = labels.first().map(LabelVector::len).unwrap_or(0);
    if scores.iter().any(|s| s.len() != c) || labels.iter().any(|l| l.len() != c) {
        return Err(Error::Shape("score rows and label vectors must all have the class count".into()));
    }
    let mut classes = Vec::new();
    let mut curves = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..c {
        let col: Vec<f64> = scores.iter().map(|s| s[j]).collect();
        let lab: Vec<bool> = labels.iter().map(|l| l.is_positive(j)).collect();
        let positives = lab.iter().filter(|&&l| l).count();
        if positives == 0 {
            excluded.push(j);
            continue;
        }
        let r = average_precision_detailed(&col, &lab, protocol)?;
        classes.push(ClassResult {
            class: j,
            name: names.get(j).cloned().unwrap_or_else(|| format!("class{j}")),
            positives,
            ap: r.ap,
            ties_cross_labels: r.ties_cross_labels,
        });
        curves.push(r.curve);
    }
    if classes.is_empty() {
        return Err(Error::Data("no class has a positive example".into()));
    }
    let map = classes.iter().map(|r| r.ap).sum::<f64>() / classes.len() as f64;
    Ok(EvalReport {
        protocol,
        images: scores.len(),
        map,
        classes,
        excluded,
        curves,
    })
}

/// One row per image: `image,score_0,...,score_{c-1}` after a header line.
pub fn write_predictions_csv<W: Write>(mut out: W, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let c = rows.first().map(|r| r.1.len()).unwrap_or(0);
    let io = |e: std::io::Error| Error::format("prediction csv", e.to_string());
    write!(out, "image").map_err(io)?;
    for j in 0..c {
        write!(out, ",score_{j}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for (id, scores) in rows {
        if id.contains([',', '\n']) || scores.len() != c {
            return Err(Error::format("prediction csv", format!("bad row for image {id:?}")));
        }
        write!(out, "{id}").map_err(io)?;
        for s in scores {
            write!(out, ",{s:?}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    Ok(())
}

pub fn read_predictions_csv<R: std::io::Read>(input: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("prediction csv", "missing header"))?
        .map_err(|e| Error::format("prediction csv", e.to_string()))?;
    let c = header.split(',').count() - 1;
    if !header.starts_with("image") {
        return Err(Error::format("prediction csv", "header must start with `image`"));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::format("prediction csv", e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let scores = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("prediction csv", format!("line {}: {e}", n + 2)))?;
        if scores.len() != c {
            return Err(Error::format(
                "prediction csv",
                format!("line {} has {} scores, header has {c}", n + 2, scores.len()),
            ));
        }
        rows.push((id, scores));
    }
    Ok(rows)
}

/// `class,rank,recall,precision` rows for external plotting.
pub fn write_pr_csv<W: Write>(mut out: W, report: &EvalReport) -> Result<()> {
    let io = |e: std::io::Error| Error::format("pr csv", e.to_string());
    writeln!(out, "class,rank,recall,precision").map_err(io)?;
    for (class, curve) in report.classes.iter().zip(&report.curves) {
        for (rank, p) in curve.iter().enumerate() {
            writeln!(out, "{},{},{:?},{:?}", class.name, rank + 1, p.recall, p.precision).map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::format("report", e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

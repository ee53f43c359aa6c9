//! Pixel-level ROC AUC, confusion counts and positive-class precision, recall
//! and IoU. Pixels labelled uncertain (-1) never enter any metric.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::raster::{FIRE, UNCERTAIN};

/// Samples per forward pass when scoring a dataset.
const EVAL_BATCH: usize = 32;

/// Area under the ROC curve via the Mann-Whitney statistic, with midranks for
/// tied scores.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j + 1;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Confusion counts with prediction `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Counts {
    let mut c = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Ratio metrics derived from [`Counts`]; a zero denominator yields 0 and
/// sets the matching `*_undefined` flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    /// Mean of fire and no-fire IoU.
    pub mean_iou: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub iou_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl Counts {
    pub fn ratios(&self) -> Ratios {
        let (precision, precision_undefined) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_undefined) = ratio(self.tp, self.tp + self.fn_);
        let (iou, iou_undefined) = ratio(self.tp, self.tp + self.fp + self.fn_);
        let (iou_neg, _) = ratio(self.tn, self.tn + self.fp + self.fn_);
        Ratios {
            precision,
            recall,
            iou,
            mean_iou: (iou + iou_neg) / 2.0,
            precision_undefined,
            recall_undefined,
            iou_undefined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// NaN when the pooled labels hold a single class.
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub mean_iou: f64,
    pub counts: Counts,
    pub n_valid: u64,
    pub threshold: f64,
    /// Names of metrics whose denominator was zero.
    pub undefined: Vec<String>,
}

impl EvalResult {
    /// Computes every metric from pooled probabilities and raw labels;
    /// uncertain pixels are dropped first.
    pub fn from_scores(scores: &[f64], labels: &[i8], threshold: f64) -> Result<EvalResult> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let (s, l): (Vec<f64>, Vec<bool>) = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y != UNCERTAIN)
            .map(|(&s, &y)| (s, y == FIRE))
            .unzip();
        let mut undefined = Vec::new();
        let auc = match roc_auc(&s, &l) {
            Ok(a) => a,
            Err(Error::UndefinedAuc { .. }) => {
                undefined.push("auc".to_string());
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let counts = confusion(&s, &l, threshold);
        let r = counts.ratios();
        for (name, flag) in [
            ("precision", r.precision_undefined),
            ("recall", r.recall_undefined),
            ("iou", r.iou_undefined),
        ] {
            if flag {
                undefined.push(name.to_string());
            }
        }
        Ok(EvalResult {
            auc,
            precision: r.precision,
            recall: r.recall,
            iou: r.iou,
            mean_iou: r.mean_iou,
            counts,
            n_valid: s.len() as u64,
            threshold,
            undefined,
        })
    }

    pub const CSV_HEADER: &'static str = "auc,precision,recall,iou,mean_iou,tp,fp,tn,fn,n_valid,threshold,undefined";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.10},{:.10},{:.10},{:.10},{:.10},{},{},{},{},{},{},{}",
            self.auc,
            self.precision,
            self.recall,
            self.iou,
            self.mean_iou,
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_,
            self.n_valid,
            self.threshold,
            self.undefined.join("|")
        )
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row())
    }
}

/// Fire probability of every pixel of every sample, with the matching labels.
pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<(Vec<f64>, Vec<i8>)> {
    data.check_model(model)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (input, l) = data.batch(chunk)?;
        scores.extend_from_slice(model.predict_proba(&input)?.data());
        labels.extend(l);
    }
    Ok((scores, labels))
}

/// Valid pixels only, as (probability, is_fire).
pub fn pooled_scores(model: &Model, data: &Dataset) -> Result<(Vec<f64>, Vec<bool>)> {
    let (scores, labels) = predict_dataset(model, data)?;
    Ok(scores
        .into_iter()
        .zip(labels)
        .filter(|(_, y)| *y != UNCERTAIN)
        .map(|(s, y)| (s, y == FIRE))
        .unzip())
}

/// Pools every valid pixel of `data` and scores the model on them.
pub fn evaluate(model: &Model, data: &Dataset, threshold: f64) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let (scores, labels) = predict_dataset(model, data)?;
    EvalResult::from_scores(&scores, &labels, threshold)
}

/// Binary 8-bit PGM of values in [0, 1].
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    crate::codec::write_file(path.as_ref(), &bytes)
}

/// Label map as PGM: fire white, no fire black, uncertain mid-gray.
pub fn write_label_pgm(path: impl AsRef<Path>, width: usize, height: usize, labels: &[i8]) -> Result<()> {
    let values: Vec<f64> = labels
        .iter()
        .map(|&y| match y {
            FIRE => 1.0,
            UNCERTAIN => 0.5,
            _ => 0.0,
        })
        .collect();
    write_pgm(path, width, height, &values)
}

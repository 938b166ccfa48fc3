//! Segmentation scoring.
//!
//! Three binary views of the three-class mask are scored separately:
//! `combined` treats labels {1, 2} as positive against background, `class1`
//! and `class2` score each class alone. Degenerate images follow fixed
//! conventions so empty masks never poison an aggregate with NaN: recall is
//! 1 when no true positives exist, precision is 1 when neither predictions
//! nor truth contain positives and 0 when predictions are empty but truth
//! is not, F1 is 0 when precision and recall are both 0.
//!
//! Dataset aggregation is the arithmetic mean of per-image scores
//! (protocol tag `per-image-mean`), never a pooled-count mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL: &str = "per-image-mean";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveClass {
    /// Labels 1 and 2 against background.
    Combined,
    Class1,
    Class2,
}

impl PositiveClass {
    fn is_positive(self, label: u8) -> bool {
        match self {
            PositiveClass::Combined => label != 0,
            PositiveClass::Class1 => label == 1,
            PositiveClass::Class2 => label == 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub combined: Scores,
    pub class1: Scores,
    pub class2: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub aggregate: ImageScores,
    pub images: Vec<ImageScores>,
    pub protocol: String,
}

fn check_labels(name: &'static str, labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&l| l > 2) {
        Some(&l) => Err(Error::InvalidArgument {
            op: "score_image",
            reason: format!("{} label {} outside 0..=2", name, l),
        }),
        None => Ok(()),
    }
}

/// Precision/recall/F1 of `pred` against `truth` for one binary view.
pub fn score_binary(pred: &[u8], truth: &[u8], class: PositiveClass) -> Result<Scores> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument {
            op: "score_image",
            reason: format!("pred has {} pixels, truth {}", pred.len(), truth.len()),
        });
    }
    check_labels("pred", pred)?;
    check_labels("truth", truth)?;
    let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (class.is_positive(p), class.is_positive(t)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let recall = if tp + fnn == 0 {
        1.0
    } else {
        tp as f64 / (tp + fnn) as f64
    };
    let precision = if tp + fp == 0 {
        if tp + fnn == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Scores {
        precision,
        recall,
        f1,
    })
}

/// All three binary views of one image.
pub fn score_image(pred: &[u8], truth: &[u8]) -> Result<ImageScores> {
    Ok(ImageScores {
        combined: score_binary(pred, truth, PositiveClass::Combined)?,
        class1: score_binary(pred, truth, PositiveClass::Class1)?,
        class2: score_binary(pred, truth, PositiveClass::Class2)?,
    })
}

fn mean_scores(items: &[ImageScores], pick: impl Fn(&ImageScores) -> Scores) -> Scores {
    let n = items.len() as f64;
    let mut acc = Scores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for s in items.iter().map(&pick) {
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    }
    Scores {
        precision: acc.precision / n,
        recall: acc.recall / n,
        f1: acc.f1 / n,
    }
}

/// Score every (pred, truth) pair and aggregate by per-image mean.
pub fn score_dataset(pairs: &[(&[u8], &[u8])]) -> Result<Report> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument {
            op: "score_dataset",
            reason: "empty dataset".into(),
        });
    }
    let images: Vec<ImageScores> = pairs
        .iter()
        .map(|(p, t)| score_image(p, t))
        .collect::<Result<_>>()?;
    let aggregate = ImageScores {
        combined: mean_scores(&images, |s| s.combined),
        class1: mean_scores(&images, |s| s.class1),
        class2: mean_scores(&images, |s| s.class2),
    };
    Ok(Report {
        aggregate,
        images,
        protocol: PROTOCOL.to_string(),
    })
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Report> {
        serde_json::from_str(text).map_err(|e| Error::Dataset(format!("report parse: {e}")))
    }
}

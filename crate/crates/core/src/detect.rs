//! Detected-noisy id sets and detection quality against hidden truth.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixfit::{posterior_noisy, threshold_for_contamination, BetaMixtureFit};
use crate::uncertainty::{Orientation, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum DetectionRule {
    /// The `p` fraction of images with the highest uncertainty.
    TopFraction(f64),
    /// Images whose noisy-component posterior is at least the cutoff.
    MixturePosterior(f64),
    /// Contamination-controlled mixture threshold.
    MixtureContamination(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    /// Ascending, unique.
    pub ids: Vec<usize>,
    pub rule: DetectionRule,
    pub statistic: String,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// CSV with columns `id,score,detected`, one row per scored image.
    pub fn to_csv(&self, scores: &ScoreVector) -> String {
        let set: BTreeSet<usize> = self.ids.iter().copied().collect();
        let mut out = String::from("id,score,detected\n");
        for (id, s) in scores.scores.iter().enumerate() {
            out.push_str(&format!("{id},{s},{}\n", set.contains(&id) as u8));
        }
        out
    }

    /// Reads the ids flagged `1` from a detection CSV.
    pub fn from_csv(text: &str, rule: DetectionRule, statistic: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut ids = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let parse = |j: usize| -> Result<usize> {
                record
                    .get(j)
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: "missing column".into(),
                    })?
                    .parse()
                    .map_err(|e| Error::Parse {
                        line,
                        message: format!("{e}"),
                    })
            };
            let id = parse(0)?;
            match parse(2)? {
                0 => {}
                1 => ids.push(id),
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("detected flag must be 0 or 1, got {other}"),
                    })
                }
            }
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(DetectionSet {
            ids,
            rule,
            statistic: statistic.to_string(),
        })
    }

    pub fn load(path: &Path, rule: DetectionRule, statistic: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DetectionSet::from_csv(&text, rule, statistic)
    }
}

/// Set size for fraction `p` of `n`: `round(p * n)`, halves rounded up.
pub fn top_fraction_size(p: f64, n: usize) -> usize {
    ((p * n as f64) + 0.5).floor().min(n as f64) as usize
}

/// Exactly `round(p * N)` ids with the largest uncertainty; boundary ties go
/// to the lower id.
pub fn detect_top_fraction(scores: &ScoreVector, p: f64) -> Result<DetectionSet> {
    if scores.orientation != Orientation::UncertaintyHigherIsNoisier {
        return Err(Error::validation(
            "top-fraction detection expects uncertainty-oriented scores",
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::validation(format!("fraction {p} outside [0, 1]")));
    }
    let s = &scores.scores;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut ids = order[..top_fraction_size(p, s.len())].to_vec();
    ids.sort_unstable();
    Ok(DetectionSet {
        ids,
        rule: DetectionRule::TopFraction(p),
        statistic: scores.statistic.clone(),
    })
}

/// Mixture-based detection on confidence-oriented scores.
pub fn detect_by_mixture(
    scores: &ScoreVector,
    fit: &BetaMixtureFit,
    rule: DetectionRule,
) -> Result<DetectionSet> {
    if scores.orientation != Orientation::ConfidenceHigherIsCleaner {
        return Err(Error::validation(
            "mixture detection expects confidence-oriented scores",
        ));
    }
    let ids = match rule {
        DetectionRule::MixturePosterior(cutoff) => scores
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| posterior_noisy(fit, s) >= cutoff)
            .map(|(i, _)| i)
            .collect(),
        DetectionRule::MixtureContamination(target) => {
            if !(target > 0.0 && target <= 1.0) {
                return Err(Error::validation(format!(
                    "contamination target {target} outside (0, 1]"
                )));
            }
            threshold_for_contamination(fit, &scores.scores, target).1
        }
        DetectionRule::TopFraction(_) => {
            return Err(Error::validation("top-fraction is not a mixture rule"))
        }
    };
    Ok(DetectionSet {
        ids,
        rule,
        statistic: scores.statistic.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub detected_count: usize,
    pub true_noisy_count: usize,
    pub true_positives: usize,
}

/// Precision and recall of `detection` where noisy means `given != true`.
pub fn detection_metrics(detection: &DetectionSet, dataset: &Dataset) -> Result<DetectionMetrics> {
    let noisy = dataset.noisy_mask()?;
    if let Some(&bad) = detection.ids.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::validation(format!("detected id {bad} outside dataset")));
    }
    let true_noisy_count = noisy.iter().filter(|&&b| b).count();
    let true_positives = detection.ids.iter().filter(|&&i| noisy[i]).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DetectionMetrics {
        precision: ratio(true_positives, detection.len()),
        recall: ratio(true_positives, true_noisy_count),
        detected_count: detection.len(),
        true_noisy_count,
        true_positives,
    })
}

/// Noisy fraction inside the top-`p` uncertainty set of each epoch's scores.
pub fn noise_ratio_curve(epoch_scores: &[ScoreVector], noisy: &[bool], p: f64) -> Result<Vec<f64>> {
    epoch_scores
        .iter()
        .map(|scores| {
            if scores.len() != noisy.len() {
                return Err(Error::validation("score vector length differs from truth"));
            }
            let set = detect_top_fraction(scores, p)?;
            Ok(if set.is_empty() {
                0.0
            } else {
                set.ids.iter().filter(|&&i| noisy[i]).count() as f64 / set.len() as f64
            })
        })
        .collect()
}

//! Per-image statistics over a [`PredictionTensor`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, PredictionTensor};

const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Larger score means the image looks cleaner.
    ConfidenceHigherIsCleaner,
    /// Larger score means the image looks noisier.
    UncertaintyHigherIsNoisier,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::ConfidenceHigherIsCleaner => "confidence",
            Orientation::UncertaintyHigherIsNoisier => "uncertainty",
        }
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Orientation::ConfidenceHigherIsCleaner),
            "uncertainty" => Ok(Orientation::UncertaintyHigherIsNoisier),
            other => Err(Error::validation(format!("unknown orientation `{other}`"))),
        }
    }
}

/// How softmax vectors are pooled before taking the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Std over all `M*T` passes.
    AllPasses,
    /// Average the passes of each member first, then std over the `M` means.
    WithinMemberMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Statistic {
    MeanMaxSoftmax,
    VariationRatio,
    Bald,
    SoftmaxStd(Grouping),
}

impl Statistic {
    pub fn compute(self, tensor: &PredictionTensor) -> Result<ScoreVector> {
        match self {
            Statistic::MeanMaxSoftmax => Ok(mean_max_softmax(tensor)),
            Statistic::VariationRatio => Ok(variation_ratio(tensor)),
            Statistic::Bald => Ok(bald(tensor)),
            Statistic::SoftmaxStd(g) => softmax_stddev(tensor, g),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Statistic::MeanMaxSoftmax => "mean_max_softmax",
            Statistic::VariationRatio => "variation_ratio",
            Statistic::Bald => "bald",
            Statistic::SoftmaxStd(Grouping::AllPasses) => "std_all_passes",
            Statistic::SoftmaxStd(Grouping::WithinMemberMeans) => "std_within_member",
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_max_softmax" | "softmax" => Ok(Statistic::MeanMaxSoftmax),
            "variation_ratio" | "vr" => Ok(Statistic::VariationRatio),
            "bald" => Ok(Statistic::Bald),
            "std_all_passes" | "std" => Ok(Statistic::SoftmaxStd(Grouping::AllPasses)),
            "std_within_member" => Ok(Statistic::SoftmaxStd(Grouping::WithinMemberMeans)),
            other => Err(Error::validation(format!("unknown statistic `{other}`"))),
        }
    }
}

impl TryFrom<String> for Statistic {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Statistic> for String {
    fn from(s: Statistic) -> String {
        s.name().to_string()
    }
}

/// One score per image id, with its orientation recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub orientation: Orientation,
    pub statistic: String,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,score,statistic,orientation\n");
        for (id, s) in self.scores.iter().enumerate() {
            out.push_str(&format!(
                "{id},{s},{},{}\n",
                self.statistic,
                self.orientation.as_str()
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut scores = Vec::new();
        let mut meta: Option<(String, Orientation)> = None;
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let field = |j: usize| {
                record.get(j).ok_or_else(|| Error::Parse {
                    line,
                    message: "missing column".into(),
                })
            };
            let id: usize = field(0)?.parse().map_err(|e| Error::Parse {
                line,
                message: format!("bad id: {e}"),
            })?;
            if id != scores.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("ids must be 0..N in order, found {id}"),
                });
            }
            let score: f64 = field(1)?.parse().map_err(|e| Error::Parse {
                line,
                message: format!("bad score: {e}"),
            })?;
            let statistic = field(2)?.to_string();
            let orientation: Orientation = field(3)?.parse()?;
            match &meta {
                None => meta = Some((statistic, orientation)),
                Some((s, o)) if *s == statistic && *o == orientation => {}
                Some(_) => {
                    return Err(Error::Parse {
                        line,
                        message: "mixed statistics in one score file".into(),
                    })
                }
            }
            scores.push(score);
        }
        let (statistic, orientation) = meta.ok_or_else(|| Error::validation("no rows"))?;
        Ok(ScoreVector {
            scores,
            orientation,
            statistic,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScoreVector::from_csv(&text)
    }
}

/// Mean over every pass of the largest softmax entry. Confidence orientation.
pub fn mean_max_softmax(tensor: &PredictionTensor) -> ScoreVector {
    let passes = (tensor.members() * tensor.passes()) as f64;
    let scores = (0..tensor.images())
        .map(|n| {
            let mut sum = 0.0;
            for m in 0..tensor.members() {
                for t in 0..tensor.passes() {
                    sum += tensor
                        .probs(m, t, n)
                        .iter()
                        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                }
            }
            sum / passes
        })
        .collect();
    ScoreVector {
        scores,
        orientation: Orientation::ConfidenceHigherIsCleaner,
        statistic: Statistic::MeanMaxSoftmax.name().into(),
    }
}

/// `1 - f_mode / (M*T)` with `f_mode` the count of the modal argmax class.
pub fn variation_ratio(tensor: &PredictionTensor) -> ScoreVector {
    let passes = tensor.members() * tensor.passes();
    let mut counts = vec![0usize; tensor.classes()];
    let scores = (0..tensor.images())
        .map(|n| {
            counts.iter_mut().for_each(|c| *c = 0);
            for m in 0..tensor.members() {
                for t in 0..tensor.passes() {
                    counts[argmax(tensor.probs(m, t, n))] += 1;
                }
            }
            let mode = counts.iter().copied().max().unwrap_or(0);
            1.0 - mode as f64 / passes as f64
        })
        .collect();
    ScoreVector {
        scores,
        orientation: Orientation::UncertaintyHigherIsNoisier,
        statistic: Statistic::VariationRatio.name().into(),
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(ENTROPY_FLOOR).ln()).sum::<f64>()
}

/// Mutual information: entropy of the mean prediction minus mean per-pass entropy.
pub fn bald(tensor: &PredictionTensor) -> ScoreVector {
    let passes = (tensor.members() * tensor.passes()) as f64;
    let mut mean = vec![0.0; tensor.classes()];
    let scores = (0..tensor.images())
        .map(|n| {
            mean.iter_mut().for_each(|v| *v = 0.0);
            let mut expected_entropy = 0.0;
            for m in 0..tensor.members() {
                for t in 0..tensor.passes() {
                    let p = tensor.probs(m, t, n);
                    expected_entropy += entropy(p);
                    for (acc, &v) in mean.iter_mut().zip(p) {
                        *acc += v;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= passes);
            (entropy(&mean) - expected_entropy / passes).max(0.0)
        })
        .collect();
    ScoreVector {
        scores,
        orientation: Orientation::UncertaintyHigherIsNoisier,
        statistic: Statistic::Bald.name().into(),
    }
}

/// Class-averaged population std for image `n`. A single vector has std 0.
pub(crate) fn image_stddev(tensor: &PredictionTensor, n: usize, grouping: Grouping) -> f64 {
    let c = tensor.classes();
    let vectors: Vec<Vec<f64>> = match grouping {
        Grouping::AllPasses => (0..tensor.members())
            .flat_map(|m| (0..tensor.passes()).map(move |t| (m, t)))
            .map(|(m, t)| tensor.probs(m, t, n).to_vec())
            .collect(),
        Grouping::WithinMemberMeans => (0..tensor.members())
            .map(|m| {
                let mut mean = vec![0.0; c];
                for t in 0..tensor.passes() {
                    for (acc, &v) in mean.iter_mut().zip(tensor.probs(m, t, n)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= tensor.passes() as f64);
                mean
            })
            .collect(),
    };
    let count = vectors.len() as f64;
    let total: f64 = (0..c)
        .map(|k| {
            // Shifted by the first vector so identical inputs give exactly 0.
            let origin = vectors[0][k];
            let mean = vectors.iter().map(|v| v[k] - origin).sum::<f64>() / count;
            let var = vectors
                .iter()
                .map(|v| (v[k] - origin - mean).powi(2))
                .sum::<f64>()
                / count;
            var.sqrt()
        })
        .sum();
    total / c as f64
}

/// Per-class population standard deviation, averaged over classes.
pub fn softmax_stddev(tensor: &PredictionTensor, grouping: Grouping) -> Result<ScoreVector> {
    match grouping {
        Grouping::AllPasses if tensor.members() * tensor.passes() < 2 => {
            return Err(Error::validation("std over all passes needs M*T >= 2"))
        }
        Grouping::WithinMemberMeans if tensor.members() < 2 => {
            return Err(Error::validation("std over member means needs M >= 2"))
        }
        _ => {}
    }
    Ok(ScoreVector {
        scores: (0..tensor.images())
            .map(|n| image_stddev(tensor, n, grouping))
            .collect(),
        orientation: Orientation::UncertaintyHigherIsNoisier,
        statistic: Statistic::SoftmaxStd(grouping).name().into(),
    })
}

/// Confidence scores become `1 - s`; uncertainty scores pass through.
pub fn to_uncertainty(scores: &ScoreVector) -> ScoreVector {
    match scores.orientation {
        Orientation::UncertaintyHigherIsNoisier => scores.clone(),
        Orientation::ConfidenceHigherIsCleaner => ScoreVector {
            scores: scores.scores.iter().map(|s| 1.0 - s).collect(),
            orientation: Orientation::UncertaintyHigherIsNoisier,
            statistic: scores.statistic.clone(),
        },
    }
}

/// Uncertainty scores become `1 - u`; confidence scores pass through.
pub fn to_confidence(scores: &ScoreVector) -> ScoreVector {
    match scores.orientation {
        Orientation::ConfidenceHigherIsCleaner => scores.clone(),
        Orientation::UncertaintyHigherIsNoisier => ScoreVector {
            scores: scores.scores.iter().map(|u| 1.0 - u).collect(),
            orientation: Orientation::ConfidenceHigherIsCleaner,
            statistic: scores.statistic.clone(),
        },
    }
}

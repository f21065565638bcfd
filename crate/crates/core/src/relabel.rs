//! Relabel-epoch selection from training dynamics, and label assignment for
//! detected images.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detect::DetectionSet;
use crate::error::{Error, Result};
use crate::nn::{argmax, EpochTrace};
use crate::uncertainty::Grouping;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRule {
    pub variant: Grouping,
    /// Centered moving-average window.
    pub window: usize,
    /// Consecutive strict increases that mark the rise.
    pub rise: usize,
    /// First epoch eligible for selection; earlier traces are ignored.
    pub start_epoch: usize,
}

impl Default for TrajectoryRule {
    fn default() -> Self {
        TrajectoryRule {
            variant: Grouping::WithinMemberMeans,
            window: 3,
            rise: 2,
            start_epoch: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EpochMethod {
    UncertaintyTrajectory(TrajectoryRule),
    GoldSubset,
    Fixed { epoch: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    /// Curve the rule operated on (smoothed trajectory or gold proxy).
    pub curve: Vec<f64>,
    /// Epoch number of every curve entry.
    pub epochs: Vec<usize>,
    pub rise_onset: Option<usize>,
    pub no_rise_detected: bool,
    pub gold_clean: Vec<f64>,
    pub gold_noisy_given: Vec<f64>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelEpochChoice {
    pub epoch: usize,
    pub method: EpochMethod,
    pub diagnostics: EpochDiagnostics,
}

/// Centered moving average over `i - (w-1)/2 ..= i + w/2`, truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let back = window.saturating_sub(1) / 2;
    let ahead = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + ahead).min(values.len().saturating_sub(1));
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Outcome of the trajectory rule on a bare curve, in curve indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveChoice {
    pub index: usize,
    pub smoothed: Vec<f64>,
    pub rise_onset: Option<usize>,
}

/// Smooth with window `window`, find the first index followed by `rise`
/// consecutive strict increases, and take the argmin up to and including that
/// index. Without a rise, the global argmin. Ties go to the earliest index.
pub fn select_from_curve(values: &[f64], window: usize, rise: usize) -> Result<CurveChoice> {
    if window == 0 || rise == 0 {
        return Err(Error::validation("window and rise length must be positive"));
    }
    if values.len() < window + rise {
        return Err(Error::validation(format!(
            "need at least {} epochs of trace, got {}",
            window + rise,
            values.len()
        )));
    }
    let smoothed = moving_average(values, window);
    let rise_onset = (0..smoothed.len().saturating_sub(rise))
        .find(|&i| (i..i + rise).all(|j| smoothed[j + 1] > smoothed[j]));
    let limit = rise_onset.map_or(smoothed.len(), |i| i + 1);
    let index = argmin(&smoothed[..limit]);
    Ok(CurveChoice {
        index,
        smoothed,
        rise_onset,
    })
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn eligible(traces: &[EpochTrace], start_epoch: usize) -> Vec<&EpochTrace> {
    traces.iter().filter(|t| t.epoch >= start_epoch).collect()
}

/// Picks the epoch before the trajectory uncertainty starts to rise.
pub fn select_relabel_epoch_trajectory(
    traces: &[EpochTrace],
    rule: &TrajectoryRule,
) -> Result<RelabelEpochChoice> {
    let used = eligible(traces, rule.start_epoch);
    let values: Vec<f64> = used
        .iter()
        .map(|t| match rule.variant {
            Grouping::AllPasses => t.unc_all_passes,
            Grouping::WithinMemberMeans => t.unc_within_member,
        })
        .collect();
    let choice = select_from_curve(&values, rule.window, rule.rise)?;
    let no_rise = choice.rise_onset.is_none();
    Ok(RelabelEpochChoice {
        epoch: used[choice.index].epoch,
        method: EpochMethod::UncertaintyTrajectory(*rule),
        diagnostics: EpochDiagnostics {
            curve: choice.smoothed,
            epochs: used.iter().map(|t| t.epoch).collect(),
            rise_onset: choice.rise_onset.map(|i| used[i].epoch),
            no_rise_detected: no_rise,
            warning: no_rise.then(|| "no rise detected; using global minimum".to_string()),
            ..Default::default()
        },
    })
}

/// Picks the epoch maximizing gold clean accuracy minus gold noisy accuracy
/// against the given (wrong) labels. Earliest epoch on ties.
pub fn select_relabel_epoch_gold(
    traces: &[EpochTrace],
    start_epoch: usize,
) -> Result<RelabelEpochChoice> {
    let used = eligible(traces, start_epoch);
    if used.is_empty() {
        return Err(Error::validation("no traces to select from"));
    }
    let gold: Vec<_> = used
        .iter()
        .map(|t| {
            t.gold
                .ok_or_else(|| Error::validation(format!("epoch {} has no gold accuracies", t.epoch)))
        })
        .collect::<Result<_>>()?;
    let clean: Vec<f64> = gold.iter().map(|g| g.clean).collect();
    let noisy_given: Vec<f64> = gold.iter().map(|g| g.noisy_given).collect();
    let proxy: Vec<f64> = clean.iter().zip(&noisy_given).map(|(c, n)| c - n).collect();
    let mut best = 0;
    for (i, &v) in proxy.iter().enumerate().skip(1) {
        if v > proxy[best] {
            best = i;
        }
    }
    let warning = (clean == noisy_given)
        .then(|| "gold clean and noisy curves coincide; proxy is flat".to_string());
    Ok(RelabelEpochChoice {
        epoch: used[best].epoch,
        method: EpochMethod::GoldSubset,
        diagnostics: EpochDiagnostics {
            curve: proxy,
            epochs: used.iter().map(|t| t.epoch).collect(),
            gold_clean: clean,
            gold_noisy_given: noisy_given,
            warning,
            ..Default::default()
        },
    })
}

pub fn select_relabel_epoch(traces: &[EpochTrace], method: &EpochMethod) -> Result<RelabelEpochChoice> {
    match method {
        EpochMethod::UncertaintyTrajectory(rule) => select_relabel_epoch_trajectory(traces, rule),
        EpochMethod::GoldSubset => select_relabel_epoch_gold(traces, 1),
        EpochMethod::Fixed { epoch } => {
            if !traces.iter().any(|t| t.epoch == *epoch) {
                return Err(Error::validation(format!("epoch {epoch} outside trained range")));
            }
            Ok(RelabelEpochChoice {
                epoch: *epoch,
                method: *method,
                diagnostics: EpochDiagnostics::default(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelSource {
    Predicted,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelChange {
    pub id: usize,
    pub old_label: usize,
    pub new_label: usize,
    pub was_noisy: Option<bool>,
    pub now_correct: Option<bool>,
}

/// Bookkeeping over the detected images, by status before and after.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelCounts {
    /// Was noisy, now carries the true label.
    pub correctly_relabeled: usize,
    /// Was clean and still is.
    pub kept_clean: usize,
    /// Was clean, now wrong.
    pub newly_corrupted: usize,
    /// Was noisy and still is.
    pub still_noisy: usize,
    /// Images whose label value did not change.
    pub unchanged: usize,
}

impl RelabelCounts {
    pub fn total(&self) -> usize {
        self.correctly_relabeled + self.kept_clean + self.newly_corrupted + self.still_noisy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelOutcome {
    pub source: RelabelSource,
    /// One entry per detected id, ascending.
    pub changes: Vec<LabelChange>,
    /// Present when true labels are known.
    pub counts: Option<RelabelCounts>,
}

impl RelabelOutcome {
    /// New dataset with the detected labels replaced; everything else is untouched.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let mut labels = dataset.given_labels().to_vec();
        for c in &self.changes {
            if c.id >= labels.len() || labels[c.id] != c.old_label {
                return Err(Error::validation(format!(
                    "outcome does not match dataset at id {}",
                    c.id
                )));
            }
            labels[c.id] = c.new_label;
        }
        dataset.with_given_labels(labels)
    }

    /// CSV `id,old_label,new_label,was_noisy,now_correct`.
    pub fn to_csv(&self) -> String {
        let flag = |b: Option<bool>| match b {
            Some(true) => "1",
            Some(false) => "0",
            None => "unknown",
        };
        let mut out = String::from("id,old_label,new_label,was_noisy,now_correct\n");
        for c in &self.changes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.id,
                c.old_label,
                c.new_label,
                flag(c.was_noisy),
                flag(c.now_correct)
            ));
        }
        out
    }
}

fn build_outcome(
    dataset: &Dataset,
    detection: &DetectionSet,
    source: RelabelSource,
    new_label: impl Fn(usize) -> usize,
) -> Result<RelabelOutcome> {
    if let Some(&bad) = detection.ids.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::validation(format!("detected id {bad} outside dataset")));
    }
    let truth = dataset.true_labels();
    let given = dataset.given_labels();
    let mut counts = truth.map(|_| RelabelCounts::default());
    let changes = detection
        .ids
        .iter()
        .map(|&id| {
            let old_label = given[id];
            let new_label = new_label(id);
            let was_noisy = truth.map(|t| t[id] != old_label);
            let now_correct = truth.map(|t| t[id] == new_label);
            if let (Some(c), Some(was), Some(now)) = (counts.as_mut(), was_noisy, now_correct) {
                match (was, now) {
                    (true, true) => c.correctly_relabeled += 1,
                    (false, true) => c.kept_clean += 1,
                    (false, false) => c.newly_corrupted += 1,
                    (true, false) => c.still_noisy += 1,
                }
            }
            if let Some(c) = counts.as_mut() {
                c.unchanged += (old_label == new_label) as usize;
            }
            LabelChange {
                id,
                old_label,
                new_label,
                was_noisy,
                now_correct,
            }
        })
        .collect();
    Ok(RelabelOutcome {
        source,
        changes,
        counts,
    })
}

/// Assigns each detected image the argmax of the stored mean softmax at `epoch`.
pub fn relabel_predicted(
    dataset: &Dataset,
    detection: &DetectionSet,
    traces: &[EpochTrace],
    epoch: usize,
) -> Result<RelabelOutcome> {
    let snapshot = traces
        .iter()
        .find(|t| t.epoch == epoch)
        .and_then(|t| t.mean_softmax.as_ref())
        .ok_or(Error::MissingSnapshot(epoch))?;
    if snapshot.nrows() != dataset.len() || snapshot.ncols() != dataset.num_classes() {
        return Err(Error::validation("snapshot shape does not match dataset"));
    }
    build_outcome(dataset, detection, RelabelSource::Predicted, |id| {
        argmax(snapshot.row(id).as_slice().expect("standard layout"))
    })
}

/// Gives every detected image its true label.
pub fn relabel_oracle(dataset: &Dataset, detection: &DetectionSet) -> Result<RelabelOutcome> {
    let truth = dataset.require_truth()?;
    build_outcome(dataset, detection, RelabelSource::Oracle, |id| truth[id])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectionRule;
    use crate::nn::GoldAccuracies;
    use ndarray::Array2;

    fn trace(epoch: usize, unc: f64, gold: Option<(f64, f64)>) -> EpochTrace {
        EpochTrace {
            epoch,
            mean_softmax: None,
            unc_all_passes: unc,
            unc_within_member: unc,
            train_acc: 0.5,
            gold: gold.map(|(c, n)| GoldAccuracies {
                clean: c,
                noisy_given: n,
                noisy_true: 0.0,
            }),
            scores: None,
        }
    }

    #[test]
    fn hand_worked_trajectory() {
        let c = select_from_curve(&[0.30, 0.28, 0.27, 0.29, 0.33, 0.40], 1, 2).unwrap();
        assert_eq!(c.index, 2);
        assert_eq!(c.rise_onset, Some(2));
    }

    #[test]
    fn increasing_trajectory_rises_at_start() {
        let c = select_from_curve(&[0.1, 0.2, 0.3, 0.4], 1, 2).unwrap();
        assert_eq!((c.index, c.rise_onset), (0, Some(0)));
    }

    #[test]
    fn flat_trajectory_is_flagged() {
        let traces: Vec<EpochTrace> = (0..8).map(|e| trace(e, 0.0, None)).collect();
        let choice = select_relabel_epoch_trajectory(
            &traces,
            &TrajectoryRule {
                start_epoch: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(choice.epoch, 0);
        assert!(choice.diagnostics.no_rise_detected);
        assert!(choice.diagnostics.warning.is_some());
    }

    #[test]
    fn too_few_epochs() {
        assert!(select_from_curve(&[0.1, 0.2, 0.3, 0.4], 3, 2).is_err());
    }

    #[test]
    fn moving_average_edges() {
        let m = moving_average(&[3.0, 6.0, 9.0, 0.0], 3);
        assert_eq!(m, vec![4.5, 6.0, 5.0, 4.5]);
        assert_eq!(moving_average(&[1.0, 2.0], 1), vec![1.0, 2.0]);
    }

    #[test]
    fn start_epoch_maps_indices_to_epochs() {
        let values = [0.9, 0.30, 0.28, 0.27, 0.29, 0.33, 0.40];
        let traces: Vec<EpochTrace> = values.iter().enumerate().map(|(e, &u)| trace(e, u, None)).collect();
        let rule = TrajectoryRule {
            window: 1,
            rise: 2,
            ..Default::default()
        };
        let choice = select_relabel_epoch_trajectory(&traces, &rule).unwrap();
        assert_eq!(choice.epoch, 3);
        assert_eq!(choice.diagnostics.rise_onset, Some(3));
    }

    #[test]
    fn gold_rule_with_flat_noisy_curve() {
        let clean = [0.1, 0.5, 0.9, 0.8, 0.7];
        let traces: Vec<EpochTrace> = clean
            .iter()
            .enumerate()
            .map(|(e, &c)| trace(e + 1, 0.0, Some((c, 0.0))))
            .collect();
        assert_eq!(select_relabel_epoch_gold(&traces, 1).unwrap().epoch, 3);
    }

    #[test]
    fn gold_rule_identical_curves_warns() {
        let traces: Vec<EpochTrace> = (1..6).map(|e| trace(e, 0.0, Some((0.3, 0.3)))).collect();
        let choice = select_relabel_epoch_gold(&traces, 1).unwrap();
        assert_eq!(choice.epoch, 1);
        assert!(choice.diagnostics.warning.is_some());
    }

    #[test]
    fn gold_rule_requires_gold() {
        let traces: Vec<EpochTrace> = (1..4).map(|e| trace(e, 0.0, None)).collect();
        assert!(select_relabel_epoch_gold(&traces, 1).is_err());
    }

    fn noisy_dataset() -> Dataset {
        // ids 0,1 noisy; 2,3 clean. C = 3.
        Dataset::new(
            Array2::zeros((4, 2)),
            vec![1, 2, 0, 1],
            Some(vec![0, 0, 0, 1]),
            3,
        )
        .unwrap()
    }

    fn det(ids: Vec<usize>) -> DetectionSet {
        DetectionSet {
            ids,
            rule: DetectionRule::TopFraction(0.5),
            statistic: "t".into(),
        }
    }

    #[test]
    fn empty_detection_changes_nothing() {
        let d = noisy_dataset();
        let out = relabel_oracle(&d, &det(vec![])).unwrap();
        assert!(out.changes.is_empty());
        assert_eq!(out.apply(&d).unwrap(), d);
    }

    #[test]
    fn oracle_one_noisy_one_clean() {
        let d = noisy_dataset();
        let out = relabel_oracle(&d, &det(vec![1, 3])).unwrap();
        let after = out.apply(&d).unwrap();
        assert_eq!(after.noisy_count().unwrap(), d.noisy_count().unwrap() - 1);
        assert_eq!(out.counts.unwrap().newly_corrupted, 0);
        let all = relabel_oracle(&d, &det(vec![0, 1, 2, 3])).unwrap();
        assert_eq!(all.apply(&d).unwrap().noisy_count().unwrap(), 0);
    }

    #[test]
    fn predicted_uses_snapshot_and_bookkeeping_holds() {
        let d = noisy_dataset();
        // Snapshot: id0 -> 0 (fixed), id1 -> 1 (still noisy), id2 -> 2 (corrupted), id3 -> 1 (kept).
        let mut snap = Array2::<f32>::zeros((4, 3));
        for (i, k) in [0usize, 1, 2, 1].into_iter().enumerate() {
            snap[[i, k]] = 0.8;
            snap[[i, (k + 1) % 3]] = 0.2;
        }
        let mut t = trace(4, 0.0, None);
        t.mean_softmax = Some(snap);
        let out = relabel_predicted(&d, &det(vec![0, 1, 2, 3]), &[t.clone()], 4).unwrap();
        let c = out.counts.unwrap();
        assert_eq!(
            (c.correctly_relabeled, c.still_noisy, c.newly_corrupted, c.kept_clean),
            (1, 1, 1, 1)
        );
        assert_eq!(c.total(), 4);
        let before = d.noisy_count().unwrap();
        let after = out.apply(&d).unwrap().noisy_count().unwrap();
        assert_eq!(after, before - c.correctly_relabeled + c.newly_corrupted);
        assert!(matches!(
            relabel_predicted(&d, &det(vec![0]), &[t], 3),
            Err(Error::MissingSnapshot(3))
        ));
    }

    #[test]
    fn outcome_csv_unknown_without_truth() {
        let d = Dataset::new(Array2::zeros((2, 1)), vec![0, 1], None, 2).unwrap();
        let mut snap = Array2::<f32>::zeros((2, 2));
        snap[[0, 1]] = 1.0;
        snap[[1, 1]] = 1.0;
        let mut t = trace(1, 0.0, None);
        t.mean_softmax = Some(snap);
        let out = relabel_predicted(&d, &det(vec![0]), &[t], 1).unwrap();
        assert!(out.counts.is_none());
        assert_eq!(
            out.to_csv(),
            "id,old_label,new_label,was_noisy,now_correct\n0,0,1,unknown,unknown\n"
        );
    }
}

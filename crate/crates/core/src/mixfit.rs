//! Two-component beta mixture fitted by EM, with posterior and
//! contamination-controlled thresholds.
//!
//! Scores are expected in confidence orientation: the noisy population is
//! the component with the smaller mean. The M-step uses weighted method of
//! moments; a step that would lower the log-likelihood is shrunk back toward
//! the previous parameters, so the recorded trace never decreases.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::uncertainty::{Orientation, ScoreVector};

const MIN_VARIANCE: f64 = 1e-12;
const MAX_STEP_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// Split at the score median and moment-match each half.
    MedianSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub clamp_eps: f64,
    pub init: InitRule,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            tol: 1e-6,
            clamp_eps: 1e-4,
            init: InitRule::MedianSplit,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::validation("clamp_eps must lie in (0, 0.5)"));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::validation("tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaComponent {
    pub alpha: f64,
    pub beta: f64,
    /// Mixing weight of this component.
    pub weight: f64,
}

impl BetaComponent {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        beta_log_pdf_unchecked(x, self.alpha, self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaMixtureFit {
    pub components: [BetaComponent; 2],
    pub noisy_component: usize,
    pub iterations: usize,
    /// Log-likelihood after initialization and after every accepted iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub log_likelihood: f64,
    pub clamp_eps: f64,
}

impl BetaMixtureFit {
    /// Mixing weight of the noisy component.
    pub fn weight(&self) -> f64 {
        self.components[self.noisy_component].weight
    }

    pub fn noisy(&self) -> &BetaComponent {
        &self.components[self.noisy_component]
    }

    pub fn clean(&self) -> &BetaComponent {
        &self.components[1 - self.noisy_component]
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.clamp_eps, 1.0 - self.clamp_eps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn beta_log_pdf_unchecked(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
}

/// `ln` of the Beta(alpha, beta) density at `x`.
pub fn beta_log_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::validation(format!("x = {x} outside (0, 1)")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::validation(format!(
            "beta parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    Ok(beta_log_pdf_unchecked(x, alpha, beta))
}

/// Mean and variance of Beta(alpha, beta).
pub fn beta_moments(alpha: f64, beta: f64) -> (f64, f64) {
    let s = alpha + beta;
    (alpha / s, alpha * beta / (s * s * (s + 1.0)))
}

/// Inverts [`beta_moments`]. `None` when no beta has these moments.
pub fn beta_from_moments(mean: f64, variance: f64) -> Option<(f64, f64)> {
    if !(mean > 0.0 && mean < 1.0 && variance > 0.0) {
        return None;
    }
    let common = mean * (1.0 - mean) / variance - 1.0;
    (common > 0.0).then(|| (mean * common, (1.0 - mean) * common))
}

fn weighted_moments(xs: &[f64], weights: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let total: f64 = weights.clone().sum();
    let mean = xs.iter().zip(weights.clone()).map(|(x, w)| w * x).sum::<f64>() / total;
    let var = xs
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - mean).powi(2))
        .sum::<f64>()
        / total;
    (total, mean, var)
}

fn moment_match(component: usize, mean: f64, var: f64, weight: f64) -> Result<BetaComponent> {
    if !(var > MIN_VARIANCE) {
        return Err(Error::ComponentCollapsed {
            component,
            variance: var,
        });
    }
    let (alpha, beta) = beta_from_moments(mean, var).ok_or(Error::ComponentCollapsed {
        component,
        variance: var,
    })?;
    Ok(BetaComponent {
        alpha,
        beta,
        weight,
    })
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn log_likelihood(xs: &[f64], comps: &[BetaComponent; 2]) -> f64 {
    xs.iter()
        .map(|&x| {
            log_sum_exp(
                comps[0].weight.ln() + comps[0].log_pdf(x),
                comps[1].weight.ln() + comps[1].log_pdf(x),
            )
        })
        .sum()
}

/// Responsibility of component 0 for each score.
fn responsibilities(xs: &[f64], comps: &[BetaComponent; 2]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let a = comps[0].weight.ln() + comps[0].log_pdf(x);
            let b = comps[1].weight.ln() + comps[1].log_pdf(x);
            1.0 / (1.0 + (b - a).exp())
        })
        .collect()
}

fn blend(old: &[BetaComponent; 2], new: &[BetaComponent; 2], step: f64) -> [BetaComponent; 2] {
    let mix = |a: f64, b: f64| a + step * (b - a);
    let mut out = *old;
    for j in 0..2 {
        out[j] = BetaComponent {
            alpha: mix(old[j].alpha, new[j].alpha),
            beta: mix(old[j].beta, new[j].beta),
            weight: mix(old[j].weight, new[j].weight),
        };
    }
    out
}

/// Fits a two-component beta mixture to confidence-oriented scores.
pub fn fit_beta_mixture(scores: &ScoreVector, config: &EmConfig) -> Result<BetaMixtureFit> {
    config.validate()?;
    if scores.orientation != Orientation::ConfidenceHigherIsCleaner {
        return Err(Error::validation(
            "beta-mixture fit expects confidence-oriented scores",
        ));
    }
    fit_beta_mixture_values(&scores.scores, config)
}

/// As [`fit_beta_mixture`] on raw confidence values.
pub fn fit_beta_mixture_values(values: &[f64], config: &EmConfig) -> Result<BetaMixtureFit> {
    config.validate()?;
    if values.len() < 10 {
        return Err(Error::validation(format!(
            "need at least 10 scores, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite score"));
    }
    let eps = config.clamp_eps;
    let xs: Vec<f64> = values.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect();
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::DegenerateScores);
    }

    // Median split, ties broken by position.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut lower = vec![false; xs.len()];
    for &i in &order[..xs.len() / 2] {
        lower[i] = true;
    }
    let half = |want: bool| lower.iter().map(move |&l| if l == want { 1.0 } else { 0.0 });
    let (n_lo, mean_lo, var_lo) = weighted_moments(&xs, half(true));
    let (n_hi, mean_hi, var_hi) = weighted_moments(&xs, half(false));
    let total = xs.len() as f64;
    let mut comps = [
        moment_match(0, mean_lo, var_lo, n_lo / total)?,
        moment_match(1, mean_hi, var_hi, n_hi / total)?,
    ];

    let mut ll = log_likelihood(&xs, &comps);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < config.max_iters {
        let resp = responsibilities(&xs, &comps);
        let r0 = resp.iter().copied();
        let r1 = resp.iter().map(|r| 1.0 - r);
        let (w0, m0, v0) = weighted_moments(&xs, r0);
        let (w1, m1, v1) = weighted_moments(&xs, r1);
        if !(w0 > 0.0 && w1 > 0.0) {
            let component = if w0 > 0.0 { 1 } else { 0 };
            return Err(Error::ComponentCollapsed {
                component,
                variance: 0.0,
            });
        }
        let proposal = [
            moment_match(0, m0, v0, w0 / total)?,
            moment_match(1, m1, v1, w1 / total)?,
        ];

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let candidate = blend(&comps, &proposal, step);
            let cand_ll = log_likelihood(&xs, &candidate);
            if cand_ll >= ll {
                accepted = Some((candidate, cand_ll));
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_ll)) = accepted else {
            break;
        };
        iterations += 1;
        let gain = next_ll - ll;
        comps = next;
        ll = next_ll;
        trace.push(ll);
        if gain < config.tol {
            break;
        }
    }

    let noisy_component = if comps[0].mean() <= comps[1].mean() { 0 } else { 1 };
    Ok(BetaMixtureFit {
        components: comps,
        noisy_component,
        iterations,
        log_likelihood_trace: trace,
        log_likelihood: ll,
        clamp_eps: eps,
    })
}

/// Posterior probability that `score` belongs to the noisy component.
pub fn posterior_noisy(fit: &BetaMixtureFit, score: f64) -> f64 {
    let x = fit.clamp(score);
    let noisy = fit.noisy();
    let clean = fit.clean();
    let a = noisy.weight.ln() + noisy.log_pdf(x);
    let b = clean.weight.ln() + clean.log_pdf(x);
    1.0 / (1.0 + (b - a).exp())
}

/// Largest threshold `θ` such that the images with score `<= θ` have a model-
/// estimated clean fraction (mean of `1 - posterior`) of at most `target`.
/// Returns `(None, [])` when no threshold qualifies. Ids are ascending.
pub fn threshold_for_contamination(
    fit: &BetaMixtureFit,
    scores: &[f64],
    target: f64,
) -> (Option<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    let mut clean_mass = 0.0;
    let mut best: Option<(usize, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == value {
            clean_mass += 1.0 - posterior_noisy(fit, value);
            j += 1;
        }
        if clean_mass / j as f64 <= target {
            best = Some((j, value));
        }
        i = j;
    }
    match best {
        Some((count, theta)) => {
            let mut ids = order[..count].to_vec();
            ids.sort_unstable();
            (Some(theta), ids)
        }
        None => (None, Vec::new()),
    }
}

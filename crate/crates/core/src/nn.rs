//! Dropout MLP classifier, synchronized ensemble training and Monte-Carlo
//! dropout inference.
//!
//! Networks are plain dense ReLU stacks with inverted dropout after every
//! hidden activation and a softmax output. All randomness (initialization,
//! minibatch order, dropout masks) is drawn from per-member ChaCha streams
//! derived from the config seed, so training and inference are
//! bit-deterministic and members can run on any thread.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GoldSubset};
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::uncertainty::{self, Grouping, ScoreVector, Statistic};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LSNN";
const CHECKPOINT_VERSION: u16 = 1;
const INFERENCE_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(D, h1, ..., C)`.
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::validation(
                "layer_sizes needs at least input and output widths, all nonzero",
            ));
        }
        if *self.layer_sizes.last().unwrap() < 2 {
            return Err(Error::validation("output layer must have at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        if dataset.is_empty() {
            return Err(Error::validation("cannot train on an empty dataset"));
        }
        let (first, last) = (self.layer_sizes[0], *self.layer_sizes.last().unwrap());
        if first != dataset.dim() || last != dataset.num_classes() {
            return Err(Error::validation(format!(
                "network {first}->{last} does not fit dataset with D={} C={}",
                dataset.dim(),
                dataset.num_classes()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Dense ReLU network with a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Forward intermediates needed by backprop.
struct ForwardCache {
    /// Input to every layer (post-dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl Mlp {
    /// Uniform(-r, r) weights with `r = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layer_sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-r..r));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weights.ncols())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Inverted-dropout masks (entries `0` or `1 / (1 - p)`) for a batch of `rows`.
    pub fn sample_masks(&self, rows: usize, rate: f64, rng: &mut impl Rng) -> Vec<Array2<f64>> {
        let keep = 1.0 / (1.0 - rate);
        self.hidden_widths()
            .into_iter()
            .map(|w| {
                Array2::from_shape_fn((rows, w), |_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
            })
            .collect()
    }

    fn forward_cached(&self, x: ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> ForwardCache {
        let n_hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(n_hidden);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            inputs.push(a);
            if l == n_hidden {
                return ForwardCache {
                    inputs,
                    pre,
                    probs: softmax_rows(z),
                };
            }
            let mut h = z.mapv(|v| v.max(0.0));
            if let Some(masks) = masks {
                h *= &masks[l];
            }
            pre.push(z);
            a = h;
        }
        unreachable!("network has at least one layer")
    }

    /// Softmax outputs for a batch, optionally with explicit dropout masks.
    pub fn forward(&self, x: ArrayView2<f64>, masks: Option<&[Array2<f64>]>) -> Array2<f64> {
        let n_hidden = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            if l == n_hidden {
                return softmax_rows(z);
            }
            a = z.mapv(|v| v.max(0.0));
            if let Some(masks) = masks {
                a *= &masks[l];
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Mean cross-entropy of `labels` under the network.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize], masks: Option<&[Array2<f64>]>) -> f64 {
        cross_entropy(&self.forward(x, masks), labels)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        masks: Option<&[Array2<f64>]>,
    ) -> (f64, Vec<Layer>) {
        let cache = self.forward_cached(x, masks);
        let loss = cross_entropy(&cache.probs, labels);
        let batch = labels.len() as f64;
        let mut delta = cache.probs;
        for (i, &y) in labels.iter().enumerate() {
            delta[[i, y]] -= 1.0;
        }
        delta /= batch;

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let gw = cache.inputs[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut da = delta.dot(&self.layers[l].weights.t());
                if let Some(masks) = masks {
                    da *= &masks[l - 1];
                }
                ndarray::Zip::from(&mut da)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = da;
            }
            grads.push(Layer {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        (loss, grads)
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(1e-300).ln())
        .sum();
    total / labels.len() as f64
}

fn to_f64(x: ArrayView2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMember {
    pub network: Mlp,
    pub config: ModelConfig,
    pub member_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Member state during synchronized training.
struct MemberState {
    index: usize,
    network: Mlp,
    velocity: Vec<Layer>,
    rng: ChaCha8Rng,
    log: TrainingLog,
}

impl MemberState {
    fn new(config: &ModelConfig, member_seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(config.seed, stream::MEMBER, member_seed));
        let network = Mlp::init(&config.layer_sizes, &mut rng);
        let velocity = network
            .layers
            .iter()
            .map(|l| Layer {
                weights: Array2::zeros(l.weights.raw_dim()),
                bias: Array1::zeros(l.bias.raw_dim()),
            })
            .collect();
        MemberState {
            index: member_seed as usize,
            network,
            velocity,
            rng,
            log: TrainingLog::default(),
        }
    }

    /// One pass of minibatch SGD with momentum over the given labels.
    fn run_epoch(
        &mut self,
        features: &Array2<f64>,
        labels: &[usize],
        config: &ModelConfig,
        epoch: usize,
    ) -> Result<()> {
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let masks = (config.dropout_rate > 0.0).then(|| {
                self.network
                    .sample_masks(batch.len(), config.dropout_rate, &mut self.rng)
            });
            let (loss, grads) = self.network.loss_and_gradient(x.view(), &y, masks.as_deref());
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    member: self.index,
                });
            }
            loss_sum += loss;
            batches += 1;
            for ((layer, vel), grad) in self
                .network
                .layers
                .iter_mut()
                .zip(&mut self.velocity)
                .zip(&grads)
            {
                vel.weights *= config.momentum;
                vel.weights.scaled_add(-config.learning_rate, &grad.weights);
                vel.bias *= config.momentum;
                vel.bias.scaled_add(-config.learning_rate, &grad.bias);
                layer.weights += &vel.weights;
                layer.bias += &vel.bias;
            }
        }
        if !self.network.is_finite() {
            return Err(Error::Diverged {
                epoch,
                member: self.index,
            });
        }
        self.log.epoch_loss.push(loss_sum / batches as f64);
        Ok(())
    }

    fn snapshot(&self, config: &ModelConfig) -> TrainedMember {
        TrainedMember {
            network: self.network.clone(),
            config: config.clone(),
            member_index: self.index,
        }
    }
}

/// Trains one member. Deterministic under `(config.seed, member_seed)`.
pub fn train_member(
    dataset: &Dataset,
    config: &ModelConfig,
    member_seed: u64,
) -> Result<(TrainedMember, TrainingLog)> {
    config.check_dataset(dataset)?;
    let features = to_f64(dataset.features().view());
    let mut state = MemberState::new(config, member_seed);
    for epoch in 1..=config.epochs {
        state.run_epoch(&features, dataset.given_labels(), config, epoch)?;
    }
    let member = state.snapshot(config);
    Ok((member, state.log))
}

/// Softmax outputs indexed `(member, pass, image, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor {
    values: Vec<f64>,
    members: usize,
    passes: usize,
    images: usize,
    classes: usize,
}

impl PredictionTensor {
    /// Builds a tensor from a flat `(m, t, n, k)` row-major buffer, checking
    /// that every slice is a probability vector.
    pub fn from_vec(
        values: Vec<f64>,
        members: usize,
        passes: usize,
        images: usize,
        classes: usize,
    ) -> Result<Self> {
        if members == 0 || passes == 0 || classes == 0 {
            return Err(Error::validation("tensor dimensions must be positive"));
        }
        if values.len() != members * passes * images * classes {
            return Err(Error::validation(format!(
                "{} values for shape {members}x{passes}x{images}x{classes}",
                values.len()
            )));
        }
        for (i, row) in values.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "slice {i} is not a probability vector"
                )));
            }
        }
        Ok(PredictionTensor {
            values,
            members,
            passes,
            images,
            classes,
        })
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Probability vector for `(member, pass, image)`.
    pub fn probs(&self, m: usize, t: usize, n: usize) -> &[f64] {
        let start = ((m * self.passes + t) * self.images + n) * self.classes;
        &self.values[start..start + self.classes]
    }

    /// Mean over all members and passes, `N x C`.
    pub fn mean_softmax(&self) -> Array2<f64> {
        let mut mean = Array2::<f64>::zeros((self.images, self.classes));
        for m in 0..self.members {
            for t in 0..self.passes {
                for n in 0..self.images {
                    let p = self.probs(m, t, n);
                    for (k, v) in mean.row_mut(n).iter_mut().enumerate() {
                        *v += p[k];
                    }
                }
            }
        }
        mean /= (self.members * self.passes) as f64;
        mean
    }

    /// New tensor keeping members in the order given by `order`.
    pub fn permute_members(&self, order: &[usize]) -> Result<Self> {
        let block = self.passes * self.images * self.classes;
        let mut seen = vec![false; self.members];
        let mut values = Vec::with_capacity(self.values.len());
        for &m in order {
            if m >= self.members || std::mem::replace(&mut seen[m], true) {
                return Err(Error::validation("not a permutation of members"));
            }
            values.extend_from_slice(&self.values[m * block..(m + 1) * block]);
        }
        if order.len() != self.members {
            return Err(Error::validation("not a permutation of members"));
        }
        Ok(PredictionTensor {
            values,
            ..*self
        })
    }
}

/// Dropout-off single forward pass, `N x C`.
pub fn deterministic_forward(member: &TrainedMember, features: ArrayView2<f32>) -> Array2<f64> {
    let mut out = Array2::zeros((features.nrows(), member.network.num_classes()));
    for start in (0..features.nrows()).step_by(INFERENCE_CHUNK) {
        let end = (start + INFERENCE_CHUNK).min(features.nrows());
        let x = to_f64(features.slice(s![start..end, ..]));
        out.slice_mut(s![start..end, ..])
            .assign(&member.network.forward(x.view(), None));
    }
    out
}

/// `T` Monte-Carlo dropout passes as a flat `(t, n, k)` buffer.
fn stochastic_passes(
    network: &Mlp,
    dropout_rate: f64,
    features: ArrayView2<f32>,
    passes: usize,
    seed: u64,
) -> Vec<f64> {
    let n = features.nrows();
    let c = network.num_classes();
    let x = to_f64(features);
    let per_pass: Vec<Vec<f64>> = (0..passes)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive(seed, stream::SCORE, t as u64));
            let mut out = Vec::with_capacity(n * c);
            for start in (0..n).step_by(INFERENCE_CHUNK) {
                let end = (start + INFERENCE_CHUNK).min(n);
                let chunk = x.slice(s![start..end, ..]);
                let probs = if dropout_rate > 0.0 {
                    let masks = network.sample_masks(end - start, dropout_rate, &mut rng);
                    network.forward(chunk, Some(&masks))
                } else {
                    network.forward(chunk, None)
                };
                out.extend(probs.iter());
            }
            out
        })
        .collect();
    per_pass.concat()
}

/// `T` stochastic passes with freshly sampled masks per pass, shaped `T x N x C`.
pub fn stochastic_forward(
    member: &TrainedMember,
    features: ArrayView2<f32>,
    passes: usize,
    seed: u64,
) -> Result<ndarray::Array3<f64>> {
    if passes == 0 {
        return Err(Error::validation("need at least one forward pass"));
    }
    if features.ncols() != member.network.input_dim() {
        return Err(Error::validation("feature width does not match network"));
    }
    let flat = stochastic_passes(
        &member.network,
        member.config.dropout_rate,
        features,
        passes,
        seed,
    );
    ndarray::Array3::from_shape_vec(
        (passes, features.nrows(), member.network.num_classes()),
        flat,
    )
    .map_err(|e| Error::validation(e.to_string()))
}

/// Stacks `stochastic_forward` over members. Each member's mask stream is
/// keyed by its `member_index`, so reordering members only permutes the
/// m-axis.
pub fn predict_ensemble(
    members: &[TrainedMember],
    features: ArrayView2<f32>,
    passes: usize,
    seed: u64,
) -> Result<PredictionTensor> {
    let first = members
        .first()
        .ok_or_else(|| Error::validation("empty ensemble"))?;
    let (d, c) = (first.network.input_dim(), first.network.num_classes());
    if members
        .iter()
        .any(|m| m.network.input_dim() != d || m.network.num_classes() != c)
    {
        return Err(Error::validation("ensemble members disagree on D or C"));
    }
    if features.ncols() != d {
        return Err(Error::validation("feature width does not match ensemble"));
    }
    if passes == 0 {
        return Err(Error::validation("need at least one forward pass"));
    }
    let mut values = Vec::with_capacity(members.len() * passes * features.nrows() * c);
    for member in members {
        values.extend(stochastic_passes(
            &member.network,
            member.config.dropout_rate,
            features,
            passes,
            seed::derive(seed, stream::MEMBER, member.member_index as u64),
        ));
    }
    Ok(PredictionTensor {
        values,
        members: members.len(),
        passes,
        images: features.nrows(),
        classes: c,
    })
}

/// Accuracy of the ensemble-mean deterministic prediction against `labels`.
pub fn ensemble_accuracy(members: &[TrainedMember], dataset: &Dataset, labels: &[usize]) -> f64 {
    if dataset.is_empty() || members.is_empty() {
        return 0.0;
    }
    let mut mean = Array2::<f64>::zeros((dataset.len(), dataset.num_classes()));
    for m in members {
        mean += &deterministic_forward(m, dataset.features().view());
    }
    let correct = mean
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().unwrap()) == y)
        .count();
    correct as f64 / dataset.len() as f64
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldAccuracies {
    /// Clean gold images predicted as their (correct) given label.
    pub clean: f64,
    /// Noisy gold images predicted as their wrong given label.
    pub noisy_given: f64,
    /// Noisy gold images predicted as their true label. Diagnostic only.
    pub noisy_true: f64,
}

/// Aggregates recorded at one epoch boundary. Epoch 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Ensemble-mean softmax per training image, `N x C`. Absent on epochs
    /// skipped by the snapshot stride.
    pub mean_softmax: Option<Array2<f32>>,
    /// Std over all `M*T` passes, class-averaged, mean over correctly classified images.
    pub unc_all_passes: f64,
    /// Std over the `M` within-member means, same averaging.
    pub unc_within_member: f64,
    pub train_acc: f64,
    pub gold: Option<GoldAccuracies>,
    /// Per-image score for the configured statistic.
    pub scores: Option<ScoreVector>,
}

#[derive(Debug, Clone)]
pub struct TraceOptions<'a> {
    pub passes: usize,
    pub seed: u64,
    pub gold: Option<&'a GoldSubset>,
    pub statistic: Option<Statistic>,
    /// Keep mean-softmax snapshots every `snapshot_stride` epochs (plus the last).
    pub snapshot_stride: usize,
}

/// Builds the trace for the current state of an ensemble.
pub fn record_epoch_trace(
    dataset: &Dataset,
    members: &[TrainedMember],
    epoch: usize,
    options: &TraceOptions<'_>,
    keep_snapshot: bool,
) -> Result<EpochTrace> {
    let tensor = predict_ensemble(
        members,
        dataset.features().view(),
        options.passes,
        seed::derive(options.seed, stream::TRACE, epoch as u64),
    )?;
    let mean = tensor.mean_softmax();
    let predicted: Vec<usize> = mean
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().unwrap()))
        .collect();
    let given = dataset.given_labels();

    let mut correct = 0usize;
    let (mut all_sum, mut within_sum) = (0.0, 0.0);
    for n in 0..tensor.images() {
        if predicted[n] == given[n] {
            correct += 1;
            all_sum += uncertainty::image_stddev(&tensor, n, Grouping::AllPasses);
            within_sum += uncertainty::image_stddev(&tensor, n, Grouping::WithinMemberMeans);
        }
    }
    let average = |s: f64| if correct == 0 { 0.0 } else { s / correct as f64 };

    let gold = options.gold.map(|g| {
        let frac = |hits: usize, total: usize| {
            if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            }
        };
        let clean: Vec<usize> = g.clean_positions().collect();
        let noisy: Vec<usize> = g.noisy_positions().collect();
        GoldAccuracies {
            clean: frac(
                clean
                    .iter()
                    .filter(|&&i| predicted[g.ids[i]] == g.given_labels[i])
                    .count(),
                clean.len(),
            ),
            noisy_given: frac(
                noisy
                    .iter()
                    .filter(|&&i| predicted[g.ids[i]] == g.given_labels[i])
                    .count(),
                noisy.len(),
            ),
            noisy_true: frac(
                noisy
                    .iter()
                    .filter(|&&i| predicted[g.ids[i]] == g.true_labels[i])
                    .count(),
                noisy.len(),
            ),
        }
    });

    let scores = options
        .statistic
        .map(|stat| stat.compute(&tensor))
        .transpose()?;

    Ok(EpochTrace {
        epoch,
        mean_softmax: keep_snapshot.then(|| mean.mapv(|v| v as f32)),
        unc_all_passes: average(all_sum),
        unc_within_member: average(within_sum),
        train_acc: correct as f64 / tensor.images() as f64,
        gold,
        scores,
    })
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub members: Vec<TrainedMember>,
    pub logs: Vec<TrainingLog>,
    /// One trace per epoch boundary, `0..=epochs`.
    pub traces: Vec<EpochTrace>,
}

/// Trains `members` ensemble members in lockstep, recording a trace at every
/// epoch boundary (including epoch 0, before any update). Members train in
/// parallel. Results are identical to sequential training.
pub fn train_ensemble(
    dataset: &Dataset,
    config: &ModelConfig,
    members: usize,
    traces: Option<&TraceOptions<'_>>,
) -> Result<EnsembleRun> {
    config.check_dataset(dataset)?;
    if members == 0 {
        return Err(Error::validation("ensemble needs at least one member"));
    }
    if let Some(options) = traces {
        if options.passes == 0 {
            return Err(Error::validation("trace passes must be positive"));
        }
        if let Some(g) = options.gold {
            if g.ids.iter().any(|&i| i >= dataset.len()) {
                return Err(Error::validation("gold id outside dataset"));
            }
        }
    }
    let features = to_f64(dataset.features().view());
    let labels = dataset.given_labels();
    let mut states: Vec<MemberState> = (0..members)
        .map(|m| MemberState::new(config, m as u64))
        .collect();
    let stride = traces.map_or(1, |t| t.snapshot_stride.max(1));

    let mut recorded = Vec::new();
    for epoch in 0..=config.epochs {
        if epoch > 0 {
            states
                .par_iter_mut()
                .map(|s| s.run_epoch(&features, labels, config, epoch))
                .collect::<Result<Vec<()>>>()?;
        }
        if let Some(options) = traces {
            let current: Vec<TrainedMember> = states.iter().map(|s| s.snapshot(config)).collect();
            let keep = epoch % stride == 0 || epoch == config.epochs;
            recorded.push(record_epoch_trace(dataset, &current, epoch, options, keep)?);
        }
    }
    Ok(EnsembleRun {
        members: states.iter().map(|s| s.snapshot(config)).collect(),
        logs: states.into_iter().map(|s| s.log).collect(),
        traces: recorded,
    })
}

/// Writes a member checkpoint: magic `LSNN`, version, JSON config block,
/// member index, then per layer the shape and little-endian f64 weights and biases.
pub fn save_member(member: &TrainedMember, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let config = serde_json::to_vec(&member.config).expect("config serializes");
    // Writes into a Vec cannot fail.
    out.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(config.len() as u32).unwrap();
    out.extend_from_slice(&config);
    out.write_u64::<LittleEndian>(member.member_index as u64).unwrap();
    out.write_u32::<LittleEndian>(member.network.layers.len() as u32)
        .unwrap();
    for layer in &member.network.layers {
        out.write_u64::<LittleEndian>(layer.weights.nrows() as u64).unwrap();
        out.write_u64::<LittleEndian>(layer.weights.ncols() as u64).unwrap();
        for &w in layer.weights.iter() {
            out.write_f64::<LittleEndian>(w).unwrap();
        }
        for &b in layer.bias.iter() {
            out.write_f64::<LittleEndian>(b).unwrap();
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_member(path: &Path) -> Result<TrainedMember> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let truncated = |_| bad("truncated checkpoint");
    let mut cur = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected LSNN"));
    }
    if cur.read_u16::<LittleEndian>().map_err(truncated)? != CHECKPOINT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let config_len = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut config = vec![0u8; config_len];
    cur.read_exact(&mut config).map_err(truncated)?;
    let config: ModelConfig =
        serde_json::from_slice(&config).map_err(|e| bad(&format!("config block: {e}")))?;
    let member_index = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let n_layers = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let cols = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if rows.saturating_mul(cols) > bytes.len() {
            return Err(bad("layer shape exceeds file size"));
        }
        let mut w = vec![0f64; rows * cols];
        cur.read_f64_into::<LittleEndian>(&mut w).map_err(truncated)?;
        let mut b = vec![0f64; cols];
        cur.read_f64_into::<LittleEndian>(&mut b).map_err(truncated)?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((rows, cols), w).map_err(|e| bad(&e.to_string()))?,
            bias: Array1::from(b),
        });
    }
    let network = Mlp { layers };
    let sizes: Vec<usize> = std::iter::once(network.input_dim())
        .chain(network.layers.iter().map(|l| l.weights.ncols()))
        .collect();
    if sizes != config.layer_sizes {
        return Err(bad("layer shapes disagree with config"));
    }
    Ok(TrainedMember {
        network,
        config,
        member_index,
    })
}

/// Writes the trace scalars as CSV:
/// `epoch,unc_all_passes,unc_within_member,train_acc[,gold_clean_acc,gold_noisy_given_acc,gold_noisy_true_acc]`.
pub fn traces_to_csv(traces: &[EpochTrace]) -> String {
    let with_gold = traces.iter().any(|t| t.gold.is_some());
    let mut out = String::from("epoch,unc_all_passes,unc_within_member,train_acc");
    if with_gold {
        out.push_str(",gold_clean_acc,gold_noisy_given_acc,gold_noisy_true_acc");
    }
    out.push('\n');
    for t in traces {
        out.push_str(&format!(
            "{},{},{},{}",
            t.epoch, t.unc_all_passes, t.unc_within_member, t.train_acc
        ));
        if with_gold {
            let g = t.gold.unwrap_or(GoldAccuracies {
                clean: f64::NAN,
                noisy_given: f64::NAN,
                noisy_true: f64::NAN,
            });
            out.push_str(&format!(",{},{},{}", g.clean, g.noisy_given, g.noisy_true));
        }
        out.push('\n');
    }
    out
}

const TRACE_MAGIC: &[u8; 4] = b"LSTR";

/// Binary trace archive: scalars, gold accuracies and mean-softmax snapshots.
/// Per-epoch score vectors are not archived.
pub fn save_traces(traces: &[EpochTrace], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    out.write_u16::<LittleEndian>(1).unwrap();
    out.write_u32::<LittleEndian>(traces.len() as u32).unwrap();
    for t in traces {
        out.write_u64::<LittleEndian>(t.epoch as u64).unwrap();
        for v in [t.unc_all_passes, t.unc_within_member, t.train_acc] {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        match t.gold {
            Some(g) => {
                out.write_u8(1).unwrap();
                for v in [g.clean, g.noisy_given, g.noisy_true] {
                    out.write_f64::<LittleEndian>(v).unwrap();
                }
            }
            None => out.write_u8(0).unwrap(),
        }
        match &t.mean_softmax {
            Some(s) => {
                out.write_u8(1).unwrap();
                out.write_u64::<LittleEndian>(s.nrows() as u64).unwrap();
                out.write_u64::<LittleEndian>(s.ncols() as u64).unwrap();
                for &v in s.iter() {
                    out.write_f32::<LittleEndian>(v).unwrap();
                }
            }
            None => out.write_u8(0).unwrap(),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_traces(path: &Path) -> Result<Vec<EpochTrace>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let truncated = |_| bad("truncated trace file");
    let mut cur = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TRACE_MAGIC {
        return Err(bad("bad magic, expected LSTR"));
    }
    if cur.read_u16::<LittleEndian>().map_err(truncated)? != 1 {
        return Err(bad("unsupported trace version"));
    }
    let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut traces = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let epoch = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let mut scalars = [0f64; 3];
        cur.read_f64_into::<LittleEndian>(&mut scalars)
            .map_err(truncated)?;
        let gold = if cur.read_u8().map_err(truncated)? == 1 {
            let mut g = [0f64; 3];
            cur.read_f64_into::<LittleEndian>(&mut g).map_err(truncated)?;
            Some(GoldAccuracies {
                clean: g[0],
                noisy_given: g[1],
                noisy_true: g[2],
            })
        } else {
            None
        };
        let mean_softmax = if cur.read_u8().map_err(truncated)? == 1 {
            let rows = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let cols = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            if rows.saturating_mul(cols) > bytes.len() {
                return Err(bad("snapshot shape exceeds file size"));
            }
            let mut v = vec![0f32; rows * cols];
            cur.read_f32_into::<LittleEndian>(&mut v).map_err(truncated)?;
            Some(Array2::from_shape_vec((rows, cols), v).map_err(|e| bad(&e.to_string()))?)
        } else {
            None
        };
        traces.push(EpochTrace {
            epoch,
            mean_softmax,
            unc_all_passes: scalars[0],
            unc_within_member: scalars[1],
            train_acc: scalars[2],
            gold,
            scores: None,
        });
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};

    fn config(sizes: &[usize], dropout: f64, epochs: usize) -> ModelConfig {
        ModelConfig {
            layer_sizes: sizes.to_vec(),
            dropout_rate: dropout,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs,
            seed: 17,
        }
    }

    fn blobs(n: usize, c: usize, d: usize) -> Dataset {
        make_blobs(&BlobSpec {
            n_per_class: n,
            num_classes: c,
            dim: d,
            separation: 6.0,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = blobs(5, 3, 4);
        let cfg = config(&[4, 8, 3], 0.2, 0);
        let (member, log) = train_member(&d, &cfg, 2).unwrap();
        let mut rng = seed::rng(seed::derive(cfg.seed, stream::MEMBER, 2));
        assert_eq!(member.network, Mlp::init(&cfg.layer_sizes, &mut rng));
        assert!(log.epoch_loss.is_empty());
        assert!(member.network.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = seed::rng(1);
        let net = Mlp::init(&[10, 6, 4], &mut rng);
        let r0 = (6.0f64 / 16.0).sqrt();
        assert!(net.layers[0].weights.iter().all(|w| w.abs() < r0));
        let r1 = (6.0f64 / 10.0).sqrt();
        assert!(net.layers[1].weights.iter().all(|w| w.abs() < r1));
    }

    #[test]
    fn training_is_deterministic_and_members_differ() {
        let d = blobs(10, 3, 4);
        let cfg = config(&[4, 8, 3], 0.3, 3);
        let (a, la) = train_member(&d, &cfg, 0).unwrap();
        let (b, lb) = train_member(&d, &cfg, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = train_member(&d, &cfg, 1).unwrap();
        assert_ne!(a.network, c.network);
    }

    #[test]
    fn ensemble_matches_sequential_members() {
        let d = blobs(10, 3, 4);
        let cfg = config(&[4, 8, 3], 0.3, 3);
        let run = train_ensemble(&d, &cfg, 3, None).unwrap();
        for (m, member) in run.members.iter().enumerate() {
            let (solo, log) = train_member(&d, &cfg, m as u64).unwrap();
            assert_eq!(&solo, member);
            assert_eq!(log, run.logs[m]);
        }
    }

    #[test]
    fn divergence_names_epoch() {
        let d = blobs(10, 3, 4);
        let mut cfg = config(&[4, 8, 3], 0.0, 5);
        cfg.learning_rate = 1e200;
        match train_member(&d, &cfg, 0) {
            Err(e @ Error::Diverged { epoch, .. }) => {
                assert!((1..=5).contains(&epoch));
                assert!(e.to_string().contains(&format!("epoch {epoch}")));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let d = blobs(2, 3, 4);
        assert!(config(&[4, 8, 3], 1.0, 1).validate().is_err());
        assert!(config(&[4, 8, 2], 0.0, 1).check_dataset(&d).is_err());
        assert!(config(&[5, 8, 3], 0.0, 1).check_dataset(&d).is_err());
    }

    #[test]
    fn no_dropout_passes_are_identical() {
        let d = blobs(4, 3, 4);
        let (m, _) = train_member(&d, &config(&[4, 8, 3], 0.0, 1), 0).unwrap();
        let out = stochastic_forward(&m, d.features().view(), 5, 9).unwrap();
        for t in 1..5 {
            assert_eq!(out.index_axis(Axis(0), t), out.index_axis(Axis(0), 0));
        }
        let det = deterministic_forward(&m, d.features().view());
        assert_eq!(out.index_axis(Axis(0), 0), det);
    }

    #[test]
    fn stochastic_forward_is_seeded() {
        let d = blobs(4, 3, 4);
        let (m, _) = train_member(&d, &config(&[4, 8, 3], 0.5, 1), 0).unwrap();
        let a = stochastic_forward(&m, d.features().view(), 25, 3).unwrap();
        let b = stochastic_forward(&m, d.features().view(), 25, 3).unwrap();
        assert_eq!(a, b);
        assert!(stochastic_forward(&m, d.features().view(), 0, 3).is_err());
    }

    #[test]
    fn single_member_single_pass_is_plain_forward() {
        let d = blobs(4, 3, 4);
        let (m, _) = train_member(&d, &config(&[4, 8, 3], 0.0, 1), 0).unwrap();
        let tensor = predict_ensemble(std::slice::from_ref(&m), d.features().view(), 1, 0).unwrap();
        let det = deterministic_forward(&m, d.features().view());
        assert_eq!(tensor.as_slice(), det.as_slice().unwrap());
    }

    #[test]
    fn member_permutation_permutes_tensor() {
        let d = blobs(4, 3, 4);
        let run = train_ensemble(&d, &config(&[4, 8, 3], 0.4, 1), 3, None).unwrap();
        let x = d.features().view();
        let forward = predict_ensemble(&run.members, x, 4, 8).unwrap();
        let reversed: Vec<TrainedMember> = run.members.iter().rev().cloned().collect();
        let back = predict_ensemble(&reversed, x, 4, 8).unwrap();
        assert_eq!(back, forward.permute_members(&[2, 1, 0]).unwrap());
    }

    #[test]
    fn mismatched_members_rejected() {
        let a = blobs(4, 3, 4);
        let b = blobs(4, 4, 4);
        let (ma, _) = train_member(&a, &config(&[4, 8, 3], 0.0, 0), 0).unwrap();
        let (mb, _) = train_member(&b, &config(&[4, 8, 4], 0.0, 0), 1).unwrap();
        assert!(predict_ensemble(&[ma, mb], a.features().view(), 1, 0).is_err());
    }

    #[test]
    fn dropout_free_single_model_has_zero_trajectory() {
        let d = blobs(10, 3, 4);
        let options = TraceOptions {
            passes: 3,
            seed: 1,
            gold: None,
            statistic: None,
            snapshot_stride: 1,
        };
        let run = train_ensemble(&d, &config(&[4, 8, 3], 0.0, 4), 1, Some(&options)).unwrap();
        assert_eq!(run.traces.len(), 5);
        for t in &run.traces {
            assert_eq!(t.unc_all_passes, 0.0);
            assert_eq!(t.unc_within_member, 0.0);
            assert!((0.0..=1.0).contains(&t.train_acc));
        }
    }

    #[test]
    fn checkpoint_and_trace_round_trip() {
        let d = blobs(6, 3, 4);
        let options = TraceOptions {
            passes: 2,
            seed: 1,
            gold: None,
            statistic: None,
            snapshot_stride: 2,
        };
        let run = train_ensemble(&d, &config(&[4, 8, 5, 3], 0.2, 3), 2, Some(&options)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lsnn");
        save_member(&run.members[1], &path).unwrap();
        assert_eq!(load_member(&path).unwrap(), run.members[1]);

        let tpath = dir.path().join("t.lstr");
        save_traces(&run.traces, &tpath).unwrap();
        let back = load_traces(&tpath).unwrap();
        assert_eq!(back, run.traces);
        assert!(back[1].mean_softmax.is_none());
        assert!(back[2].mean_softmax.is_some() && back[3].mean_softmax.is_some());
    }

    #[test]
    fn trace_csv_header() {
        let csv = traces_to_csv(&[]);
        assert_eq!(csv, "epoch,unc_all_passes,unc_within_member,train_acc\n");
    }
}

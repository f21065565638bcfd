//! Reference implementations shared by the oracle and acceptance suites.
#![allow(dead_code)]

use labelsift::nn::{Mlp, PredictionTensor};
use labelsift::uncertainty::{bald, mean_max_softmax, softmax_stddev, variation_ratio, Grouping};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

/// Norm-wise relative error between analytic and central-difference gradients.
pub fn gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=8)];
    for _ in 0..depth {
        sizes.push(rng.random_range(2..=8));
    }
    let mut net = Mlp::init(&sizes, &mut rng);
    // Nonzero biases keep pre-activations off the ReLU kink even when a
    // dropout mask zeroes a whole layer.
    for layer in &mut net.layers {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let batch = rng.random_range(1..=6);
    let x = Array2::from_shape_fn((batch, sizes[0]), |_| rng.random_range(-2.0..2.0));
    let classes = *sizes.last().unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let masks = if rng.random_bool(0.5) {
        Some(net.sample_masks(batch, 0.3, &mut rng))
    } else {
        None
    };
    let (_, grads) = net.loss_and_gradient(x.view(), &labels, masks.as_deref());

    let h = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    let mut probe = net.clone();
    for l in 0..net.layers.len() {
        for idx in 0..net.layers[l].weights.len() {
            let (r, c) = (idx / net.layers[l].weights.ncols(), idx % net.layers[l].weights.ncols());
            let orig = net.layers[l].weights[[r, c]];
            probe.layers[l].weights[[r, c]] = orig + h;
            let up = probe.loss(x.view(), &labels, masks.as_deref());
            probe.layers[l].weights[[r, c]] = orig - h;
            let down = probe.loss(x.view(), &labels, masks.as_deref());
            probe.layers[l].weights[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[l].weights[[r, c]];
            diff += (numeric - analytic).powi(2);
            norm += numeric.powi(2) + analytic.powi(2);
        }
        for j in 0..net.layers[l].bias.len() {
            let orig = net.layers[l].bias[j];
            probe.layers[l].bias[j] = orig + h;
            let up = probe.loss(x.view(), &labels, masks.as_deref());
            probe.layers[l].bias[j] = orig - h;
            let down = probe.loss(x.view(), &labels, masks.as_deref());
            probe.layers[l].bias[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[l].bias[j];
            diff += (numeric - analytic).powi(2);
            norm += numeric.powi(2) + analytic.powi(2);
        }
    }
    if norm < 1e-24 {
        return 0.0;
    }
    diff.sqrt() / norm.sqrt()
}

pub mod naive {
    //! Loop-level statistic definitions over `p[m][t][n][k]`.

    pub type Tensor = Vec<Vec<Vec<Vec<f64>>>>;

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for k in 1..v.len() {
            if v[k] > v[best] {
                best = k;
            }
        }
        best
    }

    fn entropy(v: &[f64]) -> f64 {
        let mut h = 0.0;
        for &p in v {
            if p > 0.0 {
                h -= p * p.max(1e-12).ln();
            }
        }
        h
    }

    pub fn mean_max(p: &Tensor, n: usize) -> f64 {
        let (mut sum, mut count) = (0.0, 0.0);
        for member in p {
            for pass in member {
                sum += pass[n].iter().cloned().fold(f64::MIN, f64::max);
                count += 1.0;
            }
        }
        sum / count
    }

    pub fn vr(p: &Tensor, n: usize) -> f64 {
        let k = p[0][0][n].len();
        let mut counts = vec![0.0; k];
        let mut total = 0.0;
        for member in p {
            for pass in member {
                counts[argmax(&pass[n])] += 1.0;
                total += 1.0;
            }
        }
        1.0 - counts.iter().cloned().fold(0.0, f64::max) / total
    }

    pub fn bald(p: &Tensor, n: usize) -> f64 {
        let k = p[0][0][n].len();
        let mut mean = vec![0.0; k];
        let (mut ent, mut total) = (0.0, 0.0);
        for member in p {
            for pass in member {
                for c in 0..k {
                    mean[c] += pass[n][c];
                }
                ent += entropy(&pass[n]);
                total += 1.0;
            }
        }
        for v in &mut mean {
            *v /= total;
        }
        (entropy(&mean) - ent / total).max(0.0)
    }

    fn std_of(vectors: &[Vec<f64>]) -> f64 {
        let k = vectors[0].len();
        let count = vectors.len() as f64;
        let mut total = 0.0;
        for c in 0..k {
            let mean = vectors.iter().map(|v| v[c]).sum::<f64>() / count;
            let var = vectors.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / count;
            total += var.sqrt();
        }
        total / k as f64
    }

    pub fn std_all(p: &Tensor, n: usize) -> f64 {
        let vectors: Vec<Vec<f64>> = p.iter().flatten().map(|pass| pass[n].clone()).collect();
        std_of(&vectors)
    }

    pub fn std_within(p: &Tensor, n: usize) -> f64 {
        let vectors: Vec<Vec<f64>> = p
            .iter()
            .map(|member| {
                let k = member[0][n].len();
                let mut mean = vec![0.0; k];
                for pass in member {
                    for c in 0..k {
                        mean[c] += pass[n][c] / member.len() as f64;
                    }
                }
                mean
            })
            .collect();
        std_of(&vectors)
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng) -> (PredictionTensor, naive::Tensor) {
    let (m, t, n, k) = (
        rng.random_range(1..=5),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    );
    let mut nested = vec![vec![vec![vec![0.0; k]; n]; t]; m];
    let mut flat = Vec::with_capacity(m * t * n * k);
    for member in nested.iter_mut() {
        for pass in member.iter_mut() {
            for row in pass.iter_mut() {
                // Occasional hard zeros and one-hot rows exercise the entropy floor.
                let sharp = rng.random_bool(0.1);
                for v in row.iter_mut() {
                    *v = if sharp && rng.random_bool(0.5) { 0.0 } else { rng.random::<f64>() + 1e-3 };
                }
                if row.iter().all(|&v| v == 0.0) {
                    row[rng.random_range(0..k)] = 1.0;
                }
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                flat.extend_from_slice(row);
            }
        }
    }
    (PredictionTensor::from_vec(flat, m, t, n, k).unwrap(), nested)
}

/// Draws from `0.4 Beta(2,8) + 0.6 Beta(8,2)`, returning the values and
/// whether each came from the low (noisy) component.
pub fn beta_mixture_sample(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = Beta::new(2.0, 8.0).unwrap();
    let high = Beta::new(8.0, 2.0).unwrap();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.4) {
                (low.sample(&mut rng), true)
            } else {
                (high.sample(&mut rng), false)
            }
        })
        .unzip()
}

/// Largest absolute gap between library statistics and the naive loops over
/// `trials` random tensors.
pub fn statistic_max_diff(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (tensor, nested) = random_tensor(&mut rng);
        let n = tensor.images();
        let check = |got: &[f64], f: &dyn Fn(usize) -> f64, worst: &mut f64| {
            for i in 0..n {
                *worst = worst.max((got[i] - f(i)).abs());
            }
        };
        check(&mean_max_softmax(&tensor).scores, &|i| naive::mean_max(&nested, i), &mut worst);
        check(&variation_ratio(&tensor).scores, &|i| naive::vr(&nested, i), &mut worst);
        check(&bald(&tensor).scores, &|i| naive::bald(&nested, i), &mut worst);
        if tensor.members() * tensor.passes() >= 2 {
            let got = softmax_stddev(&tensor, Grouping::AllPasses).unwrap();
            check(&got.scores, &|i| naive::std_all(&nested, i), &mut worst);
        }
        if tensor.members() >= 2 {
            let got = softmax_stddev(&tensor, Grouping::WithinMemberMeans).unwrap();
            check(&got.scores, &|i| naive::std_within(&nested, i), &mut worst);
        }
    }
    worst
}

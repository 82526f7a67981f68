//! Desk-scale trainer: mini-batch gradient descent on the mean logistic loss
//! with analytic backpropagation.
//!
//! Inputs are standardized during training and the affine standardization is
//! folded into the first layer afterwards, so the exported model consumes raw
//! feature vectors.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_budget, param_count, ModelError, ModelSpec};
use crate::simkernel::RngStream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate labels: training data needs at least one sample of each class")]
    DegenerateLabels,
    #[error("{features} feature rows for {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature rows have inconsistent dimensions")]
    RaggedFeatures,
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub version: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 60,
            batch: 32,
            seed: 42,
            hidden: vec![8],
            version: "mlp-v1".into(),
        }
    }
}

/// A dense ReLU/sigmoid network with `f64` parameters in the same layout as
/// [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

struct Pass {
    /// Activations per layer, input first.
    acts: Vec<Vec<f64>>,
    /// Output logit.
    logit: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mlp {
    pub fn init(layer_sizes: Vec<usize>, stream: &RngStream) -> Self {
        let mut rng = stream.rng();
        let mut params = Vec::with_capacity(param_count(&layer_sizes));
        for dims in layer_sizes.windows(2) {
            let std = (2.0 / dims[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..dims[0] * dims[1]).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, dims[1]));
        }
        Mlp {
            layer_sizes,
            params,
        }
    }

    fn forward(&self, x: &[f64]) -> Pass {
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        let n = self.layer_sizes.len();
        let mut logit = 0.0;
        for (li, dims) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (dims[0], dims[1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let prev = acts.last().expect("input present");
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    b[o] + w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(prev)
                        .map(|(wi, a)| wi * a)
                        .sum::<f64>()
                })
                .collect();
            if li + 2 == n {
                logit = z[0];
            } else {
                acts.push(z.into_iter().map(|v| v.max(0.0)).collect());
            }
        }
        Pass { acts, logit }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.forward(x).logit)
    }

    /// Mean logistic loss over the given rows.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[bool], rows: &[usize]) -> f64 {
        rows.iter()
            .map(|&i| {
                let z = self.forward(&xs[i]).logit;
                // -log sigmoid(z) for positives, -log(1 - sigmoid(z)) otherwise
                if ys[i] {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    /// Analytic gradient of [`Mlp::loss`] with respect to every parameter.
    pub fn gradient(&self, xs: &[Vec<f64>], ys: &[bool], rows: &[usize]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let n_layers = self.layer_sizes.len() - 1;
        let offsets: Vec<usize> = self
            .layer_sizes
            .windows(2)
            .scan(0, |off, d| {
                let o = *off;
                *off += d[0] * d[1] + d[1];
                Some(o)
            })
            .collect();
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let pass = self.forward(&xs[i]);
            let y = if ys[i] { 1.0 } else { 0.0 };
            // dL/dz at the output
            let mut delta = vec![(sigmoid(pass.logit) - y) * scale];
            for l in (0..n_layers).rev() {
                let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                let off = offsets[l];
                let a_in = &pass.acts[l];
                for o in 0..n_out {
                    for k in 0..n_in {
                        grad[off + o * n_in + k] += delta[o] * a_in[k];
                    }
                    grad[off + n_in * n_out + o] += delta[o];
                }
                if l > 0 {
                    let w = &self.params[off..off + n_in * n_out];
                    delta = (0..n_in)
                        .map(|k| {
                            if a_in[k] > 0.0 {
                                (0..n_out).map(|o| w[o * n_in + k] * delta[o]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        grad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let std = (0..d)
            .map(|j| {
                let v = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v.sqrt() > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Rewrites the first layer so `net(apply(x)) == folded(x)`.
    pub fn fold_into(&self, net: &mut Mlp) {
        let (n_in, n_out) = (net.layer_sizes[0], net.layer_sizes[1]);
        for o in 0..n_out {
            let mut shift = 0.0;
            for k in 0..n_in {
                let w = &mut net.params[o * n_in + k];
                *w /= self.std[k];
                shift += *w * self.mean[k];
            }
            net.params[n_in * n_out + o] -= shift;
        }
    }
}

/// Trains a classifier on feature rows and binary labels (true = preictal).
pub fn train(
    xs: &[Vec<f64>],
    ys: &[bool],
    cfg: &TrainConfig,
    budget_bytes: usize,
) -> Result<ModelSpec, TrainError> {
    if xs.len() != ys.len() {
        return Err(TrainError::LengthMismatch {
            features: xs.len(),
            labels: ys.len(),
        });
    }
    if !ys.iter().any(|&y| y) || !ys.iter().any(|&y| !y) {
        return Err(TrainError::DegenerateLabels);
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(TrainError::RaggedFeatures);
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 || cfg.hidden.contains(&0) {
        return Err(TrainError::BadHyper(format!(
            "lr {} batch {} hidden {:?}",
            cfg.lr, cfg.batch, cfg.hidden
        )));
    }
    let mut layers = vec![d];
    layers.extend(&cfg.hidden);
    layers.push(1);
    // refuse before spending time on an over-budget architecture
    check_budget(
        &ModelSpec::zeros(layers.clone(), cfg.version.clone()),
        budget_bytes,
    )?;

    let stream = RngStream::new(cfg.seed, "trainer");
    let scaler = Standardizer::fit(xs);
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| scaler.apply(x)).collect();
    let mut net = Mlp::init(layers, &stream.child(0));
    let mut rng = stream.child(1).rng();
    let mut order: Vec<usize> = (0..zs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let g = net.gradient(&zs, ys, batch);
            for (p, gi) in net.params.iter_mut().zip(&g) {
                *p -= cfg.lr * gi;
            }
        }
    }
    scaler.fold_into(&mut net);
    let model = ModelSpec {
        layer_sizes: net.layer_sizes,
        weights: net.params.iter().map(|&p| p as f32).collect(),
        version: cfg.version.clone(),
    };
    model.validate()?;
    check_budget(&model, budget_bytes)?;
    Ok(model)
}

/// Fraction of rows where `p >= 0.5` agrees with the label.
pub fn accuracy(model: &ModelSpec, xs: &[Vec<f64>], ys: &[bool]) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        if (crate::model::infer_slice(model, x)? >= 0.5) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MODEL_BUDGET_BYTES;
    use rand::Rng;

    /// Central differences with step `eps`; independent of the backprop path.
    pub(crate) fn finite_difference(net: &Mlp, xs: &[Vec<f64>], ys: &[bool], eps: f64) -> Vec<f64> {
        let rows: Vec<usize> = (0..xs.len()).collect();
        (0..net.params.len())
            .map(|i| {
                let mut up = net.clone();
                up.params[i] += eps;
                let mut down = net.clone();
                down.params[i] -= eps;
                (up.loss(xs, ys, &rows) - down.loss(xs, ys, &rows)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let stream = RngStream::new(seed, "gradcheck");
            let mut rng = stream.child(9).rng();
            let d = rng.random_range(2..5);
            let h = rng.random_range(2..6);
            let net = Mlp::init(vec![d, h, 1], &stream);
            let xs: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let ys: Vec<bool> = (0..12).map(|_| rng.random_bool(0.5)).collect();
            let rows: Vec<usize> = (0..xs.len()).collect();
            let analytic = net.gradient(&xs, &ys, &rows);
            let numeric = finite_difference(&net, &xs, &ys, 1e-4);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-3, "seed {seed}: analytic {a} numeric {n}");
            }
        }
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = RngStream::new(3, "toy").rng();
        (0..20)
            .map(|i| {
                let pos = i % 2 == 0;
                let cx = if pos { 2.0 } else { -2.0 };
                let x = vec![
                    cx + rng.random_range(-1.0..1.0),
                    rng.random_range(-3.0..3.0),
                ];
                (x, pos)
            })
            .unzip()
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (xs, ys) = separable();
        let cfg = TrainConfig {
            epochs: 200,
            batch: 4,
            ..TrainConfig::default()
        };
        let m = train(&xs, &ys, &cfg, MODEL_BUDGET_BYTES).unwrap();
        assert_eq!(accuracy(&m, &xs, &ys).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train(
                &xs,
                &[true, true],
                &TrainConfig::default(),
                MODEL_BUDGET_BYTES
            ),
            Err(TrainError::DegenerateLabels)
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let (xs, ys) = separable();
        let cfg = TrainConfig::default();
        let a = train(&xs, &ys, &cfg, MODEL_BUDGET_BYTES).unwrap();
        let b = train(&xs, &ys, &cfg, MODEL_BUDGET_BYTES).unwrap();
        assert_eq!(a.weights, b.weights);
        let c = train(
            &xs,
            &ys,
            &TrainConfig { seed: 1, ..cfg },
            MODEL_BUDGET_BYTES,
        )
        .unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn over_budget_architecture_is_refused() {
        let (xs, ys) = separable();
        let cfg = TrainConfig {
            hidden: vec![5000],
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&xs, &ys, &cfg, MODEL_BUDGET_BYTES),
            Err(TrainError::Model(ModelError::BudgetExceeded { .. }))
        ));
    }

    #[test]
    fn folding_preserves_predictions() {
        let (xs, _) = separable();
        let scaler = Standardizer::fit(&xs);
        let net = Mlp::init(vec![2, 4, 1], &RngStream::new(1, "fold"));
        let mut folded = net.clone();
        scaler.fold_into(&mut folded);
        for x in &xs {
            let a = net.predict(&scaler.apply(x));
            let b = folded.predict(x);
            assert!((a - b).abs() < 1e-12);
        }
    }
}

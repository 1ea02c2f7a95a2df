//! One-hidden-layer softmax classifier over embedding features. The
//! discriminator and the downstream reference classifier share this exact
//! architecture family; they differ only in head count and in how batches are
//! assembled.

use serde::{Deserialize, Serialize};

use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// Row-major dense net: `w1` (hidden x in_dim), `b1` (hidden),
/// `w2` (out_dim x hidden), `b2` (out_dim), tanh activation, softmax output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Zero-initialized gradient buffer shaped like an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Mlp {
    /// The output layer starts at zero, so a fresh net emits the exact
    /// uniform distribution regardless of the hidden layer's random init.
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::Config("mlp dims must be positive".into()));
        }
        let mut rng = rng_from(seed, &[stream::MODEL_INIT]);
        use rand::Rng;
        let scale = 1.0 / (in_dim as f64).sqrt();
        let w1 = (0..hidden * in_dim).map(|_| rng.random_range(-scale..scale)).collect();
        Ok(Mlp {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        })
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.b1.clone();
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
            let mut s = 0.0;
            for (w, xi) in row.iter().zip(x) {
                s += w * xi;
            }
            *hj = (*hj + s).tanh();
        }
        h
    }

    /// Class probabilities for a feature vector; always a simplex.
    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Domain(format!(
                "feature dimension {} does not match classifier input {}",
                x.len(),
                self.in_dim
            )));
        }
        let h = self.hidden_activations(x);
        let mut logits = self.b2.clone();
        for (o, lo) in logits.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let mut s = 0.0;
            for (w, hj) in row.iter().zip(&h) {
                s += w * hj;
            }
            *lo += s;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut probs = logits;
        for p in &mut probs {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in &mut probs {
            *p /= sum;
        }
        Ok(probs)
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let probs = self.probs(x)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Mean cross-entropy over the batch and its parameter gradient.
    pub fn loss_and_grads(&self, batch: &[(&[f64], usize)]) -> Result<(f64, MlpGrads)> {
        if batch.is_empty() {
            return Err(Error::Domain("classifier batch is empty".into()));
        }
        let n = batch.len() as f64;
        let mut grads = MlpGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        };
        let mut loss = 0.0;
        for &(x, target) in batch {
            if target >= self.out_dim {
                return Err(Error::Domain(format!(
                    "target class {target} outside {} heads",
                    self.out_dim
                )));
            }
            let h = self.hidden_activations(x);
            let probs = self.probs(x)?;
            loss -= probs[target].max(f64::MIN_POSITIVE).ln();

            // d(mean NLL)/d logits = (p - onehot) / n
            let mut dlogits = probs;
            dlogits[target] -= 1.0;
            for d in &mut dlogits {
                *d /= n;
            }
            let mut dh = vec![0.0; self.hidden];
            for (o, d) in dlogits.iter().enumerate() {
                grads.b2[o] += d;
                let wrow = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                let grow = &mut grads.w2[o * self.hidden..(o + 1) * self.hidden];
                for j in 0..self.hidden {
                    grow[j] += d * h[j];
                    dh[j] += d * wrow[j];
                }
            }
            for j in 0..self.hidden {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                grads.b1[j] += da;
                let grow = &mut grads.w1[j * self.in_dim..(j + 1) * self.in_dim];
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += da * xi;
                }
            }
        }
        Ok((loss / n, grads))
    }

    /// One SGD step on the batch; returns the pre-update mean loss.
    pub fn train_step(&mut self, batch: &[(&[f64], usize)], lr: f64) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        for (p, g) in self.w1.iter_mut().zip(&grads.w1) {
            *p -= lr * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= lr * g;
        }
        for (p, g) in self.w2.iter_mut().zip(&grads.w2) {
            *p -= lr * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= lr * g;
        }
        Ok(loss)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        let arrays = [&self.w1, &self.b1, &self.w2, &self.b2];
        let mut i = idx;
        for a in arrays {
            if i < a.len() {
                return a[i];
            }
            i -= a.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let arrays = [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        let mut i = idx;
        for a in arrays {
            if i < a.len() {
                a[i] = value;
                return;
            }
            i -= a.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn grads_flat(grads: &MlpGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for a in [&grads.w1, &grads.b1, &grads.w2, &grads.b2] {
            out.extend_from_slice(a);
        }
        out
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let checks = [
            ("w1", self.w1.len(), self.hidden * self.in_dim),
            ("b1", self.b1.len(), self.hidden),
            ("w2", self.w2.len(), self.out_dim * self.hidden),
            ("b2", self.b2.len(), self.out_dim),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "classifier array {name} has {got} values, expected {want}"
                )));
            }
        }
        for a in [&self.w1, &self.b1, &self.w2, &self.b2] {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint("non-finite value in classifier".into()));
            }
        }
        Ok(())
    }
}

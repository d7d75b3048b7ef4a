use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, Batch, Vd2tConfig, Vd2tModel};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::forward::FrameKind;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of sigmoid(`logits`) against `target`.
pub fn bce(logits: &[f64], target: &[f64]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let p = sigmoid(z).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / logits.len() as f64
}

/// Gradient of [`bce`] with respect to the logits; zero where the clamp is
/// active.
pub fn bce_grad(logits: &[f64], target: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                0.0
            } else {
                (p - y) / n
            }
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one step to `params` given `grads`, one slice pair per tensor.
    pub fn step<'a>(&mut self, tensors: impl Iterator<Item = (&'a mut [f64], &'a [f64])>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in tensors.enumerate() {
            if self.m.len() <= k {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// Per-epoch losses and the epoch whose weights were kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_len: usize,
    pub val_len: usize,
}

/// Seeded shuffle of `0..n` split into (train, validation) with
/// `round(n * val_fraction)` validation samples, at least one of each.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Training(format!("need at least 2 samples, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nv = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - nv);
    Ok((idx, val))
}

fn gather(samples: &[Sample], idx: &[usize]) -> Batch {
    let mut b = Batch::default();
    for &i in idx {
        let s = &samples[i];
        b.push(&s.dv, &s.descriptor, &s.target);
    }
    b
}

fn eval_loss(model: &mut Vd2tModel, samples: &[Sample], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(model.config.batch_size.max(64)) {
        total += model.eval_loss(&gather(samples, chunk))? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains a fresh model on `samples` and returns the weights from the epoch
/// with the lowest validation loss. `on_epoch(epoch, train, val)` is called
/// after every epoch.
///
/// Every sample must be a difference against the flat reference.
pub fn train(
    samples: &[Sample],
    config: &Vd2tConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<(Vd2tModel, TrainReport)> {
    if samples.iter().any(|s| s.reference != FrameKind::ReferenceFlat) {
        return Err(Error::Training("VD2T requires the flat reference".into()));
    }
    let mut model = Vd2tModel::new(config.clone())?;
    let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.learning_rate);
    let mut order = train_idx.clone();
    let mut best = (f64::INFINITY, 0, model.clone());
    let mut report = TrainReport { train_len: train_idx.len(), val_len: val_idx.len(), ..TrainReport::default() };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            // a single-sample batch has no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let b = gather(samples, chunk);
            model.zero_grad();
            let loss = model
                .loss_and_grad(&b, rng.random())
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            sum += loss * chunk.len() as f64;
            adam.step(model.layers_mut().map(|l| (l.params.as_mut_slice(), l.grads.as_slice())));
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = eval_loss(&mut model, samples, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("epoch {epoch}: non-finite validation loss")));
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        on_epoch(epoch, train_loss, val_loss);
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
        }
    }
    report.best_epoch = best.1;
    report.best_val_loss = best.0;
    Ok((best.2, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vd2t::tests::tiny;
    use crate::vd2t::OUTPUT_LEN;
    use std::sync::Arc;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce(&[0.0], &[1.0]) - 2f64.ln()).abs() < 1e-12);
        assert!((bce(&[0.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
        // -(ln 0.9 + ln 0.8) / 2
        let v = bce(&[logit(0.9), logit(0.2)], &[1.0, 0.0]);
        assert!((v - 0.164252).abs() < 1e-6, "{v}");
        // saturated logits hit the clamp, not infinity
        let worst = bce(&[-1e3], &[1.0]);
        assert!((worst + BCE_CLAMP.ln()).abs() < 1e-9);
        assert_eq!(bce_grad(&[-1e3], &[1.0]), vec![0.0]);
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 0.0];
        let g = bce_grad(&z, &y);
        for i in 0..3 {
            let mut a = z;
            let mut b = z;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (bce(&a, &y) - bce(&b, &y)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut adam = Adam::new(1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, -40.0, 1e-3];
        adam.step(std::iter::once((p.as_mut_slice(), &g[..])));
        let moved: Vec<f64> = p.iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| b - a).collect();
        for (d, gi) in moved.iter().zip(g) {
            assert!((d.abs() - 1e-3).abs() < 1e-7, "{d}");
            assert_eq!(d.signum(), gi.signum());
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(100, 0.1, 4).unwrap();
        assert_eq!((t.len(), v.len()), (90, 10));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 4).unwrap(), (t, v));
        assert_ne!(split_indices(100, 0.1, 5).unwrap().1, split_indices(100, 0.1, 4).unwrap().1);
        assert!(split_indices(1, 0.1, 0).is_err());
    }

    fn toy_samples(n: usize, reference: FrameKind) -> Vec<Sample> {
        let batch = crate::vd2t::tests::random_batch(n, 21);
        let descriptor: Arc<[f64]> = batch.heights[..OUTPUT_LEN].into();
        (0..n)
            .map(|i| Sample {
                dv: batch.dv[i * 104..(i + 1) * 104].to_vec(),
                descriptor: descriptor.clone(),
                target: batch.target[i * OUTPUT_LEN..(i + 1) * OUTPUT_LEN].to_vec(),
                bend_angle: 0.0,
                pattern_id: format!("toy{i}"),
                noise_seed: i as u64,
                reference,
            })
            .collect()
    }

    #[test]
    fn rejects_deformed_reference() {
        let s = toy_samples(4, FrameKind::ReferenceDeformed);
        let e = train(&s, &tiny(), |_, _, _| {}).unwrap_err();
        assert!(e.to_string().contains("flat reference"));
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_best_epoch() {
        let s = toy_samples(20, FrameKind::ReferenceFlat);
        let cfg = Vd2tConfig { epochs: 4, learning_rate: 1e-2, ..tiny() };
        let mut seen = Vec::new();
        let (a, ra) = train(&s, &cfg, |e, t, v| seen.push((e, t, v))).unwrap();
        let (b, rb) = train(&s, &cfg, |_, _, _| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
        assert_eq!(seen.len(), 4);
        assert_eq!((ra.train_len, ra.val_len), (18, 2));
        let min = ra.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(ra.best_val_loss, min);
        assert_eq!(ra.val_loss[ra.best_epoch - 1], min);
        // training reduces the loss from the uninformed ln 2
        assert!(ra.train_loss.last().unwrap() < &ra.train_loss[0]);
    }
}

//! Accuracy, VAE-loss increase and the attack transfer matrix.

use avic_tensor::{Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_all, default_step_size, AttackMethod, AttackSpec, AttackTarget, Targets};
use crate::error::{Error, Result};
use crate::nn::{ClassifierNet, ParameterStore, VaeNet};
use crate::vae::evaluate_vae;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits: [N, K]` whose argmax equals the label.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    Ok(logits
        .data()
        .chunks(s[1])
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count())
}

/// Percentage of correctly classified images, from any logit source.
pub fn accuracy_with(
    images: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
    mut logits: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty split".into()));
    }
    if images.shape()[0] != n {
        return Err(Error::CountMismatch {
            images: images.shape()[0],
            labels: n,
        });
    }
    let mut correct = 0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let l = logits(&images.slice_rows(start, end)?)?;
        correct += count_correct(&l, &labels[start..end])?;
    }
    Ok(100.0 * correct as f64 / n as f64)
}

pub fn classifier_logits<T: Scalar>(
    net: &ClassifierNet,
    store: &ParameterStore<T>,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x.cast::<T>());
    Ok(net.forward(&p, &xv)?.value().cast())
}

pub fn evaluate_accuracy<T: Scalar>(
    net: &ClassifierNet,
    store: &ParameterStore<T>,
    images: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    accuracy_with(images, labels, batch_size, |x| classifier_logits(net, store, x))
}

/// Cross-entropy of every image, evaluated in f64 from the logits.
pub fn per_example_cross_entropy<T: Scalar>(
    net: &ClassifierNet,
    store: &ParameterStore<T>,
    images: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let n = labels.len();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let l = classifier_logits(net, store, &images.slice_rows(start, end)?)?;
        let k = l.shape()[1];
        for (row, &y) in l.data().chunks(k).zip(&labels[start..end]) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            out.push(lse - row[y] as f64);
        }
    }
    Ok(out)
}

/// `100·(adv − clean)/clean`.
pub fn increase_rate(clean: f64, adv: f64) -> Result<f64> {
    if clean == 0.0 {
        return Err(Error::Degenerate {
            detail: "clean VAE loss is 0, increase rate undefined".into(),
        });
    }
    Ok(100.0 * (adv - clean) / clean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossIncrease {
    pub clean: f64,
    pub adv: f64,
    pub rate: f64,
}

/// Mean VAE loss on clean and attacked images with identical batch order
/// and noise.
pub fn vae_loss_increase<T: Scalar>(
    net: &VaeNet,
    store: &ParameterStore<T>,
    clean: &Tensor<f32>,
    adv: &Tensor<f32>,
    batch_size: usize,
    seed: u64,
) -> Result<LossIncrease> {
    let (c, _) = evaluate_vae(net, store, clean, batch_size, seed)?;
    let (a, _) = evaluate_vae(net, store, adv, batch_size, seed)?;
    Ok(LossIncrease {
        clean: c,
        adv: a,
        rate: increase_rate(c, a)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub epsilon: f64,
    pub target: AttackTarget,
    pub method: AttackMethod,
    /// Classifier accuracy on the attacked images.
    pub accuracy: f64,
    pub vae_clean_loss: f64,
    pub vae_adv_loss: f64,
    pub increase_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdSettings {
    pub steps: usize,
    /// `2.5·ε / steps` when absent.
    pub step_size: Option<f64>,
    pub rand_init: bool,
}

impl Default for PgdSettings {
    fn default() -> Self {
        Self {
            steps: AttackSpec::DEFAULT_PGD_STEPS,
            step_size: None,
            rand_init: false,
        }
    }
}

impl PgdSettings {
    pub fn spec(&self, target: AttackTarget, epsilon: f64, seed: u64) -> AttackSpec {
        let mut s = AttackSpec::pgd(target, epsilon, self.steps).with_seed(seed);
        s.step_size = self.step_size.unwrap_or_else(|| default_step_size(epsilon, self.steps));
        s.rand_init = self.rand_init;
        s
    }
}

/// For every ε: classifier-targeted PGD, VAE-targeted PGD and, when a
/// generator is given, the generator attack, each scored by classifier
/// accuracy and VAE-loss increase rate.
#[allow(clippy::too_many_arguments)]
pub fn transfer_matrix<T: Scalar>(
    targets: &Targets<'_, T>,
    images: &Tensor<f32>,
    labels: &[usize],
    eps_list: &[f64],
    pgd: PgdSettings,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TransferCell>> {
    let (cls_net, cls_store) = targets
        .classifier
        .ok_or_else(|| Error::InvalidArgument("transfer matrix needs a classifier".into()))?;
    let (vae_net, vae_store) = targets
        .vae
        .ok_or_else(|| Error::InvalidArgument("transfer matrix needs a VAE".into()))?;
    let mut cells = Vec::new();
    for &eps in eps_list {
        let mut specs = vec![
            pgd.spec(AttackTarget::Classifier, eps, seed),
            pgd.spec(AttackTarget::Vae, eps, seed),
        ];
        if targets.generator.is_some() {
            specs.push(AttackSpec::generator(eps).with_seed(seed));
        }
        for spec in specs {
            let adv = attack_all(&spec, targets, images, labels, batch_size)?;
            let inc = vae_loss_increase(vae_net, vae_store, images, &adv, batch_size, seed)?;
            cells.push(TransferCell {
                epsilon: eps,
                target: spec.target,
                method: spec.method,
                accuracy: evaluate_accuracy(cls_net, cls_store, &adv, labels, batch_size)?,
                vae_clean_loss: inc.clean,
                vae_adv_loss: inc.adv,
                increase_rate: inc.rate,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0f32, 2.0, 2.0]), 1);
    }

    #[test]
    fn increase_rate_definition() {
        assert_eq!(increase_rate(2.0, 3.0).unwrap(), 50.0);
        assert_eq!(increase_rate(1.7, 1.7).unwrap(), 0.0);
        assert!(matches!(increase_rate(0.0, 1.0), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn one_hot_stub_is_perfect() {
        let labels = [3usize, 1, 4, 1, 5];
        let images = Tensor::<f32>::zeros(vec![5, 1, 1, 1]).unwrap();
        let mut seen = 0;
        let acc = accuracy_with(&images, &labels, 2, |x| {
            let n = x.shape()[0];
            let mut d = vec![0.0f32; n * 10];
            for i in 0..n {
                d[i * 10 + labels[seen + i]] = 1.0;
            }
            seen += n;
            Ok(Tensor::new(vec![n, 10], d)?)
        })
        .unwrap();
        assert_eq!(acc, 100.0);
    }
}

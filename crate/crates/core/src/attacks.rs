//! l∞-bounded attacks: the learned generator, FGSM and PGD, aimed at
//! either the VAE loss or the classifier loss.
//!
//! Gradient attacks see their target only through [`AttackObjective`].
//! [`VaeObjective`] holds no labels and [`ClassifierObjective`] holds no
//! VAE, so neither can read the other's inputs.

use std::fmt;
use std::str::FromStr;

use avic_tensor::{softmax_cross_entropy, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ClassifierNet, GeneratorNet, ParameterStore, VaeNet};
use crate::rng::{self, tag};
use crate::vae::{vae_forward, vae_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Generator,
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    Vae,
    Classifier,
}

macro_rules! str_enum {
    ($ty:ident { $($var:ident => $s:literal),+ }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(AttackMethod { Generator => "generator", Fgsm => "fgsm", Pgd => "pgd" });
str_enum!(AttackTarget { Vae => "vae", Classifier => "classifier" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub target: AttackTarget,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub rand_init: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub const DEFAULT_PGD_STEPS: usize = 10;

    pub fn fgsm(target: AttackTarget, epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            target,
            epsilon,
            steps: 1,
            step_size: epsilon,
            rand_init: false,
            seed: 0,
        }
    }

    /// PGD with step size `2.5·ε / steps`.
    pub fn pgd(target: AttackTarget, epsilon: f64, steps: usize) -> Self {
        Self {
            method: AttackMethod::Pgd,
            target,
            epsilon,
            steps,
            step_size: default_step_size(epsilon, steps),
            rand_init: false,
            seed: 0,
        }
    }

    pub fn generator(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Generator,
            target: AttackTarget::Vae,
            epsilon,
            steps: 1,
            step_size: 0.0,
            rand_init: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.method == AttackMethod::Pgd {
            if self.steps == 0 {
                return Err(Error::InvalidArgument("pgd needs at least one step".into()));
            }
            if (self.step_size.is_nan() || self.step_size <= 0.0) && self.epsilon > 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "pgd step size must be positive, got {}",
                    self.step_size
                )));
            }
        }
        if self.method == AttackMethod::Generator && self.target != AttackTarget::Vae {
            return Err(Error::InvalidArgument("the generator attack targets the VAE".into()));
        }
        Ok(())
    }
}

pub fn default_step_size(epsilon: f64, steps: usize) -> f64 {
    2.5 * epsilon / steps.max(1) as f64
}

/// A differentiable scalar loss of an input batch.
pub trait AttackObjective<T: Scalar> {
    /// Loss value and its gradient with respect to `x`.
    fn loss_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)>;
}

/// VAE loss with the reparameterization noise fixed by `noise_key`.
pub struct VaeObjective<'a, T: Scalar> {
    pub net: &'a VaeNet,
    pub store: &'a ParameterStore<T>,
    pub noise_key: u64,
}

impl<T: Scalar> AttackObjective<T> for VaeObjective<'_, T> {
    fn loss_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let xv = tape.variable(x.clone());
        let out = vae_forward(self.net, &p, &xv, self.noise_key)?;
        let loss = vae_loss(&xv, &out)?;
        grad_of(&tape, &loss, &xv)
    }
}

/// Mean cross-entropy against the true labels.
pub struct ClassifierObjective<'a, T: Scalar> {
    pub net: &'a ClassifierNet,
    pub store: &'a ParameterStore<T>,
    pub labels: &'a [usize],
}

impl<T: Scalar> AttackObjective<T> for ClassifierObjective<'_, T> {
    fn loss_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let xv = tape.variable(x.clone());
        let logits = self.net.forward(&p, &xv)?;
        let loss = softmax_cross_entropy(&logits, self.labels)?;
        grad_of(&tape, &loss, &xv)
    }
}

fn grad_of<T: Scalar>(tape: &Tape<T>, loss: &Var<'_, T>, x: &Var<'_, T>) -> Result<(f64, Tensor<T>)> {
    let value = loss.item().to_f64();
    let mut g = tape.backward(loss)?;
    let grad = g.remove(x).unwrap_or_else(|| x.value().zeros_like());
    Ok((value, grad))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::ZERO).min(T::ONE)
}

/// `clamp(x + step·sign(g), 0, 1)`.
fn signed_step<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, step: T) -> Result<Tensor<T>> {
    Ok(x.zip_map(g, |xi, gi| clamp01(xi + step * sign(gi)))?)
}

/// Clamps `candidate` into `[origin − ε, origin + ε] ∩ [0, 1]`.
pub fn project_linf<T: Scalar>(origin: &Tensor<T>, candidate: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    let e = T::from_f64(epsilon);
    Ok(origin.zip_map(candidate, |o, c| clamp01(c.max(o - e).min(o + e)))?)
}

/// `clamp(x + ε·sign(∇ₓ loss), 0, 1)`, with `sign(0) = 0`.
pub fn fgsm<T: Scalar>(objective: &dyn AttackObjective<T>, x: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    let (_, g) = objective.loss_and_grad(x)?;
    signed_step(x, &g, T::from_f64(epsilon))
}

/// Projected signed-gradient ascent. `batch` selects the random-start
/// stream when `spec.rand_init` is set.
pub fn pgd<T: Scalar>(
    objective: &dyn AttackObjective<T>,
    x: &Tensor<T>,
    spec: &AttackSpec,
    batch: usize,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let mut xt = if spec.rand_init {
        let mut r = ChaCha8Rng::seed_from_u64(rng::derive_seed(&[spec.seed, tag::PGD_INIT, batch as u64]));
        let e = spec.epsilon;
        let delta = if e > 0.0 {
            rng::uniform_tensor::<T>(x.shape(), -e, e, &mut r)?
        } else {
            x.zeros_like()
        };
        let start = x.zip_map(&delta, |a, d| clamp01(a + d))?;
        project_linf(x, &start, e)?
    } else {
        x.clone()
    };
    let step = T::from_f64(spec.step_size);
    for _ in 0..spec.steps {
        let (_, g) = objective.loss_and_grad(&xt)?;
        let cand = signed_step(&xt, &g, step)?;
        xt = project_linf(x, &cand, spec.epsilon)?;
    }
    Ok(xt)
}

/// `x_a = clamp(x + ε·G(x), 0, 1)` on the tape.
pub fn generator_attack<'t, T: Scalar>(
    net: &GeneratorNet,
    params: &Bound<'t, T>,
    x: &Var<'t, T>,
    epsilon: f64,
) -> Result<Var<'t, T>> {
    let g = net.forward(params, x)?;
    Ok(x.add(&g.scale(T::from_f64(epsilon))?)?.clamp(T::ZERO, T::ONE)?)
}

/// [`generator_attack`] on plain tensors, without gradients.
pub fn generate<T: Scalar>(
    net: &GeneratorNet,
    store: &ParameterStore<T>,
    x: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let xa = generator_attack(net, &p, &xv, epsilon)?;
    Ok((*xa.value()).clone())
}

/// Attack noise for VAE-targeted gradient attacks on batch `batch`.
pub fn attack_noise_key(seed: u64, batch: usize) -> u64 {
    rng::derive_seed(&[seed, tag::NOISE_ATTACK, batch as u64])
}

/// Trained models available to attacks.
pub struct Targets<'a, T: Scalar> {
    pub vae: Option<(&'a VaeNet, &'a ParameterStore<T>)>,
    pub classifier: Option<(&'a ClassifierNet, &'a ParameterStore<T>)>,
    pub generator: Option<(&'a GeneratorNet, &'a ParameterStore<T>)>,
}

/// Applies `spec` to one batch.
pub fn attack_batch<T: Scalar>(
    spec: &AttackSpec,
    targets: &Targets<'_, T>,
    x: &Tensor<T>,
    labels: &[usize],
    batch: usize,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let missing = |what: &str| Error::InvalidArgument(format!("{} attack needs a trained {what}", spec.method));
    if spec.method == AttackMethod::Generator {
        let (net, store) = targets.generator.ok_or_else(|| missing("generator"))?;
        return generate(net, store, x, spec.epsilon);
    }
    let vae_obj;
    let cls_obj;
    let objective: &dyn AttackObjective<T> = match spec.target {
        AttackTarget::Vae => {
            let (net, store) = targets.vae.ok_or_else(|| missing("VAE"))?;
            vae_obj = VaeObjective {
                net,
                store,
                noise_key: attack_noise_key(spec.seed, batch),
            };
            &vae_obj
        }
        AttackTarget::Classifier => {
            let (net, store) = targets.classifier.ok_or_else(|| missing("classifier"))?;
            cls_obj = ClassifierObjective { net, store, labels };
            &cls_obj
        }
    };
    match spec.method {
        AttackMethod::Fgsm => fgsm(objective, x, spec.epsilon),
        _ => pgd(objective, x, spec, batch),
    }
}

/// Applies `spec` to every image of `images` in sequential batches.
pub fn attack_all<T: Scalar>(
    spec: &AttackSpec,
    targets: &Targets<'_, T>,
    images: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    if spec.epsilon == 0.0 {
        return Ok(images.clone());
    }
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(images.numel());
    for (b, start) in (0..n).step_by(batch_size.max(1)).enumerate() {
        let end = (start + batch_size).min(n);
        let x = images.slice_rows(start, end)?.cast::<T>();
        let xa = attack_batch(spec, targets, &x, &labels[start..end], b)?;
        data.extend(xa.cast::<f32>().into_data());
    }
    Ok(Tensor::new(images.shape().to_vec(), data)?)
}

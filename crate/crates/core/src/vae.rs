//! VAE forward pass, loss and stage-1 training.
//!
//! The likelihood is a unit-variance Gaussian, so the reconstruction term
//! is `½‖x − x̃‖²`; the prior is standard normal. Both terms are summed
//! over pixels or latent dimensions and averaged over the batch.

use avic_tensor::{half_sse, kl_diag_gaussian, Scalar, Tape, Tensor, Var};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Bound, ParameterStore, VaeNet};
use crate::rng::{self, tag};
use crate::train::{run_epochs, Schedule, StageResult};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

pub struct VaeOutput<'t, T: Scalar> {
    pub x_recon: Var<'t, T>,
    pub mu: Var<'t, T>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var<'t, T>,
    pub z: Var<'t, T>,
    pub noise: Tensor<T>,
}

/// Encodes, samples `z = mu + exp(½·logvar) ⊙ noise` and decodes.
pub fn vae_forward_with_noise<'t, T: Scalar>(
    net: &VaeNet,
    params: &Bound<'t, T>,
    x: &Var<'t, T>,
    noise: Tensor<T>,
) -> Result<VaeOutput<'t, T>> {
    let (c, h, w) = net.dataset.image_shape();
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::InvalidArgument(format!(
            "VAE for {} expects [N, {c}, {h}, {w}], got {shape:?}",
            net.dataset
        )));
    }
    if noise.shape() != [shape[0], net.latent_dim] {
        return Err(Error::InvalidArgument(format!(
            "noise must be [{}, {}], got {:?}",
            shape[0],
            net.latent_dim,
            noise.shape()
        )));
    }
    let (mu, logvar) = net.encode(params, x)?;
    let logvar = logvar.clamp(T::from_f64(LOGVAR_MIN), T::from_f64(LOGVAR_MAX))?;
    let n = x.tape().constant(noise.clone());
    let z = mu.add(&logvar.scale(T::from_f64(0.5))?.exp()?.mul(&n)?)?;
    let x_recon = net.decode(params, &z)?;
    Ok(VaeOutput {
        x_recon,
        mu,
        logvar,
        z,
        noise,
    })
}

/// [`vae_forward_with_noise`] with standard normal noise keyed by `noise_key`.
pub fn vae_forward<'t, T: Scalar>(
    net: &VaeNet,
    params: &Bound<'t, T>,
    x: &Var<'t, T>,
    noise_key: u64,
) -> Result<VaeOutput<'t, T>> {
    let noise = rng::normal_tensor(&[x.shape()[0], net.latent_dim], noise_key)?;
    vae_forward_with_noise(net, params, x, noise)
}

/// `half_sse(x, x̃) + KL(q(z|x) ‖ N(0, I))`.
pub fn vae_loss<'t, T: Scalar>(x: &Var<'t, T>, out: &VaeOutput<'t, T>) -> Result<Var<'t, T>> {
    let rec = half_sse(x, &out.x_recon)?;
    let kl = kl_diag_gaussian(&out.mu, &out.logvar)?;
    Ok(rec.add(&kl)?)
}

pub fn noise_key(seed: u64, stream: u64, epoch: usize, batch: usize) -> u64 {
    rng::derive_seed(&[seed, stream, epoch as u64, batch as u64])
}

/// Stage 1: Adam descent on the VAE loss over clean images.
pub fn train_vae<T: Scalar>(
    net: &VaeNet,
    store: &mut ParameterStore<T>,
    adam: &mut AdamState<T>,
    split: &DatasetSplit,
    schedule: Schedule,
) -> Result<StageResult> {
    store.require_unfrozen()?;
    run_epochs("vae", split, schedule, |epoch, b, batch| {
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let x = tape.constant(batch.images.cast());
        let out = vae_forward(net, &p, &x, noise_key(schedule.seed, tag::NOISE_VAE, epoch, b))?;
        let loss = vae_loss(&x, &out)?;
        let value = loss.item().to_f64();
        let grads = p.grads(&tape.backward(&loss)?)?;
        adam_step(store, &grads, adam)?;
        Ok(value)
    })
}

/// Per-batch evaluation noise, shared by clean and attacked evaluation.
pub fn eval_noise_key(seed: u64, batch: usize) -> u64 {
    rng::derive_seed(&[seed, tag::NOISE_EVAL, batch as u64])
}

/// Mean VAE loss and mean reconstruction half-SSE over `images`, in
/// sequential batches with evaluation noise.
pub fn evaluate_vae<T: Scalar>(
    net: &VaeNet,
    store: &ParameterStore<T>,
    images: &Tensor<f32>,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let (mut loss, mut rec) = (0.0, 0.0);
    for (b, start) in (0..n).step_by(batch_size.max(1)).enumerate() {
        let end = (start + batch_size).min(n);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(images.slice_rows(start, end)?.cast());
        let out = vae_forward(net, &p, &x, eval_noise_key(seed, b))?;
        let w = (end - start) as f64;
        loss += vae_loss(&x, &out)?.item().to_f64() * w;
        rec += half_sse(&x, &out.x_recon)?.item().to_f64() * w;
    }
    Ok((loss / n as f64, rec / n as f64))
}

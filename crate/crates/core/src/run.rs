//! End-to-end run: training, evaluation and report assembly.

use std::time::Instant;

use avic_tensor::{Scalar, Tape, Tensor};

use crate::attacks::{generate, Targets};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, increase_rate, transfer_matrix, PgdSettings};
use crate::nn::{ParameterStore, VaeNet};
use crate::pipeline::{train_all, RunConfig, Trained};
use crate::report::{sample_grid, Ppm, RunReport, Timing, FORMAT_VERSION};
use crate::vae::{eval_noise_key, evaluate_vae, vae_forward};

pub struct RunOutcome<T: Scalar> {
    pub report: RunReport,
    pub timing: Timing,
    pub trained: Trained<T>,
    /// Clean, generated, and both reconstructions, for the first test images.
    pub samples: Option<Ppm>,
}

/// Generator outputs for every image, in sequential batches.
pub fn generate_all<T: Scalar>(
    net: &crate::nn::GeneratorNet,
    store: &ParameterStore<T>,
    images: &Tensor<f32>,
    epsilon: f64,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(images.numel());
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let xa = generate(net, store, &images.slice_rows(start, end)?.cast::<T>(), epsilon)?;
        data.extend(xa.cast::<f32>().into_data());
    }
    Ok(Tensor::new(images.shape().to_vec(), data)?)
}

/// VAE reconstructions with the first evaluation-noise draw.
pub fn reconstruct<T: Scalar>(
    net: &VaeNet,
    store: &ParameterStore<T>,
    images: &Tensor<f32>,
    seed: u64,
) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(images.cast::<T>());
    let out = vae_forward(net, &p, &x, eval_noise_key(seed, 0))?;
    Ok(out.x_recon.value().cast())
}

/// Evaluates trained models on `test` and assembles the report.
pub fn evaluate_run<T: Scalar>(cfg: &RunConfig, trained: &Trained<T>, test: &DatasetSplit) -> Result<RunReport> {
    let bs = cfg.batch_size;
    let (images, labels) = (&test.images, test.labels.as_slice());
    let cls = &trained.classifier;
    let acc = |store: &ParameterStore<T>, x: &Tensor<f32>| evaluate_accuracy(&cls.net, store, x, labels, bs);

    let gen = &trained.generator;
    let adv = generate_all(&gen.net, &gen.params, images, cfg.epsilon, bs)?;
    let vae = &trained.vae;
    let (vae_clean_loss, _) = evaluate_vae(&vae.net, &vae.params, images, bs, cfg.seed)?;
    let (vae_adv_loss, _) = evaluate_vae(&vae.net, &vae.params, &adv, bs, cfg.seed)?;
    let increase = match increase_rate(vae_clean_loss, vae_adv_loss) {
        Ok(r) => Some(r),
        Err(Error::Degenerate { .. }) => None,
        Err(e) => return Err(e),
    };

    let clean = &trained.clean_classifier;
    let targets = Targets {
        vae: Some((&vae.net, &vae.params)),
        classifier: Some((&clean.net, &clean.params)),
        generator: Some((&gen.net, &gen.params)),
    };
    let pgd = PgdSettings {
        steps: cfg.pgd_steps,
        step_size: cfg.pgd_step_size,
        rand_init: cfg.pgd_rand_init,
    };
    let transfer = transfer_matrix(&targets, images, labels, &cfg.transfer_eps, pgd, bs, cfg.seed)?;

    Ok(RunReport {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        stages: trained.stages.clone(),
        clean_accuracy: evaluate_accuracy(&clean.net, &clean.params, images, labels, bs)?,
        separate_accuracy: acc(&trained.separate_classifier, images)?,
        avic_accuracy: acc(&cls.params, images)?,
        avic_adv_accuracy: acc(&cls.params, &adv)?,
        vae_clean_loss,
        vae_adv_loss,
        increase_rate: increase,
        transfer,
    })
}

/// Sample grid of clean images, generator outputs and their reconstructions.
pub fn samples<T: Scalar>(cfg: &RunConfig, trained: &Trained<T>, test: &DatasetSplit) -> Result<Option<Ppm>> {
    let n = cfg.samples.min(test.len());
    if n == 0 {
        return Ok(None);
    }
    let x = test.images.slice_rows(0, n)?;
    let gen = &trained.generator;
    let xa = generate_all(&gen.net, &gen.params, &x, cfg.epsilon, n)?;
    let vae = &trained.vae;
    let rx = reconstruct(&vae.net, &vae.params, &x, cfg.seed)?;
    let rxa = reconstruct(&vae.net, &vae.params, &xa, cfg.seed)?;
    Ok(Some(sample_grid(&[&x, &xa, &rx, &rxa], n)?))
}

/// Trains every stage, evaluates on `test` and builds the report.
pub fn run_avic<T: Scalar>(cfg: &RunConfig, train: &DatasetSplit, test: &DatasetSplit) -> Result<RunOutcome<T>> {
    let trained = train_all::<T>(cfg, train)?;
    let mut timing = Timing::default();
    for s in &trained.stages {
        timing.seconds.insert(s.stage.clone(), s.wall_time_s);
    }
    let start = Instant::now();
    let report = evaluate_run(cfg, &trained, test).map_err(|e| e.in_stage("evaluation"))?;
    let samples = samples(cfg, &trained, test).map_err(|e| e.in_stage("evaluation"))?;
    timing
        .seconds
        .insert("evaluation".into(), start.elapsed().as_secs_f64());
    Ok(RunOutcome {
        report,
        timing,
        trained,
        samples,
    })
}

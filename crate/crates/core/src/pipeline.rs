//! The staged procedure: VAE, then the generator against the frozen VAE,
//! then the classifier on generator outputs, then joint fine-tuning of
//! generator and classifier.

use avic_tensor::{softmax_cross_entropy, Scalar, Tape, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::attacks::{generate, generator_attack};
use crate::data::{DatasetId, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Arch, Bound, ClassifierNet, GeneratorNet, ParameterStore, VaeNet};
use crate::rng::tag;
use crate::train::{run_epochs, Schedule, StageResult};
use crate::vae::{noise_key, train_vae, vae_forward, vae_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epochs {
    pub vae: usize,
    pub gen: usize,
    pub cls: usize,
    pub global: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Self {
            vae: 5,
            gen: 3,
            cls: 3,
            global: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetId,
    pub arch: Arch,
    pub epsilon: f64,
    pub alpha: f64,
    pub vae_lr: f64,
    pub cls_lr: f64,
    pub gen_lr: f64,
    pub epochs: Epochs,
    pub batch_size: usize,
    pub seed: u64,
    /// First records of the training split only.
    pub train_limit: Option<usize>,
    /// First records of the test split only.
    pub test_limit: Option<usize>,
    /// Dataset default when absent.
    pub latent_dim: Option<usize>,
    pub pgd_steps: usize,
    /// `2.5·ε / pgd_steps` when absent.
    pub pgd_step_size: Option<f64>,
    pub pgd_rand_init: bool,
    pub transfer_eps: Vec<f64>,
    /// Test images in the sample grid.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            arch: Arch::PlainCnn,
            epsilon: 0.02,
            alpha: 1.0,
            vae_lr: 0.05,
            cls_lr: 0.005,
            gen_lr: 0.001,
            epochs: Epochs::default(),
            batch_size: 128,
            seed: 0,
            train_limit: None,
            test_limit: None,
            latent_dim: None,
            pgd_steps: 10,
            pgd_step_size: None,
            pgd_rand_init: false,
            transfer_eps: vec![0.0, 0.02, 0.1, 0.3],
            samples: 8,
        }
    }
}

impl RunConfig {
    /// Checks every invariant; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::InvalidArgument(format!("{key}: {why}")));
        for (key, lr) in [
            ("vae_lr", self.vae_lr),
            ("cls_lr", self.cls_lr),
            ("gen_lr", self.gen_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, format!("learning rate must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", format!("must lie in [0, 1], got {}", self.epsilon));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be nonnegative, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.pgd_steps == 0 {
            return bad("pgd_steps", "must be positive".into());
        }
        if let Some(s) = self.pgd_step_size {
            if !(s > 0.0 && s.is_finite()) {
                return bad("pgd_step_size", format!("must be positive, got {s}"));
            }
        }
        if let Some(&e) = self.transfer_eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return bad("transfer_eps", format!("{e} is outside [0, 1]"));
        }
        if self.latent_dim == Some(0) {
            return bad("latent_dim", "must be positive".into());
        }
        for (key, limit) in [("train_limit", self.train_limit), ("test_limit", self.test_limit)] {
            if limit == Some(0) {
                return bad(key, "must be positive".into());
            }
        }
        Ok(())
    }

    pub fn latent(&self) -> usize {
        self.latent_dim.unwrap_or_else(|| self.dataset.default_latent_dim())
    }

    pub fn schedule(&self, epochs: usize) -> Schedule {
        Schedule::new(epochs, self.batch_size, self.seed)
    }
}

/// A network with its parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Model<N, T: Scalar> {
    pub net: N,
    pub params: ParameterStore<T>,
    pub adam: AdamState<T>,
}

impl<N, T: Scalar> Model<N, T> {
    pub fn new(net: N, params: ParameterStore<T>, lr: f64) -> Self {
        let adam = AdamState::new(&params, lr);
        Self { net, params, adam }
    }
}

pub type Vae<T> = Model<VaeNet, T>;
pub type Generator<T> = Model<GeneratorNet, T>;
pub type Classifier<T> = Model<ClassifierNet, T>;

pub fn build_vae<T: Scalar>(cfg: &RunConfig) -> Result<Vae<T>> {
    let net = VaeNet::new(cfg.dataset, cfg.latent())?;
    let params = net.init(crate::rng::derive_seed(&[cfg.seed, tag::INIT_VAE]))?;
    Ok(Model::new(net, params, cfg.vae_lr))
}

pub fn build_generator<T: Scalar>(cfg: &RunConfig) -> Result<Generator<T>> {
    let net = GeneratorNet::new(cfg.dataset);
    let params = net.init(crate::rng::derive_seed(&[cfg.seed, tag::INIT_GEN]))?;
    Ok(Model::new(net, params, cfg.gen_lr))
}

pub fn build_classifier<T: Scalar>(cfg: &RunConfig) -> Result<Classifier<T>> {
    let net = ClassifierNet::new(cfg.arch, cfg.dataset);
    let params = net.init(crate::rng::derive_seed(&[cfg.seed, tag::INIT_CLS]))?;
    Ok(Model::new(net, params, cfg.cls_lr))
}

/// Stage 1.
pub fn train_vae_stage<T: Scalar>(vae: &mut Vae<T>, split: &DatasetSplit, schedule: Schedule) -> Result<StageResult> {
    train_vae(&vae.net, &mut vae.params, &mut vae.adam, split, schedule)
}

/// `L_VAE(x_a, x̃_a)` and its gradient with respect to the generator.
pub fn separate_generator_step<T: Scalar>(
    gen: &Generator<T>,
    vae: &Vae<T>,
    x: &Tensor<T>,
    epsilon: f64,
    noise: u64,
) -> Result<(f64, IndexMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let gp = gen.params.bind(&tape, true);
    let vp = vae.params.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let xa = generator_attack(&gen.net, &gp, &xv, epsilon)?;
    let out = vae_forward(&vae.net, &vp, &xa, noise)?;
    let l = vae_loss(&xa, &out)?;
    let value = l.item().to_f64();
    let grads = gp.grads(&tape.backward(&l.neg()?)?)?;
    Ok((value, grads))
}

/// Stage 2a: ascent on the VAE loss of generated examples, VAE frozen.
/// The curve records the mean `L_VAE(x_a, x̃_a)`.
pub fn train_generator_separate<T: Scalar>(
    gen: &mut Generator<T>,
    vae: &Vae<T>,
    split: &DatasetSplit,
    epsilon: f64,
    schedule: Schedule,
) -> Result<StageResult> {
    vae.params.require_frozen()?;
    gen.params.require_unfrozen()?;
    run_epochs("generator", split, schedule, |epoch, b, batch| {
        let key = noise_key(schedule.seed, tag::NOISE_GEN, epoch, b);
        let (value, grads) = separate_generator_step(gen, vae, &batch.images.cast(), epsilon, key)?;
        adam_step(&mut gen.params, &grads, &mut gen.adam)?;
        Ok(value)
    })
}

fn classifier_step<T: Scalar>(cls: &mut Classifier<T>, x: Tensor<T>, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let p = cls.params.bind(&tape, true);
    let xv = tape.constant(x);
    let loss = softmax_cross_entropy(&cls.net.forward(&p, &xv)?, labels)?;
    let value = loss.item().to_f64();
    let grads = p.grads(&tape.backward(&loss)?)?;
    adam_step(&mut cls.params, &grads, &mut cls.adam)?;
    Ok(value)
}

/// Stage 2b: cross-entropy on generator outputs only, generator frozen.
pub fn train_classifier_adv<T: Scalar>(
    cls: &mut Classifier<T>,
    gen: &Generator<T>,
    split: &DatasetSplit,
    epsilon: f64,
    schedule: Schedule,
) -> Result<StageResult> {
    gen.params.require_frozen()?;
    run_epochs("classifier", split, schedule, |_, _, batch| {
        let xa = generate(&gen.net, &gen.params, &batch.images.cast(), epsilon)?;
        classifier_step(cls, xa, &batch.labels)
    })
}

/// Plain training on clean images; the reference for the pipeline.
pub fn train_classifier_clean<T: Scalar>(
    cls: &mut Classifier<T>,
    split: &DatasetSplit,
    schedule: Schedule,
) -> Result<StageResult> {
    run_epochs("clean", split, schedule, |_, _, batch| {
        classifier_step(cls, batch.images.cast(), &batch.labels)
    })
}

pub struct GlobalObjective<'t, T: Scalar> {
    /// `−L_VAE + α·L_CLS`; plain `−L_VAE` when `α = 0`.
    pub j: Var<'t, T>,
    pub l_vae: Var<'t, T>,
    pub l_cls: Var<'t, T>,
}

/// One shared forward: `x_a = G(x)`, `x̃_a = VAE(x_a)`, `ŷ = CLS(x_a)`.
#[allow(clippy::too_many_arguments)]
pub fn global_objective<'t, T: Scalar>(
    gen: &GeneratorNet,
    gp: &Bound<'t, T>,
    vae: &VaeNet,
    vp: &Bound<'t, T>,
    cls: &ClassifierNet,
    cp: &Bound<'t, T>,
    x: &Var<'t, T>,
    labels: &[usize],
    epsilon: f64,
    alpha: f64,
    noise: u64,
) -> Result<GlobalObjective<'t, T>> {
    let xa = generator_attack(gen, gp, x, epsilon)?;
    let out = vae_forward(vae, vp, &xa, noise)?;
    let l_vae = vae_loss(&xa, &out)?;
    let l_cls = softmax_cross_entropy(&cls.forward(cp, &xa)?, labels)?;
    let j = if alpha == 0.0 {
        l_vae.neg()?
    } else {
        l_vae.neg()?.add(&l_cls.scale(T::from_f64(alpha))?)?
    };
    Ok(GlobalObjective { j, l_vae, l_cls })
}

pub struct GlobalStep<T: Scalar> {
    pub l_vae: f64,
    pub l_cls: f64,
    pub gen_grads: IndexMap<String, Tensor<T>>,
    pub cls_grads: IndexMap<String, Tensor<T>>,
}

/// Gradients of `J` for the generator (classifier held constant) and of
/// `L_CLS` for the classifier (`x_a` held constant), from one forward.
#[allow(clippy::too_many_arguments)]
pub fn global_step<T: Scalar>(
    gen: &Generator<T>,
    vae: &Vae<T>,
    cls: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
    alpha: f64,
    noise: u64,
) -> Result<GlobalStep<T>> {
    let tape = Tape::new();
    let gp = gen.params.bind(&tape, true);
    let vp = vae.params.bind(&tape, false);
    let cp = cls.params.bind(&tape, true);
    let xv = tape.constant(x.clone());
    let obj = global_objective(
        &gen.net, &gp, &vae.net, &vp, &cls.net, &cp, &xv, labels, epsilon, alpha, noise,
    )?;
    let (gv, cv) = (gp.vars(), cp.vars());
    let maps = tape.backward_split(&[(obj.j, &gv), (obj.l_cls, &cv)])?;
    Ok(GlobalStep {
        l_vae: obj.l_vae.item().to_f64(),
        l_cls: obj.l_cls.item().to_f64(),
        gen_grads: gp.grads(&maps[0])?,
        cls_grads: cp.grads(&maps[1])?,
    })
}

/// Stage 3: both updates every batch, VAE frozen. The curve records the
/// mean `L_CLS`; `schedule` should continue the classifier's epochs.
pub fn global_finetune<T: Scalar>(
    gen: &mut Generator<T>,
    cls: &mut Classifier<T>,
    vae: &Vae<T>,
    split: &DatasetSplit,
    epsilon: f64,
    alpha: f64,
    schedule: Schedule,
) -> Result<StageResult> {
    vae.params.require_frozen()?;
    gen.params.require_unfrozen()?;
    run_epochs("global", split, schedule, |epoch, b, batch| {
        let key = noise_key(schedule.seed, tag::NOISE_GLOBAL, epoch, b);
        let step = global_step(gen, vae, cls, &batch.images.cast(), &batch.labels, epsilon, alpha, key)?;
        adam_step(&mut gen.params, &step.gen_grads, &mut gen.adam)?;
        adam_step(&mut cls.params, &step.cls_grads, &mut cls.adam)?;
        Ok(step.l_cls)
    })
}

/// Trained models of one run.
pub struct Trained<T: Scalar> {
    pub vae: Vae<T>,
    pub generator: Generator<T>,
    pub classifier: Classifier<T>,
    /// Snapshot after stage 2b, before fine-tuning.
    pub separate_classifier: ParameterStore<T>,
    pub clean_classifier: Classifier<T>,
    pub stages: Vec<StageResult>,
}

/// Runs every training stage plus the clean baseline. The baseline trains
/// for `cls + global` epochs from the same initialization and batch
/// stream as the pipeline classifier.
pub fn train_all<T: Scalar>(cfg: &RunConfig, train: &DatasetSplit) -> Result<Trained<T>> {
    cfg.validate()?;
    let e = cfg.epochs;
    let mut vae = build_vae::<T>(cfg)?;
    let mut generator = build_generator::<T>(cfg)?;
    let mut classifier = build_classifier::<T>(cfg)?;
    let mut clean_classifier = build_classifier::<T>(cfg)?;
    let mut stages = Vec::new();

    stages.push(train_vae_stage(&mut vae, train, cfg.schedule(e.vae)).map_err(|err| err.in_stage("vae"))?);
    vae.params.freeze();

    stages.push(
        train_generator_separate(&mut generator, &vae, train, cfg.epsilon, cfg.schedule(e.gen))
            .map_err(|err| err.in_stage("generator"))?,
    );

    generator.params.freeze();
    stages.push(
        train_classifier_adv(&mut classifier, &generator, train, cfg.epsilon, cfg.schedule(e.cls))
            .map_err(|err| err.in_stage("classifier"))?,
    );
    generator.params.unfreeze();
    let separate_classifier = classifier.params.clone();

    stages.push(
        global_finetune(
            &mut generator,
            &mut classifier,
            &vae,
            train,
            cfg.epsilon,
            cfg.alpha,
            cfg.schedule(e.global).continuing(e.cls),
        )
        .map_err(|err| err.in_stage("global"))?,
    );

    stages.push(
        train_classifier_clean(&mut clean_classifier, train, cfg.schedule(e.cls + e.global))
            .map_err(|err| err.in_stage("clean"))?,
    );

    Ok(Trained {
        vae,
        generator,
        classifier,
        separate_classifier,
        clean_classifier,
        stages,
    })
}
